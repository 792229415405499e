//! BLEU, ROUGE-L and CIDEr-D over tokenized captions.

use std::collections::BTreeMap;

use crate::error::{contract_err, Result};

/// Lowercases, strips punctuation, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = Counts::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Clipped n-gram matches and candidate n-gram total for one order.
fn clipped(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
    for r in references {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_default();
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.values().sum())
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len(c: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn combine(matched: &[usize], total: &[usize], c: usize, r: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (&m, &t) in matched.iter().zip(total) {
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / matched.len() as f64).exp()
}

/// Sentence BLEU-`max_n` with uniform weights, brevity penalty, and no smoothing.
pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> f64 {
    let (m, t): (Vec<_>, Vec<_>) = (1..=max_n).map(|n| clipped(candidate, references, n)).unzip();
    combine(&m, &t, candidate.len(), closest_ref_len(candidate.len(), references))
}

/// Corpus BLEU-1..=`max_n`: clipped counts and lengths are pooled over all pairs before combining.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], max_n: usize) -> Vec<f64> {
    let mut matched = vec![0; max_n];
    let mut total = vec![0; max_n];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in pairs {
        for n in 1..=max_n {
            let (m, t) = clipped(cand, refs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
    }
    (1..=max_n)
        .map(|n| combine(&matched[..n], &total[..n], c, r))
        .collect()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

fn rouge_f(p: f64, r: f64) -> f64 {
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// LCS-based F-score against a single reference.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    rouge_l_multi(candidate, std::slice::from_ref(&reference.to_vec()))
}

/// Multi-reference ROUGE-L: best precision and best recall over references, then combined.
pub fn rouge_l_multi(candidate: &[String], references: &[Vec<String>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in references.iter().filter(|x| !x.is_empty()) {
        let l = lcs(candidate, reference) as f64;
        p = p.max(l / candidate.len() as f64);
        r = r.max(l / reference.len() as f64);
    }
    rouge_f(p, r)
}

pub const CIDER_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

/// Document frequencies of every n-gram (n = 1..=4) over reference sets, one document per image.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    df: BTreeMap<Vec<String>, f64>,
    docs: usize,
}

impl CorpusStats {
    pub fn new(reference_sets: &[Vec<Vec<String>>]) -> Self {
        let mut df: BTreeMap<Vec<String>, f64> = BTreeMap::new();
        for refs in reference_sets {
            let mut seen: BTreeMap<&[String], ()> = BTreeMap::new();
            for r in refs {
                for n in 1..=CIDER_N {
                    for g in ngrams(r, n).into_keys() {
                        seen.insert(g, ());
                    }
                }
            }
            for g in seen.into_keys() {
                *df.entry(g.to_vec()).or_default() += 1.0;
            }
        }
        CorpusStats {
            df,
            docs: reference_sets.len(),
        }
    }

    pub fn documents(&self) -> usize {
        self.docs
    }

    pub fn document_frequency(&self, ngram: &[String]) -> f64 {
        self.df.get(ngram).copied().unwrap_or(0.0)
    }

    fn vectors(&self, tokens: &[String]) -> ([BTreeMap<Vec<String>, f64>; CIDER_N], [f64; CIDER_N]) {
        let log_docs = (self.docs as f64).ln();
        let mut vecs: [BTreeMap<Vec<String>, f64>; CIDER_N] = Default::default();
        let mut norms = [0.0; CIDER_N];
        for n in 1..=CIDER_N {
            for (g, tf) in ngrams(tokens, n) {
                let df = self.document_frequency(g).max(1.0);
                let w = tf as f64 * (log_docs - df.ln());
                norms[n - 1] += w * w;
                vecs[n - 1].insert(g.to_vec(), w);
            }
        }
        (vecs, norms.map(f64::sqrt))
    }

    /// CIDEr-D of `candidate` against `references`.
    pub fn cider(&self, candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
        cider(candidate, references, self)
    }
}

/// CIDEr-D: per-order tf-idf cosine with clipped candidate weights and a Gaussian
/// length penalty, averaged over n = 1..=4 and over references, scaled by 10.
pub fn cider(candidate: &[String], references: &[Vec<String>], stats: &CorpusStats) -> Result<f64> {
    if stats.docs == 0 {
        return contract_err("CIDEr needs corpus statistics over at least one document");
    }
    if references.is_empty() {
        return contract_err("CIDEr needs at least one reference");
    }
    let (cv, cn) = stats.vectors(candidate);
    let mut per_ref = Vec::with_capacity(references.len());
    for reference in references {
        let (rv, rn) = stats.vectors(reference);
        let delta = candidate.len() as f64 - reference.len() as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut score = 0.0;
        for n in 0..CIDER_N {
            if cn[n] == 0.0 || rn[n] == 0.0 {
                continue;
            }
            let dot: f64 = cv[n]
                .iter()
                .filter_map(|(g, &w)| rv[n].get(g).map(|&r| w.min(r) * r))
                .sum();
            score += dot / (cn[n] * rn[n]) * penalty;
        }
        per_ref.push(score / CIDER_N as f64);
    }
    // sorted so the sum does not depend on reference order
    per_ref.sort_by(f64::total_cmp);
    Ok(10.0 * per_ref.iter().sum::<f64>() / references.len() as f64)
}
