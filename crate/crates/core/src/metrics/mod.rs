//! Caption quality metrics and attention-map agreement measures.

mod maps;
mod text;

pub use maps::{
    cc, fractional_ranks, p_described_given_fixated, pearson, sim, spearman, vos_captioning_attention,
    FixationSet, ObjectMask, DESCRIBED_THRESHOLD,
};
pub use text::{
    bleu, cider, corpus_bleu, rouge_l, rouge_l_multi, tokenize, CorpusStats, CIDER_N, CIDER_SIGMA,
    ROUGE_BETA,
};

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

/// Corpus-level caption scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionScores {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub count: usize,
}

/// Scores candidates against their reference sets. CIDEr document
/// frequencies come from `stats` when given, otherwise from these references.
pub fn score_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    stats: Option<&CorpusStats>,
) -> Result<CaptionScores> {
    if candidates.len() != references.len() {
        return contract_err(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        ));
    }
    if candidates.is_empty() {
        return contract_err("nothing to score");
    }
    let own;
    let stats = match stats {
        Some(s) => s,
        None => {
            own = CorpusStats::new(references);
            &own
        }
    };
    let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = candidates
        .iter()
        .cloned()
        .zip(references.iter().cloned())
        .collect();
    let b = corpus_bleu(&pairs, 4);
    let n = candidates.len() as f64;
    let mut rouge = 0.0;
    let mut cid = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        rouge += rouge_l_multi(c, r);
        cid += cider(c, r, stats)?;
    }
    Ok(CaptionScores {
        bleu_1: b[0],
        bleu_2: b[1],
        bleu_3: b[2],
        bleu_4: b[3],
        rouge_l: rouge / n,
        cider: cid / n,
        count: candidates.len(),
    })
}
