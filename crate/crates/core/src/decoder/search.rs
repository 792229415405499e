//! Greedy, sampled, and beam-search decoding over any step function.
//!
//! Tie-breaking is fixed: greedy picks the lowest index among equal maxima,
//! and beam search prefers the lexicographically smallest token sequence
//! among equal scores. Beam scores are raw summed log-probabilities.

use std::cmp::Ordering;

use rand::Rng;
use serde::Serialize;

use super::{BOS, EOS};
use crate::attention_map::AttentionMap;
use crate::error::{contract_err, Result};

/// Output of one decoder step.
pub struct Step<S> {
    /// Log-probabilities over the vocabulary; `-inf` marks tokens that cannot be emitted.
    pub logprobs: Vec<f64>,
    pub state: S,
    pub alpha: Option<AttentionMap>,
}

/// Anything that can be decoded autoregressively from `BOS`.
pub trait StepModel {
    type State: Clone;

    fn initial(&mut self) -> Result<Self::State>;

    fn step(&mut self, state: &Self::State, prev: usize) -> Result<Step<Self::State>>;
}

#[derive(Clone, Debug, Serialize)]
pub struct DecodeResult {
    /// Generated tokens, excluding the terminating `EOS`.
    pub tokens: Vec<usize>,
    /// Log-probability of every emitted token, including `EOS` when present.
    pub step_logprobs: Vec<f64>,
    #[serde(skip)]
    pub alphas: Vec<AttentionMap>,
    pub total_logprob: f64,
    /// `true` when decoding stopped on `EOS` rather than at the length limit.
    pub finished: bool,
}

impl DecodeResult {
    /// Emitted ids, with the final `EOS` when present.
    pub fn emitted(&self) -> Vec<usize> {
        let mut out = self.tokens.clone();
        if self.finished {
            out.push(EOS);
        }
        out
    }
}

fn argmax(logprobs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logprobs.iter().enumerate() {
        if v > logprobs[best] {
            best = i;
        }
    }
    best
}

/// Draws a token from `exp(logprobs)` using one uniform variate.
pub fn sample_token<R: Rng + ?Sized>(logprobs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in logprobs.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn run<M, F>(model: &mut M, max_len: usize, mut choose: F) -> Result<DecodeResult>
where
    M: StepModel,
    F: FnMut(&[f64]) -> usize,
{
    if max_len == 0 {
        return contract_err("max_len must be at least 1");
    }
    let mut state = model.initial()?;
    let mut prev = BOS;
    let mut out = DecodeResult {
        tokens: Vec::new(),
        step_logprobs: Vec::new(),
        alphas: Vec::new(),
        total_logprob: 0.0,
        finished: false,
    };
    for _ in 0..max_len {
        let step = model.step(&state, prev)?;
        let tok = choose(&step.logprobs);
        let lp = step.logprobs[tok];
        out.step_logprobs.push(lp);
        out.total_logprob += lp;
        out.alphas.extend(step.alpha);
        if tok == EOS {
            out.finished = true;
            break;
        }
        out.tokens.push(tok);
        state = step.state;
        prev = tok;
    }
    Ok(out)
}

pub fn greedy_decode<M: StepModel>(model: &mut M, max_len: usize) -> Result<DecodeResult> {
    run(model, max_len, argmax)
}

pub fn sample_decode<M: StepModel, R: Rng + ?Sized>(
    model: &mut M,
    max_len: usize,
    rng: &mut R,
) -> Result<DecodeResult> {
    run(model, max_len, |lp| sample_token(lp, rng))
}

struct Hypothesis<S> {
    emitted: Vec<usize>,
    step_logprobs: Vec<f64>,
    alphas: Vec<AttentionMap>,
    score: f64,
    state: S,
}

fn better(a_score: f64, a_seq: &[usize], b_score: f64, b_seq: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_seq.cmp(b_seq))
}

/// Beam search without length normalization. Hypotheses that emit `EOS`
/// (or reach `max_len`) retire to a pool and free their beam slot.
pub fn beam_search<M: StepModel>(
    model: &mut M,
    beam_width: usize,
    max_len: usize,
) -> Result<DecodeResult> {
    if beam_width == 0 {
        return contract_err("beam width must be at least 1");
    }
    if max_len == 0 {
        return contract_err("max_len must be at least 1");
    }
    let mut live = vec![Hypothesis {
        emitted: Vec::new(),
        step_logprobs: Vec::new(),
        alphas: Vec::new(),
        score: 0.0,
        state: model.initial()?,
    }];
    let mut pool: Vec<Hypothesis<M::State>> = Vec::new();

    for t in 0..max_len {
        let mut steps = Vec::with_capacity(live.len());
        let mut cands: Vec<(f64, usize, usize, Vec<usize>)> = Vec::new();
        for (bi, hyp) in live.iter().enumerate() {
            let prev = hyp.emitted.last().copied().unwrap_or(BOS);
            let step = model.step(&hyp.state, prev)?;
            for (tok, &lp) in step.logprobs.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut seq = hyp.emitted.clone();
                seq.push(tok);
                cands.push((hyp.score + lp, bi, tok, seq));
            }
            steps.push(step);
        }
        cands.sort_by(|a, b| better(a.0, &a.3, b.0, &b.3));
        cands.truncate(beam_width);

        let mut next = Vec::with_capacity(cands.len());
        for (score, bi, tok, seq) in cands {
            let parent = &live[bi];
            let step = &steps[bi];
            let mut step_logprobs = parent.step_logprobs.clone();
            step_logprobs.push(step.logprobs[tok]);
            let mut alphas = parent.alphas.clone();
            alphas.extend(step.alpha.clone());
            let hyp = Hypothesis {
                emitted: seq,
                step_logprobs,
                alphas,
                score,
                state: step.state.clone(),
            };
            if tok == EOS || t + 1 == max_len {
                pool.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }

    let best = pool
        .into_iter()
        .min_by(|a, b| better(a.score, &a.emitted, b.score, &b.emitted))
        .expect("at least one hypothesis retires");
    let finished = best.emitted.last() == Some(&EOS);
    let mut tokens = best.emitted;
    if finished {
        tokens.pop();
    }
    Ok(DecodeResult {
        tokens,
        step_logprobs: best.step_logprobs,
        alphas: best.alphas,
        total_logprob: best.score,
        finished,
    })
}
