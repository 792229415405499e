//! LSTM language generator: vocabulary, parameters, and the recurrent cell.

mod search;

pub use search::{beam_search, greedy_decode, sample_decode, sample_token, DecodeResult, Step, StepModel};

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Closed token inventory with reserved `PAD`, `BOS`, `EOS` at indices 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from content words; duplicates are ignored.
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for w in words {
            let w = w.as_ref().to_string();
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocab(token.to_string()))
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Content words for the given ids; reserved tokens are dropped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i > EOS)
            .filter_map(|&i| self.tokens.get(i).cloned())
            .collect()
    }

    /// Tokens the generator may emit: everything except `PAD` and `BOS`.
    pub fn emit_mask(&self) -> Rc<[bool]> {
        (0..self.len()).map(|i| i != PAD && i != BOS).collect()
    }

    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::Format("vocabulary must start with reserved tokens".into()));
        }
        let v = Vocab::new(&tokens[3..]);
        if v.len() != tokens.len() {
            return Err(Error::Format("duplicate vocabulary entries".into()));
        }
        Ok(v)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// `V × d_w`
    pub embedding: Tensor,
    /// `4·d_h × (d_w + d_z + d_h)`, gate rows ordered input, forget, output, candidate.
    pub w_lstm: Tensor,
    pub b_lstm: Tensor,
    /// `V × d_h`
    pub w_out: Tensor,
    pub b_out: Tensor,
    /// `d_h × d_z`, maps the mean integrated feature to the initial state.
    pub w_init_h: Tensor,
    pub b_init_h: Tensor,
    pub w_init_c: Tensor,
    pub b_init_c: Tensor,
}

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(
        vocab: usize,
        word_dim: usize,
        context_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab < 4 || word_dim == 0 || context_dim == 0 || hidden == 0 {
            return dim_err(format!(
                "decoder dims V={vocab} d_w={word_dim} d_z={context_dim} d_h={hidden}"
            ));
        }
        Ok(DecoderParams {
            embedding: Tensor::uniform(&[vocab, word_dim], -0.1, 0.1, rng),
            w_lstm: Tensor::glorot(4 * hidden, word_dim + context_dim + hidden, rng),
            b_lstm: Tensor::zeros(&[4 * hidden]),
            w_out: Tensor::glorot(vocab, hidden, rng),
            b_out: Tensor::zeros(&[vocab]),
            w_init_h: Tensor::glorot(hidden, context_dim, rng),
            b_init_h: Tensor::zeros(&[hidden]),
            w_init_c: Tensor::glorot(hidden, context_dim, rng),
            b_init_c: Tensor::zeros(&[hidden]),
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_out.shape()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.w_out.shape()[0]
    }
}

/// Tape handles for [`DecoderParams`].
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub embedding: Var,
    pub w_lstm: Var,
    pub b_lstm: Var,
    pub w_out: Var,
    pub b_out: Var,
    pub w_init_h: Var,
    pub b_init_h: Var,
    pub w_init_c: Var,
    pub b_init_c: Var,
}

/// One LSTM step on input `x`:
/// `i, f, o = σ(·)`, `g = tanh(·)`, `c' = f∘c + i∘g`, `h' = o∘tanh(c')`.
pub fn lstm_step(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    w: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let d = tape.value(h).numel();
    if tape.value(c).numel() != d || tape.value(b).numel() != 4 * d {
        return dim_err(format!(
            "lstm state {d} vs cell {} and bias {}",
            tape.value(c).numel(),
            tape.value(b).numel()
        ));
    }
    let input = tape.concat(&[x, h])?;
    let gates = tape.affine(input, w, b)?;
    let gi = tape.slice(gates, 0, d)?;
    let gf = tape.slice(gates, d, d)?;
    let go = tape.slice(gates, 2 * d, d)?;
    let gg = tape.slice(gates, 3 * d, d)?;
    let i = tape.sigmoid(gi);
    let f = tape.sigmoid(gf);
    let o = tape.sigmoid(go);
    let g = tape.tanh(gg);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}
