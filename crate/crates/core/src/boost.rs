//! Integration of stimulus-based attention into the visual features, followed
//! by top-down soft attention over the integrated grid.
//!
//! ```text
//! I' = (W_v I + b_v) ∘ log(A + ε)          A = relu(W_sal I + b_sal)
//! e_i = w_e · tanh(W_a I'_i + b_a + W_h h)
//! α = softmax(e),  z = Σ_i α_i I'_i
//! ```
//!
//! With `ε = e`, locations where `A` is zero pass `W_v I` through unchanged
//! since `log(e) = 1`; salient channels are amplified logarithmically.

use std::f64::consts::E;

use rand::Rng;

use crate::attention_map::{AttentionMap, Normalization};
use crate::autograd::{Tape, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// How the attentional features enter the logarithm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `log(relu(W_sal I) + ε)`; the argument is always at least `ε`.
    #[default]
    Rectified,
    /// `log(max(W_sal I + ε, ε·1e-3))` without the ReLU.
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoostParams {
    /// `D_v × C`
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub epsilon: f64,
}

impl BoostParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, width: usize, rng: &mut R) -> Self {
        BoostParams {
            w_v: Tensor::glorot(width, channels, rng),
            b_v: Tensor::zeros(&[width]),
            epsilon: E,
        }
    }

    pub fn width(&self) -> usize {
        self.w_v.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopDownParams {
    /// `d_a × D_v`
    pub w_a: Tensor,
    pub b_a: Tensor,
    /// `d_a × d_h`
    pub w_h: Tensor,
    /// `1 × d_a`
    pub w_e: Tensor,
}

impl TopDownParams {
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, hidden: usize, attn: usize, rng: &mut R) -> Self {
        TopDownParams {
            w_a: Tensor::glorot(attn, feature_dim, rng),
            b_a: Tensor::zeros(&[attn]),
            w_h: Tensor::glorot(attn, hidden, rng),
            w_e: Tensor::glorot(1, attn, rng),
        }
    }
}

/// Tape handles for the top-down scorer.
#[derive(Clone, Copy, Debug)]
pub struct TopDownVars {
    pub w_a: Var,
    pub b_a: Var,
    pub w_h: Var,
    pub w_e: Var,
}

/// `W_v I + b_v`.
pub fn visual_encoding(tape: &mut Tape, features: Var, w_v: Var, b_v: Var) -> Result<Var> {
    tape.conv1x1(features, w_v, Some(b_v))
}

/// `I' = encoded ∘ log(A + ε)` where `encoded = W_v I + b_v`.
pub fn integrate(
    tape: &mut Tape,
    encoded: Var,
    attentional: Var,
    epsilon: f64,
    mode: FeatureMode,
) -> Result<Var> {
    if !(epsilon > 0.0) {
        return contract_err(format!("epsilon must be positive, got {epsilon}"));
    }
    let (dv, h, w) = tape.value(encoded).chw()?;
    let (ds, ha, wa) = tape.value(attentional).chw()?;
    if (dv, h, w) != (ds, ha, wa) {
        return dim_err(format!(
            "encoded features {dv}×{h}×{w} vs attentional features {ds}×{ha}×{wa}"
        ));
    }
    let shifted = match mode {
        FeatureMode::Rectified => {
            if tape.value(attentional).data().iter().any(|&v| !(v >= 0.0)) {
                return contract_err("attentional features must be nonnegative");
            }
            tape.shift(attentional, epsilon)
        }
        FeatureMode::Raw => {
            let s = tape.shift(attentional, epsilon);
            tape.clamp_min(s, epsilon * 1e-3)
        }
    };
    let gate = tape.log(shifted)?;
    tape.mul(encoded, gate)
}

/// Per-image part of the scorer: `W_a I'_i + b_a` at every location.
pub fn project_features(tape: &mut Tape, integrated: Var, vars: &TopDownVars) -> Result<Var> {
    tape.conv1x1(integrated, vars.w_a, Some(vars.b_a))
}

/// Soft attention for one decoding step given the projected grid from
/// [`project_features`]. Returns `(alpha: 1×H×W, z: D_v)`.
pub fn topdown_attention(
    tape: &mut Tape,
    integrated: Var,
    projected: Var,
    hidden: Var,
    vars: &TopDownVars,
) -> Result<(Var, Var)> {
    let hp = tape.matvec(vars.w_h, hidden)?;
    let pre = tape.add(projected, hp)?;
    let act = tape.tanh(pre);
    let scores = tape.conv1x1(act, vars.w_e, None)?;
    let alpha = tape.softmax_spatial(scores)?;
    let z = tape.weighted_sum(integrated, alpha)?;
    Ok((alpha, z))
}

/// Evaluated outputs of [`boosted_context`].
#[derive(Clone, Debug)]
pub struct BoostedContext {
    pub alpha: AttentionMap,
    pub context: Tensor,
    pub integrated: Tensor,
    pub stimulus: AttentionMap,
}

/// Full pipeline for one feature grid and decoder state, without gradients:
/// attentional features, integration, then top-down attention.
pub fn boosted_context(
    features: &Tensor,
    hidden: &Tensor,
    w_sal: &Tensor,
    b_sal: &Tensor,
    boost: &BoostParams,
    topdown: &TopDownParams,
) -> Result<BoostedContext> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let ws = tape.constant(w_sal.clone());
    let bs = tape.constant(b_sal.clone());
    let wv = tape.constant(boost.w_v.clone());
    let bv = tape.constant(boost.b_v.clone());
    let vars = bind_topdown(&mut tape, topdown, false);
    let h = tape.constant(hidden.clone());

    let a = crate::saliency::attentional_features(&mut tape, x, ws, bs)?;
    let enc = visual_encoding(&mut tape, x, wv, bv)?;
    let integrated = integrate(&mut tape, enc, a, boost.epsilon, FeatureMode::Rectified)?;
    let proj = project_features(&mut tape, integrated, &vars)?;
    let (alpha, z) = topdown_attention(&mut tape, integrated, proj, h, &vars)?;
    Ok(BoostedContext {
        alpha: AttentionMap::from_tensor(tape.value(alpha), Normalization::Distribution)?,
        context: tape.value(z).clone(),
        integrated: tape.value(integrated).clone(),
        stimulus: crate::saliency::stimulus_attention_map(tape.value(a))?,
    })
}

pub fn bind_topdown(tape: &mut Tape, p: &TopDownParams, trainable: bool) -> TopDownVars {
    let mut put = |t: &Tensor| {
        if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    TopDownVars {
        w_a: put(&p.w_a),
        b_a: put(&p.b_a),
        w_h: put(&p.w_h),
        w_e: put(&p.w_e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn integrate_tensors(enc: &Tensor, a: &Tensor, eps: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let e = tape.constant(enc.clone());
        let av = tape.constant(a.clone());
        let out = integrate(&mut tape, e, av, eps, FeatureMode::Rectified)?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn zero_attention_is_identity() {
        let mut g = rng(1);
        let enc = Tensor::uniform(&[4, 3, 3], -2.0, 2.0, &mut g);
        let out = integrate_tensors(&enc, &Tensor::zeros(&[4, 3, 3]), E).unwrap();
        let dev = out
            .data()
            .iter()
            .zip(enc.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-12);
    }

    #[test]
    fn scalar_hand_value() {
        let enc = Tensor::new(&[1, 1, 1], vec![2.0]).unwrap();
        let a = Tensor::new(&[1, 1, 1], vec![E * E - E]).unwrap();
        let out = integrate_tensors(&enc, &a, E).unwrap();
        assert!((out.item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_attention() {
        let enc = Tensor::new(&[1, 1, 2], vec![1.5, 1.5]).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..6 {
            let a = Tensor::new(&[1, 1, 2], vec![k as f64 * 0.7, 0.0]).unwrap();
            let out = integrate_tensors(&enc, &a, E).unwrap();
            assert!(out.data()[0] > prev);
            prev = out.data()[0];
        }
    }

    #[test]
    fn integrate_errors() {
        let enc = Tensor::zeros(&[2, 2, 2]);
        let mut neg = Tensor::zeros(&[2, 2, 2]);
        neg.data_mut()[3] = -0.1;
        assert!(matches!(
            integrate_tensors(&enc, &neg, E),
            Err(crate::Error::Contract(_))
        ));
        assert!(matches!(
            integrate_tensors(&enc, &Tensor::zeros(&[3, 2, 2]), E),
            Err(crate::Error::Dimension(_))
        ));
        assert!(integrate_tensors(&enc, &Tensor::zeros(&[2, 2, 2]), 0.0).is_err());
    }

    #[test]
    fn raw_mode_clamps() {
        let mut tape = Tape::new();
        let enc = tape.constant(Tensor::full(&[1, 1, 2], 1.0));
        let a = tape.constant(Tensor::new(&[1, 1, 2], vec![-10.0, 0.0]).unwrap());
        let out = integrate(&mut tape, enc, a, E, FeatureMode::Raw).unwrap();
        let v = tape.value(out).data();
        assert!((v[0] - (E * 1e-3).ln()).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-15);
    }

    fn random_setup(seed: u64) -> (Tensor, Tensor, TopDownParams) {
        let mut g = rng(seed);
        let feat = Tensor::uniform(&[5, 3, 4], -1.0, 1.0, &mut g);
        let h = Tensor::uniform(&[6], -1.0, 1.0, &mut g);
        let td = TopDownParams::init(5, 6, 7, &mut g);
        (feat, h, td)
    }

    fn attend(feat: &Tensor, h: &Tensor, td: &TopDownParams) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let vars = bind_topdown(&mut tape, td, false);
        let f = tape.constant(feat.clone());
        let hv = tape.constant(h.clone());
        let proj = project_features(&mut tape, f, &vars).unwrap();
        let (alpha, z) = topdown_attention(&mut tape, f, proj, hv, &vars).unwrap();
        (
            tape.value(alpha).data().to_vec(),
            tape.value(z).data().to_vec(),
        )
    }

    #[test]
    fn uniform_alpha_for_identical_locations() {
        let (_, h, mut td) = random_setup(2);
        td.w_h = Tensor::zeros(td.w_h.shape());
        let mut feat = Tensor::zeros(&[5, 3, 4]);
        for c in 0..5 {
            for i in 0..12 {
                feat.data_mut()[c * 12 + i] = c as f64 * 0.3 - 0.5;
            }
        }
        let (alpha, _) = attend(&feat, &h, &td);
        assert!(alpha.iter().all(|&a| (a - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn one_hot_alpha_selects_location() {
        let (mut feat, h, mut td) = random_setup(3);
        // only channel 0 drives the score, and location 7 dominates it
        td.w_a = Tensor::zeros(td.w_a.shape());
        td.w_a.data_mut()[0] = 1.0;
        td.w_h = Tensor::zeros(td.w_h.shape());
        td.w_e = Tensor::zeros(td.w_e.shape());
        td.w_e.data_mut()[0] = 1000.0;
        for i in 0..12 {
            feat.data_mut()[i] = -1.0;
        }
        feat.data_mut()[7] = 1.0;
        let (alpha, z) = attend(&feat, &h, &td);
        assert!((alpha[7] - 1.0).abs() < 1e-12);
        for c in 0..5 {
            assert!((z[c] - feat.data()[c * 12 + 7]).abs() < 1e-9);
        }
    }

    /// Explicit per-location loop for the whole scorer.
    fn attention_oracle(feat: &Tensor, h: &Tensor, td: &TopDownParams) -> (Vec<f64>, Vec<f64>) {
        let (d, hh, ww) = feat.chw().unwrap();
        let n = hh * ww;
        let da = td.w_a.shape()[0];
        let dh = h.numel();
        let mut scores = vec![0.0; n];
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..da {
                let mut pre = td.b_a.data()[k];
                for c in 0..d {
                    pre += td.w_a.data()[k * d + c] * feat.data()[c * n + i];
                }
                for j in 0..dh {
                    pre += td.w_h.data()[k * dh + j] * h.data()[j];
                }
                s += td.w_e.data()[k] * pre.tanh();
            }
            scores[i] = s;
        }
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let tot: f64 = ex.iter().sum();
        let alpha: Vec<f64> = ex.iter().map(|e| e / tot).collect();
        let mut z = vec![0.0; d];
        for c in 0..d {
            for i in 0..n {
                z[c] += alpha[i] * feat.data()[c * n + i];
            }
        }
        (alpha, z)
    }

    #[test]
    fn matches_loop_oracle_and_stays_in_hull() {
        for seed in 0..10 {
            let (feat, h, td) = random_setup(50 + seed);
            let (alpha, z) = attend(&feat, &h, &td);
            let (oa, oz) = attention_oracle(&feat, &h, &td);
            for (a, b) in alpha.iter().zip(&oa) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in z.iter().zip(&oz) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..5 {
                let row = &feat.data()[c * 12..(c + 1) * 12];
                let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(lo - 1e-12 <= z[c] && z[c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn alpha_invariant_to_score_shift() {
        // softmax(e + k) == softmax(e)
        let mut tape = Tape::new();
        let s = Tensor::new(&[1, 2, 2], vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let a = tape.constant(s.clone());
        let b = tape.constant(s.map(|x| x + 17.5));
        let pa = tape.softmax_spatial(a).unwrap();
        let pb = tape.softmax_spatial(b).unwrap();
        for (x, y) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_w_sal_reduces_to_plain_soft_attention() {
        let mut g = rng(7);
        let feats = Tensor::uniform(&[4, 3, 3], -1.0, 1.0, &mut g);
        let h = Tensor::uniform(&[5], -1.0, 1.0, &mut g);
        let boost = BoostParams::init(4, 6, &mut g);
        let td = TopDownParams::init(6, 5, 8, &mut g);
        let out = boosted_context(
            &feats,
            &h,
            &Tensor::zeros(&[6, 4]),
            &Tensor::zeros(&[6]),
            &boost,
            &td,
        )
        .unwrap();

        let mut tape = Tape::new();
        let x = tape.constant(feats.clone());
        let wv = tape.constant(boost.w_v.clone());
        let bv = tape.constant(boost.b_v.clone());
        let enc = visual_encoding(&mut tape, x, wv, bv).unwrap();
        let plain = tape.value(enc).clone();
        let (alpha, z) = attend(&plain, &h, &td);
        assert!(out.stimulus.is_zero());
        for (a, b) in out.alpha.values().iter().zip(&alpha) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in out.context.data().iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn integration_gradients() {
        for seed in 0..5 {
            let mut g = rng(90 + seed);
            let x = Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut g);
            let w_sal = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut g);
            let w_v = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut g);
            let b_v = Tensor::uniform(&[4], -0.5, 0.5, &mut g);
            let report = grad_check(
                |t, v| {
                    let pre = t.conv1x1(v[0], v[1], None)?;
                    let a = t.relu(pre);
                    let enc = visual_encoding(t, v[0], v[2], v[3])?;
                    let out = integrate(t, enc, a, E, FeatureMode::Rectified)?;
                    Ok(t.sum(out))
                },
                &[
                    ("x", x),
                    ("w_sal", w_sal),
                    ("w_v", w_v),
                    ("b_v", b_v),
                ],
                1e-5,
                1e-4,
            )
            .unwrap();
            if report.relu_margin < 1e-4 {
                continue;
            }
            assert!(report.passed(), "seed {seed}\n{report}");
        }
    }
}
