//! Two-layer 1×1 convolutional saliency predictor.
//!
//! The first layer `W_sal` produces *attentional features*
//! `A = relu(W_sal I + b_sal)`; the second layer `W_m` collapses them to one
//! score per location and a spatial softmax turns the scores into a saliency
//! distribution `S = softmax(W_m A + b_m)`. The same `A` later feeds the
//! boosted integration of visual features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention_map::{AttentionMap, Normalization};
use crate::autograd::{check_distribution, Tape, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::optim::sgd_step;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyParams {
    /// `D_s × C`
    pub w_sal: Tensor,
    pub b_sal: Tensor,
    /// `1 × D_s`
    pub w_m: Tensor,
    pub b_m: Tensor,
    pub frozen: bool,
}

/// Tape handles for [`SaliencyParams`].
#[derive(Clone, Copy, Debug)]
pub struct SaliencyVars {
    pub w_sal: Var,
    pub b_sal: Var,
    pub w_m: Var,
    pub b_m: Var,
}

impl SaliencyParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, width: usize, rng: &mut R) -> Self {
        SaliencyParams {
            w_sal: Tensor::glorot(width, channels, rng),
            b_sal: Tensor::zeros(&[width]),
            w_m: Tensor::glorot(1, width, rng),
            b_m: Tensor::zeros(&[1]),
            frozen: false,
        }
    }

    pub fn width(&self) -> usize {
        self.w_sal.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.w_sal.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, c) = (self.width(), self.channels());
        if self.b_sal.shape() != [d] || self.w_m.shape() != [1, d] || self.b_m.shape() != [1] {
            return dim_err(format!("saliency params inconsistent with W_sal {d}×{c}"));
        }
        if ![&self.w_sal, &self.b_sal, &self.w_m, &self.b_m]
            .iter()
            .all(|t| t.is_finite())
        {
            return contract_err("non-finite saliency weights");
        }
        Ok(())
    }

    /// Binds the parameters as leaves (or constants when frozen).
    pub fn bind(&self, tape: &mut Tape) -> SaliencyVars {
        let mut put = |t: &Tensor| {
            if self.frozen {
                tape.constant(t.clone())
            } else {
                tape.leaf(t.clone())
            }
        };
        SaliencyVars {
            w_sal: put(&self.w_sal),
            b_sal: put(&self.b_sal),
            w_m: put(&self.w_m),
            b_m: put(&self.b_m),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_sal", &self.w_sal),
            ("b_sal", &self.b_sal),
            ("w_m", &self.w_m),
            ("b_m", &self.b_m),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.w_sal,
            &mut self.b_sal,
            &mut self.w_m,
            &mut self.b_m,
        ]
    }
}

/// `A = relu(W_sal I + b_sal)`, shape `D_s × H × W`.
pub fn attentional_features(tape: &mut Tape, features: Var, w_sal: Var, b_sal: Var) -> Result<Var> {
    let pre = tape.conv1x1(features, w_sal, Some(b_sal))?;
    Ok(tape.relu(pre))
}

/// Saliency distribution as a `1 × H × W` tape node.
pub fn saliency_var(tape: &mut Tape, features: Var, vars: &SaliencyVars) -> Result<Var> {
    let a = attentional_features(tape, features, vars.w_sal, vars.b_sal)?;
    let scores = tape.conv1x1(a, vars.w_m, Some(vars.b_m))?;
    tape.softmax_spatial(scores)
}

/// Evaluates the saliency distribution for one feature grid.
pub fn saliency_map(features: &Tensor, params: &SaliencyParams) -> Result<AttentionMap> {
    let mut tape = Tape::new();
    let frozen = SaliencyParams {
        frozen: true,
        ..params.clone()
    };
    let vars = frozen.bind(&mut tape);
    let x = tape.constant(features.clone());
    let s = saliency_var(&mut tape, x, &vars)?;
    AttentionMap::from_tensor(tape.value(s), Normalization::Distribution)
}

/// Evaluates `A` for one feature grid without recording gradients.
pub fn attentional_features_of(features: &Tensor, params: &SaliencyParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let w = tape.constant(params.w_sal.clone());
    let b = tape.constant(params.b_sal.clone());
    let a = attentional_features(&mut tape, x, w, b)?;
    Ok(tape.value(a).clone())
}

/// Channel-averaged activation of `A`, rescaled to unit max.
/// An all-zero `A` yields the all-zero map.
pub fn stimulus_attention_map(attentional: &Tensor) -> Result<AttentionMap> {
    let (c, h, w) = attentional.chw()?;
    let data = attentional.data();
    if data.iter().any(|&v| !(v >= 0.0)) {
        return contract_err("attentional features must be nonnegative");
    }
    let hw = h * w;
    let mean: Vec<f64> = (0..hw)
        .map(|i| (0..c).map(|ci| data[ci * hw + i]).sum::<f64>() / c as f64)
        .collect();
    AttentionMap::to_unit_max(h, w, &mean)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            lr: 2.5e-4,
            seed: 0,
        }
    }
}

/// One saliency training example: a `C×H×W` feature grid and its target distribution.
pub struct SaliencyExample<'a> {
    pub features: &'a Tensor,
    pub target: &'a Tensor,
}

/// Fits the saliency head with per-sample SGD (batch size 1) on the map
/// cross-entropy. Returns the frozen parameters and the mean loss of each epoch.
pub fn pretrain_saliency(
    examples: &[SaliencyExample<'_>],
    mut params: SaliencyParams,
    cfg: &PretrainConfig,
) -> Result<(SaliencyParams, Vec<f64>)> {
    params.validate()?;
    for ex in examples {
        check_distribution(ex.target, 1e-6)?;
        let (c, h, w) = ex.features.chw()?;
        if c != params.channels() || ex.target.shape() != [1, h, w] {
            return dim_err(format!(
                "example {:?}/{:?} vs saliency head with {} channels",
                ex.features.shape(),
                ex.target.shape(),
                params.channels()
            ));
        }
    }
    params.frozen = false;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let ex = &examples[k];
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let x = tape.constant(ex.features.clone());
            let s = saliency_var(&mut tape, x, &vars)?;
            let loss = tape.map_cross_entropy(s, ex.target)?;
            total += tape.value(loss).item();
            tape.backward(loss)?;
            let grads: Vec<Tensor> = [vars.w_sal, vars.b_sal, vars.w_m, vars.b_m]
                .iter()
                .map(|&v| tape.take_grad(v).expect("leaf reached by loss"))
                .collect();
            for (t, g) in params.tensors_mut().into_iter().zip(&grads) {
                sgd_step(t, g, cfg.lr)?;
            }
        }
        curve.push(if examples.is_empty() {
            0.0
        } else {
            total / examples.len() as f64
        });
    }
    params.frozen = true;
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Per-location brute force for `relu(W x + b)`.
    fn features_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (c, h, wd) = x.chw().unwrap();
        let d = w.shape()[0];
        let mut out = vec![0.0; d * h * wd];
        for r in 0..h {
            for col in 0..wd {
                for di in 0..d {
                    let mut acc = b.data()[di];
                    for ci in 0..c {
                        acc += w.data()[di * c + ci] * x.data()[(ci * h + r) * wd + col];
                    }
                    out[(di * h + r) * wd + col] = acc.max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn attentional_features_examples() {
        let mut g = rng(1);
        let x = Tensor::uniform(&[3, 2, 2], 0.0, 1.0, &mut g);
        let mut p = SaliencyParams::init(3, 3, &mut g);

        p.w_sal = Tensor::zeros(&[3, 3]);
        let a = attentional_features_of(&x, &p).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));

        p.w_sal = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let a = attentional_features_of(&x, &p).unwrap();
        assert_eq!(a, x);

        let p = SaliencyParams {
            b_sal: Tensor::uniform(&[4], -0.3, 0.3, &mut g),
            ..SaliencyParams::init(3, 4, &mut g)
        };
        let x = Tensor::uniform(&[3, 2, 3], -1.0, 1.0, &mut g);
        let a = attentional_features_of(&x, &p).unwrap();
        let want = features_oracle(&x, &p.w_sal, &p.b_sal);
        for (got, want) in a.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn saliency_map_examples() {
        let mut g = rng(2);
        let p = SaliencyParams::init(4, 6, &mut g);
        let zero = Tensor::zeros(&[4, 3, 3]);
        let m = saliency_map(&zero, &p).unwrap();
        assert!(m.values().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));

        // Hot location with a nonnegative readout must be the argmax.
        let mut p = p;
        p.w_sal = Tensor::uniform(&[6, 4], 0.1, 1.0, &mut g);
        p.w_m = Tensor::uniform(&[1, 6], 0.1, 1.0, &mut g);
        let mut x = Tensor::uniform(&[4, 3, 3], 0.0, 0.2, &mut g);
        for c in 0..4 {
            x.data_mut()[c * 9 + 5] = 3.0;
        }
        let m = saliency_map(&x, &p).unwrap();
        let argmax = (0..9)
            .max_by(|&a, &b| m.values()[a].total_cmp(&m.values()[b]))
            .unwrap();
        assert_eq!(argmax, 5);

        for seed in 0..20 {
            let mut g = rng(100 + seed);
            let p = SaliencyParams::init(5, 7, &mut g);
            let x = Tensor::uniform(&[5, 4, 3], -2.0, 2.0, &mut g);
            let s: f64 = saliency_map(&x, &p).unwrap().values().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn channel_permutation_invariance() {
        let mut g = rng(3);
        let p = SaliencyParams::init(4, 5, &mut g);
        let x = Tensor::uniform(&[4, 3, 3], -1.0, 1.0, &mut g);
        let perm = [2usize, 0, 3, 1];
        let mut xp = x.clone();
        let mut pp = p.clone();
        for (new, &old) in perm.iter().enumerate() {
            xp.data_mut()[new * 9..(new + 1) * 9].copy_from_slice(&x.data()[old * 9..(old + 1) * 9]);
            for d in 0..5 {
                pp.w_sal.data_mut()[d * 4 + new] = p.w_sal.data()[d * 4 + old];
            }
        }
        let a = saliency_map(&x, &p).unwrap();
        let b = saliency_map(&xp, &pp).unwrap();
        for (u, v) in a.values().iter().zip(b.values()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn stimulus_map_examples() {
        let constant = Tensor::full(&[3, 2, 2], 0.7);
        let m = stimulus_attention_map(&constant).unwrap();
        assert!(m.values().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let zero = Tensor::zeros(&[3, 2, 2]);
        assert!(stimulus_attention_map(&zero).unwrap().is_zero());

        let mut hot = Tensor::zeros(&[3, 2, 2]);
        hot.data_mut()[4 + 3] = 2.0;
        let m = stimulus_attention_map(&hot).unwrap();
        assert_eq!(m.values(), &[0.0, 0.0, 0.0, 1.0]);

        let neg = Tensor::full(&[1, 1, 2], -1.0);
        assert!(stimulus_attention_map(&neg).is_err());
    }

    #[test]
    fn saliency_gradients_check() {
        for seed in 0..5 {
            let mut g = rng(40 + seed);
            let p = SaliencyParams {
                b_sal: Tensor::uniform(&[6], -0.2, 0.2, &mut g),
                ..SaliencyParams::init(4, 6, &mut g)
            };
            let x = Tensor::uniform(&[4, 3, 3], -1.0, 1.0, &mut g);
            let target = AttentionMap::to_distribution(
                3,
                3,
                &Tensor::uniform(&[9], 0.0, 1.0, &mut g).into_data(),
            )
            .unwrap()
            .to_tensor();
            let report = grad_check(
                |t, v| {
                    let xv = t.constant(x.clone());
                    let vars = SaliencyVars {
                        w_sal: v[0],
                        b_sal: v[1],
                        w_m: v[2],
                        b_m: v[3],
                    };
                    let s = saliency_var(t, xv, &vars)?;
                    t.map_cross_entropy(s, &target)
                },
                &[
                    ("w_sal", p.w_sal.clone()),
                    ("b_sal", p.b_sal.clone()),
                    ("w_m", p.w_m.clone()),
                    ("b_m", p.b_m.clone()),
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

    fn toy_examples(n: usize, seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
        let mut g = rng(seed);
        let feats = (0..n)
            .map(|_| Tensor::uniform(&[3, 3, 3], -1.0, 1.0, &mut g))
            .collect();
        let targets = (0..n)
            .map(|_| {
                let raw = Tensor::uniform(&[9], 0.05, 1.0, &mut g).into_data();
                AttentionMap::to_distribution(3, 3, &raw).unwrap().to_tensor()
            })
            .collect();
        (feats, targets)
    }

    fn entropy(t: &Tensor) -> f64 {
        -t.data().iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    #[test]
    fn pretrain_uniform_target_reaches_entropy_floor() {
        let (feats, _) = toy_examples(8, 5);
        let uniform = Tensor::full(&[1, 3, 3], 1.0 / 9.0);
        let examples: Vec<_> = feats
            .iter()
            .map(|f| SaliencyExample {
                features: f,
                target: &uniform,
            })
            .collect();
        let p = SaliencyParams::init(3, 8, &mut rng(6));
        let cfg = PretrainConfig {
            epochs: 60,
            lr: 0.05,
            seed: 1,
        };
        let (trained, curve) = pretrain_saliency(&examples, p, &cfg).unwrap();
        assert!(trained.frozen);
        let floor = 9f64.ln();
        let last = *curve.last().unwrap();
        assert!(last >= floor - 1e-12);
        assert!((last - floor) / floor < 0.01, "final loss {last} vs {floor}");
        for w in curve.windows(2) {
            assert!(w[1] <= w[0] * 1.05);
        }
    }

    #[test]
    fn pretrain_single_sample_approaches_target_entropy() {
        let (feats, targets) = toy_examples(1, 9);
        let examples = [SaliencyExample {
            features: &feats[0],
            target: &targets[0],
        }];
        let p = SaliencyParams::init(3, 16, &mut rng(10));
        let cfg = PretrainConfig {
            epochs: 3000,
            lr: 0.1,
            seed: 2,
        };
        let (_, curve) = pretrain_saliency(&examples, p, &cfg).unwrap();
        let h = entropy(&targets[0]);
        let last = *curve.last().unwrap();
        assert!(last >= h - 1e-12);
        assert!(last - h < 0.01 * h, "loss {last} vs entropy {h}");
    }

    #[test]
    fn pretrain_zero_lr_is_identity() {
        let (feats, targets) = toy_examples(4, 11);
        let examples: Vec<_> = feats
            .iter()
            .zip(&targets)
            .map(|(f, t)| SaliencyExample {
                features: f,
                target: t,
            })
            .collect();
        let p = SaliencyParams::init(3, 5, &mut rng(12));
        let cfg = PretrainConfig {
            epochs: 3,
            lr: 0.0,
            seed: 0,
        };
        let (trained, _) = pretrain_saliency(&examples, p.clone(), &cfg).unwrap();
        for ((_, a), (_, b)) in trained.tensors().iter().zip(p.tensors().iter()) {
            assert_eq!(a.fingerprint(), b.fingerprint());
        }
    }

    #[test]
    fn pretrain_rejects_unnormalized_target() {
        let (feats, _) = toy_examples(1, 13);
        let bad = Tensor::full(&[1, 3, 3], 0.5);
        let examples = [SaliencyExample {
            features: &feats[0],
            target: &bad,
        }];
        let p = SaliencyParams::init(3, 4, &mut rng(0));
        let err = pretrain_saliency(&examples, p, &PretrainConfig::default());
        assert!(matches!(err, Err(crate::Error::Contract(_))));
    }
}
