//! The full captioner: optional stimulus branch, visual re-encoding,
//! top-down attention, and the LSTM generator.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::attention_map::{AttentionMap, Normalization};
use crate::autograd::{Tape, Var};
use crate::boost::{
    integrate, project_features, topdown_attention, visual_encoding, BoostParams, FeatureMode,
    TopDownParams, TopDownVars,
};
use crate::decoder::{
    lstm_step, sample_token, DecoderParams, DecoderVars, Step, StepModel, Vocab, BOS, EOS,
};
use crate::error::{dim_err, Error, Result};
use crate::saliency::{attentional_features, stimulus_attention_map, SaliencyParams};
use crate::tensor::Tensor;

/// The three rows of the intra-model comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Soft attention over `W_v I`; no stimulus branch.
    Baseline,
    /// Stimulus branch initialized from the pretrained saliency head.
    Bam,
    /// Same architecture as `Bam`, stimulus branch randomly initialized and trained end to end.
    BamStar,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::BamStar, Variant::Bam];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Bam => "bam",
            Variant::BamStar => "bam_star",
        }
    }

    pub fn has_stimulus(self) -> bool {
        self != Variant::Baseline
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "bam" => Ok(Variant::Bam),
            "bam_star" | "bam*" => Ok(Variant::BamStar),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input feature channels `C`.
    pub channels: usize,
    /// Attentional / re-encoded feature width (`D_s = D_v`).
    pub feature_dim: usize,
    pub word_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub epsilon: f64,
    pub feature_mode: FeatureMode,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            feature_dim: 32,
            word_dim: 64,
            hidden: 64,
            attn_dim: 64,
            epsilon: std::f64::consts::E,
            feature_mode: FeatureMode::Rectified,
            max_len: 16,
        }
    }
}

/// First saliency layer as used inside the captioner.
#[derive(Clone, Debug, PartialEq)]
pub struct StimulusParams {
    pub w_sal: Tensor,
    pub b_sal: Tensor,
    pub frozen: bool,
}

impl From<&SaliencyParams> for StimulusParams {
    fn from(p: &SaliencyParams) -> Self {
        StimulusParams {
            w_sal: p.w_sal.clone(),
            b_sal: p.b_sal.clone(),
            frozen: p.frozen,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Captioner {
    pub variant: Variant,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub stimulus: Option<StimulusParams>,
    pub boost: BoostParams,
    pub topdown: TopDownParams,
    pub decoder: DecoderParams,
}

/// Tape handles for every captioner parameter.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub all: Vec<Var>,
    pub stimulus: Option<(Var, Var)>,
    pub w_v: Var,
    pub b_v: Var,
    pub topdown: TopDownVars,
    pub decoder: DecoderVars,
}

/// Per-image quantities shared by every decoding step.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub attentional: Option<Var>,
    pub integrated: Var,
    pub projected: Var,
    pub h0: Var,
    pub c0: Var,
}

/// Tape handles produced by one decoding step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub logits: Var,
    pub logprobs: Var,
    pub h: Var,
    pub c: Var,
    pub alpha: Var,
    pub context: Var,
}

/// Teacher-forced loss for one caption.
pub struct CaptionLoss {
    pub loss: Var,
    pub correct: usize,
    pub tokens: usize,
    pub truncated: bool,
}

impl Captioner {
    /// Builds a freshly initialized captioner. `Bam` requires the pretrained
    /// saliency head; the other variants ignore it.
    pub fn new<R: Rng + ?Sized>(
        variant: Variant,
        config: ModelConfig,
        vocab: Vocab,
        saliency: Option<&SaliencyParams>,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, d) = (config.channels, config.feature_dim);
        if c == 0 || d == 0 || config.attn_dim == 0 || config.max_len == 0 {
            return dim_err(format!("invalid model config {config:?}"));
        }
        if !(config.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be positive", config.epsilon)));
        }
        let boost = BoostParams {
            epsilon: config.epsilon,
            ..BoostParams::init(c, d, rng)
        };
        let topdown = TopDownParams::init(d, config.hidden, config.attn_dim, rng);
        let decoder = DecoderParams::init(vocab.len(), config.word_dim, d, config.hidden, rng)?;
        // Drawn for every variant so the shared parameters above are identical across variants.
        let random_sal = SaliencyParams::init(c, d, rng);
        let stimulus = match variant {
            Variant::Baseline => None,
            Variant::BamStar => Some(StimulusParams {
                frozen: false,
                ..StimulusParams::from(&random_sal)
            }),
            Variant::Bam => {
                let p = saliency.ok_or_else(|| {
                    Error::Config("bam variant needs a pretrained saliency head".into())
                })?;
                if p.w_sal.shape() != [d, c] {
                    return Err(Error::Config(format!(
                        "saliency head W_sal {:?} does not match {d}×{c}",
                        p.w_sal.shape()
                    )));
                }
                Some(StimulusParams {
                    frozen: true,
                    ..StimulusParams::from(p)
                })
            }
        };
        Ok(Captioner {
            variant,
            config,
            vocab,
            stimulus,
            boost,
            topdown,
            decoder,
        })
    }

    pub fn set_stimulus_frozen(&mut self, frozen: bool) {
        if let Some(s) = &mut self.stimulus {
            s.frozen = frozen;
        }
    }

    /// All parameters in canonical order.
    pub fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::with_capacity(17);
        if let Some(s) = &self.stimulus {
            out.push(("w_sal", &s.w_sal));
            out.push(("b_sal", &s.b_sal));
        }
        let d = &self.decoder;
        let t = &self.topdown;
        out.extend([
            ("w_v", &self.boost.w_v),
            ("b_v", &self.boost.b_v),
            ("w_a", &t.w_a),
            ("b_a", &t.b_a),
            ("w_h", &t.w_h),
            ("w_e", &t.w_e),
            ("embedding", &d.embedding),
            ("w_lstm", &d.w_lstm),
            ("b_lstm", &d.b_lstm),
            ("w_out", &d.w_out),
            ("b_out", &d.b_out),
            ("w_init_h", &d.w_init_h),
            ("b_init_h", &d.b_init_h),
            ("w_init_c", &d.w_init_c),
            ("b_init_c", &d.b_init_c),
        ]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = Vec::with_capacity(17);
        if let Some(s) = &mut self.stimulus {
            out.push(("w_sal", &mut s.w_sal));
            out.push(("b_sal", &mut s.b_sal));
        }
        let d = &mut self.decoder;
        let t = &mut self.topdown;
        out.extend([
            ("w_v", &mut self.boost.w_v),
            ("b_v", &mut self.boost.b_v),
            ("w_a", &mut t.w_a),
            ("b_a", &mut t.b_a),
            ("w_h", &mut t.w_h),
            ("w_e", &mut t.w_e),
            ("embedding", &mut d.embedding),
            ("w_lstm", &mut d.w_lstm),
            ("b_lstm", &mut d.b_lstm),
            ("w_out", &mut d.w_out),
            ("b_out", &mut d.b_out),
            ("w_init_h", &mut d.w_init_h),
            ("b_init_h", &mut d.b_init_h),
            ("w_init_c", &mut d.w_init_c),
            ("b_init_c", &mut d.b_init_c),
        ]);
        out
    }

    /// Frozen flags aligned with [`Captioner::parameters`].
    pub fn frozen_mask(&self) -> Vec<bool> {
        self.parameters()
            .iter()
            .map(|(name, _)| {
                matches!(*name, "w_sal" | "b_sal")
                    && self.stimulus.as_ref().is_some_and(|s| s.frozen)
            })
            .collect()
    }

    /// Places every parameter on the tape. Frozen parameters, or all of them
    /// when `trainable` is false, become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let frozen = self.frozen_mask();
        let vars: Vec<Var> = self
            .parameters()
            .into_iter()
            .zip(frozen)
            .map(|((_, t), f)| {
                if trainable && !f {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        self.assemble(vars)
    }

    /// Interprets vars laid out in [`Captioner::parameters`] order.
    pub fn assemble(&self, all: Vec<Var>) -> ModelVars {
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("one var per parameter");
        let stimulus = self.stimulus.as_ref().map(|_| (next(), next()));
        let w_v = next();
        let b_v = next();
        let topdown = TopDownVars {
            w_a: next(),
            b_a: next(),
            w_h: next(),
            w_e: next(),
        };
        let decoder = DecoderVars {
            embedding: next(),
            w_lstm: next(),
            b_lstm: next(),
            w_out: next(),
            b_out: next(),
            w_init_h: next(),
            b_init_h: next(),
            w_init_c: next(),
            b_init_c: next(),
        };
        ModelVars {
            all,
            stimulus,
            w_v,
            b_v,
            topdown,
            decoder,
        }
    }

    /// Gradients aligned with [`Captioner::parameters`]; `None` for constants
    /// and for parameters the loss does not reach.
    pub fn take_grads(&self, tape: &mut Tape, vars: &ModelVars) -> Vec<Option<Tensor>> {
        vars.all.iter().map(|&v| tape.take_grad(v)).collect()
    }

    pub fn encode(&self, tape: &mut Tape, vars: &ModelVars, features: &Tensor) -> Result<Encoded> {
        let (c, _, _) = features.chw()?;
        if c != self.config.channels {
            return dim_err(format!(
                "features have {c} channels, model expects {}",
                self.config.channels
            ));
        }
        let x = tape.constant(features.clone());
        let encoded = visual_encoding(tape, x, vars.w_v, vars.b_v)?;
        let (attentional, integrated) = match vars.stimulus {
            None => (None, encoded),
            Some((w_sal, b_sal)) => {
                let a = match self.config.feature_mode {
                    FeatureMode::Rectified => attentional_features(tape, x, w_sal, b_sal)?,
                    FeatureMode::Raw => tape.conv1x1(x, w_sal, Some(b_sal))?,
                };
                let i2 = integrate(tape, encoded, a, self.boost.epsilon, self.config.feature_mode)?;
                (Some(a), i2)
            }
        };
        let projected = project_features(tape, integrated, &vars.topdown)?;
        let pooled = tape.mean_locations(integrated)?;
        let d = &vars.decoder;
        let h_pre = tape.affine(pooled, d.w_init_h, d.b_init_h)?;
        let c_pre = tape.affine(pooled, d.w_init_c, d.b_init_c)?;
        let h0 = tape.tanh(h_pre);
        let c0 = tape.tanh(c_pre);
        Ok(Encoded {
            attentional,
            integrated,
            projected,
            h0,
            c0,
        })
    }

    /// Embeds `prev`, attends with the previous hidden state, advances the LSTM
    /// on `[embedding; context]`, and projects to vocabulary log-probabilities.
    pub fn step(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        enc: &Encoded,
        prev: usize,
        h: Var,
        c: Var,
        mask: &Rc<[bool]>,
    ) -> Result<StepVars> {
        if prev >= self.vocab.len() {
            return Err(Error::Vocab(format!("token id {prev}")));
        }
        let d = &vars.decoder;
        let emb = tape.row(d.embedding, prev)?;
        let (alpha, context) =
            topdown_attention(tape, enc.integrated, enc.projected, h, &vars.topdown)?;
        let x = tape.concat(&[emb, context])?;
        let (h2, c2) = lstm_step(tape, x, h, c, d.w_lstm, d.b_lstm)?;
        let logits = tape.affine(h2, d.w_out, d.b_out)?;
        let logprobs = tape.log_softmax(logits, Some(mask.clone()))?;
        Ok(StepVars {
            logits,
            logprobs,
            h: h2,
            c: c2,
            alpha,
            context,
        })
    }

    /// Sum of per-token cross-entropies for `caption` (content ids, no
    /// `BOS`/`EOS`) followed by `EOS`. With probability `ss_prob` each input
    /// after the first is replaced by a token sampled from the model's own
    /// previous distribution.
    pub fn caption_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        enc: &Encoded,
        caption: &[usize],
        ss_prob: f64,
        rng: &mut R,
    ) -> Result<CaptionLoss> {
        let limit = self.config.max_len.saturating_sub(1);
        let truncated = caption.len() > limit;
        let mut targets: Vec<usize> = caption[..caption.len().min(limit)].to_vec();
        targets.push(EOS);
        let mask = self.vocab.emit_mask();
        let (mut h, mut c) = (enc.h0, enc.c0);
        let mut prev = BOS;
        let mut last_logprobs: Option<Var> = None;
        let mut terms = Vec::with_capacity(targets.len());
        let mut correct = 0;
        for &target in &targets {
            let input = match last_logprobs {
                Some(lp) if ss_prob > 0.0 && rng.gen::<f64>() < ss_prob => {
                    sample_token(tape.value(lp).data(), rng)
                }
                _ => prev,
            };
            let sv = self.step(tape, vars, enc, input, h, c, &mask)?;
            terms.push(tape.cross_entropy(sv.logits, target, Some(mask.clone()))?);
            if argmax(tape.value(sv.logprobs).data()) == target {
                correct += 1;
            }
            last_logprobs = Some(sv.logprobs);
            h = sv.h;
            c = sv.c;
            prev = target;
        }
        let loss = tape.add_all(&terms)?;
        Ok(CaptionLoss {
            loss,
            correct,
            tokens: targets.len(),
            truncated,
        })
    }

    /// Replaces every parameter by name, checking shapes. Names must match
    /// [`Captioner::parameters`] exactly.
    pub fn load_parameters(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        let mut slots = self.parameters_mut();
        if slots.len() != named.len() {
            return Err(Error::Format(format!(
                "{} tensors for {} parameters",
                named.len(),
                slots.len()
            )));
        }
        for ((name, slot), (got, t)) in slots.iter_mut().zip(named) {
            if *name != got || slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "expected {name} {:?}, found {got} {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            **slot = t;
        }
        Ok(())
    }

    /// A captioner with the right shapes and placeholder values, ready for
    /// [`Captioner::load_parameters`].
    pub fn blank(variant: Variant, config: ModelConfig, vocab: Vocab) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let sal = SaliencyParams::init(config.channels, config.feature_dim, &mut rng);
        Captioner::new(variant, config, vocab, Some(&sal), &mut rng)
    }

    /// Inference session over one feature grid.
    pub fn session(&self, features: &Tensor) -> Result<Session<'_>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &vars, features)?;
        Ok(Session {
            model: self,
            mask: self.vocab.emit_mask(),
            tape,
            vars,
            enc,
        })
    }

    /// Log-probability of `caption` followed by `EOS` under teacher forcing.
    pub fn score_caption(&self, features: &Tensor, caption: &[usize]) -> Result<f64> {
        let mut s = self.session(features)?;
        let mut state = s.initial()?;
        let mut prev = BOS;
        let mut total = 0.0;
        for &tok in caption.iter().chain(std::iter::once(&EOS)) {
            let step = s.step(&state, prev)?;
            total += step.logprobs[tok];
            state = step.state;
            prev = tok;
        }
        Ok(total)
    }
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

/// Gradient-free decoding state for one image.
pub struct Session<'a> {
    model: &'a Captioner,
    mask: Rc<[bool]>,
    tape: Tape,
    vars: ModelVars,
    enc: Encoded,
}

impl Session<'_> {
    /// Stimulus map (unit-max channel mean of the attentional features), when the model has one.
    pub fn stimulus_map(&self) -> Result<Option<AttentionMap>> {
        self.enc
            .attentional
            .map(|a| {
                let t = self.tape.value(a);
                if self.model.config.feature_mode == FeatureMode::Raw {
                    stimulus_attention_map(&t.map(|v| v.max(0.0)))
                } else {
                    stimulus_attention_map(t)
                }
            })
            .transpose()
    }

    pub fn integrated(&self) -> &Tensor {
        self.tape.value(self.enc.integrated)
    }

    /// Context vector and attention for a given hidden state.
    pub fn attend(&mut self, hidden: &Tensor) -> Result<(AttentionMap, Tensor)> {
        let h = self.tape.constant(hidden.clone());
        let (alpha, z) = topdown_attention(
            &mut self.tape,
            self.enc.integrated,
            self.enc.projected,
            h,
            &self.vars.topdown,
        )?;
        Ok((
            AttentionMap::from_tensor(self.tape.value(alpha), Normalization::Distribution)?,
            self.tape.value(z).clone(),
        ))
    }

    pub fn initial_hidden(&self) -> Tensor {
        self.tape.value(self.enc.h0).clone()
    }

    /// Raw logits and new state for one step, as in the decoder contract.
    pub fn decode_step(&mut self, prev: usize, h: Var, c: Var) -> Result<(Tensor, Var, Var, AttentionMap)> {
        let sv = self.model.step(&mut self.tape, &self.vars, &self.enc, prev, h, c, &self.mask)?;
        Ok((
            self.tape.value(sv.logits).clone(),
            sv.h,
            sv.c,
            AttentionMap::from_tensor(self.tape.value(sv.alpha), Normalization::Distribution)?,
        ))
    }
}

impl StepModel for Session<'_> {
    type State = (Var, Var);

    fn initial(&mut self) -> Result<(Var, Var)> {
        Ok((self.enc.h0, self.enc.c0))
    }

    fn step(&mut self, state: &(Var, Var), prev: usize) -> Result<Step<(Var, Var)>> {
        let sv = self.model.step(
            &mut self.tape,
            &self.vars,
            &self.enc,
            prev,
            state.0,
            state.1,
            &self.mask,
        )?;
        Ok(Step {
            logprobs: self.tape.value(sv.logprobs).data().to_vec(),
            state: (sv.h, sv.c),
            alpha: Some(AttentionMap::from_tensor(
                self.tape.value(sv.alpha),
                Normalization::Distribution,
            )?),
        })
    }
}

/// Decoding on a caller-owned tape that keeps every step's log-probability
/// handle, so a sampled sequence can be differentiated afterwards.
pub struct Rollout<'a> {
    model: &'a Captioner,
    tape: &'a mut Tape,
    vars: &'a ModelVars,
    enc: Encoded,
    mask: Rc<[bool]>,
    pub logprobs: Vec<Var>,
}

impl<'a> Rollout<'a> {
    pub fn new(model: &'a Captioner, tape: &'a mut Tape, vars: &'a ModelVars, enc: Encoded) -> Self {
        Rollout {
            model,
            tape,
            vars,
            enc,
            mask: model.vocab.emit_mask(),
            logprobs: Vec::new(),
        }
    }
}

impl StepModel for Rollout<'_> {
    type State = (Var, Var);

    fn initial(&mut self) -> Result<(Var, Var)> {
        Ok((self.enc.h0, self.enc.c0))
    }

    fn step(&mut self, state: &(Var, Var), prev: usize) -> Result<Step<(Var, Var)>> {
        let sv = self
            .model
            .step(self.tape, self.vars, &self.enc, prev, state.0, state.1, &self.mask)?;
        self.logprobs.push(sv.logprobs);
        Ok(Step {
            logprobs: self.tape.value(sv.logprobs).data().to_vec(),
            state: (sv.h, sv.c),
            alpha: None,
        })
    }
}
