//! Two-phase optimization: cross-entropy with scheduled sampling, then
//! self-critical policy gradient on CIDEr-D.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::decoder::{beam_search, greedy_decode, sample_decode, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{score_corpus, CaptionScores, CorpusStats};
use crate::model::{Captioner, Rollout, Variant};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, Moments};
use crate::synth::SceneSample;
use crate::tensor::{hex, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub xe_epochs: usize,
    pub rl_epochs: usize,
    pub batch_size: usize,
    pub lr_xe: f64,
    pub lr_rl: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub ss_start: f64,
    pub ss_increment: f64,
    pub ss_every: usize,
    pub seed: u64,
    pub freeze_sal_in_xe: bool,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            xe_epochs: 25,
            rl_epochs: 15,
            batch_size: 16,
            lr_xe: 5e-4,
            lr_rl: 5e-5,
            lr_decay: 0.8,
            lr_decay_every: 3,
            ss_start: 0.0,
            ss_increment: 0.05,
            ss_every: 5,
            seed: 0,
            freeze_sal_in_xe: true,
            clip_norm: 5.0,
        }
    }
}

/// `base · decay^⌊epoch / every⌋`
pub fn step_decay(base: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    base * decay.powf((epoch / every) as f64)
}

/// `start + increment · ⌊epoch / every⌋`, clamped to `[0, 1]`.
pub fn step_increase(start: f64, increment: f64, every: usize, epoch: usize) -> f64 {
    (start + increment * (epoch / every) as f64).clamp(0.0, 1.0)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_xe >= 0.0 && self.lr_rl >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.lr_decay_every == 0 || self.ss_every == 0 || self.batch_size == 0 {
            return bad("schedule periods and batch size must be positive");
        }
        if !(0.0..=1.0).contains(&self.ss_start) || !(self.ss_increment >= 0.0) {
            return bad("scheduled sampling must start in [0, 1] and not decrease");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn lr_xe_at(&self, epoch: usize) -> f64 {
        step_decay(self.lr_xe, self.lr_decay, self.lr_decay_every, epoch)
    }

    pub fn lr_rl_at(&self, epoch: usize) -> f64 {
        step_decay(self.lr_rl, self.lr_decay, self.lr_decay_every, epoch)
    }

    pub fn ss_at(&self, epoch: usize) -> f64 {
        step_increase(self.ss_start, self.ss_increment, self.ss_every, epoch)
    }
}

/// One training image with its encoded references.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Tensor,
    /// Token ids without `BOS`/`EOS`.
    pub captions: Vec<Vec<usize>>,
    pub references: Vec<Vec<String>>,
}

pub fn examples_from_scenes(scenes: &[SceneSample], vocab: &Vocab) -> Result<Vec<Example>> {
    scenes
        .iter()
        .map(|s| {
            Ok(Example {
                features: s.features.clone(),
                captions: s.captions.iter().map(|c| vocab.encode(c)).collect::<Result<_>>()?,
                references: s.captions.clone(),
            })
        })
        .collect()
}

pub fn corpus_stats(examples: &[Example]) -> CorpusStats {
    let refs: Vec<Vec<Vec<String>>> = examples.iter().map(|e| e.references.clone()).collect();
    CorpusStats::new(&refs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Xe,
    Rl,
    Done,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ss_prob: Option<f64>,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cider_sample: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cider_greedy: Option<f64>,
    /// Rollouts whose reward was exactly zero.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_reward: Option<usize>,
    pub truncated: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_sal_sha256: Option<String>,
}

/// Exact position of the trainer's random stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("bad rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

pub struct Trainer {
    pub model: Captioner,
    pub config: TrainConfig,
    pub moments: Vec<Moments>,
    pub rng: ChaCha8Rng,
    pub phase: Phase,
    /// Next epoch index within the current phase.
    pub epoch: usize,
    adam: AdamConfig,
}

impl Trainer {
    /// Starts a run. `bam` keeps its stimulus branch frozen during the
    /// cross-entropy phase when the config asks for it; `bam_star` never does.
    pub fn new(mut model: Captioner, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.set_stimulus_frozen(model.variant == Variant::Bam && config.freeze_sal_in_xe);
        let moments = model.parameters().iter().map(|(_, t)| Moments::zeros_like(t)).collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut t = Trainer {
            model,
            config,
            moments,
            rng,
            phase: Phase::Xe,
            epoch: 0,
            adam: AdamConfig::default(),
        };
        t.settle();
        Ok(t)
    }

    /// Resumes from saved state.
    pub fn resume(
        model: Captioner,
        config: TrainConfig,
        moments: Vec<Moments>,
        rng: ChaCha8Rng,
        phase: Phase,
        epoch: usize,
    ) -> Result<Self> {
        config.validate()?;
        if moments.len() != model.parameters().len() {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        Ok(Trainer {
            model,
            config,
            moments,
            rng,
            phase,
            epoch,
            adam: AdamConfig::default(),
        })
    }

    /// Advances past finished phases; unfreezes the stimulus branch for RL.
    fn settle(&mut self) {
        if self.phase == Phase::Xe && self.epoch >= self.config.xe_epochs {
            self.phase = Phase::Rl;
            self.epoch = 0;
            self.model.set_stimulus_frozen(false);
        }
        if self.phase == Phase::Rl && self.epoch >= self.config.rl_epochs {
            self.phase = Phase::Done;
            self.epoch = 0;
        }
    }

    pub fn w_sal_fingerprint(&self) -> Option<String> {
        self.model.stimulus.as_ref().map(|s| s.w_sal.fingerprint())
    }

    fn apply(&mut self, grads: Vec<Option<Tensor>>, lr: f64) -> Result<()> {
        let frozen = self.model.frozen_mask();
        let mut dense: Vec<Tensor> = grads
            .into_iter()
            .zip(self.model.parameters())
            .map(|(g, (_, p))| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        clip_global_norm(&mut dense, self.config.clip_norm);
        let params = self.model.parameters_mut();
        for (((_, p), g), (m, f)) in params
            .into_iter()
            .zip(&dense)
            .zip(self.moments.iter_mut().zip(frozen))
        {
            adam_step(p, g, m, lr, &self.adam, f)?;
        }
        Ok(())
    }

    /// One cross-entropy epoch over every (image, reference) pair.
    pub fn xe_epoch(&mut self, data: &[Example]) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let epoch = self.epoch;
        let lr = self.config.lr_xe_at(epoch);
        let ss = self.config.ss_at(epoch);
        let mut pairs: Vec<(usize, usize)> = data
            .iter()
            .enumerate()
            .flat_map(|(i, e)| (0..e.captions.len()).map(move |j| (i, j)))
            .collect();
        pairs.shuffle(&mut self.rng);
        let (mut loss_sum, mut correct, mut tokens, mut truncated) = (0.0, 0, 0, 0);
        for batch in pairs.chunks(self.config.batch_size) {
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape, true);
            let mut losses = Vec::with_capacity(batch.len());
            for &(i, j) in batch {
                let enc = self.model.encode(&mut tape, &vars, &data[i].features)?;
                let cl = self.model.caption_loss(
                    &mut tape,
                    &vars,
                    &enc,
                    &data[i].captions[j],
                    ss,
                    &mut self.rng,
                )?;
                correct += cl.correct;
                tokens += cl.tokens;
                truncated += cl.truncated as usize;
                losses.push(cl.loss);
            }
            let total = tape.add_all(&losses)?;
            loss_sum += tape.value(total).item();
            let mean = tape.scale(total, 1.0 / batch.len() as f64);
            tape.backward(mean)?;
            let grads = self.model.take_grads(&mut tape, &vars);
            self.apply(grads, lr)?;
        }
        let rec = EpochRecord {
            phase: Phase::Xe,
            epoch,
            lr,
            ss_prob: Some(ss),
            loss: loss_sum / pairs.len() as f64,
            token_accuracy: Some(correct as f64 / tokens as f64),
            mean_reward: None,
            cider_sample: None,
            cider_greedy: None,
            zero_reward: None,
            truncated,
            w_sal_sha256: self.w_sal_fingerprint(),
        };
        self.epoch += 1;
        self.settle();
        Ok(rec)
    }

    /// One self-critical epoch: a sampled and a greedy rollout per image, with
    /// the greedy CIDEr-D as the baseline.
    pub fn rl_epoch(&mut self, data: &[Example], stats: &CorpusStats) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let epoch = self.epoch;
        let lr = self.config.lr_rl_at(epoch);
        let max_len = self.model.config.max_len;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut reward_sum, mut cs, mut cg, mut zero) = (0.0, 0.0, 0.0, 0.0, 0);
        for batch in order.chunks(self.config.batch_size) {
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape, true);
            let mut terms: Vec<Var> = Vec::new();
            for &i in batch {
                let ex = &data[i];
                let enc = self.model.encode(&mut tape, &vars, &ex.features)?;
                let mut ro = Rollout::new(&self.model, &mut tape, &vars, enc);
                let greedy = greedy_decode(&mut ro, max_len)?;
                ro.logprobs.clear();
                let sample = sample_decode(&mut ro, max_len, &mut self.rng)?;
                let steps = std::mem::take(&mut ro.logprobs);
                let vocab = &self.model.vocab;
                let r_s = stats.cider(&vocab.decode(&sample.tokens), &ex.references)?;
                let r_g = stats.cider(&vocab.decode(&greedy.tokens), &ex.references)?;
                let reward = r_s - r_g;
                cs += r_s;
                cg += r_g;
                reward_sum += reward;
                if reward == 0.0 {
                    zero += 1;
                    continue;
                }
                let picks = steps
                    .iter()
                    .zip(sample.emitted())
                    .map(|(&lp, tok)| tape.pick(lp, tok))
                    .collect::<Result<Vec<_>>>()?;
                let logp = tape.add_all(&picks)?;
                loss_sum += -reward * tape.value(logp).item();
                terms.push(tape.scale(logp, -reward));
            }
            let grads = if terms.is_empty() {
                vec![None; vars.all.len()]
            } else {
                let total = tape.add_all(&terms)?;
                let mean = tape.scale(total, 1.0 / batch.len() as f64);
                tape.backward(mean)?;
                self.model.take_grads(&mut tape, &vars)
            };
            self.apply(grads, lr)?;
        }
        let n = data.len() as f64;
        let rec = EpochRecord {
            phase: Phase::Rl,
            epoch,
            lr,
            ss_prob: None,
            loss: loss_sum / n,
            token_accuracy: None,
            mean_reward: Some(reward_sum / n),
            cider_sample: Some(cs / n),
            cider_greedy: Some(cg / n),
            zero_reward: Some(zero),
            truncated: 0,
            w_sal_sha256: self.w_sal_fingerprint(),
        };
        self.epoch += 1;
        self.settle();
        Ok(rec)
    }

    /// Runs the next scheduled epoch, or returns `None` once both phases are done.
    pub fn next_epoch(&mut self, data: &[Example], stats: &CorpusStats) -> Result<Option<EpochRecord>> {
        match self.phase {
            Phase::Xe => self.xe_epoch(data).map(Some),
            Phase::Rl => self.rl_epoch(data, stats).map(Some),
            Phase::Done => Ok(None),
        }
    }

    /// Runs every remaining epoch, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        data: &[Example],
        mut on_epoch: impl FnMut(&EpochRecord, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let stats = corpus_stats(data);
        let mut log = Vec::new();
        while let Some(rec) = self.next_epoch(data, &stats)? {
            on_epoch(&rec, self)?;
            log.push(rec);
        }
        Ok(log)
    }
}

/// Decodes one caption per example with beam search (greedy when `beam_width` is 1).
pub fn generate(model: &Captioner, features: &[&Tensor], beam_width: usize) -> Result<Vec<Vec<String>>> {
    features
        .iter()
        .map(|f| {
            let mut s = model.session(f)?;
            let r = if beam_width == 1 {
                greedy_decode(&mut s, model.config.max_len)?
            } else {
                beam_search(&mut s, beam_width, model.config.max_len)?
            };
            Ok(model.vocab.decode(&r.tokens))
        })
        .collect()
}

/// Caption scores of beam-decoded captions against each example's references.
pub fn evaluate(model: &Captioner, data: &[Example], beam_width: usize) -> Result<CaptionScores> {
    let feats: Vec<&Tensor> = data.iter().map(|e| &e.features).collect();
    let cands = generate(model, &feats, beam_width)?;
    let refs: Vec<Vec<Vec<String>>> = data.iter().map(|e| e.references.clone()).collect();
    score_corpus(&cands, &refs, None)
}

/// SHA-256 over the canonical JSON of everything that shapes a run.
pub fn config_hash(variant: Variant, model: &crate::model::ModelConfig, train: &TrainConfig) -> Result<String> {
    let v = serde_json::json!({ "variant": variant, "model": model, "train": train });
    Ok(hex(&Sha256::digest(serde_json::to_vec(&v)?)))
}
