//! On-disk training state and pretrained saliency heads.
//!
//! A checkpoint is a directory holding `params.batn` (every parameter, then
//! every first moment, then every second moment, in canonical order) and
//! `manifest.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::Vocab;
use crate::error::{Error, Result};
use crate::model::{Captioner, ModelConfig, Variant};
use crate::optim::Moments;
use crate::saliency::SaliencyParams;
use crate::tensor::{read_tensors, write_tensors, Tensor};
use crate::train::{config_hash, Phase, RngState, TrainConfig, Trainer};

pub const CHECKPOINT_FORMAT: &str = "bam-checkpoint";
pub const SALIENCY_FORMAT: &str = "bam-saliency";
pub const VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.batn";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
    pub adam_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub next_lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub next_ss_prob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub phase: Phase,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub schedules: Schedules,
    pub rng: RngState,
    pub stimulus_frozen: Option<bool>,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vocab,
    pub parameters: Vec<ParamEntry>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = BufReader::new(File::open(path)?);
    serde_json::from_reader(f).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn manifest_of(t: &Trainer) -> Result<CheckpointManifest> {
    let m = &t.model;
    let schedules = match t.phase {
        Phase::Xe => Schedules {
            next_lr: t.config.lr_xe_at(t.epoch),
            next_ss_prob: Some(t.config.ss_at(t.epoch)),
        },
        Phase::Rl => Schedules {
            next_lr: t.config.lr_rl_at(t.epoch),
            next_ss_prob: None,
        },
        Phase::Done => Schedules {
            next_lr: 0.0,
            next_ss_prob: None,
        },
    };
    Ok(CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: VERSION,
        variant: m.variant,
        phase: t.phase,
        epoch: t.epoch,
        seed: t.config.seed,
        config_hash: config_hash(m.variant, &m.config, &t.config)?,
        schedules,
        rng: RngState::capture(&t.rng),
        stimulus_frozen: m.stimulus.as_ref().map(|s| s.frozen),
        model_config: m.config.clone(),
        train_config: t.config.clone(),
        vocab: m.vocab.clone(),
        parameters: m
            .parameters()
            .iter()
            .zip(&t.moments)
            .map(|((name, p), mo)| ParamEntry {
                name: name.to_string(),
                shape: p.shape().to_vec(),
                sha256: p.fingerprint(),
                adam_steps: mo.t,
            })
            .collect(),
    })
}

/// Writes the trainer's full state under `dir`.
pub fn save_checkpoint(t: &Trainer, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let params = t.model.parameters();
    let mut all: Vec<&Tensor> = params.iter().map(|(_, p)| *p).collect();
    all.extend(t.moments.iter().map(|m| &m.m));
    all.extend(t.moments.iter().map(|m| &m.v));
    let mut f = BufWriter::new(File::create(dir.join(PARAMS_FILE))?);
    write_tensors(&mut f, &all)?;
    f.flush()?;
    write_json(&dir.join(MANIFEST_FILE), &manifest_of(t)?)
}

/// Restores a trainer exactly as it was saved.
pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
    let man: CheckpointManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if man.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("not a checkpoint manifest: {:?}", man.format)));
    }
    if man.version != VERSION {
        return Err(Error::Format(format!("checkpoint version {} (expected {VERSION})", man.version)));
    }
    let hash = config_hash(man.variant, &man.model_config, &man.train_config)?;
    if hash != man.config_hash {
        return Err(Error::Format("config hash does not match the recorded configuration".into()));
    }
    let tensors = read_tensors(&mut BufReader::new(File::open(dir.join(PARAMS_FILE))?))?;
    let n = man.parameters.len();
    if tensors.len() != 3 * n {
        return Err(Error::Format(format!("{} tensors for {n} parameters", tensors.len())));
    }
    let mut it = tensors.into_iter();
    let params: Vec<Tensor> = it.by_ref().take(n).collect();
    let ms: Vec<Tensor> = it.by_ref().take(n).collect();
    let vs: Vec<Tensor> = it.collect();
    for (entry, p) in man.parameters.iter().zip(&params) {
        if p.fingerprint() != entry.sha256 || p.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!("parameter {} does not match its manifest entry", entry.name)));
        }
    }
    let mut model = Captioner::blank(man.variant, man.model_config.clone(), man.vocab.clone())?;
    model.load_parameters(man.parameters.iter().map(|e| e.name.clone()).zip(params).collect())?;
    if let (Some(s), Some(f)) = (&mut model.stimulus, man.stimulus_frozen) {
        s.frozen = f;
    }
    let moments = ms
        .into_iter()
        .zip(vs)
        .zip(&man.parameters)
        .map(|((m, v), e)| {
            if m.shape() != e.shape.as_slice() || v.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("optimizer state for {} has the wrong shape", e.name)));
            }
            Ok(Moments { m, v, t: e.adam_steps })
        })
        .collect::<Result<Vec<_>>>()?;
    Trainer::resume(
        model,
        man.train_config,
        moments,
        man.rng.restore()?,
        man.phase,
        man.epoch,
    )
}

/// Loads only the captioner from a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<Captioner> {
    Ok(load_checkpoint(dir)?.model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyManifest {
    pub format: String,
    pub version: u32,
    pub channels: usize,
    pub width: usize,
    pub loss_curve: Vec<f64>,
    pub w_sal_sha256: String,
}

/// Writes a pretrained saliency head as `saliency.batn` plus `saliency.json` under `dir`.
pub fn save_saliency(params: &SaliencyParams, loss_curve: &[f64], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let ts = params.tensors();
    let mut f = BufWriter::new(File::create(dir.join("saliency.batn"))?);
    write_tensors(&mut f, &ts.iter().map(|(_, t)| *t).collect::<Vec<_>>())?;
    f.flush()?;
    write_json(
        &dir.join("saliency.json"),
        &SaliencyManifest {
            format: SALIENCY_FORMAT.into(),
            version: VERSION,
            channels: params.channels(),
            width: params.width(),
            loss_curve: loss_curve.to_vec(),
            w_sal_sha256: params.w_sal.fingerprint(),
        },
    )
}

pub fn load_saliency(dir: &Path) -> Result<(SaliencyParams, SaliencyManifest)> {
    let man: SaliencyManifest = read_json(&dir.join("saliency.json"))?;
    if man.format != SALIENCY_FORMAT || man.version != VERSION {
        return Err(Error::Format(format!("not a version {VERSION} saliency head")));
    }
    let ts = read_tensors(&mut BufReader::new(File::open(dir.join("saliency.batn"))?))?;
    let [w_sal, b_sal, w_m, b_m]: [Tensor; 4] = ts
        .try_into()
        .map_err(|v: Vec<Tensor>| Error::Format(format!("{} tensors in a saliency head", v.len())))?;
    let p = SaliencyParams {
        w_sal,
        b_sal,
        w_m,
        b_m,
        frozen: true,
    };
    p.validate().map_err(|e| Error::Format(e.to_string()))?;
    if p.w_sal.fingerprint() != man.w_sal_sha256 {
        return Err(Error::Format("saliency weights do not match their manifest".into()));
    }
    Ok((p, man))
}
