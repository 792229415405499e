use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use boosted_attention::analysis::{analyze_scene, summarize, SampleAnalysis};
use boosted_attention::checkpoint::{load_checkpoint, load_model, load_saliency, save_checkpoint, save_saliency};
use boosted_attention::metrics::{cc, score_corpus, tokenize, CaptionScores};
use boosted_attention::model::Variant;
use boosted_attention::pipeline::{build_model, pipeline_grad_check, pretrain_on_scenes};
use boosted_attention::saliency::saliency_map;
use boosted_attention::synth::{generate_split, read_dataset, write_dataset, SceneSample, Split};
use boosted_attention::train::{config_hash, evaluate, examples_from_scenes, generate, EpochRecord, Trainer};
use boosted_attention::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const REPORT: &str = "report.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOG: &str = "log.jsonl";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Prints the report on stdout and, when `out` is given, stores it as `report.json`.
fn emit<T: Serialize>(report: &T, out: Option<&Path>) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join(REPORT), report)?;
    }
    println!("{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

fn load_split(root: &Path, split: Split) -> Result<Vec<SceneSample>> {
    let dir = root.join(split.name());
    if !dir.is_dir() {
        return Err(Error::Format(format!("no {} split under {}", split.name(), root.display())));
    }
    read_dataset(&dir)
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Format(format!("{what} {} does not exist", path.display())))
    }
}

#[derive(Serialize)]
struct SplitSummary {
    split: &'static str,
    count: usize,
    path: PathBuf,
}

#[derive(Serialize)]
struct GenDataReport<'a> {
    seed: u64,
    config: &'a crate::config::DataConfig,
    splits: Vec<SplitSummary>,
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let d = &cfg.data;
    let mut splits = Vec::new();
    for (split, count) in [(Split::Train, d.train), (Split::Val, d.val), (Split::Test, d.test)] {
        let samples = generate_split(&d.synth, d.seed, split, count)?;
        let path = out.join(split.name());
        write_dataset(&samples, &path)?;
        eprintln!("{:<5} {count:>5} scenes -> {}", split.name(), path.display());
        splits.push(SplitSummary {
            split: split.name(),
            count,
            path,
        });
    }
    emit(
        &GenDataReport {
            seed: d.seed,
            config: d,
            splits,
        },
        Some(out),
    )
}

#[derive(Serialize)]
struct PretrainReport {
    train_scenes: usize,
    val_scenes: usize,
    config: boosted_attention::saliency::PretrainConfig,
    loss_curve: Vec<f64>,
    val_mean_cc: Option<f64>,
    w_sal_sha256: String,
}

pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let train = load_split(data, Split::Train)?;
    let val = if data.join(Split::Val.name()).is_dir() {
        load_split(data, Split::Val)?
    } else {
        Vec::new()
    };
    if train.is_empty() {
        return Err(Error::Format("empty training split".into()));
    }
    let (params, curve) = pretrain_on_scenes(&train, cfg.model.feature_dim, &cfg.pretrain)?;
    for (e, l) in curve.iter().enumerate() {
        eprintln!("epoch {e:>3}  loss {l:.6}");
    }
    let mut ccs = Vec::new();
    for s in &val {
        if let Some(c) = cc(&saliency_map(&s.features, &params)?, &s.saliency)? {
            ccs.push(c);
        }
    }
    let val_mean_cc = (!ccs.is_empty()).then(|| ccs.iter().sum::<f64>() / ccs.len() as f64);
    save_saliency(&params, &curve, out)?;
    emit(
        &PretrainReport {
            train_scenes: train.len(),
            val_scenes: val.len(),
            config: cfg.pretrain.clone(),
            loss_curve: curve,
            val_mean_cc,
            w_sal_sha256: params.w_sal.fingerprint(),
        },
        Some(out),
    )
}

#[derive(Serialize)]
struct TrainReport {
    variant: Variant,
    seed: u64,
    config_hash: String,
    epochs: Vec<EpochRecord>,
    beam_width: usize,
    val: Option<CaptionScores>,
    checkpoint: PathBuf,
}

pub struct TrainArgs<'a> {
    pub variant: Variant,
    pub data: &'a Path,
    pub saliency: Option<&'a Path>,
    pub out: &'a Path,
    pub resume: bool,
    pub beam_width: usize,
}

pub fn train(cfg: &RunConfig, args: TrainArgs<'_>) -> Result<()> {
    let scenes = load_split(args.data, Split::Train)?;
    let channels = scenes.first().map(|s| s.features.shape()[0]);
    if channels.is_some_and(|c| c != cfg.model.channels) {
        return Err(Error::Config(format!(
            "model.channels is {} but the dataset has {} feature channels",
            cfg.model.channels,
            channels.unwrap_or(0)
        )));
    }
    let hash = config_hash(args.variant, &cfg.model, &cfg.train)?;
    let ckpt = args.out.join(CHECKPOINT_DIR);
    let log_path = args.out.join(LOG);
    let (mut trainer, mut log) = if args.resume && ckpt.is_dir() {
        let t = load_checkpoint(&ckpt)?;
        if t.model.variant != args.variant {
            return Err(Error::Config(format!(
                "checkpoint holds a {} model, not {}",
                t.model.variant.name(),
                args.variant.name()
            )));
        }
        if config_hash(t.model.variant, &t.model.config, &t.config)? != hash {
            return Err(Error::Config("checkpoint was trained with a different configuration".into()));
        }
        let log: Vec<EpochRecord> = if log_path.is_file() { read_jsonl(&log_path)? } else { Vec::new() };
        eprintln!("resuming {} at {:?} epoch {}", args.variant.name(), t.phase, t.epoch);
        (t, log)
    } else {
        let saliency = match (args.variant, args.saliency) {
            (Variant::Bam, None) => {
                return Err(Error::Config("the bam variant needs --saliency <dir>".into()));
            }
            (Variant::Bam, Some(dir)) => {
                require_dir(dir, "saliency head")?;
                let (p, _) = load_saliency(dir)?;
                if p.channels() != cfg.model.channels || p.width() != cfg.model.feature_dim {
                    return Err(Error::Config(format!(
                        "saliency head is {}→{} but the model expects {}→{}",
                        p.channels(),
                        p.width(),
                        cfg.model.channels,
                        cfg.model.feature_dim
                    )));
                }
                Some(p)
            }
            _ => None,
        };
        let model = build_model(args.variant, &cfg.model, saliency.as_ref(), cfg.train.seed)?;
        (Trainer::new(model, cfg.train.clone())?, Vec::new())
    };
    std::fs::create_dir_all(args.out)?;
    let data = examples_from_scenes(&scenes, &trainer.model.vocab)?;
    trainer.run(&data, |rec, t| {
        if !rec.loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {} at {:?} epoch {}", rec.loss, rec.phase, rec.epoch)));
        }
        eprintln!("{}", serde_json::to_string(rec)?);
        log.push(rec.clone());
        save_checkpoint(t, &ckpt)?;
        write_jsonl(&log_path, &log)
    })?;
    if !ckpt.is_dir() {
        save_checkpoint(&trainer, &ckpt)?;
    }
    let val = if args.data.join(Split::Val.name()).is_dir() {
        let v = load_split(args.data, Split::Val)?;
        if v.is_empty() {
            None
        } else {
            Some(evaluate(&trainer.model, &examples_from_scenes(&v, &trainer.model.vocab)?, args.beam_width)?)
        }
    } else {
        None
    };
    emit(
        &TrainReport {
            variant: args.variant,
            seed: cfg.train.seed,
            config_hash: hash,
            epochs: log,
            beam_width: args.beam_width,
            val,
            checkpoint: ckpt,
        },
        Some(args.out),
    )
}

/// One line of a captions file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaptionLine {
    pub id: u64,
    pub caption: String,
}

/// One line of a references file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub id: u64,
    pub references: Vec<String>,
}

fn load_model_dir(path: &Path) -> Result<boosted_attention::model::Captioner> {
    require_dir(path, "checkpoint")?;
    load_model(path)
}

pub fn caption(checkpoint: &Path, data: &Path, split: Split, beam_width: usize, out: Option<&Path>) -> Result<()> {
    let model = load_model_dir(checkpoint)?;
    let scenes = load_split(data, split)?;
    let feats: Vec<&Tensor> = scenes.iter().map(|s| &s.features).collect();
    let caps = generate(&model, &feats, beam_width)?;
    let lines: Vec<CaptionLine> = scenes
        .iter()
        .zip(caps)
        .map(|(s, c)| CaptionLine {
            id: s.id,
            caption: c.join(" "),
        })
        .collect();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("captions.jsonl"), &lines)?;
    }
    for l in &lines {
        println!("{}", serde_json::to_string(l)?);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    source: String,
    beam_width: Option<usize>,
    scores: CaptionScores,
}

pub struct EvalArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub candidates: Option<&'a Path>,
    pub references: Option<&'a Path>,
    pub data: Option<&'a Path>,
    pub split: Split,
    pub beam_width: usize,
    pub out: Option<&'a Path>,
}

pub fn evaluate_cmd(args: EvalArgs<'_>) -> Result<()> {
    let report = match (args.checkpoint, args.candidates) {
        (Some(ckpt), None) => {
            let data = args
                .data
                .ok_or_else(|| Error::Config("--checkpoint needs --data".into()))?;
            let model = load_model_dir(ckpt)?;
            let scenes = load_split(data, args.split)?;
            let ex = examples_from_scenes(&scenes, &model.vocab)?;
            EvalReport {
                source: ckpt.display().to_string(),
                beam_width: Some(args.beam_width),
                scores: evaluate(&model, &ex, args.beam_width)?,
            }
        }
        (None, Some(cands)) => {
            let refs: BTreeMap<u64, Vec<Vec<String>>> = match (args.references, args.data) {
                (Some(r), _) => read_jsonl::<ReferenceLine>(r)?
                    .into_iter()
                    .map(|l| (l.id, l.references.iter().map(|s| tokenize(s)).collect()))
                    .collect(),
                (None, Some(d)) => load_split(d, args.split)?
                    .into_iter()
                    .map(|s| (s.id, s.captions))
                    .collect(),
                (None, None) => {
                    return Err(Error::Config("--candidates needs --references or --data".into()));
                }
            };
            let lines: Vec<CaptionLine> = read_jsonl(cands)?;
            let mut hyp = Vec::with_capacity(lines.len());
            let mut gold = Vec::with_capacity(lines.len());
            for l in lines {
                let r = refs
                    .get(&l.id)
                    .ok_or_else(|| Error::Format(format!("no references for id {}", l.id)))?;
                hyp.push(tokenize(&l.caption));
                gold.push(r.clone());
            }
            EvalReport {
                source: cands.display().to_string(),
                beam_width: None,
                scores: score_corpus(&hyp, &gold, None)?,
            }
        }
        _ => return Err(Error::Config("give exactly one of --checkpoint or --candidates".into())),
    };
    let s = &report.scores;
    eprintln!(
        "BLEU-1 {:.4}  BLEU-2 {:.4}  BLEU-3 {:.4}  BLEU-4 {:.4}  ROUGE-L {:.4}  CIDEr {:.4}  ({} captions)",
        s.bleu_1, s.bleu_2, s.bleu_3, s.bleu_4, s.rouge_l, s.cider, s.count
    );
    emit(&report, args.out)
}

fn sanitize(token: &str) -> String {
    token
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn write_maps(dir: &Path, a: &SampleAnalysis) -> Result<()> {
    let d = dir.join(a.id.to_string());
    std::fs::create_dir_all(&d)?;
    if let Some(m) = &a.stimulus_map {
        std::fs::write(d.join("stimulus.pgm"), m.to_pgm())?;
    }
    for w in &a.words {
        std::fs::write(d.join(format!("{:02}_{}.pgm", w.position, sanitize(&w.token))), w.alpha.to_pgm())?;
    }
    Ok(())
}

pub fn analyze(checkpoint: &Path, data: &Path, split: Split, beam_width: usize, out: &Path) -> Result<()> {
    let model = load_model_dir(checkpoint)?;
    let scenes = load_split(data, split)?;
    let analyses = scenes
        .iter()
        .map(|s| analyze_scene(&model, s, beam_width))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    write_jsonl(&out.join("pairs.jsonl"), &analyses)?;
    let maps = out.join("maps");
    for a in &analyses {
        write_maps(&maps, a)?;
    }
    let summary = summarize(&analyses);
    let fmt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "{} samples, {} word pairs: CC {}  Spearman {}  P(d|f) {:.4}",
        summary.samples,
        summary.word_pairs,
        fmt(summary.mean_cc),
        fmt(summary.mean_spearman),
        summary.mean_p_described
    );
    emit(&summary, Some(out))
}

#[derive(Serialize)]
struct GradCheckReport {
    variant: Variant,
    seed: u64,
    tol: f64,
    passed: bool,
    max_rel_error: f64,
    relu_margin: f64,
    params: Vec<boosted_attention::autograd::ParamCheck>,
}

pub fn grad_check(variant: Variant, seed: u64, tol: f64, out: Option<&Path>) -> Result<()> {
    let r = pipeline_grad_check(variant, seed, tol)?;
    eprint!("{r}");
    let report = GradCheckReport {
        variant,
        seed,
        tol,
        passed: r.passed(),
        max_rel_error: r.max_rel_error(),
        relu_margin: r.relu_margin,
        params: r.params,
    };
    emit(&report, out)?;
    if report.passed {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} ≥ {tol:e}",
            report.max_rel_error
        )))
    }
}
