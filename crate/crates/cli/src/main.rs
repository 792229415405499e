use std::path::PathBuf;
use std::process::ExitCode;

use boosted_attention::model::Variant;
use boosted_attention::synth::Split;
use boosted_attention::Error;
use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use commands::{EvalArgs, TrainArgs};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "bam", version, about = "Boosted-attention image captioning on synthetic scenes")]
struct Cli {
    /// JSON file with `data`, `model`, `train` and `pretrain` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed of the step being run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Baseline,
    Bam,
    #[value(name = "bam_star", alias = "bam*")]
    BamStar,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Bam => Variant::Bam,
            VariantArg::BamStar => Variant::BamStar,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test splits of synthetic scenes.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the saliency head to the training split's saliency maps.
    PretrainSaliency {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a captioner through the cross-entropy and self-critical phases.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Pretrained saliency head (required for `bam`).
        #[arg(long)]
        saliency: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint` if it exists.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 3)]
        beam_width: usize,
    },
    /// Score a checkpoint on a split, or score a captions file.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSONL of `{"id", "caption"}`.
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// JSONL of `{"id", "references"}`.
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 3)]
        beam_width: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode one caption per scene.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 3)]
        beam_width: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare stimulus and top-down attention word by word.
    AnalyzeAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 3)]
        beam_width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every captioner parameter.
    GradCheck {
        #[arg(long, value_enum, default_value = "bam")]
        variant: VariantArg,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Generation(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> boosted_attention::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
        cfg.pretrain.seed = s;
    }
    let beam = |w: usize| {
        if w == 0 {
            Err(Error::Config("--beam-width must be at least 1".into()))
        } else {
            Ok(w)
        }
    };
    match cli.command {
        Command::GenData { out } => commands::gen_data(&cfg, &out),
        Command::PretrainSaliency { data, out } => commands::pretrain(&cfg, &data, &out),
        Command::Train {
            data,
            variant,
            saliency,
            out,
            resume,
            beam_width,
        } => commands::train(
            &cfg,
            TrainArgs {
                variant: variant.into(),
                data: &data,
                saliency: saliency.as_deref(),
                out: &out,
                resume,
                beam_width: beam(beam_width)?,
            },
        ),
        Command::Evaluate {
            checkpoint,
            candidates,
            references,
            data,
            split,
            beam_width,
            out,
        } => commands::evaluate_cmd(EvalArgs {
            checkpoint: checkpoint.as_deref(),
            candidates: candidates.as_deref(),
            references: references.as_deref(),
            data: data.as_deref(),
            split: split.into(),
            beam_width: beam(beam_width)?,
            out: out.as_deref(),
        }),
        Command::Caption {
            checkpoint,
            data,
            split,
            beam_width,
            out,
        } => commands::caption(&checkpoint, &data, split.into(), beam(beam_width)?, out.as_deref()),
        Command::AnalyzeAttention {
            checkpoint,
            data,
            split,
            beam_width,
            out,
        } => commands::analyze(&checkpoint, &data, split.into(), beam(beam_width)?, &out),
        Command::GradCheck { variant, tol, out } => {
            commands::grad_check(variant.into(), cli.seed.unwrap_or(0), tol, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bam: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
