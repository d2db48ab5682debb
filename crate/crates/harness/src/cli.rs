//! The `cvpb` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use cvpb_core::adapters::Method;
use cvpb_core::corruption::{corrupt, CorruptionKind, CorruptionSpec};
use cvpb_core::prompts::InitMode;
use cvpb_core::{Error, Result, Tensor};

use crate::checkpoint::{backbone_checkpoint, backbone_from_checkpoint, rotation_head_checkpoint, ssl_head_checkpoint, Checkpoint};
use crate::config::{ExperimentConfig, MethodEntry};
use crate::data::io_err;
use crate::records::{write_csv, write_jsonl};
use crate::report::{emit_report, Layout};
use crate::runner::{
    cell_seed, load_eval, load_train, prepare_models, run_experiment, train_backbone_for, train_rotation_for, train_ssl_for,
    ExperimentOutput, BACKBONE_FILE, CONFIG_FILE, RECORDS_STEM, ROTATION_HEAD_FILE, SSL_HEAD_FILE,
};
use crate::studies::{reversal_study, ReversalConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INTEGRITY: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "cvpb",
    version,
    about = "Test-time adaptation with convolutional visual prompts",
    arg_required_else_help = true
)]
pub struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; `CVPB_OUT` takes precedence.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the classifier and save its checkpoint.
    TrainBackbone,
    /// Train the self-supervised heads on a saved backbone.
    TrainSsl,
    /// Write a corrupted copy of the eval split as a checkpoint container.
    Corrupt {
        #[arg(long)]
        kind: CorruptionKind,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
        severity: u8,
    },
    /// Evaluate one method over the configured corruption grid.
    Adapt {
        #[arg(long)]
        method: Method,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        adapt: AdaptArgs,
    },
    /// Evaluate every configured method over the corruption grid.
    Sweep {
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        adapt: AdaptArgs,
    },
    /// Reversal study on synthetic additive corruptions.
    Reversal {
        #[command(flatten)]
        adapt: AdaptArgs,
    },
    /// Render tables or plot data from saved records.
    Report {
        #[arg(long)]
        layout: Layout,
        /// Records file; defaults to the run's records (or reversal records for fig5).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
    },
}

#[derive(Debug, Default, Args)]
pub struct GridArgs {
    /// Comma-separated corruption kinds.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<CorruptionKind>,
    /// Comma-separated severities.
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u8).range(1..=5))]
    pub severities: Vec<u8>,
    /// Eval images per cell.
    #[arg(long)]
    pub eval_count: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long, value_parser = parse_init)]
    pub init: Option<InitMode>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Bounds of the prompt strength, `lo,hi`.
    #[arg(long, value_parser = parse_range, value_name = "LO,HI")]
    pub lambda_range: Option<(f32, f32)>,
    #[arg(long)]
    pub epsilon: Option<f32>,
    #[arg(long)]
    pub rank: Option<usize>,
}

fn parse_init(s: &str) -> std::result::Result<InitMode, String> {
    match s {
        "fixed" => Ok(InitMode::Fixed),
        "random" => Ok(InitMode::Random),
        _ => Err(format!("expected 'fixed' or 'random', got '{s}'")),
    }
}

fn parse_range(s: &str) -> std::result::Result<(f32, f32), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected 'lo,hi'")?;
    let lo: f32 = lo.trim().parse().map_err(|e| format!("lower bound: {e}"))?;
    let hi: f32 = hi.trim().parse().map_err(|e| format!("upper bound: {e}"))?;
    if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || lo > hi {
        return Err(format!("need 0 ≤ lo ≤ hi, got {lo},{hi}"));
    }
    Ok((lo, hi))
}

impl AdaptArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let a = &mut cfg.adapt;
        if let Some(k) = self.kernel_size {
            a.cvp.kernel_size = k;
        }
        if let Some(i) = self.init {
            a.cvp.init = i;
        }
        if let Some(t) = self.iters {
            a.iters = t;
        }
        if let Some(b) = self.batch_size {
            a.batch_size = b;
        }
        if let Some(r) = self.lambda_range {
            a.cvp.lambda_range = r;
        }
        if let Some(e) = self.epsilon {
            a.vp.epsilon = e;
        }
        if let Some(r) = self.rank {
            a.lvp.rank = r;
        }
    }
}

impl GridArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if !self.kinds.is_empty() {
            cfg.grid.kinds = self.kinds.clone();
        }
        if !self.severities.is_empty() {
            cfg.grid.severities = self.severities.clone();
        }
        if let Some(n) = self.eval_count {
            cfg.grid.eval_count = n;
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Integrity(_) => EXIT_INTEGRITY,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.resolved_out_dir();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn load_backbone(dir: &Path) -> Result<cvpb_core::models::Backbone> {
    let p = dir.join(BACKBONE_FILE);
    if !p.exists() {
        return Err(Error::InvalidArgument(format!(
            "{} not found; run train-backbone first",
            p.display()
        )));
    }
    backbone_from_checkpoint(Checkpoint::load(&p)?)
}

fn print_summary(out: &ExperimentOutput) {
    let s = &out.summary;
    for m in &s.methods {
        if let Some(ms) = s.method(m) {
            let diff = ms.diff.map(|d| format!("  diff {d:+.2}")).unwrap_or_default();
            println!(
                "{m:>14}  acc {:6.2}  err {:6.2}{diff}  ({}/{} cells)",
                ms.avg_acc, ms.avg_error, ms.cells_present, ms.cells_expected
            );
        }
    }
    let failures = out.records.iter().filter(|r| r.failure.is_some()).count();
    if failures > 0 {
        eprintln!("{failures} batch(es) failed; see the records for details");
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match &cli.command {
        Command::TrainBackbone => {
            cfg.validate()?;
            let dir = out_dir(&cfg)?;
            cfg.save(&dir.join(CONFIG_FILE))?;
            let b = train_backbone_for(&cfg, &load_train(&cfg)?)?;
            backbone_checkpoint(&b)?.save(&dir.join(BACKBONE_FILE))?;
            if let Some(acc) = b.clean_accuracy {
                println!("clean accuracy {:.2}%", 100.0 * acc);
            }
            println!("wrote {}", dir.join(BACKBONE_FILE).display());
        }
        Command::TrainSsl => {
            cfg.validate()?;
            let dir = out_dir(&cfg)?;
            let b = load_backbone(&dir)?;
            let train = load_train(&cfg)?;
            ssl_head_checkpoint(&train_ssl_for(&cfg, &b, &train)?).save(&dir.join(SSL_HEAD_FILE))?;
            rotation_head_checkpoint(&train_rotation_for(&cfg, &b, &train)?).save(&dir.join(ROTATION_HEAD_FILE))?;
            println!("wrote {} and {}", SSL_HEAD_FILE, ROTATION_HEAD_FILE);
        }
        Command::Corrupt { kind, severity } => {
            let dir = out_dir(&cfg)?;
            let eval = load_eval(&cfg)?;
            let spec = CorruptionSpec::new(*kind, *severity, cell_seed(cfg.seed, *kind, *severity))?;
            let images = corrupt(&eval.images, &spec)?;
            let labels = Tensor::new([eval.len()], eval.labels.iter().map(|&l| l as f32).collect::<Vec<f32>>())?;
            let meta = serde_json::json!({ "corruption": spec, "num_classes": eval.num_classes }).to_string();
            let path = dir.join(format!("{}_s{severity}.cvpb", kind.name()));
            Checkpoint {
                meta,
                tensors: vec![("images".into(), images), ("labels".into(), labels)],
            }
            .save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Adapt { method, grid, adapt } => {
            grid.apply(&mut cfg);
            adapt.apply(&mut cfg);
            cfg.methods = vec![MethodEntry::new(*method)];
            cfg.baseline = method.to_string();
            print_summary(&run_experiment(&cfg)?);
        }
        Command::Sweep { grid, adapt } => {
            grid.apply(&mut cfg);
            adapt.apply(&mut cfg);
            print_summary(&run_experiment(&cfg)?);
        }
        Command::Reversal { adapt } => {
            adapt.apply(&mut cfg);
            cfg.validate()?;
            cfg.methods = vec![MethodEntry::new(Method::Cvp)];
            let dir = out_dir(&cfg)?;
            let models = prepare_models(&cfg, &dir)?;
            let study = ReversalConfig {
                adapt: cfg.adapt.clone(),
                ..Default::default()
            };
            let records = reversal_study(&models, &load_eval(&cfg)?.images, &study)?;
            write_jsonl(&dir.join("reversal.jsonl"), &records)?;
            write_csv(&dir.join("reversal.csv"), &records)?;
            println!("wrote {} reversal records", records.len());
        }
        Command::Report { layout, input, baseline } => {
            let dir = cfg.resolved_out_dir();
            let input = input.clone().unwrap_or_else(|| match layout {
                Layout::Fig5 => dir.join("reversal.jsonl"),
                _ => dir.join(format!("{RECORDS_STEM}.jsonl")),
            });
            let baseline = baseline.as_deref().unwrap_or(&cfg.baseline);
            for p in emit_report(*layout, &input, &dir, Some(baseline))? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}
