//! Model preparation and the corruption × method sweep.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use cvpb_core::adapters::{run_method, AdaptConfig, AdaptOutcome, Heads, Method};
use cvpb_core::corruption::{corrupt, mix, CorruptionKind, CorruptionSpec};
use cvpb_core::dataset::Dataset;
use cvpb_core::metrics::{aggregate, EvalRecord, Summary};
use cvpb_core::models::{train_backbone, train_rotation_head, train_ssl_head, Backbone, RotationHead, SslHead, SslTask};
use cvpb_core::{Error, Result};

use crate::checkpoint::{
    backbone_checkpoint, backbone_from_checkpoint, rotation_head_checkpoint, rotation_head_from_checkpoint, ssl_head_checkpoint,
    ssl_head_from_checkpoint, Checkpoint,
};
use crate::config::{DataSource, ExperimentConfig, MethodEntry};
use crate::data::{io_err, load_cifar10, synth_shapes, CifarSplit, ShapesParams};
use crate::records::write_records;

pub const BACKBONE_FILE: &str = "backbone.cvpb";
pub const SSL_HEAD_FILE: &str = "ssl_head.cvpb";
pub const ROTATION_HEAD_FILE: &str = "rotation_head.cvpb";
pub const CONFIG_FILE: &str = "config.toml";
pub const RECORDS_STEM: &str = "records";

/// Training split of the configured source.
pub fn load_train(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Cifar10 { path } => load_cifar10(path, CifarSplit::Train),
        DataSource::Shapes { params } => synth_shapes(params, mix(cfg.seed ^ 0x7a1)),
    }
}

/// The first `grid.eval_count` images of the held-out split.
pub fn load_eval(cfg: &ExperimentConfig) -> Result<Dataset> {
    let n = cfg.grid.eval_count;
    match &cfg.data {
        DataSource::Cifar10 { path } => {
            let d = load_cifar10(path, CifarSplit::Test)?;
            d.slice(0, n.min(d.len()))
        }
        DataSource::Shapes { params } => {
            let p = ShapesParams {
                count: n,
                ..params.clone()
            };
            synth_shapes(&p, mix(cfg.seed ^ 0xe7a1))
        }
    }
}

/// Frozen models used at test time.
#[derive(Clone, Debug)]
pub struct Models {
    pub backbone: Backbone,
    pub ssl_head: Option<SslHead>,
    pub rotation_head: Option<RotationHead>,
}

impl Models {
    pub fn heads(&self) -> Heads<'_> {
        Heads {
            ssl: self.ssl_head.as_ref(),
            rotation: self.rotation_head.as_ref(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        backbone_checkpoint(&self.backbone)?.save(&dir.join(BACKBONE_FILE))?;
        if let Some(h) = &self.ssl_head {
            ssl_head_checkpoint(h).save(&dir.join(SSL_HEAD_FILE))?;
        }
        if let Some(h) = &self.rotation_head {
            rotation_head_checkpoint(h).save(&dir.join(ROTATION_HEAD_FILE))?;
        }
        Ok(())
    }
}

fn tasks_needed(cfg: &ExperimentConfig) -> (bool, bool) {
    let tasks: Vec<SslTask> = cfg.methods.iter().map(|m| cfg.adapt_for(m).ssl_task).collect();
    let prompts = cfg
        .methods
        .iter()
        .any(|m| m.method.is_prompt() || matches!(m.method, Method::Finetune | Method::PartialFinetune));
    (
        prompts && tasks.contains(&SslTask::Contrastive),
        prompts && tasks.contains(&SslTask::Rotation),
    )
}

pub fn train_backbone_for(cfg: &ExperimentConfig, train: &Dataset) -> Result<Backbone> {
    let mut bc = cfg.model.backbone.clone();
    bc.num_classes = train.num_classes;
    bc.in_channels = train.image_shape()[0];
    Ok(train_backbone(bc, train, None, &cfg.model.train)?.backbone)
}

pub fn train_ssl_for(cfg: &ExperimentConfig, backbone: &Backbone, train: &Dataset) -> Result<SslHead> {
    Ok(train_ssl_head(backbone, &train.images, &cfg.ssl.contrastive, &cfg.ssl.train)?.head)
}

pub fn train_rotation_for(cfg: &ExperimentConfig, backbone: &Backbone, train: &Dataset) -> Result<RotationHead> {
    Ok(train_rotation_head(backbone, &train.images, &cfg.ssl.train)?.head)
}

/// Loads checkpoints from `dir` when present, otherwise trains and saves them.
pub fn prepare_models(cfg: &ExperimentConfig, dir: &Path) -> Result<Models> {
    let (need_ssl, need_rot) = tasks_needed(cfg);
    let mut train: Option<Dataset> = None;
    let mut train_data = || -> Result<Dataset> {
        if train.is_none() {
            train = Some(load_train(cfg)?);
        }
        Ok(train.clone().expect("just loaded"))
    };
    let bpath = dir.join(BACKBONE_FILE);
    let backbone = if bpath.exists() {
        backbone_from_checkpoint(Checkpoint::load(&bpath)?)?
    } else {
        log::info!("training backbone");
        let b = train_backbone_for(cfg, &train_data()?)?;
        backbone_checkpoint(&b)?.save(&bpath)?;
        b
    };
    let spath = dir.join(SSL_HEAD_FILE);
    let ssl_head = if spath.exists() {
        Some(ssl_head_from_checkpoint(Checkpoint::load(&spath)?)?)
    } else if need_ssl {
        log::info!("training contrastive head");
        let h = train_ssl_for(cfg, &backbone, &train_data()?)?;
        ssl_head_checkpoint(&h).save(&spath)?;
        Some(h)
    } else {
        None
    };
    let rpath = dir.join(ROTATION_HEAD_FILE);
    let rotation_head = if rpath.exists() {
        Some(rotation_head_from_checkpoint(Checkpoint::load(&rpath)?)?)
    } else if need_rot {
        log::info!("training rotation head");
        let h = train_rotation_for(cfg, &backbone, &train_data()?)?;
        rotation_head_checkpoint(&h).save(&rpath)?;
        Some(h)
    } else {
        None
    };
    Ok(Models {
        backbone,
        ssl_head,
        rotation_head,
    })
}

/// Seed of the corruption applied to one (kind, severity) cell; shared by
/// every method so that methods are compared on identical images.
pub fn cell_seed(seed: u64, kind: CorruptionKind, severity: u8) -> u64 {
    mix(mix(mix(seed) ^ kind.tag()) ^ severity as u64)
}

pub fn batch_seed(seed: u64, kind: CorruptionKind, severity: u8, batch: usize) -> u64 {
    mix(cell_seed(seed, kind, severity) ^ (batch as u64).wrapping_mul(0x9e37_79b9))
}

/// Start and end of every batch; a trailing single image joins the previous batch.
pub fn batch_bounds(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut v: Vec<(usize, usize)> = (0..n).step_by(batch_size.max(1)).map(|s| (s, (s + batch_size).min(n))).collect();
    if v.len() > 1 && v.last().is_some_and(|&(s, e)| e - s == 1) {
        let (_, e) = v.pop().expect("non-empty");
        v.last_mut().expect("non-empty").1 = e;
    }
    v
}

fn iterations(method: Method, a: &AdaptConfig) -> usize {
    match method {
        Method::Standard | Method::Bn => 0,
        Method::Finetune | Method::PartialFinetune => a.finetune.steps,
        Method::Tent => a.tent.steps,
        Method::Memo => a.memo.weights.steps,
        _ => a.iters,
    }
}

#[allow(clippy::too_many_arguments)]
fn record_of(
    label: &str,
    method: Method,
    kind: CorruptionKind,
    severity: u8,
    batch: usize,
    a: &AdaptConfig,
    labels: &[usize],
    out: &AdaptOutcome,
) -> EvalRecord {
    let correct = out.predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut r = EvalRecord::new(label, kind.name(), severity, correct as f64 / labels.len() as f64, labels.len());
    r.batch_index = batch;
    r.seed = a.seed;
    r.batch_size = a.batch_size;
    r.iters = iterations(method, a);
    r.fallback = out.fallback;
    r.wall_ms = out.wall_ms;
    if let Some(&l0) = out.loss_trace.first() {
        r.loss0 = Some(l0 as f64);
        r.loss_final = Some(out.final_loss as f64);
    }
    r
}

struct Cell<'a> {
    entry: &'a MethodEntry,
    kind: CorruptionKind,
    severity: u8,
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell<'_>, models: &Models, workspace: &mut Backbone, eval: &Dataset) -> Vec<EvalRecord> {
    let label = cell.entry.label();
    let base = cfg.adapt_for(cell.entry);
    let fail = |batch: usize, e: &Error| {
        log::error!("{label} {} s{} batch {batch}: {e}", cell.kind.name(), cell.severity);
        let mut r = EvalRecord::new(&label, cell.kind.name(), cell.severity, 0.0, 0);
        r.batch_index = batch;
        r.failure = Some(e.to_string());
        r
    };
    let spec = CorruptionSpec {
        kind: cell.kind,
        severity: cell.severity,
        seed: cell_seed(cfg.seed, cell.kind, cell.severity),
    };
    let x = match corrupt(&eval.images, &spec) {
        Ok(x) => x,
        Err(e) => return vec![fail(0, &e)],
    };
    let mut out = Vec::new();
    for (b, (start, end)) in batch_bounds(eval.len(), base.batch_size).into_iter().enumerate() {
        let a = AdaptConfig {
            seed: batch_seed(cfg.seed, cell.kind, cell.severity, b),
            ..base.clone()
        };
        let labels = &eval.labels[start..end];
        let result = x
            .slice_outer(start, end)
            .and_then(|xb| run_method(cell.entry.method, &xb, Some(labels), workspace, models.heads(), &a));
        match result {
            Ok(o) => out.push(record_of(&label, cell.entry.method, cell.kind, cell.severity, b, &a, labels, &o)),
            Err(e) => {
                out.push(fail(b, &e));
                break;
            }
        }
    }
    out
}

/// Evaluates every (method, kind, severity) cell, fanning cells out to
/// `cfg.workers` threads. Records come back in cell order regardless of
/// scheduling.
pub fn run_sweep(cfg: &ExperimentConfig, models: &Models, eval: &Dataset) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for entry in &cfg.methods {
        for &kind in &cfg.grid.kinds {
            for &severity in &cfg.grid.severities {
                cells.push(Cell { entry, kind, severity });
            }
        }
    }
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<(usize, Vec<EvalRecord>)>> = Mutex::new(Vec::with_capacity(cells.len()));
    let workers = cfg.workers.min(cells.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| {
                let mut workspace = models.backbone.clone();
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(cell) = cells.get(i) else { break };
                    let t = Instant::now();
                    let recs = run_cell(cfg, cell, models, &mut workspace, eval);
                    log::info!(
                        "{} {} s{}: {:.1}s",
                        cell.entry.label(),
                        cell.kind.name(),
                        cell.severity,
                        t.elapsed().as_secs_f64()
                    );
                    done.lock().expect("no worker panicked").push((i, recs));
                }
            });
        }
    });
    let mut done = done.into_inner().expect("no worker panicked");
    done.sort_by_key(|(i, _)| *i);
    let records: Vec<EvalRecord> = done.into_iter().flat_map(|(_, r)| r).collect();
    Ok(records)
}

pub fn summarize(cfg: &ExperimentConfig, records: &[EvalRecord]) -> Result<Summary> {
    let baseline = cfg
        .methods
        .iter()
        .any(|m| m.label() == cfg.baseline)
        .then_some(cfg.baseline.as_str());
    aggregate(records, baseline)
}

pub struct ExperimentOutput {
    pub records: Vec<EvalRecord>,
    pub summary: Summary,
}

/// Full pipeline: persist the config, prepare models, sweep, write records.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let dir = cfg.resolved_out_dir();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    let models = prepare_models(cfg, &dir)?;
    let eval = load_eval(cfg)?;
    let records = run_sweep(cfg, &models, &eval)?;
    write_records(&dir, RECORDS_STEM, &records)?;
    let summary = summarize(cfg, &records)?;
    Ok(ExperimentOutput { records, summary })
}
