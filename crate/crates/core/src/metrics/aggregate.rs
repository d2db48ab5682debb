use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of one adapted (or unadapted) evaluation batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub kind: String,
    pub severity: u8,
    pub batch_index: usize,
    pub n_images: usize,
    /// Fraction correct in `[0, 1]`.
    pub accuracy: f64,
    pub loss0: Option<f64>,
    pub loss_final: Option<f64>,
    pub fallback: bool,
    pub wall_ms: f64,
    pub seed: u64,
    #[serde(default)]
    pub batch_size: usize,
    /// Adaptation iterations; 0 for methods without any.
    #[serde(default)]
    pub iters: usize,
    /// Set when the batch could not be evaluated; `accuracy` is then meaningless.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl EvalRecord {
    pub fn new(method: impl Into<String>, kind: impl Into<String>, severity: u8, accuracy: f64, n_images: usize) -> Self {
        Self {
            method: method.into(),
            kind: kind.into(),
            severity,
            batch_index: 0,
            n_images,
            accuracy,
            loss0: None,
            loss_final: None,
            fallback: false,
            wall_ms: 0.0,
            seed: 0,
            batch_size: n_images,
            iters: 0,
            failure: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    /// Mean accuracy over present cells, percent.
    pub avg_acc: f64,
    pub avg_error: f64,
    /// `avg_error − baseline avg_error`; negative is better.
    pub diff: Option<f64>,
    pub cells_present: usize,
    pub cells_expected: usize,
}

impl MethodSummary {
    pub fn complete(&self) -> bool {
        self.cells_present == self.cells_expected
    }
}

/// Accuracy tables in percent. Orders follow first appearance in the records.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub methods: Vec<String>,
    pub kinds: Vec<String>,
    pub severities: Vec<u8>,
    pub baseline: Option<String>,
    /// Image-weighted accuracy per (method, kind, severity).
    pub cells: BTreeMap<(String, String, u8), f64>,
    /// Mean over present severities.
    pub per_kind: BTreeMap<(String, String), f64>,
    /// Mean over present kinds.
    pub per_severity: BTreeMap<(String, u8), f64>,
    pub overall: BTreeMap<String, MethodSummary>,
}

impl Summary {
    pub fn cell(&self, method: &str, kind: &str, severity: u8) -> Option<f64> {
        self.cells.get(&(method.to_string(), kind.to_string(), severity)).copied()
    }

    pub fn kind(&self, method: &str, kind: &str) -> Option<f64> {
        self.per_kind.get(&(method.to_string(), kind.to_string())).copied()
    }

    pub fn severity(&self, method: &str, severity: u8) -> Option<f64> {
        self.per_severity.get(&(method.to_string(), severity)).copied()
    }

    pub fn method(&self, method: &str) -> Option<&MethodSummary> {
        self.overall.get(method)
    }

    pub fn is_complete(&self) -> bool {
        self.overall.values().all(MethodSummary::complete)
    }
}

fn push_unique<T: PartialEq + Clone>(v: &mut Vec<T>, x: &T) {
    if !v.contains(x) {
        v.push(x.clone());
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Builds per-cell, per-kind, per-severity and overall tables. Failed records
/// leave their cell missing. The overall average weights every present cell
/// equally; `baseline` names the method the diff column is taken against.
pub fn aggregate(records: &[EvalRecord], baseline: Option<&str>) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to aggregate".into()));
    }
    let (mut methods, mut kinds, mut severities) = (Vec::new(), Vec::new(), Vec::new());
    let mut acc: BTreeMap<(String, String, u8), (f64, usize)> = BTreeMap::new();
    for r in records {
        push_unique(&mut methods, &r.method);
        push_unique(&mut kinds, &r.kind);
        push_unique(&mut severities, &r.severity);
        if r.failure.is_some() {
            continue;
        }
        if !(0.0..=1.0).contains(&r.accuracy) {
            return Err(Error::InvalidArgument(format!("accuracy {} outside [0, 1]", r.accuracy)));
        }
        let w = r.n_images.max(1);
        let e = acc.entry((r.method.clone(), r.kind.clone(), r.severity)).or_default();
        e.0 += r.accuracy * w as f64;
        e.1 += w;
    }
    if let Some(b) = baseline {
        if !methods.iter().any(|m| m == b) {
            return Err(Error::InvalidArgument(format!("baseline '{b}' has no records")));
        }
    }
    let cells: BTreeMap<_, _> = acc.into_iter().map(|(k, (s, n))| (k, 100.0 * s / n as f64)).collect();
    let get = |m: &String, k: &String, s: u8| cells.get(&(m.clone(), k.clone(), s)).copied();

    let mut per_kind = BTreeMap::new();
    let mut per_severity = BTreeMap::new();
    let mut overall = BTreeMap::new();
    for m in &methods {
        for k in &kinds {
            if let Some(v) = mean(severities.iter().filter_map(|&s| get(m, k, s))) {
                per_kind.insert((m.clone(), k.clone()), v);
            }
        }
        for &s in &severities {
            if let Some(v) = mean(kinds.iter().filter_map(|k| get(m, k, s))) {
                per_severity.insert((m.clone(), s), v);
            }
        }
        let present: Vec<f64> = kinds
            .iter()
            .flat_map(|k| severities.iter().filter_map(move |&s| get(m, k, s)))
            .collect();
        let cells_expected = kinds.len() * severities.len();
        if present.len() < cells_expected {
            log::warn!("method '{m}' covers {} of {cells_expected} cells", present.len());
        }
        let avg_acc = mean(present.iter().copied()).unwrap_or(f64::NAN);
        overall.insert(
            m.clone(),
            MethodSummary {
                avg_acc,
                avg_error: 100.0 - avg_acc,
                diff: None,
                cells_present: present.len(),
                cells_expected,
            },
        );
    }
    if let Some(b) = baseline {
        let base = overall[b].avg_error;
        for (m, s) in overall.iter_mut() {
            if m != b {
                s.diff = Some(s.avg_error - base);
            }
        }
    }
    Ok(Summary {
        methods,
        kinds,
        severities,
        baseline: baseline.map(str::to_string),
        cells,
        per_kind,
        per_severity,
        overall,
    })
}
