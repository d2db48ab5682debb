//! Error rates, corruption error, distribution distances and result tables.

mod aggregate;
mod distance;

use std::collections::BTreeMap;

pub use aggregate::{aggregate, EvalRecord, MethodSummary, Summary};
pub use distance::{projection_directions, reversal_residual, ssim, swd, swd_per_projection, SwdStats};

use crate::error::{Error, Result};

/// Fraction of mispredicted rows.
pub fn error_rate(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "need aligned nonempty inputs, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / labels.len() as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(1.0 - error_rate(predictions, labels)?)
}

/// Error rate per (corruption kind, severity) for one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorTable {
    pub model: String,
    pub errors: BTreeMap<(String, u8), f64>,
}

impl ErrorTable {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            errors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, kind: impl Into<String>, severity: u8, error: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&error) {
            return Err(Error::InvalidArgument(format!("error rate {error} outside [0, 1]")));
        }
        self.errors.insert((kind.into(), severity), error);
        Ok(())
    }
}

/// Mean corruption error: `100 · mean_kind(Σ_s E_model / Σ_s E_ref)`.
pub fn mce(model: &ErrorTable, reference: &ErrorTable) -> Result<f64> {
    if model.errors.is_empty() || model.errors.keys().ne(reference.errors.keys()) {
        return Err(Error::InvalidArgument(format!(
            "grids of '{}' and '{}' do not align",
            model.model, reference.model
        )));
    }
    let mut sums: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for ((kind, sev), &e) in &model.errors {
        let r = reference.errors[&(kind.clone(), *sev)];
        let entry = sums.entry(kind.as_str()).or_default();
        entry.0 += e;
        entry.1 += r;
    }
    let mut total = 0.0;
    for (kind, (m, r)) in &sums {
        if *r == 0.0 {
            return Err(Error::InvalidArgument(format!("reference error is zero for '{kind}'")));
        }
        total += m / r;
    }
    Ok(100.0 * total / sums.len() as f64)
}

#[cfg(test)]
mod tests;
