//! Summary tables and plot data from evaluation records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cvpb_core::metrics::{aggregate, EvalRecord, Summary};
use cvpb_core::{Error, Result};

use crate::data::io_err;
use crate::records::read_jsonl;
use crate::studies::ReversalRecord;

pub const MISSING: &str = "—";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Accuracy per corruption kind and method, with average rows.
    Table1,
    /// Error of each weight method with and without CVP.
    Table4,
    /// Accuracy and loss against batch size and iterations.
    Fig4,
    /// Reversal residual against prompt rank.
    Fig5,
}

impl Layout {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Table1 => "table1",
            Self::Table4 => "table4",
            Self::Fig4 => "fig4",
            Self::Fig5 => "fig5",
        }
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "table1" => Self::Table1,
            "table4" => Self::Table4,
            "fig4" => Self::Fig4,
            "fig5" => Self::Fig5,
            other => return Err(Error::InvalidArgument(format!("unknown layout '{other}'"))),
        })
    }
}

/// Rendered report: aligned markdown plus CSV, and completeness warnings.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub markdown: String,
    pub csv: String,
    pub warnings: Vec<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |v| format!("{v:.2}"))
}

/// Pads every column to its widest cell.
fn markdown_table(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count(), 3])
                .max()
                .unwrap_or(3)
        })
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::from("|");
        for (c, w) in cells.iter().zip(&widths) {
            let pad = w - c.chars().count();
            let _ = write!(s, " {c}{} |", " ".repeat(pad));
        }
        s.push('\n');
        s
    };
    let mut out = line(header);
    out.push('|');
    for w in &widths {
        let _ = write!(out, "{}|", "-".repeat(w + 2));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn to_csv(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.iter().map(|c| if c == MISSING { "" } else { c.as_str() }))
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 cells"))
}

fn completeness(s: &Summary) -> Vec<String> {
    s.methods
        .iter()
        .filter_map(|m| {
            let o = s.method(m)?;
            (!o.complete()).then(|| format!("{m} covers {} of {} cells", o.cells_present, o.cells_expected))
        })
        .collect()
}

fn finish(markdown: String, header: &[String], rows: &[Vec<String>], warnings: Vec<String>) -> Result<Report> {
    let mut md = markdown;
    for w in &warnings {
        let _ = writeln!(md, "\n> incomplete: {w}");
    }
    Ok(Report {
        markdown: md,
        csv: to_csv(header, rows)?,
        warnings,
    })
}

/// Per-kind accuracy (percent) for every method, then Avg. Acc., Avg. Error
/// and Avg Diff. rows against `baseline`.
pub fn table1(records: &[EvalRecord], baseline: Option<&str>) -> Result<Report> {
    let s = aggregate(records, baseline)?;
    let mut header = vec!["Corruption".to_string()];
    header.extend(s.methods.iter().cloned());
    let mut rows: Vec<Vec<String>> = s
        .kinds
        .iter()
        .map(|k| {
            std::iter::once(k.clone())
                .chain(s.methods.iter().map(|m| fmt_opt(s.kind(m, k))))
                .collect()
        })
        .collect();
    let summary_row = |label: &str, f: &dyn Fn(&str) -> Option<f64>| -> Vec<String> {
        std::iter::once(label.to_string())
            .chain(s.methods.iter().map(|m| fmt_opt(f(m))))
            .collect()
    };
    rows.push(summary_row("Avg. Acc.", &|m| s.method(m).map(|o| o.avg_acc)));
    rows.push(summary_row("Avg. Error", &|m| s.method(m).map(|o| o.avg_error)));
    if s.baseline.is_some() {
        rows.push(summary_row("Avg Diff.", &|m| s.method(m).and_then(|o| o.diff)));
    }
    let md = markdown_table(&header, &rows);
    finish(md, &header, &rows, completeness(&s))
}

/// For every method `m` with a matching `m+cvp` record set (and `standard`
/// paired with `cvp`), average error without and with the prompt.
pub fn table4(records: &[EvalRecord]) -> Result<Report> {
    let s = aggregate(records, None)?;
    let header: Vec<String> = ["Method", "w/o CVP", "w/ CVP", "Change"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for m in &s.methods {
        if m.ends_with("+cvp") || m == "cvp" {
            continue;
        }
        let with = if m == "standard" { "cvp".to_string() } else { format!("{m}+cvp") };
        if !s.methods.contains(&with) {
            continue;
        }
        let a = s.method(m).map(|o| o.avg_error);
        let b = s.method(&with).map(|o| o.avg_error);
        let change = a.zip(b).map(|(a, b)| b - a);
        rows.push(vec![m.clone(), fmt_opt(a), fmt_opt(b), fmt_opt(change)]);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no method has a matching '+cvp' record set".into()));
    }
    let md = markdown_table(&header, &rows);
    finish(md, &header, &rows, completeness(&s))
}

/// Image-weighted accuracy and mean losses per (series, batch size, iterations).
pub fn fig4(records: &[EvalRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to report".into()));
    }
    #[derive(Default)]
    struct Acc {
        correct: f64,
        images: usize,
        loss0: (f64, usize),
        loss_final: (f64, usize),
    }
    let mut groups: BTreeMap<(String, usize, usize), Acc> = BTreeMap::new();
    for r in records.iter().filter(|r| r.failure.is_none()) {
        let g = groups.entry((r.method.clone(), r.batch_size, r.iters)).or_default();
        g.correct += r.accuracy * r.n_images as f64;
        g.images += r.n_images;
        if let (Some(a), Some(b)) = (r.loss0, r.loss_final) {
            g.loss0 = (g.loss0.0 + a, g.loss0.1 + 1);
            g.loss_final = (g.loss_final.0 + b, g.loss_final.1 + 1);
        }
    }
    let header: Vec<String> = ["series", "batch_size", "iters", "accuracy", "loss0", "loss_final"]
        .map(String::from)
        .to_vec();
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    let rows: Vec<Vec<String>> = groups
        .into_iter()
        .map(|((m, bs, it), g)| {
            vec![
                m,
                bs.to_string(),
                it.to_string(),
                fmt_opt((g.images > 0).then(|| 100.0 * g.correct / g.images as f64)),
                mean(g.loss0).map_or_else(|| MISSING.into(), |v| format!("{v:.4}")),
                mean(g.loss_final).map_or_else(|| MISSING.into(), |v| format!("{v:.4}")),
            ]
        })
        .collect();
    let md = markdown_table(&header, &rows);
    finish(md, &header, &rows, Vec::new())
}

/// Mean and standard deviation of the residual per (family, prompt, rank).
pub fn fig5(records: &[ReversalRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no reversal records to report".into()));
    }
    let mut groups: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.family.clone(), r.prompt.clone(), r.rank))
            .or_default()
            .push(r.residual);
    }
    let header: Vec<String> = ["family", "prompt", "rank", "residual_mean", "residual_std", "n"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = groups
        .into_iter()
        .map(|((f, p, rank), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            vec![
                f,
                p,
                rank.to_string(),
                format!("{mean:.6}"),
                format!("{std:.6}"),
                v.len().to_string(),
            ]
        })
        .collect();
    let md = markdown_table(&header, &rows);
    finish(md, &header, &rows, Vec::new())
}

/// Reads records from `input` (JSON lines) and writes `<layout>.md` and
/// `<layout>.csv` into `out_dir`. Nothing is written when rendering fails.
pub fn emit_report(layout: Layout, input: &Path, out_dir: &Path, baseline: Option<&str>) -> Result<Vec<PathBuf>> {
    let report = match layout {
        Layout::Fig5 => fig5(&read_jsonl::<ReversalRecord>(input)?)?,
        other => {
            let records: Vec<EvalRecord> = read_jsonl(input)?;
            match other {
                Layout::Table1 => {
                    let b = baseline.filter(|b| records.iter().any(|r| r.method == *b));
                    table1(&records, b)?
                }
                Layout::Table4 => table4(&records)?,
                _ => fig4(&records)?,
            }
        }
    };
    for w in &report.warnings {
        log::warn!("{}: {w}", layout.name());
    }
    write_report(&report, out_dir, layout.name())
}

pub fn write_report(report: &Report, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let md = out_dir.join(format!("{stem}.md"));
    let csv = out_dir.join(format!("{stem}.csv"));
    fs::write(&md, &report.markdown).map_err(|e| io_err(&md, e))?;
    fs::write(&csv, &report.csv).map_err(|e| io_err(&csv, e))?;
    Ok(vec![md, csv])
}
