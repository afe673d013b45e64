use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::vivit::NUM_AUS;

use super::AU_NAMES;

/// A cited score shown for comparison; never recomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub value: f64,
}

/// Published validation-set macro F1 values: the challenge baseline and the
/// RegNetY + factorized ViViT ensemble this project reimplements.
pub const LITERATURE_ROWS: [(&str, f64); 2] =
    [("Challenge baseline", 0.39), ("RegNetY+ViViT ensemble (published)", 0.5398)];

impl ComparisonRow {
    pub fn literature() -> Vec<ComparisonRow> {
        LITERATURE_ROWS.iter().map(|&(l, v)| ComparisonRow { label: l.to_string(), value: v }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FoldOutcome {
    Scored(f64),
    Failed(String),
}

/// Per-fold held-out scores plus the ensemble's validation-set score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FoldReport {
    pub folds: Vec<(usize, FoldOutcome)>,
    pub val_score: Option<f64>,
    pub per_au_f1: Option<[f64; NUM_AUS]>,
}

impl FoldReport {
    pub fn scores(&self) -> Vec<f64> {
        self.folds
            .iter()
            .filter_map(|(_, o)| match o {
                FoldOutcome::Scored(s) => Some(*s),
                FoldOutcome::Failed(_) => None,
            })
            .collect()
    }

    /// `max − min` over scored folds.
    pub fn spread(&self) -> Option<f64> {
        let s = self.scores();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
        (!s.is_empty()).then_some(max - min)
    }

    /// Machine-readable `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "folds = {}", self.folds.len()).unwrap();
        for (id, o) in &self.folds {
            match o {
                FoldOutcome::Scored(s) => writeln!(out, "fold.{id}.f1 = {s}").unwrap(),
                FoldOutcome::Failed(e) => writeln!(out, "fold.{id}.failed = {}", e.replace('\n', " ")).unwrap(),
            }
        }
        if let Some(v) = self.val_score {
            writeln!(out, "val.f1 = {v}").unwrap();
        }
        if let Some(per) = &self.per_au_f1 {
            for (name, s) in AU_NAMES.iter().zip(per) {
                writeln!(out, "val.{name} = {s}").unwrap();
            }
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (row, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("<report>", row + 1, format!("expected key = value, got {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let num = |k: &str| -> Result<f64> {
            map.get(k)
                .ok_or_else(|| Error::config(format!("report is missing {k}")))?
                .parse::<f64>()
                .map_err(|e| Error::config(format!("{k}: {e}")))
        };
        let n = num("folds")? as usize;
        let mut report = FoldReport::default();
        for id in 1..=n {
            let outcome = match map.get(&format!("fold.{id}.failed")) {
                Some(e) => FoldOutcome::Failed(e.clone()),
                None => FoldOutcome::Scored(num(&format!("fold.{id}.f1"))?),
            };
            report.folds.push((id, outcome));
        }
        if map.contains_key("val.f1") {
            report.val_score = Some(num("val.f1")?);
        }
        if map.contains_key("val.AU1") {
            let mut per = [0.0; NUM_AUS];
            for (i, name) in AU_NAMES.iter().enumerate() {
                per[i] = num(&format!("val.{name}"))?;
            }
            report.per_au_f1 = Some(per);
        }
        Ok(report)
    }
}

/// Fixed-width table: one row per fold, then `Val Set`, then cited comparison rows.
pub fn render_report(report: &FoldReport, comparison: &[ComparisonRow]) -> String {
    let width = comparison.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    writeln!(out, "{:<width$} | F1 Score", "Fold").unwrap();
    writeln!(out, "{}-+-{}", "-".repeat(width), "-".repeat(8)).unwrap();
    for (id, o) in &report.folds {
        match o {
            FoldOutcome::Scored(s) => writeln!(out, "{id:<width$} | {s:.4}").unwrap(),
            FoldOutcome::Failed(e) => writeln!(out, "{id:<width$} | failed: {e}").unwrap(),
        }
    }
    if let Some(v) = report.val_score {
        writeln!(out, "{:<width$} | {v:.4}", "Val Set").unwrap();
    }
    if !comparison.is_empty() {
        writeln!(out, "{}-+-{}", "-".repeat(width), "-".repeat(8)).unwrap();
        writeln!(out, "literature values (cited, not recomputed):").unwrap();
        for r in comparison {
            writeln!(out, "{:<width$} | {}", r.label, r.value).unwrap();
        }
    }
    out
}
