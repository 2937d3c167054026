//! Sweep records, their aggregates, and the text forms they are written in.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One train + evaluate run.
///
/// `wall_seconds` is not serialized and does not take part in equality, so
/// repeated runs produce identical reports; timings go to a separate file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub d_prompts: usize,
    pub n_ctx: usize,
    pub shots: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub final_loss: f64,
    pub epochs: usize,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl PartialEq for RunRecord {
    fn eq(&self, other: &Self) -> bool {
        self.dataset == other.dataset
            && self.d_prompts == other.d_prompts
            && self.n_ctx == other.n_ctx
            && self.shots == other.shots
            && self.seed == other.seed
            && self.accuracy.to_bits() == other.accuracy.to_bits()
            && self.final_loss.to_bits() == other.final_loss.to_bits()
            && self.epochs == other.epochs
    }
}

/// Mean accuracy over seeds for one (dataset, D, N, shots) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMean {
    pub dataset: String,
    pub d_prompts: usize,
    pub n_ctx: usize,
    pub shots: usize,
    pub mean_accuracy: f64,
}

/// Per-shot values for one `(D, N)` configuration, averaged over datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRow {
    pub d_prompts: usize,
    pub n_ctx: usize,
    /// `(shots, value)` in ascending shot order.
    pub values: Vec<(usize, f64)>,
}

impl ConfigRow {
    pub fn value(&self, shots: usize) -> Option<f64> {
        self.values.iter().find(|(s, _)| *s == shots).map(|&(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub budget: usize,
    pub seeds: Vec<u64>,
    pub records: Vec<RunRecord>,
    pub cells: Vec<CellMean>,
    /// Mean over datasets of the per-cell means.
    pub rows: Vec<ConfigRow>,
    /// Each non-CoOp row minus the `(1, M)` row; empty without a CoOp row.
    pub gains: Vec<ConfigRow>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn first_seen<K: PartialEq + Clone>(items: impl IntoIterator<Item = K>) -> Vec<K> {
    let mut out: Vec<K> = Vec::new();
    for k in items {
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

impl RunReport {
    /// Builds the aggregates. Every cell must contain exactly one record per
    /// declared seed.
    pub fn from_records(budget: usize, seeds: Vec<u64>, records: Vec<RunRecord>) -> Result<Self> {
        if records.is_empty() || seeds.is_empty() {
            return Err(Error::Protocol("a report needs records and seeds".into()));
        }
        let declared: BTreeSet<u64> = seeds.iter().copied().collect();
        let keys = first_seen(
            records
                .iter()
                .map(|r| (r.dataset.clone(), r.d_prompts, r.n_ctx, r.shots)),
        );
        let mut cells = Vec::with_capacity(keys.len());
        for (dataset, d, n, shots) in keys {
            let members: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.dataset == dataset && r.d_prompts == d && r.n_ctx == n && r.shots == shots)
                .collect();
            let found: Vec<u64> = members.iter().map(|r| r.seed).collect();
            let found_set: BTreeSet<u64> = found.iter().copied().collect();
            if found_set != declared || found.len() != declared.len() {
                return Err(Error::Protocol(format!(
                    "cell {dataset} D={d} N={n} S={shots} has seeds {found:?}, declared {seeds:?}"
                )));
            }
            cells.push(CellMean {
                dataset,
                d_prompts: d,
                n_ctx: n,
                shots,
                mean_accuracy: mean(members.iter().map(|r| r.accuracy)),
            });
        }

        let configs = first_seen(cells.iter().map(|c| (c.d_prompts, c.n_ctx)));
        let mut shot_list: Vec<usize> = first_seen(cells.iter().map(|c| c.shots));
        shot_list.sort_unstable();
        let rows: Vec<ConfigRow> = configs
            .iter()
            .map(|&(d, n)| ConfigRow {
                d_prompts: d,
                n_ctx: n,
                values: shot_list
                    .iter()
                    .filter_map(|&s| {
                        let members: Vec<f64> = cells
                            .iter()
                            .filter(|c| c.d_prompts == d && c.n_ctx == n && c.shots == s)
                            .map(|c| c.mean_accuracy)
                            .collect();
                        (!members.is_empty()).then(|| (s, mean(members)))
                    })
                    .collect(),
            })
            .collect();

        let gains = match rows.iter().find(|r| r.d_prompts == 1 && r.n_ctx == budget) {
            Some(coop) => rows
                .iter()
                .filter(|r| !(r.d_prompts == 1 && r.n_ctx == budget))
                .map(|r| ConfigRow {
                    d_prompts: r.d_prompts,
                    n_ctx: r.n_ctx,
                    values: r
                        .values
                        .iter()
                        .filter_map(|&(s, v)| coop.value(s).map(|c| (s, v - c)))
                        .collect(),
                })
                .collect(),
            None => Vec::new(),
        };

        Ok(Self {
            budget,
            seeds,
            records,
            cells,
            rows,
            gains,
        })
    }

    pub fn row(&self, d_prompts: usize, n_ctx: usize) -> Option<&ConfigRow> {
        self.rows.iter().find(|r| r.d_prompts == d_prompts && r.n_ctx == n_ctx)
    }

    pub fn gain(&self, d_prompts: usize, n_ctx: usize) -> Option<&ConfigRow> {
        self.gains.iter().find(|r| r.d_prompts == d_prompts && r.n_ctx == n_ctx)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Schema(format!("report serialization: {e}")))
    }

    /// Parses a report and checks that its aggregates match its records.
    pub fn from_json(text: &str) -> Result<Self> {
        let parsed: Self =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("malformed report: {e}")))?;
        let rebuilt = Self::from_records(parsed.budget, parsed.seeds.clone(), parsed.records.clone())?;
        if rebuilt != parsed {
            return Err(Error::Schema("report aggregates do not match its records".into()));
        }
        Ok(parsed)
    }

    /// Accuracy table in percent, one row per configuration, each non-CoOp
    /// row followed by its gain over CoOp.
    pub fn to_table(&self) -> String {
        let shots: Vec<usize> = self
            .rows
            .first()
            .map(|r| r.values.iter().map(|&(s, _)| s).collect())
            .unwrap_or_default();
        let label_width = 20;
        let mut out = String::new();
        let _ = write!(out, "{:<label_width$}", "Method");
        for s in &shots {
            let head = if *s == 1 { "1 shot".to_string() } else { format!("{s} shots") };
            let _ = write!(out, " {head:>9}");
        }
        out.push('\n');
        for row in &self.rows {
            let coop = row.d_prompts == 1 && row.n_ctx == self.budget;
            let name = format!(
                "{} (D={}, N={})",
                if coop { "CoOp" } else { "ECO" },
                row.d_prompts,
                row.n_ctx
            );
            let _ = write!(out, "{name:<label_width$}");
            for s in &shots {
                match row.value(*s) {
                    Some(v) => {
                        let _ = write!(out, " {:>9.2}", v * 100.0);
                    }
                    None => {
                        let _ = write!(out, " {:>9}", "-");
                    }
                }
            }
            out.push('\n');
            if let Some(g) = self.gain(row.d_prompts, row.n_ctx) {
                let _ = write!(out, "{:<label_width$}", "  gain vs CoOp");
                for s in &shots {
                    match g.value(*s) {
                        Some(v) => {
                            let _ = write!(out, " {:>9}", format!("{:+.2}", v * 100.0));
                        }
                        None => {
                            let _ = write!(out, " {:>9}", "-");
                        }
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    /// `(shots, accuracy)` series per configuration, for plotting.
    pub fn to_series_csv(&self) -> String {
        let mut out = String::from("d_prompts,n_ctx,shots,accuracy\n");
        for row in &self.rows {
            for &(s, v) in &row.values {
                let _ = writeln!(out, "{},{},{s},{v}", row.d_prompts, row.n_ctx);
            }
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("dataset,d_prompts,n_ctx,shots,seed,wall_seconds\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                r.dataset, r.d_prompts, r.n_ctx, r.shots, r.seed, r.wall_seconds
            );
        }
        out
    }
}
