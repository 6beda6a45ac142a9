//! Run reports: one CSV row per trial (or sweep value) plus an aggregate
//! row, and a JSON mirror.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Key of the aggregate CSV row.
pub const AGGREGATE_KEY: &str = "aggregate";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    /// Trial index, or the swept value.
    pub key: String,
    pub seed: u64,
    pub label: Option<usize>,
    pub recovered_label: Option<usize>,
    pub status: String,
    pub iterations: usize,
    pub mse: f64,
    pub ssim: f64,
    /// Absent when the reconstruction is pixel-identical.
    pub psnr: Option<f64>,
    /// Final gradient-matching loss, optimization attacks only.
    pub gradient_loss: Option<f64>,
    pub rank: Option<usize>,
    pub condition: Option<f64>,
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: v.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mse: Stat,
    pub ssim: Stat,
    pub psnr: Option<Stat>,
    pub gradient_loss: Option<Stat>,
}

impl Aggregates {
    pub fn from_rows(rows: &[TrialRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(HarnessError::EmptyReport);
        }
        Ok(Self {
            mse: Stat::of(rows.iter().map(|r| r.mse)).expect("non-empty"),
            ssim: Stat::of(rows.iter().map(|r| r.ssim)).expect("non-empty"),
            psnr: Stat::of(rows.iter().filter_map(|r| r.psnr)),
            gradient_loss: Stat::of(rows.iter().filter_map(|r| r.gradient_loss)),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub engine_version: String,
    /// Normalized spec text.
    pub spec: String,
    pub rows: Vec<TrialRow>,
    pub aggregates: Aggregates,
    /// Written to a separate timing file so reports compare byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Serialize, Deserialize)]
struct CsvRecord {
    row: String,
    seed: Option<u64>,
    label: Option<usize>,
    recovered_label: Option<usize>,
    status: Option<String>,
    iterations: Option<usize>,
    mse: f64,
    ssim: f64,
    psnr: Option<f64>,
    gradient_loss: Option<f64>,
    rank: Option<usize>,
    condition: Option<f64>,
    mse_std: Option<f64>,
    ssim_std: Option<f64>,
    psnr_std: Option<f64>,
    gradient_loss_std: Option<f64>,
}

impl RunReport {
    pub fn new(command: &str, spec: &str, rows: Vec<TrialRow>, wall_clock_secs: f64) -> Result<Self> {
        let aggregates = Aggregates::from_rows(&rows)?;
        Ok(Self {
            command: command.to_string(),
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            spec: spec.to_string(),
            rows,
            aggregates,
            wall_clock_secs,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRecord {
                row: r.key.clone(),
                seed: Some(r.seed),
                label: r.label,
                recovered_label: r.recovered_label,
                status: Some(r.status.clone()),
                iterations: Some(r.iterations),
                mse: r.mse,
                ssim: r.ssim,
                psnr: r.psnr,
                gradient_loss: r.gradient_loss,
                rank: r.rank,
                condition: r.condition,
                mse_std: None,
                ssim_std: None,
                psnr_std: None,
                gradient_loss_std: None,
            })?;
        }
        let a = &self.aggregates;
        w.serialize(CsvRecord {
            row: AGGREGATE_KEY.into(),
            seed: None,
            label: None,
            recovered_label: None,
            status: None,
            iterations: None,
            mse: a.mse.mean,
            ssim: a.ssim.mean,
            psnr: a.psnr.map(|s| s.mean),
            gradient_loss: a.gradient_loss.map(|s| s.mean),
            rank: None,
            condition: None,
            mse_std: Some(a.mse.std),
            ssim_std: Some(a.ssim.std),
            psnr_std: a.psnr.map(|s| s.std),
            gradient_loss_std: a.gradient_loss.map(|s| s.std),
        })?;
        let bytes = w.into_inner().map_err(|e| HarnessError::Usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `report.csv`, `report.json` and `timing.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("report.csv"), &self.to_csv()?)?;
        write_text(&dir.join("report.json"), &self.to_json()?)?;
        let timing = serde_json::json!({ "wall_clock_secs": self.wall_clock_secs });
        write_text(&dir.join("timing.json"), &format!("{timing}\n"))
    }
}

/// Trial rows and the aggregate row of an emitted CSV report.
pub fn parse_csv(text: &str) -> Result<(Vec<TrialRow>, Aggregates)> {
    let mut rows = Vec::new();
    let mut agg = None;
    for rec in csv::Reader::from_reader(text.as_bytes()).deserialize() {
        let rec: CsvRecord = rec?;
        if rec.row == AGGREGATE_KEY {
            let stat = |mean: f64, std: Option<f64>| Stat { mean, std: std.unwrap_or(0.0), count: 0 };
            agg = Some(Aggregates {
                mse: stat(rec.mse, rec.mse_std),
                ssim: stat(rec.ssim, rec.ssim_std),
                psnr: rec.psnr.map(|m| stat(m, rec.psnr_std)),
                gradient_loss: rec.gradient_loss.map(|m| stat(m, rec.gradient_loss_std)),
            });
        } else {
            rows.push(TrialRow {
                key: rec.row,
                seed: rec.seed.unwrap_or(0),
                label: rec.label,
                recovered_label: rec.recovered_label,
                status: rec.status.unwrap_or_default(),
                iterations: rec.iterations.unwrap_or(0),
                mse: rec.mse,
                ssim: rec.ssim,
                psnr: rec.psnr,
                gradient_loss: rec.gradient_loss,
                rank: rec.rank,
                condition: rec.condition,
            });
        }
    }
    let agg = agg.ok_or(HarnessError::EmptyReport)?;
    Ok((rows, agg))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}
