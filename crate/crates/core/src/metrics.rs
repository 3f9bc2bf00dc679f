//! Discretization gap, saturation and dominance measurements, and the CSV /
//! JSON outputs of a run.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{default_k, topk_dominance_diagnostic, DominanceReport};
use crate::tensor::{Scalar, Tensor};
use crate::train::{discretize_model, evaluate, Dataset, Model, TrainingConfig};

pub const CSV_HEADER: &str = "epoch,task_loss,reg_loss,train_acc,test_acc,test_acc_d,gap,saturation,dominance,step_ms";

/// |W_q| above this counts as saturated.
pub const SATURATION_THRESHOLD: f64 = 0.9;
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub task_loss: f64,
    /// Sparsity objective value.
    pub reg_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Test accuracy after discretization.
    pub test_acc_d: f64,
    /// `test_acc − test_acc_d`.
    pub gap: f64,
    pub saturation: f64,
    pub dominance: f64,
    pub step_ms: f64,
}

/// Nine significant digits in scientific notation.
fn sig9(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:.8e}")
    }
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        let f = [
            self.task_loss,
            self.reg_loss,
            self.train_acc,
            self.test_acc,
            self.test_acc_d,
            self.gap,
            self.saturation,
            self.dominance,
            self.step_ms,
        ];
        let mut s = self.epoch.to_string();
        for v in f {
            s.push(',');
            s.push_str(&sig9(v));
        }
        s
    }

    /// The record as it reads back from CSV.
    pub fn rounded(&self) -> Self {
        parse_row(&self.to_csv_row()).expect("own rows parse")
    }
}

fn parse_row(line: &str) -> Result<MetricsRecord> {
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != 10 {
        return Err(Error::Format(format!("metrics row has {} columns, expected 10", cols.len())));
    }
    let num = |i: usize| -> Result<f64> {
        cols[i]
            .parse()
            .map_err(|_| Error::Format(format!("metrics column {i}: '{}'", cols[i])))
    };
    Ok(MetricsRecord {
        epoch: cols[0]
            .parse()
            .map_err(|_| Error::Format(format!("metrics epoch '{}'", cols[0])))?,
        task_loss: num(1)?,
        reg_loss: num(2)?,
        train_acc: num(3)?,
        test_acc: num(4)?,
        test_acc_d: num(5)?,
        gap: num(6)?,
        saturation: num(7)?,
        dominance: num(8)?,
        step_ms: num(9)?,
    })
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::Format(format!("unexpected metrics header {other:?}"))),
    }
    lines.map(parse_row).collect()
}

/// Append-only CSV writer. In deterministic mode `step_ms` is written as 0
/// so that repeat runs produce identical files; timings still go to the
/// run summary.
pub struct MetricsWriter {
    out: BufWriter<File>,
    deterministic: bool,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>, deterministic: bool) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CSV_HEADER.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(Self { out, deterministic })
    }

    pub fn append(&mut self, r: &MetricsRecord) -> Result<()> {
        let mut r = *r;
        if self.deterministic {
            r.step_ms = 0.0;
        }
        self.out.write_all(r.to_csv_row().as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrainingConfig,
    pub final_metrics: Option<MetricsRecord>,
    /// Mean step time of each epoch, baseline row included.
    pub step_ms: Vec<f64>,
    pub wall_time_s: f64,
}

impl RunSummary {
    pub fn new(config: &TrainingConfig, records: &[MetricsRecord], wall_time_s: f64) -> Self {
        Self {
            config: config.clone(),
            final_metrics: records.last().copied(),
            step_ms: records.iter().map(|r| r.step_ms).collect(),
            wall_time_s,
        }
    }
}

pub fn write_summary(path: impl AsRef<Path>, summary: &RunSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Writes `metrics.csv` and `summary.json` into `dir`.
pub fn emit_metrics(records: &[MetricsRecord], dir: impl AsRef<Path>, summary: &RunSummary) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut w = MetricsWriter::create(dir.join("metrics.csv"), summary.config.deterministic)?;
    for r in records {
        w.append(r)?;
    }
    write_summary(dir.join("summary.json"), summary)
}

// ---- measurements ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Saturation {
    /// Counts over 20 equal bins of [−1, 1]; values outside are clamped
    /// into the end bins.
    pub histogram: [usize; HISTOGRAM_BINS],
    /// Share of entries with |W_q| > 0.9 (0 when there are none).
    pub fraction: f64,
    pub total: usize,
}

pub fn saturation_stats<T: Scalar>(wqs: &[Tensor<T>]) -> Saturation {
    let mut histogram = [0usize; HISTOGRAM_BINS];
    let (mut sat, mut total) = (0usize, 0usize);
    for w in wqs {
        for &v in w.data() {
            let v = v.f64();
            let bin = (((v + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
            histogram[bin] += 1;
            if v.abs() > SATURATION_THRESHOLD {
                sat += 1;
            }
            total += 1;
        }
    }
    Saturation {
        histogram,
        fraction: if total == 0 { 0.0 } else { sat as f64 / total as f64 },
        total,
    }
}

/// Accuracy of the model and of its discretized copy, and their
/// difference. The model itself is not modified.
pub fn discretization_gap<T: Scalar>(model: &Model<T>, split: &Dataset, limit: Option<usize>) -> Result<(f64, f64, f64)> {
    let mut soft = model.clone();
    let acc = evaluate(&mut soft, split, limit)?;
    let mut hard = discretize_model(model)?;
    let acc_d = evaluate(&mut hard, split, limit)?;
    Ok((acc, acc_d, acc - acc_d))
}

/// Dominance ratio with each binarized layer masked to its top
/// `⌈fraction·n⌉` entries, measured on `data[indices]`. A model without
/// binarized layers reports a ratio of exactly 1.
pub fn model_dominance<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    indices: &[usize],
    fraction: f64,
) -> Result<DominanceReport> {
    let weights = model.binarized_weights()?;
    let layers: Vec<usize> = weights.keys().copied().collect();
    let wqs: Vec<Tensor<T>> = weights.values().cloned().collect();
    let ks: Vec<usize> = wqs.iter().map(|w| default_k(w.len(), fraction)).collect();
    topk_dominance_diagnostic(&wqs, &ks, |ws| {
        let map = layers.iter().copied().zip(ws.iter().cloned()).collect();
        model.loss_with(data, indices, &map)
    })
}
