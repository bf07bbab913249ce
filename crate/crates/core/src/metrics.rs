//! Uniformity and alignment measurements, applied to pre-projection
//! representations, plus the CSV record written at each logged step.
//!
//! Local uniformity is the negated per-sample Gaussian-potential loss on the
//! local representations. Global uniformity is the negated average pairwise
//! Gaussian potential over unit-normalized pooled representations (t = 2,
//! all ordered pairs including i = j, matching the per-sample convention).

use crate::error::{LabError, Result};
use crate::format::Block;
use crate::loss::{uni_gauss, GlobalReps};
use crate::numeric::{cosine, normalize_rows_unit, Matrix, RaggedBatch};

/// Exact header of every metrics CSV.
pub const CSV_HEADER: &str = "step,loss_total,loss_global,loss_uni_image,loss_uni_report,\
align_global,unif_local_image,unif_local_report,unif_global_image,unif_global_report";

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_global: f64,
    pub loss_uni_image: f64,
    pub loss_uni_report: f64,
    pub align_global: f64,
    pub unif_local_image: f64,
    pub unif_local_report: f64,
    pub unif_global_image: f64,
    pub unif_global_report: f64,
}

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_total,
            self.loss_global,
            self.loss_uni_image,
            self.loss_uni_report,
            self.align_global,
            self.unif_local_image,
            self.unif_local_report,
            self.unif_global_image,
            self.unif_global_report
        )
    }

    pub fn all_finite(&self) -> bool {
        [
            self.loss_total,
            self.loss_global,
            self.loss_uni_image,
            self.loss_uni_report,
            self.align_global,
            self.unif_local_image,
            self.unif_local_report,
            self.unif_global_image,
            self.unif_global_report,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Per-sample local uniformity: the negated uni-gauss value at the
/// measurement temperature. Collapsed representations score -1/tau_metric;
/// spreading the rows raises it.
pub fn local_uniformity(locals: &RaggedBatch, tau_metric: f64) -> Result<f64> {
    Ok(-uni_gauss(locals, tau_metric)?)
}

/// Global uniformity over pooled representations: rows are unit-normalized,
/// then -log (1/N^2) sum_{i,j} exp(-t |y_i - y_j|^2) over all ordered pairs
/// including i = j. A fully collapsed batch scores exactly 0.
pub fn global_uniformity(pooled: &Matrix, t: f64) -> Result<f64> {
    if pooled.rows() < 2 {
        return Err(LabError::EmptyBatch(format!(
            "global uniformity needs N >= 2, got {}",
            pooled.rows()
        )));
    }
    if !(t > 0.0) {
        return Err(LabError::Config(format!("t must be > 0, got {t}")));
    }
    let unit = normalize_rows_unit(pooled)?;
    let n = unit.rows();
    // the i = j pairs contribute exp(0) = 1, so the sum is in [n, n^2] and
    // needs no max shift
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d2: f64 = unit
                .row(i)
                .iter()
                .zip(unit.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            sum += (-t * d2).exp();
        }
    }
    Ok(-(sum / (n * n) as f64).ln())
}

/// Mean cosine of matched pooled pairs.
pub fn global_alignment(g: &GlobalReps) -> Result<f64> {
    let n = g.len();
    if n == 0 {
        return Err(LabError::EmptyBatch("global alignment of empty batch".into()));
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += cosine(g.image.row(i), g.report.row(i))?;
    }
    Ok(acc / n as f64)
}

/// Recompute a metric record from dumped representations (the named blocks
/// written by training: y_image, y_report, ybar_image, ybar_report,
/// zbar_image, zbar_report). Loss fields are not recoverable from
/// representations alone and are reported as 0.
pub fn record_from_reps(
    blocks: &[(String, Block)],
    tau_metric: f64,
    t: f64,
) -> Result<MetricRecord> {
    let find = |name: &str| -> Result<&Block> {
        blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| LabError::Parse(format!("reps dump is missing block '{name}'")))
    };
    let ragged = |name: &str| -> Result<&RaggedBatch> {
        match find(name)? {
            Block::Ragged(b) => Ok(b),
            Block::Tensor(_) => Err(LabError::Parse(format!("block '{name}' must be RAGGED"))),
        }
    };
    let tensor = |name: &str| -> Result<&Matrix> {
        match find(name)? {
            Block::Tensor(m) => Ok(m),
            Block::Ragged(_) => Err(LabError::Parse(format!("block '{name}' must be TENSOR"))),
        }
    };
    let globals = GlobalReps::new(tensor("zbar_image")?.clone(), tensor("zbar_report")?.clone())?;
    Ok(MetricRecord {
        step: 0,
        loss_total: 0.0,
        loss_global: 0.0,
        loss_uni_image: 0.0,
        loss_uni_report: 0.0,
        align_global: global_alignment(&globals)?,
        unif_local_image: local_uniformity(ragged("y_image")?, tau_metric)?,
        unif_local_report: local_uniformity(ragged("y_report")?, tau_metric)?,
        unif_global_image: global_uniformity(tensor("ybar_image")?, t)?,
        unif_global_report: global_uniformity(tensor("ybar_report")?, t)?,
    })
}

/// Spearman rank correlation; NaN-free inputs, ties broken by index order
/// (inputs here are strictly increasing grids, so ties do not arise).
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(LabError::Dimension("spearman needs two equal-length series".into()));
    }
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|a, b| v[*a].partial_cmp(&v[*b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (rank, i) in idx.into_iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    };
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        dx += (a - mean) * (a - mean);
        dy += (b - mean) * (b - mean);
    }
    Ok(num / (dx * dy).sqrt())
}
