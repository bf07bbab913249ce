//! The contrastive loss family: global NTXent, the two local contrastive
//! losses over cross-modality representations, their weighted combination,
//! and the per-sample uniformity regularizers (uni-gauss, uni-xent).
//!
//! Every loss exists twice: as a pure scalar function of plain matrices
//! (used by the decomposition identities and the verification suite) and as
//! a tape builder over node ids (used for training). Tests pin the two
//! routes against each other.

use crate::autodiff::{NodeId, Tape};
use crate::error::{LabError, Result};
use crate::numeric::{cosine_matrix, logsumexp, Matrix, Modality, RaggedBatch};

/// All scalar hyperparameters of the loss family.
///
/// `tau` is the global temperature, `tau_prime` the local one. `lambda`
/// weighs the image-anchored against the report-anchored direction of the
/// global loss. `gamma`, `mu`, `nu` weigh the three contrastive components;
/// `eta` weighs the uniformity terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub tau_prime: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub mu: f64,
    pub nu: f64,
    pub eta: f64,
}

impl Default for LossConfig {
    /// tau, lambda, gamma, mu, nu are placeholders (not tuned values);
    /// tau_prime = 0.2 and eta = 0.25 are the gauss-variant defaults.
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            tau_prime: 0.2,
            lambda: 0.5,
            gamma: 1.0,
            mu: 1.0,
            nu: 1.0,
            eta: 0.25,
        }
    }
}

impl LossConfig {
    pub fn new(
        tau: f64,
        tau_prime: f64,
        lambda: f64,
        gamma: f64,
        mu: f64,
        nu: f64,
        eta: f64,
    ) -> Result<Self> {
        let cfg = LossConfig { tau, tau_prime, lambda, gamma, mu, nu, eta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [("tau", self.tau), ("tau_prime", self.tau_prime)];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(LabError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LabError::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        let nonneg = [
            ("gamma", self.gamma),
            ("mu", self.mu),
            ("nu", self.nu),
            ("eta", self.eta),
        ];
        for (name, v) in nonneg {
            if v < 0.0 || !v.is_finite() {
                return Err(LabError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Default uniformity coefficient per variant.
pub fn default_eta(variant: UniformityVariant) -> f64 {
    match variant {
        UniformityVariant::Gauss => 0.25,
        UniformityVariant::Xent => 0.5,
    }
}

/// The two best local temperatures per variant.
pub fn default_tau_primes(variant: UniformityVariant) -> [f64; 2] {
    match variant {
        UniformityVariant::Gauss => [0.2, 0.5],
        UniformityVariant::Xent => [0.2, 0.3],
    }
}

/// Pooled per-sample representations of both modalities, N x D each.
#[derive(Debug, Clone)]
pub struct GlobalReps {
    pub image: Matrix,
    pub report: Matrix,
}

impl GlobalReps {
    pub fn new(image: Matrix, report: Matrix) -> Result<Self> {
        if image.rows() != report.rows() || image.cols() != report.cols() {
            return Err(LabError::Dimension(format!(
                "global reps {}x{} vs {}x{}",
                image.rows(),
                image.cols(),
                report.rows(),
                report.cols()
            )));
        }
        for (name, m) in [("image", &image), ("report", &report)] {
            for i in 0..m.rows() {
                if m.row_norm(i) == 0.0 {
                    return Err(LabError::Degenerate(format!("zero {name} row {i}")));
                }
            }
        }
        Ok(GlobalReps { image, report })
    }

    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.image.rows() == 0
    }
}

/// Cross-modality representations: `to_image[i]` carries report information
/// at the K image positions (K x D); `to_report[i]` carries image
/// information at the M_i sentence positions (M_i x D).
#[derive(Debug, Clone)]
pub struct CrossReps {
    pub to_image: Vec<Matrix>,
    pub to_report: Vec<Matrix>,
}

/// Local weights, the shared spatial positiveness matrix, and the attention
/// matrices of both directions.
///
/// In "normalized" mode each weight vector sums to 1 and each positiveness
/// row sums to 1; attention rows always sum to 1.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub image_weights: Vec<Vec<f64>>,
    pub report_weights: Vec<Vec<f64>>,
    /// K x K, shared across samples (depends only on grid geometry).
    pub positiveness: Matrix,
    /// alpha^(R->S): per-sample K x M_i, row-stochastic.
    pub attn_to_image: Option<Vec<Matrix>>,
    /// alpha^(S->R): per-sample M_i x K, row-stochastic.
    pub attn_to_report: Option<Vec<Matrix>>,
}

const ALPHA_ROW_SUM_TOL: f64 = 1e-10;

impl WeightSet {
    pub fn new(
        image_weights: Vec<Vec<f64>>,
        report_weights: Vec<Vec<f64>>,
        positiveness: Matrix,
        attn_to_image: Option<Vec<Matrix>>,
        attn_to_report: Option<Vec<Matrix>>,
    ) -> Result<Self> {
        let w = WeightSet {
            image_weights,
            report_weights,
            positiveness,
            attn_to_image,
            attn_to_report,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, vecs) in [
            ("image weight", &self.image_weights),
            ("report weight", &self.report_weights),
        ] {
            for (i, v) in vecs.iter().enumerate() {
                if v.iter().any(|x| *x < 0.0 || !x.is_finite()) {
                    return Err(LabError::Config(format!("negative {what} in sample {i}")));
                }
            }
        }
        if self.positiveness.data().iter().any(|x| *x < 0.0) {
            return Err(LabError::Config("negative positiveness entry".into()));
        }
        for (what, attn) in [
            ("attn_to_image", &self.attn_to_image),
            ("attn_to_report", &self.attn_to_report),
        ] {
            if let Some(mats) = attn {
                for (i, m) in mats.iter().enumerate() {
                    for r in 0..m.rows() {
                        let s: f64 = m.row(r).iter().sum();
                        if (s - 1.0).abs() > ALPHA_ROW_SUM_TOL {
                            return Err(LabError::Config(format!(
                                "{what} sample {i} row {r} sums to {s}, not 1"
                            )));
                        }
                        if m.row(r).iter().any(|x| *x < 0.0) {
                            return Err(LabError::Config(format!(
                                "{what} sample {i} row {r} has a negative entry"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// True when every weight vector and every positiveness row sums to 1
    /// within 1e-10.
    pub fn is_normalized(&self) -> bool {
        let ok_vec = |vs: &Vec<Vec<f64>>| {
            vs.iter()
                .all(|v| (v.iter().sum::<f64>() - 1.0).abs() <= ALPHA_ROW_SUM_TOL)
        };
        let ok_p = (0..self.positiveness.rows()).all(|k| {
            (self.positiveness.row(k).iter().sum::<f64>() - 1.0).abs() <= ALPHA_ROW_SUM_TOL
        });
        ok_vec(&self.image_weights) && ok_vec(&self.report_weights) && ok_p
    }

    pub fn attn_to_image(&self) -> Result<&[Matrix]> {
        self.attn_to_image
            .as_deref()
            .ok_or_else(|| LabError::Config("attention matrices (R->S) missing".into()))
    }

    pub fn attn_to_report(&self) -> Result<&[Matrix]> {
        self.attn_to_report
            .as_deref()
            .ok_or_else(|| LabError::Config("attention matrices (S->R) missing".into()))
    }
}

/// Which per-sample uniformity regularizer to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UniformityVariant {
    Gauss,
    Xent,
}

impl UniformityVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            UniformityVariant::Gauss => "gauss",
            UniformityVariant::Xent => "xent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gauss" => Ok(UniformityVariant::Gauss),
            "xent" => Ok(UniformityVariant::Xent),
            other => Err(LabError::Config(format!("unknown uniformity variant '{other}'"))),
        }
    }
}

// ---------------------------------------------------------------------------
// plain (non-tape) losses
// ---------------------------------------------------------------------------

/// Symmetric NTXent over pooled representations with cosine / tau logits,
/// lambda-weighted between the two directions, averaged over the batch.
pub fn global_loss(g: &GlobalReps, c: &LossConfig) -> Result<f64> {
    c.validate()?;
    let n = g.len();
    if n == 0 {
        return Err(LabError::EmptyBatch("global loss of empty batch".into()));
    }
    let inv_tau = 1.0 / c.tau;
    let x_sr = cosine_matrix(&g.image, &g.report)?.scale(inv_tau);
    let x_rs = cosine_matrix(&g.report, &g.image)?.scale(inv_tau);
    let mut total = 0.0;
    for i in 0..n {
        let l_sr = logsumexp(x_sr.row(i))? - x_sr.get(i, i);
        let l_rs = logsumexp(x_rs.row(i))? - x_rs.get(i, i);
        total += c.lambda * l_sr + (1.0 - c.lambda) * l_rs;
    }
    Ok(total / n as f64)
}

fn check_local_image_shapes(
    image_locals: &RaggedBatch,
    cross_to_image: &CrossReps,
    w: &WeightSet,
) -> Result<usize> {
    if image_locals.modality() != Modality::Image {
        return Err(LabError::Dimension("expected an image-modality batch".into()));
    }
    let k = image_locals.fixed_rows().unwrap();
    if w.positiveness.rows() != k || w.positiveness.cols() != k {
        return Err(LabError::Dimension(format!(
            "positiveness is {}x{}, expected {k}x{k}",
            w.positiveness.rows(),
            w.positiveness.cols()
        )));
    }
    if cross_to_image.to_image.len() != image_locals.len() {
        return Err(LabError::Dimension("cross reps batch size mismatch".into()));
    }
    for (i, z) in cross_to_image.to_image.iter().enumerate() {
        if z.rows() != k || z.cols() != image_locals.dim() {
            return Err(LabError::Dimension(format!(
                "cross rep sample {i} is {}x{}, expected {k}x{}",
                z.rows(),
                z.cols(),
                image_locals.dim()
            )));
        }
    }
    if w.image_weights.len() != image_locals.len()
        || w.image_weights.iter().any(|v| v.len() != k)
    {
        return Err(LabError::Dimension("image weights shape mismatch".into()));
    }
    Ok(k)
}

/// Local contrastive loss for image regions against report-to-image cross
/// representations, with positiveness-weighted targets and tau' logits.
pub fn local_image_loss(
    image_locals: &RaggedBatch,
    cross_to_image: &CrossReps,
    w: &WeightSet,
    c: &LossConfig,
) -> Result<f64> {
    c.validate()?;
    let k = check_local_image_shapes(image_locals, cross_to_image, w)?;
    let n = image_locals.len();
    let inv_tau = 1.0 / c.tau_prime;
    let p = &w.positiveness;
    let mut total = 0.0;
    for i in 0..n {
        let zs = image_locals.sample(i);
        let zrs = &cross_to_image.to_image[i];
        let x1 = cosine_matrix(zs, zrs)?.scale(inv_tau);
        let x2 = cosine_matrix(zrs, zs)?.scale(inv_tau);
        let mut contrib = 0.0;
        for kk in 0..k {
            let lse1 = logsumexp(x1.row(kk))?;
            let lse2 = logsumexp(x2.row(kk))?;
            let mut term = 0.0;
            for l in 0..k {
                term += p.get(kk, l) * (lse1 - x1.get(kk, l));
                term += p.get(kk, l) * (lse2 - x2.get(kk, l));
            }
            contrib += w.image_weights[i][kk] * term;
        }
        total += contrib;
    }
    Ok(total / (2.0 * n as f64))
}

/// Local contrastive loss for report sentences against image-to-report cross
/// representations; the target is the matching sentence (diagonal).
pub fn local_report_loss(
    report_locals: &RaggedBatch,
    cross_to_report: &CrossReps,
    w: &WeightSet,
    c: &LossConfig,
) -> Result<f64> {
    c.validate()?;
    if report_locals.modality() != Modality::Report {
        return Err(LabError::Dimension("expected a report-modality batch".into()));
    }
    let n = report_locals.len();
    if cross_to_report.to_report.len() != n || w.report_weights.len() != n {
        return Err(LabError::Dimension("report loss batch size mismatch".into()));
    }
    let inv_tau = 1.0 / c.tau_prime;
    let mut total = 0.0;
    for i in 0..n {
        let zr = report_locals.sample(i);
        let zsr = &cross_to_report.to_report[i];
        let m_i = zr.rows();
        if zsr.rows() != m_i || zsr.cols() != zr.cols() {
            return Err(LabError::Dimension(format!(
                "cross rep sample {i} is {}x{}, expected {m_i}x{}",
                zsr.rows(),
                zsr.cols(),
                zr.cols()
            )));
        }
        if w.report_weights[i].len() != m_i {
            return Err(LabError::Dimension(format!("report weights sample {i} length mismatch")));
        }
        let x1 = cosine_matrix(zr, zsr)?.scale(inv_tau);
        let x2 = cosine_matrix(zsr, zr)?.scale(inv_tau);
        let mut contrib = 0.0;
        for m in 0..m_i {
            let l1 = logsumexp(x1.row(m))? - x1.get(m, m);
            let l2 = logsumexp(x2.row(m))? - x2.get(m, m);
            contrib += w.report_weights[i][m] * (l1 + l2);
        }
        total += contrib;
    }
    Ok(total / (2.0 * n as f64))
}

/// gamma * global + mu * local-image + nu * local-report.
#[allow(clippy::too_many_arguments)]
pub fn lovt_loss(
    g: &GlobalReps,
    image_locals: &RaggedBatch,
    report_locals: &RaggedBatch,
    cross: &CrossReps,
    w: &WeightSet,
    c: &LossConfig,
) -> Result<f64> {
    let lg = global_loss(g, c)?;
    let li = local_image_loss(image_locals, cross, w, c)?;
    let lr = local_report_loss(report_locals, cross, w, c)?;
    Ok(c.gamma * lg + c.mu * li + c.nu * lr)
}

/// Per-sample Gaussian-potential uniformity: mean over samples of
/// log (1/K_i^2) sum_{k,k'} exp(cos(z_k, z_k') / tau').
pub fn uni_gauss(batch: &RaggedBatch, tau_prime: f64) -> Result<f64> {
    if !(tau_prime > 0.0) {
        return Err(LabError::Config(format!("tau_prime must be > 0, got {tau_prime}")));
    }
    let inv_tau = 1.0 / tau_prime;
    let mut total = 0.0;
    for sample in batch.samples() {
        let k = sample.rows();
        let x = cosine_matrix(sample, sample)?.scale(inv_tau);
        let m = x.data().iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let s: f64 = x.data().iter().map(|v| (v - m).exp()).sum();
        total += m + (s / (k * k) as f64).ln();
    }
    Ok(total / batch.len() as f64)
}

pub fn uni_gauss_image(image_locals: &RaggedBatch, tau_prime: f64) -> Result<f64> {
    uni_gauss(image_locals, tau_prime)
}

pub fn uni_gauss_report(report_locals: &RaggedBatch, tau_prime: f64) -> Result<f64> {
    uni_gauss(report_locals, tau_prime)
}

/// Per-sample cross-entropy uniformity: mean over samples of the mean
/// per-anchor logsumexp of cos / tau' rows.
pub fn uni_xent(batch: &RaggedBatch, tau_prime: f64) -> Result<f64> {
    if !(tau_prime > 0.0) {
        return Err(LabError::Config(format!("tau_prime must be > 0, got {tau_prime}")));
    }
    let inv_tau = 1.0 / tau_prime;
    let mut total = 0.0;
    for sample in batch.samples() {
        let k = sample.rows();
        let x = cosine_matrix(sample, sample)?.scale(inv_tau);
        let mut acc = 0.0;
        for row in 0..k {
            acc += logsumexp(x.row(row))?;
        }
        total += acc / k as f64;
    }
    Ok(total / batch.len() as f64)
}

pub fn uni_xent_image(image_locals: &RaggedBatch, tau_prime: f64) -> Result<f64> {
    uni_xent(image_locals, tau_prime)
}

pub fn uni_xent_report(report_locals: &RaggedBatch, tau_prime: f64) -> Result<f64> {
    uni_xent(report_locals, tau_prime)
}

/// gamma * global + eta * (uni_image + uni_report) for the chosen variant.
pub fn lovt_uni_loss(
    g: &GlobalReps,
    image_locals: &RaggedBatch,
    report_locals: &RaggedBatch,
    c: &LossConfig,
    variant: UniformityVariant,
) -> Result<f64> {
    let lg = global_loss(g, c)?;
    let (ui, ur) = match variant {
        UniformityVariant::Gauss => (
            uni_gauss(image_locals, c.tau_prime)?,
            uni_gauss(report_locals, c.tau_prime)?,
        ),
        UniformityVariant::Xent => (
            uni_xent(image_locals, c.tau_prime)?,
            uni_xent(report_locals, c.tau_prime)?,
        ),
    };
    Ok(c.gamma * lg + c.eta * (ui + ur))
}

// ---------------------------------------------------------------------------
// tape builders
// ---------------------------------------------------------------------------

/// Global NTXent on the tape; `zbar_image` and `zbar_report` are N x D nodes.
pub fn tape_global_loss(
    tape: &mut Tape,
    zbar_image: NodeId,
    zbar_report: NodeId,
    c: &LossConfig,
) -> Result<NodeId> {
    let n = tape.value(zbar_image).rows();
    if n == 0 {
        return Err(LabError::EmptyBatch("global loss of empty batch".into()));
    }
    let inv_tau = 1.0 / c.tau;
    let c_sr = tape.cosine_matrix(zbar_image, zbar_report)?;
    let x_sr = tape.scalar_mul(c_sr, inv_tau)?;
    let c_rs = tape.cosine_matrix(zbar_report, zbar_image)?;
    let x_rs = tape.scalar_mul(c_rs, inv_tau)?;
    let lse_sr = tape.logsumexp_rows(x_sr)?;
    let lse_rs = tape.logsumexp_rows(x_rs)?;
    let diag_sr = tape.diag(x_sr)?;
    let diag_rs = tape.diag(x_rs)?;
    let per_sr = tape.sub(lse_sr, diag_sr)?;
    let per_rs = tape.sub(lse_rs, diag_rs)?;
    let sum_sr = tape.sum(per_sr)?;
    let sum_rs = tape.sum(per_rs)?;
    let a = tape.scalar_mul(sum_sr, c.lambda / n as f64)?;
    let b = tape.scalar_mul(sum_rs, (1.0 - c.lambda) / n as f64)?;
    tape.add(a, b)
}

/// Local image contrastive loss on the tape. `weights[i]` is a 1 x K node,
/// `positiveness` a constant K x K matrix.
pub fn tape_local_image_loss(
    tape: &mut Tape,
    image_locals: &[NodeId],
    cross_to_image: &[NodeId],
    weights: &[NodeId],
    positiveness: &Matrix,
    c: &LossConfig,
) -> Result<NodeId> {
    if image_locals.len() != cross_to_image.len() || image_locals.len() != weights.len() {
        return Err(LabError::Dimension("local image loss batch size mismatch".into()));
    }
    let n = image_locals.len();
    let inv_tau = 1.0 / c.tau_prime;
    let k = positiveness.rows();
    let p_node = tape.constant(positiveness.clone());
    let p_rowsum = tape.sum_rows(p_node)?;
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        let mut sides = Vec::with_capacity(2);
        for (q, kv) in [
            (image_locals[i], cross_to_image[i]),
            (cross_to_image[i], image_locals[i]),
        ] {
            let cm = tape.cosine_matrix(q, kv)?;
            let x = tape.scalar_mul(cm, inv_tau)?;
            let lse = tape.logsumexp_rows(x)?;
            let weighted_lse = tape.mul(p_rowsum, lse)?;
            let px = tape.mul(p_node, x)?;
            let px_sum = tape.sum_rows(px)?;
            let side = tape.sub(weighted_lse, px_sum)?;
            sides.push(side);
        }
        let both = tape.add(sides[0], sides[1])?;
        let both_row = tape.reshape(both, 1, k)?;
        let w_col = tape.reshape(weights[i], k, 1)?;
        let contrib = tape.matmul(both_row, w_col)?;
        per_sample.push(contrib);
    }
    let total = tape.sum_scalars(&per_sample)?;
    tape.scalar_mul(total, 1.0 / (2.0 * n as f64))
}

/// Local report contrastive loss on the tape (diagonal targets).
pub fn tape_local_report_loss(
    tape: &mut Tape,
    report_locals: &[NodeId],
    cross_to_report: &[NodeId],
    weights: &[NodeId],
    c: &LossConfig,
) -> Result<NodeId> {
    if report_locals.len() != cross_to_report.len() || report_locals.len() != weights.len() {
        return Err(LabError::Dimension("local report loss batch size mismatch".into()));
    }
    let n = report_locals.len();
    let inv_tau = 1.0 / c.tau_prime;
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        let m_i = tape.value(report_locals[i]).rows();
        let mut sides = Vec::with_capacity(2);
        for (q, kv) in [
            (report_locals[i], cross_to_report[i]),
            (cross_to_report[i], report_locals[i]),
        ] {
            let cm = tape.cosine_matrix(q, kv)?;
            let x = tape.scalar_mul(cm, inv_tau)?;
            let lse = tape.logsumexp_rows(x)?;
            let diag = tape.diag(x)?;
            let side = tape.sub(lse, diag)?;
            sides.push(side);
        }
        let both = tape.add(sides[0], sides[1])?;
        let both_row = tape.reshape(both, 1, m_i)?;
        let w_col = tape.reshape(weights[i], m_i, 1)?;
        let contrib = tape.matmul(both_row, w_col)?;
        per_sample.push(contrib);
    }
    let total = tape.sum_scalars(&per_sample)?;
    tape.scalar_mul(total, 1.0 / (2.0 * n as f64))
}

/// Per-sample uniformity on the tape over local representation nodes.
pub fn tape_uniformity(
    tape: &mut Tape,
    locals: &[NodeId],
    tau_prime: f64,
    variant: UniformityVariant,
) -> Result<NodeId> {
    if locals.is_empty() {
        return Err(LabError::EmptyBatch("uniformity of empty batch".into()));
    }
    if !(tau_prime > 0.0) {
        return Err(LabError::Config(format!("tau_prime must be > 0, got {tau_prime}")));
    }
    let inv_tau = 1.0 / tau_prime;
    let n = locals.len();
    let mut per_sample = Vec::with_capacity(n);
    for &z in locals {
        let k = tape.value(z).rows();
        let cm = tape.cosine_matrix(z, z)?;
        let x = tape.scalar_mul(cm, inv_tau)?;
        let term = match variant {
            UniformityVariant::Gauss => {
                let flat = tape.reshape(x, 1, k * k)?;
                let lse = tape.logsumexp_rows(flat)?;
                tape.add_const(lse, -(((k * k) as f64).ln()))?
            }
            UniformityVariant::Xent => {
                let lse = tape.logsumexp_rows(x)?;
                let s = tape.sum(lse)?;
                tape.scalar_mul(s, 1.0 / k as f64)?
            }
        };
        per_sample.push(term);
    }
    let total = tape.sum_scalars(&per_sample)?;
    tape.scalar_mul(total, 1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{normalize_rows_unit, RngSeed};
    use rand::Rng;

    fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        normalize_rows_unit(&Matrix::from_raw(rows, cols, data)).unwrap()
    }

    fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    fn cfg(tau: f64, tau_prime: f64, lambda: f64) -> LossConfig {
        LossConfig { tau, tau_prime, lambda, ..LossConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::new(0.1, 0.2, 0.5, 1.0, 1.0, 1.0, 0.25).is_ok());
        assert!(LossConfig::new(0.0, 0.2, 0.5, 1.0, 1.0, 1.0, 0.25).is_err());
        assert!(LossConfig::new(0.1, 0.2, 1.5, 1.0, 1.0, 1.0, 0.25).is_err());
        assert!(LossConfig::new(0.1, 0.2, 0.5, -1.0, 1.0, 1.0, 0.25).is_err());
    }

    #[test]
    fn global_loss_single_sample_is_zero() {
        let g = GlobalReps::new(
            Matrix::from_rows(&[vec![0.3, 0.7]]).unwrap(),
            Matrix::from_rows(&[vec![-0.2, 1.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(global_loss(&g, &cfg(0.37, 0.2, 0.5)).unwrap(), 0.0);
    }

    #[test]
    fn global_loss_orthogonal_pairs_value() {
        let eye = identity(2);
        let g = GlobalReps::new(eye.clone(), eye).unwrap();
        let v = global_loss(&g, &cfg(1.0, 1.0, 0.5)).unwrap();
        assert!((v - 0.3132616875182228).abs() < 1e-15);
    }

    #[test]
    fn global_loss_row_rescaling_invariance() {
        let mut rng = RngSeed(3).rng();
        let gi = unit_rows(&mut rng, 3, 4);
        let gr = unit_rows(&mut rng, 3, 4);
        let c = cfg(0.2, 0.2, 0.3);
        let base = global_loss(&GlobalReps::new(gi.clone(), gr.clone()).unwrap(), &c).unwrap();
        for factor in [1e-3, 7.0, 1e3] {
            let mut scaled = gi.clone();
            for j in 0..scaled.cols() {
                let v = scaled.get(1, j) * factor;
                scaled.set(1, j, v);
            }
            let v = global_loss(&GlobalReps::new(scaled, gr.clone()).unwrap(), &c).unwrap();
            assert!((v - base).abs() < 1e-9, "factor {factor}: {v} vs {base}");
        }
    }

    #[test]
    fn global_loss_lambda_one_ignores_report_anchored_direction() {
        // Realize two cosine matrices that share every row as a multiset
        // (diagonal fixed, off-diagonal permuted within rows) but differ in
        // their columns. With lambda = 1 the loss only reads rows.
        let n = 3;
        let d = 2 * n;
        let mut rng = RngSeed(9).rng();
        let mut c1 = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                c1.set(i, j, rng.gen_range(-0.4..0.4));
            }
        }
        // permute off-diagonal entries within each row
        let mut c2 = c1.clone();
        for i in 0..n {
            let others: Vec<usize> = (0..n).filter(|j| *j != i).collect();
            let a = c1.get(i, others[0]);
            let b = c1.get(i, others[1]);
            c2.set(i, others[0], b);
            c2.set(i, others[1], a);
        }
        let realize = |c: &Matrix| {
            // report rows are basis vectors; image row i carries the target
            // cosines plus a private padding coordinate to reach unit norm
            let mut report = Matrix::zeros(n, d);
            for j in 0..n {
                report.set(j, j, 1.0);
            }
            let mut image = Matrix::zeros(n, d);
            for i in 0..n {
                let mut sq = 0.0;
                for j in 0..n {
                    image.set(i, j, c.get(i, j));
                    sq += c.get(i, j) * c.get(i, j);
                }
                image.set(i, n + i, (1.0 - sq).sqrt());
            }
            GlobalReps::new(image, report).unwrap()
        };
        let g1 = realize(&c1);
        let g2 = realize(&c2);
        let c_one = cfg(0.5, 0.2, 1.0);
        let v1 = global_loss(&g1, &c_one).unwrap();
        let v2 = global_loss(&g2, &c_one).unwrap();
        assert!((v1 - v2).abs() < 1e-12, "{v1} vs {v2}");
        // negative control: lambda = 0 reads columns and must differ
        let c_zero = cfg(0.5, 0.2, 0.0);
        let w1 = global_loss(&g1, &c_zero).unwrap();
        let w2 = global_loss(&g2, &c_zero).unwrap();
        assert!((w1 - w2).abs() > 1e-6, "{w1} vs {w2}");
    }

    #[test]
    fn local_image_loss_single_region_is_zero() {
        let zs = RaggedBatch::new(
            Modality::Image,
            vec![Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap()],
        )
        .unwrap();
        let cross = CrossReps {
            to_image: vec![Matrix::from_rows(&[vec![0.0, 2.0]]).unwrap()],
            to_report: vec![],
        };
        let w = WeightSet::new(
            vec![vec![1.0]],
            vec![],
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            None,
            None,
        )
        .unwrap();
        let v = local_image_loss(&zs, &cross, &w, &cfg(1.0, 0.7, 0.5)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn local_image_loss_reduces_to_symmetric_ntxent() {
        let eye = identity(2);
        let zs = RaggedBatch::new(Modality::Image, vec![eye.clone()]).unwrap();
        let cross = CrossReps { to_image: vec![eye.clone()], to_report: vec![] };
        let w = WeightSet::new(vec![vec![0.5, 0.5]], vec![], identity(2), None, None).unwrap();
        let v = local_image_loss(&zs, &cross, &w, &cfg(1.0, 1.0, 0.5)).unwrap();
        assert!((v - 0.3132616875182228).abs() < 1e-15);
        // doubling all image weights doubles the loss
        let w2 = WeightSet::new(vec![vec![1.0, 1.0]], vec![], identity(2), None, None).unwrap();
        let v2 = local_image_loss(&zs, &cross, &w2, &cfg(1.0, 1.0, 0.5)).unwrap();
        assert!((v2 - 2.0 * v).abs() < 1e-15);
    }

    #[test]
    fn local_report_loss_examples() {
        // all M_i = 1 -> 0
        let zr = RaggedBatch::new(
            Modality::Report,
            vec![
                Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
                Matrix::from_rows(&[vec![-2.0, 0.5]]).unwrap(),
            ],
        )
        .unwrap();
        let cross = CrossReps {
            to_image: vec![],
            to_report: vec![
                Matrix::from_rows(&[vec![0.4, 0.6]]).unwrap(),
                Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap(),
            ],
        };
        let w = WeightSet::new(
            vec![],
            vec![vec![1.0], vec![1.0]],
            identity(1),
            None,
            None,
        )
        .unwrap();
        assert_eq!(
            local_report_loss(&zr, &cross, &w, &cfg(1.0, 0.3, 0.5)).unwrap(),
            0.0
        );

        // M = 2 orthogonal, zr = zsr -> symmetric NTXent value
        let eye = identity(2);
        let zr = RaggedBatch::new(Modality::Report, vec![eye.clone()]).unwrap();
        let cross = CrossReps { to_image: vec![], to_report: vec![eye.clone()] };
        let w = WeightSet::new(vec![], vec![vec![0.5, 0.5]], identity(2), None, None).unwrap();
        let v = local_report_loss(&zr, &cross, &w, &cfg(1.0, 1.0, 0.5)).unwrap();
        assert!((v - 0.3132616875182228).abs() < 1e-15);

        // permuting sentences together with matching cross rows is a no-op
        let a = Matrix::from_rows(&[vec![1.0, 0.2], vec![-0.3, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.5, 0.5], vec![1.0, -0.7]]).unwrap();
        let zr1 = RaggedBatch::new(Modality::Report, vec![a.clone()]).unwrap();
        let cr1 = CrossReps { to_image: vec![], to_report: vec![b.clone()] };
        let swap = |m: &Matrix| {
            Matrix::from_rows(&[m.row(1).to_vec(), m.row(0).to_vec()]).unwrap()
        };
        let zr2 = RaggedBatch::new(Modality::Report, vec![swap(&a)]).unwrap();
        let cr2 = CrossReps { to_image: vec![], to_report: vec![swap(&b)] };
        let w = WeightSet::new(vec![], vec![vec![0.3, 0.7]], identity(2), None, None).unwrap();
        let w_swapped =
            WeightSet::new(vec![], vec![vec![0.7, 0.3]], identity(2), None, None).unwrap();
        let c = cfg(1.0, 0.4, 0.5);
        let v1 = local_report_loss(&zr1, &cr1, &w, &c).unwrap();
        let v2 = local_report_loss(&zr2, &cr2, &w_swapped, &c).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn lovt_loss_recomposition() {
        let mut rng = RngSeed(21).rng();
        let zs = RaggedBatch::new(
            Modality::Image,
            (0..3).map(|_| unit_rows(&mut rng, 4, 5)).collect(),
        )
        .unwrap();
        let ms = [2usize, 3, 1];
        let zr = RaggedBatch::new(
            Modality::Report,
            ms.iter().map(|m| unit_rows(&mut rng, *m, 5)).collect(),
        )
        .unwrap();
        let cross = CrossReps {
            to_image: (0..3).map(|_| unit_rows(&mut rng, 4, 5)).collect(),
            to_report: ms.iter().map(|m| unit_rows(&mut rng, *m, 5)).collect(),
        };
        let g = GlobalReps::new(unit_rows(&mut rng, 3, 5), unit_rows(&mut rng, 3, 5)).unwrap();
        let p = crate::numeric::softmax_rows(&unit_rows(&mut rng, 4, 4), 1.0).unwrap();
        let w = WeightSet::new(
            (0..3).map(|_| vec![0.2, 0.3, 0.4, 0.1]).collect(),
            ms.iter().map(|m| vec![1.0 / *m as f64; *m]).collect(),
            p,
            None,
            None,
        )
        .unwrap();
        let mut c = cfg(0.2, 0.3, 0.4);
        c.gamma = 0.9;
        c.mu = 1.3;
        c.nu = 0.6;
        let combined = lovt_loss(&g, &zs, &zr, &cross, &w, &c).unwrap();
        let by_hand = c.gamma * global_loss(&g, &c).unwrap()
            + c.mu * local_image_loss(&zs, &cross, &w, &c).unwrap()
            + c.nu * local_report_loss(&zr, &cross, &w, &c).unwrap();
        assert!((combined - by_hand).abs() <= 1e-14 * combined.abs().max(1.0));

        // gamma = mu = nu = 0 -> 0 ; gamma = 1, mu = nu = 0 -> global
        let mut zeroed = c.clone();
        zeroed.gamma = 0.0;
        zeroed.mu = 0.0;
        zeroed.nu = 0.0;
        assert_eq!(lovt_loss(&g, &zs, &zr, &cross, &w, &zeroed).unwrap(), 0.0);
        zeroed.gamma = 1.0;
        let only_global = lovt_loss(&g, &zs, &zr, &cross, &w, &zeroed).unwrap();
        assert_eq!(only_global, global_loss(&g, &zeroed).unwrap());
    }

    #[test]
    fn uni_gauss_closed_forms() {
        // collapsed: all rows identical -> exactly 1/tau'
        let row = vec![0.3, -0.4, 0.1];
        let collapsed = Matrix::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let b = RaggedBatch::new(Modality::Image, vec![collapsed]).unwrap();
        assert_eq!(uni_gauss_image(&b, 0.2).unwrap(), 5.0);

        // orthogonal K=2, tau' = 0.5 -> log((e^2 + 1)/2)
        let eye = identity(2);
        let b = RaggedBatch::new(Modality::Image, vec![eye]).unwrap();
        let v = uni_gauss_image(&b, 0.5).unwrap();
        assert!((v - 1.4337808304830273).abs() < 1e-15);

        // antipodal K=2, tau' = 1 -> log cosh 1
        let anti = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let b = RaggedBatch::new(Modality::Image, vec![anti]).unwrap();
        let v = uni_gauss_image(&b, 1.0).unwrap();
        assert!((v - 0.4337808304830271).abs() < 1e-15);
    }

    #[test]
    fn uni_gauss_report_examples() {
        // every M_i = 1 -> exactly 1/tau'
        let b = RaggedBatch::new(
            Modality::Report,
            vec![
                Matrix::from_rows(&[vec![2.0, 1.0]]).unwrap(),
                Matrix::from_rows(&[vec![-1.0, 3.0]]).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(uni_gauss_report(&b, 0.25).unwrap(), 4.0);

        // mixed M_i: batch value is the mean of per-sample values
        let s1 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap();
        let s2 = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let whole = RaggedBatch::new(Modality::Report, vec![s1.clone(), s2.clone()]).unwrap();
        let v1 = uni_gauss_report(
            &RaggedBatch::new(Modality::Report, vec![s1]).unwrap(),
            0.5,
        )
        .unwrap();
        let v2 = uni_gauss_report(
            &RaggedBatch::new(Modality::Report, vec![s2]).unwrap(),
            0.5,
        )
        .unwrap();
        let v = uni_gauss_report(&whole, 0.5).unwrap();
        assert!((v - 0.5 * (v1 + v2)).abs() < 1e-15);

        // replacing a duplicated pair by an orthogonal pair strictly lowers it
        let dup = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let orth = identity(2);
        let vd = uni_gauss_report(
            &RaggedBatch::new(Modality::Report, vec![dup]).unwrap(),
            0.5,
        )
        .unwrap();
        let vo = uni_gauss_report(
            &RaggedBatch::new(Modality::Report, vec![orth]).unwrap(),
            0.5,
        )
        .unwrap();
        assert!(vo < vd);
    }

    #[test]
    fn uni_xent_closed_forms() {
        // all rows identical -> 1/tau' + log K
        let row = vec![1.0, 2.0];
        let m = Matrix::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let b = RaggedBatch::new(Modality::Image, vec![m]).unwrap();
        let v = uni_xent_image(&b, 0.5).unwrap();
        assert!((v - (2.0 + 3.0_f64.ln())).abs() < 1e-12);

        // K = 1 -> exactly 1/tau'
        let b = RaggedBatch::new(
            Modality::Image,
            vec![Matrix::from_rows(&[vec![0.1, 0.9]]).unwrap()],
        )
        .unwrap();
        assert_eq!(uni_xent_image(&b, 0.5).unwrap(), 2.0);
    }

    #[test]
    fn uni_xent_minus_uni_gauss_within_log_k() {
        let mut rng = RngSeed(31).rng();
        for _ in 0..20 {
            let k = rng.gen_range(2..6);
            let b = RaggedBatch::new(
                Modality::Image,
                (0..3).map(|_| unit_rows(&mut rng, k, 4)).collect(),
            )
            .unwrap();
            let tp = 0.4;
            let diff = uni_xent_image(&b, tp).unwrap() - uni_gauss_image(&b, tp).unwrap();
            assert!(diff >= -1e-12, "diff {diff}");
            assert!(diff <= (k as f64).ln() + 1e-12, "diff {diff} k {k}");
        }
    }

    #[test]
    fn uniformity_upper_bounds() {
        let mut rng = RngSeed(37).rng();
        for _ in 0..10 {
            let k = rng.gen_range(1..6);
            let b = RaggedBatch::new(
                Modality::Image,
                (0..2).map(|_| unit_rows(&mut rng, k, 5)).collect(),
            )
            .unwrap();
            let tp = 0.3;
            assert!(uni_gauss_image(&b, tp).unwrap() <= 1.0 / tp + 1e-12);
            assert!(uni_xent_image(&b, tp).unwrap() <= 1.0 / tp + (k as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn lovt_uni_loss_eta_zero_is_global_only() {
        let mut rng = RngSeed(41).rng();
        let g = GlobalReps::new(unit_rows(&mut rng, 3, 4), unit_rows(&mut rng, 3, 4)).unwrap();
        let zs = RaggedBatch::new(
            Modality::Image,
            (0..3).map(|_| unit_rows(&mut rng, 2, 4)).collect(),
        )
        .unwrap();
        let zr = RaggedBatch::new(
            Modality::Report,
            (0..3).map(|_| unit_rows(&mut rng, 2, 4)).collect(),
        )
        .unwrap();
        let mut c = cfg(0.2, 0.2, 0.5);
        c.eta = 0.0;
        c.gamma = 0.8;
        let v = lovt_uni_loss(&g, &zs, &zr, &c, UniformityVariant::Gauss).unwrap();
        assert_eq!(v, 0.8 * global_loss(&g, &c).unwrap());
        assert_eq!(default_eta(UniformityVariant::Gauss), 0.25);
        assert_eq!(default_eta(UniformityVariant::Xent), 0.5);
        assert_eq!(default_tau_primes(UniformityVariant::Gauss), [0.2, 0.5]);
        assert_eq!(default_tau_primes(UniformityVariant::Xent), [0.2, 0.3]);
    }

    #[test]
    fn losses_invariant_under_batch_permutation_and_rotation() {
        let mut rng = RngSeed(47).rng();
        let n = 3;
        let gi = unit_rows(&mut rng, n, 4);
        let gr = unit_rows(&mut rng, n, 4);
        let c = cfg(0.2, 0.2, 0.3);
        let base = global_loss(&GlobalReps::new(gi.clone(), gr.clone()).unwrap(), &c).unwrap();

        // permute samples
        let perm = [2usize, 0, 1];
        let permute = |m: &Matrix| {
            Matrix::from_rows(&perm.iter().map(|i| m.row(*i).to_vec()).collect::<Vec<_>>())
                .unwrap()
        };
        let v = global_loss(
            &GlobalReps::new(permute(&gi), permute(&gr)).unwrap(),
            &c,
        )
        .unwrap();
        assert!((v - base).abs() <= 1e-12);

        // common orthogonal rotation of every representation argument
        let q = random_rotation(&mut rng, 4);
        let rot = |m: &Matrix| m.matmul_nt(&q).unwrap();
        let v = global_loss(&GlobalReps::new(rot(&gi), rot(&gr)).unwrap(), &c).unwrap();
        assert!((v - base).abs() <= 1e-9);

        let zs = RaggedBatch::new(
            Modality::Image,
            (0..n).map(|_| unit_rows(&mut rng, 3, 4)).collect(),
        )
        .unwrap();
        let u_base = uni_gauss_image(&zs, 0.3).unwrap();
        let zs_rot = zs.map_samples(|m| m.matmul_nt(&q)).unwrap();
        assert!((uni_gauss_image(&zs_rot, 0.3).unwrap() - u_base).abs() <= 1e-9);
    }

    /// Orthogonal matrix via Gram-Schmidt on a random Gaussian square.
    fn random_rotation(rng: &mut impl Rng, d: usize) -> Matrix {
        loop {
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
            for _ in 0..d {
                let mut v: Vec<f64> = (0..d)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                for prev in &rows {
                    let proj = crate::numeric::dot(&v, prev).unwrap();
                    for (x, p) in v.iter_mut().zip(prev) {
                        *x -= proj * p;
                    }
                }
                let n = crate::numeric::norm(&v);
                if n < 1e-6 {
                    continue;
                }
                for x in v.iter_mut() {
                    *x /= n;
                }
                rows.push(v);
            }
            if rows.len() == d {
                return Matrix::from_rows(&rows).unwrap();
            }
        }
    }

    #[test]
    fn tape_losses_match_plain_losses() {
        let mut rng = RngSeed(53).rng();
        let n = 3;
        let k = 4;
        let ms = [2usize, 3, 2];
        let d = 5;
        let gi = unit_rows(&mut rng, n, d);
        let gr = unit_rows(&mut rng, n, d);
        let zs_mats: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, k, d)).collect();
        let zrs_mats: Vec<Matrix> = (0..n).map(|_| unit_rows(&mut rng, k, d)).collect();
        let zr_mats: Vec<Matrix> = ms.iter().map(|m| unit_rows(&mut rng, *m, d)).collect();
        let zsr_mats: Vec<Matrix> = ms.iter().map(|m| unit_rows(&mut rng, *m, d)).collect();
        let p = crate::numeric::softmax_rows(&unit_rows(&mut rng, k, k), 1.0).unwrap();
        let wi: Vec<Vec<f64>> = (0..n).map(|_| vec![0.1, 0.2, 0.3, 0.4]).collect();
        let wr: Vec<Vec<f64>> = ms.iter().map(|m| vec![1.0 / *m as f64; *m]).collect();
        let c = LossConfig { tau: 0.2, tau_prime: 0.4, lambda: 0.3, ..Default::default() };

        let zs = RaggedBatch::new(Modality::Image, zs_mats.clone()).unwrap();
        let zr = RaggedBatch::new(Modality::Report, zr_mats.clone()).unwrap();
        let cross = CrossReps { to_image: zrs_mats.clone(), to_report: zsr_mats.clone() };
        let w = WeightSet::new(wi.clone(), wr.clone(), p.clone(), None, None).unwrap();
        let g = GlobalReps::new(gi.clone(), gr.clone()).unwrap();

        let mut tape = Tape::new();
        let gi_n = tape.constant(gi);
        let gr_n = tape.constant(gr);
        let zs_n: Vec<NodeId> = zs_mats.iter().map(|m| tape.constant(m.clone())).collect();
        let zrs_n: Vec<NodeId> = zrs_mats.iter().map(|m| tape.constant(m.clone())).collect();
        let zr_n: Vec<NodeId> = zr_mats.iter().map(|m| tape.constant(m.clone())).collect();
        let zsr_n: Vec<NodeId> = zsr_mats.iter().map(|m| tape.constant(m.clone())).collect();
        let wi_n: Vec<NodeId> = wi
            .iter()
            .map(|v| tape.constant(Matrix::row_vector(v.clone()).unwrap()))
            .collect();
        let wr_n: Vec<NodeId> = wr
            .iter()
            .map(|v| tape.constant(Matrix::row_vector(v.clone()).unwrap()))
            .collect();

        let tg = tape_global_loss(&mut tape, gi_n, gr_n, &c).unwrap();
        assert!((tape.scalar(tg).unwrap() - global_loss(&g, &c).unwrap()).abs() < 1e-12);

        let tl = tape_local_image_loss(&mut tape, &zs_n, &zrs_n, &wi_n, &p, &c).unwrap();
        assert!(
            (tape.scalar(tl).unwrap() - local_image_loss(&zs, &cross, &w, &c).unwrap()).abs()
                < 1e-12
        );

        let tr = tape_local_report_loss(&mut tape, &zr_n, &zsr_n, &wr_n, &c).unwrap();
        assert!(
            (tape.scalar(tr).unwrap() - local_report_loss(&zr, &cross, &w, &c).unwrap()).abs()
                < 1e-12
        );

        for variant in [UniformityVariant::Gauss, UniformityVariant::Xent] {
            let tu = tape_uniformity(&mut tape, &zs_n, c.tau_prime, variant).unwrap();
            let plain = match variant {
                UniformityVariant::Gauss => uni_gauss_image(&zs, c.tau_prime).unwrap(),
                UniformityVariant::Xent => uni_xent_image(&zs, c.tau_prime).unwrap(),
            };
            assert!((tape.scalar(tu).unwrap() - plain).abs() < 1e-12);
        }
    }
}
