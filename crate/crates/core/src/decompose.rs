//! Alignment / distribution-prior decomposition of each contrastive loss,
//! the xi-weight rewrites of the alignment components under the simplifying
//! assumptions (weighted-sum globals, attention-sum cross representations,
//! dot products instead of cosines), and the identities relating them.
//!
//! `total` in a [`DecomposedLoss`] is always computed through the composed
//! loss function, not as align + dist, so the recomposition identity is a
//! real check rather than a tautology.

use crate::error::{LabError, Result};
use crate::loss::{
    global_loss, local_image_loss, local_report_loss, CrossReps, GlobalReps, LossConfig,
    WeightSet,
};
use crate::numeric::{cosine_matrix, dot, logsumexp, Matrix, RaggedBatch};

/// One contrastive loss split into its attraction and repulsion parts.
#[derive(Debug, Clone, Copy)]
pub struct DecomposedLoss {
    pub align: f64,
    pub dist: f64,
    pub total: f64,
}

impl DecomposedLoss {
    /// |total - (align + dist)| relative to max(1, |total|).
    pub fn recomposition_error(&self) -> f64 {
        (self.total - (self.align + self.dist)).abs() / self.total.abs().max(1.0)
    }
}

/// Whether similarities are cosines (the real losses) or raw dot products
/// (the rewriting assumption, exact when rows are unit and sums are not).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Semantics {
    Cosine,
    Dot,
}

fn similarity(a: &[f64], b: &[f64], sem: Semantics) -> Result<f64> {
    match sem {
        Semantics::Cosine => crate::numeric::cosine(a, b),
        Semantics::Dot => dot(a, b),
    }
}

/// Decompose the global NTXent loss. align = -(1/(tau N)) sum_i cos_ii;
/// dist carries the lambda-weighted batch logsumexp terms.
pub fn decompose_global(g: &GlobalReps, c: &LossConfig) -> Result<DecomposedLoss> {
    c.validate()?;
    let n = g.len();
    if n == 0 {
        return Err(LabError::EmptyBatch("decompose_global of empty batch".into()));
    }
    let inv_tau = 1.0 / c.tau;
    let x_sr = cosine_matrix(&g.image, &g.report)?.scale(inv_tau);
    let x_rs = cosine_matrix(&g.report, &g.image)?.scale(inv_tau);
    let mut align = 0.0;
    let mut dist = 0.0;
    for i in 0..n {
        align -= x_sr.get(i, i);
        dist += c.lambda * logsumexp(x_sr.row(i))? + (1.0 - c.lambda) * logsumexp(x_rs.row(i))?;
    }
    align /= n as f64;
    dist /= n as f64;
    let total = global_loss(g, c)?;
    Ok(DecomposedLoss { align, dist, total })
}

/// Symmetrized local-image alignment weights
/// (w_k p_{k,l} + w_l p_{l,k}) / 2 for one sample; shared by the
/// decomposition and the xi-weight rewrite.
pub fn symmetrized_image_weights(weights: &[f64], positiveness: &Matrix) -> Matrix {
    let k = positiveness.rows();
    let mut out = Matrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let v = (weights[a] * positiveness.get(a, b) + weights[b] * positiveness.get(b, a))
                / 2.0;
            out.set(a, b, v);
        }
    }
    out
}

/// Decompose the local image loss into the symmetrized-weight alignment and
/// the weighted per-anchor logsumexp prior.
pub fn decompose_local_image(
    image_locals: &RaggedBatch,
    cross_to_image: &CrossReps,
    w: &WeightSet,
    c: &LossConfig,
) -> Result<DecomposedLoss> {
    c.validate()?;
    let total = local_image_loss(image_locals, cross_to_image, w, c)?;
    let n = image_locals.len();
    let k = image_locals.fixed_rows().unwrap();
    let inv_tau = 1.0 / c.tau_prime;
    let mut align = 0.0;
    let mut dist = 0.0;
    for i in 0..n {
        let zs = image_locals.sample(i);
        let zrs = &cross_to_image.to_image[i];
        let x1 = cosine_matrix(zs, zrs)?.scale(inv_tau);
        let x2 = cosine_matrix(zrs, zs)?.scale(inv_tau);
        let sym = symmetrized_image_weights(&w.image_weights[i], &w.positiveness);
        for kk in 0..k {
            for l in 0..k {
                align -= sym.get(kk, l) * x1.get(kk, l);
            }
            let wk = w.image_weights[i][kk];
            dist += wk * (logsumexp(x1.row(kk))? + logsumexp(x2.row(kk))?) / 2.0;
        }
    }
    align /= n as f64;
    dist /= n as f64;
    Ok(DecomposedLoss { align, dist, total })
}

/// Decompose the local report loss (diagonal targets, no positiveness).
pub fn decompose_local_report(
    report_locals: &RaggedBatch,
    cross_to_report: &CrossReps,
    w: &WeightSet,
    c: &LossConfig,
) -> Result<DecomposedLoss> {
    c.validate()?;
    let total = local_report_loss(report_locals, cross_to_report, w, c)?;
    let n = report_locals.len();
    let inv_tau = 1.0 / c.tau_prime;
    let mut align = 0.0;
    let mut dist = 0.0;
    for i in 0..n {
        let zr = report_locals.sample(i);
        let zsr = &cross_to_report.to_report[i];
        let x1 = cosine_matrix(zr, zsr)?.scale(inv_tau);
        let x2 = cosine_matrix(zsr, zr)?.scale(inv_tau);
        for m in 0..zr.rows() {
            let wm = w.report_weights[i][m];
            align -= wm * x1.get(m, m);
            dist += wm * (logsumexp(x1.row(m))? + logsumexp(x2.row(m))?) / 2.0;
        }
    }
    align /= n as f64;
    dist /= n as f64;
    Ok(DecomposedLoss { align, dist, total })
}

// ---------------------------------------------------------------------------
// xi-weight rewrites
// ---------------------------------------------------------------------------

/// Which alignment component a set of xi weights rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XiVariant {
    Global,
    LocalImage,
    LocalReport,
}

/// Per-sample K x M_i matrices of pairwise region-sentence weights under
/// which every alignment component is one weighted sum of dot products.
#[derive(Debug, Clone)]
pub struct XiWeights {
    pub variant: XiVariant,
    pub per_sample: Vec<Matrix>,
}

/// Explicit xi matrices for the requested variant.
///
/// Global: xi_{k,m} = w^S_k w^R_m / tau (rank-1 by construction).
/// Local image: xi_{k,m} = sum_l (w^S_k p_{k,l} + w^S_l p_{l,k})
///              alpha^(R->S)_{l,m} / (2 tau').
/// Local report: xi_{k,m} = w^R_m alpha^(S->R)_{m,k} / tau'.
pub fn xi_weights(variant: XiVariant, w: &WeightSet, c: &LossConfig) -> Result<XiWeights> {
    c.validate()?;
    let n = w.image_weights.len();
    if w.report_weights.len() != n {
        return Err(LabError::Dimension("weight batch sizes differ".into()));
    }
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        let wk = &w.image_weights[i];
        let wm = &w.report_weights[i];
        let k = wk.len();
        let m_i = wm.len();
        let xi = match variant {
            XiVariant::Global => {
                let mut xi = Matrix::zeros(k, m_i);
                for a in 0..k {
                    for b in 0..m_i {
                        xi.set(a, b, wk[a] * wm[b] / c.tau);
                    }
                }
                xi
            }
            XiVariant::LocalImage => {
                let alpha = &w.attn_to_image()?[i];
                if alpha.rows() != k || alpha.cols() != m_i {
                    return Err(LabError::Dimension(format!(
                        "attn_to_image sample {i} is {}x{}, expected {k}x{m_i}",
                        alpha.rows(),
                        alpha.cols()
                    )));
                }
                let sym = symmetrized_image_weights(wk, &w.positiveness);
                // sym already carries the /2; the matrix product sums over l
                sym.scale(2.0).matmul(alpha)?.scale(1.0 / (2.0 * c.tau_prime))
            }
            XiVariant::LocalReport => {
                let alpha = &w.attn_to_report()?[i];
                if alpha.rows() != m_i || alpha.cols() != k {
                    return Err(LabError::Dimension(format!(
                        "attn_to_report sample {i} is {}x{}, expected {m_i}x{k}",
                        alpha.rows(),
                        alpha.cols()
                    )));
                }
                let mut xi = Matrix::zeros(k, m_i);
                for b in 0..m_i {
                    for a in 0..k {
                        xi.set(a, b, wm[b] * alpha.get(b, a) / c.tau_prime);
                    }
                }
                xi
            }
        };
        per_sample.push(xi);
    }
    Ok(XiWeights { variant, per_sample })
}

/// The rewritten alignment: -(1/N) sum_i sum_k sum_m xi_{i,k,m}
/// dot(z^S_{i,k}, z^R_{i,m}).
pub fn align_rewritten(
    image_locals: &RaggedBatch,
    report_locals: &RaggedBatch,
    xi: &XiWeights,
) -> Result<f64> {
    let n = image_locals.len();
    if report_locals.len() != n || xi.per_sample.len() != n {
        return Err(LabError::Dimension("align_rewritten batch size mismatch".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let zs = image_locals.sample(i);
        let zr = report_locals.sample(i);
        let xim = &xi.per_sample[i];
        if xim.rows() != zs.rows() || xim.cols() != zr.rows() {
            return Err(LabError::Dimension(format!(
                "xi sample {i} is {}x{}, expected {}x{}",
                xim.rows(),
                xim.cols(),
                zs.rows(),
                zr.rows()
            )));
        }
        for k in 0..zs.rows() {
            for m in 0..zr.rows() {
                total -= xim.get(k, m) * dot(zs.row(k), zr.row(m))?;
            }
        }
    }
    Ok(total / n as f64)
}

/// Pooled representations per the weighted-sum assumption:
/// zbar^S_i = sum_k w^S_k z^S_k and likewise for reports.
pub fn pooled_from_weights(
    image_locals: &RaggedBatch,
    report_locals: &RaggedBatch,
    w: &WeightSet,
) -> Result<GlobalReps> {
    let weighted_sum = |locals: &Matrix, weights: &[f64]| -> Result<Vec<f64>> {
        if weights.len() != locals.rows() {
            return Err(LabError::Dimension("pooling weight length mismatch".into()));
        }
        let mut acc = vec![0.0; locals.cols()];
        for (k, wk) in weights.iter().enumerate() {
            for (j, a) in acc.iter_mut().enumerate() {
                *a += wk * locals.get(k, j);
            }
        }
        Ok(acc)
    };
    let mut image_rows = Vec::with_capacity(image_locals.len());
    let mut report_rows = Vec::with_capacity(report_locals.len());
    for i in 0..image_locals.len() {
        image_rows.push(weighted_sum(image_locals.sample(i), &w.image_weights[i])?);
        report_rows.push(weighted_sum(report_locals.sample(i), &w.report_weights[i])?);
    }
    GlobalReps::new(Matrix::from_rows(&image_rows)?, Matrix::from_rows(&report_rows)?)
}

/// Cross-modality representations per the attention-sum assumption:
/// z^(R->S)_k = sum_m alpha^(R->S)_{k,m} z^R_m and the mirrored direction.
pub fn cross_from_attention(
    image_locals: &RaggedBatch,
    report_locals: &RaggedBatch,
    w: &WeightSet,
) -> Result<CrossReps> {
    let a_ri = w.attn_to_image()?;
    let a_ir = w.attn_to_report()?;
    let mut to_image = Vec::with_capacity(image_locals.len());
    let mut to_report = Vec::with_capacity(report_locals.len());
    for i in 0..image_locals.len() {
        to_image.push(a_ri[i].matmul(report_locals.sample(i))?);
        to_report.push(a_ir[i].matmul(image_locals.sample(i))?);
    }
    Ok(CrossReps { to_image, to_report })
}

/// Directly-expanded global alignment under the chosen semantics, with
/// pooled representations built per the weighted-sum assumption.
pub fn global_align_direct(
    image_locals: &RaggedBatch,
    report_locals: &RaggedBatch,
    w: &WeightSet,
    c: &LossConfig,
    sem: Semantics,
) -> Result<f64> {
    let pooled = pooled_from_weights(image_locals, report_locals, w)?;
    let n = pooled.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc -= similarity(pooled.image.row(i), pooled.report.row(i), sem)?;
    }
    Ok(acc / (c.tau * n as f64))
}

/// Directly-expanded local image alignment with cross representations built
/// per the attention-sum assumption.
pub fn local_image_align_direct(
    image_locals: &RaggedBatch,
    report_locals: &RaggedBatch,
    w: &WeightSet,
    c: &LossConfig,
    sem: Semantics,
) -> Result<f64> {
    let cross = cross_from_attention(image_locals, report_locals, w)?;
    let n = image_locals.len();
    let mut acc = 0.0;
    for i in 0..n {
        let zs = image_locals.sample(i);
        let zrs = &cross.to_image[i];
        let sym = symmetrized_image_weights(&w.image_weights[i], &w.positiveness);
        for k in 0..zs.rows() {
            for l in 0..zrs.rows() {
                acc -= sym.get(k, l) * similarity(zs.row(k), zrs.row(l), sem)?;
            }
        }
    }
    Ok(acc / (c.tau_prime * n as f64))
}

/// Directly-expanded local report alignment.
pub fn local_report_align_direct(
    image_locals: &RaggedBatch,
    report_locals: &RaggedBatch,
    w: &WeightSet,
    c: &LossConfig,
    sem: Semantics,
) -> Result<f64> {
    let cross = cross_from_attention(image_locals, report_locals, w)?;
    let n = report_locals.len();
    let mut acc = 0.0;
    for i in 0..n {
        let zr = report_locals.sample(i);
        let zsr = &cross.to_report[i];
        for m in 0..zr.rows() {
            acc -= w.report_weights[i][m] * similarity(zr.row(m), zsr.row(m), sem)?;
        }
    }
    Ok(acc / (c.tau_prime * n as f64))
}

// ---------------------------------------------------------------------------
// identity checks
// ---------------------------------------------------------------------------

/// Result of the constant-local-representation equivalence check: when the
/// locals of each modality are constant within each sample, the weights are
/// normalized, and tau = tau', the three rewritten alignments coincide.
#[derive(Debug, Clone)]
pub struct ConstantLocalReport {
    pub global_align: f64,
    pub local_image_align: f64,
    pub local_report_align: f64,
    pub max_pairwise_diff: f64,
    pub pass: bool,
}

const CONSTANT_LOCAL_TOL: f64 = 1e-10;

fn require_constant_rows(batch: &RaggedBatch, what: &str) -> Result<()> {
    for (i, s) in batch.samples().iter().enumerate() {
        let first = s.row(0);
        for r in 1..s.rows() {
            let diff = s
                .row(r)
                .iter()
                .zip(first)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            if diff > 1e-12 {
                return Err(LabError::Precondition(format!(
                    "{what} sample {i} rows are not constant (max deviation {diff:.3e})"
                )));
            }
        }
    }
    Ok(())
}

/// Verify the constant-local equivalence under its stated preconditions.
/// Violated preconditions are reported as errors, never silently fixed.
pub fn constant_local_equivalence_check(
    image_locals: &RaggedBatch,
    report_locals: &RaggedBatch,
    w: &WeightSet,
    c: &LossConfig,
) -> Result<ConstantLocalReport> {
    require_constant_rows(image_locals, "image locals")?;
    require_constant_rows(report_locals, "report locals")?;
    if !w.is_normalized() {
        return Err(LabError::Precondition(
            "weights must be in normalized mode (w and p rows sum to 1)".into(),
        ));
    }
    if c.tau != c.tau_prime {
        return Err(LabError::Precondition(format!(
            "tau ({}) must equal tau_prime ({})",
            c.tau, c.tau_prime
        )));
    }
    let values = rewritten_alignments(image_locals, report_locals, w, c)?;
    let [g, li, lr] = values;
    let max_pairwise_diff = (g - li).abs().max((g - lr).abs()).max((li - lr).abs());
    Ok(ConstantLocalReport {
        global_align: g,
        local_image_align: li,
        local_report_align: lr,
        max_pairwise_diff,
        pass: max_pairwise_diff <= CONSTANT_LOCAL_TOL,
    })
}

/// The three rewritten alignment values (global, local image, local report)
/// on the same batch, dot semantics.
pub fn rewritten_alignments(
    image_locals: &RaggedBatch,
    report_locals: &RaggedBatch,
    w: &WeightSet,
    c: &LossConfig,
) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (slot, variant) in [
        (0, XiVariant::Global),
        (1, XiVariant::LocalImage),
        (2, XiVariant::LocalReport),
    ] {
        let xi = xi_weights(variant, w, c)?;
        out[slot] = align_rewritten(image_locals, report_locals, &xi)?;
    }
    Ok(out)
}

/// Gaussian-potential offset: on unit rows the distance form of the
/// per-sample uniformity equals the cosine form minus exactly 1/tau'.
/// Returns (distance form, cosine form).
pub fn gauss_offset_identity_check(
    batch: &RaggedBatch,
    tau_prime: f64,
) -> Result<(f64, f64)> {
    if !(tau_prime > 0.0) {
        return Err(LabError::Config(format!("tau_prime must be > 0, got {tau_prime}")));
    }
    for (i, s) in batch.samples().iter().enumerate() {
        for r in 0..s.rows() {
            if (s.row_norm(r) - 1.0).abs() > 1e-8 {
                return Err(LabError::Precondition(format!(
                    "sample {i} row {r} has norm {} (must be unit within 1e-8)",
                    s.row_norm(r)
                )));
            }
        }
    }
    let mut dist_total = 0.0;
    for s in batch.samples() {
        let k = s.rows();
        let mut logits = Vec::with_capacity(k * k);
        for a in 0..k {
            for b in 0..k {
                let d2: f64 = s
                    .row(a)
                    .iter()
                    .zip(s.row(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                logits.push(-d2 / (2.0 * tau_prime));
            }
        }
        dist_total += logsumexp(&logits)? - ((k * k) as f64).ln();
    }
    let distance_form = dist_total / batch.len() as f64;
    let cosine_form = crate::loss::uni_gauss(batch, tau_prime)?;
    Ok((distance_form, cosine_form))
}

/// Max absolute residual of reconstructing a matrix from its pivot row and
/// column (exact zero for outer products; no numerical rank threshold).
pub fn rank_one_residual(m: &Matrix) -> f64 {
    let mut pivot = (0, 0);
    let mut best = 0.0_f64;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if m.get(i, j).abs() > best {
                best = m.get(i, j).abs();
                pivot = (i, j);
            }
        }
    }
    if best == 0.0 {
        return 0.0;
    }
    let (pi, pj) = pivot;
    let mut residual = 0.0_f64;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let rec = m.get(i, pj) * m.get(pi, j) / m.get(pi, pj);
            residual = residual.max((m.get(i, j) - rec).abs());
        }
    }
    residual
}
