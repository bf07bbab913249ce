//! Dense 64-bit matrices, ragged per-sample batches, and the numerically
//! stable primitives everything downstream is built from.
//!
//! All arithmetic is f64. Iteration order is deterministic everywhere:
//! sample index ascending, then row index ascending, so results are
//! bit-reproducible run to run.

use crate::error::{LabError, Result};

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::Dimension(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Evaluation(
                "matrix contains non-finite values".into(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Internal constructor for values produced by our own finite arithmetic.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(LabError::Dimension("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LabError::Dimension("from_rows: ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// Row vector (1 x n).
    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Matrix::new(1, n, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// The single entry of a 1x1 matrix.
    pub fn scalar(&self) -> Result<f64> {
        if self.rows == 1 && self.cols == 1 {
            Ok(self.data[0])
        } else {
            Err(LabError::Dimension(format!(
                "expected scalar, got {}x{}",
                self.rows, self.cols
            )))
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LabError::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    /// self * other^T.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(LabError::Dimension(format!(
                "matmul_nt {}x{} by {}x{}^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.get(i, k) * other.get(j, k);
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * c).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    fn zip(&self, other: &Matrix, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if !self.same_shape(other) {
            return Err(LabError::Dimension(format!(
                "{}: {}x{} vs {}x{}",
                what, self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| f(*v)).collect())
    }

    /// Euclidean norm over all entries.
    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Which side of the image-report pair a ragged batch holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Report,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "report" => Ok(Modality::Report),
            other => Err(LabError::Parse(format!("unknown modality '{other}'"))),
        }
    }
}

/// Per-sample local representation matrices. Image batches have a fixed
/// number of regions K per sample; report batches have a variable number of
/// sentences M_i >= 1. All samples share the representation dimension D.
#[derive(Debug, Clone, PartialEq)]
pub struct RaggedBatch {
    modality: Modality,
    samples: Vec<Matrix>,
    dim: usize,
}

impl RaggedBatch {
    pub fn new(modality: Modality, samples: Vec<Matrix>) -> Result<Self> {
        if samples.is_empty() {
            return Err(LabError::EmptyBatch("ragged batch with no samples".into()));
        }
        let dim = samples[0].cols();
        for (i, s) in samples.iter().enumerate() {
            if s.cols() != dim {
                return Err(LabError::Dimension(format!(
                    "sample {} has dim {}, expected {}",
                    i,
                    s.cols(),
                    dim
                )));
            }
            if s.rows() == 0 {
                return Err(LabError::EmptyBatch(format!("sample {i} has no rows")));
            }
        }
        if modality == Modality::Image {
            let k = samples[0].rows();
            if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.rows() != k) {
                return Err(LabError::Dimension(format!(
                    "image sample {} has {} regions, expected {}",
                    i,
                    s.rows(),
                    k
                )));
            }
        }
        Ok(RaggedBatch { modality, samples, dim })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Batch size N.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, i: usize) -> &Matrix {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[Matrix] {
        &self.samples
    }

    /// Fixed region count for image batches.
    pub fn fixed_rows(&self) -> Option<usize> {
        match self.modality {
            Modality::Image => Some(self.samples[0].rows()),
            Modality::Report => None,
        }
    }

    /// Apply a matrix-valued map to every sample, preserving modality.
    pub fn map_samples(&self, f: impl Fn(&Matrix) -> Result<Matrix>) -> Result<RaggedBatch> {
        let samples = self.samples.iter().map(f).collect::<Result<Vec<_>>>()?;
        RaggedBatch::new(self.modality, samples)
    }
}

/// Seed for all randomness in the laboratory. Identical seed plus identical
/// call sequence reproduces identical draws bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Derive an independent stream, e.g. one per sweep cell.
    pub fn derive(&self, offset: u64) -> RngSeed {
        RngSeed(self.0.wrapping_add(offset).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ offset)
    }

    pub fn rng(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(self.0)
    }
}

// ---------------------------------------------------------------------------
// primitive operations
// ---------------------------------------------------------------------------

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LabError::Dimension(format!(
            "dot: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum())
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine built from precomputed parts, clamped to [-1, 1]: rounding can
/// exceed the bounds by ~1e-16 and downstream exp/log must stay safe.
#[inline]
pub(crate) fn cos_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// Cosine similarity. Bit-identical vectors short-circuit to exactly 1.0 so
/// that collapsed configurations hit the 1/tau' bound exactly.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LabError::Dimension(format!(
            "cosine: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a == b {
        if norm(a) == 0.0 {
            return Err(LabError::Degenerate("cosine of zero vector".into()));
        }
        return Ok(1.0);
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(LabError::Degenerate("cosine of zero vector".into()));
    }
    Ok(cos_from_parts(dot(a, b)?, na, nb))
}

/// Pairwise cosines between the rows of `a` (n x d) and `b` (m x d),
/// as an n x m matrix. Entry (i, j) is computed exactly as `cosine` would.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(LabError::Dimension(format!(
            "cosine_matrix: dims {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let na: Vec<f64> = (0..a.rows()).map(|i| a.row_norm(i)).collect();
    let nb: Vec<f64> = (0..b.rows()).map(|j| b.row_norm(j)).collect();
    if let Some(i) = na.iter().position(|v| *v == 0.0) {
        return Err(LabError::Degenerate(format!("zero row {i} in cosine_matrix lhs")));
    }
    if let Some(j) = nb.iter().position(|v| *v == 0.0) {
        return Err(LabError::Degenerate(format!("zero row {j} in cosine_matrix rhs")));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ra = a.row(i);
        for j in 0..b.rows() {
            let rb = b.row(j);
            let c = if ra == rb {
                1.0
            } else {
                cos_from_parts(dot(ra, rb)?, na[i], nb[j])
            };
            out.set(i, j, c);
        }
    }
    Ok(out)
}

/// log sum exp with max shift; no overflow for |v_j| <= 1e300.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(LabError::Dimension("logsumexp of empty vector".into()));
    }
    let m = v.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

/// Row-wise softmax of `m / temperature`. Each output row is nonnegative and
/// sums to 1 within 1e-12.
pub fn softmax_rows(m: &Matrix, temperature: f64) -> Result<Matrix> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(LabError::Config(format!(
            "softmax temperature must be > 0, got {temperature}"
        )));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let mut sum = 0.0;
        let mut tmp = vec![0.0; m.cols()];
        for (j, x) in row.iter().enumerate() {
            let e = ((x - mx) / temperature).exp();
            tmp[j] = e;
            sum += e;
        }
        for (j, e) in tmp.iter().enumerate() {
            out.set(i, j, e / sum);
        }
    }
    Ok(out)
}

/// Rescale every row to unit Euclidean norm.
pub fn normalize_rows_unit(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = m.row_norm(i);
        if n == 0.0 {
            return Err(LabError::Degenerate(format!("zero row {i} cannot be normalized")));
        }
        for j in 0..m.cols() {
            out.set(i, j, m.get(i, j) / n);
        }
    }
    Ok(out)
}
