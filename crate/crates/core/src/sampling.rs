//! Seeded random batches, weights, and rotations for identity checks and
//! property tests.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::loss::{CrossReps, GlobalReps, WeightSet};
use crate::numeric::{dot, norm, normalize_rows_unit, Matrix, Modality, RaggedBatch};

/// Shapes of one random configuration: N samples, K regions, M_i sentences,
/// representation dimension D.
#[derive(Debug, Clone)]
pub struct BatchDims {
    pub n: usize,
    pub k: usize,
    pub m: Vec<usize>,
    pub d: usize,
}

pub fn random_dims(rng: &mut impl Rng) -> BatchDims {
    let n = rng.gen_range(1..=4);
    let k = rng.gen_range(1..=6);
    let m = (0..n).map(|_| rng.gen_range(1..=5)).collect();
    let d = rng.gen_range(2..=8);
    BatchDims { n, k, m, d }
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn unit_row_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    loop {
        let m = gaussian_matrix(rng, rows, cols);
        if (0..rows).all(|i| m.row_norm(i) > 1e-6) {
            return normalize_rows_unit(&m).unwrap();
        }
    }
}

pub fn unit_image_batch(rng: &mut impl Rng, dims: &BatchDims) -> RaggedBatch {
    let samples = (0..dims.n)
        .map(|_| unit_row_matrix(rng, dims.k, dims.d))
        .collect();
    RaggedBatch::new(Modality::Image, samples).unwrap()
}

pub fn unit_report_batch(rng: &mut impl Rng, dims: &BatchDims) -> RaggedBatch {
    let samples = dims
        .m
        .iter()
        .map(|m| unit_row_matrix(rng, *m, dims.d))
        .collect();
    RaggedBatch::new(Modality::Report, samples).unwrap()
}

/// Per-sample-constant batches: every row of sample i equals one unit vector.
pub fn constant_unit_image_batch(rng: &mut impl Rng, dims: &BatchDims) -> RaggedBatch {
    let samples = (0..dims.n)
        .map(|_| {
            let row = unit_row_matrix(rng, 1, dims.d);
            Matrix::from_rows(&vec![row.row(0).to_vec(); dims.k]).unwrap()
        })
        .collect();
    RaggedBatch::new(Modality::Image, samples).unwrap()
}

pub fn constant_unit_report_batch(rng: &mut impl Rng, dims: &BatchDims) -> RaggedBatch {
    let samples = dims
        .m
        .iter()
        .map(|m| {
            let row = unit_row_matrix(rng, 1, dims.d);
            Matrix::from_rows(&vec![row.row(0).to_vec(); *m]).unwrap()
        })
        .collect();
    RaggedBatch::new(Modality::Report, samples).unwrap()
}

pub fn random_global_reps(rng: &mut impl Rng, n: usize, d: usize) -> GlobalReps {
    GlobalReps::new(unit_row_matrix(rng, n, d), unit_row_matrix(rng, n, d)).unwrap()
}

pub fn random_cross_reps(rng: &mut impl Rng, dims: &BatchDims) -> CrossReps {
    CrossReps {
        to_image: (0..dims.n)
            .map(|_| unit_row_matrix(rng, dims.k, dims.d))
            .collect(),
        to_report: dims
            .m
            .iter()
            .map(|m| unit_row_matrix(rng, *m, dims.d))
            .collect(),
    }
}

fn positive_weights(rng: &mut impl Rng, len: usize, normalized: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| rng.gen_range(0.1..1.0)).collect();
    if normalized {
        let s: f64 = v.iter().sum();
        for x in v.iter_mut() {
            *x /= s;
        }
    }
    v
}

/// Random positive matrix with rows divided by their sums.
pub fn row_stochastic(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let row = positive_weights(rng, cols, true);
        for (j, v) in row.iter().enumerate() {
            m.set(i, j, *v);
        }
    }
    m
}

/// Random weights with row-stochastic attention in both directions and a
/// row-stochastic positiveness matrix. `normalized` additionally makes each
/// weight vector sum to 1 (the spec's "normalized" mode).
pub fn random_weight_set(rng: &mut impl Rng, dims: &BatchDims, normalized: bool) -> WeightSet {
    let image_weights = (0..dims.n)
        .map(|_| positive_weights(rng, dims.k, normalized))
        .collect();
    let report_weights = dims
        .m
        .iter()
        .map(|m| positive_weights(rng, *m, normalized))
        .collect();
    let positiveness = row_stochastic(rng, dims.k, dims.k);
    let attn_to_image = dims
        .m
        .iter()
        .map(|m| row_stochastic(rng, dims.k, *m))
        .collect();
    let attn_to_report = dims
        .m
        .iter()
        .map(|m| row_stochastic(rng, *m, dims.k))
        .collect();
    WeightSet::new(
        image_weights,
        report_weights,
        positiveness,
        Some(attn_to_image),
        Some(attn_to_report),
    )
    .unwrap()
}

/// Orthogonal matrix via Gram-Schmidt on random Gaussian rows.
pub fn random_rotation(rng: &mut impl Rng, d: usize) -> Matrix {
    loop {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
        'outer: while rows.len() < d {
            let mut v: Vec<f64> = (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            for prev in &rows {
                let proj = dot(&v, prev).unwrap();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= proj * p;
                }
            }
            let n = norm(&v);
            if n < 1e-6 {
                break 'outer;
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
