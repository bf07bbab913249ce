//! Synthetic paired-modality data and small trainable encoders: local
//! encoders, attention pooling, cross-modality attention, and projection
//! heads with optional sharing, at desk scale.
//!
//! The dataset generator plants M_i latent topics per sample; sentences are
//! noisy topic embeddings and image regions are noisy topic embeddings
//! assigned by a random spatial partition of the grid, so the ground-truth
//! region-sentence correspondence is known.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{NodeId, Tape};
use crate::error::{LabError, Result};
use crate::format;
use crate::loss::{CrossReps, GlobalReps, WeightSet};
use crate::numeric::{Matrix, Modality, RaggedBatch, RngSeed};
use crate::sampling::random_rotation;

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub n_total: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Inclusive sentence-count range.
    pub m_min: usize,
    pub m_max: usize,
    /// Topic dimension.
    pub d_latent: usize,
    /// Raw feature dimension per region/sentence.
    pub d_input: usize,
    /// Within-sample topic dispersion: topics are drawn around a per-sample
    /// document vector with this relative spread, so sentences of one sample
    /// are correlated (0 collapses them onto the document vector).
    pub topic_spread: f64,
    pub noise_sigma: f64,
    pub seed: RngSeed,
}

impl SyntheticDatasetSpec {
    pub fn k(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_total == 0 {
            return Err(LabError::Config("n_total must be >= 1".into()));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(LabError::Config("grid dimensions must be >= 1".into()));
        }
        if self.m_min < 1 || self.m_max < self.m_min {
            return Err(LabError::Config(format!(
                "need 1 <= m_min <= m_max, got [{}, {}]",
                self.m_min, self.m_max
            )));
        }
        if self.m_max > self.k() {
            return Err(LabError::Config(format!(
                "m_max ({}) exceeds K ({}): every topic needs at least one region",
                self.m_max,
                self.k()
            )));
        }
        if self.d_latent == 0 || self.d_input == 0 {
            return Err(LabError::Config("dimensions must be >= 1".into()));
        }
        if self.d_latent > self.d_input {
            return Err(LabError::Config(format!(
                "d_latent ({}) must not exceed d_input ({})",
                self.d_latent, self.d_input
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(LabError::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.topic_spread < 0.0 || !self.topic_spread.is_finite() {
            return Err(LabError::Config(format!(
                "topic_spread must be >= 0, got {}",
                self.topic_spread
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    /// K x d_input region features.
    pub regions: Matrix,
    /// M_i x d_input sentence features.
    pub sentences: Matrix,
    /// Ground truth: which sentence (topic) each region was drawn from.
    pub region_topics: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticDatasetSpec,
    pub samples: Vec<SyntheticSample>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Vec<(&Matrix, &Matrix)> {
        indices
            .iter()
            .map(|i| (&self.samples[*i].regions, &self.samples[*i].sentences))
            .collect()
    }
}

/// Sorted cut points splitting 0..k into `parts` nonempty contiguous ranges.
fn random_partition(rng: &mut impl Rng, k: usize, parts: usize) -> Vec<usize> {
    debug_assert!(parts >= 1 && parts <= k);
    let mut cuts: Vec<usize> = Vec::with_capacity(parts - 1);
    while cuts.len() < parts - 1 {
        let c = rng.gen_range(1..k);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    let mut assignment = vec![0usize; k];
    let mut topic = 0;
    for (cell, slot) in assignment.iter_mut().enumerate() {
        if topic < cuts.len() && cell >= cuts[topic] {
            topic += 1;
        }
        *slot = topic;
    }
    assignment
}

pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = spec.seed.rng();
    let k = spec.k();
    // topics live in an orthonormal d_latent-dimensional subspace of the
    // input space; identity when the dimensions coincide
    let embedding: Option<Matrix> = if spec.d_latent == spec.d_input {
        None
    } else {
        let q = random_rotation(&mut rng, spec.d_input);
        let rows: Vec<Vec<f64>> = (0..spec.d_latent).map(|i| q.row(i).to_vec()).collect();
        Some(Matrix::from_rows(&rows)?)
    };
    let embed = |topic: &[f64]| -> Vec<f64> {
        match &embedding {
            None => topic.to_vec(),
            Some(e) => {
                let mut out = vec![0.0; e.cols()];
                for (t, row) in topic.iter().zip(0..e.rows()) {
                    for (o, v) in out.iter_mut().zip(e.row(row)) {
                        *o += t * v;
                    }
                }
                out
            }
        }
    };
    let mut samples = Vec::with_capacity(spec.n_total);
    for _ in 0..spec.n_total {
        let m_i = rng.gen_range(spec.m_min..=spec.m_max);
        let document: Vec<f64> = (0..spec.d_latent)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let topics: Vec<Vec<f64>> = (0..m_i)
            .map(|_| {
                document
                    .iter()
                    .map(|d| d + spec.topic_spread * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut sentences = Vec::with_capacity(m_i);
        for t in &topics {
            let mut row = embed(t);
            for v in row.iter_mut() {
                *v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            sentences.push(row);
        }
        let region_topics = random_partition(&mut rng, k, m_i);
        let mut regions = Vec::with_capacity(k);
        for topic_idx in &region_topics {
            let mut row = embed(&topics[*topic_idx]);
            for v in row.iter_mut() {
                *v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            regions.push(row);
        }
        samples.push(SyntheticSample {
            regions: Matrix::from_rows(&regions)?,
            sentences: Matrix::from_rows(&sentences)?,
            region_topics,
        });
    }
    Ok(SyntheticDataset { spec: spec.clone(), samples })
}

// ---------------------------------------------------------------------------
// plain building blocks
// ---------------------------------------------------------------------------

/// Attention pooling: weights = softmax(locals . query), output is the
/// weight-weighted row sum. Returns (pooled vector, weights).
pub fn attention_pool(locals: &Matrix, query: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if locals.rows() == 0 {
        return Err(LabError::Dimension("attention_pool of empty input".into()));
    }
    if locals.cols() != query.len() {
        return Err(LabError::Dimension(format!(
            "attention_pool: query length {} vs dim {}",
            query.len(),
            locals.cols()
        )));
    }
    let scores: Vec<f64> = (0..locals.rows())
        .map(|i| crate::numeric::dot(locals.row(i), query).unwrap())
        .collect();
    let weights = crate::numeric::softmax_rows(&Matrix::row_vector(scores)?, 1.0)?;
    let weights = weights.row(0).to_vec();
    let mut pooled = vec![0.0; locals.cols()];
    for (i, w) in weights.iter().enumerate() {
        for (p, v) in pooled.iter_mut().zip(locals.row(i)) {
            *p += w * v;
        }
    }
    Ok((pooled, weights))
}

/// Learned projections of a cross-attention direction (full mode).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnProj {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl AttnProj {
    pub fn identity(d: usize) -> Self {
        let mut eye = Matrix::zeros(d, d);
        for i in 0..d {
            eye.set(i, i, 1.0);
        }
        AttnProj { wq: eye.clone(), wk: eye.clone(), wv: eye }
    }
}

/// Simplified cross attention: alpha = softmax_rows(queries keys^T /
/// tau_attn), outputs = alpha keys_values. Returns (outputs, alpha).
pub fn cross_attention(
    queries: &Matrix,
    keys_values: &Matrix,
    tau_attn: f64,
) -> Result<(Matrix, Matrix)> {
    let scores = queries.matmul_nt(keys_values)?;
    let alpha = crate::numeric::softmax_rows(&scores, tau_attn)?;
    let outputs = alpha.matmul(keys_values)?;
    Ok((outputs, alpha))
}

/// Full cross attention with learned linear projections; identity
/// projections reproduce the simplified mode.
pub fn cross_attention_full(
    queries: &Matrix,
    keys_values: &Matrix,
    proj: &AttnProj,
    tau_attn: f64,
) -> Result<(Matrix, Matrix)> {
    let q = queries.matmul_nt(&proj.wq)?;
    let k = keys_values.matmul_nt(&proj.wk)?;
    let v = keys_values.matmul_nt(&proj.wv)?;
    let scores = q.matmul_nt(&k)?;
    let alpha = crate::numeric::softmax_rows(&scores, tau_attn)?;
    let outputs = alpha.matmul(&v)?;
    Ok((outputs, alpha))
}

/// Spatial positiveness over an H x W grid: Gaussian kernel of the
/// Euclidean grid distance, rows normalized to sum to 1.
pub fn positiveness_matrix(h: usize, w: usize, bandwidth: f64) -> Result<Matrix> {
    if h == 0 || w == 0 {
        return Err(LabError::Config("grid dimensions must be >= 1".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(LabError::Config(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    let k = h * w;
    let coord = |idx: usize| ((idx / w) as f64, (idx % w) as f64);
    let mut m = Matrix::zeros(k, k);
    for a in 0..k {
        let (ra, ca) = coord(a);
        let mut sum = 0.0;
        for b in 0..k {
            let (rb, cb) = coord(b);
            let d2 = (ra - rb) * (ra - rb) + (ca - cb) * (ca - cb);
            let v = (-d2 / (2.0 * bandwidth * bandwidth)).exp();
            m.set(a, b, v);
            sum += v;
        }
        for b in 0..k {
            m.set(a, b, m.get(a, b) / sum);
        }
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// encoder parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub d_input: usize,
    pub d_hidden: usize,
    pub d_rep: usize,
}

/// Projection heads per modality; shared mode uses one head for both local
/// and global representations of a modality.
#[derive(Debug, Clone, PartialEq)]
pub enum ProjectionHeads {
    Shared { image: Matrix, report: Matrix },
    Separate {
        image_local: Matrix,
        image_global: Matrix,
        report_local: Matrix,
        report_global: Matrix,
    },
}

impl ProjectionHeads {
    pub fn is_shared(&self) -> bool {
        matches!(self, ProjectionHeads::Shared { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnParams {
    pub to_image: AttnProj,
    pub to_report: AttnProj,
}

/// All trainable parameters of the two-modality encoder: a linear-tanh-linear
/// encoder per modality, an attention-pooling query per modality, projection
/// heads, and (in full cross-attention mode) the attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    /// d_hidden x d_input
    pub enc_image_l1: Matrix,
    /// d_rep x d_hidden
    pub enc_image_l2: Matrix,
    pub enc_report_l1: Matrix,
    pub enc_report_l2: Matrix,
    /// d_rep x 1
    pub query_image: Matrix,
    pub query_report: Matrix,
    pub heads: ProjectionHeads,
    /// Some(..) switches cross attention to full (projected) mode.
    pub cross_attn: Option<CrossAttnParams>,
}

fn init_linear(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let scale = 1.0 / (cols as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_raw(rows, cols, data)
}

impl EncoderParams {
    pub fn init(dims: EncoderDims, shared_heads: bool, full_attn: bool, seed: RngSeed) -> Self {
        let mut rng = seed.rng();
        let heads = if shared_heads {
            ProjectionHeads::Shared {
                image: init_linear(&mut rng, dims.d_rep, dims.d_rep),
                report: init_linear(&mut rng, dims.d_rep, dims.d_rep),
            }
        } else {
            ProjectionHeads::Separate {
                image_local: init_linear(&mut rng, dims.d_rep, dims.d_rep),
                image_global: init_linear(&mut rng, dims.d_rep, dims.d_rep),
                report_local: init_linear(&mut rng, dims.d_rep, dims.d_rep),
                report_global: init_linear(&mut rng, dims.d_rep, dims.d_rep),
            }
        };
        let cross_attn = full_attn.then(|| CrossAttnParams {
            to_image: AttnProj {
                wq: init_linear(&mut rng, dims.d_rep, dims.d_rep),
                wk: init_linear(&mut rng, dims.d_rep, dims.d_rep),
                wv: init_linear(&mut rng, dims.d_rep, dims.d_rep),
            },
            to_report: AttnProj {
                wq: init_linear(&mut rng, dims.d_rep, dims.d_rep),
                wk: init_linear(&mut rng, dims.d_rep, dims.d_rep),
                wv: init_linear(&mut rng, dims.d_rep, dims.d_rep),
            },
        });
        EncoderParams {
            dims,
            enc_image_l1: init_linear(&mut rng, dims.d_hidden, dims.d_input),
            enc_image_l2: init_linear(&mut rng, dims.d_rep, dims.d_hidden),
            enc_report_l1: init_linear(&mut rng, dims.d_hidden, dims.d_input),
            enc_report_l2: init_linear(&mut rng, dims.d_rep, dims.d_hidden),
            query_image: init_linear(&mut rng, dims.d_rep, 1),
            query_report: init_linear(&mut rng, dims.d_rep, 1),
            heads,
            cross_attn,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = vec![
            ("enc_image.l1".to_string(), self.enc_image_l1.clone()),
            ("enc_image.l2".to_string(), self.enc_image_l2.clone()),
            ("enc_report.l1".to_string(), self.enc_report_l1.clone()),
            ("enc_report.l2".to_string(), self.enc_report_l2.clone()),
            ("query_image".to_string(), self.query_image.clone()),
            ("query_report".to_string(), self.query_report.clone()),
        ];
        match &self.heads {
            ProjectionHeads::Shared { image, report } => {
                out.push(("proj_image".to_string(), image.clone()));
                out.push(("proj_report".to_string(), report.clone()));
            }
            ProjectionHeads::Separate {
                image_local,
                image_global,
                report_local,
                report_global,
            } => {
                out.push(("proj_image_local".to_string(), image_local.clone()));
                out.push(("proj_image_global".to_string(), image_global.clone()));
                out.push(("proj_report_local".to_string(), report_local.clone()));
                out.push(("proj_report_global".to_string(), report_global.clone()));
            }
        }
        if let Some(x) = &self.cross_attn {
            for (prefix, proj) in
                [("xattn_to_image", &x.to_image), ("xattn_to_report", &x.to_report)]
            {
                out.push((format!("{prefix}.wq"), proj.wq.clone()));
                out.push((format!("{prefix}.wk"), proj.wk.clone()));
                out.push((format!("{prefix}.wv"), proj.wv.clone()));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Rebuild parameters from named tensors; the layout (shared heads, full
    /// attention) is inferred from the names present.
    pub fn from_named(entries: &[(String, Matrix)]) -> Result<Self> {
        let map: BTreeMap<&str, &Matrix> =
            entries.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let get = |name: &str| -> Result<Matrix> {
            map.get(name)
                .map(|m| (*m).clone())
                .ok_or_else(|| LabError::Parse(format!("missing parameter '{name}'")))
        };
        let enc_image_l1 = get("enc_image.l1")?;
        let enc_image_l2 = get("enc_image.l2")?;
        let dims = EncoderDims {
            d_input: enc_image_l1.cols(),
            d_hidden: enc_image_l1.rows(),
            d_rep: enc_image_l2.rows(),
        };
        let heads = if map.contains_key("proj_image") {
            ProjectionHeads::Shared { image: get("proj_image")?, report: get("proj_report")? }
        } else {
            ProjectionHeads::Separate {
                image_local: get("proj_image_local")?,
                image_global: get("proj_image_global")?,
                report_local: get("proj_report_local")?,
                report_global: get("proj_report_global")?,
            }
        };
        let cross_attn = if map.contains_key("xattn_to_image.wq") {
            Some(CrossAttnParams {
                to_image: AttnProj {
                    wq: get("xattn_to_image.wq")?,
                    wk: get("xattn_to_image.wk")?,
                    wv: get("xattn_to_image.wv")?,
                },
                to_report: AttnProj {
                    wq: get("xattn_to_report.wq")?,
                    wk: get("xattn_to_report.wk")?,
                    wv: get("xattn_to_report.wv")?,
                },
            })
        } else {
            None
        };
        Ok(EncoderParams {
            dims,
            enc_image_l1,
            enc_image_l2,
            enc_report_l1: get("enc_report.l1")?,
            enc_report_l2: get("enc_report.l2")?,
            query_image: get("query_image")?,
            query_report: get("query_report")?,
            heads,
            cross_attn,
        })
    }
}

/// Freely-parameterized local representations: no encoder, the per-sample
/// matrices themselves are the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeParams {
    pub image: Vec<Matrix>,
    pub report: Vec<Matrix>,
}

impl FreeParams {
    pub fn init(n: usize, k: usize, m_per_sample: &[usize], d: usize, seed: RngSeed) -> Self {
        let mut rng = seed.rng();
        FreeParams {
            image: (0..n).map(|_| init_linear(&mut rng, k, d).scale((d as f64).sqrt())).collect(),
            report: m_per_sample
                .iter()
                .map(|m| init_linear(&mut rng, *m, d).scale((d as f64).sqrt()))
                .collect(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        for (i, m) in self.image.iter().enumerate() {
            out.push((format!("free_image.{i:04}"), m.clone()));
        }
        for (i, m) in self.report.iter().enumerate() {
            out.push((format!("free_report.{i:04}"), m.clone()));
        }
        out
    }
}

/// Trainable state: either the two-modality encoder or free representations.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Encoder(EncoderParams),
    Free(FreeParams),
}

impl ModelParams {
    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        match self {
            ModelParams::Encoder(e) => e.named_tensors(),
            ModelParams::Free(f) => f.named_tensors(),
        }
    }

    /// Plain gradient-descent update, ascending name order.
    pub fn apply_update(&mut self, grads: &BTreeMap<String, Matrix>, lr: f64) -> Result<()> {
        let mut tensors: BTreeMap<String, Matrix> =
            self.named_tensors().into_iter().collect();
        for (name, tensor) in tensors.iter_mut() {
            if let Some(g) = grads.get(name) {
                if !g.same_shape(tensor) {
                    return Err(LabError::Dimension(format!(
                        "gradient shape mismatch for '{name}'"
                    )));
                }
                let updated = tensor.sub(&g.scale(lr))?;
                *tensor = updated;
            }
        }
        let entries: Vec<(String, Matrix)> = tensors.into_iter().collect();
        *self = self.rebuild_from(&entries)?;
        Ok(())
    }

    fn rebuild_from(&self, entries: &[(String, Matrix)]) -> Result<ModelParams> {
        match self {
            ModelParams::Encoder(_) => Ok(ModelParams::Encoder(EncoderParams::from_named(entries)?)),
            ModelParams::Free(f) => {
                let map: BTreeMap<&str, &Matrix> =
                    entries.iter().map(|(n, m)| (n.as_str(), m)).collect();
                let mut image = Vec::with_capacity(f.image.len());
                for i in 0..f.image.len() {
                    let name = format!("free_image.{i:04}");
                    image.push(
                        (*map
                            .get(name.as_str())
                            .ok_or_else(|| LabError::Parse(format!("missing '{name}'")))?)
                        .clone(),
                    );
                }
                let mut report = Vec::with_capacity(f.report.len());
                for i in 0..f.report.len() {
                    let name = format!("free_report.{i:04}");
                    report.push(
                        (*map
                            .get(name.as_str())
                            .ok_or_else(|| LabError::Parse(format!("missing '{name}'")))?)
                        .clone(),
                    );
                }
                Ok(ModelParams::Free(FreeParams { image, report }))
            }
        }
    }

    pub fn to_text(&self) -> String {
        format::write_named_tensors(&self.named_tensors())
    }
}

// ---------------------------------------------------------------------------
// forward pass on the tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Cross-attention temperature; defaults to sqrt(d_rep).
    pub attn_temp: Option<f64>,
    /// Uniform pooling weights instead of attention pooling (identity tests).
    pub uniform_pool: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { attn_temp: None, uniform_pool: false }
    }
}

/// Tape node ids of everything the losses and metrics consume.
pub struct ForwardNodes {
    pub y_image: Vec<NodeId>,
    pub y_report: Vec<NodeId>,
    pub ybar_image: NodeId,
    pub ybar_report: NodeId,
    pub z_image: Vec<NodeId>,
    pub z_report: Vec<NodeId>,
    pub zbar_image: NodeId,
    pub zbar_report: NodeId,
    pub cross_to_image: Vec<NodeId>,
    pub cross_to_report: Vec<NodeId>,
    pub attn_to_image: Vec<NodeId>,
    pub attn_to_report: Vec<NodeId>,
    pub pool_w_image: Vec<NodeId>,
    pub pool_w_report: Vec<NodeId>,
}

/// Everything the losses and metrics consume, as plain values.
pub struct ForwardOutputs {
    pub y_image: RaggedBatch,
    pub y_report: RaggedBatch,
    pub ybar_image: Matrix,
    pub ybar_report: Matrix,
    pub z_image: RaggedBatch,
    pub z_report: RaggedBatch,
    pub globals: GlobalReps,
    pub cross: CrossReps,
    pub weights: WeightSet,
}

/// Per-sample node collections accumulated while walking the batch; turned
/// into [`ForwardNodes`] once the pooled rows are stacked.
#[derive(Default)]
struct NodeAccumulator {
    y_image: Vec<NodeId>,
    y_report: Vec<NodeId>,
    z_image: Vec<NodeId>,
    z_report: Vec<NodeId>,
    cross_to_image: Vec<NodeId>,
    cross_to_report: Vec<NodeId>,
    attn_to_image: Vec<NodeId>,
    attn_to_report: Vec<NodeId>,
    pool_w_image: Vec<NodeId>,
    pool_w_report: Vec<NodeId>,
    ybar_image_rows: Vec<NodeId>,
    ybar_report_rows: Vec<NodeId>,
    zbar_image_rows: Vec<NodeId>,
    zbar_report_rows: Vec<NodeId>,
}

impl NodeAccumulator {
    fn finish(self, tape: &mut Tape, zbar_same_as_ybar: bool) -> Result<ForwardNodes> {
        let ybar_image = tape.concat_rows(&self.ybar_image_rows)?;
        let ybar_report = tape.concat_rows(&self.ybar_report_rows)?;
        let (zbar_image, zbar_report) = if zbar_same_as_ybar {
            (ybar_image, ybar_report)
        } else {
            (
                tape.concat_rows(&self.zbar_image_rows)?,
                tape.concat_rows(&self.zbar_report_rows)?,
            )
        };
        Ok(ForwardNodes {
            y_image: self.y_image,
            y_report: self.y_report,
            ybar_image,
            ybar_report,
            z_image: self.z_image,
            z_report: self.z_report,
            zbar_image,
            zbar_report,
            cross_to_image: self.cross_to_image,
            cross_to_report: self.cross_to_report,
            attn_to_image: self.attn_to_image,
            attn_to_report: self.attn_to_report,
            pool_w_image: self.pool_w_image,
            pool_w_report: self.pool_w_report,
        })
    }
}

fn uniform_row(tape: &mut Tape, k: usize) -> NodeId {
    tape.constant(Matrix::from_raw(1, k, vec![1.0 / k as f64; k]))
}

fn pool_on_tape(
    tape: &mut Tape,
    locals: NodeId,
    query: NodeId,
    uniform: bool,
) -> Result<(NodeId, NodeId)> {
    let k = tape.value(locals).rows();
    let weights = if uniform {
        uniform_row(tape, k)
    } else {
        let scores = tape.matmul(locals, query)?;
        let row = tape.reshape(scores, 1, k)?;
        tape.softmax_rows(row, 1.0)?
    };
    let pooled = tape.matmul(weights, locals)?;
    Ok((pooled, weights))
}

fn cross_on_tape(
    tape: &mut Tape,
    queries: NodeId,
    keys_values: NodeId,
    proj: Option<&(NodeId, NodeId, NodeId)>,
    temp: f64,
) -> Result<(NodeId, NodeId)> {
    let (q, k, v) = match proj {
        None => (queries, keys_values, keys_values),
        Some((wq, wk, wv)) => (
            tape.matmul_nt(queries, *wq)?,
            tape.matmul_nt(keys_values, *wk)?,
            tape.matmul_nt(keys_values, *wv)?,
        ),
    };
    let scores = tape.matmul_nt(q, k)?;
    let alpha = tape.softmax_rows(scores, temp)?;
    let out = tape.matmul(alpha, v)?;
    Ok((out, alpha))
}

/// Run the full differentiable forward pass over a batch.
///
/// `param_nodes` maps parameter names (as produced by
/// `ModelParams::named_tensors`) to already-registered tape inputs; batch
/// features enter the tape as constants.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    param_nodes: &BTreeMap<String, NodeId>,
    batch: &[(&Matrix, &Matrix)],
    opts: &ForwardOptions,
) -> Result<ForwardNodes> {
    if batch.is_empty() && matches!(params, ModelParams::Encoder(_)) {
        return Err(LabError::EmptyBatch("forward over empty batch".into()));
    }
    let node = |name: &str| -> Result<NodeId> {
        param_nodes
            .get(name)
            .copied()
            .ok_or_else(|| LabError::Config(format!("parameter '{name}' not on tape")))
    };
    match params {
        ModelParams::Encoder(enc) => {
            let temp = opts
                .attn_temp
                .unwrap_or_else(|| (enc.dims.d_rep as f64).sqrt());
            let il1 = node("enc_image.l1")?;
            let il2 = node("enc_image.l2")?;
            let rl1 = node("enc_report.l1")?;
            let rl2 = node("enc_report.l2")?;
            let qi = node("query_image")?;
            let qr = node("query_report")?;
            let (pi_local, pi_global, pr_local, pr_global) = match &enc.heads {
                ProjectionHeads::Shared { .. } => {
                    let pi = node("proj_image")?;
                    let pr = node("proj_report")?;
                    (pi, pi, pr, pr)
                }
                ProjectionHeads::Separate { .. } => (
                    node("proj_image_local")?,
                    node("proj_image_global")?,
                    node("proj_report_local")?,
                    node("proj_report_global")?,
                ),
            };
            let attn_proj = match &enc.cross_attn {
                None => None,
                Some(_) => Some((
                    (
                        node("xattn_to_image.wq")?,
                        node("xattn_to_image.wk")?,
                        node("xattn_to_image.wv")?,
                    ),
                    (
                        node("xattn_to_report.wq")?,
                        node("xattn_to_report.wk")?,
                        node("xattn_to_report.wv")?,
                    ),
                )),
            };

            let encode = |tape: &mut Tape, x: NodeId, l1: NodeId, l2: NodeId| -> Result<NodeId> {
                let h = tape.matmul_nt(x, l1)?;
                let h = tape.tanh(h)?;
                tape.matmul_nt(h, l2)
            };

            let mut acc = NodeAccumulator::default();
            for (regions, sentences) in batch {
                let rx = tape.constant((*regions).clone());
                let sx = tape.constant((*sentences).clone());
                let yi = encode(tape, rx, il1, il2)?;
                let yr = encode(tape, sx, rl1, rl2)?;
                let (ybar_i, wi) = pool_on_tape(tape, yi, qi, opts.uniform_pool)?;
                let (ybar_r, wr) = pool_on_tape(tape, yr, qr, opts.uniform_pool)?;
                let zi = tape.matmul_nt(yi, pi_local)?;
                let zr = tape.matmul_nt(yr, pr_local)?;
                let zbar_i = tape.matmul_nt(ybar_i, pi_global)?;
                let zbar_r = tape.matmul_nt(ybar_r, pr_global)?;
                let (cti, ati) =
                    cross_on_tape(tape, zi, zr, attn_proj.as_ref().map(|p| &p.0), temp)?;
                let (ctr, atr) =
                    cross_on_tape(tape, zr, zi, attn_proj.as_ref().map(|p| &p.1), temp)?;
                acc.y_image.push(yi);
                acc.y_report.push(yr);
                acc.z_image.push(zi);
                acc.z_report.push(zr);
                acc.cross_to_image.push(cti);
                acc.cross_to_report.push(ctr);
                acc.attn_to_image.push(ati);
                acc.attn_to_report.push(atr);
                acc.pool_w_image.push(wi);
                acc.pool_w_report.push(wr);
                acc.ybar_image_rows.push(ybar_i);
                acc.ybar_report_rows.push(ybar_r);
                acc.zbar_image_rows.push(zbar_i);
                acc.zbar_report_rows.push(zbar_r);
            }
            acc.finish(tape, false)
        }
        ModelParams::Free(free) => {
            // free mode is full-batch: the parameters are the representations
            let n = free.image.len();
            if free.report.len() != n {
                return Err(LabError::Dimension("free params batch mismatch".into()));
            }
            let d = free.image.first().map(|m| m.cols()).unwrap_or(0);
            let temp = opts.attn_temp.unwrap_or_else(|| (d as f64).sqrt());
            let mut acc = NodeAccumulator::default();
            for i in 0..n {
                let zi = node(&format!("free_image.{i:04}"))?;
                let zr = node(&format!("free_report.{i:04}"))?;
                let k = tape.value(zi).rows();
                let m = tape.value(zr).rows();
                let wi = uniform_row(tape, k);
                let wr = uniform_row(tape, m);
                let ybar_i = tape.matmul(wi, zi)?;
                let ybar_r = tape.matmul(wr, zr)?;
                let (cti, ati) = cross_on_tape(tape, zi, zr, None, temp)?;
                let (ctr, atr) = cross_on_tape(tape, zr, zi, None, temp)?;
                acc.y_image.push(zi);
                acc.y_report.push(zr);
                acc.z_image.push(zi);
                acc.z_report.push(zr);
                acc.cross_to_image.push(cti);
                acc.cross_to_report.push(ctr);
                acc.attn_to_image.push(ati);
                acc.attn_to_report.push(atr);
                acc.pool_w_image.push(wi);
                acc.pool_w_report.push(wr);
                acc.ybar_image_rows.push(ybar_i);
                acc.ybar_report_rows.push(ybar_r);
            }
            acc.finish(tape, true)
        }
    }
}

/// Read the forward values back out of the tape as plain matrices, paired
/// with the weight set the losses consume (pooling weights, the spatial
/// positiveness matrix, attention matrices).
pub fn extract_outputs(
    tape: &Tape,
    fw: &ForwardNodes,
    positiveness: &Matrix,
) -> Result<ForwardOutputs> {
    let ragged = |ids: &[NodeId], modality: Modality| -> Result<RaggedBatch> {
        RaggedBatch::new(
            modality,
            ids.iter().map(|id| tape.value(*id).clone()).collect(),
        )
    };
    let y_image = ragged(&fw.y_image, Modality::Image)?;
    let y_report = ragged(&fw.y_report, Modality::Report)?;
    let z_image = ragged(&fw.z_image, Modality::Image)?;
    let z_report = ragged(&fw.z_report, Modality::Report)?;
    let globals = GlobalReps::new(
        tape.value(fw.zbar_image).clone(),
        tape.value(fw.zbar_report).clone(),
    )?;
    let cross = CrossReps {
        to_image: fw.cross_to_image.iter().map(|id| tape.value(*id).clone()).collect(),
        to_report: fw.cross_to_report.iter().map(|id| tape.value(*id).clone()).collect(),
    };
    let weights = WeightSet::new(
        fw.pool_w_image
            .iter()
            .map(|id| tape.value(*id).data().to_vec())
            .collect(),
        fw.pool_w_report
            .iter()
            .map(|id| tape.value(*id).data().to_vec())
            .collect(),
        positiveness.clone(),
        Some(fw.attn_to_image.iter().map(|id| tape.value(*id).clone()).collect()),
        Some(fw.attn_to_report.iter().map(|id| tape.value(*id).clone()).collect()),
    )?;
    Ok(ForwardOutputs {
        y_image,
        y_report,
        ybar_image: tape.value(fw.ybar_image).clone(),
        ybar_report: tape.value(fw.ybar_report).clone(),
        z_image,
        z_report,
        globals,
        cross,
        weights,
    })
}
