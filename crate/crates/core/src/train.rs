//! Deterministic gradient-descent training loop, metric logging, artifact
//! dumps, and the temperature/coefficient sweep driver.
//!
//! Everything is a pure function of (seed, config): batches are sequential
//! windows, updates walk parameters in ascending name order, sweep cells
//! derive independent seeds from their index and are assembled in grid
//! order regardless of scheduling.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::config::{EncoderKind, ExperimentConfig, SweepGrid};
use crate::error::{LabError, Result};
use crate::format::{write_named_blocks, Block};
use crate::metrics::{
    global_alignment, global_uniformity, local_uniformity, MetricRecord, CSV_HEADER,
};
use crate::numeric::Matrix;
use crate::objective::{ObjectiveContext, ObjectiveRegistry};
use crate::toy::{
    extract_outputs, forward, generate_dataset, positiveness_matrix, EncoderDims, EncoderParams,
    ForwardOptions, FreeParams, ModelParams, SyntheticDataset,
};

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trajectory: Vec<MetricRecord>,
    pub wall_seconds: f64,
    pub config_echo: Vec<(String, String)>,
}

impl RunResult {
    pub fn final_record(&self) -> &MetricRecord {
        self.trajectory.last().expect("trajectory includes step 0")
    }

    /// metrics CSV: exact metric header plus cfg_ echo columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        for (k, _) in &self.config_echo {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for rec in &self.trajectory {
            out.push_str(&rec.csv_row());
            for (_, v) in &self.config_echo {
                out.push(',');
                out.push_str(v);
            }
            out.push('\n');
        }
        out
    }
}

fn init_params(cfg: &ExperimentConfig, ds: &SyntheticDataset) -> ModelParams {
    let param_seed = cfg.dataset.seed.derive(1);
    match cfg.encoder {
        EncoderKind::Mlp => ModelParams::Encoder(EncoderParams::init(
            EncoderDims {
                d_input: cfg.dataset.d_input,
                d_hidden: cfg.d_hidden,
                d_rep: cfg.d_rep,
            },
            cfg.shared_heads,
            cfg.full_cross_attention,
            param_seed,
        )),
        EncoderKind::Free => {
            let m_per_sample: Vec<usize> =
                ds.samples.iter().map(|s| s.sentences.rows()).collect();
            ModelParams::Free(FreeParams::init(
                ds.len(),
                cfg.dataset.k(),
                &m_per_sample,
                cfg.d_rep,
                param_seed,
            ))
        }
    }
}

struct StepEval {
    loss_total: f64,
    loss_global: f64,
    loss_uni_image: f64,
    loss_uni_report: f64,
    gradients: Option<crate::autodiff::GradientSet>,
}

/// One forward (+ optional backward) pass of the objective over a batch.
fn run_objective(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    ds: &SyntheticDataset,
    indices: &[usize],
    positiveness: &Matrix,
    want_gradients: bool,
) -> Result<(StepEval, Tape, crate::toy::ForwardNodes)> {
    let mut tape = Tape::new();
    let mut ids = BTreeMap::new();
    for (name, m) in params.named_tensors() {
        ids.insert(name.clone(), tape.input(&name, m)?);
    }
    let batch = ds.batch(indices);
    let opts = ForwardOptions { attn_temp: cfg.attn_temp, uniform_pool: false };
    let fw = forward(&mut tape, params, &ids, &batch, &opts)?;
    let registry = ObjectiveRegistry::builtin();
    let objective = registry.get(&cfg.objective)?;
    let ctx = ObjectiveContext {
        cfg: &cfg.loss,
        positiveness,
        variant: cfg.uniformity,
    };
    let terms = objective.build(&mut tape, &fw, &ctx)?;
    let value = |id: Option<crate::autodiff::NodeId>| -> Result<f64> {
        id.map_or(Ok(0.0), |id| tape.scalar(id))
    };
    let eval = StepEval {
        loss_total: tape.scalar(terms.total)?,
        loss_global: value(terms.global_part)?,
        loss_uni_image: value(terms.uni_image)?,
        loss_uni_report: value(terms.uni_report)?,
        gradients: if want_gradients {
            Some(tape.gradients(terms.total)?)
        } else {
            None
        },
    };
    Ok((eval, tape, fw))
}

/// Metrics over the full dataset at the current parameters.
fn evaluate_metrics(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    ds: &SyntheticDataset,
    positiveness: &Matrix,
    step: u64,
) -> Result<MetricRecord> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let (eval, tape, fw) = run_objective(cfg, params, ds, &all, positiveness, false)?;
    let out = extract_outputs(&tape, &fw, positiveness)?;
    let tau_metric = cfg.effective_tau_metric();
    let record = MetricRecord {
        step,
        loss_total: eval.loss_total,
        loss_global: eval.loss_global,
        loss_uni_image: eval.loss_uni_image,
        loss_uni_report: eval.loss_uni_report,
        align_global: global_alignment(&out.globals)?,
        unif_local_image: local_uniformity(&out.y_image, tau_metric)?,
        unif_local_report: local_uniformity(&out.y_report, tau_metric)?,
        unif_global_image: global_uniformity(&out.ybar_image, cfg.uniformity_t)?,
        unif_global_report: global_uniformity(&out.ybar_report, cfg.uniformity_t)?,
    };
    if !record.all_finite() {
        return Err(LabError::Divergence {
            step,
            message: "non-finite metric value".into(),
        });
    }
    Ok(record)
}

struct TrainedState {
    result: RunResult,
    params: ModelParams,
    ds: SyntheticDataset,
    positiveness: Matrix,
}

fn train_full(cfg: &ExperimentConfig) -> Result<TrainedState> {
    cfg.validate()?;
    let start = Instant::now();
    let ds = generate_dataset(&cfg.dataset)?;
    let positiveness = positiveness_matrix(cfg.dataset.grid_h, cfg.dataset.grid_w, cfg.bandwidth)?;
    let mut params = init_params(cfg, &ds);
    let batch_size = cfg.effective_batch_size();
    let n = ds.len();

    let mut trajectory = Vec::new();
    trajectory.push(evaluate_metrics(cfg, &params, &ds, &positiveness, 0)?);

    for step in 1..=cfg.steps {
        let indices: Vec<usize> = if batch_size == n {
            (0..n).collect()
        } else {
            let offset = ((step - 1) as usize * batch_size) % n;
            (0..batch_size).map(|j| (offset + j) % n).collect()
        };
        let (eval, _tape, _fw) =
            run_objective(cfg, &params, &ds, &indices, &positiveness, true)?;
        if !eval.loss_total.is_finite() {
            return Err(LabError::Divergence {
                step,
                message: format!("loss became {}", eval.loss_total),
            });
        }
        let grads = eval.gradients.expect("gradients requested");
        params.apply_update(&grads, cfg.lr)?;
        if step % cfg.cadence == 0 || step == cfg.steps {
            trajectory.push(evaluate_metrics(cfg, &params, &ds, &positiveness, step)?);
        }
    }

    let result = RunResult {
        trajectory,
        wall_seconds: start.elapsed().as_secs_f64(),
        config_echo: cfg.csv_echo(),
    };
    Ok(TrainedState { result, params, ds, positiveness })
}

/// Deterministic gradient descent; metrics logged at step 0, every
/// `cadence` steps, and at the final step.
pub fn train(cfg: &ExperimentConfig) -> Result<RunResult> {
    Ok(train_full(cfg)?.result)
}

/// Final representations of the full dataset, dumped as named blocks.
fn dump_representations(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    ds: &SyntheticDataset,
    positiveness: &Matrix,
) -> Result<String> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let (_, tape, fw) = run_objective(cfg, params, ds, &all, positiveness, false)?;
    let out = extract_outputs(&tape, &fw, positiveness)?;
    Ok(write_named_blocks(&[
        ("y_image".to_string(), Block::Ragged(out.y_image)),
        ("y_report".to_string(), Block::Ragged(out.y_report)),
        ("ybar_image".to_string(), Block::Tensor(out.ybar_image)),
        ("ybar_report".to_string(), Block::Tensor(out.ybar_report)),
        ("zbar_image".to_string(), Block::Tensor(out.globals.image)),
        ("zbar_report".to_string(), Block::Tensor(out.globals.report)),
    ]))
}

/// Train and write metrics.csv, params.txt, and reps.txt under `out_dir`.
pub fn train_to_dir(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunResult> {
    let state = train_full(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), state.result.to_csv())?;
    std::fs::write(out_dir.join("params.txt"), state.params.to_text())?;
    std::fs::write(
        out_dir.join("reps.txt"),
        dump_representations(cfg, &state.params, &state.ds, &state.positiveness)?,
    )?;
    Ok(state.result)
}

/// One sweep row: the cell's config echo plus its outcome.
pub struct SweepCell {
    pub objective: String,
    pub tau_prime: f64,
    pub eta: f64,
    pub outcome: Result<RunResult>,
}

/// Run every grid cell (in parallel; cell seeds derive from the cell index)
/// and assemble results in grid order. A failed cell is reported, not fatal.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Vec<SweepCell> {
    let cells = grid.cells(base);
    cells
        .into_par_iter()
        .enumerate()
        .map(|(idx, (objective, tau_prime, eta))| {
            let mut cfg = base.clone();
            cfg.objective = objective.clone();
            cfg.loss.tau_prime = tau_prime;
            cfg.loss.eta = eta;
            cfg.dataset.seed = base.dataset.seed.derive(idx as u64);
            let outcome = train(&cfg);
            SweepCell { objective, tau_prime, eta, outcome }
        })
        .collect()
}

/// Combined sweep CSV: one row per grid cell (its final metric record).
/// Failed cells keep their cfg_ echo and carry nan metric fields.
pub fn sweep_to_csv(base: &ExperimentConfig, cells: &[SweepCell]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    for (k, _) in base.csv_echo() {
        out.push(',');
        out.push_str(&k);
    }
    out.push('\n');
    for cell in cells {
        match &cell.outcome {
            Ok(result) => {
                out.push_str(&result.final_record().csv_row());
                for (_, v) in &result.config_echo {
                    out.push(',');
                    out.push_str(v);
                }
            }
            Err(_) => {
                let mut cfg = base.clone();
                cfg.objective = cell.objective.clone();
                cfg.loss.tau_prime = cell.tau_prime;
                cfg.loss.eta = cell.eta;
                out.push_str(&format!("{}", cfg.steps));
                for _ in 0..9 {
                    out.push_str(",nan");
                }
                for (_, v) in cfg.csv_echo() {
                    out.push(',');
                    out.push_str(&v);
                }
            }
        }
        out.push('\n');
    }
    out
}
