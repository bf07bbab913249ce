//! Acceptance suite: every criterion as one test printing a pass/fail line
//! (run with `cargo test -p lab-cli --test acceptance -- --nocapture` to see
//! them). Expected values were recomputed by the brute-force oracles at the
//! bottom of this file before being frozen.

use std::collections::BTreeMap;
use std::time::Instant;

use lab_core::autodiff::{finite_diff, grad, max_relative_error, NodeId, Tape};
use lab_core::config::ExperimentConfig;
use lab_core::decompose::{
    constant_local_equivalence_check, decompose_global, decompose_local_image,
    decompose_local_report, gauss_offset_identity_check, global_align_direct,
    local_image_align_direct, local_report_align_direct, rewritten_alignments, Semantics,
};
use lab_core::loss::{global_loss, local_image_loss, uni_gauss_image, LossConfig};
use lab_core::metrics::spearman_rho;
use lab_core::numeric::{Matrix, Modality, RaggedBatch, RngSeed};
use lab_core::objective::{ObjectiveContext, ObjectiveRegistry};
use lab_core::toy::{
    forward, generate_dataset, positiveness_matrix, EncoderDims, EncoderParams, ForwardOptions,
    ModelParams, SyntheticDatasetSpec,
};
use lab_core::train::{train, train_to_dir, RunResult};
use lab_core::{sampling, Result};

/// The gauss directional run is shared by two tests.
fn gauss_directional_run() -> &'static RunResult {
    static RUN: std::sync::OnceLock<RunResult> = std::sync::OnceLock::new();
    RUN.get_or_init(|| train(&directional_config()).unwrap())
}

fn report(name: &str, pass: bool, detail: String) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn recompose_config(trial: usize) -> LossConfig {
    let taus = [0.1, 0.2, 1.0];
    let lambdas = [0.0, 0.3, 1.0];
    LossConfig {
        tau: taus[trial % 3],
        tau_prime: taus[(trial / 3) % 3],
        lambda: lambdas[(trial / 9) % 3],
        ..LossConfig::default()
    }
}

/// Decomposition identities: |total - (align + dist)| <= 1e-12 max(1, |total|)
/// for each loss over 100 random configurations, in under 5 seconds.
#[test]
fn criterion_decomposition_identities() {
    let start = Instant::now();
    let mut rng = RngSeed(0xACC0).rng();
    let mut worst = [0.0_f64; 3];
    for trial in 0..100 {
        let c = recompose_config(trial);
        let dims = sampling::random_dims(&mut rng);
        let g = sampling::random_global_reps(&mut rng, dims.n, dims.d);
        let zs = sampling::unit_image_batch(&mut rng, &dims);
        let zr = sampling::unit_report_batch(&mut rng, &dims);
        let cross = sampling::random_cross_reps(&mut rng, &dims);
        let w = sampling::random_weight_set(&mut rng, &dims, trial % 2 == 0);
        worst[0] = worst[0].max(decompose_global(&g, &c).unwrap().recomposition_error());
        worst[1] = worst[1]
            .max(decompose_local_image(&zs, &cross, &w, &c).unwrap().recomposition_error());
        worst[2] = worst[2]
            .max(decompose_local_report(&zr, &cross, &w, &c).unwrap().recomposition_error());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    report(
        "decomposition_identities",
        max <= 1e-12 && elapsed < 5.0,
        format!(
            "100 configurations, worst relative residual {max:.3e} \
             (global {:.3e}, local-image {:.3e}, local-report {:.3e}), {elapsed:.2}s",
            worst[0], worst[1], worst[2]
        ),
    );
}

/// Xi-rewrite equivalence: each rewritten alignment matches its direct
/// expansion within 1e-10 over 50 draws under dot semantics, in under 5 s.
#[test]
fn criterion_xi_rewrite_equivalence() {
    let start = Instant::now();
    let mut rng = RngSeed(0xACC1).rng();
    let mut worst = [0.0_f64; 3];
    for _ in 0..50 {
        let dims = sampling::random_dims(&mut rng);
        let zs = sampling::unit_image_batch(&mut rng, &dims);
        let zr = sampling::unit_report_batch(&mut rng, &dims);
        let w = sampling::random_weight_set(&mut rng, &dims, false);
        let c = LossConfig { tau: 0.2, tau_prime: 0.4, ..LossConfig::default() };
        let [g, li, lr] = rewritten_alignments(&zs, &zr, &w, &c).unwrap();
        worst[0] = worst[0]
            .max((g - global_align_direct(&zs, &zr, &w, &c, Semantics::Dot).unwrap()).abs());
        worst[1] = worst[1].max(
            (li - local_image_align_direct(&zs, &zr, &w, &c, Semantics::Dot).unwrap()).abs(),
        );
        worst[2] = worst[2].max(
            (lr - local_report_align_direct(&zs, &zr, &w, &c, Semantics::Dot).unwrap()).abs(),
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    report(
        "xi_rewrite_equivalence",
        max <= 1e-10 && elapsed < 5.0,
        format!("50 draws, worst |rewritten - direct| = {max:.3e}, {elapsed:.2}s"),
    );
}

/// Constant-local equivalence: with per-sample-constant unit locals,
/// normalized weights, and tau = tau', the three dot-form alignments agree
/// within 1e-10; a non-constant negative control disagrees by > 1e-4.
#[test]
fn criterion_constant_local_equivalence() {
    let mut rng = RngSeed(0xACC2).rng();
    let mut worst = 0.0_f64;
    let mut min_spread = f64::INFINITY;
    for _ in 0..20 {
        let dims = sampling::random_dims(&mut rng);
        let zs = sampling::constant_unit_image_batch(&mut rng, &dims);
        let zr = sampling::constant_unit_report_batch(&mut rng, &dims);
        let w = sampling::random_weight_set(&mut rng, &dims, true);
        let c = LossConfig { tau: 0.2, tau_prime: 0.2, ..LossConfig::default() };
        let rep = constant_local_equivalence_check(&zs, &zr, &w, &c).unwrap();
        worst = worst.max(rep.max_pairwise_diff);
        let bad_zs = sampling::unit_image_batch(&mut rng, &dims);
        let bad_zr = sampling::unit_report_batch(&mut rng, &dims);
        let [g, li, lr] = rewritten_alignments(&bad_zs, &bad_zr, &w, &c).unwrap();
        min_spread = min_spread.min((g - li).abs().max((g - lr).abs()).max((li - lr).abs()));
    }
    report(
        "constant_local_equivalence",
        worst <= 1e-10 && min_spread > 1e-4,
        format!(
            "constant case max pairwise diff {worst:.3e}; \
             negative control min spread {min_spread:.3e}"
        ),
    );
}

/// Gaussian-potential offset: distance form equals cosine form minus exactly
/// 1/tau' on unit-row batches, tolerance 1e-12, tau' in {0.2, 0.5, 1.0}.
#[test]
fn criterion_gauss_offset() {
    let mut rng = RngSeed(0xACC3).rng();
    let mut worst = 0.0_f64;
    for tau_prime in [0.2, 0.5, 1.0] {
        for _ in 0..10 {
            let dims = sampling::random_dims(&mut rng);
            let zs = sampling::unit_image_batch(&mut rng, &dims);
            let (dist_form, cos_form) = gauss_offset_identity_check(&zs, tau_prime).unwrap();
            worst = worst.max((cos_form - dist_form - 1.0 / tau_prime).abs());
        }
    }
    report(
        "gauss_offset",
        worst <= 1e-12,
        format!("worst |cos-form - dist-form - 1/tau'| = {worst:.3e}"),
    );
}

/// Closed-form loss values, frozen from the brute-force oracles below.
#[test]
fn criterion_closed_form_values() {
    // oracle recomputation comes first: the frozen digits must match it
    let orth = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert!((oracle_uni_gauss(&orth, 0.5) - 1.4337808304830273).abs() < 1e-15);
    assert!((oracle_symmetric_ntxent_2way() - 0.3132616875182228).abs() < 1e-15);
    let collapsed_rows = vec![vec![0.6, 0.8]; 3];
    assert_eq!(oracle_uni_gauss(&collapsed_rows, 0.2), 5.0);

    // implementation against the frozen values
    let collapsed = RaggedBatch::new(
        Modality::Image,
        vec![Matrix::from_rows(&collapsed_rows).unwrap()],
    )
    .unwrap();
    let v_collapsed = uni_gauss_image(&collapsed, 0.2).unwrap();
    let exact_five = v_collapsed == 5.0;

    let eye = Matrix::from_rows(&orth).unwrap();
    let b = RaggedBatch::new(Modality::Image, vec![eye.clone()]).unwrap();
    let v_orth = uni_gauss_image(&b, 0.5).unwrap();
    let orth_err = (v_orth - 1.4337808304830273).abs();

    let g = lab_core::loss::GlobalReps::new(eye.clone(), eye.clone()).unwrap();
    let c = LossConfig { tau: 1.0, tau_prime: 1.0, lambda: 0.5, ..LossConfig::default() };
    let ntxent_global_err = (global_loss(&g, &c).unwrap() - 0.3132616875182228).abs();

    // the local-image loss with identity positiveness reduces to the same
    // symmetric two-way NTXent value
    let zs = RaggedBatch::new(Modality::Image, vec![eye.clone()]).unwrap();
    let cross = lab_core::loss::CrossReps { to_image: vec![eye.clone()], to_report: vec![] };
    let mut p = Matrix::zeros(2, 2);
    p.set(0, 0, 1.0);
    p.set(1, 1, 1.0);
    let w = lab_core::loss::WeightSet::new(vec![vec![0.5, 0.5]], vec![], p, None, None).unwrap();
    let ntxent_local_err =
        (local_image_loss(&zs, &cross, &w, &c).unwrap() - 0.3132616875182228).abs();

    let pass = exact_five
        && orth_err <= 1e-12
        && ntxent_global_err <= 1e-12
        && ntxent_local_err <= 1e-12;
    report(
        "closed_form_values",
        pass,
        format!(
            "collapsed uni-gauss = {v_collapsed} (exact 5: {exact_five}); \
             orthogonal err {orth_err:.3e}; NTXent errs {ntxent_global_err:.3e} / \
             {ntxent_local_err:.3e}"
        ),
    );
}

/// Gradient correctness: every objective in the registry, composed through
/// the full forward pass (D_rep <= 8, K <= 6), matches central finite
/// differences at h = 1e-5 within 1e-5 relative error, in under 60 s.
#[test]
fn criterion_gradient_correctness() {
    let start = Instant::now();
    let spec = SyntheticDatasetSpec {
        n_total: 3,
        grid_h: 2,
        grid_w: 3,
        m_min: 1,
        m_max: 3,
        d_latent: 3,
        d_input: 7,
        topic_spread: 0.4,
        noise_sigma: 0.2,
        seed: RngSeed(0xACC4),
    };
    let ds = generate_dataset(&spec).unwrap();
    let dims = EncoderDims { d_input: 7, d_hidden: 5, d_rep: 6 };
    let params = ModelParams::Encoder(EncoderParams::init(dims, true, false, RngSeed(77)));
    let named = params.named_tensors();
    let inputs: Vec<(&str, Matrix)> =
        named.iter().map(|(n, m)| (n.as_str(), m.clone())).collect();
    let positiveness = positiveness_matrix(2, 3, 1.0).unwrap();
    let cfg = LossConfig {
        tau: 0.5,
        tau_prime: 0.5,
        lambda: 0.3,
        gamma: 1.0,
        mu: 0.8,
        nu: 0.7,
        eta: 0.25,
    };
    let registry = ObjectiveRegistry::builtin();
    let mut detail = String::new();
    let mut worst_overall = 0.0_f64;
    for name in registry.names() {
        let objective = registry.get(name).unwrap();
        let indices: Vec<usize> = (0..ds.len()).collect();
        let builder = |tape: &mut Tape, ids: &BTreeMap<String, NodeId>| -> Result<NodeId> {
            let batch = ds.batch(&indices);
            let fw = forward(tape, &params, ids, &batch, &ForwardOptions::default())?;
            let ctx = ObjectiveContext {
                cfg: &cfg,
                positiveness: &positiveness,
                variant: lab_core::loss::UniformityVariant::Xent,
            };
            Ok(objective.build(tape, &fw, &ctx)?.total)
        };
        let (_, analytic) = grad(&builder, &inputs).unwrap();
        let fd = finite_diff(&builder, &inputs, 1e-5).unwrap();
        let err = max_relative_error(&analytic, &fd, 1e-8);
        worst_overall = worst_overall.max(err);
        detail.push_str(&format!("{name} {err:.2e}; "));
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "gradient_correctness",
        worst_overall <= 1e-5 && elapsed < 60.0,
        format!("{detail}worst {worst_overall:.3e}, {elapsed:.1}s"),
    );
}

fn directional_config() -> ExperimentConfig {
    ExperimentConfig::from_text(
        "n_total = 256\n\
         grid_h = 4\n\
         grid_w = 4\n\
         m_min = 2\n\
         m_max = 4\n\
         d_latent = 4\n\
         d_input = 16\n\
         topic_spread = 0.3\n\
         noise_sigma = 0.3\n\
         seed = 42\n\
         d_hidden = 32\n\
         d_rep = 16\n\
         shared_heads = true\n\
         objective = lovt_uni_gauss\n\
         tau = 0.1\n\
         tau_prime = 0.2\n\
         eta = 0.25\n\
         lr = 0.1\n\
         steps = 500\n\
         cadence = 100\n\
         tau_metric = 0.2\n",
    )
    .unwrap()
}

/// Directional training: on the synthetic task (N = 256, K = 16, M in
/// [2, 4], D_rep = 16, 500 steps), the lovt_uni_gauss run (tau' = 0.2,
/// eta = 0.25) finishes with both local uniformities at least 0.1 above the
/// global_only run under identical seeds, within 10 minutes.
#[test]
fn criterion_directional_training() {
    let mut global_cfg = directional_config();
    global_cfg.objective = "global_only".into();
    let uni = gauss_directional_run();
    let base = train(&global_cfg).unwrap();
    // wall time of the two training runs themselves
    let elapsed = uni.wall_seconds + base.wall_seconds;
    let u = uni.final_record();
    let b = base.final_record();
    let gap_image = u.unif_local_image - b.unif_local_image;
    let gap_report = u.unif_local_report - b.unif_local_report;
    // soft check (reported, non-fatal): the uniformity run's global
    // uniformity should not exceed the baseline's by more than the slack
    let slack = 0.5;
    let global_excess = (u.unif_global_image - b.unif_global_image)
        .max(u.unif_global_report - b.unif_global_report);
    println!(
        "[INFO] directional_training: global-uniformity excess {global_excess:.3} \
         (slack {slack}): {}",
        if global_excess <= slack { "within slack" } else { "exceeds slack" }
    );
    report(
        "directional_training",
        gap_image >= 0.1 && gap_report >= 0.1 && elapsed < 600.0,
        format!(
            "local uniformity gaps: image {gap_image:+.3} report {gap_report:+.3} \
             (need >= +0.1 each); uni ({:.3}, {:.3}) vs global_only ({:.3}, {:.3}); \
             {elapsed:.0}s",
            u.unif_local_image, u.unif_local_report, b.unif_local_image, b.unif_local_report
        ),
    );
}

/// Soft comparison (reported, non-fatal by design): at matched tau' and eta
/// the uni-xent run's local uniformity is expected to be >= the uni-gauss
/// run's.
#[test]
fn soft_xent_vs_gauss_uniformity() {
    let mut xent_cfg = directional_config();
    xent_cfg.objective = "lovt_uni_xent".into();
    let gauss = gauss_directional_run();
    let xent = train(&xent_cfg).unwrap();
    let g = gauss.final_record();
    let x = xent.final_record();
    let holds = x.unif_local_image >= g.unif_local_image
        && x.unif_local_report >= g.unif_local_report;
    println!(
        "[INFO] xent_vs_gauss (soft): xent ({:.3}, {:.3}) vs gauss ({:.3}, {:.3}) -> {}",
        x.unif_local_image,
        x.unif_local_report,
        g.unif_local_image,
        g.unif_local_report,
        if holds { "xent >= gauss" } else { "xent < gauss (empirical claim, non-fatal)" }
    );
}

/// Temperature trend: over the gauss sweep tau' in {0.1, 0.2, 0.3, 0.5,
/// 1.0} at fixed eta = 0.25, the final local uniformity (measured at each
/// cell's own tau', the metric default) is positively rank-correlated with
/// tau' (Spearman rho > 0.5).
#[test]
fn criterion_temperature_trend() {
    let dir = tempfile::tempdir().unwrap();
    let taus = [0.1, 0.2, 0.3, 0.5, 1.0];
    let mut finals_default = Vec::new();
    let mut finals_fixed = Vec::new();
    for (i, tp) in taus.into_iter().enumerate() {
        let mut cfg = directional_config();
        cfg.loss.tau_prime = tp;
        cfg.loss.eta = 0.25;
        cfg.tau_metric = None; // metric default: the training tau'
        let out = dir.path().join(format!("cell{i}"));
        let run = train_to_dir(&cfg, &out).unwrap();
        let rec = run.final_record();
        finals_default.push((rec.unif_local_image + rec.unif_local_report) / 2.0);

        // the fixed-scale measurement comes from the dumped representations
        let reps = std::fs::read_to_string(out.join("reps.txt")).unwrap();
        let blocks = lab_core::format::read_named_blocks(&reps).unwrap();
        let fixed = lab_core::metrics::record_from_reps(&blocks, 0.2, 2.0).unwrap();
        finals_fixed.push((fixed.unif_local_image + fixed.unif_local_report) / 2.0);
    }
    let rho = spearman_rho(&taus, &finals_default).unwrap();
    let rho_fixed = spearman_rho(&taus, &finals_fixed).unwrap();
    println!(
        "[INFO] temperature_trend: fixed-scale (tau_metric = 0.2) Spearman {rho_fixed:+.2} \
         (informational; at toy scale small-tau' repulsion dominates collapsed inits)"
    );
    report(
        "temperature_trend",
        rho > 0.5,
        format!(
            "Spearman rho {rho:+.2} over tau' {taus:?}, finals {:?}",
            finals_default.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );
}

/// Determinism: two invocations of `lab train` with identical config and
/// seed produce byte-identical outputs.
#[test]
fn criterion_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.txt");
    std::fs::write(
        &config_path,
        "n_total = 12\ngrid_h = 2\ngrid_w = 2\nm_min = 1\nm_max = 3\nd_latent = 3\n\
         d_input = 6\nseed = 9\nd_hidden = 8\nd_rep = 4\nobjective = lovt_uni_gauss\n\
         steps = 15\ncadence = 5\nlr = 0.1\n",
    )
    .unwrap();
    let run = |out: &str| {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_lab"))
            .args([
                "train",
                "--config",
                config_path.to_str().unwrap(),
                "--out",
                dir.path().join(out).to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
    };
    run("a");
    run("b");
    let mut identical = true;
    let mut detail = String::new();
    for file in ["metrics.csv", "params.txt", "reps.txt"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        let same = a == b;
        identical &= same;
        detail.push_str(&format!("{file}: {}; ", if same { "identical" } else { "DIFFERS" }));
    }
    report("determinism", identical, detail);
}

// ---------------------------------------------------------------------------
// brute-force oracles (independent of lab_core)
// ---------------------------------------------------------------------------

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if a == b {
        1.0
    } else {
        dot / (na * nb)
    }
}

fn oracle_uni_gauss(rows: &[Vec<f64>], tau_prime: f64) -> f64 {
    let k = rows.len();
    let mut sum = 0.0;
    for a in rows {
        for b in rows {
            sum += (oracle_cos(a, b) / tau_prime).exp();
        }
    }
    (sum / (k * k) as f64).ln()
}

/// N = 2 orthogonal unit pairs, tau = 1, lambda = 1/2: every directional
/// term is -log(e / (e + 1)) = log(1 + e^-1).
fn oracle_symmetric_ntxent_2way() -> f64 {
    let cos = [[1.0, 0.0], [0.0, 1.0]];
    let mut total = 0.0;
    for i in 0..2 {
        let denom_row: f64 = (0..2).map(|j| (cos[i][j] as f64).exp()).sum();
        let denom_col: f64 = (0..2).map(|j| (cos[j][i] as f64).exp()).sum();
        let l_sr = -((cos[i][i] as f64).exp() / denom_row).ln();
        let l_rs = -((cos[i][i] as f64).exp() / denom_col).ln();
        total += 0.5 * l_sr + 0.5 * l_rs;
    }
    total / 2.0
}
