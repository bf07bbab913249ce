//! The identity-verification suite behind `lab verify`: recomposition of
//! every decomposed loss, the xi-rewrite equivalences, the constant-local
//! equivalence and its negative control, the Gaussian-potential offset,
//! rank-one separability, gradient checks against finite differences, tape
//! replay determinism, and the frozen closed-form values.
//!
//! Deterministic: a fixed internal seed drives every random draw. The
//! optional `perturb` argument injects noise into one decomposition
//! component so the negative path of the suite is itself testable.

use std::collections::BTreeMap;

use crate::autodiff::{finite_diff, grad, max_relative_error, NodeId, Tape};
use crate::decompose::{
    constant_local_equivalence_check, decompose_global, decompose_local_image,
    decompose_local_report, gauss_offset_identity_check, global_align_direct,
    local_image_align_direct, local_report_align_direct, rank_one_residual,
    rewritten_alignments, Semantics, XiVariant,
};
use crate::error::Result;
use crate::loss::{
    tape_global_loss, tape_local_image_loss, tape_local_report_loss, tape_uniformity,
    LossConfig, UniformityVariant,
};
use crate::numeric::{Matrix, RngSeed};
use crate::sampling;

/// One row of the verification report.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
    pub pass: bool,
}

impl CheckRow {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.name,
            self.trials,
            self.max_error,
            if self.pass { "pass" } else { "fail" }
        )
    }
}

pub const CHECK_CSV_HEADER: &str = "check,trials,max_error,result";

pub fn rows_to_csv(rows: &[CheckRow]) -> String {
    let mut out = String::from(CHECK_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn all_pass(rows: &[CheckRow]) -> bool {
    rows.iter().all(|r| r.pass)
}

const SEED: u64 = 0xC0FFEE;
const RECOMPOSE_TRIALS: usize = 100;
const XI_TRIALS: usize = 50;

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

fn recomposition_checks(perturb: f64) -> Result<[CheckRow; 3]> {
    let mut rng = RngSeed(SEED).rng();
    let mut worst = [0.0_f64; 3];
    for trial in 0..RECOMPOSE_TRIALS {
        let c = recompose_config(trial);
        let dims = sampling::random_dims(&mut rng);
        let g = sampling::random_global_reps(&mut rng, dims.n, dims.d);
        let zs = sampling::unit_image_batch(&mut rng, &dims);
        let zr = sampling::unit_report_batch(&mut rng, &dims);
        let cross = sampling::random_cross_reps(&mut rng, &dims);
        let w = sampling::random_weight_set(&mut rng, &dims, trial % 2 == 0);
        let mut parts = [
            decompose_global(&g, &c)?,
            decompose_local_image(&zs, &cross, &w, &c)?,
            decompose_local_report(&zr, &cross, &w, &c)?,
        ];
        for (slot, d) in parts.iter_mut().enumerate() {
            d.align += perturb;
            worst[slot] = worst[slot].max(d.recomposition_error());
        }
    }
    let names = ["recompose_global", "recompose_local_image", "recompose_local_report"];
    Ok([0, 1, 2].map(|i| CheckRow {
        name: names[i],
        trials: RECOMPOSE_TRIALS,
        max_error: worst[i],
        pass: worst[i] <= 1e-12,
    }))
}

fn xi_rewrite_checks() -> Result<[CheckRow; 3]> {
    let mut rng = RngSeed(SEED + 1).rng();
    let mut worst = [0.0_f64; 3];
    for _ in 0..XI_TRIALS {
        let dims = sampling::random_dims(&mut rng);
        let zs = sampling::unit_image_batch(&mut rng, &dims);
        let zr = sampling::unit_report_batch(&mut rng, &dims);
        let w = sampling::random_weight_set(&mut rng, &dims, false);
        let c = LossConfig { tau: 0.2, tau_prime: 0.4, ..LossConfig::default() };
        let [g, li, lr] = rewritten_alignments(&zs, &zr, &w, &c)?;
        let direct = [
            global_align_direct(&zs, &zr, &w, &c, Semantics::Dot)?,
            local_image_align_direct(&zs, &zr, &w, &c, Semantics::Dot)?,
            local_report_align_direct(&zs, &zr, &w, &c, Semantics::Dot)?,
        ];
        for (slot, (a, b)) in [g, li, lr].iter().zip(direct).enumerate() {
            worst[slot] = worst[slot].max((a - b).abs());
        }
    }
    let names = ["xi_rewrite_global", "xi_rewrite_local_image", "xi_rewrite_local_report"];
    Ok([0, 1, 2].map(|i| CheckRow {
        name: names[i],
        trials: XI_TRIALS,
        max_error: worst[i],
        pass: worst[i] <= 1e-10,
    }))
}

fn constant_local_checks() -> Result<[CheckRow; 2]> {
    let mut rng = RngSeed(SEED + 2).rng();
    let trials = 20;
    let mut worst = 0.0_f64;
    let mut min_spread = f64::INFINITY;
    for _ in 0..trials {
        let dims = sampling::random_dims(&mut rng);
        let zs = sampling::constant_unit_image_batch(&mut rng, &dims);
        let zr = sampling::constant_unit_report_batch(&mut rng, &dims);
        let w = sampling::random_weight_set(&mut rng, &dims, true);
        let c = LossConfig { tau: 0.2, tau_prime: 0.2, ..LossConfig::default() };
        let report = constant_local_equivalence_check(&zs, &zr, &w, &c)?;
        worst = worst.max(report.max_pairwise_diff);

        // negative control: non-constant locals must disagree
        let bad_zs = sampling::unit_image_batch(&mut rng, &dims);
        let bad_zr = sampling::unit_report_batch(&mut rng, &dims);
        let [g, li, lr] = rewritten_alignments(&bad_zs, &bad_zr, &w, &c)?;
        let spread = (g - li).abs().max((g - lr).abs()).max((li - lr).abs());
        min_spread = min_spread.min(spread);
    }
    Ok([
        CheckRow {
            name: "constant_local_equivalence",
            trials,
            max_error: worst,
            pass: worst <= 1e-10,
        },
        CheckRow {
            name: "constant_local_negative_control",
            trials,
            max_error: min_spread,
            pass: min_spread > 1e-4,
        },
    ])
}

fn gauss_offset_check() -> Result<CheckRow> {
    let mut rng = RngSeed(SEED + 3).rng();
    let mut worst = 0.0_f64;
    let mut trials = 0;
    for tau_prime in [0.2, 0.5, 1.0] {
        for _ in 0..10 {
            let dims = sampling::random_dims(&mut rng);
            let zs = sampling::unit_image_batch(&mut rng, &dims);
            let (dist_form, cos_form) = gauss_offset_identity_check(&zs, tau_prime)?;
            worst = worst.max((cos_form - dist_form - 1.0 / tau_prime).abs());
            trials += 1;
        }
    }
    Ok(CheckRow { name: "gauss_offset", trials, max_error: worst, pass: worst <= 1e-12 })
}

fn rank_one_checks() -> Result<[CheckRow; 2]> {
    let mut rng = RngSeed(SEED + 4).rng();
    let c = LossConfig { tau: 0.2, tau_prime: 0.3, ..LossConfig::default() };
    let mut worst = 0.0_f64;
    for _ in 0..XI_TRIALS {
        let dims = sampling::random_dims(&mut rng);
        let w = sampling::random_weight_set(&mut rng, &dims, false);
        let xi = crate::decompose::xi_weights(XiVariant::Global, &w, &c)?;
        for m in &xi.per_sample {
            worst = worst.max(rank_one_residual(m) / m.max_abs().max(1.0));
        }
    }
    let mut above = 0;
    let control_trials = 100;
    for _ in 0..control_trials {
        let dims = sampling::BatchDims { n: 1, k: 3, m: vec![3], d: 4 };
        let w = sampling::random_weight_set(&mut rng, &dims, false);
        let xi = crate::decompose::xi_weights(XiVariant::LocalReport, &w, &c)?;
        let m = &xi.per_sample[0];
        if rank_one_residual(m) > 1e-6 * m.max_abs().max(1e-12) {
            above += 1;
        }
    }
    Ok([
        CheckRow {
            name: "xi_global_rank_one",
            trials: XI_TRIALS,
            max_error: worst,
            pass: worst <= 1e-10,
        },
        CheckRow {
            name: "xi_nonseparable_rank",
            trials: control_trials,
            max_error: (control_trials - above) as f64 / control_trials as f64,
            pass: above >= 95,
        },
    ])
}

/// Gradient checks of every loss in the zoo with representations as the
/// differentiated inputs, against central finite differences.
fn gradient_checks() -> Result<CheckRow> {
    let mut rng = RngSeed(SEED + 5).rng();
    let mut worst = 0.0_f64;
    let mut trials = 0;
    for _ in 0..3 {
        let dims = sampling::BatchDims { n: 3, k: 4, m: vec![2, 3, 2], d: 5 };
        let c = LossConfig { tau: 0.5, tau_prime: 0.5, lambda: 0.3, ..LossConfig::default() };
        let w = sampling::random_weight_set(&mut rng, &dims, true);
        let positiveness = w.positiveness.clone();
        let mut inputs: Vec<(String, Matrix)> = Vec::new();
        inputs.push(("gi".into(), sampling::unit_row_matrix(&mut rng, dims.n, dims.d)));
        inputs.push(("gr".into(), sampling::unit_row_matrix(&mut rng, dims.n, dims.d)));
        for i in 0..dims.n {
            inputs.push((format!("zs.{i}"), sampling::unit_row_matrix(&mut rng, dims.k, dims.d)));
            inputs.push((
                format!("zrs.{i}"),
                sampling::unit_row_matrix(&mut rng, dims.k, dims.d),
            ));
            inputs.push((
                format!("zr.{i}"),
                sampling::unit_row_matrix(&mut rng, dims.m[i], dims.d),
            ));
            inputs.push((
                format!("zsr.{i}"),
                sampling::unit_row_matrix(&mut rng, dims.m[i], dims.d),
            ));
        }
        let weights = w.clone();
        let n = dims.n;
        let gather = move |tape: &mut Tape,
                           ids: &BTreeMap<String, NodeId>|
              -> (Vec<NodeId>, Vec<NodeId>, Vec<NodeId>, Vec<NodeId>, Vec<NodeId>, Vec<NodeId>) {
            let zs: Vec<NodeId> = (0..n).map(|i| ids[&format!("zs.{i}")]).collect();
            let zrs: Vec<NodeId> = (0..n).map(|i| ids[&format!("zrs.{i}")]).collect();
            let zr: Vec<NodeId> = (0..n).map(|i| ids[&format!("zr.{i}")]).collect();
            let zsr: Vec<NodeId> = (0..n).map(|i| ids[&format!("zsr.{i}")]).collect();
            let wi: Vec<NodeId> = weights
                .image_weights
                .iter()
                .map(|v| tape.constant(Matrix::row_vector(v.clone()).unwrap()))
                .collect();
            let wr: Vec<NodeId> = weights
                .report_weights
                .iter()
                .map(|v| tape.constant(Matrix::row_vector(v.clone()).unwrap()))
                .collect();
            (zs, zrs, zr, zsr, wi, wr)
        };

        type Builder = Box<dyn Fn(&mut Tape, &BTreeMap<String, NodeId>) -> Result<NodeId>>;
        let cc = c.clone();
        let p1 = positiveness.clone();
        let g1 = gather.clone();
        let g2 = gather.clone();
        let g3 = gather.clone();
        let g4 = gather.clone();
        let g5 = gather;
        let c2 = c.clone();
        let c3 = c.clone();
        let c4 = c.clone();
        let builders: Vec<(&str, Builder)> = vec![
            (
                "global",
                Box::new(move |t, ids| tape_global_loss(t, ids["gi"], ids["gr"], &cc)),
            ),
            (
                "local_image",
                Box::new(move |t, ids| {
                    let (zs, zrs, _, _, wi, _) = g1(t, ids);
                    tape_local_image_loss(t, &zs, &zrs, &wi, &p1, &c2)
                }),
            ),
            (
                "local_report",
                Box::new(move |t, ids| {
                    let (_, _, zr, zsr, _, wr) = g2(t, ids);
                    tape_local_report_loss(t, &zr, &zsr, &wr, &c3)
                }),
            ),
            (
                "uni_gauss",
                Box::new(move |t, ids| {
                    let (zs, _, _, _, _, _) = g3(t, ids);
                    tape_uniformity(t, &zs, 0.5, UniformityVariant::Gauss)
                }),
            ),
            (
                "uni_xent",
                Box::new(move |t, ids| {
                    let (_, _, zr, _, _, _) = g4(t, ids);
                    tape_uniformity(t, &zr, 0.5, UniformityVariant::Xent)
                }),
            ),
            (
                "lovt_uni",
                Box::new(move |t, ids| {
                    let (zs, _, zr, _, _, _) = g5(t, ids);
                    let g = tape_global_loss(t, ids["gi"], ids["gr"], &c4)?;
                    let ui = tape_uniformity(t, &zs, c4.tau_prime, UniformityVariant::Gauss)?;
                    let ur = tape_uniformity(t, &zr, c4.tau_prime, UniformityVariant::Gauss)?;
                    let g = t.scalar_mul(g, c4.gamma)?;
                    let u = t.add(ui, ur)?;
                    let u = t.scalar_mul(u, c4.eta)?;
                    t.add(g, u)
                }),
            ),
        ];
        let borrowed: Vec<(&str, Matrix)> =
            inputs.iter().map(|(n, m)| (n.as_str(), m.clone())).collect();
        for (_, builder) in &builders {
            let run =
                |t: &mut Tape, ids: &BTreeMap<String, NodeId>| -> Result<NodeId> { builder(t, ids) };
            let (_, analytic) = grad(&run, &borrowed)?;
            let fd = finite_diff(&run, &borrowed, 1e-5)?;
            worst = worst.max(max_relative_error(&analytic, &fd, 1e-8));
            trials += 1;
        }
    }
    Ok(CheckRow {
        name: "grad_losses_vs_fd",
        trials,
        max_error: worst,
        pass: worst <= 1e-5,
    })
}

fn replay_check() -> Result<CheckRow> {
    let mut rng = RngSeed(SEED + 6).rng();
    let dims = sampling::BatchDims { n: 3, k: 4, m: vec![2, 3, 2], d: 5 };
    let zs = sampling::unit_image_batch(&mut rng, &dims);
    let c = LossConfig::default();
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = zs
        .samples()
        .iter()
        .map(|m| tape.constant(m.clone()))
        .collect();
    let loss = tape_uniformity(&mut tape, &nodes, c.tau_prime, UniformityVariant::Gauss)?;
    let recorded = tape.scalar(loss)?;
    let replayed = tape.replay(loss)?;
    let exact = recorded.to_bits() == replayed.to_bits();
    Ok(CheckRow {
        name: "tape_replay_bitexact",
        trials: 1,
        max_error: (recorded - replayed).abs(),
        pass: exact,
    })
}

fn closed_form_check() -> Result<CheckRow> {
    use crate::loss::{global_loss, uni_gauss_image, GlobalReps};
    use crate::numeric::{Modality, RaggedBatch};
    let mut worst = 0.0_f64;

    // collapsed uni-gauss at tau' = 0.2 is exactly 5
    let row = vec![0.28, -0.96, 0.0];
    let collapsed = RaggedBatch::new(
        Modality::Image,
        vec![Matrix::from_rows(&vec![row; 3]).unwrap()],
    )?;
    worst = worst.max((uni_gauss_image(&collapsed, 0.2)? - 5.0).abs());

    // orthogonal K = 2 at tau' = 0.5: log((e^2 + 1) / 2)
    let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?;
    let orth = RaggedBatch::new(Modality::Image, vec![eye.clone()])?;
    worst = worst.max((uni_gauss_image(&orth, 0.5)? - 1.4337808304830273).abs());

    // symmetric 2-way NTXent: log(1 + e^-1)
    let g = GlobalReps::new(eye.clone(), eye)?;
    let c = LossConfig { tau: 1.0, tau_prime: 1.0, lambda: 0.5, ..LossConfig::default() };
    worst = worst.max((global_loss(&g, &c)? - 0.3132616875182228).abs());

    Ok(CheckRow {
        name: "closed_form_values",
        trials: 3,
        max_error: worst,
        pass: worst <= 1e-12,
    })
}

/// Run the whole identity suite. `perturb` injects the given epsilon into
/// every decomposition's align component (negative-control mode); the
/// recomposition checks must then fail.
pub fn run_verification(perturb: Option<f64>) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    rows.extend(recomposition_checks(perturb.unwrap_or(0.0))?);
    rows.extend(xi_rewrite_checks()?);
    rows.extend(constant_local_checks()?);
    rows.push(gauss_offset_check()?);
    rows.extend(rank_one_checks()?);
    rows.push(gradient_checks()?);
    rows.push(replay_check()?);
    rows.push(closed_form_check()?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_suite_passes() {
        let rows = run_verification(None).unwrap();
        assert!(rows.len() >= 8, "only {} checks", rows.len());
        for r in &rows {
            assert!(r.pass, "{} failed with max_error {}", r.name, r.max_error);
        }
        let names: std::collections::BTreeSet<&str> =
            rows.iter().map(|r| r.name).collect();
        assert_eq!(names.len(), rows.len(), "duplicate check names");
        let csv = rows_to_csv(&rows);
        assert!(csv.starts_with(CHECK_CSV_HEADER));
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }

    #[test]
    fn perturbed_suite_fails_recomposition() {
        let rows = run_verification(Some(1e-6)).unwrap();
        assert!(!all_pass(&rows));
        for r in &rows {
            if r.name.starts_with("recompose_") {
                assert!(!r.pass, "{} should fail under perturbation", r.name);
            }
        }
    }

    #[test]
    fn verification_is_deterministic() {
        let a = run_verification(None).unwrap();
        let b = run_verification(None).unwrap();
        assert_eq!(rows_to_csv(&a), rows_to_csv(&b));
    }
}
