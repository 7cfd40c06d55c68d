//! Seeded finite-difference verification suite covering every loss and the
//! fusion MLP. Used by the CLI's `gradcheck` subcommand and the acceptance
//! tests; a nonzero failure count is a correctness bug, not noise.

use crate::error::Result;
use crate::fusion::{backward, forward, ForwardPass, FusionConfig, FusionHead};
use crate::heatmaps::{Heatmap, HeatmapStack};
use crate::losses::{
    finite_diff_check, heatmap_mse_grad, heatmap_mse_loss, l2softmax_grad, l2softmax_loss,
    orientation_ce_grad, orientation_ce_loss, pixel_ce_grad, pixel_ce_loss, stage2_grad,
    stage2_loss, GradReport, L2SoftmaxParams, PixelTarget,
};
use crate::matrix::Matrix;
use crate::orientation::{Orientation, NUM_ORIENTATIONS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_TRIALS: usize = 100;
pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Aggregated outcome for one named check across all trials.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// The full verification suite. Every check runs `trials` seeded random
/// instances; an entry passes when every instance stays under `tolerance`.
pub fn run_suite(trials: usize, step: f64, tolerance: f64, seed: u64) -> Result<Vec<SuiteEntry>> {
    Ok(vec![
        check_l2softmax(trials, step, tolerance, seed)?,
        check_pixel_ce(trials, step, tolerance, seed ^ 0x9e37_79b9)?,
        check_heatmap_mse(trials, step, tolerance, seed ^ 0x7f4a_7c15)?,
        check_orientation_ce(trials, step, tolerance, seed ^ 0x1656_67b1)?,
        check_stage2(trials, step, tolerance, seed ^ 0x27d4_eb2f)?,
        check_fusion_mlp(trials, step, tolerance, seed ^ 0x1f83_d9ab)?,
    ])
}

fn fold(name: &'static str, trials: usize, tolerance: f64, reports: Vec<GradReport>) -> SuiteEntry {
    let max_rel_error = reports
        .iter()
        .map(|r| r.max_rel_error)
        .fold(0.0f64, f64::max);
    SuiteEntry {
        name,
        trials,
        max_rel_error,
        passed: max_rel_error < tolerance,
    }
}

fn random_stack(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> HeatmapStack {
    let channels = (0..c)
        .map(|_| {
            let values: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            Heatmap::new(h, w, values).expect("valid random map")
        })
        .collect();
    HeatmapStack::new(channels).expect("valid random stack")
}

fn flatten(stack: &HeatmapStack) -> Vec<f64> {
    stack
        .channels()
        .iter()
        .flat_map(|ch| ch.values().iter().copied())
        .collect()
}

fn unflatten(flat: &[f64], c: usize, h: usize, w: usize) -> HeatmapStack {
    let channels = flat
        .chunks(h * w)
        .map(|ch| Heatmap::new(h, w, ch.to_vec()).expect("valid chunk"))
        .collect::<Vec<_>>();
    debug_assert_eq!(channels.len(), c);
    HeatmapStack::new(channels).expect("valid stack")
}

// Central differences at h=1e-5 in f64 resolve gradients down to roughly
// 1e-10; a coordinate whose true gradient sits below `min_nonzero` would be
// compared against rounding dust. Instances are redrawn until every
// coordinate is resolvable (exact structural zeros optionally allowed; their
// differences are bitwise zero).
fn well_conditioned(analytic: &[f64], min_nonzero: f64, allow_exact_zero: bool) -> bool {
    analytic.iter().all(|&a| {
        if a == 0.0 {
            allow_exact_zero
        } else {
            a.abs() >= min_nonzero
        }
    })
}

const MIN_CHECKED_GRAD: f64 = 1e-5;

// A forward pass suitable for differencing: an embedding of O(1) norm with
// at least two live coordinates (the loss is exactly scale-invariant along a
// lone live coordinate, so its analytic zero would be compared to dust) and
// every pre-activation clear of the rectifier kink.
fn fd_checkable(pass: &ForwardPass) -> bool {
    let emb = pass.embedding();
    let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
    let live = emb.iter().filter(|v| v.abs() > 0.01).count();
    let clear_of_kinks = pass
        .preactivations()
        .iter()
        .all(|z| z.iter().all(|v| v.abs() > 1e-3));
    norm > 0.05 && live >= 2 && clear_of_kinks
}

fn check_l2softmax(trials: usize, step: f64, tol: f64, seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (5, 8);
    let mut reports = Vec::with_capacity(trials);
    for _ in 0..trials {
        let (params, x, label, grads) = loop {
            let weights = Matrix::from_vec(
                n,
                d,
                (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )?;
            let biases: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            let params = L2SoftmaxParams::new(weights, biases, rng.random_range(0.5..5.0))?;
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if x.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.1 {
                continue;
            }
            let label = rng.random_range(0..n);
            let grads = l2softmax_grad(&x, label, &params)?;
            let mut flat = grads.input.clone();
            flat.extend_from_slice(grads.weights.data());
            flat.extend_from_slice(&grads.biases);
            flat.push(grads.alpha);
            if well_conditioned(&flat, MIN_CHECKED_GRAD, false) {
                break (params, x, label, grads);
            }
        };

        let mut theta = x.clone();
        theta.extend_from_slice(params.weights.data());
        theta.extend_from_slice(&params.biases);
        theta.push(params.alpha);
        let mut analytic = grads.input.clone();
        analytic.extend_from_slice(grads.weights.data());
        analytic.extend_from_slice(&grads.biases);
        analytic.push(grads.alpha);

        let f = |t: &[f64]| -> Result<f64> {
            let x2 = &t[..d];
            let w2 = Matrix::from_vec(n, d, t[d..d + n * d].to_vec())?;
            let b2 = t[d + n * d..d + n * d + n].to_vec();
            l2softmax_loss(x2, label, &L2SoftmaxParams::new(w2, b2, t[d + n * d + n])?)
        };
        reports.push(finite_diff_check(f, &theta, &analytic, step, tol)?);
    }
    Ok(fold("l2softmax", trials, tol, reports))
}

fn check_pixel_ce(trials: usize, step: f64, tol: f64, seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (21, 4, 4);
    let mut reports = Vec::with_capacity(trials);
    for _ in 0..trials {
        let logits = random_stack(&mut rng, c, h, w);
        let labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..c)).collect();
        let target = PixelTarget::new(h, w, labels)?;
        let analytic = flatten(&pixel_ce_grad(&logits, &target)?);
        let theta = flatten(&logits);
        let f = |t: &[f64]| pixel_ce_loss(&unflatten(t, c, h, w), &target);
        reports.push(finite_diff_check(f, &theta, &analytic, step, tol)?);
    }
    Ok(fold("pixel_ce", trials, tol, reports))
}

// Ground truth offset from the prediction by residuals bounded away from
// zero: the squared loss sums to O(10^3), and central differences on a
// coordinate whose true gradient is ~0 would measure only rounding noise.
fn offset_stack(rng: &mut ChaCha8Rng, pred: &HeatmapStack) -> HeatmapStack {
    let channels = pred
        .channels()
        .iter()
        .map(|ch| {
            let values: Vec<f64> = ch
                .values()
                .iter()
                .map(|v| {
                    let sign = if rng.random_range(0..2) == 0 { 1.0 } else { -1.0 };
                    v + sign * rng.random_range(0.25..1.0)
                })
                .collect();
            Heatmap::new(ch.height(), ch.width(), values).expect("valid offset map")
        })
        .collect();
    HeatmapStack::new(channels).expect("valid offset stack")
}

fn check_heatmap_mse(trials: usize, step: f64, tol: f64, seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (20, 8, 8);
    let mut reports = Vec::with_capacity(trials);
    for _ in 0..trials {
        let pred = random_stack(&mut rng, c, h, w);
        let gt = offset_stack(&mut rng, &pred);
        let analytic = flatten(&heatmap_mse_grad(&pred, &gt)?);
        let theta = flatten(&pred);
        let f = |t: &[f64]| heatmap_mse_loss(&unflatten(t, c, h, w), &gt);
        reports.push(finite_diff_check(f, &theta, &analytic, step, tol)?);
    }
    Ok(fold("heatmap_mse", trials, tol, reports))
}

fn check_orientation_ce(trials: usize, step: f64, tol: f64, seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut logits = [0.0f64; NUM_ORIENTATIONS];
        for l in &mut logits {
            *l = rng.random_range(-3.0..3.0);
        }
        let target = Orientation::ALL[rng.random_range(0..NUM_ORIENTATIONS)];
        let analytic = orientation_ce_grad(&logits, target);
        let f = |t: &[f64]| -> Result<f64> {
            let mut arr = [0.0; NUM_ORIENTATIONS];
            arr.copy_from_slice(t);
            Ok(orientation_ce_loss(&arr, target))
        };
        reports.push(finite_diff_check(f, &logits, &analytic, step, tol)?);
    }
    Ok(fold("orientation_ce", trials, tol, reports))
}

fn check_stage2(trials: usize, step: f64, tol: f64, seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (20, 4, 4);
    let lambda = 10.0;
    let mut reports = Vec::with_capacity(trials);
    for _ in 0..trials {
        let pred = random_stack(&mut rng, c, h, w);
        let gt = offset_stack(&mut rng, &pred);
        let mut logits = [0.0f64; NUM_ORIENTATIONS];
        for l in &mut logits {
            *l = rng.random_range(-2.0..2.0);
        }
        let target = Orientation::ALL[rng.random_range(0..NUM_ORIENTATIONS)];

        // Joint parameter vector: predicted heatmaps then orientation logits.
        let (hm_grad, logit_grad) = stage2_grad(&pred, &gt, &logits, target, lambda)?;
        let mut theta = flatten(&pred);
        theta.extend_from_slice(&logits);
        let mut analytic = flatten(&hm_grad);
        analytic.extend_from_slice(&logit_grad);

        let f = |t: &[f64]| -> Result<f64> {
            let pred2 = unflatten(&t[..c * h * w], c, h, w);
            let mut logits2 = [0.0; NUM_ORIENTATIONS];
            logits2.copy_from_slice(&t[c * h * w..]);
            stage2_loss(&pred2, &gt, &logits2, target, lambda)
        };
        reports.push(finite_diff_check(f, &theta, &analytic, step, tol)?);
    }
    Ok(fold("stage2_combined", trials, tol, reports))
}

fn check_fusion_mlp(trials: usize, step: f64, tol: f64, seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(trials);
    let mut attempt: u64 = 0;
    for _ in 0..trials {
        // Each attempt draws a fresh network and input so an unluckily
        // degenerate head cannot stall the redraw loop.
        let (head, input, label, grads) = loop {
            attempt += 1;
            let config = FusionConfig {
                global_dim: rng.random_range(2..5),
                local_dim: rng.random_range(2..5),
                hidden: vec![rng.random_range(4..7), rng.random_range(3..6)],
                classes: rng.random_range(2..5),
                seed: seed.wrapping_add(attempt),
                alpha_init: rng.random_range(1.0..10.0),
                ..FusionConfig::default()
            };
            let head = FusionHead::init(&config)?;
            let candidate: Vec<f64> = (0..config.input_dim())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let pass = forward(&head, &candidate)?;
            if !fd_checkable(&pass) {
                continue;
            }
            let label = rng.random_range(0..config.classes);
            let (_, grads) = backward(&head, &pass, label)?;
            if well_conditioned(&grads.to_flat(), MIN_CHECKED_GRAD, true) {
                break (head, candidate, label, grads);
            }
        };

        let theta = head.to_flat();
        let analytic = grads.to_flat();
        let mut probe = head.clone();
        let f = |t: &[f64]| -> Result<f64> {
            probe.set_from_flat(t)?;
            let pass = forward(&probe, &input)?;
            l2softmax_loss(pass.embedding(), label, &probe.classifier)
        };
        reports.push(finite_diff_check(f, &theta, &analytic, step, tol)?);
    }
    Ok(fold("fusion_mlp", trials, tol, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let entries = run_suite(3, DEFAULT_STEP, DEFAULT_TOLERANCE, 99).unwrap();
        assert_eq!(entries.len(), 6);
        for e in &entries {
            assert!(e.passed, "{} failed with {}", e.name, e.max_rel_error);
            assert_eq!(e.trials, 3);
        }
    }
}
