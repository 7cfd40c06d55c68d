//! The training losses with hand-derived gradients, plus a central
//! finite-difference harness for verifying them.
//!
//! All arithmetic here is 64-bit; tensors loaded from 32-bit blobs are
//! widened before they reach these functions. Class labels are 0-based.
//! Softmax cross entropies are evaluated through the max-shifted
//! log-sum-exp, so large logits do not overflow.

use crate::error::{Error, Result};
use crate::heatmaps::HeatmapStack;
use crate::matrix::Matrix;
use crate::orientation::{Orientation, NUM_ORIENTATIONS};

/// Inputs with a norm below this are rejected rather than clamped: a feature
/// vector this small upstream is a bug worth surfacing.
pub const MIN_INPUT_NORM: f64 = 1e-12;

/// Weight on the orientation term of the stage-2 combined loss.
pub const DEFAULT_STAGE2_LAMBDA: f64 = 10.0;

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Parameters of the hypersphere softmax classifier: per-class weight rows,
/// biases, and the trainable sphere radius `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct L2SoftmaxParams {
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub alpha: f64,
}

impl L2SoftmaxParams {
    pub fn new(weights: Matrix, biases: Vec<f64>, alpha: f64) -> Result<Self> {
        if weights.rows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs at least 2 classes, got {}",
                weights.rows()
            )));
        }
        if weights.cols() < 1 {
            return Err(Error::InvalidArgument(
                "classifier feature dimension must be >= 1".into(),
            ));
        }
        if biases.len() != weights.rows() {
            return Err(Error::dim("classifier biases", weights.rows(), biases.len()));
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive and finite, got {alpha}"
            )));
        }
        Ok(L2SoftmaxParams {
            weights,
            biases,
            alpha,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Gradients of the hypersphere softmax loss for one sample.
#[derive(Debug, Clone)]
pub struct L2SoftmaxGrads {
    pub input: Vec<f64>,
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub alpha: f64,
}

fn l2softmax_check(x: &[f64], label: usize, params: &L2SoftmaxParams) -> Result<f64> {
    if x.len() != params.feature_dim() {
        return Err(Error::dim("classifier input", params.feature_dim(), x.len()));
    }
    if label >= params.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of 0..{}",
            params.num_classes()
        )));
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < MIN_INPUT_NORM {
        return Err(Error::DegenerateInput(format!(
            "input norm {norm} below {MIN_INPUT_NORM}"
        )));
    }
    Ok(norm)
}

/// Class scores `W (alpha x / ||x||) + b`.
pub fn l2softmax_logits(x: &[f64], params: &L2SoftmaxParams) -> Result<Vec<f64>> {
    l2softmax_check(x, 0, params)?;
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = params.alpha / norm;
    let projected: Vec<f64> = x.iter().map(|v| v * scale).collect();
    let mut logits = params.weights.matvec(&projected);
    for (l, b) in logits.iter_mut().zip(&params.biases) {
        *l += b;
    }
    Ok(logits)
}

/// Cross entropy of the softmax over logits computed on the input projected
/// onto the radius-`alpha` hypersphere.
pub fn l2softmax_loss(x: &[f64], label: usize, params: &L2SoftmaxParams) -> Result<f64> {
    l2softmax_check(x, label, params)?;
    let logits = l2softmax_logits(x, params)?;
    Ok(log_sum_exp(&logits) - logits[label])
}

/// Analytic gradients with respect to the input, weights, biases and alpha.
///
/// The input gradient carries the normalization Jacobian
/// `alpha (I / ||x|| - x x^T / ||x||^3)`, so it is orthogonal to `x`.
pub fn l2softmax_grad(x: &[f64], label: usize, params: &L2SoftmaxParams) -> Result<L2SoftmaxGrads> {
    let norm = l2softmax_check(x, label, params)?;
    let unit: Vec<f64> = x.iter().map(|v| v / norm).collect();
    let projected: Vec<f64> = unit.iter().map(|v| v * params.alpha).collect();
    let mut logits = params.weights.matvec(&projected);
    for (l, b) in logits.iter_mut().zip(&params.biases) {
        *l += b;
    }
    let mut delta = softmax(&logits);
    delta[label] -= 1.0;

    let n = params.num_classes();
    let d = params.feature_dim();
    let mut d_weights = Matrix::zeros(n, d);
    for (j, &dj) in delta.iter().enumerate() {
        for (c, &p) in projected.iter().enumerate() {
            d_weights.set(j, c, dj * p);
        }
    }

    // d_projected = W^T delta; alpha and input gradients both flow through
    // it. The radial component doubles as the alpha gradient.
    let d_projected = params.weights.t_matvec(&delta);
    let radial: f64 = d_projected.iter().zip(&unit).map(|(g, u)| g * u).sum();
    let d_alpha = radial;
    let d_input: Vec<f64> = d_projected
        .iter()
        .zip(&unit)
        .map(|(g, u)| params.alpha / norm * (g - radial * u))
        .collect();

    Ok(L2SoftmaxGrads {
        input: d_input,
        weights: d_weights,
        biases: delta,
        alpha: d_alpha,
    })
}

/// Dense per-pixel class labels for the coarse heatmap stage. Labels are
/// 0-based channel indices over the same `height x width` grid as the logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelTarget {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl PixelTarget {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(
                "pixel target",
                "height >= 1 and width >= 1",
                format!("{height}x{width}"),
            ));
        }
        if labels.len() != height * width {
            return Err(Error::dim("pixel target labels", height * width, labels.len()));
        }
        Ok(PixelTarget {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, x: usize, y: usize) -> usize {
        assert!(x < self.width && y < self.height, "pixel target index out of bounds");
        self.labels[y * self.width + x]
    }
}

fn pixel_ce_check(logits: &HeatmapStack, target: &PixelTarget) -> Result<()> {
    if logits.num_channels() < 2 {
        return Err(Error::InvalidArgument(format!(
            "per-pixel cross entropy needs at least 2 channels, got {}",
            logits.num_channels()
        )));
    }
    if logits.height() != target.height() || logits.width() != target.width() {
        return Err(Error::dim(
            "pixel target grid",
            format!("{}x{}", logits.height(), logits.width()),
            format!("{}x{}", target.height(), target.width()),
        ));
    }
    if let Some(&bad) = target.labels().iter().find(|&&l| l >= logits.num_channels()) {
        return Err(Error::InvalidArgument(format!(
            "pixel label {bad} out of 0..{}",
            logits.num_channels()
        )));
    }
    Ok(())
}

fn pixel_logits_at(logits: &HeatmapStack, idx: usize) -> Vec<f64> {
    logits
        .channels()
        .iter()
        .map(|ch| ch.values()[idx])
        .collect()
}

/// Mean over all pixels of the multi-class cross entropy against the target
/// channel, normalized by `height * width`.
pub fn pixel_ce_loss(logits: &HeatmapStack, target: &PixelTarget) -> Result<f64> {
    pixel_ce_check(logits, target)?;
    let pixels = logits.height() * logits.width();
    let mut total = 0.0;
    for idx in 0..pixels {
        let stacked = pixel_logits_at(logits, idx);
        total += log_sum_exp(&stacked) - stacked[target.labels()[idx]];
    }
    Ok(total / pixels as f64)
}

/// Gradient of [`pixel_ce_loss`] with respect to the logits:
/// `(softmax - onehot) / (height * width)` per pixel.
pub fn pixel_ce_grad(logits: &HeatmapStack, target: &PixelTarget) -> Result<HeatmapStack> {
    pixel_ce_check(logits, target)?;
    let pixels = logits.height() * logits.width();
    let scale = 1.0 / pixels as f64;
    let mut grad = HeatmapStack::zeros(logits.num_channels(), logits.height(), logits.width())?;
    for idx in 0..pixels {
        let stacked = pixel_logits_at(logits, idx);
        let mut p = softmax(&stacked);
        p[target.labels()[idx]] -= 1.0;
        for (k, pk) in p.into_iter().enumerate() {
            grad.channel_values_mut(k)[idx] = pk * scale;
        }
    }
    Ok(grad)
}

fn heatmap_pair_check(pred: &HeatmapStack, gt: &HeatmapStack) -> Result<()> {
    if pred.num_channels() != gt.num_channels()
        || pred.height() != gt.height()
        || pred.width() != gt.width()
    {
        return Err(Error::dim(
            "heatmap pair",
            format!("{}x{}x{}", gt.num_channels(), gt.height(), gt.width()),
            format!("{}x{}x{}", pred.num_channels(), pred.height(), pred.width()),
        ));
    }
    Ok(())
}

/// Heatmap regression loss: the unreduced sum of squared per-pixel residuals
/// over all channels. No averaging is applied; batch reduction, if any, is
/// the caller's choice.
pub fn heatmap_mse_loss(pred: &HeatmapStack, gt: &HeatmapStack) -> Result<f64> {
    heatmap_pair_check(pred, gt)?;
    let mut total = 0.0;
    for (pc, gc) in pred.channels().iter().zip(gt.channels()) {
        for (p, g) in pc.values().iter().zip(gc.values()) {
            let r = p - g;
            total += r * r;
        }
    }
    Ok(total)
}

/// Gradient of [`heatmap_mse_loss`] with respect to the prediction: `2 (h - h*)`.
pub fn heatmap_mse_grad(pred: &HeatmapStack, gt: &HeatmapStack) -> Result<HeatmapStack> {
    heatmap_pair_check(pred, gt)?;
    let mut grad = HeatmapStack::zeros(pred.num_channels(), pred.height(), pred.width())?;
    for k in 0..pred.num_channels() {
        let pc = pred.channel(k).values();
        let gc = gt.channel(k).values();
        for (out, (p, g)) in grad.channel_values_mut(k).iter_mut().zip(pc.iter().zip(gc)) {
            *out = 2.0 * (p - g);
        }
    }
    Ok(grad)
}

/// Viewpoint classification loss: cross entropy of the 8-way softmax.
pub fn orientation_ce_loss(logits: &[f64; NUM_ORIENTATIONS], target: Orientation) -> f64 {
    log_sum_exp(logits) - logits[target.index()]
}

/// Gradient of [`orientation_ce_loss`]: `softmax - onehot`.
pub fn orientation_ce_grad(
    logits: &[f64; NUM_ORIENTATIONS],
    target: Orientation,
) -> [f64; NUM_ORIENTATIONS] {
    let p = softmax(logits);
    let mut grad = [0.0; NUM_ORIENTATIONS];
    grad.copy_from_slice(&p);
    grad[target.index()] -= 1.0;
    grad
}

/// Stage-2 combined loss: heatmap regression plus `lambda` times the
/// orientation classification term.
pub fn stage2_loss(
    pred: &HeatmapStack,
    gt: &HeatmapStack,
    logits: &[f64; NUM_ORIENTATIONS],
    target: Orientation,
    lambda: f64,
) -> Result<f64> {
    if !lambda.is_finite() {
        return Err(Error::NonFinite("stage-2 lambda".into()));
    }
    Ok(heatmap_mse_loss(pred, gt)? + lambda * orientation_ce_loss(logits, target))
}

/// Gradients of [`stage2_loss`] with respect to the predicted heatmaps and
/// the orientation logits.
pub fn stage2_grad(
    pred: &HeatmapStack,
    gt: &HeatmapStack,
    logits: &[f64; NUM_ORIENTATIONS],
    target: Orientation,
    lambda: f64,
) -> Result<(HeatmapStack, [f64; NUM_ORIENTATIONS])> {
    if !lambda.is_finite() {
        return Err(Error::NonFinite("stage-2 lambda".into()));
    }
    let heatmap_grad = heatmap_mse_grad(pred, gt)?;
    let mut logit_grad = orientation_ce_grad(logits, target);
    for g in &mut logit_grad {
        *g *= lambda;
    }
    Ok((heatmap_grad, logit_grad))
}

/// Outcome of comparing an analytic gradient against central finite
/// differences, one relative error per parameter coordinate.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Checks `analytic` against `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate. Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    if analytic.len() != point.len() {
        return Err(Error::dim("analytic gradient", point.len(), analytic.len()));
    }
    let mut perturbed = point.to_vec();
    let mut rel_errors = Vec::with_capacity(point.len());
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for i in 0..point.len() {
        perturbed[i] = point[i] + step;
        let plus = f(&perturbed)?;
        perturbed[i] = point[i] - step;
        let minus = f(&perturbed)?;
        perturbed[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at perturbed coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
        rel_errors.push(rel);
    }
    Ok(GradReport {
        rel_errors,
        max_rel_error,
        worst_index,
        step,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmaps::Heatmap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FD_STEP: f64 = 1e-5;
    const FD_TOL: f64 = 1e-4;

    fn random_stack(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> HeatmapStack {
        let channels = (0..c)
            .map(|_| {
                let values: Vec<f64> = (0..h * w).map(|_| rng.random_range(lo..hi)).collect();
                Heatmap::new(h, w, values).unwrap()
            })
            .collect();
        HeatmapStack::new(channels).unwrap()
    }

    fn stack_from_flat(flat: &[f64], c: usize, h: usize, w: usize) -> HeatmapStack {
        assert_eq!(flat.len(), c * h * w);
        let channels = flat
            .chunks(h * w)
            .map(|ch| Heatmap::new(h, w, ch.to_vec()).unwrap())
            .collect();
        HeatmapStack::new(channels).unwrap()
    }

    fn flatten_stack(stack: &HeatmapStack) -> Vec<f64> {
        stack
            .channels()
            .iter()
            .flat_map(|ch| ch.values().iter().copied())
            .collect()
    }

    fn random_params(rng: &mut ChaCha8Rng, n: usize, d: usize) -> L2SoftmaxParams {
        let weights = Matrix::from_vec(
            n,
            d,
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let biases: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        L2SoftmaxParams::new(weights, biases, rng.random_range(0.5..5.0)).unwrap()
    }

    // Literal transcription of the classifier loss without the max-shift.
    fn naive_l2softmax(x: &[f64], label: usize, params: &L2SoftmaxParams) -> f64 {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let projected: Vec<f64> = x.iter().map(|v| params.alpha * v / norm).collect();
        let logits: Vec<f64> = (0..params.num_classes())
            .map(|j| {
                params
                    .weights
                    .row(j)
                    .iter()
                    .zip(&projected)
                    .map(|(w, p)| w * p)
                    .sum::<f64>()
                    + params.biases[j]
            })
            .collect();
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        -(logits[label].exp() / denom).ln()
    }

    #[test]
    fn l2softmax_closed_forms() {
        let params = L2SoftmaxParams::new(
            Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.0, 0.0],
            4.0,
        )
        .unwrap();
        let loss = l2softmax_loss(&[1.0, 0.0], 0, &params).unwrap();
        assert!((loss - (1.0 + (-4.0f64).exp()).ln()).abs() < 1e-12);

        // Zero weights: uniform logits, loss = ln N regardless of input.
        let zero = L2SoftmaxParams::new(Matrix::zeros(5, 3), vec![0.0; 5], 2.0).unwrap();
        let loss = l2softmax_loss(&[0.3, -0.2, 0.9], 2, &zero).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn l2softmax_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..100 {
            let params = random_params(&mut rng, 5, 8);
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            if x.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-3 {
                continue;
            }
            let label = rng.random_range(0..5);
            let stable = l2softmax_loss(&x, label, &params).unwrap();
            let naive = naive_l2softmax(&x, label, &params);
            assert!((stable - naive).abs() < 1e-10);
            assert!(stable >= 0.0);
        }
    }

    #[test]
    fn l2softmax_scale_invariant_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = random_params(&mut rng, 4, 6);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = l2softmax_loss(&x, 1, &params).unwrap();
        for c in [0.5, 2.0, 100.0] {
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            assert!((l2softmax_loss(&scaled, 1, &params).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn l2softmax_rejects_degenerate_and_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = random_params(&mut rng, 3, 4);
        assert!(matches!(
            l2softmax_loss(&[0.0; 4], 0, &params),
            Err(Error::DegenerateInput(_))
        ));
        assert!(l2softmax_loss(&[1e-13, 0.0, 0.0, 0.0], 0, &params).is_err());
        assert!(l2softmax_loss(&[1.0; 4], 3, &params).is_err());
        assert!(l2softmax_loss(&[1.0; 3], 0, &params).is_err());
    }

    #[test]
    fn l2softmax_gradient_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..20 {
            let (n, d) = (5, 8);
            let params = random_params(&mut rng, n, d);
            let mut x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            while x.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.1 {
                x = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            }
            let label = rng.random_range(0..n);

            // Flatten (x, W, b, alpha) into one parameter vector.
            let mut theta = x.clone();
            theta.extend_from_slice(params.weights.data());
            theta.extend_from_slice(&params.biases);
            theta.push(params.alpha);

            let grads = l2softmax_grad(&x, label, &params).unwrap();
            let mut analytic = grads.input.clone();
            analytic.extend_from_slice(grads.weights.data());
            analytic.extend_from_slice(&grads.biases);
            analytic.push(grads.alpha);

            let f = |t: &[f64]| -> Result<f64> {
                let x2 = &t[..d];
                let w2 = Matrix::from_vec(n, d, t[d..d + n * d].to_vec())?;
                let b2 = t[d + n * d..d + n * d + n].to_vec();
                let alpha2 = t[d + n * d + n];
                l2softmax_loss(x2, label, &L2SoftmaxParams::new(w2, b2, alpha2)?)
            };
            let report = finite_diff_check(f, &theta, &analytic, FD_STEP, FD_TOL).unwrap();
            assert!(report.passed(), "max rel err {}", report.max_rel_error);
        }
    }

    #[test]
    fn l2softmax_input_gradient_is_orthogonal_to_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..50 {
            let params = random_params(&mut rng, 6, 10);
            let x: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 0.1 {
                continue;
            }
            let grads = l2softmax_grad(&x, 3, &params).unwrap();
            let dot: f64 = grads.input.iter().zip(&x).map(|(g, v)| g * v).sum();
            let gnorm = grads.input.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dot.abs() <= 1e-8 * gnorm * norm + 1e-14);
        }
    }

    #[test]
    fn l2softmax_saturated_weight_gradient_vanishes() {
        // Strongly correct prediction: gradient w.r.t. the true-class row -> 0.
        let params = L2SoftmaxParams::new(
            Matrix::from_rows(vec![vec![50.0, 0.0], vec![-50.0, 0.0]]).unwrap(),
            vec![0.0, 0.0],
            1.0,
        )
        .unwrap();
        let grads = l2softmax_grad(&[1.0, 0.0], 0, &params).unwrap();
        for c in 0..2 {
            assert!(grads.weights.get(0, c).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_ce_uniform_and_saturated() {
        let logits = HeatmapStack::zeros(21, 4, 4).unwrap();
        let target = PixelTarget::new(4, 4, vec![0; 16]).unwrap();
        let loss = pixel_ce_loss(&logits, &target).unwrap();
        assert!((loss - 21.0f64.ln()).abs() < 1e-12);

        // +50 margin on the target channel everywhere.
        let mut hot = HeatmapStack::zeros(21, 4, 4).unwrap();
        for v in hot.channel_values_mut(5) {
            *v = 50.0;
        }
        let target = PixelTarget::new(4, 4, vec![5; 16]).unwrap();
        assert!(pixel_ce_loss(&hot, &target).unwrap() < 1e-9);
    }

    #[test]
    fn pixel_ce_matches_naive_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let logits = random_stack(&mut rng, 21, 4, 4, -2.0, 2.0);
        let labels: Vec<usize> = (0..16).map(|_| rng.random_range(0..21)).collect();
        let target = PixelTarget::new(4, 4, labels.clone()).unwrap();

        let loss = pixel_ce_loss(&logits, &target).unwrap();
        let mut naive = 0.0;
        for idx in 0..16 {
            let vals: Vec<f64> = (0..21).map(|k| logits.channel(k).values()[idx]).collect();
            let denom: f64 = vals.iter().map(|v| v.exp()).sum();
            naive += -(vals[labels[idx]].exp() / denom).ln();
        }
        naive /= 16.0;
        assert!((loss - naive).abs() < 1e-10);
        assert!(loss >= 0.0);

        let grad = pixel_ce_grad(&logits, &target).unwrap();
        let theta = flatten_stack(&logits);
        let analytic = flatten_stack(&grad);
        let f = |t: &[f64]| pixel_ce_loss(&stack_from_flat(t, 21, 4, 4), &target);
        let report = finite_diff_check(f, &theta, &analytic, FD_STEP, FD_TOL).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn pixel_ce_rejects_out_of_range_label() {
        let logits = HeatmapStack::zeros(21, 2, 2).unwrap();
        let target = PixelTarget::new(2, 2, vec![0, 1, 21, 3]).unwrap();
        assert!(pixel_ce_loss(&logits, &target).is_err());
    }

    #[test]
    fn heatmap_mse_examples() {
        let a = HeatmapStack::zeros(20, 4, 4).unwrap();
        assert_eq!(heatmap_mse_loss(&a, &a).unwrap(), 0.0);

        let mut b = a.clone();
        b.channel_values_mut(7)[5] = 0.5;
        assert!((heatmap_mse_loss(&b, &a).unwrap() - 0.25).abs() < 1e-15);

        let c = HeatmapStack::zeros(20, 4, 5).unwrap();
        assert!(heatmap_mse_loss(&a, &c).is_err());
    }

    #[test]
    fn heatmap_mse_matches_triple_loop_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let pred = random_stack(&mut rng, 20, 8, 8, -1.0, 1.0);
        let gt = random_stack(&mut rng, 20, 8, 8, -1.0, 1.0);

        let loss = heatmap_mse_loss(&pred, &gt).unwrap();
        let mut naive = 0.0;
        for k in 0..20 {
            for y in 0..8 {
                for x in 0..8 {
                    let r = pred.channel(k).get(x, y) - gt.channel(k).get(x, y);
                    naive += r * r;
                }
            }
        }
        assert!((loss - naive).abs() < 1e-10);

        let grad = heatmap_mse_grad(&pred, &gt).unwrap();
        let theta = flatten_stack(&pred);
        let analytic = flatten_stack(&grad);
        let f = |t: &[f64]| heatmap_mse_loss(&stack_from_flat(t, 20, 8, 8), &gt);
        let report = finite_diff_check(f, &theta, &analytic, FD_STEP, FD_TOL).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn heatmap_mse_invariant_to_shared_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred = random_stack(&mut rng, 4, 5, 5, 0.0, 1.0);
        let gt = random_stack(&mut rng, 4, 5, 5, 0.0, 1.0);
        let base = heatmap_mse_loss(&pred, &gt).unwrap();

        let shift = |s: &HeatmapStack| {
            let channels = s
                .channels()
                .iter()
                .map(|ch| {
                    Heatmap::new(
                        ch.height(),
                        ch.width(),
                        ch.values().iter().map(|v| v + 0.73).collect(),
                    )
                    .unwrap()
                })
                .collect();
            HeatmapStack::new(channels).unwrap()
        };
        let shifted = heatmap_mse_loss(&shift(&pred), &shift(&gt)).unwrap();
        assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn orientation_ce_examples() {
        let uniform = [0.0; 8];
        assert!((orientation_ce_loss(&uniform, Orientation::Rear) - 8.0f64.ln()).abs() < 1e-12);

        let mut hot = [0.0; 8];
        hot[Orientation::Left.index()] = 50.0;
        assert!(orientation_ce_loss(&hot, Orientation::Left) < 1e-9);
    }

    #[test]
    fn orientation_ce_matches_naive_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(505);
        for _ in 0..50 {
            let mut logits = [0.0f64; 8];
            for l in &mut logits {
                *l = rng.random_range(-3.0..3.0);
            }
            let target = Orientation::ALL[rng.random_range(0..8)];

            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            let naive = -(logits[target.index()].exp() / denom).ln();
            assert!((orientation_ce_loss(&logits, target) - naive).abs() < 1e-10);
            assert!(orientation_ce_loss(&logits, target) >= 0.0);

            let analytic = orientation_ce_grad(&logits, target);
            let f = |t: &[f64]| -> Result<f64> {
                let mut arr = [0.0; 8];
                arr.copy_from_slice(t);
                Ok(orientation_ce_loss(&arr, target))
            };
            let report =
                finite_diff_check(f, &logits, &analytic, FD_STEP, FD_TOL).unwrap();
            assert!(report.passed());
        }
    }

    #[test]
    fn softmax_losses_are_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut logits = [0.0; 8];
        for l in &mut logits {
            *l = rng.random_range(-2.0..2.0);
        }
        let base = orientation_ce_loss(&logits, Orientation::Right);
        let shifted = logits.map(|l| l + 13.5);
        assert!((orientation_ce_loss(&shifted, Orientation::Right) - base).abs() < 1e-9);

        let stack = random_stack(&mut rng, 5, 3, 3, -1.0, 1.0);
        let labels: Vec<usize> = (0..9).map(|_| rng.random_range(0..5)).collect();
        let target = PixelTarget::new(3, 3, labels).unwrap();
        let base = pixel_ce_loss(&stack, &target).unwrap();
        let shifted_stack = {
            let channels = stack
                .channels()
                .iter()
                .map(|ch| {
                    Heatmap::new(3, 3, ch.values().iter().map(|v| v + 7.0).collect()).unwrap()
                })
                .collect();
            HeatmapStack::new(channels).unwrap()
        };
        assert!((pixel_ce_loss(&shifted_stack, &target).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn stage2_combines_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        let pred = random_stack(&mut rng, 20, 4, 4, 0.0, 1.0);
        let gt = random_stack(&mut rng, 20, 4, 4, 0.0, 1.0);
        let mut logits = [0.0; 8];
        for l in &mut logits {
            *l = rng.random_range(-1.0..1.0);
        }
        let target = Orientation::RightRear;

        let h = heatmap_mse_loss(&pred, &gt).unwrap();
        let o = orientation_ce_loss(&logits, target);
        let combined = stage2_loss(&pred, &gt, &logits, target, 10.0).unwrap();
        assert!((combined - (h + 10.0 * o)).abs() < 1e-10);

        let zero_lambda = stage2_loss(&pred, &gt, &logits, target, 0.0).unwrap();
        assert_eq!(zero_lambda, h);
    }

    #[test]
    fn stage2_example_values() {
        // L_H = 2.0 from a single residual of sqrt(2); L_O controlled directly.
        let gt = HeatmapStack::zeros(1, 2, 2).unwrap();
        let mut pred = gt.clone();
        pred.channel_values_mut(0)[0] = 2.0f64.sqrt();
        let h = heatmap_mse_loss(&pred, &gt).unwrap();
        assert!((h - 2.0).abs() < 1e-12);

        // Pick logits whose CE equals 0.3 by construction: two-way margin m
        // with ln(1 + e^-m) = 0.3 extended to 8 classes via -inf-like padding.
        let m = -((0.3f64.exp() - 1.0).ln());
        let mut logits = [-1e3; 8];
        logits[0] = m;
        logits[1] = 0.0;
        let o = orientation_ce_loss(&logits, Orientation::Front);
        assert!((o - 0.3).abs() < 1e-9);

        let combined = stage2_loss(&pred, &gt, &logits, Orientation::Front, 10.0).unwrap();
        assert!((combined - 5.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_quadratic_is_exact_to_machine_order() {
        let f = |t: &[f64]| Ok(t.iter().map(|v| v * v).sum::<f64>());
        let point = [1.0, -2.0, 3.0, 0.5];
        let analytic: Vec<f64> = point.iter().map(|v| 2.0 * v).collect();
        let report = finite_diff_check(f, &point, &analytic, 1e-5, 1e-9).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn finite_diff_flags_corrupted_gradient() {
        let f = |t: &[f64]| Ok(t.iter().map(|v| v * v).sum::<f64>());
        let point = [1.0, -2.0, 3.0];
        let mut corrupted: Vec<f64> = point.iter().map(|v| 2.0 * v).collect();
        corrupted[1] *= 1.10;
        let report = finite_diff_check(f, &point, &corrupted, 1e-5, 1e-4).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst_index, 1);
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_nonfinite_loss() {
        let f = |_: &[f64]| Ok(1.0);
        assert!(finite_diff_check(f, &[1.0], &[0.0], 0.0, 1e-4).is_err());
        let nan = |_: &[f64]| Ok(f64::NAN);
        assert!(matches!(
            finite_diff_check(nan, &[1.0], &[0.0], 1e-5, 1e-4),
            Err(Error::NonFinite(_))
        ));
    }
}
