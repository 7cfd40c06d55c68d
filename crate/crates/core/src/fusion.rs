//! Trainable fusion head: global and local feature vectors are concatenated,
//! passed through a shallow rectifier MLP, and classified with the
//! hypersphere softmax. The penultimate activation is the retrieval
//! embedding. Backpropagation is hand-derived and Adam drives the updates.

use crate::error::{Error, Result};
use crate::losses::{
    l2softmax_grad, l2softmax_logits, l2softmax_loss, L2SoftmaxParams, MIN_INPUT_NORM,
};
use crate::matrix::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_GLOBAL_DIM: usize = 2048;
pub const DEFAULT_LOCAL_DIM: usize = 2048;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_BATCH_SIZE: usize = 150;
pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_ALPHA_INIT: f64 = 30.0;

/// Shape and training hyper-parameters of the fusion head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub global_dim: usize,
    pub local_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub alpha_init: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            global_dim: DEFAULT_GLOBAL_DIM,
            local_dim: DEFAULT_LOCAL_DIM,
            hidden: vec![1024, 512],
            classes: 2,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            alpha_init: DEFAULT_ALPHA_INIT,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global_dim == 0 || self.local_dim == 0 {
            return Err(Error::InvalidArgument(
                "feature dimensions must be >= 1".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "hidden widths must be non-empty and >= 1".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !self.alpha_init.is_finite() || self.alpha_init <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha_init must be positive, got {}",
                self.alpha_init
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.global_dim + self.local_dim
    }
}

/// One affine layer; the rectifier is applied outside.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

/// Hidden affine layers with rectifier nonlinearities, topped by the
/// hypersphere softmax classifier. The last hidden activation is the
/// embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub global_dim: usize,
    pub local_dim: usize,
    pub layers: Vec<AffineLayer>,
    pub classifier: L2SoftmaxParams,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize) -> f64 {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.random_range(-bound..bound)
}

impl FusionHead {
    /// Seeded initialization: weights and biases uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(config: &FusionConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        FusionHead::init_with_rng(config, &mut rng)
    }

    fn init_with_rng(config: &FusionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.hidden.len());
        let mut fan_in = config.input_dim();
        for &width in &config.hidden {
            let mut weights = Matrix::zeros(width, fan_in);
            for w in weights.data_mut() {
                *w = uniform_fan_in(rng, fan_in);
            }
            let biases: Vec<f64> = (0..width).map(|_| uniform_fan_in(rng, fan_in)).collect();
            layers.push(AffineLayer { weights, biases });
            fan_in = width;
        }
        let mut cls_weights = Matrix::zeros(config.classes, fan_in);
        for w in cls_weights.data_mut() {
            *w = uniform_fan_in(rng, fan_in);
        }
        let cls_biases: Vec<f64> = (0..config.classes)
            .map(|_| uniform_fan_in(rng, fan_in))
            .collect();
        let classifier = L2SoftmaxParams::new(cls_weights, cls_biases, config.alpha_init)?;
        Ok(FusionHead {
            global_dim: config.global_dim,
            local_dim: config.local_dim,
            layers,
            classifier,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.global_dim + self.local_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers
            .last()
            .map(|l| l.weights.rows())
            .unwrap_or(self.input_dim())
    }

    pub fn num_params(&self) -> usize {
        let layer_params: usize = self
            .layers
            .iter()
            .map(|l| l.weights.data().len() + l.biases.len())
            .sum();
        layer_params + self.classifier.weights.data().len() + self.classifier.biases.len() + 1
    }

    /// Flattens all parameters in declaration order: each hidden layer's
    /// weights then biases, the classifier weights and biases, then alpha.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            flat.extend_from_slice(layer.weights.data());
            flat.extend_from_slice(&layer.biases);
        }
        flat.extend_from_slice(self.classifier.weights.data());
        flat.extend_from_slice(&self.classifier.biases);
        flat.push(self.classifier.alpha);
        flat
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("flat parameters", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.weights.data().len();
            layer.weights.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let n = layer.biases.len();
            layer.biases.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        let n = self.classifier.weights.data().len();
        self.classifier
            .weights
            .data_mut()
            .copy_from_slice(&flat[offset..offset + n]);
        offset += n;
        let n = self.classifier.biases.len();
        self.classifier.biases.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
        self.classifier.alpha = flat[offset];
        Ok(())
    }
}

/// Concatenation `[f_g || f_l]`, order preserved.
pub fn fuse(global: &[f64], local: &[f64]) -> Vec<f64> {
    let mut fused = Vec::with_capacity(global.len() + local.len());
    fused.extend_from_slice(global);
    fused.extend_from_slice(local);
    fused
}

/// Activations cached by [`forward`] for the backward pass. `activations[0]`
/// is the input; the last entry is the embedding.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    activations: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn embedding(&self) -> &[f64] {
        self.activations.last().expect("non-empty forward cache")
    }

    pub(crate) fn preactivations(&self) -> &[Vec<f64>] {
        &self.preacts
    }
}

/// Runs the affine/rectifier chain, caching every intermediate.
pub fn forward(head: &FusionHead, input: &[f64]) -> Result<ForwardPass> {
    if input.len() != head.input_dim() {
        return Err(Error::dim("fusion input", head.input_dim(), input.len()));
    }
    let mut activations = vec![input.to_vec()];
    let mut preacts = Vec::with_capacity(head.layers.len());
    for layer in &head.layers {
        let mut z = layer.weights.matvec(activations.last().unwrap());
        for (zi, b) in z.iter_mut().zip(&layer.biases) {
            *zi += b;
        }
        let a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
        preacts.push(z);
        activations.push(a);
    }
    Ok(ForwardPass {
        activations,
        preacts,
    })
}

/// Per-tensor gradients matching [`FusionHead::to_flat`]'s layout.
#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub layers: Vec<AffineLayer>,
    pub classifier_weights: Matrix,
    pub classifier_biases: Vec<f64>,
    pub alpha: f64,
}

impl FusionGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for layer in &self.layers {
            flat.extend_from_slice(layer.weights.data());
            flat.extend_from_slice(&layer.biases);
        }
        flat.extend_from_slice(self.classifier_weights.data());
        flat.extend_from_slice(&self.classifier_biases);
        flat.push(self.alpha);
        flat
    }
}

/// Full backward pass through the classifier and the rectifier chain.
/// Returns the sample loss along with the gradients.
pub fn backward(head: &FusionHead, pass: &ForwardPass, label: usize) -> Result<(f64, FusionGrads)> {
    if pass.activations.len() != head.layers.len() + 1
        || pass.activations[0].len() != head.input_dim()
    {
        return Err(Error::dim(
            "forward cache",
            format!("{} activations of input dim {}", head.layers.len() + 1, head.input_dim()),
            format!(
                "{} activations of input dim {}",
                pass.activations.len(),
                pass.activations[0].len()
            ),
        ));
    }
    for (layer, z) in head.layers.iter().zip(&pass.preacts) {
        if z.len() != layer.weights.rows() {
            return Err(Error::dim("forward cache layer", layer.weights.rows(), z.len()));
        }
    }

    let embedding = pass.embedding();
    let loss = l2softmax_loss(embedding, label, &head.classifier)?;
    let cls = l2softmax_grad(embedding, label, &head.classifier)?;

    let mut layer_grads: Vec<AffineLayer> = Vec::with_capacity(head.layers.len());
    let mut upstream = cls.input;
    for (idx, layer) in head.layers.iter().enumerate().rev() {
        let z = &pass.preacts[idx];
        let delta: Vec<f64> = upstream
            .iter()
            .zip(z)
            .map(|(u, &zi)| if zi > 0.0 { *u } else { 0.0 })
            .collect();
        let below = &pass.activations[idx];
        let mut d_weights = Matrix::zeros(layer.weights.rows(), layer.weights.cols());
        for (r, &dr) in delta.iter().enumerate() {
            for (c, &a) in below.iter().enumerate() {
                d_weights.set(r, c, dr * a);
            }
        }
        upstream = layer.weights.t_matvec(&delta);
        layer_grads.push(AffineLayer {
            weights: d_weights,
            biases: delta,
        });
    }
    layer_grads.reverse();

    Ok((
        loss,
        FusionGrads {
            layers: layer_grads,
            classifier_weights: cls.weights,
            classifier_biases: cls.biases,
            alpha: cls.alpha,
        },
    ))
}

/// Adam hyper-parameters. Defaults follow the standard bias-corrected form.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim("adam buffers", params.len(), grads.len()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adam gradients".into()));
    }
    if !config.learning_rate.is_finite() || config.learning_rate < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and >= 0, got {}",
            config.learning_rate
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grads[i];
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// One training example: the two feature vectors and the identity class.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    pub global_feature: Vec<f64>,
    pub local_feature: Vec<f64>,
    pub label: usize,
}

/// End-of-epoch statistics over the full training set.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Per-epoch statistics and a checksum of the final parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub params_checksum: u64,
}

fn fnv1a64(values: &[f64]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

/// Mini-batch Adam on the hypersphere softmax objective. Deterministic for a
/// fixed `(seed, config, data)` triple: initialization and the per-epoch
/// shuffle derive from one seeded generator, and per-sample gradients are
/// accumulated in batch order on a single thread.
pub fn train(config: &FusionConfig, samples: &[FusionSample]) -> Result<(FusionHead, TrainHistory)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::DegenerateInput("empty training set".into()));
    }
    let mut seen_labels = vec![false; config.classes];
    for (i, s) in samples.iter().enumerate() {
        if s.global_feature.len() != config.global_dim || s.local_feature.len() != config.local_dim
        {
            return Err(Error::dim(
                format!("sample {i} features"),
                format!("{}+{}", config.global_dim, config.local_dim),
                format!("{}+{}", s.global_feature.len(), s.local_feature.len()),
            ));
        }
        if s.label >= config.classes {
            return Err(Error::InvalidArgument(format!(
                "sample {i} label {} out of 0..{}",
                s.label, config.classes
            )));
        }
        seen_labels[s.label] = true;
    }
    if seen_labels.iter().filter(|&&b| b).count() < 2 {
        return Err(Error::DegenerateInput(
            "training set must contain at least 2 classes".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = FusionHead::init_with_rng(config, &mut rng)?;
    let mut flat = head.to_flat();
    let mut state = AdamState::new(flat.len());
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grad_acc = vec![0.0; flat.len()];
            for &idx in batch {
                let s = &samples[idx];
                let input = fuse(&s.global_feature, &s.local_feature);
                let pass = forward(&head, &input)?;
                let (_, grads) = backward(&head, &pass, s.label)?;
                for (acc, g) in grad_acc.iter_mut().zip(grads.to_flat()) {
                    *acc += g;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad_acc {
                *g *= scale;
            }
            adam_step(&mut flat, &grad_acc, &mut state, &adam)?;
            head.set_from_flat(&flat)?;
        }

        // Full pass with frozen parameters.
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for s in samples {
            let input = fuse(&s.global_feature, &s.local_feature);
            let pass = forward(&head, &input)?;
            loss_sum += l2softmax_loss(pass.embedding(), s.label, &head.classifier)?;
            let logits = l2softmax_logits(pass.embedding(), &head.classifier)?;
            let predicted = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            if predicted == s.label {
                correct += 1;
            }
        }
        epochs.push(EpochStats {
            mean_loss: loss_sum / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        });
    }

    let history = TrainHistory {
        epochs,
        params_checksum: fnv1a64(&flat),
    };
    Ok((head, history))
}

/// Penultimate activation for a fused input, normalized to unit length.
pub fn embed(head: &FusionHead, global: &[f64], local: &[f64]) -> Result<Vec<f64>> {
    if global.len() != head.global_dim || local.len() != head.local_dim {
        return Err(Error::dim(
            "embed input",
            format!("{}+{}", head.global_dim, head.local_dim),
            format!("{}+{}", global.len(), local.len()),
        ));
    }
    let pass = forward(head, &fuse(global, local))?;
    let emb = pass.embedding();
    let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < MIN_INPUT_NORM {
        return Err(Error::DegenerateInput(
            "embedding collapsed to zero norm".into(),
        ));
    }
    Ok(emb.iter().map(|v| v / norm).collect())
}
