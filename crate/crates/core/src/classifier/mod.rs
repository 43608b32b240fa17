//! Shallow trainable classifiers over feature maps.
//!
//! Two architectures share one implementation: the single-modality
//! classifier applies `c` 1x1 filters to an `(h, w, c)` map, and the
//! dual-modality classifier applies `c` 1x1x2 filters across the fused
//! `(h, w, 2, c)` map, consuming the modality axis. Both are followed by
//! batch norm, leaky ReLU, a 2x2 stride-1 max pool, and the
//! 256 -> 128 -> 2 fully connected head with dropout 0.5 after each FC
//! layer. Training is Adam on mean cross-entropy over class-balanced
//! mini-batches.

mod net;

use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataprep::{balanced_index_batches, Label};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FusedFeatureMap};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub use net::{BatchCache, BatchInput, Gradients};

/// Which input rank a classifier consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// `(h, w, c)` feature maps, 1x1 convolution.
    SingleModality,
    /// `(h, w, 2, c)` fused maps, 1x1x2 convolution.
    DualModality,
}

/// Architecture hyperparameters. The convolution always has `in_c` filters;
/// the FC head is 256 -> 128 -> 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub leaky_slope: f64,
}

impl ClassifierSpec {
    pub fn single(in_h: usize, in_w: usize, in_c: usize) -> Self {
        ClassifierSpec {
            kind: ClassifierKind::SingleModality,
            in_h,
            in_w,
            in_c,
            fc1: 256,
            fc2: 128,
            dropout: 0.5,
            bn_momentum: 0.1,
            leaky_slope: 0.01,
        }
    }

    pub fn dual(in_h: usize, in_w: usize, in_c: usize) -> Self {
        ClassifierSpec {
            kind: ClassifierKind::DualModality,
            ..Self::single(in_h, in_w, in_c)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_h < 2 || self.in_w < 2 {
            return Err(Error::invalid_input(
                "input spatial dims must be at least 2x2 for the 2x2 stride-1 pool",
            ));
        }
        if self.in_c == 0 || self.fc1 == 0 || self.fc2 == 0 {
            return Err(Error::invalid_input(
                "channel and FC sizes must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid_input("dropout rate must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid_input(
                "batch-norm momentum must lie in [0, 1]",
            ));
        }
        Ok(())
    }

    /// Modality extent of the input: 1 or 2.
    pub fn modality_extent(&self) -> usize {
        match self.kind {
            ClassifierKind::SingleModality => 1,
            ClassifierKind::DualModality => 2,
        }
    }

    /// Canonical input shape `(h, w, m, c)`.
    pub fn input_dim(&self) -> (usize, usize, usize, usize) {
        (self.in_h, self.in_w, self.modality_extent(), self.in_c)
    }

    /// Flattened feature count after the stride-1 pool.
    pub fn flat_features(&self) -> usize {
        (self.in_h - 1) * (self.in_w - 1) * self.in_c
    }
}

/// All parameter tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `(c_out, m * c_in)`; the 1x1(x2) kernel as a per-pixel matrix.
    pub conv_w: Array2<f64>,
    pub conv_b: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub bn_running_mean: Array1<f64>,
    pub bn_running_var: Array1<f64>,
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

/// Names of the trainable tensors, in the canonical order used by the
/// optimizer and the gradient containers.
pub const TRAINABLE_TENSORS: [&str; 10] = [
    "conv_w", "conv_b", "bn_gamma", "bn_beta", "fc1_w", "fc1_b", "fc2_w", "fc2_b", "out_w", "out_b",
];

impl Weights {
    /// Fan-in scaled uniform initialization, deterministic per seed.
    fn init(spec: &ClassifierSpec, seed: u64) -> Self {
        let m = spec.modality_extent();
        let c = spec.in_c;
        let feat = spec.flat_features();
        let uniform = |label: &str, rows: usize, cols: usize| -> Array2<f64> {
            let mut rng = crate::rng::stream(seed, label);
            let bound = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        };
        Weights {
            conv_w: uniform("init-conv", c, m * c),
            conv_b: Array1::zeros(c),
            bn_gamma: Array1::ones(c),
            bn_beta: Array1::zeros(c),
            bn_running_mean: Array1::zeros(c),
            bn_running_var: Array1::ones(c),
            fc1_w: uniform("init-fc1", spec.fc1, feat),
            fc1_b: Array1::zeros(spec.fc1),
            fc2_w: uniform("init-fc2", spec.fc2, spec.fc1),
            fc2_b: Array1::zeros(spec.fc2),
            out_w: uniform("init-out", 2, spec.fc2),
            out_b: Array1::zeros(2),
        }
    }

    /// Mutable flat views of the trainable tensors, in canonical order.
    pub fn trainable_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let Weights {
            conv_w,
            conv_b,
            bn_gamma,
            bn_beta,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            out_w,
            out_b,
            ..
        } = self;
        vec![
            conv_w.as_slice_mut().unwrap(),
            conv_b.as_slice_mut().unwrap(),
            bn_gamma.as_slice_mut().unwrap(),
            bn_beta.as_slice_mut().unwrap(),
            fc1_w.as_slice_mut().unwrap(),
            fc1_b.as_slice_mut().unwrap(),
            fc2_w.as_slice_mut().unwrap(),
            fc2_b.as_slice_mut().unwrap(),
            out_w.as_slice_mut().unwrap(),
            out_b.as_slice_mut().unwrap(),
        ]
    }

    fn shape_check(&self, spec: &ClassifierSpec) -> Result<()> {
        let m = spec.modality_extent();
        let c = spec.in_c;
        let feat = spec.flat_features();
        let ok = self.conv_w.dim() == (c, m * c)
            && self.conv_b.len() == c
            && self.bn_gamma.len() == c
            && self.bn_beta.len() == c
            && self.bn_running_mean.len() == c
            && self.bn_running_var.len() == c
            && self.fc1_w.dim() == (spec.fc1, feat)
            && self.fc1_b.len() == spec.fc1
            && self.fc2_w.dim() == (spec.fc2, spec.fc1)
            && self.fc2_b.len() == spec.fc2
            && self.out_w.dim() == (2, spec.fc2)
            && self.out_b.len() == 2;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid_input(
                "weight shapes do not chain with the spec",
            ))
        }
    }
}

/// Per-class probabilities with the arg-max class and its probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: [f64; 2],
    pub predicted_class: usize,
    pub confidence: f64,
}

impl Prediction {
    /// Build from a probability pair, breaking arg-max ties toward the
    /// lower class index.
    pub fn from_probs(probs: [f64; 2]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid_input(
                "probabilities must be finite and nonnegative",
            ));
        }
        if (probs[0] + probs[1] - 1.0).abs() > 1e-9 {
            return Err(Error::invalid_input(format!(
                "probabilities sum to {}, expected 1",
                probs[0] + probs[1]
            )));
        }
        let predicted_class = if probs[1] > probs[0] { 1 } else { 0 };
        Ok(Prediction {
            probs,
            predicted_class,
            confidence: probs[predicted_class],
        })
    }
}

/// Convert a feature map into the canonical `(h, w, 1, c)` input.
pub fn input_from_feature_map(map: &FeatureMap) -> Array4<f64> {
    let (h, w, c) = map.dim();
    Array4::from_shape_fn((h, w, 1, c), |(y, x, _, ch)| {
        f64::from(map.data[(y, x, ch)])
    })
}

/// Convert a fused map into the canonical `(h, w, 2, c)` input.
pub fn input_from_fused(map: &FusedFeatureMap) -> Array4<f64> {
    let (h, w, m, c) = map.dim();
    Array4::from_shape_fn((h, w, m, c), |(y, x, mi, ch)| {
        f64::from(map.data[(y, x, mi, ch)])
    })
}

/// Forward-pass variants for training-mode calls.
#[derive(Debug, Clone, Copy)]
pub struct TrainForwardOpts {
    /// Normalize with batch statistics (and update the running ones).
    /// Disable to freeze batch norm, e.g. for gradient checks.
    pub batch_stats: bool,
    pub dropout: bool,
}

impl Default for TrainForwardOpts {
    fn default() -> Self {
        TrainForwardOpts {
            batch_stats: true,
            dropout: true,
        }
    }
}

/// A classifier: spec plus weights. Forward passes in eval mode are pure;
/// training-mode passes update batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Classifier {
    spec: ClassifierSpec,
    weights: Weights,
    /// Bumped on every parameter mutation; caches from older versions are
    /// rejected by [`Classifier::backward`].
    version: u64,
}

impl Classifier {
    pub fn new(spec: ClassifierSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let weights = Weights::init(&spec, seed);
        Ok(Classifier {
            spec,
            weights,
            version: 0,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Training-mode forward pass over a batch.
    pub fn forward_train(
        &mut self,
        samples: &[&Array4<f64>],
        opts: TrainForwardOpts,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BatchCache> {
        if opts.dropout && self.spec.dropout > 0.0 && rng.is_none() {
            return Err(Error::invalid_input("dropout requires an RNG"));
        }
        let batch = BatchInput::from_samples(&self.spec, samples)?;
        let (cache, running_update) = net::forward(
            &self.spec,
            &self.weights,
            self.version,
            &batch,
            &net::ForwardOpts {
                batch_stats: opts.batch_stats,
                dropout: opts.dropout && self.spec.dropout > 0.0,
            },
            rng,
        )?;
        // Running-statistic refreshes are not parameter updates; caches
        // stay valid.
        if let Some(update) = running_update {
            self.weights.bn_running_mean = update.mean;
            self.weights.bn_running_var = update.var;
        }
        Ok(cache)
    }

    /// Mean cross-entropy of a cached forward pass.
    pub fn loss(&self, cache: &BatchCache, labels: &[usize]) -> f64 {
        net::cross_entropy(&cache.probs, labels)
    }

    /// Gradients of the mean cross-entropy for the batch behind `cache`.
    /// The cache must come from this classifier's current weights.
    pub fn backward(&self, cache: &BatchCache, labels: &[usize]) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::InvalidState(format!(
                "stale activation cache: weights are at version {}, cache at {}",
                self.version, cache.version
            )));
        }
        net::backward(&self.spec, &self.weights, cache, labels)
    }

    /// Eval-mode forward pass: running batch-norm statistics, no dropout.
    /// Deterministic.
    pub fn forward_eval(&self, samples: &[&Array4<f64>]) -> Result<Vec<Prediction>> {
        let batch = BatchInput::from_samples(&self.spec, samples)?;
        let (cache, _) = net::forward(
            &self.spec,
            &self.weights,
            self.version,
            &batch,
            &net::ForwardOpts {
                batch_stats: false,
                dropout: false,
            },
            None,
        )?;
        (0..samples.len())
            .map(|i| Prediction::from_probs([cache.probs[(i, 0)], cache.probs[(i, 1)]]))
            .collect()
    }

    /// Eval-mode prediction for one sample.
    pub fn predict(&self, sample: &Array4<f64>) -> Result<Prediction> {
        Ok(self
            .forward_eval(&[sample])?
            .pop()
            .expect("one sample in, one out"))
    }

    fn apply_adam_step(&mut self, adam: &mut Adam, grads: &Gradients, cfg: &TrainConfig) {
        adam.step(self.weights.trainable_slices_mut(), grads.slices(), cfg);
        self.version += 1;
    }

    /// Serialize as a directory: `spec.json` plus one TNSR file (f64) per
    /// tensor. Bit-exact round trip.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let descriptor = WeightsDescriptor {
            format: FORMAT_TAG.to_string(),
            spec: self.spec.clone(),
        };
        std::fs::write(
            dir.join("spec.json"),
            serde_json::to_vec_pretty(&descriptor)?,
        )?;
        let m = self.spec.modality_extent();
        let c = self.spec.in_c;
        let save1 = |name: &str, a: &Array1<f64>| -> Result<()> {
            write_tensor(
                dir.join(format!("{name}.tnsr")),
                &Tensor::from_f64(vec![a.len()], a.to_vec())?,
            )
        };
        let save2 = |name: &str, a: &Array2<f64>, dims: Vec<usize>| -> Result<()> {
            write_tensor(
                dir.join(format!("{name}.tnsr")),
                &Tensor::from_f64(dims, a.iter().copied().collect())?,
            )
        };
        // The conv kernel is stored with its semantic rank-3 shape.
        save2("conv_w", &self.weights.conv_w, vec![c, m, c])?;
        save1("conv_b", &self.weights.conv_b)?;
        save1("bn_gamma", &self.weights.bn_gamma)?;
        save1("bn_beta", &self.weights.bn_beta)?;
        save1("bn_running_mean", &self.weights.bn_running_mean)?;
        save1("bn_running_var", &self.weights.bn_running_var)?;
        save2(
            "fc1_w",
            &self.weights.fc1_w,
            vec![self.spec.fc1, self.spec.flat_features()],
        )?;
        save1("fc1_b", &self.weights.fc1_b)?;
        save2(
            "fc2_w",
            &self.weights.fc2_w,
            vec![self.spec.fc2, self.spec.fc1],
        )?;
        save1("fc2_b", &self.weights.fc2_b)?;
        save2("out_w", &self.weights.out_w, vec![2, self.spec.fc2])?;
        save1("out_b", &self.weights.out_b)?;
        Ok(())
    }

    /// Load a directory written by [`Classifier::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let descriptor: WeightsDescriptor =
            serde_json::from_slice(&std::fs::read(dir.join("spec.json"))?)?;
        if descriptor.format != FORMAT_TAG {
            return Err(Error::invalid_input(format!(
                "unknown weight container format {:?}",
                descriptor.format
            )));
        }
        let spec = descriptor.spec;
        spec.validate()?;
        let load1 = |name: &str| -> Result<Array1<f64>> {
            let t = read_tensor(dir.join(format!("{name}.tnsr")))?;
            Ok(Array1::from_vec(t.as_f64()?.to_vec()))
        };
        let load2 = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
            let t = read_tensor(dir.join(format!("{name}.tnsr")))?;
            let values = t.as_f64()?.to_vec();
            Array2::from_shape_vec((rows, cols), values).map_err(|_| {
                Error::invalid_input(format!("tensor {name} does not match spec shape"))
            })
        };
        let m = spec.modality_extent();
        let c = spec.in_c;
        let weights = Weights {
            conv_w: load2("conv_w", c, m * c)?,
            conv_b: load1("conv_b")?,
            bn_gamma: load1("bn_gamma")?,
            bn_beta: load1("bn_beta")?,
            bn_running_mean: load1("bn_running_mean")?,
            bn_running_var: load1("bn_running_var")?,
            fc1_w: load2("fc1_w", spec.fc1, spec.flat_features())?,
            fc1_b: load1("fc1_b")?,
            fc2_w: load2("fc2_w", spec.fc2, spec.fc1)?,
            fc2_b: load1("fc2_b")?,
            out_w: load2("out_w", 2, spec.fc2)?,
            out_b: load1("out_b")?,
        };
        weights.shape_check(&spec)?;
        Ok(Classifier {
            spec,
            weights,
            version: 0,
        })
    }
}

const FORMAT_TAG: &str = "dynafuse-weights-v1";

#[derive(Serialize, Deserialize)]
struct WeightsDescriptor {
    format: String,
    spec: ClassifierSpec,
}

/// Adam settings and training-loop configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid_input(
                "learning rate must be finite and nonnegative",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::invalid_input("epochs must be at least 1"));
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::invalid_input(
                "batch size must be an even number >= 2",
            ));
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    fn new(weights: &mut Weights) -> Self {
        let shapes: Vec<usize> = weights
            .trainable_slices_mut()
            .iter()
            .map(|s| s.len())
            .collect();
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// A trained classifier plus its per-epoch mean training loss.
pub struct TrainOutcome {
    pub classifier: Classifier,
    pub loss_trace: Vec<f64>,
}

/// Train a classifier on `(input, label)` pairs with class-balanced
/// mini-batches. Deterministic per `cfg.seed`.
pub fn train(
    spec: &ClassifierSpec,
    inputs: &[Array4<f64>],
    labels: &[Label],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::invalid_input(format!(
            "{} inputs vs {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let mut classifier = Classifier::new(spec.clone(), cfg.seed)?;
    let mut adam = Adam::new(&mut classifier.weights);
    let mut dropout_rng = crate::rng::stream(cfg.seed, "dropout");
    let label_indices: Vec<usize> = labels.iter().map(Label::as_index).collect();

    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batch_size = cfg.batch_size.min(round_down_even(inputs.len()).max(2));
        let batches = balanced_index_batches(labels, batch_size, cfg.seed, epoch as u64)?;
        let mut loss_sum = 0.0;
        let mut sample_count = 0usize;
        for batch in &batches {
            let samples: Vec<&Array4<f64>> = batch.iter().map(|&i| &inputs[i]).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| label_indices[i]).collect();
            let cache = classifier.forward_train(
                &samples,
                TrainForwardOpts::default(),
                Some(&mut dropout_rng),
            )?;
            let loss = classifier.loss(&cache, &batch_labels);
            if !loss.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "training diverged at epoch {}",
                    epoch + 1
                )));
            }
            let grads = classifier.backward(&cache, &batch_labels)?;
            classifier.apply_adam_step(&mut adam, &grads, cfg);
            loss_sum += loss * batch.len() as f64;
            sample_count += batch.len();
        }
        loss_trace.push(loss_sum / sample_count as f64);
    }
    Ok(TrainOutcome {
        classifier,
        loss_trace,
    })
}

fn round_down_even(n: usize) -> usize {
    n - n % 2
}

/// Central finite-difference gradients of the mean cross-entropy, computed
/// purely from forward passes (batch norm frozen, dropout off). Serves as
/// the independent oracle for [`Classifier::backward`]. Parameters are
/// perturbed in place and restored up to floating-point rounding.
pub fn finite_difference_grads(
    classifier: &mut Classifier,
    samples: &[&Array4<f64>],
    labels: &[usize],
    step: f64,
) -> Result<Gradients> {
    let frozen = TrainForwardOpts {
        batch_stats: false,
        dropout: false,
    };
    let mut flat: Vec<Vec<f64>> = Vec::with_capacity(TRAINABLE_TENSORS.len());
    let lens: Vec<usize> = classifier
        .weights
        .trainable_slices_mut()
        .iter()
        .map(|s| s.len())
        .collect();
    for (t, &len) in lens.iter().enumerate() {
        let mut grads_t = vec![0.0; len];
        for i in 0..len {
            {
                let mut slices = classifier.weights.trainable_slices_mut();
                slices[t][i] += step;
            }
            let cache = classifier.forward_train(samples, frozen, None)?;
            let loss_plus = classifier.loss(&cache, labels);
            {
                let mut slices = classifier.weights.trainable_slices_mut();
                slices[t][i] -= 2.0 * step;
            }
            let cache = classifier.forward_train(samples, frozen, None)?;
            let loss_minus = classifier.loss(&cache, labels);
            {
                let mut slices = classifier.weights.trainable_slices_mut();
                slices[t][i] += step;
            }
            grads_t[i] = (loss_plus - loss_minus) / (2.0 * step);
        }
        flat.push(grads_t);
    }
    let w = &classifier.weights;
    Ok(Gradients {
        conv_w: Array2::from_shape_vec(w.conv_w.dim(), flat[0].clone()).unwrap(),
        conv_b: Array1::from_vec(flat[1].clone()),
        bn_gamma: Array1::from_vec(flat[2].clone()),
        bn_beta: Array1::from_vec(flat[3].clone()),
        fc1_w: Array2::from_shape_vec(w.fc1_w.dim(), flat[4].clone()).unwrap(),
        fc1_b: Array1::from_vec(flat[5].clone()),
        fc2_w: Array2::from_shape_vec(w.fc2_w.dim(), flat[6].clone()).unwrap(),
        fc2_b: Array1::from_vec(flat[7].clone()),
        out_w: Array2::from_shape_vec(w.out_w.dim(), flat[8].clone()).unwrap(),
        out_b: Array1::from_vec(flat[9].clone()),
    })
}

/// Largest relative error between analytic and finite-difference gradients.
///
/// Discrepancies below `noise_floor` are skipped: with an O(1) loss and
/// step 1e-5, central differences carry roundoff of order 1e-11 and
/// truncation of order 1e-10, so absolute differences down there say
/// nothing about the backward pass.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients, noise_floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.slices().into_iter().zip(numeric.slices()) {
        for (&x, &y) in a.iter().zip(n) {
            let diff = (x - y).abs();
            if diff < noise_floor {
                continue;
            }
            let rel = diff / x.abs().max(y.abs());
            worst = worst.max(rel);
        }
    }
    worst
}
