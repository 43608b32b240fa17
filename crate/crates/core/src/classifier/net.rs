//! Forward and backward passes.
//!
//! Layer order: 1x1(x2) convolution -> batch norm -> leaky ReLU -> 2x2(x1)
//! stride-1 max pool -> flatten -> fc1 (+dropout) -> fc2 (+dropout) ->
//! linear output -> softmax. The 1x1 convolution over `(modality, channel)`
//! fibers is a per-pixel matrix multiply, so activations are kept
//! pixel-major as `(n*h*w, channels)` matrices and only the pooling step
//! sees the spatial layout.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ClassifierSpec, Weights};
use crate::error::{Error, Result};

pub(super) const BN_EPS: f64 = 1e-5;

/// A batch packed for the network: `(n*h*w, m*c)` pixel rows.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub(super) x: Array2<f64>,
    pub(super) n: usize,
}

impl BatchInput {
    /// Pack samples of shape `(h, w, m, c)` after validating against the
    /// spec's input shape.
    pub fn from_samples(spec: &ClassifierSpec, samples: &[&Array4<f64>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid_input(
                "batch must contain at least one sample",
            ));
        }
        let expect = spec.input_dim();
        let (h, w, m, c) = expect;
        let mut x = Array2::zeros((samples.len() * h * w, m * c));
        for (i, s) in samples.iter().enumerate() {
            if s.dim() != expect {
                return Err(Error::invalid_input(format!(
                    "sample {} has shape {:?}, spec expects {:?}",
                    i,
                    s.dim(),
                    expect
                )));
            }
            let flat = s.to_shape((h * w, m * c)).expect("contiguous sample");
            x.slice_mut(ndarray::s![i * h * w..(i + 1) * h * w, ..])
                .assign(&flat);
        }
        Ok(BatchInput {
            x,
            n: samples.len(),
        })
    }
}

/// Activations cached by a training-mode forward pass.
pub struct BatchCache {
    pub(super) version: u64,
    pub(super) n: usize,
    x: Array2<f64>,
    /// Batch-norm input normalized by whichever statistics were used.
    x_hat: Array2<f64>,
    /// 1 / sqrt(var + eps) per channel.
    inv_std: Array1<f64>,
    batch_stats: bool,
    /// Post-leaky activations, pixel-major.
    act: Array2<f64>,
    /// Flat index into the pixel-major activation rows chosen by each pool
    /// window.
    pool_argmax: Vec<u32>,
    pooled: Array2<f64>,
    drop1: Option<Array2<f64>>,
    a1: Array2<f64>,
    drop2: Option<Array2<f64>>,
    a2: Array2<f64>,
    pub(super) probs: Array2<f64>,
}

/// Per-tensor gradients, in the same order as
/// [`Weights::trainable_slices`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub conv_w: Array2<f64>,
    pub conv_b: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.conv_w.as_slice().unwrap(),
            self.conv_b.as_slice().unwrap(),
            self.bn_gamma.as_slice().unwrap(),
            self.bn_beta.as_slice().unwrap(),
            self.fc1_w.as_slice().unwrap(),
            self.fc1_b.as_slice().unwrap(),
            self.fc2_w.as_slice().unwrap(),
            self.fc2_b.as_slice().unwrap(),
            self.out_w.as_slice().unwrap(),
            self.out_b.as_slice().unwrap(),
        ]
    }
}

pub(super) struct ForwardOpts {
    /// Use batch statistics (and update running ones) instead of the
    /// stored running statistics.
    pub batch_stats: bool,
    pub dropout: bool,
}

/// Force standard (row-major) layout; small matmuls can come back
/// column-major, which would break the flat parameter views.
fn std_layout(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let dim = a.dim();
        Array2::from_shape_vec(dim, a.iter().copied().collect()).expect("same element count")
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), rate: f64) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_fn(shape, |_| {
        if rng.gen_range(0.0..1.0) < rate {
            0.0
        } else {
            1.0 / keep
        }
    })
}

/// Batch-norm running statistics refreshed by a batch-stats forward pass;
/// the caller folds them back into the weights.
pub(super) struct RunningStatsUpdate {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Run the network, returning per-sample probabilities, the cache needed
/// for a backward pass, and (when `opts.batch_stats` is set) the refreshed
/// running statistics.
pub(super) fn forward(
    spec: &ClassifierSpec,
    weights: &Weights,
    version: u64,
    batch: &BatchInput,
    opts: &ForwardOpts,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(BatchCache, Option<RunningStatsUpdate>)> {
    let (h, w, _, _) = spec.input_dim();
    let n = batch.n;
    let c = spec.in_c;

    // conv: pixel-major rows x (m*c) against (c_out, m*c).
    let mut y = batch.x.dot(&weights.conv_w.t());
    y += &weights.conv_b;

    // batch norm per channel.
    let rows = y.nrows() as f64;
    let mut running_update = None;
    let (mean, var) = if opts.batch_stats {
        let mean = y.mean_axis(Axis(0)).expect("non-empty batch");
        let mut var = Array1::zeros(c);
        for j in 0..c {
            let col = y.column(j);
            let m = mean[j];
            var[j] = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / rows;
        }
        // Running statistics track the unbiased variance.
        let unbias = if rows > 1.0 { rows / (rows - 1.0) } else { 1.0 };
        let mut new_mean = weights.bn_running_mean.clone();
        let mut new_var = weights.bn_running_var.clone();
        for j in 0..c {
            new_mean[j] = (1.0 - spec.bn_momentum) * new_mean[j] + spec.bn_momentum * mean[j];
            new_var[j] = (1.0 - spec.bn_momentum) * new_var[j] + spec.bn_momentum * var[j] * unbias;
        }
        running_update = Some(RunningStatsUpdate {
            mean: new_mean,
            var: new_var,
        });
        (mean, var)
    } else {
        (
            weights.bn_running_mean.clone(),
            weights.bn_running_var.clone(),
        )
    };
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let mut x_hat = y;
    for j in 0..c {
        let m = mean[j];
        let s = inv_std[j];
        x_hat.column_mut(j).mapv_inplace(|v| (v - m) * s);
    }
    let mut act = x_hat.clone();
    for j in 0..c {
        let g = weights.bn_gamma[j];
        let b = weights.bn_beta[j];
        act.column_mut(j).mapv_inplace(|v| g * v + b);
    }

    // leaky ReLU.
    let slope = spec.leaky_slope;
    act.mapv_inplace(|v| if v >= 0.0 { v } else { slope * v });

    // 2x2 stride-1 max pool over the spatial grid.
    let (ph, pw) = (h - 1, w - 1);
    let mut pooled = Array2::zeros((n * ph * pw, c));
    let mut pool_argmax = vec![0u32; n * ph * pw * c];
    for i in 0..n {
        for py in 0..ph {
            for px in 0..pw {
                let out_row = (i * ph + py) * pw + px;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_row = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let row = (i * h + py + dy) * w + px + dx;
                            let v = act[(row, ch)];
                            if v > best {
                                best = v;
                                best_row = row;
                            }
                        }
                    }
                    pooled[(out_row, ch)] = best;
                    pool_argmax[out_row * c + ch] = best_row as u32;
                }
            }
        }
    }

    // flatten to (n, features).
    let feat = ph * pw * c;
    let pooled_flat = pooled
        .to_shape((n, feat))
        .expect("pooled is contiguous")
        .to_owned();

    let rate = spec.dropout;
    let mut rng = rng;
    let mut apply_dropout = |z: &Array2<f64>| -> (Array2<f64>, Option<Array2<f64>>) {
        if opts.dropout && rate > 0.0 {
            let rng = rng
                .as_deref_mut()
                .expect("dropout enabled but no RNG supplied");
            let mask = dropout_mask(rng, z.dim(), rate);
            (z * &mask, Some(mask))
        } else {
            (z.clone(), None)
        }
    };

    let z1 = pooled_flat.dot(&weights.fc1_w.t()) + &weights.fc1_b;
    let (a1, drop1) = apply_dropout(&z1);
    let z2 = a1.dot(&weights.fc2_w.t()) + &weights.fc2_b;
    let (a2, drop2) = apply_dropout(&z2);
    let logits = a2.dot(&weights.out_w.t()) + &weights.out_b;
    let probs = softmax_rows(&logits);

    let cache = BatchCache {
        version,
        n,
        x: batch.x.clone(),
        x_hat,
        inv_std,
        batch_stats: opts.batch_stats,
        act,
        pool_argmax,
        pooled: pooled_flat,
        drop1,
        a1,
        drop2,
        a2,
        probs,
    };
    Ok((cache, running_update))
}

/// Mean cross-entropy of cached probabilities against labels.
pub(super) fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -(probs[(i, y)].max(1e-300)).ln())
        .sum::<f64>()
        / n
}

/// Backpropagate the mean cross-entropy loss through a cached forward pass.
pub(super) fn backward(
    spec: &ClassifierSpec,
    weights: &Weights,
    cache: &BatchCache,
    labels: &[usize],
) -> Result<Gradients> {
    let n = cache.n;
    if labels.len() != n {
        return Err(Error::invalid_input(format!(
            "{} labels for a batch of {}",
            labels.len(),
            n
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid_input("labels must be 0 or 1"));
    }
    let (h, w, _, _) = spec.input_dim();
    let c = spec.in_c;

    // d loss / d logits for mean-reduced cross entropy after softmax.
    let mut dlogits = cache.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        dlogits[(i, y)] -= 1.0;
    }
    dlogits /= n as f64;

    let out_w_grad = std_layout(dlogits.t().dot(&cache.a2));
    let out_b_grad = dlogits.sum_axis(Axis(0));
    let mut da2 = dlogits.dot(&weights.out_w);
    if let Some(mask) = &cache.drop2 {
        da2 *= mask;
    }

    let fc2_w_grad = std_layout(da2.t().dot(&cache.a1));
    let fc2_b_grad = da2.sum_axis(Axis(0));
    let mut da1 = da2.dot(&weights.fc2_w);
    if let Some(mask) = &cache.drop1 {
        da1 *= mask;
    }

    let fc1_w_grad = std_layout(da1.t().dot(&cache.pooled));
    let fc1_b_grad = da1.sum_axis(Axis(0));
    let dpooled = da1.dot(&weights.fc1_w);

    // pool backward: scatter each pooled gradient to its argmax row.
    let (ph, pw) = (h - 1, w - 1);
    let mut dact = Array2::<f64>::zeros((n * h * w, c));
    {
        let dpooled_rows = dpooled
            .to_shape((n * ph * pw, c))
            .expect("contiguous gradient");
        for row in 0..n * ph * pw {
            for ch in 0..c {
                let src = cache.pool_argmax[row * c + ch] as usize;
                dact[(src, ch)] += dpooled_rows[(row, ch)];
            }
        }
    }

    // leaky ReLU backward; the pre-activation sign equals the
    // post-activation sign.
    let slope = spec.leaky_slope;
    ndarray::Zip::from(&mut dact)
        .and(&cache.act)
        .for_each(|g, &a| {
            if a < 0.0 {
                *g *= slope;
            }
        });

    // batch norm backward.
    let bn_gamma_grad = (&dact * &cache.x_hat).sum_axis(Axis(0));
    let bn_beta_grad = dact.sum_axis(Axis(0));
    let rows = (n * h * w) as f64;
    let mut dy = Array2::<f64>::zeros(dact.dim());
    if cache.batch_stats {
        // Full backward through the batch statistics.
        let sum_dxhat = {
            let mut s = Array1::zeros(c);
            for j in 0..c {
                s[j] = dact.column(j).sum() * weights.bn_gamma[j];
            }
            s
        };
        let sum_dxhat_xhat = {
            let mut s = Array1::zeros(c);
            for j in 0..c {
                s[j] = dact
                    .column(j)
                    .iter()
                    .zip(cache.x_hat.column(j))
                    .map(|(g, &xh)| g * weights.bn_gamma[j] * xh)
                    .sum::<f64>();
            }
            s
        };
        for j in 0..c {
            let g = weights.bn_gamma[j];
            let s = cache.inv_std[j];
            let col_dact = dact.column(j);
            let col_xhat = cache.x_hat.column(j);
            let mut col_dy = dy.column_mut(j);
            for ((out, &gin), &xh) in col_dy.iter_mut().zip(col_dact).zip(col_xhat) {
                let dxhat = gin * g;
                *out = s * (dxhat - sum_dxhat[j] / rows - xh * sum_dxhat_xhat[j] / rows);
            }
        }
    } else {
        // Frozen statistics: plain affine backward.
        for j in 0..c {
            let scale = weights.bn_gamma[j] * cache.inv_std[j];
            let col = dact.column(j);
            let mut col_dy = dy.column_mut(j);
            for (out, &gin) in col_dy.iter_mut().zip(col) {
                *out = gin * scale;
            }
        }
    }

    let conv_w_grad = std_layout(dy.t().dot(&cache.x));
    let conv_b_grad = dy.sum_axis(Axis(0));

    Ok(Gradients {
        conv_w: conv_w_grad,
        conv_b: conv_b_grad,
        bn_gamma: bn_gamma_grad,
        bn_beta: bn_beta_grad,
        fc1_w: fc1_w_grad,
        fc1_b: fc1_b_grad,
        fc2_w: fc2_w_grad,
        fc2_b: fc2_b_grad,
        out_w: out_w_grad,
        out_b: out_b_grad,
    })
}
