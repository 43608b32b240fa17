//! Rank pooling: compress an ordered slice stack into one fixed-size
//! "dynamic feature image".
//!
//! A linear scoring function `S(t|d) = <d, V_t>` is fitted over the prefix
//! means `V_t` of per-slice features so that later slices score higher. The
//! parameter vector `d*` that achieves this ordering summarizes the
//! slice-to-slice change of the whole stack and is rendered back as an
//! image. Fitting minimizes a pairwise hinge loss with a quadratic
//! regularizer:
//!
//! ```text
//! E(d) = lambda/2 * ||d||^2
//!      + mean over pairs q > t of max{0, 1 - S(q|d) + S(t|d)}
//! ```
//!
//! The objective is convex; we minimize it with deterministic full-batch
//! subgradient descent started at `d = 0`, by default with a backtracking
//! line search so the objective trace is non-increasing.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Per-slice feature vectors and their prefix means.
///
/// `psi[t]` is the feature of slice `t`; `prefix_means[t]` is the arithmetic
/// mean of `psi[0..=t]`.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    psi: Vec<Array1<f64>>,
    prefix_means: Vec<Array1<f64>>,
}

impl FeatureSequence {
    /// Build from raw per-slice features; prefix means are accumulated
    /// incrementally.
    pub fn from_features(psi: Vec<Array1<f64>>) -> Result<Self> {
        if psi.is_empty() {
            return Err(Error::invalid_input("feature sequence must not be empty"));
        }
        let dim = psi[0].len();
        if dim == 0 {
            return Err(Error::invalid_input("feature vectors must not be empty"));
        }
        if psi.iter().any(|v| v.len() != dim) {
            return Err(Error::invalid_input(
                "all feature vectors must share one dimension",
            ));
        }
        let mut prefix_means = Vec::with_capacity(psi.len());
        let mut running = Array1::<f64>::zeros(dim);
        for (t, v) in psi.iter().enumerate() {
            running += v;
            prefix_means.push(&running / (t + 1) as f64);
        }
        Ok(FeatureSequence { psi, prefix_means })
    }

    /// Number of slices `T`.
    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.psi[0].len()
    }

    pub fn psi(&self) -> &[Array1<f64>] {
        &self.psi
    }

    pub fn prefix_means(&self) -> &[Array1<f64>] {
        &self.prefix_means
    }
}

/// Step-size rule for the subgradient solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Constant step size. The objective may oscillate; the best iterate
    /// seen is returned.
    Fixed(f64),
    /// Halving line search from an adaptive base step; only descent steps
    /// are accepted, so the objective trace is non-increasing.
    Backtracking,
}

/// Solver settings for [`fit_rank_pooling`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPoolConfig {
    /// Regularizer weight, must be positive.
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once the objective decrease over one iteration falls below this.
    pub tolerance: f64,
    pub step_rule: StepRule,
}

impl Default for RankPoolConfig {
    fn default() -> Self {
        RankPoolConfig {
            lambda: 1.0,
            max_iters: 500,
            tolerance: 1e-10,
            step_rule: StepRule::Backtracking,
        }
    }
}

impl RankPoolConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid_input("lambda must be positive and finite"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid_input("max_iters must be at least 1"));
        }
        if self.tolerance <= 0.0 || self.tolerance.is_nan() {
            return Err(Error::invalid_input("tolerance must be positive"));
        }
        if let StepRule::Fixed(eta) = self.step_rule {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::invalid_input(
                    "fixed step size must be positive and finite",
                ));
            }
        }
        Ok(())
    }
}

/// Outcome of a rank-pooling fit.
#[derive(Debug, Clone)]
pub struct RankPoolFit {
    pub d: Array1<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// The pooled representation of a volume, rendered as an image.
#[derive(Debug, Clone)]
pub struct DynamicFeatureImage {
    pub source_id: String,
    /// Raw optimizer output, length `H * W`.
    pub d_star: Array1<f64>,
    /// `H x W x 3` with identical channels; min-max normalized `d_star`.
    pub raster: Array3<u8>,
    pub final_objective: f64,
    pub iterations: usize,
    pub lambda: f64,
    /// Slice count of the pooled volume.
    pub t_len: usize,
}

/// Sidecar metadata written next to an exported dynamic feature image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolRecord {
    pub source_id: String,
    pub t: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub final_objective: f64,
}

impl DynamicFeatureImage {
    pub fn record(&self) -> PoolRecord {
        PoolRecord {
            source_id: self.source_id.clone(),
            t: self.t_len,
            lambda: self.lambda,
            iterations: self.iterations,
            final_objective: self.final_objective,
        }
    }

    /// Save the raster as an RGB PNG.
    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let (h, w, _) = self.raster.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    self.raster[(y, x, 0)],
                    self.raster[(y, x, 1)],
                    self.raster[(y, x, 2)],
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path.as_ref())?;
        Ok(())
    }
}

/// Per-slice features of a volume: each slice flattened row-major, plus
/// prefix means. Errors on an empty volume.
pub fn extract_slice_features(volume: &Volume) -> Result<FeatureSequence> {
    if volume.is_empty() {
        return Err(Error::invalid_input(
            "cannot extract features from an empty volume",
        ));
    }
    let psi = volume
        .slices()
        .iter()
        .map(|s| Array1::from_iter(s.iter().copied()))
        .collect();
    FeatureSequence::from_features(psi)
}

/// Ranking score `S(t|d) = <d, v>` where `v` is a prefix-mean vector.
pub fn score(d: &Array1<f64>, v: &Array1<f64>) -> Result<f64> {
    if d.len() != v.len() {
        return Err(Error::invalid_input(format!(
            "dimension mismatch: d has {}, v has {}",
            d.len(),
            v.len()
        )));
    }
    Ok(d.dot(v))
}

fn check_pairable(d: &Array1<f64>, fs: &FeatureSequence) -> Result<()> {
    if fs.len() < 2 {
        return Err(Error::invalid_input(
            "need at least 2 slices to form ranking pairs",
        ));
    }
    if d.len() != fs.dim() {
        return Err(Error::invalid_input(format!(
            "d has dimension {}, features have {}",
            d.len(),
            fs.dim()
        )));
    }
    Ok(())
}

fn prefix_scores(d: &Array1<f64>, fs: &FeatureSequence) -> Vec<f64> {
    fs.prefix_means().iter().map(|v| d.dot(v)).collect()
}

/// The regularized pairwise hinge objective `E(d)`.
///
/// The hinge term is the plain mean over the `T(T-1)/2` ordered pairs, which
/// equals the `2/(T(T-1))` normalization and makes `E(0) = 1` exact.
pub fn objective(d: &Array1<f64>, fs: &FeatureSequence, lambda: f64) -> Result<f64> {
    check_pairable(d, fs)?;
    let s = prefix_scores(d, fs);
    let t_len = fs.len();
    let mut hinge_sum = 0.0;
    for t in 0..t_len {
        for q in (t + 1)..t_len {
            hinge_sum += (1.0 - s[q] + s[t]).max(0.0);
        }
    }
    let n_pairs = (t_len * (t_len - 1) / 2) as f64;
    Ok(0.5 * lambda * d.dot(d) + hinge_sum / n_pairs)
}

/// A subgradient of `E` at `d`:
///
/// ```text
/// g = lambda * d - mean over active pairs' (V_q - V_t)
/// ```
///
/// where a pair `q > t` is active iff its hinge term is strictly positive.
/// Pairs sitting exactly on the hinge kink contribute nothing, which is a
/// valid subgradient choice.
pub fn subgradient(d: &Array1<f64>, fs: &FeatureSequence, lambda: f64) -> Result<Array1<f64>> {
    check_pairable(d, fs)?;
    let s = prefix_scores(d, fs);
    let t_len = fs.len();
    // Net count of active pairs in which index k appears as q (positive)
    // versus as t (negative); the pair sum collapses to one weighted pass.
    let mut coeff = vec![0i64; t_len];
    for t in 0..t_len {
        for q in (t + 1)..t_len {
            if 1.0 - s[q] + s[t] > 0.0 {
                coeff[q] += 1;
                coeff[t] -= 1;
            }
        }
    }
    let n_pairs = (t_len * (t_len - 1) / 2) as f64;
    let mut g = d * lambda;
    for (k, &c) in coeff.iter().enumerate() {
        if c != 0 {
            g.scaled_add(-(c as f64) / n_pairs, &fs.prefix_means()[k]);
        }
    }
    Ok(g)
}

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-14;
const GRAD_NORM_STOP: f64 = 1e-12;

/// Minimize `E` by deterministic full-batch subgradient descent from
/// `d = 0`.
///
/// With [`StepRule::Backtracking`] only descent steps are accepted, so
/// `objective(d*) <= objective(0) = 1` always holds. With
/// [`StepRule::Fixed`] the best iterate seen is returned.
pub fn fit_rank_pooling(fs: &FeatureSequence, cfg: &RankPoolConfig) -> Result<RankPoolFit> {
    cfg.validate()?;
    let mut d = Array1::<f64>::zeros(fs.dim());
    let mut e = objective(&d, fs, cfg.lambda)?;

    let mut best_d = d.clone();
    let mut best_e = e;
    let mut base_step = 1.0 / cfg.lambda.max(1.0);
    let mut iterations = 0;

    for iter in 1..=cfg.max_iters {
        let g = subgradient(&d, fs, cfg.lambda)?;
        let g_norm_sq = g.dot(&g);
        if !g_norm_sq.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "non-finite subgradient at iteration {}",
                iter
            )));
        }
        if g_norm_sq.sqrt() < GRAD_NORM_STOP {
            break;
        }
        iterations = iter;

        match cfg.step_rule {
            StepRule::Fixed(eta) => {
                d.scaled_add(-eta, &g);
                let e_new = objective(&d, fs, cfg.lambda)?;
                if !e_new.is_finite() {
                    return Err(Error::NumericalFailure(format!(
                        "non-finite objective at iteration {}",
                        iter
                    )));
                }
                let decrease = e - e_new;
                e = e_new;
                if e < best_e {
                    best_e = e;
                    best_d.assign(&d);
                }
                if decrease.abs() < cfg.tolerance {
                    break;
                }
            }
            StepRule::Backtracking => {
                let mut eta = base_step;
                let mut accepted = None;
                while eta >= MIN_STEP {
                    let trial = &d - &(&g * eta);
                    let e_trial = objective(&trial, fs, cfg.lambda)?;
                    if !e_trial.is_finite() {
                        return Err(Error::NumericalFailure(format!(
                            "non-finite objective at iteration {}",
                            iter
                        )));
                    }
                    if e_trial <= e - ARMIJO_C * eta * g_norm_sq {
                        accepted = Some((trial, e_trial, eta));
                        break;
                    }
                    eta *= 0.5;
                }
                let Some((d_new, e_new, eta)) = accepted else {
                    // No descent step exists along -g at machine precision;
                    // we are at a kink minimum.
                    break;
                };
                let decrease = e - e_new;
                d = d_new;
                e = e_new;
                best_e = e;
                best_d.assign(&d);
                base_step = (eta * 2.0).min(1e6);
                if decrease < cfg.tolerance {
                    break;
                }
            }
        }
    }

    Ok(RankPoolFit {
        d: best_d,
        objective: best_e,
        iterations,
    })
}

/// Closed-form surrogate for the exact solver: a fixed linear combination of
/// the prefix means,
///
/// ```text
/// d_approx = sum over t of beta_t * V_t,
/// beta_t   = 2 * (T - t + 1) - (T + 1) * (H_T - H_{t-1}),   t = 1..T
/// ```
///
/// with `H_n` the n-th harmonic number and `H_0 = 0`. The coefficients sum
/// to zero, so constant sequences pool to the zero vector. This is a fast
/// path only; callers must opt in explicitly.
pub fn approximate_rank_pooling(fs: &FeatureSequence) -> Result<Array1<f64>> {
    if fs.len() < 2 {
        return Err(Error::invalid_input(
            "need at least 2 slices to form ranking pairs",
        ));
    }
    let coeffs = approx_coefficients(fs.len());
    let mut d = Array1::<f64>::zeros(fs.dim());
    for (v, &b) in fs.prefix_means().iter().zip(&coeffs) {
        d.scaled_add(b, v);
    }
    Ok(d)
}

/// The `beta_t` coefficients used by [`approximate_rank_pooling`].
pub fn approx_coefficients(t_len: usize) -> Vec<f64> {
    let mut harmonic = vec![0.0; t_len + 1];
    for n in 1..=t_len {
        harmonic[n] = harmonic[n - 1] + 1.0 / n as f64;
    }
    (1..=t_len)
        .map(|t| {
            2.0 * (t_len - t + 1) as f64 - (t_len + 1) as f64 * (harmonic[t_len] - harmonic[t - 1])
        })
        .collect()
}

/// Pool a whole volume: extract per-slice features, fit the ranking
/// function, and render `d*` as an `H x W x 3` raster.
///
/// The raster is the min-max normalization of `d*` over the whole image,
/// quantized to 8 bits and replicated across the three channels. A flat
/// `d*` (max equals min) renders as all zeros.
pub fn pool_volume(volume: &Volume, cfg: &RankPoolConfig) -> Result<DynamicFeatureImage> {
    check_poolable(volume)?;
    let fs = extract_slice_features(volume)?;
    let fit = fit_rank_pooling(&fs, cfg)?;
    let (h, w) = volume.slice_dim();
    let raster = render_raster(&fit.d, h, w);
    Ok(DynamicFeatureImage {
        source_id: volume.source_id().to_string(),
        d_star: fit.d,
        raster,
        final_objective: fit.objective,
        iterations: fit.iterations,
        lambda: cfg.lambda,
        t_len: volume.len(),
    })
}

/// Pool a volume through [`approximate_rank_pooling`] instead of the exact
/// solver, rendering the same way. The recorded objective is `E` evaluated
/// at the approximate vector with `cfg.lambda`; iterations are 0. This is
/// the explicit opt-in fast path, never the default.
pub fn pool_volume_approximate(
    volume: &Volume,
    cfg: &RankPoolConfig,
) -> Result<DynamicFeatureImage> {
    check_poolable(volume)?;
    let fs = extract_slice_features(volume)?;
    let d = approximate_rank_pooling(&fs)?;
    let final_objective = objective(&d, &fs, cfg.lambda)?;
    let (h, w) = volume.slice_dim();
    let raster = render_raster(&d, h, w);
    Ok(DynamicFeatureImage {
        source_id: volume.source_id().to_string(),
        d_star: d,
        raster,
        final_objective,
        iterations: 0,
        lambda: cfg.lambda,
        t_len: volume.len(),
    })
}

fn check_poolable(volume: &Volume) -> Result<()> {
    if volume.len() < 2 {
        return Err(Error::invalid_input(format!(
            "T < 2: rank pooling needs at least 2 slices, volume {:?} has {}",
            volume.source_id(),
            volume.len()
        )));
    }
    Ok(())
}

fn render_raster(d: &Array1<f64>, h: usize, w: usize) -> Array3<u8> {
    debug_assert_eq!(d.len(), h * w);
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut raster = Array3::<u8>::zeros((h, w, 3));
    if max > min {
        let range = max - min;
        let plane = Array2::from_shape_vec((h, w), d.to_vec()).expect("length checked");
        for ((y, x), &v) in plane.indexed_iter() {
            let q = ((v - min) / range * 255.0).round().clamp(0.0, 255.0) as u8;
            raster[(y, x, 0)] = q;
            raster[(y, x, 1)] = q;
            raster[(y, x, 2)] = q;
        }
    }
    raster
}
