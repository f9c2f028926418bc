//! One-dimensional Gaussian process regression with an RBF plus white-noise
//! kernel.
//!
//! `k(x, x') = s * exp(-(x - x')^2 / (2 l^2)) + n * [x == x']`, where the
//! length scale `l` is held fixed (0.6 by default) and is read in whatever
//! units the caller's inputs use. Predicted variances are for a new noisy
//! observation, so they lie in `[0, s + n]`.
//!
//! [`gp_fit`] uses a zero prior mean on the raw targets.
//! [`gp_fit_standardized`] first shifts and scales the targets to zero mean
//! and unit variance and undoes that on prediction.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

pub const DEFAULT_LENGTH_SCALE: f64 = 0.6;

/// Diagonal jitter tried, in order, when the Cholesky factorization fails.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Error, PartialEq)]
pub enum GpError {
    #[error("signal variance must be positive and finite, got {0}")]
    SignalVariance(f64),
    #[error("length scale must be positive and finite, got {0}")]
    LengthScale(f64),
    #[error("noise variance must be non-negative and finite, got {0}")]
    NoiseVariance(f64),
    #[error("{x} inputs but {y} targets")]
    LengthMismatch { x: usize, y: usize },
    #[error("no training points")]
    Empty,
    #[error("non-finite training data")]
    NonFinite,
    #[error("duplicate input {0} with zero noise variance makes the kernel matrix singular")]
    DuplicateInput(f64),
    #[error("kernel matrix is not positive definite even with jitter {0}")]
    NotPositiveDefinite(f64),
    #[error("invalid hyperparameter grid: {0}")]
    Grid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    signal_variance: f64,
    length_scale: f64,
    noise_variance: f64,
}

impl Kernel {
    pub fn new(
        signal_variance: f64,
        length_scale: f64,
        noise_variance: f64,
    ) -> Result<Self, GpError> {
        if !(signal_variance > 0.0 && signal_variance.is_finite()) {
            return Err(GpError::SignalVariance(signal_variance));
        }
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(GpError::LengthScale(length_scale));
        }
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(GpError::NoiseVariance(noise_variance));
        }
        Ok(Kernel {
            signal_variance,
            length_scale,
            noise_variance,
        })
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// RBF part only.
    pub fn rbf(&self, a: f64, b: f64) -> f64 {
        let d = (a - b) / self.length_scale;
        self.signal_variance * (-0.5 * d * d).exp()
    }

    pub fn prior_variance(&self) -> f64 {
        self.signal_variance + self.noise_variance
    }
}

#[derive(Debug, Clone)]
pub struct GpFit {
    x: Vec<f64>,
    kernel: Kernel,
    chol: Cholesky<f64, Dyn>,
    /// `(K + n I)^-1 y` on the internal target scale.
    weights: DVector<f64>,
    y_internal: DVector<f64>,
    y_mean: f64,
    y_scale: f64,
    jitter: f64,
}

fn check_data(x: &[f64], y: &[f64]) -> Result<(), GpError> {
    if x.len() != y.len() {
        return Err(GpError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.is_empty() {
        return Err(GpError::Empty);
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite);
    }
    Ok(())
}

fn factorize(x: &[f64], kernel: &Kernel) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    if kernel.noise_variance == 0.0 {
        let mut sorted = x.to_vec();
        sorted.sort_by(f64::total_cmp);
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(GpError::DuplicateInput(w[0]));
        }
    }
    let n = x.len();
    let gram = DMatrix::from_fn(n, n, |i, j| {
        kernel.rbf(x[i], x[j]) + if i == j { kernel.noise_variance } else { 0.0 }
    });
    for jitter in std::iter::once(0.0).chain(JITTER_LADDER) {
        let mut m = gram.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok((chol, jitter));
        }
    }
    Err(GpError::NotPositiveDefinite(
        JITTER_LADDER[JITTER_LADDER.len() - 1],
    ))
}

fn fit_internal(
    x: &[f64],
    y_internal: Vec<f64>,
    kernel: Kernel,
    y_mean: f64,
    y_scale: f64,
) -> Result<GpFit, GpError> {
    let (chol, jitter) = factorize(x, &kernel)?;
    let y_internal = DVector::from_vec(y_internal);
    let weights = chol.solve(&y_internal);
    Ok(GpFit {
        x: x.to_vec(),
        kernel,
        chol,
        weights,
        y_internal,
        y_mean,
        y_scale,
        jitter,
    })
}

/// Zero-mean GP fit on the raw targets.
pub fn gp_fit(x: &[f64], y: &[f64], kernel: Kernel) -> Result<GpFit, GpError> {
    check_data(x, y)?;
    fit_internal(x, y.to_vec(), kernel, 0.0, 1.0)
}

/// GP fit on targets standardized to zero mean and unit variance.
///
/// `kernel` variances are on the standardized scale. A constant target
/// (including a single point) is only shifted.
pub fn gp_fit_standardized(x: &[f64], y: &[f64], kernel: Kernel) -> Result<GpFit, GpError> {
    check_data(x, y)?;
    let (mean, scale) = standardization(y);
    fit_internal(
        x,
        y.iter().map(|v| (v - mean) / scale).collect(),
        kernel,
        mean,
        scale,
    )
}

fn standardization(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

impl GpFit {
    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// Diagonal jitter that was needed for the factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn inputs(&self) -> &[f64] {
        &self.x
    }

    /// Log marginal likelihood of the (internal-scale) targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.x.len() as f64;
        let fit = self.y_internal.dot(&self.weights);
        let log_det: f64 = self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
            * 2.0;
        -0.5 * fit - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Posterior predictive means and variances at `x_star`.
pub fn gp_predict(fit: &GpFit, x_star: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = &fit.kernel;
    let prior = k.prior_variance();
    let scale2 = fit.y_scale * fit.y_scale;
    x_star
        .iter()
        .map(|&xs| {
            let k_star = DVector::from_iterator(fit.x.len(), fit.x.iter().map(|&xi| k.rbf(xs, xi)));
            let mean = k_star.dot(&fit.weights);
            let v = fit
                .chol
                .l_dirty()
                .solve_lower_triangular(&k_star)
                .expect("cholesky factor has a positive diagonal");
            let var = (prior - v.norm_squared()).clamp(0.0, prior);
            (fit.y_mean + fit.y_scale * mean, var * scale2)
        })
        .unzip()
}

/// Log-spaced search grid for the free kernel variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperGrid {
    pub signal: (f64, f64),
    pub noise: (f64, f64),
    pub points: usize,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            signal: (1e-3, 10.0),
            noise: (1e-6, 1.0),
            points: 21,
        }
    }
}

fn log_space((lo, hi): (f64, f64), points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Picks signal and noise variances maximizing the log marginal likelihood
/// of the standardized targets, with the length scale held fixed.
pub fn select_hyperparameters(
    x: &[f64],
    y: &[f64],
    length_scale: f64,
    grid: &HyperGrid,
) -> Result<(Kernel, f64), GpError> {
    check_data(x, y)?;
    for (name, (lo, hi)) in [("signal", grid.signal), ("noise", grid.noise)] {
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(GpError::Grid(format!("{name} range [{lo}, {hi}]")));
        }
    }
    if grid.points == 0 {
        return Err(GpError::Grid("need at least one point per axis".into()));
    }
    let mut best: Option<(Kernel, f64)> = None;
    for s in log_space(grid.signal, grid.points) {
        for n in log_space(grid.noise, grid.points) {
            let kernel = Kernel::new(s, length_scale, n)?;
            let Ok(fit) = gp_fit_standardized(x, y, kernel) else {
                continue;
            };
            let lml = fit.log_marginal_likelihood();
            if best.as_ref().is_none_or(|(_, b)| lml > *b) {
                best = Some((kernel, lml));
            }
        }
    }
    best.ok_or(GpError::NotPositiveDefinite(
        JITTER_LADDER[JITTER_LADDER.len() - 1],
    ))
}
