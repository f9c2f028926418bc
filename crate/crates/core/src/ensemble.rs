//! Affine-invariant ensemble MCMC with the stretch move.
//!
//! The ensemble is split into two halves. Each step first moves every walker
//! of the first half against the frozen second half, then the second half
//! against the updated first half. A walker `X` picks a companion `X'` from
//! the other half, draws `z` from `g(z) ∝ 1/sqrt(z)` on `[1/a, a]`, proposes
//! `Y = X' + z (X - X')` and accepts with probability
//! `min(1, z^(d-1) p(Y) / p(X))`.
//!
//! Each walker owns a ChaCha20 stream (`seed`, stream = walker index), so
//! updating a half in parallel gives exactly the sequential result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

/// Default stretch scale.
pub const DEFAULT_STRETCH: f64 = 2.0;

/// Window constant for the autocorrelation-time estimate.
const AUTOCORR_WINDOW: f64 = 5.0;

/// Chains shorter than this many autocorrelation times draw a warning.
pub const MIN_AUTOCORR_MULTIPLE: f64 = 50.0;

const BALL_RETRIES: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("stretch scale must exceed 1, got {0}")]
    Stretch(f64),
    #[error("need an even number of walkers, at least {min}; got {got}")]
    Walkers { got: usize, min: usize },
    #[error("steps ({steps}) must exceed burn-in ({burn_in})")]
    Steps { steps: usize, burn_in: usize },
    #[error("initial point has dimension {got}, target has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("no finite log-density at any initial walker")]
    NoFiniteWalker,
    #[error("walkers {0:?} start where the log-density is not finite")]
    NonFiniteWalkers(Vec<usize>),
    #[error("{given} initial points for {walkers} walkers")]
    InitCount { given: usize, walkers: usize },
}

/// Unnormalized log-density. Return `f64::NEG_INFINITY` outside the support.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_prob(&self, x: &[f64]) -> f64;
}

/// A closure as a [`LogDensity`].
pub struct FnDensity<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnDensity<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnDensity { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> LogDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_prob(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// The Goodman & Weare stretch move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StretchMove {
    a: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StretchOutcome {
    pub z: f64,
    pub proposal: Vec<f64>,
    pub log_prob: f64,
    pub accepted: bool,
}

impl Default for StretchMove {
    fn default() -> Self {
        StretchMove { a: DEFAULT_STRETCH }
    }
}

impl StretchMove {
    pub fn new(a: f64) -> Result<Self, SamplerError> {
        if !(a > 1.0 && a.is_finite()) {
            return Err(SamplerError::Stretch(a));
        }
        Ok(StretchMove { a })
    }

    pub fn scale(&self) -> f64 {
        self.a
    }

    /// Inverse CDF of `g(z)`: maps `u` in `[0, 1)` to `((a - 1) u + 1)^2 / a`.
    pub fn z_from_uniform(&self, u: f64) -> f64 {
        let t = (self.a - 1.0) * u + 1.0;
        t * t / self.a
    }

    pub fn sample_z<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.z_from_uniform(rng.random())
    }

    /// `X' + z (X - X')`, evaluated as `X + (z - 1)(X - X')` so `z = 1` returns `X` exactly.
    pub fn propose(walker: &[f64], companion: &[f64], z: f64) -> Vec<f64> {
        walker
            .iter()
            .zip(companion)
            .map(|(&x, &c)| x + (z - 1.0) * (x - c))
            .collect()
    }

    /// Log of `z^(d-1) p(Y) / p(X)`.
    pub fn log_acceptance(
        z: f64,
        dim: usize,
        log_prob_proposal: f64,
        log_prob_current: f64,
    ) -> f64 {
        (dim as f64 - 1.0) * z.ln() + log_prob_proposal - log_prob_current
    }

    /// Proposes from `walker` through `companion` and decides acceptance.
    ///
    /// Consumes exactly two uniforms from `rng`: one for `z`, one for the
    /// acceptance test.
    pub fn step<T: LogDensity + ?Sized, R: Rng + ?Sized>(
        &self,
        target: &T,
        walker: &[f64],
        walker_log_prob: f64,
        companion: &[f64],
        rng: &mut R,
    ) -> StretchOutcome {
        let z = self.sample_z(rng);
        let u: f64 = rng.random();
        self.step_with(target, walker, walker_log_prob, companion, z, u)
    }

    /// [`Self::step`] with the two uniforms supplied.
    pub fn step_with<T: LogDensity + ?Sized>(
        &self,
        target: &T,
        walker: &[f64],
        walker_log_prob: f64,
        companion: &[f64],
        z: f64,
        u: f64,
    ) -> StretchOutcome {
        let proposal = Self::propose(walker, companion, z);
        let log_prob = target.log_prob(&proposal);
        let log_ratio = Self::log_acceptance(z, walker.len(), log_prob, walker_log_prob);
        // NaN ratios compare false and are rejected
        let accepted = !log_prob.is_nan() && u.ln() < log_ratio;
        StretchOutcome {
            z,
            proposal,
            log_prob,
            accepted,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Independent Gaussian draws `center + scale * N(0, 1)` per coordinate.
    /// Draws landing where the density is not finite are redrawn.
    Ball { center: Vec<f64>, scale: Vec<f64> },
    /// One explicit point per walker.
    Points(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub walkers: usize,
    pub steps: usize,
    pub burn_in: usize,
    pub stretch: f64,
    pub seed: u64,
}

impl SamplerConfig {
    /// 32 walkers, stretch 2 and a burn-in of 20% of `steps`.
    pub fn with_steps(steps: usize, seed: u64) -> Self {
        SamplerConfig {
            walkers: 32,
            steps,
            burn_in: steps / 5,
            stretch: DEFAULT_STRETCH,
            seed,
        }
    }
}

/// Full ensemble history from [`run_ensemble`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRun {
    dim: usize,
    walkers: usize,
    steps: usize,
    burn_in: usize,
    /// `steps x walkers x dim`, row-major.
    chain: Vec<f64>,
    accepted: usize,
}

impl EnsembleRun {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn walkers(&self) -> usize {
        self.walkers
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in
    }

    /// Position of `walker` after `step + 1` updates.
    pub fn position(&self, step: usize, walker: usize) -> &[f64] {
        let start = (step * self.walkers + walker) * self.dim;
        &self.chain[start..start + self.dim]
    }

    /// Post-burn-in samples, step-major, walker-minor.
    pub fn samples(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.chain[self.burn_in * self.walkers * self.dim..].chunks_exact(self.dim)
    }

    pub fn flat_samples(&self) -> Vec<Vec<f64>> {
        self.samples().map(<[f64]>::to_vec).collect()
    }

    pub fn n_samples(&self) -> usize {
        (self.steps - self.burn_in) * self.walkers
    }

    /// Fraction of accepted proposals over all steps and walkers.
    pub fn acceptance_fraction(&self) -> f64 {
        self.accepted as f64 / (self.steps * self.walkers) as f64
    }

    /// Integrated autocorrelation time per parameter over the post-burn-in
    /// chain, `None` for a parameter that never moved.
    ///
    /// The normalized autocorrelation function is averaged over walkers and
    /// summed, `tau(M) = 1 + 2 sum_{t=1..M} rho(t)`, with the window `M` the
    /// smallest lag satisfying `M >= 5 tau(M)`.
    pub fn autocorr_time(&self) -> Vec<Option<f64>> {
        let n = self.steps - self.burn_in;
        (0..self.dim)
            .map(|p| {
                let series: Vec<Vec<f64>> = (0..self.walkers)
                    .map(|w| {
                        (self.burn_in..self.steps)
                            .map(|s| self.position(s, w)[p])
                            .collect()
                    })
                    .collect();
                integrated_time(&series, n)
            })
            .collect()
    }

    /// Autocorrelation-time warnings for short chains.
    pub fn warnings(&self) -> Vec<String> {
        let n = (self.steps - self.burn_in) as f64;
        self.autocorr_time()
            .iter()
            .enumerate()
            .filter_map(|(p, tau)| match tau {
                Some(t) if n < MIN_AUTOCORR_MULTIPLE * t => Some(format!(
                    "parameter {p}: chain of {n} steps is shorter than {MIN_AUTOCORR_MULTIPLE} autocorrelation times (tau = {t:.1})"
                )),
                _ => None,
            })
            .collect()
    }
}

fn integrated_time(series: &[Vec<f64>], n: usize) -> Option<f64> {
    if n < 2 {
        return None;
    }
    let centered: Vec<(Vec<f64>, f64)> = series
        .iter()
        .map(|s| {
            let mean = s.iter().sum::<f64>() / n as f64;
            let c: Vec<f64> = s.iter().map(|x| x - mean).collect();
            let var = c.iter().map(|x| x * x).sum::<f64>();
            (c, var)
        })
        .filter(|(_, var)| *var > 0.0)
        .collect();
    if centered.is_empty() {
        return None;
    }
    let mut tau = 1.0;
    for lag in 1..n {
        let rho = centered
            .iter()
            .map(|(c, var)| c.iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / var)
            .sum::<f64>()
            / centered.len() as f64;
        tau += 2.0 * rho;
        if lag as f64 >= AUTOCORR_WINDOW * tau {
            break;
        }
    }
    Some(tau)
}

fn walker_rng(seed: u64, walker: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(walker as u64);
    rng
}

/// Runs the ensemble for `config.steps` steps.
pub fn run_ensemble<T: LogDensity + ?Sized>(
    target: &T,
    init: &Init,
    config: &SamplerConfig,
) -> Result<EnsembleRun, SamplerError> {
    let dim = target.dim();
    let stretch = StretchMove::new(config.stretch)?;
    let min_walkers = 2 * dim + 2;
    if config.walkers % 2 != 0 || config.walkers < min_walkers {
        return Err(SamplerError::Walkers {
            got: config.walkers,
            min: min_walkers,
        });
    }
    if config.steps <= config.burn_in {
        return Err(SamplerError::Steps {
            steps: config.steps,
            burn_in: config.burn_in,
        });
    }

    let mut rngs: Vec<ChaCha20Rng> = (0..config.walkers)
        .map(|w| walker_rng(config.seed, w))
        .collect();
    let mut positions = initial_positions(target, init, config.walkers, &mut rngs)?;
    let mut log_probs: Vec<f64> = positions.iter().map(|p| target.log_prob(p)).collect();

    let half = config.walkers / 2;
    let mut chain = Vec::with_capacity(config.steps * config.walkers * dim);
    let mut accepted = 0;
    for _ in 0..config.steps {
        for first in [true, false] {
            let (lo, hi) = positions.split_at_mut(half);
            let (lp_lo, lp_hi) = log_probs.split_at_mut(half);
            let (rng_lo, rng_hi) = rngs.split_at_mut(half);
            let (active, active_lp, active_rng, frozen) = if first {
                (lo, lp_lo, rng_lo, &*hi)
            } else {
                (hi, lp_hi, rng_hi, &*lo)
            };
            accepted += active
                .par_iter_mut()
                .zip(active_lp.par_iter_mut())
                .zip(active_rng.par_iter_mut())
                .map(|((x, lp), rng)| {
                    let j = rng.random_range(0..frozen.len());
                    let out = stretch.step(target, x, *lp, &frozen[j], rng);
                    if out.accepted {
                        *x = out.proposal;
                        *lp = out.log_prob;
                        1
                    } else {
                        0
                    }
                })
                .sum::<usize>();
        }
        for p in &positions {
            chain.extend_from_slice(p);
        }
    }

    Ok(EnsembleRun {
        dim,
        walkers: config.walkers,
        steps: config.steps,
        burn_in: config.burn_in,
        chain,
        accepted,
    })
}

fn initial_positions<T: LogDensity + ?Sized>(
    target: &T,
    init: &Init,
    walkers: usize,
    rngs: &mut [ChaCha20Rng],
) -> Result<Vec<Vec<f64>>, SamplerError> {
    let dim = target.dim();
    match init {
        Init::Points(points) => {
            if points.len() != walkers {
                return Err(SamplerError::InitCount {
                    given: points.len(),
                    walkers,
                });
            }
            if let Some(p) = points.iter().find(|p| p.len() != dim) {
                return Err(SamplerError::Dimension {
                    expected: dim,
                    got: p.len(),
                });
            }
            let bad: Vec<usize> = points
                .iter()
                .enumerate()
                .filter(|(_, p)| !target.log_prob(p).is_finite())
                .map(|(i, _)| i)
                .collect();
            if bad.len() == walkers {
                return Err(SamplerError::NoFiniteWalker);
            }
            if !bad.is_empty() {
                return Err(SamplerError::NonFiniteWalkers(bad));
            }
            Ok(points.clone())
        }
        Init::Ball { center, scale } => {
            for v in [center, scale] {
                if v.len() != dim {
                    return Err(SamplerError::Dimension {
                        expected: dim,
                        got: v.len(),
                    });
                }
            }
            rngs.iter_mut()
                .map(|rng| {
                    for _ in 0..BALL_RETRIES {
                        let p: Vec<f64> = center
                            .iter()
                            .zip(scale)
                            .map(|(c, s)| c + s * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        if target.log_prob(&p).is_finite() {
                            return Ok(p);
                        }
                    }
                    Err(SamplerError::NoFiniteWalker)
                })
                .collect()
        }
    }
}
