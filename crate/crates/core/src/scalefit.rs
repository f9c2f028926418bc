//! Bayesian fits of a linear scaling law, test loss against log dataset size.
//!
//! The model is `loss ~ Normal(m * log(N) + b, sigma)` with a fixed,
//! homoskedastic `sigma` and a flat box prior on `(m, b)`. The posterior is
//! explored with the ensemble sampler in [`crate::ensemble`], initialized as
//! a small Gaussian ball around the least-squares line.
//!
//! Fitted values depend on the logarithm base; base 10 is the default.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{run_ensemble, Init, LogDensity, SamplerConfig, SamplerError};

/// Seed-to-seed loss scatter used when no estimate is supplied.
pub const DEFAULT_SIGMA: f64 = 0.052;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("noise sigma must be positive and finite, got {0}")]
    Sigma(f64),
    #[error("no observations")]
    NoData,
    #[error("dataset size must be at least 1, got {0}")]
    DatasetSize(f64),
    #[error("slope and intercept are not identifiable: all runs use dataset size {0}")]
    NonIdentifiable(u64),
    #[error("no (family, variant, dataset_size) group has two or more seeds")]
    NoReplication,
    #[error("no posterior samples")]
    NoSamples,
    #[error("invalid plot grid: {0}")]
    Grid(String),
    #[error("invalid prior box: {0}")]
    Prior(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// One training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunObservation {
    pub family: String,
    pub variant: String,
    pub parameter_count: u64,
    pub dataset_size: u64,
    pub seed: i64,
    /// Test loss at the validation-selected checkpoint.
    pub test_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LogBase {
    #[default]
    #[serde(rename = "10")]
    Ten,
    #[serde(rename = "e")]
    E,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Ten => x.log10(),
            LogBase::E => x.ln(),
        }
    }
}

impl FromStr for LogBase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "10" => Ok(LogBase::Ten),
            "e" | "E" => Ok(LogBase::E),
            other => Err(format!("log base must be `10` or `e`, got `{other}`")),
        }
    }
}

impl fmt::Display for LogBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogBase::Ten => "10",
            LogBase::E => "e",
        })
    }
}

/// Flat prior over a box in `(m, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatPrior {
    pub m: (f64, f64),
    pub b: (f64, f64),
}

impl Default for FlatPrior {
    fn default() -> Self {
        FlatPrior {
            m: (-10.0, 10.0),
            b: (-100.0, 100.0),
        }
    }
}

impl FlatPrior {
    pub fn new(m: (f64, f64), b: (f64, f64)) -> Result<Self, FitError> {
        for (name, (lo, hi)) in [("m", m), ("b", b)] {
            if !(lo < hi) {
                return Err(FitError::Prior(format!(
                    "{name} bounds [{lo}, {hi}] are empty"
                )));
            }
        }
        Ok(FlatPrior { m, b })
    }

    /// Unnormalized: 0 inside the box, negative infinity outside.
    pub fn log_prob(&self, m: f64, b: f64) -> f64 {
        let inside = |x: f64, (lo, hi): (f64, f64)| x >= lo && x <= hi;
        if inside(m, self.m) && inside(b, self.b) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Log posterior of `(m, b)` for runs `data` under fixed `sigma`.
pub fn log_posterior(
    m: f64,
    b: f64,
    data: &[RunObservation],
    sigma: f64,
    prior: &FlatPrior,
    base: LogBase,
) -> Result<f64, FitError> {
    Ok(ScalingPosterior::new(data, sigma, *prior, base)?.evaluate(m, b))
}

/// The scaling-law posterior as a 2-D [`LogDensity`] over `[m, b]`.
#[derive(Debug, Clone)]
pub struct ScalingPosterior {
    xs: Vec<f64>,
    ys: Vec<f64>,
    sigma: f64,
    prior: FlatPrior,
    normalizer: f64,
}

impl ScalingPosterior {
    pub fn new(
        data: &[RunObservation],
        sigma: f64,
        prior: FlatPrior,
        base: LogBase,
    ) -> Result<Self, FitError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(FitError::Sigma(sigma));
        }
        if data.is_empty() {
            return Err(FitError::NoData);
        }
        if let Some(r) = data.iter().find(|r| r.dataset_size < 1) {
            return Err(FitError::DatasetSize(r.dataset_size as f64));
        }
        let xs = data
            .iter()
            .map(|r| base.log(r.dataset_size as f64))
            .collect();
        let ys = data.iter().map(|r| r.test_loss).collect();
        let normalizer =
            -0.5 * data.len() as f64 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        Ok(ScalingPosterior {
            xs,
            ys,
            sigma,
            prior,
            normalizer,
        })
    }

    pub fn evaluate(&self, m: f64, b: f64) -> f64 {
        let prior = self.prior.log_prob(m, b);
        if !prior.is_finite() {
            return f64::NEG_INFINITY;
        }
        let ss: f64 = self
            .xs
            .iter()
            .zip(&self.ys)
            .map(|(x, y)| {
                let r = (y - (m * x + b)) / self.sigma;
                r * r
            })
            .sum();
        self.normalizer - 0.5 * ss + prior
    }
}

impl LogDensity for ScalingPosterior {
    fn dim(&self) -> usize {
        2
    }

    fn log_prob(&self, x: &[f64]) -> f64 {
        self.evaluate(x[0], x[1])
    }
}

/// Ordinary least-squares line through `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeastSquares {
    pub m: f64,
    pub b: f64,
    /// Standard errors of `m` and `b` for a known noise `sigma`.
    pub se_m: f64,
    pub se_b: f64,
}

pub fn least_squares(xs: &[f64], ys: &[f64], sigma: f64) -> Option<LeastSquares> {
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - x_mean) * (y - y_mean))
        .sum();
    let m = sxy / sxx;
    Some(LeastSquares {
        m,
        b: y_mean - m * x_mean,
        se_m: sigma / sxx.sqrt(),
        se_b: sigma * (1.0 / n + x_mean * x_mean / sxx).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub median: f64,
    pub q05: f64,
    pub q95: f64,
}

impl ParamSummary {
    pub fn from_values(values: &[f64]) -> Result<Self, FitError> {
        if values.is_empty() {
            return Err(FitError::NoSamples);
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(ParamSummary {
            median: quantile_sorted(&sorted, 0.5),
            q05: quantile_sorted(&sorted, 0.05),
            q95: quantile_sorted(&sorted, 0.95),
        })
    }

    pub fn contains(&self, x: f64) -> bool {
        self.q05 <= x && x <= self.q95
    }
}

/// Linearly interpolated quantile of sorted data, position `q (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub m: ParamSummary,
    pub b: ParamSummary,
    pub acceptance_fraction: f64,
    /// Per-parameter integrated autocorrelation time, in steps.
    pub autocorr_time: [Option<f64>; 2],
    /// Post-burn-in sample count divided by the larger autocorrelation time.
    pub effective_sample_size: Option<f64>,
    pub n_samples: usize,
    pub warnings: Vec<String>,
}

/// Quantile summary of `(m, b)` samples with no sampler diagnostics.
pub fn summarize_samples(samples: &[[f64; 2]]) -> Result<(ParamSummary, ParamSummary), FitError> {
    let m: Vec<f64> = samples.iter().map(|s| s[0]).collect();
    let b: Vec<f64> = samples.iter().map(|s| s[1]).collect();
    Ok((
        ParamSummary::from_values(&m)?,
        ParamSummary::from_values(&b)?,
    ))
}

/// A table row: `-0.95 (-1.07, -0.84), 24.84 (24.20, 25.50)`.
pub fn format_summary_row(m: &ParamSummary, b: &ParamSummary) -> String {
    format!(
        "{:.2} ({:.2}, {:.2}), {:.2} ({:.2}, {:.2})",
        m.median, m.q05, m.q95, b.median, b.q05, b.q95
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    pub summary: PosteriorSummary,
    /// Post-burn-in `[m, b]` samples.
    pub samples: Vec<[f64; 2]>,
    pub sigma: f64,
    pub log_base: LogBase,
}

pub fn fit_scaling_law(
    data: &[RunObservation],
    sigma: f64,
    prior: &FlatPrior,
    base: LogBase,
    sampler: &SamplerConfig,
) -> Result<ScalingFit, FitError> {
    let posterior = ScalingPosterior::new(data, sigma, *prior, base)?;
    let first = data[0].dataset_size;
    if data.iter().all(|r| r.dataset_size == first) {
        return Err(FitError::NonIdentifiable(first));
    }
    let ls = least_squares(&posterior.xs, &posterior.ys, sigma).expect("two distinct sizes");
    let init = Init::Ball {
        center: vec![
            ls.m.clamp(prior.m.0, prior.m.1),
            ls.b.clamp(prior.b.0, prior.b.1),
        ],
        scale: vec![0.1 * ls.se_m, 0.1 * ls.se_b],
    };
    let run = run_ensemble(&posterior, &init, sampler)?;
    let samples: Vec<[f64; 2]> = run.samples().map(|s| [s[0], s[1]]).collect();
    let (m, b) = summarize_samples(&samples)?;
    let tau = run.autocorr_time();
    let tau_max = tau
        .iter()
        .flatten()
        .copied()
        .fold(None, |acc: Option<f64>, t| {
            Some(acc.map_or(t, |a| a.max(t)))
        });
    let summary = PosteriorSummary {
        m,
        b,
        acceptance_fraction: run.acceptance_fraction(),
        autocorr_time: [tau[0], tau[1]],
        effective_sample_size: tau_max.map(|t| samples.len() as f64 / t),
        n_samples: samples.len(),
        warnings: run.warnings(),
    };
    Ok(ScalingFit {
        summary,
        samples,
        sigma,
        log_base: base,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    pub draws: Vec<f64>,
    pub mean: f64,
    pub q05: f64,
    pub q95: f64,
}

/// One predicted loss per posterior sample: `Normal(m log(N) + b, sigma)`.
pub fn posterior_predictive<R: Rng + ?Sized>(
    samples: &[[f64; 2]],
    dataset_size: f64,
    sigma: f64,
    base: LogBase,
    rng: &mut R,
) -> Result<Predictive, FitError> {
    if samples.is_empty() {
        return Err(FitError::NoSamples);
    }
    if !(dataset_size >= 1.0) {
        return Err(FitError::DatasetSize(dataset_size));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(FitError::Sigma(sigma));
    }
    let x = base.log(dataset_size);
    let draws: Vec<f64> = samples
        .iter()
        .map(|[m, b]| m * x + b + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let summary = ParamSummary::from_values(&draws)?;
    Ok(Predictive {
        mean: draws.iter().sum::<f64>() / draws.len() as f64,
        q05: summary.q05,
        q95: summary.q95,
        draws,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub dataset_size: f64,
    pub predicted_median: f64,
    pub q05: f64,
    pub q95: f64,
}

/// `points` dataset sizes spaced evenly in log between `min` and `max`.
pub fn log_grid(min: f64, max: f64, points: usize) -> Result<Vec<f64>, FitError> {
    if !(min >= 1.0 && max >= min && max.is_finite()) {
        return Err(FitError::Grid(format!(
            "need 1 <= min <= max, got [{min}, {max}]"
        )));
    }
    match points {
        0 => Err(FitError::Grid("need at least one point".into())),
        1 => Ok(vec![min]),
        _ if min == max => Err(FitError::Grid("several points need min < max".into())),
        _ => {
            let (lo, hi) = (min.ln(), max.ln());
            let step = (hi - lo) / (points - 1) as f64;
            Ok((0..points)
                .map(|i| match i {
                    0 => min,
                    _ if i + 1 == points => max,
                    _ => (lo + step * i as f64).exp(),
                })
                .collect())
        }
    }
}

/// Median and (5%, 95%) band of `m log(N) + b` over the samples at each grid size.
///
/// With `noise = Some((sigma, rng))` one `Normal(0, sigma)` draw is added per
/// sample, giving the posterior predictive band instead.
pub fn plot_band<R: Rng + ?Sized>(
    samples: &[[f64; 2]],
    grid: &[f64],
    base: LogBase,
    mut noise: Option<(f64, &mut R)>,
) -> Result<Vec<PlotRow>, FitError> {
    if samples.is_empty() {
        return Err(FitError::NoSamples);
    }
    grid.iter()
        .map(|&n| {
            if !(n >= 1.0) {
                return Err(FitError::DatasetSize(n));
            }
            let x = base.log(n);
            let values: Vec<f64> = match noise.as_mut() {
                None => samples.iter().map(|[m, b]| m * x + b).collect(),
                Some((sigma, rng)) => samples
                    .iter()
                    .map(|[m, b]| m * x + b + *sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            };
            let s = ParamSummary::from_values(&values)?;
            Ok(PlotRow {
                dataset_size: n,
                predicted_median: s.median,
                q05: s.q05,
                q95: s.q95,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub sigma: f64,
    pub groups: usize,
    /// Pooled degrees of freedom, `sum(n_g - 1)`.
    pub dof: usize,
    pub warning: Option<String>,
}

/// Pooled within-group standard deviation over replicated
/// `(family, variant, dataset_size)` groups.
pub fn estimate_noise_sigma(data: &[RunObservation]) -> Result<NoiseEstimate, FitError> {
    let mut groups: BTreeMap<(&str, &str, u64), Vec<f64>> = BTreeMap::new();
    for r in data {
        groups
            .entry((&r.family, &r.variant, r.dataset_size))
            .or_default()
            .push(r.test_loss);
    }
    let mut ss = 0.0;
    let mut dof = 0;
    let mut used = 0;
    for losses in groups.values().filter(|l| l.len() >= 2) {
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        ss += losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>();
        dof += losses.len() - 1;
        used += 1;
    }
    if dof == 0 {
        return Err(FitError::NoReplication);
    }
    let sigma = (ss / dof as f64).sqrt();
    Ok(NoiseEstimate {
        sigma,
        groups: used,
        dof,
        warning: (sigma == 0.0).then(|| {
            "all replicates are identical; sigma = 0 cannot be used for fitting".to_string()
        }),
    })
}

/// Splits runs for separate fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupBy {
    /// One fit over all runs.
    #[default]
    None,
    Family,
    /// One fit per `family/variant`.
    Variant,
}

impl FromStr for GroupBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(GroupBy::None),
            "family" => Ok(GroupBy::Family),
            "variant" => Ok(GroupBy::Variant),
            other => Err(format!(
                "group-by must be none, family or variant, got `{other}`"
            )),
        }
    }
}

pub fn group_runs(data: &[RunObservation], by: GroupBy) -> BTreeMap<String, Vec<RunObservation>> {
    let mut out: BTreeMap<String, Vec<RunObservation>> = BTreeMap::new();
    for r in data {
        let key = match by {
            GroupBy::None => "all".to_string(),
            GroupBy::Family => r.family.clone(),
            GroupBy::Variant => format!("{}/{}", r.family, r.variant),
        };
        out.entry(key).or_default().push(r.clone());
    }
    out
}

/// Reads `m,b` sample rows.
pub fn read_samples_csv<R: std::io::Read>(reader: R) -> Result<Vec<[f64; 2]>, csv::Error> {
    #[derive(Deserialize)]
    struct Row {
        m: f64,
        b: f64,
    }
    csv::Reader::from_reader(reader)
        .deserialize::<Row>()
        .map(|r| r.map(|r| [r.m, r.b]))
        .collect()
}

pub fn write_samples_csv(samples: &[[f64; 2]]) -> String {
    let mut out = String::from("m,b\n");
    for [m, b] in samples {
        out.push_str(&format!("{m},{b}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn run(size: u64, seed: i64, loss: f64) -> RunObservation {
        RunObservation {
            family: "ConvNeXT".into(),
            variant: "nano".into(),
            parameter_count: 15_000_000,
            dataset_size: size,
            seed,
            test_loss: loss,
        }
    }

    #[test]
    fn zero_residual_point() {
        let sigma = 0.052;
        let loss = -0.84 * 492_000f64.log10() + 23.91;
        assert!((loss - 19.129).abs() < 5e-4);
        let lp = log_posterior(
            -0.84,
            23.91,
            &[run(492_000, 0, loss)],
            sigma,
            &FlatPrior::default(),
            LogBase::Ten,
        )
        .unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn translation_symmetry_and_residual_growth() {
        let data: Vec<_> = [(100_000, 20.0), (200_000, 19.6), (400_000, 19.5)]
            .iter()
            .map(|&(n, l)| run(n, 0, l))
            .collect();
        let p = FlatPrior::default();
        let base = log_posterior(-1.0, 25.0, &data, 0.1, &p, LogBase::E).unwrap();
        let shifted: Vec<_> = data
            .iter()
            .map(|r| RunObservation {
                test_loss: r.test_loss + 3.0,
                ..r.clone()
            })
            .collect();
        let moved = log_posterior(-1.0, 28.0, &shifted, 0.1, &p, LogBase::E).unwrap();
        assert!((base - moved).abs() < 1e-9);

        // doubling every residual lowers the posterior
        let (m, b) = (-0.9, 30.0);
        let doubled: Vec<_> = data
            .iter()
            .map(|r| {
                let fit = m * (r.dataset_size as f64).log10() + b;
                RunObservation {
                    test_loss: fit + 2.0 * (r.test_loss - fit),
                    ..r.clone()
                }
            })
            .collect();
        assert!(
            log_posterior(m, b, &doubled, 0.1, &p, LogBase::Ten).unwrap()
                < log_posterior(m, b, &data, 0.1, &p, LogBase::Ten).unwrap()
        );
    }

    #[test]
    fn prior_support_and_errors() {
        let data = [run(10, 0, 1.0)];
        let p = FlatPrior::default();
        assert_eq!(
            log_posterior(11.0, 0.0, &data, 1.0, &p, LogBase::Ten).unwrap(),
            f64::NEG_INFINITY
        );
        assert_eq!(
            log_posterior(0.0, 0.0, &data, 0.0, &p, LogBase::Ten),
            Err(FitError::Sigma(0.0))
        );
        assert_eq!(
            log_posterior(0.0, 0.0, &[], 1.0, &p, LogBase::Ten),
            Err(FitError::NoData)
        );
        assert!(FlatPrior::new((1.0, 1.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn single_size_is_not_identifiable() {
        let data = [run(1000, 0, 1.0), run(1000, 1, 1.1)];
        assert_eq!(
            fit_scaling_law(
                &data,
                0.05,
                &FlatPrior::default(),
                LogBase::Ten,
                &SamplerConfig::with_steps(100, 0)
            ),
            Err(FitError::NonIdentifiable(1000))
        );
    }

    #[test]
    fn exact_line_is_recovered() {
        let data: Vec<_> = [61_500u64, 123_000, 246_000, 492_000]
            .iter()
            .flat_map(|&n| (0..3).map(move |s| run(n, s, -0.84 * (n as f64).log10() + 23.91)))
            .collect();
        let fit = fit_scaling_law(
            &data,
            1e-4,
            &FlatPrior::default(),
            LogBase::Ten,
            &SamplerConfig::with_steps(1000, 1),
        )
        .unwrap();
        assert!((fit.summary.m.median + 0.84).abs() < 0.01);
        assert!((fit.summary.b.median - 23.91).abs() < 0.01);
        let s = &fit.summary;
        assert!(s.m.q05 <= s.m.median && s.m.median <= s.m.q95);
        assert!(s.acceptance_fraction > 0.2 && s.acceptance_fraction < 0.9);
        assert_eq!(s.n_samples, 800 * 32);
    }

    #[test]
    fn quantiles() {
        let v: Vec<f64> = (0..=20).map(f64::from).collect();
        let s = ParamSummary::from_values(&v).unwrap();
        assert_eq!((s.q05, s.median, s.q95), (1.0, 10.0, 19.0));
        assert_eq!(quantile_sorted(&[0.0, 1.0], 0.25), 0.25);
        assert_eq!(ParamSummary::from_values(&[]), Err(FitError::NoSamples));
    }

    #[test]
    fn table_row_format() {
        let m = ParamSummary {
            median: -0.95,
            q05: -1.07,
            q95: -0.84,
        };
        let b = ParamSummary {
            median: 24.84,
            q05: 24.2,
            q95: 25.5,
        };
        assert_eq!(
            format_summary_row(&m, &b),
            "-0.95 (-1.07, -0.84), 24.84 (24.20, 25.50)"
        );
    }

    #[test]
    fn noise_estimates() {
        let two = [run(10, 0, 19.0), run(10, 1, 19.1)];
        let est = estimate_noise_sigma(&two).unwrap();
        assert!((est.sigma - 0.1 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!((est.groups, est.dof), (1, 1));

        let same = [run(10, 0, 19.0), run(10, 1, 19.0), run(20, 0, 18.0)];
        let est = estimate_noise_sigma(&same).unwrap();
        assert_eq!(est.sigma, 0.0);
        assert!(est.warning.is_some());

        assert_eq!(
            estimate_noise_sigma(&[run(10, 0, 1.0), run(20, 0, 1.0)]),
            Err(FitError::NoReplication)
        );
    }

    #[test]
    fn predictive_checks() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let samples = vec![[-0.84, 23.91]; 500];
        let p = posterior_predictive(&samples, 246_000.0, 1e-6, LogBase::Ten, &mut rng).unwrap();
        let line = -0.84 * 246_000f64.log10() + 23.91;
        assert!((p.q05 - line).abs() < 1e-5 && (p.q95 - line).abs() < 1e-5);
        assert_eq!(
            posterior_predictive(&samples, 0.5, 0.1, LogBase::Ten, &mut rng),
            Err(FitError::DatasetSize(0.5))
        );
        assert_eq!(
            posterior_predictive(&[], 10.0, 0.1, LogBase::Ten, &mut rng),
            Err(FitError::NoSamples)
        );
    }

    #[test]
    fn plot_grid_and_band() {
        assert_eq!(log_grid(5.0, 5.0, 1).unwrap(), vec![5.0]);
        let g = log_grid(1e4, 1e6, 5).unwrap();
        assert_eq!(g.len(), 5);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(g[4], 1e6);
        assert!(log_grid(0.0, 10.0, 3).is_err());

        let rows = plot_band::<ChaCha20Rng>(&[[-1.0, 20.0]; 10], &g, LogBase::Ten, None).unwrap();
        assert!(rows
            .iter()
            .all(|r| r.q05 == r.predicted_median && r.predicted_median == r.q95));
    }

    #[test]
    fn samples_csv() {
        let s = vec![[-0.84, 23.91], [1e-20, -3.0]];
        assert_eq!(
            read_samples_csv(write_samples_csv(&s).as_bytes()).unwrap(),
            s
        );
    }

    #[test]
    fn grouping() {
        let mut data = vec![run(10, 0, 1.0), run(20, 0, 1.0)];
        data.push(RunObservation {
            family: "ResNet".into(),
            ..run(10, 0, 2.0)
        });
        assert_eq!(group_runs(&data, GroupBy::None).len(), 1);
        let by_family = group_runs(&data, GroupBy::Family);
        assert_eq!(by_family["ConvNeXT"].len(), 2);
        assert_eq!(
            group_runs(&data, GroupBy::Variant)
                .keys()
                .collect::<Vec<_>>(),
            ["ConvNeXT/nano", "ResNet/nano"]
        );
    }
}
