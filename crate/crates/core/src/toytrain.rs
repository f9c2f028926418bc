//! A linear head trained with the multi-campaign Dirichlet-Multinomial loss.
//!
//! The head maps a feature vector to one raw output per answer on the
//! global answer axis, `z = W^T x + c`, and then to concentrations through
//! `alpha = 1 + (alpha_max - 1) tanh(softplus(z) / (alpha_max - 1))`, which
//! behaves like `1 + softplus(z)` for moderate outputs and saturates below
//! `alpha_max` (100 by default). With no cap the link is exactly
//! `1 + softplus(z)`.
//!
//! Training is plain mini-batch gradient descent on the mean negative
//! log-likelihood with optional decoupled weight decay on `W`. Per-galaxy
//! gradients may be computed in parallel; they are always summed in dataset
//! order, so results depend only on the seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dirmult::{
    multi_task_gradient, multi_task_log_likelihood, DirMultError, MultiCampaignConcentrations,
    MultiCampaignVotes,
};
use crate::schema::GlobalAnswerIndex;

pub const DEFAULT_ALPHA_MAX: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("expected {expected} features, got {got}")]
    FeatureLength { expected: usize, got: usize },
    #[error("non-finite feature value")]
    NonFiniteFeatures,
    #[error("head has {head} outputs but the answer index has {index}")]
    OutputSize { head: usize, index: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("loss diverged at epoch {epoch} (last finite mean NLL {last_finite})")]
    Diverged { epoch: usize, last_finite: f64 },
    #[error("head file has {got} weights, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error(transparent)]
    Loss(#[from] DirMultError),
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Raw output to concentration, with its derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    /// `None` for the uncapped `1 + softplus(z)`.
    pub alpha_max: Option<f64>,
}

impl Default for Link {
    fn default() -> Self {
        Link {
            alpha_max: Some(DEFAULT_ALPHA_MAX),
        }
    }
}

impl Link {
    pub fn apply(&self, z: f64) -> (f64, f64) {
        let sp = softplus(z);
        let dsp = sigmoid(z);
        match self.alpha_max {
            None => (1.0 + sp, dsp),
            Some(max) => {
                let c = max - 1.0;
                let t = (sp / c).tanh();
                (1.0 + c * t, (1.0 - t * t) * dsp)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    n_features: usize,
    n_outputs: usize,
    /// Row-major `n_features x n_outputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    link: Link,
}

impl LinearHead {
    pub fn zeros(n_features: usize, n_outputs: usize, link: Link) -> Self {
        LinearHead {
            n_features,
            n_outputs,
            weights: vec![0.0; n_features * n_outputs],
            bias: vec![0.0; n_outputs],
            link,
        }
    }

    pub fn from_parts(
        n_features: usize,
        n_outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        link: Link,
    ) -> Result<Self, TrainError> {
        if weights.len() != n_features * n_outputs {
            return Err(TrainError::Shape {
                expected: n_features * n_outputs,
                got: weights.len(),
            });
        }
        if bias.len() != n_outputs {
            return Err(TrainError::Shape {
                expected: n_outputs,
                got: bias.len(),
            });
        }
        Ok(LinearHead {
            n_features,
            n_outputs,
            weights,
            bias,
            link,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, feature: usize, output: usize) -> f64 {
        self.weights[feature * self.n_outputs + output]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn link(&self) -> Link {
        self.link
    }

    /// Mutable view of all parameters, weights first, then bias.
    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    fn check_features(&self, x: &[f64]) -> Result<(), TrainError> {
        if x.len() != self.n_features {
            return Err(TrainError::FeatureLength {
                expected: self.n_features,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteFeatures);
        }
        Ok(())
    }

    fn raw(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (xf, row) in x.iter().zip(self.weights.chunks_exact(self.n_outputs)) {
            if *xf == 0.0 {
                continue;
            }
            for (zo, w) in z.iter_mut().zip(row) {
                *zo += xf * w;
            }
        }
        z
    }

    fn concentrations_and_slopes(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.raw(x).into_iter().map(|z| self.link.apply(z)).unzip()
    }

    pub fn forward(&self, x: &[f64]) -> Result<MultiCampaignConcentrations, TrainError> {
        self.check_features(x)?;
        let (alpha, _) = self.concentrations_and_slopes(x);
        Ok(MultiCampaignConcentrations::new(alpha)?)
    }

    /// Expected vote fractions `alpha / sum(alpha)` per question slice.
    pub fn vote_fractions(
        &self,
        x: &[f64],
        index: &GlobalAnswerIndex,
    ) -> Result<Vec<f64>, TrainError> {
        let alpha = self.forward(x)?;
        Ok(vote_fractions(alpha.as_slice(), index))
    }
}

fn vote_fractions(alpha: &[f64], index: &GlobalAnswerIndex) -> Vec<f64> {
    let mut out = vec![0.0; alpha.len()];
    for s in index.slices() {
        let total: f64 = alpha[s.range.clone()].iter().sum();
        for i in s.range.clone() {
            out[i] = alpha[i] / total;
        }
    }
    out
}

/// One training galaxy.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub votes: MultiCampaignVotes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn check(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!(
                "weight decay {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Gradient of the mean negative log-likelihood over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub mean_nll: f64,
    /// Same layout as the head's weights.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn check_dims(head: &LinearHead, index: &GlobalAnswerIndex) -> Result<(), TrainError> {
    if head.n_outputs != index.len() {
        return Err(TrainError::OutputSize {
            head: head.n_outputs,
            index: index.len(),
        });
    }
    Ok(())
}

/// Mean NLL (multinomial coefficient included) and its parameter gradient.
pub fn batch_gradient(
    head: &LinearHead,
    batch: &[&Example],
    index: &GlobalAnswerIndex,
) -> Result<BatchGradient, TrainError> {
    check_dims(head, index)?;
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let per_galaxy: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|ex| {
            head.check_features(&ex.features)?;
            let (alpha, slope) = head.concentrations_and_slopes(&ex.features);
            let alpha = MultiCampaignConcentrations::new(alpha)?;
            let ll = multi_task_log_likelihood(&ex.votes, &alpha, index)?;
            let grad_alpha = multi_task_gradient(&ex.votes, &alpha, index)?;
            let dz: Vec<f64> = grad_alpha.iter().zip(&slope).map(|(g, s)| -g * s).collect();
            Ok((-ll, dz))
        })
        .collect::<Result<_, TrainError>>()?;

    let n_out = head.n_outputs;
    let mut weights = vec![0.0; head.weights.len()];
    let mut bias = vec![0.0; n_out];
    let mut nll = 0.0;
    for (ex, (loss, dz)) in batch.iter().zip(&per_galaxy) {
        nll += loss;
        for (b, d) in bias.iter_mut().zip(dz) {
            *b += d;
        }
        for (xf, row) in ex.features.iter().zip(weights.chunks_exact_mut(n_out)) {
            if *xf == 0.0 {
                continue;
            }
            for (w, d) in row.iter_mut().zip(dz) {
                *w += xf * d;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    weights
        .iter_mut()
        .chain(bias.iter_mut())
        .for_each(|g| *g *= scale);
    Ok(BatchGradient {
        mean_nll: nll * scale + 0.0,
        weights,
        bias,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub head: LinearHead,
    /// `(epoch, mean NLL over the training set)`; epoch 0 is before any update.
    pub trace: Vec<(usize, f64)>,
}

/// Trains a copy of `head`.
pub fn train(
    head: &LinearHead,
    data: &[Example],
    index: &GlobalAnswerIndex,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_observed(head, data, index, config, |_| {})
}

/// [`train`], calling `observe` with every batch gradient before it is applied.
pub fn train_observed<F: FnMut(&BatchGradient)>(
    head: &LinearHead,
    data: &[Example],
    index: &GlobalAnswerIndex,
    config: &TrainConfig,
    mut observe: F,
) -> Result<TrainOutcome, TrainError> {
    config.check()?;
    check_dims(head, index)?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut head = head.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let full_batch = config.batch_size >= data.len();

    let all: Vec<&Example> = data.iter().collect();
    let initial = batch_gradient(&head, &all, index)?.mean_nll;
    let mut trace = vec![(0, initial)];
    let mut last_finite = initial;
    if !initial.is_finite() {
        return Err(TrainError::Diverged {
            epoch: 0,
            last_finite: f64::NAN,
        });
    }

    let decay = 1.0 - config.learning_rate * config.weight_decay;
    for epoch in 1..=config.epochs {
        if !full_batch {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let grad = batch_gradient(&head, &batch, index)?;
            if !grad.mean_nll.is_finite() {
                return Err(TrainError::Diverged { epoch, last_finite });
            }
            observe(&grad);
            for (w, g) in head.weights.iter_mut().zip(&grad.weights) {
                *w = *w * decay - config.learning_rate * g;
            }
            for (b, g) in head.bias.iter_mut().zip(&grad.bias) {
                *b -= config.learning_rate * g;
            }
        }
        let loss = batch_gradient(&head, &all, index)?.mean_nll;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { epoch, last_finite });
        }
        last_finite = loss;
        trace.push((epoch, loss));
    }
    Ok(TrainOutcome { head, trace })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuestionCalibration {
    pub question: String,
    /// Galaxies with at least one vote for the question.
    pub answered: usize,
    /// Mean over answered galaxies of the mean `|alpha_i / A - k_i / N|`.
    pub mean_abs_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub mean_nll: f64,
    pub questions: Vec<QuestionCalibration>,
}

pub fn evaluate(
    head: &LinearHead,
    data: &[Example],
    index: &GlobalAnswerIndex,
) -> Result<Evaluation, TrainError> {
    check_dims(head, index)?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut nll = 0.0;
    let mut err_sum = vec![0.0; index.slices().len()];
    let mut answered = vec![0usize; index.slices().len()];
    for ex in data {
        let alpha = head.forward(&ex.features)?;
        nll -= multi_task_log_likelihood(&ex.votes, &alpha, index)?;
        let fractions = vote_fractions(alpha.as_slice(), index);
        for (qi, s) in index.slices().iter().enumerate() {
            let k = &ex.votes.as_slice()[s.range.clone()];
            let n: u64 = k.iter().sum();
            if n == 0 {
                continue;
            }
            let e: f64 = s
                .range
                .clone()
                .zip(k)
                .map(|(i, &ki)| (fractions[i] - ki as f64 / n as f64).abs())
                .sum::<f64>()
                / k.len() as f64;
            err_sum[qi] += e;
            answered[qi] += 1;
        }
    }
    Ok(Evaluation {
        mean_nll: nll / data.len() as f64 + 0.0,
        questions: index
            .slices()
            .iter()
            .zip(err_sum.iter().zip(&answered))
            .map(|(s, (e, &n))| QuestionCalibration {
                question: s.name(),
                answered: n,
                mean_abs_error: (n > 0).then(|| e / n as f64),
            })
            .collect(),
    })
}

/// Features for galaxy `position`: its answer probabilities on the global
/// axis (zero outside its campaign) plus `Normal(0, noise_sd)` per entry.
///
/// Noise comes from ChaCha20 seeded with `seed` on stream
/// `2^63 + position`, disjoint from the vote simulator's streams.
pub fn synthetic_features(rho_global: &[f64], noise_sd: f64, seed: u64, position: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | position);
    rho_global
        .iter()
        .map(|r| r + noise_sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Small random initial weights, `Normal(0, scale)`.
pub fn random_head(
    n_features: usize,
    n_outputs: usize,
    scale: f64,
    link: Link,
    seed: u64,
) -> LinearHead {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut head = LinearHead::zeros(n_features, n_outputs, link);
    for w in &mut head.weights {
        *w = scale * rng.random::<f64>().mul_add(2.0, -1.0);
    }
    head
}
