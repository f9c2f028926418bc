//! Dirichlet-Multinomial likelihood of crowd vote counts.
//!
//! For one question with counts `k` (total `N`) and predicted concentrations
//! `alpha` (sum `A`), the vote probability with the volunteer answer
//! probabilities integrated out is
//!
//! ```text
//! N! / prod(k_i!) * Gamma(A) / Gamma(N + A) * prod(Gamma(k_i + alpha_i) / Gamma(alpha_i))
//! ```
//!
//! Everything is evaluated with log-gamma and digamma. A question with
//! `N = 0` has probability exactly 1 for every `alpha`, so its log-likelihood
//! and its gradient are constructed as exact zeros. That is what lets
//! galaxies from different campaigns share one output vector: questions a
//! campaign never asked carry zero votes and drop out of the loss.

use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::schema::GlobalAnswerIndex;

/// Smallest concentration accepted. Values at or below are rejected, not clamped.
pub const ALPHA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DirMultError {
    #[error("length mismatch: {counts} vote counts vs {alphas} concentrations")]
    LengthMismatch { counts: usize, alphas: usize },
    #[error(
        "concentration {value} at position {position} is not a finite value above {ALPHA_FLOOR}"
    )]
    InvalidAlpha { position: usize, value: f64 },
    #[error("vote counts sum to {sum} but total is {total}")]
    TotalMismatch { sum: u64, total: u64 },
    #[error("vector of length {got} does not match index of size {expected}")]
    IndexSize { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
}

/// Vote counts for the answers of a single question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteCounts {
    counts: Vec<u64>,
    total: u64,
}

impl VoteCounts {
    pub fn new(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        VoteCounts { counts, total }
    }

    /// Builds counts with an explicit total, checking `sum(k) == N`.
    pub fn with_total(counts: Vec<u64>, total: u64) -> Result<Self, DirMultError> {
        let sum = counts.iter().sum();
        if sum != total {
            return Err(DirMultError::TotalMismatch { sum, total });
        }
        Ok(VoteCounts { counts, total })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

/// Strictly positive Dirichlet concentrations for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct Concentrations(Vec<f64>);

impl Concentrations {
    pub fn new(alpha: Vec<f64>) -> Result<Self, DirMultError> {
        check_alpha(&alpha, 0)?;
        Ok(Concentrations(alpha))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn check_alpha(alpha: &[f64], offset: usize) -> Result<(), DirMultError> {
    match alpha
        .iter()
        .position(|&a| !(a.is_finite() && a > ALPHA_FLOOR))
    {
        Some(i) => Err(DirMultError::InvalidAlpha {
            position: offset + i,
            value: alpha[i],
        }),
        None => Ok(()),
    }
}

fn check_lengths(counts: &[u64], alpha: &[f64]) -> Result<(), DirMultError> {
    if counts.len() != alpha.len() {
        return Err(DirMultError::LengthMismatch {
            counts: counts.len(),
            alphas: alpha.len(),
        });
    }
    Ok(())
}

/// Log-likelihood on raw slices; callers have already validated inputs.
fn log_dirmult_unchecked(counts: &[u64], alpha: &[f64], include_coefficient: bool) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let a_sum: f64 = alpha.iter().sum();
    let mut ll = ln_gamma(a_sum) - ln_gamma(n + a_sum);
    for (&k, &a) in counts.iter().zip(alpha) {
        // k = 0 terms cancel exactly
        if k > 0 {
            ll += ln_gamma(k as f64 + a) - ln_gamma(a);
        }
    }
    if include_coefficient {
        ll += ln_gamma(n + 1.0);
        for &k in counts {
            if k > 1 {
                ll -= ln_gamma(k as f64 + 1.0);
            }
        }
        // a probability mass; rounding can leave a few ulps above zero
        ll = ll.min(0.0);
    }
    ll
}

fn grad_unchecked(counts: &[u64], alpha: &[f64], out: &mut [f64]) {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        out.fill(0.0);
        return;
    }
    let a_sum: f64 = alpha.iter().sum();
    let shared = digamma(a_sum) - digamma(total as f64 + a_sum);
    for ((g, &k), &a) in out.iter_mut().zip(counts).zip(alpha) {
        *g = if k > 0 {
            shared + digamma(k as f64 + a) - digamma(a)
        } else {
            shared
        };
    }
}

/// Log Dirichlet-Multinomial probability of `votes` under `conc`.
///
/// With `include_coefficient` off the multinomial coefficient, which does
/// not depend on `alpha`, is dropped.
pub fn log_dirmult(
    votes: &VoteCounts,
    conc: &Concentrations,
    include_coefficient: bool,
) -> Result<f64, DirMultError> {
    check_lengths(&votes.counts, &conc.0)?;
    Ok(log_dirmult_unchecked(
        &votes.counts,
        &conc.0,
        include_coefficient,
    ))
}

/// Gradient of [`log_dirmult`] with respect to each concentration.
///
/// Component `i` is `psi(A) - psi(N + A) + psi(k_i + alpha_i) - psi(alpha_i)`.
/// All zeros when `N = 0`.
pub fn grad_log_dirmult(
    votes: &VoteCounts,
    conc: &Concentrations,
) -> Result<Vec<f64>, DirMultError> {
    check_lengths(&votes.counts, &conc.0)?;
    let mut out = vec![0.0; conc.0.len()];
    grad_unchecked(&votes.counts, &conc.0, &mut out);
    Ok(out)
}

/// Vote counts for one galaxy laid out on a [`GlobalAnswerIndex`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiCampaignVotes(Vec<u64>);

impl MultiCampaignVotes {
    pub fn zeros(len: usize) -> Self {
        MultiCampaignVotes(vec![0; len])
    }

    pub fn from_vec(counts: Vec<u64>) -> Self {
        MultiCampaignVotes(counts)
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [u64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Per-question totals `N_q`, in the index's slice order.
    pub fn totals(&self, index: &GlobalAnswerIndex) -> Vec<u64> {
        index
            .slices()
            .iter()
            .map(|s| self.0[s.range.clone()].iter().sum())
            .collect()
    }
}

/// Concentrations for every answer on a [`GlobalAnswerIndex`].
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCampaignConcentrations(Vec<f64>);

impl MultiCampaignConcentrations {
    pub fn new(alpha: Vec<f64>) -> Result<Self, DirMultError> {
        check_alpha(&alpha, 0)?;
        Ok(MultiCampaignConcentrations(alpha))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_index(
    votes: &MultiCampaignVotes,
    conc: &MultiCampaignConcentrations,
    index: &GlobalAnswerIndex,
) -> Result<(), DirMultError> {
    for got in [votes.len(), conc.len()] {
        if got != index.len() {
            return Err(DirMultError::IndexSize {
                expected: index.len(),
                got,
            });
        }
    }
    Ok(())
}

/// Log-likelihood contribution of every question, in slice order.
pub fn per_question_log_likelihood(
    votes: &MultiCampaignVotes,
    conc: &MultiCampaignConcentrations,
    index: &GlobalAnswerIndex,
    include_coefficient: bool,
) -> Result<Vec<f64>, DirMultError> {
    check_index(votes, conc, index)?;
    Ok(index
        .slices()
        .iter()
        .map(|s| {
            log_dirmult_unchecked(
                &votes.0[s.range.clone()],
                &conc.0[s.range.clone()],
                include_coefficient,
            )
        })
        .collect())
}

/// Sum over all questions of all campaigns of the per-question log-likelihood.
///
/// Includes the multinomial coefficient.
pub fn multi_task_log_likelihood(
    votes: &MultiCampaignVotes,
    conc: &MultiCampaignConcentrations,
    index: &GlobalAnswerIndex,
) -> Result<f64, DirMultError> {
    Ok(per_question_log_likelihood(votes, conc, index, true)?
        .into_iter()
        .sum())
}

/// Gradient of [`multi_task_log_likelihood`] over the whole answer axis.
///
/// Slices of unanswered questions are exact zeros.
pub fn multi_task_gradient(
    votes: &MultiCampaignVotes,
    conc: &MultiCampaignConcentrations,
    index: &GlobalAnswerIndex,
) -> Result<Vec<f64>, DirMultError> {
    check_index(votes, conc, index)?;
    let mut grad = vec![0.0; index.len()];
    for s in index.slices() {
        let r = s.range.clone();
        grad_unchecked(&votes.0[r.clone()], &conc.0[r.clone()], &mut grad[r]);
    }
    Ok(grad)
}

/// Mean over galaxies of the negative multi-task log-likelihood.
pub fn mean_negative_log_likelihood(
    batch: &[(MultiCampaignVotes, MultiCampaignConcentrations)],
    index: &GlobalAnswerIndex,
) -> Result<f64, DirMultError> {
    if batch.is_empty() {
        return Err(DirMultError::EmptyBatch);
    }
    let mut sum = 0.0;
    for (votes, conc) in batch {
        sum += multi_task_log_likelihood(votes, conc, index)?;
    }
    // + 0.0 turns -0.0 into 0.0
    Ok(-sum / batch.len() as f64 + 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{build_global_index, Answer, Campaign, Question};

    fn conc(a: &[f64]) -> Concentrations {
        Concentrations::new(a.to_vec()).unwrap()
    }

    #[test]
    fn unanswered_question_is_certain() {
        let ll = log_dirmult(&VoteCounts::new(vec![0, 0]), &conc(&[2.3, 0.7]), true).unwrap();
        assert_eq!(ll.to_bits(), 0.0f64.to_bits());
        let g = grad_log_dirmult(&VoteCounts::new(vec![0, 0]), &conc(&[2.3, 0.7])).unwrap();
        assert!(g.iter().all(|x| x.to_bits() == 0));
    }

    #[test]
    fn uniform_beta_binomial() {
        // alpha = (1, 1) makes every split of N = 2 votes equally likely
        let third = (1.0f64 / 3.0).ln();
        for k in [[2, 0], [1, 1], [0, 2]] {
            let ll = log_dirmult(&VoteCounts::new(k.to_vec()), &conc(&[1.0, 1.0]), true).unwrap();
            assert!((ll - third).abs() < 1e-12, "{k:?}: {ll}");
        }
        assert!((third + 1.098612).abs() < 1e-6);
    }

    #[test]
    fn gradient_closed_form() {
        // psi(2) - psi(4) + psi(2) - psi(1) = 1/6 for both components
        let g = grad_log_dirmult(&VoteCounts::new(vec![1, 1]), &conc(&[1.0, 1.0])).unwrap();
        for x in g {
            assert!((x - 1.0 / 6.0).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn coefficient_is_constant_in_alpha() {
        let v = VoteCounts::new(vec![3, 1, 2]);
        let diffs: Vec<f64> = [[0.5, 1.0, 2.0], [4.0, 0.2, 9.0]]
            .iter()
            .map(|a| {
                let c = conc(a);
                log_dirmult(&v, &c, true).unwrap() - log_dirmult(&v, &c, false).unwrap()
            })
            .collect();
        // 6! / (3! 1! 2!) = 60
        assert!((diffs[0] - 60f64.ln()).abs() < 1e-12);
        assert!((diffs[0] - diffs[1]).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        assert_eq!(
            Concentrations::new(vec![1.0, 0.0]),
            Err(DirMultError::InvalidAlpha {
                position: 1,
                value: 0.0
            })
        );
        assert!(Concentrations::new(vec![1e-12]).is_err());
        assert!(Concentrations::new(vec![f64::NAN]).is_err());
        assert!(Concentrations::new(vec![f64::INFINITY]).is_err());
        assert_eq!(
            VoteCounts::with_total(vec![1, 2], 4),
            Err(DirMultError::TotalMismatch { sum: 3, total: 4 })
        );
        assert!(matches!(
            log_dirmult(&VoteCounts::new(vec![1, 2]), &conc(&[1.0]), true),
            Err(DirMultError::LengthMismatch { .. })
        ));
        assert!(grad_log_dirmult(&VoteCounts::new(vec![1]), &conc(&[1.0, 1.0])).is_err());
    }

    fn two_campaign_index() -> GlobalAnswerIndex {
        let q = |id: &str, n: usize| Question {
            id: id.into(),
            label: id.into(),
            answers: (0..n)
                .map(|i| Answer {
                    id: format!("a{i}"),
                    label: String::new(),
                    child_question: None,
                })
                .collect(),
        };
        let c = |id: &str, qs: Vec<Question>| Campaign {
            id: id.into(),
            roots: qs.iter().map(|q| q.id.clone()).collect(),
            questions: qs,
        };
        build_global_index(&[
            c("one", vec![q("x", 2), q("y", 3)]),
            c("two", vec![q("z", 2)]),
        ])
        .unwrap()
    }

    #[test]
    fn multi_task_sum_and_masking() {
        let index = two_campaign_index();
        let alpha =
            MultiCampaignConcentrations::new(vec![1.5, 2.0, 0.3, 4.0, 1.0, 2.2, 0.9]).unwrap();
        let votes = MultiCampaignVotes::from_vec(vec![3, 1, 0, 2, 2, 0, 0]);

        let total = multi_task_log_likelihood(&votes, &alpha, &index).unwrap();
        let x = log_dirmult(&VoteCounts::new(vec![3, 1]), &conc(&[1.5, 2.0]), true).unwrap();
        let y = log_dirmult(
            &VoteCounts::new(vec![0, 2, 2]),
            &conc(&[0.3, 4.0, 1.0]),
            true,
        )
        .unwrap();
        assert!((total - (x + y)).abs() < 1e-12);

        let grad = multi_task_gradient(&votes, &alpha, &index).unwrap();
        assert!(grad[5..].iter().all(|g| g.to_bits() == 0));
        assert!(grad[..5].iter().all(|g| *g != 0.0));

        let none = MultiCampaignVotes::zeros(7);
        assert_eq!(
            multi_task_log_likelihood(&none, &alpha, &index).unwrap(),
            0.0
        );
        assert_eq!(
            mean_negative_log_likelihood(&[(none, alpha.clone())], &index)
                .unwrap()
                .to_bits(),
            0
        );
        assert_eq!(votes.totals(&index), vec![4, 4, 0]);
    }

    #[test]
    fn mean_nll_batching() {
        let index = two_campaign_index();
        let alpha =
            MultiCampaignConcentrations::new(vec![1.5, 2.0, 0.3, 4.0, 1.0, 2.2, 0.9]).unwrap();
        let votes = MultiCampaignVotes::from_vec(vec![0, 0, 0, 0, 0, 5, 1]);
        let one = mean_negative_log_likelihood(&[(votes.clone(), alpha.clone())], &index).unwrap();
        let two =
            mean_negative_log_likelihood(&[(votes.clone(), alpha.clone()), (votes, alpha)], &index)
                .unwrap();
        assert!(one > 0.0);
        assert!((one - two).abs() < 1e-12);
        assert_eq!(
            mean_negative_log_likelihood(&[], &index),
            Err(DirMultError::EmptyBatch)
        );
    }

    #[test]
    fn size_mismatch() {
        let index = two_campaign_index();
        let alpha = MultiCampaignConcentrations::new(vec![1.0; 6]).unwrap();
        assert!(matches!(
            multi_task_gradient(&MultiCampaignVotes::zeros(7), &alpha, &index),
            Err(DirMultError::IndexSize {
                expected: 7,
                got: 6
            })
        ));
    }
}
