//! Synthetic volunteer votes over campaign decision trees.
//!
//! Every volunteer walks the tree individually: each root question is asked
//! once, the answer is drawn from the galaxy's answer probabilities `rho`,
//! and a chosen answer with a follow-up question queues that question for
//! the same volunteer. Child trial counts therefore always equal the summed
//! votes of their triggering answers.
//!
//! # Random streams
//!
//! All randomness comes from ChaCha20 (`rand_chacha::ChaCha20Rng`). Galaxy
//! `i` of a dataset draws from `ChaCha20Rng::seed_from_u64(seed)` switched
//! to stream `i` with `set_stream(i)`, so a galaxy's votes depend only on
//! the seed and its position, never on evaluation order. Within a galaxy the
//! draw order is: volunteer count (if a range is configured), then `rho` for
//! each question in topological order (Dirichlet draws via normalized
//! Gamma variates), then one uniform per asked question per volunteer.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dirmult::MultiCampaignVotes;
use crate::schema::{build_global_index, question_order, Campaign, GlobalAnswerIndex, SchemaError};

/// Default lower and upper volunteer counts per galaxy.
pub const DEFAULT_VOLUNTEER_RANGE: (u32, u32) = (5, 40);

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("galaxy `{galaxy}`: no ground truth for question `{question}`")]
    MissingQuestion { galaxy: String, question: String },
    #[error("galaxy `{galaxy}`: question `{question}` expects {expected} values, got {got}")]
    WrongLength {
        galaxy: String,
        question: String,
        expected: usize,
        got: usize,
    },
    #[error("galaxy `{galaxy}`: invalid values for question `{question}`: {reason}")]
    InvalidTruth {
        galaxy: String,
        question: String,
        reason: &'static str,
    },
    #[error("galaxy `{galaxy}` names unknown campaign `{campaign}`")]
    UnknownCampaign { galaxy: String, campaign: String },
    #[error("galaxy `{galaxy}` is for campaign `{truth}` but was simulated against `{campaign}`")]
    CampaignMismatch {
        galaxy: String,
        truth: String,
        campaign: String,
    },
    #[error("galaxy `{0}` gives fixed answer probabilities, which cannot be used with per-galaxy sampling")]
    RhoNotSampleable(String),
    #[error("invalid volunteer count configuration: {0}")]
    Volunteers(String),
}

/// What the per-question ground-truth vectors mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthKind {
    /// Dirichlet concentrations `alpha*`.
    Alpha,
    /// Answer probabilities `rho`, used as given.
    Rho,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthGalaxy {
    pub galaxy_id: String,
    pub campaign_id: String,
    pub kind: TruthKind,
    pub values: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoMode {
    /// `rho = alpha* / sum(alpha*)`, or the stored `rho`.
    FixedRho,
    /// `rho ~ Dirichlet(alpha*)`, drawn once per galaxy and question.
    SampleRhoPerGalaxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolunteerCount {
    Fixed(u32),
    /// Uniform over the inclusive range.
    Uniform {
        min: u32,
        max: u32,
    },
}

impl VolunteerCount {
    fn check(&self) -> Result<(), SimError> {
        match *self {
            VolunteerCount::Fixed(0) => {
                Err(SimError::Volunteers("need at least one volunteer".into()))
            }
            VolunteerCount::Uniform { min, max } if min == 0 || min > max => {
                Err(SimError::Volunteers(format!(
                    "range [{min}, {max}] must be non-empty and start at 1 or more"
                )))
            }
            _ => Ok(()),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match *self {
            VolunteerCount::Fixed(n) => n,
            VolunteerCount::Uniform { min, max } => rng.random_range(min..=max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub volunteers: VolunteerCount,
    pub seed: u64,
    pub rho_mode: RhoMode,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            volunteers: VolunteerCount::Fixed(40),
            seed: 0,
            rho_mode: RhoMode::SampleRhoPerGalaxy,
        }
    }
}

/// One simulated galaxy: its votes on the global axis plus the `rho` used.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedGalaxy {
    pub galaxy_id: String,
    pub campaign_id: String,
    pub votes: MultiCampaignVotes,
    pub rho: BTreeMap<String, Vec<f64>>,
}

/// The generator used for galaxy `position` of a dataset.
pub fn galaxy_rng(seed: u64, position: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(position);
    rng
}

fn check_truth(campaign: &Campaign, truth: &GroundTruthGalaxy) -> Result<(), SimError> {
    if truth.campaign_id != campaign.id {
        return Err(SimError::CampaignMismatch {
            galaxy: truth.galaxy_id.clone(),
            truth: truth.campaign_id.clone(),
            campaign: campaign.id.clone(),
        });
    }
    for q in &campaign.questions {
        let invalid = |reason| SimError::InvalidTruth {
            galaxy: truth.galaxy_id.clone(),
            question: q.id.clone(),
            reason,
        };
        let values = truth
            .values
            .get(&q.id)
            .ok_or_else(|| SimError::MissingQuestion {
                galaxy: truth.galaxy_id.clone(),
                question: q.id.clone(),
            })?;
        if values.len() != q.answers.len() {
            return Err(SimError::WrongLength {
                galaxy: truth.galaxy_id.clone(),
                question: q.id.clone(),
                expected: q.answers.len(),
                got: values.len(),
            });
        }
        match truth.kind {
            TruthKind::Alpha => {
                if values.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
                    return Err(invalid("concentrations must be finite and positive"));
                }
            }
            TruthKind::Rho => {
                if values.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
                    return Err(invalid("probabilities must be finite and non-negative"));
                }
                if (values.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(invalid("probabilities must sum to 1"));
                }
            }
        }
    }
    Ok(())
}

fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("alpha validated").sample(rng))
        .collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        draws.iter_mut().for_each(|d| *d /= sum);
    } else {
        // every gamma variate underflowed; fall back to the mean
        let a_sum: f64 = alpha.iter().sum();
        draws = alpha.iter().map(|a| a / a_sum).collect();
    }
    draws
}

/// Picks an answer index; answers with zero probability are never chosen.
fn draw_answer<R: Rng + ?Sized>(rho: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in rho.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last_positive = i;
        if u < cumulative {
            return i;
        }
    }
    last_positive
}

/// Simulates every volunteer for one galaxy of `campaign`.
///
/// The returned votes are sized to `index`; answers outside the galaxy's
/// campaign stay zero.
pub fn sample_galaxy_votes<R: Rng + ?Sized>(
    campaign: &Campaign,
    truth: &GroundTruthGalaxy,
    config: &SimulationConfig,
    index: &GlobalAnswerIndex,
    rng: &mut R,
) -> Result<SimulatedGalaxy, SimError> {
    config.volunteers.check()?;
    let order = question_order(campaign)?;
    check_truth(campaign, truth)?;
    if truth.kind == TruthKind::Rho && config.rho_mode == RhoMode::SampleRhoPerGalaxy {
        return Err(SimError::RhoNotSampleable(truth.galaxy_id.clone()));
    }

    let volunteers = config.volunteers.draw(rng);

    let position: HashMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(i, q)| (q.id.as_str(), i))
        .collect();

    let mut rho = Vec::with_capacity(order.len());
    for q in &order {
        let values = &truth.values[&q.id];
        rho.push(match (truth.kind, config.rho_mode) {
            (TruthKind::Rho, _) => values.clone(),
            (TruthKind::Alpha, RhoMode::FixedRho) => {
                let sum: f64 = values.iter().sum();
                values.iter().map(|a| a / sum).collect()
            }
            (TruthKind::Alpha, RhoMode::SampleRhoPerGalaxy) => sample_dirichlet(values, rng),
        });
    }

    // global offsets and child positions per (question, answer)
    let mut offsets = Vec::with_capacity(order.len());
    let mut children: Vec<Vec<Option<usize>>> = Vec::with_capacity(order.len());
    for q in &order {
        let slice =
            index
                .slice_of(&campaign.id, &q.id)
                .ok_or_else(|| SimError::UnknownCampaign {
                    galaxy: truth.galaxy_id.clone(),
                    campaign: campaign.id.clone(),
                })?;
        offsets.push(slice.range.start);
        children.push(
            q.answers
                .iter()
                .map(|a| a.child_question.as_deref().map(|c| position[c]))
                .collect(),
        );
    }
    let roots: Vec<usize> = campaign
        .roots
        .iter()
        .map(|r| position[r.as_str()])
        .collect();

    let mut votes = MultiCampaignVotes::zeros(index.len());
    let counts = votes.as_mut_slice();
    let mut pending = vec![0u32; order.len()];
    for _ in 0..volunteers {
        pending.fill(0);
        for &r in &roots {
            pending[r] = 1;
        }
        for qi in 0..order.len() {
            for _ in 0..pending[qi] {
                let a = draw_answer(&rho[qi], rng);
                counts[offsets[qi] + a] += 1;
                if let Some(child) = children[qi][a] {
                    pending[child] += 1;
                }
            }
        }
    }

    Ok(SimulatedGalaxy {
        galaxy_id: truth.galaxy_id.clone(),
        campaign_id: campaign.id.clone(),
        votes,
        rho: order
            .iter()
            .zip(rho)
            .map(|(q, r)| (q.id.clone(), r))
            .collect(),
    })
}

/// Simulates a whole dataset, one independent random stream per galaxy.
///
/// Output order follows `truths`, so galaxies of different campaigns
/// interleave exactly as given.
pub fn sample_dataset(
    campaigns: &[Campaign],
    truths: &[GroundTruthGalaxy],
    config: &SimulationConfig,
) -> Result<Vec<SimulatedGalaxy>, SimError> {
    let index = build_global_index(campaigns)?;
    sample_dataset_with_index(campaigns, &index, truths, config)
}

pub fn sample_dataset_with_index(
    campaigns: &[Campaign],
    index: &GlobalAnswerIndex,
    truths: &[GroundTruthGalaxy],
    config: &SimulationConfig,
) -> Result<Vec<SimulatedGalaxy>, SimError> {
    let by_id: HashMap<&str, &Campaign> = campaigns.iter().map(|c| (c.id.as_str(), c)).collect();
    let jobs = truths
        .iter()
        .map(|t| {
            by_id
                .get(t.campaign_id.as_str())
                .map(|c| (*c, t))
                .ok_or_else(|| SimError::UnknownCampaign {
                    galaxy: t.galaxy_id.clone(),
                    campaign: t.campaign_id.clone(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    jobs.par_iter()
        .enumerate()
        .map(|(i, (campaign, truth))| {
            let mut rng = galaxy_rng(config.seed, i as u64);
            sample_galaxy_votes(campaign, truth, config, index, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Answer, Question};

    fn answer(id: &str, child: Option<&str>) -> Answer {
        Answer {
            id: id.into(),
            label: id.into(),
            child_question: child.map(Into::into),
        }
    }

    fn featured_campaign(id: &str) -> Campaign {
        Campaign {
            id: id.into(),
            roots: vec!["smooth".into()],
            questions: vec![
                Question {
                    id: "smooth".into(),
                    label: "smooth or featured".into(),
                    answers: vec![answer("featured", Some("bar")), answer("smooth", None)],
                },
                Question {
                    id: "bar".into(),
                    label: "bar".into(),
                    answers: vec![answer("yes", None), answer("no", None)],
                },
            ],
        }
    }

    fn truth(
        galaxy: &str,
        campaign: &str,
        kind: TruthKind,
        values: &[(&str, &[f64])],
    ) -> GroundTruthGalaxy {
        GroundTruthGalaxy {
            galaxy_id: galaxy.into(),
            campaign_id: campaign.into(),
            kind,
            values: values
                .iter()
                .map(|(q, v)| (q.to_string(), v.to_vec()))
                .collect(),
        }
    }

    fn fixed(n: u32, seed: u64) -> SimulationConfig {
        SimulationConfig {
            volunteers: VolunteerCount::Fixed(n),
            seed,
            rho_mode: RhoMode::FixedRho,
        }
    }

    #[test]
    fn degenerate_rho() {
        let c = featured_campaign("c");
        let index = build_global_index(std::slice::from_ref(&c)).unwrap();
        let t = truth(
            "g",
            "c",
            TruthKind::Rho,
            &[("smooth", &[1.0, 0.0]), ("bar", &[0.25, 0.75])],
        );
        for seed in 0..20 {
            let g = sample_galaxy_votes(&c, &t, &fixed(40, seed), &index, &mut galaxy_rng(seed, 0))
                .unwrap();
            let k = g.votes.as_slice();
            assert_eq!(&k[0..2], &[40, 0]);
            // every featured vote reaches the bar question
            assert_eq!(k[2] + k[3], 40);
        }
    }

    #[test]
    fn other_campaigns_stay_zero() {
        let campaigns = [featured_campaign("a"), featured_campaign("b")];
        let index = build_global_index(&campaigns).unwrap();
        let t = truth(
            "g",
            "b",
            TruthKind::Alpha,
            &[("smooth", &[2.0, 3.0]), ("bar", &[1.0, 1.0])],
        );
        let g = sample_galaxy_votes(
            &campaigns[1],
            &t,
            &SimulationConfig::default(),
            &index,
            &mut galaxy_rng(1, 0),
        )
        .unwrap();
        let range = index.campaign_range("a").unwrap();
        assert!(g.votes.as_slice()[range].iter().all(|&k| k == 0));
        let totals = g.votes.totals(&index);
        assert_eq!(totals[2], 40);
        assert_eq!(
            totals[3],
            g.votes.as_slice()[index.index_of("b", "smooth", "featured").unwrap()]
        );
    }

    #[test]
    fn diamond_counts_sum_incoming_votes() {
        let c = Campaign {
            id: "d".into(),
            roots: vec!["root".into()],
            questions: vec![
                Question {
                    id: "root".into(),
                    label: String::new(),
                    answers: vec![answer("l", Some("left")), answer("r", Some("right"))],
                },
                Question {
                    id: "left".into(),
                    label: String::new(),
                    answers: vec![answer("x", Some("join")), answer("y", None)],
                },
                Question {
                    id: "right".into(),
                    label: String::new(),
                    answers: vec![answer("x", Some("join"))],
                },
                Question {
                    id: "join".into(),
                    label: String::new(),
                    answers: vec![answer("p", None), answer("q", None)],
                },
            ],
        };
        let index = build_global_index(std::slice::from_ref(&c)).unwrap();
        let t = truth(
            "g",
            "d",
            TruthKind::Alpha,
            &[
                ("root", &[1.0, 1.0]),
                ("left", &[1.0, 1.0]),
                ("right", &[1.0]),
                ("join", &[1.0, 1.0]),
            ],
        );
        for seed in 0..10 {
            let g = sample_galaxy_votes(
                &c,
                &t,
                &SimulationConfig {
                    seed,
                    ..Default::default()
                },
                &index,
                &mut galaxy_rng(seed, 0),
            )
            .unwrap();
            let k = g.votes.as_slice();
            let n = g.votes.totals(&index);
            assert_eq!(n[0], 40);
            assert_eq!(n[1], k[0]);
            assert_eq!(n[2], k[1]);
            assert_eq!(n[3], k[2] + k[4]);
        }
    }

    #[test]
    fn truth_errors() {
        let c = featured_campaign("c");
        let index = build_global_index(std::slice::from_ref(&c)).unwrap();
        let cfg = fixed(10, 0);
        let mut rng = galaxy_rng(0, 0);
        let missing = truth("g", "c", TruthKind::Alpha, &[("smooth", &[1.0, 1.0])]);
        assert!(matches!(
            sample_galaxy_votes(&c, &missing, &cfg, &index, &mut rng),
            Err(SimError::MissingQuestion { .. })
        ));
        let bad_rho = truth(
            "g",
            "c",
            TruthKind::Rho,
            &[("smooth", &[0.5, 0.4]), ("bar", &[0.5, 0.5])],
        );
        assert!(matches!(
            sample_galaxy_votes(&c, &bad_rho, &cfg, &index, &mut rng),
            Err(SimError::InvalidTruth { .. })
        ));
        let wrong_len = truth(
            "g",
            "c",
            TruthKind::Alpha,
            &[("smooth", &[1.0]), ("bar", &[0.5, 0.5])],
        );
        assert!(matches!(
            sample_galaxy_votes(&c, &wrong_len, &cfg, &index, &mut rng),
            Err(SimError::WrongLength { .. })
        ));
        let rho = truth(
            "g",
            "c",
            TruthKind::Rho,
            &[("smooth", &[0.5, 0.5]), ("bar", &[0.5, 0.5])],
        );
        let sampled = SimulationConfig {
            rho_mode: RhoMode::SampleRhoPerGalaxy,
            ..cfg
        };
        assert!(matches!(
            sample_galaxy_votes(&c, &rho, &sampled, &index, &mut rng),
            Err(SimError::RhoNotSampleable(_))
        ));
        let zero = SimulationConfig {
            volunteers: VolunteerCount::Fixed(0),
            ..cfg
        };
        assert!(sample_galaxy_votes(&c, &rho, &zero, &index, &mut rng).is_err());
        let unknown = truth("g", "nope", TruthKind::Rho, &[]);
        assert!(matches!(
            sample_dataset(&[c], &[unknown], &cfg),
            Err(SimError::UnknownCampaign { .. })
        ));
    }

    #[test]
    fn volunteer_range() {
        let c = featured_campaign("c");
        let t = truth(
            "g",
            "c",
            TruthKind::Alpha,
            &[("smooth", &[2.0, 1.0]), ("bar", &[1.0, 1.0])],
        );
        let truths = vec![t; 200];
        let cfg = SimulationConfig {
            volunteers: VolunteerCount::Uniform { min: 5, max: 40 },
            ..Default::default()
        };
        let data = sample_dataset(std::slice::from_ref(&c), &truths, &cfg).unwrap();
        let index = build_global_index(&[c]).unwrap();
        let roots: Vec<u64> = data.iter().map(|g| g.votes.totals(&index)[0]).collect();
        assert!(roots.iter().all(|&n| (5..=40).contains(&n)));
        assert!(roots.contains(&5) && roots.contains(&40));
    }

    #[test]
    fn dataset_is_seed_deterministic() {
        let campaigns = [featured_campaign("a"), featured_campaign("b")];
        let truths: Vec<_> = (0..20)
            .map(|i| {
                let c = if i % 2 == 0 { "a" } else { "b" };
                truth(
                    &format!("g{i}"),
                    c,
                    TruthKind::Alpha,
                    &[("smooth", &[2.0, 3.0]), ("bar", &[1.0, 4.0])],
                )
            })
            .collect();
        let cfg = SimulationConfig {
            seed: 99,
            ..Default::default()
        };
        let one = sample_dataset(&campaigns, &truths, &cfg).unwrap();
        let two = sample_dataset(&campaigns, &truths, &cfg).unwrap();
        assert_eq!(one, two);
        let other =
            sample_dataset(&campaigns, &truths, &SimulationConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(one, other);
        assert!(sample_dataset(&campaigns, &[], &cfg).unwrap().is_empty());
    }
}
