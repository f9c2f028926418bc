//! JSON-lines record formats shared by the CLI and tests.
//!
//! * votes: `{galaxy_id, campaign_id, votes: {question_id: {answer_id: count}}}`
//! * ground truth: `{galaxy_id, campaign_id, alpha_star: {question_id: [..]}}`,
//!   optionally with `rho` (the answer probabilities a simulation used)
//! * concentrations: `{galaxy_id, alpha: {campaign_id: {question_id: [..]}}}`;
//!   a ground-truth line is also accepted and read as its `alpha_star`
//! * features: `{galaxy_id, features: [..]}`
//!
//! Maps are ordered, so writing the same records always yields the same bytes.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dirmult::{DirMultError, MultiCampaignConcentrations, MultiCampaignVotes};
use crate::schema::GlobalAnswerIndex;
use crate::votesim::{GroundTruthGalaxy, SimulatedGalaxy, TruthKind};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("galaxy `{galaxy}`: unknown campaign `{campaign}`")]
    UnknownCampaign { galaxy: String, campaign: String },
    #[error("galaxy `{galaxy}`: unknown question `{campaign}/{question}`")]
    UnknownQuestion {
        galaxy: String,
        campaign: String,
        question: String,
    },
    #[error("galaxy `{galaxy}`: unknown answer `{campaign}/{question}/{answer}`")]
    UnknownAnswer {
        galaxy: String,
        campaign: String,
        question: String,
        answer: String,
    },
    #[error("galaxy `{galaxy}`: question `{question}` needs {expected} concentrations, got {got}")]
    AlphaLength {
        galaxy: String,
        question: String,
        expected: usize,
        got: usize,
    },
    #[error("galaxy `{galaxy}`: question `{question}` has votes but no concentrations")]
    MissingAlpha { galaxy: String, question: String },
    #[error("galaxy `{0}` has neither alpha_star nor rho")]
    EmptyTruth(String),
    #[error("galaxy `{galaxy}`: {source}")]
    Alpha {
        galaxy: String,
        #[source]
        source: DirMultError,
    },
}

pub type QuestionValues = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub galaxy_id: String,
    pub campaign_id: String,
    pub votes: BTreeMap<String, BTreeMap<String, u64>>,
}

impl VoteRecord {
    /// Lays the record out on the global answer axis. Absent questions get zero votes.
    pub fn to_votes(&self, index: &GlobalAnswerIndex) -> Result<MultiCampaignVotes, RecordError> {
        if index.campaign_range(&self.campaign_id).is_none() {
            return Err(RecordError::UnknownCampaign {
                galaxy: self.galaxy_id.clone(),
                campaign: self.campaign_id.clone(),
            });
        }
        let mut votes = MultiCampaignVotes::zeros(index.len());
        for (question, answers) in &self.votes {
            if index.slice_of(&self.campaign_id, question).is_none() {
                return Err(RecordError::UnknownQuestion {
                    galaxy: self.galaxy_id.clone(),
                    campaign: self.campaign_id.clone(),
                    question: question.clone(),
                });
            }
            for (answer, &count) in answers {
                let i = index
                    .index_of(&self.campaign_id, question, answer)
                    .ok_or_else(|| RecordError::UnknownAnswer {
                        galaxy: self.galaxy_id.clone(),
                        campaign: self.campaign_id.clone(),
                        question: question.clone(),
                        answer: answer.clone(),
                    })?;
                votes.as_mut_slice()[i] = count;
            }
        }
        Ok(votes)
    }

    /// The inverse of [`Self::to_votes`]: only questions with votes are written.
    pub fn from_votes(
        galaxy_id: &str,
        campaign_id: &str,
        votes: &MultiCampaignVotes,
        index: &GlobalAnswerIndex,
    ) -> Self {
        let mut out = BTreeMap::new();
        for slice in index.slices().iter().filter(|s| s.campaign == campaign_id) {
            let counts = &votes.as_slice()[slice.range.clone()];
            if counts.iter().all(|&k| k == 0) {
                continue;
            }
            let answers = slice
                .range
                .clone()
                .zip(counts)
                .map(|(i, &k)| (index.key(i).expect("in range").answer.clone(), k))
                .collect();
            out.insert(slice.question.clone(), answers);
        }
        VoteRecord {
            galaxy_id: galaxy_id.to_owned(),
            campaign_id: campaign_id.to_owned(),
            votes: out,
        }
    }

    pub fn from_simulated(galaxy: &SimulatedGalaxy, index: &GlobalAnswerIndex) -> Self {
        Self::from_votes(&galaxy.galaxy_id, &galaxy.campaign_id, &galaxy.votes, index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub galaxy_id: String,
    pub campaign_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_star: Option<QuestionValues>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<QuestionValues>,
}

impl TruthRecord {
    /// `alpha_star` wins when both are present.
    pub fn to_truth(&self) -> Result<GroundTruthGalaxy, RecordError> {
        let (kind, values) = match (&self.alpha_star, &self.rho) {
            (Some(a), _) => (TruthKind::Alpha, a.clone()),
            (None, Some(r)) => (TruthKind::Rho, r.clone()),
            (None, None) => return Err(RecordError::EmptyTruth(self.galaxy_id.clone())),
        };
        Ok(GroundTruthGalaxy {
            galaxy_id: self.galaxy_id.clone(),
            campaign_id: self.campaign_id.clone(),
            kind,
            values,
        })
    }

    /// Sidecar line for a simulated galaxy: its input truth plus the `rho` drawn.
    pub fn from_simulation(truth: &GroundTruthGalaxy, galaxy: &SimulatedGalaxy) -> Self {
        TruthRecord {
            galaxy_id: truth.galaxy_id.clone(),
            campaign_id: truth.campaign_id.clone(),
            alpha_star: (truth.kind == TruthKind::Alpha).then(|| truth.values.clone()),
            rho: Some(galaxy.rho.clone()),
        }
    }
}

/// One line of a concentrations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaRecord {
    Global {
        galaxy_id: String,
        alpha: BTreeMap<String, QuestionValues>,
    },
    Truth {
        galaxy_id: String,
        campaign_id: String,
        alpha_star: QuestionValues,
    },
}

impl AlphaRecord {
    pub fn galaxy_id(&self) -> &str {
        match self {
            AlphaRecord::Global { galaxy_id, .. } | AlphaRecord::Truth { galaxy_id, .. } => {
                galaxy_id
            }
        }
    }

    /// Concentrations on the global axis.
    ///
    /// Questions the record leaves out are filled with 1.0; this is only
    /// allowed where `votes` has no votes, since such questions contribute
    /// exactly zero for any concentration.
    pub fn to_concentrations(
        &self,
        votes: &MultiCampaignVotes,
        index: &GlobalAnswerIndex,
    ) -> Result<MultiCampaignConcentrations, RecordError> {
        let galaxy = self.galaxy_id().to_owned();
        let mut alpha = vec![f64::NAN; index.len()];
        let mut put = |campaign: &str, question: &str, values: &[f64]| -> Result<(), RecordError> {
            let slice =
                index
                    .slice_of(campaign, question)
                    .ok_or_else(|| RecordError::UnknownQuestion {
                        galaxy: galaxy.clone(),
                        campaign: campaign.to_owned(),
                        question: question.to_owned(),
                    })?;
            if slice.range.len() != values.len() {
                return Err(RecordError::AlphaLength {
                    galaxy: galaxy.clone(),
                    question: slice.name(),
                    expected: slice.range.len(),
                    got: values.len(),
                });
            }
            alpha[slice.range.clone()].copy_from_slice(values);
            Ok(())
        };
        match self {
            AlphaRecord::Global { alpha: map, .. } => {
                for (campaign, questions) in map {
                    for (question, values) in questions {
                        put(campaign, question, values)?;
                    }
                }
            }
            AlphaRecord::Truth {
                campaign_id,
                alpha_star,
                ..
            } => {
                for (question, values) in alpha_star {
                    put(campaign_id, question, values)?;
                }
            }
        }
        for slice in index.slices() {
            let r = slice.range.clone();
            if alpha[r.clone()].iter().any(|a| a.is_nan()) {
                if votes.as_slice()[r.clone()].iter().any(|&k| k > 0) {
                    return Err(RecordError::MissingAlpha {
                        galaxy,
                        question: slice.name(),
                    });
                }
                alpha[r].fill(1.0);
            }
        }
        MultiCampaignConcentrations::new(alpha)
            .map_err(|source| RecordError::Alpha { galaxy, source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub galaxy_id: String,
    pub features: Vec<f64>,
}

/// Parses JSON-lines text; blank lines are skipped, line numbers are 1-based.
pub fn read_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, RecordError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| RecordError::Json {
                line: i + 1,
                source,
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records always serialize"));
        out.push('\n');
    }
    out
}
