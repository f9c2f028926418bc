//! Campaign decision-tree schemas and the global answer index.
//!
//! A campaign is a DAG of questions: each answer may name a follow-up
//! question that is asked whenever that answer is given. Several campaigns
//! share one [`GlobalAnswerIndex`], which lays every answer of every
//! question of every campaign out on a single contiguous axis.
//!
//! Index ordering is fixed: campaigns in input order, questions in
//! declaration order, answers in declaration order.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("invalid campaign `{campaign}`: {}", format_violations(.violations))]
    Invalid {
        campaign: String,
        violations: Vec<Violation>,
    },
    #[error("duplicate campaign id `{0}`")]
    DuplicateCampaign(String),
    #[error("malformed schema document: {0}")]
    Parse(#[from] serde_json::Error),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child_question: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub label: String,
    pub answers: Vec<Answer>,
}

/// One labelling campaign and its question DAG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Campaign {
    pub id: String,
    pub roots: Vec<String>,
    pub questions: Vec<Question>,
}

impl Campaign {
    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.questions.iter().position(|q| q.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyCampaignId,
    EmptyRoots,
    EmptyQuestionId,
    EmptyAnswerId {
        question: String,
    },
    NoAnswers {
        question: String,
    },
    DuplicateQuestion(String),
    DuplicateAnswer {
        question: String,
        answer: String,
    },
    UnknownRoot(String),
    DuplicateRoot(String),
    UnknownChild {
        question: String,
        answer: String,
        child: String,
    },
    /// A root question is also the follow-up of some answer.
    TriggeredRoot(String),
    /// Questions lying on (or downstream of) a cycle.
    Cycle(Vec<String>),
    Unreachable(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyCampaignId => write!(f, "campaign id is empty"),
            Violation::EmptyRoots => write!(f, "campaign has no root questions"),
            Violation::EmptyQuestionId => write!(f, "question with empty id"),
            Violation::EmptyAnswerId { question } => {
                write!(f, "question `{question}` has an answer with empty id")
            }
            Violation::NoAnswers { question } => write!(f, "question `{question}` has no answers"),
            Violation::DuplicateQuestion(q) => write!(f, "duplicate question id `{q}`"),
            Violation::DuplicateAnswer { question, answer } => {
                write!(f, "duplicate answer id `{answer}` in question `{question}`")
            }
            Violation::UnknownRoot(q) => write!(f, "root `{q}` is not a declared question"),
            Violation::DuplicateRoot(q) => write!(f, "root `{q}` listed more than once"),
            Violation::UnknownChild {
                question,
                answer,
                child,
            } => write!(
                f,
                "answer `{question}/{answer}` points to undeclared question `{child}`"
            ),
            Violation::TriggeredRoot(q) => {
                write!(f, "root `{q}` is also the follow-up of an answer")
            }
            Violation::Cycle(qs) => write!(f, "cycle through questions [{}]", qs.join(", ")),
            Violation::Unreachable(q) => write!(f, "question `{q}` is unreachable from any root"),
        }
    }
}

/// Outcome of [`validate_campaign`]. Violations are data, not failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub campaign: String,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<(), SchemaError> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(SchemaError::Invalid {
                campaign: self.campaign,
                violations: self.violations,
            })
        }
    }
}

pub fn validate_campaign(campaign: &Campaign) -> ValidationReport {
    let mut violations = Vec::new();

    if campaign.id.is_empty() {
        violations.push(Violation::EmptyCampaignId);
    }
    if campaign.roots.is_empty() {
        violations.push(Violation::EmptyRoots);
    }

    let mut seen = HashSet::new();
    for q in &campaign.questions {
        if q.id.is_empty() {
            violations.push(Violation::EmptyQuestionId);
        }
        if !seen.insert(q.id.as_str()) {
            violations.push(Violation::DuplicateQuestion(q.id.clone()));
        }
        if q.answers.is_empty() {
            violations.push(Violation::NoAnswers {
                question: q.id.clone(),
            });
        }
        let mut answer_ids = HashSet::new();
        for a in &q.answers {
            if a.id.is_empty() {
                violations.push(Violation::EmptyAnswerId {
                    question: q.id.clone(),
                });
            }
            if !answer_ids.insert(a.id.as_str()) {
                violations.push(Violation::DuplicateAnswer {
                    question: q.id.clone(),
                    answer: a.id.clone(),
                });
            }
            if let Some(child) = &a.child_question {
                if campaign.position(child).is_none() {
                    violations.push(Violation::UnknownChild {
                        question: q.id.clone(),
                        answer: a.id.clone(),
                        child: child.clone(),
                    });
                }
            }
        }
    }

    let mut root_set = HashSet::new();
    for r in &campaign.roots {
        if campaign.position(r).is_none() {
            violations.push(Violation::UnknownRoot(r.clone()));
        }
        if !root_set.insert(r.as_str()) {
            violations.push(Violation::DuplicateRoot(r.clone()));
        }
    }

    let triggered: BTreeSet<&str> = campaign
        .questions
        .iter()
        .flat_map(|q| q.answers.iter())
        .filter_map(|a| a.child_question.as_deref())
        .collect();
    for r in root_set.iter().copied().collect::<BTreeSet<_>>() {
        if triggered.contains(r) {
            violations.push(Violation::TriggeredRoot(r.to_owned()));
        }
    }

    // Graph checks run on first-declared positions so duplicates do not mask cycles.
    let graph = Graph::new(campaign);
    let (_, leftover) = graph.kahn();
    if !leftover.is_empty() {
        violations.push(Violation::Cycle(
            leftover
                .iter()
                .map(|&i| campaign.questions[i].id.clone())
                .collect(),
        ));
    }

    let reachable =
        graph.reachable_from(campaign.roots.iter().filter_map(|r| campaign.position(r)));
    for (i, q) in campaign.questions.iter().enumerate() {
        if !reachable[i] && graph.first[i] {
            violations.push(Violation::Unreachable(q.id.clone()));
        }
    }

    ValidationReport {
        campaign: campaign.id.clone(),
        violations,
    }
}

/// Adjacency over question positions (edges question -> child question).
struct Graph {
    children: Vec<Vec<usize>>,
    /// True for the first declaration of each question id.
    first: Vec<bool>,
}

impl Graph {
    fn new(campaign: &Campaign) -> Self {
        let n = campaign.questions.len();
        let mut children = vec![Vec::new(); n];
        let mut first = vec![false; n];
        let mut seen = HashSet::new();
        for (i, q) in campaign.questions.iter().enumerate() {
            first[i] = seen.insert(q.id.as_str());
            if !first[i] {
                continue;
            }
            for a in &q.answers {
                if let Some(j) = a
                    .child_question
                    .as_deref()
                    .and_then(|c| campaign.position(c))
                {
                    if !children[i].contains(&j) {
                        children[i].push(j);
                    }
                }
            }
        }
        Graph { children, first }
    }

    /// Kahn's algorithm, always emitting the ready question declared first.
    /// Returns the order and the questions that could not be ordered.
    fn kahn(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.children.len();
        let mut indegree = vec![0usize; n];
        for (i, cs) in self.children.iter().enumerate() {
            if !self.first[i] {
                continue;
            }
            for &c in cs {
                indegree[c] += 1;
            }
        }
        let mut ready: BinaryHeap<Reverse<usize>> = (0..n)
            .filter(|&i| self.first[i] && indegree[i] == 0)
            .map(Reverse)
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &c in &self.children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        let leftover = (0..n)
            .filter(|&i| self.first[i] && indegree[i] > 0)
            .collect();
        (order, leftover)
    }

    fn reachable_from(&self, roots: impl Iterator<Item = usize>) -> Vec<bool> {
        let mut seen = vec![false; self.children.len()];
        let mut stack: Vec<usize> = roots.collect();
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            stack.extend(self.children[i].iter().copied().filter(|&c| !seen[c]));
        }
        seen
    }
}

/// Questions sorted so every question follows all questions that can trigger it.
///
/// Ties are broken by declaration order.
pub fn question_order(campaign: &Campaign) -> Result<Vec<&Question>, SchemaError> {
    validate_campaign(campaign).into_result()?;
    let (order, _) = Graph::new(campaign).kahn();
    Ok(order.into_iter().map(|i| &campaign.questions[i]).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AnswerKey {
    pub campaign: String,
    pub question: String,
    pub answer: String,
}

/// Contiguous block of global indices holding one question's answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionSlice {
    pub campaign: String,
    pub question: String,
    pub range: Range<usize>,
}

impl QuestionSlice {
    /// `campaign/question`, the name used in output files.
    pub fn name(&self) -> String {
        format!("{}/{}", self.campaign, self.question)
    }
}

/// Bijection between (campaign, question, answer) and `0..len()`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAnswerIndex {
    keys: Vec<AnswerKey>,
    slices: Vec<QuestionSlice>,
    answer_lookup: HashMap<AnswerKey, usize>,
    slice_lookup: HashMap<(String, String), usize>,
    campaign_ranges: Vec<(String, Range<usize>)>,
}

impl GlobalAnswerIndex {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, index: usize) -> Option<&AnswerKey> {
        self.keys.get(index)
    }

    pub fn index_of(&self, campaign: &str, question: &str, answer: &str) -> Option<usize> {
        self.answer_lookup
            .get(&AnswerKey {
                campaign: campaign.to_owned(),
                question: question.to_owned(),
                answer: answer.to_owned(),
            })
            .copied()
    }

    pub fn slices(&self) -> &[QuestionSlice] {
        &self.slices
    }

    pub fn slice_of(&self, campaign: &str, question: &str) -> Option<&QuestionSlice> {
        self.slice_lookup
            .get(&(campaign.to_owned(), question.to_owned()))
            .map(|&i| &self.slices[i])
    }

    /// Position of the question slice in [`Self::slices`].
    pub fn slice_position(&self, campaign: &str, question: &str) -> Option<usize> {
        self.slice_lookup
            .get(&(campaign.to_owned(), question.to_owned()))
            .copied()
    }

    /// Global index range covered by all of a campaign's answers.
    pub fn campaign_range(&self, campaign: &str) -> Option<Range<usize>> {
        self.campaign_ranges
            .iter()
            .find(|(c, _)| c == campaign)
            .map(|(_, r)| r.clone())
    }

    pub fn campaign_ids(&self) -> impl Iterator<Item = &str> {
        self.campaign_ranges.iter().map(|(c, _)| c.as_str())
    }
}

pub fn build_global_index(campaigns: &[Campaign]) -> Result<GlobalAnswerIndex, SchemaError> {
    let mut index = GlobalAnswerIndex::default();
    let mut campaign_ids = HashSet::new();
    for campaign in campaigns {
        validate_campaign(campaign).into_result()?;
        if !campaign_ids.insert(campaign.id.as_str()) {
            return Err(SchemaError::DuplicateCampaign(campaign.id.clone()));
        }
        let campaign_start = index.keys.len();
        for q in &campaign.questions {
            let start = index.keys.len();
            for a in &q.answers {
                let key = AnswerKey {
                    campaign: campaign.id.clone(),
                    question: q.id.clone(),
                    answer: a.id.clone(),
                };
                index.answer_lookup.insert(key.clone(), index.keys.len());
                index.keys.push(key);
            }
            index
                .slice_lookup
                .insert((campaign.id.clone(), q.id.clone()), index.slices.len());
            index.slices.push(QuestionSlice {
                campaign: campaign.id.clone(),
                question: q.id.clone(),
                range: start..index.keys.len(),
            });
        }
        index
            .campaign_ranges
            .push((campaign.id.clone(), campaign_start..index.keys.len()));
    }
    Ok(index)
}

/// Parses a schema document (a JSON list of campaigns).
pub fn parse_schema(json: &str) -> Result<Vec<Campaign>, SchemaError> {
    Ok(serde_json::from_str(json)?)
}

pub fn schema_to_json(campaigns: &[Campaign]) -> String {
    serde_json::to_string_pretty(campaigns).expect("campaigns always serialize")
}
