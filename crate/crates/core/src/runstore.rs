//! Experiment run records and their seed and per-task aggregates.
//!
//! Runs are stored as CSV with the header
//! `family,variant,parameter_count,dataset_size,seed,test_loss`, optionally
//! followed by per-question test-loss columns named `q:<label>` (an empty
//! cell means the run has no loss for that question). Campaign-specific
//! questions are conventionally labelled `q:<campaign>/<question>`.
//!
//! The canonical form written by [`emit_runs`] sorts rows by
//! `(family, variant, dataset_size, seed)`, sorts the `q:` columns by name
//! and prints every loss with six significant digits. Parsing and
//! re-emitting canonical text reproduces it byte for byte.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Read;

use thiserror::Error;

use crate::scalefit::RunObservation;

pub const BASE_COLUMNS: [&str; 6] = [
    "family",
    "variant",
    "parameter_count",
    "dataset_size",
    "seed",
    "test_loss",
];

const TASK_PREFIX: &str = "q:";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("unexpected column `{0}` (per-question columns start with `q:`)")]
    UnknownColumn(String),
    #[error("line {line}: duplicate run {family}/{variant} size {dataset_size} seed {seed}")]
    DuplicateKey {
        line: u64,
        family: String,
        variant: String,
        dataset_size: u64,
        seed: i64,
    },
    #[error("no runs to aggregate")]
    EmptyTable,
    #[error("no per-question losses for task `{0}`")]
    MissingTask(String),
    #[error("malformed task mapping: {0}")]
    Mapping(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run: RunObservation,
    /// Per-question test losses keyed by column label (without `q:`).
    pub task_losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTable {
    rows: Vec<RunRecord>,
    /// Declared per-question columns, including ones with no values.
    columns: BTreeSet<String>,
}

impl RunTable {
    pub fn new(rows: Vec<RunRecord>) -> Result<Self, RunError> {
        let mut seen = HashSet::new();
        for (i, r) in rows.iter().enumerate() {
            check_key(&mut seen, &r.run, i as u64 + 2)?;
        }
        Ok(RunTable {
            rows,
            columns: BTreeSet::new(),
        })
    }

    pub fn from_observations(runs: Vec<RunObservation>) -> Result<Self, RunError> {
        Self::new(
            runs.into_iter()
                .map(|run| RunRecord {
                    run,
                    task_losses: BTreeMap::new(),
                })
                .collect(),
        )
    }

    pub fn rows(&self) -> &[RunRecord] {
        &self.rows
    }

    pub fn observations(&self) -> Vec<RunObservation> {
        self.rows.iter().map(|r| r.run.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// All per-question column labels, sorted.
    pub fn task_columns(&self) -> BTreeSet<&str> {
        self.rows
            .iter()
            .flat_map(|r| r.task_losses.keys().map(String::as_str))
            .chain(self.columns.iter().map(String::as_str))
            .collect()
    }
}

fn check_key<'a>(
    seen: &mut HashSet<(&'a str, &'a str, u64, i64)>,
    run: &'a RunObservation,
    line: u64,
) -> Result<(), RunError> {
    if !seen.insert((&run.family, &run.variant, run.dataset_size, run.seed)) {
        return Err(RunError::DuplicateKey {
            line,
            family: run.family.clone(),
            variant: run.variant.clone(),
            dataset_size: run.dataset_size,
            seed: run.seed,
        });
    }
    Ok(())
}

pub fn parse_runs<R: Read>(reader: R) -> Result<RunTable, RunError> {
    let mut csv = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    let mut base = [0usize; 6];
    for (slot, name) in base.iter_mut().zip(BASE_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or(RunError::MissingColumn(name))?;
    }
    let mut tasks = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if base.contains(&i) {
            continue;
        }
        match h.strip_prefix(TASK_PREFIX) {
            Some(label) if !label.is_empty() => tasks.push((i, label.to_owned())),
            _ => return Err(RunError::UnknownColumn(h.to_owned())),
        }
    }

    let mut rows = Vec::new();
    for record in csv.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| RunError::Malformed { line, message };
        let field = |i: usize| record.get(i).unwrap_or("");
        let int = |i: usize, name: &str| -> Result<i128, RunError> {
            field(i)
                .parse::<i128>()
                .map_err(|_| bad(format!("{name} `{}` is not an integer", field(i))))
        };
        let loss = |text: &str, name: &str| -> Result<f64, RunError> {
            match text.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(bad(format!("{name} `{text}` is not a finite number"))),
            }
        };

        let family = field(base[0]);
        let variant = field(base[1]);
        if family.is_empty() || variant.is_empty() {
            return Err(bad("family and variant must be non-empty".into()));
        }
        let parameter_count = int(base[2], "parameter_count")?;
        let dataset_size = int(base[3], "dataset_size")?;
        let seed = int(base[4], "seed")?;
        if parameter_count < 1 || parameter_count > u64::MAX as i128 {
            return Err(bad(format!(
                "parameter_count {parameter_count} must be positive"
            )));
        }
        if dataset_size < 1 || dataset_size > u64::MAX as i128 {
            return Err(bad(format!(
                "dataset_size {dataset_size} must be at least 1"
            )));
        }
        let seed = i64::try_from(seed).map_err(|_| bad(format!("seed {seed} out of range")))?;
        let test_loss = loss(field(base[5]), "test_loss")?;

        let mut task_losses = BTreeMap::new();
        for (i, label) in &tasks {
            let text = field(*i);
            if !text.is_empty() {
                task_losses.insert(label.clone(), loss(text, label)?);
            }
        }
        rows.push((
            line,
            RunRecord {
                run: RunObservation {
                    family: family.to_owned(),
                    variant: variant.to_owned(),
                    parameter_count: parameter_count as u64,
                    dataset_size: dataset_size as u64,
                    seed,
                    test_loss,
                },
                task_losses,
            },
        ));
    }

    let mut seen = HashSet::new();
    for (line, r) in &rows {
        check_key(&mut seen, &r.run, *line)?;
    }
    Ok(RunTable {
        rows: rows.into_iter().map(|(_, r)| r).collect(),
        columns: tasks.into_iter().map(|(_, label)| label).collect(),
    })
}

/// Six significant digits in positional notation.
pub fn format_loss(x: f64) -> String {
    let sci = format!("{x:.5e}");
    let exponent: i32 = sci[sci.find('e').expect("exponent") + 1..]
        .parse()
        .expect("integer exponent");
    let rounded: f64 = sci.parse().expect("valid float");
    let decimals = (5 - exponent).max(0) as usize;
    format!("{rounded:.decimals$}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) || s.starts_with(' ') || s.ends_with(' ') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Canonical CSV text for `table`.
pub fn emit_runs(table: &RunTable) -> String {
    let columns: Vec<&str> = table.task_columns().into_iter().collect();
    let mut header: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(
        columns
            .iter()
            .map(|c| csv_field(&format!("{TASK_PREFIX}{c}"))),
    );
    let mut out = header.join(",");
    out.push('\n');

    let mut rows: Vec<&RunRecord> = table.rows.iter().collect();
    rows.sort_by(|a, b| {
        (
            &a.run.family,
            &a.run.variant,
            a.run.dataset_size,
            a.run.seed,
        )
            .cmp(&(
                &b.run.family,
                &b.run.variant,
                b.run.dataset_size,
                b.run.seed,
            ))
    });
    for r in rows {
        let mut fields = vec![
            csv_field(&r.run.family),
            csv_field(&r.run.variant),
            r.run.parameter_count.to_string(),
            r.run.dataset_size.to_string(),
            r.run.seed.to_string(),
            format_loss(r.run.test_loss),
        ];
        fields.extend(columns.iter().map(|c| {
            r.task_losses
                .get(*c)
                .map_or_else(String::new, |v| format_loss(*v))
        }));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub family: String,
    pub variant: String,
    pub dataset_size: u64,
    pub loss_mean: f64,
    pub loss_min: f64,
    pub loss_max: f64,
    pub n_seeds: usize,
}

type GroupKey = (String, String, u64);

/// Mean, min and max per group; seeds within a group are visited in seed
/// order so the result does not depend on row order.
fn aggregate(values: BTreeMap<GroupKey, BTreeMap<i64, f64>>) -> Vec<AggregateRow> {
    values
        .into_iter()
        .map(|((family, variant, dataset_size), seeds)| {
            let losses: Vec<f64> = seeds.into_values().collect();
            let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
            let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            AggregateRow {
                family,
                variant,
                dataset_size,
                loss_mean: mean.clamp(min, max),
                loss_min: min,
                loss_max: max,
                n_seeds: losses.len(),
            }
        })
        .collect()
}

/// One row per `(family, variant, dataset_size)`, ordered by that key.
pub fn aggregate_minmax(table: &RunTable) -> Result<Vec<AggregateRow>, RunError> {
    if table.is_empty() {
        return Err(RunError::EmptyTable);
    }
    let mut groups: BTreeMap<GroupKey, BTreeMap<i64, f64>> = BTreeMap::new();
    for r in &table.rows {
        groups
            .entry((
                r.run.family.clone(),
                r.run.variant.clone(),
                r.run.dataset_size,
            ))
            .or_default()
            .insert(r.run.seed, r.run.test_loss);
    }
    Ok(aggregate(groups))
}

/// Task label to the per-question columns it groups, e.g.
/// `{"bar": ["gz2/bar", "decals/bar"]}`. Columns may carry the `q:` prefix.
pub type TaskMapping = BTreeMap<String, Vec<String>>;

pub fn parse_task_mapping(json: &str) -> Result<TaskMapping, RunError> {
    Ok(serde_json::from_str(json)?)
}

/// Columns matching `task`: those listed in `mapping`, or without a mapping,
/// every column whose label (the part after the last `/`) equals `task`.
fn task_columns<'a>(table: &'a RunTable, task: &str, mapping: Option<&TaskMapping>) -> Vec<String> {
    match mapping {
        Some(m) => m
            .get(task)
            .map(|cols| {
                cols.iter()
                    .map(|c| c.strip_prefix(TASK_PREFIX).unwrap_or(c).to_owned())
                    .collect()
            })
            .unwrap_or_default(),
        None => table
            .task_columns()
            .into_iter()
            .filter(|c| c.rsplit('/').next() == Some(task))
            .map(str::to_owned)
            .collect(),
    }
}

/// Per-run unweighted mean over the task's campaign columns, then aggregated
/// over seeds as in [`aggregate_minmax`]. Runs with none of the columns are skipped.
pub fn aggregate_task_loss(
    table: &RunTable,
    task: &str,
    mapping: Option<&TaskMapping>,
) -> Result<Vec<AggregateRow>, RunError> {
    let columns = task_columns(table, task, mapping);
    let mut groups: BTreeMap<GroupKey, BTreeMap<i64, f64>> = BTreeMap::new();
    for r in &table.rows {
        let values: Vec<f64> = columns
            .iter()
            .filter_map(|c| r.task_losses.get(c).copied())
            .collect();
        if values.is_empty() {
            continue;
        }
        groups
            .entry((
                r.run.family.clone(),
                r.run.variant.clone(),
                r.run.dataset_size,
            ))
            .or_default()
            .insert(r.run.seed, values.iter().sum::<f64>() / values.len() as f64);
    }
    if groups.is_empty() {
        return Err(RunError::MissingTask(task.to_owned()));
    }
    Ok(aggregate(groups))
}

pub const AGGREGATE_HEADER: &str =
    "task,family,variant,dataset_size,n_seeds,loss_mean,loss_min,loss_max";

/// CSV lines (no header) for aggregate rows of one task.
pub fn emit_aggregates(task: &str, rows: &[AggregateRow]) -> String {
    rows.iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}\n",
                csv_field(task),
                csv_field(&r.family),
                csv_field(&r.variant),
                r.dataset_size,
                r.n_seeds,
                format_loss(r.loss_mean),
                format_loss(r.loss_min),
                format_loss(r.loss_max)
            )
        })
        .collect()
}
