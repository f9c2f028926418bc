use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use morphoscale::dirmult::{
    grad_log_dirmult, log_dirmult, multi_task_log_likelihood, per_question_log_likelihood,
    Concentrations, VoteCounts,
};
use morphoscale::ensemble::SamplerConfig;
use morphoscale::gp::{gp_fit_standardized, gp_predict, select_hyperparameters, HyperGrid, Kernel};
use morphoscale::records::{
    read_jsonl, write_jsonl, AlphaRecord, FeatureRecord, TruthRecord, VoteRecord,
};
use morphoscale::runstore::{
    aggregate_minmax, aggregate_task_loss, emit_aggregates, emit_runs, parse_runs,
    parse_task_mapping, AGGREGATE_HEADER,
};
use morphoscale::scalefit::{
    estimate_noise_sigma, fit_scaling_law, format_summary_row, group_runs, log_grid, plot_band,
    read_samples_csv, write_samples_csv, FlatPrior, LogBase, PlotRow, RunObservation, ScalingFit,
};
use morphoscale::schema::{
    build_global_index, parse_schema, validate_campaign, Campaign, GlobalAnswerIndex,
};
use morphoscale::toytrain::{
    evaluate, synthetic_features, train, Example, LinearHead, Link, TrainConfig,
};
use morphoscale::votesim::{sample_dataset_with_index, SimulationConfig, VolunteerCount};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::{
    AggregateArgs, Command, FitGpArgs, FitScalingArgs, GradCheckArgs, GridArgs, LossArgs,
    PredictArgs, SchemaCommand, SigmaArg, SimulateArgs, TrainToyArgs, UsageError, XUnits,
};

pub fn run(command: Command, quiet: bool) -> Result<ExitCode> {
    match command {
        Command::Schema(SchemaCommand::Validate { file }) => schema_validate(&file),
        Command::Simulate(a) => simulate(a),
        Command::Loss(a) => loss(a),
        Command::GradCheck(a) => grad_check(a),
        Command::FitScaling(a) => fit_scaling(a, quiet),
        Command::Predict(a) => predict(a),
        Command::FitGp(a) => fit_gp(a),
        Command::Aggregate(a) => aggregate(a),
        Command::TrainToy(a) => train_toy(a, quiet),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn to_json(value: &Value) -> String {
    serde_json::to_string_pretty(value).expect("json values serialize") + "\n"
}

fn load_schema(path: &Path) -> Result<(Vec<Campaign>, GlobalAnswerIndex)> {
    let campaigns =
        parse_schema(&read(path)?).with_context(|| format!("schema {}", path.display()))?;
    let index =
        build_global_index(&campaigns).with_context(|| format!("schema {}", path.display()))?;
    Ok((campaigns, index))
}

fn schema_validate(path: &Path) -> Result<ExitCode> {
    let campaigns = parse_schema(&read(path)?)?;
    let mut ok = true;
    for campaign in &campaigns {
        let report = validate_campaign(campaign);
        for v in &report.violations {
            eprintln!("campaign `{}`: {v}", report.campaign);
        }
        ok &= report.is_ok();
    }
    if ok {
        build_global_index(&campaigns)?;
        println!("ok");
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let (campaigns, index) = load_schema(&a.schema)?;
    let truths = read_jsonl::<TruthRecord>(&read(&a.truth)?)
        .with_context(|| format!("truth {}", a.truth.display()))?
        .iter()
        .map(TruthRecord::to_truth)
        .collect::<Result<Vec<_>, _>>()?;
    let volunteers = match a.volunteer_range {
        Some((min, max)) => VolunteerCount::Uniform { min, max },
        None => VolunteerCount::Fixed(a.n_volunteers),
    };
    let config = SimulationConfig {
        volunteers,
        seed: a.seed,
        rho_mode: a.rho_mode.into(),
    };
    let galaxies = sample_dataset_with_index(&campaigns, &index, &truths, &config)?;

    let records: Vec<VoteRecord> = galaxies
        .iter()
        .map(|g| VoteRecord::from_simulated(g, &index))
        .collect();
    write(&a.out, &write_jsonl(&records))?;
    if let Some(path) = &a.truth_out {
        let sidecar: Vec<TruthRecord> = truths
            .iter()
            .zip(&galaxies)
            .map(|(t, g)| TruthRecord::from_simulation(t, g))
            .collect();
        write(path, &write_jsonl(&sidecar))?;
    }
    if let Some(path) = &a.features_out {
        if !(a.feature_noise >= 0.0 && a.feature_noise.is_finite()) {
            return Err(usage(format!(
                "feature noise must be non-negative, got {}",
                a.feature_noise
            )));
        }
        let features: Vec<FeatureRecord> = galaxies
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut rho = vec![0.0; index.len()];
                for (question, values) in &g.rho {
                    let slice = index
                        .slice_of(&g.campaign_id, question)
                        .expect("simulated question");
                    rho[slice.range.clone()].copy_from_slice(values);
                }
                FeatureRecord {
                    galaxy_id: g.galaxy_id.clone(),
                    features: synthetic_features(&rho, a.feature_noise, a.seed, i as u64),
                }
            })
            .collect();
        write(path, &write_jsonl(&features))?;
    }
    let votes: u64 = galaxies.iter().flat_map(|g| g.votes.as_slice()).sum();
    print!(
        "{}",
        to_json(&json!({ "galaxies": galaxies.len(), "total_votes": votes }))
    );
    Ok(ExitCode::SUCCESS)
}

fn loss(a: LossArgs) -> Result<ExitCode> {
    let (_, index) = load_schema(&a.schema)?;
    let votes = read_jsonl::<VoteRecord>(&read(&a.votes)?)
        .with_context(|| format!("votes {}", a.votes.display()))?;
    let alphas = read_jsonl::<AlphaRecord>(&read(&a.alpha)?)
        .with_context(|| format!("alpha {}", a.alpha.display()))?;
    let mut by_galaxy: HashMap<&str, &AlphaRecord> = HashMap::new();
    for r in &alphas {
        if by_galaxy.insert(r.galaxy_id(), r).is_some() {
            bail!("alpha file lists galaxy `{}` twice", r.galaxy_id());
        }
    }
    if votes.is_empty() {
        bail!("no vote records in {}", a.votes.display());
    }
    let include = !a.no_coefficient;
    let mut total = 0.0;
    let mut rows = Vec::with_capacity(votes.len());
    for record in &votes {
        let k = record.to_votes(&index)?;
        let alpha = by_galaxy
            .get(record.galaxy_id.as_str())
            .ok_or_else(|| anyhow!("no concentrations for galaxy `{}`", record.galaxy_id))?
            .to_concentrations(&k, &index)?;
        let per_q = per_question_log_likelihood(&k, &alpha, &index, include)?;
        let questions: BTreeMap<String, f64> = index
            .slices()
            .iter()
            .zip(&per_q)
            .filter(|(s, _)| s.campaign == record.campaign_id)
            .map(|(s, &ll)| (s.name(), ll))
            .collect();
        let galaxy_total = if include {
            multi_task_log_likelihood(&k, &alpha, &index)?
        } else {
            per_q.iter().sum()
        };
        total += galaxy_total;
        rows.push(json!({
            "galaxy_id": record.galaxy_id,
            "campaign_id": record.campaign_id,
            "questions": questions,
            "log_likelihood": galaxy_total,
        }));
    }
    let out = json!({
        "galaxies": rows,
        "include_coefficient": include,
        "total_log_likelihood": total,
        "mean_nll": -total / votes.len() as f64 + 0.0,
    });
    print!("{}", to_json(&out));
    Ok(ExitCode::SUCCESS)
}

/// Random `(k, alpha)` with 2 to 5 answers, alpha in [0.1, 50], N in [1, 80].
fn random_case<R: Rng>(rng: &mut R) -> (VoteCounts, Vec<f64>) {
    let answers = rng.random_range(2..=5);
    let alpha: Vec<f64> = (0..answers).map(|_| rng.random_range(0.1..=50.0)).collect();
    let n = rng.random_range(1..=80);
    let mut k = vec![0u64; answers];
    for _ in 0..n {
        k[rng.random_range(0..answers)] += 1;
    }
    (VoteCounts::new(k), alpha)
}

fn grad_check(a: GradCheckArgs) -> Result<ExitCode> {
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
    let mut worst = 0.0f64;
    for _ in 0..a.n {
        let (k, alpha) = random_case(&mut rng);
        let grad = grad_log_dirmult(&k, &Concentrations::new(alpha.clone())?)?;
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-12);
        for i in 0..alpha.len() {
            let h = 1e-5 * alpha[i];
            let at = |d: f64| -> Result<f64> {
                let mut shifted = alpha.clone();
                shifted[i] += d;
                Ok(log_dirmult(&k, &Concentrations::new(shifted)?, false)?)
            };
            let fd = (at(h)? - at(-h)?) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / scale);
        }
    }
    let pass = worst <= a.tolerance;
    print!(
        "{}",
        to_json(
            &json!({ "cases": a.n, "max_rel_err": worst, "tolerance": a.tolerance, "pass": pass })
        )
    );
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn plot_grid(grid: &GridArgs, data_range: Option<(f64, f64)>) -> Result<Vec<f64>> {
    let (lo, hi) = match (grid.grid_min, grid.grid_max, data_range) {
        (Some(lo), Some(hi), _) => (lo, hi),
        (lo, hi, Some((dlo, dhi))) => (lo.unwrap_or(dlo), hi.unwrap_or(dhi)),
        _ => return Err(usage("--grid-min and --grid-max are required here")),
    };
    log_grid(lo, hi, grid.grid_points).map_err(|e| usage(e.to_string()))
}

/// Noise for predictive bands, on its own stream so it never overlaps a sampler walker.
fn band_rng(seed: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

fn emit_plot_data(rows: &[PlotRow]) -> String {
    let mut out = String::from("dataset_size,predicted_median,q05,q95\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.dataset_size, r.predicted_median, r.q05, r.q95
        ));
    }
    out
}

fn band(
    samples: &[[f64; 2]],
    grid_args: &GridArgs,
    grid: &[f64],
    base: LogBase,
    seed: u64,
) -> Result<Vec<PlotRow>> {
    Ok(match grid_args.predictive_sigma {
        None => plot_band::<ChaCha20Rng>(samples, grid, base, None)?,
        Some(sigma) => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(usage(format!(
                    "predictive sigma must be non-negative, got {sigma}"
                )));
            }
            let mut rng = band_rng(seed);
            plot_band(samples, grid, base, Some((sigma, &mut rng)))?
        }
    })
}

fn fit_json(fit: &ScalingFit, sigma_source: &str) -> Value {
    let s = &fit.summary;
    let param = |p: &morphoscale::scalefit::ParamSummary| json!({ "median": p.median, "q05": p.q05, "q95": p.q95 });
    json!({
        "params": { "m": param(&s.m), "b": param(&s.b) },
        "sigma": fit.sigma,
        "sigma_source": sigma_source,
        "log_base": fit.log_base.to_string(),
        "acceptance_fraction": s.acceptance_fraction,
        "n_samples": s.n_samples,
        "autocorr_time": { "m": s.autocorr_time[0], "b": s.autocorr_time[1] },
        "effective_sample_size": s.effective_sample_size,
        "summary_row": format_summary_row(&s.m, &s.b),
        "warnings": s.warnings,
    })
}

fn fit_scaling(a: FitScalingArgs, quiet: bool) -> Result<ExitCode> {
    let table = parse_runs(read(&a.runs)?.as_bytes())
        .with_context(|| format!("runs {}", a.runs.display()))?;
    let data = table.observations();
    if data.is_empty() {
        bail!("no runs in {}", a.runs.display());
    }
    let (sigma, source) = match a.sigma {
        SigmaArg::Fixed(s) => (s, "fixed".to_string()),
        SigmaArg::Estimate => {
            let est = estimate_noise_sigma(&data)?;
            if let Some(w) = &est.warning {
                bail!("{w}");
            }
            (
                est.sigma,
                format!("estimated from {} groups ({} dof)", est.groups, est.dof),
            )
        }
    };
    let mut sampler = SamplerConfig::with_steps(a.steps, a.seed);
    sampler.walkers = a.walkers;
    if let Some(b) = a.burn_in {
        sampler.burn_in = b;
    }
    let groups = group_runs(&data, a.group_by);
    if groups.len() > 1 && (a.samples_out.is_some() || a.plot_out.is_some()) {
        return Err(usage(
            "--samples-out and --plot-out need a single group; use --group-by none",
        ));
    }
    let prior = FlatPrior::default();
    let mut fits = BTreeMap::new();
    for (key, runs) in &groups {
        let fit = fit_scaling_law(runs, sigma, &prior, a.log_base, &sampler)
            .with_context(|| format!("fitting group `{key}`"))?;
        if !quiet {
            for w in &fit.summary.warnings {
                eprintln!("warning ({key}): {w}");
            }
        }
        fits.insert(key.clone(), (fit, runs));
    }
    if let Some((fit, runs)) = fits.values().next().filter(|_| fits.len() == 1) {
        if let Some(path) = &a.samples_out {
            write(path, &write_samples_csv(&fit.samples))?;
        }
        if let Some(path) = &a.plot_out {
            let range = size_range(runs);
            let grid = plot_grid(&a.grid, Some(range))?;
            write(
                path,
                &emit_plot_data(&band(&fit.samples, &a.grid, &grid, a.log_base, a.seed)?),
            )?;
        }
    }
    let out = if a.group_by == morphoscale::scalefit::GroupBy::None {
        let (fit, _) = fits.values().next().expect("one group");
        fit_json(fit, &source)
    } else {
        let groups: BTreeMap<&String, Value> = fits
            .iter()
            .map(|(k, (f, _))| (k, fit_json(f, &source)))
            .collect();
        json!({ "group_by": a.group_by, "groups": groups })
    };
    print!("{}", to_json(&out));
    Ok(ExitCode::SUCCESS)
}

fn size_range(runs: &[RunObservation]) -> (f64, f64) {
    let lo = runs.iter().map(|r| r.dataset_size).min().unwrap_or(1);
    let hi = runs.iter().map(|r| r.dataset_size).max().unwrap_or(1);
    (lo as f64, hi as f64)
}

fn predict(a: PredictArgs) -> Result<ExitCode> {
    match (a.m.zip(a.b), &a.samples) {
        (Some((m, b)), None) => {
            if a.n.is_empty() {
                return Err(usage("point mode needs --n"));
            }
            let mut out = String::new();
            for &n in &a.n {
                if !(n >= 1.0) {
                    bail!("dataset size must be at least 1, got {n}");
                }
                out.push_str(&format!("{:.*}\n", a.decimals, m * a.log_base.log(n) + b));
            }
            print!("{out}");
        }
        (None, Some(path)) => {
            let samples = read_samples_csv(read(path)?.as_bytes())
                .with_context(|| format!("samples {}", path.display()))?;
            let grid = if a.n.is_empty() {
                plot_grid(&a.grid, None)?
            } else {
                a.n.clone()
            };
            let text = emit_plot_data(&band(&samples, &a.grid, &grid, a.log_base, a.seed)?);
            match &a.out {
                Some(p) => write(p, &text)?,
                None => print!("{text}"),
            }
        }
        _ => return Err(usage("give either --m and --b, or --samples")),
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct Point {
    x: f64,
    y: f64,
}

fn fit_gp(a: FitGpArgs) -> Result<ExitCode> {
    let points: Vec<Point> = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(read(&a.points)?.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .with_context(|| format!("points {}", a.points.display()))?;
    if points.is_empty() {
        bail!("no points in {}", a.points.display());
    }
    let to_units = |x: f64| match a.x_units {
        XUnits::Raw => Ok(x),
        XUnits::Log10 if x > 0.0 => Ok(x.log10()),
        XUnits::Log10 => Err(anyhow!("x = {x} has no log10")),
    };
    let x = points
        .iter()
        .map(|p| to_units(p.x))
        .collect::<Result<Vec<_>>>()?;
    let y: Vec<f64> = points.iter().map(|p| p.y).collect();
    let (kernel, selection) = match (a.signal_variance, a.noise_variance) {
        (Some(s), Some(n)) => (Kernel::new(s, a.length_scale, n)?, "fixed"),
        _ => (
            select_hyperparameters(&x, &y, a.length_scale, &HyperGrid::default())?.0,
            "grid",
        ),
    };
    let fit = gp_fit_standardized(&x, &y, kernel)?;
    if let Some(path) = &a.grid_out {
        if a.grid_points == 0 {
            return Err(usage("--grid-points must be positive"));
        }
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let grid: Vec<f64> = if a.grid_points == 1 {
            vec![lo]
        } else {
            (0..a.grid_points)
                .map(|i| lo + (hi - lo) * i as f64 / (a.grid_points - 1) as f64)
                .collect()
        };
        let (mean, var) = gp_predict(&fit, &grid);
        let mut out = String::from("x,mean,lower2sigma,upper2sigma\n");
        for ((u, m), v) in grid.iter().zip(&mean).zip(&var) {
            let xv = match a.x_units {
                XUnits::Raw => *u,
                XUnits::Log10 => 10f64.powf(*u),
            };
            let sd = v.sqrt();
            out.push_str(&format!("{xv},{m},{},{}\n", m - 2.0 * sd, m + 2.0 * sd));
        }
        write(path, &out)?;
    }
    let k = fit.kernel();
    print!(
        "{}",
        to_json(&json!({
            "n_points": x.len(),
            "x_units": a.x_units,
            "length_scale": k.length_scale(),
            "signal_variance": k.signal_variance(),
            "noise_variance": k.noise_variance(),
            "hyperparameters": selection,
            "jitter": fit.jitter(),
            "log_marginal_likelihood": fit.log_marginal_likelihood(),
        }))
    );
    Ok(ExitCode::SUCCESS)
}

fn aggregate(a: AggregateArgs) -> Result<ExitCode> {
    let table = parse_runs(read(&a.runs)?.as_bytes())
        .with_context(|| format!("runs {}", a.runs.display()))?;
    if a.canonical {
        print!("{}", emit_runs(&table));
        return Ok(ExitCode::SUCCESS);
    }
    let mapping = match &a.tasks {
        Some(p) => {
            Some(parse_task_mapping(&read(p)?).with_context(|| format!("tasks {}", p.display()))?)
        }
        None => None,
    };
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    out.push_str(&emit_aggregates("test_loss", &aggregate_minmax(&table)?));
    let tasks: BTreeSet<String> = if !a.task.is_empty() {
        a.task.iter().cloned().collect()
    } else if let Some(m) = &mapping {
        m.keys().cloned().collect()
    } else {
        table
            .task_columns()
            .into_iter()
            .filter_map(|c| c.rsplit('/').next().map(str::to_owned))
            .collect()
    };
    for task in &tasks {
        out.push_str(&emit_aggregates(
            task,
            &aggregate_task_loss(&table, task, mapping.as_ref())?,
        ));
    }
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

fn train_toy(a: TrainToyArgs, quiet: bool) -> Result<ExitCode> {
    let (_, index) = load_schema(&a.schema)?;
    let votes = read_jsonl::<VoteRecord>(&read(&a.votes)?)
        .with_context(|| format!("votes {}", a.votes.display()))?;
    let features = read_jsonl::<FeatureRecord>(&read(&a.features)?)
        .with_context(|| format!("features {}", a.features.display()))?;
    let by_galaxy: HashMap<&str, &Vec<f64>> = features
        .iter()
        .map(|f| (f.galaxy_id.as_str(), &f.features))
        .collect();
    let data = votes
        .iter()
        .map(|r| {
            let x = by_galaxy
                .get(r.galaxy_id.as_str())
                .ok_or_else(|| anyhow!("no features for galaxy `{}`", r.galaxy_id))?;
            Ok(Example {
                features: x.to_vec(),
                votes: r.to_votes(&index)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n_features = data
        .first()
        .map(|e| e.features.len())
        .ok_or_else(|| anyhow!("no training galaxies"))?;
    let link = if a.alpha_max.is_infinite() {
        Link { alpha_max: None }
    } else if a.alpha_max > 1.0 {
        Link {
            alpha_max: Some(a.alpha_max),
        }
    } else {
        return Err(usage(format!(
            "--alpha-max must exceed 1, got {}",
            a.alpha_max
        )));
    };
    let config = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        weight_decay: a.weight_decay,
        seed: a.seed,
    };
    let head = LinearHead::zeros(n_features, index.len(), link);
    let outcome = train(&head, &data, &index, &config)?;
    write(
        &a.out,
        &(serde_json::to_string_pretty(&outcome.head)? + "\n"),
    )?;
    let mut trace = String::from("epoch,mean_nll\n");
    for (epoch, nll) in &outcome.trace {
        trace.push_str(&format!("{epoch},{nll}\n"));
    }
    match &a.trace_out {
        Some(p) => write(p, &trace)?,
        None => print!("{trace}"),
    }
    if !quiet {
        let eval = evaluate(&outcome.head, &data, &index)?;
        eprintln!("training mean NLL {}", eval.mean_nll);
        for q in eval.questions.iter().filter(|q| q.answered > 0) {
            eprintln!(
                "  {}: {} galaxies, mean |fraction error| {:.4}",
                q.question,
                q.answered,
                q.mean_abs_error.unwrap_or(0.0)
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}
