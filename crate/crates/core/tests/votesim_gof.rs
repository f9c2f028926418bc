use std::collections::BTreeMap;

use morphoscale::schema::{build_global_index, parse_schema, Campaign};
use morphoscale::votesim::{
    sample_dataset, GroundTruthGalaxy, RhoMode, SimulationConfig, TruthKind, VolunteerCount,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn campaigns() -> Vec<Campaign> {
    parse_schema(
        r#"[{"id":"c","roots":["shape"],"questions":[
          {"id":"shape","label":"","answers":[{"id":"round","label":""},{"id":"disk","label":"","child_question":"bar"}]},
          {"id":"bar","label":"","answers":[{"id":"yes","label":""},{"id":"no","label":""},{"id":"maybe","label":""}]}]}]"#,
    )
    .unwrap()
}

fn truths(n: usize, shape: [f64; 2], bar: [f64; 3], kind: TruthKind) -> Vec<GroundTruthGalaxy> {
    (0..n)
        .map(|i| GroundTruthGalaxy {
            galaxy_id: format!("g{i}"),
            campaign_id: "c".into(),
            kind,
            values: BTreeMap::from([
                ("shape".to_string(), shape.to_vec()),
                ("bar".to_string(), bar.to_vec()),
            ]),
        })
        .collect()
}

/// Beta-binomial pmf by rising factorials.
fn beta_binomial(k: u64, n: u64, a: f64, b: f64) -> f64 {
    let mut p = 1.0;
    for j in 0..k {
        p *= (a + j as f64) * (n - j) as f64 / (j + 1) as f64;
    }
    for j in 0..n - k {
        p *= b + j as f64;
    }
    for j in 0..n {
        p /= a + b + j as f64;
    }
    p
}

fn binomial(k: u64, n: u64, p: f64) -> f64 {
    let mut c = 1.0;
    for j in 0..k {
        c *= (n - j) as f64 / (j + 1) as f64;
    }
    c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// Chi-square p-value with adjacent bins pooled until each expects at least 5.
fn chi_square_p(observed: &[u64], expected: &[f64]) -> f64 {
    let (mut obs, mut exp) = (Vec::new(), Vec::new());
    let (mut o, mut e) = (0.0, 0.0);
    for (&oi, &ei) in observed.iter().zip(expected) {
        o += oi as f64;
        e += ei;
        if e >= 5.0 {
            obs.push(o);
            exp.push(e);
            o = 0.0;
            e = 0.0;
        }
    }
    if let (Some(lo), Some(le)) = (obs.last_mut(), exp.last_mut()) {
        *lo += o;
        *le += e;
    }
    let stat: f64 = obs.iter().zip(&exp).map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = (obs.len() - 1) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

#[test]
fn sampled_rho_gives_beta_binomial_root_counts() {
    let n = 12u64;
    let galaxies = 4000;
    let cfg = SimulationConfig {
        volunteers: VolunteerCount::Fixed(n as u32),
        seed: 17,
        rho_mode: RhoMode::SampleRhoPerGalaxy,
    };
    let camps = campaigns();
    let index = build_global_index(&camps).unwrap();
    let sims = sample_dataset(
        &camps,
        &truths(galaxies, [2.0, 5.0], [1.0, 1.0, 1.0], TruthKind::Alpha),
        &cfg,
    )
    .unwrap();
    let round = index.index_of("c", "shape", "round").unwrap();
    let mut hist = vec![0u64; n as usize + 1];
    for s in &sims {
        hist[s.votes.as_slice()[round] as usize] += 1;
    }
    let expected: Vec<f64> = (0..=n)
        .map(|k| galaxies as f64 * beta_binomial(k, n, 2.0, 5.0))
        .collect();
    let p = chi_square_p(&hist, &expected);
    assert!(p > 1e-3, "p = {p}, hist {hist:?}");
}

#[test]
fn fixed_rho_gives_binomial_root_counts() {
    let n = 20u64;
    let galaxies = 3000;
    let cfg = SimulationConfig {
        volunteers: VolunteerCount::Fixed(n as u32),
        seed: 5,
        rho_mode: RhoMode::FixedRho,
    };
    let camps = campaigns();
    let index = build_global_index(&camps).unwrap();
    let sims = sample_dataset(
        &camps,
        &truths(galaxies, [3.0, 1.0], [1.0, 2.0, 3.0], TruthKind::Alpha),
        &cfg,
    )
    .unwrap();
    let round = index.index_of("c", "shape", "round").unwrap();
    let mut hist = vec![0u64; n as usize + 1];
    for s in &sims {
        hist[s.votes.as_slice()[round] as usize] += 1;
    }
    let expected: Vec<f64> = (0..=n)
        .map(|k| galaxies as f64 * binomial(k, n, 0.75))
        .collect();
    let p = chi_square_p(&hist, &expected);
    assert!(p > 1e-3, "p = {p}, hist {hist:?}");
}

#[test]
fn child_totals_equal_triggering_counts() {
    let cfg = SimulationConfig {
        volunteers: VolunteerCount::Uniform { min: 5, max: 40 },
        seed: 3,
        rho_mode: RhoMode::SampleRhoPerGalaxy,
    };
    let camps = campaigns();
    let index = build_global_index(&camps).unwrap();
    let sims = sample_dataset(
        &camps,
        &truths(500, [1.0, 1.0], [0.5, 0.5, 0.5], TruthKind::Alpha),
        &cfg,
    )
    .unwrap();
    let disk = index.index_of("c", "shape", "disk").unwrap();
    let bar = index.slice_of("c", "bar").unwrap().range.clone();
    let shape = index.slice_of("c", "shape").unwrap().range.clone();
    for s in &sims {
        let v = s.votes.as_slice();
        let total: u64 = v[shape.clone()].iter().sum();
        assert!((5..=40).contains(&total));
        assert_eq!(v[bar.clone()].iter().sum::<u64>(), v[disk]);
    }
}

#[test]
fn same_seed_same_votes_regardless_of_threads() {
    let cfg = SimulationConfig {
        volunteers: VolunteerCount::Fixed(40),
        seed: 8,
        rho_mode: RhoMode::SampleRhoPerGalaxy,
    };
    let camps = campaigns();
    let t = truths(300, [1.0, 2.0], [1.0, 1.0, 1.0], TruthKind::Alpha);
    let a = sample_dataset(&camps, &t, &cfg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let b = pool.install(|| sample_dataset(&camps, &t, &cfg).unwrap());
    assert_eq!(a, b);
}
