use morphoscale::runstore::{
    aggregate_minmax, aggregate_task_loss, emit_runs, parse_runs, parse_task_mapping, RunError,
};

const CANONICAL: &str = include_str!("fixtures/runs_canonical.csv");

#[test]
fn canonical_file_round_trips() {
    let table = parse_runs(CANONICAL.as_bytes()).unwrap();
    assert_eq!(table.len(), 7);
    assert_eq!(emit_runs(&table), CANONICAL);
}

#[test]
fn shuffled_and_reformatted_input_emits_canonical_text() {
    let mut lines: Vec<&str> = CANONICAL.lines().collect();
    let header = lines.remove(0);
    lines.reverse();
    let text = format!("{header}\n{}\n", lines.join("\n"))
        .replace("19.4210", "19.421")
        .replace("0.312000", "3.12e-1");
    assert_eq!(emit_runs(&parse_runs(text.as_bytes()).unwrap()), CANONICAL);
}

#[test]
fn header_only_is_empty() {
    let header = CANONICAL.lines().next().unwrap();
    let table = parse_runs(format!("{header}\n").as_bytes()).unwrap();
    assert!(table.is_empty());
    assert!(matches!(
        aggregate_minmax(&table),
        Err(RunError::EmptyTable)
    ));
}

#[test]
fn nan_loss_is_rejected_with_its_line() {
    let text = "family,variant,parameter_count,dataset_size,seed,test_loss\na,b,1,10,0,1.0\na,b,1,10,1,NaN\n";
    match parse_runs(text.as_bytes()) {
        Err(RunError::Malformed { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn seed_aggregates() {
    let table = parse_runs(CANONICAL.as_bytes()).unwrap();
    let rows = aggregate_minmax(&table).unwrap();
    let nano = rows.iter().find(|r| r.variant == "nano").unwrap();
    assert_eq!(nano.n_seeds, 3);
    assert!((nano.loss_mean - (19.62 + 19.55 + 19.59) / 3.0).abs() < 1e-12);
    assert_eq!((nano.loss_min, nano.loss_max), (19.55, 19.62));
    let keys: Vec<(&str, &str, u64)> = rows
        .iter()
        .map(|r| (r.family.as_str(), r.variant.as_str(), r.dataset_size))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn task_means_across_campaigns() {
    let table = parse_runs(CANONICAL.as_bytes()).unwrap();
    let bar = aggregate_task_loss(&table, "bar", None).unwrap();
    let base = bar
        .iter()
        .find(|r| r.variant == "base" && r.dataset_size == 123_000)
        .unwrap();
    // seed 0 averages both campaigns, seed 1 has only one column
    assert!((base.loss_min - 0.305).abs() < 1e-12);
    assert!((base.loss_max - 0.309).abs() < 1e-12);
    let smooth = aggregate_task_loss(&table, "smooth", None).unwrap();
    assert_eq!(smooth.len(), 2);
    let mapping = parse_task_mapping(r#"{"barred": ["q:gz2/bar"]}"#).unwrap();
    let only_gz2 = aggregate_task_loss(&table, "barred", Some(&mapping)).unwrap();
    let nano = only_gz2.iter().find(|r| r.variant == "nano").unwrap();
    assert!((nano.loss_mean - (0.2 + 0.25 + 0.22) / 3.0).abs() < 1e-12);
    assert!(matches!(
        aggregate_task_loss(&table, "spiral", None),
        Err(RunError::MissingTask(_))
    ));
}
