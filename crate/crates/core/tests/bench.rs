use std::collections::{BTreeMap, HashMap};

use colostream::bench::{
    compare_modes, corpus_records, expand_matrix, read_report_csv, run_experiment,
    run_experiment_with, write_comparison_csv, Deployment, ExperimentResult, ExperimentSpec,
    RunOptions, SourceMode, WorkloadKind,
};
use colostream::clients::ClientKind;

fn quick(workload: WorkloadKind, mode: SourceMode) -> ExperimentSpec {
    ExperimentSpec {
        workload,
        source_mode: mode,
        deployment: Deployment::SingleProcess,
        duration_seconds: 2,
        warmup_seconds: 1,
        record_cap: Some(50_000),
        ..Default::default()
    }
}

fn words(v: &[u8]) -> impl Iterator<Item = String> + '_ {
    v.split(|b| !b.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| String::from_utf8_lossy(w).to_ascii_lowercase())
}

#[test]
fn count_conserves_records_in_both_modes() {
    for mode in [SourceMode::Pull, SourceMode::Push] {
        let dir = tempfile::tempdir().unwrap();
        let r = run_experiment(&quick(WorkloadKind::Count, mode), dir.path()).unwrap();
        assert_eq!(r.producer_records, 50_000, "{mode:?}");
        assert!(r.record_cap_reached);
        assert_eq!(r.consumer_records, r.producer_records, "{mode:?}");
        assert_eq!(r.sink_records, r.producer_records, "{mode:?}");
        // Each component's CSV agrees with the summary.
        let prod = read_report_csv(&dir.path().join("producers.csv"), ClientKind::Producer).unwrap();
        assert_eq!(prod.iter().map(|c| c.records()).sum::<u64>(), 50_000);
        let cons = read_report_csv(&dir.path().join("consumers.csv"), ClientKind::Pull).unwrap();
        assert_eq!(cons.iter().map(|c| c.records()).sum::<u64>(), 50_000);
        let sink = std::fs::read_to_string(dir.path().join("sink.csv")).unwrap();
        assert!(sink.starts_with("second,task_id,stage,records\n"));
        let rpcs = std::fs::read_to_string(dir.path().join("broker_rpcs.csv")).unwrap();
        assert!(rpcs.starts_with("second,msg_type,count\n"));
        let json: ExperimentResult =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("result.json")).unwrap()).unwrap();
        assert_eq!(json.consumer_records, 50_000);
        match mode {
            SourceMode::Pull => {
                assert_eq!(r.subscribe_rpcs, 0);
                assert!(r.pull_rpcs > 0);
                assert_eq!(r.consumer_polling_workers, 1);
            }
            SourceMode::Push => {
                assert_eq!(r.subscribe_rpcs, 1);
                assert_eq!(r.pull_rpcs, 0);
                assert_eq!(r.broker_push_workers, 1);
                assert_eq!(r.consumer_polling_workers, 0);
            }
        }
    }
}

#[test]
fn filter_passes_match_scan_of_appended_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = quick(WorkloadKind::Filter, SourceMode::Push);
    spec.ns = 4;
    spec.nc = 2;
    spec.np = 2;
    spec.record_cap = Some(20_000);
    let run = run_experiment_with(&spec, &RunOptions::new(dir.path())).unwrap();
    let df = run.dataflow.unwrap();
    assert_eq!(df.records, 20_000);
    assert!(df.passed > 0 && df.passed < 20_000, "pattern should be selective: {}", df.passed);
}

#[test]
fn wordcount_is_reproducible_and_matches_corpus_oracle() {
    let mut spec = quick(WorkloadKind::Wordcount, SourceMode::Pull);
    spec.ns = 2;
    spec.nc = 2;
    spec.nmap = Some(3);
    spec.np = 2;
    spec.record_cap = Some(400);
    spec.seed = 11;
    let mut totals = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let run = run_experiment_with(&spec, &RunOptions::new(dir.path())).unwrap();
        assert_eq!(run.result.producer_records, 400);
        assert_eq!(run.result.consumer_records, 400);
        totals.push(run.dataflow.unwrap().totals);
    }
    assert_eq!(totals[0], totals[1]);
    // Producer i sends records i, i+2, ... up to its share of the cap.
    let recs = corpus_records(None, 11).unwrap();
    let mut expect: HashMap<String, u64> = HashMap::new();
    for i in 0..2 {
        for r in recs.iter().skip(i).step_by(2).take(200) {
            for w in words(r) {
                *expect.entry(w).or_default() += 1;
            }
        }
    }
    assert_eq!(totals[0], expect);
}

#[test]
fn producer_only_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        nc: 0,
        np: 2,
        ns: 4,
        record_cap: Some(30_000),
        ..quick(WorkloadKind::Count, SourceMode::Pull)
    };
    let r = run_experiment(&spec, dir.path()).unwrap();
    assert_eq!(r.producer_records, 30_000);
    assert_eq!(r.consumer_records, 0);
    assert!(!r.csv.contains_key("consumers"));
}

#[test]
fn replicated_run_uses_backup() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        replication: 2,
        record_cap: Some(10_000),
        ..quick(WorkloadKind::Count, SourceMode::Pull)
    };
    let r = run_experiment(&spec, dir.path()).unwrap();
    assert_eq!(r.consumer_records, 10_000);
    assert_eq!(r.producer_records, 10_000);
}

#[test]
fn matrix_yields_paired_comparison() {
    let specs = expand_matrix(
        "deployment = \"single_process\"\nduration_seconds = 2\nwarmup_seconds = 1\nrecord_cap = 5000\nsource_mode = [\"pull\", \"push\"]\ncs_producer = [1024, 4096, 16384, 65536]\ncs_consumer = 131072\n",
    )
    .unwrap();
    assert_eq!(specs.len(), 8);
    let dir = tempfile::tempdir().unwrap();
    let results: Vec<ExperimentResult> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| run_experiment(s, &dir.path().join(i.to_string())).unwrap())
        .collect();
    assert_eq!(results.len(), 8);
    let rows = compare_modes(&results).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.push_subscribe_rpcs, 1);
        assert!(r.pull_rpcs > 1);
        assert_eq!(r.push_broker_workers, 1);
    }
    let mut csv = Vec::new();
    write_comparison_csv(&mut csv, &rows).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
}

fn stub(mode: SourceMode, cs: usize, consumer: u64) -> ExperimentResult {
    let spec = ExperimentSpec {
        source_mode: mode,
        cs_producer: cs,
        ..Default::default()
    };
    ExperimentResult {
        run_id: spec.run_id(),
        spec,
        producer_p50_agg: 1000,
        consumer_p50_agg: consumer,
        producer_p50_fine: 1000,
        consumer_p50_fine: consumer,
        sink_p50_agg: consumer,
        producer_records: 0,
        consumer_records: 0,
        sink_records: 0,
        filter_passed: 0,
        total_rpcs_by_type: BTreeMap::new(),
        subscribe_rpcs: u64::from(mode == SourceMode::Push),
        pull_rpcs: 0,
        broker_worker_seconds: 0.0,
        broker_push_workers: 0,
        consumer_polling_workers: 0,
        consumer_notification_workers: 0,
        consumer_worker_count: 0,
        pipeline_threads: 0,
        distinct_keys: 0,
        window_emissions: 0,
        late_pairs: 0,
        record_cap_reached: false,
        elapsed_seconds: 0.0,
        csv: BTreeMap::new(),
    }
}

#[test]
fn identical_runs_compare_at_ratio_one() {
    let results = vec![
        stub(SourceMode::Pull, 1024, 500),
        stub(SourceMode::Push, 1024, 500),
        stub(SourceMode::Pull, 4096, 800),
        stub(SourceMode::Push, 4096, 1200),
    ];
    let rows = compare_modes(&results).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].ratio, 1.0);
    assert_eq!(rows[1].ratio, 1.5);
}

#[test]
fn unpaired_results_are_an_error() {
    let results = vec![stub(SourceMode::Pull, 1024, 500), stub(SourceMode::Push, 2048, 500)];
    assert!(compare_modes(&results).is_err());
}

#[test]
fn repetitions_reduce_to_medians() {
    let results = vec![
        stub(SourceMode::Pull, 1024, 100),
        stub(SourceMode::Pull, 1024, 300),
        stub(SourceMode::Pull, 1024, 200),
        stub(SourceMode::Push, 1024, 400),
        stub(SourceMode::Push, 1024, 100),
        stub(SourceMode::Push, 1024, 600),
    ];
    let rows = compare_modes(&results).unwrap();
    assert_eq!((rows[0].pull_consumer_p50, rows[0].push_consumer_p50, rows[0].runs), (200, 400, 3));
}
