use actwm_core::evalkit::EvalReport;
use actwm_core::expharness::{run_experiment, ExperimentId, ExperimentSpec, Progress};
use actwm_core::plantsim::{read_jsonl, DatasetKind};
use actwm_core::worldmodel::WorldModel;

fn quick_spec(seeds: Vec<u64>) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(ExperimentId::Exp2, DatasetKind::D1, seeds).unwrap();
    spec.config.train.epochs = 2;
    spec
}

#[test]
fn experiment_writes_reproducible_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = quick_spec(vec![0, 1]);
    let mut epochs = 0;
    let mut finished = vec![];
    let res = run_experiment(&spec, Some(a.path()), &mut |p| match p {
        Progress::Epoch { .. } => epochs += 1,
        Progress::SeedFinished { seed, .. } => finished.push(seed),
        Progress::SeedStarted { .. } => {}
    })
    .unwrap();
    assert_eq!(epochs, 4);
    assert_eq!(finished, vec![0, 1]);
    assert_eq!(res.seeds.len(), 2);
    assert_eq!(res.aggregate.n_evaluated, 2 * 2300);

    run_experiment(&spec, Some(b.path()), &mut |_| {}).unwrap();
    for f in ["table.csv", "seeds.csv", "config.json", "per-seed/0/report.json", "per-seed/1/loss.csv", "per-seed/1/ckpt.awm"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }

    let back: ExperimentSpec =
        serde_json::from_slice(&std::fs::read(a.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(back, spec);
    let report: EvalReport =
        serde_json::from_slice(&std::fs::read(a.path().join("per-seed/0/report.json")).unwrap()).unwrap();
    assert_eq!(report, res.seeds[0].report);
    let model = WorldModel::load(a.path().join("per-seed/0/ckpt.awm")).unwrap();
    let f = std::fs::File::open(a.path().join("dataset.jsonl")).unwrap();
    let ds = read_jsonl(std::io::BufReader::new(f)).unwrap();
    let again = actwm_core::expharness::evaluate_for_config(&spec.config, &ds, &model).unwrap();
    assert_eq!(again, report);
    let loss = std::fs::read_to_string(a.path().join("per-seed/0/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    let table = std::fs::read_to_string(a.path().join("table.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("exp2,"));
}
