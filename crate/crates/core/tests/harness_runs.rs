use std::fs;
use std::path::Path;

use relaykd::harness::{ablation_grid, run_experiment, ExperimentConfig, Method, METRICS_HEADER};

fn base(method: Method, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.method = method;
    cfg.clients = 3;
    cfg.rounds = 4;
    cfg.hidden = vec![12];
    cfg.feature_dim = 8;
    cfg.data = "synth:classes=5,dim=6,per_class=24,test_per_class=20,sep=2.5".parse().unwrap();
    cfg.subsample = Some(90);
    cfg.hp.n_avg = 3;
    cfg.seed = 21;
    cfg.out = out.to_path_buf();
    cfg
}

fn metrics(cfg: &ExperimentConfig) -> String {
    fs::read_to_string(run_experiment(cfg).unwrap().metrics_path).unwrap()
}

#[test]
fn ours_without_weights_or_traffic_is_il() {
    let dir = tempfile::tempdir().unwrap();
    let mut ours = base(Method::Ours, &dir.path().join("ours"));
    ours.hp.lambda_kd = 0.0;
    ours.hp.lambda_disc = 0.0;
    ours.traffic = false;
    let il = base(Method::Il, &dir.path().join("il"));
    assert_eq!(metrics(&ours), metrics(&il));
}

#[test]
fn ours_without_weights_trains_like_il_even_with_traffic() {
    let dir = tempfile::tempdir().unwrap();
    let mut ours = base(Method::Ours, &dir.path().join("ours"));
    ours.hp.lambda_kd = 0.0;
    ours.hp.lambda_disc = 0.0;
    let a = run_experiment(&ours).unwrap();
    let b = run_experiment(&base(Method::Il, &dir.path().join("il"))).unwrap();
    assert_eq!(a.models, b.models);
    assert!(a.summary.total_uplink_floats > 0);
    assert_eq!(b.summary.total_uplink_floats, 0);
}

#[test]
fn centralized_equals_single_client_il() {
    let dir = tempfile::tempdir().unwrap();
    let cl = base(Method::Cl, &dir.path().join("cl"));
    let mut il = base(Method::Il, &dir.path().join("il"));
    il.clients = 1;
    assert_eq!(metrics(&cl), metrics(&il));
}

#[test]
fn fd_without_weight_is_il() {
    let dir = tempfile::tempdir().unwrap();
    let mut fd = base(Method::Fd, &dir.path().join("fd"));
    fd.lambda_fd = 0.0;
    let a = run_experiment(&fd).unwrap();
    let b = run_experiment(&base(Method::Il, &dir.path().join("il"))).unwrap();
    assert_eq!(a.models, b.models);
}

#[test]
fn reruns_are_byte_identical() {
    for method in Method::ALL {
        let dir = tempfile::tempdir().unwrap();
        let a = metrics(&base(method, &dir.path().join("a")));
        let b = metrics(&base(method, &dir.path().join("b")));
        assert_eq!(a, b, "{method}");
        assert!(a.starts_with(METRICS_HEADER));
    }
}

#[test]
fn seeds_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let a = base(Method::Ours, &dir.path().join("a"));
    let mut b = base(Method::Ours, &dir.path().join("b"));
    b.seed += 1;
    assert_ne!(metrics(&a), metrics(&b));
}

#[test]
fn accuracies_are_fractions_and_rows_cover_every_client() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base(Method::Fl, dir.path());
    let text = metrics(&cfg);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), cfg.rounds * cfg.clients);
    for r in &rows {
        assert_eq!(r.len(), 10);
        for field in [r[2], r[3]] {
            let v: f64 = field.parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    // FedAvg clients share the global model after aggregation
    let last: Vec<&Vec<&str>> = rows.iter().filter(|r| r[0] == "4").collect();
    assert!(last.windows(2).all(|w| w[0][3] == w[1][3]));
}

#[test]
fn ablation_reports_improvement_over_zero_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base(Method::Ours, dir.path());
    cfg.rounds = 2;
    let result = ablation_grid(&cfg, &[0.0, 1.0], &[0.0, 0.5]).unwrap();
    assert_eq!(result.accuracy.len(), 2);
    assert_eq!(result.accuracy[0][0], result.baseline);
    assert_eq!(result.improvement()[0][0], 0.0);
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    // the (0,0) cell is ours with zero weights, i.e. IL
    let mut il = base(Method::Il, &dir.path().join("il"));
    il.rounds = 2;
    assert_eq!(run_experiment(&il).unwrap().summary.mean_test_acc, result.baseline);
}

#[test]
fn missing_data_directory_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base(Method::Il, dir.path());
    cfg.data = format!("idx:{}", dir.path().join("nope").display()).parse().unwrap();
    let err = run_experiment(&cfg).unwrap_err().to_string();
    assert!(err.contains("train-images"), "{err}");
}
