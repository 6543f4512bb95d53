use std::path::Path;

use profil::cli::config::{Condition, ExperimentConfig};
use profil::cli::pipeline::{report, run_workspace, steer, Workspace};
use profil::cli::records::read_train_log;
use profil::cli::run_experiment;
use profil::Error;

fn small_config(condition: Condition) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(
        "seed = 3
env.n_min = 2
env.n_max = 3
env.m_min = 11
env.m_max = 13
env.max_len = 14
bc.epochs = 60
bc.demo_count = 300
probe.rollouts = 150
probe.epochs = 30
grpo.steps = 40
grpo.tasks_per_step = 4
eval.task_count = 60
eval.audit_tasks = 40
eval.bootstrap_resamples = 200
",
    )
    .unwrap();
    cfg.grpo.condition = condition;
    cfg
}

fn run_all(root: &Path) {
    for c in Condition::ALL {
        run_workspace(&Workspace::new(root, small_config(c))).unwrap();
    }
}

fn report_files(root: &Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = std::fs::read_dir(root.join("report"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read_to_string(&p).unwrap()))
        .collect()
}

#[test]
fn same_config_gives_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_all(a.path());
    run_all(b.path());
    let (ra, rb) = (report_files(a.path()), report_files(b.path()));
    assert_eq!(ra, rb);
    let names: Vec<&str> = ra.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["metrics.csv", "threshold_sweep.csv", "deciles.csv", "terciles.csv", "audit.csv", "probe.csv"] {
        assert!(names.contains(&want), "missing {want}");
    }

    // Artifact layout.
    let root = a.path();
    for f in ["demos.jsonl", "base_policy.txt", "probe.txt", "probe_rollouts.jsonl"] {
        assert!(root.join(f).exists(), "missing {f}");
    }
    for c in Condition::ALL {
        let d = root.join(c.as_str());
        for step in [20, 40] {
            assert!(d.join(format!("checkpoints/step_{step:04}.txt")).exists());
            assert!(d.join(format!("audit/step_{step:04}.jsonl")).exists());
        }
        assert!(d.join("eval_rollouts.jsonl").exists());
        assert_eq!(read_train_log(&d.join("train_log.csv")).unwrap().len(), 40);
    }

    // The report is a view of the caches: recomputing it changes nothing.
    report(root, &small_config(Condition::Profil)).unwrap();
    assert_eq!(report_files(root), ra);

    let sweep = &ra.iter().find(|(n, _)| n == "threshold_sweep.csv").unwrap().1;
    assert_eq!(
        sweep.lines().next().unwrap(),
        "condition,theta_0.05,theta_0.1,theta_0.2,theta_0.5"
    );
    let metrics = &ra.iter().find(|(n, _)| n == "metrics.csv").unwrap().1;
    assert_eq!(metrics.lines().next().unwrap(), "condition,metric,value,ci_lo,ci_hi,method,n");
    for line in metrics.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 7, "{line}");
        assert!(f[2..5].iter().all(|v| v.split('.').nth(1).is_some_and(|d| d.len() == 3)));
    }
}

#[test]
fn baseline_never_filters_and_profil_logs_its_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), small_config(Condition::Baseline));
    run_workspace(&ws).unwrap();
    let log = read_train_log(&dir.path().join("baseline/train_log.csv")).unwrap();
    assert!(log.iter().all(|r| r.filter_rate == 0.0));
    assert!(log.iter().all(|r| r.mean_p_bar > 0.0));

    run_workspace(&Workspace::new(dir.path(), small_config(Condition::Profil))).unwrap();
    let log = read_train_log(&dir.path().join("profil/train_log.csv")).unwrap();
    assert!(log.iter().all(|r| r.tau == 0.5));
    assert!(log.iter().any(|r| r.filter_rate > 0.0));
}

#[test]
fn stages_resume_and_refuse_foreign_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(Condition::Profil);
    run_workspace(&Workspace::new(dir.path(), cfg.clone())).unwrap();
    let policy = std::fs::read_to_string(dir.path().join("profil/policy.txt")).unwrap();
    let mtime = std::fs::metadata(dir.path().join("profil/policy.txt")).unwrap().modified().unwrap();
    run_workspace(&Workspace::new(dir.path(), cfg.clone())).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("profil/policy.txt")).unwrap(), policy);
    assert_eq!(
        std::fs::metadata(dir.path().join("profil/policy.txt")).unwrap().modified().unwrap(),
        mtime
    );

    let mut other = cfg.clone();
    other.bc.lr = 0.2;
    assert!(run_workspace(&Workspace::new(dir.path(), other)).is_err());
    let mut other = cfg;
    other.grpo.lr = 0.2;
    assert!(run_workspace(&Workspace::new(dir.path(), other)).is_err());
}

#[test]
fn steering_writes_a_row_per_coefficient() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), small_config(Condition::Baseline));
    let rows = steer(&ws).unwrap();
    assert_eq!(rows.len(), ws.cfg.steer.coefficients.len());
    let text = std::fs::read_to_string(dir.path().join("baseline/steer.csv")).unwrap();
    assert_eq!(text.lines().count(), rows.len() + 1);
}

#[test]
fn run_experiment_reads_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, small_config(Condition::Baseline).to_text()).unwrap();
    let out = dir.path().join("out");
    let bundle = run_experiment(&cfg_path, &out).unwrap();
    assert!(bundle.metrics.get("baseline", "accuracy").is_some());
    assert!(out.join("report/metrics.csv").exists());

    std::fs::write(&cfg_path, "grpo.condition = ppo\n").unwrap();
    match run_experiment(&cfg_path, &out).unwrap_err() {
        Error::Config { key, .. } => assert_eq!(key, "grpo.condition"),
        e => panic!("unexpected error {e}"),
    }
}
