use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn shared_models() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("predictor-cache")
}

fn headstage(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headstage"))
        .current_dir(dir)
        .args(["--log-level", "warn"])
        .args(args)
        .output()
        .expect("spawn headstage")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// A small, fast-to-train predictor for commands whose output quality is not
/// under test.
const TINY: &[&str] = &[
    "--set",
    "training.n_samples=40",
    "--set",
    "training.n_templates=8",
    "--set",
    "training.hyperparams.max_epochs=20",
    "--set",
    "synth.n_electrodes=4",
    "--set",
    "synth.duration_s=2.0",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

fn mean_factor(text: &str) -> f64 {
    let rest = text.split("mean factor ").nth(1).expect("mean factor line");
    rest.split(',').next().unwrap().trim().parse().unwrap()
}

#[test]
fn synth_is_deterministic_and_sized() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["synth", "--set", "synth.shared_neurons=0", "--set"];
    let a = stdout(&headstage(tmp.path(), &[&args[..], &["paths.dataset=a"]].concat()));
    stdout(&headstage(tmp.path(), &[&args[..], &["paths.dataset=b"]].concat()));
    assert!(a.contains("wrote 32 channels x 300000 samples at 30000 Hz"), "{a}");
    for f in ["trace.bin", "trace.json", "truth.json"] {
        let x = fs::read(tmp.path().join("a").join(f)).unwrap();
        let y = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    assert_eq!(
        fs::metadata(tmp.path().join("a/trace.bin")).unwrap().len(),
        32 * 300_000 * 2
    );
    let line = a.lines().find(|l| l.starts_with("ground-truth events")).unwrap();
    let nums: Vec<usize> = line.split_whitespace().filter_map(|w| w.parse().ok()).collect();
    assert!(nums[0] >= 150 && nums[1] <= 250, "{line}");
}

#[test]
fn train_caches_and_reports_mae() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_tiny(&["train", "--set", "training.n_samples=10"]);
    let first = stdout(&headstage(tmp.path(), &args));
    let second = stdout(&headstage(tmp.path(), &args));
    assert!(first.starts_with("trained predictor"), "{first}");
    assert!(second.starts_with("cached predictor"), "{second}");
    let mae = |s: &str| s.lines().find(|l| l.starts_with("held-out MAE")).unwrap().to_string();
    assert_eq!(mae(&first), mae(&second));
}

#[test]
fn run_records_stale_epoch_under_downlink_drop() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stdout(&headstage(
        tmp.path(),
        &with_tiny(&[
            "run",
            "--fault",
            "downlink-drop@2",
            "--set",
            "session.recalibration_interval_s=1.0",
        ]),
    ));
    assert!(out.contains("stale [2]"), "{out}");
    let log = fs::read_to_string(tmp.path().join("out/session.jsonl")).unwrap();
    assert!(log
        .lines()
        .any(|l| l.contains("\"record\":\"config_applied\"") && l.contains("\"stale\":true")));
    let report = fs::read_to_string(tmp.path().join("out/session-report.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
}

#[test]
fn run_baseline_scheme_emits_sweep_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stdout(&headstage(
        tmp.path(),
        &with_tiny(&["run", "--scheme", "dct", "--log-level", "off"]),
    ));
    let csv = fs::read_to_string(tmp.path().join("out/run-dct.csv")).unwrap();
    let schemes: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(schemes, ["raw", "dct", "dct", "dct"]);
    assert!(out.contains("N128_K16"));
}

#[test]
fn empty_scheme_list_fails_with_usage() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["compare", "--schemes", ""],
        vec!["compare", "--set", "compare.schemes=[]"],
    ] {
        let o = headstage(tmp.path(), &with_tiny(&args));
        assert!(!o.status.success());
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("no schemes") || err.contains("scheme"), "{err}");
        assert!(err.contains("Usage:"), "{err}");
    }
}

#[test]
fn bad_configuration_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[synth]\nseeed = 3\n").unwrap();
    let o = headstage(tmp.path(), &["synth", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("seeed"));
    assert!(!headstage(tmp.path(), &["run", "--fault", "uplink-melt"])
        .status
        .success());
    assert!(!headstage(tmp.path(), &["synth", "--set", "synth.n_electrodes=0"])
        .status
        .success());
}

#[test]
fn looser_budget_never_lowers_the_mean_factor() {
    let tmp = tempfile::tempdir().unwrap();
    let models = format!("paths.models={:?}", shared_models().display().to_string());
    let run = |eps: &str| {
        mean_factor(&stdout(&headstage(
            tmp.path(),
            &[
                "optimize",
                "--set",
                &models,
                "--set",
                &format!("session.optimizer.epsilon={eps}"),
            ],
        )))
    };
    let (tight, loose) = (run("0.05"), run("0.10"));
    assert!(loose >= tight, "{tight} -> {loose}");
    let cv = fs::read_to_string(tmp.path().join("out/config.json")).unwrap();
    assert!(cv.contains("\"threshold_uv\""));
}

#[test]
fn compare_writes_one_row_per_operating_point() {
    let tmp = tempfile::tempdir().unwrap();
    let models = format!("paths.models={:?}", shared_models().display().to_string());
    stdout(&headstage(
        tmp.path(),
        &[
            "compare",
            "--schemes",
            "raw,adaptive,uniform",
            "--set",
            &models,
            "--set",
            "compare.uniform_factors=[2]",
        ],
    ));
    let csv = fs::read_to_string(tmp.path().join("out/compare.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let labels: Vec<String> = rows.iter().map(|r| format!("{} {}", r[0], r[1])).collect();
    assert_eq!(
        labels,
        [
            "raw x1",
            "adaptive eps0.05",
            "adaptive eps0.1",
            "adaptive match_x2",
            "uniform x2"
        ]
    );
    let sde = |label: &str| -> f64 {
        rows[labels.iter().position(|l| l == label).unwrap()][6]
            .parse()
            .unwrap()
    };
    assert!(sde("adaptive match_x2") <= sde("uniform x2"));
}
