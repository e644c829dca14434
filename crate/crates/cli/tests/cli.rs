use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use schurvins::simulator::{generate, write_dataset, LandmarkField, SimConfig, TrajectoryKind};

fn schurvins(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_schurvins")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_column(file: &Path, column: &str) -> Vec<f64> {
    let text = fs::read_to_string(file).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == column).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

const STATIONARY: &str = r#"
perturb_init = false

[sim]
duration = 3.0

[sim.trajectory]
kind = "stationary"

[sim.noise]
sigma_g = 0.0
sigma_a = 0.0
sigma_bg = 0.0
sigma_ba = 0.0
pixel_sigma = 0.0
"#;

#[test]
fn stationary_zero_noise_has_negligible_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("stationary.toml");
    fs::write(&config, STATIONARY).unwrap();
    let out = dir.path().join("out");
    let run = schurvins(&["sim", "--config", path(&config), "--out", path(&out), "--seeds", "0,1"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let ate = csv_column(&out.join("metrics.csv"), "ate_rmse_m");
    assert_eq!(ate.len(), 2);
    assert!(ate.iter().all(|&a| a < 1e-6), "{ate:?}");
    assert!(out.join("seed_1/estimate.tum").is_file());
    assert!(out.join("seed_1/groundtruth.tum").is_file());
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("circle.toml");
    fs::write(&config, "[sim]\nduration = 3.0\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let run = schurvins(&["sim", "--config", path(&config), "--out", path(out), "--seed", "7"]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    }
    for file in ["metrics.csv", "summary.csv", "seed_7/estimate.tum", "seed_7/groundtruth.tum"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    let run = schurvins(&["sim", "--config", path(&missing), "--out", path(dir.path())]);
    assert_eq!(run.status.code(), Some(2));
    let run = schurvins(&["sim", "--out", path(dir.path())]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn malformed_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[sim]\nduration = -1.0\n").unwrap();
    let run = schurvins(&["sim", "--config", path(&config), "--out", path(dir.path())]);
    assert_eq!(run.status.code(), Some(1));
    assert!(!run.stderr.is_empty());
}

#[test]
fn verify_passes_including_adversarial_instances() {
    let dir = tempfile::tempdir().unwrap();
    let run = schurvins(&["verify", "--trials", "15", "--seed", "0", "--out", path(dir.path())]);
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert_eq!(run.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("PASS"));
    let dropped = csv_column(&dir.path().join("verify.csv"), "dropped");
    assert_eq!(dropped.len(), 15);
    assert!(dropped.iter().sum::<f64>() > 0.0);
}

#[test]
fn verify_rejects_zero_trials() {
    let run = schurvins(&["verify", "--trials", "0"]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn bench_emits_a_csv_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bench.toml");
    fs::write(&config, "landmarks = [20, 50]\nrepetitions = 3\n").unwrap();
    let run = schurvins(&["bench", "--config", path(&config), "--out", path(dir.path())]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let table = dir.path().join("bench.csv");
    let text = fs::read_to_string(&table).unwrap();
    let width = text.lines().next().unwrap().split(',').count();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), width);
        assert!(fields.iter().all(|f| f.parse::<f64>().is_ok()), "{line}");
    }
    let speedup = csv_column(&table, "speedup");
    assert!(speedup.iter().all(|&s| s > 1.0), "{speedup:?}");
    assert!(csv_column(&table, "schur_std_ms").iter().all(|s| s.is_finite()));
}

#[test]
fn euroc_mode_runs_on_a_euroc_layout_directory() {
    let sim = SimConfig {
        trajectory: TrajectoryKind::Sine3d { amplitude: 2.0, angular_rate: 0.4 },
        duration: 10.0,
        landmarks: LandmarkField::Room { half_x: 6.0, half_y: 6.0, half_z: 3.0, count: 10 },
        ..SimConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mav0 = dir.path().join("mav0");
    write_dataset(&generate(&sim).unwrap(), &mav0).unwrap();
    let out = dir.path().join("out");
    let run = schurvins(&["euroc", "--dataset", path(dir.path()), "--out", path(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let ate = csv_column(&out.join("metrics.csv"), "ate_rmse_m");
    assert!(ate[0] < 0.5, "{ate:?}");
    assert!(out.join("estimate.tum").is_file());
}
