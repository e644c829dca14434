//! `bench` command: stage timings of the Schur update against the dense
//! marginalized-EKF oracle on matched window instances.

use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use schurvins::evalio::load_toml;
use schurvins::landmark_solver::{ekf_update_landmark, split_landmark_system};
use schurvins::measurement::stack;
use schurvins::oracles::direct_marginalized_update;
use schurvins::schur_update::{build_equivalent, ekf_update_pose, schur_marginalize, DEFAULT_C3_EPS};
use schurvins::simulator::random_window_instance;

/// Landmark count from which the Schur path must beat the dense oracle.
const REQUIRED_SPEEDUP_FROM: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub clones: usize,
    pub landmarks: Vec<usize>,
    pub observations: usize,
    pub repetitions: usize,
    pub seed: Option<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { clones: 4, landmarks: vec![5, 10, 20, 50, 100], observations: 8, repetitions: 20, seed: None }
    }
}

/// Wall times of one repetition, seconds.
#[derive(Debug, Clone, Copy, Default)]
struct Sample {
    build: f64,
    marginalize: f64,
    pose_update: f64,
    landmark_update: f64,
    dense: f64,
}

impl Sample {
    fn schur(&self) -> f64 {
        self.build + self.marginalize + self.pose_update + self.landmark_update
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn time_instance(clones: usize, landmarks: usize, observations: usize, seed: u64) -> Result<(usize, Sample)> {
    let inst = random_window_instance(seed, clones, landmarks, observations, observations, false)?;
    let model = stack(&inst.state, inst.landmarks.values(), &inst.cameras, inst.u).model;

    let mut state = inst.state.clone();
    let mut lms = inst.landmarks.clone();
    let t0 = Instant::now();
    let sys = build_equivalent(&model)?;
    let t1 = Instant::now();
    let prm = schur_marginalize(&sys, DEFAULT_C3_EPS)?;
    let t2 = Instant::now();
    let dx = ekf_update_pose(&mut state, &prm)?;
    let t3 = Instant::now();
    for res in split_landmark_system(&sys, &dx) {
        if let Some(lm) = lms.get_mut(&res.landmark_id) {
            ekf_update_landmark(lm, &res)?;
        }
    }
    let t4 = Instant::now();
    direct_marginalized_update(&model, &inst.state.cov)?;
    let t5 = Instant::now();

    let sample = Sample {
        build: (t1 - t0).as_secs_f64(),
        marginalize: (t2 - t1).as_secs_f64(),
        pose_update: (t3 - t2).as_secs_f64(),
        landmark_update: (t4 - t3).as_secs_f64(),
        dense: (t5 - t4).as_secs_f64(),
    };
    Ok((model.num_rows(), sample))
}

pub fn cmd_bench(config: Option<&Path>, out: Option<&Path>, seed: u64) -> Result<ExitCode> {
    let config: BenchConfig = match config {
        Some(path) => load_toml(path).with_context(|| format!("loading {}", path.display()))?,
        None => BenchConfig::default(),
    };
    anyhow::ensure!(config.repetitions > 0, "repetitions must be positive");
    let seed = config.seed.unwrap_or(seed);

    let mut table = String::from(
        "landmarks,clones,rows,build_ms,marginalize_ms,pose_update_ms,landmark_update_ms,\
         schur_ms,schur_std_ms,dense_ms,dense_std_ms,speedup,per_landmark_us\n",
    );
    let mut slow = Vec::new();
    for &landmarks in &config.landmarks {
        let mut rows = 0;
        let mut samples = Vec::with_capacity(config.repetitions);
        for rep in 0..config.repetitions {
            let (r, s) = time_instance(config.clones, landmarks, config.observations, seed + rep as u64)?;
            rows = r;
            samples.push(s);
        }
        let stat = |f: fn(&Sample) -> f64| mean_std(&samples.iter().map(f).collect::<Vec<_>>());
        let (build, _) = stat(|s| s.build);
        let (marg, _) = stat(|s| s.marginalize);
        let (pose, _) = stat(|s| s.pose_update);
        let (lm, _) = stat(|s| s.landmark_update);
        let (schur, schur_std) = stat(Sample::schur);
        let (dense, dense_std) = stat(|s| s.dense);
        let speedup = dense / schur;
        writeln!(
            table,
            "{landmarks},{},{rows},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{speedup:.2},{:.3}",
            config.clones,
            build * 1e3,
            marg * 1e3,
            pose * 1e3,
            lm * 1e3,
            schur * 1e3,
            schur_std * 1e3,
            dense * 1e3,
            dense_std * 1e3,
            lm * 1e6 / landmarks.max(1) as f64
        )?;
        if landmarks >= REQUIRED_SPEEDUP_FROM && schur >= dense {
            slow.push(landmarks);
        }
    }
    print!("{table}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("bench.csv"), &table)?;
    }
    if slow.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("schur path not faster than the dense oracle at L = {slow:?}");
        Ok(ExitCode::FAILURE)
    }
}
