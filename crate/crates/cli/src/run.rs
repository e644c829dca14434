//! `sim` and `euroc` commands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use schurvins::evalio::{self, load_toml, GroundTruth};
use schurvins::filter::{FilterConfig, InitConfig, StageTiming};
use schurvins::propagation::ImuSample;
use schurvins::simulator::{
    generate, perturb_initialization, read_dataset, run_filter, semi_synthetic, RunOutput, SemiSyntheticConfig,
    SimConfig, SimOutput,
};

/// Configuration file of the `sim` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimRunConfig {
    pub sim: SimConfig,
    /// Filter settings; derived from the simulation noise when absent. The
    /// cameras are always taken from the simulation.
    pub filter: Option<FilterConfig>,
    /// Draw the initial state from the filter prior instead of starting at
    /// the ground truth.
    pub perturb_init: bool,
}

impl Default for SimRunConfig {
    fn default() -> Self {
        Self { sim: SimConfig::default(), filter: None, perturb_init: true }
    }
}

/// Configuration file of the `euroc` command.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EurocRunConfig {
    pub tracks: SemiSyntheticConfig,
    /// Filter settings; the camera is always taken from `tracks`.
    pub filter: Option<FilterConfig>,
}

/// Per-seed metrics; everything here is deterministic for a given seed.
#[derive(Debug, Clone)]
struct SeedMetrics {
    seed: u64,
    frames: usize,
    updates: usize,
    ate_rmse: f64,
    final_error: f64,
    nees_mean: f64,
    nees_max: f64,
    dropped_imu: usize,
    timing: StageTiming,
}

impl SeedMetrics {
    fn from_run(seed: u64, run: &RunOutput) -> Result<Self> {
        let n = run.reports.len().max(1) as f64;
        let mut timing = StageTiming::default();
        for r in &run.reports {
            let t = &r.timing;
            timing.propagate += t.propagate / n;
            timing.triangulate += t.triangulate / n;
            timing.stack += t.stack / n;
            timing.schur += t.schur / n;
            timing.pose_update += t.pose_update / n;
            timing.landmark_update += t.landmark_update / n;
            timing.total += t.total / n;
        }
        Ok(Self {
            seed,
            frames: run.reports.len(),
            updates: run.reports.iter().filter(|r| r.updated).count(),
            ate_rmse: run.ate_rmse()?,
            final_error: run.final_position_error(),
            nees_mean: run.mean_nees(),
            nees_max: run.nees.iter().copied().fold(0.0, f64::max),
            dropped_imu: run.dropped_imu,
            timing,
        })
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn initial_state(output: &SimOutput, init: &InitConfig, perturb: bool, seed: u64) -> schurvins::state::SlidingWindowState {
    if perturb {
        return perturb_initialization(&output.frame_truth[0], init, seed);
    }
    let exact = InitConfig { sigma_theta: 0.0, sigma_p: 0.0, sigma_v: 0.0, sigma_ba: 0.0, sigma_bg: 0.0, ..*init };
    let mut state = perturb_initialization(&output.frame_truth[0], &exact, seed);
    state.cov = init.covariance();
    state
}

fn write_run(run: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    evalio::write_tum(&run.estimates, dir.join("estimate.tum"))?;
    evalio::write_tum(&run.truth, dir.join("groundtruth.tum"))?;
    Ok(())
}

fn write_metrics(metrics: &[SeedMetrics], out: &Path) -> Result<()> {
    let mut csv = String::from("seed,frames,updates,ate_rmse_m,final_error_m,nees_mean,nees_max,dropped_imu\n");
    let mut timing = String::from(
        "seed,propagate_ms,triangulate_ms,stack_ms,schur_ms,pose_update_ms,landmark_update_ms,total_ms\n",
    );
    for m in metrics {
        writeln!(
            csv,
            "{},{},{},{:.9},{:.9},{:.6},{:.6},{}",
            m.seed, m.frames, m.updates, m.ate_rmse, m.final_error, m.nees_mean, m.nees_max, m.dropped_imu
        )?;
        let t = &m.timing;
        writeln!(
            timing,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.seed,
            t.propagate * 1e3,
            t.triangulate * 1e3,
            t.stack * 1e3,
            t.schur * 1e3,
            t.pose_update * 1e3,
            t.landmark_update * 1e3,
            t.total * 1e3
        )?;
    }
    let (ate, ate_std) = mean_std(metrics.iter().map(|m| m.ate_rmse));
    let (nees, nees_std) = mean_std(metrics.iter().map(|m| m.nees_mean));
    let (fin, fin_std) = mean_std(metrics.iter().map(|m| m.final_error));
    let summary = format!(
        "metric,mean,std\nate_rmse_m,{ate:.9},{ate_std:.9}\nnees_mean,{nees:.6},{nees_std:.6}\nfinal_error_m,{fin:.9},{fin_std:.9}\n"
    );
    fs::write(out.join("metrics.csv"), csv)?;
    fs::write(out.join("timing.csv"), timing)?;
    fs::write(out.join("summary.csv"), summary)?;

    println!("runs: {}", metrics.len());
    println!("ATE RMSE      {ate:.6} m (std {ate_std:.6})");
    println!("pose NEES     {nees:.3} (std {nees_std:.3})");
    println!("final error   {fin:.6} m (std {fin_std:.6})");
    let (total, _) = mean_std(metrics.iter().map(|m| m.timing.total * 1e3));
    let (schur, _) = mean_std(metrics.iter().map(|m| m.timing.schur * 1e3));
    println!("frame time    {total:.3} ms (schur {schur:.3} ms)");
    Ok(())
}

pub fn cmd_sim(config: &Path, out: &Path, seeds: &[u64]) -> Result<ExitCode> {
    let run_config: SimRunConfig = load_toml(config).with_context(|| format!("loading {}", config.display()))?;
    run_config.sim.validate()?;
    let mut filter = run_config.filter.clone().unwrap_or_else(|| run_config.sim.filter_config());
    filter.cameras = run_config.sim.cameras();
    filter.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let metrics = seeds
        .par_iter()
        .map(|&seed| -> Result<SeedMetrics> {
            let sim = SimConfig { seed, ..run_config.sim.clone() };
            let output = generate(&sim)?;
            let init = initial_state(&output, &filter.init, run_config.perturb_init, seed);
            let run = run_filter(&output, filter.clone(), init).with_context(|| format!("seed {seed}"))?;
            log::info!("seed {seed}: {} frames, ATE {:.4} m", run.reports.len(), run.ate_rmse()?);
            write_run(&run, &out.join(format!("seed_{seed}")))?;
            SeedMetrics::from_run(seed, &run)
        })
        .collect::<Result<Vec<_>>>()?;
    write_metrics(&metrics, out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_euroc(dataset: &Path, out: &Path, config: Option<&Path>, seed: u64) -> Result<ExitCode> {
    let run_config: EurocRunConfig = match config {
        Some(path) => load_toml(path).with_context(|| format!("loading {}", path.display()))?,
        None => EurocRunConfig::default(),
    };
    let (imu, truth) = read_dataset(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    let t0 = truth.first().map_or(0.0, |g| g.t);
    let imu: Vec<ImuSample> = imu.into_iter().map(|s| ImuSample { t: s.t - t0, ..s }).collect();
    let truth: Vec<GroundTruth> = truth.into_iter().map(|g| GroundTruth { t: g.t - t0, ..g }).collect();

    let tracks = SemiSyntheticConfig { seed, ..run_config.tracks.clone() };
    let output = semi_synthetic(&imu, &truth, &tracks)?;
    let mut filter = run_config.filter.clone().unwrap_or_default();
    filter.cameras = output.cameras.clone();
    filter.pixel_sigma = tracks.pixel_sigma;
    filter.validate()?;
    let init = initial_state(&output, &filter.init, true, seed);
    let run = run_filter(&output, filter, init)?;
    write_run(&run, out)?;
    write_metrics(&[SeedMetrics::from_run(seed, &run)?], out)?;
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let config: SimRunConfig = toml::from_str("[sim]\nduration = 4.0\n").unwrap();
        assert_eq!(config.sim.duration, 4.0);
        assert_eq!(config.sim.imu_rate, SimConfig::default().imu_rate);
        assert!(config.perturb_init);
        assert!(config.filter.is_none());
    }

    #[test]
    fn mean_std_of_constant_is_exact() {
        let (m, s) = mean_std([2.0, 2.0, 2.0].into_iter());
        assert_eq!((m, s), (2.0, 0.0));
        let (m, s) = mean_std([1.0, 3.0].into_iter());
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn exact_initial_state_keeps_prior_covariance() {
        let sim = SimConfig { duration: 0.5, ..SimConfig::default() };
        let output = generate(&sim).unwrap();
        let init = FilterConfig::default().init;
        let state = initial_state(&output, &init, false, 3);
        assert_eq!(state.imu.p, output.frame_truth[0].p);
        assert_eq!(state.cov, init.covariance());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["circle.toml", "stationary_zero_noise.toml"] {
            let config: SimRunConfig = load_toml(dir.join(name)).unwrap();
            config.sim.validate().unwrap();
        }
        let euroc: EurocRunConfig = load_toml(dir.join("euroc.toml")).unwrap();
        assert_eq!(euroc.tracks.landmark_count, 1500);
        let bench: crate::bench::BenchConfig = load_toml(dir.join("bench.toml")).unwrap();
        assert_eq!(bench.repetitions, 20);
    }
}

