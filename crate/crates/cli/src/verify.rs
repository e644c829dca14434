//! `verify` command: the equivalence battery on random window instances.

use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;

use anyhow::Result;
use rayon::prelude::*;

use schurvins::measurement::stack;
use schurvins::oracles::{compare_update_paths, PathComparison};
use schurvins::schur_update::DEFAULT_C3_EPS;
use schurvins::simulator::battery_instance;

/// Largest accepted relative deviation between the update paths.
pub const TOLERANCE: f64 = 1e-8;

fn trial(seed: u64) -> schurvins::Result<PathComparison> {
    let inst = battery_instance(seed)?;
    let model = stack(&inst.state, inst.landmarks.values(), &inst.cameras, inst.u).model;
    compare_update_paths(&model, &inst.state.cov, DEFAULT_C3_EPS)
}

pub fn cmd_verify(trials: u64, seed: u64, out: Option<&Path>) -> Result<ExitCode> {
    let results: Vec<(u64, schurvins::Result<PathComparison>)> =
        (seed..seed + trials).into_par_iter().map(|s| (s, trial(s))).collect();

    let mut csv = String::from("seed,landmarks,dropped,dx_dense,cov_dense,dx_nullspace,cov_nullspace\n");
    let mut worst = PathComparison::default();
    let mut worst_seed = seed;
    let mut dropped = 0;
    let mut violations = Vec::new();
    for (s, result) in &results {
        match result {
            Ok(c) => {
                writeln!(
                    csv,
                    "{s},{},{},{:.3e},{:.3e},{:.3e},{:.3e}",
                    c.landmarks, c.dropped, c.dx_dense, c.cov_dense, c.dx_nullspace, c.cov_nullspace
                )?;
                dropped += c.dropped;
                worst.dx_dense = worst.dx_dense.max(c.dx_dense);
                worst.cov_dense = worst.cov_dense.max(c.cov_dense);
                worst.dx_nullspace = worst.dx_nullspace.max(c.dx_nullspace);
                worst.cov_nullspace = worst.cov_nullspace.max(c.cov_nullspace);
                if c.max() >= worst.max() {
                    worst_seed = *s;
                }
                if !(c.max() < TOLERANCE) {
                    violations.push(format!("seed {s}: max relative deviation {:.3e}", c.max()));
                }
            }
            Err(e) => violations.push(format!("seed {s}: {e}")),
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("verify.csv"), csv)?;
    }

    println!("trials: {trials} (seeds {seed}..{})", seed + trials);
    println!("singular landmark blocks dropped: {dropped}");
    println!("max rel dev  dx  schur vs dense      {:.3e}", worst.dx_dense);
    println!("max rel dev  P   schur vs dense      {:.3e}", worst.cov_dense);
    println!("max rel dev  dx  schur vs nullspace  {:.3e}", worst.dx_nullspace);
    println!("max rel dev  P   schur vs nullspace  {:.3e}", worst.cov_nullspace);
    println!("worst seed: {worst_seed}");
    if violations.is_empty() {
        println!("PASS (tolerance {TOLERANCE:e})");
        Ok(ExitCode::SUCCESS)
    } else {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        println!("FAIL (tolerance {TOLERANCE:e})");
        Ok(ExitCode::FAILURE)
    }
}
