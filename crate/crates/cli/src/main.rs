//! `magflow` — fixtures, experiments, reports.
//!
//! Every subcommand loads a JSON fixture config, runs deterministically for a
//! given `--seed`, prints a JSON report to stdout and optionally writes report
//! files under `--out`. Exit codes: 0 pass, 1 assertion or bound failure,
//! 2 configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use magflow_core::config::FixtureConfig;
use magflow_core::dynamics::{
    convergence_gap, integrate, PhaseState, RescaleConfig, SampleRegion,
};
use magflow_core::geometry::check_closed;
use magflow_core::orbit::orbit_census;
use magflow_core::predictions::BoundReport;
use magflow_core::symplectic::{
    stable_eigenvalue_sets, standard_j, williamson, QuadraticForm, SymplecticMatrix,
};
use magflow_core::Error;

#[derive(Parser)]
#[command(name = "magflow", version, about = "Periodic orbits of low-energy magnetic flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normal-form suite: fixture fibres plus a random-instance oracle cross-check.
    Williamson(CommonArgs),
    /// Eigenvalue field, resonance partition and orbit-count bounds.
    Grc(CommonArgs),
    /// Rescaled-field convergence sweep against the limiting fibrewise field.
    Converge(CommonArgs),
    /// Seed, solve, deduplicate and count periodic orbits on an energy sweep.
    Census(CommonArgs),
    /// Integrate one trajectory and export it as CSV.
    Simulate(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Fixture config path (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for reports and data files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for grid sweeps and orbit solves.
    #[arg(long)]
    jobs: Option<usize>,
    /// RNG seed for sampled checks.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

type CommandFn = fn(&FixtureConfig, &CommonArgs) -> anyhow::Result<bool>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (&CommonArgs, CommandFn) =
        match &cli.command {
            Command::Williamson(a) => (a, cmd_williamson),
            Command::Grc(a) => (a, cmd_grc),
            Command::Converge(a) => (a, cmd_converge),
            Command::Census(a) => (a, cmd_census),
            Command::Simulate(a) => (a, cmd_simulate),
        };

    if let Some(jobs) = args.jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }

    let config = match FixtureConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(out) = &args.out {
        if let Err(e) = std::fs::create_dir_all(out) {
            eprintln!("config error: cannot create out dir: {e}");
            return ExitCode::from(2);
        }
    }

    match run(&config, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            // config-shaped problems surface as exit 2, numeric failures as 1
            let code = match e.downcast_ref::<Error>() {
                Some(Error::InvalidConfig(_)) | Some(Error::Io(_)) | Some(Error::Json(_)) => 2,
                _ => 1,
            };
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}

fn emit(report: &impl Serialize, out: Option<&Path>, file: &str) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    println!("{text}");
    if let Some(dir) = out {
        std::fs::write(dir.join(file), text)?;
    }
    Ok(())
}

/// Largest entry of `|T' Omega T - J|` and `|T' A T - diag(a; a)|`, relative to
/// the input scales, plus the worst oracle eigenvalue error.
fn normal_form_residuals(
    omega: &SymplecticMatrix,
    form: &QuadraticForm,
) -> anyhow::Result<(f64, f64, f64, bool)> {
    let res = williamson(omega, form)?;
    let p = res.p();
    let t = &res.basis;
    let j_res = (t.transpose() * omega.matrix() * t - standard_j(p)).amax()
        / omega.matrix().amax();
    let mut d = DMatrix::zeros(2 * p, 2 * p);
    for i in 0..p {
        d[(i, i)] = res.eigenvalues[i];
        d[(p + i, p + i)] = res.eigenvalues[i];
    }
    let d_res = (t.transpose() * form.matrix() * t - d).amax() / form.matrix().amax();

    let k = omega
        .matrix()
        .clone()
        .lu()
        .solve(form.matrix())
        .ok_or_else(|| anyhow::anyhow!("singular symplectic form"))?;
    let ev = k.complex_eigenvalues();
    let mut oracle: Vec<f64> = ev.iter().filter(|c| c.im > 0.0).map(|c| c.im).collect();
    oracle.sort_by(|a, b| a.total_cmp(b));
    let eig_err = res
        .eigenvalues
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs() / b)
        .fold(0.0f64, f64::max);
    Ok((j_res, d_res, eig_err, !res.clusters.is_empty()))
}

fn cmd_williamson(config: &FixtureConfig, args: &CommonArgs) -> anyhow::Result<bool> {
    let space = config.build_space()?;
    let grid = space.base.chart.grid(&config.grid)?;

    // fixture fibres
    let mut fibre_worst = (0.0f64, 0.0f64, 0.0f64);
    let mut minus_omega_worst = 0.0f64;
    for q in &grid {
        let pair = space.fibre_data(q)?;
        let (j, d, e, _) = normal_form_residuals(&pair.omega_f, &pair.hessian)?;
        fibre_worst = (fibre_worst.0.max(j), fibre_worst.1.max(d), fibre_worst.2.max(e));
        let omega_q = space.magnetic.evaluate(q);
        minus_omega_worst =
            minus_omega_worst.max((pair.omega_f.matrix() + omega_q).amax());
    }

    // random suite: 100 instances per dimension, standard J against random SPD
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut suite = Vec::new();
    let mut pass = true;
    let mut first_failure = None;
    for dim in [2usize, 4, 6, 8] {
        let p = dim / 2;
        let omega = SymplecticMatrix::standard(p);
        let mut worst = (0.0f64, 0.0f64, 0.0f64);
        for idx in 0..100 {
            let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
            let a = &m * m.transpose() + DMatrix::identity(dim, dim) * 0.1 * dim as f64;
            let form = QuadraticForm::new(a)?;
            let (j, d, e, _) = normal_form_residuals(&omega, &form)?;
            worst = (worst.0.max(j), worst.1.max(d), worst.2.max(e));
            if (j > 1e-10 || d > 1e-10 || e > 1e-10) && first_failure.is_none() {
                first_failure = Some(json!({ "dim": dim, "index": idx, "j": j, "d": d, "eig": e }));
                pass = false;
            }
        }
        suite.push(json!({
            "dim": dim,
            "instances": 100,
            "max_j_residual": worst.0,
            "max_d_residual": worst.1,
            "max_oracle_rel_err": worst.2,
        }));
    }

    // clustered instance succeeds and carries the flag
    let omega2 = SymplecticMatrix::standard(2);
    let form2 = QuadraticForm::new(DMatrix::identity(4, 4) * 0.5)?;
    let clustered = williamson(&omega2, &form2)?;
    let cluster_flagged = !clustered.clusters.is_empty();

    pass = pass
        && fibre_worst.0 <= 1e-10
        && fibre_worst.1 <= 1e-10
        && fibre_worst.2 <= 1e-10
        && minus_omega_worst <= 1e-10
        && cluster_flagged;

    let report = json!({
        "fixture": config.name,
        "grid_points": grid.len(),
        "fibre": {
            "max_j_residual": fibre_worst.0,
            "max_d_residual": fibre_worst.1,
            "max_oracle_rel_err": fibre_worst.2,
            "max_minus_omega_residual": minus_omega_worst,
        },
        "random_suite": suite,
        "clustered_instance_flagged": cluster_flagged,
        "first_failure": first_failure,
        "pass": pass,
    });
    emit(&report, args.out.as_deref(), "williamson.json")?;
    Ok(pass)
}

fn cmd_grc(config: &FixtureConfig, args: &CommonArgs) -> anyhow::Result<bool> {
    let space = config.build_space()?;
    let grid = space.base.chart.grid(&config.grid)?;
    let closed_residual = check_closed(&space.magnetic, &grid, 1e-3);
    let closed_ok = closed_residual <= space.magnetic.closed_tol;

    let field = space.eigenvalue_field_with(
        &grid,
        config.resonance.max_multiple,
        config.resonance.rel_tol,
    )?;
    let stable = stable_eigenvalue_sets(&field.partition, &field.samples);
    let bounds = BoundReport::magnetic(
        &field.partition,
        &stable,
        space.base.cuplength,
        space.base.crit_lower_bound,
        (space.dim_base() / 2) as u32,
    )?;

    let pass = closed_ok;
    let report = json!({
        "fixture": config.name,
        "closedness_residual": closed_residual,
        "closed": closed_ok,
        "spectrum_field": field,
        "stable_sets": stable,
        "bound_report": bounds,
        "pass": pass,
    });
    emit(&report, args.out.as_deref(), "grc.json")?;
    Ok(pass)
}

fn cmd_converge(config: &FixtureConfig, args: &CommonArgs) -> anyhow::Result<bool> {
    let space = config.build_space()?;
    let section = config
        .converge
        .clone()
        .ok_or_else(|| Error::InvalidConfig("fixture has no converge section".into()))?;
    let region = SampleRegion { seed: args.seed };

    let mut rows = Vec::new();
    let mut prev: Option<f64> = None;
    let mut monotone = true;
    let mut ratios_ok = true;
    for &eps in &section.epsilons {
        let cfg = RescaleConfig::with_epsilon_max(eps, 1.0)?;
        let gap = convergence_gap(&space, &cfg, &region, section.n_samples)?;
        let ratio = prev.map(|p| gap / p);
        if let Some(r) = ratio {
            monotone &= gap < prev.unwrap();
            ratios_ok &= r <= section.max_ratio;
        }
        rows.push(json!({ "epsilon": eps, "gap": gap, "ratio": ratio }));
        prev = Some(gap);
    }
    // sanity row: no rescaling, the gap is an O(1) mismatch
    let eps1 = RescaleConfig::with_epsilon_max(1.0, 1.0)?;
    let sanity = convergence_gap(&space, &eps1, &region, section.n_samples)?;

    let pass = monotone && ratios_ok && sanity > 0.0;
    let report = json!({
        "fixture": config.name,
        "n_samples": section.n_samples,
        "max_ratio": section.max_ratio,
        "rows": rows,
        "sanity_eps1_gap": sanity,
        "monotone": monotone,
        "ratios_ok": ratios_ok,
        "pass": pass,
    });
    emit(&report, args.out.as_deref(), "converge.json")?;

    if let Some(dir) = &args.out {
        // gnuplot-ready two-column data
        let mut data = String::from("# epsilon gap\n");
        for (eps, row) in section.epsilons.iter().zip(report["rows"].as_array().unwrap()) {
            data.push_str(&format!("{eps} {}\n", row["gap"]));
        }
        std::fs::write(dir.join("converge.dat"), data)?;
    }
    Ok(pass)
}

fn cmd_census(config: &FixtureConfig, args: &CommonArgs) -> anyhow::Result<bool> {
    let space = config.build_space()?;
    let section = config
        .census
        .clone()
        .ok_or_else(|| Error::InvalidConfig("fixture has no census section".into()))?;
    let grid = space.base.chart.grid(&config.grid)?;
    let field = space.eigenvalue_field_with(
        &grid,
        config.resonance.max_multiple,
        config.resonance.rel_tol,
    )?;
    let census = orbit_census(&space, &field, &section.epsilons, &section.census_config())?;

    // headline criterion: at the smallest epsilon with >= 90% convergence the
    // distinct count must reach the bound
    let pass = match census.smallest_converged_epsilon {
        Some(eps) => census
            .rows
            .iter()
            .find(|r| r.epsilon == eps)
            .map(|r| r.pass)
            .unwrap_or(false),
        None => false,
    };

    emit(&census, args.out.as_deref(), "census.json")?;
    if let Some(dir) = &args.out {
        for (eps, orbits) in &census.orbits {
            for (k, orbit) in orbits.iter().enumerate() {
                let state = PhaseState::new(
                    orbit.representative.q.clone(),
                    orbit.representative.p.clone(),
                );
                let traj = integrate(
                    &space,
                    &state,
                    orbit.period,
                    &magflow_core::dynamics::IntegratorConfig {
                        step: section.shooting.step,
                        sample_stride: 5,
                        drift_bound: 1e-6,
                    },
                )?;
                let name = format!("orbit_eps{eps}_{k}.csv");
                std::fs::write(dir.join(name), traj.to_csv())?;
            }
        }
    }
    Ok(pass)
}

fn cmd_simulate(config: &FixtureConfig, args: &CommonArgs) -> anyhow::Result<bool> {
    let space = config.build_space()?;
    let section = config
        .simulate
        .clone()
        .ok_or_else(|| Error::InvalidConfig("fixture has no simulate section".into()))?;
    let state = PhaseState::new(section.q.clone(), section.p.clone());
    let traj = integrate(&space, &state, section.t_final, &section.integrator())?;

    let params = json!({
        "fixture": config.name,
        "q0": section.q,
        "p0": section.p,
        "t_final": section.t_final,
        "step": section.step,
        "method": traj.method,
    });
    let pass = !traj.drift_flagged && traj.fault.is_none();
    let report = json!({
        "params": params,
        "samples": traj.states.len(),
        "energy_drift": traj.drift,
        "drift_flagged": traj.drift_flagged,
        "fault": traj.fault,
        "final_state": traj.states.last(),
        "pass": pass,
    });
    emit(&report, args.out.as_deref(), "simulate.json")?;

    if let Some(dir) = &args.out {
        // CSV with the run parameters echoed in a JSON header line
        let mut text = format!("# {}\n", serde_json::to_string(&params)?);
        text.push_str(&traj.to_csv());
        std::fs::write(dir.join("trajectory.csv"), text)?;
    }
    Ok(pass)
}
