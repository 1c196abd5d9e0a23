//! Subcommand implementations: each writes its artifacts into the output
//! directory and returns the process exit semantics through `CliError`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use rossviab_core::estimation::{
    fit_multistart, incidence_to_prevalence, simulate_prevalence, synthetic_incidence, FitProblem, FitReport,
    IncidenceSeries,
};
use rossviab_core::strategy::SCENARIO_RNG;
use rossviab_core::*;
use std::result::Result;

use crate::config::RunConfig;
use crate::lock::DirLock;
use crate::svg::{plot, Series};
use crate::CliError;

pub struct Ctx {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub mode: Mode,
}

impl Ctx {
    fn prepare(&self, subdir: &str) -> Result<(PathBuf, DirLock), CliError> {
        let dir = self.out_dir.join(subdir);
        fs::create_dir_all(&dir).map_err(|e| CliError::Compute(format!("cannot create {}: {e}", dir.display())))?;
        let lock = DirLock::acquire(&dir)?;
        Ok((dir, lock))
    }
}

#[derive(Serialize)]
struct KernelMetadata<'a> {
    command: &'a str,
    set: &'a str,
    spec: &'a SweepSpec,
    kernel_size: usize,
    seed: u64,
    rng: &'static str,
    wall_time_seconds: f64,
    config: &'a RunConfig,
}

fn solve_set(ctx: &Ctx, set: &str) -> Result<(DpSolution, Kernel), CliError> {
    let config = &ctx.config;
    let sg = config.state_grid().map_err(config_err)?;
    let cg = config.control_grid().map_err(config_err)?;
    let us = config.uncertainty_set(set).map_err(config_err)?;
    let hz = config.horizon().map_err(config_err)?;
    if ctx.mode == Mode::Corners {
        corners_preflight(&us, &cg, config.model.gamma).map_err(|e| CliError::Assertion(e.to_string()))?;
    }
    let sol = backward_sweep(&sg, &cg, &us, hz, ctx.mode, config.model.gamma, config.model.substeps)
        .map_err(compute_err)?;
    let kernel = extract_kernel(&sol);
    Ok((sol, kernel))
}

fn config_err(e: rossviab_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn compute_err(e: rossviab_core::Error) -> CliError {
    CliError::Compute(e.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Compute(format!("{}: {e}", path.display())))?;
    writeln!(w).map_err(io_err(path))?;
    Ok(())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Compute(format!("{}: {e}", path.display()))
}

fn boundary_series(kernel: &Kernel) -> Vec<(f64, f64)> {
    kernel_boundary(kernel).unwrap_or_default()
}

pub fn cmd_kernel(ctx: &Ctx, set: &str) -> Result<(), CliError> {
    let started = Instant::now();
    let (dir, _lock) = ctx.prepare(set)?;
    let (sol, kernel) = solve_set(ctx, set)?;

    let path = dir.join("kernel.csv");
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    kernel.write_csv(&mut w).map_err(compute_err)?;

    let boundary = boundary_series(&kernel);
    let path = dir.join("boundary.csv");
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    rossviab_core::robust_dp::write_boundary_csv(&boundary, &mut w).map_err(compute_err)?;

    write_policy_csv(&dir.join("policy.csv"), &sol)?;

    let svg = plot(
        &format!("viability kernel boundary ({set})"),
        "M (infected mosquito proportion)",
        "H (infected human proportion)",
        (0.0, 1.0),
        (0.0, sol.spec.state_grid.h_cap),
        &[Series { name: set, points: boundary, markers: false }],
    );
    fs::write(dir.join("boundary.svg"), svg).map_err(io_err(&dir))?;

    write_json(
        &dir.join("metadata.json"),
        &KernelMetadata {
            command: "kernel",
            set,
            spec: &sol.spec,
            kernel_size: kernel.len(),
            seed: ctx.seed,
            rng: SCENARIO_RNG,
            wall_time_seconds: started.elapsed().as_secs_f64(),
            config: &ctx.config,
        },
    )?;
    println!(
        "kernel[{set}]: {} of {} nodes viable -> {}",
        kernel.len(),
        sol.spec.state_grid.len(),
        dir.display()
    );
    Ok(())
}

fn write_policy_csv(path: &Path, sol: &DpSolution) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(w, "t,i,j,u").map_err(io_err(path))?;
    let sg = sol.spec.state_grid;
    for (k, day) in sol.policies.iter().enumerate() {
        let t = sol.spec.horizon.t0 + k as u32;
        for j in 0..sg.n_h {
            for i in 0..sg.n_m {
                if let Some(ci) = day[sg.index(i, j)] {
                    writeln!(w, "{t},{i},{j},{:.16e}", sol.control_levels[ci as usize]).map_err(io_err(path))?;
                }
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ComparePair {
    inner: String,
    outer: String,
    relation: SetRelation,
    symmetric_difference: usize,
    inclusion_held: bool,
}

#[derive(Serialize)]
struct CompareReport<'a> {
    command: &'a str,
    sets: Vec<String>,
    kernel_sizes: Vec<usize>,
    pairs: Vec<ComparePair>,
    inclusion_violated: bool,
    seed: u64,
    wall_time_seconds: f64,
    config: &'a RunConfig,
}

pub fn cmd_compare(ctx: &Ctx, sets: &[String]) -> Result<(), CliError> {
    let started = Instant::now();
    if sets.len() < 2 {
        return Err(CliError::Config("compare needs at least 2 set names".to_string()));
    }
    let (dir, _lock) = ctx.prepare("compare")?;

    let mut kernels = Vec::new();
    for set in sets {
        let (_, kernel) = solve_set(ctx, set)?;
        kernels.push((set.clone(), kernel));
    }

    // every ordered pair whose rectangles are nested: the larger rectangle
    // must never yield the larger kernel
    let mut pairs = Vec::new();
    let mut violated = false;
    for a in 0..kernels.len() {
        for b in 0..kernels.len() {
            if a == b {
                continue;
            }
            let (name_a, k_a) = &kernels[a];
            let (name_b, k_b) = &kernels[b];
            if !k_a.spec.uncertainty.contains_set(&k_b.spec.uncertainty) {
                continue;
            }
            // set a contains set b, so kernel(a) must sit inside kernel(b)
            let (relation, diff) = compare_kernels(k_a, k_b).map_err(compute_err)?;
            let held = matches!(relation, SetRelation::Subset | SetRelation::Equal);
            violated |= !held;
            pairs.push(ComparePair {
                inner: name_a.clone(),
                outer: name_b.clone(),
                relation,
                symmetric_difference: diff,
                inclusion_held: held,
            });
        }
    }

    let series: Vec<Series> = kernels
        .iter()
        .map(|(name, k)| Series { name, points: boundary_series(k), markers: false })
        .collect();
    let h_cap = kernels[0].1.spec.state_grid.h_cap;
    let svg = plot(
        "viability kernel boundaries",
        "M (infected mosquito proportion)",
        "H (infected human proportion)",
        (0.0, 1.0),
        (0.0, h_cap),
        &series,
    );
    fs::write(dir.join("overlay.svg"), svg).map_err(io_err(&dir))?;

    let report = CompareReport {
        command: "compare",
        sets: sets.to_vec(),
        kernel_sizes: kernels.iter().map(|(_, k)| k.len()).collect(),
        pairs,
        inclusion_violated: violated,
        seed: ctx.seed,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        config: &ctx.config,
    };
    write_json(&dir.join("inclusion_report.json"), &report)?;
    for (name, k) in &kernels {
        let path = dir.join(format!("kernel_{name}.csv"));
        let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        k.write_csv(&mut w).map_err(compute_err)?;
    }
    println!(
        "compare[{}]: kernel sizes {:?} -> {}",
        sets.join(","),
        report.kernel_sizes,
        dir.display()
    );
    if violated {
        return Err(CliError::Assertion(
            "kernel inclusion violated for nested uncertainty sets (see inclusion_report.json); this signals a solver bug"
                .to_string(),
        ));
    }
    Ok(())
}

pub fn cmd_fit(ctx: &Ctx, incidence_csv: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let (dir, _lock) = ctx.prepare("fit")?;
    let est = &ctx.config.estimation;

    let file = File::open(incidence_csv)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", incidence_csv.display())))?;
    let incidence = IncidenceSeries::from_csv(BufReader::new(file), est.population).map_err(config_err)?;
    let data = incidence_to_prevalence(&incidence, est.infectious_days).map_err(compute_err)?;

    let problem = FitProblem {
        theta0: est.theta0,
        bounds: est.bounds,
        data: data.clone(),
        m0_ratio: est.m0_ratio,
        gamma: ctx.config.model.gamma,
        substeps: ctx.config.model.substeps,
        tolerances: est.tolerances,
    };
    let (result, starts) = fit_multistart(&problem, est.multistart, ctx.seed).map_err(compute_err)?;

    let report = FitReport {
        theta_hat: result.theta_hat,
        aggregates: result.aggregates,
        objective: result.objective,
        iterations: result.iterations,
        converged: result.converged,
        multistart: est.multistart,
        seed: ctx.seed,
        start_points: starts,
        prevalence_conversion: format!("sliding-window sum over {} days", est.infectious_days),
    };
    write_json(&dir.join("fit_report.json"), &report)?;

    let fitted = simulate_prevalence(
        &result.theta_hat,
        ctx.config.model.gamma,
        data.values[0],
        est.m0_ratio,
        (data.len() - 1) as u32,
        ctx.config.model.substeps,
    )
    .map_err(compute_err)?;
    let observations: Vec<(f64, f64)> = data
        .values
        .iter()
        .enumerate()
        .map(|(r, &v)| ((data.start_day as usize + r) as f64, v))
        .collect();
    let curve: Vec<(f64, f64)> = fitted
        .values
        .iter()
        .enumerate()
        .map(|(r, &v)| ((data.start_day as usize + r) as f64, v))
        .collect();
    let y_max = observations
        .iter()
        .chain(&curve)
        .map(|&(_, y)| y)
        .fold(0.0f64, f64::max);
    let svg = plot(
        "fitted prevalence vs observations",
        "day",
        "infected human fraction",
        (observations[0].0, observations.last().unwrap().0),
        (0.0, y_max),
        &[
            Series { name: "observed", points: observations, markers: true },
            Series { name: "fitted", points: curve, markers: false },
        ],
    );
    fs::write(dir.join("fit.svg"), svg).map_err(io_err(&dir))?;
    println!(
        "fit: objective {:.3e}, aggregates ({:.6}, {:.6}) in {} iterations ({:.1}s) -> {}",
        report.objective,
        report.aggregates.a_m,
        report.aggregates.a_h,
        report.iterations,
        started.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    command: &'a str,
    set: &'a str,
    x0: (f64, f64),
    #[serde(flatten)]
    summary: McSummary,
    trajectories_written: usize,
}

pub fn cmd_simulate(
    ctx: &Ctx,
    set: &str,
    x0: (f64, f64),
    n_scenarios: usize,
    scenario_mode: ScenarioMode,
    max_trajectory_files: usize,
) -> Result<(), CliError> {
    let kernel_dir = ctx.out_dir.join(set);
    let meta_path = kernel_dir.join("metadata.json");
    let policy_path = kernel_dir.join("policy.csv");
    if !meta_path.exists() || !policy_path.exists() {
        return Err(CliError::Compute(format!(
            "missing policy artifacts for set '{set}' (run `rossviab kernel {set}` into {} first)",
            ctx.out_dir.display()
        )));
    }
    let meta: serde_json::Value = serde_json::from_reader(
        BufReader::new(File::open(&meta_path).map_err(io_err(&meta_path))?),
    )
    .map_err(|e| CliError::Compute(format!("{}: {e}", meta_path.display())))?;
    let spec: SweepSpec = serde_json::from_value(meta["spec"].clone())
        .map_err(|e| CliError::Compute(format!("{}: bad spec: {e}", meta_path.display())))?;

    let strat = load_policy(&policy_path, &spec)?;
    let x0_state = State::new(x0.0, x0.1).map_err(config_err)?;

    let (dir, _lock) = ctx.prepare(&format!("simulate_{set}"))?;
    let mut summary = McSummary::new(ctx.seed, scenario_mode);
    summary.n_start_states = 1;
    let mut written = 0usize;
    for s in 0..n_scenarios {
        let scn = random_scenario(&spec.uncertainty, spec.horizon.steps(), ctx.seed.wrapping_add(s as u64), scenario_mode);
        let traj = simulate_closed_loop(x0_state, &strat, &scn, spec.gamma, spec.substeps).map_err(compute_err)?;
        summary.record(violation_report(&traj, spec.state_grid.h_cap));
        if written < max_trajectory_files {
            let path = dir.join(format!("trajectory_{s:04}.csv"));
            let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
            traj.write_csv(&scn, &mut w).map_err(compute_err)?;
            written += 1;
        }
    }
    let report = SimulateReport {
        command: "simulate",
        set,
        x0,
        summary,
        trajectories_written: written,
    };
    write_json(&dir.join("violation_summary.json"), &report)?;
    println!(
        "simulate[{set}] from ({}, {}): {}/{} scenarios violated -> {}",
        x0.0,
        x0.1,
        report.summary.violations,
        n_scenarios,
        dir.display()
    );
    Ok(())
}

fn load_policy(path: &Path, spec: &SweepSpec) -> Result<FeedbackStrategy, CliError> {
    let sg = spec.state_grid;
    let n_days = spec.horizon.steps();
    let mut per_day = vec![vec![spec.control_grid.u_hi; sg.len()]; n_days];
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |msg: &str| CliError::Compute(format!("{} line {}: {msg}", path.display(), idx + 1));
        if fields.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let t: u32 = fields[0].parse().map_err(|_| bad("bad t"))?;
        let i: usize = fields[1].parse().map_err(|_| bad("bad i"))?;
        let j: usize = fields[2].parse().map_err(|_| bad("bad j"))?;
        let u: f64 = fields[3].parse().map_err(|_| bad("bad u"))?;
        let k = t
            .checked_sub(spec.horizon.t0)
            .map(|k| k as usize)
            .filter(|&k| k < n_days)
            .ok_or_else(|| bad("t outside horizon"))?;
        if i >= sg.n_m || j >= sg.n_h {
            return Err(bad("node outside grid"));
        }
        per_day[k][sg.index(i, j)] = u;
    }
    FeedbackStrategy::from_table(sg, spec.horizon.t0, spec.control_grid.u_lo, spec.control_grid.u_hi, per_day)
        .map_err(compute_err)
}

#[derive(Serialize)]
struct SyntheticMeta<'a> {
    theta: rossviab_core::estimation::Theta,
    gamma: f64,
    h0: f64,
    m0_ratio: f64,
    days: u32,
    population: f64,
    infectious_days: u32,
    aggregates: AggregateRates,
    config: &'a RunConfig,
}

pub fn cmd_generate_synthetic(ctx: &Ctx, output: Option<&Path>) -> Result<(), CliError> {
    let est = &ctx.config.estimation;
    let syn = &est.synthetic;
    let inc = synthetic_incidence(
        &syn.theta,
        ctx.config.model.gamma,
        syn.h0,
        est.m0_ratio,
        syn.days,
        ctx.config.model.substeps,
        est.population,
        est.infectious_days,
    )
    .map_err(compute_err)?;

    let default_path;
    let path = match output {
        Some(p) => p,
        None => {
            fs::create_dir_all(&ctx.out_dir).map_err(io_err(&ctx.out_dir))?;
            default_path = ctx.out_dir.join("synthetic_incidence.csv");
            &default_path
        }
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(w, "day,new_cases").map_err(io_err(path))?;
    for (r, c) in inc.new_cases.iter().enumerate() {
        writeln!(w, "{},{c}", inc.start_day as usize + r).map_err(io_err(path))?;
    }
    drop(w);

    let meta = SyntheticMeta {
        theta: syn.theta,
        gamma: ctx.config.model.gamma,
        h0: syn.h0,
        m0_ratio: est.m0_ratio,
        days: syn.days,
        population: est.population,
        infectious_days: est.infectious_days,
        aggregates: AggregateRates {
            a_m: syn.theta.alpha * syn.theta.p_m,
            a_h: syn.theta.alpha * syn.theta.p_h * syn.theta.xi,
        },
        config: &ctx.config,
    };
    write_json(&path.with_extension("meta.json"), &meta)?;
    println!("generate-synthetic: {} days -> {}", inc.new_cases.len(), path.display());
    Ok(())
}
