//! Feedback strategies built from the DP policy stack and closed-loop
//! simulation under uncertainty scenarios.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dynamics::{flow_map_phi, AggregateRates, Control, State};
use crate::error::{Error, Result};
use crate::grid::{StateGrid, UncertaintySet};
use crate::robust_dp::DpSolution;

/// Name of the scenario PRNG, recorded in Monte Carlo outputs.
pub const SCENARIO_RNG: &str = "chacha8";

/// Per-day state-feedback control maps defined on grid nodes.
///
/// Off-grid states evaluate at the nearest node, ties toward lower (M, H).
/// Nodes without a recorded policy (outside the viable set) fall back to
/// maximum effort, which keeps every emitted control admissible.
#[derive(Debug, Clone)]
pub struct FeedbackStrategy {
    grid: StateGrid,
    t0: u32,
    u_lo: f64,
    u_hi: f64,
    /// per_day[k][node] is the control applied on day t0+k, already resolved
    /// to a concrete level.
    per_day: Vec<Vec<f64>>,
}

impl FeedbackStrategy {
    pub fn from_solution(sol: &DpSolution) -> Self {
        let cg = sol.spec.control_grid;
        let per_day = sol
            .policies
            .iter()
            .map(|day| {
                day.iter()
                    .map(|p| p.map_or(cg.u_hi, |ci| sol.control_levels[ci as usize]))
                    .collect()
            })
            .collect();
        FeedbackStrategy {
            grid: sol.spec.state_grid,
            t0: sol.spec.horizon.t0,
            u_lo: cg.u_lo,
            u_hi: cg.u_hi,
            per_day,
        }
    }

    /// A strategy applying the same control on every day and state.
    pub fn constant(u: f64, grid: StateGrid, t0: u32, n_days: usize) -> Result<Self> {
        Control::new(u)?;
        Ok(FeedbackStrategy {
            grid,
            t0,
            u_lo: u,
            u_hi: u,
            per_day: vec![vec![u; grid.len()]; n_days],
        })
    }

    /// Rebuild a strategy from persisted per-day control tables (one value
    /// per grid node, flat index j-slow). Every entry must be admissible.
    pub fn from_table(grid: StateGrid, t0: u32, u_lo: f64, u_hi: f64, per_day: Vec<Vec<f64>>) -> Result<Self> {
        if !(0.0..=1.0).contains(&u_lo) || u_lo > u_hi || u_hi > 1.0 {
            return Err(Error::domain(format!("control bounds [{u_lo}, {u_hi}] invalid")));
        }
        for (k, day) in per_day.iter().enumerate() {
            if day.len() != grid.len() {
                return Err(Error::domain(format!(
                    "day {k}: {} controls for a grid of {} nodes",
                    day.len(),
                    grid.len()
                )));
            }
            if let Some(u) = day.iter().find(|u| !(u_lo..=u_hi).contains(*u)) {
                return Err(Error::domain(format!("day {k}: control {u} outside [{u_lo}, {u_hi}]")));
            }
        }
        Ok(FeedbackStrategy { grid, t0, u_lo, u_hi, per_day })
    }

    pub fn t0(&self) -> u32 {
        self.t0
    }

    pub fn n_days(&self) -> usize {
        self.per_day.len()
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.u_lo, self.u_hi)
    }

    /// Control for day `t` at the given state.
    pub fn control_at(&self, t: u32, state: &State) -> Result<f64> {
        let k = t
            .checked_sub(self.t0)
            .map(|k| k as usize)
            .filter(|&k| k < self.per_day.len())
            .ok_or_else(|| Error::Scenario(format!("day {t} outside strategy window")))?;
        let i = nearest_index(state.m, 1.0, self.grid.n_m);
        let j = nearest_index(state.h, self.grid.h_cap, self.grid.n_h);
        Ok(self.per_day[k][self.grid.index(i, j)])
    }
}

/// Nearest node index along one axis; exact midpoints round down.
fn nearest_index(x: f64, scale: f64, n: usize) -> usize {
    let f = (x.clamp(0.0, scale) / scale) * (n - 1) as f64;
    let lo = f.floor();
    let idx = if f - lo > 0.5 { lo + 1.0 } else { lo };
    (idx as usize).min(n - 1)
}

/// Day-indexed sequence of uncertainty pairs, all inside a declared set.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    rates: Vec<AggregateRates>,
}

impl Scenario {
    pub fn new(rates: Vec<AggregateRates>, us: &UncertaintySet) -> Result<Self> {
        for (k, r) in rates.iter().enumerate() {
            if !us.contains_point(r) {
                return Err(Error::Scenario(format!(
                    "day {k}: rates ({}, {}) outside the declared uncertainty set",
                    r.a_m, r.a_h
                )));
            }
        }
        Ok(Scenario { rates })
    }

    pub fn constant(r: AggregateRates, len: usize, us: &UncertaintySet) -> Result<Self> {
        Scenario::new(vec![r; len], us)
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn rates(&self) -> &[AggregateRates] {
        &self.rates
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioMode {
    /// Each day i.i.d. uniform on the rectangle.
    Uniform,
    /// Each day uniformly one of the 4 rectangle corners; the adversarial
    /// regime the rectangular scenario set permits.
    ExtremeSwitching,
}

impl std::str::FromStr for ScenarioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ScenarioMode::Uniform),
            "extreme-switching" => Ok(ScenarioMode::ExtremeSwitching),
            other => Err(Error::domain(format!(
                "unknown scenario mode '{other}' (expected uniform|extreme-switching)"
            ))),
        }
    }
}

/// Draw a scenario of the given length; deterministic for a fixed seed.
pub fn random_scenario(us: &UncertaintySet, len: usize, seed: u64, mode: ScenarioMode) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rates = (0..len)
        .map(|_| match mode {
            ScenarioMode::Uniform => AggregateRates {
                a_m: sample_interval(&mut rng, us.a_m_lo, us.a_m_hi),
                a_h: sample_interval(&mut rng, us.a_h_lo, us.a_h_hi),
            },
            ScenarioMode::ExtremeSwitching => AggregateRates {
                a_m: if rng.gen_bool(0.5) { us.a_m_hi } else { us.a_m_lo },
                a_h: if rng.gen_bool(0.5) { us.a_h_hi } else { us.a_h_lo },
            },
        })
        .collect();
    Scenario { rates }
}

fn sample_interval<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Closed-loop run: states (length n_days + 1) and applied controls.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t0: u32,
    pub states: Vec<State>,
    pub controls: Vec<f64>,
}

impl Trajectory {
    /// CSV rows `t,m,h,u,a_m,a_h`; the final row carries the terminal state
    /// with empty control and rate fields.
    pub fn write_csv<W: Write>(&self, scenario: &Scenario, w: &mut W) -> Result<()> {
        writeln!(w, "t,m,h,u,a_m,a_h")?;
        for (k, s) in self.states.iter().enumerate() {
            let t = self.t0 + k as u32;
            if k < self.controls.len() {
                let r = scenario.rates()[k];
                writeln!(w, "{t},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}", s.m, s.h, self.controls[k], r.a_m, r.a_h)?;
            } else {
                writeln!(w, "{t},{:.16e},{:.16e},,,", s.m, s.h)?;
            }
        }
        Ok(())
    }
}

/// Iterate the closed-loop dynamics from `x0` under a strategy and scenario.
pub fn simulate_closed_loop(
    x0: State,
    strat: &FeedbackStrategy,
    scenario: &Scenario,
    gamma: f64,
    substeps: u32,
) -> Result<Trajectory> {
    if scenario.len() != strat.n_days() {
        return Err(Error::Scenario(format!(
            "scenario length {} does not match the strategy horizon {}",
            scenario.len(),
            strat.n_days()
        )));
    }
    let mut states = Vec::with_capacity(scenario.len() + 1);
    let mut controls = Vec::with_capacity(scenario.len());
    states.push(x0);
    let mut x = x0;
    for (k, rates) in scenario.rates().iter().enumerate() {
        let t = strat.t0() + k as u32;
        let u = strat.control_at(t, &x)?;
        x = flow_map_phi(&x, Control::new(u)?, rates, gamma, substeps).map_err(|e| Error::Sweep {
            t: Some(t),
            i: 0,
            j: 0,
            u,
            a_m: rates.a_m,
            a_h: rates.a_h,
            source: Box::new(e),
        })?;
        controls.push(u);
        states.push(x);
    }
    Ok(Trajectory { t0: strat.t0(), states, controls })
}

/// First day with H(t) > h_cap, if any.
pub fn violation_report(traj: &Trajectory, h_cap: f64) -> Option<u32> {
    traj.states
        .iter()
        .position(|s| s.h > h_cap)
        .map(|k| traj.t0 + k as u32)
}

/// Aggregate of a Monte Carlo violation sweep.
#[derive(Debug, Clone, Serialize)]
pub struct McSummary {
    pub n_scenarios: usize,
    pub n_start_states: usize,
    pub violations: usize,
    /// first violation day -> count
    pub first_violation_histogram: BTreeMap<u32, usize>,
    pub seed: u64,
    pub rng: &'static str,
    pub scenario_mode: ScenarioMode,
}

impl McSummary {
    pub fn new(seed: u64, scenario_mode: ScenarioMode) -> Self {
        McSummary {
            n_scenarios: 0,
            n_start_states: 0,
            violations: 0,
            first_violation_histogram: BTreeMap::new(),
            seed,
            rng: SCENARIO_RNG,
            scenario_mode,
        }
    }

    pub fn record(&mut self, first_violation: Option<u32>) {
        self.n_scenarios += 1;
        if let Some(day) = first_violation {
            self.violations += 1;
            *self.first_violation_histogram.entry(day).or_insert(0) += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ControlGrid, Mode};
    use crate::robust_dp::{backward_sweep, extract_kernel, Horizon};

    const GAMMA: f64 = 0.1;

    fn solved_instance() -> (StateGrid, ControlGrid, UncertaintySet, DpSolution) {
        let sg = StateGrid::new(8, 8, 0.5).unwrap();
        let cg = ControlGrid::new(3, 0.2, 0.8).unwrap();
        let us = UncertaintySet::new(0.1, 0.6, 0.1, 0.7, 2, 2).unwrap();
        let sol = backward_sweep(&sg, &cg, &us, Horizon::new(0, 4).unwrap(), Mode::Full, GAMMA, 20).unwrap();
        (sg, cg, us, sol)
    }

    #[test]
    fn origin_stays_at_the_origin() {
        let (_, _, us, sol) = solved_instance();
        let strat = FeedbackStrategy::from_solution(&sol);
        let scn = random_scenario(&us, strat.n_days(), 7, ScenarioMode::Uniform);
        let traj = simulate_closed_loop(State::new(0.0, 0.0).unwrap(), &strat, &scn, GAMMA, 20).unwrap();
        assert!(traj.states.iter().all(|s| s.m == 0.0 && s.h == 0.0));
        assert_eq!(violation_report(&traj, 0.5), None);
    }

    #[test]
    fn kernel_starts_never_violate_under_lattice_scenarios() {
        let (sg, _, us, sol) = solved_instance();
        let strat = FeedbackStrategy::from_solution(&sol);
        let kernel = extract_kernel(&sol);
        let corners = us.corners();
        // exhaustive over corner-supported scenarios of length 4
        let n = corners.len();
        for &(i, j) in &kernel.members {
            let x0 = sg.node(i, j);
            for code in 0..n.pow(4) {
                let mut c = code;
                let mut days = Vec::with_capacity(4);
                for _ in 0..4 {
                    days.push(corners[c % n]);
                    c /= n;
                }
                let scn = Scenario::new(days, &us).unwrap();
                let traj = simulate_closed_loop(x0, &strat, &scn, GAMMA, 20).unwrap();
                assert_eq!(
                    violation_report(&traj, sg.h_cap),
                    None,
                    "violation from kernel node ({i},{j}) scenario {code}"
                );
            }
        }
    }

    #[test]
    fn uniform_monte_carlo_from_kernel_nodes_is_violation_free() {
        let (sg, _, us, sol) = solved_instance();
        let strat = FeedbackStrategy::from_solution(&sol);
        let kernel = extract_kernel(&sol);
        let mut summary = McSummary::new(42, ScenarioMode::Uniform);
        for s in 0..1000u64 {
            let scn = random_scenario(&us, strat.n_days(), 42 + s, ScenarioMode::Uniform);
            let &(i, j) = &kernel.members[(s as usize) % kernel.members.len()];
            let traj = simulate_closed_loop(sg.node(i, j), &strat, &scn, GAMMA, 20).unwrap();
            summary.record(violation_report(&traj, sg.h_cap));
        }
        assert_eq!(summary.violations, 0, "histogram: {:?}", summary.first_violation_histogram);
    }

    #[test]
    fn max_effort_fails_above_the_kernel_boundary() {
        let (sg, cg, us, sol) = solved_instance();
        let kernel = extract_kernel(&sol);
        let det = sol.spec.uncertainty.upper_corner();
        let strat = FeedbackStrategy::constant(cg.u_hi, sg, 0, 4).unwrap();
        let scn = Scenario::constant(det, 4, &us).unwrap();
        // walk each column upward to the first node whose max-effort run
        // violates the cap; it must sit strictly above the kernel top (the
        // grid rule is conservative, never optimistic)
        let mut bracketed = false;
        for i in 0..sg.n_m {
            let col_top = kernel.members.iter().filter(|&&(ki, _)| ki == i).map(|&(_, kj)| kj).max();
            let Some(top) = col_top else { continue };
            let inside = simulate_closed_loop(sg.node(i, top), &strat, &scn, GAMMA, 20).unwrap();
            assert_eq!(violation_report(&inside, sg.h_cap), None, "kernel node ({i},{top}) violated");
            let first_violating = (top + 1..sg.n_h).find(|&j| {
                let traj = simulate_closed_loop(sg.node(i, j), &strat, &scn, GAMMA, 20).unwrap();
                violation_report(&traj, sg.h_cap).is_some_and(|day| day <= 4)
            });
            if first_violating.is_some() {
                bracketed = true;
            }
        }
        assert!(bracketed, "no column exhibited the boundary bracketing");
    }

    #[test]
    fn scenarios_validate_against_their_set() {
        let us = UncertaintySet::new(0.0, 1.0, 0.0, 1.0, 2, 2).unwrap();
        let bad = Scenario::new(vec![AggregateRates { a_m: 2.0, a_h: 0.5 }], &us);
        assert!(matches!(bad, Err(Error::Scenario(_))));
    }

    #[test]
    fn singleton_set_always_yields_the_constant_scenario() {
        let us = UncertaintySet::singleton(0.3, 0.4).unwrap();
        for mode in [ScenarioMode::Uniform, ScenarioMode::ExtremeSwitching] {
            let scn = random_scenario(&us, 10, 5, mode);
            assert!(scn.rates().iter().all(|r| (r.a_m, r.a_h) == (0.3, 0.4)));
        }
    }

    #[test]
    fn extreme_switching_draws_only_corners() {
        let us = UncertaintySet::new(0.0, 5.0, 0.0, 25.0, 2, 2).unwrap();
        let scn = random_scenario(&us, 50, 11, ScenarioMode::ExtremeSwitching);
        assert!(scn
            .rates()
            .iter()
            .all(|r| (r.a_m == 0.0 || r.a_m == 5.0) && (r.a_h == 0.0 || r.a_h == 25.0)));
    }

    #[test]
    fn scenarios_are_deterministic_given_the_seed() {
        let us = UncertaintySet::new(0.0, 5.0, 0.0, 25.0, 2, 2).unwrap();
        let a = random_scenario(&us, 30, 99, ScenarioMode::Uniform);
        let b = random_scenario(&us, 30, 99, ScenarioMode::Uniform);
        assert_eq!(a, b);
    }

    #[test]
    fn violation_report_picks_the_first_crossing() {
        let mk = |h: f64| State::new(0.1, h).unwrap();
        let traj = Trajectory {
            t0: 2,
            states: vec![mk(0.0), mk(0.01), mk(0.0), mk(0.02), mk(0.03)],
            controls: vec![0.1; 4],
        };
        assert_eq!(violation_report(&traj, 0.01), Some(5));
        assert_eq!(violation_report(&traj, 0.5), None);
    }

    #[test]
    fn emitted_controls_are_admissible() {
        let (sg, cg, us, sol) = solved_instance();
        let strat = FeedbackStrategy::from_solution(&sol);
        for s in 0..50 {
            let scn = random_scenario(&us, strat.n_days(), s, ScenarioMode::Uniform);
            let x0 = sg.node((s as usize) % sg.n_m, (s as usize) % sg.n_h);
            let traj = simulate_closed_loop(x0, &strat, &scn, GAMMA, 20).unwrap();
            assert!(traj.controls.iter().all(|&u| (cg.u_lo..=cg.u_hi).contains(&u)));
        }
    }

    #[test]
    fn trajectory_csv_has_one_row_per_day_plus_terminal() {
        let (sg, _, us, sol) = solved_instance();
        let strat = FeedbackStrategy::from_solution(&sol);
        let scn = random_scenario(&us, strat.n_days(), 1, ScenarioMode::Uniform);
        let traj = simulate_closed_loop(sg.node(0, 0), &strat, &scn, GAMMA, 20).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&scn, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 5);
        assert!(text.lines().last().unwrap().ends_with(",,,"));
    }
}
