//! Calibration pipeline: convert daily case counts to prevalence, fit the
//! model parameters by bounded nonlinear least squares subject to the ODE,
//! and derive aggregate-rate point estimates and ranges.

use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{flow_map_phi, AggregateRates, Control, ModelParams, State};
use crate::error::{Error, Result};

/// Daily counts of newly registered cases.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceSeries {
    pub start_day: u32,
    pub new_cases: Vec<u64>,
    /// Total human population N_h.
    pub population: f64,
}

impl IncidenceSeries {
    pub fn new(start_day: u32, new_cases: Vec<u64>, population: f64) -> Result<Self> {
        if new_cases.is_empty() {
            return Err(Error::EmptySeries);
        }
        if !population.is_finite() || population <= 0.0 {
            return Err(Error::domain(format!("population {population} must be > 0")));
        }
        Ok(IncidenceSeries { start_day, new_cases, population })
    }

    /// Parse CSV with header `day,new_cases`: contiguous integer days,
    /// nonnegative integer counts. Errors carry 1-based line numbers.
    pub fn from_csv<R: BufRead>(reader: R, population: f64) -> Result<Self> {
        let mut start_day = None;
        let mut cases = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let text = line.trim();
            if lineno == 1 {
                if text != "day,new_cases" {
                    return Err(Error::Csv { line: 1, msg: format!("expected header 'day,new_cases', got '{text}'") });
                }
                continue;
            }
            if text.is_empty() {
                continue;
            }
            let mut fields = text.split(',');
            let (day_s, cases_s) = match (fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), None) => (a.trim(), b.trim()),
                _ => return Err(Error::Csv { line: lineno, msg: "expected exactly 2 fields".to_string() }),
            };
            let day: u32 = day_s
                .parse()
                .map_err(|_| Error::Csv { line: lineno, msg: format!("bad day '{day_s}'") })?;
            let count: u64 = cases_s
                .parse()
                .map_err(|_| Error::Csv { line: lineno, msg: format!("bad case count '{cases_s}'") })?;
            match start_day {
                None => start_day = Some(day),
                Some(s) if day != s + cases.len() as u32 => {
                    return Err(Error::Csv { line: lineno, msg: format!("day {day} breaks the contiguous range") })
                }
                _ => {}
            }
            cases.push(count);
        }
        let start_day = start_day.ok_or(Error::EmptySeries)?;
        IncidenceSeries::new(start_day, cases, population)
    }
}

/// Daily fractions of infected humans, each in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct PrevalenceSeries {
    pub start_day: u32,
    pub values: Vec<f64>,
}

impl PrevalenceSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Convert incidence to prevalence with a sliding window: everyone reported
/// within the last `infectious_days` days counts as currently infected.
pub fn incidence_to_prevalence(inc: &IncidenceSeries, infectious_days: u32) -> Result<PrevalenceSeries> {
    if infectious_days == 0 {
        return Err(Error::domain("infectious_days must be >= 1".to_string()));
    }
    if inc.new_cases.is_empty() {
        return Err(Error::EmptySeries);
    }
    let w = infectious_days as usize;
    let mut values = Vec::with_capacity(inc.new_cases.len());
    let mut window_sum: u64 = 0;
    let mut capped = 0usize;
    for (r, &c) in inc.new_cases.iter().enumerate() {
        window_sum += c;
        if r >= w {
            window_sum -= inc.new_cases[r - w];
        }
        let mut frac = window_sum as f64 / inc.population;
        if frac > 1.0 {
            frac = 1.0;
            capped += 1;
        }
        values.push(frac);
    }
    if capped > 0 {
        log::warn!("prevalence exceeded 1 on {capped} day(s); capped (population too small for the counts?)");
    }
    Ok(PrevalenceSeries { start_day: inc.start_day, values })
}

/// The five fitted parameters; the recovery rate gamma stays fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub alpha: f64,
    pub p_m: f64,
    pub p_h: f64,
    pub xi: f64,
    pub delta: f64,
}

impl Theta {
    pub fn with_gamma(&self, gamma: f64) -> ModelParams {
        ModelParams {
            alpha: self.alpha,
            p_m: self.p_m,
            p_h: self.p_h,
            xi: self.xi,
            delta: self.delta,
            gamma,
        }
    }

    fn as_array(&self) -> [f64; 5] {
        [self.alpha, self.p_m, self.p_h, self.xi, self.delta]
    }

    fn from_array(x: [f64; 5]) -> Self {
        Theta { alpha: x[0], p_m: x[1], p_h: x[2], xi: x[3], delta: x[4] }
    }
}

/// Box of admissible parameter vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub alpha: (f64, f64),
    pub p_m: (f64, f64),
    pub p_h: (f64, f64),
    pub xi: (f64, f64),
    pub delta: (f64, f64),
}

impl ParamBounds {
    /// The admissible ranges used throughout: alpha in [0,5], probabilities
    /// in [0,1], xi in [1,5], delta in [0.033, 0.066].
    pub fn reference() -> Self {
        ParamBounds {
            alpha: (0.0, 5.0),
            p_m: (0.0, 1.0),
            p_h: (0.0, 1.0),
            xi: (1.0, 5.0),
            delta: (0.033, 0.066),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in self.named() {
            if !lo.is_finite() || !hi.is_finite() || lo < 0.0 || lo > hi {
                return Err(Error::domain(format!("bounds for {name}: [{lo}, {hi}] must satisfy 0 <= lo <= hi")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, (f64, f64)); 5] {
        [
            ("alpha", self.alpha),
            ("p_m", self.p_m),
            ("p_h", self.p_h),
            ("xi", self.xi),
            ("delta", self.delta),
        ]
    }

    fn lo(&self) -> [f64; 5] {
        [self.alpha.0, self.p_m.0, self.p_h.0, self.xi.0, self.delta.0]
    }

    fn hi(&self) -> [f64; 5] {
        [self.alpha.1, self.p_m.1, self.p_h.1, self.xi.1, self.delta.1]
    }

    pub fn contains(&self, t: &Theta) -> bool {
        let x = t.as_array();
        let (lo, hi) = (self.lo(), self.hi());
        (0..5).all(|k| (lo[k]..=hi[k]).contains(&x[k]))
    }

    fn clamp(&self, x: [f64; 5]) -> [f64; 5] {
        let (lo, hi) = (self.lo(), self.hi());
        std::array::from_fn(|k| x[k].clamp(lo[k], hi[k]))
    }
}

/// Ranges for the aggregate rates induced by a parameter box:
/// A_m spans the products of the alpha and p_m interval ends, A_h those of
/// alpha, p_h and xi.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AggregateBox {
    pub a_m: (f64, f64),
    pub a_h: (f64, f64),
}

pub fn aggregate_ranges(bounds: &ParamBounds) -> Result<AggregateBox> {
    bounds.validate()?;
    Ok(AggregateBox {
        a_m: (bounds.alpha.0 * bounds.p_m.0, bounds.alpha.1 * bounds.p_m.1),
        a_h: (
            bounds.alpha.0 * bounds.p_h.0 * bounds.xi.0,
            bounds.alpha.1 * bounds.p_h.1 * bounds.xi.1,
        ),
    })
}

/// Simulate the uncontrolled model (mosquito mortality = natural delta) and
/// sample the infected-human fraction at integer days 0..=days.
///
/// The mosquito state starts at `m0_ratio * h0`.
pub fn simulate_prevalence(
    theta: &Theta,
    gamma: f64,
    h0: f64,
    m0_ratio: f64,
    days: u32,
    substeps: u32,
) -> Result<PrevalenceSeries> {
    let params = theta.with_gamma(gamma);
    params.validate()?;
    if !(0.0..=1.0).contains(&h0) || h0 * m0_ratio > 1.0 {
        return Err(Error::domain(format!(
            "initial prevalence {h0} with mosquito ratio {m0_ratio} leaves the unit square"
        )));
    }
    let rates = AggregateRates { a_m: params.alpha * params.p_m, a_h: params.alpha * params.p_h * params.xi };
    let control = Control::new(params.delta)?;
    let mut state = State::new(h0 * m0_ratio, h0)?;
    let mut values = Vec::with_capacity(days as usize + 1);
    values.push(state.h);
    for _ in 0..days {
        state = flow_map_phi(&state, control, &rates, gamma, substeps)?;
        values.push(state.h);
    }
    Ok(PrevalenceSeries { start_day: 0, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitTolerances {
    pub step: f64,
    pub objective_decrease: f64,
    pub max_iterations: usize,
}

impl Default for FitTolerances {
    fn default() -> Self {
        FitTolerances { step: 1e-10, objective_decrease: 1e-12, max_iterations: 500 }
    }
}

/// One bounded least-squares problem: observed prevalence, a start point,
/// the admissible box and the fixed model constants.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub theta0: Theta,
    pub bounds: ParamBounds,
    pub data: PrevalenceSeries,
    pub m0_ratio: f64,
    pub gamma: f64,
    pub substeps: u32,
    pub tolerances: FitTolerances,
}

impl FitProblem {
    fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.data.len() < 2 {
            return Err(Error::domain("need at least 2 observations to fit".to_string()));
        }
        if !self.bounds.contains(&self.theta0) {
            return Err(Error::domain("theta0 lies outside the admissible box".to_string()));
        }
        Ok(())
    }

    fn residuals(&self, theta: &Theta) -> Result<Vec<f64>> {
        let days = (self.data.len() - 1) as u32;
        let sim = simulate_prevalence(theta, self.gamma, self.data.values[0], self.m0_ratio, days, self.substeps)?;
        Ok(sim
            .values
            .iter()
            .zip(&self.data.values)
            .map(|(s, o)| s - o)
            .collect())
    }
}

/// One accepted iterate of the optimizer.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FitIterate {
    pub theta: Theta,
    pub objective: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub theta_hat: Theta,
    pub objective: f64,
    pub aggregates: AggregateRates,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<FitIterate>,
}

/// Sum of squared residuals at an arbitrary admissible point, for
/// independent re-checks of a fit result.
pub fn objective_at(problem: &FitProblem, theta: &Theta) -> Result<f64> {
    Ok(problem.residuals(theta)?.iter().map(|r| r * r).sum())
}

/// Central-difference Jacobian of the residual vector, rows = observations,
/// columns = the five parameters. Stencil points are clamped to the physical
/// domain so probabilities never leave [0,1].
pub fn residual_jacobian(problem: &FitProblem, theta: &Theta) -> Result<Vec<[f64; 5]>> {
    let x = theta.as_array();
    let n_rows = problem.data.len();
    let mut jac = vec![[0.0; 5]; n_rows];
    let phys_lo = [0.0; 5];
    let phys_hi = [f64::INFINITY, 1.0, 1.0, f64::INFINITY, 1.0];
    for k in 0..5 {
        let h = 1e-5 * x[k].abs().max(1.0);
        let mut xp = x;
        let mut xm = x;
        xp[k] = (x[k] + h).clamp(phys_lo[k], phys_hi[k]);
        xm[k] = (x[k] - h).clamp(phys_lo[k], phys_hi[k]);
        let denom = xp[k] - xm[k];
        if denom == 0.0 {
            continue;
        }
        let rp = problem.residuals(&Theta::from_array(xp))?;
        let rm = problem.residuals(&Theta::from_array(xm))?;
        for (row, (p, m)) in rp.iter().zip(&rm).enumerate() {
            jac[row][k] = (p - m) / denom;
        }
    }
    Ok(jac)
}

/// Largest per-parameter move allowed in one iteration, relative to
/// max(1, |x_k|). Oversized Gauss-Newton steps early on can hop across the
/// objective landscape into a spurious basin; the cap is enforced by
/// raising the damping, which costs no extra residual evaluations.
const TRUST_STEP_CAP: f64 = 0.25;

/// Minimize the sum of squared residuals over the box by damped
/// Gauss-Newton steps (Levenberg-Marquardt) with a trust-region cap on the
/// step length and projection onto the bounds. Terminates when both the
/// objective decrease and the iterate step fall below the configured
/// tolerances, or when damping stalls.
pub fn fit(problem: &FitProblem) -> Result<FitResult> {
    problem.validate()?;
    let tol = problem.tolerances;
    let mut x = problem.bounds.clamp(problem.theta0.as_array());
    let mut r = problem.residuals(&Theta::from_array(x))?;
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    if !cost.is_finite() {
        return Err(Error::Optimizer(format!("objective non-finite at the start point ({cost})")));
    }
    let mut trace = vec![FitIterate { theta: Theta::from_array(x), objective: cost }];
    let mut lambda = 1.0;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < tol.max_iterations {
        iterations += 1;
        if cost == 0.0 {
            converged = true;
            break;
        }
        let jac = residual_jacobian(problem, &Theta::from_array(x))?;
        // normal equations pieces
        let mut jtj = [[0.0f64; 5]; 5];
        let mut jtr = [0.0f64; 5];
        for (row, jr) in jac.iter().enumerate() {
            for a in 0..5 {
                jtr[a] += jr[a] * r[row];
                for b in 0..5 {
                    jtj[a][b] += jr[a] * jr[b];
                }
            }
        }

        let mut accepted = false;
        for _ in 0..40 {
            let mut damped = jtj;
            for k in 0..5 {
                damped[k][k] += lambda * jtj[k][k].max(1e-12);
            }
            let Some(delta) = solve_spd(damped, jtr.map(|g| -g)) else {
                lambda *= 10.0;
                continue;
            };
            let rel_step = (0..5)
                .map(|k| delta[k].abs() / x[k].abs().max(1.0))
                .fold(0.0, f64::max);
            if rel_step > TRUST_STEP_CAP {
                lambda *= 4.0;
                continue;
            }
            let x_new = problem.bounds.clamp(std::array::from_fn(|k| x[k] + delta[k]));
            let Ok(r_new) = problem.residuals(&Theta::from_array(x_new)) else {
                lambda *= 10.0;
                continue;
            };
            let cost_new: f64 = r_new.iter().map(|v| v * v).sum();
            if cost_new.is_finite() && cost_new < cost {
                let step = (0..5).map(|k| (x_new[k] - x[k]).abs()).fold(0.0, f64::max);
                let decrease = cost - cost_new;
                x = x_new;
                r = r_new;
                cost = cost_new;
                trace.push(FitIterate { theta: Theta::from_array(x), objective: cost });
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if step < tol.step && decrease < tol.objective_decrease {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            // stationary up to numerical precision
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    let theta_hat = Theta::from_array(x);
    Ok(FitResult {
        theta_hat,
        objective: cost,
        aggregates: AggregateRates {
            a_m: theta_hat.alpha * theta_hat.p_m,
            a_h: theta_hat.alpha * theta_hat.p_h * theta_hat.xi,
        },
        iterations,
        converged,
        trace,
    })
}

/// Run `fit` from `theta0` plus `k - 1` seeded random starts in the box and
/// keep the best objective. Starts run in parallel.
pub fn fit_multistart(problem: &FitProblem, k: usize, seed: u64) -> Result<(FitResult, Vec<Theta>)> {
    problem.validate()?;
    let mut starts = vec![problem.theta0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (problem.bounds.lo(), problem.bounds.hi());
    for _ in 1..k.max(1) {
        let x: [f64; 5] = std::array::from_fn(|i| {
            if lo[i] == hi[i] {
                lo[i]
            } else {
                rng.gen_range(lo[i]..=hi[i])
            }
        });
        starts.push(Theta::from_array(x));
    }
    let results: Vec<Result<FitResult>> = starts
        .par_iter()
        .map(|t0| fit(&FitProblem { theta0: *t0, ..problem.clone() }))
        .collect();
    let mut best: Option<FitResult> = None;
    for r in results {
        let r = r?;
        if best.as_ref().is_none_or(|b| r.objective < b.objective) {
            best = Some(r);
        }
    }
    Ok((best.expect("at least one start"), starts))
}

/// 5x5 symmetric positive-definite solve via Cholesky; None if not SPD.
#[allow(clippy::needless_range_loop)]
fn solve_spd(a: [[f64; 5]; 5], b: [f64; 5]) -> Option<[f64; 5]> {
    let mut l = [[0.0f64; 5]; 5];
    for i in 0..5 {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0f64; 5];
    for i in 0..5 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0f64; 5];
    for i in (0..5).rev() {
        let mut s = y[i];
        for k in i + 1..5 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Some(x)
}

/// Serializable fit report for the JSON output of the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub theta_hat: Theta,
    pub aggregates: AggregateRates,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub multistart: usize,
    pub seed: u64,
    pub start_points: Vec<Theta>,
    /// The incidence data was converted with a fixed-length sliding window;
    /// the conversion is an assumption of the pipeline, not part of the data.
    pub prevalence_conversion: String,
}

/// Integer daily incidence consistent with a model prevalence curve under
/// the sliding-window conversion: counts are recovered from the window
/// recurrence p_r = p_{r-1} + i_r - i_{r-w}.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_incidence(
    theta: &Theta,
    gamma: f64,
    h0: f64,
    m0_ratio: f64,
    days: u32,
    substeps: u32,
    population: f64,
    infectious_days: u32,
) -> Result<IncidenceSeries> {
    if !population.is_finite() || population <= 0.0 {
        return Err(Error::domain(format!("population {population} must be > 0")));
    }
    let prev = simulate_prevalence(theta, gamma, h0, m0_ratio, days, substeps)?;
    let counts: Vec<i64> = prev.values.iter().map(|&h| (h * population).round() as i64).collect();
    let w = infectious_days as usize;
    let mut incidence: Vec<u64> = Vec::with_capacity(counts.len());
    for r in 0..counts.len() {
        let prev_count = if r == 0 { 0 } else { counts[r - 1] };
        let leaving = if r >= w { incidence[r - w] as i64 } else { 0 };
        let i_r = counts[r] - prev_count + leaving;
        incidence.push(i_r.max(0) as u64);
    }
    IncidenceSeries::new(0, incidence, population)
}
