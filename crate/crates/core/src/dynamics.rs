//! Controlled Ross-Macdonald vector field and its one-day flow map.
//!
//! The state couples the proportion of infected mosquitoes `m` with the
//! proportion of infected humans `h` on the unit square:
//!
//! ```text
//! dm/ds = A_M h (1 - m) - u m
//! dh/ds = A_H m (1 - h) - gamma h
//! ```
//!
//! Controls `u` (fumigation-induced mosquito mortality) and the uncertain
//! aggregate transmission rates `(A_M, A_H)` are held constant over each
//! one-day interval; the flow map [`flow_map_phi`] advances the state by
//! exactly one day under those frozen inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Drift beyond [0,1] tolerated (and clamped) after a flow-map evaluation.
/// Larger excursions indicate an integrator problem and raise an error.
pub const CLAMP_TOL: f64 = 1e-12;

/// Pair (m, h) of infected-mosquito and infected-human proportions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub m: f64,
    pub h: f64,
}

impl State {
    pub fn new(m: f64, h: f64) -> Result<Self> {
        if !m.is_finite() || !h.is_finite() {
            return Err(Error::domain(format!("non-finite state ({m}, {h})")));
        }
        if !(0.0..=1.0).contains(&m) || !(0.0..=1.0).contains(&h) {
            return Err(Error::domain(format!("state ({m}, {h}) outside [0,1]^2")));
        }
        Ok(State { m, h })
    }

    pub(crate) fn new_unchecked(m: f64, h: f64) -> Self {
        State { m, h }
    }
}

/// Mosquito mortality rate applied over one day, in [0, 1] day^-1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Control(f64);

impl Control {
    pub fn new(u: f64) -> Result<Self> {
        if !u.is_finite() || !(0.0..=1.0).contains(&u) {
            return Err(Error::domain(format!("control {u} outside [0,1]")));
        }
        Ok(Control(u))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Biological parameters of the Ross-Macdonald model.
///
/// `alpha` is the biting rate (day^-1), `p_m`/`p_h` the per-bite infection
/// probabilities of mosquitoes/humans, `xi` the number of female mosquitoes
/// per human, `delta` the natural mosquito mortality and `gamma` the human
/// recovery rate (both day^-1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: f64,
    pub p_m: f64,
    pub p_h: f64,
    pub xi: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("p_m", self.p_m),
            ("p_h", self.p_h),
            ("xi", self.xi),
            ("delta", self.delta),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::domain(format!("parameter {name} = {v} must be finite and >= 0")));
            }
        }
        if self.p_m > 1.0 || self.p_h > 1.0 {
            return Err(Error::domain("infection probabilities must lie in [0,1]".to_string()));
        }
        Ok(())
    }
}

/// Aggregate transmission rates A_m = alpha p_m and A_h = alpha p_h xi.
///
/// In the sampled model these are also the per-day uncertainty variables
/// (A_M(t), A_H(t)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRates {
    pub a_m: f64,
    pub a_h: f64,
}

impl AggregateRates {
    pub fn new(a_m: f64, a_h: f64) -> Result<Self> {
        if !a_m.is_finite() || !a_h.is_finite() || a_m < 0.0 || a_h < 0.0 {
            return Err(Error::domain(format!("rates ({a_m}, {a_h}) must be finite and >= 0")));
        }
        Ok(AggregateRates { a_m, a_h })
    }
}

/// Collapse model parameters into the aggregate transmission rates.
pub fn aggregate(params: &ModelParams) -> Result<AggregateRates> {
    params.validate()?;
    Ok(AggregateRates {
        a_m: params.alpha * params.p_m,
        a_h: params.alpha * params.p_h * params.xi,
    })
}

#[inline(always)]
fn rhs_raw(m: f64, h: f64, u: f64, a_m: f64, a_h: f64, gamma: f64) -> (f64, f64) {
    (a_m * h * (1.0 - m) - u * m, a_h * m * (1.0 - h) - gamma * h)
}

/// Evaluate the controlled vector field at one point.
pub fn rhs(state: &State, control: Control, rates: &AggregateRates, gamma: f64) -> Result<(f64, f64)> {
    validate_gamma(gamma)?;
    State::new(state.m, state.h)?;
    Ok(rhs_raw(state.m, state.h, control.value(), rates.a_m, rates.a_h, gamma))
}

fn validate_gamma(gamma: f64) -> Result<()> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::domain(format!("gamma = {gamma} must be finite and >= 0")));
    }
    Ok(())
}

/// Advance the state by one day with `u` and `(A_M, A_H)` held constant.
///
/// Classical fixed-step RK4 with `substeps` stages over the day. The unit
/// square is invariant for the exact flow; numerical drift up to
/// [`CLAMP_TOL`] is clamped, anything larger is reported as an error.
pub fn flow_map_phi(
    state: &State,
    control: Control,
    rates: &AggregateRates,
    gamma: f64,
    substeps: u32,
) -> Result<State> {
    validate_gamma(gamma)?;
    State::new(state.m, state.h)?;
    if substeps == 0 {
        return Err(Error::domain("substeps must be >= 1".to_string()));
    }
    let (u, a_m, a_h) = (control.value(), rates.a_m, rates.a_h);
    let dt = 1.0 / f64::from(substeps);
    let (mut m, mut h) = (state.m, state.h);
    for k in 0..substeps {
        let (k1m, k1h) = rhs_raw(m, h, u, a_m, a_h, gamma);
        let (k2m, k2h) = rhs_raw(m + 0.5 * dt * k1m, h + 0.5 * dt * k1h, u, a_m, a_h, gamma);
        let (k3m, k3h) = rhs_raw(m + 0.5 * dt * k2m, h + 0.5 * dt * k2h, u, a_m, a_h, gamma);
        let (k4m, k4h) = rhs_raw(m + dt * k3m, h + dt * k3h, u, a_m, a_h, gamma);
        m += dt / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m);
        h += dt / 6.0 * (k1h + 2.0 * k2h + 2.0 * k3h + k4h);
        if !m.is_finite() {
            return Err(Error::Integration { substep: k, coord: "m" });
        }
        if !h.is_finite() {
            return Err(Error::Integration { substep: k, coord: "h" });
        }
    }
    Ok(State {
        m: clamp_unit(m, "m")?,
        h: clamp_unit(h, "h")?,
    })
}

fn clamp_unit(x: f64, coord: &'static str) -> Result<f64> {
    if (-CLAMP_TOL..=1.0 + CLAMP_TOL).contains(&x) {
        Ok(x.clamp(0.0, 1.0))
    } else {
        Err(Error::Invariance { coord, value: x })
    }
}
