//! Discretization of the state box, the control interval and the
//! uncertainty rectangle, plus the conservative cell-corner membership rule
//! used by the DP sweep.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::{AggregateRates, State};
use crate::error::{Error, Result};

/// Snap tolerance, in index units: a query whose fractional grid index is
/// this close to an integer is treated as lying exactly on that node line.
/// Sized for floating-point representation noise of i/(n-1), far below any
/// physically distinct point.
pub const SNAP_EPS_INDEX: f64 = 1e-9;

/// A point with M beyond [0,1] by more than this is outside (membership 0),
/// never an error: the sweep must stay total.
pub const M_BOUNDARY_TOL: f64 = 1e-12;

/// Points with H in (h_cap, h_cap + this] count as on the cap boundary.
/// Flow images landing exactly on the cap must not be rejected by round-off.
pub const H_CAP_BOUNDARY_TOL: f64 = 1e-15;

const H_LOW_BOUNDARY_TOL: f64 = 1e-12;

/// Uniform grid on [0,1] x [0, h_cap] with n_m x n_h nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub n_m: usize,
    pub n_h: usize,
    pub h_cap: f64,
}

impl StateGrid {
    pub fn new(n_m: usize, n_h: usize, h_cap: f64) -> Result<Self> {
        if n_m < 2 || n_h < 2 {
            return Err(Error::domain(format!("grid needs >= 2 nodes per axis, got {n_m} x {n_h}")));
        }
        if !h_cap.is_finite() || h_cap <= 0.0 || h_cap >= 1.0 {
            return Err(Error::domain(format!("infection cap {h_cap} must lie in (0,1)")));
        }
        Ok(StateGrid { n_m, n_h, h_cap })
    }

    pub fn m_at(&self, i: usize) -> f64 {
        debug_assert!(i < self.n_m);
        i as f64 / (self.n_m - 1) as f64
    }

    pub fn h_at(&self, j: usize) -> f64 {
        debug_assert!(j < self.n_h);
        self.h_cap * (j as f64 / (self.n_h - 1) as f64)
    }

    pub fn node(&self, i: usize, j: usize) -> State {
        State::new_unchecked(self.m_at(i), self.h_at(j))
    }

    pub fn len(&self) -> usize {
        self.n_m * self.n_h
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat index of node (i, j); j (the H axis) is the slow dimension.
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n_m && j < self.n_h);
        j * self.n_m + i
    }

    fn locate_m(&self, m: f64) -> AxisLoc {
        locate_on_axis(m, 1.0, self.n_m, M_BOUNDARY_TOL, M_BOUNDARY_TOL)
    }

    fn locate_h(&self, h: f64) -> AxisLoc {
        locate_on_axis(h, self.h_cap, self.n_h, H_LOW_BOUNDARY_TOL, H_CAP_BOUNDARY_TOL)
    }
}

/// Where a coordinate falls along one grid axis.
#[derive(Debug, Clone, Copy, PartialEq)]
enum AxisLoc {
    /// On (or snapped to) node line k.
    Node(usize),
    /// Strictly between node lines k and k+1.
    Cell(usize),
    Outside,
}

fn locate_on_axis(x: f64, scale: f64, n: usize, low_tol: f64, high_tol: f64) -> AxisLoc {
    if !x.is_finite() || x < -low_tol || x > scale + high_tol {
        return AxisLoc::Outside;
    }
    let clamped = x.clamp(0.0, scale);
    let f = clamped / scale * (n - 1) as f64;
    let r = f.round();
    if (f - r).abs() <= SNAP_EPS_INDEX {
        AxisLoc::Node((r as usize).min(n - 1))
    } else {
        AxisLoc::Cell(f.floor() as usize)
    }
}

/// Uniformly spaced control levels on [u_lo, u_hi], endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    pub n_u: usize,
    pub u_lo: f64,
    pub u_hi: f64,
}

impl ControlGrid {
    pub fn new(n_u: usize, u_lo: f64, u_hi: f64) -> Result<Self> {
        if !u_lo.is_finite() || !u_hi.is_finite() || u_lo < 0.0 || u_hi > 1.0 || u_lo > u_hi {
            return Err(Error::domain(format!("control bounds [{u_lo}, {u_hi}] must satisfy 0 <= lo <= hi <= 1")));
        }
        if n_u == 0 || (n_u == 1 && u_lo != u_hi) {
            return Err(Error::domain(format!("{n_u} control level(s) cannot span [{u_lo}, {u_hi}]")));
        }
        Ok(ControlGrid { n_u, u_lo, u_hi })
    }

    pub fn levels(&self) -> Vec<f64> {
        axis_values(self.u_lo, self.u_hi, self.n_u)
    }
}

/// Rectangle of aggregate-rate uncertainties, with the lattice counts used
/// by full enumeration. A degenerate rectangle (lo = hi on both axes) is the
/// deterministic case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySet {
    pub a_m_lo: f64,
    pub a_m_hi: f64,
    pub a_h_lo: f64,
    pub a_h_hi: f64,
    pub n_am: usize,
    pub n_ah: usize,
}

impl UncertaintySet {
    pub fn new(a_m_lo: f64, a_m_hi: f64, a_h_lo: f64, a_h_hi: f64, n_am: usize, n_ah: usize) -> Result<Self> {
        for (name, lo, hi) in [("a_m", a_m_lo, a_m_hi), ("a_h", a_h_lo, a_h_hi)] {
            if !lo.is_finite() || !hi.is_finite() || lo < 0.0 || lo > hi {
                return Err(Error::domain(format!("{name} interval [{lo}, {hi}] must satisfy 0 <= lo <= hi")));
            }
        }
        if (a_m_lo < a_m_hi && n_am < 2) || (a_h_lo < a_h_hi && n_ah < 2) {
            return Err(Error::domain("a non-degenerate interval needs at least 2 lattice points".to_string()));
        }
        if n_am == 0 || n_ah == 0 {
            return Err(Error::domain("lattice counts must be >= 1".to_string()));
        }
        Ok(UncertaintySet { a_m_lo, a_m_hi, a_h_lo, a_h_hi, n_am, n_ah })
    }

    pub fn singleton(a_m: f64, a_h: f64) -> Result<Self> {
        UncertaintySet::new(a_m, a_m, a_h, a_h, 1, 1)
    }

    pub fn is_singleton(&self) -> bool {
        self.a_m_lo == self.a_m_hi && self.a_h_lo == self.a_h_hi
    }

    /// Componentwise interval inclusion.
    pub fn contains_set(&self, other: &UncertaintySet) -> bool {
        self.a_m_lo <= other.a_m_lo
            && other.a_m_hi <= self.a_m_hi
            && self.a_h_lo <= other.a_h_lo
            && other.a_h_hi <= self.a_h_hi
    }

    pub fn contains_point(&self, r: &AggregateRates) -> bool {
        (self.a_m_lo..=self.a_m_hi).contains(&r.a_m) && (self.a_h_lo..=self.a_h_hi).contains(&r.a_h)
    }

    pub fn upper_corner(&self) -> AggregateRates {
        AggregateRates { a_m: self.a_m_hi, a_h: self.a_h_hi }
    }

    pub fn corners(&self) -> Vec<AggregateRates> {
        let mut out = Vec::with_capacity(4);
        for &a_m in &dedup2(self.a_m_lo, self.a_m_hi) {
            for &a_h in &dedup2(self.a_h_lo, self.a_h_hi) {
                out.push(AggregateRates { a_m, a_h });
            }
        }
        out
    }
}

fn dedup2(lo: f64, hi: f64) -> Vec<f64> {
    if lo == hi {
        vec![lo]
    } else {
        vec![lo, hi]
    }
}

/// How the inner infimum over uncertainties is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Enumerate the full n_am x n_ah lattice.
    Full,
    /// Evaluate only the upper-right corner; exact under verified
    /// monotonicity of the flow and the lower-set property of the kernel.
    Corners,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Full => write!(f, "full"),
            Mode::Corners => write!(f, "corners"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "corners" => Ok(Mode::Corners),
            other => Err(Error::domain(format!("unknown mode '{other}' (expected full|corners)"))),
        }
    }
}

/// Enumerate the uncertainty points the DP minimizes over.
pub fn enumerate_uncertainties(us: &UncertaintySet, mode: Mode) -> Vec<AggregateRates> {
    match mode {
        Mode::Corners => vec![us.upper_corner()],
        Mode::Full => {
            let ams = axis_values(us.a_m_lo, us.a_m_hi, us.n_am);
            let ahs = axis_values(us.a_h_lo, us.a_h_hi, us.n_ah);
            let mut out = Vec::with_capacity(ams.len() * ahs.len());
            for &a_m in &ams {
                for &a_h in &ahs {
                    out.push(AggregateRates { a_m, a_h });
                }
            }
            out
        }
    }
}

/// Uniform values on [lo, hi] including both endpoints bit-exactly.
pub(crate) fn axis_values(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if lo == hi {
        return vec![lo];
    }
    (0..n)
        .map(|k| {
            if k == n - 1 {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Binary value function on the state grid at one time index.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub n_m: usize,
    pub n_h: usize,
    pub time_index: u32,
    values: Vec<bool>,
}

impl ValueGrid {
    pub fn filled(sg: &StateGrid, time_index: u32, value: bool) -> Self {
        ValueGrid { n_m: sg.n_m, n_h: sg.n_h, time_index, values: vec![value; sg.len()] }
    }

    pub fn from_values(sg: &StateGrid, time_index: u32, values: Vec<bool>) -> Result<Self> {
        if values.len() != sg.len() {
            return Err(Error::GridMismatch(format!(
                "value vector length {} does not match grid {} x {}",
                values.len(),
                sg.n_m,
                sg.n_h
            )));
        }
        Ok(ValueGrid { n_m: sg.n_m, n_h: sg.n_h, time_index, values })
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.values[j * self.n_m + i]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.values[j * self.n_m + i] = value;
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Pointwise `self <= other`.
    pub fn le(&self, other: &ValueGrid) -> bool {
        self.values.iter().zip(&other.values).all(|(&a, &b)| !a || b)
    }

    /// CSV rows `m,h,value`, j (H) slow and i (M) fast, coordinates with 17
    /// significant digits.
    pub fn write_csv<W: Write>(&self, sg: &StateGrid, w: &mut W) -> Result<()> {
        writeln!(w, "m,h,value")?;
        for j in 0..self.n_h {
            for i in 0..self.n_m {
                writeln!(
                    w,
                    "{:.16e},{:.16e},{}",
                    sg.m_at(i),
                    sg.h_at(j),
                    u8::from(self.get(i, j))
                )?;
            }
        }
        Ok(())
    }
}

/// Conservative membership of a continuum point in the binary value grid.
///
/// Outside [0,1] x [0, h_cap] (beyond the boundary tolerances) the result is
/// 0. A point on a node line uses only the nodes it touches; otherwise all
/// (up to 4) nodes of the enclosing cell must be 1.
pub fn conservative_membership(point: &State, vg: &ValueGrid, sg: &StateGrid) -> bool {
    membership_raw(point.m, point.h, vg, sg)
}

pub(crate) fn membership_raw(m: f64, h: f64, vg: &ValueGrid, sg: &StateGrid) -> bool {
    debug_assert!(vg.n_m == sg.n_m && vg.n_h == sg.n_h);
    let is = match sg.locate_m(m) {
        AxisLoc::Outside => return false,
        AxisLoc::Node(i) => [i, i],
        AxisLoc::Cell(i) => [i, i + 1],
    };
    let js = match sg.locate_h(h) {
        AxisLoc::Outside => return false,
        AxisLoc::Node(j) => [j, j],
        AxisLoc::Cell(j) => [j, j + 1],
    };
    vg.get(is[0], js[0]) && vg.get(is[1], js[0]) && vg.get(is[0], js[1]) && vg.get(is[1], js[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n_m: usize, n_h: usize, h_cap: f64) -> StateGrid {
        StateGrid::new(n_m, n_h, h_cap).unwrap()
    }

    #[test]
    fn node_coordinates_span_the_box() {
        let sg = grid(70, 70, 0.00001);
        assert_eq!((sg.m_at(0), sg.h_at(0)), (0.0, 0.0));
        assert_eq!((sg.m_at(69), sg.h_at(69)), (1.0, 0.00001));
    }

    #[test]
    fn minimal_grid_hits_the_four_corners() {
        let sg = grid(2, 2, 0.5);
        let corners: Vec<(f64, f64)> = (0..2)
            .flat_map(|j| (0..2).map(move |i| (i, j)))
            .map(|(i, j)| (sg.m_at(i), sg.h_at(j)))
            .collect();
        assert_eq!(corners, vec![(0.0, 0.0), (1.0, 0.0), (0.0, 0.5), (1.0, 0.5)]);
    }

    #[test]
    fn three_by_three_grid_centers_correctly() {
        let sg = grid(3, 3, 0.9);
        assert_eq!((sg.m_at(1), sg.h_at(1)), (0.5, 0.45));
    }

    #[test]
    fn grid_rejects_bad_dimensions_and_caps() {
        assert!(StateGrid::new(1, 70, 0.5).is_err());
        assert!(StateGrid::new(70, 70, 0.0).is_err());
        assert!(StateGrid::new(70, 70, 1.0).is_err());
    }

    #[test]
    fn membership_at_every_node_returns_the_node_value() {
        let sg = grid(70, 70, 0.00001);
        let mut vg = ValueGrid::filled(&sg, 0, false);
        // checkerboard
        for j in 0..70 {
            for i in 0..70 {
                vg.set(i, j, (i + j) % 2 == 0);
            }
        }
        for j in 0..70 {
            for i in 0..70 {
                let p = sg.node(i, j);
                assert_eq!(conservative_membership(&p, &vg, &sg), vg.get(i, j), "node ({i},{j})");
            }
        }
    }

    #[test]
    fn interior_point_needs_all_four_corners() {
        let sg = grid(3, 3, 0.5);
        // all 16 value patterns on the cell [0,0.5] x [0,0.25]
        for pattern in 0u8..16 {
            let mut vg = ValueGrid::filled(&sg, 0, true);
            vg.set(0, 0, pattern & 1 != 0);
            vg.set(1, 0, pattern & 2 != 0);
            vg.set(0, 1, pattern & 4 != 0);
            vg.set(1, 1, pattern & 8 != 0);
            let p = State::new(0.21, 0.1).unwrap();
            assert_eq!(conservative_membership(&p, &vg, &sg), pattern == 15, "pattern {pattern:04b}");
        }
    }

    #[test]
    fn point_above_cap_is_outside() {
        let sg = grid(5, 5, 0.01);
        let vg = ValueGrid::filled(&sg, 0, true);
        let p = State::new(0.5, 0.02).unwrap();
        assert!(!conservative_membership(&p, &vg, &sg));
    }

    #[test]
    fn cap_boundary_tolerance_keeps_roundoff_inside() {
        let sg = grid(5, 5, 0.01);
        let vg = ValueGrid::filled(&sg, 0, true);
        assert!(membership_raw(0.5, 0.01 + 0.9e-15, &vg, &sg));
        assert!(!membership_raw(0.5, 0.01 + 1e-13, &vg, &sg));
    }

    #[test]
    fn m_outside_unit_interval_is_outside_not_an_error() {
        let sg = grid(5, 5, 0.5);
        let vg = ValueGrid::filled(&sg, 0, true);
        assert!(!membership_raw(1.0 + 1e-9, 0.2, &vg, &sg));
        assert!(!membership_raw(-1e-9, 0.2, &vg, &sg));
        // within the tolerance band it clamps to the boundary node
        assert!(membership_raw(1.0 + 0.5e-12, 0.2, &vg, &sg));
        assert!(membership_raw(-0.5e-12, 0.2, &vg, &sg));
    }

    #[test]
    fn on_node_line_uses_only_touched_nodes() {
        let sg = grid(3, 3, 0.5);
        let mut vg = ValueGrid::filled(&sg, 0, true);
        vg.set(2, 0, false);
        vg.set(2, 1, false);
        // m exactly on line i=1, so column 2 must not matter
        assert!(membership_raw(0.5, 0.1, &vg, &sg));
    }

    #[test]
    fn enumerate_singleton_yields_one_point_in_both_modes() {
        let us = UncertaintySet::singleton(0.076608, 0.0722633).unwrap();
        for mode in [Mode::Full, Mode::Corners] {
            let pts = enumerate_uncertainties(&us, mode);
            assert_eq!(pts.len(), 1);
            assert_eq!((pts[0].a_m, pts[0].a_h), (0.076608, 0.0722633));
        }
    }

    #[test]
    fn enumerate_corners_is_the_upper_right_corner() {
        let us = UncertaintySet::new(0.0, 5.0, 0.0, 25.0, 70, 70).unwrap();
        let pts = enumerate_uncertainties(&us, Mode::Corners);
        assert_eq!(pts.len(), 1);
        assert_eq!((pts[0].a_m, pts[0].a_h), (5.0, 25.0));
    }

    #[test]
    fn enumerate_full_lattice_includes_endpoints() {
        let us = UncertaintySet::new(0.0, 1.0, 0.0, 1.0, 3, 3).unwrap();
        let pts = enumerate_uncertainties(&us, Mode::Full);
        assert_eq!(pts.len(), 9);
        assert!(pts.iter().any(|p| (p.a_m, p.a_h) == (0.0, 0.0)));
        assert!(pts.iter().any(|p| (p.a_m, p.a_h) == (1.0, 1.0)));
    }

    #[test]
    fn control_levels_include_both_endpoints() {
        let cg = ControlGrid::new(70, 0.0333, 0.05).unwrap();
        let levels = cg.levels();
        assert_eq!(levels.len(), 70);
        assert_eq!(levels[0], 0.0333);
        assert_eq!(levels[69], 0.05);
        assert!(levels.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn value_grid_csv_layout_is_h_slow_m_fast() {
        let sg = grid(2, 2, 0.5);
        let vg = ValueGrid::filled(&sg, 3, true);
        let mut buf = Vec::new();
        vg.write_csv(&sg, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "m,h,value");
        assert!(lines[1].starts_with("0.0000000000000000e0,0.0000000000000000e0,1"));
        assert!(lines[2].starts_with("1.0000000000000000e0,0.0000000000000000e0,1"));
        assert!(lines[3].starts_with("0.0000000000000000e0,5.0000000000000000e-1,1"));
        assert_eq!(lines.len(), 5);
    }

    proptest! {
        #[test]
        fn membership_is_monotone_in_the_value_grid(
            seed in 0u64..1000,
            m in 0.0..=1.0f64,
            hf in 0.0..=1.0f64,
            flip_i in 0usize..6,
            flip_j in 0usize..6,
        ) {
            use rand::{Rng, SeedableRng};
            let sg = grid(6, 6, 0.3);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut vg = ValueGrid::filled(&sg, 0, false);
            for j in 0..6 {
                for i in 0..6 {
                    vg.set(i, j, rng.gen_bool(0.5));
                }
            }
            let h = hf * 0.3;
            let before = membership_raw(m, h, &vg, &sg);
            let mut raised = vg.clone();
            raised.set(flip_i, flip_j, true);
            let after = membership_raw(m, h, &raised, &sg);
            prop_assert!(after >= before);
        }

        #[test]
        fn all_ones_grid_separates_inside_from_outside(
            m in -0.5..=1.5f64,
            h in -0.2..=0.6f64,
        ) {
            let sg = grid(7, 5, 0.3);
            let vg = ValueGrid::filled(&sg, 0, true);
            let inside = (0.0..=1.0).contains(&m) && (0.0..=0.3).contains(&h);
            // keep clear of the tolerance bands themselves
            if (m - 0.0).abs() > 1e-9 && (m - 1.0).abs() > 1e-9 && h.abs() > 1e-9 && (h - 0.3).abs() > 1e-9 {
                prop_assert_eq!(membership_raw(m, h, &vg, &sg), inside);
            }
        }
    }
}
