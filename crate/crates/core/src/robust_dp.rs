//! Backward min-max dynamic programming over the discretized state box and
//! extraction of the robust viability kernel.
//!
//! The recursion runs t = T-1 down to t0. The terminal value function is 1
//! on every grid node (the grid lies inside the constraint box), and each
//! step assigns a node the value
//!
//! ```text
//! max over control levels u of
//!     min over enumerated uncertainties (A_M, A_H) of
//!         membership(Phi(node, u, A_M, A_H), V_{t+1})
//! ```
//!
//! with the conservative cell-corner membership rule. Since the flow does
//! not depend on t, the images Phi(node, u, A) are precomputed once and the
//! sweep itself reduces to grid lookups whenever the image table fits in
//! memory.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{flow_map_phi, AggregateRates, Control, State};
use crate::error::{Error, Result};
use crate::grid::{enumerate_uncertainties, membership_raw, ControlGrid, Mode, StateGrid, UncertaintySet, ValueGrid};

/// Image tables beyond this many entries fall back to recomputing the flow
/// map inside the sweep (16 bytes per entry; 8M entries = 128 MiB).
const PRECOMPUTE_LIMIT: usize = 8_000_000;

/// Discrete time window [t0, t_final] in days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    pub t0: u32,
    pub t_final: u32,
}

impl Horizon {
    pub fn new(t0: u32, t_final: u32) -> Result<Self> {
        if t_final < t0 + 1 {
            return Err(Error::domain(format!("horizon needs t_final >= t0 + 1, got [{t0}, {t_final}]")));
        }
        Ok(Horizon { t0, t_final })
    }

    pub fn steps(&self) -> usize {
        (self.t_final - self.t0) as usize
    }
}

/// Everything the sweep used, kept alongside its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub state_grid: StateGrid,
    pub control_grid: ControlGrid,
    pub uncertainty: UncertaintySet,
    pub horizon: Horizon,
    pub mode: Mode,
    pub gamma: f64,
    pub substeps: u32,
}

/// Value functions for t = t0..=T plus, for each earlier step, the first
/// maximizing control index per viable node.
#[derive(Debug, Clone)]
pub struct DpSolution {
    pub spec: SweepSpec,
    /// values[k] is V_{t0+k}; the last entry is V_T (all ones).
    pub values: Vec<ValueGrid>,
    /// policies[k][node] for t = t0+k, None on non-viable nodes.
    pub policies: Vec<Vec<Option<u16>>>,
    pub control_levels: Vec<f64>,
}

impl DpSolution {
    pub fn value_at(&self, t: u32) -> &ValueGrid {
        &self.values[(t - self.spec.horizon.t0) as usize]
    }

    pub fn policy_at(&self, t: u32) -> &[Option<u16>] {
        &self.policies[(t - self.spec.horizon.t0) as usize]
    }
}

/// Run the backward min-max recursion.
///
/// The inner minimum short-circuits on the first failing uncertainty and the
/// outer maximum on the first admissible control (ascending order, so the
/// recorded policy is the least fumigation effort attaining the max). Node
/// computations within one step are independent and run in parallel; the
/// result does not depend on the worker count.
pub fn backward_sweep(
    sg: &StateGrid,
    cg: &ControlGrid,
    us: &UncertaintySet,
    hz: Horizon,
    mode: Mode,
    gamma: f64,
    substeps: u32,
) -> Result<DpSolution> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::domain(format!("gamma = {gamma} must be finite and >= 0")));
    }
    if substeps == 0 {
        return Err(Error::domain("substeps must be >= 1".to_string()));
    }
    let levels = cg.levels();
    if levels.len() > u16::MAX as usize {
        return Err(Error::domain("more than 65535 control levels".to_string()));
    }
    // worst corner first: the minimum short-circuits sooner
    let mut unc = enumerate_uncertainties(us, mode);
    unc.reverse();

    let nodes: Vec<State> = (0..sg.n_h)
        .flat_map(|j| (0..sg.n_m).map(move |i| (i, j)))
        .map(|(i, j)| sg.node(i, j))
        .collect();

    let table = ImageTable::build(sg, &nodes, &levels, &unc, gamma, substeps)?;

    let n_steps = hz.steps();
    let mut values: Vec<ValueGrid> = Vec::with_capacity(n_steps + 1);
    let mut policies: Vec<Vec<Option<u16>>> = Vec::with_capacity(n_steps);
    values.push(ValueGrid::filled(sg, hz.t_final, true));

    for step in 0..n_steps {
        let t = hz.t_final - 1 - step as u32;
        let next = values.last().expect("value stack is never empty");
        let per_node: Vec<(bool, Option<u16>)> = (0..nodes.len())
            .into_par_iter()
            .map(|n| -> Result<(bool, Option<u16>)> {
                for (ci, &_u) in levels.iter().enumerate() {
                    let mut all_safe = true;
                    for (ai, _a) in unc.iter().enumerate() {
                        let img = table.image(n, ci, ai, &nodes, &levels, &unc, gamma, substeps, t, sg)?;
                        if !membership_raw(img.m, img.h, next, sg) {
                            all_safe = false;
                            break;
                        }
                    }
                    if all_safe {
                        return Ok((true, Some(ci as u16)));
                    }
                }
                Ok((false, None))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut vg = ValueGrid::filled(sg, t, false);
        let mut pol = vec![None; nodes.len()];
        for (n, (v, p)) in per_node.into_iter().enumerate() {
            let (i, j) = (n % sg.n_m, n / sg.n_m);
            vg.set(i, j, v);
            pol[n] = p;
        }
        debug_assert!(vg.le(next), "horizon monotonicity violated at t={t}");
        values.push(vg);
        policies.push(pol);
    }

    values.reverse();
    policies.reverse();
    Ok(DpSolution {
        spec: SweepSpec {
            state_grid: *sg,
            control_grid: *cg,
            uncertainty: *us,
            horizon: hz,
            mode,
            gamma,
            substeps,
        },
        values,
        policies,
        control_levels: levels,
    })
}

enum ImageTable {
    Precomputed { images: Vec<State>, n_controls: usize, n_unc: usize },
    Streaming,
}

impl ImageTable {
    fn build(
        sg: &StateGrid,
        nodes: &[State],
        levels: &[f64],
        unc: &[AggregateRates],
        gamma: f64,
        substeps: u32,
    ) -> Result<Self> {
        let entries = nodes.len() * levels.len() * unc.len();
        if entries > PRECOMPUTE_LIMIT {
            log::info!("image table of {entries} entries exceeds the precompute budget; streaming flow evaluations");
            return Ok(ImageTable::Streaming);
        }
        let images: Vec<State> = (0..entries)
            .into_par_iter()
            .map(|idx| {
                let n = idx / (levels.len() * unc.len());
                let rest = idx % (levels.len() * unc.len());
                let ci = rest / unc.len();
                let ai = rest % unc.len();
                eval_phi(sg, nodes, levels, unc, gamma, substeps, n, ci, ai, None)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageTable::Precomputed { images, n_controls: levels.len(), n_unc: unc.len() })
    }

    #[allow(clippy::too_many_arguments)]
    fn image(
        &self,
        n: usize,
        ci: usize,
        ai: usize,
        nodes: &[State],
        levels: &[f64],
        unc: &[AggregateRates],
        gamma: f64,
        substeps: u32,
        t: u32,
        sg: &StateGrid,
    ) -> Result<State> {
        match self {
            ImageTable::Precomputed { images, n_controls, n_unc } => {
                debug_assert_eq!(*n_controls, levels.len());
                Ok(images[(n * n_controls + ci) * n_unc + ai])
            }
            ImageTable::Streaming => eval_phi(sg, nodes, levels, unc, gamma, substeps, n, ci, ai, Some(t)),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_phi(
    sg: &StateGrid,
    nodes: &[State],
    levels: &[f64],
    unc: &[AggregateRates],
    gamma: f64,
    substeps: u32,
    n: usize,
    ci: usize,
    ai: usize,
    t: Option<u32>,
) -> Result<State> {
    let control = Control::new(levels[ci])?;
    flow_map_phi(&nodes[n], control, &unc[ai], gamma, substeps).map_err(|e| Error::Sweep {
        t,
        i: n % sg.n_m,
        j: n / sg.n_m,
        u: levels[ci],
        a_m: unc[ai].a_m,
        a_h: unc[ai].a_h,
        source: Box::new(e),
    })
}

/// The robust viability kernel: grid nodes with V_{t0} = 1.
#[derive(Debug, Clone)]
pub struct Kernel {
    /// (i, j) node indices, ordered j-slow then i-fast.
    pub members: Vec<(usize, usize)>,
    pub spec: SweepSpec,
}

pub fn extract_kernel(sol: &DpSolution) -> Kernel {
    let v0 = &sol.values[0];
    let mut members = Vec::new();
    for j in 0..v0.n_h {
        for i in 0..v0.n_m {
            if v0.get(i, j) {
                members.push((i, j));
            }
        }
    }
    Kernel { members, spec: sol.spec.clone() }
}

impl Kernel {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.members.binary_search_by(|&(mi, mj)| (mj, mi).cmp(&(j, i))).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// CSV rows `m,h,viable` over all grid nodes.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let sg = &self.spec.state_grid;
        writeln!(w, "m,h,viable")?;
        for j in 0..sg.n_h {
            for i in 0..sg.n_m {
                writeln!(
                    w,
                    "{:.16e},{:.16e},{}",
                    sg.m_at(i),
                    sg.h_at(j),
                    u8::from(self.contains(i, j))
                )?;
            }
        }
        Ok(())
    }
}

/// Upper boundary of the kernel: for each M column holding at least one
/// member, the largest viable H node. Ordered by M.
pub fn kernel_boundary(kernel: &Kernel) -> Result<Vec<(f64, f64)>> {
    if kernel.members.is_empty() {
        return Err(Error::EmptyKernel);
    }
    let sg = &kernel.spec.state_grid;
    let mut top: Vec<Option<usize>> = vec![None; sg.n_m];
    for &(i, j) in &kernel.members {
        let e = &mut top[i];
        *e = Some(e.map_or(j, |cur: usize| cur.max(j)));
    }
    Ok(top
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (sg.m_at(i), sg.h_at(j))))
        .collect())
}

/// Write boundary rows `m,h_boundary`.
pub fn write_boundary_csv<W: Write>(boundary: &[(f64, f64)], w: &mut W) -> Result<()> {
    writeln!(w, "m,h_boundary")?;
    for &(m, h) in boundary {
        writeln!(w, "{m:.16e},{h:.16e}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SetRelation {
    Equal,
    Subset,
    Superset,
    Incomparable,
}

/// Exact node-set comparison of two kernels on the same grid geometry.
/// Returns the relation of `a` to `b` and the symmetric difference count.
pub fn compare_kernels(a: &Kernel, b: &Kernel) -> Result<(SetRelation, usize)> {
    if a.spec.state_grid != b.spec.state_grid {
        return Err(Error::GridMismatch(format!(
            "{:?} vs {:?}",
            a.spec.state_grid, b.spec.state_grid
        )));
    }
    let only_a = a.members.iter().filter(|&&(i, j)| !b.contains(i, j)).count();
    let only_b = b.members.iter().filter(|&&(i, j)| !a.contains(i, j)).count();
    let relation = match (only_a, only_b) {
        (0, 0) => SetRelation::Equal,
        (0, _) => SetRelation::Subset,
        (_, 0) => SetRelation::Superset,
        _ => SetRelation::Incomparable,
    };
    Ok((relation, only_a + only_b))
}

/// Check corners mode against full enumeration on a small instance derived
/// from the given rectangle. Run before trusting corners mode at scale.
pub fn corners_preflight(us: &UncertaintySet, cg: &ControlGrid, gamma: f64) -> Result<()> {
    let sg = StateGrid::new(10, 10, 0.25)?;
    let hz = Horizon::new(0, 3)?;
    // shrink huge rectangles so the miniature kernel is not degenerate
    let cap_m = us.a_m_hi.min(1.0);
    let cap_h = us.a_h_hi.min(1.2);
    let mini = UncertaintySet::new(
        us.a_m_lo.min(cap_m),
        cap_m,
        us.a_h_lo.min(cap_h),
        cap_h,
        if us.a_m_lo.min(cap_m) == cap_m { 1 } else { 3 },
        if us.a_h_lo.min(cap_h) == cap_h { 1 } else { 3 },
    )?;
    let mini_cg = ControlGrid::new(cg.n_u.min(3), cg.u_lo, cg.u_hi)?;
    let full = backward_sweep(&sg, &mini_cg, &mini, hz, Mode::Full, gamma, 50)?;
    let corners = backward_sweep(&sg, &mini_cg, &mini, hz, Mode::Corners, gamma, 50)?;
    for (vf, vc) in full.values.iter().zip(&corners.values) {
        if vf != vc {
            return Err(Error::CornersUnsound(format!(
                "value grids differ at t = {} on the preflight instance",
                vf.time_index
            )));
        }
    }
    Ok(())
}
