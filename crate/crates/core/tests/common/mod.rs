//! Shared test oracles, kept independent of the solver's sweep machinery.

use rossviab_core::{flow_map_phi, AggregateRates, Control, State, StateGrid};

/// Grid nodes surrounding a point, re-derived from scratch (same tolerance
/// constants as the solver, independent code path). `None` means the point
/// lies outside [0,1] x [0, h_cap].
pub fn surrounding_nodes(img: &State, sg: &StateGrid) -> Option<Vec<(usize, usize)>> {
    let is = locate(img.m, 1.0, sg.n_m, 1e-12, 1e-12)?;
    let js = locate(img.h, sg.h_cap, sg.n_h, 1e-12, 1e-15)?;
    Some(
        is.iter()
            .flat_map(|&i| js.iter().map(move |&j| (i, j)))
            .collect(),
    )
}

fn locate(x: f64, scale: f64, n: usize, low_tol: f64, high_tol: f64) -> Option<Vec<usize>> {
    if !x.is_finite() || x < -low_tol || x > scale + high_tol {
        return None;
    }
    let f = x.clamp(0.0, scale) / scale * (n - 1) as f64;
    let r = f.round();
    if (f - r).abs() <= 1e-9 {
        Some(vec![(r as usize).min(n - 1)])
    } else {
        let i = f.floor() as usize;
        Some(vec![i, i + 1])
    }
}

/// Exhaustive min-max game tree: a node is viable at time t when some
/// control works against every uncertainty, where "works" means the one-day
/// image stays in the box and all its surrounding nodes are viable at t+1.
/// Plain forward recursion, no value grids, no memoization.
#[allow(clippy::too_many_arguments)]
pub fn game_tree_viable(
    sg: &StateGrid,
    levels: &[f64],
    uncertainties: &[AggregateRates],
    gamma: f64,
    substeps: u32,
    node: (usize, usize),
    t: u32,
    t_final: u32,
) -> bool {
    if t == t_final {
        return true;
    }
    levels.iter().any(|&u| {
        uncertainties.iter().all(|a| {
            let img = flow_map_phi(&sg.node(node.0, node.1), Control::new(u).unwrap(), a, gamma, substeps)
                .expect("oracle flow evaluation");
            match surrounding_nodes(&img, sg) {
                None => false,
                Some(corners) => corners
                    .iter()
                    .all(|&c| game_tree_viable(sg, levels, uncertainties, gamma, substeps, c, t + 1, t_final)),
            }
        })
    })
}
