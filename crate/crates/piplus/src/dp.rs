//! Min-cost solver on the interpolated grid chain with per-node action sets.

use rayon::prelude::*;

use crate::model::GridModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct SolveOptions {
    /// Stop when the sup of |ΔV|/(1 + |V|) over finite nodes drops to this.
    pub tol: f64,
    pub k_max: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Solved {
    pub values: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
    pub change: f64,
}

fn support(gm: &GridModel, s: usize, a: usize) -> impl Iterator<Item = usize> + '_ {
    gm.successors(s, a).filter(|&(_, w)| w > 0.0).map(|(j, _)| j)
}

/// Nodes from which the absorbing set is reached with probability one for
/// some choice of actions in `sets`, treating stencil weights as transition
/// probabilities. Nodes outside this set have infinite cost whenever every
/// stage cost off the attractor is positive.
pub(crate) fn almost_sure_reach(gm: &GridModel, sets: &[Vec<usize>]) -> Vec<bool> {
    let n = gm.n_states();
    let mut keep = vec![true; n];
    loop {
        let mut reach: Vec<bool> = (0..n).map(|s| gm.is_absorbing(s)).collect();
        loop {
            let next: Vec<bool> = (0..n)
                .into_par_iter()
                .map(|s| {
                    reach[s]
                        || (keep[s]
                            && sets[s]
                                .iter()
                                .any(|&a| support(gm, s, a).all(|j| keep[j]) && support(gm, s, a).any(|j| reach[j])))
                })
                .collect();
            if next == reach {
                break;
            }
            reach = next;
        }
        if reach == keep {
            return keep;
        }
        keep = reach;
    }
}

/// V(s) = min over a ∈ sets[s] of ℓ(s, a) + Σ w·V(succ), with V = 0 on
/// absorbing nodes. Jacobi sweeps from V = 0 on the almost-sure-reach set and
/// +∞ elsewhere, so the iterates increase to the least fixed point.
pub(crate) fn solve(gm: &GridModel, sets: &[Vec<usize>], opts: SolveOptions) -> Solved {
    let n = gm.n_states();
    assert_eq!(sets.len(), n);
    let keep = almost_sure_reach(gm, sets);
    let mut v: Vec<f64> = keep.iter().map(|&k| if k { 0.0 } else { f64::INFINITY }).collect();
    let mut change = f64::INFINITY;
    for sweep in 1..=opts.k_max {
        let next: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|s| {
                if gm.is_absorbing(s) {
                    0.0
                } else if !keep[s] {
                    f64::INFINITY
                } else {
                    sets[s]
                        .iter()
                        .map(|&a| gm.q_value(s, a, &v))
                        .fold(f64::INFINITY, f64::min)
                }
            })
            .collect();
        change = next
            .iter()
            .zip(&v)
            .filter(|(a, _)| a.is_finite())
            .map(|(a, b)| (a - b).abs() / (1.0 + a.abs()))
            .fold(0.0, f64::max);
        v = next;
        if change <= opts.tol {
            return Solved {
                values: v,
                converged: true,
                sweeps: sweep,
                change,
            };
        }
    }
    Solved {
        values: v,
        converged: false,
        sweeps: opts.k_max,
        change,
    }
}

/// Per node, the actions in `sets[s]` whose one-step objective is within
/// `eps_tie·(1 + min)` of the minimum, and that minimum. Empty when every
/// objective is infinite.
pub(crate) fn argmin_sets(
    gm: &GridModel,
    values: &[f64],
    sets: Option<&[Vec<usize>]>,
    eps_tie: f64,
) -> Vec<(Vec<usize>, f64)> {
    (0..gm.n_states())
        .into_par_iter()
        .map(|s| {
            let q: Vec<(usize, f64)> = match sets {
                Some(sets) => sets[s].iter().map(|&a| (a, gm.q_value(s, a, values))).collect(),
                None => (0..gm.n_actions(s)).map(|a| (a, gm.q_value(s, a, values))).collect(),
            };
            let min = q.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            if !min.is_finite() {
                return (Vec::new(), min);
            }
            let cut = min + eps_tie * (1.0 + min.abs());
            let mut set: Vec<usize> = q.iter().filter(|p| p.1 <= cut).map(|p| p.0).collect();
            set.sort_unstable();
            (set, min)
        })
        .collect()
}
