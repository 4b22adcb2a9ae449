//! Regularized policy iteration: the improvement map is replaced by its
//! outer-semicontinuous hull on the grid, evaluation takes the minimum over
//! all selections of that hull, and the next policy is the best selection.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dp;
use crate::model::{GridModel, PolicyTable, ValueTable};
use crate::pi::{evaluate_policy, improve, split_rows, write_rows, EvalOptions, Evaluation};

#[derive(Clone, Debug, PartialEq)]
pub struct PiPlusOptions {
    pub eval: EvalOptions,
    pub eps_tie: f64,
    /// Regularization radius; `None` means one grid cell diameter.
    pub delta_reg: Option<f64>,
    /// A neighbour's input joins H_r(x) only if it is farther than this
    /// fraction of the input range from every input in H(x). Closer inputs
    /// are the grid image of the same continuous branch and converge to
    /// H(x) anyway; 0 takes the plain union.
    pub branch_sep: f64,
    /// Stop once sup |V_r^{i+1} − V_r^i| falls below this; 0 runs every iteration.
    pub tol_stop: f64,
}

impl Default for PiPlusOptions {
    fn default() -> Self {
        PiPlusOptions {
            eval: EvalOptions::default(),
            eps_tie: 1e-9,
            delta_reg: None,
            branch_sep: 0.05,
            tol_stop: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    Improvement,
    Regularized,
    BestSelection,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PiPlusError {
    #[error("{kind:?} set is empty at iteration {iteration}, x = {state:?}")]
    EmptySet {
        iteration: usize,
        state: Vec<f64>,
        kind: SetKind,
    },
}

/// H_r(x): H(x) together with the inputs of H(x′) over grid nodes x′ with
/// |x′ − x| ≤ δ_reg that lie on a separate branch (see
/// [`PiPlusOptions::branch_sep`]).
///
/// When nodes carry different input samples, a neighbour's input is mapped
/// to the closest sample at x.
pub fn regularize(gm: &GridModel, h: &PolicyTable, delta_reg: f64, branch_sep: f64) -> PolicyTable {
    let shared = gm.inputs_shared();
    let sets = (0..gm.n_states())
        .into_par_iter()
        .map(|s| {
            let own = &h.sets[s];
            let tau = branch_sep * input_span(gm, s);
            let apart = |b: usize| {
                own.iter().all(|&a| {
                    let d = gm
                        .input(s, a)
                        .iter()
                        .zip(gm.input(s, b))
                        .map(|(p, q)| (p - q).abs())
                        .fold(0.0, f64::max);
                    d > tau
                })
            };
            let mut out = own.clone();
            for t in gm.grid.neighbors_within(s, delta_reg) {
                if t == s {
                    continue;
                }
                for &a in &h.sets[t] {
                    let b = if shared { a } else { gm.nearest_input(s, gm.input(t, a)) };
                    if apart(b) {
                        out.push(b);
                    }
                }
            }
            out
        })
        .collect();
    PolicyTable::from_sets(sets)
}

/// Largest per-coordinate extent of the input samples at node s.
fn input_span(gm: &GridModel, s: usize) -> f64 {
    let n_u = gm.model.n_u;
    (0..n_u)
        .map(|j| {
            let (lo, hi) = (0..gm.n_actions(s))
                .map(|a| gm.input(s, a)[j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            if hi >= lo {
                hi - lo
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// V_r(x) = min over selections h of H_r of J(x, h), computed as the optimal
/// cost of the control problem whose admissible inputs at x are H_r(x).
pub fn evaluate_min_selection(gm: &GridModel, h_r: &PolicyTable, opts: EvalOptions) -> Evaluation {
    let out = dp::solve(gm, &h_r.sets, opts.into());
    Evaluation {
        table: ValueTable::new(gm.grid.clone(), out.values),
        converged: out.converged,
        sweeps: out.sweeps,
    }
}

/// H_r^⋆(x) = argmin over H_r(x) of ℓ + V_r∘f, lowest index selected.
pub fn best_selection(gm: &GridModel, h_r: &PolicyTable, v_r: &ValueTable, eps_tie: f64) -> PolicyTable {
    let rows = dp::argmin_sets(gm, &v_r.values, Some(&h_r.sets), eps_tie);
    split_rows(gm, rows).policy
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiPlusTrace {
    pub i: usize,
    pub values: ValueTable,
    /// H^i, H_r^i and H_r^{⋆,i} (with the selection h_r^{⋆,i}). For i = 0
    /// all three are the singleton h⁰.
    pub h: PolicyTable,
    pub h_r: PolicyTable,
    pub h_star: PolicyTable,
    pub eval_converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiPlusRun {
    pub traces: Vec<PiPlusTrace>,
}

impl PiPlusRun {
    pub fn last(&self) -> &PiPlusTrace {
        self.traces.last().expect("a run holds at least V_r⁰")
    }
}

fn check_nonempty(gm: &GridModel, p: &PolicyTable, iteration: usize, kind: SetKind) -> Result<(), PiPlusError> {
    match (0..gm.n_states()).find(|&s| p.sets[s].is_empty() && !gm.is_absorbing(s)) {
        Some(s) => Err(PiPlusError::EmptySet {
            iteration,
            state: gm.grid.state(s),
            kind,
        }),
        None => Ok(()),
    }
}

/// Full loop. Every set is asserted non-empty at every non-absorbing node; a
/// failure points at a discretization artifact and is returned as an error.
pub fn run_piplus(
    gm: &GridModel,
    h0: &PolicyTable,
    iters: usize,
    opts: &PiPlusOptions,
) -> Result<PiPlusRun, PiPlusError> {
    let delta = opts.delta_reg.unwrap_or_else(|| gm.grid.cell_diameter());
    let ev = evaluate_policy(gm, h0, opts.eval);
    let mut traces = vec![PiPlusTrace {
        i: 0,
        values: ev.table,
        h: h0.clone(),
        h_r: h0.clone(),
        h_star: h0.clone(),
        eval_converged: ev.converged,
    }];
    for i in 1..=iters {
        let prev = &traces[i - 1].values;
        let h = improve(gm, prev, opts.eps_tie).policy;
        check_nonempty(gm, &h, i, SetKind::Improvement)?;
        let h_r = regularize(gm, &h, delta, opts.branch_sep);
        check_nonempty(gm, &h_r, i, SetKind::Regularized)?;
        let ev = evaluate_min_selection(gm, &h_r, opts.eval);
        let h_star = best_selection(gm, &h_r, &ev.table, opts.eps_tie);
        check_nonempty(gm, &h_star, i, SetKind::BestSelection)?;
        let change = ev.table.sup_diff(prev);
        traces.push(PiPlusTrace {
            i,
            values: ev.table,
            h,
            h_r,
            h_star,
            eval_converged: ev.converged,
        });
        if change < opts.tol_stop {
            break;
        }
    }
    Ok(PiPlusRun { traces })
}

/// Trace CSV: i, x…, v, u… (the best selection), set_size, then the sizes of
/// H, H_r and H_r^⋆.
pub fn write_trace_csv<W: Write>(out: W, gm: &GridModel, run: &PiPlusRun) -> std::io::Result<()> {
    write_rows(
        out,
        gm,
        &["h_size", "h_r_size", "h_star_size"],
        run.traces.iter().map(|t| {
            (
                t.i,
                t.values.clone(),
                t.h_star.clone(),
                vec![t.h.set_sizes(), t.h_r.set_sizes(), t.h_star.set_sizes()],
            )
        }),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PiPlusSummary {
    pub iterations: usize,
    pub eval_converged: Vec<bool>,
    pub max_h_size: Vec<usize>,
    pub max_h_r_size: Vec<usize>,
    pub max_h_star_size: Vec<usize>,
}

impl PiPlusRun {
    pub fn summary(&self) -> PiPlusSummary {
        let max = |p: &PolicyTable| p.set_sizes().into_iter().max().unwrap_or(0);
        PiPlusSummary {
            iterations: self.traces.len() - 1,
            eval_converged: self.traces.iter().map(|t| t.eval_converged).collect(),
            max_h_size: self.traces.iter().map(|t| max(&t.h)).collect(),
            max_h_r_size: self.traces.iter().map(|t| max(&t.h_r)).collect(),
            max_h_star_size: self.traces.iter().map(|t| max(&t.h_star)).collect(),
        }
    }
}
