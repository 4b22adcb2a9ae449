//! Ground truth: value iteration, exhaustive policy enumeration and the
//! scalar Riccati solution.

use rayon::prelude::*;
use thiserror::Error;

use crate::dp::{self, SolveOptions};
use crate::model::{GridModel, PolicyTable, ValueTable};
use crate::pi::EvalOptions;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("{count} policies exceed the enumeration budget of {budget}")]
    Budget { count: u128, budget: u128 },
    #[error("Riccati iteration: {0}")]
    Riccati(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub values: ValueTable,
    /// Argmin sets H⋆ with the lowest index as h⋆.
    pub policy: PolicyTable,
    pub converged: bool,
    pub iterations: usize,
    pub change: f64,
}

impl OracleResult {
    /// max over nodes of |V(x) − min_u {ℓ(x, u) + V(f(x, u))}| on finite nodes.
    pub fn bellman_residual(&self, gm: &GridModel) -> f64 {
        let v = &self.values.values;
        (0..gm.n_states())
            .into_par_iter()
            .filter(|&s| v[s].is_finite() && !gm.is_absorbing(s))
            .map(|s| {
                let best = (0..gm.n_actions(s))
                    .map(|a| gm.q_value(s, a, v))
                    .fold(f64::INFINITY, f64::min);
                (v[s] - best).abs()
            })
            .reduce(|| 0.0, f64::max)
    }
}

/// V⋆ by value iteration over every sampled input, from V = 0.
///
/// Undiscounted convergence rests on the absorbing set: every finite-cost
/// node reaches it, and nodes that cannot are +∞.
pub fn value_iteration(gm: &GridModel, opts: EvalOptions, eps_tie: f64) -> OracleResult {
    let all: Vec<Vec<usize>> = (0..gm.n_states()).map(|s| (0..gm.n_actions(s)).collect()).collect();
    let out = dp::solve(gm, &all, opts.into());
    let sets = dp::argmin_sets(gm, &out.values, None, eps_tie)
        .into_iter()
        .map(|r| r.0)
        .collect();
    OracleResult {
        values: ValueTable::new(gm.grid.clone(), out.values),
        policy: PolicyTable::from_sets(sets),
        converged: out.converged,
        iterations: out.sweeps,
        change: out.change,
    }
}

/// Fixed point of p = q + a²p − (abp)²/(r + b²p), iterated from p = q.
pub fn riccati_lq(a: f64, b: f64, q: f64, r: f64) -> Result<f64, OracleError> {
    if !(q >= 0.0) || !(r > 0.0) {
        return Err(OracleError::Riccati(format!(
            "need q ≥ 0 and r > 0 (r = 0 is only meaningful with input bounds), got q = {q}, r = {r}"
        )));
    }
    if b == 0.0 && a.abs() >= 1.0 {
        return Err(OracleError::Riccati(format!("(a, b) = ({a}, 0) is not stabilizable")));
    }
    let mut p = q;
    for _ in 0..1_000_000 {
        let next = q + a * a * p - (a * b * p).powi(2) / (r + b * b * p);
        if !next.is_finite() {
            break;
        }
        if (next - p).abs() <= 1e-12 * (1.0 + p.abs()) {
            return Ok(next);
        }
        p = next;
    }
    Err(OracleError::Riccati("no convergence".into()))
}

/// Pointwise minimum of J(·, h) over all selections h of `sets`, together
/// with the selections attaining it at every node.
fn enumerate(
    gm: &GridModel,
    sets: &[Vec<usize>],
    budget: u128,
    opts: EvalOptions,
) -> Result<(Vec<f64>, Vec<Vec<usize>>), OracleError> {
    let free: Vec<usize> = (0..gm.n_states())
        .filter(|&s| !gm.is_absorbing(s) && sets[s].len() > 1)
        .collect();
    let count = free
        .iter()
        .try_fold(1u128, |acc, &s| acc.checked_mul(sets[s].len() as u128))
        .unwrap_or(u128::MAX);
    if count > budget {
        return Err(OracleError::Budget { count, budget });
    }
    let decode = |mut k: u128| -> Vec<Vec<usize>> {
        let mut chosen: Vec<Vec<usize>> = sets.iter().map(|s| s.iter().take(1).copied().collect()).collect();
        for &s in &free {
            let m = sets[s].len() as u128;
            chosen[s] = vec![sets[s][(k % m) as usize]];
            k /= m;
        }
        chosen
    };
    let solve = SolveOptions::from(opts);
    let values: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|k| dp::solve(gm, &decode(k), solve).values)
        .collect();
    let n = gm.n_states();
    let best: Vec<f64> = (0..n)
        .map(|s| values.iter().map(|v| v[s]).fold(f64::INFINITY, f64::min))
        .collect();
    let winners = (0..count)
        .filter(|&k| values[k as usize] == best)
        .map(|k| {
            decode(k)
                .into_iter()
                .map(|c| c.first().copied().unwrap_or(usize::MAX))
                .collect()
        })
        .collect();
    Ok((best, winners))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Enumeration {
    pub result: OracleResult,
    /// Every stationary policy whose cost equals the pointwise minimum.
    pub optimal: Vec<Vec<usize>>,
    pub count: u128,
}

/// Evaluate J for every stationary policy of a tiny model and keep the
/// pointwise minimum. Refuses when the number of policies exceeds `budget`.
pub fn exhaustive_policy_search(gm: &GridModel, budget: u128, opts: EvalOptions) -> Result<Enumeration, OracleError> {
    let all: Vec<Vec<usize>> = (0..gm.n_states()).map(|s| (0..gm.n_actions(s)).collect()).collect();
    let (best, optimal) = enumerate(gm, &all, budget, opts)?;
    let count = all
        .iter()
        .enumerate()
        .filter(|(s, _)| !gm.is_absorbing(*s))
        .map(|(_, a)| a.len() as u128)
        .product();
    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); gm.n_states()];
    for p in &optimal {
        for (s, &a) in p.iter().enumerate() {
            sets[s].push(a);
        }
    }
    Ok(Enumeration {
        result: OracleResult {
            values: ValueTable::new(gm.grid.clone(), best),
            policy: PolicyTable::from_sets(sets),
            converged: true,
            iterations: optimal.len(),
            change: 0.0,
        },
        optimal,
        count,
    })
}

/// min over selections h of `sets` of J(·, h) by brute force.
pub fn min_over_selections(
    gm: &GridModel,
    sets: &PolicyTable,
    budget: u128,
    opts: EvalOptions,
) -> Result<ValueTable, OracleError> {
    let (best, _) = enumerate(gm, &sets.sets, budget, opts)?;
    Ok(ValueTable::new(gm.grid.clone(), best))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{lq_model, GridOptions, TableModel};

    fn toy(rows: Vec<(f64, f64, f64, f64)>) -> GridModel {
        let rows = rows
            .into_iter()
            .map(|(x, u, y, c)| (vec![x], vec![u], vec![y], c))
            .collect();
        let t = TableModel::from_rows(1, 1, rows).unwrap();
        let grid = Arc::new(t.grid().clone());
        GridModel::build(Arc::new(t.into_model("toy", None)), grid, &GridOptions::default()).unwrap()
    }

    #[test]
    fn riccati_cases() {
        assert_eq!(riccati_lq(0.0, 1.0, 2.0, 1.0).unwrap(), 2.0);
        assert!(riccati_lq(0.5, 1.0, 0.0, 0.0).is_err());
        assert!(riccati_lq(1.5, 0.0, 1.0, 1.0).is_err());
        let p = riccati_lq(0.9, 1.0, 1.0, 1.0).unwrap();
        let mut f: f64 = 1.0;
        for _ in 0..200 {
            f = 1.0 + 0.81 * f - (0.9 * f).powi(2) / (1.0 + f);
        }
        assert!((p - f).abs() < 1e-10);
        // Closed form of the scalar equation for b = r = q = 1.
        let closed = (0.81 + (0.81f64.powi(2) + 4.0).sqrt()) / 2.0;
        assert!((p - closed).abs() < 1e-10);
    }

    #[test]
    fn dominance_toy() {
        // Node 1 can go home at cost 1 or via node 2 at cost 0 + 0.
        let gm = toy(vec![
            (0.0, 0.0, 0.0, 0.0),
            (1.0, 0.0, 0.0, 1.0),
            (1.0, 1.0, 2.0, 0.0),
            (2.0, 0.0, 0.0, 0.0),
            (2.0, 1.0, 1.0, 1.0),
        ]);
        let vi = value_iteration(&gm, EvalOptions::default(), 1e-9);
        assert_eq!(vi.values.values, vec![0.0, 0.0, 0.0]);
        assert_eq!(vi.policy.sets[1], vec![1]);
        assert_eq!(vi.policy.sets[2], vec![0]);
        assert_eq!(vi.bellman_residual(&gm), 0.0);
        let ex = exhaustive_policy_search(&gm, 100, EvalOptions::default()).unwrap();
        assert_eq!(ex.count, 4);
        assert_eq!(ex.result.values, vi.values);
        assert_eq!(ex.optimal, vec![vec![0, 1, 0]]);
    }

    #[test]
    fn budget_is_enforced() {
        let gm = toy(vec![(0.0, 0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 1.0), (1.0, 1.0, 0.0, 2.0)]);
        assert!(matches!(
            exhaustive_policy_search(&gm, 1, EvalOptions::default()),
            Err(OracleError::Budget { count: 2, budget: 1 })
        ));
    }

    #[test]
    fn lq_value_iteration_matches_riccati() {
        let b = lq_model(0.9, 1.0, 1.0, 1.0, -2.0, 2.0, -0.5).unwrap();
        let gm = b.grid_model().unwrap();
        let vi = value_iteration(&gm, EvalOptions::default(), 1e-9);
        assert!(vi.converged);
        let p = riccati_lq(0.9, 1.0, 1.0, 1.0).unwrap();
        for s in 0..gm.n_states() {
            let x = gm.grid.state(s)[0];
            if x.abs() >= 0.2 && x.abs() <= 1.6 {
                let want = p * x * x;
                assert!(
                    (vi.values.values[s] - want).abs() < 0.01 * want,
                    "x = {x}: {} vs {want}",
                    vi.values.values[s]
                );
            }
        }
        assert!(vi.bellman_residual(&gm) < 1e-9);
    }
}
