//! Plants, stage costs, certificates and their grid discretization.

mod benchmarks;
mod discrete;
mod grid;
mod table;
mod validate;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::funcs::MonotoneFn;

pub use benchmarks::{
    counterexample_model, counterexample_v0, counterexample_v0_inverse, lq_model, Benchmark, CounterexampleExact,
    LqParams, PolicyFnDebug, SelectRule, COUNTEREXAMPLE_DELTA, X_BAR,
};
pub use discrete::{GridModel, GridOptions};
pub use grid::{Grid, Stencil};
pub use table::TableModel;
pub use validate::{validate_assumptions, ValidationInput, ValidationReport, Violation};

pub type State = Vec<f64>;
pub type Input = Vec<f64>;

type Dyn = Arc<dyn Fn(&[f64], &[f64]) -> State + Send + Sync>;
type Cost = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type Inputs = Arc<dyn Fn(&[f64]) -> InputSet + Send + Sync>;
type Measure = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type StateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type PolicyFn = Arc<dyn Fn(&[f64]) -> Input + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dynamics returned a non-finite state at x = {x:?}, u = {u:?}")]
    Dynamics { x: State, u: Input },
    #[error("stage cost {value} is negative or non-finite at x = {x:?}, u = {u:?}")]
    Cost { x: State, u: Input, value: f64 },
    #[error("no admissible input at x = {x:?}")]
    EmptyInputs { x: State },
    #[error("configuration: {0}")]
    Config(String),
}

/// Admissible input set U(x).
#[derive(Clone, Debug, PartialEq)]
pub enum InputSet {
    /// Axis-aligned box, sampled uniformly per dimension.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Explicit finite set.
    Finite(Vec<Input>),
}

impl InputSet {
    pub fn interval(lo: f64, hi: f64) -> Self {
        InputSet::Box {
            lo: vec![lo],
            hi: vec![hi],
        }
    }

    /// Uniform samples with `m` points per box dimension. Unbounded boxes
    /// cannot be sampled and yield no samples.
    pub fn samples(&self, m: usize) -> Vec<Input> {
        match self {
            InputSet::Finite(v) => v.clone(),
            InputSet::Box { .. } if !self.is_bounded() => Vec::new(),
            InputSet::Box { lo, hi } => {
                let axes: Vec<Vec<f64>> = lo
                    .iter()
                    .zip(hi)
                    .map(|(&a, &b)| linspace(a, b, if a == b { 1 } else { m.max(2) }))
                    .collect();
                cartesian(&axes)
            }
        }
    }

    pub fn is_bounded(&self) -> bool {
        match self {
            InputSet::Finite(_) => true,
            InputSet::Box { lo, hi } => lo.iter().chain(hi).all(|v| v.is_finite()),
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            InputSet::Finite(v) => v.is_empty(),
            InputSet::Box { lo, hi } => lo.iter().zip(hi).any(|(a, b)| a > b),
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        match self {
            InputSet::Finite(v) => v.iter().any(|w| w.as_slice() == u),
            InputSet::Box { lo, hi } => u.iter().zip(lo.iter().zip(hi)).all(|(x, (a, b))| *x >= *a && *x <= *b),
        }
    }
}

pub(crate) fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![a];
    }
    let h = (b - a) / (n - 1) as f64;
    (0..n).map(|i| if i == n - 1 { b } else { a + h * i as f64 }).collect()
}

pub(crate) fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for prefix in &out {
            for &v in axis {
                let mut p = prefix.clone();
                p.push(v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

/// Plant x⁺ = f(x, u) with stage cost ℓ, input sets U and measure σ.
#[derive(Clone)]
pub struct SystemModel {
    pub name: String,
    pub n_x: usize,
    pub n_u: usize,
    dynamics: Dyn,
    cost: Cost,
    inputs: Inputs,
    measure: Measure,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("n_x", &self.n_x)
            .field("n_u", &self.n_u)
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        n_x: usize,
        n_u: usize,
        dynamics: impl Fn(&[f64], &[f64]) -> State + Send + Sync + 'static,
        cost: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        inputs: impl Fn(&[f64]) -> InputSet + Send + Sync + 'static,
        measure: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        SystemModel {
            name: name.into(),
            n_x,
            n_u,
            dynamics: Arc::new(dynamics),
            cost: Arc::new(cost),
            inputs: Arc::new(inputs),
            measure: Arc::new(measure),
        }
    }

    /// Replace the stage cost, keeping everything else.
    pub fn with_cost(mut self, cost: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.cost = Arc::new(cost);
        self
    }

    pub fn with_inputs(mut self, inputs: impl Fn(&[f64]) -> InputSet + Send + Sync + 'static) -> Self {
        self.inputs = Arc::new(inputs);
        self
    }

    /// f(x, u) without checks.
    pub fn f(&self, x: &[f64], u: &[f64]) -> State {
        (self.dynamics)(x, u)
    }

    /// ℓ(x, u) without checks.
    pub fn ell(&self, x: &[f64], u: &[f64]) -> f64 {
        (self.cost)(x, u)
    }

    pub fn inputs(&self, x: &[f64]) -> InputSet {
        (self.inputs)(x)
    }

    pub fn sigma(&self, x: &[f64]) -> f64 {
        (self.measure)(x)
    }
}

/// x⁺ = f(x, u), rejecting non-finite results.
pub fn step(model: &SystemModel, x: &[f64], u: &[f64]) -> Result<State, ModelError> {
    let next = model.f(x, u);
    if next.len() != model.n_x || next.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Dynamics {
            x: x.to_vec(),
            u: u.to_vec(),
        });
    }
    Ok(next)
}

/// ℓ(x, u), rejecting negative or non-finite values.
pub fn stage_cost(model: &SystemModel, x: &[f64], u: &[f64]) -> Result<f64, ModelError> {
    let value = model.ell(x, u);
    if !(value >= 0.0) || !value.is_finite() {
        return Err(ModelError::Cost {
            x: x.to_vec(),
            u: u.to_vec(),
            value,
        });
    }
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertCase {
    General,
    ChiLeqIdentity,
    Exponential,
}

/// Linear comparison constants: χ_W ≤ c_W·𝕀, α_W ≥ a_W·𝕀, ᾱ_V ≤ ā_V·𝕀, ᾱ_W ≤ ā_W·𝕀.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExpConstants {
    pub c_w: f64,
    pub a_w: f64,
    pub abar_v: f64,
    pub abar_w: f64,
}

/// Detectability function W with its comparison functions and the bound ᾱ_V
/// on the initial value function.
#[derive(Clone)]
pub struct Certificate {
    pub w: StateFn,
    pub alpha_w: MonotoneFn,
    pub chi_w: MonotoneFn,
    pub abar_w: MonotoneFn,
    pub abar_v: MonotoneFn,
    pub case: CertCase,
    pub exp: Option<ExpConstants>,
}

impl fmt::Debug for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Certificate")
            .field("case", &self.case)
            .field("exp", &self.exp)
            .finish()
    }
}

impl Certificate {
    pub fn w_at(&self, x: &[f64]) -> f64 {
        (self.w)(x)
    }
}

/// Value per grid node; `f64::INFINITY` marks nodes without a finite cost.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
}

impl ValueTable {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        assert_eq!(grid.len(), values.len());
        ValueTable { grid, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sup_diff(&self, other: &ValueTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f64::max)
    }
}

/// Set-valued policy on the grid: input indices per node plus a distinguished
/// selection. Indices refer to the node's input samples in [`GridModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    pub sets: Vec<Vec<usize>>,
    pub selection: Vec<usize>,
}

impl PolicyTable {
    /// Single-valued policy.
    pub fn singleton(selection: Vec<usize>) -> Self {
        PolicyTable {
            sets: selection.iter().map(|&a| vec![a]).collect(),
            selection,
        }
    }

    /// Selection defaults to the lowest index in each set. Sets are sorted.
    pub fn from_sets(mut sets: Vec<Vec<usize>>) -> Self {
        for s in sets.iter_mut() {
            s.sort_unstable();
            s.dedup();
        }
        let selection = sets.iter().map(|s| s.first().copied().unwrap_or(usize::MAX)).collect();
        PolicyTable { sets, selection }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn set_sizes(&self) -> Vec<usize> {
        self.sets.iter().map(Vec::len).collect()
    }

    pub fn all_nonempty(&self) -> bool {
        self.sets.iter().all(|s| !s.is_empty())
    }

    /// `self(x) ⊆ other(x)` for every node.
    pub fn is_subset_of(&self, other: &PolicyTable) -> bool {
        self.sets
            .iter()
            .zip(&other.sets)
            .all(|(a, b)| a.iter().all(|i| b.binary_search(i).is_ok()))
    }
}

/// Multilinear interpolation of a value table. Returns the value and whether
/// the query had to be clamped into the grid box. Corners carrying a zero
/// weight are skipped, so an infinite corner only matters when it is used.
pub fn interpolate(table: &ValueTable, x: &[f64]) -> (f64, bool) {
    let (stencil, clamped) = table.grid.stencil(x);
    (stencil.apply(&table.values), clamped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_samples() {
        let s = InputSet::interval(-1.0, 1.0).samples(5);
        assert_eq!(s, vec![vec![-1.0], vec![-0.5], vec![0.0], vec![0.5], vec![1.0]]);
        let b = InputSet::Box {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 2.0],
        };
        assert_eq!(b.samples(3).len(), 9);
    }

    #[test]
    fn step_and_cost_checks() {
        let m = SystemModel::new(
            "bad",
            1,
            1,
            |x, u| vec![x[0] / u[0]],
            |_, u| u[0] - 1.0,
            |_| InputSet::interval(0.0, 1.0),
            |x| x[0].abs(),
        );
        assert!(matches!(step(&m, &[1.0], &[0.0]), Err(ModelError::Dynamics { .. })));
        assert!(matches!(stage_cost(&m, &[1.0], &[0.0]), Err(ModelError::Cost { .. })));
        assert_eq!(step(&m, &[1.0], &[2.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn interpolation_basics() {
        let g = Arc::new(Grid::new(vec![0.0], vec![2.0], vec![3]).unwrap());
        let t = ValueTable::new(g, vec![2.0, 4.0, 10.0]);
        assert_eq!(interpolate(&t, &[1.0]), (4.0, false));
        assert_eq!(interpolate(&t, &[0.5]), (3.0, false));
        assert_eq!(interpolate(&t, &[5.0]), (10.0, true));
        let inf = ValueTable::new(t.grid.clone(), vec![2.0, f64::INFINITY, f64::INFINITY]);
        assert_eq!(interpolate(&inf, &[0.0]).0, 2.0);
        assert!(interpolate(&inf, &[1.5]).0.is_infinite());
    }

    #[test]
    fn policy_subset() {
        let a = PolicyTable::from_sets(vec![vec![1], vec![0, 2]]);
        let b = PolicyTable::from_sets(vec![vec![1, 0], vec![2, 0, 1]]);
        assert!(a.is_subset_of(&b));
        assert!(!b.is_subset_of(&a));
        assert_eq!(a.selection, vec![1, 0]);
    }
}
