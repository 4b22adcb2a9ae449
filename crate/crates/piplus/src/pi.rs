//! Classical policy iteration on the grid, with a feasibility probe.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dp::{self, SolveOptions};
use crate::model::{
    interpolate, CounterexampleExact, GridModel, Input, PolicyTable, SelectRule, State, SystemModel, ValueTable, X_BAR,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub tol: f64,
    pub k_max: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tol: 1e-13,
            k_max: 100_000,
        }
    }
}

impl From<EvalOptions> for SolveOptions {
    fn from(o: EvalOptions) -> Self {
        SolveOptions {
            tol: o.tol,
            k_max: o.k_max,
        }
    }
}

/// Refinement ladder for [`lsc_gap`]: level l uses `base·factor^l` samples
/// per input dimension, for l = 1..=levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GapLadder {
    pub base: usize,
    pub factor: usize,
    pub levels: usize,
    /// Relative spread allowed between levels for the gap to count as stable.
    pub stable_within: f64,
}

impl Default for GapLadder {
    fn default() -> Self {
        GapLadder {
            base: 1608,
            factor: 8,
            levels: 3,
            stable_within: 0.05,
        }
    }
}

/// Closed-form V^i(x), when known, keyed by the iteration index.
pub type ExactValue = Arc<dyn Fn(usize, &[f64]) -> Option<f64> + Send + Sync>;

/// States at which the improvement step is probed for a missing minimum.
#[derive(Clone)]
pub struct FeasibilityProbe {
    pub states: Vec<State>,
    pub exact: Option<ExactValue>,
    pub ladder: GapLadder,
    /// Where the infimum is expected, if known.
    pub u_limit: Option<Input>,
}

impl std::fmt::Debug for FeasibilityProbe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeasibilityProbe")
            .field("states", &self.states)
            .field("exact", &self.exact.is_some())
            .field("ladder", &self.ladder)
            .finish()
    }
}

#[derive(Clone, Debug)]
pub struct PiOptions {
    pub eval: EvalOptions,
    pub eps_tie: f64,
    /// Stop once sup |V^{i+1} − V^i| falls below this; 0 runs every iteration.
    pub tol_stop: f64,
    pub select: SelectRule,
    pub probe: Option<FeasibilityProbe>,
}

impl Default for PiOptions {
    fn default() -> Self {
        PiOptions {
            eval: EvalOptions::default(),
            eps_tie: 1e-9,
            tol_stop: 0.0,
            select: SelectRule::Lowest,
            probe: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub table: ValueTable,
    pub converged: bool,
    pub sweeps: usize,
}

/// J(·, h) on the grid for the distinguished selection of `policy`.
///
/// The successor of a node is spread over its interpolation stencil, so J is
/// the expected cost of the induced chain, absorbed where σ ≤ σ_abs. Nodes
/// that cannot reach absorption get +∞.
pub fn evaluate_policy(gm: &GridModel, policy: &PolicyTable, opts: EvalOptions) -> Evaluation {
    let sets: Vec<Vec<usize>> = policy
        .selection
        .iter()
        .map(|&a| if a == usize::MAX { Vec::new() } else { vec![a] })
        .collect();
    let out = dp::solve(gm, &sets, opts.into());
    Evaluation {
        table: ValueTable::new(gm.grid.clone(), out.values),
        converged: out.converged,
        sweeps: out.sweeps,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Improvement {
    /// Argmin sets with the lowest index as selection.
    pub policy: PolicyTable,
    /// Minimal one-step objective per node.
    pub objective: Vec<f64>,
    /// Nodes where every objective is infinite.
    pub infeasible: Vec<usize>,
}

/// Per node, the sampled inputs whose objective ℓ + V∘f is within
/// `eps_tie·(1 + min)` of the minimum.
pub fn improve(gm: &GridModel, v: &ValueTable, eps_tie: f64) -> Improvement {
    let rows = dp::argmin_sets(gm, &v.values, None, eps_tie);
    split_rows(gm, rows)
}

pub(crate) fn split_rows(gm: &GridModel, rows: Vec<(Vec<usize>, f64)>) -> Improvement {
    let mut sets = Vec::with_capacity(rows.len());
    let mut objective = Vec::with_capacity(rows.len());
    let mut infeasible = Vec::new();
    for (s, (set, min)) in rows.into_iter().enumerate() {
        if set.is_empty() && !gm.is_absorbing(s) {
            infeasible.push(s);
        }
        sets.push(set);
        objective.push(min);
    }
    Improvement {
        policy: PolicyTable::from_sets(sets),
        objective,
        infeasible,
    }
}

/// Choose the distinguished selection of every non-empty set.
pub fn select(policy: &PolicyTable, rule: SelectRule) -> PolicyTable {
    let selection = policy
        .sets
        .par_iter()
        .enumerate()
        .map(|(s, set)| pick(set, rule, s))
        .collect();
    PolicyTable {
        sets: policy.sets.clone(),
        selection,
    }
}

pub(crate) fn pick(set: &[usize], rule: SelectRule, node: usize) -> usize {
    if set.is_empty() {
        return usize::MAX;
    }
    match rule {
        SelectRule::Lowest => set[0],
        SelectRule::Adversarial => set[set.len() - 1],
        SelectRule::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(node as u64);
            set[rng.gen_range(0..set.len())]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapLevel {
    pub samples: usize,
    pub inf: f64,
    pub argmin: Input,
    pub gap: f64,
}

/// Evidence that u ↦ ℓ(x, u) + V(f(x, u)) has no minimum at x.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapReport {
    pub state: State,
    pub u_limit: Input,
    /// Objective at the limit input.
    pub g_limit: f64,
    pub levels: Vec<GapLevel>,
    /// Gap at the finest level.
    pub gap: f64,
    /// The gap stayed within the ladder's relative spread across all levels.
    pub stable: bool,
}

impl GapReport {
    /// Stable and clearly positive gap.
    pub fn infeasible(&self) -> bool {
        self.stable && self.gap > 1e-6 * (1.0 + self.g_limit.abs())
    }

    pub fn inf(&self) -> f64 {
        self.levels.last().map_or(f64::NAN, |l| l.inf)
    }
}

/// Probe whether the improvement objective g(u) = ℓ(x, u) + V(f(x, u))
/// attains its infimum at `x`.
///
/// The infimum is estimated on the refinement ladder. The limit input is
/// `u_limit` when given, otherwise the finest-level argmin rounded to the
/// previous level's pitch. The gap at each level is g(u_limit) − inf.
pub fn lsc_gap(
    model: &SystemModel,
    v: &(dyn Fn(&[f64]) -> f64 + Sync),
    x: &[f64],
    ladder: GapLadder,
    u_limit: Option<&[f64]>,
) -> GapReport {
    let set = model.inputs(x);
    let g = |u: &[f64]| model.ell(x, u) + v(&model.f(x, u));
    let mut raw = Vec::with_capacity(ladder.levels);
    let mut m = ladder.base.max(2);
    let mut pitches = Vec::new();
    for _ in 0..ladder.levels {
        m = m.saturating_mul(ladder.factor.max(1)).min(1 << 22);
        let samples = set.samples(m);
        let (inf, argmin) = samples
            .par_iter()
            .map(|u| (g(u), u))
            .reduce_with(|a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a })
            .map(|(val, u)| (val, u.clone()))
            .unwrap_or((f64::INFINITY, Vec::new()));
        pitches.push(pitch(&set, m));
        raw.push((samples.len(), inf, argmin));
    }
    let u_lim: Input = match u_limit {
        Some(u) => u.to_vec(),
        None => {
            let last = raw.last().map(|r| r.2.clone()).unwrap_or_default();
            let p = if pitches.len() >= 2 {
                &pitches[pitches.len() - 2]
            } else {
                &pitches[0]
            };
            last.iter()
                .zip(p)
                .map(|(&u, &h)| if h > 0.0 { (u / h).round() * h } else { u })
                .collect()
        }
    };
    let g_limit = if u_lim.is_empty() { f64::INFINITY } else { g(&u_lim) };
    let levels: Vec<GapLevel> = raw
        .into_iter()
        .map(|(samples, inf, argmin)| GapLevel {
            samples,
            inf,
            argmin,
            gap: (g_limit - inf).max(0.0),
        })
        .collect();
    let gap = levels.last().map_or(0.0, |l| l.gap);
    let stable = !levels.is_empty()
        && levels
            .iter()
            .all(|l| (l.gap - gap).abs() <= ladder.stable_within * gap.abs());
    GapReport {
        state: x.to_vec(),
        u_limit: u_lim,
        g_limit,
        levels,
        gap,
        stable,
    }
}

fn pitch(set: &crate::model::InputSet, m: usize) -> Vec<f64> {
    match set {
        crate::model::InputSet::Box { lo, hi } => lo
            .iter()
            .zip(hi)
            .map(|(a, b)| (b - a) / (m.max(2) - 1) as f64)
            .collect(),
        crate::model::InputSet::Finite(v) => vec![0.0; v.first().map_or(0, Vec::len)],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Infeasibility {
    /// Every sampled input leads to an infinite objective.
    NoFiniteObjective,
    /// The objective's infimum is not attained (see [`lsc_gap`]).
    LscGap { report: GapReport },
}

/// Why and where an improvement step failed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeasibilityReport {
    /// Index of the iterate the failed improvement would have produced.
    pub iteration: usize,
    pub state: State,
    pub reason: Infeasibility,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiTrace {
    pub i: usize,
    pub values: ValueTable,
    /// H^i with selection h^i. For i = 0 this is the singleton h⁰.
    pub policy: PolicyTable,
    pub eval_converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiRun {
    pub traces: Vec<PiTrace>,
    pub feasibility: Option<FeasibilityReport>,
}

impl PiRun {
    pub fn last(&self) -> &PiTrace {
        self.traces.last().expect("a run holds at least V⁰")
    }
}

/// Algorithm loop: V⁰ = J(·, h⁰), then improve, select and evaluate for
/// `iters` iterations. Halts early on infeasibility or when the sup-norm
/// change drops below `tol_stop`.
pub fn run_pi(gm: &GridModel, h0: &PolicyTable, iters: usize, opts: &PiOptions) -> PiRun {
    let ev = evaluate_policy(gm, h0, opts.eval);
    let mut traces = vec![PiTrace {
        i: 0,
        values: ev.table,
        policy: h0.clone(),
        eval_converged: ev.converged,
    }];
    let mut feasibility = None;
    for i in 1..=iters {
        let prev = &traces[i - 1].values;
        if let Some(probe) = &opts.probe {
            if let Some(rep) = run_probe(gm, prev, i - 1, probe) {
                feasibility = Some(FeasibilityReport {
                    iteration: i,
                    state: rep.state.clone(),
                    reason: Infeasibility::LscGap { report: rep },
                });
                break;
            }
        }
        let imp = improve(gm, prev, opts.eps_tie);
        if let Some(&s) = imp.infeasible.first() {
            feasibility = Some(FeasibilityReport {
                iteration: i,
                state: gm.grid.state(s),
                reason: Infeasibility::NoFiniteObjective,
            });
            break;
        }
        let policy = select(&imp.policy, opts.select);
        let ev = evaluate_policy(gm, &policy, opts.eval);
        let change = ev.table.sup_diff(prev);
        traces.push(PiTrace {
            i,
            values: ev.table,
            policy,
            eval_converged: ev.converged,
        });
        if change < opts.tol_stop {
            break;
        }
    }
    PiRun { traces, feasibility }
}

/// Probe every state with V^i (closed form where available, else the table).
pub(crate) fn run_probe(gm: &GridModel, table: &ValueTable, i: usize, probe: &FeasibilityProbe) -> Option<GapReport> {
    for x in &probe.states {
        let exact = probe.exact.clone();
        let v = move |y: &[f64]| match exact.as_ref().and_then(|e| e(i, y)) {
            Some(val) => val,
            None => interpolate(table, y).0,
        };
        let rep = lsc_gap(&gm.model, &v, x, probe.ladder, probe.u_limit.as_deref());
        if rep.infeasible() {
            return Some(rep);
        }
    }
    None
}

/// One CSV row per (iteration, node): i, x…, V, u…, set size, plus any extra
/// integer columns.
pub(crate) fn write_rows<W: Write>(
    out: W,
    gm: &GridModel,
    extra_names: &[&str],
    rows: impl Iterator<Item = (usize, ValueTable, PolicyTable, Vec<Vec<usize>>)>,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["i".to_string()];
    header.extend((0..gm.model.n_x).map(|d| format!("x{d}")));
    header.push("v".into());
    header.extend((0..gm.model.n_u).map(|d| format!("u{d}")));
    header.push("set_size".into());
    header.extend(extra_names.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (i, values, policy, extra) in rows {
        for s in 0..gm.n_states() {
            let mut rec = vec![i.to_string()];
            rec.extend(gm.grid.state(s).iter().map(|c| c.to_string()));
            rec.push(values.values[s].to_string());
            match policy.selection[s] {
                usize::MAX => rec.extend((0..gm.model.n_u).map(|_| String::new())),
                a => rec.extend(gm.input(s, a).iter().map(|c| c.to_string())),
            }
            rec.push(policy.sets[s].len().to_string());
            rec.extend(extra.iter().map(|col| col[s].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()
}

/// Trace CSV with columns i, x…, v, u…, set_size.
pub fn write_trace_csv<W: Write>(out: W, gm: &GridModel, run: &PiRun) -> std::io::Result<()> {
    write_rows(
        out,
        gm,
        &[],
        run.traces
            .iter()
            .map(|t| (t.i, t.values.clone(), t.policy.clone(), Vec::new())),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PiSummary {
    pub iterations: usize,
    pub feasibility: Option<FeasibilityReport>,
    pub eval_converged: Vec<bool>,
    pub max_set_size: Vec<usize>,
}

impl PiRun {
    pub fn summary(&self) -> PiSummary {
        PiSummary {
            iterations: self.traces.len() - 1,
            feasibility: self.feasibility.clone(),
            eval_converged: self.traces.iter().map(|t| t.eval_converged).collect(),
            max_set_size: self
                .traces
                .iter()
                .map(|t| t.policy.set_sizes().into_iter().max().unwrap_or(0))
                .collect(),
        }
    }
}

/// Probe at x̄ + 1 for the counterexample, with V⁰ and V¹ in closed form
/// for the selection rule in use and the infimum expected at u = 0.
pub fn counterexample_probe(ex: CounterexampleExact, rule: SelectRule) -> FeasibilityProbe {
    let exact: ExactValue = Arc::new(move |i, y: &[f64]| match i {
        0 => Some(ex.v0(y[0])),
        1 => Some(ex.v1(y[0], rule)),
        _ => None,
    });
    FeasibilityProbe {
        states: vec![vec![X_BAR + 1.0]],
        exact: Some(exact),
        ladder: GapLadder::default(),
        u_limit: Some(vec![0.0]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{counterexample_model, lq_model, Grid, GridOptions};

    fn small_ce() -> GridModel {
        counterexample_model()
            .with_grid(Grid::uniform_1d(-4.0, 4.0, 401).unwrap())
            .grid_model()
            .unwrap()
    }

    #[test]
    fn v0_matches_piecewise_formula_on_nodes() {
        let b = counterexample_model();
        let gm = small_ce();
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let ev = evaluate_policy(&gm, &h0, EvalOptions::default());
        assert!(ev.converged);
        for s in 0..gm.n_states() {
            let x = gm.grid.state(s)[0];
            let want = if gm.is_absorbing(s) {
                0.0
            } else {
                crate::model::counterexample_v0(x)
            };
            assert!((ev.table.values[s] - want).abs() < 1e-9 * (1.0 + want), "x = {x}");
        }
    }

    #[test]
    fn lq_policy_value_is_quadratic() {
        let b = lq_model(0.9, 1.0, 1.0, 1.0, -2.0, 2.0, -0.5).unwrap();
        let gm = b.grid_model().unwrap();
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        for s in 0..gm.n_states() {
            assert!((gm.input(s, h0.selection[s])[0] - b.h0(&gm.grid.state(s))[0]).abs() < 1e-12);
        }
        let p0 = b.lq.unwrap().p0;
        let ev = evaluate_policy(&gm, &h0, EvalOptions::default());
        for s in 0..gm.n_states() {
            let x = gm.grid.state(s)[0];
            if x.abs() > 0.2 && x.abs() < 1.6 {
                let want = p0 * x * x;
                assert!((ev.table.values[s] - want).abs() < 0.01 * want, "x = {x}");
            }
        }
    }

    #[test]
    fn improve_ties_at_origin_and_single_far_right() {
        let gm = small_ce();
        let v0 = ValueTable::new(
            gm.grid.clone(),
            gm.grid
                .states()
                .iter()
                .map(|x| crate::model::counterexample_v0(x[0]))
                .collect(),
        );
        let imp = improve(&gm, &v0, 1e-9);
        let (origin, _) = gm.grid.nearest(&[0.0]);
        assert_eq!(imp.policy.sets[origin].len(), gm.n_actions(origin));
        let (three, _) = gm.grid.nearest(&[3.0]);
        assert_eq!(imp.policy.sets[three].len(), 1);
        assert_eq!(gm.input(three, imp.policy.selection[three]), &[0.0]);
    }

    #[test]
    fn selection_rules() {
        let p = PolicyTable::from_sets(vec![vec![3, 1, 2], vec![], vec![5]]);
        assert_eq!(select(&p, SelectRule::Lowest).selection, vec![1, usize::MAX, 5]);
        assert_eq!(select(&p, SelectRule::Adversarial).selection, vec![3, usize::MAX, 5]);
        let r1 = select(&p, SelectRule::Random { seed: 4 });
        let r2 = select(&p, SelectRule::Random { seed: 4 });
        assert_eq!(r1, r2);
        assert!(p.sets[0].contains(&r1.selection[0]));
    }

    #[test]
    fn gap_of_adversarial_v1() {
        let b = counterexample_model();
        let ex = CounterexampleExact { delta: 0.01 };
        let v1 = move |y: &[f64]| ex.v1(y[0], SelectRule::Adversarial);
        let rep = lsc_gap(&b.model, &v1, &[X_BAR + 1.0], GapLadder::default(), None);
        assert_eq!(rep.u_limit, vec![0.0]);
        assert!((rep.g_limit - 696.0 / 28.0).abs() < 1e-9);
        assert!(rep.stable && rep.infeasible());
        assert!((rep.gap - 15.0 / 28.0).abs() < 0.005 * 15.0 / 28.0);
        let v1p = move |y: &[f64]| ex.v1(y[0], SelectRule::Lowest);
        let rep = lsc_gap(&b.model, &v1p, &[X_BAR + 1.0], GapLadder::default(), Some(&[0.0]));
        assert!(rep.gap < 1e-9, "{rep:?}");
        assert!(!rep.infeasible());
    }

    #[test]
    fn continuous_objective_has_no_gap() {
        let b = lq_model(0.9, 1.0, 1.0, 1.0, -2.0, 2.0, -0.5).unwrap();
        let v = |y: &[f64]| 1.5 * y[0] * y[0];
        let rep = lsc_gap(&b.model, &v, &[1.3], GapLadder::default(), None);
        assert!(rep.gap < 1e-6, "{rep:?}");
        assert!(!rep.infeasible());
    }

    #[test]
    fn adversarial_pi_halts_at_iteration_two() {
        let b = counterexample_model();
        let gm = small_ce();
        let ex = b.exact.unwrap();
        let exact: ExactValue = Arc::new(move |i, y: &[f64]| match i {
            0 => Some(ex.v0(y[0])),
            1 => Some(ex.v1(y[0], SelectRule::Adversarial)),
            _ => None,
        });
        let opts = PiOptions {
            select: SelectRule::Adversarial,
            probe: Some(FeasibilityProbe {
                states: vec![vec![X_BAR + 1.0]],
                exact: Some(exact),
                ladder: GapLadder::default(),
                u_limit: Some(vec![0.0]),
            }),
            ..PiOptions::default()
        };
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let run = run_pi(&gm, &h0, 5, &opts);
        let rep = run.feasibility.expect("PI must stall");
        assert_eq!(rep.iteration, 2);
        assert_eq!(run.traces.len(), 2);
    }

    #[test]
    fn trace_csv_layout() {
        let grid = Grid::uniform_1d(-1.0, 1.0, 3).unwrap();
        let b = lq_model(0.9, 1.0, 1.0, 1.0, -1.0, 1.0, -0.5)
            .unwrap()
            .with_grid(grid)
            .with_options(GridOptions {
                input_samples: 5,
                ..GridOptions::default()
            });
        let gm = b.grid_model().unwrap();
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let run = run_pi(&gm, &h0, 1, &PiOptions::default());
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &gm, &run).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "i,x0,v,u0,set_size");
        assert_eq!(lines.len(), 1 + 2 * 3);
    }
}
