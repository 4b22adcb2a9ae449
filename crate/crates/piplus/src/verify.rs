//! Closed-loop rollouts and the empirical checks run against them.
//!
//! Every check returns a [`CheckReport`] whose `worst_violation` is the
//! largest value of lhs − rhs − slack over all samples, so a report passes
//! iff that number is ≤ 0. The sample that attains it is the witness.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{BoundBundle, BoundsError};
use crate::funcs::{FuncError, KLBound};
use crate::model::{Certificate, GridModel, Input, PolicyTable, SelectRule, State, ValueTable};
use crate::pi::{evaluate_policy, pick, EvalOptions};

/// Relative slack added to every inequality.
pub const EPS_CHECK: f64 = 1e-6;
/// Points per dimension of the ball grid in adversarial perturbation mode.
pub const BALL_POINTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Witness {
    pub state: State,
    pub i: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub pass: bool,
    pub worst_violation: f64,
    pub witness: Option<Witness>,
    pub n_samples: usize,
}

impl CheckReport {
    /// Combine two reports of the same check.
    pub fn merge(self, other: CheckReport) -> CheckReport {
        let t = Tally::from_report(&self).join(Tally::from_report(&other));
        t.report(&self.check)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Running maximum of the excess with its witness.
#[derive(Clone, Debug, PartialEq)]
struct Tally {
    worst: f64,
    witness: Option<Witness>,
    n: usize,
}

impl Tally {
    fn empty() -> Self {
        Tally {
            worst: f64::NEG_INFINITY,
            witness: None,
            n: 0,
        }
    }

    fn one(excess: f64, witness: impl FnOnce() -> Witness) -> Self {
        let worst = if excess.is_nan() { f64::INFINITY } else { excess };
        Tally {
            worst,
            witness: Some(witness()),
            n: 1,
        }
    }

    fn from_report(r: &CheckReport) -> Self {
        Tally {
            worst: if r.n_samples == 0 {
                f64::NEG_INFINITY
            } else {
                r.worst_violation
            },
            witness: r.witness.clone(),
            n: r.n_samples,
        }
    }

    /// Keeps the left witness on ties, so reductions over indexed parallel
    /// iterators are deterministic.
    fn join(self, other: Tally) -> Tally {
        let n = self.n + other.n;
        if other.worst > self.worst {
            Tally { n, ..other }
        } else {
            Tally { n, ..self }
        }
    }

    fn report(self, check: &str) -> CheckReport {
        let worst = if self.n == 0 { 0.0 } else { self.worst };
        CheckReport {
            check: check.to_string(),
            pass: worst <= 0.0,
            worst_violation: worst,
            witness: self.witness,
            n_samples: self.n,
        }
    }
}

/// Largest change of a node function across the cells touching `s`.
fn cell_variation(gm: &GridModel, s: usize, g: impl Fn(usize) -> f64) -> f64 {
    let here = g(s);
    gm.grid
        .adjacent(s)
        .into_iter()
        .map(|t| (g(t) - here).abs())
        .filter(|d| d.is_finite())
        .fold(0.0, f64::max)
}

/// a − b with ∞ − ∞ = 0.
fn gap(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        a - b
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Absorbed,
    Horizon,
    OutOfGrid,
    /// The policy set at the nearest node was empty.
    NoInput,
}

/// How an input is taken from the policy set at the nearest node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutRule {
    /// The distinguished selection.
    Selection,
    /// Uniform over the set, seeded.
    Random { seed: u64 },
    /// The input in the set whose successor has the largest σ.
    MaxSigma,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutOptions {
    pub horizon: usize,
    pub rule: RolloutRule,
    /// End the trajectory once σ(x) ≤ σ_abs.
    pub stop_on_absorb: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            horizon: 50,
            rule: RolloutRule::Selection,
            stop_on_absorb: true,
        }
    }
}

/// States x_0..x_n with the inputs, stage costs and σ along the way.
/// `states` has one more entry than `inputs` and `costs`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub iteration: usize,
    pub states: Vec<State>,
    pub inputs: Vec<Input>,
    pub costs: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub termination: Termination,
}

impl Trajectory {
    fn start(gm: &GridModel, x0: &[f64]) -> Self {
        Trajectory {
            iteration: 0,
            states: vec![x0.to_vec()],
            inputs: Vec::new(),
            costs: Vec::new(),
            sigmas: vec![gm.model.sigma(x0)],
            termination: Termination::Horizon,
        }
    }

    pub fn x0(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    fn push(&mut self, gm: &GridModel, u: Input, cost: f64, next: State) {
        self.inputs.push(u);
        self.costs.push(cost);
        self.sigmas.push(gm.model.sigma(&next));
        self.states.push(next);
    }
}

struct Chooser {
    rule: RolloutRule,
    rng: Option<ChaCha8Rng>,
}

impl Chooser {
    fn new(rule: RolloutRule) -> Self {
        let rng = match rule {
            RolloutRule::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        Chooser { rule, rng }
    }

    /// Input from the policy set at the node nearest to `x`, applied at `x`.
    fn choose(&mut self, gm: &GridModel, policy: &PolicyTable, x: &[f64]) -> Option<Input> {
        let (node, _) = gm.grid.nearest(x);
        let set = &policy.sets[node];
        let a = match self.rule {
            RolloutRule::Selection => match policy.selection[node] {
                usize::MAX => return None,
                a => a,
            },
            _ if set.is_empty() => return None,
            RolloutRule::Random { .. } => {
                let rng = self.rng.as_mut().expect("seeded for the random rule");
                set[rng.gen_range(0..set.len())]
            }
            RolloutRule::MaxSigma => {
                let mut best = (f64::NEG_INFINITY, set[0]);
                for &a in set {
                    let v = gm.model.sigma(&gm.model.f(x, gm.input(node, a)));
                    if v > best.0 {
                        best = (v, a);
                    }
                }
                best.1
            }
        };
        Some(gm.input(node, a).to_vec())
    }
}

fn escaped(gm: &GridModel, x: &[f64]) -> bool {
    x.iter().any(|c| !c.is_finite()) || !gm.grid.contains(x)
}

/// x(k+1) = f(x(k), u(k)) with u(k) taken from the policy at the nearest
/// grid node. Stops at the horizon, on absorption (if asked), when the state
/// leaves the grid box (the escaped state is kept), or on an empty set.
pub fn rollout(gm: &GridModel, policy: &PolicyTable, x0: &[f64], opts: RolloutOptions) -> Trajectory {
    let mut t = Trajectory::start(gm, x0);
    let mut chooser = Chooser::new(opts.rule);
    let mut x = x0.to_vec();
    for _ in 0..opts.horizon {
        if opts.stop_on_absorb && gm.model.sigma(&x) <= gm.sigma_abs() {
            t.termination = Termination::Absorbed;
            return t;
        }
        let Some(u) = chooser.choose(gm, policy, &x) else {
            t.termination = Termination::NoInput;
            return t;
        };
        let next = gm.model.f(&x, &u);
        let cost = gm.model.ell(&x, &u);
        t.push(gm, u, cost, next.clone());
        if escaped(gm, &next) {
            t.termination = Termination::OutOfGrid;
            return t;
        }
        x = next;
    }
    if opts.stop_on_absorb && gm.model.sigma(&x) <= gm.sigma_abs() {
        t.termination = Termination::Absorbed;
    }
    t
}

/// One rollout per start node, in parallel; `iteration` labels the witnesses.
pub fn rollouts(
    gm: &GridModel,
    policy: &PolicyTable,
    starts: &[State],
    opts: RolloutOptions,
    iteration: usize,
) -> Vec<Trajectory> {
    starts
        .par_iter()
        .map(|x0| {
            let mut t = rollout(gm, policy, x0, opts);
            t.iteration = iteration;
            t
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    /// Uniform in the ball, seeded.
    Uniform { seed: u64 },
    /// Worst case over a grid on the ball: the pair of perturbations that
    /// maximizes σ of the next state.
    Adversarial,
}

/// Unit-ball grid with `BALL_POINTS` per dimension; points outside the ball
/// are pulled onto the sphere.
pub fn ball_grid(dim: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..BALL_POINTS)
        .map(|j| -1.0 + 2.0 * j as f64 / (BALL_POINTS - 1) as f64)
        .collect();
    let mut pts = vec![Vec::new()];
    for _ in 0..dim {
        pts = pts
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    for p in &mut pts {
        let n = p.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1.0 {
            p.iter_mut().for_each(|c| *c /= n);
        }
    }
    pts
}

fn uniform_ball(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        if p.iter().map(|c| c * c).sum::<f64>() <= 1.0 {
            return p;
        }
    }
}

fn shift(x: &[f64], r: f64, d: &[f64]) -> State {
    x.iter().zip(d).map(|(a, b)| a + r * b).collect()
}

/// Rollout of the ρ-perturbed inclusion: x̃ ∈ x + ρ(x)𝔹, υ = f(x̃, u) with u
/// from the policy at x̃, then the next state η ∈ υ + ρ(υ)𝔹. Where ρ is zero
/// the state is left untouched, so ρ ≡ 0 reproduces [`rollout`] exactly.
pub fn perturbed_rollout(
    gm: &GridModel,
    policy: &PolicyTable,
    rho: &(dyn Fn(&[f64]) -> f64 + Sync),
    x0: &[f64],
    opts: RolloutOptions,
    mode: Perturbation,
) -> Trajectory {
    let dim = x0.len();
    let ball = ball_grid(dim);
    let mut rng = match mode {
        Perturbation::Uniform { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Perturbation::Adversarial => None,
    };
    let mut t = Trajectory::start(gm, x0);
    let mut chooser = Chooser::new(opts.rule);
    let mut x = x0.to_vec();
    for _ in 0..opts.horizon {
        if opts.stop_on_absorb && gm.model.sigma(&x) <= gm.sigma_abs() {
            t.termination = Termination::Absorbed;
            return t;
        }
        let r = rho(&x);
        let step = match (&mut rng, r > 0.0) {
            (_, false) => chooser.choose(gm, policy, &x).map(|u| (x.clone(), u)),
            (Some(rng), true) => {
                let xt = shift(&x, r, &uniform_ball(rng, dim));
                chooser.choose(gm, policy, &xt).map(|u| (xt, u))
            }
            (None, true) => {
                // The x̃ whose successor is farthest out; the η step below
                // then maximizes σ again.
                let mut best: Option<(f64, State, Input)> = None;
                for d in &ball {
                    let xt = shift(&x, r, d);
                    if let Some(u) = chooser.choose(gm, policy, &xt) {
                        let v = gm.model.f(&xt, &u);
                        let worst = worst_over_ball(gm, &ball, &v, rho(&v));
                        if best.as_ref().is_none_or(|b| worst > b.0) {
                            best = Some((worst, xt, u));
                        }
                    }
                }
                best.map(|b| (b.1, b.2))
            }
        };
        let Some((xt, u)) = step else {
            t.termination = Termination::NoInput;
            return t;
        };
        let v = gm.model.f(&xt, &u);
        let cost = gm.model.ell(&xt, &u);
        let rv = rho(&v);
        let next = if rv > 0.0 {
            match &mut rng {
                Some(rng) => shift(&v, rv, &uniform_ball(rng, dim)),
                None => {
                    let d = ball
                        .iter()
                        .max_by(|a, b| {
                            let sa = gm.model.sigma(&shift(&v, rv, a));
                            let sb = gm.model.sigma(&shift(&v, rv, b));
                            sa.total_cmp(&sb)
                        })
                        .expect("ball grid is not empty");
                    shift(&v, rv, d)
                }
            }
        } else {
            v
        };
        t.push(gm, u, cost, next.clone());
        if escaped(gm, &next) {
            t.termination = Termination::OutOfGrid;
            return t;
        }
        x = next;
    }
    if opts.stop_on_absorb && gm.model.sigma(&x) <= gm.sigma_abs() {
        t.termination = Termination::Absorbed;
    }
    t
}

fn worst_over_ball(gm: &GridModel, ball: &[Vec<f64>], v: &[f64], r: f64) -> f64 {
    if r <= 0.0 {
        return gm.model.sigma(v);
    }
    ball.iter()
        .map(|d| gm.model.sigma(&shift(v, r, d)))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// σ(φ(k, x)) ≤ β(σ(x), k)·(1 + ε) for every recorded step.
pub fn check_kl_envelope(trajs: &[Trajectory], beta: &KLBound, eps: f64) -> Result<CheckReport, FuncError> {
    check_envelope("kl_envelope", trajs, beta, eps, 0.0)
}

fn check_envelope(
    name: &str,
    trajs: &[Trajectory],
    beta: &KLBound,
    eps: f64,
    delta: f64,
) -> Result<CheckReport, FuncError> {
    let tallies: Vec<Tally> = trajs
        .par_iter()
        .map(|t| {
            let series = beta.series(t.sigmas[0], t.sigmas.len() - 1)?;
            Ok(t.sigmas
                .iter()
                .zip(&series)
                .enumerate()
                .map(|(k, (&s, &b))| {
                    let lhs = (s - delta).max(0.0);
                    Tally::one(lhs - b * (1.0 + eps), || Witness {
                        state: t.x0().to_vec(),
                        i: t.iteration,
                        k,
                    })
                })
                .fold(Tally::empty(), Tally::join))
        })
        .collect::<Result<_, FuncError>>()?;
    Ok(tallies.into_iter().fold(Tally::empty(), Tally::join).report(name))
}

/// Per-node Y values, Y = ρ_V(V) + ρ_W(W); +∞ where V is.
fn y_values(gm: &GridModel, bundle: &BoundBundle, cert: &Certificate, values: &ValueTable) -> Vec<f64> {
    (0..gm.n_states())
        .into_par_iter()
        .map(|s| bundle.lyapunov_value(values.values[s], cert.w_at(&gm.grid.state(s))))
        .collect()
}

/// α̲_Y(σ(x)) ≤ Y(x) ≤ ᾱ_Y(σ(x)) at every non-absorbing node.
pub fn check_lyapunov_sandwich(
    gm: &GridModel,
    bundle: &BoundBundle,
    cert: &Certificate,
    values: &ValueTable,
    i: usize,
    eps: f64,
) -> CheckReport {
    let y = y_values(gm, bundle, cert, values);
    let l = &bundle.lyapunov;
    let lower: Vec<f64> = gm.sigmas().iter().map(|&s| l.alpha_low_y.eval(s)).collect();
    let upper: Vec<f64> = gm.sigmas().iter().map(|&s| l.abar_y.eval(s)).collect();
    (0..gm.n_states())
        .into_par_iter()
        .filter(|&s| !gm.is_absorbing(s))
        .map(|s| {
            let slack = eps * (1.0 + y[s].abs().min(f64::MAX));
            let lo = lower[s] - y[s] - slack - cell_variation(gm, s, |t| lower[t]);
            let hi = gap(y[s], upper[s]) - slack - cell_variation(gm, s, |t| upper[t]);
            Tally::one(lo.max(hi), || Witness {
                state: gm.grid.state(s),
                i,
                k: 0,
            })
        })
        .reduce(Tally::empty, Tally::join)
        .report("lyapunov_sandwich")
}

/// Y(υ) − Y(x) ≤ −α_Y(σ(x)) with υ = f(x, h(x)) for the distinguished
/// selection h of `policy`. Y(υ) uses the same interpolation as the solver.
pub fn check_lyapunov_decrease(
    gm: &GridModel,
    bundle: &BoundBundle,
    cert: &Certificate,
    values: &ValueTable,
    policy: &PolicyTable,
    i: usize,
    eps: f64,
) -> CheckReport {
    let y = y_values(gm, bundle, cert, values);
    let alpha: Vec<f64> = gm.sigmas().iter().map(|&s| bundle.lyapunov.alpha_y.eval(s)).collect();
    (0..gm.n_states())
        .into_par_iter()
        .filter(|&s| !gm.is_absorbing(s))
        .map(|s| {
            let witness = || Witness {
                state: gm.grid.state(s),
                i,
                k: 0,
            };
            let a = policy.selection[s];
            if a == usize::MAX {
                return Tally::one(f64::INFINITY, witness);
            }
            let v_next = gm.next_value(s, a, &values.values);
            let y_next = bundle.lyapunov_value(v_next, cert.w_at(gm.next_state(s, a)));
            let slack = eps * (1.0 + y[s].abs()) + cell_variation(gm, s, |t| alpha[t]);
            Tally::one(gap(y_next, y[s]) + alpha[s] - slack, witness)
        })
        .reduce(Tally::empty, Tally::join)
        .report("lyapunov_decrease")
}

/// The two near-optimality reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NearOptimality {
    /// V^i − V⋆ ≤ α̃(β(σ, i)).
    pub explicit: CheckReport,
    /// V^i − V⋆ ≤ (V⁰ − V⋆)(φ(i, ·, h⋆)).
    pub trajectory: CheckReport,
}

/// Both forms of the near-optimality bound for every iterate in `traces`
/// (indexed by iteration). φ(i, x, h⋆) is taken in the interpolation chain
/// of the grid, so the trajectory form compares against an expectation over
/// the stencil weights, which is what the grid values satisfy exactly.
pub fn check_near_optimality(
    gm: &GridModel,
    traces: &[ValueTable],
    v_star: &ValueTable,
    h_star: &PolicyTable,
    bundle: &BoundBundle,
    eps: f64,
) -> Result<NearOptimality, BoundsError> {
    let i_max = traces.len().saturating_sub(1);
    let n = gm.n_states();
    let vs = &v_star.values;
    let bounds: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| bundle.near_opt_series(gm.sigma_at(s), i_max))
        .collect::<Result<_, _>>()?;
    let mut explicit = Tally::empty();
    for (i, v) in traces.iter().enumerate() {
        let t = (0..n)
            .into_par_iter()
            .map(|s| {
                let b = bounds[s][i];
                let slack = eps * (1.0 + vs[s].abs() + b.abs()) + cell_variation(gm, s, |t| bounds[t][i]);
                Tally::one(gap(v.values[s], vs[s]) - b - slack, || Witness {
                    state: gm.grid.state(s),
                    i,
                    k: i,
                })
            })
            .reduce(Tally::empty, Tally::join);
        explicit = explicit.join(t);
    }
    let mut g: Vec<f64> = match traces.first() {
        Some(v0) => (0..n).map(|s| gap(v0.values[s], vs[s])).collect(),
        None => vec![0.0; n],
    };
    let mut trajectory = Tally::empty();
    for (i, v) in traces.iter().enumerate() {
        if i > 0 {
            g = (0..n)
                .into_par_iter()
                .map(|s| {
                    let a = h_star.selection[s];
                    if gm.is_absorbing(s) || a == usize::MAX {
                        g[s]
                    } else {
                        gm.next_value(s, a, &g)
                    }
                })
                .collect();
        }
        let t = (0..n)
            .into_par_iter()
            .map(|s| {
                let slack = eps * (1.0 + vs[s].abs() + g[s].abs());
                Tally::one(gap(v.values[s], vs[s]) - g[s] - slack, || Witness {
                    state: gm.grid.state(s),
                    i,
                    k: i,
                })
            })
            .reduce(Tally::empty, Tally::join);
        trajectory = trajectory.join(t);
    }
    Ok(NearOptimality {
        explicit: explicit.report("near_optimality_explicit"),
        trajectory: trajectory.report("near_optimality_trajectory"),
    })
}

/// V^{i+1} ≤ V^i node-wise, and, given V⋆, sup (V^i − V⋆) nonincreasing.
pub fn check_monotone(traces: &[ValueTable], v_star: Option<&ValueTable>, eps: f64) -> CheckReport {
    let mut tally = Tally::empty();
    for (i, w) in traces.windows(2).enumerate() {
        let (prev, next) = (&w[0].values, &w[1].values);
        let t = (0..prev.len())
            .into_par_iter()
            .map(|s| {
                Tally::one(
                    gap(next[s], prev[s]) - eps * (1.0 + prev[s].abs().min(f64::MAX)),
                    || Witness {
                        state: w[0].grid.state(s),
                        i: i + 1,
                        k: 0,
                    },
                )
            })
            .reduce(Tally::empty, Tally::join);
        tally = tally.join(t);
    }
    if let Some(vs) = v_star {
        let sup = |v: &ValueTable| {
            v.values
                .iter()
                .zip(&vs.values)
                .enumerate()
                .map(|(s, (&a, &b))| (gap(a, b), s))
                .fold((f64::NEG_INFINITY, 0), |acc, p| if p.0 > acc.0 { p } else { acc })
        };
        for (i, w) in traces.windows(2).enumerate() {
            let (a, _) = sup(&w[0]);
            let (b, s) = sup(&w[1]);
            tally = tally.join(Tally::one(gap(b, a) - eps * (1.0 + a.abs()), || Witness {
                state: w[1].grid.state(s),
                i: i + 1,
                k: 0,
            }));
        }
    }
    tally.report("monotone")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SameCost {
    pub report: CheckReport,
    /// Per node, the largest minus the smallest J over the selections tried.
    pub spread: Vec<f64>,
}

/// Evaluate J for the lowest, highest and `n_random` seeded selections of a
/// set-valued policy and report the node-wise spread against `tol`.
pub fn check_same_cost(
    gm: &GridModel,
    sets: &PolicyTable,
    tol: f64,
    n_random: usize,
    seed: u64,
    opts: EvalOptions,
) -> SameCost {
    let mut rules = vec![SelectRule::Lowest, SelectRule::Adversarial];
    rules.extend((0..n_random as u64).map(|j| SelectRule::Random {
        seed: seed.wrapping_add(j),
    }));
    let values: Vec<Vec<f64>> = rules
        .iter()
        .map(|&rule| {
            let selection = (0..gm.n_states()).map(|s| pick(&sets.sets[s], rule, s)).collect();
            let p = PolicyTable {
                sets: sets.sets.clone(),
                selection,
            };
            evaluate_policy(gm, &p, opts).table.values
        })
        .collect();
    let spread: Vec<f64> = (0..gm.n_states())
        .map(|s| {
            let hi = values.iter().map(|v| v[s]).fold(f64::NEG_INFINITY, f64::max);
            let lo = values.iter().map(|v| v[s]).fold(f64::INFINITY, f64::min);
            gap(hi, lo)
        })
        .collect();
    let mut tally = (0..gm.n_states())
        .map(|s| {
            Tally::one(spread[s] - tol, || Witness {
                state: gm.grid.state(s),
                i: 0,
                k: 0,
            })
        })
        .fold(Tally::empty(), Tally::join);
    tally.n *= rules.len();
    SameCost {
        report: tally.report("same_cost"),
        spread,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustOptions {
    /// Constant ρ levels, largest first.
    pub ladder: Vec<f64>,
    /// σ1 = max{σ − δ, 0}.
    pub delta: f64,
    /// Initial states are drawn from {σ < Δ}.
    pub big_delta: f64,
    pub trials: usize,
    pub horizon: usize,
    pub seed: u64,
    pub adversarial: bool,
    pub eps: f64,
}

impl Default for RobustOptions {
    fn default() -> Self {
        RobustOptions {
            ladder: vec![0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001, 0.0],
            delta: 0.01,
            big_delta: 1.0,
            trials: 1000,
            horizon: 50,
            seed: 0,
            adversarial: false,
            eps: EPS_CHECK,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelResult {
    pub rho: f64,
    pub report: CheckReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustReport {
    pub levels: Vec<LevelResult>,
    /// The largest ladder level whose trials all pass.
    pub margin: Option<f64>,
}

/// Initial states drawn uniformly from the grid box restricted to σ < Δ.
pub fn sample_starts(gm: &GridModel, big_delta: f64, count: usize, seed: u64) -> Vec<State> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (gm.grid.lo(), gm.grid.hi());
    let mut out = Vec::with_capacity(count);
    let mut tries = 0usize;
    while out.len() < count && tries < 1000 * count.max(1) {
        tries += 1;
        let x: State = lo.iter().zip(hi).map(|(&a, &b)| rng.gen_range(a..=b)).collect();
        if gm.model.sigma(&x) < big_delta {
            out.push(x);
        }
    }
    out
}

/// For each ρ level, perturbed rollouts from sampled starts must satisfy
/// max{σ(φ_ρ(k, x)) − δ, 0} ≤ β(σ(x), k). Perturbations act at every step,
/// so absorption does not end a trajectory here.
pub fn check_robust_stability(
    gm: &GridModel,
    policy: &PolicyTable,
    beta: &KLBound,
    opts: &RobustOptions,
    iteration: usize,
) -> Result<RobustReport, FuncError> {
    let starts = sample_starts(gm, opts.big_delta, opts.trials, opts.seed);
    let ro = RolloutOptions {
        horizon: opts.horizon,
        rule: RolloutRule::Selection,
        stop_on_absorb: false,
    };
    let mut levels = Vec::new();
    let mut margin = None;
    for &level in &opts.ladder {
        let rho = move |_: &[f64]| level;
        let trajs: Vec<Trajectory> = starts
            .par_iter()
            .enumerate()
            .map(|(j, x0)| {
                let mode = if opts.adversarial {
                    Perturbation::Adversarial
                } else {
                    Perturbation::Uniform {
                        seed: opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(j as u64),
                    }
                };
                let mut t = perturbed_rollout(gm, policy, &rho, x0, ro, mode);
                t.iteration = iteration;
                t
            })
            .collect();
        let report = check_envelope("robust_stability", &trajs, beta, opts.eps, opts.delta)?;
        if report.pass && margin.is_none() {
            margin = Some(level);
        }
        levels.push(LevelResult { rho: level, report });
    }
    Ok(RobustReport { levels, margin })
}

/// Columns k, x…, u…, cost, sigma; the final state has empty input and cost.
pub fn write_trajectory_csv<W: Write>(out: W, t: &Trajectory) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n_x = t.states[0].len();
    let n_u = t.inputs.first().map_or(0, |u| u.len());
    let mut header = vec!["k".to_string()];
    header.extend((0..n_x).map(|d| format!("x{d}")));
    header.extend((0..n_u).map(|d| format!("u{d}")));
    header.push("cost".into());
    header.push("sigma".into());
    w.write_record(&header)?;
    for (k, x) in t.states.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(x.iter().map(|c| c.to_string()));
        match t.inputs.get(k) {
            Some(u) => {
                rec.extend(u.iter().map(|c| c.to_string()));
                rec.push(t.costs[k].to_string());
            }
            None => {
                rec.extend((0..n_u).map(|_| String::new()));
                rec.push(String::new());
            }
        }
        rec.push(t.sigmas[k].to_string());
        w.write_record(&rec)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{counterexample_model, lq_model};

    fn lq() -> (crate::model::Benchmark, GridModel) {
        let b = lq_model(0.9, 1.0, 1.0, 1.0, -2.0, 2.0, -0.5).unwrap();
        let gm = b.grid_model().unwrap();
        (b, gm)
    }

    #[test]
    fn counterexample_zero_input_path() {
        let b = counterexample_model();
        let gm = b.grid_model().unwrap();
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let t = rollout(&gm, &h0, &[2.5], RolloutOptions::default());
        let xs: Vec<f64> = t.states.iter().map(|x| x[0]).collect();
        assert_eq!(xs, vec![2.5, 1.5, 0.5, 0.0]);
        assert_eq!(t.termination, Termination::Absorbed);
        let at_rest = rollout(&gm, &h0, &[0.0], RolloutOptions::default());
        assert_eq!(at_rest.states, vec![vec![0.0]]);
        assert_eq!(at_rest.total_cost(), 0.0);
    }

    #[test]
    fn lq_linear_recursion() {
        let (b, gm) = lq();
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let opts = RolloutOptions {
            horizon: 1,
            ..RolloutOptions::default()
        };
        for x0 in [-1.5, 0.4, 1.0, 2.0] {
            let t = rollout(&gm, &h0, &[x0], opts);
            assert!((t.states[1][0] - 0.4 * x0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rho_reproduces_rollout() {
        let (b, gm) = lq();
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let zero = |_: &[f64]| 0.0;
        for x0 in [-1.93, 0.5, 1.77] {
            for mode in [Perturbation::Uniform { seed: 3 }, Perturbation::Adversarial] {
                let a = rollout(&gm, &h0, &[x0], RolloutOptions::default());
                let p = perturbed_rollout(&gm, &h0, &zero, &[x0], RolloutOptions::default(), mode);
                assert_eq!(a, p);
            }
        }
    }

    #[test]
    fn seeded_perturbations_repeat() {
        let (b, gm) = lq();
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let rho = |_: &[f64]| 0.05;
        let opts = RolloutOptions {
            stop_on_absorb: false,
            ..RolloutOptions::default()
        };
        let a = perturbed_rollout(&gm, &h0, &rho, &[1.0], opts, Perturbation::Uniform { seed: 9 });
        let c = perturbed_rollout(&gm, &h0, &rho, &[1.0], opts, Perturbation::Uniform { seed: 9 });
        let d = perturbed_rollout(&gm, &h0, &rho, &[1.0], opts, Perturbation::Uniform { seed: 10 });
        assert_eq!(a, c);
        assert_ne!(a, d);
        assert_eq!(a.len(), 50);
    }

    #[test]
    fn ball_grid_shape() {
        let b1 = ball_grid(1);
        assert_eq!(b1.len(), 8);
        assert_eq!(b1[0], vec![-1.0]);
        assert_eq!(b1[7], vec![1.0]);
        let b2 = ball_grid(2);
        assert_eq!(b2.len(), 64);
        assert!(b2.iter().all(|p| p[0] * p[0] + p[1] * p[1] <= 1.0 + 1e-12));
    }

    #[test]
    fn kl_envelope_passes_and_planted_violation_fails() {
        let (b, gm) = lq();
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let bundle = BoundBundle::build(&b.cert, gm.max_sigma()).unwrap();
        let starts: Vec<State> = (0..gm.n_states()).step_by(2).map(|s| gm.grid.state(s)).collect();
        let trajs = rollouts(&gm, &h0, &starts, RolloutOptions::default(), 0);
        let rep = check_kl_envelope(&trajs, &bundle.beta, EPS_CHECK).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.n_samples > starts.len());
        let scaled = KLBound::exponential(0.01 * b.lq.unwrap().p0, 1.0 - 1.0 / b.lq.unwrap().p0);
        let bad = check_kl_envelope(&trajs, &scaled, EPS_CHECK).unwrap();
        assert!(!bad.pass);
        let w = bad.witness.clone().unwrap();
        // Re-running from the witness reproduces the violation.
        let again = rollouts(&gm, &h0, std::slice::from_ref(&w.state), RolloutOptions::default(), 0);
        let s = again[0].sigmas[w.k];
        assert!(s > scaled.eval(again[0].sigmas[0], w.k).unwrap());
        assert!(bad.to_json().contains("\"witness\""));
    }

    #[test]
    fn monotone_detects_planted_increase() {
        let (b, gm) = lq();
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let run = crate::piplus::run_piplus(&gm, &h0, 4, &Default::default()).unwrap();
        let mut tables: Vec<ValueTable> = run.traces.iter().map(|t| t.values.clone()).collect();
        assert!(check_monotone(&tables, None, EPS_CHECK).pass);
        tables[3].values[40] += 1.0;
        let rep = check_monotone(&tables, None, EPS_CHECK);
        assert!(!rep.pass);
        assert_eq!(rep.witness.unwrap().state, gm.grid.state(40));
        let flat = vec![tables[0].clone(), tables[0].clone()];
        let rep = check_monotone(&flat, Some(&tables[0]), EPS_CHECK);
        assert!(rep.pass);
        assert!(rep.worst_violation <= 0.0);
    }

    #[test]
    fn same_cost_of_singletons_is_zero() {
        let (b, gm) = lq();
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let sc = check_same_cost(&gm, &h0, 0.0, 2, 1, EvalOptions::default());
        assert!(sc.report.pass);
        assert!(sc.spread.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn trajectory_csv_layout() {
        let b = counterexample_model();
        let gm = b.grid_model().unwrap();
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        let t = rollout(&gm, &h0, &[2.5], RolloutOptions::default());
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,x0,u0,cost,sigma");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "3,0,,,0");
    }
}
