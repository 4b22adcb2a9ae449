use serde::Serialize;

use super::{Certificate, Grid, InputSet, State, SystemModel};

/// One failed sampled assumption.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub check: &'static str,
    pub state: State,
    pub input: Option<Vec<f64>>,
    /// Amount by which the inequality fails (or the offending value).
    pub magnitude: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_samples: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, check: &str) -> usize {
        self.violations.iter().filter(|v| v.check == check).count()
    }
}

/// What to sample in [`validate_assumptions`].
pub struct ValidationInput<'a> {
    pub states: Vec<State>,
    /// Samples per input dimension for bounded boxes.
    pub input_samples: usize,
    /// Initial value function, checked against ᾱ_V ∘ σ when present.
    pub v0: Option<&'a (dyn Fn(&[f64]) -> f64 + Sync)>,
    /// Extra absolute slack allowed in the V⁰ check, per state.
    pub v0_slack: Option<&'a (dyn Fn(&[f64]) -> f64 + Sync)>,
    /// Level Δ whose sublevel set {σ ≤ Δ} must stay inside the grid box.
    pub level: Option<(f64, &'a Grid)>,
    /// Relative tolerance for the certificate inequalities.
    pub eps: f64,
}

impl<'a> ValidationInput<'a> {
    pub fn on_grid(grid: &Grid) -> Self {
        ValidationInput {
            states: grid.states(),
            input_samples: 21,
            v0: None,
            v0_slack: None,
            level: None,
            eps: 1e-9,
        }
    }
}

fn excess(lhs: f64, rhs: f64, eps: f64) -> f64 {
    lhs - rhs - eps * (1.0 + rhs.abs())
}

/// Sampled checks of the standing assumptions: ℓ ≥ 0, U(x) ≠ ∅, finite
/// dynamics, the detectability inequalities for W, the bound on V⁰, level
/// boundedness of ℓ in u, and boundedness of {σ ≤ Δ} within the grid.
pub fn validate_assumptions(model: &SystemModel, cert: &Certificate, input: &ValidationInput<'_>) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let mut push = |check, state: &[f64], u: Option<&[f64]>, magnitude| {
        rep.violations.push(Violation {
            check,
            state: state.to_vec(),
            input: u.map(<[f64]>::to_vec),
            magnitude,
        })
    };
    let mut n = 0;
    for x in &input.states {
        let set = model.inputs(x);
        if set.is_empty() {
            push("inputs_nonempty", x, None, 0.0);
            continue;
        }
        let sig = model.sigma(x);
        let w_x = cert.w_at(x);
        let e = excess(w_x, cert.abar_w.eval(sig), input.eps);
        if e > 0.0 {
            push("w_upper_bound", x, None, e);
        }
        if let Some(v0) = input.v0 {
            let slack = input.v0_slack.map_or(0.0, |f| f(x));
            let e = excess(v0(x), cert.abar_v.eval(sig) + slack, input.eps);
            if e > 0.0 {
                push("v0_upper_bound", x, None, e);
            }
        }
        if !set.is_bounded() {
            if let Some(m) = unbounded_level_gap(model, x, &set) {
                push("level_bounded", x, None, m);
            }
        }
        for u in set.samples(input.input_samples) {
            n += 1;
            let cost = model.ell(x, &u);
            if !(cost >= 0.0) || !cost.is_finite() {
                push("cost_nonnegative", x, Some(&u), cost);
                continue;
            }
            let y = model.f(x, &u);
            if y.iter().any(|v| !v.is_finite()) {
                push("dynamics_finite", x, Some(&u), f64::NAN);
                continue;
            }
            let lhs = cert.w_at(&y) - w_x;
            let rhs = -cert.alpha_w.eval(sig) + cert.chi_w.eval(cost);
            let e = excess(lhs, rhs, input.eps);
            if e > 0.0 {
                push("detectability", x, Some(&u), e);
            }
        }
    }
    if let Some((delta, grid)) = input.level {
        for i in 0..grid.len() {
            let multi = grid.multi_index(i);
            let on_face = multi
                .iter()
                .zip(grid.resolution())
                .any(|(&j, &nd)| nd > 1 && (j == 0 || j + 1 == nd));
            if on_face {
                let x = grid.state(i);
                let s = model.sigma(&x);
                if s <= delta {
                    push("sublevel_inside_grid", &x, None, delta - s);
                }
            }
        }
    }
    rep.n_samples = n;
    rep
}

/// For an unbounded input box, ℓ must grow along every axis direction.
/// Returns the shortfall when it does not.
fn unbounded_level_gap(model: &SystemModel, x: &[f64], set: &InputSet) -> Option<f64> {
    let InputSet::Box { lo, hi } = set else {
        return None;
    };
    let base: Vec<f64> = lo
        .iter()
        .zip(hi)
        .map(|(&a, &b)| {
            if a.is_finite() && b.is_finite() {
                0.5 * (a + b)
            } else {
                0.0f64.clamp(a, b)
            }
        })
        .collect();
    let l0 = model.ell(x, &base);
    let mut worst: Option<f64> = None;
    for d in 0..base.len() {
        for (sign, open) in [(-1.0, lo[d].is_infinite()), (1.0, hi[d].is_infinite())] {
            if !open {
                continue;
            }
            let mut u = base.clone();
            u[d] += sign * 1e4;
            let grown = model.ell(x, &u) - l0;
            if grown < 1.0 {
                worst = Some(worst.map_or(1.0 - grown, |w: f64| w.max(1.0 - grown)));
            }
        }
    }
    worst
}
