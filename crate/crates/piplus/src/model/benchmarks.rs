use std::sync::Arc;

use crate::funcs::MonotoneFn;

use super::{
    CertCase, Certificate, ExpConstants, Grid, GridModel, GridOptions, InputSet, ModelError, PolicyFn, SystemModel,
};

/// Lower input bound of the counterexample, U(x) = [−δ, 1].
pub const COUNTEREXAMPLE_DELTA: f64 = 0.01;
/// The state 18/7 where the first improvement step is set-valued.
pub const X_BAR: f64 = 18.0 / 7.0;

const TIE: f64 = 1e-9;

/// Scalar LQ data kept alongside an LQ benchmark for the Riccati oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LqParams {
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub r: f64,
    pub k0: f64,
    /// Closed-loop Lyapunov coefficient of the initial gain.
    pub p0: f64,
}

/// A model with its certificate, initial policy and default discretization.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub model: Arc<SystemModel>,
    pub cert: Certificate,
    pub h0: PolicyFnDebug,
    pub grid: Grid,
    pub options: GridOptions,
    pub exact: Option<CounterexampleExact>,
    pub lq: Option<LqParams>,
}

/// Initial feedback law; wrapped so [`Benchmark`] can derive `Debug`.
#[derive(Clone)]
pub struct PolicyFnDebug(pub PolicyFn);

impl std::fmt::Debug for PolicyFnDebug {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PolicyFn")
    }
}

impl Benchmark {
    pub fn with_grid(mut self, grid: Grid) -> Self {
        self.grid = grid;
        self
    }

    pub fn with_options(mut self, options: GridOptions) -> Self {
        self.options = options;
        self
    }

    pub fn grid_model(&self) -> Result<GridModel, ModelError> {
        GridModel::build(self.model.clone(), Arc::new(self.grid.clone()), &self.options)
    }

    pub fn h0(&self, x: &[f64]) -> Vec<f64> {
        (self.h0.0)(x)
    }
}

/// How a single input is picked from a set-valued policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SelectRule {
    /// Lowest input index.
    #[default]
    Lowest,
    /// Highest input index. On the counterexample this is the costly choice
    /// h¹(x̄) = 1.
    Adversarial,
    /// Uniform draw, seeded.
    Random { seed: u64 },
}

fn g1(u: f64) -> f64 {
    (2.0 * (1.0 - u)).clamp(0.0, 1.0)
}

fn g2(u: f64) -> f64 {
    (2.0 * u).clamp(0.0, 1.0)
}

fn ce_f(x: f64, u: f64) -> f64 {
    (1.0 - u) * (x.abs() - 1.0).max(0.0)
}

fn ce_ell(x: f64, u: f64) -> f64 {
    let a = x.abs();
    3.0 * a * g1(u) + (a + 1.75 * a * a) * g2(u)
}

/// J(x, h⁰) for h⁰ ≡ 0 as a function of s = |x|: 3|x|, 6|x| − 3, 9|x| − 9, …
pub fn counterexample_v0(s: f64) -> f64 {
    let s = s.abs();
    let n = s.ceil();
    3.0 * (n * s - n * (n - 1.0) / 2.0)
}

/// Inverse of [`counterexample_v0`] on [0, ∞).
pub fn counterexample_v0_inverse(y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    let mut n = 1.0_f64;
    while 1.5 * n * (n + 1.0) < y {
        n += 1.0;
    }
    y / (3.0 * n) + (n - 1.0) / 2.0
}

/// The scalar counterexample x⁺ = (1 − u)·max{0, |x| − 1} on U(x) = [−δ, 1],
/// with the certificate σ = |·|, W = ᾱ_W = 0, α_W = χ_W = 𝕀 and ᾱ_V = V⁰.
pub fn counterexample_model() -> Benchmark {
    let delta = COUNTEREXAMPLE_DELTA;
    let model = SystemModel::new(
        "counterexample",
        1,
        1,
        |x, u| vec![ce_f(x[0], u[0])],
        |x, u| ce_ell(x[0], u[0]),
        move |_| InputSet::interval(-delta, 1.0),
        |x| x[0].abs(),
    );
    let s_max = 4.0;
    let cert = Certificate {
        w: Arc::new(|_| 0.0),
        alpha_w: MonotoneFn::identity(s_max),
        chi_w: MonotoneFn::identity(s_max),
        abar_w: MonotoneFn::zero(s_max),
        abar_v: MonotoneFn::strict(counterexample_v0, s_max).with_inverse(counterexample_v0_inverse),
        case: CertCase::ChiLeqIdentity,
        exp: None,
    };
    Benchmark {
        model: Arc::new(model),
        cert,
        h0: PolicyFnDebug(Arc::new(|_| vec![0.0])),
        grid: Grid::uniform_1d(-4.0, 4.0, 2001).expect("static grid"),
        // 200 uniform samples miss u = 0, which h⁰ and the exact tie need.
        options: GridOptions {
            input_samples: 200,
            anchors: vec![vec![0.0]],
            ..GridOptions::default()
        },
        exact: Some(CounterexampleExact { delta }),
        lq: None,
    }
}

/// Scalar LQ plant x⁺ = a·x + b·u with ℓ = q·x² + r·u², inputs in
/// `[input_lo, input_hi]` and initial gain h⁰(x) = k0·x.
///
/// Certificate: σ = x², W = 0, α_W = 𝕀, χ_W = 𝕀/q, ᾱ_W = 0, ᾱ_V = p₀·𝕀 where
/// p₀ = (q + r·k0²)/(1 − (a + b·k0)²).
pub fn lq_model(
    a: f64,
    b: f64,
    q: f64,
    r: f64,
    input_lo: f64,
    input_hi: f64,
    k0: f64,
) -> Result<Benchmark, ModelError> {
    if !(q > 0.0) {
        return Err(ModelError::Config(format!("q must be positive, got {q}")));
    }
    if !(r >= 0.0) {
        return Err(ModelError::Config(format!("r must be nonnegative, got {r}")));
    }
    if !(input_lo <= input_hi) {
        return Err(ModelError::Config("empty input box".into()));
    }
    let cl = a + b * k0;
    if !(cl.abs() < 1.0) {
        return Err(ModelError::Config(format!(
            "initial gain {k0} is not stabilizing: |a + b·k0| = {}",
            cl.abs()
        )));
    }
    let p0 = (q + r * k0 * k0) / (1.0 - cl * cl);
    let model = SystemModel::new(
        "lq",
        1,
        1,
        move |x, u| vec![a * x[0] + b * u[0]],
        move |x, u| q * x[0] * x[0] + r * u[0] * u[0],
        move |_| InputSet::interval(input_lo, input_hi),
        |x| x[0] * x[0],
    );
    let s_max = 4.0;
    let cert = Certificate {
        w: Arc::new(|_| 0.0),
        alpha_w: MonotoneFn::identity(s_max),
        chi_w: MonotoneFn::linear(1.0 / q, s_max),
        abar_w: MonotoneFn::zero(s_max),
        abar_v: MonotoneFn::linear(p0, s_max),
        case: if q >= 1.0 {
            CertCase::ChiLeqIdentity
        } else {
            CertCase::General
        },
        exp: Some(ExpConstants {
            c_w: 1.0 / q,
            a_w: 1.0,
            abar_v: p0,
            abar_w: 0.0,
        }),
    };
    Ok(Benchmark {
        model: Arc::new(model),
        cert,
        h0: PolicyFnDebug(Arc::new(move |x| vec![k0 * x[0]])),
        grid: Grid::uniform_1d(-2.0, 2.0, 201).expect("static grid"),
        // Input pitch 0.01 keeps k0·x exact on the 0.02 state grid for k0 = −0.5.
        options: GridOptions {
            input_samples: 401,
            ..GridOptions::default()
        },
        exact: None,
        lq: Some(LqParams { a, b, q, r, k0, p0 }),
    })
}

/// Exact (grid-free) evaluation of the first PI and PI⁺ iterates of the
/// counterexample.
///
/// For a fixed x the objective u ↦ ℓ(x, u) + V⁰(f(x, u)) is piecewise linear
/// in u, because ℓ has kinks at u ∈ {0, ½, 1}, f is affine in u and V⁰ has
/// kinks at the integers. Its minimizers are therefore among finitely many
/// candidates, which makes H¹(x) computable exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CounterexampleExact {
    pub delta: f64,
}

impl CounterexampleExact {
    pub fn f(&self, x: f64, u: f64) -> f64 {
        ce_f(x, u)
    }

    pub fn ell(&self, x: f64, u: f64) -> f64 {
        ce_ell(x, u)
    }

    pub fn v0(&self, x: f64) -> f64 {
        counterexample_v0(x)
    }

    /// V⁰ by rolling out h⁰ ≡ 0; agrees with the closed form.
    pub fn v0_rollout(&self, x: f64) -> f64 {
        let mut x = x;
        let mut acc = 0.0;
        while x != 0.0 {
            acc += self.ell(x, 0.0);
            x = self.f(x, 0.0);
        }
        acc
    }

    fn candidates(&self, x: f64) -> Vec<f64> {
        let mut c = vec![-self.delta, 0.0, 0.5, 1.0];
        let reach = (x.abs() - 1.0).max(0.0);
        if reach > 0.0 {
            let top = ((1.0 + self.delta) * reach).floor() as i64;
            for b in 0..=top {
                let u = 1.0 - b as f64 / reach;
                if u >= -self.delta && u <= 1.0 {
                    c.push(u);
                }
            }
        }
        c.sort_by(f64::total_cmp);
        c.dedup();
        c
    }

    /// ℓ(x, u) + V(f(x, u)).
    pub fn objective(&self, x: f64, u: f64, v: impl Fn(f64) -> f64) -> f64 {
        self.ell(x, u) + v(self.f(x, u))
    }

    /// H¹(x) = argmin over U(x) of ℓ(x, u) + V⁰(f(x, u)), ascending. At the
    /// origin every input ties, which is reported as the two interval ends.
    pub fn h1_set(&self, x: f64) -> Vec<f64> {
        if x == 0.0 {
            return vec![-self.delta, 1.0];
        }
        let cand = self.candidates(x);
        let vals: Vec<f64> = cand.iter().map(|&u| self.objective(x, u, counterexample_v0)).collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        cand.into_iter()
            .zip(vals)
            .filter(|(_, v)| *v <= min + TIE * (1.0 + min.abs()))
            .map(|(u, _)| u)
            .collect()
    }

    fn pick(set: &[f64], rule: SelectRule, x: f64) -> f64 {
        match rule {
            SelectRule::Lowest => set[0],
            SelectRule::Adversarial => set[set.len() - 1],
            SelectRule::Random { seed } => {
                let h = x.to_bits().wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed;
                set[(h % set.len() as u64) as usize]
            }
        }
    }

    /// h¹(x) under a selection rule.
    pub fn h1(&self, x: f64, rule: SelectRule) -> f64 {
        Self::pick(&self.h1_set(x), rule, x)
    }

    /// V¹(x) = J(x, h¹) for the selection `rule`. Lowest gives V^{1′}
    /// (h¹(x̄) = 0), adversarial gives V¹ with h¹(x̄) = 1.
    pub fn v1(&self, x: f64, rule: SelectRule) -> f64 {
        let mut x = x;
        let mut acc = 0.0;
        for _ in 0..10_000 {
            if x == 0.0 {
                return acc;
            }
            let u = self.h1(x, rule);
            acc += self.ell(x, u);
            x = self.f(x, u);
        }
        f64::INFINITY
    }

    /// V_r¹(x) = min over selections of H¹ of J(x, ·).
    pub fn v1_min(&self, x: f64) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        self.h1_set(x)
            .into_iter()
            .map(|u| self.ell(x, u) + self.v1_min(self.f(x, u)))
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{stage_cost, step};

    #[test]
    fn counterexample_dynamics() {
        let b = counterexample_model();
        let m = &b.model;
        let y = step(m, &[X_BAR + 1.0], &[0.0]).unwrap()[0];
        assert!((y - X_BAR).abs() < 1e-15);
        for u in [-0.01, 0.0, 0.3, 1.0] {
            assert_eq!(step(m, &[0.0], &[u]).unwrap(), vec![0.0]);
            assert_eq!(stage_cost(m, &[0.0], &[u]).unwrap(), 0.0);
        }
    }

    #[test]
    fn counterexample_costs() {
        let b = counterexample_model();
        let m = &b.model;
        assert!((stage_cost(m, &[X_BAR], &[1.0]).unwrap() - 396.0 / 28.0).abs() < 1e-12);
        let two = stage_cost(m, &[X_BAR], &[0.0]).unwrap() + stage_cost(m, &[11.0 / 7.0], &[1.0]).unwrap();
        assert!((two - 381.0 / 28.0).abs() < 1e-12);
    }

    #[test]
    fn v0_pieces() {
        assert_eq!(counterexample_v0(0.5), 1.5);
        assert_eq!(counterexample_v0(1.5), 6.0);
        assert_eq!(counterexample_v0(2.5), 13.5);
        assert_eq!(counterexample_v0(-2.5), 13.5);
        for y in [0.0, 1.0, 3.0, 7.7, 13.5, 40.0] {
            let s = counterexample_v0_inverse(y);
            assert!((counterexample_v0(s) - y).abs() < 1e-12);
        }
        let ex = b_exact();
        assert!((ex.v0_rollout(X_BAR) - 99.0 / 7.0).abs() < 1e-12);
    }

    fn b_exact() -> CounterexampleExact {
        counterexample_model().exact.unwrap()
    }

    #[test]
    fn first_improvement_sets() {
        let ex = b_exact();
        assert_eq!(ex.h1_set(X_BAR), vec![0.0, 1.0]);
        assert_eq!(ex.h1_set(3.0), vec![0.0]);
        assert_eq!(ex.h1_set(1.3), vec![1.0]);
        assert_eq!(ex.h1_set(2.0), vec![0.0, 1.0]);
        assert!((ex.v1(X_BAR, SelectRule::Adversarial) - 396.0 / 28.0).abs() < 1e-12);
        assert!((ex.v1(X_BAR, SelectRule::Lowest) - 381.0 / 28.0).abs() < 1e-12);
        assert!((ex.v1_min(X_BAR) - 381.0 / 28.0).abs() < 1e-12);
    }

    #[test]
    fn lq_certificate_shape() {
        let b = lq_model(0.9, 1.0, 1.0, 1.0, -1.0, 1.0, -0.5).unwrap();
        let p0 = b.lq.unwrap().p0;
        assert!((p0 - 1.25 / 0.84).abs() < 1e-14);
        assert_eq!(b.cert.case, CertCase::ChiLeqIdentity);
        assert_eq!(step(&b.model, &[2.0], &[-1.0]).unwrap()[0], 0.8);
        assert_eq!(b.cert.abar_v.eval(0.0), 0.0);
        assert!(lq_model(0.9, 1.0, 1.0, 1.0, -1.0, 1.0, 0.5).is_err());
        assert!(lq_model(0.9, 1.0, 0.0, 1.0, -1.0, 1.0, -0.5).is_err());
    }
}
