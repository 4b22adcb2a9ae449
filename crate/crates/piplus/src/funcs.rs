//! Scalar comparison functions.
//!
//! A [`MonotoneFn`] is an evaluator on the nonnegative reals together with a
//! bracket hint used for numerical inversion. Class-K∞ functions, their
//! compositions, integrals and inverses are all represented this way, and
//! [`KLBound`] builds the two-argument decay bound β(s, k) on top of them.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use thiserror::Error;

/// Relative tolerance used by [`invert`].
pub const TOL_INV: f64 = 1e-10;
/// Relative tolerance used by [`integrate_rho`].
pub const TOL_QUAD: f64 = 1e-8;
/// Default number of points in the envelope grid of [`iterate_decay`].
pub const ENVELOPE_POINTS: usize = 512;
/// The inversion bracket may grow up to `s_max * BRACKET_GROWTH`.
pub const BRACKET_GROWTH: f64 = 1_048_576.0;

type Eval = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FuncError {
    #[error("value {y} outside the invertible range [{lo}, {hi}]")]
    OutOfBracket { y: f64, lo: f64, hi: f64 },
    #[error("composition overflows the outer bracket at s = {s} (inner value {value}, ceiling {ceiling})")]
    DomainOverflow { s: f64, value: f64, ceiling: f64 },
    #[error("non-finite evaluation at s = {s}")]
    NonFinite { s: f64 },
    #[error("decay map exceeds the identity at s = {s} (value {value})")]
    CertificateInconsistency { s: f64, value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Monotonicity {
    StrictlyIncreasing,
    NonDecreasing,
}

/// Nondecreasing scalar map on `[0, ∞)`.
#[derive(Clone)]
pub struct MonotoneFn {
    eval: Eval,
    inverse: Option<Eval>,
    s_max: f64,
    monotonicity: Monotonicity,
    zero_at_zero: bool,
    saturation: Option<Arc<AtomicBool>>,
}

impl fmt::Debug for MonotoneFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MonotoneFn")
            .field("s_max", &self.s_max)
            .field("monotonicity", &self.monotonicity)
            .field("zero_at_zero", &self.zero_at_zero)
            .field("closed_inverse", &self.inverse.is_some())
            .finish()
    }
}

impl MonotoneFn {
    pub fn new(eval: impl Fn(f64) -> f64 + Send + Sync + 'static, s_max: f64, monotonicity: Monotonicity) -> Self {
        let zero_at_zero = eval(0.0) == 0.0;
        MonotoneFn {
            eval: Arc::new(eval),
            inverse: None,
            s_max: if s_max > 0.0 { s_max } else { 1.0 },
            monotonicity,
            zero_at_zero,
            saturation: None,
        }
    }

    pub fn strict(eval: impl Fn(f64) -> f64 + Send + Sync + 'static, s_max: f64) -> Self {
        Self::new(eval, s_max, Monotonicity::StrictlyIncreasing)
    }

    /// Attach an exact inverse, used by [`invert`] in place of bisection.
    pub fn with_inverse(mut self, inv: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.inverse = Some(Arc::new(inv));
        self
    }

    pub fn identity(s_max: f64) -> Self {
        Self::linear(1.0, s_max)
    }

    /// s ↦ c·s. Strictly increasing for c > 0, the zero map for c = 0.
    pub fn linear(c: f64, s_max: f64) -> Self {
        assert!(c >= 0.0 && c.is_finite(), "slope must be finite and nonnegative");
        if c == 0.0 {
            return Self::zero(s_max);
        }
        Self::strict(move |s| c * s, s_max).with_inverse(move |y| y / c)
    }

    pub fn zero(s_max: f64) -> Self {
        Self::new(|_| 0.0, s_max, Monotonicity::NonDecreasing)
    }

    pub fn eval(&self, s: f64) -> f64 {
        (self.eval)(s)
    }

    pub fn try_eval(&self, s: f64) -> Result<f64, FuncError> {
        let v = (self.eval)(s);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(FuncError::NonFinite { s })
        }
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    /// Largest argument the inversion bracket may expand to.
    pub fn ceiling(&self) -> f64 {
        self.s_max * BRACKET_GROWTH
    }

    pub fn monotonicity(&self) -> Monotonicity {
        self.monotonicity
    }

    pub fn is_strict(&self) -> bool {
        self.monotonicity == Monotonicity::StrictlyIncreasing
    }

    pub fn zero_at_zero(&self) -> bool {
        self.zero_at_zero
    }

    pub fn has_closed_inverse(&self) -> bool {
        self.inverse.is_some()
    }

    /// True once an inverse built by [`MonotoneFn::inverse_fn`] had to clamp
    /// a query to the bracket ceiling.
    pub fn saturated(&self) -> bool {
        self.saturation
            .as_ref()
            .is_some_and(|flag| flag.load(Ordering::Relaxed))
    }

    pub fn with_s_max(mut self, s_max: f64) -> Self {
        if s_max > 0.0 {
            self.s_max = s_max;
        }
        self
    }

    /// s ↦ c·f(s).
    pub fn scale(&self, c: f64) -> Self {
        assert!(c >= 0.0 && c.is_finite());
        if c == 0.0 {
            return Self::zero(self.s_max);
        }
        let f = self.eval.clone();
        let mut out = MonotoneFn {
            eval: Arc::new(move |s| c * f(s)),
            inverse: None,
            ..self.clone()
        };
        if let Some(inv) = self.inverse.clone() {
            out.inverse = Some(Arc::new(move |y| inv(y / c)));
        }
        out
    }

    /// s ↦ f(c·s).
    pub fn prescale(&self, c: f64) -> Self {
        assert!(c > 0.0 && c.is_finite());
        let f = self.eval.clone();
        let mut out = MonotoneFn {
            eval: Arc::new(move |s| f(c * s)),
            inverse: None,
            s_max: self.s_max / c,
            ..self.clone()
        };
        if let Some(inv) = self.inverse.clone() {
            out.inverse = Some(Arc::new(move |y| inv(y) / c));
        }
        out
    }

    pub fn add(&self, other: &MonotoneFn) -> Self {
        let (f, g) = (self.eval.clone(), other.eval.clone());
        MonotoneFn {
            eval: Arc::new(move |s| f(s) + g(s)),
            inverse: None,
            s_max: self.s_max.max(other.s_max),
            monotonicity: strongest(self.monotonicity, other.monotonicity),
            zero_at_zero: self.zero_at_zero && other.zero_at_zero,
            saturation: None,
        }
    }

    /// Pointwise product; stays nondecreasing because both factors are nonnegative.
    pub fn mul(&self, other: &MonotoneFn) -> Self {
        let (f, g) = (self.eval.clone(), other.eval.clone());
        MonotoneFn {
            eval: Arc::new(move |s| f(s) * g(s)),
            inverse: None,
            s_max: self.s_max.max(other.s_max),
            monotonicity: weakest(self.monotonicity, other.monotonicity),
            zero_at_zero: self.zero_at_zero || other.zero_at_zero,
            saturation: None,
        }
    }

    pub fn min(&self, other: &MonotoneFn) -> Self {
        let (f, g) = (self.eval.clone(), other.eval.clone());
        MonotoneFn {
            eval: Arc::new(move |s| f(s).min(g(s))),
            inverse: None,
            s_max: self.s_max.max(other.s_max),
            monotonicity: weakest(self.monotonicity, other.monotonicity),
            zero_at_zero: self.zero_at_zero || other.zero_at_zero,
            saturation: None,
        }
    }

    /// Generalized inverse y ↦ inf{s : f(s) ≥ y}. Queries beyond the range
    /// are clamped to the bracket ceiling and recorded by [`Self::saturated`].
    pub fn inverse_fn(&self) -> Self {
        let f = self.clone();
        let flag = Arc::new(AtomicBool::new(false));
        let seen = flag.clone();
        let ceiling = self.ceiling();
        let forward = self.eval.clone();
        let top = self.eval(self.s_max);
        MonotoneFn {
            eval: Arc::new(move |y| match invert(&f, y) {
                Ok(s) => s,
                Err(_) => {
                    seen.store(true, Ordering::Relaxed);
                    if y <= 0.0 {
                        0.0
                    } else {
                        ceiling
                    }
                }
            }),
            inverse: Some(forward),
            s_max: if top.is_finite() && top > 0.0 { top } else { 1.0 },
            monotonicity: Monotonicity::StrictlyIncreasing,
            zero_at_zero: self.zero_at_zero,
            saturation: Some(flag),
        }
    }

    /// Nondecreasing envelope s ↦ max over ŝ ∈ [0, s] of max{g(ŝ), 0}, taken
    /// on a grid of `points` nodes spanning [0, s].
    pub fn envelope_of(g: impl Fn(f64) -> f64 + Send + Sync + 'static, s_max: f64, points: usize) -> Self {
        let n = points.max(2);
        Self::new(
            move |s| {
                if s <= 0.0 {
                    return g(0.0).max(0.0);
                }
                (0..n)
                    .map(|j| g(s * j as f64 / (n - 1) as f64).max(0.0))
                    .fold(0.0, f64::max)
            },
            s_max,
            Monotonicity::NonDecreasing,
        )
    }

    /// Curried ∫₀^s q.
    pub fn rho(q: &MonotoneFn) -> Self {
        let inner = q.clone();
        let strict = q.is_strict() || q.eval(q.s_max) > 0.0;
        Self::new(
            move |s| integrate_rho(&inner, s).unwrap_or(f64::NAN),
            q.s_max,
            if strict {
                Monotonicity::StrictlyIncreasing
            } else {
                Monotonicity::NonDecreasing
            },
        )
    }
}

fn strongest(a: Monotonicity, b: Monotonicity) -> Monotonicity {
    if a == Monotonicity::StrictlyIncreasing || b == Monotonicity::StrictlyIncreasing {
        Monotonicity::StrictlyIncreasing
    } else {
        Monotonicity::NonDecreasing
    }
}

fn weakest(a: Monotonicity, b: Monotonicity) -> Monotonicity {
    if a == Monotonicity::StrictlyIncreasing && b == Monotonicity::StrictlyIncreasing {
        Monotonicity::StrictlyIncreasing
    } else {
        Monotonicity::NonDecreasing
    }
}

/// f ∘ g. The inner function is sampled on its bracket to make sure it stays
/// within the outer function's maximal bracket.
pub fn compose(f: &MonotoneFn, g: &MonotoneFn) -> Result<MonotoneFn, FuncError> {
    const PROBES: usize = 65;
    let ceiling = f.ceiling();
    for j in 0..PROBES {
        let s = g.s_max * j as f64 / (PROBES - 1) as f64;
        let value = g.try_eval(s)?;
        if value > ceiling {
            return Err(FuncError::DomainOverflow { s, value, ceiling });
        }
    }
    let (fo, gi) = (f.eval.clone(), g.eval.clone());
    let inverse = match (&f.inverse, &g.inverse) {
        (Some(fi), Some(gi)) => {
            let (fi, gi) = (fi.clone(), gi.clone());
            Some(Arc::new(move |y| gi(fi(y))) as Eval)
        }
        _ => None,
    };
    Ok(MonotoneFn {
        eval: Arc::new(move |s| fo(gi(s))),
        inverse,
        s_max: g.s_max,
        monotonicity: weakest(f.monotonicity, g.monotonicity),
        zero_at_zero: f.zero_at_zero && g.zero_at_zero,
        saturation: None,
    })
}

/// Solve f(s) = y for s ≥ 0.
///
/// Uses the attached exact inverse when there is one, otherwise bisection on
/// `[0, s_max]` with the upper end doubled as needed up to [`MonotoneFn::ceiling`].
/// The returned point satisfies f(s) ≥ y, so bounds built from it err on the
/// conservative side.
pub fn invert(f: &MonotoneFn, y: f64) -> Result<f64, FuncError> {
    if !y.is_finite() {
        return Err(FuncError::NonFinite { s: y });
    }
    let f0 = f.try_eval(0.0)?;
    if y < f0 {
        return Err(FuncError::OutOfBracket {
            y,
            lo: f0,
            hi: f.eval(f.ceiling()),
        });
    }
    if y == f0 {
        return Ok(0.0);
    }
    if let Some(inv) = &f.inverse {
        let s = inv(y);
        return if s.is_finite() && s >= 0.0 {
            Ok(s)
        } else {
            Err(FuncError::NonFinite { s: y })
        };
    }
    let ceiling = f.ceiling();
    let mut hi = f.s_max;
    loop {
        let v = f.try_eval(hi)?;
        if v >= y {
            break;
        }
        if hi >= ceiling {
            return Err(FuncError::OutOfBracket { y, lo: f0, hi: v });
        }
        hi = (hi * 2.0).min(ceiling);
    }
    let mut lo = 0.0_f64;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f.try_eval(mid)? >= y {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// ∫₀^s q(τ) dτ by adaptive Simpson quadrature.
pub fn integrate_rho(q: &MonotoneFn, s: f64) -> Result<f64, FuncError> {
    if s <= 0.0 {
        return Ok(0.0);
    }
    let fa = q.try_eval(0.0)?;
    let fm = q.try_eval(0.5 * s)?;
    let fb = q.try_eval(s)?;
    let whole = s / 6.0 * (fa + 4.0 * fm + fb);
    simpson(q, 0.0, s, fa, fm, fb, whole, TOL_QUAD * whole.abs().max(1e-300), 48)
}

#[allow(clippy::too_many_arguments)]
fn simpson(
    q: &MonotoneFn,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    eps: f64,
    depth: u32,
) -> Result<f64, FuncError> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let flm = q.try_eval(lm)?;
    let frm = q.try_eval(rm)?;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        return Ok(left + right + delta / 15.0);
    }
    Ok(simpson(q, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1)?
        + simpson(q, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1)?)
}

fn decay_step(alpha: &MonotoneFn, s: f64) -> Result<f64, FuncError> {
    let a = alpha.try_eval(s)?;
    if a > s * (1.0 + 1e-12) + 1e-300 {
        return Err(FuncError::CertificateInconsistency { s, value: a });
    }
    Ok((s - a).max(0.0))
}

/// k-fold iterate of s ↦ max{s − α(s), 0}, wrapped in its nondecreasing
/// envelope over [0, s] (grid of [`ENVELOPE_POINTS`] nodes).
pub fn iterate_decay(alpha: &MonotoneFn, k: usize, s: f64) -> Result<f64, FuncError> {
    Ok(*decay_series(alpha, k, s, ENVELOPE_POINTS)?
        .last()
        .expect("series has k + 1 entries"))
}

/// Envelope values for every iteration count 0..=k at once.
pub fn decay_series(alpha: &MonotoneFn, k: usize, s: f64, points: usize) -> Result<Vec<f64>, FuncError> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(s.max(0.0));
    if k == 0 {
        return Ok(out);
    }
    if s <= 0.0 {
        out.resize(k + 1, 0.0);
        return Ok(out);
    }
    let n = points.max(2);
    let mut nodes: Vec<f64> = (0..n).map(|j| s * j as f64 / (n - 1) as f64).collect();
    nodes[n - 1] = s;
    let mut vals = nodes
        .iter()
        .map(|&x| decay_step(alpha, x))
        .collect::<Result<Vec<_>, _>>()?;
    // A nondecreasing one-step map keeps every iterate nondecreasing on
    // [0, s], so the envelope is simply the iterate at s.
    let monotone = vals.windows(2).all(|w| w[0] <= w[1]);
    if monotone {
        let mut x = vals[n - 1];
        out.push(x);
        for _ in 1..k {
            x = decay_step(alpha, x)?;
            out.push(x);
        }
        return Ok(out);
    }
    out.push(vals.iter().copied().fold(0.0, f64::max));
    for _ in 1..k {
        for v in vals.iter_mut() {
            *v = decay_step(alpha, *v)?;
        }
        out.push(vals.iter().copied().fold(0.0, f64::max));
    }
    Ok(out)
}

/// β(s, k): measure first, iteration count second.
#[derive(Clone, Debug)]
pub struct KLBound {
    kind: KlKind,
}

#[derive(Clone, Debug)]
enum KlKind {
    Generated {
        lower: MonotoneFn,
        upper: MonotoneFn,
        decay: MonotoneFn,
        points: usize,
    },
    Exponential {
        gain: f64,
        rate: f64,
    },
}

impl KLBound {
    /// β(s, k) = gain · rate^k · s.
    pub fn exponential(gain: f64, rate: f64) -> Self {
        KLBound {
            kind: KlKind::Exponential { gain, rate },
        }
    }

    pub fn is_exponential(&self) -> bool {
        matches!(self.kind, KlKind::Exponential { .. })
    }

    pub fn eval(&self, s: f64, k: usize) -> Result<f64, FuncError> {
        Ok(self.series(s, k)?[k])
    }

    /// [β(s, 0), …, β(s, k_max)].
    pub fn series(&self, s: f64, k_max: usize) -> Result<Vec<f64>, FuncError> {
        match &self.kind {
            KlKind::Exponential { gain, rate } => {
                let mut out = Vec::with_capacity(k_max + 1);
                let mut c = gain * s;
                for _ in 0..=k_max {
                    out.push(c);
                    c *= rate;
                }
                Ok(out)
            }
            KlKind::Generated {
                lower,
                upper,
                decay,
                points,
            } => {
                if s <= 0.0 {
                    return Ok(vec![0.0; k_max + 1]);
                }
                let top = upper.try_eval(s)?;
                decay_series(decay, k_max, top, *points)?
                    .into_iter()
                    .map(|y| invert(lower, y))
                    .collect()
            }
        }
    }

    /// s-map applied before the decay (ᾱ_Y for generated bounds).
    pub fn s_map(&self) -> Option<&MonotoneFn> {
        match &self.kind {
            KlKind::Generated { upper, .. } => Some(upper),
            KlKind::Exponential { .. } => None,
        }
    }

    pub fn decay(&self) -> Option<&MonotoneFn> {
        match &self.kind {
            KlKind::Generated { decay, .. } => Some(decay),
            KlKind::Exponential { .. } => None,
        }
    }
}

/// β(s, k) = α̲⁻¹(envelope of (𝕀 − α̃)^(k) evaluated at ᾱ(s)).
pub fn build_kl(lower: &MonotoneFn, upper: &MonotoneFn, decay: &MonotoneFn) -> KLBound {
    build_kl_with_grid(lower, upper, decay, ENVELOPE_POINTS)
}

pub fn build_kl_with_grid(lower: &MonotoneFn, upper: &MonotoneFn, decay: &MonotoneFn, points: usize) -> KLBound {
    KLBound {
        kind: KlKind::Generated {
            lower: lower.clone(),
            upper: upper.clone(),
            decay: decay.clone(),
            points,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn compose_identities() {
        let id = MonotoneFn::identity(10.0);
        let c = compose(&id, &id).unwrap();
        for s in [0.0, 1.0, 7.5] {
            assert_eq!(c.eval(s), s);
        }
        let dbl = MonotoneFn::linear(2.0, 10.0);
        let sq = MonotoneFn::strict(|s| s * s, 10.0);
        assert_eq!(compose(&dbl, &sq).unwrap().eval(3.0), 18.0);
    }

    #[test]
    fn compose_reports_overflow() {
        let f = MonotoneFn::identity(1.0);
        let g = MonotoneFn::strict(|s| s * 1e7, 1.0);
        match compose(&f, &g) {
            Err(FuncError::DomainOverflow { s, .. }) => assert!(s > 0.0),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn compose_with_integral_matches_fine_quadrature() {
        // ρ_V ∘ ᾱ_V with q_V = 2χ_W(2𝕀), χ_W = s ↦ s + s², ᾱ_V = 3𝕀.
        let chi = MonotoneFn::strict(|s| s + s * s, 10.0);
        let q_v = chi.prescale(2.0).scale(2.0);
        let rho_v = MonotoneFn::rho(&q_v);
        let abar = MonotoneFn::linear(3.0, 10.0);
        let c = compose(&rho_v, &abar).unwrap();
        for j in 1..=10 {
            let s = 0.37 * j as f64;
            // Composite trapezoid on a very fine grid of the closed form q(τ) = 4τ + 8τ².
            let top = 3.0 * s;
            let n = 200_000;
            let h = top / n as f64;
            let q = |t: f64| 4.0 * t + 8.0 * t * t;
            let mut acc = 0.5 * (q(0.0) + q(top));
            for i in 1..n {
                acc += q(i as f64 * h);
            }
            let oracle = acc * h;
            assert!(close(c.eval(s), oracle, 1e-8), "{} vs {}", c.eval(s), oracle);
        }
    }

    #[test]
    fn invert_examples() {
        let id = MonotoneFn::strict(|s| s, 1.0);
        assert!(close(invert(&id, 4.2).unwrap(), 4.2, 1e-12));
        let cube = MonotoneFn::strict(|s| s * s * s, 2.0);
        assert!((invert(&cube, 27.0).unwrap() - 3.0).abs() <= 1e-10);
        // χ_W = s/q with q = 2, query α_W(1)/2 = 1/2.
        let chi = MonotoneFn::strict(|s| s / 2.0, 5.0);
        assert!((invert(&chi, 0.5).unwrap() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn invert_out_of_range() {
        let sat = MonotoneFn::strict(|s| s / (1.0 + s), 1.0);
        match invert(&sat, 2.0) {
            Err(FuncError::OutOfBracket { lo, hi, .. }) => {
                assert_eq!(lo, 0.0);
                assert!(hi < 1.0);
            }
            other => panic!("{other:?}"),
        }
        let shifted = MonotoneFn::strict(|s| 1.0 + s, 1.0);
        assert!(invert(&shifted, 0.5).is_err());
    }

    #[test]
    fn inverse_fn_saturates_and_flags() {
        let sat = MonotoneFn::strict(|s| s / (1.0 + s), 1.0);
        let inv = sat.inverse_fn();
        assert!(!inv.saturated());
        assert!(close(inv.eval(0.5), 1.0, 1e-9));
        assert_eq!(inv.eval(3.0), sat.ceiling());
        assert!(inv.saturated());
    }

    #[test]
    fn integrals() {
        let id = MonotoneFn::identity(2.0);
        assert!(close(integrate_rho(&id, 1.0).unwrap(), 0.5, 1e-12));
        assert!(close(integrate_rho(&id, 2.0).unwrap(), 2.0, 1e-12));
        assert_eq!(integrate_rho(&MonotoneFn::zero(1.0), 3.0).unwrap(), 0.0);
        // χ_W = 𝕀 gives q_V = 4𝕀 and ∫₀¹ 4τ dτ = 2.
        let q_v = MonotoneFn::identity(1.0).prescale(2.0).scale(2.0);
        assert!(close(integrate_rho(&q_v, 1.0).unwrap(), 2.0, 1e-10));
        let bad = MonotoneFn::new(|s| if s > 0.5 { f64::NAN } else { s }, 1.0, Monotonicity::NonDecreasing);
        assert!(matches!(integrate_rho(&bad, 1.0), Err(FuncError::NonFinite { .. })));
    }

    #[test]
    fn decay_iterates() {
        let half = MonotoneFn::linear(0.5, 10.0);
        assert_eq!(iterate_decay(&half, 0, 3.3).unwrap(), 3.3);
        assert_eq!(iterate_decay(&half, 3, 8.0).unwrap(), 1.0);
        let too_big = MonotoneFn::linear(2.0, 10.0);
        assert!(matches!(
            iterate_decay(&too_big, 2, 1.0),
            Err(FuncError::CertificateInconsistency { .. })
        ));
    }

    #[test]
    fn decay_envelope_handles_nonmonotone_maps() {
        // s − α(s) rises to 0.5 at s = 0.5 and falls back to 0 at s = 1.
        let alpha = MonotoneFn::new(
            |s: f64| if s <= 0.5 { 0.0 } else { 2.0 * s - 1.0 },
            2.0,
            Monotonicity::NonDecreasing,
        );
        let v = iterate_decay(&alpha, 1, 1.0).unwrap();
        assert!((v - 0.5).abs() < 1e-2, "{v}");
        assert!(v >= alpha.eval(0.0));
    }

    #[test]
    fn kl_examples() {
        let id = MonotoneFn::identity(100.0);
        let half = MonotoneFn::linear(0.5, 100.0);
        let beta = build_kl(&id, &id, &half);
        for k in [0, 1, 10] {
            assert_eq!(beta.eval(0.0, k).unwrap(), 0.0);
        }
        for (s, k) in [(1.0, 0), (3.0, 2), (10.0, 5)] {
            let want = s * 0.5_f64.powi(k as i32);
            assert!(close(beta.eval(s, k).unwrap(), want, 1e-10));
        }
        let series = beta.series(5.0, 20).unwrap();
        assert!(series.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn exponential_bound_is_geometric() {
        let beta = KLBound::exponential(1.5, 0.25);
        let s = beta.series(2.0, 5).unwrap();
        assert_eq!(s[0], 3.0);
        for w in s.windows(2) {
            assert!(close(w[1] / w[0], 0.25, 1e-15));
        }
    }
}
