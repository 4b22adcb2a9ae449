//! Explicit certificates: the Lyapunov sandwich and decrease functions, the
//! KL bound β, the near-optimality envelope α̃∘β and the stopping iteration.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::funcs::{build_kl, invert, FuncError, KLBound, MonotoneFn};
use crate::model::{CertCase, Certificate};

/// Samples used when checking χ_W ≤ 𝕀 and when scanning for i⋆.
const CASE_SAMPLES: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("certificate: {reason}")]
    Certificate { reason: String, s: Option<f64> },
    #[error(transparent)]
    Func(#[from] FuncError),
    #[error("target is zero at s = {s} > 0")]
    TargetUnreachable { s: f64 },
    #[error("no i ≤ {i_max} meets the target; worst s = {worst_s}")]
    NotFound { i_max: usize, worst_s: f64 },
}

/// Which column of the function table produced a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundCase {
    General,
    ChiLeqIdentity,
    Exponential,
}

/// ρ_V, ρ_W and the Lyapunov comparison functions α_Y, ᾱ_Y, α̲_Y.
#[derive(Clone, Debug)]
pub struct Lyapunov {
    pub case: BoundCase,
    pub rho_v: MonotoneFn,
    pub rho_w: MonotoneFn,
    pub alpha_y: MonotoneFn,
    pub abar_y: MonotoneFn,
    pub alpha_low_y: MonotoneFn,
}

/// First sampled s in (0, s_max] with χ_W(s) > s.
pub fn chi_exceeds_identity(cert: &Certificate, s_max: f64) -> Option<f64> {
    (1..=CASE_SAMPLES)
        .map(|j| s_max * j as f64 / CASE_SAMPLES as f64)
        .find(|&s| cert.chi_w.eval(s) > s * (1.0 + 1e-12))
}

/// Build ρ_V, ρ_W, α_Y, ᾱ_Y and α̲_Y for the declared case.
///
/// A declared χ_W ≤ 𝕀 is checked by sampling on (0, s_max]; a violation is
/// an error carrying the witness s.
pub fn build_lyapunov(cert: &Certificate, s_max: f64) -> Result<Lyapunov, BoundsError> {
    let chi_small = matches!(cert.case, CertCase::ChiLeqIdentity | CertCase::Exponential);
    if chi_small {
        if let Some(s) = chi_exceeds_identity(cert, s_max) {
            if cert.case == CertCase::ChiLeqIdentity {
                return Err(BoundsError::Certificate {
                    reason: format!("χ_W({s}) = {} exceeds s", cert.chi_w.eval(s)),
                    s: Some(s),
                });
            }
            return general_lyapunov(cert, s_max);
        }
        let id = MonotoneFn::identity(s_max);
        return Ok(Lyapunov {
            case: BoundCase::ChiLeqIdentity,
            rho_v: id.clone(),
            rho_w: id,
            alpha_y: cert.alpha_w.clone(),
            abar_y: cert.abar_v.add(&cert.abar_w),
            alpha_low_y: cert.alpha_w.clone(),
        });
    }
    general_lyapunov(cert, s_max)
}

fn general_lyapunov(cert: &Certificate, s_max: f64) -> Result<Lyapunov, BoundsError> {
    let chi = cert.chi_w.clone();
    let alpha_w = cert.alpha_w.clone();
    let abar_w = cert.abar_w.clone();
    let abar_v = cert.abar_v.clone();
    // q_V = 2χ_W(2𝕀).
    let q_v = chi.prescale(2.0).scale(2.0).with_s_max(s_max);
    // q_W = ½ [χ_W + (ᾱ_W + 𝕀) ∘ α_W⁻¹ ∘ 2χ_W]⁻¹.
    let alpha_w_inv = alpha_w.inverse_fn();
    let inner = {
        let (chi, aw_inv, abar_w) = (chi.clone(), alpha_w_inv.clone(), abar_w.clone());
        MonotoneFn::strict(
            move |s| {
                let t = aw_inv.eval(2.0 * chi.eval(s));
                chi.eval(s) + abar_w.eval(t) + t
            },
            s_max,
        )
    };
    let q_w = inner.inverse_fn().scale(0.5);
    let rho_v = MonotoneFn::rho(&q_v).with_s_max(abar_v.eval(s_max).max(s_max));
    let rho_w = MonotoneFn::rho(&q_w).with_s_max(abar_w.eval(s_max).max(s_max));
    let alpha_y = {
        let (q_w, alpha_w) = (q_w.clone(), alpha_w.clone());
        MonotoneFn::strict(
            move |s| {
                let a = 0.25 * alpha_w.eval(s);
                q_w.eval(a) * a
            },
            s_max,
        )
    };
    let abar_y = {
        let (rv, rw, av, aw) = (rho_v.clone(), rho_w.clone(), abar_v.clone(), abar_w.clone());
        MonotoneFn::strict(move |s| rv.eval(av.eval(s)) + rw.eval(aw.eval(s)), s_max)
    };
    let chi_inv = chi.inverse_fn();
    let alpha_low_y = {
        let (rv, rw, ci, aw) = (rho_v.clone(), rho_w.clone(), chi_inv, alpha_w);
        MonotoneFn::strict(
            move |s| {
                let h = 0.5 * aw.eval(s);
                rv.eval(ci.eval(h)).min(rw.eval(h))
            },
            s_max,
        )
    };
    Ok(Lyapunov {
        case: BoundCase::General,
        rho_v,
        rho_w,
        alpha_y,
        abar_y,
        alpha_low_y,
    })
}

/// β(s, k) = α̲_Y⁻¹((𝕀 − α̃_Y)^(k)(ᾱ_Y(s))) with α̃_Y = α_Y ∘ ᾱ_Y⁻¹.
pub fn stability_bound(lyap: &Lyapunov) -> KLBound {
    let decay = alpha_tilde_y(lyap);
    build_kl(&lyap.alpha_low_y, &lyap.abar_y, &decay)
}

/// α̃_Y = α_Y ∘ ᾱ_Y⁻¹.
pub fn alpha_tilde_y(lyap: &Lyapunov) -> MonotoneFn {
    let (a, abar) = (lyap.alpha_y.clone(), lyap.abar_y.clone());
    let top = abar.eval(abar.s_max());
    MonotoneFn::new(
        move |y| match invert(&abar, y) {
            Ok(s) => a.eval(s),
            Err(_) => a.eval(abar.ceiling()),
        },
        if top.is_finite() && top > 0.0 { top } else { 1.0 },
        crate::funcs::Monotonicity::NonDecreasing,
    )
}

/// Linear-rate constants ã_Y, ā_Y, a̲_Y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExpRates {
    pub a_y: f64,
    pub abar_y: f64,
    pub alow_y: f64,
    pub atilde_y: f64,
}

pub fn exp_rates(cert: &Certificate) -> Result<ExpRates, BoundsError> {
    let e = cert.exp.ok_or_else(|| BoundsError::Certificate {
        reason: "exponential constants are missing".into(),
        s: None,
    })?;
    let abar_y = e.abar_v + e.abar_w;
    let atilde = e.a_w / abar_y;
    if !(atilde > 0.0 && atilde < 1.0) {
        return Err(BoundsError::Certificate {
            reason: format!("ã_Y = {atilde} must lie in (0, 1)"),
            s: None,
        });
    }
    Ok(ExpRates {
        a_y: e.a_w,
        abar_y,
        alow_y: e.a_w,
        atilde_y: atilde,
    })
}

/// β(s, k) = (ā_Y / a̲_Y)(1 − ã_Y)^k s.
pub fn exp_bound(cert: &Certificate) -> Result<KLBound, BoundsError> {
    let r = exp_rates(cert)?;
    Ok(KLBound::exponential(r.abar_y / r.alow_y, 1.0 - r.atilde_y))
}

/// α̂ for the case at hand, clamped at zero.
pub fn alpha_hat(cert: &Certificate, lyap: &Lyapunov, use_exp: bool) -> Result<MonotoneFn, BoundsError> {
    let s_max = lyap.abar_y.s_max();
    if use_exp {
        let r = exp_rates(cert)?;
        let e = cert.exp.expect("checked by exp_rates");
        return Ok(MonotoneFn::linear(e.abar_v.min(r.abar_y - r.alow_y).max(0.0), s_max));
    }
    Ok(match lyap.case {
        BoundCase::ChiLeqIdentity | BoundCase::Exponential => {
            let (av, ay, al) = (cert.abar_v.clone(), lyap.abar_y.clone(), lyap.alpha_low_y.clone());
            MonotoneFn::new(
                move |s| av.eval(s).min(ay.eval(s) - al.eval(s)).max(0.0),
                s_max,
                crate::funcs::Monotonicity::NonDecreasing,
            )
        }
        BoundCase::General => {
            let (av, aw, abw) = (cert.abar_v.clone(), cert.alpha_w.clone(), cert.abar_w.clone());
            let chi_inv = cert.chi_w.inverse_fn();
            MonotoneFn::new(
                move |s| (av.eval(s) - chi_inv.eval((aw.eval(s) - abw.eval(s)).max(0.0))).max(0.0),
                s_max,
                crate::funcs::Monotonicity::NonDecreasing,
            )
        }
    })
}

/// The stability and near-optimality functions, built once from a certificate.
#[derive(Clone, Debug)]
pub struct BoundBundle {
    pub case: BoundCase,
    pub lyapunov: Lyapunov,
    pub alpha_tilde_y: MonotoneFn,
    pub beta: KLBound,
    pub alpha_hat: MonotoneFn,
    /// Nondecreasing envelope of α̂.
    pub alpha_tilde: MonotoneFn,
    pub s_max: f64,
    pub warnings: Vec<String>,
}

impl BoundBundle {
    /// Build from a certificate. A declared χ_W ≤ 𝕀 that fails the sampled
    /// check falls back to the general column with a warning. Exponential
    /// certificates use the linear-rate β and α̂.
    pub fn build(cert: &Certificate, s_max: f64) -> Result<Self, BoundsError> {
        let mut warnings = Vec::new();
        let lyapunov = match build_lyapunov(cert, s_max) {
            Ok(l) => l,
            Err(BoundsError::Certificate { reason, s: Some(s) }) => {
                warnings.push(format!("{reason}; using the general column (witness s = {s})"));
                general_lyapunov(cert, s_max)?
            }
            Err(e) => return Err(e),
        };
        let use_exp = cert.case == CertCase::Exponential;
        let (case, beta) = if use_exp {
            (BoundCase::Exponential, exp_bound(cert)?)
        } else {
            (lyapunov.case, stability_bound(&lyapunov))
        };
        let alpha_hat = alpha_hat(cert, &lyapunov, use_exp)?;
        let alpha_tilde = envelope(&alpha_hat, s_max);
        Ok(BoundBundle {
            case,
            alpha_tilde_y: alpha_tilde_y(&lyapunov),
            lyapunov,
            beta,
            alpha_hat,
            alpha_tilde,
            s_max,
            warnings,
        })
    }

    /// α̃(β(s, i)).
    pub fn near_opt(&self, s: f64, i: usize) -> Result<f64, BoundsError> {
        Ok(self.alpha_tilde.eval(self.beta.eval(s, i)?))
    }

    /// [α̃(β(s, 0)), …, α̃(β(s, i_max))].
    pub fn near_opt_series(&self, s: f64, i_max: usize) -> Result<Vec<f64>, BoundsError> {
        Ok(self
            .beta
            .series(s, i_max)?
            .into_iter()
            .map(|b| self.alpha_tilde.eval(b))
            .collect())
    }

    /// Y(x) = ρ_V(V(x)) + ρ_W(W(x)).
    pub fn lyapunov_value(&self, v: f64, w: f64) -> f64 {
        if !v.is_finite() {
            return f64::INFINITY;
        }
        self.lyapunov.rho_v.eval(v) + self.lyapunov.rho_w.eval(w)
    }
}

/// s ↦ max over ŝ ∈ [0, s] of g(ŝ). When g is nondecreasing on a dense
/// sample of [0, s_max] it is returned as is.
fn envelope(g: &MonotoneFn, s_max: f64) -> MonotoneFn {
    let n = 4 * CASE_SAMPLES;
    let vals: Vec<f64> = (0..=n).map(|j| g.eval(s_max * j as f64 / n as f64)).collect();
    if vals.windows(2).all(|w| w[0] <= w[1]) {
        return g.clone();
    }
    let inner = g.clone();
    MonotoneFn::envelope_of(move |s| inner.eval(s), s_max, crate::funcs::ENVELOPE_POINTS)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stopping {
    pub i_star: usize,
    /// The s in (0, Δ] that needed the most iterations.
    pub worst_s: f64,
}

/// Smallest i⋆ ≤ i_max with α̃(β(s, i⋆)) ≤ ε_target(s) on a dense grid of (0, Δ].
pub fn stopping_iteration(
    bundle: &BoundBundle,
    target: &dyn Fn(f64) -> f64,
    delta: f64,
    i_max: usize,
) -> Result<Stopping, BoundsError> {
    if delta <= 0.0 {
        return Ok(Stopping {
            i_star: 0,
            worst_s: 0.0,
        });
    }
    let mut worst = Stopping {
        i_star: 0,
        worst_s: delta,
    };
    for j in 1..=CASE_SAMPLES {
        let s = delta * j as f64 / CASE_SAMPLES as f64;
        let eps = target(s);
        if !(eps > 0.0) {
            return Err(BoundsError::TargetUnreachable { s });
        }
        let series = bundle.near_opt_series(s, i_max)?;
        // The last index after which the bound stays below the target.
        let i = match series.iter().rposition(|&b| b > eps) {
            None => 0,
            Some(p) if p == i_max => return Err(BoundsError::NotFound { i_max, worst_s: s }),
            Some(p) => p + 1,
        };
        if i > worst.i_star {
            worst = Stopping { i_star: i, worst_s: s };
        }
    }
    Ok(worst)
}

/// Lattice rows (s, k, β, α̃∘β), preceded by a `# i_star=N` line when given.
pub fn write_bounds_csv<W: Write>(
    mut out: W,
    bundle: &BoundBundle,
    s_values: &[f64],
    k_max: usize,
    i_star: Option<usize>,
) -> Result<(), BoundsError> {
    let io = |e: std::io::Error| BoundsError::Certificate {
        reason: format!("write: {e}"),
        s: None,
    };
    if let Some(i) = i_star {
        writeln!(out, "# i_star={i}").map_err(io)?;
    }
    writeln!(out, "s,k,beta,near_opt").map_err(io)?;
    for &s in s_values {
        let beta = bundle.beta.series(s, k_max)?;
        for (k, b) in beta.iter().enumerate() {
            writeln!(out, "{s},{k},{b},{}", bundle.alpha_tilde.eval(*b)).map_err(io)?;
        }
    }
    Ok(())
}
