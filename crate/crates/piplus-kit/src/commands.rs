use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use piplus::bounds::{stopping_iteration, write_bounds_csv, BoundBundle, Stopping};
use piplus::model::{
    counterexample_model, lq_model, Benchmark, CertCase, Certificate, CounterexampleExact, Grid, GridModel,
    GridOptions, PolicyTable, SelectRule, TableModel, ValueTable, X_BAR,
};
use piplus::oracle::value_iteration;
use piplus::pi::{self, counterexample_probe, lsc_gap, run_pi, EvalOptions, GapLadder, PiOptions};
use piplus::piplus::{self as pip, run_piplus, PiPlusError, PiPlusOptions};
use piplus::verify::{
    check_kl_envelope, check_lyapunov_decrease, check_lyapunov_sandwich, check_monotone, check_near_optimality,
    rollouts, write_trajectory_csv, CheckReport, RolloutOptions,
};

use crate::config::{Algo, ModelConfig, Scenario, Select};

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Check(String),
    Feasibility(String),
    Io(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Check(_) => 3,
            Failure::Feasibility(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
            Failure::Feasibility(m) => write!(f, "feasibility: {m}"),
            Failure::Io(m) => write!(f, "io: {m}"),
        }
    }
}

fn io(e: impl std::fmt::Display) -> Failure {
    Failure::Io(e.to_string())
}

fn config(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

struct Setup {
    gm: GridModel,
    h0: PolicyTable,
    cert: Option<Certificate>,
    exact: Option<CounterexampleExact>,
}

fn benchmark(sc: &Scenario) -> Result<Option<Benchmark>, Failure> {
    Ok(match &sc.model {
        ModelConfig::Counterexample {} => Some(counterexample_model()),
        ModelConfig::Lq {
            a,
            b,
            q,
            r,
            k0,
            input_lo,
            input_hi,
        } => Some(lq_model(*a, *b, *q, *r, *input_lo, *input_hi, *k0).map_err(config)?),
        ModelConfig::Table { .. } => None,
    })
}

fn grid_options(sc: &Scenario, base: GridOptions) -> GridOptions {
    GridOptions {
        input_samples: sc.grid.input_samples.unwrap_or(base.input_samples),
        sigma_abs: sc.grid.sigma_abs.or(base.sigma_abs),
        anchors: base.anchors,
    }
}

fn grid(sc: &Scenario, base: &Grid) -> Result<Grid, Failure> {
    let g = &sc.grid;
    if g.lo.is_none() && g.hi.is_none() && g.n.is_none() {
        return Ok(base.clone());
    }
    Grid::new(
        g.lo.clone().unwrap_or_else(|| base.lo().to_vec()),
        g.hi.clone().unwrap_or_else(|| base.hi().to_vec()),
        g.n.clone().unwrap_or_else(|| base.resolution().to_vec()),
    )
    .map_err(config)
}

fn setup(sc: &Scenario) -> Result<Setup, Failure> {
    if let Some(b) = benchmark(sc)? {
        let opts = grid_options(sc, b.options.clone());
        let g = grid(sc, &b.grid)?;
        let b = b.with_grid(g).with_options(opts);
        let gm = b.grid_model().map_err(config)?;
        let h0 = gm.policy_from_fn(|x| b.h0(x));
        return Ok(Setup {
            gm,
            h0,
            cert: Some(b.cert.clone()),
            exact: b.exact,
        });
    }
    let ModelConfig::Table { path, n_x, n_u } = &sc.model else {
        unreachable!("benchmarks handled above")
    };
    let t = TableModel::from_csv_path(path, *n_x, *n_u).map_err(config)?;
    let g = grid(sc, t.grid())?;
    let model = t.into_model(sc.name.clone().unwrap_or_else(|| "table".into()), None);
    let gm =
        GridModel::build(Arc::new(model), Arc::new(g), &grid_options(sc, GridOptions::default())).map_err(config)?;
    let h0 = PolicyTable::singleton(
        (0..gm.n_states())
            .map(|s| if gm.n_actions(s) > 0 { 0 } else { usize::MAX })
            .collect(),
    );
    Ok(Setup {
        gm,
        h0,
        cert: None,
        exact: None,
    })
}

fn select_rule(sc: &Scenario) -> SelectRule {
    match sc.algo.select {
        Select::Lowest => SelectRule::Lowest,
        Select::Adversarial => SelectRule::Adversarial,
        Select::Random => SelectRule::Random { seed: sc.algo.seed },
    }
}

fn eval_options(sc: &Scenario) -> EvalOptions {
    EvalOptions {
        tol: sc.algo.eval_tol,
        k_max: sc.algo.eval_max_sweeps,
    }
}

fn out_dir(sc: &Scenario) -> Result<&Path, Failure> {
    let dir = sc.output.dir.as_path();
    fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    fs::write(dir.join("config.toml"), sc.to_toml()).map_err(io)?;
    Ok(dir)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    let p = dir.join(name);
    File::create(&p)
        .map(BufWriter::new)
        .map_err(|e| Failure::Io(format!("{}: {e}", p.display())))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<(), Failure> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(io)?;
    writeln!(w).map_err(io)?;
    w.flush().map_err(io)
}

/// Value tables with the policy whose closed loop each one certifies.
struct Traced {
    values: Vec<ValueTable>,
    policies: Vec<PolicyTable>,
}

fn run_algorithm(sc: &Scenario, s: &Setup, dir: &Path) -> Result<Traced, Failure> {
    let mut w = create(dir, "trace.csv")?;
    match sc.algo.name {
        Algo::Pi => {
            let probe = match (&s.exact, sc.algo.probe) {
                (Some(ex), true) => Some(counterexample_probe(*ex, select_rule(sc))),
                _ => None,
            };
            let opts = PiOptions {
                eval: eval_options(sc),
                eps_tie: sc.algo.eps_tie,
                tol_stop: sc.algo.tol_stop,
                select: select_rule(sc),
                probe,
            };
            let run = run_pi(&s.gm, &s.h0, sc.algo.iters, &opts);
            pi::write_trace_csv(&mut w, &s.gm, &run).map_err(io)?;
            w.flush().map_err(io)?;
            let summary = run.summary();
            write_json(dir, "summary.json", &json!({"algo": "pi", "summary": summary}))?;
            if let Some(f) = &run.feasibility {
                write_json(dir, "feasibility.json", f)?;
                return Err(Failure::Feasibility(format!(
                    "improvement step {} has no minimum at x = {:?}",
                    f.iteration, f.state
                )));
            }
            Ok(Traced {
                values: run.traces.iter().map(|t| t.values.clone()).collect(),
                policies: run.traces.iter().map(|t| t.policy.clone()).collect(),
            })
        }
        Algo::Piplus => {
            let opts = PiPlusOptions {
                eval: eval_options(sc),
                eps_tie: sc.algo.eps_tie,
                delta_reg: sc.algo.delta_reg,
                branch_sep: sc.algo.branch_sep,
                tol_stop: sc.algo.tol_stop,
            };
            let run = match run_piplus(&s.gm, &s.h0, sc.algo.iters, &opts) {
                Ok(r) => r,
                Err(e @ PiPlusError::EmptySet { .. }) => {
                    write_json(dir, "feasibility.json", &json!({"error": e.to_string()}))?;
                    return Err(Failure::Feasibility(e.to_string()));
                }
            };
            pip::write_trace_csv(&mut w, &s.gm, &run).map_err(io)?;
            w.flush().map_err(io)?;
            write_json(
                dir,
                "summary.json",
                &json!({"algo": "piplus", "summary": run.summary()}),
            )?;
            Ok(Traced {
                values: run.traces.iter().map(|t| t.values.clone()).collect(),
                policies: run.traces.iter().map(|t| t.h_star.clone()).collect(),
            })
        }
        Algo::Oracle => {
            let vi = value_iteration(&s.gm, eval_options(sc), sc.algo.eps_tie);
            writeln!(
                w,
                "node,{}v",
                (0..s.gm.model.n_x).map(|d| format!("x{d},")).collect::<String>()
            )
            .map_err(io)?;
            for n in 0..s.gm.n_states() {
                let x: String = s.gm.grid.state(n).iter().map(|c| format!("{c},")).collect();
                writeln!(w, "{n},{x}{}", vi.values.values[n]).map_err(io)?;
            }
            w.flush().map_err(io)?;
            write_json(
                dir,
                "summary.json",
                &json!({
                    "algo": "oracle",
                    "converged": vi.converged,
                    "sweeps": vi.iterations,
                    "bellman_residual": vi.bellman_residual(&s.gm),
                }),
            )?;
            Ok(Traced {
                values: vec![vi.values],
                policies: vec![vi.policy],
            })
        }
    }
}

fn bundle_for(sc: &Scenario, cert: &Certificate, s_max: f64) -> Result<BoundBundle, Failure> {
    let mut cert = cert.clone();
    if sc.bounds.exponential {
        cert.case = CertCase::Exponential;
    }
    BoundBundle::build(&cert, s_max).map_err(config)
}

fn stopping(sc: &Scenario, bundle: &BoundBundle, gm: &GridModel) -> Result<Stopping, Failure> {
    let (a, r) = (sc.bounds.eps_abs, sc.bounds.eps_rel);
    let delta = sc.bounds.delta.unwrap_or_else(|| gm.max_sigma());
    stopping_iteration(bundle, &move |s| a + r * s, delta, sc.bounds.i_max).map_err(|e| Failure::Check(e.to_string()))
}

fn emit_bounds(sc: &Scenario, s: &Setup, cert: &Certificate, dir: &Path) -> Result<Stopping, Failure> {
    let s_max = s.gm.max_sigma();
    let bundle = bundle_for(sc, cert, s_max)?;
    let st = stopping(sc, &bundle, &s.gm)?;
    let n = sc.bounds.s_points.max(2);
    let s_values: Vec<f64> = (0..n).map(|j| s_max * j as f64 / (n - 1) as f64).collect();
    let mut w = create(dir, "bounds.csv")?;
    write_bounds_csv(&mut w, &bundle, &s_values, sc.bounds.k_max, Some(st.i_star)).map_err(config)?;
    w.flush().map_err(io)?;
    write_json(
        dir,
        "bounds.json",
        &json!({
            "case": bundle.case,
            "i_star": st.i_star,
            "worst_s": st.worst_s,
            "s_max": s_max,
            "warnings": bundle.warnings,
        }),
    )?;
    Ok(st)
}

pub fn cmd_run(sc: &Scenario) -> Result<(), Failure> {
    let s = setup(sc)?;
    let dir = out_dir(sc)?;
    let traced = run_algorithm(sc, &s, dir)?;
    if let Some(cert) = &s.cert {
        emit_bounds(sc, &s, cert, dir)?;
    }
    let monotone = check_monotone(&traced.values, None, sc.verify.eps_check);
    write_json(dir, "checks.json", &vec![&monotone])?;
    println!("{} iterations written to {}", traced.values.len() - 1, dir.display());
    report_line(&monotone);
    if !monotone.pass {
        return Err(Failure::Check("monotone".into()));
    }
    Ok(())
}

pub fn cmd_bounds(sc: &Scenario) -> Result<(), Failure> {
    let s = setup(sc)?;
    let cert = s
        .cert
        .clone()
        .ok_or_else(|| config("the scenario has no certificate"))?;
    let dir = out_dir(sc)?;
    let st = emit_bounds(sc, &s, &cert, dir)?;
    println!("i_star = {} (worst s = {})", st.i_star, st.worst_s);
    Ok(())
}

fn report_line(r: &CheckReport) {
    println!(
        "{:<28} {}  worst = {:.3e}  samples = {}",
        r.check,
        if r.pass { "pass" } else { "FAIL" },
        r.worst_violation,
        r.n_samples
    );
}

pub fn cmd_verify(sc: &Scenario) -> Result<(), Failure> {
    let s = setup(sc)?;
    let cert = s
        .cert
        .clone()
        .ok_or_else(|| config("verification needs a certificate"))?;
    if sc.algo.name == Algo::Oracle {
        return Err(config("verify runs pi or piplus"));
    }
    let dir = out_dir(sc)?;
    let traced = run_algorithm(sc, &s, dir)?;
    let eps = sc.verify.eps_check;
    let bundle = bundle_for(sc, &cert, s.gm.max_sigma())?;
    let oracle = value_iteration(&s.gm, eval_options(sc), sc.algo.eps_tie);
    let n = s.gm.n_states();
    let count = sc.verify.starts.clamp(1, n);
    let starts: Vec<Vec<f64>> = (0..count)
        .map(|j| s.gm.grid.state(if count == 1 { 0 } else { j * (n - 1) / (count - 1) }))
        .collect();
    let ro = RolloutOptions {
        horizon: sc.verify.horizon,
        ..RolloutOptions::default()
    };
    let mut kl: Option<CheckReport> = None;
    let mut sandwich: Option<CheckReport> = None;
    let mut decrease: Option<CheckReport> = None;
    let merge = |acc: Option<CheckReport>, r: CheckReport| {
        Some(match acc {
            Some(a) => a.merge(r),
            None => r,
        })
    };
    for (i, (v, p)) in traced.values.iter().zip(&traced.policies).enumerate() {
        let trajs = rollouts(&s.gm, p, &starts, ro, i);
        kl = merge(
            kl,
            check_kl_envelope(&trajs, &bundle.beta, eps).map_err(|e| Failure::Check(e.to_string()))?,
        );
        sandwich = merge(sandwich, check_lyapunov_sandwich(&s.gm, &bundle, &cert, v, i, eps));
        decrease = merge(decrease, check_lyapunov_decrease(&s.gm, &bundle, &cert, v, p, i, eps));
        if i + 1 == traced.values.len() {
            if let Some(t) = trajs.last() {
                let mut w = create(dir, "trajectory.csv")?;
                write_trajectory_csv(&mut w, t).map_err(io)?;
                w.flush().map_err(io)?;
            }
        }
    }
    let near = check_near_optimality(&s.gm, &traced.values, &oracle.values, &oracle.policy, &bundle, eps)
        .map_err(|e| Failure::Check(e.to_string()))?;
    let reports: Vec<CheckReport> = [
        Some(check_monotone(&traced.values, Some(&oracle.values), eps)),
        kl,
        sandwich,
        decrease,
        Some(near.explicit),
        Some(near.trajectory),
    ]
    .into_iter()
    .flatten()
    .collect();
    write_json(dir, "checks.json", &reports)?;
    for r in &reports {
        report_line(r);
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.check.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}

/// Objective curve, tie values, gap evidence and a PI⁺ transcript for the
/// counterexample. Grid settings and iteration count come from the scenario.
pub fn cmd_demo(sc: &Scenario) -> Result<(), Failure> {
    let dir = out_dir(sc)?;
    let ex = counterexample_model()
        .exact
        .expect("the counterexample has closed forms");
    let x1 = X_BAR + 1.0;
    let v1 = |y: f64| ex.v1(y, SelectRule::Adversarial);

    let mut w = csv::Writer::from_writer(create(dir, "objective.csv")?);
    w.write_record(["u", "objective"]).map_err(io)?;
    let mut us: Vec<f64> = (0..=1010)
        .map(|j| -ex.delta + j as f64 * (1.0 + ex.delta) / 1010.0)
        .collect();
    us.push(0.0);
    us.sort_by(f64::total_cmp);
    us.dedup();
    for &u in &us {
        w.write_record([u.to_string(), ex.objective(x1, u, v1).to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(io)?;

    let tie = json!({
        "x_bar": X_BAR,
        "h1_set": ex.h1_set(X_BAR),
        "v1_with_u1": ex.v1(X_BAR, SelectRule::Adversarial),
        "v1_with_u0": ex.v1(X_BAR, SelectRule::Lowest),
        "v1_with_u1_times_28": ex.v1(X_BAR, SelectRule::Adversarial) * 28.0,
        "v1_with_u0_times_28": ex.v1(X_BAR, SelectRule::Lowest) * 28.0,
    });
    write_json(dir, "tie.json", &tie)?;

    let model = counterexample_model().model;
    let v = move |y: &[f64]| v1(y[0]);
    let gap = lsc_gap(&model, &v, &[x1], GapLadder::default(), Some(&[0.0]));
    write_json(dir, "gap.json", &gap)?;

    let s = setup(sc)?;
    let opts = PiPlusOptions {
        eval: eval_options(sc),
        eps_tie: sc.algo.eps_tie,
        delta_reg: sc.algo.delta_reg,
        branch_sep: sc.algo.branch_sep,
        tol_stop: sc.algo.tol_stop,
    };
    let run = run_piplus(&s.gm, &s.h0, sc.algo.iters, &opts).map_err(|e| Failure::Feasibility(e.to_string()))?;
    let (near, _) = s.gm.grid.nearest(&[x1]);
    let mut w = csv::Writer::from_writer(create(dir, "transcript.csv")?);
    w.write_record([
        "i",
        "v_r_at_x_bar",
        "v_r_at_x_bar_plus_1",
        "h_star_size",
        "u_star_at_x_bar_plus_1",
    ])
    .map_err(io)?;
    for t in &run.traces {
        let at = |x: f64| piplus::model::interpolate(&t.values, &[x]).0;
        let u = match t.h_star.selection[near] {
            usize::MAX => String::new(),
            a => s.gm.input(near, a)[0].to_string(),
        };
        w.write_record([
            t.i.to_string(),
            at(X_BAR).to_string(),
            at(x1).to_string(),
            t.h_star.sets[near].len().to_string(),
            u,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(io)?;

    println!("H1(x_bar) = {:?}", ex.h1_set(X_BAR));
    println!(
        "V1(x_bar) with u = 1: {} (x28 = {}), with u = 0: {} (x28 = {})",
        tie["v1_with_u1"], tie["v1_with_u1_times_28"], tie["v1_with_u0"], tie["v1_with_u0_times_28"]
    );
    println!(
        "at x_bar + 1: g(0) = {} (x28 = {}), inf ~ {} (x28 = {}), gap = {}, stable = {}",
        gap.g_limit,
        gap.g_limit * 28.0,
        gap.inf(),
        gap.inf() * 28.0,
        gap.gap,
        gap.stable
    );
    println!(
        "exact V_r^1(x_bar) = {} (x28 = {})",
        ex.v1_min(X_BAR),
        ex.v1_min(X_BAR) * 28.0
    );
    println!(
        "PI+ ran {} iterations; every improvement set was non-empty",
        run.traces.len() - 1
    );
    Ok(())
}
