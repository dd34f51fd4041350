//! Subcommand implementations. Each returns `Ok(true)` when its checks or
//! verdict succeed and `Ok(false)` when the run completed but failed them.

use anyhow::Result;
use mftc_core::fixedpoint::{solve_mftc, FixedPointConfig, MftcSolution, Verdict};
use mftc_core::flow::{
    dual_expectation, flow_from_gradient, girsanov_batch, girsanov_diagnostics, moment_estimate,
    FlowMethod, MCParams,
};
use mftc_core::majorant::{default_eta_star, feasibility_windows, MajorantMode, MajorantParams};
use mftc_core::measure::{GridDensity, Measure, MeasureFlow, MeasureSlice};
use mftc_core::model::{audit_assumptions, ModelSpec};
use mftc_core::oracle::{cole_hopf_solution, lq_closed_form, LQClosedForm, LqParams};
use mftc_core::quad::quadratic_fit;
use mftc_core::valuefn::{
    default_grid_z, master_residual, mc_cost, mc_cost_reweighted, solve_vbar,
    value_derivative_check, value_from_solution,
};
use mftc_core::{Grid1D, TimeMesh, VectorField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{ConfigError, Family, RunConfig};
use crate::output::{OutputDir, Table};

pub struct Context {
    pub cfg: RunConfig,
    pub model: ModelSpec,
    pub grid: Grid1D,
    pub mesh: TimeMesh,
    pub m0: GridDensity,
    pub fp: FixedPointConfig,
    pub mc: MCParams,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self, ConfigError> {
        let model = cfg.model()?;
        let grid = cfg.grid()?;
        let mesh = cfg.mesh()?;
        let m0 = cfg.initial(grid)?;
        let fp = cfg.fixed_point();
        let mc = cfg.mc_params();
        Ok(Self {
            cfg,
            model,
            grid,
            mesh,
            m0,
            fp,
            mc,
        })
    }

    fn solve(&self) -> Result<MftcSolution> {
        let out = solve_mftc(&self.model, &self.m0, &self.mesh, &self.grid, &self.fp)?;
        log::info!(
            "fixed point: {} after {} iterations",
            out.report.verdict,
            out.report.iterations.len()
        );
        Ok(out)
    }

    /// Riccati oracle of the configured LQ family, if it is one.
    fn lq_oracle(&self) -> Result<Option<LQClosedForm>> {
        let m = &self.cfg.model;
        if m.family != Family::LqMeanField {
            return Ok(None);
        }
        let params = LqParams {
            mean_coupling: m.mean_coupling.unwrap_or(0.0),
            terminal_curvature: m.terminal_curvature.unwrap_or(0.0),
            terminal_mean_coupling: m.terminal_mean_coupling.unwrap_or(0.0),
            a: self.model.a(),
        };
        let second = self.m0.integrate(&|x| x * x);
        Ok(Some(lq_closed_form(
            params,
            self.model.horizon(),
            self.m0.mean(),
            second,
        )?))
    }
}

fn mode_name(mode: Option<MajorantMode>) -> String {
    match mode {
        Some(MajorantMode::SmallTime) => "SMALL_TIME".into(),
        Some(MajorantMode::GlobalConvex { .. }) => "GLOBAL_CONVEX".into(),
        None => "NONE".into(),
    }
}

fn flag(v: Option<bool>) -> f64 {
    match v {
        Some(true) => 1.0,
        Some(false) => 0.0,
        None => f64::NAN,
    }
}

fn verdict_line(out: &MftcSolution) {
    println!(
        "verdict {} after {} iterations (majorants: {}, certified: {})",
        out.report.verdict,
        out.report.iterations.len(),
        mode_name(out.report.majorant_mode),
        out.report.majorant_certified()
    );
}

pub fn audit(ctx: &Context, dir: &mut OutputDir) -> Result<bool> {
    let k = *ctx.model.constants();
    let (wv, wdv) = feasibility_windows(&k);
    let eta = default_eta_star();
    let (t0, t1) = ctx.model.horizon();
    let feasible = t1 - t0 < wv.min(wdv);
    println!(
        "constants c={} c_T={} delta={} lambda={} gamma={}",
        k.c, k.c_t, k.delta, k.lambda, k.gamma
    );
    println!("window_V = {wv:.6}");
    println!("window_DV = {wdv:.6}");
    println!("eta* = {eta:.12}");
    println!(
        "horizon T - t = {} is {} the small-time windows",
        t1 - t0,
        if feasible { "inside" } else { "outside" }
    );
    let report = audit_assumptions(&ctx.model, ctx.cfg.model.constants.audit_samples);
    let mut checks = Vec::new();
    for c in &report.checks {
        println!(
            "{} {}: max ratio {:.4} at s={:.3}, x={:.3}, p={:.3}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.max_ratio,
            c.worst.0,
            c.worst.1,
            c.worst.2
        );
        checks.push(json!({
            "name": c.name,
            "max_ratio": c.max_ratio,
            "worst": [c.worst.0, c.worst.1, c.worst.2],
            "passed": c.passed(),
        }));
    }
    if feasible {
        let p = MajorantParams::new(k, (t0, t1), ctx.model.a(), MajorantMode::SmallTime)?;
        let mut table = Table::new("majorants", &["s", "beta", "mu", "beta_bar", "mu_bar"]);
        println!(
            "{:>8} {:>12} {:>12} {:>12} {:>12}",
            "s", "beta", "mu", "beta_bar", "mu_bar"
        );
        for i in 0..=10 {
            let s = t0 + (t1 - t0) * i as f64 / 10.0;
            let row = vec![s, p.beta(s), p.mu(s), p.beta_bar(s), p.mu_bar(s)];
            println!(
                "{:>8.4} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                row[0], row[1], row[2], row[3], row[4]
            );
            table.push(row);
        }
        dir.write_table(&table)?;
    }
    dir.write_json(
        "audit.json",
        &json!({
            "constants": {"c": k.c, "c_t": k.c_t, "delta": k.delta, "lambda": k.lambda, "gamma": k.gamma},
            "window_v": wv,
            "window_dv": wdv,
            "eta_star": eta,
            "horizon": [t0, t1],
            "small_time_feasible": feasible,
            "convex": ctx.model.is_convex(),
            "samples": report.samples,
            "checks": checks,
            "all_passed": report.all_passed(),
        }),
    )?;
    Ok(true)
}

fn write_solution(ctx: &Context, out: &MftcSolution, dir: &mut OutputDir) -> Result<()> {
    let sol = &out.solution;
    let xs = ctx.grid.nodes();
    let mut fields = Table::new("solution", &["s", "x", "v", "dv", "policy"]);
    for n in 0..ctx.mesh.n_nodes() {
        let s = ctx.mesh.time(n);
        for (i, &x) in xs.iter().enumerate() {
            fields.push(vec![
                s,
                x,
                sol.v.at(n, i),
                sol.dv.at(n, i),
                sol.policy.at(n, i),
            ]);
        }
    }
    dir.write_table(&fields)?;
    let mut flow = Table::new("flow", &["s", "mass", "mean", "second_moment"]);
    for (&n, slice) in out.flow.nodes().iter().zip(out.flow.slices()) {
        let m = slice.as_measure();
        flow.push(vec![
            ctx.mesh.time(n),
            m.integrate(&|_| 1.0),
            m.mean(),
            m.integrate(&|x| x * x),
        ]);
    }
    dir.write_table(&flow)?;
    let mut iters = Table::new(
        "iterations",
        &[
            "iteration",
            "weighted_residual",
            "max_residual",
            "w2",
            "damping",
            "value_dominated",
            "gradient_dominated",
        ],
    );
    for r in &out.report.iterations {
        iters.push(vec![
            r.iteration as f64,
            r.weighted_residual,
            r.max_residual,
            r.w2,
            r.damping,
            flag(r.value_dominated),
            flag(r.gradient_dominated),
        ]);
    }
    dir.write_table(&iters)?;
    let (wv, wdv) = feasibility_windows(ctx.model.constants());
    dir.write_json(
        "report.json",
        &json!({
            "verdict": out.report.verdict.to_string(),
            "iterations": out.report.iterations.len(),
            "majorant_mode": mode_name(out.report.majorant_mode),
            "majorant_certified": out.report.majorant_certified(),
            "window_v": wv,
            "window_dv": wdv,
            "warnings": out.report.warnings,
            "failure": out.report.failure.as_ref().map(|e| json!({"kind": e.kind(), "message": e.to_string()})),
            "diagnostics": {
                "max_abs_v": sol.diagnostics.max_abs_v,
                "max_abs_dv": sol.diagnostics.max_abs_dv,
                "weighted_dt_v": sol.diagnostics.weighted_dt_v,
                "weighted_d2v": sol.diagnostics.weighted_d2v,
                "weighted_dt_dv": sol.diagnostics.weighted_dt_dv,
            },
        }),
    )?;
    Ok(())
}

pub fn solve(ctx: &Context, dir: &mut OutputDir) -> Result<bool> {
    let out = ctx.solve()?;
    write_solution(ctx, &out, dir)?;
    verdict_line(&out);
    Ok(out.report.verdict == Verdict::Converged)
}

pub fn validate(ctx: &Context, dir: &mut OutputDir) -> Result<bool> {
    let out = ctx.solve()?;
    verdict_line(&out);
    let converged = out.report.verdict == Verdict::Converged;
    let summary = match ctx.cfg.model.family {
        Family::LqMeanField => {
            let oracle = ctx.lq_oracle()?.expect("LQ family has an oracle");
            let core = ctx.grid.core();
            let xs = ctx.grid.nodes()[core.clone()].to_vec();
            let mut table = Table::new(
                "validation",
                &[
                    "s",
                    "p",
                    "p_oracle",
                    "r",
                    "r_oracle",
                    "k",
                    "k_oracle",
                    "mean",
                    "mean_oracle",
                ],
            );
            let (mut coef, mut mean): (f64, f64) = (0.0, 0.0);
            for n in 0..ctx.mesh.n_nodes() {
                let s = ctx.mesh.time(n);
                let c = quadratic_fit(&xs, &out.solution.v.slice(n)[core.clone()]);
                let m = out.flow.slice(n).as_measure().mean();
                let row = vec![
                    s,
                    2.0 * c[2],
                    oracle.p(s),
                    c[1],
                    oracle.r(s),
                    c[0],
                    oracle.k(s),
                    m,
                    oracle.mbar(s),
                ];
                coef = coef
                    .max((row[1] - row[2]).abs())
                    .max((row[3] - row[4]).abs())
                    .max((row[5] - row[6]).abs());
                mean = mean.max((row[7] - row[8]).abs());
                table.push(row);
            }
            dir.write_table(&table)?;
            let passed = converged && coef <= 1e-3 && mean <= 2e-3;
            println!(
                "max coefficient error {coef:.3e} (<= 1e-3), max mean error {mean:.3e} (<= 2e-3)"
            );
            json!({"family": "LQ_MEANFIELD", "max_coefficient_error": coef, "max_mean_error": mean,
                   "oracle_ode_residual": oracle.max_ode_residual(), "passed": passed})
        }
        Family::ColeHopf => {
            let curvature = ctx.cfg.model.terminal_curvature.unwrap_or(0.0);
            let exact = cole_hopf_solution(
                curvature,
                ctx.model.a(),
                ctx.model.horizon(),
                &ctx.grid,
                &ctx.mesh,
            )?;
            let core = ctx.grid.core();
            let mut table = Table::new("validation", &["s", "max_error"]);
            let mut worst: f64 = 0.0;
            for n in 0..ctx.mesh.n_nodes() {
                let e = out.solution.v.slice(n)[core.clone()]
                    .iter()
                    .zip(&exact.slice(n)[core.clone()])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                worst = worst.max(e);
                table.push(vec![ctx.mesh.time(n), e]);
            }
            dir.write_table(&table)?;
            let passed = converged && worst <= 2e-3;
            println!("max error on the core window {worst:.3e} (<= 2e-3)");
            json!({"family": "COLE_HOPF", "max_error": worst, "passed": passed})
        }
    };
    let passed = summary["passed"].as_bool().unwrap_or(false);
    dir.write_json("validation.json", &summary)?;
    Ok(passed)
}

pub fn simulate(ctx: &Context, dir: &mut OutputDir) -> Result<bool> {
    let out = ctx.solve()?;
    verdict_line(&out);
    let dv = &out.solution.dv;
    let m0 = MeasureSlice::Grid(ctx.m0.clone());
    let mut flows: Vec<(FlowMethod, MeasureFlow)> = Vec::new();
    for method in [
        FlowMethod::FpGrid,
        FlowMethod::ParticleSde,
        FlowMethod::GirsanovReweight,
    ] {
        let flow = flow_from_gradient(&ctx.model, dv, &m0, method, &ctx.mc, ctx.fp.bc)?;
        flows.push((method, flow));
    }
    let recorded = flows[1].1.nodes().to_vec();
    for (method, flow) in &flows {
        let name = format!("moments_{}", method.to_string().to_lowercase());
        let mut table = Table::new(&name, &["s", "mean", "mean_se", "second", "second_se"]);
        for &n in &recorded {
            let slice = flow.at_node(n).expect("recorded node");
            let (m1, m2) = (moment_estimate(slice, 1), moment_estimate(slice, 2));
            table.push(vec![
                ctx.mesh.time(n),
                m1.value,
                m1.stderr,
                m2.value,
                m2.stderr,
            ]);
        }
        dir.write_table(&table)?;
    }
    let diag = girsanov_diagnostics(&girsanov_batch(&ctx.model, dv, &m0, &ctx.mc)?);
    let mut table = Table::new(
        "girsanov",
        &["s", "mean_m", "stderr_m", "mean_m_x2", "stderr_m_x2", "ess"],
    );
    for (j, &n) in diag.nodes.iter().enumerate() {
        table.push(vec![
            ctx.mesh.time(n),
            diag.mean_m[j],
            diag.stderr_m[j],
            diag.mean_m_x2[j],
            diag.stderr_m_x2[j],
            diag.ess[j],
        ]);
    }
    dir.write_table(&table)?;
    let last = ctx.mesh.n_steps();
    let dual = dual_expectation(&ctx.model, dv, |z| z * z, &ctx.m0, last, ctx.fp.bc)?;
    let direct = flows[0].1.slice(last).as_measure().integrate(&|z| z * z);
    let (m_t, se_t) = (*diag.mean_m.last().unwrap(), *diag.stderr_m.last().unwrap());
    println!("mean M(T) = {m_t:.6} ± {se_t:.2e}; second moment at T: dual {dual:.6}, FP grid {direct:.6}");
    dir.write_json(
        "simulate.json",
        &json!({
            "n_particles": ctx.mc.n_particles,
            "mean_m_terminal": m_t,
            "stderr_m_terminal": se_t,
            "girsanov_flagged": diag.flagged,
            "dual_second_moment": dual,
            "grid_second_moment": direct,
        }),
    )?;
    Ok(!diag.flagged)
}

pub fn value(ctx: &Context, dir: &mut OutputDir) -> Result<bool> {
    let out = ctx.solve()?;
    verdict_line(&out);
    let rec = value_from_solution(&ctx.model, &out.solution, &out.flow)?;
    let j = mc_cost(&ctx.model, &out.solution.policy, &ctx.m0, &ctx.mc)?;
    let jr = mc_cost_reweighted(&ctx.model, &out.solution.policy, &ctx.m0, &ctx.mc)?;
    let mut table = Table::new("running", &["s", "running"]);
    for (n, r) in rec.running.iter().enumerate() {
        table.push(vec![ctx.mesh.time(n), *r]);
    }
    dir.write_table(&table)?;
    println!(
        "Phi = {:.6}; J = {:.6} ± {:.1e}; reweighted J = {:.6} ± {:.1e}",
        rec.phi, j.value, j.stderr, jr.value, jr.stderr
    );
    dir.write_json(
        "value.json",
        &json!({
            "phi": rec.phi,
            "running_total": rec.running_total,
            "terminal": rec.terminal,
            "mc_cost": {"value": j.value, "stderr": j.stderr},
            "mc_cost_reweighted": {"value": jr.value, "stderr": jr.stderr},
        }),
    )?;
    Ok(out.report.verdict == Verdict::Converged)
}

fn perturbed(policy: &VectorField, amp: f64, freq: f64, phase: f64) -> Result<VectorField> {
    let xs = policy.grid().nodes();
    let rows = policy
        .values()
        .iter()
        .map(|row| {
            row.iter()
                .zip(&xs)
                .map(|(v, x)| v + amp * (freq * x + phase).sin())
                .collect()
        })
        .collect();
    Ok(VectorField::new(*policy.mesh(), *policy.grid(), rows)?)
}

pub fn verify(ctx: &Context, dir: &mut OutputDir, perturbations: usize) -> Result<bool> {
    let out = ctx.solve()?;
    verdict_line(&out);
    let phi = value_from_solution(&ctx.model, &out.solution, &out.flow)?.phi;
    let opt = mc_cost(&ctx.model, &out.solution.policy, &ctx.m0, &ctx.mc)?;
    let opt_ok = (opt.value - phi).abs() <= 3.0 * opt.stderr + 1e-3;
    println!(
        "Phi = {phi:.6}; J(optimal) = {:.6} ± {:.1e}",
        opt.value, opt.stderr
    );
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let mut table = Table::new(
        "verification",
        &[
            "index",
            "amplitude",
            "frequency",
            "phase",
            "cost",
            "stderr",
            "margin_se",
        ],
    );
    let mut all_ok = opt_ok;
    for i in 0..perturbations {
        let amp = rng.random_range(-0.3..0.3);
        let freq = rng.random_range(0.5..2.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let j = mc_cost(
            &ctx.model,
            &perturbed(&out.solution.policy, amp, freq, phase)?,
            &ctx.m0,
            &ctx.mc,
        )?;
        let margin = (j.value - phi) / j.stderr + 3.0;
        all_ok &= margin >= 0.0;
        table.push(vec![i as f64, amp, freq, phase, j.value, j.stderr, margin]);
    }
    dir.write_table(&table)?;
    dir.write_json(
        "verify.json",
        &json!({
            "phi": phi,
            "optimal": {"value": opt.value, "stderr": opt.stderr, "passed": opt_ok},
            "perturbations": perturbations,
            "passed": all_ok,
        }),
    )?;
    println!("verification {}", if all_ok { "PASS" } else { "FAIL" });
    Ok(all_ok)
}

pub fn derivative(ctx: &Context, dir: &mut OutputDir, eps: f64) -> Result<bool> {
    let out = ctx.solve()?;
    verdict_line(&out);
    let check =
        value_derivative_check(&ctx.model, &out.solution, &out.flow, |_| 1.0, eps, &ctx.fp)?;
    let field = solve_vbar(
        &ctx.model,
        &out.solution,
        &out.flow,
        &default_grid_z(),
        ctx.fp.bc,
    )?;
    let oracle = ctx.lq_oracle()?;
    let stride = (ctx.mesh.n_steps() / 50).max(1);
    let mut vbar = Table::new("vbar", &["s", "x", "z", "vbar"]);
    let mut alpha = Table::new("bilinear", &["s", "alpha", "alpha_oracle"]);
    let xs = field.grid_x.nodes();
    for n in (0..field.mesh.n_nodes()).step_by(stride) {
        let s = field.mesh.time(n);
        for (i, &x) in xs.iter().enumerate() {
            for (j, &z) in field.grid_z.iter().enumerate() {
                vbar.push(vec![s, x, z, field.vbar[n][i][j]]);
            }
        }
        let a = field.bilinear_coefficient(n, -2.0, 2.0);
        alpha.push(vec![
            s,
            a,
            oracle.as_ref().map_or(f64::NAN, |o| o.bilinear(s)),
        ]);
    }
    dir.write_table(&vbar)?;
    dir.write_table(&alpha)?;
    let centered = field.symmetry_defect(-2.0, 2.0, true);
    let raw = field.symmetry_defect(-2.0, 2.0, false);
    let passed = check.discrepancy <= 2e-3;
    println!(
        "directional derivative: finite difference {:.6}, integral {:.6}, discrepancy {:.2e} (<= 2e-3)",
        check.finite_difference, check.integral, check.discrepancy
    );
    println!("symmetry defect {centered:.2e} (double-centered), {raw:.3e} (raw)");
    dir.write_json(
        "derivative.json",
        &json!({
            "eps": eps,
            "finite_difference": check.finite_difference,
            "integral": check.integral,
            "discrepancy": check.discrepancy,
            "symmetry_centered": centered,
            "symmetry_raw": raw,
            "inner_iterations": field.inner_history.len(),
            "coupling_share": field.coupling_share,
            "passed": passed,
        }),
    )?;
    Ok(passed)
}

pub fn master(ctx: &Context, dir: &mut OutputDir, probes: &[f64]) -> Result<bool> {
    let res = master_residual(&ctx.model, &ctx.m0, &ctx.mesh, &ctx.grid, &ctx.fp, probes)?;
    let mut table = Table::new("master", &["x", "residual"]);
    for (x, r) in res.probes.iter().zip(&res.residuals) {
        table.push(vec![*x, *r]);
    }
    dir.write_table(&table)?;
    let max = res.max_abs();
    let passed = max <= 0.05;
    println!(
        "max master residual {max:.3e} (<= 0.05) at dx={}, dt={}",
        res.dx, res.dt
    );
    dir.write_json(
        "master.json",
        &json!({"max_abs": max, "dx": res.dx, "dt": res.dt, "passed": passed}),
    )?;
    Ok(passed)
}
