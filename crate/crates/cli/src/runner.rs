//! Stage pipeline: norms -> PDE/transform -> flows -> transport ->
//! stability, with per-stage CSVs, a diagnostics table, a flat summary and a
//! key-value manifest. Exit status is nonzero iff a hard check fails.

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

use zvonkin::export::{csv_table, diagnostics_csv, field_csv, fmt17, manifest_text, DiagnosticRow};
use zvonkin::flow::{
    self, flow_checks, scalar_moment_estimator, simulate_transformed, stability_experiment,
    variational_flow,
};
use zvonkin::grid::{SpaceGrid, TimeGrid};
use zvonkin::holder::{
    self, degree_classify, holder_seminorm, lebesgue_holder_norm, sup_norm, weighted_sup_norm,
    Criticality, FunctionSpace, SliceNorm, DEFAULT_PAIR_BUDGET,
};
use zvonkin::noise::NoiseStream;
use zvonkin::pde::PicardOptions;
use zvonkin::transform::{build_transform, ZvonkinTransform};
use zvonkin::transport::{
    conservation_checks, gradient_transport, solve_transport, test_function_corpus,
    transport_frame, weak_residual_set, InitialDatum,
};

use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Norms,
    Pde,
    Simulate,
    Transport,
    Stability,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Norms => "norms",
            Stage::Pde => "pde",
            Stage::Simulate => "simulate",
            Stage::Transport => "transport",
            Stage::Stability => "stability",
        }
    }
}

struct Check {
    name: String,
    stage: Stage,
    value: f64,
    tolerance: f64,
    pass: bool,
}

pub struct RunState {
    scenario: Scenario,
    out_dir: PathBuf,
    checks: Vec<Check>,
    diagnostics: Vec<DiagnosticRow>,
    manifest: Vec<(String, String)>,
    timings: Vec<(String, f64)>,
    transform: Option<ZvonkinTransform>,
    solver_grid: SpaceGrid,
    time_grid: TimeGrid,
}

impl RunState {
    pub fn hard_fail(&self) -> bool {
        self.checks.iter().any(|c| !c.pass)
    }

    fn check(&mut self, stage: Stage, name: &str, value: f64, tolerance: f64) -> bool {
        let pass = value.is_finite() && value <= tolerance;
        self.checks.push(Check {
            name: name.into(),
            stage,
            value,
            tolerance,
            pass,
        });
        self.diagnostics.push(DiagnosticRow {
            check: name.into(),
            time: f64::NAN,
            path: -1,
            defect: value,
            tolerance,
            pass,
        });
        println!(
            "  [{}] {name}: {} (defect {value:.3e}, tol {tolerance:.3e})",
            stage.name(),
            if pass { "pass" } else { "FAIL" }
        );
        pass
    }

    fn note(&mut self, key: &str, value: String) {
        self.manifest.push((key.into(), value));
    }

    fn write(&self, file: &str, text: &str) -> Result<()> {
        let path = self.out_dir.join(file);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Runs the requested stages in pipeline order and emits all artifacts.
pub fn run_scenario(scenario: Scenario, stages: &[Stage], workers: usize) -> Result<RunState> {
    let out_dir = PathBuf::from(
        scenario
            .output
            .dir
            .clone()
            .unwrap_or_else(|| format!("out/{}", scenario.name)),
    );
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;

    let solver_grid = SpaceGrid::new(
        scenario.drift()?.dim,
        scenario.grid.half_extent,
        scenario.grid.spacing,
    )
    .map_err(|e| anyhow!("{e}"))?;
    let time_grid =
        TimeGrid::new(scenario.grid.t_end, scenario.grid.time_steps).map_err(|e| anyhow!("{e}"))?;

    let effective = scenario.effective_toml()?;
    let hash = format!("{:x}", Sha256::digest(effective.as_bytes()));

    let mut st = RunState {
        scenario,
        out_dir,
        checks: Vec::new(),
        diagnostics: Vec::new(),
        manifest: Vec::new(),
        timings: Vec::new(),
        transform: None,
        solver_grid,
        time_grid,
    };
    st.write("effective_config.toml", &effective)?;
    st.note("scenario", st.scenario.name.clone());
    st.note("scenario_hash", hash);
    st.note("tool_version", env!("CARGO_PKG_VERSION").into());
    st.note("seed", st.scenario.mc.seed.to_string());
    st.note("workers", workers.to_string());

    // stages that consume the transform pull the PDE stage in front of them
    let needs_pde = stages
        .iter()
        .any(|s| matches!(s, Stage::Pde | Stage::Simulate | Stage::Transport));
    let ordered = [
        Stage::Norms,
        Stage::Pde,
        Stage::Simulate,
        Stage::Transport,
        Stage::Stability,
    ];
    for stage in ordered {
        let wanted = stages.contains(&stage) || (stage == Stage::Pde && needs_pde);
        if !wanted {
            continue;
        }
        let t0 = Instant::now();
        match stage {
            Stage::Norms => stage_norms(&mut st)?,
            Stage::Pde => stage_pde(&mut st)?,
            Stage::Simulate => stage_simulate(&mut st)?,
            Stage::Transport => stage_transport(&mut st)?,
            Stage::Stability => stage_stability(&mut st)?,
        }
        st.timings
            .push((stage.name().into(), t0.elapsed().as_secs_f64()));
    }

    emit_results(&mut st)?;
    Ok(st)
}

fn picard_options(sc: &Scenario) -> PicardOptions {
    PicardOptions {
        max_iters: sc.solver.max_iters,
        tol: sc.solver.tol,
    }
}

fn noise_stream(sc: &Scenario) -> NoiseStream {
    NoiseStream::new(sc.mc.seed, sc.mc.base_steps, sc.grid.t_end)
}

// ---------------------------------------------------------------------------
// norms
// ---------------------------------------------------------------------------

fn stage_norms(st: &mut RunState) -> Result<()> {
    let sc = st.scenario.clone();
    let expo = sc.exponents()?;
    let drift = sc.drift()?;
    let field = drift.sample(&st.solver_grid, &st.time_grid);
    let dim = field.grid.dim;

    let mut sup: f64 = 0.0;
    for k in 0..field.time.slices() {
        sup = sup.max(sup_norm(field.slice(k), field.comps));
    }
    let wsup = weighted_sup_norm(&field.grid, field.slice(0), field.comps, expo.gamma_low)
        .map_err(|e| anyhow!("{e}"))?;
    let seminorm = holder_seminorm(
        &field.grid,
        field.slice(0),
        field.comps,
        expo.alpha,
        DEFAULT_PAIR_BUDGET,
    )
    .map_err(|e| anyhow!("{e}"))?;
    let lq = lebesgue_holder_norm(
        &field,
        expo.q,
        SliceNorm::Intersection {
            gamma_lo: expo.gamma_low,
            gamma_hi: expo.alpha,
        },
        DEFAULT_PAIR_BUDGET,
    )
    .map_err(|e| anyhow!("{e}"))?;
    let degree = degree_classify(FunctionSpace::Holder { gamma: expo.alpha }, expo.q, dim);

    let mut rows = vec![
        vec!["sup_norm".into(), fmt17(sup)],
        vec!["weighted_sup_norm".into(), fmt17(wsup)],
        vec!["holder_seminorm_alpha".into(), fmt17(seminorm)],
        vec!["lebesgue_holder_norm".into(), fmt17(lq)],
        vec!["degree".into(), fmt17(degree.degree)],
        vec![
            "criticality".into(),
            match degree.class {
                Criticality::Subcritical => "subcritical".into(),
                Criticality::Critical => "critical".into(),
                Criticality::Supercritical => "supercritical".into(),
            },
        ],
    ];

    if sc.features.holder_fits && dim == 1 {
        let pn = holder::poisson_equivalent_norm(
            &field.grid,
            field.slice(0),
            expo.alpha,
            &holder::default_xi_grid(),
        )
        .map_err(|e| anyhow!("{e}"))?;
        rows.push(vec!["poisson_equivalent_norm".into(), fmt17(pn)]);
        let ratio = if seminorm > 0.0 { pn / seminorm } else { 0.0 };
        rows.push(vec!["poisson_to_holder_ratio".into(), fmt17(ratio)]);
    }

    st.write("norms.csv", &csv_table(&["quantity", "value"], &rows))?;
    st.note("drift_sup_norm", fmt17(sup));
    st.note("drift_lq_norm", fmt17(lq));

    let finite = [sup, wsup, seminorm, lq]
        .iter()
        .all(|v| v.is_finite()) as u8 as f64;
    st.check(Stage::Norms, "norm-certificates-finite", 1.0 - finite, 0.0);
    // the pipeline hypotheses put the drift strictly above the critical line
    let sub = (degree.class == Criticality::Subcritical) as u8 as f64;
    st.check(Stage::Norms, "degree-subcritical", 1.0 - sub, 0.0);
    Ok(())
}

// ---------------------------------------------------------------------------
// PDE + transform
// ---------------------------------------------------------------------------

fn stage_pde(st: &mut RunState) -> Result<()> {
    let sc = st.scenario.clone();
    let drift = sc.drift()?;
    let sigma = sc.sigma(drift.dim);
    let b = drift.sample(&st.solver_grid, &st.time_grid);
    let tr = build_transform(
        &st.solver_grid,
        &st.time_grid,
        &b,
        &sigma,
        sc.solver.target,
        sc.solver.lambda0,
        sc.solver.lambda_max,
        &picard_options(&sc),
    )
    .map_err(|e| anyhow!("{e}"))?;

    let rows: Vec<Vec<String>> = tr
        .ladder
        .iter()
        .map(|e| {
            vec![
                fmt17(e.lambda),
                fmt17(e.grad_sup),
                fmt17(e.contraction_factor),
                e.iterations.to_string(),
            ]
        })
        .collect();
    st.write(
        "ladder.csv",
        &csv_table(
            &["lambda", "grad_sup", "contraction_factor", "iterations"],
            &rows,
        ),
    )?;
    st.write("pde_u.csv", &field_csv(&tr.solution.u))?;

    let (lo, hi, inv) = tr.diffeo_bounds();
    st.note("lambda", fmt17(tr.lambda));
    st.note("picard_iterations", tr.solution.iterations.to_string());
    st.note("contraction_factor", fmt17(tr.solution.contraction_factor));
    st.note("sup_u", fmt17(tr.solution.sup_u));
    st.note("sup_grad_u", fmt17(tr.solution.sup_grad));
    st.note("sup_hess_u", fmt17(tr.solution.sup_hess));
    st.note("grad_phi_lower", fmt17(lo));
    st.note("grad_phi_upper", fmt17(hi));
    st.note("grad_psi_upper", fmt17(inv));

    st.check(
        Stage::Pde,
        "gradient-certificate",
        tr.solution.sup_grad,
        sc.solver.target,
    );
    st.check(
        Stage::Pde,
        "picard-contraction",
        tr.solution.contraction_factor,
        1.0 - 1e-9,
    );
    st.transform = Some(tr);
    Ok(())
}

fn take_transform(st: &mut RunState) -> Result<ZvonkinTransform> {
    st.transform
        .take()
        .ok_or_else(|| anyhow!("stage needs the transform but the PDE stage did not run"))
}

// ---------------------------------------------------------------------------
// flows
// ---------------------------------------------------------------------------

fn stage_simulate(st: &mut RunState) -> Result<()> {
    let sc = st.scenario.clone();
    let tr = take_transform(st)?;
    let noise = noise_stream(&sc);
    let dim = tr.dim;
    let starts = sc.starts(dim);
    let reps = sc.mc.n_paths;
    let x0s = flow::expand_starts(&starts, reps);
    let full = (0usize, sc.mc.base_steps);
    let steps = sc.mc.n_steps;
    let bbox = sc.box_half_extent();

    // flow axioms: identity at the empty window, two-leg composition defect
    if steps % 4 == 0 && sc.mc.base_steps % 2 == 0 {
        let windows = (0usize, sc.mc.base_steps / 2, sc.mc.base_steps);
        // each composed leg runs at twice its listed resolution, so a leg of
        // steps/4 spans half the window at the full step count
        let legs = (steps, steps / 4, steps / 4);
        let rep = flow_checks(&tr, &noise, &x0s, reps, windows, legs, bbox)
            .map_err(|e| anyhow!("{e}"))?;
        st.check(Stage::Simulate, "flow-identity", rep.identity_defect, 1e-12);
        st.check(
            Stage::Simulate,
            "flow-composition",
            rep.composition_defect,
            0.25,
        );
    }

    // ensemble run with snapshots at the quarters of the window
    let marks: Vec<usize> = (1..4).map(|k| k * steps / 4).filter(|&m| m > 0).collect();
    let run = simulate_transformed(&tr, &noise, &x0s, reps, full, steps, &marks, bbox)
        .map_err(|e| anyhow!("{e}"))?;
    st.check(
        Stage::Simulate,
        "excursion-fraction",
        run.y.excursion_fraction,
        0.1,
    );
    st.note("excursion_fraction", fmt17(run.y.excursion_fraction));

    let dt = sc.grid.t_end / steps as f64;
    let mut rows = Vec::new();
    for (mark, xs) in &run.x_snapshots {
        let t = *mark as f64 * dt;
        for (p, x) in xs.iter().enumerate() {
            let mut row = vec![fmt17(t), p.to_string()];
            row.extend((0..dim).map(|a| fmt17(x[a])));
            rows.push(row);
        }
    }
    let mut header = vec!["t", "path"];
    let axis_names = ["x1", "x2", "x3"];
    header.extend(axis_names.iter().take(dim));
    st.write("paths.csv", &csv_table(&header, &rows))?;

    // flow-derivative moment, when the ensemble is large enough for the
    // bootstrap estimator
    if x0s.len() >= 100 {
        let var = variational_flow(&tr, &noise, &x0s, reps, full, steps, bbox)
            .map_err(|e| anyhow!("{e}"))?;
        let (m, s) = scalar_moment_estimator(&var.sup_grad_hs, 2.0, 1000, sc.mc.seed)
            .map_err(|e| anyhow!("{e}"))?;
        st.note("grad_flow_sq_moment", fmt17(m));
        st.note("grad_flow_sq_moment_stderr", fmt17(s));
        st.write(
            "moments.csv",
            &csv_table(
                &["estimator", "p", "estimate", "stderr"],
                &[vec![
                    "sup_t_grad_flow".into(),
                    fmt17(2.0),
                    fmt17(m),
                    fmt17(s),
                ]],
            ),
        )?;
        let finite = (m.is_finite() && s.is_finite()) as u8 as f64;
        st.check(Stage::Simulate, "grad-moment-finite", 1.0 - finite, 0.0);
    }
    st.transform = Some(tr);
    Ok(())
}

// ---------------------------------------------------------------------------
// transport
// ---------------------------------------------------------------------------

fn stage_transport(st: &mut RunState) -> Result<()> {
    let sc = st.scenario.clone();
    let tr = take_transform(st)?;
    let drift = sc.drift()?;
    if !drift.divergence_free {
        bail!("the transport feature requires a divergence-free drift family");
    }
    let tp = &sc.transport;
    let grid = SpaceGrid::new(tr.dim, tp.half_extent, tp.spacing).map_err(|e| anyhow!("{e}"))?;
    let u0 = InitialDatum::bump(&grid, zvonkin::grid::zero_pt(), tp.radius, 1.0)
        .map_err(|e| anyhow!("{e}"))?;
    let noise = noise_stream(&sc);
    let half = sc.mc.base_steps / 2;
    let out_steps = [half, sc.mc.base_steps];
    let bbox = sc.box_half_extent().max(50.0);

    let field = solve_transport(
        &u0,
        &drift,
        &tr,
        &noise,
        &grid,
        &out_steps,
        tp.coarsen,
        tp.n_paths,
        bbox,
    )
    .map_err(|e| anyhow!("{e}"))?;

    let r = if tp.r <= 0.0 { f64::INFINITY } else { tp.r };
    let cons = conservation_checks(&field, r, &tr, &drift).map_err(|e| anyhow!("{e}"))?;
    let mass0: f64 = field.values[0][0].iter().sum::<f64>() * grid.spacing.powi(grid.dim as i32);
    let mass_tol = 1e-3 * mass0.abs().max(1.0);
    let worst_mass = cons.mass_defect.iter().cloned().fold(0.0f64, f64::max);
    let worst_lr = cons.lr_defect.iter().cloned().fold(0.0f64, f64::max);
    st.check(Stage::Transport, "mass-conservation", worst_mass, mass_tol);
    st.check(Stage::Transport, "lr-conservation", worst_lr, mass_tol);
    st.check(
        Stage::Transport,
        "max-principle",
        cons.max_principle_defect,
        1e-12,
    );
    if !cons.euler_skipped {
        let worst_euler = cons.euler_defect.iter().cloned().fold(0.0f64, f64::max);
        st.check(Stage::Transport, "euler-identity", worst_euler, 5e-2);
    }

    // weak residuals against the bump corpus
    let phis = test_function_corpus(&grid).map_err(|e| anyhow!("{e}"))?;
    let frame = transport_frame(
        &u0,
        &drift,
        &tr,
        &noise,
        &grid,
        &[half],
        tp.coarsen,
        tp.n_paths.min(8),
        bbox,
    )
    .map_err(|e| anyhow!("{e}"))?;
    let reports = weak_residual_set(&frame, &drift, &tr, &phis).map_err(|e| anyhow!("{e}"))?;
    let mut rows = Vec::new();
    for (q, rep) in reports.iter().enumerate() {
        rows.push(vec![q.to_string(), fmt17(rep.max_abs), fmt17(rep.rms)]);
        st.check(
            Stage::Transport,
            &format!("weak-residual-{q}"),
            rep.max_abs,
            5e-2,
        );
    }
    st.write(
        "weak_residuals.csv",
        &csv_table(&["test_function", "max_abs", "rms"], &rows),
    )?;

    // gradient statistic at r = infinity
    let grep = gradient_transport(&field, &tr, f64::INFINITY, 2.0, tp.radius * 0.8, 1000, sc.mc.seed)
        .map_err(|e| anyhow!("{e}"))?;
    let grows: Vec<Vec<String>> = grep
        .times
        .iter()
        .zip(&grep.statistic)
        .map(|(t, (m, s))| vec![fmt17(*t), fmt17(*m), fmt17(*s)])
        .collect();
    st.write(
        "gradient_statistic.csv",
        &csv_table(&["t", "estimate", "stderr"], &grows),
    )?;
    let (gm, gs) = *grep.statistic.last().unwrap();
    st.note("gradient_statistic", fmt17(gm));
    let finite = (gm.is_finite() && gs.is_finite()) as u8 as f64;
    st.check(Stage::Transport, "gradient-statistic-finite", 1.0 - finite, 0.0);

    // terminal-time field along the first path
    let last = field.out_steps.len() - 1;
    let vals = &field.values[0][last];
    let mut urows = Vec::new();
    for i in 0..grid.node_count() {
        let x = grid.point(i);
        let mut row: Vec<String> = (0..grid.dim).map(|a| fmt17(x[a])).collect();
        row.push(fmt17(vals[i]));
        urows.push(row);
    }
    let mut uheader: Vec<&str> = ["x1", "x2", "x3"][..grid.dim].to_vec();
    uheader.push("u");
    st.write("transport_u.csv", &csv_table(&uheader, &urows))?;
    st.transform = Some(tr);
    Ok(())
}

// ---------------------------------------------------------------------------
// stability
// ---------------------------------------------------------------------------

fn stage_stability(st: &mut RunState) -> Result<()> {
    let sc = st.scenario.clone();
    let drift = sc.drift()?;
    let sigma = sc.sigma(drift.dim);
    let noise = noise_stream(&sc);
    let starts = sc.starts(drift.dim);
    let res = stability_experiment(
        &st.solver_grid,
        &st.time_grid,
        &drift,
        &sigma,
        &sc.stability.ns,
        sc.stability.n_ref,
        &noise,
        &starts,
        sc.mc.n_paths,
        sc.mc.n_steps,
        &picard_options(&sc),
    )
    .map_err(|e| anyhow!("{e}"))?;

    let rows: Vec<Vec<String>> = res
        .ns
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            vec![
                fmt17(n),
                fmt17(res.errors[i]),
                fmt17(res.stderrs[i]),
                fmt17(res.sup_sq_errors[i]),
                fmt17(res.sup_sq_stderrs[i]),
                fmt17(res.pde_dists[i]),
            ]
        })
        .collect();
    st.write(
        "stability.csv",
        &csv_table(
            &["n", "error", "stderr", "sup_sq_error", "sup_sq_stderr", "pde_c1theta"],
            &rows,
        ),
    )?;

    let k = res.ns.len() - 1;
    // the finest mollification must beat the coarsest on both metrics
    st.check(
        Stage::Stability,
        "mc-stability-decay",
        res.sup_sq_errors[k],
        res.sup_sq_errors[0].max(1e-300),
    );
    st.check(
        Stage::Stability,
        "pde-stability-decay",
        res.pde_dists[k],
        res.pde_dists[0].max(1e-300),
    );
    st.note("stability_lambda", fmt17(res.lambda));
    Ok(())
}

// ---------------------------------------------------------------------------
// emission
// ---------------------------------------------------------------------------

fn emit_results(st: &mut RunState) -> Result<()> {
    let rows: Vec<Vec<String>> = st
        .checks
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                c.stage.name().into(),
                fmt17(c.value),
                fmt17(c.tolerance),
                (if c.pass { "pass" } else { "fail" }).into(),
            ]
        })
        .collect();
    st.write(
        "summary.csv",
        &csv_table(&["check", "stage", "value", "tolerance", "status"], &rows),
    )?;
    st.write("diagnostics.csv", &diagnostics_csv(&st.diagnostics))?;

    let mut entries = st.manifest.clone();
    for (name, secs) in &st.timings {
        entries.push((format!("wall_clock_{name}_s"), format!("{secs:.3}")));
    }
    st.write("manifest.txt", &manifest_text(&entries))?;
    Ok(())
}

/// Convenience for tests: the artifact directory of a finished run.
pub fn out_dir(st: &RunState) -> &Path {
    &st.out_dir
}
