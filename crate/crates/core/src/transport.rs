//! Stochastic transport by inverse characteristics.
//!
//! The transport solution is represented pathwise as `u(t, x) = u0(Xinv(x))`
//! where `Xinv` is the inverse stochastic flow of the drift; this module
//! evaluates that representation on the space grid and runs the diagnostic
//! suite around it: conservation of mass and `L^r` norms, the Euler
//! determinant identity, the weak-form residual, gradient statistics of
//! strong solutions, and a uniqueness probe comparing two candidate
//! solutions.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flow::{inverse_flow, simulate_transformed, variational_flow};
use crate::grid::{self, Pt, SpaceGrid, MAX_DIM};
use crate::holder::DriftSpec;
use crate::noise::NoiseStream;
use crate::transform::ZvonkinTransform;

/// A smooth compactly supported radial bump
/// `phi(x) = exp(-1 / (1 - |x - c|^2 / rho^2))` on `|x - c| < rho`, with
/// analytic gradient and Laplacian.
#[derive(Clone)]
pub struct TestFunction {
    pub dim: usize,
    pub center: Pt,
    pub radius: f64,
}

impl TestFunction {
    /// Builds the bump and verifies its support sits strictly inside the
    /// grid box.
    pub fn new(grid: &SpaceGrid, center: Pt, radius: f64) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::InvalidExponents(format!(
                "test-function radius must be positive, got {radius}"
            )));
        }
        let reach = grid::norm2(&center, grid.dim) + radius;
        if reach >= grid.half_extent {
            return Err(Error::SupportEscapesGrid);
        }
        Ok(TestFunction { dim: grid.dim, center, radius })
    }

    /// `s = |x - c|^2 / rho^2`, the squared radial coordinate.
    fn s(&self, x: &Pt) -> f64 {
        grid::dist2(x, &self.center, self.dim).powi(2) / (self.radius * self.radius)
    }

    /// The profile `rho(s) = exp(-1/(1-s))` and its first two derivatives
    /// with respect to `s`, all vanishing smoothly at `s = 1`.
    fn profile(&self, s: f64) -> (f64, f64, f64) {
        if s >= 1.0 - 1e-12 {
            return (0.0, 0.0, 0.0);
        }
        let w = 1.0 - s;
        let v = (-1.0 / w).exp();
        let d1 = -v / (w * w);
        let d2 = v * (1.0 / w.powi(4) - 2.0 / w.powi(3));
        (v, d1, d2)
    }

    pub fn value(&self, x: &Pt) -> f64 {
        self.profile(self.s(x)).0
    }

    pub fn gradient(&self, x: &Pt) -> Pt {
        let (_, d1, _) = self.profile(self.s(x));
        let mut g = grid::zero_pt();
        let r2 = self.radius * self.radius;
        for i in 0..self.dim {
            g[i] = d1 * 2.0 * (x[i] - self.center[i]) / r2;
        }
        g
    }

    pub fn laplacian(&self, x: &Pt) -> f64 {
        let s = self.s(x);
        let (_, d1, d2) = self.profile(s);
        let r2 = self.radius * self.radius;
        // Laplacian of f(s(x)) with s = |x-c|^2 / rho^2:
        //   = f''(s) |grad s|^2 + f'(s) lap s
        //   = f''(s) * 4 |x-c|^2 / rho^4 + f'(s) * 2 d / rho^2
        d2 * 4.0 * s / r2 + d1 * 2.0 * self.dim as f64 / r2
    }
}

/// Three centers by two radii of radial bumps, all supported strictly inside
/// the grid box.
pub fn test_function_corpus(grid: &SpaceGrid) -> Result<Vec<TestFunction>> {
    let he = grid.half_extent;
    let c1 = grid::zero_pt();
    let mut c2 = grid::zero_pt();
    let mut c3 = grid::zero_pt();
    c2[0] = he / 4.0;
    for i in 0..grid.dim {
        c3[i] = -he / 5.0;
    }
    let radii = [he / 3.0, he / 6.0];
    let mut out = Vec::with_capacity(6);
    for c in [c1, c2, c3] {
        for r in radii {
            out.push(TestFunction::new(grid, c, r)?);
        }
    }
    Ok(out)
}

pub type ScalarClosure = dyn Fn(&Pt) -> f64 + Send + Sync;
pub type VectorClosure = dyn Fn(&Pt) -> Pt + Send + Sync;

/// Initial datum for the transport equation: a value closure, an optional
/// analytic gradient, and an optional (sup-norm) support radius used for
/// change-of-variables quadratures.
#[derive(Clone)]
pub struct InitialDatum {
    pub dim: usize,
    pub value: Arc<ScalarClosure>,
    pub gradient: Option<Arc<VectorClosure>>,
    pub support_radius: Option<f64>,
}

impl InitialDatum {
    pub fn new(dim: usize, value: Arc<ScalarClosure>) -> Self {
        InitialDatum { dim, value, gradient: None, support_radius: None }
    }

    pub fn with_gradient(mut self, g: Arc<VectorClosure>) -> Self {
        self.gradient = Some(g);
        self
    }

    pub fn with_support_radius(mut self, r: f64) -> Self {
        self.support_radius = Some(r);
        self
    }

    /// A radial bump of the [`TestFunction`] family scaled to `height`,
    /// carrying its analytic gradient and support radius.
    pub fn bump(grid: &SpaceGrid, center: Pt, radius: f64, height: f64) -> Result<Self> {
        let phi = TestFunction::new(grid, center, radius)?;
        let scale = height / phi.value(&center);
        let p1 = phi.clone();
        let p2 = phi.clone();
        let support = grid::norm2(&center, grid.dim) + radius;
        Ok(InitialDatum {
            dim: grid.dim,
            value: Arc::new(move |x| scale * p1.value(x)),
            gradient: Some(Arc::new(move |x| {
                let mut g = p2.gradient(x);
                for gi in g.iter_mut() {
                    *gi *= scale;
                }
                g
            })),
            support_radius: Some(support),
        })
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        InitialDatum {
            dim,
            value: Arc::new(move |_| c),
            gradient: Some(Arc::new(|_| grid::zero_pt())),
            support_radius: None,
        }
    }
}

/// Pathwise transport solution sampled on the space grid at a ladder of
/// output times (base-step indices). One physical Brownian path per stored
/// realization; `values[path][time][node]` and the inverse characteristics
/// `preimages[path][time][node]` that produced them.
pub struct TransportField {
    pub grid: SpaceGrid,
    pub out_steps: Vec<usize>,
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub values: Vec<Vec<Vec<f64>>>,
    pub preimages: Vec<Vec<Vec<Pt>>>,
    pub u0: InitialDatum,
    pub divergence_free: bool,
    pub excursion_fraction: f64,
    pub noise: NoiseStream,
    /// base increments per Euler step used for the characteristics
    pub coarsen: usize,
    pub box_half_extent: f64,
}

fn check_identity_sigma(tr: &ZvonkinTransform) -> Result<()> {
    for &t in &[0.0, 0.37, 0.93] {
        let s = tr.sigma.sigma_at(t);
        for i in 0..tr.dim {
            for j in 0..tr.dim {
                let want = if i == j { 1.0 } else { 0.0 };
                if (s[i][j] - want).abs() > 1e-12 {
                    return Err(Error::HypothesisViolated(
                        "transport requires unit diffusion".into(),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn euler_steps_for(span: usize, coarsen: usize) -> Result<usize> {
    if coarsen == 0 || span % coarsen != 0 {
        return Err(Error::GridMismatch);
    }
    Ok(span / coarsen)
}

/// A field frame without grid samples: carries the geometry, datum, and
/// noise bookkeeping that `weak_residual_set` needs, skipping the full-grid
/// inverse flows. Use for refinement studies of the weak residual alone.
pub fn transport_frame(
    u0: &InitialDatum,
    drift: &DriftSpec,
    tr: &ZvonkinTransform,
    noise: &NoiseStream,
    grid: &SpaceGrid,
    out_steps: &[usize],
    coarsen: usize,
    n_paths: usize,
    box_half_extent: f64,
) -> Result<TransportField> {
    if !drift.divergence_free {
        return Err(Error::HypothesisViolated(
            "transport requires a divergence-free drift".into(),
        ));
    }
    check_identity_sigma(tr)?;
    if u0.dim != grid.dim || tr.dim != grid.dim {
        return Err(Error::GridMismatch);
    }
    let mut steps: Vec<usize> = out_steps.to_vec();
    if steps.first() != Some(&0) {
        steps.insert(0, 0);
    }
    for &j in &steps[1..] {
        euler_steps_for(j, coarsen)?;
    }
    let times = steps.iter().map(|&j| j as f64 * noise.base_dt()).collect();
    Ok(TransportField {
        grid: grid.clone(),
        out_steps: steps,
        times,
        n_paths,
        values: Vec::new(),
        preimages: Vec::new(),
        u0: u0.clone(),
        divergence_free: drift.divergence_free,
        excursion_fraction: 0.0,
        noise: noise.clone(),
        coarsen,
        box_half_extent,
    })
}

/// Evaluates `u(t, x) = u0(Xinv_{0,t}(x))` on the grid for each of `n_paths`
/// physical Brownian paths at the output base-step indices. Requires a
/// divergence-free drift and unit diffusion.
pub fn solve_transport(
    u0: &InitialDatum,
    drift: &DriftSpec,
    tr: &ZvonkinTransform,
    noise: &NoiseStream,
    grid: &SpaceGrid,
    out_steps: &[usize],
    coarsen: usize,
    n_paths: usize,
    box_half_extent: f64,
) -> Result<TransportField> {
    if !drift.divergence_free {
        return Err(Error::HypothesisViolated(
            "transport requires a divergence-free drift".into(),
        ));
    }
    check_identity_sigma(tr)?;
    if u0.dim != grid.dim || tr.dim != grid.dim {
        return Err(Error::GridMismatch);
    }
    let nodes: Vec<Pt> = (0..grid.node_count()).map(|i| grid.point(i)).collect();
    let mut steps: Vec<usize> = out_steps.to_vec();
    if steps.first() != Some(&0) {
        steps.insert(0, 0);
    }
    let mut values = Vec::with_capacity(n_paths);
    let mut preimages = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        let pnoise = noise.offset_paths(p as u64);
        let mut vrow = Vec::with_capacity(steps.len());
        let mut prow = Vec::with_capacity(steps.len());
        for &j in &steps {
            let zs = if j == 0 {
                nodes.clone()
            } else {
                let es = euler_steps_for(j, coarsen)?;
                inverse_flow(tr, &pnoise, &nodes, 1, (0, j), es, box_half_extent)?
            };
            let us: Vec<f64> = zs.iter().map(|z| (u0.value)(z)).collect();
            vrow.push(us);
            prow.push(zs);
        }
        values.push(vrow);
        preimages.push(prow);
    }
    let times = steps.iter().map(|&j| j as f64 * noise.base_dt()).collect();
    Ok(TransportField {
        grid: grid.clone(),
        out_steps: steps,
        times,
        n_paths,
        values,
        preimages,
        u0: u0.clone(),
        divergence_free: drift.divergence_free,
        excursion_fraction: 0.0,
        noise: noise.clone(),
        coarsen,
        box_half_extent,
    })
}

/// Conservation diagnostics, maximised over paths at each output time.
pub struct ConservationReport {
    pub times: Vec<f64>,
    /// |integral of u(t) - integral of u0| (grid quadrature)
    pub mass_defect: Vec<f64>,
    /// |integral of |u(t)|^r - integral of |u0|^r|, or sup-norm defect when
    /// `r` is infinite
    pub lr_defect: Vec<f64>,
    /// |det grad X_t(x) - target| over a node subsample; target is 1 for
    /// divergence-free drifts and exp(int div b) otherwise
    pub euler_defect: Vec<f64>,
    /// true when the Euler identity check was skipped (no divergence
    /// closure for a non-divergence-free drift)
    pub euler_skipped: bool,
    /// pointwise range violations of min u0 <= u <= max u0 over the grid
    pub max_principle_defect: f64,
}

fn grid_quadrature(grid: &SpaceGrid, vals: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let w = grid.spacing.powi(grid.dim as i32);
    vals.iter().map(|&v| f(v)).sum::<f64>() * w
}

/// Every `stride`-th grid node, for cheap subsampled path statistics.
fn subsample_nodes(grid: &SpaceGrid, max_nodes: usize) -> Vec<Pt> {
    let n = grid.node_count();
    let stride = n.div_ceil(max_nodes).max(1);
    (0..n).step_by(stride).map(|i| grid.point(i)).collect()
}

pub fn conservation_checks(
    field: &TransportField,
    r: f64,
    tr: &ZvonkinTransform,
    drift: &DriftSpec,
) -> Result<ConservationReport> {
    if r <= 0.0 {
        return Err(Error::InvalidExponents(format!(
            "conservation exponent r must be positive, got {r}"
        )));
    }
    let grid = &field.grid;
    let u0_vals = &field.values[0][0];
    let mass0 = grid_quadrature(grid, u0_vals, |v| v);
    let lr0 = if r.is_finite() {
        grid_quadrature(grid, u0_vals, |v| v.abs().powf(r))
    } else {
        u0_vals.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    let (min0, max0) = u0_vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));

    let euler_nodes = subsample_nodes(grid, 33);
    let euler_possible = drift.divergence_free || drift.div_closure.is_some();

    let mut mass_defect = vec![0.0f64; field.out_steps.len()];
    let mut lr_defect = vec![0.0f64; field.out_steps.len()];
    let mut euler_defect = vec![0.0f64; field.out_steps.len()];
    let mut max_principle_defect = 0.0f64;

    for p in 0..field.n_paths {
        let pnoise = field.noise.offset_paths(p as u64);
        for (k, &j) in field.out_steps.iter().enumerate() {
            let uv = &field.values[p][k];
            let mass = grid_quadrature(grid, uv, |v| v);
            mass_defect[k] = mass_defect[k].max((mass - mass0).abs());
            let lr = if r.is_finite() {
                grid_quadrature(grid, uv, |v| v.abs().powf(r))
            } else {
                uv.iter().fold(0.0f64, |m, v| m.max(v.abs()))
            };
            lr_defect[k] = lr_defect[k].max((lr - lr0).abs());
            for &v in uv {
                max_principle_defect =
                    max_principle_defect.max((min0 - v).max(v - max0).max(0.0));
            }
            if j > 0 && euler_possible {
                let es = euler_steps_for(j, field.coarsen)?;
                let var = variational_flow(
                    tr,
                    &pnoise,
                    &euler_nodes,
                    1,
                    (0, j),
                    es,
                    field.box_half_extent,
                )?;
                let targets: Vec<f64> = if drift.divergence_free {
                    vec![1.0; euler_nodes.len()]
                } else {
                    euler_identity_targets(field, drift, tr, &pnoise, &euler_nodes, j)?
                };
                for (g, target) in var.grad_x.iter().zip(targets) {
                    let d = (grid::det(g, tr.dim) - target).abs();
                    euler_defect[k] = euler_defect[k].max(d);
                }
            }
        }
    }
    Ok(ConservationReport {
        times: field.times.clone(),
        mass_defect,
        lr_defect,
        euler_defect,
        euler_skipped: !euler_possible,
        max_principle_defect,
    })
}

/// `exp(int_0^t div b(tau, X_tau(x)) dtau)` along forward characteristics,
/// by left-point quadrature on the Euler grid.
fn euler_identity_targets(
    field: &TransportField,
    drift: &DriftSpec,
    tr: &ZvonkinTransform,
    pnoise: &NoiseStream,
    nodes: &[Pt],
    j: usize,
) -> Result<Vec<f64>> {
    let div = drift
        .div_closure
        .as_ref()
        .ok_or(Error::MissingDivergence)?;
    let es = euler_steps_for(j, field.coarsen)?;
    let record: Vec<usize> = (0..es).collect();
    let fw = simulate_transformed(
        tr,
        pnoise,
        nodes,
        1,
        (0, j),
        es,
        &record,
        field.box_half_extent,
    )?;
    let dt = j as f64 * pnoise.base_dt() / es as f64;
    let mut acc = vec![0.0f64; nodes.len()];
    for (step, xs) in &fw.x_snapshots {
        if *step == es {
            break;
        }
        let t = *step as f64 * dt;
        for (a, x) in acc.iter_mut().zip(xs) {
            *a += div(t, x) * dt;
        }
    }
    Ok(acc.into_iter().map(f64::exp).collect())
}

/// Maximum over the time grid (and paths) of the weak-form residual
///
///   R(t) = int u phi |_0^t - int_0^t int u b . grad phi dx dtau
///          - sum_i int_0^t (int u d_i phi dx) dW_i
///          - 1/2 int_0^t int u lap phi dx dtau,
///
/// evaluated by the forward change of variables
/// `int u(tau) g dx = h^d sum_z u0(z) g(X_tau(z))` over the support nodes of
/// `u0` (all grid nodes when no support radius is declared).
pub struct WeakResidualReport {
    pub times: Vec<f64>,
    /// max over paths of |R| at each Euler time
    pub residual: Vec<f64>,
    /// max over the time grid of |R|, one entry per path
    pub per_path_max: Vec<f64>,
    pub max_abs: f64,
    /// root mean square over paths of max_t |R|; the pathwise residual is a
    /// random Ito remainder, so this is the statistic with a stable Dt^{1/2}
    /// refinement order
    pub rms: f64,
    /// signed R at the final time, one entry per path; differences of these
    /// across step ladders cancel step-independent bias pathwise, which makes
    /// them the robust input for an empirical-order fit
    pub per_path_terminal: Vec<f64>,
    /// root mean square over paths of |R| at the final time; unlike the
    /// running maximum this compares like with like across step ladders,
    /// since max_t over a finer grid sees more of the same excursions
    pub terminal_rms: f64,
}

/// Weak-form residuals for a whole set of test functions; the flow is
/// simulated once per path and shared across the set.
pub fn weak_residual_set(
    field: &TransportField,
    drift: &DriftSpec,
    tr: &ZvonkinTransform,
    phis: &[TestFunction],
) -> Result<Vec<WeakResidualReport>> {
    let grid = &field.grid;
    for phi in phis {
        if phi.dim != grid.dim {
            return Err(Error::GridMismatch);
        }
        let reach = grid::norm2(&phi.center, phi.dim) + phi.radius;
        if reach >= grid.half_extent {
            return Err(Error::SupportEscapesGrid);
        }
    }
    let j_end = *field.out_steps.last().expect("output ladder");
    if j_end == 0 {
        return Ok(phis
            .iter()
            .map(|_| WeakResidualReport {
                times: vec![0.0],
                residual: vec![0.0],
                per_path_max: vec![0.0; field.n_paths],
                max_abs: 0.0,
                rms: 0.0,
                per_path_terminal: vec![0.0; field.n_paths],
                terminal_rms: 0.0,
            })
            .collect());
    }
    let es = euler_steps_for(j_end, field.coarsen)?;
    let dt = j_end as f64 * field.noise.base_dt() / es as f64;
    let w = grid.spacing.powi(grid.dim as i32);

    // support nodes of u0 with a margin of one spacing
    let margin = field.u0.support_radius.map(|r| r + grid.spacing);
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for i in 0..grid.node_count() {
        let z = grid.point(i);
        if let Some(rad) = margin {
            if grid::norm2(&z, grid.dim) > rad {
                continue;
            }
        }
        let u = (field.u0.value)(&z);
        nodes.push(z);
        weights.push(u * w);
    }

    let record: Vec<usize> = (0..=es).collect();
    let dim = grid.dim;
    let nphi = phis.len();
    let mut residual = vec![vec![0.0f64; es + 1]; nphi];
    let mut per_path_max = vec![Vec::with_capacity(field.n_paths); nphi];
    let mut per_path_end = vec![Vec::with_capacity(field.n_paths); nphi];
    for p in 0..field.n_paths {
        let pnoise = field.noise.offset_paths(p as u64);
        let fw = simulate_transformed(
            tr,
            &pnoise,
            &nodes,
            1,
            (0, j_end),
            es,
            &record,
            field.box_half_extent,
        )?;
        let per = j_end / es;
        // per-step spatial integrals via change of variables, per test function
        let mut a = vec![vec![0.0f64; es + 1]; nphi]; // int u phi
        let mut bgrad = vec![vec![0.0f64; es + 1]; nphi]; // int u b . grad phi
        let mut cgrad = vec![vec![grid::zero_pt(); es + 1]; nphi]; // int u grad phi
        let mut lap = vec![vec![0.0f64; es + 1]; nphi]; // int u lap phi
        for (step, xs) in &fw.x_snapshots {
            let k = *step;
            let t = k as f64 * dt;
            for (wt, x) in weights.iter().zip(xs) {
                let b = drift.eval(t, x);
                for (q, phi) in phis.iter().enumerate() {
                    a[q][k] += wt * phi.value(x);
                    let g = phi.gradient(x);
                    let mut bg = 0.0;
                    for i in 0..dim {
                        bg += b[i] * g[i];
                        cgrad[q][k][i] += wt * g[i];
                    }
                    bgrad[q][k] += wt * bg;
                    lap[q][k] += wt * phi.laplacian(x);
                }
            }
        }
        for q in 0..nphi {
            let mut drift_int = 0.0;
            let mut ito_int = 0.0;
            let mut lap_int = 0.0;
            let mut path_max = 0.0f64;
            for k in 0..=es {
                let r = a[q][k] - a[q][0] - drift_int - ito_int - 0.5 * lap_int;
                residual[q][k] = residual[q][k].max(r.abs());
                path_max = path_max.max(r.abs());
                if k == es {
                    per_path_end[q].push(r);
                    break;
                }
                drift_int += bgrad[q][k] * dt;
                lap_int += lap[q][k] * dt;
                let b0 = k * per;
                for i in 0..dim {
                    ito_int += cgrad[q][k][i] * pnoise.increment(0, b0, b0 + per, i);
                }
            }
            per_path_max[q].push(path_max);
        }
    }
    let times: Vec<f64> = (0..=es).map(|k| k as f64 * dt).collect();
    Ok(residual
        .into_iter()
        .zip(per_path_max.into_iter().zip(per_path_end))
        .map(|(res, (ppm, ppe))| {
            let max_abs = res.iter().fold(0.0f64, |m, &v| m.max(v));
            let n = ppm.len().max(1) as f64;
            let rms = (ppm.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            let terminal_rms = (ppe.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            WeakResidualReport {
                times: times.clone(),
                residual: res,
                per_path_max: ppm,
                max_abs,
                rms,
                per_path_terminal: ppe,
                terminal_rms,
            }
        })
        .collect())
}

pub fn weak_residual(
    field: &TransportField,
    drift: &DriftSpec,
    tr: &ZvonkinTransform,
    phi: &TestFunction,
) -> Result<WeakResidualReport> {
    let mut v = weak_residual_set(field, drift, tr, std::slice::from_ref(phi))?;
    Ok(v.remove(0))
}

/// Gradient statistics of the strong solution,
/// `grad u(t,x) = grad u0(z) . [grad X_t(z)]^{-1}` at `z = Xinv_t(x)`.
pub struct GradientReport {
    pub times: Vec<f64>,
    /// bootstrap (estimate, stderr) over paths at each output time
    pub statistic: Vec<(f64, f64)>,
    pub r: f64,
    /// moment power used in the sup-norm (`r` infinite) mode
    pub p: f64,
}

pub fn gradient_transport(
    field: &TransportField,
    tr: &ZvonkinTransform,
    r: f64,
    p: f64,
    stat_radius: f64,
    resamples: usize,
    seed: u64,
) -> Result<GradientReport> {
    let g0 = field.u0.gradient.as_ref().ok_or(Error::MissingGradient)?;
    let grid = &field.grid;
    let dim = grid.dim;
    let w = grid.spacing.powi(dim as i32);
    // indices of grid nodes inside the statistics ball
    let stat_idx: Vec<usize> = (0..grid.node_count())
        .filter(|&i| grid::norm2(&grid.point(i), dim) <= stat_radius)
        .collect();
    if stat_idx.is_empty() {
        return Err(Error::DegenerateGrid);
    }
    let mut statistic = Vec::with_capacity(field.out_steps.len());
    for (k, &j) in field.out_steps.iter().enumerate() {
        let mut samples = Vec::with_capacity(field.n_paths);
        for pth in 0..field.n_paths {
            let pnoise = field.noise.offset_paths(pth as u64);
            let zs: Vec<Pt> = stat_idx.iter().map(|&i| field.preimages[pth][k][i]).collect();
            let grads: Vec<grid::Mat> = if j == 0 {
                vec![grid::identity(dim); zs.len()]
            } else {
                let es = euler_steps_for(j, field.coarsen)?;
                variational_flow(tr, &pnoise, &zs, 1, (0, j), es, field.box_half_extent)?
                    .grad_x
            };
            let mut acc = 0.0f64;
            for (z, gx) in zs.iter().zip(&grads) {
                let gxi = grid::mat_inv(gx, dim)?;
                let gu0 = g0(z);
                let mut gu = grid::zero_pt();
                for jj in 0..dim {
                    for i in 0..dim {
                        gu[jj] += gu0[i] * gxi[i][jj];
                    }
                }
                let norm = grid::norm2(&gu, dim);
                if r.is_finite() {
                    acc += norm.powf(r) * w;
                } else {
                    acc = acc.max(norm.powf(p));
                }
            }
            samples.push(acc);
        }
        statistic.push(crate::stats::bootstrap_mean_stderr(&samples, resamples, seed)?);
    }
    Ok(GradientReport { times: field.times.clone(), statistic, r, p })
}

/// Max over test functions, times, and paths of
/// `|int (u_a - u_b) phi dx|` for two candidate solutions with the same
/// initial datum, grid, and noise.
pub fn uniqueness_probe(
    a: &TransportField,
    b: &TransportField,
    phis: &[TestFunction],
) -> Result<f64> {
    if a.grid.dim != b.grid.dim
        || a.grid.nodes_per_axis != b.grid.nodes_per_axis
        || (a.grid.half_extent - b.grid.half_extent).abs() > 1e-15
        || a.out_steps != b.out_steps
    {
        return Err(Error::GridMismatch);
    }
    if a.noise.seed != b.noise.seed
        || a.noise.base_steps != b.noise.base_steps
        || a.n_paths != b.n_paths
    {
        return Err(Error::MismatchedStreams);
    }
    let grid = &a.grid;
    let w = grid.spacing.powi(grid.dim as i32);
    let phi_tables: Vec<Vec<f64>> = phis
        .iter()
        .map(|phi| (0..grid.node_count()).map(|i| phi.value(&grid.point(i))).collect())
        .collect();
    let mut worst = 0.0f64;
    for p in 0..a.n_paths {
        for k in 0..a.out_steps.len() {
            let ua = &a.values[p][k];
            let ub = &b.values[p][k];
            for tab in &phi_tables {
                let mut s = 0.0;
                for ((va, vb), ph) in ua.iter().zip(ub).zip(tab) {
                    s += (va - vb) * ph;
                }
                worst = worst.max((s * w).abs());
            }
        }
    }
    Ok(worst)
}

/// Representation check: `u(t, X_t(x)) = u0(x)` per path, using forward
/// characteristics and multilinear interpolation of the stored slice.
/// Returns the max defect over a node subsample.
pub fn representation_defect(
    field: &TransportField,
    tr: &ZvonkinTransform,
) -> Result<f64> {
    let grid = &field.grid;
    let nodes = subsample_nodes(grid, 65);
    // stay away from the box edge so interpolation clamping cannot bite
    let inner: Vec<Pt> = nodes
        .into_iter()
        .filter(|z| grid::norm2(z, grid.dim) <= grid.half_extent * 0.5)
        .collect();
    let mut worst = 0.0f64;
    for p in 0..field.n_paths {
        let pnoise = field.noise.offset_paths(p as u64);
        for (k, &j) in field.out_steps.iter().enumerate() {
            if j == 0 {
                continue;
            }
            let es = euler_steps_for(j, field.coarsen)?;
            let fw = simulate_transformed(
                tr,
                &pnoise,
                &inner,
                1,
                (0, j),
                es,
                &[],
                field.box_half_extent,
            )?;
            let slice = &field.values[p][k];
            for (z, x) in inner.iter().zip(fw.x_terminal()) {
                if !grid.contains(x) {
                    continue;
                }
                let u_here = interp_slice(grid, slice, x);
                worst = worst.max((u_here - (field.u0.value)(z)).abs());
            }
        }
    }
    Ok(worst)
}

/// Multilinear interpolation of a per-node scalar table.
fn interp_slice(grid: &SpaceGrid, vals: &[f64], x: &Pt) -> f64 {
    let (anchor, frac) = grid.interp_anchor(x);
    let dim = grid.dim;
    let corners = 1usize << dim;
    let mut out = 0.0;
    for c in 0..corners {
        let mut idx = [0usize; MAX_DIM];
        let mut wt = 1.0;
        for a in 0..dim {
            let up = (c >> a) & 1 == 1;
            idx[a] = anchor[a] + usize::from(up);
            wt *= if up { frac[a] } else { 1.0 - frac[a] };
        }
        out += wt * vals[grid.flatten(&idx)];
    }
    out
}
