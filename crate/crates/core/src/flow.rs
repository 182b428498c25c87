//! Euler–Maruyama flows driven by the shared counter-based noise: the direct
//! scheme, the scheme in transformed coordinates (drift removed up to the
//! bounded remainder lambda U), inverse flows by time-reversed stepping, and
//! the variational (derivative) flow.
//!
//! Path layout: path p starts at `x0s[p]` and draws its Brownian increments
//! from rep index `p % n_reps`, so paths that share a rep share the noise —
//! this is what makes difference quotients and scheme comparisons meaningful.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{self, Mat, Pt, SpaceGrid, TimeGrid};
use crate::holder::DriftSpec;
use crate::kernel::DiffusionCoefficient;
use crate::noise::NoiseStream;
use crate::pde::PicardOptions;
use crate::transform::{build_transform, build_transform_fixed_lambda, ZvonkinTransform};

/// cap on the per-step fixed-point iterations of the inverse flow
pub const INVERSE_STEP_ITERS: usize = 30;

/// Drift/diffusion pair of an SDE in whatever coordinates the flow runs in.
pub trait SdeCoeffs: Sync {
    fn dim(&self) -> usize;
    fn pair(&self, t: f64, x: &Pt) -> Result<(Pt, Mat)>;
}

pub struct DirectCoeffs<'a> {
    pub drift: &'a DriftSpec,
    pub sigma: &'a DiffusionCoefficient,
}

impl SdeCoeffs for DirectCoeffs<'_> {
    fn dim(&self) -> usize {
        self.drift.dim
    }
    fn pair(&self, t: f64, x: &Pt) -> Result<(Pt, Mat)> {
        Ok((self.drift.eval(t, x), self.sigma.sigma_at(t)))
    }
}

/// Coefficients of the transformed equation, expressed in y-coordinates:
/// the state is inverted through Psi once per evaluation.
pub struct TransformedCoeffs<'a> {
    pub tr: &'a ZvonkinTransform,
}

impl SdeCoeffs for TransformedCoeffs<'_> {
    fn dim(&self) -> usize {
        self.tr.dim
    }
    fn pair(&self, t: f64, y: &Pt) -> Result<(Pt, Mat)> {
        let x = self.tr.psi(t, y)?;
        Ok((
            self.tr.transformed_drift_at_preimage(t, &x),
            self.tr.transformed_sigma_at_preimage(t, &x),
        ))
    }
}

pub struct FlowOutput {
    /// pairs (euler step index, positions for every path at that step)
    pub snapshots: Vec<(usize, Vec<Pt>)>,
    /// fraction of (path, step) states outside the reference box
    pub excursion_fraction: f64,
}

impl FlowOutput {
    pub fn terminal(&self) -> &[Pt] {
        &self.snapshots.last().expect("terminal snapshot").1
    }
}

/// Expands grid-of-starts x reps into the path layout described above.
pub fn expand_starts(x0s: &[Pt], n_reps: usize) -> Vec<Pt> {
    let mut out = Vec::with_capacity(x0s.len() * n_reps);
    for x in x0s {
        for _ in 0..n_reps {
            out.push(*x);
        }
    }
    out
}

fn window_geometry(
    noise: &NoiseStream,
    window: (usize, usize),
    euler_steps: usize,
) -> Result<(usize, f64, f64)> {
    let (j0, j1) = window;
    if j1 < j0 || j1 > noise.base_steps {
        return Err(Error::BadWindow { s: j0 as f64, t: j1 as f64 });
    }
    let span = j1 - j0;
    if span == 0 {
        return Ok((0, 0.0, j0 as f64 * noise.base_dt()));
    }
    if euler_steps == 0 || span % euler_steps != 0 {
        return Err(Error::GridMismatch);
    }
    let per = span / euler_steps;
    let dt = per as f64 * noise.base_dt();
    Ok((per, dt, j0 as f64 * noise.base_dt()))
}

/// Forward Euler–Maruyama over the base-window `(j0, j1)` with `euler_steps`
/// steps (each step must span a whole number of base increments). Snapshots
/// are taken at the requested euler step indices; the terminal is always
/// recorded.
pub fn euler_flow(
    coeffs: &dyn SdeCoeffs,
    noise: &NoiseStream,
    x0s: &[Pt],
    n_reps: usize,
    window: (usize, usize),
    euler_steps: usize,
    record: &[usize],
    box_half_extent: f64,
) -> Result<FlowOutput> {
    let dim = coeffs.dim();
    let (per, dt, t0) = window_geometry(noise, window, euler_steps)?;
    let mut marks: Vec<usize> = record.to_vec();
    marks.push(euler_steps);
    marks.sort_unstable();
    marks.dedup();
    if per == 0 {
        // empty window: the flow is the identity
        return Ok(FlowOutput {
            snapshots: vec![(0, x0s.to_vec())],
            excursion_fraction: 0.0,
        });
    }

    let per_path: Result<Vec<(Vec<Pt>, usize)>> = x0s
        .par_iter()
        .enumerate()
        .map(|(p, x0)| {
            let rep = (p % n_reps.max(1)) as u64;
            let mut x = *x0;
            let mut exc = 0usize;
            let mut snaps = Vec::with_capacity(marks.len());
            let mut mark_iter = marks.iter().peekable();
            if let Some(&&0) = mark_iter.peek() {
                snaps.push(x);
                mark_iter.next();
            }
            for k in 0..euler_steps {
                let t = t0 + k as f64 * dt;
                let (b, s) = coeffs.pair(t, &x)?;
                let mut dw = grid::zero_pt();
                let b0 = window.0 + k * per;
                for c in 0..dim {
                    dw[c] = noise.increment(rep, b0, b0 + per, c);
                }
                for i in 0..dim {
                    let mut inc = b[i] * dt;
                    for j in 0..dim {
                        inc += s[i][j] * dw[j];
                    }
                    x[i] += inc;
                }
                if (0..dim).any(|a| x[a].abs() > box_half_extent) {
                    exc += 1;
                }
                if let Some(&&m) = mark_iter.peek() {
                    if m == k + 1 {
                        snaps.push(x);
                        mark_iter.next();
                    }
                }
            }
            Ok((snaps, exc))
        })
        .collect();
    let per_path = per_path?;

    let mut snapshots: Vec<(usize, Vec<Pt>)> = marks
        .iter()
        .map(|&m| (m, Vec::with_capacity(x0s.len())))
        .collect();
    let mut excursions = 0usize;
    for (snaps, exc) in per_path {
        excursions += exc;
        for (slot, pos) in snapshots.iter_mut().zip(snaps) {
            slot.1.push(pos);
        }
    }
    Ok(FlowOutput {
        snapshots,
        excursion_fraction: excursions as f64 / (x0s.len() * euler_steps) as f64,
    })
}

/// Time-reversed explicit Euler: starting from states at the window end,
/// steps back to the window start reusing the same increments, which
/// approximates the inverse flow map.
pub fn euler_flow_inverse(
    coeffs: &dyn SdeCoeffs,
    noise: &NoiseStream,
    y_end: &[Pt],
    n_reps: usize,
    window: (usize, usize),
    euler_steps: usize,
    box_half_extent: f64,
) -> Result<FlowOutput> {
    let dim = coeffs.dim();
    let (per, dt, t0) = window_geometry(noise, window, euler_steps)?;
    if per == 0 {
        return Ok(FlowOutput {
            snapshots: vec![(0, y_end.to_vec())],
            excursion_fraction: 0.0,
        });
    }
    let per_path: Result<Vec<(Pt, usize)>> = y_end
        .par_iter()
        .enumerate()
        .map(|(p, yt)| {
            let rep = (p % n_reps.max(1)) as u64;
            let mut z = *yt;
            let mut exc = 0usize;
            for k in (0..euler_steps).rev() {
                // solve the forward step for its preimage: find w with
                // w + b(t_k, w) dt + s(t_k, w) dW_k = z. The map is a
                // contraction for small dt; a plain explicit reversal would
                // invert a different flow (it drops the Ito correction that
                // state-dependent diffusion picks up under time reversal).
                let t = t0 + k as f64 * dt;
                let mut dw = grid::zero_pt();
                let b0 = window.0 + k * per;
                for c in 0..dim {
                    dw[c] = noise.increment(rep, b0, b0 + per, c);
                }
                let mut w = z;
                for _ in 0..INVERSE_STEP_ITERS {
                    let (b, s) = coeffs.pair(t, &w)?;
                    let mut next = z;
                    let mut delta = 0.0f64;
                    for i in 0..dim {
                        let mut inc = b[i] * dt;
                        for j in 0..dim {
                            inc += s[i][j] * dw[j];
                        }
                        next[i] -= inc;
                        delta = delta.max((next[i] - w[i]).abs());
                    }
                    w = next;
                    if delta < 1e-13 {
                        break;
                    }
                }
                z = w;
                if (0..dim).any(|a| z[a].abs() > box_half_extent) {
                    exc += 1;
                }
            }
            Ok((z, exc))
        })
        .collect();
    let per_path = per_path?;
    let mut terminal = Vec::with_capacity(y_end.len());
    let mut excursions = 0usize;
    for (z, e) in per_path {
        terminal.push(z);
        excursions += e;
    }
    Ok(FlowOutput {
        snapshots: vec![(0, terminal)],
        excursion_fraction: excursions as f64 / (y_end.len() * euler_steps) as f64,
    })
}

pub struct TransformedFlow {
    pub y: FlowOutput,
    /// positions mapped back through Psi at every snapshot
    pub x_snapshots: Vec<(usize, Vec<Pt>)>,
}

impl TransformedFlow {
    pub fn x_terminal(&self) -> &[Pt] {
        &self.x_snapshots.last().expect("terminal").1
    }
}

/// Runs the flow in transformed coordinates: Y_0 = Phi(s, x_0), Euler steps
/// on the bounded-coefficient equation, X = Psi(t, Y) at each snapshot.
pub fn simulate_transformed(
    tr: &ZvonkinTransform,
    noise: &NoiseStream,
    x0s: &[Pt],
    n_reps: usize,
    window: (usize, usize),
    euler_steps: usize,
    record: &[usize],
    box_half_extent: f64,
) -> Result<TransformedFlow> {
    let (per, dt, t0) = window_geometry(noise, window, euler_steps)?;
    if per == 0 {
        // an empty window is exactly the identity map
        let snap = vec![(0usize, x0s.to_vec())];
        return Ok(TransformedFlow {
            y: FlowOutput { snapshots: snap.clone(), excursion_fraction: 0.0 },
            x_snapshots: snap,
        });
    }
    let y0s: Vec<Pt> = x0s.iter().map(|x| tr.phi(t0, x)).collect();
    let coeffs = TransformedCoeffs { tr };
    let y = euler_flow(&coeffs, noise, &y0s, n_reps, window, euler_steps, record, box_half_extent)?;
    let mut x_snapshots = Vec::with_capacity(y.snapshots.len());
    for (step, ys) in &y.snapshots {
        let t = t0 + *step as f64 * if euler_steps == 0 { 0.0 } else { dt };
        let xs: Result<Vec<Pt>> = ys.iter().map(|yy| tr.psi(t, yy)).collect();
        x_snapshots.push((*step, xs?));
    }
    Ok(TransformedFlow { y, x_snapshots })
}

/// Direct Euler scheme on the original equation.
pub fn simulate_direct(
    drift: &DriftSpec,
    sigma: &DiffusionCoefficient,
    noise: &NoiseStream,
    x0s: &[Pt],
    n_reps: usize,
    window: (usize, usize),
    euler_steps: usize,
    record: &[usize],
    box_half_extent: f64,
) -> Result<FlowOutput> {
    let coeffs = DirectCoeffs { drift, sigma };
    euler_flow(&coeffs, noise, x0s, n_reps, window, euler_steps, record, box_half_extent)
}

/// Inverse flow through the transform: X^{-1}_{s,t}(x) = Psi(s, Yinv) where
/// Yinv runs the transformed equation backward from Phi(t, x).
pub fn inverse_flow(
    tr: &ZvonkinTransform,
    noise: &NoiseStream,
    xs: &[Pt],
    n_reps: usize,
    window: (usize, usize),
    euler_steps: usize,
    box_half_extent: f64,
) -> Result<Vec<Pt>> {
    let (_, dt, t0) = window_geometry(noise, window, euler_steps)?;
    let t1 = t0 + euler_steps as f64 * dt;
    let y_end: Vec<Pt> = xs.iter().map(|x| tr.phi(t1, x)).collect();
    let coeffs = TransformedCoeffs { tr };
    let back = euler_flow_inverse(&coeffs, noise, &y_end, n_reps, window, euler_steps, box_half_extent)?;
    back.terminal().iter().map(|y| tr.psi(t0, y)).collect()
}

pub struct VariationalOutput {
    pub x_terminal: Vec<Pt>,
    /// spatial derivative of the flow map at each path start
    pub grad_x: Vec<Mat>,
    /// raw derivative of the transformed flow (initialised at the identity)
    pub zeta: Vec<Mat>,
    /// per-path running supremum over time of the Hilbert-Schmidt norm of
    /// the flow derivative grad X_t
    pub sup_grad_hs: Vec<f64>,
    pub excursion_fraction: f64,
}

/// Jointly evolves the transformed state Y and its derivative zeta:
///
///   d zeta = lambda grad U(Psi(Y)) M dt + [hess U(Psi(Y)) (sigma dW)] M,
///   M = grad Psi(t, Y) zeta,
///
/// then chains grad X = grad Psi(t, Y_t) . zeta_t . grad Phi(s, x_0).
pub fn variational_flow(
    tr: &ZvonkinTransform,
    noise: &NoiseStream,
    x0s: &[Pt],
    n_reps: usize,
    window: (usize, usize),
    euler_steps: usize,
    box_half_extent: f64,
) -> Result<VariationalOutput> {
    let dim = tr.dim;
    let (per, dt, t0) = window_geometry(noise, window, euler_steps)?;
    if per == 0 {
        return Ok(VariationalOutput {
            x_terminal: x0s.to_vec(),
            grad_x: vec![grid::identity(dim); x0s.len()],
            zeta: vec![grid::identity(dim); x0s.len()],
            sup_grad_hs: vec![(dim as f64).sqrt(); x0s.len()],
            excursion_fraction: 0.0,
        });
    }
    let t1 = t0 + euler_steps as f64 * dt;
    let per_path: Result<Vec<(Pt, Mat, Mat, f64, usize)>> = x0s
        .par_iter()
        .enumerate()
        .map(|(p, x0)| {
            let rep = (p % n_reps.max(1)) as u64;
            let mut y = tr.phi(t0, x0);
            let mut zeta = grid::identity(dim);
            let mut exc = 0usize;
            // linearize the *interpolated* maps exactly: difference quotients
            // of the simulated flow then converge to zeta as the offset shrinks
            let gphi0 = tr.grad_phi_discrete(t0, x0);
            let mut sup_hs = (dim as f64).sqrt(); // grad X at t = s is the identity
            for k in 0..euler_steps {
                let t = t0 + k as f64 * dt;
                let x = tr.psi(t, &y)?;
                let gu = tr.grad_u_discrete(t, &x);
                let gpsi = tr.grad_psi_discrete_at_preimage(t, &x)?;
                let gx_now = grid::mat_mul(&gpsi, &grid::mat_mul(&zeta, &gphi0, dim), dim);
                sup_hs = sup_hs.max(grid::frobenius(&gx_now, dim));
                let sig = tr.sigma.sigma_at(t);
                let m = grid::mat_mul(&gpsi, &zeta, dim);
                let mut dw = grid::zero_pt();
                let b0 = window.0 + k * per;
                for c in 0..dim {
                    dw[c] = noise.increment(rep, b0, b0 + per, c);
                }
                // sigma dW once per step
                let mut sdw = grid::zero_pt();
                for i in 0..dim {
                    for j in 0..dim {
                        sdw[i] += sig[i][j] * dw[j];
                    }
                }
                // state update
                let bt = tr.transformed_drift_at_preimage(t, &x);
                let st = tr.transformed_sigma_at_preimage(t, &x);
                for i in 0..dim {
                    let mut inc = bt[i] * dt;
                    for j in 0..dim {
                        inc += st[i][j] * dw[j];
                    }
                    y[i] += inc;
                }
                // derivative update
                let mut dz = grid::zero_mat();
                for i in 0..dim {
                    let hess = tr.hess_u_discrete(t, &x, i);
                    for j in 0..dim {
                        let mut drift_term = 0.0;
                        let mut noise_term = 0.0;
                        for k2 in 0..dim {
                            drift_term += gu[i][k2] * m[k2][j];
                            for l in 0..dim {
                                noise_term += hess[k2][l] * sdw[k2] * m[l][j];
                            }
                        }
                        dz[i][j] = tr.lambda * drift_term * dt + noise_term;
                    }
                }
                for i in 0..dim {
                    for j in 0..dim {
                        zeta[i][j] += dz[i][j];
                    }
                }
                if (0..dim).any(|a| y[a].abs() > box_half_extent) {
                    exc += 1;
                }
            }
            let x_end = tr.psi(t1, &y)?;
            let gpsi_end = tr.grad_psi_discrete_at_preimage(t1, &x_end)?;
            let gx = grid::mat_mul(&gpsi_end, &grid::mat_mul(&zeta, &gphi0, dim), dim);
            let sup_hs = sup_hs.max(grid::frobenius(&gx, dim));
            Ok((x_end, gx, zeta, sup_hs, exc))
        })
        .collect();
    let per_path = per_path?;
    let mut x_terminal = Vec::with_capacity(x0s.len());
    let mut grad_x = Vec::with_capacity(x0s.len());
    let mut zeta = Vec::with_capacity(x0s.len());
    let mut sup_grad_hs = Vec::with_capacity(x0s.len());
    let mut excursions = 0usize;
    for (x, g, z, s, e) in per_path {
        x_terminal.push(x);
        grad_x.push(g);
        zeta.push(z);
        sup_grad_hs.push(s);
        excursions += e;
    }
    Ok(VariationalOutput {
        x_terminal,
        grad_x,
        zeta,
        sup_grad_hs,
        excursion_fraction: excursions as f64 / (x0s.len() * euler_steps) as f64,
    })
}

/// Empirical p-th moment of the Hilbert–Schmidt norm of per-path matrices,
/// with a deterministic bootstrap standard error. Needs at least 100 paths.
pub fn moment_estimator(
    mats: &[Mat],
    dim: usize,
    p: f64,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if mats.len() < 100 {
        return Err(Error::TooFewPaths(mats.len()));
    }
    let samples: Vec<f64> = mats.iter().map(|m| grid::frobenius(m, dim).powf(p)).collect();
    crate::stats::bootstrap_mean_stderr(&samples, resamples, seed)
}

/// Empirical p-th moment of nonnegative per-path scalars (e.g. the running
/// supremum of the flow-derivative norm), with bootstrap standard error.
pub fn scalar_moment_estimator(
    samples: &[f64],
    p: f64,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples.len() < 100 {
        return Err(Error::TooFewPaths(samples.len()));
    }
    let powered: Vec<f64> = samples.iter().map(|s| s.powf(p)).collect();
    crate::stats::bootstrap_mean_stderr(&powered, resamples, seed)
}

#[derive(Debug, Clone, Copy)]
pub struct FlowCheckReport {
    pub identity_defect: f64,
    /// mean |X_{s,u} - X_{t,u} o X_{s,t}| with the composed legs run at twice
    /// the resolution of the single leg (both converge to the true flow)
    pub composition_defect: f64,
    pub excursion_fraction: f64,
}

/// Semigroup checks of the transformed scheme over a three-point window
/// ladder `j0 < j1 < j2` (base-step indices).
pub fn flow_checks(
    tr: &ZvonkinTransform,
    noise: &NoiseStream,
    x0s: &[Pt],
    n_reps: usize,
    windows: (usize, usize, usize),
    coarse_steps_per_leg: (usize, usize, usize),
    box_half_extent: f64,
) -> Result<FlowCheckReport> {
    let (j0, j1, j2) = windows;
    if !(j0 < j1 && j1 < j2) {
        return Err(Error::BadWindow { s: j0 as f64, t: j2 as f64 });
    }
    // identity: an empty window returns the starts untouched
    let idf = simulate_transformed(tr, noise, x0s, n_reps, (j0, j0), 0, &[], box_half_extent)?;
    let mut identity_defect: f64 = 0.0;
    for (a, b) in idf.x_terminal().iter().zip(x0s) {
        identity_defect = identity_defect.max(grid::dist2(a, b, tr.dim));
    }

    let (full, leg1, leg2) = coarse_steps_per_leg;
    let whole = simulate_transformed(tr, noise, x0s, n_reps, (j0, j2), full, &[], box_half_extent)?;
    let first = simulate_transformed(tr, noise, x0s, n_reps, (j0, j1), leg1 * 2, &[], box_half_extent)?;
    let second = simulate_transformed(
        tr,
        noise,
        first.x_terminal(),
        n_reps,
        (j1, j2),
        leg2 * 2,
        &[],
        box_half_extent,
    )?;
    let mut comp = 0.0;
    for (a, b) in whole.x_terminal().iter().zip(second.x_terminal()) {
        comp += grid::dist2(a, b, tr.dim);
    }
    let composition_defect = comp / x0s.len() as f64;
    Ok(FlowCheckReport {
        identity_defect,
        composition_defect,
        excursion_fraction: whole.y.excursion_fraction,
    })
}

pub struct StabilityResult {
    pub ns: Vec<f64>,
    pub errors: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// sup over start points of the bootstrap mean of
    /// sup over recorded times of |X^n - X^ref|^2 (stderr at the argmax)
    pub sup_sq_errors: Vec<f64>,
    pub sup_sq_stderrs: Vec<f64>,
    /// C_b^{1,theta} distance between the transform solutions U_n and U_ref
    pub pde_dists: Vec<f64>,
    pub lambda: f64,
}

/// `sup |u| + sup |grad u| + theta-seminorm of grad u` of the difference of
/// two solution tables, maximised over a thinned set of time slices.
fn pde_c1theta_distance(
    a: &crate::pde::PdeSolution,
    b: &crate::pde::PdeSolution,
    theta: f64,
) -> Result<f64> {
    let grid = &a.u.grid;
    let dim = grid.dim;
    let slices = a.u.time.slices();
    let mut worst = 0.0f64;
    let stride = (slices / 8).max(1);
    for k in (0..slices).step_by(stride) {
        let du: Vec<f64> = a
            .u
            .slice(k)
            .iter()
            .zip(b.u.slice(k))
            .map(|(x, y)| x - y)
            .collect();
        let dg: Vec<f64> = a
            .grad
            .slice(k)
            .iter()
            .zip(b.grad.slice(k))
            .map(|(x, y)| x - y)
            .collect();
        let sup_u = crate::holder::sup_norm(&du, dim);
        let sup_g = crate::holder::sup_norm(&dg, dim * dim);
        let sem_g = crate::holder::holder_seminorm(grid, &dg, dim * dim, theta, 200_000)?;
        worst = worst.max(sup_u + sup_g + sem_g);
    }
    Ok(worst)
}

/// Strong-stability experiment: mollify the drift along the ladder `ns`,
/// run the transformed scheme against the reference mollification `n_ref`
/// under shared noise, and report mean terminal discrepancies.
#[allow(clippy::too_many_arguments)]
pub fn stability_experiment(
    grid: &SpaceGrid,
    time: &TimeGrid,
    drift: &DriftSpec,
    sigma: &DiffusionCoefficient,
    ns: &[f64],
    n_ref: f64,
    noise: &NoiseStream,
    x0s: &[Pt],
    n_reps: usize,
    euler_steps: usize,
    opts: &PicardOptions,
) -> Result<StabilityResult> {
    drift.exponents.require_transport_window()?;
    if noise.base_steps % euler_steps != 0 {
        return Err(Error::GridMismatch);
    }
    let starts = expand_starts(x0s, n_reps);
    let window = (0usize, noise.base_steps);

    let b_ref = drift.mollified(n_ref)?.sample(grid, time);
    let (tr_ref, _) = {
        let tr = build_transform(grid, time, &b_ref, sigma, 0.5, 4.0, 65536.0, opts)?;
        let l = tr.lambda;
        (tr, l)
    };
    let lambda = tr_ref.lambda;
    // snapshots along the way so sup_t is sampled, not just the terminal
    let record: Vec<usize> = (1..8).map(|k| k * euler_steps / 8).filter(|&m| m > 0).collect();
    let reference = simulate_transformed(
        &tr_ref, noise, &starts, n_reps, window, euler_steps, &record, grid.half_extent,
    )?;

    let reps = n_reps.max(1);
    let mut errors = Vec::new();
    let mut stderrs = Vec::new();
    let mut sup_sq_errors = Vec::new();
    let mut sup_sq_stderrs = Vec::new();
    let mut pde_dists = Vec::new();
    let theta = drift.exponents.theta;
    for &n in ns {
        let b_n = drift.mollified(n)?.sample(grid, time);
        let tr_n = build_transform_fixed_lambda(grid, time, &b_n, sigma, lambda, opts)?;
        let run = simulate_transformed(
            &tr_n, noise, &starts, n_reps, window, euler_steps, &record, grid.half_extent,
        )?;
        // per path: terminal distance and sup over recorded times of the
        // squared distance
        let mut term_diffs = vec![0.0f64; starts.len()];
        let mut sup_sq = vec![0.0f64; starts.len()];
        for ((_, xs_n), (_, xs_r)) in run.x_snapshots.iter().zip(&reference.x_snapshots) {
            for (p, (a, b)) in xs_n.iter().zip(xs_r).enumerate() {
                let d = grid::dist2(a, b, grid.dim);
                sup_sq[p] = sup_sq[p].max(d * d);
                term_diffs[p] = d;
            }
        }
        let (m, s) = crate::stats::bootstrap_mean_stderr(&term_diffs, 1000, 0x57ab)?;
        errors.push(m);
        stderrs.push(s);
        // group paths by start point: path p starts at x0s[p / n_reps]
        let mut worst = (0.0f64, 0.0f64);
        for i0 in 0..x0s.len() {
            let samples: Vec<f64> = (0..reps).map(|r| sup_sq[i0 * reps + r]).collect();
            let (sm, ss) = crate::stats::bootstrap_mean_stderr(&samples, 1000, 0x57ab)?;
            if sm > worst.0 {
                worst = (sm, ss);
            }
        }
        sup_sq_errors.push(worst.0);
        sup_sq_stderrs.push(worst.1);
        pde_dists.push(pde_c1theta_distance(&tr_n.solution, &tr_ref.solution, theta)?);
    }
    Ok(StabilityResult {
        ns: ns.to_vec(),
        errors,
        stderrs,
        sup_sq_errors,
        sup_sq_stderrs,
        pde_dists,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SampledField;
    use crate::holder::HolderExponents;
    use std::sync::Arc;

    fn zero_drift(dim: usize) -> DriftSpec {
        let e = HolderExponents::new(1.5, 0.6, None).unwrap();
        DriftSpec::new(dim, e, Arc::new(|_t, _x: &Pt, out: &mut [f64]| out.fill(0.0)))
    }

    fn smooth_drift() -> DriftSpec {
        let e = HolderExponents::new(1.5, 0.6, None).unwrap();
        DriftSpec::new(
            1,
            e,
            Arc::new(|t: f64, x: &Pt, out: &mut [f64]| out[0] = (x[0] + 0.2 * t).sin()),
        )
    }

    fn zero_transform(l: f64, h: f64, steps: usize) -> ZvonkinTransform {
        let g = SpaceGrid::new(1, l, h).unwrap();
        let tg = TimeGrid::new(1.0, steps).unwrap();
        let sigma = DiffusionCoefficient::identity(1);
        let b = SampledField::zeros(g.clone(), tg.clone(), 1);
        build_transform_fixed_lambda(&g, &tg, &b, &sigma, 4.0, &PicardOptions::default()).unwrap()
    }

    #[test]
    fn driftless_flow_is_exactly_the_brownian_path() {
        let noise = NoiseStream::new(11, 256, 1.0);
        let drift = zero_drift(1);
        let sigma = DiffusionCoefficient::identity(1);
        let x0s = vec![[0.5, 0.0, 0.0]; 4];
        let out = simulate_direct(&drift, &sigma, &noise, &x0s, 4, (0, 256), 64, &[], f64::INFINITY)
            .unwrap();
        for (p, x) in out.terminal().iter().enumerate() {
            let w = noise.brownian_at(p as u64, 256, 0);
            assert!((x[0] - (0.5 + w)).abs() < 1e-14, "path {p}");
        }
        // empty window = identity map
        let idm = simulate_direct(&drift, &sigma, &noise, &x0s, 4, (7, 7), 0, &[], f64::INFINITY)
            .unwrap();
        assert_eq!(idm.terminal(), &x0s[..]);
    }

    #[test]
    fn refinement_shares_the_same_brownian_increments() {
        let noise = NoiseStream::new(3, 512, 2.0);
        let drift = zero_drift(1);
        let sigma = DiffusionCoefficient::identity(1);
        let x0s = vec![[0.0, 0.0, 0.0]; 2];
        let a = simulate_direct(&drift, &sigma, &noise, &x0s, 2, (0, 512), 32, &[], f64::INFINITY)
            .unwrap();
        let b = simulate_direct(&drift, &sigma, &noise, &x0s, 2, (0, 512), 512, &[], f64::INFINITY)
            .unwrap();
        // zero drift: Euler is exact, both resolutions land on W_T
        for (xa, xb) in a.terminal().iter().zip(b.terminal()) {
            assert!((xa[0] - xb[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn window_validation_errors() {
        let noise = NoiseStream::new(0, 64, 1.0);
        let drift = zero_drift(1);
        let sigma = DiffusionCoefficient::identity(1);
        let x0s = vec![[0.0, 0.0, 0.0]];
        // steps not dividing the base span
        let r = simulate_direct(&drift, &sigma, &noise, &x0s, 1, (0, 64), 48, &[], f64::INFINITY);
        assert!(matches!(r, Err(Error::GridMismatch)));
        let r = simulate_direct(&drift, &sigma, &noise, &x0s, 1, (32, 16), 8, &[], f64::INFINITY);
        assert!(matches!(r, Err(Error::BadWindow { .. })));
    }

    #[test]
    fn transformed_flow_with_zero_drift_equals_direct() {
        let tr = zero_transform(6.0, 1.0 / 16.0, 64);
        let noise = NoiseStream::new(9, 128, 1.0);
        let x0s = vec![[0.2, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let tf = simulate_transformed(&tr, &noise, &x0s, 2, (0, 128), 32, &[], 6.0).unwrap();
        for (p, x) in tf.x_terminal().iter().enumerate() {
            let w = noise.brownian_at(p as u64, 128, 0);
            assert!((x[0] - (x0s[p][0] + w)).abs() < 1e-10);
        }
    }

    #[test]
    fn direct_and_transformed_schemes_agree_on_smooth_drift() {
        let g = SpaceGrid::new(1, 8.0, 1.0 / 32.0).unwrap();
        let tg = TimeGrid::new(1.0, 128).unwrap();
        let sigma = DiffusionCoefficient::identity(1);
        let drift = smooth_drift();
        let b = drift.sample(&g, &tg);
        let tr = build_transform(&g, &tg, &b, &sigma, 0.5, 4.0, 65536.0, &PicardOptions::default())
            .unwrap();
        let noise = NoiseStream::new(21, 512, 1.0);
        let x0s: Vec<Pt> = (0..8).map(|i| [-1.5 + 0.4 * i as f64, 0.0, 0.0]).collect();
        let starts = expand_starts(&x0s, 16);
        let mut mean_diff = Vec::new();
        for &steps in &[64usize, 256] {
            let d = simulate_direct(&drift, &sigma, &noise, &starts, 16, (0, 512), steps, &[], 8.0)
                .unwrap();
            let t = simulate_transformed(&tr, &noise, &starts, 16, (0, 512), steps, &[], 8.0)
                .unwrap();
            let diffs: Vec<f64> = d
                .terminal()
                .iter()
                .zip(t.x_terminal())
                .map(|(a, b)| (a[0] - b[0]).abs())
                .collect();
            mean_diff.push(crate::stats::mean(&diffs));
        }
        assert!(mean_diff[1] < mean_diff[0], "{mean_diff:?}");
        assert!(mean_diff[1] < 0.05, "{mean_diff:?}");
    }

    #[test]
    fn inverse_flow_undoes_the_forward_flow() {
        let g = SpaceGrid::new(1, 8.0, 1.0 / 32.0).unwrap();
        let tg = TimeGrid::new(1.0, 128).unwrap();
        let sigma = DiffusionCoefficient::identity(1);
        let drift = smooth_drift();
        let b = drift.sample(&g, &tg);
        let tr = build_transform(&g, &tg, &b, &sigma, 0.5, 4.0, 65536.0, &PicardOptions::default())
            .unwrap();
        let noise = NoiseStream::new(5, 256, 1.0);
        let x0s: Vec<Pt> = (0..6).map(|i| [-1.0 + 0.4 * i as f64, 0.0, 0.0]).collect();
        let mut errs = Vec::new();
        for &steps in &[64usize, 256] {
            let fwd = simulate_transformed(&tr, &noise, &x0s, x0s.len(), (0, 256), steps, &[], 8.0)
                .unwrap();
            let back = inverse_flow(&tr, &noise, fwd.x_terminal(), x0s.len(), (0, 256), steps, 8.0)
                .unwrap();
            let mut worst: f64 = 0.0;
            for (a, b) in back.iter().zip(&x0s) {
                worst = worst.max((a[0] - b[0]).abs());
            }
            errs.push(worst);
        }
        // the per-step implicit inversion is the exact inverse of the scheme
        assert!(errs.iter().all(|&e| e < 1e-8), "{errs:?}");
    }

    #[test]
    fn variational_flow_is_identity_for_zero_drift() {
        let tr = zero_transform(4.0, 1.0 / 16.0, 32);
        let noise = NoiseStream::new(13, 64, 1.0);
        let x0s = vec![[0.7, 0.0, 0.0], [-0.4, 0.0, 0.0]];
        let out = variational_flow(&tr, &noise, &x0s, 2, (0, 64), 32, 4.0).unwrap();
        for z in &out.zeta {
            assert_eq!(z[0][0], 1.0);
        }
        for gx in &out.grad_x {
            assert_eq!(gx[0][0], 1.0);
        }
    }

    #[test]
    fn variational_flow_matches_difference_quotients() {
        let g = SpaceGrid::new(1, 8.0, 1.0 / 32.0).unwrap();
        let tg = TimeGrid::new(1.0, 128).unwrap();
        let sigma = DiffusionCoefficient::identity(1);
        let drift = smooth_drift();
        let b = drift.sample(&g, &tg);
        let tr = build_transform(&g, &tg, &b, &sigma, 0.5, 4.0, 65536.0, &PicardOptions::default())
            .unwrap();
        let noise = NoiseStream::new(17, 256, 1.0);
        let delta = 1e-3;
        let x0 = 0.4;
        // same rep for all three paths -> shared noise difference quotient
        let starts = vec![[x0, 0.0, 0.0], [x0 + delta, 0.0, 0.0]];
        let fwd = simulate_transformed(&tr, &noise, &starts, 1, (0, 256), 256, &[], 8.0).unwrap();
        let quo = (fwd.x_terminal()[1][0] - fwd.x_terminal()[0][0]) / delta;
        let var = variational_flow(&tr, &noise, &starts[..1], 1, (0, 256), 256, 8.0).unwrap();
        let gx = var.grad_x[0][0][0];
        assert!((quo - gx).abs() < 0.05, "quotient {quo} vs variational {gx}");
    }

    #[test]
    fn moment_estimator_zero_drift_baseline() {
        let mats = vec![grid::identity(2); 128];
        let (m2, s2) = moment_estimator(&mats, 2, 2.0, 200, 1).unwrap();
        assert!((m2 - 2.0).abs() < 1e-12 && s2 == 0.0); // HS norm sqrt(2), p = 2
        let (m4, _) = moment_estimator(&mats, 2, 4.0, 200, 1).unwrap();
        assert!((m4 - 4.0).abs() < 1e-12);
        assert!(moment_estimator(&mats[..50], 2, 2.0, 200, 1).is_err());
    }

    #[test]
    fn flow_checks_identity_and_composition() {
        let g = SpaceGrid::new(1, 8.0, 1.0 / 32.0).unwrap();
        let tg = TimeGrid::new(1.0, 128).unwrap();
        let sigma = DiffusionCoefficient::identity(1);
        let b = smooth_drift().sample(&g, &tg);
        let tr = build_transform(&g, &tg, &b, &sigma, 0.5, 4.0, 65536.0, &PicardOptions::default())
            .unwrap();
        let noise = NoiseStream::new(31, 512, 1.0);
        let x0s: Vec<Pt> = (0..8).map(|i| [-1.4 + 0.4 * i as f64, 0.0, 0.0]).collect();
        let r1 = flow_checks(&tr, &noise, &x0s, x0s.len(), (0, 192, 512), (8, 3, 5), 8.0).unwrap();
        assert_eq!(r1.identity_defect, 0.0);
        let r2 = flow_checks(&tr, &noise, &x0s, x0s.len(), (0, 192, 512), (32, 12, 20), 8.0).unwrap();
        assert!(r2.composition_defect < r1.composition_defect, "{} vs {}", r2.composition_defect, r1.composition_defect);
    }
}
