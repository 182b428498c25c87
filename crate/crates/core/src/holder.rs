//! Hölder/Lebesgue-Hölder norms, the Poisson-integral equivalent norm, the
//! degree classifier, mollifiers and the spatial cutoff.
//!
//! All seminorms computed here are grid-sampled lower bounds of the true
//! suprema; they are monotone in the pair budget and converge under grid
//! refinement.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Pt, SampledField, SpaceGrid, MAX_DIM};

/// All-pairs evaluation is used up to this node count; above it the seminorm
/// falls back to dyadic ladders plus random pairs.
pub const ALL_PAIRS_NODE_LIMIT: usize = 4096;
pub const DEFAULT_PAIR_BUDGET: usize = 1_000_000;

/// Exponent bundle (q, alpha) with the derived low exponent `2/q - 1` and the
/// working regularity gain `theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderExponents {
    pub q: f64,
    pub alpha: f64,
    pub gamma_low: f64,
    pub theta: f64,
}

impl HolderExponents {
    /// Validates `q in (2/(1+alpha), 2)` and `theta in (0, 1 + alpha - 2/q)`.
    /// `theta` defaults to the center of its admissible interval.
    pub fn new(q: f64, alpha: f64, theta: Option<f64>) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidExponents(format!(
                "alpha must lie in (0,1), got {alpha}"
            )));
        }
        let q_lo = 2.0 / (1.0 + alpha);
        if !(q > q_lo && q < 2.0) {
            return Err(Error::InvalidExponents(format!(
                "q must lie in (2/(1+alpha), 2) = ({q_lo:.6}, 2); got q = {q}. \
                 The endpoint q = 2 (with p = infinity) is the open critical case."
            )));
        }
        let gamma_low = 2.0 / q - 1.0;
        let theta_max = 1.0 + alpha - 2.0 / q;
        let theta = theta.unwrap_or(0.5 * theta_max);
        if !(theta > 0.0 && theta < theta_max) {
            return Err(Error::InvalidExponents(format!(
                "theta must lie in (0, 1 + alpha - 2/q) = (0, {theta_max:.6}); got {theta}"
            )));
        }
        Ok(HolderExponents {
            q,
            alpha,
            gamma_low,
            theta,
        })
    }

    /// Extra gate for the transport/stability features: `q in (4/(2+alpha), 2)`.
    pub fn require_transport_window(&self) -> Result<()> {
        let lo = 4.0 / (2.0 + self.alpha);
        if self.q > lo && self.q < 2.0 {
            Ok(())
        } else {
            Err(Error::HypothesisViolated(format!(
                "transport/stability features need q in (4/(2+alpha), 2) = ({lo:.6}, 2); got q = {}",
                self.q
            )))
        }
    }
}

pub type DriftFn = dyn Fn(f64, &Pt, &mut [f64]) + Send + Sync;
pub type ScalarFn = dyn Fn(f64, &Pt) -> f64 + Send + Sync;

/// A time-space vector field given as an analytic closure plus metadata.
#[derive(Clone)]
pub struct DriftSpec {
    pub dim: usize,
    pub closure: Arc<DriftFn>,
    pub exponents: HolderExponents,
    pub divergence_free: bool,
    pub div_closure: Option<Arc<ScalarFn>>,
}

impl DriftSpec {
    pub fn new(
        dim: usize,
        exponents: HolderExponents,
        closure: Arc<DriftFn>,
    ) -> Self {
        DriftSpec {
            dim,
            closure,
            exponents,
            divergence_free: false,
            div_closure: None,
        }
    }

    pub fn with_divergence(mut self, div: Arc<ScalarFn>, divergence_free: bool) -> Self {
        self.div_closure = Some(div);
        self.divergence_free = divergence_free;
        self
    }

    pub fn eval(&self, t: f64, x: &Pt) -> Pt {
        let mut out = [0.0; MAX_DIM];
        (self.closure)(t, x, &mut out[..self.dim]);
        out
    }

    pub fn sample(&self, grid: &SpaceGrid, time: &crate::grid::TimeGrid) -> SampledField {
        let c = self.closure.clone();
        SampledField::from_closure(grid.clone(), time.clone(), self.dim, move |t, x, out| {
            c(t, x, out)
        })
    }

    /// Space mollification `b * rho_n` as a new analytic closure. The
    /// convolution is evaluated on the fly by midpoint quadrature over the
    /// mollifier support, with weights normalised to unit mass so constants
    /// are preserved exactly.
    pub fn mollified(&self, n: f64) -> Result<DriftSpec> {
        if n < 1.0 {
            return Err(Error::BadMollifierIndex(n));
        }
        let dim = self.dim;
        let quad = MollifierQuad::space(dim, n);
        let inner = self.closure.clone();
        let closure: Arc<DriftFn> = Arc::new(move |t, x, out| {
            out.fill(0.0);
            let mut shifted = *x;
            let mut tmp = [0.0f64; MAX_DIM];
            for (z, w) in quad.nodes.iter().zip(&quad.weights) {
                for a in 0..dim {
                    shifted[a] = x[a] - z[a];
                }
                inner(t, &shifted, &mut tmp[..dim]);
                for c in 0..dim {
                    out[c] += w * tmp[c];
                }
            }
        });
        let mut out = DriftSpec::new(dim, self.exponents, closure);
        // div(b * rho_n) = (div b) * rho_n, so the flag survives mollification
        out.divergence_free = self.divergence_free;
        if let Some(divc) = &self.div_closure {
            let quad = MollifierQuad::space(dim, n);
            let inner = divc.clone();
            out.div_closure = Some(Arc::new(move |t, x| {
                let mut acc = 0.0;
                let mut shifted = *x;
                for (z, w) in quad.nodes.iter().zip(&quad.weights) {
                    for a in 0..dim {
                        shifted[a] = x[a] - z[a];
                    }
                    acc += w * inner(t, &shifted);
                }
                acc
            }));
        }
        Ok(out)
    }

    /// Spatial cutoff `b_R(t,x) = b(t, x * chi(x / R))`; constant outside `B_{2R}`.
    pub fn cutoff(&self, radius: f64) -> DriftSpec {
        let dim = self.dim;
        let inner = self.closure.clone();
        let closure: Arc<DriftFn> = Arc::new(move |t, x, out| {
            let y = cutoff_point(x, dim, radius);
            inner(t, &y, out);
        });
        DriftSpec::new(dim, self.exponents, closure)
    }
}

/// `x * chi(|x|/R)` with the smooth radial profile `chi` (1 on B_R, 0 off B_2R).
pub fn cutoff_point(x: &Pt, dim: usize, radius: f64) -> Pt {
    let r = crate::grid::norm2(x, dim);
    let chi = cutoff_profile(r / radius);
    let mut y = *x;
    for a in 0..dim {
        y[a] = x[a] * chi;
    }
    y
}

/// Smooth partition-of-unity profile: 1 for r <= 1, 0 for r >= 2,
/// monotone in between with |chi'| <= 2.
pub fn cutoff_profile(r: f64) -> f64 {
    fn edge(s: f64) -> f64 {
        if s <= 0.0 {
            0.0
        } else {
            (-1.0 / s).exp()
        }
    }
    let up = edge(2.0 - r);
    let down = edge(r - 1.0);
    if up + down == 0.0 {
        if r <= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        up / (up + down)
    }
}

/// The standard normalized bump `exp(-1/(1-|x|^2))` on the unit ball.
pub fn bump(x2: f64) -> f64 {
    if x2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - x2)).exp()
    }
}

/// Quadrature rule for `rho_n` (space) or `varrho_m` (time), weights
/// normalised to unit mass.
pub struct MollifierQuad {
    pub nodes: Vec<Pt>,
    pub weights: Vec<f64>,
}

impl MollifierQuad {
    pub fn space(dim: usize, n: f64) -> Self {
        let per_axis = 25usize;
        let radius = 1.0 / n;
        let h = 2.0 * radius / per_axis as f64;
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let total = per_axis.pow(dim as u32);
        for flat in 0..total {
            let mut rem = flat;
            let mut z = [0.0f64; MAX_DIM];
            for a in 0..dim {
                let i = rem % per_axis;
                rem /= per_axis;
                z[a] = -radius + (i as f64 + 0.5) * h;
            }
            let r2 = z[..dim].iter().map(|v| v * v).sum::<f64>() / (radius * radius);
            let w = bump(r2);
            if w > 0.0 {
                nodes.push(z);
                weights.push(w);
            }
        }
        let mass: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= mass;
        }
        MollifierQuad { nodes, weights }
    }

    /// Time kernel supported on `[0, 1/m]`.
    pub fn time(m: f64) -> Self {
        let per = 25usize;
        let width = 1.0 / m;
        let h = width / per as f64;
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for i in 0..per {
            let tau = (i as f64 + 0.5) * h;
            // bump profile shifted to [0,1] and scaled
            let s = tau / width; // in (0,1)
            let w = bump((2.0 * s - 1.0) * (2.0 * s - 1.0));
            if w > 0.0 {
                let mut z = [0.0f64; MAX_DIM];
                z[0] = tau;
                nodes.push(z);
                weights.push(w);
            }
        }
        let mass: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= mass;
        }
        MollifierQuad { nodes, weights }
    }
}

fn vec_mag(vals: &[f64], off: usize, comps: usize) -> f64 {
    if comps == 1 {
        vals[off].abs()
    } else {
        vals[off..off + comps]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Grid-sampled Hölder seminorm `sup |h(x)-h(y)| / |x-y|^gamma` at one time
/// slice. All pairs below `ALL_PAIRS_NODE_LIMIT` nodes; dyadic ladders along
/// each axis plus deterministic random pairs above it.
pub fn holder_seminorm(
    grid: &SpaceGrid,
    vals: &[f64],
    comps: usize,
    gamma: f64,
    pair_budget: usize,
) -> Result<f64> {
    if grid.node_count() < 2 {
        return Err(Error::DegenerateGrid);
    }
    if !vals.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite);
    }
    assert!(gamma > 0.0 && gamma <= 1.0, "gamma in (0,1]");
    let n = grid.node_count();
    let dim = grid.dim;
    let mut best: f64 = 0.0;

    let quot = |a: usize, b: usize| -> f64 {
        let pa = grid.point(a);
        let pb = grid.point(b);
        let dist = crate::grid::dist2(&pa, &pb, dim);
        if dist == 0.0 {
            return 0.0;
        }
        let mut diff2 = 0.0;
        for c in 0..comps {
            let d = vals[a * comps + c] - vals[b * comps + c];
            diff2 += d * d;
        }
        diff2.sqrt() / dist.powf(gamma)
    };

    if n <= ALL_PAIRS_NODE_LIMIT {
        for a in 0..n {
            for b in (a + 1)..n {
                best = best.max(quot(a, b));
            }
        }
        return Ok(best);
    }

    // dyadic ladders: each node against its neighbour at distance 2^j per axis
    let napx = grid.nodes_per_axis;
    for a in 0..n {
        let idx = grid.unflatten(a);
        for axis in 0..dim {
            let stride = napx.pow(axis as u32);
            let mut step = 1usize;
            while idx[axis] + step < napx {
                best = best.max(quot(a, a + step * stride));
                step *= 2;
            }
        }
    }
    // deterministic random pairs up to the budget
    let mut state: u64 = 0x5eed_0f0f ^ (n as u64);
    let ladder_pairs = n * dim * (napx as f64).log2() as usize;
    // cap so an effectively unbounded budget stays proportional to the grid
    let extra = pair_budget.saturating_sub(ladder_pairs).min(64 * n);
    for _ in 0..extra {
        let a = (splitmix(&mut state) % n as u64) as usize;
        let b = (splitmix(&mut state) % n as u64) as usize;
        if a != b {
            best = best.max(quot(a, b));
        }
    }
    Ok(best)
}

/// `max over nodes of |h(x)| / (1 + |x|^gamma)`.
pub fn weighted_sup_norm(grid: &SpaceGrid, vals: &[f64], comps: usize, gamma: f64) -> Result<f64> {
    if !vals.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite);
    }
    assert!(gamma >= 0.0);
    let mut best: f64 = 0.0;
    for node in 0..grid.node_count() {
        let p = grid.point(node);
        let r = crate::grid::norm2(&p, grid.dim);
        let w = 1.0 + r.powf(gamma);
        best = best.max(vec_mag(vals, node * comps, comps) / w);
    }
    Ok(best)
}

/// Plain sup norm over nodes.
pub fn sup_norm(vals: &[f64], comps: usize) -> f64 {
    let mut best: f64 = 0.0;
    let n = vals.len() / comps;
    for node in 0..n {
        best = best.max(vec_mag(vals, node * comps, comps));
    }
    best
}

/// Which spatial norm enters the Lebesgue-in-time norm.
#[derive(Debug, Clone, Copy)]
pub enum SliceNorm {
    /// `|(1+|x|^{g'})^{-1} h|_0 + [h]_{g'} + [h]_g` (the C^{g'} ∩ C^g norm)
    Intersection { gamma_lo: f64, gamma_hi: f64 },
    /// `sum_i |grad^i h|_0 + [grad^k h]_g` with k in {0, 1}
    BoundedHolder { k: usize, gamma: f64 },
}

/// `( int_0^T |f(t)|^q dt )^{1/q}` assembled by composite trapezoid over the
/// time grid; `q = +inf` takes the max over slices.
pub fn lebesgue_holder_norm(
    field: &SampledField,
    q: f64,
    which: SliceNorm,
    pair_budget: usize,
) -> Result<f64> {
    if field.time.slices() == 0 {
        return Err(Error::EmptyTimeGrid);
    }
    let grad = match which {
        SliceNorm::BoundedHolder { k: 1, .. } => Some(field.gradient()),
        _ => None,
    };
    let mut slice_norms = Vec::with_capacity(field.time.slices());
    for k in 0..field.time.slices() {
        let vals = field.slice(k);
        let norm = match which {
            SliceNorm::Intersection { gamma_lo, gamma_hi } => {
                weighted_sup_norm(&field.grid, vals, field.comps, gamma_lo)?
                    + holder_seminorm(&field.grid, vals, field.comps, gamma_lo, pair_budget)?
                    + holder_seminorm(&field.grid, vals, field.comps, gamma_hi, pair_budget)?
            }
            SliceNorm::BoundedHolder { k: 0, gamma } => {
                sup_norm(vals, field.comps)
                    + holder_seminorm(&field.grid, vals, field.comps, gamma, pair_budget)?
            }
            SliceNorm::BoundedHolder { k: 1, gamma } => {
                let g = grad.as_ref().unwrap();
                sup_norm(vals, field.comps)
                    + sup_norm(g.slice(k), g.comps)
                    + holder_seminorm(&field.grid, g.slice(k), g.comps, gamma, pair_budget)?
            }
            SliceNorm::BoundedHolder { k, .. } => {
                return Err(Error::InvalidExponents(format!(
                    "BoundedHolder supports k in {{0,1}}, got {k}"
                )))
            }
        };
        slice_norms.push(norm);
    }
    Ok(time_lq_norm(&slice_norms, field.time.dt(), q))
}

/// Composite trapezoid of `t -> v(t)^q` followed by the q-th root.
pub fn time_lq_norm(slice_norms: &[f64], dt: f64, q: f64) -> f64 {
    if q.is_infinite() {
        return slice_norms.iter().cloned().fold(0.0, f64::max);
    }
    let m = slice_norms.len() - 1;
    let mut acc = 0.0;
    for k in 0..=m {
        let w = if k == 0 || k == m { 0.5 } else { 1.0 };
        acc += w * slice_norms[k].powf(q) * dt;
    }
    acc.powf(1.0 / q)
}

// ---------------------------------------------------------------------------
// Poisson integral and the equivalent norm
// ---------------------------------------------------------------------------

/// Poisson integral of a clamped grid field (d = 1): exact arctan tails for
/// the constant extension, tan-substitution midpoint quadrature inside the box.
fn poisson_grid_1d(grid: &SpaceGrid, vals: &[f64], x: f64, xi: f64, n_quad: usize) -> f64 {
    let l = grid.half_extent;
    let u_lo = ((x - l) / xi).atan();
    let u_hi = ((x + l) / xi).atan();
    let du = (u_hi - u_lo) / n_quad as f64;
    let mut acc = 0.0;
    let mut out = [0.0f64];
    for i in 0..n_quad {
        let u = u_lo + (i as f64 + 0.5) * du;
        let z = xi * u.tan();
        crate::grid::eval_slice(grid, vals, 1, &[x - z, 0.0, 0.0], &mut out);
        acc += out[0];
    }
    acc *= du / PI;
    let left_edge = vals[vals.len() - 1]; // h(+L): z -> -inf region maps to x - z >= L
    let right_edge = vals[0]; // h(-L)
    acc += left_edge * (u_lo + PI / 2.0) / PI;
    acc += right_edge * (PI / 2.0 - u_hi) / PI;
    acc
}

/// Poisson integral of a clamped grid field (d = 2) by radial tan-substitution
/// and angular midpoint quadrature.
fn poisson_grid_2d(grid: &SpaceGrid, vals: &[f64], x: &Pt, xi: f64, n_rad: usize, n_ang: usize) -> f64 {
    let du = (PI / 2.0) / n_rad as f64;
    let dth = 2.0 * PI / n_ang as f64;
    let mut acc = 0.0;
    let mut out = [0.0f64];
    for i in 0..n_rad {
        let u = (i as f64 + 0.5) * du;
        let r = xi * u.tan();
        let w = u.sin() * du / (2.0 * PI) * dth;
        for j in 0..n_ang {
            let th = (j as f64 + 0.5) * dth;
            let p = [x[0] - r * th.cos(), x[1] - r * th.sin(), 0.0];
            crate::grid::eval_slice(grid, vals, 1, &p, &mut out);
            acc += w * out[0];
        }
    }
    acc
}

/// Poisson integral `P_xi h (x)` of a scalar grid slice with clamped extension.
pub fn poisson_integral(grid: &SpaceGrid, vals: &[f64], x: &Pt, xi: f64) -> f64 {
    match grid.dim {
        1 => poisson_grid_1d(grid, vals, x[0], xi, 1024),
        2 => poisson_grid_2d(grid, vals, x, xi, 96, 48),
        _ => panic!("poisson integral implemented for d <= 2"),
    }
}

/// Poisson integral of an analytic 1-d function over a finite window
/// `|z| <= z_cut` (no tail term). Hybrid quadrature: tan-substitution near the
/// kernel peak, uniform steps outside.
pub fn poisson_integral_closure_1d(
    h: &dyn Fn(f64) -> f64,
    x: f64,
    xi: f64,
    z_cut: f64,
    dz_outer: f64,
) -> f64 {
    let z_in = (10.0 * xi).max(1.0).min(z_cut);
    let kernel = |z: f64| xi / (PI * (xi * xi + z * z));
    let mut acc = 0.0;
    // inner region by tan substitution
    let u_hi = (z_in / xi).atan();
    let n_in = 4096usize;
    let du = 2.0 * u_hi / n_in as f64;
    for i in 0..n_in {
        let u = -u_hi + (i as f64 + 0.5) * du;
        let z = xi * u.tan();
        acc += h(x - z) * du / PI;
    }
    // outer region, uniform in z
    let mut z = z_in;
    while z < z_cut {
        let step = dz_outer.min(z_cut - z);
        let mid = z + step / 2.0;
        acc += kernel(mid) * h(x - mid) * step;
        acc += kernel(-mid) * h(x + mid) * step;
        z += step;
    }
    acc
}

/// `sup over xi of xi^{1-gamma} |d/dxi P_xi h|_0`, the equivalent-norm
/// seminorm part. The xi-derivative is a centered difference with step
/// `xi / 100`; the sup over x runs over a stride-thinned node set.
pub fn poisson_equivalent_norm(
    grid: &SpaceGrid,
    vals: &[f64],
    gamma: f64,
    xi_grid: &[f64],
) -> Result<f64> {
    if xi_grid.iter().any(|&x| x <= 0.0) {
        return Err(Error::NonPositiveXi);
    }
    if !vals.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let n = grid.node_count();
    let stride = (n / 257).max(1);
    let mut best: f64 = 0.0;
    for &xi in xi_grid {
        let dxi = xi / 100.0;
        let mut sup: f64 = 0.0;
        for node in (0..n).step_by(stride) {
            let p = grid.point(node);
            let hi = poisson_integral(grid, vals, &p, xi + dxi);
            let lo = poisson_integral(grid, vals, &p, xi - dxi);
            sup = sup.max(((hi - lo) / (2.0 * dxi)).abs());
        }
        best = best.max(xi.powf(1.0 - gamma) * sup);
    }
    Ok(best)
}

/// Default xi ladder: 40 log-spaced points in [1e-3, 10].
pub fn default_xi_grid() -> Vec<f64> {
    let n = 40;
    (0..n)
        .map(|i| 10f64.powf(-3.0 + 4.0 * i as f64 / (n - 1) as f64))
        .collect()
}

// ---------------------------------------------------------------------------
// Degree classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FunctionSpace {
    Sobolev { k: u32, p: f64 },
    Holder { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criticality {
    Subcritical,
    Critical,
    Supercritical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Degree {
    pub degree: f64,
    pub class: Criticality,
}

/// Scaling degree `k - 2/q - d/p` (Sobolev) or `gamma - 2/q` (Hölder);
/// subcritical iff degree > -1.
pub fn degree_classify(space: FunctionSpace, q: f64, dim: usize) -> Degree {
    let degree = match space {
        FunctionSpace::Sobolev { k, p } => k as f64 - 2.0 / q - dim as f64 / p,
        FunctionSpace::Holder { gamma } => gamma - 2.0 / q,
    };
    let class = if (degree + 1.0).abs() < 1e-12 {
        Criticality::Critical
    } else if degree > -1.0 {
        Criticality::Subcritical
    } else {
        Criticality::Supercritical
    };
    Degree { degree, class }
}

// ---------------------------------------------------------------------------
// Field-level mollification and cutoff
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MollifyAxis {
    Space,
    Time,
}

/// Convolve a grid field with the space kernel `rho_n` or the time kernel
/// `varrho_m` (backward-in-time extension: slice 0 repeats for t < 0).
pub fn mollify(field: &SampledField, axis: MollifyAxis, index: f64) -> Result<SampledField> {
    if index < 1.0 {
        return Err(Error::BadMollifierIndex(index));
    }
    let mut out = SampledField::zeros(field.grid.clone(), field.time.clone(), field.comps);
    match axis {
        MollifyAxis::Space => {
            let quad = MollifierQuad::space(field.grid.dim, index);
            let nodes = field.grid.node_count();
            let comps = field.comps;
            let mut tmp = vec![0.0f64; comps];
            for k in 0..field.time.slices() {
                let src = field.slice(k);
                for node in 0..nodes {
                    let p = field.grid.point(node);
                    let off = node * comps;
                    let dst = &mut out.slice_mut(k)[off..off + comps];
                    dst.fill(0.0);
                    let mut shifted = p;
                    for (z, w) in quad.nodes.iter().zip(&quad.weights) {
                        for a in 0..field.grid.dim {
                            shifted[a] = p[a] - z[a];
                        }
                        crate::grid::eval_slice(&field.grid, src, comps, &shifted, &mut tmp);
                        for c in 0..comps {
                            dst[c] += w * tmp[c];
                        }
                    }
                }
            }
        }
        MollifyAxis::Time => {
            let quad = MollifierQuad::time(index);
            let dt = field.time.dt();
            let nodes = field.grid.node_count() * field.comps;
            for k in 0..field.time.slices() {
                let t = field.time.time(k);
                for (z, w) in quad.nodes.iter().zip(&quad.weights) {
                    let tau = t - z[0];
                    // backward extension: the t < 0 part reuses slice 0
                    let pos = (tau / dt).max(0.0);
                    let j0 = (pos.floor() as usize).min(field.time.steps - 1);
                    let frac = (pos - j0 as f64).clamp(0.0, 1.0);
                    let lo = field.slice(j0);
                    let hi = field.slice(j0 + 1);
                    let dst = out.slice_mut(k);
                    for i in 0..nodes {
                        dst[i] += w * ((1.0 - frac) * lo[i] + frac * hi[i]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Field-level cutoff: resample `field(t, x * chi_R(x))` through interpolation.
pub fn cutoff_field(field: &SampledField, radius: f64) -> SampledField {
    let mut out = SampledField::zeros(field.grid.clone(), field.time.clone(), field.comps);
    let nodes = field.grid.node_count();
    let comps = field.comps;
    let mut tmp = vec![0.0f64; comps];
    for k in 0..field.time.slices() {
        let src = field.slice(k);
        for node in 0..nodes {
            let p = field.grid.point(node);
            let y = cutoff_point(&p, field.grid.dim, radius);
            crate::grid::eval_slice(&field.grid, src, comps, &y, &mut tmp);
            let off = node * comps;
            out.slice_mut(k)[off..off + comps].copy_from_slice(&tmp);
        }
    }
    out
}
