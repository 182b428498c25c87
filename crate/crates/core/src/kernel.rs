//! Time-dependent diffusion coefficients, window covariances, anisotropic
//! Gaussian kernels and grid convolution against them.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{self, Mat, Pt, SpaceGrid, MAX_DIM};

/// Kernel mass outside the truncation radius is kept below this.
pub const TAIL_TOL: f64 = 1e-10;
// one-sided Gaussian mass beyond 6.8 sigma is ~ 5e-12
const TRUNC_SIGMAS: f64 = 6.8;

type SigmaFn = dyn Fn(f64) -> Mat + Send + Sync;

/// sigma(t): deterministic, time-dependent, uniformly elliptic.
#[derive(Clone)]
pub struct DiffusionCoefficient {
    pub dim: usize,
    kind: SigmaKind,
}

#[derive(Clone)]
enum SigmaKind {
    Identity,
    Scalar(f64),
    Diagonal([f64; MAX_DIM]),
    Time(Arc<SigmaFn>),
}

impl DiffusionCoefficient {
    pub fn identity(dim: usize) -> Self {
        DiffusionCoefficient { dim, kind: SigmaKind::Identity }
    }

    pub fn scalar(dim: usize, c: f64) -> Self {
        assert!(c > 0.0, "sigma must be nondegenerate");
        DiffusionCoefficient { dim, kind: SigmaKind::Scalar(c) }
    }

    pub fn diagonal(dim: usize, d: &[f64]) -> Self {
        let mut arr = [1.0; MAX_DIM];
        arr[..dim].copy_from_slice(d);
        assert!(d.iter().all(|&v| v > 0.0));
        DiffusionCoefficient { dim, kind: SigmaKind::Diagonal(arr) }
    }

    pub fn time_dependent(dim: usize, f: Arc<SigmaFn>) -> Self {
        DiffusionCoefficient { dim, kind: SigmaKind::Time(f) }
    }

    /// sigma(t) as a matrix.
    pub fn sigma_at(&self, t: f64) -> Mat {
        match &self.kind {
            SigmaKind::Identity => grid::identity(self.dim),
            SigmaKind::Scalar(c) => {
                let mut m = grid::zero_mat();
                for i in 0..self.dim {
                    m[i][i] = *c;
                }
                m
            }
            SigmaKind::Diagonal(d) => {
                let mut m = grid::zero_mat();
                for i in 0..self.dim {
                    m[i][i] = d[i];
                }
                m
            }
            SigmaKind::Time(f) => f(t),
        }
    }

    /// a(t) = sigma sigma^T.
    pub fn a_at(&self, t: f64) -> Mat {
        let s = self.sigma_at(t);
        let mut a = grid::zero_mat();
        for i in 0..self.dim {
            for j in 0..self.dim {
                for k in 0..self.dim {
                    a[i][j] += s[i][k] * s[j][k];
                }
            }
        }
        a
    }

    /// True if a(t) is diagonal for every t sampled (structural check).
    pub fn is_diagonal(&self) -> bool {
        match &self.kind {
            SigmaKind::Identity | SigmaKind::Scalar(_) | SigmaKind::Diagonal(_) => true,
            SigmaKind::Time(f) => {
                (0..17).all(|i| {
                    let m = f(i as f64 / 16.0);
                    let mut off = 0.0;
                    for r in 0..self.dim {
                        for c in 0..self.dim {
                            if r != c {
                                off += m[r][c].abs();
                            }
                        }
                    }
                    off == 0.0
                })
            }
        }
    }

    /// Checks the ellipticity sandwich `lo <= eig(a(t)) <= hi` on a sampled
    /// time ladder over `[0, t_end]`.
    pub fn check_ellipticity(&self, t_end: f64, lo: f64, hi: f64) -> Result<()> {
        for i in 0..=64 {
            let t = t_end * i as f64 / 64.0;
            let a = self.a_at(t);
            let (emin, emax) = symmetric_eig_range(&a, self.dim);
            if emin < lo - 1e-12 || emax > hi + 1e-12 {
                return Err(Error::EllipticityViolated { eig: if emin < lo { emin } else { emax }, lo, hi });
            }
        }
        Ok(())
    }
}

/// Eigenvalue range of a symmetric d x d matrix (d <= 3: closed form for
/// d <= 2, Jacobi sweep for d = 3).
pub fn symmetric_eig_range(a: &Mat, dim: usize) -> (f64, f64) {
    match dim {
        1 => (a[0][0], a[0][0]),
        2 => {
            let tr = a[0][0] + a[1][1];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
            (tr / 2.0 - disc, tr / 2.0 + disc)
        }
        _ => {
            // Jacobi iterations on a copy
            let mut m = *a;
            for _ in 0..64 {
                // largest off-diagonal
                let (mut p, mut q, mut big) = (0usize, 1usize, 0.0f64);
                for i in 0..3 {
                    for j in (i + 1)..3 {
                        if m[i][j].abs() > big {
                            big = m[i][j].abs();
                            p = i;
                            q = j;
                        }
                    }
                }
                if big < 1e-14 {
                    break;
                }
                let theta = 0.5 * (2.0 * m[p][q]).atan2(m[q][q] - m[p][p]);
                let (c, s) = (theta.cos(), theta.sin());
                let mut r = grid::identity(3);
                r[p][p] = c;
                r[q][q] = c;
                r[p][q] = s;
                r[q][p] = -s;
                let rt = {
                    let mut t = grid::zero_mat();
                    for i in 0..3 {
                        for j in 0..3 {
                            t[i][j] = r[j][i];
                        }
                    }
                    t
                };
                m = grid::mat_mul(&rt, &grid::mat_mul(&m, &r, 3), 3);
            }
            let eigs = [m[0][0], m[1][1], m[2][2]];
            (
                eigs.iter().cloned().fold(f64::INFINITY, f64::min),
                eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            )
        }
    }
}

/// `A_{s,t} = int_s^t a(tau) dtau` by composite Simpson (exact through cubic
/// time dependence). Errors when `s >= t` or the result is singular.
pub fn covariance(sig: &DiffusionCoefficient, s: f64, t: f64) -> Result<Mat> {
    if s >= t {
        return Err(Error::BadWindow { s, t });
    }
    let panels = 64usize; // Simpson panels; a(t) is smooth by hypothesis
    let h = (t - s) / panels as f64;
    let mut acc = grid::zero_mat();
    for p in 0..panels {
        let t0 = s + p as f64 * h;
        let a0 = sig.a_at(t0);
        let am = sig.a_at(t0 + h / 2.0);
        let a1 = sig.a_at(t0 + h);
        for i in 0..sig.dim {
            for j in 0..sig.dim {
                acc[i][j] += h / 6.0 * (a0[i][j] + 4.0 * am[i][j] + a1[i][j]);
            }
        }
    }
    let det = grid::det(&acc, sig.dim);
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::SingularCovariance);
    }
    Ok(acc)
}

/// Order of kernel derivative to convolve against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelOrder {
    Value,
    Gradient,
    Hessian,
}

/// Evaluates the anisotropic Gaussian `K(x)` with covariance `A`
/// (inverse `B`), together with its gradient and Hessian on demand.
pub struct GaussKernel {
    pub dim: usize,
    pub cov: Mat,
    pub inv: Mat,
    norm: f64,
}

impl GaussKernel {
    pub fn new(dim: usize, cov: &Mat) -> Result<Self> {
        let det = grid::det(cov, dim);
        if !(det > 0.0) {
            return Err(Error::SingularCovariance);
        }
        let inv = grid::mat_inv(cov, dim).map_err(|_| Error::SingularCovariance)?;
        let norm = (2.0 * PI).powf(-(dim as f64) / 2.0) / det.sqrt();
        Ok(GaussKernel { dim, cov: *cov, inv, norm })
    }

    pub fn value(&self, x: &Pt) -> f64 {
        let bx = grid::mat_vec(&self.inv, x, self.dim);
        let mut q = 0.0;
        for i in 0..self.dim {
            q += bx[i] * x[i];
        }
        self.norm * (-0.5 * q).exp()
    }

    /// grad K = -K B x
    pub fn gradient(&self, x: &Pt) -> Pt {
        let k = self.value(x);
        let bx = grid::mat_vec(&self.inv, x, self.dim);
        let mut g = grid::zero_pt();
        for i in 0..self.dim {
            g[i] = -k * bx[i];
        }
        g
    }

    /// hess K = K ( Bx (Bx)^T - B )
    pub fn hessian(&self, x: &Pt) -> Mat {
        let k = self.value(x);
        let bx = grid::mat_vec(&self.inv, x, self.dim);
        let mut h = grid::zero_mat();
        for i in 0..self.dim {
            for j in 0..self.dim {
                h[i][j] = k * (bx[i] * bx[j] - self.inv[i][j]);
            }
        }
        h
    }
}

/// One-dimensional tap sets for a single axis: value, first and second
/// derivative of the 1-d Gaussian with the given variance, sampled at grid
/// offsets and standardised (unit mass / zero mean respectively) so that
/// convolution reproduces constants exactly.
struct AxisTaps {
    value: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    reach: usize,
}

fn axis_taps(var: f64, h: f64) -> AxisTaps {
    let sd = var.sqrt();
    let reach = ((TRUNC_SIGMAS * sd / h).ceil() as usize).max(1);
    let n = 2 * reach + 1;
    let mut value = vec![0.0; n];
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    let c = 1.0 / (sd * (2.0 * PI).sqrt());
    for m in 0..n {
        let z = (m as f64 - reach as f64) * h;
        let g = c * (-0.5 * z * z / var).exp() * h;
        value[m] = g;
        d1[m] = -z / var * g;
        d2[m] = (z * z / (var * var) - 1.0 / var) * g;
    }
    // standardisation: unit mass for the value taps, zero mean for derivatives
    let mass: f64 = value.iter().sum();
    for v in &mut value {
        *v /= mass;
    }
    let m1: f64 = d1.iter().sum::<f64>() / n as f64;
    for v in &mut d1 {
        *v -= m1;
    }
    let m2: f64 = d2.iter().sum::<f64>() / n as f64;
    for v in &mut d2 {
        *v -= m2;
    }
    AxisTaps { value, d1, d2, reach }
}

/// Precomputed stencil for convolving grid slices with the Gaussian kernel of
/// covariance `A`. Diagonal covariances use separable axis passes; full
/// matrices fall back to a direct truncated stencil.
pub struct KernelStencil {
    grid: SpaceGrid,
    diag: Option<Vec<AxisTaps>>,
    direct: Option<DirectStencil>,
    pub cov: Mat,
}

struct DirectStencil {
    /// taps indexed by derivative tag: [value, d/dx_i ..., d2/dx_i dx_j ...]
    offsets: Vec<[isize; MAX_DIM]>,
    value: Vec<f64>,
    grad: Vec<Pt>,
    hess: Vec<Mat>,
}

impl KernelStencil {
    pub fn new(grid: &SpaceGrid, cov: &Mat) -> Result<Self> {
        let dim = grid.dim;
        let mut off_diag = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                if i != j {
                    off_diag += cov[i][j].abs();
                }
            }
        }
        if off_diag == 0.0 {
            let taps = (0..dim).map(|a| axis_taps(cov[a][a], grid.spacing)).collect();
            Ok(KernelStencil { grid: grid.clone(), diag: Some(taps), direct: None, cov: *cov })
        } else {
            let kern = GaussKernel::new(dim, cov)?;
            let (_, emax) = symmetric_eig_range(cov, dim);
            let reach = ((TRUNC_SIGMAS * emax.sqrt() / grid.spacing).ceil() as isize).max(1);
            let h = grid.spacing;
            let mut offsets = Vec::new();
            let mut value = Vec::new();
            let mut gradv = Vec::new();
            let mut hessv = Vec::new();
            let hd = h.powi(dim as i32);
            let side = 2 * reach + 1;
            let total = (side as usize).pow(dim as u32);
            for flat in 0..total {
                let mut rem = flat;
                let mut off = [0isize; MAX_DIM];
                let mut z = grid::zero_pt();
                for a in 0..dim {
                    let i = (rem % side as usize) as isize - reach;
                    rem /= side as usize;
                    off[a] = i;
                    z[a] = i as f64 * h;
                }
                let v = kern.value(&z) * hd;
                if v < TAIL_TOL * hd && off.iter().any(|&o| o != 0) {
                    continue;
                }
                offsets.push(off);
                value.push(v);
                let g = kern.gradient(&z);
                let mut gs = grid::zero_pt();
                for a in 0..dim {
                    gs[a] = g[a] * hd;
                }
                gradv.push(gs);
                let hm = kern.hessian(&z);
                let mut hs = grid::zero_mat();
                for i in 0..dim {
                    for j in 0..dim {
                        hs[i][j] = hm[i][j] * hd;
                    }
                }
                hessv.push(hs);
            }
            // standardise
            let mass: f64 = value.iter().sum();
            for v in &mut value {
                *v /= mass;
            }
            let n = offsets.len() as f64;
            for a in 0..dim {
                let m: f64 = gradv.iter().map(|g| g[a]).sum::<f64>() / n;
                for g in &mut gradv {
                    g[a] -= m;
                }
                for b in 0..dim {
                    let m: f64 = hessv.iter().map(|hh| hh[a][b]).sum::<f64>() / n;
                    for hh in &mut hessv {
                        hh[a][b] -= m;
                    }
                }
            }
            Ok(KernelStencil {
                grid: grid.clone(),
                diag: None,
                direct: Some(DirectStencil { offsets, value, grad: gradv, hess: hessv }),
                cov: *cov,
            })
        }
    }

    /// Convolve a slice (node-major, `comps` components per node) with the
    /// kernel: `out(x) = sum_z K(z) f(x - z)`, clamped extension at the box
    /// edges. Output component count: comps (Value), comps*dim (Gradient,
    /// laid out [comp][axis]), comps*dim*dim (Hessian, [comp][i][j]).
    pub fn apply(&self, vals: &[f64], comps: usize, order: KernelOrder) -> Vec<f64> {
        let dim = self.grid.dim;
        match order {
            KernelOrder::Value => {
                if let Some(taps) = &self.diag {
                    let mut cur = vals.to_vec();
                    for a in 0..dim {
                        cur = self.axis_pass(&cur, comps, a, &taps[a].value, taps[a].reach);
                    }
                    cur
                } else {
                    self.direct_pass(vals, comps, |d, k| d.value[k], 1)
                }
            }
            KernelOrder::Gradient => {
                let mut out = vec![0.0; vals.len() * dim];
                for axis in 0..dim {
                    let col = if let Some(taps) = &self.diag {
                        let mut cur = vals.to_vec();
                        for a in 0..dim {
                            let (t, r) = if a == axis {
                                (&taps[a].d1, taps[a].reach)
                            } else {
                                (&taps[a].value, taps[a].reach)
                            };
                            cur = self.axis_pass(&cur, comps, a, t, r);
                        }
                        cur
                    } else {
                        self.direct_pass(vals, comps, |d, k| d.grad[k][axis], 1)
                    };
                    let nodes = vals.len() / comps;
                    for node in 0..nodes {
                        for c in 0..comps {
                            out[(node * comps + c) * dim + axis] = col[node * comps + c];
                        }
                    }
                }
                out
            }
            KernelOrder::Hessian => {
                let mut out = vec![0.0; vals.len() * dim * dim];
                for i in 0..dim {
                    for j in 0..dim {
                        let col = if let Some(taps) = &self.diag {
                            let mut cur = vals.to_vec();
                            for a in 0..dim {
                                let t = if i == j && a == i {
                                    &taps[a].d2
                                } else if a == i || a == j {
                                    &taps[a].d1
                                } else {
                                    &taps[a].value
                                };
                                cur = self.axis_pass(&cur, comps, a, t, taps[a].reach);
                            }
                            cur
                        } else {
                            self.direct_pass(vals, comps, |d, k| d.hess[k][i][j], 1)
                        };
                        let nodes = vals.len() / comps;
                        for node in 0..nodes {
                            for c in 0..comps {
                                out[(node * comps + c) * dim * dim + i * dim + j] =
                                    col[node * comps + c];
                            }
                        }
                    }
                }
                out
            }
        }
    }

    fn axis_pass(&self, vals: &[f64], comps: usize, axis: usize, taps: &[f64], reach: usize) -> Vec<f64> {
        let g = &self.grid;
        let napx = g.nodes_per_axis as isize;
        let stride = (g.nodes_per_axis.pow(axis as u32)) as isize;
        let mut out = vec![0.0; vals.len()];
        let nodes = g.node_count();
        for node in 0..nodes {
            let idx = g.unflatten(node)[axis] as isize;
            for (m, &w) in taps.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                // out(x) = sum_z K(z) f(x - z): offset (m - reach) in z means -(m - reach) in index
                let shift = -(m as isize - reach as isize);
                let src_axis = (idx + shift).clamp(0, napx - 1);
                let src = (node as isize + (src_axis - idx) * stride) as usize;
                for c in 0..comps {
                    out[node * comps + c] += w * vals[src * comps + c];
                }
            }
        }
        out
    }

    fn direct_pass(
        &self,
        vals: &[f64],
        comps: usize,
        weight: impl Fn(&DirectStencil, usize) -> f64,
        _cols: usize,
    ) -> Vec<f64> {
        let d = self.direct.as_ref().expect("direct stencil");
        let g = &self.grid;
        let napx = g.nodes_per_axis as isize;
        let mut out = vec![0.0; vals.len()];
        for node in 0..g.node_count() {
            let idx = g.unflatten(node);
            for (k, off) in d.offsets.iter().enumerate() {
                let w = weight(d, k);
                if w == 0.0 {
                    continue;
                }
                let mut src = 0usize;
                for a in (0..g.dim).rev() {
                    let ia = (idx[a] as isize - off[a]).clamp(0, napx - 1) as usize;
                    src = src * g.nodes_per_axis + ia;
                }
                for c in 0..comps {
                    out[node * comps + c] += w * vals[src * comps + c];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpaceGrid;

    #[test]
    fn kernel_value_at_origin_and_unit_mass() {
        let cov = {
            let mut m = grid::zero_mat();
            m[0][0] = 1.0;
            m
        };
        let k = GaussKernel::new(1, &cov).unwrap();
        let p0 = grid::zero_pt();
        assert!((k.value(&p0) - (2.0 * PI).powf(-0.5)).abs() < 1e-14);
        // quadrature mass
        let mut mass = 0.0;
        let h = 1e-3;
        let mut x = -10.0;
        while x < 10.0 {
            mass += k.value(&[x + h / 2.0, 0.0, 0.0]) * h;
            x += h;
        }
        assert!((mass - 1.0).abs() < 1e-8, "mass {mass}");
    }

    #[test]
    fn kernel_derivatives_match_finite_differences() {
        let mut cov = grid::zero_mat();
        cov[0][0] = 0.7;
        cov[1][1] = 1.3;
        cov[0][1] = 0.2;
        cov[1][0] = 0.2;
        let k = GaussKernel::new(2, &cov).unwrap();
        let x = [0.4, -0.3, 0.0];
        let eps = 1e-5;
        let g = k.gradient(&x);
        let hm = k.hessian(&x);
        for a in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[a] += eps;
            xm[a] -= eps;
            let fd = (k.value(&xp) - k.value(&xm)) / (2.0 * eps);
            assert!((fd - g[a]).abs() < 1e-8, "grad axis {a}");
            for b in 0..2 {
                let gp = k.gradient(&xp);
                let gm = k.gradient(&xm);
                let fd2 = (gp[b] - gm[b]) / (2.0 * eps);
                assert!((fd2 - hm[b][a]).abs() < 1e-7, "hess {a}{b}");
            }
        }
    }

    #[test]
    fn covariance_of_linear_coefficient() {
        // a(tau) = 1 + tau on [0,1] integrates to 3/2
        let sig = DiffusionCoefficient::time_dependent(
            1,
            Arc::new(|t| {
                let mut m = grid::zero_mat();
                m[0][0] = (1.0 + t).sqrt();
                m
            }),
        );
        let a = covariance(&sig, 0.0, 1.0).unwrap();
        assert!((a[0][0] - 1.5).abs() < 1e-12, "{}", a[0][0]);
        assert!(covariance(&sig, 1.0, 1.0).is_err());
        assert!(covariance(&sig, 2.0, 1.0).is_err());
    }

    #[test]
    fn covariance_additivity_and_ellipticity() {
        let sig = DiffusionCoefficient::time_dependent(
            2,
            Arc::new(|t| {
                let mut m = grid::zero_mat();
                m[0][0] = 1.0 + 0.5 * (3.0 * t).sin().powi(2);
                m[1][1] = 1.2;
                m
            }),
        );
        let a1 = covariance(&sig, 0.0, 0.4).unwrap();
        let a2 = covariance(&sig, 0.4, 1.0).unwrap();
        let a = covariance(&sig, 0.0, 1.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((a1[i][j] + a2[i][j] - a[i][j]).abs() < 1e-8);
            }
        }
        assert!(sig.check_ellipticity(1.0, 0.9, 2.4).is_ok());
        assert!(sig.check_ellipticity(1.0, 1.1, 2.4).is_err());
    }

    #[test]
    fn convolution_gaussian_with_gaussian_closed_form() {
        // K_{s} * K_{t} = K_{s + t} pointwise
        let g = SpaceGrid::new(1, 8.0, 1.0 / 64.0).unwrap();
        let v1 = 0.04;
        let v2 = 0.03;
        let mut cov1 = grid::zero_mat();
        cov1[0][0] = v1;
        let k1 = GaussKernel::new(1, &cov1).unwrap();
        let vals: Vec<f64> = (0..g.node_count())
            .map(|n| k1.value(&g.point(n)))
            .collect();
        let mut cov2 = grid::zero_mat();
        cov2[0][0] = v2;
        let st = KernelStencil::new(&g, &cov2).unwrap();
        let out = st.apply(&vals, 1, KernelOrder::Value);
        let mut cov3 = grid::zero_mat();
        cov3[0][0] = v1 + v2;
        let k3 = GaussKernel::new(1, &cov3).unwrap();
        for n in 0..g.node_count() {
            let p = g.point(n);
            if p[0].abs() > 6.0 {
                continue; // clamped tail region
            }
            let expect = k3.value(&p);
            assert!(
                (out[n] - expect).abs() < 1e-6,
                "x = {}: {} vs {}",
                p[0],
                out[n],
                expect
            );
        }
    }

    #[test]
    fn convolution_chapman_kolmogorov() {
        // two half-window convolutions equal one full-window convolution
        let g = SpaceGrid::new(1, 8.0, 1.0 / 64.0).unwrap();
        let vals: Vec<f64> = (0..g.node_count())
            .map(|n| {
                let x = g.point(n)[0];
                (-0.5 * x * x).exp() * (1.5 * x).cos()
            })
            .collect();
        let mk = |v: f64| {
            let mut m = grid::zero_mat();
            m[0][0] = v;
            KernelStencil::new(&g, &m).unwrap()
        };
        let half = mk(0.01);
        let full = mk(0.02);
        let two = half.apply(&half.apply(&vals, 1, KernelOrder::Value), 1, KernelOrder::Value);
        let one = full.apply(&vals, 1, KernelOrder::Value);
        for n in 0..g.node_count() {
            if g.point(n)[0].abs() > 6.0 {
                continue;
            }
            assert!((two[n] - one[n]).abs() < 1e-6, "node {n}: {} vs {}", two[n], one[n]);
        }
    }

    #[test]
    fn convolution_preserves_constants_and_kills_odd_fields_at_origin() {
        let g = SpaceGrid::new(1, 4.0, 1.0 / 32.0).unwrap();
        let mut cov = grid::zero_mat();
        cov[0][0] = 0.05;
        let st = KernelStencil::new(&g, &cov).unwrap();
        let ones = vec![2.5; g.node_count()];
        let out = st.apply(&ones, 1, KernelOrder::Value);
        for v in &out {
            assert!((v - 2.5).abs() < 1e-12);
        }
        let gout = st.apply(&ones, 1, KernelOrder::Gradient);
        for v in &gout {
            assert!(v.abs() < 1e-12);
        }
        let hout = st.apply(&ones, 1, KernelOrder::Hessian);
        for v in &hout {
            assert!(v.abs() < 1e-12);
        }
        // odd field stays odd: value at the center node is zero
        let odd: Vec<f64> = (0..g.node_count())
            .map(|n| {
                let x = g.point(n)[0];
                x.powi(3) * (-x * x).exp()
            })
            .collect();
        let out = st.apply(&odd, 1, KernelOrder::Value);
        let center = g.node_count() / 2;
        assert!(out[center].abs() < 1e-13);
    }

    #[test]
    fn convolution_gradient_matches_finite_difference_of_value() {
        let g = SpaceGrid::new(1, 6.0, 1.0 / 64.0).unwrap();
        let mut cov = grid::zero_mat();
        cov[0][0] = 0.08;
        let st = KernelStencil::new(&g, &cov).unwrap();
        let vals: Vec<f64> = (0..g.node_count())
            .map(|n| (g.point(n)[0] * 0.9).sin())
            .collect();
        let smooth = st.apply(&vals, 1, KernelOrder::Value);
        let grad = st.apply(&vals, 1, KernelOrder::Gradient);
        let hess = st.apply(&vals, 1, KernelOrder::Hessian);
        let h = g.spacing;
        for n in 2..g.node_count() - 2 {
            if g.point(n)[0].abs() > 4.0 {
                continue;
            }
            let fd = (smooth[n + 1] - smooth[n - 1]) / (2.0 * h);
            assert!((fd - grad[n]).abs() < 1e-4, "node {n}: {} vs {}", fd, grad[n]);
            let fd2 = (smooth[n + 1] - 2.0 * smooth[n] + smooth[n - 1]) / (h * h);
            assert!((fd2 - hess[n]).abs() < 1e-3, "hess node {n}: {} vs {}", fd2, hess[n]);
        }
    }

    #[test]
    fn direct_stencil_matches_separable_on_diagonal_covariance() {
        // force the direct path with a tiny off-diagonal entry and compare
        let g = SpaceGrid::new(2, 2.0, 1.0 / 8.0).unwrap();
        let mut covd = grid::zero_mat();
        covd[0][0] = 0.05;
        covd[1][1] = 0.08;
        let mut covf = covd;
        covf[0][1] = 1e-300; // structurally non-diagonal, numerically diagonal
        covf[1][0] = 1e-300;
        let sep = KernelStencil::new(&g, &covd).unwrap();
        let dir = KernelStencil::new(&g, &covf).unwrap();
        assert!(sep.diag.is_some() && dir.direct.is_some());
        let vals: Vec<f64> = (0..g.node_count())
            .map(|n| {
                let p = g.point(n);
                (p[0] + 0.3 * p[1]).sin()
            })
            .collect();
        let a = sep.apply(&vals, 1, KernelOrder::Value);
        let b = dir.apply(&vals, 1, KernelOrder::Value);
        for n in 0..g.node_count() {
            assert!((a[n] - b[n]).abs() < 1e-9, "node {n}: {} vs {}", a[n], b[n]);
        }
    }
}
