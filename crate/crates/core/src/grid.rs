//! Uniform space/time grids and sampled fields.
//!
//! Fields live on a tensor grid over `[-L, L]^d` with a uniform partition of
//! `[0, T]`. Off-grid evaluation clamps the query point to the box and
//! interpolates multilinearly in space, linearly in time. Clamping (rather
//! than zero padding) is deliberate: the fields handled here grow like
//! `|x|^{2/q-1}`, and zero padding would corrupt every weighted norm.

use crate::error::{Error, Result};

/// Hard cap on the spatial dimension. Points are carried in fixed-size
/// arrays so the hot loops stay allocation free.
pub const MAX_DIM: usize = 3;

/// A point in space; only the first `dim` entries are meaningful.
pub type Pt = [f64; MAX_DIM];

/// A d x d matrix in a fixed-size carrier, row major.
pub type Mat = [[f64; MAX_DIM]; MAX_DIM];

pub fn zero_pt() -> Pt {
    [0.0; MAX_DIM]
}

pub fn zero_mat() -> Mat {
    [[0.0; MAX_DIM]; MAX_DIM]
}

pub fn identity(dim: usize) -> Mat {
    let mut m = zero_mat();
    for i in 0..dim {
        m[i][i] = 1.0;
    }
    m
}

pub fn norm2(x: &Pt, dim: usize) -> f64 {
    x[..dim].iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dist2(x: &Pt, y: &Pt, dim: usize) -> f64 {
    (0..dim).map(|i| (x[i] - y[i]) * (x[i] - y[i])).sum::<f64>().sqrt()
}

/// Frobenius norm of the leading `dim x dim` block.
pub fn frobenius(m: &Mat, dim: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            s += m[i][j] * m[i][j];
        }
    }
    s.sqrt()
}

/// Operator (spectral) norm of the leading `dim x dim` block, closed form
/// for d <= 2, power iteration fallback above.
pub fn operator_norm(m: &Mat, dim: usize) -> f64 {
    match dim {
        1 => m[0][0].abs(),
        2 => {
            // singular values of [[a,b],[c,d]]
            let (a, b, c, d) = (m[0][0], m[0][1], m[1][0], m[1][1]);
            let s1 = a * a + b * b + c * c + d * d;
            let det = a * d - b * c;
            let disc = (s1 * s1 - 4.0 * det * det).max(0.0).sqrt();
            ((s1 + disc) / 2.0).max(0.0).sqrt()
        }
        _ => {
            let mut v = [1.0f64; MAX_DIM];
            let mut lam = 0.0;
            for _ in 0..50 {
                // v <- M^T M v
                let mut w = [0.0f64; MAX_DIM];
                for i in 0..dim {
                    for j in 0..dim {
                        w[i] += m[i][j] * v[j];
                    }
                }
                let mut u = [0.0f64; MAX_DIM];
                for i in 0..dim {
                    for j in 0..dim {
                        u[j] += m[i][j] * w[i];
                    }
                }
                let n = norm2(&u, dim);
                if n == 0.0 {
                    return 0.0;
                }
                for j in 0..dim {
                    v[j] = u[j] / n;
                }
                lam = n;
            }
            lam.sqrt()
        }
    }
}

pub fn mat_mul(a: &Mat, b: &Mat, dim: usize) -> Mat {
    let mut out = zero_mat();
    for i in 0..dim {
        for j in 0..dim {
            let mut s = 0.0;
            for k in 0..dim {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn mat_vec(a: &Mat, x: &Pt, dim: usize) -> Pt {
    let mut out = zero_pt();
    for i in 0..dim {
        let mut s = 0.0;
        for j in 0..dim {
            s += a[i][j] * x[j];
        }
        out[i] = s;
    }
    out
}

/// Inverse of the leading `dim x dim` block. Errors on (near-)singular input.
pub fn mat_inv(m: &Mat, dim: usize) -> Result<Mat> {
    let mut out = zero_mat();
    match dim {
        1 => {
            if m[0][0] == 0.0 {
                return Err(Error::SingularCovariance);
            }
            out[0][0] = 1.0 / m[0][0];
        }
        2 => {
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det.abs() < 1e-300 {
                return Err(Error::SingularCovariance);
            }
            out[0][0] = m[1][1] / det;
            out[1][1] = m[0][0] / det;
            out[0][1] = -m[0][1] / det;
            out[1][0] = -m[1][0] / det;
        }
        _ => {
            // Gauss-Jordan, small fixed size
            let mut a = *m;
            out = identity(dim);
            for col in 0..dim {
                let mut piv = col;
                for r in col + 1..dim {
                    if a[r][col].abs() > a[piv][col].abs() {
                        piv = r;
                    }
                }
                if a[piv][col].abs() < 1e-300 {
                    return Err(Error::SingularCovariance);
                }
                a.swap(col, piv);
                out.swap(col, piv);
                let inv = 1.0 / a[col][col];
                for j in 0..dim {
                    a[col][j] *= inv;
                    out[col][j] *= inv;
                }
                for r in 0..dim {
                    if r != col {
                        let f = a[r][col];
                        for j in 0..dim {
                            a[r][j] -= f * a[col][j];
                            out[r][j] -= f * out[col][j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn det(m: &Mat, dim: usize) -> f64 {
    match dim {
        1 => m[0][0],
        2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
        _ => {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        }
    }
}

/// Uniform tensor grid on `[-l, l]^dim` with spacing `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid {
    pub dim: usize,
    pub half_extent: f64,
    pub spacing: f64,
    pub nodes_per_axis: usize,
}

impl SpaceGrid {
    pub fn new(dim: usize, half_extent: f64, spacing: f64) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::UnsupportedDimension(dim));
        }
        if !(half_extent > 0.0) || !(spacing > 0.0) {
            return Err(Error::DegenerateGrid);
        }
        let n = (2.0 * half_extent / spacing).round() as usize + 1;
        if n < 2 {
            return Err(Error::DegenerateGrid);
        }
        Ok(SpaceGrid {
            dim,
            half_extent,
            spacing,
            nodes_per_axis: n,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_axis.pow(self.dim as u32)
    }

    pub fn coord(&self, idx: usize) -> f64 {
        -self.half_extent + idx as f64 * self.spacing
    }

    /// Decompose a flat node index (axis 0 fastest).
    pub fn unflatten(&self, mut flat: usize) -> [usize; MAX_DIM] {
        let mut idx = [0usize; MAX_DIM];
        for a in 0..self.dim {
            idx[a] = flat % self.nodes_per_axis;
            flat /= self.nodes_per_axis;
        }
        idx
    }

    pub fn flatten(&self, idx: &[usize; MAX_DIM]) -> usize {
        let mut flat = 0usize;
        for a in (0..self.dim).rev() {
            flat = flat * self.nodes_per_axis + idx[a];
        }
        flat
    }

    pub fn point(&self, flat: usize) -> Pt {
        let idx = self.unflatten(flat);
        let mut p = zero_pt();
        for a in 0..self.dim {
            p[a] = self.coord(idx[a]);
        }
        p
    }

    pub fn clamp(&self, x: &Pt) -> Pt {
        let mut y = *x;
        for a in 0..self.dim {
            y[a] = y[a].clamp(-self.half_extent, self.half_extent);
        }
        y
    }

    pub fn contains(&self, x: &Pt) -> bool {
        (0..self.dim).all(|a| x[a].abs() <= self.half_extent)
    }

    /// Lower corner index and axis weights for multilinear interpolation of a
    /// clamped point.
    pub fn interp_anchor(&self, x: &Pt) -> ([usize; MAX_DIM], [f64; MAX_DIM]) {
        let mut base = [0usize; MAX_DIM];
        let mut w = [0.0f64; MAX_DIM];
        for a in 0..self.dim {
            let xa = x[a].clamp(-self.half_extent, self.half_extent);
            let rel = (xa + self.half_extent) / self.spacing;
            let mut i = rel.floor() as isize;
            if i < 0 {
                i = 0;
            }
            let maxi = (self.nodes_per_axis - 2) as isize;
            if i > maxi {
                i = maxi;
            }
            base[a] = i as usize;
            w[a] = (rel - i as f64).clamp(0.0, 1.0);
        }
        (base, w)
    }
}

/// Uniform partition of `[0, t_end]` into `steps` intervals (`steps + 1` slices).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(t_end > 0.0) {
            return Err(Error::EmptyTimeGrid);
        }
        Ok(TimeGrid { t_end, steps })
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    pub fn slices(&self) -> usize {
        self.steps + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }
}

/// Scalar or vector samples on a space-time grid.
///
/// Storage is `values[slice][node][comp]`, flattened.
#[derive(Debug, Clone)]
pub struct SampledField {
    pub grid: SpaceGrid,
    pub time: TimeGrid,
    pub comps: usize,
    pub values: Vec<f64>,
}

impl SampledField {
    pub fn zeros(grid: SpaceGrid, time: TimeGrid, comps: usize) -> Self {
        let n = time.slices() * grid.node_count() * comps;
        SampledField {
            grid,
            time,
            comps,
            values: vec![0.0; n],
        }
    }

    pub fn from_closure<F>(grid: SpaceGrid, time: TimeGrid, comps: usize, f: F) -> Self
    where
        F: Fn(f64, &Pt, &mut [f64]) + Sync,
    {
        let mut field = SampledField::zeros(grid, time, comps);
        let nodes = field.grid.node_count();
        let comps_n = comps;
        for k in 0..field.time.slices() {
            let t = field.time.time(k);
            for n in 0..nodes {
                let p = field.grid.point(n);
                let off = (k * nodes + n) * comps_n;
                f(t, &p, &mut field.values[off..off + comps_n]);
            }
        }
        field
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.node_count() * self.comps;
        &self.values[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.grid.node_count() * self.comps;
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn at(&self, k: usize, node: usize, comp: usize) -> f64 {
        self.values[(k * self.grid.node_count() + node) * self.comps + comp]
    }

    pub fn set(&mut self, k: usize, node: usize, comp: usize, v: f64) {
        let nodes = self.grid.node_count();
        self.values[(k * nodes + node) * self.comps + comp] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Multilinear interpolation in space at a fixed slice. Clamped extension.
    pub fn eval_space(&self, k: usize, x: &Pt, out: &mut [f64]) {
        eval_slice(&self.grid, self.slice(k), self.comps, x, out);
    }

    /// Space-time interpolation: multilinear in space, linear in time,
    /// clamped at both ends of the time grid.
    pub fn eval(&self, t: f64, x: &Pt, out: &mut [f64]) {
        let dt = self.time.dt();
        let rel = (t / dt).clamp(0.0, self.time.steps as f64);
        let k0 = (rel.floor() as usize).min(self.time.steps - 1);
        let w = rel - k0 as f64;
        let mut lo = [0.0f64; 8];
        let mut hi = [0.0f64; 8];
        self.eval_space(k0, x, &mut lo[..self.comps]);
        self.eval_space(k0 + 1, x, &mut hi[..self.comps]);
        for c in 0..self.comps {
            out[c] = (1.0 - w) * lo[c] + w * hi[c];
        }
    }

    /// Exact spatial Jacobian of the space-time interpolant that `eval`
    /// realizes: a linear-in-time blend of the per-slice interpolant
    /// Jacobians. Output layout `[comp][axis]`, `comps * dim` entries.
    pub fn eval_jacobian(&self, t: f64, x: &Pt, out: &mut [f64]) {
        let dim = self.grid.dim;
        let dt = self.time.dt();
        let rel = (t / dt).clamp(0.0, self.time.steps as f64);
        let k0 = (rel.floor() as usize).min(self.time.steps - 1);
        let w = rel - k0 as f64;
        let n = self.comps * dim;
        let mut lo = [0.0f64; MAX_DIM * MAX_DIM * MAX_DIM];
        let mut hi = [0.0f64; MAX_DIM * MAX_DIM * MAX_DIM];
        eval_slice_jacobian(&self.grid, self.slice(k0), self.comps, x, &mut lo[..n]);
        eval_slice_jacobian(&self.grid, self.slice(k0 + 1), self.comps, x, &mut hi[..n]);
        for c in 0..n {
            out[c] = (1.0 - w) * lo[c] + w * hi[c];
        }
    }

    /// Centered spatial differences per slice; one-sided at the box edge.
    /// Output has `comps * dim` components laid out as `[comp][axis]`.
    pub fn gradient(&self) -> SampledField {
        let dim = self.grid.dim;
        let mut out = SampledField::zeros(self.grid.clone(), self.time.clone(), self.comps * dim);
        let nodes = self.grid.node_count();
        let napx = self.grid.nodes_per_axis;
        let h = self.grid.spacing;
        let mut stride = [0usize; MAX_DIM];
        for a in 0..dim {
            stride[a] = napx.pow(a as u32);
        }
        for k in 0..self.time.slices() {
            for n in 0..nodes {
                let idx = self.grid.unflatten(n);
                for a in 0..dim {
                    let (nm, np, denom) = if idx[a] == 0 {
                        (n, n + stride[a], h)
                    } else if idx[a] == napx - 1 {
                        (n - stride[a], n, h)
                    } else {
                        (n - stride[a], n + stride[a], 2.0 * h)
                    };
                    for c in 0..self.comps {
                        let d = (self.at(k, np, c) - self.at(k, nm, c)) / denom;
                        out.set(k, n, c * dim + a, d);
                    }
                }
            }
        }
        out
    }
}

/// Exact spatial Jacobian of the multilinear interpolant over one slice's
/// raw values, laid out `[comp][axis]`. The clamped extension is constant
/// beyond the box, so axes clamped outside contribute zero derivative.
pub fn eval_slice_jacobian(grid: &SpaceGrid, vals: &[f64], comps: usize, x: &Pt, out: &mut [f64]) {
    let (base, w) = grid.interp_anchor(x);
    let dim = grid.dim;
    let napx = grid.nodes_per_axis;
    out[..comps * dim].fill(0.0);
    let mut inside = [false; MAX_DIM];
    for a in 0..dim {
        inside[a] = x[a].abs() <= grid.half_extent;
    }
    let corners = 1usize << dim;
    for corner in 0..corners {
        let mut flat = 0usize;
        for a in (0..dim).rev() {
            let up = (corner >> a) & 1;
            flat = flat * napx + base[a] + up;
        }
        let off = flat * comps;
        for axis in 0..dim {
            if !inside[axis] {
                continue;
            }
            let mut dweight = 1.0 / grid.spacing;
            for a in 0..dim {
                let up = (corner >> a) & 1;
                if a == axis {
                    if up == 0 {
                        dweight = -dweight;
                    }
                } else {
                    dweight *= if up == 1 { w[a] } else { 1.0 - w[a] };
                }
            }
            if dweight == 0.0 {
                continue;
            }
            for c in 0..comps {
                out[c * dim + axis] += dweight * vals[off + c];
            }
        }
    }
}

/// Multilinear interpolation over one slice's raw values.
pub fn eval_slice(grid: &SpaceGrid, vals: &[f64], comps: usize, x: &Pt, out: &mut [f64]) {
    let (base, w) = grid.interp_anchor(x);
    let dim = grid.dim;
    let napx = grid.nodes_per_axis;
    out[..comps].fill(0.0);
    let corners = 1usize << dim;
    for corner in 0..corners {
        let mut weight = 1.0;
        let mut flat = 0usize;
        for a in (0..dim).rev() {
            let up = (corner >> a) & 1;
            weight *= if up == 1 { w[a] } else { 1.0 - w[a] };
            flat = flat * napx + base[a] + up;
        }
        if weight == 0.0 {
            continue;
        }
        let off = flat * comps;
        for c in 0..comps {
            out[c] += weight * vals[off + c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_roundtrip_indices() {
        let g = SpaceGrid::new(2, 1.0, 0.5).unwrap();
        assert_eq!(g.nodes_per_axis, 5);
        assert_eq!(g.node_count(), 25);
        for n in 0..g.node_count() {
            assert_eq!(g.flatten(&g.unflatten(n)), n);
        }
    }

    #[test]
    fn interp_reproduces_linear_fields() {
        let g = SpaceGrid::new(2, 2.0, 0.25).unwrap();
        let t = TimeGrid::new(1.0, 4).unwrap();
        let f = SampledField::from_closure(g, t, 1, |tt, x, out| {
            out[0] = 3.0 * x[0] - 2.0 * x[1] + tt;
        });
        let mut out = [0.0];
        f.eval(0.37, &[0.13, -0.81, 0.0], &mut out);
        let expect = 3.0 * 0.13 - 2.0 * (-0.81) + 0.37;
        assert!((out[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn eval_clamps_outside_box() {
        let g = SpaceGrid::new(1, 1.0, 0.5).unwrap();
        let t = TimeGrid::new(1.0, 2).unwrap();
        let f = SampledField::from_closure(g, t, 1, |_, x, out| out[0] = x[0]);
        let mut out = [0.0];
        f.eval(0.0, &[5.0, 0.0, 0.0], &mut out);
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn gradient_of_linear_field_is_exact() {
        let g = SpaceGrid::new(2, 1.0, 0.125).unwrap();
        let t = TimeGrid::new(1.0, 1).unwrap();
        let f = SampledField::from_closure(g, t, 1, |_, x, out| {
            out[0] = 2.0 * x[0] + 5.0 * x[1];
        });
        let grad = f.gradient();
        for n in 0..grad.grid.node_count() {
            assert!((grad.at(0, n, 0) - 2.0).abs() < 1e-12);
            assert!((grad.at(0, n, 1) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn operator_norm_matches_2x2_svd() {
        let mut m = zero_mat();
        m[0][0] = 1.0;
        m[0][1] = 2.0;
        m[1][0] = 0.0;
        m[1][1] = 3.0;
        // singular values of [[1,2],[0,3]]: sqrt of eigenvalues of M^T M
        let got = operator_norm(&m, 2);
        assert!((got - 3.65028153987288).abs() < 1e-10, "{got}");
    }
}
