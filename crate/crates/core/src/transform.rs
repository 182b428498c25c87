//! The drift-removing diffeomorphism Phi(t, x) = x + U(t, x), where U solves
//! the backward damped vector equation sourced by the drift itself. With the
//! gradient certificate sup |grad U| <= kappa < 1, Phi(t, .) is a bi-Lipschitz
//! bijection and its inverse Psi is computed by fixed-point iteration.

use crate::error::{Error, Result};
use crate::grid::{self, Mat, Pt, SampledField, SpaceGrid, TimeGrid, MAX_DIM};
use crate::kernel::DiffusionCoefficient;
use crate::pde::{solve_backward_vector, tune_lambda, LambdaLadderEntry, PdeSolution, PicardOptions};

pub const INVERSION_TOL: f64 = 1e-12;
pub const INVERSION_MAX_ITER: usize = 80;

pub struct ZvonkinTransform {
    pub solution: PdeSolution,
    pub sigma: DiffusionCoefficient,
    pub lambda: f64,
    pub ladder: Vec<LambdaLadderEntry>,
    pub dim: usize,
}

impl ZvonkinTransform {
    pub fn u_at(&self, t: f64, x: &Pt) -> Pt {
        let mut buf = [0.0f64; MAX_DIM];
        self.solution.eval_u(t, x, &mut buf[..self.dim]);
        buf
    }

    /// Phi(t, x) = x + U(t, x)
    pub fn phi(&self, t: f64, x: &Pt) -> Pt {
        let u = self.u_at(t, x);
        let mut y = *x;
        for a in 0..self.dim {
            y[a] += u[a];
        }
        y
    }

    /// grad Phi = I + grad U (rows = components, columns = axes)
    pub fn grad_phi(&self, t: f64, x: &Pt) -> Mat {
        let mut m = self.solution.eval_grad(t, x);
        for a in 0..self.dim {
            m[a][a] += 1.0;
        }
        m
    }

    /// Psi(t, y): the unique x with x + U(t, x) = y, by the contraction
    /// x <- y - U(t, x).
    pub fn psi(&self, t: f64, y: &Pt) -> Result<Pt> {
        let mut x = *y;
        let scale = 1.0 + grid::norm2(y, self.dim);
        for _ in 0..INVERSION_MAX_ITER {
            let u = self.u_at(t, &x);
            let mut next = *y;
            let mut delta = 0.0f64;
            for a in 0..self.dim {
                next[a] -= u[a];
                delta = delta.max((next[a] - x[a]).abs());
            }
            x = next;
            if delta <= INVERSION_TOL * scale {
                return Ok(x);
            }
        }
        Err(Error::InversionFailed { t, max_iter: INVERSION_MAX_ITER })
    }

    /// grad Psi (t, y) = (I + grad U)^{-1} evaluated at x = Psi(t, y).
    pub fn grad_psi(&self, t: f64, y: &Pt) -> Result<Mat> {
        let x = self.psi(t, y)?;
        self.grad_psi_at_preimage(t, &x)
    }

    /// grad Psi expressed at a known preimage x (avoids re-inverting).
    pub fn grad_psi_at_preimage(&self, t: f64, x: &Pt) -> Result<Mat> {
        let gp = self.grad_phi(t, x);
        grid::mat_inv(&gp, self.dim).map_err(|_| Error::SingularCovariance)
    }

    /// Transformed drift at a transformed-space point:
    /// b~(t, y) = lambda U(t, Psi(t, y)).
    pub fn transformed_drift(&self, t: f64, y: &Pt) -> Result<Pt> {
        let x = self.psi(t, y)?;
        Ok(self.transformed_drift_at_preimage(t, &x))
    }

    pub fn transformed_drift_at_preimage(&self, t: f64, x: &Pt) -> Pt {
        let u = self.u_at(t, x);
        let mut out = grid::zero_pt();
        for a in 0..self.dim {
            out[a] = self.lambda * u[a];
        }
        out
    }

    /// Transformed diffusion matrix:
    /// sigma~(t, y) = (I + grad U(t, Psi(t, y))) sigma(t).
    pub fn transformed_sigma(&self, t: f64, y: &Pt) -> Result<Mat> {
        let x = self.psi(t, y)?;
        Ok(self.transformed_sigma_at_preimage(t, &x))
    }

    pub fn transformed_sigma_at_preimage(&self, t: f64, x: &Pt) -> Mat {
        let gp = self.grad_phi(t, x);
        let s = self.sigma.sigma_at(t);
        grid::mat_mul(&gp, &s, self.dim)
    }

    /// Exact spatial Jacobian of the interpolated U table (rows = components,
    /// columns = axes). This differentiates the map the simulator actually
    /// evaluates, unlike the interpolated gradient table, so linearizations
    /// built from it are exact for the discrete flow.
    pub fn grad_u_discrete(&self, t: f64, x: &Pt) -> Mat {
        let d = self.dim;
        let mut buf = [0.0f64; MAX_DIM * MAX_DIM];
        self.solution.u.eval_jacobian(t, x, &mut buf[..d * d]);
        let mut m = grid::zero_mat();
        for i in 0..d {
            for a in 0..d {
                m[i][a] = buf[i * d + a];
            }
        }
        m
    }

    /// Exact Jacobian of the interpolated Phi: I + the U-table Jacobian.
    pub fn grad_phi_discrete(&self, t: f64, x: &Pt) -> Mat {
        let mut m = self.grad_u_discrete(t, x);
        for a in 0..self.dim {
            m[a][a] += 1.0;
        }
        m
    }

    /// Exact Jacobian of the interpolated Psi at a known preimage x.
    pub fn grad_psi_discrete_at_preimage(&self, t: f64, x: &Pt) -> Result<Mat> {
        let gp = self.grad_phi_discrete(t, x);
        grid::mat_inv(&gp, self.dim).map_err(|_| Error::SingularCovariance)
    }

    /// Exact Jacobian of the interpolated gradient table, restricted to
    /// component `comp`: entry (k, l) = d (grad U)_{comp,k} / d x_l. The
    /// discrete counterpart of the Hessian of U_comp (not symmetric).
    pub fn hess_u_discrete(&self, t: f64, x: &Pt, comp: usize) -> Mat {
        let d = self.dim;
        let mut buf = [0.0f64; MAX_DIM * MAX_DIM * MAX_DIM];
        self.solution.grad.eval_jacobian(t, x, &mut buf[..d * d * d]);
        let mut m = grid::zero_mat();
        for k in 0..d {
            for l in 0..d {
                m[k][l] = buf[(comp * d + k) * d + l];
            }
        }
        m
    }

    /// Hessian of component `comp` of U.
    pub fn hess_u(&self, t: f64, x: &Pt, comp: usize) -> Mat {
        self.solution.eval_hess_comp(t, x, comp)
    }

    /// Bi-Lipschitz certificates implied by the gradient bound kappa:
    /// |grad Phi| in [1 - kappa, 1 + kappa], |grad Psi| <= 1 / (1 - kappa).
    pub fn diffeo_bounds(&self) -> (f64, f64, f64) {
        let kappa = self.solution.sup_grad;
        (1.0 - kappa, 1.0 + kappa, 1.0 / (1.0 - kappa))
    }
}

/// Builds the transform: tunes lambda until the gradient certificate
/// `sup |grad U| <= target` holds, then packages Phi / Psi with the
/// bi-Lipschitz bounds checked on the grid.
pub fn build_transform(
    grid: &SpaceGrid,
    time: &TimeGrid,
    drift: &SampledField,
    sigma: &DiffusionCoefficient,
    target: f64,
    lambda0: f64,
    lambda_max: f64,
    opts: &PicardOptions,
) -> Result<ZvonkinTransform> {
    assert!(target > 0.0 && target < 1.0, "gradient target must sit in (0,1)");
    let (sol, ladder) = tune_lambda(grid, time, drift, sigma, target, lambda0, lambda_max, opts)?;
    let lambda = sol.lambda;
    if sol.sup_grad > target {
        return Err(Error::HypothesisViolated(format!(
            "gradient certificate failed: sup |grad U| = {} > {target}",
            sol.sup_grad
        )));
    }
    Ok(ZvonkinTransform { solution: sol, sigma: sigma.clone(), lambda, ladder, dim: grid.dim })
}

/// Builds the transform at a fixed lambda (no tuning); still reports the
/// gradient certificate through the solution.
pub fn build_transform_fixed_lambda(
    grid: &SpaceGrid,
    time: &TimeGrid,
    drift: &SampledField,
    sigma: &DiffusionCoefficient,
    lambda: f64,
    opts: &PicardOptions,
) -> Result<ZvonkinTransform> {
    let sol = solve_backward_vector(grid, time, drift, sigma, lambda, opts)?;
    let ladder = vec![LambdaLadderEntry {
        lambda,
        grad_sup: sol.sup_grad,
        contraction_factor: sol.contraction_factor,
        iterations: sol.iterations,
    }];
    Ok(ZvonkinTransform { solution: sol, sigma: sigma.clone(), lambda, ladder, dim: grid.dim })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_transform() -> ZvonkinTransform {
        let g = SpaceGrid::new(1, 6.0, 1.0 / 32.0).unwrap();
        let tg = TimeGrid::new(1.0, 64).unwrap();
        let sigma = DiffusionCoefficient::identity(1);
        let b = SampledField::from_closure(g.clone(), tg.clone(), 1, |t, x, out| {
            out[0] = (x[0] + 0.3 * t).sin()
        });
        build_transform(&g, &tg, &b, &sigma, 0.5, 4.0, 65536.0, &PicardOptions::default()).unwrap()
    }

    #[test]
    fn zero_drift_gives_the_identity_transform() {
        let g = SpaceGrid::new(1, 4.0, 1.0 / 16.0).unwrap();
        let tg = TimeGrid::new(1.0, 32).unwrap();
        let sigma = DiffusionCoefficient::identity(1);
        let b = SampledField::zeros(g.clone(), tg.clone(), 1);
        let tr =
            build_transform(&g, &tg, &b, &sigma, 0.5, 4.0, 64.0, &PicardOptions::default()).unwrap();
        assert_eq!(tr.lambda, 4.0);
        for &x in &[-3.0, 0.0, 1.7] {
            let p = [x, 0.0, 0.0];
            let y = tr.phi(0.5, &p);
            assert_eq!(y[0], x);
            let back = tr.psi(0.5, &p).unwrap();
            assert_eq!(back[0], x);
            assert_eq!(tr.grad_phi(0.5, &p)[0][0], 1.0);
        }
    }

    #[test]
    fn roundtrip_inversion_is_tight() {
        let tr = smooth_transform();
        for &t in &[0.0, 0.31, 0.77, 1.0] {
            for i in 0..25 {
                let x = -4.0 + 8.0 * i as f64 / 24.0;
                let p = [x, 0.0, 0.0];
                let y = tr.phi(t, &p);
                let back = tr.psi(t, &y).unwrap();
                let tol = 1e-8 * (1.0 + x.abs());
                assert!((back[0] - x).abs() <= tol, "t {t} x {x}: {}", back[0]);
                // and the other composition order
                let x2 = tr.psi(t, &p).unwrap();
                let y2 = tr.phi(t, &x2);
                assert!((y2[0] - x).abs() <= tol);
            }
        }
    }

    #[test]
    fn gradient_bounds_hold_and_grad_psi_inverts_grad_phi() {
        let tr = smooth_transform();
        let (lo, hi, psi_bound) = tr.diffeo_bounds();
        assert!(lo > 0.5 && hi < 1.5, "({lo}, {hi})");
        for &t in &[0.1, 0.9] {
            for i in 0..15 {
                let x = -3.5 + 7.0 * i as f64 / 14.0;
                let p = [x, 0.0, 0.0];
                let gp = tr.grad_phi(t, &p)[0][0];
                assert!(gp > lo - 1e-9 && gp < hi + 1e-9);
                let y = tr.phi(t, &p);
                let gpsi = tr.grad_psi(t, &y).unwrap()[0][0];
                assert!((gpsi * gp - 1.0).abs() < 1e-9);
                assert!(gpsi.abs() <= psi_bound + 1e-9);
            }
        }
    }

    #[test]
    fn grad_phi_matches_finite_difference_of_phi() {
        let tr = smooth_transform();
        let t = 0.4;
        let eps = 1e-4;
        for &x in &[-2.0, 0.3, 1.9] {
            let fp = tr.phi(t, &[x + eps, 0.0, 0.0])[0];
            let fm = tr.phi(t, &[x - eps, 0.0, 0.0])[0];
            let fd = (fp - fm) / (2.0 * eps);
            let an = tr.grad_phi(t, &[x, 0.0, 0.0])[0][0];
            // both are grid-scale approximations of the true derivative
            assert!((fd - an).abs() < 2e-3, "x {x}: {fd} vs {an}");
        }
    }

    #[test]
    fn transformed_drift_recovers_original_drift_at_large_lambda() {
        // b~(t, Phi(t,x)) = lambda U(t, x) -> b(t, x) as lambda grows
        let g = SpaceGrid::new(1, 6.0, 1.0 / 32.0).unwrap();
        let tg = TimeGrid::new(1.0, 64).unwrap();
        let sigma = DiffusionCoefficient::identity(1);
        let b = SampledField::from_closure(g.clone(), tg.clone(), 1, |_, x, out| {
            out[0] = 0.8 * x[0].cos()
        });
        let tr = build_transform_fixed_lambda(&g, &tg, &b, &sigma, 512.0, &PicardOptions::default())
            .unwrap();
        for &x in &[-2.0, 0.0, 1.5] {
            let p = [x, 0.0, 0.0];
            let bt = tr.transformed_drift_at_preimage(0.2, &p)[0];
            assert!((bt - 0.8 * x.cos()).abs() < 0.05, "x {x}: {bt}");
        }
    }

    #[test]
    fn transformed_sigma_is_grad_phi_times_sigma() {
        let tr = smooth_transform();
        let t = 0.6;
        let p = [0.9, 0.0, 0.0];
        let y = tr.phi(t, &p);
        let st = tr.transformed_sigma(t, &y).unwrap();
        let gp = tr.grad_phi(t, &p);
        assert!((st[0][0] - gp[0][0]).abs() < 1e-9); // sigma = identity
    }
}
