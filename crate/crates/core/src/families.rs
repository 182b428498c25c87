//! Bundled drift families: smooth references, lacunary-series rough drifts
//! with prescribed spatial Hölder exponent, the sublinear-growth variant, and
//! the divergence-free two-dimensional fields.

use std::sync::Arc;

use crate::grid::Pt;
use crate::holder::{DriftSpec, HolderExponents};

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn phases(seed: u64, count: usize) -> Vec<f64> {
    let mut state = seed ^ 0xfacade;
    (0..count)
        .map(|_| 2.0 * std::f64::consts::PI * (splitmix(&mut state) >> 11) as f64 / (1u64 << 53) as f64)
        .collect()
}

pub fn zero(dim: usize, exponents: HolderExponents) -> DriftSpec {
    let spec = DriftSpec::new(
        dim,
        exponents,
        Arc::new(|_t, _x: &Pt, out: &mut [f64]| out.fill(0.0)),
    );
    spec.with_divergence(Arc::new(|_t, _x| 0.0), true)
}

/// Smooth bounded reference drift: each component a sinusoid in space with a
/// slow time modulation. Lipschitz, so the direct Euler scheme is a valid
/// oracle against the transformed scheme.
pub fn sinusoid(dim: usize, exponents: HolderExponents, amplitude: f64, wavenumber: f64) -> DriftSpec {
    DriftSpec::new(
        dim,
        exponents,
        Arc::new(move |t: f64, x: &Pt, out: &mut [f64]| {
            for (c, o) in out.iter_mut().enumerate() {
                *o = amplitude * (wavenumber * x[c] + 0.3 * t + c as f64).sin();
            }
        }),
    )
}

/// Lacunary cosine series b(x) = A sum_j 2^{-j alpha} cos(2^j x + phi_j):
/// bounded, alpha-Hölder and in no better Hölder class; nowhere
/// differentiable for alpha < 1 (a Weierstrass-type function).
pub fn lacunary(exponents: HolderExponents, terms: usize, amplitude: f64, seed: u64) -> DriftSpec {
    let alpha = exponents.alpha;
    let ph = phases(seed, terms);
    DriftSpec::new(
        1,
        exponents,
        Arc::new(move |_t: f64, x: &Pt, out: &mut [f64]| {
            let mut acc = 0.0;
            for (j, &phi) in ph.iter().enumerate() {
                let freq = (1u64 << j) as f64;
                acc += freq.powf(-alpha) * (freq * x[0] + phi).cos();
            }
            out[0] = amplitude * acc;
        }),
    )
}

/// The growth variant: lacunary part plus c * sign(x) |x|^{2/q - 1} with the
/// sign and modulus smoothed at scale delta (tanh sign, shifted modulus), so
/// the field stays C^1 near the origin but keeps the sublinear growth that
/// the weighted norms are built for.
pub fn growth(
    exponents: HolderExponents,
    terms: usize,
    amplitude: f64,
    growth_coeff: f64,
    seed: u64,
) -> DriftSpec {
    let base = lacunary(exponents, terms, amplitude, seed);
    let gamma = exponents.gamma_low;
    let delta = 0.1;
    let inner = base.closure.clone();
    DriftSpec::new(
        1,
        exponents,
        Arc::new(move |t: f64, x: &Pt, out: &mut [f64]| {
            inner(t, x, out);
            let r = x[0];
            let smooth_sign = (r / delta).tanh();
            let modulus = (r * r + delta * delta).powf(gamma / 2.0);
            out[0] += growth_coeff * smooth_sign * modulus;
        }),
    )
}

/// Planar rotation b(x) = omega (-x2, x1): linear, divergence-free, with the
/// closed-form flow X_t = e^{omega A t} x + int e^{omega A (t - tau)} dW_tau.
pub fn rot2d(exponents: HolderExponents, omega: f64) -> DriftSpec {
    let spec = DriftSpec::new(
        2,
        exponents,
        Arc::new(move |_t: f64, x: &Pt, out: &mut [f64]| {
            out[0] = -omega * x[1];
            out[1] = omega * x[0];
        }),
    );
    spec.with_divergence(Arc::new(|_t, _x| 0.0), true)
}

/// Divergence-free rough field in d = 2: the perpendicular gradient of a
/// lacunary stream function psi, b = (-d2 psi, d1 psi). Each component is
/// alpha-Hölder; div b = 0 identically.
pub fn perp_lacunary(exponents: HolderExponents, terms: usize, amplitude: f64, seed: u64) -> DriftSpec {
    let alpha = exponents.alpha;
    let ph = phases(seed, terms);
    // unit directions for the plane waves, deterministic from the seed
    let dirs: Vec<(f64, f64)> = {
        let mut state = seed ^ 0xd1a2;
        (0..terms)
            .map(|_| {
                let th = 2.0 * std::f64::consts::PI * (splitmix(&mut state) >> 11) as f64
                    / (1u64 << 53) as f64;
                (th.cos(), th.sin())
            })
            .collect()
    };
    let spec = DriftSpec::new(
        2,
        exponents,
        Arc::new(move |_t: f64, x: &Pt, out: &mut [f64]| {
            // psi = sum_j 2^{-j(alpha+1)} cos(2^j k_j.x + phi_j)
            // grad psi = -sum_j 2^{-j alpha} k_j sin(2^j k_j.x + phi_j)
            let mut g1 = 0.0;
            let mut g2 = 0.0;
            for j in 0..ph.len() {
                let freq = (1u64 << j) as f64;
                let (k1, k2) = dirs[j];
                let s = (freq * (k1 * x[0] + k2 * x[1]) + ph[j]).sin();
                g1 -= freq.powf(-alpha) * k1 * s;
                g2 -= freq.powf(-alpha) * k2 * s;
            }
            out[0] = -amplitude * g2;
            out[1] = amplitude * g1;
        }),
    );
    spec.with_divergence(Arc::new(|_t, _x| 0.0), true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{SpaceGrid, TimeGrid};
    use crate::holder::holder_seminorm;

    fn expo(alpha: f64) -> HolderExponents {
        HolderExponents::new(1.5, alpha, None).unwrap()
    }

    #[test]
    fn lacunary_is_bounded_by_the_geometric_sum_and_rough() {
        let alpha = 0.5;
        let b = lacunary(expo(alpha), 14, 1.0, 7);
        let bound: f64 = (0..14).map(|j| (1u64 << j) as f64).map(|f| f.powf(-alpha)).sum();
        let g = SpaceGrid::new(1, 8.0, 1.0 / 256.0).unwrap();
        let tg = TimeGrid::new(1.0, 1).unwrap();
        let field = b.sample(&g, &tg);
        for v in field.slice(0) {
            assert!(v.abs() <= bound + 1e-12);
        }
        // the alpha-seminorm saturates while the 1-seminorm blows up with
        // resolution: a Lipschitz fit would not survive refinement
        let s_alpha = holder_seminorm(&g, field.slice(0), 1, alpha, usize::MAX).unwrap();
        let s_lip = holder_seminorm(&g, field.slice(0), 1, 1.0, usize::MAX).unwrap();
        assert!(s_alpha > 0.5 && s_alpha < 20.0, "{s_alpha}");
        assert!(s_lip > 5.0 * s_alpha, "lip {s_lip} vs alpha {s_alpha}");
    }

    #[test]
    fn lacunary_seminorm_grows_under_refinement_but_alpha_norm_saturates() {
        let alpha = 0.4;
        let b = lacunary(expo(alpha), 16, 1.0, 3);
        let tg = TimeGrid::new(1.0, 1).unwrap();
        let mut alpha_norms = Vec::new();
        let mut lip_norms = Vec::new();
        for &h in &[1.0 / 64.0, 1.0 / 256.0] {
            let g = SpaceGrid::new(1, 2.0, h).unwrap();
            let f = b.sample(&g, &tg);
            alpha_norms.push(holder_seminorm(&g, f.slice(0), 1, alpha, usize::MAX).unwrap());
            lip_norms.push(holder_seminorm(&g, f.slice(0), 1, 1.0, usize::MAX).unwrap());
        }
        assert!(lip_norms[1] > 1.5 * lip_norms[0], "{lip_norms:?}");
        assert!(alpha_norms[1] < 1.5 * alpha_norms[0], "{alpha_norms:?}");
    }

    #[test]
    fn growth_variant_tracks_the_power_law_far_from_origin() {
        let e = expo(0.6);
        let gamma = e.gamma_low;
        let b = growth(e, 12, 0.5, 2.0, 5);
        let base = lacunary(e, 12, 0.5, 5);
        for &x in &[3.0, -5.0, 7.5f64] {
            let p = [x, 0.0, 0.0];
            let got = b.eval(0.0, &p)[0] - base.eval(0.0, &p)[0];
            let expect = 2.0 * x.signum() * x.abs().powf(gamma);
            assert!((got - expect).abs() < 0.05 * expect.abs(), "x {x}: {got} vs {expect}");
        }
    }

    #[test]
    fn rotation_is_divergence_free_and_matches_matrix_form() {
        let b = rot2d(expo(0.5), 1.3);
        assert!(b.divergence_free);
        let p = [0.7, -0.2, 0.0];
        let v = b.eval(0.0, &p);
        assert_eq!(v[0], -1.3 * -0.2);
        assert_eq!(v[1], 1.3 * 0.7);
    }

    #[test]
    fn perp_lacunary_has_zero_divergence_numerically() {
        let b = perp_lacunary(expo(0.7), 8, 1.0, 11);
        assert!(b.divergence_free);
        let eps = 1e-6;
        for &(x, y) in &[(0.3, -0.8), (1.1, 0.4), (-0.6, -0.2)] {
            let d1 = (b.eval(0.0, &[x + eps, y, 0.0])[0] - b.eval(0.0, &[x - eps, y, 0.0])[0])
                / (2.0 * eps);
            let d2 = (b.eval(0.0, &[x, y + eps, 0.0])[1] - b.eval(0.0, &[x, y - eps, 0.0])[1])
                / (2.0 * eps);
            assert!((d1 + d2).abs() < 1e-4, "div at ({x},{y}) = {}", d1 + d2);
        }
    }

    #[test]
    fn families_are_deterministic_in_the_seed() {
        let a = lacunary(expo(0.5), 10, 1.0, 42);
        let b = lacunary(expo(0.5), 10, 1.0, 42);
        let c = lacunary(expo(0.5), 10, 1.0, 43);
        let p = [0.37, 0.0, 0.0];
        assert_eq!(a.eval(0.0, &p)[0], b.eval(0.0, &p)[0]);
        assert_ne!(a.eval(0.0, &p)[0], c.eval(0.0, &p)[0]);
    }
}
