//! Small statistics toolkit: moments, deterministic bootstrap resampling and
//! ordinary least squares in log-log coordinates.

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0).max(1.0)
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mean and a bootstrap standard error of the mean (deterministic resampling
/// driven by `seed`). Errors below 2 samples.
pub fn bootstrap_mean_stderr(xs: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::TooFewPaths(xs.len()));
    }
    if !xs.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let m = mean(xs);
    let n = xs.len() as u64;
    let mut state = seed ^ 0xb0075742_u64.wrapping_mul(n);
    let mut resample_means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..xs.len() {
            acc += xs[(splitmix(&mut state) % n) as usize];
        }
        resample_means.push(acc / n as f64);
    }
    Ok((m, variance(&resample_means).sqrt()))
}

/// OLS fit y = slope * x + intercept.
pub fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// OLS slope in log-log coordinates; needs at least 4 ladder points and
/// strictly positive data.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() < 4 {
        return Err(Error::LadderTooShort(xs.len()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    Ok(ols(&lx, &ly).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_recovers_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.5 * x - 0.7).collect();
        let (s, i) = ols(&xs, &ys);
        assert!((s - 2.5).abs() < 1e-13 && (i + 0.7).abs() < 1e-13);
    }

    #[test]
    fn loglog_slope_recovers_power_law() {
        let xs: Vec<f64> = (1..=8).map(|i| 0.5f64.powi(i)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(0.62)).collect();
        let s = loglog_slope(&xs, &ys).unwrap();
        assert!((s - 0.62).abs() < 1e-12);
        assert!(loglog_slope(&xs[..3], &ys[..3]).is_err());
    }

    #[test]
    fn bootstrap_is_deterministic_and_roughly_right() {
        let mut state = 7u64;
        let xs: Vec<f64> = (0..400)
            .map(|_| (splitmix(&mut state) as f64 / u64::MAX as f64) - 0.5)
            .collect();
        let (m1, s1) = bootstrap_mean_stderr(&xs, 1000, 42).unwrap();
        let (m2, s2) = bootstrap_mean_stderr(&xs, 1000, 42).unwrap();
        assert_eq!((m1, s1), (m2, s2));
        // uniform(-1/2,1/2): sd = 1/sqrt(12), stderr ~ sd / 20
        let expect = 1.0 / 12f64.sqrt() / 20.0;
        assert!((s1 - expect).abs() < 0.4 * expect, "{s1} vs {expect}");
        assert!(bootstrap_mean_stderr(&[1.0], 10, 0).is_err());
    }
}
