//! Small numerical helpers: deterministic reductions, seeding, regressions.

use crate::error::{Error, Result};

/// SplitMix64 finalizer; used to derive independent sub-seeds.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for a named stream ("solver", "mc", "ldp", ...).
pub fn named_seed(master: u64, name: &str) -> u64 {
    // FNV-1a of the name, then mixed with the master seed.
    let h = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    mix(master, h)
}

/// Pairwise summation in a fixed tree order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Mean and standard error of the mean.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(v) / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Ordinary least squares `y = a + b x`; returns `(a, b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("a fit needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidArgument("abscissae are all equal".into()));
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::NonFinite("linear fit".into()));
    }
    Ok((a, b))
}

/// Slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(loglog_fit(x, y)?.1)
}

/// `(log c, p)` with `y ~ c x^p`.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Fits `y ~ c t^{-beta} e^{-a t}` by least squares on `log y`; returns
/// `(log c, beta, a)`.
pub fn power_exp_fit(t: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if t.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: t.len(), got: y.len() });
    }
    if t.len() < 3 {
        return Err(Error::InvalidArgument("a power-exponential fit needs at least three points".into()));
    }
    if t.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("power-exponential fit needs positive data".into()));
    }
    let x = nalgebra::DMatrix::from_fn(t.len(), 3, |r, c| match c {
        0 => 1.0,
        1 => t[r].ln(),
        _ => t[r],
    });
    let rhs = nalgebra::DVector::from_iterator(y.len(), y.iter().map(|v| v.ln()));
    let sol = x
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::InvalidArgument(format!("degenerate fit: {e}")))?;
    Ok((sol[0], -sol[1], -sol[2]))
}

/// `n` log-spaced points between `a` and `b` inclusive.
pub fn logspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let (la, lb) = (a.ln(), b.ln());
    (0..n).map(|k| (la + (lb - la) * k as f64 / (n - 1) as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_recover_power_law() {
        let x = logspace(1e-3, 1e-1, 6);
        let y: Vec<f64> = x.iter().map(|t| 3.0 * t.powf(-0.7)).collect();
        let (lc, p) = loglog_fit(&x, &y).unwrap();
        assert!((p + 0.7).abs() < 1e-12);
        assert!((lc.exp() - 3.0).abs() < 1e-10);
        assert!(loglog_fit(&[1.0], &[1.0]).is_err());
        assert!(loglog_fit(&[1.0, 2.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn power_exp_recovers_parameters() {
        let t = logspace(1e-3, 1e-1, 7);
        let y: Vec<f64> = t.iter().map(|s| 2.0 * s.powf(-0.6) * (-3.0 * s).exp()).collect();
        let (lc, b, a) = power_exp_fit(&t, &y).unwrap();
        assert!((lc - 2f64.ln()).abs() < 1e-9);
        assert!((b - 0.6).abs() < 1e-9);
        assert!((a - 3.0).abs() < 1e-7);
    }

    #[test]
    fn pairwise_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|k| (k as f64).sin()).collect();
        assert!((pairwise_sum(&v) - v.iter().sum::<f64>()).abs() < 1e-10);
        let (m, se) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-15);
    }

    #[test]
    fn seeds_differ() {
        assert_ne!(mix(1, 0), mix(1, 1));
        assert_ne!(named_seed(5, "mc"), named_seed(5, "ldp"));
        assert_eq!(named_seed(5, "mc"), named_seed(5, "mc"));
    }
}
