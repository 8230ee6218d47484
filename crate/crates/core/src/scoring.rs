//! Continuous Ranked Probability Score in the formulations used for
//! training and verification.
//!
//! All functions are pure and safe for concurrent use. Internals run in
//! `f64` regardless of the caller's working precision.

use crate::error::{Error, Result};

const INV_SQRT_PI: f64 = 0.5641895835477563; // 1/sqrt(pi)
const INV_SQRT_2PI: f64 = 0.3989422804014327; // 1/sqrt(2*pi)
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF via the error function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z * FRAC_1_SQRT_2))
}

/// Closed-form CRPS of a normal predictive distribution N(mu, sigma^2)
/// against observation `y`:
/// `sigma * [ z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi) ]` with
/// `z = (y - mu) / sigma`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "crps_gaussian requires sigma > 0, got {sigma}"
        )));
    }
    let z = (y - mu) / sigma;
    Ok(sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - INV_SQRT_PI))
}

/// Partial derivatives `(d/dmu, d/dsigma)` of [`crps_gaussian`].
pub fn crps_gaussian_grad(mu: f64, sigma: f64, y: f64) -> (f64, f64) {
    let z = (y - mu) / sigma;
    let dmu = -(2.0 * normal_cdf(z) - 1.0);
    let dsigma = 2.0 * normal_pdf(z) - INV_SQRT_PI;
    (dmu, dsigma)
}

/// Parameters of the spread-regularized kernel CRPS.
///
/// `lambda` weights the penalty; members deviating from the ensemble mean by
/// more than `k_penalty` standard deviations are penalized. Published
/// settings: (0.0275, 2.7) for ten-meter wind, (0.05, 2.0) for
/// hundred-meter wind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelCrpsConfig {
    pub lambda: f64,
    pub k_penalty: f64,
}

impl KernelCrpsConfig {
    pub fn new(lambda: f64, k_penalty: f64) -> Result<Self> {
        if lambda < 0.0 || k_penalty < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "kernel CRPS constants must be non-negative, got lambda={lambda} k={k_penalty}"
            )));
        }
        Ok(Self { lambda, k_penalty })
    }

    pub fn ten_meter_wind() -> Self {
        Self {
            lambda: 0.0275,
            k_penalty: 2.7,
        }
    }

    pub fn hundred_meter_wind() -> Self {
        Self {
            lambda: 0.05,
            k_penalty: 2.0,
        }
    }
}

fn ensemble_mean_std(members: &[f64]) -> (f64, f64) {
    let m = members.len();
    let mean = members.iter().sum::<f64>() / m as f64;
    // Unbiased estimator; defined as 0 for a single member.
    let std = if m >= 2 {
        (members.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Distribution-free kernel CRPS of an ensemble with a spread penalty:
/// `(1/m) sum |x_i - y| - (1/2m^2) sum_ij |x_i - x_j|
///  + lambda * (1/m) sum max(0, |x_i - xbar| - k * sigma_x)`.
pub fn crps_kernel(members: &[f64], y: f64, config: &KernelCrpsConfig) -> Result<f64> {
    let m = members.len();
    if m == 0 {
        return Err(Error::InvalidArgument(
            "crps_kernel requires at least one member".into(),
        ));
    }
    let mf = m as f64;
    let term1 = members.iter().map(|x| (x - y).abs()).sum::<f64>() / mf;
    let mut pair_sum = 0.0;
    for i in 0..m {
        for j in 0..m {
            pair_sum += (members[i] - members[j]).abs();
        }
    }
    let term2 = pair_sum / (2.0 * mf * mf);
    let (mean, std) = ensemble_mean_std(members);
    let penalty = members
        .iter()
        .map(|x| ((x - mean).abs() - config.k_penalty * std).max(0.0))
        .sum::<f64>()
        / mf;
    Ok(term1 - term2 + config.lambda * penalty)
}

/// Subgradient of [`crps_kernel`] with respect to each member.
///
/// `|.|` contributes 0 at its kink and inactive penalty terms contribute
/// nothing, so the result is a valid subgradient everywhere.
pub fn crps_kernel_grad(members: &[f64], y: f64, config: &KernelCrpsConfig) -> Result<Vec<f64>> {
    let m = members.len();
    if m == 0 {
        return Err(Error::InvalidArgument(
            "crps_kernel_grad requires at least one member".into(),
        ));
    }
    let mf = m as f64;
    let (mean, std) = ensemble_mean_std(members);
    let mut grad = vec![0.0f64; m];
    for i in 0..m {
        let mut g = sign(members[i] - y) / mf;
        let mut pair = 0.0;
        for j in 0..m {
            pair += sign(members[i] - members[j]);
        }
        g -= pair / (mf * mf);
        grad[i] = g;
    }
    if config.lambda > 0.0 {
        for j in 0..m {
            let dev = members[j] - mean;
            if dev.abs() - config.k_penalty * std <= 0.0 {
                continue;
            }
            let sj = sign(dev);
            for i in 0..m {
                let delta = if i == j { 1.0 } else { 0.0 };
                let dstd = if m >= 2 && std > 0.0 {
                    (members[i] - mean) / ((m - 1) as f64 * std)
                } else {
                    0.0
                };
                grad[i] += config.lambda / mf * (sj * (delta - 1.0 / mf) - config.k_penalty * dstd);
            }
        }
    }
    Ok(grad)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fair ensemble CRPS, removing the finite-ensemble bias with the (m-1)
/// denominator:
/// `(1/m) sum |x_i - y| - (1/(2m(m-1))) sum_{i != j} |x_i - x_j|`.
pub fn crps_fair(members: &[f64], y: f64) -> Result<f64> {
    let m = members.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "crps_fair requires at least two members, got {m}"
        )));
    }
    let mf = m as f64;
    let term1 = members.iter().map(|x| (x - y).abs()).sum::<f64>() / mf;
    let mut pair_sum = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                pair_sum += (members[i] - members[j]).abs();
            }
        }
    }
    Ok(term1 - pair_sum / (2.0 * mf * (mf - 1.0)))
}

/// Quadrature oracle for the defining integral
/// `CRPS(F, y) = integral (F(t) - 1{y <= t})^2 dt`.
///
/// Trapezoidal evaluation over `grid`, splitting the interval containing `y`
/// at the indicator jump. Intended as an independent check of the
/// closed-form scores; not used on any training path.
pub fn crps_integral_oracle(cdf: impl Fn(f64) -> f64, y: f64, grid: &[f64]) -> Result<f64> {
    if grid.len() < 2 {
        return Err(Error::InvalidArgument(
            "integration grid needs at least two points".into(),
        ));
    }
    for w in grid.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::InvalidArgument(
                "integration grid must be strictly increasing".into(),
            ));
        }
    }
    let lo = *grid.first().unwrap();
    let hi = *grid.last().unwrap();
    let tail = cdf(lo).max(1.0 - cdf(hi));
    if tail > 1e-8 {
        return Err(Error::InvalidArgument(format!(
            "grid too narrow: {tail:.3e} tail mass outside [{lo}, {hi}]"
        )));
    }
    if y < lo || y > hi {
        return Err(Error::InvalidArgument(format!(
            "observation {y} outside integration grid [{lo}, {hi}]"
        )));
    }

    let integrand = |t: f64, indicator: bool| {
        let f = cdf(t);
        let step = if indicator { 1.0 } else { 0.0 };
        (f - step) * (f - step)
    };
    let mut total = 0.0;
    for w in grid.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t0 < y && y < t1 {
            // Split at the indicator jump.
            total += 0.5 * (y - t0) * (integrand(t0, false) + integrand(y, false));
            total += 0.5 * (t1 - y) * (integrand(y, true) + integrand(t1, true));
        } else {
            let ind0 = y <= t0;
            let ind1 = y <= t1;
            total += 0.5 * (t1 - t0) * (integrand(t0, ind0) + integrand(t1, ind1));
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gaussian_standard_value() {
        // mu=0, sigma=1, y=0: CRPS = 2 phi(0) - 1/sqrt(pi).
        let v = crps_gaussian(0.0, 1.0, 0.0).unwrap();
        assert!((v - 0.233694).abs() < 1e-6, "{v}");
    }

    #[test]
    fn gaussian_scale_identity() {
        let cases = [(1.5, 0.7, 2.0), (-3.0, 4.0, -2.5), (0.0, 10.0, 5.0)];
        for (mu, sigma, y) in cases {
            let a = crps_gaussian(mu, sigma, y).unwrap();
            let b = sigma * crps_gaussian(0.0, 1.0, (y - mu) / sigma).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gaussian_sigma_limit_and_errors() {
        // sigma -> 0 with y = mu: value -> sigma * (2 phi(0) - 1/sqrt(pi)) -> 0.
        let v = crps_gaussian(1.0, 1e-9, 1.0).unwrap();
        assert!(v < 1e-9, "{v}");
        assert!(crps_gaussian(0.0, 0.0, 0.0).is_err());
        assert!(crps_gaussian(0.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn gaussian_grad_matches_finite_differences() {
        let cases = [(0.3, 0.9, 1.2), (-1.0, 2.5, -3.0), (2.0, 0.4, 2.1)];
        let h = 1e-6;
        for (mu, sigma, y) in cases {
            let (dmu, dsigma) = crps_gaussian_grad(mu, sigma, y);
            let fd_mu = (crps_gaussian(mu + h, sigma, y).unwrap()
                - crps_gaussian(mu - h, sigma, y).unwrap())
                / (2.0 * h);
            let fd_sigma = (crps_gaussian(mu, sigma + h, y).unwrap()
                - crps_gaussian(mu, sigma - h, y).unwrap())
                / (2.0 * h);
            assert!((dmu - fd_mu).abs() < 1e-7, "{dmu} vs {fd_mu}");
            assert!((dsigma - fd_sigma).abs() < 1e-7, "{dsigma} vs {fd_sigma}");
        }
    }

    #[test]
    fn kernel_hand_values() {
        let cfg0 = KernelCrpsConfig::new(0.0, 2.7).unwrap();
        assert_eq!(crps_kernel(&[1.0, 1.0, 1.0], 1.0, &cfg0).unwrap(), 0.0);
        let v = crps_kernel(&[0.0, 2.0], 1.0, &cfg0).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "{v}");
        // lambda=1, k=0: penalty = mean |x_i - xbar| = 1.
        let cfg1 = KernelCrpsConfig::new(1.0, 0.0).unwrap();
        let v = crps_kernel(&[0.0, 2.0], 1.0, &cfg1).unwrap();
        assert!((v - 1.5).abs() < 1e-12, "{v}");
        assert!(crps_kernel(&[], 0.0, &cfg0).is_err());
    }

    #[test]
    fn fair_hand_values() {
        let v = crps_fair(&[0.0, 2.0], 1.0).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
        assert_eq!(crps_fair(&[3.0, 3.0, 3.0], 3.0).unwrap(), 0.0);
        assert!(crps_fair(&[1.0], 1.0).is_err());
    }

    #[test]
    fn fair_relates_to_kernel() {
        // fair = kernel(lambda=0) - S / (2 m^2 (m-1)), S = sum_{i!=j} |xi-xj|.
        let cfg0 = KernelCrpsConfig::new(0.0, 0.0).unwrap();
        let members = [0.3f64, -1.2, 2.5, 0.9, -0.4];
        let y = 0.7;
        let m = members.len() as f64;
        let mut s = 0.0;
        for i in 0..members.len() {
            for j in 0..members.len() {
                if i != j {
                    s += (members[i] - members[j]).abs();
                }
            }
        }
        let fair = crps_fair(&members, y).unwrap();
        let kernel0 = crps_kernel(&members, y, &cfg0).unwrap();
        let expected = kernel0 - s / (2.0 * m * m * (m - 1.0));
        assert!((fair - expected).abs() < 1e-12, "{fair} vs {expected}");
    }

    #[test]
    fn kernel_grad_matches_finite_differences() {
        let cfg = KernelCrpsConfig::new(0.5, 1.0).unwrap();
        let members = [0.3, -1.25, 2.55, 0.92, -0.41]; // away from kinks
        let y = 0.7;
        let grad = crps_kernel_grad(&members, y, &cfg).unwrap();
        let h = 1e-7;
        for i in 0..members.len() {
            let mut plus = members;
            plus[i] += h;
            let mut minus = members;
            minus[i] -= h;
            let fd = (crps_kernel(&plus, y, &cfg).unwrap() - crps_kernel(&minus, y, &cfg).unwrap())
                / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() < 1e-5,
                "member {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    /// Exact integral of (F_emp - 1{y<=t})^2 for the empirical step CDF:
    /// piecewise-constant integrand between consecutive breakpoints.
    fn step_cdf_crps_exact(members: &[f64], y: f64) -> f64 {
        let m = members.len() as f64;
        let mut breaks: Vec<f64> = members.to_vec();
        breaks.push(y);
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup();
        let mut total = 0.0;
        for w in breaks.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            let mid = 0.5 * (t0 + t1);
            let f = members.iter().filter(|&&x| x <= mid).count() as f64 / m;
            let ind = if y <= mid { 1.0 } else { 0.0 };
            total += (f - ind) * (f - ind) * (t1 - t0);
        }
        total
    }

    #[test]
    fn kernel_lambda0_equals_step_cdf_integral() {
        let cfg0 = KernelCrpsConfig::new(0.0, 0.0).unwrap();
        // Hand case from the defining integral: members {0,2}, y=1 -> 0.5.
        let exact = step_cdf_crps_exact(&[0.0, 2.0], 1.0);
        assert!((exact - 0.5).abs() < 1e-12);
        let kernel = crps_kernel(&[0.0, 2.0], 1.0, &cfg0).unwrap();
        assert!((kernel - exact).abs() < 1e-12);

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = rng.random_range(2..=15);
            let members: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y = rng.random_range(-6.0..6.0);
            let kernel = crps_kernel(&members, y, &cfg0).unwrap();
            let exact = step_cdf_crps_exact(&members, y);
            assert!((kernel - exact).abs() < 1e-8, "{kernel} vs {exact}");
        }
    }

    #[test]
    fn oracle_matches_gaussian_closed_form() {
        let grid: Vec<f64> = (0..=100_000)
            .map(|i| -12.0 + 24.0 * i as f64 / 100_000.0)
            .collect();
        let oracle = crps_integral_oracle(normal_cdf, 0.0, &grid).unwrap();
        assert!((oracle - 0.233694).abs() < 1e-6, "{oracle}");
    }

    #[test]
    fn oracle_point_mass_is_zero() {
        // Degenerate distribution at y: F jumps 0 -> 1 at y.
        let y = 1.5;
        let cdf = move |t: f64| if t < y { 0.0 } else { 1.0 };
        let grid = vec![-3.0, 0.0, 1.5, 2.0, 6.0];
        let v = crps_integral_oracle(cdf, y, &grid).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn oracle_rejects_narrow_grid() {
        let grid: Vec<f64> = (0..=100).map(|i| -1.0 + 2.0 * i as f64 / 100.0).collect();
        assert!(crps_integral_oracle(normal_cdf, 0.0, &grid).is_err());
    }

    proptest! {
        #[test]
        fn scores_are_nonnegative_and_translation_invariant(
            raw in proptest::collection::vec(-50.0f64..50.0, 2..12),
            y in -60.0f64..60.0,
            shift in -30.0f64..30.0,
        ) {
            let cfg = KernelCrpsConfig::ten_meter_wind();
            let kernel = crps_kernel(&raw, y, &cfg).unwrap();
            let fair = crps_fair(&raw, y).unwrap();
            prop_assert!(kernel >= -1e-12);
            prop_assert!(fair >= -1e-12);

            let shifted: Vec<f64> = raw.iter().map(|x| x + shift).collect();
            prop_assert!((crps_kernel(&shifted, y + shift, &cfg).unwrap() - kernel).abs() < 1e-10);
            prop_assert!((crps_fair(&shifted, y + shift).unwrap() - fair).abs() < 1e-10);
        }

        #[test]
        fn kernel_and_fair_are_positively_homogeneous(
            raw in proptest::collection::vec(-20.0f64..20.0, 2..10),
            y in -25.0f64..25.0,
            scale in 0.1f64..10.0,
        ) {
            let cfg = KernelCrpsConfig::hundred_meter_wind();
            let kernel = crps_kernel(&raw, y, &cfg).unwrap();
            let fair = crps_fair(&raw, y).unwrap();
            let scaled: Vec<f64> = raw.iter().map(|x| x * scale).collect();
            prop_assert!((crps_kernel(&scaled, y * scale, &cfg).unwrap() - scale * kernel).abs() < 1e-8);
            prop_assert!((crps_fair(&scaled, y * scale).unwrap() - scale * fair).abs() < 1e-8);
        }
    }
}
