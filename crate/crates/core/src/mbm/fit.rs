//! CRPS-minimizing estimation of the member-by-member parameters.
//!
//! Every (gridpoint, lead time) cell is fitted independently: a BFGS
//! descent with numerical central gradients over
//! `(alpha, beta, log gamma1, log gamma2)` starting from the identity
//! configuration. The log parameterization keeps the spread parameters
//! non-negative; descent from the identity start means the fitted
//! training CRPS can never exceed the identity CRPS (a cell that fails to
//! converge keeps the identity parameters and is flagged).

use rayon::prelude::*;

use super::{MbmGrid, MbmParameters, VARIANCE_FLOOR};
use crate::data::ForecastDataset;
use crate::error::{Error, Result};
use crate::scoring::{crps_fair, crps_gaussian};

/// Loss minimized per cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbmLossKind {
    /// Analytic CRPS of a normal fit with mu = alpha + beta . vbar and
    /// sigma = tau * sigma_eps.
    GaussianCrps,
    /// Fair CRPS of the corrected members clamped at zero; for
    /// non-negative targets.
    AbsCrpsNonnegative,
}

#[derive(Clone, Debug)]
pub struct MbmFitConfig {
    pub loss_kind: MbmLossKind,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Reserved for stochastic extensions; the fit itself is deterministic.
    pub seed: u64,
}

impl Default for MbmFitConfig {
    fn default() -> Self {
        Self {
            loss_kind: MbmLossKind::GaussianCrps,
            max_iterations: 200,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

/// Outcome of one cell's fit.
#[derive(Clone, Copy, Debug)]
pub struct CellFit {
    pub identity_crps: f64,
    pub fitted_crps: f64,
    pub converged: bool,
    /// Degenerate ensemble (variance under the floor) at this cell.
    pub flagged_degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct FitDiagnostics {
    pub cells: usize,
    pub converged_cells: usize,
    pub flagged_cells: usize,
    pub mean_identity_crps: f64,
    pub mean_fitted_crps: f64,
    pub per_cell: Vec<CellFit>,
}

/// Training observations of one cell, gathered once.
struct CellData {
    samples: usize,
    k: usize,
    c: usize,
    /// `[samples, c]` per-sample predictor ensemble means.
    chan_means: Vec<f64>,
    /// `[samples, k]` target deviations from the target ensemble mean.
    devs: Vec<f64>,
    /// Per-sample unbiased target ensemble variance.
    sigma2: Vec<f64>,
    obs: Vec<f64>,
}

impl CellData {
    fn gather(ds: &ForecastDataset, lat: usize, lon: usize, lead: usize) -> Self {
        let (n, k, t, c) = (ds.samples(), ds.members(), ds.lead_times(), ds.channels());
        let (h, w) = ds.grid();
        let src = ds.forecasts.data();
        let target = ds.target_index;
        let mut chan_means = vec![0.0f64; n * c];
        let mut devs = vec![0.0f64; n * k];
        let mut sigma2 = vec![0.0f64; n];
        let mut obs = vec![0.0f64; n];
        for s in 0..n {
            for m in 0..k {
                let base = ((((s * k + m) * t + lead) * h + lat) * w + lon) * c;
                for ch in 0..c {
                    chan_means[s * c + ch] += src[base + ch] as f64;
                }
                devs[s * k + m] = src[base + target] as f64;
            }
            for ch in 0..c {
                chan_means[s * c + ch] /= k as f64;
            }
            let mean = chan_means[s * c + target];
            let mut var = 0.0;
            for m in 0..k {
                devs[s * k + m] -= mean;
                var += devs[s * k + m] * devs[s * k + m];
            }
            sigma2[s] = var / (k - 1) as f64;
            obs[s] = ds.observations.at(&[s, lead, lat, lon]) as f64;
        }
        Self {
            samples: n,
            k,
            c,
            chan_means,
            devs,
            sigma2,
            obs,
        }
    }

    fn degenerate(&self) -> bool {
        self.sigma2.iter().any(|&v| v < VARIANCE_FLOOR)
    }

    /// Mean training CRPS of explicit parameter values.
    fn objective(
        &self,
        kind: MbmLossKind,
        alpha: f64,
        beta: &[f64],
        gamma1: f64,
        gamma2: f64,
        scratch: &mut Vec<f64>,
    ) -> f64 {
        let mut total = 0.0;
        for s in 0..self.samples {
            let means = &self.chan_means[s * self.c..(s + 1) * self.c];
            let mu = alpha + beta.iter().zip(means).map(|(b, m)| b * m).sum::<f64>();
            match kind {
                MbmLossKind::GaussianCrps => {
                    // sigma^2 = tau^2 sigma_eps^2 = gamma1^2 sigma_eps^2 + gamma2^2
                    let var = gamma1 * gamma1 * self.sigma2[s] + gamma2 * gamma2;
                    let sigma = var.sqrt().max(1e-9);
                    total += crps_gaussian(mu, sigma, self.obs[s]).expect("sigma floored");
                }
                MbmLossKind::AbsCrpsNonnegative => {
                    let tau = (gamma1 * gamma1 + gamma2 * gamma2 / self.sigma2[s]).sqrt();
                    scratch.clear();
                    scratch.extend(
                        self.devs[s * self.k..(s + 1) * self.k]
                            .iter()
                            .map(|d| (mu + tau * d).max(0.0)),
                    );
                    total += crps_fair(scratch, self.obs[s]).expect("k >= 2");
                }
            }
        }
        total / self.samples as f64
    }

    fn objective_theta(&self, kind: MbmLossKind, theta: &[f64], scratch: &mut Vec<f64>) -> f64 {
        let c = self.c;
        self.objective(
            kind,
            theta[0],
            &theta[1..1 + c],
            theta[1 + c].exp(),
            theta[2 + c].exp(),
            scratch,
        )
    }
}

/// Starting value for log(gamma2); exactly zero is outside the log
/// parameterization, and 1e-3 perturbs tau^2 by at most 1e-6.
const LOG_GAMMA2_START: f64 = -6.907755278982137; // ln(1e-3)

fn fit_cell(data: &CellData, cfg: &MbmFitConfig, target_index: usize) -> (MbmParameters, CellFit) {
    let identity = MbmParameters::identity(data.c, target_index);
    let mut scratch = Vec::with_capacity(data.k);
    let identity_crps = data.objective(
        cfg.loss_kind,
        identity.alpha,
        &identity.beta,
        identity.gamma1,
        identity.gamma2,
        &mut scratch,
    );

    if data.degenerate() {
        return (
            identity,
            CellFit {
                identity_crps,
                fitted_crps: identity_crps,
                converged: false,
                flagged_degenerate: true,
            },
        );
    }

    let mut theta0 = vec![0.0f64; data.c + 3];
    theta0[1 + target_index] = 1.0;
    theta0[1 + data.c] = 0.0; // log gamma1 = 0 -> gamma1 = 1
    theta0[2 + data.c] = LOG_GAMMA2_START;

    let (theta, fitted_obj, converged) = bfgs(
        |theta| {
            let mut local = Vec::with_capacity(data.k);
            data.objective_theta(cfg.loss_kind, theta, &mut local)
        },
        theta0,
        cfg.max_iterations,
        cfg.tolerance,
    );

    let fitted = MbmParameters {
        alpha: theta[0],
        beta: theta[1..1 + data.c].to_vec(),
        gamma1: theta[1 + data.c].exp(),
        gamma2: theta[2 + data.c].exp(),
    };

    // Keep the identity configuration unless the fit genuinely improved on
    // it and converged; this pins fitted CRPS <= identity CRPS exactly.
    if !converged || fitted_obj > identity_crps {
        let fitted_crps = identity_crps;
        return (
            identity,
            CellFit {
                identity_crps,
                fitted_crps,
                converged,
                flagged_degenerate: false,
            },
        );
    }
    (
        fitted,
        CellFit {
            identity_crps,
            fitted_crps: fitted_obj,
            converged: true,
            flagged_degenerate: false,
        },
    )
}

/// Fit every cell of the dataset independently (fanning out over threads;
/// results are identical regardless of scheduling).
pub fn fit_mbm(ds: &ForecastDataset, cfg: &MbmFitConfig) -> Result<(MbmGrid, FitDiagnostics)> {
    if ds.samples() < 2 {
        return Err(Error::InvalidArgument(format!(
            "MBM fit needs at least two training samples, got {}",
            ds.samples()
        )));
    }
    if cfg.max_iterations == 0 || !(cfg.tolerance > 0.0) {
        return Err(Error::InvalidArgument(
            "MBM fit needs a positive iteration budget and tolerance".into(),
        ));
    }
    reject_constant_predictors(ds)?;

    let (h, w) = ds.grid();
    let t = ds.lead_times();
    let c = ds.channels();
    let cell_count = h * w * t;

    let results: Vec<(MbmParameters, CellFit)> = (0..cell_count)
        .into_par_iter()
        .map(|idx| {
            let lead = idx % t;
            let lon = (idx / t) % w;
            let lat = idx / (t * w);
            let data = CellData::gather(ds, lat, lon, lead);
            fit_cell(&data, cfg, ds.target_index)
        })
        .collect();

    let mut cells = Vec::with_capacity(cell_count);
    let mut converged = Vec::with_capacity(cell_count);
    let mut per_cell = Vec::with_capacity(cell_count);
    for (params, fit) in results {
        converged.push(fit.converged);
        per_cell.push(fit);
        cells.push(params);
    }
    let converged_cells = per_cell.iter().filter(|f| f.converged).count();
    let flagged_cells = per_cell.iter().filter(|f| f.flagged_degenerate).count();
    let mean_identity_crps =
        per_cell.iter().map(|f| f.identity_crps).sum::<f64>() / cell_count as f64;
    let mean_fitted_crps = per_cell.iter().map(|f| f.fitted_crps).sum::<f64>() / cell_count as f64;

    Ok((
        MbmGrid::new(h, w, t, c, cells, converged)?,
        FitDiagnostics {
            cells: cell_count,
            converged_cells,
            flagged_cells,
            mean_identity_crps,
            mean_fitted_crps,
            per_cell,
        },
    ))
}

/// Static fields make the regression singular; reject them up front.
fn reject_constant_predictors(ds: &ForecastDataset) -> Result<()> {
    let c = ds.channels();
    let data = ds.forecasts.data();
    let per_channel = data.len() / c;
    let mut mean = vec![0.0f64; c];
    for (i, &v) in data.iter().enumerate() {
        mean[i % c] += v as f64;
    }
    for m in mean.iter_mut() {
        *m /= per_channel as f64;
    }
    let mut var = vec![0.0f64; c];
    for (i, &v) in data.iter().enumerate() {
        let d = v as f64 - mean[i % c];
        var[i % c] += d * d;
    }
    for (ch, v) in var.iter().enumerate() {
        if v / (per_channel as f64) < 1e-12 {
            return Err(Error::DegenerateEnsemble(format!(
                "predictor '{}' is constant; static fields cannot enter the regression",
                ds.predictor_names[ch]
            )));
        }
    }
    Ok(())
}

fn numerical_gradient(obj: &impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let up = obj(&probe);
        probe[i] = x[i] - h;
        let down = obj(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// BFGS with Armijo backtracking. Returns (argmin, value, converged).
fn bfgs(
    obj: impl Fn(&[f64]) -> f64,
    x0: Vec<f64>,
    max_iterations: usize,
    tolerance: f64,
) -> (Vec<f64>, f64, bool) {
    let n = x0.len();
    let mut x = x0;
    let mut f = obj(&x);
    let mut grad = numerical_gradient(&obj, &x);
    let mut h_inv = eye(n);
    let mut small_steps = 0usize;

    for iteration in 0..max_iterations {
        let gnorm = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if gnorm < tolerance * f.abs().max(1.0) {
            return (x, f, true);
        }

        let mut dir = matvec_neg(&h_inv, &grad);
        let mut slope = dot(&dir, &grad);
        if slope >= 0.0 {
            h_inv = eye(n);
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
        }

        let mut step = 1.0f64;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let fnew = obj(&xn);
            if fnew.is_finite() && fnew <= f + 1e-4 * step * slope {
                accepted = Some((xn, fnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            // No decrease along a descent direction: at numerical floor.
            return (x, f, iteration > 0);
        };

        let gnew = numerical_gradient(&obj, &xn);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gnew.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 {
            bfgs_update(&mut h_inv, &s, &yv, sy);
        }

        let rel_decrease = (f - fnew) / f.abs().max(1.0);
        x = xn;
        f = fnew;
        grad = gnew;
        if rel_decrease < tolerance {
            small_steps += 1;
            if small_steps >= 2 {
                return (x, f, true);
            }
        } else {
            small_steps = 0;
        }
    }
    let gnorm = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    (x, f, gnorm < tolerance * f.abs().max(1.0))
}

fn eye(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec_neg(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| -dot(&m[i * n..(i + 1) * n], v)).collect()
}

/// H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T with rho = 1/(y^T s).
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                + rho * rho * yhy * s[i] * s[j]
                + rho * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ForecastDataset, SyntheticConfig};
    use crate::seeds;
    use crate::tensor::Tensor;
    use crate::VariableKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bfgs_minimizes_rosenbrock() {
        let rosenbrock = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let (x, f, converged) = bfgs(rosenbrock, vec![-1.2, 1.0], 500, 1e-8);
        assert!(converged, "not converged: f={f}, x={x:?}");
        assert!(
            (x[0] - 1.0).abs() < 1e-3 && (x[1] - 1.0).abs() < 1e-3,
            "{x:?}"
        );
    }

    /// One-cell dataset whose observations follow a known MBM model.
    fn known_model_dataset(
        samples: usize,
        alpha_star: f64,
        beta_star: f64,
        gamma1_star: f64,
        gamma2_star: f64,
        seed: u64,
    ) -> ForecastDataset {
        let k = 11;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut forecasts = Vec::with_capacity(samples * k);
        let mut obs = Vec::with_capacity(samples);
        for _ in 0..samples {
            let center: f64 = rng.random_range(-2.0..2.0);
            let sigma: f64 = rng.random_range(0.5..1.5);
            let members: Vec<f64> = (0..k)
                .map(|_| center + sigma * seeds::standard_normal(&mut rng))
                .collect();
            let mean = members.iter().sum::<f64>() / k as f64;
            let var = members.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
            let tau2 = gamma1_star * gamma1_star + gamma2_star * gamma2_star / var;
            let y = alpha_star
                + beta_star * mean
                + (tau2 * var).sqrt() * seeds::standard_normal(&mut rng);
            forecasts.extend(members.iter().map(|&v| v as f32));
            obs.push(y as f32);
        }
        ForecastDataset::new(
            Tensor::new(vec![samples, k, 1, 1, 1, 1], forecasts).unwrap(),
            Tensor::new(vec![samples, 1, 1, 1], obs).unwrap(),
            vec!["t2m".into()],
            0,
            (0..samples as i64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn recovers_known_regression_parameters() {
        let ds = known_model_dataset(2000, 2.0, 1.0, 1.0, 0.0, 42);
        let (grid, diag) = fit_mbm(&ds, &MbmFitConfig::default()).unwrap();
        let cell = grid.cell(0, 0, 0);
        assert!(diag.per_cell[0].converged);
        assert!((cell.alpha - 2.0).abs() < 0.1, "alpha {}", cell.alpha);
        assert!((cell.beta[0] - 1.0).abs() < 0.1, "beta {}", cell.beta[0]);
    }

    #[test]
    fn calibrated_data_fits_near_identity() {
        // Observation exchangeable with the members: nothing to correct.
        let ds = known_model_dataset(2000, 0.0, 1.0, 1.0, 0.0, 43);
        let (grid, _) = fit_mbm(&ds, &MbmFitConfig::default()).unwrap();
        let cell = grid.cell(0, 0, 0);
        assert!(cell.alpha.abs() < 0.05, "alpha {}", cell.alpha);
        assert!((cell.beta[0] - 1.0).abs() < 0.05, "beta {}", cell.beta[0]);
    }

    #[test]
    fn constant_target_is_rejected_as_static_field() {
        let samples = 8;
        let k = 3;
        // Constant ensembles: zero variance.
        let forecasts = vec![1.0f32; samples * k];
        let obs: Vec<f32> = (0..samples).map(|i| i as f32 * 0.1).collect();
        let ds = ForecastDataset::new(
            Tensor::new(vec![samples, k, 1, 1, 1, 1], forecasts).unwrap(),
            Tensor::new(vec![samples, 1, 1, 1], obs).unwrap(),
            vec!["t2m".into()],
            0,
            (0..samples as i64).collect(),
        )
        .unwrap();
        // A globally constant target trips the static-field check before
        // any cell is fitted.
        let err = fit_mbm(&ds, &MbmFitConfig::default()).unwrap_err();
        assert!(err.to_string().contains("constant"), "{err}");
    }

    #[test]
    fn degenerate_ensemble_with_varying_climatology_is_flagged() {
        // Members identical within each sample but varying across samples:
        // passes the static-field check, still degenerate per cell.
        let samples = 10;
        let k = 3;
        let mut forecasts = Vec::new();
        for s in 0..samples {
            for _m in 0..k {
                forecasts.push(s as f32 * 0.5);
            }
        }
        let obs: Vec<f32> = (0..samples).map(|i| i as f32 * 0.4).collect();
        let ds = ForecastDataset::new(
            Tensor::new(vec![samples, k, 1, 1, 1, 1], forecasts).unwrap(),
            Tensor::new(vec![samples, 1, 1, 1], obs).unwrap(),
            vec!["t2m".into()],
            0,
            (0..samples as i64).collect(),
        )
        .unwrap();
        let (grid, diag) = fit_mbm(&ds, &MbmFitConfig::default()).unwrap();
        assert_eq!(diag.flagged_cells, 1);
        assert!(!diag.per_cell[0].converged);
        assert_eq!(grid.cell(0, 0, 0), &MbmParameters::identity(1, 0));
    }

    fn synthetic(seed: u64) -> ForecastDataset {
        generate_synthetic(&SyntheticConfig {
            samples: 60,
            k: 8,
            t: 2,
            h: 3,
            w: 3,
            c: 2,
            bias_amplitude: 0.8,
            underdispersion_factor: 0.5,
            lead_error_growth: 0.4,
            terrain_roughness: 1.0,
            variable_kind: VariableKind::GaussianTarget,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn fitted_crps_never_exceeds_identity() {
        let ds = synthetic(7);
        let (_, diag) = fit_mbm(&ds, &MbmFitConfig::default()).unwrap();
        for (i, cell) in diag.per_cell.iter().enumerate() {
            assert!(
                cell.fitted_crps <= cell.identity_crps + 1e-12,
                "cell {i}: fitted {} > identity {}",
                cell.fitted_crps,
                cell.identity_crps
            );
        }
        // Biased, underdispersed data leaves plenty to correct.
        assert!(diag.mean_fitted_crps < 0.9 * diag.mean_identity_crps);
    }

    #[test]
    fn fit_is_order_independent() {
        let ds = synthetic(8);
        let cfg = MbmFitConfig::default();
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool2 = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .unwrap();
        let (grid1, _) = pool1.install(|| fit_mbm(&ds, &cfg)).unwrap();
        let (grid2, _) = pool2.install(|| fit_mbm(&ds, &cfg)).unwrap();
        assert_eq!(grid1, grid2);
    }

    #[test]
    fn abs_variant_improves_fair_crps_on_wind_like_data() {
        let mut cfg = SyntheticConfig {
            samples: 50,
            k: 8,
            t: 2,
            h: 2,
            w: 2,
            c: 1,
            bias_amplitude: 0.8,
            underdispersion_factor: 0.5,
            lead_error_growth: 0.4,
            terrain_roughness: 1.0,
            variable_kind: VariableKind::NonnegativeTarget,
            seed: 9,
        };
        cfg.variable_kind = VariableKind::NonnegativeTarget;
        let ds = generate_synthetic(&cfg).unwrap();
        let fit_cfg = MbmFitConfig {
            loss_kind: MbmLossKind::AbsCrpsNonnegative,
            ..MbmFitConfig::default()
        };
        let (_, diag) = fit_mbm(&ds, &fit_cfg).unwrap();
        assert!(diag.mean_fitted_crps < diag.mean_identity_crps);
        assert!(diag.converged_cells > diag.cells / 2);
    }
}
