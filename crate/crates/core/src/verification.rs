//! Forecast verification: bias, RMSE, Fortin spread, spread-error ratio,
//! rank histograms, and aggregation into per-lead-time / per-gridpoint /
//! overall reports.
//!
//! CRPS follows the distributional convention of the training side: a
//! normal fit (ensemble mean and unbiased standard deviation) for
//! Gaussian-type targets, the fair ensemble CRPS for non-negative targets.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scoring::{crps_fair, crps_gaussian};
use crate::tensor::Tensor;
use crate::VariableKind;

/// Mean of (ensemble mean - observation).
pub fn bias(forecast_means: &[f64], observations: &[f64]) -> Result<f64> {
    check_paired(forecast_means, observations)?;
    Ok(forecast_means
        .iter()
        .zip(observations)
        .map(|(m, y)| m - y)
        .sum::<f64>()
        / forecast_means.len() as f64)
}

/// Root-mean-squared error of the ensemble mean.
pub fn rmse(forecast_means: &[f64], observations: &[f64]) -> Result<f64> {
    check_paired(forecast_means, observations)?;
    Ok((forecast_means
        .iter()
        .zip(observations)
        .map(|(m, y)| (m - y) * (m - y))
        .sum::<f64>()
        / forecast_means.len() as f64)
        .sqrt())
}

fn check_paired(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty verification input".into()));
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} forecasts vs {} observations",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Fortin spread: square root of the mean per-case unbiased ensemble
/// variance (not the mean of standard deviations).
pub fn spread_fortin<'a>(cases: impl IntoIterator<Item = &'a [f64]>) -> Result<f64> {
    let mut var_sum = 0.0f64;
    let mut count = 0usize;
    for members in cases {
        let k = members.len();
        if k < 2 {
            return Err(Error::DegenerateEnsemble(format!(
                "spread needs at least two members, got {k}"
            )));
        }
        let mean = members.iter().sum::<f64>() / k as f64;
        var_sum += members.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1) as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("empty verification input".into()));
    }
    Ok((var_sum / count as f64).sqrt())
}

/// Spread-error ratio: Fortin spread divided by the RMSE of the ensemble
/// mean. One indicates a calibrated ensemble.
pub fn ser<'a>(cases: impl IntoIterator<Item = &'a [f64]>, observations: &[f64]) -> Result<f64> {
    let cases: Vec<&[f64]> = cases.into_iter().collect();
    let means: Vec<f64> = cases
        .iter()
        .map(|m| m.iter().sum::<f64>() / m.len() as f64)
        .collect();
    let spread = spread_fortin(cases.iter().copied())?;
    let err = rmse(&means, observations)?;
    if err == 0.0 {
        return Err(Error::InvalidArgument(
            "spread-error ratio undefined for zero RMSE".into(),
        ));
    }
    Ok(spread / err)
}

/// Rank histogram over `k + 1` bins. The rank of each observation is the
/// number of members strictly below it; ties are broken by seeded uniform
/// placement among the tied positions.
pub fn rank_histogram<'a>(
    cases: impl IntoIterator<Item = (&'a [f64], f64)>,
    members: usize,
    seed: u64,
) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; members + 1];
    for (ensemble, y) in cases {
        debug_assert_eq!(ensemble.len(), members);
        let below = ensemble.iter().filter(|&&x| x < y).count();
        let ties = ensemble.iter().filter(|&&x| x == y).count();
        let rank = below + rng.random_range(0..=ties);
        counts[rank] += 1;
    }
    counts
}

/// Scores of one aggregation slice.
#[derive(Clone, Copy, Debug, Default)]
pub struct Scores {
    pub crps: f64,
    pub bias: f64,
    pub rmse: f64,
    pub spread: f64,
    pub ser: f64,
}

/// Full verification result for one method.
///
/// `per_lead` holds one entry per lead time; the gridpoint maps average
/// over samples and leads. `overall` CRPS/bias/RMSE/spread are the equal-
/// weight means of the per-lead values, and the overall SER is the overall
/// spread divided by the overall RMSE so that `ser == spread / rmse` holds
/// at every aggregation level.
#[derive(Clone, Debug)]
pub struct VerificationReport {
    pub variable: String,
    pub method: String,
    pub samples: usize,
    pub members: usize,
    pub lead_times: usize,
    pub grid: (usize, usize),
    pub per_lead: Vec<Scores>,
    pub gridpoint_crps: Vec<f64>,
    pub gridpoint_bias: Vec<f64>,
    pub rank_histogram: Vec<u64>,
    pub overall: Scores,
}

/// Verify a corrected (or raw) ensemble against observations.
///
/// `ensembles` is `[samples, k, t, h, w]`, `observations` `[samples, t, h, w]`.
/// The `seed` feeds rank-histogram tie breaking only.
pub fn verify(
    ensembles: &Tensor<f32>,
    observations: &Tensor<f32>,
    variable_kind: VariableKind,
    variable: &str,
    method: &str,
    seed: u64,
) -> Result<VerificationReport> {
    if ensembles.rank() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "ensembles must be [samples,k,t,h,w], got {:?}",
            ensembles.shape()
        )));
    }
    let (n, k, t, h, w) = (
        ensembles.shape()[0],
        ensembles.shape()[1],
        ensembles.shape()[2],
        ensembles.shape()[3],
        ensembles.shape()[4],
    );
    if observations.shape() != [n, t, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "observations {:?} do not match ensembles {:?}",
            observations.shape(),
            ensembles.shape()
        )));
    }
    if k < 2 {
        return Err(Error::DegenerateEnsemble(
            "verification needs at least two members".into(),
        ));
    }

    let ens = ensembles.data();
    let obs = observations.data();
    let cells_per_lead = n * h * w;
    let gridpoints = h * w;

    struct Acc {
        crps: f64,
        err: f64,
        var: f64,
        bias: f64,
    }
    let mut per_lead: Vec<Acc> = (0..t)
        .map(|_| Acc {
            crps: 0.0,
            err: 0.0,
            var: 0.0,
            bias: 0.0,
        })
        .collect();
    let mut grid_crps = vec![0.0f64; gridpoints];
    let mut grid_bias = vec![0.0f64; gridpoints];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hist = vec![0u64; k + 1];
    let mut members = vec![0.0f64; k];

    for s in 0..n {
        for lead in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for (m, slot) in members.iter_mut().enumerate() {
                        let idx = ((((s * k + m) * t + lead) * h + y) * w) + x;
                        *slot = ens[idx] as f64;
                    }
                    let ob = obs[(((s * t + lead) * h + y) * w) + x] as f64;

                    let mean = members.iter().sum::<f64>() / k as f64;
                    let var = members.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / (k - 1) as f64;
                    let crps = match variable_kind {
                        VariableKind::GaussianTarget => {
                            crps_gaussian(mean, var.sqrt().max(1e-12), ob)?
                        }
                        VariableKind::NonnegativeTarget => crps_fair(&members, ob)?,
                    };

                    let acc = &mut per_lead[lead];
                    acc.crps += crps;
                    acc.err += (mean - ob) * (mean - ob);
                    acc.var += var;
                    acc.bias += mean - ob;
                    grid_crps[y * w + x] += crps;
                    grid_bias[y * w + x] += mean - ob;

                    let below = members.iter().filter(|&&v| v < ob).count();
                    let ties = members.iter().filter(|&&v| v == ob).count();
                    hist[below + rng.random_range(0..=ties)] += 1;
                }
            }
        }
    }

    let per_lead: Vec<Scores> = per_lead
        .iter()
        .map(|acc| {
            let rmse = (acc.err / cells_per_lead as f64).sqrt();
            let spread = (acc.var / cells_per_lead as f64).sqrt();
            Scores {
                crps: acc.crps / cells_per_lead as f64,
                bias: acc.bias / cells_per_lead as f64,
                rmse,
                spread,
                ser: if rmse > 0.0 { spread / rmse } else { f64::NAN },
            }
        })
        .collect();

    for v in grid_crps.iter_mut().chain(grid_bias.iter_mut()) {
        *v /= (n * t) as f64;
    }

    let mean_over = |f: fn(&Scores) -> f64| -> f64 {
        per_lead.iter().map(f).sum::<f64>() / per_lead.len() as f64
    };
    let overall_rmse = mean_over(|s| s.rmse);
    let overall_spread = mean_over(|s| s.spread);
    let overall = Scores {
        crps: mean_over(|s| s.crps),
        bias: mean_over(|s| s.bias),
        rmse: overall_rmse,
        spread: overall_spread,
        ser: if overall_rmse > 0.0 {
            overall_spread / overall_rmse
        } else {
            f64::NAN
        },
    };

    Ok(VerificationReport {
        variable: variable.to_string(),
        method: method.to_string(),
        samples: n,
        members: k,
        lead_times: t,
        grid: (h, w),
        per_lead,
        gridpoint_crps: grid_crps,
        gridpoint_bias: grid_bias,
        rank_histogram: hist,
        overall,
    })
}

impl VerificationReport {
    /// Write `<label>_per_lead.csv`, `<label>_per_gridpoint.csv` and
    /// `<label>_rank_hist.csv` into `dir`.
    pub fn write_csv_tables(&self, dir: impl AsRef<Path>, label: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;

        let mut f = std::fs::File::create(dir.join(format!("{label}_per_lead.csv")))?;
        writeln!(f, "lead_idx,crps,bias,rmse,spread,ser")?;
        for (lead, s) in self.per_lead.iter().enumerate() {
            writeln!(
                f,
                "{lead},{},{},{},{},{}",
                s.crps, s.bias, s.rmse, s.spread, s.ser
            )?;
        }

        let mut f = std::fs::File::create(dir.join(format!("{label}_per_gridpoint.csv")))?;
        writeln!(f, "lat_idx,lon_idx,crps,bias")?;
        let (h, w) = self.grid;
        for y in 0..h {
            for x in 0..w {
                writeln!(
                    f,
                    "{y},{x},{},{}",
                    self.gridpoint_crps[y * w + x],
                    self.gridpoint_bias[y * w + x]
                )?;
            }
        }

        let mut f = std::fs::File::create(dir.join(format!("{label}_rank_hist.csv")))?;
        writeln!(f, "rank,count")?;
        for (rank, count) in self.rank_histogram.iter().enumerate() {
            writeln!(f, "{rank},{count}")?;
        }
        Ok(())
    }

    /// Single JSON object with the overall scores of this method.
    pub fn summary_json(&self) -> String {
        format!(
            "{{\"method\": \"{}\", \"crps\": {}, \"bias\": {}, \"rmse\": {}, \"spread\": {}, \"ser\": {}, \"samples\": {}, \"members\": {}, \"lead_times\": {}}}",
            self.method,
            self.overall.crps,
            self.overall.bias,
            self.overall.rmse,
            self.overall.spread,
            self.overall.ser,
            self.samples,
            self.members,
            self.lead_times
        )
    }
}

/// Combined structured summary for several methods over the same data.
pub fn write_summary(reports: &[&VerificationReport], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(dir.join("summary.json"))?;
    let variable = reports.first().map(|r| r.variable.as_str()).unwrap_or("");
    writeln!(f, "{{")?;
    writeln!(f, "  \"variable\": \"{variable}\",")?;
    writeln!(f, "  \"methods\": [")?;
    for (i, report) in reports.iter().enumerate() {
        let sep = if i + 1 == reports.len() { "" } else { "," };
        writeln!(f, "    {}{sep}", report.summary_json())?;
    }
    writeln!(f, "  ]")?;
    writeln!(f, "}}")?;

    // Method x {CRPS, SER} comparison table.
    let mut f = std::fs::File::create(dir.join("comparison.csv"))?;
    writeln!(f, "method,crps,ser")?;
    for report in reports {
        writeln!(
            f,
            "{},{},{}",
            report.method, report.overall.crps, report.overall.ser
        )?;
    }
    Ok(())
}
