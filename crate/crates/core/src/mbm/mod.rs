//! Classical member-by-member postprocessing.
//!
//! Each ensemble member is corrected as
//! `Z_C^m = alpha + sum_i beta_i * Vbar_i + tau * (V^m - Vbar)` with
//! `tau^2 = gamma1^2 + gamma2^2 / sigma_eps^2`, so the corrected ensemble
//! keeps its size, gets a linear bias correction from the predictor means,
//! and has its spread nudged both multiplicatively (gamma1) and additively
//! (gamma2). All parameters are estimated independently per gridpoint and
//! lead time.

mod fit;

pub use fit::{fit_mbm, CellFit, FitDiagnostics, MbmFitConfig, MbmLossKind};

use std::io::Write;
use std::path::Path;

use crate::data::ForecastDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ensemble variances below this floor are degenerate: the additive spread
/// term divides by the variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Regression parameters of one (gridpoint, lead time) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct MbmParameters {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl MbmParameters {
    /// The configuration that reproduces the raw ensemble: no bias shift,
    /// beta one-hot on the target predictor, spread untouched.
    pub fn identity(channels: usize, target_index: usize) -> Self {
        let mut beta = vec![0.0; channels];
        beta[target_index] = 1.0;
        Self {
            alpha: 0.0,
            beta,
            gamma1: 1.0,
            gamma2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "spread parameters must be non-negative, got gamma1={} gamma2={}",
                self.gamma1, self.gamma2
            )));
        }
        Ok(())
    }
}

/// `tau = sqrt(gamma1^2 + gamma2^2 / sigma_eps^2)`.
pub fn compute_tau(gamma1: f64, gamma2: f64, sigma_eps2: f64) -> Result<f64> {
    if gamma1 < 0.0 || gamma2 < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "spread parameters must be non-negative, got gamma1={gamma1} gamma2={gamma2}"
        )));
    }
    if sigma_eps2 < VARIANCE_FLOOR {
        return Err(Error::DegenerateEnsemble(format!(
            "ensemble variance {sigma_eps2:.3e} below floor {VARIANCE_FLOOR:.0e}"
        )));
    }
    Ok((gamma1 * gamma1 + gamma2 * gamma2 / sigma_eps2).sqrt())
}

/// Correct one cell's ensemble. `members_by_channel` is row-major `[k, c]`;
/// the corrected values are returned per member. With `clamp_nonnegative`
/// the corrected members are floored at zero.
pub fn mbm_correct(
    members_by_channel: &[f64],
    channels: usize,
    target_index: usize,
    params: &MbmParameters,
    clamp_nonnegative: bool,
) -> Result<Vec<f64>> {
    params.validate()?;
    if channels == 0 || !members_by_channel.len().is_multiple_of(channels) {
        return Err(Error::ShapeMismatch(format!(
            "{} values do not form [k, {channels}] rows",
            members_by_channel.len()
        )));
    }
    let k = members_by_channel.len() / channels;
    if k < 2 {
        return Err(Error::DegenerateEnsemble(format!(
            "member-by-member correction needs at least two members, got {k}"
        )));
    }
    if params.beta.len() != channels {
        return Err(Error::ShapeMismatch(format!(
            "{} beta coefficients for {channels} predictors",
            params.beta.len()
        )));
    }
    if target_index >= channels {
        return Err(Error::InvalidArgument(format!(
            "target index {target_index} out of range for {channels} predictors"
        )));
    }

    let mut channel_means = vec![0.0f64; channels];
    for row in members_by_channel.chunks_exact(channels) {
        for (mean, &v) in channel_means.iter_mut().zip(row) {
            *mean += v;
        }
    }
    for mean in channel_means.iter_mut() {
        *mean /= k as f64;
    }
    let target_mean = channel_means[target_index];
    let sigma_eps2 = members_by_channel
        .chunks_exact(channels)
        .map(|row| {
            let d = row[target_index] - target_mean;
            d * d
        })
        .sum::<f64>()
        / (k - 1) as f64;
    let tau = compute_tau(params.gamma1, params.gamma2, sigma_eps2)?;

    let shift = params.alpha
        + params
            .beta
            .iter()
            .zip(&channel_means)
            .map(|(b, m)| b * m)
            .sum::<f64>();
    Ok(members_by_channel
        .chunks_exact(channels)
        .map(|row| {
            let corrected = shift + tau * (row[target_index] - target_mean);
            if clamp_nonnegative {
                corrected.max(0.0)
            } else {
                corrected
            }
        })
        .collect())
}

/// Fitted parameters for every (gridpoint, lead time) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct MbmGrid {
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub c: usize,
    cells: Vec<MbmParameters>,
    converged: Vec<bool>,
}

impl MbmGrid {
    pub fn new(
        h: usize,
        w: usize,
        t: usize,
        c: usize,
        cells: Vec<MbmParameters>,
        converged: Vec<bool>,
    ) -> Result<Self> {
        if cells.len() != h * w * t || converged.len() != cells.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} cells for a {h}x{w}x{t} grid",
                cells.len()
            )));
        }
        for cell in &cells {
            cell.validate()?;
            if cell.beta.len() != c {
                return Err(Error::ShapeMismatch(format!(
                    "cell has {} beta coefficients, expected {c}",
                    cell.beta.len()
                )));
            }
        }
        Ok(Self {
            h,
            w,
            t,
            c,
            cells,
            converged,
        })
    }

    pub fn index(&self, lat: usize, lon: usize, lead: usize) -> usize {
        (lat * self.w + lon) * self.t + lead
    }

    pub fn cell(&self, lat: usize, lon: usize, lead: usize) -> &MbmParameters {
        &self.cells[self.index(lat, lon, lead)]
    }

    pub fn converged(&self, lat: usize, lon: usize, lead: usize) -> bool {
        self.converged[self.index(lat, lon, lead)]
    }

    pub fn cells(&self) -> &[MbmParameters] {
        &self.cells
    }

    pub fn converged_flags(&self) -> &[bool] {
        &self.converged
    }
}

/// Apply a fitted grid to a dataset; returns the corrected target ensemble
/// `[n, k, t, h, w]`.
pub fn apply_mbm(
    ds: &ForecastDataset,
    grid: &MbmGrid,
    clamp_nonnegative: bool,
) -> Result<Tensor<f32>> {
    let (h, w) = ds.grid();
    if grid.h != h || grid.w != w || grid.t != ds.lead_times() || grid.c != ds.channels() {
        return Err(Error::ShapeMismatch(format!(
            "parameter grid {}x{}x{} ({} predictors) does not match dataset {h}x{w}x{} ({} predictors)",
            grid.h,
            grid.w,
            grid.t,
            grid.c,
            ds.lead_times(),
            ds.channels()
        )));
    }
    let (n, k, t, c) = (ds.samples(), ds.members(), ds.lead_times(), ds.channels());
    let src = ds.forecasts.data();
    let mut out = vec![0.0f32; n * k * t * h * w];
    let mut cell = vec![0.0f64; k * c];
    for s in 0..n {
        for lead in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for m in 0..k {
                        let base = ((((s * k + m) * t + lead) * h + y) * w + x) * c;
                        cell[m * c..(m + 1) * c]
                            .iter_mut()
                            .zip(&src[base..base + c])
                            .for_each(|(dst, &v)| *dst = v as f64);
                    }
                    let corrected = mbm_correct(
                        &cell,
                        c,
                        ds.target_index,
                        grid.cell(y, x, lead),
                        clamp_nonnegative,
                    )?;
                    for (m, &v) in corrected.iter().enumerate() {
                        out[(((s * k + m) * t + lead) * h + y) * w + x] = v as f32;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, k, t, h, w], out)
}

/// Write the parameter grid as CSV with header
/// `lat_idx,lon_idx,lead_idx,alpha,beta_0..beta_{c-1},gamma1,gamma2,converged`.
pub fn save_mbm_csv(grid: &MbmGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "lat_idx,lon_idx,lead_idx,alpha")?;
    for i in 0..grid.c {
        write!(f, ",beta_{i}")?;
    }
    writeln!(f, ",gamma1,gamma2,converged")?;
    for lat in 0..grid.h {
        for lon in 0..grid.w {
            for lead in 0..grid.t {
                let cell = grid.cell(lat, lon, lead);
                write!(f, "{lat},{lon},{lead},{}", cell.alpha)?;
                for b in &cell.beta {
                    write!(f, ",{b}")?;
                }
                writeln!(
                    f,
                    ",{},{},{}",
                    cell.gamma1,
                    cell.gamma2,
                    grid.converged(lat, lon, lead)
                )?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

/// Read a parameter grid written by [`save_mbm_csv`].
pub fn load_mbm_csv(path: impl AsRef<Path>) -> Result<MbmGrid> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty MBM parameter file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 7
        || cols[..4] != ["lat_idx", "lon_idx", "lead_idx", "alpha"]
        || cols[cols.len() - 3..] != ["gamma1", "gamma2", "converged"]
    {
        return Err(Error::Format(format!(
            "unexpected MBM parameter header '{header}'"
        )));
    }
    let c = cols.len() - 7;
    let mut rows: Vec<(usize, usize, usize, MbmParameters, bool)> = Vec::new();
    let mut max = (0usize, 0usize, 0usize);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Format(format!(
                "line {}: {} fields, expected {}",
                lineno + 2,
                fields.len(),
                cols.len()
            )));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("line {}: bad index '{s}'", lineno + 2)))
        };
        let parse_f64 = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("line {}: bad number '{s}'", lineno + 2)))
        };
        let lat = parse_usize(fields[0])?;
        let lon = parse_usize(fields[1])?;
        let lead = parse_usize(fields[2])?;
        let alpha = parse_f64(fields[3])?;
        let beta = fields[4..4 + c]
            .iter()
            .map(|s| parse_f64(s))
            .collect::<Result<Vec<f64>>>()?;
        let gamma1 = parse_f64(fields[4 + c])?;
        let gamma2 = parse_f64(fields[5 + c])?;
        let converged = match fields[6 + c] {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::Format(format!(
                    "line {}: bad converged flag '{other}'",
                    lineno + 2
                )))
            }
        };
        max = (max.0.max(lat + 1), max.1.max(lon + 1), max.2.max(lead + 1));
        rows.push((
            lat,
            lon,
            lead,
            MbmParameters {
                alpha,
                beta,
                gamma1,
                gamma2,
            },
            converged,
        ));
    }
    let (h, w, t) = max;
    if rows.len() != h * w * t {
        return Err(Error::Format(format!(
            "{} parameter rows do not fill a {h}x{w}x{t} grid",
            rows.len()
        )));
    }
    let mut cells = vec![MbmParameters::identity(c.max(1), 0); h * w * t];
    let mut converged = vec![false; h * w * t];
    for (lat, lon, lead, params, conv) in rows {
        let idx = (lat * w + lon) * t + lead;
        cells[idx] = params;
        converged[idx] = conv;
    }
    MbmGrid::new(h, w, t, c, cells, converged)
}
