//! Dataset container, chronological splitting, predictor normalization and
//! the EPPG binary file format, plus a synthetic generator that makes the
//! whole pipeline runnable without external data.

mod eppg;
mod synthetic;

pub use eppg::{load_eppg, save_eppg};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rank-6 forecast array `[samples, members, lead_times, lat, lon, channels]`.
pub type EnsembleTensor = Tensor<f32>;

/// Paired ensemble forecasts and scalar observations.
///
/// Forecasts are `[n, k, t, h, w, c]`, observations `[n, t, h, w]`. Samples
/// are ordered by the strictly increasing `time_index`. Immutable after
/// construction; safe to share across threads.
#[derive(Clone, Debug)]
pub struct ForecastDataset {
    pub forecasts: EnsembleTensor,
    pub observations: Tensor<f32>,
    pub predictor_names: Vec<String>,
    pub target_index: usize,
    pub time_index: Vec<i64>,
}

impl ForecastDataset {
    pub fn new(
        forecasts: EnsembleTensor,
        observations: Tensor<f32>,
        predictor_names: Vec<String>,
        target_index: usize,
        time_index: Vec<i64>,
    ) -> Result<Self> {
        if forecasts.rank() != 6 {
            return Err(Error::ShapeMismatch(format!(
                "forecasts must be rank 6, got {:?}",
                forecasts.shape()
            )));
        }
        let [n, _k, t, h, w, c] = dims6(&forecasts);
        if observations.shape() != [n, t, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "observations {:?} do not match forecasts {:?}",
                observations.shape(),
                forecasts.shape()
            )));
        }
        if predictor_names.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "{} predictor names for {} channels",
                predictor_names.len(),
                c
            )));
        }
        if target_index >= c {
            return Err(Error::InvalidArgument(format!(
                "target index {target_index} out of range for {c} predictors"
            )));
        }
        if time_index.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} time indices for {} samples",
                time_index.len(),
                n
            )));
        }
        if time_index.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "time index must be strictly increasing".into(),
            ));
        }
        if !forecasts.all_finite() || !observations.all_finite() {
            return Err(Error::NonFinite(
                "dataset contains NaN or infinite values".into(),
            ));
        }
        Ok(Self {
            forecasts,
            observations,
            predictor_names,
            target_index,
            time_index,
        })
    }

    pub fn samples(&self) -> usize {
        self.forecasts.shape()[0]
    }

    pub fn members(&self) -> usize {
        self.forecasts.shape()[1]
    }

    pub fn lead_times(&self) -> usize {
        self.forecasts.shape()[2]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.forecasts.shape()[3], self.forecasts.shape()[4])
    }

    pub fn channels(&self) -> usize {
        self.forecasts.shape()[5]
    }

    /// Contiguous sample range as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let n = self.samples();
        if range.start >= range.end || range.end > n {
            return Err(Error::InvalidArgument(format!(
                "sample range {range:?} invalid for {n} samples"
            )));
        }
        let per_sample_f = self.forecasts.len() / n;
        let per_sample_o = self.observations.len() / n;
        let mut fshape = self.forecasts.shape().to_vec();
        fshape[0] = range.len();
        let mut oshape = self.observations.shape().to_vec();
        oshape[0] = range.len();
        let forecasts = Tensor::new(
            fshape,
            self.forecasts.data()[range.start * per_sample_f..range.end * per_sample_f].to_vec(),
        )?;
        let observations = Tensor::new(
            oshape,
            self.observations.data()[range.start * per_sample_o..range.end * per_sample_o].to_vec(),
        )?;
        Self::new(
            forecasts,
            observations,
            self.predictor_names.clone(),
            self.target_index,
            self.time_index[range].to_vec(),
        )
    }

    /// Arbitrary sample subset (indices must be strictly increasing so the
    /// time index stays ordered).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty sample selection".into()));
        }
        let n = self.samples();
        if indices.windows(2).any(|w| w[1] <= w[0]) || *indices.last().unwrap() >= n {
            return Err(Error::InvalidArgument(format!(
                "sample selection must be strictly increasing and below {n}"
            )));
        }
        let per_sample_f = self.forecasts.len() / n;
        let per_sample_o = self.observations.len() / n;
        let mut fshape = self.forecasts.shape().to_vec();
        fshape[0] = indices.len();
        let mut oshape = self.observations.shape().to_vec();
        oshape[0] = indices.len();
        let mut fdata = Vec::with_capacity(indices.len() * per_sample_f);
        let mut odata = Vec::with_capacity(indices.len() * per_sample_o);
        let mut times = Vec::with_capacity(indices.len());
        for &s in indices {
            fdata.extend_from_slice(
                &self.forecasts.data()[s * per_sample_f..(s + 1) * per_sample_f],
            );
            odata.extend_from_slice(
                &self.observations.data()[s * per_sample_o..(s + 1) * per_sample_o],
            );
            times.push(self.time_index[s]);
        }
        Self::new(
            Tensor::new(fshape, fdata)?,
            Tensor::new(oshape, odata)?,
            self.predictor_names.clone(),
            self.target_index,
            times,
        )
    }

    /// Copy of the target predictor channel as `[n, k, t, h, w]`.
    pub fn target_ensemble(&self) -> Tensor<f32> {
        let [n, k, t, h, w, c] = dims6(&self.forecasts);
        let src = self.forecasts.data();
        let mut data = Vec::with_capacity(n * k * t * h * w);
        let mut base = self.target_index;
        for _ in 0..n * k * t * h * w {
            data.push(src[base]);
            base += c;
        }
        Tensor::new(vec![n, k, t, h, w], data).expect("consistent dims")
    }

    /// Member values of one predictor at a `(sample, lead, lat, lon)` cell.
    pub fn cell_members(
        &self,
        sample: usize,
        lead: usize,
        lat: usize,
        lon: usize,
        channel: usize,
        out: &mut Vec<f64>,
    ) {
        let [_, k, t, h, w, c] = dims6(&self.forecasts);
        out.clear();
        let src = self.forecasts.data();
        for m in 0..k {
            let idx = ((((sample * k + m) * t + lead) * h + lat) * w + lon) * c + channel;
            out.push(src[idx] as f64);
        }
    }
}

pub(crate) fn dims6(t: &Tensor<f32>) -> [usize; 6] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3], s[4], s[5]]
}

/// Split chronologically into train/validation/test; sizes are
/// `floor(n * train_frac)`, `floor(n * val_frac)` and the remainder.
pub fn chronological_split(
    ds: &ForecastDataset,
    train_frac: f64,
    val_frac: f64,
) -> Result<(ForecastDataset, ForecastDataset, ForecastDataset)> {
    if !(train_frac > 0.0) || !(val_frac > 0.0) || train_frac + val_frac >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be positive and sum below 1, got {train_frac} + {val_frac}"
        )));
    }
    let n = ds.samples();
    let n_train = (n as f64 * train_frac).floor() as usize;
    let n_val = (n as f64 * val_frac).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} samples produces an empty part ({n_train}/{n_val}/{})",
            n.saturating_sub(n_train + n_val)
        )));
    }
    Ok((
        ds.slice(0..n_train)?,
        ds.slice(n_train..n_train + n_val)?,
        ds.slice(n_train + n_val..n)?,
    ))
}

/// Per-predictor z-score statistics estimated on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Estimate from a training split; population standard deviation per
    /// channel. A zero-variance predictor is rejected by name.
    pub fn fit(train: &ForecastDataset) -> Result<Self> {
        let c = train.channels();
        let data = train.forecasts.data();
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
        let mut std = vec![0.0f64; c];
        for (ch, v) in var.iter().enumerate() {
            let s = (v / per_channel as f64).sqrt();
            if s < 1e-12 {
                return Err(Error::DegenerateEnsemble(format!(
                    "predictor '{}' has zero variance",
                    train.predictor_names[ch]
                )));
            }
            std[ch] = s;
        }
        Ok(Self { mean, std })
    }

    /// Apply z-scoring to every forecast channel; observations stay in
    /// physical units.
    pub fn apply(&self, ds: &ForecastDataset) -> Result<ForecastDataset> {
        let c = ds.channels();
        if c != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "normalization has {} channels, dataset {}",
                self.mean.len(),
                c
            )));
        }
        let data: Vec<f32> = ds
            .forecasts
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - self.mean[i % c]) / self.std[i % c]) as f32)
            .collect();
        ForecastDataset::new(
            Tensor::new(ds.forecasts.shape().to_vec(), data)?,
            ds.observations.clone(),
            ds.predictor_names.clone(),
            ds.target_index,
            ds.time_index.clone(),
        )
    }

    /// Map a model output in normalized target units back to physical units.
    pub fn denorm_target(&self, target_index: usize, value: f64) -> f64 {
        value * self.std[target_index] + self.mean[target_index]
    }
}

/// Normalize the training split and any other splits with statistics
/// computed on the training split only. The target predictor's statistics
/// stay available in the returned [`NormStats`] so model outputs can be
/// de-normalized back to physical units before scoring.
pub fn normalize_predictors(
    train: &ForecastDataset,
    others: &[&ForecastDataset],
) -> Result<(ForecastDataset, Vec<ForecastDataset>, NormStats)> {
    let stats = NormStats::fit(train)?;
    let train_n = stats.apply(train)?;
    let others_n = others
        .iter()
        .map(|ds| stats.apply(ds))
        .collect::<Result<Vec<_>>>()?;
    Ok((train_n, others_n, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::VariableKind;

    fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            samples: 10,
            k: 3,
            t: 2,
            h: 2,
            w: 2,
            c: 2,
            bias_amplitude: 0.5,
            underdispersion_factor: 1.0,
            lead_error_growth: 0.3,
            terrain_roughness: 1.0,
            variable_kind: VariableKind::GaussianTarget,
            seed: 1,
        }
    }

    #[test]
    fn split_sizes_and_ordering() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let (train, val, test) = chronological_split(&ds, 0.8, 0.1).unwrap();
        assert_eq!(train.samples(), 8);
        assert_eq!(val.samples(), 1);
        assert_eq!(test.samples(), 1);
        assert!(train.time_index.last().unwrap() < val.time_index.first().unwrap());
        assert!(val.time_index.last().unwrap() < test.time_index.first().unwrap());

        let mut merged = train.time_index.clone();
        merged.extend(&val.time_index);
        merged.extend(&test.time_index);
        assert_eq!(merged, ds.time_index);
    }

    #[test]
    fn split_rejects_empty_parts() {
        let ds = generate_synthetic(&small_config()).unwrap();
        assert!(chronological_split(&ds, 0.98, 0.01).is_err());
        assert!(chronological_split(&ds, 0.5, 0.5).is_err());
        assert!(chronological_split(&ds, -0.1, 0.2).is_err());
    }

    #[test]
    fn normalization_round_trip_and_statistics() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let (train, val, _test) = chronological_split(&ds, 0.6, 0.2).unwrap();
        let (train_n, others, stats) = normalize_predictors(&train, &[&val]).unwrap();

        let c = train.channels();
        let data = train_n.forecasts.data();
        let per_channel = data.len() / c;
        for ch in 0..c {
            let mut mean = 0.0f64;
            let mut var = 0.0f64;
            for (i, &v) in data.iter().enumerate() {
                if i % c == ch {
                    mean += v as f64;
                }
            }
            mean /= per_channel as f64;
            for (i, &v) in data.iter().enumerate() {
                if i % c == ch {
                    var += (v as f64 - mean) * (v as f64 - mean);
                }
            }
            let std = (var / per_channel as f64).sqrt();
            assert!(mean.abs() < 1e-6, "channel {ch} mean {mean}");
            assert!((std - 1.0).abs() < 1e-6, "channel {ch} std {std}");
        }

        // Validation statistics differ from (0, 1) in general.
        let vdata = others[0].forecasts.data();
        let vmean: f64 =
            vdata.iter().step_by(c).map(|&v| v as f64).sum::<f64>() / (vdata.len() / c) as f64;
        assert!(vmean.abs() > 1e-4, "validation mean unexpectedly {vmean}");

        // Round trip through de-normalization.
        for (i, &v) in train_n.forecasts.data().iter().take(40).enumerate() {
            let ch = i % c;
            let back = v as f64 * stats.std[ch] + stats.mean[ch];
            let orig = train.forecasts.data()[i] as f64;
            assert!((back - orig).abs() < 1e-4, "{back} vs {orig}");
        }
    }

    #[test]
    fn constant_predictor_is_rejected_by_name() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let mut forecasts = ds.forecasts.clone();
        let c = ds.channels();
        for (i, v) in forecasts.data_mut().iter_mut().enumerate() {
            if i % c == 1 {
                *v = 2.5;
            }
        }
        let ds = ForecastDataset::new(
            forecasts,
            ds.observations.clone(),
            ds.predictor_names.clone(),
            ds.target_index,
            ds.time_index.clone(),
        )
        .unwrap();
        let err = NormStats::fit(&ds).unwrap_err();
        assert!(err.to_string().contains(&ds.predictor_names[1]), "{err}");
    }

    #[test]
    fn dataset_invariants_enforced() {
        let ds = generate_synthetic(&small_config()).unwrap();
        // Non-increasing time index.
        let mut bad_time = ds.time_index.clone();
        bad_time[1] = bad_time[0];
        assert!(ForecastDataset::new(
            ds.forecasts.clone(),
            ds.observations.clone(),
            ds.predictor_names.clone(),
            ds.target_index,
            bad_time,
        )
        .is_err());
        // NaN rejection.
        let mut bad = ds.forecasts.clone();
        bad.data_mut()[0] = f32::NAN;
        assert!(ForecastDataset::new(
            bad,
            ds.observations.clone(),
            ds.predictor_names.clone(),
            ds.target_index,
            ds.time_index.clone(),
        )
        .is_err());
    }

    #[test]
    fn target_ensemble_matches_cell_members() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let target = ds.target_ensemble();
        let mut buf = Vec::new();
        ds.cell_members(3, 1, 0, 1, ds.target_index, &mut buf);
        for (m, &v) in buf.iter().enumerate() {
            assert_eq!(target.at(&[3, m, 1, 0, 1]) as f64, v);
        }
    }
}
