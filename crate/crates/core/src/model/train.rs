//! CRPS-minimizing training with Adam, early stopping, and
//! best-validation checkpointing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::evaluate_loss;
use super::{init_params, Model, ModelConfig};
use crate::data::{ForecastDataset, NormStats};
use crate::error::{Error, Result};
use crate::scoring::KernelCrpsConfig;
use crate::seeds;
use crate::tensor::{adam_step, AdamState, Tensor};

/// Training loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// Analytic CRPS of a normal fit to the corrected ensemble.
    GaussianCrps,
    /// Distribution-free kernel CRPS with a spread penalty.
    KernelCrps(KernelCrpsConfig),
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop after this many consecutive epochs without validation
    /// improvement; zero stops after the first epoch.
    pub patience: usize,
    pub max_epochs: usize,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            learning_rate: 0.001,
            patience: 5,
            max_epochs: 50,
            loss_kind: LossKind::GaussianCrps,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

/// Train on the training split, validate after each epoch, and return the
/// parameters of the best validation epoch. Deterministic for fixed seed
/// and data: the loss history is bit-identical across runs.
pub fn train(
    train_ds: &ForecastDataset,
    val_ds: &ForecastDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    if train_cfg.batch_size == 0 || train_cfg.max_epochs == 0 {
        return Err(Error::InvalidArgument(
            "batch size and epoch budget must be positive".into(),
        ));
    }
    if !(train_cfg.learning_rate >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be non-negative, got {}",
            train_cfg.learning_rate
        )));
    }
    for (name, ds) in [("training", train_ds), ("validation", val_ds)] {
        model_cfg.check_input(&ds.forecasts)?;
        if ds.samples() == 0 {
            return Err(Error::InvalidArgument(format!("{name} split is empty")));
        }
    }
    if train_ds.target_index != val_ds.target_index {
        return Err(Error::InvalidArgument(
            "training and validation target indices differ".into(),
        ));
    }

    let stats = NormStats::fit(train_ds)?;
    let train_n = stats.apply(train_ds)?;
    let val_n = stats.apply(val_ds)?;
    let target = train_ds.target_index;

    let mut params = init_params::<f32>(model_cfg)?;
    let mut adam: Vec<AdamState<f32>> = params
        .iter_named()
        .iter()
        .map(|(_, t)| AdamState::new(t.len()))
        .collect();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds::derive(train_cfg.seed, "train-shuffle"));
    let mut order: Vec<usize> = (0..train_n.samples()).collect();

    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut streak = 0usize;
    let mut history = Vec::new();

    for epoch in 1..=train_cfg.max_epochs {
        // Fisher-Yates with the dedicated shuffle stream.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0f64;
        let mut cell_count = 0usize;
        for batch in order.chunks(train_cfg.batch_size) {
            let loss = run_batch(
                &train_n,
                batch,
                &mut params,
                Some((&mut adam, train_cfg.learning_rate)),
                model_cfg,
                train_cfg.loss_kind,
                &stats,
                target,
            )
            .map_err(|e| Error::Training {
                epoch,
                message: e.to_string(),
            })?;
            let cells = batch.len() * model_cfg.t * model_cfg.h * model_cfg.w;
            loss_sum += loss * cells as f64;
            cell_count += cells;
        }
        let train_loss = loss_sum / cell_count as f64;

        let mut val_sum = 0.0f64;
        let mut val_cells = 0usize;
        let val_order: Vec<usize> = (0..val_n.samples()).collect();
        for batch in val_order.chunks(train_cfg.batch_size) {
            let loss = run_batch(
                &val_n,
                batch,
                &mut params,
                None,
                model_cfg,
                train_cfg.loss_kind,
                &stats,
                target,
            )
            .map_err(|e| Error::Training {
                epoch,
                message: format!("validation: {e}"),
            })?;
            let cells = batch.len() * model_cfg.t * model_cfg.h * model_cfg.w;
            val_sum += loss * cells as f64;
            val_cells += cells;
        }
        let val_loss = val_sum / val_cells as f64;

        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: "loss diverged to a non-finite value".into(),
            });
        }

        let improved = val_loss < best_val;
        if improved {
            best_val = val_loss;
            best_params = params.clone();
            streak = 0;
        } else {
            streak += 1;
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            improved,
        });
        if streak >= train_cfg.patience {
            break;
        }
    }

    Ok(TrainOutcome {
        model: Model {
            config: model_cfg.clone(),
            params: best_params,
            norm: stats,
            target_index: target,
        },
        history,
    })
}

/// Forward (and optionally backward + Adam) over one batch; returns the
/// batch loss in physical units.
#[allow(clippy::too_many_arguments)]
fn run_batch(
    ds: &ForecastDataset,
    batch: &[usize],
    params: &mut super::TransformerParams<f32>,
    update: Option<(&mut Vec<AdamState<f32>>, f64)>,
    cfg: &ModelConfig,
    loss_kind: LossKind,
    stats: &NormStats,
    target: usize,
) -> Result<f64> {
    let n = ds.samples();
    let per_sample_f = ds.forecasts.len() / n;
    let per_sample_o = ds.observations.len() / n;

    let mut z_data = Vec::with_capacity(batch.len() * per_sample_f);
    let mut obs = Vec::with_capacity(batch.len() * per_sample_o);
    for &s in batch {
        z_data.extend_from_slice(&ds.forecasts.data()[s * per_sample_f..(s + 1) * per_sample_f]);
        obs.extend(
            ds.observations.data()[s * per_sample_o..(s + 1) * per_sample_o]
                .iter()
                .map(|&v| v as f64),
        );
    }
    let mut shape = ds.forecasts.shape().to_vec();
    shape[0] = batch.len();
    let z = Tensor::new(shape, z_data)?;

    // The affine map takes the normalized network output back to physical
    // units so the loss is comparable with verification scores.
    let evaluation = evaluate_loss(
        &z,
        &obs,
        params,
        cfg,
        loss_kind,
        (stats.std[target], stats.mean[target]),
        update.is_some(),
    )?;

    if let Some((adam, lr)) = update {
        let gradients = evaluation.gradients.as_ref().expect("requested above");
        let mut slot = 0usize;
        params.for_each_mut(|tensor| {
            adam_step(tensor, &gradients[slot], &mut adam[slot], lr).expect("aligned shapes");
            slot += 1;
        });
    }
    Ok(evaluation.loss)
}
