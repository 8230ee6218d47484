//! The six pipeline commands. Every command is deterministic for a fixed
//! configuration and seed: rerunning it produces byte-identical artifacts.

use std::io::Write;
use std::path::Path;

use epp_core::data::{
    chronological_split, generate_synthetic, load_eppg, save_eppg, ForecastDataset,
};
use epp_core::mbm::{self, apply_mbm, load_mbm_csv, save_mbm_csv};
use epp_core::model::{load_checkpoint, save_checkpoint, train, Model};
use epp_core::tensor::Tensor;
use epp_core::verification::{self, write_summary, VerificationReport};
use epp_core::{seeds, VariableKind};

use crate::args::{Args, CliError};
use crate::config::RunConfig;

const COMMON: [&str; 3] = ["config", "seed", "out"];

fn with_common<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut all: Vec<&str> = COMMON.to_vec();
    all.extend(extra);
    all
}

fn load_data(args: &Args, cfg: &RunConfig) -> Result<ForecastDataset, CliError> {
    let path = cfg.path_or(args.get("data"), &cfg.dataset_path, "dataset path (--data)")?;
    load_eppg(path).map_err(|e| CliError::Runtime(format!("{path}: {e}")))
}

pub fn generate(args: &Args) -> Result<(), CliError> {
    args.expect_only(&with_common(&[]))?;
    let cfg = RunConfig::from_args(args)?;
    let out = cfg.path_or(args.get("out"), &cfg.dataset_path, "output path (--out)")?;
    let ds = generate_synthetic(&cfg.synthetic_config())?;
    save_eppg(&ds, out).map_err(|e| CliError::Runtime(format!("{out}: {e}")))?;
    println!(
        "wrote {} samples ({}x{} grid, {} members, {} lead times, {} predictors) to {out}",
        ds.samples(),
        ds.grid().0,
        ds.grid().1,
        ds.members(),
        ds.lead_times(),
        ds.channels()
    );
    Ok(())
}

pub fn train_transformer(args: &Args) -> Result<(), CliError> {
    args.expect_only(&with_common(&["data"]))?;
    let cfg = RunConfig::from_args(args)?;
    let ds = load_data(args, &cfg)?;
    let out = cfg.path_or(
        args.get("out"),
        &cfg.checkpoint_path,
        "checkpoint path (--out)",
    )?;

    let (train_ds, val_ds, _test) = chronological_split(&ds, cfg.train_frac, cfg.val_frac)?;
    let outcome = train(
        &train_ds,
        &val_ds,
        &cfg.model_config(),
        &cfg.train_config()?,
    )?;

    save_checkpoint(&outcome.model, out).map_err(|e| CliError::Runtime(format!("{out}: {e}")))?;
    let history_path = format!("{out}.losses.csv");
    let mut f = std::fs::File::create(&history_path)
        .map_err(|e| CliError::Runtime(format!("{history_path}: {e}")))?;
    writeln!(f, "epoch,train_loss,val_loss,improved").map_err(epp_core::Error::from)?;
    for e in &outcome.history {
        writeln!(
            f,
            "{},{},{},{}",
            e.epoch, e.train_loss, e.val_loss, e.improved
        )
        .map_err(epp_core::Error::from)?;
    }
    let best = outcome
        .history
        .iter()
        .rfind(|e| e.improved)
        .expect("at least one improving epoch");
    println!(
        "trained {} epochs on {} samples; best validation loss {} (epoch {}); checkpoint {out}, history {history_path}",
        outcome.history.len(),
        train_ds.samples(),
        best.val_loss,
        best.epoch
    );
    Ok(())
}

pub fn fit_mbm(args: &Args) -> Result<(), CliError> {
    args.expect_only(&with_common(&["data"]))?;
    let cfg = RunConfig::from_args(args)?;
    let ds = load_data(args, &cfg)?;
    let out = cfg.path_or(
        args.get("out"),
        &cfg.mbm_params_path,
        "parameter path (--out)",
    )?;

    let (train_ds, _val, _test) = chronological_split(&ds, cfg.train_frac, cfg.val_frac)?;
    let (grid, diag) = mbm::fit_mbm(&train_ds, &cfg.mbm_fit_config())?;
    save_mbm_csv(&grid, out).map_err(|e| CliError::Runtime(format!("{out}: {e}")))?;
    println!(
        "fitted {} cells ({} converged, {} degenerate) on {} samples; training CRPS {} -> {}; wrote {out}",
        diag.cells,
        diag.converged_cells,
        diag.flagged_cells,
        train_ds.samples(),
        diag.mean_identity_crps,
        diag.mean_fitted_crps
    );
    Ok(())
}

fn select_split(
    ds: ForecastDataset,
    cfg: &RunConfig,
    which: &str,
) -> Result<ForecastDataset, CliError> {
    if which == "all" {
        return Ok(ds);
    }
    let (train_ds, val_ds, test_ds) = chronological_split(&ds, cfg.train_frac, cfg.val_frac)?;
    match which {
        "train" => Ok(train_ds),
        "val" => Ok(val_ds),
        "test" => Ok(test_ds),
        other => Err(CliError::Usage(format!(
            "--split must be all, train, val or test, got '{other}'"
        ))),
    }
}

/// Wrap a corrected target ensemble `[n,k,t,h,w]` as a single-channel
/// dataset aligned with `source`.
fn corrected_dataset(
    source: &ForecastDataset,
    corrected: Tensor<f32>,
) -> Result<ForecastDataset, CliError> {
    let mut shape = corrected.shape().to_vec();
    shape.push(1);
    let forecasts = Tensor::new(shape, corrected.into_data()).map_err(CliError::from)?;
    ForecastDataset::new(
        forecasts,
        source.observations.clone(),
        vec![source.predictor_names[source.target_index].clone()],
        0,
        source.time_index.clone(),
    )
    .map_err(CliError::from)
}

pub fn postprocess(args: &Args) -> Result<(), CliError> {
    args.expect_only(&with_common(&["data", "checkpoint", "mbm-params", "split"]))?;
    let method = match (args.get("checkpoint"), args.get("mbm-params")) {
        (Some(ckpt), None) => Ok(ckpt),
        (None, Some(params)) => Err(params),
        _ => {
            return Err(CliError::Usage(
                "pass exactly one of --checkpoint and --mbm-params".into(),
            ))
        }
    };
    let out = args.require("out")?;
    let cfg = RunConfig::from_args(args)?;
    let ds = load_data(args, &cfg)?;
    let split = args.get("split").unwrap_or("all");
    let subset = select_split(ds, &cfg, split)?;

    let corrected = match method {
        Ok(ckpt) => {
            let model: Model =
                load_checkpoint(ckpt).map_err(|e| CliError::Runtime(format!("{ckpt}: {e}")))?;
            model.postprocess(&subset)?
        }
        Err(params_path) => {
            let grid = load_mbm_csv(params_path)
                .map_err(|e| CliError::Runtime(format!("{params_path}: {e}")))?;
            let clamp = cfg.variable_kind == VariableKind::NonnegativeTarget;
            apply_mbm(&subset, &grid, clamp)?
        }
    };

    let corrected_ds = corrected_dataset(&subset, corrected)?;
    save_eppg(&corrected_ds, out).map_err(|e| CliError::Runtime(format!("{out}: {e}")))?;
    println!(
        "corrected {} samples (split {split}) -> {out}",
        corrected_ds.samples()
    );
    Ok(())
}

pub fn verify_cmd_reports(
    raw: &ForecastDataset,
    corrected: &[(String, ForecastDataset)],
    kind: VariableKind,
    seed: u64,
) -> Result<Vec<VerificationReport>, CliError> {
    // Align the raw dataset to the corrected files' sample times.
    let raw_aligned = if let Some((_, first)) = corrected.first() {
        for (label, ds) in corrected {
            if ds.time_index != first.time_index {
                return Err(CliError::Runtime(format!(
                    "corrected dataset '{label}' covers different sample times than the others"
                )));
            }
        }
        let indices: Vec<usize> = first
            .time_index
            .iter()
            .map(|t| {
                raw.time_index.binary_search(t).map_err(|_| {
                    CliError::Runtime(format!(
                        "corrected sample time {t} not present in the raw dataset"
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
        raw.select(&indices)?
    } else {
        raw.clone()
    };

    let variable = raw.predictor_names[raw.target_index].clone();
    let rank_seed = seeds::derive(seed, "verify-ranks");
    let mut reports = vec![verification::verify(
        &raw_aligned.target_ensemble(),
        &raw_aligned.observations,
        kind,
        &variable,
        "raw",
        rank_seed,
    )?];
    for (label, ds) in corrected {
        if ds.observations.shape() != raw_aligned.observations.shape() {
            return Err(CliError::Runtime(format!(
                "corrected dataset '{label}' does not match the raw grid"
            )));
        }
        reports.push(verification::verify(
            &ds.target_ensemble(),
            &ds.observations,
            kind,
            &variable,
            label,
            rank_seed,
        )?);
    }
    Ok(reports)
}

pub fn verify(args: &Args) -> Result<(), CliError> {
    args.expect_only(&with_common(&["raw", "corrected", "label"]))?;
    let cfg = RunConfig::from_args(args)?;
    let raw_path = args.require("raw")?;
    let out_dir = cfg.path_or(args.get("out"), &cfg.report_dir, "report directory (--out)")?;

    let raw = load_eppg(raw_path).map_err(|e| CliError::Runtime(format!("{raw_path}: {e}")))?;
    let corrected_paths = args.get_all("corrected");
    let labels = args.get_all("label");
    if !labels.is_empty() && labels.len() != corrected_paths.len() {
        return Err(CliError::Usage(format!(
            "{} --label flags for {} --corrected flags",
            labels.len(),
            corrected_paths.len()
        )));
    }
    let mut corrected = Vec::new();
    for (i, path) in corrected_paths.iter().enumerate() {
        let label = labels.get(i).map(|s| s.to_string()).unwrap_or_else(|| {
            Path::new(path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("corrected{i}"))
        });
        let ds = load_eppg(path).map_err(|e| CliError::Runtime(format!("{path}: {e}")))?;
        corrected.push((label, ds));
    }

    let reports = verify_cmd_reports(&raw, &corrected, cfg.variable_kind, cfg.seed)?;
    for report in &reports {
        report.write_csv_tables(out_dir, &report.method)?;
    }
    let refs: Vec<&VerificationReport> = reports.iter().collect();
    write_summary(&refs, out_dir)?;

    println!("method            crps        ser");
    for r in &reports {
        println!(
            "{:<16}  {:<10.6}  {:.6}",
            r.method, r.overall.crps, r.overall.ser
        );
    }
    println!("reports written to {out_dir}");
    Ok(())
}

pub fn attention_map(args: &Args) -> Result<(), CliError> {
    args.expect_only(&with_common(&[
        "checkpoint",
        "data",
        "block",
        "head",
        "sample",
    ]))?;
    let cfg = RunConfig::from_args(args)?;
    let ckpt = cfg.path_or(
        args.get("checkpoint"),
        &cfg.checkpoint_path,
        "checkpoint (--checkpoint)",
    )?;
    let out = args.require("out")?;
    let block = args.get_usize("block")?.unwrap_or(0);
    let head = args.get_usize("head")?.unwrap_or(0);
    let sample = args.get_usize("sample")?.unwrap_or(0);

    let model = load_checkpoint(ckpt).map_err(|e| CliError::Runtime(format!("{ckpt}: {e}")))?;
    let ds = load_data(args, &cfg)?;
    let map = model.attention_map(&ds, block, head, sample)?;

    let (h, w) = (model.config.h, model.config.w);
    let mut f = std::fs::File::create(out).map_err(|e| CliError::Runtime(format!("{out}: {e}")))?;
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| map[y * w + x].to_string()).collect();
        writeln!(f, "{}", row.join(",")).map_err(epp_core::Error::from)?;
    }
    println!("attention map (block {block}, head {head}, sample {sample}) -> {out}");
    Ok(())
}
