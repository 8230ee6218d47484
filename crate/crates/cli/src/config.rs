//! Flat `key = value` run configuration.
//!
//! UTF-8 text, one assignment per line, `#` starts a comment, keys are
//! fully enumerated (unknown or duplicate keys are usage errors, all
//! problems reported in one message). Flags override file values. All
//! randomness derives from the single `seed` key.

use epp_core::data::SyntheticConfig;
use epp_core::mbm::{MbmFitConfig, MbmLossKind};
use epp_core::model::{LossKind, ModelConfig, TrainConfig};
use epp_core::scoring::KernelCrpsConfig;
use epp_core::VariableKind;

use crate::args::{Args, CliError};

/// `auto` resolves a loss from `variable_kind`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossChoice {
    Auto,
    Gaussian,
    Kernel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbmLossChoice {
    Auto,
    Gaussian,
    AbsNonnegative,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    // Synthetic data
    pub samples: usize,
    pub k: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub bias_amplitude: f64,
    pub underdispersion_factor: f64,
    pub lead_error_growth: f64,
    pub terrain_roughness: f64,
    // Model
    pub variable_kind: VariableKind,
    pub c_tilde: usize,
    pub n_blocks: usize,
    pub h_n: usize,
    pub m_n: usize,
    // Training
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub loss_kind: LossChoice,
    pub lambda: f64,
    pub k_penalty: f64,
    // MBM fit
    pub mbm_loss_kind: MbmLossChoice,
    pub mbm_max_iterations: usize,
    pub mbm_tolerance: f64,
    // Splitting
    pub train_frac: f64,
    pub val_frac: f64,
    // Randomness
    pub seed: u64,
    // Paths (flag fallbacks)
    pub dataset_path: String,
    pub checkpoint_path: String,
    pub mbm_params_path: String,
    pub report_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            samples: 128,
            k: 11,
            t: 20,
            h: 8,
            w: 8,
            c: 3,
            bias_amplitude: 0.5,
            underdispersion_factor: 0.6,
            lead_error_growth: 0.4,
            terrain_roughness: 1.0,
            variable_kind: VariableKind::GaussianTarget,
            c_tilde: 32,
            n_blocks: 4,
            h_n: 8,
            m_n: 4,
            batch_size: 2,
            learning_rate: 0.001,
            patience: 5,
            max_epochs: 50,
            loss_kind: LossChoice::Auto,
            lambda: 0.0275,
            k_penalty: 2.7,
            mbm_loss_kind: MbmLossChoice::Auto,
            mbm_max_iterations: 200,
            mbm_tolerance: 1e-6,
            train_frac: 0.8,
            val_frac: 0.1,
            seed: 0,
            dataset_path: String::new(),
            checkpoint_path: String::new(),
            mbm_params_path: String::new(),
            report_dir: String::new(),
        }
    }
}

impl RunConfig {
    /// Load from the common flags: `--config` (optional) then `--seed`.
    pub fn from_args(args: &Args) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = args.get("config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("{path}: {e}")))?;
            cfg.apply_file(&text)?;
        }
        if let Some(seed) = args.get_u64("seed")? {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn apply_file(&mut self, text: &str) -> Result<(), CliError> {
        let mut problems: Vec<String> = Vec::new();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {lineno}: expected 'key = value'"));
                continue;
            };
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                problems.push(format!("line {lineno}: duplicate key '{key}'"));
                continue;
            }
            seen.push(key.to_string());
            if let Err(msg) = self.set(key, value) {
                problems.push(format!("line {lineno}: {msg}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "invalid config: {}",
                problems.join("; ")
            )))
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse::<T>()
                .map_err(|_| format!("invalid value for '{key}': '{value}'"))
        }
        match key {
            "samples" => self.samples = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "t" => self.t = parse(key, value)?,
            "h" => self.h = parse(key, value)?,
            "w" => self.w = parse(key, value)?,
            "c" => self.c = parse(key, value)?,
            "bias_amplitude" => self.bias_amplitude = parse(key, value)?,
            "underdispersion_factor" => self.underdispersion_factor = parse(key, value)?,
            "lead_error_growth" => self.lead_error_growth = parse(key, value)?,
            "terrain_roughness" => self.terrain_roughness = parse(key, value)?,
            "variable_kind" => {
                self.variable_kind = value.parse::<VariableKind>().map_err(|e| e.to_string())?
            }
            "c_tilde" => self.c_tilde = parse(key, value)?,
            "n_blocks" => self.n_blocks = parse(key, value)?,
            "h_n" => self.h_n = parse(key, value)?,
            "m_n" => self.m_n = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "loss_kind" => {
                self.loss_kind = match value {
                    "auto" => LossChoice::Auto,
                    "gaussian_crps" => LossChoice::Gaussian,
                    "kernel_crps" => LossChoice::Kernel,
                    other => return Err(format!("invalid value for 'loss_kind': '{other}'")),
                }
            }
            "lambda" => self.lambda = parse(key, value)?,
            "k_penalty" => self.k_penalty = parse(key, value)?,
            "mbm_loss_kind" => {
                self.mbm_loss_kind = match value {
                    "auto" => MbmLossChoice::Auto,
                    "gaussian_crps" => MbmLossChoice::Gaussian,
                    "abs_crps_nonnegative" => MbmLossChoice::AbsNonnegative,
                    other => return Err(format!("invalid value for 'mbm_loss_kind': '{other}'")),
                }
            }
            "mbm_max_iterations" => self.mbm_max_iterations = parse(key, value)?,
            "mbm_tolerance" => self.mbm_tolerance = parse(key, value)?,
            "train_frac" => self.train_frac = parse(key, value)?,
            "val_frac" => self.val_frac = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "dataset_path" => self.dataset_path = value.to_string(),
            "checkpoint_path" => self.checkpoint_path = value.to_string(),
            "mbm_params_path" => self.mbm_params_path = value.to_string(),
            "report_dir" => self.report_dir = value.to_string(),
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            samples: self.samples,
            k: self.k,
            t: self.t,
            h: self.h,
            w: self.w,
            c: self.c,
            bias_amplitude: self.bias_amplitude,
            underdispersion_factor: self.underdispersion_factor,
            lead_error_growth: self.lead_error_growth,
            terrain_roughness: self.terrain_roughness,
            variable_kind: self.variable_kind,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            k: self.k,
            t: self.t,
            h: self.h,
            w: self.w,
            c: self.c,
            c_tilde: self.c_tilde,
            n_blocks: self.n_blocks,
            h_n: self.h_n,
            m_n: self.m_n,
            variable_kind: self.variable_kind,
            seed: self.seed,
        }
    }

    pub fn kernel_config(&self) -> Result<KernelCrpsConfig, CliError> {
        KernelCrpsConfig::new(self.lambda, self.k_penalty).map_err(CliError::from)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let loss_kind = match (self.loss_kind, self.variable_kind) {
            (LossChoice::Gaussian, _) => LossKind::GaussianCrps,
            (LossChoice::Kernel, _) => LossKind::KernelCrps(self.kernel_config()?),
            (LossChoice::Auto, VariableKind::GaussianTarget) => LossKind::GaussianCrps,
            (LossChoice::Auto, VariableKind::NonnegativeTarget) => {
                LossKind::KernelCrps(self.kernel_config()?)
            }
        };
        Ok(TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            patience: self.patience,
            max_epochs: self.max_epochs,
            loss_kind,
            seed: self.seed,
        })
    }

    pub fn mbm_fit_config(&self) -> MbmFitConfig {
        let loss_kind = match (self.mbm_loss_kind, self.variable_kind) {
            (MbmLossChoice::Gaussian, _) => MbmLossKind::GaussianCrps,
            (MbmLossChoice::AbsNonnegative, _) => MbmLossKind::AbsCrpsNonnegative,
            (MbmLossChoice::Auto, VariableKind::GaussianTarget) => MbmLossKind::GaussianCrps,
            (MbmLossChoice::Auto, VariableKind::NonnegativeTarget) => {
                MbmLossKind::AbsCrpsNonnegative
            }
        };
        MbmFitConfig {
            loss_kind,
            max_iterations: self.mbm_max_iterations,
            tolerance: self.mbm_tolerance,
            seed: self.seed,
        }
    }

    /// Flag value with config-file fallback.
    pub fn path_or<'a>(
        &'a self,
        flag_value: Option<&'a str>,
        config_value: &'a str,
        what: &str,
    ) -> Result<&'a str, CliError> {
        match flag_value {
            Some(v) => Ok(v),
            None if !config_value.is_empty() => Ok(config_value),
            None => Err(CliError::Usage(format!(
                "missing {what}: pass the flag or set it in the config file"
            ))),
        }
    }
}
