//! Self-attentive ensemble transformer.
//!
//! Every ensemble member is corrected individually while multi-headed
//! self-attention over the member axis exchanges information across
//! members; because the attention weights are shared over lead times,
//! gridpoints and features, information also flows across those dimensions.
//! One model handles all lead times at once.

mod checkpoint;
mod forward;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    evaluate_loss, extract_attention_map, forward, forward_probe, BlockProbe, LossEvaluation,
};
pub use train::{train, EpochStats, LossKind, TrainConfig, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ForecastDataset, NormStats};
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::VariableKind;

/// Epsilon of every channel/feature normalization in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture and data-layout configuration.
///
/// `c_tilde` must be divisible by `h_n`: each head attends to
/// `c_tilde / h_n` features.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub k: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub c_tilde: usize,
    pub n_blocks: usize,
    pub h_n: usize,
    pub m_n: usize,
    pub variable_kind: VariableKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 11,
            t: 20,
            h: 8,
            w: 8,
            c: 3,
            c_tilde: 32,
            n_blocks: 4,
            h_n: 8,
            m_n: 4,
            variable_kind: VariableKind::GaussianTarget,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k", self.k),
            ("t", self.t),
            ("h", self.h),
            ("w", self.w),
            ("c", self.c),
            ("c_tilde", self.c_tilde),
            ("n_blocks", self.n_blocks),
            ("h_n", self.h_n),
            ("m_n", self.m_n),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!(
                    "model config field {name} must be positive"
                )));
            }
        }
        if !self.c_tilde.is_multiple_of(self.h_n) {
            return Err(Error::InvalidArgument(format!(
                "feature width {} not divisible by {} heads",
                self.c_tilde, self.h_n
            )));
        }
        Ok(())
    }

    /// Features per head.
    pub fn head_dim(&self) -> usize {
        self.c_tilde / self.h_n
    }

    /// Length of the flattened (t, h, w, head_dim) axis each head attends
    /// over.
    pub fn flat_dim(&self) -> usize {
        self.t * self.h * self.w * self.head_dim()
    }

    /// Check an input tensor `[b,k,t,h,w,c]` against this configuration.
    pub fn check_input<T: Scalar>(&self, z: &Tensor<T>) -> Result<usize> {
        let s = z.shape();
        if s.len() != 6 || s[1] != self.k || s[2] != self.t || s[3] != self.h || s[4] != self.w {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match configured [b,{},{},{},{},{}]",
                s, self.k, self.t, self.h, self.w, self.c
            )));
        }
        if s[5] != self.c {
            return Err(Error::ShapeMismatch(format!(
                "input has {} channels, model expects {}",
                s[5], self.c
            )));
        }
        Ok(s[0])
    }
}

/// Weights of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub attn_gain: Tensor<T>,
    pub attn_shift: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub w_o_bias: Tensor<T>,
    pub mlp_gain: Tensor<T>,
    pub mlp_shift: Tensor<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
}

/// All learned weights. Projection weights are shared across the ensemble,
/// temporal and spatial positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams<T> {
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

impl<T: Scalar> TransformerParams<T> {
    /// Named tensors in the fixed serialization/optimization order.
    pub fn iter_named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("embed.w".into(), &self.embed_w),
            ("embed.b".into(), &self.embed_b),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.attn_norm.gain"), &b.attn_gain));
            out.push((format!("block{l}.attn_norm.shift"), &b.attn_shift));
            out.push((format!("block{l}.w_q"), &b.w_q));
            out.push((format!("block{l}.w_k"), &b.w_k));
            out.push((format!("block{l}.w_v"), &b.w_v));
            out.push((format!("block{l}.w_o"), &b.w_o));
            out.push((format!("block{l}.w_o_bias"), &b.w_o_bias));
            out.push((format!("block{l}.mlp_norm.gain"), &b.mlp_gain));
            out.push((format!("block{l}.mlp_norm.shift"), &b.mlp_shift));
            out.push((format!("block{l}.mlp.w1"), &b.mlp_w1));
            out.push((format!("block{l}.mlp.b1"), &b.mlp_b1));
            out.push((format!("block{l}.mlp.w2"), &b.mlp_w2));
            out.push((format!("block{l}.mlp.b2"), &b.mlp_b2));
        }
        out.push(("out.w".into(), &self.out_w));
        out.push(("out.b".into(), &self.out_b));
        out
    }

    /// Mutable visit in the same order as [`Self::iter_named`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut Tensor<T>)) {
        f(&mut self.embed_w);
        f(&mut self.embed_b);
        for b in self.blocks.iter_mut() {
            f(&mut b.attn_gain);
            f(&mut b.attn_shift);
            f(&mut b.w_q);
            f(&mut b.w_k);
            f(&mut b.w_v);
            f(&mut b.w_o);
            f(&mut b.w_o_bias);
            f(&mut b.mlp_gain);
            f(&mut b.mlp_shift);
            f(&mut b.mlp_w1);
            f(&mut b.mlp_b1);
            f(&mut b.mlp_w2);
            f(&mut b.mlp_b2);
        }
        f(&mut self.out_w);
        f(&mut self.out_b);
    }

    pub fn convert<U: Scalar>(&self) -> TransformerParams<U> {
        TransformerParams {
            embed_w: self.embed_w.convert(),
            embed_b: self.embed_b.convert(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    attn_gain: b.attn_gain.convert(),
                    attn_shift: b.attn_shift.convert(),
                    w_q: b.w_q.convert(),
                    w_k: b.w_k.convert(),
                    w_v: b.w_v.convert(),
                    w_o: b.w_o.convert(),
                    w_o_bias: b.w_o_bias.convert(),
                    mlp_gain: b.mlp_gain.convert(),
                    mlp_shift: b.mlp_shift.convert(),
                    mlp_w1: b.mlp_w1.convert(),
                    mlp_b1: b.mlp_b1.convert(),
                    mlp_w2: b.mlp_w2.convert(),
                    mlp_b2: b.mlp_b2.convert(),
                })
                .collect(),
            out_w: self.out_w.convert(),
            out_b: self.out_b.convert(),
        }
    }
}

/// Initialize weights: centered uniform scaled by 1/sqrt(fan_in) for the
/// embedding, Q/K/V, MLP and output maps; `W_O` starts at zero so every
/// block begins as the identity; biases zero, norm gains one. Draws happen
/// in f64 so f32 and f64 instantiations share weights bit-for-bit (up to
/// rounding).
pub fn init_params<T: Scalar>(cfg: &ModelConfig) -> Result<TransformerParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "model-init"));
    let ct = cfg.c_tilde;
    let hidden = cfg.m_n * ct;

    let mut uniform = |shape: Vec<usize>, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| {
            T::from(rng.random_range(-bound..bound)).expect("finite")
        })
    };

    let embed_w = uniform(vec![cfg.c, ct], cfg.c);
    let blocks = (0..cfg.n_blocks)
        .map(|_| BlockParams {
            attn_gain: Tensor::filled(vec![ct], T::one()),
            attn_shift: Tensor::zeros(vec![ct]),
            w_q: uniform(vec![ct, ct], ct),
            w_k: uniform(vec![ct, ct], ct),
            w_v: uniform(vec![ct, ct], ct),
            w_o: Tensor::zeros(vec![ct, ct]),
            w_o_bias: Tensor::zeros(vec![ct]),
            mlp_gain: Tensor::filled(vec![ct], T::one()),
            mlp_shift: Tensor::zeros(vec![ct]),
            mlp_w1: uniform(vec![ct, hidden], ct),
            mlp_b1: Tensor::zeros(vec![hidden]),
            mlp_w2: uniform(vec![hidden, ct], hidden),
            mlp_b2: Tensor::zeros(vec![ct]),
        })
        .collect();
    let out_w = uniform(vec![ct, 1], ct);

    Ok(TransformerParams {
        embed_w,
        embed_b: Tensor::zeros(vec![ct]),
        blocks,
        out_w,
        out_b: Tensor::zeros(vec![1]),
    })
}

/// A trained model: weights plus the normalization statistics of its
/// training split and the corrected channel's index. Immutable; safe to
/// share across threads for concurrent inference.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: TransformerParams<f32>,
    pub norm: NormStats,
    pub target_index: usize,
}

impl Model {
    /// Correct a dataset's ensembles. Input channels are normalized with
    /// the training statistics, the network output is mapped back to
    /// physical units, and non-negative targets are clamped at zero
    /// (inference only). Returns `[n, k, t, h, w]`.
    pub fn postprocess(&self, ds: &ForecastDataset) -> Result<Tensor<f32>> {
        if ds.channels() != self.config.c {
            return Err(Error::ShapeMismatch(format!(
                "dataset has {} predictors, model expects {}",
                ds.channels(),
                self.config.c
            )));
        }
        if ds.target_index != self.target_index {
            return Err(Error::InvalidArgument(format!(
                "dataset target index {} differs from the model's {}",
                ds.target_index, self.target_index
            )));
        }
        let normalized = self.norm.apply(ds)?;
        let n = ds.samples();
        let per_sample = normalized.forecasts.len() / n;
        let mut out: Vec<f32> =
            Vec::with_capacity(n * self.config.k * self.config.t * self.config.h * self.config.w);

        // Per-sample computations are independent; chunking only bounds
        // tape memory.
        let chunk = (1usize << 21) / per_sample.max(1);
        let chunk = chunk.clamp(1, 16);
        let mut start = 0usize;
        while start < n {
            let end = (start + chunk).min(n);
            let mut shape = normalized.forecasts.shape().to_vec();
            shape[0] = end - start;
            let z = Tensor::new(
                shape,
                normalized.forecasts.data()[start * per_sample..end * per_sample].to_vec(),
            )?;
            let corrected = self.forward_physical(&z)?;
            out.extend_from_slice(corrected.data());
            start = end;
        }
        Tensor::new(
            vec![
                n,
                self.config.k,
                self.config.t,
                self.config.h,
                self.config.w,
            ],
            out,
        )
    }

    /// Forward one normalized batch and denormalize to physical units.
    fn forward_physical(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape: Tape<f32> = Tape::new();
        let z_id = tape.leaf(z.clone());
        let graph = forward::GraphParams::insert(&mut tape, &self.params);
        let (out, _) = forward::build_forward(&mut tape, z_id, &graph, &self.config, None)?;
        let std_t = self.norm.std[self.target_index];
        let mean_t = self.norm.mean[self.target_index];
        let scaled = tape.scale(out, std_t);
        let shifted = tape.offset(scaled, mean_t);
        tape.check_finite(shifted, "postprocessed output")?;
        let mut result = tape.value(shifted).clone();
        if self.config.variable_kind == VariableKind::NonnegativeTarget {
            for v in result.data_mut() {
                *v = v.max(0.0);
            }
        }
        Ok(result)
    }

    /// Attention map of one sample: forward pass capturing the projected
    /// Q and K of `block`, elementwise product averaged over members,
    /// lead times and the head's features. Returns `[h, w]` row-major.
    pub fn attention_map(
        &self,
        ds: &ForecastDataset,
        block: usize,
        head: usize,
        sample: usize,
    ) -> Result<Vec<f64>> {
        if sample >= ds.samples() {
            return Err(Error::InvalidArgument(format!(
                "sample {sample} out of range for {} samples",
                ds.samples()
            )));
        }
        let normalized = self.norm.apply(&ds.slice(sample..sample + 1)?)?;
        extract_attention_map(
            &normalized.forecasts,
            &self.params,
            &self.config,
            block,
            head,
            0,
        )
    }
}
