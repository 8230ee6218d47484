//! Tape construction for the transformer forward pass.
//!
//! One attention block, in order: channel normalization; Q/K/V projections;
//! head split; flattening of (t, h, w, head features) per head;
//! normalization of Q and K over the flattened axis (no learned affine) and
//! scaling of Q by `1/sqrt(t*h*w*c_n)`; softmax over the key axis of the
//! k x k score matrix per (batch, head); application to V; reshape back;
//! output projection with bias and the residual connection from the block
//! input. The MLP block is `x + W2 gelu(W1 norm(x) + b1) + b2` applied
//! pointwise per (member, lead, gridpoint).

use super::{LossKind, ModelConfig, TransformerParams, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{ContractSpec, NodeId, Scalar, Tape, Tensor};

/// NodeIds of all parameters on one tape, mirroring [`TransformerParams`].
pub(crate) struct GraphParams {
    pub embed_w: NodeId,
    pub embed_b: NodeId,
    pub blocks: Vec<GraphBlock>,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

pub(crate) struct GraphBlock {
    pub attn_gain: NodeId,
    pub attn_shift: NodeId,
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub w_o_bias: NodeId,
    pub mlp_gain: NodeId,
    pub mlp_shift: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

impl GraphParams {
    pub fn insert<T: Scalar>(tape: &mut Tape<T>, params: &TransformerParams<T>) -> Self {
        let embed_w = tape.leaf(params.embed_w.clone());
        let embed_b = tape.leaf(params.embed_b.clone());
        let blocks = params
            .blocks
            .iter()
            .map(|b| GraphBlock {
                attn_gain: tape.leaf(b.attn_gain.clone()),
                attn_shift: tape.leaf(b.attn_shift.clone()),
                w_q: tape.leaf(b.w_q.clone()),
                w_k: tape.leaf(b.w_k.clone()),
                w_v: tape.leaf(b.w_v.clone()),
                w_o: tape.leaf(b.w_o.clone()),
                w_o_bias: tape.leaf(b.w_o_bias.clone()),
                mlp_gain: tape.leaf(b.mlp_gain.clone()),
                mlp_shift: tape.leaf(b.mlp_shift.clone()),
                mlp_w1: tape.leaf(b.mlp_w1.clone()),
                mlp_b1: tape.leaf(b.mlp_b1.clone()),
                mlp_w2: tape.leaf(b.mlp_w2.clone()),
                mlp_b2: tape.leaf(b.mlp_b2.clone()),
            })
            .collect();
        let out_w = tape.leaf(params.out_w.clone());
        let out_b = tape.leaf(params.out_b.clone());
        Self {
            embed_w,
            embed_b,
            blocks,
            out_w,
            out_b,
        }
    }

    /// NodeIds in [`TransformerParams::iter_named`] order.
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut ids = vec![self.embed_w, self.embed_b];
        for b in &self.blocks {
            ids.extend([
                b.attn_gain,
                b.attn_shift,
                b.w_q,
                b.w_k,
                b.w_v,
                b.w_o,
                b.w_o_bias,
                b.mlp_gain,
                b.mlp_shift,
                b.mlp_w1,
                b.mlp_b1,
                b.mlp_w2,
                b.mlp_b2,
            ]);
        }
        ids.extend([self.out_w, self.out_b]);
        ids
    }
}

/// Captured tensors of one attention block.
pub(crate) struct AttentionProbe {
    /// Projected query, `[b,k,t,h,w,c_tilde]`, before head split.
    pub q: NodeId,
    /// Projected key, same layout.
    pub k: NodeId,
    /// Softmax attention weights, `[b,h_n,k,k]`.
    pub weights: NodeId,
}

/// Record the full forward pass on `tape`; returns the corrected-ensemble
/// node `[b,k,t,h,w]` and, when requested, the probe of one block.
pub(crate) fn build_forward<T: Scalar>(
    tape: &mut Tape<T>,
    z: NodeId,
    params: &GraphParams,
    cfg: &ModelConfig,
    capture_block: Option<usize>,
) -> Result<(NodeId, Option<AttentionProbe>)> {
    let batch = cfg.check_input(tape.value(z))?;
    let feature_axis = ContractSpec::sum_axes(&[(5, 0)]);

    let mut x = tape.contract(z, params.embed_w, &feature_axis)?;
    x = tape.add_suffix(x, params.embed_b)?;
    tape.check_finite(x, "embedding")?;

    let mut probe = None;
    for (l, block) in params.blocks.iter().enumerate() {
        let (attended, block_probe) =
            attention_block(tape, x, block, cfg, batch, capture_block == Some(l))?;
        tape.check_finite(attended, &format!("attention block {l}"))?;
        if block_probe.is_some() {
            probe = block_probe;
        }
        x = mlp_block(tape, attended, block)?;
        tape.check_finite(x, &format!("mlp block {l}"))?;
    }

    let out = tape.contract(x, params.out_w, &feature_axis)?;
    let out = tape.add_suffix(out, params.out_b)?;
    let out = tape.reshape(out, vec![batch, cfg.k, cfg.t, cfg.h, cfg.w])?;
    tape.check_finite(out, "output projection")?;
    Ok((out, probe))
}

fn attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    block: &GraphBlock,
    cfg: &ModelConfig,
    batch: usize,
    capture: bool,
) -> Result<(NodeId, Option<AttentionProbe>)> {
    let (k, t, h, w, ct) = (cfg.k, cfg.t, cfg.h, cfg.w, cfg.c_tilde);
    let (hn, cn, flat) = (cfg.h_n, cfg.head_dim(), cfg.flat_dim());
    let feature_axis = ContractSpec::sum_axes(&[(5, 0)]);

    let xn = tape.layer_norm(x, 5, LAYER_NORM_EPS, block.attn_gain, block.attn_shift)?;
    let q = tape.contract(xn, block.w_q, &feature_axis)?;
    let key = tape.contract(xn, block.w_k, &feature_axis)?;
    let v = tape.contract(xn, block.w_v, &feature_axis)?;

    // [b,k,t,h,w,ct] -> [b,hn,k,t*h*w*cn]
    let to_heads = |tape: &mut Tape<T>, node: NodeId| -> Result<NodeId> {
        let split = tape.reshape(node, vec![batch, k, t, h, w, hn, cn])?;
        let grouped = tape.permute(split, &[0, 5, 1, 2, 3, 4, 6])?;
        tape.reshape(grouped, vec![batch, hn, k, flat])
    };
    let q_heads = to_heads(tape, q)?;
    let k_heads = to_heads(tape, key)?;
    let v_heads = to_heads(tape, v)?;

    // Normalize Q and K over the flattened axis; the scale s_c lands on Q.
    let ones = tape.leaf(Tensor::filled(vec![flat], T::one()));
    let zeros = tape.leaf(Tensor::zeros(vec![flat]));
    let q_norm = tape.layer_norm(q_heads, 3, LAYER_NORM_EPS, ones, zeros)?;
    let k_norm = tape.layer_norm(k_heads, 3, LAYER_NORM_EPS, ones, zeros)?;
    let q_scaled = tape.scale(q_norm, 1.0 / (flat as f64).sqrt());

    // k x k scores per (batch, head); softmax over the key axis.
    let score_spec = ContractSpec::sum_axes(&[(3, 3)]).with_batch(&[(0, 0), (1, 1)]);
    let scores = tape.contract(q_scaled, k_norm, &score_spec)?;
    let weights = tape.softmax(scores, 3)?;

    let apply_spec = ContractSpec::sum_axes(&[(3, 2)]).with_batch(&[(0, 0), (1, 1)]);
    let attended = tape.contract(weights, v_heads, &apply_spec)?;

    // [b,hn,k,flat] -> [b,k,t,h,w,ct]
    let split = tape.reshape(attended, vec![batch, hn, k, t, h, w, cn])?;
    let grouped = tape.permute(split, &[0, 2, 3, 4, 5, 1, 6])?;
    let merged = tape.reshape(grouped, vec![batch, k, t, h, w, ct])?;

    let projected = tape.contract(merged, block.w_o, &feature_axis)?;
    let projected = tape.add_suffix(projected, block.w_o_bias)?;
    let out = tape.add(x, projected)?;

    let probe = capture.then_some(AttentionProbe { q, k: key, weights });
    Ok((out, probe))
}

fn mlp_block<T: Scalar>(tape: &mut Tape<T>, x: NodeId, block: &GraphBlock) -> Result<NodeId> {
    let feature_axis = ContractSpec::sum_axes(&[(5, 0)]);
    let xn = tape.layer_norm(x, 5, LAYER_NORM_EPS, block.mlp_gain, block.mlp_shift)?;
    let inflated = tape.contract(xn, block.mlp_w1, &feature_axis)?;
    let inflated = tape.add_suffix(inflated, block.mlp_b1)?;
    let activated = tape.gelu(inflated);
    let deflated = tape.contract(activated, block.mlp_w2, &feature_axis)?;
    let deflated = tape.add_suffix(deflated, block.mlp_b2)?;
    tape.add(x, deflated)
}

/// Plain forward pass over an already-normalized input; returns the
/// network output in normalized units, `[b,k,t,h,w]`.
pub fn forward<T: Scalar>(
    z: &Tensor<T>,
    params: &TransformerParams<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut tape: Tape<T> = Tape::new();
    let z_id = tape.leaf(z.clone());
    let graph = GraphParams::insert(&mut tape, params);
    let (out, _) = build_forward(&mut tape, z_id, &graph, cfg, None)?;
    Ok(tape.value(out).clone())
}

/// Values captured from one attention block during a forward pass.
pub struct BlockProbe<T> {
    /// Projected query, `[b,k,t,h,w,c_tilde]`.
    pub q: Tensor<T>,
    /// Projected key, same layout.
    pub k: Tensor<T>,
    /// Softmax attention weights, `[b,h_n,k,k]`; rows sum to one.
    pub attention_weights: Tensor<T>,
    /// Final network output, `[b,k,t,h,w]`.
    pub output: Tensor<T>,
}

/// Forward pass that captures one block's attention internals.
pub fn forward_probe<T: Scalar>(
    z: &Tensor<T>,
    params: &TransformerParams<T>,
    cfg: &ModelConfig,
    block: usize,
) -> Result<BlockProbe<T>> {
    if block >= cfg.n_blocks {
        return Err(Error::InvalidArgument(format!(
            "block {block} out of range for {} blocks",
            cfg.n_blocks
        )));
    }
    let mut tape: Tape<T> = Tape::new();
    let z_id = tape.leaf(z.clone());
    let graph = GraphParams::insert(&mut tape, params);
    let (out, probe) = build_forward(&mut tape, z_id, &graph, cfg, Some(block))?;
    let probe = probe.expect("capture was requested");
    Ok(BlockProbe {
        q: tape.value(probe.q).clone(),
        k: tape.value(probe.k).clone(),
        attention_weights: tape.value(probe.weights).clone(),
        output: tape.value(out).clone(),
    })
}

/// One loss evaluation over a batch.
pub struct LossEvaluation<T> {
    /// Mean CRPS over all (sample, lead, gridpoint) cells.
    pub loss: f64,
    /// Per-parameter gradients in `TransformerParams::iter_named` order;
    /// present when gradients were requested.
    pub gradients: Option<Vec<Vec<T>>>,
    /// Network output after the affine map, `[b,k,t,h,w]`.
    pub output: Tensor<T>,
}

/// Forward + loss (+ gradients) for one batch. The network output is
/// mapped through `value * affine.0 + affine.1` before scoring, which is
/// how training converts normalized outputs back to physical units; pass
/// `(1.0, 0.0)` to score in normalized units.
pub fn evaluate_loss<T: Scalar>(
    z: &Tensor<T>,
    observations: &[f64],
    params: &TransformerParams<T>,
    cfg: &ModelConfig,
    loss_kind: LossKind,
    affine: (f64, f64),
    with_gradients: bool,
) -> Result<LossEvaluation<T>> {
    let mut tape: Tape<T> = Tape::new();
    let z_id = tape.leaf(z.clone());
    let graph = GraphParams::insert(&mut tape, params);
    let (out, _) = build_forward(&mut tape, z_id, &graph, cfg, None)?;
    let scaled = tape.scale(out, affine.0);
    let physical = tape.offset(scaled, affine.1);
    let loss_id = match loss_kind {
        LossKind::GaussianCrps => tape.crps_gaussian_loss(physical, observations, 1)?,
        LossKind::KernelCrps(kernel_cfg) => {
            tape.crps_kernel_loss(physical, observations, 1, kernel_cfg)?
        }
    };
    tape.check_finite(loss_id, "batch loss")?;
    let loss = tape.value(loss_id).data()[0].to_f64().expect("finite loss");
    let output = tape.value(physical).clone();

    let gradients = if with_gradients {
        let mut grads = tape.backward(loss_id)?;
        Some(
            graph
                .ordered()
                .iter()
                .map(|&id| {
                    grads
                        .take(id)
                        .unwrap_or_else(|| vec![T::zero(); tape.value(id).len()])
                })
                .collect(),
        )
    } else {
        None
    };

    Ok(LossEvaluation {
        loss,
        gradients,
        output,
    })
}

/// Attention map of one (block, head, batch element): the elementwise
/// product of the projected Q and K tensors in the un-flattened layout,
/// averaged over the ensemble, lead-time and head-feature dimensions.
/// Returns one value per gridpoint, `[h, w]` row-major. Deterministic:
/// repeated calls are bit-identical.
pub fn extract_attention_map(
    z_normalized: &Tensor<f32>,
    params: &TransformerParams<f32>,
    cfg: &ModelConfig,
    block: usize,
    head: usize,
    batch: usize,
) -> Result<Vec<f64>> {
    if block >= cfg.n_blocks {
        return Err(Error::InvalidArgument(format!(
            "block {block} out of range for {} blocks",
            cfg.n_blocks
        )));
    }
    if head >= cfg.h_n {
        return Err(Error::InvalidArgument(format!(
            "head {head} out of range for {} heads",
            cfg.h_n
        )));
    }
    let b = cfg.check_input(z_normalized)?;
    if batch >= b {
        return Err(Error::InvalidArgument(format!(
            "batch index {batch} out of range for {b} samples"
        )));
    }

    let probe = forward_probe(z_normalized, params, cfg, block)?;
    let q = &probe.q;
    let key = &probe.k;
    let (k, t, h, w, ct) = (cfg.k, cfg.t, cfg.h, cfg.w, cfg.c_tilde);
    let cn = cfg.head_dim();
    let mut map = vec![0.0f64; h * w];
    for member in 0..k {
        for lead in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let base =
                        ((((batch * k + member) * t + lead) * h + y) * w + x) * ct + head * cn;
                    let mut acc = 0.0f64;
                    for cc in 0..cn {
                        acc += q.data()[base + cc] as f64 * key.data()[base + cc] as f64;
                    }
                    map[y * w + x] += acc;
                }
            }
        }
    }
    let norm = (k * t * cn) as f64;
    for v in map.iter_mut() {
        *v /= norm;
    }
    Ok(map)
}
