//! Single-use computation tape with reverse-mode gradients.
//!
//! A forward pass records one node per operation; [`Tape::backward`] walks
//! the record once in reverse and then consumes the tape. Independent tapes
//! may run on different threads; one tape is single-threaded. Contraction
//! kernels parallelize internally over independent output elements, so
//! results are bit-identical for any thread count.

use rayon::prelude::*;

use super::{checked_numel, invert_perm, permute_copy, s, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::scoring::{
    crps_gaussian, crps_gaussian_grad, crps_kernel, crps_kernel_grad, normal_cdf, normal_pdf,
    KernelCrpsConfig,
};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Axis pairing for [`Tape::contract`].
///
/// `sum` pairs are contracted away; `batch` pairs are zipped (matched
/// index-for-index, not summed). The result shape is the batch extents,
/// then `a`'s unpaired axes, then `b`'s unpaired axes. With `batch` empty
/// this is a plain tensor contraction.
#[derive(Clone, Debug, Default)]
pub struct ContractSpec {
    pub sum: Vec<(usize, usize)>,
    pub batch: Vec<(usize, usize)>,
}

impl ContractSpec {
    pub fn sum_axes(pairs: &[(usize, usize)]) -> Self {
        Self {
            sum: pairs.to_vec(),
            batch: Vec::new(),
        }
    }

    pub fn with_batch(mut self, pairs: &[(usize, usize)]) -> Self {
        self.batch = pairs.to_vec();
        self
    }
}

/// Below this contraction length the dot-product reduction overhead
/// dominates and `b` is canonicalized sum-major so the kernel runs as
/// vectorizable row updates.
const SMALL_SUM_DIM: usize = 32;

#[derive(Clone, Debug)]
struct ContractPlan {
    a_shape: Vec<usize>,
    b_shape: Vec<usize>,
    /// Permutation bringing `a` to [batch..., free..., sum...] order.
    a_perm: Option<Vec<usize>>,
    /// Permutation bringing `b` to [batch..., free..., sum...] order, or
    /// [batch..., sum..., free...] when `b_sum_major` is set.
    b_perm: Option<Vec<usize>>,
    b_sum_major: bool,
    bsz: usize,
    m: usize,
    n: usize,
    ksz: usize,
    out_shape: Vec<usize>,
}

fn plan_contract(
    a_shape: &[usize],
    b_shape: &[usize],
    spec: &ContractSpec,
) -> Result<ContractPlan> {
    let ra = a_shape.len();
    let rb = b_shape.len();
    let mut a_used = vec![false; ra];
    let mut b_used = vec![false; rb];

    let claim = |used: &mut Vec<bool>, axis: usize, rank: usize, side: char| -> Result<()> {
        if axis >= rank {
            return Err(Error::ShapeMismatch(format!(
                "contract: {side} axis {axis} out of range for rank {rank}"
            )));
        }
        if used[axis] {
            return Err(Error::ShapeMismatch(format!(
                "contract: {side} axis {axis} paired more than once"
            )));
        }
        used[axis] = true;
        Ok(())
    };

    for (idx, &(aa, ba)) in spec.batch.iter().chain(spec.sum.iter()).enumerate() {
        let role = if idx < spec.batch.len() {
            "batch"
        } else {
            "sum"
        };
        claim(&mut a_used, aa, ra, 'a')?;
        claim(&mut b_used, ba, rb, 'b')?;
        if a_shape[aa] != b_shape[ba] {
            return Err(Error::ShapeMismatch(format!(
                "contract: {role} pair joins a axis {aa} (extent {}) with b axis {ba} (extent {})",
                a_shape[aa], b_shape[ba]
            )));
        }
    }

    let a_free: Vec<usize> = (0..ra).filter(|&i| !a_used[i]).collect();
    let b_free: Vec<usize> = (0..rb).filter(|&i| !b_used[i]).collect();

    let ksz: usize = spec.sum.iter().map(|&(aa, _)| a_shape[aa]).product();
    let n: usize = b_free.iter().map(|&i| b_shape[i]).product();
    let b_sum_major = ksz < SMALL_SUM_DIM && n > 1;

    let a_perm: Vec<usize> = spec
        .batch
        .iter()
        .map(|&(aa, _)| aa)
        .chain(a_free.iter().copied())
        .chain(spec.sum.iter().map(|&(aa, _)| aa))
        .collect();
    let b_batch = spec.batch.iter().map(|&(_, ba)| ba);
    let b_sum = spec.sum.iter().map(|&(_, ba)| ba);
    let b_perm: Vec<usize> = if b_sum_major {
        b_batch.chain(b_sum).chain(b_free.iter().copied()).collect()
    } else {
        b_batch.chain(b_free.iter().copied()).chain(b_sum).collect()
    };

    let is_identity = |p: &[usize]| p.iter().enumerate().all(|(i, &x)| i == x);

    let bsz: usize = spec.batch.iter().map(|&(aa, _)| a_shape[aa]).product();
    let m: usize = a_free.iter().map(|&i| a_shape[i]).product();

    let mut out_shape: Vec<usize> = spec
        .batch
        .iter()
        .map(|&(aa, _)| a_shape[aa])
        .chain(a_free.iter().map(|&i| a_shape[i]))
        .chain(b_free.iter().map(|&i| b_shape[i]))
        .collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }

    Ok(ContractPlan {
        a_shape: a_shape.to_vec(),
        b_shape: b_shape.to_vec(),
        a_perm: if is_identity(&a_perm) {
            None
        } else {
            Some(a_perm)
        },
        b_perm: if is_identity(&b_perm) {
            None
        } else {
            Some(b_perm)
        },
        b_sum_major,
        bsz,
        m,
        n,
        ksz,
        out_shape,
    })
}

/// Work size above which contraction kernels fan out over rayon.
const PAR_MIN_WORK: usize = 1 << 17;
/// Element count above which elementwise kernels fan out; chunk boundaries
/// are fixed, so the split does not affect results.
const PAR_MIN_ELEMWISE: usize = 1 << 14;
const ELEMWISE_CHUNK: usize = 1 << 12;

/// Dot product with eight independent accumulators. The fixed reduction
/// order keeps results bit-identical run to run while breaking the serial
/// dependency chain that blocks vectorization.
#[inline]
fn dot8<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let a_chunks = a.chunks_exact(8);
    let b_chunks = b.chunks_exact(8);
    let a_rem = a_chunks.remainder();
    let b_rem = b_chunks.remainder();
    for (xa, xb) in a_chunks.zip(b_chunks) {
        for lane in 0..8 {
            acc[lane] = acc[lane] + xa[lane] * xb[lane];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in a_rem.iter().zip(b_rem.iter()) {
        tail = tail + x * y;
    }
    let half = [
        acc[0] + acc[4],
        acc[1] + acc[5],
        acc[2] + acc[6],
        acc[3] + acc[7],
    ];
    ((half[0] + half[2]) + (half[1] + half[3])) + tail
}

fn canonical<'a, T: Scalar>(
    data: &'a [T],
    shape: &[usize],
    perm: &Option<Vec<usize>>,
    scratch: &'a mut Vec<T>,
) -> &'a [T] {
    match perm {
        None => data,
        Some(p) => {
            let (_, copied) = permute_copy(data, shape, p);
            *scratch = copied;
            scratch.as_slice()
        }
    }
}

fn run_rows<T: Scalar>(
    out: &mut [T],
    row_len: usize,
    parallel: bool,
    row: impl Fn(usize, &mut [T]) + Sync,
) {
    if parallel {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(r, chunk)| row(r, chunk));
    } else {
        for (r, chunk) in out.chunks_mut(row_len).enumerate() {
            row(r, chunk);
        }
    }
}

fn contract_forward<T: Scalar>(a: &[T], b: &[T], plan: &ContractPlan) -> Vec<T> {
    let (mut sa, mut sb) = (Vec::new(), Vec::new());
    let ac = canonical(a, &plan.a_shape, &plan.a_perm, &mut sa);
    let bc = canonical(b, &plan.b_shape, &plan.b_perm, &mut sb);
    let (m, n, k) = (plan.m, plan.n, plan.ksz);
    let mut out = vec![T::zero(); plan.bsz * m * n];
    let parallel = plan.bsz * m * n * k >= PAR_MIN_WORK;

    if plan.b_sum_major {
        // b' is [bsz, K, N]: out_row += a[p] * b'[p, :], no reduction chain.
        run_rows(&mut out, n, parallel, |r, out_row| {
            let bi = r / m;
            let i = r % m;
            let a_row = &ac[(bi * m + i) * k..(bi * m + i + 1) * k];
            let b_mat = &bc[bi * k * n..(bi + 1) * k * n];
            for (p, &av) in a_row.iter().enumerate() {
                let b_row = &b_mat[p * n..(p + 1) * n];
                for (slot, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                    *slot = *slot + av * bv;
                }
            }
        });
    } else {
        // b' is [bsz, N, K]: contiguous dot products.
        run_rows(&mut out, n, parallel, |r, out_row| {
            let bi = r / m;
            let i = r % m;
            let a_row = &ac[(bi * m + i) * k..(bi * m + i + 1) * k];
            let b_mat = &bc[bi * n * k..(bi + 1) * n * k];
            for (j, slot) in out_row.iter_mut().enumerate() {
                *slot = dot8(a_row, &b_mat[j * k..(j + 1) * k]);
            }
        });
    }
    out
}

/// Gradient w.r.t. `a`: ga'[bi,i,:] = sum_j g[bi,i,j] * b[bi,j-th free, :],
/// then un-permuted back to `a`'s original layout.
fn contract_backward_a<T: Scalar>(g: &[T], b: &[T], plan: &ContractPlan) -> Vec<T> {
    let mut sb = Vec::new();
    let bc = canonical(b, &plan.b_shape, &plan.b_perm, &mut sb);
    let (m, n, k) = (plan.m, plan.n, plan.ksz);
    let mut ga = vec![T::zero(); plan.bsz * m * k];
    let parallel = plan.bsz * m * n * k >= PAR_MIN_WORK;

    if plan.b_sum_major {
        // b' [bsz, K, N]: ga_row[p] = dot(g_row, b'[p, :]).
        run_rows(&mut ga, k, parallel, |r, ga_row| {
            let bi = r / m;
            let i = r % m;
            let g_row = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
            let b_mat = &bc[bi * k * n..(bi + 1) * k * n];
            for (p, slot) in ga_row.iter_mut().enumerate() {
                *slot = dot8(g_row, &b_mat[p * n..(p + 1) * n]);
            }
        });
    } else {
        // b' [bsz, N, K]: ga_row += g[j] * b'[j, :].
        run_rows(&mut ga, k, parallel, |r, ga_row| {
            let bi = r / m;
            let i = r % m;
            let g_row = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
            let b_mat = &bc[bi * n * k..(bi + 1) * n * k];
            for (j, &gv) in g_row.iter().enumerate() {
                let b_row = &b_mat[j * k..(j + 1) * k];
                for (slot, &bv) in ga_row.iter_mut().zip(b_row.iter()) {
                    *slot = *slot + gv * bv;
                }
            }
        });
    }
    match &plan.a_perm {
        None => ga,
        Some(p) => {
            let pshape: Vec<usize> = p.iter().map(|&ax| plan.a_shape[ax]).collect();
            permute_copy(&ga, &pshape, &invert_perm(p)).1
        }
    }
}

/// Gradient w.r.t. `b` in `b`'s canonical layout, then un-permuted.
fn contract_backward_b<T: Scalar>(g: &[T], a: &[T], plan: &ContractPlan) -> Vec<T> {
    let mut sa = Vec::new();
    let ac = canonical(a, &plan.a_shape, &plan.a_perm, &mut sa);
    let (m, n, k) = (plan.m, plan.n, plan.ksz);
    let mut gb = vec![T::zero(); plan.bsz * n * k];
    let parallel = plan.bsz * m * n * k >= PAR_MIN_WORK;

    if plan.b_sum_major {
        // gb'[bi,p,:] += a'[bi,i,p] * g[bi,i,:] accumulated over i.
        run_rows(&mut gb, n, parallel, |r, gb_row| {
            let bi = r / k;
            let p = r % k;
            let a_mat = &ac[bi * m * k..(bi + 1) * m * k];
            let g_mat = &g[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let av = a_mat[i * k + p];
                let g_row = &g_mat[i * n..(i + 1) * n];
                for (slot, &gv) in gb_row.iter_mut().zip(g_row.iter()) {
                    *slot = *slot + av * gv;
                }
            }
        });
    } else {
        // gb'[bi,j,:] = sum_i g[bi,i,j] * a'[bi,i,:].
        run_rows(&mut gb, k, parallel, |r, gb_row| {
            let bi = r / n;
            let j = r % n;
            let a_mat = &ac[bi * m * k..(bi + 1) * m * k];
            for i in 0..m {
                let gv = g[(bi * m + i) * n + j];
                let a_row = &a_mat[i * k..(i + 1) * k];
                for (slot, &av) in gb_row.iter_mut().zip(a_row.iter()) {
                    *slot = *slot + gv * av;
                }
            }
        });
    }
    match &plan.b_perm {
        None => gb,
        Some(p) => {
            let pshape: Vec<usize> = p.iter().map(|&ax| plan.b_shape[ax]).collect();
            permute_copy(&gb, &pshape, &invert_perm(p)).1
        }
    }
}

/// (outer, extent, inner) decomposition of one axis.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Ensemble std floored here so the Gaussian loss stays finite when members
/// collapse; the floored branch carries a zero sigma-gradient.
const SIGMA_FLOOR: f64 = 1e-8;

enum Op<T> {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Offset {
        a: usize,
    },
    AddSuffix {
        a: usize,
        bias: usize,
    },
    Contract {
        a: usize,
        b: usize,
        plan: ContractPlan,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        a: usize,
        gain: usize,
        shift: usize,
        axis: usize,
        eps: f64,
    },
    Gelu {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    SumAll {
        a: usize,
    },
    MeanAll {
        a: usize,
    },
    GaussianCrps {
        ens: usize,
        obs: Vec<f64>,
        member_axis: usize,
    },
    KernelCrps {
        ens: usize,
        obs: Vec<f64>,
        member_axis: usize,
        config: KernelCrpsConfig,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Per-node gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    inner: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.inner.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.inner.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Surface NaN/Inf produced by a forward pass as an error naming `context`.
    pub fn check_finite(&self, id: NodeId, context: &str) -> Result<()> {
        if self.nodes[id.0].value.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "{context} produced non-finite values"
            )))
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch(format!(
                "{what}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let f: T = s(factor);
        let data = self.value(a).data().iter().map(|&x| x * f).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { a: a.0, factor: f })
    }

    pub fn offset(&mut self, a: NodeId, constant: f64) -> NodeId {
        let c: T = s(constant);
        let data = self.value(a).data().iter().map(|&x| x + c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Offset { a: a.0 })
    }

    /// Broadcast-add `bias` over the leading axes of `a`; `bias.shape()` must
    /// equal a suffix of `a.shape()`.
    pub fn add_suffix(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(Error::ShapeMismatch(format!(
                "add_suffix: bias shape {sb:?} is not a suffix of {sa:?}"
            )));
        }
        let tail = self.value(bias).len();
        let bias_data = self.value(bias).data();
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias_data[i % tail])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(
            value,
            Op::AddSuffix {
                a: a.0,
                bias: bias.0,
            },
        ))
    }

    /// Generalized contraction of two tensors; see [`ContractSpec`].
    pub fn contract(&mut self, a: NodeId, b: NodeId, spec: &ContractSpec) -> Result<NodeId> {
        let plan = plan_contract(self.value(a).shape(), self.value(b).shape(), spec)?;
        let data = contract_forward(self.value(a).data(), self.value(b).data(), &plan);
        let value = Tensor::new(plan.out_shape.clone(), data)?;
        Ok(self.push(
            value,
            Op::Contract {
                a: a.0,
                b: b.0,
                plan,
            },
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let x = self.value(a).data();
        let (outer, d, inner) = axis_split(&shape, axis);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * d * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..d {
                    let v = x[base + j * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::zero();
                for j in 0..d {
                    let e = (x[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..d {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { a: a.0, axis }))
    }

    /// Zero-mean/unit-variance normalization along `axis` followed by the
    /// affine `gain`/`shift` (both of length `shape[axis]`). Variance uses
    /// the 1/d convention; `eps` guards zero-variance slices.
    pub fn layer_norm(
        &mut self,
        a: NodeId,
        axis: usize,
        eps: f64,
        gain: NodeId,
        shift: NodeId,
    ) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "layer_norm axis {axis} out of range for shape {shape:?}"
            )));
        }
        let d = shape[axis];
        for (name, id) in [("gain", gain), ("shift", shift)] {
            let got = self.value(id).shape();
            if got != [d] {
                return Err(Error::ShapeMismatch(format!(
                    "layer_norm {name} must have shape [{d}], got {got:?}"
                )));
            }
        }
        let x = self.value(a).data();
        let gain_data = self.value(gain).data();
        let shift_data = self.value(shift).data();
        let (outer, _, inner) = axis_split(&shape, axis);
        let inv_d = T::one() / s::<T>(d as f64);
        let eps_t: T = s(eps);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * d * inner + i;
                let mut mean = T::zero();
                for j in 0..d {
                    mean = mean + x[base + j * inner];
                }
                mean = mean * inv_d;
                let mut var = T::zero();
                for j in 0..d {
                    let dv = x[base + j * inner] - mean;
                    var = var + dv * dv;
                }
                var = var * inv_d;
                let inv_std = (var + eps_t).sqrt().recip();
                for j in 0..d {
                    let xhat = (x[base + j * inner] - mean) * inv_std;
                    out[base + j * inner] = xhat * gain_data[j] + shift_data[j];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                a: a.0,
                gain: gain.0,
                shift: shift.0,
                axis,
                eps,
            },
        ))
    }

    /// Elementwise GeLU in the exact error-function form `x * Phi(x)`.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a).data();
        let mut data = vec![T::zero(); x.len()];
        let apply = |src: &[T], dst: &mut [T]| {
            for (d, &v) in dst.iter_mut().zip(src) {
                let xf = v.to_f64().expect("finite");
                *d = s(xf * normal_cdf(xf));
            }
        };
        if x.len() >= PAR_MIN_ELEMWISE {
            data.par_chunks_mut(ELEMWISE_CHUNK)
                .zip(x.par_chunks(ELEMWISE_CHUNK))
                .for_each(|(dst, src)| apply(src, dst));
        } else {
            apply(x, &mut data);
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { a: a.0 })
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let new_shape = new_shape.into();
        let count = checked_numel(&new_shape)?;
        if count != self.value(a).len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {new_shape:?} holds {count} values, node has {}",
                self.value(a).len()
            )));
        }
        let value = Tensor::new(new_shape, self.value(a).data().to_vec())?;
        Ok(self.push(value, Op::Reshape { a: a.0 }))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.value(a).shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || {
            for &p in perm {
                if p >= shape.len() || seen[p] {
                    seen = vec![];
                    break;
                }
                seen[p] = true;
            }
            seen.is_empty() || !seen.iter().all(|&x| x)
        } {
            return Err(Error::InvalidArgument(format!(
                "permute: {perm:?} is not a permutation of axes of {shape:?}"
            )));
        }
        let (pshape, pdata) = permute_copy(self.value(a).data(), shape, perm);
        let value = Tensor::new(pshape, pdata)?;
        Ok(self.push(
            value,
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.value(a).data() {
            acc = acc + v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let mut acc = T::zero();
        for &v in self.value(a).data() {
            acc = acc + v;
        }
        self.push(Tensor::scalar(acc / s(n as f64)), Op::MeanAll { a: a.0 })
    }

    fn loss_layout(
        &self,
        ens: NodeId,
        obs: &[f64],
        member_axis: usize,
    ) -> Result<(usize, usize, usize)> {
        let shape = self.value(ens).shape();
        if member_axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "member axis {member_axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, k, inner) = axis_split(shape, member_axis);
        if obs.len() != outer * inner {
            return Err(Error::ShapeMismatch(format!(
                "observations ({}) do not match ensemble cells ({})",
                obs.len(),
                outer * inner
            )));
        }
        Ok((outer, k, inner))
    }

    /// Mean Gaussian CRPS over all cells: per cell the ensemble mean and
    /// unbiased standard deviation parameterize N(mu, sigma^2) against the
    /// observation. Needs at least two members along `member_axis`.
    pub fn crps_gaussian_loss(
        &mut self,
        ens: NodeId,
        obs: &[f64],
        member_axis: usize,
    ) -> Result<NodeId> {
        let (outer, k, inner) = self.loss_layout(ens, obs, member_axis)?;
        if k < 2 {
            return Err(Error::DegenerateEnsemble(
                "gaussian CRPS loss needs at least two members".into(),
            ));
        }
        let x = self.value(ens).data();
        let mut total = 0.0f64;
        for o in 0..outer {
            for i in 0..inner {
                let base = o * k * inner + i;
                let (mean, std) = cell_mean_std(x, base, k, inner);
                let sigma = std.max(SIGMA_FLOOR);
                total += crps_gaussian(mean, sigma, obs[o * inner + i])?;
            }
        }
        let value = Tensor::scalar(s(total / obs.len() as f64));
        Ok(self.push(
            value,
            Op::GaussianCrps {
                ens: ens.0,
                obs: obs.to_vec(),
                member_axis,
            },
        ))
    }

    /// Mean kernel CRPS with spread penalty over all cells.
    pub fn crps_kernel_loss(
        &mut self,
        ens: NodeId,
        obs: &[f64],
        member_axis: usize,
        config: KernelCrpsConfig,
    ) -> Result<NodeId> {
        let (outer, k, inner) = self.loss_layout(ens, obs, member_axis)?;
        let x = self.value(ens).data();
        let mut members = vec![0.0f64; k];
        let mut total = 0.0f64;
        for o in 0..outer {
            for i in 0..inner {
                let base = o * k * inner + i;
                for (m, slot) in members.iter_mut().enumerate() {
                    *slot = x[base + m * inner].to_f64().expect("finite");
                }
                total += crps_kernel(&members, obs[o * inner + i], &config)?;
            }
        }
        let value = Tensor::scalar(s(total / obs.len() as f64));
        Ok(self.push(
            value,
            Op::KernelCrps {
                ens: ens.0,
                obs: obs.to_vec(),
                member_axis,
                config,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Consumes the tape: a second call
    /// fails with an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::InvalidArgument(
                "tape already consumed by a previous backward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { inner: grads })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                accumulate(grads, *a, self.nodes[*a].value.len(), |ga| {
                    for (slot, &gv) in ga.iter_mut().zip(g) {
                        *slot = *slot + gv;
                    }
                });
                accumulate(grads, *b, self.nodes[*b].value.len(), |gb| {
                    for (slot, &gv) in gb.iter_mut().zip(g) {
                        *slot = *slot + gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, self.nodes[*a].value.len(), |ga| {
                    for (slot, &gv) in ga.iter_mut().zip(g) {
                        *slot = *slot + gv;
                    }
                });
                accumulate(grads, *b, self.nodes[*b].value.len(), |gb| {
                    for (slot, &gv) in gb.iter_mut().zip(g) {
                        *slot = *slot - gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let bd = self.nodes[*b].value.data();
                accumulate(grads, *a, self.nodes[*a].value.len(), |ga| {
                    for ((slot, &gv), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *slot = *slot + gv * bv;
                    }
                });
                let ad = self.nodes[*a].value.data();
                accumulate(grads, *b, self.nodes[*b].value.len(), |gb| {
                    for ((slot, &gv), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *slot = *slot + gv * av;
                    }
                });
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                accumulate(grads, *a, self.nodes[*a].value.len(), |ga| {
                    for (slot, &gv) in ga.iter_mut().zip(g) {
                        *slot = *slot + gv * f;
                    }
                });
            }
            Op::Offset { a } => {
                accumulate(grads, *a, self.nodes[*a].value.len(), |ga| {
                    for (slot, &gv) in ga.iter_mut().zip(g) {
                        *slot = *slot + gv;
                    }
                });
            }
            Op::AddSuffix { a, bias } => {
                accumulate(grads, *a, self.nodes[*a].value.len(), |ga| {
                    for (slot, &gv) in ga.iter_mut().zip(g) {
                        *slot = *slot + gv;
                    }
                });
                let tail = self.nodes[*bias].value.len();
                accumulate(grads, *bias, tail, |gb| {
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % tail] = gb[i % tail] + gv;
                    }
                });
            }
            Op::Contract { a, b, plan } => {
                let ga = contract_backward_a(g, self.nodes[*b].value.data(), plan);
                accumulate(grads, *a, ga.len(), |slot| {
                    for (sv, gv) in slot.iter_mut().zip(ga.iter()) {
                        *sv = *sv + *gv;
                    }
                });
                let gb = contract_backward_b(g, self.nodes[*a].value.data(), plan);
                accumulate(grads, *b, gb.len(), |slot| {
                    for (sv, gv) in slot.iter_mut().zip(gb.iter()) {
                        *sv = *sv + *gv;
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let out = node.value.data();
                let shape = node.value.shape();
                let (outer, d, inner) = axis_split(shape, *axis);
                accumulate(grads, *a, out.len(), |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * d * inner + i;
                            let mut dot = T::zero();
                            for j in 0..d {
                                let f = base + j * inner;
                                dot = dot + g[f] * out[f];
                            }
                            for j in 0..d {
                                let f = base + j * inner;
                                ga[f] = ga[f] + out[f] * (g[f] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                a,
                gain,
                shift,
                axis,
                eps,
            } => {
                let x = self.nodes[*a].value.data();
                let shape = self.nodes[*a].value.shape();
                let gain_data = self.nodes[*gain].value.data();
                let (outer, d, inner) = axis_split(shape, *axis);
                let inv_d = T::one() / s::<T>(d as f64);
                let eps_t: T = s(*eps);

                let mut dx = vec![T::zero(); x.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dshift = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * d * inner + i;
                        let mut mean = T::zero();
                        for j in 0..d {
                            mean = mean + x[base + j * inner];
                        }
                        mean = mean * inv_d;
                        let mut var = T::zero();
                        for j in 0..d {
                            let dv = x[base + j * inner] - mean;
                            var = var + dv * dv;
                        }
                        var = var * inv_d;
                        let inv_std = (var + eps_t).sqrt().recip();

                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..d {
                            let f = base + j * inner;
                            xhat[j] = (x[f] - mean) * inv_std;
                            dgain[j] = dgain[j] + g[f] * xhat[j];
                            dshift[j] = dshift[j] + g[f];
                            dxhat[j] = g[f] * gain_data[j];
                            sum_dxhat = sum_dxhat + dxhat[j];
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
                        }
                        for j in 0..d {
                            dx[base + j * inner] = inv_std
                                * (dxhat[j] - sum_dxhat * inv_d - xhat[j] * sum_dxhat_xhat * inv_d);
                        }
                    }
                }
                accumulate(grads, *a, dx.len(), |slot| {
                    for (sv, gv) in slot.iter_mut().zip(dx.iter()) {
                        *sv = *sv + *gv;
                    }
                });
                accumulate(grads, *gain, d, |slot| {
                    for (sv, gv) in slot.iter_mut().zip(dgain.iter()) {
                        *sv = *sv + *gv;
                    }
                });
                accumulate(grads, *shift, d, |slot| {
                    for (sv, gv) in slot.iter_mut().zip(dshift.iter()) {
                        *sv = *sv + *gv;
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.nodes[*a].value.data();
                let apply = |slot: &mut [T], gv: &[T], xv: &[T]| {
                    for ((slot, &gv), &xv) in slot.iter_mut().zip(gv).zip(xv) {
                        let xf = xv.to_f64().expect("finite");
                        let d = normal_cdf(xf) + xf * normal_pdf(xf);
                        *slot = *slot + gv * s(d);
                    }
                };
                accumulate(grads, *a, x.len(), |ga| {
                    if x.len() >= PAR_MIN_ELEMWISE {
                        ga.par_chunks_mut(ELEMWISE_CHUNK)
                            .zip(g.par_chunks(ELEMWISE_CHUNK))
                            .zip(x.par_chunks(ELEMWISE_CHUNK))
                            .for_each(|((slot, gv), xv)| apply(slot, gv, xv));
                    } else {
                        apply(ga, g, x);
                    }
                });
            }
            Op::Reshape { a } => {
                accumulate(grads, *a, self.nodes[*a].value.len(), |ga| {
                    for (slot, &gv) in ga.iter_mut().zip(g) {
                        *slot = *slot + gv;
                    }
                });
            }
            Op::Permute { a, perm } => {
                let (_, back) = permute_copy(g, node.value.shape(), &invert_perm(perm));
                accumulate(grads, *a, back.len(), |ga| {
                    for (slot, gv) in ga.iter_mut().zip(back.iter()) {
                        *slot = *slot + *gv;
                    }
                });
            }
            Op::SumAll { a } => {
                let gv = g[0];
                accumulate(grads, *a, self.nodes[*a].value.len(), |ga| {
                    for slot in ga.iter_mut() {
                        *slot = *slot + gv;
                    }
                });
            }
            Op::MeanAll { a } => {
                let len = self.nodes[*a].value.len();
                let gv = g[0] / s(len as f64);
                accumulate(grads, *a, len, |ga| {
                    for slot in ga.iter_mut() {
                        *slot = *slot + gv;
                    }
                });
            }
            Op::GaussianCrps {
                ens,
                obs,
                member_axis,
            } => {
                let x = self.nodes[*ens].value.data();
                let shape = self.nodes[*ens].value.shape();
                let (outer, k, inner) = axis_split(shape, *member_axis);
                let scale = g[0].to_f64().expect("finite") / obs.len() as f64;
                accumulate(grads, *ens, x.len(), |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * k * inner + i;
                            let (mean, std) = cell_mean_std(x, base, k, inner);
                            let sigma = std.max(SIGMA_FLOOR);
                            let (dmu, dsigma) = crps_gaussian_grad(mean, sigma, obs[o * inner + i]);
                            for m in 0..k {
                                let f = base + m * inner;
                                let xm = x[f].to_f64().expect("finite");
                                let mut d = dmu / k as f64;
                                if std > SIGMA_FLOOR {
                                    d += dsigma * (xm - mean) / ((k - 1) as f64 * std);
                                }
                                ga[f] = ga[f] + s(scale * d);
                            }
                        }
                    }
                });
            }
            Op::KernelCrps {
                ens,
                obs,
                member_axis,
                config,
            } => {
                let x = self.nodes[*ens].value.data();
                let shape = self.nodes[*ens].value.shape();
                let (outer, k, inner) = axis_split(shape, *member_axis);
                let scale = g[0].to_f64().expect("finite") / obs.len() as f64;
                let mut members = vec![0.0f64; k];
                accumulate(grads, *ens, x.len(), |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * k * inner + i;
                            for (m, slot) in members.iter_mut().enumerate() {
                                *slot = x[base + m * inner].to_f64().expect("finite");
                            }
                            let cell_grad = crps_kernel_grad(&members, obs[o * inner + i], config)
                                .expect("validated at forward");
                            for (m, gv) in cell_grad.iter().enumerate() {
                                let f = base + m * inner;
                                ga[f] = ga[f] + s(scale * gv);
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn cell_mean_std<T: Scalar>(x: &[T], base: usize, k: usize, inner: usize) -> (f64, f64) {
    let mut mean = 0.0f64;
    for m in 0..k {
        mean += x[base + m * inner].to_f64().expect("finite");
    }
    mean /= k as f64;
    let mut var = 0.0f64;
    for m in 0..k {
        let d = x[base + m * inner].to_f64().expect("finite") - mean;
        var += d * d;
    }
    (mean, (var / (k - 1) as f64).sqrt())
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    idx: usize,
    len: usize,
    apply: impl FnOnce(&mut [T]),
) {
    let slot = grads[idx].get_or_insert_with(|| vec![T::zero(); len]);
    apply(slot.as_mut_slice());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn contract_identity_cases() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.leaf(tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.leaf(tensor(&[2], &[3.0, 5.0]));
        let out = tape
            .contract(eye, v, &ContractSpec::sum_axes(&[(1, 0)]))
            .unwrap();
        assert_eq!(tape.value(out).shape(), &[2]);
        assert_eq!(tape.value(out).data(), &[3.0, 5.0]);

        let a = tape.leaf(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye2 = tape.leaf(tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let out = tape
            .contract(a, eye2, &ContractSpec::sum_axes(&[(1, 0)]))
            .unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn contract_matches_hand_product() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(tensor(&[2, 1], &[5.0, 6.0]));
        let out = tape
            .contract(a, b, &ContractSpec::sum_axes(&[(1, 0)]))
            .unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 1]);
        assert_eq!(tape.value(out).data(), &[17.0, 39.0]);
    }

    #[test]
    fn contract_full_reduction_yields_a_scalar() {
        // Dot product: every axis is summed away.
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(tensor(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.leaf(tensor(&[3], &[4.0, 5.0, 6.0]));
        let out = tape
            .contract(a, b, &ContractSpec::sum_axes(&[(0, 0)]))
            .unwrap();
        assert_eq!(tape.value(out).shape(), &[1]);
        assert_eq!(tape.value(out).data(), &[32.0]);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shared_leaf_accumulates_gradients_from_all_uses() {
        // One leaf consumed by two ops: contributions must add.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(tensor(&[2], &[3.0, -1.0]));
        let doubled = tape.scale(x, 2.0);
        let sum = tape.add(x, doubled).unwrap(); // 3x
        let loss = tape.sum_all(sum);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn contract_rejects_mismatched_extents() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![4, 2]));
        let err = tape
            .contract(a, b, &ContractSpec::sum_axes(&[(1, 0)]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("a axis 1") && msg.contains("b axis 0"),
            "{msg}"
        );
    }

    #[test]
    fn batched_contract_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (bs, hn, k, f) = (2usize, 3usize, 4usize, 5usize);
        let q = Tensor::<f64>::from_fn([bs, hn, k, f], |_| rng.random_range(-1.0..1.0));
        let v = Tensor::<f64>::from_fn([bs, hn, k, f], |_| rng.random_range(-1.0..1.0));

        let mut tape = Tape::new();
        let qi = tape.leaf(q.clone());
        let vi = tape.leaf(v.clone());
        // scores[b,h,i,j] = sum_f q[b,h,i,f] v[b,h,j,f]
        let spec = ContractSpec::sum_axes(&[(3, 3)]).with_batch(&[(0, 0), (1, 1)]);
        let out = tape.contract(qi, vi, &spec).unwrap();
        assert_eq!(tape.value(out).shape(), &[bs, hn, k, k]);
        for b in 0..bs {
            for h in 0..hn {
                for i in 0..k {
                    for j in 0..k {
                        let mut want = 0.0;
                        for x in 0..f {
                            want += q.at(&[b, h, i, x]) * v.at(&[b, h, j, x]);
                        }
                        let got = tape.value(out).at(&[b, h, i, j]);
                        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn contract_is_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a1 = Tensor::<f64>::from_fn([3, 4], |_| rng.random_range(-2.0..2.0));
        let a2 = Tensor::<f64>::from_fn([3, 4], |_| rng.random_range(-2.0..2.0));
        let b = Tensor::<f64>::from_fn([4, 2], |_| rng.random_range(-2.0..2.0));
        let spec = ContractSpec::sum_axes(&[(1, 0)]);

        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let bi = tape.leaf(b.clone());
            let out = tape.contract(xi, bi, &spec).unwrap();
            tape.value(out).data().to_vec()
        };
        let sum = Tensor::new(
            vec![3, 4],
            a1.data()
                .iter()
                .zip(a2.data())
                .map(|(x, y)| x + y)
                .collect(),
        )
        .unwrap();
        let lhs = run(&sum);
        let rhs: Vec<f64> = run(&a1).iter().zip(run(&a2)).map(|(x, y)| x + y).collect();
        for (l, r) in lhs.iter().zip(rhs) {
            assert!((l - r).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_hand_values_and_shift_invariance() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(tensor(&[3], &[0.0, 0.0, 0.0]));
        let sm = tape.softmax(x, 0).unwrap();
        for &v in tape.value(sm).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x = tape.leaf(tensor(&[2], &[0.0, 3.0f64.ln()]));
        let sm = tape.softmax(x, 0).unwrap();
        assert!((tape.value(sm).data()[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(sm).data()[1] - 0.75).abs() < 1e-12);

        let raw = [0.3, -1.0, 2.0, 0.7];
        let shifted: Vec<f64> = raw.iter().map(|v| v + 123.0).collect();
        let a = tape.leaf(tensor(&[4], &raw));
        let b = tape.leaf(tensor(&[4], &shifted));
        let sa = tape.softmax(a, 0).unwrap();
        let sb = tape.softmax(b, 0).unwrap();
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(tape.softmax(a, 1).is_err());
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.leaf(Tensor::filled(vec![3], 1.0));
        let zeros = tape.leaf(Tensor::zeros(vec![3]));

        // Constant slice maps to zero through the epsilon guard.
        let x = tape.leaf(tensor(&[3], &[5.0, 5.0, 5.0]));
        let out = tape.layer_norm(x, 0, 1e-5, ones, zeros).unwrap();
        for &v in tape.value(out).data() {
            assert_eq!(v, 0.0);
        }

        // Already standardized input passes through as eps -> 0.
        let ones2 = tape.leaf(Tensor::filled(vec![2], 1.0));
        let zeros2 = tape.leaf(Tensor::zeros(vec![2]));
        let x = tape.leaf(tensor(&[2], &[1.0, -1.0]));
        let out = tape.layer_norm(x, 0, 1e-12, ones2, zeros2).unwrap();
        assert!((tape.value(out).data()[0] - 1.0).abs() < 1e-9);
        assert!((tape.value(out).data()[1] + 1.0).abs() < 1e-9);

        // Zero gain broadcasts the shift.
        let zero_gain = tape.leaf(Tensor::zeros(vec![2]));
        let shift = tape.leaf(tensor(&[2], &[0.5, -0.5]));
        let x = tape.leaf(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.layer_norm(x, 1, 1e-5, zero_gain, shift).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::from_fn([4, 16], |_| rng.random_range(-10.0..10.0));
        let mut tape = Tape::new();
        let ones = tape.leaf(Tensor::filled(vec![16], 1.0));
        let zeros = tape.leaf(Tensor::zeros(vec![16]));
        let xi = tape.leaf(x);
        let out = tape.layer_norm(xi, 1, 1e-5, ones, zeros).unwrap();
        let d = tape.value(out).data();
        for row in 0..4 {
            let slice = &d[row * 16..(row + 1) * 16];
            let mean: f64 = slice.iter().sum::<f64>() / 16.0;
            let var: f64 = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn gelu_hand_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(tensor(&[3], &[0.0, 1.0, -10.0]));
        let out = tape.gelu(x);
        let d = tape.value(out).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.841345).abs() < 1e-6, "{}", d[1]);
        assert!(d[2].abs() < 1e-8, "{}", d[2]);
    }

    #[test]
    fn backward_trivial_cases() {
        // loss = sum(x) -> gradient of ones.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(tensor(&[3], &[4.0, -2.0, 7.0]));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        // loss = sum(x^2) at [1,2] -> [2,4].
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(tensor(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_guards() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(tensor(&[2], &[1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"), "{err}");

        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(err.to_string().contains("consumed"), "{err}");
    }

    /// Finite-difference check of one op composed into a scalar loss.
    fn check_op(
        name: &str,
        shapes: &[Vec<usize>],
        build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|sh| Tensor::from_fn(sh.clone(), |_| rng.random_range(-1.5..1.5)))
            .collect();

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();

        for (pi, input) in inputs.iter().enumerate() {
            let analytic = grads.get(ids[pi]).unwrap();
            let numeric = gradcheck::central_diff(
                |x| {
                    let mut t = Tape::new();
                    let mut ids2 = Vec::new();
                    for (qi, inp) in inputs.iter().enumerate() {
                        let tensor = if qi == pi {
                            Tensor::new(inp.shape().to_vec(), x.to_vec()).unwrap()
                        } else {
                            inp.clone()
                        };
                        ids2.push(t.leaf(tensor));
                    }
                    let l = build(&mut t, &ids2);
                    t.value(l).data()[0]
                },
                input.data(),
                1e-5,
            );
            let err = gradcheck::max_rel_err(analytic, &numeric);
            assert!(err < 1e-3, "{name} input {pi}: rel err {err}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_per_op() {
        check_op(
            "contract",
            &[vec![3, 4], vec![4, 2]],
            |t, ids| {
                let c = t
                    .contract(ids[0], ids[1], &ContractSpec::sum_axes(&[(1, 0)]))
                    .unwrap();
                t.sum_all(c)
            },
            101,
        );
        check_op(
            "batched contract",
            &[vec![2, 2, 3, 4], vec![2, 2, 5, 4]],
            |t, ids| {
                let spec = ContractSpec::sum_axes(&[(3, 3)]).with_batch(&[(0, 0), (1, 1)]);
                let c = t.contract(ids[0], ids[1], &spec).unwrap();
                let sq = t.mul(c, c).unwrap();
                t.sum_all(sq)
            },
            102,
        );
        check_op(
            "softmax",
            &[vec![2, 5]],
            |t, ids| {
                let sm = t.softmax(ids[0], 1).unwrap();
                let w = t.mul(sm, sm).unwrap();
                t.sum_all(w)
            },
            103,
        );
        check_op(
            "layer_norm",
            &[vec![3, 6], vec![6], vec![6]],
            |t, ids| {
                let ln = t.layer_norm(ids[0], 1, 1e-5, ids[1], ids[2]).unwrap();
                let sq = t.mul(ln, ln).unwrap();
                t.sum_all(sq)
            },
            104,
        );
        check_op(
            "gelu",
            &[vec![7]],
            |t, ids| {
                let gl = t.gelu(ids[0]);
                t.sum_all(gl)
            },
            105,
        );
        check_op(
            "elementwise and suffix bias",
            &[vec![2, 3], vec![2, 3], vec![3]],
            |t, ids| {
                let m = t.mul(ids[0], ids[1]).unwrap();
                let sum = t.add(m, ids[1]).unwrap();
                let diff = t.sub(sum, ids[0]).unwrap();
                let b = t.add_suffix(diff, ids[2]).unwrap();
                let sc = t.scale(b, 1.7);
                let off = t.offset(sc, 0.3);
                t.mean_all(off)
            },
            106,
        );
        check_op(
            "reshape and permute",
            &[vec![2, 3, 4]],
            |t, ids| {
                let p = t.permute(ids[0], &[2, 0, 1]).unwrap();
                let r = t.reshape(p, vec![4, 6]).unwrap();
                let sq = t.mul(r, r).unwrap();
                t.sum_all(sq)
            },
            107,
        );
        check_op(
            "gaussian crps loss",
            &[vec![2, 5, 3]],
            |t, ids| {
                let obs = [0.4, -0.8, 0.1, 1.2, -0.2, 0.6];
                t.crps_gaussian_loss(ids[0], &obs, 1).unwrap()
            },
            108,
        );
        check_op(
            "kernel crps loss",
            &[vec![2, 5, 3]],
            |t, ids| {
                let obs = [0.43, -0.81, 0.12, 1.21, -0.23, 0.64];
                t.crps_kernel_loss(ids[0], &obs, 1, KernelCrpsConfig::ten_meter_wind())
                    .unwrap()
            },
            109,
        );
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one(
                values in proptest::collection::vec(-500.0f64..500.0, 1..24),
            ) {
                let mut tape = Tape::<f64>::new();
                let n = values.len();
                let x = tape.leaf(Tensor::new(vec![n], values).unwrap());
                let sm = tape.softmax(x, 0).unwrap();
                let sum: f64 = tape.value(sm).data().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
                // Entries can underflow to exactly zero for huge gaps.
                prop_assert!(tape.value(sm).data().iter().all(|&v| v >= 0.0));
            }

            #[test]
            fn layer_norm_standardizes_random_slices(
                rows in 1usize..5,
                seed in 0u64..1000,
            ) {
                let d = 12usize;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::<f64>::from_fn(vec![rows, d], |_| rng.random_range(-30.0..30.0));
                let mut tape = Tape::new();
                let ones = tape.leaf(Tensor::filled(vec![d], 1.0));
                let zeros = tape.leaf(Tensor::zeros(vec![d]));
                let xi = tape.leaf(x);
                let out = tape.layer_norm(xi, 1, 1e-5, ones, zeros).unwrap();
                for row in tape.value(out).data().chunks(d) {
                    let mean: f64 = row.iter().sum::<f64>() / d as f64;
                    let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    prop_assert!(mean.abs() < 1e-6);
                    prop_assert!((var - 1.0).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn loss_ops_validate_shapes() {
        let mut tape = Tape::<f64>::new();
        let ens = tape.leaf(Tensor::zeros(vec![2, 4, 3]));
        assert!(tape.crps_gaussian_loss(ens, &[0.0; 5], 1).is_err());
        assert!(tape.crps_gaussian_loss(ens, &[0.0; 6], 4).is_err());
        let single = tape.leaf(Tensor::zeros(vec![2, 1, 3]));
        assert!(tape.crps_gaussian_loss(single, &[0.0; 6], 1).is_err());
    }
}
