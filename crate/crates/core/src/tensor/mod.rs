//! Dense row-major tensors and the reverse-mode engine built on them.
//!
//! The engine records exactly the differentiable operations the
//! postprocessing model needs on a single-use [`tape::Tape`] and plays them
//! back in reverse for gradients. Values are generic over `f32`/`f64`;
//! training runs in 32-bit while gradient checks rerun the same graph in
//! 64-bit.

mod adam;
mod tape;

pub use adam::{adam_step, AdamState};
pub use tape::{ContractSpec, Gradients, NodeId, Tape};

use crate::error::{Error, Result};
use num_traits::Float;

/// Floating scalar usable by the engine.
pub trait Scalar: Float + Send + Sync + std::fmt::Debug + 'static {}
impl<T: Float + Send + Sync + std::fmt::Debug + 'static> Scalar for T {}

/// Convert a finite `f64` constant into the working precision.
#[inline]
pub(crate) fn s<T: Scalar>(x: f64) -> T {
    T::from(x).expect("f64 constant representable")
}

/// A dense value: row-major data plus its shape. Extents are positive and
/// `product(shape) == data.len()` always holds. Tensors are immutable values
/// once built; the optional link into a computation record is the [`NodeId`]
/// returned when a tensor is placed on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let count = checked_numel(&shape)?;
        if count != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} values but {} were provided",
                shape,
                count,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Scalars are carried as shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value at a full multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[flat_index(index, &self.shape)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn convert<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).expect("float conversion"))
                .collect(),
        }
    }
}

/// Row-major strides of a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

pub(crate) fn flat_index(index: &[usize], shape: &[usize]) -> usize {
    debug_assert_eq!(index.len(), shape.len());
    let mut flat = 0usize;
    for (i, (&ix, &ext)) in index.iter().zip(shape.iter()).enumerate() {
        debug_assert!(ix < ext, "index {ix} out of range for axis {i} ({ext})");
        flat = flat * ext + ix;
    }
    flat
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    let mut n = 1usize;
    for (axis, &ext) in shape.iter().enumerate() {
        if ext == 0 {
            return Err(Error::ShapeMismatch(format!(
                "axis {axis} has zero extent in shape {shape:?}"
            )));
        }
        n = n.checked_mul(ext).ok_or_else(|| {
            Error::ShapeMismatch(format!("shape {shape:?} overflows the address space"))
        })?;
    }
    Ok(n)
}

/// Copy `data` (laid out as `shape`) into a new buffer whose axis `i` is the
/// source axis `perm[i]`. Returns the permuted shape and data. When the
/// last axis stays in place the copy moves whole contiguous runs; large
/// copies are split over threads on run boundaries, so the result does not
/// depend on the thread count.
pub(crate) fn permute_copy<T: Copy + Send + Sync>(
    data: &[T],
    shape: &[usize],
    perm: &[usize],
) -> (Vec<usize>, Vec<T>) {
    use rayon::prelude::*;

    debug_assert_eq!(perm.len(), shape.len());
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = data.len();
    if n == 0 || perm.is_empty() {
        return (out_shape, data.to_vec());
    }
    let src_strides = strides(shape);
    let step: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let ndim = out_shape.len();
    let run = if step[ndim - 1] == 1 {
        out_shape[ndim - 1]
    } else {
        1
    };
    let lead_dims = if run > 1 {
        &out_shape[..ndim - 1]
    } else {
        &out_shape[..]
    };
    let lead_steps = if run > 1 {
        &step[..ndim - 1]
    } else {
        &step[..]
    };

    let fill = |start_run: usize, chunk: &mut [T]| {
        let mut idx = vec![0usize; lead_dims.len()];
        let mut rem = start_run;
        let mut src = 0usize;
        for d in (0..lead_dims.len()).rev() {
            idx[d] = rem % lead_dims[d];
            rem /= lead_dims[d];
            src += idx[d] * lead_steps[d];
        }
        for run_chunk in chunk.chunks_mut(run) {
            run_chunk.copy_from_slice(&data[src..src + run]);
            for d in (0..lead_dims.len()).rev() {
                idx[d] += 1;
                src += lead_steps[d];
                if idx[d] < lead_dims[d] {
                    break;
                }
                src -= lead_steps[d] * lead_dims[d];
                idx[d] = 0;
            }
        }
    };

    let mut out = vec![data[0]; n];
    let runs_total = n / run;
    if n >= (1 << 16) && runs_total >= 2 {
        let tasks = rayon::current_num_threads().max(1) * 4;
        let runs_per_task = runs_total.div_ceil(tasks).max(1);
        out.par_chunks_mut(runs_per_task * run)
            .enumerate()
            .for_each(|(ti, chunk)| fill(ti * runs_per_task, chunk));
    } else {
        fill(0, &mut out);
    }
    (out_shape, out)
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
