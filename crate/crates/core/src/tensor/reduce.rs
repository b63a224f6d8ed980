use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Reduce over `axes` (all axes when `None`), dropping the reduced axes.
/// A full reduction yields shape `[1]`.
pub fn reduce<T: Scalar>(op: ReduceOp, a: &Tensor<T>, axes: Option<&[usize]>) -> Result<Tensor<T>> {
    reduce_impl(op, a, axes, false)
}

struct Plan {
    out_shape: Vec<usize>,
    kept_shape: Vec<usize>,
    /// Output offset of each input element.
    offsets: Vec<usize>,
    count: usize,
}

fn plan(shape: &[usize], axes: Option<&[usize]>, keepdim: bool) -> Result<Plan> {
    let n = shape.len();
    let mut reduced = vec![false; n];
    match axes {
        None => reduced.iter_mut().for_each(|r| *r = true),
        Some(axes) => {
            for &ax in axes {
                if ax >= n {
                    return Err(Error::InvalidAxis { axis: ax, ndim: n });
                }
                reduced[ax] = true;
            }
        }
    }
    let kept_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let mut out_shape: Vec<usize> = if keepdim {
        kept_shape.clone()
    } else {
        shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect()
    };
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let count = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| r)
        .map(|(&d, _)| d)
        .product();

    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..n).rev() {
        if !reduced[i] {
            strides[i] = acc;
            acc *= shape[i];
        }
    }
    let total = numel(shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Plan {
        out_shape,
        kept_shape,
        offsets,
        count,
    })
}

fn reduce_impl<T: Scalar>(
    op: ReduceOp,
    a: &Tensor<T>,
    axes: Option<&[usize]>,
    keepdim: bool,
) -> Result<Tensor<T>> {
    let p = plan(a.shape(), axes, keepdim)?;
    let out_len = numel(&p.kept_shape);
    let x = a.data();
    let (name, data, argmax) = match op {
        ReduceOp::Sum | ReduceOp::Mean => {
            let mut acc = vec![T::zero(); out_len];
            for (&o, &v) in p.offsets.iter().zip(x) {
                acc[o] = acc[o] + v;
            }
            if op == ReduceOp::Mean {
                let c = T::of(p.count as f64);
                acc.iter_mut().for_each(|v| *v = *v / c);
                ("mean", acc, Vec::new())
            } else {
                ("sum", acc, Vec::new())
            }
        }
        ReduceOp::Max => {
            let mut best = vec![T::neg_infinity(); out_len];
            let mut arg = vec![usize::MAX; out_len];
            for (i, (&o, &v)) in p.offsets.iter().zip(x).enumerate() {
                if arg[o] == usize::MAX || v > best[o] {
                    best[o] = v;
                    arg[o] = i;
                }
            }
            ("max", best, arg)
        }
    };

    let offsets = p.offsets;
    let count = p.count;
    let backward = Box::new(move |g: &[T], inputs: &[Tensor<T>]| {
        let n_in = inputs[0].numel();
        let grad = match op {
            ReduceOp::Sum => offsets.iter().map(|&o| g[o]).collect(),
            ReduceOp::Mean => {
                let c = T::of(count as f64);
                offsets.iter().map(|&o| g[o] / c).collect()
            }
            ReduceOp::Max => {
                let mut d = vec![T::zero(); n_in];
                for (o, &i) in argmax.iter().enumerate() {
                    d[i] = d[i] + g[o];
                }
                d
            }
        };
        vec![Some(grad)]
    });
    Ok(Tensor::from_op(name, p.out_shape, data, &[a], backward))
}

impl<T: Scalar> Tensor<T> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<T> {
        reduce_impl(ReduceOp::Sum, self, None, false).expect("full reduction is always valid")
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Tensor<T> {
        reduce_impl(ReduceOp::Mean, self, None, false).expect("full reduction is always valid")
    }

    pub fn max_all(&self) -> Tensor<T> {
        reduce_impl(ReduceOp::Max, self, None, false).expect("full reduction is always valid")
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        reduce_impl(ReduceOp::Sum, self, Some(axes), keepdim)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        reduce_impl(ReduceOp::Mean, self, Some(axes), keepdim)
    }

    pub fn max_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        reduce_impl(ReduceOp::Max, self, Some(axes), keepdim)
    }
}
