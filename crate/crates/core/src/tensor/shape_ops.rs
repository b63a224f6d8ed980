use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tensor<T> {
    /// Same values in row-major order under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let backward = Box::new(|g: &[T], _: &[Tensor<T>]| vec![Some(g.to_vec())]);
        Ok(Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), &[self], backward))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let n = self.ndim();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape(format!(
                "{perm:?} is not a permutation of {n} axes"
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let src = permute_offsets(&in_shape, perm);
        let x = self.data();
        let data = src.iter().map(|&s| x[s]).collect();
        let backward = Box::new(move |g: &[T], inputs: &[Tensor<T>]| {
            let mut d = vec![T::zero(); inputs[0].numel()];
            for (&s, &v) in src.iter().zip(g) {
                d[s] = v;
            }
            vec![Some(d)]
        });
        Ok(Tensor::from_op("permute", out_shape, data, &[self], backward))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let n = self.ndim();
        if a >= n || b >= n {
            return Err(Error::InvalidAxis { axis: a.max(b), ndim: n });
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }
}

/// Source offset (in the input) of every output element of a permutation.
fn permute_offsets(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let n = in_shape.len();
    let mut in_strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(in_shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn transpose_2d() {
        let a = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let t = a.transpose(0, 1).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn permute_backward_is_inverse_permutation() {
        let x = Tensor::parameter(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let w = Tensor::from_f64(&[4, 2, 3], &(0..24).map(f64::from).collect::<Vec<_>>()).unwrap();
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let g = backward(&y.mul(&w).unwrap().sum()).unwrap();
        // d/dx[i,j,k] = w[k,i,j]
        let gx = g.get(&x).unwrap().data();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(gx[i * 12 + j * 4 + k], (k * 6 + i * 3 + j) as f64);
                }
            }
        }
    }

    #[test]
    fn reshape_checks_element_count() {
        let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert!(a.reshape(&[3, 2]).is_ok());
        assert!(a.reshape(&[4, 2]).is_err());
        assert!(a.permute(&[0, 0]).is_err());
    }
}
