//! Zero-padded cross-correlation over 1, 2 or 3 spatial dimensions, lowered to
//! im2col + GEMM, and nearest-neighbour 2x upsampling.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Number of spatial dimensions: 1, 2 or 3.
    pub dims: usize,
}

impl ConvSpec {
    pub fn new(dims: usize, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dims,
        }
    }

    pub fn conv1d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(1, in_channels, out_channels, kernel, stride, padding)
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(2, in_channels, out_channels, kernel, stride, padding)
    }

    pub fn conv3d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(3, in_channels, out_channels, kernel, stride, padding)
    }

    /// `floor((in + 2·padding − kernel)/stride) + 1`, which must be ≥ 1.
    pub fn output_size(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return Err(Error::InvalidShape(format!(
                "conv with kernel {} stride {} padding {} cannot cover input size {input}",
                self.kernel, self.stride, self.padding
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend(std::iter::repeat(self.kernel).take(self.dims));
        s
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.pow(self.dims as u32)
    }

    fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dims)
            || self.in_channels == 0
            || self.out_channels == 0
            || self.kernel == 0
            || self.stride == 0
        {
            return Err(Error::InvalidShape(format!("invalid conv spec {self:?}")));
        }
        Ok(())
    }
}

/// Spatial extents padded to three axes (missing leading axes have size 1,
/// kernel 1, stride 1 and no padding).
#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Geometry {
    fn new(spec: &ConvSpec, shape: &[usize]) -> Result<Self> {
        let mut g = Geometry {
            batch: shape[0],
            channels: shape[1],
            input: [1; 3],
            output: [1; 3],
            kernel: [1; 3],
            stride: [1; 3],
            pad: [0; 3],
        };
        for i in 0..spec.dims {
            let ax = 3 - spec.dims + i;
            g.input[ax] = shape[2 + i];
            g.kernel[ax] = spec.kernel;
            g.stride[ax] = spec.stride;
            g.pad[ax] = spec.padding;
            g.output[ax] = spec.output_size(shape[2 + i])?;
        }
        Ok(g)
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    /// Input index along `ax` read by output position `o` at kernel tap `k`.
    #[inline]
    fn source(&self, ax: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride[ax] + k) as isize - self.pad[ax] as isize;
        (i >= 0 && (i as usize) < self.input[ax]).then_some(i as usize)
    }

    /// Visit every (column-matrix offset, input offset) pair of one sample.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [_, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let l = self.out_len();
        for c in 0..self.channels {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((c * kd + kz) * kh + ky) * kw + kx;
                        let row_base = row * l;
                        for oz in 0..od {
                            let Some(iz) = self.source(0, oz, kz) else { continue };
                            for oy in 0..oh {
                                let Some(iy) = self.source(1, oy, ky) else { continue };
                                let in_base = ((c * self.input[0] + iz) * ih + iy) * iw;
                                let col_base = row_base + (oz * oh + oy) * ow;
                                for ox in 0..ow {
                                    if let Some(ix) = self.source(2, ox, kx) {
                                        f(col_base + ox, in_base + ix);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut col = vec![T::zero(); self.rows() * self.out_len()];
        self.for_each_tap(|c, i| col[c] = x[i]);
        col
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        self.for_each_tap(|c, i| dx[i] = dx[i] + col[c]);
    }

    fn columns<'a, T: Scalar>(&self, x: &'a [T]) -> Cow<'a, [T]> {
        if self.is_pointwise() {
            Cow::Borrowed(x)
        } else {
            Cow::Owned(self.im2col(x))
        }
    }
}

/// Cross-correlation of `input` `[N, C, spatial...]` with `weight`
/// `[out, in, k...]`, plus an optional per-output-channel `bias`.
pub fn conv<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let shape = input.shape();
    if shape.len() != spec.dims + 2 || shape[1] != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv input",
            lhs: shape.to_vec(),
            rhs: vec![spec.in_channels],
        });
    }
    if weight.shape() != spec.weight_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv weight",
            lhs: weight.shape().to_vec(),
            rhs: spec.weight_shape(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::ShapeMismatch {
                op: "conv bias",
                lhs: b.shape().to_vec(),
                rhs: vec![spec.out_channels],
            });
        }
    }

    let g = Geometry::new(spec, shape)?;
    let (n, oc) = (g.batch, spec.out_channels);
    let (in_len, out_len, rows) = (g.channels * g.in_len(), g.out_len(), g.rows());
    let x = input.data();
    let w = weight.data();
    let mut y = vec![T::zero(); n * oc * out_len];
    for s in 0..n {
        let col = g.columns(&x[s * in_len..(s + 1) * in_len]);
        let ys = &mut y[s * oc * out_len..(s + 1) * oc * out_len];
        T::gemm(oc, rows, out_len, w, false, &col, false, ys, false);
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                ys[o * out_len..(o + 1) * out_len].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }

    let mut out_shape = vec![n, oc];
    out_shape.extend_from_slice(&g.output[3 - spec.dims..]);

    let backward = Box::new(move |dy: &[T], inputs: &[Tensor<T>]| {
        let (x, w) = (&inputs[0], &inputs[1]);
        let xd = x.data();
        let wd = w.data();
        let mut dx = x.requires_grad().then(|| vec![T::zero(); xd.len()]);
        let mut dw = w.requires_grad().then(|| vec![T::zero(); wd.len()]);
        let mut dcol = vec![T::zero(); rows * out_len];
        for s in 0..n {
            let dys = &dy[s * oc * out_len..(s + 1) * oc * out_len];
            if let Some(dw) = dw.as_mut() {
                let col = g.columns(&xd[s * in_len..(s + 1) * in_len]);
                T::gemm(oc, out_len, rows, dys, false, &col, true, dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                if g.is_pointwise() {
                    T::gemm(rows, oc, out_len, wd, true, dys, false, dxs, true);
                } else {
                    T::gemm(rows, oc, out_len, wd, true, dys, false, &mut dcol, false);
                    g.col2im(&dcol, dxs);
                }
            }
        }
        let mut grads = vec![dx, dw];
        if inputs.len() == 3 {
            let db = inputs[2].requires_grad().then(|| {
                let mut db = vec![T::zero(); oc];
                for s in 0..n {
                    for (o, acc) in db.iter_mut().enumerate() {
                        let start = (s * oc + o) * out_len;
                        *acc = dy[start..start + out_len].iter().fold(*acc, |a, &v| a + v);
                    }
                }
                db
            });
            grads.push(db);
        }
        grads
    });
    let inputs: Vec<&Tensor<T>> = match bias {
        Some(b) => vec![input, weight, b],
        None => vec![input, weight],
    };
    Ok(Tensor::from_op("conv", out_shape, y, &inputs, backward))
}

/// Nearest-neighbour upsampling by 2 along every spatial axis of
/// `[N, C, spatial...]` (1 to 3 spatial axes).
pub fn upsample2x<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = input.shape();
    let dims = shape.len().saturating_sub(2);
    if !(1..=3).contains(&dims) {
        return Err(Error::InvalidShape(format!(
            "upsample2x expects [N, C, spatial...] with 1-3 spatial axes, got {shape:?}"
        )));
    }
    let mut src = [1usize; 3];
    let mut scale = [1usize; 3];
    for i in 0..dims {
        src[3 - dims + i] = shape[2 + i];
        scale[3 - dims + i] = 2;
    }
    let dst = [src[0] * scale[0], src[1] * scale[1], src[2] * scale[2]];
    let planes = shape[0] * shape[1];
    let (src_len, dst_len) = (src.iter().product::<usize>(), dst.iter().product::<usize>());

    // Source offset (within a plane) of every destination element.
    let mut index = Vec::with_capacity(dst_len);
    for z in 0..dst[0] {
        for y in 0..dst[1] {
            for x in 0..dst[2] {
                index.push(((z / scale[0]) * src[1] + y / scale[1]) * src[2] + x / scale[2]);
            }
        }
    }
    let xd = input.data();
    let mut out = Vec::with_capacity(planes * dst_len);
    for p in 0..planes {
        let plane = &xd[p * src_len..(p + 1) * src_len];
        out.extend(index.iter().map(|&i| plane[i]));
    }
    let mut out_shape = shape[..2].to_vec();
    for i in 0..dims {
        out_shape.push(shape[2 + i] * 2);
    }
    let backward = Box::new(move |g: &[T], _: &[Tensor<T>]| {
        let mut dx = vec![T::zero(); planes * src_len];
        for p in 0..planes {
            let gp = &g[p * dst_len..(p + 1) * dst_len];
            let dp = &mut dx[p * src_len..(p + 1) * src_len];
            for (&i, &v) in index.iter().zip(gp) {
                dp[i] = dp[i] + v;
            }
        }
        vec![Some(dx)]
    });
    Ok(Tensor::from_op("upsample2x", out_shape, out, &[input], backward))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    /// Direct nested-loop 2D cross-correlation.
    fn direct2d(x: &[f64], n: usize, c: usize, h: usize, w: usize, wt: &[f64], spec: &ConvSpec) -> Vec<f64> {
        let (k, s, p, o) = (spec.kernel, spec.stride, spec.padding as isize, spec.out_channels);
        let (oh, ow) = (spec.output_size(h).unwrap(), spec.output_size(w).unwrap());
        let mut y = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let yy = (i * s + ky) as isize - p;
                                    let xx = (j * s + kx) as isize - p;
                                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    acc += x[((b * c + ic) * h + yy as usize) * w + xx as usize]
                                        * wt[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        y[((b * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        y
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 1.0).collect()
    }

    #[test]
    fn identity_pointwise_kernel() {
        let spec = ConvSpec::conv2d(2, 2, 1, 1, 0);
        let x = Tensor::<f64>::from_f64(&[1, 2, 3, 3], &seq(18, 0.1)).unwrap();
        let w = Tensor::from_f64(&[2, 2, 1, 1], &[1., 0., 0., 1.]).unwrap();
        let y = conv(&x, &spec, &w, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_3x3_on_ones() {
        let spec = ConvSpec::conv2d(1, 1, 3, 1, 1);
        let x = Tensor::<f64>::ones(&[1, 1, 4, 4]).unwrap();
        let w = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = conv(&x, &spec, &w, Some(&b)).unwrap();
        let d = y.data();
        assert_eq!(d[0], 4.0);
        assert_eq!(d[3], 4.0);
        assert_eq!(d[15], 4.0);
        assert_eq!(d[5], 9.0);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn stride_two_pyramid_sizes() {
        let mut size = 64;
        let mut seen = vec![];
        for _ in 0..5 {
            size = ConvSpec::conv2d(1, 1, 3, 2, 1).output_size(size).unwrap();
            seen.push(size);
        }
        assert_eq!(seen, vec![32, 16, 8, 4, 2]);
    }

    #[test]
    fn matches_direct_loops() {
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (2, 2, 0), (3, 1, 0), (1, 1, 0)] {
            let spec = ConvSpec::conv2d(3, 4, k, s, p);
            let xv = seq(2 * 3 * 7 * 6, 0.09);
            let wv = seq(4 * 3 * k * k, 0.07);
            let x = Tensor::<f64>::from_f64(&[2, 3, 7, 6], &xv).unwrap();
            let w = Tensor::from_f64(&spec.weight_shape(), &wv).unwrap();
            let y = conv(&x, &spec, &w, None).unwrap();
            let expect = direct2d(&xv, 2, 3, 7, 6, &wv, &spec);
            assert_eq!(y.data().len(), expect.len());
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "k{k} s{s} p{p}");
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let spec = ConvSpec::conv2d(3, 4, 3, 1, 1);
        let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]).unwrap();
        let w = Tensor::zeros(&spec.weight_shape()).unwrap();
        assert!(conv(&x, &spec, &w, None).is_err());
        let x = Tensor::<f64>::zeros(&[1, 3, 5, 5]).unwrap();
        let bad_w = Tensor::zeros(&[4, 3, 2, 2]).unwrap();
        assert!(conv(&x, &spec, &bad_w, None).is_err());
        let tiny = Tensor::<f64>::zeros(&[1, 3, 1, 1]).unwrap();
        let spec0 = ConvSpec::conv2d(3, 4, 3, 1, 0);
        assert!(conv(&tiny, &spec0, &Tensor::zeros(&spec0.weight_shape()).unwrap(), None).is_err());
    }

    #[test]
    fn conv1d_and_conv3d_shapes() {
        let s1 = ConvSpec::conv1d(5, 5, 3, 1, 1);
        let x = Tensor::<f64>::ones(&[2, 5, 9]).unwrap();
        let y = conv(&x, &s1, &Tensor::ones(&s1.weight_shape()).unwrap(), None).unwrap();
        assert_eq!(y.shape(), &[2, 5, 9]);
        assert_eq!(y.data()[0], 10.0);
        assert_eq!(y.data()[1], 15.0);
        let s3 = ConvSpec::conv3d(2, 3, 3, 1, 1);
        let v = Tensor::<f64>::ones(&[1, 2, 4, 4, 4]).unwrap();
        let y = conv(&v, &s3, &Tensor::ones(&s3.weight_shape()).unwrap(), None).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4, 4]);
        // interior voxel sees 27 taps per input channel
        assert_eq!(y.data()[(1 * 4 + 1) * 4 + 1], 54.0);
        assert_eq!(y.data()[0], 16.0);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let y = upsample2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let ones = Tensor::<f64>::ones(&[2, 3, 3, 5]).unwrap();
        assert_eq!(upsample2x(&ones).unwrap().sum().item(), 4.0 * 90.0);
        let v = Tensor::<f64>::ones(&[1, 1, 2, 2, 2]).unwrap();
        assert_eq!(upsample2x(&v).unwrap().shape(), &[1, 1, 4, 4, 4]);
    }

    #[test]
    fn upsample_gradient_counts_replicas() {
        let x = Tensor::parameter(&[1, 2, 3, 3], seq(18, 0.1)).unwrap();
        let g = backward(&upsample2x(&x).unwrap().sum()).unwrap();
        assert!(g.get(&x).unwrap().data().iter().all(|&v| v == 4.0));
    }
}
