//! Training losses: pixel L1, frozen-feature distance, SSIM, edge-map shape
//! loss, least-squares adversarial loss and their weighted sum.

use crate::error::{Error, Result};
use crate::model::{Discriminator, Synthesis};
use crate::nn::{conv, ConvLayer, ConvSpec, ParamStore};
use crate::tensor::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// SSIM.
    pub alpha: f64,
    /// Feature.
    pub beta: f64,
    /// Shape.
    pub gamma: f64,
    /// Adversarial.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 5.0,
            gamma: 10.0,
            lambda: 0.5,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        lambda: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Generator loss terms, their weighted total and the discriminator loss.
#[derive(Debug, Clone)]
pub struct LossBreakdown<T: Scalar> {
    pub l_r: Tensor<T>,
    pub l_ssim: Tensor<T>,
    pub l_v: Tensor<T>,
    pub l_s: Tensor<T>,
    pub l_a: Tensor<T>,
    pub total: Tensor<T>,
    /// Trains the discriminator only; not part of `total`.
    pub l_d: Tensor<T>,
}

impl<T: Scalar> LossBreakdown<T> {
    /// `[L_R, L_SSIM, L_V, L_S, L_A, L_Total]`, the loss-log column order.
    pub fn values(&self) -> [f64; 6] {
        [&self.l_r, &self.l_ssim, &self.l_v, &self.l_s, &self.l_a, &self.total].map(|t| t.item().as_f64())
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite()) && self.l_d.is_finite()
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// Mean absolute difference.
pub fn color_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("color_loss", a, b)?;
    Ok(a.sub(b)?.abs().mean())
}

/// Frozen, seeded convolutional feature extractor for the perceptual loss.
#[derive(Debug, Clone)]
pub struct FeatureNet<T: Scalar> {
    layers: Vec<ConvLayer>,
    taps: Vec<usize>,
    store: ParamStore<T>,
}

impl<T: Scalar> FeatureNet<T> {
    pub const CHANNELS: [usize; 4] = [8, 16, 16, 32];
    pub const STRIDES: [usize; 4] = [1, 2, 1, 2];
    /// Activations after these layers (0-based) enter the loss.
    pub const TAPS: [usize; 2] = [1, 3];

    fn layout(store: &mut ParamStore<T>, rng: &mut SeededRng) -> Result<Vec<ConvLayer>> {
        let mut c = 3;
        let mut layers = Vec::new();
        for (i, (&out, &stride)) in Self::CHANNELS.iter().zip(&Self::STRIDES).enumerate() {
            layers.push(ConvLayer::new(store, &format!("feature.{i}"), ConvSpec::conv2d(c, out, 3, stride, 1), rng)?);
            c = out;
        }
        Ok(layers)
    }

    pub fn new(seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let layers = Self::layout(&mut store, &mut SeededRng::derived(seed, "feature-net"))?;
        Ok(FeatureNet {
            layers,
            taps: Self::TAPS.to_vec(),
            store: store.frozen(),
        })
    }

    /// Use externally supplied weights; names and shapes must match the
    /// seeded layout (`feature.{i}.weight`, `feature.{i}.bias`).
    pub fn from_store(weights: &ParamStore<T>) -> Result<Self> {
        let mut net = Self::new(0)?;
        if weights.len() != net.store.len() {
            return Err(Error::Config(format!(
                "feature net expects {} tensors, got {}",
                net.store.len(),
                weights.len()
            )));
        }
        let mut store = ParamStore::new();
        for (_, name, t) in net.store.iter() {
            let given = weights
                .find(name)
                .map(|id| weights.get(id))
                .ok_or_else(|| Error::Config(format!("feature net weights lack `{name}`")))?;
            if given.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "feature net weights",
                    lhs: given.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            store.push(name, given.clone());
        }
        net.store = store.frozen();
        Ok(net)
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Tapped activations.
    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut x = x.clone();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&self.store, &x)?.relu();
            if self.taps.contains(&i) {
                out.push(x.clone());
            }
        }
        Ok(out)
    }
}

/// Sum over tapped layers of the mean squared activation difference.
pub fn feature_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, net: &FeatureNet<T>) -> Result<Tensor<T>> {
    same_shape("feature_loss", a, b)?;
    let fa = net.features(a)?;
    let fb = net.features(b)?;
    let mut total: Option<Tensor<T>> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let term = x.sub(y)?.square().mean();
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.expect("feature net has taps"))
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean over every valid `window`×`window` patch, per channel:
/// `[N, C, H, W] → [N·C, 1, H−w+1, W−w+1]`.
fn box_filter<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let planes = x.reshape(&[s[0] * s[1], 1, s[2], s[3]])?;
    let spec = ConvSpec::conv2d(1, 1, window, 1, 0);
    let w = Tensor::full(&[1, 1, window, window], T::of(1.0 / (window * window) as f64))?;
    conv(&planes, &spec, &w, None)
}

/// SSIM with the default 7×7 uniform window and unit dynamic range.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ssim_with(a, b, SSIM_WINDOW, SSIM_C1, SSIM_C2)
}

/// Mean SSIM over all valid windows and channels of `[N, C, H, W]` images.
pub fn ssim_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, window: usize, c1: f64, c2: f64) -> Result<Tensor<T>> {
    same_shape("ssim", a, b)?;
    if window % 2 == 0 || window == 0 {
        return Err(Error::InvalidShape(format!("ssim window {window} must be odd")));
    }
    match *a.shape() {
        [_, _, h, w] if h >= window && w >= window => {}
        _ => {
            return Err(Error::InvalidShape(format!(
                "ssim needs [N, C, H, W] images of at least {window}×{window}, got {:?}",
                a.shape()
            )))
        }
    }
    let mu_a = box_filter(a, window)?;
    let mu_b = box_filter(b, window)?;
    let e_aa = box_filter(&a.mul(a)?, window)?;
    let e_bb = box_filter(&b.mul(b)?, window)?;
    let e_ab = box_filter(&a.mul(b)?, window)?;
    let mu_ab = mu_a.mul(&mu_b)?;
    let mu_aa = mu_a.mul(&mu_a)?;
    let mu_bb = mu_b.mul(&mu_b)?;
    let var_a = e_aa.sub(&mu_aa)?;
    let var_b = e_bb.sub(&mu_bb)?;
    let cov = e_ab.sub(&mu_ab)?;
    let num = mu_ab.mul_scalar(2.0).add_scalar(c1).mul(&cov.mul_scalar(2.0).add_scalar(c2))?;
    let den = mu_aa.add(&mu_bb)?.add_scalar(c1).mul(&var_a.add(&var_b)?.add_scalar(c2))?;
    Ok(num.div(&den)?.mean())
}

pub fn ssim_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(ssim(a, b)?.neg().add_scalar(1.0))
}

/// Horizontal and vertical 3×3 Sobel responses of `[N, 1, H, W]` with
/// replicated borders: `[N, 2, H, W]`.
pub fn sobel<T: Scalar>(gray: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w) = match *gray.shape() {
        [n, 1, h, w] => (n, h, w),
        _ => return Err(Error::InvalidShape(format!("sobel expects [N, 1, H, W], got {:?}", gray.shape()))),
    };
    // For each output pixel: (source offset, x weight, y weight) pairs.
    let taps = move |r: usize, c: usize| {
        let rr = [r.saturating_sub(1), r, (r + 1).min(h - 1)];
        let cc = [c.saturating_sub(1), c, (c + 1).min(w - 1)];
        let at = move |i: usize, j: usize| rr[i] * w + cc[j];
        [
            (at(0, 2), at(0, 0), 1.0),
            (at(1, 2), at(1, 0), 2.0),
            (at(2, 2), at(2, 0), 1.0),
            (at(2, 0), at(0, 0), 1.0),
            (at(2, 1), at(0, 1), 2.0),
            (at(2, 2), at(0, 2), 1.0),
        ]
    };
    let x = gray.data();
    let plane = h * w;
    let mut out = vec![T::zero(); n * 2 * plane];
    for img in 0..n {
        let src = &x[img * plane..(img + 1) * plane];
        for r in 0..h {
            for c in 0..w {
                let t = taps(r, c);
                let mut gx = T::zero();
                let mut gy = T::zero();
                for (k, &(pos, neg, wt)) in t.iter().enumerate() {
                    // Difference first so flat regions give exact zeros.
                    let d = (src[pos] - src[neg]) * T::of(wt);
                    if k < 3 {
                        gx = gx + d;
                    } else {
                        gy = gy + d;
                    }
                }
                out[img * 2 * plane + r * w + c] = gx;
                out[img * 2 * plane + plane + r * w + c] = gy;
            }
        }
    }
    let backward = Box::new(move |g: &[T], _: &[Tensor<T>]| {
        let mut dx = vec![T::zero(); n * plane];
        for img in 0..n {
            let d = &mut dx[img * plane..(img + 1) * plane];
            for r in 0..h {
                for c in 0..w {
                    let gx = g[img * 2 * plane + r * w + c];
                    let gy = g[img * 2 * plane + plane + r * w + c];
                    for (k, &(pos, neg, wt)) in taps(r, c).iter().enumerate() {
                        let gv = if k < 3 { gx } else { gy } * T::of(wt);
                        d[pos] = d[pos] + gv;
                        d[neg] = d[neg] - gv;
                    }
                }
            }
        }
        vec![Some(dx)]
    });
    Ok(Tensor::from_op("sobel", vec![n, 2, h, w], out, &[gray], backward))
}

/// Smoothing inside the gradient-magnitude square root; a power of two so
/// `√δ` is exact in both precisions.
const EDGE_DELTA: f64 = 1.0 / (1u64 << 40) as f64;

/// Sobel gradient magnitude of the channel-mean image, scaled per image by
/// `max(max magnitude, 1e-6)` into `[0, 1]`: `[N, C, H, W] → [N, 1, H, W]`.
pub fn edge_map<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    if image.ndim() != 4 {
        return Err(Error::InvalidShape(format!("edge_map expects [N, C, H, W], got {:?}", image.shape())));
    }
    let gray = image.mean_axes(&[1], true)?;
    let g = sobel(&gray)?;
    let mag = g
        .square()
        .sum_axes(&[1], true)?
        .add_scalar(EDGE_DELTA)
        .sqrt()
        .add_scalar(-EDGE_DELTA.sqrt());
    let peak = mag.max_axes(&[1, 2, 3], true)?.max_scalar(1e-6);
    mag.div(&peak)
}

/// Mean absolute difference of the two edge maps.
pub fn shape_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("shape_loss", a, b)?;
    color_loss(&edge_map(a)?, &edge_map(b)?)
}

/// Mean absolute difference of a predicted and a target segment map.
pub fn segment_loss<T: Scalar>(predicted: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("segment_loss", predicted, target)?;
    color_loss(predicted, target)
}

/// Least-squares GAN losses `(L_A, L_D)`.
///
/// `L_A = mean((D(fake) − 1)²)` is evaluated with frozen discriminator
/// parameters, so it only produces generator gradients.
/// `L_D = mean((D(real) − 1)²) + mean(D(fake)²)` sees `fake` detached, so it
/// only produces discriminator gradients.
pub fn adversarial_losses<T: Scalar>(
    real: &Tensor<T>,
    fake: &Tensor<T>,
    disc: &Discriminator,
    d_params: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    same_shape("adversarial_losses", real, fake)?;
    let l_a = disc.forward(&d_params.frozen(), fake)?.add_scalar(-1.0).square().mean();
    let d_real = disc.forward(d_params, real)?.add_scalar(-1.0).square().mean();
    let d_fake = disc.forward(d_params, &fake.detach())?.square().mean();
    Ok((l_a, d_real.add(&d_fake)?))
}

/// Everything [`total_loss`] needs besides the images.
pub struct LossContext<'a, T: Scalar> {
    pub weights: LossWeights,
    pub feature_net: &'a FeatureNet<T>,
    pub discriminator: &'a Discriminator,
    pub d_params: &'a ParamStore<T>,
}

/// `L_Total = L_R + α·L_SSIM + β·L_V + γ·L_S + λ·L_A` between a real view
/// (with its segment map) and a synthesis (image and segment heads).
pub fn total_loss<T: Scalar>(
    target: &Tensor<T>,
    target_segment: &Tensor<T>,
    synth: &Synthesis<T>,
    ctx: &LossContext<'_, T>,
) -> Result<LossBreakdown<T>> {
    let w = ctx.weights;
    w.validate()?;
    let l_r = color_loss(&synth.image, target)?;
    let l_ssim = ssim_loss(&synth.image, target)?;
    let l_v = feature_loss(&synth.image, target, ctx.feature_net)?;
    let l_s = segment_loss(&synth.segment, target_segment)?;
    let (l_a, l_d) = adversarial_losses(target, &synth.image, ctx.discriminator, ctx.d_params)?;
    let total = l_r
        .add(&l_ssim.mul_scalar(w.alpha))?
        .add(&l_v.mul_scalar(w.beta))?
        .add(&l_s.mul_scalar(w.gamma))?
        .add(&l_a.mul_scalar(w.lambda))?;
    Ok(LossBreakdown {
        l_r,
        l_ssim,
        l_v,
        l_s,
        l_a,
        total,
        l_d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Model};
    use crate::tensor::gradcheck::grad_check;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn color_loss_examples() {
        let a = t(&[2], &[0.2, 0.8]);
        assert_eq!(color_loss(&a, &a).unwrap().item(), 0.0);
        let l = color_loss(&a, &t(&[2], &[0.5, 0.4])).unwrap().item();
        assert!((l - 0.35).abs() < 1e-12);
        let ones = Tensor::<f64>::ones(&[3, 4]).unwrap();
        assert_eq!(color_loss(&ones, &Tensor::zeros(&[3, 4]).unwrap()).unwrap().item(), 1.0);
        assert!(color_loss(&a, &ones).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = random(&[2, 3, 12, 12], 1);
        let b = random(&[2, 3, 12, 12], 2);
        assert_eq!(ssim(&a, &a).unwrap().item(), 1.0);
        assert_eq!(ssim_loss(&a, &a).unwrap().item(), 0.0);
        assert_eq!(ssim(&a, &b).unwrap().item(), ssim(&b, &a).unwrap().item());
        let s = ssim(&a, &b).unwrap().item();
        assert!(s < 1.0 && s > -1.0);
        assert!(ssim_with(&a, &b, 4, SSIM_C1, SSIM_C2).is_err());
    }

    #[test]
    fn sobel_of_constant_is_zero() {
        let img = Tensor::<f64>::full(&[1, 3, 8, 8], 0.37).unwrap();
        assert!(edge_map(&img).unwrap().data().iter().all(|&v| v == 0.0));
        let img = Tensor::<f32>::full(&[1, 3, 8, 8], 0.37).unwrap();
        assert!(edge_map(&img).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_peaks_at_the_step() {
        let (h, w) = (6, 8);
        let v: Vec<f64> = (0..h * w).map(|i| if i % w >= 4 { 1.0 } else { 0.0 }).collect();
        let img = t(&[1, 1, h, w], &v);
        let e = edge_map(&img).unwrap();
        for r in 0..h {
            for c in 0..w {
                let x = e.data()[r * w + c];
                if c == 3 || c == 4 {
                    assert!((x - 1.0).abs() < 1e-9, "({r},{c}) = {x}");
                } else {
                    assert!(x.abs() < 1e-9, "({r},{c}) = {x}");
                }
            }
        }
    }

    #[test]
    fn edge_map_in_unit_range() {
        let e = edge_map(&random(&[2, 3, 10, 10], 9)).unwrap();
        assert!(e.data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        assert_eq!(e.shape(), &[2, 1, 10, 10]);
    }

    #[test]
    fn shape_loss_examples() {
        let a = random(&[1, 3, 8, 8], 3);
        assert_eq!(shape_loss(&a, &a).unwrap().item(), 0.0);
        let c1 = Tensor::<f64>::full(&[1, 3, 8, 8], 0.2).unwrap();
        let c2 = Tensor::<f64>::full(&[1, 3, 8, 8], 0.9).unwrap();
        assert_eq!(shape_loss(&c1, &c2).unwrap().item(), 0.0);
        let step: Vec<f64> = (0..3 * 64).map(|i| if i % 8 >= 4 { 1.0 } else { 0.0 }).collect();
        // Two step columns of value 1 out of 8.
        let l = shape_loss(&t(&[1, 3, 8, 8], &step), &c1).unwrap().item();
        assert!((l - 0.25).abs() < 1e-9, "{l}");
    }

    #[test]
    fn feature_loss_basics() {
        let net = FeatureNet::<f64>::new(4).unwrap();
        let a = random(&[1, 3, 16, 16], 1);
        let b = random(&[1, 3, 16, 16], 2);
        assert_eq!(feature_loss(&a, &a, &net).unwrap().item(), 0.0);
        let ab = feature_loss(&a, &b, &net).unwrap().item();
        assert_eq!(ab, feature_loss(&b, &a, &net).unwrap().item());
        assert!(ab > 0.0);
        assert!(!net.features(&a).unwrap()[0].requires_grad());
        let copy = FeatureNet::from_store(net.store()).unwrap();
        assert_eq!(feature_loss(&a, &b, &copy).unwrap().item(), ab);
        assert!(FeatureNet::<f64>::from_store(&ParamStore::new()).is_err());
    }

    fn constant_discriminator(value: f64) -> (Discriminator, ParamStore<f64>) {
        let (m, mut p) = Model::new::<f64>(&ModelConfig::micro(), 0).unwrap();
        let out = *m.discriminator.output_layer();
        let n = p.discriminator.get(out.weight).numel();
        p.discriminator.set(out.weight, vec![0.0; n]).unwrap();
        p.discriminator.set(out.bias, vec![value]).unwrap();
        (m.discriminator, p.discriminator)
    }

    #[test]
    fn lsgan_examples() {
        let real = random(&[1, 3, 16, 16], 1);
        let fake = random(&[1, 3, 16, 16], 2);
        let (d, p) = constant_discriminator(0.5);
        let (l_a, l_d) = adversarial_losses(&real, &fake, &d, &p).unwrap();
        assert_eq!(l_d.item(), 0.5);
        assert_eq!(l_a.item(), 0.25);
        let (d, p) = constant_discriminator(1.0);
        let (l_a, _) = adversarial_losses(&real, &fake, &d, &p).unwrap();
        assert_eq!(l_a.item(), 0.0);
    }

    #[test]
    fn total_loss_degenerate_weights_and_identity() {
        let img = random(&[1, 3, 16, 16], 5);
        let seg = edge_map(&img).unwrap();
        let net = FeatureNet::new(0).unwrap();
        let (d, p) = constant_discriminator(1.0);
        let synth = Synthesis {
            image: img.clone(),
            segment: seg.clone(),
        };
        let ctx = LossContext {
            weights: LossWeights::default(),
            feature_net: &net,
            discriminator: &d,
            d_params: &p,
        };
        assert_eq!(total_loss(&img, &seg, &synth, &ctx).unwrap().total.item(), 0.0);

        let other = Synthesis {
            image: random(&[1, 3, 16, 16], 6),
            segment: random(&[1, 1, 16, 16], 7),
        };
        let ctx = LossContext {
            weights: LossWeights::ZERO,
            ..ctx
        };
        let b = total_loss(&img, &seg, &other, &ctx).unwrap();
        assert_eq!(b.total.item(), b.l_r.item());
    }

    #[test]
    fn loss_gradients() {
        let net = FeatureNet::new(1).unwrap();
        for seed in 0..3 {
            let a = random(&[1, 3, 9, 9], seed);
            // Keep |a − b| ≥ 0.05 so no L1 kink lies within eps.
            let mut rng = SeededRng::new(seed + 100);
            let b: Vec<f64> = a
                .data()
                .iter()
                .map(|&x| {
                    let d = rng.uniform_range(0.05, 0.3);
                    if x > 0.5 { x - d } else { x + d }
                })
                .collect();
            let b = t(&[1, 3, 9, 9], &b);
            let checks: Vec<(&str, Box<dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>>)> = vec![
                ("color", Box::new(|x| color_loss(x, &b))),
                ("ssim", Box::new(|x| ssim(x, &b))),
                ("feature", Box::new(|x| feature_loss(x, &b, &net))),
                ("edge", Box::new(|x| Ok(edge_map(x)?.mul(&edge_map(&b)?)?.sum()))),
                ("shape", Box::new(|x| shape_loss(x, &b))),
            ];
            for (name, f) in &checks {
                let r = grad_check(f, &a, 1e-4, 1e-4).unwrap();
                assert!(r.pass, "{name} seed {seed}: {} at {} ({} vs {})", r.max_rel_err, r.worst_index, r.analytic[r.worst_index], r.numeric[r.worst_index]);
            }
        }
    }
}
