//! Generator (2D encoder, token transformation, volume lift, rotation and
//! decoding) and the patch discriminator.

use crate::error::{Error, Result};
use crate::geometry::{rotate_volumes, rotation_between, Interp, Pose};
use crate::nn::{upsample2x, ConvLayer, ConvSpec, ParamStore};
use crate::tensor::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub encoder_channels: Vec<usize>,
    pub token_conv_layers: usize,
    pub volume_size: usize,
    pub volume_channels: usize,
    pub reference_pose: Pose,
    pub discriminator_channels: Vec<usize>,
    /// Hidden widths of the stride-2 2D convs that bring the intrinsic
    /// representation down to the volume resolution. The last conv of that
    /// stack always has `volume_size·volume_channels` outputs.
    pub lift_channels: Vec<usize>,
    /// One `{conv, relu, upsample2x}` block per entry, from the volume
    /// resolution up to the image size.
    pub decoder_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64×64 images, 16³ volume.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            encoder_channels: vec![16, 32, 64, 128],
            token_conv_layers: 3,
            volume_size: 16,
            volume_channels: 8,
            reference_pose: Pose::origin(),
            discriminator_channels: vec![16, 32, 64],
            lift_channels: vec![32],
            decoder_channels: vec![32, 16],
        }
    }

    /// 160×160 images with the five-layer encoder.
    pub fn paper() -> Self {
        ModelConfig {
            image_size: 160,
            encoder_channels: vec![16, 32, 64, 128, 256],
            token_conv_layers: 3,
            volume_size: 20,
            volume_channels: 8,
            reference_pose: Pose::origin(),
            discriminator_channels: vec![16, 32, 64],
            lift_channels: vec![32, 64],
            decoder_channels: vec![64, 32, 16],
        }
    }

    /// 32×32 images, 8³ volume: quick training runs.
    pub fn small() -> Self {
        ModelConfig {
            image_size: 32,
            encoder_channels: vec![8, 16, 32],
            token_conv_layers: 3,
            volume_size: 8,
            volume_channels: 4,
            reference_pose: Pose::origin(),
            discriminator_channels: vec![8, 16],
            lift_channels: vec![16],
            decoder_channels: vec![16, 8],
        }
    }

    /// 16×16 images, 4³ volume: small enough for finite differences over
    /// every parameter.
    pub fn micro() -> Self {
        ModelConfig {
            image_size: 16,
            encoder_channels: vec![4, 8],
            token_conv_layers: 2,
            volume_size: 4,
            volume_channels: 2,
            reference_pose: Pose::origin(),
            discriminator_channels: vec![4, 8],
            lift_channels: vec![4],
            decoder_channels: vec![4, 4],
        }
    }

    /// Spatial size after the encoder.
    pub fn feature_size(&self) -> usize {
        self.image_size >> self.encoder_channels.len()
    }

    /// Number of 2× steps between the volume and the image resolution.
    pub fn volume_levels(&self) -> usize {
        (self.image_size / self.volume_size.max(1)).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = |v: &[usize]| v.iter().all(|&c| c > 0);
        if self.encoder_channels.is_empty() || !positive(&self.encoder_channels) {
            return bad("encoder_channels must be a non-empty list of positive widths".into());
        }
        let s = self.image_size;
        let layers = self.encoder_channels.len();
        if s == 0 || s % (1 << layers) != 0 || s >> layers < 2 {
            return bad(format!(
                "image_size {s} must be divisible by 2^{layers} with at least 2 pixels left"
            ));
        }
        if self.token_conv_layers == 0 {
            return bad("token_conv_layers must be at least 1".into());
        }
        let d = self.volume_size;
        if d < 2 || s % d != 0 || !(s / d).is_power_of_two() || s == d {
            return bad(format!(
                "image_size {s} must be volume_size {d} times a power of two greater than 1"
            ));
        }
        if self.volume_channels == 0 {
            return bad("volume_channels must be positive".into());
        }
        let k = self.volume_levels();
        if self.lift_channels.len() != k - 1 || !positive(&self.lift_channels) {
            return bad(format!(
                "lift_channels needs {} positive entries for image_size {s} and volume_size {d}",
                k - 1
            ));
        }
        if self.decoder_channels.len() != k || !positive(&self.decoder_channels) {
            return bad(format!(
                "decoder_channels needs {k} positive entries for image_size {s} and volume_size {d}"
            ));
        }
        let dl = self.discriminator_channels.len();
        if dl == 0 || !positive(&self.discriminator_channels) || s % (1 << dl) != 0 {
            return bad(format!("discriminator_channels must be non-empty and divide image_size {s}"));
        }
        Ok(())
    }
}

/// `[N, C, H, W] → [N, C, H·W]`: one token per channel holding its
/// row-major spatial content.
pub fn features_to_tokens<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    match *f.shape() {
        [n, c, h, w] => f.reshape(&[n, c, h * w]),
        _ => Err(Error::InvalidShape(format!("expected [N, C, H, W], got {:?}", f.shape()))),
    }
}

/// Inverse of [`features_to_tokens`] for square maps.
pub fn tokens_to_features<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    match *t.shape() {
        [n, c, l] => {
            let s = (l as f64).sqrt().round() as usize;
            if s * s != l {
                return Err(Error::InvalidShape(format!("token length {l} is not a square")));
            }
            t.reshape(&[n, c, s, s])
        }
        _ => Err(Error::InvalidShape(format!("expected [N, C, L], got {:?}", t.shape()))),
    }
}

/// 1-D convolutions along the token axis, the token content acting as
/// channels; relu between layers. Shape preserving.
pub fn transform_tokens<T: Scalar>(layers: &[ConvLayer], p: &ParamStore<T>, tokens: &Tensor<T>) -> Result<Tensor<T>> {
    // [N, C, L] → [N, L, C] so C is the convolved (sequence) axis.
    let mut x = tokens.transpose(1, 2)?;
    for (i, layer) in layers.iter().enumerate() {
        x = layer.forward(p, &x)?;
        if i + 1 < layers.len() {
            x = x.relu();
        }
    }
    x.transpose(1, 2)
}

fn check_image<T: Scalar>(image: &Tensor<T>, size: usize) -> Result<()> {
    match *image.shape() {
        [_, 3, h, w] if h == size && w == size => Ok(()),
        _ => Err(Error::ShapeMismatch {
            op: "model input",
            lhs: image.shape().to_vec(),
            rhs: vec![0, 3, size, size],
        }),
    }
}

/// Output of the view generation module.
#[derive(Debug, Clone)]
pub struct Synthesis<T: Scalar> {
    /// `[N, 3, S, S]`, in (0, 1).
    pub image: Tensor<T>,
    /// `[N, 1, S, S]`, in (0, 1).
    pub segment: Tensor<T>,
}

/// Layer handles of the generator; the values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Generator {
    config: ModelConfig,
    encoder: Vec<ConvLayer>,
    tokens: Vec<ConvLayer>,
    refine: Vec<ConvLayer>,
    lift2d: Vec<ConvLayer>,
    lift3d: Vec<ConvLayer>,
    render3d: Vec<ConvLayer>,
    decoder: Vec<ConvLayer>,
    image_head: ConvLayer,
    segment_head: ConvLayer,
}

impl Generator {
    pub fn new<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut encoder = Vec::new();
        let mut c = 3;
        for (i, &out) in config.encoder_channels.iter().enumerate() {
            encoder.push(ConvLayer::new(store, &format!("encoder.{i}"), ConvSpec::conv2d(c, out, 3, 2, 1), rng)?);
            c = out;
        }
        let l = config.feature_size() * config.feature_size();
        let mut tokens = Vec::new();
        for i in 0..config.token_conv_layers {
            tokens.push(ConvLayer::new(store, &format!("tokens.{i}"), ConvSpec::conv1d(l, l, 3, 1, 1), rng)?);
        }
        let mut refine = Vec::new();
        let widths = config.encoder_channels.iter().rev().skip(1).copied().chain([3]);
        for (i, out) in widths.enumerate() {
            refine.push(ConvLayer::new(store, &format!("refine.{i}"), ConvSpec::conv2d(c, out, 3, 1, 1), rng)?);
            c = out;
        }
        let vc = config.volume_channels;
        let d = config.volume_size;
        let mut lift2d = Vec::new();
        for (i, out) in config.lift_channels.iter().copied().chain([vc * d]).enumerate() {
            lift2d.push(ConvLayer::new(store, &format!("lift2d.{i}"), ConvSpec::conv2d(c, out, 3, 2, 1), rng)?);
            c = out;
        }
        let mut lift3d = Vec::new();
        let mut render3d = Vec::new();
        for i in 0..2 {
            lift3d.push(ConvLayer::new(store, &format!("lift3d.{i}"), ConvSpec::conv3d(vc, vc, 3, 1, 1), rng)?);
        }
        for i in 0..2 {
            render3d.push(ConvLayer::new(store, &format!("render3d.{i}"), ConvSpec::conv3d(vc, vc, 3, 1, 1), rng)?);
        }
        let mut decoder = Vec::new();
        c = vc * d;
        for (i, &out) in config.decoder_channels.iter().enumerate() {
            decoder.push(ConvLayer::new(store, &format!("decoder.{i}"), ConvSpec::conv2d(c, out, 3, 1, 1), rng)?);
            c = out;
        }
        let image_head = ConvLayer::new(store, "head.image", ConvSpec::conv2d(c, 3, 3, 1, 1), rng)?;
        let segment_head = ConvLayer::new(store, "head.segment", ConvSpec::conv2d(c, 1, 3, 1, 1), rng)?;
        Ok(Generator {
            config: config.clone(),
            encoder,
            tokens,
            refine,
            lift2d,
            lift3d,
            render3d,
            decoder,
            image_head,
            segment_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Stride-2 3×3 convs with relu: `[N, 3, S, S] → [N, C, S/2^k, S/2^k]`.
    pub fn encode2d<T: Scalar>(&self, p: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        check_image(image, self.config.image_size)?;
        let mut x = image.clone();
        for layer in &self.encoder {
            x = layer.forward(p, &x)?.relu();
        }
        Ok(x)
    }

    /// See [`transform_tokens`].
    pub fn transform_tokens<T: Scalar>(&self, p: &ParamStore<T>, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        transform_tokens(&self.tokens, p, tokens)
    }

    /// Tokens back to a feature map, then conv/upsample blocks down to 3
    /// channels at the input resolution.
    pub fn refine<T: Scalar>(&self, p: &ParamStore<T>, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = tokens_to_features(tokens)?;
        let last = self.refine.len() - 1;
        for (i, layer) in self.refine.iter().enumerate() {
            x = layer.forward(p, &x)?;
            x = if i == last { x.sigmoid() } else { x.relu() };
            x = upsample2x(&x)?;
        }
        Ok(x)
    }

    /// Image to intrinsic representation `[N, 3, S, S]`.
    pub fn intrinsic<T: Scalar>(&self, p: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.encode2d(p, image)?;
        let t = self.transform_tokens(p, &features_to_tokens(&f)?)?;
        self.refine(p, &t)
    }

    /// Intrinsic representation to occupancy volume `[N, vc, D, D, D]`.
    pub fn vgm_lift<T: Scalar>(&self, p: &ParamStore<T>, ir: &Tensor<T>) -> Result<Tensor<T>> {
        check_image(ir, self.config.image_size)?;
        let mut x = ir.clone();
        for layer in &self.lift2d {
            x = layer.forward(p, &x)?.relu();
        }
        let (n, vc, d) = (x.shape()[0], self.config.volume_channels, self.config.volume_size);
        let mut v = x.reshape(&[n, vc, d, d, d])?;
        for layer in &self.lift3d {
            v = layer.forward(p, &v)?.relu();
        }
        Ok(v)
    }

    /// Rotate each volume from `reference` to its target pose and decode.
    pub fn vgm_render<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        vol: &Tensor<T>,
        targets: &[Pose],
        reference: &Pose,
    ) -> Result<Synthesis<T>> {
        let (vc, d) = (self.config.volume_channels, self.config.volume_size);
        let n = vol.shape()[0];
        if vol.shape() != [n, vc, d, d, d] {
            return Err(Error::ShapeMismatch {
                op: "vgm_render",
                lhs: vol.shape().to_vec(),
                rhs: vec![n, vc, d, d, d],
            });
        }
        let rs: Vec<_> = targets.iter().map(|t| rotation_between(reference, t)).collect();
        let mut v = rotate_volumes(vol, &rs, Interp::Trilinear)?;
        for layer in &self.render3d {
            v = layer.forward(p, &v)?.relu();
        }
        let mut x = v.reshape(&[n, vc * d, d, d])?;
        for layer in &self.decoder {
            x = upsample2x(&layer.forward(p, &x)?.relu())?;
        }
        Ok(Synthesis {
            image: self.image_head.forward(p, &x)?.sigmoid(),
            segment: self.segment_head.forward(p, &x)?.sigmoid(),
        })
    }
}

/// Least-squares patch discriminator.
#[derive(Debug, Clone)]
pub struct Discriminator {
    image_size: usize,
    layers: Vec<ConvLayer>,
    out: ConvLayer,
}

impl Discriminator {
    pub fn new<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut c = 3;
        for (i, &out) in config.discriminator_channels.iter().enumerate() {
            layers.push(ConvLayer::new(store, &format!("disc.{i}"), ConvSpec::conv2d(c, out, 3, 2, 1), rng)?);
            c = out;
        }
        let out = ConvLayer::new(store, "disc.out", ConvSpec::conv2d(c, 1, 3, 1, 1), rng)?;
        Ok(Discriminator {
            image_size: config.image_size,
            layers,
            out,
        })
    }

    /// Realness map `[N, 1, s, s]`, unbounded.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        check_image(image, self.image_size)?;
        let mut x = image.clone();
        for layer in &self.layers {
            x = layer.forward(p, &x)?.leaky_relu(0.2);
        }
        self.out.forward(p, &x)
    }

    /// The final 1-channel layer.
    pub fn output_layer(&self) -> &ConvLayer {
        &self.out
    }
}

/// Parameters of both networks, kept in separate stores so their updates
/// never touch each other.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub generator: ParamStore<T>,
    pub discriminator: ParamStore<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn frozen(&self) -> Self {
        ModelParams {
            generator: self.generator.frozen(),
            discriminator: self.discriminator.frozen(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.generator.bitwise_eq(&other.generator) && self.discriminator.bitwise_eq(&other.discriminator)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Model {
    /// Layers plus freshly initialized parameters, deterministic per seed.
    pub fn new<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Model, ModelParams<T>)> {
        let mut generator_store = ParamStore::new();
        let mut discriminator_store = ParamStore::new();
        let generator = Generator::new(
            config,
            &mut generator_store,
            &mut SeededRng::derived(seed, "generator"),
        )?;
        let discriminator = Discriminator::new(
            config,
            &mut discriminator_store,
            &mut SeededRng::derived(seed, "discriminator"),
        )?;
        Ok((
            Model {
                config: config.clone(),
                generator,
                discriminator,
            },
            ModelParams {
                generator: generator_store,
                discriminator: discriminator_store,
            },
        ))
    }

    /// Volume for each source image, in the reference frame.
    pub fn encode_volume<T: Scalar>(&self, params: &ModelParams<T>, source: &Tensor<T>) -> Result<Tensor<T>> {
        let g = &params.generator;
        self.generator.vgm_lift(g, &self.generator.intrinsic(g, source)?)
    }

    pub fn render<T: Scalar>(&self, params: &ModelParams<T>, vol: &Tensor<T>, targets: &[Pose]) -> Result<Synthesis<T>> {
        self.generator
            .vgm_render(&params.generator, vol, targets, &self.config.reference_pose)
    }
}

/// Novel views of `source` (`[N, 3, S, S]`) at `targets` (one per image).
/// No source pose is taken: the source is mapped to the reference pose by
/// the network itself.
pub fn synthesize<T: Scalar>(
    model: &Model,
    params: &ModelParams<T>,
    source: &Tensor<T>,
    targets: &[Pose],
) -> Result<Synthesis<T>> {
    if targets.len() != source.shape()[0] {
        return Err(Error::InvalidShape(format!(
            "{} target poses for {} source images",
            targets.len(),
            source.shape()[0]
        )));
    }
    let vol = model.encode_volume(params, source)?;
    model.render(params, &vol, targets)
}

/// Realness map of `image`.
pub fn discriminate<T: Scalar>(model: &Model, params: &ModelParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    model.discriminator.forward(&params.discriminator, image)
}
