//! Metrics and analysis runs over a trained model.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{load_external_image, stack_images, write_ppm, Dataset, Image, ObjectRecord, Split};
use crate::error::{Error, Result};
use crate::geometry::{fmt_angle, rotate_volume, rotation_between, Interp, Pose};
use crate::losses::{
    adversarial_losses, color_loss, edge_map, feature_loss, segment_loss, shape_loss, ssim, ssim_loss, total_loss,
    FeatureNet, LossContext, LossWeights,
};
use crate::model::{synthesize, Model, ModelConfig, ModelParams};
use crate::nn::{conv, upsample2x, ConvSpec};
use crate::tensor::gradcheck::grad_check;
use crate::tensor::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};
use crate::training::{train_stage1, TrainConfig};

pub const REPORT_HEADER: &str = "object\tsrc_az\tsrc_el\ttgt_az\ttgt_el\tL1\tSSIM";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub object: String,
    pub source: Pose,
    pub target: Pose,
    pub l1: f64,
    pub ssim: f64,
    /// L1 of the unchanged source view against the target.
    pub copy_l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseStats {
    pub pose: Pose,
    pub l1: f64,
    pub ssim: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_l1: f64,
    pub mean_ssim: f64,
    pub mean_copy_l1: f64,
    /// Means per target pose, in first-seen order.
    pub by_target: Vec<PoseStats>,
}

impl EvalReport {
    fn from_rows(rows: Vec<EvalRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mut by_target: Vec<PoseStats> = Vec::new();
        for r in &rows {
            match by_target.iter_mut().find(|s| s.pose == r.target) {
                Some(s) => {
                    s.l1 += r.l1;
                    s.ssim += r.ssim;
                    s.count += 1;
                }
                None => by_target.push(PoseStats {
                    pose: r.target,
                    l1: r.l1,
                    ssim: r.ssim,
                    count: 1,
                }),
            }
        }
        for s in &mut by_target {
            s.l1 /= s.count as f64;
            s.ssim /= s.count as f64;
        }
        EvalReport {
            mean_l1: rows.iter().map(|r| r.l1).sum::<f64>() / n,
            mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            mean_copy_l1: rows.iter().map(|r| r.copy_l1).sum::<f64>() / n,
            by_target,
            rows,
        }
    }

    /// Share of rows where the synthesis is strictly closer than the
    /// unchanged source view.
    pub fn beats_copy_fraction(&self) -> f64 {
        let wins = self.rows.iter().filter(|r| r.l1 < r.copy_l1).count();
        wins as f64 / self.rows.len().max(1) as f64
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.object,
                fmt_angle(r.source.azimuth()),
                fmt_angle(r.source.elevation()),
                fmt_angle(r.target.azimuth()),
                fmt_angle(r.target.elevation()),
                r.l1,
                r.ssim
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_tsv())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Anything that turns a set of source views into views at given poses.
pub trait ViewPredictor {
    /// Take the source views of one object.
    fn begin(&mut self, object: &ObjectRecord, sources: &[Image]) -> Result<()>;
    /// The view of source `i` at `targets[i]`, for every source.
    fn predict(&mut self, targets: &[Pose]) -> Result<Vec<Image>>;
}

/// Encodes each source once, then renders it at any number of poses.
pub struct ModelPredictor<'a, T: Scalar> {
    model: &'a Model,
    params: ModelParams<T>,
    volumes: Option<Tensor<T>>,
}

impl<'a, T: Scalar> ModelPredictor<'a, T> {
    pub fn new(model: &'a Model, params: &ModelParams<T>) -> Self {
        ModelPredictor {
            model,
            params: params.frozen(),
            volumes: None,
        }
    }
}

impl<T: Scalar> ViewPredictor for ModelPredictor<'_, T> {
    fn begin(&mut self, _object: &ObjectRecord, sources: &[Image]) -> Result<()> {
        let batch = stack_images::<T>(&sources.iter().collect::<Vec<_>>())?;
        self.volumes = Some(self.model.encode_volume(&self.params, &batch)?);
        Ok(())
    }

    fn predict(&mut self, targets: &[Pose]) -> Result<Vec<Image>> {
        let vol = self.volumes.as_ref().expect("begin before predict");
        let out = self.model.render(&self.params, vol, targets)?.image;
        (0..targets.len()).map(|i| Image::from_tensor(&out, i)).collect()
    }
}

/// SSIM of two single images through the loss implementation.
pub fn image_ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim::<f64>(&a.to_tensor(), &b.to_tensor())?.item())
}

/// Every ordered (source view, other view) pair of every object in `split`,
/// rows ordered by object, source view, then target view.
pub fn evaluate_with(dataset: &Dataset, split: Split, predictor: &mut dyn ViewPredictor) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for obj in dataset.split(split) {
        let views: Vec<Image> = obj.views.iter().map(|v| v.image()).collect();
        let n = views.len();
        if n < 2 {
            continue;
        }
        predictor.begin(obj, &views)?;
        let mut slot: Vec<Option<EvalRow>> = vec![None; n * (n - 1)];
        // Offset k pairs source i with target i + k, so every prediction
        // call uses each encoded source exactly once.
        for k in 1..n {
            let targets: Vec<Pose> = (0..n).map(|i| obj.views[(i + k) % n].pose).collect();
            let preds = predictor.predict(&targets)?;
            if preds.len() != n {
                return Err(Error::InvalidShape(format!("{} predictions for {n} sources", preds.len())));
            }
            for (i, pred) in preds.iter().enumerate() {
                let t = (i + k) % n;
                let gt = &views[t];
                let col = if t < i { t } else { t - 1 };
                slot[i * (n - 1) + col] = Some(EvalRow {
                    object: obj.id.clone(),
                    source: obj.views[i].pose,
                    target: obj.views[t].pose,
                    l1: pred.l1(gt),
                    ssim: image_ssim(pred, gt)?,
                    copy_l1: views[i].l1(gt),
                });
            }
        }
        rows.extend(slot.into_iter().map(|r| r.expect("every pair visited")));
    }
    Ok(EvalReport::from_rows(rows))
}

pub fn evaluate<T: Scalar>(model: &Model, params: &ModelParams<T>, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    if model.config.image_size != dataset.image_size {
        return Err(Error::Config(format!(
            "model expects {0}x{0} images, dataset has {1}x{1}",
            model.config.image_size, dataset.image_size
        )));
    }
    evaluate_with(dataset, split, &mut ModelPredictor::new(model, params))
}

/// Images laid out row by row with `MOSAIC_GAP` white pixels between
/// cells; single-channel images are shown as gray.
pub const MOSAIC_GAP: usize = 2;

pub fn mosaic(rows: &[Vec<Image>]) -> Result<Image> {
    let cell = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::InvalidShape("empty mosaic".into()))?;
    let (ch, cw) = (cell.height, cell.width);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let height = rows.len() * ch + (rows.len() - 1) * MOSAIC_GAP;
    let width = cols * cw + (cols - 1) * MOSAIC_GAP;
    let mut out = Image::new(3, height, width);
    out.data.fill(1.0);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if (img.height, img.width) != (ch, cw) {
                return Err(Error::ShapeMismatch {
                    op: "mosaic",
                    lhs: vec![ch, cw],
                    rhs: vec![img.height, img.width],
                });
            }
            let (y0, x0) = (r * (ch + MOSAIC_GAP), c * (cw + MOSAIC_GAP));
            for k in 0..3 {
                let src = k.min(img.channels - 1);
                for y in 0..ch {
                    for x in 0..cw {
                        out.set(k, y0 + y, x0 + x, img.get(src, y, x));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeStats {
    pub object: String,
    pub mean_intra_distance: f64,
    pub mean_inter_distance: f64,
    pub ratio: f64,
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// `(intra, inter)`: mean pairwise L1 within `own`, and between every
/// element of `own` and every element of `others`.
pub fn representation_distances(own: &[Vec<f64>], others: &[Vec<f64>]) -> (f64, f64) {
    let mut intra = (0.0, 0usize);
    for i in 0..own.len() {
        for j in i + 1..own.len() {
            intra.0 += mean_abs_diff(&own[i], &own[j]);
            intra.1 += 1;
        }
    }
    let mut inter = (0.0, 0usize);
    for a in own {
        for b in others {
            inter.0 += mean_abs_diff(a, b);
            inter.1 += 1;
        }
    }
    (intra.0 / intra.1.max(1) as f64, inter.0 / inter.1.max(1) as f64)
}

/// Intrinsic representations of every view of `obj`, flattened.
fn intrinsic_of<T: Scalar>(model: &Model, params: &ModelParams<T>, obj: &ObjectRecord) -> Result<(Tensor<T>, Vec<Vec<f64>>)> {
    let images: Vec<Image> = obj.views.iter().map(|v| v.image()).collect();
    let batch = stack_images::<T>(&images.iter().collect::<Vec<_>>())?;
    let rep = model.generator.intrinsic(&params.generator, &batch)?;
    let per = rep.numel() / images.len();
    let flat = rep.to_f64_vec();
    let reps = flat.chunks_exact(per).map(<[f64]>::to_vec).collect();
    Ok((rep, reps))
}

pub const PROBE_OTHERS: usize = 10;

/// How much the intrinsic representation of one object varies with pose,
/// relative to how much it differs from the next `PROBE_OTHERS` objects
/// (dataset order, wrapping). Also returns a two-row mosaic: views of one
/// elevation ring and the channel-mean of their representations.
pub fn probe_intrinsic<T: Scalar>(
    model: &Model,
    params: &ModelParams<T>,
    dataset: &Dataset,
    object_id: &str,
) -> Result<(ProbeStats, Image)> {
    let obj = dataset.object(object_id)?;
    let params = params.frozen();
    let (rep, own) = intrinsic_of(model, &params, obj)?;
    let idx = dataset.objects.iter().position(|o| o.id == object_id).expect("found above");
    let n_obj = dataset.objects.len();
    let mut others = Vec::new();
    for k in 1..=PROBE_OTHERS.min(n_obj - 1) {
        others.extend(intrinsic_of(model, &params, &dataset.objects[(idx + k) % n_obj])?.1);
    }
    let (intra, inter) = representation_distances(&own, &others);
    let stats = ProbeStats {
        object: object_id.to_string(),
        mean_intra_distance: intra,
        mean_inter_distance: inter,
        ratio: if inter > 0.0 { intra / inter } else { f64::INFINITY },
    };

    let ring = obj.views[0].pose.elevation();
    let shown: Vec<usize> = (0..obj.views.len()).filter(|&i| obj.views[i].pose.elevation() == ring).collect();
    let [_, c, h, w] = *rep.shape() else { unreachable!("intrinsic is 4-d") };
    let flat = rep.to_f64_vec();
    let maps: Vec<Vec<f64>> = shown
        .iter()
        .map(|&i| {
            (0..h * w)
                .map(|p| (0..c).map(|k| flat[(i * c + k) * h * w + p]).sum::<f64>() / c as f64)
                .collect()
        })
        .collect();
    let lo = maps.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = maps.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let s = dataset.image_size;
    let rep_row = maps
        .iter()
        .map(|m| {
            let mut img = Image::new(1, s, s);
            for y in 0..s {
                for x in 0..s {
                    img.set(0, y, x, (m[(y * h / s) * w + x * w / s] - lo) / span);
                }
            }
            img
        })
        .collect();
    let view_row = shown.iter().map(|&i| obj.views[i].image()).collect();
    Ok((stats, mosaic(&[view_row, rep_row])?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub pose: Pose,
    pub l1: f64,
    pub ssim: f64,
}

pub const SWEEP_HEADER: &str = "pose\tL1\tSSIM";

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{}\t{}\t{}", r.pose.label(), r.l1, r.ssim).expect("writing to a String");
    }
    s
}

/// Train stage 1 once per reference pose (same seed and schedule, each
/// run logging under `<checkpoint_dir>/ref_<pose>`) and evaluate on the
/// test split.
pub fn reference_pose_sweep<T: Scalar>(base: &TrainConfig, dataset: &Dataset, poses: &[Pose]) -> Result<Vec<SweepRow>> {
    poses
        .iter()
        .map(|&pose| {
            let mut config = base.clone();
            config.model.reference_pose = pose;
            config.checkpoint_dir = base.checkpoint_dir.join(format!("ref_{}", pose.label()));
            let (ckpt, _) = train_stage1::<T>(&config, dataset)?;
            let model = Model::new::<T>(&config.model, config.seed)?.0;
            let report = evaluate(&model, &ckpt.params, dataset, Split::Test)?;
            log::info!("reference pose {pose}: L1 {:.5}, SSIM {:.5}", report.mean_l1, report.mean_ssim);
            Ok(SweepRow {
                pose,
                l1: report.mean_l1,
                ssim: report.mean_ssim,
            })
        })
        .collect()
}

pub fn synth_file_name(pose: &Pose) -> String {
    format!("synth_{}.ppm", pose.label())
}

pub const SYNTH_MOSAIC: &str = "mosaic.ppm";

/// Views of an arbitrary image at each pose, written to `out_dir` with a
/// mosaic (input first). Returns the written paths, mosaic last.
pub fn synth_command<T: Scalar>(
    model: &Model,
    params: &ModelParams<T>,
    input: &Path,
    poses: &[Pose],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if poses.is_empty() {
        return Err(Error::Config("no target poses".into()));
    }
    let image = load_external_image(input, model.config.image_size)?;
    let batch = stack_images::<T>(&vec![&image; poses.len()])?;
    let out = synthesize(model, &params.frozen(), &batch, poses)?.image;
    let mut paths = Vec::new();
    let mut row = vec![image];
    for (i, pose) in poses.iter().enumerate() {
        let view = Image::from_tensor(&out, i)?;
        let path = out_dir.join(synth_file_name(pose));
        write_ppm(&path, &view)?;
        paths.push(path);
        row.push(view);
    }
    let path = out_dir.join(SYNTH_MOSAIC);
    write_ppm(&path, &mosaic(&[row])?)?;
    paths.push(path);
    Ok(paths)
}

/// One finite-difference check of the gradient suite.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub op: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_TOL_MODEL: f64 = 1e-3;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor<f64> {
    let n = crate::tensor::numel(shape);
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).expect("shape matches")
}

/// Values with `|x| ≥ 0.1`, away from the kinks of relu, abs and friends.
fn off_kink(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let n = crate::tensor::numel(shape);
    let v = (0..n)
        .map(|_| {
            let m = rng.uniform_range(0.1, 1.0);
            if rng.bernoulli(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape, v).expect("shape matches")
}

/// `b` at least 0.05 away from `a` elementwise, inside [0, 1].
fn apart(a: &Tensor<f64>, rng: &mut SeededRng) -> Tensor<f64> {
    let v = a
        .data()
        .iter()
        .map(|&x| {
            let d = rng.uniform_range(0.05, 0.3);
            if x > 0.5 { x - d } else { x + d }
        })
        .collect();
    Tensor::from_vec(a.shape(), v).expect("shape matches")
}

type Objective<'a> = Box<dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>> + 'a>;

/// Gradient checks of every differentiable operation, the losses and the
/// whole micro model, in 64-bit, once per seed.
pub fn grad_suite(seeds: &[u64]) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut rng = SeededRng::derived(seed, "grad-suite");
        let mut run = |op: &'static str, f: Objective<'_>, x: &Tensor<f64>, eps: f64, tol: f64| -> Result<()> {
            let r = grad_check(f, x, eps, tol)?;
            out.push(GradCase {
                op,
                seed,
                max_rel_err: r.max_rel_err,
                tol,
                pass: r.pass,
            });
            Ok(())
        };

        let x = off_kink(&[2, 3, 4], &mut rng);
        let y = uniform(&[3, 4], 0.5, 1.5, &mut rng);
        run(
            "elementwise",
            Box::new(|x| {
                let a = x.mul(&y)?.add(&x.div(&y)?)?.sub(&x.square())?;
                let b = x.relu().add(&x.leaky_relu(0.2))?.add(&x.abs())?.add(&x.sigmoid())?;
                let c = x.tanh().add(&x.abs().add_scalar(0.5).sqrt())?.add(&x.neg().max_scalar(0.0))?;
                Ok(a.add(&b)?.add(&c)?.mul_scalar(0.5).sum())
            }),
            &x,
            1e-6,
            GRAD_TOL,
        )?;
        let x = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        run(
            "reduce",
            Box::new(|x| {
                let a = x.sum_axes(&[1], false)?.square().mean();
                let b = x.mean_axes(&[0, 2], true)?.square().sum();
                let c = x.max_axes(&[2], false)?.sum().add(&x.max_all())?;
                a.add(&b)?.add(&c)
            }),
            &x,
            1e-6,
            GRAD_TOL,
        )?;

        let spec2 = ConvSpec::conv2d(2, 3, 3, 2, 1);
        let w2 = uniform(&spec2.weight_shape(), -0.5, 0.5, &mut rng);
        let b2 = uniform(&[3], -0.5, 0.5, &mut rng);
        let x2 = uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut rng);
        run(
            "conv2d/input",
            Box::new(|x| Ok(conv(x, &spec2, &w2, Some(&b2))?.square().sum())),
            &x2,
            1e-6,
            GRAD_TOL,
        )?;
        run(
            "conv2d/weight",
            Box::new(|w| Ok(conv(&x2, &spec2, w, Some(&b2))?.square().sum())),
            &w2,
            1e-6,
            GRAD_TOL,
        )?;
        run(
            "conv2d/bias",
            Box::new(|b| Ok(conv(&x2, &spec2, &w2, Some(b))?.square().sum())),
            &b2,
            1e-6,
            GRAD_TOL,
        )?;
        let spec3 = ConvSpec::conv3d(2, 2, 3, 1, 1);
        let w3 = uniform(&spec3.weight_shape(), -0.5, 0.5, &mut rng);
        let x3 = uniform(&[1, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
        run(
            "conv3d/input",
            Box::new(|x| Ok(conv(x, &spec3, &w3, None)?.square().sum())),
            &x3,
            1e-6,
            GRAD_TOL,
        )?;
        run(
            "conv3d/weight",
            Box::new(|w| Ok(conv(&x3, &spec3, w, None)?.square().sum())),
            &w3,
            1e-6,
            GRAD_TOL,
        )?;
        let xu = uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let wu = uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        run(
            "upsample2x",
            Box::new(|x| Ok(upsample2x(x)?.mul(&wu)?.square().sum())),
            &xu,
            1e-6,
            GRAD_TOL,
        )?;
        let r = rotation_between(
            &Pose::origin(),
            &Pose::new(rng.uniform_range(0.0, 360.0), rng.uniform_range(-30.0, 30.0))?,
        );
        let xv = uniform(&[1, 2, 5, 5, 5], 0.0, 1.0, &mut rng);
        let wv = uniform(&[1, 2, 5, 5, 5], -1.0, 1.0, &mut rng);
        run(
            "rotate_volume/trilinear",
            Box::new(|x| Ok(rotate_volume(x, &r, Interp::Trilinear)?.mul(&wv)?.square().sum())),
            &xv,
            1e-6,
            GRAD_TOL,
        )?;

        let a = uniform(&[1, 3, 9, 9], 0.0, 1.0, &mut rng);
        let b = apart(&a, &mut rng);
        let net = FeatureNet::<f64>::new(seed)?;
        run("ssim", Box::new(|x| ssim(x, &b)), &a, 1e-4, GRAD_TOL)?;
        run(
            "edge_map",
            Box::new(|x| Ok(edge_map(x)?.mul(&edge_map(&b)?)?.sum())),
            &a,
            1e-4,
            GRAD_TOL,
        )?;
        run("color_loss", Box::new(|x| color_loss(x, &b)), &a, 1e-4, GRAD_TOL)?;
        run("ssim_loss", Box::new(|x| ssim_loss(x, &b)), &a, 1e-4, GRAD_TOL)?;
        run("feature_loss", Box::new(|x| feature_loss(x, &b, &net)), &a, 1e-4, GRAD_TOL)?;
        run("shape_loss", Box::new(|x| shape_loss(x, &b)), &a, 1e-4, GRAD_TOL)?;
        let seg_t = uniform(&[1, 1, 9, 9], 0.0, 1.0, &mut rng);
        let seg_p = apart(&seg_t, &mut rng);
        run(
            "segment_loss",
            Box::new(|x| segment_loss(x, &seg_t)),
            &seg_p,
            1e-4,
            GRAD_TOL,
        )?;

        let cfg = ModelConfig::micro();
        let (model, params) = Model::new::<f64>(&cfg, seed)?;
        let frozen = params.frozen();
        let s = cfg.image_size;
        let fake = uniform(&[1, 3, s, s], 0.0, 1.0, &mut rng);
        let real = apart(&fake, &mut rng);
        run(
            "adversarial_loss",
            Box::new(|x| Ok(adversarial_losses(&real, x, &model.discriminator, &frozen.discriminator)?.0)),
            &fake,
            1e-5,
            GRAD_TOL,
        )?;
        let source = uniform(&[1, 3, s, s], 0.0, 1.0, &mut rng);
        let target_seg = uniform(&[1, 1, s, s], 0.0, 1.0, &mut rng);
        let pose = Pose::new(rng.uniform_range(0.0, 360.0), 10.0)?;
        let ctx = LossContext {
            weights: LossWeights::default(),
            feature_net: &net,
            discriminator: &model.discriminator,
            d_params: &frozen.discriminator,
        };
        run(
            "model/total_loss",
            Box::new(|x| {
                let synth = synthesize(&model, &frozen, x, &[pose])?;
                Ok(total_loss(&real, &target_seg, &synth, &ctx)?.total)
            }),
            &source,
            1e-4,
            GRAD_TOL_MODEL,
        )?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_dataset;
    use crate::geometry::pose_grid;

    fn micro_dataset(dir: &Path) -> Dataset {
        build_dataset(6, &pose_grid(4, &[0.0, 10.0]).unwrap(), 16, 5, dir).unwrap()
    }

    /// Looks up the stored ground truth instead of synthesizing.
    struct Oracle<'a> {
        obj: Option<&'a ObjectRecord>,
        ds: &'a Dataset,
    }

    impl ViewPredictor for Oracle<'_> {
        fn begin(&mut self, object: &ObjectRecord, _: &[Image]) -> Result<()> {
            self.obj = Some(self.ds.object(&object.id)?);
            Ok(())
        }
        fn predict(&mut self, targets: &[Pose]) -> Result<Vec<Image>> {
            Ok(targets.iter().map(|t| self.obj.unwrap().view_at(t).unwrap().image()).collect())
        }
    }

    #[test]
    fn oracle_injection_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let ds = micro_dataset(dir.path());
        let r = evaluate_with(&ds, Split::Test, &mut Oracle { obj: None, ds: &ds }).unwrap();
        let n_test = ds.split(Split::Test).count();
        assert_eq!(r.rows.len(), n_test * 8 * 7);
        assert!(r.rows.iter().all(|row| row.l1 == 0.0 && row.ssim == 1.0));
        assert_eq!(r.by_target.len(), 8);
        assert!(r.rows.iter().all(|row| row.source != row.target));
    }

    #[test]
    fn model_report_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let ds = micro_dataset(dir.path());
        let (model, params) = Model::new::<f64>(&ModelConfig::micro(), 1).unwrap();
        let a = evaluate(&model, &params, &ds, Split::Test).unwrap();
        let b = evaluate(&model, &params, &ds, Split::Test).unwrap();
        assert_eq!(a.to_tsv(), b.to_tsv());
        let first = a.to_tsv().lines().nth(1).unwrap().to_string();
        assert_eq!(first.split('\t').count(), 7);
        assert!(a.rows.iter().all(|r| r.l1 >= 0.0 && (-1.0..=1.0).contains(&r.ssim)));
        let mean = a.rows.iter().map(|r| r.l1).sum::<f64>() / a.rows.len() as f64;
        assert_eq!(mean, a.mean_l1);
        // A direct synthesis of one pair agrees with the batched path.
        let obj = ds.split(Split::Test).next().unwrap();
        let src = obj.views[0].image().to_tensor::<f64>();
        let out = synthesize(&model, &params, &src, &[obj.views[3].pose]).unwrap();
        let direct = Image::from_tensor(&out.image, 0).unwrap().l1(&obj.views[3].image());
        let row = a.rows.iter().find(|r| r.object == obj.id && r.target == obj.views[3].pose).unwrap();
        assert!((row.l1 - direct).abs() < 1e-12);
    }

    #[test]
    fn representation_distance_rules() {
        let a = vec![1.0, 2.0, 3.0];
        let (intra, inter) = representation_distances(&[a.clone(), a.clone()], &[vec![2.0, 3.0, 4.0]]);
        assert_eq!((intra, inter), (0.0, 1.0));
        let own = vec![vec![0.0, 1.0], vec![3.0, 1.0], vec![2.0, 5.0]];
        let other = vec![vec![1.0, 1.0], vec![4.0, 0.0]];
        let mut rev = own.clone();
        rev.reverse();
        assert_eq!(representation_distances(&own, &other), representation_distances(&rev, &other));
    }

    #[test]
    fn probe_and_mosaic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = micro_dataset(dir.path());
        let (model, params) = Model::new::<f64>(&ModelConfig::micro(), 1).unwrap();
        let (stats, grid) = probe_intrinsic(&model, &params, &ds, &ds.objects[0].id).unwrap();
        assert!(stats.ratio.is_finite() && stats.mean_inter_distance > 0.0);
        assert_eq!((grid.height, grid.width), (2 * 16 + 2, 4 * 16 + 3 * 2));
        assert!(matches!(probe_intrinsic(&model, &params, &ds, "nope"), Err(Error::UnknownObject(_))));
    }

    #[test]
    fn synth_writes_views_and_mosaic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = micro_dataset(&dir.path().join("d"));
        let (model, params) = Model::new::<f32>(&ModelConfig::micro(), 2).unwrap();
        let input = dir.path().join("in.ppm");
        write_ppm(&input, &ds.objects[0].views[1].image()).unwrap();
        let pose = Pose::new(90.0, 10.0).unwrap();
        let out = dir.path().join("o");
        let paths = synth_command(&model, &params, &input, &[pose], &out).unwrap();
        assert_eq!(paths.len(), 2);
        assert_eq!(std::fs::read_dir(&out).unwrap().count(), 2);
        assert!(out.join("synth_90_10.ppm").exists());
        let first = std::fs::read(&paths[0]).unwrap();
        synth_command(&model, &params, &input, &[pose], &out).unwrap();
        assert_eq!(std::fs::read(&paths[0]).unwrap(), first);
    }

    #[test]
    fn sweep_single_pose_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let ds = micro_dataset(&dir.path().join("d"));
        let config = TrainConfig {
            model: ModelConfig::micro(),
            batch_size: 2,
            stage1_steps: 2,
            log_interval: 0,
            checkpoint_dir: dir.path().join("c"),
            ..TrainConfig::default()
        };
        let rows = reference_pose_sweep::<f32>(&config, &ds, &[Pose::origin()]).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].l1.is_finite());
        assert_eq!(sweep_tsv(&rows).lines().count(), 2);
    }

    #[test]
    fn grad_suite_one_seed() {
        let cases = grad_suite(&[11]).unwrap();
        assert_eq!(cases.len(), 18);
        for c in &cases {
            assert!(c.pass, "{} seed {}: {:e}", c.op, c.seed, c.max_rel_err);
        }
    }
}
