//! Two-stage training: single-view reconstruction, then reverse mapping.

pub mod checkpoint;
pub mod config;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub use checkpoint::{checkpoint_dtype, load_checkpoint, load_tensors, save_checkpoint, save_tensors, Checkpoint};
pub use config::TrainConfig;

use crate::data::{stack_images, Dataset, Image, Split};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::losses::{total_loss, FeatureNet, LossContext};
use crate::model::{synthesize, Model};
use crate::nn::adam_step;
use crate::tensor::rng::SeededRng;
use crate::tensor::{backward, Scalar};

pub const LOG_HEADER: &str = "step\tL_R\tL_SSIM\tL_V\tL_S\tL_A\tL_Total";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Losses of one completed step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: u64,
    /// `[L_R, L_SSIM, L_V, L_S, L_A, L_Total]`
    pub losses: [f64; 6],
    pub l_d: f64,
}

impl StepRecord {
    pub fn total(&self) -> f64 {
        self.losses[5]
    }
}

/// Every real view an optimization step reads, as `(object id, pose)`.
pub type AuditHook<'a> = Box<dyn FnMut(Stage, u64, &[(String, Pose)]) + 'a>;

pub fn loss_log_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("loss_stage{}.tsv", stage.number()))
}

pub fn stage_checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("stage{}.ckpt", stage.number()))
}

/// The feature network named by a config: a weights file if given, else
/// the seeded one.
pub fn feature_net_for<T: Scalar>(config: &TrainConfig) -> Result<FeatureNet<T>> {
    match &config.feature_net_weights {
        Some(path) => FeatureNet::from_store(&load_tensors(path)?),
        None => FeatureNet::new(config.feature_net_seed),
    }
}

pub struct Trainer<'a, T: Scalar> {
    model: Model,
    ckpt: Checkpoint<T>,
    feature_net: FeatureNet<T>,
    dataset: &'a Dataset,
    train: Vec<usize>,
    audit: Option<AuditHook<'a>>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(model: Model, ckpt: Checkpoint<T>, dataset: &'a Dataset) -> Result<Self> {
        let config = &ckpt.config;
        config.validate()?;
        if dataset.image_size != config.model.image_size {
            return Err(Error::Config(format!(
                "dataset images are {0}x{0} but the model expects {1}x{1}",
                dataset.image_size, config.model.image_size
            )));
        }
        let train: Vec<usize> = (0..dataset.objects.len())
            .filter(|&i| dataset.objects[i].split == Split::Train && !dataset.objects[i].views.is_empty())
            .collect();
        if train.len() < config.batch_size {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} training objects",
                config.batch_size,
                train.len()
            )));
        }
        if dataset.poses.is_empty() {
            return Err(Error::Config("dataset has no poses".into()));
        }
        let feature_net = feature_net_for(config)?;
        Ok(Trainer {
            model,
            ckpt,
            feature_net,
            dataset,
            train,
            audit: None,
        })
    }

    /// Fresh run from the config's seed.
    pub fn from_config(config: &TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        let (model, ckpt) = Checkpoint::initial(config)?;
        Self::new(model, ckpt, dataset)
    }

    pub fn set_audit_hook(&mut self, hook: AuditHook<'a>) {
        self.audit = Some(hook);
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn checkpoint(&self) -> &Checkpoint<T> {
        &self.ckpt
    }

    pub fn feature_net(&self) -> &FeatureNet<T> {
        &self.feature_net
    }

    pub fn into_parts(self) -> (Model, Checkpoint<T>) {
        (self.model, self.ckpt)
    }

    /// Run stage 1 until its counter reaches `config.stage1_steps`.
    pub fn run_stage1(&mut self) -> Result<Vec<StepRecord>> {
        self.run_until(Stage::One, self.ckpt.config.stage1_steps)
    }

    pub fn run_stage2(&mut self) -> Result<Vec<StepRecord>> {
        self.run_until(Stage::Two, self.ckpt.config.stage2_steps)
    }

    pub fn run_until(&mut self, stage: Stage, target: u64) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.counter(stage) < target {
            records.push(self.step(stage)?);
        }
        Ok(records)
    }

    fn counter(&self, stage: Stage) -> u64 {
        match stage {
            Stage::One => self.ckpt.stage1_step,
            Stage::Two => self.ckpt.stage2_step,
        }
    }

    /// One optimization step: a batch of distinct training objects, one
    /// view each.
    pub fn step(&mut self, stage: Stage) -> Result<StepRecord> {
        let step = self.counter(stage) + 1;
        let mut rng = SeededRng::from_state(self.ckpt.rng);
        let batch: Vec<(usize, usize)> = rng
            .choose_distinct(self.train.len(), self.ckpt.config.batch_size)
            .into_iter()
            .map(|i| {
                let obj = self.train[i];
                (obj, rng.below(self.dataset.objects[obj].views.len()))
            })
            .collect();
        let random_poses: Vec<Pose> = match stage {
            Stage::One => Vec::new(),
            Stage::Two => (0..batch.len())
                .map(|_| self.dataset.poses[rng.below(self.dataset.poses.len())])
                .collect(),
        };

        let views: Vec<_> = batch
            .iter()
            .map(|&(o, v)| &self.dataset.objects[o].views[v])
            .collect();
        if let Some(hook) = self.audit.as_mut() {
            let seen: Vec<(String, Pose)> = batch
                .iter()
                .zip(&views)
                .map(|(&(o, _), v)| (self.dataset.objects[o].id.clone(), v.pose))
                .collect();
            hook(stage, step, &seen);
        }
        let images: Vec<Image> = views.iter().map(|v| v.image()).collect();
        let segments: Vec<Image> = views.iter().map(|v| v.segment()).collect();
        let target = stack_images::<T>(&images.iter().collect::<Vec<_>>())?;
        let target_segment = stack_images::<T>(&segments.iter().collect::<Vec<_>>())?;
        let poses: Vec<Pose> = views.iter().map(|v| v.pose).collect();

        let params = &self.ckpt.params;
        let source = match stage {
            Stage::One => target.clone(),
            // First pass without a graph: its output is a fresh input.
            Stage::Two => synthesize(&self.model, &params.frozen(), &target, &random_poses)?.image,
        };
        let synth = synthesize(&self.model, params, &source, &poses)?;
        let ctx = LossContext {
            weights: self.ckpt.config.weights,
            feature_net: &self.feature_net,
            discriminator: &self.model.discriminator,
            d_params: &params.discriminator,
        };
        let losses = total_loss(&target, &target_segment, &synth, &ctx)?;
        let record = StepRecord {
            stage,
            step,
            losses: losses.values(),
            l_d: losses.l_d.item().as_f64(),
        };
        if !losses.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                breakdown: format!("{:?} L_D={}", record.losses, record.l_d),
            });
        }

        let d_grads = backward(&losses.l_d)?;
        let g_grads = backward(&losses.total)?;
        let lr = self.ckpt.config.lr;
        let ckpt = &mut self.ckpt;
        adam_step(&mut ckpt.params.discriminator, &d_grads, &mut ckpt.disc_adam, lr)?;
        adam_step(&mut ckpt.params.generator, &g_grads, &mut ckpt.gen_adam, lr)?;
        ckpt.rng = rng.state();
        match stage {
            Stage::One => ckpt.stage1_step = step,
            Stage::Two => ckpt.stage2_step = step,
        }

        let interval = ckpt.config.log_interval;
        if interval > 0 && step % interval == 0 {
            append_log(&loss_log_path(&ckpt.config.checkpoint_dir, stage), &record)?;
            log::info!(
                "stage {} step {step}: L_Total {:.5} (L_R {:.5}, L_D {:.5})",
                stage.number(),
                record.total(),
                record.losses[0],
                record.l_d
            );
        }
        Ok(record)
    }
}

fn append_log(path: &Path, r: &StepRecord) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    if fresh {
        line.push_str(LOG_HEADER);
        line.push('\n');
    }
    line.push_str(&r.step.to_string());
    for v in r.losses {
        line.push('\t');
        line.push_str(&v.to_string());
    }
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Stage 1 from initialization.
pub fn train_stage1<T: Scalar>(config: &TrainConfig, dataset: &Dataset) -> Result<(Checkpoint<T>, Vec<StepRecord>)> {
    let mut t = Trainer::<T>::from_config(config, dataset)?;
    let records = t.run_stage1()?;
    Ok((t.into_parts().1, records))
}

/// Stage 2 continuing `ckpt`. The stage-2 schedule and logging come from
/// `config`; the model layout and seed must match the checkpoint.
pub fn train_stage2<T: Scalar>(
    config: &TrainConfig,
    ckpt: Checkpoint<T>,
    dataset: &Dataset,
) -> Result<(Checkpoint<T>, Vec<StepRecord>)> {
    if config.model != ckpt.config.model || config.seed != ckpt.config.seed {
        return Err(Error::Config("stage-2 config does not match the checkpoint's model".into()));
    }
    let model = Model::new::<T>(&config.model, config.seed)?.0;
    let mut ckpt = ckpt;
    ckpt.config = config.clone();
    let mut t = Trainer::new(model, ckpt, dataset)?;
    let records = t.run_stage2()?;
    Ok((t.into_parts().1, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_dataset;
    use crate::geometry::pose_grid;
    use crate::model::ModelConfig;
    use crate::tensor::DType;
    use std::cell::RefCell;
    use std::collections::HashSet;

    fn setup(dir: &Path) -> (TrainConfig, Dataset) {
        let poses = pose_grid(6, &[0.0, 20.0]).unwrap();
        let ds = build_dataset(8, &poses, 16, 3, &dir.join("data")).unwrap();
        let config = TrainConfig {
            model: ModelConfig::micro(),
            batch_size: 2,
            stage1_steps: 3,
            stage2_steps: 2,
            lr: 1e-3,
            precision: DType::F64,
            log_interval: 1,
            checkpoint_dir: dir.join("ckpt"),
            dataset: dir.join("data"),
            ..TrainConfig::default()
        };
        (config, ds)
    }

    #[test]
    fn zero_steps_leave_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let (mut config, ds) = setup(dir.path());
        config.stage1_steps = 0;
        config.stage2_steps = 0;
        let (_, init) = Checkpoint::<f64>::initial(&config).unwrap();
        let (c1, r1) = train_stage1::<f64>(&config, &ds).unwrap();
        assert!(r1.is_empty());
        assert_eq!(c1.to_bytes(), init.to_bytes());
        let (c2, _) = train_stage2(&config, c1, &ds).unwrap();
        assert_eq!(c2.to_bytes(), init.to_bytes());
    }

    #[test]
    fn deterministic_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let (config, ds) = setup(dir.path());
        let (a, ra) = train_stage1::<f64>(&config, &ds).unwrap();
        let (b, rb) = train_stage1::<f64>(&config, &ds).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ra, rb);
        assert_eq!(a.stage1_step, 3);
        let log = std::fs::read_to_string(loss_log_path(&config.checkpoint_dir, Stage::One)).unwrap();
        let lines: Vec<_> = log.lines().collect();
        // Two runs appended to the same file, header written once.
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], LOG_HEADER);
        assert!(lines[1].starts_with("1\t") && lines[1].split('\t').count() == 7);
        assert!(ra.iter().all(|r| r.losses.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let (mut config, ds) = setup(dir.path());
        config.log_interval = 0;
        let (full, _) = train_stage1::<f64>(&config, &ds).unwrap();
        let mut t = Trainer::<f64>::from_config(&config, &ds).unwrap();
        t.run_until(Stage::One, 1).unwrap();
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(t.checkpoint(), &path).unwrap();
        let (model, ckpt) = load_checkpoint::<f64>(&path).unwrap();
        let mut resumed = Trainer::new(model, ckpt, &ds).unwrap();
        resumed.run_stage1().unwrap();
        assert_eq!(resumed.checkpoint().to_bytes(), full.to_bytes());
    }

    #[test]
    fn stage2_changes_generator_and_discriminator() {
        let dir = tempfile::tempdir().unwrap();
        let (config, ds) = setup(dir.path());
        let (c1, _) = train_stage1::<f64>(&config, &ds).unwrap();
        let (c2, r2) = train_stage2(&config, c1.clone(), &ds).unwrap();
        assert_eq!((c2.stage1_step, c2.stage2_step), (3, 2));
        assert_eq!(r2.len(), 2);
        assert!(!c2.params.generator.bitwise_eq(&c1.params.generator));
        assert!(!c2.params.discriminator.bitwise_eq(&c1.params.discriminator));
    }

    #[test]
    fn one_view_per_object_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let (config, ds) = setup(dir.path());
        let log = RefCell::new(Vec::new());
        let mut t = Trainer::<f64>::from_config(&config, &ds).unwrap();
        t.set_audit_hook(Box::new(|stage, step, seen: &[(String, Pose)]| {
            log.borrow_mut().push((stage, step, seen.to_vec()))
        }));
        t.run_stage1().unwrap();
        t.run_stage2().unwrap();
        drop(t);
        let log = log.into_inner();
        assert_eq!(log.len(), 5);
        for (_, _, seen) in &log {
            let ids: HashSet<_> = seen.iter().map(|(id, _)| id).collect();
            assert_eq!(ids.len(), seen.len());
            for (id, _) in seen {
                assert_eq!(ds.object(id).unwrap().split, Split::Train);
            }
        }
    }

    #[test]
    fn rejects_oversized_batch() {
        let dir = tempfile::tempdir().unwrap();
        let (mut config, ds) = setup(dir.path());
        config.batch_size = 50;
        assert!(matches!(Trainer::<f64>::from_config(&config, &ds), Err(Error::Config(_))));
    }
}
