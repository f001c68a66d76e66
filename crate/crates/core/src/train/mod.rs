//! Two-stage training: data sampling, variable-K forward, AdamW updates,
//! checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
pub mod optim;

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::FormatError;
use crate::eval::{evaluate_prediction, CameraSource};
use crate::losses::{stage_loss, LossError, LossReport, Stage};
use crate::metrics::{MetricError, MetricReport};
use crate::model::{Binder, ForwardOptions, Model, ModelError};
use crate::scalar::Scalar;
use crate::schedule::ScheduleError;
use crate::synthdata::{generate_scene, mixture_probs, read_record, write_record, DataError, DatasetRecord, Sample, SceneSpec};
use crate::tensor::{Tape, Tensor, TensorError};

pub use checkpoint::{load_params, Checkpoint};
pub use config::{Config, DataConfig, KSamplerKind, ScheduleConfig, TrainConfig};
pub use optim::{AdamW, OptimConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("parameter {name}: {reason}")]
    Param { name: String, reason: String },
    #[error("checkpoint config does not match the run config: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A named group of scenes sampled as one mixture component.
#[derive(Clone, Debug)]
pub struct Shard {
    pub id: String,
    pub records: Vec<DatasetRecord>,
}

/// `gen-data` manifest: one entry per shard with its scene files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub mixture_alpha: f64,
    pub shards: Vec<ManifestShard>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestShard {
    pub id: String,
    pub count: usize,
    pub files: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl Manifest {
    pub fn counts(&self) -> Vec<f64> {
        self.shards.iter().map(|s| s.count as f64).collect()
    }

    pub fn probs(&self) -> Result<Vec<f64>, TrainError> {
        Ok(mixture_probs(&self.counts(), self.mixture_alpha)?)
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    /// Read every shard listed in the manifest under `dir`.
    pub fn load_shards(&self, dir: &Path) -> Result<Vec<Shard>, TrainError> {
        self.shards
            .iter()
            .map(|s| {
                let records = s.files.iter().map(|f| read_record(dir.join(f))).collect::<Result<Vec<_>, _>>()?;
                Ok(Shard { id: s.id.clone(), records })
            })
            .collect()
    }
}

/// Seed of scene `index` (counted across shards) for dataset seed `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.random()
}

/// Render `data.scenes[i]` scenes per shard into `dir` and write the manifest.
pub fn write_dataset(config: &Config, dir: &Path) -> Result<Manifest, TrainError> {
    config.validate()?;
    let io = |e: std::io::Error, p: &Path| TrainError::Io(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
    let (h, w) = (config.model.image_height, config.model.image_width);
    let mut manifest = Manifest {
        mixture_alpha: config.data.mixture_alpha,
        shards: Vec::new(),
    };
    let mut index = 0;
    for (s, &count) in config.data.scenes.iter().enumerate() {
        let mut files = Vec::with_capacity(count);
        for j in 0..count {
            let spec = SceneSpec::random(scene_seed(config.data.seed, index), config.data.views, h, w);
            let name = format!("shard{s}_scene{j:04}.djvw");
            write_record(dir.join(&name), &generate_scene(&spec)?)?;
            files.push(name);
            index += 1;
        }
        manifest.shards.push(ManifestShard {
            id: format!("shard{s}"),
            count,
            files,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| io(e, &path))?;
    Ok(manifest)
}

/// Manifest and every shard under `dir`.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Shard>), TrainError> {
    let manifest = Manifest::load(dir)?;
    let shards = manifest.load_shards(dir)?;
    Ok((manifest, shards))
}

/// One optimizer step's log line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub k: usize,
    pub views: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossReport,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!(
            "step={} k={} views={} lr={:.6e} grad_norm={:.6e} total={:.6e} depth={:.6e} grad={:.6e} ray={:.6e} point={:.6e} camera={:.6e} conf={:.6e}",
            self.step, self.k, self.views, self.lr, self.grad_norm, l.total, l.depth, l.grad, l.ray, l.point, l.camera, l.conf
        )
    }
}

/// Parameters updated in each stage.
pub fn trainable(stage: Stage) -> fn(&str) -> bool {
    match stage {
        Stage::One => |n| !n.starts_with("depth_conv."),
        Stage::Two => |n| n.starts_with("depth_dec.") || n.starts_with("depth_conv."),
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut r = LossReport::default();
    for x in reports {
        r.total += x.total / n;
        r.depth += x.depth / n;
        r.grad += x.grad / n;
        r.ray += x.ray / n;
        r.point += x.point / n;
        r.camera += x.camera / n;
        r.conf += x.conf / n;
        r.pred_scale += x.pred_scale / n;
        r.gt_scale += x.gt_scale / n;
    }
    r
}

pub struct Trainer<T> {
    pub config: Config,
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub step: usize,
    probs: Vec<f64>,
    /// `samples[shard][scene][v - views_min]`.
    samples: Vec<Vec<Vec<Sample<T>>>>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh stage-1 run with parameters initialized from `train.seed`.
    pub fn new(config: Config, shards: &[Shard]) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.train.seed)?;
        Self::with_model(config, model, AdamW::new(), 0, shards)
    }

    fn with_model(config: Config, model: Model<T>, optimizer: AdamW<T>, step: usize, shards: &[Shard]) -> Result<Self, TrainError> {
        if shards.is_empty() || shards.iter().any(|s| s.records.is_empty()) {
            return Err(TrainError::Config("every shard needs at least one scene".into()));
        }
        let d = &config.data;
        let counts: Vec<f64> = shards.iter().map(|s| s.records.len() as f64).collect();
        let probs = mixture_probs(&counts, d.mixture_alpha)?;
        let mut samples = Vec::with_capacity(shards.len());
        for s in shards {
            let mut per_scene = Vec::with_capacity(s.records.len());
            for r in &s.records {
                if r.views.len() < d.views_max {
                    return Err(TrainError::Config(format!(
                        "shard {} has a scene with {} views, data.views_max is {}",
                        s.id,
                        r.views.len(),
                        d.views_max
                    )));
                }
                if (r.height, r.width) != (config.model.image_height, config.model.image_width) {
                    return Err(TrainError::Config(format!(
                        "shard {} has {}x{} images, model expects {}x{}",
                        s.id, r.height, r.width, config.model.image_height, config.model.image_width
                    )));
                }
                let by_v = (d.views_min..=d.views_max)
                    .map(|v| r.sample::<T>(Some(v)))
                    .collect::<Result<Vec<_>, _>>()?;
                per_scene.push(by_v);
            }
            samples.push(per_scene);
        }
        Ok(Self {
            config,
            model,
            optimizer,
            step,
            probs,
            samples,
        })
    }

    /// Continue a run from its checkpoint. Only `train.steps` and the
    /// logging and checkpoint intervals may differ from the stored config.
    pub fn resume(config: Config, ckpt: Checkpoint<T>, shards: &[Shard]) -> Result<Self, TrainError> {
        config.validate()?;
        let mut stored = ckpt.config.clone();
        stored.train.steps = config.train.steps;
        stored.train.log_every = config.train.log_every;
        stored.train.checkpoint_every = config.train.checkpoint_every;
        if stored != config {
            return Err(TrainError::Mismatch(first_difference(&stored, &config)));
        }
        let model = ckpt.model()?;
        Self::with_model(config, model, ckpt.optimizer, ckpt.step as usize, shards)
    }

    /// Start stage 2 from a stage-1 checkpoint with a fresh optimizer.
    pub fn stage_two(config: Config, ckpt: &Checkpoint<T>, shards: &[Shard]) -> Result<Self, TrainError> {
        config.validate()?;
        if config.train.stage != 2 {
            return Err(TrainError::Config("stage-2 run needs train.stage = 2".into()));
        }
        if ckpt.config.train.stage != 1 {
            return Err(TrainError::Config("stage 2 starts from a stage-1 checkpoint".into()));
        }
        if ckpt.config.model != config.model {
            return Err(TrainError::Mismatch("model sections differ".into()));
        }
        let model = ckpt.model()?;
        Self::with_model(config, model, AdamW::new(), 0, shards)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step as u64,
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn stage(&self) -> Stage {
        self.config.train.stage()
    }

    /// Sample a batch, accumulate gradients, and apply one AdamW update.
    pub fn train_step(&mut self) -> Result<LogRecord, TrainError> {
        let cfg = &self.config;
        let step = self.step;
        let stage = cfg.train.stage();
        let mut rng = step_rng(cfg.train.seed, step);
        let k = cfg.schedule.sampler(rng.random())?.sample_k();
        let views = rng.random_range(cfg.data.views_min..=cfg.data.views_max);
        let lr = cfg.optim.lr_at(step, cfg.train.steps);
        let pick = WeightedIndex::new(&self.probs).map_err(|e| TrainError::Config(e.to_string()))?;
        let batch = cfg.train.batch;
        let inv = T::lit(1.0 / batch as f64);
        let opts = ForwardOptions {
            depth_head: cfg.train.depth_head(),
            trace: false,
        };
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut reports = Vec::with_capacity(batch);
        for _ in 0..batch {
            let shard = pick.sample(&mut rng);
            let scene = rng.random_range(0..self.samples[shard].len());
            let sample = &self.samples[shard][scene][views - cfg.data.views_min];
            let mut tape = Tape::new();
            let mut b = Binder::with_trainable(&self.model.params, trainable(stage));
            let out = self
                .model
                .forward(&mut tape, &mut b, &sample.images, k, opts)
                .map_err(|e| match e {
                    ModelError::NonFinite { .. } | ModelError::Tensor(TensorError::NonFinite { .. }) => {
                        TrainError::NonFinite { step }
                    }
                    other => other.into(),
                })?;
            let loss = stage_loss(&mut tape, stage, &out.prediction, &sample.target, &cfg.loss).map_err(|e| match e {
                LossError::Tensor(TensorError::NonFinite { .. }) => TrainError::NonFinite { step },
                other => other.into(),
            })?;
            if !loss.report.total.is_finite() {
                return Err(TrainError::NonFinite { step });
            }
            let g = tape.backward(loss.total)?;
            for (name, var) in b.bound() {
                if !tape.requires_grad(var) {
                    continue;
                }
                let Some(gv) = g.get(var) else { continue };
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, &x) in acc.data_mut().iter_mut().zip(gv.data()) {
                            *a = *a + x * inv;
                        }
                    }
                    None => {
                        let scaled = Tensor::new(gv.shape().to_vec(), gv.data().iter().map(|&x| x * inv).collect())?;
                        grads.insert(name, scaled);
                    }
                }
            }
            reports.push(loss.report);
        }
        let grad_norm = optim::clip_global_norm(&mut grads, cfg.optim.grad_clip);
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        self.optimizer.update(&mut self.model.params, &grads, &cfg.optim, lr);
        self.step += 1;
        Ok(LogRecord {
            step,
            k,
            views,
            lr,
            grad_norm,
            loss: mean_report(&reports),
        })
    }

    /// Run until `train.steps`, calling `log` after every step.
    pub fn run(&mut self, mut log: impl FnMut(&LogRecord)) -> Result<(), TrainError> {
        while self.step < self.config.train.steps {
            let rec = self.train_step()?;
            log(&rec);
        }
        Ok(())
    }

    /// Every training scene with all configured views.
    pub fn train_samples(&self) -> Vec<(Tensor<T>, crate::losses::Target<T>)> {
        self.samples
            .iter()
            .flatten()
            .map(|by_v| {
                let s = by_v.last().expect("at least one view count");
                (s.images.clone(), s.target.clone())
            })
            .collect()
    }

    /// Train-set metrics at `k_inf` with the stage's depth head.
    pub fn evaluate(&self, k_inf: usize, source: CameraSource) -> Result<MetricReport, TrainError> {
        let mut reports = Vec::new();
        for (images, target) in self.train_samples() {
            let pred = self.model.predict(&images, k_inf, self.config.train.depth_head())?;
            reports.push(evaluate_prediction(&pred, &target, source)?);
        }
        Ok(MetricReport::merge(&reports))
    }
}

fn first_difference(a: &Config, b: &Config) -> String {
    let (ta, tb) = (a.to_toml(), b.to_toml());
    for (la, lb) in ta.lines().zip(tb.lines()) {
        if la != lb {
            return format!("checkpoint has `{la}`, run has `{lb}`");
        }
    }
    "sections differ".into()
}
