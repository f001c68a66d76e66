//! Run configuration: TOML with one table per section, every key validated,
//! unknown keys rejected. Environment variables named
//! `LOOPRECON_<SECTION>_<KEY>` override file values.

use serde::{Deserialize, Serialize};

use super::optim::OptimConfig;
use super::TrainError;
use crate::losses::{LossWeights, Stage};
use crate::model::{DepthHead, ModelConfig};
use crate::schedule::KSampler;

pub const ENV_PREFIX: &str = "LOOPRECON_";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KSamplerKind {
    /// Always `k_max`.
    Fixed,
    #[default]
    Beta,
}

impl std::str::FromStr for KSamplerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "beta" => Ok(Self::Beta),
            other => Err(format!("unknown k sampler {other:?} (expected fixed or beta)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub k_sampler: KSamplerKind,
    pub k_min: usize,
    pub k_max: usize,
    pub beta_alpha: f64,
    pub beta_beta: f64,
    /// Inference step count.
    pub k_inf: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            k_sampler: KSamplerKind::Beta,
            k_min: 8,
            k_max: 16,
            beta_alpha: 2.0,
            beta_beta: 1.0,
            k_inf: 16,
        }
    }
}

impl ScheduleConfig {
    pub fn sampler(&self, seed: u64) -> Result<KSampler, TrainError> {
        Ok(match self.k_sampler {
            KSamplerKind::Fixed => KSampler::fixed(self.k_max, seed)?,
            KSamplerKind::Beta => KSampler::new(self.beta_alpha, self.beta_beta, self.k_min, self.k_max, seed)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scenes per shard written by `gen-data`.
    pub scenes: Vec<usize>,
    /// Views rendered per scene.
    pub views: usize,
    /// Views used per training sample, sampled uniformly in this range.
    pub views_min: usize,
    pub views_max: usize,
    pub mixture_alpha: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: vec![8],
            views: 2,
            views_min: 2,
            views_max: 2,
            mixture_alpha: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    /// Scenes per optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub log_every: usize,
    /// Steps between checkpoint writes by the CLI; the final step is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 2000,
            batch: 1,
            seed: 0,
            deterministic: true,
            log_every: 50,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn stage(&self) -> Stage {
        if self.stage == 2 {
            Stage::Two
        } else {
            Stage::One
        }
    }

    pub fn depth_head(&self) -> DepthHead {
        match self.stage() {
            Stage::One => DepthHead::Linear,
            Stage::Two => DepthHead::Conv,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

fn range<T: PartialOrd + std::fmt::Display>(key: &str, v: T, lo: T, hi: T) -> Result<(), TrainError> {
    if v < lo || v > hi {
        return Err(TrainError::Config(format!("{key} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

impl Config {
    /// Desk-scale stage-2 defaults: lower rate, no warmup.
    pub fn stage_two(mut self) -> Self {
        self.train.stage = 2;
        self.optim.lr = 1e-4;
        self.optim.warmup_steps = 0;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        let s = &self.schedule;
        range("schedule.k_min", s.k_min, 1, 1024)?;
        range("schedule.k_max", s.k_max, s.k_min, 1024)?;
        range("schedule.k_inf", s.k_inf, 1, 1024)?;
        if !(s.beta_alpha > 0.0 && s.beta_beta > 0.0) {
            return Err(TrainError::Config("schedule.beta_alpha and beta_beta must be positive".into()));
        }
        if self.model.variant == crate::model::BlockVariant::Decoupled && s.k_max.max(s.k_inf) > self.model.k_max {
            return Err(TrainError::Config(format!(
                "decoupled model has {} blocks but the schedule needs {}",
                self.model.k_max,
                s.k_max.max(s.k_inf)
            )));
        }
        let l = &self.loss;
        for (k, v) in [
            ("depth", l.depth),
            ("ray", l.ray),
            ("point", l.point),
            ("camera", l.camera),
            ("grad", l.grad),
            ("cam_translation", l.cam_translation),
            ("cam_rotation", l.cam_rotation),
            ("cam_fov", l.cam_fov),
        ] {
            range(&format!("loss.{k}"), v, 0.0, 1e6)?;
        }
        range("loss.conf_lambda", l.conf_lambda, 1e-9, 1e6)?;
        range("loss.grad_scales", l.grad_scales, 1, 16)?;
        let o = &self.optim;
        range("optim.lr", o.lr, 0.0, 1.0)?;
        range("optim.weight_decay", o.weight_decay, 0.0, 1.0)?;
        range("optim.beta1", o.beta1, 0.0, 0.999_999)?;
        range("optim.beta2", o.beta2, 0.0, 0.999_999_9)?;
        range("optim.eps", o.eps, 0.0, 1.0)?;
        range("optim.min_lr_ratio", o.min_lr_ratio, 0.0, 1.0)?;
        range("optim.encoder_lr_mult", o.encoder_lr_mult, 0.0, 10.0)?;
        range("optim.grad_clip", o.grad_clip, 0.0, 1e6)?;
        let d = &self.data;
        if d.scenes.is_empty() || d.scenes.contains(&0) {
            return Err(TrainError::Config("data.scenes must list positive shard sizes".into()));
        }
        range("data.views", d.views, 1, 64)?;
        range("data.views_min", d.views_min, 1, d.views)?;
        range("data.views_max", d.views_max, d.views_min, d.views)?;
        range("data.mixture_alpha", d.mixture_alpha, 0.0, 10.0)?;
        let t = &self.train;
        range("train.stage", t.stage, 1, 2)?;
        range("train.batch", t.batch, 1, 1024)?;
        range("train.log_every", t.log_every, 1, usize::MAX)?;
        range("train.checkpoint_every", t.checkpoint_every, 1, usize::MAX)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    /// Parse, apply `LOOPRECON_<SECTION>_<KEY>=value` overrides, validate.
    ///
    /// Override values are parsed as TOML literals, falling back to strings.
    pub fn from_toml_with_env(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, TrainError> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        for (key, value) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
            let lower = rest.to_ascii_lowercase();
            let Some((section, field)) = lower.split_once('_') else {
                return Err(TrainError::Config(format!("{key}: expected {ENV_PREFIX}<SECTION>_<KEY>")));
            };
            let parsed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or(toml::Value::String(value.clone()));
            let table = root
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match table {
                toml::Value::Table(t) => {
                    t.insert(field.to_string(), parsed);
                }
                _ => return Err(TrainError::Config(format!("{section} is not a section"))),
            }
        }
        let cfg: Config = root.try_into().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_env_and_file(text: &str) -> Result<Self, TrainError> {
        Self::from_toml_with_env(text, std::env::vars())
    }
}
