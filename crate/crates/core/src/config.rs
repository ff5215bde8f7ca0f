//! Run configuration files: UTF-8 `key = value` lines, `#` comments.
//!
//! Every key is optional; missing keys take the value of the selected
//! `preset` (`toy` by default). Unknown keys are rejected.
//!
//! | key | default (toy) | meaning |
//! |---|---|---|
//! | `preset` | `toy` | `toy` or `paper`; applied before every other key |
//! | `precision` | `f32` | `f32` or `f64` |
//! | `dataset` | `data` | dataset directory |
//! | `checkpoint` | `checkpoint.vwct` | output checkpoint |
//! | `metrics` | `metrics.tsv` | metrics log, or `none` |
//! | `batch_size` | 16 | |
//! | `epochs` | 5 | |
//! | `warmup_epochs` | 1 | |
//! | `base_lr` | 0.001 | peak learning rate |
//! | `weight_decay` | 0.05 | decoupled, skipped for biases, gains, temperatures |
//! | `ema_alpha` | 0.99 | teacher momentum |
//! | `grad_clip` | 5 | global gradient norm bound |
//! | `seed` | 0 | |
//! | `hard_from_step` | 0 | first step with hard student assignments |
//! | `teacher_mode` | `same` | `same`, `soft` or `hard` |
//! | `objective` | `full` | `full` or `single_view` |
//! | `prompts` | `a photo of a {}.\|a picture of a {}.\|an image of a {}.` | `\|`-separated templates |
//! | `eval_interval` | 0 | steps between intermediate checkpoints |
//! | `max_pairs` | `none` | use only the first n pairs |
//! | `encoder.image_size` | 32 | |
//! | `encoder.patch_size` | 8 | |
//! | `encoder.channels` | 3 | |
//! | `encoder.embed_dim` | 32 | |
//! | `encoder.depth_per_stage` | `1,1` | blocks per stage, optionally one more entry for final blocks |
//! | `encoder.heads` | 2 | |
//! | `encoder.group_token_counts` | `8,4` | |
//! | `encoder.mlp_ratio` | 2 | |
//! | `text.max_len` | 12 | |
//! | `text.width` | 32 | |
//! | `text.depth` | 2 | |
//! | `text.heads` | 2 | |
//! | `text.mlp_ratio` | 2 | |
//! | `text.embed_dim` | 32 | shared embedding width |
//! | `per_loss_tau` | `false` | one temperature per loss |
//! | `tau_init` | 0.07 | |
//! | `aug.enabled` | `true` | |
//! | `aug.crop_scale` | `0.5,1` | crop area range as a fraction of the image |
//! | `aug.flip_prob` | 0.5 | |
//! | `aug.rotations` | `0,1,2,3` | quarter turns; may be empty |
//! | `aug.min_overlap` | 0.4 | |
//! | `labels.classes` | `none` | expected dataset classes, checked before training |
//! | `labels.threshold` | 0.5 | inference threshold stored with the checkpoint |
//! | `labels.inference_tau` | `trained` | softmax temperature at inference |
//!
//! The vocabulary size is taken from the corpus and the augmentation output
//! size from `encoder.image_size`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugConfig;
use crate::error::{Error, Result};
use crate::scalar::DType;
use crate::text::PromptSet;
use crate::trainer::{Objective, TeacherMode, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub precision: DType,
    /// Classes the dataset must declare.
    pub classes: Option<Vec<String>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { train: TrainConfig::toy(), precision: DType::F32, classes: None }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn optional(value: &str) -> Option<&str> {
    (value != "none").then_some(value)
}

/// `key = value` pairs in file order; blank lines and `#` comments skipped.
fn entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::config(format!("line {}: duplicate key {k}", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let entries = entries(text)?;
        let preset = entries.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str());
        let mut cfg = RunConfig::default();
        match preset {
            None | Some("toy") => {}
            Some("paper") => cfg.train = TrainConfig::paper(),
            Some(other) => return Err(Error::config(format!("unknown preset {other:?}"))),
        }
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        cfg.train.aug.out_size = cfg.train.model.encoder.image_size;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let e = &mut t.model.encoder;
        let x = &mut t.model.text;
        let a: &mut AugConfig = &mut t.aug;
        match key {
            "preset" => {}
            "precision" => {
                self.precision = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::config(format!("precision must be f32 or f64, got {v:?}"))),
                }
            }
            "dataset" => t.dataset = PathBuf::from(v),
            "checkpoint" => t.checkpoint = PathBuf::from(v),
            "metrics" => t.metrics = optional(v).map(PathBuf::from),
            "batch_size" => t.batch_size = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "base_lr" => t.base_lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "ema_alpha" => t.ema_alpha = parse(key, v)?,
            "grad_clip" => t.grad_clip = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "hard_from_step" => t.hard_from_step = parse(key, v)?,
            "teacher_mode" => {
                t.teacher_mode = match v {
                    "same" => TeacherMode::Same,
                    "soft" => TeacherMode::Soft,
                    "hard" => TeacherMode::Hard,
                    _ => return Err(Error::config(format!("teacher_mode must be same, soft or hard, got {v:?}"))),
                }
            }
            "objective" => {
                t.objective = match v {
                    "full" => Objective::Full,
                    "single_view" => Objective::SingleView,
                    _ => return Err(Error::config(format!("objective must be full or single_view, got {v:?}"))),
                }
            }
            "prompts" => t.prompts = PromptSet::new(v.split('|').map(|p| p.trim().to_string()).collect())?,
            "eval_interval" => t.eval_interval = parse(key, v)?,
            "max_pairs" => t.max_pairs = optional(v).map(|n| parse(key, n)).transpose()?,
            "encoder.image_size" => e.image_size = parse(key, v)?,
            "encoder.patch_size" => e.patch_size = parse(key, v)?,
            "encoder.channels" => e.channels = parse(key, v)?,
            "encoder.embed_dim" => e.embed_dim = parse(key, v)?,
            "encoder.depth_per_stage" => e.depth_per_stage = parse_list(key, v)?,
            "encoder.heads" => e.heads = parse(key, v)?,
            "encoder.group_token_counts" => e.group_token_counts = parse_list(key, v)?,
            "encoder.mlp_ratio" => e.mlp_ratio = parse(key, v)?,
            "text.max_len" => x.max_len = parse(key, v)?,
            "text.width" => x.width = parse(key, v)?,
            "text.depth" => x.depth = parse(key, v)?,
            "text.heads" => x.heads = parse(key, v)?,
            "text.mlp_ratio" => x.mlp_ratio = parse(key, v)?,
            "text.embed_dim" => x.embed_dim = parse(key, v)?,
            "per_loss_tau" => t.model.per_loss_tau = parse_bool(key, v)?,
            "tau_init" => t.model.tau_init = parse(key, v)?,
            "aug.enabled" => a.enabled = parse_bool(key, v)?,
            "aug.crop_scale" => match parse_list::<f64>(key, v)?.as_slice() {
                &[lo, hi] if 0.0 < lo && lo <= hi && hi <= 1.0 => a.crop_scale = (lo, hi),
                _ => return Err(Error::config("aug.crop_scale must be two values lo,hi with 0 < lo <= hi <= 1")),
            },
            "aug.flip_prob" => a.flip_prob = parse(key, v)?,
            "aug.rotations" => {
                let r: Vec<u8> = parse_list(key, v)?;
                if r.iter().any(|&q| q > 3) {
                    return Err(Error::config("aug.rotations are quarter turns in 0..=3"));
                }
                a.rotations = r;
            }
            "aug.min_overlap" => a.min_overlap = parse(key, v)?,
            "labels.classes" => {
                self.classes = optional(v).map(|c| c.split(',').map(|s| s.trim().to_string()).collect());
            }
            "labels.threshold" => t.threshold = parse(key, v)?,
            "labels.inference_tau" => {
                t.inference_tau = if v == "trained" { None } else { Some(parse(key, v)?) };
            }
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}
