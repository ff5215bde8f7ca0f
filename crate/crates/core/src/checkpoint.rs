//! Checkpoints: all parameters, optimizer moments, step counter and a numeric
//! configuration snapshot in one tensor file, plus two UTF-8 sidecars for the
//! vocabulary (`<file>.vocab.tsv`) and prompt templates (`<file>.prompts.txt`).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::AugConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams, TEACHER};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::tensor_file::{self, write_atomic, StoredTensor};
use crate::text::{PromptSet, TextConfig, Vocab};
use crate::trainer::{Objective, TeacherMode, TrainConfig};

const ADAM_M: &str = "adam/m/";
const ADAM_V: &str = "adam/v/";
const CONFIG: &str = "config/";
const STATE: &str = "state/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Training configuration; file paths are not persisted.
    pub train: TrainConfig,
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    pub step: usize,
    pub vocab: Vocab,
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name: OsString = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn vocab_path(path: &Path) -> PathBuf {
    sidecar(path, ".vocab.tsv")
}

pub fn prompts_path(path: &Path) -> PathBuf {
    sidecar(path, ".prompts.txt")
}

fn config_values(cfg: &TrainConfig) -> Vec<(&'static str, Vec<f64>)> {
    let e = &cfg.model.encoder;
    let t = &cfg.model.text;
    let n = |v: usize| vec![v as f64];
    let list = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let teacher_mode = match cfg.teacher_mode {
        TeacherMode::Same => 0.0,
        TeacherMode::Soft => 1.0,
        TeacherMode::Hard => 2.0,
    };
    let objective = match cfg.objective {
        Objective::Full => 0.0,
        Objective::SingleView => 1.0,
    };
    let rotations = if cfg.aug.rotations.is_empty() {
        vec![-1.0]
    } else {
        cfg.aug.rotations.iter().map(|&r| r as f64).collect()
    };
    vec![
        ("encoder.image_size", n(e.image_size)),
        ("encoder.patch_size", n(e.patch_size)),
        ("encoder.channels", n(e.channels)),
        ("encoder.embed_dim", n(e.embed_dim)),
        ("encoder.depth_per_stage", list(&e.depth_per_stage)),
        ("encoder.heads", n(e.heads)),
        ("encoder.group_token_counts", list(&e.group_token_counts)),
        ("encoder.mlp_ratio", n(e.mlp_ratio)),
        ("text.vocab_size", n(t.vocab_size)),
        ("text.max_len", n(t.max_len)),
        ("text.width", n(t.width)),
        ("text.depth", n(t.depth)),
        ("text.heads", n(t.heads)),
        ("text.mlp_ratio", n(t.mlp_ratio)),
        ("text.embed_dim", n(t.embed_dim)),
        ("model.per_loss_tau", vec![cfg.model.per_loss_tau as u8 as f64]),
        ("model.tau_init", vec![cfg.model.tau_init]),
        ("train.batch_size", n(cfg.batch_size)),
        ("train.epochs", n(cfg.epochs)),
        ("train.warmup_epochs", n(cfg.warmup_epochs)),
        ("train.base_lr", vec![cfg.base_lr]),
        ("train.weight_decay", vec![cfg.weight_decay]),
        ("train.ema_alpha", vec![cfg.ema_alpha]),
        ("train.grad_clip", vec![cfg.grad_clip]),
        ("train.seed", vec![(cfg.seed >> 32) as f64, (cfg.seed & 0xFFFF_FFFF) as f64]),
        ("train.hard_from_step", n(cfg.hard_from_step)),
        ("train.teacher_mode", vec![teacher_mode]),
        ("train.objective", vec![objective]),
        ("train.eval_interval", n(cfg.eval_interval)),
        ("aug.enabled", vec![cfg.aug.enabled as u8 as f64]),
        ("aug.crop_scale", vec![cfg.aug.crop_scale.0, cfg.aug.crop_scale.1]),
        ("aug.flip_prob", vec![cfg.aug.flip_prob]),
        ("aug.rotations", rotations),
        ("aug.min_overlap", vec![cfg.aug.min_overlap]),
        ("aug.out_size", n(cfg.aug.out_size)),
        ("labels.threshold", vec![cfg.threshold]),
        ("labels.inference_tau", vec![cfg.inference_tau.unwrap_or(-1.0)]),
    ]
}

struct ConfigReader<'a> {
    values: &'a BTreeMap<String, StoredTensor>,
}

impl ConfigReader<'_> {
    fn list(&self, key: &str) -> Result<&[f64]> {
        self.values
            .get(&format!("{CONFIG}{key}"))
            .map(StoredTensor::values)
            .ok_or_else(|| Error::CheckpointMismatch(format!("checkpoint lacks {CONFIG}{key}")))
    }

    fn real(&self, key: &str) -> Result<f64> {
        match self.list(key)? {
            [v] => Ok(*v),
            _ => Err(Error::CheckpointMismatch(format!("{CONFIG}{key} must hold one value"))),
        }
    }

    fn int(&self, key: &str) -> Result<usize> {
        let v = self.real(key)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::CheckpointMismatch(format!("{CONFIG}{key} is not a count")));
        }
        Ok(v as usize)
    }

    fn ints(&self, key: &str) -> Result<Vec<usize>> {
        Ok(self.list(key)?.iter().map(|&v| v as usize).collect())
    }

    fn train_config(&self, prompts: PromptSet) -> Result<TrainConfig> {
        let encoder = EncoderConfig {
            image_size: self.int("encoder.image_size")?,
            patch_size: self.int("encoder.patch_size")?,
            channels: self.int("encoder.channels")?,
            embed_dim: self.int("encoder.embed_dim")?,
            depth_per_stage: self.ints("encoder.depth_per_stage")?,
            heads: self.int("encoder.heads")?,
            group_token_counts: self.ints("encoder.group_token_counts")?,
            mlp_ratio: self.int("encoder.mlp_ratio")?,
        };
        let text = TextConfig {
            vocab_size: self.int("text.vocab_size")?,
            max_len: self.int("text.max_len")?,
            width: self.int("text.width")?,
            depth: self.int("text.depth")?,
            heads: self.int("text.heads")?,
            mlp_ratio: self.int("text.mlp_ratio")?,
            embed_dim: self.int("text.embed_dim")?,
        };
        let model = ModelConfig {
            encoder,
            text,
            per_loss_tau: self.real("model.per_loss_tau")? != 0.0,
            tau_init: self.real("model.tau_init")?,
        };
        let seed = match self.list("train.seed")? {
            [hi, lo] => ((*hi as u64) << 32) | *lo as u64,
            _ => return Err(Error::CheckpointMismatch("train.seed must hold two halves".into())),
        };
        let teacher_mode = match self.int("train.teacher_mode")? {
            0 => TeacherMode::Same,
            1 => TeacherMode::Soft,
            2 => TeacherMode::Hard,
            other => return Err(Error::CheckpointMismatch(format!("unknown teacher mode {other}"))),
        };
        let objective = match self.int("train.objective")? {
            0 => Objective::Full,
            1 => Objective::SingleView,
            other => return Err(Error::CheckpointMismatch(format!("unknown objective {other}"))),
        };
        let rotations = match self.list("aug.rotations")? {
            [r] if *r < 0.0 => Vec::new(),
            rs => rs.iter().map(|&r| r as u8).collect(),
        };
        let crop_scale = match self.list("aug.crop_scale")? {
            [a, b] => (*a, *b),
            _ => return Err(Error::CheckpointMismatch("aug.crop_scale must hold two values".into())),
        };
        let aug = AugConfig {
            enabled: self.real("aug.enabled")? != 0.0,
            crop_scale,
            flip_prob: self.real("aug.flip_prob")?,
            rotations,
            min_overlap: self.real("aug.min_overlap")?,
            out_size: self.int("aug.out_size")?,
        };
        Ok(TrainConfig {
            model,
            batch_size: self.int("train.batch_size")?,
            epochs: self.int("train.epochs")?,
            warmup_epochs: self.int("train.warmup_epochs")?,
            base_lr: self.real("train.base_lr")?,
            weight_decay: self.real("train.weight_decay")?,
            ema_alpha: self.real("train.ema_alpha")?,
            grad_clip: self.real("train.grad_clip")?,
            seed,
            hard_from_step: self.int("train.hard_from_step")?,
            teacher_mode,
            objective,
            prompts,
            aug,
            eval_interval: self.int("train.eval_interval")?,
            threshold: self.real("labels.threshold")?,
            inference_tau: Some(self.real("labels.inference_tau")?).filter(|&t| t > 0.0),
            ..TrainConfig::toy()
        })
    }
}

/// Element type of the parameters stored at `path`.
pub fn stored_dtype(path: &Path) -> Result<DType> {
    tensor_file::load(path)?
        .into_iter()
        .find(|t| !t.name.starts_with(CONFIG) && !t.name.starts_with(STATE))
        .map(|t| t.dtype)
        .ok_or_else(|| Error::CheckpointMismatch("checkpoint holds no parameters".into()))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.train.model.clone())
    }

    pub fn to_stored(&self) -> Vec<StoredTensor> {
        let mut out = self.params.trainable.to_stored();
        out.extend(self.params.teacher.to_stored());
        out.extend(self.adam.m.renamed("", ADAM_M).to_stored());
        out.extend(self.adam.v.renamed("", ADAM_V).to_stored());
        for (key, values) in config_values(&self.train) {
            let t = Tensor::<f64>::new(vec![values.len()], values).expect("non-empty config entry");
            out.push(StoredTensor::from_tensor(format!("{CONFIG}{key}"), &t));
        }
        out.push(StoredTensor::from_tensor(format!("{STATE}step"), &Tensor::<f64>::scalar(self.step as f64)));
        out.push(StoredTensor::from_tensor(format!("{STATE}adam_t"), &Tensor::<f64>::scalar(self.adam.t as f64)));
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(&vocab_path(path), self.vocab.to_tsv().as_bytes())?;
        let prompts = self.train.prompts.templates().join("\n") + "\n";
        write_atomic(&prompts_path(path), prompts.as_bytes())?;
        tensor_file::save(path, &self.to_stored())
    }

    pub fn from_stored(stored: Vec<StoredTensor>, vocab: Vocab, prompts: PromptSet) -> Result<Self> {
        let mut meta = BTreeMap::new();
        let mut trainable = ParamStore::new();
        let mut teacher = ParamStore::new();
        let mut adam = AdamState::new();
        for s in stored {
            if s.name.starts_with(CONFIG) || s.name.starts_with(STATE) {
                meta.insert(s.name.clone(), s);
            } else if let Some(rest) = s.name.strip_prefix(ADAM_M) {
                adam.m.insert(rest, s.to_tensor()?);
            } else if let Some(rest) = s.name.strip_prefix(ADAM_V) {
                adam.v.insert(rest, s.to_tensor()?);
            } else if s.name.starts_with(TEACHER) {
                teacher.insert(s.name.clone(), s.to_tensor()?);
            } else {
                trainable.insert(s.name.clone(), s.to_tensor()?);
            }
        }
        let reader = ConfigReader { values: &meta };
        let train = reader.train_config(prompts)?;
        let state = |key: &str| {
            meta.get(&format!("{STATE}{key}"))
                .and_then(|t| t.values().first().copied())
                .ok_or_else(|| Error::CheckpointMismatch(format!("checkpoint lacks {STATE}{key}")))
        };
        let step = state("step")? as usize;
        adam.t = state("adam_t")? as u64;
        if vocab.len() != train.model.text.vocab_size {
            return Err(Error::CheckpointMismatch(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                train.model.text.vocab_size
            )));
        }
        let params = ModelParams { trainable, teacher };
        Model::new(train.model.clone())?.check_params(&params)?;
        Ok(Checkpoint { train, params, adam, step, vocab })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let stored = tensor_file::load(path)?;
        let vocab = Vocab::load(&vocab_path(path))?;
        let templates = fs::read_to_string(prompts_path(path))?.lines().map(str::to_string).collect();
        Self::from_stored(stored, vocab, PromptSet::new(templates)?)
    }
}
