//! Training loop: student by AdamW, teacher by EMA.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{augment_two_views, AugConfig};
use crate::autodiff::{concat_rows, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::encoder::AssignMode;
use crate::error::{Error, Result};
use crate::losses::{
    clamp_log_tau, multilabel_prompt_loss, seg_consistency_loss, single_view_text_loss, text_views_loss, total_loss,
    LossBreakdown,
};
use crate::model::{Model, ModelConfig, ModelParams, TauSlot};
use crate::numerics::NORM_EPS;
use crate::optim::{clip_grad_norm, cosine_lr, ema_update, AdamConfig, AdamState};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::segment::{TOY_THRESHOLD, VOC_THRESHOLD};
use crate::synth::{pair_seed, Dataset, Pair};
use crate::tensor::Tensor;
use crate::text::{extract_class_word, tokenize, PromptSet, Vocab};

/// What the student is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Segment consistency + text-to-views + multi-label prompt contrast.
    Full,
    /// Image–caption contrast on a single view only.
    SingleView,
}

/// Assignment mode of the teacher encoder during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherMode {
    /// Whatever the student uses at that step.
    Same,
    Soft,
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Text vocabulary size is filled in from the corpus at fit time.
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub ema_alpha: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Student assignments are soft before this step and hard from it on.
    pub hard_from_step: usize,
    pub teacher_mode: TeacherMode,
    pub objective: Objective,
    pub prompts: PromptSet,
    pub aug: AugConfig,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: Option<PathBuf>,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub eval_interval: usize,
    /// Use only the first `n` pairs of the dataset.
    pub max_pairs: Option<usize>,
    /// Inference defaults recorded with the checkpoint.
    pub threshold: f64,
    /// Softmax temperature at inference; `None` uses the trained one.
    pub inference_tau: Option<f64>,
}

impl TrainConfig {
    pub fn toy() -> Self {
        let model = ModelConfig::toy(4);
        let aug = AugConfig::new(model.encoder.image_size);
        TrainConfig {
            model,
            batch_size: 16,
            epochs: 5,
            warmup_epochs: 1,
            base_lr: 1e-3,
            weight_decay: 0.05,
            ema_alpha: 0.99,
            grad_clip: 5.0,
            seed: 0,
            hard_from_step: 0,
            teacher_mode: TeacherMode::Same,
            objective: Objective::Full,
            prompts: PromptSet::default(),
            aug,
            dataset: PathBuf::from("data"),
            checkpoint: PathBuf::from("checkpoint.vwct"),
            metrics: Some(PathBuf::from("metrics.tsv")),
            eval_interval: 0,
            max_pairs: None,
            threshold: TOY_THRESHOLD,
            inference_tau: None,
        }
    }

    pub fn paper() -> Self {
        let model = ModelConfig::paper(4);
        let aug = AugConfig::new(model.encoder.image_size);
        TrainConfig { model, batch_size: 4096, epochs: 30, warmup_epochs: 5, base_lr: 0.0016, aug, threshold: VOC_THRESHOLD, ..Self::toy() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(Error::config(format!("ema_alpha {} outside [0, 1)", self.ema_alpha)));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::config("warmup_epochs must be smaller than epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::config("learning rate, weight decay and clip norm must be non-negative"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if let Some(t) = self.inference_tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidTemperature(t));
            }
        }
        if self.aug.out_size != self.model.encoder.image_size {
            return Err(Error::config("augmentation output size must equal the encoder input size"));
        }
        if self.model.tau_init < crate::losses::TAU_MIN || self.model.tau_init > crate::losses::TAU_MAX {
            return Err(Error::InvalidTemperature(self.model.tau_init));
        }
        self.model.encoder.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// Captions and prompts of a corpus, tokenized once.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub pairs: Vec<Pair>,
    pub classes: Vec<String>,
    pub vocab: Vocab,
    pub captions: Vec<Vec<usize>>,
    /// Token ids of the `M` prompts of each pair's class word.
    pub prompts: Vec<Vec<Vec<usize>>>,
}

/// Vocabulary covering captions, class names and every prompt.
pub fn build_vocab(captions: &[String], classes: &[String], prompts: &PromptSet) -> Result<Vocab> {
    let mut texts: Vec<String> = captions.to_vec();
    texts.extend(classes.iter().cloned());
    for c in classes {
        texts.extend(prompts.generate(c)?);
    }
    Ok(Vocab::build(texts.iter().map(String::as_str)))
}

impl Corpus {
    pub fn new(pairs: Vec<Pair>, classes: Vec<String>, prompts: &PromptSet, max_len: usize) -> Result<Self> {
        let caption_texts: Vec<String> = pairs.iter().map(|p| p.caption.clone()).collect();
        let vocab = build_vocab(&caption_texts, &classes, prompts)?;
        Self::with_vocab(pairs, classes, prompts, max_len, vocab)
    }

    pub fn with_vocab(pairs: Vec<Pair>, classes: Vec<String>, prompts: &PromptSet, max_len: usize, vocab: Vocab) -> Result<Self> {
        let mut by_class: HashMap<String, Vec<Vec<usize>>> = HashMap::new();
        let mut captions = Vec::with_capacity(pairs.len());
        let mut prompt_ids = Vec::with_capacity(pairs.len());
        for pair in &pairs {
            captions.push(tokenize(&pair.caption, &vocab, max_len)?);
            let class = extract_class_word(&pair.caption, &classes)?;
            if !by_class.contains_key(class) {
                let ids = prompts
                    .generate(class)?
                    .iter()
                    .map(|t| tokenize(t, &vocab, max_len))
                    .collect::<Result<Vec<_>>>()?;
                by_class.insert(class.to_string(), ids);
            }
            prompt_ids.push(by_class[class].clone());
        }
        Ok(Corpus { pairs, classes, vocab, captions, prompts: prompt_ids })
    }

    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let dataset = Dataset::open(&cfg.dataset)?;
        let mut pairs = dataset.load_all()?;
        if let Some(n) = cfg.max_pairs {
            pairs.truncate(n);
        }
        Self::new(pairs, dataset.classes, &cfg.prompts, cfg.model.text.max_len)
    }
}

/// One training example: two views as encoder inputs plus tokenized text.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub view_u: Tensor<T>,
    pub view_v: Tensor<T>,
    pub caption: Vec<usize>,
    pub prompts: Vec<Vec<usize>>,
}

/// Builds the samples for corpus indices `indices`, augmenting with seeds
/// derived from `(seed, epoch, index)`.
pub fn make_batch<T: Scalar>(corpus: &Corpus, indices: &[usize], aug: &AugConfig, seed: u64, epoch: usize) -> Result<Vec<Sample<T>>> {
    let epoch_seed = pair_seed(seed, epoch as u64);
    indices
        .iter()
        .map(|&i| {
            let views = augment_two_views(&corpus.pairs[i].image, pair_seed(epoch_seed, i as u64), aug)?;
            Ok(Sample {
                view_u: views.view_u.to_input(),
                view_v: views.view_v.to_input(),
                caption: corpus.captions[i].clone(),
                prompts: corpus.prompts[i].clone(),
            })
        })
        .collect()
}

fn normalized_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = t.clone();
    let eps = T::of(NORM_EPS);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// Text embeddings of `texts`, encoding each distinct sequence once.
fn embed_texts<'t, T: Scalar>(model: &Model, p: &Bound<'t, T>, texts: &[&[usize]]) -> Result<Var<'t, T>> {
    let mut cache: HashMap<&[usize], Var<'t, T>> = HashMap::new();
    let mut rows = Vec::with_capacity(texts.len());
    for &ids in texts {
        let v = match cache.get(ids) {
            Some(&v) => v,
            None => {
                let v = model.embed_text(p, ids)?;
                cache.insert(ids, v);
                v
            }
        };
        rows.push(v);
    }
    concat_rows(&rows)
}

/// Student and teacher assignment modes at `step`.
pub fn assign_modes(cfg: &TrainConfig, step: usize) -> (AssignMode, AssignMode) {
    let student = if step >= cfg.hard_from_step { AssignMode::Hard } else { AssignMode::Soft };
    let teacher = match cfg.teacher_mode {
        TeacherMode::Same => student,
        TeacherMode::Soft => AssignMode::Soft,
        TeacherMode::Hard => AssignMode::Hard,
    };
    (student, teacher)
}

/// Builds the training objective on `tape` for one batch. Teacher segment
/// tokens enter as constants, so no gradient path reaches teacher weights.
pub fn batch_objective<'t, T: Scalar>(
    model: &Model,
    cfg: &TrainConfig,
    params: &ModelParams<T>,
    tape: &'t Tape<T>,
    batch: &[Sample<T>],
    step: usize,
) -> Result<(Bound<'t, T>, Var<'t, T>, LossBreakdown<T>)> {
    let p = params.trainable.bind(tape, true);
    let (student_mode, teacher_mode) = assign_modes(cfg, step);
    let tau = |slot| p.get(model.config.tau_name(slot));
    let captions: Vec<&[usize]> = batch.iter().map(|s| s.caption.as_slice()).collect();

    if cfg.objective == Objective::SingleView {
        let mut views = Vec::with_capacity(batch.len());
        for s in batch {
            let seg = model.student.encode(&p, &s.view_u, student_mode)?.segments;
            views.push(model.embed_view(&p, seg)?);
        }
        let z_i = concat_rows(&views)?;
        let z_t = embed_texts(model, &p, &captions)?;
        let loss = single_view_text_loss(z_i, z_t, tau(TauSlot::TextViews)?)?;
        let zero = T::zero();
        let breakdown = LossBreakdown { seg_consistency: zero, text_views: loss.item(), multilabel: zero, total: loss.item() };
        return Ok((p, loss, breakdown));
    }

    let teacher_out: Vec<(Tensor<T>, Tensor<T>)> = batch
        .par_iter()
        .map(|s| {
            let (u, _) = model.teacher.encode_values(&params.teacher, &s.view_u, teacher_mode)?;
            let (v, _) = model.teacher.encode_values(&params.teacher, &s.view_v, teacher_mode)?;
            Ok((normalized_rows(&u), normalized_rows(&v)))
        })
        .collect::<Result<_>>()?;

    let eps = T::of(NORM_EPS);
    let (mut z_us, mut z_vs, mut z_ut, mut z_vt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut emb_u, mut emb_v) = (Vec::new(), Vec::new());
    for (s, (tu, tv)) in batch.iter().zip(teacher_out) {
        let su = model.student.encode(&p, &s.view_u, student_mode)?.segments;
        let sv = model.student.encode(&p, &s.view_v, student_mode)?.segments;
        emb_u.push(model.embed_view(&p, su)?);
        emb_v.push(model.embed_view(&p, sv)?);
        z_us.push(su.l2_normalize(eps)?);
        z_vs.push(sv.l2_normalize(eps)?);
        z_ut.push(tape.constant(tu));
        z_vt.push(tape.constant(tv));
    }
    let seg = seg_consistency_loss(&z_ut, &z_vt, &z_us, &z_vs, tau(TauSlot::Segments)?)?.total;

    let z_iu = concat_rows(&emb_u)?;
    let z_iv = concat_rows(&emb_v)?;
    let z_t = embed_texts(model, &p, &captions)?;
    let tv = text_views_loss(z_iu, z_iv, z_t, tau(TauSlot::TextViews)?)?.total;

    let m = cfg.prompts.len();
    let prompt_ids: Vec<&[usize]> = batch.iter().flat_map(|s| s.prompts.iter().map(Vec::as_slice)).collect();
    if prompt_ids.len() != m * batch.len() {
        return Err(Error::shape("every sample needs one id sequence per prompt template"));
    }
    let z_p = embed_texts(model, &p, &prompt_ids)?;
    let ml = multilabel_prompt_loss(z_iu, z_iv, z_p, m, tau(TauSlot::Multilabel)?)?.total;

    let (total, breakdown) = total_loss(seg, tv, ml)?;
    Ok((p, total, breakdown))
}

/// Loss and gradients of every trainable parameter for one batch.
pub fn compute_gradients<T: Scalar>(
    model: &Model,
    cfg: &TrainConfig,
    params: &ModelParams<T>,
    batch: &[Sample<T>],
    step: usize,
) -> Result<(LossBreakdown<T>, BTreeMap<String, Tensor<T>>)> {
    let tape = Tape::new();
    let (bound, total, breakdown) = match batch_objective(model, cfg, params, &tape, batch, step) {
        Err(Error::NonFinite(_)) => return Err(Error::NonFiniteObjective),
        other => other?,
    };
    if !total.item().is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let grads = match tape.backward(total) {
        Err(Error::NonFinite(_)) => return Err(Error::NonFiniteObjective),
        other => other?,
    };
    Ok((breakdown, bound.gradients(&grads)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    /// Completed optimizer steps.
    pub step: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ModelParams<T>) -> Self {
        TrainState { params, adam: AdamState::new(), step: 0 }
    }
}

/// Step counts `(total, warmup)` for a corpus of `n` pairs.
pub fn schedule(cfg: &TrainConfig, n: usize) -> (usize, usize) {
    let per_epoch = n / cfg.batch_size;
    (per_epoch * cfg.epochs, per_epoch * cfg.warmup_epochs)
}

/// One optimizer step at learning rate `lr`, followed by the EMA update.
pub fn train_step<T: Scalar>(
    model: &Model,
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    batch: &[Sample<T>],
    lr: f64,
) -> Result<LossBreakdown<T>> {
    let (breakdown, mut grads) = compute_gradients(model, cfg, &state.params, batch, state.step)?;
    clip_grad_norm(&mut grads, cfg.grad_clip);
    let mut updated = state.params.trainable.clone();
    state.adam.step(&cfg.adam(), &mut updated, &grads, lr)?;
    for name in model.config.tau_names() {
        let t = updated.get_mut(name).expect("temperature present");
        let v = clamp_log_tau(t.item());
        t.data_mut()[0] = v;
    }
    if updated.iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFiniteObjective);
    }
    state.params.trainable = updated;
    let student = state.params.student();
    ema_update(&mut state.params.teacher, &student, cfg.ema_alpha)?;
    state.step += 1;
    Ok(breakdown)
}

/// Formats one metrics record.
pub fn metrics_line<T: Scalar>(step: usize, lr: f64, b: &LossBreakdown<T>) -> String {
    format!(
        "{step}\t{lr:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
        b.seg_consistency.f64(),
        b.text_views.f64(),
        b.multilabel.f64(),
        b.total.f64()
    )
}

pub struct FitOutput<T> {
    pub checkpoint: Checkpoint<T>,
    pub losses: Vec<LossBreakdown<T>>,
}

/// Trains on an already loaded corpus. Writes checkpoints and metrics only when
/// `write` is set.
pub fn fit_corpus<T: Scalar>(cfg: &TrainConfig, corpus: &Corpus, write: bool) -> Result<FitOutput<T>> {
    cfg.validate()?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.text.vocab_size = corpus.vocab.len();
    let model = Model::new(model_cfg.clone())?;
    let mut state = TrainState::new(model.init::<T>(cfg.seed));
    let (total_steps, warmup_steps) = schedule(cfg, corpus.pairs.len());
    let snapshot = |state: &TrainState<T>| Checkpoint {
        train: TrainConfig { model: model_cfg.clone(), ..cfg.clone() },
        params: state.params.clone(),
        adam: state.adam.clone(),
        step: state.step,
        vocab: corpus.vocab.clone(),
    };

    let mut metrics = match (&cfg.metrics, write) {
        (Some(path), true) => Some(BufWriter::new(fs::File::create(path)?)),
        _ => None,
    };
    let mut losses = Vec::with_capacity(total_steps);
    let per_epoch = if cfg.batch_size == 0 { 0 } else { corpus.pairs.len() / cfg.batch_size };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(pair_seed(cfg.seed ^ 0x5EED, epoch as u64)));
        for b in 0..per_epoch {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let batch = make_batch::<T>(corpus, idx, &cfg.aug, cfg.seed, epoch)?;
            let lr = cosine_lr(state.step, total_steps, warmup_steps, cfg.base_lr);
            let step = state.step;
            let breakdown = train_step(&model, cfg, &mut state, &batch, lr)?;
            if let Some(w) = metrics.as_mut() {
                writeln!(w, "{}", metrics_line(step, lr, &breakdown))?;
            }
            losses.push(breakdown);
            if write && cfg.eval_interval > 0 && state.step % cfg.eval_interval == 0 && state.step < total_steps {
                snapshot(&state).save(&cfg.checkpoint)?;
            }
        }
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    let checkpoint = snapshot(&state);
    if write {
        checkpoint.save(&cfg.checkpoint)?;
    }
    Ok(FitOutput { checkpoint, losses })
}

/// Loads the dataset named in `cfg`, trains, and writes checkpoint and metrics.
pub fn fit<T: Scalar>(cfg: &TrainConfig) -> Result<FitOutput<T>> {
    cfg.validate()?;
    let corpus = Corpus::load(cfg)?;
    fit_corpus(cfg, &corpus, true)
}
