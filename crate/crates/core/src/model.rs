//! The full model: student and teacher grouping encoders, text encoder,
//! projection heads, and learnable temperatures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::{EncoderConfig, GroupEncoder};
use crate::error::{Error, Result};
use crate::losses::{ProjectionHead, TAU_INIT};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{TextConfig, TextEncoder};

pub const STUDENT: &str = "student/";
pub const TEACHER: &str = "teacher/";
pub const TEXT: &str = "text/";
pub const VISION_HEAD: &str = "head/vision";
pub const TEXT_HEAD: &str = "head/text";
pub const LOG_TAU: &str = "log_tau";

/// Which temperature a term uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TauSlot {
    Segments,
    TextViews,
    Multilabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub text: TextConfig,
    /// One temperature per loss instead of a single shared one.
    pub per_loss_tau: bool,
    pub tau_init: f64,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig { encoder: EncoderConfig::toy(), text: TextConfig::toy(vocab_size), per_loss_tau: false, tau_init: TAU_INIT }
    }

    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::paper(),
            text: TextConfig::paper(vocab_size),
            per_loss_tau: false,
            tau_init: TAU_INIT,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.text.embed_dim
    }

    pub fn tau_name(&self, slot: TauSlot) -> &'static str {
        if !self.per_loss_tau {
            return LOG_TAU;
        }
        match slot {
            TauSlot::Segments => "log_tau.seg",
            TauSlot::TextViews => "log_tau.text_views",
            TauSlot::Multilabel => "log_tau.multilabel",
        }
    }

    pub fn tau_names(&self) -> Vec<&'static str> {
        let mut names = vec![
            self.tau_name(TauSlot::Segments),
            self.tau_name(TauSlot::TextViews),
            self.tau_name(TauSlot::Multilabel),
        ];
        names.dedup();
        names
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub student: GroupEncoder,
    pub teacher: GroupEncoder,
    pub text: TextEncoder,
    pub vision_head: ProjectionHead,
    pub text_head: ProjectionHead,
}

/// Parameters split by how they are updated.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// Student, text encoder, heads, temperatures: updated by the optimizer.
    pub trainable: ParamStore<T>,
    /// Teacher encoder: updated only by EMA.
    pub teacher: ParamStore<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// The student encoder's entries of the trainable set.
    pub fn student(&self) -> ParamStore<T> {
        self.trainable.renamed(STUDENT, STUDENT)
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.encoder.validate()?;
        config.text.validate()?;
        let e = config.embed_dim();
        Ok(Model {
            student: GroupEncoder::new(config.encoder.clone(), STUDENT)?,
            teacher: GroupEncoder::new(config.encoder.clone(), TEACHER)?,
            text: TextEncoder::new(config.text.clone(), TEXT)?,
            vision_head: ProjectionHead::new(VISION_HEAD, config.encoder.embed_dim, e),
            text_head: ProjectionHead::new(TEXT_HEAD, e, e),
            config,
        })
    }

    /// Fresh parameters; the teacher starts as an exact copy of the student.
    pub fn init<T: Scalar>(&self, seed: u64) -> ModelParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trainable = ParamStore::new();
        self.student.init(&mut trainable, &mut rng);
        self.text.init(&mut trainable, &mut rng);
        self.vision_head.init(&mut trainable, &mut rng);
        self.text_head.init(&mut trainable, &mut rng);
        for name in self.config.tau_names() {
            trainable.insert(name, Tensor::scalar(T::of(self.config.tau_init.ln())));
        }
        let teacher = trainable.renamed(STUDENT, TEACHER);
        ModelParams { trainable, teacher }
    }

    /// Checks that `params` has exactly the tensors this model expects.
    pub fn check_params<T: Scalar>(&self, params: &ModelParams<T>) -> Result<()> {
        if !params.teacher.same_layout(TEACHER, &params.trainable, STUDENT) {
            return Err(Error::CheckpointMismatch("teacher and student layouts differ".into()));
        }
        let expected = self.init::<T>(0);
        let layout = |a: &ParamStore<T>, b: &ParamStore<T>| {
            a.len() == b.len() && a.iter().zip(b.iter()).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
        };
        if !layout(&params.trainable, &expected.trainable) {
            return Err(Error::CheckpointMismatch("trainable parameters do not match the model configuration".into()));
        }
        if !layout(&params.teacher, &expected.teacher) {
            return Err(Error::CheckpointMismatch("teacher parameters do not match the model configuration".into()));
        }
        Ok(())
    }

    /// Text embedding in the shared space (`1 × e`, unit norm).
    pub fn embed_text<'t, T: Scalar>(&self, p: &Bound<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        self.text_head.project(p, self.text.encode(p, ids)?)
    }

    /// Image-level embedding of a view from its `K × d` segment tokens (`1 × e`, unit norm).
    pub fn embed_view<'t, T: Scalar>(&self, p: &Bound<'t, T>, segments: Var<'t, T>) -> Result<Var<'t, T>> {
        self.vision_head.project_view(p, segments)
    }

    /// Per-segment embeddings in the shared space (`K × e`, unit rows), used for labeling segments.
    pub fn embed_segments<'t, T: Scalar>(&self, p: &Bound<'t, T>, segments: Var<'t, T>) -> Result<Var<'t, T>> {
        self.vision_head.project(p, segments)
    }

    /// Value-only text embedding.
    pub fn text_embedding<T: Scalar>(&self, trainable: &ParamStore<T>, ids: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = trainable.bind(&tape, false);
        Ok(self.embed_text(&p, ids)?.value())
    }

    /// Current temperature of a slot.
    pub fn tau<T: Scalar>(&self, trainable: &ParamStore<T>, slot: TauSlot) -> Result<f64> {
        Ok(trainable.get(self.config.tau_name(slot))?.item().f64().exp())
    }
}
