//! Closed-vocabulary tokenizer, prompt templates and the caption encoder.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercased words, with trailing `.`/`,` split into their own tokens.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let stem = lower.trim_end_matches(['.', ',']);
        if !stem.is_empty() {
            out.push(stem.to_string());
        }
        for c in lower[stem.len()..].chars() {
            out.push(c.to_string());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Specials at ids 0–3, then every distinct word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `token<TAB>id` lines.
    pub fn to_tsv(&self) -> String {
        self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("vocab line {} lacks a tab", line_no + 1)))?;
            let id: usize = id.trim().parse().map_err(|_| Error::Format(format!("bad vocab id on line {}", line_no + 1)))?;
            if id != tokens.len() {
                return Err(Error::Format("vocab ids must be dense and ordered".into()));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIALS.len() || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Format("vocab must start with the four special tokens".into()));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::tensor_file::write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }
}

/// `BOS, words…, EOS` padded with `PAD` to `max_len`. Long texts keep their
/// first `max_len − 2` words so the sequence always ends in `EOS`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<Vec<usize>> {
    if max_len < 3 {
        return Err(Error::config("max_len must be at least 3"));
    }
    let w = words(text);
    if w.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(w.iter().take(max_len - 2).map(|w| vocab.id(w)));
    ids.push(EOS);
    ids.resize(max_len, PAD);
    Ok(ids)
}

/// Words between `BOS` and `EOS`, joined by spaces.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&i| i != BOS && i != PAD)
        .take_while(|&&i| i != EOS)
        .map(|&i| vocab.token(i).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    templates: Vec<String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            templates: vec!["a photo of a {}.".into(), "a picture of a {}.".into(), "an image of a {}.".into()],
        }
    }
}

impl PromptSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::config("at least one prompt template is required"));
        }
        if let Some(t) = templates.iter().find(|t| t.matches("{}").count() != 1) {
            return Err(Error::config(format!("template {t:?} must contain exactly one {{}} slot")));
        }
        Ok(PromptSet { templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn generate(&self, class_word: &str) -> Result<Vec<String>> {
        generate_prompts(class_word, self)
    }
}

pub fn generate_prompts(class_word: &str, prompts: &PromptSet) -> Result<Vec<String>> {
    if class_word.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(prompts.templates.iter().map(|t| t.replacen("{}", class_word, 1)).collect())
}

/// The single known class word occurring in `caption`.
pub fn extract_class_word<'c>(caption: &str, known_classes: &'c [String]) -> Result<&'c str> {
    let mut found: Option<&'c str> = None;
    for w in words(caption) {
        if let Some(c) = known_classes.iter().find(|c| **c == w) {
            if found.is_some() {
                return Err(Error::AmbiguousCaption(caption.to_string()));
            }
            found = Some(c.as_str());
        }
    }
    found.ok_or_else(|| Error::AmbiguousCaption(caption.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Output width shared with the visual embedding space.
    pub embed_dim: usize,
}

impl TextConfig {
    /// 12 layers at width 256.
    pub fn paper(vocab_size: usize) -> Self {
        TextConfig { vocab_size, max_len: 77, width: 256, depth: 12, heads: 4, mlp_ratio: 4, embed_dim: 256 }
    }

    pub fn toy(vocab_size: usize) -> Self {
        TextConfig { vocab_size, max_len: 12, width: 32, depth: 2, heads: 2, mlp_ratio: 2, embed_dim: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < SPECIALS.len() || self.max_len < 3 || self.depth == 0 {
            return Err(Error::config("text encoder needs vocab ≥ 4, max_len ≥ 3 and depth ≥ 1"));
        }
        if self.heads == 0 || self.width % self.heads != 0 || self.embed_dim == 0 {
            return Err(Error::config("text width must divide into heads"));
        }
        Ok(())
    }
}

/// Transformer over token embeddings; the hidden state at the `EOS`
/// position, projected to `embed_dim`, is the sentence embedding.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextConfig,
    token_embed: String,
    pos_embed: String,
    blocks: Vec<Block>,
    norm_final: LayerNorm,
    proj: Linear,
}

impl TextEncoder {
    pub fn new(config: TextConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.depth)
            .map(|b| Block::new(&format!("{prefix}block{b}"), config.width, config.heads, config.mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(TextEncoder {
            token_embed: format!("{prefix}token_embed"),
            pos_embed: format!("{prefix}pos_embed"),
            norm_final: LayerNorm::new(&format!("{prefix}norm_final"), config.width),
            proj: Linear::new(&format!("{prefix}proj"), config.width, config.embed_dim),
            blocks,
            config,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = &self.config;
        store.insert(&self.token_embed, Tensor::randn(&[c.vocab_size, c.width], 0.02, rng));
        store.insert(&self.pos_embed, Tensor::randn(&[c.max_len, c.width], 0.01, rng));
        self.blocks.iter().for_each(|b| b.init(store, rng));
        self.norm_final.init(store);
        self.proj.init(store, rng);
    }

    /// `1 × embed_dim` embedding of one id sequence. Attention ignores `PAD`
    /// keys, so trailing padding never changes the result.
    pub fn encode<'t, T: Scalar>(&self, p: &Bound<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        let len = ids.iter().rposition(|&i| i != PAD).map_or(0, |i| i + 1);
        if len == 0 {
            return Err(Error::EmptyText);
        }
        if ids.len() > self.config.max_len {
            return Err(Error::shape(format!("{} ids exceed max_len {}", ids.len(), self.config.max_len)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::shape(format!("token id {bad} outside vocabulary")));
        }
        let table = p.get(&self.token_embed)?;
        let tape = table.tape();
        let n = ids.len();
        let v = self.config.vocab_size;
        let mut one_hot = vec![T::zero(); n * v];
        for (r, &id) in ids.iter().enumerate() {
            one_hot[r * v + id] = T::one();
        }
        let tokens = tape.constant(Tensor::matrix(n, v, one_hot)?).matmul(table)?;
        let pos = p.get(&self.pos_embed)?.slice_rows(0, n)?;
        let mut h = tokens.add(pos)?;
        let mask: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let masked = mask.iter().any(|m| !m);
        for block in &self.blocks {
            h = block.forward(p, h, masked.then_some(mask.as_slice()))?;
        }
        let pooled = self.norm_final.forward(p, h.slice_rows(len - 1, 1)?)?;
        self.proj.forward(p, pooled)
    }

    pub fn encode_values<T: Scalar>(&self, params: &ParamStore<T>, ids: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        Ok(self.encode(&bound, ids)?.value())
    }
}
