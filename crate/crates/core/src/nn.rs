//! Layers shared by the vision and text encoders. Each layer only records
//! parameter names; values live in a [`ParamStore`] and are looked up in the
//! [`Bound`] set at forward time.

use rand::Rng;

use crate::autodiff::{concat_cols, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize) -> Self {
        Linear { weight: format!("{name}.weight"), bias: format!("{name}.bias"), d_in, d_out }
    }

    /// LeCun-normal weights, zero bias.
    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let std = 1.0 / (self.d_in as f64).sqrt();
        store.insert(&self.weight, Tensor::randn(&[self.d_in, self.d_out], std, rng));
        store.insert(&self.bias, Tensor::zeros(&[self.d_out]));
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(p.get(&self.weight)?)?.add_row(p.get(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm { gain: format!("{name}.gain"), bias: format!("{name}.bias"), dim }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(&self.gain, Tensor::ones(&[self.dim]));
        store.insert(&self.bias, Tensor::zeros(&[self.dim]));
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(p.get(&self.gain)?, p.get(&self.bias)?, T::of(LN_EPS))
    }
}

/// Multi-head self-attention with an optional key mask.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(SelfAttention {
            qkv: Linear::new(&format!("{name}.qkv"), dim, 3 * dim),
            proj: Linear::new(&format!("{name}.proj"), dim, dim),
            heads,
            dim,
        })
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.qkv.init(store, rng);
        self.proj.init(store, rng);
    }

    /// `key_mask[j] == false` hides token `j` from every query.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'t, T>> {
        let n = x.rows();
        let dh = self.dim / self.heads;
        let qkv = self.qkv.forward(p, x)?;
        let mask: Option<Vec<bool>> = key_mask.map(|m| (0..n).flat_map(|_| m.iter().copied()).collect());
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice_cols(h * dh, dh)?;
            let k = qkv.slice_cols(self.dim + h * dh, dh)?;
            let v = qkv.slice_cols(2 * self.dim + h * dh, dh)?;
            let attn = q.matmul_t(k)?.scale(scale)?.softmax_rows(mask.as_deref())?;
            outs.push(attn.matmul(v)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { concat_cols(&outs)? };
        self.proj.forward(p, merged)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Mlp { fc1: Linear::new(&format!("{name}.fc1"), d_in, hidden), fc2: Linear::new(&format!("{name}.fc2"), hidden, d_out) }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.fc2.forward(p, self.fc1.forward(p, x)?.gelu()?)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            attn: SelfAttention::new(&format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            mlp: Mlp::new(&format!("{name}.mlp"), dim, dim * mlp_ratio, dim),
        })
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.ln1.init(store);
        self.attn.init(store, rng);
        self.ln2.init(store);
        self.mlp.init(store, rng);
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'t, T>> {
        let h = x.add(self.attn.forward(p, self.ln1.forward(p, x)?, key_mask)?)?;
        h.add(self.mlp.forward(p, self.ln2.forward(p, h)?)?)
    }
}
