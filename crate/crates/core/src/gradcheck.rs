//! Finite-difference verification of every loss and both encoders at toy shapes.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::{AssignMode, EncoderConfig, GroupEncoder};
use crate::error::{Error, Result};
use crate::losses::{info_nce, multilabel_prompt_loss, seg_consistency_loss, text_views_loss, TAU_INIT};
use crate::numerics::{grad_check, GradCheckOptions, NORM_EPS};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::text::{TextConfig, TextEncoder, BOS, EOS};

/// Pass bound on the max relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    InfoNce,
    SegConsistency,
    TextViews,
    Multilabel,
    Encoder,
    TextEncoder,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::InfoNce,
        Component::SegConsistency,
        Component::TextViews,
        Component::Multilabel,
        Component::Encoder,
        Component::TextEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::InfoNce => "info_nce",
            Component::SegConsistency => "seg_consistency",
            Component::TextViews => "text_views",
            Component::Multilabel => "multilabel",
            Component::Encoder => "encoder",
            Component::TextEncoder => "text_encoder",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub rows: Vec<(Component, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|&(_, e)| e < GRADCHECK_TOL)
    }
}

const B: usize = 3;
const K: usize = 4;
const D: usize = 8;
const M: usize = 3;

fn unit<'t>(v: Var<'t, f64>) -> Result<Var<'t, f64>> {
    v.l2_normalize(NORM_EPS)
}

fn log_tau() -> Tensor<f64> {
    Tensor::new(vec![1], vec![TAU_INIT.ln() + 0.3]).expect("one value")
}

fn check_loss(c: Component, seed: u64, opts: &GradCheckOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = |rows: usize| Tensor::<f64>::randn(&[rows, D], 1.0, &mut rng);
    match c {
        Component::InfoNce => grad_check(
            |_, v| info_nce(unit(v[0])?, unit(v[1])?, 2, v[2]),
            &[raw(1), raw(5), log_tau()],
            opts,
        ),
        Component::SegConsistency => {
            let mut params: Vec<Tensor<f64>> = (0..4 * B).map(|_| raw(K)).collect();
            params.push(log_tau());
            grad_check(
                |_, v| {
                    let z: Vec<Var<f64>> = v[..4 * B].iter().map(|&x| unit(x)).collect::<Result<_>>()?;
                    let (ut, rest) = z.split_at(B);
                    let (vt, rest) = rest.split_at(B);
                    let (us, vs) = rest.split_at(B);
                    Ok(seg_consistency_loss(ut, vt, us, vs, v[4 * B])?.total)
                },
                &params,
                opts,
            )
        }
        Component::TextViews => grad_check(
            |_, v| Ok(text_views_loss(unit(v[0])?, unit(v[1])?, unit(v[2])?, v[3])?.total),
            &[raw(B), raw(B), raw(B), log_tau()],
            opts,
        ),
        Component::Multilabel => grad_check(
            |_, v| Ok(multilabel_prompt_loss(unit(v[0])?, unit(v[1])?, unit(v[2])?, M, v[3])?.total),
            &[raw(B), raw(B), raw(B * M), log_tau()],
            opts,
        ),
        Component::Encoder | Component::TextEncoder => unreachable!("encoders are checked separately"),
    }
}

/// Checks `loss(params)` where the parameters live in a [`ParamStore`].
fn check_store<F>(store: &ParamStore<f64>, loss: F, opts: &GradCheckOptions) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let names: Vec<String> = store.names().cloned().collect();
    let tensors: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    grad_check(|tape, v| loss(tape, &Bound::from_vars(names.iter().cloned(), v)), &tensors, opts)
}

/// A random-weighted sum, so every output coordinate carries gradient.
fn weighted_sum<'t>(tape: &'t Tape<f64>, x: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(&[x.rows(), x.cols()], 1.0, &mut rng);
    x.mul(tape.constant(w))?.sum()
}

fn check_encoder(seed: u64, opts: &GradCheckOptions) -> Result<f64> {
    let cfg = EncoderConfig::toy();
    let enc = GroupEncoder::new(cfg.clone(), "")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut rng);
    let n = cfg.image_size;
    let image = Tensor::<f64>::randn(&[n, n, cfg.channels], 0.5, &mut rng);
    check_store(
        &store,
        |tape, p| weighted_sum(tape, enc.encode(p, &image, AssignMode::Soft)?.segments, seed ^ 1),
        opts,
    )
}

fn check_text_encoder(seed: u64, opts: &GradCheckOptions) -> Result<f64> {
    let cfg = TextConfig::toy(12);
    let enc = TextEncoder::new(cfg, "")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut rng);
    let ids = [BOS, 5, 9, 4, 11, EOS];
    check_store(&store, |tape, p| weighted_sum(tape, enc.encode(p, &ids)?, seed ^ 2), opts)
}

/// Runs every component at 64-bit. `inject` flips the sign of that
/// component's analytic gradient, which must make it fail.
pub fn run(seed: u64, inject: Option<Component>) -> Result<GradCheckReport> {
    let mut rows = Vec::with_capacity(Component::ALL.len());
    for c in Component::ALL {
        let opts = GradCheckOptions {
            seed,
            flip_analytic_sign: inject == Some(c),
            max_coords_per_tensor: matches!(c, Component::Encoder | Component::TextEncoder).then_some(16),
            ..GradCheckOptions::default()
        };
        let err = match c {
            Component::Encoder => check_encoder(seed, &opts),
            Component::TextEncoder => check_text_encoder(seed, &opts),
            _ => check_loss(c, seed, &opts),
        };
        let err = match err {
            Ok(e) => e,
            Err(Error::NonFiniteObjective) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        rows.push((c, err));
    }
    Ok(GradCheckReport { rows })
}
