//! Contrastive objectives.
//!
//! * [`info_nce`]: single-query InfoNCE with a learnable temperature.
//! * [`seg_consistency_loss`]: teacher↔student contrast between the segment
//!   tokens of two views; same-position segments are positives, every other
//!   segment of the same image is a negative.
//! * [`text_views_loss`]: one caption against both views of its image.
//! * [`multilabel_prompt_loss`]: all `M` prompts of a caption are positives
//!   for both views.
//! * [`total_loss`]: the sum of the three.
//!
//! Every loss has a `*_from_logits` form taking temperature-scaled logit
//! matrices; the embedding-level functions only build those matrices.

use rand::Rng;

use crate::autodiff::{concat_rows, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::numerics::check_unit_rows;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
/// Inputs whose row norms deviate from one by more than this are rejected.
pub const UNIT_NORM_TOL: f64 = 1e-3;

/// Clamps a log-temperature so that `exp(log_tau)` stays in `[TAU_MIN, TAU_MAX]`.
pub fn clamp_log_tau<T: Scalar>(log_tau: T) -> T {
    log_tau.max(T::of(TAU_MIN.ln())).min(T::of(TAU_MAX.ln()))
}

/// `1/τ = exp(−log τ)` as a differentiable scalar.
pub fn inverse_temperature<'t, T: Scalar>(log_tau: Var<'t, T>) -> Result<Var<'t, T>> {
    if log_tau.with_value(|v| v.len()) != 1 {
        return Err(Error::shape("log_tau must be a single value"));
    }
    log_tau.scale(-T::one())?.exp()
}

/// Number of positive and negative pairs a loss direction consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairTally {
    pub positives: usize,
    pub negatives: usize,
}

/// Per-row `−log softmax(logits)[pos]` as an `m × 1` column.
fn nce_rows<'t, T: Scalar>(logits: Var<'t, T>, pos: &[usize], tally: Option<&mut PairTally>) -> Result<Var<'t, T>> {
    if let Some(t) = tally {
        t.positives += logits.rows();
        t.negatives += logits.rows() * (logits.cols() - 1);
    }
    logits.logsumexp_rows(None)?.sub(logits.pick(pos)?)
}

fn scaled_logits<'t, T: Scalar>(q: Var<'t, T>, keys: Var<'t, T>, inv_tau: Var<'t, T>) -> Result<Var<'t, T>> {
    if q.cols() != keys.cols() {
        return Err(Error::shape(format!("query dim {} vs key dim {}", q.cols(), keys.cols())));
    }
    q.matmul_t(keys)?.mul_scalar(inv_tau)
}

fn require_unit<T: Scalar>(v: Var<'_, T>) -> Result<()> {
    v.with_value(|t| check_unit_rows(t, UNIT_NORM_TOL))
}

/// `−log( exp(q·k₊/τ) / Σᵢ exp(q·kᵢ/τ) )` for a `1 × d` query and `N × d` keys.
pub fn info_nce<'t, T: Scalar>(q: Var<'t, T>, keys: Var<'t, T>, pos_index: usize, log_tau: Var<'t, T>) -> Result<Var<'t, T>> {
    if q.rows() != 1 {
        return Err(Error::shape("info_nce takes a single query row"));
    }
    if pos_index >= keys.rows() {
        return Err(Error::shape(format!("positive index {pos_index} outside {} keys", keys.rows())));
    }
    require_unit(q)?;
    require_unit(keys)?;
    let logits = scaled_logits(q, keys, inverse_temperature(log_tau)?)?;
    nce_rows(logits, &[pos_index], None)?.reshape(&[1])
}

#[derive(Clone, Copy, Debug)]
pub struct SegTerms<'t, T: Scalar> {
    pub teacher_to_student: Var<'t, T>,
    pub student_to_teacher: Var<'t, T>,
    pub total: Var<'t, T>,
}

/// Logit matrices of one image, in the order
/// `[u_t→v_s, v_t→u_s, u_s→v_t, v_s→u_t]`, each `K × K`.
pub type SegLogits<'t, T> = [Var<'t, T>; 4];

pub fn seg_consistency_from_logits<'t, T: Scalar>(per_image: &[SegLogits<'t, T>]) -> Result<SegTerms<'t, T>> {
    let first = per_image.first().ok_or_else(|| Error::config("empty batch"))?;
    let k = first[0].rows();
    if k < 2 {
        return Err(Error::config("segment contrast needs K ≥ 2"));
    }
    let diag: Vec<usize> = (0..k).collect();
    let mut t2s = Vec::with_capacity(2 * per_image.len());
    let mut s2t = Vec::with_capacity(2 * per_image.len());
    for logits in per_image {
        if logits.iter().any(|l| l.rows() != k || l.cols() != k) {
            return Err(Error::shape("segment logits must all be K × K"));
        }
        t2s.push(nce_rows(logits[0], &diag, None)?);
        t2s.push(nce_rows(logits[1], &diag, None)?);
        s2t.push(nce_rows(logits[2], &diag, None)?);
        s2t.push(nce_rows(logits[3], &diag, None)?);
    }
    let norm = T::one() / T::of((k * per_image.len()) as f64);
    let teacher_to_student = concat_rows(&t2s)?.sum()?.scale(norm)?;
    let student_to_teacher = concat_rows(&s2t)?.sum()?.scale(norm)?;
    let total = teacher_to_student.add(student_to_teacher)?;
    Ok(SegTerms { teacher_to_student, student_to_teacher, total })
}

/// Cross-view segment consistency between teacher (`*_t`, detached) and
/// student (`*_s`) tokens; each slice holds one `K × d` matrix per image.
pub fn seg_consistency_loss<'t, T: Scalar>(
    z_ut: &[Var<'t, T>],
    z_vt: &[Var<'t, T>],
    z_us: &[Var<'t, T>],
    z_vs: &[Var<'t, T>],
    log_tau: Var<'t, T>,
) -> Result<SegTerms<'t, T>> {
    let b = z_ut.len();
    if b == 0 || z_vt.len() != b || z_us.len() != b || z_vs.len() != b {
        return Err(Error::shape("segment token sets must share a non-zero batch size"));
    }
    let inv_tau = inverse_temperature(log_tau)?;
    let mut per_image = Vec::with_capacity(b);
    for i in 0..b {
        let set = [z_ut[i], z_vt[i], z_us[i], z_vs[i]];
        let k = set[0].rows();
        if set.iter().any(|z| z.rows() != k) {
            return Err(Error::shape("all four segment sets need K rows"));
        }
        if k < 2 {
            return Err(Error::config("segment contrast needs K ≥ 2"));
        }
        for z in set {
            require_unit(z)?;
        }
        per_image.push([
            scaled_logits(z_ut[i], z_vs[i], inv_tau)?,
            scaled_logits(z_vt[i], z_us[i], inv_tau)?,
            scaled_logits(z_us[i], z_vt[i], inv_tau)?,
            scaled_logits(z_vs[i], z_ut[i], inv_tau)?,
        ]);
    }
    seg_consistency_from_logits(&per_image)
}

#[derive(Clone, Copy, Debug)]
pub struct TextViewsTerms<'t, T: Scalar> {
    pub views_to_text: Var<'t, T>,
    pub text_to_views: Var<'t, T>,
    pub total: Var<'t, T>,
}

/// `B × B` logits `[I_u·Tᵀ, I_v·Tᵀ, T·I_uᵀ, T·I_vᵀ]` (already divided by τ).
pub fn text_views_from_logits<'t, T: Scalar>(
    logits: [Var<'t, T>; 4],
    tallies: Option<&mut [PairTally; 2]>,
) -> Result<TextViewsTerms<'t, T>> {
    let b = logits[0].rows();
    if logits.iter().any(|l| l.rows() != b || l.cols() != b) {
        return Err(Error::shape("text-views logits must all be B × B"));
    }
    let diag: Vec<usize> = (0..b).collect();
    let (mut fwd, mut bwd) = (None, None);
    if let Some(t) = tallies {
        let [a, c] = t;
        fwd = Some(a);
        bwd = Some(c);
    }
    let inv_b = T::one() / T::of(b as f64);
    let u = nce_rows(logits[0], &diag, fwd.as_deref_mut())?;
    let v = nce_rows(logits[1], &diag, fwd.as_deref_mut())?;
    let views_to_text = concat_rows(&[u, v])?.sum()?.scale(inv_b)?;
    let u = nce_rows(logits[2], &diag, bwd.as_deref_mut())?;
    let v = nce_rows(logits[3], &diag, bwd.as_deref_mut())?;
    let text_to_views = concat_rows(&[u, v])?.sum()?.scale(inv_b)?;
    let total = views_to_text.add(text_to_views)?;
    Ok(TextViewsTerms { views_to_text, text_to_views, total })
}

/// Text-to-views consistency for `B × e` view embeddings and caption embeddings.
pub fn text_views_loss<'t, T: Scalar>(
    z_iu: Var<'t, T>,
    z_iv: Var<'t, T>,
    z_t: Var<'t, T>,
    log_tau: Var<'t, T>,
) -> Result<TextViewsTerms<'t, T>> {
    text_views_loss_counted(z_iu, z_iv, z_t, log_tau, None)
}

/// [`text_views_loss`] that also reports pair counts for
/// `[views→text, text→views]`.
pub fn text_views_loss_counted<'t, T: Scalar>(
    z_iu: Var<'t, T>,
    z_iv: Var<'t, T>,
    z_t: Var<'t, T>,
    log_tau: Var<'t, T>,
    tallies: Option<&mut [PairTally; 2]>,
) -> Result<TextViewsTerms<'t, T>> {
    let b = z_t.rows();
    if z_iu.rows() != b || z_iv.rows() != b {
        return Err(Error::shape("views and captions need the same batch size"));
    }
    for z in [z_iu, z_iv, z_t] {
        require_unit(z)?;
    }
    let inv_tau = inverse_temperature(log_tau)?;
    let logits = [
        scaled_logits(z_iu, z_t, inv_tau)?,
        scaled_logits(z_iv, z_t, inv_tau)?,
        scaled_logits(z_t, z_iu, inv_tau)?,
        scaled_logits(z_t, z_iv, inv_tau)?,
    ];
    text_views_from_logits(logits, tallies)
}

#[derive(Clone, Copy, Debug)]
pub struct MultilabelTerms<'t, T: Scalar> {
    pub views_to_prompts: Var<'t, T>,
    pub prompts_to_views: Var<'t, T>,
    pub total: Var<'t, T>,
}

/// Logits `[I_u·Pᵀ, I_v·Pᵀ]` (`B × BM`) and `[P·I_uᵀ, P·I_vᵀ]` (`BM × B`);
/// prompt row `j·M + m` is prompt `m` of caption `j`.
pub fn multilabel_from_logits<'t, T: Scalar>(
    views_to_prompts: [Var<'t, T>; 2],
    prompts_to_views: [Var<'t, T>; 2],
    m: usize,
) -> Result<MultilabelTerms<'t, T>> {
    if m == 0 {
        return Err(Error::config("at least one prompt per caption is required"));
    }
    let b = views_to_prompts[0].rows();
    if views_to_prompts.iter().any(|l| l.rows() != b || l.cols() != b * m)
        || prompts_to_views.iter().any(|l| l.rows() != b * m || l.cols() != b)
    {
        return Err(Error::shape("multilabel logits have inconsistent shapes"));
    }
    let positives: Vec<bool> = (0..b).flat_map(|i| (0..b * m).map(move |c| c / m == i)).collect();
    let inv_b = T::one() / T::of(b as f64);
    let mut per_view = Vec::with_capacity(2);
    for logits in views_to_prompts {
        let pos = logits.logsumexp_rows(Some(positives.clone()))?;
        let all = logits.logsumexp_rows(None)?;
        per_view.push(all.sub(pos)?.sum()?.scale(inv_b)?);
    }
    let views_to_prompts = per_view[0].add(per_view[1])?.scale(T::of(0.5))?;

    let owner: Vec<usize> = (0..b * m).map(|r| r / m).collect();
    let u = nce_rows(prompts_to_views[0], &owner, None)?;
    let v = nce_rows(prompts_to_views[1], &owner, None)?;
    let prompts_to_views = concat_rows(&[u, v])?.sum()?.scale(T::one() / T::of((2 * m * b) as f64))?;
    let total = views_to_prompts.add(prompts_to_views)?;
    Ok(MultilabelTerms { views_to_prompts, prompts_to_views, total })
}

/// Multi-label contrast between both views (`B × e`) and `M` prompt embeddings per
/// caption (`BM × e`, caption-major).
pub fn multilabel_prompt_loss<'t, T: Scalar>(
    z_iu: Var<'t, T>,
    z_iv: Var<'t, T>,
    z_prompts: Var<'t, T>,
    m: usize,
    log_tau: Var<'t, T>,
) -> Result<MultilabelTerms<'t, T>> {
    if m == 0 {
        return Err(Error::config("at least one prompt per caption is required"));
    }
    let b = z_iu.rows();
    if z_iv.rows() != b || z_prompts.rows() != b * m {
        return Err(Error::shape("prompt embeddings must hold B·M rows"));
    }
    for z in [z_iu, z_iv, z_prompts] {
        require_unit(z)?;
    }
    let inv_tau = inverse_temperature(log_tau)?;
    multilabel_from_logits(
        [scaled_logits(z_iu, z_prompts, inv_tau)?, scaled_logits(z_iv, z_prompts, inv_tau)?],
        [scaled_logits(z_prompts, z_iu, inv_tau)?, scaled_logits(z_prompts, z_iv, inv_tau)?],
        m,
    )
}

/// Bidirectional contrast between one view per image and its caption.
pub fn single_view_text_loss<'t, T: Scalar>(z_i: Var<'t, T>, z_t: Var<'t, T>, log_tau: Var<'t, T>) -> Result<Var<'t, T>> {
    let b = z_t.rows();
    if z_i.rows() != b {
        return Err(Error::shape("views and captions need the same batch size"));
    }
    require_unit(z_i)?;
    require_unit(z_t)?;
    let inv_tau = inverse_temperature(log_tau)?;
    let diag: Vec<usize> = (0..b).collect();
    let inv_b = T::one() / T::of(b as f64);
    let i2t = nce_rows(scaled_logits(z_i, z_t, inv_tau)?, &diag, None)?.sum()?.scale(inv_b)?;
    let t2i = nce_rows(scaled_logits(z_t, z_i, inv_tau)?, &diag, None)?.sum()?.scale(inv_b)?;
    i2t.add(t2i)
}

/// The three summands and their total, as plain values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub seg_consistency: T,
    pub text_views: T,
    pub multilabel: T,
    pub total: T,
}

/// `total = (seg + text_views) + multilabel`, accumulated in that order.
pub fn total_loss<'t, T: Scalar>(
    seg: Var<'t, T>,
    text_views: Var<'t, T>,
    multilabel: Var<'t, T>,
) -> Result<(Var<'t, T>, LossBreakdown<T>)> {
    let total = seg.add(text_views)?.add(multilabel)?;
    let breakdown = LossBreakdown {
        seg_consistency: seg.item(),
        text_views: text_views.item(),
        multilabel: multilabel.item(),
        total: total.item(),
    };
    Ok((total, breakdown))
}

/// Two-layer perceptron into the shared embedding space, followed by l2 normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub mlp: Mlp,
    pub d_in: usize,
    pub d_out: usize,
}

impl ProjectionHead {
    pub fn new(name: &str, d_in: usize, d_out: usize) -> Self {
        ProjectionHead { mlp: Mlp::new(name, d_in, d_in.max(d_out), d_out), d_in, d_out }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.mlp.init(store, rng);
    }

    /// Projects and normalizes each row.
    pub fn project<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.mlp.forward(p, x)?.l2_normalize(T::of(crate::numerics::NORM_EPS))
    }

    /// Mean over the `K` segment rows, then [`Self::project`]: a `1 × d_out` unit vector.
    pub fn project_view<'t, T: Scalar>(&self, p: &Bound<'t, T>, segments: Var<'t, T>) -> Result<Var<'t, T>> {
        self.project(p, segments.mean_rows()?)
    }
}
