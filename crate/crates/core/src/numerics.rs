//! Normalization, softmax and similarity primitives plus the finite-difference
//! gradient checker used to validate every differentiable path.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default threshold below which a row is treated as the zero vector.
pub const NORM_EPS: f64 = 1e-12;

/// Row-wise l2 normalization; fails with `DegenerateVector` when a row norm is `<= eps`.
pub fn l2_normalize<'t, T: Scalar>(v: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
    v.l2_normalize(eps)
}

/// Row-wise `softmax(x / temperature)`.
pub fn softmax<'t, T: Scalar>(x: Var<'t, T>, temperature: T) -> Result<Var<'t, T>> {
    if !(temperature > T::zero()) {
        return Err(Error::InvalidTemperature(temperature.f64()));
    }
    x.scale(T::one() / temperature)?.softmax_rows(None)
}

/// `A · Bᵀ` for row-normalized `A` (m×d) and `B` (n×d): the cosine-similarity matrix.
pub fn similarity_matrix<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    if a.cols() != b.cols() {
        return Err(Error::shape(format!("feature dims {} vs {}", a.cols(), b.cols())));
    }
    a.matmul_t(b)
}

/// Checks that every row of `t` has unit norm within `tol`.
pub fn check_unit_rows<T: Scalar>(t: &Tensor<T>, tol: f64) -> Result<()> {
    for r in 0..t.rows() {
        let norm = t.row(r).iter().map(|&v| v * v).sum::<T>().sqrt().f64();
        if (norm - 1.0).abs() > tol {
            return Err(Error::Normalization { row: r, norm });
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per parameter tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Negates the analytic gradient before comparing (fault injection).
    pub flip_analytic_sign: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, max_coords_per_tensor: None, seed: 0, flip_analytic_sign: false }
    }
}

fn eval_objective<T, F>(f: &F, params: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = match f(&tape, &vars) {
        Err(Error::NonFinite(_)) => return Err(Error::NonFiniteObjective),
        other => other?,
    };
    let v = out.item();
    if !v.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    Ok(v)
}

/// Max over checked coordinates of `|analytic − central difference| / max(1, |central difference|)`.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], opts: &GradCheckOptions) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let analytic: Vec<Tensor<T>> = {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = match f(&tape, &vars) {
            Err(Error::NonFinite(_)) => return Err(Error::NonFiniteObjective),
            other => other?,
        };
        if !out.item().is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let step = T::of(opts.step);
    let two = T::of(2.0);
    let mut worst = T::zero();
    let mut work = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        let n = params[p].len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = eval_objective(&f, &work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = eval_objective(&f, &work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (two * step);
            let mut a = grad.data()[i];
            if opts.flip_analytic_sign {
                a = -a;
            }
            let rel = (a - numeric).abs() / T::one().max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
