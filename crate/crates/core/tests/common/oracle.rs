//! Loop-by-loop reference implementations of the contrastive losses.
//!
//! No matrix products, no log-sum-exp tricks: every similarity is a scalar dot
//! product, every sum is an explicit loop with Neumaier compensation, and the
//! redundant `(1/K)·Σ_k` wrappers of the text losses are kept as written.

#![allow(dead_code)]

pub type Rows = Vec<Vec<f64>>;

/// Neumaier-compensated sum.
#[derive(Default)]
pub struct Sum {
    total: f64,
    carry: f64,
}

impl Sum {
    pub fn add(&mut self, x: f64) {
        let t = self.total + x;
        if self.total.abs() >= x.abs() {
            self.carry += (self.total - t) + x;
        } else {
            self.carry += (x - t) + self.total;
        }
        self.total = t;
    }

    pub fn value(&self) -> f64 {
        self.total + self.carry
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = Sum::default();
    for i in 0..a.len() {
        s.add(a[i] * b[i]);
    }
    s.value()
}

/// `−ln( exp(q·k₊/τ) / Σ_i exp(q·k_i/τ) )`.
pub fn nce(q: &[f64], keys: &Rows, pos: usize, tau: f64) -> f64 {
    let mut denom = Sum::default();
    for k in keys {
        denom.add((dot(q, k) / tau).exp());
    }
    let num = (dot(q, &keys[pos]) / tau).exp();
    -(num / denom.value()).ln()
}

/// Bidirectional teacher/student segment contrast over `B` images of `K` rows.
pub fn seg_consistency(ut: &[Rows], vt: &[Rows], us: &[Rows], vs: &[Rows], tau: f64) -> f64 {
    let b = ut.len();
    let k = ut[0].len();
    let scale = 1.0 / (k * b) as f64;
    let mut t2s = Sum::default();
    let mut s2t = Sum::default();
    for i in 0..b {
        for r in 0..k {
            t2s.add(nce(&ut[i][r], &vs[i], r, tau));
            t2s.add(nce(&vt[i][r], &us[i], r, tau));
            s2t.add(nce(&us[i][r], &vt[i], r, tau));
            s2t.add(nce(&vs[i][r], &ut[i], r, tau));
        }
    }
    scale * t2s.value() + scale * s2t.value()
}

/// Text-to-views loss with the `(1/(KB))·Σ_i Σ_k` prefactor kept literally;
/// the summand does not depend on `k`.
pub fn text_views(iu: &Rows, iv: &Rows, t: &Rows, tau: f64, k: usize) -> f64 {
    let b = t.len();
    let scale = 1.0 / (k * b) as f64;
    let mut fwd = Sum::default();
    let mut bwd = Sum::default();
    for i in 0..b {
        for _ in 0..k {
            fwd.add(nce(&iu[i], t, i, tau) + nce(&iv[i], t, i, tau));
            bwd.add(nce(&t[i], iu, i, tau) + nce(&t[i], iv, i, tau));
        }
    }
    scale * fwd.value() + scale * bwd.value()
}

/// Views-to-prompts term of one view: `prompts[j][m]` is prompt `m` of caption `j`.
fn view_to_prompts(view: &Rows, prompts: &[Rows], tau: f64) -> f64 {
    let b = view.len();
    let mut acc = Sum::default();
    for i in 0..b {
        let mut num = Sum::default();
        let mut den = Sum::default();
        for m in 0..prompts[i].len() {
            num.add((dot(&view[i], &prompts[i][m]) / tau).exp());
        }
        for j in 0..b {
            for m in 0..prompts[j].len() {
                den.add((dot(&view[i], &prompts[j][m]) / tau).exp());
            }
        }
        acc.add(-(num.value() / den.value()).ln());
    }
    acc.value() / b as f64
}

/// Multi-label prompt loss. The prompts-to-views term is wrapped in a
/// redundant `(1/K)·Σ_k` like the other text losses.
pub fn multilabel(iu: &Rows, iv: &Rows, prompts: &[Rows], tau: f64, k: usize) -> f64 {
    let b = iu.len();
    let m = prompts[0].len();
    let fwd = 0.5 * (view_to_prompts(iu, prompts, tau) + view_to_prompts(iv, prompts, tau));
    let mut bwd = Sum::default();
    for _ in 0..k {
        for mm in 0..m {
            for i in 0..b {
                bwd.add(nce(&prompts[i][mm], iu, i, tau) + nce(&prompts[i][mm], iv, i, tau));
            }
        }
    }
    fwd + bwd.value() / (2 * m * b * k) as f64
}
