//! Zero-shot segmentation and its evaluation.
//!
//! Patches are grouped by the teacher encoder's hard assignment, each segment
//! token is embedded with the vision head, and a segment takes the class whose
//! prompt embedding it matches best, provided the softmax probability over
//! classes reaches the label set's threshold. Otherwise it is background.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::augment::{augment_two_views, warp_mask, AugConfig, Geometry};
use crate::autodiff::{argmax, Tape};
use crate::checkpoint::Checkpoint;
use crate::encoder::AssignMode;
use crate::error::{Error, Result};
use crate::image::{write_pgm, Grid, Mask, RgbImage};
use crate::model::{Model, TauSlot};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::synth::{pair_seed, Dataset, Pair};
use crate::tensor::Tensor;
use crate::tensor_file::write_atomic;
use crate::text::{tokenize, PromptSet, Vocab};

pub const VOC_THRESHOLD: f64 = 0.95;
pub const CONTEXT_THRESHOLD: f64 = 0.35;
pub const COCO_THRESHOLD: f64 = 0.95;
/// Threshold used on the synthetic shapes corpus.
pub const TOY_THRESHOLD: f64 = 0.5;
/// Shorter image side at inference for the full-size encoder.
pub const PAPER_SHORT_SIDE: usize = 448;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    names: Vec<String>,
    threshold: f64,
}

impl LabelSet {
    /// Foreground class names; id 0 is the implicit background, name `i` gets id `i + 1`.
    pub fn new(names: Vec<String>, threshold: f64) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::config("label set is empty"));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::config(format!("threshold {threshold} outside (0, 1)")));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || names[..i].contains(n) {
                return Err(Error::config(format!("label '{n}' empty or repeated")));
            }
        }
        Ok(LabelSet { names, threshold })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Number of ids including background.
    pub fn num_classes(&self) -> usize {
        self.names.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentationResult {
    /// Segment id of every patch, row-major over the patch grid.
    pub patch_segments: Vec<usize>,
    /// Class id of every segment (0 = background).
    pub segment_classes: Vec<usize>,
    pub pixel_mask: Mask,
}

/// Row-wise argmax of a `P × K` assignment map (ties to the lowest segment).
pub fn patch_segments<T: Scalar>(assignment: &Tensor<T>) -> Vec<usize> {
    (0..assignment.rows()).map(|r| argmax(assignment.row(r))).collect()
}

/// Teacher segment tokens (`K × d`), hard patch-to-segment map, and per-patch segment ids.
pub fn segment_image<T: Scalar>(
    model: &Model,
    teacher: &ParamStore<T>,
    image: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<usize>)> {
    let (segments, assignment) = model.teacher.encode_values(teacher, image, AssignMode::Hard)?;
    let patches = patch_segments(&assignment);
    Ok((segments, assignment, patches))
}

/// One unit-norm embedding per label: the renormalized mean of its prompt embeddings.
pub fn label_embeddings<T: Scalar>(
    model: &Model,
    trainable: &ParamStore<T>,
    vocab: &Vocab,
    labels: &LabelSet,
    prompts: &PromptSet,
) -> Result<Tensor<T>> {
    let e = model.config.embed_dim();
    let mut out = Vec::with_capacity(labels.names.len() * e);
    for name in &labels.names {
        let mut mean = vec![0.0f64; e];
        for text in prompts.generate(name)? {
            let ids = tokenize(&text, vocab, model.config.text.max_len)?;
            let emb = model.text_embedding(trainable, &ids)?;
            mean.iter_mut().zip(emb.data()).for_each(|(m, &v)| *m += v.f64());
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= crate::numerics::NORM_EPS {
            return Err(Error::DegenerateVector { row: out.len() / e, norm });
        }
        out.extend(mean.iter().map(|v| T::of(v / norm)));
    }
    Tensor::matrix(labels.names.len(), e, out)
}

/// Thresholded softmax labeling of a `K × C` similarity matrix. Returns class
/// ids in `0..=C` (0 = background).
pub fn classify_similarities(sims: &[Vec<f64>], tau: f64, threshold: f64) -> Result<Vec<usize>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    sims.iter()
        .map(|row| {
            if row.is_empty() {
                return Err(Error::config("label set is empty"));
            }
            let best = argmax(row);
            let max = row[best];
            let denom: f64 = row.iter().map(|&s| ((s - max) / tau).exp()).sum();
            let p = 1.0 / denom;
            Ok(if p >= threshold { best + 1 } else { 0 })
        })
        .collect()
}

/// Class id per segment from `K × d` teacher segment tokens.
pub fn classify_segments<T: Scalar>(
    model: &Model,
    trainable: &ParamStore<T>,
    segment_tokens: &Tensor<T>,
    label_embeddings: &Tensor<T>,
    tau: f64,
    threshold: f64,
) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let p = trainable.bind(&tape, false);
    let z = model.embed_segments(&p, tape.constant(segment_tokens.clone()))?.value();
    let sims = z.matmul(&label_embeddings.transpose())?;
    let rows: Vec<Vec<f64>> = (0..sims.rows()).map(|r| sims.row(r).iter().map(|v| v.f64()).collect()).collect();
    classify_similarities(&rows, tau, threshold)
}

/// Nearest-neighbour upsampling of per-patch classes to a `width × height` mask.
pub fn render_pixel_mask(patch_segments: &[usize], segment_classes: &[usize], grid: usize, width: usize, height: usize) -> Result<Mask> {
    if patch_segments.len() != grid * grid {
        return Err(Error::shape(format!("{} patches for a {grid}×{grid} grid", patch_segments.len())));
    }
    if let Some(&bad) = patch_segments.iter().find(|&&s| s >= segment_classes.len()) {
        return Err(Error::shape(format!("segment {bad} has no class")));
    }
    Ok(Grid::from_fn(width, height, |x, y| {
        let (gx, gy) = (x * grid / width, y * grid / height);
        segment_classes[patch_segments[gy * grid + gx]] as u8
    }))
}

/// Pixel confusion counts, `counts[gt * n + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    n: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion { n: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    /// Adds every pixel where `valid` (if given) is non-zero.
    pub fn add(&mut self, pred: &Mask, gt: &Mask, valid: Option<&Mask>) -> Result<()> {
        if pred.width() != gt.width() || pred.height() != gt.height() {
            return Err(Error::shape("prediction and ground truth differ in size"));
        }
        if let Some(v) = valid {
            if v.width() != gt.width() || v.height() != gt.height() {
                return Err(Error::shape("validity mask differs in size"));
            }
        }
        for (i, (&p, &g)) in pred.pixels().iter().zip(gt.pixels()).enumerate() {
            if valid.is_some_and(|v| v.pixels()[i] == 0) {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.n || g >= self.n {
                return Err(Error::shape(format!("class id {} outside {} classes", p.max(g), self.n)));
            }
            self.counts[g * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class; `None` for classes absent from both prediction and ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let inter = self.counts[c * self.n + c];
                let gt: u64 = (0..self.n).map(|p| self.counts[c * self.n + p]).sum();
                let pred: u64 = (0..self.n).map(|g| self.counts[g * self.n + c]).sum();
                let union = gt + pred - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over present classes (0 when nothing was counted).
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Per-class IoU and their mean over classes present in either mask.
pub fn miou(pred: &Mask, gt: &Mask, num_classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, gt, None)?;
    Ok((c.iou(), c.mean_iou()))
}

/// mIoU between view-u's mask warped into view v and view-v's mask, on the shared region.
pub fn cross_view_consistency(mask_u: &Mask, mask_v: &Mask, geom_u: &Geometry, geom_v: &Geometry, num_classes: usize) -> Result<f64> {
    let (warped, valid) = warp_mask(mask_u, geom_u, geom_v);
    let mut c = Confusion::new(num_classes);
    c.add(&warped, mask_v, Some(&valid))?;
    if c.total() == 0 {
        return Err(Error::EmptyOverlap);
    }
    Ok(c.mean_iou())
}

/// Nearest-neighbour resize so the shorter side equals `target`.
pub fn resize_shorter_side(img: &RgbImage, target: usize) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let short = w.min(h);
    let (nw, nh) = ((w * target).div_ceil(short), (h * target).div_ceil(short));
    Grid::from_fn(nw, nh, |x, y| img.get((x * w / nw).min(w - 1), (y * h / nh).min(h - 1)))
}

/// Centered `side × side` crop.
pub fn center_crop(img: &RgbImage, side: usize) -> Result<RgbImage> {
    if side > img.width() || side > img.height() {
        return Err(Error::shape(format!("cannot crop {side}px from {}×{}", img.width(), img.height())));
    }
    let (x0, y0) = ((img.width() - side) / 2, (img.height() - side) / 2);
    Ok(Grid::from_fn(side, side, |x, y| img.get(x0 + x, y0 + y)))
}

/// Brings an arbitrary image to a square encoder input: shorter side to
/// `short_side`, then a centered square crop.
pub fn prepare_input(img: &RgbImage, short_side: usize) -> Result<RgbImage> {
    let resized = if img.width().min(img.height()) == short_side { img.clone() } else { resize_shorter_side(img, short_side) };
    center_crop(&resized, short_side)
}

/// Everything needed to segment images with a trained checkpoint.
pub struct Segmenter<T> {
    pub model: Model,
    pub checkpoint: Checkpoint<T>,
    pub labels: LabelSet,
    pub label_embeddings: Tensor<T>,
    pub tau: f64,
}

impl<T: Scalar> Segmenter<T> {
    /// `tau = None` uses the trained temperature.
    pub fn new(checkpoint: Checkpoint<T>, labels: LabelSet, tau: Option<f64>) -> Result<Self> {
        let model = checkpoint.model()?;
        model.check_params(&checkpoint.params)?;
        let label_embeddings = label_embeddings(
            &model,
            &checkpoint.params.trainable,
            &checkpoint.vocab,
            &labels,
            &checkpoint.train.prompts,
        )?;
        let tau = match tau {
            Some(t) => t,
            None => model.tau(&checkpoint.params.trainable, TauSlot::TextViews)?,
        };
        Ok(Segmenter { model, checkpoint, labels, label_embeddings, tau })
    }

    pub fn with_threshold(&self, threshold: f64) -> Result<LabelSet> {
        LabelSet::new(self.labels.names.clone(), threshold)
    }

    /// Segments an encoder-sized square image.
    pub fn segment(&self, image: &RgbImage) -> Result<SegmentationResult> {
        let input = image.to_input::<T>();
        let (tokens, _, patches) = segment_image(&self.model, &self.checkpoint.params.teacher, &input)?;
        let classes = classify_segments(
            &self.model,
            &self.checkpoint.params.trainable,
            &tokens,
            &self.label_embeddings,
            self.tau,
            self.labels.threshold,
        )?;
        let grid = image.width() / self.model.config.encoder.patch_size;
        let pixel_mask = render_pixel_mask(&patches, &classes, grid, image.width(), image.height())?;
        Ok(SegmentationResult { patch_segments: patches, segment_classes: classes, pixel_mask })
    }
}

/// Source of predicted masks for [`evaluate`].
pub enum Predictor<'a, T> {
    Model(&'a Segmenter<T>),
    /// Returns the ground-truth mask itself; a harness check.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub miou: f64,
    pub consistency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Dataset-level mIoU from the summed confusion matrix.
    pub miou: f64,
    /// Mean per-image cross-view consistency.
    pub consistency: Option<f64>,
    /// Fraction of pixels predicted as foreground.
    pub foreground_fraction: f64,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let c = r.consistency.map_or("-".to_string(), |c| format!("{c:.6}"));
            writeln!(s, "{}\t{:.6}\t{}", r.id, r.miou, c).expect("write to string");
        }
        s
    }

    pub fn summary(&self) -> String {
        let c = self.consistency.map_or("n/a".to_string(), |c| format!("{c:.4}"));
        format!("mIoU={:.4} consistency={}", self.miou, c)
    }
}

/// Seed of the view pair used to measure consistency on pair `index`.
pub const CONSISTENCY_SEED: u64 = 0xC0_5157;

pub struct EvalOptions<'a> {
    pub consistency: bool,
    pub aug: AugConfig,
    /// Directory for predicted masks (`<id>.pgm`), if any.
    pub predictions: Option<&'a Path>,
}

fn evaluate_pair<T: Scalar>(
    predictor: &Predictor<'_, T>,
    pair: &Pair,
    index: usize,
    num_classes: usize,
    opts: &EvalOptions<'_>,
) -> Result<(EvalRow, Confusion, Mask)> {
    let pred = match predictor {
        Predictor::Model(s) => s.segment(&pair.image)?.pixel_mask,
        Predictor::GroundTruth => pair.mask.clone(),
    };
    let mut conf = Confusion::new(num_classes);
    conf.add(&pred, &pair.mask, None)?;
    let consistency = if opts.consistency {
        let views = augment_two_views(&pair.image, pair_seed(CONSISTENCY_SEED, index as u64), &opts.aug)?;
        let (mu, mv) = match predictor {
            Predictor::Model(s) => (s.segment(&views.view_u)?.pixel_mask, s.segment(&views.view_v)?.pixel_mask),
            Predictor::GroundTruth => (views.geom_u.render(&pair.mask), views.geom_v.render(&pair.mask)),
        };
        Some(cross_view_consistency(&mu, &mv, &views.geom_u, &views.geom_v, num_classes)?)
    } else {
        None
    };
    Ok((EvalRow { id: pair.id.clone(), miou: conf.mean_iou(), consistency }, conf, pred))
}

/// Evaluates every pair of `dataset`.
pub fn evaluate<T: Scalar>(
    predictor: &Predictor<'_, T>,
    dataset: &Dataset,
    num_classes: usize,
    opts: &EvalOptions<'_>,
) -> Result<EvalReport> {
    let pairs = dataset.load_all()?;
    evaluate_pairs(predictor, &pairs, num_classes, opts)
}

pub fn evaluate_pairs<T: Scalar>(
    predictor: &Predictor<'_, T>,
    pairs: &[Pair],
    num_classes: usize,
    opts: &EvalOptions<'_>,
) -> Result<EvalReport> {
    let results: Vec<(EvalRow, Confusion, Mask)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| evaluate_pair(predictor, p, i, num_classes, opts))
        .collect::<Result<_>>()?;
    let mut total = Confusion::new(num_classes);
    let (mut fg, mut px) = (0usize, 0usize);
    for (row, conf, pred) in &results {
        total.merge(conf);
        fg += pred.pixels().iter().filter(|&&c| c != 0).count();
        px += pred.pixels().len();
        if let Some(dir) = opts.predictions {
            write_pgm(&dir.join(format!("{}.pgm", row.id)), pred)?;
        }
    }
    let rows: Vec<EvalRow> = results.into_iter().map(|(r, _, _)| r).collect();
    let consistency = if opts.consistency && !rows.is_empty() {
        Some(rows.iter().filter_map(|r| r.consistency).sum::<f64>() / rows.len() as f64)
    } else {
        None
    };
    Ok(EvalReport {
        miou: total.mean_iou(),
        consistency,
        foreground_fraction: if px == 0 { 0.0 } else { fg as f64 / px as f64 },
        rows,
    })
}

/// Writes `eval.tsv` rows for a report.
pub fn write_eval_tsv(path: &Path, report: &EvalReport) -> Result<()> {
    write_atomic(path, report.to_tsv().as_bytes())
}
