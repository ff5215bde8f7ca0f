//! The eight acceptance checks, each returning a [`Verdict`] instead of
//! panicking so a runner can report every one of them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viewco::augment::AugConfig;
use viewco::checkpoint::{prompts_path, vocab_path, Checkpoint};
use viewco::image::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm, Grid, Mask, RgbImage};
use viewco::losses::{
    info_nce, multilabel_prompt_loss, seg_consistency_loss, text_views_loss, text_views_loss_counted, PairTally,
};
use viewco::model::Model;
use viewco::numerics::softmax;
use viewco::optim::{ema_update, AdamState};
use viewco::params::ParamStore;
use viewco::segment::{classify_similarities, evaluate_pairs, EvalOptions, LabelSet, Predictor, Segmenter};
use viewco::synth::{write_dataset, Dataset, DEFAULT_CLASSES};
use viewco::trainer::{build_vocab, fit_corpus, Corpus, Objective, TrainConfig};
use viewco::{Scalar, Tape, Tensor};

use super::oracle::{self, Rows};

#[derive(Clone, Debug)]
pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict { passed, detail: detail.into() }
    }
}

fn verdict(f: impl FnOnce() -> viewco::Result<Verdict>) -> Verdict {
    f().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")))
}

pub fn classes() -> Vec<String> {
    DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
}

/// `n` random unit rows of width `d`.
pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    let t = Tensor::<f64>::randn(&[n, d], 1.0, rng);
    (0..n)
        .map(|r| {
            let row = t.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / norm).collect()
        })
        .collect()
}

fn perturbed(rng: &mut ChaCha8Rng, base: &Rows, noise: f64) -> Rows {
    let d = base[0].len();
    let jitter = unit_rows(rng, base.len(), d);
    base.iter()
        .zip(&jitter)
        .map(|(b, j)| {
            let v: Vec<f64> = b.iter().zip(j).map(|(x, y)| x + noise * y).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn tensor(rows: &Rows) -> Tensor<f64> {
    Tensor::from_rows(rows).expect("rectangular rows")
}

/// Library losses against the loop oracles at 64-bit.
pub fn loss_oracles(seeds: u64, tol: f64) -> Verdict {
    verdict(|| {
        let start = Instant::now();
        let mut worst = [0.0f64; 4];
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = rng.random_range(1..=4);
            let k = rng.random_range(2..=4);
            let m = rng.random_range(1..=3);
            let d = rng.random_range(2..=8);
            let tau: f64 = rng.random_range(0.05..1.0);
            let tape = Tape::<f64>::new();
            let lt = tape.constant(Tensor::scalar(tau.ln()));
            let c = |rows: &Rows| tape.constant(tensor(rows));

            let n = rng.random_range(1..=5);
            let q = unit_rows(&mut rng, 1, d);
            let keys = unit_rows(&mut rng, n, d);
            let pos = rng.random_range(0..n);
            let got = info_nce(c(&q), c(&keys), pos, lt)?.item();
            worst[0] = worst[0].max((got - oracle::nce(&q[0], &keys, pos, tau)).abs());

            let mut sets: Vec<Vec<Rows>> = Vec::new();
            for _ in 0..4 {
                sets.push((0..b).map(|_| unit_rows(&mut rng, k, d)).collect());
            }
            let vars: Vec<Vec<_>> = sets.iter().map(|s| s.iter().map(c).collect()).collect();
            let got = seg_consistency_loss(&vars[0], &vars[1], &vars[2], &vars[3], lt)?.total.item();
            let want = oracle::seg_consistency(&sets[0], &sets[1], &sets[2], &sets[3], tau);
            worst[1] = worst[1].max((got - want).abs());

            let iu = unit_rows(&mut rng, b, d);
            let iv = unit_rows(&mut rng, b, d);
            let t = unit_rows(&mut rng, b, d);
            let got = text_views_loss(c(&iu), c(&iv), c(&t), lt)?.total.item();
            worst[2] = worst[2].max((got - oracle::text_views(&iu, &iv, &t, tau, k)).abs());

            let prompts: Vec<Rows> = (0..b).map(|_| unit_rows(&mut rng, m, d)).collect();
            let flat: Rows = prompts.iter().flatten().cloned().collect();
            let got = multilabel_prompt_loss(c(&iu), c(&iv), c(&flat), m, lt)?.total.item();
            worst[3] = worst[3].max((got - oracle::multilabel(&iu, &iv, &prompts, tau, k)).abs());
        }
        let secs = start.elapsed().as_secs_f64();
        let detail = format!(
            "{seeds} seeds, max abs error info_nce {:.1e} seg {:.1e} text_views {:.1e} multilabel {:.1e}, {secs:.2}s",
            worst[0], worst[1], worst[2], worst[3]
        );
        Ok(Verdict::new(worst.iter().all(|&w| w < tol) && secs < 30.0, detail))
    })
}

/// Ten EMA updates towards a fixed student against `αⁿθ̄₀ + (1 − αⁿ)θ`.
pub fn ema_law(seeds: u64) -> Verdict {
    verdict(|| {
        let alpha: f64 = 0.99;
        let n = 10;
        let an = alpha.powi(n);
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut student = ParamStore::<f64>::new();
            let mut teacher = ParamStore::<f64>::new();
            for (i, shape) in [vec![3, 4], vec![5], vec![2, 2, 2]].iter().enumerate() {
                student.insert(format!("student/w{i}"), Tensor::randn(shape, 1.0, &mut rng));
                teacher.insert(format!("teacher/w{i}"), Tensor::randn(shape, 1.0, &mut rng));
            }
            let start = teacher.clone();
            for _ in 0..n {
                ema_update(&mut teacher, &student, alpha)?;
            }
            for (((_, t), (_, t0)), (_, s)) in teacher.iter().zip(start.iter()).zip(student.iter()) {
                for ((&x, &x0), &th) in t.data().iter().zip(t0.data()).zip(s.data()) {
                    worst = worst.max((x - (an * x0 + (1.0 - an) * th)).abs());
                }
            }
        }
        Ok(Verdict::new(worst < 1e-12, format!("{seeds} seeds, max deviation {worst:.1e}")))
    })
}

const PERMS3: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn permute(rows: &Rows, p: &[usize; 3]) -> Rows {
    p.iter().map(|&i| rows[i].clone()).collect()
}

/// With three well-separated segment tokens per image, permuting the student
/// rows only ever raises the segment loss.
pub fn diagonal_minimality(seeds: u64) -> Verdict {
    verdict(|| {
        let mut failures = Vec::new();
        let mut margin = f64::INFINITY;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = rng.random_range(1..=4);
            let mut sets: [Vec<Rows>; 4] = Default::default();
            for _ in 0..b {
                let base = loop {
                    let base = unit_rows(&mut rng, 3, 8);
                    let sep = (0..3).all(|i| (0..i).all(|j| oracle::dot(&base[i], &base[j]) < 0.8));
                    if sep {
                        break base;
                    }
                };
                for set in sets.iter_mut() {
                    set.push(perturbed(&mut rng, &base, 0.1));
                }
            }
            let loss = |p: &[usize; 3]| -> viewco::Result<f64> {
                let tape = Tape::<f64>::new();
                let c = |rows: &Rows| tape.constant(tensor(rows));
                let ut: Vec<_> = sets[0].iter().map(c).collect();
                let vt: Vec<_> = sets[1].iter().map(c).collect();
                let us: Vec<_> = sets[2].iter().map(|r| c(&permute(r, p))).collect();
                let vs: Vec<_> = sets[3].iter().map(|r| c(&permute(r, p))).collect();
                let lt = tape.constant(Tensor::scalar(0.1f64.ln()));
                Ok(seg_consistency_loss(&ut, &vt, &us, &vs, lt)?.total.item())
            };
            let identity = loss(&PERMS3[0])?;
            for p in &PERMS3[1..] {
                let gap = loss(p)? - identity;
                margin = margin.min(gap);
                if !(gap > 0.0) {
                    failures.push(format!("seed {seed} perm {p:?}"));
                }
            }
        }
        let detail = if failures.is_empty() {
            format!("{seeds} seeds, smallest margin {margin:.3}")
        } else {
            format!("identity not strictly minimal: {}", failures.join(", "))
        };
        Ok(Verdict::new(failures.is_empty(), detail))
    })
}

/// Instrumented pair counts of the text-to-views loss.
pub fn structural_counts() -> Verdict {
    verdict(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut notes = Vec::new();
        let mut ok = true;
        for b in 2..=4usize {
            let tape = Tape::<f64>::new();
            let c = |rows: &Rows| tape.constant(tensor(rows));
            let (iu, iv, t) = (unit_rows(&mut rng, b, 6), unit_rows(&mut rng, b, 6), unit_rows(&mut rng, b, 6));
            let lt = tape.constant(Tensor::scalar(0.07f64.ln()));
            let mut tallies = [PairTally::default(); 2];
            text_views_loss_counted(c(&iu), c(&iv), c(&t), lt, Some(&mut tallies))?;
            let want = PairTally { positives: 2 * b, negatives: 2 * b * (b - 1) };
            ok &= tallies.iter().all(|t| *t == want);
            notes.push(format!(
                "B={b}: {}+/{}- and {}+/{}-",
                tallies[0].positives, tallies[0].negatives, tallies[1].positives, tallies[1].negatives
            ));
        }
        Ok(Verdict::new(ok, notes.join("; ")))
    })
}

/// A freshly initialized checkpoint over the default classes.
pub fn untrained_checkpoint<T: Scalar>(seed: u64) -> viewco::Result<Checkpoint<T>> {
    let mut train = TrainConfig::toy();
    train.seed = seed;
    let vocab = build_vocab(&[], &classes(), &train.prompts)?;
    train.model.text.vocab_size = vocab.len();
    let params = Model::new(train.model.clone())?.init::<T>(seed);
    Ok(Checkpoint { train, params, adam: AdamState::new(), step: 0, vocab })
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    Grid::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, max: u8) -> Mask {
    Grid::from_fn(w, h, |_, _| rng.random_range(0..=max))
}

/// Threshold monotonicity, softmax shift invariance and bitwise determinism.
pub fn inference_contract(cases: usize) -> Verdict {
    verdict(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut problems = Vec::new();

        let thresholds = [0.35, 0.5, 0.65, 0.8, 0.95];
        let mut mono = 0;
        let mut shift = 0;
        let mut worst_shift = 0.0f64;
        for _ in 0..cases {
            let k = rng.random_range(1..=8);
            let c = rng.random_range(1..=5);
            let tau: f64 = rng.random_range(0.02..1.0);
            let sims: Vec<Vec<f64>> = (0..k).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let labels: Vec<Vec<usize>> =
                thresholds.iter().map(|&t| classify_similarities(&sims, tau, t)).collect::<viewco::Result<_>>()?;
            let monotone = labels.windows(2).all(|w| w[0].iter().zip(&w[1]).all(|(&lo, &hi)| hi == 0 || hi == lo));
            mono += usize::from(!monotone);

            let offset: f64 = rng.random_range(-50.0..50.0);
            let shifted: Vec<Vec<f64>> = sims.iter().map(|r| r.iter().map(|s| s + offset).collect()).collect();
            shift += usize::from(classify_similarities(&shifted, tau, 0.5)? != classify_similarities(&sims, tau, 0.5)?);
            let tape = Tape::<f64>::new();
            let p = softmax(tape.constant(Tensor::from_rows(&sims)?), tau)?.value();
            let q = softmax(tape.constant(Tensor::from_rows(&shifted)?), tau)?.value();
            worst_shift = worst_shift.max(p.max_abs_diff(&q));
        }
        if mono > 0 {
            problems.push(format!("{mono} similarity sets not monotone"));
        }
        if shift > 0 || worst_shift > 1e-12 {
            problems.push(format!("{shift} labelings moved under shift, softmax drift {worst_shift:.1e}"));
        }

        let ckpt = untrained_checkpoint::<f32>(3)?;
        let size = ckpt.train.model.encoder.image_size;
        let segmenters: Vec<Segmenter<f32>> = thresholds
            .iter()
            .map(|&t| Segmenter::new(ckpt.clone(), LabelSet::new(classes(), t)?, None))
            .collect::<viewco::Result<_>>()?;
        let twin = Segmenter::new(ckpt.clone(), LabelSet::new(classes(), thresholds[1])?, None)?;
        let (mut mono_px, mut nondet) = (0, 0);
        for _ in 0..cases {
            let img = random_image(&mut rng, size, size);
            let results: Vec<_> = segmenters.iter().map(|s| s.segment(&img)).collect::<viewco::Result<_>>()?;
            for w in results.windows(2) {
                let (lo, hi) = (w[0].pixel_mask.pixels(), w[1].pixel_mask.pixels());
                mono_px += lo.iter().zip(hi).filter(|&(&l, &h)| h != 0 && h != l).count();
            }
            nondet += usize::from(segmenters[1].segment(&img)? != results[1] || twin.segment(&img)? != results[1]);
        }
        if mono_px > 0 {
            problems.push(format!("{mono_px} pixels gained foreground at a higher threshold"));
        }
        if nondet > 0 {
            problems.push(format!("{nondet} images segmented differently on repeat"));
        }
        let detail = if problems.is_empty() {
            format!("{cases} similarity sets and {cases} images, softmax shift drift {worst_shift:.1e}")
        } else {
            problems.join("; ")
        };
        Ok(Verdict::new(problems.is_empty(), detail))
    })
}

fn same_bytes(a: &Path, b: &Path) -> viewco::Result<bool> {
    Ok(fs::read(a)? == fs::read(b)?)
}

fn randomized_checkpoint<T: Scalar>(seed: u64) -> viewco::Result<Checkpoint<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ckpt = untrained_checkpoint::<T>(seed)?;
    for (name, t) in ckpt.params.trainable.iter() {
        let shape = t.shape().to_vec();
        ckpt.adam.m.insert(name.clone(), Tensor::randn(&shape, 0.1, &mut rng));
        ckpt.adam.v.insert(name.clone(), Tensor::randn(&shape, 0.1, &mut rng).map(|x| x * x));
    }
    for (_, t) in ckpt.params.teacher.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = T::of(rng.random_range(-2.0..2.0)));
    }
    ckpt.adam.t = rng.random_range(1..1000);
    ckpt.step = ckpt.adam.t as usize;
    ckpt.train.threshold = rng.random_range(0.1..0.9);
    Ok(ckpt)
}

fn checkpoint_round_trip<T: Scalar>(dir: &Path, seed: u64) -> viewco::Result<bool> {
    let a = dir.join(format!("a{seed}.vwct"));
    let b = dir.join(format!("b{seed}.vwct"));
    let ckpt = randomized_checkpoint::<T>(seed)?;
    ckpt.save(&a)?;
    let back = Checkpoint::<T>::load(&a)?;
    back.save(&b)?;
    Ok(back.params == ckpt.params
        && back.adam == ckpt.adam
        && same_bytes(&a, &b)?
        && same_bytes(&vocab_path(&a), &vocab_path(&b))?
        && same_bytes(&prompts_path(&a), &prompts_path(&b))?)
}

/// Checkpoint, PPM and PGM write→read→write byte identity.
pub fn format_round_trips(dir: &Path, cases: u64) -> Verdict {
    verdict(|| {
        let mut bad = Vec::new();
        for seed in 0..3 {
            if !checkpoint_round_trip::<f32>(dir, seed)? {
                bad.push(format!("f32 checkpoint {seed}"));
            }
            if !checkpoint_round_trip::<f64>(dir, 100 + seed)? {
                bad.push(format!("f64 checkpoint {seed}"));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..cases {
            let (w, h) = (rng.random_range(1..=40), rng.random_range(1..=40));
            let img = random_image(&mut rng, w, h);
            let mask = random_mask(&mut rng, w, h, 255);
            let ppm = encode_ppm(&img);
            let pgm = encode_pgm(&mask);
            if encode_ppm(&decode_ppm(&ppm)?) != ppm || encode_pgm(&decode_pgm(&pgm)?) != pgm {
                bad.push(format!("in-memory image {i}"));
            }
            let (p1, p2) = (dir.join("a.ppm"), dir.join("b.ppm"));
            write_ppm(&p1, &img)?;
            write_ppm(&p2, &read_ppm(&p1)?)?;
            let (m1, m2) = (dir.join("a.pgm"), dir.join("b.pgm"));
            write_pgm(&m1, &mask)?;
            write_pgm(&m2, &read_pgm(&m1)?)?;
            if !same_bytes(&p1, &p2)? || !same_bytes(&m1, &m2)? {
                bad.push(format!("file image {i}"));
            }
        }
        let detail = if bad.is_empty() {
            format!("6 checkpoints (f32, f64), {cases} PPM/PGM pairs byte-identical")
        } else {
            format!("mismatch: {}", bad.join(", "))
        };
        Ok(Verdict::new(bad.is_empty(), detail))
    })
}

pub const HEADLINE_PAIRS: usize = 2000;
pub const HEADLINE_EVAL_PAIRS: usize = 200;
pub const HEADLINE_DATA_SEED: u64 = 1;
pub const HEADLINE_EVAL_SEED: u64 = 99;

#[derive(Clone, Debug)]
pub struct HeadlineRun {
    pub seed: u64,
    pub objective: Objective,
    pub miou: f64,
    pub consistency: f64,
    pub foreground: f64,
}

/// Trains the toy preset with the full objective and with the single-view
/// ablation, then compares zero-shot mIoU and cross-view consistency.
pub fn headline(root: &Path, seeds: &[u64]) -> Verdict {
    verdict(|| {
        let start = Instant::now();
        let classes = classes();
        let canvas = TrainConfig::toy().model.encoder.image_size;
        let (train_dir, eval_dir) = (root.join("train"), root.join("eval"));
        write_dataset(&train_dir, HEADLINE_PAIRS, HEADLINE_DATA_SEED, &classes, canvas)?;
        write_dataset(&eval_dir, HEADLINE_EVAL_PAIRS, HEADLINE_EVAL_SEED, &classes, canvas)?;
        let eval_pairs = Dataset::open(&eval_dir)?.load_all()?;

        let mut base = TrainConfig::toy();
        base.dataset = train_dir;
        base.metrics = None;
        let corpus = Corpus::load(&base)?;
        let mut runs = Vec::new();
        for &seed in seeds {
            for objective in [Objective::Full, Objective::SingleView] {
                let cfg = TrainConfig { seed, objective, ..base.clone() };
                let ckpt = fit_corpus::<f32>(&cfg, &corpus, false)?.checkpoint;
                let labels = LabelSet::new(classes.clone(), ckpt.train.threshold)?;
                let tau = ckpt.train.inference_tau;
                let aug: AugConfig = ckpt.train.aug.clone();
                let seg = Segmenter::new(ckpt, labels, tau)?;
                let opts = EvalOptions { consistency: true, aug, predictions: None };
                let report = evaluate_pairs(&Predictor::Model(&seg), &eval_pairs, classes.len() + 1, &opts)?;
                runs.push(HeadlineRun {
                    seed,
                    objective,
                    miou: report.miou,
                    consistency: report.consistency.unwrap_or(0.0),
                    foreground: report.foreground_fraction,
                });
            }
        }
        let mut detail = String::new();
        let mut passed = true;
        for pair in runs.chunks(2) {
            let (full, single) = (&pair[0], &pair[1]);
            let a = full.miou > single.miou;
            let b = full.consistency > single.consistency;
            passed &= a && b;
            write!(
                detail,
                "seed {}: mIoU {:.4} vs {:.4} ({}), consistency {:.4} vs {:.4} ({}), fg {:.2} vs {:.2}; ",
                full.seed,
                full.miou,
                single.miou,
                if a { "ok" } else { "fail" },
                full.consistency,
                single.consistency,
                if b { "ok" } else { "fail" },
                full.foreground,
                single.foreground,
            )
            .expect("write to string");
        }
        write!(detail, "{:.0}s", start.elapsed().as_secs_f64()).expect("write to string");
        Ok(Verdict::new(passed, detail))
    })
}
