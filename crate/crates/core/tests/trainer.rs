mod common;

use std::collections::BTreeMap;

use common::checks::{self, classes};
use viewco::checkpoint::Checkpoint;
use viewco::model::Model;
use viewco::optim::{cosine_lr, decays, ema_update, AdamConfig, AdamState};
use viewco::params::ParamStore;
use viewco::synth::{gen_scene, Pair};
use viewco::trainer::{compute_gradients, fit_corpus, make_batch, train_step, Corpus, TrainConfig, TrainState};
use viewco::Tensor;

fn small_corpus(n: usize, canvas: usize) -> Corpus {
    let c = classes();
    let pairs = (0..n)
        .map(|i| {
            let s = gen_scene(100 + i as u64, &c, canvas).unwrap();
            Pair { id: format!("{i:06}"), image: s.image, mask: s.mask, caption: s.caption }
        })
        .collect();
    Corpus::new(pairs, c, &Default::default(), 12).unwrap()
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.metrics = None;
    cfg
}

fn setup(corpus: &Corpus, cfg: &TrainConfig) -> (Model, TrainState<f64>) {
    let mut mc = cfg.model.clone();
    mc.text.vocab_size = corpus.vocab.len();
    let model = Model::new(mc).unwrap();
    let state = TrainState::new(model.init(cfg.seed));
    (model, state)
}

#[test]
fn ema_matches_the_closed_form() {
    let v = checks::ema_law(20);
    assert!(v.passed, "{}", v.detail);
}

#[test]
fn ema_worked_examples() {
    let mut teacher = ParamStore::new();
    teacher.insert("teacher/w", Tensor::scalar(1.0f64));
    let mut student = ParamStore::new();
    student.insert("student/w", Tensor::scalar(0.0f64));
    ema_update(&mut teacher, &student, 0.9).unwrap();
    assert!((teacher.get("teacher/w").unwrap().item() - 0.9).abs() < 1e-15);

    // Equal weights are a fixed point.
    let mut same = ParamStore::new();
    same.insert("teacher/w", Tensor::scalar(0.9f64));
    let student = same.renamed("teacher/", "student/");
    ema_update(&mut same, &student, 0.5).unwrap();
    assert_eq!(same.get("teacher/w").unwrap().item(), 0.9);
    assert!(ema_update(&mut same, &student, 1.0).is_err());
}

#[test]
fn adam_matches_a_scalar_reference() {
    // Minimize (w − 3)² from w = 0.
    let cfg = AdamConfig::default();
    let mut params = ParamStore::new();
    params.insert("w.weight", Tensor::scalar(0.0f64));
    let mut state = AdamState::new();
    let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    let lr = 0.1;
    for t in 1..=20 {
        let g = 2.0 * (params.get("w.weight").unwrap().item() - 3.0);
        let grads = BTreeMap::from([("w.weight".to_string(), Tensor::scalar(g))]);
        state.step(&cfg, &mut params, &grads, lr).unwrap();

        let g = 2.0 * (w - 3.0);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w = w * (1.0 - lr * 0.05) - lr * mh / (vh.sqrt() + 1e-8);
        assert!((params.get("w.weight").unwrap().item() - w).abs() < 1e-10, "step {t}");
    }
    assert!(w > 1.0);
}

#[test]
fn decay_exemptions() {
    assert!(decays("student/patch_embed.weight"));
    assert!(!decays("log_tau.seg"));
    assert!(!decays("student/ln.gain"));
    assert!(!decays("text/proj.bias"));

    let cfg = AdamConfig::default();
    let mut params = ParamStore::new();
    params.insert("a.bias", Tensor::scalar(1.0f64));
    params.insert("a.weight", Tensor::scalar(1.0f64));
    let zero = BTreeMap::from([
        ("a.bias".to_string(), Tensor::scalar(0.0)),
        ("a.weight".to_string(), Tensor::scalar(0.0)),
    ]);
    AdamState::new().step(&cfg, &mut params, &zero, 0.1).unwrap();
    assert_eq!(params.get("a.bias").unwrap().item(), 1.0);
    assert!((params.get("a.weight").unwrap().item() - (1.0 - 0.1 * 0.05)).abs() < 1e-15);
}

#[test]
fn cosine_schedule_landmarks() {
    assert_eq!(cosine_lr(0, 100, 10, 1.0), 0.0);
    assert!((cosine_lr(5, 100, 10, 1.0) - 0.5).abs() < 1e-15);
    assert_eq!(cosine_lr(10, 100, 10, 1.0), 1.0);
    assert!((cosine_lr(55, 100, 10, 1.0) - 0.5).abs() < 1e-12);
    assert!(cosine_lr(100, 100, 10, 1.0).abs() < 1e-15);
    assert_eq!(cosine_lr(3, 0, 0, 1.0), 0.0);
}

#[test]
fn teacher_receives_no_gradient() {
    let corpus = small_corpus(4, 32);
    let cfg = small_config();
    let (model, state) = setup(&corpus, &cfg);
    let batch = make_batch::<f64>(&corpus, &[0, 1, 2, 3], &cfg.aug, 0, 0).unwrap();
    let (loss, grads) = compute_gradients(&model, &cfg, &state.params, &batch, 0).unwrap();
    assert!(loss.total.is_finite());
    assert!(grads.keys().all(|k| !k.starts_with("teacher/")));
    assert!(grads.keys().any(|k| k.starts_with("student/")));
    assert!(grads.keys().any(|k| k.starts_with("text/")));
}

#[test]
fn zero_learning_rate_moves_only_the_teacher_toward_the_student() {
    let corpus = small_corpus(4, 32);
    let cfg = small_config();
    let (model, mut state) = setup(&corpus, &cfg);
    let before = state.params.clone();
    let batch = make_batch::<f64>(&corpus, &[0, 1, 2, 3], &cfg.aug, 0, 0).unwrap();
    train_step(&model, &cfg, &mut state, &batch, 0.0).unwrap();
    assert_eq!(state.params.trainable, before.trainable);
    // Teacher started as a copy, so the EMA leaves it in place.
    assert!(state.params.teacher.iter().zip(before.teacher.iter()).all(|((_, a), (_, b))| a.max_abs_diff(b) < 1e-15));
    assert_eq!(state.step, 1);
}

#[test]
fn teacher_stays_between_its_start_and_the_student() {
    let corpus = small_corpus(8, 32);
    let cfg = small_config();
    let (model, mut state) = setup(&corpus, &cfg);
    let start = state.params.teacher.clone();
    let mut lo = start.clone();
    let mut hi = start.clone();
    for step in 0..4 {
        let idx = [step % 8, (step + 1) % 8, (step + 2) % 8, (step + 3) % 8];
        let batch = make_batch::<f64>(&corpus, &idx, &cfg.aug, 0, step).unwrap();
        train_step(&model, &cfg, &mut state, &batch, 1e-2).unwrap();
        let student = state.params.student();
        for (((_, l), (_, h)), (_, s)) in lo.iter_mut().zip(hi.iter_mut()).zip(student.iter()) {
            for ((l, h), &s) in l.data_mut().iter_mut().zip(h.data_mut().iter_mut()).zip(s.data()) {
                *l = l.min(s);
                *h = h.max(s);
            }
        }
        for (((_, t), (_, l)), (_, h)) in state.params.teacher.iter().zip(lo.iter()).zip(hi.iter()) {
            for ((&t, &l), &h) in t.data().iter().zip(l.data()).zip(h.data()) {
                assert!(t >= l - 1e-12 && t <= h + 1e-12);
            }
        }
    }
    assert_ne!(state.params.teacher, start);
}

#[test]
fn training_is_deterministic() {
    let corpus = small_corpus(8, 32);
    let cfg = small_config();
    let a = fit_corpus::<f64>(&cfg, &corpus, false).unwrap();
    let b = fit_corpus::<f64>(&cfg, &corpus, false).unwrap();
    assert_eq!(a.losses.len(), 4);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.checkpoint.params, b.checkpoint.params);
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let corpus = small_corpus(4, 32);
    let mut cfg = small_config();
    cfg.epochs = 0;
    let out = fit_corpus::<f32>(&cfg, &corpus, false).unwrap();
    assert!(out.losses.is_empty());
    let model = out.checkpoint.model().unwrap();
    assert_eq!(out.checkpoint.params, model.init::<f32>(cfg.seed));
    assert_eq!(out.checkpoint.params.teacher, out.checkpoint.params.trainable.renamed("student/", "teacher/"));
    assert_eq!(out.checkpoint.step, 0);
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(4, 32);
    let cfg = TrainConfig { epochs: 1, warmup_epochs: 0, ..small_config() };
    let ckpt = fit_corpus::<f32>(&cfg, &corpus, false).unwrap().checkpoint;
    assert_eq!(ckpt.step, 1);
    let (a, b) = (dir.path().join("a.vwct"), dir.path().join("b.vwct"));
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::<f32>::load(&a).unwrap();
    assert_eq!(loaded.params, ckpt.params);
    assert_eq!(loaded.adam, ckpt.adam);
    assert_eq!(loaded.train.model, ckpt.train.model);
    assert_eq!((loaded.train.threshold, loaded.step), (ckpt.train.threshold, ckpt.step));
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    // Reading at a wider precision converts exactly.
    let wide = Checkpoint::<f64>::load(&a).unwrap();
    let w = wide.params.trainable.get("student/pos_embed").unwrap();
    let n = ckpt.params.trainable.get("student/pos_embed").unwrap();
    assert!(w.data().iter().zip(n.data()).all(|(&w, &n)| w == n as f64));
}

#[test]
fn toy_run_reduces_the_loss() {
    let cfg = TrainConfig { metrics: None, ..TrainConfig::toy() };
    let corpus = small_corpus(2000, cfg.model.encoder.image_size);
    let out = fit_corpus::<f32>(&cfg, &corpus, false).unwrap();
    assert_eq!(out.losses.len(), 625);
    let (first, last) = (out.losses[0].total, out.losses[624].total);
    assert!(last < first, "{first} -> {last}");
}
