use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use viewco::model::{Model, ModelConfig};
use viewco::params::ParamStore;
use viewco::synth::{gen_scene, DEFAULT_CLASSES};
use viewco::text::{
    detokenize, extract_class_word, generate_prompts, tokenize, words, PromptSet, TextConfig, TextEncoder, Vocab, BOS, EOS,
    PAD,
};
use viewco::Error;

fn classes() -> Vec<String> {
    DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
}

fn captions(n: u64) -> Vec<(String, String)> {
    let c = classes();
    (0..n)
        .map(|seed| {
            let s = gen_scene(seed, &c, 32).unwrap();
            (s.caption, c[s.shapes[0].class].clone())
        })
        .collect()
}

#[test]
fn extraction_agrees_with_generator_labels() {
    let c = classes();
    for (caption, class) in captions(1000) {
        assert_eq!(extract_class_word(&caption, &c).unwrap(), class, "{caption}");
    }
}

#[test]
fn detokenize_inverts_tokenize_on_the_corpus() {
    let caps = captions(300);
    let vocab = Vocab::build(caps.iter().map(|(c, _)| c.as_str()));
    for (caption, _) in &caps {
        let ids = tokenize(caption, &vocab, 12).unwrap();
        assert_eq!((ids[0], ids.len()), (BOS, 12));
        assert_eq!(detokenize(&ids, &vocab), words(caption).join(" "));
    }
}

#[test]
fn vocab_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocab::build(captions(50).iter().map(|(c, _)| c.as_str()));
    let path = dir.path().join("vocab.tsv");
    vocab.save(&path).unwrap();
    assert_eq!(Vocab::load(&path).unwrap(), vocab);
    assert!(matches!(Vocab::from_tsv("dog\t0\n"), Err(Error::Format(_))));
}

fn encoder(seed: u64) -> (TextEncoder, ParamStore<f64>) {
    let enc = TextEncoder::new(TextConfig::toy(20), "text/").unwrap();
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    (enc, store)
}

#[test]
fn padding_does_not_change_the_embedding() {
    let (enc, store) = encoder(1);
    let short = [BOS, 7, 9, 4, EOS];
    let mut padded = short.to_vec();
    padded.resize(12, PAD);
    let a = enc.encode_values(&store, &short).unwrap();
    let b = enc.encode_values(&store, &padded).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-9);
    assert_eq!(a, enc.encode_values(&store, &short).unwrap());
}

#[test]
fn all_padding_is_empty_text() {
    let (enc, store) = encoder(2);
    assert!(matches!(enc.encode_values(&store, &[PAD; 5]), Err(Error::EmptyText)));
    assert!(matches!(generate_prompts(" ", &PromptSet::default()), Err(Error::EmptyText)));
}

#[test]
fn text_embeddings_live_in_the_shared_space() {
    let model = Model::new(ModelConfig::toy(20)).unwrap();
    let params = model.init::<f64>(3);
    let e = model.text_embedding(&params.trainable, &[BOS, 5, 6, EOS]).unwrap();
    assert_eq!(e.shape(), &[1, model.config.embed_dim()]);
    assert!((e.data().iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn non_class_words_move_the_caption_but_not_the_prompts() {
    let c = classes();
    let (a, b) = ("a red circle on gray", "a blue circle on sand");
    let prompts = PromptSet::default();
    let vocab = Vocab::build([a, b, "a photo of a circle. a picture of an image"]);
    let pa = generate_prompts(extract_class_word(a, &c).unwrap(), &prompts).unwrap();
    let pb = generate_prompts(extract_class_word(b, &c).unwrap(), &prompts).unwrap();
    assert_eq!(pa, pb);

    let mut cfg = ModelConfig::toy(vocab.len());
    cfg.text.max_len = 12;
    let model = Model::new(cfg).unwrap();
    let params = model.init::<f64>(4);
    let ea = model.text_embedding(&params.trainable, &tokenize(a, &vocab, 12).unwrap()).unwrap();
    let eb = model.text_embedding(&params.trainable, &tokenize(b, &vocab, 12).unwrap()).unwrap();
    assert!(ea.max_abs_diff(&eb) > 1e-6);
}

#[test]
fn prompts_contain_the_class_word_once() {
    for class in DEFAULT_CLASSES {
        let out = generate_prompts(class, &PromptSet::default()).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|p| p.matches(class).count() == 1));
    }
}

#[test]
fn truncation_keeps_the_end_marker() {
    let vocab = Vocab::build(["one two three four five six"]);
    let ids = tokenize("one two three four five six", &vocab, 4).unwrap();
    assert_eq!(ids, vec![BOS, vocab.id("one"), vocab.id("two"), EOS]);
}
