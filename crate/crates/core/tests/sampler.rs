mod common;

use common::{brute_force_filter, chi_square, CHI2_99};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selfsynth::data::toy::{text_documents, write_unlabeled_images};
use selfsynth::data::{load_image_manifest, Provenance};
use selfsynth::model::{encode_grouped, ModelConfig, ModelParams};
use selfsynth::synthesis::{filter_logits, generate_caption, sample_token, synthesize_corpus, SamplerConfig};
use selfsynth::tokenizer::{BpeVocab, EOS, IMG, PAD};

fn cfg(t: f64, k: usize, p: f64) -> SamplerConfig {
    SamplerConfig {
        temperature: t,
        top_k: k,
        top_p: p,
        ..Default::default()
    }
}

#[test]
fn hand_sorted_five_token_example() {
    // sorted: id3 (e^3), id0 (e^2), id1 (e^1) survive top-3; the first two
    // already hold e^3+e^2 over e^3+e^2+e^1 = 0.909 >= 0.9 of that mass
    let d = filter_logits(&[2.0, 1.0, 0.0, 3.0, -1.0], &cfg(1.0, 3, 0.9));
    let hi = 1.0 / (1.0 + (-1.0f64).exp());
    let want = [1.0 - hi, 0.0, 0.0, hi, 0.0];
    for (g, w) in d.iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "{d:?}");
    }
}

#[test]
fn exhaustive_grid_matches_brute_force() {
    let vals = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let mut grid = vec![(0.7, 5, 0.95)];
    for t in [0.5, 0.7, 1.0, 2.0] {
        for k in [1, 2, 3, 5] {
            for p in [0.3, 0.55, 0.9, 0.95, 1.0] {
                grid.push((t, k, p));
            }
        }
    }
    let mut z = [0.0; 5];
    for code in 0..5usize.pow(5) {
        let mut c = code;
        for v in z.iter_mut() {
            *v = vals[c % 5];
            c /= 5;
        }
        for &(t, k, p) in &grid {
            let got = filter_logits(&z, &cfg(t, k, p));
            let want = brute_force_filter(&z, t, k, p);
            for i in 0..5 {
                assert_eq!(got[i] > 0.0, want[i] > 0.0, "support {z:?} T={t} k={k} p={p}");
                assert!((got[i] - want[i]).abs() < 1e-9, "mass {z:?} T={t} k={k} p={p}");
            }
        }
    }
}

#[test]
fn draws_follow_the_distribution() {
    let probs = [0.7, 0.2, 0.1];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0u64; 3];
    for _ in 0..100_000 {
        counts[sample_token(&probs, &mut rng).unwrap() as usize] += 1;
    }
    let stat = chi_square(&counts, &probs);
    assert!(stat < CHI2_99[1], "chi-square {stat} with counts {counts:?}");
}

#[test]
fn seeded_streams_repeat() {
    let probs = [0.1, 0.2, 0.3, 0.4];
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..200).map(|_| sample_token(&probs, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!((0..50).all(|_| sample_token(&[0.0, 0.0, 1.0], &mut rng).unwrap() == 2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn filtered_rows_are_distributions_over_a_prefix(
        z in proptest::collection::vec(-8.0f64..8.0, 1..30),
        t in 0.05f64..4.0,
        k_frac in 0.0f64..1.0,
        p in 0.01f64..=1.0,
    ) {
        let k = 1 + ((z.len() - 1) as f64 * k_frac) as usize;
        let d = filter_logits(&z, &cfg(t, k, p));
        prop_assert!(d.iter().all(|&x| x >= 0.0));
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let support: Vec<usize> = (0..z.len()).filter(|&i| d[i] > 0.0).collect();
        prop_assert!(!support.is_empty() && support.len() <= k);
        // every kept token outranks every dropped one
        for &i in &support {
            for j in (0..z.len()).filter(|j| d[*j] == 0.0) {
                prop_assert!(z[i] > z[j] || (z[i] == z[j] && i < j));
            }
        }
    }
}

fn toy_vocab(size: usize) -> BpeVocab {
    BpeVocab::train(&text_documents(3, 4000), size).unwrap()
}

#[test]
fn caption_lengths_respect_draw_and_cap() {
    let vocab = toy_vocab(300);
    let desk = ModelConfig { vocab_size: 300, ..ModelConfig::desk() };
    let params: ModelParams<f32> = ModelParams::init(&desk, 1).unwrap();
    let img = selfsynth::data::Image::zeros(params.config().image_side);
    let grouped = encode_grouped(&params, &img).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sc = SamplerConfig::default();
    for _ in 0..12 {
        let c = generate_caption(&params, &grouped, &vocab, &sc, &mut rng).unwrap();
        assert!((32..=64).contains(&c.target_len));
        assert!(!c.tokens.is_empty() && c.tokens.len() <= c.target_len);
        assert!(c.tokens.iter().all(|&t| t != PAD && t != IMG));
        assert!(c.tokens[..c.tokens.len() - 1].iter().all(|&t| t != EOS));
    }
    let uncapped = SamplerConfig {
        length_draw: false,
        ..sc
    };
    for _ in 0..2 {
        let c = generate_caption(&params, &grouped, &vocab, &uncapped, &mut rng).unwrap();
        assert_eq!(c.target_len, 256);
        assert!(c.tokens.len() <= 256);
    }
}

#[test]
fn min_len_suppresses_early_eos() {
    let vocab = toy_vocab(300);
    let mut params: ModelParams<f32> = ModelParams::init(&ModelConfig::toy(300), 1).unwrap();
    // make EOS overwhelmingly likely at every step
    let lm = params.get_mut("lm_head").unwrap();
    let v = lm.shape()[1];
    for r in 0..lm.shape()[0] {
        lm.data_mut()[r * v + EOS as usize] = 50.0;
    }
    let grouped = encode_grouped(&params, &selfsynth::data::Image::zeros(32)).unwrap();
    let sc = SamplerConfig { min_len: 5, max_len_low: 10, max_len_high: 10, ..Default::default() };
    let c = generate_caption(&params, &grouped, &vocab, &sc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(c.tokens.len(), 5);
    assert_eq!(*c.tokens.last().unwrap(), EOS);
}

#[test]
fn small_manifest_corpus_is_tagged_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_unlabeled_images(dir.path(), 10, 16, 4, "unl").unwrap();
    let images = load_image_manifest(&manifest).unwrap();
    let vocab = toy_vocab(300);
    let params: ModelParams<f32> = ModelParams::init(&ModelConfig::toy(300), 2).unwrap();
    let sc = SamplerConfig { max_len_low: 4, max_len_high: 8, ..Default::default() };
    let (a, skips) = synthesize_corpus(&params, &images, &vocab, &sc, 77).unwrap();
    assert_eq!(skips.skipped, 0);
    assert_eq!(a.documents.len(), 10);
    assert!(a.documents.iter().all(|d| d.provenance == Provenance::Synthetic));
    let meta = a.meta.as_ref().unwrap();
    assert_eq!(meta["model_digest"], params.digest());
    assert_eq!(meta["seed"], 77);
    assert_eq!(meta["sampler"]["top_p"], 0.95);

    let (b, _) = synthesize_corpus(&params, &images, &vocab, &sc, 77).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());

    // a caption depends on its manifest index, not on its neighbours
    let (tail, _) = synthesize_corpus(&params, &images[..3], &vocab, &sc, 77).unwrap();
    assert_eq!(tail.documents[..], a.documents[..3]);
}

#[test]
fn unreadable_images_are_skipped_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_unlabeled_images(dir.path(), 3, 16, 4, "unl").unwrap();
    let mut images = load_image_manifest(&manifest).unwrap();
    let bad = dir.path().join("broken.ppm");
    std::fs::write(&bad, b"P6 garbage").unwrap();
    images.insert(1, bad);
    let vocab = toy_vocab(300);
    let params: ModelParams<f32> = ModelParams::init(&ModelConfig::toy(300), 2).unwrap();
    let sc = SamplerConfig { max_len_low: 2, max_len_high: 3, ..Default::default() };
    let (corpus, skips) = synthesize_corpus(&params, &images, &vocab, &sc, 1).unwrap();
    assert_eq!(corpus.documents.len(), 3);
    assert_eq!(skips.skipped, 1);
    assert!(skips.items[0].path.contains("broken"));
}
