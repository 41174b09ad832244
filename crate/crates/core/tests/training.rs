use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfsynth::data::{frame, Example};
use selfsynth::model::{ModelConfig, ModelParams};
use selfsynth::tokenizer::BpeVocab;
use selfsynth::training::{
    load_labeled, lora_finetune, run_phase, validation_loss, LabeledText, LoraSpec, LoraTrainConfig, PhaseConfig,
    PhaseData,
};

fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

fn random_examples(n: usize, len: usize, v: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let body: Vec<u32> = (0..len).map(|_| rng.gen_range(4..v as u32)).collect();
            Example { tokens: frame(&body, len + 2), image: None }
        })
        .collect()
}

#[test]
fn untrained_model_sits_near_uniform_entropy() {
    let v = 300;
    let mut cfg = ModelConfig::toy(v);
    cfg.init_std = 0.002;
    let params: ModelParams<f32> = ModelParams::init(&cfg, 4).unwrap();
    let ex = random_examples(12, 30, v, 1);
    let loss = validation_loss(&params, &ex, &[], 4).unwrap();
    let ln_v = (v as f64).ln();
    assert!((loss - ln_v).abs() <= 0.05 * ln_v, "{loss} vs ln V = {ln_v}");
    // batching only regroups the same token-weighted mean
    let other = validation_loss(&params, &ex, &[], 5).unwrap();
    assert!((loss - other).abs() < 1e-5);
}

fn short_phase(epochs: u64) -> PhaseConfig {
    let mut pc = PhaseConfig::preset(1, 4).unwrap();
    pc.epochs = epochs;
    pc.peak_lr = 3e-3;
    pc.warmup_steps = Some(2);
    pc.validate_every = 3;
    pc.seed = 11;
    pc
}

#[test]
fn phase_runs_are_reproducible_and_pure() {
    let v = 80;
    let cfg = ModelConfig::toy(v);
    let train = random_examples(10, 12, v, 2);
    let val = random_examples(3, 12, v, 3);
    let data = PhaseData { train, val: val.clone(), images: vec![] };
    let init: ModelParams<f32> = ModelParams::init(&cfg, 7).unwrap();
    let start = init.digest();

    let before_val = validation_loss(&init, &val, &[], 2).unwrap();
    assert_eq!(init.digest(), start);
    assert_eq!(validation_loss(&init, &val, &[], 2).unwrap(), before_val);

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (r1, p1) = run_phase(&short_phase(3), init.clone(), &data, d1.path()).unwrap();
    let (r2, p2) = run_phase(&short_phase(3), init.clone(), &data, d2.path()).unwrap();
    // checkpoint paths differ by directory, everything else must not
    assert_eq!(r1.train_loss, r2.train_loss);
    let key = |r: &selfsynth::training::PhaseRecord| r.points.iter().map(|p| (p.step, p.val_loss, p.digest.clone())).collect::<Vec<_>>();
    assert_eq!(key(&r1), key(&r2));
    assert_eq!(p1.digest(), p2.digest());
    assert_eq!(r1.start_digest, start);
    assert_eq!(r1.train_loss.len(), 9);
    // best checkpoint is the lowest validation point
    let min = r1.points.iter().map(|p| p.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(r1.best.val_loss, min);
    assert_eq!(p1.digest(), r1.best.digest);

    let mut seeded = short_phase(3);
    seeded.seed = 12;
    let d3 = tempfile::tempdir().unwrap();
    let (r3, _) = run_phase(&seeded, init, &data, d3.path()).unwrap();
    assert_ne!(r3.train_loss, r1.train_loss);
}

#[test]
fn lora_separates_the_bundled_classes() {
    let path = toy_dir().join("classify.jsonl");
    let texts: Vec<String> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["text"].as_str().unwrap().to_string())
        .collect();
    let vocab = BpeVocab::train(&texts, 300).unwrap();
    let (data, classes) = load_labeled(&path, &vocab, 64).unwrap();
    assert_eq!(data.len(), 100);
    assert_eq!(classes, 2);

    let base: ModelParams<f32> = ModelParams::init(&ModelConfig::toy(vocab.vocab_size()), 3).unwrap();
    let digest = base.digest();
    let (adapter, m) = lora_finetune(&base, &LoraSpec::default(), &data, classes, &LoraTrainConfig::default()).unwrap();
    assert_eq!(m.steps, 200);
    assert!(m.train_accuracy >= 0.95, "accuracy {}", m.train_accuracy);
    assert_eq!(m.base_digest_before, digest);
    assert_eq!(m.base_digest_after, digest);
    assert_eq!(base.digest(), digest);
    assert_eq!(adapter.targets, vec!["layers.0.attn.wq", "layers.0.attn.wv", "layers.1.attn.wq", "layers.1.attn.wv"]);
    let correct = data.iter().filter(|d| adapter.predict(&base, &d.tokens).unwrap() == d.label).count();
    assert_eq!(correct as f64 / 100.0, m.train_accuracy);
}

#[test]
fn lora_rejects_bad_inputs() {
    let base: ModelParams<f32> = ModelParams::init(&ModelConfig::toy(40), 3).unwrap();
    let cfg = LoraTrainConfig::default();
    assert!(lora_finetune(&base, &LoraSpec::default(), &[], 2, &cfg).is_err());
    let bad = [LabeledText { tokens: vec![1, 9, 2], label: 2 }];
    assert!(lora_finetune(&base, &LoraSpec::default(), &bad, 2, &cfg).is_err());
    let spec = LoraSpec { targets: vec!["final_norm".into()], ..Default::default() };
    let ok = [LabeledText { tokens: vec![1, 9, 2], label: 0 }];
    assert!(lora_finetune(&base, &spec, &ok, 2, &cfg).is_err());
    let spec = LoraSpec { rank: 0, ..Default::default() };
    assert!(lora_finetune(&base, &spec, &ok, 2, &cfg).is_err());
}
