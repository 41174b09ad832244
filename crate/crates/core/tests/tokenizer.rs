use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfsynth::tokenizer::{BpeVocab, BASE_VOCAB, BYTE_OFFSET, NUM_SPECIALS};

fn corpus() -> Vec<String> {
    vec![
        "the quick brown fox jumps over the lazy dog".into(),
        "a red circle sits on a blue background\nthe dog runs".into(),
        "naïve café résumé — 東京 and Zürich, déjà vu".into(),
        "numbers 12 345 6789 and tabs\there".into(),
    ]
}

#[test]
fn hand_traced_merge() {
    let v = BpeVocab::train(&["aa aa aa b"], BASE_VOCAB + 1).unwrap();
    let a = b'a' as u32 + BYTE_OFFSET;
    assert_eq!(v.merges(), &[(a, a)]);
    let ids = v.encode("aaaa");
    assert_eq!(ids, vec![BASE_VOCAB as u32, BASE_VOCAB as u32]);
    assert_eq!(v.encode("aaa"), vec![BASE_VOCAB as u32, a]);
}

#[test]
fn encoding_never_emits_specials() {
    let v = BpeVocab::train(&corpus(), 320).unwrap();
    for doc in corpus() {
        assert!(v.encode(&doc).iter().all(|&id| id as usize >= NUM_SPECIALS));
    }
}

#[test]
fn vocab_file_is_bytewise_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bpe"), dir.path().join("b.bpe"));
    BpeVocab::train(&corpus(), 330).unwrap().save(&a).unwrap();
    BpeVocab::train(&corpus(), 330).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let back = BpeVocab::load(&a).unwrap();
    assert_eq!(back, BpeVocab::train(&corpus(), 330).unwrap());
}

#[test]
fn exhausted_corpus_is_a_config_error() {
    let err = BpeVocab::train(&["ab"], BASE_VOCAB + 5).unwrap_err();
    assert!(err.to_string().contains("merges"), "{err}");
}

#[test]
fn round_trip_over_random_unicode() {
    let v = BpeVocab::train(&corpus(), 360).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let len = rng.gen_range(0..40);
        let s: String = (0..len).map(|_| rng.gen::<char>()).collect();
        assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decode_inverts_encode(s in any::<String>()) {
        let v = BpeVocab::train(&corpus(), 300).unwrap();
        prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
    }

    #[test]
    fn vocab_size_is_exact(extra in 1usize..40) {
        let v = BpeVocab::train(&corpus(), BASE_VOCAB + extra).unwrap();
        prop_assert_eq!(v.vocab_size(), BASE_VOCAB + extra);
        prop_assert_eq!(v.merges().len(), extra);
    }
}
