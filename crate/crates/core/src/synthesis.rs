//! Caption generation for unlabeled images and the synthetic corpus built
//! from it.
//!
//! Each sampling step applies temperature, softmax, top-k, then nucleus
//! (top-p) on the renormalized top-k survivors, and renormalizes again.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_ppm, Document, Provenance, SkipReport, TextCorpus};
use crate::error::{Error, Result};
use crate::model::{encode_grouped, IncrementalDecoder, ModelParams};
use crate::tensor::Tensor;
use crate::tokenizer::{BpeVocab, TokenSequence, BOS, EOS, IMG, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    /// EOS is suppressed until this many tokens (EOS included) could be
    /// produced.
    pub min_len: usize,
    pub max_len_low: usize,
    pub max_len_high: usize,
    pub hard_cap: usize,
    /// When false, every caption runs to `hard_cap` or EOS.
    pub length_draw: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_k: 50,
            top_p: 0.95,
            min_len: 1,
            max_len_low: 32,
            max_len_high: 64,
            hard_cap: 256,
            length_draw: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let fail = |m: &str| Err(Error::config(format!("sampler: {m}")));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be positive");
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return fail("top_k must lie in 1..=vocab_size");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return fail("top_p must lie in (0, 1]");
        }
        if self.min_len == 0 || self.min_len > self.max_len_low {
            return fail("need 1 <= min_len <= max_len_low");
        }
        if self.max_len_low > self.max_len_high || self.max_len_high > self.hard_cap {
            return fail("need max_len_low <= max_len_high <= hard_cap");
        }
        Ok(())
    }
}

/// Temperature, softmax, top-k and nucleus filtering of one logit row.
///
/// Top-k ties at the boundary keep the lower token id. Every removed token
/// has probability exactly 0 and the survivors sum to 1.
pub fn filter_logits(logits: &[f64], cfg: &SamplerConfig) -> Vec<f64> {
    let n = logits.len();
    let mut probs: Vec<f64> = logits.iter().map(|&z| z / cfg.temperature).collect();
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for p in &mut probs {
        *p = (*p - max).exp();
        total += *p;
    }
    for p in &mut probs {
        *p /= total;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k.clamp(1, n.max(1)));
    let kept_mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut cum = 0.0;
    let mut keep = order.len();
    for (j, &i) in order.iter().enumerate() {
        cum += probs[i] / kept_mass;
        if cum >= cfg.top_p {
            keep = j + 1;
            break;
        }
    }
    order.truncate(keep);
    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; n];
    for &i in &order {
        out[i] = probs[i] / mass;
    }
    out
}

/// Inverse-CDF draw.
pub fn sample_token<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> Result<u32> {
    let total: f64 = dist.iter().sum();
    if dist.is_empty() || dist.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("not a probability distribution (sum {total})")));
    }
    let u: f64 = rng.gen::<f64>() * total;
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return Ok(i as u32);
            }
        }
    }
    Ok(last as u32)
}

/// Seed for item `index` of a run seeded with `seed` (SplitMix64 mixing).
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    mix(seed ^ mix(index))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    /// Generated ids, excluding BOS; ends with EOS when the model stopped.
    pub tokens: TokenSequence,
    pub text: String,
    /// The drawn length bound `L` (already capped).
    pub target_len: usize,
}

/// Samples a caption conditioned on `[f(i); BOS]`. Stops at EOS, at the
/// drawn length, or at the hard cap.
pub fn generate_caption<R: Rng + ?Sized>(
    params: &ModelParams<f32>,
    grouped: &Tensor<f32>,
    vocab: &BpeVocab,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Caption> {
    let mc = params.config();
    cfg.validate(mc.vocab_size)?;
    let drawn = if cfg.length_draw {
        rng.gen_range(cfg.max_len_low..=cfg.max_len_high)
    } else {
        cfg.hard_cap
    };
    let room = mc.max_seq_len - mc.n_image_slots();
    let target_len = drawn.min(cfg.hard_cap).min(room);
    let mut dec = IncrementalDecoder::new(params);
    dec.push_image(grouped)?;
    let mut logits = dec.push_token(BOS)?;
    let mut tokens = Vec::with_capacity(target_len);
    while tokens.len() < target_len {
        let mut row: Vec<f64> = logits.iter().map(|&z| z as f64).collect();
        for banned in [PAD, BOS, IMG] {
            row[banned as usize] = f64::NEG_INFINITY;
        }
        if tokens.len() + 1 < cfg.min_len {
            row[EOS as usize] = f64::NEG_INFINITY;
        }
        let tok = sample_token(&filter_logits(&row, cfg), rng)?;
        tokens.push(tok);
        if tok == EOS || tokens.len() == target_len {
            break;
        }
        logits = dec.push_token(tok)?;
    }
    let text = vocab.decode(&tokens)?;
    Ok(Caption {
        tokens,
        text,
        target_len,
    })
}

/// One caption per decodable image, keyed by manifest index. Image `i`
/// samples from `child_seed(seed, i)`, so the result does not depend on
/// processing order.
pub fn synthesize_captions(
    params: &ModelParams<f32>,
    images: &[PathBuf],
    vocab: &BpeVocab,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<(Vec<(usize, Caption)>, SkipReport)> {
    if images.is_empty() {
        return Err(Error::config("image manifest is empty"));
    }
    cfg.validate(params.config().vocab_size)?;
    let side = params.config().image_side;
    let mut captions = Vec::with_capacity(images.len());
    let mut skips = SkipReport::default();
    for (i, path) in images.iter().enumerate() {
        let image = match load_ppm(path, side) {
            Ok(img) => img,
            Err(e) => {
                skips.skip(i + 1, &path.display().to_string(), e.to_string());
                continue;
            }
        };
        let grouped = encode_grouped(params, &image)?;
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, i as u64));
        captions.push((i, generate_caption(params, &grouped, vocab, cfg, &mut rng)?));
    }
    Ok((captions, skips))
}

/// Synthetic corpus with a metadata header recording the sampler, seed and
/// model digest.
pub fn captions_to_corpus(
    captions: &[(usize, Caption)],
    skips: &SkipReport,
    model_digest: &str,
    n_images: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> TextCorpus {
    let documents = captions
        .iter()
        .map(|(i, c)| Document {
            id: format!("synth-{i:06}"),
            text: c.text.clone(),
            provenance: Provenance::Synthetic,
        })
        .collect();
    let mut corpus = TextCorpus {
        documents,
        meta: None,
    };
    let tokens_total: usize = captions.iter().map(|(_, c)| c.tokens.len()).sum();
    corpus.meta = Some(serde_json::json!({
        "provenance": "synthetic",
        "model_digest": model_digest,
        "sampler": cfg,
        "seed": seed,
        "images": n_images,
        "skipped": skips.skipped,
        "generated_tokens": tokens_total,
        "words": corpus.word_count(),
    }));
    corpus
}

pub fn synthesize_corpus(
    params: &ModelParams<f32>,
    images: &[PathBuf],
    vocab: &BpeVocab,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<(TextCorpus, SkipReport)> {
    let (captions, skips) = synthesize_captions(params, images, vocab, cfg, seed)?;
    let corpus = captions_to_corpus(&captions, &skips, &params.digest(), images.len(), cfg, seed);
    Ok((corpus, skips))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(t: f64, k: usize, p: f64) -> SamplerConfig {
        SamplerConfig {
            temperature: t,
            top_k: k,
            top_p: p,
            ..Default::default()
        }
    }

    #[test]
    fn top_one_is_argmax() {
        let d = filter_logits(&[0.1, 3.0, -2.0, 2.9], &cfg(0.7, 1, 0.5));
        assert_eq!(d, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_settings_are_softmax() {
        let z = [0.3, -1.0, 2.0, 0.0, 0.5];
        let d = filter_logits(&z, &cfg(1.0, 5, 1.0));
        let total: f64 = z.iter().map(|v: &f64| v.exp()).sum();
        for (p, v) in d.iter().zip(z) {
            assert!((p - v.exp() / total).abs() < 1e-15);
        }
    }

    #[test]
    fn boundary_ties_keep_lower_id() {
        let d = filter_logits(&[1.0, 2.0, 2.0, 2.0], &cfg(1.0, 2, 1.0));
        assert_eq!(d, vec![0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn sampling_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_token(&[0.0, 0.0, 1.0], &mut rng).unwrap(), 2);
        }
        assert!(sample_token(&[0.5, 0.2], &mut rng).is_err());
        assert!(sample_token(&[1.5, -0.5], &mut rng).is_err());
        let a: Vec<u32> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..50).map(|_| sample_token(&[0.2, 0.3, 0.5], &mut r).unwrap()).collect()
        };
        let mut r = ChaCha8Rng::seed_from_u64(9);
        assert!(a.iter().all(|&t| sample_token(&[0.2, 0.3, 0.5], &mut r).unwrap() == t));
    }

    #[test]
    fn sampler_validation() {
        assert!(SamplerConfig::default().validate(16_000).is_ok());
        assert!(SamplerConfig::default().validate(20).is_err());
        assert!(cfg(0.0, 5, 0.9).validate(100).is_err());
        assert!(cfg(1.0, 5, 0.0).validate(100).is_err());
        let mut c = SamplerConfig::default();
        c.max_len_high = 300;
        assert!(c.validate(1000).is_err());
    }

    #[test]
    fn child_seeds_differ() {
        assert_ne!(child_seed(1, 0), child_seed(1, 1));
        assert_ne!(child_seed(1, 0), child_seed(2, 0));
        assert_eq!(child_seed(5, 7), child_seed(5, 7));
    }
}
