use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters for the decoder, the frozen vision encoder
/// and the projection between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub vision_dim: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub vision_mlp_dim: usize,
    /// Consecutive vision tokens concatenated into one projection input.
    pub group_factor: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_eps() -> f64 {
    1e-5
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_init_std() -> f64 {
    0.02
}

/// Seed of the frozen vision encoder; the encoder is identical across every
/// model instance with the same vision dimensions.
pub const VISION_SEED: u64 = 0x5EED;

impl ModelConfig {
    /// Full-size architecture: 16 layers, width 512, gated MLP 1024, 8 heads,
    /// 16k vocab, 128-pixel images in 8-pixel patches (256 vision tokens)
    /// grouped 4-to-1. Vision width follows a ViT-L encoder.
    pub fn paper() -> Self {
        Self {
            n_layers: 16,
            hidden_dim: 512,
            intermediate_dim: 1024,
            n_heads: 8,
            vocab_size: 16_000,
            max_seq_len: 576,
            patch_size: 8,
            image_side: 128,
            vision_dim: 1024,
            vision_layers: 24,
            vision_heads: 16,
            vision_mlp_dim: 4096,
            group_factor: 4,
            tie_embeddings: false,
            norm_eps: default_eps(),
            rope_base: default_rope_base(),
            init_std: default_init_std(),
        }
    }

    /// CPU-sized architecture used by default.
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            hidden_dim: 64,
            intermediate_dim: 128,
            n_heads: 4,
            vocab_size: 512,
            max_seq_len: 320,
            patch_size: 8,
            image_side: 128,
            vision_dim: 64,
            vision_layers: 4,
            vision_heads: 4,
            vision_mlp_dim: 128,
            group_factor: 4,
            tie_embeddings: false,
            norm_eps: default_eps(),
            rope_base: default_rope_base(),
            init_std: default_init_std(),
        }
    }

    /// Very small architecture for tests and gradient checks. Keeps the
    /// 256-token / 64-group image interface with 32-pixel images.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            hidden_dim: 16,
            intermediate_dim: 32,
            n_heads: 2,
            vocab_size,
            max_seq_len: 160,
            patch_size: 2,
            image_side: 32,
            vision_dim: 8,
            vision_layers: 1,
            vision_heads: 2,
            vision_mlp_dim: 16,
            group_factor: 4,
            tie_embeddings: false,
            norm_eps: default_eps(),
            rope_base: default_rope_base(),
            init_std: 0.1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    /// Raw vision tokens per image.
    pub fn n_vision_tokens(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Image slots in the decoder sequence after grouping.
    pub fn n_image_slots(&self) -> usize {
        self.n_vision_tokens() / self.group_factor
    }

    pub fn grouped_dim(&self) -> usize {
        self.vision_dim * self.group_factor
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!("rotary head dim {} is odd", self.head_dim()));
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.patch_size == 0 || !self.image_side.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_side {} not a multiple of patch_size {}",
                self.image_side, self.patch_size
            ));
        }
        if self.group_factor == 0 || !self.n_vision_tokens().is_multiple_of(self.group_factor) {
            return fail(format!(
                "{} vision tokens do not split into groups of {}",
                self.n_vision_tokens(),
                self.group_factor
            ));
        }
        if self.vision_heads == 0 || !self.vision_dim.is_multiple_of(self.vision_heads) {
            return fail("vision_dim not divisible by vision_heads".into());
        }
        if self.max_seq_len <= self.n_image_slots() + 1 {
            return fail(format!(
                "max_seq_len {} leaves no room for text after {} image slots",
                self.max_seq_len,
                self.n_image_slots()
            ));
        }
        if self.norm_eps <= 0.0 {
            return fail("norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// Closed-form parameter counts, split by role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParameterCount {
    /// Language model (embedding, blocks, final norm, output head).
    pub decoder: usize,
    pub projection: usize,
    /// Frozen vision encoder.
    pub vision: usize,
}

impl ParameterCount {
    pub fn total(&self) -> usize {
        self.decoder + self.projection + self.vision
    }

    pub fn trainable(&self) -> usize {
        self.decoder + self.projection
    }
}

/// Counts parameters without materializing them.
///
/// `decoder` is the language-model size: embedding `V·d`, per layer four
/// `d×d` attention matrices, three `d×d_ff` gated-MLP matrices and two norm
/// gains, then a final norm and (unless tied) a `d×V` output head.
pub fn count_parameters(cfg: &ModelConfig) -> ParameterCount {
    let d = cfg.hidden_dim;
    let v = cfg.vocab_size;
    let per_layer = 4 * d * d + 3 * d * cfg.intermediate_dim + 2 * d;
    let head = if cfg.tie_embeddings { 0 } else { d * v };
    let decoder = v * d + cfg.n_layers * per_layer + d + head;

    let g = cfg.grouped_dim();
    let projection = g * d + d + d * d + d;

    let vd = cfg.vision_dim;
    let vm = cfg.vision_mlp_dim;
    let per_block = 2 * vd + 4 * vd * vd + vd * vm + vm + vm * vd + vd;
    let vision = cfg.patch_dim() * vd + vd + cfg.n_vision_tokens() * vd + cfg.vision_layers * per_block + vd;

    ParameterCount {
        decoder,
        projection,
        vision,
    }
}
