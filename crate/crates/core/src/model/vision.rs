//! Frozen patch-transformer vision encoder and 4-to-1 token grouping.
//!
//! The encoder is a linear patch embedding plus learned-position table
//! followed by pre-norm transformer blocks (bidirectional attention, GELU
//! MLP) and a final RMSNorm. It never participates in autodiff.

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, AttnShape};
use crate::tensor::{Real, Tensor};

fn linear<T: Real>(x: &[T], rows: usize, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut y = kernels::matmul(x, w.data(), rows, k, n);
    if let Some(b) = b {
        for row in y.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    y
}

/// Cuts an image into row-major `patch × patch × 3` vectors.
pub fn patchify<T: Real>(cfg: &ModelConfig, image: &Image) -> Result<Vec<T>> {
    if image.side() != cfg.image_side {
        return Err(Error::shape(
            "encode_image",
            &[image.side(), image.side(), 3],
            &[cfg.image_side, cfg.image_side, 3],
        ));
    }
    let p = cfg.patch_size;
    let g = cfg.patches_per_side();
    let mut out = Vec::with_capacity(g * g * cfg.patch_dim());
    for py in 0..g {
        for px in 0..g {
            for dy in 0..p {
                for dx in 0..p {
                    for c in image.pixel(py * p + dy, px * p + dx) {
                        out.push(T::lit(c as f64));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Raw `[n_vision_tokens × vision_dim]` features for one image.
pub fn encode_image<T: Real>(params: &ModelParams<T>, image: &Image) -> Result<Tensor<T>> {
    let cfg = params.config();
    let n = cfg.n_vision_tokens();
    let vd = cfg.vision_dim;
    let eps = T::lit(cfg.norm_eps);
    let patches = patchify(cfg, image)?;
    let mut x = linear(&patches, n, params.get("vision.patch.w")?, Some(params.get("vision.patch.b")?));
    for (v, &p) in x.iter_mut().zip(params.get("vision.pos")?.data()) {
        *v += p;
    }
    let shape = AttnShape {
        batch: 1,
        seq: n,
        heads: cfg.vision_heads,
        head_dim: vd / cfg.vision_heads,
        causal: false,
    };
    for i in 0..cfg.vision_layers {
        let p = |s: &str| params.get(&format!("vision.blocks.{i}.{s}"));
        let (h, _) = kernels::rms_norm(&x, p("norm1")?.data(), vd, eps);
        let q = linear(&h, n, p("attn.wq")?, None);
        let k = linear(&h, n, p("attn.wk")?, None);
        let v = linear(&h, n, p("attn.wv")?, None);
        let (a, _) = kernels::attention_forward(&q, &k, &v, shape);
        let o = linear(&a, n, p("attn.wo")?, None);
        for (xv, ov) in x.iter_mut().zip(o) {
            *xv += ov;
        }
        let (h, _) = kernels::rms_norm(&x, p("norm2")?.data(), vd, eps);
        let mut m = linear(&h, n, p("mlp.w1")?, Some(p("mlp.b1")?));
        for v in &mut m {
            *v = kernels::gelu(*v);
        }
        let o = linear(&m, n, p("mlp.w2")?, Some(p("mlp.b2")?));
        for (xv, ov) in x.iter_mut().zip(o) {
            *xv += ov;
        }
    }
    let (y, _) = kernels::rms_norm(&x, params.get("vision.norm")?.data(), vd, eps);
    Tensor::new([n, vd], y)
}

/// Concatenates every `factor` consecutive tokens:
/// `grouped[j] = raw[f·j] ‖ … ‖ raw[f·j + f − 1]`.
///
/// In row-major storage this is a pure reshape.
pub fn group_tokens<T: Real>(raw: &Tensor<T>, expected_tokens: usize, factor: usize) -> Result<Tensor<T>> {
    let [n, d] = raw.shape()[..] else {
        return Err(Error::shape("group_tokens", raw.shape(), &[expected_tokens, 0]));
    };
    if n != expected_tokens || factor == 0 || n % factor != 0 {
        return Err(Error::shape("group_tokens", raw.shape(), &[expected_tokens, d]));
    }
    raw.clone().reshape([n / factor, d * factor])
}

/// Encoder output grouped for the projection: `[n_image_slots × grouped_dim]`.
pub fn encode_grouped<T: Real>(params: &ModelParams<T>, image: &Image) -> Result<Tensor<T>> {
    let cfg = params.config();
    group_tokens(&encode_image(params, image)?, cfg.n_vision_tokens(), cfg.group_factor)
}
