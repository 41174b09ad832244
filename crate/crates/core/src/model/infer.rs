//! Incremental decoding with a key/value cache, outside the tape.

use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{Real, Tensor};

/// Feeds one position at a time, caching rotated keys and values per layer.
pub struct IncrementalDecoder<'p, T: Real = f32> {
    params: &'p ModelParams<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

fn mat_row<T: Real>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let mut y = vec![T::zero(); w.shape()[1]];
    kernels::vec_mat_acc(x, w.data(), w.shape()[1], &mut y);
    y
}

impl<'p, T: Real> IncrementalDecoder<'p, T> {
    pub fn new(params: &'p ModelParams<T>) -> Self {
        let layers = params.config().n_layers;
        Self {
            params,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        }
    }

    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Projects grouped image features and feeds every slot; returns the
    /// logits after the last slot.
    pub fn push_image(&mut self, grouped: &Tensor<T>) -> Result<Vec<T>> {
        let projected = super::decoder::project(self.params, grouped)?;
        let mut last = Vec::new();
        for r in 0..projected.rows() {
            last = self.push_embedding(projected.row(r))?;
        }
        Ok(last)
    }

    pub fn push_token(&mut self, token: u32) -> Result<Vec<T>> {
        let cfg = self.params.config();
        if token as usize >= cfg.vocab_size {
            return Err(Error::UnknownToken(token));
        }
        let d = cfg.hidden_dim;
        let emb = self.params.get("tok_emb")?;
        let row = emb.data()[token as usize * d..(token as usize + 1) * d].to_vec();
        self.push_embedding(&row)
    }

    /// Feeds one `hidden_dim` input row and returns next-token logits.
    pub fn push_embedding(&mut self, input: &[T]) -> Result<Vec<T>> {
        let p = self.params;
        let cfg = p.config();
        let d = cfg.hidden_dim;
        if input.len() != d {
            return Err(Error::shape("push_embedding", &[input.len()], &[d]));
        }
        if self.len >= cfg.max_seq_len {
            return Err(Error::Length {
                len: self.len + 1,
                max: cfg.max_seq_len,
            });
        }
        let pos = self.len;
        let heads = cfg.n_heads;
        let hd = cfg.head_dim();
        let eps = T::lit(cfg.norm_eps);
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut x = input.to_vec();
        for i in 0..cfg.n_layers {
            let w = |s: &str| p.get(&format!("layers.{i}.{s}"));
            let (h, _) = kernels::rms_norm(&x, w("attn_norm")?.data(), d, eps);
            let mut q = mat_row(&h, w("attn.wq")?);
            let mut k = mat_row(&h, w("attn.wk")?);
            let v = mat_row(&h, w("attn.wv")?);
            kernels::rope(&mut q, &[pos], heads, hd, cfg.rope_base, false);
            kernels::rope(&mut k, &[pos], heads, hd, cfg.rope_base, false);
            self.keys[i].extend_from_slice(&k);
            self.values[i].extend_from_slice(&v);
            let n = pos + 1;
            let mut a = vec![T::zero(); d];
            let mut scores = vec![T::zero(); n];
            for hh in 0..heads {
                let qh = &q[hh * hd..(hh + 1) * hd];
                let mut max = T::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &self.keys[i][j * d + hh * hd..j * d + (hh + 1) * hd];
                    *s = qh.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                    max = max.max(*s);
                }
                let mut total = T::zero();
                for s in &mut scores {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let out = &mut a[hh * hd..(hh + 1) * hd];
                for (j, &s) in scores.iter().enumerate() {
                    let pj = s / total;
                    let vj = &self.values[i][j * d + hh * hd..j * d + (hh + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
            let wo = w("attn.wo")?;
            kernels::vec_mat_acc(&a, wo.data(), d, &mut x);
            let (h, _) = kernels::rms_norm(&x, w("mlp_norm")?.data(), d, eps);
            let gate = mat_row(&h, w("mlp.w_gate")?);
            let up = mat_row(&h, w("mlp.w_up")?);
            let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| kernels::silu(g) * u).collect();
            kernels::vec_mat_acc(&act, w("mlp.w_down")?.data(), d, &mut x);
        }
        self.len += 1;
        let (h, _) = kernels::rms_norm(&x, p.get("final_norm")?.data(), d, eps);
        if cfg.tie_embeddings {
            let emb = p.get("tok_emb")?;
            Ok((0..cfg.vocab_size)
                .map(|t| h.iter().zip(emb.row(t)).map(|(&a, &b)| a * b).sum())
                .collect())
        } else {
            Ok(mat_row(&h, p.get("lm_head")?))
        }
    }
}
