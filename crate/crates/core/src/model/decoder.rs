//! Decoder and projection forward passes on the autodiff tape.

use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::params::{is_frozen, ModelParams};
use super::vision::encode_grouped;
use crate::data::{Batch, Image};
use crate::error::{Error, Result};
use crate::tensor::{attention, AttnShape, Real, Tape, Tensor, Var};

/// Low-rank update `(scale)·B·A` added to one linear layer. `a` is
/// `[r × d_in]`, `b` is `[d_out × r]`.
#[derive(Clone, Copy)]
pub struct LowRank<'t, T: Real> {
    pub a: Var<'t, T>,
    pub b: Var<'t, T>,
    pub scale: T,
}

/// Decoder and projection parameters placed on a tape.
///
/// The vision encoder is never bound; its features enter as constants.
pub struct Bound<'t, T: Real> {
    cfg: ModelConfig,
    tape: &'t Tape<T>,
    vars: BTreeMap<String, Var<'t, T>>,
    adapters: BTreeMap<String, LowRank<'t, T>>,
}

/// Names a LoRA adapter may target.
pub fn is_linear_weight(name: &str) -> bool {
    name.starts_with("layers.")
        && [".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo", ".mlp.w_gate", ".mlp.w_up", ".mlp.w_down"]
            .iter()
            .any(|s| name.ends_with(s))
}

impl<'t, T: Real> Bound<'t, T> {
    /// Binds every non-vision tensor; those for which `trainable` holds
    /// require gradients, the rest are constants.
    pub fn new(tape: &'t Tape<T>, params: &ModelParams<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .filter(|(n, _)| !is_frozen(n))
            .map(|(n, t)| (n.to_string(), tape.leaf(t.clone(), trainable(n))))
            .collect();
        Self {
            cfg: params.config().clone(),
            tape,
            vars,
            adapters: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("no bound parameter `{name}`")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn attach_adapter(&mut self, target: &str, adapter: LowRank<'t, T>) -> Result<()> {
        if !is_linear_weight(target) || !self.vars.contains_key(target) {
            return Err(Error::config(format!("`{target}` is not an adaptable linear layer")));
        }
        let w = self.vars[target].shape();
        let (a, b) = (adapter.a.shape(), adapter.b.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != w[0] || b[0] != w[1] || a[0] != b[1] {
            return Err(Error::shape("lora", &w, &[a, b].concat()));
        }
        self.adapters.insert(target.to_string(), adapter);
        Ok(())
    }

    fn linear(&self, x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        let y = x.matmul(self.var(name)?)?;
        match self.adapters.get(name) {
            None => Ok(y),
            Some(lr) => {
                let delta = x.matmul(lr.a.transpose()?)?.matmul(lr.b.transpose()?)?;
                y.add(delta.scale(lr.scale)?)
            }
        }
    }

    /// Token embeddings, one row per id.
    pub fn embed(&self, tokens: &[u32]) -> Result<Var<'t, T>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::UnknownToken(bad));
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        self.var("tok_emb")?.gather_rows(&idx)
    }

    /// Projection MLP `linear → gelu → linear` on `[rows × grouped_dim]`.
    pub fn project(&self, grouped: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = grouped
            .matmul(self.var("proj.w1")?)?
            .add_row(self.var("proj.b1")?)?
            .gelu()?;
        h.matmul(self.var("proj.w2")?)?.add_row(self.var("proj.b2")?)
    }

    /// Runs the decoder blocks on `[batch·seq × d]` inputs and returns the
    /// residual stream before the final norm.
    pub fn blocks(&self, x: Var<'t, T>, batch: usize, seq: usize) -> Result<Var<'t, T>> {
        let cfg = &self.cfg;
        if seq > cfg.max_seq_len {
            return Err(Error::Length {
                len: seq,
                max: cfg.max_seq_len,
            });
        }
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let shape = AttnShape {
            batch,
            seq,
            heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
            causal: true,
        };
        let mut x = x;
        for i in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            let h = x.rms_norm(self.var(&p("attn_norm"))?, cfg.norm_eps)?;
            let q = self.linear(h, &p("attn.wq"))?.rope(cfg.n_heads, &positions, cfg.rope_base)?;
            let k = self.linear(h, &p("attn.wk"))?.rope(cfg.n_heads, &positions, cfg.rope_base)?;
            let v = self.linear(h, &p("attn.wv"))?;
            let a = attention(q, k, v, shape)?;
            x = x.add(self.linear(a, &p("attn.wo"))?)?;
            let h = x.rms_norm(self.var(&p("mlp_norm"))?, cfg.norm_eps)?;
            let gate = self.linear(h, &p("mlp.w_gate"))?.silu()?;
            let up = self.linear(h, &p("mlp.w_up"))?;
            x = x.add(self.linear(gate.mul(up)?, &p("mlp.w_down"))?)?;
        }
        Ok(x)
    }

    /// Final norm only.
    pub fn normed(&self, h: Var<'t, T>) -> Result<Var<'t, T>> {
        h.rms_norm(self.var("final_norm")?, self.cfg.norm_eps)
    }

    /// Final norm and output head.
    pub fn head(&self, h: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.normed(h)?;
        if self.cfg.tie_embeddings {
            h.matmul(self.var("tok_emb")?.transpose()?)
        } else {
            h.matmul(self.var("lm_head")?)
        }
    }

    /// Residual stream at the text positions of a right-padded batch,
    /// `[rows·width × d]`. With `images`, each row is preceded by its
    /// projected image block.
    pub fn text_states(&self, batch: &Batch, images: Option<&[&Tensor<T>]>) -> Result<Var<'t, T>> {
        let text = self.embed(&batch.tokens)?;
        let Some(images) = images else {
            return self.blocks(text, batch.rows, batch.width);
        };
        if images.len() != batch.rows {
            return Err(Error::shape("image block", &[images.len()], &[batch.rows]));
        }
        let n = self.cfg.n_image_slots();
        let g = self.cfg.grouped_dim();
        let mut feats = Vec::with_capacity(batch.rows * n * g);
        for t in images {
            if t.shape() != [n, g] {
                return Err(Error::shape("image block", t.shape(), &[n, g]));
            }
            feats.extend_from_slice(t.data());
        }
        let grouped = self.tape.constant(Tensor::new([batch.rows * n, g], feats)?);
        let slots = self.project(grouped)?;
        let seq = n + batch.width;
        if seq > self.cfg.max_seq_len {
            return Err(Error::Length {
                len: seq,
                max: self.cfg.max_seq_len,
            });
        }
        let text_base = batch.rows * n;
        let order: Vec<usize> = (0..batch.rows)
            .flat_map(|b| (b * n..(b + 1) * n).chain(text_base + b * batch.width..text_base + (b + 1) * batch.width))
            .collect();
        let x = self.tape.concat_rows(&[slots, text])?.gather_rows(&order)?;
        let h = self.blocks(x, batch.rows, seq)?;
        let pick: Vec<usize> = (0..batch.rows)
            .flat_map(|b| b * seq + n..(b + 1) * seq)
            .collect();
        h.gather_rows(&pick)
    }

    /// Logits at every text position, `[rows·width × V]`.
    pub fn batch_logits(&self, batch: &Batch, images: Option<&[&Tensor<T>]>) -> Result<Var<'t, T>> {
        self.head(self.text_states(batch, images)?)
    }

    /// Mean next-token cross-entropy over the batch's predicted tokens.
    pub fn batch_loss(&self, batch: &Batch, images: Option<&[&Tensor<T>]>) -> Result<Var<'t, T>> {
        let (targets, mask) = batch.targets_and_mask();
        self.batch_logits(batch, images)?.cross_entropy_masked(&targets, &mask)
    }
}

fn single(tokens: &[u32]) -> Result<Batch> {
    if tokens.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    Batch::from_examples(
        &[crate::data::Example {
            tokens: tokens.to_vec(),
            image: None,
        }],
        &[0],
    )
}

/// Text-only logits `[len × V]`.
pub fn forward_lm<T: Real>(params: &ModelParams<T>, tokens: &[u32]) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, |_| false);
    Ok(bound.batch_logits(&single(tokens)?, None)?.value())
}

/// Projection of grouped image features to `[n_image_slots × hidden_dim]`.
pub fn project<T: Real>(params: &ModelParams<T>, grouped: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, |_| false);
    Ok(bound.project(tape.constant(grouped.clone()))?.value())
}

/// Logits at the text positions of `[image block; tokens]`, from grouped
/// features.
pub fn forward_multimodal_features<T: Real>(
    params: &ModelParams<T>,
    grouped: &Tensor<T>,
    tokens: &[u32],
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, |_| false);
    Ok(bound.batch_logits(&single(tokens)?, Some(&[grouped]))?.value())
}

/// Logits at the text positions of `[f(image); tokens]`, `[len × V]`.
pub fn forward_multimodal<T: Real>(params: &ModelParams<T>, image: &Image, tokens: &[u32]) -> Result<Tensor<T>> {
    let grouped = encode_grouped(params, image)?;
    forward_multimodal_features(params, &grouped, tokens)
}
