use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, VISION_SEED};
use crate::digest::TensorHasher;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Decoder,
    Projection,
    Vision,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("vision.") {
            ParamGroup::Vision
        } else if name.starts_with("proj.") {
            ParamGroup::Projection
        } else {
            ParamGroup::Decoder
        }
    }
}

/// The vision encoder never receives updates.
pub fn is_frozen(name: &str) -> bool {
    ParamGroup::of(name) == ParamGroup::Vision
}

/// Every parameter name with its shape and initializer, in initialization
/// order: vision encoder, projection, decoder.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));

    let vd = cfg.vision_dim;
    let vm = cfg.vision_mlp_dim;
    let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    add("vision.patch.w".into(), vec![cfg.patch_dim(), vd], fan(cfg.patch_dim()));
    add("vision.patch.b".into(), vec![vd], Init::Zeros);
    add("vision.pos".into(), vec![cfg.n_vision_tokens(), vd], Init::Normal(0.5));
    for i in 0..cfg.vision_layers {
        let p = format!("vision.blocks.{i}");
        add(format!("{p}.norm1"), vec![vd], Init::Ones);
        for m in ["wq", "wk", "wv", "wo"] {
            add(format!("{p}.attn.{m}"), vec![vd, vd], fan(vd));
        }
        add(format!("{p}.norm2"), vec![vd], Init::Ones);
        add(format!("{p}.mlp.w1"), vec![vd, vm], fan(vd));
        add(format!("{p}.mlp.b1"), vec![vm], Init::Zeros);
        add(format!("{p}.mlp.w2"), vec![vm, vd], fan(vm));
        add(format!("{p}.mlp.b2"), vec![vd], Init::Zeros);
    }
    add("vision.norm".into(), vec![vd], Init::Ones);

    let d = cfg.hidden_dim;
    let std = cfg.init_std;
    add("proj.w1".into(), vec![cfg.grouped_dim(), d], Init::Normal(std));
    add("proj.b1".into(), vec![d], Init::Zeros);
    add("proj.w2".into(), vec![d, d], Init::Normal(std));
    add("proj.b2".into(), vec![d], Init::Zeros);

    let resid = std / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
    add("tok_emb".into(), vec![cfg.vocab_size, d], Init::Normal(std));
    for i in 0..cfg.n_layers {
        let p = format!("layers.{i}");
        add(format!("{p}.attn_norm"), vec![d], Init::Ones);
        for m in ["wq", "wk", "wv"] {
            add(format!("{p}.attn.{m}"), vec![d, d], Init::Normal(std));
        }
        add(format!("{p}.attn.wo"), vec![d, d], Init::Normal(resid));
        add(format!("{p}.mlp_norm"), vec![d], Init::Ones);
        add(format!("{p}.mlp.w_gate"), vec![d, cfg.intermediate_dim], Init::Normal(std));
        add(format!("{p}.mlp.w_up"), vec![d, cfg.intermediate_dim], Init::Normal(std));
        add(format!("{p}.mlp.w_down"), vec![cfg.intermediate_dim, d], Init::Normal(resid));
    }
    add("final_norm".into(), vec![d], Init::Ones);
    if !cfg.tie_embeddings {
        add("lm_head".into(), vec![d, cfg.vocab_size], Init::Normal(std));
    }
    out
}

/// Named parameter set: decoder (θ), projection (φ) and the frozen encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Initializes every tensor. The vision encoder always uses
    /// [`VISION_SEED`]; decoder and projection use `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut vision_rng = ChaCha8Rng::seed_from_u64(VISION_SEED);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(config) {
            let rng = if is_frozen(&name) { &mut vision_rng } else { &mut rng };
            let t = match init {
                Init::Normal(std) => Tensor::randn(shape, std, rng),
                Init::Ones => Tensor::full(shape, T::one()),
                Init::Zeros => Tensor::zeros(shape),
            };
            tensors.insert(name, t);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Assembles a parameter set, checking names and shapes against the
    /// config.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != tensors.len() {
            return Err(Error::config(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::config(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("param", t.shape(), shape));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn element_count(&self, group: Option<ParamGroup>) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| group.is_none_or(|g| ParamGroup::of(n) == g))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    /// SHA-256 over the f32 image of the selected tensors in name order.
    pub fn digest_group(&self, group: Option<ParamGroup>) -> String {
        let mut h = TensorHasher::new();
        for (name, t) in &self.tensors {
            if group.is_some_and(|g| ParamGroup::of(name) != g) {
                continue;
            }
            h.update(name, t.shape(), t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
        }
        h.finish()
    }

    /// Digest of every tensor; the lineage identity of a parameter set.
    pub fn digest(&self) -> String {
        self.digest_group(None)
    }

    pub fn vision_digest(&self) -> String {
        self.digest_group(Some(ParamGroup::Vision))
    }

    pub fn projection_digest(&self) -> String {
        self.digest_group(Some(ParamGroup::Projection))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::count_parameters;

    #[test]
    fn closed_form_count_matches_materialized_tensors() {
        for cfg in [ModelConfig::toy(300), ModelConfig::desk(), {
            let mut c = ModelConfig::toy(290);
            c.tie_embeddings = true;
            c.n_layers = 3;
            c
        }] {
            let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
            let n = count_parameters(&cfg);
            assert_eq!(n.decoder, p.element_count(Some(ParamGroup::Decoder)));
            assert_eq!(n.projection, p.element_count(Some(ParamGroup::Projection)));
            assert_eq!(n.vision, p.element_count(Some(ParamGroup::Vision)));
            assert_eq!(n.total(), p.element_count(None));
        }
    }

    #[test]
    fn vision_weights_do_not_depend_on_model_seed() {
        let cfg = ModelConfig::toy(300);
        let a = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 2).unwrap();
        assert_eq!(a.vision_digest(), b.vision_digest());
        assert_ne!(a.digest(), b.digest());
        assert!(a.names().filter(|n| is_frozen(n)).all(|n| n.starts_with("vision.")));
    }

    #[test]
    fn from_tensors_checks_layout() {
        let cfg = ModelConfig::toy(300);
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let mut t = p.clone().into_tensors();
        assert!(ModelParams::from_tensors(cfg.clone(), t.clone()).is_ok());
        t.insert("tok_emb".into(), Tensor::zeros([3, 3]));
        assert!(ModelParams::from_tensors(cfg, t).is_err());
    }
}
