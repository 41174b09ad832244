//! Low-rank adapters with a linear classification head on a frozen base.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step_map, clip_grad_norm, AdamWConfig, OptimState};
use crate::data::{frame, make_batches, Batch, Example};
use crate::error::{Error, Result};
use crate::model::{is_linear_weight, Bound, LowRank, ModelParams};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::tokenizer::BpeVocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    /// Full parameter names; empty means every layer's query and value
    /// projections.
    pub targets: Vec<String>,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: Vec::new(),
        }
    }
}

impl LoraSpec {
    pub fn resolved_targets<T: Real>(&self, base: &ModelParams<T>) -> Result<Vec<String>> {
        if self.rank == 0 {
            return Err(Error::config("LoRA rank must be at least 1"));
        }
        if self.targets.is_empty() {
            return Ok((0..base.config().n_layers)
                .flat_map(|i| [format!("layers.{i}.attn.wq"), format!("layers.{i}.attn.wv")])
                .collect());
        }
        for t in &self.targets {
            if !is_linear_weight(t) || base.get(t).is_err() {
                return Err(Error::config(format!("unknown LoRA target `{t}`")));
            }
        }
        Ok(self.targets.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraTrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for LoraTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-2,
            batch_size: 16,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

/// Trained factors (`lora.<target>.a` is `[r × d_in]`, `lora.<target>.b` is
/// `[d_out × r]`) plus `head.w` `[d × classes]` and `head.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraMetrics {
    pub steps: u64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub base_digest_before: String,
    pub base_digest_after: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledText {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Deserialize)]
struct LabeledRow {
    text: String,
    label: usize,
}

/// Reads `{"text": ..., "label": n}` lines and frames each text as
/// `BOS t… EOS`. Returns the examples and the number of classes.
pub fn load_labeled(path: &Path, vocab: &BpeVocab, max_len: usize) -> Result<(Vec<LabeledText>, usize)> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: LabeledRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(LabeledText {
            tokens: frame(&vocab.encode(&row.text), max_len),
            label: row.label,
        });
    }
    let classes = out.iter().map(|l| l.label + 1).max().unwrap_or(0);
    Ok((out, classes))
}

impl LoraAdapter {
    /// `A` Gaussian with std `1/√d_in`, `B` zero, head small Gaussian.
    pub fn init(base: &ModelParams<f32>, spec: &LoraSpec, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::config("classification needs at least two classes"));
        }
        let targets = spec.resolved_targets(base)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for t in &targets {
            let w = base.get(t)?.shape().to_vec();
            let (d_in, d_out) = (w[0], w[1]);
            tensors.insert(
                format!("lora.{t}.a"),
                Tensor::randn([spec.rank, d_in], 1.0 / (d_in as f64).sqrt(), &mut rng),
            );
            tensors.insert(format!("lora.{t}.b"), Tensor::zeros([d_out, spec.rank]));
        }
        let d = base.config().hidden_dim;
        tensors.insert("head.w".into(), Tensor::randn([d, n_classes], 0.02, &mut rng));
        tensors.insert("head.b".into(), Tensor::zeros([n_classes]));
        Ok(Self {
            rank: spec.rank,
            alpha: spec.alpha,
            targets,
            tensors,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.tensors["head.b"].len()
    }

    fn scale(&self) -> f32 {
        (self.alpha / self.rank as f64) as f32
    }

    /// Binds the base (constant) and adapter (trainable) onto `tape`.
    fn bind<'t>(
        &self,
        tape: &'t Tape<f32>,
        base: &ModelParams<f32>,
    ) -> Result<(Bound<'t, f32>, BTreeMap<String, Var<'t, f32>>)> {
        let mut bound = Bound::new(tape, base, |_| false);
        let vars: BTreeMap<String, Var<'t, f32>> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(t.clone())))
            .collect();
        for t in &self.targets {
            let lr = LowRank {
                a: vars[&format!("lora.{t}.a")],
                b: vars[&format!("lora.{t}.b")],
                scale: self.scale(),
            };
            bound.attach_adapter(t, lr)?;
        }
        Ok((bound, vars))
    }

    /// Language-model logits of the adapted model, `[len × V]`.
    pub fn lm_logits(&self, base: &ModelParams<f32>, tokens: &[u32]) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let (bound, _) = self.bind(&tape, base)?;
        let batch = Batch::from_examples(
            &[Example {
                tokens: tokens.to_vec(),
                image: None,
            }],
            &[0],
        )?;
        Ok(bound.batch_logits(&batch, None)?.value())
    }

    /// Class logits `[rows × classes]` from the final-norm hidden state at
    /// each row's last real token.
    fn class_logits<'t>(
        bound: &Bound<'t, f32>,
        vars: &BTreeMap<String, Var<'t, f32>>,
        batch: &Batch,
    ) -> Result<Var<'t, f32>> {
        let h = bound.normed(bound.text_states(batch, None)?)?;
        let last: Vec<usize> = batch
            .lengths
            .iter()
            .enumerate()
            .map(|(r, &l)| r * batch.width + l.max(1) - 1)
            .collect();
        h.gather_rows(&last)?.matmul(vars["head.w"])?.add_row(vars["head.b"])
    }

    pub fn predict(&self, base: &ModelParams<f32>, tokens: &[u32]) -> Result<usize> {
        let tape = Tape::new();
        let (bound, vars) = self.bind(&tape, base)?;
        let batch = Batch::from_examples(
            &[Example {
                tokens: tokens.to_vec(),
                image: None,
            }],
            &[0],
        )?;
        let logits = Self::class_logits(&bound, &vars, &batch)?.value();
        Ok(argmax(logits.data()))
    }
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Trains only the adapter factors and the head; the base is never touched.
pub fn lora_finetune(
    base: &ModelParams<f32>,
    spec: &LoraSpec,
    data: &[LabeledText],
    n_classes: usize,
    cfg: &LoraTrainConfig,
) -> Result<(LoraAdapter, LoraMetrics)> {
    if data.is_empty() {
        return Err(Error::config("LoRA dataset is empty"));
    }
    if let Some(bad) = data.iter().find(|d| d.label >= n_classes || d.tokens.is_empty()) {
        return Err(Error::config(format!("bad labeled example with label {}", bad.label)));
    }
    let before = base.digest();
    let mut adapter = LoraAdapter::init(base, spec, n_classes, cfg.seed)?;
    let examples: Vec<Example> = data
        .iter()
        .map(|d| Example {
            tokens: d.tokens.clone(),
            image: None,
        })
        .collect();
    let adamw = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = OptimState::default();
    let mut step = 0u64;
    let mut final_loss = f64::NAN;
    let mut epoch = 0;
    while step < cfg.steps {
        for batch in make_batches(&examples, cfg.batch_size, cfg.seed, epoch, true)? {
            if step == cfg.steps {
                break;
            }
            step += 1;
            let labels: Vec<u32> = batch.example_ids.iter().map(|&i| data[i].label as u32).collect();
            let mut grads = BTreeMap::new();
            {
                let tape = Tape::new();
                let (bound, vars) = adapter.bind(&tape, base)?;
                let logits = LoraAdapter::class_logits(&bound, &vars, &batch)?;
                let loss = logits.cross_entropy_masked(&labels, &vec![true; labels.len()])?;
                final_loss = loss.item() as f64;
                let g = tape.backward(loss)?;
                for (n, v) in &vars {
                    grads.insert(n.clone(), g.get_or_zeros(*v));
                }
            }
            clip_grad_norm(&mut grads, 1.0);
            adamw_step_map(&mut adapter.tensors, &grads, &mut state, cfg.lr, &adamw)?;
        }
        epoch += 1;
    }
    let correct = data
        .iter()
        .map(|d| adapter.predict(base, &d.tokens).map(|p| (p == d.label) as usize))
        .sum::<Result<usize>>()?;
    let metrics = LoraMetrics {
        steps: step,
        final_loss,
        train_accuracy: correct as f64 / data.len() as f64,
        base_digest_before: before,
        base_digest_after: base.digest(),
    };
    Ok((adapter, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_lm, ModelConfig};

    #[test]
    fn zero_b_matches_base() {
        let base = ModelParams::init(&ModelConfig::toy(60), 2).unwrap();
        let adapter = LoraAdapter::init(&base, &LoraSpec::default(), 2, 5).unwrap();
        let toks = [1, 20, 30, 40, 2];
        assert_eq!(
            adapter.lm_logits(&base, &toks).unwrap().data(),
            forward_lm(&base, &toks).unwrap().data()
        );
    }

    #[test]
    fn unknown_targets_rejected() {
        let base = ModelParams::<f32>::init(&ModelConfig::toy(60), 2).unwrap();
        for t in ["tok_emb", "layers.7.attn.wq", "proj.w1"] {
            let spec = LoraSpec {
                targets: vec![t.into()],
                ..Default::default()
            };
            assert!(matches!(LoraAdapter::init(&base, &spec, 2, 0), Err(Error::Config(_))));
        }
        let spec = LoraSpec {
            rank: 0,
            ..Default::default()
        };
        assert!(LoraAdapter::init(&base, &spec, 2, 0).is_err());
    }
}
