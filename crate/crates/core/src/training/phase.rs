use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimState};
use super::schedule::{scaled_warmup, Schedule};
use crate::data::{make_batches, Batch, Example};
use crate::error::{Error, Result};
use crate::model::{Bound, Checkpoint, ModelParams, ParamGroup};
use crate::tensor::{Tape, Tensor};

/// Which parameter groups a phase updates and whether rows carry images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    /// Decoder only, text-only batches (phases 1 and 3).
    Text,
    /// Decoder and projection, image-conditioned batches (phases 2 and 4).
    Multimodal,
}

impl PhaseKind {
    pub fn for_phase(phase: u8) -> Result<Self> {
        match phase {
            1 | 3 => Ok(PhaseKind::Text),
            2 | 4 => Ok(PhaseKind::Multimodal),
            _ => Err(Error::config(format!("no phase {phase}"))),
        }
    }

    pub fn trains(self, name: &str) -> bool {
        match ParamGroup::of(name) {
            ParamGroup::Decoder => true,
            ParamGroup::Projection => self == PhaseKind::Multimodal,
            ParamGroup::Vision => false,
        }
    }
}

/// Reference per-phase settings: epochs, peak learning rate, warmup steps.
pub fn reference_schedule(phase: u8) -> Result<(u64, f64, u64)> {
    match phase {
        1 => Ok((15, 1e-4, 5000)),
        2 => Ok((5, 1e-5, 250)),
        3 => Ok((2, 1e-5, 500)),
        4 => Ok((2, 1e-5, 250)),
        _ => Err(Error::config(format!("no phase {phase}"))),
    }
}

pub const REFERENCE_BATCH_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub phase: u8,
    pub epochs: u64,
    pub peak_lr: f64,
    /// Warmup steps; `None` applies [`scaled_warmup`] against the reference
    /// warmup for this phase.
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    pub batch_size: usize,
    #[serde(default = "default_validate_every")]
    pub validate_every: u64,
    /// Stops after this many optimizer steps; the schedule spans the capped
    /// run.
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_validate_every() -> u64 {
    50
}

fn default_clip() -> f64 {
    1.0
}

impl PhaseConfig {
    /// Reference epochs and learning rate with the given batch size; warmup
    /// follows the scaling rule.
    pub fn preset(phase: u8, batch_size: usize) -> Result<Self> {
        let (epochs, peak_lr, _) = reference_schedule(phase)?;
        Ok(Self {
            phase,
            epochs,
            peak_lr,
            warmup_steps: None,
            batch_size,
            validate_every: default_validate_every(),
            max_steps: None,
            clip_norm: default_clip(),
            adamw: AdamWConfig::default(),
            seed: 0,
        })
    }

    pub fn kind(&self) -> Result<PhaseKind> {
        PhaseKind::for_phase(self.phase)
    }

    /// Schedule for `n_train` examples.
    pub fn schedule(&self, n_train: usize) -> Result<Schedule> {
        if self.batch_size == 0 || self.epochs == 0 || self.validate_every == 0 {
            return Err(Error::config("batch_size, epochs and validate_every must be positive"));
        }
        let per_epoch = n_train.div_ceil(self.batch_size) as u64;
        let mut total = per_epoch * self.epochs;
        if let Some(cap) = self.max_steps {
            total = total.min(cap);
        }
        let (_, _, reference) = reference_schedule(self.phase)?;
        let warmup = self.warmup_steps.unwrap_or_else(|| scaled_warmup(total, reference));
        Schedule::new(self.peak_lr, warmup, total)
    }
}

/// Training examples, held-out examples, and grouped encoder features for
/// every image index the examples refer to.
pub struct PhaseData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub images: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: u64,
    pub val_loss: f64,
    pub checkpoint: PathBuf,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: u8,
    pub start_digest: String,
    pub schedule: Schedule,
    pub points: Vec<ValPoint>,
    pub best: ValPoint,
    /// Mean loss of each optimizer step.
    pub train_loss: Vec<f64>,
    pub vision_digest_start: String,
    pub vision_digest_end: String,
    pub projection_digest_start: String,
    pub projection_digest_end: String,
}

impl PhaseRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Index of the lowest loss; ties go to the earliest entry.
pub fn select_best(losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &l) in losses.iter().enumerate() {
        if best.is_none_or(|b| l < losses[b]) {
            best = Some(i);
        }
    }
    best
}

fn image_refs<'a>(batch: &Batch, images: &'a [Tensor<f32>]) -> Result<Option<Vec<&'a Tensor<f32>>>> {
    match &batch.images {
        None => Ok(None),
        Some(ids) => ids
            .iter()
            .map(|&i| {
                images
                    .get(i)
                    .ok_or_else(|| Error::contract(format!("example refers to missing image {i}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
    }
}

/// Token-weighted mean masked cross-entropy over `examples`, without
/// touching the parameters.
pub fn validation_loss(params: &ModelParams<f32>, examples: &[Example], images: &[Tensor<f32>], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in make_batches(examples, batch_size.max(1), 0, 0, false)? {
        let n = batch.predicted_tokens();
        if n == 0 {
            continue;
        }
        let tape = Tape::new();
        let bound = Bound::new(&tape, params, |_| false);
        let imgs = image_refs(&batch, images)?;
        let loss = bound.batch_loss(&batch, imgs.as_deref())?;
        total += loss.item() as f64 * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / count as f64)
}

/// Saves parameters, optimizer moments and metadata in one checkpoint.
pub fn save_checkpoint(
    params: &ModelParams<f32>,
    state: &OptimState<f32>,
    meta: serde_json::Value,
    path: &Path,
) -> Result<String> {
    let mut extra = BTreeMap::new();
    for (n, t) in &state.m {
        extra.insert(format!("optim.m.{n}"), t.clone());
    }
    for (n, t) in &state.v {
        extra.insert(format!("optim.v.{n}"), t.clone());
    }
    let mut meta = meta;
    if let Some(obj) = meta.as_object_mut() {
        obj.insert("optim_step".into(), state.step.into());
        obj.insert("params_digest".into(), params.digest().into());
    }
    Checkpoint {
        params: params.clone(),
        extra,
        meta,
    }
    .save(path)
}

/// Loads and verifies a checkpoint, splitting optimizer moments back out.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, OptimState<f32>, serde_json::Value)> {
    let ck = Checkpoint::load(path)?;
    let mut state = OptimState {
        step: ck.meta.get("optim_step").and_then(|v| v.as_u64()).unwrap_or(0),
        ..Default::default()
    };
    for (n, t) in ck.extra {
        if let Some(name) = n.strip_prefix("optim.m.") {
            state.m.insert(name.to_string(), t);
        } else if let Some(name) = n.strip_prefix("optim.v.") {
            state.v.insert(name.to_string(), t);
        }
    }
    Ok((ck.params, state, ck.meta))
}

/// Trains one phase from `params`. Validates every `validate_every` steps
/// and after the last step, writing a checkpoint at each validation into
/// `out_dir`. Returns the record and the lowest-validation-loss parameters.
pub fn run_phase(
    cfg: &PhaseConfig,
    params: ModelParams<f32>,
    data: &PhaseData,
    out_dir: &Path,
) -> Result<(PhaseRecord, ModelParams<f32>)> {
    if data.train.is_empty() {
        return Err(Error::config(format!("phase {} has no training examples", cfg.phase)));
    }
    if data.val.is_empty() {
        return Err(Error::config(format!("phase {} has no validation examples", cfg.phase)));
    }
    let kind = cfg.kind()?;
    let wants_images = kind == PhaseKind::Multimodal;
    if data
        .train
        .iter()
        .chain(&data.val)
        .any(|e| e.image.is_some() != wants_images)
    {
        return Err(Error::config(format!(
            "phase {} expects {} examples",
            cfg.phase,
            if wants_images { "image-conditioned" } else { "text-only" }
        )));
    }
    let schedule = cfg.schedule(data.train.len())?;
    std::fs::create_dir_all(out_dir)?;

    let mut params = params;
    let start_digest = params.digest();
    let vision_digest_start = params.vision_digest();
    let projection_digest_start = params.projection_digest();
    let mut state = OptimState::default();
    let mut points: Vec<ValPoint> = Vec::new();
    let mut best_params = params.clone();
    let mut train_loss = Vec::new();
    let mut step = 0u64;

    'epochs: for epoch in 0..cfg.epochs {
        for batch in make_batches(&data.train, cfg.batch_size, cfg.seed, epoch, true)? {
            if step == schedule.total_steps {
                break 'epochs;
            }
            step += 1;
            let mut grads = BTreeMap::new();
            {
                let tape = Tape::new();
                let bound = Bound::new(&tape, &params, |n| kind.trains(n));
                let imgs = image_refs(&batch, &data.images)?;
                let loss = bound.batch_loss(&batch, imgs.as_deref())?;
                train_loss.push(loss.item() as f64);
                let g = tape.backward(loss)?;
                for (name, var) in bound.vars() {
                    if var.requires_grad() {
                        grads.insert(name.to_string(), g.get_or_zeros(var));
                    }
                }
            }
            clip_grad_norm(&mut grads, cfg.clip_norm);
            let lr = schedule.lr_at(step)?;
            adamw_step(&mut params, &grads, &mut state, lr, &cfg.adamw)?;

            if step.is_multiple_of(cfg.validate_every) || step == schedule.total_steps {
                let val_loss = validation_loss(&params, &data.val, &data.images, cfg.batch_size)?;
                let path = out_dir.join(format!("step-{step:06}.ssckpt"));
                let meta = serde_json::json!({"phase": cfg.phase, "step": step, "val_loss": val_loss});
                save_checkpoint(&params, &state, meta, &path)?;
                let digest = params.digest();
                info!("phase {} step {step}: train {:.4} val {val_loss:.4}", cfg.phase, train_loss.last().unwrap());
                let improved = select_best(&points.iter().map(|p| p.val_loss).chain([val_loss]).collect::<Vec<_>>())
                    == Some(points.len());
                if improved {
                    best_params = params.clone();
                }
                points.push(ValPoint {
                    step,
                    val_loss,
                    checkpoint: path,
                    digest,
                });
            }
        }
    }
    let best_i = select_best(&points.iter().map(|p| p.val_loss).collect::<Vec<_>>())
        .ok_or_else(|| Error::contract("phase finished without a validation point"))?;
    let record = PhaseRecord {
        phase: cfg.phase,
        start_digest,
        schedule,
        best: points[best_i].clone(),
        points,
        train_loss,
        vision_digest_start,
        vision_digest_end: params.vision_digest(),
        projection_digest_start,
        projection_digest_end: params.projection_digest(),
    };
    record.save(&out_dir.join("record.json"))?;
    Ok((record, best_params))
}
