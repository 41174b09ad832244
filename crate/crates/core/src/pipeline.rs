//! Four-phase orchestration: tokenizer, text bootstrap, image-text coupling,
//! caption synthesis, mixed continued pretraining, instruction tuning, and the
//! with/without-synthetic-text ablation.
//!
//! Each run gets a fresh `run-NNN` directory; earlier runs are never touched.
//! `lineage.json` records the digest chain from initialization through every
//! phase's best checkpoint and can be audited with [`verify_lineage`].

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{
    frame, load_caption_corpus, load_image_manifest, load_text_corpus, mix_corpora, resolve, segment_document,
    split_validation, write_atomic, CaptionPair, Document, Example, Provenance, TextCorpus,
};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::eval::{comparison_table, run_suite, EvalReport, FeatureCache, ModelScorer, SuiteManifest};
use crate::model::{encode_grouped, Checkpoint, ModelConfig, ModelParams};
use crate::synthesis::{child_seed, synthesize_corpus, SamplerConfig};
use crate::tokenizer::BpeVocab;
use crate::training::{load_checkpoint, run_phase, PhaseConfig, PhaseData, PhaseRecord};

pub const LINEAGE_SCHEMA: &str = "lineage-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// JSONL text corpus for phases 1 and 3.
    pub text: PathBuf,
    /// `image<TAB>caption[<TAB>source]` pairs for phase 2.
    pub captions: PathBuf,
    /// Unlabeled image manifest captioned before phase 3.
    pub unlabeled: PathBuf,
    /// `image<TAB>instruction text` rows for phase 4.
    pub instructions: PathBuf,
    #[serde(default)]
    pub suite: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// `desk` or `paper`.
    pub preset: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Overrides the preset's vocabulary size.
    #[serde(default)]
    pub vocab_size: Option<usize>,
    /// Add phase-2 captions to the real text of phase 3.
    #[serde(default = "yes")]
    pub include_caption_text: bool,
    #[serde(default = "yes")]
    pub deterministic: bool,
    pub data: DataPaths,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Phases `1..=k` in order. Each phase's effective seed mixes the run
    /// seed with its own `seed` field.
    #[serde(rename = "phase")]
    pub phases: Vec<PhaseConfig>,
}

fn yes() -> bool {
    true
}

impl PipelineConfig {
    /// Settings for the bundled toy data at desk scale. Learning rates are
    /// raised above the reference values because the runs are a few hundred
    /// steps long.
    pub fn toy_defaults() -> Self {
        let phase = |phase: u8, epochs: u64, peak_lr: f64, batch_size: usize, max_steps: u64| PhaseConfig {
            epochs,
            peak_lr,
            batch_size,
            validate_every: 20,
            max_steps: Some(max_steps),
            ..PhaseConfig::preset(phase, batch_size).expect("phases 1-4 exist")
        };
        Self {
            preset: "desk".into(),
            seed: 7,
            out_dir: "runs".into(),
            vocab_size: None,
            include_caption_text: true,
            deterministic: true,
            data: DataPaths {
                text: "text.jsonl".into(),
                captions: "captions.tsv".into(),
                unlabeled: "unlabeled.txt".into(),
                instructions: "instructions.tsv".into(),
                suite: Some("eval/suite.toml".into()),
            },
            sampler: SamplerConfig::default(),
            phases: vec![
                phase(1, 15, 2e-3, 16, 300),
                phase(2, 5, 1e-3, 8, 120),
                phase(3, 2, 5e-4, 16, 120),
                phase(4, 2, 5e-4, 8, 80),
            ],
        }
    }

    /// Parses TOML and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        let mut cfg: PipelineConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        let r = |p: &Path| resolve(path, &p.to_string_lossy());
        cfg.out_dir = r(&cfg.out_dir);
        cfg.data.text = r(&cfg.data.text);
        cfg.data.captions = r(&cfg.data.captions);
        cfg.data.unlabeled = r(&cfg.data.unlabeled);
        cfg.data.instructions = r(&cfg.data.instructions);
        cfg.data.suite = cfg.data.suite.as_deref().map(r);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        for (i, p) in self.phases.iter().enumerate() {
            if p.phase as usize != i + 1 {
                return Err(Error::config(format!(
                    "phases must be listed in order 1..k; entry {} is phase {}",
                    i + 1,
                    p.phase
                )));
            }
        }
        self.sampler.validate(self.model_config()?.vocab_size)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(&self.preset)?;
        if let Some(v) = self.vocab_size {
            m.vocab_size = v;
        }
        Ok(m)
    }

    pub fn phase(&self, k: u8) -> Result<&PhaseConfig> {
        self.phases
            .iter()
            .find(|p| p.phase == k)
            .ok_or_else(|| Error::config(format!("pipeline config has no phase {k}")))
    }

    /// Phase `k` with its effective seed.
    pub fn seeded_phase(&self, k: u8) -> Result<PhaseConfig> {
        let mut p = self.phase(k)?.clone();
        p.seed ^= child_seed(self.seed, k as u64);
        Ok(p)
    }

    /// The `paper` preset only runs with explicit consent.
    pub fn check_compute(&self, i_have_the_compute: bool) -> Result<()> {
        if self.preset == "paper" && !i_have_the_compute {
            return Err(Error::config(
                "the paper preset trains a 58M-parameter model on 100M words; pass --i-have-the-compute to run it",
            ));
        }
        Ok(())
    }
}

/// Creates `run-NNN` with the next free number.
pub fn next_run_dir(out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let mut last = 0u32;
    for e in std::fs::read_dir(out_dir)? {
        let name = e?.file_name();
        if let Some(n) = name.to_str().and_then(|s| s.strip_prefix("run-")).and_then(|s| s.parse::<u32>().ok()) {
            last = last.max(n);
        }
    }
    loop {
        last += 1;
        let dir = out_dir.join(format!("run-{last:03}"));
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
}

/// Real text for a phase: the text corpus plus, optionally, captions as
/// text-only documents.
pub fn real_text(cfg: &PipelineConfig, with_captions: bool) -> Result<TextCorpus> {
    let mut corpus = load_text_corpus(&cfg.data.text)?;
    if with_captions {
        let (entries, _) = crate::data::read_caption_manifest(&cfg.data.captions)?;
        for (i, e) in entries.into_iter().enumerate() {
            corpus.documents.push(Document {
                id: format!("caption-{i:06}"),
                text: e.caption,
                provenance: Provenance::Real,
            });
        }
    }
    Ok(corpus)
}

pub fn train_tokenizer(cfg: &PipelineConfig) -> Result<BpeVocab> {
    let text = real_text(cfg, true)?;
    let mut docs: Vec<String> = text.documents.into_iter().map(|d| d.text).collect();
    if cfg.data.instructions.exists() {
        let (entries, _) = crate::data::read_caption_manifest(&cfg.data.instructions)?;
        docs.extend(entries.into_iter().map(|e| e.caption));
    }
    if docs.is_empty() {
        return Err(Error::config("tokenizer corpus is empty"));
    }
    BpeVocab::train(&docs, cfg.model_config()?.vocab_size)
}

fn text_examples(docs: &[Document], vocab: &BpeVocab, max_len: usize) -> Vec<Example> {
    docs.iter()
        .flat_map(|d| segment_document(&d.text, vocab))
        .map(|t| Example {
            tokens: frame(&t, max_len),
            image: None,
        })
        .collect()
}

/// Text phase data with the validation tail taken per corpus before mixing.
pub fn text_phase_data(
    real: &TextCorpus,
    synth: Option<&TextCorpus>,
    vocab: &BpeVocab,
    model: &ModelConfig,
    seed: u64,
) -> Result<(PhaseData, TextCorpus)> {
    let (real_train, mut val) = split_validation(&real.documents)?;
    let mut synth_train = Vec::new();
    if let Some(s) = synth.filter(|s| !s.is_empty()) {
        let (t, v) = split_validation(&s.documents)?;
        synth_train = t;
        val.extend(v);
    }
    let mixed = mix_corpora(
        &TextCorpus {
            documents: real_train,
            meta: None,
        },
        &TextCorpus {
            documents: synth_train,
            meta: None,
        },
        seed,
    );
    let data = PhaseData {
        train: text_examples(&mixed.documents, vocab, model.max_seq_len),
        val: text_examples(&val, vocab, model.max_seq_len),
        images: Vec::new(),
    };
    Ok((data, mixed))
}

/// Image-conditioned phase data from a caption-style manifest.
pub fn image_phase_data(
    manifest: &Path,
    vocab: &BpeVocab,
    params: &ModelParams<f32>,
) -> Result<(PhaseData, Vec<PathBuf>)> {
    let cfg = params.config();
    let (pairs, skips) = load_caption_corpus(manifest, cfg.image_side)?;
    if skips.skipped > 0 {
        log::warn!("{}: skipped {} rows", manifest.display(), skips.skipped);
    }
    let (train, val) = split_validation(&pairs)?;
    let mut images = Vec::with_capacity(pairs.len());
    let max_text = cfg.max_seq_len - cfg.n_image_slots();
    let mut convert = |set: &[CaptionPair]| -> Result<Vec<Example>> {
        set.iter()
            .map(|p| {
                images.push(encode_grouped(params, &p.image)?);
                Ok(Example {
                    tokens: frame(&vocab.encode(&p.caption), max_text),
                    image: Some(images.len() - 1),
                })
            })
            .collect()
    };
    let train = convert(&train)?;
    let val = convert(&val)?;
    let paths = pairs.into_iter().map(|p| p.image_path).collect();
    Ok((PhaseData { train, val, images }, paths))
}

/// Examples for phase `k`: sentences of the text corpus (1), caption pairs
/// (2), real text mixed with `synth` (3) or instruction pairs (4). Also
/// returns the image paths used, for image phases.
pub fn phase_data(
    cfg: &PipelineConfig,
    k: u8,
    vocab: &BpeVocab,
    params: &ModelParams<f32>,
    synth: Option<&TextCorpus>,
    seed: u64,
) -> Result<(PhaseData, Vec<PathBuf>)> {
    let model = params.config();
    match k {
        1 => Ok((text_phase_data(&real_text(cfg, false)?, None, vocab, model, seed)?.0, Vec::new())),
        2 => image_phase_data(&cfg.data.captions, vocab, params),
        3 => {
            let real = real_text(cfg, cfg.include_caption_text)?;
            Ok((text_phase_data(&real, synth, vocab, model, seed)?.0, Vec::new()))
        }
        4 => image_phase_data(&cfg.data.instructions, vocab, params),
        _ => Err(Error::config(format!("no phase {k}"))),
    }
}

fn canonical_set(paths: &[PathBuf]) -> HashSet<PathBuf> {
    paths
        .iter()
        .map(|p| std::fs::canonicalize(p).unwrap_or_else(|_| p.clone()))
        .collect()
}

/// Fails when any synthesis image was also a phase-2 training image.
pub fn check_disjoint(training: &[PathBuf], synthesis: &[PathBuf]) -> Result<()> {
    let seen = canonical_set(training);
    let overlap: Vec<String> = synthesis
        .iter()
        .filter(|p| seen.contains(&std::fs::canonicalize(p).unwrap_or_else(|_| (*p).clone())))
        .map(|p| p.display().to_string())
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{} synthesis images were used in phase-2 training, e.g. {}",
            overlap.len(),
            overlap[0]
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineagePhase {
    pub phase: u8,
    pub start_digest: String,
    pub best_digest: String,
    pub best_step: u64,
    pub best_val_loss: f64,
    /// Relative to the run directory.
    pub best_checkpoint: PathBuf,
    pub record: PathBuf,
    pub vision_digest_start: String,
    pub vision_digest_end: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisEntry {
    pub corpus: PathBuf,
    pub corpus_sha256: String,
    pub model_digest: String,
    pub documents: usize,
    pub words: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub schema: String,
    pub seed: u64,
    pub preset: String,
    pub tokenizer_sha256: String,
    pub init_checkpoint: PathBuf,
    pub init_digest: String,
    pub phases: Vec<LineagePhase>,
    #[serde(default)]
    pub synthesis: Option<SynthesisEntry>,
}

impl Lineage {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn rel(run: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(run).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

/// Checks the digest chain: phase 1 starts from the saved initialization,
/// every later phase starts from the previous phase's best checkpoint, each
/// best checkpoint is the argmin of its record and hashes to the digest on
/// file, and the vision encoder never changes. Returns one line per check.
pub fn verify_lineage(path: &Path) -> Result<Vec<String>> {
    let lin = Lineage::load(path)?;
    let run = path.parent().unwrap_or(Path::new("."));
    let fail = |m: String| Err(Error::Lineage(m));
    let mut lines = Vec::new();
    if lin.schema != LINEAGE_SCHEMA {
        return fail(format!("unknown schema `{}`", lin.schema));
    }
    let init = Checkpoint::load(&run.join(&lin.init_checkpoint))?;
    if init.params.digest() != lin.init_digest {
        return fail("initial checkpoint digest differs from lineage".into());
    }
    let vision = init.params.vision_digest();
    let mut prev = lin.init_digest.clone();
    for (i, p) in lin.phases.iter().enumerate() {
        if p.phase as usize != i + 1 {
            return fail(format!("phase entries out of order at {}", p.phase));
        }
        if p.start_digest != prev {
            return fail(format!("phase {} starts from {} but the handoff digest is {}", p.phase, p.start_digest, prev));
        }
        let record = PhaseRecord::load(&run.join(&p.record))?;
        if record.start_digest != p.start_digest || record.best.digest != p.best_digest {
            return fail(format!("phase {} record disagrees with lineage", p.phase));
        }
        let losses: Vec<f64> = record.points.iter().map(|v| v.val_loss).collect();
        let argmin = crate::training::select_best(&losses)
            .ok_or_else(|| Error::Lineage(format!("phase {} has no validation points", p.phase)))?;
        if record.points[argmin].step != p.best_step {
            return fail(format!(
                "phase {} handed off step {} but the lowest validation loss is at step {}",
                p.phase, p.best_step, record.points[argmin].step
            ));
        }
        let ck = Checkpoint::load(&run.join(&p.best_checkpoint))?;
        let digest = ck.params.digest();
        if digest != p.best_digest {
            return fail(format!("phase {} best checkpoint hashes to {digest}, lineage says {}", p.phase, p.best_digest));
        }
        if ck.params.vision_digest() != vision || p.vision_digest_start != vision || p.vision_digest_end != vision {
            return fail(format!("vision encoder changed during phase {}", p.phase));
        }
        lines.push(format!(
            "phase {}: start {} == previous best, best step {} (val {:.4}) digest {}",
            p.phase,
            &p.start_digest[..12],
            p.best_step,
            p.best_val_loss,
            &p.best_digest[..12]
        ));
        prev = p.best_digest.clone();
    }
    if let Some(s) = &lin.synthesis {
        let bytes = std::fs::read(run.join(&s.corpus)).map_err(|_| Error::MissingArtifact(s.corpus.display().to_string()))?;
        if sha256_hex(&bytes) != s.corpus_sha256 {
            return fail("synthetic corpus hash differs from lineage".into());
        }
        let p2 = lin.phases.iter().find(|p| p.phase == 2);
        if p2.is_some_and(|p| p.best_digest != s.model_digest) {
            return fail("synthetic corpus was not generated by the phase-2 best checkpoint".into());
        }
        lines.push(format!("synthesis: {} documents from {}", s.documents, &s.model_digest[..12]));
    }
    Ok(lines)
}

/// Result of [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub run_dir: PathBuf,
    pub lineage: Lineage,
    pub reports: Vec<EvalReport>,
}

struct RunState<'a> {
    cfg: &'a PipelineConfig,
    run: PathBuf,
    vocab: BpeVocab,
    lineage: Lineage,
    params: ModelParams<f32>,
    phase2_images: Vec<PathBuf>,
    synth: Option<TextCorpus>,
}

impl RunState<'_> {
    fn run_stage(&mut self, k: u8) -> Result<()> {
        let pc = self.cfg.seeded_phase(k)?;
        if k == 3 {
            self.synthesize()?;
        }
        let (data, paths) = phase_data(self.cfg, k, &self.vocab, &self.params, self.synth.as_ref(), pc.seed)?;
        if k == 2 {
            self.phase2_images = paths;
        }
        info!("phase {k}: {} train / {} val examples", data.train.len(), data.val.len());
        let dir = self.run.join(format!("phase{k}"));
        let (record, _) = run_phase(&pc, self.params.clone(), &data, &dir)?;
        let (best, _, _) = load_checkpoint(&record.best.checkpoint)?;
        self.lineage.phases.push(LineagePhase {
            phase: k,
            start_digest: record.start_digest.clone(),
            best_digest: best.digest(),
            best_step: record.best.step,
            best_val_loss: record.best.val_loss,
            best_checkpoint: rel(&self.run, &record.best.checkpoint),
            record: rel(&self.run, &dir.join("record.json")),
            vision_digest_start: record.vision_digest_start.clone(),
            vision_digest_end: record.vision_digest_end.clone(),
        });
        self.lineage.save(&self.run.join("lineage.json"))?;
        self.params = best;
        Ok(())
    }

    fn synthesize(&mut self) -> Result<()> {
        let images = load_image_manifest(&self.cfg.data.unlabeled)?;
        check_disjoint(&self.phase2_images, &images)?;
        let (corpus, skips) = synthesize_corpus(&self.params, &images, &self.vocab, &self.cfg.sampler, self.cfg.seed)?;
        let path = self.run.join("synthetic.jsonl");
        corpus.save(&path)?;
        write_atomic(&self.run.join("synthetic.skips.json"), serde_json::to_string_pretty(&skips)?.as_bytes())?;
        info!("synthesized {} captions, {} words", corpus.len(), corpus.word_count());
        self.lineage.synthesis = Some(SynthesisEntry {
            corpus: rel(&self.run, &path),
            corpus_sha256: sha256_hex(&std::fs::read(&path)?),
            model_digest: self.params.digest(),
            documents: corpus.len(),
            words: corpus.word_count(),
            skipped: skips.skipped,
        });
        self.synth = Some(corpus);
        Ok(())
    }
}

/// Runs the configured phases in a new run directory and evaluates each
/// phase's best checkpoint on the suite, when one is configured.
pub fn run_pipeline(cfg: &PipelineConfig, i_have_the_compute: bool) -> Result<PipelineRun> {
    cfg.validate()?;
    cfg.check_compute(i_have_the_compute)?;
    let run = next_run_dir(&cfg.out_dir)?;
    info!("run directory {}", run.display());
    write_atomic(
        &run.join("config.toml"),
        toml::to_string_pretty(cfg).map_err(|e| Error::config(e.to_string()))?.as_bytes(),
    )?;

    let vocab = train_tokenizer(cfg)?;
    let vocab_path = run.join("tokenizer.bpe");
    vocab.save(&vocab_path)?;

    let params = ModelParams::init(&cfg.model_config()?, cfg.seed)?;
    let init_path = run.join("init.ssckpt");
    Checkpoint {
        params: params.clone(),
        extra: BTreeMap::new(),
        meta: serde_json::json!({"phase": 0, "seed": cfg.seed}),
    }
    .save(&init_path)?;

    let mut state = RunState {
        cfg,
        lineage: Lineage {
            schema: LINEAGE_SCHEMA.into(),
            seed: cfg.seed,
            preset: cfg.preset.clone(),
            tokenizer_sha256: sha256_hex(&std::fs::read(&vocab_path)?),
            init_checkpoint: rel(&run, &init_path),
            init_digest: params.digest(),
            phases: Vec::new(),
            synthesis: None,
        },
        run: run.clone(),
        vocab,
        params,
        phase2_images: Vec::new(),
        synth: None,
    };
    state.lineage.save(&run.join("lineage.json"))?;
    for p in &cfg.phases {
        state.run_stage(p.phase).map_err(|e| Error::Phase {
            phase: p.phase,
            source: Box::new(e),
        })?;
    }

    let mut reports = Vec::new();
    if let Some(suite_path) = &cfg.data.suite {
        let suite = SuiteManifest::load(suite_path)?;
        let cache = FeatureCache::new(&state.params);
        for p in &state.lineage.phases {
            let (params, _, _) = load_checkpoint(&run.join(&p.best_checkpoint))?;
            let scorer = ModelScorer::new(&params, &state.vocab).with_cache(&cache);
            let report = run_suite(&scorer, &suite, &format!("phase{}", p.phase))?;
            report.save(&run.join(format!("eval/phase{}.json", p.phase)))?;
            reports.push(report);
        }
        write_atomic(
            &run.join("eval/table.json"),
            serde_json::to_string_pretty(&comparison_table(&reports))?.as_bytes(),
        )?;
    }
    Ok(PipelineRun {
        run_dir: run,
        lineage: state.lineage,
        reports,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmWords {
    pub real: usize,
    pub synthetic: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: String,
    #[serde(rename = "+Synth")]
    pub plus: f64,
    #[serde(rename = "-Synth")]
    pub minus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub start_digest: String,
    pub best_digest: String,
    pub seed: u64,
    pub words: ArmWords,
    pub record: PathBuf,
}

/// Language-only scores for the two continued-pretraining arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema: String,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub arms: BTreeMap<String, AblationArm>,
}

impl AblationReport {
    pub const PLUS: &'static str = "+Synth";
    pub const MINUS: &'static str = "-Synth";
}

/// Trains phase 3 twice from the same phase-2 checkpoint with identical
/// seeds, once on real plus synthetic text and once on real text only, and
/// scores both on the language-only tasks of the suite.
pub fn run_ablation(
    cfg: &PipelineConfig,
    phase2_checkpoint: &Path,
    synthetic: &Path,
    tokenizer: &Path,
    out_dir: &Path,
) -> Result<AblationReport> {
    for (what, p) in [
        ("phase-2 best checkpoint", phase2_checkpoint),
        ("synthetic corpus", synthetic),
        ("tokenizer", tokenizer),
    ] {
        if !p.exists() {
            return Err(Error::MissingArtifact(format!("{what} {}", p.display())));
        }
    }
    let vocab = BpeVocab::load(tokenizer)?;
    let (start, _, _) = load_checkpoint(phase2_checkpoint)?;
    let synth = load_text_corpus(synthetic)?;
    let real = real_text(cfg, cfg.include_caption_text)?;
    let pc = cfg.seeded_phase(3)?;
    let suite = match &cfg.data.suite {
        Some(p) => SuiteManifest::load(p)?.language_only(),
        None => SuiteManifest::default(),
    };
    let mut arms = BTreeMap::new();
    let mut scores: Vec<BTreeMap<String, f64>> = Vec::new();
    let empty = TextCorpus::default();
    for (name, dir, s) in [
        (AblationReport::PLUS, "plus-synth", &synth),
        (AblationReport::MINUS, "minus-synth", &empty),
    ] {
        let (data, _) = text_phase_data(&real, Some(s), &vocab, start.config(), pc.seed)?;
        let arm_dir = out_dir.join(dir);
        let (record, best) = run_phase(&pc, start.clone(), &data, &arm_dir)?;
        let scorer = ModelScorer::new(&best, &vocab);
        let report = run_suite(&scorer, &suite, name)?;
        report.save(&arm_dir.join("eval.json"))?;
        scores.push(report.flat());
        arms.insert(
            name.to_string(),
            AblationArm {
                start_digest: record.start_digest.clone(),
                best_digest: record.best.digest.clone(),
                seed: pc.seed,
                words: ArmWords {
                    real: real.word_count(),
                    synthetic: s.word_count(),
                    total: real.word_count() + s.word_count(),
                },
                record: arm_dir.join("record.json"),
            },
        );
    }
    let rows = scores[0]
        .iter()
        .map(|(task, &plus)| AblationRow {
            task: task.clone(),
            plus,
            minus: scores[1].get(task).copied().unwrap_or(f64::NAN),
        })
        .collect();
    let report = AblationReport {
        schema: "ablation-v1".into(),
        columns: vec![AblationReport::PLUS.into(), AblationReport::MINUS.into()],
        rows,
        arms,
    };
    write_atomic(&out_dir.join("ablation.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}
