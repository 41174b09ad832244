use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use selfsynth::data::toy::{write_toy_data, ToyConfig};
use selfsynth::data::{load_image_manifest, load_text_corpus, write_atomic};
use selfsynth::eval::{comparison_table, run_suite, FeatureCache, ModelScorer, SuiteManifest};
use selfsynth::model::{Checkpoint, ModelParams};
use selfsynth::pipeline::{phase_data, run_ablation, run_pipeline, train_tokenizer, verify_lineage, PipelineConfig};
use selfsynth::synthesis::synthesize_corpus;
use selfsynth::tokenizer::BpeVocab;
use selfsynth::training::{load_checkpoint, load_labeled, lora_finetune, run_phase, LoraSpec, LoraTrainConfig};
use selfsynth::{Error, Result};

#[derive(Parser)]
#[command(name = "selfsynth", version, about = "Four-phase self-synthesis training for a small vision-language model")]
struct Cli {
    /// Overrides the run seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bitwise-reproducible execution. Computation is single-threaded, so
    /// this is always in effect; the flag is recorded in the run config.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Model preset (`desk` or `paper`).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Log level filter, e.g. `info` or `debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline TOML file.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the deterministic toy dataset bundle.
    ToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        unlabeled: Option<usize>,
    },
    /// Trains the BPE tokenizer on the configured text.
    TokenizeTrain {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text-only bootstrap of the decoder.
    Phase1(PhaseArgs),
    /// Image-caption training of decoder and projection.
    Phase2(PhaseArgs),
    /// Continued pretraining on real plus synthetic text.
    Phase3(PhaseArgs),
    /// Image-conditioned instruction tuning.
    Phase4(PhaseArgs),
    /// Captions unlabeled images with a trained checkpoint.
    Synthesize {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image manifest; defaults to the config's unlabeled set.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Sample to the hard cap instead of a per-image length draw.
        #[arg(long)]
        no_length_draw: bool,
        #[arg(long)]
        hard_cap: Option<usize>,
    },
    /// Scores checkpoints on an evaluation suite.
    Eval {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// One or more checkpoints; each becomes a report row.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        length_normalize: bool,
    },
    /// Phase 3 with and without synthetic text from one phase-2 checkpoint.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Completed run directory providing the phase-2 checkpoint,
        /// synthetic corpus and tokenizer.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs tokenizer training, phases 1 to 4 and evaluation.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Output root; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stops after this phase.
        #[arg(long)]
        stop_after: Option<u8>,
        /// Required to run the full-size preset.
        #[arg(long)]
        i_have_the_compute: bool,
    },
    /// Audits a run's checkpoint digest chain.
    VerifyLineage {
        /// Run directory or lineage.json.
        path: PathBuf,
    },
    /// Low-rank adapter fine-tuning with a classification head.
    Lora {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// JSONL with `text` and `label`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long, default_value_t = 16.0)]
        alpha: f64,
        #[arg(long, default_value_t = 200)]
        steps: u64,
    },
}

#[derive(Args)]
struct PhaseArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Starting checkpoint; phase 1 initializes fresh weights without it.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Synthetic corpus mixed in by phase 3.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(cli: &Cli, path: &Path) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.preset {
        cfg.preset = p.clone();
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_single_phase(cli: &Cli, k: u8, a: &PhaseArgs) -> Result<()> {
    let cfg = load_config(cli, &a.cfg.config)?;
    let vocab = BpeVocab::load(&a.tokenizer)?;
    let start = match &a.init {
        Some(p) => load_checkpoint(p)?.0,
        None if k == 1 => ModelParams::init(&cfg.model_config()?, cfg.seed)?,
        None => return Err(Error::MissingArtifact(format!("phase {k} needs --init <checkpoint>"))),
    };
    let synth = a.synthetic.as_deref().map(load_text_corpus).transpose()?;
    let pc = cfg.seeded_phase(k)?;
    let (data, _) = phase_data(&cfg, k, &vocab, &start, synth.as_ref(), pc.seed)?;
    let (record, _) = run_phase(&pc, start, &data, &a.out).map_err(|e| Error::Phase {
        phase: k,
        source: Box::new(e),
    })?;
    println!(
        "phase {k}: best step {} val {:.4} -> {}",
        record.best.step,
        record.best.val_loss,
        record.best.checkpoint.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::ToyData { out, unlabeled } => {
            let mut cfg = ToyConfig::default();
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(n) = unlabeled {
                cfg.unlabeled_images = *n;
            }
            write_toy_data(out, &cfg)?;
            println!("toy data written to {}", out.display());
        }
        Command::TokenizeTrain { cfg, out } => {
            let cfg = load_config(cli, &cfg.config)?;
            let vocab = train_tokenizer(&cfg)?;
            vocab.save(out)?;
            println!("{} entries, {} merges -> {}", vocab.vocab_size(), vocab.merges().len(), out.display());
        }
        Command::Phase1(a) => run_single_phase(cli, 1, a)?,
        Command::Phase2(a) => run_single_phase(cli, 2, a)?,
        Command::Phase3(a) => run_single_phase(cli, 3, a)?,
        Command::Phase4(a) => run_single_phase(cli, 4, a)?,
        Command::Synthesize {
            cfg,
            tokenizer,
            checkpoint,
            images,
            out,
            no_length_draw,
            hard_cap,
        } => {
            let cfg = load_config(cli, &cfg.config)?;
            let vocab = BpeVocab::load(tokenizer)?;
            let (params, _, _) = load_checkpoint(checkpoint)?;
            let mut sampler = cfg.sampler.clone();
            sampler.length_draw = !no_length_draw;
            if let Some(c) = hard_cap {
                sampler.hard_cap = *c;
            }
            let manifest = images.clone().unwrap_or_else(|| cfg.data.unlabeled.clone());
            let paths = load_image_manifest(&manifest)?;
            let (corpus, skips) = synthesize_corpus(&params, &paths, &vocab, &sampler, cfg.seed)?;
            corpus.save(out)?;
            let mut skip_path = out.as_os_str().to_owned();
            skip_path.push(".skips.json");
            write_atomic(Path::new(&skip_path), serde_json::to_string_pretty(&skips)?.as_bytes())?;
            println!(
                "{} captions, {} words, {} skipped -> {}",
                corpus.len(),
                corpus.word_count(),
                skips.skipped,
                out.display()
            );
        }
        Command::Eval {
            suite,
            tokenizer,
            checkpoint,
            out,
            length_normalize,
        } => {
            let suite = SuiteManifest::load(suite)?;
            let vocab = BpeVocab::load(tokenizer)?;
            let mut reports = Vec::new();
            let mut cache: Option<FeatureCache> = None;
            for ck in checkpoint {
                let (params, _, meta) = load_checkpoint(ck)?;
                let cache = cache.get_or_insert_with(|| FeatureCache::new(&params));
                let mut scorer = ModelScorer::new(&params, &vocab).with_cache(cache);
                scorer.options.length_normalize = *length_normalize;
                let label = match meta.get("phase").and_then(|v| v.as_u64()) {
                    Some(p) => format!("phase{p}"),
                    None => ck.display().to_string(),
                };
                reports.push(run_suite(&scorer, &suite, &label)?);
            }
            let json = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])?
            } else {
                serde_json::to_string_pretty(&serde_json::json!({
                    "reports": reports,
                    "table": comparison_table(&reports),
                }))?
            };
            write_atomic(out, json.as_bytes())?;
            for r in &reports {
                for (k, v) in r.flat() {
                    println!("{}\t{k}\t{v:.4}", r.label);
                }
                for a in &r.absent {
                    println!("{}\t{a}\tabsent", r.label);
                }
            }
        }
        Command::Ablate { cfg, run, out } => {
            let cfg = load_config(cli, &cfg.config)?;
            let lineage = selfsynth::pipeline::Lineage::load(&run.join("lineage.json"))?;
            let p2 = lineage
                .phases
                .iter()
                .find(|p| p.phase == 2)
                .ok_or_else(|| Error::MissingArtifact(format!("phase-2 entry in {}/lineage.json", run.display())))?;
            let synth = lineage
                .synthesis
                .as_ref()
                .map(|s| run.join(&s.corpus))
                .unwrap_or_else(|| run.join("synthetic.jsonl"));
            let report = run_ablation(&cfg, &run.join(&p2.best_checkpoint), &synth, &run.join("tokenizer.bpe"), out)?;
            println!("task\t+Synth\t-Synth");
            for r in &report.rows {
                println!("{}\t{:.4}\t{:.4}", r.task, r.plus, r.minus);
            }
            for (name, arm) in &report.arms {
                println!("{name} words: real {} synthetic {} total {}", arm.words.real, arm.words.synthetic, arm.words.total);
            }
        }
        Command::Pipeline {
            cfg,
            out,
            stop_after,
            i_have_the_compute,
        } => {
            let mut cfg = load_config(cli, &cfg.config)?;
            if let Some(o) = out {
                cfg.out_dir = o.clone();
            }
            if let Some(k) = stop_after {
                cfg.phases.retain(|p| p.phase <= *k);
            }
            let result = run_pipeline(&cfg, *i_have_the_compute)?;
            for p in &result.lineage.phases {
                println!("phase {}: best step {} val {:.4} digest {}", p.phase, p.best_step, p.best_val_loss, p.best_digest);
            }
            println!("{}", result.run_dir.display());
        }
        Command::VerifyLineage { path } => {
            let file = if path.is_dir() { path.join("lineage.json") } else { path.clone() };
            for line in verify_lineage(&file)? {
                println!("{line}");
            }
            println!("lineage ok");
        }
        Command::Lora {
            checkpoint,
            tokenizer,
            data,
            out,
            rank,
            alpha,
            steps,
        } => {
            let (base, _, _) = load_checkpoint(checkpoint)?;
            let vocab = BpeVocab::load(tokenizer)?;
            let (examples, classes) = load_labeled(data, &vocab, base.config().max_seq_len)?;
            let spec = LoraSpec {
                rank: *rank,
                alpha: *alpha,
                targets: Vec::new(),
            };
            let tc = LoraTrainConfig {
                steps: *steps,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let (adapter, metrics) = lora_finetune(&base, &spec, &examples, classes, &tc)?;
            Checkpoint {
                params: base,
                extra: adapter.tensors,
                meta: serde_json::json!({"lora": {"rank": adapter.rank, "alpha": adapter.alpha, "targets": adapter.targets}, "metrics": metrics}),
            }
            .save(out)?;
            println!("train accuracy {:.3}, final loss {:.4}", metrics.train_accuracy, metrics.final_loss);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp_secs().init();
    match run(&cli) {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
