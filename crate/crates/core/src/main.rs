use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use corfsep::audio::{read_wav, write_wav, SAMPLE_RATE};
use corfsep::cache::{DerivedCache, KeyBuilder};
use corfsep::checkpoint::Checkpoint;
use corfsep::config::RunConfig;
use corfsep::extractor::{cue_pairs, train_stage2, CuePair, Extractor};
use corfsep::mixsim::{build_dataset, ingest_corpus, load_dataset, Example, Split, MANIFEST_NAME};
use corfsep::pipeline::{evaluate, separate, EvalOptions, Models, ResultRecord};
use corfsep::separator::Separator;
use corfsep::stage1::{derive_residual_examples, finetune_on, train_stage1};
use corfsep::stop::{recursion_residuals, stop_training_data, train_stop_classifier, Labeled, StopClassifier};
use corfsep::toy::{write_toy_corpus, ToyCorpusSpec};
use corfsep::train::{EpochRecord, TrainOutcome};
use corfsep::{Error, Result};

/// Coarse-to-fine recursive speech separation.
#[derive(Parser)]
#[command(name = "corfsep", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Args)]
struct ModelPaths {
    #[arg(long)]
    stage1: Option<PathBuf>,
    #[arg(long)]
    stop: Option<PathBuf>,
    /// Without it the coarse cues are the outputs.
    #[arg(long)]
    stage2: Option<PathBuf>,
}

#[derive(Args)]
struct Data {
    /// Training manifest (repeatable).
    #[arg(long)]
    train: Vec<PathBuf>,
    /// Validation manifest (repeatable).
    #[arg(long)]
    valid: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a mixture dataset and its manifest.
    Simulate {
        /// Corpus root with one directory per speaker.
        #[arg(long, conflicts_with = "toy_speakers")]
        corpus: Option<PathBuf>,
        /// Generate a synthetic corpus of this many voices under <out>/corpus.
        #[arg(long)]
        toy_speakers: Option<usize>,
        #[arg(long, default_value_t = 4)]
        toy_utterances: usize,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Train the stage-1 recursive separator.
    TrainStage1 {
        #[command(flatten)]
        data: Data,
    },
    /// Fine-tune stage 1 on its own first-iteration residuals.
    FinetuneStage1 {
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[command(flatten)]
        data: Data,
    },
    /// Train the repeat-or-stop classifier.
    TrainStop {
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[command(flatten)]
        data: Data,
    },
    /// Train the stage-2 cue-conditioned extractor.
    TrainStage2 {
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[command(flatten)]
        data: Data,
    },
    /// Separate one mixture into source_<k>.wav files.
    Separate {
        #[arg(long)]
        mixture: PathBuf,
        #[command(flatten)]
        models: ModelPaths,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Score the pipeline on test manifests.
    Evaluate {
        /// Test manifest (repeatable).
        #[arg(long)]
        manifest: Vec<PathBuf>,
        #[command(flatten)]
        models: ModelPaths,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

/// Defaults, then the config file, then flags.
fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn override_vec(target: &mut Vec<PathBuf>, flag: &[PathBuf]) {
    if !flag.is_empty() {
        *target = flag.to_vec();
    }
}

fn override_opt(target: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        target.clone_from(flag);
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} given (flag --{what} or paths.{what})")))
}

fn load_all(manifests: &[PathBuf]) -> Result<Vec<Example>> {
    let mut all = Vec::new();
    for m in manifests {
        all.extend(load_dataset(m)?);
    }
    Ok(all)
}

fn create_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })
}

/// Writes the effective configuration next to the outputs.
fn record_config(cfg: &RunConfig, command: &str) -> Result<()> {
    let path = cfg.out.join(format!("{command}.config.toml"));
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::Io { path, source: e })
}

fn progress(what: &'static str) -> impl FnMut(&EpochRecord) {
    move |r| {
        let score = match (r.valid_si_snr_db, r.valid_accuracy) {
            (Some(db), _) => format!(" valid {db:.2} dB"),
            (_, Some(acc)) => format!(" valid acc {acc:.3}"),
            _ => String::new(),
        };
        eprintln!("{what} epoch {} loss {:.4}{score} lr {:.2e}", r.epoch, r.train_loss, r.lr);
    }
}

fn save_trained(cfg: &RunConfig, name: &str, mut ck: Checkpoint, outcome: &TrainOutcome) -> Result<()> {
    outcome.check()?;
    ck.train_state = Some(outcome.state.clone());
    ck.save(cfg.out.join(format!("{name}.ckpt.json")))?;
    outcome.write_log(&cfg.out.join(format!("{name}.log.jsonl")))
}

fn load_stage1(path: &Path) -> Result<(Separator, String)> {
    let ck = Checkpoint::load(path)?;
    Ok((Separator::from_checkpoint(&ck)?, ck.digest()?))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.common)?;
    let cache = DerivedCache::from_env();
    let name = match &cli.command {
        Command::Simulate { .. } => "simulate",
        Command::TrainStage1 { .. } => "train-stage1",
        Command::FinetuneStage1 { .. } => "finetune-stage1",
        Command::TrainStop { .. } => "train-stop",
        Command::TrainStage2 { .. } => "train-stage2",
        Command::Separate { .. } => "separate",
        Command::Evaluate { .. } => "evaluate",
    };
    match cli.command {
        Command::Simulate {
            corpus,
            toy_speakers,
            toy_utterances,
            speakers,
            count,
            split,
        } => {
            override_opt(&mut cfg.paths.corpus, &corpus);
            if let Some(n) = speakers {
                cfg.simulate.speakers = n;
            }
            if let Some(n) = count {
                cfg.simulate.count = n;
            }
            cfg.validate()?;
            create_out(&cfg)?;
            let root = match toy_speakers {
                Some(k) => {
                    let root = cfg.out.join("corpus");
                    let seg = cfg.simulate.segmentation.seg_len;
                    write_toy_corpus(
                        &root,
                        &ToyCorpusSpec {
                            num_speakers: k,
                            utterances_per_speaker: toy_utterances,
                            min_len: seg,
                            max_len: 3 * seg,
                            prefix: format!("{split:?}").to_lowercase(),
                            seed: cfg.seed,
                        },
                    )?;
                    root
                }
                None => required(&cfg.paths.corpus, "corpus")?.to_owned(),
            };
            let index = ingest_corpus(&root, split)?;
            let entries = build_dataset(
                &index,
                cfg.simulate.speakers,
                cfg.simulate.count,
                cfg.seed,
                &cfg.out,
                &cfg.build_options(),
            )?;
            eprintln!("wrote {} mixtures to {}", entries.len(), cfg.out.join(MANIFEST_NAME).display());
        }
        Command::TrainStage1 { data } => {
            override_vec(&mut cfg.paths.train, &data.train);
            override_vec(&mut cfg.paths.valid, &data.valid);
            cfg.validate()?;
            let train = load_all(&cfg.paths.train)?;
            if train.is_empty() {
                return Err(Error::Config("no training manifests given (--train or paths.train)".into()));
            }
            let valid = load_all(&cfg.paths.valid)?;
            create_out(&cfg)?;
            let mut model = Separator::new(cfg.separator.clone(), cfg.seed)?;
            let tc = cfg.seeded(&cfg.train);
            let outcome = train_stage1(&mut model, vec![train], &valid, &tc, progress("stage1"))?;
            save_trained(&cfg, "stage1", model.to_checkpoint(), &outcome)?;
        }
        Command::FinetuneStage1 { stage1, data } => {
            override_opt(&mut cfg.paths.stage1, &stage1);
            override_vec(&mut cfg.paths.train, &data.train);
            override_vec(&mut cfg.paths.valid, &data.valid);
            cfg.validate()?;
            let (mut model, digest) = load_stage1(required(&cfg.paths.stage1, "stage1")?)?;
            let three: Vec<Example> = load_all(&cfg.paths.train)?
                .into_iter()
                .filter(|e| e.num_speakers() == 3)
                .collect();
            if three.is_empty() {
                return Err(Error::TrainingData("fine-tuning needs 3-speaker training mixtures".into()));
            }
            let valid = load_all(&cfg.paths.valid)?;
            create_out(&cfg)?;
            let mut key = KeyBuilder::new("finetune-residuals");
            key.text(&digest).examples(&three);
            let derived: Vec<Example> = cache.get_or_compute(&key, || derive_residual_examples(&model, &three))?;
            let tc = cfg.seeded(&cfg.train);
            let outcome = finetune_on(&mut model, derived, three, &valid, &tc, progress("finetune"))?;
            save_trained(&cfg, "stage1_finetuned", model.to_checkpoint(), &outcome)?;
        }
        Command::TrainStop { stage1, data } => {
            override_opt(&mut cfg.paths.stage1, &stage1);
            override_vec(&mut cfg.paths.train, &data.train);
            override_vec(&mut cfg.paths.valid, &data.valid);
            cfg.validate()?;
            let (model, digest) = load_stage1(required(&cfg.paths.stage1, "stage1")?)?;
            let train = load_all(&cfg.paths.train)?;
            let valid = load_all(&cfg.paths.valid)?;
            create_out(&cfg)?;
            let mut key = KeyBuilder::new("stop-train");
            key.text(&digest).examples(&train);
            let labeled: Vec<Labeled> = cache.get_or_compute(&key, || stop_training_data(&model, &train))?;
            let mut key = KeyBuilder::new("stop-valid");
            key.text(&digest).examples(&valid);
            let vlabeled: Vec<Labeled> = cache.get_or_compute(&key, || recursion_residuals(&model, &valid))?;
            let mut stop = StopClassifier::new(&model, cfg.stop.clone(), cfg.seed)?;
            stop.set_linked_stage1_digest(digest);
            let tc = cfg.seeded(&cfg.stop_train);
            let outcome = train_stop_classifier(&mut stop, &labeled, &vlabeled, &tc, progress("stop"))?;
            save_trained(&cfg, "stop", stop.to_checkpoint(), &outcome)?;
        }
        Command::TrainStage2 { stage1, data } => {
            override_opt(&mut cfg.paths.stage1, &stage1);
            override_vec(&mut cfg.paths.train, &data.train);
            override_vec(&mut cfg.paths.valid, &data.valid);
            cfg.validate()?;
            let (model, digest) = load_stage1(required(&cfg.paths.stage1, "stage1")?)?;
            let train = load_all(&cfg.paths.train)?;
            let valid = load_all(&cfg.paths.valid)?;
            create_out(&cfg)?;
            let final_cue = cfg.pipeline.final_cue;
            let pairs_for = |kind: &str, items: &[Example]| -> Result<Vec<CuePair>> {
                let mut key = KeyBuilder::new(kind);
                key.text(&digest).text(&format!("{final_cue:?}")).examples(items);
                cache.get_or_compute(&key, || cue_pairs(&model, items, final_cue))
            };
            let pairs = pairs_for("stage2-train", &train)?;
            let vpairs = pairs_for("stage2-valid", &valid)?;
            let mut g = Extractor::new(&model, cfg.stage2.clone(), cfg.seed)?;
            g.set_linked_stage1_digest(digest.clone());
            let tc = cfg.seeded(&cfg.stage2_train);
            let outcome = train_stage2(&mut g, pairs, &vpairs, &tc, progress("stage2"))?;
            save_trained(&cfg, "stage2", g.to_checkpoint(), &outcome)?;
        }
        Command::Separate {
            mixture,
            models,
            max_iterations,
        } => {
            apply_models(&mut cfg, &models, max_iterations);
            cfg.validate()?;
            let m = load_models(&cfg)?;
            let x = read_wav(&mixture)?;
            x.ensure_rate(SAMPLE_RATE)?;
            create_out(&cfg)?;
            let result = separate(&x, &m, &cfg.pipeline)?;
            let mut files = Vec::with_capacity(result.fine_sources.len());
            for (k, s) in result.fine_sources.iter().enumerate() {
                let name = format!("source_{}.wav", k + 1);
                write_wav(cfg.out.join(&name), s)?;
                files.push(name);
            }
            let record = ResultRecord {
                iterations: result.iterations,
                truncated: result.truncated,
                stop_decisions: result.stop_decisions.clone(),
                source_files: files,
            };
            let path = cfg.out.join("result.json");
            let text = serde_json::to_string_pretty(&record)? + "\n";
            std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
            eprintln!(
                "{} sources{}",
                result.iterations,
                if result.truncated { " (iteration cap reached)" } else { "" }
            );
        }
        Command::Evaluate {
            manifest,
            models,
            max_iterations,
        } => {
            override_vec(&mut cfg.paths.test, &manifest);
            apply_models(&mut cfg, &models, max_iterations);
            cfg.validate()?;
            let m = load_models(&cfg)?;
            let examples = load_all(&cfg.paths.test)?;
            create_out(&cfg)?;
            let opts = EvalOptions {
                pipeline: cfg.pipeline.clone(),
                workers: cfg.effective_workers(),
                ..EvalOptions::default()
            };
            let report = evaluate(&examples, &m, &opts)?;
            report.write(&cfg.out)?;
            print!("{}", report.table());
        }
    }
    record_config(&cfg, name)
}

fn apply_models(cfg: &mut RunConfig, models: &ModelPaths, max_iterations: Option<usize>) {
    override_opt(&mut cfg.paths.stage1, &models.stage1);
    override_opt(&mut cfg.paths.stop, &models.stop);
    override_opt(&mut cfg.paths.stage2, &models.stage2);
    if let Some(n) = max_iterations {
        cfg.pipeline.max_iterations = n;
    }
}

/// The decision threshold comes from the run config, not the checkpoint.
fn load_models(cfg: &RunConfig) -> Result<Models> {
    let mut m = Models::load(
        required(&cfg.paths.stage1, "stage1")?,
        required(&cfg.paths.stop, "stop")?,
        cfg.paths.stage2.as_deref(),
    )?;
    m.stop.set_threshold(cfg.stop.threshold)?;
    Ok(m)
}
