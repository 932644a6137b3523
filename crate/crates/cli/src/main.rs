use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use slu_core::corpus::{load_manifest, save_manifest};
use slu_core::eval::evaluate;
use slu_core::experiments::{
    build_model, emit_plot_data, experiment_vocabulary, load_cv_report, load_sweep, run_cross_validation,
    sweep_real_speakers, sweep_synthetic_speakers, Dtype, ExperimentConfig, RealSweepResult, StoredSweep,
    SweepResult, SweepVariable,
};
use slu_core::frontend::FeatureStore;
use slu_core::model::{load_model, save_encoder, save_model_with, BeamConfig, Encoder};
use slu_core::pretrain::{load_asr_manifest, pretrain_encoder, save_asr_manifest};
use slu_core::semantics::LabelVariant;
use slu_core::synth::{
    default_inventory, load_text_dataset, save_text_dataset, synthesize_corpus, CommandTts, InventoryConfig, MockTts,
    SynthesisPlan, TtsAdapter, TtsVoice, VoiceStyle,
};
use slu_core::toy::{build_asr_corpus, build_toy_corpus, fixed_slot_grammar, open_slot_grammar};
use slu_core::train::{track_best, train, write_history};
use slu_core::Scalar;

#[derive(Parser)]
#[command(name = "slu", version, about = "Train spoken language understanding models on synthetic speech")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set train.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
            .with_context(|| format!("loading {}", self.config.display()))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Voices {
    Synthetic,
    Real,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grammar {
    Fixed,
    Open,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled text dataset with every selected voice.
    Synthesize {
        /// CSV with header id,transcript,label.
        #[arg(long)]
        text: PathBuf,
        /// Directory receiving the audio.
        #[arg(long)]
        out: PathBuf,
        /// Manifest path; `<out>/manifest.csv` by default.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value_t = 16_000)]
        sample_rate: u32,
        /// Mock voices to use.
        #[arg(long, value_enum, default_value = "synthetic")]
        voices: Voices,
        /// External synthesizer instead of the mock; arguments may contain
        /// {text}, {voice} and {out}.
        #[arg(long)]
        command: Option<PathBuf>,
        #[arg(long = "arg", allow_hyphen_values = true)]
        command_args: Vec<String>,
        /// Voice ids offered by the external synthesizer.
        #[arg(long = "voice")]
        voice_ids: Vec<String>,
    },
    /// Write the built-in toy grammars and their mock renderings.
    ToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "fixed")]
        grammar: Grammar,
        #[arg(long, default_value_t = 8000)]
        sample_rate: u32,
        /// Real-style voices held out in `real_test.csv`; the others go to
        /// `real_train.csv`.
        #[arg(long, default_value_t = 4)]
        test_voices: usize,
        /// Also render this many phone-aligned utterances for pre-training.
        #[arg(long, default_value_t = 0)]
        asr: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pre-train an encoder on phone-aligned speech.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// CSV with header id,audio_path,alignment.
        #[arg(long)]
        asr: PathBuf,
        /// Encoder checkpoint to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and save it.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training manifest; `data.synthetic` by default.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Evaluation manifest; `data.test` by default.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Model checkpoint to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact-match accuracy and loss of a saved model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Load weights in double precision.
        #[arg(long)]
        f64: bool,
    },
    /// Run the speaker-count sweep described by the configuration.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Cross-validate with and without synthetic augmentation.
    Cv {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Summarize stored results and write plot data.
    Report {
        /// Experiment directory (`<results_dir>/<name>`).
        dir: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Synthesize {
            text,
            out,
            manifest,
            name,
            sample_rate,
            voices,
            command,
            command_args,
            voice_ids,
        } => {
            let (variant, rows) = load_text_dataset(&text)?;
            let adapter: Box<dyn TtsAdapter> = match command {
                Some(program) => {
                    if voice_ids.is_empty() {
                        bail!("an external synthesizer needs at least one --voice");
                    }
                    Box::new(CommandTts {
                        name: program.display().to_string(),
                        program,
                        args: command_args,
                        voices: voice_ids
                            .iter()
                            .map(|v| TtsVoice {
                                voice_id: v.clone(),
                                backend: "command".into(),
                                style_params: Default::default(),
                            })
                            .collect(),
                        sample_rate,
                    })
                }
                None => Box::new(MockTts::with_inventory(&InventoryConfig::default(), sample_rate)),
            };
            let ids: Vec<String> = if !voice_ids.is_empty() {
                voice_ids
            } else {
                default_inventory(&InventoryConfig::default())
                    .into_iter()
                    .filter(|s| match voices {
                        Voices::Synthetic => s.style == VoiceStyle::Synthetic,
                        Voices::Real => s.style == VoiceStyle::Real,
                        Voices::All => true,
                    })
                    .map(|s| s.voice.voice_id)
                    .collect()
            };
            let plan = SynthesisPlan {
                name,
                label_variant: variant,
                source: rows,
                voice_ids: ids,
                output_dir: out.clone(),
            };
            let m = synthesize_corpus(adapter.as_ref(), &plan)?;
            let path = manifest.unwrap_or_else(|| out.join("manifest.csv"));
            save_manifest(&m, &path)?;
            println!("{} utterances -> {}", m.records.len(), path.display());
        }
        Command::ToyData {
            out,
            grammar,
            sample_rate,
            test_voices,
            asr,
            seed,
        } => {
            let (rows, variant) = match grammar {
                Grammar::Fixed => (fixed_slot_grammar(), LabelVariant::FixedSlot),
                Grammar::Open => (open_slot_grammar(), LabelVariant::OpenSlot),
            };
            save_text_dataset(&rows, out.join("text.csv"))?;
            let corpus = build_toy_corpus(&rows, variant, &InventoryConfig::default(), sample_rate, &out.join("audio"))?;
            save_manifest(&corpus.synthetic, out.join("synthetic.csv"))?;
            save_manifest(&corpus.real, out.join("real.csv"))?;
            let voices = corpus.real.speakers();
            if test_voices >= voices.len() {
                bail!("--test-voices must leave at least one of {} real-style voices for training", voices.len());
            }
            let split = voices.len() - test_voices;
            save_manifest(&corpus.real.filter_speakers(&voices[..split]), out.join("real_train.csv"))?;
            save_manifest(&corpus.real.filter_speakers(&voices[split..]), out.join("real_test.csv"))?;
            println!(
                "{} transcripts, {} synthetic and {} real utterances in {}",
                rows.len(),
                corpus.synthetic.records.len(),
                corpus.real.records.len(),
                out.display()
            );
            if asr > 0 {
                let m = build_asr_corpus(asr, seed, sample_rate, &out)?;
                save_asr_manifest(&m, out.join("asr.csv"))?;
                println!("{asr} phone-aligned utterances -> {}", out.join("asr.csv").display());
            }
        }
        Command::Pretrain { config, asr, out } => {
            let cfg = config.load()?;
            match cfg.dtype {
                Dtype::F32 => pretrain::<f32>(&cfg, &asr, &out)?,
                Dtype::F64 => pretrain::<f64>(&cfg, &asr, &out)?,
            }
        }
        Command::Train {
            config,
            train,
            test,
            out,
        } => {
            let cfg = config.load()?;
            match cfg.dtype {
                Dtype::F32 => train_one::<f32>(&cfg, train, test, &out)?,
                Dtype::F64 => train_one::<f64>(&cfg, train, test, &out)?,
            }
        }
        Command::Evaluate {
            model,
            manifest,
            beam_width,
            max_len,
            f64,
        } => {
            if f64 {
                evaluate_saved::<f64>(&model, &manifest, beam_width, max_len)?
            } else {
                evaluate_saved::<f32>(&model, &manifest, beam_width, max_len)?
            }
        }
        Command::Sweep { config } => {
            let cfg = config.load()?;
            let variable = cfg.sweep.as_ref().context("the configuration has no [sweep] section")?.variable;
            let dir = cfg.experiment_dir();
            match (variable, cfg.dtype) {
                (SweepVariable::NSyntheticSpeakers, Dtype::F32) => report_synthetic(&sweep_synthetic_speakers::<f32>(&cfg)?, &dir)?,
                (SweepVariable::NSyntheticSpeakers, Dtype::F64) => report_synthetic(&sweep_synthetic_speakers::<f64>(&cfg)?, &dir)?,
                (SweepVariable::NRealSpeakers, Dtype::F32) => report_real(&sweep_real_speakers::<f32>(&cfg)?, &dir)?,
                (SweepVariable::NRealSpeakers, Dtype::F64) => report_real(&sweep_real_speakers::<f64>(&cfg)?, &dir)?,
            }
        }
        Command::Cv { config } => {
            let cfg = config.load()?;
            let report = match cfg.dtype {
                Dtype::F32 => run_cross_validation::<f32>(&cfg)?,
                Dtype::F64 => run_cross_validation::<f64>(&cfg)?,
            };
            print!("{}", report.table());
        }
        Command::Report { dir } => {
            let mut found = false;
            if dir.join("sweep.json").exists() {
                found = true;
                match load_sweep(&dir)? {
                    StoredSweep::Real(r) => report_real(&r, &dir)?,
                    StoredSweep::Synthetic(s) => report_synthetic(&s, &dir)?,
                }
            }
            if dir.join("cv.json").exists() {
                found = true;
                print!("{}", load_cv_report(&dir)?.table());
            }
            if !found {
                bail!("{} holds neither sweep.json nor cv.json", dir.display());
            }
        }
    }
    Ok(())
}

fn pretrain<T: Scalar>(cfg: &ExperimentConfig, asr: &Path, out: &Path) -> Result<()> {
    let m = load_asr_manifest(asr)?;
    let store = FeatureStore::<T>::new(cfg.features.clone());
    let mut encoder = Encoder::<T>::from_seed(cfg.model.encoder.clone(), cfg.pretrain.seed)?;
    let report = pretrain_encoder(&mut encoder, &m, &cfg.pretrain, &store)?;
    save_encoder(&encoder, &cfg.features, out)?;
    println!(
        "held-out frame cross-entropy {:.4} -> {:.4}, phone accuracy {:.3} -> {:.3}; encoder -> {}",
        report.initial_loss,
        report.final_loss,
        report.initial_accuracy,
        report.final_accuracy,
        out.display()
    );
    Ok(())
}

fn train_one<T: Scalar>(cfg: &ExperimentConfig, train_m: Option<PathBuf>, test_m: Option<PathBuf>, out: &Path) -> Result<()> {
    let train_path = train_m
        .or_else(|| cfg.data.synthetic.clone())
        .context("give --train or set data.synthetic")?;
    let test_path = test_m.or_else(|| cfg.data.test.clone()).context("give --test or set data.test")?;
    let train_m = load_manifest(&train_path)?;
    let test_m = load_manifest(&test_path)?;
    let vocab = experiment_vocabulary(&[&train_m, &test_m])?;
    let mut model = build_model::<T>(cfg, &vocab, cfg.train.seed)?;
    let store = FeatureStore::<T>::new(cfg.features.clone());
    let history = train(&mut model, &train_m, &test_m, &cfg.train, &store)?;
    let (best_acc, best_loss) = track_best(&history)?;
    let extra = serde_json::json!({
        "config": cfg,
        "train_manifest": train_path,
        "test_manifest": test_path,
    });
    save_model_with(&model, out, extra)?;
    write_history(&history, out.with_extension("history.jsonl"))?;
    std::fs::write(out.with_extension("config.toml"), cfg.to_toml()?)
        .with_context(|| format!("writing the frozen config next to {}", out.display()))?;
    let last = history.epochs.last().context("no epochs were run")?;
    info!("{} epochs, {} optimizer steps", history.epochs.len(), last.steps);
    println!(
        "final accuracy {:.4}, best accuracy {best_acc:.4}, best loss {best_loss:.4}; model -> {}",
        last.test_accuracy.unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn evaluate_saved<T: Scalar>(model: &Path, manifest: &Path, width: Option<usize>, max_len: Option<usize>) -> Result<()> {
    let model = load_model::<T>(model)?;
    let m = load_manifest(manifest)?;
    let default = model.beam();
    let beam = BeamConfig {
        width: width.unwrap_or(default.width),
        max_len: max_len.unwrap_or(default.max_len),
    };
    let store = FeatureStore::<T>::new(model.features.clone());
    let metrics = evaluate(&model, &m, Some(beam), &store)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn print_points(s: &SweepResult) {
    println!("{} arm", s.arm);
    println!("{:>6} {:>18} {:>18}", "x", "accuracy", "best loss");
    for p in &s.points {
        let loss = p
            .best_loss
            .map(|l| format!("{:.4} ± {:.4}", l.mean, l.std))
            .unwrap_or_else(|| "-".into());
        println!("{:>6} {:>18} {:>18}", p.x, format!("{:.4} ± {:.4}", p.accuracy.mean, p.accuracy.std), loss);
    }
}

fn report_synthetic(s: &SweepResult, dir: &Path) -> Result<()> {
    print_points(s);
    let path = dir.join(format!("plot_{}.txt", s.arm));
    emit_plot_data(s, &path)?;
    println!("plot data -> {}", path.display());
    Ok(())
}

fn report_real(r: &RealSweepResult, dir: &Path) -> Result<()> {
    report_synthetic(&r.real, dir)?;
    if let Some(a) = &r.augmented {
        report_synthetic(a, dir)?;
    }
    for (name, p) in [("all real", &r.all_real), ("all synthetic", &r.all_synthetic)] {
        if let Some(p) = p {
            println!("{name} ({} speakers): {:.4} ± {:.4}", p.x, p.accuracy.mean, p.accuracy.std);
        }
    }
    if let Some(d) = r.delta_beyond_threshold {
        println!("mean augmentation gain beyond 40 speakers: {:+.4}", d);
    }
    Ok(())
}
