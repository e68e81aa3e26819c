//! Command-line front end.
//!
//! Every subcommand resolves one [`PipelineConfig`] (defaults, then the
//! `--config` file, then flags), prints it, writes it to `<out>/config.toml`
//! and runs inside a rayon pool of `--workers` threads.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::avsync::{from_stream_records, interleave, pool_observation, to_stream_records, StreamRecord};
use crate::error::{Error, Result};
use crate::gradcheck::gradient_suite;
use crate::pipeline::{
    ablation_csv, evaluate, generate_episodes, run_ablation, run_pdpo, run_preference_collection_with_dumps, run_sft,
    run_train_rm, EvalMode, MetricsLog, PipelineConfig, Scorer,
};
use crate::policy::{Policy, ValueHead};
use crate::rollout::PreferenceDataset;
use crate::select::PerturbationKind;
use crate::synthenv::{encode_observation, EpisodeSpec};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "PDPO_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pdpo", version, about = "Step-level preference optimization on a synthetic audio-visual environment")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: $PDPO_OUT_DIR, then `runs`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all available cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: Option<u32>,
    /// Overrides the number of training episodes.
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Orm,
    Prm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    OneBest,
    MajorAtN,
    RmAtN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerArg {
    Orm,
    Prm,
    Oracle,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write training and held-out episodes with their observation streams.
    GenData,
    /// Supervised fine-tuning on reference traces.
    Sft,
    /// Collect full-path and step preference pairs with the SFT policy.
    Collect {
        /// gaussian:<eps>, audio_mask or visual_mask.
        #[arg(long)]
        perturbation: Option<PerturbationKind>,
        /// Steps per trace selected for pairwise rollout.
        #[arg(long)]
        top_t: Option<usize>,
        /// Policy checkpoint (default: <out>/sft.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Preference optimization from the SFT checkpoint.
    Pdpo {
        /// Starting and reference checkpoint (default: <out>/sft.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Preference dataset (default: <out>/preferences.jsonl).
        #[arg(long)]
        preferences: Option<PathBuf>,
    },
    /// Train a value head on a frozen checkpoint.
    TrainRm {
        #[arg(long, value_enum, default_value = "prm")]
        head: HeadArg,
        /// Base checkpoint (default: <out>/sft.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out episodes.
    Eval {
        /// Checkpoint to evaluate (default: <out>/sft.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Samples per episode for the sampling modes.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum)]
        scorer: Option<ScorerArg>,
    },
    /// Train with and without reasoning traces and evaluate both ways.
    Ablate,
    /// Print the fused order and pooled observation of one episode.
    AvsyncInspect {
        /// Stream file to read instead of generating an episode.
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Index of the training episode to inspect.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Finite-difference check of every loss.
    CheckGrad {
        #[arg(long, default_value_t = 3)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Parses `argv` (without the program name), runs the subcommand and
/// returns the process exit code.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = std::iter::once(OsString::from("pdpo")).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: --config: {e}");
            return EXIT_USAGE;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.common.workers {
        builder = builder.num_threads(w as usize);
    }
    let result = builder
        .build()
        .map_err(|e| Error::Config(e.to_string()))
        .and_then(|pool| pool.install(|| run(&cli, &cfg)));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

/// Defaults, then the config file, then command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.common.episodes {
        cfg.data.train_episodes = n;
    }
    match &cli.command {
        Command::Collect { perturbation, top_t, .. } => {
            if let Some(p) = perturbation {
                cfg.collection.perturbation = *p;
            }
            if let Some(t) = top_t {
                cfg.collection.top_t = *t;
            }
        }
        Command::Eval { mode, n, scorer, .. } => {
            if let Some(m) = mode {
                cfg.eval.mode = match m {
                    ModeArg::OneBest => EvalMode::OneBest,
                    ModeArg::MajorAtN => EvalMode::MajorAtN,
                    ModeArg::RmAtN => EvalMode::RmAtN,
                };
            }
            if let Some(n) = n {
                cfg.eval.n = *n;
            }
            if let Some(s) = scorer {
                cfg.eval.scorer = match s {
                    ScorerArg::Orm => Scorer::Orm,
                    ScorerArg::Prm => Scorer::Prm,
                    ScorerArg::Oracle => Scorer::Oracle,
                };
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn out_dir(cli: &Cli) -> PathBuf {
    cli.common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn train_episodes(cfg: &PipelineConfig) -> Result<Vec<EpisodeSpec>> {
    let mut c = *cfg;
    c.data.eval_episodes = 0;
    Ok(generate_episodes(&c)?.train)
}

fn run(cli: &Cli, cfg: &PipelineConfig) -> Result<()> {
    let out = out_dir(cli);
    std::fs::create_dir_all(&out)?;
    let text = cfg.to_toml();
    println!("# resolved configuration\n{text}");
    std::fs::write(out.join("config.toml"), &text)?;
    let ckpt = |given: &Option<PathBuf>| given.clone().unwrap_or_else(|| out.join("sft.ckpt"));

    match &cli.command {
        Command::GenData => {
            let set = generate_episodes(cfg)?;
            crate::io::write_jsonl(&out.join("episodes.jsonl"), &set.train)?;
            crate::io::write_jsonl(&out.join("eval_episodes.jsonl"), &set.eval)?;
            let streams = out.join("streams");
            std::fs::create_dir_all(&streams)?;
            for e in set.train.iter().chain(&set.eval) {
                let (v, a) = encode_observation(e, cfg.env.encoding_dim);
                crate::io::write_jsonl(&streams.join(format!("{}.jsonl", e.episode_id)), &to_stream_records(&v, &a))?;
            }
            println!("wrote {} training and {} held-out episodes to {}", set.train.len(), set.eval.len(), out.display());
        }
        Command::Sft => {
            let train = train_episodes(cfg)?;
            let mut metrics = MetricsLog::default();
            let policy = metrics.time("sft", |m| run_sft(cfg, &train, m))?;
            policy.save(&out.join("sft.ckpt"))?;
            metrics.write_named(&out, "sft_")?;
            if let Some(l) = metrics.losses("sft").last() {
                println!("sft final loss {l:.6}");
            }
        }
        Command::Collect { checkpoint, .. } => {
            let policy = Policy::load(&ckpt(checkpoint))?;
            let train = train_episodes(cfg)?;
            let (dataset, stats, dumps) = run_preference_collection_with_dumps(cfg, &policy, &train)?;
            dataset.write_jsonl(&cfg.env.vocab(), &out.join("preferences.jsonl"))?;
            crate::io::write_jsonl(&out.join("susceptibility.jsonl"), &dumps)?;
            write_json(&out.join("collection_stats.json"), &stats)?;
            println!("{}", serde_json::to_string(&stats)?);
        }
        Command::Pdpo { checkpoint, preferences } => {
            let sft = Policy::load(&ckpt(checkpoint))?;
            let prefs = preferences.clone().unwrap_or_else(|| out.join("preferences.jsonl"));
            let dataset = PreferenceDataset::read_jsonl(&cfg.env.vocab(), &prefs)?;
            let train = train_episodes(cfg)?;
            let mut metrics = MetricsLog::default();
            let policy = metrics.time("pdpo", |m| run_pdpo(cfg, &sft, &dataset, &train, m))?;
            policy.save(&out.join("pdpo.ckpt"))?;
            metrics.write_named(&out, "pdpo_")?;
            if let Some(l) = metrics.losses("pdpo").last() {
                println!("pdpo final loss {l:.6}");
            }
        }
        Command::TrainRm { head, checkpoint } => {
            let base = Policy::load(&ckpt(checkpoint))?;
            let train = train_episodes(cfg)?;
            let (head, name) = match head {
                HeadArg::Orm => (ValueHead::Orm, "orm"),
                HeadArg::Prm => (ValueHead::Prm, "prm"),
            };
            let mut metrics = MetricsLog::default();
            let policy = metrics.time(name, |m| run_train_rm(cfg, &base, &train, head, m))?;
            policy.save(&out.join(format!("{name}.ckpt")))?;
            metrics.write_named(&out, &format!("{name}_"))?;
            if let Some(l) = metrics.losses(name).last() {
                println!("{name} final loss {l:.6}");
            }
        }
        Command::Eval { checkpoint, .. } => {
            let policy = Policy::load(&ckpt(checkpoint))?;
            let eval = generate_episodes(cfg)?.eval;
            let res = evaluate(cfg, &policy, &eval, &cfg.eval)?;
            crate::io::write_jsonl(&out.join("eval.jsonl"), &res.records)?;
            let summary = serde_json::json!({
                "mode": res.mode,
                "n": cfg.eval.n,
                "scorer": cfg.eval.scorer,
                "accuracy": res.accuracy,
                "any_correct_rate": res.any_correct_rate(),
                "episodes": res.records.len(),
            });
            write_json(&out.join("eval.json"), &summary)?;
            println!("{summary}");
        }
        Command::Ablate => {
            let set = generate_episodes(cfg)?;
            let mut metrics = MetricsLog::default();
            let rows = metrics.time("ablation", |m| run_ablation(cfg, &set, m))?;
            let csv = ablation_csv(&rows);
            std::fs::write(out.join("ablation.csv"), &csv)?;
            metrics.write_named(&out, "ablation_")?;
            print!("{csv}");
        }
        Command::AvsyncInspect { stream, index } => {
            let (visual, audio) = match stream {
                Some(p) => {
                    let records: Vec<StreamRecord> = crate::io::read_jsonl(p)?;
                    from_stream_records(&records)
                }
                None => {
                    let mut c = *cfg;
                    c.data.train_episodes = index + 1;
                    let e = &train_episodes(&c)?[*index];
                    println!("episode {}", e.episode_id);
                    encode_observation(e, cfg.env.encoding_dim)
                }
            };
            let fused = interleave(&visual, &audio)?;
            let pooled = pool_observation(&fused)?;
            println!("order {}", fused.tag_string());
            let shown: Vec<String> = pooled.iter().map(|x| format!("{x:.6}")).collect();
            println!("pooled [{}]", shown.join(", "));
        }
        Command::CheckGrad { instances, tolerance } => {
            let entries = gradient_suite(cfg.seed, *instances, *tolerance)?;
            let mut failed = 0;
            for e in &entries {
                let r = &e.report;
                println!(
                    "{:<10} instance {} params {:>4} max_rel_error {:.3e} {}",
                    e.loss,
                    e.instance,
                    r.num_params,
                    r.max_rel_error,
                    if r.passed { "PASS" } else { "FAIL" }
                );
                failed += usize::from(!r.passed);
            }
            write_json(&out.join("gradcheck.json"), &entries)?;
            if failed > 0 {
                return Err(Error::Config(format!("{failed} gradient checks exceeded tolerance {tolerance:e}")));
            }
        }
    }
    Ok(())
}
