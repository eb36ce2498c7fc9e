use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mtdm::cache::{read_cache, source_hash, write_cache};
use mtdm::config::RunConfig;
use mtdm::error::{Error, Result};
use mtdm::eval::{evaluate, explain_query, Target};
use mtdm::graph::{parse_dataset, DatasetSplit};
use mtdm::model::{load_checkpoint, save_checkpoint, ModelState};
use mtdm::synthetic;
use mtdm::training::train;
use mtdm::TrainScalar;

#[derive(Parser)]
#[command(name = "mtdm", about = "Temporal knowledge graph extrapolation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory with train/valid/test/stat files.
    #[arg(long, conflicts_with_all = ["cache", "synthetic"])]
    data: Option<PathBuf>,
    /// Preprocessed dataset cache produced by `mtdm preprocess`.
    #[arg(long, conflicts_with = "synthetic")]
    cache: Option<PathBuf>,
    /// Use the built-in periodic dataset instead of files.
    #[arg(long)]
    synthetic: bool,
}

impl DataArgs {
    fn load(&self) -> Result<DatasetSplit> {
        if self.synthetic {
            return Ok(synthetic::generate());
        }
        if let Some(path) = &self.cache {
            return Ok(read_cache(path)?.0);
        }
        if let Some(dir) = &self.data {
            return parse_dataset(dir);
        }
        Err(Error::Config(
            "no dataset: pass --data, --cache or --synthetic".into(),
        ))
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file; MTDM_* environment variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.apply(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

#[derive(Args, Default)]
struct ModelFlags {
    /// Drop the transient path; decode from the evolutional state alone.
    #[arg(long = "no-tln")]
    no_tln: bool,
    /// Drop the evolutional path; decode from deep memory and the
    /// transient path.
    #[arg(long = "no-tren")]
    no_tren: bool,
    /// Encode deep memory from an empty graph.
    #[arg(long = "no-dm")]
    no_dm: bool,
    /// Skip the per-step reset gate.
    #[arg(long = "no-reset-gate")]
    no_reset_gate: bool,
    /// Chain each step's structural encoder from the previous step's output.
    #[arg(long = "recurrent-mode")]
    recurrent_mode: bool,
    /// Train with dissolution negatives (sets lambda4 = 0.01 unless the
    /// config chose another weight).
    #[arg(long)]
    dissolution: bool,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.no_tln |= self.no_tln;
        cfg.no_tren |= self.no_tren;
        cfg.no_dm |= self.no_dm;
        cfg.no_reset_gate |= self.no_reset_gate;
        if self.recurrent_mode {
            cfg.mode = mtdm::model::TrenMode::Recurrent;
        }
        if self.dissolution && cfg.lambda4 == 0.0 {
            cfg.lambda4 = 0.01;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a dataset directory into a binary cache.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: ModelFlags,
        /// Checkpoint output path.
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL epoch log; one record per epoch.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Print the resolved configuration and exit without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint: MRR and Hits@{1,3,10}, filtered, both
    /// directions.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: ModelFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split to score.
        #[arg(long, default_value = "test")]
        target: String,
    },
    /// Score one (subject, relation) query and show the top candidates.
    Explain {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: ModelFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        subject: usize,
        /// Relation id in the inverse-augmented space (base id, or base id
        /// plus the relation count for the reverse direction).
        #[arg(long)]
        relation: usize,
        /// Prediction timestamp.
        #[arg(long)]
        time: usize,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
}

fn parse_target(s: &str) -> Result<Target> {
    match s {
        "test" => Ok(Target::Test),
        "valid" => Ok(Target::Valid),
        _ => Err(Error::Config(format!(
            "target: expected test or valid, got {s:?}"
        ))),
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Preprocess { data, out } => {
            let split = parse_dataset(&data)?;
            let hash = source_hash(&data)?;
            write_cache(&out, &split, &hash)?;
            println!(
                "cached {} train / {} valid / {} test facts ({} entities, {} relations)",
                split.train.len(),
                split.valid.len(),
                split.test.len(),
                split.num_entities,
                split.num_relations
            );
            println!("source sha256: {hash}");
        }
        Command::Train {
            data,
            config,
            flags,
            checkpoint,
            log,
            dry_run,
        } => {
            let mut cfg = config.load()?;
            flags.apply(&mut cfg);
            print!("{}", cfg.resolved());
            if dry_run {
                return Ok(());
            }
            let split = data.load()?;
            let mc = cfg.model_config(split.num_entities, split.num_relations * 2);
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
            let mut model: ModelState<TrainScalar> = ModelState::init(mc, &mut rng);

            let mut log_file = match &log {
                Some(path) => Some(std::fs::File::create(path)?),
                None => None,
            };
            let report = train(
                &mut model,
                &split,
                &cfg.train_config(),
                log_file.as_mut().map(|f| f as &mut dyn std::io::Write),
            )?;
            save_checkpoint(&checkpoint, &model)?;
            println!(
                "trained {} epochs; best validation MRR {}",
                report.epochs_run,
                report
                    .best_valid_mrr
                    .map(|m| format!("{m:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
            println!("checkpoint written to {}", checkpoint.display());
        }
        Command::Eval {
            data,
            config,
            flags,
            checkpoint,
            target,
        } => {
            let mut cfg = config.load()?;
            flags.apply(&mut cfg);
            let split = data.load()?;
            let model: ModelState<TrainScalar> = load_checkpoint(&checkpoint)?;
            let opts = cfg.eval_options(parse_target(&target)?);
            let metrics = evaluate(&model, &split, &opts)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Explain {
            data,
            config,
            flags,
            checkpoint,
            subject,
            relation,
            time,
            top,
        } => {
            let mut cfg = config.load()?;
            flags.apply(&mut cfg);
            let split = data.load()?;
            let model: ModelState<TrainScalar> = load_checkpoint(&checkpoint)?;
            let opts = cfg.eval_options(Target::Test);
            let ranked = explain_query(&model, &split, subject, relation, time, top, &opts)?;
            for (i, r) in ranked.iter().enumerate() {
                println!(
                    "{:>2}. entity {:<6} score {:.4}{}",
                    i + 1,
                    r.entity,
                    r.score,
                    if r.gold { "  (true)" } else { "" }
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
