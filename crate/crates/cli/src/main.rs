use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crosstask_cli::commands::{cmd_classify, cmd_distill, cmd_eval, cmd_train};
use crosstask_cli::config::RunConfig;
use crosstask_cli::synth::{cmd_synth, SynthOptions};
use crosstask_cli::CliError;
use crosstask_core::models::{EmbedderVariant, ModelKind, Strategy};
use crosstask_core::training::{Combine, OptimizerConfig};

#[derive(Parser)]
#[command(name = "crosstask", version, about = "Cross-task acoustic scene classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic scene corpus with manifest.csv.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        scenes: usize,
        #[arg(long, default_value_t = 40)]
        clips_per_scene: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        min_seconds: f64,
        #[arg(long, default_value_t = 10.0)]
        max_seconds: f64,
        #[arg(long, default_value_t = 4)]
        folds: u32,
    },
    /// Train a model on hard labels.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a Base student from 1-3 teacher model files.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        /// Teacher model file; repeat for an ensemble.
        #[arg(long = "teacher", required = true)]
        teachers: Vec<PathBuf>,
        #[arg(long)]
        combine: Option<Combine>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Per-class and macro accuracy of a model on a manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Machine-readable CSV output.
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        feature_cache: Option<PathBuf>,
    },
    /// Classify one WAV file.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        wav: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, visible_alias = "student-out")]
    model_out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    feature_cache: Option<PathBuf>,
    #[arg(long)]
    eval_fold: Option<u32>,
    #[arg(long)]
    kfold: Option<u32>,
    #[arg(long)]
    kind: Option<ModelKind>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long, value_parser = parse_embedder)]
    embedder: Option<EmbedderVariant>,
    #[arg(long)]
    scale_factor: Option<f64>,
    #[arg(long)]
    attn_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    n_mels: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed Adam learning rate.
    #[arg(long, conflicts_with = "warmup")]
    lr: Option<f64>,
    /// Use the warmup schedule instead of a fixed rate.
    #[arg(long)]
    warmup: bool,
    #[arg(long, requires = "warmup")]
    warmup_n: Option<u64>,
    #[arg(long, requires = "warmup")]
    warmup_k: Option<f64>,
    /// Exponent applied to d_model in the warmup schedule.
    #[arg(long, requires = "warmup", allow_hyphen_values = true)]
    lr_exponent: Option<f64>,
}

fn parse_embedder(s: &str) -> Result<EmbedderVariant, String> {
    match s.replace('-', "_").as_str() {
        "surrogate" => Ok(EmbedderVariant::Surrogate),
        "file_backed" => Ok(EmbedderVariant::FileBacked),
        other => Err(format!("unknown embedder `{other}`")),
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        let p = &mut cfg.paths;
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
            (opt $src:expr => $dst:expr) => {
                if $src.is_some() {
                    $dst = $src.clone();
                }
            };
        }
        set!(opt self.manifest => p.manifest);
        set!(opt self.model_out => p.model_out);
        set!(opt self.log => p.log);
        set!(opt self.feature_cache => p.feature_cache);
        set!(opt self.eval_fold => p.eval_fold);
        set!(opt self.kfold => p.kfold);
        let m = &mut cfg.model;
        set!(self.kind => m.kind);
        set!(self.strategy => m.strategy);
        set!(self.embedder => m.embedder.variant);
        set!(self.scale_factor => m.scale_factor);
        set!(self.attn_layers => m.attn_layers);
        set!(self.dropout => m.dropout);
        set!(self.n_mels => cfg.features.n_mels);
        let t = &mut cfg.training;
        set!(self.epochs => t.epochs);
        set!(self.batch_size => t.batch_size);
        set!(self.seed => t.seed);
        if let Some(lr) = self.lr {
            t.optimizer = OptimizerConfig::AdamFixed { lr };
        }
        if self.warmup {
            if !matches!(t.optimizer, OptimizerConfig::AdamWarmup { .. }) {
                t.optimizer = OptimizerConfig::warmup();
            }
            if let OptimizerConfig::AdamWarmup {
                k,
                warmup_n,
                exponent,
                ..
            } = &mut t.optimizer
            {
                set!(self.warmup_n => *warmup_n);
                set!(self.warmup_k => *k);
                set!(self.lr_exponent => *exponent);
            }
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Synth {
            out: dir,
            scenes,
            clips_per_scene,
            seed,
            min_seconds,
            max_seconds,
            folds,
        } => {
            let opts = SynthOptions {
                n_scenes: scenes,
                clips_per_scene,
                seed,
                min_seconds,
                max_seconds,
                folds,
                ..SynthOptions::default()
            };
            let manifest = cmd_synth(&dir, &opts)?;
            let _ = writeln!(
                out,
                "wrote {} clips to {}",
                manifest.len(),
                dir.join("manifest.csv").display()
            );
        }
        Command::Train { run } => {
            cmd_train(&run.resolve()?, &mut out)?;
        }
        Command::Distill {
            run,
            teachers,
            combine,
            temperature,
        } => {
            let mut cfg = run.resolve()?;
            cfg.paths.teachers = teachers;
            if let Some(c) = combine {
                cfg.training.teacher_combine = c;
            }
            if let Some(t) = temperature {
                cfg.training.distill_temperature = t;
            }
            cmd_distill(&cfg, &mut out)?;
        }
        Command::Eval {
            model,
            manifest,
            csv,
            feature_cache,
        } => {
            cmd_eval(&model, &manifest, csv, feature_cache.as_deref(), &mut out)?;
        }
        Command::Classify { model, wav } => {
            cmd_classify(&model, &wav, &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
