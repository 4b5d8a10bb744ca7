use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use csrnet::cli::{self, RunConfig};
use csrnet::data;
use csrnet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "csrnet",
    version,
    about = "Single-image super-resolution on the CPU"
)]
struct Cli {
    /// Worker threads (falls back to CSRNET_THREADS, then all cores).
    #[arg(long, global = true, env = "CSRNET_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=4))]
    scale: Option<u8>,

    /// Model variant: full, eeb_only, oeb_no_serial, oeb_no_residual, plain_convs.
    #[arg(long)]
    variant: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_assignment(o)
                .map_err(|e| Error::Config(format!("--set {o}: {e}")))?;
        }
        if let Some(s) = self.seed {
            cfg.set("data.seed", &s.to_string())?;
        }
        if let Some(s) = self.scale {
            cfg.set("model.scale", &s.to_string())?;
        }
        if let Some(v) = &self.variant {
            cfg.set("model.variant", v)?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Bicubic,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes logs and checkpoints to log.out_dir.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training data root (HR/ and optionally LR_x{s}/).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint and/or the bicubic baseline on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset root (HR/ and optionally LR_x{s}/).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        baseline: Option<Baseline>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Super-resolve one PNG.
    Sr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Fail unless the checkpoint was trained for this scale.
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=4))]
        scale: Option<u8>,
    },
    /// Write bicubic LR images and a manifest for a directory of HR PNGs.
    Degrade {
        #[arg(long)]
        hr: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=4))]
        scale: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's header, parameters and integrity status.
    Inspect { checkpoint: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train { config, data, out } => {
            let mut cfg = config.resolve()?;
            if let Some(d) = data {
                cfg.data.train_dir = d;
            }
            if let Some(o) = out {
                cfg.log.out_dir = o;
            }
            let summary = cli::train(&cfg)?;
            println!(
                "trained {} iterations; final loss {}; outputs in {}",
                summary.iterations,
                summary.final_loss.map_or("-".into(), |l| l.to_string()),
                summary.out_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            baseline,
            out,
            config,
        } => {
            let mut cfg = config.resolve()?;
            let mut model = match &checkpoint {
                Some(p) => {
                    let (g, mcfg) = cli::load_model(p, config.scale.map(usize::from))?;
                    cfg.model = mcfg;
                    Some(g)
                }
                None => None,
            };
            if model.is_none() && baseline.is_none() {
                return Err(Error::Config(
                    "nothing to evaluate: pass --checkpoint and/or --baseline".into(),
                ));
            }
            cfg.validate()?;
            let report = cli::evaluate(
                model.as_mut(),
                &data,
                cfg.model.scale,
                &cfg.eval_protocol(),
                baseline.is_some(),
            )?;
            let table = report.to_tsv();
            print!("{table}");
            if let Some(p) = out {
                std::fs::write(&p, &table).map_err(|e| Error::Io { path: p, source: e })?;
            }
        }
        Command::Sr {
            checkpoint,
            input,
            output,
            scale,
        } => {
            let (mut g, _) = cli::load_model(&checkpoint, scale.map(usize::from))?;
            let img = data::load_image(&input)?;
            let sr = cli::super_resolve(&mut g, &img)?;
            data::save_image(&sr, &output)?;
            println!("{}\t{}x{}", output.display(), sr.width, sr.height);
        }
        Command::Degrade { hr, scale, out } => {
            let m = cli::degrade_dir(&hr, scale as usize, &out)?;
            for (path, why) in &m.failures {
                eprintln!("skipped {}: {why}", path.display());
            }
            println!("{}", m.path.display());
        }
        Command::Inspect { checkpoint } => print!("{}", cli::inspect(&checkpoint)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
