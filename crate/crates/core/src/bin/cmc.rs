use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmc::pipeline::{run_all, run_command, Command, Context, ExitKind, PipelineError, RunConfig};

#[derive(Parser)]
#[command(name = "cmc", version, about = "Confidence circuit discovery and recalibration on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Build the planted model and a synthetic record set
    Synthesize,
    /// EAP-IG over bucket-1 pairs; writes edge and component scores
    Attribute,
    /// Faithfulness, completeness and ablation battery
    Validate,
    /// Reference-mean and steering plans plus the alpha sweep
    Intervene,
    /// ECE, Brier and reliability bins of verbalised confidences
    Calibrate,
    /// Heatmap CSV and a JSON bundle of every report present
    Report,
    /// Every command above, in order
    Run,
}

#[derive(Args)]
struct Opts {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, env = "CMC_SEED")]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long, global = true, env = "CMC_WORKERS")]
    workers: Option<usize>,
    /// Bucket threshold on delta TSLD
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Comma-separated steering strengths
    #[arg(long, global = true, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    /// Circuit size in edges
    #[arg(long, global = true)]
    top_k: Option<usize>,
    #[arg(long, global = true)]
    bins: Option<usize>,
    /// JSONL records to use instead of the synthesized set
    #[arg(long, global = true)]
    records: Option<PathBuf>,
}

fn context(opts: Opts) -> Result<Context, PipelineError> {
    let mut config = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = opts.seed {
        config.seed = s;
    }
    if let Some(t) = opts.tau {
        config.tau = t;
    }
    if let Some(g) = opts.alpha_grid {
        config.alpha_grid = g;
    }
    if let Some(k) = opts.top_k {
        config.top_k = Some(k);
    }
    if let Some(b) = opts.bins {
        config.bins = b;
    }
    if let Some(w) = opts.workers {
        if w == 0 {
            return Err(PipelineError::usage("workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| PipelineError::usage(e.to_string()))?;
    }
    Ok(Context {
        config,
        out: opts.out,
        records: opts.records,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", PipelineError::usage(first).to_json_line());
            return ExitCode::from(ExitKind::Usage as u8);
        }
    };
    let result = context(cli.opts).and_then(|ctx| match cli.command {
        Cmd::Run => run_all(&ctx),
        Cmd::Synthesize => run_command(&ctx, Command::Synthesize),
        Cmd::Attribute => run_command(&ctx, Command::Attribute),
        Cmd::Validate => run_command(&ctx, Command::Validate),
        Cmd::Intervene => run_command(&ctx, Command::Intervene),
        Cmd::Calibrate => run_command(&ctx, Command::Calibrate),
        Cmd::Report => run_command(&ctx, Command::Report),
    });
    match result {
        Ok(o) if o.passed => ExitCode::SUCCESS,
        Ok(_) => {
            let e = PipelineError {
                kind: ExitKind::Validation,
                tag: "validation_failed",
                message: "circuit faithfulness below threshold; see validation.json".into(),
            };
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.code() as u8)
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.code() as u8)
        }
    }
}
