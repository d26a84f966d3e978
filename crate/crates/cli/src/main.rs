use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use ctxfair::data::Schema;
use ctxfair::harness::ModelKind;
use ctxfair::mmd::Estimator;
use ctxfair::pipeline::{self, PipelineError, RunConfig, Source};
use ctxfair::synth::{generate_collection, write_collection_csv, SynthSpec};

/// Group fairness of income classifiers across contexts.
#[derive(Parser)]
#[command(name = "ctxfair", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-context group and label statistics (stats.csv).
    Stats(RunArgs),
    /// Local and global deployment experiments (cells.csv, summary.csv, run.json).
    Matrix(RunArgs),
    /// Pairwise context MMD and the global-vs-local scatter.
    Mmd {
        #[command(flatten)]
        run: RunArgs,
        /// Skip scatter.csv, which needs a previous `matrix` run in --out.
        #[arg(long)]
        no_scatter: bool,
    },
    /// Merge the artifacts in --out into report.json.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// stats, matrix, mmd and report in sequence.
    Run(RunArgs),
    /// Write a synthetic collection as CSV files plus schema.toml.
    Synth {
        #[arg(long)]
        synth_spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a preset synthetic spec as JSON.
    Spec {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long, default_value_t = 10)]
        contexts: usize,
        #[arg(long, default_value_t = 2000)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Shift,
    Heterogeneous,
    Bias,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Vanilla,
    Fair,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Biased,
    Unbiased,
}

#[derive(Args)]
#[command(group(ArgGroup::new("input").required(true).args(["data_dir", "synth_spec"])))]
struct RunArgs {
    /// Directory of per-context CSV files (US.csv is the global dataset).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// JSON synthetic collection spec.
    #[arg(long)]
    synth_spec: Option<PathBuf>,
    /// TOML schema; defaults to the income schema for --data-dir.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "vanilla")]
    model: ModelArg,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "biased")]
    estimator: EstimatorArg,
    /// Worker threads; all cores by default.
    #[arg(long)]
    jobs: Option<usize>,
    /// Stratified row cap for each global training set.
    #[arg(long)]
    row_cap: Option<usize>,
    /// Comma-separated context ids to use instead of all.
    #[arg(long, value_delimiter = ',')]
    contexts: Vec<String>,
    /// Contexts never pooled into global training sets.
    #[arg(long, value_delimiter = ',', default_value = "PR")]
    exclude: Vec<String>,
    /// L2 strength.
    #[arg(long)]
    l2: Option<f64>,
    /// Prejudice-remover strength.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Drop categories seen fewer times than this when fitting an encoder.
    #[arg(long, default_value_t = 0)]
    min_category_count: usize,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, PipelineError> {
        let source = match (&self.data_dir, &self.synth_spec) {
            (Some(dir), None) => Source::DataDir(dir.clone()),
            (None, Some(path)) => Source::Synth(SynthSpec::from_path(path)?),
            _ => {
                return Err(PipelineError::Config(
                    "give exactly one of --data-dir and --synth-spec".into(),
                ))
            }
        };
        let mut cfg = RunConfig::new(source, &self.out);
        if let Some(path) = &self.schema {
            cfg.schema =
                Some(Schema::from_path(path).map_err(|e| PipelineError::Config(e.to_string()))?);
        }
        let exp = &mut cfg.experiment;
        exp.model = match self.model {
            ModelArg::Vanilla => ModelKind::Vanilla,
            ModelArg::Fair => ModelKind::Fair,
        };
        exp.folds = self.folds;
        exp.seed = self.seed;
        exp.trainer.seed = self.seed;
        exp.row_cap = self.row_cap;
        exp.contexts = self.contexts.clone();
        exp.global_exclusions = self.exclude.clone();
        exp.encoder.min_category_count = self.min_category_count;
        if let Some(v) = self.l2 {
            exp.trainer.l2 = v;
        }
        if let Some(v) = self.eta {
            exp.trainer.eta = v;
        }
        if let Some(v) = self.max_iter {
            exp.trainer.max_iter = v;
        }
        exp.validate()?;
        cfg.estimator = match self.estimator {
            EstimatorArg::Biased => Estimator::Biased,
            EstimatorArg::Unbiased => Estimator::Unbiased,
        };
        Ok(cfg)
    }
}

const EXIT_PARTIAL: u8 = 3;

fn matrix(cfg: &RunConfig) -> Result<u8, PipelineError> {
    let outcome = pipeline::cmd_matrix(cfg)?;
    eprintln!(
        "wrote {} cells to {}",
        outcome.records.len(),
        cfg.out.display()
    );
    if outcome.failures.is_empty() {
        Ok(0)
    } else {
        for f in &outcome.failures {
            eprintln!("skipped {} ({}): {}", f.context, f.scope, f.message);
        }
        Ok(EXIT_PARTIAL)
    }
}

fn write_synth(spec_path: &Path, out: &Path) -> Result<u8, PipelineError> {
    let spec = SynthSpec::from_path(spec_path)?;
    let coll = generate_collection(&spec)?;
    write_collection_csv(&coll, out)?;
    let schema_path = out.join("schema.toml");
    std::fs::write(&schema_path, spec.schema().to_toml_string()).map_err(|source| {
        PipelineError::Output {
            path: schema_path,
            source,
        }
    })?;
    eprintln!("wrote {} contexts to {}", coll.len(), out.display());
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8, PipelineError> {
    match cli.command {
        Command::Stats(args) => {
            let cfg = args.config()?;
            pipeline::with_jobs(args.jobs, || pipeline::cmd_stats(&cfg))??;
            Ok(0)
        }
        Command::Matrix(args) => {
            let cfg = args.config()?;
            pipeline::with_jobs(args.jobs, || matrix(&cfg))?
        }
        Command::Mmd { run, no_scatter } => {
            let cfg = run.config()?;
            pipeline::with_jobs(run.jobs, || pipeline::cmd_mmd(&cfg, !no_scatter))??;
            Ok(0)
        }
        Command::Report { out } => {
            pipeline::cmd_report(&out)?;
            Ok(0)
        }
        Command::Run(args) => {
            let cfg = args.config()?;
            pipeline::with_jobs(args.jobs, || -> Result<u8, PipelineError> {
                pipeline::cmd_stats(&cfg)?;
                let code = matrix(&cfg)?;
                pipeline::cmd_mmd(&cfg, true)?;
                pipeline::cmd_report(&cfg.out)?;
                Ok(code)
            })?
        }
        Command::Synth { synth_spec, out } => write_synth(&synth_spec, &out),
        Command::Spec {
            preset,
            contexts,
            rows,
            seed,
        } => {
            let spec = match preset {
                Preset::Shift => SynthSpec::shift_levels(contexts, rows, 0.2, seed),
                Preset::Heterogeneous => SynthSpec::heterogeneous(contexts, rows, seed),
                Preset::Bias => SynthSpec::planted_bias(contexts, rows, seed),
            };
            println!("{}", spec.to_json());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage problems are configuration errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
