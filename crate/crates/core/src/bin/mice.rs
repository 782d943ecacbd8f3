use clap::{Parser, Subcommand, ValueEnum};
use mice::baselines::{spherical_kmeans_restarts, two_stage_pipeline};
use mice::checkpoint::{load_checkpoint, save_checkpoint};
use mice::config::{load_config, load_synthetic_spec};
use mice::data::{generate, load_dataset, save_dataset, Dataset};
use mice::numcore::SeededRng;
use mice::report::RunReport;
use mice::trainer::{evaluate, fit_from, init_state, TrainError};
use mice::verify::{self, Suite};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "mice", version, about = "Mixture of contrastive experts clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a run report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Append one JSON line of metrics per epoch.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Cluster a dataset with a trained checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a reference clustering method.
    Baseline {
        #[arg(long, value_enum)]
        which: Baseline,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the built-in property suites; fails if any check fails.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Skmeans,
    TwoStage,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Mmd,
    Gradients,
    Theorems,
    Bound,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Mmd => Suite::Mmd,
            SuiteArg::Gradients => Suite::Gradients,
            SuiteArg::Theorems => Suite::Theorems,
            SuiteArg::Bound => Suite::Bound,
            SuiteArg::All => Suite::All,
        }
    }
}

type BoxError = Box<dyn std::error::Error>;

fn finish(
    mut report: RunReport,
    start: Instant,
    labels: &[usize],
    ds: &Dataset,
    path: &PathBuf,
) -> Result<(), BoxError> {
    report.set_labels(labels, ds.truth())?;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    if let Some(m) = &report.final_metrics {
        println!("nmi {:.4} acc {:.4} ari {:.4}", m.nmi, m.acc, m.ari);
    }
    report.write(path)?;
    Ok(())
}

fn run(cmd: Command) -> Result<bool, BoxError> {
    let start = Instant::now();
    match cmd {
        Command::GenData { spec, out } => {
            let ds = generate(&load_synthetic_spec(&spec)?)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} points of dimension {} to {}", ds.len(), ds.dim(), out.display());
        }
        Command::Train { config, data, out, report, metrics } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data)?;
            let mut log = match &metrics {
                Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
                None => None,
            };
            let mut state = init_state(&cfg, &ds)?;
            let epochs = fit_from(&mut state, &cfg, &ds, |_, m| {
                if let Some(w) = log.as_mut() {
                    let line = serde_json::to_string(m).expect("metrics serialize");
                    writeln!(w, "{line}").map_err(|e| TrainError::InvalidConfig(format!("metrics log: {e}")))?;
                }
                Ok(())
            })?;
            if let Some(mut w) = log {
                w.flush()?;
            }
            save_checkpoint(&state, &cfg, &out)?;
            let eval = evaluate(&state, &cfg, &ds)?;
            let mut r = RunReport::new("train", Some(&cfg), ds.len());
            r.epochs = epochs;
            finish(r, start, &eval.labels, &ds, &report)?;
        }
        Command::Eval { ckpt, data, report } => {
            let (state, cfg) = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let eval = evaluate(&state, &cfg, &ds)?;
            finish(RunReport::new("eval", Some(&cfg), ds.len()), start, &eval.labels, &ds, &report)?;
        }
        Command::Baseline { which, config, data, report } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data)?;
            let (name, result) = match which {
                Baseline::Skmeans => {
                    let mut rng = SeededRng::new(cfg.seed);
                    let pts = ds.points().to_rows();
                    (
                        "baseline-skmeans",
                        spherical_kmeans_restarts(&pts, cfg.n_clusters, cfg.kmeans_restarts, 100, &mut rng)?,
                    )
                }
                Baseline::TwoStage => ("baseline-two-stage", two_stage_pipeline(&cfg, &ds)?),
            };
            finish(RunReport::new(name, Some(&cfg), ds.len()), start, &result.labels, &ds, &report)?;
        }
        Command::Verify { suite } => {
            let outcomes = verify::run(suite.into());
            for o in &outcomes {
                println!("{o}");
            }
            return Ok(outcomes.iter().all(|o| o.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = std::env::var("MICE_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
