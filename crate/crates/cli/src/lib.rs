//! Command-line front end: fit pipelines from recipes, score, whiten, predict
//! and report on new data, and run the brute-force oracle suites.

pub mod fixtures;
pub mod oracle;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use whitener::dataio::{self, load, save_model, split_scores, Frame, Model, Recipe, Table};
use whitener::whiteners::{replicate_horizon, Pipeline, StageSpec};

#[derive(Debug, Parser)]
#[command(
    name = "whitener",
    version,
    about = "Feature-dependent covariance prediction with whiteners"
)]
struct Cli {
    /// Worker threads for row-parallel work (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for randomized checks. Fitting itself is deterministic.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Increase log detail on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a pipeline from a recipe and save the model.
    Fit {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Try an unconstrained solve first for regression stages.
        #[arg(long)]
        fast_unconstrained: bool,
        /// Forecast horizon; overrides the recipe.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Print the mean log-likelihood of a model on data.
    Score(Apply),
    /// Write whitened outcomes and per-row log-likelihoods.
    Whiten(ApplyOut),
    /// Write predicted covariances (and means) per row.
    Predict(ApplyOut),
    /// Write factors, volatilities, correlations and log-likelihoods per row.
    Report(ApplyOut),
    /// Run the oracle suites and print one line per suite.
    OracleCheck {
        /// Suites to run (default: all).
        #[arg(long = "suite", value_parser = clap::builder::PossibleValuesParser::new(oracle::SUITES))]
        suites: Vec<String>,
    },
}

#[derive(Debug, Args)]
struct Apply {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct ApplyOut {
    #[command(flatten)]
    input: Apply,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 for bad input, 2 for internal or
/// numerical failures.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .target(env_logger::Target::Stderr)
        .try_init();

    let result = match cli.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(anyhow::Error::new(e).context("cannot start thread pool")),
        },
        None => execute(&cli),
    };
    match result {
        Ok(code) => code,
        Err(e) if is_broken_pipe(&e) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.chain().find_map(|c| c.downcast_ref::<whitener::Error>()) {
        Some(w) if !w.is_user_error() => 2,
        _ => 1,
    }
}

// A closed downstream pipe (`whitener report ... | head`) is not a failure.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let io = c
            .downcast_ref::<io::Error>()
            .or(match c.downcast_ref::<whitener::Error>() {
                Some(whitener::Error::Io(inner)) => Some(inner),
                _ => None,
            });
        io.is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)
    })
}

fn execute(cli: &Cli) -> anyhow::Result<i32> {
    match &cli.command {
        Command::Fit {
            recipe,
            data,
            model,
            fast_unconstrained,
            horizon,
        } => fit(recipe, data, model, *fast_unconstrained, *horizon),
        Command::Score(a) => {
            let (model, frame) = open(a, true)?;
            let score = if model.horizon > 1 {
                model
                    .pipeline
                    .score(&replicate_horizon(&frame.dataset()?, model.horizon)?)?
            } else {
                split_scores(&model.pipeline, &frame, frame.len())?.0
            };
            println!("score: {score:.4}");
            Ok(0)
        }
        Command::Whiten(a) => {
            let (model, frame) = open(&a.input, true)?;
            with_output(a.out.as_deref(), |w| {
                dataio::write_whitened(&model.pipeline, &frame, model.index.is_some(), w)
            })
        }
        Command::Predict(a) => {
            let (model, frame) = open(&a.input, false)?;
            with_output(a.out.as_deref(), |w| {
                dataio::write_predictions(&model.pipeline, &frame, model.index.is_some(), w)
            })
        }
        Command::Report(a) => {
            let (model, frame) = open(&a.input, true)?;
            with_output(a.out.as_deref(), |w| {
                dataio::write_report(&model.pipeline, &frame, model.index.is_some(), w)
            })
        }
        Command::OracleCheck { suites } => {
            let names: Vec<&str> = if suites.is_empty() {
                oracle::SUITES.to_vec()
            } else {
                suites.iter().map(String::as_str).collect()
            };
            let mut failed = 0;
            for name in names {
                let outcome = oracle::run_suite(name, cli.seed).expect("suite names are validated by clap");
                println!("{outcome}");
                failed += usize::from(!outcome.passed);
            }
            Ok(if failed == 0 { 0 } else { 2 })
        }
    }
}

fn fit(recipe: &Path, data: &Path, model_path: &Path, fast: bool, horizon: Option<usize>) -> anyhow::Result<i32> {
    let mut recipe = Recipe::from_path(recipe).with_context(|| format!("reading recipe {}", recipe.display()))?;
    if let Some(h) = horizon {
        recipe.horizon = h;
    }
    if fast {
        for stage in &mut recipe.stages {
            if let StageSpec::Regression(cfg) | StageSpec::Joint(cfg) = stage {
                cfg.fast_unconstrained = true;
            }
        }
    }
    let table = Table::from_path(data).with_context(|| format!("reading data {}", data.display()))?;
    let prepared = load(&table, &recipe)?;
    let train = prepared.train()?;
    let h = recipe.horizon;

    let (pipeline, train_score, test_score) = if h > 1 {
        let train_data = replicate_horizon(&train.dataset()?, h)?;
        let (pipeline, _) = Pipeline::fit(&recipe.stages, &train_data)?;
        let train_score = pipeline.score(&train_data)?;
        let test_score = match prepared.test()? {
            Some(test) if test.len() >= h => Some(pipeline.score(&replicate_horizon(&test.dataset()?, h)?)?),
            _ => None,
        };
        (pipeline, train_score, test_score)
    } else {
        let (pipeline, _) = Pipeline::fit(&recipe.stages, &train.dataset()?)?;
        let (train_score, test_score) = split_scores(&pipeline, &prepared.frame, prepared.train_len)?;
        (pipeline, train_score, test_score)
    };

    println!("train score: {train_score:.4}");
    if let Some(s) = test_score {
        println!("test score: {s:.4}");
    }
    let model = Model {
        pipeline,
        outcomes: recipe.outcomes.clone(),
        index: recipe.index.clone(),
        features: prepared.features,
        horizon: h,
    };
    save_model(&model, model_path).with_context(|| format!("writing model {}", model_path.display()))?;
    log::info!("model written to {}", model_path.display());
    Ok(0)
}

fn open(a: &Apply, require_outcomes: bool) -> anyhow::Result<(Model, Frame)> {
    let model = dataio::load_model(&a.model).with_context(|| format!("reading model {}", a.model.display()))?;
    let table = Table::from_path(&a.data).with_context(|| format!("reading data {}", a.data.display()))?;
    let frame = model.frame(&table, require_outcomes)?;
    if frame.is_empty() {
        bail!("no rows remain after feature warm-up");
    }
    Ok((model, frame))
}

fn with_output(path: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> whitener::Result<()>) -> anyhow::Result<i32> {
    match path {
        Some(p) => {
            let mut file = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            write(&mut file)?;
            file.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(0)
}
