//! Command-line front end. Exit codes: 0 success, 1 usage, 2 data or configuration,
//! 3 numeric failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{RunConfig, Variant};
use crate::data::{load_csv, make_windows, split_chronological, SeriesTable, SynthConfig, synth_damped_sinusoids};
use crate::error::{Error, Result};
use crate::experiments::{
    run_ablation, run_efficiency, run_lookback, run_robustness, run_single, EfficiencyOptions, Report, ReportRow,
    LOOKBACKS, ROBUSTNESS_STDS,
};
use crate::train::evaluate;

#[derive(Parser, Debug)]
#[command(name = "unimamba", version, about = "Multivariate forecaster: training, prediction and study harnesses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Config file of `key = value` lines
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable); wins over the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for --set seed=N
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing)
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic damped-sinusoid CSV
    Synth {
        #[arg(long, default_value_t = 2000)]
        rows: usize,
        #[arg(long, default_value_t = 7)]
        variates: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Force the first component of every variate to this period
        #[arg(long)]
        dominant_period: Option<u64>,
        /// Output CSV path
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train one model and score its test split
    Train(RunArgs),
    /// Forecast the horizon after the last lookback rows of a CSV
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output directory
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Re-score a checkpoint on one split of its dataset
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset path (defaults to the checkpoint's `data` key)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Ablation study over variants, seeds and horizons
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "baseline,no_fft_laplace,no_tcn,no_fft_laplace_and_tcn,self_attention,no_attention,minimal")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Defaults to the configured horizon
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
    },
    /// Test-time noise sweep on a trained (or freshly trained) model
    Robustness {
        #[command(flatten)]
        run: RunArgs,
        /// Reuse a checkpoint instead of training
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        stds: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// One model per lookback length
    Lookback {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        lookbacks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Training and forward timing across lookbacks with a quadratic reference
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "96,192,384,768")]
        lookbacks: Vec<usize>,
        #[arg(long, default_value_t = 110)]
        iters: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayVersion};
            if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{e}");
            eprintln!("{}", Cli::command().render_help());
            return 1;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        cfg.apply_override(kv).map_err(|e| Error::Config(format!("--set {kv}: {}", inner(&e))))?;
    }
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
    }
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn inner(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

fn load_data(cfg: &RunConfig) -> Result<SeriesTable> {
    if cfg.data.data.is_empty() {
        return Err(Error::Config("no dataset configured: set `data = <path.csv>`".into()));
    }
    load_csv(Path::new(&cfg.data.data), None)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let p = dir.join("config.txt");
    std::fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))
}

/// Run log mirrored to a file and standard error.
struct RunLog {
    file: File,
    path: PathBuf,
}

impl RunLog {
    fn create(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RunLog { file, path })
    }

    fn line(&mut self, l: &str) -> Result<()> {
        eprintln!("{l}");
        writeln!(self.file, "{l}").map_err(|e| Error::io(&self.path, e))
    }

    /// Logging callback for the library; the first write error is kept and reported later.
    fn sink<'a>(&'a mut self, failed: &'a mut Option<Error>) -> impl FnMut(&str) + 'a {
        move |l: &str| {
            if failed.is_none() {
                if let Err(e) = self.line(l) {
                    *failed = Some(e);
                }
            }
        }
    }
}

fn with_log<T>(dir: &Path, name: &str, f: impl FnOnce(&mut dyn FnMut(&str)) -> Result<T>) -> Result<T> {
    let mut log = RunLog::create(dir, name)?;
    let mut failed = None;
    let out = {
        let mut sink = log.sink(&mut failed);
        f(&mut sink)
    };
    if let Some(e) = failed {
        return Err(e);
    }
    out
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            rows,
            variates,
            seed,
            noise,
            dominant_period,
            out,
        } => {
            let cfg = SynthConfig {
                variates,
                rows,
                seed,
                noise_std: noise,
                dominant_period,
                ..SynthConfig::default()
            };
            let table = synth_damped_sinusoids(&cfg)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                prepare_dir(parent)?;
            }
            table.write_csv(&out)?;
            println!("wrote {} rows x {} variates to {}", rows, variates, out.display());
            Ok(())
        }
        Command::Train(args) => {
            let cfg = resolve_config(&args)?;
            prepare_dir(&args.out)?;
            write_config(&args.out, &cfg)?;
            let table = load_data(&cfg)?;
            let ckpt = args.out.join("model.ckpt");
            let (result, hash) = with_log(&args.out, "train.log", |log| {
                log(&format!("config_hash {}", cfg.hash()));
                let r = run_single(&table, &cfg, log)?;
                let hash = checkpoint::save(&ckpt, &r.model, &r.config, &r.scaler)?;
                log(&format!("checkpoint {} sha256 {hash}", ckpt.display()));
                Ok((r, hash))
            })?;
            let mut report = Report::new("train", &["best_epoch", "steps", "checkpoint_sha256"], 0);
            let mut row = result.row();
            row.extras = vec![result.history.best_epoch.to_string(), result.history.steps.to_string(), hash.clone()];
            report.rows.push(row);
            report.write(&args.out, "report")?;
            println!("test_mse {} test_mae {}", result.test.mse, result.test.mae);
            println!("checkpoint {} sha256 {hash}", ckpt.display());
            Ok(())
        }
        Command::Predict { checkpoint: ck, input, out } => {
            let c = checkpoint::load(&ck)?;
            let m = &c.config.model;
            let table = load_csv(&input, None)?;
            if table.variates() != m.variates {
                return Err(Error::Data(format!(
                    "{}: {} value columns, but the model was trained on {} variates ({})",
                    input.display(),
                    table.variates(),
                    m.variates,
                    c.config.data.data
                )));
            }
            if table.rows() < m.lookback {
                return Err(Error::Data(format!(
                    "{}: {} rows, but the model needs at least lookback = {} rows of input",
                    input.display(),
                    table.rows(),
                    m.lookback
                )));
            }
            let window = c.scaler.transform(&table.slice(table.rows() - m.lookback, m.lookback)?)?;
            let x = window.values.reshape(&[1, m.lookback, m.variates])?;
            let cal = if m.time_features {
                Some(window.calendar()?.reshape(&[1, m.lookback, 2])?)
            } else {
                None
            };
            let pred = c.scaler.inverse(&c.model.predict(&x, cal.as_ref())?);
            prepare_dir(&out)?;
            write_config(&out, &c.config)?;
            let path = out.join("predictions.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let mut header = vec!["step".to_string()];
            header.extend(table.names.iter().cloned());
            let werr = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
            w.write_record(&header).map_err(werr)?;
            for step in 0..m.horizon {
                let mut rec = vec![(step + 1).to_string()];
                rec.extend(pred.data()[step * m.variates..(step + 1) * m.variates].iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(werr)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            println!("wrote {} forecast steps to {}", m.horizon, path.display());
            Ok(())
        }
        Command::Evaluate {
            checkpoint: ck,
            data,
            split,
            out,
        } => {
            let c = checkpoint::load(&ck)?;
            let mut cfg = c.config.clone();
            if let Some(d) = data {
                cfg.data.data = d.to_string_lossy().into_owned();
            }
            let table = load_data(&cfg)?;
            let m = &cfg.model;
            let raw = split_chronological(&table, cfg.data.fractions(), m.lookback + m.horizon)?;
            let part = match split.as_str() {
                "train" => raw.train,
                "val" => raw.val,
                _ => raw.test,
            };
            let part = c.scaler.transform(&part)?;
            let windows = make_windows(&part, m.lookback, m.horizon, cfg.data.stride, m.time_features)?;
            let start = std::time::Instant::now();
            let metrics = evaluate(&c.model, &windows, cfg.train.batch_size, None)?;
            let batches = windows.len().div_ceil(cfg.train.batch_size.max(1)).max(1) as f64;
            let ms = start.elapsed().as_secs_f64() * 1e3 / batches;
            prepare_dir(&out)?;
            write_config(&out, &cfg)?;
            let mut report = Report::new("evaluate", &["split", "windows"], 0);
            report.notes.push(format!("checkpoint {} (sha256 {})", ck.display(), checkpoint::file_hash(&ck)?));
            report.notes.push("ms_per_iter: wall time per evaluated batch".into());
            report.rows.push(ReportRow {
                variant: m.variant.name().into(),
                horizon: m.horizon,
                lookback: m.lookback,
                seed: m.seed,
                mse: metrics.mse,
                mae: metrics.mae,
                ms_per_iter: ms,
                config_hash: cfg.hash(),
                extras: vec![split.clone(), windows.len().to_string()],
            });
            report.write(&out, "evaluate")?;
            println!("{split}_mse {} {split}_mae {}", metrics.mse, metrics.mae);
            Ok(())
        }
        Command::Ablate {
            run,
            variants,
            seeds,
            horizons,
        } => {
            let cfg = resolve_config(&run)?;
            let variants = variants.iter().map(|v| v.trim().parse::<Variant>()).collect::<Result<Vec<_>>>()?;
            let horizons = if horizons.is_empty() { vec![cfg.model.horizon] } else { horizons };
            prepare_dir(&run.out)?;
            write_config(&run.out, &cfg)?;
            let table = load_data(&cfg)?;
            let report = with_log(&run.out, "ablate.log", |log| run_ablation(&table, &cfg, &variants, &seeds, &horizons, log))?;
            report.write(&run.out, "ablation")?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Robustness {
            run,
            checkpoint: ck,
            stds,
            noise_seed,
        } => {
            let stds = if stds.is_empty() { ROBUSTNESS_STDS.to_vec() } else { stds };
            prepare_dir(&run.out)?;
            let report = match ck {
                Some(ck) => {
                    let c = checkpoint::load(&ck)?;
                    let mut cfg = c.config.clone();
                    for kv in &run.set {
                        if kv.split_once('=').map(|(k, _)| k.trim()) != Some("data") {
                            return Err(Error::Config(format!(
                                "--set {kv}: with --checkpoint only `data` may be overridden"
                            )));
                        }
                        cfg.apply_override(kv)?;
                    }
                    write_config(&run.out, &cfg)?;
                    let table = load_data(&cfg)?;
                    run_robustness(&c.model, &c.scaler, &cfg, &table, &stds, noise_seed)?
                }
                None => {
                    let cfg = resolve_config(&run)?;
                    write_config(&run.out, &cfg)?;
                    let table = load_data(&cfg)?;
                    with_log(&run.out, "robustness.log", |log| {
                        let r = run_single(&table, &cfg, log)?;
                        run_robustness(&r.model, &r.scaler, &r.config, &table, &stds, noise_seed)
                    })?
                }
            };
            report.write(&run.out, "robustness")?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Lookback { run, lookbacks, seeds } => {
            let cfg = resolve_config(&run)?;
            let lookbacks = if lookbacks.is_empty() { LOOKBACKS.to_vec() } else { lookbacks };
            prepare_dir(&run.out)?;
            write_config(&run.out, &cfg)?;
            let table = load_data(&cfg)?;
            let report = with_log(&run.out, "lookback.log", |log| run_lookback(&table, &cfg, &lookbacks, &seeds, log))?;
            report.write(&run.out, "lookback")?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Bench {
            run,
            lookbacks,
            iters,
            batch,
        } => {
            let cfg = resolve_config(&run)?;
            prepare_dir(&run.out)?;
            write_config(&run.out, &cfg)?;
            let opts = EfficiencyOptions {
                lookbacks,
                batch_size: batch,
                train_iters: iters,
                forward_iters: iters,
            };
            let r = run_efficiency(&cfg, &opts)?;
            r.report.write(&run.out, "efficiency")?;
            print!("{}", r.report.to_text());
            Ok(())
        }
    }
}
