//! Study harnesses: single runs, ablation, noise robustness, lookback sweep and the
//! scaling benchmark, plus the report tables they emit.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::attention::SelfAttention;
use crate::config::{RunConfig, Variant};
use crate::data::{make_windows, split_sizes, Scaler, SeriesTable, SynthConfig, synth_damped_sinusoids};
use crate::error::{Error, Result};
use crate::model::UniMamba;
use crate::nn::{ParamStore, Session};
use crate::tensor::Tape;
use crate::train::{evaluate, timing_stats, train, train_step, Adam, Dataset, History, Metrics, TIMING_WARMUP};

pub const BASE_COLUMNS: [&str; 8] = ["variant", "horizon", "lookback", "seed", "mse", "mae", "ms_per_iter", "config_hash"];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub horizon: usize,
    pub lookback: usize,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub ms_per_iter: f64,
    pub config_hash: String,
    /// Values for [`Report::extra_columns`], already formatted.
    pub extras: Vec<String>,
}

impl ReportRow {
    fn new(cfg: &RunConfig, metrics: Metrics, ms_per_iter: f64) -> Self {
        ReportRow {
            variant: cfg.model.variant.name().to_string(),
            horizon: cfg.model.horizon,
            lookback: cfg.model.lookback,
            seed: cfg.model.seed,
            mse: metrics.mse,
            mae: metrics.mae,
            ms_per_iter,
            config_hash: cfg.hash(),
            extras: Vec::new(),
        }
    }

    fn fields(&self) -> Vec<String> {
        let mut f = vec![
            self.variant.clone(),
            self.horizon.to_string(),
            self.lookback.to_string(),
            self.seed.to_string(),
            self.mse.to_string(),
            self.mae.to_string(),
            format!("{:.3}", self.ms_per_iter),
            self.config_hash.clone(),
        ];
        f.extend(self.extras.iter().cloned());
        f
    }

    /// Every field except the wall-clock column.
    pub fn without_timing(&self) -> Vec<String> {
        let mut f = self.fields();
        f.remove(6);
        f
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub title: String,
    /// Free-text protocol lines shown above the text table.
    pub notes: Vec<String>,
    pub extra_columns: Vec<String>,
    /// How many leading extra columns take part in grouping for aggregation.
    pub group_extras: usize,
    pub rows: Vec<ReportRow>,
}

/// Mean and population std over the seeds of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub key: Vec<String>,
    pub runs: usize,
    pub mse: (f64, f64),
    pub mae: (f64, f64),
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

impl Report {
    pub fn new(title: &str, extra_columns: &[&str], group_extras: usize) -> Self {
        Report {
            title: title.to_string(),
            extra_columns: extra_columns.iter().map(|s| s.to_string()).collect(),
            group_extras,
            ..Report::default()
        }
    }

    pub fn header(&self) -> Vec<String> {
        BASE_COLUMNS.iter().map(|s| s.to_string()).chain(self.extra_columns.iter().cloned()).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let werr = |e: csv::Error| Error::Data(format!("report: {e}"));
        w.write_record(self.header()).map_err(werr)?;
        for r in &self.rows {
            w.write_record(r.fields()).map_err(werr)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("report: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    /// Rows grouped by variant, horizon, lookback and the grouping extras, in first-seen order.
    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut groups: Vec<(Vec<String>, Vec<f64>, Vec<f64>)> = Vec::new();
        for r in &self.rows {
            let mut key = vec![r.variant.clone(), r.horizon.to_string(), r.lookback.to_string()];
            key.extend(r.extras.iter().take(self.group_extras).cloned());
            match groups.iter_mut().find(|g| g.0 == key) {
                Some(g) => {
                    g.1.push(r.mse);
                    g.2.push(r.mae);
                }
                None => groups.push((key, vec![r.mse], vec![r.mae])),
            }
        }
        groups
            .into_iter()
            .map(|(key, mse, mae)| Aggregate {
                key,
                runs: mse.len(),
                mse: mean_std(&mse),
                mae: mean_std(&mae),
            })
            .collect()
    }

    /// Aligned plain-text rendering: notes, per-run rows, then mean ± std per group.
    pub fn to_text(&self) -> String {
        let mut out = format!("# {}\n", self.title);
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        out.push('\n');
        let mut rows = vec![self.header()];
        for r in &self.rows {
            let mut f = r.fields();
            f[4] = format!("{:.6}", r.mse);
            f[5] = format!("{:.6}", r.mae);
            f[7] = r.config_hash.chars().take(12).collect();
            rows.push(f);
        }
        out.push_str(&align(&rows));
        let agg = self.aggregate();
        if agg.iter().any(|a| a.runs > 1) {
            out.push('\n');
            let mut head = vec!["variant".to_string(), "horizon".into(), "lookback".into()];
            head.extend(self.extra_columns.iter().take(self.group_extras).cloned());
            head.extend(["runs".into(), "mse (mean ± std)".into(), "mae (mean ± std)".into()]);
            let mut table = vec![head];
            for a in agg {
                let mut f = a.key.clone();
                f.push(a.runs.to_string());
                f.push(format!("{:.6} ± {:.6}", a.mse.0, a.mse.1));
                f.push(format!("{:.6} ± {:.6}", a.mae.0, a.mae.1));
                table.push(f);
            }
            out.push_str(&align(&table));
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let txt_path = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt_path, self.to_text()).map_err(|e| Error::io(&txt_path, e))
    }
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().enumerate().map(|(c, s)| format!("{s:<w$}", w = width[c])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// A trained model with its data scaling, history and held-out metrics.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: RunConfig,
    pub model: UniMamba,
    pub scaler: Scaler,
    pub history: History,
    pub test: Metrics,
}

impl RunResult {
    pub fn row(&self) -> ReportRow {
        ReportRow::new(&self.config, self.test, self.history.ms_per_iter.0)
    }
}

/// Trains one model on `table` under `cfg` and scores the test split.
pub fn run_single(table: &SeriesTable, cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<RunResult> {
    let mut cfg = cfg.clone();
    cfg.resolve();
    cfg.validate()?;
    let data = Dataset::prepare(table, &cfg)?;
    let mut model = UniMamba::new(cfg.model.clone())?;
    let history = train(&mut model, &data, &cfg, log)?;
    let test_w = data.windows(&data.splits.test, &cfg)?;
    let test = evaluate(&model, &test_w, cfg.train.batch_size, None)?;
    log(&format!("best_epoch {} steps {}", history.best_epoch, history.steps));
    log(&format!("test_mse {} test_mae {}", test.mse, test.mae));
    Ok(RunResult {
        config: cfg,
        model,
        scaler: data.scaler,
        history,
        test,
    })
}

/// Maps `f` over `jobs` on up to `available_parallelism` threads; results keep job order.
pub fn parallel_map<J: Sync, R: Send>(jobs: &[J], f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    if workers <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..jobs.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                done.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Runs every config in parallel; each run's log lines are prefixed and replayed in job order.
fn run_many(table: &SeriesTable, cfgs: &[RunConfig], log: &mut dyn FnMut(&str)) -> Result<Vec<RunResult>> {
    let results = parallel_map(cfgs, |cfg| {
        let mut lines = Vec::new();
        let tag = format!(
            "[{} L={} P={} seed={}]",
            cfg.model.variant.name(),
            cfg.model.lookback,
            cfg.model.horizon,
            cfg.model.seed
        );
        let r = run_single(table, cfg, &mut |l: &str| lines.push(format!("{tag} {l}")));
        (r, lines)
    });
    let mut out = Vec::with_capacity(results.len());
    for (r, lines) in results {
        for l in &lines {
            log(l);
        }
        out.push(r?);
    }
    Ok(out)
}

fn training_notes(cfg: &RunConfig) -> Vec<String> {
    let t = &cfg.train;
    vec![format!(
        "training: adam lr={} betas=({}, {}) eps={} batch={} max_epochs={} patience={} grad_clip={} steps_per_epoch={}",
        t.lr,
        t.beta1,
        t.beta2,
        t.adam_eps,
        t.batch_size,
        t.max_epochs,
        t.patience,
        t.grad_clip.map_or("none".into(), |c| c.to_string()),
        t.steps_per_epoch.map_or("all".into(), |c| c.to_string()),
    )]
}

/// Trains each `variant x seed x horizon` on identical data and reports the paired MSE/MAE
/// change against the baseline run with the same seed and horizon.
pub fn run_ablation(
    table: &SeriesTable,
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    horizons: &[usize],
    log: &mut dyn FnMut(&str),
) -> Result<Report> {
    if variants.is_empty() || seeds.is_empty() || horizons.is_empty() {
        return Err(Error::Config("ablation needs at least one variant, seed and horizon".into()));
    }
    if !variants.contains(&Variant::Baseline) {
        return Err(Error::Config("ablation variants must include baseline for the paired deltas".into()));
    }
    let mut cfgs = Vec::new();
    for &variant in variants {
        for &horizon in horizons {
            for &seed in seeds {
                let mut c = base.clone();
                c.model.variant = variant;
                c.model.horizon = horizon;
                c.model.seed = seed;
                cfgs.push(c);
            }
        }
    }
    let results = run_many(table, &cfgs, log)?;
    let mut report = Report::new("ablation", &["mse_delta_pct", "mae_delta_pct", "params"], 0);
    report.notes = training_notes(base);
    report
        .notes
        .push("delta_pct = 100 * (variant - baseline) / baseline, paired on seed and horizon".into());
    for r in &results {
        let m = &r.config.model;
        let b = results
            .iter()
            .find(|x| x.config.model.variant == Variant::Baseline && x.config.model.seed == m.seed && x.config.model.horizon == m.horizon)
            .expect("baseline present");
        let mut row = r.row();
        row.extras = vec![
            pct_change(r.test.mse, b.test.mse).to_string(),
            pct_change(r.test.mae, b.test.mae).to_string(),
            r.model.store.numel().to_string(),
        ];
        report.rows.push(row);
    }
    Ok(report)
}

/// `100 * (m - m0) / m0`.
pub fn pct_change(m: f64, m0: f64) -> f64 {
    100.0 * (m - m0) / m0
}

pub const ROBUSTNESS_STDS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Test metrics under Gaussian input noise at each std, with percent change against std 0.
/// Every std reuses the same noise draws, scaled. `ms_per_iter` is wall time per evaluated batch.
pub fn run_robustness(
    model: &UniMamba,
    scaler: &Scaler,
    cfg: &RunConfig,
    table: &SeriesTable,
    stds: &[f64],
    seed: u64,
) -> Result<Report> {
    if stds.is_empty() {
        return Err(Error::Config("robustness needs at least one noise std".into()));
    }
    let test = scaler.transform(&split_test(table, cfg)?)?;
    let windows = make_windows(&test, cfg.model.lookback, cfg.model.horizon, cfg.data.stride, cfg.model.time_features)?;
    let batches = windows.len().div_ceil(cfg.train.batch_size.max(1)).max(1) as f64;
    let timed = |std: f64| -> Result<(Metrics, f64)> {
        let t = Instant::now();
        let m = evaluate(model, &windows, cfg.train.batch_size, Some((std, seed)))?;
        Ok((m, t.elapsed().as_secs_f64() * 1e3 / batches))
    };
    let (clean, clean_ms) = timed(0.0)?;
    let mut report = Report::new("robustness", &["noise_std", "mse_pct_change", "mae_pct_change"], 1);
    report.notes = training_notes(cfg);
    report.notes.push(format!(
        "noise: N(0, std^2) added to test inputs after global standardization; targets and training untouched; noise seed {seed}"
    ));
    report.notes.push("pct_change = 100 * (m - m0) / m0 with m0 the same model at std 0".into());
    report.notes.push("ms_per_iter: wall time per evaluated batch".into());
    for &std in stds {
        let (m, ms) = if std == 0.0 { (clean, clean_ms) } else { timed(std)? };
        let mut row = ReportRow::new(cfg, m, ms);
        row.extras = vec![
            std.to_string(),
            pct_change(m.mse, clean.mse).to_string(),
            pct_change(m.mae, clean.mae).to_string(),
        ];
        report.rows.push(row);
    }
    Ok(report)
}

/// The test segment of `table` under the split fractions of `cfg`.
pub fn split_test(table: &SeriesTable, cfg: &RunConfig) -> Result<SeriesTable> {
    let (tr, va, te) = split_sizes(table.rows(), cfg.data.fractions())?;
    table.slice(tr + va, te)
}

pub const LOOKBACKS: [usize; 5] = [48, 96, 192, 336, 720];

/// One model per `(lookback, seed)`. Every split must fit the longest window before
/// any training starts.
pub fn run_lookback(
    table: &SeriesTable,
    base: &RunConfig,
    lookbacks: &[usize],
    seeds: &[u64],
    log: &mut dyn FnMut(&str),
) -> Result<Report> {
    if lookbacks.is_empty() || seeds.is_empty() {
        return Err(Error::Config("lookback study needs at least one lookback and seed".into()));
    }
    let longest = *lookbacks.iter().max().expect("nonempty");
    let need = longest + base.model.horizon;
    let (tr, va, te) = split_sizes(table.rows(), base.data.fractions())?;
    let shortest = tr.min(va).min(te);
    if shortest < need {
        return Err(Error::Data(format!(
            "lookback {longest} with horizon {} needs {need} rows in every split, but the {} split of {} rows has {shortest}",
            base.model.horizon,
            if va == shortest { "validation" } else if te == shortest { "test" } else { "train" },
            table.rows()
        )));
    }
    let mut cfgs = Vec::new();
    for &l in lookbacks {
        for &seed in seeds {
            let mut c = base.clone();
            c.model.lookback = l;
            c.model.seed = seed;
            cfgs.push(c);
        }
    }
    let results = run_many(table, &cfgs, log)?;
    let mut report = Report::new("lookback", &[], 0);
    report.notes = training_notes(base);
    report.rows = results.iter().map(RunResult::row).collect();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyOptions {
    pub lookbacks: Vec<usize>,
    pub batch_size: usize,
    /// Timed optimizer steps per lookback, warmup included.
    pub train_iters: usize,
    /// Timed forward passes per lookback, warmup included.
    pub forward_iters: usize,
}

impl Default for EfficiencyOptions {
    fn default() -> Self {
        EfficiencyOptions {
            lookbacks: vec![96, 192, 384, 768],
            batch_size: 8,
            train_iters: 110,
            forward_iters: 110,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EfficiencyResult {
    pub report: Report,
    /// Log-log slope of model forward latency against L.
    pub slope: f64,
    /// Same for the naive self-attention-over-time reference.
    pub reference_slope: f64,
    /// Forward latency at the longest lookback over the shortest.
    pub latency_ratio: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

fn time_ms(iters: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    let mut ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        f()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(timing_stats(&ms, TIMING_WARMUP))
}

/// Training-step time and forward latency across lookbacks, with a single-head
/// self-attention over the `L` time steps (width `V`) as the quadratic reference.
pub fn run_efficiency(base: &RunConfig, opts: &EfficiencyOptions) -> Result<EfficiencyResult> {
    if opts.lookbacks.len() < 2 || opts.batch_size == 0 {
        return Err(Error::Config("efficiency needs at least two lookbacks and batch_size >= 1".into()));
    }
    let mut report = Report::new(
        "efficiency",
        &["ms_per_iter_std", "forward_ms", "forward_ms_std", "reference_forward_ms", "reference_forward_ms_std"],
        0,
    );
    report.notes.push(format!(
        "timing: monotonic clock, {} optimizer steps and {} forward passes per lookback, first {} discarded, batch {}",
        opts.train_iters, opts.forward_iters, TIMING_WARMUP, opts.batch_size
    ));
    report
        .notes
        .push("reference: one-head scaled dot-product self-attention over the L time steps (width V)".into());
    report
        .notes
        .push("mse/mae: the model after its timed steps, on the timed batch (normalized scale)".into());
    let (mut fwd, mut reff) = (Vec::new(), Vec::new());
    for &l in &opts.lookbacks {
        let mut cfg = base.clone();
        cfg.model.lookback = l;
        cfg.resolve();
        cfg.validate()?;
        let m = &cfg.model;
        let synth = SynthConfig {
            variates: m.variates,
            rows: l + m.horizon + opts.batch_size - 1,
            seed: m.seed,
            ..SynthConfig::default()
        };
        let table = synth_damped_sinusoids(&synth)?;
        let table = Scaler::fit(&table).transform(&table)?;
        let windows = make_windows(&table, l, m.horizon, 1, m.time_features)?;
        let batch = windows.batch(&(0..opts.batch_size).collect::<Vec<_>>())?;

        let mut model = UniMamba::new(m.clone())?;
        let mut opt = Adam::new(&model.store, cfg.train.lr, cfg.train.beta1, cfg.train.beta2, cfg.train.adam_eps);
        let train_t = time_ms(opts.train_iters, || train_step(&mut model, &mut opt, &batch, cfg.train.grad_clip).map(|_| ()))?;
        let mut pred = None;
        let fwd_t = time_ms(opts.forward_iters, || {
            pred = Some(model.predict(&batch.inputs, batch.calendar.as_ref())?);
            Ok(())
        })?;
        let metrics = crate::train::compute_metrics(pred.as_ref().expect("ran"), &batch.targets)?;

        let mut ref_store = ParamStore::new(m.seed);
        let reference = SelfAttention::new(&mut ref_store, "reference", m.variates)?;
        let ref_t = time_ms(opts.forward_iters, || {
            let tape = Tape::new();
            let s = Session::new(&tape, &ref_store, false);
            let x = tape.constant(batch.inputs.clone());
            reference.forward(&s, x).map(|_| ())
        })?;

        fwd.push(fwd_t.0);
        reff.push(ref_t.0);
        let mut row = ReportRow::new(&cfg, metrics, train_t.0);
        row.extras = [train_t.1, fwd_t.0, fwd_t.1, ref_t.0, ref_t.1].iter().map(|v| format!("{v:.3}")).collect();
        report.rows.push(row);
    }
    let ls: Vec<f64> = opts.lookbacks.iter().map(|&l| l as f64).collect();
    let slope = loglog_slope(&ls, &fwd);
    let reference_slope = loglog_slope(&ls, &reff);
    let latency_ratio = fwd[fwd.len() - 1] / fwd[0];
    report.notes.push(format!(
        "log-log slope of forward latency vs L: model {slope:.3}, reference {reference_slope:.3}; t(L_max)/t(L_min) = {latency_ratio:.2}"
    ));
    Ok(EfficiencyResult {
        report,
        slope,
        reference_slope,
        latency_ratio,
    })
}
