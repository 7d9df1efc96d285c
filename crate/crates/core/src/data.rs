//! Series tables, chronological splits, sliding windows, the synthetic generator and
//! test-time noise.

use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::calendar_features;
use crate::nn::{splitmix64, stream_rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    pub timestamps: Option<Vec<String>>,
    /// `[N, V]`
    pub values: Tensor,
    pub names: Vec<String>,
    pub interval: String,
}

impl SeriesTable {
    pub fn new(values: Tensor, names: Vec<String>, timestamps: Option<Vec<String>>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[1] != names.len() {
            return Err(Error::Data(format!(
                "{} names for a table of shape {:?}",
                names.len(),
                values.shape()
            )));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != values.shape()[0] {
                return Err(Error::Data(format!("{} timestamps for {} rows", ts.len(), values.shape()[0])));
            }
        }
        if let Some(pos) = values.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at row {}", pos / names.len())));
        }
        Ok(SeriesTable {
            timestamps,
            values,
            names,
            interval: String::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn variates(&self) -> usize {
        self.values.shape()[1]
    }

    /// Rows `start..start + len` as a new table.
    pub fn slice(&self, start: usize, len: usize) -> Result<SeriesTable> {
        let v = self.variates();
        let data = self.values.data()[start * v..(start + len) * v].to_vec();
        Ok(SeriesTable {
            timestamps: self.timestamps.as_ref().map(|t| t[start..start + len].to_vec()),
            values: Tensor::new(&[len, v], data)?,
            names: self.names.clone(),
            interval: self.interval.clone(),
        })
    }

    /// `[N, 2]` hour-of-day and day-of-week features parsed from the timestamps.
    pub fn calendar(&self) -> Result<Tensor> {
        let ts = self
            .timestamps
            .as_ref()
            .ok_or_else(|| Error::Data("time features need a timestamp column".into()))?;
        let mut out = Vec::with_capacity(ts.len() * 2);
        for (row, s) in ts.iter().enumerate() {
            let dt = parse_timestamp(s)
                .ok_or_else(|| Error::Data(format!("row {}: cannot parse timestamp {s:?}", row + 1)))?;
            out.extend(calendar_features(dt.hour(), dt.weekday().num_days_from_monday()));
        }
        Tensor::new(&[ts.len(), 2], out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header: Vec<&str> = Vec::new();
        if self.timestamps.is_some() {
            header.push("date");
        }
        header.extend(self.names.iter().map(String::as_str));
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        let v = self.variates();
        for r in 0..self.rows() {
            let mut rec: Vec<String> = Vec::with_capacity(v + 1);
            if let Some(ts) = &self.timestamps {
                rec.push(ts[r].clone());
            }
            rec.extend(self.values.data()[r * v..(r + 1) * v].iter().map(|x| format!("{x:?}")));
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| chrono::DateTime::parse_from_rfc3339(s).ok().map(|d| d.naive_utc()))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        csv::ErrorKind::UnequalLengths { pos, expected_len, len } => Error::Data(format!(
            "{}: row {} has {len} fields, expected {expected_len}",
            path.display(),
            pos.as_ref().map_or(0, |p| p.line())
        )),
        _ => Error::Data(format!("{}: {e}", path.display())),
    }
}

/// Reads a headed CSV. A first column that does not parse as a number is taken as timestamps.
/// `value_columns` selects columns by header name (all numeric columns when `None`).
pub fn load_csv(path: &Path, value_columns: Option<&[String]>) -> Result<SeriesTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let records = rdr
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_error(path, e))?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let has_time = records[0].get(0).is_some_and(|c| c.trim().parse::<f64>().is_err());
    let first = usize::from(has_time);
    let cols: Vec<usize> = match value_columns {
        None => (first..header.len()).collect(),
        Some(names) => names
            .iter()
            .map(|n| {
                header
                    .iter()
                    .position(|h| h == n)
                    .filter(|&i| i >= first)
                    .ok_or_else(|| Error::Data(format!("{}: no value column named {n:?}", path.display())))
            })
            .collect::<Result<_>>()?,
    };
    if cols.is_empty() {
        return Err(Error::Data(format!("{}: no value columns", path.display())));
    }
    let mut values = Vec::with_capacity(records.len() * cols.len());
    let mut stamps = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        // row numbers count the header as line 1
        let line = r + 2;
        if has_time {
            stamps.push(rec[0].trim().to_string());
        }
        for &c in &cols {
            let cell = rec[c].trim();
            let x: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: row {line}, column {} ({:?}): cannot parse {cell:?}",
                    path.display(),
                    c + 1,
                    header[c]
                ))
            })?;
            if !x.is_finite() {
                return Err(Error::Data(format!(
                    "{}: row {line}, column {} ({:?}): non-finite value",
                    path.display(),
                    c + 1,
                    header[c]
                )));
            }
            values.push(x);
        }
    }
    let names = cols.iter().map(|&c| header[c].clone()).collect();
    SeriesTable::new(
        Tensor::new(&[records.len(), cols.len()], values)?,
        names,
        has_time.then_some(stamps),
    )
}

/// Row counts of the three segments: floors of `N * f` for train and validation, the rest to test.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    // the small offset keeps exact products like 9 * (1/3) from flooring down
    let train = (n as f64 * a + 1e-9).floor() as usize;
    let val = (n as f64 * b + 1e-9).floor() as usize;
    Ok((train, val, n - train - val))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: SeriesTable,
    pub val: SeriesTable,
    pub test: SeriesTable,
}

/// Contiguous train/validation/test segments, each at least `min_rows` long.
pub fn split_chronological(table: &SeriesTable, fractions: (f64, f64, f64), min_rows: usize) -> Result<Splits> {
    let (a, b, c) = split_sizes(table.rows(), fractions)?;
    for (name, len) in [("train", a), ("validation", b), ("test", c)] {
        if len < min_rows || len == 0 {
            return Err(Error::Data(format!(
                "{name} segment has {len} rows but at least {} are needed (lookback + horizon)",
                min_rows.max(1)
            )));
        }
    }
    Ok(Splits {
        train: table.slice(0, a)?,
        val: table.slice(a, b)?,
        test: table.slice(a + b, c)?,
    })
}

/// Per-variate standardization fitted on one table.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Tensor,
    pub std: Tensor,
}

impl Scaler {
    pub fn fit(table: &SeriesTable) -> Self {
        let (n, v) = (table.rows(), table.variates());
        let d = table.values.data();
        let mean = Tensor::from_fn(&[v], |i| (0..n).map(|r| d[r * v + i[0]]).sum::<f64>() / n as f64);
        let std = Tensor::from_fn(&[v], |i| {
            let m = mean.data()[i[0]];
            let var = (0..n).map(|r| (d[r * v + i[0]] - m).powi(2)).sum::<f64>() / n as f64;
            var.sqrt().max(1e-8)
        });
        Scaler { mean, std }
    }

    pub fn identity(v: usize) -> Self {
        Scaler {
            mean: Tensor::zeros(&[v]),
            std: Tensor::ones(&[v]),
        }
    }

    pub fn transform(&self, table: &SeriesTable) -> Result<SeriesTable> {
        let v = table.variates();
        if self.mean.numel() != v {
            return Err(Error::shape("scaler", self.mean.shape(), table.values.shape()));
        }
        let (m, s) = (self.mean.data(), self.std.data());
        let mut out = table.clone();
        out.values = Tensor::from_fn(table.values.shape(), |i| (table.values.get(i) - m[i[1]]) / s[i[1]]);
        Ok(out)
    }

    /// Maps standardized `[..., V]` values back to the original units.
    pub fn inverse(&self, x: &Tensor) -> Tensor {
        let v = self.mean.numel();
        let (m, s) = (self.mean.data(), self.std.data());
        Tensor::from_fn(x.shape(), |i| x.get(i) * s[i[i.len() - 1] % v] + m[i[i.len() - 1] % v])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// `[B, L, V]`
    pub inputs: Tensor,
    /// `[B, P, V]`
    pub targets: Tensor,
    pub starts: Vec<usize>,
    /// `[B, L, 2]` calendar features of the input steps, when requested.
    pub calendar: Option<Tensor>,
}

/// Sliding windows over one table.
#[derive(Clone, Debug)]
pub struct Windows<'a> {
    pub table: &'a SeriesTable,
    pub lookback: usize,
    pub horizon: usize,
    pub starts: Vec<usize>,
    calendar: Option<Tensor>,
}

/// Number of windows: `floor((N - L - P) / stride) + 1`.
pub fn window_count(n: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if n < lookback + horizon || stride == 0 {
        0
    } else {
        (n - lookback - horizon) / stride + 1
    }
}

pub fn make_windows(
    table: &SeriesTable,
    lookback: usize,
    horizon: usize,
    stride: usize,
    with_calendar: bool,
) -> Result<Windows<'_>> {
    if stride == 0 || lookback == 0 || horizon == 0 {
        return Err(Error::Config("lookback, horizon and stride must be >= 1".into()));
    }
    if table.rows() < lookback + horizon {
        return Err(Error::Data(format!(
            "series has {} rows but windows need at least {} (lookback {lookback} + horizon {horizon})",
            table.rows(),
            lookback + horizon
        )));
    }
    let count = window_count(table.rows(), lookback, horizon, stride);
    Ok(Windows {
        table,
        lookback,
        horizon,
        starts: (0..count).map(|i| i * stride).collect(),
        calendar: if with_calendar { Some(table.calendar()?) } else { None },
    })
}

impl Windows<'_> {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Stacks the windows with the given indices (into `starts`).
    pub fn batch(&self, which: &[usize]) -> Result<WindowBatch> {
        let v = self.table.variates();
        let (l, p) = (self.lookback, self.horizon);
        let d = self.table.values.data();
        let starts: Vec<usize> = which.iter().map(|&i| self.starts[i]).collect();
        let b = starts.len();
        let inputs = Tensor::from_fn(&[b, l, v], |i| d[(starts[i[0]] + i[1]) * v + i[2]]);
        let targets = Tensor::from_fn(&[b, p, v], |i| d[(starts[i[0]] + l + i[1]) * v + i[2]]);
        let calendar = self
            .calendar
            .as_ref()
            .map(|c| Tensor::from_fn(&[b, l, 2], |i| c.data()[(starts[i[0]] + i[1]) * 2 + i[2]]));
        Ok(WindowBatch {
            inputs,
            targets,
            starts,
            calendar,
        })
    }

    /// Consecutive batches of at most `size` windows in index order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Result<WindowBatch>> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let size = size.max(1);
        (0..self.len().div_ceil(size)).map(move |k| self.batch(&idx[k * size..((k + 1) * size).min(idx.len())]))
    }
}

/// Adds `N(0, std^2)` noise to the inputs only; `std = 0` returns an exact copy.
pub fn inject_noise(batch: &WindowBatch, std: f64, seed: u64) -> Result<WindowBatch> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::Config(format!("noise std must be finite and >= 0, got {std}")));
    }
    let mut out = batch.clone();
    if std == 0.0 {
        return Ok(out);
    }
    let mut rng = stream_rng(seed, "noise");
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    for x in out.inputs.data_mut() {
        *x += dist.sample(&mut rng);
    }
    Ok(out)
}

/// Draw ranges for [`synth_damped_sinusoids`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub variates: usize,
    pub rows: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub amplitude: (f64, f64),
    /// Integer periods drawn uniformly from this inclusive range.
    pub period: (u64, u64),
    pub decay: (f64, f64),
    /// Integer transient recurrence periods, inclusive range.
    pub transient: (u64, u64),
    /// Per-step slope range.
    pub trend: (f64, f64),
    /// Forces the first component of every variate to this period with amplitude 2 and no
    /// decay, and scales the other components by a quarter.
    pub dominant_period: Option<u64>,
    /// First timestamp (hourly steps); `None` omits the timestamp column.
    pub start: Option<NaiveDateTime>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            variates: 7,
            rows: 2000,
            seed: 1,
            noise_std: 0.1,
            amplitude: (0.5, 2.0),
            period: (12, 96),
            decay: (0.0, 3.0),
            transient: (96, 384),
            trend: (-1e-3, 1e-3),
            dominant_period: None,
            start: NaiveDateTime::parse_from_str("2016-07-01 00:00:00", "%Y-%m-%d %H:%M:%S").ok(),
        }
    }
}

pub const SYNTH_COMPONENTS: usize = 3;

/// Counter-based uniform on `[0, 1)`: the top 53 bits of
/// `splitmix64(splitmix64(seed) ^ (stream << 32) ^ index)`.
pub fn counter_uniform(seed: u64, stream: u64, index: u64) -> f64 {
    let z = splitmix64(splitmix64(seed) ^ (stream << 32) ^ index);
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Parameters of one damped-cosine component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub amplitude: f64,
    pub period: f64,
    pub decay: f64,
    pub transient: f64,
    pub phase: f64,
}

/// Per-variate draws: components plus the trend slope.
#[derive(Clone, Debug, PartialEq)]
pub struct VariateSpec {
    pub components: [Component; SYNTH_COMPONENTS],
    pub trend: f64,
}

impl VariateSpec {
    /// Noise-free value at step `t`.
    pub fn value_at(&self, t: usize) -> f64 {
        let tf = t as f64;
        let mut y = self.trend * tf;
        for c in &self.components {
            let frac = (t as u64 % c.transient as u64) as f64 / c.transient;
            y += c.amplitude * (-c.decay * frac).exp() * (std::f64::consts::TAU * tf / c.period + c.phase).cos();
        }
        y
    }
}

fn lerp((lo, hi): (f64, f64), u: f64) -> f64 {
    lo + (hi - lo) * u
}

fn int_draw((lo, hi): (u64, u64), u: f64) -> u64 {
    lo + ((u * (hi - lo + 1) as f64) as u64).min(hi - lo)
}

/// Draws for variate `v`. Stream `v` holds them in order
/// `[a, p, lambda, T, phi]` per component, then the trend.
pub fn variate_spec(cfg: &SynthConfig, v: usize) -> VariateSpec {
    let u = |k: u64| counter_uniform(cfg.seed, v as u64, k);
    let mut components = [Component {
        amplitude: 0.0,
        period: 1.0,
        decay: 0.0,
        transient: 1.0,
        phase: 0.0,
    }; SYNTH_COMPONENTS];
    for (j, c) in components.iter_mut().enumerate() {
        let k = 5 * j as u64;
        *c = Component {
            amplitude: lerp(cfg.amplitude, u(k)),
            period: int_draw(cfg.period, u(k + 1)) as f64,
            decay: lerp(cfg.decay, u(k + 2)),
            transient: int_draw(cfg.transient, u(k + 3)) as f64,
            phase: std::f64::consts::TAU * u(k + 4),
        };
        if let Some(p) = cfg.dominant_period {
            if j == 0 {
                c.amplitude = 2.0;
                c.period = p as f64;
                c.decay = 0.0;
            } else {
                c.amplitude *= 0.25;
            }
        }
    }
    VariateSpec {
        components,
        trend: lerp(cfg.trend, u(5 * SYNTH_COMPONENTS as u64)),
    }
}

/// Sum of three damped, recurrently restarted cosines plus a linear trend and Gaussian noise.
///
/// Noise at `(t, v)` uses Box-Muller on two counter draws from stream `2^31 + v`
/// at indices `2t` and `2t + 1`.
pub fn synth_damped_sinusoids(cfg: &SynthConfig) -> Result<SeriesTable> {
    if cfg.variates == 0 || cfg.rows == 0 {
        return Err(Error::Config("synthetic table needs at least one row and one variate".into()));
    }
    if cfg.period.0 == 0 || cfg.period.0 > cfg.period.1 || cfg.transient.0 == 0 || cfg.transient.0 > cfg.transient.1 {
        return Err(Error::Config("synthetic period ranges must be positive and ordered".into()));
    }
    if cfg.noise_std.is_nan() || cfg.noise_std < 0.0 {
        return Err(Error::Config(format!("noise_std must be >= 0, got {}", cfg.noise_std)));
    }
    let specs: Vec<VariateSpec> = (0..cfg.variates).map(|v| variate_spec(cfg, v)).collect();
    let values = Tensor::from_fn(&[cfg.rows, cfg.variates], |i| {
        let (t, v) = (i[0], i[1]);
        let mut y = specs[v].value_at(t);
        if cfg.noise_std > 0.0 {
            let stream = (1u64 << 31) + v as u64;
            let u1 = counter_uniform(cfg.seed, stream, 2 * t as u64);
            let u2 = counter_uniform(cfg.seed, stream, 2 * t as u64 + 1);
            let z = (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            y += cfg.noise_std * z;
        }
        y
    });
    let names = (1..=cfg.variates).map(|v| format!("var{v}")).collect();
    let stamps = cfg.start.map(|s0| {
        (0..cfg.rows)
            .map(|t| (s0 + chrono::Duration::hours(t as i64)).format("%Y-%m-%d %H:%M:%S").to_string())
            .collect()
    });
    let mut table = SeriesTable::new(values, names, stamps)?;
    table.interval = "1h".into();
    Ok(table)
}
