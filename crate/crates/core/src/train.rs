//! Metrics, the Adam optimizer, dataset preparation and the training loop.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::config::{Precision, RunConfig};
use crate::data::{inject_noise, make_windows, split_chronological, Scaler, SeriesTable, Splits, WindowBatch, Windows};
use crate::error::{Error, Result};
use crate::model::UniMamba;
use crate::nn::{stream_rng, ParamStore, Session};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Running sums so metrics over many batches equal metrics over their concatenation.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricSums {
    pub sq: f64,
    pub abs: f64,
    pub count: usize,
}

impl MetricSums {
    pub fn add(&mut self, pred: &Tensor, truth: &Tensor) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(Error::shape("metrics", pred.shape(), truth.shape()));
        }
        for (p, t) in pred.data().iter().zip(truth.data()) {
            let e = p - t;
            self.sq += e * e;
            self.abs += e.abs();
        }
        self.count += pred.numel();
        Ok(())
    }

    pub fn finish(&self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            mse: self.sq / n,
            mae: self.abs / n,
        }
    }
}

pub fn compute_metrics(pred: &Tensor, truth: &Tensor) -> Result<Metrics> {
    let mut s = MetricSums::default();
    s.add(pred, truth)?;
    Ok(s.finish())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: store.values().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: store.values().iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// One bias-corrected update of every parameter.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                pd[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}

pub fn round_store_to_f32(store: &mut ParamStore) {
    for t in store.values_mut() {
        *t = t.round_to_f32();
    }
}

/// Splits of a table, standardized with training statistics (or left as is).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub splits: Splits,
    pub scaler: Scaler,
}

impl Dataset {
    pub fn prepare(table: &SeriesTable, cfg: &RunConfig) -> Result<Dataset> {
        let m = &cfg.model;
        if table.variates() != m.variates {
            return Err(Error::Config(format!(
                "config has variates = {} but the data has {} value columns",
                m.variates,
                table.variates()
            )));
        }
        let raw = split_chronological(table, cfg.data.fractions(), m.lookback + m.horizon)?;
        let scaler = if cfg.data.global_scale {
            Scaler::fit(&raw.train)
        } else {
            Scaler::identity(table.variates())
        };
        Ok(Dataset {
            splits: Splits {
                train: scaler.transform(&raw.train)?,
                val: scaler.transform(&raw.val)?,
                test: scaler.transform(&raw.test)?,
            },
            scaler,
        })
    }

    pub fn windows<'a>(&'a self, part: &'a SeriesTable, cfg: &RunConfig) -> Result<Windows<'a>> {
        make_windows(part, cfg.model.lookback, cfg.model.horizon, cfg.data.stride, cfg.model.time_features)
    }
}

/// Metrics of `model` over every window, optionally with input noise `(std, seed)`.
/// Noise for batch `k` uses seed `seed + k`.
pub fn evaluate(model: &UniMamba, windows: &Windows<'_>, batch_size: usize, noise: Option<(f64, u64)>) -> Result<Metrics> {
    let mut sums = MetricSums::default();
    for (k, batch) in windows.batches(batch_size).enumerate() {
        let mut batch = batch?;
        if let Some((std, seed)) = noise {
            batch = inject_noise(&batch, std, seed.wrapping_add(k as u64))?;
        }
        let pred = model.predict(&batch.inputs, batch.calendar.as_ref())?;
        sums.add(&pred, &batch.targets)?;
    }
    Ok(sums.finish())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
    /// Mean and std of wall milliseconds per optimizer step, warmup steps excluded.
    pub ms_per_iter: (f64, f64),
}

/// Steps excluded from timing statistics.
pub const TIMING_WARMUP: usize = 10;

pub fn timing_stats(ms: &[f64], warmup: usize) -> (f64, f64) {
    let kept = if ms.len() > warmup { &ms[warmup..] } else { ms };
    if kept.is_empty() {
        return (0.0, 0.0);
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One optimizer step on `batch`; returns the batch training MSE.
pub fn train_step(model: &mut UniMamba, opt: &mut Adam, batch: &WindowBatch, clip: Option<f64>) -> Result<f64> {
    let tape = Tape::new();
    let s = Session::new(&tape, &model.store, true);
    let pred = model.forecast(&s, &batch.inputs, batch.calendar.as_ref())?;
    let loss = pred.mse(tape.constant(batch.targets.clone()))?;
    let value = loss.value().item();
    let grads = tape.backward(loss)?;
    let mut g = s.collect_grads(&grads);
    drop(s);
    if let Some(c) = clip {
        clip_global_norm(&mut g, c);
    }
    if g.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { op: "gradient" });
    }
    opt.update(&mut model.store, &g);
    if model.cfg.precision == Precision::F32 {
        round_store_to_f32(&mut model.store);
    }
    Ok(value)
}

/// Minimizes training MSE with Adam, tracks validation metrics per epoch, stops after
/// `patience` epochs without improvement and restores the best-validation weights.
pub fn train(model: &mut UniMamba, data: &Dataset, cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<History> {
    let t = &cfg.train;
    let train_w = data.windows(&data.splits.train, cfg)?;
    let val_w = data.windows(&data.splits.val, cfg)?;
    if model.cfg.precision == Precision::F32 {
        round_store_to_f32(&mut model.store);
    }
    let mut opt = Adam::new(&model.store, t.lr, t.beta1, t.beta2, t.adam_eps);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut epochs = Vec::new();
    let mut step_ms = Vec::new();
    let mut steps = 0;
    let mut stale = 0;
    for epoch in 1..=t.max_epochs {
        let mut order: Vec<usize> = (0..train_w.len()).collect();
        order.shuffle(&mut stream_rng(cfg.model.seed, &format!("shuffle.{epoch}")));
        let mut chunks: Vec<&[usize]> = order.chunks(t.batch_size).collect();
        if let Some(cap) = t.steps_per_epoch {
            chunks.truncate(cap);
        }
        let mut loss_sum = 0.0;
        for (i, idx) in chunks.iter().enumerate() {
            let batch = train_w.batch(idx)?;
            let start = Instant::now();
            let loss = match train_step(model, &mut opt, &batch, t.grad_clip) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::Divergence { epoch, step: i + 1 }),
                Err(e) => return Err(e),
            };
            step_ms.push(start.elapsed().as_secs_f64() * 1e3);
            loss_sum += loss;
            steps += 1;
        }
        let train_mse = loss_sum / chunks.len().max(1) as f64;
        let val = evaluate(model, &val_w, t.batch_size, None)?;
        log(&format!(
            "epoch {epoch} train_mse {train_mse:.6} val_mse {:.6} val_mae {:.6}",
            val.mse, val.mae
        ));
        epochs.push(EpochRecord { epoch, train_mse, val });
        if best.as_ref().is_none_or(|(b, _, _)| val.mse < *b) {
            best = Some((val.mse, epoch, model.store.values().to_vec()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= t.patience {
                log(&format!("early stop after epoch {epoch}"));
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, values)) => {
            model.store.values_mut().clone_from_slice(&values);
            e
        }
        None => 0,
    };
    Ok(History {
        epochs,
        best_epoch,
        steps,
        ms_per_iter: timing_stats(&step_ms, TIMING_WARMUP),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{synth_damped_sinusoids, SynthConfig};
    use crate::gradcheck::probe_weights;

    #[test]
    fn metric_examples() {
        let t = probe_weights(&[2, 3, 4], 1);
        assert_eq!(compute_metrics(&t, &t).unwrap(), Metrics { mse: 0.0, mae: 0.0 });
        let m = compute_metrics(&t.map(|x| x + 1.0), &t).unwrap();
        assert!((m.mse - 1.0).abs() <= 1e-15 && (m.mae - 1.0).abs() <= 1e-15);
        assert!(compute_metrics(&t, &Tensor::zeros(&[2, 3, 5])).is_err());
    }

    #[test]
    fn metrics_match_double_loop() {
        let (p, t) = (probe_weights(&[5, 6, 3], 2), probe_weights(&[5, 6, 3], 3));
        let m = compute_metrics(&p, &t).unwrap();
        let (mut sq, mut ab) = (0.0, 0.0);
        for i in 0..5 * 6 {
            for v in 0..3 {
                let e = p.data()[i * 3 + v] - t.data()[i * 3 + v];
                sq += e * e;
                ab += e.abs();
            }
        }
        assert!((m.mse - sq / 90.0).abs() <= 1e-12 && (m.mae - ab / 90.0).abs() <= 1e-12);
        assert!(m.mae * m.mae <= m.mse);
    }

    #[test]
    fn concatenated_metrics_are_weighted_average() {
        let (p, t) = (probe_weights(&[7, 4, 2], 4), probe_weights(&[7, 4, 2], 5));
        let whole = compute_metrics(&p, &t).unwrap();
        let split = |x: &Tensor, a: usize, n: usize| Tensor::new(&[n, 4, 2], x.data()[a * 8..(a + n) * 8].to_vec()).unwrap();
        let m1 = compute_metrics(&split(&p, 0, 3), &split(&t, 0, 3)).unwrap();
        let m2 = compute_metrics(&split(&p, 3, 4), &split(&t, 3, 4)).unwrap();
        assert!((whole.mse - (3.0 * m1.mse + 4.0 * m2.mse) / 7.0).abs() <= 1e-9);
        assert!((whole.mae - (3.0 * m1.mae + 4.0 * m2.mae) / 7.0).abs() <= 1e-9);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::full(&[4], 3.0), Tensor::full(&[1], 4.0)];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - (36.0f64 + 16.0).sqrt()).abs() <= 1e-12);
        let after: f64 = g.iter().flat_map(|t| t.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() <= 1e-12);
    }

    fn small_run() -> (RunConfig, SeriesTable) {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            lookback: 24,
            horizon: 6,
            variates: 2,
            d_model: 8,
            encoder_layers: 1,
            d_state: 2,
            e_dim: 4,
            seed: 5,
            ..ModelConfig::default()
        };
        cfg.train.batch_size = 8;
        cfg.train.max_epochs = 2;
        cfg.train.steps_per_epoch = Some(3);
        cfg.data.stride = 4;
        let table = synth_damped_sinusoids(&SynthConfig {
            rows: 300,
            variates: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        (cfg, table)
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let (mut cfg, table) = small_run();
        cfg.train.lr = 0.0;
        let data = Dataset::prepare(&table, &cfg).unwrap();
        let mut model = UniMamba::new(cfg.model.clone()).unwrap();
        let before = model.store.values().to_vec();
        train(&mut model, &data, &cfg, &mut |_| {}).unwrap();
        for (a, b) in before.iter().zip(model.store.values()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn training_is_deterministic_and_restores_best() {
        let (cfg, table) = small_run();
        let data = Dataset::prepare(&table, &cfg).unwrap();
        let run = || {
            let mut model = UniMamba::new(cfg.model.clone()).unwrap();
            let mut lines = Vec::new();
            let h = train(&mut model, &data, &cfg, &mut |l| lines.push(l.to_string())).unwrap();
            (model.store.values().to_vec(), h, lines)
        };
        let (p1, h1, l1) = run();
        let (p2, h2, l2) = run();
        assert_eq!(p1, p2);
        assert_eq!(h1.epochs, h2.epochs);
        assert_eq!(l1, l2);
        assert_eq!(h1.steps, 6);
        let best = h1.epochs.iter().map(|e| e.val.mse).fold(f64::INFINITY, f64::min);
        assert_eq!(h1.epochs[h1.best_epoch - 1].val.mse, best);
        let mut model = UniMamba::new(cfg.model.clone()).unwrap();
        model.store.values_mut().clone_from_slice(&p1);
        let val = evaluate(&model, &data.windows(&data.splits.val, &cfg).unwrap(), 8, None).unwrap();
        assert_eq!(val, h1.epochs[h1.best_epoch - 1].val);
    }

    #[test]
    fn f32_mode_keeps_parameters_representable() {
        let (mut cfg, table) = small_run();
        cfg.model.precision = Precision::F32;
        let data = Dataset::prepare(&table, &cfg).unwrap();
        let mut model = UniMamba::new(cfg.model.clone()).unwrap();
        train(&mut model, &data, &cfg, &mut |_| {}).unwrap();
        assert!(model
            .store
            .values()
            .iter()
            .all(|t| t.data().iter().all(|x| (*x as f32) as f64 == *x)));
    }

    #[test]
    fn divergence_reports_step() {
        let (mut cfg, table) = small_run();
        cfg.train.lr = 1e300;
        let data = Dataset::prepare(&table, &cfg).unwrap();
        let mut model = UniMamba::new(cfg.model.clone()).unwrap();
        let e = train(&mut model, &data, &cfg, &mut |_| {}).unwrap_err();
        assert!(matches!(e, Error::Divergence { epoch: 1, .. }), "{e:?}");
    }

    #[test]
    fn variate_mismatch_is_config_error() {
        let (mut cfg, table) = small_run();
        cfg.model.variates = 3;
        assert!(matches!(Dataset::prepare(&table, &cfg), Err(Error::Config(_))));
    }
}
