//! Flat `key = value` run configuration covering the model, the optimizer and the data split.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are ignored.
//! Unknown keys, repeated keys and unparsable values are errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    NoFftLaplace,
    NoTcn,
    NoFftLaplaceAndTcn,
    SelfAttention,
    NoAttention,
    Minimal,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::NoFftLaplace,
        Variant::NoTcn,
        Variant::NoFftLaplaceAndTcn,
        Variant::SelfAttention,
        Variant::NoAttention,
        Variant::Minimal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::NoFftLaplace => "no_fft_laplace",
            Variant::NoTcn => "no_tcn",
            Variant::NoFftLaplaceAndTcn => "no_fft_laplace_and_tcn",
            Variant::SelfAttention => "self_attention",
            Variant::NoAttention => "no_attention",
            Variant::Minimal => "minimal",
        }
    }

    pub fn has_laplace(self) -> bool {
        !matches!(self, Variant::NoFftLaplace | Variant::NoFftLaplaceAndTcn | Variant::Minimal)
    }

    pub fn has_tcn(self) -> bool {
        !matches!(self, Variant::NoTcn | Variant::NoFftLaplaceAndTcn | Variant::Minimal)
    }

    pub fn has_forward_branch(self) -> bool {
        self != Variant::Minimal
    }

    pub fn has_st_attention(self) -> bool {
        matches!(
            self,
            Variant::Baseline | Variant::NoFftLaplace | Variant::NoTcn | Variant::NoFftLaplaceAndTcn
        )
    }

    pub fn has_self_attention(self) -> bool {
        self == Variant::SelfAttention
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    /// Parameters are rounded to single precision after every update and stored as `f32`.
    F32,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got {s:?}"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        })
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "relu" => Ok(Activation::Relu),
        "identity" => Ok(Activation::Identity),
        "elu" => Ok(Activation::Elu),
        "silu" => Ok(Activation::Silu),
        _ => Err(Error::Config(format!("unknown activation {s:?}"))),
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Identity => "identity",
        Activation::Elu => "elu",
        Activation::Silu => "silu",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub variates: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub tcn_layers: usize,
    pub tcn_kernel: usize,
    pub tcn_depthwise: bool,
    pub tcn_residual: bool,
    pub tcn_activation: Activation,
    pub d_state: usize,
    pub e_dim: usize,
    /// `None` means equal to `rec_len`.
    pub harmonics: Option<usize>,
    /// `None` means equal to `d_model`.
    pub rec_len: Option<usize>,
    pub low_rank: Option<usize>,
    pub spectral_topk: Option<usize>,
    /// `None` means `2 * d_model`.
    pub d_ff: Option<usize>,
    pub ssm_zoh: bool,
    pub ssm_conv: bool,
    pub ssm_gating: bool,
    pub time_features: bool,
    pub precision: Precision,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 96,
            horizon: 96,
            variates: 7,
            d_model: 128,
            encoder_layers: 2,
            tcn_layers: 2,
            tcn_kernel: 3,
            tcn_depthwise: true,
            tcn_residual: true,
            tcn_activation: Activation::Relu,
            d_state: 16,
            e_dim: 64,
            harmonics: None,
            rec_len: None,
            low_rank: None,
            spectral_topk: None,
            d_ff: None,
            ssm_zoh: false,
            ssm_conv: true,
            ssm_gating: true,
            time_features: false,
            precision: Precision::F64,
            variant: Variant::Baseline,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn rec_len(&self) -> usize {
        self.rec_len.unwrap_or(self.d_model)
    }

    pub fn harmonics(&self) -> usize {
        self.harmonics.unwrap_or_else(|| self.rec_len())
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(2 * self.d_model)
    }

    /// Token count seen by the encoder (variates plus calendar tokens).
    pub fn tokens(&self) -> usize {
        self.variates + if self.time_features { 2 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("variates", self.variates),
            ("d_model", self.d_model),
            ("encoder_layers", self.encoder_layers),
            ("tcn_layers", self.tcn_layers),
            ("tcn_kernel", self.tcn_kernel),
            ("d_state", self.d_state),
            ("e_dim", self.e_dim),
            ("harmonics", self.harmonics()),
            ("rec_len", self.rec_len()),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be >= 1")));
            }
        }
        if let Some(r) = self.low_rank {
            if r == 0 || r >= self.rec_len().min(self.harmonics()) {
                return Err(Error::Config(format!(
                    "low_rank = {r} must satisfy 1 <= R < min(rec_len, harmonics) = {}",
                    self.rec_len().min(self.harmonics())
                )));
            }
        }
        if self.d_ff() < self.d_model {
            return Err(Error::Config(format!("d_ff = {} must be >= d_model = {}", self.d_ff(), self.d_model)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip: Option<f64>,
    /// Cap on optimizer steps per epoch (desk-scale runs); `None` uses every window.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            grad_clip: None,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0 || !c.is_finite()) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// CSV path; empty means none given.
    pub data: String,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub stride: usize,
    pub global_scale: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            data: String::new(),
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
            stride: 1,
            global_scale: true,
        }
    }
}

impl DataConfig {
    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.train_frac, self.val_frac, self.test_frac)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

/// `none` or a value.
fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" || value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt<T: fmt::Display>(v: &Option<T>, missing: &str) -> String {
    v.as_ref().map_or_else(|| missing.to_string(), T::to_string)
}

impl RunConfig {
    pub const KEYS: [&'static str; 40] = [
        "lookback",
        "horizon",
        "variates",
        "d_model",
        "encoder_layers",
        "tcn_layers",
        "tcn_kernel",
        "tcn_depthwise",
        "tcn_residual",
        "tcn_activation",
        "d_state",
        "e_dim",
        "harmonics",
        "rec_len",
        "low_rank",
        "spectral_topk",
        "d_ff",
        "ssm_zoh",
        "ssm_conv",
        "ssm_gating",
        "time_features",
        "precision",
        "variant",
        "seed",
        "lr",
        "beta1",
        "beta2",
        "adam_eps",
        "batch_size",
        "max_epochs",
        "patience",
        "grad_clip",
        "steps_per_epoch",
        "data",
        "train_frac",
        "val_frac",
        "test_frac",
        "stride",
        "global_scale",
        "config_version",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "lookback" => m.lookback = parse(key, value)?,
            "horizon" => m.horizon = parse(key, value)?,
            "variates" => m.variates = parse(key, value)?,
            "d_model" => m.d_model = parse(key, value)?,
            "encoder_layers" => m.encoder_layers = parse(key, value)?,
            "tcn_layers" => m.tcn_layers = parse(key, value)?,
            "tcn_kernel" => m.tcn_kernel = parse(key, value)?,
            "tcn_depthwise" => m.tcn_depthwise = parse_bool(key, value)?,
            "tcn_residual" => m.tcn_residual = parse_bool(key, value)?,
            "tcn_activation" => m.tcn_activation = parse_activation(value)?,
            "d_state" => m.d_state = parse(key, value)?,
            "e_dim" => m.e_dim = parse(key, value)?,
            "harmonics" => m.harmonics = parse_opt(key, value)?,
            "rec_len" => m.rec_len = parse_opt(key, value)?,
            "low_rank" => m.low_rank = parse_opt(key, value)?,
            "spectral_topk" => m.spectral_topk = parse_opt(key, value)?,
            "d_ff" => m.d_ff = parse_opt(key, value)?,
            "ssm_zoh" => m.ssm_zoh = parse_bool(key, value)?,
            "ssm_conv" => m.ssm_conv = parse_bool(key, value)?,
            "ssm_gating" => m.ssm_gating = parse_bool(key, value)?,
            "time_features" => m.time_features = parse_bool(key, value)?,
            "precision" => m.precision = value.parse()?,
            "variant" => m.variant = value.parse()?,
            "seed" => m.seed = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse_opt(key, value)?,
            "steps_per_epoch" => t.steps_per_epoch = parse_opt(key, value)?,
            "data" => d.data = value.to_string(),
            "train_frac" => d.train_frac = parse(key, value)?,
            "val_frac" => d.val_frac = parse(key, value)?,
            "test_frac" => d.test_frac = parse(key, value)?,
            "stride" => d.stride = parse(key, value)?,
            "global_scale" => d.global_scale = parse_bool(key, value)?,
            "config_version" => {
                if value != "1" {
                    return Err(Error::Config(format!("unsupported config_version {value:?}")));
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in [`RunConfig::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let values = [
            m.lookback.to_string(),
            m.horizon.to_string(),
            m.variates.to_string(),
            m.d_model.to_string(),
            m.encoder_layers.to_string(),
            m.tcn_layers.to_string(),
            m.tcn_kernel.to_string(),
            m.tcn_depthwise.to_string(),
            m.tcn_residual.to_string(),
            activation_name(m.tcn_activation).to_string(),
            m.d_state.to_string(),
            m.e_dim.to_string(),
            show_opt(&m.harmonics, "auto"),
            show_opt(&m.rec_len, "auto"),
            show_opt(&m.low_rank, "none"),
            show_opt(&m.spectral_topk, "none"),
            show_opt(&m.d_ff, "auto"),
            m.ssm_zoh.to_string(),
            m.ssm_conv.to_string(),
            m.ssm_gating.to_string(),
            m.time_features.to_string(),
            m.precision.to_string(),
            m.variant.to_string(),
            m.seed.to_string(),
            format!("{:?}", t.lr),
            format!("{:?}", t.beta1),
            format!("{:?}", t.beta2),
            format!("{:?}", t.adam_eps),
            t.batch_size.to_string(),
            t.max_epochs.to_string(),
            t.patience.to_string(),
            t.grad_clip.map_or_else(|| "none".into(), |c| format!("{c:?}")),
            show_opt(&t.steps_per_epoch, "none"),
            d.data.clone(),
            format!("{:?}", d.train_frac),
            format!("{:?}", d.val_frac),
            format!("{:?}", d.test_frac),
            d.stride.to_string(),
            d.global_scale.to_string(),
            "1".to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    /// Replaces `auto` sizes with the values they stand for.
    pub fn resolve(&mut self) {
        let m = &mut self.model;
        m.rec_len = Some(m.rec_len());
        m.harmonics = Some(m.harmonics());
        m.d_ff = Some(m.d_ff());
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let (a, b, c) = self.data.fractions();
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
            )));
        }
        if self.data.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Applies the `key = value` lines of `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", no + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key {k:?} given twice", no + 1)));
            }
            self.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    /// `key=value` override as given on a command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(&e))))
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the key-sorted `key=value` lines.
    pub fn hash(&self) -> String {
        let mut entries = self.entries();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let mut h = Sha256::new();
        for (k, v) in entries {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.model.low_rank = Some(4);
        c.model.variant = Variant::NoTcn;
        c.train.lr = 3e-4;
        c.train.grad_clip = Some(1.0);
        c.data.data = "x/y.csv".into();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(c.entries().len(), RunConfig::KEYS.len());
    }

    #[test]
    fn unknown_and_repeated_keys_rejected() {
        assert!(matches!(RunConfig::from_text("lookbak = 3"), Err(Error::Config(m)) if m.contains("lookbak")));
        assert!(RunConfig::from_text("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::from_text("seed = x").is_err());
        assert!(RunConfig::from_text("# comment\n\nseed = 4").is_ok());
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::from_text("seed = 1\nd_model = 32").unwrap();
        c.apply_override("seed=9").unwrap();
        assert_eq!(c.model.seed, 9);
        assert_eq!(c.model.d_model, 32);
        assert!(c.apply_override("nope=1").is_err());
    }

    #[test]
    fn hash_tracks_every_value() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.model.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.model.low_rank = Some(128);
        assert!(c.validate().is_err());
        c.model.low_rank = None;
        c.data.val_frac = 0.2;
        assert!(c.validate().is_err());
        c.data.val_frac = 0.1;
        c.model.d_ff = Some(8);
        assert!(c.validate().is_err());
    }

    #[test]
    fn resolve_fills_autos() {
        let mut c = RunConfig::default();
        c.model.d_model = 16;
        c.resolve();
        assert_eq!((c.model.rec_len, c.model.harmonics, c.model.d_ff), (Some(16), Some(16), Some(32)));
    }

    #[test]
    fn variants_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("full".parse::<Variant>().is_err());
    }
}
