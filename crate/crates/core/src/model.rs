//! End-to-end forecaster: instance normalization, variate-token embedding, stacked
//! encoder layers, a shared linear head and denormalization.

use crate::attention::{FfnTd, SelfAttention, StAttention};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::laplace::{LaplaceBlock, LaplaceConfig};
use crate::mamba::{MambaBlock, MambaConfig};
use crate::nn::{Linear, ParamStore, Session};
use crate::tcn::{TcnConfig, TcnStack};
use crate::tensor::{Tensor, Var};

/// Lower bound applied to per-window standard deviations.
pub const NORM_EPS: f64 = 1e-5;

/// Per-window, per-variate statistics over the lookback axis, each `[B, 1, V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Tensor,
    pub std: Tensor,
}

/// z-scores `x: [B, L, V]` along `L`; population std clamped below at [`NORM_EPS`].
pub fn normalize(x: &Tensor) -> Result<(Tensor, NormStats)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape("normalize", s, &[0, 0, 0]));
    }
    let (b, l, v) = (s[0], s[1], s[2]);
    let d = x.data();
    let mut mean = vec![0.0; b * v];
    let mut std = vec![0.0; b * v];
    for bi in 0..b {
        for vi in 0..v {
            let col = (0..l).map(|t| d[(bi * l + t) * v + vi]);
            let m = col.clone().sum::<f64>() / l as f64;
            let var = col.map(|x| (x - m) * (x - m)).sum::<f64>() / l as f64;
            mean[bi * v + vi] = m;
            std[bi * v + vi] = var.sqrt().max(NORM_EPS);
        }
    }
    let out = Tensor::from_fn(s, |i| (d[(i[0] * l + i[1]) * v + i[2]] - mean[i[0] * v + i[2]]) / std[i[0] * v + i[2]]);
    Ok((
        out,
        NormStats {
            mean: Tensor::new(&[b, 1, v], mean)?,
            std: Tensor::new(&[b, 1, v], std)?,
        },
    ))
}

/// Inverse of [`normalize`] for `y: [B, T, V]` under the same statistics.
pub fn denormalize<'t>(y: Var<'t>, stats: &NormStats) -> Result<Var<'t>> {
    let tape = y.tape();
    y.mul(tape.constant(stats.std.clone()))?.add(tape.constant(stats.mean.clone()))
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub laplace: Option<LaplaceBlock>,
    pub tcn: Option<TcnStack>,
    /// Maps the forward branch back to width `D`; the lone map when both spectral stages are removed.
    pub fw_proj: Option<Linear>,
    pub mamba: MambaBlock,
    pub st_attention: Option<StAttention>,
    pub self_attention: Option<SelfAttention>,
    pub ffn: FfnTd,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let v = cfg.variant;
        let (tokens, d) = (cfg.tokens(), cfg.d_model);
        let laplace = if v.has_laplace() {
            Some(LaplaceBlock::new(
                store,
                &format!("{name}.laplace"),
                LaplaceConfig {
                    d_in: d,
                    rec_len: cfg.rec_len(),
                    harmonics: cfg.harmonics(),
                    low_rank: cfg.low_rank,
                    spectral_topk: cfg.spectral_topk,
                },
            )?)
        } else {
            None
        };
        let tcn = if v.has_tcn() {
            Some(TcnStack::new(
                store,
                &format!("{name}.tcn"),
                TcnConfig {
                    channels: tokens,
                    layers: cfg.tcn_layers,
                    kernel_size: cfg.tcn_kernel,
                    activation: cfg.tcn_activation,
                    residual: cfg.tcn_residual,
                    depthwise: cfg.tcn_depthwise,
                },
            )?)
        } else {
            None
        };
        let fw_in = if laplace.is_some() { cfg.rec_len() } else { d };
        let fw_proj = if v.has_forward_branch() {
            Some(Linear::new(store, &format!("{name}.fw_proj"), fw_in, d, true)?)
        } else {
            None
        };
        let mamba = MambaBlock::new(
            store,
            &format!("{name}.mamba"),
            MambaConfig {
                zoh: cfg.ssm_zoh,
                use_conv: cfg.ssm_conv,
                gating: cfg.ssm_gating,
                ..MambaConfig::new(d, cfg.d_state)
            },
        )?;
        let st_attention = if v.has_st_attention() {
            Some(StAttention::new(store, &format!("{name}.st_attention"), tokens, d, cfg.e_dim)?)
        } else {
            None
        };
        let self_attention = if v.has_self_attention() {
            Some(SelfAttention::new(store, &format!("{name}.self_attention"), d)?)
        } else {
            None
        };
        let ffn = FfnTd::new(store, &format!("{name}.ffn"), d, cfg.d_ff())?;
        Ok(EncoderLayer {
            laplace,
            tcn,
            fw_proj,
            mamba,
            st_attention,
            self_attention,
            ffn,
        })
    }

    /// `[B, N, D] -> [B, N, D]`.
    pub fn forward<'t>(&self, s: &Session<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let mut fused = h.add(self.mamba.backward_branch(s, h)?)?;
        if let Some(proj) = &self.fw_proj {
            let mut fw = h;
            if let Some(lap) = &self.laplace {
                fw = lap.forward(s, fw)?;
            }
            if let Some(tcn) = &self.tcn {
                fw = tcn.forward(s, fw)?;
            }
            fused = fused.add(proj.forward(s, fw)?)?;
        }
        if let Some(att) = &self.st_attention {
            fused = att.forward(s, fused)?;
        }
        if let Some(att) = &self.self_attention {
            fused = att.forward(s, fused)?;
        }
        self.ffn.forward(s, fused)
    }
}

#[derive(Clone, Debug)]
pub struct UniMamba {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embed: Linear,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
}

impl UniMamba {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let embed = Linear::new(&mut store, "embed", cfg.lookback, cfg.d_model, true)?;
        let layers = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("layer{i}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut store, "head", cfg.d_model, cfg.horizon, true)?;
        Ok(UniMamba {
            cfg,
            store,
            embed,
            layers,
            head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    fn check_input(&self, x: &Tensor, calendar: Option<&Tensor>) -> Result<()> {
        let s = x.shape();
        let (l, v) = (self.cfg.lookback, self.cfg.variates);
        if s.len() != 3 || s[1] != l || s[2] != v {
            return Err(Error::Config(format!(
                "model expects input [B, {l}, {v}] (lookback {l}, {v} variates), got {s:?}"
            )));
        }
        match (self.cfg.time_features, calendar) {
            (true, Some(c)) if c.shape() == [s[0], l, 2] => Ok(()),
            (true, Some(c)) => Err(Error::Config(format!(
                "calendar features must be [{}, {l}, 2], got {:?}",
                s[0],
                c.shape()
            ))),
            (true, None) => Err(Error::Config("time_features is on but no timestamps were supplied".into())),
            (false, _) => Ok(()),
        }
    }

    /// Normalized, transposed tokens `[B, N, L]` plus the statistics to undo the scaling.
    pub fn tokens(&self, x: &Tensor, calendar: Option<&Tensor>) -> Result<(Tensor, NormStats)> {
        self.check_input(x, calendar)?;
        let (xn, stats) = normalize(x)?;
        let (b, l, v) = (x.shape()[0], self.cfg.lookback, self.cfg.variates);
        let n = self.cfg.tokens();
        let tok = Tensor::from_fn(&[b, n, l], |i| {
            if i[1] < v {
                xn.data()[(i[0] * l + i[2]) * v + i[1]]
            } else {
                calendar.expect("checked").data()[(i[0] * l + i[2]) * 2 + (i[1] - v)]
            }
        });
        Ok((tok, stats))
    }

    /// `x: [B, L, V] -> [B, P, V]`. `calendar: [B, L, 2]` is needed only with time features.
    pub fn forecast<'t>(&self, s: &Session<'t>, x: &Tensor, calendar: Option<&Tensor>) -> Result<Var<'t>> {
        let (tok, stats) = self.tokens(x, calendar)?;
        let mut h = self.embed.forward(s, s.constant(tok))?;
        for layer in &self.layers {
            h = layer.forward(s, h)?;
        }
        let y = self
            .head
            .forward(s, h)?
            .narrow(1, 0, self.cfg.variates)?
            .transpose(1, 2)?;
        denormalize(y, &stats)
    }

    /// Forecast without recording gradients.
    pub fn predict(&self, x: &Tensor, calendar: Option<&Tensor>) -> Result<Tensor> {
        let tape = crate::tensor::Tape::new();
        let s = Session::new(&tape, &self.store, false);
        Ok(self.forecast(&s, x, calendar)?.value())
    }
}

/// Hour-of-day and day-of-week scaled to `[-0.5, 0.5]`.
pub fn calendar_features(hour: u32, weekday: u32) -> [f64; 2] {
    [hour as f64 / 23.0 - 0.5, weekday as f64 / 6.0 - 0.5]
}
