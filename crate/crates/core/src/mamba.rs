//! Selective state-space block scanned along the token axis.
//!
//! Per channel `d` and state `n`:
//! `h_t = exp(dt_t A) h_{t-1} + Bbar_t x_t`, `y_t = sum_n C_t[n] h_t[n] + D_skip x_t`,
//! with `Bbar = dt B` (Euler) or `(exp(dt A) - 1) / A * B` (zero-order hold).

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{stream_rng, Init, Linear, ParamId, ParamStore, Session};
use crate::tensor::{ConvSpec, Tensor, Var};

pub const DT_MIN: f64 = 0.001;
pub const DT_MAX: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub conv_width: usize,
    /// Exact zero-order-hold input matrix instead of the Euler `dt * B`.
    pub zoh: bool,
    pub use_conv: bool,
    pub gating: bool,
}

impl MambaConfig {
    pub fn new(d_model: usize, d_state: usize) -> Self {
        MambaConfig {
            d_model,
            d_state,
            conv_width: 4,
            zoh: false,
            use_conv: true,
            gating: true,
        }
    }
}

/// Raw tensors consumed by the scan.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a> {
    /// `[B, T, D]`
    pub x: &'a Tensor,
    /// `[B, T, D]`, positive
    pub delta: &'a Tensor,
    /// `[D, N]`, negative
    pub a: &'a Tensor,
    /// `[B, T, N]`
    pub b: &'a Tensor,
    /// `[B, T, N]`
    pub c: &'a Tensor,
    /// `[D]`
    pub d_skip: &'a Tensor,
    pub zoh: bool,
}

struct Dims {
    batch: usize,
    len: usize,
    chans: usize,
    states: usize,
}

fn scan_dims(i: &ScanInputs<'_>) -> Result<Dims> {
    let xs = i.x.shape();
    if xs.len() != 3 {
        return Err(Error::shape("selective_scan", xs, i.delta.shape()));
    }
    let (batch, len, chans) = (xs[0], xs[1], xs[2]);
    let states = i.a.shape().last().copied().unwrap_or(0);
    let checks: [(&Tensor, Vec<usize>); 5] = [
        (i.delta, vec![batch, len, chans]),
        (i.a, vec![chans, states]),
        (i.b, vec![batch, len, states]),
        (i.c, vec![batch, len, states]),
        (i.d_skip, vec![chans]),
    ];
    for (t, want) in &checks {
        if t.shape() != want.as_slice() {
            return Err(Error::shape("selective_scan", t.shape(), want));
        }
    }
    Ok(Dims {
        batch,
        len,
        chans,
        states,
    })
}

#[inline]
fn input_gain(zoh: bool, abar: f64, delta: f64, a: f64) -> f64 {
    if zoh {
        (abar - 1.0) / a
    } else {
        delta
    }
}

/// Runs the recurrence; returns `y: [B, T, D]` and the states `h: [B, T, D, N]`.
pub fn scan_forward(i: ScanInputs<'_>) -> Result<(Tensor, Tensor)> {
    let g = scan_dims(&i)?;
    let (xd, dd, ad, bd, cd, sd) = (i.x.data(), i.delta.data(), i.a.data(), i.b.data(), i.c.data(), i.d_skip.data());
    let mut y = vec![0.0; g.batch * g.len * g.chans];
    let mut hs = vec![0.0; g.batch * g.len * g.chans * g.states];
    for b in 0..g.batch {
        for d in 0..g.chans {
            for n in 0..g.states {
                let a = ad[d * g.states + n];
                let mut h = 0.0;
                for t in 0..g.len {
                    let xi = (b * g.len + t) * g.chans + d;
                    let si = (b * g.len + t) * g.states + n;
                    let abar = (dd[xi] * a).exp();
                    h = abar * h + input_gain(i.zoh, abar, dd[xi], a) * bd[si] * xd[xi];
                    hs[xi * g.states + n] = h;
                    y[xi] += cd[si] * h;
                }
            }
            for t in 0..g.len {
                let xi = (b * g.len + t) * g.chans + d;
                y[xi] += sd[d] * xd[xi];
            }
        }
    }
    let shape = i.x.shape().to_vec();
    let mut hshape = shape.clone();
    hshape.push(g.states);
    Ok((Tensor::from_parts(shape, y), Tensor::from_parts(hshape, hs)))
}

/// Gradients of `sum(gy * y)` for every scan input, in `ScanInputs` field order.
fn scan_backward(i: ScanInputs<'_>, hs: &Tensor, gy: &Tensor) -> [Tensor; 6] {
    let g = scan_dims(&i).expect("validated in forward");
    let (xd, dd, ad, bd, cd, sd) = (i.x.data(), i.delta.data(), i.a.data(), i.b.data(), i.c.data(), i.d_skip.data());
    let (hd, gyd) = (hs.data(), gy.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gdelta = vec![0.0; dd.len()];
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    let mut gc = vec![0.0; cd.len()];
    let mut gs = vec![0.0; sd.len()];
    for b in 0..g.batch {
        for d in 0..g.chans {
            for n in 0..g.states {
                let a = ad[d * g.states + n];
                let mut carry = 0.0;
                for t in (0..g.len).rev() {
                    let xi = (b * g.len + t) * g.chans + d;
                    let si = (b * g.len + t) * g.states + n;
                    let h = hd[xi * g.states + n];
                    let h_prev = if t == 0 { 0.0 } else { hd[(xi - g.chans) * g.states + n] };
                    gc[si] += gyd[xi] * h;
                    let gh = gyd[xi] * cd[si] + carry;
                    let delta = dd[xi];
                    let abar = (delta * a).exp();
                    let gain = input_gain(i.zoh, abar, delta, a);
                    let g_abar = gh * h_prev;
                    let g_in = gh * xd[xi];
                    gx[xi] += gh * gain * bd[si];
                    gb[si] += g_in * gain;
                    let g_gain = g_in * bd[si];
                    if i.zoh {
                        gdelta[xi] += g_gain * abar;
                        ga[d * g.states + n] += g_gain * (delta * abar * a - (abar - 1.0)) / (a * a);
                    } else {
                        gdelta[xi] += g_gain;
                    }
                    gdelta[xi] += g_abar * a * abar;
                    ga[d * g.states + n] += g_abar * delta * abar;
                    carry = gh * abar;
                }
            }
            for t in 0..g.len {
                let xi = (b * g.len + t) * g.chans + d;
                gx[xi] += gyd[xi] * sd[d];
                gs[d] += gyd[xi] * xd[xi];
            }
        }
    }
    let mk = |t: &Tensor, v: Vec<f64>| Tensor::from_parts(t.shape().to_vec(), v);
    [
        mk(i.x, gx),
        mk(i.delta, gdelta),
        mk(i.a, ga),
        mk(i.b, gb),
        mk(i.c, gc),
        mk(i.d_skip, gs),
    ]
}

/// Fused scan op; the tape stores every hidden state for the backward sweep.
pub fn selective_scan<'t>(
    x: Var<'t>,
    delta: Var<'t>,
    a: Var<'t>,
    b: Var<'t>,
    c: Var<'t>,
    d_skip: Var<'t>,
    zoh: bool,
) -> Result<Var<'t>> {
    let vals = [x, delta, a, b, c, d_skip].map(|v| v.value());
    fn inputs(v: &[Tensor; 6], zoh: bool) -> ScanInputs<'_> {
        ScanInputs {
            x: &v[0],
            delta: &v[1],
            a: &v[2],
            b: &v[3],
            c: &v[4],
            d_skip: &v[5],
            zoh,
        }
    }
    let (y, hs) = scan_forward(inputs(&vals, zoh))?;
    let needs = [x, delta, a, b, c, d_skip].map(|v| v.requires_grad());
    x.tape()
        .record("selective_scan", y, &[x, delta, a, b, c, d_skip], move |gy| {
            let grads = scan_backward(inputs(&vals, zoh), &hs, gy);
            grads.into_iter().zip(needs).map(|(g, n)| n.then_some(g)).collect()
        })
}

#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub in_proj: Linear,
    pub conv_kernel: Option<ParamId>,
    pub conv_bias: Option<ParamId>,
    pub dt_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: Linear,
    pub cfg: MambaConfig,
}

/// `log(exp(y) - 1)`, the inverse of softplus.
fn inv_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl MambaBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: MambaConfig) -> Result<Self> {
        let (d, n) = (cfg.d_model, cfg.d_state);
        if d == 0 || n == 0 || cfg.conv_width == 0 {
            return Err(Error::Config(format!("mamba dimensions must be positive: {cfg:?}")));
        }
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), d, 2 * d, true)?;
        let (conv_kernel, conv_bias) = if cfg.use_conv {
            let bound = 1.0 / (cfg.conv_width as f64).sqrt();
            (
                Some(store.add(&format!("{name}.conv.kernel"), &[d, 1, cfg.conv_width], Init::Uniform(bound))?),
                Some(store.add(&format!("{name}.conv.bias"), &[d], Init::Uniform(bound))?),
            )
        } else {
            (None, None)
        };
        // dt drawn log-uniformly in [DT_MIN, DT_MAX], stored through inverse softplus
        let mut rng = stream_rng(store.seed(), &format!("{name}.dt_proj.bias"));
        let (lo, hi) = (DT_MIN.ln(), DT_MAX.ln());
        let dt_bias = Tensor::from_fn(&[d], |_| inv_softplus(rng.random_range(lo..hi).exp()));
        let dt_proj = Linear::with_init(
            store,
            &format!("{name}.dt_proj"),
            d,
            d,
            Init::Uniform(1.0 / (d as f64).sqrt()),
            Some(Init::Value(dt_bias)),
        )?;
        let b_proj = Linear::new(store, &format!("{name}.b_proj"), d, n, true)?;
        let c_proj = Linear::new(store, &format!("{name}.c_proj"), d, n, true)?;
        let a_log = store.add(
            &format!("{name}.a_log"),
            &[d, n],
            Init::Value(Tensor::from_fn(&[d, n], |i| ((i[1] + 1) as f64).ln())),
        )?;
        let d_skip = store.add(&format!("{name}.d_skip"), &[d], Init::Constant(1.0))?;
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), d, d, true)?;
        Ok(MambaBlock {
            in_proj,
            conv_kernel,
            conv_bias,
            dt_proj,
            b_proj,
            c_proj,
            a_log,
            d_skip,
            out_proj,
            cfg,
        })
    }

    /// `A = -exp(A_log)`.
    pub fn transition<'t>(&self, s: &Session<'t>) -> Result<Var<'t>> {
        s.param(self.a_log).exp()?.neg()
    }

    /// `[B, V, D] -> [B, V, D]`, scanning over `V`.
    pub fn forward<'t>(&self, s: &Session<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let shape = h.shape();
        let d = self.cfg.d_model;
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::shape("mamba_block", &shape, &[0, 0, d]));
        }
        let xz = self.in_proj.forward(s, h)?;
        let mut x = xz.narrow(2, 0, d)?;
        let z = xz.narrow(2, d, d)?;
        if let (Some(k), Some(bias)) = (self.conv_kernel, self.conv_bias) {
            x = x
                .permute(&[0, 2, 1])?
                .conv1d_causal(s.param(k), ConvSpec::depthwise(d, 1))?
                .add(s.param(bias).reshape(&[d, 1])?)?
                .permute(&[0, 2, 1])?;
        }
        let x = x.silu()?;
        let delta = self.dt_proj.forward(s, x)?.softplus()?;
        let bm = self.b_proj.forward(s, x)?;
        let cm = self.c_proj.forward(s, x)?;
        let a = self.transition(s)?;
        let mut y = selective_scan(x, delta, a, bm, cm, s.param(self.d_skip), self.cfg.zoh)?;
        if self.cfg.gating {
            y = y.mul(z.silu()?)?;
        }
        self.out_proj.forward(s, y)
    }

    /// `flip(block(flip(h)))` along the token axis.
    pub fn backward_branch<'t>(&self, s: &Session<'t>, h: Var<'t>) -> Result<Var<'t>> {
        self.forward(s, h.flip(1)?)?.flip(1)
    }
}
