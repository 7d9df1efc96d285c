//! Stack of dilated causal convolutions; layer `l` (1-based) uses dilation `2^(l-1)`.

use crate::error::{Error, Result};
use crate::nn::{Init, ParamId, ParamStore, Session};
use crate::tensor::{Activation, ConvSpec, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TcnConfig {
    /// Channel axis extent (the variate-token count).
    pub channels: usize,
    pub layers: usize,
    pub kernel_size: usize,
    pub activation: Activation,
    /// Adds each layer's input to its output.
    pub residual: bool,
    /// Per-channel kernels; otherwise kernels mix all channels.
    pub depthwise: bool,
}

#[derive(Clone, Debug)]
pub struct TcnLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

#[derive(Clone, Debug)]
pub struct TcnStack {
    pub layers: Vec<TcnLayer>,
    pub cfg: TcnConfig,
}

impl TcnStack {
    pub fn new(store: &mut ParamStore, name: &str, cfg: TcnConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.layers == 0 || cfg.kernel_size == 0 {
            return Err(Error::Config(format!("tcn dimensions must be positive: {cfg:?}")));
        }
        let in_per_group = if cfg.depthwise { 1 } else { cfg.channels };
        let bound = 1.0 / ((in_per_group * cfg.kernel_size) as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|l| {
                Ok(TcnLayer {
                    kernel: store.add(
                        &format!("{name}.{l}.kernel"),
                        &[cfg.channels, in_per_group, cfg.kernel_size],
                        Init::Uniform(bound),
                    )?,
                    bias: store.add(&format!("{name}.{l}.bias"), &[cfg.channels], Init::Uniform(bound))?,
                    dilation: 1 << l,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TcnStack { layers, cfg })
    }

    /// `1 + (k - 1) * (2^K - 1)`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.cfg.kernel_size - 1) * ((1 << self.cfg.layers) - 1)
    }

    /// `[B, C, P] -> [B, C, P]`.
    pub fn forward<'t>(&self, s: &Session<'t>, h0: Var<'t>) -> Result<Var<'t>> {
        let shape = h0.shape();
        if shape.len() != 3 || shape[1] != self.cfg.channels {
            return Err(Error::shape("tcn", &shape, &[0, self.cfg.channels, 0]));
        }
        let mut h = h0;
        for layer in &self.layers {
            let spec = if self.cfg.depthwise {
                ConvSpec::depthwise(self.cfg.channels, layer.dilation)
            } else {
                ConvSpec::dense(layer.dilation)
            };
            let bias = s.param(layer.bias).reshape(&[self.cfg.channels, 1])?;
            let y = h
                .conv1d_causal(s.param(layer.kernel), spec)?
                .add(bias)?
                .activation(self.cfg.activation)?;
            h = if self.cfg.residual { y.add(h)? } else { y };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::probe_weights;
    use crate::tensor::{Tape, Tensor};

    fn cfg(layers: usize, k: usize, depthwise: bool, residual: bool, act: Activation) -> TcnConfig {
        TcnConfig {
            channels: 3,
            layers,
            kernel_size: k,
            activation: act,
            residual,
            depthwise,
        }
    }

    /// Nested-loop reference for one stack without residuals.
    fn nested_loop(x: &Tensor, store: &ParamStore, stack: &TcnStack) -> Tensor {
        let (b, c, p) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = stack.cfg.kernel_size;
        let mut h = x.clone();
        for layer in &stack.layers {
            let w = store.get(layer.kernel);
            let bias = store.get(layer.bias);
            h = Tensor::from_fn(&[b, c, p], |i| {
                let mut acc = bias.data()[i[1]];
                for j in 0..k {
                    let back = (k - 1 - j) * layer.dilation;
                    if back > i[2] {
                        continue;
                    }
                    if stack.cfg.depthwise {
                        acc += w.get(&[i[1], 0, j]) * h.get(&[i[0], i[1], i[2] - back]);
                    } else {
                        for ci in 0..c {
                            acc += w.get(&[i[1], ci, j]) * h.get(&[i[0], ci, i[2] - back]);
                        }
                    }
                }
                stack.cfg.activation.apply(acc)
            });
        }
        h
    }

    #[test]
    fn dilations_double() {
        let mut store = ParamStore::new(0);
        let stack = TcnStack::new(&mut store, "tcn", cfg(4, 3, true, true, Activation::Relu)).unwrap();
        let d: Vec<usize> = stack.layers.iter().map(|l| l.dilation).collect();
        assert_eq!(d, vec![1, 2, 4, 8]);
        assert_eq!(stack.receptive_field(), 31);
    }

    #[test]
    fn identity_case() {
        let mut store = ParamStore::new(0);
        let stack = TcnStack::new(&mut store, "tcn", cfg(1, 1, true, false, Activation::Identity)).unwrap();
        store.set(stack.layers[0].kernel, Tensor::ones(&[3, 1, 1])).unwrap();
        store.set(stack.layers[0].bias, Tensor::zeros(&[3])).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let x = tape.constant(probe_weights(&[2, 3, 9], 1));
        assert_eq!(stack.forward(&s, x).unwrap().value(), x.value());
    }

    #[test]
    fn zero_in_zero_out() {
        let mut store = ParamStore::new(0);
        let stack = TcnStack::new(&mut store, "tcn", cfg(2, 3, false, true, Activation::Relu)).unwrap();
        for l in &stack.layers {
            store.set(l.bias, Tensor::zeros(&[3])).unwrap();
        }
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let y = stack.forward(&s, tape.constant(Tensor::zeros(&[2, 3, 8]))).unwrap();
        assert_eq!(y.value(), Tensor::zeros(&[2, 3, 8]));
    }

    #[test]
    fn matches_nested_loop() {
        for depthwise in [true, false] {
            let mut store = ParamStore::new(11);
            let stack = TcnStack::new(&mut store, "tcn", cfg(2, 3, depthwise, false, Activation::Relu)).unwrap();
            let x = probe_weights(&[2, 3, 13], 2);
            let tape = Tape::new();
            let s = Session::new(&tape, &store, false);
            let y = stack.forward(&s, tape.constant(x.clone())).unwrap().value();
            assert!(y.max_abs_diff(&nested_loop(&x, &store, &stack)) <= 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_error() {
        let mut store = ParamStore::new(0);
        let stack = TcnStack::new(&mut store, "tcn", cfg(2, 3, true, true, Activation::Relu)).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        assert!(stack.forward(&s, tape.constant(Tensor::zeros(&[1, 4, 8]))).is_err());
    }

    #[test]
    fn causal_and_receptive_field_tight() {
        let mut store = ParamStore::new(5);
        let stack = TcnStack::new(&mut store, "tcn", cfg(3, 3, false, false, Activation::Elu)).unwrap();
        let rf = stack.receptive_field();
        let p = 40;
        let base = probe_weights(&[1, 3, p], 3);
        let run = |x: &Tensor| {
            let tape = Tape::new();
            let s = Session::new(&tape, &store, false);
            stack.forward(&s, tape.constant(x.clone())).unwrap().value()
        };
        let y0 = run(&base);
        let t = 30;
        // future edits leave the past untouched
        let mut fut = base.clone();
        for c in 0..3 {
            for q in t + 1..p {
                fut.data_mut()[c * p + q] += 1.0;
            }
        }
        let y1 = run(&fut);
        for c in 0..3 {
            assert_eq!(&y0.data()[c * p..c * p + t + 1], &y1.data()[c * p..c * p + t + 1]);
        }
        // an edit exactly RF steps back is invisible at t, one step closer is not
        let mut old = base.clone();
        old.data_mut()[t - rf] += 1.0;
        assert_eq!(run(&old).get(&[0, 0, t]), y0.get(&[0, 0, t]));
        let mut near = base.clone();
        near.data_mut()[t + 1 - rf] += 1.0;
        let moved = (0..3).any(|c| run(&near).get(&[0, c, t]) != y0.get(&[0, c, t]));
        assert!(moved);
    }
}
