//! Token reweighting (temporal and spatial axes), the post-attention feedforward
//! refinement, and a single-head scaled dot-product layer used as an ablation.

use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::tensor::Var;

/// Scores one axis of `[B, V, D]` tokens.
///
/// Temporal: each model-width position `d` is described by its column `h[b, :, d]`
/// (length `V`) and softmaxed over `D`. Spatial: each variate row `h[b, v, :]` (length `D`)
/// is softmaxed over `V`. Each branch rescales by `N * alpha` so uniform weights are the identity.
#[derive(Clone, Debug)]
pub struct StAttention {
    pub temporal: Linear,
    pub spatial: Linear,
    pub ctx_t: ParamId,
    pub ctx_s: ParamId,
    pub variates: usize,
    pub d_model: usize,
}

/// Attention weights: `temporal: [B, D]`, `spatial: [B, V]`.
pub struct AttentionWeights<'t> {
    pub temporal: Var<'t>,
    pub spatial: Var<'t>,
}

impl StAttention {
    pub fn new(store: &mut ParamStore, name: &str, variates: usize, d_model: usize, e_dim: usize) -> Result<Self> {
        if variates == 0 || d_model == 0 || e_dim == 0 {
            return Err(Error::Config(format!(
                "attention dimensions must be positive (V={variates}, D={d_model}, E={e_dim})"
            )));
        }
        let bound = 1.0 / (e_dim as f64).sqrt();
        Ok(StAttention {
            temporal: Linear::new(store, &format!("{name}.temporal"), variates, e_dim, true)?,
            spatial: Linear::new(store, &format!("{name}.spatial"), d_model, e_dim, true)?,
            ctx_t: store.add(&format!("{name}.ctx_t"), &[e_dim], Init::Uniform(bound))?,
            ctx_s: store.add(&format!("{name}.ctx_s"), &[e_dim], Init::Uniform(bound))?,
            variates,
            d_model,
        })
    }

    pub fn weights<'t>(&self, s: &Session<'t>, h: Var<'t>) -> Result<AttentionWeights<'t>> {
        let shape = h.shape();
        if shape.len() != 3 || shape[1] != self.variates || shape[2] != self.d_model {
            return Err(Error::Config(format!(
                "attention expects [B, {}, {}] tokens, got {shape:?}",
                self.variates, self.d_model
            )));
        }
        let b = shape[0];
        let score = |lin: &Linear, ctx: ParamId, tokens: Var<'t>| -> Result<Var<'t>> {
            let e = lin.forward(s, tokens)?.relu()?;
            let n = e.shape()[1];
            let v = s.param(ctx).reshape(&[lin.out_dim, 1])?;
            e.matmul(v)?.reshape(&[b, n])?.softmax(1)
        };
        Ok(AttentionWeights {
            temporal: score(&self.temporal, self.ctx_t, h.transpose(1, 2)?)?,
            spatial: score(&self.spatial, self.ctx_s, h)?,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let w = self.weights(s, h)?;
        let b = h.shape()[0];
        let (v, d) = (self.variates, self.d_model);
        let ht = h.mul(w.temporal.reshape(&[b, 1, d])?.scale(d as f64)?)?;
        let hs = h.mul(w.spatial.reshape(&[b, v, 1])?.scale(v as f64)?)?;
        ht.add(hs)?.scale(0.5)
    }
}

/// `LN2(h + lin2(relu(lin1(LN1(h)))))`.
#[derive(Clone, Debug)]
pub struct FfnTd {
    pub norm1: LayerNorm,
    pub lin1: Linear,
    pub lin2: Linear,
    pub norm2: LayerNorm,
}

pub const LN_EPS: f64 = 1e-6;

impl FfnTd {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize) -> Result<Self> {
        if d_ff < d_model {
            return Err(Error::Config(format!("d_ff ({d_ff}) must be at least d_model ({d_model})")));
        }
        Ok(FfnTd {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model, LN_EPS)?,
            lin1: Linear::new(store, &format!("{name}.lin1"), d_model, d_ff, true)?,
            lin2: Linear::new(store, &format!("{name}.lin2"), d_ff, d_model, true)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model, LN_EPS)?,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let inner = self.norm1.forward(s, h)?;
        let inner = self.lin1.forward(s, inner)?.relu()?;
        let inner = self.lin2.forward(s, inner)?;
        self.norm2.forward(s, h.add(inner)?)
    }
}

/// `h + W_o softmax(Q K^T / sqrt(D)) V` over the token axis of `[B, N, D]`, one head.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub d_model: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize) -> Result<Self> {
        let lin = |store: &mut ParamStore, part: &str| Linear::new(store, &format!("{name}.{part}"), d_model, d_model, true);
        Ok(SelfAttention {
            q: lin(store, "q")?,
            k: lin(store, "k")?,
            v: lin(store, "v")?,
            o: lin(store, "o")?,
            d_model,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let q = self.q.forward(s, h)?;
        let k = self.k.forward(s, h)?;
        let v = self.v.forward(s, h)?;
        let scores = q.matmul(k.transpose(1, 2)?)?.scale(1.0 / (self.d_model as f64).sqrt())?;
        let mixed = scores.softmax(2)?.matmul(v)?;
        h.add(self.o.forward(s, mixed)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_module_gradients, probe_loss, probe_weights};
    use crate::tensor::{Tape, Tensor};

    fn run(store: &ParamStore, f: impl for<'t> Fn(&Session<'t>) -> Result<Var<'t>>) -> Tensor {
        let tape = Tape::new();
        let s = Session::new(&tape, store, false);
        f(&s).unwrap().value()
    }

    #[test]
    fn weights_sum_to_one() {
        let mut store = ParamStore::new(1);
        let att = StAttention::new(&mut store, "att", 5, 12, 6).unwrap();
        let h = probe_weights(&[3, 5, 12], 2).map(|x| 4.0 * x);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let w = att.weights(&s, s.constant(h)).unwrap();
        for (alpha, n) in [(w.temporal.value(), 12), (w.spatial.value(), 5)] {
            for b in 0..3 {
                let row = &alpha.data()[b * n..(b + 1) * n];
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                assert!(row.iter().all(|a| *a > 0.0));
            }
        }
    }

    #[test]
    fn zero_context_is_identity() {
        let mut store = ParamStore::new(1);
        let att = StAttention::new(&mut store, "att", 4, 8, 6).unwrap();
        store.set(att.ctx_t, Tensor::zeros(&[6])).unwrap();
        store.set(att.ctx_s, Tensor::zeros(&[6])).unwrap();
        let h = probe_weights(&[2, 4, 8], 3);
        assert_eq!(run(&store, |s| att.forward(s, s.constant(h.clone()))), h);
    }

    #[test]
    fn variate_mismatch_is_config_error() {
        let mut store = ParamStore::new(1);
        let att = StAttention::new(&mut store, "att", 4, 8, 6).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let r = att.forward(&s, s.constant(Tensor::zeros(&[1, 5, 8])));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    /// Direct per-element evaluation of both scoring branches.
    fn loop_oracle(h: &Tensor, store: &ParamStore, att: &StAttention) -> Tensor {
        let (bsz, v, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let e = att.temporal.out_dim;
        let (wt, bt, ct) = (store.get(att.temporal.weight), store.get(att.temporal.bias.unwrap()), store.get(att.ctx_t));
        let (ws, bs, cs) = (store.get(att.spatial.weight), store.get(att.spatial.bias.unwrap()), store.get(att.ctx_s));
        let softmax = |x: Vec<f64>| {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            ex.into_iter().map(|v| v / z).collect::<Vec<f64>>()
        };
        let mut out = Tensor::zeros(&[bsz, v, d]);
        for b in 0..bsz {
            let st: Vec<f64> = (0..d)
                .map(|dd| {
                    (0..e)
                        .map(|k| {
                            let pre = bt.data()[k] + (0..v).map(|vv| wt.get(&[vv, k]) * h.get(&[b, vv, dd])).sum::<f64>();
                            ct.data()[k] * pre.max(0.0)
                        })
                        .sum()
                })
                .collect();
            let ss: Vec<f64> = (0..v)
                .map(|vv| {
                    (0..e)
                        .map(|k| {
                            let pre = bs.data()[k] + (0..d).map(|dd| ws.get(&[dd, k]) * h.get(&[b, vv, dd])).sum::<f64>();
                            cs.data()[k] * pre.max(0.0)
                        })
                        .sum()
                })
                .collect();
            let (at, as_) = (softmax(st), softmax(ss));
            for vv in 0..v {
                for dd in 0..d {
                    let x = h.get(&[b, vv, dd]);
                    out.data_mut()[(b * v + vv) * d + dd] = 0.5 * (x * d as f64 * at[dd] + x * v as f64 * as_[vv]);
                }
            }
        }
        out
    }

    #[test]
    fn matches_loop_oracle() {
        let mut store = ParamStore::new(7);
        let att = StAttention::new(&mut store, "att", 5, 9, 4).unwrap();
        let h = probe_weights(&[3, 5, 9], 8).map(|x| 2.0 * x);
        let got = run(&store, |s| att.forward(s, s.constant(h.clone())));
        assert!(got.max_abs_diff(&loop_oracle(&h, &store, &att)) <= 1e-12);
    }

    #[test]
    fn single_branch_preserves_sign() {
        let mut store = ParamStore::new(9);
        let att = StAttention::new(&mut store, "att", 4, 6, 5).unwrap();
        let h = probe_weights(&[2, 4, 6], 10);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let hv = s.constant(h.clone());
        let w = att.weights(&s, hv).unwrap();
        let ht = hv.mul(w.temporal.reshape(&[2, 1, 6]).unwrap().scale(6.0).unwrap()).unwrap().value();
        let hs = hv.mul(w.spatial.reshape(&[2, 4, 1]).unwrap().scale(4.0).unwrap()).unwrap().value();
        for branch in [ht, hs] {
            for (a, b) in branch.data().iter().zip(h.data()) {
                assert_eq!(a.signum(), b.signum());
            }
        }
    }

    #[test]
    fn shifted_scores_leave_weights_unchanged() {
        let tape = Tape::new();
        let x = probe_weights(&[3, 7], 11);
        let a = tape.constant(x.clone()).softmax(1).unwrap().value();
        let b = tape.constant(x.map(|v| v + 123.25)).softmax(1).unwrap().value();
        assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn attention_gradients() {
        let mut store = ParamStore::new(12);
        let att = StAttention::new(&mut store, "att", 3, 5, 4).unwrap();
        let h = probe_weights(&[2, 3, 5], 13).map(|x| 2.0 * x + 0.01);
        let r = check_module_gradients(&store, &[("h", h)], 1e-5, None, |s, v| probe_loss(att.forward(s, v[0])?, 14)).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn dead_ffn_path_is_layer_norm() {
        let mut store = ParamStore::new(3);
        let ffn = FfnTd::new(&mut store, "ffn", 8, 16).unwrap();
        store.set(ffn.lin2.weight, Tensor::zeros(&[16, 8])).unwrap();
        store.set(ffn.lin2.bias.unwrap(), Tensor::zeros(&[8])).unwrap();
        let h = probe_weights(&[2, 7, 8], 4);
        let got = run(&store, |s| ffn.forward(s, s.constant(h.clone())));
        let tape = Tape::new();
        let want = tape.constant(h).layer_norm(2, LN_EPS).unwrap().value();
        assert_eq!(got, want);
    }

    #[test]
    fn ffn_shape_and_normalized_output() {
        let mut store = ParamStore::new(5);
        let ffn = FfnTd::new(&mut store, "ffn", 128, 256).unwrap();
        let h = probe_weights(&[2, 7, 128], 6).map(|x| 3.0 * x);
        let y = run(&store, |s| ffn.forward(s, s.constant(h.clone())));
        assert_eq!(y.shape(), &[2, 7, 128]);
        for row in y.data().chunks(128) {
            let mean = row.iter().sum::<f64>() / 128.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 128.0;
            assert!(mean.abs() <= 1e-6 && (var - 1.0).abs() <= 1e-6, "mean {mean} var {var}");
        }
    }

    #[test]
    fn ffn_rejects_narrow_hidden() {
        let mut store = ParamStore::new(5);
        assert!(FfnTd::new(&mut store, "ffn", 8, 4).is_err());
    }

    #[test]
    fn ffn_gradients() {
        let mut store = ParamStore::new(15);
        let ffn = FfnTd::new(&mut store, "ffn", 4, 8).unwrap();
        let h = probe_weights(&[2, 3, 4], 16);
        let r = check_module_gradients(&store, &[("h", h)], 1e-5, None, |s, v| probe_loss(ffn.forward(s, v[0])?, 17)).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn self_attention_uniform_and_gradients() {
        let mut store = ParamStore::new(18);
        let att = SelfAttention::new(&mut store, "sa", 4).unwrap();
        // zero queries give uniform mixing: every token receives the mean value vector
        store.set(att.q.weight, Tensor::zeros(&[4, 4])).unwrap();
        store.set(att.q.bias.unwrap(), Tensor::zeros(&[4])).unwrap();
        store.set(att.o.weight, Tensor::eye(4)).unwrap();
        store.set(att.o.bias.unwrap(), Tensor::zeros(&[4])).unwrap();
        store.set(att.v.weight, Tensor::eye(4)).unwrap();
        store.set(att.v.bias.unwrap(), Tensor::zeros(&[4])).unwrap();
        let h = probe_weights(&[1, 3, 4], 19);
        let y = run(&store, |s| att.forward(s, s.constant(h.clone())));
        for t in 0..3 {
            for c in 0..4 {
                let mean = (0..3).map(|u| h.get(&[0, u, c])).sum::<f64>() / 3.0;
                assert!((y.get(&[0, t, c]) - h.get(&[0, t, c]) - mean).abs() <= 1e-12);
            }
        }
        let mut store = ParamStore::new(20);
        let att = SelfAttention::new(&mut store, "sa", 4).unwrap();
        let h = probe_weights(&[2, 3, 4], 21);
        let r = check_module_gradients(&store, &[("h", h)], 1e-5, None, |s, v| probe_loss(att.forward(s, v[0])?, 22)).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
