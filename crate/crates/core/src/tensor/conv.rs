use crate::error::{Error, Result};

use super::{Tensor, Var};

/// Geometry of a causal 1-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub dilation: usize,
    /// `1` for full cross-channel kernels, `C_in` for depthwise.
    pub groups: usize,
}

impl ConvSpec {
    pub fn dense(dilation: usize) -> Self {
        ConvSpec { dilation, groups: 1 }
    }

    pub fn depthwise(channels: usize, dilation: usize) -> Self {
        ConvSpec {
            dilation,
            groups: channels,
        }
    }
}

struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    len: usize,
    taps: usize,
    dilation: usize,
    in_per_group: usize,
    out_per_group: usize,
}

fn geometry(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Geometry> {
    if spec.dilation < 1 {
        return Err(Error::param("conv1d_causal", "dilation must be >= 1"));
    }
    if x.len() != 3 || w.len() != 3 {
        return Err(Error::shape("conv1d_causal", x, w));
    }
    let (batch, c_in, len) = (x[0], x[1], x[2]);
    let (c_out, in_per_group, taps) = (w[0], w[1], w[2]);
    let g = spec.groups;
    if g == 0 || c_in % g != 0 || c_out % g != 0 || in_per_group != c_in / g {
        return Err(Error::shape("conv1d_causal", x, w));
    }
    Ok(Geometry {
        batch,
        c_in,
        c_out,
        len,
        taps,
        dilation: spec.dilation,
        in_per_group,
        out_per_group: c_out / g,
    })
}

impl<'t> Var<'t> {
    /// Causal dilated convolution of `x: [B, C_in, T]` with `kernel: [C_out, C_in / groups, k]`.
    ///
    /// Left-pads with `(k - 1) * dilation` zeros, so the output has length `T` and
    /// `out[t]` reads only `x[t'] for t' <= t`.
    pub fn conv1d_causal(self, kernel: Var<'t>, spec: ConvSpec) -> Result<Var<'t>> {
        let x = self.value();
        let w = kernel.value();
        let geo = geometry(x.shape(), w.shape(), spec)?;
        let (xd, wd) = (x.data(), w.data());
        let mut out = vec![0.0; geo.batch * geo.c_out * geo.len];
        for b in 0..geo.batch {
            for o in 0..geo.c_out {
                let grp = o / geo.out_per_group;
                let orow = &mut out[(b * geo.c_out + o) * geo.len..][..geo.len];
                for ci in 0..geo.in_per_group {
                    let i = grp * geo.in_per_group + ci;
                    let xrow = &xd[(b * geo.c_in + i) * geo.len..][..geo.len];
                    for j in 0..geo.taps {
                        let wv = wd[(o * geo.in_per_group + ci) * geo.taps + j];
                        let back = (geo.taps - 1 - j) * geo.dilation;
                        if back >= geo.len {
                            continue;
                        }
                        for t in back..geo.len {
                            orow[t] += wv * xrow[t - back];
                        }
                    }
                }
            }
        }
        let out_shape = vec![geo.batch, geo.c_out, geo.len];
        let need_x = self.requires_grad();
        let need_w = kernel.requires_grad();
        self.tape()
            .record("conv1d_causal", Tensor::from_parts(out_shape, out), &[self, kernel], move |g| {
                let gd = g.data();
                let (xd, wd) = (x.data(), w.data());
                let mut gx = need_x.then(|| vec![0.0; xd.len()]);
                let mut gw = need_w.then(|| vec![0.0; wd.len()]);
                for b in 0..geo.batch {
                    for o in 0..geo.c_out {
                        let grp = o / geo.out_per_group;
                        let grow = &gd[(b * geo.c_out + o) * geo.len..][..geo.len];
                        for ci in 0..geo.in_per_group {
                            let i = grp * geo.in_per_group + ci;
                            let xoff = (b * geo.c_in + i) * geo.len;
                            for j in 0..geo.taps {
                                let widx = (o * geo.in_per_group + ci) * geo.taps + j;
                                let back = (geo.taps - 1 - j) * geo.dilation;
                                if back >= geo.len {
                                    continue;
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let wv = wd[widx];
                                    for t in back..geo.len {
                                        gx[xoff + t - back] += wv * grow[t];
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    let xrow = &xd[xoff..xoff + geo.len];
                                    gw[widx] += (back..geo.len).map(|t| grow[t] * xrow[t - back]).sum::<f64>();
                                }
                            }
                        }
                    }
                }
                vec![
                    gx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
                    gw.map(|v| Tensor::from_parts(w.shape().to_vec(), v)),
                ]
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn single_recent_tap_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 10], |i| (i[0] + 2 * i[1]) as f64 + (i[2] as f64).sin()));
        let w = tape.constant(Tensor::from_fn(&[3, 1, 3], |i| if i[2] == 2 { 1.0 } else { 0.0 }));
        let y = x.conv1d_causal(w, ConvSpec::depthwise(3, 4)).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn zero_input_gives_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 6]));
        let w = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| (i[0] + i[1] + i[2]) as f64));
        assert_eq!(x.conv1d_causal(w, ConvSpec::dense(2)).unwrap().value(), Tensor::zeros(&[1, 2, 6]));
    }

    #[test]
    fn zero_dilation_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 6]));
        let w = tape.constant(Tensor::zeros(&[2, 2, 3]));
        assert!(matches!(x.conv1d_causal(w, ConvSpec::dense(0)), Err(Error::Param { .. })));
    }

    #[test]
    fn dilation_longer_than_sequence() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2]));
        // the older tap reaches 8 steps back and only sees padding
        let y = x.conv1d_causal(w, ConvSpec::dense(8)).unwrap();
        assert_eq!(y.value(), Tensor::ones(&[1, 1, 3]));
    }
}
