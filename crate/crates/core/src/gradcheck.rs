//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::nn::{ParamStore, Session};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - fd| / (|fd| + 1e-8)` over every checked element.
    pub max_rel_err: f64,
    /// Input name and flat index of the worst element.
    pub worst: (String, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares the reverse-mode gradient of the scalar `f(inputs)` with central
/// differences of step `h` for every element of every input (or an evenly
/// strided subset of at most `max_per_input` elements).
pub fn check_gradients<F>(inputs: &[(&str, Tensor)], h: f64, max_per_input: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                if i == which {
                    let mut t = t.clone();
                    t.data_mut()[idx] += delta;
                    tape.constant(t)
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    for (which, (name, t)) in inputs.iter().enumerate() {
        let n = t.numel();
        let stride = match max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let fd = (eval(which, idx, h)? - eval(which, idx, -h)?) / (2.0 * h);
            let a = analytic[which].data()[idx];
            let rel = (a - fd).abs() / (fd.abs() + 1e-8);
            report.checked += 1;
            if rel > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = rel;
                report.worst = (name.to_string(), idx);
                report.analytic_at_worst = a;
                report.numeric_at_worst = fd;
            }
        }
    }
    Ok(report)
}

/// [`check_gradients`] over `inputs` followed by every parameter of `store`.
/// The closure receives a session whose parameters are the perturbed vars.
pub fn check_module_gradients<F>(
    store: &ParamStore,
    inputs: &[(&str, Tensor)],
    h: f64,
    max_per_input: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Session<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut all: Vec<(&str, Tensor)> = inputs.to_vec();
    all.extend(store.iter().map(|(n, t)| (n, t.clone())));
    let k = inputs.len();
    check_gradients(&all, h, max_per_input, |tape, v| {
        let s = Session::from_vars(tape, v[k..].to_vec());
        f(&s, &v[..k])
    })
}

/// Deterministic pseudo-random weights in `[-1, 1]` for projecting a tensor output to a scalar.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = crate::nn::stream_rng(seed, "gradcheck.probe");
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(out * w)` for a fixed random probe `w`.
pub fn probe_loss<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = out.tape().constant(probe_weights(&out.shape(), seed));
    out.mul(w)?.sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Activation, ConvSpec};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        probe_weights(shape, seed)
    }

    fn assert_ok(r: GradCheckReport) {
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn matmul_gradients() {
        let inputs = [("a", rand_tensor(&[2, 4, 5], 1)), ("b", rand_tensor(&[5, 3], 2))];
        assert_ok(check_gradients(&inputs, 1e-5, None, |_, v| probe_loss(v[0].matmul(v[1])?, 3)).unwrap());
        let inputs = [("a", rand_tensor(&[2, 1, 4, 5], 4)), ("b", rand_tensor(&[3, 5, 2], 5))];
        assert_ok(check_gradients(&inputs, 1e-5, None, |_, v| probe_loss(v[0].matmul(v[1])?, 6)).unwrap());
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        let inputs = [
            ("a", rand_tensor(&[3, 4], 7)),
            ("b", rand_tensor(&[4], 8).map(|x| x + 2.0)),
        ];
        assert_ok(
            check_gradients(&inputs, 1e-5, None, |_, v| {
                let s = v[0].add(v[1])?.mul(v[0])?.sub(v[1])?.div(v[1])?;
                probe_loss(s, 9)
            })
            .unwrap(),
        );
    }

    #[test]
    fn activation_gradients() {
        for kind in [Activation::Relu, Activation::Elu, Activation::Silu] {
            let inputs = [("x", rand_tensor(&[4, 6], 10).map(|x| 3.0 * x + 0.013))];
            assert_ok(check_gradients(&inputs, 1e-5, None, |_, v| probe_loss(v[0].activation(kind)?, 11)).unwrap());
        }
        let inputs = [("x", rand_tensor(&[10], 12).map(|x| 4.0 * x))];
        assert_ok(check_gradients(&inputs, 1e-5, None, |_, v| probe_loss(v[0].softplus()?, 13)).unwrap());
        assert_ok(check_gradients(&inputs, 1e-5, None, |_, v| probe_loss(v[0].exp()?, 13)).unwrap());
        assert_ok(check_gradients(&inputs, 1e-5, None, |_, v| probe_loss(v[0].sigmoid()?, 13)).unwrap());
    }

    #[test]
    fn reduction_softmax_layernorm_gradients() {
        let inputs = [("x", rand_tensor(&[3, 5, 4], 14))];
        for axis in 0..3 {
            assert_ok(check_gradients(&inputs, 1e-5, None, |_, v| probe_loss(v[0].softmax(axis)?, 15)).unwrap());
            assert_ok(check_gradients(&inputs, 1e-5, None, |_, v| probe_loss(v[0].layer_norm(axis, 1e-5)?, 16)).unwrap());
            assert_ok(check_gradients(&inputs, 1e-5, None, |_, v| probe_loss(v[0].sum_axis(axis, axis == 1)?, 17)).unwrap());
        }
    }

    #[test]
    fn shape_op_gradients() {
        let inputs = [("x", rand_tensor(&[2, 3, 4], 18)), ("y", rand_tensor(&[2, 2, 4], 19))];
        assert_ok(
            check_gradients(&inputs, 1e-5, None, |tape, v| {
                let c = tape.concat(&[v[0], v[1]], 1)?;
                let c = c.flip(2)?.permute(&[2, 0, 1])?.narrow(2, 1, 3)?.reshape(&[4, 6])?;
                probe_loss(c.transpose(0, 1)?, 20)
            })
            .unwrap(),
        );
    }

    #[test]
    fn rfft_adjoint_gradient() {
        for d in [8usize, 9, 96] {
            let inputs = [("x", rand_tensor(&[2, d], 21 + d as u64))];
            assert_ok(
                check_gradients(&inputs, 1e-5, None, |tape, v| {
                    let s = v[0].rfft()?;
                    probe_loss(tape.concat(&[s.real, s.imag], 1)?, 22)
                })
                .unwrap(),
            );
        }
    }

    #[test]
    fn conv_gradients() {
        for spec in [ConvSpec::dense(2), ConvSpec::depthwise(3, 3)] {
            let wshape = if spec.groups == 1 { [3, 3, 3] } else { [3, 1, 3] };
            let inputs = [("x", rand_tensor(&[2, 3, 11], 23)), ("w", rand_tensor(&wshape, 24))];
            assert_ok(check_gradients(&inputs, 1e-5, None, |_, v| probe_loss(v[0].conv1d_causal(v[1], spec)?, 25)).unwrap());
        }
    }
}
