//! Central finite-difference gradient auditing.
//!
//! The numerical side only ever evaluates forward passes, so it stays
//! independent of the reverse-mode implementation it is checking. Relative
//! error uses a small denominator floor so near-zero gradient pairs do not
//! produce spurious blowups.

use crate::params::ParamSet;

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Worst relative error over every checked element.
    pub worst: f64,
    /// Parameter holding the worst element.
    pub worst_param: String,
    /// Total elements compared.
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numerical: f64) -> f64 {
    let denom = analytic.abs().max(numerical.abs()).max(1e-4);
    (analytic - numerical).abs() / denom
}

/// Compares the analytic gradients stored in `params` against central finite
/// differences of `loss` with step `h`, elementwise over every parameter.
pub fn check_grads(
    params: &ParamSet,
    mut loss: impl FnMut(&ParamSet) -> f64,
    h: f64,
) -> GradReport {
    let mut work = params.clone();
    let mut worst = 0.0;
    let mut worst_param = String::new();
    let mut checked = 0;

    for idx in 0..params.len() {
        let name = params.entries()[idx].name.clone();
        let analytic = params.entries()[idx]
            .tensor
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; params.entries()[idx].tensor.numel()]);
        for i in 0..analytic.len() {
            let orig = work.tensor(idx).data[i];
            work.tensor_mut(idx).data[i] = orig + h;
            let up = loss(&work);
            work.tensor_mut(idx).data[i] = orig - h;
            let down = loss(&work);
            work.tensor_mut(idx).data[i] = orig;
            let numerical = (up - down) / (2.0 * h);
            let err = rel_error(analytic[i], numerical);
            if err > worst {
                worst = err;
                worst_param = name.clone();
            }
            checked += 1;
        }
    }
    GradReport {
        worst,
        worst_param,
        checked,
    }
}

/// Finite differences of a scalar function w.r.t. a flat input vector.
pub fn numerical_grad_vec(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work);
        work[i] = orig - h;
        let down = f(&work);
        work[i] = orig;
        out[i] = (up - down) / (2.0 * h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::rng::stream;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn quadratic_grads_match() {
        let mut rng = stream(3, "gradcheck");
        let mut params = ParamSet::new();
        params.add("w", vec![4], Init::Gaussian { std: 1.0 }, &mut rng);

        // loss = sum(w ⊙ w)
        let forward = |p: &ParamSet| -> f64 {
            p.tensor(0).data.iter().map(|v| v * v).sum()
        };

        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let sq = tape.hadamard(ids[0], ids[0]);
        let loss = tape.sum_all(sq);
        tape.backward(loss);
        params.harvest_grads(&tape, &ids);

        let report = check_grads(&params, forward, 1e-5);
        assert!(report.worst < 1e-6, "worst {}", report.worst);
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut rng = stream(4, "gradcheck-bad");
        let mut params = ParamSet::new();
        params.add("w", vec![2], Init::Gaussian { std: 1.0 }, &mut rng);
        let forward = |p: &ParamSet| -> f64 { p.tensor(0).data.iter().sum() };
        // claim a bogus gradient of 3.0 per element (truth is 1.0)
        params.tensor_mut(0).grad = Some(vec![3.0, 3.0]);
        let report = check_grads(&params, forward, 1e-5);
        assert!(report.worst > 0.5, "should flag bogus grads, got {}", report.worst);
    }

    #[test]
    fn numerical_vec_matches_analytic_linear() {
        let x = vec![1.0, -2.0, 0.5];
        let f = |v: &[f64]| 2.0 * v[0] - 3.0 * v[1] + 0.25 * v[2];
        let g = numerical_grad_vec(f, &x, 1e-5);
        let want = [2.0, -3.0, 0.25];
        for (a, b) in g.iter().zip(&want) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    /// Every differentiable tape op against finite differences on random
    /// inputs in [-2, 2].
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = stream(77, "opcheck");
        type BuildFn = fn(&mut Tape, crate::tensor::TensorId, crate::tensor::TensorId) -> crate::tensor::TensorId;
        let cases: Vec<(&str, BuildFn)> = vec![
            ("matmul", |t, a, b| t.matmul(a, b)),
            ("add", |t, a, b| t.add(a, b)),
            ("sub", |t, a, b| t.sub(a, b)),
            ("hadamard", |t, a, b| t.hadamard(a, b)),
            ("minimum", |t, a, b| t.minimum(a, b)),
            ("relu", |t, a, _| t.relu(a)),
            ("gelu", |t, a, _| t.gelu(a)),
            ("tanh", |t, a, _| t.tanh(a)),
            ("exp", |t, a, _| t.exp(a)),
            ("square", |t, a, _| t.square(a)),
            ("mul_scalar", |t, a, _| t.mul_scalar(a, -1.7)),
            ("softmax", |t, a, _| t.softmax(a, 1)),
            ("sum_axis", |t, a, _| t.sum_axis(a, 0)),
            ("concat", |t, a, b| t.concat_last(a, b)),
        ];
        for (name, build) in cases {
            let mut params = ParamSet::new();
            // 4x4 · 4x4 keeps matmul square so one pair of shapes serves all ops
            params.add("a", vec![4, 4], Init::Gaussian { std: 1.0 }, &mut rng);
            params.add("b", vec![4, 4], Init::Gaussian { std: 1.0 }, &mut rng);

            let forward = |p: &ParamSet| -> f64 {
                let mut tape = Tape::new();
                let a = tape.leaf(p.tensor(0).clone());
                let b = tape.leaf(p.tensor(1).clone());
                let out = build(&mut tape, a, b);
                let loss = tape.mean_all(out);
                tape.value_scalar(loss)
            };

            let mut tape = Tape::new();
            let ids = params.bind(&mut tape);
            let out = build(&mut tape, ids[0], ids[1]);
            let loss = tape.mean_all(out);
            tape.backward(loss);
            params.harvest_grads(&tape, &ids);

            let report = check_grads(&params, forward, 1e-5);
            assert!(report.worst < 1e-6, "{name}: worst {}", report.worst);
        }
    }

    /// ln and layer_norm need positive / structured inputs; checked separately.
    #[test]
    fn ln_and_layernorm_match_finite_differences() {
        let mut rng = stream(78, "opcheck2");

        let mut params = ParamSet::new();
        params.add("x", vec![6], Init::Gaussian { std: 0.3 }, &mut rng);
        for v in params.tensor_mut(0).data.iter_mut() {
            *v = v.abs() + 0.5; // keep ln well away from zero
        }
        let forward = |p: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(p.tensor(0).clone());
            let y = tape.ln(x);
            let loss = tape.sum_all(y);
            tape.value_scalar(loss)
        };
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let y = tape.ln(ids[0]);
        let loss = tape.sum_all(y);
        tape.backward(loss);
        params.harvest_grads(&tape, &ids);
        let report = check_grads(&params, forward, 1e-6);
        assert!(report.worst < 1e-6, "ln worst {}", report.worst);

        let mut params = ParamSet::new();
        params.add("x", vec![3, 5], Init::Gaussian { std: 1.0 }, &mut rng);
        params.add("g", vec![5], Init::Gaussian { std: 0.5 }, &mut rng);
        params.add("b", vec![5], Init::Gaussian { std: 0.5 }, &mut rng);
        let forward = |p: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(p.tensor(0).clone());
            let g = tape.leaf(p.tensor(1).clone());
            let b = tape.leaf(p.tensor(2).clone());
            let y = tape.layer_norm(x, g, b, 1e-5);
            let sq = tape.square(y);
            let loss = tape.mean_all(sq);
            tape.value_scalar(loss)
        };
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5);
        let sq = tape.square(y);
        let loss = tape.mean_all(sq);
        tape.backward(loss);
        params.harvest_grads(&tape, &ids);
        let report = check_grads(&params, forward, 1e-5);
        assert!(report.worst < 1e-6, "layer_norm worst {}", report.worst);
    }
}
