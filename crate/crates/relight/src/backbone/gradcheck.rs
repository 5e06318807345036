//! Finite-difference gradient verification.
//!
//! Checks run in double precision on small inputs: the analytic gradient of
//! a scalar-valued graph is compared against central differences for every
//! element of every input. L1/ReLU kinks are the caller's responsibility to
//! avoid (perturb inputs away from zero crossings).

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error seen over all inputs and elements.
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    /// Number of scalar elements compared.
    pub evaluated: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Elements whose analytic and numeric gradients are both below this bound
/// are treated as matching zeros; central differences cannot resolve them
/// at the requested tolerance.
const SMALL_GRAD: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    if a.abs() < SMALL_GRAD && n.abs() < SMALL_GRAD {
        0.0
    } else {
        (a - n).abs() / a.abs().max(n.abs())
    }
}

/// Compare analytic gradients of `build` against central finite differences.
///
/// `build` receives a fresh tape plus one leaf per input tensor and must
/// return a single-element output var. Every element of every input is
/// perturbed by `+/- eps`.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let total: usize = inputs.iter().map(|t| t.len()).sum();
    if total > 1_000 {
        return Err(Error::config(format!(
            "grad_check inputs too large: {total} elements (max 1000)"
        )));
    }
    for t in inputs {
        if !t.all_finite() {
            return Err(Error::numeric("grad_check input contains non-finite values"));
        }
    }

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::numeric("grad_check objective is non-finite"));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    if tape.value(out).len() != 1 {
        return Err(Error::config("grad_check objective must be scalar"));
    }
    if !tape.value(out).item().is_finite() {
        return Err(Error::numeric("grad_check objective is non-finite"));
    }
    let grads = tape.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    for g in &analytic {
        if !g.all_finite() {
            return Err(Error::numeric("grad_check analytic gradient is non-finite"));
        }
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        evaluated: 0,
        tol,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let orig = t.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let fp = eval(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let fm = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::numeric("grad_check numeric gradient is non-finite"));
            }
            let err = rel_err(analytic[ti].data()[ei], numeric);
            report.evaluated += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, ei));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::conv::ConvSpec;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Random fixed projection so every output element influences the scalar
    /// objective with a distinct weight.
    fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
        let shape = tape.shape(y).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = tape.leaf(rand_tensor(&mut rng, &shape));
        let prod = tape.mul(y, p);
        tape.sum_all(prod)
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[2, 6, 6]);
            let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
            let b = rand_tensor(&mut rng, &[3]);
            let spec = ConvSpec { stride: 2, pad: 1 };
            let rep = grad_check(
                |tape, vars| {
                    let y = tape.conv2d(vars[0], vars[1], vars[2], spec);
                    project(tape, y, seed + 100)
                },
                &[x, w, b],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn conv_transpose2d_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            let x = rand_tensor(&mut rng, &[3, 4, 4]);
            let w = rand_tensor(&mut rng, &[3, 2, 4, 4]);
            let b = rand_tensor(&mut rng, &[2]);
            let spec = ConvSpec { stride: 2, pad: 1 };
            let rep = grad_check(
                |tape, vars| {
                    let y = tape.conv_transpose2d(vars[0], vars[1], vars[2], spec);
                    project(tape, y, seed + 200)
                },
                &[x, w, b],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn instance_norm_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 20);
            let x = rand_tensor(&mut rng, &[3, 4, 4]);
            let g = rand_tensor(&mut rng, &[3]);
            let b = rand_tensor(&mut rng, &[3]);
            let rep = grad_check(
                |tape, vars| {
                    let y = tape.instance_norm(vars[0], vars[1], vars[2], 1e-5);
                    project(tape, y, seed + 300)
                },
                &[x, g, b],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn linear_pool_activation_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 30);
            let x = rand_tensor(&mut rng, &[2, 4, 4]);
            let w = rand_tensor(&mut rng, &[3, 2]);
            let b = rand_tensor(&mut rng, &[3]);
            let rep = grad_check(
                |tape, vars| {
                    let pooled = tape.global_avg_pool(vars[0]);
                    let fc = tape.linear(pooled, vars[1], vars[2]);
                    let act = tape.tanh(fc);
                    project(tape, act, seed + 400)
                },
                &[x, w, b],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn channel_affine_modulation_gradients_match_finite_differences() {
        // The core MNR render-layer operation on a 4-channel 2x2 feature.
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
            let x = rand_tensor(&mut rng, &[4, 2, 2]);
            let m = rand_tensor(&mut rng, &[4]);
            let a = rand_tensor(&mut rng, &[4]);
            let rep = grad_check(
                |tape, vars| {
                    let y = tape.channel_affine(vars[0], vars[1], vars[2]);
                    project(tape, y, seed + 500)
                },
                &[x, m, a],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn l1_gradient_away_from_kinks_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            // Keep |a - b| >= 0.1 so the +/- eps probes never cross zero.
            let n = 24;
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = a
                .iter()
                .map(|&v| {
                    let off = rng.random_range(0.1..0.5);
                    if rng.random_range(0.0..1.0) < 0.5 {
                        v + off
                    } else {
                        v - off
                    }
                })
                .collect();
            let ta = Tensor::from_vec(&[n], a).unwrap();
            let tb = Tensor::from_vec(&[n], b).unwrap();
            let rep = grad_check(
                |tape, vars| tape.l1_mean(vars[0], vars[1]),
                &[ta, tb],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn structural_ops_gradients_match_finite_differences() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 60);
            let a = rand_tensor(&mut rng, &[6]);
            let b = rand_tensor(&mut rng, &[4]);
            let rep = grad_check(
                |tape, vars| {
                    let cat = tape.concat1d(vars[0], vars[1]);
                    let sl = tape.slice1d(cat, 2, 6);
                    let tiled = tape.tile1d(sl, 2);
                    let bm = tape.broadcast_map(tiled, 3, 3);
                    project(tape, bm, seed + 600)
                },
                &[a, b],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::filled(&[5], 0.3);
        let rep = grad_check(
            |tape, vars| {
                // Output ignores the input entirely.
                let c = tape.leaf(Tensor::scalar(2.0));
                let _ = vars;
                tape.sum_all(c)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_eq!(rep.max_rel_err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_a_check_failure() {
        let x = Tensor::filled(&[2], 0.0);
        let res = grad_check(
            |tape, vars| {
                let inv = tape.leaf(Tensor::scalar(f64::NAN));
                let p = tape.mul(vars[0], vars[0]);
                let s = tape.sum_all(p);
                tape.mul(s, inv)
            },
            &[x],
            1e-5,
            1e-4,
        );
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    #[test]
    fn oversized_inputs_are_rejected() {
        let x = Tensor::<f64>::zeros(&[40, 40]);
        assert!(grad_check(|tape, vars| tape.sum_all(vars[0]), &[x], 1e-5, 1e-4).is_err());
    }
}
