//! Central-difference gradient checking. Always runs in `f64`; the builder
//! closure reconstructs the loss from scratch for every probe, so it must be
//! deterministic in its inputs.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub samples: usize,
}

/// Compare analytic gradients against central differences.
///
/// `build` receives a fresh tape plus one leaf per entry of `params`
/// (registered in order, `requires_grad = true`) and returns the scalar loss
/// var. At most `max_samples_per_tensor` elements of each parameter are
/// probed; the relative error is
/// `|analytic - fd| / (|analytic| + |fd| + 1e-12)`.
pub fn grad_check<F>(
    params: &[Tensor<f64>],
    eps: f64,
    max_samples_per_tensor: usize,
    rng: &mut ChaCha8Rng,
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p, true)).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).expect("grad_check loss must be scalar");
        vars.iter()
            .map(|&v| tape.grad(v).expect("leaf gradient").to_vec())
            .collect()
    };

    let eval = |probe: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|p| tape.leaf(p, false)).collect();
        let loss = build(&mut tape, &vars);
        tape.scalar_of(loss)
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel_err: f64 = 0.0;
    let mut n_samples = 0;

    for ti in 0..params.len() {
        let n = params[ti].numel();
        let picks: Vec<usize> = if n <= max_samples_per_tensor {
            (0..n).collect()
        } else {
            sample(rng, n, max_samples_per_tensor).into_vec()
        };
        for ei in picks {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let up = eval(&work);
            work[ti].data_mut()[ei] = orig - eps;
            let down = eval(&work);
            work[ti].data_mut()[ei] = orig;

            let fd = (up - down) / (2.0 * eps);
            let an = analytic[ti][ei];
            let rel = (an - fd).abs() / (an.abs() + fd.abs() + 1e-12);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            n_samples += 1;
        }
    }

    GradCheckReport { max_rel_err, samples: n_samples }
}
