//! Finite-difference validation of analytic gradients.

use super::param::{Param, ParamVisitor};
use super::rng::StreamRng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

fn with_nth_param<M: ParamVisitor>(model: &mut M, target: usize, f: impl FnOnce(&mut Param)) {
    let mut i = 0;
    let mut f = Some(f);
    model.visit_params(&mut |_, p| {
        if i == target {
            if let Some(g) = f.take() {
                g(p);
            }
        }
        i += 1;
    });
}

/// Compares analytic gradients against central differences.
///
/// `loss_fn` must run a full forward and backward pass, accumulate into the
/// parameter `grad` buffers, and return the scalar loss. It must be a pure
/// function of the parameters (fix all data and randomness outside).
/// `per_param` coordinates are sampled from each parameter tensor; relative
/// error is `|a - f| / max(|a| + |f|, 1e-6)`; the floor absorbs
/// central-difference rounding noise on structurally-zero gradients.
pub fn grad_check<M: ParamVisitor>(
    model: &mut M,
    mut loss_fn: impl FnMut(&mut M) -> f64,
    eps: f64,
    per_param: usize,
    seed: u64,
) -> GradCheckReport {
    model.zero_grads();
    let _ = loss_fn(model);
    let mut names: Vec<String> = Vec::new();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    model.visit_params(&mut |n, p| {
        names.push(n.to_string());
        grads.push(p.grad.clone());
    });

    let mut rng = StreamRng::new(seed, "gradcheck");
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (pi, g) in grads.iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let mut picks: Vec<usize> = if g.len() <= per_param {
            (0..g.len()).collect()
        } else {
            (0..per_param).map(|_| rng.gen_index(g.len())).collect()
        };
        picks.sort_unstable();
        picks.dedup();
        for k in picks {
            with_nth_param(model, pi, |p| p.data[k] += eps);
            model.zero_grads();
            let up = loss_fn(model);
            with_nth_param(model, pi, |p| p.data[k] -= 2.0 * eps);
            model.zero_grads();
            let down = loss_fn(model);
            with_nth_param(model, pi, |p| p.data[k] += eps);
            let fd = (up - down) / (2.0 * eps);
            let a = g[k];
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{}[{}] analytic={} fd={}", names[pi], k, a, fd);
            }
        }
    }
    model.zero_grads();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::linear::Linear;

    #[test]
    fn linear_squared_loss_gradients_check_out() {
        let mut rng = StreamRng::new(11, "gc");
        let mut layer = Linear::new(3, 2, &mut rng);
        let x = [0.3, -0.7, 1.1];
        let report = grad_check(
            &mut layer,
            |l| {
                let y = l.forward(&x);
                let loss: f64 = y.iter().map(|v| v * v).sum();
                let dy: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
                let _ = l.backward(&dy);
                loss
            },
            1e-5,
            16,
            0,
        );
        assert!(
            report.max_rel_err < 1e-7,
            "rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
        assert!(report.checked >= 8);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rng = StreamRng::new(12, "gc");
        let mut layer = Linear::new(2, 1, &mut rng);
        let x = [0.5, -0.25];
        let report = grad_check(
            &mut layer,
            |l| {
                let y = l.forward(&x);
                let _ = l.backward(&[1.0]); // real grads
                l.w.grad[0] += 0.5; // sabotage
                y[0]
            },
            1e-5,
            8,
            0,
        );
        assert!(report.max_rel_err > 1e-2);
    }
}
