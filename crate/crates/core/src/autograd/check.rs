//! Gradient checking against central finite differences.

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Per-tensor worst relative error between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (tensor index, coordinate of worst error, analytic, numeric, rel err)
    pub per_tensor: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub tensor: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

// The denominator floor reflects the precision limit of the central
// difference itself: cancellation noise is about eps * |loss| / h, so a
// gradient smaller than roughly 1e-6 cannot be verified in relative terms
// and is compared on an absolute scale instead.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares `analytic` gradients of `loss_fn` with central differences of
/// step `h`. With `samples = Some((n, seed))` only `n` seeded-random
/// coordinates per tensor are perturbed, which keeps large-parameter checks
/// tractable; `None` checks every coordinate.
pub fn grad_check(
    tensors: &[Tensor],
    analytic: &[Vec<f64>],
    mut loss_fn: impl FnMut(&[Tensor]) -> f64,
    h: f64,
    samples: Option<(usize, u64)>,
) -> GradCheckReport {
    assert_eq!(tensors.len(), analytic.len());
    let mut work: Vec<Tensor> = tensors.to_vec();
    let mut per_tensor = Vec::with_capacity(tensors.len());
    let mut max_rel = 0.0f64;

    for (ti, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.len(), tensors[ti].len(), "gradient length mismatch");
        let coords: Vec<usize> = match samples {
            Some((n, seed)) if n < grad.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ti as u64).wrapping_mul(0x9e37));
                sample(&mut rng, grad.len(), n).into_vec()
            }
            _ => (0..grad.len()).collect(),
        };
        let mut worst = TensorCheck {
            tensor: ti,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
            rel_err: 0.0,
            checked: coords.len(),
        };
        for &ci in &coords {
            let orig = work[ti].data()[ci];
            // Retry at smaller steps: a ReLU kink inside the ±h interval
            // corrupts a single central difference, but the error vanishes
            // once the step clears the kink, while a genuinely wrong
            // gradient stays wrong at every scale.
            let mut numeric = f64::NAN;
            let mut e = f64::INFINITY;
            for scale in [1.0, 0.25, 0.0625] {
                let hs = h * scale;
                work[ti].data_mut()[ci] = orig + hs;
                let up = loss_fn(&work);
                work[ti].data_mut()[ci] = orig - hs;
                let down = loss_fn(&work);
                work[ti].data_mut()[ci] = orig;
                let n = (up - down) / (2.0 * hs);
                let en = rel_err(grad[ci], n);
                if en < e {
                    e = en;
                    numeric = n;
                }
                if e < 1e-9 {
                    break;
                }
            }
            if e >= worst.rel_err {
                worst = TensorCheck {
                    tensor: ti,
                    worst_coord: ci,
                    analytic: grad[ci],
                    numeric,
                    rel_err: e,
                    checked: coords.len(),
                };
            }
        }
        max_rel = max_rel.max(worst.rel_err);
        per_tensor.push(worst);
    }

    GradCheckReport {
        per_tensor,
        max_rel_err: max_rel,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_machine_exact() {
        // loss = 3*x0 + 2*x1
        let t = vec![Tensor::new(vec![2], vec![1.0, -4.0])];
        let analytic = vec![vec![3.0, 2.0]];
        let report = grad_check(
            &t,
            &analytic,
            |ts| 3.0 * ts[0].data()[0] + 2.0 * ts[0].data()[1],
            1e-5,
            None,
        );
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let t = vec![Tensor::new(vec![1], vec![2.0])];
        let analytic = vec![vec![5.0]]; // true gradient is 4.0
        let report = grad_check(&t, &analytic, |ts| ts[0].data()[0].powi(2), 1e-5, None);
        assert!(!report.passes(1e-4));
    }
}
