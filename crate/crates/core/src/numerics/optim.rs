//! Adam with bias correction, plus global-norm gradient clipping.

use super::{Matrix, NumericsError, Result};

/// Adam over a fixed list of parameter matrices. Moment buffers are keyed by
/// position, so `step` must always receive the parameters in the order the
/// optimizer was built with.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    /// Standard defaults: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    /// Number of parameter matrices this optimizer holds state for.
    pub fn slot_count(&self) -> usize {
        self.m.len()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NumericsError::ParamCountMismatch {
                expected: self.m.len(),
                got: params.len().max(grads.len()),
            });
        }
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(self.m.iter().zip(&self.v))
        {
            if p.shape() != m.shape() || g.shape() != v.shape() || p.shape() != g.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFinite { op: "adam_step" });
            }
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / b1t;
                let vhat = v[j] / b2t;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// L2 norm of all gradient entries taken together.
pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::sq_sum).sum::<f64>().sqrt()
}

/// Scale all gradients down so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction, |Δp| = lr · g/|g| / (1 + eps·...) ≈ lr on step 1.
        let mut p = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let mut opt = Adam::new(0.1, &[(1, 1)]);
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.get(0, 0) - (1.0 - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize (x − 3)² from x = 0.
        let mut p = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let mut opt = Adam::new(0.05, &[(1, 1)]);
        for _ in 0..2000 {
            let g = Matrix::from_vec(1, 1, vec![2.0 * (p.get(0, 0) - 3.0)]).unwrap();
            opt.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!((p.get(0, 0) - 3.0).abs() < 1e-2);
    }

    #[test]
    fn adam_rejects_wrong_arity_and_nan() {
        let mut p = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let mut opt = Adam::new(0.1, &[(1, 1)]);
        assert!(matches!(
            opt.step(&mut [&mut p], &[]),
            Err(NumericsError::ParamCountMismatch { .. })
        ));
        let bad = Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(
            opt.step(&mut [&mut p], &[bad]),
            Err(NumericsError::NonFinite { .. })
        ));
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = vec![
            Matrix::from_vec(1, 2, vec![3.0, 0.0]).unwrap(),
            Matrix::from_vec(1, 1, vec![4.0]).unwrap(),
        ];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);

        let mut small = vec![Matrix::from_vec(1, 1, vec![0.3]).unwrap()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].get(0, 0), 0.3);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Matrix::from_vec(1, 2, vec![0.2, -0.4]).unwrap();
            let mut opt = Adam::new(0.01, &[(1, 2)]);
            for i in 0..50 {
                let g =
                    Matrix::from_vec(1, 2, vec![p.get(0, 0) * 0.3 + i as f64 * 0.01, -0.2]).unwrap();
                opt.step(&mut [&mut p], &[g]).unwrap();
            }
            p.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
