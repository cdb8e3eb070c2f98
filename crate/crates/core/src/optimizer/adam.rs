use crate::parameterization::{InsertionParams, ParamGrads};

use super::constraints::ConstraintReport;

/// Bias-corrected Adam moments for every tensor of [`InsertionParams`]. No weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

// Slot indices in `InsertionParams::slices` order.
const Z_PRE: usize = 2;
const Z_SUFF: usize = 3;

impl AdamState {
    pub fn new(params: &InsertionParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        AdamState { first: zeros.clone(), second: zeros, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One descent step `params ← params - lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut InsertionParams, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            debug_assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Keeps the first moments consistent after constraint enforcement negated
    /// a coefficient matrix.
    pub fn absorb(&mut self, report: &ConstraintReport) {
        for (flipped, slot) in [(report.negated_pre, Z_PRE), (report.negated_suff, Z_SUFF)] {
            if flipped {
                for m in self.first[slot].iter_mut() {
                    *m = -*m;
                }
            }
        }
    }
}
