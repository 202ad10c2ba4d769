use super::{Param, Scalar};

/// Adaptive-moment optimiser. Moment buffers are matched to parameters by
/// position, so the parameter list must keep a stable order between steps.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Param<S>>) {
        if self.moments.is_empty() {
            self.moments =
                params.iter().map(|p| (vec![S::zero(); p.value.len()], vec![S::zero(); p.value.len()])).collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let one = S::one();
        let c1 = one - b1.powi(self.step);
        let c2 = one - b2.powi(self.step);
        let lr = S::lit(self.lr);
        let eps = S::lit(self.eps);
        for (p, (m, v)) in params.into_iter().zip(self.moments.iter_mut()) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
