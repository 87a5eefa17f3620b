use crate::params::Param;
use crate::scalar::Scalar;

/// Momentum SGD over whatever parameter list the caller collects.
#[derive(Debug, Clone, Copy)]
pub struct Sgd<S: Scalar = f32> {
    pub lr: S,
    pub momentum: S,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: S, momentum: S) -> Self {
        Self { lr, momentum }
    }

    pub fn zero_grad(&self, params: &mut [&mut Param<S>]) {
        for p in params.iter_mut() {
            p.zero_grad();
        }
    }

    pub fn step(&self, params: &mut [&mut Param<S>]) {
        for p in params.iter_mut() {
            p.sgd_step(self.lr, self.momentum);
        }
    }
}
