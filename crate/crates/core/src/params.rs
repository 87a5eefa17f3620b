use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor with its gradient accumulator and momentum buffer.
///
/// `frozen` parameters keep their values through backward/step: layers skip
/// accumulating their weight gradients and the optimizer skips the update,
/// but gradients still flow *through* the layer to whatever sits below it.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar = f32> {
    /// Name local to the owning layer (e.g. "weight", "running_mean" is a
    /// buffer and lives outside `Param`).
    pub name: &'static str,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub velocity: Tensor<S>,
    pub frozen: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: &'static str, value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.dims()).expect("param dims already validated");
        let velocity = grad.clone();
        Self { name, value, grad, velocity, frozen: false }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
    }

    /// Classic momentum SGD: `v = momentum*v + g; value -= lr*v`.
    pub fn sgd_step(&mut self, lr: S, momentum: S) {
        if self.frozen {
            return;
        }
        let v = self.velocity.data_mut();
        let g = self.grad.data();
        let p = self.value.data_mut();
        for i in 0..v.len() {
            v[i] = momentum * v[i] + g[i];
            p[i] -= lr * v[i];
        }
    }
}
