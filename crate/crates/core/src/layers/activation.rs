use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Relu<S: Scalar = f32> {
    mask: Option<Vec<bool>>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Relu<S> {
    pub fn new() -> Self {
        Self { mask: None, _marker: std::marker::PhantomData }
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let out = x.map(|v| if v > S::zero() { v } else { S::zero() });
        self.mask = if mode.record {
            Some(x.data().iter().map(|&v| v > S::zero()).collect())
        } else {
            None
        };
        Ok(out)
    }

    pub fn backward(&mut self, gout: &Tensor<S>) -> Result<Tensor<S>> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::Invalid("relu backward without recorded forward".into()))?;
        if mask.len() != gout.len() {
            return Err(Error::Shape("relu backward grad size mismatch".into()));
        }
        let mut g = gout.clone();
        for (v, keep) in g.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = S::zero();
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_negatives_and_gates_gradient() {
        let mut r = Relu::<f64>::new();
        let x = Tensor::new(&[4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let y = r.forward(&x, Mode::TRAIN).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 2.0]);
        let g = Tensor::new(&[4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let gx = r.backward(&g).unwrap();
        // Gradient at exactly zero is defined as zero.
        assert_eq!(gx.data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
