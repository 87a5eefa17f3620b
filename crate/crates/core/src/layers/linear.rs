use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::params::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fully connected layer, weight layout (out_features, in_features).
#[derive(Debug, Clone)]
pub struct Linear<S: Scalar = f32> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    cached_input: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let mut weight = Tensor::zeros(&[out_features, in_features])?;
        weight.fill_uniform(rng, -bound, bound);
        let mut bias = Tensor::zeros(&[out_features])?;
        bias.fill_uniform(rng, -bound, bound);
        Ok(Self {
            weight: Param::new("weight", weight),
            bias: Param::new("bias", bias),
            cached_input: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.size(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.size(0)
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        if x.rank() != 2 || x.size(1) != self.in_features() {
            return Err(Error::Shape(format!(
                "linear ({} -> {}) got input {:?}",
                self.in_features(),
                self.out_features(),
                x.dims()
            )));
        }
        let (n, fi, fo) = (x.size(0), self.in_features(), self.out_features());
        let mut out = Tensor::zeros(&[n, fo])?;
        let xd = x.data();
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let o = out.data_mut();
        for bn in 0..n {
            let xrow = &xd[bn * fi..(bn + 1) * fi];
            for of in 0..fo {
                let wrow = &w[of * fi..(of + 1) * fi];
                let mut acc = b[of];
                for i in 0..fi {
                    acc += xrow[i] * wrow[i];
                }
                o[bn * fo + of] = acc;
            }
        }
        self.cached_input = if mode.record { Some(x.clone()) } else { None };
        Ok(out)
    }

    pub fn backward(&mut self, gout: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self
            .cached_input
            .take()
            .ok_or_else(|| Error::Invalid("linear backward without recorded forward".into()))?;
        let (n, fi, fo) = (x.size(0), self.in_features(), self.out_features());
        let mut gx = Tensor::zeros(&[n, fi])?;
        let g = gout.data();
        let xd = x.data();
        let w = self.weight.value.data();
        let frozen = self.weight.frozen;
        {
            let gw = self.weight.grad.data_mut();
            let gb = self.bias.grad.data_mut();
            let gxd = gx.data_mut();
            for bn in 0..n {
                let xrow = &xd[bn * fi..(bn + 1) * fi];
                let gxrow = &mut gxd[bn * fi..(bn + 1) * fi];
                for of in 0..fo {
                    let gv = g[bn * fo + of];
                    let wrow = &w[of * fi..(of + 1) * fi];
                    if frozen {
                        for i in 0..fi {
                            gxrow[i] += gv * wrow[i];
                        }
                    } else {
                        gb[of] += gv;
                        let gwrow = &mut gw[of * fi..(of + 1) * fi];
                        for i in 0..fi {
                            gxrow[i] += gv * wrow[i];
                            gwrow[i] += gv * xrow[i];
                        }
                    }
                }
            }
        }
        Ok(gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.weight.frozen = frozen;
        self.bias.frozen = frozen;
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        vec![
            ("weight".to_string(), &self.weight.value),
            ("bias".to_string(), &self.bias.value),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        vec![
            ("weight".to_string(), &mut self.weight.value),
            ("bias".to_string(), &mut self.bias.value),
        ]
    }
}

/// Collapses NCHW activations to (N, C*H*W) rows for the classifier head.
#[derive(Debug, Clone, Default)]
pub struct Flatten<S: Scalar = f32> {
    cached_dims: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Flatten<S> {
    pub fn new() -> Self {
        Self { cached_dims: None, _marker: std::marker::PhantomData }
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        if x.rank() < 2 {
            return Err(Error::Shape(format!("flatten expects rank >= 2, got {:?}", x.dims())));
        }
        let n = x.size(0);
        let rest = x.len() / n;
        if mode.record {
            self.cached_dims = Some(x.dims().to_vec());
        }
        x.reshape(&[n, rest])
    }

    pub fn backward(&mut self, gout: &Tensor<S>) -> Result<Tensor<S>> {
        let dims = self
            .cached_dims
            .take()
            .ok_or_else(|| Error::Invalid("flatten backward without recorded forward".into()))?;
        gout.reshape(&dims)
    }
}
