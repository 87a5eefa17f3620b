use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::params::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over the channel axis of NCHW input.
///
/// Uses biased variance both for normalization and for the running
/// estimate, so a batch seen in training mode and the same batch replayed
/// through the running statistics agree exactly when the batch *is* the
/// whole population.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<S: Scalar = f32> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    eps: S,
    momentum: S,
    cache: Option<BnCache<S>>,
}

#[derive(Debug, Clone)]
struct BnCache<S: Scalar> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
    batch_stats: bool,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Param::new("weight", Tensor::full(&[channels], S::one())?),
            beta: Param::new("bias", Tensor::zeros(&[channels])?),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], S::one())?,
            eps: S::from_f64_lossy(BN_EPS),
            momentum: S::from_f64_lossy(BN_MOMENTUM),
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        if x.rank() != 4 || x.size(1) != self.channels() {
            return Err(Error::Shape(format!(
                "batchnorm over {} channels got input {:?}",
                self.channels(),
                x.dims()
            )));
        }
        let (n, c, h, w) = (x.size(0), x.size(1), x.size(2), x.size(3));
        let plane = h * w;
        let m = S::from_f64_lossy((n * plane) as f64);
        let xd = x.data();

        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        if mode.train_bn {
            for bn in 0..n {
                for ch in 0..c {
                    let base = (bn * c + ch) * plane;
                    let mut s = S::zero();
                    for &v in &xd[base..base + plane] {
                        s += v;
                    }
                    mean[ch] += s;
                }
            }
            for ch in 0..c {
                mean[ch] /= m;
            }
            for bn in 0..n {
                for ch in 0..c {
                    let base = (bn * c + ch) * plane;
                    let mu = mean[ch];
                    let mut s = S::zero();
                    for &v in &xd[base..base + plane] {
                        let d = v - mu;
                        s += d * d;
                    }
                    var[ch] += s;
                }
            }
            for ch in 0..c {
                var[ch] /= m;
            }
            let mom = self.momentum;
            let keep = S::one() - mom;
            for ch in 0..c {
                let rm = self.running_mean.data_mut();
                rm[ch] = keep * rm[ch] + mom * mean[ch];
                let rv = self.running_var.data_mut();
                rv[ch] = keep * rv[ch] + mom * var[ch];
            }
        } else {
            mean.copy_from_slice(self.running_mean.data());
            var.copy_from_slice(self.running_var.data());
        }

        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.dims())?;
        let mut out = Tensor::zeros(x.dims())?;
        {
            let xh = xhat.data_mut();
            let od = out.data_mut();
            let gam = self.gamma.value.data();
            let bet = self.beta.value.data();
            for bn in 0..n {
                for ch in 0..c {
                    let base = (bn * c + ch) * plane;
                    let (mu, is, g, b) = (mean[ch], inv_std[ch], gam[ch], bet[ch]);
                    for i in base..base + plane {
                        let v = (xd[i] - mu) * is;
                        xh[i] = v;
                        od[i] = g * v + b;
                    }
                }
            }
        }
        self.cache = if mode.record {
            Some(BnCache { xhat, inv_std, batch_stats: mode.train_bn })
        } else {
            None
        };
        Ok(out)
    }

    pub fn backward(&mut self, gout: &Tensor<S>) -> Result<Tensor<S>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Invalid("batchnorm backward without recorded forward".into()))?;
        let (n, c) = (gout.size(0), gout.size(1));
        let plane = gout.size(2) * gout.size(3);
        let m = S::from_f64_lossy((n * plane) as f64);
        let g = gout.data();
        let xh = cache.xhat.data();

        // Per-channel sums of g and g*xhat drive both the parameter grads
        // and (in batch-stats mode) the correction terms of dx.
        let mut sum_g = vec![S::zero(); c];
        let mut sum_gx = vec![S::zero(); c];
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * plane;
                let (mut a, mut b) = (S::zero(), S::zero());
                for i in base..base + plane {
                    a += g[i];
                    b += g[i] * xh[i];
                }
                sum_g[ch] += a;
                sum_gx[ch] += b;
            }
        }
        if !self.gamma.frozen {
            for ch in 0..c {
                self.gamma.grad.data_mut()[ch] += sum_gx[ch];
                self.beta.grad.data_mut()[ch] += sum_g[ch];
            }
        }

        let gam = self.gamma.value.data();
        let mut gx = Tensor::zeros(gout.dims())?;
        let gxd = gx.data_mut();
        if cache.batch_stats {
            for bn in 0..n {
                for ch in 0..c {
                    let base = (bn * c + ch) * plane;
                    let coef = gam[ch] * cache.inv_std[ch] / m;
                    let (sg, sgx) = (sum_g[ch], sum_gx[ch]);
                    for i in base..base + plane {
                        gxd[i] = coef * (m * g[i] - sg - xh[i] * sgx);
                    }
                }
            }
        } else {
            for bn in 0..n {
                for ch in 0..c {
                    let base = (bn * c + ch) * plane;
                    let coef = gam[ch] * cache.inv_std[ch];
                    for i in base..base + plane {
                        gxd[i] = coef * g[i];
                    }
                }
            }
        }
        Ok(gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.gamma.frozen = frozen;
        self.beta.frozen = frozen;
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        vec![
            ("weight".to_string(), &self.gamma.value),
            ("bias".to_string(), &self.beta.value),
            ("running_mean".to_string(), &self.running_mean),
            ("running_var".to_string(), &self.running_var),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        vec![
            ("weight".to_string(), &mut self.gamma.value),
            ("bias".to_string(), &mut self.beta.value),
            ("running_mean".to_string(), &mut self.running_mean),
            ("running_var".to_string(), &mut self.running_var),
        ]
    }
}
