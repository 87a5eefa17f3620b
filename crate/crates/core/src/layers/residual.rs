use rand::Rng;

use crate::error::Result;
use crate::layers::{BatchNorm2d, Conv2d, Mode, Padding, Relu};
use crate::params::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// conv3x3 - bn - relu - conv3x3 - bn, plus identity skip, relu on the sum.
/// When the channel count or stride changes, the skip becomes a projection
/// (1x1 conv + bn).
#[derive(Debug, Clone)]
pub struct ResidualBlock<S: Scalar = f32> {
    conv1: Conv2d<S>,
    bn1: BatchNorm2d<S>,
    relu1: Relu<S>,
    conv2: Conv2d<S>,
    bn2: BatchNorm2d<S>,
    proj: Option<(Conv2d<S>, BatchNorm2d<S>)>,
    relu_out: Relu<S>,
}

impl<S: Scalar> ResidualBlock<S> {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        let conv1 = Conv2d::new(in_ch, out_ch, 3, stride, Padding::Same, false, rng)?;
        let bn1 = BatchNorm2d::new(out_ch)?;
        let conv2 = Conv2d::new(out_ch, out_ch, 3, 1, Padding::Same, false, rng)?;
        let bn2 = BatchNorm2d::new(out_ch)?;
        let proj = if in_ch != out_ch || stride != 1 {
            Some((
                Conv2d::new(in_ch, out_ch, 1, stride, Padding::Valid, false, rng)?,
                BatchNorm2d::new(out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            relu1: Relu::new(),
            conv2,
            bn2,
            proj,
            relu_out: Relu::new(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn out_dims(&self, in_dims: &[usize]) -> Result<[usize; 4]> {
        self.conv1.out_dims(in_dims)
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let mut m = self.conv1.forward(x, mode)?;
        m = self.bn1.forward(&m, mode)?;
        m = self.relu1.forward(&m, mode)?;
        m = self.conv2.forward(&m, mode)?;
        m = self.bn2.forward(&m, mode)?;
        let skip = match self.proj.as_mut() {
            Some((conv, bn)) => {
                let s = conv.forward(x, mode)?;
                bn.forward(&s, mode)?
            }
            None => x.clone(),
        };
        m.add_assign(&skip)?;
        self.relu_out.forward(&m, mode)
    }

    pub fn backward(&mut self, gout: &Tensor<S>) -> Result<Tensor<S>> {
        let gsum = self.relu_out.backward(gout)?;
        let g = self.bn2.backward(&gsum)?;
        let g = self.conv2.backward(&g)?;
        let g = self.relu1.backward(&g)?;
        let g = self.bn1.backward(&g)?;
        let mut gx = self.conv1.backward(&g)?;
        let gskip = match self.proj.as_mut() {
            Some((conv, bn)) => {
                let g = bn.backward(&gsum)?;
                conv.backward(&g)?
            }
            None => gsum,
        };
        gx.add_assign(&gskip)?;
        Ok(gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut out = Vec::new();
        out.extend(self.conv1.params_mut());
        out.extend(self.bn1.params_mut());
        out.extend(self.conv2.params_mut());
        out.extend(self.bn2.params_mut());
        if let Some((conv, bn)) = self.proj.as_mut() {
            out.extend(conv.params_mut());
            out.extend(bn.params_mut());
        }
        out
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.conv1.set_frozen(frozen);
        self.bn1.set_frozen(frozen);
        self.conv2.set_frozen(frozen);
        self.bn2.set_frozen(frozen);
        if let Some((conv, bn)) = self.proj.as_mut() {
            conv.set_frozen(frozen);
            bn.set_frozen(frozen);
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (n, t) in self.conv1.tensors() {
            out.push((format!("conv1.{n}"), t));
        }
        for (n, t) in self.bn1.tensors() {
            out.push((format!("bn1.{n}"), t));
        }
        for (n, t) in self.conv2.tensors() {
            out.push((format!("conv2.{n}"), t));
        }
        for (n, t) in self.bn2.tensors() {
            out.push((format!("bn2.{n}"), t));
        }
        if let Some((conv, bn)) = self.proj.as_ref() {
            for (n, t) in conv.tensors() {
                out.push((format!("proj_conv.{n}"), t));
            }
            for (n, t) in bn.tensors() {
                out.push((format!("proj_bn.{n}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for (n, t) in self.conv1.tensors_mut() {
            out.push((format!("conv1.{n}"), t));
        }
        for (n, t) in self.bn1.tensors_mut() {
            out.push((format!("bn1.{n}"), t));
        }
        for (n, t) in self.conv2.tensors_mut() {
            out.push((format!("conv2.{n}"), t));
        }
        for (n, t) in self.bn2.tensors_mut() {
            out.push((format!("bn2.{n}"), t));
        }
        if let Some((conv, bn)) = self.proj.as_mut() {
            for (n, t) in conv.tensors_mut() {
                out.push((format!("proj_conv.{n}"), t));
            }
            for (n, t) in bn.tensors_mut() {
                out.push((format!("proj_bn.{n}"), t));
            }
        }
        out
    }
}
