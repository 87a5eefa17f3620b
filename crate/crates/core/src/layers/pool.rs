use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn pool_out_dims(in_dims: &[usize], kernel: usize, stride: usize) -> Result<[usize; 4]> {
    if in_dims.len() != 4 {
        return Err(Error::Shape(format!("pooling expects rank-4 input, got {in_dims:?}")));
    }
    let (h, w) = (in_dims[2], in_dims[3]);
    if h < kernel || w < kernel {
        return Err(Error::Shape(format!(
            "pool kernel {kernel} does not fit {h}x{w} input"
        )));
    }
    Ok([
        in_dims[0],
        in_dims[1],
        (h - kernel) / stride + 1,
        (w - kernel) / stride + 1,
    ])
}

/// Max pooling; ties resolve to the first maximum in row-major window order.
#[derive(Debug, Clone)]
pub struct MaxPool2d<S: Scalar = f32> {
    pub kernel: usize,
    pub stride: usize,
    /// (input dims, flat argmax index per output element)
    cache: Option<(Vec<usize>, Vec<usize>)>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> MaxPool2d<S> {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride, cache: None, _marker: std::marker::PhantomData }
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let od = pool_out_dims(x.dims(), self.kernel, self.stride)?;
        let (n, c, h, w) = (x.size(0), x.size(1), x.size(2), x.size(3));
        let (oh, ow) = (od[2], od[3]);
        let mut out = Tensor::zeros(&od)?;
        let mut argmax = vec![0usize; out.len()];
        let xd = x.data();
        let o = out.data_mut();
        for bn in 0..n {
            for ch in 0..c {
                let ibase = (bn * c + ch) * h * w;
                for y in 0..oh {
                    for xw in 0..ow {
                        let mut best_i = ibase + (y * self.stride) * w + xw * self.stride;
                        let mut best = xd[best_i];
                        for kh in 0..self.kernel {
                            let row = ibase + (y * self.stride + kh) * w + xw * self.stride;
                            for kw in 0..self.kernel {
                                let v = xd[row + kw];
                                if v > best {
                                    best = v;
                                    best_i = row + kw;
                                }
                            }
                        }
                        let oi = ((bn * c + ch) * oh + y) * ow + xw;
                        o[oi] = best;
                        argmax[oi] = best_i;
                    }
                }
            }
        }
        self.cache = if mode.record { Some((x.dims().to_vec(), argmax)) } else { None };
        Ok(out)
    }

    pub fn backward(&mut self, gout: &Tensor<S>) -> Result<Tensor<S>> {
        let (in_dims, argmax) = self
            .cache
            .take()
            .ok_or_else(|| Error::Invalid("maxpool backward without recorded forward".into()))?;
        if argmax.len() != gout.len() {
            return Err(Error::Shape("maxpool backward grad size mismatch".into()));
        }
        let mut gx = Tensor::zeros(&in_dims)?;
        let gxd = gx.data_mut();
        for (&gi, &src) in gout.data().iter().zip(&argmax) {
            gxd[src] += gi;
        }
        Ok(gx)
    }
}

/// Average pooling over square windows.
#[derive(Debug, Clone)]
pub struct AvgPool2d<S: Scalar = f32> {
    pub kernel: usize,
    pub stride: usize,
    cache: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> AvgPool2d<S> {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride, cache: None, _marker: std::marker::PhantomData }
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let od = pool_out_dims(x.dims(), self.kernel, self.stride)?;
        let (n, c, h, w) = (x.size(0), x.size(1), x.size(2), x.size(3));
        let (oh, ow) = (od[2], od[3]);
        let inv = S::one() / S::from_f64_lossy((self.kernel * self.kernel) as f64);
        let mut out = Tensor::zeros(&od)?;
        let xd = x.data();
        let o = out.data_mut();
        for bn in 0..n {
            for ch in 0..c {
                let ibase = (bn * c + ch) * h * w;
                for y in 0..oh {
                    for xw in 0..ow {
                        let mut acc = S::zero();
                        for kh in 0..self.kernel {
                            let row = ibase + (y * self.stride + kh) * w + xw * self.stride;
                            for kw in 0..self.kernel {
                                acc += xd[row + kw];
                            }
                        }
                        o[((bn * c + ch) * oh + y) * ow + xw] = acc * inv;
                    }
                }
            }
        }
        self.cache = if mode.record { Some(x.dims().to_vec()) } else { None };
        Ok(out)
    }

    pub fn backward(&mut self, gout: &Tensor<S>) -> Result<Tensor<S>> {
        let in_dims = self
            .cache
            .take()
            .ok_or_else(|| Error::Invalid("avgpool backward without recorded forward".into()))?;
        let (n, c, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
        let (oh, ow) = (gout.size(2), gout.size(3));
        let inv = S::one() / S::from_f64_lossy((self.kernel * self.kernel) as f64);
        let mut gx = Tensor::zeros(&in_dims)?;
        let g = gout.data();
        let gxd = gx.data_mut();
        for bn in 0..n {
            for ch in 0..c {
                let ibase = (bn * c + ch) * h * w;
                for y in 0..oh {
                    for xw in 0..ow {
                        let gv = g[((bn * c + ch) * oh + y) * ow + xw] * inv;
                        for kh in 0..self.kernel {
                            let row = ibase + (y * self.stride + kh) * w + xw * self.stride;
                            for kw in 0..self.kernel {
                                gxd[row + kw] += gv;
                            }
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}
