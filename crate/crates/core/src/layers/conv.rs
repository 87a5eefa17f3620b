use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::params::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of (k-1)/2 on each side; preserves H and W at stride 1.
    Same,
    /// No padding.
    Valid,
}

/// 2D convolution over NCHW input, weight layout (C_out, C_in, k, k).
#[derive(Debug, Clone)]
pub struct Conv2d<S: Scalar = f32> {
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
    pub stride: usize,
    pub padding: Padding,
    kernel: usize,
    cached_input: Option<Tensor<S>>,
}

impl<S: Scalar> Conv2d<S> {
    /// Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight
    /// and bias, fan_in = in_ch * k * k.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Invalid(format!("conv kernel must be odd, got {kernel}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Invalid(format!("conv stride must be 1 or 2, got {stride}")));
        }
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let mut weight = Tensor::zeros(&[out_ch, in_ch, kernel, kernel])?;
        weight.fill_uniform(rng, -bound, bound);
        let bias = if bias {
            let mut b = Tensor::zeros(&[out_ch])?;
            b.fill_uniform(rng, -bound, bound);
            Some(Param::new("bias", b))
        } else {
            None
        };
        Ok(Self {
            weight: Param::new("weight", weight),
            bias,
            stride,
            padding,
            kernel,
            cached_input: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.size(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.size(0)
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => (self.kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }

    pub fn out_dims(&self, in_dims: &[usize]) -> Result<[usize; 4]> {
        if in_dims.len() != 4 {
            return Err(Error::Shape(format!("conv expects rank-4 input, got {in_dims:?}")));
        }
        if in_dims[1] != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                in_dims[1]
            )));
        }
        let p = self.pad();
        let (h, w) = (in_dims[2], in_dims[3]);
        if h + 2 * p < self.kernel || w + 2 * p < self.kernel {
            return Err(Error::Shape(format!(
                "conv kernel {} does not fit {h}x{w} input with padding {p}",
                self.kernel
            )));
        }
        let oh = (h + 2 * p - self.kernel) / self.stride + 1;
        let ow = (w + 2 * p - self.kernel) / self.stride + 1;
        Ok([in_dims[0], self.out_channels(), oh, ow])
    }

    // The kernels below iterate (ic, kh, kw) outside and sweep whole output
    // rows inside: every hot inner loop is then an element-wise run over
    // contiguous f32 slices, which the compiler vectorizes (a per-pixel
    // kernel dot product would be a 9-element reduction it cannot).

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let od = self.out_dims(x.dims())?;
        let p = self.pad();
        let xp = pad4(x, p);
        let (n, ci, hp, wp) = dims4(&xp);
        let (co, k, s) = (self.out_channels(), self.kernel, self.stride);
        let (oh, ow) = (od[2], od[3]);
        let mut out = Tensor::zeros(&od)?;
        let w = self.weight.value.data();
        let xd = xp.data();
        let o = out.data_mut();
        for bn in 0..n {
            for oc in 0..co {
                let obase = (bn * co + oc) * oh * ow;
                if let Some(b) = self.bias.as_ref() {
                    let bv = b.value.data()[oc];
                    for v in &mut o[obase..obase + oh * ow] {
                        *v = bv;
                    }
                }
                for ic in 0..ci {
                    let wbase = (oc * ci + ic) * k * k;
                    let xcbase = (bn * ci + ic) * hp;
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = w[wbase + kh * k + kw];
                            for y in 0..oh {
                                let orow = obase + y * ow;
                                let xrow = (xcbase + y * s + kh) * wp + kw;
                                if s == 1 {
                                    let os = &mut o[orow..orow + ow];
                                    let xs = &xd[xrow..xrow + ow];
                                    for i in 0..ow {
                                        os[i] += wv * xs[i];
                                    }
                                } else {
                                    for i in 0..ow {
                                        o[orow + i] += wv * xd[xrow + i * s];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.cached_input = if mode.record { Some(x.clone()) } else { None };
        Ok(out)
    }

    /// Accumulates weight/bias grads (unless frozen) and returns grad w.r.t.
    /// the input.
    pub fn backward(&mut self, gout: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self
            .cached_input
            .take()
            .ok_or_else(|| Error::Invalid("conv backward without recorded forward".into()))?;
        let p = self.pad();
        let xp = pad4(&x, p);
        let (n, ci, hp, wp) = dims4(&xp);
        let (co, k, s) = (self.out_channels(), self.kernel, self.stride);
        let (oh, ow) = (gout.size(2), gout.size(3));
        let mut gxp = Tensor::zeros(xp.dims())?;
        let g = gout.data();
        let w = self.weight.value.data();
        let xd = xp.data();
        {
            let gx = gxp.data_mut();
            for bn in 0..n {
                for oc in 0..co {
                    let gbase = (bn * co + oc) * oh * ow;
                    for ic in 0..ci {
                        let wbase = (oc * ci + ic) * k * k;
                        let xcbase = (bn * ci + ic) * hp;
                        for kh in 0..k {
                            for kw in 0..k {
                                let wv = w[wbase + kh * k + kw];
                                for y in 0..oh {
                                    let grow = gbase + y * ow;
                                    let xrow = (xcbase + y * s + kh) * wp + kw;
                                    if s == 1 {
                                        let gxs = &mut gx[xrow..xrow + ow];
                                        let gs = &g[grow..grow + ow];
                                        for i in 0..ow {
                                            gxs[i] += wv * gs[i];
                                        }
                                    } else {
                                        for i in 0..ow {
                                            gx[xrow + i * s] += wv * g[grow + i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if !self.weight.frozen {
            let gw = self.weight.grad.data_mut();
            for bn in 0..n {
                for oc in 0..co {
                    let gbase = (bn * co + oc) * oh * ow;
                    for ic in 0..ci {
                        let wbase = (oc * ci + ic) * k * k;
                        let xcbase = (bn * ci + ic) * hp;
                        for kh in 0..k {
                            for kw in 0..k {
                                let mut acc = S::zero();
                                for y in 0..oh {
                                    let grow = gbase + y * ow;
                                    let xrow = (xcbase + y * s + kh) * wp + kw;
                                    if s == 1 {
                                        acc += dot_rows(&g[grow..grow + ow], &xd[xrow..xrow + ow]);
                                    } else {
                                        for i in 0..ow {
                                            acc += g[grow + i] * xd[xrow + i * s];
                                        }
                                    }
                                }
                                gw[wbase + kh * k + kw] += acc;
                            }
                        }
                    }
                }
            }
            if let Some(bias) = self.bias.as_mut() {
                let gb = bias.grad.data_mut();
                for bn in 0..n {
                    for oc in 0..co {
                        let gbase = (bn * co + oc) * oh * ow;
                        let mut acc = S::zero();
                        for v in &g[gbase..gbase + oh * ow] {
                            acc += *v;
                        }
                        gb[oc] += acc;
                    }
                }
            }
        }
        Ok(unpad4(&gxp, p, x.dims()))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut out = vec![&mut self.weight];
        if let Some(b) = self.bias.as_mut() {
            out.push(b);
        }
        out
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.weight.frozen = frozen;
        if let Some(b) = self.bias.as_mut() {
            b.frozen = frozen;
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("weight".to_string(), &self.weight.value)];
        if let Some(b) = self.bias.as_ref() {
            out.push(("bias".to_string(), &b.value));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = vec![("weight".to_string(), &mut self.weight.value)];
        if let Some(b) = self.bias.as_mut() {
            out.push(("bias".to_string(), &mut b.value));
        }
        out
    }
}

fn dims4<S: Scalar>(t: &Tensor<S>) -> (usize, usize, usize, usize) {
    (t.size(0), t.size(1), t.size(2), t.size(3))
}

/// Dot product over two equal-length rows, four independent lanes.  The
/// summation order is fixed (lane-striped, lanes folded pairwise at the end)
/// so results are reproducible run to run.
fn dot_rows<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut lanes = [S::zero(); 4];
    let mut i = 0;
    while i + 4 <= a.len() {
        lanes[0] += a[i] * b[i];
        lanes[1] += a[i + 1] * b[i + 1];
        lanes[2] += a[i + 2] * b[i + 2];
        lanes[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    while i < a.len() {
        lanes[0] += a[i] * b[i];
        i += 1;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
}

/// Zero-pads H and W by `p` on each side.
fn pad4<S: Scalar>(x: &Tensor<S>, p: usize) -> Tensor<S> {
    if p == 0 {
        return x.clone();
    }
    let (n, c, h, w) = dims4(x);
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = Tensor::zeros(&[n, c, hp, wp]).expect("padded dims are valid");
    let xd = x.data();
    let od = out.data_mut();
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let src = ((bn * c + ch) * h + y) * w;
                let dst = ((bn * c + ch) * hp + y + p) * wp + p;
                od[dst..dst + w].copy_from_slice(&xd[src..src + w]);
            }
        }
    }
    out
}

/// Inverse of `pad4`: crops the border back off.
fn unpad4<S: Scalar>(xp: &Tensor<S>, p: usize, dims: &[usize]) -> Tensor<S> {
    if p == 0 {
        return xp.clone();
    }
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let wp = w + 2 * p;
    let mut out = Tensor::zeros(dims).expect("original dims are valid");
    let xd = xp.data();
    let od = out.data_mut();
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let src = ((bn * c + ch) * (h + 2 * p) + y + p) * wp + p;
                let dst = ((bn * c + ch) * h + y) * w;
                od[dst..dst + w].copy_from_slice(&xd[src..src + w]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_padding_preserves_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Conv2d::<f32>::new(3, 5, 3, 1, Padding::Same, true, &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 3, 8, 8]).unwrap();
        let y = c.forward(&x, Mode::EVAL).unwrap();
        assert_eq!(y.dims(), &[2, 5, 8, 8]);
    }

    #[test]
    fn stride_two_halves_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Conv2d::<f32>::new(3, 4, 3, 2, Padding::Same, false, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]).unwrap();
        let y = c.forward(&x, Mode::EVAL).unwrap();
        assert_eq!(y.dims(), &[1, 4, 4, 4]);
    }

    #[test]
    fn valid_padding_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Conv2d::<f32>::new(1, 1, 3, 1, Padding::Valid, false, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 6]).unwrap();
        let y = c.forward(&x, Mode::EVAL).unwrap();
        assert_eq!(y.dims(), &[1, 1, 6, 4]);
    }

    #[test]
    fn known_3x3_convolution() {
        // 1x1x3x3 input, identity-like kernel picking the center.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Conv2d::<f64>::new(1, 1, 3, 1, Padding::Same, false, &mut rng).unwrap();
        c.weight.value = Tensor::new(&[1, 1, 3, 3], vec![0., 0., 0., 0., 1., 0., 0., 0., 0.]).unwrap();
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let y = c.forward(&x, Mode::EVAL).unwrap();
        assert_eq!(y.data(), x.data());

        // All-ones kernel sums the 3x3 neighborhood with zero padding.
        c.weight.value = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let y = c.forward(&x, Mode::EVAL).unwrap();
        assert_eq!(y.at4(0, 0, 0, 0), 1. + 2. + 4. + 5.);
        assert_eq!(y.at4(0, 0, 1, 1), 45.0);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Conv2d::<f32>::new(3, 4, 3, 1, Padding::Same, false, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 2, 8, 8]).unwrap();
        assert!(c.forward(&x, Mode::EVAL).is_err());
    }
}
