//! Parameter-free channel adapters that join modules whose channel counts
//! disagree, plus the trainable 1x1-conv baseline used for ablations.
//!
//! Given C input and C_out output channels, the plan picks:
//!
//! * equal             -> identity
//! * C = k * C_out     -> channel pooling (mean of k consecutive channels)
//! * C_out = k * C     -> channel duplication (cyclic repeat)
//! * C > C_out, other  -> grouped pooling: eta = gcd(C, C_out) channels per
//!   group, k = C/eta, groups = C_out/eta; group g pools the input channel
//!   ring rotated left by g
//! * C < C_out, other  -> cyclic duplication truncated to C_out channels
//!
//! The trainable baseline replaces all of the above with a 1x1 convolution
//! when requested.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Mode, Padding};
use crate::params::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Identity,
    /// Mean over k consecutive input channels per output channel.
    Chp { k: usize },
    /// Cyclic channel repeat, k full copies.
    Chdp { k: usize },
    /// Grouped pooling for non-divisible reductions.
    ExtChp { eta: usize, k: usize, groups: usize },
    /// Cyclic repeat truncated at C_out.
    ExtChdp { k: usize },
    /// Trainable 1x1 convolution (ablation baseline).
    Conv1x1,
}

impl AdapterKind {
    pub fn label(&self) -> &'static str {
        match self {
            AdapterKind::Identity => "identity",
            AdapterKind::Chp { .. } => "chp",
            AdapterKind::Chdp { .. } => "chdp",
            AdapterKind::ExtChp { .. } => "ext-chp",
            AdapterKind::ExtChdp { .. } => "ext-chdp",
            AdapterKind::Conv1x1 => "conv1x1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterPlan {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kind: AdapterKind,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Chooses the adapter for a channel-count junction. `baseline` forces the
/// trainable 1x1 conv regardless of the counts.
pub fn plan_adapter(in_ch: usize, out_ch: usize, baseline: bool) -> Result<AdapterPlan> {
    if in_ch == 0 || out_ch == 0 {
        return Err(Error::Invalid(format!(
            "adapter needs positive channel counts, got {in_ch} -> {out_ch}"
        )));
    }
    let kind = if baseline {
        AdapterKind::Conv1x1
    } else if in_ch == out_ch {
        AdapterKind::Identity
    } else if in_ch % out_ch == 0 {
        AdapterKind::Chp { k: in_ch / out_ch }
    } else if out_ch % in_ch == 0 {
        AdapterKind::Chdp { k: out_ch / in_ch }
    } else if in_ch > out_ch {
        let eta = gcd(in_ch, out_ch);
        AdapterKind::ExtChp { eta, k: in_ch / eta, groups: out_ch / eta }
    } else {
        AdapterKind::ExtChdp { k: out_ch.div_ceil(in_ch) }
    };
    Ok(AdapterPlan { in_ch, out_ch, kind })
}

/// Executable adapter. The parameter-free kinds are pure index maps; only
/// the baseline carries weights.
#[derive(Debug, Clone)]
pub struct ChannelAdapter<S: Scalar = f32> {
    pub plan: AdapterPlan,
    conv: Option<Conv2d<S>>,
}

/// The channel map every parameter-free kind computes, as sparse 1x1-conv
/// weights: (out channel, in channel, coefficient), coefficients of a
/// colliding (out, in) pair accumulating.
fn free_map_weights(in_ch: usize, out_ch: usize) -> Result<Vec<(usize, usize, f64)>> {
    let free = plan_adapter(in_ch, out_ch, false)?;
    let mut w = Vec::new();
    match free.kind {
        AdapterKind::Identity => {
            for l in 0..out_ch {
                w.push((l, l, 1.0));
            }
        }
        AdapterKind::Chp { k } => {
            for l in 0..out_ch {
                for m in 0..k {
                    w.push((l, k * l + m, 1.0 / k as f64));
                }
            }
        }
        AdapterKind::Chdp { .. } | AdapterKind::ExtChdp { .. } => {
            for l in 0..out_ch {
                w.push((l, l % in_ch, 1.0));
            }
        }
        AdapterKind::ExtChp { eta, k, groups } => {
            for g in 0..groups {
                for j in 0..eta {
                    for m in 0..k {
                        w.push((g * eta + j, (g + k * j + m) % in_ch, 1.0 / k as f64));
                    }
                }
            }
        }
        AdapterKind::Conv1x1 => unreachable!("planned with baseline off"),
    }
    Ok(w)
}

impl<S: Scalar> ChannelAdapter<S> {
    pub fn new(plan: AdapterPlan, rng: &mut impl Rng) -> Result<Self> {
        let conv = match plan.kind {
            AdapterKind::Conv1x1 => {
                let mut conv =
                    Conv2d::new(plan.in_ch, plan.out_ch, 1, 1, Padding::Valid, false, rng)?;
                // Start the trainable baseline at the parameter-free map for
                // this junction (any such map is a fixed 1x1 conv), so it
                // computes the same function before training instead of
                // scrambling the inherited features.
                let data = conv.weight.value.data_mut();
                for v in data.iter_mut() {
                    *v = S::zero();
                }
                for (o, i, coef) in free_map_weights(plan.in_ch, plan.out_ch)? {
                    data[o * plan.in_ch + i] += S::from_f64_lossy(coef);
                }
                Some(conv)
            }
            _ => None,
        };
        Ok(Self { plan, conv })
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        if x.rank() != 4 || x.size(1) != self.plan.in_ch {
            return Err(Error::Shape(format!(
                "adapter {} expects {} input channels, got {:?}",
                self.plan.kind.label(),
                self.plan.in_ch,
                x.dims()
            )));
        }
        if let Some(conv) = self.conv.as_mut() {
            return conv.forward(x, mode);
        }
        let (n, ci, h, w) = (x.size(0), x.size(1), x.size(2), x.size(3));
        let co = self.plan.out_ch;
        let plane = h * w;
        match self.plan.kind {
            AdapterKind::Identity => Ok(x.clone()),
            AdapterKind::Chp { k } => {
                let inv = S::one() / S::from_f64_lossy(k as f64);
                let mut out = Tensor::zeros(&[n, co, h, w])?;
                let xd = x.data();
                let od = out.data_mut();
                for bn in 0..n {
                    for l in 0..co {
                        let dst = ((bn * co + l) * plane)..((bn * co + l + 1) * plane);
                        for m in 0..k {
                            let src = (bn * ci + k * l + m) * plane;
                            let dsts = &mut od[dst.clone()];
                            for (d, s) in dsts.iter_mut().zip(&xd[src..src + plane]) {
                                *d += *s;
                            }
                        }
                        for v in od[dst].iter_mut() {
                            *v *= inv;
                        }
                    }
                }
                Ok(out)
            }
            AdapterKind::Chdp { .. } | AdapterKind::ExtChdp { .. } => {
                let mut out = Tensor::zeros(&[n, co, h, w])?;
                let xd = x.data();
                let od = out.data_mut();
                for bn in 0..n {
                    for l in 0..co {
                        let src = (bn * ci + l % ci) * plane;
                        let dst = (bn * co + l) * plane;
                        od[dst..dst + plane].copy_from_slice(&xd[src..src + plane]);
                    }
                }
                Ok(out)
            }
            AdapterKind::ExtChp { eta, k, groups } => {
                let inv = S::one() / S::from_f64_lossy(k as f64);
                let mut out = Tensor::zeros(&[n, co, h, w])?;
                let xd = x.data();
                let od = out.data_mut();
                for bn in 0..n {
                    for g in 0..groups {
                        for l in 0..eta {
                            let oc = g * eta + l;
                            let dst = ((bn * co + oc) * plane)..((bn * co + oc + 1) * plane);
                            for m in 0..k {
                                let src_ch = (g + k * l + m) % ci;
                                let src = (bn * ci + src_ch) * plane;
                                let dsts = &mut od[dst.clone()];
                                for (d, s) in dsts.iter_mut().zip(&xd[src..src + plane]) {
                                    *d += *s;
                                }
                            }
                            for v in od[dst].iter_mut() {
                                *v *= inv;
                            }
                        }
                    }
                }
                Ok(out)
            }
            AdapterKind::Conv1x1 => unreachable!("handled above"),
        }
    }

    /// Transpose of the forward channel map (exact adjoint, so finite
    /// differences agree to float precision).
    pub fn backward(&mut self, gout: &Tensor<S>) -> Result<Tensor<S>> {
        if let Some(conv) = self.conv.as_mut() {
            return conv.backward(gout);
        }
        let (n, co, h, w) = (gout.size(0), gout.size(1), gout.size(2), gout.size(3));
        let ci = self.plan.in_ch;
        let plane = h * w;
        match self.plan.kind {
            AdapterKind::Identity => Ok(gout.clone()),
            AdapterKind::Chp { k } => {
                let inv = S::one() / S::from_f64_lossy(k as f64);
                let mut gx = Tensor::zeros(&[n, ci, h, w])?;
                let g = gout.data();
                let gxd = gx.data_mut();
                for bn in 0..n {
                    for l in 0..co {
                        let src = (bn * co + l) * plane;
                        for m in 0..k {
                            let dst = (bn * ci + k * l + m) * plane;
                            for (d, s) in gxd[dst..dst + plane].iter_mut().zip(&g[src..src + plane]) {
                                *d += *s * inv;
                            }
                        }
                    }
                }
                Ok(gx)
            }
            AdapterKind::Chdp { .. } | AdapterKind::ExtChdp { .. } => {
                let mut gx = Tensor::zeros(&[n, ci, h, w])?;
                let g = gout.data();
                let gxd = gx.data_mut();
                for bn in 0..n {
                    for l in 0..co {
                        let src = (bn * co + l) * plane;
                        let dst = (bn * ci + l % ci) * plane;
                        for (d, s) in gxd[dst..dst + plane].iter_mut().zip(&g[src..src + plane]) {
                            *d += *s;
                        }
                    }
                }
                Ok(gx)
            }
            AdapterKind::ExtChp { eta, k, groups } => {
                let inv = S::one() / S::from_f64_lossy(k as f64);
                let mut gx = Tensor::zeros(&[n, ci, h, w])?;
                let g = gout.data();
                let gxd = gx.data_mut();
                for bn in 0..n {
                    for grp in 0..groups {
                        for l in 0..eta {
                            let oc = grp * eta + l;
                            let src = (bn * co + oc) * plane;
                            for m in 0..k {
                                let dst_ch = (grp + k * l + m) % ci;
                                let dst = (bn * ci + dst_ch) * plane;
                                for (d, s) in
                                    gxd[dst..dst + plane].iter_mut().zip(&g[src..src + plane])
                                {
                                    *d += *s * inv;
                                }
                            }
                        }
                    }
                }
                Ok(gx)
            }
            AdapterKind::Conv1x1 => unreachable!("handled above"),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.conv.as_mut().map(|c| c.params_mut()).unwrap_or_default()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        if let Some(c) = self.conv.as_mut() {
            c.set_frozen(frozen);
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        self.conv.as_ref().map(|c| c.tensors()).unwrap_or_default()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        self.conv.as_mut().map(|c| c.tensors_mut()).unwrap_or_default()
    }

    pub fn is_trainable(&self) -> bool {
        self.conv.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(ci: usize) -> Tensor<f64> {
        // one image, 1x1 spatial, channel c holds value c
        Tensor::new(&[1, ci, 1, 1], (0..ci).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn plan_order_and_parameters() {
        assert_eq!(plan_adapter(8, 8, false).unwrap().kind, AdapterKind::Identity);
        assert_eq!(plan_adapter(16, 8, false).unwrap().kind, AdapterKind::Chp { k: 2 });
        assert_eq!(plan_adapter(8, 24, false).unwrap().kind, AdapterKind::Chdp { k: 3 });
        assert_eq!(
            plan_adapter(192, 128, false).unwrap().kind,
            AdapterKind::ExtChp { eta: 64, k: 3, groups: 2 }
        );
        assert_eq!(plan_adapter(8, 12, false).unwrap().kind, AdapterKind::ExtChdp { k: 2 });
        assert_eq!(plan_adapter(16, 8, true).unwrap().kind, AdapterKind::Conv1x1);
        assert!(plan_adapter(0, 4, false).is_err());
    }

    #[test]
    fn chp_means_consecutive_channels() {
        let mut a = ChannelAdapter::new(
            plan_adapter(6, 2, false).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let y = a.forward(&ramp(6), Mode::EVAL).unwrap();
        assert_eq!(y.data(), &[1.0, 4.0]);
    }

    #[test]
    fn chdp_cycles_channels() {
        let mut a = ChannelAdapter::new(
            plan_adapter(3, 6, false).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let y = a.forward(&ramp(3), Mode::EVAL).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn ext_chp_pools_rotated_groups() {
        // 6 -> 4: eta=2, k=3, groups=2. Group 0 pools (0,1,2) and (3,4,5);
        // group 1 pools the ring shifted by one: (1,2,3) and (4,5,0).
        let mut a = ChannelAdapter::new(
            plan_adapter(6, 4, false).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let y = a.forward(&ramp(6), Mode::EVAL).unwrap();
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 3.0]);
    }

    #[test]
    fn ext_chdp_truncates_the_cycle() {
        let mut a = ChannelAdapter::new(
            plan_adapter(3, 5, false).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let y = a.forward(&ramp(3), Mode::EVAL).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_is_the_adjoint_map() {
        // <A x, y> == <x, A^T y> for every parameter-free kind.
        let cases = [(6, 2), (3, 6), (6, 4), (3, 5), (4, 4)];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (ci, co) in cases {
            let mut a =
                ChannelAdapter::<f64>::new(plan_adapter(ci, co, false).unwrap(), &mut rng).unwrap();
            let mut x = Tensor::zeros(&[2, ci, 3, 3]).unwrap();
            x.fill_uniform(&mut rng, -1.0, 1.0);
            let mut y = Tensor::zeros(&[2, co, 3, 3]).unwrap();
            y.fill_uniform(&mut rng, -1.0, 1.0);
            let ax = a.forward(&x, Mode::TRAIN).unwrap();
            let aty = a.backward(&y).unwrap();
            let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{ci}->{co}: {lhs} vs {rhs}");
        }
    }
}
