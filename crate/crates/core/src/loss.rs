use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean cross-entropy over a batch of logits, with the gradient ready for
/// backprop and the count of argmax hits for accuracy tracking.
#[derive(Debug, Clone)]
pub struct LossOutput<S: Scalar = f32> {
    pub loss: f64,
    pub grad: Tensor<S>,
    pub correct: usize,
}

/// Softmax cross-entropy, computed through the log-sum-exp shift so large
/// logits do not overflow. Gradient is (softmax - onehot) / N.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<LossOutput<S>> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!("cross entropy expects (N, K) logits, got {:?}", logits.dims())));
    }
    let (n, k) = (logits.size(0), logits.size(1));
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    let ld = logits.data();
    let mut grad = Tensor::zeros(&[n, k])?;
    let gd = grad.data_mut();
    let inv_n = S::one() / S::from_f64_lossy(n as f64);
    let mut total = 0.0f64;
    let mut correct = 0usize;
    for row in 0..n {
        let y = labels[row];
        if y >= k {
            return Err(Error::Invalid(format!("label {y} out of range for {k} classes")));
        }
        let r = &ld[row * k..(row + 1) * k];
        let mut mx = r[0];
        let mut arg = 0usize;
        for (j, &v) in r.iter().enumerate() {
            if v > mx {
                mx = v;
                arg = j;
            }
        }
        if arg == y {
            correct += 1;
        }
        let mut denom = S::zero();
        for &v in r {
            denom += (v - mx).exp();
        }
        let log_denom = denom.ln();
        total += (log_denom - (r[y] - mx)).to_f64_lossy();
        let grow = &mut gd[row * k..(row + 1) * k];
        for j in 0..k {
            let p = (r[j] - mx).exp() / denom;
            grow[j] = if j == y { (p - S::one()) * inv_n } else { p * inv_n };
        }
    }
    Ok(LossOutput { loss: total / n as f64, grad, correct })
}
