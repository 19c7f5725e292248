//! Brute-force reference computations for tests and the acceptance suite.
//! Nothing here calls into the code paths it is used to check.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel mean then biased variance, in two separate passes. The first
/// pass sums offsets from the channel's first element, so a constant
/// channel yields its value and zero variance exactly.
pub fn two_pass_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let [n, c, h, w] = x.shape();
    let count = n * h * w;
    if count == 0 {
        return Err(Error::Dimension("two-pass statistics of an empty tensor".into()));
    }
    let mut mu = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let anchor = x.at(0, ch, 0, 0);
        let mut s = 0.0;
        for i in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    s += x.at(i, ch, y, xx) - anchor;
                }
            }
        }
        let m = anchor + s / count as f64;
        let mut ss = 0.0;
        for i in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let d = x.at(i, ch, y, xx) - m;
                    ss += d * d;
                }
            }
        }
        mu[ch] = m;
        var[ch] = ss / count as f64;
    }
    Ok((mu, var))
}

/// A replayed sequence of EMA updates.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaTrace {
    pub initial: f64,
    pub weights: Vec<f64>,
    pub inputs: Vec<f64>,
}

/// `(∏(1−w_i))·initial + Σ_i w_i·(∏_{j>i}(1−w_j))·μ_i`
pub fn ema_closed_form(trace: &EmaTrace) -> Result<f64> {
    let k = trace.weights.len();
    if k == 0 || trace.inputs.len() != k {
        return Err(Error::Parameter(format!(
            "EMA trace needs matching nonempty weights/inputs, got {}/{}",
            k,
            trace.inputs.len()
        )));
    }
    if let Some(w) = trace.weights.iter().find(|w| !(**w > 0.0 && **w <= 1.0)) {
        return Err(Error::Parameter(format!("EMA trace weight {w} not in (0, 1]")));
    }
    // suffix[i] = ∏_{j>i} (1 − w_j)
    let mut suffix = vec![1.0; k];
    for i in (0..k - 1).rev() {
        suffix[i] = suffix[i + 1] * (1.0 - trace.weights[i + 1]);
    }
    let all = suffix[0] * (1.0 - trace.weights[0]);
    let mut total = all * trace.initial;
    for i in 0..k {
        total += trace.weights[i] * suffix[i] * trace.inputs[i];
    }
    Ok(total)
}

/// Six nested loops; padding taps are skipped rather than multiplied by zero.
pub fn naive_conv(x: &Tensor, weight: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let [cout, _, kh, kw] = weight.shape();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let mut idx = 0;
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.at(b, ci, iy as usize, ix as usize)
                                    * weight.at(co, ci, ky, kx);
                            }
                        }
                    }
                    out.data_mut()[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    out
}

/// Central finite differences of a scalar function.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut p = point.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = f(&p);
        p[i] = orig - step;
        let down = f(&p);
        p[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, floor)`
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pass_examples() {
        let x = Tensor::filled([2, 1, 3, 3], 0.1);
        let (mu, var) = two_pass_stats(&x).unwrap();
        assert_eq!(mu, vec![0.1]);
        assert_eq!(var, vec![0.0]);
        let x = Tensor::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(two_pass_stats(&x).unwrap(), (vec![1.0], vec![1.0]));
        assert!(two_pass_stats(&Tensor::zeros([0, 2, 1, 1])).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let t = EmaTrace {
            initial: 0.0,
            weights: vec![0.099],
            inputs: vec![1.0],
        };
        assert!((ema_closed_form(&t).unwrap() - 0.099).abs() < 1e-15);
        let t = EmaTrace {
            initial: 2.5,
            weights: vec![0.3, 0.1, 0.9],
            inputs: vec![2.5; 3],
        };
        assert!((ema_closed_form(&t).unwrap() - 2.5).abs() < 1e-15);
        let empty = EmaTrace {
            initial: 0.0,
            weights: vec![],
            inputs: vec![],
        };
        assert!(ema_closed_form(&empty).is_err());
    }

    #[test]
    fn fd_of_square() {
        let g = fd_gradient(|p| p[0] * p[0], &[3.0], 1e-6).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        assert!(fd_gradient(|p| p[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn naive_identity_kernel() {
        let x = Tensor::from_fn([1, 1, 4, 3], |i| i as f64 - 5.0);
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        assert_eq!(naive_conv(&x, &w, &[0.0], 1, 1), x);
    }
}
