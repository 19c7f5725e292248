//! Forward and backward passes for the layers of the desk-scale CNN.
//!
//! Convolution lowers each image to a column matrix and accumulates the
//! kernel taps in `(c_in, ky, kx)` order, so every output element is
//! `bias + Σ x·w` summed left to right. The naive loop in
//! [`crate::oracle::naive_conv`] uses the same order and agrees exactly.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{axpy, dot, Tensor};

/// Gradients produced by one layer's backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub input_grad: Tensor,
    /// One entry per learned parameter, same length as the parameter.
    pub param_grads: BTreeMap<String, Vec<f64>>,
}

impl LayerGrad {
    pub fn input_only(input_grad: Tensor) -> Self {
        LayerGrad {
            input_grad,
            param_grads: BTreeMap::new(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.param_grads.get(name).map(Vec::as_slice)
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_geometry(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let [_, cin, h, w] = x.shape();
    let [_, wcin, kh, kw] = weight.shape();
    if stride == 0 {
        return Err(Error::Parameter("conv2d stride must be >= 1".into()));
    }
    if wcin != cin {
        return dim_err(format!(
            "conv2d: input channel axis is {} but weight c_in axis is {}",
            cin, wcin
        ));
    }
    let oh = conv_out_dim(h, kh, stride, pad).ok_or_else(|| {
        Error::Dimension(format!(
            "conv2d: height axis {} (pad {}) smaller than kernel height {}",
            h, pad, kh
        ))
    })?;
    let ow = conv_out_dim(w, kw, stride, pad).ok_or_else(|| {
        Error::Dimension(format!(
            "conv2d: width axis {} (pad {}) smaller than kernel width {}",
            w, pad, kw
        ))
    })?;
    Ok(ConvGeom {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    })
}

fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let dst = &mut col[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        img[(ci * g.h + iy as usize) * g.w + ix as usize] +=
                            col[row + oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// `rows` holds up to four output-channel rows starting at channel `co0`.
/// Each row starts at its bias and adds `w[co][kk]·col[kk]` for `kk` in
/// increasing order; channels are processed four at a time to reuse each
/// loaded column row.
fn accumulate_rows(
    rows: &mut [f64],
    p: usize,
    co0: usize,
    w: &[f64],
    k: usize,
    bias: &[f64],
    col: &[f64],
) {
    for (j, row) in rows.chunks_mut(p).enumerate() {
        row.fill(bias[co0 + j]);
    }
    if rows.len() == 4 * p {
        let (r0, rest) = rows.split_at_mut(p);
        let (r1, rest) = rest.split_at_mut(p);
        let (r2, r3) = rest.split_at_mut(p);
        for kk in 0..k {
            let x = &col[kk * p..(kk + 1) * p];
            let (w0, w1, w2, w3) = (
                w[co0 * k + kk],
                w[(co0 + 1) * k + kk],
                w[(co0 + 2) * k + kk],
                w[(co0 + 3) * k + kk],
            );
            let (r0, r1, r2, r3) = (&mut r0[..p], &mut r1[..p], &mut r2[..p], &mut r3[..p]);
            for i in 0..p {
                let xv = x[i];
                r0[i] += w0 * xv;
                r1[i] += w1 * xv;
                r2[i] += w2 * xv;
                r3[i] += w3 * xv;
            }
        }
    } else {
        for (j, row) in rows.chunks_mut(p).enumerate() {
            let wrow = &w[(co0 + j) * k..(co0 + j + 1) * k];
            for (kk, &wv) in wrow.iter().enumerate() {
                axpy(wv, &col[kk * p..(kk + 1) * p], row);
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `weight` is `c_out × c_in × kh × kw`; the result is
/// `n × c_out × ((h + 2·pad − kh)/stride + 1) × ((w + 2·pad − kw)/stride + 1)`.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geometry(x, weight, stride, pad)?;
    let cout = weight.n();
    if bias.len() != cout {
        return dim_err(format!(
            "conv2d: bias length {} but weight c_out axis is {}",
            bias.len(),
            cout
        ));
    }
    let (k, p) = (g.taps(), g.positions());
    let w = weight.data();
    let mut out = vec![0.0; x.n() * cout * p];
    if !out.is_empty() {
        out.par_chunks_mut(cout * p)
            .enumerate()
            .for_each_init(
                || vec![0.0; k * p],
                |col, (i, o)| {
                    im2col(x.item(i), &g, col);
                    for (blk, rows) in o.chunks_mut(4 * p).enumerate() {
                        accumulate_rows(rows, p, blk * 4, w, k, bias, col);
                    }
                },
            );
    }
    Tensor::new([x.n(), cout, g.oh, g.ow], out)
}

/// Adjoint of [`conv2d_forward`]: gradients for input, `weight` and `bias`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    out_grad: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<LayerGrad> {
    let g = conv_geometry(x, weight, stride, pad)?;
    let cout = weight.n();
    let expected = [x.n(), cout, g.oh, g.ow];
    if out_grad.shape() != expected {
        return dim_err(format!(
            "conv2d backward: out_grad shape {:?}, forward output shape {:?}",
            out_grad.shape(),
            expected
        ));
    }
    let (k, p) = (g.taps(), g.positions());
    let w = weight.data();
    let per_image: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..x.n())
        .into_par_iter()
        .map(|i| {
            let mut col = vec![0.0; k * p];
            im2col(x.item(i), &g, &mut col);
            let dout = out_grad.item(i);
            let mut dw = vec![0.0; cout * k];
            let mut db = vec![0.0; cout];
            let mut dcol = vec![0.0; k * p];
            for co in 0..cout {
                let drow = &dout[co * p..(co + 1) * p];
                db[co] = drow.iter().sum();
                for kk in 0..k {
                    dw[co * k + kk] = dot(drow, &col[kk * p..(kk + 1) * p]);
                    axpy(w[co * k + kk], drow, &mut dcol[kk * p..(kk + 1) * p]);
                }
            }
            let mut dx = vec![0.0; g.cin * g.h * g.w];
            col2im(&dcol, &g, &mut dx);
            (dx, dw, db)
        })
        .collect();

    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![0.0; cout * k];
    let mut db = vec![0.0; cout];
    for (dxi, dwi, dbi) in per_image {
        dx.extend_from_slice(&dxi);
        dw.iter_mut().zip(&dwi).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&dbi).for_each(|(a, b)| *a += b);
    }
    let mut param_grads = BTreeMap::new();
    param_grads.insert("weight".to_string(), dw);
    param_grads.insert("bias".to_string(), db);
    Ok(LayerGrad {
        input_grad: Tensor::new(x.shape(), dx)?,
        param_grads,
    })
}

fn linear_check(x: &Tensor, weight: &[f64], d_out: usize) -> Result<usize> {
    let d = x.item_len();
    if weight.len() != d_out * d {
        return dim_err(format!(
            "linear: weight has {} elements, expected d_out·d = {}·{}",
            weight.len(),
            d_out,
            d
        ));
    }
    Ok(d)
}

/// Affine map `y = x·Wᵀ + b` over flattened batch items. `weight` is
/// `d_out × d` row-major.
pub fn linear_forward(x: &Tensor, weight: &[f64], bias: &[f64]) -> Result<Tensor> {
    let d_out = bias.len();
    let d = linear_check(x, weight, d_out)?;
    let n = x.n();
    let mut out = vec![0.0; n * d_out];
    if !out.is_empty() {
        out.par_chunks_mut(d_out).enumerate().for_each(|(i, row)| {
            let xi = x.item(i);
            for (o, v) in row.iter_mut().enumerate() {
                *v = bias[o] + dot(xi, &weight[o * d..(o + 1) * d]);
            }
        });
    }
    Tensor::matrix(n, d_out, out)
}

pub fn linear_backward(x: &Tensor, weight: &[f64], out_grad: &Tensor) -> Result<LayerGrad> {
    let d_out = out_grad.item_len();
    let d = linear_check(x, weight, d_out)?;
    if out_grad.n() != x.n() {
        return dim_err(format!(
            "linear backward: out_grad batch axis {} but input batch axis {}",
            out_grad.n(),
            x.n()
        ));
    }
    let n = x.n();
    let mut dx = vec![0.0; n * d];
    let mut dw = vec![0.0; d_out * d];
    let mut db = vec![0.0; d_out];
    for i in 0..n {
        let g = out_grad.item(i);
        let xi = x.item(i);
        let dxi = &mut dx[i * d..(i + 1) * d];
        for o in 0..d_out {
            db[o] += g[o];
            axpy(g[o], &weight[o * d..(o + 1) * d], dxi);
            axpy(g[o], xi, &mut dw[o * d..(o + 1) * d]);
        }
    }
    let mut param_grads = BTreeMap::new();
    param_grads.insert("weight".to_string(), dw);
    param_grads.insert("bias".to_string(), db);
    Ok(LayerGrad {
        input_grad: Tensor::new(x.shape(), dx)?,
        param_grads,
    })
}

pub fn relu_in_place(x: &mut Tensor) {
    for v in x.data_mut() {
        *v = v.max(0.0);
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, out_grad: &Tensor) -> Result<Tensor> {
    if x.shape() != out_grad.shape() {
        return dim_err(format!(
            "relu backward: input {:?} vs out_grad {:?}",
            x.shape(),
            out_grad.shape()
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(out_grad.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data)
}

/// 2×2 non-overlapping max pool. Also returns, per output element, the flat
/// input index that won; ties go to the first element in row-major order.
pub fn maxpool2x2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return dim_err(format!(
            "maxpool2x2 needs even spatial axes, got height {} width {}",
            h, w
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = data[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > best {
                        best = data[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, arg))
}

pub fn maxpool2x2_backward(
    input_shape: [usize; 4],
    argmax: &[usize],
    out_grad: &Tensor,
) -> Result<Tensor> {
    if argmax.len() != out_grad.len() {
        return dim_err(format!(
            "maxpool backward: {} routes for {} gradients",
            argmax.len(),
            out_grad.len()
        ));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(out_grad.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// `n × c × h × w` to `n × (c·h·w) × 1 × 1`.
pub fn flatten(x: &Tensor) -> Tensor {
    x.clone()
        .reshape([x.n(), x.item_len(), 1, 1])
        .expect("same element count")
}

/// Mean cross-entropy over the batch and its gradient `(softmax − onehot)/n`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.n();
    let k = logits.item_len();
    if labels.len() != n {
        return dim_err(format!(
            "cross-entropy: {} labels for batch axis {}",
            labels.len(),
            n
        ));
    }
    if n == 0 {
        return dim_err("cross-entropy over an empty batch");
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Index(format!(
                "label {} at position {} not in [0, {})",
                y, i, k
            )));
        }
        let z = logits.item(i);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let log_sum = sum.ln() + m;
        loss += log_sum - z[y];
        let g = &mut grad[i * k..(i + 1) * k];
        for (gj, &zj) in g.iter_mut().zip(z) {
            *gj = (zj - log_sum).exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, Tensor::new(logits.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::filled([1, 1, 3, 3], 1.0);
        let w = Tensor::filled([1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, &[0.0], 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn([2, 1, 5, 4], |i| (i as f64 * 0.37).sin());
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d_forward(&x, &w, &[0.0], 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_output_shape_with_stride() {
        let x = Tensor::zeros([2, 3, 9, 8]);
        let w = Tensor::zeros([4, 3, 3, 2]);
        let y = conv2d_forward(&x, &w, &[0.0; 4], 2, 1).unwrap();
        assert_eq!(y.shape(), [2, 4, 5, 5]);
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, &[0.0], 1, 0).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
        let w = Tensor::zeros([1, 2, 5, 3]);
        let err = conv2d_forward(&x, &w, &[0.0], 1, 0).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        let w = Tensor::zeros([1, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, &[0.0], 0, 0).is_err());
        let out_grad = Tensor::zeros([1, 1, 3, 3]);
        assert!(conv2d_backward(&x, &w, &out_grad, 1, 0).is_err());
    }

    #[test]
    fn conv_backward_zero_and_scalar() {
        let x = Tensor::from_fn([1, 2, 4, 4], |i| i as f64);
        let w = Tensor::from_fn([3, 2, 3, 3], |i| 0.1 * i as f64);
        let g = conv2d_backward(&x, &w, &Tensor::zeros([1, 3, 2, 2]), 1, 0).unwrap();
        assert!(g.input_grad.data().iter().all(|&v| v == 0.0));
        assert!(g.param("weight").unwrap().iter().all(|&v| v == 0.0));
        assert!(g.param("bias").unwrap().iter().all(|&v| v == 0.0));

        let x = Tensor::filled([1, 1, 1, 1], 3.0);
        let w = Tensor::filled([1, 1, 1, 1], -2.0);
        let g = conv2d_backward(&x, &w, &Tensor::filled([1, 1, 1, 1], 1.0), 1, 0).unwrap();
        assert_eq!(g.param("weight").unwrap(), &[3.0]);
        assert_eq!(g.input_grad.data(), &[-2.0]);
        assert_eq!(g.param("bias").unwrap(), &[1.0]);
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, 0.5]).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        assert_eq!(linear_forward(&x, &eye, &[0.0; 3]).unwrap(), x);
        let y = linear_forward(&x, &[0.0; 6], &[7.0, -1.0]).unwrap();
        assert_eq!(y.data(), &[7.0, -1.0, 7.0, -1.0]);
        assert!(linear_forward(&x, &[0.0; 5], &[0.0; 2]).is_err());
    }

    #[test]
    fn relu_values() {
        let x = Tensor::new([1, 3, 1, 1], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::filled([1, 3, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_single_window() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let dx = maxpool2x2_backward(x.shape(), &arg, &Tensor::filled([1, 1, 1, 1], 5.0)).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn maxpool_ties_go_to_first() {
        let x = Tensor::filled([1, 1, 2, 2], 1.0);
        let (_, arg) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn maxpool_odd_dims_rejected() {
        assert!(matches!(
            maxpool2x2_forward(&Tensor::zeros([1, 1, 3, 2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let logits = Tensor::zeros([1, 10, 1, 1]);
        let (loss, _) = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);

        let mut z = vec![0.0; 10];
        z[4] = 1000.0;
        let logits = Tensor::matrix(1, 10, z).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[4]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Tensor::zeros([1, 10, 1, 1]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[10]),
            Err(Error::Index(_))
        ));
    }
}
