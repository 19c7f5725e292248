//! `DUA1` binary checkpoints.
//!
//! Layout, all integers little-endian `u32`, all arrays little-endian `f64`:
//!
//! ```text
//! "DUA1"
//! layer_count  in_c in_h in_w
//! per layer:   tag:u8  shape ints
//!     1 conv2d     c_out c_in kh kw stride pad
//!     2 batchnorm  channels
//!     3 relu       -
//!     4 maxpool2x2 -
//!     5 flatten    -
//!     6 linear     d_out d_in
//! arrays, per layer in order:
//!     conv2d     weight, bias
//!     batchnorm  gamma, beta, running_mean, running_var, [eps, train_momentum]
//!     linear     weight, bias
//! ```
//!
//! Batch-norm layers are named `bn1`, `bn2`, ... in layer order on load.

use std::ops::Range;
use std::path::Path;

use crate::bn::BatchNormState;
use crate::error::{Error, Result};
use crate::model::{BatchNorm, Conv2d, Layer, Linear, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DUA1";

const TAG_CONV: u8 = 1;
const TAG_BN: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_POOL: u8 = 4;
const TAG_FLATTEN: u8 = 5;
const TAG_LINEAR: u8 = 6;

/// What an array in the checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayKind {
    /// Weights, biases, γ, β.
    Learned,
    /// Running mean and variance.
    RunningStat,
    /// ε and the training momentum.
    Hyper,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArraySection {
    pub layer: usize,
    pub name: &'static str,
    pub kind: ArrayKind,
    pub bytes: Range<usize>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn layer_arrays(layer: &Layer) -> Vec<(&'static str, ArrayKind, Vec<f64>)> {
    use ArrayKind::*;
    match layer {
        Layer::Conv2d(c) => vec![
            ("weight", Learned, c.weight.data().to_vec()),
            ("bias", Learned, c.bias.clone()),
        ],
        Layer::BatchNorm(bn) => vec![
            ("gamma", Learned, bn.state.gamma.clone()),
            ("beta", Learned, bn.state.beta.clone()),
            ("running_mean", RunningStat, bn.state.running_mean.clone()),
            ("running_var", RunningStat, bn.state.running_var.clone()),
            ("hyper", Hyper, vec![bn.state.eps, bn.state.train_momentum]),
        ],
        Layer::Linear(l) => vec![
            ("weight", Learned, l.weight.clone()),
            ("bias", Learned, l.bias.clone()),
        ],
        _ => Vec::new(),
    }
}

fn header(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, model.layers().len());
    for d in model.input_shape() {
        put_u32(&mut buf, d);
    }
    for layer in model.layers() {
        match layer {
            Layer::Conv2d(c) => {
                buf.push(TAG_CONV);
                for d in c.weight.shape() {
                    put_u32(&mut buf, d);
                }
                put_u32(&mut buf, c.stride);
                put_u32(&mut buf, c.pad);
            }
            Layer::BatchNorm(bn) => {
                buf.push(TAG_BN);
                put_u32(&mut buf, bn.state.channels());
            }
            Layer::Relu => buf.push(TAG_RELU),
            Layer::MaxPool2x2 => buf.push(TAG_POOL),
            Layer::Flatten => buf.push(TAG_FLATTEN),
            Layer::Linear(l) => {
                buf.push(TAG_LINEAR);
                put_u32(&mut buf, l.d_out);
                put_u32(&mut buf, l.d_in);
            }
        }
    }
    buf
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut buf = header(model);
    for layer in model.layers() {
        for (_, _, arr) in layer_arrays(layer) {
            for v in arr {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf
}

/// Byte ranges of every array in `to_bytes(model)`.
pub fn sections(model: &Model) -> Vec<ArraySection> {
    let mut offset = header(model).len();
    let mut out = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        for (name, kind, arr) in layer_arrays(layer) {
            let len = arr.len() * 8;
            out.push(ArraySection {
                layer: i,
                name,
                kind,
                bytes: offset..offset + len,
            });
            offset += len;
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            file: self.file.to_string(),
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.err(format!(
                "truncated: need {} more bytes, {} left",
                n,
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = match n.checked_mul(8) {
            Some(len) => len,
            None => return self.err("array length overflows"),
        };
        let b = self.take(len)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

enum Skeleton {
    Conv([usize; 4], usize, usize),
    Bn(usize),
    Relu,
    Pool,
    Flatten,
    Linear(usize, usize),
}

/// Parses a checkpoint; `file` only labels error messages.
pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, file };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return r.err("bad magic, expected \"DUA1\"");
    }
    let count = r.u32()?;
    let input = [r.u32()?, r.u32()?, r.u32()?];
    let mut skel = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = r.u8()?;
        skel.push(match tag {
            TAG_CONV => Skeleton::Conv([r.u32()?, r.u32()?, r.u32()?, r.u32()?], r.u32()?, r.u32()?),
            TAG_BN => Skeleton::Bn(r.u32()?),
            TAG_RELU => Skeleton::Relu,
            TAG_POOL => Skeleton::Pool,
            TAG_FLATTEN => Skeleton::Flatten,
            TAG_LINEAR => Skeleton::Linear(r.u32()?, r.u32()?),
            other => {
                r.pos -= 1;
                return r.err(format!("unknown layer tag {}", other));
            }
        });
    }
    let mut layers = Vec::with_capacity(skel.len());
    let mut bn_count = 0;
    for s in skel {
        layers.push(match s {
            Skeleton::Conv(shape, stride, pad) => {
                let n: usize = shape.iter().product();
                let weight = Tensor::new(shape, r.f64s(n)?)?;
                let bias = r.f64s(shape[0])?;
                Layer::Conv2d(Conv2d {
                    weight,
                    bias,
                    stride,
                    pad,
                })
            }
            Skeleton::Bn(c) => {
                bn_count += 1;
                let gamma = r.f64s(c)?;
                let beta = r.f64s(c)?;
                let running_mean = r.f64s(c)?;
                let running_var = r.f64s(c)?;
                let hyper = r.f64s(2)?;
                Layer::BatchNorm(BatchNorm {
                    name: format!("bn{}", bn_count),
                    state: BatchNormState {
                        running_mean,
                        running_var,
                        gamma,
                        beta,
                        eps: hyper[0],
                        train_momentum: hyper[1],
                    },
                })
            }
            Skeleton::Relu => Layer::Relu,
            Skeleton::Pool => Layer::MaxPool2x2,
            Skeleton::Flatten => Layer::Flatten,
            Skeleton::Linear(d_out, d_in) => {
                let weight = r.f64s(d_out * d_in)?;
                let bias = r.f64s(d_out)?;
                Layer::Linear(Linear {
                    weight,
                    bias,
                    d_in,
                    d_out,
                })
            }
        });
    }
    if r.pos != bytes.len() {
        return r.err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Model::new(input, layers)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut m = Model::desk_cnn(&mut Rng::from_seed(9));
        m.bn_mut("bn2").unwrap().running_var[3] = 0.123;
        let bytes = to_bytes(&m);
        assert_eq!(&bytes[..4], b"DUA1");
        let back = from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn sections_cover_arrays() {
        let m = Model::desk_cnn(&mut Rng::from_seed(9));
        let bytes = to_bytes(&m);
        let secs = sections(&m);
        assert_eq!(secs.last().unwrap().bytes.end, bytes.len());
        assert_eq!(secs.iter().filter(|s| s.kind == ArrayKind::RunningStat).count(), 6);
        let bn1_var = secs
            .iter()
            .find(|s| s.layer == 1 && s.name == "running_var")
            .unwrap();
        assert_eq!(&bytes[bn1_var.bytes.start..bn1_var.bytes.start + 8], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let m = Model::desk_cnn(&mut Rng::from_seed(9));
        let mut bytes = to_bytes(&m);
        let e = from_bytes(&bytes[..bytes.len() - 3], "cut.dua").unwrap_err();
        assert!(matches!(e, Error::Format { .. }), "{e}");
        assert!(e.to_string().contains("cut.dua"));
        bytes[3] = b'2';
        assert!(matches!(from_bytes(&bytes, "x"), Err(Error::Format { offset: 0, .. })));
        assert!(from_bytes(b"DU", "x").is_err());
    }
}
