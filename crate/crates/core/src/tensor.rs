//! Dense f32 tensor storage.
//!
//! Rank is at most 4 with the batch/channel/height/width order convention
//! for rank-4 data. `Tensor` holds plain values; gradient linkage lives on
//! the [`crate::tape::Tape`].

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build from shape and row-major data. The element count must match
    /// the shape product and the rank must be at most 4.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(Error::contract(format!(
                "tensor rank {} exceeds 4",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} holds {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// I.i.d. standard normal entries scaled by `std`, drawn in row-major
    /// order from `rng`.
    pub fn randn(shape: &[usize], std: f32, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal_f32() * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// I.i.d. normal entries with the given mean and standard deviation.
    pub fn randn_mean(shape: &[usize], mean: f32, std: f32, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| mean + rng.normal_f32() * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Truncated normal: standard normal redrawn until within two standard
    /// deviations, then scaled by `std` and shifted by `mean`.
    pub fn trunc_randn(shape: &[usize], mean: f32, std: f32, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let mut z = rng.normal_f32();
                while z.abs() > 2.0 {
                    z = rng.normal_f32();
                }
                mean + std * z
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Dimensions as (batch, channels, height, width); rank must be 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::contract(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let (b, _, h, w) = parts[0].dims4()?;
        let mut c_total = 0;
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            c_total += pc;
        }
        let mut out = Tensor::zeros(&[b, c_total, h, w]);
        let plane = h * w;
        for bi in 0..b {
            let mut c_off = 0;
            for p in parts {
                let pc = p.shape[1];
                let src = &p.data[bi * pc * plane..(bi + 1) * pc * plane];
                let dst_start = (bi * c_total + c_off) * plane;
                out.data[dst_start..dst_start + pc * plane].copy_from_slice(src);
                c_off += pc;
            }
        }
        Ok(out)
    }

    /// Stack rank-3 tensors into a rank-4 batch.
    pub fn stack_batch(samples: &[&Tensor]) -> Result<Tensor> {
        if samples.is_empty() {
            return Err(Error::contract("stack of zero tensors"));
        }
        let shape = samples[0].shape.clone();
        if shape.len() != 3 {
            return Err(Error::contract(format!(
                "stack_batch expects rank-3 tensors, got {shape:?}"
            )));
        }
        for s in samples {
            if s.shape != shape {
                return Err(Error::ShapeMismatch {
                    op: "stack_batch",
                    lhs: shape.clone(),
                    rhs: s.shape.clone(),
                });
            }
        }
        let mut data = Vec::with_capacity(samples.len() * samples[0].numel());
        for s in samples {
            data.extend_from_slice(&s.data);
        }
        let mut out_shape = vec![samples.len()];
        out_shape.extend_from_slice(&shape);
        Tensor::from_vec(&out_shape, data)
    }

    /// View a rank-3 tensor as a single-sample batch.
    pub fn unsqueeze_batch(&self) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(Error::contract(format!(
                "unsqueeze_batch expects rank-3 tensor, got {:?}",
                self.shape
            )));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(&self.shape);
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Batch element `b` of a rank-4 tensor as a rank-3 tensor.
    pub fn batch_slice(&self, b: usize) -> Result<Tensor> {
        let (nb, c, h, w) = self.dims4()?;
        if b >= nb {
            return Err(Error::contract(format!("batch index {b} out of {nb}")));
        }
        let n = c * h * w;
        Tensor::from_vec(&[c, h, w], self.data[b * n..(b + 1) * n].to_vec())
    }

    /// Largest absolute difference between two same-shaped tensors.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_count() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 4]).is_ok());
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn concat_channels_layout() {
        let a = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2, 2, 2], (5..13).map(|v| v as f32).collect()).unwrap();
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2, 2]);
        assert_eq!(
            c.data(),
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]
        );
    }

    #[test]
    fn concat_rejects_mismatched_spatial() {
        let a = Tensor::zeros(&[1, 1, 2, 2]);
        let b = Tensor::zeros(&[1, 1, 3, 2]);
        assert!(matches!(
            Tensor::concat_channels(&[&a, &b]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn stack_and_slice_roundtrip() {
        let a = Tensor::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = Tensor::stack_batch(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 1, 2]);
        assert_eq!(s.batch_slice(1).unwrap().data(), b.data());
    }
}
