//! Image-quality metrics: MSE, RMSE, PSNR and SSIM over image pairs and
//! corpora.
//!
//! Tensors arrive in the generator's `[-1, 1]` range and are mapped
//! affinely to `[0, 1]` before measuring, so `peak = 1` is the natural
//! PSNR reference. Identical images have `mse == 0` and PSNR reports the
//! `+inf` sentinel (serialized as `inf` in CSV output).
//!
//! SSIM is the standard single-scale definition evaluated on the
//! `0.299 R + 0.587 G + 0.114 B` luminance over 8x8 *non-overlapping*
//! windows with `C1 = (0.01 peak)^2`, `C2 = (0.03 peak)^2`. Non-overlapping
//! windows (rather than a sliding Gaussian) keep the metric dependency-free
//! and bit-reproducible; trailing rows/columns that do not fill a window
//! are ignored. Images smaller than one window are an error.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[inline]
fn to_unit(v: f32) -> f64 {
    (v as f64 + 1.0) / 2.0
}

/// Mean squared error in the `[0, 1]` domain.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair("mse", a, b)?;
    let n = a.numel();
    if n == 0 {
        return Err(Error::contract("mse over an empty tensor"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = to_unit(x) - to_unit(y);
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// `10 log10(peak^2 / mse)` in dB; identical images give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::contract(format!("psnr peak must be > 0, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Luminance plane in `[0, 1]`; accepts `[3, H, W]` or already-gray
/// `[1, H, W]`.
fn luminance(t: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || (s[0] != 3 && s[0] != 1) {
        return Err(Error::contract(format!(
            "ssim expects [3, H, W] or [1, H, W], got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    let mut y = vec![0.0f64; h * w];
    if c == 1 {
        for (o, v) in y.iter_mut().zip(d) {
            *o = to_unit(*v);
        }
    } else {
        for i in 0..h * w {
            y[i] = 0.299 * to_unit(d[i]) + 0.587 * to_unit(d[h * w + i])
                + 0.114 * to_unit(d[2 * h * w + i]);
        }
    }
    Ok((y, h, w))
}

/// Mean structural similarity over non-overlapping 8x8 luminance windows.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (ya, h, w) = luminance(a)?;
    let (yb, _, _) = luminance(b)?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::contract(format!(
            "image {h}x{w} is smaller than one {k}x{k} ssim window"
        )));
    }
    let (wy, wx) = (h / k, w / k);
    let mut total = 0.0f64;
    for by in 0..wy {
        for bx in 0..wx {
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            for dy in 0..k {
                for dx in 0..k {
                    let idx = (by * k + dy) * w + bx * k + dx;
                    let (va, vb) = (ya[idx], yb[idx]);
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let n = (k * k) as f64;
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (wy * wx) as f64)
}

/// One evaluated image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub path: String,
    pub psnr: f64,
    pub mse: f64,
    pub rmse: f64,
    pub ssim: f64,
}

/// Per-image metrics plus corpus means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_mse: f64,
    pub mean_rmse: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    /// Evaluates `(label, output, target)` pairs; errors on an empty corpus.
    pub fn from_pairs<I>(pairs: I) -> Result<MetricReport>
    where
        I: IntoIterator<Item = (String, Tensor, Tensor)>,
    {
        let mut per_image = Vec::new();
        for (path, out, tgt) in pairs {
            per_image.push(ImageMetrics {
                psnr: psnr(&out, &tgt, 1.0)?,
                mse: mse(&out, &tgt)?,
                rmse: rmse(&out, &tgt)?,
                ssim: ssim(&out, &tgt)?,
                path,
            });
        }
        if per_image.is_empty() {
            return Err(Error::contract("empty corpus: no image pairs to evaluate"));
        }
        let n = per_image.len() as f64;
        Ok(MetricReport {
            mean_psnr: per_image.iter().map(|m| m.psnr).sum::<f64>() / n,
            mean_mse: per_image.iter().map(|m| m.mse).sum::<f64>() / n,
            mean_rmse: per_image.iter().map(|m| m.rmse).sum::<f64>() / n,
            mean_ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n,
            per_image,
        })
    }

    pub fn count(&self) -> usize {
        self.per_image.len()
    }

    /// Per-image CSV with header `path,psnr,mse,rmse,ssim`; infinite PSNR
    /// serializes as `inf`.
    pub fn csv(&self) -> String {
        let mut out = String::from("path,psnr,mse,rmse,ssim\n");
        for m in &self.per_image {
            writeln!(out, "{},{},{},{},{}", m.path, m.psnr, m.mse, m.rmse, m.ssim)
                .expect("string write");
        }
        out
    }

    /// Corpus summary in the conventional column order.
    pub fn summary(&self) -> String {
        format!(
            "images: {}\nP-SNR: {}\nMSE:   {}\nR-MSE: {}\nSSIM:  {}\n",
            self.count(),
            self.mean_psnr,
            self.mean_mse,
            self.mean_rmse,
            self.mean_ssim
        )
    }
}
