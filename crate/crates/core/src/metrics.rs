//! PSNR and SSIM on sRGB-encoded images clamped to [0, 1].

use crate::error::{Error, Result};
use crate::scene::{Image, Mask};
use crate::spectrum::{linear_to_srgb, Spectrum};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Side of the Gaussian SSIM window; images must be at least this large.
pub const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub masked_pixel_count: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "psnr,ssim,masked_pixels";

    pub fn csv_row(&self) -> String {
        format!("{:.6},{:.6},{}", self.psnr, self.ssim, self.masked_pixel_count)
    }
}

fn check_shapes(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<()> {
    let size_err = |field: &str, w, h| Error::SizeMismatch {
        path: Default::default(),
        field: field.into(),
        got_w: w,
        got_h: h,
        want_w: a.width,
        want_h: a.height,
    };
    if (b.width, b.height) != (a.width, a.height) {
        return Err(size_err("image", b.width, b.height));
    }
    if let Some(m) = mask {
        if (m.width, m.height) != (a.width, a.height) {
            return Err(size_err("mask", m.width, m.height));
        }
    }
    Ok(())
}

fn encode(s: Spectrum) -> Spectrum {
    s.map(linear_to_srgb)
}

pub fn psnr(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    check_shapes(a, b, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (p, q)) in a.pixels.iter().zip(&b.pixels).enumerate() {
        if mask.is_some_and(|m| !m.data[i]) {
            continue;
        }
        let d = encode(*p) - encode(*q);
        sum += d.dot(d);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = sum / (3 * n) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; WINDOW] {
    let c = (WINDOW / 2) as f64;
    let mut w = [0.0; WINDOW];
    for (i, x) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *x = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|x| x / s)
}

/// Mean SSIM of Rec.709 luminance over the fully contained 11×11 windows
/// whose center pixel is masked in.
pub fn ssim(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    check_shapes(a, b, mask)?;
    if a.width < WINDOW || a.height < WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width,
            height: a.height,
            window: WINDOW,
        });
    }
    let la: Vec<f64> = a.pixels.iter().map(|&p| encode(p).luminance()).collect();
    let lb: Vec<f64> = b.pixels.iter().map(|&p| encode(p).luminance()).collect();
    let g = gaussian_window();
    let r = WINDOW / 2;
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    let mut n = 0usize;
    for cy in r..h - r {
        for cx in r..w - r {
            if mask.is_some_and(|m| !m.get(cx, cy)) {
                continue;
            }
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, gy) in g.iter().enumerate() {
                let row = (cy + j - r) * w;
                for (i, gx) in g.iter().enumerate() {
                    let k = row + cx + i - r;
                    let wt = gy * gx;
                    let (x, y) = (la[k], lb[k]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / n as f64)
}

pub fn evaluate(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(a, b, mask)?,
        ssim: ssim(a, b, mask)?,
        masked_pixel_count: mask.map_or(a.pixels.len(), Mask::count),
    })
}
