//! HDR images, binary masks, and their PFM/PNG encodings.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::spectrum::{linear_to_srgb, srgb_to_linear, Spectrum};

/// Linear RGB image stored row-major, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Spectrum>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image::filled(width, height, Spectrum::ZERO)
    }

    pub fn filled(width: usize, height: usize, value: Spectrum) -> Self {
        Image {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Spectrum) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Spectrum {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: Spectrum) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn is_valid(&self) -> bool {
        self.pixels.len() == self.width * self.height && self.pixels.iter().all(|p| p.is_valid())
    }

    pub fn map(&self, f: impl Fn(Spectrum) -> Spectrum) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    /// sRGB-encode and clamp to [0, 1] for display-space comparisons.
    pub fn to_srgb(&self) -> Image {
        self.map(|p| p.map(linear_to_srgb))
    }

    /// Box-filter by an integer factor. Dimensions must be divisible by it.
    pub fn downsample(&self, factor: usize) -> Image {
        if factor == 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        Image::from_fn(w, h, |x, y| {
            let mut acc = Spectrum::ZERO;
            for sy in 0..factor {
                for sx in 0..factor {
                    acc += self.get(x * factor + sx, y * factor + sy);
                }
            }
            acc * norm
        })
    }

    pub fn total_energy(&self) -> f64 {
        self.pixels.iter().map(|p| p.sum()).sum()
    }
}

/// Binary foreground mask, row-major, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    /// Downsample by majority vote; ties count as foreground.
    pub fn downsample(&self, factor: usize) -> Mask {
        if factor == 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut on = 0;
                for sy in 0..factor {
                    for sx in 0..factor {
                        on += self.get(x * factor + sx, y * factor + sy) as usize;
                    }
                }
                data.push(2 * on >= factor * factor);
            }
        }
        Mask {
            width: w,
            height: h,
            data,
        }
    }
}

/// Read an HDR image: PFM as-is, PNG decoded from sRGB to linear.
pub fn read_image(path: &Path) -> Result<Image> {
    match extension(path).as_str() {
        "pfm" => read_pfm(path),
        _ => read_png(path),
    }
}

/// Write PFM (float) or PNG (linear to sRGB, 8-bit) based on extension.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    match extension(path).as_str() {
        "pfm" => write_pfm(path, image),
        "png" => write_png(path, image),
        other => Err(Error::format(
            path,
            "extension",
            format!("unsupported image extension `{other}`"),
        )),
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes).map_err(|msg| Error::format(path, "pfm", msg))
}

fn decode_pfm(bytes: &[u8]) -> std::result::Result<Image, String> {
    // Header is three whitespace-separated tokens followed by one whitespace byte.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match tokens[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        t => return Err(format!("bad magic `{t}`")),
    };
    let width: usize = tokens[1].parse().map_err(|_| "bad width")?;
    let height: usize = tokens[2].parse().map_err(|_| "bad height")?;
    let scale: f32 = tokens[3].parse().map_err(|_| "bad scale")?;
    let little = scale < 0.0;
    let need = width * height * channels * 4;
    let data = bytes.get(pos..pos + need).ok_or("truncated pixel data")?;
    let mut floats = data.chunks_exact(4).map(|c| {
        let b = [c[0], c[1], c[2], c[3]];
        if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    });
    let mut image = Image::new(width, height);
    // Scanlines are stored bottom to top.
    for row in 0..height {
        let y = height - 1 - row;
        for x in 0..width {
            let px = if channels == 3 {
                let r = floats.next().unwrap() as f64;
                let g = floats.next().unwrap() as f64;
                let b = floats.next().unwrap() as f64;
                Spectrum::new(r, g, b)
            } else {
                Spectrum::splat(floats.next().unwrap() as f64)
            };
            image.set(x, y, px);
        }
    }
    Ok(image)
}

pub fn encode_pfm(image: &Image) -> Vec<u8> {
    let mut out = format!("PF\n{} {}\n-1.0\n", image.width, image.height).into_bytes();
    out.reserve(image.width * image.height * 12);
    for row in 0..image.height {
        let y = image.height - 1 - row;
        for x in 0..image.width {
            for c in image.get(x, y).to_array() {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn write_pfm(path: &Path, image: &Image) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pfm(image))
        .map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, "png", e.to_string()))?
        .into_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img
        .pixels()
        .map(|p| {
            Spectrum::new(
                srgb_to_linear(p.0[0] as f64),
                srgb_to_linear(p.0[1] as f64),
                srgb_to_linear(p.0[2] as f64),
            )
        })
        .collect();
    Ok(Image {
        width: w,
        height: h,
        pixels,
    })
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let mut buf = image::RgbImage::new(image.width as u32, image.height as u32);
    for (dst, src) in buf.pixels_mut().zip(&image.pixels) {
        let enc = src.map(linear_to_srgb).to_array();
        dst.0 = enc.map(|v| (v * 255.0).round() as u8);
    }
    buf.save(path)
        .map_err(|e| Error::format(path, "png", e.to_string()))
}

/// Read a grayscale PNG mask; any nonzero value is foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, "mask", e.to_string()))?
        .into_luma8();
    Ok(Mask {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.pixels().map(|p| p.0[0] != 0).collect(),
    })
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let buf = image::GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        image::Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    buf.save(path)
        .map_err(|e| Error::format(path, "mask", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_exact_for_f32_values() {
        let img = Image::from_fn(5, 3, |x, y| {
            Spectrum::new(x as f64 * 0.25, y as f64 + 0.5, (x * y) as f64 / 7.0)
        })
        .map(|p| p.map(|v| v as f32 as f64));
        let decoded = decode_pfm(&encode_pfm(&img)).unwrap();
        assert_eq!(decoded, img);
    }

    #[test]
    fn pfm_is_stored_bottom_up() {
        let mut img = Image::new(1, 2);
        img.set(0, 0, Spectrum::splat(1.0));
        let bytes = encode_pfm(&img);
        let header_len = "PF\n1 2\n-1.0\n".len();
        // The first stored scanline is the bottom row (zeros).
        assert_eq!(&bytes[header_len..header_len + 4], &0f32.to_le_bytes());
    }

    #[test]
    fn mask_majority_downsample() {
        let mask = Mask {
            width: 2,
            height: 2,
            data: vec![true, true, false, false],
        };
        assert!(mask.downsample(2).data[0]);
        let mask = Mask {
            width: 2,
            height: 2,
            data: vec![true, false, false, false],
        };
        assert!(!mask.downsample(2).data[0]);
    }
}
