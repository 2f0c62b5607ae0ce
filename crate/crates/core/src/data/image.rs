//! PPM/PGM ingestion and export plus the bilinear resize used on load.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<DynamicImage> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = PnmDecoder::new(BufReader::new(f))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    DynamicImage::from_decoder(dec).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Reads a color PNM image as `[3,H,W]` with values in `[0,1]`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planar = |px: &[f64]| -> Result<Tensor> {
        let mut data = vec![0.0; 3 * h * w];
        for (i, rgb) in px.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = rgb[c];
            }
        }
        Tensor::new(&[3, h, w], data)
    };
    match img {
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            let px: Vec<f64> = img.to_rgb16().into_raw().iter().map(|&v| v as f64 / 65535.0).collect();
            planar(&px)
        }
        _ => {
            let px: Vec<f64> = img.to_rgb8().into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            planar(&px)
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3,H,W]` tensor in `[0,1]` as binary P6.
pub fn write_ppm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("ppm export needs [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut px = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            px.push(quantize(t.data()[c * h * w + i]));
        }
    }
    encode(path, &px, w, h, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

/// Writes 8-bit grayscale rows as binary P5.
pub fn write_pgm(path: impl AsRef<Path>, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Dimension(format!(
            "pgm export: {} bytes for {width}x{height}",
            pixels.len()
        )));
    }
    encode(
        path.as_ref(),
        pixels,
        width,
        height,
        PnmSubtype::Graymap(SampleEncoding::Binary),
        ExtendedColorType::L8,
    )
}

/// Reads an 8-bit grayscale PNM as `(width, height, pixels)`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let img = open(path.as_ref())?;
    Ok((img.width() as usize, img.height() as usize, img.to_luma8().into_raw()))
}

fn encode(path: &Path, px: &[u8], w: usize, h: usize, sub: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(f))
        .with_subtype(sub)
        .write_image(px, w as u32, h as u32, color)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Bilinear resize of `[C,H,W]` with half-pixel centers and edge clamping.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("resize needs [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let axis = |i: usize, n_in: usize, n_out: usize| {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|i| axis(i, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|i| axis(i, w, out_w)).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}
