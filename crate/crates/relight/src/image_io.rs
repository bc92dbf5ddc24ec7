//! 8-bit RGB PNG files to and from `(1, 3, h, w)` tensors in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::png::{PngDecoder, PngEncoder};
use image::{ColorType, ExtendedColorType, ImageDecoder, ImageEncoder};
use relight_core::{Shape, Tensor};

use crate::error::{Error, Result};

/// `round(clamp(v, 0, 1) · 255)`. NaN maps to 0.
pub fn quantize(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_error(path: &Path, detail: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

/// Reads a square 8-bit RGB PNG.
pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = PngDecoder::new(BufReader::new(file)).map_err(|e| image_error(path, e))?;
    let color = decoder.color_type();
    if color != ColorType::Rgb8 {
        return Err(image_error(path, format!("expected 8-bit RGB, found {color:?}")));
    }
    let (w, h) = decoder.dimensions();
    if w != h {
        return Err(image_error(path, format!("expected a square image, found {w}x{h}")));
    }
    let mut bytes = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut bytes).map_err(|e| image_error(path, e))?;
    Ok(from_interleaved(&bytes, h as usize, w as usize))
}

/// Channel-interleaved bytes to a planar tensor.
pub fn from_interleaved(bytes: &[u8], h: usize, w: usize) -> Tensor<f32> {
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in bytes.chunks_exact(3).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * plane + i] = f32::from(b) / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data).expect("length matches shape")
}

/// Planar `(1, 3, h, w)` tensor to quantized interleaved bytes.
pub fn to_interleaved(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::usage(format!("can only encode one RGB image, got {s}")));
    }
    let plane = s.plane();
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(quantize(d[c * plane + i]));
        }
    }
    Ok(bytes)
}

pub fn write_png(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    let bytes = to_interleaved(image)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    PngEncoder::new(&mut out)
        .write_image(&bytes, s.w as u32, s.h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| image_error(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Maps `[0, 1]` pixels to the network's `[-1, 1]` range.
pub fn to_signed(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| 2.0 * v - 1.0)
}

/// Maps network outputs back to `[0, 1]`.
pub fn to_unit(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| 0.5 * v + 0.5)
}

/// Averages `factor x factor` blocks of every plane.
pub fn box_downsample(image: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if factor == 0 || s.h % factor != 0 || s.w % factor != 0 {
        return Err(Error::usage(format!("cannot shrink {}x{} by {factor}", s.h, s.w)));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let (oh, ow) = (s.h / factor, s.w / factor);
    let scale = 1.0 / (factor * factor) as f32;
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for src in image.data().chunks(s.plane()) {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = &src[(y * factor + dy) * s.w + x * factor..][..factor];
                    acc += row.iter().sum::<f32>();
                }
                out.push(acc * scale);
            }
        }
    }
    Ok(Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out)?)
}
