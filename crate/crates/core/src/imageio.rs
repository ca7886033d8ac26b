//! Conversion between RGB tensors and 8-bit PNG.
//!
//! Reals in `[-1, 1]` map linearly onto `[0, 255]`; values outside are
//! clamped and the result is rounded half away from zero.

use std::io::Cursor;

pub use image::RgbImage;

use image::ImageFormat;

use crate::error::shape_err;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

pub fn to_rgb8(t: &Tensor) -> Result<RgbImage> {
    if t.channels() != 3 {
        return Err(shape_err!("{} channels, RGB needs 3", t.channels()));
    }
    let (w, h) = (t.width() as u32, t.height() as u32);
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(t.get(0, y, x)), to_u8(t.get(1, y, x)), to_u8(t.get(2, y, x))])
    }))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor {
    Tensor::from_fn(3, img.height() as usize, img.width() as usize, |c, y, x| {
        from_u8(img.get_pixel(x as u32, y as u32).0[c])
    })
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Encodes interleaved RGB bytes, row-major.
pub fn rgb_bytes_to_png(width: usize, height: usize, rgb: Vec<u8>) -> Result<Vec<u8>> {
    let img = RgbImage::from_raw(width as u32, height as u32, rgb)
        .ok_or_else(|| shape_err!("RGB buffer does not hold {width}x{height} pixels"))?;
    encode_png(&img)
}

pub fn tensor_to_png(t: &Tensor) -> Result<Vec<u8>> {
    encode_png(&to_rgb8(t)?)
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(img.to_rgb8())
}

pub fn png_to_tensor(bytes: &[u8]) -> Result<Tensor> {
    Ok(from_rgb8(&decode_png(bytes)?))
}
