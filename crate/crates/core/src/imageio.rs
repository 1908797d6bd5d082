//! Image decode/encode helpers. Input images are PNG or binary PPM and are
//! presented to the CNN as raw 0-255 scalars; outputs are PNG (8-bit RGB,
//! affinely mapped to the display range, or 16-bit grayscale for saliency).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Decode a PNG or binary PPM into an `[H,W,3]` tensor of 0-255 values.
pub fn load_rgb<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if ext != "png" && ext != "ppm" {
        return Err(Error::ImageDecode(format!(
            "{}: only png and ppm inputs are supported",
            path.display()
        )));
    }
    let image = image::open(path)
        .map_err(|e| Error::ImageDecode(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = image.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for pixel in image.pixels() {
        for c in 0..3 {
            data.push(T::from_f64(pixel.0[c] as f64));
        }
    }
    Tensor::from_vec(&[h as usize, w as usize, 3], data)
}

/// Save an `[H,W,3]` tensor of 0-255 values as 8-bit PNG (values rounded
/// and clamped).
pub fn save_rgb_png<T: Element>(path: &Path, image: &Tensor<T>) -> Result<()> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "save_rgb_png needs H x W x 3".into(),
        });
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let data: Vec<u8> = image
        .data()
        .iter()
        .map(|v| v.to_f64().round().clamp(0.0, 255.0) as u8)
        .collect();
    let buffer: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, data).expect("sized buffer");
    buffer
        .save(path)
        .map_err(|e| Error::ImageDecode(format!("{}: {e}", path.display())))
}

/// Save an arbitrary-range `[H,W,3]` tensor as PNG after an affine map of
/// its value range onto 0-255 (a constant image maps to mid gray).
pub fn save_rgb_png_affine<T: Element>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let lo = image.data().iter().map(|v| v.to_f64()).fold(f64::INFINITY, f64::min);
    let hi = image
        .data()
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let scaled = if hi > lo {
        image.map(|v| T::from_f64((v.to_f64() - lo) / (hi - lo) * 255.0))
    } else {
        Tensor::filled(image.shape(), T::from_f64(127.0))
    };
    save_rgb_png(path, &scaled)
}

/// Save an `[H,W]` map as 16-bit grayscale PNG, affinely scaled to the
/// full range (a constant map becomes all zeros).
pub fn save_gray16_png<T: Element>(path: &Path, map: &Tensor<T>) -> Result<()> {
    if map.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: map.shape().to_vec(),
            reason: "save_gray16_png needs H x W".into(),
        });
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let lo = map.data().iter().map(|v| v.to_f64()).fold(f64::INFINITY, f64::min);
    let hi = map
        .data()
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let data: Vec<u16> = map
        .data()
        .iter()
        .map(|v| {
            if hi > lo {
                ((v.to_f64() - lo) / (hi - lo) * 65535.0).round() as u16
            } else {
                0
            }
        })
        .collect();
    let buffer: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, data).expect("sized buffer");
    buffer
        .save(path)
        .map_err(|e| Error::ImageDecode(format!("{}: {e}", path.display())))
}
