//! 8-bit PNG input and output for [`Image`].

use std::path::Path;

use thiserror::Error;

use crate::render_volume::Image;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot read image {path}: {source}")]
    Read { path: String, source: image::ImageError },
    #[error("cannot write image {path}: {source}")]
    Write { path: String, source: image::ImageError },
}

/// Loads any PNG as RGB with channel values in `[0, 1]`; alpha is dropped.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image, ImageIoError> {
    let path = path.as_ref();
    let rgb = image::open(path)
        .map_err(|source| ImageIoError::Read {
            path: path.display().to_string(),
            source,
        })?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image {
        width: w as usize,
        height: h as usize,
        pixels: rgb.as_raw().iter().map(|v| *v as f64 / 255.0).collect(),
    })
}

/// Quantizes to 8 bits per channel after clamping to `[0, 1]`.
pub fn to_rgb8(img: &Image) -> Vec<u8> {
    img.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    let path = path.as_ref();
    image::save_buffer_with_format(
        path,
        &to_rgb8(img),
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|source| ImageIoError::Write {
        path: path.display().to_string(),
        source,
    })
}
