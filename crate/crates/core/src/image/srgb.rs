//! sRGB transfer functions and PNG input/preview output.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use super::{LinearImage, Map};
use crate::error::{Error, Result};

/// Display-referred value in [0, 1] to linear light.
pub fn srgb_eotf(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Linear light in [0, 1] to display-referred value.
pub fn srgb_oetf(v: f32) -> f32 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Decode integer sRGB samples of the given bit depth.
pub fn srgb_decode(samples: &[u16], bit_depth: u8) -> Result<Vec<f32>> {
    let max = match bit_depth {
        8 => 255.0,
        16 => 65535.0,
        other => return Err(Error::Invalid(format!("unsupported bit depth {other}"))),
    };
    Ok(samples.iter().map(|&s| srgb_eotf(s as f32 / max)).collect())
}

/// Load an 8- or 16-bit PNG as linear RGB. Alpha is discarded and grey
/// images are expanded to three channels.
pub fn load_png(path: impl AsRef<Path>) -> Result<LinearImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (samples, depth): (Vec<u16>, u8) = match &img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => {
            (img.to_rgb8().into_raw().into_iter().map(u16::from).collect(), 8)
        }
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => (img.to_rgb16().into_raw(), 16),
        _ => {
            return Err(Error::format(
                path,
                format!("unsupported pixel format {:?}", img.color()),
            ))
        }
    };
    let linear = srgb_decode(&samples, depth)?;
    let map = Map::from_fn(w, h, 3, |c, y, x| linear[(y * w + x) * 3 + c]);
    LinearImage::new(map)
}

/// Load a mask PNG; any nonzero grey level is inside.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Map> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let g = img.to_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok(Map::from_fn(w, h, 1, |_, y, x| {
        if g.get_pixel(x as u32, y as u32).0[0] > 0 {
            1.0
        } else {
            0.0
        }
    }))
}

fn encode_8bit(v: f32) -> u8 {
    (srgb_oetf(v.clamp(0.0, 1.0)) * 255.0).round() as u8
}

/// 8-bit sRGB preview of a 1- or 3-channel linear raster, clamped to [0, 1].
pub fn save_preview_png(map: &Map, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (map.width() as u32, map.height() as u32);
    let result = match map.channels() {
        1 => ImageBuffer::<Luma<u8>, _>::from_fn(w, h, |x, y| {
            Luma([encode_8bit(map.get(0, y as usize, x as usize))])
        })
        .save(path),
        3 => ImageBuffer::<Rgb<u8>, _>::from_fn(w, h, |x, y| {
            let p = |c| encode_8bit(map.get(c, y as usize, x as usize));
            Rgb([p(0), p(1), p(2)])
        })
        .save(path),
        c => return Err(Error::Invalid(format!("cannot preview {c} channels"))),
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

/// 16-bit sRGB PNG of a 3-channel linear raster, clamped to [0, 1].
pub fn save_png16(map: &Map, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if map.channels() != 3 {
        return Err(Error::Invalid("16-bit PNG output needs 3 channels".into()));
    }
    let (w, h) = (map.width() as u32, map.height() as u32);
    ImageBuffer::<Rgb<u16>, _>::from_fn(w, h, |x, y| {
        let p = |c| {
            (srgb_oetf(map.get(c, y as usize, x as usize).clamp(0.0, 1.0)) * 65535.0).round()
                as u16
        };
        Rgb([p(0), p(1), p(2)])
    })
    .save(path)
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}
