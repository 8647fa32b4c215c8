//! Raster types, colour transfer functions and file formats.

mod map;
mod pfm;
mod srgb;

pub use map::{
    AlbedoMap, InverseShading, LinearImage, Map, OrdinalEstimate, OrdinalTag, ShadingMap, REC709,
};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};
pub use srgb::{
    load_mask_png, load_png, save_png16, save_preview_png, srgb_decode, srgb_eotf, srgb_oetf,
};

use std::path::Path;

use crate::error::{Error, Result};

/// Load an input photograph: `.pfm` files are read as linear values, `.png`
/// files are sRGB-decoded. Other formats are rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<LinearImage> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("pfm") => {
            let m = read_pfm(path)?;
            let m = match m.channels() {
                3 => m,
                1 => Map::from_fn(m.width(), m.height(), 3, |_, y, x| m.get(0, y, x)),
                c => return Err(Error::format(path, format!("{c}-channel image"))),
            };
            LinearImage::new(m).map_err(|e| Error::format(path, e.to_string()))
        }
        Some("png") => load_png(path),
        _ => Err(Error::format(
            path,
            "unsupported image format (expected .png or .pfm)",
        )),
    }
}
