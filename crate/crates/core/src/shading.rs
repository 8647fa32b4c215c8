//! Conversions between shading, inverse shading and albedo.

use crate::error::{Error, Result};
use crate::image::{AlbedoMap, InverseShading, LinearImage, Map, ShadingMap};

/// Largest shading value that survives the clamp unchanged.
pub const MAX_SHADING: f64 = 1e4;
/// Inverse shading is kept inside `[EPS, 1 - EPS]` before any division;
/// `EPS` is the inverse of [`MAX_SHADING`].
pub const EPS: f64 = 1.0 / (MAX_SHADING + 1.0);

#[inline]
pub fn inverse_of(s: f64) -> f64 {
    1.0 / (s + 1.0)
}

#[inline]
pub fn shading_of(d: f64) -> f64 {
    let d = d.clamp(EPS, 1.0);
    (1.0 - d) / d
}

/// `d / (1 - d)`, the factor that turns an image into albedo.
#[inline]
pub fn albedo_factor(d: f64) -> f64 {
    let d = d.clamp(EPS, 1.0 - EPS);
    d / (1.0 - d)
}

fn map_f64(m: &Map, f: impl Fn(f64) -> f64) -> Map {
    m.map(|v| f(v as f64) as f32)
}

pub fn shading_to_inverse(s: &ShadingMap) -> InverseShading {
    InverseShading::new(map_f64(s, inverse_of)).expect("1/(s+1) lies in (0, 1] for s >= 0")
}

/// Validate a raw shading raster and convert it.
pub fn shading_map_to_inverse(s: &Map) -> Result<InverseShading> {
    if let Some(v) = s.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Invalid(format!("shading must be non-negative, found {v}")));
    }
    Ok(InverseShading::new(map_f64(s, inverse_of)).expect("range checked"))
}

pub fn inverse_to_shading(d: &InverseShading) -> ShadingMap {
    ShadingMap::new(map_f64(d, shading_of)).expect("clamped inverse gives finite shading")
}

/// `A = I * D / (1 - D)` with `D` clamped to `[EPS, 1 - EPS]`.
pub fn albedo_from_inverse(image: &LinearImage, d: &InverseShading) -> Result<AlbedoMap> {
    image.ensure_dims(d, "albedo_from_inverse")?;
    let k = map_f64(d, albedo_factor);
    AlbedoMap::new(image.mul_broadcast(&k)?)
}

/// Shading and albedo derived from one clamped inverse-shading map. Both
/// outputs use the same clamped value so that `A * S` reproduces `I`.
pub fn split_image(image: &LinearImage, d: &InverseShading) -> Result<(ShadingMap, AlbedoMap)> {
    image.ensure_dims(d, "split_image")?;
    let s = ShadingMap::new(map_f64(d, |v| {
        let v = v.clamp(EPS, 1.0 - EPS);
        (1.0 - v) / v
    }))?;
    let a = AlbedoMap::new(image.mul_broadcast(&map_f64(d, albedo_factor))?)?;
    Ok((s, a))
}

/// `I = A * S` with `S` broadcast over colour channels.
pub fn compose(a: &Map, s: &Map) -> Result<Map> {
    a.mul_broadcast(s)
}
