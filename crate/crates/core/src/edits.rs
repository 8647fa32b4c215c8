//! Image edits on top of a decomposition: recoloring, diffuse relighting and
//! material editing.
//!
//! Relighting embeds the pixel grid in the `z = 0` plane. Pixel centres map
//! to `x, y` in `[-1, 1]`, with `x` growing to the right, `y` growing down
//! the rows and `z` pointing at the viewer. Normals use the same frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AlbedoMap, LinearImage, Map, ShadingMap, REC709};

/// Smallest light-to-surface distance used by [`relight`].
pub const MIN_LIGHT_DISTANCE: f64 = 1e-3;

fn lum(rgb: [f32; 3]) -> f64 {
    (0..3).map(|c| REC709[c] as f64 * rgb[c] as f64).sum()
}

/// Replace the albedo inside `mask` (nonzero = inside) with `color` and
/// reapply the shading. With `preserve_luminance` the color is scaled so
/// the masked region keeps its mean albedo luminance.
pub fn recolor(albedo: &AlbedoMap, shading: &ShadingMap, mask: &Map, color: [f32; 3], preserve_luminance: bool) -> Result<LinearImage> {
    albedo.ensure_dims(shading, "recolor shading")?;
    albedo.ensure_dims(mask, "recolor mask")?;
    if mask.channels() != 1 {
        return Err(Error::Invalid(format!("mask must have 1 channel, got {}", mask.channels())));
    }
    if color.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::Invalid(format!("color must be finite and non-negative, got {color:?}")));
    }
    let (w, h) = albedo.dims();
    let inside: Vec<bool> = mask.data().iter().map(|&v| v != 0.0).collect();
    let count = inside.iter().filter(|&&b| b).count();
    let original = albedo.mul_broadcast(shading)?;
    if count == 0 {
        log::warn!("recolor mask is empty; image left unchanged");
        return LinearImage::new(original);
    }
    let mut color = color;
    if preserve_luminance {
        let target = inside
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| lum([0, 1, 2].map(|c| albedo.get(c, i / w, i % w))))
            .sum::<f64>()
            / count as f64;
        let own = lum(color);
        if own <= 0.0 {
            return Err(Error::Invalid("cannot preserve luminance with a black color".into()));
        }
        let k = target / own;
        color = color.map(|c| (c as f64 * k) as f32);
    }
    let recolored = Map::from_fn(w, h, 3, |c, y, x| {
        if inside[y * w + x] {
            color[c]
        } else {
            albedo.get(c, y, x)
        }
    });
    let edited = recolored.mul_broadcast(shading)?;
    // Outside the mask keep the untouched product so those pixels match A*S
    // bit for bit.
    let out = Map::from_fn(w, h, 3, |c, y, x| {
        if inside[y * w + x] {
            edited.get(c, y, x)
        } else {
            original.get(c, y, x)
        }
    });
    LinearImage::new(out)
}

/// A virtual point light for [`relight`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    pub position: [f64; 3],
    pub intensity: f64,
    pub ambient: f64,
}

impl PointLight {
    pub fn validate(&self) -> Result<()> {
        if self.position.iter().any(|v| !v.is_finite()) || !self.intensity.is_finite() || !self.ambient.is_finite() {
            return Err(Error::Invalid("light parameters must be finite".into()));
        }
        if self.intensity < 0.0 || self.ambient < 0.0 {
            return Err(Error::Invalid("light intensity and ambient must be non-negative".into()));
        }
        Ok(())
    }
}

/// Position of pixel `(x, y)` on the `z = 0` plane.
pub fn pixel_position(x: usize, y: usize, width: usize, height: usize) -> [f64; 3] {
    [
        (2 * x + 1) as f64 / width as f64 - 1.0,
        (2 * y + 1) as f64 / height as f64 - 1.0,
        0.0,
    ]
}

/// Diffuse shading from a point light with inverse-square falloff.
pub fn point_shading(normals: &Map, light: &PointLight) -> Result<ShadingMap> {
    light.validate()?;
    if normals.channels() != 3 {
        return Err(Error::Invalid(format!("normals need 3 channels, got {}", normals.channels())));
    }
    let (w, h) = normals.dims();
    for y in 0..h {
        for x in 0..w {
            let len: f32 = (0..3).map(|c| normals.get(c, y, x).powi(2)).sum::<f32>().sqrt();
            if (len - 1.0).abs() > 1e-3 {
                return Err(Error::Invalid(format!("normal at ({x}, {y}) has length {len}")));
            }
        }
    }
    let s = Map::from_fn(w, h, 1, |_, y, x| {
        let p = pixel_position(x, y, w, h);
        let d = [0, 1, 2].map(|i| light.position[i] - p[i]);
        let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(MIN_LIGHT_DISTANCE);
        let ndl: f64 = (0..3).map(|i| normals.get(i, y, x) as f64 * d[i] / dist).sum();
        (light.ambient + light.intensity * ndl.max(0.0) / (dist * dist)) as f32
    });
    ShadingMap::new(s)
}

/// Render the albedo under a new point light. Returns the new shading and
/// the relit image.
pub fn relight(albedo: &AlbedoMap, normals: &Map, light: &PointLight) -> Result<(ShadingMap, LinearImage)> {
    albedo.ensure_dims(normals, "relight normals")?;
    let s = point_shading(normals, light)?;
    let image = LinearImage::new(albedo.mul_broadcast(&s)?)?;
    Ok((s, image))
}

/// Lower median of the values.
fn lower_median(values: &[f32]) -> f32 {
    let mut v = values.to_vec();
    let mid = (v.len() - 1) / 2;
    *v.select_nth_unstable_by(mid, f32::total_cmp).1
}

/// Exponentiate shading around its median: `S' = m * (S / m)^gamma`. When
/// more than half of the pixels are zero, `m` is the median of the positive
/// values.
pub fn material_edit(shading: &ShadingMap, gamma: f64) -> Result<ShadingMap> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Invalid(format!("gamma must be positive, got {gamma}")));
    }
    if shading.data().iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Invalid("shading must be non-negative".into()));
    }
    let positive: Vec<f32> = shading.data().iter().copied().filter(|&v| v > 0.0).collect();
    if positive.is_empty() {
        log::warn!("shading is all zero; material edit skipped");
        return Ok(shading.clone());
    }
    let mut m = lower_median(shading.data());
    if m <= 0.0 {
        m = lower_median(&positive);
    }
    let m = m as f64;
    ShadingMap::new(shading.map(|v| (m * (v as f64 / m).powf(gamma)) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn albedo(w: usize, h: usize) -> AlbedoMap {
        AlbedoMap::new(Map::from_fn(w, h, 3, |c, y, x| 0.1 + 0.1 * c as f32 + 0.05 * ((x + 2 * y) % 5) as f32)).unwrap()
    }

    fn shading(w: usize, h: usize) -> ShadingMap {
        ShadingMap::new(Map::from_fn(w, h, 1, |_, y, x| 0.2 + 0.3 * x as f32 + 0.1 * y as f32)).unwrap()
    }

    fn flat_normals(w: usize, h: usize) -> Map {
        Map::from_fn(w, h, 3, |c, _, _| if c == 2 { 1.0 } else { 0.0 })
    }

    #[test]
    fn empty_mask_returns_the_product() {
        let (a, s) = (albedo(5, 4), shading(5, 4));
        let out = recolor(&a, &s, &Map::filled(5, 4, 1, 0.0), [1.0, 0.0, 0.0], true).unwrap();
        assert_eq!(out.as_map(), &a.mul_broadcast(&s).unwrap());
    }

    #[test]
    fn flat_recolor_with_mean_albedo() {
        let (a, s) = (albedo(6, 5), shading(6, 5));
        let mean = [0, 1, 2].map(|c| a.plane(c).iter().map(|&v| v as f64).sum::<f64>() as f32 / 30.0);
        let out = recolor(&a, &s, &Map::filled(6, 5, 1, 1.0), mean, true).unwrap();
        let lum_mean = lum(mean);
        for y in 0..5 {
            for x in 0..6 {
                let l = lum([0, 1, 2].map(|c| out.get(c, y, x)));
                let expect = lum_mean * s.get(0, y, x) as f64;
                assert!((l - expect).abs() <= 1e-6 * expect, "{l} vs {expect}");
            }
        }
    }

    #[test]
    fn recolor_keeps_shading_inside_and_pixels_outside() {
        let (a, s) = (albedo(8, 6), shading(8, 6));
        let mask = Map::from_fn(8, 6, 1, |_, y, x| if x < 4 && y > 1 { 1.0 } else { 0.0 });
        let color = [0.7f32, 0.2, 0.4];
        let out = recolor(&a, &s, &mask, color, false).unwrap();
        let orig = a.mul_broadcast(&s).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                for c in 0..3 {
                    if mask.get(0, y, x) != 0.0 {
                        let back = out.get(c, y, x) / color[c];
                        assert!((back - s.get(0, y, x)).abs() <= 1e-5 * s.get(0, y, x));
                    } else {
                        assert_eq!(out.get(c, y, x).to_bits(), orig.get(c, y, x).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn distant_light_on_axis_is_nearly_uniform() {
        let light = PointLight { position: [0.0, 0.0, 1e3], intensity: 1e6, ambient: 0.1 };
        let s = point_shading(&flat_normals(9, 7), &light).unwrap();
        let expect = 0.1 + 1e6 / 1e6;
        for &v in s.data() {
            assert!((v as f64 - expect).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn light_behind_gives_ambient() {
        let light = PointLight { position: [0.3, -0.2, -2.0], intensity: 5.0, ambient: 0.25 };
        let s = point_shading(&flat_normals(7, 7), &light).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn brightest_pixel_is_nearest_the_foot_point() {
        let (w, h) = (16, 12);
        let light = PointLight { position: [0.4, -0.3, 0.5], intensity: 1.0, ambient: 0.0 };
        let s = point_shading(&flat_normals(w, h), &light).unwrap();
        let argmax = (0..w * h).max_by(|&i, &j| s.data()[i].total_cmp(&s.data()[j])).unwrap();
        // On a flat plane the shading is intensity * z / r^3, maximised where
        // the in-plane distance to (0.4, -0.3) is smallest.
        let nearest = (0..w * h)
            .min_by(|&i, &j| {
                let d = |k: usize| {
                    let p = pixel_position(k % w, k / w, w, h);
                    (p[0] - 0.4).powi(2) + (p[1] + 0.3).powi(2)
                };
                d(i).total_cmp(&d(j))
            })
            .unwrap();
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn relight_rejects_non_unit_normals() {
        let n = Map::filled(3, 3, 3, 0.5);
        let light = PointLight { position: [0.0, 0.0, 1.0], intensity: 1.0, ambient: 0.0 };
        assert!(matches!(relight(&albedo(3, 3), &n, &light), Err(Error::Invalid(_))));
    }

    #[test]
    fn material_edit_examples() {
        let m = 0.8f32;
        let s = ShadingMap::new(Map::new(3, 1, 1, vec![0.5 * m, m, 2.0 * m]).unwrap()).unwrap();
        let out = material_edit(&s, 2.0).unwrap();
        let expect = [0.25 * m, m, 4.0 * m];
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() <= 1e-6 * e);
        }
        assert_eq!(out.data()[1], m);
        let id = material_edit(&s, 1.0).unwrap();
        assert_eq!(id.data(), s.data());
        let zero = ShadingMap::new(Map::filled(2, 2, 1, 0.0)).unwrap();
        assert_eq!(material_edit(&zero, 3.0).unwrap().data(), zero.data());
    }

    proptest! {
        #[test]
        fn relight_is_linear_in_albedo(k in 0.1f32..4.0, lx in -1.0f64..1.0, lz in 0.1f64..3.0) {
            let a = albedo(6, 5);
            let light = PointLight { position: [lx, 0.2, lz], intensity: 2.0, ambient: 0.1 };
            let (_, base) = relight(&a, &flat_normals(6, 5), &light).unwrap();
            let scaled = AlbedoMap::new(a.map(|v| v * k)).unwrap();
            let (_, out) = relight(&scaled, &flat_normals(6, 5), &light).unwrap();
            for (o, b) in out.data().iter().zip(base.data()) {
                prop_assert!((o - k * b).abs() <= 1e-5 * (k * b).abs().max(1e-6));
            }
        }

        #[test]
        fn material_edit_is_monotone(values in proptest::collection::vec(0.0f32..10.0, 2..40), gamma in 0.1f64..5.0) {
            let n = values.len();
            let s = ShadingMap::new(Map::new(n, 1, 1, values.clone()).unwrap()).unwrap();
            let out = material_edit(&s, gamma).unwrap();
            for i in 0..n {
                for j in 0..n {
                    if values[i] < values[j] {
                        prop_assert!(out.data()[i] <= out.data()[j]);
                    }
                }
            }
        }
    }
}
