//! Closed-form least-squares fits.

use crate::error::{Error, Result};
use crate::image::{AlbedoMap, InverseShading, LinearImage, Map, ShadingMap};
use crate::shading::{albedo_factor, inverse_of};

/// Slope used when the unconstrained fit is not strictly increasing.
pub const FALLBACK_SLOPE: f64 = 1e-6;
/// Pixels whose low-resolution ordinal value falls outside this band are
/// excluded from the ground-truth scale fit.
pub const SCALE_FIT_BAND: (f32, f32) = (0.01, 0.99);

/// `f(o) = a * o + b` with `a > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
    /// The prediction was constant over the fitted pixels.
    pub degenerate: bool,
    /// The unconstrained slope was non-positive and has been replaced.
    pub constrained: bool,
}

impl AffineFit {
    #[inline]
    pub fn apply(&self, o: f32) -> f64 {
        self.a * o as f64 + self.b
    }
}

/// `reference ~ c * target` with `c > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleFit {
    pub c: f64,
}

fn masked<'a>(
    o: &'a [f32],
    d: &'a [f32],
    mask: Option<&'a [bool]>,
) -> Result<impl Iterator<Item = (f64, f64)> + Clone + 'a> {
    if o.len() != d.len() || mask.is_some_and(|m| m.len() != o.len()) {
        return Err(Error::Invalid(format!(
            "fit: length mismatch ({} vs {})",
            o.len(),
            d.len()
        )));
    }
    Ok(o.iter()
        .zip(d)
        .enumerate()
        .filter(move |(i, _)| mask.map_or(true, |m| m[*i]))
        .map(|(_, (&x, &y))| (x as f64, y as f64)))
}

/// Least-squares `a, b` minimising `sum (a * o + b - d)^2` subject to `a > 0`.
///
/// A non-positive unconstrained slope is replaced by [`FALLBACK_SLOPE`] with
/// `b` refitted for that slope. A constant `o` yields the same fallback and
/// is flagged as degenerate.
pub fn fit_affine(o: &[f32], d: &[f32], mask: Option<&[bool]>) -> Result<AffineFit> {
    let pairs = masked(o, d, mask)?;
    let (mut n, mut so, mut sd) = (0usize, 0.0f64, 0.0f64);
    for (x, y) in pairs.clone() {
        n += 1;
        so += x;
        sd += y;
    }
    if n < 2 {
        return Err(Error::Degenerate(format!("affine fit needs 2 pixels, got {n}")));
    }
    let (mo, md) = (so / n as f64, sd / n as f64);
    let (mut sxx, mut sxy) = (0.0f64, 0.0f64);
    for (x, y) in pairs {
        sxx += (x - mo) * (x - mo);
        sxy += (x - mo) * (y - md);
    }
    if sxx <= 0.0 {
        return Ok(AffineFit {
            a: FALLBACK_SLOPE,
            b: md,
            degenerate: true,
            constrained: true,
        });
    }
    let a = sxy / sxx;
    if a <= 0.0 {
        return Ok(AffineFit {
            a: FALLBACK_SLOPE,
            b: md - FALLBACK_SLOPE * mo,
            degenerate: false,
            constrained: true,
        });
    }
    Ok(AffineFit {
        a,
        b: md - a * mo,
        degenerate: false,
        constrained: false,
    })
}

/// `c = sum(reference * target) / sum(target^2)`, the minimiser of
/// `sum (reference - c * target)^2`.
pub fn fit_scale(reference: &[f32], target: &[f32]) -> Result<ScaleFit> {
    fit_scale_masked(reference, target, None)
}

pub fn fit_scale_masked(
    reference: &[f32],
    target: &[f32],
    mask: Option<&[bool]>,
) -> Result<ScaleFit> {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (r, t) in masked(reference, target, mask)? {
        num += r * t;
        den += t * t;
    }
    if den <= 0.0 {
        return Err(Error::Degenerate("scale fit against an all-zero target".into()));
    }
    let c = num / den;
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Degenerate(format!("scale fit gave non-positive c = {c}")));
    }
    Ok(ScaleFit { c })
}

/// Ground truth brought to the scale implied by a low-resolution ordinal map.
#[derive(Clone, Debug)]
pub struct ScaledTruth {
    pub c: f64,
    pub albedo: AlbedoMap,
    pub shading: ShadingMap,
    pub inverse: InverseShading,
}

/// Rescale an albedo `A**` so that it agrees with the albedo implied by the
/// ordinal map `O_L` (`I * O_L / (1 - O_L)`), then derive matching shading
/// `S* = lum(I) / lum(A*)` and `D* = 1 / (S* + 1)`.
pub fn fix_ground_truth_scale(
    albedo: &AlbedoMap,
    ordinal_low: &Map,
    image: &LinearImage,
) -> Result<ScaledTruth> {
    image.ensure_dims(albedo, "fix_ground_truth_scale")?;
    let o = ordinal_low.resize(image.width(), image.height())?;
    let implied = image.mul_broadcast(&o.map(|v| albedo_factor(v as f64) as f32))?;
    let band: Vec<bool> = o
        .data()
        .iter()
        .map(|&v| v >= SCALE_FIT_BAND.0 && v <= SCALE_FIT_BAND.1)
        .collect();
    let mask: Vec<bool> = band.iter().cycle().take(implied.data().len()).cloned().collect();
    let fit = fit_scale_masked(implied.data(), albedo.data(), Some(&mask))?;
    let c = fit.c as f32;
    let a_star = AlbedoMap::new(albedo.map(|v| v * c))?;
    let s_star = luminance_ratio(image, &a_star)?;
    let d_star = InverseShading::new(s_star.map(|v| inverse_of(v as f64) as f32))?;
    Ok(ScaledTruth {
        c: fit.c,
        albedo: a_star,
        shading: s_star,
        inverse: d_star,
    })
}

/// `lum(I) / lum(A)` per pixel; zero-luminance albedo gives zero shading.
pub fn luminance_ratio(image: &Map, albedo: &Map) -> Result<ShadingMap> {
    image.ensure_dims(albedo, "luminance_ratio")?;
    let li = image.luminance();
    let la = albedo.luminance();
    let data = li
        .data()
        .iter()
        .zip(la.data())
        .map(|(&i, &a)| if a > 0.0 { (i as f64 / a as f64) as f32 } else { 0.0 })
        .collect();
    ShadingMap::new(Map::new(image.width(), image.height(), 1, data)?)
}

/// Scale `high` so that its mean equals the mean of `low`, clamped to the
/// open unit interval.
pub fn match_mean(high: &Map, low: &Map) -> Result<Map> {
    let mh = high.mean();
    if mh <= 0.0 {
        return Err(Error::Degenerate("mean matching against a zero-mean map".into()));
    }
    let k = low.mean() / mh;
    Ok(high.map(|v| ((v as f64 * k) as f32).clamp(1e-6, 1.0 - 1e-6)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn affine_examples() {
        let f = fit_affine(&[0.0, 1.0], &[0.2, 0.6], None).unwrap();
        assert!((f.a - 0.4).abs() < 1e-7 && (f.b - 0.2).abs() < 1e-7);
        let o = [0.1, 0.5, 0.7, 0.3];
        let f = fit_affine(&o, &o, None).unwrap();
        assert!((f.a - 1.0).abs() < 1e-12 && f.b.abs() < 1e-12);
        let f = fit_affine(&[1.0, 0.0], &[0.2, 0.6], None).unwrap();
        assert_eq!(f.a, FALLBACK_SLOPE);
        assert!(f.constrained && !f.degenerate);
        assert!((f.b - 0.4).abs() < 1e-6);
    }

    #[test]
    fn affine_degenerate_cases() {
        let f = fit_affine(&[0.3; 4], &[0.1, 0.2, 0.3, 0.4], None).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.a, FALLBACK_SLOPE);
        assert!((f.b - 0.25).abs() < 1e-7);
        assert!(fit_affine(&[0.1], &[0.2], None).is_err());
        let mask = [true, false, false];
        assert!(fit_affine(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3], Some(&mask)).is_err());
    }

    #[test]
    fn scale_examples() {
        assert!((fit_scale(&[2.0, 4.0], &[1.0, 2.0]).unwrap().c - 2.0).abs() < 1e-12);
        assert!((fit_scale(&[0.3, 0.7], &[0.3, 0.7]).unwrap().c - 1.0).abs() < 1e-12);
        assert!((fit_scale(&[1.0, 0.0], &[1.0, 1.0]).unwrap().c - 0.5).abs() < 1e-12);
        assert!(fit_scale(&[1.0, 2.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn ground_truth_scale_examples() {
        let (w, h) = (6, 5);
        let a = Map::from_fn(w, h, 3, |c, y, x| 0.2 + 0.1 * ((c + x + y) % 5) as f32);
        let s = Map::from_fn(w, h, 1, |_, y, x| 0.5 + 0.3 * (x as f32) + 0.1 * y as f32);
        let img = LinearImage::new(a.mul_broadcast(&s).unwrap()).unwrap();
        let d = s.map(|v| inverse_of(v as f64) as f32);
        let albedo = AlbedoMap::new(a.clone()).unwrap();
        let fixed = fix_ground_truth_scale(&albedo, &d, &img).unwrap();
        assert!((fixed.c - 1.0).abs() < 1e-5);
        for (x, y) in fixed.inverse.data().iter().zip(d.data()) {
            assert!((x - y).abs() < 1e-4);
        }
        let half = AlbedoMap::new(a.map(|v| v * 0.5)).unwrap();
        let fixed = fix_ground_truth_scale(&half, &d, &img).unwrap();
        assert!((fixed.c - 2.0).abs() < 1e-5);
    }

    #[test]
    fn mean_matching() {
        let low = Map::filled(2, 2, 1, 0.4);
        let high = Map::from_fn(2, 2, 1, |_, y, x| 0.1 + 0.1 * (x + 2 * y) as f32);
        let m = match_mean(&high, &low).unwrap();
        assert!((m.mean() - 0.4).abs() < 1e-6);
    }

    fn residual(o: &[f32], d: &[f32], a: f64, b: f64) -> f64 {
        o.iter()
            .zip(d)
            .map(|(&x, &y)| (a * x as f64 + b - y as f64).powi(2))
            .sum()
    }

    proptest! {
        #[test]
        fn affine_fit_beats_random_probes(
            pts in proptest::collection::vec((0.0f32..1.0, 0.0f32..1.0), 3..40),
            probes in proptest::collection::vec((1e-6f64..5.0, -2.0f64..2.0), 20),
        ) {
            let (o, d): (Vec<f32>, Vec<f32>) = pts.into_iter().unzip();
            let f = fit_affine(&o, &d, None).unwrap();
            let best = residual(&o, &d, f.a, f.b);
            for (a, b) in probes {
                prop_assert!(best <= residual(&o, &d, a, b) + 1e-9);
            }
        }

        #[test]
        fn scale_fit_recovers_factor(
            xs in proptest::collection::vec(0.01f32..2.0, 1..40),
            k in 0.01f32..100.0,
        ) {
            let scaled: Vec<f32> = xs.iter().map(|&v| k * v).collect();
            let c = fit_scale(&scaled, &xs).unwrap().c;
            prop_assert!((c - k as f64).abs() <= 1e-5 * k as f64);
        }
    }
}
