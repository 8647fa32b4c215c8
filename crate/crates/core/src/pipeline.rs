//! Two-resolution inference: resolution planning, ordinal estimation at the
//! base and planned resolutions, and the final decomposition.

use std::path::Path;

use iid_tensor::{avg_pool2_tensor, resize_tensor, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::match_mean;
use crate::image::{
    save_preview_png, write_pfm, AlbedoMap, InverseShading, LinearImage, Map, OrdinalEstimate,
    OrdinalTag, ShadingMap,
};
use crate::networks::{InputConfig, NetKind, UNet};
use crate::shading::split_image;

pub const EDGE_THRESHOLD: f32 = 0.05;
pub const MIN_EDGE_PIXELS: usize = 10;
pub const DEFAULT_CAP: usize = 384;
pub const DEFAULT_BASE_RES: usize = 32;

/// Working resolutions, each given as the length of the longer side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionPlan {
    pub base_res: usize,
    pub high_res: usize,
    pub cap: usize,
    /// Window size used by the edge test.
    pub rf: usize,
    pub input_dims: (usize, usize),
    pub base_dims: (usize, usize),
    pub high_dims: (usize, usize),
}

/// `(width, height)` with the longer side equal to `long`, aspect preserved.
pub fn dims_for(width: usize, height: usize, long: usize) -> (usize, usize) {
    let scale = |short: usize, l: usize| ((short as f64 * long as f64 / l as f64).round() as usize).max(1);
    if width >= height {
        (long, scale(height, width))
    } else {
        (scale(width, height), long)
    }
}

/// Resize with box pre-filtering: halve by 2x2 averaging while the target
/// is at most half the current size, then finish bilinearly.
pub fn resample(map: &Map, width: usize, height: usize) -> Result<Map> {
    let mut t = map.to_tensor();
    loop {
        let [_, _, h, w] = t.shape();
        if w < 2 * width || h < 2 * height {
            break;
        }
        t = avg_pool2_tensor(&t)?;
    }
    Map::from_tensor(&resize_tensor(&t, height, width)?, 0)
}

/// Sobel gradient magnitude of a single-channel raster with replicated
/// borders; both kernels are normalised by 1/8.
pub fn sobel_magnitude(lum: &Map) -> Map {
    let (w, h) = lum.dims();
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        lum.get(0, y, x)
    };
    Map::from_fn(w, h, 1, |_, y, x| {
        let (y, x) = (y as isize, x as isize);
        let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
            - at(y - 1, x - 1)
            - 2.0 * at(y, x - 1)
            - at(y + 1, x - 1))
            / 8.0;
        let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
            - at(y - 1, x - 1)
            - 2.0 * at(y - 1, x)
            - at(y - 1, x + 1))
            / 8.0;
        (gx * gx + gy * gy).sqrt()
    })
}

pub fn edge_mask(image: &Map) -> Vec<bool> {
    sobel_magnitude(&image.luminance())
        .data()
        .iter()
        .map(|&m| m > EDGE_THRESHOLD)
        .collect()
}

/// Window origins along one axis: stride `stride`, with a final window
/// flush against the far edge. A window wider than the axis covers it.
pub fn window_origins(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let last = len - window;
    let mut v: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if *v.last().unwrap() != last {
        v.push(last);
    }
    v
}

/// Every `rf x rf` window holds at least [`MIN_EDGE_PIXELS`] edge pixels.
pub fn edges_everywhere(mask: &[bool], width: usize, height: usize, rf: usize) -> bool {
    // Summed-area table with a zero border.
    let mut sat = vec![0u32; (width + 1) * (height + 1)];
    for y in 0..height {
        let mut row = 0u32;
        for x in 0..width {
            row += mask[y * width + x] as u32;
            sat[(y + 1) * (width + 1) + x + 1] = sat[y * (width + 1) + x + 1] + row;
        }
    }
    let (ww, wh) = (rf.min(width), rf.min(height));
    let stride = (rf / 2).max(1);
    let s = |y: usize, x: usize| sat[y * (width + 1) + x];
    window_origins(height, wh, stride).into_iter().all(|y0| {
        window_origins(width, ww, stride).into_iter().all(|x0| {
            let n = s(y0 + wh, x0 + ww) + s(y0, x0) - s(y0, x0 + ww) - s(y0 + wh, x0);
            n as usize >= MIN_EDGE_PIXELS
        })
    })
}

/// Candidate long sides, largest first: from the cap down in steps of
/// `rf / 2`, all strictly above `base_res`.
pub fn candidate_sizes(base_res: usize, cap: usize, rf: usize) -> Vec<usize> {
    let step = (rf / 2).max(1);
    let mut v = Vec::new();
    let mut r = cap;
    while r > base_res {
        v.push(r);
        if r < step {
            break;
        }
        r -= step;
    }
    v
}

/// Largest resolution at which every receptive-field-sized window of the
/// image contains strong edges. The search never exceeds `cap` nor the
/// image's own long side, and falls back to `base_res`.
pub fn compute_r0(image: &LinearImage, rf: usize, base_res: usize, cap: usize) -> Result<ResolutionPlan> {
    if rf == 0 || base_res == 0 {
        return Err(Error::Invalid("resolution planning needs rf > 0 and base_res > 0".into()));
    }
    let (w, h) = image.dims();
    let cap = cap.max(base_res);
    let limit = cap.min(w.max(h)).max(base_res);
    let mut high = base_res;
    for r in candidate_sizes(base_res, limit, rf) {
        let (cw, ch) = dims_for(w, h, r);
        let resized = resample(image, cw, ch)?;
        if edges_everywhere(&edge_mask(&resized), cw, ch, rf) {
            high = r;
            break;
        }
    }
    Ok(ResolutionPlan {
        base_res,
        high_res: high,
        cap,
        rf,
        input_dims: (w, h),
        base_dims: dims_for(w, h, base_res),
        high_dims: dims_for(w, h, high),
    })
}

/// Network view of an image: scaled so that its mean is 0.5.
pub fn normalize_exposure(image: &Map) -> Map {
    let m = image.mean();
    if m > 0.0 {
        let k = (0.5 / m) as f32;
        image.map(|v| v * k)
    } else {
        image.clone()
    }
}

/// Ordinal estimate of an image at its current size.
pub fn run_ordinal(net: &UNet, image: &Map, tag: OrdinalTag) -> Result<OrdinalEstimate> {
    if net.spec.kind != NetKind::Ordinal {
        return Err(Error::Invalid("expected an ordinal network".into()));
    }
    let y = net.predict(&normalize_exposure(image).to_tensor())?;
    OrdinalEstimate::new(Map::from_tensor(&y, 0)?, tag)
}

/// Affine map `(k, m)` taking `o_low` to zero mean and unit deviation; `k`
/// is 0 for a constant map.
fn standardizer(o_low: &Map) -> (f64, f64) {
    let n = o_low.data().len() as f64;
    let mean = o_low.mean();
    let var = o_low.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (if sd > 1e-12 { 1.0 / sd } else { 0.0 }, mean)
}

/// Decomposition-network input: exposure-normalised RGB followed by the
/// ordinal channels selected by `config`. Ordinal estimates only carry
/// information up to an increasing affine map, so both are passed through
/// the one map that standardizes `O_L`; their relative scale is kept.
pub fn assemble_input(image: &Map, o_low: &Map, o_high: &Map, config: InputConfig) -> Result<Tensor> {
    image.ensure_dims(o_low, "decomposition input")?;
    image.ensure_dims(o_high, "decomposition input")?;
    let (w, h) = image.dims();
    let n = w * h;
    let (k, m) = standardizer(o_low);
    let standardized = |o: &Map| -> Vec<f32> { o.data().iter().map(|&v| ((v as f64 - m) * k) as f32).collect() };
    let mut data = Vec::with_capacity(config.channels() * n);
    data.extend_from_slice(normalize_exposure(image).data());
    if config.uses_low() {
        data.extend(standardized(o_low));
    }
    if config.uses_high() {
        data.extend(standardized(o_high));
    }
    Ok(Tensor::new([1, config.channels(), h, w], data)?)
}

/// Ordinal inputs for a working-resolution image: `O_L` from a
/// `base_dims` copy upsampled back, and `O_H` at the working size rescaled
/// to the mean of `O_L`.
pub fn ordinal_inputs(net: &UNet, image: &Map, base_dims: (usize, usize)) -> Result<(OrdinalEstimate, OrdinalEstimate)> {
    let (w, h) = image.dims();
    let small = resample(image, base_dims.0, base_dims.1)?;
    let low = run_ordinal(net, &small, OrdinalTag::LowRes)?;
    let low_up = low.resize(w, h)?;
    let high = run_ordinal(net, image, OrdinalTag::HighRes)?;
    let high = match_mean(&high, &low_up)?;
    Ok((
        OrdinalEstimate::new(low_up, OrdinalTag::LowRes)?,
        OrdinalEstimate::new(high, OrdinalTag::HighRes)?,
    ))
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub plan: ResolutionPlan,
    /// Input resized to the working resolution.
    pub image: LinearImage,
    pub inverse: InverseShading,
    pub shading: ShadingMap,
    pub albedo: AlbedoMap,
    /// Low-resolution ordinal estimate upsampled to the working resolution.
    pub ordinal_low: OrdinalEstimate,
    pub ordinal_high: OrdinalEstimate,
}

/// Decompose a working-resolution image with precomputed ordinal inputs.
pub fn decompose_with(image: &LinearImage, o_low: &Map, o_high: &Map, decomp: &UNet) -> Result<(InverseShading, ShadingMap, AlbedoMap)> {
    let config = match (decomp.spec.kind, decomp.spec.inputs) {
        (NetKind::Decomposition, Some(c)) => c,
        _ => return Err(Error::Invalid("expected a decomposition network".into())),
    };
    let d = decomp.predict(&assemble_input(image, o_low, o_high, config)?)?;
    let d = InverseShading::new(Map::from_tensor(&d, 0)?)?;
    let (s, a) = split_image(image, &d)?;
    Ok((d, s, a))
}

/// Plan the working resolution, estimate ordinal shading at both
/// resolutions and decompose.
pub fn decompose(image: &LinearImage, ordinal: &UNet, decomp: &UNet, base_res: usize, cap: usize) -> Result<Decomposition> {
    let plan = compute_r0(image, base_res, base_res, cap)?;
    let (hw, hh) = plan.high_dims;
    let working = LinearImage::new(resample(image, hw, hh)?.map(|v| v.max(0.0)))?;
    let (low, high) = ordinal_inputs(ordinal, &working, plan.base_dims)?;
    let (inverse, shading, albedo) = decompose_with(&working, &low, &high, decomp)?;
    Ok(Decomposition {
        plan,
        image: working,
        inverse,
        shading,
        albedo,
        ordinal_low: low,
        ordinal_high: high,
    })
}

/// Scale so that the 99th percentile maps to one, for display only.
fn display_scale(map: &Map) -> Map {
    let mut v = map.data().to_vec();
    v.sort_by(f32::total_cmp);
    let p = v[((v.len() - 1) as f64 * 0.99) as usize];
    if p > 0.0 {
        map.map(|x| x / p)
    } else {
        map.clone()
    }
}

pub const OUTPUT_FILES: [&str; 12] = [
    "input.pfm",
    "inv_shading.pfm",
    "shading.pfm",
    "albedo.pfm",
    "ordinal_low.pfm",
    "ordinal_high.pfm",
    "preview_input.png",
    "preview_shading.png",
    "preview_albedo.png",
    "preview_ordinal_low.png",
    "preview_ordinal_high.png",
    "plan.json",
];

/// Write the decomposition into `dir`, which must exist.
pub fn write_outputs(dec: &Decomposition, dir: &Path) -> Result<()> {
    write_pfm(&dec.image, dir.join("input.pfm"))?;
    write_pfm(&dec.inverse, dir.join("inv_shading.pfm"))?;
    write_pfm(&dec.shading, dir.join("shading.pfm"))?;
    write_pfm(&dec.albedo, dir.join("albedo.pfm"))?;
    write_pfm(&dec.ordinal_low, dir.join("ordinal_low.pfm"))?;
    write_pfm(&dec.ordinal_high, dir.join("ordinal_high.pfm"))?;
    save_preview_png(&display_scale(&dec.image), dir.join("preview_input.png"))?;
    save_preview_png(&display_scale(&dec.shading), dir.join("preview_shading.png"))?;
    save_preview_png(&display_scale(&dec.albedo), dir.join("preview_albedo.png"))?;
    save_preview_png(&display_scale(&dec.ordinal_low), dir.join("preview_ordinal_low.png"))?;
    save_preview_png(&display_scale(&dec.ordinal_high), dir.join("preview_ordinal_high.png"))?;
    let path = dir.join("plan.json");
    std::fs::write(&path, serde_json::to_string_pretty(&dec.plan)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::recon_mse;
    use crate::networks::UNetSpec;

    fn checker(w: usize, h: usize, cell: usize) -> LinearImage {
        LinearImage::new(Map::from_fn(w, h, 3, |_, y, x| {
            if (x / cell + y / cell) % 2 == 0 { 0.8 } else { 0.1 }
        }))
        .unwrap()
    }

    #[test]
    fn dims_preserve_aspect() {
        assert_eq!(dims_for(200, 100, 64), (64, 32));
        assert_eq!(dims_for(100, 300, 60), (20, 60));
        assert_eq!(dims_for(1000, 1, 10), (10, 1));
    }

    #[test]
    fn sobel_of_a_ramp() {
        let ramp = Map::from_fn(6, 5, 1, |_, _, x| 0.1 * x as f32);
        let m = sobel_magnitude(&ramp);
        // Interior: (0.2 + 0.4 + 0.2) / 8 = 0.1 horizontally, nothing vertically.
        assert!((m.get(0, 2, 2) - 0.1).abs() < 1e-6);
        // Replicated border halves the horizontal difference.
        assert!((m.get(0, 2, 0) - 0.05).abs() < 1e-6);
    }

    #[test]
    fn uniform_image_falls_back_to_base() {
        let img = LinearImage::new(Map::filled(100, 80, 3, 0.4)).unwrap();
        let plan = compute_r0(&img, 16, 16, 96).unwrap();
        assert_eq!(plan.high_res, 16);
        assert_eq!(plan.base_dims, (16, 13));
    }

    #[test]
    fn dense_checkerboard_reaches_the_cap() {
        let plan = compute_r0(&checker(96, 96, 2), 16, 16, 96).unwrap();
        assert_eq!(plan.high_res, 96);
        assert_eq!(plan.high_dims, (96, 96));
    }

    #[test]
    fn blank_quadrant_lands_in_between() {
        let img = LinearImage::new(Map::from_fn(128, 128, 3, |_, y, x| {
            if x < 64 && y < 64 {
                0.5
            } else if (x / 8 + y / 8) % 2 == 0 {
                0.8
            } else {
                0.1
            }
        }))
        .unwrap();
        let plan = compute_r0(&img, 16, 16, 128).unwrap();
        assert!(plan.high_res > 16 && plan.high_res < 128, "{plan:?}");
    }

    #[test]
    fn candidates_step_by_half_window() {
        assert_eq!(candidate_sizes(32, 64, 16), vec![64, 56, 48, 40]);
        assert_eq!(candidate_sizes(32, 32, 16), Vec::<usize>::new());
        assert_eq!(window_origins(10, 4, 2), vec![0, 2, 4, 6]);
        assert_eq!(window_origins(11, 4, 2), vec![0, 2, 4, 6, 7]);
        assert_eq!(window_origins(3, 4, 2), vec![0]);
    }

    #[test]
    fn decomposition_reconstructs_the_input() {
        let ord = UNet::init(UNetSpec::ordinal(4), 1).unwrap();
        let dec = UNet::init(UNetSpec::decomposition(4, InputConfig::All), 2).unwrap();
        let img = LinearImage::new(Map::from_fn(40, 30, 3, |c, y, x| {
            0.05 + ((x * 7 + y * 3 + c * 5) % 11) as f32 * 0.1
        }))
        .unwrap();
        let out = decompose(&img, &ord, &dec, 16, 64).unwrap();
        assert_eq!(out.albedo.dims(), out.plan.high_dims);
        assert!(recon_mse(&out.albedo, &out.shading, &out.image).unwrap() <= 1e-10);
        for o in [&out.ordinal_low, &out.ordinal_high] {
            assert!(o.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let again = decompose(&img, &ord, &dec, 16, 64).unwrap();
        assert_eq!(again.inverse, out.inverse);
    }

    #[test]
    fn mean_matching_of_the_high_estimate() {
        let ord = UNet::init(UNetSpec::ordinal(4), 5).unwrap();
        let img = checker(32, 32, 3);
        let (low, high) = ordinal_inputs(&ord, &img, (16, 16)).unwrap();
        assert!((low.mean() - high.mean()).abs() < 1e-3);
    }

    #[test]
    fn outputs_are_written() {
        let ord = UNet::init(UNetSpec::ordinal(4), 1).unwrap();
        let dec = UNet::init(UNetSpec::decomposition(4, InputConfig::Rgb), 2).unwrap();
        let out = decompose(&checker(24, 20, 4), &ord, &dec, 16, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&out, dir.path()).unwrap();
        for f in OUTPUT_FILES {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
    }

    #[test]
    fn ordinal_channels_are_standardized() {
        let img = checker(8, 6, 2);
        let low = Map::from_fn(8, 6, 1, |_, y, x| 0.04 + 0.002 * (x + 3 * y) as f32);
        let high = Map::from_fn(8, 6, 1, |_, y, x| 0.05 + 0.001 * (x * y) as f32);
        let t = assemble_input(&img, &low, &high, InputConfig::All).unwrap();
        let plane = |c: usize| t.plane(0, c).iter().map(|&v| v as f64).collect::<Vec<_>>();
        let o = plane(3);
        let mean = o.iter().sum::<f64>() / o.len() as f64;
        let var = o.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / o.len() as f64;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
        let constant = Map::filled(8, 6, 1, 0.3);
        let t = assemble_input(&img, &constant, &high, InputConfig::All).unwrap();
        assert!(t.plane(0, 3).iter().chain(t.plane(0, 4)).all(|&v| v == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn input_is_invariant_to_affine_maps_of_the_ordinal_pair(
            vals in proptest::collection::vec(0.01f32..0.99, 2 * 48),
            a in 0.05f32..20.0,
            b in -2.0f32..2.0,
        ) {
            let img = checker(8, 6, 2);
            let low = Map::new(8, 6, 1, vals[..48].to_vec()).unwrap();
            let high = Map::new(8, 6, 1, vals[48..].to_vec()).unwrap();
            let t0 = assemble_input(&img, &low, &high, InputConfig::All).unwrap();
            let t1 = assemble_input(&img, &low.map(|v| a * v + b), &high.map(|v| a * v + b), InputConfig::All).unwrap();
            proptest::prop_assert!(t0.max_abs_diff(&t1) < 1e-3);
        }
    }
}
