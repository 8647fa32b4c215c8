//! Evaluation metrics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{fit_affine, fit_scale};
use crate::image::Map;

fn check_len(a: &[f32], b: &[f32], what: &str) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Invalid(format!(
            "{what}: inputs have {} and {} values",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Least-squares scale aligning `pred` to `gt`; zero when `pred` is all zero.
fn lsq_scale(pred: &[f32], gt: &[f32]) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&p, &g) in pred.iter().zip(gt) {
        num += p as f64 * g as f64;
        den += p as f64 * p as f64;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn scaled_mse(pred: &[f32], gt: &[f32], alpha: f64) -> f64 {
    pred.iter()
        .zip(gt)
        .map(|(&p, &g)| (alpha * p as f64 - g as f64).powi(2))
        .sum::<f64>()
        / pred.len() as f64
}

/// `min_a mean((a * pred - gt)^2)`.
pub fn si_mse(pred: &[f32], gt: &[f32]) -> Result<f64> {
    check_len(pred, gt, "si_mse")?;
    if pred.iter().all(|&p| p == 0.0) {
        return Err(Error::Degenerate("si_mse of an all-zero prediction".into()));
    }
    Ok(scaled_mse(pred, gt, lsq_scale(pred, gt)))
}

pub fn si_rmse(pred: &[f32], gt: &[f32]) -> Result<f64> {
    Ok(si_mse(pred, gt)?.sqrt())
}

/// Local MSE parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmseParams {
    pub window: usize,
    pub stride: usize,
}

impl LmseParams {
    /// Window of `frac` times the smaller image side (at least 2 pixels),
    /// stride of half a window.
    pub fn for_size(width: usize, height: usize, frac: f64) -> Self {
        let window = ((width.min(height) as f64 * frac).round() as usize).max(2);
        Self {
            window,
            stride: (window / 2).max(1),
        }
    }
}

fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    (0..=len - window).step_by(stride).collect()
}

/// Mean over overlapping windows of the window's scale-invariant MSE
/// divided by the window's mean squared ground truth. Windows without
/// ground-truth energy are skipped.
pub fn lmse_with(pred: &Map, gt: &Map, params: LmseParams) -> Result<f64> {
    pred.ensure_dims(gt, "lmse")?;
    if pred.channels() != gt.channels() {
        return Err(Error::Invalid("lmse: channel count mismatch".into()));
    }
    if params.window < 2 || params.stride == 0 {
        return Err(Error::Invalid(format!("lmse: invalid window {params:?}")));
    }
    let (w, h) = pred.dims();
    let (ww, wh) = (params.window.min(w), params.window.min(h));
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut pw = Vec::new();
    let mut gw = Vec::new();
    for y0 in window_starts(h, wh, params.stride) {
        for x0 in window_starts(w, ww, params.stride) {
            pw.clear();
            gw.clear();
            for c in 0..pred.channels() {
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        pw.push(pred.get(c, y, x));
                        gw.push(gt.get(c, y, x));
                    }
                }
            }
            let energy = gw.iter().map(|&g| (g as f64).powi(2)).sum::<f64>() / gw.len() as f64;
            if energy <= 0.0 {
                continue;
            }
            total += scaled_mse(&pw, &gw, lsq_scale(&pw, &gw)) / energy;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("lmse: no window has ground-truth energy".into()));
    }
    Ok(total / count as f64)
}

pub fn lmse(pred: &Map, gt: &Map) -> Result<f64> {
    lmse_with(pred, gt, LmseParams::for_size(gt.width(), gt.height(), 0.1))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// SSIM of two rasters without any alignment, averaged over channels.
/// The Gaussian window shrinks (keeping an odd size) for rasters smaller
/// than 11 pixels.
pub fn ssim_raw(pred: &Map, gt: &Map, data_range: f64) -> Result<f64> {
    pred.ensure_dims(gt, "ssim")?;
    if pred.channels() != gt.channels() {
        return Err(Error::Invalid("ssim: channel count mismatch".into()));
    }
    let (w, h) = gt.dims();
    let mut size = SSIM_WINDOW.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    if size == 0 {
        return Err(Error::Invalid("ssim: empty raster".into()));
    }
    let k = gaussian_kernel(size, SSIM_SIGMA);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut acc = 0.0;
    for c in 0..gt.channels() {
        let x: Vec<f64> = pred.plane(c).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = gt.plane(c).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let (mx, ow, oh) = filter_valid(&x, w, h, &k);
        let (my, _, _) = filter_valid(&y, w, h, &k);
        let (sxx, _, _) = filter_valid(&xx, w, h, &k);
        let (syy, _, _) = filter_valid(&yy, w, h, &k);
        let (sxy, _, _) = filter_valid(&xy, w, h, &k);
        let mut sum = 0.0;
        for i in 0..ow * oh {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        acc += sum / (ow * oh) as f64;
    }
    Ok(acc / gt.channels() as f64)
}

/// SSIM after globally scaling `pred` onto `gt` by least squares, with the
/// dynamic range set to the maximum of `gt`.
pub fn ssim(pred: &Map, gt: &Map) -> Result<f64> {
    pred.ensure_dims(gt, "ssim")?;
    let alpha = fit_scale(gt.data(), pred.data()).map_or(1.0, |f| f.c) as f32;
    let scaled = pred.map(|v| v * alpha);
    let range = gt.max_value() as f64;
    ssim_raw(&scaled, gt, if range > 0.0 { range } else { 1.0 })
}

/// Reconstruction error `si_mse(A * S, I)`.
pub fn recon_mse(albedo: &Map, shading: &Map, image: &Map) -> Result<f64> {
    let r = albedo.mul_broadcast(shading)?;
    r.ensure_dims(image, "recon_mse")?;
    si_mse(r.data(), image.data())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Darker {
    #[serde(rename = "1")]
    First,
    #[serde(rename = "2")]
    Second,
    #[serde(rename = "E")]
    Equal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub darker: Darker,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgmentSet {
    pub pairs: Vec<Judgment>,
}

impl JudgmentSet {
    pub fn validate(&self) -> Result<()> {
        for (i, j) in self.pairs.iter().enumerate() {
            let coords = [j.x1, j.y1, j.x2, j.y2];
            if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Invalid(format!("judgment {i}: coordinates outside [0, 1]")));
            }
            if !(j.weight.is_finite() && j.weight >= 0.0) {
                return Err(Error::Invalid(format!("judgment {i}: invalid weight {}", j.weight)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: JudgmentSet = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, e.to_string()))?;
        set.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(set)
    }
}

pub const WHDR_DELTA: f64 = 0.10;

fn sample(map: &Map, x: f64, y: f64) -> f64 {
    let px = ((x * map.width() as f64) as usize).min(map.width() - 1);
    let py = ((y * map.height() as f64) as usize).min(map.height() - 1);
    (0..map.channels()).map(|c| map.get(c, py, px) as f64).sum::<f64>() / map.channels() as f64
}

/// Predicted judgment for two luminances.
pub fn judge(l1: f64, l2: f64, delta: f64) -> Darker {
    let (a, b) = (l1.max(1e-10), l2.max(1e-10));
    let r = a / b;
    if r.max(1.0 / r) < 1.0 + delta {
        Darker::Equal
    } else if a < b {
        Darker::First
    } else {
        Darker::Second
    }
}

/// Weighted human disagreement rate of an albedo map; luminance is the
/// mean of the colour channels.
pub fn whdr(albedo: &Map, judgments: &JudgmentSet, delta: f64) -> Result<f64> {
    judgments.validate()?;
    let total: f64 = judgments.pairs.iter().map(|j| j.weight).sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("whdr: judgment weights sum to zero".into()));
    }
    let wrong: f64 = judgments
        .pairs
        .iter()
        .filter(|j| {
            judge(sample(albedo, j.x1, j.y1), sample(albedo, j.x2, j.y2), delta) != j.darker
        })
        .map(|j| j.weight)
        .sum();
    Ok(wrong / total)
}

pub const ORD_PAIRS: usize = 50_000;
pub const ORD_TAU: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Relation {
    Less,
    Equal,
    Greater,
}

fn relation(a: f64, b: f64, tau: f64) -> Relation {
    let (a, b) = (a.max(1e-8), b.max(1e-8));
    if a.max(b) / a.min(b) < tau {
        Relation::Equal
    } else if a < b {
        Relation::Less
    } else {
        Relation::Greater
    }
}

/// Pairwise ordering error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrdResult {
    /// Disagreement over all sampled pairs.
    pub error: f64,
    /// Disagreement over pairs whose ground truth is ordered.
    pub error_ordered: Option<f64>,
    /// Disagreement over pairs whose ground truth is equal.
    pub error_equal: Option<f64>,
    pub pairs: usize,
}

/// Ordering disagreement on randomly sampled pixel pairs. The prediction is
/// first aligned to the ground truth by a positive-slope affine fit; both
/// maps are then labelled with the ratio rule (`equal` when the larger value
/// is less than `tau` times the smaller).
pub fn ord_metric(pred: &Map, gt: &Map, pairs: usize, tau: f64, seed: u64) -> Result<OrdResult> {
    pred.ensure_dims(gt, "ord")?;
    if pred.channels() != 1 || gt.channels() != 1 {
        return Err(Error::Invalid("ord: single-channel maps expected".into()));
    }
    let n = gt.pixels();
    if n < 2 || pairs == 0 {
        return Err(Error::Invalid("ord: need at least two pixels and one pair".into()));
    }
    let fit = fit_affine(pred.data(), gt.data(), None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut wrong, mut ordered, mut wrong_ordered, mut wrong_equal) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..pairs {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let gr = relation(gt.data()[i] as f64, gt.data()[j] as f64, tau);
        let pr = relation(fit.apply(pred.data()[i]), fit.apply(pred.data()[j]), tau);
        let bad = gr != pr;
        wrong += bad as usize;
        if gr == Relation::Equal {
            wrong_equal += bad as usize;
        } else {
            ordered += 1;
            wrong_ordered += bad as usize;
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(OrdResult {
        error: wrong as f64 / pairs as f64,
        error_ordered: ratio(wrong_ordered, ordered),
        error_equal: ratio(wrong_equal, pairs - ordered),
        pairs,
    })
}

pub const D3R_THRESHOLD: f64 = 0.05;

/// Disagreement across ground-truth discontinuities between adjacent grid
/// blocks. `value` is `None` when no adjacent pair differs by more than the
/// threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct D3rResult {
    pub value: Option<f64>,
    pub pairs: usize,
    pub cell: usize,
}

pub fn d3r(pred: &Map, gt: &Map, cell: usize, threshold: f64) -> Result<D3rResult> {
    pred.ensure_dims(gt, "d3r")?;
    if pred.channels() != 1 || gt.channels() != 1 || cell == 0 {
        return Err(Error::Invalid("d3r: single-channel maps and a positive cell".into()));
    }
    let (w, h) = gt.dims();
    let (bw, bh) = (w.div_ceil(cell), h.div_ceil(cell));
    let block_means = |m: &Map| -> Vec<f64> {
        let mut sums = vec![0.0f64; bw * bh];
        let mut counts = vec![0usize; bw * bh];
        for y in 0..h {
            for x in 0..w {
                let b = (y / cell) * bw + x / cell;
                sums[b] += m.get(0, y, x) as f64;
                counts[b] += 1;
            }
        }
        sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect()
    };
    let (pm, gm) = (block_means(pred), block_means(gt));
    let (mut pairs, mut wrong) = (0usize, 0usize);
    let mut visit = |a: usize, b: usize| {
        let dg = gm[a] - gm[b];
        if dg.abs() > threshold {
            pairs += 1;
            let dp = pm[a] - pm[b];
            if dp == 0.0 || dp.signum() != dg.signum() {
                wrong += 1;
            }
        }
    };
    for by in 0..bh {
        for bx in 0..bw {
            let i = by * bw + bx;
            if bx + 1 < bw {
                visit(i, i + 1);
            }
            if by + 1 < bh {
                visit(i, i + bw);
            }
        }
    }
    Ok(D3rResult {
        value: (pairs > 0).then(|| wrong as f64 / pairs as f64),
        pairs,
        cell,
    })
}

/// Named metric values plus the parameters that produced them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, Option<f64>>,
    pub params: serde_json::Map<String, serde_json::Value>,
}

impl MetricReport {
    pub fn set(&mut self, name: impl Into<String>, value: Option<f64>) {
        self.values.insert(name.into(), value);
    }

    pub fn param(&mut self, name: impl Into<String>, value: impl Serialize) {
        self.params
            .insert(name.into(), serde_json::to_value(value).expect("serialisable parameter"));
    }
}
