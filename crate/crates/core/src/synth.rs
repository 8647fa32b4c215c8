//! Procedural scenes with exact intrinsic ground truth.
//!
//! Geometry is a heightfield of Gaussian bumps over a plane, seen
//! orthographically from `+z`. Pixel coordinates are centred: column `x` of
//! a `w`-wide raster sits at `(2x + 1 - w) / 2w`, so mirrored pixels have
//! exactly negated coordinates. Shading is
//! `(ambient + sum_l max(0, n.l) * i_l + specular) * attenuation`, where the
//! attenuation is the product of the half-plane shadows covering a pixel.
//!
//! Albedo is stored on a grid of `2^-12` and shading with 12 significant
//! bits, so `A * S` is exact in `f32` and `I / S` recovers `A` bitwise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_pfm, write_pfm, AlbedoMap, LinearImage, Map, ShadingMap};

pub const ALBEDO_RANGE: (f32, f32) = (0.1, 0.9);
pub const AMBIENT_RANGE: (f64, f64) = (0.1, 0.3);
pub const ATTENUATION_RANGE: (f64, f64) = (0.05, 0.3);
pub const MAX_SPECULAR_STRENGTH: f64 = 4.0;
pub const N_ILLUMINATIONS: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    None,
    /// Squares of side `1 / freq` alternating with `second`.
    Checker { freq: f64, second: [f32; 3] },
    /// Bands of width `1 / (2 freq)` across direction `angle`.
    Stripes { freq: f64, angle: f64, second: [f32; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: [f32; 3],
    pub texture: Texture,
}

/// Height bump `amplitude * exp(-r^2 / (2 sigma^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

/// Directional light; `dir` points from the surface towards the light.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub dir: [f64; 3],
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Specular {
    pub exponent: f64,
    pub strength: f64,
}

/// Pixels with `nx * x + ny * y > offset` are multiplied by `attenuation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub nx: f64,
    pub ny: f64,
    pub offset: f64,
    pub attenuation: f64,
}

/// Illumination of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub lights: Vec<Light>,
    pub ambient: f64,
    pub occluders: Vec<Occluder>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub background: [f32; 3],
    pub shapes: Vec<Shape>,
    pub blobs: Vec<Blob>,
    pub lighting: Lighting,
    pub specular: Option<Specular>,
}

/// Options for randomly sampled scenes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub specular: bool,
    /// Clip the rendered image to `[0, 1]`.
    pub ldr: bool,
    pub multi_illum: bool,
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [(); 3].map(|_| rng.gen_range(ALBEDO_RANGE.0..=ALBEDO_RANGE.1))
}

/// With `key`, the first light carries most of the intensity and sits at
/// least 55 degrees off the view axis, which keeps its highlight well above
/// the diffuse level.
fn sample_lighting(rng: &mut ChaCha8Rng, key: bool) -> Lighting {
    let n_lights = rng.gen_range(1..=3);
    let total = if key { rng.gen_range(0.9..1.3) } else { rng.gen_range(0.6..1.0) };
    let weights: Vec<f64> = (0..n_lights)
        .map(|i| match (key, i) {
            (true, 0) => rng.gen_range(0.85..1.0),
            (true, _) => rng.gen_range(0.0..0.075),
            _ => rng.gen_range(0.2..1.0),
        })
        .collect();
    let wsum: f64 = weights.iter().sum();
    let lights = weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let (lo, hi) = if key && i == 0 { (55.0, 75.0) } else { (15.0, 60.0) };
            let zenith = rng.gen_range(lo..hi as f64).to_radians();
            let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
            Light {
                dir: [
                    zenith.sin() * azimuth.cos(),
                    zenith.sin() * azimuth.sin(),
                    zenith.cos(),
                ],
                intensity: total * w / wsum,
            }
        })
        .collect();
    let ambient = rng.gen_range(AMBIENT_RANGE.0..=AMBIENT_RANGE.1);
    let occluders = (0..rng.gen_range(0..=2))
        .map(|_| {
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            Occluder {
                nx: phi.cos(),
                ny: phi.sin(),
                offset: rng.gen_range(-0.1..0.45),
                attenuation: rng.gen_range(ATTENUATION_RANGE.0..=ATTENUATION_RANGE.1),
            }
        })
        .collect();
    Lighting {
        lights,
        ambient,
        occluders,
    }
}

impl SceneSpec {
    /// Sample a scene: 3 to 12 textured shapes, 2 to 5 bumps, 1 to 3
    /// lights and up to 2 shadows.
    pub fn random(seed: u64, width: usize, height: usize, specular: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let background = color(&mut rng);
        let shapes = (0..rng.gen_range(3..=12))
            .map(|_| {
                let (cx, cy) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
                let kind = if rng.gen_bool(0.5) {
                    ShapeKind::Disk {
                        cx,
                        cy,
                        r: rng.gen_range(0.05..0.3),
                    }
                } else {
                    ShapeKind::Rect {
                        cx,
                        cy,
                        hw: rng.gen_range(0.05..0.3),
                        hh: rng.gen_range(0.05..0.3),
                    }
                };
                let c = color(&mut rng);
                let texture = match rng.gen_range(0..3) {
                    0 => Texture::None,
                    1 => Texture::Checker {
                        freq: rng.gen_range(3.0..12.0),
                        second: color(&mut rng),
                    },
                    _ => Texture::Stripes {
                        freq: rng.gen_range(3.0..12.0),
                        angle: rng.gen_range(0.0..std::f64::consts::PI),
                        second: color(&mut rng),
                    },
                };
                Shape {
                    kind,
                    color: c,
                    texture,
                }
            })
            .collect();
        let blobs = (0..rng.gen_range(2..=5))
            .map(|_| {
                let sigma = rng.gen_range(0.08..0.25);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                Blob {
                    cx: rng.gen_range(-0.4..0.4),
                    cy: rng.gen_range(-0.4..0.4),
                    sigma,
                    amplitude: sign * rng.gen_range(0.8..2.0) * sigma,
                }
            })
            .collect();
        let lighting = sample_lighting(&mut rng, specular);
        let specular = specular.then(|| Specular {
            exponent: rng.gen_range(10f64.ln()..=100f64.ln()).exp(),
            strength: rng.gen_range(3.5..=MAX_SPECULAR_STRENGTH),
        });
        Self {
            seed,
            width,
            height,
            background,
            shapes,
            blobs,
            lighting,
            specular,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("scene spec: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("empty raster".into());
        }
        if self.shapes.len() > 12 {
            return bad(format!("{} shapes (at most 12)", self.shapes.len()));
        }
        let in_range = |c: &[f32; 3]| c.iter().all(|v| (ALBEDO_RANGE.0..=ALBEDO_RANGE.1).contains(v));
        let colors_ok = in_range(&self.background)
            && self.shapes.iter().all(|s| {
                in_range(&s.color)
                    && match &s.texture {
                        Texture::None => true,
                        Texture::Checker { second, .. } | Texture::Stripes { second, .. } => {
                            in_range(second)
                        }
                    }
            });
        if !colors_ok {
            return bad("albedo outside [0.1, 0.9]".into());
        }
        let l = &self.lighting;
        if !(1..=3).contains(&l.lights.len()) {
            return bad(format!("{} lights (1 to 3)", l.lights.len()));
        }
        for light in &l.lights {
            let norm = light.dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 || !(light.intensity >= 0.0) {
                return bad("lights need unit directions and non-negative intensity".into());
            }
        }
        if !(l.ambient > 0.0 && l.ambient.is_finite()) {
            return bad("ambient must be positive".into());
        }
        if l.occluders.len() > 2
            || l.occluders.iter().any(|o| !(o.attenuation > 0.0 && o.attenuation <= 1.0))
        {
            return bad("at most 2 occluders with attenuation in (0, 1]".into());
        }
        if let Some(s) = &self.specular {
            if !(s.exponent > 0.0 && (0.0..=MAX_SPECULAR_STRENGTH).contains(&s.strength)) {
                return bad("specular exponent must be positive and strength at most 4".into());
            }
        }
        if self.blobs.iter().any(|b| !(b.sigma > 0.0)) {
            return bad("bump widths must be positive".into());
        }
        Ok(())
    }
}

/// Rendered scene with its ground truth. `image == albedo * shading`
/// bitwise unless the image was clipped.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: LinearImage,
    pub albedo: AlbedoMap,
    pub shading: ShadingMap,
    pub normals: Map,
}

fn quantize_albedo(v: f32) -> f32 {
    (v * 4096.0).round() / 4096.0
}

fn quantize_shading(v: f32) -> f32 {
    f32::from_bits((v.to_bits() + 0x800) & !0xfff)
}

fn coord(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 + 1.0 - n as f64) / (2.0 * n as f64)
}

fn albedo_at(spec: &SceneSpec, x: f64, y: f64) -> [f32; 3] {
    let mut out = spec.background;
    for s in &spec.shapes {
        let (inside, ox, oy) = match s.kind {
            ShapeKind::Disk { cx, cy, r } => ((x - cx).powi(2) + (y - cy).powi(2) <= r * r, cx, cy),
            ShapeKind::Rect { cx, cy, hw, hh } => ((x - cx).abs() <= hw && (y - cy).abs() <= hh, cx, cy),
        };
        if !inside {
            continue;
        }
        out = match s.texture {
            Texture::None => s.color,
            Texture::Checker { freq, second } => {
                let i = ((x - ox) * freq).floor() as i64 + ((y - oy) * freq).floor() as i64;
                if i.rem_euclid(2) == 0 { s.color } else { second }
            }
            Texture::Stripes { freq, angle, second } => {
                let t = ((x - ox) * angle.cos() + (y - oy) * angle.sin()) * freq;
                if (t.floor() as i64).rem_euclid(2) == 0 { s.color } else { second }
            }
        };
    }
    out
}

fn normal_at(blobs: &[Blob], x: f64, y: f64) -> [f64; 3] {
    let (mut gx, mut gy) = (0.0, 0.0);
    for b in blobs {
        let (dx, dy) = (x - b.cx, y - b.cy);
        let s2 = b.sigma * b.sigma;
        let h = b.amplitude * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
        gx -= h * dx / s2;
        gy -= h * dy / s2;
    }
    let n = [-gx, -gy, 1.0];
    let len = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
    [n[0] / len, n[1] / len, n[2] / len]
}

fn shading_at(lighting: &Lighting, specular: Option<&Specular>, n: [f64; 3], x: f64, y: f64) -> f64 {
    let mut s = lighting.ambient;
    for l in &lighting.lights {
        let ndl = n[0] * l.dir[0] + n[1] * l.dir[1] + n[2] * l.dir[2];
        if ndl <= 0.0 {
            continue;
        }
        s += ndl * l.intensity;
        if let Some(sp) = specular {
            // Reflection of the light about n, seen from +z.
            let rz = 2.0 * ndl * n[2] - l.dir[2];
            if rz > 0.0 {
                s += sp.strength * l.intensity * rz.powf(sp.exponent);
            }
        }
    }
    for o in &lighting.occluders {
        if o.nx * x + o.ny * y > o.offset {
            s *= o.attenuation;
        }
    }
    s
}

fn render_with(spec: &SceneSpec, lighting: &Lighting, albedo: &Map, normals: &Map, ldr: bool) -> Result<Scene> {
    let (w, h) = (spec.width, spec.height);
    let shading = Map::from_fn(w, h, 1, |_, y, x| {
        let n = [normals.get(0, y, x) as f64, normals.get(1, y, x) as f64, normals.get(2, y, x) as f64];
        quantize_shading(shading_at(lighting, spec.specular.as_ref(), n, coord(x, w), coord(y, h)) as f32)
    });
    let mut image = albedo.mul_broadcast(&shading)?;
    if ldr {
        image = image.map(|v| v.min(1.0));
    }
    Ok(Scene {
        image: LinearImage::new(image)?,
        albedo: AlbedoMap::new(albedo.clone())?,
        shading: ShadingMap::new(shading)?,
        normals: normals.clone(),
    })
}

fn geometry(spec: &SceneSpec) -> (Map, Map) {
    let (w, h) = (spec.width, spec.height);
    let mut albedo = Map::filled(w, h, 3, 0.0);
    let mut normals = Map::filled(w, h, 3, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (coord(x, w), coord(y, h));
            let a = albedo_at(spec, px, py);
            let n = normal_at(&spec.blobs, px, py);
            for c in 0..3 {
                albedo.set(c, y, x, quantize_albedo(a[c]));
                normals.set(c, y, x, n[c] as f32);
            }
        }
    }
    (albedo, normals)
}

/// Render a scene; `ldr` clips the image to `[0, 1]`.
pub fn generate(spec: &SceneSpec, ldr: bool) -> Result<Scene> {
    spec.validate()?;
    let (albedo, normals) = geometry(spec);
    render_with(spec, &spec.lighting, &albedo, &normals, ldr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiIllumSpec {
    pub base: SceneSpec,
    pub n_illuminations: usize,
    pub light_seed: u64,
}

impl MultiIllumSpec {
    pub fn new(base: SceneSpec, light_seed: u64) -> Self {
        Self {
            base,
            n_illuminations: N_ILLUMINATIONS,
            light_seed,
        }
    }

    /// Lighting of illumination `k`; lights, ambient and shadows are
    /// resampled per illumination.
    pub fn lighting(&self, k: usize) -> Lighting {
        let mut rng = ChaCha8Rng::seed_from_u64(self.light_seed);
        rng.set_stream(k as u64);
        sample_lighting(&mut rng, self.base.specular.is_some())
    }
}

#[derive(Clone, Debug)]
pub struct Render {
    pub image: LinearImage,
    pub shading: ShadingMap,
}

/// One albedo and geometry under several illuminations.
#[derive(Clone, Debug)]
pub struct MultiScene {
    pub albedo: AlbedoMap,
    pub normals: Map,
    pub renders: Vec<Render>,
}

pub fn generate_multi(spec: &MultiIllumSpec, ldr: bool) -> Result<MultiScene> {
    spec.base.validate()?;
    if spec.n_illuminations == 0 {
        return Err(Error::Invalid("multi-illumination scene needs illuminations".into()));
    }
    let (albedo, normals) = geometry(&spec.base);
    let renders = (0..spec.n_illuminations)
        .map(|k| {
            let s = render_with(&spec.base, &spec.lighting(k), &albedo, &normals, ldr)?;
            Ok(Render {
                image: s.image,
                shading: s.shading,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiScene {
        albedo: AlbedoMap::new(albedo)?,
        normals,
        renders,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// Scenes are assigned 8/1/1 out of every 10 consecutive indices.
    pub fn of_index(i: usize) -> Self {
        match i % 10 {
            8 => Split::Val,
            9 => Split::Test,
            _ => Split::Train,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

pub fn scene_id(i: usize) -> String {
    format!("scene_{i:05}")
}

pub fn illumination_dir(k: usize) -> String {
    format!("dir_{k:02}")
}

/// Seed of scene `i` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng.gen()
}

fn write_scene_files(dir: &Path, spec_json: &serde_json::Value, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pfm(&scene.image, dir.join("image.pfm"))?;
    write_pfm(&scene.albedo, dir.join("albedo.pfm"))?;
    write_pfm(&scene.shading, dir.join("shading.pfm"))?;
    write_pfm(&scene.normals, dir.join("normals.pfm"))?;
    let path = dir.join("scene.json");
    let text = serde_json::to_string_pretty(spec_json)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Write `n` scenes under `out/<split>/<scene_id>/`. Multi-illumination
/// scenes add `dir_00` .. `dir_24`, each with `image.pfm` and `shading.pfm`;
/// the top-level image and shading are those of `dir_00`.
pub fn write_dataset(out: &Path, n: usize, width: usize, height: usize, seed: u64, opts: SynthOptions) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::with_capacity(n);
    for i in 0..n {
        let dir = out.join(Split::of_index(i).name()).join(scene_id(i));
        let spec = SceneSpec::random(scene_seed(seed, i), width, height, opts.specular);
        if opts.multi_illum {
            let multi = MultiIllumSpec::new(spec, scene_seed(seed ^ 0x5eed_1111, i));
            let ms = generate_multi(&multi, opts.ldr)?;
            let first = Scene {
                image: ms.renders[0].image.clone(),
                albedo: ms.albedo.clone(),
                shading: ms.renders[0].shading.clone(),
                normals: ms.normals.clone(),
            };
            write_scene_files(&dir, &serde_json::to_value(&multi)?, &first)?;
            for (k, r) in ms.renders.iter().enumerate() {
                let sub = dir.join(illumination_dir(k));
                std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                write_pfm(&r.image, sub.join("image.pfm"))?;
                write_pfm(&r.shading, sub.join("shading.pfm"))?;
            }
        } else {
            let scene = generate(&spec, opts.ldr)?;
            write_scene_files(&dir, &serde_json::to_value(&spec)?, &scene)?;
        }
        dirs.push(dir);
    }
    log::info!("wrote {n} scenes to {}", out.display());
    Ok(dirs)
}

/// A scene loaded from disk.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub id: String,
    pub image: LinearImage,
    pub albedo: AlbedoMap,
    pub shading: ShadingMap,
}

pub fn load_scene(dir: &Path) -> Result<SceneSample> {
    let read = |name: &str| read_pfm(dir.join(name));
    let wrap = |name: &str, e: Error| Error::format(dir.join(name), e.to_string());
    let image = LinearImage::new(read("image.pfm")?).map_err(|e| wrap("image.pfm", e))?;
    let albedo = AlbedoMap::new(read("albedo.pfm")?).map_err(|e| wrap("albedo.pfm", e))?;
    let shading = ShadingMap::new(read("shading.pfm")?).map_err(|e| wrap("shading.pfm", e))?;
    image.ensure_dims(&albedo, "scene albedo")?;
    image.ensure_dims(&shading, "scene shading")?;
    Ok(SceneSample {
        id: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        image,
        albedo,
        shading,
    })
}

/// Scene directories of a split, sorted by name.
pub fn scene_dirs(root: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let dir = root.join(split.name());
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if entry.path().join("image.pfm").is_file() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_split(root: &Path, split: Split) -> Result<Vec<SceneSample>> {
    scene_dirs(root, split)?.iter().map(|d| load_scene(d)).collect()
}

/// Illumination subdirectories (`dir_NN`) of a scene, sorted.
pub fn illumination_dirs(scene: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(scene).map_err(|e| Error::io(scene, e))? {
        let entry = entry.map_err(|e| Error::io(scene, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("dir_") && entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(lights: Vec<Light>, ambient: f64) -> SceneSpec {
        SceneSpec {
            seed: 0,
            width: 9,
            height: 7,
            background: [0.5; 3],
            shapes: vec![],
            blobs: vec![],
            lighting: Lighting { lights, ambient, occluders: vec![] },
            specular: None,
        }
    }

    #[test]
    fn flat_scene_under_overhead_light() {
        let spec = flat(vec![Light { dir: [0.0, 0.0, 1.0], intensity: 0.8 }], 0.2);
        let s = generate(&spec, false).unwrap();
        assert!(s.shading.data().iter().all(|&v| (v - 1.0).abs() < 1e-7));
        assert!(s.image.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn random_scenes_are_deterministic_and_exact() {
        for seed in 0..6 {
            let spec = SceneSpec::random(seed, 24, 20, seed % 2 == 0);
            spec.validate().unwrap();
            assert!((3..=12).contains(&spec.shapes.len()));
            let a = generate(&spec, false).unwrap();
            let b = generate(&SceneSpec::random(seed, 24, 20, seed % 2 == 0), false).unwrap();
            assert_eq!(a.image, b.image);
            assert_eq!(a.shading, b.shading);
            let product = a.albedo.mul_broadcast(&a.shading).unwrap();
            assert!(product.data().iter().zip(a.image.data()).all(|(p, i)| p.to_bits() == i.to_bits()));
            let floor = spec.lighting.ambient
                * spec.lighting.occluders.iter().map(|o| o.attenuation).product::<f64>();
            assert!(a.shading.data().iter().all(|&v| v as f64 >= floor * (1.0 - 1.0 / 4096.0) && v > 0.0));
            assert!(a.albedo.data().iter().all(|v| (0.1..=0.9).contains(v)));
            for y in 0..20 {
                for x in 0..24 {
                    let n: f32 = (0..3).map(|c| a.normals.get(c, y, x).powi(2)).sum();
                    assert!((n - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn ldr_clips_image_only() {
        let mut spec = flat(vec![Light { dir: [0.0, 0.0, 1.0], intensity: 1.0 }], 0.3);
        spec.background = [0.9; 3];
        let hdr = generate(&spec, false).unwrap();
        let ldr = generate(&spec, true).unwrap();
        assert!(hdr.image.max_value() > 1.0);
        assert_eq!(ldr.image.max_value(), 1.0);
        assert_eq!(hdr.shading, ldr.shading);
    }

    #[test]
    fn multi_illumination_shares_albedo() {
        let spec = MultiIllumSpec::new(SceneSpec::random(3, 16, 16, false), 11);
        let ms = generate_multi(&spec, false).unwrap();
        assert_eq!(ms.renders.len(), 25);
        assert_ne!(ms.renders[0].shading, ms.renders[1].shading);
        for r in &ms.renders {
            for (c, &a) in ms.albedo.data().iter().enumerate() {
                let p = c % ms.albedo.pixels();
                let ratio = r.image.data()[c] / r.shading.data()[p];
                assert_eq!(ratio.to_bits(), a.to_bits());
            }
        }
    }

    #[test]
    fn mirrored_lights_mirror_the_shading() {
        let mut spec = flat(vec![], 0.2);
        spec.width = 12;
        spec.blobs = vec![Blob { cx: 0.0, cy: 0.1, sigma: 0.2, amplitude: 0.25 }];
        let dir = |sx: f64| {
            let v: [f64; 3] = [sx * 0.5, 0.3, 0.8];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        };
        spec.lighting.lights = vec![Light { dir: dir(1.0), intensity: 0.9 }];
        let a = generate(&spec, false).unwrap();
        spec.lighting.lights = vec![Light { dir: dir(-1.0), intensity: 0.9 }];
        let b = generate(&spec, false).unwrap();
        assert_eq!(b.shading.as_map(), &a.shading.flip_horizontal());
        assert_ne!(a.shading, b.shading);
    }

    #[test]
    fn specular_shading_is_long_tailed() {
        let n = 100;
        let tailed = (0..n)
            .filter(|&seed| {
                let s = generate(&SceneSpec::random(seed as u64, 64, 64, true), false).unwrap();
                let mut v = s.shading.data().to_vec();
                v.sort_by(f32::total_cmp);
                v[v.len() - 1] / v[v.len() / 2] > 5.0
            })
            .count();
        assert!(tailed * 10 >= n * 9, "{tailed} of {n} scenes long-tailed");
    }

    #[test]
    fn dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions { multi_illum: true, ..Default::default() };
        write_dataset(dir.path(), 10, 8, 8, 4, opts).unwrap();
        assert_eq!(scene_dirs(dir.path(), Split::Train).unwrap().len(), 8);
        let test = scene_dirs(dir.path(), Split::Test).unwrap();
        assert_eq!(test.len(), 1);
        assert_eq!(illumination_dirs(&test[0]).unwrap().len(), 25);
        let s = load_scene(&test[0]).unwrap();
        assert_eq!(s.id, "scene_00009");
        for name in ["image.pfm", "albedo.pfm", "shading.pfm", "normals.pfm"] {
            assert!(test[0].join(name).is_file());
        }
    }
}
