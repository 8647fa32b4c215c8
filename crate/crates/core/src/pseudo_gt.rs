//! Shared-albedo labels from multi-illumination stacks.
//!
//! Every photograph of a scene is decomposed, the albedo estimates are
//! brought to the scale of the first one and combined with a per-pixel,
//! per-channel median. Each photograph then gets the shading
//! `S_k = lum(I_k) / lum(A**)`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{fit_scale, luminance_ratio};
use crate::image::{load_image, write_pfm, AlbedoMap, LinearImage, Map, ShadingMap};
use crate::networks::UNet;
use crate::pipeline::{decompose, resample, DEFAULT_BASE_RES, DEFAULT_CAP};
use crate::synth::{illumination_dir, illumination_dirs, Split};

/// Rescale every estimate onto the first: `A_k = fit_scale(A_1, A_k) * A_k`.
/// The first estimate is returned untouched.
pub fn scale_match_stack(albedos: &[AlbedoMap]) -> Result<Vec<AlbedoMap>> {
    if albedos.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 albedo estimates, got {}", albedos.len())));
    }
    let first = &albedos[0];
    let mut out = vec![first.clone()];
    for a in &albedos[1..] {
        first.ensure_dims(a, "albedo stack")?;
        let c = fit_scale(first.data(), a.data())?.c;
        out.push(AlbedoMap::new(a.map(|v| (v as f64 * c) as f32))?);
    }
    Ok(out)
}

/// Channel-wise per-pixel median. Even counts take the lower median.
pub fn median_albedo(albedos: &[AlbedoMap]) -> Result<AlbedoMap> {
    let first = albedos
        .first()
        .ok_or_else(|| Error::Invalid("empty albedo stack".into()))?;
    for a in albedos {
        first.ensure_dims(a, "albedo stack")?;
    }
    let mid = (albedos.len() - 1) / 2;
    let mut column = vec![0.0f32; albedos.len()];
    let data = (0..first.data().len())
        .map(|i| {
            for (slot, a) in column.iter_mut().zip(albedos) {
                *slot = a.data()[i];
            }
            *column.select_nth_unstable_by(mid, f32::total_cmp).1
        })
        .collect();
    let (w, h) = first.dims();
    AlbedoMap::new(Map::new(w, h, first.channels(), data)?)
}

/// Photographs of one scene under different lighting.
#[derive(Clone, Debug)]
pub struct IlluminationStack {
    pub names: Vec<String>,
    pub images: Vec<LinearImage>,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("pfm" | "png")
    )
}

/// Load the photographs of a scene. Scenes in the multi-illumination layout
/// use `dir_NN/image.{pfm,png}`; otherwise every `.pfm`/`.png` file in the
/// directory except ground-truth layers is one photograph.
pub fn load_stack(scene: &Path) -> Result<IlluminationStack> {
    let subdirs = illumination_dirs(scene)?;
    let mut files = Vec::new();
    if subdirs.is_empty() {
        for entry in std::fs::read_dir(scene).map_err(|e| Error::io(scene, e))? {
            let p = entry.map_err(|e| Error::io(scene, e))?.path();
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            if p.is_file() && is_image(&p) && !matches!(stem, "albedo" | "shading" | "normals") && !stem.starts_with("preview") {
                files.push((stem.to_string(), p));
            }
        }
        files.sort();
    } else {
        for d in subdirs {
            let name = d.file_name().unwrap().to_string_lossy().into_owned();
            let p = ["image.pfm", "image.png"]
                .iter()
                .map(|f| d.join(f))
                .find(|p| p.is_file())
                .ok_or_else(|| Error::format(&d, "no image.pfm or image.png"))?;
            files.push((name, p));
        }
    }
    let mut names = Vec::new();
    let mut images: Vec<LinearImage> = Vec::new();
    for (name, p) in files {
        let img = load_image(&p)?;
        if let Some(first) = images.first() {
            img.ensure_dims(first, "illumination stack")
                .map_err(|e| Error::format(&p, e.to_string()))?;
        }
        names.push(name);
        images.push(img);
    }
    Ok(IlluminationStack { names, images })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoConfig {
    pub base_res: usize,
    pub cap: usize,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            base_res: DEFAULT_BASE_RES,
            cap: DEFAULT_CAP,
        }
    }
}

/// Pseudo ground truth for one stack.
#[derive(Clone, Debug)]
pub struct PseudoLabels {
    /// Median albedo `A**`.
    pub albedo: AlbedoMap,
    /// `S_k = lum(I_k) / lum(A**)` for every photograph.
    pub shadings: Vec<ShadingMap>,
    /// Scale-matched per-photograph estimates.
    pub estimates: Vec<AlbedoMap>,
}

/// Decompose every photograph and combine the albedo estimates.
pub fn pseudo_labels(stack: &IlluminationStack, ordinal: &UNet, decomp: &UNet, cfg: &PseudoConfig) -> Result<PseudoLabels> {
    let mut raw = Vec::with_capacity(stack.images.len());
    for img in &stack.images {
        let dec = decompose(img, ordinal, decomp, cfg.base_res, cfg.cap)?;
        let (w, h) = img.dims();
        let a = if dec.albedo.dims() == (w, h) {
            dec.albedo
        } else {
            AlbedoMap::new(resample(&dec.albedo, w, h)?.map(|v| v.max(0.0)))?
        };
        raw.push(a);
    }
    let estimates = scale_match_stack(&raw)?;
    let albedo = median_albedo(&estimates)?;
    let shadings = stack
        .images
        .iter()
        .map(|img| luminance_ratio(img, &albedo))
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabels {
        albedo,
        shadings,
        estimates,
    })
}

/// Write labels in the multi-illumination dataset layout.
pub fn write_pseudo_scene(dir: &Path, stack: &IlluminationStack, labels: &PseudoLabels) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pfm(&labels.albedo, dir.join("albedo.pfm"))?;
    write_pfm(&stack.images[0], dir.join("image.pfm"))?;
    write_pfm(&labels.shadings[0], dir.join("shading.pfm"))?;
    for (k, (img, s)) in stack.images.iter().zip(&labels.shadings).enumerate() {
        let sub = dir.join(illumination_dir(k));
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        write_pfm(img, sub.join("image.pfm"))?;
        write_pfm(s, sub.join("shading.pfm"))?;
    }
    let meta = serde_json::json!({ "sources": stack.names });
    let p = dir.join("pseudo.json");
    std::fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&p, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneOutcome {
    pub scene: String,
    pub illuminations: usize,
    /// Reason the scene was skipped, if it was.
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoReport {
    pub scenes: Vec<SceneOutcome>,
}

impl PseudoReport {
    pub fn exported(&self) -> usize {
        self.scenes.iter().filter(|s| s.skipped.is_none()).count()
    }
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Scene directories under `root` paired with their output location
/// relative to the output root. Split subdirectories are mirrored; a root
/// without them is treated as the training split.
pub fn find_scenes(root: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "scene directory not found")));
    }
    let has_splits = Split::ALL.iter().any(|s| root.join(s.name()).is_dir());
    let mut out = Vec::new();
    if has_splits {
        for split in Split::ALL {
            let d = root.join(split.name());
            if d.is_dir() {
                for scene in subdirs(&d)? {
                    let rel = Path::new(split.name()).join(scene.file_name().unwrap());
                    out.push((scene, rel));
                }
            }
        }
    } else {
        for scene in subdirs(root)? {
            let rel = Path::new(Split::Train.name()).join(scene.file_name().unwrap());
            out.push((scene, rel));
        }
    }
    Ok(out)
}

/// Build pseudo ground truth for every scene under `input`. Scenes with
/// fewer than two readable photographs or a degenerate scale fit are
/// skipped and listed in the report.
pub fn build_pseudo_dataset(input: &Path, out: &Path, ordinal: &UNet, decomp: &UNet, cfg: &PseudoConfig) -> Result<PseudoReport> {
    let mut report = PseudoReport::default();
    for (scene, rel) in find_scenes(input)? {
        let name = rel.to_string_lossy().into_owned();
        let stack = match load_stack(&scene) {
            Ok(s) if s.images.len() >= 2 => s,
            Ok(s) => {
                log::warn!("skipping {name}: {} photograph(s), need at least 2", s.images.len());
                report.scenes.push(SceneOutcome {
                    scene: name,
                    illuminations: s.images.len(),
                    skipped: Some("fewer than 2 photographs".into()),
                });
                continue;
            }
            Err(e @ (Error::Io { .. } | Error::Format { .. } | Error::Image(_))) => {
                log::warn!("skipping {name}: {e}");
                report.scenes.push(SceneOutcome {
                    scene: name,
                    illuminations: 0,
                    skipped: Some(e.to_string()),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let labels = match pseudo_labels(&stack, ordinal, decomp, cfg) {
            Ok(l) => l,
            Err(Error::Degenerate(reason)) => {
                log::warn!("skipping {name}: {reason}");
                report.scenes.push(SceneOutcome {
                    scene: name,
                    illuminations: stack.images.len(),
                    skipped: Some(reason),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let dir = out.join(&rel);
        if let Err(e) = write_pseudo_scene(&dir, &stack, &labels) {
            let _ = std::fs::remove_dir_all(&dir);
            return Err(e);
        }
        log::info!("exported {name} from {} photographs", stack.images.len());
        report.scenes.push(SceneOutcome {
            scene: name,
            illuminations: stack.images.len(),
            skipped: None,
        });
    }
    Ok(report)
}
