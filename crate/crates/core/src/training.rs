//! Training loops for both networks and the ablation harnesses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use iid_tensor::{Adam, Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fitting::{fit_scale, fix_ground_truth_scale};
use crate::image::{read_pfm, AlbedoMap, LinearImage, Map, OrdinalTag, ShadingMap};
use crate::losses::{decomposition_loss, ordinal_loss, FitKind, LossConfig};
use crate::metrics::{d3r, lmse, ord_metric, recon_mse, si_rmse, ssim, D3R_THRESHOLD, ORD_TAU};
use crate::model_io::{save_model, ModelWeights};
use crate::networks::{InputConfig, UNet, UNetSpec};
use crate::pipeline::{assemble_input, decompose_with, dims_for, normalize_exposure, ordinal_inputs, resample, run_ordinal};
use crate::shading::inverse_of;
use crate::synth::{illumination_dirs, load_scene, scene_dirs, SceneSample, Split};

/// First 16 hex digits of the SHA-256 of a configuration's JSON.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configurations serialise");
    Sha256::digest(&json)
        .iter()
        .take(8)
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrdinalVariant {
    /// Affine fit on inverse shading.
    SsiInverse,
    /// Scale-only fit on inverse shading.
    SiInverse,
    /// Scale-only fit on raw shading.
    SiShading,
}

impl OrdinalVariant {
    pub const ALL: [OrdinalVariant; 3] = [
        OrdinalVariant::SsiInverse,
        OrdinalVariant::SiInverse,
        OrdinalVariant::SiShading,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OrdinalVariant::SsiInverse => "ssi-inverse",
            OrdinalVariant::SiInverse => "si-inverse",
            OrdinalVariant::SiShading => "si-shading",
        }
    }

    pub fn fit_kind(self) -> FitKind {
        match self {
            OrdinalVariant::SsiInverse => FitKind::Affine,
            _ => FitKind::Scale,
        }
    }

    pub fn shading_space(self) -> bool {
        self == OrdinalVariant::SiShading
    }
}

impl std::str::FromStr for OrdinalVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        OrdinalVariant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Invalid(format!("unknown ordinal variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrdinalTrainConfig {
    pub variant: OrdinalVariant,
    pub iters: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    /// Square training resolution.
    pub res: usize,
    pub base_channels: usize,
    pub log_every: usize,
    /// Zero disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl Default for OrdinalTrainConfig {
    fn default() -> Self {
        Self {
            variant: OrdinalVariant::SsiInverse,
            iters: 20_000,
            batch: 4,
            lr: 3e-4,
            seed: 0,
            res: 128,
            base_channels: 16,
            log_every: 100,
            checkpoint_every: 1000,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompTrainConfig {
    pub inputs: InputConfig,
    pub use_albedo_loss: bool,
    pub iters: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    /// Square working resolution.
    pub res: usize,
    /// Long side at which the low-resolution ordinal input is computed.
    pub base_res: usize,
    pub base_channels: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl Default for DecompTrainConfig {
    fn default() -> Self {
        Self {
            inputs: InputConfig::All,
            use_albedo_loss: true,
            iters: 10_000,
            batch: 4,
            lr: 3e-4,
            seed: 0,
            res: 128,
            base_res: 64,
            base_channels: 16,
            log_every: 100,
            checkpoint_every: 1000,
            loss: LossConfig::default(),
        }
    }
}

impl DecompTrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        if self.use_albedo_loss {
            self.loss
        } else {
            self.loss.shading_only()
        }
    }
}

/// Scenes of a split across one or more dataset roots. Multi-illumination
/// scenes contribute one sample per illumination.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub sets: Vec<Vec<SceneSample>>,
}

/// All samples of a scene directory.
pub fn load_scene_samples(dir: &Path) -> Result<Vec<SceneSample>> {
    let lights = illumination_dirs(dir)?;
    if lights.is_empty() {
        return Ok(vec![load_scene(dir)?]);
    }
    let albedo_path = dir.join("albedo.pfm");
    let albedo = AlbedoMap::new(read_pfm(&albedo_path)?).map_err(|e| Error::format(&albedo_path, e.to_string()))?;
    let scene = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    lights
        .iter()
        .map(|sub| {
            let ip = sub.join("image.pfm");
            let sp = sub.join("shading.pfm");
            let image = LinearImage::new(read_pfm(&ip)?).map_err(|e| Error::format(&ip, e.to_string()))?;
            let shading = ShadingMap::new(read_pfm(&sp)?).map_err(|e| Error::format(&sp, e.to_string()))?;
            image.ensure_dims(&albedo, "illumination image")?;
            image.ensure_dims(&shading, "illumination shading")?;
            Ok(SceneSample {
                id: format!("{scene}/{}", sub.file_name().unwrap().to_string_lossy()),
                image,
                albedo: albedo.clone(),
                shading,
            })
        })
        .collect()
}

impl TrainingSet {
    pub fn load(roots: &[PathBuf], split: Split) -> Result<Self> {
        let mut sets = Vec::new();
        for root in roots {
            let mut samples = Vec::new();
            for dir in scene_dirs(root, split)? {
                samples.extend(load_scene_samples(&dir)?);
            }
            if samples.is_empty() {
                return Err(Error::Invalid(format!(
                    "no {} scenes under {}",
                    split.name(),
                    root.display()
                )));
            }
            sets.push(samples);
        }
        if sets.is_empty() {
            return Err(Error::Invalid("no training data".into()));
        }
        Ok(Self { sets })
    }

    pub fn from_samples(samples: Vec<SceneSample>) -> Self {
        Self { sets: vec![samples] }
    }

    pub fn len(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-iteration loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub total: f64,
    pub terms: Vec<(String, f64)>,
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let p = self.path.join(name);
        std::fs::write(&p, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(&p, e))
    }

    pub fn write_loss_log(&self, log: &[LossRecord], hash: &str) -> Result<()> {
        let mut s = String::from("iter,total");
        if let Some(first) = log.first() {
            for (name, _) in &first.terms {
                s.push(',');
                s.push_str(name);
            }
        }
        s.push_str(",config_hash\n");
        for r in log {
            let _ = write!(s, "{},{:e}", r.iter, r.total);
            for (_, v) in &r.terms {
                let _ = write!(s, ",{v:e}");
            }
            let _ = writeln!(s, ",{hash}");
        }
        let p = self.path.join("loss_log.csv");
        std::fs::write(&p, s).map_err(|e| Error::io(&p, e))
    }
}

/// Outcome of a training run. On divergence the weights are those of the
/// last finite step.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub net: UNet,
    pub log: Vec<LossRecord>,
    pub diverged_at: Option<usize>,
    pub config_hash: String,
}

struct LoopSettings<'a> {
    iters: usize,
    lr: f32,
    seed: u64,
    log_every: usize,
    checkpoint_every: usize,
    run: Option<&'a RunDir>,
    hash: &'a str,
    metadata: serde_json::Value,
}

type Terms = Vec<(&'static str, Var)>;

fn save_weights(net: &UNet, run: &RunDir, name: &str, metadata: &serde_json::Value) -> Result<()> {
    save_model(
        &ModelWeights::from_net(net).with_metadata(metadata.clone()),
        run.path.join(name),
    )
}

fn run_loop(
    mut net: UNet,
    s: LoopSettings<'_>,
    mut step: impl FnMut(&mut Graph, &UNet, &[Var], &mut ChaCha8Rng) -> Result<(Var, Terms)>,
) -> Result<TrainRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(s.lr);
    let mut log = Vec::with_capacity(s.iters);
    let mut diverged_at = None;
    for it in 0..s.iters {
        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let (loss, terms) = step(&mut g, &net, &vars, &mut rng)?;
        let total = g.value(loss).item() as f64;
        if !total.is_finite() {
            diverged_at = Some(it);
            break;
        }
        g.backward(loss)?;
        let grads: Vec<Option<&Tensor>> = vars.iter().map(|&v| g.grad(v)).collect();
        match adam.step(&mut net.params, &grads) {
            Ok(()) => {}
            Err(TensorError::NonFiniteGradient { .. }) => {
                diverged_at = Some(it);
                break;
            }
            Err(e) => return Err(e.into()),
        }
        let terms = terms
            .iter()
            .map(|(n, v)| (n.to_string(), g.value(*v).item() as f64))
            .collect();
        log.push(LossRecord { iter: it, total, terms });
        if s.log_every > 0 && (it % s.log_every == 0 || it + 1 == s.iters) {
            log::info!("iter {it}: loss {total:.6}");
        }
        if let Some(run) = s.run {
            if s.checkpoint_every > 0 && (it + 1) % s.checkpoint_every == 0 && it + 1 < s.iters {
                save_weights(&net, run, &format!("weights_{:06}.bin", it + 1), &s.metadata)?;
            }
        }
    }
    if let Some(it) = diverged_at {
        log::warn!("training diverged at iteration {it}; keeping the last finite weights");
    }
    if let Some(run) = s.run {
        save_weights(&net, run, "weights_final.bin", &s.metadata)?;
        run.write_loss_log(&log, s.hash)?;
    }
    Ok(TrainRun {
        net,
        log,
        diverged_at,
        config_hash: s.hash.to_string(),
    })
}

fn flip(t: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    if !horizontal && !vertical {
        return t.clone();
    }
    let [_, _, h, w] = t.shape();
    Tensor::from_fn(t.shape(), |n, c, y, x| {
        let sy = if vertical { h - 1 - y } else { y };
        let sx = if horizontal { w - 1 - x } else { x };
        t.get(n, c, sy, sx)
    })
}

/// Indices of a random batch drawn uniformly over datasets, then scenes.
fn draw<T>(sets: &[Vec<T>], batch: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, bool, bool)> {
    (0..batch)
        .map(|_| {
            let s = rng.gen_range(0..sets.len());
            let i = rng.gen_range(0..sets[s].len());
            (s, i, rng.gen_bool(0.5), rng.gen_bool(0.5))
        })
        .collect()
}

/// Network input and target of one ordinal training sample.
#[derive(Clone, Debug)]
pub struct OrdinalSample {
    pub input: Tensor,
    pub target: Tensor,
}

pub fn prepare_ordinal(s: &SceneSample, res: usize, variant: OrdinalVariant) -> Result<OrdinalSample> {
    let img = resample(&s.image, res, res)?;
    let shading = resample(&s.shading, res, res)?;
    let target = if variant.shading_space() {
        shading.map(|v| v.max(0.0))
    } else {
        shading.map(|v| inverse_of(v.max(0.0) as f64) as f32)
    };
    Ok(OrdinalSample {
        input: normalize_exposure(&img).to_tensor(),
        target: target.to_tensor(),
    })
}

fn prepare_all<T>(data: &TrainingSet, f: impl Fn(&SceneSample) -> Result<Option<T>>) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::new();
    for set in &data.sets {
        let mut v = Vec::new();
        for s in set {
            if let Some(p) = f(s)? {
                v.push(p);
            }
        }
        if v.is_empty() {
            return Err(Error::Degenerate("no usable training samples".into()));
        }
        out.push(v);
    }
    Ok(out)
}

fn ordinal_step(
    g: &mut Graph,
    net: &UNet,
    vars: &[Var],
    samples: &[&OrdinalSample],
    flips: &[(bool, bool)],
    cfg: &OrdinalTrainConfig,
) -> Result<(Var, Terms)> {
    let inputs: Vec<Tensor> = samples.iter().zip(flips).map(|(s, &(h, v))| flip(&s.input, h, v)).collect();
    let targets: Vec<Tensor> = samples.iter().zip(flips).map(|(s, &(h, v))| flip(&s.target, h, v)).collect();
    let x = Tensor::stack(&inputs)?;
    let t = Tensor::stack(&targets)?;
    let pred = net.forward(g, vars, &x)?;
    let l = ordinal_loss(g, pred, &t, cfg.variant.fit_kind(), None, &cfg.loss)?;
    Ok((l.total, vec![("ord", l.ord), ("msg", l.msg)]))
}

/// Train an ordinal network from scratch.
pub fn train_ordinal(data: &TrainingSet, cfg: &OrdinalTrainConfig, run: Option<&RunDir>) -> Result<TrainRun> {
    if cfg.iters == 0 || cfg.batch == 0 || cfg.res == 0 {
        return Err(Error::Invalid("iterations, batch and resolution must be positive".into()));
    }
    cfg.loss.validate()?;
    let samples = prepare_all(data, |s| prepare_ordinal(s, cfg.res, cfg.variant).map(Some))?;
    let net = UNet::init(UNetSpec::ordinal(cfg.base_channels), cfg.seed)?;
    let hash = config_hash(cfg);
    if let Some(r) = run {
        r.write_json("config.json", &serde_json::json!({ "config": cfg, "config_hash": hash }))?;
    }
    let settings = LoopSettings {
        iters: cfg.iters,
        lr: cfg.lr,
        seed: cfg.seed,
        log_every: cfg.log_every,
        checkpoint_every: cfg.checkpoint_every,
        run,
        hash: &hash,
        metadata: serde_json::json!({ "ordinal": cfg, "config_hash": hash }),
    };
    run_loop(net, settings, |g, net, vars, rng| {
        let picks = draw(&samples, cfg.batch, rng);
        let batch: Vec<&OrdinalSample> = picks.iter().map(|&(s, i, _, _)| &samples[s][i]).collect();
        let flips: Vec<(bool, bool)> = picks.iter().map(|&(_, _, h, v)| (h, v)).collect();
        ordinal_step(g, net, vars, &batch, &flips, cfg)
    })
}

/// Mean ordinal training loss of a network over fixed samples.
pub fn ordinal_validation_loss(net: &UNet, samples: &[OrdinalSample], cfg: &OrdinalTrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let vars = net.bind_frozen(&mut g);
        let (loss, _) = ordinal_step(&mut g, net, &vars, &[s], &[(false, false)], cfg)?;
        total += g.value(loss).item() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Precomputed input and scale-fixed targets of one decomposition sample.
#[derive(Clone, Debug)]
pub struct DecompSample {
    pub input: Tensor,
    pub image: Tensor,
    pub d_star: Tensor,
    pub a_star: Tensor,
}

/// Ordinal inputs from the frozen network and ground truth rescaled to the
/// low-resolution ordinal estimate. Degenerate scale fits give `None`.
pub fn prepare_decomp(s: &SceneSample, ordinal: &UNet, cfg: &DecompTrainConfig) -> Result<Option<DecompSample>> {
    let img = LinearImage::new(resample(&s.image, cfg.res, cfg.res)?.map(|v| v.max(0.0)))?;
    let albedo = AlbedoMap::new(resample(&s.albedo, cfg.res, cfg.res)?.map(|v| v.max(0.0)))?;
    let (low, high) = ordinal_inputs(ordinal, &img, dims_for(cfg.res, cfg.res, cfg.base_res))?;
    let truth = match fix_ground_truth_scale(&albedo, &low, &img) {
        Ok(t) => t,
        Err(Error::Degenerate(reason)) => {
            log::warn!("skipping {}: {reason}", s.id);
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    Ok(Some(DecompSample {
        input: assemble_input(&img, &low, &high, cfg.inputs)?,
        image: img.to_tensor(),
        d_star: truth.inverse.to_tensor(),
        a_star: truth.albedo.to_tensor(),
    }))
}

/// Train a decomposition network on top of a frozen ordinal network.
pub fn train_decomposition(data: &TrainingSet, ordinal: &UNet, cfg: &DecompTrainConfig, run: Option<&RunDir>) -> Result<TrainRun> {
    if cfg.iters == 0 || cfg.batch == 0 || cfg.res == 0 || cfg.base_res == 0 {
        return Err(Error::Invalid("iterations, batch and resolutions must be positive".into()));
    }
    let loss_cfg = cfg.loss_config();
    loss_cfg.validate()?;
    let samples = prepare_all(data, |s| prepare_decomp(s, ordinal, cfg))?;
    let net = UNet::init(UNetSpec::decomposition(cfg.base_channels, cfg.inputs), cfg.seed)?;
    let hash = config_hash(&(cfg, config_hash(&ordinal.params.iter().map(|p| p.value.data()).collect::<Vec<_>>())));
    if let Some(r) = run {
        r.write_json("config.json", &serde_json::json!({ "config": cfg, "config_hash": hash }))?;
    }
    let settings = LoopSettings {
        iters: cfg.iters,
        lr: cfg.lr,
        seed: cfg.seed,
        log_every: cfg.log_every,
        checkpoint_every: cfg.checkpoint_every,
        run,
        hash: &hash,
        metadata: serde_json::json!({ "decomposition": cfg, "config_hash": hash }),
    };
    run_loop(net, settings, |g, net, vars, rng| {
        let picks = draw(&samples, cfg.batch, rng);
        let pick = |f: fn(&DecompSample) -> &Tensor| -> Result<Tensor> {
            let items: Vec<Tensor> = picks.iter().map(|&(s, i, h, v)| flip(f(&samples[s][i]), h, v)).collect();
            Ok(Tensor::stack(&items)?)
        };
        let x = pick(|s| &s.input)?;
        let image = pick(|s| &s.image)?;
        let d_star = pick(|s| &s.d_star)?;
        let a_star = pick(|s| &s.a_star)?;
        let d = net.forward(g, vars, &x)?;
        let l = decomposition_loss(g, d, &image, &d_star, &a_star, &loss_cfg)?;
        let mut terms = vec![("l_s", l.l_s), ("msg_s", l.msg_s)];
        if let (Some(a), Some(m)) = (l.l_a, l.msg_a) {
            terms.push(("l_a", a));
            terms.push(("msg_a", m));
        }
        Ok((l.total, terms))
    })
}

/// Block size used for D3R at a given raster size: an 8x8 grid of blocks
/// along the longer side.
pub fn d3r_cell(width: usize, height: usize) -> usize {
    (width.max(height) / 8).max(2)
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn mean_opt(v: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| mean_of(&vals))
}

/// Ordinal metrics at the base and the full scene resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrdinalEval {
    pub ord_base: f64,
    pub d3r_base: Option<f64>,
    pub ord_high: f64,
    pub d3r_high: Option<f64>,
    pub scenes: usize,
}

/// Inverse-shading view of an ordinal prediction. Shading-space
/// predictions are scaled onto the ground-truth shading first.
fn as_inverse(pred: &Map, gt_shading: &Map, variant: OrdinalVariant) -> Map {
    if !variant.shading_space() {
        return pred.clone();
    }
    let c = fit_scale(gt_shading.data(), pred.data()).map_or(1.0, |f| f.c);
    pred.map(|o| inverse_of(c * o as f64) as f32)
}

fn ordinal_scores(net: &UNet, variant: OrdinalVariant, image: &Map, shading: &Map, pairs: usize, seed: u64) -> Result<(f64, Option<f64>)> {
    let pred = run_ordinal(net, image, OrdinalTag::HighRes)?;
    let gt = shading.map(|v| inverse_of(v as f64) as f32);
    let pred = as_inverse(&pred, shading, variant);
    let o = ord_metric(&pred, &gt, pairs, ORD_TAU, seed)?;
    let (w, h) = gt.dims();
    let d = d3r(&pred, &gt, d3r_cell(w, h), D3R_THRESHOLD)?;
    Ok((o.error, d.value))
}

pub fn eval_ordinal(net: &UNet, variant: OrdinalVariant, scenes: &[SceneSample], base_res: usize, pairs: usize, seed: u64) -> Result<OrdinalEval> {
    let (mut ob, mut db, mut oh, mut dh) = (vec![], vec![], vec![], vec![]);
    for (i, s) in scenes.iter().enumerate() {
        let (w, h) = s.image.dims();
        let (bw, bh) = dims_for(w, h, base_res);
        let small = resample(&s.image, bw, bh)?;
        let small_s = resample(&s.shading, bw, bh)?.map(|v| v.max(0.0));
        let (o, d) = ordinal_scores(net, variant, &small, &small_s, pairs, seed.wrapping_add(i as u64))?;
        ob.push(o);
        db.push(d);
        let (o, d) = ordinal_scores(net, variant, &s.image, &s.shading, pairs, seed.wrapping_add(i as u64))?;
        oh.push(o);
        dh.push(d);
    }
    Ok(OrdinalEval {
        ord_base: mean_of(&ob),
        d3r_base: mean_opt(&db),
        ord_high: mean_of(&oh),
        d3r_high: mean_opt(&dh),
        scenes: scenes.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentScores {
    pub si_rmse: f64,
    pub lmse: f64,
    pub ssim: f64,
}

/// Decomposition quality at the scene's own resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompEval {
    pub shading: ComponentScores,
    pub albedo: ComponentScores,
    /// D3R of the predicted inverse shading.
    pub d3r: Option<f64>,
    /// Largest reconstruction error over the scenes.
    pub recon_max: f64,
    pub scenes: usize,
}

fn component(pred: &Map, gt: &Map) -> Result<ComponentScores> {
    Ok(ComponentScores {
        si_rmse: si_rmse(pred.data(), gt.data())?,
        lmse: lmse(pred, gt)?,
        ssim: ssim(pred, gt)?,
    })
}

fn mean_scores(v: &[ComponentScores]) -> ComponentScores {
    ComponentScores {
        si_rmse: mean_of(&v.iter().map(|c| c.si_rmse).collect::<Vec<_>>()),
        lmse: mean_of(&v.iter().map(|c| c.lmse).collect::<Vec<_>>()),
        ssim: mean_of(&v.iter().map(|c| c.ssim).collect::<Vec<_>>()),
    }
}

pub fn eval_decomposition(ordinal: &UNet, decomp: &UNet, scenes: &[SceneSample], base_res: usize) -> Result<DecompEval> {
    let (mut sh, mut al, mut dd) = (vec![], vec![], vec![]);
    let mut recon_max = 0.0f64;
    for s in scenes {
        let (w, h) = s.image.dims();
        let (low, high) = ordinal_inputs(ordinal, &s.image, dims_for(w, h, base_res))?;
        let (d, shading, albedo) = decompose_with(&s.image, &low, &high, decomp)?;
        sh.push(component(&shading, &s.shading)?);
        al.push(component(&albedo, &s.albedo)?);
        let d_gt = s.shading.map(|v| inverse_of(v as f64) as f32);
        dd.push(d3r(&d, &d_gt, d3r_cell(w, h), D3R_THRESHOLD)?.value);
        recon_max = recon_max.max(recon_mse(&albedo, &shading, &s.image)?);
    }
    Ok(DecompEval {
        shading: mean_scores(&sh),
        albedo: mean_scores(&al),
        d3r: mean_opt(&dd),
        recon_max,
        scenes: scenes.len(),
    })
}

/// A directional comparison evaluated per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub wins: usize,
    pub seeds: usize,
    /// A strict majority of seeds agrees.
    pub holds: bool,
}

impl Check {
    fn new(name: &str, outcomes: &[bool]) -> Self {
        let wins = outcomes.iter().filter(|&&b| b).count();
        Self {
            name: name.to_string(),
            wins,
            seeds: outcomes.len(),
            holds: 2 * wins > outcomes.len(),
        }
    }
}

/// `a <= b` where an undefined value only compares equal to another
/// undefined value.
fn le_opt(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a <= b,
        (None, None) => true,
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    pub ordinal: OrdinalTrainConfig,
    pub decomp: DecompTrainConfig,
    pub seeds: Vec<u64>,
    pub ord_pairs: usize,
    pub eval_seed: u64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            ordinal: OrdinalTrainConfig::default(),
            decomp: DecompTrainConfig::default(),
            seeds: vec![0, 1, 2],
            ord_pairs: crate::metrics::ORD_PAIRS,
            eval_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrdinalRow {
    pub variant: OrdinalVariant,
    pub seed: u64,
    pub config_hash: String,
    pub diverged_at: Option<usize>,
    pub eval: OrdinalEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrdinalAblationReport {
    pub settings: AblationSettings,
    pub rows: Vec<OrdinalRow>,
    pub checks: Vec<Check>,
    /// Variants ordered best first by the seed mean of each metric.
    pub rankings: BTreeMap<String, Vec<OrdinalVariant>>,
}

fn rank(rows: &[OrdinalRow], variants: &[OrdinalVariant], metric: fn(&OrdinalEval) -> Option<f64>) -> Vec<OrdinalVariant> {
    let mean = |v: OrdinalVariant| {
        let vals: Vec<Option<f64>> = rows.iter().filter(|r| r.variant == v).map(|r| metric(&r.eval)).collect();
        mean_opt(&vals).unwrap_or(f64::INFINITY)
    };
    let mut out = variants.to_vec();
    out.sort_by(|a, b| mean(*a).total_cmp(&mean(*b)));
    out
}

/// Trained ordinal networks keyed by variant and seed.
#[derive(Clone, Debug, Default)]
pub struct OrdinalNets {
    pub nets: Vec<(OrdinalVariant, u64, UNet)>,
}

impl OrdinalNets {
    pub fn get(&self, variant: OrdinalVariant, seed: u64) -> Option<&UNet> {
        self.nets.iter().find(|(v, s, _)| *v == variant && *s == seed).map(|(_, _, n)| n)
    }
}

/// Train every ordinal variant for every seed and compare them on held-out
/// scenes.
pub fn ablate_ordinal(train: &TrainingSet, test: &[SceneSample], settings: &AblationSettings, variants: &[OrdinalVariant]) -> Result<(OrdinalAblationReport, OrdinalNets)> {
    let mut rows = Vec::new();
    let mut nets = OrdinalNets::default();
    for &seed in &settings.seeds {
        for &variant in variants {
            let cfg = OrdinalTrainConfig { variant, seed, ..settings.ordinal };
            log::info!("ordinal ablation: {} seed {seed}", variant.name());
            let run = train_ordinal(train, &cfg, None)?;
            let eval = eval_ordinal(&run.net, variant, test, settings.decomp.base_res, settings.ord_pairs, settings.eval_seed)?;
            rows.push(OrdinalRow {
                variant,
                seed,
                config_hash: run.config_hash,
                diverged_at: run.diverged_at,
                eval,
            });
            nets.nets.push((variant, seed, run.net));
        }
    }
    let find = |v: OrdinalVariant, seed: u64| rows.iter().find(|r| r.variant == v && r.seed == seed).map(|r| r.eval);
    let mut checks = Vec::new();
    let pairs: Vec<(OrdinalEval, OrdinalEval)> = settings
        .seeds
        .iter()
        .filter_map(|&s| Some((find(OrdinalVariant::SsiInverse, s)?, find(OrdinalVariant::SiShading, s)?)))
        .collect();
    if !pairs.is_empty() {
        let cmp = |f: fn(&OrdinalEval) -> Option<f64>| pairs.iter().map(|(a, b)| le_opt(f(a), f(b))).collect::<Vec<_>>();
        checks.push(Check::new("ssi-inverse ord_base <= si-shading", &cmp(|e| Some(e.ord_base))));
        checks.push(Check::new("ssi-inverse d3r_base <= si-shading", &cmp(|e| e.d3r_base)));
        checks.push(Check::new("ssi-inverse ord_high <= si-shading", &cmp(|e| Some(e.ord_high))));
        checks.push(Check::new("ssi-inverse d3r_high <= si-shading", &cmp(|e| e.d3r_high)));
    }
    let metrics: [(&str, fn(&OrdinalEval) -> Option<f64>); 4] = [
        ("ord_base", |e| Some(e.ord_base)),
        ("d3r_base", |e| e.d3r_base),
        ("ord_high", |e| Some(e.ord_high)),
        ("d3r_high", |e| e.d3r_high),
    ];
    let rankings = metrics
        .iter()
        .map(|(name, f)| (name.to_string(), rank(&rows, variants, *f)))
        .collect();
    Ok((
        OrdinalAblationReport {
            settings: settings.clone(),
            rows,
            checks,
            rankings,
        },
        nets,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompRow {
    pub inputs: InputConfig,
    pub use_albedo_loss: bool,
    pub seed: u64,
    pub config_hash: String,
    pub diverged_at: Option<usize>,
    pub eval: DecompEval,
}

/// Decomposition runs shared between ablations.
#[derive(Clone, Debug, Default)]
pub struct DecompRuns {
    pub runs: Vec<(DecompRow, UNet)>,
}

impl DecompRuns {
    pub fn find(&self, inputs: InputConfig, use_albedo_loss: bool, seed: u64) -> Option<&DecompRow> {
        self.runs
            .iter()
            .map(|(r, _)| r)
            .find(|r| r.inputs == inputs && r.use_albedo_loss == use_albedo_loss && r.seed == seed)
    }

    /// Train (or reuse) the run for one configuration.
    pub fn ensure(&mut self, train: &TrainingSet, test: &[SceneSample], ordinal: &UNet, settings: &AblationSettings, inputs: InputConfig, use_albedo_loss: bool, seed: u64) -> Result<DecompRow> {
        if let Some(r) = self.find(inputs, use_albedo_loss, seed) {
            return Ok(r.clone());
        }
        let cfg = DecompTrainConfig {
            inputs,
            use_albedo_loss,
            seed,
            ..settings.decomp
        };
        log::info!("decomposition run: inputs {} albedo loss {use_albedo_loss} seed {seed}", inputs.name());
        let run = train_decomposition(train, ordinal, &cfg, None)?;
        let eval = eval_decomposition(ordinal, &run.net, test, cfg.base_res)?;
        let row = DecompRow {
            inputs,
            use_albedo_loss,
            seed,
            config_hash: run.config_hash,
            diverged_at: run.diverged_at,
            eval,
        };
        self.runs.push((row.clone(), run.net));
        Ok(row)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompAblationReport {
    pub settings: AblationSettings,
    pub rows: Vec<DecompRow>,
    pub checks: Vec<Check>,
}

fn ordinal_for(nets: &OrdinalNets, seed: u64) -> Result<&UNet> {
    nets.get(OrdinalVariant::SsiInverse, seed)
        .ok_or_else(|| Error::Invalid(format!("no ssi-inverse ordinal network for seed {seed}")))
}

/// Decomposition with and without the albedo loss terms.
pub fn ablate_joint_loss(train: &TrainingSet, test: &[SceneSample], ordinal: &OrdinalNets, settings: &AblationSettings, runs: &mut DecompRuns) -> Result<DecompAblationReport> {
    let mut rows = Vec::new();
    let (mut alb, mut shd) = (vec![], vec![]);
    for &seed in &settings.seeds {
        let ord = ordinal_for(ordinal, seed)?;
        let with = runs.ensure(train, test, ord, settings, InputConfig::All, true, seed)?;
        let without = runs.ensure(train, test, ord, settings, InputConfig::All, false, seed)?;
        alb.push(with.eval.albedo.si_rmse < without.eval.albedo.si_rmse);
        shd.push(with.eval.shading.si_rmse <= without.eval.shading.si_rmse);
        rows.push(with);
        rows.push(without);
    }
    Ok(DecompAblationReport {
        settings: settings.clone(),
        rows,
        checks: vec![
            Check::new("albedo si-rmse: with albedo loss < without", &alb),
            Check::new("shading si-rmse: with albedo loss <= without", &shd),
        ],
    })
}

/// Decomposition networks fed with each of the four input configurations.
pub fn ablate_inputs(train: &TrainingSet, test: &[SceneSample], ordinal: &OrdinalNets, settings: &AblationSettings, runs: &mut DecompRuns) -> Result<DecompAblationReport> {
    let mut rows = Vec::new();
    let (mut ssim_ok, mut rmse_ok, mut d3r_ok, mut full_ok, mut base_ok) = (vec![], vec![], vec![], vec![], vec![]);
    for &seed in &settings.seeds {
        let ord = ordinal_for(ordinal, seed)?;
        let mut by = Vec::new();
        for c in InputConfig::ALL {
            let r = runs.ensure(train, test, ord, settings, c, true, seed)?;
            by.push(r.eval);
            rows.push(r);
        }
        let [all, full, base, rgb] = [by[0], by[1], by[2], by[3]];
        ssim_ok.push(all.shading.ssim >= rgb.shading.ssim);
        rmse_ok.push(all.shading.si_rmse <= rgb.shading.si_rmse);
        d3r_ok.push(le_opt(all.d3r, base.d3r));
        full_ok.push(all.shading.si_rmse <= full.shading.si_rmse);
        base_ok.push(all.shading.si_rmse <= base.shading.si_rmse);
    }
    Ok(DecompAblationReport {
        settings: settings.clone(),
        rows,
        checks: vec![
            Check::new("shading ssim: all >= rgb", &ssim_ok),
            Check::new("shading si-rmse: all <= rgb", &rmse_ok),
            Check::new("d3r: all <= rgb+base", &d3r_ok),
            Check::new("shading si-rmse: all <= rgb+full", &full_ok),
            Check::new("shading si-rmse: all <= rgb+base", &base_ok),
        ],
    })
}
