use std::path::{Path, PathBuf};
use std::str::FromStr;

use iid_core::edits::{material_edit, recolor, relight, PointLight};
use iid_core::image::{load_image, load_mask_png, read_pfm, save_preview_png, write_pfm, AlbedoMap, Map, ShadingMap};
use iid_core::metrics::{d3r, lmse, ord_metric, recon_mse, si_rmse, ssim, whdr, JudgmentSet, LmseParams, MetricReport, D3R_THRESHOLD, ORD_TAU};
use iid_core::model_io::load_model;
use iid_core::networks::{InputConfig, NetKind, UNet};
use iid_core::pipeline::{decompose, resample, write_outputs, DEFAULT_BASE_RES, OUTPUT_FILES};
use iid_core::pseudo_gt::{build_pseudo_dataset, find_scenes, PseudoConfig};
use iid_core::shading::inverse_of;
use iid_core::synth::{load_split, write_dataset, Split, SynthOptions};
use iid_core::training::{
    ablate_inputs, ablate_joint_loss, ablate_ordinal, config_hash, d3r_cell, eval_decomposition, eval_ordinal, train_decomposition,
    train_ordinal, AblationSettings, DecompRuns, DecompTrainConfig, OrdinalTrainConfig, OrdinalVariant, RunDir, TrainRun, TrainingSet,
};
use iid_core::Error;
use serde_json::{json, Value};

use crate::cleanup::Cleanup;
use crate::{
    AblateArgs, AblationKind, CmdResult, Command, DecomposeArgs, EditCmd, EvalCmd, EvalDenseArgs, EvalWhdrArgs, MaterialArgs, PseudoGtArgs,
    RecolorArgs, RelightArgs, SynthCmd, SynthGenArgs, TrainCmd, TrainCommon, TrainDecompArgs, TrainOrdinalArgs, VERSION,
};

pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (w, h) = (parse(w)?, parse(h)?);
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

pub fn parse_triple<T: FromStr + Copy + Default>(s: &str) -> Result<[T; 3], String>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut out = [T::default(); 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(out)
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

pub fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Synth(SynthCmd::Gen(a)) => synth_gen(a),
        Command::Train(TrainCmd::Ordinal(a)) => train_ordinal_cmd(a),
        Command::Train(TrainCmd::Decomp(a)) => train_decomp_cmd(a),
        Command::Decompose(a) => decompose_cmd(a),
        Command::PseudoGt(a) => pseudo_gt_cmd(a),
        Command::Eval(EvalCmd::Dense(a)) => eval_dense(a),
        Command::Eval(EvalCmd::Whdr(a)) => eval_whdr(a),
        Command::Edit(EditCmd::Recolor(a)) => edit_recolor(a),
        Command::Edit(EditCmd::Relight(a)) => edit_relight(a),
        Command::Edit(EditCmd::Material(a)) => edit_material(a),
        Command::Ablate(a) => ablate(a),
    }
}

/// A report with the command, its configuration and the build version.
fn report(command: &str, config: Value, body: Value) -> Value {
    let mut out = json!({ "command": command, "version": VERSION, "config": config });
    if let (Some(o), Value::Object(b)) = (out.as_object_mut(), body) {
        o.extend(b);
    }
    out
}

fn write_json(path: &Path, value: &Value) -> CmdResult {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Register `path` for cleanup and create its parent directory.
fn output_file(guard: &mut Cleanup, path: &Path) -> CmdResult<PathBuf> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        guard.dir(parent)?;
    }
    Ok(guard.file(path))
}

fn check_image_ext(path: &Path) -> CmdResult {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("pfm" | "png") => Ok(()),
        _ => Err(usage(format!("{}: output must end in .pfm or .png", path.display()))),
    }
}

fn save_image(map: &Map, path: &Path) -> CmdResult {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        save_preview_png(map, path)
    } else {
        write_pfm(map, path)
    }
}

fn load_net(path: &Path, kind: NetKind) -> CmdResult<(UNet, Value)> {
    let weights = load_model(path)?;
    let metadata = weights.header.metadata.clone();
    let net = weights.into_net().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if net.spec.kind != kind {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected a {kind:?} model, found {:?}", net.spec.kind),
        });
    }
    Ok((net, metadata))
}

fn model_base_res(metadata: &Value) -> usize {
    metadata
        .pointer("/decomposition/base_res")
        .and_then(Value::as_u64)
        .map_or(DEFAULT_BASE_RES, |v| v as usize)
}

fn typed<T>(path: &Path, map: Map, make: fn(Map) -> iid_core::Result<T>) -> CmdResult<T> {
    make(map).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn read_albedo(path: &Path) -> CmdResult<AlbedoMap> {
    typed(path, read_pfm(path)?, AlbedoMap::new)
}

fn read_shading(path: &Path) -> CmdResult<ShadingMap> {
    typed(path, read_pfm(path)?, ShadingMap::new)
}

fn synth_gen(a: SynthGenArgs) -> CmdResult {
    if a.scenes == 0 {
        return Err(usage("--scenes must be positive"));
    }
    let mut guard = Cleanup::new();
    guard.dir(&a.out)?;
    let opts = SynthOptions {
        specular: a.specular,
        ldr: a.ldr,
        multi_illum: a.multi_illum,
    };
    write_dataset(&a.out, a.scenes, a.size.0, a.size.1, a.seed, opts)?;
    let config = json!({
        "scenes": a.scenes,
        "width": a.size.0,
        "height": a.size.1,
        "seed": a.seed,
        "multi_illum": a.multi_illum,
        "specular": a.specular,
        "ldr": a.ldr,
    });
    let path = guard.file(a.out.join("dataset.json"));
    write_json(&path, &report("synth gen", config, json!({})))?;
    guard.keep();
    Ok(())
}

fn run_dir_for(common: &TrainCommon) -> PathBuf {
    common.run_dir.clone().unwrap_or_else(|| {
        let mut name = common.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".run");
        common.out.with_file_name(name)
    })
}

fn validation_scenes(roots: &[PathBuf]) -> CmdResult<Vec<iid_core::synth::SceneSample>> {
    let mut out = Vec::new();
    for r in roots {
        out.extend(load_split(r, Split::Val)?);
    }
    Ok(out)
}

/// Copy the final weights, write the run report and turn divergence into a
/// numeric failure that keeps the artifacts.
fn finish_training(guard: Cleanup, run_dir: &RunDir, out: &Path, run: &TrainRun, command: &str, config: Value, validation: Value) -> CmdResult {
    let src = run_dir.path.join("weights_final.bin");
    std::fs::copy(&src, out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let body = json!({
        "config_hash": run.config_hash,
        "iterations": run.log.len(),
        "final_loss": run.log.last().map(|r| r.total),
        "diverged_at": run.diverged_at,
        "validation": validation,
    });
    write_json(&run_dir.path.join("report.json"), &report(command, config, body))?;
    guard.keep();
    match run.diverged_at {
        Some(it) => Err(Error::NonFinite(format!(
            "training diverged at iteration {it}; last finite weights saved to {}",
            out.display()
        ))),
        None => Ok(()),
    }
}

fn prepare_run(common: &TrainCommon, guard: &mut Cleanup) -> CmdResult<RunDir> {
    output_file(guard, &common.out)?;
    let path = run_dir_for(common);
    guard.dir(&path)?;
    for f in ["config.json", "loss_log.csv", "weights_final.bin", "report.json"] {
        guard.file(path.join(f));
    }
    RunDir::create(path)
}

fn train_ordinal_cmd(a: TrainOrdinalArgs) -> CmdResult {
    let c = &a.common;
    let d = OrdinalTrainConfig::default();
    let cfg = OrdinalTrainConfig {
        variant: a.variant.parse()?,
        iters: c.iters.unwrap_or(d.iters),
        batch: c.batch.unwrap_or(d.batch),
        lr: c.lr.unwrap_or(d.lr),
        seed: c.seed,
        res: c.res.unwrap_or(d.res),
        base_channels: c.base_channels.unwrap_or(d.base_channels),
        log_every: c.log_every.unwrap_or(d.log_every),
        checkpoint_every: c.checkpoint_every.unwrap_or(d.checkpoint_every),
        loss: d.loss,
    };
    let data = TrainingSet::load(&c.data, Split::Train)?;
    log::info!("training ordinal network ({}) on {} samples", cfg.variant.name(), data.len());
    let mut guard = Cleanup::new();
    let run_dir = prepare_run(c, &mut guard)?;
    let run = train_ordinal(&data, &cfg, Some(&run_dir))?;
    let val = validation_scenes(&c.data)?;
    let validation = if val.is_empty() {
        Value::Null
    } else {
        serde_json::to_value(eval_ordinal(&run.net, cfg.variant, &val, cfg.res, iid_core::metrics::ORD_PAIRS, cfg.seed)?)?
    };
    let config = json!({ "data": c.data, "training": cfg });
    finish_training(guard, &run_dir, &c.out, &run, "train ordinal", config, validation)
}

fn train_decomp_cmd(a: TrainDecompArgs) -> CmdResult {
    let c = &a.common;
    let d = DecompTrainConfig::default();
    let cfg = DecompTrainConfig {
        inputs: a.inputs.parse::<InputConfig>()?,
        use_albedo_loss: !a.no_albedo_loss,
        iters: c.iters.unwrap_or(d.iters),
        batch: c.batch.unwrap_or(d.batch),
        lr: c.lr.unwrap_or(d.lr),
        seed: c.seed,
        res: c.res.unwrap_or(d.res),
        base_res: a.base_res.unwrap_or(d.base_res),
        base_channels: c.base_channels.unwrap_or(d.base_channels),
        log_every: c.log_every.unwrap_or(d.log_every),
        checkpoint_every: c.checkpoint_every.unwrap_or(d.checkpoint_every),
        loss: d.loss,
    };
    let (ordinal, _) = load_net(&a.ordinal, NetKind::Ordinal)?;
    let data = TrainingSet::load(&c.data, Split::Train)?;
    log::info!("training decomposition network ({}) on {} samples", cfg.inputs.name(), data.len());
    let mut guard = Cleanup::new();
    let run_dir = prepare_run(c, &mut guard)?;
    let run = train_decomposition(&data, &ordinal, &cfg, Some(&run_dir))?;
    let val = validation_scenes(&c.data)?;
    let validation = if val.is_empty() {
        Value::Null
    } else {
        serde_json::to_value(eval_decomposition(&ordinal, &run.net, &val, cfg.base_res)?)?
    };
    let config = json!({ "data": c.data, "ordinal": a.ordinal, "training": cfg });
    finish_training(guard, &run_dir, &c.out, &run, "train decomp", config, validation)
}

fn decompose_cmd(a: DecomposeArgs) -> CmdResult {
    let image = load_image(&a.image)?;
    let (ordinal, _) = load_net(&a.ordinal, NetKind::Ordinal)?;
    let (decomp, meta) = load_net(&a.decomp, NetKind::Decomposition)?;
    let base_res = a.base_res.unwrap_or_else(|| model_base_res(&meta));
    if a.cap == 0 || base_res == 0 {
        return Err(usage("--cap and --base-res must be positive"));
    }
    let mut guard = Cleanup::new();
    guard.dir(&a.out_dir)?;
    for f in OUTPUT_FILES.iter().chain(["report.json"].iter()) {
        guard.file(a.out_dir.join(f));
    }
    let dec = decompose(&image, &ordinal, &decomp, base_res, a.cap)?;
    write_outputs(&dec, &a.out_dir)?;
    let config = json!({
        "image": a.image,
        "ordinal": a.ordinal,
        "decomp": a.decomp,
        "cap": a.cap,
        "base_res": base_res,
    });
    write_json(&a.out_dir.join("report.json"), &report("decompose", config, json!({ "plan": dec.plan })))?;
    guard.keep();
    Ok(())
}

fn pseudo_gt_cmd(a: PseudoGtArgs) -> CmdResult {
    let (ordinal, _) = load_net(&a.ordinal, NetKind::Ordinal)?;
    let (decomp, meta) = load_net(&a.decomp, NetKind::Decomposition)?;
    let cfg = PseudoConfig {
        base_res: a.base_res.unwrap_or_else(|| model_base_res(&meta)),
        cap: a.cap,
    };
    if find_scenes(&a.scenes)?.is_empty() {
        return Err(Error::Format {
            path: a.scenes.clone(),
            reason: "no scene directories".into(),
        });
    }
    let mut guard = Cleanup::new();
    guard.dir(&a.out)?;
    let result = build_pseudo_dataset(&a.scenes, &a.out, &ordinal, &decomp, &cfg)?;
    log::info!("exported {} of {} scenes", result.exported(), result.scenes.len());
    let config = json!({ "scenes": a.scenes, "ordinal": a.ordinal, "decomp": a.decomp, "pseudo": cfg });
    let path = guard.file(a.out.join("report.json"));
    write_json(&path, &report("pseudo-gt", config, json!({ "exported": result.exported(), "scenes": result.scenes })))?;
    guard.keep();
    Ok(())
}

const DENSE_METRICS: [&str; 6] = ["lmse", "rmse", "ssim", "ord", "d3r", "recon"];

fn fit_dims(map: Map, w: usize, h: usize) -> CmdResult<Map> {
    if map.dims() == (w, h) {
        Ok(map)
    } else {
        Ok(resample(&map, w, h)?.map(|v| v.max(0.0)))
    }
}

fn eval_dense(a: EvalDenseArgs) -> CmdResult {
    let metrics: Vec<String> = a.metrics.split(',').map(|m| m.trim().to_ascii_lowercase()).filter(|m| !m.is_empty()).collect();
    if metrics.is_empty() {
        return Err(usage("--metrics is empty"));
    }
    if let Some(m) = metrics.iter().find(|m| !DENSE_METRICS.contains(&m.as_str())) {
        return Err(usage(format!("unknown metric {m:?}; expected one of {}", DENSE_METRICS.join(","))));
    }
    let wants = |m: &str| metrics.iter().any(|x| x == m);
    let needs_gt = metrics.iter().any(|m| m != "recon");
    let gt_dir = match (&a.gt, needs_gt) {
        (Some(g), _) => Some(g.clone()),
        (None, true) => return Err(usage("--gt is required for metrics other than recon")),
        (None, false) => None,
    };
    let pred_albedo = read_albedo(&a.pred.join("albedo.pfm"))?;
    let pred_shading = read_shading(&a.pred.join("shading.pfm"))?;
    let mut rep = MetricReport::default();
    rep.param("seed", a.seed);
    if wants("recon") {
        let input_path = a.pred.join("input.pfm");
        let input = read_pfm(&input_path)?;
        rep.set("recon", Some(recon_mse(&pred_albedo, &pred_shading, &input)?));
    }
    if let Some(gt) = gt_dir {
        let gt_albedo = read_albedo(&gt.join("albedo.pfm"))?;
        let gt_shading = read_shading(&gt.join("shading.pfm"))?;
        gt_albedo.ensure_dims(&gt_shading, "ground truth")?;
        let (w, h) = gt_albedo.dims();
        let albedo = fit_dims(pred_albedo.into_map(), w, h)?;
        let shading = fit_dims(pred_shading.into_map(), w, h)?;
        if wants("lmse") {
            rep.param("lmse", LmseParams::for_size(w, h, 0.1));
            rep.set("shading.lmse", Some(lmse(&shading, &gt_shading)?));
            rep.set("albedo.lmse", Some(lmse(&albedo, &gt_albedo)?));
        }
        if wants("rmse") {
            rep.set("shading.si_rmse", Some(si_rmse(shading.data(), gt_shading.data())?));
            rep.set("albedo.si_rmse", Some(si_rmse(albedo.data(), gt_albedo.data())?));
        }
        if wants("ssim") {
            rep.set("shading.ssim", Some(ssim(&shading, &gt_shading)?));
            rep.set("albedo.ssim", Some(ssim(&albedo, &gt_albedo)?));
        }
        if wants("ord") || wants("d3r") {
            let inv_path = a.pred.join("inv_shading.pfm");
            let pred_d = if inv_path.is_file() {
                fit_dims(read_pfm(&inv_path)?, w, h)?
            } else {
                shading.map(|v| inverse_of(v as f64) as f32)
            };
            let gt_d = gt_shading.map(|v| inverse_of(v as f64) as f32);
            if wants("ord") {
                let o = ord_metric(&pred_d, &gt_d, a.pairs, ORD_TAU, a.seed)?;
                rep.param("ord_pairs", o.pairs);
                rep.param("ord_tau", ORD_TAU);
                rep.set("ord", Some(o.error));
                rep.set("ord.ordered", o.error_ordered);
                rep.set("ord.equal", o.error_equal);
            }
            if wants("d3r") {
                let cell = d3r_cell(w, h);
                let r = d3r(&pred_d, &gt_d, cell, D3R_THRESHOLD)?;
                rep.param("d3r_cell", cell);
                rep.param("d3r_pairs", r.pairs);
                rep.set("d3r", r.value);
            }
        }
    }
    for (k, v) in &rep.values {
        match v {
            Some(v) => println!("{k} {v:.9e}"),
            None => println!("{k} undefined"),
        }
    }
    if let Some(path) = &a.report {
        let mut guard = Cleanup::new();
        let path = output_file(&mut guard, path)?;
        let config = json!({ "pred": a.pred, "gt": a.gt, "metrics": metrics, "seed": a.seed, "pairs": a.pairs });
        write_json(&path, &report("eval dense", config, json!({ "metrics": rep })))?;
        guard.keep();
    }
    Ok(())
}

fn eval_whdr(a: EvalWhdrArgs) -> CmdResult {
    if !a.shift.is_finite() || !(a.delta >= 0.0) {
        return Err(usage("--shift must be finite and --delta non-negative"));
    }
    let albedo: Map = if a.albedo.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        load_image(&a.albedo)?.into_map()
    } else {
        read_pfm(&a.albedo)?
    };
    let set = JudgmentSet::load(&a.judgments)?;
    let shifted = albedo.map(|v| v + a.shift as f32);
    let value = whdr(&shifted, &set, a.delta)?;
    println!("whdr {value:.9e}");
    if let Some(path) = &a.report {
        let mut guard = Cleanup::new();
        let path = output_file(&mut guard, path)?;
        let config = json!({ "albedo": a.albedo, "judgments": a.judgments, "shift": a.shift, "delta": a.delta });
        write_json(&path, &report("eval whdr", config, json!({ "whdr": value, "judgments": set.pairs.len() })))?;
        guard.keep();
    }
    Ok(())
}

fn load_mask(path: &Path) -> CmdResult<Map> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")) {
        let m = read_pfm(path)?;
        if m.channels() != 1 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "mask must have one channel".into(),
            });
        }
        Ok(m)
    } else {
        load_mask_png(path)
    }
}

fn edit_recolor(a: RecolorArgs) -> CmdResult {
    check_image_ext(&a.out)?;
    let albedo = read_albedo(&a.albedo)?;
    let shading = read_shading(&a.shading)?;
    let mask = load_mask(&a.mask)?;
    let out = recolor(&albedo, &shading, &mask, a.color, a.preserve_luminance)?;
    let mut guard = Cleanup::new();
    let path = output_file(&mut guard, &a.out)?;
    save_image(&out, &path)?;
    guard.keep();
    Ok(())
}

fn edit_relight(a: RelightArgs) -> CmdResult {
    check_image_ext(&a.out)?;
    if let Some(p) = &a.shading_out {
        check_image_ext(p)?;
    }
    let albedo = read_albedo(&a.albedo)?;
    let normals = read_pfm(&a.normals)?;
    let light = PointLight {
        position: a.light,
        intensity: a.intensity,
        ambient: a.ambient,
    };
    let (shading, image) = relight(&albedo, &normals, &light)?;
    let mut guard = Cleanup::new();
    let path = output_file(&mut guard, &a.out)?;
    save_image(&image, &path)?;
    if let Some(p) = &a.shading_out {
        let p = output_file(&mut guard, p)?;
        save_image(&shading, &p)?;
    }
    guard.keep();
    Ok(())
}

fn edit_material(a: MaterialArgs) -> CmdResult {
    check_image_ext(&a.out)?;
    if let Some(p) = &a.shading_out {
        check_image_ext(p)?;
    }
    let albedo = read_albedo(&a.albedo)?;
    let shading = read_shading(&a.shading)?;
    albedo.ensure_dims(&shading, "material edit")?;
    let edited = material_edit(&shading, a.gamma)?;
    let image = albedo.mul_broadcast(&edited)?;
    let mut guard = Cleanup::new();
    let path = output_file(&mut guard, &a.out)?;
    save_image(&image, &path)?;
    if let Some(p) = &a.shading_out {
        let p = output_file(&mut guard, p)?;
        save_image(&edited, &p)?;
    }
    guard.keep();
    Ok(())
}

fn ablation_settings(a: &AblateArgs) -> CmdResult<AblationSettings> {
    let seeds = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| usage(format!("--seeds: {s:?}: {e}"))))
        .collect::<CmdResult<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(usage("--seeds is empty"));
    }
    let d = AblationSettings::default();
    let ordinal = OrdinalTrainConfig {
        iters: a.ordinal_iters.unwrap_or(d.ordinal.iters),
        batch: a.batch.unwrap_or(d.ordinal.batch),
        lr: a.lr.unwrap_or(d.ordinal.lr),
        res: a.ordinal_res.unwrap_or(d.ordinal.res),
        base_channels: a.base_channels.unwrap_or(d.ordinal.base_channels),
        checkpoint_every: 0,
        ..d.ordinal
    };
    let decomp = DecompTrainConfig {
        iters: a.decomp_iters.unwrap_or(d.decomp.iters),
        batch: a.batch.unwrap_or(d.decomp.batch),
        lr: a.lr.unwrap_or(d.decomp.lr),
        res: a.decomp_res.unwrap_or(d.decomp.res),
        base_res: a.base_res.unwrap_or(d.decomp.base_res),
        base_channels: a.base_channels.unwrap_or(d.decomp.base_channels),
        checkpoint_every: 0,
        ..d.decomp
    };
    Ok(AblationSettings {
        ordinal,
        decomp,
        seeds,
        ord_pairs: a.ord_pairs.unwrap_or(d.ord_pairs),
        eval_seed: a.eval_seed,
    })
}

fn ablate(a: AblateArgs) -> CmdResult {
    let settings = ablation_settings(&a)?;
    let train = TrainingSet::load(std::slice::from_ref(&a.data), Split::Train)?;
    let test = load_split(&a.data, Split::Test)?;
    if test.is_empty() {
        return Err(Error::Format {
            path: a.data.clone(),
            reason: "no test scenes".into(),
        });
    }
    let body = match a.kind {
        AblationKind::Ordinal => {
            let (rep, _) = ablate_ordinal(&train, &test, &settings, &OrdinalVariant::ALL)?;
            json!({ "name": "ordinal", "rows": rep.rows, "checks": rep.checks, "rankings": rep.rankings })
        }
        AblationKind::JointLoss | AblationKind::Inputs => {
            let (ord, nets) = ablate_ordinal(&train, &test, &settings, &[OrdinalVariant::SsiInverse])?;
            let mut runs = DecompRuns::default();
            let (name, rep) = if a.kind == AblationKind::JointLoss {
                ("joint-loss", ablate_joint_loss(&train, &test, &nets, &settings, &mut runs)?)
            } else {
                ("inputs", ablate_inputs(&train, &test, &nets, &settings, &mut runs)?)
            };
            json!({ "name": name, "rows": rep.rows, "checks": rep.checks, "ordinal_rows": ord.rows })
        }
    };
    let config = json!({ "data": a.data, "settings": settings, "settings_hash": config_hash(&settings), "test_scenes": test.len() });
    let mut guard = Cleanup::new();
    let path = output_file(&mut guard, &a.out)?;
    write_json(&path, &report("ablate", config, body))?;
    guard.keep();
    Ok(())
}
