//! Acceptance suite. Every test prints one `[NN] name: PASS|FAIL (detail)`
//! line before asserting. Tests hold a shared lock so that runtimes are
//! measured without competing for the CPU.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use iid_core::image::{load_image, save_png16, write_pfm, AlbedoMap, LinearImage, Map, REC709};
use iid_core::losses::{decomposition_loss, ordinal_loss, ordinal_loss_value, FitKind, LossConfig};
use iid_core::metrics::{d3r, lmse_with, ord_metric, si_mse, ssim, whdr, Darker, Judgment, JudgmentSet, LmseParams, WHDR_DELTA};
use iid_core::networks::{InputConfig, UNet, UNetSpec};
use iid_core::pipeline::{compute_r0, decompose, dims_for, resample, EDGE_THRESHOLD, MIN_EDGE_PIXELS};
use iid_core::pseudo_gt::median_albedo;
use iid_core::shading::{inverse_of, shading_of};
use iid_core::synth::{generate, load_split, write_dataset, Scene, SceneSpec, Split, SynthOptions};
use iid_core::training::{
    ablate_inputs, ablate_joint_loss, ablate_ordinal, AblationSettings, DecompAblationReport, DecompRuns, DecompTrainConfig,
    OrdinalAblationReport, OrdinalTrainConfig, OrdinalVariant, TrainingSet,
};
use iid_tensor::{gradient_check, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    println!("[{id:02}] {name}: {} ({})", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    assert!(pass, "[{id:02}] {name} failed: {}", detail.as_ref());
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_map(r: &mut ChaCha8Rng, w: usize, h: usize, c: usize, lo: f32, hi: f32) -> Map {
    Map::from_fn(w, h, c, |_, _, _| r.gen_range(lo..hi))
}

fn synthetic(seed: u64, w: usize, h: usize, specular: bool) -> Scene {
    generate(&SceneSpec::random(seed, w, h, specular), false).unwrap()
}

#[test]
fn c01_reconstruction_identity() {
    let _guard = exclusive();
    let start = Instant::now();
    let ordinal = UNet::init(UNetSpec::ordinal(4), 11).unwrap();
    let decomp = UNet::init(UNetSpec::decomposition(4, InputConfig::All), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(1);
    let mut images = Vec::new();
    for i in 0..25 {
        let (w, h) = (r.gen_range(20..72), r.gen_range(20..72));
        images.push(synthetic(1000 + i, w, h, i % 3 == 0).image);
    }
    for i in 0..25 {
        let (w, h) = (r.gen_range(16..80), r.gen_range(16..80));
        let freq = r.gen_range(0.05f32..0.6);
        let noise = random_map(&mut r, w, h, 3, 0.0, 1.0);
        let content = Map::from_fn(w, h, 3, |c, y, x| {
            let wave = 0.5 + 0.5 * ((x as f32 * freq).sin() * (y as f32 * freq * 0.7 + c as f32).cos());
            (0.6 * wave + 0.4 * noise.get(c, y, x)).clamp(0.0, 1.0)
        });
        let path = dir.path().join(format!("arbitrary_{i}.png"));
        save_png16(&content, &path).unwrap();
        images.push(load_image(&path).unwrap());
    }
    let mut worst = 0.0f64;
    for img in &images {
        let dec = decompose(img, &ordinal, &decomp, 16, 64).unwrap();
        let err = iid_core::metrics::recon_mse(&dec.albedo, &dec.shading, &dec.image).unwrap();
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "reconstruction identity",
        worst <= 1e-10 && images.len() == 50 && elapsed < Duration::from_secs(60),
        format!("{} inputs, max recon mse {worst:.3e}, {:.1}s", images.len(), elapsed.as_secs_f64()),
    );
}

fn graph_ord(o: &Tensor, d: &Tensor) -> f64 {
    let mut g = Graph::new();
    let v = g.input(o.clone());
    let l = ordinal_loss(&mut g, v, d, FitKind::Affine, None, &LossConfig::default()).unwrap();
    g.value(l.ord).item() as f64
}

#[test]
fn c02_ordinal_loss_affine_invariance() {
    let _guard = exclusive();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (w, h) = (r.gen_range(4..17), r.gen_range(4..17));
        let o: Vec<f32> = (0..w * h).map(|_| r.gen_range(0.0..1.0)).collect();
        let d: Vec<f32> = (0..w * h).map(|_| r.gen_range(0.0..1.0)).collect();
        let alpha = r.gen_range(0.1f32..10.0);
        let beta = r.gen_range(-1.0f32..1.0);
        let moved: Vec<f32> = o.iter().map(|v| alpha * v + beta).collect();
        let (a, _) = ordinal_loss_value(&o, &d, None).unwrap();
        let (b, _) = ordinal_loss_value(&moved, &d, None).unwrap();
        let ot = Tensor::new([1, 1, h, w], o).unwrap();
        let mt = Tensor::new([1, 1, h, w], moved).unwrap();
        let dt = Tensor::new([1, 1, h, w], d).unwrap();
        let (ga, gb) = (graph_ord(&ot, &dt), graph_ord(&mt, &dt));
        worst = worst.max((a - b).abs()).max((ga - gb).abs());
    }
    verdict(2, "ordinal loss affine invariance", worst <= 1e-6, format!("1000 cases, max |dL| {worst:.3e}"));
}

#[test]
fn c03_inverse_roundtrip() {
    let _guard = exclusive();
    let mut grid: Vec<f64> = (0..=10_000).map(|i| i as f64).collect();
    grid.extend((0..=1200).map(|i| 10f64.powf(-8.0 + i as f64 / 100.0)));
    let mut worst = 0.0f64;
    for &s in &grid {
        let back = shading_of(inverse_of(s));
        let err = if s == 0.0 { back.abs() } else { (back - s).abs() / s };
        worst = worst.max(err);
    }
    verdict(3, "inverse-domain roundtrip", worst <= 1e-6, format!("{} values in [0, 1e4], max rel err {worst:.3e}", grid.len()));
}

fn uniform(r: &mut ChaCha8Rng, shape: [usize; 4], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| r.gen_range(lo..hi))
}

fn signed(r: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = r.gen_range(0.05f32..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> iid_tensor::Result<Var>>;

#[test]
fn c04_gradient_correctness() {
    let _guard = exclusive();
    let start = Instant::now();
    let mut r = rng(4);
    let x = uniform(&mut r, [2, 3, 6, 6], -1.0, 1.0);
    let y = uniform(&mut r, [2, 3, 6, 6], -1.0, 1.0);
    let yc = uniform(&mut r, [2, 1, 6, 6], -1.0, 1.0);
    let ys = uniform(&mut r, [2, 1, 1, 1], -1.0, 1.0);
    let pos = uniform(&mut r, [2, 3, 6, 6], 0.2, 2.0);
    let den = uniform(&mut r, [2, 1, 6, 6], 0.3, 1.5);
    let sx = signed(&mut r, [2, 3, 6, 6]);
    let w3 = uniform(&mut r, [4, 3, 3, 3], -0.5, 0.5);
    let w1 = uniform(&mut r, [4, 3, 1, 1], -0.5, 0.5);
    let b = uniform(&mut r, [1, 4, 1, 1], -0.5, 0.5);
    let spread = Tensor::from_fn([1, 2, 4, 4], |_, c, y, x| -0.9 + 0.12 * (c * 16 + y * 4 + x) as f32 + 0.011);
    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        ("conv2d", vec![x.clone(), w3.clone(), b.clone()], Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1))),
        ("conv2d stride 2", vec![x.clone(), w3, b.clone()], Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 1))),
        ("conv2d 1x1", vec![x.clone(), w1, b], Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 0))),
        ("resize_bilinear", vec![x.clone()], Box::new(|g, v| g.resize_bilinear(v[0], 9, 4))),
        ("avg_pool2", vec![uniform(&mut r, [1, 2, 7, 6], -1.0, 1.0)], Box::new(|g, v| g.avg_pool2(v[0]))),
        ("add", vec![x.clone(), y.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![x.clone(), yc.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![x.clone(), yc.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("mul per-item", vec![ys, x.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("div", vec![x.clone(), den], Box::new(|g, v| g.div(v[0], v[1]))),
        ("leaky_relu", vec![sx.clone()], Box::new(|g, v| g.leaky_relu(v[0], 0.1))),
        ("sigmoid", vec![x.clone()], Box::new(|g, v| g.sigmoid(v[0]))),
        ("log", vec![pos.clone()], Box::new(|g, v| g.log(v[0]))),
        ("pow", vec![pos.clone()], Box::new(|g, v| g.pow(v[0], 1.7))),
        ("abs", vec![sx.clone()], Box::new(|g, v| g.abs(v[0]))),
        ("add_scalar", vec![x.clone()], Box::new(|g, v| g.add_scalar(v[0], 0.3))),
        ("mul_scalar", vec![x.clone()], Box::new(|g, v| g.mul_scalar(v[0], -1.7))),
        ("rsub_scalar", vec![x.clone()], Box::new(|g, v| g.rsub_scalar(v[0], 1.0))),
        ("clamp", vec![spread], Box::new(|g, v| g.clamp(v[0], -0.5, 0.5))),
        ("concat_channels", vec![x.clone(), yc], Box::new(|g, v| g.concat_channels(&[v[0], v[1]]))),
        ("crop", vec![x.clone()], Box::new(|g, v| g.crop(v[0], 4, 5))),
        ("diff_x", vec![x.clone()], Box::new(|g, v| g.diff_x(v[0]))),
        ("diff_y", vec![x.clone()], Box::new(|g, v| g.diff_y(v[0]))),
        ("sum", vec![x.clone()], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![x], Box::new(|g, v| g.mean(v[0]))),
    ];
    let mut errors = BTreeMap::new();
    for (name, inputs, build) in &cases {
        let rep = gradient_check(inputs, 1e-3, 7, build).unwrap();
        errors.insert(name.to_string(), rep.max_rel_err);
    }
    // Full decomposition loss. Targets sit a ramp away from the prediction:
    // its offset and per-pixel slope exceed what a step of h can move `D`,
    // `A` or their differences, so no L1 kink is crossed. A small ramp keeps
    // the loss value, and with it the f32 rounding in the differences, small.
    let (h, w) = (12, 12);
    let d = uniform(&mut r, [2, 1, h, w], 0.2, 0.5);
    let image = uniform(&mut r, [2, 3, h, w], 0.1, 1.0);
    let ramp = |c: usize, y: usize, x: usize| 0.02 + 0.006 * x as f32 + 0.008 * y as f32 + 0.002 * c as f32;
    let d_star = Tensor::from_fn([2, 1, h, w], |n, c, y, x| d.get(n, c, y, x) + ramp(c, y, x));
    let a_star = Tensor::from_fn([2, 3, h, w], |n, c, y, x| {
        let dv = d.get(n, 0, y, x);
        image.get(n, c, y, x) * dv / (1.0 - dv) + ramp(c, y, x)
    });
    let cfg = LossConfig::default();
    let rep = gradient_check(&[d], 1e-3, 7, |g, v| {
        decomposition_loss(g, v[0], &image, &d_star, &a_star, &cfg)
            .map(|l| l.total)
            .map_err(|e| match e {
                iid_core::Error::Tensor(t) => t,
                other => panic!("{other}"),
            })
    })
    .unwrap();
    errors.insert("decomposition_loss".into(), rep.max_rel_err);
    let worst = errors.values().cloned().fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let failing: Vec<_> = errors.iter().filter(|(_, &e)| e >= 1e-3).map(|(n, e)| format!("{n}={e:.2e}")).collect();
    verdict(
        4,
        "gradient correctness",
        failing.is_empty() && elapsed < Duration::from_secs(120),
        format!("{} graphs, max rel err {worst:.3e}, {:.1}s{}", errors.len(), elapsed.as_secs_f64(), failing.iter().map(|f| format!(" {f}")).collect::<String>()),
    );
}

#[test]
fn c05_median_robustness() {
    let _guard = exclusive();
    let mut r = rng(5);
    let (w, h) = (9, 7);
    let mut all_exact = true;
    let mut trials = 0;
    for _ in 0..200 {
        let truth = random_map(&mut r, w, h, 3, 0.0, 1.0);
        let mut stack: Vec<Vec<f32>> = vec![truth.data().to_vec(); 25];
        for i in 0..truth.data().len() {
            let k = r.gen_range(0..=12);
            let mut idx: Vec<usize> = (0..25).collect();
            for j in 0..k {
                let pick = r.gen_range(j..25);
                idx.swap(j, pick);
                stack[idx[j]][i] = match r.gen_range(0..4) {
                    0 => 0.0,
                    1 => f32::MAX,
                    2 => r.gen_range(0.0..1e6),
                    _ => truth.data()[i] * r.gen_range(0.5..2.0),
                };
            }
        }
        let maps: Vec<AlbedoMap> = stack
            .into_iter()
            .map(|d| AlbedoMap::new(Map::new(w, h, 3, d).unwrap()).unwrap())
            .collect();
        let m = median_albedo(&maps).unwrap();
        all_exact &= m.data().iter().zip(truth.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        trials += 1;
    }
    verdict(5, "median pseudo-GT robustness", all_exact, format!("{trials} stacks of 25 with up to 12 corrupted estimates per pixel"));
}

/// Shared state of the three training ablations.
struct Ablations {
    ordinal: OrdinalAblationReport,
    joint: DecompAblationReport,
    inputs: DecompAblationReport,
    times: [Duration; 3],
    test_scenes: usize,
}

const ABLATION_SCENES: usize = 500;
const ABLATION_SIZE: usize = 64;

fn ablation_settings() -> AblationSettings {
    AblationSettings {
        ordinal: OrdinalTrainConfig {
            iters: 2000,
            batch: 4,
            lr: 1e-3,
            res: 32,
            base_channels: 8,
            log_every: 0,
            checkpoint_every: 0,
            ..Default::default()
        },
        decomp: DecompTrainConfig {
            iters: 1400,
            batch: 4,
            lr: 1e-3,
            res: ABLATION_SIZE,
            base_res: 32,
            base_channels: 8,
            log_every: 0,
            checkpoint_every: 0,
            ..Default::default()
        },
        seeds: vec![0, 1, 2],
        ord_pairs: 20_000,
        eval_seed: 0,
    }
}

fn ablations() -> &'static Ablations {
    static CELL: OnceLock<Ablations> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let opts = SynthOptions {
            specular: true,
            ..Default::default()
        };
        write_dataset(&root, ABLATION_SCENES, ABLATION_SIZE, ABLATION_SIZE, 2024, opts).unwrap();
        let train = TrainingSet::load(&[root.clone()], Split::Train).unwrap();
        let test = load_split(&root, Split::Test).unwrap();
        let settings = ablation_settings();
        let t = Instant::now();
        let (ordinal, nets) = ablate_ordinal(&train, &test, &settings, &[OrdinalVariant::SsiInverse, OrdinalVariant::SiShading]).unwrap();
        let t_ord = t.elapsed();
        let mut runs = DecompRuns::default();
        let t = Instant::now();
        let joint = ablate_joint_loss(&train, &test, &nets, &settings, &mut runs).unwrap();
        let t_joint = t.elapsed();
        let t = Instant::now();
        let inputs = ablate_inputs(&train, &test, &nets, &settings, &mut runs).unwrap();
        let t_inputs = t.elapsed();
        Ablations {
            ordinal,
            joint,
            inputs,
            times: [t_ord, t_joint, t_inputs],
            test_scenes: test.len(),
        }
    })
}

fn describe(checks: &[iid_core::training::Check]) -> String {
    checks.iter().map(|c| format!("{} {}/{}", c.name, c.wins, c.seeds)).collect::<Vec<_>>().join("; ")
}

#[test]
fn c06_ordinal_ablation_ordering() {
    let _guard = exclusive();
    let a = ablations();
    for r in &a.ordinal.rows {
        println!("    {} seed {}: {:?} diverged_at {:?}", r.variant.name(), r.seed, r.eval, r.diverged_at);
    }
    let holds = a.ordinal.checks.len() == 4 && a.ordinal.checks.iter().all(|c| c.holds);
    verdict(
        6,
        "ordinal ablation ordering",
        holds && a.test_scenes >= 50 && a.times[0] <= Duration::from_secs(45 * 60),
        format!("{} test scenes, {:.0}s; {}", a.test_scenes, a.times[0].as_secs_f64(), describe(&a.ordinal.checks)),
    );
}

#[test]
fn c07_joint_loss_ablation_ordering() {
    let _guard = exclusive();
    let a = ablations();
    for r in &a.joint.rows {
        println!("    albedo loss {} seed {}: {:?}", r.use_albedo_loss, r.seed, r.eval);
    }
    let holds = a.joint.checks[0].holds;
    verdict(
        7,
        "joint-loss ablation ordering",
        holds && a.times[1] <= Duration::from_secs(30 * 60),
        format!("{:.0}s; {}", a.times[1].as_secs_f64(), describe(&a.joint.checks)),
    );
}

#[test]
fn c08_input_ablation_ordering() {
    let _guard = exclusive();
    let a = ablations();
    for r in &a.inputs.rows {
        println!("    {} seed {}: {:?}", r.inputs.name(), r.seed, r.eval);
    }
    let holds = a.inputs.checks[..3].iter().all(|c| c.holds);
    verdict(
        8,
        "input ablation ordering",
        holds && a.times[2] <= Duration::from_secs(45 * 60),
        format!("{:.0}s; {}", a.times[2].as_secs_f64(), describe(&a.inputs.checks)),
    );
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_iid")
}

fn run_cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(bin()).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "iid {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn c09_whdr_shift_exploit() {
    let _guard = exclusive();
    let mut r = rng(9);
    let (w, h) = (48, 48);
    // Piecewise-constant albedo on a 6x6 grid of patches.
    let patches: Vec<f32> = (0..36).map(|_| r.gen_range(0.1..0.9)).collect();
    let truth = Map::from_fn(w, h, 3, |_, y, x| patches[(y / 8) * 6 + x / 8]);
    let noisy = Map::from_fn(w, h, 3, |c, y, x| truth.get(c, y, x) * (1.0 + r.gen_range(-0.25f32..0.25)));
    let mut pairs = Vec::new();
    while pairs.len() < 600 {
        let p = [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
        let sample = |x: f64, y: f64| truth.get(0, ((y * h as f64) as usize).min(h - 1), ((x * w as f64) as usize).min(w - 1)) as f64;
        let darker = iid_core::metrics::judge(sample(p[0], p[1]), sample(p[2], p[3]), WHDR_DELTA);
        let equal_share = pairs.iter().filter(|j: &&Judgment| j.darker == Darker::Equal).count() as f64 / pairs.len().max(1) as f64;
        if darker != Darker::Equal && equal_share < 0.65 {
            continue;
        }
        pairs.push(Judgment { x1: p[0], y1: p[1], x2: p[2], y2: p[3], darker, weight: 1.0 });
    }
    let set = JudgmentSet { pairs };
    let equal = set.pairs.iter().filter(|j| j.darker == Darker::Equal).count() as f64 / set.pairs.len() as f64;
    let plain = whdr(&noisy, &set, WHDR_DELTA).unwrap();
    let shifted = whdr(&noisy.map(|v| v + 0.5), &set, WHDR_DELTA).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("noisy.pfm");
    let j = dir.path().join("judgments.json");
    write_pfm(&noisy, &a).unwrap();
    std::fs::write(&j, serde_json::to_string(&set).unwrap()).unwrap();
    let cli = |shift: &str| -> f64 {
        let out = run_cli(&["eval", "whdr", "--albedo", a.to_str().unwrap(), "--judgments", j.to_str().unwrap(), "--shift", shift]);
        String::from_utf8(out.stdout).unwrap().trim().strip_prefix("whdr ").unwrap().parse().unwrap()
    };
    let (cli_plain, cli_shifted) = (cli("0"), cli("0.5"));
    verdict(
        9,
        "WHDR shift exploit",
        equal >= 0.6 && shifted < plain && cli_shifted < cli_plain,
        format!("{:.0}% equal labels, WHDR {plain:.4} -> {shifted:.4} (cli {cli_plain:.4} -> {cli_shifted:.4})", equal * 100.0),
    );
}

#[test]
fn c10_metric_exactness() {
    let _guard = exclusive();
    let mut r = rng(10);
    let mut notes = Vec::new();
    let mut pass = true;
    // si-MSE: power-of-two scalings are exact in floating point.
    for _ in 0..200 {
        let n = r.gen_range(4..200);
        let p: Vec<f32> = (0..n).map(|_| r.gen_range(0.01..2.0)).collect();
        let g: Vec<f32> = (0..n).map(|_| r.gen_range(0.01..2.0)).collect();
        let k = 2f32.powi(r.gen_range(-20..20));
        let scaled: Vec<f32> = p.iter().map(|v| v * k).collect();
        pass &= si_mse(&scaled, &g).unwrap().to_bits() == si_mse(&p, &g).unwrap().to_bits();
    }
    notes.push("si-MSE bitwise under 2^k scaling".to_string());
    // LMSE: copies scaled independently per window score zero.
    let mut worst_lmse = 0.0f64;
    for _ in 0..50 {
        let win = r.gen_range(2..6);
        let (bw, bh) = (r.gen_range(2..6), r.gen_range(2..6));
        let (w, h) = (win * bw, win * bh);
        let c = r.gen_range(1..4);
        let gt = random_map(&mut r, w, h, c, 0.05, 1.0);
        let scales: Vec<f32> = (0..bw * bh).map(|_| r.gen_range(0.1..10.0)).collect();
        let pred = Map::from_fn(w, h, gt.channels(), |c, y, x| gt.get(c, y, x) * scales[(y / win) * bw + x / win]);
        worst_lmse = worst_lmse.max(lmse_with(&pred, &gt, LmseParams { window: win, stride: win }).unwrap());
    }
    pass &= worst_lmse <= 1e-12;
    notes.push(format!("LMSE max {worst_lmse:.2e}"));
    // SSIM of an image with itself.
    let mut worst_ssim = 0.0f64;
    for _ in 0..50 {
        let (w, h) = (r.gen_range(8..64), r.gen_range(8..64));
        let c = r.gen_range(1..4);
        let x = random_map(&mut r, w, h, c, 0.0, 3.0);
        worst_ssim = worst_ssim.max((ssim(&x, &x).unwrap() - 1.0).abs());
    }
    pass &= worst_ssim <= 1e-6;
    notes.push(format!("SSIM |1 - s| max {worst_ssim:.2e}"));
    // Ord and D3R vanish under strictly increasing affine maps. Ground truth
    // is snapped to odd multiples of 2^-17, so no pair has a ratio within
    // rounding distance of the equality threshold, and the maps use a
    // power-of-two slope and a shift on the same grid so the prediction is
    // exact in f32.
    let q = 2f32.powi(-17);
    let mut worst_ord = 0.0f64;
    let mut worst_d3r = 0.0f64;
    for i in 0..30 {
        let scene = synthetic(300 + i, 48, 40, i % 2 == 0);
        let gt = scene.shading.map(|v| {
            let d = inverse_of(v as f64) as f32;
            (2.0 * (d / q / 2.0).floor() + 1.0) * q
        });
        let k = r.gen_range(-6..7);
        let a = 2f32.powi(k);
        let b = r.gen_range(-(1i32 << 17)..(1i32 << 17)) as f32 * q * a;
        let pred = gt.map(|v| a * v + b);
        worst_ord = worst_ord.max(ord_metric(&pred, &gt, 20_000, iid_core::metrics::ORD_TAU, i).unwrap().error);
        worst_d3r = worst_d3r.max(d3r(&pred, &gt, 6, iid_core::metrics::D3R_THRESHOLD).unwrap().value.unwrap_or(0.0));
    }
    pass &= worst_ord == 0.0 && worst_d3r == 0.0;
    notes.push(format!("Ord max {worst_ord}, D3R max {worst_d3r}"));
    verdict(10, "metric exactness oracles", pass, notes.join("; "));
}

/// Direct re-derivation of the largest resolution whose every window holds
/// enough strong edges: Sobel recomputed per pixel and every window counted
/// pixel by pixel at every size from the limit downwards.
fn r0_oracle(image: &LinearImage, rf: usize, base: usize, cap: usize) -> usize {
    let (w, h) = image.dims();
    let limit = cap.max(base).min(w.max(h)).max(base);
    let step = (rf / 2).max(1);
    let mut size = limit;
    while size > base {
        let (cw, ch) = dims_for(w, h, size);
        let img = resample(image, cw, ch).unwrap();
        let lum = |y: isize, x: isize| {
            let (y, x) = (y.clamp(0, ch as isize - 1) as usize, x.clamp(0, cw as isize - 1) as usize);
            let mut l = 0.0f32;
            for c in 0..3 {
                l += REC709[c] * img.get(c, y, x);
            }
            l
        };
        let edge = |y: usize, x: usize| {
            let (y, x) = (y as isize, x as isize);
            let gx = (lum(y - 1, x + 1) + 2.0 * lum(y, x + 1) + lum(y + 1, x + 1) - lum(y - 1, x - 1) - 2.0 * lum(y, x - 1) - lum(y + 1, x - 1)) / 8.0;
            let gy = (lum(y + 1, x - 1) + 2.0 * lum(y + 1, x) + lum(y + 1, x + 1) - lum(y - 1, x - 1) - 2.0 * lum(y - 1, x) - lum(y - 1, x + 1)) / 8.0;
            (gx * gx + gy * gy).sqrt() > EDGE_THRESHOLD
        };
        let origins = |len: usize, win: usize| -> Vec<usize> {
            if len <= win {
                return vec![0];
            }
            let mut v: Vec<usize> = (0..=len - win).filter(|o| o % step == 0).collect();
            if !v.contains(&(len - win)) {
                v.push(len - win);
            }
            v
        };
        let (ww, wh) = (rf.min(cw), rf.min(ch));
        let ok = origins(ch, wh).iter().all(|&y0| {
            origins(cw, ww).iter().all(|&x0| {
                let mut n = 0;
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        n += edge(y, x) as usize;
                    }
                }
                n >= MIN_EDGE_PIXELS
            })
        });
        if ok {
            return size;
        }
        if size < step {
            break;
        }
        size -= step;
    }
    base
}

#[test]
fn c11_r0_planner_matches_oracle() {
    let _guard = exclusive();
    let mut r = rng(11);
    let mut matches = 0;
    let mut chosen = Vec::new();
    for i in 0..20 {
        let (w, h) = (r.gen_range(64..200), r.gen_range(64..200));
        let scene = synthetic(500 + i, w, h, i % 4 == 0);
        // Blank out a random rectangle so that the answers vary.
        let (bx, by) = (r.gen_range(0..w / 2), r.gen_range(0..h / 2));
        let (bw, bh) = (r.gen_range(0..w / 2), r.gen_range(0..h / 2));
        let img = LinearImage::new(Map::from_fn(w, h, 3, |c, y, x| {
            if x >= bx && x < bx + bw && y >= by && y < by + bh {
                0.3
            } else {
                scene.image.get(c, y, x)
            }
        }))
        .unwrap();
        let (rf, base, cap) = (32, 32, 160);
        let plan = compute_r0(&img, rf, base, cap).unwrap();
        let oracle = r0_oracle(&img, rf, base, cap);
        matches += (plan.high_res == oracle) as usize;
        chosen.push(format!("{}/{}", plan.high_res, oracle));
    }
    verdict(11, "R0 planner vs exhaustive oracle", matches == 20, format!("{matches}/20 agree; planner/oracle {}", chosen.join(" ")));
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn c12_determinism() {
    let _guard = exclusive();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let work = root.join("work");
    let p = |n: &str| work.join(n).to_str().unwrap().to_string();
    let inputs = root.join("inputs");
    std::fs::create_dir_all(&inputs).unwrap();
    let scene = synthetic(77, 24, 20, false);
    write_pfm(&scene.albedo, inputs.join("a.pfm")).unwrap();
    write_pfm(&scene.shading, inputs.join("s.pfm")).unwrap();
    write_pfm(&scene.normals, inputs.join("n.pfm")).unwrap();
    write_pfm(&Map::from_fn(24, 20, 1, |_, y, x| ((x + y) % 3 == 0) as u8 as f32), inputs.join("m.pfm")).unwrap();
    let judgments = JudgmentSet {
        pairs: (0..40)
            .map(|i| Judgment {
                x1: (i % 7) as f64 / 7.0,
                y1: (i % 5) as f64 / 5.0,
                x2: (i % 3) as f64 / 3.0,
                y2: (i % 11) as f64 / 11.0,
                darker: [Darker::First, Darker::Second, Darker::Equal][i % 3],
                weight: 1.0,
            })
            .collect(),
    };
    std::fs::write(inputs.join("j.json"), serde_json::to_string(&judgments).unwrap()).unwrap();
    let i = |n: &str| inputs.join(n).to_str().unwrap().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["synth", "gen", "--out", &p("data"), "--scenes", "10", "--size", "16x16", "--seed", "9", "--specular"].into_iter().map(String::from).collect(),
        vec!["synth", "gen", "--out", &p("multi"), "--scenes", "10", "--size", "16x16", "--seed", "9", "--multi-illum"].into_iter().map(String::from).collect(),
        vec!["train", "ordinal", "--data", &p("data"), "--out", &p("ord.bin"), "--iters", "4", "--batch", "2", "--res", "16", "--base-channels", "4", "--seed", "3", "--checkpoint-every", "2"].into_iter().map(String::from).collect(),
        vec!["train", "decomp", "--data", &p("data"), "--ordinal", &p("ord.bin"), "--out", &p("dec.bin"), "--iters", "4", "--batch", "2", "--res", "16", "--base-res", "8", "--base-channels", "4", "--seed", "3"].into_iter().map(String::from).collect(),
        vec!["decompose", "--image", &format!("{}/test/scene_00009/image.pfm", p("data")), "--ordinal", &p("ord.bin"), "--decomp", &p("dec.bin"), "--out-dir", &p("dec_out")].into_iter().map(String::from).collect(),
        vec!["pseudo-gt", "--scenes", &p("multi"), "--ordinal", &p("ord.bin"), "--decomp", &p("dec.bin"), "--out", &p("pseudo"), "--cap", "16"].into_iter().map(String::from).collect(),
        vec!["eval", "dense", "--pred", &p("dec_out"), "--gt", &format!("{}/test/scene_00009", p("data")), "--report", &p("dense.json"), "--seed", "4", "--pairs", "3000"].into_iter().map(String::from).collect(),
        vec!["eval", "whdr", "--albedo", &i("a.pfm"), "--judgments", &i("j.json"), "--shift", "0.5", "--report", &p("whdr.json")].into_iter().map(String::from).collect(),
        vec!["edit", "recolor", "--albedo", &i("a.pfm"), "--shading", &i("s.pfm"), "--mask", &i("m.pfm"), "--color", "0.8,0.2,0.1", "--preserve-luminance", "--out", &p("recolor.png")].into_iter().map(String::from).collect(),
        vec!["edit", "relight", "--albedo", &i("a.pfm"), "--normals", &i("n.pfm"), "--light", "0.5,-0.3,1.5", "--intensity", "2", "--ambient", "0.1", "--out", &p("relight.pfm"), "--shading-out", &p("relight_s.pfm")].into_iter().map(String::from).collect(),
        vec!["edit", "material", "--albedo", &i("a.pfm"), "--shading", &i("s.pfm"), "--gamma", "1.8", "--out", &p("material.pfm")].into_iter().map(String::from).collect(),
        vec!["ablate", "ordinal", "--data", &p("data"), "--out", &p("ablate.json"), "--seeds", "0,1", "--ordinal-iters", "2", "--ordinal-res", "16", "--base-res", "8", "--base-channels", "4", "--ord-pairs", "300"].into_iter().map(String::from).collect(),
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        if work.exists() {
            std::fs::remove_dir_all(&work).unwrap();
        }
        std::fs::create_dir_all(&work).unwrap();
        let mut stdout = Vec::new();
        for args in &steps {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            stdout.push(run_cli(&args).stdout);
        }
        runs.push((snapshot(&work), stdout));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let differing: Vec<String> = a
        .0
        .iter()
        .filter(|(k, v)| b.0.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let pass = differing.is_empty() && a.0.len() == b.0.len() && a.1 == b.1;
    verdict(
        12,
        "determinism",
        pass,
        format!("{} subcommands, {} artifacts compared bitwise{}", steps.len(), a.0.len(), if differing.is_empty() { String::new() } else { format!(", differing: {}", differing.join(" ")) }),
    );
}
