//! Training losses built on the autodiff graph.

use iid_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{fit_affine, fit_scale_masked, AffineFit};
use crate::shading::EPS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_msg_ordinal: f32,
    pub lambda_s: f32,
    pub lambda_msg_s: f32,
    pub lambda_a: f32,
    pub lambda_msg_a: f32,
    /// Pyramid levels of the multi-scale gradient loss.
    pub levels: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_msg_ordinal: 0.5,
            lambda_s: 1.0,
            lambda_msg_s: 0.5,
            lambda_a: 1.0,
            lambda_msg_a: 0.5,
            levels: 4,
        }
    }
}

impl LossConfig {
    /// Same weights with the albedo terms switched off.
    pub fn shading_only(self) -> Self {
        Self {
            lambda_a: 0.0,
            lambda_msg_a: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [
            self.lambda_msg_ordinal,
            self.lambda_s,
            self.lambda_msg_s,
            self.lambda_a,
            self.lambda_msg_a,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.levels == 0 {
            return Err(Error::Invalid(format!("invalid loss configuration {self:?}")));
        }
        Ok(())
    }
}

/// How the prediction is aligned to the target before measuring error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    /// Positive-slope affine map (scale and shift invariant).
    Affine,
    /// Positive scale only.
    Scale,
}

/// Mean absolute error.
pub fn l1(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    Ok(g.mean(a)?)
}

/// Multi-scale gradient loss: forward differences of `pred - target` in x
/// and y, summed in absolute value and normalised by the element count of
/// each pyramid level, averaged over `levels` levels built by 2x2 pooling.
pub fn msg(g: &mut Graph, pred: Var, target: Var, levels: usize) -> Result<Var> {
    if levels == 0 {
        return Err(Error::Invalid("multi-scale gradient loss needs a level".into()));
    }
    let mut diff = g.sub(pred, target)?;
    let mut total: Option<Var> = None;
    for level in 0..levels {
        if level > 0 {
            diff = g.avg_pool2(diff)?;
        }
        let n = g.value(diff).numel() as f32;
        let dx = g.diff_x(diff)?;
        let dy = g.diff_y(diff)?;
        let ax = g.abs(dx)?;
        let ay = g.abs(dy)?;
        let sx = g.sum(ax)?;
        let sy = g.sum(ay)?;
        let s = g.add(sx, sy)?;
        let term = g.mul_scalar(s, 1.0 / n)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(g.mul_scalar(total.unwrap(), 1.0 / levels as f32)?)
}

/// Per-item alignment constants of one ordinal loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFits {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    /// Items whose fit fell back to the minimal slope.
    pub degenerate: usize,
}

/// Output of [`ordinal_loss`].
#[derive(Clone, Debug)]
pub struct OrdinalLoss {
    pub total: Var,
    pub ord: Var,
    pub msg: Var,
    pub fits: AlignedFits,
}

fn fit_items(
    pred: &Tensor,
    target: &Tensor,
    kind: FitKind,
    fit_mask: Option<&[bool]>,
) -> Result<AlignedFits> {
    let [b, _, _, _] = pred.shape();
    let per = pred.numel() / b.max(1);
    let mut fits = AlignedFits {
        scale: Vec::with_capacity(b),
        shift: Vec::with_capacity(b),
        degenerate: 0,
    };
    for n in 0..b {
        let p = &pred.data()[n * per..(n + 1) * per];
        let t = &target.data()[n * per..(n + 1) * per];
        let mut m = fit_mask.map(|m| &m[n * per..(n + 1) * per]);
        if m.is_some_and(|m| m.iter().filter(|&&v| v).count() < 2) {
            m = None;
        }
        match kind {
            FitKind::Affine => {
                let f: AffineFit = fit_affine(p, t, m)?;
                if f.degenerate || f.constrained {
                    fits.degenerate += 1;
                }
                fits.scale.push(f.a);
                fits.shift.push(f.b);
            }
            FitKind::Scale => {
                let c = match fit_scale_masked(t, p, m) {
                    Ok(f) => f.c,
                    Err(Error::Degenerate(_)) => {
                        fits.degenerate += 1;
                        crate::fitting::FALLBACK_SLOPE
                    }
                    Err(e) => return Err(e),
                };
                fits.scale.push(c);
                fits.shift.push(0.0);
            }
        }
    }
    Ok(fits)
}

/// Ordinal loss `mean((f(O) - T)^2) + lambda * msg(f(O), T)` where `f` is the
/// least-squares alignment of each batch item, held constant during
/// backpropagation. `fit_mask` restricts which pixels enter the fit.
pub fn ordinal_loss(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    kind: FitKind,
    fit_mask: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<OrdinalLoss> {
    let shape = g.shape(pred);
    if shape != target.shape() {
        return Err(Error::Invalid(format!(
            "ordinal loss: prediction {shape:?} vs target {:?}",
            target.shape()
        )));
    }
    if fit_mask.is_some_and(|m| m.len() != target.numel()) {
        return Err(Error::Invalid("ordinal loss: mask length mismatch".into()));
    }
    let fits = fit_items(g.value(pred), target, kind, fit_mask)?;
    let b = shape[0];
    let a = g.input(Tensor::new([b, 1, 1, 1], fits.scale.iter().map(|&v| v as f32).collect())?);
    let s = g.input(Tensor::new([b, 1, 1, 1], fits.shift.iter().map(|&v| v as f32).collect())?);
    let t = g.input(target.clone());
    let scaled = g.mul(pred, a)?;
    let aligned = g.add(scaled, s)?;
    let r = g.sub(aligned, t)?;
    let sq = g.pow(r, 2.0)?;
    let ord = g.mean(sq)?;
    let m = msg(g, aligned, t, cfg.levels)?;
    let wm = g.mul_scalar(m, cfg.lambda_msg_ordinal)?;
    let total = g.add(ord, wm)?;
    Ok(OrdinalLoss {
        total,
        ord,
        msg: m,
        fits,
    })
}

/// `mean((f(O) - D)^2)` for a single map with the affine fit evaluated in
/// double precision.
pub fn ordinal_loss_value(o: &[f32], d: &[f32], mask: Option<&[bool]>) -> Result<(f64, AffineFit)> {
    let f = fit_affine(o, d, mask)?;
    let sum: f64 = o
        .iter()
        .zip(d)
        .map(|(&x, &y)| (f.apply(x) - y as f64).powi(2))
        .sum();
    Ok((sum / o.len() as f64, f))
}

/// Terms of [`decomposition_loss`].
#[derive(Clone, Copy, Debug)]
pub struct DecompositionLoss {
    pub total: Var,
    pub l_s: Var,
    pub msg_s: Var,
    pub l_a: Option<Var>,
    pub msg_a: Option<Var>,
}

/// `A = I * D / max(1 - D, EPS)` inside the graph; `D` is broadcast over
/// the colour channels.
pub fn albedo_in_graph(g: &mut Graph, d: Var, image: Var) -> Result<Var> {
    let om = g.rsub_scalar(d, 1.0)?;
    let om = g.clamp(om, EPS as f32, 1.0)?;
    let k = g.div(d, om)?;
    Ok(g.mul(image, k)?)
}

/// Dense L1 plus multi-scale gradient terms on inverse shading and, when
/// their weights are non-zero, on the albedo derived from `D`.
pub fn decomposition_loss(
    g: &mut Graph,
    d: Var,
    image: &Tensor,
    d_star: &Tensor,
    a_star: &Tensor,
    cfg: &LossConfig,
) -> Result<DecompositionLoss> {
    cfg.validate()?;
    let ds = g.input(d_star.clone());
    let l_s = l1(g, d, ds)?;
    let msg_s = msg(g, d, ds, cfg.levels)?;
    let t1 = g.mul_scalar(l_s, cfg.lambda_s)?;
    let t2 = g.mul_scalar(msg_s, cfg.lambda_msg_s)?;
    let mut total = g.add(t1, t2)?;
    let (mut l_a, mut msg_a) = (None, None);
    if cfg.lambda_a > 0.0 || cfg.lambda_msg_a > 0.0 {
        let iv = g.input(image.clone());
        let a = albedo_in_graph(g, d, iv)?;
        let at = g.input(a_star.clone());
        let la = l1(g, a, at)?;
        let ma = msg(g, a, at, cfg.levels)?;
        let t3 = g.mul_scalar(la, cfg.lambda_a)?;
        let t4 = g.mul_scalar(ma, cfg.lambda_msg_a)?;
        total = g.add(total, t3)?;
        total = g.add(total, t4)?;
        l_a = Some(la);
        msg_a = Some(ma);
    }
    Ok(DecompositionLoss {
        total,
        l_s,
        msg_s,
        l_a,
        msg_a,
    })
}
