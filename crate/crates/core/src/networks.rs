//! Toy U-Net used for both the ordinal and the decomposition network.
//!
//! Level 0 runs two 3x3 convolutions at full resolution. Each deeper level
//! halves the resolution with a stride-2 3x3 convolution followed by another
//! 3x3 convolution. The decoder upsamples bilinearly by two, concatenates the
//! matching skip tensor and applies two 3x3 convolutions. A 1x1 convolution
//! and a sigmoid produce the single output channel. Every hidden activation
//! is a leaky ReLU with slope 0.1.

use iid_tensor::{Graph, Parameter, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Ordinal,
    Decomposition,
}

/// Which channels feed the decomposition network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputConfig {
    /// RGB, low-resolution ordinal, high-resolution ordinal.
    #[serde(rename = "all")]
    All,
    #[serde(rename = "rgb+full")]
    RgbFull,
    #[serde(rename = "rgb+base")]
    RgbBase,
    #[serde(rename = "rgb")]
    Rgb,
}

impl InputConfig {
    pub const ALL: [InputConfig; 4] = [
        InputConfig::All,
        InputConfig::RgbFull,
        InputConfig::RgbBase,
        InputConfig::Rgb,
    ];

    pub fn channels(self) -> usize {
        match self {
            InputConfig::All => 5,
            InputConfig::RgbFull | InputConfig::RgbBase => 4,
            InputConfig::Rgb => 3,
        }
    }

    pub fn uses_low(self) -> bool {
        matches!(self, InputConfig::All | InputConfig::RgbBase)
    }

    pub fn uses_high(self) -> bool {
        matches!(self, InputConfig::All | InputConfig::RgbFull)
    }

    pub fn name(self) -> &'static str {
        match self {
            InputConfig::All => "all",
            InputConfig::RgbFull => "rgb+full",
            InputConfig::RgbBase => "rgb+base",
            InputConfig::Rgb => "rgb",
        }
    }
}

impl std::str::FromStr for InputConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InputConfig::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown input config {s:?}")))
    }
}

/// Architecture description stored in model headers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub kind: NetKind,
    /// Number of stride-2 downsamplings.
    pub depth: usize,
    pub base_channels: usize,
    pub input_channels: usize,
    /// Channel layout of a decomposition network's input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<InputConfig>,
}

impl UNetSpec {
    pub fn ordinal(base_channels: usize) -> Self {
        Self {
            kind: NetKind::Ordinal,
            depth: 4,
            base_channels,
            input_channels: 3,
            inputs: None,
        }
    }

    pub fn decomposition(base_channels: usize, inputs: InputConfig) -> Self {
        Self {
            kind: NetKind::Decomposition,
            depth: 3,
            base_channels,
            input_channels: inputs.channels(),
            inputs: Some(inputs),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 || self.base_channels == 0 || self.input_channels == 0
        {
            return Err(Error::Invalid(format!("invalid network spec {self:?}")));
        }
        match (self.kind, self.inputs) {
            (NetKind::Ordinal, None) if self.input_channels == 3 => Ok(()),
            (NetKind::Decomposition, Some(c)) if c.channels() == self.input_channels => Ok(()),
            _ => Err(Error::Invalid(format!(
                "inconsistent input channels in {self:?}"
            ))),
        }
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * (1usize << level.min(3))
    }

    /// Spatial extents must be multiples of this.
    pub fn granularity(&self) -> usize {
        1 << self.depth
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, [usize; 4])> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), [cout, cin, k, k]));
            out.push((format!("{name}.bias"), [1, cout, 1, 1]));
        };
        let c0 = self.level_channels(0);
        conv("enc0.conv0".into(), self.input_channels, c0, 3);
        conv("enc0.conv1".into(), c0, c0, 3);
        for l in 1..=self.depth {
            let (cp, cl) = (self.level_channels(l - 1), self.level_channels(l));
            conv(format!("enc{l}.down"), cp, cl, 3);
            conv(format!("enc{l}.conv"), cl, cl, 3);
        }
        for l in (1..=self.depth).rev() {
            let (cp, cl) = (self.level_channels(l - 1), self.level_channels(l));
            conv(format!("dec{l}.conv0"), cl + cp, cp, 3);
            conv(format!("dec{l}.conv1"), cp, cp, 3);
        }
        conv("head".into(), c0, 1, 1);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// A network: architecture plus parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub spec: UNetSpec,
    pub params: Vec<Parameter>,
}

impl UNet {
    /// He-uniform weights and zero biases drawn from a seeded generator.
    pub fn init(spec: UNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                    let bound = (6.0 / fan_in).sqrt();
                    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-bound..bound))
                };
                Parameter::new(name, value)
            })
            .collect();
        Ok(Self { spec, params })
    }

    /// Assemble from named tensors, checking names and shapes against the architecture.
    pub fn from_parameters(spec: UNetSpec, params: Vec<Parameter>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Invalid(format!(
                "network expects {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || *shape != p.value.shape() {
                return Err(Error::Invalid(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    /// Add parameters to the graph as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    /// Add parameters to the graph as constants.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.input(p.value.clone())).collect()
    }

    /// Forward pass on an input whose extents are multiples of
    /// [`UNetSpec::granularity`].
    pub fn forward_var(&self, g: &mut Graph, vars: &[Var], input: Var) -> Result<Var> {
        let [_, c, h, w] = g.shape(input);
        let q = self.spec.granularity();
        if c != self.spec.input_channels {
            return Err(Error::Invalid(format!(
                "network expects {} input channels, got {c}",
                self.spec.input_channels
            )));
        }
        if h % q != 0 || w % q != 0 || h == 0 || w == 0 {
            return Err(Error::Invalid(format!(
                "input {h}x{w} is not a multiple of {q}"
            )));
        }
        let mut it = vars.chunks_exact(2);
        let mut conv = |g: &mut Graph, x: Var, stride: usize, act: bool| -> Result<Var> {
            let wb = it.next().expect("parameter list matches spec");
            let k = g.shape(wb[0])[2];
            let y = g.conv2d(x, wb[0], wb[1], stride, k / 2)?;
            if act {
                Ok(g.leaky_relu(y, LEAKY_SLOPE)?)
            } else {
                Ok(y)
            }
        };
        let x = conv(g, input, 1, true)?;
        let mut skips = vec![conv(g, x, 1, true)?];
        for _ in 1..=self.spec.depth {
            let prev = *skips.last().unwrap();
            let x = conv(g, prev, 2, true)?;
            skips.push(conv(g, x, 1, true)?);
        }
        let mut x = skips.pop().unwrap();
        while let Some(skip) = skips.pop() {
            let [_, _, sh, sw] = g.shape(skip);
            let up = g.resize_bilinear(x, sh, sw)?;
            let cat = g.concat_channels(&[up, skip])?;
            let y = conv(g, cat, 1, true)?;
            x = conv(g, y, 1, true)?;
        }
        let logits = conv(g, x, 1, false)?;
        Ok(g.sigmoid(logits)?)
    }

    /// Forward pass on any input size: reflect-pads up to the next multiple
    /// of the granularity and crops the output back.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], input: &Tensor) -> Result<Var> {
        let [_, _, h, w] = input.shape();
        let q = self.spec.granularity();
        let (ph, pw) = (h.div_ceil(q) * q, w.div_ceil(q) * q);
        if (ph, pw) == (h, w) {
            let x = g.input(input.clone());
            return self.forward_var(g, vars, x);
        }
        let x = g.input(reflect_pad(input, ph, pw));
        let y = self.forward_var(g, vars, x)?;
        Ok(g.crop(y, h, w)?)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let y = self.forward(&mut g, &vars, input)?;
        Ok(g.value(y).clone())
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pad the bottom and right edges by mirror reflection (edge not repeated).
pub fn reflect_pad(t: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, ih, iw] = t.shape();
    Tensor::from_fn([n, c, h, w], |ni, ci, y, x| {
        t.get(ni, ci, reflect_index(y, ih), reflect_index(x, iw))
    })
}

/// Node of a one-dimensional layer graph used for receptive-field analysis.
#[derive(Clone, Debug, PartialEq)]
pub enum RfNode {
    Input,
    Conv {
        src: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Bilinear x2 upsampling (align-corners = false).
    Up2 { src: usize },
    Concat { srcs: Vec<usize> },
}

/// Layer DAG in topological order; the last node is the output.
#[derive(Clone, Debug, PartialEq)]
pub struct RfGraph {
    pub nodes: Vec<RfNode>,
}

impl RfGraph {
    /// Chain of stride-1 convolutions with the given kernel sizes.
    pub fn conv_chain(kernels: &[usize]) -> Self {
        let mut nodes = vec![RfNode::Input];
        for (i, &k) in kernels.iter().enumerate() {
            nodes.push(RfNode::Conv {
                src: i,
                kernel: k,
                stride: 1,
                pad: k / 2,
            });
        }
        Self { nodes }
    }

    /// Input interval `[lo, hi]` that can influence output index `p`.
    pub fn input_interval(&self, p: i64) -> (i64, i64) {
        let mut need: Vec<Option<(i64, i64)>> = vec![None; self.nodes.len()];
        *need.last_mut().unwrap() = Some((p, p));
        let widen = |need: &mut Vec<Option<(i64, i64)>>, i: usize, lo: i64, hi: i64| {
            need[i] = Some(match need[i] {
                Some((a, b)) => (a.min(lo), b.max(hi)),
                None => (lo, hi),
            });
        };
        for i in (0..self.nodes.len()).rev() {
            let Some((lo, hi)) = need[i] else { continue };
            match &self.nodes[i] {
                RfNode::Input => {}
                RfNode::Conv {
                    src,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (s, pd, k) = (*stride as i64, *pad as i64, *kernel as i64);
                    widen(&mut need, *src, lo * s - pd, hi * s - pd + k - 1);
                }
                RfNode::Up2 { src } => {
                    let f = |o: i64| ((o as f64) / 2.0 - 0.25).floor() as i64;
                    widen(&mut need, *src, f(lo), f(hi) + 1);
                }
                RfNode::Concat { srcs } => {
                    for &s in srcs {
                        widen(&mut need, s, lo, hi);
                    }
                }
            }
        }
        need[0].expect("output depends on the input")
    }

    /// Receptive field at output index `p`.
    pub fn receptive_field_at(&self, p: i64) -> usize {
        let (lo, hi) = self.input_interval(p);
        (hi - lo + 1) as usize
    }
}

impl UNetSpec {
    /// The network as a one-dimensional layer graph.
    pub fn rf_graph(&self) -> RfGraph {
        let mut nodes = vec![RfNode::Input];
        let push = |nodes: &mut Vec<RfNode>, n: RfNode| {
            nodes.push(n);
            nodes.len() - 1
        };
        let conv = |src, kernel, stride| RfNode::Conv {
            src,
            kernel,
            stride,
            pad: kernel / 2,
        };
        let x = push(&mut nodes, conv(0, 3, 1));
        let mut skips = vec![push(&mut nodes, conv(x, 3, 1))];
        for _ in 1..=self.depth {
            let prev = *skips.last().unwrap();
            let x = push(&mut nodes, conv(prev, 3, 2));
            skips.push(push(&mut nodes, conv(x, 3, 1)));
        }
        let mut x = skips.pop().unwrap();
        while let Some(skip) = skips.pop() {
            let up = push(&mut nodes, RfNode::Up2 { src: x });
            let cat = push(&mut nodes, RfNode::Concat { srcs: vec![up, skip] });
            let y = push(&mut nodes, conv(cat, 3, 1));
            x = push(&mut nodes, conv(y, 3, 1));
        }
        push(&mut nodes, conv(x, 1, 1));
        RfGraph { nodes }
    }

    /// Largest receptive field over all output phases, measured far from
    /// image borders.
    pub fn receptive_field(&self) -> usize {
        let g = self.rf_graph();
        let q = self.granularity() as i64;
        let base = 1000 * q;
        (0..q).map(|r| g.receptive_field_at(base + r)).max().unwrap()
    }
}
