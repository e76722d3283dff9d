//! Experiment networks: ResNet-style conv stacks and transformer stacks.
//!
//! A network is a list of blocks; block `l` maps `x^(l-1)` to `x^l`. Each
//! block is a sequence of sub-blocks of the form
//! `post(shortcut(x) + branch(pre(x)))`, which covers residual, weighted
//! residual (WRS), plain feed-forward, pre-norm and post-norm variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionKind, AttentionParams};
use crate::error::{Error, Result};
use crate::init::{self, InitMethod, InitSpec};
use crate::layers::{self, droppath_draw, Affine, BnMode, Conv2d, LayerSpec, DEFAULT_EPS};
use crate::linalg::{self, DenseMatrix};
use crate::rng;

const NET_STREAM: u16 = 0x4e;
/// Largest `D·N` for which full Jacobians are materialized.
pub const JACOBIAN_GUARD: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "resnet")]
    ResNetConv,
    #[serde(rename = "dpa")]
    TransformerDPA,
    #[serde(rename = "scsa")]
    TransformerSCSA,
    #[serde(rename = "l2a")]
    TransformerL2A,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::ResNetConv,
        Family::TransformerDPA,
        Family::TransformerSCSA,
        Family::TransformerL2A,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::ResNetConv => "resnet",
            Family::TransformerDPA => "dpa",
            Family::TransformerSCSA => "scsa",
            Family::TransformerL2A => "l2a",
        }
    }

    pub fn is_transformer(self) -> bool {
        self != Family::ResNetConv
    }

    fn attention_kind(self) -> Option<AttentionKind> {
        match self {
            Family::ResNetConv => None,
            Family::TransformerDPA => Some(AttentionKind::DPA),
            Family::TransformerSCSA => Some(AttentionKind::SCSA),
            Family::TransformerL2A => Some(AttentionKind::L2A),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // Long forms such as `transformer_dpa` are accepted as aliases.
        let short = s
            .strip_prefix("transformer_")
            .unwrap_or(if s == "resnet_conv" { "resnet" } else { s });
        Family::ALL
            .into_iter()
            .find(|f| f.name() == short)
            .ok_or_else(|| Error::InvalidParam(format!("unknown family '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormChoice {
    /// BatchNorm for the ResNet family, LayerNorm for transformers.
    Auto,
    LN,
    BN,
    RMSNorm,
    CenterNorm,
}

impl NormChoice {
    pub const ALL: [NormChoice; 5] = [
        NormChoice::Auto,
        NormChoice::LN,
        NormChoice::BN,
        NormChoice::RMSNorm,
        NormChoice::CenterNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormChoice::Auto => "auto",
            NormChoice::LN => "ln",
            NormChoice::BN => "bn",
            NormChoice::RMSNorm => "rms",
            NormChoice::CenterNorm => "center",
        }
    }

    fn resolve(self, family: Family) -> NormChoice {
        match (self, family) {
            (NormChoice::Auto, Family::ResNetConv) => NormChoice::BN,
            (NormChoice::Auto, _) => NormChoice::LN,
            (n, _) => n,
        }
    }
}

impl FromStr for NormChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormChoice::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown norm kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormPosition {
    /// `norm(x + f(x))`.
    Post,
    /// `x + f(norm(x))`.
    Pre,
}

impl FromStr for NormPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post" => Ok(NormPosition::Post),
            "pre" => Ok(NormPosition::Pre),
            _ => Err(Error::InvalidParam(format!("unknown norm position '{s}'"))),
        }
    }
}

/// Statistics used by batch normalization inside networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BnStats {
    /// Per-channel statistics over the columns (spatial positions or tokens)
    /// of the evaluated input.
    Batch,
    /// Fixed running statistics `μ = 0`, `σ² = 1`.
    Running,
}

impl FromStr for BnStats {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(BnStats::Batch),
            "running" => Ok(BnStats::Running),
            _ => Err(Error::InvalidParam(format!("unknown bn stats '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub family: Family,
    pub depth: usize,
    /// Hidden dimension (channels for the ResNet family).
    pub width: usize,
    pub heads: usize,
    pub ffn_expand: usize,
    pub use_residual: bool,
    pub use_norm: bool,
    pub norm_kind: NormChoice,
    pub norm_position: NormPosition,
    pub bn_stats: BnStats,
    pub init: InitSpec,
    pub droppath_p: f64,
    /// Initial residual weight ν of every branch; `None` keeps plain shortcuts.
    pub wrs_nu_init: Option<f64>,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    /// Input image; transformers read it as a sequence of `height·width` tokens.
    pub input_height: usize,
    pub input_width: usize,
}

impl NetworkSpec {
    /// CI-scale defaults: 12 layers, D = 256, 8 heads, 16×16 input.
    pub fn desk(family: Family) -> Self {
        NetworkSpec {
            family,
            depth: 12,
            width: 256,
            heads: 8,
            ffn_expand: 4,
            use_residual: true,
            use_norm: true,
            norm_kind: NormChoice::Auto,
            norm_position: NormPosition::Post,
            bn_stats: BnStats::Batch,
            init: InitSpec::new(InitMethod::XavierNormal, 2.0),
            droppath_p: 0.0,
            wrs_nu_init: None,
            kernel_size: 3,
            stride: 1,
            padding: 1,
            input_height: 16,
            input_width: 16,
        }
    }

    /// The full-size experiment setting: D = 1024 and 32×32 inputs.
    pub fn paper_default(family: Family) -> Self {
        NetworkSpec {
            width: 1024,
            input_height: 32,
            input_width: 32,
            ..NetworkSpec::desk(family)
        }
    }

    pub fn tokens(&self) -> usize {
        self.input_height * self.input_width
    }

    /// Shape `D × N` of the input and output.
    pub fn input_shape(&self) -> (usize, usize) {
        (self.width, self.tokens())
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.depth == 0 {
            errs.push("depth must be >= 1".to_string());
        }
        if self.width == 0 {
            errs.push("width must be >= 1".to_string());
        }
        if self.family.is_transformer() {
            if self.heads == 0 || self.heads > self.width {
                errs.push(format!("heads must be in [1, width], got {}", self.heads));
            } else if self.width % self.heads != 0 {
                errs.push(format!(
                    "width {} must be divisible by heads {}",
                    self.width, self.heads
                ));
            }
            if self.ffn_expand == 0 {
                errs.push("ffn_expand must be >= 1".to_string());
            }
        } else {
            if self.kernel_size == 0 || self.stride == 0 {
                errs.push("kernel_size and stride must be >= 1".to_string());
            } else {
                for (name, len) in [("height", self.input_height), ("width", self.input_width)] {
                    match linalg::conv_output_len(len, self.kernel_size, self.stride, self.padding) {
                        Ok(o) if o == len => {}
                        _ => errs.push(format!(
                            "conv (kernel {}, stride {}, padding {}) must preserve input {name} {len}",
                            self.kernel_size, self.stride, self.padding
                        )),
                    }
                }
            }
        }
        if self.input_height == 0 || self.input_width == 0 {
            errs.push("input height and width must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.droppath_p) {
            errs.push(format!(
                "droppath_p must be in [0,1], got {}",
                self.droppath_p
            ));
        }
        if let Some(nu) = self.wrs_nu_init {
            if !nu.is_finite() {
                errs.push("wrs_nu_init must be finite".to_string());
            }
            if !self.use_residual {
                errs.push("wrs_nu_init needs use_residual".to_string());
            }
        }
        if let Err(e) = self.init.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(errs))
        }
    }
}

/// One operation inside a residual branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Layer(LayerSpec),
    Attention(AttentionParams),
}

impl Op {
    fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        match self {
            Op::Layer(l) => l.apply(x),
            Op::Attention(a) => attention::apply(a, x),
        }
    }

    pub(crate) fn output_shape(&self, d: usize, n: usize) -> Result<(usize, usize)> {
        match self {
            Op::Layer(l) => l.output_shape(d, n),
            Op::Attention(a) if a.dim == d => Ok((d, n)),
            Op::Attention(a) => Err(Error::shape(
                "network",
                format!("attention expects {} rows, got {d}", a.dim),
            )),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Op::Layer(l) => l.validate(),
            Op::Attention(a) => a.validate(),
        }
    }

    /// Denominator-layout Jacobian; attention uses central-difference columns.
    fn jacobian(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            Op::Layer(l) => Ok(l.jacobian(x)?.matrix),
            Op::Attention(a) => attention_jacobian(a, x),
        }
    }
}

fn attention_jacobian(a: &AttentionParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    let (d, n) = x.shape();
    let h = 1e-5 * x.max_abs().max(1.0);
    let mut jac = DenseMatrix::zeros(d * n, d * n);
    let mut e = DenseMatrix::zeros(d, n);
    for k in 0..d * n {
        let (row, col) = (k % d, k / d);
        e.set(row, col, 1.0);
        let jvp = attention::attn_jvp_numeric(a, x, &e, h)?;
        e.set(row, col, 0.0);
        jac.row_mut(k).copy_from_slice(&layers::flatten(&jvp));
    }
    Ok(jac)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shortcut {
    None,
    /// `x + f(x)`.
    Plain,
    /// `x + ν ⊙ f(x)` with one weight per output feature.
    Weighted {
        nu: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubBlock {
    pub branch: Vec<Op>,
    pub shortcut: Shortcut,
    pub pre_norm: Option<LayerSpec>,
    pub post_norm: Option<LayerSpec>,
}

impl SubBlock {
    pub fn plain(branch: Vec<Op>) -> Self {
        SubBlock {
            branch,
            shortcut: Shortcut::None,
            pre_norm: None,
            post_norm: None,
        }
    }

    fn has_shortcut(&self) -> bool {
        self.shortcut != Shortcut::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub subs: Vec<SubBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// Present for networks produced by [`build`].
    pub spec: Option<NetworkSpec>,
    pub blocks: Vec<Block>,
    pub input_shape: (usize, usize),
}

/// Result of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `x^0 … x^L`; entry 0 is the input.
    pub outputs: Vec<DenseMatrix>,
    /// Largest |activation| inside each block, intermediates included.
    pub max_abs: Vec<f64>,
    /// First block (1-based) with a non-finite value.
    pub overflow_layer: Option<usize>,
    /// `(block, sub-block)` of every dropped branch.
    pub dropped: Vec<(usize, usize)>,
}

impl ForwardTrace {
    pub fn output(&self) -> &DenseMatrix {
        self.outputs.last().expect("input is always present")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Keep going through non-finite values instead of failing.
    pub probe_overflow: bool,
    /// Seed for DropPath draws; without it every branch is kept.
    pub droppath_seed: Option<u64>,
}

impl Network {
    /// Network from explicit blocks; shapes are checked end to end.
    pub fn from_blocks(blocks: Vec<Block>, input_shape: (usize, usize)) -> Result<Self> {
        let net = Network {
            spec: None,
            blocks,
            input_shape,
        };
        net.output_shape()?;
        Ok(net)
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Validates every block and returns the output shape.
    pub fn output_shape(&self) -> Result<(usize, usize)> {
        let (mut d, mut n) = self.input_shape;
        if d == 0 || n == 0 {
            return Err(Error::shape("network", "empty input shape"));
        }
        for block in &self.blocks {
            for sub in &block.subs {
                let (d0, n0) = (d, n);
                if let Some(p) = &sub.pre_norm {
                    p.validate()?;
                    (d, n) = p.output_shape(d, n)?;
                }
                for op in &sub.branch {
                    op.validate()?;
                    (d, n) = op.output_shape(d, n)?;
                }
                match &sub.shortcut {
                    Shortcut::None => {}
                    s => {
                        if (d, n) != (d0, n0) {
                            return Err(Error::shape(
                                "network",
                                "residual branch must preserve shape",
                            ));
                        }
                        if let Shortcut::Weighted { nu } = s {
                            if nu.len() != d {
                                return Err(Error::shape(
                                    "network",
                                    format!("{} residual weights for {d} features", nu.len()),
                                ));
                            }
                        }
                    }
                }
                if let Some(p) = &sub.post_norm {
                    p.validate()?;
                    (d, n) = p.output_shape(d, n)?;
                }
            }
        }
        Ok((d, n))
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self
            .forward_trace(x, ForwardOptions::default())?
            .outputs
            .pop()
            .expect("input"))
    }

    /// Forward pass keeping every block output.
    pub fn forward_trace(&self, x: &DenseMatrix, opts: ForwardOptions) -> Result<ForwardTrace> {
        self.forward_prefix(x, self.depth(), opts)
    }

    /// Forward pass through the first `depth` blocks only.
    pub fn forward_prefix(
        &self,
        x: &DenseMatrix,
        depth: usize,
        opts: ForwardOptions,
    ) -> Result<ForwardTrace> {
        if x.shape() != self.input_shape {
            return Err(Error::shape(
                "net_forward",
                format!("expected input {:?}, got {:?}", self.input_shape, x.shape()),
            ));
        }
        if depth > self.depth() {
            return Err(Error::InvalidParam(format!(
                "prefix depth {depth} exceeds network depth {}",
                self.depth()
            )));
        }
        let p = self.spec.as_ref().map_or(0.0, |s| s.droppath_p);
        let mut outputs = Vec::with_capacity(depth + 1);
        outputs.push(x.clone());
        let mut max_abs = Vec::with_capacity(depth);
        let mut overflow_layer = None;
        let mut dropped = Vec::new();
        for (l, block) in self.blocks[..depth].iter().enumerate() {
            let mut cur = outputs[l].clone();
            let mut peak = 0.0f64;
            let mut track = |m: &DenseMatrix| {
                for v in m.data() {
                    let a = v.abs();
                    // NaN compares false; record it as infinite.
                    peak = if a >= peak {
                        a
                    } else if a.is_nan() {
                        f64::INFINITY
                    } else {
                        peak
                    };
                }
            };
            for (s, sub) in block.subs.iter().enumerate() {
                let drop = match opts.droppath_seed {
                    Some(seed) if sub.has_shortcut() && p > 0.0 => {
                        droppath_draw(p, seed, (l * block.subs.len() + s) as u32)
                    }
                    _ => false,
                };
                if drop {
                    dropped.push((l + 1, s));
                } else {
                    let mut h = match &sub.pre_norm {
                        Some(n) => {
                            let h = n.apply(&cur);
                            track(&h);
                            h
                        }
                        None => cur.clone(),
                    };
                    for op in &sub.branch {
                        h = op.apply(&h);
                        track(&h);
                    }
                    cur = match &sub.shortcut {
                        Shortcut::None => h,
                        Shortcut::Plain => {
                            h.axpy(1.0, &cur)?;
                            h
                        }
                        Shortcut::Weighted { nu } => {
                            let d = cur.rows();
                            DenseMatrix::from_fn(d, cur.cols(), |i, j| {
                                cur.get(i, j) + nu[i] * h.get(i, j)
                            })
                        }
                    };
                    track(&cur);
                }
                if let Some(n) = &sub.post_norm {
                    cur = n.apply(&cur);
                    track(&cur);
                }
            }
            max_abs.push(peak);
            if overflow_layer.is_none() && !peak.is_finite() {
                overflow_layer = Some(l + 1);
                if !opts.probe_overflow {
                    return Err(Error::Overflow { layer: l + 1 });
                }
            }
            outputs.push(cur);
        }
        Ok(ForwardTrace {
            outputs,
            max_abs,
            overflow_layer,
            dropped,
        })
    }

    /// Jacobian of block `l` (0-based) at its input `x`.
    pub fn block_jacobian(&self, l: usize, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut cur = x.clone();
        let mut total: Option<DenseMatrix> = None;
        let chain = |total: Option<DenseMatrix>, j: DenseMatrix| -> Result<DenseMatrix> {
            match total {
                None => Ok(j),
                Some(t) => t.matmul(&j),
            }
        };
        for sub in &self.blocks[l].subs {
            let mut h = cur.clone();
            let mut jb: Option<DenseMatrix> = None;
            if let Some(n) = &sub.pre_norm {
                jb = Some(n.jacobian(&h)?.matrix);
                h = n.apply(&h);
            }
            for op in &sub.branch {
                jb = Some(chain(jb, op.jacobian(&h)?)?);
                h = op.apply(&h);
            }
            let (d, n) = cur.shape();
            let mut js = match jb {
                Some(j) => j,
                None => DenseMatrix::identity(d * n),
            };
            match &sub.shortcut {
                Shortcut::None => cur = h,
                Shortcut::Plain => {
                    for i in 0..d * n {
                        js.set(i, i, js.get(i, i) + 1.0);
                    }
                    h.axpy(1.0, &cur)?;
                    cur = h;
                }
                Shortcut::Weighted { nu } => {
                    // Column k of the branch Jacobian is output feature k % d.
                    for i in 0..js.rows() {
                        for (k, v) in js.row_mut(i).iter_mut().enumerate() {
                            *v *= nu[k % d];
                        }
                        js.set(i, i, js.get(i, i) + 1.0);
                    }
                    cur = DenseMatrix::from_fn(d, n, |i, j| cur.get(i, j) + nu[i] * h.get(i, j));
                }
            }
            if let Some(p) = &sub.post_norm {
                js = js.matmul(&p.jacobian(&cur)?.matrix)?;
                cur = p.apply(&cur);
            }
            total = Some(chain(total, js)?);
        }
        Ok(total.unwrap_or_else(|| DenseMatrix::identity(x.len())))
    }

    /// Per-block Jacobians along the forward trajectory of `x`.
    pub fn block_jacobians(&self, x: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        self.check_guard()?;
        let trace = self.forward_trace(x, ForwardOptions::default())?;
        (0..self.depth())
            .map(|l| self.block_jacobian(l, &trace.outputs[l]))
            .collect()
    }

    fn check_guard(&self) -> Result<()> {
        let (d, n) = self.input_shape;
        let mut widest = d * n;
        if let Ok((d2, n2)) = self.output_shape() {
            widest = widest.max(d2 * n2);
        }
        if widest > JACOBIAN_GUARD {
            return Err(Error::Resource(format!(
                "Jacobian of dimension {widest} exceeds the guard D·N <= {JACOBIAN_GUARD}"
            )));
        }
        Ok(())
    }
}

/// Builds the network described by `spec`; every weight matrix has its own
/// substream keyed by (block, matrix), so a depth-`L` network is a prefix of
/// any deeper network with the same seed.
pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let d = spec.width;
    let mut init = spec.init;
    init.depth = spec.depth;
    let norm = spec.norm_kind.resolve(spec.family);
    let make_norm = || spec.use_norm.then(|| norm_layer(norm, d, spec.bn_stats));
    let shortcut = || match (spec.use_residual, spec.wrs_nu_init) {
        (false, _) => Shortcut::None,
        (true, None) => Shortcut::Plain,
        (true, Some(nu)) => Shortcut::Weighted {
            nu: vec![nu.clamp(-layers::DEFAULT_OMEGA, layers::DEFAULT_OMEGA); d],
        },
    };
    let (pre, post) = match spec.norm_position {
        NormPosition::Post => (None, make_norm()),
        NormPosition::Pre => (make_norm(), None),
    };
    let mut blocks = Vec::with_capacity(spec.depth);
    for l in 0..spec.depth {
        let draw = |m: u16, n_in: usize, n_out: usize, fan_in: usize, fan_out: usize| {
            let mut r = rng::stream(seed, rng::stream_id(NET_STREAM, l as u32, m));
            init::init_with_fans(&init, n_in, n_out, fan_in, fan_out, &mut r)
        };
        let subs = match spec.family.attention_kind() {
            Some(kind) => {
                let w_q = draw(0, d, d, d, d)?;
                let w_k = if kind == AttentionKind::L2A {
                    w_q.clone()
                } else {
                    draw(1, d, d, d, d)?
                };
                let w_v = draw(2, d, d, d, d)?;
                let attn = AttentionParams::new(kind, w_q, w_k, w_v, spec.heads)?;
                let hidden = spec.ffn_expand * d;
                let ffn = LayerSpec::FFN {
                    w1: draw(3, d, hidden, d, hidden)?,
                    b1: vec![0.0; hidden],
                    w2: draw(4, hidden, d, hidden, d)?,
                    b2: vec![0.0; d],
                };
                vec![
                    SubBlock {
                        branch: vec![Op::Attention(attn)],
                        shortcut: shortcut(),
                        pre_norm: pre.clone(),
                        post_norm: post.clone(),
                    },
                    SubBlock {
                        branch: vec![Op::Layer(ffn)],
                        shortcut: shortcut(),
                        pre_norm: pre.clone(),
                        post_norm: post.clone(),
                    },
                ]
            }
            None => {
                let k = spec.kernel_size;
                let fan = k * k * d;
                let conv = |m: u16| -> Result<LayerSpec> {
                    Ok(LayerSpec::Conv2D(Conv2d {
                        kernel: draw(m, k * k * d, d, fan, fan)?,
                        bias: vec![0.0; d],
                        in_channels: d,
                        kernel_size: k,
                        stride: spec.stride,
                        padding: spec.padding,
                        height: spec.input_height,
                        width: spec.input_width,
                    }))
                };
                let mut branch = vec![Op::Layer(conv(0)?)];
                let inner_norm = spec.use_norm.then(|| norm_layer(norm, d, spec.bn_stats));
                if let Some(n) = &inner_norm {
                    branch.push(Op::Layer(n.clone()));
                }
                branch.push(Op::Layer(LayerSpec::ReLU));
                branch.push(Op::Layer(conv(1)?));
                if let Some(n) = inner_norm {
                    branch.push(Op::Layer(n));
                }
                vec![SubBlock {
                    branch,
                    shortcut: shortcut(),
                    pre_norm: None,
                    post_norm: None,
                }]
            }
        };
        blocks.push(Block { subs });
    }
    let net = Network {
        spec: Some(spec.clone()),
        blocks,
        input_shape: spec.input_shape(),
    };
    debug_assert_eq!(net.output_shape().ok(), Some(spec.input_shape()));
    Ok(net)
}

/// Normalization layer over `d` features with unit-variance output scaling:
/// LayerNorm and RMSNorm use `γ = √d` and `ε·d`, which is the usual
/// per-feature form `(x − μ)/√(σ² + ε)` written with the sum of squares.
pub fn norm_layer(kind: NormChoice, d: usize, stats: BnStats) -> LayerSpec {
    let scaled = Affine {
        gamma: vec![(d as f64).sqrt(); d],
        beta: vec![0.0; d],
    };
    let unit = Affine {
        gamma: vec![1.0; d],
        beta: vec![0.0; d],
    };
    let eps = DEFAULT_EPS;
    match kind {
        NormChoice::Auto | NormChoice::LN => LayerSpec::LayerNorm {
            affine: scaled,
            eps: eps * d as f64,
        },
        NormChoice::RMSNorm => LayerSpec::RMSNorm {
            affine: scaled,
            eps: eps * d as f64,
        },
        NormChoice::CenterNorm => LayerSpec::CenterNorm { affine: unit },
        NormChoice::BN => LayerSpec::BatchNorm {
            affine: unit,
            eps,
            mode: match stats {
                BnStats::Batch => BnMode::Training,
                BnStats::Running => BnMode::Inference {
                    mean: vec![0.0; d],
                    var: vec![1.0; d],
                },
            },
        },
    }
}

pub fn net_forward(net: &Network, x: &DenseMatrix) -> Result<ForwardTrace> {
    net.forward_trace(x, ForwardOptions::default())
}

/// Full input-output Jacobian (denominator layout) as the chained product of
/// block Jacobians.
pub fn net_jacobian_product(net: &Network, x: &DenseMatrix) -> Result<DenseMatrix> {
    let jacs = net.block_jacobians(x)?;
    let mut it = jacs.into_iter();
    match it.next() {
        None => Ok(DenseMatrix::identity(x.len())),
        Some(first) => it.try_fold(first, |acc, j| acc.matmul(&j)),
    }
}
