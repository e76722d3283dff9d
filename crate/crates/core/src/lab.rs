//! Sampled Lipschitz estimates, layer-wise profiles, analytic bound
//! composition and floating-point range checks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionParams};
use crate::error::{Error, Result};
use crate::layers::{droppath_draw, Caveat, LayerSpec};
use crate::linalg::{
    deserialize_real, serialize_real, vector_norm, DenseMatrix, ExtendedReal, NormKind,
};
use crate::network::{ForwardOptions, Network, Op, Shortcut};
use crate::rng;

const BASE_STREAM: u16 = 0xb0;
const PERTURB_STREAM: u16 = 0xc0;

pub const FP16_MAX: f64 = 65504.0;
pub const FP32_MAX: f64 = 3.4e38;

/// Anything with a fixed input shape that can be evaluated.
pub trait LipschitzTarget: Sync {
    fn input_shape(&self) -> (usize, usize);
    /// May return non-finite entries; the estimator flags them.
    fn eval(&self, x: &DenseMatrix) -> Result<DenseMatrix>;
}

impl LipschitzTarget for Network {
    fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    fn eval(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let opts = ForwardOptions {
            probe_overflow: true,
            ..ForwardOptions::default()
        };
        Ok(self.forward_trace(x, opts)?.outputs.pop().expect("input"))
    }
}

/// A layer evaluated on `D × N` inputs.
pub struct LayerTarget<'a> {
    pub layer: &'a LayerSpec,
    pub shape: (usize, usize),
}

impl LipschitzTarget for LayerTarget<'_> {
    fn input_shape(&self) -> (usize, usize) {
        self.shape
    }

    fn eval(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.layer.forward(x)
    }
}

/// Attention evaluated on `tokens` tokens.
pub struct AttentionTarget<'a> {
    pub params: &'a AttentionParams,
    pub tokens: usize,
}

impl LipschitzTarget for AttentionTarget<'_> {
    fn input_shape(&self) -> (usize, usize) {
        (self.params.dim, self.tokens)
    }

    fn eval(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(attention::attn_forward(self.params, x)?.output)
    }
}

/// Arbitrary closure with a declared input shape.
pub struct FnTarget<F> {
    pub shape: (usize, usize),
    pub f: F,
}

impl<F> LipschitzTarget for FnTarget<F>
where
    F: Fn(&DenseMatrix) -> DenseMatrix + Sync,
{
    fn input_shape(&self) -> (usize, usize) {
        self.shape
    }

    fn eval(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok((self.f)(x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub base_points: usize,
    pub perturbations: usize,
    pub epsilon: f64,
    pub norm: NormKind,
    pub seed: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            base_points: 10,
            perturbations: 10,
            epsilon: 1e-7,
            norm: NormKind::L2,
            seed: 0,
        }
    }
}

impl EstimateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.base_points == 0 || self.perturbations == 0 {
            return Err(Error::InvalidParam("sample counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// `K_s`; `+∞` when an evaluation overflowed.
    #[serde(
        serialize_with = "serialize_real",
        deserialize_with = "deserialize_real"
    )]
    pub value: f64,
    pub norm: NormKind,
    pub epsilon: f64,
    pub num_base_points: usize,
    pub num_perturbations: usize,
    pub seed: u64,
    /// `(base point, perturbation)` indices of the maximizing sample.
    pub argmax_sample: (usize, usize),
    pub overflow: bool,
}

/// Base point `i` of a run: `N(0, I)` from its own substream.
pub fn base_point(seed: u64, i: usize, shape: (usize, usize)) -> DenseMatrix {
    let mut r = rng::stream(seed, rng::stream_id(BASE_STREAM, i as u32, 0));
    DenseMatrix::new(
        shape.0,
        shape.1,
        rng::gaussian_vec(&mut r, shape.0 * shape.1),
    )
    .expect("sized")
}

/// Perturbation direction `j` of base point `i`.
pub fn perturbation(seed: u64, i: usize, j: usize, shape: (usize, usize)) -> DenseMatrix {
    let mut r = rng::stream(seed, rng::stream_id(PERTURB_STREAM, i as u32, j as u16));
    DenseMatrix::new(
        shape.0,
        shape.1,
        rng::gaussian_vec(&mut r, shape.0 * shape.1),
    )
    .expect("sized")
}

/// `K_s = max ‖f(x+εz) − f(x)‖_p / ‖εz‖_p` over sampled base points and
/// Gaussian directions.
///
/// The denominator is the perturbation actually realized in floating point,
/// `(x+εz) − x`, so homogeneous maps such as `2x` give exact ratios.
#[allow(non_snake_case)]
pub fn estimate_K(target: &dyn LipschitzTarget, cfg: &EstimateConfig) -> Result<LipschitzEstimate> {
    estimate_K_with(target, cfg, None, None)
}

/// [`estimate_K`] with caller-supplied base points and/or directions; when
/// supplied they replace the sampled ones and set the sample counts.
#[allow(non_snake_case)]
pub fn estimate_K_with(
    target: &dyn LipschitzTarget,
    cfg: &EstimateConfig,
    base: Option<&[DenseMatrix]>,
    directions: Option<&[DenseMatrix]>,
) -> Result<LipschitzEstimate> {
    cfg.validate()?;
    let shape = target.input_shape();
    let nb = base.map_or(cfg.base_points, <[_]>::len);
    let np = directions.map_or(cfg.perturbations, <[_]>::len);
    if nb == 0 || np == 0 {
        return Err(Error::InvalidParam("sample counts must be >= 1".into()));
    }
    for m in base
        .into_iter()
        .flatten()
        .chain(directions.into_iter().flatten())
    {
        if m.shape() != shape {
            return Err(Error::shape(
                "estimate_K",
                "supplied sample has the wrong shape",
            ));
        }
    }
    let per_base: Vec<Result<Vec<f64>>> = (0..nb)
        .into_par_iter()
        .map(|i| {
            let x = match base {
                Some(b) => b[i].clone(),
                None => base_point(cfg.seed, i, shape),
            };
            let fx = target.eval(&x)?;
            (0..np)
                .map(|j| {
                    let z = match directions {
                        Some(d) => d[j].clone(),
                        None => perturbation(cfg.seed, i, j, shape),
                    };
                    let mut xp = x.clone();
                    xp.axpy(cfg.epsilon, &z)?;
                    let fxp = target.eval(&xp)?;
                    Ok(ratio(&fx, &fxp, &x, &xp, cfg.norm))
                })
                .collect()
        })
        .collect();
    let mut grid = Vec::with_capacity(nb);
    for r in per_base {
        grid.push(r?);
    }
    Ok(reduce(&grid, cfg, nb, np))
}

fn ratio(
    fx: &DenseMatrix,
    fxp: &DenseMatrix,
    x: &DenseMatrix,
    xp: &DenseMatrix,
    norm: NormKind,
) -> f64 {
    if !fx.is_finite() || !fxp.is_finite() {
        return f64::INFINITY;
    }
    let num: Vec<f64> = fxp
        .data()
        .iter()
        .zip(fx.data())
        .map(|(a, b)| a - b)
        .collect();
    let den: Vec<f64> = xp.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
    let d = vector_norm(&den, norm);
    if d == 0.0 {
        return 0.0;
    }
    vector_norm(&num, norm) / d
}

/// Ordered max over `grid[i][j]`; the first maximizer wins ties.
fn reduce(grid: &[Vec<f64>], cfg: &EstimateConfig, nb: usize, np: usize) -> LipschitzEstimate {
    let mut best = f64::NEG_INFINITY;
    let mut arg = (0, 0);
    for (i, row) in grid.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                arg = (i, j);
            }
        }
    }
    LipschitzEstimate {
        value: best.max(0.0),
        norm: cfg.norm,
        epsilon: cfg.epsilon,
        num_base_points: nb,
        num_perturbations: np,
        seed: cfg.seed,
        argmax_sample: arg,
        overflow: best == f64::INFINITY,
    }
}

/// `K_s` of every prefix network `depths[k]` under every norm in `norms`,
/// sharing one forward pass per sample. Entry `[k][m]` equals
/// [`estimate_K`] on the depth-`depths[k]` prefix with norm `norms[m]`.
pub fn estimate_prefixes(
    net: &Network,
    depths: &[usize],
    norms: &[NormKind],
    cfg: &EstimateConfig,
) -> Result<Vec<Vec<LipschitzEstimate>>> {
    cfg.validate()?;
    if let Some(&d) = depths.iter().find(|&&d| d == 0 || d > net.depth()) {
        return Err(Error::InvalidParam(format!(
            "prefix depth {d} outside [1, {}]",
            net.depth()
        )));
    }
    let deepest = depths.iter().copied().max().unwrap_or(0);
    let shape = net.input_shape;
    let opts = ForwardOptions {
        probe_overflow: true,
        ..ForwardOptions::default()
    };
    // ratios[i][j][k][m]
    let per_base: Vec<Result<Vec<Vec<Vec<f64>>>>> = (0..cfg.base_points)
        .into_par_iter()
        .map(|i| {
            let x = base_point(cfg.seed, i, shape);
            let tx = net.forward_prefix(&x, deepest, opts)?;
            (0..cfg.perturbations)
                .map(|j| {
                    let mut xp = x.clone();
                    xp.axpy(cfg.epsilon, &perturbation(cfg.seed, i, j, shape))?;
                    let tp = net.forward_prefix(&xp, deepest, opts)?;
                    Ok(depths
                        .iter()
                        .map(|&d| {
                            norms
                                .iter()
                                .map(|&nk| ratio(&tx.outputs[d], &tp.outputs[d], &x, &xp, nk))
                                .collect()
                        })
                        .collect())
                })
                .collect()
        })
        .collect();
    let mut all = Vec::with_capacity(cfg.base_points);
    for r in per_base {
        all.push(r?);
    }
    Ok((0..depths.len())
        .map(|k| {
            norms
                .iter()
                .enumerate()
                .map(|(m, &nk)| {
                    let grid: Vec<Vec<f64>> = all
                        .iter()
                        .map(|row| row.iter().map(|s| s[k][m]).collect())
                        .collect();
                    let c = EstimateConfig { norm: nk, ..*cfg };
                    reduce(&grid, &c, cfg.base_points, cfg.perturbations)
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseProfile {
    /// `K_l0[l]`: from the input to the output of layer `l`, for `l ∈ [0, L]`.
    pub k_l0: Vec<f64>,
    /// `K_Ll[l]`: from the output of layer `l` to the network output; `None`
    /// when layer `l` did not respond to any perturbation.
    pub k_ll: Vec<Option<f64>>,
    /// Per layer, samples excluded from `K_Ll` for a zero denominator.
    pub undefined_samples: Vec<usize>,
    pub norm: NormKind,
    pub epsilon: f64,
    pub num_perturbations: usize,
    pub seed: u64,
}

/// Layer-wise profile at one input `x`; each perturbation costs one
/// forward pair, shared by all layers.
pub fn estimate_layerwise(
    net: &Network,
    x: &DenseMatrix,
    perturbations: usize,
    epsilon: f64,
    norm: NormKind,
    seed: u64,
) -> Result<LayerwiseProfile> {
    EstimateConfig {
        base_points: 1,
        perturbations,
        epsilon,
        norm,
        seed,
    }
    .validate()?;
    let opts = ForwardOptions {
        probe_overflow: true,
        ..ForwardOptions::default()
    };
    let depth = net.depth();
    let tx = net.forward_trace(x, opts)?;
    let samples: Vec<Result<Vec<f64>>> = (0..perturbations)
        .into_par_iter()
        .map(|j| {
            let mut xp = x.clone();
            xp.axpy(epsilon, &perturbation(seed, 0, j, x.shape()))?;
            let tp = net.forward_trace(&xp, opts)?;
            Ok((0..=depth)
                .map(|l| {
                    let o = &tx.outputs[l];
                    let p = &tp.outputs[l];
                    if !o.is_finite() || !p.is_finite() {
                        return f64::INFINITY;
                    }
                    let diff: Vec<f64> =
                        p.data().iter().zip(o.data()).map(|(a, b)| a - b).collect();
                    vector_norm(&diff, norm)
                })
                .collect())
        })
        .collect();
    let mut diffs = Vec::with_capacity(perturbations);
    for s in samples {
        diffs.push(s?);
    }
    let mut k_l0 = vec![0.0f64; depth + 1];
    let mut k_ll = vec![None::<f64>; depth + 1];
    let mut undefined = vec![0usize; depth + 1];
    for d in &diffs {
        let input = d[0];
        for l in 0..=depth {
            let r = if input > 0.0 { d[l] / input } else { 0.0 };
            if r > k_l0[l] || r.is_nan() {
                k_l0[l] = if r.is_nan() { f64::INFINITY } else { r };
            }
            if d[l] == 0.0 || !d[l].is_finite() {
                undefined[l] += 1;
                continue;
            }
            let q = if l == depth { 1.0 } else { d[depth] / d[l] };
            let q = if q.is_nan() { f64::INFINITY } else { q };
            k_ll[l] = Some(k_ll[l].map_or(q, |m: f64| m.max(q)));
        }
    }
    Ok(LayerwiseProfile {
        k_l0,
        k_ll,
        undefined_samples: undefined,
        norm,
        epsilon,
        num_perturbations: perturbations,
        seed,
    })
}

/// Bound contribution of one sub-block `post ∘ (shortcut + branch ∘ pre)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubBound {
    /// 1-based block index.
    pub block: usize,
    /// The branch has a shortcut and may be dropped by DropPath.
    pub residual: bool,
    /// `1 + Lip(branch)` (times `max|ν|` for weighted shortcuts) or the raw
    /// branch bound without a shortcut.
    pub branch: ExtendedReal,
    /// Bound of the trailing normalization (1 without one).
    pub norm: ExtendedReal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// One bound per block.
    pub per_layer: Vec<ExtendedReal>,
    /// `K_u`, the product of `per_layer`.
    pub product: ExtendedReal,
    pub caveats: Vec<Caveat>,
    pub factors: Vec<SubBound>,
}

/// Analytic upper bound of a network as the product of per-block bounds.
pub fn compose_network_bound(net: &Network) -> Result<BoundReport> {
    let mut factors = Vec::new();
    let mut caveats = Vec::new();
    let mut per_layer = Vec::with_capacity(net.depth());
    let (mut d, mut n) = net.input_shape;
    for (l, block) in net.blocks.iter().enumerate() {
        let mut block_bound = ExtendedReal::ONE;
        for sub in &block.subs {
            let mut inner = ExtendedReal::ONE;
            let (d0, n0) = (d, n);
            if let Some(p) = &sub.pre_norm {
                inner = inner * p.lip_bound();
                caveats.extend(p.caveats());
            }
            for op in &sub.branch {
                let b = match op {
                    Op::Layer(layer) => {
                        caveats.extend(layer.caveats());
                        layer.lip_bound()
                    }
                    Op::Attention(a) => {
                        caveats.extend(attention::attn_bound_caveats(a));
                        attention::attn_lip_bound(a, n)?
                    }
                };
                (d, n) = op.output_shape(d, n)?;
                inner = inner * b;
            }
            if sub.shortcut != Shortcut::None {
                (d, n) = (d0, n0);
            }
            let branch = match &sub.shortcut {
                Shortcut::None => inner,
                Shortcut::Plain => inner + 1.0,
                Shortcut::Weighted { nu } => {
                    inner * nu.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1.0
                }
            };
            let norm = match &sub.post_norm {
                Some(p) => {
                    caveats.extend(p.caveats());
                    p.lip_bound()
                }
                None => ExtendedReal::ONE,
            };
            block_bound = block_bound * branch * norm;
            factors.push(SubBound {
                block: l + 1,
                residual: sub.shortcut != Shortcut::None,
                branch,
                norm,
            });
        }
        per_layer.push(block_bound);
    }
    caveats.sort();
    caveats.dedup();
    Ok(BoundReport {
        product: per_layer.iter().copied().product(),
        per_layer,
        caveats,
        factors,
    })
}

/// Bound report of a single layer.
pub fn layer_bound_report(layer: &LayerSpec) -> BoundReport {
    let b = layer.lip_bound();
    BoundReport {
        per_layer: vec![b],
        product: b,
        caveats: layer.caveats(),
        factors: vec![SubBound {
            block: 1,
            residual: false,
            branch: b,
            norm: ExtendedReal::ONE,
        }],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropPathMode {
    /// Worst case: nothing dropped.
    Deterministic,
    /// One Bernoulli(p) draw per residual branch.
    Sampled,
}

/// Bound with dropped residual factors replaced by 1. Draws use the same
/// indexing as DropPath in the forward pass, so a seed describes one
/// realized network.
pub fn droppath_bound(
    report: &BoundReport,
    p: f64,
    mode: DropPathMode,
    seed: u64,
) -> Result<ExtendedReal> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParam(format!(
            "drop probability must be in [0,1], got {p}"
        )));
    }
    if mode == DropPathMode::Deterministic || p == 0.0 {
        return Ok(report.product);
    }
    let mut total = ExtendedReal::ONE;
    for (k, f) in report.factors.iter().enumerate() {
        let dropped = f.residual && droppath_draw(p, seed, k as u32);
        total = total * if dropped { ExtendedReal::ONE } else { f.branch } * f.norm;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    FP16,
    FP32,
}

impl Precision {
    pub fn range(self) -> f64 {
        match self {
            Precision::FP16 => FP16_MAX,
            Precision::FP32 => FP32_MAX,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp16" => Ok(Precision::FP16),
            "fp32" => Ok(Precision::FP32),
            _ => Err(Error::InvalidParam(format!("unknown precision '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrincipleReport {
    pub precision: Precision,
    pub range: f64,
    /// Entry `l-1`: largest |activation| inside block `l`.
    #[serde(with = "reals")]
    pub max_abs_activation: Vec<f64>,
    /// Entry `l-1`: largest |∂x^L/∂x^(l-1)|, the gradient reaching block
    /// `l`. Empty when the network exceeds the Jacobian guard.
    #[serde(with = "reals")]
    pub max_abs_gradient: Vec<f64>,
    pub backward_checked: bool,
    /// Blocks violating either principle.
    pub violations: Vec<usize>,
    pub forward_violations: Vec<usize>,
    pub backward_violations: Vec<usize>,
}

mod reals {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct R(
        #[serde(
            serialize_with = "crate::linalg::serialize_real",
            deserialize_with = "crate::linalg::deserialize_real"
        )]
        f64,
    );

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|&x| R(x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<R>::deserialize(d)?.into_iter().map(|r| r.0).collect())
    }
}

/// Scans activations and, for small networks, chained-Jacobian gradients
/// against the largest finite value of `precision`.
pub fn check_principles(
    net: &Network,
    x: &DenseMatrix,
    precision: Precision,
) -> Result<PrincipleReport> {
    let range = precision.range();
    let opts = ForwardOptions {
        probe_overflow: true,
        ..ForwardOptions::default()
    };
    let trace = net.forward_trace(x, opts)?;
    let forward_violations: Vec<usize> = (1..=net.depth())
        .filter(|&l| !(trace.max_abs[l - 1] <= range))
        .collect();
    let (mut max_abs_gradient, mut backward_checked) = (Vec::new(), false);
    if trace.overflow_layer.is_none() {
        match net.block_jacobians(x) {
            Ok(jacs) => {
                // g[l] = J_{l+1} ⋯ J_L accumulated from the output backwards.
                let mut acc: Option<DenseMatrix> = None;
                let mut rev = Vec::with_capacity(jacs.len());
                for j in jacs.iter().rev() {
                    let next = match acc {
                        None => j.clone(),
                        Some(a) => j.matmul(&a)?,
                    };
                    rev.push(next.max_abs());
                    acc = Some(next);
                }
                rev.reverse();
                max_abs_gradient = rev;
                backward_checked = true;
            }
            Err(Error::Resource(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let backward_violations: Vec<usize> = max_abs_gradient
        .iter()
        .enumerate()
        .filter(|(_, g)| !(**g <= range))
        .map(|(k, _)| k + 1)
        .collect();
    let mut violations: Vec<usize> = forward_violations
        .iter()
        .chain(&backward_violations)
        .copied()
        .collect();
    violations.sort_unstable();
    violations.dedup();
    Ok(PrincipleReport {
        precision,
        range,
        max_abs_activation: trace.max_abs,
        max_abs_gradient,
        backward_checked,
        violations,
        forward_violations,
        backward_violations,
    })
}

/// `K_s ≤ K_u + 1e-9`, vacuous when `K_u = ∞`.
pub fn sandwich_check(estimate: &LipschitzEstimate, report: &BoundReport) -> bool {
    match report.product.finite() {
        None => true,
        Some(ku) => estimate.value <= ku + 1e-9,
    }
}
