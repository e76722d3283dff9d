//! Forward maps, Jacobians and Lipschitz upper bounds of standard modules.
//!
//! A layer acts on a `D × N` matrix whose columns are samples (or tokens,
//! or spatial positions). Column-wise layers treat each column
//! independently; batch normalization in training mode couples the columns
//! of a feature. Jacobians are taken with respect to the column-major
//! flattening of the input (column `n`, feature `d` at index `n·D + d`) and
//! use the denominator layout, `J[i][j] = ∂y_j / ∂x_i`, so that a linear
//! layer `y = Wx` has Jacobian `Wᵀ` and chains multiply left to right.

mod check;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, im2col, DenseMatrix, ExtendedReal, Image};

pub(crate) use check::droppath_draw;
pub use check::{
    check_jacobian_fd, droppath_apply, kink_margin, sample_input_shape, sample_layer,
    DropPathOutput, JacobianReport,
};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_OMEGA: f64 = 2.0;
/// Upper bound on |d/dx x·σ(x)|, shared by Swish and the sigmoid form of GELU.
pub const SMOOTH_ACTIVATION_BOUND: f64 = 1.1;
const GELU_SCALE: f64 = 1.702;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Linear,
    Conv2D,
    Sigmoid,
    Softmax,
    ReLU,
    GELU,
    Swish,
    LayerNorm,
    BatchNorm,
    RMSNorm,
    CenterNorm,
    WeightNorm,
    FFN,
    Residual,
    WeightedResidual,
    MaxPool,
    AvgPool,
}

impl LayerKind {
    pub const ALL: [LayerKind; 17] = [
        LayerKind::Linear,
        LayerKind::Conv2D,
        LayerKind::Sigmoid,
        LayerKind::Softmax,
        LayerKind::ReLU,
        LayerKind::GELU,
        LayerKind::Swish,
        LayerKind::LayerNorm,
        LayerKind::BatchNorm,
        LayerKind::RMSNorm,
        LayerKind::CenterNorm,
        LayerKind::WeightNorm,
        LayerKind::FFN,
        LayerKind::Residual,
        LayerKind::WeightedResidual,
        LayerKind::MaxPool,
        LayerKind::AvgPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::Conv2D => "conv2d",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Softmax => "softmax",
            LayerKind::ReLU => "relu",
            LayerKind::GELU => "gelu",
            LayerKind::Swish => "swish",
            LayerKind::LayerNorm => "layer_norm",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::RMSNorm => "rms_norm",
            LayerKind::CenterNorm => "center_norm",
            LayerKind::WeightNorm => "weight_norm",
            LayerKind::FFN => "ffn",
            LayerKind::Residual => "residual",
            LayerKind::WeightedResidual => "weighted_residual",
            LayerKind::MaxPool => "max_pool",
            LayerKind::AvgPool => "avg_pool",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown layer kind '{s}'")))
    }
}

/// Element-wise activation functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    ReLU,
    /// Sigmoid approximation `x·σ(1.702x)`.
    GELU,
    Swish,
}

impl Activation {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::ReLU => x.max(0.0),
            Activation::GELU => x * sigmoid(GELU_SCALE * x),
            Activation::Swish => x * sigmoid(x),
        }
    }

    /// Derivative; ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::ReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::GELU => {
                let s = sigmoid(GELU_SCALE * x);
                s + GELU_SCALE * x * s * (1.0 - s)
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }

    pub fn lip_bound(self) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
            Activation::ReLU => 1.0,
            Activation::GELU | Activation::Swish => SMOOTH_ACTIVATION_BOUND,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BnMode {
    /// Statistics over the columns of the input batch.
    Training,
    /// Fixed running statistics.
    Inference { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// 2-D convolution on a `C × (H·W)` input (channels by raster positions).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `C_out × (K·K·C_in)`, patch entries ordered (kernel row, kernel column, channel).
    pub kernel: DenseMatrix,
    pub bias: Vec<f64>,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Linear(Linear),
    Conv2D(Conv2d),
    Sigmoid,
    Softmax,
    ReLU,
    GELU,
    Swish,
    LayerNorm {
        affine: Affine,
        eps: f64,
    },
    BatchNorm {
        affine: Affine,
        eps: f64,
        mode: BnMode,
    },
    RMSNorm {
        affine: Affine,
        eps: f64,
    },
    CenterNorm {
        affine: Affine,
    },
    /// `y = Wx` with rows `W_i = γ_i v_i / √(‖v_i‖² + ε)`.
    WeightNorm {
        v: DenseMatrix,
        gamma: Vec<f64>,
        eps: f64,
    },
    FFN {
        w1: DenseMatrix,
        b1: Vec<f64>,
        w2: DenseMatrix,
        b2: Vec<f64>,
    },
    Residual {
        inner: Box<LayerSpec>,
    },
    WeightedResidual {
        inner: Box<LayerSpec>,
        nu: Vec<f64>,
        omega: f64,
    },
    /// Maximum over the features of each column.
    MaxPool,
    /// Mean over the `dim` features of each column.
    AvgPool {
        dim: usize,
    },
}

/// Jacobian plus a flag for evaluation at a non-differentiable point.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerJacobian {
    pub matrix: DenseMatrix,
    pub non_smooth: bool,
}

/// Known limitations of an analytic bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Caveat {
    /// Convolution with overlapping patches: the per-patch spectral norm
    /// does not bound the whole operator.
    ConvOverlap,
    /// Multi-head attention bound composed from single-head bounds.
    MultiheadHeuristic,
    /// Attention without a finite bound.
    DotProductAttention,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Linear(_) => LayerKind::Linear,
            LayerSpec::Conv2D(_) => LayerKind::Conv2D,
            LayerSpec::Sigmoid => LayerKind::Sigmoid,
            LayerSpec::Softmax => LayerKind::Softmax,
            LayerSpec::ReLU => LayerKind::ReLU,
            LayerSpec::GELU => LayerKind::GELU,
            LayerSpec::Swish => LayerKind::Swish,
            LayerSpec::LayerNorm { .. } => LayerKind::LayerNorm,
            LayerSpec::BatchNorm { .. } => LayerKind::BatchNorm,
            LayerSpec::RMSNorm { .. } => LayerKind::RMSNorm,
            LayerSpec::CenterNorm { .. } => LayerKind::CenterNorm,
            LayerSpec::WeightNorm { .. } => LayerKind::WeightNorm,
            LayerSpec::FFN { .. } => LayerKind::FFN,
            LayerSpec::Residual { .. } => LayerKind::Residual,
            LayerSpec::WeightedResidual { .. } => LayerKind::WeightedResidual,
            LayerSpec::MaxPool => LayerKind::MaxPool,
            LayerSpec::AvgPool { .. } => LayerKind::AvgPool,
        }
    }

    pub fn linear(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        let l = LayerSpec::Linear(Linear { weight, bias });
        l.validate()?;
        Ok(l)
    }

    pub fn weighted_residual(inner: LayerSpec, nu: Vec<f64>, omega: f64) -> Result<Self> {
        let l = LayerSpec::WeightedResidual {
            inner: Box::new(inner),
            nu,
            omega,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn activation(&self) -> Option<Activation> {
        match self {
            LayerSpec::Sigmoid => Some(Activation::Sigmoid),
            LayerSpec::ReLU => Some(Activation::ReLU),
            LayerSpec::GELU => Some(Activation::GELU),
            LayerSpec::Swish => Some(Activation::Swish),
            _ => None,
        }
    }

    /// Checks parameter invariants that do not depend on the input.
    pub fn validate(&self) -> Result<()> {
        fn eps_ok(eps: f64) -> Result<()> {
            if eps > 0.0 && eps.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParam(format!(
                    "smoothing eps must be > 0, got {eps}"
                )))
            }
        }
        fn affine_ok(a: &Affine) -> Result<()> {
            if a.gamma.len() != a.beta.len() {
                return Err(Error::InvalidParam(format!(
                    "gamma has {} entries, beta {}",
                    a.gamma.len(),
                    a.beta.len()
                )));
            }
            Ok(())
        }
        match self {
            LayerSpec::Linear(l) => {
                if l.bias.len() != l.weight.rows() {
                    return Err(Error::InvalidParam(format!(
                        "bias length {} for {} output rows",
                        l.bias.len(),
                        l.weight.rows()
                    )));
                }
            }
            LayerSpec::Conv2D(c) => {
                if c.kernel.cols() != c.kernel_size * c.kernel_size * c.in_channels
                    || c.bias.len() != c.kernel.rows()
                {
                    return Err(Error::InvalidParam(
                        "conv kernel must be C_out x (K*K*C_in) with C_out biases".into(),
                    ));
                }
                linalg::conv_output_len(c.height, c.kernel_size, c.stride, c.padding)?;
                linalg::conv_output_len(c.width, c.kernel_size, c.stride, c.padding)?;
            }
            LayerSpec::LayerNorm { affine, eps } | LayerSpec::RMSNorm { affine, eps } => {
                eps_ok(*eps)?;
                affine_ok(affine)?;
            }
            LayerSpec::BatchNorm { affine, eps, mode } => {
                eps_ok(*eps)?;
                affine_ok(affine)?;
                if let BnMode::Inference { mean, var } = mode {
                    if mean.len() != affine.gamma.len() || var.len() != affine.gamma.len() {
                        return Err(Error::InvalidParam("running stats length mismatch".into()));
                    }
                    if var.iter().any(|v| !(*v >= 0.0)) {
                        return Err(Error::InvalidParam("running variance must be >= 0".into()));
                    }
                }
            }
            LayerSpec::CenterNorm { affine } => {
                affine_ok(affine)?;
                if affine.gamma.len() < 2 {
                    return Err(Error::InvalidParam("CenterNorm needs D >= 2".into()));
                }
            }
            LayerSpec::WeightNorm { v, gamma, eps } => {
                eps_ok(*eps)?;
                if gamma.len() != v.rows() {
                    return Err(Error::InvalidParam(
                        "WeightNorm needs one gamma per row".into(),
                    ));
                }
            }
            LayerSpec::FFN { w1, b1, w2, b2 } => {
                if w2.cols() != w1.rows() || b1.len() != w1.rows() || b2.len() != w2.rows() {
                    return Err(Error::InvalidParam("inconsistent FFN shapes".into()));
                }
            }
            LayerSpec::Residual { inner } => inner.validate()?,
            LayerSpec::WeightedResidual { inner, nu, omega } => {
                inner.validate()?;
                if !(*omega > 0.0) {
                    return Err(Error::InvalidParam(format!(
                        "omega must be > 0, got {omega}"
                    )));
                }
                if let Some(v) = nu.iter().find(|v| !(v.abs() <= *omega)) {
                    return Err(Error::InvalidParam(format!(
                        "residual scale {v} exceeds clamp {omega}"
                    )));
                }
            }
            LayerSpec::Sigmoid
            | LayerSpec::Softmax
            | LayerSpec::ReLU
            | LayerSpec::GELU
            | LayerSpec::Swish
            | LayerSpec::MaxPool => {}
            LayerSpec::AvgPool { dim } => {
                if *dim == 0 {
                    return Err(Error::InvalidParam("AvgPool needs dim >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Output shape for a `rows × cols` input.
    pub fn output_shape(&self, rows: usize, cols: usize) -> Result<(usize, usize)> {
        let need = |d: usize, what: &str| -> Result<()> {
            if rows != d {
                return Err(Error::shape(
                    "layer_forward",
                    format!("{what} expects {d} input features, got {rows}"),
                ));
            }
            Ok(())
        };
        if rows == 0 || cols == 0 {
            return Err(Error::shape("layer_forward", "empty input"));
        }
        match self {
            LayerSpec::Linear(l) => {
                need(l.weight.cols(), "linear")?;
                Ok((l.weight.rows(), cols))
            }
            LayerSpec::Conv2D(c) => {
                need(c.in_channels, "conv2d")?;
                if cols != c.height * c.width {
                    return Err(Error::shape(
                        "layer_forward",
                        format!(
                            "conv2d expects {} positions, got {cols}",
                            c.height * c.width
                        ),
                    ));
                }
                let oh = linalg::conv_output_len(c.height, c.kernel_size, c.stride, c.padding)?;
                let ow = linalg::conv_output_len(c.width, c.kernel_size, c.stride, c.padding)?;
                Ok((c.kernel.rows(), oh * ow))
            }
            LayerSpec::LayerNorm { affine, .. }
            | LayerSpec::RMSNorm { affine, .. }
            | LayerSpec::BatchNorm { affine, .. }
            | LayerSpec::CenterNorm { affine } => {
                need(affine.gamma.len(), "normalization")?;
                Ok((rows, cols))
            }
            LayerSpec::WeightNorm { v, .. } => {
                need(v.cols(), "weight norm")?;
                Ok((v.rows(), cols))
            }
            LayerSpec::FFN { w1, w2, .. } => {
                need(w1.cols(), "ffn")?;
                Ok((w2.rows(), cols))
            }
            LayerSpec::Residual { inner } | LayerSpec::WeightedResidual { inner, .. } => {
                let out = inner.output_shape(rows, cols)?;
                if out != (rows, cols) {
                    return Err(Error::shape(
                        "layer_forward",
                        format!("residual branch maps {rows}x{cols} to {}x{}", out.0, out.1),
                    ));
                }
                if let LayerSpec::WeightedResidual { nu, .. } = self {
                    need(nu.len(), "weighted residual")?;
                }
                Ok((rows, cols))
            }
            LayerSpec::MaxPool => Ok((1, cols)),
            LayerSpec::AvgPool { dim } => {
                need(*dim, "avg pool")?;
                Ok((1, cols))
            }
            LayerSpec::Sigmoid
            | LayerSpec::Softmax
            | LayerSpec::ReLU
            | LayerSpec::GELU
            | LayerSpec::Swish => Ok((rows, cols)),
        }
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.output_shape(x.rows(), x.cols())?;
        Ok(self.apply(x))
    }

    /// Forward map without shape checks; callers guarantee compatibility.
    pub(crate) fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        let (d, n) = x.shape();
        match self {
            LayerSpec::Linear(l) => {
                let mut y = l.weight.matmul(x).expect("checked shape");
                add_row_bias(&mut y, &l.bias);
                y
            }
            LayerSpec::Conv2D(c) => conv_forward(c, x),
            LayerSpec::Sigmoid | LayerSpec::ReLU | LayerSpec::GELU | LayerSpec::Swish => {
                let act = self.activation().expect("activation");
                x.map(|v| act.value(v))
            }
            LayerSpec::Softmax => {
                let mut y = x.clone();
                for j in 0..n {
                    let col = softmax(&x.column(j));
                    y.set_column(j, &col);
                }
                y
            }
            LayerSpec::LayerNorm { affine, eps } => {
                let mut y = x.clone();
                for j in 0..n {
                    let mut col = x.column(j);
                    center(&mut col);
                    let s = (sum_sq(&col) + eps).sqrt();
                    let out: Vec<f64> = (0..d)
                        .map(|i| affine.gamma[i] * col[i] / s + affine.beta[i])
                        .collect();
                    y.set_column(j, &out);
                }
                y
            }
            LayerSpec::RMSNorm { affine, eps } => {
                let mut y = x.clone();
                for j in 0..n {
                    let col = x.column(j);
                    let s = (sum_sq(&col) + eps).sqrt();
                    let out: Vec<f64> = (0..d)
                        .map(|i| affine.gamma[i] * col[i] / s + affine.beta[i])
                        .collect();
                    y.set_column(j, &out);
                }
                y
            }
            LayerSpec::CenterNorm { affine } => {
                let scale = d as f64 / (d as f64 - 1.0);
                let mut y = x.clone();
                for j in 0..n {
                    let mut col = x.column(j);
                    center(&mut col);
                    let out: Vec<f64> = (0..d)
                        .map(|i| scale * affine.gamma[i] * col[i] + affine.beta[i])
                        .collect();
                    y.set_column(j, &out);
                }
                y
            }
            LayerSpec::BatchNorm { affine, eps, mode } => {
                let (mean, var) = bn_stats(x, mode);
                DenseMatrix::from_fn(d, n, |i, j| {
                    affine.gamma[i] * (x.get(i, j) - mean[i]) / (var[i] + eps).sqrt()
                        + affine.beta[i]
                })
            }
            LayerSpec::WeightNorm { v, gamma, eps } => weight_norm_matrix(v, gamma, *eps)
                .matmul(x)
                .expect("checked shape"),
            LayerSpec::FFN { w1, b1, w2, b2 } => {
                let mut h = w1.matmul(x).expect("checked shape");
                add_row_bias(&mut h, b1);
                h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                let mut y = w2.matmul(&h).expect("checked shape");
                add_row_bias(&mut y, b2);
                y
            }
            LayerSpec::Residual { inner } => {
                let mut y = inner.apply(x);
                y.axpy(1.0, x).expect("checked shape");
                y
            }
            LayerSpec::WeightedResidual { inner, nu, .. } => {
                let f = inner.apply(x);
                DenseMatrix::from_fn(d, n, |i, j| x.get(i, j) + nu[i] * f.get(i, j))
            }
            LayerSpec::MaxPool => DenseMatrix::from_fn(1, n, |_, j| {
                (0..d)
                    .map(|i| x.get(i, j))
                    .fold(f64::NEG_INFINITY, f64::max)
            }),
            LayerSpec::AvgPool { .. } => DenseMatrix::from_fn(1, n, |_, j| {
                (0..d).map(|i| x.get(i, j)).sum::<f64>() / d as f64
            }),
        }
    }

    pub fn jacobian(&self, x: &DenseMatrix) -> Result<LayerJacobian> {
        let (d_out, n_out) = self.output_shape(x.rows(), x.cols())?;
        let (d, n) = x.shape();
        let mut non_smooth = false;
        let matrix = match self {
            LayerSpec::Linear(l) => block_diag(n, d, d_out, |_| l.weight.transpose()),
            LayerSpec::WeightNorm { v, gamma, eps } => {
                let wt = weight_norm_matrix(v, gamma, *eps).transpose();
                block_diag(n, d, d_out, |_| wt.clone())
            }
            LayerSpec::Conv2D(c) => conv_jacobian(c, n_out),
            LayerSpec::Sigmoid | LayerSpec::ReLU | LayerSpec::GELU | LayerSpec::Swish => {
                let act = self.activation().expect("activation");
                if act == Activation::ReLU && x.data().iter().any(|&v| v == 0.0) {
                    non_smooth = true;
                }
                let mut diag = vec![0.0; d * n];
                for j in 0..n {
                    for i in 0..d {
                        diag[j * d + i] = act.derivative(x.get(i, j));
                    }
                }
                DenseMatrix::from_diag(&diag)
            }
            LayerSpec::Softmax => block_diag(n, d, d, |j| {
                let y = softmax(&x.column(j));
                DenseMatrix::from_fn(d, d, |a, b| {
                    if a == b {
                        y[a] * (1.0 - y[a])
                    } else {
                        -y[a] * y[b]
                    }
                })
            }),
            LayerSpec::LayerNorm { affine, eps } => block_diag(n, d, d, |j| {
                let mut y = x.column(j);
                center(&mut y);
                let s2 = sum_sq(&y) + eps;
                let s = s2.sqrt();
                // P (1/s) (I − y yᵀ / s²) diag(γ); P y = y, so this is
                // (1/s)(P − y yᵀ / s²) diag(γ).
                let dd = d as f64;
                DenseMatrix::from_fn(d, d, |a, b| {
                    let p = if a == b { 1.0 - 1.0 / dd } else { -1.0 / dd };
                    (p - y[a] * y[b] / s2) / s * affine.gamma[b]
                })
            }),
            LayerSpec::RMSNorm { affine, eps } => block_diag(n, d, d, |j| {
                let y = x.column(j);
                let s2 = sum_sq(&y) + eps;
                let s = s2.sqrt();
                DenseMatrix::from_fn(d, d, |a, b| {
                    let id = if a == b { 1.0 } else { 0.0 };
                    (id - y[a] * y[b] / s2) / s * affine.gamma[b]
                })
            }),
            LayerSpec::CenterNorm { affine } => {
                let dd = d as f64;
                let scale = dd / (dd - 1.0);
                block_diag(n, d, d, |_| {
                    DenseMatrix::from_fn(d, d, |a, b| {
                        let p = if a == b { 1.0 - 1.0 / dd } else { -1.0 / dd };
                        scale * p * affine.gamma[b]
                    })
                })
            }
            LayerSpec::BatchNorm { affine, eps, mode } => {
                let mut jm = DenseMatrix::zeros(d * n, d * n);
                match mode {
                    BnMode::Inference { var, .. } => {
                        for j in 0..n {
                            for f in 0..d {
                                let k = j * d + f;
                                jm.set(k, k, affine.gamma[f] / (var[f] + eps).sqrt());
                            }
                        }
                    }
                    BnMode::Training => {
                        let (mean, var) = bn_stats(x, mode);
                        let nn = n as f64;
                        for f in 0..d {
                            let s2 = var[f] + eps;
                            let s = s2.sqrt();
                            for i in 0..n {
                                for l in 0..n {
                                    let delta = if i == l { 1.0 } else { 0.0 };
                                    let ci = x.get(f, i) - mean[f];
                                    let cl = x.get(f, l) - mean[f];
                                    let dxhat = ((delta - 1.0 / nn) * s - ci * cl / (nn * s)) / s2;
                                    // input (f, l) → output (f, i)
                                    jm.set(l * d + f, i * d + f, affine.gamma[f] * dxhat);
                                }
                            }
                        }
                    }
                }
                jm
            }
            LayerSpec::FFN { w1, b1, w2, .. } => {
                let h = w1.matmul(x)?;
                let w1t = w1.transpose();
                let w2t = w2.transpose();
                block_diag(n, d, d_out, |j| {
                    let mut m = w1t.clone();
                    for k in 0..w1.rows() {
                        let pre = h.get(k, j) + b1[k];
                        if pre == 0.0 {
                            non_smooth = true;
                        }
                        if pre <= 0.0 {
                            for r in 0..d {
                                m.set(r, k, 0.0);
                            }
                        }
                    }
                    m.matmul(&w2t).expect("ffn shapes")
                })
            }
            LayerSpec::Residual { inner } => {
                let inner_j = inner.jacobian(x)?;
                non_smooth = inner_j.non_smooth;
                let mut m = inner_j.matrix;
                for k in 0..d * n {
                    m.set(k, k, m.get(k, k) + 1.0);
                }
                m
            }
            LayerSpec::WeightedResidual { inner, nu, .. } => {
                let inner_j = inner.jacobian(x)?;
                non_smooth = inner_j.non_smooth;
                let mut m = inner_j.matrix;
                for r in 0..d * n {
                    let row = m.row_mut(r);
                    for (c, v) in row.iter_mut().enumerate() {
                        *v *= nu[c % d];
                    }
                }
                for k in 0..d * n {
                    m.set(k, k, m.get(k, k) + 1.0);
                }
                m
            }
            LayerSpec::MaxPool => {
                let mut m = DenseMatrix::zeros(d * n, n);
                for j in 0..n {
                    let col = x.column(j);
                    let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let arg = col.iter().position(|&v| v == max).unwrap_or(0);
                    if col.iter().filter(|&&v| v == max).count() > 1 {
                        non_smooth = true;
                    }
                    m.set(j * d + arg, j, 1.0);
                }
                m
            }
            LayerSpec::AvgPool { .. } => {
                let mut m = DenseMatrix::zeros(d * n, n);
                for j in 0..n {
                    for i in 0..d {
                        m.set(j * d + i, j, 1.0 / d as f64);
                    }
                }
                m
            }
        };
        debug_assert_eq!(matrix.shape(), (d * n, d_out * n_out));
        Ok(LayerJacobian { matrix, non_smooth })
    }

    /// Analytic L2 Lipschitz upper bound.
    pub fn lip_bound(&self) -> ExtendedReal {
        let sn = |m: &DenseMatrix| linalg::spectral_norm_default(m);
        let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let b = match self {
            LayerSpec::Linear(l) => sn(&l.weight),
            LayerSpec::Conv2D(c) => sn(&c.kernel),
            LayerSpec::Sigmoid => 0.25,
            LayerSpec::Softmax | LayerSpec::ReLU | LayerSpec::MaxPool => 1.0,
            LayerSpec::GELU | LayerSpec::Swish => SMOOTH_ACTIVATION_BOUND,
            LayerSpec::LayerNorm { affine, eps } | LayerSpec::RMSNorm { affine, eps } => {
                max_abs(&affine.gamma) / eps.sqrt()
            }
            LayerSpec::BatchNorm { affine, eps, mode } => match mode {
                BnMode::Inference { var, .. } => affine
                    .gamma
                    .iter()
                    .zip(var)
                    .map(|(g, v)| g.abs() / (v + eps).sqrt())
                    .fold(0.0, f64::max),
                // Per feature the batch map is √N·u/√(‖u‖² + Nε) after
                // centering, whose slope is at most 1/√ε.
                BnMode::Training => max_abs(&affine.gamma) / eps.sqrt(),
            },
            LayerSpec::CenterNorm { affine } => {
                let d = affine.gamma.len() as f64;
                d / (d - 1.0) * max_abs(&affine.gamma)
            }
            LayerSpec::WeightNorm { gamma, .. } => gamma.iter().map(|g| g * g).sum::<f64>().sqrt(),
            LayerSpec::FFN { w1, w2, .. } => sn(w1) * sn(w2),
            LayerSpec::Residual { inner } => return inner.lip_bound() + 1.0,
            LayerSpec::WeightedResidual { inner, nu, .. } => {
                return inner.lip_bound() * max_abs(nu) + 1.0
            }
            // ‖(1/D)·1‖₂ = 1/√D.
            LayerSpec::AvgPool { dim } => 1.0 / (*dim as f64).sqrt(),
        };
        ExtendedReal::from_f64(b)
    }

    pub fn caveats(&self) -> Vec<Caveat> {
        match self {
            LayerSpec::Conv2D(c) if c.stride < c.kernel_size => vec![Caveat::ConvOverlap],
            LayerSpec::Residual { inner } | LayerSpec::WeightedResidual { inner, .. } => {
                inner.caveats()
            }
            _ => Vec::new(),
        }
    }
}

pub fn layer_forward(layer: &LayerSpec, x: &DenseMatrix) -> Result<DenseMatrix> {
    layer.validate()?;
    layer.forward(x)
}

pub fn layer_jacobian(layer: &LayerSpec, x: &DenseMatrix) -> Result<LayerJacobian> {
    layer.validate()?;
    layer.jacobian(x)
}

pub fn layer_lip_bound(layer: &LayerSpec) -> ExtendedReal {
    layer.lip_bound()
}

/// Column-major flattening used for Jacobian indexing.
pub fn flatten(x: &DenseMatrix) -> Vec<f64> {
    x.transpose().into_data()
}

/// Inverse of [`flatten`].
pub fn unflatten(v: &[f64], rows: usize, cols: usize) -> Result<DenseMatrix> {
    Ok(DenseMatrix::new(cols, rows, v.to_vec())?.transpose())
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn center(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub(crate) fn add_row_bias(y: &mut DenseMatrix, bias: &[f64]) {
    for (i, b) in bias.iter().enumerate() {
        if *b != 0.0 {
            y.row_mut(i).iter_mut().for_each(|v| *v += b);
        }
    }
}

fn bn_stats(x: &DenseMatrix, mode: &BnMode) -> (Vec<f64>, Vec<f64>) {
    match mode {
        BnMode::Inference { mean, var } => (mean.clone(), var.clone()),
        BnMode::Training => {
            let n = x.cols() as f64;
            let mut mean = Vec::with_capacity(x.rows());
            let mut var = Vec::with_capacity(x.rows());
            for i in 0..x.rows() {
                let row = x.row(i);
                let m = row.iter().sum::<f64>() / n;
                mean.push(m);
                var.push(row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n);
            }
            (mean, var)
        }
    }
}

pub(crate) fn weight_norm_matrix(v: &DenseMatrix, gamma: &[f64], eps: f64) -> DenseMatrix {
    let mut w = v.clone();
    for (i, g) in gamma.iter().enumerate() {
        let row = w.row_mut(i);
        let s = (sum_sq(row) + eps).sqrt();
        row.iter_mut().for_each(|x| *x *= g / s);
    }
    w
}

/// Block-diagonal Jacobian of a column-wise map: block `j` is `d_in × d_out`.
fn block_diag(
    n: usize,
    d_in: usize,
    d_out: usize,
    mut block: impl FnMut(usize) -> DenseMatrix,
) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(n * d_in, n * d_out);
    for j in 0..n {
        let b = block(j);
        for a in 0..d_in {
            let dst = &mut m.row_mut(j * d_in + a)[j * d_out..(j + 1) * d_out];
            dst.copy_from_slice(b.row(a));
        }
    }
    m
}

fn conv_forward(c: &Conv2d, x: &DenseMatrix) -> DenseMatrix {
    // x is C × HW; the HWC image is its transpose.
    let img = Image::new(c.height, c.width, c.in_channels, x.transpose().into_data())
        .expect("checked shape");
    let patches = im2col(&img, c.kernel_size, c.stride, c.padding).expect("checked geometry");
    let mut y = linalg::product(c.kernel.view(), patches.view().t()).expect("conv shapes");
    add_row_bias(&mut y, &c.bias);
    y
}

fn conv_jacobian(c: &Conv2d, n_out: usize) -> DenseMatrix {
    let cin = c.in_channels;
    let cout = c.kernel.rows();
    let k = c.kernel_size;
    let ow = linalg::conv_output_len(c.width, k, c.stride, c.padding).expect("checked");
    let mut m = DenseMatrix::zeros(cin * c.height * c.width, cout * n_out);
    for pos in 0..n_out {
        let (oy, ox) = (pos / ow, pos % ow);
        for ky in 0..k {
            let iy = (oy * c.stride + ky) as isize - c.padding as isize;
            if iy < 0 || iy >= c.height as isize {
                continue;
            }
            for kx in 0..k {
                let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                if ix < 0 || ix >= c.width as isize {
                    continue;
                }
                let pix = iy as usize * c.width + ix as usize;
                for ch in 0..cin {
                    let col = (ky * k + kx) * cin + ch;
                    for o in 0..cout {
                        let r = pix * cin + ch;
                        let cidx = pos * cout + o;
                        m.set(r, cidx, m.get(r, cidx) + c.kernel.get(o, col));
                    }
                }
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> DenseMatrix {
        DenseMatrix::column_vector(v)
    }

    fn unit_affine(d: usize) -> Affine {
        Affine {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }

    #[test]
    fn relu_forward() {
        let y = LayerSpec::ReLU.forward(&col(&[-1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn center_norm_two_dims() {
        let l = LayerSpec::CenterNorm {
            affine: unit_affine(2),
        };
        let y = l.forward(&col(&[1.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[-2.0, 2.0]);
        assert_eq!(l.lip_bound(), ExtendedReal::Finite(2.0));
    }

    #[test]
    fn avg_pool_is_mean() {
        let pool = LayerSpec::AvgPool { dim: 4 };
        let y = pool.forward(&col(&[2.0, 4.0, 6.0, 8.0])).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(pool.lip_bound(), ExtendedReal::Finite(0.5));
    }

    #[test]
    fn linear_jacobian_is_transpose() {
        let w = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let l = LayerSpec::linear(w.clone(), vec![0.5, -0.5]).unwrap();
        let j = l.jacobian(&col(&[0.1, 0.2, 0.3])).unwrap();
        assert_eq!(j.matrix, w.transpose());
    }

    #[test]
    fn softmax_jacobian_at_origin() {
        let j = LayerSpec::Softmax
            .jacobian(&col(&[0.0, 0.0]))
            .unwrap()
            .matrix;
        assert_eq!(j, DenseMatrix::from_rows(&[[0.25, -0.25], [-0.25, 0.25]]));
    }

    #[test]
    fn sigmoid_slope_at_origin() {
        let j = LayerSpec::Sigmoid.jacobian(&col(&[0.0])).unwrap().matrix;
        assert_eq!(j.get(0, 0), 0.25);
    }

    #[test]
    fn relu_kink_is_flagged() {
        let j = LayerSpec::ReLU.jacobian(&col(&[0.0, 1.0])).unwrap();
        assert!(j.non_smooth);
        assert_eq!(j.matrix.get(0, 0), 0.0);
    }

    #[test]
    fn paper_bound_values() {
        let ln = LayerSpec::LayerNorm {
            affine: unit_affine(4),
            eps: 1e-4,
        };
        assert!((ln.lip_bound().to_f64() - 100.0).abs() < 1e-9);
        let wn = LayerSpec::WeightNorm {
            v: DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]),
            gamma: vec![3.0, 4.0],
            eps: DEFAULT_EPS,
        };
        assert_eq!(wn.lip_bound(), ExtendedReal::Finite(5.0));
        let zero = LayerSpec::linear(DenseMatrix::zeros(2, 2), vec![0.0; 2]).unwrap();
        let res = LayerSpec::Residual {
            inner: Box::new(zero),
        };
        assert_eq!(res.lip_bound(), ExtendedReal::Finite(1.0));
    }

    #[test]
    fn weighted_residual_clamp() {
        let inner = LayerSpec::ReLU;
        assert!(LayerSpec::weighted_residual(inner.clone(), vec![2.5], DEFAULT_OMEGA).is_err());
        assert!(LayerSpec::weighted_residual(inner, vec![-2.0], DEFAULT_OMEGA).is_ok());
    }

    #[test]
    fn nonpositive_eps_rejected() {
        let ln = LayerSpec::LayerNorm {
            affine: unit_affine(3),
            eps: 0.0,
        };
        assert!(layer_forward(&ln, &col(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let x = DenseMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let v = flatten(&x);
        assert_eq!(v, vec![0.0, 2.0, 4.0, 1.0, 3.0, 5.0]);
        assert_eq!(unflatten(&v, 3, 2).unwrap(), x);
    }

    #[test]
    fn conv_equals_dense_jacobian_product() {
        let c = Conv2d {
            kernel: DenseMatrix::from_fn(2, 2 * 2 * 3, |i, j| ((i * 5 + j * 3) % 7) as f64 - 3.0),
            bias: vec![0.0, 0.0],
            in_channels: 3,
            kernel_size: 2,
            stride: 1,
            padding: 1,
            height: 3,
            width: 2,
        };
        let l = LayerSpec::Conv2D(c);
        let x = DenseMatrix::from_fn(3, 6, |i, j| ((i * 11 + j * 7) % 5) as f64 * 0.3 - 0.6);
        let y = l.forward(&x).unwrap();
        let j = l.jacobian(&x).unwrap().matrix;
        // Linear map without bias: vec(y) = Jᵀ vec(x).
        let jx = j
            .transpose()
            .matmul(&DenseMatrix::column_vector(&flatten(&x)))
            .unwrap();
        let fy = flatten(&y);
        for (a, b) in jx.data().iter().zip(&fy) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(l.caveats(), vec![Caveat::ConvOverlap]);
    }
}
