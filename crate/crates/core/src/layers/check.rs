use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    flatten, unflatten, Affine, BnMode, Conv2d, LayerKind, LayerSpec, Linear, DEFAULT_EPS,
};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng;

const FD_STREAM: u16 = 0xfd;
const DROPPATH_STREAM: u16 = 0xd9;
const SAMPLE_STREAM: u16 = 0x5a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub probe_count: usize,
    /// The analytic Jacobian was evaluated at a non-differentiable point.
    pub non_smooth: bool,
}

/// Compares the analytic Jacobian with central differences along `probes`
/// random Gaussian directions.
///
/// The relative error of a probe is the max-abs difference of the two
/// directional derivatives divided by the larger of their max-abs values.
pub fn check_jacobian_fd(
    layer: &LayerSpec,
    x: &DenseMatrix,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<JacobianReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidParam(format!("step must be > 0, got {step}")));
    }
    layer.validate()?;
    let jac = layer.jacobian(x)?;
    let jt = jac.matrix.transpose();
    let (d, n) = x.shape();
    let xf = flatten(x);
    let mut max_abs_err = 0.0f64;
    let mut max_rel_err = 0.0f64;
    for p in 0..probes {
        let mut r = rng::stream(seed, rng::stream_id(FD_STREAM, p as u32, 0));
        let z = rng::gaussian_vec(&mut r, d * n);
        let plus: Vec<f64> = xf.iter().zip(&z).map(|(a, b)| a + step * b).collect();
        let minus: Vec<f64> = xf.iter().zip(&z).map(|(a, b)| a - step * b).collect();
        let yp = flatten(&layer.apply(&unflatten(&plus, d, n)?));
        let ym = flatten(&layer.apply(&unflatten(&minus, d, n)?));
        let analytic = jt.matmul(&DenseMatrix::column_vector(&z))?;
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for ((a, p), m) in analytic.data().iter().zip(&yp).zip(&ym) {
            let fd = (p - m) / (2.0 * step);
            diff = diff.max((a - fd).abs());
            scale = scale.max(a.abs()).max(fd.abs());
        }
        max_abs_err = max_abs_err.max(diff);
        if scale > 0.0 {
            max_rel_err = max_rel_err.max(diff / scale);
        }
    }
    Ok(JacobianReport {
        max_abs_err,
        max_rel_err,
        probe_count: probes,
        non_smooth: jac.non_smooth,
    })
}

/// Distance of `x` from the nearest ReLU kink inside `layer` (infinite for
/// layers without one).
pub fn kink_margin(layer: &LayerSpec, x: &DenseMatrix) -> f64 {
    match layer {
        LayerSpec::ReLU => x.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())),
        LayerSpec::FFN { w1, b1, .. } => match w1.matmul(x) {
            Ok(h) => {
                let mut m = f64::INFINITY;
                for i in 0..h.rows() {
                    for v in h.row(i) {
                        m = m.min((v + b1[i]).abs());
                    }
                }
                m
            }
            Err(_) => 0.0,
        },
        LayerSpec::Residual { inner } | LayerSpec::WeightedResidual { inner, .. } => {
            kink_margin(inner, x)
        }
        _ => f64::INFINITY,
    }
}

/// Output of one DropPath application.
#[derive(Clone, Debug, PartialEq)]
pub struct DropPathOutput {
    pub output: DenseMatrix,
    pub dropped: bool,
}

/// `x` with probability `p`, otherwise `x + ρ·f(x)`; the draw depends only on `seed`.
pub fn droppath_apply(
    inner: &LayerSpec,
    p: f64,
    rho: f64,
    seed: u64,
    x: &DenseMatrix,
) -> Result<DropPathOutput> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParam(format!(
            "drop probability must be in [0,1], got {p}"
        )));
    }
    if droppath_draw(p, seed, 0) {
        return Ok(DropPathOutput {
            output: x.clone(),
            dropped: true,
        });
    }
    let mut y = inner.forward(x)?;
    if y.shape() != x.shape() {
        return Err(Error::shape("droppath_apply", "branch must preserve shape"));
    }
    y.scale_in_place(rho);
    y.axpy(1.0, x)?;
    Ok(DropPathOutput {
        output: y,
        dropped: false,
    })
}

/// Bernoulli(p) draw for residual branch `block` under `seed`.
pub(crate) fn droppath_draw(p: f64, seed: u64, block: u32) -> bool {
    let mut r = rng::stream(seed, rng::stream_id(DROPPATH_STREAM, block, 0));
    r.random::<f64>() < p
}

/// Random layer of the given kind acting on `dim` features, for checks and
/// demonstrations. Batch normalization is drawn in inference mode; convolution
/// uses a 4×4 image with `max(1, dim/16)` channels and stride equal to its
/// 2×2 kernel.
pub fn sample_layer(kind: LayerKind, dim: usize, seed: u64) -> Result<LayerSpec> {
    if dim == 0 {
        return Err(Error::InvalidParam("dim must be >= 1".into()));
    }
    let mut r = rng::stream(seed, rng::stream_id(SAMPLE_STREAM, kind as u32, 0));
    let gauss = |r: &mut rng::StreamRng, rows: usize, cols: usize, s: f64| {
        DenseMatrix::from_fn(rows, cols, |_, _| {
            let v: f64 = StandardNormal.sample(r);
            v * s
        })
    };
    let small = |r: &mut rng::StreamRng, len: usize| -> Vec<f64> {
        (0..len)
            .map(|_| {
                let v: f64 = StandardNormal.sample(r);
                0.1 * v
            })
            .collect()
    };
    let gamma = |r: &mut rng::StreamRng, len: usize| -> Vec<f64> {
        (0..len).map(|_| r.random_range(0.5..1.5)).collect()
    };
    let sd = 1.0 / (dim as f64).sqrt();
    let layer = match kind {
        LayerKind::Linear => {
            let weight = gauss(&mut r, dim, dim, sd);
            LayerSpec::Linear(Linear {
                weight,
                bias: small(&mut r, dim),
            })
        }
        LayerKind::Conv2D => {
            let cin = (dim / 16).max(1);
            let cout = cin;
            let k = 2;
            LayerSpec::Conv2D(Conv2d {
                kernel: gauss(
                    &mut r,
                    cout,
                    k * k * cin,
                    1.0 / ((k * k * cin) as f64).sqrt(),
                ),
                bias: small(&mut r, cout),
                in_channels: cin,
                kernel_size: k,
                stride: k,
                padding: 0,
                height: 4,
                width: 4,
            })
        }
        LayerKind::Sigmoid => LayerSpec::Sigmoid,
        LayerKind::Softmax => LayerSpec::Softmax,
        LayerKind::ReLU => LayerSpec::ReLU,
        LayerKind::GELU => LayerSpec::GELU,
        LayerKind::Swish => LayerSpec::Swish,
        LayerKind::LayerNorm | LayerKind::RMSNorm | LayerKind::CenterNorm => {
            let affine = Affine {
                gamma: gamma(&mut r, dim),
                beta: small(&mut r, dim),
            };
            match kind {
                LayerKind::LayerNorm => LayerSpec::LayerNorm {
                    affine,
                    eps: DEFAULT_EPS,
                },
                LayerKind::RMSNorm => LayerSpec::RMSNorm {
                    affine,
                    eps: DEFAULT_EPS,
                },
                _ => LayerSpec::CenterNorm { affine },
            }
        }
        LayerKind::BatchNorm => {
            let affine = Affine {
                gamma: gamma(&mut r, dim),
                beta: small(&mut r, dim),
            };
            let mean = small(&mut r, dim);
            let var = (0..dim).map(|_| r.random_range(0.5..2.0)).collect();
            LayerSpec::BatchNorm {
                affine,
                eps: DEFAULT_EPS,
                mode: BnMode::Inference { mean, var },
            }
        }
        LayerKind::WeightNorm => LayerSpec::WeightNorm {
            v: gauss(&mut r, dim, dim, 1.0),
            gamma: gamma(&mut r, dim),
            eps: DEFAULT_EPS,
        },
        LayerKind::FFN => sample_ffn(&mut r, dim),
        LayerKind::Residual => LayerSpec::Residual {
            inner: Box::new(sample_ffn(&mut r, dim)),
        },
        LayerKind::WeightedResidual => {
            let inner = sample_ffn(&mut r, dim);
            let nu = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            LayerSpec::weighted_residual(inner, nu, super::DEFAULT_OMEGA)?
        }
        LayerKind::MaxPool => LayerSpec::MaxPool,
        LayerKind::AvgPool => LayerSpec::AvgPool { dim },
    };
    layer.validate()?;
    Ok(layer)
}

fn sample_ffn(r: &mut rng::StreamRng, dim: usize) -> LayerSpec {
    let hidden = 2 * dim;
    let mut g = |rows: usize, cols: usize, s: f64| {
        DenseMatrix::from_fn(rows, cols, |_, _| {
            let v: f64 = StandardNormal.sample(r);
            v * s
        })
    };
    let w1 = g(hidden, dim, 1.0 / (dim as f64).sqrt());
    let w2 = g(dim, hidden, 1.0 / (hidden as f64).sqrt());
    let b1 = g(hidden, 1, 0.1).into_data();
    let b2 = g(dim, 1, 0.1).into_data();
    LayerSpec::FFN { w1, b1, w2, b2 }
}

/// Input width expected by a sampled layer of `kind` built with `dim`.
pub fn sample_input_shape(layer: &LayerSpec, dim: usize, batch: usize) -> (usize, usize) {
    match layer {
        LayerSpec::Conv2D(c) => (c.in_channels, c.height * c.width),
        _ => (dim, batch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fd_is_exact() {
        let l = sample_layer(LayerKind::Linear, 6, 1).unwrap();
        let x = DenseMatrix::from_fn(6, 2, |i, j| (i + 3 * j) as f64 * 0.1);
        let r = check_jacobian_fd(&l, &x, 5, 1e-3, 0).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn droppath_extremes() {
        let l = LayerSpec::ReLU;
        let x = DenseMatrix::column_vector(&[-1.0, 2.0]);
        for seed in 0..20 {
            let d = droppath_apply(&l, 1.0, 1.0, seed, &x).unwrap();
            assert!(d.dropped);
            assert_eq!(d.output, x);
            let k = droppath_apply(&l, 0.0, 1.0, seed, &x).unwrap();
            assert!(!k.dropped);
            assert_eq!(k.output.data(), &[-1.0, 4.0]);
        }
        assert!(droppath_apply(&l, 1.5, 1.0, 0, &x).is_err());
    }

    #[test]
    fn every_kind_samples_valid() {
        for kind in LayerKind::ALL {
            let l = sample_layer(kind, 8, 3).unwrap();
            assert_eq!(l.kind(), kind);
            let (d, n) = sample_input_shape(&l, 8, 2);
            l.forward(&DenseMatrix::from_fn(d, n, |i, j| {
                (i + j) as f64 * 0.1 + 0.05
            }))
            .unwrap();
        }
    }
}
