//! Weight initializers and singular-value spectra.

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::rng::{self, StreamRng};

const INIT_STREAM: u16 = 0x1a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitMethod {
    XavierUniform,
    XavierNormal,
    Kaiming,
    Orthogonal,
    Spectral,
    DepthAware,
}

impl InitMethod {
    pub const ALL: [InitMethod; 6] = [
        InitMethod::XavierUniform,
        InitMethod::XavierNormal,
        InitMethod::Kaiming,
        InitMethod::Orthogonal,
        InitMethod::Spectral,
        InitMethod::DepthAware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitMethod::XavierUniform => "xavier_uniform",
            InitMethod::XavierNormal => "xavier_normal",
            InitMethod::Kaiming => "kaiming",
            InitMethod::Orthogonal => "orthogonal",
            InitMethod::Spectral => "spectral",
            InitMethod::DepthAware => "depth_aware",
        }
    }
}

impl FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InitMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown init method '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DepthRule {
    /// Scale by `1/√L`.
    InvSqrt,
    /// Scale by `1/L`.
    Inv,
}

impl DepthRule {
    pub fn name(self) -> &'static str {
        match self {
            DepthRule::InvSqrt => "inv_sqrt",
            DepthRule::Inv => "inv",
        }
    }
}

impl FromStr for DepthRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inv_sqrt" => Ok(DepthRule::InvSqrt),
            "inv" => Ok(DepthRule::Inv),
            _ => Err(Error::InvalidParam(format!(
                "unknown depth rule '{s}' (inv_sqrt|inv)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub method: InitMethod,
    pub gain: f64,
    /// Negative slope of the following nonlinearity (Kaiming).
    pub kaiming_a: f64,
    pub depth_rule: DepthRule,
    /// Network depth (depth-aware scaling).
    pub depth: usize,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            method: InitMethod::XavierNormal,
            gain: 1.0,
            kaiming_a: 0.0,
            depth_rule: DepthRule::InvSqrt,
            depth: 1,
        }
    }
}

impl InitSpec {
    pub fn new(method: InitMethod, gain: f64) -> Self {
        InitSpec {
            method,
            gain,
            ..InitSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "gain must be > 0, got {}",
                self.gain
            )));
        }
        if self.method == InitMethod::DepthAware && self.depth == 0 {
            return Err(Error::InvalidParam(
                "depth-aware init needs depth >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `n_out × n_in` weight matrix drawn from the seed's init substream.
pub fn init_matrix(spec: &InitSpec, n_in: usize, n_out: usize, seed: u64) -> Result<DenseMatrix> {
    let mut r = rng::stream(seed, rng::stream_id(INIT_STREAM, 0, 0));
    init_matrix_from(spec, n_in, n_out, &mut r)
}

/// Draws with the caller's generator, so that several matrices can be taken
/// from distinct substreams.
pub fn init_matrix_from(
    spec: &InitSpec,
    n_in: usize,
    n_out: usize,
    r: &mut StreamRng,
) -> Result<DenseMatrix> {
    init_with_fans(spec, n_in, n_out, n_in, n_out, r)
}

/// Like [`init_matrix_from`] with explicit fans, e.g. `C·K·K` for a
/// convolution kernel reshaped to `C_out × (K·K·C_in)`.
pub fn init_with_fans(
    spec: &InitSpec,
    n_in: usize,
    n_out: usize,
    fan_in: usize,
    fan_out: usize,
    r: &mut StreamRng,
) -> Result<DenseMatrix> {
    spec.validate()?;
    if n_in == 0 || n_out == 0 {
        return Err(Error::InvalidParam("init dims must be >= 1".into()));
    }
    let fan_sum = (fan_in + fan_out) as f64;
    let xavier_normal = |r: &mut StreamRng| gaussian(r, n_out, n_in, (2.0 / fan_sum).sqrt());
    let w = match spec.method {
        InitMethod::XavierUniform => {
            let a = (6.0 / fan_sum).sqrt();
            DenseMatrix::from_fn(n_out, n_in, |_, _| r.random_range(-a..a))
        }
        InitMethod::XavierNormal => xavier_normal(r),
        InitMethod::Kaiming => {
            let std = (2.0 / ((1.0 + spec.kaiming_a * spec.kaiming_a) * fan_in as f64)).sqrt();
            gaussian(r, n_out, n_in, std)
        }
        InitMethod::Orthogonal => {
            let g = gaussian(r, n_out, n_in, 1.0);
            if n_out >= n_in {
                linalg::qr_orthonormalize(&g)?
            } else {
                linalg::qr_orthonormalize(&g.transpose())?.transpose()
            }
        }
        InitMethod::Spectral => {
            let w = xavier_normal(r);
            let s = top_singular_value(&w);
            w.scale(1.0 / s)
        }
        InitMethod::DepthAware => {
            let l = spec.depth as f64;
            let f = match spec.depth_rule {
                DepthRule::InvSqrt => 1.0 / l.sqrt(),
                DepthRule::Inv => 1.0 / l,
            };
            xavier_normal(r).scale(f)
        }
    };
    Ok(w.scale(spec.gain))
}

fn gaussian(r: &mut StreamRng, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    DenseMatrix::from_fn(rows, cols, |_, _| dist.sample(r))
}

/// σ_max accurate to round-off: Jacobi for moderate sizes, tightly converged
/// power iteration beyond.
pub(crate) fn top_singular_value(w: &DenseMatrix) -> f64 {
    if w.rows().min(w.cols()) <= 256 {
        return linalg::full_singular_values(w)[0];
    }
    match linalg::spectral_norm(w, 1e-15, 200_000, 0) {
        Ok(s) => s,
        Err(Error::Convergence { last, .. }) => last,
        Err(_) => linalg::full_singular_values(w)[0],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub singular_values: Vec<f64>,
    pub bins: Vec<HistogramBin>,
}

impl SpectrumReport {
    /// Fraction of singular values strictly below `t`.
    pub fn fraction_below(&self, t: f64) -> f64 {
        let n = self.singular_values.len().max(1) as f64;
        self.singular_values.iter().filter(|&&s| s < t).count() as f64 / n
    }
}

/// Singular-value histogram over `[0, σ_max]` with `bins` equal bins; the
/// last bin is closed on the right.
pub fn spectrum_report(w: &DenseMatrix, bins: usize) -> Result<SpectrumReport> {
    if bins == 0 {
        return Err(Error::InvalidParam("bins must be >= 1".into()));
    }
    if w.is_empty() {
        return Err(Error::shape("spectrum_report", "empty matrix"));
    }
    let sv = linalg::full_singular_values(w).into_data();
    let sigma_max = sv[0];
    let sigma_min = *sv.last().expect("nonempty");
    let width = if sigma_max > 0.0 {
        sigma_max / bins as f64
    } else {
        1.0 / bins as f64
    };
    let mut counts = vec![0usize; bins];
    for &s in &sv {
        let k = ((s / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let hist = counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            bin_left: k as f64 * width,
            bin_right: (k + 1) as f64 * width,
            count,
        })
        .collect();
    Ok(SpectrumReport {
        sigma_max,
        sigma_min,
        singular_values: sv,
        bins: hist,
    })
}
