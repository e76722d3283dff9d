//! Dot-product, L2-distance and scaled-cosine-similarity self-attention.
//!
//! Tokens are the columns of a `D × N` input. Each projection is stored as a
//! full `D × D` matrix whose row blocks of height `D/H` are the per-head
//! projections. For head `h` with `q_i, k_j, v_i` the projected tokens, the
//! score matrix `S` is `N × N`, `P` is its column-wise softmax (every column
//! sums to one) and the head output is `V·P`. Head outputs are stacked along
//! the feature axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Caveat;
use crate::linalg::{self, DenseMatrix, ExtendedReal};

pub const DEFAULT_SCSA_NU: f64 = 1.0;
pub const DEFAULT_SCSA_TAU: f64 = 5.0;
pub const DEFAULT_SCSA_EPS: f64 = 1e-5;

const PHI_LO: f64 = 1e-12;
const PHI_HI: f64 = 50.0;
const PHI_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionKind {
    DPA,
    L2A,
    SCSA,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub kind: AttentionKind,
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    pub heads: usize,
    pub dim: usize,
    pub nu: f64,
    pub tau: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub output: DenseMatrix,
    /// A score or output entry was not finite.
    pub overflow: bool,
}

impl AttentionParams {
    /// Parameters with the default SCSA constants.
    pub fn new(
        kind: AttentionKind,
        w_q: DenseMatrix,
        w_k: DenseMatrix,
        w_v: DenseMatrix,
        heads: usize,
    ) -> Result<Self> {
        let p = AttentionParams {
            kind,
            dim: w_q.cols(),
            w_q,
            w_k,
            w_v,
            heads,
            nu: DEFAULT_SCSA_NU,
            tau: DEFAULT_SCSA_TAU,
            eps: DEFAULT_SCSA_EPS,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if self.heads == 0 || d == 0 || d % self.heads != 0 {
            return Err(Error::InvalidParam(format!(
                "model dim {d} must be a positive multiple of heads {}",
                self.heads
            )));
        }
        for (name, w) in [("W_Q", &self.w_q), ("W_K", &self.w_k), ("W_V", &self.w_v)] {
            if w.shape() != (d, d) {
                return Err(Error::InvalidParam(format!(
                    "{name} must be {d}x{d} (stacked heads), got {:?}",
                    w.shape()
                )));
            }
        }
        if self.kind == AttentionKind::SCSA && !(self.nu > 0.0 && self.tau > 0.0 && self.eps > 0.0)
        {
            return Err(Error::InvalidParam("SCSA needs nu, tau, eps > 0".into()));
        }
        Ok(())
    }

    /// Per-head projection `(D/H) × D`.
    pub fn head_weight(&self, which: Projection, h: usize) -> DenseMatrix {
        let dh = self.head_dim();
        let w = match which {
            Projection::Query => &self.w_q,
            Projection::Key => &self.w_k,
            Projection::Value => &self.w_v,
        };
        w.row_block(h * dh, (h + 1) * dh)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

pub fn attn_forward(params: &AttentionParams, x: &DenseMatrix) -> Result<AttentionOutput> {
    params.validate()?;
    if x.rows() != params.dim || x.cols() == 0 {
        return Err(Error::shape(
            "attn_forward",
            format!("expected {} x N input, got {:?}", params.dim, x.shape()),
        ));
    }
    Ok(forward_unchecked(params, x))
}

/// Column-wise softmax, in place.
pub(crate) fn softmax_columns(s: &mut DenseMatrix) {
    let (n, m) = s.shape();
    let mut max = vec![f64::NEG_INFINITY; m];
    for i in 0..n {
        for (mx, v) in max.iter_mut().zip(s.row(i)) {
            *mx = mx.max(*v);
        }
    }
    let mut sum = vec![0.0; m];
    for i in 0..n {
        for ((v, mx), sm) in s.row_mut(i).iter_mut().zip(&max).zip(sum.iter_mut()) {
            *v = (*v - mx).exp();
            *sm += *v;
        }
    }
    for i in 0..n {
        for (v, sm) in s.row_mut(i).iter_mut().zip(&sum) {
            *v /= sm;
        }
    }
}

/// Normalizes each column to `c / √(‖c‖² + ε)`.
fn normalize_columns(m: &mut DenseMatrix, eps: f64) {
    let cols = m.cols();
    let mut ss = vec![eps; cols];
    for i in 0..m.rows() {
        for (s, v) in ss.iter_mut().zip(m.row(i)) {
            *s += v * v;
        }
    }
    let inv: Vec<f64> = ss.iter().map(|s| 1.0 / s.sqrt()).collect();
    for i in 0..m.rows() {
        for (v, f) in m.row_mut(i).iter_mut().zip(&inv) {
            *v *= f;
        }
    }
}

/// Score matrix `S` (`N × N`, entry `(i, j)` pairs query token `i` with key
/// token `j`) for one head, before softmax.
pub(crate) fn head_scores(
    kind: AttentionKind,
    q: &DenseMatrix,
    k: &DenseMatrix,
    tau: f64,
) -> DenseMatrix {
    let dh = q.rows() as f64;
    let qk = linalg::product(q.view().t(), k.view()).expect("head shapes");
    match kind {
        AttentionKind::DPA => qk.scale(1.0 / dh.sqrt()),
        AttentionKind::SCSA => qk.scale(tau),
        AttentionKind::L2A => {
            // −‖q_i − k_j‖² / √dh = −(‖q_i‖² − 2 q_i·k_j + ‖k_j‖²) / √dh
            let n = q.cols();
            let qn = column_sq_norms(q);
            let kn = column_sq_norms(k);
            let scale = 1.0 / dh.sqrt();
            DenseMatrix::from_fn(n, k.cols(), |i, j| {
                -(qn[i] - 2.0 * qk.get(i, j) + kn[j]).max(0.0) * scale
            })
        }
    }
}

fn column_sq_norms(m: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v * v;
        }
    }
    out
}

fn forward_unchecked(params: &AttentionParams, x: &DenseMatrix) -> AttentionOutput {
    let dh = params.head_dim();
    let q_all = params.w_q.matmul(x).expect("checked shape");
    let k_all = params.w_k.matmul(x).expect("checked shape");
    let v_all = params.w_v.matmul(x).expect("checked shape");
    let mut blocks = Vec::with_capacity(params.heads);
    let mut overflow = false;
    for h in 0..params.heads {
        let mut q = q_all.row_block(h * dh, (h + 1) * dh);
        let mut k = k_all.row_block(h * dh, (h + 1) * dh);
        let mut v = v_all.row_block(h * dh, (h + 1) * dh);
        if params.kind == AttentionKind::SCSA {
            normalize_columns(&mut q, params.eps);
            normalize_columns(&mut k, params.eps);
            normalize_columns(&mut v, params.eps);
        }
        let mut p = head_scores(params.kind, &q, &k, params.tau);
        if !p.is_finite() {
            overflow = true;
        }
        softmax_columns(&mut p);
        let mut y = v.matmul(&p).expect("head shapes");
        if params.kind == AttentionKind::SCSA {
            y.scale_in_place(params.nu);
        }
        blocks.push(y);
    }
    let output = DenseMatrix::vstack(&blocks).expect("equal head widths");
    overflow |= !output.is_finite();
    AttentionOutput { output, overflow }
}

pub(crate) fn apply(params: &AttentionParams, x: &DenseMatrix) -> DenseMatrix {
    forward_unchecked(params, x).output
}

/// Inverse of `φ(x) = x·e^(x+1)` on `[1e-12, 50]` by bisection; `φ⁻¹(0) = 0`.
pub fn phi_inverse(y: f64) -> Result<f64> {
    if y == 0.0 {
        return Ok(0.0);
    }
    let phi = |x: f64| x * (x + 1.0).exp();
    let (mut lo, mut hi) = (PHI_LO, PHI_HI);
    if !(y > 0.0) || phi(lo) > y || phi(hi) < y {
        return Err(Error::Convergence {
            op: "phi_inverse",
            iterations: 0,
            last: f64::NAN,
        });
    }
    let mut iterations = 0;
    while hi - lo > PHI_TOL {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
        if iterations > 200 {
            return Err(Error::Convergence {
                op: "phi_inverse",
                iterations,
                last: mid,
            });
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Analytic L2 Lipschitz bound for `n` tokens.
///
/// Per-head bounds are combined as `√H · max_h`, the bound of a
/// concatenation of `H` maps; see [`attn_bound_caveats`].
pub fn attn_lip_bound(params: &AttentionParams, n: usize) -> Result<ExtendedReal> {
    params.validate()?;
    if n == 0 {
        return Err(Error::InvalidParam("token count must be >= 1".into()));
    }
    let nn = n as f64;
    let dh = params.head_dim() as f64;
    let sn = |w: &DenseMatrix| linalg::spectral_norm_default(w);
    let mut worst = 0.0f64;
    match params.kind {
        AttentionKind::DPA => return Ok(ExtendedReal::Infinite),
        AttentionKind::L2A => {
            if params.w_q != params.w_k {
                return Ok(ExtendedReal::Infinite);
            }
            let c = nn.sqrt() / dh.sqrt() * (4.0 * phi_inverse(nn - 1.0)? + 1.0);
            for h in 0..params.heads {
                let wq = sn(&params.head_weight(Projection::Query, h));
                let wv = sn(&params.head_weight(Projection::Value, h));
                worst = worst.max(c * wq * wv);
            }
        }
        AttentionKind::SCSA => {
            let (nu, tau) = (params.nu, params.tau);
            let inv = 1.0 / params.eps.sqrt();
            for h in 0..params.heads {
                let wq = sn(&params.head_weight(Projection::Query, h));
                let wk = sn(&params.head_weight(Projection::Key, h));
                let wv = sn(&params.head_weight(Projection::Value, h));
                let b = 2.0 * nn * (nn - 1.0) * nu * tau * inv * wk
                    + 2.0 * (nn - 1.0) * nu * tau * inv * wq
                    + 2.0 * nn * nu * inv * wv;
                worst = worst.max(b);
            }
        }
    }
    Ok(ExtendedReal::from_f64((params.heads as f64).sqrt() * worst))
}

pub fn attn_bound_caveats(params: &AttentionParams) -> Vec<Caveat> {
    let mut c = Vec::new();
    if params.kind == AttentionKind::DPA {
        c.push(Caveat::DotProductAttention);
    }
    if params.heads > 1 && params.kind != AttentionKind::DPA {
        c.push(Caveat::MultiheadHeuristic);
    }
    c
}

/// Central-difference directional derivative `(f(X+hZ) − f(X−hZ)) / 2h`.
pub fn attn_jvp_numeric(
    params: &AttentionParams,
    x: &DenseMatrix,
    direction: &DenseMatrix,
    step: f64,
) -> Result<DenseMatrix> {
    if !(step > 0.0) {
        return Err(Error::InvalidParam(format!("step must be > 0, got {step}")));
    }
    if direction.shape() != x.shape() {
        return Err(Error::shape(
            "attn_jvp_numeric",
            "direction shape differs from X",
        ));
    }
    let mut plus = x.clone();
    plus.axpy(step, direction)?;
    let mut minus = x.clone();
    minus.axpy(-step, direction)?;
    let yp = attn_forward(params, &plus)?.output;
    let ym = attn_forward(params, &minus)?.output;
    let mut d = yp.sub(&ym)?;
    d.scale_in_place(0.5 / step);
    Ok(d)
}

/// Score-probability matrices `P` of every head, for inspection.
pub fn attn_probabilities(params: &AttentionParams, x: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
    params.validate()?;
    if x.rows() != params.dim {
        return Err(Error::shape(
            "attn_probabilities",
            "input rows differ from model dim",
        ));
    }
    let dh = params.head_dim();
    let mut out = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let mut q = params.w_q.row_block(h * dh, (h + 1) * dh).matmul(x)?;
        let mut k = params.w_k.row_block(h * dh, (h + 1) * dh).matmul(x)?;
        if params.kind == AttentionKind::SCSA {
            normalize_columns(&mut q, params.eps);
            normalize_columns(&mut k, params.eps);
        }
        let mut p = head_scores(params.kind, &q, &k, params.tau);
        softmax_columns(&mut p);
        out.push(p);
    }
    Ok(out)
}
