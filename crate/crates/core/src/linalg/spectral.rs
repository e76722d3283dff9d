use crate::error::{Error, Result};
use crate::rng;

use super::matrix::DenseMatrix;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 1000;

const SPECTRAL_STREAM: u16 = 0x5e;

/// Largest singular value of `a` by power iteration on `aᵀa`.
///
/// Stops once the relative change of the estimate drops below `tol`. On
/// failure the error carries the last iterate.
pub fn spectral_norm(a: &DenseMatrix, tol: f64, max_iter: usize, seed: u64) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::shape("spectral_norm", "empty matrix"));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParam(format!("tol must be > 0, got {tol}")));
    }
    let (m, n) = a.shape();
    let data = a.data();
    let mut r = rng::stream(seed, rng::stream_id(SPECTRAL_STREAM, 0, 0));
    let mut v = rng::gaussian_vec(&mut r, n);
    normalize(&mut v);
    let mut av = vec![0.0; m];
    let mut w = vec![0.0; n];
    let mut sigma = 0.0;
    for iter in 0..max_iter {
        for i in 0..m {
            av[i] = dot(&data[i * n..(i + 1) * n], &v);
        }
        let next = norm2(&av);
        // aᵀ(av)
        w.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..m {
            let s = av[i];
            if s != 0.0 {
                for (wj, aij) in w.iter_mut().zip(&data[i * n..(i + 1) * n]) {
                    *wj += s * aij;
                }
            }
        }
        let wn = norm2(&w);
        if wn == 0.0 {
            // v lies in the null space; a is zero along every direction we
            // can reach, which only happens for the zero matrix.
            return Ok(next);
        }
        for (vj, wj) in v.iter_mut().zip(&w) {
            *vj = wj / wn;
        }
        if iter > 0 && (next - sigma).abs() <= tol * next {
            return Ok(next.max(sigma));
        }
        sigma = next;
    }
    Err(Error::Convergence {
        op: "spectral_norm",
        iterations: max_iter,
        last: sigma,
    })
}

/// Spectral norm with the default tolerance, iteration cap and seed 0.
///
/// A non-converged run returns the last iterate; power-iteration estimates
/// approach σ_max from below, so callers needing a guaranteed value should
/// use [`spectral_norm`] directly.
pub fn spectral_norm_default(a: &DenseMatrix) -> f64 {
    match spectral_norm(a, DEFAULT_TOL, DEFAULT_MAX_ITER, 0) {
        Ok(s) => s,
        Err(Error::Convergence { last, .. }) => last,
        Err(_) => 0.0,
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
