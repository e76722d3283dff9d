use crate::error::{Error, Result};

use super::matrix::DenseMatrix;

const RANK_TOL: f64 = 1e-12;

/// Orthonormal basis for the column space of `a` (rows ≥ cols).
///
/// Householder QR; columns are sign-fixed so that `R` has a positive
/// diagonal, which makes the factorization unique and maps an already
/// orthonormal input to itself.
pub fn qr_orthonormalize(a: &DenseMatrix) -> Result<DenseMatrix> {
    let (m, n) = a.shape();
    if n == 0 || m < n {
        return Err(Error::shape(
            "qr_orthonormalize",
            format!("need rows >= cols >= 1, got {m}x{n}"),
        ));
    }
    let scale = a.frobenius_norm();
    // Column-major working copy: column j at r[j*m..(j+1)*m].
    let mut r = a.transpose().into_data();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut diag_sign = vec![1.0; n];

    for k in 0..n {
        let col = &r[k * m + k..(k + 1) * m];
        let alpha = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if alpha <= RANK_TOL * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Degenerate {
                op: "qr_orthonormalize",
                detail: format!("column {k} is linearly dependent on earlier columns"),
            });
        }
        let x0 = col[0];
        let beta = if x0 >= 0.0 { -alpha } else { alpha };
        let mut v = col.to_vec();
        v[0] -= beta;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        // R_kk = beta after reflection.
        diag_sign[k] = beta.signum();
        if vnorm2 > 0.0 {
            for j in k..n {
                let cj = &mut r[j * m + k..(j + 1) * m];
                let d: f64 = cj.iter().zip(&v).map(|(x, y)| x * y).sum();
                let f = 2.0 * d / vnorm2;
                for (x, y) in cj.iter_mut().zip(&v) {
                    *x -= f * y;
                }
            }
        }
        vs.push(v);
    }

    // Q = H_0 H_1 ... H_{n-1} applied to the first n unit vectors.
    let mut q = vec![0.0; n * m];
    for j in 0..n {
        let qj = &mut q[j * m..(j + 1) * m];
        qj[j] = 1.0;
        for k in (0..n).rev() {
            let v = &vs[k];
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            let seg = &mut qj[k..];
            let d: f64 = seg.iter().zip(v).map(|(x, y)| x * y).sum();
            let f = 2.0 * d / vnorm2;
            for (x, y) in seg.iter_mut().zip(v) {
                *x -= f * y;
            }
        }
        if diag_sign[j] < 0.0 {
            qj.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(DenseMatrix::from_fn(m, n, |i, j| q[j * m + i]))
}
