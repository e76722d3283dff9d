use super::matrix::{DenseMatrix, Vector};

const MAX_SWEEPS: usize = 80;
const BLOCK: usize = 16;

/// All singular values of `a`, in descending order, by one-sided Jacobi.
///
/// The shorter side is orthogonalized: vectors are stored contiguously and
/// rotated pairwise until every pair is orthogonal to working precision.
/// An empty input yields an empty vector.
pub fn full_singular_values(a: &DenseMatrix) -> Vector {
    let (m, n) = a.shape();
    if a.is_empty() {
        return Vector::zeros(0);
    }
    // Vectors to orthogonalize: columns of a when tall, rows when wide.
    let (count, len, mut u) = if m >= n {
        (n, m, a.transpose().into_data())
    } else {
        (m, n, a.data().to_vec())
    };
    let tol = f64::EPSILON * len as f64;
    let mut norms = vec![0.0; count];

    for _ in 0..MAX_SWEEPS {
        for (k, nk) in norms.iter_mut().enumerate() {
            let v = &u[k * len..(k + 1) * len];
            *nk = dot(v, v);
        }
        // Visiting vectors in order of decreasing norm cuts the sweep count.
        let mut order: Vec<usize> = (0..count).collect();
        order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
        if order.iter().enumerate().any(|(k, &o)| k != o) {
            let mut sorted = Vec::with_capacity(u.len());
            for &o in &order {
                sorted.extend_from_slice(&u[o * len..(o + 1) * len]);
            }
            u = sorted;
            norms = order.iter().map(|&o| norms[o]).collect();
        }
        let mut rotated = false;
        // Block-cyclic pair order keeps the working set of each block pair in
        // cache; every pair is still visited exactly once per sweep.
        let blocks = count.div_ceil(BLOCK);
        for bi in 0..blocks {
            for bj in bi..blocks {
                let (pi0, pi1) = (bi * BLOCK, ((bi + 1) * BLOCK).min(count));
                let (qj0, qj1) = (bj * BLOCK, ((bj + 1) * BLOCK).min(count));
                for p in pi0..pi1 {
                    for q in qj0.max(p + 1)..qj1 {
                        rotated |= rotate_pair(&mut u, &mut norms, len, p, q, tol);
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = (0..count)
        .map(|k| {
            let v = &u[k * len..(k + 1) * len];
            dot(v, v).sqrt()
        })
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Vector::new(sv)
}

/// Orthogonalizes vectors `p < q`; returns whether a rotation was applied.
#[inline]
fn rotate_pair(u: &mut [f64], norms: &mut [f64], len: usize, p: usize, q: usize, tol: f64) -> bool {
    let (app, aqq) = (norms[p], norms[q]);
    if app == 0.0 || aqq == 0.0 {
        return false;
    }
    let (head, tail) = u.split_at_mut(q * len);
    let up = &mut head[p * len..(p + 1) * len];
    let uq = &mut tail[..len];
    let apq = dot(up, uq);
    if apq.abs() <= tol * (app * aqq).sqrt() {
        return false;
    }
    let zeta = (aqq - app) / (2.0 * apq);
    let t = if zeta == 0.0 {
        1.0
    } else {
        zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = c * t;
    rotate(up, uq, c, s);
    norms[p] = app - t * apq;
    norms[q] = aqq + t * apq;
    true
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Wide accumulator so the FMA chains overlap.
    let mut acc = [0.0f64; 32];
    let ca = a.chunks_exact(32);
    let cb = b.chunks_exact(32);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..32 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s: f64 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn rotate(up: &mut [f64], uq: &mut [f64], c: f64, s: f64) {
    for (x, y) in up.iter_mut().zip(uq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}
