//! Dense linear algebra: matrices, norms, spectra, QR and im2col.

mod im2col;
mod matrix;
mod norm;
mod qr;
mod spectral;
mod svd;

pub use im2col::{col2im, conv_output_len, im2col, Image};
pub use matrix::{gemm, matmul, product, DenseMatrix, MatRef, Vector};
pub use norm::{deserialize_real, serialize_real, vector_norm, ExtendedReal, NormKind};
pub use qr::qr_orthonormalize;
pub use spectral::{spectral_norm, spectral_norm_default, DEFAULT_MAX_ITER, DEFAULT_TOL};
pub use svd::full_singular_values;
