use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::matrix::DenseMatrix;

/// Image stored height-major, then width, then channel (HWC).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "Image::new",
                format!(
                    "{height}x{width}x{channels} needs {} values, got {}",
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[(h * self.width + w) * self.channels + c]
    }

    /// Positions × channels view: row `h*width + w` holds the channel vector.
    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix::new(self.height * self.width, self.channels, self.data.clone())
            .expect("image length checked at construction")
    }

    pub fn from_matrix(height: usize, width: usize, m: &DenseMatrix) -> Result<Self> {
        if m.rows() != height * width {
            return Err(Error::shape(
                "Image::from_matrix",
                format!("{} rows for a {height}x{width} image", m.rows()),
            ));
        }
        Image::new(height, width, m.cols(), m.data().to_vec())
    }
}

/// Number of output positions along one axis.
pub fn conv_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::InvalidParam("kernel and stride must be >= 1".into()));
    }
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::shape(
            "im2col",
            format!("kernel {kernel} exceeds padded extent {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Unfolds every `kernel × kernel × C` patch of `x` into one row.
///
/// Rows follow output positions in raster order; within a row entries are
/// ordered (kernel row, kernel column, channel). Padding is zero.
pub fn im2col(x: &Image, kernel: usize, stride: usize, padding: usize) -> Result<DenseMatrix> {
    let oh = conv_output_len(x.height, kernel, stride, padding)?;
    let ow = conv_output_len(x.width, kernel, stride, padding)?;
    let c = x.channels;
    let row_len = kernel * kernel * c;
    let mut out = DenseMatrix::zeros(oh * ow, row_len);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = out.row_mut(oy * ow + ox);
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= x.height as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= x.width as isize {
                        continue;
                    }
                    let src = ((iy as usize) * x.width + ix as usize) * c;
                    let dst = (ky * kernel + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the image, summing
/// overlapping contributions.
pub fn col2im(
    cols: &DenseMatrix,
    height: usize,
    width: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Image> {
    let oh = conv_output_len(height, kernel, stride, padding)?;
    let ow = conv_output_len(width, kernel, stride, padding)?;
    if cols.shape() != (oh * ow, kernel * kernel * channels) {
        return Err(Error::shape(
            "col2im",
            format!("patch matrix {:?} does not match geometry", cols.shape()),
        ));
    }
    let mut data = vec![0.0; height * width * channels];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = cols.row(oy * ow + ox);
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= height as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= width as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * width + ix as usize) * channels;
                    let src = (ky * kernel + kx) * channels;
                    for ch in 0..channels {
                        data[dst + ch] += row[src + ch];
                    }
                }
            }
        }
    }
    Image::new(height, width, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster(h: usize, w: usize) -> Image {
        Image::new(h, w, 1, (0..h * w).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn single_patch_is_raster() {
        let m = im2col(&raster(2, 2), 2, 1, 0).unwrap();
        assert_eq!(m.shape(), (1, 4));
        assert_eq!(m.row(0), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn three_by_three_patch_indexing() {
        let img = raster(3, 3);
        let m = im2col(&img, 2, 1, 0).unwrap();
        assert_eq!(m.rows(), 4);
        assert_eq!(m.get(0, 3), img.get(1, 1, 0));
    }

    #[test]
    fn padding_adds_zero_border() {
        let m = im2col(&raster(2, 2), 3, 1, 1).unwrap();
        assert_eq!(m.shape(), (4, 9));
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(0, 4), 0.0);
        assert_eq!(m.get(3, 4), 3.0);
    }

    #[test]
    fn oversized_kernel_rejected() {
        assert!(im2col(&raster(2, 2), 3, 1, 0).is_err());
    }

    #[test]
    fn col2im_is_adjoint() {
        let img = Image::new(4, 3, 2, (0..24).map(|v| (v as f64).sin()).collect()).unwrap();
        let cols = im2col(&img, 3, 1, 1).unwrap();
        let probe = cols.map(|v| v * 0.5 + 1.0);
        let lhs: f64 = cols
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum();
        let back = col2im(&probe, 4, 3, 2, 3, 1, 1).unwrap();
        let rhs: f64 = img.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
