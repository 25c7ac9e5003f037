//! Patch extraction for strided 2-D convolutions.
//!
//! Both the forward convolution and its transpose are expressed as a matrix
//! product against a column buffer of shape `(C*k*k) x (N*OH*OW)`, where row
//! `(c*k + ki)*k + kj` holds pixel `(c, oh*s + ki - p, ow*s + kj - p)` of each
//! image for each output position `(n, oh, ow)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Geometry of a convolution applied to an `N x C x H x W` image.
    pub fn new(image: &[usize], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let &[batch, channels, height, width] = image else {
            return Err(Error::shape("conv", &[image]));
        };
        if height + 2 * pad < kernel || width + 2 * pad < kernel || stride == 0 {
            return Err(Error::invalid("conv", format!("kernel {kernel} does not fit image {image:?}")));
        }
        Ok(Self { batch, channels, height, width, kernel, stride, pad })
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols_len(&self) -> usize {
        self.patch_len() * self.batch * self.positions()
    }

    /// Calls `f(col_index, image_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let ncols = self.batch * oh * ow;
        let k = self.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for n in 0..self.batch {
                        let img_base = (n * self.channels + c) * self.height * self.width;
                        let col_base = row * ncols + n * oh * ow;
                        for y in 0..oh {
                            let iy = (y * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let img_row = img_base + iy as usize * self.width;
                            let col_row = col_base + y * ow;
                            for x in 0..ow {
                                let ix = (x * self.stride + kj) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                f(col_row + x, img_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn im2col<T: Scalar>(&self, image: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.cols_len()];
        self.for_each_tap(|ci, ii| cols[ci] = image[ii]);
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back, summing overlaps.
    pub fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let mut image = vec![T::zero(); self.batch * self.channels * self.height * self.width];
        self.for_each_tap(|ci, ii| image[ii] += cols[ci]);
        image
    }
}

/// `(N, C, P)` -> `(C, N*P)`.
pub fn batch_to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * p..(b * c + ch + 1) * p];
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `(C, N*P)` -> `(N, C, P)`.
pub fn channel_to_batch_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for b in 0..n {
            let src = &x[ch * n * p + b * p..ch * n * p + (b + 1) * p];
            out[(b * c + ch) * p..(b * c + ch + 1) * p].copy_from_slice(src);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spatial_extents_halve() {
        for (h, want) in [(28, 14), (14, 7), (64, 32), (32, 16)] {
            let g = ConvGeom::new(&[1, 1, h, h], 4, 2, 1).unwrap();
            assert_eq!(g.out_height(), want);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(&[2, 3, 6, 5], 4, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 6 * 5).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let c: Vec<f64> = (0..g.cols_len()).map(|i| ((i * 5 % 11) as f64) - 5.0).collect();
        let lhs: f64 = g.im2col(&x).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(g.col2im(&c)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn layout_permutations_invert() {
        let x: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64).collect();
        let y = batch_to_channel_major(&x, 2, 3, 4);
        assert_eq!(channel_to_batch_major(&y, 2, 3, 4), x);
        assert_eq!(&y[..4], &x[..4]);
        assert_eq!(&y[4..8], &x[12..16]);
    }
}
