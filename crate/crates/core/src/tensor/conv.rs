//! NHWC convolution and pooling kernels used by the tape.

use crate::error::{Error, Result};

use super::Scalar;

/// Fully resolved geometry of an NHWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: (usize, usize),
    pub out_c: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

/// `floor((dim + 2·pad − k) / stride) + 1`, or an error when not positive.
pub(crate) fn out_extent(dim: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Dimension("stride must be positive".into()));
    }
    let padded = dim + 2 * pad;
    if k == 0 || k > padded {
        return Err(Error::Dimension(format!(
            "kernel extent {k} does not fit padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl Conv2dGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let [batch, in_h, in_w, in_c] = *input else {
            return Err(Error::Dimension(format!(
                "conv2d input must be N×H×W×C, got {input:?}"
            )));
        };
        let [kh, kw, kc, out_c] = *kernel else {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be kh×kw×Cin×Cout, got {kernel:?}"
            )));
        };
        if kc != in_c {
            return Err(Error::Dimension(format!(
                "kernel expects {kc} input channels, input has {in_c}"
            )));
        }
        let out_h = out_extent(in_h, kh, stride.0, padding.0)?;
        let out_w = out_extent(in_w, kw, stride.1, padding.1)?;
        Ok(Self {
            batch,
            in_h,
            in_w,
            in_c,
            kernel: (kh, kw),
            out_c,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }

    /// Rows of the patch matrix (one per output pixel).
    pub fn patches(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Columns of the patch matrix (`kh·kw·Cin`).
    pub fn patch_len(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.in_c
    }

    /// A 1×1 stride-1 unpadded convolution reads the input as its own patch matrix.
    pub(crate) fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }

    /// Calls `f(patch_row, patch_col_offset, input_offset)` for every in-bounds
    /// kernel tap; each tap covers `in_c` contiguous channels.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (kh, kw) = self.kernel;
        let c = self.in_c;
        for n in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = (n * self.out_h + oy) * self.out_w + ox;
                    for ky in 0..kh {
                        let iy = (oy * self.stride.0 + ky) as isize - self.padding.0 as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * self.stride.1 + kx) as isize - self.padding.1 as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let src = ((n * self.in_h + iy as usize) * self.in_w + ix as usize) * c;
                            f(row, (ky * kw + kx) * c, src);
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let len = self.patch_len();
        let c = self.in_c;
        let mut cols = vec![T::zero(); self.patches() * len];
        self.for_each_tap(|row, off, src| {
            let dst = row * len + off;
            cols[dst..dst + c].copy_from_slice(&input[src..src + c]);
        });
        cols
    }

    pub(crate) fn col2im_add<T: Scalar>(&self, cols: &[T], grad_input: &mut [T]) {
        let len = self.patch_len();
        let c = self.in_c;
        self.for_each_tap(|row, off, src| {
            let from = &cols[row * len + off..row * len + off + c];
            for (g, &v) in grad_input[src..src + c].iter_mut().zip(from) {
                *g = *g + v;
            }
        });
    }
}

/// Geometry of a windowed max-pool over NHWC maps; padded taps never win.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool2dGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl Pool2dGeometry {
    pub fn new(
        input: &[usize],
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let [batch, in_h, in_w, channels] = *input else {
            return Err(Error::Dimension(format!(
                "max_pool2d input must be N×H×W×C, got {input:?}"
            )));
        };
        if padding.0 >= kernel.0 || padding.1 >= kernel.1 {
            return Err(Error::Dimension(
                "pool padding must be smaller than the window".into(),
            ));
        }
        let out_h = out_extent(in_h, kernel.0, stride.0, padding.0)?;
        let out_w = out_extent(in_w, kernel.1, stride.1, padding.1)?;
        Ok(Self {
            batch,
            in_h,
            in_w,
            channels,
            kernel,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.channels]
    }

    /// Forward max-pool; returns outputs and the flat input index of each winner
    /// (first occurrence in row-major window order on ties).
    pub(crate) fn forward<T: Scalar>(&self, input: &[T]) -> (Vec<T>, Vec<usize>) {
        let c = self.channels;
        let n_out = self.batch * self.out_h * self.out_w * c;
        let mut out = vec![T::neg_infinity(); n_out];
        let mut arg = vec![usize::MAX; n_out];
        for n in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let base = ((n * self.out_h + oy) * self.out_w + ox) * c;
                    for ky in 0..self.kernel.0 {
                        let iy = (oy * self.stride.0 + ky) as isize - self.padding.0 as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel.1 {
                            let ix = (ox * self.stride.1 + kx) as isize - self.padding.1 as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let src = ((n * self.in_h + iy as usize) * self.in_w + ix as usize) * c;
                            for ch in 0..c {
                                let v = input[src + ch];
                                if arg[base + ch] == usize::MAX || v > out[base + ch] {
                                    out[base + ch] = v;
                                    arg[base + ch] = src + ch;
                                }
                            }
                        }
                    }
                }
            }
        }
        (out, arg)
    }
}
