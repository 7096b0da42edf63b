//! Convolution arithmetic and the im2col kernels behind conv / transposed conv.
//!
//! Layout is NHWC for activations and `[kH, kW, inC, outC]` for filters.
//! A transposed convolution with filter `f` is the adjoint of the forward
//! convolution with the same `f`, so its filter is read as
//! `[kH, kW, outC, inC]` relative to its own data flow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

/// Spatial extent produced by a strided convolution.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<usize> {
    if input == 0 || kernel == 0 || stride == 0 {
        return Err(Error::invalid(format!(
            "conv extents must be positive (in={input}, k={kernel}, s={stride})"
        )));
    }
    match padding {
        Padding::Same => Ok(input.div_ceil(stride)),
        Padding::Valid => {
            if kernel > input {
                Err(Error::invalid(format!(
                    "VALID convolution with kernel {kernel} larger than input {input}"
                )))
            } else {
                Ok((input - kernel) / stride + 1)
            }
        }
    }
}

/// Spatial extent produced by a strided transposed convolution.
pub fn conv_transpose_output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<usize> {
    if input == 0 || kernel == 0 || stride == 0 {
        return Err(Error::invalid(format!(
            "transposed conv extents must be positive (in={input}, k={kernel}, s={stride})"
        )));
    }
    Ok(match padding {
        Padding::Same => input * stride,
        Padding::Valid => (input - 1) * stride + kernel,
    })
}

/// Zero padding `(before, after)` for a SAME convolution; the odd pixel goes
/// after (bottom/right).
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (total / 2, total - total / 2)
}

/// Parses a `[1, sH, sW, 1]` stride.
pub fn stride_hw(stride: [usize; 4]) -> Result<(usize, usize)> {
    if stride[0] != 1 || stride[3] != 1 || stride[1] == 0 || stride[2] == 0 {
        return Err(Error::invalid(format!("stride must be [1, sH, sW, 1], got {stride:?}")));
    }
    Ok((stride[1], stride[2]))
}

/// Geometry of a forward convolution `[B,H,W,C] -> [B,OH,OW,F]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    /// Forward convolution geometry from an NHWC input shape and a filter shape.
    pub fn forward(input: &[usize], filter: &[usize], stride: (usize, usize), padding: Padding) -> Result<Self> {
        if input.len() != 4 || filter.len() != 4 {
            return Err(Error::shape("conv2d", input, filter));
        }
        if input[3] != filter[2] {
            return Err(Error::shape("conv2d (channels)", input, filter));
        }
        let out_h = conv_output_extent(input[1], filter[0], stride.0, padding)?;
        let out_w = conv_output_extent(input[2], filter[1], stride.1, padding)?;
        let (pad_top, pad_left) = match padding {
            Padding::Same => (
                same_padding(input[1], filter[0], stride.0).0,
                same_padding(input[2], filter[1], stride.1).0,
            ),
            Padding::Valid => (0, 0),
        };
        Ok(ConvGeom {
            batch: input[0],
            in_h: input[1],
            in_w: input[2],
            in_c: input[3],
            out_h,
            out_w,
            out_c: filter[3],
            kh: filter[0],
            kw: filter[1],
            sh: stride.0,
            sw: stride.1,
            pad_top,
            pad_left,
        })
    }

    /// Geometry of the convolution whose adjoint is the transposed
    /// convolution of `input` (`[B,H,W,inC]`) with `filter`
    /// (`[kH,kW,outC,inC]`). The returned geometry's *input* is the
    /// transposed convolution's output.
    pub fn transpose(input: &[usize], filter: &[usize], stride: (usize, usize), padding: Padding) -> Result<Self> {
        if input.len() != 4 || filter.len() != 4 {
            return Err(Error::shape("conv2d_transpose", input, filter));
        }
        if input[3] != filter[3] {
            return Err(Error::shape("conv2d_transpose (channels)", input, filter));
        }
        let out_h = conv_transpose_output_extent(input[1], filter[0], stride.0, padding)?;
        let out_w = conv_transpose_output_extent(input[2], filter[1], stride.1, padding)?;
        let g = ConvGeom::forward(&[input[0], out_h, out_w, filter[2]], filter, stride, padding)?;
        debug_assert_eq!((g.out_h, g.out_w), (input[1], input[2]));
        Ok(g)
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_h, self.in_w, self.in_c]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }

    /// Rows of the im2col matrix.
    pub fn col_rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Columns of the im2col matrix (`kH * kW * inC`).
    pub fn col_cols(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    /// Visits every (column-row, column-offset, input-offset) triple that
    /// falls inside the unpadded input, in a fixed order.
    #[inline]
    fn for_each_patch(&self, mut f: impl FnMut(usize, usize, usize)) {
        let cols = self.col_cols();
        let mut row = 0;
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    for ky in 0..self.kh {
                        let iy = (oy * self.sh + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.sw + kx) as isize - self.pad_left as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let src = ((b * self.in_h + iy as usize) * self.in_w + ix as usize) * self.in_c;
                            let dst = row * cols + (ky * self.kw + kx) * self.in_c;
                            f(row, dst, src);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let mut col = vec![T::zero(); self.col_rows() * self.col_cols()];
        let c = self.in_c;
        self.for_each_patch(|_, dst, src| {
            col[dst..dst + c].copy_from_slice(&input[src..src + c]);
        });
        col
    }

    /// Scatter-adds an im2col matrix back onto an input-shaped buffer.
    pub fn col2im<T: Scalar>(&self, col: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.batch * self.in_h * self.in_w * self.in_c];
        let c = self.in_c;
        self.for_each_patch(|_, dst, src| {
            for (o, &v) in out[src..src + c].iter_mut().zip(&col[dst..dst + c]) {
                *o += v;
            }
        });
        out
    }
}

/// Forward convolution. Returns the output and the im2col matrix (kept for
/// the filter gradient).
pub fn conv2d<T: Scalar>(g: &ConvGeom, input: &[T], filter: &[T]) -> (Vec<T>, Vec<T>) {
    let col = g.im2col(input);
    let mut out = vec![T::zero(); g.col_rows() * g.out_c];
    T::gemm(g.col_rows(), g.col_cols(), g.out_c, &col, false, filter, false, T::zero(), &mut out);
    (out, col)
}

/// Gradient of a forward convolution w.r.t. its input.
pub fn conv2d_input_grad<T: Scalar>(g: &ConvGeom, grad_out: &[T], filter: &[T]) -> Vec<T> {
    let mut dcol = vec![T::zero(); g.col_rows() * g.col_cols()];
    T::gemm(g.col_rows(), g.out_c, g.col_cols(), grad_out, false, filter, true, T::zero(), &mut dcol);
    g.col2im(&dcol)
}

/// Gradient of a forward convolution w.r.t. its filter, given the im2col matrix.
pub fn conv2d_filter_grad<T: Scalar>(g: &ConvGeom, col: &[T], grad_out: &[T]) -> Vec<T> {
    let mut df = vec![T::zero(); g.col_cols() * g.out_c];
    T::gemm(g.col_cols(), g.col_rows(), g.out_c, col, true, grad_out, false, T::zero(), &mut df);
    df
}

/// Transposed convolution: the adjoint of [`conv2d`] for geometry `g`.
/// `input` has the shape of `g`'s output and the result the shape of `g`'s input.
pub fn conv2d_transpose<T: Scalar>(g: &ConvGeom, input: &[T], filter: &[T]) -> Vec<T> {
    conv2d_input_grad(g, input, filter)
}
