//! 2-D convolution (cross-correlation semantics) via im2col and matmul.
//!
//! Forward lowers each sample to a `[C_in·kH·kW, H_out·W_out]` column matrix
//! and multiplies by the flattened weight. Backward recomputes the column
//! matrix instead of storing it; at the sizes this crate targets the extra
//! pass is cheaper than holding every column buffer on the tape.

use super::matmul::{matmul_nn_acc, transpose};
use super::Scalar;

/// Geometry of one convolution, shared by forward and backward.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Output extent along one axis, `None` if the kernel does not fit.
pub fn conv_out_dim(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let effective = dilation * (kernel - 1) + 1;
    let padded = extent + 2 * padding;
    if effective > padded || stride == 0 {
        return None;
    }
    Some((padded - effective) / stride + 1)
}

/// Lower one `[C_in, H, W]` sample into `[C_in·kH·kW, H_out·W_out]` with zero
/// padding.
fn im2col<T: Scalar>(sample: &[T], g: &ConvGeometry, col: &mut [T]) {
    let spatial = g.h_out * g.w_out;
    debug_assert_eq!(col.len(), g.c_in * g.kh * g.kw * spatial);
    for v in col.iter_mut() {
        *v = T::zero();
    }
    for c in 0..g.c_in {
        let plane = &sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * spatial;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        col[row + oy * g.w_out + ox] = plane[iy * g.w + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add a column gradient back onto one input sample.
fn col2im_acc<T: Scalar>(col: &[T], g: &ConvGeometry, sample_grad: &mut [T]) {
    let spatial = g.h_out * g.w_out;
    for c in 0..g.c_in {
        let plane = &mut sample_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * spatial;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let ix = ix as usize;
                        plane[iy * g.w + ix] = plane[iy * g.w + ix] + col[row + oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

/// Forward pass: `[N, C_in, H, W] -> [N, C_out, H_out, W_out]`.
pub fn conv2d_forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T], g: &ConvGeometry) -> Vec<T> {
    let spatial = g.h_out * g.w_out;
    let cols = g.c_in * g.kh * g.kw;
    let mut out = vec![T::zero(); g.batch * g.c_out * spatial];
    let mut col = vec![T::zero(); cols * spatial];
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * spatial;
    for n in 0..g.batch {
        im2col(&input[n * in_stride..(n + 1) * in_stride], g, &mut col);
        let out_n = &mut out[n * out_stride..(n + 1) * out_stride];
        matmul_nn_acc(weight, &col, out_n, g.c_out, cols, spatial);
        for o in 0..g.c_out {
            let b = bias[o];
            for v in out_n[o * spatial..(o + 1) * spatial].iter_mut() {
                *v = *v + b;
            }
        }
    }
    out
}

/// Backward pass; returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let spatial = g.h_out * g.w_out;
    let cols = g.c_in * g.kh * g.kw;
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * spatial;

    let mut d_input = vec![T::zero(); input.len()];
    let mut d_weight = vec![T::zero(); weight.len()];
    let mut d_bias = vec![T::zero(); g.c_out];
    let mut col = vec![T::zero(); cols * spatial];
    let weight_t = transpose(weight, g.c_out, cols);
    let mut d_col = vec![T::zero(); cols * spatial];

    for n in 0..g.batch {
        let dout_n = &dout[n * out_stride..(n + 1) * out_stride];
        im2col(&input[n * in_stride..(n + 1) * in_stride], g, &mut col);

        // d_weight += dout_n · colᵀ
        let col_t = transpose(&col, cols, spatial);
        matmul_nn_acc(dout_n, &col_t, &mut d_weight, g.c_out, spatial, cols);

        // d_col = weightᵀ · dout_n, scattered back onto the input
        for v in d_col.iter_mut() {
            *v = T::zero();
        }
        matmul_nn_acc(&weight_t, dout_n, &mut d_col, cols, g.c_out, spatial);
        col2im_acc(&d_col, g, &mut d_input[n * in_stride..(n + 1) * in_stride]);

        for o in 0..g.c_out {
            let mut s = T::zero();
            for &v in &dout_n[o * spatial..(o + 1) * spatial] {
                s = s + v;
            }
            d_bias[o] = d_bias[o] + s;
        }
    }
    (d_input, d_weight, d_bias)
}
