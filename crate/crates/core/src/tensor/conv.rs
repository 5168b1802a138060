use super::TensorError;

/// Output extent of a strided cross-correlation; errors when the kernel does not tile the
/// padded input exactly.
pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize, TensorError> {
    if stride == 0 {
        return Err(TensorError::dim("conv2d", "stride must be positive"));
    }
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(TensorError::dim("conv2d", alloc::format!("kernel {kernel} does not fit padded extent {padded}")));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(TensorError::dim(
            "conv2d",
            alloc::format!("non-integral output extent ({input}+2*{pad}-{kernel})/{stride}+1"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// `(input-1)*stride - 2*pad + kernel`.
pub fn conv_transpose2d_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize, TensorError> {
    if stride == 0 || input == 0 || kernel == 0 {
        return Err(TensorError::dim("conv_transpose2d", "input, kernel and stride must be positive"));
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad {
        return Err(TensorError::dim("conv_transpose2d", alloc::format!("padding {pad} consumes the whole output")));
    }
    Ok(full - 2 * pad)
}

/// Geometry of a cross-correlation from an `channels×in_h×in_w` image to an
/// `out_h×out_w` grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold patches into a `(C·kh·kw) × (out_h·out_w)` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let n_out = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * n_out);
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= ih {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= iw { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, x: &mut [f64]) {
    let n_out = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * n_out);
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= ih {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < iw {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
