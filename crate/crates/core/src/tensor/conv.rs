//! 2-D cross-correlation via im2col and a dense GEMM.

use super::Tensor;
use crate::error::{Error, Result};

/// Target width of one patch-matrix tile.
const TILE_COLUMNS: usize = 512;

/// Row-major matrix operand for [`gemm`]: `transposed` means the slice
/// stores the transpose of the logical matrix; `ld` is the row stride of
/// the stored matrix when rows are not packed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub transposed: bool,
    pub ld: Option<usize>,
}

impl<'a> Mat<'a> {
    pub fn n(data: &'a [f64]) -> Self {
        Mat {
            data,
            transposed: false,
            ld: None,
        }
    }

    pub fn t(data: &'a [f64]) -> Self {
        Mat {
            data,
            transposed: true,
            ld: None,
        }
    }

    pub fn with_ld(self, ld: usize) -> Self {
        Mat {
            ld: Some(ld),
            ..self
        }
    }

    /// Row and column strides of the logical `rows × cols` matrix.
    fn strides(&self, rows: usize, cols: usize) -> (usize, usize) {
        let (stored_rows, stored_cols) = if self.transposed {
            (cols, rows)
        } else {
            (rows, cols)
        };
        let ld = self.ld.unwrap_or(stored_cols);
        assert!(ld >= stored_cols, "leading dimension too small");
        assert!(
            stored_rows == 0 || (stored_rows - 1) * ld + stored_cols <= self.data.len(),
            "operand slice too short"
        );
        if self.ld.is_none() {
            assert_eq!(self.data.len(), rows * cols, "operand slice length");
        }
        if self.transposed {
            (1, ld)
        } else {
            (ld, 1)
        }
    }
}

/// `c = a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n`, all row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(c.len(), m * n);
    gemm_ld(m, k, n, a, b, beta, c, n);
}

/// [`gemm`] writing into `c` with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_ld(
    m: usize,
    k: usize,
    n: usize,
    a: Mat<'_>,
    b: Mat<'_>,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    let (rsa, csa) = a.strides(m, k);
    let (rsb, csb) = b.strides(k, n);
    assert!(ldc >= n);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * ldc + n <= c.len());
    if k == 0 {
        for row in c.chunks_mut(ldc).take(m) {
            row[..n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: the stride checks above guarantee every index reachable from
    // the given dimensions and strides lies inside the three slices, and
    // `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (batch, in_channels, height, width) = input.dims4("conv2d input")?;
        let (out_channels, kc, kh, kw) = kernel.dims4("conv2d kernel")?;
        if kc != in_channels {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input dims {:?}, kernel dims {:?}",
                input.dims(),
                kernel.dims()
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        if kh == 0 || kw == 0 || height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} does not fit input {height}x{width} with padding {padding}"
            )));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kh,
            kw,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Source index along one axis, or `None` when it falls in the padding.
    #[inline]
    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        (out * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&i| i < extent)
    }

    /// Output positions `lo..hi` whose source along one axis is inside the
    /// input, for kernel offset `k`.
    #[inline]
    fn valid_range(&self, k: usize, out: usize, extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.padding.saturating_sub(k).div_ceil(s);
        let hi = if extent + self.padding > k {
            ((extent + self.padding - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Output rows per tile so one patch matrix stays cache-resident.
    fn tile_rows(&self) -> usize {
        (TILE_COLUMNS / self.out_w.max(1)).clamp(1, self.out_h.max(1))
    }

    /// Patch matrix for output rows `rows`, `patch_len × rows.len()·out_w`.
    fn im2col(&self, image: &[f64], rows: std::ops::Range<usize>, col: &mut [f64]) {
        let plane = rows.len() * self.out_w;
        let first = rows.start;
        let mut row = 0;
        for c in 0..self.in_channels {
            let channel = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_range(kj, self.out_w, self.width);
                    for oy in rows.clone() {
                        let r = oy - first;
                        let line = &mut dst[r * self.out_w..(r + 1) * self.out_w];
                        match self.source(oy, ki, self.height) {
                            None => line.fill(0.0),
                            Some(iy) => {
                                let src = &channel[iy * self.width..(iy + 1) * self.width];
                                line[..lo].fill(0.0);
                                line[hi..].fill(0.0);
                                if lo == hi {
                                    continue;
                                }
                                let start = lo * self.stride + kj - self.padding;
                                if self.stride == 1 {
                                    line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                                } else {
                                    for (v, x) in line[lo..hi]
                                        .iter_mut()
                                        .zip(src[start..].iter().step_by(self.stride))
                                    {
                                        *v = *x;
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds a patch matrix for output rows `rows` back into `image`.
    fn col2im_add(&self, col: &[f64], rows: std::ops::Range<usize>, image: &mut [f64]) {
        let plane = rows.len() * self.out_w;
        let first = rows.start;
        let mut row = 0;
        for c in 0..self.in_channels {
            let channel =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &col[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_range(kj, self.out_w, self.width);
                    for oy in rows.clone() {
                        let Some(iy) = self.source(oy, ki, self.height) else {
                            continue;
                        };
                        if lo == hi {
                            continue;
                        }
                        let r = oy - first;
                        let line = &src[r * self.out_w + lo..r * self.out_w + hi];
                        let dst = &mut channel[iy * self.width..(iy + 1) * self.width];
                        let start = lo * self.stride + kj - self.padding;
                        if self.stride == 1 {
                            for (x, v) in dst[start..start + line.len()].iter_mut().zip(line) {
                                *x += v;
                            }
                        } else {
                            for (x, v) in dst[start..].iter_mut().step_by(self.stride).zip(line) {
                                *x += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, stride, padding)?;
    if let Some(b) = bias {
        if b.dims() != [g.out_channels] {
            return Err(Error::shape(format!(
                "conv2d bias dims {:?}, expected [{}]",
                b.dims(),
                g.out_channels
            )));
        }
    }
    let plane = g.out_plane();
    let in_image = g.in_channels * g.height * g.width;
    let out_image = g.out_channels * plane;
    let mut out = vec![0.0; g.batch * out_image];
    let tile = g.tile_rows();
    let mut col = vec![
        0.0;
        if g.is_pointwise() {
            0
        } else {
            g.patch_len() * tile * g.out_w
        }
    ];
    for n in 0..g.batch {
        let image = &input.values()[n * in_image..(n + 1) * in_image];
        let dst = &mut out[n * out_image..(n + 1) * out_image];
        if let Some(b) = bias {
            for (c, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(b.values()[c]);
            }
        }
        for r0 in (0..g.out_h).step_by(tile) {
            let rows = r0..(r0 + tile).min(g.out_h);
            let (c0, width) = (r0 * g.out_w, rows.len() * g.out_w);
            let cols = if g.is_pointwise() {
                Mat::n(&image[c0..]).with_ld(plane)
            } else {
                let col = &mut col[..g.patch_len() * width];
                g.im2col(image, rows, col);
                Mat::n(col)
            };
            gemm_ld(
                g.out_channels,
                g.patch_len(),
                width,
                Mat::n(kernel.values()),
                cols,
                1.0,
                &mut dst[c0..],
                plane,
            );
        }
    }
    Tensor::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
    stride: usize,
    padding: usize,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, kernel, stride, padding)?;
    let (mut need_input, need_kernel, need_bias) = need;
    let plane = g.out_plane();
    // With unit stride the input gradient is a plain convolution of the
    // output gradient with the flipped, channel-swapped kernel.
    let mut flipped_input = None;
    if need_input
        && g.stride == 1
        && !g.is_pointwise()
        && g.padding < g.kh
        && g.padding < g.kw
        && g.kh == g.kw
    {
        let (co, ci, kh, kw) = (g.out_channels, g.in_channels, g.kh, g.kw);
        let k = kernel.values();
        let flipped = Tensor::from_fn(&[ci, co, kh, kw], |i| {
            let (c_in, rest) = (i / (co * kh * kw), i % (co * kh * kw));
            let (c_out, rest) = (rest / (kh * kw), rest % (kh * kw));
            let (ki, kj) = (rest / kw, rest % kw);
            k[((c_out * ci + c_in) * kh + kh - 1 - ki) * kw + kw - 1 - kj]
        });
        let dy = Tensor::new(vec![g.batch, co, g.out_h, g.out_w], grad_out.to_vec())?;
        let dx = conv2d_forward(&dy, &flipped, None, 1, kh - 1 - g.padding)?;
        flipped_input = Some(dx.into_values());
        need_input = false;
    }
    let in_image = g.in_channels * g.height * g.width;
    let out_image = g.out_channels * plane;
    let mut d_input = need_input.then(|| vec![0.0; input.len()]);
    let mut d_kernel = need_kernel.then(|| vec![0.0; kernel.len()]);
    let mut d_bias = need_bias.then(|| vec![0.0; g.out_channels]);
    let tile = g.tile_rows();
    let buffer = if g.is_pointwise() {
        0
    } else {
        g.patch_len() * tile * g.out_w
    };
    let mut col = vec![0.0; if need_kernel { buffer } else { 0 }];
    let mut d_col = vec![0.0; if need_input { buffer } else { 0 }];
    for n in 0..g.batch {
        let image = &input.values()[n * in_image..(n + 1) * in_image];
        let dy = &grad_out[n * out_image..(n + 1) * out_image];
        if let Some(db) = d_bias.as_mut() {
            for (c, chunk) in dy.chunks(plane).enumerate() {
                db[c] += chunk.iter().sum::<f64>();
            }
        }
        for r0 in (0..g.out_h).step_by(tile) {
            let rows = r0..(r0 + tile).min(g.out_h);
            let (c0, width) = (r0 * g.out_w, rows.len() * g.out_w);
            let dy_tile = Mat::n(&dy[c0..]).with_ld(plane);
            if let Some(dk) = d_kernel.as_mut() {
                let cols = if g.is_pointwise() {
                    Mat::t(&image[c0..]).with_ld(plane)
                } else {
                    let col = &mut col[..g.patch_len() * width];
                    g.im2col(image, rows.clone(), col);
                    Mat::t(col)
                };
                gemm(g.out_channels, width, g.patch_len(), dy_tile, cols, 1.0, dk);
            }
            if let Some(dx) = d_input.as_mut() {
                let dst = &mut dx[n * in_image..(n + 1) * in_image];
                if g.is_pointwise() {
                    gemm_ld(
                        g.patch_len(),
                        g.out_channels,
                        width,
                        Mat::t(kernel.values()),
                        dy_tile,
                        1.0,
                        &mut dst[c0..],
                        plane,
                    );
                } else {
                    let d_col = &mut d_col[..g.patch_len() * width];
                    gemm(
                        g.patch_len(),
                        g.out_channels,
                        width,
                        Mat::t(kernel.values()),
                        dy_tile,
                        0.0,
                        d_col,
                    );
                    g.col2im_add(d_col, rows, dst);
                }
            }
        }
    }
    Ok(ConvGrads {
        input: flipped_input.or(d_input),
        kernel: d_kernel,
        bias: d_bias,
    })
}
