//! Numeric kernels shared by the layers: matrix products, patch extraction
//! and activation functions. Everything here is single-threaded so that
//! reduction order, and hence every bit of the result, is reproducible.

use super::layer::Activation;

/// Strided view of a matrix for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> Mat<'a> {
    /// Row-major `rows x cols` view.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        Mat {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major.
pub(crate) fn gemm(alpha: f64, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(c.len(), a.rows * b.cols, "output size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above and in `Mat::new` guarantee every index the
    // kernel touches lies inside the borrowed slices; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Sliding-window geometry over an `H x W x C` image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Window {
    pub fn patch_len(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.channels
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(patch_row, patch_offset, image_offset)` for every in-bounds
    /// (output position, kernel tap) pair. Offsets point at channel 0.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (kh, kw) = self.kernel;
        let c = self.channels;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = oy * self.out_w + ox;
                for ky in 0..kh {
                    let iy = (oy * self.stride.0 + ky) as isize - self.pad.0 as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * self.stride.1 + kx) as isize - self.pad.1 as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let patch = (ky * kw + kx) * c;
                        let image = (iy as usize * self.in_w + ix as usize) * c;
                        f(row, patch, image);
                    }
                }
            }
        }
    }

    /// Gather patches of `image` into `cols` (`positions x patch_len`).
    pub fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let c = self.channels;
        let plen = self.patch_len();
        cols.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_tap(|row, patch, img| {
            let dst = row * plen + patch;
            cols[dst..dst + c].copy_from_slice(&image[img..img + c]);
        });
    }

    /// Scatter-add `cols` back into `image`; the adjoint of [`Window::im2col`].
    pub fn col2im_add(&self, cols: &[f64], image: &mut [f64]) {
        let c = self.channels;
        let plen = self.patch_len();
        self.for_each_tap(|row, patch, img| {
            let src = row * plen + patch;
            for (d, s) in image[img..img + c].iter_mut().zip(&cols[src..src + c]) {
                *d += s;
            }
        });
    }
}

pub(crate) fn add_bias_rows(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

pub(crate) fn accumulate_bias_grad(grad: &[f64], bias_grad: &mut [f64]) {
    for row in grad.chunks_exact(bias_grad.len()) {
        for (g, d) in bias_grad.iter_mut().zip(row) {
            *g += d;
        }
    }
}

/// Apply `act` in place. Softmax normalizes each run of `row_len` values.
pub(crate) fn activate(act: Activation, values: &mut [f64], row_len: usize) {
    match act {
        Activation::None => {}
        Activation::Relu => values.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Sigmoid => values.iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::Tanh => values.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Softmax => {
            for row in values.chunks_exact_mut(row_len) {
                softmax_in_place(row);
            }
        }
    }
}

/// Turn `grad` (w.r.t. the activation output) into the gradient w.r.t. the
/// pre-activation, given the activation output `out`.
pub(crate) fn activation_backward(act: Activation, out: &[f64], grad: &mut [f64], row_len: usize) {
    match act {
        Activation::None => {}
        Activation::Relu => {
            for (g, &o) in grad.iter_mut().zip(out) {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for (g, &o) in grad.iter_mut().zip(out) {
                *g *= o * (1.0 - o);
            }
        }
        Activation::Tanh => {
            for (g, &o) in grad.iter_mut().zip(out) {
                *g *= 1.0 - o * o;
            }
        }
        Activation::Softmax => {
            for (g, s) in grad.chunks_exact_mut(row_len).zip(out.chunks_exact(row_len)) {
                let dot: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
                for (gi, &si) in g.iter_mut().zip(s) {
                    *gi = si * (*gi - dot);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(1.0, Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), 1.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = 1.0 + (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum::<f64>();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2) * a (2x3)
        let mut g = vec![0.0; 9];
        gemm(1.0, Mat::new(&a, 2, 3).t(), Mat::new(&a, 2, 3), 0.0, &mut g);
        assert_eq!(g[0], 0.0 * 0.0 + 3.0 * 3.0);
        assert_eq!(g[5], 1.0 * 2.0 + 4.0 * 5.0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let win = Window {
            in_h: 5,
            in_w: 4,
            channels: 2,
            out_h: 3,
            out_w: 2,
            kernel: (3, 2),
            stride: (2, 2),
            pad: (1, 0),
        };
        let x: Vec<f64> = (0..40).map(|v| (v as f64).sin()).collect();
        let y: Vec<f64> = (0..win.positions() * win.patch_len())
            .map(|v| (v as f64 * 0.3).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        win.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        win.col2im_add(&y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut v = vec![0.0, 0.0];
        activate(Activation::Softmax, &mut v, 2);
        assert_eq!(v, vec![0.5, 0.5]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
