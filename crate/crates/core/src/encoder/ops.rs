//! Forward/backward kernels used by the encoders. Activations are token- or
//! pixel-major matrices: one row per spatial position, one column per channel.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

/// `y = x · wᵀ + b` with `w` in `(out, in)` layout.
pub fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: Option<ArrayView1<f64>>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        y += &b;
    }
    y
}

/// Returns `(dx, dw, db)` for [`linear`].
pub fn linear_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&w);
    let dw = dy.t().dot(&x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub fn layer_norm(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    eps: f64,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + eps).sqrt();
        row *= *r;
    }
    let y = &xhat * &gamma + &beta;
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LayerNormCache,
    gamma: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let r = cache.rstd[i];
        dx.row_mut(i)
            .assign(&((&g - mean_g - &(&xh * mean_gx)) * r));
    }
    (dx, dgamma, dbeta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact GELU, `x · Φ(x)`.
    Gelu,
    /// `x · σ(1.702 x)`.
    QuickGelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::QuickGelu => x * sigmoid(1.702 * x),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::QuickGelu => {
                let s = sigmoid(1.702 * x);
                s + 1.702 * x * s * (1.0 - s)
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

/// Backward of a row-wise softmax given its output `p`.
pub fn softmax_rows_backward(p: ArrayView2<f64>, dp: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.raw_dim());
    for i in 0..p.nrows() {
        let pr = p.row(i);
        let dr = dp.row(i);
        let dot = pr.dot(&dr);
        out.row_mut(i).assign(&(&pr * &(&dr - dot)));
    }
    out
}

/// 3x3, stride 1, zero padding 1. Input `(h*w, c)`, output `(h*w, 9c)` with
/// column order `(ky, kx, c)`.
pub fn im2col3x3(x: ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
    let c = x.ncols();
    let mut cols = Array2::zeros((h * w, 9 * c));
    for y in 0..h {
        for xx in 0..w {
            let mut row = cols.row_mut(y * w + xx);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let off = (ky * 3 + kx) * c;
                    row.slice_mut(s![off..off + c])
                        .assign(&x.row(sy as usize * w + sx as usize));
                }
            }
        }
    }
    cols
}

pub fn col2im3x3(dcols: ArrayView2<f64>, h: usize, w: usize, c: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((h * w, c));
    for y in 0..h {
        for xx in 0..w {
            let row = dcols.row(y * w + xx);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let off = (ky * 3 + kx) * c;
                    let mut target = dx.row_mut(sy as usize * w + sx as usize);
                    target += &row.slice(s![off..off + c]);
                }
            }
        }
    }
    dx
}

/// 2x2 average pooling; `h` and `w` must be even.
pub fn avg_pool2(x: ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::zeros((oh * ow, x.ncols()));
    for y in 0..oh {
        for xx in 0..ow {
            let mut o = out.row_mut(y * ow + xx);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                o += &x.row((2 * y + dy) * w + 2 * xx + dx);
            }
            o *= 0.25;
        }
    }
    out
}

pub fn avg_pool2_backward(dy: ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
    let ow = w / 2;
    let mut dx = Array2::zeros((h * w, dy.ncols()));
    for y in 0..h {
        for xx in 0..w {
            dx.row_mut(y * w + xx)
                .assign(&(&dy.row((y / 2) * ow + xx / 2) * 0.25));
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 5.0, 2.0]];
        let (y, _) = layer_norm(x.view(), Array1::ones(4).view(), Array1::zeros(4).view(), 0.0);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = array![[0.3, -1.2, 2.0], [1.5, 0.1, -0.4]];
        let g = array![1.1, 0.7, -0.3];
        let b = array![0.2, 0.0, 0.5];
        let upstream = array![[0.5, -1.0, 2.0], [1.0, 0.3, -0.7]];
        let f = |x: &Array2<f64>| -> f64 {
            let (y, _) = layer_norm(x.view(), g.view(), b.view(), 1e-5);
            (&y * &upstream).sum()
        };
        let (_, cache) = layer_norm(x.view(), g.view(), b.view(), 1e-5);
        let (dx, _, _) = layer_norm_backward(upstream.view(), &cache, g.view());
        for i in 0..2 {
            for j in 0..3 {
                let mut p = x.clone();
                p[[i, j]] += 1e-6;
                let mut m = x.clone();
                m[[i, j]] -= 1e-6;
                let fd = (f(&p) - f(&m)) / 2e-6;
                assert!((fd - dx[[i, j]]).abs() < 1e-6, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn activation_derivatives() {
        for act in [Activation::Gelu, Activation::QuickGelu] {
            for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
                let fd = (act.apply(x + 1e-6) - act.apply(x - 1e-6)) / 2e-6;
                assert!((fd - act.derivative(x)).abs() < 1e-7);
            }
        }
        assert!((Activation::Gelu.apply(1.0) - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (h, w, c) = (4, 3, 2);
        let x = Array2::from_shape_fn((h * w, c), |(i, j)| (i * 7 + j * 3) as f64 % 5.0 - 2.0);
        let y = Array2::from_shape_fn((h * w, 9 * c), |(i, j)| ((i + 2 * j) % 7) as f64 - 3.0);
        let lhs = (&im2col3x3(x.view(), h, w) * &y).sum();
        let rhs = (&x * &col2im3x3(y.view(), h, w, c)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pooling_adjoint() {
        let x = Array2::from_shape_fn((16, 3), |(i, j)| (i * 3 + j) as f64);
        let y = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64) - j as f64);
        let lhs = (&avg_pool2(x.view(), 4, 4) * &y).sum();
        let rhs = (&x * &avg_pool2_backward(y.view(), 4, 4)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let logits = array![[0.2, 1.0, -0.5]];
        let up = array![[1.0, -2.0, 0.5]];
        let f = |l: &Array2<f64>| {
            let mut p = l.clone();
            softmax_rows(&mut p);
            (&p * &up).sum()
        };
        let mut p = logits.clone();
        softmax_rows(&mut p);
        let g = softmax_rows_backward(p.view(), up.view());
        for j in 0..3 {
            let mut a = logits.clone();
            a[[0, j]] += 1e-6;
            let mut b = logits.clone();
            b[[0, j]] -= 1e-6;
            assert!(((f(&a) - f(&b)) / 2e-6 - g[[0, j]]).abs() < 1e-8);
        }
    }
}
