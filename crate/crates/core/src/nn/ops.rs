//! Parameter-free operations and their gradients.

use rand::Rng;

use super::Scalar;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: &[T]) -> Vec<T> {
    let (k, c, half) = (T::c(GELU_K), T::c(GELU_C), T::c(0.5));
    x.iter()
        .map(|&v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    let (k, c, half) = (T::c(GELU_K), T::c(GELU_C), T::c(0.5));
    let three_c = T::c(3.0 * GELU_C);
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let t = (k * (v + c * v * v * v)).tanh();
            let d = half * (T::one() + t) + half * v * (T::one() - t * t) * k * (T::one() + three_c * v * v);
            g * d
        })
        .collect()
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Gradient of ReLU given its output.
pub fn relu_backward_inplace<T: Scalar>(y: &[T], dy: &mut [T]) {
    dy.iter_mut().zip(y).for_each(|(g, &v)| {
        if v <= T::zero() {
            *g = T::zero()
        }
    });
}

/// Numerically stable softmax over each row of length `cols`.
pub fn softmax_rows<T: Scalar>(x: &mut [T], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Inverted-dropout multipliers: `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Scalar, R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<T> {
    if p <= 0.0 {
        return vec![T::one(); n];
    }
    let keep = T::c(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// Nearest-neighbour upsampling of `(channels, h, w)` by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &[T], channels: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    if factor == 1 {
        return x.to_vec();
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); channels * oh * ow];
    for c in 0..channels {
        for y in 0..oh {
            let src = &x[(c * h + y / factor) * w..(c * h + y / factor + 1) * w];
            let dst = &mut out[(c * oh + y) * ow..(c * oh + y + 1) * ow];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(dy: &[T], channels: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    if factor == 1 {
        return dy.to_vec();
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); channels * h * w];
    for c in 0..channels {
        for y in 0..oh {
            let src = &dy[(c * oh + y) * ow..(c * oh + y + 1) * ow];
            let dst = &mut dx[(c * h + y / factor) * w..(c * h + y / factor + 1) * w];
            for (xo, &g) in src.iter().enumerate() {
                dst[xo / factor] += g;
            }
        }
    }
    dx
}

/// Source taps for half-pixel-centred linear interpolation along one axis.
fn linear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of `(channels, h, w)` to `(channels, oh, ow)` with
/// half-pixel centres. Resizing to the same size is the identity.
pub fn bilinear_resize<T: Scalar>(x: &[T], channels: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    assert_eq!(x.len(), channels * h * w);
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    let ty = linear_taps(oh, h);
    let tx = linear_taps(ow, w);
    let mut out = vec![T::zero(); channels * oh * ow];
    for c in 0..channels {
        let src = &x[c * h * w..(c + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::c(fy);
            for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::c(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                out[(c * oh + y) * ow + xo] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_resize_backward<T: Scalar>(
    dy: &[T],
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if (h, w) == (oh, ow) {
        return dy.to_vec();
    }
    let ty = linear_taps(oh, h);
    let tx = linear_taps(ow, w);
    let mut dx = vec![T::zero(); channels * h * w];
    for c in 0..channels {
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::c(fy);
            for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::c(fx);
                let g = dy[(c * oh + y) * ow + xo];
                dst[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += g * (T::one() - fy) * fx;
                dst[y1 * w + x0] += g * fy * (T::one() - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// Nearest-neighbour resize for categorical data.
pub fn nearest_resize<V: Copy>(x: &[V], channels: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<V> {
    let pick = |i: usize, out_len: usize, in_len: usize| {
        (((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
    };
    let ys: Vec<usize> = (0..oh).map(|y| pick(y, oh, h)).collect();
    let xs: Vec<usize> = (0..ow).map(|x| pick(x, ow, w)).collect();
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        for &sy in &ys {
            for &sx in &xs {
                out.push(x[(c * h + sy) * w + sx]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gelu_gradient() {
        let x = vec![-2.5, -0.3, 0.0, 0.7, 3.1];
        let w = vec![0.3, -1.0, 2.0, 0.5, -0.7];
        let f = |x: &[f64]| gelu(x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let g = gelu_backward(&x, &w);
        for (a, n) in g.iter().zip(numeric_grad(f, &x)) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn bilinear_gradient_is_adjoint() {
        let (c, h, w, oh, ow) = (2, 5, 4, 7, 9);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.31).sin()).collect();
        let wts: Vec<f64> = (0..c * oh * ow).map(|i| (i as f64 * 0.17).cos()).collect();
        let f = |x: &[f64]| {
            bilinear_resize(x, c, h, w, oh, ow)
                .iter()
                .zip(&wts)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let g = bilinear_resize_backward(&wts, c, h, w, oh, ow);
        for (a, n) in g.iter().zip(numeric_grad(f, &x)) {
            assert!((a - n).abs() < 1e-7);
        }
    }

    #[test]
    fn upsample_roundtrip_and_gradient() {
        let x: Vec<f64> = (0..2 * 3 * 2).map(|i| i as f64).collect();
        let y = upsample_nearest(&x, 2, 3, 2, 4);
        assert_eq!(y.len(), 2 * 12 * 8);
        assert_eq!(y[(12 + 5) * 8 + 7], x[(3 + 1) * 2 + 1]);
        let g = upsample_nearest_backward(&vec![1.0; y.len()], 2, 3, 2, 4);
        assert!(g.iter().all(|&v| v == 16.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![1.0f64, 2.0, 3.0, 1000.0, 1000.0, -1000.0];
        softmax_rows(&mut x, 3);
        assert!((x[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((x[3] - 0.5).abs() < 1e-12 && x[5] == 0.0);
    }

    #[test]
    fn dropout_rate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m: Vec<f64> = dropout_mask(20_000, 0.1, &mut rng);
        let dropped = m.iter().filter(|&&v| v == 0.0).count() as f64 / 20_000.0;
        assert!((dropped - 0.1).abs() < 0.01);
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
    }
}
