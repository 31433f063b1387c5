//! Convolutions over a single `(channels, height, width)` sample.

use super::init::Init;
use super::{gemm, join, Module, Param, Precision, Scalar};

/// Square-kernel, stride-1 convolution with symmetric zero padding that
/// keeps the spatial size (`padding = kernel / 2`, odd kernels only).
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..((ci * k + ky) * k + kx + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let src = sy as usize * w;
                    let s0 = (src as isize + x_lo as isize + dx) as usize;
                    row[y * w + x_lo..y * w + x_hi].copy_from_slice(&plane[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..((ci * k + ky) * k + kx + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let s0 = (sy as usize * w) as isize + x_lo as isize + dx;
                    let dst = &mut plane[s0 as usize..s0 as usize + (x_hi - x_lo)];
                    dst.iter_mut()
                        .zip(&row[y * w + x_lo..y * w + x_hi])
                        .for_each(|(d, &g)| *d += g);
                }
            }
        }
    }
    x
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, init: &mut Init) -> Self {
        assert!(kernel % 2 == 1, "only odd kernels keep the spatial size");
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::new(
                &[out_channels, in_channels, kernel, kernel],
                init.kaiming_uniform(fan_in, out_channels * fan_in),
            ),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward(&self, x: &[T], h: usize, w: usize, prec: Precision) -> Vec<T> {
        let hw = h * w;
        assert_eq!(x.len(), self.in_channels * hw);
        let wt = prec.weights(&self.weight.value);
        let mut y = vec![T::zero(); self.out_channels * hw];
        let kdim = self.in_channels * self.kernel * self.kernel;
        if self.kernel == 1 {
            gemm(
                false,
                false,
                self.out_channels,
                hw,
                kdim,
                T::one(),
                &wt,
                x,
                T::zero(),
                &mut y,
            );
        } else {
            let col = im2col(x, self.in_channels, h, w, self.kernel);
            gemm(
                false,
                false,
                self.out_channels,
                hw,
                kdim,
                T::one(),
                &wt,
                &col,
                T::zero(),
                &mut y,
            );
        }
        let b = prec.weights(&self.bias.value);
        for (co, plane) in y.chunks_exact_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[co]);
        }
        prec.round(&mut y);
        y
    }

    pub fn backward(
        &mut self,
        x: &[T],
        h: usize,
        w: usize,
        dy: &[T],
        prec: Precision,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        let hw = h * w;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let col = if self.kernel == 1 {
            None
        } else {
            Some(im2col(x, self.in_channels, h, w, self.kernel))
        };
        let cols = col.as_deref().unwrap_or(x);
        gemm(
            false,
            true,
            self.out_channels,
            kdim,
            hw,
            T::one(),
            dy,
            cols,
            T::one(),
            &mut self.weight.grad,
        );
        for (co, plane) in dy.chunks_exact(hw).enumerate() {
            self.bias.grad[co] += plane.iter().copied().sum::<T>();
        }
        need_dx.then(|| {
            let wt = prec.weights(&self.weight.value);
            let mut dcol = vec![T::zero(); kdim * hw];
            gemm(
                true,
                false,
                kdim,
                hw,
                self.out_channels,
                T::one(),
                &wt,
                dy,
                T::zero(),
                &mut dcol,
            );
            let mut dx = if self.kernel == 1 {
                dcol
            } else {
                col2im(&dcol, self.in_channels, h, w, self.kernel)
            };
            prec.round(&mut dx);
            dx
        })
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Learned 2× upsampling: transposed convolution with a 2×2 kernel and
/// stride 2. Weight layout `(in, out, 2, 2)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl<T: Scalar> ConvTranspose2x2<T> {
    pub fn new(in_channels: usize, out_channels: usize, init: &mut Init) -> Self {
        Self {
            weight: Param::new(
                &[in_channels, out_channels, 2, 2],
                init.kaiming_uniform(in_channels, in_channels * out_channels * 4),
            ),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, x: &[T], h: usize, w: usize, prec: Precision) -> Vec<T> {
        let hw = h * w;
        let co4 = self.out_channels * 4;
        let wt = prec.weights(&self.weight.value);
        let mut z = vec![T::zero(); co4 * hw];
        gemm(
            true,
            false,
            co4,
            hw,
            self.in_channels,
            T::one(),
            &wt,
            x,
            T::zero(),
            &mut z,
        );
        let (oh, ow) = (2 * h, 2 * w);
        let b = prec.weights(&self.bias.value);
        let mut y = vec![T::zero(); self.out_channels * oh * ow];
        for co in 0..self.out_channels {
            for a in 0..2 {
                for bb in 0..2 {
                    let zr = &z[(co * 4 + a * 2 + bb) * hw..(co * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        let out_row = &mut y[(co * oh + 2 * i + a) * ow..(co * oh + 2 * i + a + 1) * ow];
                        for j in 0..w {
                            out_row[2 * j + bb] = zr[i * w + j] + b[co];
                        }
                    }
                }
            }
        }
        prec.round(&mut y);
        y
    }

    pub fn backward(&mut self, x: &[T], h: usize, w: usize, dy: &[T], prec: Precision) -> Vec<T> {
        let hw = h * w;
        let co4 = self.out_channels * 4;
        let (oh, ow) = (2 * h, 2 * w);
        let mut dz = vec![T::zero(); co4 * hw];
        for co in 0..self.out_channels {
            let mut bsum = T::zero();
            for a in 0..2 {
                for bb in 0..2 {
                    let zr = &mut dz[(co * 4 + a * 2 + bb) * hw..(co * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        let g_row = &dy[(co * oh + 2 * i + a) * ow..(co * oh + 2 * i + a + 1) * ow];
                        for j in 0..w {
                            zr[i * w + j] = g_row[2 * j + bb];
                            bsum += g_row[2 * j + bb];
                        }
                    }
                }
            }
            self.bias.grad[co] += bsum;
        }
        gemm(
            false,
            true,
            self.in_channels,
            co4,
            hw,
            T::one(),
            x,
            &dz,
            T::one(),
            &mut self.weight.grad,
        );
        let wt = prec.weights(&self.weight.value);
        let mut dx = vec![T::zero(); self.in_channels * hw];
        gemm(
            false,
            false,
            self.in_channels,
            hw,
            co4,
            T::one(),
            &wt,
            &dz,
            T::zero(),
            &mut dx,
        );
        prec.round(&mut dx);
        dx
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2x2<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    #[allow(clippy::too_many_arguments)]
    fn conv_ref(x: &[f64], wt: &[f64], b: &[f64], ci: usize, co: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
        let p = (k / 2) as isize;
        let mut y = vec![0.0; co * h * w];
        for o in 0..co {
            for r in 0..h {
                for c in 0..w {
                    let mut s = b[o];
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sr, sc) = (r as isize + ky as isize - p, c as isize + kx as isize - p);
                                if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
                                    s += wt[((o * ci + i) * k + ky) * k + kx]
                                        * x[(i * h + sr as usize) * w + sc as usize];
                                }
                            }
                        }
                    }
                    y[(o * h + r) * w + c] = s;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut init = Init::new(5);
        for k in [1, 3, 5] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, &mut init);
            conv.bias.value = init.normal(4, 1.0);
            let (h, w) = (6, 7);
            let x: Vec<f64> = init.normal(3 * h * w, 1.0);
            let y = conv.forward(&x, h, w, Precision::Float32);
            let want = conv_ref(&x, &conv.weight.value, &conv.bias.value, 3, 4, h, w, k);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let mut init = Init::new(9);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, &mut init);
        let (h, w) = (5, 4);
        let x: Vec<f64> = init.normal(2 * h * w, 1.0);
        let g: Vec<f64> = init.normal(3 * h * w, 1.0);
        let dx = conv.backward(&x, h, w, &g, Precision::Float32, true).unwrap();
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut a = x.clone();
            a[i] += eps;
            let mut b = x.clone();
            b[i] -= eps;
            let f = |v: &[f64]| {
                conv.forward(v, h, w, Precision::Float32)
                    .iter()
                    .zip(&g)
                    .map(|(p, q)| p * q)
                    .sum::<f64>()
            };
            let num = (f(&a) - f(&b)) / (2.0 * eps);
            assert!((dx[i] - num).abs() < 1e-7);
        }
        // weight gradient: loss is linear in weights, so d/dW = sum g * col
        let wi = 7;
        let f = |c: &Conv2d<f64>| {
            c.forward(&x, h, w, Precision::Float32)
                .iter()
                .zip(&g)
                .map(|(p, q)| p * q)
                .sum::<f64>()
        };
        let mut c2 = conv.clone();
        c2.weight.value[wi] += 1.0;
        let num = f(&c2) - f(&conv);
        assert!((conv.weight.grad[wi] - num).abs() < 1e-9);
    }

    #[test]
    fn transposed_conv_doubles_and_backprops() {
        let mut init = Init::new(2);
        let mut up = ConvTranspose2x2::<f64>::new(3, 2, &mut init);
        up.bias.value = vec![0.5, -0.25];
        let (h, w) = (2, 3);
        let x: Vec<f64> = init.normal(3 * h * w, 1.0);
        let y = up.forward(&x, h, w, Precision::Float32);
        assert_eq!(y.len(), 2 * 4 * 6);
        // y[co, 2i+a, 2j+b] = sum_ci x[ci,i,j] W[ci,co,a,b] + bias
        let (co, i, j, a, b) = (1, 1, 2, 1, 0);
        let mut want = up.bias.value[co];
        for ci in 0..3 {
            want += x[(ci * h + i) * w + j] * up.weight.value[((ci * 2 + co) * 2 + a) * 2 + b];
        }
        assert!((y[(co * 4 + 2 * i + a) * 6 + 2 * j + b] - want).abs() < 1e-12);

        let g: Vec<f64> = init.normal(y.len(), 1.0);
        let dx = up.backward(&x, h, w, &g, Precision::Float32);
        let eps = 1e-6;
        for idx in 0..x.len() {
            let mut p = x.clone();
            p[idx] += eps;
            let mut m = x.clone();
            m[idx] -= eps;
            let f = |v: &[f64]| {
                up.forward(v, h, w, Precision::Float32)
                    .iter()
                    .zip(&g)
                    .map(|(p, q)| p * q)
                    .sum::<f64>()
            };
            assert!((dx[idx] - (f(&p) - f(&m)) / (2.0 * eps)).abs() < 1e-7);
        }
    }
}
