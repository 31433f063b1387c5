use super::{join, Module, Param, Precision, Scalar};

/// Saved statistics of a normalization forward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub dim: usize,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::filled(&[dim], T::one()),
            beta: Param::zeros(&[dim]),
            dim,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &[T], prec: Precision) -> (Vec<T>, NormCache<T>) {
        let d = self.dim;
        let n = T::c(d as f64);
        let eps = T::c(self.eps);
        let rows = x.len() / d;
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                y[r * d + i] = h * self.gamma.value[i] + self.beta.value[i];
            }
        }
        prec.round(&mut y);
        (y, NormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &[T], prec: Precision) -> Vec<T> {
        let d = self.dim;
        let n = T::c(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        for (r, &rs) in cache.rstd.iter().enumerate() {
            let g = &dy[r * d..(r + 1) * d];
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let mut mean_dxh = T::zero();
            let mut mean_dxh_xh = T::zero();
            for i in 0..d {
                self.gamma.grad[i] += g[i] * xh[i];
                self.beta.grad[i] += g[i];
                let dxh = g[i] * self.gamma.value[i];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[i];
            }
            mean_dxh /= n;
            mean_dxh_xh /= n;
            for i in 0..d {
                let dxh = g[i] * self.gamma.value[i];
                dx[r * d + i] = rs * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
            }
        }
        prec.round(&mut dx);
        dx
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Group normalization of one `(channels, pixels)` sample. Independent of
/// batch size.
#[derive(Clone, Debug)]
pub struct GroupNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(
            groups > 0 && channels.is_multiple_of(groups),
            "{channels} channels not divisible into {groups} groups"
        );
        Self {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            channels,
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &[T], prec: Precision) -> (Vec<T>, NormCache<T>) {
        let pixels = x.len() / self.channels;
        let per = self.channels / self.groups;
        let span = per * pixels;
        let n = T::c(span as f64);
        let eps = T::c(self.eps);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); self.groups];
        let mut y = vec![T::zero(); x.len()];
        for g in 0..self.groups {
            let seg = &x[g * span..(g + 1) * span];
            let mean = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[g] = rs;
            for c in g * per..(g + 1) * per {
                let (ga, be) = (self.gamma.value[c], self.beta.value[c]);
                for p in c * pixels..(c + 1) * pixels {
                    let h = (x[p] - mean) * rs;
                    xhat[p] = h;
                    y[p] = h * ga + be;
                }
            }
        }
        prec.round(&mut y);
        (y, NormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &[T], prec: Precision) -> Vec<T> {
        let pixels = dy.len() / self.channels;
        let per = self.channels / self.groups;
        let n = T::c((per * pixels) as f64);
        let mut dx = vec![T::zero(); dy.len()];
        for (g, &rs) in cache.rstd.iter().enumerate() {
            let mut mean_dxh = T::zero();
            let mut mean_dxh_xh = T::zero();
            for c in g * per..(g + 1) * per {
                let ga = self.gamma.value[c];
                let (mut dga, mut dbe) = (T::zero(), T::zero());
                let span = c * pixels..(c + 1) * pixels;
                for (&d, &xh) in dy[span.clone()].iter().zip(&cache.xhat[span]) {
                    dga += d * xh;
                    dbe += d;
                    let dxh = d * ga;
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh;
                }
                self.gamma.grad[c] += dga;
                self.beta.grad[c] += dbe;
            }
            mean_dxh /= n;
            mean_dxh_xh /= n;
            for c in g * per..(g + 1) * per {
                let ga = self.gamma.value[c];
                for p in c * pixels..(c + 1) * pixels {
                    dx[p] = rs * (dy[p] * ga - mean_dxh - cache.xhat[p] * mean_dxh_xh);
                }
            }
        }
        prec.round(&mut dx);
        dx
    }
}

impl<T: Scalar> Module<T> for GroupNorm<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}
