use super::init::Init;
use super::{gemm, join, Module, Param, Precision, Scalar};

/// `y = x · Wᵀ + b` over `rows` independent rows.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, init: &mut Init) -> Self {
        Self {
            weight: Param::new(&[out_dim, in_dim], init.xavier_uniform(in_dim, out_dim)),
            bias: Param::zeros(&[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[T], rows: usize, prec: Precision) -> Vec<T> {
        let w = prec.weights(&self.weight.value);
        let mut y = vec![T::zero(); rows * self.out_dim];
        gemm(
            false,
            true,
            rows,
            self.out_dim,
            self.in_dim,
            T::one(),
            x,
            &w,
            T::zero(),
            &mut y,
        );
        let b = prec.weights(&self.bias.value);
        for row in y.chunks_exact_mut(self.out_dim) {
            row.iter_mut().zip(b.iter()).for_each(|(v, &b)| *v += b);
        }
        prec.round(&mut y);
        y
    }

    /// Accumulate parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &[T], rows: usize, dy: &[T], prec: Precision, need_dx: bool) -> Option<Vec<T>> {
        gemm(
            true,
            false,
            self.out_dim,
            self.in_dim,
            rows,
            T::one(),
            dy,
            x,
            T::one(),
            &mut self.weight.grad,
        );
        for row in dy.chunks_exact(self.out_dim) {
            self.bias.grad.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
        }
        need_dx.then(|| {
            let w = prec.weights(&self.weight.value);
            let mut dx = vec![T::zero(); rows * self.in_dim];
            gemm(
                false,
                false,
                rows,
                self.in_dim,
                self.out_dim,
                T::one(),
                dy,
                &w,
                T::zero(),
                &mut dx,
            );
            prec.round(&mut dx);
            dx
        })
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
