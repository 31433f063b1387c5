use super::init::Init;
use super::linear::Linear;
use super::norm::{LayerNorm, NormCache};
use super::ops::{gelu, gelu_backward, softmax_rows};
use super::{gemm, join, Module, Param, Precision, Scalar};

/// Multi-head self-attention over a `(tokens, dim)` sequence.
#[derive(Clone, Debug)]
pub struct Attention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    input: Vec<T>,
    qkv: Vec<T>,
    /// Softmax probabilities, `heads × tokens × tokens`.
    probs: Vec<T>,
    context: Vec<T>,
}

fn head_slice<T: Scalar>(qkv: &[T], tokens: usize, dim: usize, part: usize, head: usize, hd: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(tokens * hd);
    for t in 0..tokens {
        let base = t * 3 * dim + part * dim + head * hd;
        out.extend_from_slice(&qkv[base..base + hd]);
    }
    out
}

impl<T: Scalar> Attention<T> {
    pub fn new(dim: usize, heads: usize, init: &mut Init) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "dim {dim} not divisible by {heads} heads"
        );
        Self {
            qkv: Linear::new(dim, 3 * dim, init),
            proj: Linear::new(dim, dim, init),
            heads,
            dim,
        }
    }

    pub fn forward(&self, x: &[T], tokens: usize, prec: Precision) -> (Vec<T>, AttentionCache<T>) {
        let (d, hd) = (self.dim, self.dim / self.heads);
        let scale = T::c(1.0 / (hd as f64).sqrt());
        let qkv = self.qkv.forward(x, tokens, prec);
        let mut probs = vec![T::zero(); self.heads * tokens * tokens];
        let mut context = vec![T::zero(); tokens * d];
        for h in 0..self.heads {
            let q = head_slice(&qkv, tokens, d, 0, h, hd);
            let k = head_slice(&qkv, tokens, d, 1, h, hd);
            let v = head_slice(&qkv, tokens, d, 2, h, hd);
            let p = &mut probs[h * tokens * tokens..(h + 1) * tokens * tokens];
            gemm(false, true, tokens, tokens, hd, scale, &q, &k, T::zero(), p);
            softmax_rows(p, tokens);
            prec.round(p);
            let mut o = vec![T::zero(); tokens * hd];
            gemm(false, false, tokens, hd, tokens, T::one(), p, &v, T::zero(), &mut o);
            for t in 0..tokens {
                context[t * d + h * hd..t * d + (h + 1) * hd].copy_from_slice(&o[t * hd..(t + 1) * hd]);
            }
        }
        prec.round(&mut context);
        let out = self.proj.forward(&context, tokens, prec);
        (
            out,
            AttentionCache {
                input: x.to_vec(),
                qkv,
                probs,
                context,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: &[T], tokens: usize, prec: Precision) -> Vec<T> {
        let (d, hd) = (self.dim, self.dim / self.heads);
        let scale = T::c(1.0 / (hd as f64).sqrt());
        let dctx = self
            .proj
            .backward(&cache.context, tokens, dy, prec, true)
            .expect("input gradient requested");
        let mut dqkv = vec![T::zero(); tokens * 3 * d];
        for h in 0..self.heads {
            let q = head_slice(&cache.qkv, tokens, d, 0, h, hd);
            let k = head_slice(&cache.qkv, tokens, d, 1, h, hd);
            let v = head_slice(&cache.qkv, tokens, d, 2, h, hd);
            let p = &cache.probs[h * tokens * tokens..(h + 1) * tokens * tokens];
            let mut dout = Vec::with_capacity(tokens * hd);
            for t in 0..tokens {
                dout.extend_from_slice(&dctx[t * d + h * hd..t * d + (h + 1) * hd]);
            }
            // dV = Pᵀ dO, dP = dO Vᵀ
            let mut dv = vec![T::zero(); tokens * hd];
            gemm(true, false, tokens, hd, tokens, T::one(), p, &dout, T::zero(), &mut dv);
            let mut dp = vec![T::zero(); tokens * tokens];
            gemm(false, true, tokens, tokens, hd, T::one(), &dout, &v, T::zero(), &mut dp);
            // softmax backward, folded with the score scale
            for r in 0..tokens {
                let prow = &p[r * tokens..(r + 1) * tokens];
                let drow = &mut dp[r * tokens..(r + 1) * tokens];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in drow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            let mut dq = vec![T::zero(); tokens * hd];
            gemm(false, false, tokens, hd, tokens, T::one(), &dp, &k, T::zero(), &mut dq);
            let mut dk = vec![T::zero(); tokens * hd];
            gemm(true, false, tokens, hd, tokens, T::one(), &dp, &q, T::zero(), &mut dk);
            for t in 0..tokens {
                for (part, src) in [(0, &dq), (1, &dk), (2, &dv)] {
                    let base = t * 3 * d + part * d + h * hd;
                    dqkv[base..base + hd].copy_from_slice(&src[t * hd..(t + 1) * hd]);
                }
            }
        }
        prec.round(&mut dqkv);
        self.qkv
            .backward(&cache.input, tokens, &dqkv, prec, true)
            .expect("input gradient requested")
    }
}

impl<T: Scalar> Module<T> for Attention<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.qkv.visit_params(&join(prefix, "qkv"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.qkv.visit_params_mut(&join(prefix, "qkv"), f);
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))` then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    n1: NormCache<T>,
    attn: AttentionCache<T>,
    n2: NormCache<T>,
    n2_out: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize, init: &mut Init) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(dim, heads, init),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, dim * mlp_ratio, init),
            fc2: Linear::new(dim * mlp_ratio, dim, init),
        }
    }

    pub fn forward(&self, x: &[T], tokens: usize, prec: Precision) -> (Vec<T>, BlockCache<T>) {
        let (n1_out, n1) = self.norm1.forward(x, prec);
        let (a, attn) = self.attn.forward(&n1_out, tokens, prec);
        let mut x1: Vec<T> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();
        prec.round(&mut x1);
        let (n2_out, n2) = self.norm2.forward(&x1, prec);
        let hidden_pre = self.fc1.forward(&n2_out, tokens, prec);
        let mut hidden = gelu(&hidden_pre);
        prec.round(&mut hidden);
        let m = self.fc2.forward(&hidden, tokens, prec);
        let mut y: Vec<T> = x1.iter().zip(&m).map(|(&u, &v)| u + v).collect();
        prec.round(&mut y);
        (
            y,
            BlockCache {
                n1,
                attn,
                n2,
                n2_out,
                hidden_pre,
                hidden,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: &[T], tokens: usize, prec: Precision) -> Vec<T> {
        let dh = self.fc2.backward(&cache.hidden, tokens, dy, prec, true).unwrap();
        let mut dpre = gelu_backward(&cache.hidden_pre, &dh);
        prec.round(&mut dpre);
        let dn2 = self.fc1.backward(&cache.n2_out, tokens, &dpre, prec, true).unwrap();
        let dx1_norm = self.norm2.backward(&cache.n2, &dn2, prec);
        let dx1: Vec<T> = dy.iter().zip(&dx1_norm).map(|(&a, &b)| a + b).collect();
        let dn1 = self.attn.backward(&cache.attn, &dx1, tokens, prec);
        let dx_norm = self.norm1.backward(&cache.n1, &dn1, prec);
        let mut dx: Vec<T> = dx1.iter().zip(&dx_norm).map(|(&a, &b)| a + b).collect();
        prec.round(&mut dx);
        dx
    }
}

impl<T: Scalar> Module<T> for TransformerBlock<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.norm1.visit_params_mut(&join(prefix, "norm1"), f);
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
        self.norm2.visit_params_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check<M: FnMut(&mut TransformerBlock<f64>) -> f64>(
        block: &mut TransformerBlock<f64>,
        analytic: &[(String, Vec<f64>)],
        mut loss: M,
    ) {
        let h = 1e-6;
        for (name, grad) in analytic {
            for idx in [0usize, grad.len() / 3, grad.len() - 1] {
                let bump = |b: &mut TransformerBlock<f64>, delta: f64| {
                    b.visit_params_mut("", &mut |n, p| {
                        if &n == name {
                            p.value[idx] += delta;
                        }
                    });
                };
                bump(block, h);
                let up = loss(block);
                bump(block, -2.0 * h);
                let down = loss(block);
                bump(block, h);
                let num = (up - down) / (2.0 * h);
                let a = grad[idx];
                let tol = 1e-5 * a.abs().max(num.abs()) + 1e-8;
                assert!((a - num).abs() < tol, "{name}[{idx}]: analytic {a} numeric {num}");
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (tokens, dim) = (5, 8);
        let mut init = Init::new(11);
        let mut block = TransformerBlock::<f64>::new(dim, 2, 2, &mut init);
        let x: Vec<f64> = init.normal(tokens * dim, 1.0);
        let w: Vec<f64> = init.normal(tokens * dim, 1.0);
        let loss = |b: &mut TransformerBlock<f64>| {
            let (y, _) = b.forward(&x, tokens, Precision::Float32);
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = block.forward(&x, tokens, Precision::Float32);
        let dx = block.backward(&cache, &w, tokens, Precision::Float32);
        let analytic: Vec<(String, Vec<f64>)> = block
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.grad.clone()))
            .collect();
        fd_check(&mut block, &analytic, loss);

        let h = 1e-6;
        for i in [0, 7, 21, 39] {
            let mut a = x.clone();
            a[i] += h;
            let mut b = x.clone();
            b[i] -= h;
            let f = |x: &[f64]| {
                let (y, _) = block.forward(x, tokens, Precision::Float32);
                y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            };
            let num = (f(&a) - f(&b)) / (2.0 * h);
            assert!((dx[i] - num).abs() < 1e-6 * num.abs().max(1.0));
        }
    }
}
