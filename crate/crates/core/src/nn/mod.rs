//! A small dense-layer engine with explicit backward passes.
//!
//! Every layer works on one sample at a time with row-major buffers and
//! accumulates parameter gradients into its [`Param`]s; batching is done by
//! the caller through gradient accumulation. Matrix products go through
//! `matrixmultiply`. Models are generic over [`Scalar`] so the same code
//! runs in `f32` for training and `f64` for gradient checks.

pub mod attention;
pub mod conv;
pub mod init;
pub mod linear;
pub mod norm;
pub mod ops;

use std::borrow::Cow;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use attention::{Attention, TransformerBlock};
pub use conv::{Conv2d, ConvTranspose2x2};
pub use linear::Linear;
pub use norm::{GroupNorm, LayerNorm};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Tag used in checkpoint containers.
    const DTYPE: safetensors::Dtype;

    /// `c = alpha * a·b + beta * c` on raw strided views.
    ///
    /// # Safety
    /// The strides must address memory inside the provided buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Round to the nearest bfloat16-representable value.
    fn round_bf16(self) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
}

impl Scalar for f32 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F32;

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn round_bf16(self) -> f32 {
        half::bf16::from_f32(self).to_f32()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F64;

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn round_bf16(self) -> f64 {
        half::bf16::from_f64(self).to_f64()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major `c (m×n) = alpha · op(a) · op(b) + beta · c`.
///
/// `a` is stored `m×k`, or `k×m` when `trans_a`; `b` is stored `k×n`, or
/// `n×k` when `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs has wrong length");
    assert_eq!(b.len(), k * n, "gemm: rhs has wrong length");
    assert_eq!(c.len(), m * n, "gemm: output has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths were checked above and the strides describe dense
    // row-major storage of exactly those shapes.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Arithmetic precision of forward and backward tensor math.
///
/// `BFloat16` keeps `f32` master weights and optimizer state but rounds
/// weights, activations and propagated gradients to bfloat16 at every layer
/// boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Float32,
    BFloat16,
}

impl Precision {
    pub fn is_reduced(self) -> bool {
        self == Precision::BFloat16
    }

    pub fn round<T: Scalar>(self, xs: &mut [T]) {
        if self.is_reduced() {
            xs.iter_mut().for_each(|x| *x = x.round_bf16());
        }
    }

    pub fn weights<T: Scalar>(self, w: &[T]) -> Cow<'_, [T]> {
        if self.is_reduced() {
            Cow::Owned(w.iter().map(|x| x.round_bf16()).collect())
        } else {
            Cow::Borrowed(w)
        }
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            grad: vec![T::zero(); value.len()],
            value,
            shape: shape.to_vec(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self::new(shape, vec![v; shape.iter().product()])
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything that owns named parameters.
pub trait Module<T: Scalar> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>));

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |n, p| out.push((n, p)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.numel());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        self.visit_params("", &mut |name, p| {
            hasher.update(name.as_bytes());
            for d in &p.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            p.value.iter().for_each(|v| v.write_le(&mut buf));
            hasher.update(&buf);
        });
        hex::encode(hasher.finalize())
    }
}

/// Join a parameter path.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
