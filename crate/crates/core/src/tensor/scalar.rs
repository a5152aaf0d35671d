//! Numeric element types for the autodiff engine.
//!
//! Every op is written once against [`Scalar`]. Plain `f32`/`f64` give the
//! usual first-order engine; [`Dual`] carries a forward-mode tangent through
//! the same ops, which is how second-order quantities (the R1 penalty's
//! weight gradient) are obtained by forward-over-reverse.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    /// Short dtype tag used in checkpoints and logs.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    /// Value of the real (primal) part.
    fn primal(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }

    /// `C = A·B` (or `C += A·B` when `accumulate`), all matrices given by
    /// row/column strides into their slices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
        accumulate: bool,
    );
}

/// Real floating point types with a fast GEMM kernel and a byte encoding.
pub trait Real: Scalar + PartialOrd {
    const BYTES: usize;
    fn to_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $tag:expr) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $tag;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn primal(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: extents of all three operands were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }

        impl Real for $t {
            const BYTES: usize = std::mem::size_of::<$t>();
            fn to_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn from_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_real!(f64, matrixmultiply::dgemm, "f64");
impl_real!(f32, matrixmultiply::sgemm, "f32");

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm operand out of bounds: {last} >= {len}");
}

/// Dual number `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual<F> {
    pub re: F,
    pub eps: F,
}

impl<F: Real> Dual<F> {
    pub fn new(re: F, eps: F) -> Self {
        Self { re, eps }
    }
    pub fn constant(re: F) -> Self {
        Self { re, eps: F::zero() }
    }
}

impl<F: Real> Add for Dual<F> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.eps + o.eps)
    }
}
impl<F: Real> Sub for Dual<F> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.eps - o.eps)
    }
}
impl<F: Real> Mul for Dual<F> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}
impl<F: Real> Div for Dual<F> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let q = self.re / o.re;
        Self::new(q, (self.eps - q * o.eps) / o.re)
    }
}
impl<F: Real> Neg for Dual<F> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.re, -self.eps)
    }
}
impl<F: Real> AddAssign for Dual<F> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}
impl<F: Real> SubAssign for Dual<F> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}
impl<F: Real> MulAssign for Dual<F> {
    #[inline]
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}
impl<F: Real> DivAssign for Dual<F> {
    #[inline]
    fn div_assign(&mut self, o: Self) {
        *self = *self / o;
    }
}
impl<F: Real> Sum for Dual<F> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

impl<F: Real> Scalar for Dual<F> {
    const DTYPE: &'static str = "dual";

    fn from_f64(v: f64) -> Self {
        Self::constant(F::from_f64(v))
    }
    fn primal(self) -> f64 {
        self.re.primal()
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Self::new(e, e * self.eps)
    }
    fn ln(self) -> Self {
        Self::new(self.re.ln(), self.eps / self.re)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Self::new(s, self.eps / (F::from_f64(2.0) * s))
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // Gather into dense row-major real/tangent planes, then three real GEMMs.
        let gather = |src: &[Self], rows: usize, cols: usize, rs: isize, cs: isize| {
            let mut re = Vec::with_capacity(rows * cols);
            let mut ep = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    let v = src[i * rs as usize + j * cs as usize];
                    re.push(v.re);
                    ep.push(v.eps);
                }
            }
            (re, ep)
        };
        let (are, aep) = gather(a, m, k, rsa, csa);
        let (bre, bep) = gather(b, k, n, rsb, csb);
        let (mut cre, mut cep) = if accumulate {
            gather(c, m, n, rsc, csc)
        } else {
            (vec![F::zero(); m * n], vec![F::zero(); m * n])
        };
        let (ki, ni) = (k as isize, n as isize);
        F::gemm(m, k, n, &are, ki, 1, &bre, ni, 1, &mut cre, ni, 1, accumulate);
        F::gemm(m, k, n, &are, ki, 1, &bep, ni, 1, &mut cep, ni, 1, accumulate);
        F::gemm(m, k, n, &aep, ki, 1, &bre, ni, 1, &mut cep, ni, 1, true);
        for i in 0..m {
            for j in 0..n {
                c[i * rsc as usize + j * csc as usize] = Self::new(cre[i * n + j], cep[i * n + j]);
            }
        }
    }
}
