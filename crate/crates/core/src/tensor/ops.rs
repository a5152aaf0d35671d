//! Elementwise, reduction and shape ops.

use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Elementwise map with derivative `df(x, y)` expressed via input and output.
    fn unary(&self, name: &'static str, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            name,
            vec![self.clone()],
            Box::new(move |g, out, p| {
                let x = p[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(out))
                        .map(|(&g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "add",
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "sub",
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "mul",
            vec![self.clone(), other.clone()],
            Box::new(|g, _, p| {
                let (a, b) = (p[0].data(), p[1].data());
                let ga = p[0]
                    .requires_grad()
                    .then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect());
                let gb = p[1]
                    .requires_grad()
                    .then(|| g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    /// Multiplies by a scalar that may itself carry a tangent.
    pub fn scale_by(&self, c: T) -> Tensor<T> {
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::from_f64(0.5) / y)
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| T::from_f64(2.0) * x)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        let a = T::from_f64(slope);
        self.unary(
            "leaky_relu",
            move |x| if x.primal() > 0.0 { x } else { a * x },
            move |x, _| if x.primal() > 0.0 { T::one() } else { a },
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor<T> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// Clamp to `[lo, hi]`; the gradient is passed through inside the range only.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(
            "clamp",
            move |x| {
                if x.primal() < lo {
                    l
                } else if x.primal() > hi {
                    h
                } else {
                    x
                }
            },
            move |x, _| {
                if x.primal() < lo || x.primal() > hi {
                    T::zero()
                } else {
                    T::one()
                }
            },
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![1],
            "sum",
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// `[N, ...] -> [N]`, summing everything but the leading axis.
    pub fn sum_per_sample(&self) -> Tensor<T> {
        let n = self.shape()[0];
        let m = self.numel() / n;
        let data: Vec<T> = self.data().chunks(m).map(|c| c.iter().copied().sum()).collect();
        Tensor::from_op(
            data,
            vec![n],
            "sum_per_sample",
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().flat_map(|&v| std::iter::repeat(v).take(m)).collect())]),
        )
    }

    /// `[N, C, H, W] -> [N, C]`, averaging over the spatial axes.
    pub fn mean_spatial(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::dim("mean_spatial", s, &[0, 0, 0, 0]));
        }
        let hw = s[2] * s[3];
        let inv = T::from_f64(1.0 / hw as f64);
        let data: Vec<T> = self
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(Tensor::from_op(
            data,
            vec![s[0], s[1]],
            "mean_spatial",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                vec![Some(
                    g.iter().flat_map(|&v| std::iter::repeat(v * inv).take(hw)).collect(),
                )]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::dim("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Adds a per-(sample, channel) vector `[N, C]` to every spatial
    /// position of `[N, C, H, W]`.
    pub fn broadcast_add_channels(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || v.shape() != [s[0], s[1]] {
            return Err(Error::dim("broadcast_add_channels", s, v.shape()));
        }
        let hw = s[2] * s[3];
        let mut data = self.to_vec();
        {
            let vd = v.data();
            for (plane, &b) in data.chunks_mut(hw).zip(vd.iter()) {
                plane.iter_mut().for_each(|x| *x += b);
            }
        }
        Ok(Tensor::from_op(
            data,
            s.to_vec(),
            "broadcast_add_channels",
            vec![self.clone(), v.clone()],
            Box::new(move |g, _, p| {
                let gv = p[1]
                    .requires_grad()
                    .then(|| g.chunks(hw).map(|c| c.iter().copied().sum()).collect());
                vec![Some(g.to_vec()), gv]
            }),
        ))
    }

    /// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let s0 = first.shape().to_vec();
        if s0.len() != 4 {
            return Err(Error::dim("concat_channels", &s0, &[4]));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::dim("concat_channels", &s0, s));
            }
        }
        let (n, hw) = (s0[0], s0[2] * s0[3]);
        let chans: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(n * total * hw);
        for i in 0..n {
            for (p, &c) in parts.iter().zip(&chans) {
                data.extend_from_slice(&p.data()[i * c * hw..(i + 1) * c * hw]);
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![n, total, s0[2], s0[3]],
            "concat_channels",
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g, _, _| {
                let mut grads: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(n * c * hw)).collect();
                for i in 0..n {
                    let mut off = i * total * hw;
                    for (gp, &c) in grads.iter_mut().zip(&chans) {
                        gp.extend_from_slice(&g[off..off + c * hw]);
                        off += c * hw;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Row-wise inner product of two `[N, F]` tensors, giving `[N]`.
    pub fn rows_dot(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("rows_dot", self, other)?;
        if self.shape().len() != 2 {
            return Err(Error::dim("rows_dot", self.shape(), &[0, 0]));
        }
        let f = self.shape()[1];
        let data: Vec<T> = self
            .data()
            .chunks(f)
            .zip(other.data().chunks(f))
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x * y).sum())
            .collect();
        Ok(Tensor::from_op(
            data,
            vec![self.shape()[0]],
            "rows_dot",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let (a, b) = (p[0].data(), p[1].data());
                let scaled = |src: &[T]| -> Vec<T> {
                    src.chunks(f)
                        .zip(g)
                        .flat_map(|(row, &gi)| row.iter().map(move |&v| v * gi))
                        .collect()
                };
                vec![
                    p[0].requires_grad().then(|| scaled(&b)),
                    p[1].requires_grad().then(|| scaled(&a)),
                ]
            }),
        ))
    }

    /// Scales each row of `[N, F]` to unit length: `x / (‖x‖ + 1e-12)`.
    pub fn l2_normalize_rows(&self) -> Result<Tensor<T>> {
        const EPS: f64 = 1e-12;
        if self.shape().len() != 2 {
            return Err(Error::dim("l2_normalize_rows", self.shape(), &[0, 0]));
        }
        let f = self.shape()[1];
        let norms: Vec<T> = self
            .data()
            .chunks(f)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let data: Vec<T> = self
            .data()
            .chunks(f)
            .zip(&norms)
            .flat_map(|(r, &n)| {
                let s = n + T::from_f64(EPS);
                r.iter().map(move |&v| v / s)
            })
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "l2_normalize_rows",
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut out = Vec::with_capacity(g.len());
                for ((gr, yr), &n) in g.chunks(f).zip(y.chunks(f)).zip(&norms) {
                    let s = n + T::from_f64(EPS);
                    if n.primal() == 0.0 {
                        out.extend(gr.iter().map(|&v| v / s));
                        continue;
                    }
                    // dx = g/s - (y·g) · y · n / s²   (with y = x/s)
                    let yg: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    let c = yg * n / (s * s);
                    out.extend(gr.iter().zip(yr).map(|(&gv, &yv)| gv / s - c * yv));
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let s = self.shape().to_vec();
        let (b, r, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::dim("transpose_last2", &s, &[0, 0, 0])),
        };
        let tr = move |src: &[T], rows: usize, cols: usize| -> Vec<T> {
            let mut out = vec![T::zero(); src.len()];
            for bi in 0..b {
                let base = bi * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        out[base + j * rows + i] = src[base + i * cols + j];
                    }
                }
            }
            out
        };
        let data = tr(&self.data(), r, c);
        let mut shape = s.clone();
        let k = shape.len();
        shape.swap(k - 2, k - 1);
        Ok(Tensor::from_op(
            data,
            shape,
            "transpose_last2",
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(tr(g, c, r))]),
        ))
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x.primal() >= 0.0 {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + e^{-|x|})
    if x.primal() > 0.0 {
        x + (T::one() + (-x).exp()).ln()
    } else {
        (T::one() + x.exp()).ln()
    }
}
