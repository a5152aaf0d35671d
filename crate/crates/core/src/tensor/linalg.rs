//! Matrix products and softmax.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tensor<T> {
    /// `[M, K] · [K, N] -> [M, N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::dim("matmul", a, b));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.data(),
            k as isize,
            1,
            &other.data(),
            n as isize,
            1,
            &mut out,
            n as isize,
            1,
            false,
        );
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let ga = p[0].requires_grad().then(|| {
                    // dA = G · Bᵀ
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        n as isize,
                        1,
                        &p[1].data(),
                        1,
                        n as isize,
                        &mut ga,
                        k as isize,
                        1,
                        false,
                    );
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    // dB = Aᵀ · G
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        &p[0].data(),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        &mut gb,
                        n as isize,
                        1,
                        false,
                    );
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map `x · Wᵀ + b` for `x: [N, F_in]`, `W: [F_out, F_in]`, `b: [F_out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (x, w) = (self.shape(), weight.shape());
        if x.len() != 2 || w.len() != 2 || x[1] != w[1] {
            return Err(Error::dim("linear", x, w));
        }
        if let Some(b) = bias {
            if b.shape() != [w[0]] {
                return Err(Error::dim("linear(bias)", w, b.shape()));
            }
        }
        let (n, fi, fo) = (x[0], x[1], w[0]);
        let mut out = vec![T::zero(); n * fo];
        if let Some(b) = bias {
            let bd = b.data();
            for row in out.chunks_mut(fo) {
                row.copy_from_slice(&bd);
            }
        }
        T::gemm(
            n,
            fi,
            fo,
            &self.data(),
            fi as isize,
            1,
            &weight.data(),
            1,
            fi as isize,
            &mut out,
            fo as isize,
            1,
            bias.is_some(),
        );
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Ok(Tensor::from_op(
            out,
            vec![n, fo],
            "linear",
            parents,
            Box::new(move |g, _, p| {
                let gx = p[0].requires_grad().then(|| {
                    // dX = G · W
                    let mut gx = vec![T::zero(); n * fi];
                    T::gemm(
                        n,
                        fo,
                        fi,
                        g,
                        fo as isize,
                        1,
                        &p[1].data(),
                        fi as isize,
                        1,
                        &mut gx,
                        fi as isize,
                        1,
                        false,
                    );
                    gx
                });
                let gw = p[1].requires_grad().then(|| {
                    // dW = Gᵀ · X
                    let mut gw = vec![T::zero(); fo * fi];
                    T::gemm(
                        fo,
                        n,
                        fi,
                        g,
                        1,
                        fo as isize,
                        &p[0].data(),
                        fi as isize,
                        1,
                        &mut gw,
                        fi as isize,
                        1,
                        false,
                    );
                    gw
                });
                let mut res = vec![gx, gw];
                if p.len() == 3 {
                    res.push(p[2].requires_grad().then(|| {
                        let mut gb = vec![T::zero(); fo];
                        for row in g.chunks(fo) {
                            gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                        }
                        gb
                    }));
                }
                res
            }),
        ))
    }

    /// Batched product `[B, M, K] · [B, K, N] -> [B, M, N]`.
    pub fn bmm(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[1] {
            return Err(Error::dim("bmm", a, b));
        }
        let (bs, m, k, n) = (a[0], a[1], a[2], b[2]);
        let mut out = vec![T::zero(); bs * m * n];
        {
            let (ad, bd) = (self.data(), other.data());
            for i in 0..bs {
                T::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &bd[i * k * n..(i + 1) * k * n],
                    n as isize,
                    1,
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                    false,
                );
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![bs, m, n],
            "bmm",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let (ad, bd) = (p[0].data(), p[1].data());
                let ga = p[0].requires_grad().then(|| {
                    let mut ga = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            &bd[i * k * n..(i + 1) * k * n],
                            1,
                            n as isize,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            k as isize,
                            1,
                            false,
                        );
                    }
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        T::gemm(
                            k,
                            m,
                            n,
                            &ad[i * m * k..(i + 1) * m * k],
                            1,
                            k as isize,
                            &g[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            n as isize,
                            1,
                            false,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<T> {
        let l = *self.shape().last().expect("tensor has at least one axis");
        let mut data = self.to_vec();
        for row in data.chunks_mut(l) {
            let mx = row.iter().map(|v| v.primal()).fold(f64::NEG_INFINITY, f64::max);
            let mx = T::from_f64(mx);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            "softmax",
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut out = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(l).zip(y.chunks(l)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    out.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                vec![Some(out)]
            }),
        )
    }
}
