//! Group and batch normalization.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Running mean/variance buffers of a batch-norm layer (never trained by gradient).
#[derive(Debug, Clone)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(features: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[features]),
            var: Tensor::full(&[features], 1.0),
            momentum: 0.1,
        }
    }
}

/// Forward-pass values reused by the backward rule.
struct NormSaved<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Per-sample, per-group standardization followed by a per-channel affine.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::dim("group_norm", s, &[0, 0, 0, 0]));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim("group_norm(affine)", &[c], gamma.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Config("group_norm eps must be positive".into()));
        }
        let cpg = c / groups;
        let m = cpg * hw;
        let x = self.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(n * groups);
        for (src, dst) in x.chunks(m).zip(xhat.chunks_mut(m)) {
            let mean = src.iter().copied().sum::<T>() / T::from_f64(m as f64);
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::from_f64(m as f64);
            let is = T::one() / (var + T::from_f64(eps)).sqrt();
            dst.iter_mut().zip(src).for_each(|(d, &v)| *d = (v - mean) * is);
            inv_std.push(is);
        }
        drop(x);
        let out = affine(&xhat, &gamma.data(), &beta.data(), c, hw);
        let saved = NormSaved { xhat, inv_std };
        Ok(Tensor::from_op(
            out,
            s.to_vec(),
            "group_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _, p| {
                let (gg, gb) = affine_grads(g, &saved.xhat, c, hw);
                let gx = p[0].requires_grad().then(|| {
                    let gm = p[1].data();
                    let mut gx = vec![T::zero(); g.len()];
                    let mf = T::from_f64(m as f64);
                    for (gi, &is) in saved.inv_std.iter().enumerate() {
                        let range = gi * m..(gi + 1) * m;
                        let ch0 = (gi % groups) * cpg;
                        let dxh = |i: usize| g[i] * gm[ch0 + (i - range.start) / hw];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in range.clone() {
                            let d = dxh(i);
                            s1 += d;
                            s2 += d * saved.xhat[i];
                        }
                        let (s1, s2) = (s1 / mf, s2 / mf);
                        for i in range.clone() {
                            gx[i] = is * (dxh(i) - s1 - saved.xhat[i] * s2);
                        }
                    }
                    gx
                });
                vec![
                    gx,
                    p[1].requires_grad().then_some(gg),
                    p[2].requires_grad().then_some(gb),
                ]
            }),
        ))
    }

    /// Batch normalization of `[N, F]`. In training mode normalizes with
    /// batch statistics and updates `stats`; otherwise uses `stats`.
    pub fn batch_norm(
        &self,
        stats: &RunningStats<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        training: bool,
        eps: f64,
    ) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim("batch_norm", s, &[0, 0]));
        }
        let (n, f) = (s[0], s[1]);
        if gamma.shape() != [f] || beta.shape() != [f] || stats.mean.shape() != [f] {
            return Err(Error::dim("batch_norm(affine)", &[f], gamma.shape()));
        }
        if training && n < 2 {
            return Err(Error::BatchSize(n));
        }
        let x = self.to_vec();
        let (mean, var): (Vec<T>, Vec<T>) = if training {
            let nf = T::from_f64(n as f64);
            let mean: Vec<T> = (0..f).map(|j| (0..n).map(|i| x[i * f + j]).sum::<T>() / nf).collect();
            let var: Vec<T> = (0..f)
                .map(|j| {
                    (0..n)
                        .map(|i| (x[i * f + j] - mean[j]) * (x[i * f + j] - mean[j]))
                        .sum::<T>()
                        / nf
                })
                .collect();
            let mom = T::from_f64(stats.momentum);
            let unbias = T::from_f64(n as f64 / (n as f64 - 1.0));
            let mut rm = stats.mean.data_mut();
            let mut rv = stats.var.data_mut();
            for j in 0..f {
                rm[j] = (T::one() - mom) * rm[j] + mom * mean[j];
                rv[j] = (T::one() - mom) * rv[j] + mom * var[j] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.to_vec(), stats.var.to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
        let xhat: Vec<T> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % f]) * inv_std[i % f])
            .collect();
        // features play the role of channels with a spatial extent of 1
        let out = {
            let (gm, bt) = (gamma.data(), beta.data());
            xhat.iter()
                .enumerate()
                .map(|(i, &v)| gm[i % f] * v + bt[i % f])
                .collect()
        };
        let saved = NormSaved { xhat, inv_std };
        Ok(Tensor::from_op(
            out,
            s.to_vec(),
            "batch_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _, p| {
                let gm = p[1].data();
                let mut gg = vec![T::zero(); f];
                let mut gb = vec![T::zero(); f];
                for i in 0..g.len() {
                    gg[i % f] += g[i] * saved.xhat[i];
                    gb[i % f] += g[i];
                }
                let gx = p[0].requires_grad().then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    let nf = T::from_f64(n as f64);
                    for j in 0..f {
                        if training {
                            // per-feature: inv_std·(dx̂ − mean(dx̂) − x̂·mean(dx̂·x̂))
                            let s1 = gb[j] * gm[j] / nf;
                            let s2 = gg[j] * gm[j] / nf;
                            for i in 0..n {
                                let k = i * f + j;
                                gx[k] = saved.inv_std[j] * (g[k] * gm[j] - s1 - saved.xhat[k] * s2);
                            }
                        } else {
                            for i in 0..n {
                                let k = i * f + j;
                                gx[k] = g[k] * gm[j] * saved.inv_std[j];
                            }
                        }
                    }
                    gx
                });
                vec![
                    gx,
                    p[1].requires_grad().then_some(gg),
                    p[2].requires_grad().then_some(gb),
                ]
            }),
        ))
    }
}

fn affine<T: Scalar>(xhat: &[T], gamma: &[T], beta: &[T], c: usize, hw: usize) -> Vec<T> {
    xhat.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            gamma[ch] * v + beta[ch]
        })
        .collect()
}

fn affine_grads<T: Scalar>(g: &[T], xhat: &[T], c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for (i, (&gv, &xv)) in g.iter().zip(xhat).enumerate() {
        let ch = (i / hw) % c;
        gg[ch] += gv * xv;
        gb[ch] += gv;
    }
    (gg, gb)
}
