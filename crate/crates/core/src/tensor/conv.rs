//! 2-D convolution (im2col + GEMM) and ×2 resampling.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

fn im2col<T: Scalar>(x: &[T], g: Geom) -> Vec<T> {
    let (l, ncols) = (g.oh * g.ow, g.cols());
    let mut cols = vec![T::zero(); g.rows() * ncols];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let base = n * l + oh * g.ow;
                        for ow in 0..g.ow {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[base + ow] = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: Geom) -> Vec<T> {
    let (l, ncols) = (g.oh * g.ow, g.cols());
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &mut x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let base = n * l + oh * g.ow;
                        for ow in 0..g.ow {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst_row[iw as usize] += src[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl<T: Scalar> Tensor<T> {
    /// Cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in, k, k]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::dim("conv2d", xs, ws));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(Error::dim("conv2d(bias)", ws, b.shape()));
            }
        }
        if stride == 0 || ws[2] == 0 {
            return Err(Error::Config("conv2d needs stride >= 1 and k >= 1".into()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < k || span_w < k || (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
            return Err(Error::dim("conv2d(output size not integral)", xs, ws));
        }
        let g = Geom {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad: padding,
            oh: (span_h - k) / stride + 1,
            ow: (span_w - k) / stride + 1,
        };
        let (l, rows, ncols) = (g.oh * g.ow, g.rows(), g.cols());
        let cols = im2col(&self.data(), g);
        let mut y = vec![T::zero(); o * ncols];
        T::gemm(
            o,
            rows,
            ncols,
            &weight.data(),
            rows as isize,
            1,
            &cols,
            ncols as isize,
            1,
            &mut y,
            ncols as isize,
            1,
            false,
        );

        // [O, N·L] -> [N, O, L] (+ bias)
        let mut out = vec![T::zero(); n * o * l];
        {
            let bd = bias.map(|b| b.data());
            for oc in 0..o {
                let b = bd.as_ref().map_or(T::zero(), |b| b[oc]);
                for ni in 0..n {
                    let src = &y[oc * ncols + ni * l..oc * ncols + (ni + 1) * l];
                    let dst = &mut out[(ni * o + oc) * l..(ni * o + oc + 1) * l];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + b);
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Ok(Tensor::from_op(
            out,
            vec![n, o, g.oh, g.ow],
            "conv2d",
            parents,
            Box::new(move |gout, _, p| {
                let mut gy = vec![T::zero(); o * ncols];
                for oc in 0..o {
                    for ni in 0..n {
                        gy[oc * ncols + ni * l..oc * ncols + (ni + 1) * l]
                            .copy_from_slice(&gout[(ni * o + oc) * l..(ni * o + oc + 1) * l]);
                    }
                }
                let gx = p[0].requires_grad().then(|| {
                    let mut gcols = vec![T::zero(); rows * ncols];
                    T::gemm(
                        rows,
                        o,
                        ncols,
                        &p[1].data(),
                        1,
                        rows as isize,
                        &gy,
                        ncols as isize,
                        1,
                        &mut gcols,
                        ncols as isize,
                        1,
                        false,
                    );
                    col2im(&gcols, g)
                });
                let gw = p[1].requires_grad().then(|| {
                    let mut gw = vec![T::zero(); o * rows];
                    T::gemm(
                        o,
                        ncols,
                        rows,
                        &gy,
                        ncols as isize,
                        1,
                        &cols,
                        1,
                        ncols as isize,
                        &mut gw,
                        rows as isize,
                        1,
                        false,
                    );
                    gw
                });
                let mut res = vec![gx, gw];
                if p.len() == 3 {
                    res.push(
                        p[2].requires_grad()
                            .then(|| gy.chunks(ncols).map(|r| r.iter().copied().sum()).collect()),
                    );
                }
                res
            }),
        ))
    }

    /// Nearest-neighbour ×2 upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::dim("upsample2x", s, &[0, 0, 0, 0]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        {
            let x = self.data();
            for pl in 0..planes {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        out[pl * 4 * h * w + i * 2 * w + j] = x[pl * h * w + (i / 2) * w + j / 2];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![s[0], s[1], 2 * h, 2 * w],
            "upsample2x",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); planes * h * w];
                for pl in 0..planes {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gx[pl * h * w + (i / 2) * w + j / 2] += g[pl * 4 * h * w + i * 2 * w + j];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// 2×2 average pooling with stride 2 of `[N, C, H, W]` (H, W even).
    pub fn avg_pool2x(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::dim("avg_pool2x", s, &[0, 0, 2, 2]));
        }
        let (planes, oh, ow) = (s[0] * s[1], s[2] / 2, s[3] / 2);
        let w = s[3];
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); planes * oh * ow];
        {
            let x = self.data();
            for pl in 0..planes {
                let base = pl * 4 * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let a = base + 2 * i * w + 2 * j;
                        out[pl * oh * ow + i * ow + j] = (x[a] + x[a + 1] + x[a + w] + x[a + w + 1]) * quarter;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![s[0], s[1], oh, ow],
            "avg_pool2x",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); planes * 4 * oh * ow];
                for pl in 0..planes {
                    let base = pl * 4 * oh * ow;
                    for i in 0..oh {
                        for j in 0..ow {
                            let v = g[pl * oh * ow + i * ow + j] * quarter;
                            let a = base + 2 * i * w + 2 * j;
                            gx[a] += v;
                            gx[a + 1] += v;
                            gx[a + w] += v;
                            gx[a + w + 1] += v;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
