//! Forward oracles and finite-difference gradient checks for the tensor ops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smoothswap::gradcheck::check_gradients;
use smoothswap::optim::{adam_update, AdamConfig};
use smoothswap::tensor::RunningStats;
use smoothswap::Tensor;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;
const INSTANCES: u64 = 20;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(rand_vec(rng, n), shape).unwrap()
}

fn assert_grads(name: &str, inputs: &[Tensor<f64>], f: &dyn Fn() -> smoothswap::Result<Tensor<f64>>) {
    let rep = check_gradients(inputs, f, H).unwrap();
    assert!(
        rep.max_rel_error < TOL,
        "{name}: relative error {:.3e} (per input {:?})",
        rep.max_rel_error,
        rep.rel_errors
    );
}

/// Random projection so every output element contributes to the scalar.
fn project(y: &Tensor<f64>, seed: u64) -> smoothswap::Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_f64(&rand_vec(&mut rng, y.numel()), y.shape())?;
    Ok(y.mul(&w)?.sum())
}

fn direct_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let [o, _, k, _] = ws;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[oc];
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ih = (i * stride + ki) as isize - pad as isize;
                                let iw = (j * stride + kj) as isize - pad as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                    acc += x[((ni * c + ci) * h + ih as usize) * wd + iw as usize]
                                        * w[((oc * c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out[((ni * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = rand_vec(&mut rng, 2 * 4 * 4);
        let w = rand_vec(&mut rng, 3 * 2 * 9);
        let b = rand_vec(&mut rng, 3);
        let xt = Tensor::<f64>::from_f64(&x, &[1, 2, 4, 4]).unwrap();
        let wt = Tensor::from_f64(&w, &[3, 2, 3, 3]).unwrap();
        let bt = Tensor::from_f64(&b, &[3]).unwrap();
        let y = xt.conv2d(&wt, Some(&bt), stride, pad);
        let Ok(y) = y else { continue };
        let expect = direct_conv(&x, [1, 2, 4, 4], &w, [3, 2, 3, 3], &b, stride, pad);
        for (a, e) in y.to_vec().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {e}");
        }
    }
}

#[test]
fn linear_matches_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_vec(&mut rng, 6);
    let w = rand_vec(&mut rng, 12);
    let b = rand_vec(&mut rng, 4);
    let y = Tensor::<f64>::from_f64(&x, &[2, 3])
        .unwrap()
        .linear(
            &Tensor::from_f64(&w, &[4, 3]).unwrap(),
            Some(&Tensor::from_f64(&b, &[4]).unwrap()),
        )
        .unwrap()
        .to_vec();
    for i in 0..2 {
        for o in 0..4 {
            let e: f64 = b[o] + (0..3).map(|j| x[i * 3 + j] * w[o * 3 + j]).sum::<f64>();
            assert!((y[i * 4 + o] - e).abs() < 1e-12);
        }
    }
}

#[test]
fn group_norm_output_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::<f64>::from_f64(&rand_vec(&mut rng, 2 * 6 * 3 * 3), &[2, 6, 3, 3]).unwrap();
    let y = x
        .group_norm(3, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6]), 1e-12)
        .unwrap()
        .to_vec();
    for g in y.chunks(2 * 9) {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        let v = g.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / g.len() as f64;
        assert!(m.abs() < 1e-10);
        assert!((v - 1.0).abs() < 1e-6);
    }
}

#[test]
fn batch_norm_output_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::<f64>::from_f64(&rand_vec(&mut rng, 8 * 5), &[8, 5]).unwrap();
    let st = RunningStats::new(5);
    let y = x
        .batch_norm(&st, &Tensor::full(&[5], 1.0), &Tensor::zeros(&[5]), true, 1e-12)
        .unwrap()
        .to_vec();
    for j in 0..5 {
        let col: Vec<f64> = (0..8).map(|i| y[i * 5 + j]).collect();
        let m = col.iter().sum::<f64>() / 8.0;
        let v = col.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
    }
}

#[test]
fn adam_matches_scalar_reference() {
    // hand-rolled scalar Adam
    let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
    let grads = [0.5, -1.25, 2.0];
    let (mut p, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
    }
    let cfg = AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    };
    let (mut pp, mut mm, mut vv) = ([0.3f64], [0.0], [0.0]);
    for (t, g) in grads.iter().enumerate() {
        adam_update(&mut pp, &[*g], &mut mm, &mut vv, t as u64 + 1, &cfg, lr);
    }
    assert!((pp[0] - p).abs() < 1e-12);
}

#[test]
fn gradcheck_elementwise_ops() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
        let a = leaf(&mut rng, &[2, 3]);
        let b = leaf(&mut rng, &[2, 3]);
        let pos = Tensor::param(rand_vec(&mut rng, 6).iter().map(|v| v.abs() + 0.2).collect(), &[2, 3]).unwrap();
        assert_grads("add", &[a.clone(), b.clone()], &|| project(&a.add(&b)?, s));
        assert_grads("sub", &[a.clone(), b.clone()], &|| project(&a.sub(&b)?, s));
        assert_grads("mul", &[a.clone(), b.clone()], &|| project(&a.mul(&b)?, s));
        assert_grads("scale", &[a.clone()], &|| project(&a.scale(-1.7).add_scalar(0.3), s));
        assert_grads("exp", &[a.clone()], &|| project(&a.exp(), s));
        assert_grads("ln", &[pos.clone()], &|| project(&pos.ln(), s));
        assert_grads("sqrt", &[pos.clone()], &|| project(&pos.sqrt(), s));
        assert_grads("silu", &[a.clone()], &|| project(&a.scale(3.0).silu(), s));
        assert_grads("leaky_relu", &[a.clone()], &|| project(&a.leaky_relu(0.2), s));
        assert_grads("sigmoid", &[a.clone()], &|| project(&a.scale(4.0).sigmoid(), s));
        assert_grads("softplus", &[a.clone()], &|| project(&a.scale(5.0).softplus(), s));
        assert_grads("mean", &[a.clone()], &|| Ok(a.square().mean()));
        assert_grads("sum_per_sample", &[a.clone()], &|| project(&a.sum_per_sample(), s));
        assert_grads("rows_dot", &[a.clone(), b.clone()], &|| project(&a.rows_dot(&b)?, s));
        assert_grads("l2_normalize", &[a.clone()], &|| project(&a.l2_normalize_rows()?, s));
        assert_grads("transpose", &[a.clone()], &|| project(&a.transpose_last2()?, s));
        assert_grads("softmax", &[a.clone()], &|| project(&a.scale(2.0).softmax_last(), s));
        let labels = [rng.gen_range(0..3), rng.gen_range(0..3)];
        assert_grads("cross_entropy", &[a.clone()], &|| {
            a.scale(3.0).softmax_cross_entropy(&labels)
        });
    }
}

#[test]
fn gradcheck_linear_algebra() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + s);
        let a = leaf(&mut rng, &[3, 4]);
        let b = leaf(&mut rng, &[4, 2]);
        let w = leaf(&mut rng, &[5, 4]);
        let bias = leaf(&mut rng, &[5]);
        assert_grads("matmul", &[a.clone(), b.clone()], &|| project(&a.matmul(&b)?, s));
        assert_grads("linear", &[a.clone(), w.clone(), bias.clone()], &|| {
            project(&a.linear(&w, Some(&bias))?, s)
        });
        let p = leaf(&mut rng, &[2, 3, 4]);
        let q = leaf(&mut rng, &[2, 4, 3]);
        assert_grads("bmm", &[p.clone(), q.clone()], &|| project(&p.bmm(&q)?, s));
    }
}

#[test]
fn gradcheck_spatial_ops() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + s);
        let x = leaf(&mut rng, &[2, 3, 4, 4]);
        let w = leaf(&mut rng, &[2, 3, 3, 3]);
        let b = leaf(&mut rng, &[2]);
        assert_grads("conv2d", &[x.clone(), w.clone(), b.clone()], &|| {
            project(&x.conv2d(&w, Some(&b), 1, 1)?, s)
        });
        let odd = leaf(&mut rng, &[1, 3, 5, 5]);
        assert_grads("conv2d(stride 2)", &[odd.clone(), w.clone()], &|| {
            project(&odd.conv2d(&w, None, 2, 1)?, s)
        });
        let w1 = leaf(&mut rng, &[4, 3, 1, 1]);
        assert_grads("conv1x1", &[x.clone(), w1.clone()], &|| {
            project(&x.conv2d(&w1, None, 1, 0)?, s)
        });
        assert_grads("upsample2x", &[x.clone()], &|| project(&x.upsample2x()?, s));
        assert_grads("avg_pool2x", &[x.clone()], &|| project(&x.avg_pool2x()?, s));
        let v = leaf(&mut rng, &[2, 3]);
        assert_grads("broadcast_add", &[x.clone(), v.clone()], &|| {
            project(&x.broadcast_add_channels(&v)?, s)
        });
        let y = leaf(&mut rng, &[2, 2, 4, 4]);
        assert_grads("concat", &[x.clone(), y.clone()], &|| {
            project(&Tensor::concat_channels(&[&x, &y])?, s)
        });
        assert_grads("mean_spatial", &[x.clone()], &|| project(&x.mean_spatial()?, s));
        assert_grads("reshape", &[x.clone()], &|| project(&x.reshape(&[2, 48])?, s));
    }
}

#[test]
fn gradcheck_normalization() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + s);
        let x = leaf(&mut rng, &[2, 4, 3, 3]);
        let g = leaf(&mut rng, &[4]);
        let b = leaf(&mut rng, &[4]);
        assert_grads("group_norm", &[x.clone(), g.clone(), b.clone()], &|| {
            project(&x.group_norm(2, &g, &b, 1e-5)?, s)
        });
        let f = leaf(&mut rng, &[6, 3]);
        let gf = leaf(&mut rng, &[3]);
        let bf = leaf(&mut rng, &[3]);
        let st = RunningStats::new(3);
        assert_grads("batch_norm(train)", &[f.clone(), gf.clone(), bf.clone()], &|| {
            project(&f.batch_norm(&st, &gf, &bf, true, 1e-5)?, s)
        });
        assert_grads("batch_norm(eval)", &[f.clone(), gf.clone(), bf.clone()], &|| {
            project(&f.batch_norm(&st, &gf, &bf, false, 1e-5)?, s)
        });
    }
}

#[test]
fn gradcheck_composite_network() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + s);
        let x = leaf(&mut rng, &[2, 2, 4, 4]);
        let w1 = leaf(&mut rng, &[4, 2, 3, 3]);
        let g = leaf(&mut rng, &[4]);
        let be = leaf(&mut rng, &[4]);
        let z = leaf(&mut rng, &[2, 4]);
        let wl = leaf(&mut rng, &[3, 16]);
        assert_grads(
            "network",
            &[x.clone(), w1.clone(), g.clone(), be.clone(), z.clone(), wl.clone()],
            &|| {
                let h = x.conv2d(&w1, None, 1, 1)?.group_norm(2, &g, &be, 1e-5)?.silu();
                let h = h.broadcast_add_channels(&z)?.avg_pool2x()?;
                let h = h.reshape(&[2, 16])?.linear(&wl, None)?.l2_normalize_rows()?;
                project(&h, s)
            },
        );
    }
}

#[test]
fn determinism_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = leaf(&mut rng, &[2, 3, 4, 4]);
        let w = leaf(&mut rng, &[2, 3, 3, 3]);
        let y = x.conv2d(&w, None, 1, 1).unwrap().silu().square().sum();
        y.backward().unwrap();
        (
            y.item().to_bits(),
            w.grad().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
