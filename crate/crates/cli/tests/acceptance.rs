//! End-to-end acceptance run. Prints one verdict line per criterion.
//!
//! Failing criteria are reported, not fatal, unless
//! `SMOOTHSWAP_ACCEPTANCE_STRICT=1` is set. `SMOOTHSWAP_BLESS=1` rewrites the
//! golden metric report instead of comparing against it.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smoothswap::adversary::{self, Discriminator, DiscriminatorConfig};
use smoothswap::embedder::{self, Embedder, EmbedderConfig, EmbedderTrainConfig, Head};
use smoothswap::evaluate::{self, EvalConfig};
use smoothswap::generator::{count_skip_connections, Generator, GeneratorConfig};
use smoothswap::gradcheck::{check_gradients, numeric_grad, relative_error};
use smoothswap::metrics::{self, Direction, Reference};
use smoothswap::swap::{self, StepMetrics, SwapLossWeights, SwapTrainer, TrainRunConfig};
use smoothswap::synth::{Dataset, DatasetConfig, Split};
use smoothswap::tensor::RunningStats;
use smoothswap::{Result, Tensor};

const FD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const FD_INSTANCES: usize = 20;
const ANCHOR_TOL: f64 = 1e-9;
const ALGEBRA_TOL: f64 = 1e-9;
const AUC_FLOOR: f64 = 0.95;
const ID_DROP: f64 = 0.6;
const EMBED_LOSS_DROP: f64 = 0.5;
/// Mean L_chg ceiling, fixed from the pinned reference run (mean ≈ 0.035).
const CHG_BUDGET: f64 = 0.05;
const ATTRIBUTE_FACTOR: f64 = 3.0;
const SWAP_TRIPLES: usize = 200;

const EMBED_STEPS: u64 = 500;
const SWAP_STEPS: u64 = 1200;
const SWAP_WIDTH: usize = 16;
const CURVE_WINDOW: usize = 100;

struct Verdict {
    pass: bool,
    line: String,
}

fn verdict(id: u8, name: &str, pass: bool, detail: String, started: Instant) -> Verdict {
    let label = if id == 0 { "*".to_string() } else { format!("{id}.") };
    let line = format!(
        "[{}] {label} {name}: {detail} ({:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    println!("{line}");
    Verdict { pass, line }
}

fn failed(id: u8, name: &str, e: smoothswap::Error, started: Instant) -> Verdict {
    verdict(id, name, false, format!("error: {e}"), started)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    let mut v = rand_vec(rng, n * d);
    for row in v.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::param(rand_vec(rng, shape.iter().product()), shape).unwrap()
}

fn project(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_f64(&rand_vec(&mut rng, y.numel()), y.shape())?;
    Ok(y.mul(&w)?.sum())
}

/// Worst relative error per named check and how many instances it ran.
#[derive(Default)]
struct FdTally {
    checks: Vec<(String, usize, f64)>,
}

impl FdTally {
    fn record(&mut self, name: &str, err: f64) {
        match self.checks.iter_mut().find(|c| c.0 == name) {
            Some(c) => {
                c.1 += 1;
                c.2 = c.2.max(err);
            }
            None => self.checks.push((name.to_string(), 1, err)),
        }
    }

    fn check(&mut self, name: &str, inputs: &[Tensor<f64>], f: &dyn Fn() -> Result<Tensor<f64>>) -> Result<()> {
        let rep = check_gradients(inputs, f, FD_STEP)?;
        self.record(name, rep.max_rel_error);
        Ok(())
    }
}

fn gradient_suite() -> Result<FdTally> {
    let mut t = FdTally::default();
    for s in 0..FD_INSTANCES as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
        let a = leaf(&mut rng, &[2, 3]);
        let b = leaf(&mut rng, &[2, 3]);
        let pos = Tensor::param(rand_vec(&mut rng, 6).iter().map(|v| v.abs() + 0.2).collect(), &[2, 3])?;
        t.check("add", &[a.clone(), b.clone()], &|| project(&a.add(&b)?, s))?;
        t.check("sub", &[a.clone(), b.clone()], &|| project(&a.sub(&b)?, s))?;
        t.check("mul", &[a.clone(), b.clone()], &|| project(&a.mul(&b)?, s))?;
        t.check("scale", &[a.clone()], &|| project(&a.scale(-1.7).add_scalar(0.3), s))?;
        t.check("square", &[a.clone()], &|| project(&a.square(), s))?;
        t.check("exp", &[a.clone()], &|| project(&a.exp(), s))?;
        t.check("ln", &[pos.clone()], &|| project(&pos.ln(), s))?;
        t.check("sqrt", &[pos.clone()], &|| project(&pos.sqrt(), s))?;
        t.check("silu", &[a.clone()], &|| project(&a.scale(3.0).silu(), s))?;
        t.check("leaky_relu", &[a.clone()], &|| project(&a.leaky_relu(0.2), s))?;
        t.check("sigmoid", &[a.clone()], &|| project(&a.scale(4.0).sigmoid(), s))?;
        t.check("softplus", &[a.clone()], &|| project(&a.scale(5.0).softplus(), s))?;
        t.check("mean", &[a.clone()], &|| Ok(a.square().mean()))?;
        t.check("sum_per_sample", &[a.clone()], &|| project(&a.sum_per_sample(), s))?;
        t.check("rows_dot", &[a.clone(), b.clone()], &|| project(&a.rows_dot(&b)?, s))?;
        t.check("l2_normalize_rows", &[a.clone()], &|| {
            project(&a.l2_normalize_rows()?, s)
        })?;
        t.check("transpose_last2", &[a.clone()], &|| project(&a.transpose_last2()?, s))?;
        t.check("softmax_last", &[a.clone()], &|| {
            project(&a.scale(2.0).softmax_last(), s)
        })?;
        let labels = [rng.gen_range(0..3), rng.gen_range(0..3)];
        t.check("softmax_cross_entropy", &[a.clone()], &|| {
            a.scale(3.0).softmax_cross_entropy(&labels)
        })?;

        let m = leaf(&mut rng, &[3, 4]);
        let n = leaf(&mut rng, &[4, 2]);
        let w = leaf(&mut rng, &[5, 4]);
        let bias = leaf(&mut rng, &[5]);
        t.check("matmul", &[m.clone(), n.clone()], &|| project(&m.matmul(&n)?, s))?;
        t.check("linear", &[m.clone(), w.clone(), bias.clone()], &|| {
            project(&m.linear(&w, Some(&bias))?, s)
        })?;
        let p = leaf(&mut rng, &[2, 3, 4]);
        let q = leaf(&mut rng, &[2, 4, 3]);
        t.check("bmm", &[p.clone(), q.clone()], &|| project(&p.bmm(&q)?, s))?;

        let x = leaf(&mut rng, &[2, 3, 4, 4]);
        let cw = leaf(&mut rng, &[2, 3, 3, 3]);
        let cb = leaf(&mut rng, &[2]);
        t.check("conv2d", &[x.clone(), cw.clone(), cb.clone()], &|| {
            project(&x.conv2d(&cw, Some(&cb), 1, 1)?, s)
        })?;
        let odd = leaf(&mut rng, &[1, 3, 5, 5]);
        t.check("conv2d stride 2", &[odd.clone(), cw.clone()], &|| {
            project(&odd.conv2d(&cw, None, 2, 1)?, s)
        })?;
        t.check("upsample2x", &[x.clone()], &|| project(&x.upsample2x()?, s))?;
        t.check("avg_pool2x", &[x.clone()], &|| project(&x.avg_pool2x()?, s))?;
        let v = leaf(&mut rng, &[2, 3]);
        t.check("broadcast_add_channels", &[x.clone(), v.clone()], &|| {
            project(&x.broadcast_add_channels(&v)?, s)
        })?;
        let y = leaf(&mut rng, &[2, 2, 4, 4]);
        t.check("concat_channels", &[x.clone(), y.clone()], &|| {
            project(&Tensor::concat_channels(&[&x, &y])?, s)
        })?;
        t.check("mean_spatial", &[x.clone()], &|| project(&x.mean_spatial()?, s))?;
        t.check("reshape", &[x.clone()], &|| project(&x.reshape(&[2, 48])?, s))?;

        let gx = leaf(&mut rng, &[2, 4, 3, 3]);
        let g = leaf(&mut rng, &[4]);
        let be = leaf(&mut rng, &[4]);
        t.check("group_norm", &[gx.clone(), g.clone(), be.clone()], &|| {
            project(&gx.group_norm(2, &g, &be, 1e-5)?, s)
        })?;
        let f = leaf(&mut rng, &[6, 3]);
        let gf = leaf(&mut rng, &[3]);
        let bf = leaf(&mut rng, &[3]);
        let st = RunningStats::new(3);
        t.check("batch_norm train", &[f.clone(), gf.clone(), bf.clone()], &|| {
            project(&f.batch_norm(&st, &gf, &bf, true, 1e-5)?, s)
        })?;
        t.check("batch_norm eval", &[f.clone(), gf.clone(), bf.clone()], &|| {
            project(&f.batch_norm(&st, &gf, &bf, false, 1e-5)?, s)
        })?;

        // losses
        let layouts: [&[usize]; 4] = [
            &[0, 0, 1, 1],
            &[0, 1, 0, 1, 1],
            &[0, 0, 1, 1, 2, 2],
            &[0, 1, 2, 0, 1, 2, 2],
        ];
        let ids = layouts[s as usize % 4].to_vec();
        let z = Tensor::param(unit_rows(&mut rng, ids.len(), 4), &[ids.len(), 4])?;
        t.check("supcon", &[z.clone()], &|| {
            embedder::supcon_loss(&z.l2_normalize_rows()?, &ids, 0.5)
        })?;
        let za = Tensor::param(unit_rows(&mut rng, 3, 5), &[3, 5])?;
        let zb = Tensor::param(unit_rows(&mut rng, 3, 5), &[3, 5])?;
        t.check("L_id", &[za.clone(), zb.clone()], &|| swap::identity_loss(&za, &zb))?;
        let xs = leaf(&mut rng, &[2, 3, 2, 2]);
        let xt = leaf(&mut rng, &[2, 3, 2, 2]);
        t.check("L_chg", &[xs.clone(), xt.clone()], &|| swap::change_loss(&xs, &xt))?;
        let real = leaf(&mut rng, &[4]);
        let fake = leaf(&mut rng, &[4]);
        t.check("d_loss", &[real.clone(), fake.clone()], &|| {
            Ok(adversary::d_loss(&real, &fake))
        })?;
        t.check("g_loss", &[fake.clone()], &|| Ok(adversary::g_loss(&fake)))?;
    }
    r1_gradients(&mut t)?;
    Ok(t)
}

/// R1 weight gradients on a small discriminator. Instances whose finite
/// difference straddles a LeakyReLU kink (two step sizes disagree) are
/// replaced by fresh ones; biases, whose R1 gradient is identically zero in a
/// piecewise-linear network, count when both estimates are negligible.
fn r1_gradients(t: &mut FdTally) -> Result<()> {
    let small = DiscriminatorConfig {
        channels: vec![3, 4],
        hidden: 5,
        resolution: 8,
        ..Default::default()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut done = 0;
    for i in 0..4 * FD_INSTANCES as u64 {
        if done == FD_INSTANCES {
            break;
        }
        let d = Discriminator::<f64>::new(
            DiscriminatorConfig {
                init_seed: 500 + i,
                ..small.clone()
            },
            true,
        )?;
        let x = Tensor::<f64>::from_f64(&rand_vec(&mut rng, 2 * 3 * 64), &[2, 3, 8, 8])?;
        let inputs: Vec<Tensor<f64>> = d.params.params().map(|(_, p)| p.clone()).collect();
        let f = || adversary::r1_penalty(&d, &x, 1.0);
        let rep = check_gradients(&inputs, &f, FD_STEP)?;
        let fine = numeric_grad(&inputs, &f, FD_STEP / 10.0)?;
        if rep.numeric.iter().zip(&fine).any(|(a, b)| relative_error(a, b) > 1e-3) {
            continue;
        }
        let worst = rep
            .rel_errors
            .iter()
            .enumerate()
            .filter(|(k, _)| !(norm(&rep.analytic[*k]) < 1e-12 && norm(&rep.numeric[*k]) < 1e-7))
            .map(|(_, e)| *e)
            .fold(0.0, f64::max);
        t.record("R1", worst);
        done += 1;
    }
    Ok(())
}

fn criterion_1() -> Verdict {
    let started = Instant::now();
    let name = "gradient oracle suite";
    match gradient_suite() {
        Ok(t) => {
            let worst = t.checks.iter().map(|c| c.2).fold(0.0, f64::max);
            let min_inst = t.checks.iter().map(|c| c.1).min().unwrap_or(0);
            let bad: Vec<&str> = t
                .checks
                .iter()
                .filter(|c| c.2 >= FD_TOL)
                .map(|c| c.0.as_str())
                .collect();
            let secs = started.elapsed().as_secs_f64();
            let pass = bad.is_empty() && min_inst >= FD_INSTANCES && secs < 300.0;
            verdict(
                1,
                name,
                pass,
                format!(
                    "{} ops/losses, ≥{min_inst} instances each, max rel err {worst:.2e} (< {FD_TOL:.0e}){}",
                    t.checks.len(),
                    if bad.is_empty() {
                        String::new()
                    } else {
                        format!(", failing: {bad:?}")
                    }
                ),
                started,
            )
        }
        Err(e) => failed(1, name, e, started),
    }
}

fn criterion_2() -> Verdict {
    let started = Instant::now();
    let run = || -> Result<Vec<(&'static str, f64, f64)>> {
        let ln2 = std::f64::consts::LN_2;
        let z = Tensor::<f64>::from_f64(&[1.0, 0.0, 0.6, 0.8, 0.6, -0.8], &[3, 2])?;
        let supcon = embedder::supcon_loss_anchors(&z, &[0, 0, 1], 0.07, &[0])?.item();
        let zeros = Tensor::<f64>::zeros(&[4]);
        let d = adversary::d_loss(&zeros, &zeros).item();
        let e = |v: &[f64]| Tensor::<f64>::from_f64(v, &[1, 2]);
        let same = swap::identity_loss(&e(&[1.0, 0.0])?, &e(&[1.0, 0.0])?)?.item();
        let orth = swap::identity_loss(&e(&[1.0, 0.0])?, &e(&[0.0, 1.0])?)?.item();
        let anti = swap::identity_loss(&e(&[1.0, 0.0])?, &e(&[-1.0, 0.0])?)?.item();
        let x = Tensor::<f64>::zeros(&[2, 3, 4, 4]);
        let x1 = x.add_scalar(1.0);
        let chg = swap::change_loss(&x1, &x)?.item();
        // R1 of d(x) = w·vec(x) is (γ/2)‖w‖²
        let w: Vec<f64> = rand_vec(&mut ChaCha8Rng::seed_from_u64(3), 48);
        let gamma = 2.5;
        let lin = LinearCritic::new(&w)?;
        let xr = Tensor::<f64>::from_f64(&rand_vec(&mut ChaCha8Rng::seed_from_u64(4), 3 * 48), &[3, 3, 4, 4])?;
        let r1 = adversary::r1_penalty(&lin, &xr, gamma)?.item();
        let want_r1 = gamma / 2.0 * w.iter().map(|v| v * v).sum::<f64>();
        Ok(vec![
            ("supcon", supcon, ln2),
            ("d_loss", d, 2.0 * ln2),
            ("L_id identical", same, 0.0),
            ("L_id orthogonal", orth, 1.0),
            ("L_id antipodal", anti, 2.0),
            ("L_chg", chg, 1.0),
            ("R1 linear", r1, want_r1),
        ])
    };
    match run() {
        Ok(rows) => {
            let worst = rows.iter().map(|r| (r.1 - r.2).abs()).fold(0.0, f64::max);
            let detail = rows
                .iter()
                .map(|r| format!("{}={:.9}", r.0, r.1))
                .collect::<Vec<_>>()
                .join(", ");
            verdict(
                2,
                "loss anchors",
                worst < ANCHOR_TOL,
                format!("{detail}; max |err| {worst:.1e}"),
                started,
            )
        }
        Err(e) => failed(2, "loss anchors", e, started),
    }
}

struct LinearCritic<T: smoothswap::Scalar> {
    params: smoothswap::nn::ParamSet<T>,
    w: Tensor<T>,
}

impl<T: smoothswap::Scalar> LinearCritic<T> {
    fn new(w: &[f64]) -> Result<Self> {
        let mut b = smoothswap::nn::ParamBuilder::new(0, true);
        let t = b.param(
            "w",
            &[1, w.len()],
            w.len(),
            smoothswap::nn::Init::Uniform { scale: 1.0 },
        );
        *t.data_mut() = w.iter().map(|&v| T::from_f64(v)).collect();
        Ok(Self {
            params: b.finish(),
            w: t,
        })
    }
}

impl<T: smoothswap::Scalar> adversary::Critic<T> for LinearCritic<T> {
    fn params(&self) -> &smoothswap::nn::ParamSet<T> {
        &self.params
    }
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.shape()[0];
        x.reshape(&[n, x.numel() / n])?.linear(&self.w, None)?.reshape(&[n])
    }
}

impl<T: smoothswap::Real> adversary::Liftable<T> for LinearCritic<T> {
    type Lifted = LinearCritic<smoothswap::Dual<T>>;
    fn lift(&self) -> Result<Self::Lifted> {
        let w: Vec<f64> = self.w.to_f64_vec();
        LinearCritic::new(&w)
    }
}

struct Embedders {
    dataset: Dataset,
    contrastive: Embedder<f32>,
    ce: Embedder<f32>,
    seconds: [f64; 2],
    curve: Vec<f64>,
}

fn train_embedders() -> Result<Embedders> {
    let dataset = Dataset::new(DatasetConfig::default())?;
    let classes = dataset.ids(Split::Train).len();
    let train = EmbedderTrainConfig {
        steps: EMBED_STEPS,
        ..Default::default()
    };
    let mut seconds = [0.0; 2];
    let mut curve = Vec::new();
    let mut out = Vec::new();
    for (k, head) in [Head::Contrastive, Head::CrossEntropy { num_classes: classes }]
        .into_iter()
        .enumerate()
    {
        let t = Instant::now();
        let emb = Embedder::<f32>::new(
            EmbedderConfig {
                head,
                ..Default::default()
            },
            true,
        )?;
        let points = embedder::train_embedder(&emb, &dataset, &train, None, false)?;
        if k == 0 {
            curve = points.iter().map(|p| p.loss).collect();
        }
        seconds[k] = t.elapsed().as_secs_f64();
        out.push(emb.frozen()?);
    }
    let ce = out.pop().unwrap();
    let contrastive = out.pop().unwrap();
    Ok(Embedders {
        dataset,
        contrastive,
        ce,
        seconds,
        curve,
    })
}

fn criteria_3_4(e: &Embedders) -> Vec<Verdict> {
    let started = Instant::now();
    let cfg = EvalConfig::default();
    let evals = evaluate::evaluate_embedder(&e.contrastive, &e.dataset, &cfg)
        .and_then(|c| Ok((c, evaluate::evaluate_embedder(&e.ce, &e.dataset, &cfg)?)));
    let (c, x) = match evals {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            return vec![
                verdict(3, "smoothness ordering", false, format!("error: {msg}"), started),
                verdict(4, "verification floor", false, format!("error: {msg}"), started),
            ];
        }
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for r in [0.25, 0.5] {
        let (a, b) = (c.smoothness_at(r).unwrap(), x.smoothness_at(r).unwrap());
        let (pa, pb) = (a.per_pair_mean, b.per_pair_mean);
        let (ra, rb) = (a.random_pair_mean.unwrap(), b.random_pair_mean.unwrap());
        ok &= pa < pb && ra < rb;
        parts.push(format!(
            "r={r}: per-pair {pa:.4} vs {pb:.4}, random-pair {ra:.4} vs {rb:.4}"
        ));
    }
    let (ua, ub) = (c.mean_unique_retrievals(), x.mean_unique_retrievals());
    ok &= ua > ub;
    parts.push(format!(
        "unique retrievals {ua:.2} vs {ub:.2} over {} pairs",
        c.unique_retrievals.len()
    ));
    let v3 = verdict(
        3,
        "smoothness ordering (contrastive vs CE)",
        ok,
        format!(
            "{}; {EMBED_STEPS} steps each, trained in {:.0}s / {:.0}s",
            parts.join("; "),
            e.seconds[0],
            e.seconds[1]
        ),
        started,
    );
    let v4 = verdict(
        4,
        "verification floor",
        c.verification_auc >= AUC_FLOOR && x.verification_auc >= AUC_FLOOR,
        format!(
            "AUC contrastive {:.4}, CE {:.4} (≥ {AUC_FLOOR})",
            c.verification_auc, x.verification_auc
        ),
        started,
    );
    vec![v3, v4, loss_drop(e)]
}

/// Not a numbered criterion: the embedder's own training contract.
fn loss_drop(e: &Embedders) -> Verdict {
    let started = Instant::now();
    let w = e.curve.len().min(25);
    let head = e.curve[..w].iter().sum::<f64>() / w as f64;
    let tail = e.curve[e.curve.len() - w..].iter().sum::<f64>() / w as f64;
    let drop = 1.0 - tail / head;
    verdict(
        0,
        "embedder training contract",
        drop >= EMBED_LOSS_DROP,
        format!(
            "contrastive loss {head:.3} → {tail:.3} (first/last {w} steps), drop {:.1}% (≥ {:.0}%)",
            100.0 * drop,
            100.0 * EMBED_LOSS_DROP
        ),
        started,
    )
}

fn swap_gen() -> GeneratorConfig {
    GeneratorConfig {
        base_channels: SWAP_WIDTH,
        ..Default::default()
    }
}

fn swap_dis() -> DiscriminatorConfig {
    DiscriminatorConfig {
        channels: vec![SWAP_WIDTH, 2 * SWAP_WIDTH, 2 * SWAP_WIDTH],
        hidden: 2 * SWAP_WIDTH,
        ..Default::default()
    }
}

struct SwapRun {
    log: Vec<StepMetrics>,
    generator: Generator<f32>,
    checksum_before: String,
    checksum_after: String,
    frozen_ok: bool,
    recon_pairs_ok: bool,
    seconds: f64,
}

fn train_swap(ds: &Dataset, emb: &Embedder<f32>) -> Result<SwapRun> {
    let t = Instant::now();
    let checksum_before = emb.params.checksum();
    let run = TrainRunConfig {
        total_steps: SWAP_STEPS,
        checkpoint_every: 0,
        grid_every: 0,
        ..Default::default()
    };
    let mut trainer = SwapTrainer::new(ds, emb, swap_gen(), swap_dis(), SwapLossWeights::default(), run, None)?;
    trainer.run()?;
    let recon_pairs_ok = (0..SWAP_STEPS).all(|s| {
        trainer
            .batch(s)
            .map(|b| b.flags().iter().filter(|&&f| f).count() == 1)
            .unwrap_or(false)
    });
    Ok(SwapRun {
        log: trainer.log.clone(),
        frozen_ok: trainer.verify_frozen().is_ok(),
        generator: trainer.generator,
        checksum_before,
        checksum_after: emb.params.checksum(),
        recon_pairs_ok,
        seconds: t.elapsed().as_secs_f64(),
    })
}

fn criterion_5(c: &SwapRun, x: &SwapRun) -> Verdict {
    let started = Instant::now();
    let l0 = c.log[0].l_id;
    let id_c = swap::normalized_identity_curve(&c.log, CURVE_WINDOW);
    let id_x = swap::normalized_identity_curve(&x.log, CURVE_WINDOW);
    let drop = 1.0 - id_c.last().unwrap();
    let mean_chg = c.log.iter().map(|m| m.l_chg).sum::<f64>() / c.log.len() as f64;
    // identity progress at the same step
    let (end_c, end_x) = (*id_c.last().unwrap(), *id_x.last().unwrap());
    // change spent to reach the lowest identity level both runs attain
    let level = id_c
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .max(id_x.iter().cloned().fold(f64::INFINITY, f64::min));
    let chg_c = swap::change_at_identity_level(&c.log, CURVE_WINDOW, level);
    let chg_x = swap::change_at_identity_level(&x.log, CURVE_WINDOW, level);
    let trade_off = match (chg_c, chg_x) {
        (Some(a), Some(b)) => a < b,
        _ => false,
    };
    let pass = drop >= ID_DROP && mean_chg < CHG_BUDGET && end_x > end_c && trade_off;
    verdict(
        5,
        "swap training (contrastive vs CE embedder)",
        pass,
        format!(
            "{SWAP_STEPS} steps at width {SWAP_WIDTH}; L_id step 0 {l0:.4}, drop {:.1}% (≥ {:.0}%), mean L_chg {mean_chg:.4} (< {CHG_BUDGET}); \
             normalized L_id at final step {end_c:.3} vs CE {end_x:.3}; L_chg at L_id level {level:.3}: {} vs CE {}; {:.0}s / {:.0}s",
            100.0 * drop,
            100.0 * ID_DROP,
            chg_c.map_or("never".into(), |v| format!("{v:.4}")),
            chg_x.map_or("never".into(), |v| format!("{v:.4}")),
            c.seconds,
            x.seconds
        ),
        started,
    )
}

fn criterion_6(e: &Embedders, c: &SwapRun) -> Verdict {
    let started = Instant::now();
    let name = "swap probe check vs bypass";
    let run = || -> Result<(metrics::ProbeEvaluation, metrics::ProbeEvaluation)> {
        let pairs = evaluate::swap_pairs(&e.dataset, SWAP_TRIPLES, 0)?;
        let bypass = evaluate::evaluate_swaps::<f32>(None, &e.contrastive, &e.dataset, &pairs, 64)?;
        let model = evaluate::evaluate_swaps(Some(&c.generator), &e.contrastive, &e.dataset, &pairs, 64)?;
        Ok((bypass, model))
    };
    match run() {
        Ok((b, m)) => {
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            let (id_b, id_m) = (b.mean("identity_error_R"), m.mean("identity_error_R"));
            let mut ok = matches!((id_m, id_b), (Some(x), Some(y)) if x < y);
            let mut parts = vec![format!("identity_error_R {} vs bypass {}", fmt(id_m), fmt(id_b))];
            for a in ["pose_error", "expression_error", "background_error"] {
                let (vb, vm) = (b.mean(a), m.mean(a));
                ok &= matches!((vm, vb), (Some(x), Some(y)) if x <= ATTRIBUTE_FACTOR * y);
                parts.push(format!("{a} {} vs {ATTRIBUTE_FACTOR}×{}", fmt(vm), fmt(vb)));
            }
            parts.push(format!(
                "{} triples, probe excluded {:.1}% of swaps (bypass {:.1}%)",
                SWAP_TRIPLES,
                100.0 * m.exclusion_rate,
                100.0 * b.exclusion_rate
            ));
            verdict(6, name, ok, parts.join("; "), started)
        }
        Err(e) => failed(6, name, e, started),
    }
}

fn criterion_7(c: &SwapRun, x: &SwapRun) -> Verdict {
    let started = Instant::now();
    let name = "structural anchors";
    let run = || -> Result<(bool, usize, usize)> {
        let g = Generator::<f32>::new(GeneratorConfig::default(), true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Tensor::<f32>::from_f64(&rand_vec(&mut rng, 4 * 3 * 32 * 32), &[4, 3, 32, 32])?;
        let z = Tensor::<f32>::from_f64(&unit_rows(&mut rng, 4, 64), &[4, 64])?;
        let identity = g.generate(&img, &z)?.to_vec() == img.to_vec();
        let full = GeneratorConfig::paper_shaped();
        let built = Generator::<f32>::new(full.clone(), false)?.skip_edges().len() + 1;
        Ok((identity, count_skip_connections(&full), built))
    };
    match run() {
        Ok((identity, skips, built)) => {
            let frozen = c.frozen_ok
                && x.frozen_ok
                && c.checksum_before == c.checksum_after
                && x.checksum_before == x.checksum_after;
            let recon = c.recon_pairs_ok && x.recon_pairs_ok;
            verdict(
                7,
                name,
                identity && skips == 13 && built == 13 && recon && frozen,
                format!(
                    "generate(x,z)==x at init: {identity}; full-size layout skips {skips} (built {built}, want 13); \
                     one reconstruction pair in all {} batches of both runs: {recon}; embedder checksum unchanged: {frozen}",
                    SWAP_STEPS
                ),
                started,
            )
        }
        Err(e) => failed(7, name, e, started),
    }
}

fn metric_algebra() -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut note = |v: f64| worst = worst.max(v);
    let angle = |a: &[f64], b: &[f64]| metrics::dot(a, b).clamp(-1.0, 1.0).acos();
    for _ in 0..200 {
        let d = rng.gen_range(2..10);
        let a = unit_rows(&mut rng, 1, d);
        let b = unit_rows(&mut rng, 1, d);
        if angle(&a, &b) > std::f64::consts::PI - 1e-3 {
            continue;
        }
        let r: f64 = rng.gen_range(0.0..=1.0);
        let p = metrics::slerp(&a, &b, r)?;
        let q = metrics::slerp(&b, &a, 1.0 - r)?;
        note((metrics::dot(&p, &p).sqrt() - 1.0).abs());
        note(metrics::distance(&p, &q));
        note(metrics::distance(&metrics::slerp(&a, &b, 0.0)?, &a));
        note(metrics::distance(&metrics::slerp(&a, &b, 1.0)?, &b));
        let theta = angle(&a, &b);
        note((angle(&a, &p) - r * theta).abs());
    }
    // d_smooth: exact slerp point present → 0; orthogonal pair → √(2−√2)/√2
    let (a, b) = (vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]);
    let refs = |zs: &[Vec<f64>]| {
        zs.iter()
            .enumerate()
            .map(|(i, z)| Reference {
                z: z.clone(),
                record: i,
            })
            .collect::<Vec<_>>()
    };
    let mid = metrics::slerp(&a, &b, 0.25)?;
    note(
        metrics::d_smooth(
            &[(a.clone(), b.clone())],
            &refs(&[a.clone(), b.clone(), mid]),
            0.25,
            None,
        )?
        .per_pair_mean
        .abs(),
    );
    let ortho = metrics::d_smooth(&[(a.clone(), b.clone())], &refs(&[a.clone(), b.clone()]), 0.5, None)?.per_pair_mean;
    note((ortho - (2.0 - 2f64.sqrt()).sqrt() / 2f64.sqrt()).abs());
    // AUC against exhaustive pair counting
    for _ in 0..200 {
        let same: Vec<f64> = (0..rng.gen_range(1..=20))
            .map(|_| rng.gen_range(0..6) as f64 / 6.0)
            .collect();
        let diff: Vec<f64> = (0..rng.gen_range(1..=20))
            .map(|_| rng.gen_range(0..6) as f64 / 6.0)
            .collect();
        let mut wins = 0.0;
        for s in &same {
            for d in &diff {
                wins += if s > d {
                    1.0
                } else if s == d {
                    0.5
                } else {
                    0.0
                };
            }
        }
        note((metrics::verification_auc(&same, &diff)? - wins / (same.len() * diff.len()) as f64).abs());
    }
    // overall_score: two-model antisymmetry, shift invariance
    for _ in 0..200 {
        let k = rng.gen_range(1..6);
        let table: Vec<(String, Direction, Vec<f64>)> = (0..k)
            .map(|i| {
                let dir = if rng.gen_bool(0.5) {
                    Direction::HigherBetter
                } else {
                    Direction::LowerBetter
                };
                (
                    format!("m{i}"),
                    dir,
                    vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
                )
            })
            .collect();
        let s = metrics::overall_score(&table)?.scores;
        note((s[0] + s[1]).abs());
        let mut shifted = table.clone();
        let j = rng.gen_range(0..k);
        let c: f64 = rng.gen_range(-50.0..50.0);
        shifted[j].2.iter_mut().for_each(|v| *v += c);
        let t = metrics::overall_score(&shifted)?.scores;
        note((s[0] - t[0]).abs().max((s[1] - t[1]).abs()));
    }
    Ok(worst)
}

fn criterion_8() -> Verdict {
    let started = Instant::now();
    match metric_algebra() {
        Ok(worst) => {
            let secs = started.elapsed().as_secs_f64();
            verdict(
                8,
                "metric algebra suite",
                worst < ALGEBRA_TOL && secs < 60.0,
                format!("slerp, d_smooth (0 and 0.5412), AUC, overall_score: max deviation {worst:.1e} (< {ALGEBRA_TOL:.0e})"),
                started,
            )
        }
        Err(e) => failed(8, "metric algebra suite", e, started),
    }
}

fn cli(root: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_smoothswap"))
        .args(args)
        .env("SMOOTHSWAP_OUT", root)
        .env("RUST_LOG", "warn")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn pipeline(root: &Path, interrupted: bool) -> bool {
    let mut ok = cli(root, &["gen-data", "--identities", "20", "--instances", "4"]);
    ok &= cli(root, &["train-embedder", "--steps", "30"]);
    if interrupted {
        ok &= cli(root, &["train-swap", "--steps", "6", "--stop-at", "3"]);
    }
    ok &= cli(root, &["train-swap", "--steps", "6"]);
    ok && cli(root, &["evaluate", "--models", "contrastive"])
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("golden")
        .join("embedders.csv")
}

fn criterion_9() -> Verdict {
    let started = Instant::now();
    let name = "reproducibility";
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if !(pipeline(a.path(), false) && pipeline(b.path(), true)) {
        return verdict(9, name, false, "a CLI command failed".into(), started);
    }
    let files = [
        "data/manifest.json",
        "embedder-contrastive/loss_curve.csv",
        "embedder-contrastive/embedder.bin",
        "swap-contrastive/train_log.csv",
        "swap-contrastive/generator.bin",
        "eval/embedders.json",
        "eval/embedders.csv",
    ];
    let differing: Vec<&str> = files
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .copied()
        .collect();
    let report = std::fs::read(a.path().join("eval/embedders.csv")).unwrap_or_default();
    let golden = golden_path();
    let golden_note = if std::env::var_os("SMOOTHSWAP_BLESS").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &report).unwrap();
        "golden report rewritten".to_string()
    } else {
        match std::fs::read(&golden) {
            Ok(g) if g == report => "golden report matches".to_string(),
            Ok(_) => "golden report differs".to_string(),
            Err(_) => "golden report missing".to_string(),
        }
    };
    let pass = differing.is_empty() && golden_note != "golden report differs" && golden_note != "golden report missing";
    verdict(
        9,
        name,
        pass,
        format!(
            "two CLI pipelines (one resumed mid swap run): {} of {} artifacts byte-identical{}; {golden_note}",
            files.len() - differing.len(),
            files.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(", differing: {differing:?}")
            }
        ),
        started,
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; listing must stay empty
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let started = Instant::now();
    println!("acceptance: running all criteria");
    let mut verdicts = vec![criterion_1(), criterion_2(), criterion_8(), criterion_9()];
    match train_embedders() {
        Ok(e) => {
            verdicts.extend(criteria_3_4(&e));
            let runs = train_swap(&e.dataset, &e.contrastive).and_then(|c| Ok((c, train_swap(&e.dataset, &e.ce)?)));
            match runs {
                Ok((c, x)) => {
                    verdicts.push(criterion_5(&c, &x));
                    verdicts.push(criterion_6(&e, &c));
                    verdicts.push(criterion_7(&c, &x));
                }
                Err(err) => {
                    for (id, n) in [(5, "swap training"), (6, "swap probe check"), (7, "structural anchors")] {
                        verdicts.push(verdict(
                            id,
                            n,
                            false,
                            format!("swap training failed: {err}"),
                            Instant::now(),
                        ));
                    }
                }
            }
        }
        Err(err) => {
            for (id, n) in [
                (3, "smoothness ordering"),
                (4, "verification floor"),
                (5, "swap training"),
                (6, "swap probe check"),
                (7, "structural anchors"),
            ] {
                verdicts.push(verdict(
                    id,
                    n,
                    false,
                    format!("embedder training failed: {err}"),
                    Instant::now(),
                ));
            }
        }
    }
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!(
        "acceptance summary ({:.0}s): {passed}/{} checks pass",
        started.elapsed().as_secs_f64(),
        verdicts.len()
    );
    let mut sorted: Vec<&Verdict> = verdicts.iter().collect();
    sorted.sort_by_key(|v| v.line[7..].split('.').next().and_then(|n| n.trim().parse::<u8>().ok()));
    for v in sorted {
        println!("  {}", v.line);
    }
    let strict = std::env::var("SMOOTHSWAP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < verdicts.len() {
        std::process::exit(1);
    }
}
