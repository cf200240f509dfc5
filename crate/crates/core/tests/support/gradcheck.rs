//! Central finite differences against reverse-mode gradients, in f64.

use mapu_core::losses::{adapt_loss, cross_entropy, imputation_mse, pretrain_loss, shot_loss, LossWeights};
use mapu_core::model::{ArchMeta, Classifier, Encoder, Imputer, ModelBundle};
use mapu_core::nn::{BatchNorm1d, Bind, Conv1d, Conv1dConfig, Linear, Mode, Module, Rnn};
use mapu_core::tensor::{ConvGeom, Graph, Tensor, Var};
use mapu_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error. Central differences of O(1)
/// losses carry ~1e-10 rounding noise, so a gradient that is exactly zero
/// (a conv bias feeding batch norm) is compared absolutely at 1e-9.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = rand_tensor(shape, -1.0, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < 0.01 {
            *v = if *v < 0.0 { -0.5 } else { 0.5 };
        }
    }
    t
}

fn project(out: &Tensor<f64>, proj: &Tensor<f64>) -> f64 {
    out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

type OpFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Max relative error between analytic and numeric gradients of
/// `<f(inputs), proj>` over every input element.
pub fn check_op(rng: &mut ChaCha8Rng, inputs: &[Tensor<f64>], f: &OpFn) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> Tensor<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).clone()
    };
    let out_shape = eval(inputs).shape().to_vec();
    let proj = rand_tensor(&out_shape, -1.0, 1.0, rng);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let p = g.constant(proj.clone());
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = g.grad(v).cloned().unwrap_or(zeros);
        for j in 0..inputs[i].numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += H;
            let up = project(&eval(&xs), &proj);
            xs[i].data_mut()[j] -= 2.0 * H;
            let down = project(&eval(&xs), &proj);
            let numeric = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

type ModFn<'a, M> = dyn Fn(&M, &mut Graph<f64>, Var) -> Result<Var> + 'a;

/// Like [`check_op`] for a module: differentiates with respect to the input
/// and every parameter.
pub fn check_module<M: Module<f64>>(rng: &mut ChaCha8Rng, m: &mut M, x: &Tensor<f64>, f: &ModFn<M>) -> f64 {
    let eval = |m: &M, x: &Tensor<f64>| -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = f(m, &mut g, xv).unwrap();
        g.value(out).clone()
    };
    let out_shape = eval(m, x).shape().to_vec();
    let proj = rand_tensor(&out_shape, -1.0, 1.0, rng);

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(m, &mut g, xv).unwrap();
    let p = g.constant(proj.clone());
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    m.zero_grad();
    m.accumulate_grads(&g);

    let mut worst: f64 = 0.0;
    let gx = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    for j in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[j] += H;
        let up = project(&eval(m, &xp), &proj);
        xp.data_mut()[j] -= 2.0 * H;
        let down = project(&eval(m, &xp), &proj);
        worst = worst.max(rel_err(gx.data()[j], (up - down) / (2.0 * H)));
    }
    let n_params = m.params().len();
    for pi in 0..n_params {
        let analytic = {
            let p = &m.params()[pi];
            p.grad().cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        };
        for j in 0..analytic.numel() {
            m.params_mut()[pi].value.data_mut()[j] += H;
            let up = project(&eval(m, x), &proj);
            m.params_mut()[pi].value.data_mut()[j] -= 2.0 * H;
            let down = project(&eval(m, x), &proj);
            m.params_mut()[pi].value.data_mut()[j] += H;
            worst = worst.max(rel_err(analytic.data()[j], (up - down) / (2.0 * H)));
        }
    }
    worst
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Input with every max-pool window holding a unique maximum by a margin.
fn poolable(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals.into_iter().map(|v| v - 0.025 * n as f64).collect()).unwrap()
}

fn tiny_arch(rng: &mut ChaCha8Rng) -> ArchMeta {
    let c = dims(rng, 1, 2);
    ArchMeta {
        conv_channels: vec![dims(rng, 2, 3), dims(rng, 2, 3)],
        kernel_size: dims(rng, 2, 4),
        imputer_hidden: dims(rng, 2, 3),
        ..ArchMeta::standard(c, dims(rng, 8, 12), 3)
    }
}

/// Runs every op, layer and loss `instances` times with fresh random shapes
/// and values.
pub fn grad_check_all(instances: usize, seed: u64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut run = |name: &'static str, rng: &mut ChaCha8Rng, case: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        let worst = (0..instances).map(|_| case(rng)).fold(0.0, f64::max);
        reports.push(GradReport {
            name,
            instances,
            max_rel_err: worst,
        });
    };

    run("add (broadcast)", &mut rng, &mut |r| {
        let (a, b) = (dims(r, 1, 4), dims(r, 1, 4));
        let x = rand_tensor(&[a, b], -1.0, 1.0, r);
        let y = rand_tensor(&[a, 1], -1.0, 1.0, r);
        check_op(r, &[x, y], &|g, v| g.add(v[0], v[1]))
    });
    run("sub", &mut rng, &mut |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 4)];
        let (x, y) = (rand_tensor(&s, -1.0, 1.0, r), rand_tensor(&s, -1.0, 1.0, r));
        check_op(r, &[x, y], &|g, v| g.sub(v[0], v[1]))
    });
    run("mul (broadcast)", &mut rng, &mut |r| {
        let (a, b) = (dims(r, 1, 4), dims(r, 1, 4));
        let x = rand_tensor(&[], -1.0, 1.0, r);
        let y = rand_tensor(&[a, b], -1.0, 1.0, r);
        check_op(r, &[x, y], &|g, v| g.mul(v[0], v[1]))
    });
    run("relu", &mut rng, &mut |r| {
        let x = away_from_zero(&[dims(r, 1, 4), dims(r, 1, 5)], r);
        check_op(r, &[x], &|g, v| g.relu(v[0]))
    });
    run("square", &mut rng, &mut |r| {
        let x = rand_tensor(&[dims(r, 1, 6)], -2.0, 2.0, r);
        check_op(r, &[x], &|g, v| g.square(v[0]))
    });
    run("log", &mut rng, &mut |r| {
        let x = rand_tensor(&[dims(r, 1, 6)], 0.2, 3.0, r);
        check_op(r, &[x], &|g, v| g.log(v[0]))
    });
    run("exp", &mut rng, &mut |r| {
        let x = rand_tensor(&[dims(r, 1, 6)], -2.0, 2.0, r);
        check_op(r, &[x], &|g, v| g.exp(v[0]))
    });
    run("tanh", &mut rng, &mut |r| {
        let x = rand_tensor(&[dims(r, 1, 6)], -2.0, 2.0, r);
        check_op(r, &[x], &|g, v| g.tanh(v[0]))
    });
    run("scale and shift", &mut rng, &mut |r| {
        let x = rand_tensor(&[dims(r, 1, 6)], -2.0, 2.0, r);
        let (c, s) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        check_op(r, &[x], &|g, v| {
            let y = g.scale(v[0], c)?;
            g.shift(y, s)
        })
    });
    run("matmul", &mut rng, &mut |r| {
        let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
        let a = rand_tensor(&[m, k], -1.0, 1.0, r);
        let b = rand_tensor(&[k, n], -1.0, 1.0, r);
        check_op(r, &[a, b], &|g, v| g.matmul(v[0], v[1]))
    });
    run("linear op", &mut rng, &mut |r| {
        let (rows, i, o) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
        let x = rand_tensor(&[rows, i], -1.0, 1.0, r);
        let w = rand_tensor(&[o, i], -1.0, 1.0, r);
        let b = rand_tensor(&[o], -1.0, 1.0, r);
        check_op(r, &[x, w, b], &|g, v| g.linear(v[0], v[1], Some(v[2])))
    });
    run("sum and mean", &mut rng, &mut |r| {
        let x = rand_tensor(&[dims(r, 1, 3), dims(r, 1, 4)], -1.0, 1.0, r);
        check_op(r, &[x], &|g, v| {
            let s = g.sum(v[0])?;
            let m = g.mean(v[0])?;
            let m = g.scale(m, 3.0)?;
            g.add(s, m)
        })
    });
    run("sum_axis and mean_axis", &mut rng, &mut |r| {
        let x = rand_tensor(&[dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)], -1.0, 1.0, r);
        let axis = r.random_range(0..3);
        let other = r.random_range(0..2);
        check_op(r, &[x], &|g, v| {
            let s = g.sum_axis(v[0], axis)?;
            g.mean_axis(s, other)
        })
    });
    run("reshape and swap_last", &mut rng, &mut |r| {
        let (a, b, c) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 4));
        let x = rand_tensor(&[a, b * c], -1.0, 1.0, r);
        check_op(r, &[x], &|g, v| {
            let y = g.reshape(v[0], &[a, b, c])?;
            g.swap_last(y)
        })
    });
    run("softmax", &mut rng, &mut |r| {
        let x = rand_tensor(&[dims(r, 1, 4), dims(r, 2, 5)], -3.0, 3.0, r);
        check_op(r, &[x], &|g, v| g.softmax(v[0]))
    });
    run("log_softmax", &mut rng, &mut |r| {
        let x = rand_tensor(&[dims(r, 1, 4), dims(r, 2, 5)], -3.0, 3.0, r);
        check_op(r, &[x], &|g, v| g.log_softmax(v[0]))
    });
    run("gather", &mut rng, &mut |r| {
        let (n, k) = (dims(r, 1, 5), dims(r, 2, 4));
        let x = rand_tensor(&[n, k], -1.0, 1.0, r);
        let idx = labels(r, n, k);
        check_op(r, &[x], &|g, v| g.gather(v[0], &idx))
    });
    run("conv1d op", &mut rng, &mut |r| {
        let (b, cin, cout, k) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 4));
        let geom = ConvGeom {
            stride: dims(r, 1, 2),
            pad_left: dims(r, 0, 2),
            pad_right: dims(r, 0, 2),
        };
        let len = dims(r, k, k + 5);
        let x = rand_tensor(&[b, cin, len], -1.0, 1.0, r);
        let w = rand_tensor(&[cout, cin, k], -1.0, 1.0, r);
        let bias = rand_tensor(&[cout], -1.0, 1.0, r);
        check_op(r, &[x, w, bias], &|g, v| g.conv1d(v[0], v[1], Some(v[2]), geom))
    });
    run("max_pool1d", &mut rng, &mut |r| {
        let window = dims(r, 1, 3);
        let shape = [dims(r, 1, 2), dims(r, 1, 2), dims(r, window, 3 * window + 1)];
        let x = poolable(r, &shape);
        check_op(r, &[x], &|g, v| g.max_pool1d(v[0], window))
    });
    run("batch_norm_train op", &mut rng, &mut |r| {
        let (b, c, l) = (dims(r, 2, 3), dims(r, 1, 3), dims(r, 1, 4));
        let x = rand_tensor(&[b, c, l], -1.0, 1.0, r);
        let gamma = rand_tensor(&[c], 0.5, 1.5, r);
        let beta = rand_tensor(&[c], -0.5, 0.5, r);
        check_op(r, &[x, gamma, beta], &|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0))
    });
    run("batch_norm_eval op", &mut rng, &mut |r| {
        let (b, c, l) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 4));
        let x = rand_tensor(&[b, c, l], -1.0, 1.0, r);
        let gamma = rand_tensor(&[c], 0.5, 1.5, r);
        let beta = rand_tensor(&[c], -0.5, 0.5, r);
        let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
        check_op(r, &[x, gamma, beta], &|g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5))
    });
    run("rnn_tanh op", &mut rng, &mut |r| {
        let (b, t, d, h) = (dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 3), dims(r, 1, 3));
        let x = rand_tensor(&[b, t, d], -1.0, 1.0, r);
        let wih = rand_tensor(&[h, d], -0.8, 0.8, r);
        let whh = rand_tensor(&[h, h], -0.8, 0.8, r);
        let bias = rand_tensor(&[h], -0.5, 0.5, r);
        check_op(r, &[x, wih, whh, bias], &|g, v| g.rnn_tanh(v[0], v[1], v[2], v[3]))
    });

    run("Linear layer", &mut rng, &mut |r| {
        let (i, o) = (dims(r, 1, 4), dims(r, 1, 4));
        let mut m = Linear::<f64>::new("lin", i, o, r);
        let x = rand_tensor(&[dims(r, 1, 3), i], -1.0, 1.0, r);
        check_module(r, &mut m, &x, &|m, g, x| m.forward(g, x, Bind::Trainable))
    });
    run("Conv1d layer (same padding)", &mut rng, &mut |r| {
        let (cin, cout, k) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 5));
        let mut m = Conv1d::<f64>::new("conv", Conv1dConfig::same(cin, cout, k), r).unwrap();
        let x = rand_tensor(&[dims(r, 1, 2), cin, dims(r, k, k + 4)], -1.0, 1.0, r);
        check_module(r, &mut m, &x, &|m, g, x| m.forward(g, x, Bind::Trainable))
    });
    run("BatchNorm1d layer (train)", &mut rng, &mut |r| {
        let c = dims(r, 1, 3);
        let mut m = BatchNorm1d::<f64>::new("bn", c);
        m.gamma.value = rand_tensor(&[c], 0.5, 1.5, r);
        m.beta.value = rand_tensor(&[c], -0.5, 0.5, r);
        let x = rand_tensor(&[dims(r, 2, 3), c, dims(r, 1, 4)], -1.0, 1.0, r);
        check_module(r, &mut m, &x, &|m, g, x| Ok(m.forward(g, x, Mode::Train, Bind::Trainable)?.0))
    });
    run("Rnn layer", &mut rng, &mut |r| {
        let (d, h) = (dims(r, 1, 3), dims(r, 1, 3));
        let mut m = Rnn::<f64>::new("rnn", d, h, r);
        let x = rand_tensor(&[dims(r, 1, 2), dims(r, 1, 4), d], -1.0, 1.0, r);
        check_module(r, &mut m, &x, &|m, g, x| m.forward(g, x, Bind::Trainable))
    });
    run("Encoder", &mut rng, &mut |r| {
        let arch = tiny_arch(r);
        let mut m = ModelBundle::<f64>::new(arch.clone(), r).unwrap().encoder;
        let x = rand_tensor(&[dims(r, 2, 3), arch.in_channels, arch.seq_len], -1.0, 1.0, r);
        check_module(r, &mut m, &x, &|m: &Encoder<f64>, g, x| Ok(m.forward(g, x, Mode::Train, Bind::Trainable)?.0))
    });
    run("Classifier", &mut rng, &mut |r| {
        let arch = tiny_arch(r);
        let mut m = ModelBundle::<f64>::new(arch.clone(), r).unwrap().classifier;
        let x = rand_tensor(&[dims(r, 1, 3), arch.feature_dim(), arch.feature_len()], -1.0, 1.0, r);
        check_module(r, &mut m, &x, &|m: &Classifier<f64>, g, h| {
            let z = Classifier::pool(g, h)?;
            m.forward_pooled(g, z, Bind::Trainable)
        })
    });
    run("Imputer", &mut rng, &mut |r| {
        let arch = tiny_arch(r);
        let mut m = ModelBundle::<f64>::new(arch.clone(), r).unwrap().imputer.unwrap();
        let x = rand_tensor(&[dims(r, 1, 2), arch.feature_dim(), arch.feature_len()], -1.0, 1.0, r);
        check_module(r, &mut m, &x, &|m: &Imputer<f64>, g, h| m.forward(g, h, Bind::Trainable))
    });

    run("imputation_mse", &mut rng, &mut |r| {
        let s = [dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 4)];
        let (h, hi) = (rand_tensor(&s, -1.0, 1.0, r), rand_tensor(&s, -1.0, 1.0, r));
        check_op(r, &[h, hi], &|g, v| imputation_mse(g, v[0], v[1]))
    });
    run("cross_entropy", &mut rng, &mut |r| {
        let (n, k) = (dims(r, 1, 5), dims(r, 2, 4));
        let x = rand_tensor(&[n, k], -3.0, 3.0, r);
        let y = labels(r, n, k);
        check_op(r, &[x], &|g, v| cross_entropy(g, v[0], &y))
    });
    run("shot_loss (information maximisation)", &mut rng, &mut |r| {
        let (n, k) = (dims(r, 1, 5), dims(r, 2, 4));
        let x = rand_tensor(&[n, k], -3.0, 3.0, r);
        let w = LossWeights::default();
        check_op(r, &[x], &|g, v| shot_loss(g, v[0], None, &w))
    });
    run("shot_loss (with pseudo-labels)", &mut rng, &mut |r| {
        let (n, k) = (dims(r, 1, 5), dims(r, 2, 4));
        let x = rand_tensor(&[n, k], -3.0, 3.0, r);
        let y = labels(r, n, k);
        let w = LossWeights {
            shot_im_weight: r.random_range(0.1..2.0),
            shot_pl_weight: r.random_range(0.1..2.0),
            ..Default::default()
        };
        check_op(r, &[x], &|g, v| shot_loss(g, v[0], Some(&y), &w))
    });
    run("pretrain_loss", &mut rng, &mut |r| {
        let (n, k) = (dims(r, 1, 4), dims(r, 2, 4));
        let x = rand_tensor(&[n, k], -2.0, 2.0, r);
        let (h, hi) = (rand_tensor(&[n, 3], -1.0, 1.0, r), rand_tensor(&[n, 3], -1.0, 1.0, r));
        let y = labels(r, n, k);
        check_op(r, &[x, h, hi], &|g, v| {
            let ce = cross_entropy(g, v[0], &y)?;
            let imp = imputation_mse(g, v[1], v[2])?;
            pretrain_loss(g, ce, imp)
        })
    });
    run("adapt_loss", &mut rng, &mut |r| {
        let (n, k) = (dims(r, 1, 4), dims(r, 2, 4));
        let x = rand_tensor(&[n, k], -2.0, 2.0, r);
        let (h, hi) = (rand_tensor(&[n, 3], -1.0, 1.0, r), rand_tensor(&[n, 3], -1.0, 1.0, r));
        let w = LossWeights {
            alpha: r.random_range(0.0..2.0),
            ..Default::default()
        };
        check_op(r, &[x, h, hi], &|g, v| {
            let sf = shot_loss(g, v[0], None, &w)?;
            let imp = imputation_mse(g, v[1], v[2])?;
            adapt_loss(g, sf, imp, &w)
        })
    });
    reports
}
