//! Naive-loop references for the engine's fused kernels and losses.

use mapu_core::losses::{cross_entropy, imputation_mse, shot_loss, LossWeights};
use mapu_core::tensor::{ConvGeom, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::rand_tensor;

pub const ORACLE_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_abs_err: f64,
}

pub fn naive_conv1d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], geom: ConvGeom) -> Vec<f64> {
    let (bs, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let lout = (len + geom.pad_left + geom.pad_right - k) / geom.stride + 1;
    let mut out = vec![0.0; bs * cout * lout];
    for n in 0..bs {
        for o in 0..cout {
            for t in 0..lout {
                let mut acc = b[o];
                for c in 0..cin {
                    for j in 0..k {
                        let pos = (t * geom.stride + j) as isize - geom.pad_left as isize;
                        if pos >= 0 && (pos as usize) < len {
                            acc += w.data()[(o * cin + c) * k + j] * x.data()[(n * cin + c) * len + pos as usize];
                        }
                    }
                }
                out[(n * cout + o) * lout + t] = acc;
            }
        }
    }
    out
}

pub fn naive_rnn(x: &Tensor<f64>, wih: &Tensor<f64>, whh: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let (bs, steps, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = b.len();
    let mut out = vec![0.0; bs * steps * h];
    for n in 0..bs {
        let mut state = vec![0.0; h];
        for t in 0..steps {
            let mut next = vec![0.0; h];
            for i in 0..h {
                let mut acc = b[i];
                for j in 0..d {
                    acc += wih.data()[i * d + j] * x.data()[(n * steps + t) * d + j];
                }
                for j in 0..h {
                    acc += whh.data()[i * h + j] * state[j];
                }
                next[i] = acc.tanh();
            }
            out[(n * steps + t) * h..(n * steps + t + 1) * h].copy_from_slice(&next);
            state = next;
        }
    }
    out
}

pub fn naive_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn naive_cross_entropy(logits: &[f64], k: usize, y: &[usize]) -> f64 {
    let rows: Vec<&[f64]> = logits.chunks(k).collect();
    -rows.iter().zip(y).map(|(r, &c)| softmax_row(r)[c].ln()).sum::<f64>() / y.len() as f64
}

/// `im * (mean_i H(p_i) - H(mean_i p_i)) + pl * CE(pseudo)`, straight from
/// the definitions.
pub fn naive_shot(logits: &[f64], k: usize, pseudo: Option<&[usize]>, w: &LossWeights) -> f64 {
    let probs: Vec<Vec<f64>> = logits.chunks(k).map(softmax_row).collect();
    let n = probs.len() as f64;
    let h_cond = probs.iter().map(|p| -p.iter().map(|v| v * v.ln()).sum::<f64>()).sum::<f64>() / n;
    let mut p_bar = vec![0.0; k];
    for p in &probs {
        for (acc, v) in p_bar.iter_mut().zip(p) {
            *acc += v / n;
        }
    }
    let h_marg = -p_bar.iter().map(|v| v * (v + 1e-12).ln()).sum::<f64>();
    let mut loss = w.shot_im_weight * (h_cond - h_marg);
    if let Some(y) = pseudo {
        loss += w.shot_pl_weight * naive_cross_entropy(logits, k, y);
    }
    loss
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn oracle_check_all(instances: usize, seed: u64) -> Vec<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut run = |name: &'static str, rng: &mut ChaCha8Rng, case: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        let worst = (0..instances).map(|_| case(rng)).fold(0.0, f64::max);
        reports.push(OracleReport {
            name,
            instances,
            max_abs_err: worst,
        });
    };

    run("conv1d", &mut rng, &mut |r| {
        let (b, cin, cout, k) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..5), r.random_range(1..9));
        let geom = ConvGeom {
            stride: r.random_range(1..3),
            pad_left: r.random_range(0..4),
            pad_right: r.random_range(0..5),
        };
        let len = r.random_range(k..k + 20);
        let x = rand_tensor(&[b, cin, len], -2.0, 2.0, r);
        let w = rand_tensor(&[cout, cin, k], -1.0, 1.0, r);
        let bias = rand_tensor(&[cout], -1.0, 1.0, r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(bias.clone()));
        let y = g.conv1d(xv, wv, Some(bv), geom).unwrap();
        max_abs(g.value(y).data(), &naive_conv1d(&x, &w, bias.data(), geom))
    });
    run("rnn_forward", &mut rng, &mut |r| {
        let (b, t, d, h) = (r.random_range(1..4), r.random_range(1..10), r.random_range(1..6), r.random_range(1..8));
        let x = rand_tensor(&[b, t, d], -1.0, 1.0, r);
        let wih = rand_tensor(&[h, d], -0.7, 0.7, r);
        let whh = rand_tensor(&[h, h], -0.7, 0.7, r);
        let bias = rand_tensor(&[h], -0.5, 0.5, r);
        let mut g = Graph::new();
        let v: Vec<_> = [&x, &wih, &whh, &bias].into_iter().map(|t| g.constant(t.clone())).collect();
        let y = g.rnn_tanh(v[0], v[1], v[2], v[3]).unwrap();
        max_abs(g.value(y).data(), &naive_rnn(&x, &wih, &whh, bias.data()))
    });
    run("imputation_mse", &mut rng, &mut |r| {
        let s = [r.random_range(1..5), r.random_range(1..8), r.random_range(1..10)];
        let (a, b) = (rand_tensor(&s, -2.0, 2.0, r), rand_tensor(&s, -2.0, 2.0, r));
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = imputation_mse(&mut g, av, bv).unwrap();
        (g.value(l).item() - naive_mse(a.data(), b.data())).abs()
    });
    run("cross_entropy", &mut rng, &mut |r| {
        let (n, k) = (r.random_range(1..16), r.random_range(2..7));
        let x = rand_tensor(&[n, k], -4.0, 4.0, r);
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let l = cross_entropy(&mut g, xv, &y).unwrap();
        (g.value(l).item() - naive_cross_entropy(x.data(), k, &y)).abs()
    });
    run("shot_loss", &mut rng, &mut |r| {
        let (n, k) = (r.random_range(1..16), r.random_range(2..7));
        let x = rand_tensor(&[n, k], -4.0, 4.0, r);
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let w = LossWeights {
            shot_im_weight: r.random_range(0.0..2.0),
            shot_pl_weight: r.random_range(0.0..2.0),
            ..Default::default()
        };
        let pseudo = r.random_bool(0.5).then_some(y.as_slice());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let l = shot_loss(&mut g, xv, pseudo, &w).unwrap();
        (g.value(l).item() - naive_shot(x.data(), k, pseudo, &w)).abs()
    });
    reports
}

/// Macro-F1 from per-class precision and recall, computed by scanning the
/// label vectors once per class.
pub fn brute_macro_f1(truth: &[usize], pred: &[usize], k: usize) -> f64 {
    let mut scores = Vec::new();
    for c in 0..k {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let actual = truth.iter().filter(|&&t| t == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        if actual == 0.0 && predicted == 0.0 {
            continue;
        }
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        scores.push(if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        });
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}
