//! Training objectives: feature imputation MSE, cross-entropy, and the SHOT
//! objective (information maximisation plus centroid pseudo-labels).

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Floor inside the log of the batch-mean prediction.
const MARGINAL_EPS: f64 = 1e-12;
/// Added to soft cluster masses when forming centroids.
const CENTROID_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the target imputation term during adaptation.
    pub alpha: f64,
    pub shot_im_weight: f64,
    pub shot_pl_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            shot_im_weight: 1.0,
            shot_pl_weight: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.alpha", self.alpha),
            ("loss.shot_im_weight", self.shot_im_weight),
            ("loss.shot_pl_weight", self.shot_pl_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Mean squared difference over every element.
pub fn imputation_mse<F: Real>(g: &mut Graph<F>, h: Var, h_imputed: Var) -> Result<Var> {
    if g.shape(h) != g.shape(h_imputed) {
        return Err(dim_err!(
            "imputation target {:?} vs imputed {:?}",
            g.shape(h),
            g.shape(h_imputed)
        ));
    }
    let d = g.sub(h, h_imputed)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<F: Real>(g: &mut Graph<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    let picked = g.gather(lp, labels)?;
    let m = g.mean(picked)?;
    g.scale(m, -F::one())
}

/// `im_weight * (H_cond - H_marg) + pl_weight * CE(logits, pseudo)`, the
/// pseudo-label term only when labels are given.
pub fn shot_loss<F: Real>(g: &mut Graph<F>, logits: Var, pseudo: Option<&[usize]>, w: &LossWeights) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 2 {
        return Err(dim_err!("shot_loss expects [B, K] logits, got {s:?}"));
    }
    let b = s[0];
    let p = g.softmax(logits)?;
    let lp = g.log_softmax(logits)?;
    let plp = g.mul(p, lp)?;
    let total = g.sum(plp)?;
    let h_cond = g.scale(total, F::of(-1.0 / b as f64))?;

    let p_bar = g.mean_axis(p, 0)?;
    let shifted = g.shift(p_bar, F::of(MARGINAL_EPS))?;
    let log_bar = g.log(shifted)?;
    let pl = g.mul(p_bar, log_bar)?;
    let neg_marg = g.sum(pl)?;

    let im = g.add(h_cond, neg_marg)?;
    let mut loss = g.scale(im, F::of(w.shot_im_weight))?;
    if let Some(labels) = pseudo {
        let ce = cross_entropy(g, logits, labels)?;
        let ce = g.scale(ce, F::of(w.shot_pl_weight))?;
        loss = g.add(loss, ce)?;
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    /// `[K, D]` centroids from the final assignment round.
    pub centroids: Tensor<f64>,
}

/// Two rounds of nearest-centroid labelling under cosine distance. Round one
/// weights each L2-normalised feature by its softmax prediction; round two
/// uses the hard labels of round one. A cluster left empty in round two keeps
/// its round-one centroid. Ties go to the lowest class id.
pub fn compute_pseudo_labels<F: Real>(features: &Tensor<F>, logits: &Tensor<F>) -> Result<PseudoLabels> {
    let (fs, ls) = (features.shape(), logits.shape());
    if fs.len() != 2 || ls.len() != 2 || fs[0] != ls[0] {
        return Err(dim_err!("features {fs:?} and logits {ls:?} must be [N, D] and [N, K]"));
    }
    let (n, d, k) = (fs[0], fs[1], ls[1]);
    if n < k {
        return Err(config_err!("{n} samples cannot seed {k} pseudo-label clusters"));
    }
    let mut feats: Vec<f64> = features.data().iter().map(|v| v.as_f64()).collect();
    for row in feats.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let mut probs: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    for row in probs.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }

    let soft = weighted_centroids(&feats, &probs, n, d, k);
    let labels = assign(&feats, &soft, n, d, k);

    let mut onehot = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * k + y] = 1.0;
    }
    let mut hard = weighted_centroids(&feats, &onehot, n, d, k);
    for c in 0..k {
        if !labels.contains(&c) {
            hard[c * d..(c + 1) * d].copy_from_slice(&soft[c * d..(c + 1) * d]);
        }
    }
    let labels = assign(&feats, &hard, n, d, k);
    Ok(PseudoLabels {
        labels,
        centroids: Tensor::new(vec![k, d], hard)?,
    })
}

fn weighted_centroids(feats: &[f64], weights: &[f64], n: usize, d: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * d];
    let mut mass = vec![0.0; k];
    for i in 0..n {
        let f = &feats[i * d..(i + 1) * d];
        for j in 0..k {
            let w = weights[i * k + j];
            mass[j] += w;
            for (acc, &v) in c[j * d..(j + 1) * d].iter_mut().zip(f) {
                *acc += w * v;
            }
        }
    }
    for j in 0..k {
        let denom = mass[j] + CENTROID_EPS;
        c[j * d..(j + 1) * d].iter_mut().for_each(|v| *v /= denom);
    }
    c
}

fn assign(feats: &[f64], centroids: &[f64], n: usize, d: usize, k: usize) -> Vec<usize> {
    let norms: Vec<f64> = centroids
        .chunks(d)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    (0..n)
        .map(|i| {
            let f = &feats[i * d..(i + 1) * d];
            let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut best = (0, f64::INFINITY);
            for j in 0..k {
                let c = &centroids[j * d..(j + 1) * d];
                let denom = fnorm * norms[j];
                let cos = if denom > 0.0 {
                    f.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / denom
                } else {
                    0.0
                };
                let dist = 1.0 - cos;
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            best.0
        })
        .collect()
}

/// Source objective: cross-entropy plus the (detached-input) imputation
/// loss, unweighted.
pub fn pretrain_loss<F: Real>(g: &mut Graph<F>, ce: Var, imp: Var) -> Result<Var> {
    g.add(ce, imp)
}

/// Target objective `sf + alpha * imp`. With `alpha == 0` the returned node
/// is `sf` itself, so the imputation branch cannot touch any gradient.
pub fn adapt_loss<F: Real>(g: &mut Graph<F>, sf: Var, imp: Var, w: &LossWeights) -> Result<Var> {
    if w.alpha == 0.0 {
        return Ok(sf);
    }
    let weighted = g.scale(imp, F::of(w.alpha))?;
    g.add(sf, weighted)
}
