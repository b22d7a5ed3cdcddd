//! Training objectives and their gradients with respect to their inputs.
//!
//! Every loss returns its scalar value together with the gradient of that
//! value with respect to the logits or embeddings it was given; the trainer
//! routes those gradients into the right parameter group.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::id_pool::IdPool;
use crate::model::CENTRAL_CLASS;

/// Added inside every `log(p)` of a probability.
pub const LOG_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Triplet weight.
    pub lambda1: f64,
    /// Adversarial transfer weight.
    pub lambda2: f64,
    /// Similarity-enhancement weight.
    pub lambda3: f64,
    pub margin: f64,
    /// Softmax temperature of the similarity enhancement.
    pub tau: f64,
    /// Number of pooled identities each sample is pulled towards.
    pub k_similar: usize,
    /// Restrict the transfer loss to peripheral samples.
    pub transfer_on_peripheral_only: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.18,
            lambda3: 0.05,
            margin: 0.3,
            tau: 2e-3,
            k_similar: 8,
            transfer_on_peripheral_only: false,
        }
    }
}

/// A scalar loss and its gradient with respect to the loss input.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn softmax(v: ArrayView1<f64>, tau: f64) -> Array1<f64> {
    let max = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out = v.mapv(|x| ((x - max) / tau).exp());
    let sum = out.sum();
    out.mapv_inplace(|x| x / sum);
    out
}

fn check_rows(logits: &Array2<f64>, n: usize, what: &str) -> Result<()> {
    if logits.nrows() == 0 {
        return Err(Error::Shape(format!("{what}: empty batch")));
    }
    if logits.nrows() != n {
        return Err(Error::Shape(format!(
            "{what}: {} rows but {n} labels",
            logits.nrows()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of identity logits against class indices.
pub fn ide_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<LossGrad> {
    check_rows(logits, labels.len(), "ide_loss")?;
    let classes = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside [0, {classes})")));
    }
    let n = labels.len() as f64;
    let mut grad = softmax_rows(logits);
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
        value += lse - row[y];
        grad[[i, y]] -= 1.0;
    }
    grad /= n;
    Ok(LossGrad { value: value / n, grad })
}

/// Mean over rows of `-ln(p_target + guard)` for two-class logits, restricted
/// to rows where `mask` is true. Targets are class indices.
fn guarded_nll(logits: &Array2<f64>, targets: &[usize], mask: &[bool]) -> LossGrad {
    let probs = softmax_rows(logits);
    let mut grad = Array2::<f64>::zeros(logits.raw_dim());
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return LossGrad { value: 0.0, grad };
    }
    let n = count as f64;
    let mut value = 0.0;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let p = probs.row(i);
        value -= (p[t] + LOG_GUARD).ln();
        // d/dz_j of -ln(p_t + g) = -(p_t / (p_t + g)) (δ_tj - p_j)
        let s = p[t] / (p[t] + LOG_GUARD);
        for j in 0..logits.ncols() {
            let delta = if j == t { 1.0 } else { 0.0 };
            grad[[i, j]] = -s * (delta - p[j]) / n;
        }
    }
    LossGrad { value: value / n, grad }
}

/// Discriminator loss: cross-entropy of domain logits against the binary
/// central (1) / peripheral (0) label.
pub fn da_disc_loss(logits: &Array2<f64>, is_central: &[bool]) -> Result<LossGrad> {
    check_rows(logits, is_central.len(), "da_disc_loss")?;
    if logits.ncols() != 2 {
        return Err(Error::Shape("domain logits must have two columns".into()));
    }
    let targets: Vec<usize> = is_central.iter().map(|&c| usize::from(c)).collect();
    Ok(guarded_nll(logits, &targets, &vec![true; targets.len()]))
}

/// Transfer loss: `-mean log p_central`. With `peripheral_only` set, the mean
/// runs over peripheral rows only.
pub fn da_transfer_loss(logits: &Array2<f64>, is_central: &[bool], peripheral_only: bool) -> Result<LossGrad> {
    check_rows(logits, is_central.len(), "da_transfer_loss")?;
    if logits.ncols() != 2 {
        return Err(Error::Shape("domain logits must have two columns".into()));
    }
    let targets = vec![CENTRAL_CLASS; is_central.len()];
    let mask: Vec<bool> = is_central.iter().map(|&c| !peripheral_only || !c).collect();
    Ok(guarded_nll(logits, &targets, &mask))
}

/// Batch-hard triplet loss with Euclidean distances, averaged over anchors:
/// `mean_a max(0, max_p d(a,p) - min_n d(a,n) + margin)`.
pub fn triplet_batch_hard(emb: &Array2<f64>, labels: &[u32], margin: f64) -> Result<LossGrad> {
    check_rows(emb, labels.len(), "triplet_batch_hard")?;
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::InvalidArgument("triplet loss needs at least two identities".into()));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::InvalidArgument(format!("identity {l} has a single sample in the batch")));
    }

    let n = labels.len();
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (&emb.row(i) - &emb.row(j)).mapv(|v| v * v).sum().sqrt();
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }

    let mut grad = Array2::<f64>::zeros(emb.raw_dim());
    let mut value = 0.0;
    for a in 0..n {
        let mut pos = None::<(usize, f64)>;
        let mut neg = None::<(usize, f64)>;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist[[a, j]];
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let (p, dp) = pos.expect("checked: every label repeats");
        let (q, dq) = neg.expect("checked: two labels present");
        let hinge = dp - dq + margin;
        if hinge > 0.0 {
            value += hinge;
            for (j, d, sign) in [(p, dp, 1.0), (q, dq, -1.0)] {
                if d > 0.0 {
                    let dir = (&emb.row(a) - &emb.row(j)) * (sign / d / n as f64);
                    grad.row_mut(a).scaled_add(1.0, &dir);
                    grad.row_mut(j).scaled_add(-1.0, &dir);
                }
            }
        }
    }
    Ok(LossGrad {
        value: value / n as f64,
        grad,
    })
}

/// `KL(p‖q) + KL(q‖p)` of `p = softmax(x/τ)`, `q = softmax(r/τ)`, with guarded
/// logarithms. Returns the value and its gradient with respect to `x`.
pub fn symmetric_kl(x: ArrayView1<f64>, r: ArrayView1<f64>, tau: f64) -> (f64, Array1<f64>) {
    let p = softmax(x, tau);
    let q = softmax(r, tau);
    let lp = p.mapv(|v| (v + LOG_GUARD).ln());
    let lq = q.mapv(|v| (v + LOG_GUARD).ln());
    let diff = &p - &q;
    let value = (&diff * &(&lp - &lq)).sum();
    // dL/dp, then through the softmax Jacobian
    let g = &lp - &lq + &diff / &p.mapv(|v| v + LOG_GUARD);
    let pg = p.dot(&g);
    let grad = (&p * &g.mapv(|v| v - pg)) / tau;
    (value, grad)
}

/// Identity/domain labels of one batch row, as seen by the pool search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolQuery {
    pub identity_id: u32,
    pub domain_id: u32,
    pub is_central: bool,
}

#[derive(Debug, Clone)]
pub struct SeLoss {
    pub value: f64,
    pub grad: Array2<f64>,
    /// Rows without any eligible pool entry; they contribute zero.
    pub skipped: usize,
}

/// Similarity enhancement: for every row, the symmetric KL towards its top-k
/// pooled representations (other domains for peripheral rows, the same domain
/// for central rows), averaged over the retrieved set and then over the batch.
pub fn se_loss(emb: &Array2<f64>, queries: &[PoolQuery], pool: &IdPool, k: usize, tau: f64) -> Result<SeLoss> {
    check_rows(emb, queries.len(), "se_loss")?;
    if pool.is_empty() {
        return Err(Error::InvalidArgument("ID pool is empty".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidArgument("tau must be > 0".into()));
    }
    let n = queries.len() as f64;
    let mut grad = Array2::<f64>::zeros(emb.raw_dim());
    let mut value = 0.0;
    let mut skipped = 0;
    for (i, q) in queries.iter().enumerate() {
        let x = emb.row(i);
        let hits = pool.query_topk(x, q.identity_id, q.domain_id, q.is_central, k)?;
        if hits.is_empty() {
            skipped += 1;
            continue;
        }
        let scale = 1.0 / (hits.len() as f64 * n);
        for h in &hits {
            let (v, g) = symmetric_kl(x, h.representation, tau);
            value += v * scale;
            grad.row_mut(i).scaled_add(scale, &g);
        }
    }
    Ok(SeLoss { value, grad, skipped })
}

/// Individual loss terms of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ide: f64,
    pub triplet: f64,
    pub da_transfer: f64,
    pub da_disc: f64,
    pub se: f64,
}

/// The three optimized groups: `L1` on θ_f ∪ θ_i, `L2` on θ_m, `L3` on θ_d.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

pub fn total_objective(terms: &LossTerms, weights: &LossWeights, se_enabled: bool) -> Result<Objective> {
    let se = if se_enabled { terms.se } else { 0.0 };
    let obj = Objective {
        l1: terms.ide + weights.lambda1 * terms.triplet,
        l2: weights.lambda2 * terms.da_transfer + weights.lambda3 * se,
        l3: terms.da_disc,
    };
    if !(obj.l1.is_finite() && obj.l2.is_finite() && obj.l3.is_finite()) {
        return Err(Error::NonFinite(format!("objective {obj:?} from {terms:?}")));
    }
    Ok(obj)
}
