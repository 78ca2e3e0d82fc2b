//! Multi-task training loss: box L1, generalized IoU, entity cross-entropy,
//! and the pairwise focal relation loss over the full N×N×P tensor. These are
//! the plain-number reference implementations; training recomputes the same
//! quantities through the autodiff tensor graph and the two are cross-checked
//! in tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BoundingBox, PredictedGraph, RelTensor, SceneGraph};
use crate::matching::Assignment;

/// Loss term weights plus focal parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_box: f64,
    pub lambda_giou: f64,
    pub lambda_ent: f64,
    pub lambda_rel: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_box: 5.0,
            lambda_giou: 2.0,
            lambda_ent: 1.0,
            lambda_rel: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_box, self.lambda_giou, self.lambda_ent, self.lambda_rel];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !self.focal_gamma.is_finite() || self.focal_gamma < 0.0 {
            return Err(Error::Config("focal_gamma must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config("focal_alpha must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Unmatched queries are classified as ∅ far more often than any real class,
/// so their cross-entropy term is down-weighted.
pub const NO_OBJECT_CE_WEIGHT: f64 = 0.1;

/// Probabilities are clamped away from {0,1} before any logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

/// Per-component loss values; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "box")]
    pub box_l1: f64,
    pub giou: f64,
    pub ent: f64,
    pub rel: f64,
    pub filter: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Assemble the weighted total. The filter term shares λ_rel: both train
    /// the pairwise relation machinery.
    pub fn assemble(box_l1: f64, giou: f64, ent: f64, rel: f64, filter: f64, w: &LossWeights) -> Self {
        let total = w.lambda_box * box_l1
            + w.lambda_giou * giou
            + w.lambda_ent * ent
            + w.lambda_rel * (rel + filter);
        LossBreakdown { box_l1, giou, ent, rel, filter, total }
    }
}

/// Generalized IoU in (−1, 1]: IoU minus the fraction of the enclosing hull
/// not covered by the union.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(Error::InvalidInput("giou of a zero-area box is undefined".into()));
    }
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    Ok(inter / union - (hull - union) / hull)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// α-balanced focal term for one cell.
fn focal_cell(pred: f64, target: f64, gamma: f64, alpha: f64) -> f64 {
    let p = clamp_prob(pred);
    if target >= 0.5 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Mean focal loss over every cell of the relation tensor. Cells touching
/// dummy pairs participate with target 0; that is what trains negatives.
pub fn relation_focal_loss(pred: &RelTensor, target: &RelTensor, w: &LossWeights) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "relation_focal_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| focal_cell(*p, *t, w.focal_gamma, w.focal_alpha))
        .sum();
    Ok(sum / n as f64)
}

/// Focal loss for the N×N relation-existence filter against binary targets.
pub fn filter_focal_loss(filter: &[Vec<f64>], target: &[Vec<f64>], w: &LossWeights) -> Result<f64> {
    if filter.len() != target.len() || filter.iter().zip(target).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::shape("filter_focal_loss", "filter and target grids differ"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (frow, trow) in filter.iter().zip(target) {
        for (f, t) in frow.iter().zip(trow) {
            sum += focal_cell(*f, *t, w.focal_gamma, w.focal_alpha);
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Weighted mean negative log-probability of the target class per query.
/// Targets equal to the last column (∅) are down-weighted.
pub fn entity_ce_loss(class_probs: &[Vec<f64>], matched_targets: &[usize]) -> Result<f64> {
    if class_probs.len() != matched_targets.len() {
        return Err(Error::shape(
            "entity_ce_loss",
            format!("{} rows vs {} targets", class_probs.len(), matched_targets.len()),
        ));
    }
    if class_probs.is_empty() {
        return Ok(0.0);
    }
    let cols = class_probs[0].len();
    let no_object = cols - 1;
    let mut num = 0.0;
    let mut denom = 0.0;
    for (row, &t) in class_probs.iter().zip(matched_targets) {
        if t >= cols {
            return Err(Error::InvalidInput(format!("class target {t} out of range for {cols} columns")));
        }
        let w = if t == no_object { NO_OBJECT_CE_WEIGHT } else { 1.0 };
        num += w * -clamp_prob(row[t]).ln();
        denom += w;
    }
    Ok(num / denom)
}

/// Class target per query: the matched real GT class, ∅ everywhere else.
pub fn class_targets(gt: &SceneGraph, sigma: &[usize], n_queries: usize, no_object: usize) -> Vec<usize> {
    let mut targets = vec![no_object; n_queries];
    for (i, e) in gt.entities.iter().enumerate() {
        targets[sigma[i]] = e.class_id;
    }
    targets
}

/// GT relation bits carried into query coordinates by σ; zero elsewhere.
pub fn relation_targets(gt: &SceneGraph, sigma: &[usize], n_queries: usize) -> RelTensor {
    let m = gt.n_entities();
    let p = gt.n_predicates();
    let mut out = RelTensor::zeros(n_queries, n_queries, p);
    for i in 0..m {
        for j in 0..m {
            for k in 0..p {
                if gt.relations.get(i, j, k) == 1.0 {
                    out.set(sigma[i], sigma[j], k, 1.0);
                }
            }
        }
    }
    out
}

/// Binary "ordered pair carries at least one GT relation" grid in query
/// coordinates; the filter head trains against this.
pub fn filter_targets(gt: &SceneGraph, sigma: &[usize], n_queries: usize) -> Vec<Vec<f64>> {
    let m = gt.n_entities();
    let p = gt.n_predicates();
    let mut out = vec![vec![0.0; n_queries]; n_queries];
    for i in 0..m {
        for j in 0..m {
            if (0..p).any(|k| gt.relations.get(i, j, k) == 1.0) {
                out[sigma[i]][sigma[j]] = 1.0;
            }
        }
    }
    out
}

/// Full multi-task loss at a fixed assignment. Box terms run over matched
/// real GT nodes only; the relation target is the σ-permuted GT tensor. The
/// filter component is zero here: this entry point scores a bare
/// `PredictedGraph`, which carries no filter grid (see `filter_focal_loss`).
pub fn total_loss(
    gt: &SceneGraph,
    pred: &PredictedGraph,
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    let n = pred.n_queries();
    let m = gt.n_entities();
    if assignment.sigma.len() != n {
        return Err(Error::shape(
            "total_loss",
            format!("assignment covers {} rows, prediction has {n} queries", assignment.sigma.len()),
        ));
    }
    if m > n {
        return Err(Error::GtExceedsQueries { gt: m, queries: n });
    }

    let sigma = &assignment.sigma;
    let mut box_l1 = 0.0;
    let mut giou_term = 0.0;
    for (i, e) in gt.entities.iter().enumerate() {
        let pb = &pred.boxes[sigma[i]];
        box_l1 += e.bbox.l1_distance(pb);
        giou_term += 1.0 - giou(&e.bbox, pb)?;
    }
    if m > 0 {
        box_l1 /= m as f64;
        giou_term /= m as f64;
    }

    let targets = class_targets(gt, sigma, n, pred.no_object_id());
    let ent = entity_ce_loss(&pred.class_probs, &targets)?;

    let rel_target = relation_targets(gt, sigma, n);
    let rel = relation_focal_loss(&pred.relation_scores, &rel_target, w)?;

    Ok(LossBreakdown::assemble(box_l1, giou_term, ent, rel, 0.0, w))
}
