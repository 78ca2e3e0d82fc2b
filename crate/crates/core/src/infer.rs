//! Inference post-processing. Every off-diagonal query pair whose endpoints
//! decode to real classes yields one candidate triplet per predicate; scores
//! get a frequency adjustment that favors rare predicates, near-duplicates
//! are suppressed greedily, and the top k survive.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BoundingBox, PredictedGraph, RelTensor, SceneGraph};

/// Scores below this floor are clamped before adjustment; candidates tied at
/// the floor fall back to the lexicographic order.
pub const SCORE_FLOOR: f64 = 1e-7;

/// Predicate frequency prior: positive entries summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicatePrior {
    pub pi: Vec<f64>,
}

impl PredicatePrior {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        let prior = PredicatePrior { pi };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pi.is_empty() {
            return Err(Error::InvalidInput("prior needs at least one predicate".into()));
        }
        if self.pi.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidInput(format!("prior entries must be positive: {:?}", self.pi)));
        }
        let sum: f64 = self.pi.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("prior sums to {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn uniform(n_predicates: usize) -> Result<Self> {
        if n_predicates == 0 {
            return Err(Error::InvalidInput("prior needs at least one predicate".into()));
        }
        Self::new(vec![1.0 / n_predicates as f64; n_predicates])
    }

    /// Laplace-smoothed predicate frequencies over the scenes' triplets, so
    /// predicates absent from the data still carry positive mass.
    pub fn from_scenes(scenes: &[SceneGraph], n_predicates: usize) -> Result<Self> {
        if n_predicates == 0 {
            return Err(Error::InvalidInput("prior needs at least one predicate".into()));
        }
        let mut counts = vec![0usize; n_predicates];
        for s in scenes {
            if s.n_predicates() != n_predicates {
                return Err(Error::shape(
                    "prior",
                    format!("scene holds {} predicates, prior covers {n_predicates}", s.n_predicates()),
                ));
            }
            for t in s.to_triplets() {
                counts[t.predicate_id] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let denom = (total + n_predicates) as f64;
        Self::new(counts.iter().map(|c| (c + 1) as f64 / denom).collect())
    }
}

/// Post-processing knobs for `predict`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Strength of the rare-predicate adjustment; 0 disables it.
    pub tau: f64,
    /// Both endpoint IoUs must reach this for a triplet to count as a
    /// duplicate.
    pub nms_iou: f64,
    pub top_k: usize,
    /// Commit each ordered pair to its single highest-scoring predicate
    /// before ranking (for the softmax relation head).
    pub single_label: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { tau: 0.15, nms_iou: 0.5, top_k: 100, single_label: false }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(Error::Config(format!("tau {} must be finite and nonnegative", self.tau)));
        }
        if !self.nms_iou.is_finite() || self.nms_iou <= 0.0 || self.nms_iou > 1.0 {
            return Err(Error::Config(format!("nms_iou {} must lie in (0, 1]", self.nms_iou)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        Ok(())
    }
}

/// One scored triplet, self-contained: query indices, classes, and boxes
/// travel with it so suppression and evaluation need no side lookups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedTriplet {
    pub s: usize,
    pub o: usize,
    pub p: usize,
    pub score: f64,
    #[serde(with = "box_array")]
    pub s_box: BoundingBox,
    #[serde(with = "box_array")]
    pub o_box: BoundingBox,
    pub s_class: usize,
    pub o_class: usize,
}

/// Boxes serialize as [cx, cy, w, h] in prediction files.
mod box_array {
    use super::BoundingBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BoundingBox, s: S) -> std::result::Result<S::Ok, S::Error> {
        [b.cx, b.cy, b.w, b.h].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BoundingBox, D::Error> {
        let [cx, cy, w, h] = <[f64; 4]>::deserialize(d)?;
        BoundingBox::new(cx, cy, w, h).map_err(serde::de::Error::custom)
    }
}

/// Final ranked predictions, best first, at most the configured k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTriplets {
    pub triplets: Vec<RankedTriplet>,
}

/// Descending by score, then lexicographic by (subject, object, predicate)
/// so equal scores rank deterministically.
pub fn rank_order(a: &RankedTriplet, b: &RankedTriplet) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| (a.s, a.o, a.p).cmp(&(b.s, b.o, b.p)))
}

/// Rescale scores so rarer predicates rank higher: s' = s * (pi_min/pi_p)^tau.
/// In log space this is log(s) - tau*log(pi_p) shifted by a global constant,
/// so rankings match the additive form while scores stay inside [0,1]. The
/// map is monotone within each predicate, and tau = 0 or a uniform prior
/// reproduce the input exactly (above the clamp floor).
pub fn logit_adjust(scores: &RelTensor, prior: &PredicatePrior, tau: f64) -> Result<RelTensor> {
    prior.validate()?;
    if !tau.is_finite() || tau < 0.0 {
        return Err(Error::InvalidInput(format!("tau {tau} must be finite and nonnegative")));
    }
    let (n1, n2, p) = scores.shape();
    if prior.pi.len() != p {
        return Err(Error::shape(
            "logit_adjust",
            format!("prior covers {} predicates, tensor has {p}", prior.pi.len()),
        ));
    }
    let pi_min = prior.pi.iter().copied().fold(f64::INFINITY, f64::min);
    let factors: Vec<f64> = prior.pi.iter().map(|pi| (pi_min / pi).powf(tau)).collect();
    let mut out = scores.data().to_vec();
    for (idx, v) in out.iter_mut().enumerate() {
        *v = v.max(SCORE_FLOOR) * factors[idx % p];
    }
    RelTensor::from_data(n1, n2, p, out)
}

/// Greedy suppression against the kept set: a candidate is dropped iff some
/// already-kept triplet shares its (subject class, predicate, object class)
/// and both endpoint IoUs reach the threshold. Input must be ranked best
/// first; suppressed triplets do not shield later ones.
pub fn triplet_nms(ranked: &[RankedTriplet], iou_threshold: f64) -> Vec<RankedTriplet> {
    let mut kept: Vec<RankedTriplet> = Vec::new();
    for c in ranked {
        let duplicate = kept.iter().any(|k| {
            k.s_class == c.s_class
                && k.o_class == c.o_class
                && k.p == c.p
                && k.s_box.iou(&c.s_box) >= iou_threshold
                && k.o_box.iou(&c.o_box) >= iou_threshold
        });
        if !duplicate {
            kept.push(*c);
        }
    }
    kept
}

/// Full chain: enumerate candidates (diagonal pairs and no-object endpoints
/// excluded), adjust, rank, suppress duplicates, keep the top k. In
/// single-label mode each ordered pair first commits to its argmax predicate
/// under the unadjusted scores.
pub fn predict(pred: &PredictedGraph, prior: &PredicatePrior, ic: &InferConfig) -> Result<RankedTriplets> {
    ic.validate()?;
    let adjusted = logit_adjust(&pred.relation_scores, prior, ic.tau)?;
    let n = pred.n_queries();
    let p = adjusted.shape().2;
    let no_object = pred.no_object_id();
    let mut cand: Vec<RankedTriplet> = Vec::new();
    for i in 0..n {
        let ci = pred.argmax_class(i);
        if ci == no_object {
            continue;
        }
        for j in 0..n {
            if j == i {
                continue;
            }
            let cj = pred.argmax_class(j);
            if cj == no_object {
                continue;
            }
            let make = |q: usize| RankedTriplet {
                s: i,
                o: j,
                p: q,
                score: adjusted.get(i, j, q),
                s_box: pred.boxes[i],
                o_box: pred.boxes[j],
                s_class: ci,
                o_class: cj,
            };
            if ic.single_label {
                let row = pred.relation_scores.pair(i, j);
                let q = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(q, _)| q)
                    .expect("n_predicates is positive");
                cand.push(make(q));
            } else {
                for q in 0..p {
                    cand.push(make(q));
                }
            }
        }
    }
    cand.sort_by(rank_order);
    let mut kept = triplet_nms(&cand, ic.nms_iou);
    kept.truncate(ic.top_k);
    Ok(RankedTriplets { triplets: kept })
}

/// Predictions for one scene, keyed by its index in the evaluated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePredictions {
    pub image_id: usize,
    pub triplets: Vec<RankedTriplet>,
}

pub fn save_predictions(path: &Path, preds: &[ImagePredictions]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(preds)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<ImagePredictions>> {
    let text = fs::read_to_string(path)?;
    let preds: Vec<ImagePredictions> = serde_json::from_str(&text)?;
    for ip in &preds {
        if let Some(t) = ip.triplets.iter().find(|t| !t.score.is_finite()) {
            return Err(Error::NonFinite(format!("score of triplet ({}, {}, {})", t.s, t.p, t.o)));
        }
    }
    Ok(preds)
}
