//! Dense pairwise relation scoring: compositional pair scores from
//! concatenated query embeddings, the Gram-matrix relation filter, filter
//! distillation, and entity-confidence re-scoring. Pure score-level reference
//! functions; the trainable model reproduces the same chain with tensors.

use crate::error::{Error, Result};
use crate::graph::RelTensor;

/// Query embeddings: N rows of width d_q.
#[derive(Debug, Clone)]
pub struct QueryBank {
    pub q: Vec<Vec<f64>>,
    pub d_q: usize,
}

impl QueryBank {
    pub fn new(q: Vec<Vec<f64>>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidInput("query bank needs at least one query".into()));
        }
        let d_q = q[0].len();
        if d_q == 0 {
            return Err(Error::InvalidInput("query width must be positive".into()));
        }
        for (i, row) in q.iter().enumerate() {
            if row.len() != d_q {
                return Err(Error::shape("QueryBank::new", format!("row {i} has width {}, expected {d_q}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("query row {i}")));
            }
        }
        Ok(QueryBank { q, d_q })
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }
}

/// Plain MLP parameters: (weight, bias) per layer, weight stored row-major as
/// out×in. ReLU between layers, nothing after the last.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl MlpParams {
    pub fn input_width(&self) -> usize {
        self.layers.first().map(|(w, _)| w.first().map_or(0, |r| r.len())).unwrap_or(0)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|(w, _)| w.len()).unwrap_or(0)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidInput("MLP needs at least one layer".into()));
        }
        let mut width = self.input_width();
        for (idx, (w, b)) in self.layers.iter().enumerate() {
            if w.is_empty() || w.iter().any(|row| row.len() != width) {
                return Err(Error::shape("MlpParams", format!("layer {idx} expects input width {width}")));
            }
            if b.len() != w.len() {
                return Err(Error::shape("MlpParams", format!("layer {idx} bias width {} != {}", b.len(), w.len())));
            }
            width = w.len();
        }
        Ok(())
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (idx, (w, b)) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; w.len()];
            for (o, row) in w.iter().enumerate() {
                let mut acc = b[o];
                for (v, x) in row.iter().zip(&cur) {
                    acc += v * x;
                }
                next[o] = acc;
            }
            if idx != last {
                for v in &mut next {
                    *v = v.max(0.0);
                }
            }
            cur = next;
        }
        cur
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Raw pair scores: sigmoid(MLP(q_i ⊕ q_j)) per ordered pair. Directed by
/// construction; swapping i and j changes the concatenation order.
pub fn compositional_scores(q: &QueryBank, mlp: &MlpParams) -> Result<RelTensor> {
    mlp.validate()?;
    if mlp.input_width() != 2 * q.d_q {
        return Err(Error::shape(
            "compositional_scores",
            format!("MLP input width {} != 2·d_q = {}", mlp.input_width(), 2 * q.d_q),
        ));
    }
    let n = q.n();
    let p = mlp.output_width();
    let mut out = RelTensor::zeros(n, n, p);
    let mut buf = vec![0.0; 2 * q.d_q];
    for i in 0..n {
        for j in 0..n {
            buf[..q.d_q].copy_from_slice(&q.q[i]);
            buf[q.d_q..].copy_from_slice(&q.q[j]);
            let logits = mlp.apply(&buf);
            for (k, l) in logits.iter().enumerate() {
                out.set(i, j, k, sigmoid(*l));
            }
        }
    }
    Ok(out)
}

/// Relation-existence filter: sigmoid(Q·Qᵀ/√d_q). Symmetric because the Gram
/// matrix is.
pub fn relation_filter(q: &QueryBank) -> Vec<Vec<f64>> {
    let n = q.n();
    let scale = 1.0 / (q.d_q as f64).sqrt();
    let mut f = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = q.q[i].iter().zip(&q.q[j]).map(|(a, b)| a * b).sum();
            f[i][j] = sigmoid(dot * scale);
        }
    }
    f
}

/// Gate raw scores by the pair filter.
pub fn distill(raw: &RelTensor, filter: &[Vec<f64>]) -> Result<RelTensor> {
    let (n1, n2, p) = raw.shape();
    if filter.len() != n1 || filter.iter().any(|row| row.len() != n2) {
        return Err(Error::shape("distill", format!("filter grid does not match {n1}x{n2} scores")));
    }
    let mut out = RelTensor::zeros(n1, n2, p);
    for i in 0..n1 {
        for j in 0..n2 {
            for k in 0..p {
                out.set(i, j, k, filter[i][j] * raw.get(i, j, k));
            }
        }
    }
    Ok(out)
}

/// Scale pair scores by both endpoint entity confidences.
pub fn rescore(distilled: &RelTensor, entity_conf: &[f64]) -> Result<RelTensor> {
    let (n1, n2, p) = distilled.shape();
    if entity_conf.len() != n1 || n1 != n2 {
        return Err(Error::shape(
            "rescore",
            format!("{} confidences for {n1}x{n2} scores", entity_conf.len()),
        ));
    }
    if entity_conf.iter().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0) {
        return Err(Error::InvalidInput("entity confidences must lie in [0,1]".into()));
    }
    let mut out = RelTensor::zeros(n1, n2, p);
    for i in 0..n1 {
        for j in 0..n2 {
            let cc = entity_conf[i] * entity_conf[j];
            for k in 0..p {
                out.set(i, j, k, cc * distilled.get(i, j, k));
            }
        }
    }
    Ok(out)
}

/// All four stages of the relation-score chain for one query bank.
#[derive(Debug, Clone)]
pub struct PairScores {
    pub raw: RelTensor,
    pub filter: Vec<Vec<f64>>,
    pub distilled: RelTensor,
    pub rescored: RelTensor,
}

impl PairScores {
    pub fn compute(q: &QueryBank, mlp: &MlpParams, entity_conf: &[f64]) -> Result<Self> {
        let raw = compositional_scores(q, mlp)?;
        let filter = relation_filter(q);
        let distilled = distill(&raw, &filter)?;
        let rescored = rescore(&distilled, entity_conf)?;
        Ok(PairScores { raw, filter, distilled, rescored })
    }
}
