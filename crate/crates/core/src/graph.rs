//! Scene-graph data model: vocabularies, boxes, entities, dense relation
//! tensors, triplet conversions, dummy-node padding, and the `dgk-v1` JSON
//! dataset format.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Entity-class and predicate name tables. Index position is the stable id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    entity_classes: Vec<String>,
    predicates: Vec<String>,
}

impl Vocab {
    pub fn new(entity_classes: Vec<String>, predicates: Vec<String>) -> Result<Self> {
        if entity_classes.is_empty() || predicates.is_empty() {
            return Err(Error::InvalidInput("vocab needs at least one class and one predicate".into()));
        }
        for (label, names) in [("entity class", &entity_classes), ("predicate", &predicates)] {
            let set: BTreeSet<&String> = names.iter().collect();
            if set.len() != names.len() {
                return Err(Error::InvalidInput(format!("duplicate {label} name in vocab")));
            }
        }
        Ok(Vocab { entity_classes, predicates })
    }

    pub fn n_classes(&self) -> usize {
        self.entity_classes.len()
    }

    pub fn n_predicates(&self) -> usize {
        self.predicates.len()
    }

    /// The reserved "no object" class sits one past the real classes, so
    /// padded ground truth and predictions share a single class space.
    pub fn no_object_id(&self) -> usize {
        self.entity_classes.len()
    }

    pub fn entity_classes(&self) -> &[String] {
        &self.entity_classes
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }
}

/// Axis-aligned box in normalized center/size form; all coordinates in [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidInput(format!(
                "box coordinates must lie in [0,1]: [{}, {}, {}, {}]",
                self.cx, self.cy, self.w, self.h
            )));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidInput(format!("box sides must be positive: w={} h={}", self.w, self.h)));
        }
        Ok(())
    }

    /// Corner form (x0, y0, x1, y1), derived on demand for IoU-style math.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn l1_distance(&self, other: &BoundingBox) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entity {
    pub class_id: usize,
    pub bbox: BoundingBox,
}

/// Directed relation instance <subject, predicate, object>. Ground-truth
/// triplets carry score 1.0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub subject_idx: usize,
    pub object_idx: usize,
    pub predicate_id: usize,
    pub score: f64,
}

impl Triplet {
    pub fn gt(subject_idx: usize, object_idx: usize, predicate_id: usize) -> Self {
        Triplet { subject_idx, object_idx, predicate_id, score: 1.0 }
    }
}

/// Dense N1×N2×P tensor of relation values. Ground truth stores {0,1};
/// predictions store scores in [0,1]. One shared type keeps the matcher and
/// loss code free of conversions.
#[derive(Debug, Clone, PartialEq)]
pub struct RelTensor {
    n1: usize,
    n2: usize,
    p: usize,
    data: Vec<f64>,
}

impl RelTensor {
    pub fn zeros(n1: usize, n2: usize, p: usize) -> Self {
        RelTensor { n1, n2, p, data: vec![0.0; n1 * n2 * p] }
    }

    pub fn from_data(n1: usize, n2: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n1 * n2 * p {
            return Err(Error::shape(
                "RelTensor::from_data",
                format!("expected {} values for {}x{}x{}, got {}", n1 * n2 * p, n1, n2, p, data.len()),
            ));
        }
        Ok(RelTensor { n1, n2, p, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n1, self.n2, self.p)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.n2 + j) * self.p + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.n2 + j) * self.p + k] = v;
    }

    /// Predicate score vector for one ordered pair.
    pub fn pair(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.n2 + j) * self.p;
        &self.data[base..base + self.p]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0)
    }
}

/// Ground-truth scene: M entities plus a binary M×M×P relation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub entities: Vec<Entity>,
    pub relations: RelTensor,
}

impl SceneGraph {
    pub fn new(entities: Vec<Entity>, relations: RelTensor) -> Result<Self> {
        let m = entities.len();
        let (n1, n2, _) = relations.shape();
        if n1 != m || n2 != m {
            return Err(Error::shape(
                "SceneGraph::new",
                format!("relation tensor is {n1}x{n2} for {m} entities"),
            ));
        }
        if !relations.is_binary() {
            return Err(Error::InvalidInput("ground-truth relation tensor must be binary".into()));
        }
        for e in &entities {
            e.bbox.validate()?;
        }
        Ok(SceneGraph { entities, relations })
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_predicates(&self) -> usize {
        self.relations.shape().2
    }

    /// All set bits as triplets, ordered by (subject, object, predicate).
    pub fn to_triplets(&self) -> Vec<Triplet> {
        let (m, _, p) = self.relations.shape();
        let mut out = Vec::new();
        for i in 0..m {
            for j in 0..m {
                for k in 0..p {
                    if self.relations.get(i, j, k) == 1.0 {
                        out.push(Triplet::gt(i, j, k));
                    }
                }
            }
        }
        out
    }

    /// Inverse of `to_triplets`: rebuild the dense tensor from a triplet list.
    pub fn from_triplets(m: usize, triplets: &[Triplet], p: usize) -> Result<RelTensor> {
        let mut t = RelTensor::zeros(m, m, p);
        for tr in triplets {
            if tr.subject_idx >= m || tr.object_idx >= m || tr.predicate_id >= p {
                return Err(Error::InvalidInput(format!(
                    "triplet ({}, {}, {}) out of range for M={m}, P={p}",
                    tr.subject_idx, tr.object_idx, tr.predicate_id
                )));
            }
            t.set(tr.subject_idx, tr.object_idx, tr.predicate_id, 1.0);
        }
        Ok(t)
    }

    /// Extend to n nodes with ∅-class dummies. Dummy boxes are the full frame
    /// placeholder; every relation touching a dummy stays zero, so the triplet
    /// set is unchanged.
    pub fn pad_to(&self, n: usize, no_object_class: usize) -> Result<SceneGraph> {
        let m = self.n_entities();
        if n < m {
            return Err(Error::InvalidInput(format!("cannot pad {m} entities down to {n}")));
        }
        let p = self.n_predicates();
        let mut entities = self.entities.clone();
        let dummy_box = BoundingBox { cx: 0.5, cy: 0.5, w: 1.0, h: 1.0 };
        entities.extend((m..n).map(|_| Entity { class_id: no_object_class, bbox: dummy_box }));
        let mut relations = RelTensor::zeros(n, n, p);
        for i in 0..m {
            for j in 0..m {
                for k in 0..p {
                    relations.set(i, j, k, self.relations.get(i, j, k));
                }
            }
        }
        Ok(SceneGraph { entities, relations })
    }
}

/// Model output for one image: row-stochastic class probabilities over C+1
/// columns (last column is ∅), one box per query, and independent per-predicate
/// relation scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedGraph {
    pub class_probs: Vec<Vec<f64>>,
    pub boxes: Vec<BoundingBox>,
    pub relation_scores: RelTensor,
}

pub const CLASS_PROB_ROW_TOL: f64 = 1e-6;

impl PredictedGraph {
    pub fn new(class_probs: Vec<Vec<f64>>, boxes: Vec<BoundingBox>, relation_scores: RelTensor) -> Result<Self> {
        let n = class_probs.len();
        if n == 0 {
            return Err(Error::InvalidInput("prediction needs at least one query".into()));
        }
        let cols = class_probs[0].len();
        if cols < 2 {
            return Err(Error::InvalidInput("class_probs needs at least one real class plus the ∅ column".into()));
        }
        for (i, row) in class_probs.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape("PredictedGraph::new", format!("class_probs row {i} width {} != {cols}", row.len())));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > CLASS_PROB_ROW_TOL {
                return Err(Error::InvalidInput(format!(
                    "class_probs row {i} is not a probability vector (sum {sum})"
                )));
            }
        }
        if boxes.len() != n {
            return Err(Error::shape("PredictedGraph::new", format!("{} boxes for {n} queries", boxes.len())));
        }
        for b in &boxes {
            b.validate()?;
        }
        let (n1, n2, _) = relation_scores.shape();
        if n1 != n || n2 != n {
            return Err(Error::shape(
                "PredictedGraph::new",
                format!("relation tensor is {n1}x{n2} for {n} queries"),
            ));
        }
        if !relation_scores.in_unit_range() {
            return Err(Error::InvalidInput("relation scores must lie in [0,1]".into()));
        }
        Ok(PredictedGraph { class_probs, boxes, relation_scores })
    }

    pub fn n_queries(&self) -> usize {
        self.class_probs.len()
    }

    /// Number of class columns including the trailing ∅ column.
    pub fn n_class_cols(&self) -> usize {
        self.class_probs[0].len()
    }

    pub fn no_object_id(&self) -> usize {
        self.n_class_cols() - 1
    }

    pub fn argmax_class(&self, i: usize) -> usize {
        let row = &self.class_probs[i];
        let mut best = 0;
        for (c, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = c;
            }
        }
        best
    }

    /// Detector confidence per query: the maximum probability over real
    /// classes, the ∅ column excluded.
    pub fn entity_confidences(&self) -> Vec<f64> {
        let c = self.no_object_id();
        self.class_probs
            .iter()
            .map(|row| row[..c].iter().cloned().fold(0.0f64, f64::max))
            .collect()
    }
}

/// A vocabulary plus its scenes; the unit the `dgk-v1` JSON file stores.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub scenes: Vec<SceneGraph>,
}

pub const DATASET_FORMAT_VERSION: &str = "dgk-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetJson {
    version: String,
    vocab: VocabJson,
    scenes: Vec<SceneJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabJson {
    entity_classes: Vec<String>,
    predicates: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneJson {
    entities: Vec<EntityJson>,
    triplets: Vec<[usize; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntityJson {
    class: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

impl Dataset {
    pub fn new(vocab: Vocab, scenes: Vec<SceneGraph>) -> Result<Self> {
        for (idx, s) in scenes.iter().enumerate() {
            if s.n_predicates() != vocab.n_predicates() {
                return Err(Error::shape(
                    "Dataset::new",
                    format!("scene {idx} has {} predicates, vocab has {}", s.n_predicates(), vocab.n_predicates()),
                ));
            }
            if let Some(e) = s.entities.iter().find(|e| e.class_id >= vocab.n_classes()) {
                return Err(Error::InvalidInput(format!(
                    "scene {idx} references class {} outside vocab of size {}",
                    e.class_id,
                    vocab.n_classes()
                )));
            }
        }
        Ok(Dataset { vocab, scenes })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = DatasetJson {
            version: DATASET_FORMAT_VERSION.to_string(),
            vocab: VocabJson {
                entity_classes: self.vocab.entity_classes().to_vec(),
                predicates: self.vocab.predicates().to_vec(),
            },
            scenes: self
                .scenes
                .iter()
                .map(|s| SceneJson {
                    entities: s
                        .entities
                        .iter()
                        .map(|e| EntityJson {
                            class: e.class_id,
                            bbox: [e.bbox.cx, e.bbox.cy, e.bbox.w, e.bbox.h],
                        })
                        .collect(),
                    triplets: s
                        .to_triplets()
                        .iter()
                        .map(|t| [t.subject_idx, t.object_idx, t.predicate_id])
                        .collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DatasetJson = serde_json::from_str(text)?;
        if doc.version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "expected dataset version {DATASET_FORMAT_VERSION}, found {:?}",
                doc.version
            )));
        }
        let vocab = Vocab::new(doc.vocab.entity_classes, doc.vocab.predicates)?;
        let p = vocab.n_predicates();
        let mut scenes = Vec::with_capacity(doc.scenes.len());
        for (idx, s) in doc.scenes.into_iter().enumerate() {
            let entities: Vec<Entity> = s
                .entities
                .iter()
                .map(|e| {
                    Ok(Entity {
                        class_id: e.class,
                        bbox: BoundingBox::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3])?,
                    })
                })
                .collect::<Result<_>>()?;
            let triplets: Vec<Triplet> =
                s.triplets.iter().map(|t| Triplet::gt(t[0], t[1], t[2])).collect();
            let relations = SceneGraph::from_triplets(entities.len(), &triplets, p)
                .map_err(|e| Error::Format(format!("scene {idx}: {e}")))?;
            scenes.push(SceneGraph::new(entities, relations)?);
        }
        Dataset::new(vocab, scenes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Dataset::from_json(&text).map_err(|e| match e {
            Error::Json(inner) => Error::Format(format!("{}: {inner}", path.display())),
            other => other,
        })
    }
}

pub const PREDICTED_FORMAT_VERSION: &str = "dgk-pred-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictedJson {
    version: String,
    class_probs: Vec<Vec<f64>>,
    boxes: Vec<[f64; 4]>,
    /// relation_scores[i][j] is the predicate score row for the ordered
    /// pair (i, j).
    relation_scores: Vec<Vec<Vec<f64>>>,
}

impl PredictedGraph {
    pub fn to_json(&self) -> Result<String> {
        let n = self.n_queries();
        let doc = PredictedJson {
            version: PREDICTED_FORMAT_VERSION.to_string(),
            class_probs: self.class_probs.clone(),
            boxes: self.boxes.iter().map(|b| [b.cx, b.cy, b.w, b.h]).collect(),
            relation_scores: (0..n)
                .map(|i| (0..n).map(|j| self.relation_scores.pair(i, j).to_vec()).collect())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PredictedJson = serde_json::from_str(text)?;
        if doc.version != PREDICTED_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "expected prediction version {PREDICTED_FORMAT_VERSION}, found {:?}",
                doc.version
            )));
        }
        let boxes: Vec<BoundingBox> = doc
            .boxes
            .iter()
            .map(|b| BoundingBox::new(b[0], b[1], b[2], b[3]))
            .collect::<Result<_>>()?;
        let n = doc.relation_scores.len();
        let p = doc
            .relation_scores
            .first()
            .and_then(|row| row.first())
            .map(Vec::len)
            .ok_or_else(|| Error::Format("relation_scores must be an n x n x p tensor".into()))?;
        let mut rel = RelTensor::zeros(n, n, p);
        for (i, row) in doc.relation_scores.iter().enumerate() {
            if row.len() != n {
                return Err(Error::shape("PredictedGraph::from_json", format!("row {i} has {} pairs for {n} queries", row.len())));
            }
            for (j, cell) in row.iter().enumerate() {
                if cell.len() != p {
                    return Err(Error::shape(
                        "PredictedGraph::from_json",
                        format!("pair ({i}, {j}) scores {} predicates, expected {p}", cell.len()),
                    ));
                }
                for (k, v) in cell.iter().enumerate() {
                    rel.set(i, j, k, *v);
                }
            }
        }
        PredictedGraph::new(doc.class_probs, boxes, rel)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        PredictedGraph::from_json(&text).map_err(|e| match e {
            Error::Json(inner) => Error::Format(format!("{}: {inner}", path.display())),
            other => other,
        })
    }
}
