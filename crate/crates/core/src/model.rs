//! The toy scene-graph decoder. A bank of learned queries self-attends,
//! cross-attends over the scene's feature tokens, and feeds three heads:
//! class probabilities, boxes, and dense pairwise relation scores built from
//! the concatenated query pairs, gated by the pair-existence filter and the
//! endpoint confidences. Training matches each scene's ground truth onto the
//! queries, then backpropagates the multi-task loss through a fresh autodiff
//! tape per step.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::AdamW;
use crate::autodiff::params::{BlockLayout, ParamSet};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{BoundingBox, PredictedGraph, RelTensor, SceneGraph};
use crate::losses::{
    class_targets, filter_targets, relation_targets, LossBreakdown, LossWeights, NO_OBJECT_CE_WEIGHT, PROB_CLAMP,
};
use crate::matching::{match_graphs, MatchCostConfig};
use crate::relation::QueryBank;
use crate::synth::{feature_width, featurize, GenConfig, SceneFeatures, PREDICATES};

/// Which relation-score stage the model trains against and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Pairwise MLP scores alone.
    Raw,
    /// MLP scores scaled by both endpoint entity confidences.
    Rescored,
    /// Confidence scaling plus the pair-existence filter gate.
    Full,
}

/// Decoder shape and behavior switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_queries: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_classes: usize,
    pub n_predicates: usize,
    /// Width of each incoming feature token.
    pub d_in: usize,
    pub score_mode: ScoreMode,
    /// Swap the per-pair sigmoid for a softmax over predicates, so each
    /// ordered pair commits its probability mass to a single predicate.
    pub single_label: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_queries: 20,
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            n_classes: 6,
            n_predicates: PREDICATES.len(),
            d_in: feature_width(6),
            score_mode: ScoreMode::Full,
            single_label: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_queries,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.n_classes,
            self.n_predicates,
            self.d_in,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("every model dimension must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Default shapes with the data-dependent dimensions taken from a
    /// generation config.
    pub fn for_gen(gen: &GenConfig) -> ModelConfig {
        ModelConfig { n_classes: gen.n_classes, d_in: feature_width(gen.n_classes), ..ModelConfig::default() }
    }

    /// Feed-forward hidden width, fixed at twice the model width.
    fn d_ff(&self) -> usize {
        2 * self.d_model
    }
}

/// Optimizer settings for `train`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// The step-level learning rate follows a cosine curve from `lr` down to
    /// `lr * final_lr_fraction` over the whole run; 1.0 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-3, weight_decay: 1e-4, epochs: 12, final_lr_fraction: 0.1 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be finite and positive", self.lr)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay {} must be finite and nonnegative", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !self.final_lr_fraction.is_finite() || self.final_lr_fraction <= 0.0 || self.final_lr_fraction > 1.0 {
            return Err(Error::Config(format!("final_lr_fraction {} must lie in (0, 1]", self.final_lr_fraction)));
        }
        Ok(())
    }

    /// Learning rate for step `t` of `total` (cosine from lr to its floor).
    fn lr_at(&self, t: usize, total: usize) -> f64 {
        let floor = self.lr * self.final_lr_fraction;
        let progress = t as f64 / total.saturating_sub(1).max(1) as f64;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Block names and shapes in registration order. Initialization, leaf
/// binding, and the checkpoint loader all derive their layout from this one
/// listing.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut specs: Vec<(String, Vec<usize>)> = vec![
        ("queries".into(), vec![cfg.n_queries, d]),
        ("in_proj.w".into(), vec![cfg.d_in, d]),
        ("in_proj.b".into(), vec![d]),
    ];
    for l in 0..cfg.n_layers {
        for name in ["sa.wq", "sa.wk", "sa.wv", "sa.wo", "ca.wq", "ca.wk", "ca.wv", "ca.wo"] {
            specs.push((format!("dec{l}.{name}"), vec![d, d]));
        }
        specs.push((format!("dec{l}.ff.w1"), vec![d, cfg.d_ff()]));
        specs.push((format!("dec{l}.ff.b1"), vec![cfg.d_ff()]));
        specs.push((format!("dec{l}.ff.w2"), vec![cfg.d_ff(), d]));
        specs.push((format!("dec{l}.ff.b2"), vec![d]));
    }
    let c1 = cfg.n_classes + 1;
    specs.push(("cls.w".into(), vec![d, c1]));
    specs.push(("cls.b".into(), vec![c1]));
    specs.push(("box.w1".into(), vec![d, d]));
    specs.push(("box.b1".into(), vec![d]));
    specs.push(("box.w2".into(), vec![d, 4]));
    specs.push(("box.b2".into(), vec![4]));
    specs.push(("rel.w1".into(), vec![2 * d, d]));
    specs.push(("rel.b1".into(), vec![d]));
    specs.push(("rel.w2".into(), vec![d, cfg.n_predicates]));
    specs.push(("rel.b2".into(), vec![cfg.n_predicates]));
    specs
}

/// Parameter blocks bound to one tape as leaves, addressable by name.
struct Net {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Net {
    fn bind(tape: &Tape, params: &ParamSet) -> Result<Net> {
        let mut names = Vec::with_capacity(params.len());
        let mut tensors = Vec::with_capacity(params.len());
        for b in params.blocks() {
            names.push(b.name.clone());
            tensors.push(tape.leaf(&b.shape, b.data.clone())?);
        }
        Ok(Net { names, tensors })
    }

    /// Blocks come from `param_specs`, so a missing name is a programming
    /// error, not an input error.
    fn get(&self, name: &str) -> &Tensor {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter block {name:?}"));
        &self.tensors[i]
    }

    /// Gradients in block registration order.
    fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(Tensor::grad).collect()
    }
}

/// Multi-head scaled dot-product attention of `q_in` over `kv`.
fn attention(
    n_heads: usize,
    q_in: &Tensor,
    kv: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
) -> Result<Tensor> {
    let q = q_in.matmul(wq)?;
    let k = kv.matmul(wk)?;
    let v = kv.matmul(wv)?;
    let d = q.shape()[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut mixed: Option<Tensor> = None;
    for head in 0..n_heads {
        let (s, e) = (head * dh, (head + 1) * dh);
        let att = q.slice_cols(s, e)?.matmul_nt(&k.slice_cols(s, e)?)?.mul_scalar(scale).softmax_last()?;
        let mix = att.matmul(&v.slice_cols(s, e)?)?;
        mixed = Some(match mixed {
            Some(acc) => acc.concat_cols(&mix)?,
            None => mix,
        });
    }
    mixed.expect("n_heads is validated positive").matmul(wo)
}

/// Every tensor the heads produce, still on the tape.
struct ForwardT {
    class_probs: Tensor,
    boxes: Tensor,
    filter: Tensor,
    scores: Tensor,
    /// Final query bank values, one row per query.
    bank: Vec<Vec<f64>>,
}

fn forward_core(cfg: &ModelConfig, tape: &Tape, net: &Net, feats: &SceneFeatures) -> Result<ForwardT> {
    let n = cfg.n_queries;
    let t = feats.tokens.len();
    if t == 0 {
        return Err(Error::InvalidInput("scene features hold no tokens".into()));
    }
    if let Some(row) = feats.tokens.iter().find(|r| r.len() != cfg.d_in) {
        return Err(Error::shape("forward", format!("token width {} does not match d_in {}", row.len(), cfg.d_in)));
    }
    let mut flat = Vec::with_capacity(t * cfg.d_in);
    for row in &feats.tokens {
        flat.extend_from_slice(row);
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("scene features".into()));
    }

    let x = tape.leaf(&[t, cfg.d_in], flat)?;
    let mem = x.matmul(net.get("in_proj.w"))?.add(net.get("in_proj.b"))?.layernorm_last()?;

    // Pre-norm residual stack: self-attention, cross-attention over the
    // scene tokens, then the feed-forward block.
    let mut h = net.get("queries").clone();
    for l in 0..cfg.n_layers {
        let a = h.layernorm_last()?;
        let sa = attention(
            cfg.n_heads,
            &a,
            &a,
            net.get(&format!("dec{l}.sa.wq")),
            net.get(&format!("dec{l}.sa.wk")),
            net.get(&format!("dec{l}.sa.wv")),
            net.get(&format!("dec{l}.sa.wo")),
        )?;
        h = h.add(&sa)?;
        let a = h.layernorm_last()?;
        let ca = attention(
            cfg.n_heads,
            &a,
            &mem,
            net.get(&format!("dec{l}.ca.wq")),
            net.get(&format!("dec{l}.ca.wk")),
            net.get(&format!("dec{l}.ca.wv")),
            net.get(&format!("dec{l}.ca.wo")),
        )?;
        h = h.add(&ca)?;
        let a = h.layernorm_last()?;
        let ff = a
            .matmul(net.get(&format!("dec{l}.ff.w1")))?
            .add(net.get(&format!("dec{l}.ff.b1")))?
            .relu()
            .matmul(net.get(&format!("dec{l}.ff.w2")))?
            .add(net.get(&format!("dec{l}.ff.b2")))?;
        h = h.add(&ff)?;
    }
    let hq = h.layernorm_last()?;

    let class_probs = hq.matmul(net.get("cls.w"))?.add(net.get("cls.b"))?.softmax_last()?;
    let boxes = hq
        .matmul(net.get("box.w1"))?
        .add(net.get("box.b1"))?
        .relu()
        .matmul(net.get("box.w2"))?
        .add(net.get("box.b2"))?
        .sigmoid();

    // Pair rows are ordered (i, j) with i outer, matching the relation
    // tensor's flat layout.
    let pair = hq.repeat_interleave_rows(n)?.concat_cols(&hq.tile_rows(n)?)?;
    let logits = pair
        .matmul(net.get("rel.w1"))?
        .add(net.get("rel.b1"))?
        .relu()
        .matmul(net.get("rel.w2"))?
        .add(net.get("rel.b2"))?;
    let raw = if cfg.single_label { logits.softmax_last()? } else { logits.sigmoid() };

    let filter = hq.matmul_nt(&hq)?.mul_scalar(1.0 / (cfg.d_model as f64).sqrt()).sigmoid();
    let conf = class_probs.slice_cols(0, cfg.n_classes)?.max_last_dim()?.reshape(&[n, 1])?;
    let pair_conf = conf.repeat_interleave_rows(n)?.mul(&conf.tile_rows(n)?)?;
    let scores = match cfg.score_mode {
        ScoreMode::Raw => raw.clone(),
        ScoreMode::Rescored => raw.scale_rows(&pair_conf)?,
        ScoreMode::Full => raw.scale_rows(&filter.reshape(&[n * n])?)?.scale_rows(&pair_conf)?,
    };

    let bank: Vec<Vec<f64>> = hq.value().chunks(cfg.d_model).map(<[f64]>::to_vec).collect();
    Ok(ForwardT { class_probs, boxes, filter, scores, bank })
}

/// Detach the head tensors into a value-level graph.
fn snapshot(cfg: &ModelConfig, fw: &ForwardT) -> Result<PredictedGraph> {
    let n = cfg.n_queries;
    let cols = cfg.n_classes + 1;
    let class_probs: Vec<Vec<f64>> = fw.class_probs.value().chunks(cols).map(<[f64]>::to_vec).collect();
    let bvals = fw.boxes.value();
    let mut boxes = Vec::with_capacity(n);
    for r in 0..n {
        boxes.push(BoundingBox::new(bvals[r * 4], bvals[r * 4 + 1], bvals[r * 4 + 2], bvals[r * 4 + 3])?);
    }
    let rel = RelTensor::from_data(n, n, cfg.n_predicates, fw.scores.value())?;
    PredictedGraph::new(class_probs, boxes, rel)
}

/// Mean alpha-balanced focal loss of `pred` against a same-shape 0/1 target.
/// Both branches are evaluated and blended by the mask; the unselected branch
/// contributes an exact zero.
fn focal_on(pred: &Tensor, target: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    let p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = p.neg().add_scalar(1.0);
    let pos = q.powf(gamma).mul(&p.ln())?.mul_scalar(-alpha);
    let neg = p.powf(gamma).mul(&q.ln())?.mul_scalar(alpha - 1.0);
    let blended = target.mul(&pos)?.add(&target.neg().add_scalar(1.0).mul(&neg)?)?;
    Ok(blended.mean())
}

/// Weighted mean negative log-probability of each query's target class;
/// targets equal to the trailing no-object column are down-weighted.
fn entity_ce_t(tape: &Tape, class_probs: &Tensor, targets: &[usize], cols: usize) -> Result<Tensor> {
    let n = targets.len();
    let no_object = cols - 1;
    let mut onehot = vec![0.0; n * cols];
    let mut weights = Vec::with_capacity(n);
    let mut denom = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * cols + t] = 1.0;
        let w = if t == no_object { NO_OBJECT_CE_WEIGHT } else { 1.0 };
        weights.push(w);
        denom += w;
    }
    let oh = tape.leaf(&[n, cols], onehot)?;
    let wv = tape.leaf(&[n], weights)?;
    let picked = class_probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln().mul(&oh)?.scale_rows(&wv)?;
    Ok(picked.sum().mul_scalar(-1.0 / denom))
}

/// Mean L1 and mean (1 - GIoU) over the matched real ground-truth nodes.
fn box_losses_t(tape: &Tape, boxes: &Tensor, scene: &SceneGraph, sigma: &[usize]) -> Result<(Tensor, Tensor)> {
    let m = scene.n_entities();
    if m == 0 {
        return Ok((tape.scalar(0.0), tape.scalar(0.0)));
    }
    let idx: Vec<usize> = sigma[..m].to_vec();
    let pb = boxes.gather_rows(&idx)?;
    let mut gvals = Vec::with_capacity(m * 4);
    for e in &scene.entities {
        gvals.extend_from_slice(&[e.bbox.cx, e.bbox.cy, e.bbox.w, e.bbox.h]);
    }
    let gb = tape.leaf(&[m, 4], gvals)?;
    let inv_m = 1.0 / m as f64;
    let l1 = pb.sub(&gb)?.abs().sum().mul_scalar(inv_m);

    let col = |t: &Tensor, c: usize| t.slice_cols(c, c + 1);
    let corners = |b: &Tensor| -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let half_w = col(b, 2)?.mul_scalar(0.5);
        let half_h = col(b, 3)?.mul_scalar(0.5);
        Ok((col(b, 0)?.sub(&half_w)?, col(b, 1)?.sub(&half_h)?, col(b, 0)?.add(&half_w)?, col(b, 1)?.add(&half_h)?))
    };
    let (px0, py0, px1, py1) = corners(&pb)?;
    let (gx0, gy0, gx1, gy1) = corners(&gb)?;
    let iw = px1.min_elem(&gx1)?.sub(&px0.max_elem(&gx0)?)?.relu();
    let ih = py1.min_elem(&gy1)?.sub(&py0.max_elem(&gy0)?)?.relu();
    let inter = iw.mul(&ih)?;
    let pa = col(&pb, 2)?.mul(&col(&pb, 3)?)?;
    let ga = col(&gb, 2)?.mul(&col(&gb, 3)?)?;
    let union = ga.add(&pa)?.sub(&inter)?;
    let hull_w = px1.max_elem(&gx1)?.sub(&px0.min_elem(&gx0)?)?;
    let hull_h = py1.max_elem(&gy1)?.sub(&py0.min_elem(&gy0)?)?;
    let hull = hull_w.mul(&hull_h)?;
    let giou = inter.div(&union)?.sub(&hull.sub(&union)?.div(&hull)?)?;
    let giou_loss = giou.neg().add_scalar(1.0).sum().mul_scalar(inv_m);
    Ok((l1, giou_loss))
}

/// Multi-task loss at a caller-fixed assignment, on the tape. The filter
/// focal term participates only when the score chain uses the filter gate,
/// so ablated configurations train exactly what they score.
fn loss_terms(
    cfg: &ModelConfig,
    tape: &Tape,
    fw: &ForwardT,
    scene: &SceneGraph,
    sigma: &[usize],
    lw: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    lw.validate()?;
    let n = cfg.n_queries;
    let m = scene.n_entities();
    if m > n {
        return Err(Error::GtExceedsQueries { gt: m, queries: n });
    }
    if sigma.len() != n {
        return Err(Error::shape(
            "loss_terms",
            format!("assignment covers {} rows, the model decodes {n} queries", sigma.len()),
        ));
    }
    if sigma.iter().take(m).any(|&q| q >= n) {
        return Err(Error::InvalidInput("assignment points outside the query range".into()));
    }
    if scene.n_predicates() != cfg.n_predicates {
        return Err(Error::shape(
            "loss_terms",
            format!("scene holds {} predicates, the model scores {}", scene.n_predicates(), cfg.n_predicates),
        ));
    }

    let (box_t, giou_t) = box_losses_t(tape, &fw.boxes, scene, sigma)?;
    let targets = class_targets(scene, sigma, n, cfg.n_classes);
    let ent_t = entity_ce_t(tape, &fw.class_probs, &targets, cfg.n_classes + 1)?;
    let rel_target = relation_targets(scene, sigma, n);
    let rt = tape.leaf(&[n * n, cfg.n_predicates], rel_target.data().to_vec())?;
    let rel_t = focal_on(&fw.scores, &rt, lw.focal_gamma, lw.focal_alpha)?;
    let filter_term = if cfg.score_mode == ScoreMode::Full {
        let flat: Vec<f64> = filter_targets(scene, sigma, n).into_iter().flatten().collect();
        let ft = tape.leaf(&[n, n], flat)?;
        Some(focal_on(&fw.filter, &ft, lw.focal_gamma, lw.focal_alpha)?)
    } else {
        None
    };

    let filter_val = filter_term.as_ref().map_or(0.0, Tensor::item);
    let rel_plus_filter = match &filter_term {
        Some(f) => rel_t.add(f)?,
        None => rel_t.clone(),
    };
    let total = box_t
        .mul_scalar(lw.lambda_box)
        .add(&giou_t.mul_scalar(lw.lambda_giou))?
        .add(&ent_t.mul_scalar(lw.lambda_ent))?
        .add(&rel_plus_filter.mul_scalar(lw.lambda_rel))?;
    let bd = LossBreakdown::assemble(box_t.item(), giou_t.item(), ent_t.item(), rel_t.item(), filter_val, lw);
    Ok((total, bd))
}

pub const CHECKPOINT_FORMAT_VERSION: &str = "dgk-ckpt-v1";
pub const CHECKPOINT_MANIFEST_FILE: &str = "ckpt.json";
pub const CHECKPOINT_WEIGHTS_FILE: &str = "ckpt.bin";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    version: String,
    config: ModelConfig,
    layout: Vec<BlockLayout>,
}

/// A configuration plus its parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Fresh model with deterministic initialization: uniform Xavier limits
    /// for weight matrices, zero biases, small uniform query embeddings.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in param_specs(&cfg) {
            let count: usize = shape.iter().product();
            let data: Vec<f64> = if name == "queries" {
                (0..count).map(|_| rng.gen_range(-0.5..0.5)).collect()
            } else if shape.len() == 2 {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..count).map(|_| rng.gen_range(-limit..limit)).collect()
            } else {
                vec![0.0; count]
            };
            params.push(&name, &shape, data)?;
        }
        Ok(Model { cfg, params })
    }

    /// One inference pass: the final query bank plus the decoded graph.
    /// Pure in (params, feats); repeated calls are bit-identical.
    pub fn forward(&self, feats: &SceneFeatures) -> Result<(QueryBank, PredictedGraph)> {
        let tape = Tape::new();
        let net = Net::bind(&tape, &self.params)?;
        let fw = forward_core(&self.cfg, &tape, &net, feats)?;
        let pred = snapshot(&self.cfg, &fw)?;
        Ok((QueryBank::new(fw.bank)?, pred))
    }

    /// Write `ckpt.json` (version, config, block layout) and `ckpt.bin`
    /// (little-endian f64 weights) under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = CheckpointManifest {
            version: CHECKPOINT_FORMAT_VERSION.to_string(),
            config: self.cfg.clone(),
            layout: self.params.layout(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(dir.join(CHECKPOINT_MANIFEST_FILE), text)?;
        fs::write(dir.join(CHECKPOINT_WEIGHTS_FILE), self.params.to_bytes())?;
        Ok(())
    }

    /// Restore a model written by `save`. The manifest layout must agree
    /// with the blocks its own config implies.
    pub fn load(dir: &Path) -> Result<Model> {
        let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST_FILE))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {:?}, this build reads {:?}",
                manifest.version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        manifest.config.validate()?;
        let bytes = fs::read(dir.join(CHECKPOINT_WEIGHTS_FILE))?;
        let params = ParamSet::from_bytes(&manifest.layout, &bytes)?;
        let specs = param_specs(&manifest.config);
        let blocks = params.blocks();
        if blocks.len() != specs.len()
            || blocks.iter().zip(&specs).any(|(b, (name, shape))| b.name != *name || b.shape != *shape)
        {
            return Err(Error::Format("checkpoint layout does not match its model config".into()));
        }
        Ok(Model { cfg: manifest.config, params })
    }
}

/// Loss components at a caller-fixed assignment; no gradients.
pub fn loss_at(
    model: &Model,
    scene: &SceneGraph,
    feats: &SceneFeatures,
    sigma: &[usize],
    lw: &LossWeights,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let net = Net::bind(&tape, &model.params)?;
    let fw = forward_core(&model.cfg, &tape, &net, feats)?;
    let (_, bd) = loss_terms(&model.cfg, &tape, &fw, scene, sigma, lw)?;
    Ok(bd)
}

/// Loss components plus the gradient of the weighted total for every
/// parameter block, in block order, at a caller-fixed assignment.
pub fn loss_and_grads(
    model: &Model,
    scene: &SceneGraph,
    feats: &SceneFeatures,
    sigma: &[usize],
    lw: &LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let net = Net::bind(&tape, &model.params)?;
    let fw = forward_core(&model.cfg, &tape, &net, feats)?;
    let (total, bd) = loss_terms(&model.cfg, &tape, &fw, scene, sigma, lw)?;
    total.backward()?;
    Ok((bd, net.grads()))
}

fn train_step(
    model: &mut Model,
    scene: &SceneGraph,
    feats: &SceneFeatures,
    lw: &LossWeights,
    mc: &MatchCostConfig,
    opt: &mut AdamW,
    step: usize,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let net = Net::bind(&tape, &model.params)?;
    let fw = forward_core(&model.cfg, &tape, &net, feats)?;
    let pred = snapshot(&model.cfg, &fw)?;
    let assignment = match_graphs(scene, &pred, mc)?;
    let (total, bd) = loss_terms(&model.cfg, &tape, &fw, scene, &assignment.sigma, lw)?;
    if !bd.total.is_finite() {
        return Err(Error::Training(format!("non-finite loss at step {step}")));
    }
    total.backward()?;
    let grads = net.grads();
    let mut data = model.params.take_data();
    let outcome = opt.step(&mut data, &grads);
    model.params.restore_data(data);
    outcome.map_err(|e| match e {
        Error::Training(msg) => Error::Training(format!("step {step}: {msg}")),
        other => other,
    })?;
    Ok(bd)
}

/// Optimize the model over the scenes for `oc.epochs` epochs, one matched
/// scene per optimizer step, in a seeded shuffle order per epoch. Returns the
/// per-epoch mean loss breakdown. Deterministic given (model, scenes, seed).
pub fn train(
    model: &mut Model,
    scenes: &[SceneGraph],
    gen: &GenConfig,
    lw: &LossWeights,
    mc: &MatchCostConfig,
    oc: &OptimConfig,
    seed: u64,
) -> Result<Vec<LossBreakdown>> {
    model.cfg.validate()?;
    gen.validate()?;
    lw.validate()?;
    mc.validate()?;
    oc.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidInput("training needs at least one scene".into()));
    }
    if gen.n_classes != model.cfg.n_classes || feature_width(gen.n_classes) != model.cfg.d_in {
        return Err(Error::Config(format!(
            "model expects {} classes and {}-wide tokens, generation config yields {} and {}",
            model.cfg.n_classes,
            model.cfg.d_in,
            gen.n_classes,
            feature_width(gen.n_classes),
        )));
    }
    let max_objects = scenes.iter().map(SceneGraph::n_entities).max().unwrap_or(0);
    if max_objects > model.cfg.n_queries {
        return Err(Error::GtExceedsQueries { gt: max_objects, queries: model.cfg.n_queries });
    }
    if let Some(s) = scenes.iter().find(|s| s.n_predicates() != model.cfg.n_predicates) {
        return Err(Error::shape(
            "train",
            format!("scene holds {} predicates, the model scores {}", s.n_predicates(), model.cfg.n_predicates),
        ));
    }

    let feats = scenes.iter().map(|s| featurize(s, gen)).collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(&model.params.block_sizes(), oc.lr, oc.weight_decay);
    let total_steps = oc.epochs * scenes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut curve = Vec::with_capacity(oc.epochs);
    let mut step = 0;
    for _ in 0..oc.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut sums = [0.0; 5];
        for &si in &order {
            opt.lr = oc.lr_at(step, total_steps);
            let bd = train_step(model, &scenes[si], &feats[si], lw, mc, &mut opt, step)?;
            sums[0] += bd.box_l1;
            sums[1] += bd.giou;
            sums[2] += bd.ent;
            sums[3] += bd.rel;
            sums[4] += bd.filter;
            step += 1;
        }
        let k = scenes.len() as f64;
        curve.push(LossBreakdown::assemble(sums[0] / k, sums[1] / k, sums[2] / k, sums[3] / k, sums[4] / k, lw));
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::total_loss;
    use crate::relation::{MlpParams, PairScores};
    use crate::synth::generate;

    fn small_cfg() -> ModelConfig {
        ModelConfig { n_queries: 10, d_model: 32, n_layers: 2, n_heads: 4, ..ModelConfig::default() }
    }

    // Generation must cover every predicate across the split, so even a
    // single-scene fixture draws from a small batch.
    fn one_scene(seed: u64) -> (GenConfig, SceneGraph, SceneFeatures) {
        let gen = GenConfig { seed, n_scenes: 16, n_test_scenes: 0, ..GenConfig::default() };
        let split = generate(&gen).unwrap();
        let scene = split.train.into_iter().next().unwrap();
        let feats = featurize(&scene, &gen).unwrap();
        (gen, scene, feats)
    }

    #[test]
    fn forward_output_shapes_match_the_config() {
        let cfg = small_cfg();
        let (_, _, feats) = one_scene(0);
        let model = Model::init(cfg.clone(), 7).unwrap();
        let (bank, pred) = model.forward(&feats).unwrap();
        assert_eq!(bank.n(), cfg.n_queries, "one query vector per query");
        assert_eq!(bank.d_q, cfg.d_model, "query width must equal d_model");
        assert_eq!(pred.n_queries(), cfg.n_queries);
        assert_eq!(pred.n_class_cols(), cfg.n_classes + 1, "class head covers every class plus no-object");
        assert_eq!(
            pred.relation_scores.shape(),
            (cfg.n_queries, cfg.n_queries, cfg.n_predicates),
            "relation tensor must be n_queries x n_queries x n_predicates"
        );
    }

    #[test]
    fn forward_is_bit_identical_on_repeat() {
        let (_, _, feats) = one_scene(1);
        let model = Model::init(small_cfg(), 3).unwrap();
        let (bank_a, pred_a) = model.forward(&feats).unwrap();
        let (bank_b, pred_b) = model.forward(&feats).unwrap();
        assert_eq!(bank_a.q, bank_b.q, "repeated forward passes must agree bit for bit");
        assert_eq!(pred_a, pred_b, "repeated forward passes must agree bit for bit");
    }

    #[test]
    fn permuting_feature_tokens_leaves_outputs_within_tolerance() {
        let (_, _, feats) = one_scene(2);
        let model = Model::init(small_cfg(), 5).unwrap();
        let (_, pred) = model.forward(&feats).unwrap();
        let mut rotated = feats.clone();
        rotated.tokens.rotate_left(1);
        let (_, pred_rot) = model.forward(&rotated).unwrap();
        for (a, b) in pred.class_probs.iter().flatten().zip(pred_rot.class_probs.iter().flatten()) {
            assert!((a - b).abs() < 1e-9, "class probs moved under token permutation: {a} vs {b}");
        }
        for (a, b) in pred.boxes.iter().zip(&pred_rot.boxes) {
            assert!(a.l1_distance(b) < 1e-9, "boxes moved under token permutation");
        }
        for (a, b) in pred.relation_scores.data().iter().zip(pred_rot.relation_scores.data()) {
            assert!((a - b).abs() < 1e-9, "relation scores moved under token permutation: {a} vs {b}");
        }
    }

    #[test]
    fn zeroed_relation_head_matches_the_scalar_chain() {
        let cfg = small_cfg();
        let (_, _, feats) = one_scene(3);
        let mut model = Model::init(cfg.clone(), 9).unwrap();
        let names: Vec<String> = model.params.blocks().iter().map(|b| b.name.clone()).collect();
        let mut data = model.params.take_data();
        for (i, name) in names.iter().enumerate() {
            if name.starts_with("rel.") {
                data[i].fill(0.0);
            }
        }
        model.params.restore_data(data);

        let (bank, pred) = model.forward(&feats).unwrap();
        let d = cfg.d_model;
        let zero_mlp = MlpParams {
            layers: vec![
                (vec![vec![0.0; 2 * d]; d], vec![0.0; d]),
                (vec![vec![0.0; d]; cfg.n_predicates], vec![0.0; cfg.n_predicates]),
            ],
        };
        let chain = PairScores::compute(&bank, &zero_mlp, &pred.entity_confidences()).unwrap();
        for (a, b) in pred.relation_scores.data().iter().zip(chain.rescored.data()) {
            assert!(
                (a - b).abs() <= 1e-12,
                "decoder relation scores must reproduce the unit-function chain: {a} vs {b}"
            );
        }
    }

    #[test]
    fn tensor_loss_components_match_the_scalar_losses() {
        let (_, scene, feats) = one_scene(4);
        let lw = LossWeights::default();
        let mc = MatchCostConfig::default();
        for mode in [ScoreMode::Raw, ScoreMode::Full] {
            let cfg = ModelConfig { score_mode: mode, ..small_cfg() };
            let model = Model::init(cfg, 13).unwrap();
            let (_, pred) = model.forward(&feats).unwrap();
            let assignment = match_graphs(&scene, &pred, &mc).unwrap();
            let scalar = total_loss(&scene, &pred, &assignment, &lw).unwrap();
            let tensor = loss_at(&model, &scene, &feats, &assignment.sigma, &lw).unwrap();
            assert!((scalar.box_l1 - tensor.box_l1).abs() <= 1e-12, "box term drifted: {scalar:?} vs {tensor:?}");
            assert!((scalar.giou - tensor.giou).abs() <= 1e-12, "giou term drifted: {scalar:?} vs {tensor:?}");
            assert!((scalar.ent - tensor.ent).abs() <= 1e-12, "entity term drifted: {scalar:?} vs {tensor:?}");
            assert!((scalar.rel - tensor.rel).abs() <= 1e-12, "relation term drifted: {scalar:?} vs {tensor:?}");
            let expected_total = scalar.total + lw.lambda_rel * tensor.filter;
            assert!(
                (expected_total - tensor.total).abs() <= 1e-12,
                "total must be the scalar total plus the filter term under lambda_rel"
            );
            if mode == ScoreMode::Raw {
                assert_eq!(tensor.filter, 0.0, "raw mode must not train the filter");
            } else {
                assert!(tensor.filter > 0.0, "full mode must include a filter term");
            }
        }
    }

    #[test]
    fn single_label_scores_form_a_distribution_per_pair() {
        let cfg = ModelConfig { score_mode: ScoreMode::Raw, single_label: true, ..small_cfg() };
        let (_, _, feats) = one_scene(5);
        let model = Model::init(cfg.clone(), 21).unwrap();
        let (_, pred) = model.forward(&feats).unwrap();
        for i in 0..cfg.n_queries {
            for j in 0..cfg.n_queries {
                let s: f64 = pred.relation_scores.pair(i, j).iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "softmax pair ({i},{j}) sums to {s}, expected 1");
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = ModelConfig { n_queries: 5, d_model: 16, n_layers: 1, n_heads: 2, ..ModelConfig::default() };
        let gen = GenConfig { seed: 6, n_scenes: 24, n_test_scenes: 0, objects_per_scene: [3, 3], ..GenConfig::default() };
        let split = generate(&gen).unwrap();
        let scene = &split.train[0];
        let feats = featurize(scene, &gen).unwrap();
        let model = Model::init(cfg, 11).unwrap();
        let lw = LossWeights::default();
        let (_, pred) = model.forward(&feats).unwrap();
        let sigma = match_graphs(scene, &pred, &MatchCostConfig::default()).unwrap().sigma;
        let (_, grads) = loss_and_grads(&model, scene, &feats, &sigma, &lw).unwrap();

        let sizes = model.params.block_sizes();
        let total: usize = sizes.iter().sum();
        let n_probes = (total / 100).max(40);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        for _ in 0..n_probes {
            let flat = rng.gen_range(0..total);
            let (bi, off) = {
                let mut rest = flat;
                let mut bi = 0;
                while rest >= sizes[bi] {
                    rest -= sizes[bi];
                    bi += 1;
                }
                (bi, rest)
            };
            let perturbed = |delta: f64| -> f64 {
                let mut probe = model.clone();
                let mut data = probe.params.take_data();
                data[bi][off] += delta;
                probe.params.restore_data(data);
                loss_at(&probe, scene, &feats, &sigma, &lw).unwrap().total
            };
            let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let analytic = grads[bi][off];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            assert!(
                rel <= 1e-4,
                "gradient mismatch at block {bi} offset {off}: analytic {analytic}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn training_loss_decreases_over_first_five_epochs() {
        let gen = GenConfig { seed: 0, n_scenes: 200, n_test_scenes: 0, ..GenConfig::default() };
        let split = generate(&gen).unwrap();
        let mut model = Model::init(small_cfg(), 0).unwrap();
        let oc = OptimConfig { epochs: 5, ..OptimConfig::default() };
        let curve = train(
            &mut model,
            &split.train,
            &gen,
            &LossWeights::default(),
            &MatchCostConfig::default(),
            &oc,
            0,
        )
        .unwrap();
        assert_eq!(curve.len(), 5, "one breakdown per epoch");
        for w in curve.windows(2) {
            assert!(
                w[1].total < w[0].total,
                "epoch loss must strictly decrease early in training: {} then {}",
                w[0].total,
                w[1].total
            );
        }
    }

    #[test]
    fn overfitting_ten_scenes_reaches_high_recall() {
        let gen = GenConfig { seed: 0, n_scenes: 10, n_test_scenes: 0, ..GenConfig::default() };
        let split = generate(&gen).unwrap();
        let cfg = ModelConfig { n_queries: 12, d_model: 48, n_layers: 2, n_heads: 4, ..ModelConfig::default() };
        let mut model = Model::init(cfg, 2).unwrap();
        let oc = OptimConfig { epochs: 200, lr: 3e-3, ..OptimConfig::default() };
        train(&mut model, &split.train, &gen, &LossWeights::default(), &MatchCostConfig::default(), &oc, 2)
            .unwrap();
        let mut recalls = Vec::new();
        for scene in &split.train {
            let feats = featurize(scene, &gen).unwrap();
            let (_, pred) = model.forward(&feats).unwrap();
            recalls.push(naive_recall_at_k(scene, &pred, 20));
        }
        let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
        assert!(mean >= 0.95, "overfit recall@20 {mean} below 0.95 ({recalls:?})");
    }

    /// Top-k triplet recall with argmax classes and inclusive 0.5 IoU, each
    /// ground-truth triplet creditable once.
    fn naive_recall_at_k(scene: &SceneGraph, pred: &PredictedGraph, k: usize) -> f64 {
        let gt = scene.to_triplets();
        if gt.is_empty() {
            return 1.0;
        }
        let n = pred.n_queries();
        let p = pred.relation_scores.shape().2;
        let mut cand: Vec<(f64, usize, usize, usize)> = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j || pred.argmax_class(i) == pred.no_object_id() || pred.argmax_class(j) == pred.no_object_id()
                {
                    continue;
                }
                for q in 0..p {
                    cand.push((pred.relation_scores.get(i, j, q), i, j, q));
                }
            }
        }
        cand.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then_with(|| (a.1, a.2, a.3).cmp(&(b.1, b.2, b.3)))
        });
        cand.truncate(k);
        let mut used = vec![false; gt.len()];
        let mut hits = 0usize;
        for (_, i, j, q) in cand {
            for (g, t) in gt.iter().enumerate() {
                if used[g] || t.predicate_id != q {
                    continue;
                }
                let se = &scene.entities[t.subject_idx];
                let oe = &scene.entities[t.object_idx];
                if pred.argmax_class(i) != se.class_id || pred.argmax_class(j) != oe.class_id {
                    continue;
                }
                if se.bbox.iou(&pred.boxes[i]) < 0.5 || oe.bbox.iou(&pred.boxes[j]) < 0.5 {
                    continue;
                }
                used[g] = true;
                hits += 1;
                break;
            }
        }
        hits as f64 / gt.len() as f64
    }

    #[test]
    fn same_seed_training_runs_are_bit_identical() {
        let gen = GenConfig { seed: 3, n_scenes: 8, n_test_scenes: 0, ..GenConfig::default() };
        let split = generate(&gen).unwrap();
        let oc = OptimConfig { epochs: 2, ..OptimConfig::default() };
        let run = || {
            let mut model = Model::init(small_cfg(), 4).unwrap();
            let curve =
                train(&mut model, &split.train, &gen, &LossWeights::default(), &MatchCostConfig::default(), &oc, 4)
                    .unwrap();
            (model, curve)
        };
        let (model_a, curve_a) = run();
        let (model_b, curve_b) = run();
        assert_eq!(model_a.params, model_b.params, "same-seed training must produce identical weights");
        assert_eq!(
            curve_a.last().unwrap().total,
            curve_b.last().unwrap().total,
            "same-seed training must produce the identical final loss"
        );
    }

    #[test]
    fn checkpoint_round_trip_preserves_model_and_outputs() {
        let (_, _, feats) = one_scene(7);
        let model = Model::init(small_cfg(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(model, back, "checkpoint round trip must preserve config and weights exactly");
        let (_, pred_a) = model.forward(&feats).unwrap();
        let (_, pred_b) = back.forward(&feats).unwrap();
        assert_eq!(pred_a, pred_b, "restored model must decode identically");
    }

    #[test]
    fn loading_a_tampered_manifest_is_rejected() {
        let model = Model::init(small_cfg(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let path = dir.path().join(CHECKPOINT_MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap().replace("dgk-ckpt-v1", "dgk-ckpt-v0");
        std::fs::write(&path, text).unwrap();
        let err = Model::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version"), "version mismatch must be reported, got: {err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_heads = ModelConfig { d_model: 30, n_heads: 4, ..ModelConfig::default() };
        assert!(bad_heads.validate().is_err(), "d_model must divide evenly into heads");
        assert!(Model::init(bad_heads, 0).is_err(), "init must refuse an invalid config");

        let gen = GenConfig { seed: 5, n_scenes: 4, n_test_scenes: 0, objects_per_scene: [5, 6], ..GenConfig::default() };
        let split = generate(&gen).unwrap();
        let cfg = ModelConfig { n_queries: 4, ..small_cfg() };
        let mut model = Model::init(cfg, 0).unwrap();
        let err = train(
            &mut model,
            &split.train,
            &gen,
            &LossWeights::default(),
            &MatchCostConfig::default(),
            &OptimConfig::default(),
            0,
        )
        .unwrap_err();
        assert!(
            err.to_string().starts_with("more GT nodes than queries"),
            "oversized scenes must be rejected up front, got: {err}"
        );
    }

    #[test]
    fn forward_rejects_malformed_tokens() {
        let (_, _, feats) = one_scene(9);
        let model = Model::init(small_cfg(), 1).unwrap();
        let mut narrow = feats.clone();
        narrow.tokens[0].pop();
        assert!(model.forward(&narrow).is_err(), "token width mismatch must be rejected");
        let mut poisoned = feats;
        poisoned.tokens[0][0] = f64::NAN;
        assert!(model.forward(&poisoned).is_err(), "non-finite features must be rejected");
    }
}
