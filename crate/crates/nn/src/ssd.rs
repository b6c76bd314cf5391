//! Single-shot multibox detector.
//!
//! A stack of stride-2 `3×3` conv sections produces feature maps of
//! decreasing size. Selected maps feed a localization head (`4` offsets per
//! default box) and a confidence head (`classes` logits per default box,
//! background first). Predictions are flattened in anchor order: layer,
//! row, column, box.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vmmc_core::anchors::{generate_anchors, AnchorPlan, AnchorSet};
use vmmc_core::loss::{build_targets, softmax, ssd_loss, AnchorTarget, DetectorLossConfig};
use vmmc_core::matching::{match_anchors, GroundTruth, DEFAULT_VARIANCES};
use vmmc_core::matching::decode;
use vmmc_core::{nms, BoundingBox, ClassId, Detection, NUM_CLASSES};

use crate::layers::{Conv2d, ConvBn};
use crate::param::{join, Adam, AdamConfig, Module, Param};
use crate::tensor::Tensor;
use crate::NnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsdSpec {
    pub input_size: usize,
    /// Filters of the leading sections, the part taken from a pre-trained
    /// detector.
    pub backbone: Vec<usize>,
    /// Filters of the sections appended after the backbone.
    pub extras: Vec<usize>,
    /// Sections (indexed over backbone then extras) whose outputs feed heads,
    /// ascending; the last section must be one of them.
    pub sources: Vec<usize>,
    /// Object labels; the confidence head adds a background class in front.
    pub labels: Vec<String>,
    pub variances: [f64; 2],
}

impl SsdSpec {
    /// 300×300 input with the canonical 38, 19, 10, 5, 3, 1 source grids.
    pub fn ssd300(labels: Vec<String>) -> Self {
        Self {
            input_size: 300,
            backbone: vec![16, 32, 64, 64],
            extras: vec![64, 64, 64, 64, 64],
            sources: vec![2, 3, 4, 5, 6, 8],
            labels,
            variances: DEFAULT_VARIANCES,
        }
    }

    /// 96×96 input with 12, 6, 3, 2, 1 source grids.
    pub fn compact(labels: Vec<String>) -> Self {
        Self {
            input_size: 96,
            backbone: vec![16, 32, 48],
            extras: vec![64, 64, 64, 64],
            sources: vec![2, 3, 4, 5, 6],
            labels,
            variances: DEFAULT_VARIANCES,
        }
    }

    /// Background plus labels.
    pub fn classes(&self) -> usize {
        self.labels.len() + 1
    }

    fn sections(&self) -> usize {
        self.backbone.len() + self.extras.len()
    }

    /// Side of every section output.
    pub fn feature_sizes(&self) -> Vec<usize> {
        let mut s = self.input_size;
        (0..self.sections())
            .map(|_| {
                s = s.div_ceil(2);
                s
            })
            .collect()
    }

    pub fn anchor_plan(&self) -> AnchorPlan {
        let sizes = self.feature_sizes();
        AnchorPlan::standard(&self.sources.iter().map(|&i| sizes[i]).collect::<Vec<_>>())
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Spec(m.to_string()));
        if self.input_size == 0 || self.backbone.is_empty() {
            return bad("input size and backbone must be non-empty");
        }
        if self.backbone.iter().chain(&self.extras).any(|&f| f == 0) {
            return bad("section filter counts must be positive");
        }
        if self.labels.is_empty() || self.labels.len() > NUM_CLASSES {
            return bad("between 1 and 7 object labels are required");
        }
        if self.sources.is_empty() || self.sources.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sources must be non-empty and strictly ascending");
        }
        if *self.sources.last().expect("non-empty") != self.sections() - 1 {
            return bad("the last section must feed a head");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsdOutput {
    pub batch: usize,
    /// `batch × anchors × 4`
    pub loc: Vec<f32>,
    /// `batch × anchors × classes`
    pub conf: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SsdNetwork {
    spec: SsdSpec,
    pub sections: Vec<ConvBn>,
    pub loc_heads: Vec<Conv2d>,
    pub conf_heads: Vec<Conv2d>,
    anchors: AnchorSet,
    frozen_backbone: bool,
}

pub fn build_detector(spec: &SsdSpec, seed: u64) -> Result<SsdNetwork, NnError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = 3;
    let mut sections = Vec::with_capacity(spec.sections());
    for &f in spec.backbone.iter().chain(&spec.extras) {
        sections.push(ConvBn::new(c, f, 3, 2, true, &mut rng));
        c = f;
    }
    let plan = spec.anchor_plan();
    let (mut loc_heads, mut conf_heads) = (Vec::new(), Vec::new());
    for (&src, layer) in spec.sources.iter().zip(&plan.layers) {
        let ch = sections[src].conv.out_channels;
        let boxes = layer.boxes_per_cell();
        loc_heads.push(Conv2d::new(ch, boxes * 4, 3, 1, 1, &mut rng));
        conf_heads.push(Conv2d::new(ch, boxes * spec.classes(), 3, 1, 1, &mut rng));
    }
    for head in loc_heads.iter_mut().chain(&mut conf_heads) {
        head.weight.value.iter_mut().for_each(|w| *w *= 0.1);
    }
    Ok(SsdNetwork { spec: spec.clone(), sections, loc_heads, conf_heads, anchors: generate_anchors(&plan), frozen_backbone: false })
}

impl SsdNetwork {
    pub fn spec(&self) -> &SsdSpec {
        &self.spec
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    /// Freezing marks backbone parameters untrainable and runs the backbone
    /// in inference mode, so neither weights nor running statistics change.
    pub fn set_frozen_backbone(&mut self, frozen: bool) {
        self.frozen_backbone = frozen;
        for s in &mut self.sections[..self.spec.backbone.len()] {
            s.visit_mut("", &mut |name, p| {
                if !name.contains("running_") {
                    p.trainable = !frozen;
                }
            });
        }
    }

    pub fn frozen_backbone(&self) -> bool {
        self.frozen_backbone
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        let s = self.spec.input_size;
        let [n, c, h, w] = x.shape();
        if n == 0 || c != 3 || h != s || w != s {
            return Err(NnError::Shape(format!("expected N×3×{s}×{s}, got {:?}", x.shape())));
        }
        Ok(())
    }

    fn flatten(&self, maps: &[Tensor], per_box: usize, out: &mut [f32]) {
        let total = self.anchors.len();
        for (k, map) in maps.iter().enumerate() {
            let layer = &self.anchors.plan.layers[k];
            let (g, boxes, off) = (layer.grid, layer.boxes_per_cell(), self.anchors.offsets[k]);
            let plane = g * g;
            for n in 0..map.batch() {
                let src = map.item(n);
                for cell in 0..plane {
                    for b in 0..boxes {
                        let a = off + cell * boxes + b;
                        for j in 0..per_box {
                            out[(n * total + a) * per_box + j] = src[(b * per_box + j) * plane + cell];
                        }
                    }
                }
            }
        }
    }

    fn unflatten(&self, k: usize, grad: &[f32], per_box: usize, batch: usize) -> Tensor {
        let total = self.anchors.len();
        let layer = &self.anchors.plan.layers[k];
        let (g, boxes, off) = (layer.grid, layer.boxes_per_cell(), self.anchors.offsets[k]);
        let plane = g * g;
        let mut t = Tensor::zeros([batch, boxes * per_box, g, g]);
        for n in 0..batch {
            let dst = t.item_mut(n);
            for cell in 0..plane {
                for b in 0..boxes {
                    let a = off + cell * boxes + b;
                    for j in 0..per_box {
                        dst[(b * per_box + j) * plane + cell] = grad[(n * total + a) * per_box + j];
                    }
                }
            }
        }
        t
    }

    fn assemble(&self, loc_maps: &[Tensor], conf_maps: &[Tensor], batch: usize) -> SsdOutput {
        let total = self.anchors.len();
        let mut loc = vec![0.0; batch * total * 4];
        let mut conf = vec![0.0; batch * total * self.classes()];
        self.flatten(loc_maps, 4, &mut loc);
        self.flatten(conf_maps, self.classes(), &mut conf);
        SsdOutput { batch, loc, conf }
    }

    pub fn infer(&self, x: &Tensor) -> Result<SsdOutput, NnError> {
        self.check_input(x)?;
        let mut h = x.clone();
        let (mut loc_maps, mut conf_maps) = (Vec::new(), Vec::new());
        let mut k = 0;
        for (i, s) in self.sections.iter().enumerate() {
            h = s.infer(&h)?;
            if self.spec.sources.get(k) == Some(&i) {
                loc_maps.push(self.loc_heads[k].infer(&h)?);
                conf_maps.push(self.conf_heads[k].infer(&h)?);
                k += 1;
            }
        }
        Ok(self.assemble(&loc_maps, &conf_maps, x.batch()))
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<SsdOutput, NnError> {
        if !train {
            return self.infer(x);
        }
        self.check_input(x)?;
        let nb = self.spec.backbone.len();
        let mut h = x.clone();
        let (mut loc_maps, mut conf_maps) = (Vec::new(), Vec::new());
        let mut k = 0;
        for i in 0..self.sections.len() {
            h = if self.frozen_backbone && i < nb { self.sections[i].infer(&h)? } else { self.sections[i].forward(&h, true)? };
            if self.spec.sources.get(k) == Some(&i) {
                loc_maps.push(self.loc_heads[k].forward(&h, true)?);
                conf_maps.push(self.conf_heads[k].forward(&h, true)?);
                k += 1;
            }
        }
        Ok(self.assemble(&loc_maps, &conf_maps, x.batch()))
    }

    /// Backpropagates gradients laid out like [`SsdOutput`].
    pub fn backward(&mut self, grad_loc: &[f32], grad_conf: &[f32], batch: usize) {
        let classes = self.classes();
        let mut from_heads: Vec<Tensor> = Vec::with_capacity(self.loc_heads.len());
        for k in 0..self.loc_heads.len() {
            let gl = self.unflatten(k, grad_loc, 4, batch);
            let gc = self.unflatten(k, grad_conf, classes, batch);
            let mut d = self.loc_heads[k].backward(&gl);
            d.add_assign(&self.conf_heads[k].backward(&gc));
            from_heads.push(d);
        }
        let nb = self.spec.backbone.len();
        let mut g: Option<Tensor> = None;
        for i in (0..self.sections.len()).rev() {
            if let Some(k) = self.spec.sources.iter().position(|&s| s == i) {
                match &mut g {
                    Some(t) => t.add_assign(&from_heads[k]),
                    None => g = Some(from_heads[k].clone()),
                }
            }
            if self.frozen_backbone && i < nb {
                break;
            }
            let t = g.take().expect("the last section feeds a head");
            g = Some(self.sections[i].backward(&t));
        }
    }
}

impl Module for SsdNetwork {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        let nb = self.spec.backbone.len();
        for (i, s) in self.sections.iter().enumerate() {
            let name = if i < nb { format!("backbone{i}") } else { format!("extra{}", i - nb) };
            s.visit(&join(prefix, &name), f);
        }
        for (k, h) in self.loc_heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("loc{k}")), f);
        }
        for (k, h) in self.conf_heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("conf{k}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        let nb = self.spec.backbone.len();
        for (i, s) in self.sections.iter_mut().enumerate() {
            let name = if i < nb { format!("backbone{i}") } else { format!("extra{}", i - nb) };
            s.visit_mut(&join(prefix, &name), f);
        }
        for (k, h) in self.loc_heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("loc{k}")), f);
        }
        for (k, h) in self.conf_heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("conf{k}")), f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// Per-class probability a box needs to enter suppression.
    pub candidate_floor: f64,
    /// Probability a surviving box needs to be reported.
    pub report_floor: f64,
    pub nms_threshold: f64,
    pub top_k: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { candidate_floor: 0.01, report_floor: 0.5, nms_threshold: 0.45, top_k: 200 }
    }
}

/// Turns one image's raw outputs into reported detections in normalized
/// coordinates. Object class `c` of the head becomes `ClassId(c - 1)`.
pub fn decode_detections(loc: &[f32], conf: &[f32], anchors: &[BoundingBox], classes: usize, variances: [f64; 2], cfg: &DetectConfig) -> Vec<Detection> {
    let mut candidates = Vec::new();
    for (a, anchor) in anchors.iter().enumerate() {
        let row: Vec<f64> = conf[a * classes..(a + 1) * classes].iter().map(|&v| v as f64).collect();
        let probs = softmax(&row);
        let mut decoded = None;
        for (c, &p) in probs.iter().enumerate().skip(1) {
            if p < cfg.candidate_floor || p < cfg.report_floor.min(cfg.candidate_floor) {
                continue;
            }
            let bbox = *decoded.get_or_insert_with(|| {
                let o = &loc[a * 4..a * 4 + 4];
                decode([o[0] as f64, o[1] as f64, o[2] as f64, o[3] as f64], anchor, variances).and_then(|b| b.clip(1.0, 1.0))
            });
            if let (Some(bbox), Ok(class_id)) = (bbox, ClassId::from_index(c - 1)) {
                candidates.push(Detection { prob: p, class_id, bbox });
            }
        }
    }
    let mut kept: Vec<Detection> = nms(&candidates, cfg.nms_threshold, true).into_iter().filter(|d| d.prob >= cfg.report_floor).collect();
    kept.truncate(cfg.top_k);
    kept
}

impl SsdNetwork {
    /// Detections for one preprocessed `3×S×S` image.
    pub fn detect(&self, image: &[f32], cfg: &DetectConfig) -> Result<Vec<Detection>, NnError> {
        let s = self.spec.input_size;
        let x = Tensor::from_vec([1, 3, s, s], image.to_vec())?;
        let out = self.infer(&x)?;
        Ok(decode_detections(&out.loc, &out.conf, &self.anchors.boxes, self.classes(), self.spec.variances, cfg))
    }
}

/// A preprocessed image with normalized ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct DetSample {
    pub pixels: Vec<f32>,
    pub boxes: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub match_threshold: f64,
    pub neg_pos_ratio: f64,
    pub freeze_backbone: bool,
    /// Chance of mirroring an image (and its boxes) when drawn.
    pub flip_prob: f64,
}

impl Default for DetTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            seed: 0,
            match_threshold: 0.5,
            neg_pos_ratio: 3.0,
            freeze_backbone: false,
            flip_prob: 0.5,
        }
    }
}

impl DetTrainConfig {
    pub fn loss(&self) -> DetectorLossConfig {
        DetectorLossConfig { match_threshold: self.match_threshold, neg_pos_ratio: self.neg_pos_ratio, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetEpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub confidence: f64,
    pub localization: f64,
}

fn mirror(pixels: &[f32], size: usize) -> Vec<f32> {
    let mut out = pixels.to_vec();
    for row in out.chunks_mut(size) {
        row.reverse();
    }
    out
}

fn mirror_box(b: &BoundingBox) -> BoundingBox {
    BoundingBox::normalized(1.0 - b.x_max(), b.y_min(), 1.0 - b.x_min(), b.y_max()).expect("mirrored box keeps its extent")
}

/// Trains every trainable parameter with the multibox loss, one Adam step
/// per batch, and returns per-epoch mean losses.
pub fn fine_tune(net: &mut SsdNetwork, samples: &[DetSample], cfg: &DetTrainConfig) -> Result<Vec<DetEpochMetrics>, NnError> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(NnError::Spec("batch size and epochs must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(NnError::EmptyData("training"));
    }
    if let Some(i) = samples.iter().position(|s| s.boxes.is_empty()) {
        return Err(NnError::Spec(format!("training sample {i} has no ground-truth box")));
    }
    let loss_cfg = cfg.loss();
    loss_cfg.validate().map_err(|e| NnError::Spec(e.to_string()))?;
    net.set_frozen_backbone(cfg.freeze_backbone);
    let labels = net.spec().labels.len();
    let size = net.spec().input_size;
    let variances = net.spec().variances;
    let anchors = net.anchors().boxes.clone();

    let targets_for = |boxes: &[GroundTruth]| -> Result<Vec<Option<AnchorTarget>>, NnError> {
        if let Some(b) = boxes.iter().find(|b| b.class_id.index() >= labels) {
            return Err(NnError::Spec(format!("box class {} outside a {labels}-label detector", b.class_id)));
        }
        let assignment = match_anchors(&anchors, boxes, loss_cfg.match_threshold).map_err(|e| NnError::Spec(e.to_string()))?;
        Ok(build_targets(&assignment, &anchors, boxes, variances))
    };
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let flipped: Vec<GroundTruth> = s.boxes.iter().map(|g| GroundTruth { bbox: mirror_box(&g.bbox), class_id: g.class_id }).collect();
        targets.push([targets_for(&s.boxes)?, targets_for(&flipped)?]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    net.zero_grad();
    let classes = net.classes();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut confidence, mut localization) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(batch.len());
            let mut batch_targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
                let plane = |c: usize| &samples[i].pixels[c * size * size..(c + 1) * size * size];
                images.push(if flip { (0..3).flat_map(|c| mirror(plane(c), size)).collect() } else { samples[i].pixels.clone() });
                batch_targets.push(&targets[i][usize::from(flip)]);
            }
            let x = Tensor::stack(&images.iter().map(Vec::as_slice).collect::<Vec<_>>(), [3, size, size])?;
            let out = net.forward(&x, true)?;
            let a = anchors.len();
            let mut grad_loc = vec![0.0f32; out.loc.len()];
            let mut grad_conf = vec![0.0f32; out.conf.len()];
            let scale = 1.0 / batch.len() as f32;
            for (n, t) in batch_targets.iter().enumerate() {
                let l = ssd_loss(&out.loc[n * a * 4..(n + 1) * a * 4], &out.conf[n * a * classes..(n + 1) * a * classes], t, classes, &loss_cfg)
                    .map_err(|e| NnError::Numeric(e.to_string()))?;
                if !l.total.is_finite() {
                    return Err(NnError::Numeric(format!("non-finite detector loss at epoch {epoch}")));
                }
                total += l.total;
                confidence += l.confidence;
                localization += l.localization;
                for (d, g) in grad_loc[n * a * 4..].iter_mut().zip(&l.grad_loc) {
                    *d = g * scale;
                }
                for (d, g) in grad_conf[n * a * classes..].iter_mut().zip(&l.grad_conf) {
                    *d = g * scale;
                }
            }
            net.backward(&grad_loc, &grad_conf, batch.len());
            opt.step(net);
        }
        let n = samples.len() as f64;
        let m = DetEpochMetrics { epoch, loss: total / n, confidence: confidence / n, localization: localization / n };
        log::info!("detector epoch {epoch}: loss {:.4} (conf {:.4}, loc {:.4})", m.loss, m.confidence, m.localization);
        history.push(m);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn tiny_spec() -> SsdSpec {
        SsdSpec { input_size: 16, backbone: vec![4, 6], extras: vec![8, 8], sources: vec![1, 2, 3], labels: labels(2), variances: DEFAULT_VARIANCES }
    }

    #[test]
    fn canonical_plan_has_8732_boxes() {
        let spec = SsdSpec::ssd300(labels(7));
        let sizes = spec.feature_sizes();
        assert_eq!(spec.sources.iter().map(|&i| sizes[i]).collect::<Vec<_>>(), vec![38, 19, 10, 5, 3, 1]);
        let net = build_detector(&spec, 0).unwrap();
        assert_eq!(net.anchors().len(), 8732);
    }

    #[test]
    fn output_layout_covers_every_anchor() {
        let net = build_detector(&tiny_spec(), 1).unwrap();
        let a = net.anchors().len();
        let out = net.infer(&Tensor::zeros([2, 3, 16, 16])).unwrap();
        assert_eq!(out.loc.len(), 2 * a * 4);
        assert_eq!(out.conf.len(), 2 * a * 3);
        assert!(net.infer(&Tensor::zeros([1, 3, 15, 16])).is_err());
    }

    #[test]
    fn flatten_order_matches_anchor_order() {
        // A one-channel map per head with distinct values lets us read back
        // where each (cell, box, coordinate) lands.
        let net = build_detector(&tiny_spec(), 1).unwrap();
        let maps: Vec<Tensor> = net
            .anchors()
            .plan
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let len = l.boxes_per_cell() * 4 * l.grid * l.grid;
                Tensor::from_vec([1, l.boxes_per_cell() * 4, l.grid, l.grid], (0..len).map(|v| (k * 1000 + v) as f32).collect()).unwrap()
            })
            .collect();
        let mut flat = vec![0.0; net.anchors().len() * 4];
        net.flatten(&maps, 4, &mut flat);
        let layer = &net.anchors().plan.layers[1];
        let (g, b) = (layer.grid, layer.boxes_per_cell());
        // layer 1, row 1, col 0, box 2, coordinate 3
        let a = net.anchors().offsets[1] + (g + 0) * b + 2;
        assert_eq!(flat[a * 4 + 3], (1000 + (2 * 4 + 3) * g * g + g) as f32);
        for k in 0..maps.len() {
            assert_eq!(net.unflatten(k, &flat, 4, 1), maps[k]);
        }
    }

    fn anchor_index(net: &SsdNetwork) -> usize {
        net.anchors().offsets[1] + 3
    }

    #[test]
    fn one_hot_anchor_yields_one_detection_at_its_box() {
        let net = build_detector(&tiny_spec(), 2).unwrap();
        let a = net.anchors().len();
        let loc = vec![0.0f32; a * 4];
        let mut conf = vec![0.0f32; a * 3];
        for i in 0..a {
            conf[i * 3] = 12.0;
        }
        let hot = anchor_index(&net);
        conf[hot * 3] = 0.0;
        conf[hot * 3 + 2] = 12.0;
        let dets = decode_detections(&loc, &conf, &net.anchors().boxes, 3, DEFAULT_VARIANCES, &DetectConfig::default());
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, ClassId::new(1).unwrap());
        assert!(dets[0].prob > 0.99);
        for (x, y) in dets[0].bbox.to_array().iter().zip(net.anchors().boxes[hot].to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn impossible_floor_reports_nothing() {
        let net = build_detector(&tiny_spec(), 3).unwrap();
        let cfg = DetectConfig { report_floor: 1.01, ..Default::default() };
        assert!(net.detect(&vec![0.3; 3 * 16 * 16], &cfg).unwrap().is_empty());
        let loose = DetectConfig { report_floor: 0.0, candidate_floor: 0.0, ..Default::default() };
        for d in net.detect(&vec![0.3; 3 * 16 * 16], &loose).unwrap() {
            assert!(d.bbox.x_min() < d.bbox.x_max() && d.bbox.y_min() < d.bbox.y_max());
            assert!((0.0..=1.0).contains(&d.prob));
        }
    }

    fn square_samples(n: usize, seed: u64) -> Vec<DetSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let w = rng.random_range(5..10);
                let x0 = rng.random_range(0..16 - w);
                let y0 = rng.random_range(0..16 - w);
                let class = rng.random_range(0..2u8);
                let mut pixels = vec![0.1f32; 3 * 256];
                for y in y0..y0 + w {
                    for x in x0..x0 + w {
                        pixels[usize::from(class) * 256 + y * 16 + x] = 0.9;
                    }
                }
                let bbox = BoundingBox::normalized(x0 as f64 / 16.0, y0 as f64 / 16.0, (x0 + w) as f64 / 16.0, (y0 + w) as f64 / 16.0).unwrap();
                DetSample { pixels, boxes: vec![GroundTruth { bbox, class_id: ClassId::new(class).unwrap() }] }
            })
            .collect()
    }

    #[test]
    fn training_lowers_the_loss() {
        let mut net = build_detector(&tiny_spec(), 4).unwrap();
        let cfg = DetTrainConfig { epochs: 5, batch_size: 8, seed: 1, optimizer: AdamConfig { learning_rate: 3e-3, ..Default::default() }, ..Default::default() };
        let hist = fine_tune(&mut net, &square_samples(32, 0), &cfg).unwrap();
        assert!(hist.last().unwrap().loss < hist[0].loss, "{hist:?}");
    }

    #[test]
    fn frozen_backbone_is_untouched() {
        let mut net = build_detector(&tiny_spec(), 5).unwrap();
        let before: Vec<Vec<f32>> = net.sections[..2].iter().flat_map(|s| s.snapshot()).collect();
        let heads_before = net.conf_heads[0].weight.value.clone();
        let cfg = DetTrainConfig { epochs: 2, batch_size: 8, freeze_backbone: true, ..Default::default() };
        fine_tune(&mut net, &square_samples(16, 1), &cfg).unwrap();
        let after: Vec<Vec<f32>> = net.sections[..2].iter().flat_map(|s| s.snapshot()).collect();
        assert_eq!(before, after);
        assert_ne!(heads_before, net.conf_heads[0].weight.value);
    }

    #[test]
    fn boxless_samples_are_rejected() {
        let mut net = build_detector(&tiny_spec(), 6).unwrap();
        let mut samples = square_samples(2, 2);
        samples[1].boxes.clear();
        assert!(fine_tune(&mut net, &samples, &DetTrainConfig::default()).is_err());
    }

    #[test]
    fn reference_training_config() {
        let cfg = DetTrainConfig::default();
        assert_eq!((cfg.epochs, cfg.batch_size), (30, 32));
        cfg.loss().validate().unwrap();
    }

    #[test]
    fn backward_matches_differences() {
        // Rectifiers off keeps the objective smooth, so differences are exact
        // enough to check head flattening and multi-source accumulation.
        let mut net = build_detector(&tiny_spec(), 7).unwrap();
        net.sections.iter_mut().for_each(|s| s.relu = false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_vec([2, 3, 16, 16], (0..1536).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let out = net.forward(&x, true).unwrap();
        let rl: Vec<f32> = (0..out.loc.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rc: Vec<f32> = (0..out.conf.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let frozen = net.clone();
        net.backward(&rl, &rc, 2);
        let objective = |n: &SsdNetwork| {
            let o = n.clone().forward(&x, true).unwrap();
            o.loc.iter().zip(&rl).chain(o.conf.iter().zip(&rc)).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>()
        };
        for (section, idx) in [(0usize, 5usize), (0, 60), (1, 17), (2, 40), (3, 0)] {
            let h = 1e-3;
            let mut up = frozen.clone();
            let mut dn = frozen.clone();
            up.sections[section].conv.weight.value[idx] += h;
            dn.sections[section].conv.weight.value[idx] -= h;
            let fd = (objective(&up) - objective(&dn)) / (2.0 * h as f64);
            let an = net.sections[section].conv.weight.grad[idx] as f64;
            assert!((fd - an).abs() < 1e-2 * fd.abs().max(0.1), "section {section}: {fd} vs {an}");
        }
    }
}
