//! Minimal two-stage detector: the split image encoder around an ROI
//! feature extractor, a single-scale region proposal stage, a box head, and
//! a class text bank used as a cosine-similarity classifier.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{roi_align_forward, Tape, Var};
use crate::encoder::{
    EncoderBundle, FeatureExtractor, FeatureVars, PoolingMode, Projector, ProjectorVars,
};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, LinearLayer};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::{Embedding, FeatureMap, Tensor};

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn clipped(&self, width: f64, height: f64) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_max > self.x_min && self.y_max > self.y_min
    }

    pub fn hflipped(&self, width: f64) -> BBox {
        BBox {
            x_min: width - self.x_max,
            y_min: self.y_min,
            x_max: width - self.x_min,
            y_max: self.y_max,
        }
    }
}

/// Per-category prompt embeddings; row 0 is the all-zero background row.
#[derive(Debug, Clone)]
pub struct ClassTextBank<T> {
    pub matrix: Tensor<T>,
    pub class_names: Vec<String>,
}

pub const CLASS_PROMPT_TEMPLATE: &str = "a photo of a {category}";

/// Build the (K+1) x D bank from class-name prompts.
pub fn build_class_bank<T: Scalar>(
    class_names: &[String],
    template: &str,
    bundle: &EncoderBundle<T>,
) -> Result<ClassTextBank<T>> {
    if class_names.is_empty() {
        return Err(Error::invalid("need at least one class name"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for name in class_names {
        if !seen.insert(name.to_lowercase()) {
            return Err(Error::invalid(format!("duplicate class name {name:?}")));
        }
    }
    let d = bundle.embed_dim();
    let mut matrix = Tensor::zeros(&[class_names.len() + 1, d]);
    for (k, name) in class_names.iter().enumerate() {
        let prompt = template.replace("{category}", name);
        let emb = bundle.encode_text(&prompt)?;
        matrix.data_mut()[(k + 1) * d..(k + 2) * d].copy_from_slice(&emb.values);
    }
    Ok(ClassTextBank {
        matrix,
        class_names: class_names.to_vec(),
    })
}

impl<T: Scalar> ClassTextBank<T> {
    pub fn k(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Rows scaled to unit norm (background row stays zero), so a matrix
    /// product against unit region features yields cosine similarities.
    pub fn unit_rows(&self) -> Tensor<T> {
        let d = self.dim();
        let mut out = self.matrix.clone();
        for k in 0..=self.k() {
            let row = &mut out.data_mut()[k * d..(k + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                for v in row.iter_mut() {
                    *v = *v / norm;
                }
            }
        }
        out
    }
}

/// Cosine-similarity logits of a region feature against the bank, scaled by
/// `logit_scale`; the zero background row yields logit 0 by definition.
pub fn class_logits<T: Scalar>(
    region: &Embedding<T>,
    bank: &ClassTextBank<T>,
    logit_scale: f64,
) -> Result<Vec<T>> {
    let rn = region.norm();
    if rn == T::zero() {
        return Err(Error::invalid("zero-norm region feature"));
    }
    if region.dim() != bank.dim() {
        return Err(Error::invalid(format!(
            "region feature dim {} vs bank dim {}",
            region.dim(),
            bank.dim()
        )));
    }
    let d = bank.dim();
    let scale = T::of(logit_scale);
    let mut out = Vec::with_capacity(bank.k() + 1);
    for k in 0..=bank.k() {
        let row = &bank.matrix.data()[k * d..(k + 1) * d];
        let qn = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if qn == T::zero() {
            out.push(T::zero());
        } else {
            let dot: T = row.iter().zip(&region.values).map(|(&a, &b)| a * b).sum();
            out.push(scale * dot / (qn * rn));
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy over regions; labels in 0..=K (0 background).
pub fn clip_text_loss<T: Scalar>(logits: &[Vec<T>], labels: &[usize]) -> Result<T> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::invalid("logits and labels must pair up"));
    }
    let k1 = logits[0].len();
    let mut total = T::zero();
    for (row, &label) in logits.iter().zip(labels) {
        if label >= k1 {
            return Err(Error::invalid(format!(
                "label {label} out of range for {k1} classes"
            )));
        }
        let m = row.iter().copied().fold(row[0], T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        total += lse - row[label];
    }
    Ok(total / T::of(logits.len() as f64))
}

/// Smooth-L1 between matched offset tensors: elementwise with transition at
/// 1.0, summed per row, averaged over rows.
pub fn box_regression_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "pred shape {:?} vs target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let rows = pred.shape()[0];
    let mut total = T::zero();
    for (p, t) in pred.data().iter().zip(target.data()) {
        let e = *p - *t;
        let a = e.abs();
        total += if a < T::one() {
            T::of(0.5) * e * e
        } else {
            a - T::of(0.5)
        };
    }
    Ok(total / T::of(rows as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// Cosine similarities against the frozen class text bank (Eq-style).
    TextBank,
    /// Learned (K+1)-way linear head on region features.
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub anchor_size: f64,
    pub aspect_ratios: Vec<f64>,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_fg_fraction: f64,
    pub rpn_nms_iou: f64,
    pub rpn_pre_nms_top: usize,
    pub max_proposals: usize,
    pub roi_size: usize,
    pub rois_per_image: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub box_head_hidden: usize,
    pub logit_scale: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub pooling: PoolingMode,
    pub classifier: ClassifierKind,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            anchor_size: 20.0,
            aspect_ratios: vec![0.5, 1.0, 2.0],
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            rpn_batch: 32,
            rpn_fg_fraction: 0.5,
            rpn_nms_iou: 0.7,
            rpn_pre_nms_top: 128,
            max_proposals: 64,
            roi_size: 7,
            rois_per_image: 32,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            box_head_hidden: 32,
            logit_scale: 1.0,
            score_threshold: 0.05,
            nms_iou: 0.5,
            pooling: PoolingMode::Attention,
            classifier: ClassifierKind::TextBank,
        }
    }
}

/// Objectness/regression heads over the backbone map.
#[derive(Debug, Clone)]
pub struct RpnHead<T> {
    pub conv: Conv2dLayer<T>,
    pub obj: Conv2dLayer<T>,
    pub delta: Conv2dLayer<T>,
}

impl<T: Scalar> RpnHead<T> {
    fn new(channels: usize, n_anchors: usize, rng: &mut ChaCha8Rng) -> Self {
        RpnHead {
            conv: Conv2dLayer::new(channels, channels, 3, 1, 1, rng),
            obj: Conv2dLayer::new(channels, n_anchors, 1, 1, 0, rng),
            delta: Conv2dLayer::new(channels, 4 * n_anchors, 1, 1, 0, rng),
        }
    }
}

/// Two-layer box refinement head over flattened ROI features.
#[derive(Debug, Clone)]
pub struct BoxHead<T> {
    pub fc1: LinearLayer<T>,
    pub fc2: LinearLayer<T>,
}

impl<T: Scalar> BoxHead<T> {
    fn new(roi_size: usize, channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let fc1 = LinearLayer::new(roi_size * roi_size * channels, hidden, rng);
        let mut fc2 = LinearLayer::new(hidden, 4, rng);
        // start near the identity refinement
        fc2.w.scale_in_place(T::of(0.01));
        BoxHead { fc1, fc2 }
    }
}

#[derive(Debug, Clone)]
pub struct LinearClassifier<T> {
    pub fc: LinearLayer<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// The full detector: backbone halves around the ROI stage plus heads.
#[derive(Debug, Clone)]
pub struct DetectionModel<T> {
    pub class_names: Vec<String>,
    pub features: FeatureExtractor<T>,
    pub projector: Projector<T>,
    pub rpn: RpnHead<T>,
    pub box_head: BoxHead<T>,
    pub bank: ClassTextBank<T>,
    pub linear_head: Option<LinearClassifier<T>>,
    pub cfg: DetectorConfig,
    pub stride: usize,
    pub enc_cfg: crate::encoder::EncoderConfig,
}

/// Build a detector around the given encoder halves. With
/// `pretrained_init = false` the backbone is re-initialized from `seed`
/// instead of copying the bundle weights.
pub fn build_model<T: Scalar>(
    bundle: &EncoderBundle<T>,
    bank: ClassTextBank<T>,
    cfg: DetectorConfig,
    pretrained_init: bool,
    seed: u64,
) -> DetectionModel<T> {
    let (features, projector) = if pretrained_init {
        (bundle.features.clone(), bundle.projector.clone())
    } else {
        let mut enc_cfg = bundle.cfg.clone();
        enc_cfg.seed = seed ^ 0x5eed_ba5e;
        let fresh = EncoderBundle::<T>::init(enc_cfg, crate::encoder::Vocab::from_tokens([]));
        (fresh.features, fresh.projector)
    };
    let projector = projector.with_mode(cfg.pooling);
    let channels = bundle.cfg.feature_channels();
    let mut rng = stream(seed, "detector-heads");
    let rpn = RpnHead::new(channels, cfg.aspect_ratios.len(), &mut rng);
    let box_head = BoxHead::new(cfg.roi_size, channels, cfg.box_head_hidden, &mut rng);
    let linear_head = match cfg.classifier {
        ClassifierKind::Linear => Some(LinearClassifier {
            fc: LinearLayer::new(bundle.embed_dim(), bank.k() + 1, &mut rng),
        }),
        ClassifierKind::TextBank => None,
    };
    DetectionModel {
        class_names: bank.class_names.clone(),
        features,
        projector,
        rpn,
        box_head,
        bank,
        linear_head,
        cfg,
        stride: bundle.stride(),
        enc_cfg: bundle.cfg.clone(),
    }
}

/// Grid anchors: one scale, one anchor per aspect ratio per cell, ordered
/// (y, x, ratio) to match the head's output layout.
pub fn grid_anchors(fm_h: usize, fm_w: usize, stride: usize, size: f64, ratios: &[f64]) -> Vec<BBox> {
    let mut anchors = Vec::with_capacity(fm_h * fm_w * ratios.len());
    for y in 0..fm_h {
        for x in 0..fm_w {
            let cx = (x as f64 + 0.5) * stride as f64;
            let cy = (y as f64 + 0.5) * stride as f64;
            for &r in ratios {
                let h = size * r.sqrt();
                let w = size / r.sqrt();
                anchors.push(BBox {
                    x_min: cx - w / 2.0,
                    y_min: cy - h / 2.0,
                    x_max: cx + w / 2.0,
                    y_max: cy + h / 2.0,
                });
            }
        }
    }
    anchors
}

/// Standard box-delta encoding (dx, dy, dw, dh) of `target` w.r.t. `anchor`.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    [
        (tcx - acx) / anchor.width(),
        (tcy - acy) / anchor.height(),
        (target.width() / anchor.width()).ln(),
        (target.height() / anchor.height()).ln(),
    ]
}

pub fn decode_deltas(anchor: &BBox, deltas: [f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let [dx, dy, dw, dh] = deltas;
    let cx = acx + dx.clamp(-4.0, 4.0) * anchor.width();
    let cy = acy + dy.clamp(-4.0, 4.0) * anchor.height();
    let w = anchor.width() * dw.clamp(-4.0, 4.0).exp();
    let h = anchor.height() * dh.clamp(-4.0, 4.0).exp();
    BBox {
        x_min: cx - w / 2.0,
        y_min: cy - h / 2.0,
        x_max: cx + w / 2.0,
        y_max: cy + h / 2.0,
    }
}

/// Regression target normalization for the box head (the usual 10/10/5/5
/// weighting); keeps smooth-L1 gradients useful for the small offsets left
/// after proposal selection.
pub const BOX_DELTA_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

pub fn encode_deltas_weighted(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let raw = encode_deltas(anchor, target);
    [
        raw[0] * BOX_DELTA_WEIGHTS[0],
        raw[1] * BOX_DELTA_WEIGHTS[1],
        raw[2] * BOX_DELTA_WEIGHTS[2],
        raw[3] * BOX_DELTA_WEIGHTS[3],
    ]
}

pub fn decode_deltas_weighted(anchor: &BBox, deltas: [f64; 4]) -> BBox {
    decode_deltas(
        anchor,
        [
            deltas[0] / BOX_DELTA_WEIGHTS[0],
            deltas[1] / BOX_DELTA_WEIGHTS[1],
            deltas[2] / BOX_DELTA_WEIGHTS[2],
            deltas[3] / BOX_DELTA_WEIGHTS[3],
        ],
    )
}

/// Greedy non-maximum suppression; input sorted by descending score.
pub fn nms(sorted: &[(BBox, f64)], iou_threshold: f64) -> Vec<(BBox, f64)> {
    let mut kept: Vec<(BBox, f64)> = Vec::new();
    for &(bbox, score) in sorted {
        if kept
            .iter()
            .all(|(k, _)| crate::eval::iou(k, &bbox) < iou_threshold)
        {
            kept.push((bbox, score));
        }
    }
    kept
}

/// Anchor labels for RPN training: 1 foreground, 0 background, -1 ignored.
/// The highest-IoU anchor of every ground-truth box is always foreground.
pub fn assign_rpn_anchors(
    anchors: &[BBox],
    gts: &[BBox],
    fg_iou: f64,
    bg_iou: f64,
) -> (Vec<i8>, Vec<usize>) {
    let mut labels = vec![0i8; anchors.len()];
    let mut matched_gt = vec![usize::MAX; anchors.len()];
    if gts.is_empty() {
        return (labels, matched_gt);
    }
    let mut best_per_gt = vec![(0usize, -1.0f64); gts.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = 0.0;
        let mut best_gt = usize::MAX;
        for (gi, g) in gts.iter().enumerate() {
            let v = crate::eval::iou(a, g);
            if v > best {
                best = v;
                best_gt = gi;
            }
            if v > best_per_gt[gi].1 {
                best_per_gt[gi] = (ai, v);
            }
        }
        if best >= fg_iou {
            labels[ai] = 1;
            matched_gt[ai] = best_gt;
        } else if best < bg_iou {
            labels[ai] = 0;
        } else {
            labels[ai] = -1;
        }
    }
    // per-gt argmax fallback keeps small objects trainable
    for (gi, &(ai, iou)) in best_per_gt.iter().enumerate() {
        if iou > 0.0 {
            labels[ai] = 1;
            matched_gt[ai] = gi;
        }
    }
    (labels, matched_gt)
}

/// Subsample anchor indices for the RPN loss (seeded).
pub fn sample_rpn_anchors(
    labels: &[i8],
    batch: usize,
    fg_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut fg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut bg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    fg.shuffle(rng);
    bg.shuffle(rng);
    let n_fg = fg.len().min((batch as f64 * fg_fraction).round() as usize);
    let n_bg = bg.len().min(batch - n_fg);
    let mut out: Vec<usize> = fg.into_iter().take(n_fg).collect();
    out.extend(bg.into_iter().take(n_bg));
    out.sort_unstable();
    out
}

pub struct ProposalOutput {
    pub proposals: Vec<(BBox, f64)>,
    pub rpn_loss: Option<f64>,
}

pub struct RpnTrainContext<'a> {
    pub gts: &'a [BBox],
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> DetectionModel<T> {
    pub fn k(&self) -> usize {
        self.class_names.len()
    }

    fn rpn_forward_plain(&self, fm: &FeatureMap<T>) -> (FeatureMap<T>, FeatureMap<T>) {
        let hidden = self.rpn.conv.forward(fm);
        let hidden = FeatureMap::from_vec(
            hidden.h(),
            hidden.w(),
            hidden.c(),
            hidden.data().iter().map(|&v| v.max(T::zero())).collect(),
        )
        .expect("relu dims");
        (self.rpn.obj.forward(&hidden), self.rpn.delta.forward(&hidden))
    }

    /// Score grid anchors and return the top proposals after NMS. With a
    /// training context, also returns the RPN loss (objectness BCE plus
    /// smooth-L1 on sampled anchors).
    pub fn propose_regions(
        &self,
        fm: &FeatureMap<T>,
        image_hw: (usize, usize),
        top_n: usize,
        train: Option<RpnTrainContext>,
    ) -> ProposalOutput {
        let (obj, delta) = self.rpn_forward_plain(fm);
        let anchors = grid_anchors(
            fm.h(),
            fm.w(),
            self.stride,
            self.cfg.anchor_size,
            &self.cfg.aspect_ratios,
        );
        let proposals = self.select_proposals(&anchors, obj.data(), delta.data(), image_hw, top_n);
        let rpn_loss = train.map(|ctx| {
            let (labels, matched) =
                assign_rpn_anchors(&anchors, ctx.gts, self.cfg.rpn_fg_iou, self.cfg.rpn_bg_iou);
            let sampled = sample_rpn_anchors(
                &labels,
                self.cfg.rpn_batch,
                self.cfg.rpn_fg_fraction,
                ctx.rng,
            );
            let mut obj_loss = 0.0;
            let mut reg_loss = 0.0;
            let mut n_fg = 0usize;
            for &i in &sampled {
                let z = obj.data()[i].as_f64();
                let t = if labels[i] == 1 { 1.0 } else { 0.0 };
                obj_loss += z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
                if labels[i] == 1 {
                    let target = encode_deltas(&anchors[i], &ctx.gts[matched[i]]);
                    for (c, &tc) in target.iter().enumerate() {
                        let e = delta.data()[i * 4 + c].as_f64() - tc;
                        reg_loss += if e.abs() < 1.0 {
                            0.5 * e * e
                        } else {
                            e.abs() - 0.5
                        };
                    }
                    n_fg += 1;
                }
            }
            let obj_loss = if sampled.is_empty() {
                0.0
            } else {
                obj_loss / sampled.len() as f64
            };
            let reg_loss = if n_fg == 0 { 0.0 } else { reg_loss / n_fg as f64 };
            obj_loss + reg_loss
        });
        ProposalOutput {
            proposals,
            rpn_loss,
        }
    }

    pub(crate) fn select_proposals(
        &self,
        anchors: &[BBox],
        obj: &[T],
        delta: &[T],
        image_hw: (usize, usize),
        top_n: usize,
    ) -> Vec<(BBox, f64)> {
        if top_n == 0 {
            return Vec::new();
        }
        let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
        let mut scored: Vec<(BBox, f64)> = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let d = [
                    delta[i * 4].as_f64(),
                    delta[i * 4 + 1].as_f64(),
                    delta[i * 4 + 2].as_f64(),
                    delta[i * 4 + 3].as_f64(),
                ];
                let bbox = decode_deltas(a, d).clipped(iw, ih);
                let score = 1.0 / (1.0 + (-obj[i].as_f64()).exp());
                (bbox, score)
            })
            .filter(|(b, _)| b.is_valid())
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        scored.truncate(self.cfg.rpn_pre_nms_top);
        let mut kept = nms(&scored, self.cfg.rpn_nms_iou);
        kept.truncate(top_n);
        kept
    }

    /// Full-image detection; never applies augmentation.
    pub fn detect(
        &self,
        image: &Tensor<T>,
        score_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<Detection>> {
        let img = FeatureMap::from_tensor(image)?;
        let fm = self.features.forward(&img);
        let (ih, iw) = (image.shape()[0], image.shape()[1]);
        let out = self.propose_regions(&fm, (ih, iw), self.cfg.max_proposals, None);
        let mut detections = Vec::new();
        for (proposal, _objness) in &out.proposals {
            if proposal.area() < 1.0 {
                continue;
            }
            let roi = self.roi_feature_map(&fm, proposal);
            let region = self.projector.forward(&roi);
            let scores = self.region_scores(&region)?;
            let (best, &best_score) = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .expect("non-empty scores");
            if best == 0 {
                continue; // background argmax
            }
            let deltas = self.box_deltas_plain(&roi);
            let refined = decode_deltas_weighted(proposal, deltas).clipped(iw as f64, ih as f64);
            if !refined.is_valid() {
                continue;
            }
            if best_score >= score_threshold {
                detections.push(Detection {
                    bbox: refined,
                    class_id: best,
                    score: best_score,
                });
            }
        }
        // per-class NMS
        let mut kept = Vec::new();
        for class_id in 1..=self.k() {
            let mut class_dets: Vec<(BBox, f64)> = detections
                .iter()
                .filter(|d| d.class_id == class_id)
                .map(|d| (d.bbox, d.score))
                .collect();
            class_dets.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
            for (bbox, score) in nms(&class_dets, nms_iou) {
                kept.push(Detection {
                    bbox,
                    class_id,
                    score,
                });
            }
        }
        kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
        Ok(kept)
    }

    /// Softmax class scores of one region feature.
    pub fn region_scores(&self, region: &Embedding<T>) -> Result<Vec<f64>> {
        let logits: Vec<T> = match (&self.linear_head, self.cfg.classifier) {
            (Some(head), ClassifierKind::Linear) => head.fc.forward_rows(&region.values, 1),
            _ => class_logits(region, &self.bank, self.cfg.logit_scale)?,
        };
        let mut probs: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
        let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        Ok(probs)
    }

    pub fn roi_feature_map(&self, fm: &FeatureMap<T>, bbox: &BBox) -> FeatureMap<T> {
        let s = self.stride as f64;
        let rect = [
            bbox.x_min / s,
            bbox.y_min / s,
            bbox.x_max / s,
            bbox.y_max / s,
        ];
        let data = roi_align_forward(fm.data(), fm.h(), fm.w(), fm.c(), rect, self.cfg.roi_size);
        FeatureMap::from_vec(self.cfg.roi_size, self.cfg.roi_size, fm.c(), data)
            .expect("roi dims")
    }

    fn box_deltas_plain(&self, roi: &FeatureMap<T>) -> [f64; 4] {
        let flat = roi.data();
        let hidden = self.box_head.fc1.forward_rows(flat, 1);
        let hidden: Vec<T> = hidden.iter().map(|&v| v.max(T::zero())).collect();
        let out = self.box_head.fc2.forward_rows(&hidden, 1);
        [
            out[0].as_f64(),
            out[1].as_f64(),
            out[2].as_f64(),
            out[3].as_f64(),
        ]
    }
}

/// Bilinear ROI features projected to the joint space by the projector.
pub fn roi_features<T: Scalar>(
    fm: &FeatureMap<T>,
    boxes: &[BBox],
    projector: &Projector<T>,
    stride: usize,
    roi_size: usize,
) -> Result<Vec<Embedding<T>>> {
    let s = stride as f64;
    boxes
        .iter()
        .map(|b| {
            if b.area() < 1.0 {
                return Err(Error::invalid(format!(
                    "degenerate box {b:?} (area < 1 px^2)"
                )));
            }
            let rect = [b.x_min / s, b.y_min / s, b.x_max / s, b.y_max / s];
            let data = roi_align_forward(fm.data(), fm.h(), fm.w(), fm.c(), rect, roi_size);
            let roi = FeatureMap::from_vec(roi_size, roi_size, fm.c(), data)?;
            Ok(projector.forward(&roi))
        })
        .collect()
}

/// Tape-side bindings used by the training loop.
pub struct ModelVars {
    pub features: FeatureVars,
    pub projector: ProjectorVars,
    pub rpn_conv: (Var, Var),
    pub rpn_obj: (Var, Var),
    pub rpn_delta: (Var, Var),
    pub box_fc1: (Var, Var),
    pub box_fc2: (Var, Var),
    pub linear: Option<(Var, Var)>,
}

impl<T: Scalar> DetectionModel<T> {
    /// Bind every trainable tensor onto the tape. When `freeze_first_conv`
    /// is set the first backbone block is bound frozen.
    pub fn bind(&self, tape: &mut Tape<T>, freeze_first_conv: bool) -> ModelVars {
        let first_trainable = usize::from(freeze_first_conv);
        let features = self.features.bind(tape, first_trainable);
        let projector = self.projector.bind(tape, true);
        let mut conv = |layer: &Conv2dLayer<T>| {
            (tape.param(layer.w.clone()), tape.param(layer.b.clone()))
        };
        let rpn_conv = conv(&self.rpn.conv);
        let rpn_obj = conv(&self.rpn.obj);
        let rpn_delta = conv(&self.rpn.delta);
        let box_fc1 = (
            tape.param(self.box_head.fc1.w.clone()),
            tape.param(self.box_head.fc1.b.clone()),
        );
        let box_fc2 = (
            tape.param(self.box_head.fc2.w.clone()),
            tape.param(self.box_head.fc2.b.clone()),
        );
        let linear = self.linear_head.as_ref().map(|h| {
            (tape.param(h.fc.w.clone()), tape.param(h.fc.b.clone()))
        });
        ModelVars {
            features,
            projector,
            rpn_conv,
            rpn_obj,
            rpn_delta,
            box_fc1,
            box_fc2,
            linear,
        }
    }

    /// Trainable tensors in the same order `collect_grads` reports them.
    pub fn trainable_params(&mut self, freeze_first_conv: bool) -> Vec<&mut Tensor<T>> {
        let first_trainable = usize::from(freeze_first_conv);
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for (i, c) in self.features.convs.iter_mut().enumerate() {
            if i >= first_trainable {
                out.push(&mut c.w);
                out.push(&mut c.b);
            }
        }
        out.push(&mut self.projector.wq);
        out.push(&mut self.projector.wk);
        out.push(&mut self.projector.proj.w);
        out.push(&mut self.projector.proj.b);
        for layer in [&mut self.rpn.conv, &mut self.rpn.obj, &mut self.rpn.delta] {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out.push(&mut self.box_head.fc1.w);
        out.push(&mut self.box_head.fc1.b);
        out.push(&mut self.box_head.fc2.w);
        out.push(&mut self.box_head.fc2.b);
        if let Some(h) = self.linear_head.as_mut() {
            out.push(&mut h.fc.w);
            out.push(&mut h.fc.b);
        }
        out
    }

    /// Gradients in `trainable_params` order (zeros where a parameter did
    /// not participate in this iteration's graph).
    pub fn collect_grads(
        &self,
        tape: &Tape<T>,
        vars: &ModelVars,
        freeze_first_conv: bool,
    ) -> Vec<Tensor<T>> {
        let first_trainable = usize::from(freeze_first_conv);
        let grab = |tape: &Tape<T>, v: Var, shape: &[usize]| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(shape))
        };
        let mut out = Vec::new();
        for (i, (c, &(wv, bv))) in self
            .features
            .convs
            .iter()
            .zip(&vars.features.convs)
            .enumerate()
        {
            if i >= first_trainable {
                out.push(grab(tape, wv, c.w.shape()));
                out.push(grab(tape, bv, c.b.shape()));
            }
        }
        out.push(grab(tape, vars.projector.wq, self.projector.wq.shape()));
        out.push(grab(tape, vars.projector.wk, self.projector.wk.shape()));
        out.push(grab(tape, vars.projector.w, self.projector.proj.w.shape()));
        out.push(grab(tape, vars.projector.b, self.projector.proj.b.shape()));
        for (layer, &(wv, bv)) in [
            (&self.rpn.conv, &vars.rpn_conv),
            (&self.rpn.obj, &vars.rpn_obj),
            (&self.rpn.delta, &vars.rpn_delta),
        ] {
            out.push(grab(tape, wv, layer.w.shape()));
            out.push(grab(tape, bv, layer.b.shape()));
        }
        out.push(grab(tape, vars.box_fc1.0, self.box_head.fc1.w.shape()));
        out.push(grab(tape, vars.box_fc1.1, self.box_head.fc1.b.shape()));
        out.push(grab(tape, vars.box_fc2.0, self.box_head.fc2.w.shape()));
        out.push(grab(tape, vars.box_fc2.1, self.box_head.fc2.b.shape()));
        if let (Some(h), Some(&(wv, bv))) = (&self.linear_head, vars.linear.as_ref()) {
            out.push(grab(tape, wv, h.fc.w.shape()));
            out.push(grab(tape, bv, h.fc.b.shape()));
        }
        out
    }
}

// checkpoint serialization

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    class_names: Vec<String>,
    config: DetectorConfig,
    iteration: usize,
    encoder_config: crate::encoder::EncoderConfig,
}

impl<T: Scalar> DetectionModel<T> {
    pub fn save(&self, path: impl AsRef<std::path::Path>, iteration: usize) -> Result<()> {
        let path = path.as_ref();
        let mut a = crate::archive::TensorArchive::new();
        for (i, c) in self.features.convs.iter().enumerate() {
            a.push(format!("va.conv{i}.w"), &c.w)?;
            a.push(format!("va.conv{i}.b"), &c.b)?;
        }
        a.push("vb.wq", &self.projector.wq)?;
        a.push("vb.wk", &self.projector.wk)?;
        a.push("vb.w", &self.projector.proj.w)?;
        a.push("vb.b", &self.projector.proj.b)?;
        a.push("rpn.conv.w", &self.rpn.conv.w)?;
        a.push("rpn.conv.b", &self.rpn.conv.b)?;
        a.push("rpn.obj.w", &self.rpn.obj.w)?;
        a.push("rpn.obj.b", &self.rpn.obj.b)?;
        a.push("rpn.delta.w", &self.rpn.delta.w)?;
        a.push("rpn.delta.b", &self.rpn.delta.b)?;
        a.push("box.fc1.w", &self.box_head.fc1.w)?;
        a.push("box.fc1.b", &self.box_head.fc1.b)?;
        a.push("box.fc2.w", &self.box_head.fc2.w)?;
        a.push("box.fc2.b", &self.box_head.fc2.b)?;
        a.push("bank.q", &self.bank.matrix)?;
        if let Some(h) = &self.linear_head {
            a.push("cls.w", &h.fc.w)?;
            a.push("cls.b", &h.fc.b)?;
        }
        a.write_to(path)?;
        let sidecar = ModelSidecar {
            class_names: self.class_names.clone(),
            config: self.cfg.clone(),
            iteration,
            encoder_config: self.enc_cfg.clone(),
        };
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_vec_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar: ModelSidecar =
            serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
        let a = crate::archive::TensorArchive::read_from(path)?;
        let bundle = EncoderBundle::<T>::init(
            sidecar.encoder_config.clone(),
            crate::encoder::Vocab::from_tokens([]),
        );
        let k = sidecar.class_names.len();
        let bank = ClassTextBank {
            matrix: a.tensor("bank.q")?,
            class_names: sidecar.class_names.clone(),
        };
        let mut model = build_model(&bundle, bank, sidecar.config, true, 0);
        for (i, c) in model.features.convs.iter_mut().enumerate() {
            c.w = a.tensor(&format!("va.conv{i}.w"))?;
            c.b = a.tensor(&format!("va.conv{i}.b"))?;
        }
        model.projector.wq = a.tensor("vb.wq")?;
        model.projector.wk = a.tensor("vb.wk")?;
        model.projector.proj.w = a.tensor("vb.w")?;
        model.projector.proj.b = a.tensor("vb.b")?;
        model.rpn.conv.w = a.tensor("rpn.conv.w")?;
        model.rpn.conv.b = a.tensor("rpn.conv.b")?;
        model.rpn.obj.w = a.tensor("rpn.obj.w")?;
        model.rpn.obj.b = a.tensor("rpn.obj.b")?;
        model.rpn.delta.w = a.tensor("rpn.delta.w")?;
        model.rpn.delta.b = a.tensor("rpn.delta.b")?;
        model.box_head.fc1.w = a.tensor("box.fc1.w")?;
        model.box_head.fc1.b = a.tensor("box.fc1.b")?;
        model.box_head.fc2.w = a.tensor("box.fc2.w")?;
        model.box_head.fc2.b = a.tensor("box.fc2.b")?;
        if let Some(h) = model.linear_head.as_mut() {
            h.fc.w = a.tensor("cls.w")?;
            h.fc.b = a.tensor("cls.b")?;
        }
        debug_assert_eq!(model.k(), k);
        Ok(model)
    }
}
