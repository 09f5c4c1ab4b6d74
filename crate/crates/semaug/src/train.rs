//! Detector training with stochastic semantic augmentation: per batch, with
//! probability theta, one augmentation is sampled, average-pooled to a
//! channel vector and added to every image's backbone feature map before the
//! RPN and ROI heads. The total loss is L_rpn + L_reg + L_clip-t.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{pool_augmentation, AugmentationSet};
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::detector::{
    assign_rpn_anchors, build_model, encode_deltas, encode_deltas_weighted, grid_anchors,
    sample_rpn_anchors, BBox, ClassTextBank, ClassifierKind, DetectionModel, DetectorConfig,
};
use crate::encoder::EncoderBundle;
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::optim::SgdMomentum;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_at: usize,
    pub batch_size: usize,
    /// Probability of applying a sampled augmentation to a batch.
    pub theta: f64,
    pub momentum: f64,
    pub hflip: bool,
    /// When true the backbone comes from the pre-trained bundle and its
    /// first conv block stays frozen.
    pub pretrained_init: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // full-scale schedule; the toy profile shrinks it for desk runs
        TrainConfig {
            iterations: 100_000,
            learning_rate: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_at: 40_000,
            batch_size: 4,
            theta: 0.5,
            momentum: 0.9,
            hflip: true,
            pretrained_init: true,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile: 2k iterations, decay at 800, 64px images.
    pub fn toy(seed: u64) -> Self {
        TrainConfig {
            iterations: 2000,
            lr_decay_at: 800,
            learning_rate: 2e-3,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta {} outside [0, 1]", self.theta)));
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Step schedule: the initial rate, scaled by the decay factor after
/// `lr_decay_at` iterations (1-based).
pub fn learning_rate_at(cfg: &TrainConfig, iteration: usize) -> f64 {
    if iteration > cfg.lr_decay_at {
        cfg.learning_rate * cfg.lr_decay_factor
    } else {
        cfg.learning_rate
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub total: f64,
    pub l_rpn: f64,
    pub l_reg: f64,
    pub l_clip_t: f64,
    pub aug_applied: bool,
    pub aug_id: Option<usize>,
}

pub type TrainLog = Vec<TrainRecord>;

pub fn write_log_jsonl(log: &TrainLog, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// With probability theta, pick augmentation j uniformly and return its id
/// and pooled channel vector.
pub fn sample_augmentation<T: Scalar>(
    aug_set: &AugmentationSet<T>,
    theta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(usize, Vec<T>)>> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid(format!("theta {theta} outside [0, 1]")));
    }
    if theta > 0.0 && aug_set.augmentations.is_empty() {
        return Err(Error::invalid(
            "cannot sample from an empty augmentation set with theta > 0",
        ));
    }
    let u: f64 = rng.gen_range(0.0..1.0);
    if u >= theta {
        return Ok(None);
    }
    let j = rng.gen_range(0..aug_set.augmentations.len());
    let aug = &aug_set.augmentations[j];
    Ok(Some((aug.id, pool_augmentation(&aug.tensor))))
}

struct RoiSample {
    bbox: BBox,
    label: usize,
    delta_target: [f64; 4],
}

fn sample_rois(
    proposals: &[BBox],
    gts: &[(BBox, usize)],
    cfg: &DetectorConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<RoiSample> {
    let mut fg: Vec<RoiSample> = Vec::new();
    let mut bg: Vec<RoiSample> = Vec::new();
    for &p in proposals {
        if p.area() < 1.0 {
            continue;
        }
        let mut best = 0.0;
        let mut best_gt: Option<&(BBox, usize)> = None;
        for gt in gts {
            let v = iou(&p, &gt.0);
            if v > best {
                best = v;
                best_gt = Some(gt);
            }
        }
        match best_gt {
            Some(&(gt_box, class_id)) if best >= cfg.fg_iou => fg.push(RoiSample {
                bbox: p,
                label: class_id,
                delta_target: encode_deltas_weighted(&p, &gt_box),
            }),
            _ => bg.push(RoiSample {
                bbox: p,
                label: 0,
                delta_target: [0.0; 4],
            }),
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    let n_fg = fg.len().min((cfg.rois_per_image as f64 * cfg.fg_fraction).round() as usize);
    let n_bg = bg.len().min(cfg.rois_per_image - n_fg);
    fg.truncate(n_fg);
    bg.truncate(n_bg);
    fg.extend(bg);
    fg
}

/// Train the detector on a single source domain. The text encoder and the
/// class bank are never updated; augmentation is injected between the
/// backbone and every downstream consumer. A loss that stays non-finite for
/// three consecutive iterations aborts with a divergence error (transient
/// non-finite iterations skip the update and are not logged).
pub fn train_detector<T: Scalar>(
    dataset: &Dataset<T>,
    bundle: &EncoderBundle<T>,
    aug_set: &AugmentationSet<T>,
    bank: ClassTextBank<T>,
    cfg: &TrainConfig,
    det_cfg: DetectorConfig,
) -> Result<(DetectionModel<T>, TrainLog)> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::invalid("empty training dataset"));
    }
    let mut model = build_model(bundle, bank, det_cfg, cfg.pretrained_init, cfg.seed);
    let bank_unit = model.bank.unit_rows();
    let freeze_first = cfg.pretrained_init;
    let logit_scale = T::of(model.cfg.logit_scale);

    let mut sgd = SgdMomentum::new(cfg.momentum);
    let mut batch_rng = stream(cfg.seed, "train-batch");
    let mut aug_rng = stream(cfg.seed, "train-aug");
    let mut flip_rng = stream(cfg.seed, "train-flip");
    let mut rpn_rng = stream(cfg.seed, "train-rpn");
    let mut roi_rng = stream(cfg.seed, "train-roi");

    let mut log: TrainLog = Vec::with_capacity(cfg.iterations);
    let mut nonfinite_streak = 0usize;

    for iteration in 1..=cfg.iterations {
        let lr = learning_rate_at(cfg, iteration);
        let picked: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.gen_range(0..dataset.samples.len()))
            .collect();
        let sampled_aug = sample_augmentation(aug_set, cfg.theta, &mut aug_rng)?;

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, freeze_first);
        let bank_var = tape.leaf(bank_unit.clone());
        let bank_t = tape.transpose(bank_var);

        let mut image_losses = Vec::with_capacity(picked.len());
        let mut rpn_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut clip_sum = 0.0;

        for &idx in &picked {
            let sample = &dataset.samples[idx];
            let (ih, iw) = (sample.image.shape()[0], sample.image.shape()[1]);
            let flip = cfg.hflip && flip_rng.gen_range(0.0..1.0) < 0.5;
            let (image, gts): (Tensor<T>, Vec<(BBox, usize)>) = if flip {
                (
                    crate::data::hflip_image(&sample.image),
                    sample
                        .annotations
                        .iter()
                        .map(|(b, c)| (b.hflipped(iw as f64), *c))
                        .collect(),
                )
            } else {
                (sample.image.clone(), sample.annotations.clone())
            };

            let img_var = tape.leaf(image);
            let fm_raw = model.features.forward_tape(&mut tape, &vars.features, img_var);
            let fm = match &sampled_aug {
                Some((_, pooled)) => {
                    let ch = tape.leaf(Tensor::from_vec(&[pooled.len()], pooled.clone())?);
                    tape.add_channel(fm_raw, ch)
                }
                None => fm_raw,
            };
            let fm_shape = tape.value(fm).shape().to_vec();
            let (fh, fw) = (fm_shape[0], fm_shape[1]);

            // region proposal heads
            let rpn_hidden_raw =
                tape.conv2d(fm, vars.rpn_conv.0, vars.rpn_conv.1, 1, 1);
            let rpn_hidden = tape.relu(rpn_hidden_raw);
            let obj = tape.conv2d(rpn_hidden, vars.rpn_obj.0, vars.rpn_obj.1, 1, 0);
            let delta = tape.conv2d(rpn_hidden, vars.rpn_delta.0, vars.rpn_delta.1, 1, 0);

            let anchors = grid_anchors(
                fh,
                fw,
                model.stride,
                model.cfg.anchor_size,
                &model.cfg.aspect_ratios,
            );
            let gt_boxes: Vec<BBox> = gts.iter().map(|(b, _)| *b).collect();
            let (labels, matched) = assign_rpn_anchors(
                &anchors,
                &gt_boxes,
                model.cfg.rpn_fg_iou,
                model.cfg.rpn_bg_iou,
            );
            let sampled = sample_rpn_anchors(
                &labels,
                model.cfg.rpn_batch,
                model.cfg.rpn_fg_fraction,
                &mut rpn_rng,
            );
            let n_anchors = anchors.len();
            let obj_rows = tape.reshape(obj, &[n_anchors, 1]);
            let obj_sampled = tape.gather_rows(obj_rows, sampled.clone());
            let obj_targets: Vec<T> = sampled
                .iter()
                .map(|&i| if labels[i] == 1 { T::one() } else { T::zero() })
                .collect();
            let obj_weights = vec![T::one(); sampled.len()];
            let l_rpn_obj = tape.bce_logits(obj_sampled, obj_targets, obj_weights);

            let fg_anchors: Vec<usize> =
                sampled.iter().copied().filter(|&i| labels[i] == 1).collect();
            let delta_rows = tape.reshape(delta, &[n_anchors, 4]);
            let l_rpn_delta = if fg_anchors.is_empty() {
                tape.scale(l_rpn_obj, T::zero()) // constant zero with a grad path
            } else {
                let picked_rows = tape.gather_rows(delta_rows, fg_anchors.clone());
                let mut targets = Vec::with_capacity(fg_anchors.len() * 4);
                for &i in &fg_anchors {
                    for v in encode_deltas(&anchors[i], &gt_boxes[matched[i]]) {
                        targets.push(T::of(v));
                    }
                }
                tape.smooth_l1(picked_rows, targets, vec![T::one(); fg_anchors.len()])
            };

            // proposals from current values, ground truth appended
            let mut proposals: Vec<BBox> = model
                .select_proposals(
                    &anchors,
                    tape.value(obj).data(),
                    tape.value(delta).data(),
                    (ih, iw),
                    model.cfg.max_proposals,
                )
                .into_iter()
                .map(|(b, _)| b)
                .collect();
            proposals.extend(gt_boxes.iter().copied());
            let rois = sample_rois(&proposals, &gts, &model.cfg, &mut roi_rng);

            let (l_clip, l_reg) = if rois.is_empty() {
                (tape.scale(l_rpn_obj, T::zero()), tape.scale(l_rpn_obj, T::zero()))
            } else {
                let s = model.stride as f64;
                let roi_size = model.cfg.roi_size;
                let c = fm_shape[2];
                let mut region_rows = Vec::with_capacity(rois.len());
                let mut delta_preds = Vec::with_capacity(rois.len());
                for roi in &rois {
                    let rect = [
                        roi.bbox.x_min / s,
                        roi.bbox.y_min / s,
                        roi.bbox.x_max / s,
                        roi.bbox.y_max / s,
                    ];
                    let roi_var = tape.roi_align(fm, rect, roi_size);
                    let region =
                        model
                            .projector
                            .forward_tape(&mut tape, &vars.projector, roi_var);
                    region_rows.push(region);
                    let flat = tape.reshape(roi_var, &[1, roi_size * roi_size * c]);
                    let h1 = tape.linear(flat, vars.box_fc1.0, vars.box_fc1.1);
                    let h1r = tape.relu(h1);
                    delta_preds.push(tape.linear(h1r, vars.box_fc2.0, vars.box_fc2.1));
                }
                let regions = tape.concat_rows(&region_rows);
                let labels_vec: Vec<usize> = rois.iter().map(|r| r.label).collect();
                let logits = match (model.cfg.classifier, vars.linear.as_ref()) {
                    (ClassifierKind::Linear, Some(&(wv, bv))) => {
                        tape.linear(regions, wv, bv)
                    }
                    _ => {
                        let normed = tape.row_normalize(regions);
                        let sims = tape.matmul(normed, bank_t);
                        tape.scale(sims, logit_scale)
                    }
                };
                let l_clip = tape.softmax_xent(logits, labels_vec);

                let deltas_pred = tape.concat_rows(&delta_preds);
                let mut targets = Vec::with_capacity(rois.len() * 4);
                let mut weights = Vec::with_capacity(rois.len());
                for r in &rois {
                    for v in r.delta_target {
                        targets.push(T::of(v));
                    }
                    weights.push(if r.label > 0 { T::one() } else { T::zero() });
                }
                let l_reg = tape.smooth_l1(deltas_pred, targets, weights);
                (l_clip, l_reg)
            };

            rpn_sum += tape.value(l_rpn_obj).item().as_f64()
                + tape.value(l_rpn_delta).item().as_f64();
            reg_sum += tape.value(l_reg).item().as_f64();
            clip_sum += tape.value(l_clip).item().as_f64();

            let rpn_total = tape.add(l_rpn_obj, l_rpn_delta);
            let head_total = tape.add(l_reg, l_clip);
            image_losses.push(tape.add(rpn_total, head_total));
        }

        let batch_total = tape.add_n(&image_losses);
        let total = tape.scale(batch_total, T::of(1.0 / picked.len() as f64));
        let b = picked.len() as f64;
        let (l_rpn, l_reg_mean, l_clip_mean) = (rpn_sum / b, reg_sum / b, clip_sum / b);
        let total_value = l_rpn + l_reg_mean + l_clip_mean;

        if !total_value.is_finite() {
            nonfinite_streak += 1;
            if nonfinite_streak >= 3 {
                return Err(Error::Divergence {
                    iteration,
                    streak: nonfinite_streak,
                });
            }
            continue;
        }
        nonfinite_streak = 0;

        tape.backward(total);
        let grads = model.collect_grads(&tape, &vars, freeze_first);
        let mut params = model.trainable_params(freeze_first);
        let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
        sgd.step(lr, &mut params, &grad_refs);

        log.push(TrainRecord {
            iteration,
            total: total_value,
            l_rpn,
            l_reg: l_reg_mean,
            l_clip_t: l_clip_mean,
            aug_applied: sampled_aug.is_some(),
            aug_id: sampled_aug.as_ref().map(|(id, _)| *id),
        });
    }

    Ok((model, log))
}

/// An augmentation set with no members, for no-augmentation arms (valid
/// whenever theta is 0).
pub fn empty_augmentation_set<T: Scalar>(embed_dim: usize) -> AugmentationSet<T> {
    AugmentationSet {
        augmentations: Vec::new(),
        source_prompt_embedding: crate::tensor::Embedding::zeros(embed_dim),
        optimizer_log: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_exactly_once() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_at: 40_000,
            ..TrainConfig::default()
        };
        assert_eq!(learning_rate_at(&cfg, 1), 1e-3);
        assert_eq!(learning_rate_at(&cfg, 40_000), 1e-3);
        assert_eq!(learning_rate_at(&cfg, 40_001), 1e-3 * 0.1);
        assert_eq!(learning_rate_at(&cfg, 100_000), 1e-3 * 0.1);
    }

    #[test]
    fn sampling_respects_theta_bounds() {
        let set = empty_augmentation_set::<f64>(8);
        let mut rng = stream(1, "t");
        assert!(sample_augmentation(&set, 0.0, &mut rng).unwrap().is_none());
        assert!(sample_augmentation(&set, 0.5, &mut rng).is_err());
        assert!(sample_augmentation(&set, 1.5, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_always_some_at_theta_one_with_single_member() {
        use crate::augment::Augmentation;
        use crate::tensor::FeatureMap;
        let set = AugmentationSet {
            augmentations: vec![Augmentation {
                id: 1,
                prompt_id: 1,
                tensor: FeatureMap::from_vec(2, 2, 3, vec![0.5; 12]).unwrap(),
            }],
            source_prompt_embedding: crate::tensor::Embedding::zeros(4),
            optimizer_log: vec![],
        };
        let mut rng = stream(2, "t");
        for _ in 0..50 {
            let got = sample_augmentation(&set, 1.0, &mut rng).unwrap();
            let (id, pooled) = got.expect("theta 1 always applies");
            assert_eq!(id, 1);
            assert_eq!(pooled, vec![0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn seeded_monte_carlo_rates() {
        use crate::augment::Augmentation;
        use crate::tensor::FeatureMap;
        let m = 15;
        let set = AugmentationSet {
            augmentations: (1..=m)
                .map(|id| Augmentation {
                    id,
                    prompt_id: id,
                    tensor: FeatureMap::from_vec(1, 1, 1, vec![id as f64]).unwrap(),
                })
                .collect(),
            source_prompt_embedding: crate::tensor::Embedding::zeros(4),
            optimizer_log: vec![],
        };
        let mut rng = stream(17, "mc");
        let draws = 10_000;
        let mut applied = 0usize;
        let mut counts = vec![0usize; m + 1];
        for _ in 0..draws {
            if let Some((id, _)) = sample_augmentation(&set, 0.5, &mut rng).unwrap() {
                applied += 1;
                counts[id] += 1;
            }
        }
        let rate = applied as f64 / draws as f64;
        assert!((rate - 0.5).abs() <= 0.02, "application rate {rate}");
        for id in 1..=m {
            let freq = counts[id] as f64 / applied as f64;
            assert!(
                (freq - 1.0 / m as f64).abs() <= 0.01,
                "id {id} frequency {freq}"
            );
        }
    }
}
