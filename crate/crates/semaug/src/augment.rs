//! Semantic feature-space augmentation: additive feature-map tensors whose
//! projected effect matches a text-derived embedding shift, estimated by
//! gradient descent over source-image crops with the encoders frozen.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::random_crops;
use crate::encoder::EncoderBundle;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::prompt::PromptSet;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::{Embedding, FeatureMap, Tensor};

/// One learnable additive tensor, tied to a target prompt.
#[derive(Debug, Clone)]
pub struct Augmentation<T> {
    pub id: usize,
    pub prompt_id: usize,
    pub tensor: FeatureMap<T>,
}

/// The estimated augmentations plus the optimization trace.
#[derive(Debug, Clone)]
pub struct AugmentationSet<T> {
    pub augmentations: Vec<Augmentation<T>>,
    pub source_prompt_embedding: Embedding<T>,
    pub optimizer_log: Vec<f64>,
}

impl<T: Scalar> AugmentationSet<T> {
    pub fn m(&self) -> usize {
        self.augmentations.len()
    }

    /// Standard deviation over all augmentation entries (used to scale the
    /// random-augmentation baseline).
    pub fn entry_std(&self) -> f64 {
        let mut n = 0usize;
        let mut mean = 0.0f64;
        for a in &self.augmentations {
            for v in a.tensor.data() {
                mean += v.as_f64();
                n += 1;
            }
        }
        if n == 0 {
            return 0.0;
        }
        mean /= n as f64;
        let mut var = 0.0;
        for a in &self.augmentations {
            for v in a.tensor.data() {
                let d = v.as_f64() - mean;
                var += d * d;
            }
        }
        (var / n as f64).sqrt()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let mut archive = crate::archive::TensorArchive::new();
        for a in &self.augmentations {
            archive.push(format!("A_{}", a.id), &a.tensor.to_tensor())?;
        }
        archive.push(
            "q_source",
            &Tensor::from_vec(
                &[self.source_prompt_embedding.dim()],
                self.source_prompt_embedding.values.clone(),
            )?,
        )?;
        archive.write_to(path)?;
        let meta = AugMeta {
            prompt_ids: self.augmentations.iter().map(|a| a.prompt_id).collect(),
            final_loss: self.optimizer_log.last().copied(),
            iterations: self.optimizer_log.len(),
        };
        std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta: AugMeta = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
        let archive = crate::archive::TensorArchive::read_from(path)?;
        let mut augmentations = Vec::with_capacity(meta.prompt_ids.len());
        for (i, &prompt_id) in meta.prompt_ids.iter().enumerate() {
            let t: Tensor<T> = archive.tensor(&format!("A_{}", i + 1))?;
            augmentations.push(Augmentation {
                id: i + 1,
                prompt_id,
                tensor: FeatureMap::from_tensor(&t)?,
            });
        }
        let q: Tensor<T> = archive.tensor("q_source")?;
        Ok(AugmentationSet {
            augmentations,
            source_prompt_embedding: Embedding::new(q.into_data()),
            optimizer_log: Vec::new(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct AugMeta {
    prompt_ids: Vec<usize>,
    final_loss: Option<f64>,
    iterations: usize,
}

/// Estimation hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Side of the square crops fed to the encoder (its native input size).
    pub crop_size: usize,
    pub crops_per_image: usize,
    pub images_per_batch: usize,
    pub l1_weight: f64,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            iterations: 1000,
            learning_rate: 0.01,
            crop_size: 64,
            crops_per_image: 4,
            images_per_batch: 1,
            l1_weight: 1.0,
            seed: 7,
        }
    }
}

impl OptConfig {
    /// Desk-scale estimation profile: encoder-native 64px crops and a
    /// softened L1 pull (the unit default overwhelms the cosine term at
    /// D = 32; 0.1 keeps the pull while letting the loss halve).
    pub fn toy() -> Self {
        OptConfig {
            l1_weight: 0.1,
            ..OptConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.l1_weight < 0.0 {
            return Err(Error::Config("l1_weight must be non-negative".into()));
        }
        if self.crops_per_image == 0 || self.images_per_batch == 0 {
            return Err(Error::Config("batching fields must be >= 1".into()));
        }
        Ok(())
    }
}

/// Unit-norm direction from the source prompt embedding to a target prompt
/// embedding.
pub fn embedding_shift<T: Scalar>(q_s: &Embedding<T>, q_t: &Embedding<T>) -> Result<Embedding<T>> {
    if q_s.dim() != q_t.dim() {
        return Err(Error::invalid("embedding dims differ"));
    }
    let diff = q_t.sub(q_s);
    let norm = diff.norm();
    if norm.as_f64() < 1e-12 {
        return Err(Error::DegenerateShift { prompt_id: 0 });
    }
    Ok(diff.scale(T::one() / norm))
}

/// Target image embedding: the crop embedding moved one unit along the shift.
pub fn target_embedding<T: Scalar>(z: &Embedding<T>, shift: &Embedding<T>) -> Result<Embedding<T>> {
    if z.dim() != shift.dim() {
        return Err(Error::invalid(format!(
            "embedding length {} vs shift length {}",
            z.dim(),
            shift.dim()
        )));
    }
    Ok(z.add(shift))
}

/// Scalar cosine distance 1 - cos(a, b), in [0, 2].
pub fn cosine_distance<T: Scalar>(a: &Embedding<T>, b: &Embedding<T>) -> Result<T> {
    Ok(T::one() - a.cosine_similarity(b)?)
}

/// Projection of an augmented crop feature map: V^b(V^a(crop) + A).
pub fn augmented_projection<T: Scalar>(
    crop_features: &FeatureMap<T>,
    augmentation: &FeatureMap<T>,
    bundle: &EncoderBundle<T>,
) -> Result<Embedding<T>> {
    let summed = add_feature_maps(crop_features, augmentation)?;
    bundle.project_features(&summed)
}

pub fn add_feature_maps<T: Scalar>(
    a: &FeatureMap<T>,
    b: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "feature map dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    FeatureMap::from_vec(
        a.h(),
        a.w(),
        a.c(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect(),
    )
}

/// Estimation objective over a crop batch: for every crop i and prompt j,
/// cosine distance of the augmented projection to the target embedding plus
/// an L1 pull toward the unaugmented embedding, summed over crops and
/// prompts.
pub fn augmentation_loss<T: Scalar>(
    crops: &[FeatureMap<T>],
    z_list: &[Embedding<T>],
    zstar_matrix: &[Vec<Embedding<T>>],
    augmentations: &[FeatureMap<T>],
    bundle: &EncoderBundle<T>,
    l1_weight: f64,
) -> Result<T> {
    if l1_weight < 0.0 {
        return Err(Error::invalid("l1_weight must be non-negative"));
    }
    if crops.len() != z_list.len() || crops.len() != zstar_matrix.len() {
        return Err(Error::invalid("crop, z and z* lists must align"));
    }
    let l1w = T::of(l1_weight);
    let mut total = T::zero();
    for ((fm, z), zstars) in crops.iter().zip(z_list).zip(zstar_matrix) {
        if zstars.len() != augmentations.len() {
            return Err(Error::invalid("one z* per augmentation required"));
        }
        for (zstar, aug) in zstars.iter().zip(augmentations) {
            let zbar = augmented_projection(fm, aug, bundle)?;
            total += cosine_distance(zstar, &zbar)?;
            let l1: T = zbar
                .values
                .iter()
                .zip(&z.values)
                .map(|(&a, &b)| (a - b).abs())
                .sum();
            total += l1w * l1;
        }
    }
    Ok(total)
}

/// Same objective through the tape; returns the loss and the gradient of
/// every augmentation tensor. The forward value matches
/// [`augmentation_loss`] bit-for-bit.
pub fn augmentation_loss_and_grads<T: Scalar>(
    crops: &[FeatureMap<T>],
    z_list: &[Embedding<T>],
    zstar_matrix: &[Vec<Embedding<T>>],
    augmentations: &[FeatureMap<T>],
    bundle: &EncoderBundle<T>,
    l1_weight: f64,
) -> Result<(T, Vec<FeatureMap<T>>)> {
    let mut tape = Tape::new();
    let pvars = bundle.projector.bind(&mut tape, false);
    let aug_vars: Vec<_> = augmentations
        .iter()
        .map(|a| tape.param(a.to_tensor()))
        .collect();
    let l1w = T::of(l1_weight);
    let mut terms = Vec::new();
    for ((fm, z), zstars) in crops.iter().zip(z_list).zip(zstar_matrix) {
        let fm_var = tape.leaf(fm.to_tensor());
        let z_var = tape.leaf(Tensor::from_vec(&[1, z.dim()], z.values.clone())?);
        for (zstar, &aug_var) in zstars.iter().zip(&aug_vars) {
            let summed = tape.add(fm_var, aug_var);
            let zbar = bundle.projector.forward_tape(&mut tape, &pvars, summed);
            let zstar_var = tape.leaf(Tensor::from_vec(&[1, zstar.dim()], zstar.values.clone())?);
            let cos = tape.cosine_sim(zstar_var, zbar);
            let dist = tape.affine(cos, -T::one(), T::one());
            let diff = tape.sub(zbar, z_var);
            let l1 = tape.abs_sum(diff);
            let l1_scaled = tape.scale(l1, l1w);
            let term = tape.add(dist, l1_scaled);
            terms.push(term);
        }
    }
    let total = tape.add_n(&terms);
    tape.backward(total);
    let loss = tape.value(total).item();
    let grads = aug_vars
        .iter()
        .zip(augmentations)
        .map(|(&v, a)| {
            let g = tape
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&[a.h(), a.w(), a.c()]));
            FeatureMap::from_tensor(&g)
        })
        .collect::<Result<_>>()?;
    Ok((loss, grads))
}

/// Estimate one augmentation per target prompt by adaptive-moment gradient
/// descent over random source-image crops; encoders stay frozen throughout.
pub fn optimize_augmentations<T: Scalar>(
    source_images: &[Tensor<T>],
    prompt_set: &PromptSet,
    bundle: &EncoderBundle<T>,
    cfg: &OptConfig,
) -> Result<AugmentationSet<T>> {
    cfg.validate()?;
    if source_images.is_empty() {
        return Err(Error::invalid("need at least one source image"));
    }
    if prompt_set.targets.is_empty() {
        return Err(Error::invalid("prompt set has no targets"));
    }

    let q_s = bundle.encode_text(&prompt_set.source_prompt)?;
    let mut shifts = Vec::with_capacity(prompt_set.m());
    for t in &prompt_set.targets {
        let q_t = bundle.encode_text(&t.text)?;
        let shift = embedding_shift(&q_s, &q_t).map_err(|e| match e {
            Error::DegenerateShift { .. } => Error::DegenerateShift { prompt_id: t.id },
            other => other,
        })?;
        shifts.push(shift);
    }

    // augmentations share the crop-time feature-map geometry
    let probe = bundle.encode_image_features(&Tensor::zeros(&[cfg.crop_size, cfg.crop_size, 3]))?;
    let (ah, aw, ac) = probe.dims();
    let mut aug_tensors: Vec<Tensor<T>> =
        (0..prompt_set.m()).map(|_| Tensor::zeros(&[ah, aw, ac])).collect();

    let mut opt = Adam::new(cfg.learning_rate);
    let mut pick_rng = stream(cfg.seed, "aug-opt-images");
    let mut crop_rng = stream(cfg.seed, "aug-opt-crops");
    let mut log = Vec::with_capacity(cfg.iterations);

    for _iter in 0..cfg.iterations {
        let mut crops = Vec::with_capacity(cfg.images_per_batch * cfg.crops_per_image);
        for _ in 0..cfg.images_per_batch {
            let idx = rand::Rng::gen_range(&mut pick_rng, 0..source_images.len());
            crops.extend(random_crops(
                &source_images[idx],
                cfg.crop_size,
                cfg.crops_per_image,
                &mut crop_rng,
            ));
        }
        let crop_features: Vec<FeatureMap<T>> = crops
            .iter()
            .map(|c| bundle.encode_image_features(c))
            .collect::<Result<_>>()?;
        let z_list: Vec<Embedding<T>> = crop_features
            .iter()
            .map(|fm| bundle.project_features(fm))
            .collect::<Result<_>>()?;
        let zstar_matrix: Vec<Vec<Embedding<T>>> = z_list
            .iter()
            .map(|z| shifts.iter().map(|s| z.add(s)).collect())
            .collect();

        let aug_maps: Vec<FeatureMap<T>> = aug_tensors
            .iter()
            .map(FeatureMap::from_tensor)
            .collect::<Result<_>>()?;
        let (loss, grads) = augmentation_loss_and_grads(
            &crop_features,
            &z_list,
            &zstar_matrix,
            &aug_maps,
            bundle,
            cfg.l1_weight,
        )?;
        log.push(loss.as_f64());

        let grad_tensors: Vec<Tensor<T>> = grads.iter().map(|g| g.to_tensor()).collect();
        let mut params: Vec<&mut Tensor<T>> = aug_tensors.iter_mut().collect();
        let grad_refs: Vec<&Tensor<T>> = grad_tensors.iter().collect();
        opt.step(&mut params, &grad_refs);
    }

    let augmentations = aug_tensors
        .iter()
        .zip(&prompt_set.targets)
        .enumerate()
        .map(|(i, (t, target))| {
            Ok(Augmentation {
                id: i + 1,
                prompt_id: target.id,
                tensor: FeatureMap::from_tensor(t)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AugmentationSet {
        augmentations,
        source_prompt_embedding: q_s,
        optimizer_log: log,
    })
}

/// Spatial mean per channel: collapses an augmentation so it can be applied
/// to feature maps of any spatial size.
pub fn pool_augmentation<T: Scalar>(aug: &FeatureMap<T>) -> Vec<T> {
    let (h, w, c) = aug.dims();
    let inv = T::of(1.0 / (h * w) as f64);
    let mut out = vec![T::zero(); c];
    for pos in 0..h * w {
        for (o, &v) in out.iter_mut().zip(&aug.data()[pos * c..(pos + 1) * c]) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o *= inv;
    }
    out
}

/// Broadcast-add a pooled channel vector to every spatial position.
pub fn apply_augmentation<T: Scalar>(fm: &FeatureMap<T>, pooled: &[T]) -> Result<FeatureMap<T>> {
    if pooled.len() != fm.c() {
        return Err(Error::invalid(format!(
            "pooled vector length {} vs {} channels",
            pooled.len(),
            fm.c()
        )));
    }
    let mut data = fm.data().to_vec();
    let c = fm.c();
    for pos in 0..fm.h() * fm.w() {
        for (d, &p) in data[pos * c..(pos + 1) * c].iter_mut().zip(pooled) {
            *d += p;
        }
    }
    FeatureMap::from_vec(fm.h(), fm.w(), fm.c(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Vocab};

    fn emb(v: &[f64]) -> Embedding<f64> {
        Embedding::new(v.to_vec())
    }

    #[test]
    fn shift_axis_case_and_unit_norm() {
        let s = embedding_shift(&emb(&[0.0, 0.0]), &emb(&[2.0, 0.0])).unwrap();
        assert_eq!(s.values, vec![1.0, 0.0]);
        let s = embedding_shift(&emb(&[1.0, 1.0]), &emb(&[2.0, 3.0])).unwrap();
        let r5 = 5.0f64.sqrt();
        assert!((s.values[0] - 1.0 / r5).abs() < 1e-12);
        assert!((s.values[1] - 2.0 / r5).abs() < 1e-12);
        assert!((s.norm() - 1.0).abs() < 1e-9);
        assert!(matches!(
            embedding_shift(&emb(&[1.0, 1.0]), &emb(&[1.0, 1.0])),
            Err(Error::DegenerateShift { .. })
        ));
    }

    #[test]
    fn target_embedding_moves_one_unit() {
        let z = emb(&[0.5, -0.25, 3.0]);
        let shift = emb(&[1.0, 0.0, 0.0]);
        let zs = target_embedding(&z, &shift).unwrap();
        assert_eq!(zs.values, vec![1.5, -0.25, 3.0]);
        let dist = zs.sub(&z).norm();
        assert!((dist - 1.0).abs() < 1e-12);
        assert!(target_embedding(&z, &emb(&[1.0])).is_err());
    }

    #[test]
    fn cosine_distance_cases() {
        let a = emb(&[1.0, 0.0]);
        assert_eq!(cosine_distance(&a, &a).unwrap(), 0.0);
        let neg = emb(&[-1.0, 0.0]);
        assert!((cosine_distance(&a, &neg).unwrap() - 2.0).abs() < 1e-12);
        let b = emb(&[1.0, 1.0]);
        let d = cosine_distance(&a, &b).unwrap();
        assert!((d - (1.0 - 1.0 / 2.0f64.sqrt())).abs() < 1e-12);
        assert!(cosine_distance(&a, &emb(&[0.0, 0.0])).is_err());
    }

    fn toy_bundle() -> EncoderBundle<f64> {
        EncoderBundle::init(
            EncoderConfig::toy(3),
            Vocab::from_tokens(["day", "fog", "rain", "an", "image", "taken", "on", "a", "during", "the"].map(String::from)),
        )
    }

    #[test]
    fn zero_augmentation_is_identity() {
        let bundle = toy_bundle();
        let img = Tensor::from_vec(
            &[64, 64, 3],
            (0..64 * 64 * 3).map(|i| (i % 83) as f64 / 83.0).collect(),
        )
        .unwrap();
        let fm = bundle.encode_image_features(&img).unwrap();
        let zero = FeatureMap::zeros(fm.h(), fm.w(), fm.c());
        let z = bundle.project_features(&fm).unwrap();
        let zbar = augmented_projection(&fm, &zero, &bundle).unwrap();
        assert_eq!(z, zbar);
        // dim mismatch
        let bad = FeatureMap::<f64>::zeros(4, 4, 8);
        assert!(augmented_projection(&fm, &bad, &bundle).is_err());
    }

    #[test]
    fn linear_projector_makes_augmented_projection_additive() {
        // average pooling + linear map is linear in the feature map, so
        // zbar = z + V^b(A) with zero bias
        let mut bundle = toy_bundle();
        bundle.projector.mode = crate::encoder::PoolingMode::Average;
        let fm = FeatureMap::from_vec(2, 2, 32, (0..128).map(|i| i as f64 * 0.01).collect()).unwrap();
        let aug = FeatureMap::from_vec(2, 2, 32, (0..128).map(|i| (i % 7) as f64 * 0.1).collect()).unwrap();
        let z = bundle.project_features(&fm).unwrap();
        let va = bundle.project_features(&aug).unwrap();
        let zbar = augmented_projection(&fm, &aug, &bundle).unwrap();
        for ((a, b), c) in zbar.values.iter().zip(&z.values).zip(&va.values) {
            assert!((a - (b + c)).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_is_zero_when_targets_equal_unaugmented() {
        let bundle = toy_bundle();
        let img = Tensor::from_vec(
            &[64, 64, 3],
            (0..64 * 64 * 3).map(|i| (i % 53) as f64 / 53.0).collect(),
        )
        .unwrap();
        let fm = bundle.encode_image_features(&img).unwrap();
        let z = bundle.project_features(&fm).unwrap();
        let zero_aug = vec![FeatureMap::zeros(fm.h(), fm.w(), fm.c())];
        let loss = augmentation_loss(
            &[fm.clone()],
            &[z.clone()],
            &[vec![z.clone()]],
            &zero_aug,
            &bundle,
            1.0,
        )
        .unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn loss_is_one_for_orthogonal_target_with_zero_aug() {
        let bundle = toy_bundle();
        let img = Tensor::from_vec(
            &[64, 64, 3],
            (0..64 * 64 * 3).map(|i| (i % 89) as f64 / 89.0).collect(),
        )
        .unwrap();
        let fm = bundle.encode_image_features(&img).unwrap();
        let z = bundle.project_features(&fm).unwrap();
        // build a z* orthogonal to z by Gram-Schmidt on a probe vector
        let mut probe = vec![0.0; z.dim()];
        probe[0] = 1.0;
        probe[1] = -0.5;
        let zn2 = z.dot(&z);
        let proj = z.dot(&Embedding::new(probe.clone())) / zn2;
        let zstar = Embedding::new(
            probe
                .iter()
                .zip(&z.values)
                .map(|(&p, &zv)| p - proj * zv)
                .collect(),
        );
        assert!(z.dot(&zstar).abs() < 1e-9);
        let zero_aug = vec![FeatureMap::zeros(fm.h(), fm.w(), fm.c())];
        let loss = augmentation_loss(
            &[fm],
            &[z],
            &[vec![zstar]],
            &zero_aug,
            &bundle,
            1.0,
        )
        .unwrap();
        assert!((loss - 1.0).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn loss_matches_term_by_term_oracle() {
        // 2 crops x 2 prompts against an independent recomputation
        let bundle = toy_bundle();
        let mut imgs = Vec::new();
        for k in 0..2 {
            imgs.push(
                Tensor::from_vec(
                    &[64, 64, 3],
                    (0..64 * 64 * 3)
                        .map(|i| ((i + k * 31) % 71) as f64 / 71.0)
                        .collect(),
                )
                .unwrap(),
            );
        }
        let fms: Vec<FeatureMap<f64>> = imgs
            .iter()
            .map(|i| bundle.encode_image_features(i).unwrap())
            .collect();
        let zs: Vec<Embedding<f64>> =
            fms.iter().map(|f| bundle.project_features(f).unwrap()).collect();
        let mut augs = Vec::new();
        for j in 0..2 {
            let data: Vec<f64> = (0..fms[0].data().len())
                .map(|i| ((i * (j + 2)) % 13) as f64 * 0.02 - 0.1)
                .collect();
            augs.push(FeatureMap::from_vec(fms[0].h(), fms[0].w(), fms[0].c(), data).unwrap());
        }
        let shift_a = Embedding::new((0..zs[0].dim()).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect());
        let shift_b = Embedding::new(
            (0..zs[0].dim())
                .map(|i| if i == 1 { 0.6 } else if i == 2 { 0.8 } else { 0.0 })
                .collect(),
        );
        let zstars: Vec<Vec<Embedding<f64>>> = zs
            .iter()
            .map(|z| vec![z.add(&shift_a), z.add(&shift_b)])
            .collect();
        let l1w = 0.7;
        let loss =
            augmentation_loss(&fms, &zs, &zstars, &augs, &bundle, l1w).unwrap();

        // independent Eq-style recomputation, term by term
        let mut expected = 0.0;
        for (i, fm) in fms.iter().enumerate() {
            for (j, aug) in augs.iter().enumerate() {
                let summed = add_feature_maps(fm, aug).unwrap();
                let zbar = bundle.project_features(&summed).unwrap();
                let zstar = &zstars[i][j];
                let dot: f64 = zbar.values.iter().zip(&zstar.values).map(|(a, b)| a * b).sum();
                let na: f64 = zbar.values.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = zstar.values.iter().map(|v| v * v).sum::<f64>().sqrt();
                expected += 1.0 - dot / (na * nb);
                expected += l1w
                    * zbar
                        .values
                        .iter()
                        .zip(&zs[i].values)
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>();
            }
        }
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
    }

    #[test]
    fn tape_loss_matches_plain_loss_bitwise() {
        let bundle = toy_bundle();
        let img = Tensor::from_vec(
            &[64, 64, 3],
            (0..64 * 64 * 3).map(|i| (i % 61) as f64 / 61.0).collect(),
        )
        .unwrap();
        let fm = bundle.encode_image_features(&img).unwrap();
        let z = bundle.project_features(&fm).unwrap();
        let aug = FeatureMap::from_vec(
            fm.h(),
            fm.w(),
            fm.c(),
            (0..fm.data().len()).map(|i| (i % 11) as f64 * 0.05 - 0.2).collect(),
        )
        .unwrap();
        let mut shift = vec![0.0; z.dim()];
        shift[3] = 1.0;
        let zstar = vec![vec![z.add(&Embedding::new(shift))]];
        let plain = augmentation_loss(
            &[fm.clone()],
            &[z.clone()],
            &zstar,
            &[aug.clone()],
            &bundle,
            1.0,
        )
        .unwrap();
        let (tape_loss, grads) =
            augmentation_loss_and_grads(&[fm], &[z], &zstar, &[aug], &bundle, 1.0).unwrap();
        assert_eq!(plain, tape_loss);
        assert_eq!(grads.len(), 1);
        assert!(grads[0].all_finite());
    }

    #[test]
    fn pooling_and_application() {
        let aug = FeatureMap::from_vec(2, 2, 1, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(pool_augmentation(&aug), vec![4.0]);
        let constant = FeatureMap::from_vec(3, 3, 2, vec![0.5; 18]).unwrap();
        let pooled = pool_augmentation(&constant);
        assert_eq!(pooled, vec![0.5, 0.5]);
        let zeros = FeatureMap::<f64>::zeros(2, 2, 4);
        assert_eq!(pool_augmentation(&zeros), vec![0.0; 4]);

        // identity application
        let fm = FeatureMap::from_vec(2, 2, 2, (0..8).map(|v| v as f64).collect()).unwrap();
        assert_eq!(apply_augmentation(&fm, &[0.0, 0.0]).unwrap(), fm);
        // constant + constant
        let shifted = apply_augmentation(&constant, &[1.0, -0.5]).unwrap();
        assert_eq!(shifted.at(1, 2, 0), 1.5);
        assert_eq!(shifted.at(1, 2, 1), 0.0);
        // arbitrary sizes accepted, channel mismatch rejected
        let tall = FeatureMap::<f64>::zeros(12, 20, 2);
        assert!(apply_augmentation(&tall, &[0.1, 0.2]).is_ok());
        assert!(apply_augmentation(&tall, &[0.1]).is_err());
    }
}
