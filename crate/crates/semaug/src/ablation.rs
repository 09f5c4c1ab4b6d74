//! Ablation harness: trains and evaluates detector variants over shared
//! data and seeds, toggling weight initialization, classifier kind, pooling
//! and augmentation strategy, and reports per-domain mAP medians.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Augmentation, AugmentationSet};
use crate::data::Dataset;
use crate::detector::{build_class_bank, ClassifierKind, DetectorConfig, CLASS_PROMPT_TEMPLATE};
use crate::encoder::{EncoderBundle, PoolingMode};
use crate::error::{Error, Result};
use crate::eval::evaluate_map;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;
use crate::train::{empty_augmentation_set, train_detector, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitArm {
    #[serde(rename = "pretrained-init")]
    Pretrained,
    #[serde(rename = "random-init")]
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierArm {
    #[serde(rename = "text-loss")]
    TextLoss,
    #[serde(rename = "linear-classifier")]
    LinearClassifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolArm {
    #[serde(rename = "attention")]
    Attention,
    #[serde(rename = "average")]
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugArm {
    #[serde(rename = "sem-aug")]
    SemAug,
    #[serde(rename = "no-aug")]
    NoAug,
    #[serde(rename = "random-aug")]
    RandomAug,
    #[serde(rename = "off-concept-aug")]
    OffConceptAug,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub init: InitArm,
    pub classifier: ClassifierArm,
    pub pool: PoolArm,
    pub aug: AugArm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let grid: AblationGrid = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::Config(format!("ablation grid: {e}")))?;
        Ok(grid)
    }
}

pub struct AblationInputs<'a, T> {
    pub train_data: &'a Dataset<T>,
    pub eval_data: &'a [Dataset<T>],
    pub bundle: &'a EncoderBundle<T>,
    pub aug_set: &'a AugmentationSet<T>,
    /// Augmentations optimized for off-concept prompts; required only when
    /// the grid contains an off-concept arm.
    pub off_concept_set: Option<&'a AugmentationSet<T>>,
    pub train_cfg: TrainConfig,
    pub det_cfg: DetectorConfig,
    /// Entry standard deviation for the random-augmentation arm; defaults to
    /// the optimized set's entry standard deviation.
    pub random_sigma: Option<f64>,
    pub iou_threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowResult {
    pub name: String,
    /// Per-domain mAP for every seed, in seed order.
    pub per_seed_map: BTreeMap<String, Vec<f64>>,
    pub per_domain_median: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<RowResult>,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Normal-entry augmentation set matching the shape and count of `like`.
pub fn random_augmentation_set<T: Scalar>(
    like: &AugmentationSet<T>,
    sigma: f64,
    seed: u64,
) -> AugmentationSet<T> {
    let mut rng = stream(seed, "random-aug");
    let augmentations = like
        .augmentations
        .iter()
        .map(|a| {
            let (h, w, c) = a.tensor.dims();
            let data: Vec<T> = (0..h * w * c)
                .map(|_| crate::rng::gaussian::<T>(&mut rng) * T::of(sigma))
                .collect();
            Augmentation {
                id: a.id,
                prompt_id: a.prompt_id,
                tensor: FeatureMap::from_vec(h, w, c, data).expect("matching dims"),
            }
        })
        .collect();
    AugmentationSet {
        augmentations,
        source_prompt_embedding: like.source_prompt_embedding.clone(),
        optimizer_log: Vec::new(),
    }
}

/// Words for the off-concept prompt arm.
pub const OFF_CONCEPT_WORDS: [&str; 4] = ["desert", "ocean", "forest", "mountain"];
pub const OFF_CONCEPT_TEMPLATE: &str = "an image of {word}";

pub fn off_concept_prompts() -> crate::prompt::PromptSet {
    let targets = OFF_CONCEPT_WORDS
        .iter()
        .enumerate()
        .map(|(i, w)| crate::prompt::TargetPrompt {
            id: i + 1,
            text: OFF_CONCEPT_TEMPLATE.replace("{word}", w),
            weather: w.to_string(),
            time: String::new(),
        })
        .collect();
    crate::prompt::PromptSet {
        source_prompt: crate::prompt::SOURCE_PROMPT.to_string(),
        targets,
    }
}

/// Train + evaluate one grid row under one seed.
fn run_single<T: Scalar>(
    row: &AblationRow,
    inputs: &AblationInputs<T>,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let mut train_cfg = inputs.train_cfg.clone();
    train_cfg.seed = seed;
    train_cfg.pretrained_init = matches!(row.init, InitArm::Pretrained);

    let mut det_cfg = inputs.det_cfg.clone();
    det_cfg.pooling = match row.pool {
        PoolArm::Attention => PoolingMode::Attention,
        PoolArm::Average => PoolingMode::Average,
    };
    det_cfg.classifier = match row.classifier {
        ClassifierArm::TextLoss => ClassifierKind::TextBank,
        ClassifierArm::LinearClassifier => ClassifierKind::Linear,
    };

    let sigma = inputs
        .random_sigma
        .unwrap_or_else(|| inputs.aug_set.entry_std());
    let owned_set;
    let aug_set: &AugmentationSet<T> = match row.aug {
        AugArm::SemAug => inputs.aug_set,
        AugArm::NoAug => {
            train_cfg.theta = 0.0;
            owned_set = empty_augmentation_set(inputs.bundle.embed_dim());
            &owned_set
        }
        AugArm::RandomAug => {
            owned_set = random_augmentation_set(inputs.aug_set, sigma, seed);
            &owned_set
        }
        AugArm::OffConceptAug => inputs.off_concept_set.ok_or_else(|| {
            Error::Config(format!(
                "row {:?} needs an off-concept augmentation set",
                row.name
            ))
        })?,
    };

    let bank = build_class_bank(
        &inputs.train_data.class_names,
        CLASS_PROMPT_TEMPLATE,
        inputs.bundle,
    )?;
    let (model, _log) = train_detector(
        inputs.train_data,
        inputs.bundle,
        aug_set,
        bank,
        &train_cfg,
        det_cfg,
    )?;
    let mut out = BTreeMap::new();
    for ds in inputs.eval_data {
        let eval = evaluate_map(&model, ds, inputs.iou_threshold)?;
        out.insert(ds.domain.clone(), eval.map);
    }
    Ok(out)
}

/// Run the grid over the seeds, `jobs` rows in flight at a time. Every
/// (row, seed) task is independently seeded, so the schedule cannot change
/// results.
pub fn run_ablation<T: Scalar>(
    grid: &AblationGrid,
    inputs: &AblationInputs<T>,
    seeds: &[u64],
    jobs: usize,
) -> Result<AblationReport> {
    if grid.rows.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation grid and seeds must be non-empty".into()));
    }
    let tasks: Vec<(usize, u64)> = grid
        .rows
        .iter()
        .enumerate()
        .flat_map(|(ri, _)| seeds.iter().map(move |&s| (ri, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<BTreeMap<String, f64>>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = jobs.max(1).min(tasks.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let t = next.fetch_add(1, Ordering::Relaxed);
                if t >= tasks.len() {
                    break;
                }
                let (ri, seed) = tasks[t];
                let res = run_single(&grid.rows[ri], inputs, seed);
                results.lock().expect("results mutex").get_mut(t).map(|slot| *slot = Some(res));
            });
        }
    });

    let collected = results.into_inner().expect("results mutex");
    let mut per_row: Vec<BTreeMap<String, Vec<f64>>> =
        vec![BTreeMap::new(); grid.rows.len()];
    for (t, slot) in collected.into_iter().enumerate() {
        let (ri, _) = tasks[t];
        let map = slot.expect("every task ran")?;
        for (domain, v) in map {
            per_row[ri].entry(domain).or_default().push(v);
        }
    }
    let rows = grid
        .rows
        .iter()
        .zip(per_row)
        .map(|(row, per_seed_map)| {
            let per_domain_median = per_seed_map
                .iter()
                .map(|(d, vals)| (d.clone(), median(vals)))
                .collect();
            RowResult {
                name: row.name.clone(),
                per_seed_map,
                per_domain_median,
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Markdown table shaped like the strategy/component comparison tables.
pub fn ablation_markdown(report: &AblationReport) -> String {
    let mut domains: Vec<String> = Vec::new();
    for row in &report.rows {
        for d in row.per_domain_median.keys() {
            if !domains.contains(d) {
                domains.push(d.clone());
            }
        }
    }
    let mut out = String::from("| Arm |");
    for d in &domains {
        out.push_str(&format!(" {d} |"));
    }
    out.push_str("\n|---|");
    for _ in &domains {
        out.push_str("---|");
    }
    out.push('\n');
    for row in &report.rows {
        out.push_str(&format!("| {} |", row.name));
        for d in &domains {
            match row.per_domain_median.get(d) {
                Some(v) => out.push_str(&format!(" {v:.4} |")),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

impl AblationReport {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Convenience: draw a fresh seed list from a master seed.
pub fn derive_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = stream(master, "ablation-seeds");
    (0..n).map(|_| rng.gen_range(1..u64::MAX / 2)).collect()
}
