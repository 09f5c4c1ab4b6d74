//! `semaug` command line: synthetic data generation, prompt curation,
//! contrastive pre-training, augmentation estimation, detector training,
//! mAP evaluation, PCA projection export and the ablation harness.
//!
//! Everything runs in f32 and is reproducible from `--seed`: rerunning a
//! command with identical arguments produces byte-identical outputs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use semaug::ablation::{
    ablation_markdown, off_concept_prompts, run_ablation, AblationGrid, AblationInputs,
};
use semaug::augment::{optimize_augmentations, AugmentationSet, OptConfig};
use semaug::data::{
    bilinear_resize, generate_pretraining_set, generate_synthetic_domain, load_dataset,
    save_dataset, Dataset, DomainSpec,
};
use semaug::detector::{build_class_bank, DetectionModel, DetectorConfig, CLASS_PROMPT_TEMPLATE};
use semaug::encoder::{pretrain_toy_embedding, EncoderBundle, EncoderConfig, ToyPretrainConfig};
use semaug::eval::{evaluate_map, report_markdown, EvalReport};
use semaug::prompt::{
    build_similarity_encoder, generate_prompts, load_rank_table, load_wordlist, merge_synonyms,
    prune_by_frequency, prune_by_similarity, MergeSpec, PromptSet, WordList, SOURCE_PROMPT,
    TARGET_PROMPT_TEMPLATE,
};
use semaug::train::{
    empty_augmentation_set, train_detector, write_log_jsonl, TrainConfig,
};

#[derive(Parser)]
#[command(name = "semaug", about, version)]
struct Cli {
    /// Master seed used by subcommands that take no explicit seed.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// JSON file with default config sections {train, detector, optimize, pretrain}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Force single-threaded execution (ablation rows run sequentially).
    #[arg(long, global = true, default_value_t = false)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct FileConfig {
    train: Option<TrainConfig>,
    detector: Option<DetectorConfig>,
    optimize: Option<OptConfig>,
    pretrain: Option<ToyPretrainConfig>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic multi-domain detection datasets.
    GenData(GenDataArgs),
    /// Run the word-list curation pipeline and emit a prompt set.
    Curate(CurateArgs),
    /// Contrastively pre-train the toy joint encoder pair.
    PretrainEmbed(PretrainArgs),
    /// Estimate semantic augmentations from source images and prompts.
    OptimizeAug(OptimizeArgs),
    /// Train the detector with stochastic semantic augmentation.
    Train(TrainArgs),
    /// Evaluate a trained detector (mAP at an IoU threshold, per domain).
    Eval(EvalArgs),
    /// Export PCA projections of real and augmented embeddings.
    Project(ProjectArgs),
    /// Train and evaluate a grid of detector variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Comma-separated domain names.
    #[arg(long, default_value = "clear,fog,night,rain,dusk_rain")]
    domains: String,
    /// Images per domain.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurateArgs {
    /// Hyponym word list (one entry per line).
    #[arg(long)]
    hyponyms: PathBuf,
    /// Frequency rank table ("word rank" per line).
    #[arg(long)]
    ranks: PathBuf,
    #[arg(long, default_value = "weather")]
    anchor: String,
    #[arg(long, default_value_t = 0.5)]
    sim_threshold: f64,
    #[arg(long, default_value_t = 10_000)]
    top_k: u32,
    /// Synonym merge spec (JSON).
    #[arg(long)]
    merge: PathBuf,
    /// Words the stand-in similarity encoder places near the anchor.
    #[arg(long)]
    similarity_words: PathBuf,
    /// Words excluded after merging (the source-domain concept).
    #[arg(long, default_value = "sunshine")]
    exclude: String,
    #[arg(long, default_value = "day,night,evening")]
    times: String,
    #[arg(long, default_value = TARGET_PROMPT_TEMPLATE)]
    template: String,
    #[arg(long, default_value = SOURCE_PROMPT)]
    source_prompt: String,
    /// Write the post-pruning intermediate word list here.
    #[arg(long)]
    intermediate_out: Option<PathBuf>,
    /// Write the final weather word list here.
    #[arg(long)]
    words_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Comma-separated pre-training styles.
    #[arg(long, default_value = "clear,fog,night,rain,dusk_rain,snow,cloudy,stormy")]
    styles: String,
    #[arg(long, default_value_t = 120)]
    per_style: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    target_norm: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    /// Dataset directory whose images provide the source domain.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    crops_per_image: Option<usize>,
    #[arg(long)]
    l1_weight: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Single-domain training dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    /// Augmentation archive; omit for a no-augmentation run (theta 0).
    #[arg(long)]
    aug: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated dataset directories (one per domain).
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write a markdown table here.
    #[arg(long)]
    markdown: Option<PathBuf>,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    encoder: PathBuf,
    /// Root directory holding per-domain dataset subdirectories.
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long, default_value = "clear,fog,night,rain,dusk_rain")]
    domains: String,
    #[arg(long)]
    aug: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    /// Embeddings per domain for the real-image plot.
    #[arg(long, default_value_t = 200)]
    per_domain: usize,
    #[arg(long, default_value_t = 64)]
    crop_size: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    train_data: PathBuf,
    /// Comma-separated evaluation dataset directories.
    #[arg(long)]
    eval_data: String,
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    aug: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Parallel workers (rows x seeds are independent).
    #[arg(long, default_value_t = 2)]
    jobs: usize,
    /// Off-concept augmentation archive (for off-concept-aug rows).
    #[arg(long)]
    off_concept_aug: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    markdown: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file_cfg: FileConfig = match &cli.config {
        Some(path) => serde_json::from_slice(&std::fs::read(path).context("reading --config")?)
            .context("parsing --config")?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::GenData(a) => gen_data(&cli, a),
        Command::Curate(a) => curate(&cli, a),
        Command::PretrainEmbed(a) => pretrain(&cli, &file_cfg, a),
        Command::OptimizeAug(a) => optimize(&cli, &file_cfg, a),
        Command::Train(a) => train(&cli, &file_cfg, a),
        Command::Eval(a) => eval_cmd(a),
        Command::Project(a) => project(a),
        Command::Ablate(a) => ablate(&cli, &file_cfg, a),
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

fn load_domain_dataset(dir: &Path) -> Result<Dataset<f32>> {
    load_dataset::<f32>(dir.join("annotations.json"), dir.join("images"))
        .with_context(|| format!("loading dataset from {}", dir.display()))
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let class_names: Vec<String> = semaug::data::TOY_CLASS_NAMES
        .iter()
        .map(|s| s.to_string())
        .collect();
    for domain in split_list(&a.domains) {
        let spec = DomainSpec::named(&domain)?;
        let ds = generate_synthetic_domain::<f32>(&spec, a.n, a.image_size, &class_names, cli.seed)?;
        let dir = a.out.join(&domain);
        save_dataset(&ds, &dir)?;
        println!("wrote {} images to {}", a.n, dir.display());
    }
    Ok(())
}

fn curate(cli: &Cli, a: &CurateArgs) -> Result<()> {
    let hyponyms = load_wordlist(&a.hyponyms)?;
    let related: BTreeSet<String> = std::fs::read_to_string(&a.similarity_words)?
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect();
    let sim_bundle = build_similarity_encoder::<f32>(&hyponyms, &a.anchor, &related, cli.seed);
    let after_sim = prune_by_similarity(&hyponyms, &a.anchor, a.sim_threshold, &sim_bundle)?;
    let ranks = load_rank_table(&a.ranks)?;
    let after_freq = prune_by_frequency(&after_sim, &ranks, a.top_k)?;
    if let Some(path) = &a.intermediate_out {
        std::fs::write(path, after_freq.words.join("\n") + "\n")?;
    }
    let merge = MergeSpec::load(&a.merge)?;
    let merged = merge_synonyms(&after_freq, &merge);
    let weathers = WordList::new(
        merged.words.iter().filter(|w| **w != a.exclude).cloned(),
        "curated weather words",
    );
    if let Some(path) = &a.words_out {
        std::fs::write(path, weathers.words.join("\n") + "\n")?;
    }
    let times = WordList::new(split_list(&a.times), "times of day");
    let prompts = generate_prompts(&weathers, &times, &a.template, &a.source_prompt)?;
    prompts.save(&a.out)?;
    println!(
        "curated {} -> {} -> {} words; wrote {} prompts to {}",
        hyponyms.len(),
        after_freq.len(),
        weathers.len(),
        prompts.m(),
        a.out.display()
    );
    Ok(())
}

fn pretrain(cli: &Cli, file_cfg: &FileConfig, a: &PretrainArgs) -> Result<()> {
    let mut cfg = file_cfg.pretrain.clone().unwrap_or_default();
    cfg.seed = cli.seed;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = a.target_norm {
        cfg.target_norm = v;
    }
    let styles = split_list(&a.styles);
    let style_refs: Vec<&str> = styles.iter().map(|s| s.as_str()).collect();
    let dataset = generate_pretraining_set::<f32>(&style_refs, a.per_style, a.image_size, cli.seed)?;
    let bundle = pretrain_toy_embedding(&dataset, EncoderConfig::toy(cli.seed), &cfg)?;
    bundle.save(&a.out)?;
    println!(
        "pre-trained on {} captioned images; encoder written to {}",
        dataset.len(),
        a.out.display()
    );
    Ok(())
}

fn optimize(cli: &Cli, file_cfg: &FileConfig, a: &OptimizeArgs) -> Result<()> {
    let mut cfg = file_cfg.optimize.clone().unwrap_or_else(OptConfig::toy);
    cfg.seed = cli.seed;
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.crop_size {
        cfg.crop_size = v;
    }
    if let Some(v) = a.crops_per_image {
        cfg.crops_per_image = v;
    }
    if let Some(v) = a.l1_weight {
        cfg.l1_weight = v;
    }
    let bundle = EncoderBundle::<f32>::load(&a.encoder)?;
    let prompts = PromptSet::load(&a.prompts)?;
    let ds = load_domain_dataset(&a.images)?;
    let images: Vec<_> = ds.samples.iter().map(|s| s.image.clone()).collect();
    let set = optimize_augmentations(&images, &prompts, &bundle, &cfg)?;
    set.save(&a.out)?;
    println!(
        "optimized {} augmentations over {} iterations (loss {:.4} -> {:.4}); wrote {}",
        set.m(),
        cfg.iterations,
        set.optimizer_log.first().unwrap_or(&f64::NAN),
        set.optimizer_log.last().unwrap_or(&f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn train(cli: &Cli, file_cfg: &FileConfig, a: &TrainArgs) -> Result<()> {
    let mut cfg = file_cfg
        .train
        .clone()
        .unwrap_or_else(|| TrainConfig::toy(cli.seed));
    cfg.seed = cli.seed;
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = a.theta {
        cfg.theta = v;
    }
    let det_cfg = file_cfg.detector.clone().unwrap_or_else(toy_detector_config);
    let bundle = EncoderBundle::<f32>::load(&a.encoder)?;
    let dataset = load_domain_dataset(&a.data)?;
    let aug_set = match &a.aug {
        Some(path) => AugmentationSet::<f32>::load(path)?,
        None => {
            if cfg.theta > 0.0 {
                bail!("no --aug archive given; pass one or set theta to 0");
            }
            empty_augmentation_set(bundle.embed_dim())
        }
    };
    let bank = build_class_bank(&dataset.class_names, CLASS_PROMPT_TEMPLATE, &bundle)?;
    let (model, log) = train_detector(&dataset, &bundle, &aug_set, bank, &cfg, det_cfg)?;
    model.save(&a.out, cfg.iterations)?;
    if let Some(path) = &a.log {
        write_log_jsonl(&log, path)?;
    }
    println!(
        "trained {} iterations on {} ({} images); model written to {}",
        cfg.iterations,
        dataset.domain,
        dataset.samples.len(),
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let model = DetectionModel::<f32>::load(&a.model)?;
    let mut report = EvalReport {
        iou_threshold: a.iou,
        domains: Vec::new(),
    };
    for dir in split_list(&a.data) {
        let ds = load_domain_dataset(Path::new(&dir))?;
        report.domains.push(evaluate_map(&model, &ds, a.iou)?);
    }
    std::fs::write(&a.out, serde_json::to_vec_pretty(&report)?)?;
    if let Some(path) = &a.markdown {
        std::fs::write(path, report_markdown(&report))?;
    }
    for d in &report.domains {
        println!("{}: mAP@{} = {:.4}", d.domain, a.iou, d.map);
    }
    Ok(())
}

fn project(a: &ProjectArgs) -> Result<()> {
    let bundle = EncoderBundle::<f32>::load(&a.encoder)?;
    let aug_set = AugmentationSet::<f32>::load(&a.aug)?;
    let prompts = PromptSet::load(&a.prompts)?;

    let mut real = Vec::new();
    let mut clear_features = Vec::new();
    for domain in split_list(&a.domains) {
        let ds = load_domain_dataset(&a.data_root.join(&domain))?;
        for s in ds.samples.iter().take(a.per_domain) {
            let resized = bilinear_resize(&s.image, a.crop_size);
            let fm = bundle.encode_image_features(&resized)?;
            let z = bundle.project_features(&fm)?;
            real.push((domain.clone(), z));
            if domain == "clear" {
                clear_features.push(fm);
            }
        }
    }
    if clear_features.is_empty() {
        bail!("the domain list must include clear (the source domain)");
    }

    let mut augmented = Vec::new();
    for aug in &aug_set.augmentations {
        let target = prompts
            .targets
            .iter()
            .find(|t| t.id == aug.prompt_id)
            .map(|t| format!("{} {}", t.weather, t.time))
            .unwrap_or_else(|| format!("prompt_{}", aug.prompt_id));
        for fm in &clear_features {
            let z = semaug::augment::augmented_projection(fm, &aug.tensor, &bundle)?;
            augmented.push((target.clone(), z));
        }
    }
    let out = semaug::pca::export_projection(&real, &augmented, &a.out_dir)?;
    println!(
        "projected {} real and {} augmented embeddings into {}",
        out.real_rows.len(),
        out.augmented_rows.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn ablate(cli: &Cli, file_cfg: &FileConfig, a: &AblateArgs) -> Result<()> {
    let grid = AblationGrid::load(&a.grid)?;
    let bundle = EncoderBundle::<f32>::load(&a.encoder)?;
    let aug_set = AugmentationSet::<f32>::load(&a.aug)?;
    let train_data = load_domain_dataset(&a.train_data)?;
    let eval_data: Vec<Dataset<f32>> = split_list(&a.eval_data)
        .iter()
        .map(|d| load_domain_dataset(Path::new(d)))
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = split_list(&a.seeds)
        .iter()
        .map(|s| s.parse().context("parsing --seeds"))
        .collect::<Result<_>>()?;
    let mut train_cfg = file_cfg
        .train
        .clone()
        .unwrap_or_else(|| TrainConfig::toy(cli.seed));
    if let Some(v) = a.iters {
        train_cfg.iterations = v;
        train_cfg.lr_decay_at = (v as f64 * 0.4) as usize;
    }
    let det_cfg = file_cfg.detector.clone().unwrap_or_else(toy_detector_config);

    let off_concept = match &a.off_concept_aug {
        Some(path) => Some(AugmentationSet::<f32>::load(path)?),
        None => None,
    };
    let needs_off = grid
        .rows
        .iter()
        .any(|r| matches!(r.aug, semaug::ablation::AugArm::OffConceptAug));
    let owned_off;
    let off_ref = if needs_off && off_concept.is_none() {
        // derive it here so a grid with the off-concept arm works standalone
        let prompts = off_concept_prompts();
        let images: Vec<_> = train_data.samples.iter().map(|s| s.image.clone()).collect();
        let mut cfg = file_cfg.optimize.clone().unwrap_or_else(OptConfig::toy);
        cfg.seed = cli.seed;
        owned_off = optimize_augmentations(&images, &prompts, &bundle, &cfg)?;
        Some(&owned_off)
    } else {
        off_concept.as_ref()
    };

    let inputs = AblationInputs {
        train_data: &train_data,
        eval_data: &eval_data,
        bundle: &bundle,
        aug_set: &aug_set,
        off_concept_set: off_ref,
        train_cfg,
        det_cfg,
        random_sigma: None,
        iou_threshold: a.iou,
    };
    let jobs = if cli.deterministic { 1 } else { a.jobs };
    let report = run_ablation(&grid, &inputs, &seeds, jobs)?;
    report.save(&a.out)?;
    if let Some(path) = &a.markdown {
        std::fs::write(path, ablation_markdown(&report))?;
    }
    println!("{}", ablation_markdown(&report));
    Ok(())
}

/// Desk-scale detector settings used when no --config is given.
fn toy_detector_config() -> DetectorConfig {
    DetectorConfig {
        logit_scale: 8.0,
        fg_fraction: 0.5,
        ..DetectorConfig::default()
    }
}
