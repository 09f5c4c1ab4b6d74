//! Joint image-text encoders: a text encoder T and a split image encoder
//! V = V^b . V^a, plus the in-repo contrastive pre-training that stands in
//! for a large pre-trained vision-language model.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2dLayer, LinearLayer};
use crate::optim::Adam;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::{Embedding, FeatureMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    Attention,
    Average,
}

/// Architecture hyperparameters; everything needed to rebuild the encoders
/// from a seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_channels: usize,
    /// Output channels of each stride-2 conv block; a final stride-2 average
    /// pooling follows, so the total stride is `2^(len + 1)`.
    pub conv_channels: Vec<usize>,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub min_image: usize,
    pub pooling: PoolingMode,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: stride 8, C = 32, D = 32.
    pub fn toy(seed: u64) -> Self {
        EncoderConfig {
            image_channels: 3,
            conv_channels: vec![16, 32],
            token_dim: 32,
            embed_dim: 32,
            min_image: 32,
            pooling: PoolingMode::Attention,
            seed,
        }
    }

    /// Stride-16 configuration whose feature-map geometry matches the
    /// documented full-scale encoder (224x224 input -> 14x14 map).
    pub fn full_scale_shape(seed: u64) -> Self {
        EncoderConfig {
            image_channels: 3,
            conv_channels: vec![8, 8, 16],
            token_dim: 64,
            embed_dim: 512,
            min_image: 64,
            pooling: PoolingMode::Attention,
            seed,
        }
    }

    pub fn stride(&self) -> usize {
        1 << (self.conv_channels.len() + 1)
    }

    pub fn feature_channels(&self) -> usize {
        *self.conv_channels.last().expect("at least one conv block")
    }
}

/// Whitespace token vocabulary; id 0 is the reserved UNK token.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK_TOKEN: &str = "<unk>";

impl Vocab {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut list = vec![UNK_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(UNK_TOKEN.to_string(), 0);
        for t in tokens {
            let t = t.to_lowercase();
            if !index.contains_key(&t) {
                index.insert(t.clone(), list.len());
                list.push(t);
            }
        }
        Vocab {
            tokens: list,
            index,
        }
    }

    /// Vocabulary over all whitespace tokens of the given texts, sorted for
    /// reproducibility.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for t in texts {
            for tok in t.to_lowercase().split_whitespace() {
                set.insert(tok.to_string());
            }
        }
        Vocab::from_tokens(set)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(&token.to_lowercase()).unwrap_or(&0)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.to_lowercase()
            .split_whitespace()
            .map(|t| *self.index.get(t).unwrap_or(&0))
            .collect()
    }
}

/// Token embedding table + mean over tokens + linear map to the joint space.
#[derive(Debug, Clone)]
pub struct TextEncoder<T> {
    pub table: Tensor<T>,
    pub proj: LinearLayer<T>,
}

pub struct TextVars {
    pub table: Var,
    pub w: Var,
    pub b: Var,
}

impl<T: Scalar> TextEncoder<T> {
    fn init(vocab_len: usize, token_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "text-encoder");
        let std = (1.0 / token_dim as f64).sqrt();
        let table = Tensor::from_vec(
            &[vocab_len, token_dim],
            (0..vocab_len * token_dim)
                .map(|_| crate::rng::gaussian::<T>(&mut rng) * T::of(std))
                .collect(),
        )
        .expect("table shape");
        TextEncoder {
            table,
            proj: LinearLayer::new(token_dim, embed_dim, &mut rng),
        }
    }

    pub fn forward(&self, token_ids: &[usize]) -> Embedding<T> {
        let dt = self.table.shape()[1];
        let inv = T::of(1.0 / token_ids.len() as f64);
        let mut mean = vec![T::zero(); dt];
        for &id in token_ids {
            for (m, &v) in mean.iter_mut().zip(&self.table.data()[id * dt..(id + 1) * dt]) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m *= inv;
        }
        Embedding::new(self.proj.forward_rows(&mean, 1))
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> TextVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.leaf(t.clone())
            }
        };
        TextVars {
            table: put(&self.table),
            w: put(&self.proj.w),
            b: put(&self.proj.b),
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape<T>, vars: &TextVars, token_ids: &[usize]) -> Var {
        let rows = tape.gather_rows(vars.table, token_ids.to_vec());
        let mean = tape.mean_rows(rows);
        tape.linear(mean, vars.w, vars.b)
    }
}

/// Front half of the image encoder: stride-2 conv blocks with relu, then
/// one stride-2 average pooling.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    pub convs: Vec<Conv2dLayer<T>>,
}

pub struct FeatureVars {
    pub convs: Vec<(Var, Var)>,
}

impl<T: Scalar> FeatureExtractor<T> {
    fn init(cfg: &EncoderConfig) -> Self {
        let mut rng = stream(cfg.seed, "feature-extractor");
        let mut convs = Vec::new();
        let mut cin = cfg.image_channels;
        for &cout in &cfg.conv_channels {
            convs.push(Conv2dLayer::new(cin, cout, 3, 2, 1, &mut rng));
            cin = cout;
        }
        FeatureExtractor { convs }
    }

    pub fn forward(&self, image: &FeatureMap<T>) -> FeatureMap<T> {
        let mut x = image.clone();
        for conv in &self.convs {
            let y = conv.forward(&x);
            x = FeatureMap::from_vec(
                y.h(),
                y.w(),
                y.c(),
                y.data().iter().map(|&v| v.max(T::zero())).collect(),
            )
            .expect("relu keeps dims");
        }
        let mut pooled = Vec::new();
        let (ho, wo) = nn::avgpool2(x.data(), x.h(), x.w(), x.c(), &mut pooled);
        FeatureMap::from_vec(ho, wo, x.c(), pooled).expect("pool dims")
    }

    /// Conv blocks with index < `first_trainable` are bound frozen.
    pub fn bind(&self, tape: &mut Tape<T>, first_trainable: usize) -> FeatureVars {
        let convs = self
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i >= first_trainable {
                    (tape.param(c.w.clone()), tape.param(c.b.clone()))
                } else {
                    (tape.leaf(c.w.clone()), tape.leaf(c.b.clone()))
                }
            })
            .collect();
        FeatureVars { convs }
    }

    pub fn forward_tape(&self, tape: &mut Tape<T>, vars: &FeatureVars, image: Var) -> Var {
        let mut x = image;
        for (conv, &(w, b)) in self.convs.iter().zip(&vars.convs) {
            let y = tape.conv2d(x, w, b, conv.stride, conv.pad);
            x = tape.relu(y);
        }
        tape.avg_pool2(x)
    }
}

/// Back half of the image encoder: spatial pooling followed by a linear map
/// into the joint space. Attention pooling is a learned convex combination
/// of the spatial feature vectors (query from the spatial mean), so on a
/// spatially constant map it coincides with average pooling.
#[derive(Debug, Clone)]
pub struct Projector<T> {
    pub mode: PoolingMode,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub proj: LinearLayer<T>,
}

pub struct ProjectorVars {
    pub wq: Var,
    pub wk: Var,
    pub w: Var,
    pub b: Var,
}

impl<T: Scalar> Projector<T> {
    fn init(cfg: &EncoderConfig) -> Self {
        let mut rng = stream(cfg.seed, "projector");
        let c = cfg.feature_channels();
        let std = (1.0 / c as f64).sqrt();
        let mut mat = || {
            Tensor::from_vec(
                &[c, c],
                (0..c * c)
                    .map(|_| crate::rng::gaussian::<T>(&mut rng) * T::of(std))
                    .collect(),
            )
            .expect("square matrix")
        };
        let wq = mat();
        let wk = mat();
        Projector {
            mode: cfg.pooling,
            wq,
            wk,
            proj: LinearLayer::new(c, cfg.embed_dim, &mut rng),
        }
    }

    pub fn with_mode(&self, mode: PoolingMode) -> Self {
        let mut p = self.clone();
        p.mode = mode;
        p
    }

    pub fn channels(&self) -> usize {
        self.proj.din
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.dout
    }

    /// Pooled channel vector for a feature map, before the linear map.
    pub fn pool(&self, fm: &FeatureMap<T>) -> Vec<T> {
        let (hw, c) = (fm.h() * fm.w(), fm.c());
        let xs = fm.data();
        let inv = T::of(1.0 / hw as f64);
        let mut xbar = vec![T::zero(); c];
        for i in 0..hw {
            for (m, &v) in xbar.iter_mut().zip(&xs[i * c..(i + 1) * c]) {
                *m += v;
            }
        }
        for m in xbar.iter_mut() {
            *m *= inv;
        }
        match self.mode {
            PoolingMode::Average => xbar,
            PoolingMode::Attention => {
                let mut q = Vec::new();
                nn::matmul(&xbar, 1, c, self.wq.data(), c, &mut q);
                let mut k = Vec::new();
                nn::matmul(xs, hw, c, self.wk.data(), c, &mut k);
                let scale = T::of(1.0 / (c as f64).sqrt());
                let mut scores: Vec<T> = (0..hw)
                    .map(|i| {
                        let mut s = T::zero();
                        for (kv, qv) in k[i * c..(i + 1) * c].iter().zip(&q) {
                            s += *kv * *qv;
                        }
                        s * scale
                    })
                    .collect();
                nn::softmax_in_place(&mut scores);
                let mut pooled = vec![T::zero(); c];
                for i in 0..hw {
                    let a = scores[i];
                    for (p, &v) in pooled.iter_mut().zip(&xs[i * c..(i + 1) * c]) {
                        *p += a * v;
                    }
                }
                pooled
            }
        }
    }

    pub fn forward(&self, fm: &FeatureMap<T>) -> Embedding<T> {
        let pooled = self.pool(fm);
        Embedding::new(self.proj.forward_rows(&pooled, 1))
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ProjectorVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.leaf(t.clone())
            }
        };
        ProjectorVars {
            wq: put(&self.wq),
            wk: put(&self.wk),
            w: put(&self.proj.w),
            b: put(&self.proj.b),
        }
    }

    /// `fm` must be a rank-3 [h, w, c] var; returns [1, D].
    pub fn forward_tape(&self, tape: &mut Tape<T>, vars: &ProjectorVars, fm: Var) -> Var {
        let shape = tape.value(fm).shape().to_vec();
        let (hw, c) = (shape[0] * shape[1], shape[2]);
        let xs = tape.reshape(fm, &[hw, c]);
        let pooled = match self.mode {
            PoolingMode::Average => tape.mean_rows(xs),
            PoolingMode::Attention => {
                let xbar = tape.mean_rows(xs);
                let q = tape.matmul(xbar, vars.wq);
                let k = tape.matmul(xs, vars.wk);
                let qt = tape.transpose(q);
                let raw = tape.matmul(k, qt);
                let scale = T::of(1.0 / (c as f64).sqrt());
                let scaled = tape.scale(raw, scale);
                let alpha = tape.softmax_vec(scaled);
                let at = tape.transpose(alpha);
                tape.matmul(at, xs)
            }
        };
        tape.linear(pooled, vars.w, vars.b)
    }
}

/// The full encoder pair (T, V^a, V^b) plus vocabulary and config.
#[derive(Debug, Clone)]
pub struct EncoderBundle<T> {
    pub cfg: EncoderConfig,
    pub vocab: Vocab,
    pub text: TextEncoder<T>,
    pub features: FeatureExtractor<T>,
    pub projector: Projector<T>,
}

impl<T: Scalar> EncoderBundle<T> {
    pub fn init(cfg: EncoderConfig, vocab: Vocab) -> Self {
        let text = TextEncoder::init(vocab.len(), cfg.token_dim, cfg.embed_dim, cfg.seed);
        let features = FeatureExtractor::init(&cfg);
        let projector = Projector::init(&cfg);
        EncoderBundle {
            cfg,
            vocab,
            text,
            features,
            projector,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn stride(&self) -> usize {
        self.cfg.stride()
    }

    pub fn encode_text(&self, prompt: &str) -> Result<Embedding<T>> {
        let ids = self.vocab.encode(prompt);
        if ids.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        Ok(self.text.forward(&ids))
    }

    pub fn encode_image_features(&self, image: &Tensor<T>) -> Result<FeatureMap<T>> {
        if image.shape().len() != 3 || image.shape()[2] != self.cfg.image_channels {
            return Err(Error::invalid(format!(
                "expected [h, w, {}] image, got {:?}",
                self.cfg.image_channels,
                image.shape()
            )));
        }
        let (h, w) = (image.shape()[0], image.shape()[1]);
        if h < self.cfg.min_image || w < self.cfg.min_image {
            return Err(Error::invalid(format!(
                "image {h}x{w} below encoder minimum {}",
                self.cfg.min_image
            )));
        }
        let img = FeatureMap::from_tensor(image)?;
        Ok(self.features.forward(&img))
    }

    pub fn project_features(&self, fm: &FeatureMap<T>) -> Result<Embedding<T>> {
        if fm.c() != self.projector.channels() {
            return Err(Error::invalid(format!(
                "feature map has {} channels, projector expects {}",
                fm.c(),
                self.projector.channels()
            )));
        }
        Ok(self.projector.forward(fm))
    }

    pub fn encode_image(&self, image: &Tensor<T>) -> Result<Embedding<T>> {
        let fm = self.encode_image_features(image)?;
        self.project_features(&fm)
    }

    /// Ordered view of every parameter tensor (used for frozen-encoder
    /// equality checks and serialization).
    pub fn param_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out: Vec<(&'static str, &Tensor<T>)> = vec![
            ("text.table", &self.text.table),
            ("text.w", &self.text.proj.w),
            ("text.b", &self.text.proj.b),
        ];
        // conv entries are named positionally below during serialization
        for c in &self.features.convs {
            out.push(("va.conv.w", &c.w));
            out.push(("va.conv.b", &c.b));
        }
        out.push(("vb.wq", &self.projector.wq));
        out.push(("vb.wk", &self.projector.wk));
        out.push(("vb.w", &self.projector.proj.w));
        out.push(("vb.b", &self.projector.proj.b));
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut archive = TensorArchive::new();
        archive.push("text.table", &self.text.table)?;
        archive.push("text.w", &self.text.proj.w)?;
        archive.push("text.b", &self.text.proj.b)?;
        for (i, c) in self.features.convs.iter().enumerate() {
            archive.push(format!("va.conv{i}.w"), &c.w)?;
            archive.push(format!("va.conv{i}.b"), &c.b)?;
        }
        archive.push("vb.wq", &self.projector.wq)?;
        archive.push("vb.wk", &self.projector.wk)?;
        archive.push("vb.w", &self.projector.proj.w)?;
        archive.push("vb.b", &self.projector.proj.b)?;
        archive.write_to(path)?;
        let sidecar = Sidecar {
            config: self.cfg.clone(),
            vocab: self.vocab.tokens()[1..].to_vec(),
        };
        let json = serde_json::to_vec_pretty(&sidecar)?;
        std::fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        let archive = TensorArchive::read_from(path)?;
        let vocab = Vocab::from_tokens(sidecar.vocab);
        let mut bundle = EncoderBundle::init(sidecar.config, vocab);
        bundle.text.table = archive.tensor("text.table")?;
        bundle.text.proj.w = archive.tensor("text.w")?;
        bundle.text.proj.b = archive.tensor("text.b")?;
        for (i, c) in bundle.features.convs.iter_mut().enumerate() {
            c.w = archive.tensor(&format!("va.conv{i}.w"))?;
            c.b = archive.tensor(&format!("va.conv{i}.b"))?;
        }
        bundle.projector.wq = archive.tensor("vb.wq")?;
        bundle.projector.wk = archive.tensor("vb.wk")?;
        bundle.projector.proj.w = archive.tensor("vb.w")?;
        bundle.projector.proj.b = archive.tensor("vb.b")?;
        Ok(bundle)
    }
}

/// Loading externally pre-trained joint-encoder weights is out of scope for
/// this artifact; the entry point exists so callers can see where real
/// weights would plug in.
pub fn load_external_weights<T: Scalar>(_path: &Path) -> Result<EncoderBundle<T>> {
    Err(Error::Config(
        "external pre-trained encoder weights are not supported; use pretrain_toy_embedding".into(),
    ))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: EncoderConfig,
    vocab: Vec<String>,
}

/// One pre-training sample: an image paired with a caption naming its class
/// and domain concepts.
#[derive(Debug, Clone)]
pub struct CaptionedImage<T> {
    pub image: Tensor<T>,
    pub caption: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Contrastive temperature; logits are cosine similarities divided by it.
    pub temperature: f64,
    /// Mean image-embedding norm after the final rescaling step.
    pub target_norm: f64,
    pub seed: u64,
}

impl Default for ToyPretrainConfig {
    fn default() -> Self {
        ToyPretrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 3e-3,
            temperature: 0.07,
            target_norm: 1.0,
            seed: 7,
        }
    }
}

impl ToyPretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.learning_rate <= 0.0
            || self.temperature <= 0.0
            || self.target_norm <= 0.0
        {
            return Err(Error::Config(
                "pretrain config fields must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Contrastively pre-train the toy encoder pair on captioned images.
/// Fully reproducible from `cfg.seed`; with `epochs == 0` the returned
/// bundle equals its seeded initialization.
pub fn pretrain_toy_embedding<T: Scalar>(
    dataset: &[CaptionedImage<T>],
    enc_cfg: EncoderConfig,
    cfg: &ToyPretrainConfig,
) -> Result<EncoderBundle<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty pretraining dataset"));
    }
    let vocab = Vocab::from_texts(dataset.iter().map(|s| s.caption.as_str()));
    let mut bundle = EncoderBundle::init(enc_cfg, vocab);

    let token_ids: Vec<Vec<usize>> = dataset
        .iter()
        .map(|s| bundle.vocab.encode(&s.caption))
        .collect();
    let features: Vec<FeatureMap<T>> = dataset
        .iter()
        .map(|s| FeatureMap::from_tensor(&s.image))
        .collect::<Result<_>>()?;

    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = stream(cfg.seed, "pretrain-batches");
    let inv_temp = T::of(1.0 / cfg.temperature);

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue; // contrastive loss needs at least one negative
            }
            let mut tape = Tape::new();
            let tvars = bundle.text.bind(&mut tape, true);
            let fvars = bundle.features.bind(&mut tape, 0);
            let pvars = bundle.projector.bind(&mut tape, true);

            let mut img_rows = Vec::with_capacity(batch.len());
            let mut txt_rows = Vec::with_capacity(batch.len());
            for &i in batch {
                let img = tape.leaf(features[i].to_tensor());
                let fm = bundle.features.forward_tape(&mut tape, &fvars, img);
                img_rows.push(bundle.projector.forward_tape(&mut tape, &pvars, fm));
                txt_rows.push(bundle.text.forward_tape(&mut tape, &tvars, &token_ids[i]));
            }
            let zi = tape.concat_rows(&img_rows);
            let zt = tape.concat_rows(&txt_rows);
            let zin = tape.row_normalize(zi);
            let ztn = tape.row_normalize(zt);
            let ztt = tape.transpose(ztn);
            let sims = tape.matmul(zin, ztt);
            let logits = tape.scale(sims, inv_temp);
            let labels: Vec<usize> = (0..batch.len()).collect();
            let li = tape.softmax_xent(logits, labels.clone());
            let logits_t = tape.transpose(logits);
            let lt = tape.softmax_xent(logits_t, labels);
            let sum = tape.add(li, lt);
            let loss = tape.scale(sum, T::of(0.5));
            tape.backward(loss);

            let grads = [
                tape.grad(tvars.table).unwrap().clone(),
                tape.grad(tvars.w).unwrap().clone(),
                tape.grad(tvars.b).unwrap().clone(),
            ];
            let conv_grads: Vec<(Tensor<T>, Tensor<T>)> = fvars
                .convs
                .iter()
                .map(|&(w, b)| (tape.grad(w).unwrap().clone(), tape.grad(b).unwrap().clone()))
                .collect();
            let pgrads = [
                tape.grad(pvars.wq).unwrap().clone(),
                tape.grad(pvars.wk).unwrap().clone(),
                tape.grad(pvars.w).unwrap().clone(),
                tape.grad(pvars.b).unwrap().clone(),
            ];

            let mut params: Vec<&mut Tensor<T>> = vec![
                &mut bundle.text.table,
                &mut bundle.text.proj.w,
                &mut bundle.text.proj.b,
            ];
            for c in bundle.features.convs.iter_mut() {
                params.push(&mut c.w);
                params.push(&mut c.b);
            }
            params.push(&mut bundle.projector.wq);
            params.push(&mut bundle.projector.wk);
            params.push(&mut bundle.projector.proj.w);
            params.push(&mut bundle.projector.proj.b);

            let mut grad_refs: Vec<&Tensor<T>> = vec![&grads[0], &grads[1], &grads[2]];
            for (gw, gb) in &conv_grads {
                grad_refs.push(gw);
                grad_refs.push(gb);
            }
            grad_refs.push(&pgrads[0]);
            grad_refs.push(&pgrads[1]);
            grad_refs.push(&pgrads[2]);
            grad_refs.push(&pgrads[3]);

            opt.step(&mut params, &grad_refs);
        }
    }

    if cfg.epochs > 0 {
        calibrate_image_norm(&mut bundle, &features, cfg.target_norm);
    }
    Ok(bundle)
}

/// Rescale the projector output so the mean image-embedding norm over the
/// given images equals `target`. Cosine geometry is unchanged; the absolute
/// scale controls how strong a unit text shift is relative to an image
/// embedding.
fn calibrate_image_norm<T: Scalar>(
    bundle: &mut EncoderBundle<T>,
    images: &[FeatureMap<T>],
    target: f64,
) {
    let mut total = 0.0;
    for img in images {
        let fm = bundle.features.forward(img);
        let z = bundle.projector.forward(&fm);
        total += z.norm().as_f64();
    }
    let mean = total / images.len() as f64;
    if mean > 0.0 {
        let s = T::of(target / mean);
        bundle.projector.proj.w.scale_in_place(s);
        bundle.projector.proj.b.scale_in_place(s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_bundle(words: &[&str]) -> EncoderBundle<f64> {
        let vocab = Vocab::from_tokens(words.iter().map(|s| s.to_string()));
        EncoderBundle::init(EncoderConfig::toy(11), vocab)
    }

    fn ramp_image(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(
            &[h, w, 3],
            (0..h * w * 3)
                .map(|i| (i % 97) as f64 / 97.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn text_encoding_is_deterministic_and_sized() {
        let b = toy_bundle(&["an", "image", "taken", "during", "the", "day"]);
        let e1 = b.encode_text("an image taken during the day").unwrap();
        let e2 = b.encode_text("an image taken during the day").unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.dim(), 32);
        assert!(b.encode_text("").is_err());
        assert!(b.encode_text("   ").is_err());
    }

    #[test]
    fn weather_token_changes_embedding() {
        let b = toy_bundle(&["an", "image", "taken", "on", "a", "fog", "rain", "day"]);
        let e1 = b.encode_text("an image taken on a fog day").unwrap();
        let e2 = b.encode_text("an image taken on a rain day").unwrap();
        let cos = e1.cosine_similarity(&e2).unwrap();
        assert!(cos < 1.0 - 1e-9, "cos = {cos}");
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let b = toy_bundle(&["day"]);
        let e1 = b.encode_text("zzz day").unwrap();
        let e2 = b.encode_text("qqq day").unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn feature_map_shape_follows_stride() {
        let b = toy_bundle(&["x"]);
        let fm = b.encode_image_features(&ramp_image(64, 64)).unwrap();
        assert_eq!(fm.dims(), (8, 8, 32));
        // undersized image
        assert!(b.encode_image_features(&ramp_image(16, 16)).is_err());
        // all-zero image stays finite
        let z = b
            .encode_image_features(&Tensor::zeros(&[32, 32, 3]))
            .unwrap();
        assert!(z.all_finite());
    }

    #[test]
    fn full_scale_config_gives_14x14_on_224() {
        let cfg = EncoderConfig::full_scale_shape(1);
        assert_eq!(cfg.stride(), 16);
        let b = EncoderBundle::<f32>::init(cfg, Vocab::from_tokens(["x".to_string()]));
        let img = Tensor::<f32>::zeros(&[224, 224, 3]);
        let fm = b.encode_image_features(&img).unwrap();
        assert_eq!((fm.h(), fm.w()), (14, 14));
    }

    #[test]
    fn constant_map_pooling_equivalence() {
        let b = toy_bundle(&["x"]);
        let fm = FeatureMap::from_vec(4, 4, 32, vec![0.37; 4 * 4 * 32]).unwrap();
        let attn = b.projector.pool(&fm);
        let avg = b.projector.with_mode(PoolingMode::Average).pool(&fm);
        for (a, m) in attn.iter().zip(&avg) {
            assert!((a - m).abs() <= 1e-6 * m.abs().max(1.0), "{a} vs {m}");
        }
    }

    #[test]
    fn zero_map_zero_bias_projects_to_zero() {
        let b = toy_bundle(&["x"]);
        // init keeps projector bias at zero
        assert!(b.projector.proj.b.data().iter().all(|&v| v == 0.0));
        let fm = FeatureMap::zeros(4, 4, 32);
        let e = b.project_features(&fm).unwrap();
        assert!(e.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let b = toy_bundle(&["x"]);
        let fm = FeatureMap::<f64>::zeros(4, 4, 16);
        assert!(b.project_features(&fm).is_err());
    }

    #[test]
    fn encode_image_is_the_composition() {
        let b = toy_bundle(&["x"]);
        let img = ramp_image(64, 64);
        let direct = b.encode_image(&img).unwrap();
        let composed = b
            .project_features(&b.encode_image_features(&img).unwrap())
            .unwrap();
        assert_eq!(direct, composed);
    }

    #[test]
    fn tape_projection_matches_plain() {
        let b = toy_bundle(&["x"]);
        let fm = b.encode_image_features(&ramp_image(64, 64)).unwrap();
        let plain = b.project_features(&fm).unwrap();
        let mut tape = Tape::new();
        let pvars = b.projector.bind(&mut tape, false);
        let fm_var = tape.leaf(fm.to_tensor());
        let out = b.projector.forward_tape(&mut tape, &pvars, fm_var);
        assert_eq!(tape.value(out).data(), &plain.values[..]);
    }

    #[test]
    fn saved_bundle_round_trips() {
        let b = toy_bundle(&["fog", "rain", "day"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.tnsa");
        b.save(&path).unwrap();
        let loaded = EncoderBundle::<f64>::load(&path).unwrap();
        let img = ramp_image(64, 64);
        // f32 storage quantizes f64 params, so compare via the f32 route
        let b32 = {
            let mut b32 = EncoderBundle::<f32>::load(&path).unwrap();
            b32.cfg.seed = b.cfg.seed;
            b32
        };
        assert_eq!(loaded.vocab.tokens(), b.vocab.tokens());
        let e = b32
            .encode_text("an image taken on a fog day".to_lowercase().as_str())
            .unwrap();
        assert_eq!(e.dim(), 32);
        let fm = b32
            .encode_image_features(&Tensor::<f32>::zeros(&[64, 64, 3]))
            .unwrap();
        assert_eq!(fm.dims(), (8, 8, 32));
        let _ = img;
    }
}
