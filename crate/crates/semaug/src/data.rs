//! Dataset ingestion and the deterministic synthetic multi-domain generator.
//!
//! All domains render the same underlying scenes for the same seed; only the
//! appearance transform differs, so cross-domain performance differences are
//! attributable to appearance shift alone.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::encoder::CaptionedImage;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DOMAIN_NAMES: [&str; 5] = ["clear", "fog", "night", "rain", "dusk_rain"];
pub const TOY_CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

/// Appearance transform of one domain. "clear" is the identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Blend factor toward uniform gray.
    pub fog_alpha: f64,
    /// Global intensity scale.
    pub brightness: f64,
    /// Streaks per image row (scaled by image size).
    pub rain_density: f64,
    /// Box blur radius in pixels.
    pub blur_radius: usize,
}

impl DomainSpec {
    pub fn named(name: &str) -> Result<Self> {
        let mut spec = DomainSpec {
            name: name.to_string(),
            fog_alpha: 0.0,
            brightness: 1.0,
            rain_density: 0.0,
            blur_radius: 0,
        };
        match name {
            "clear" => {}
            "fog" => {
                spec.fog_alpha = 0.45;
                spec.blur_radius = 1;
            }
            "night" => spec.brightness = 0.3,
            "rain" => spec.rain_density = 0.5,
            "dusk_rain" => {
                spec.brightness = 0.45;
                spec.rain_density = 0.5;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown domain {other:?}; expected one of {DOMAIN_NAMES:?}"
                )))
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fog_alpha)
            || !(self.brightness > 0.0 && self.brightness <= 2.0)
            || self.rain_density < 0.0
            || self.blur_radius > 4
        {
            return Err(Error::Config(format!(
                "domain parameters out of range: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.fog_alpha == 0.0
            && self.brightness == 1.0
            && self.rain_density == 0.0
            && self.blur_radius == 0
    }

    /// Apply the transform; `image_index` keeps streak placement stable per
    /// image. The scene geometry is untouched.
    pub fn apply<T: Scalar>(&self, image: &mut Image<T>, seed: u64, image_index: usize) {
        if self.rain_density > 0.0 {
            let mut rng = stream(seed, &format!("rain-{}-{image_index}", self.name));
            rain_streaks(image, self.rain_density, &mut rng);
        }
        if self.fog_alpha > 0.0 {
            fog_blend(image, self.fog_alpha);
        }
        if self.blur_radius > 0 {
            gaussian_blur(image, self.blur_radius);
        }
        if self.brightness != 1.0 {
            let s = T::of(self.brightness);
            for v in image.data.iter_mut() {
                *v = *v * s;
            }
        }
        for v in image.data.iter_mut() {
            *v = v.max(T::zero()).min(T::one());
        }
    }
}

/// H x W x 3 image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![T::zero(); h * w * 3],
        }
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.h, self.w, 3], self.data.clone()).expect("image dims")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        if t.shape().len() != 3 || t.shape()[2] != 3 {
            return Err(Error::invalid("image tensor must be [h, w, 3]"));
        }
        Ok(Image {
            h: t.shape()[0],
            w: t.shape()[1],
            data: t.data().to_vec(),
        })
    }

    fn px(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.w + x) * 3 + c]
    }

    fn px_mut(&mut self, y: usize, x: usize, c: usize) -> &mut T {
        &mut self.data[(y * self.w + x) * 3 + c]
    }
}

fn fog_blend<T: Scalar>(image: &mut Image<T>, alpha: f64) {
    let a = T::of(alpha);
    let gray = T::of(0.65);
    let one = T::one();
    for v in image.data.iter_mut() {
        *v = (one - a) * *v + a * gray;
    }
}

/// Separable binomial blur (discrete Gaussian); radius 1 uses the [1, 2, 1]
/// kernel, larger radii repeat it.
fn gaussian_blur<T: Scalar>(image: &mut Image<T>, radius: usize) {
    let (h, w) = (image.h, image.w);
    let quarter = T::of(0.25);
    let half = T::of(0.5);
    for _ in 0..radius {
        let src = image.data.clone();
        // horizontal pass
        let mut tmp = src.clone();
        for y in 0..h {
            for x in 0..w {
                let xl = x.saturating_sub(1);
                let xr = (x + 1).min(w - 1);
                for c in 0..3 {
                    tmp[(y * w + x) * 3 + c] = quarter * src[(y * w + xl) * 3 + c]
                        + half * src[(y * w + x) * 3 + c]
                        + quarter * src[(y * w + xr) * 3 + c];
                }
            }
        }
        // vertical pass
        for y in 0..h {
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            for x in 0..w {
                for c in 0..3 {
                    image.data[(y * w + x) * 3 + c] = quarter * tmp[(yu * w + x) * 3 + c]
                        + half * tmp[(y * w + x) * 3 + c]
                        + quarter * tmp[(yd * w + x) * 3 + c];
                }
            }
        }
    }
}

fn rain_streaks<T: Scalar>(image: &mut Image<T>, density: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = (image.h, image.w);
    let n = (density * h as f64).round() as usize;
    let boost = T::of(0.3);
    let one = T::one();
    for _ in 0..n {
        let x0 = rng.gen_range(0.0..w as f64);
        let y0 = rng.gen_range(0.0..h as f64);
        let len = rng.gen_range(6.0..14.0);
        let slant = rng.gen_range(0.15..0.4);
        for step in 0..len as usize {
            let y = y0 + step as f64;
            let x = x0 + slant * step as f64;
            if y >= h as f64 || x >= w as f64 {
                break;
            }
            let (yi, xi) = (y as usize, x as usize);
            for c in 0..3 {
                let v = image.px(yi, xi, c) + boost;
                *image.px_mut(yi, xi, c) = v.min(one);
            }
        }
    }
}

/// One annotated image.
#[derive(Debug, Clone)]
pub struct SceneSample<T> {
    pub image: Tensor<T>,
    pub annotations: Vec<(BBox, usize)>,
    pub domain: String,
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub samples: Vec<SceneSample<T>>,
    pub class_names: Vec<String>,
    pub domain: String,
}

struct SceneObject {
    class_id: usize, // 1..=K
    cx: f64,
    cy: f64,
    half: f64,
    color: [f64; 3],
}

impl SceneObject {
    fn bbox(&self) -> BBox {
        BBox {
            x_min: self.cx - self.half,
            y_min: self.cy - self.half,
            x_max: self.cx + self.half,
            y_max: self.cy + self.half,
        }
    }
}

fn render_scene<T: Scalar>(
    image_index: usize,
    image_size: usize,
    n_classes: usize,
    seed: u64,
) -> (Image<T>, Vec<(BBox, usize)>) {
    let mut rng = stream(seed, &format!("scene-{image_index}"));
    let s = image_size;
    let mut img = Image::new(s, s);

    // textured background: mild diagonal ramp plus per-pixel noise
    let base = rng.gen_range(0.35..0.5);
    for y in 0..s {
        for x in 0..s {
            let ramp = 0.12 * (x + y) as f64 / (2 * s) as f64;
            for c in 0..3 {
                let noise = rng.gen_range(-0.04..0.04);
                *img.px_mut(y, x, c) = T::of((base + ramp + noise).clamp(0.0, 1.0));
            }
        }
    }

    let palette: [[f64; 3]; 3] = [
        [0.85, 0.20, 0.15], // circle: red
        [0.15, 0.75, 0.25], // square: green
        [0.20, 0.35, 0.90], // triangle: blue
    ];
    let n_objects = rng.gen_range(1..=5usize);
    let min_half = (s as f64 * 0.11).max(4.0);
    let max_half = s as f64 * 0.22;
    let mut objects: Vec<SceneObject> = Vec::new();
    for _ in 0..n_objects {
        let mut placed = None;
        for _attempt in 0..8 {
            let half = rng.gen_range(min_half..max_half);
            let cx = rng.gen_range(half..s as f64 - half);
            let cy = rng.gen_range(half..s as f64 - half);
            let class_id = rng.gen_range(1..=n_classes);
            let mut color = palette[(class_id - 1) % palette.len()];
            for ch in color.iter_mut() {
                *ch = (*ch + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0);
            }
            let cand = SceneObject {
                class_id,
                cx,
                cy,
                half,
                color,
            };
            let overlaps = objects
                .iter()
                .any(|o| crate::eval::iou(&o.bbox(), &cand.bbox()) > 0.15);
            if !overlaps {
                placed = Some(cand);
                break;
            }
            placed = Some(cand); // last attempt wins even when crowded
        }
        if let Some(o) = placed {
            objects.push(o);
        }
    }

    for o in &objects {
        draw_object(&mut img, o);
    }
    let annotations = objects.iter().map(|o| (o.bbox(), o.class_id)).collect();
    (img, annotations)
}

fn draw_object<T: Scalar>(img: &mut Image<T>, o: &SceneObject) {
    let (h, w) = (img.h, img.w);
    let y_lo = (o.cy - o.half).floor().max(0.0) as usize;
    let y_hi = ((o.cy + o.half).ceil() as usize).min(h);
    let x_lo = (o.cx - o.half).floor().max(0.0) as usize;
    let x_hi = ((o.cx + o.half).ceil() as usize).min(w);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let inside = match o.class_id % 3 {
                1 => {
                    let dx = px - o.cx;
                    let dy = py - o.cy;
                    dx * dx + dy * dy <= o.half * o.half
                }
                2 => (px - o.cx).abs() <= o.half && (py - o.cy).abs() <= o.half,
                _ => {
                    // upward triangle spanning the box
                    let t = (py - (o.cy - o.half)) / (2.0 * o.half);
                    t >= 0.0 && t <= 1.0 && (px - o.cx).abs() <= t * o.half
                }
            };
            if inside {
                for c in 0..3 {
                    *img.px_mut(y, x, c) = T::of(o.color[c]);
                }
            }
        }
    }
}

/// Deterministic synthetic dataset for one domain. Scene geometry depends on
/// (seed, image index) only; the domain affects appearance alone.
pub fn generate_synthetic_domain<T: Scalar>(
    spec: &DomainSpec,
    n_images: usize,
    image_size: usize,
    class_names: &[String],
    seed: u64,
) -> Result<Dataset<T>> {
    spec.validate()?;
    if n_images == 0 || class_names.is_empty() {
        return Err(Error::invalid(
            "need at least one image and one class to generate",
        ));
    }
    let mut samples = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let (mut img, annotations) = render_scene::<T>(i, image_size, class_names.len(), seed);
        spec.apply(&mut img, seed, i);
        samples.push(SceneSample {
            image: img.to_tensor(),
            annotations,
            domain: spec.name.clone(),
        });
    }
    Ok(Dataset {
        samples,
        class_names: class_names.to_vec(),
        domain: spec.name.clone(),
    })
}

/// Appearance styles covered by contrastive pre-training. The benchmark
/// domains appear alongside extra weather styles (snow, cloudy, stormy) so
/// every curated prompt concept is visually grounded, the way a large
/// pre-trained encoder has seen every weather word.
pub const PRETRAIN_STYLES: [&str; 8] = [
    "clear", "fog", "night", "rain", "dusk_rain", "snow", "cloudy", "stormy",
];

fn apply_pretrain_style<T: Scalar>(
    style: &str,
    img: &mut Image<T>,
    seed: u64,
    image_index: usize,
) -> Result<()> {
    match style {
        "snow" => {
            let mut rng = stream(seed, &format!("snow-{image_index}"));
            speckles(img, 0.02, &mut rng);
            for v in img.data.iter_mut() {
                *v = (*v * T::of(1.08)).min(T::one());
            }
        }
        "cloudy" => {
            fog_blend(img, 0.25);
        }
        "stormy" => {
            let mut rng = stream(seed, &format!("storm-{image_index}"));
            rain_streaks(img, 0.7, &mut rng);
            fog_blend(img, 0.15);
            for v in img.data.iter_mut() {
                *v = *v * T::of(0.55);
            }
        }
        other => {
            DomainSpec::named(other)?.apply(img, seed, image_index);
        }
    }
    for v in img.data.iter_mut() {
        *v = v.max(T::zero()).min(T::one());
    }
    Ok(())
}

fn speckles<T: Scalar>(image: &mut Image<T>, density: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = (image.h, image.w);
    let n = (density * (h * w) as f64).round() as usize;
    let one = T::one();
    for _ in 0..n {
        let y = rng.gen_range(0..h);
        let x = rng.gen_range(0..w);
        for c in 0..3 {
            *image.px_mut(y, x, c) = one;
        }
    }
}

/// Single-object captioned images for contrastive pre-training; captions
/// name the object class and the style's weather/time concepts.
pub fn generate_pretraining_set<T: Scalar>(
    styles: &[&str],
    per_style: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<CaptionedImage<T>>> {
    let mut out = Vec::with_capacity(styles.len() * per_style);
    for (d_idx, name) in styles.iter().enumerate() {
        let (weather, time) = domain_tokens(name);
        for i in 0..per_style {
            let image_index = d_idx * per_style + i;
            let mut rng = stream(seed, &format!("pretrain-{name}-{i}"));
            let s = image_size;
            let mut img = Image::<T>::new(s, s);
            let base = rng.gen_range(0.35..0.5);
            for y in 0..s {
                for x in 0..s {
                    let ramp = 0.12 * (x + y) as f64 / (2 * s) as f64;
                    for c in 0..3 {
                        let noise = rng.gen_range(-0.04..0.04);
                        *img.px_mut(y, x, c) = T::of((base + ramp + noise).clamp(0.0, 1.0));
                    }
                }
            }
            let class_id = rng.gen_range(1..=TOY_CLASS_NAMES.len());
            let half = rng.gen_range(s as f64 * 0.15..s as f64 * 0.3);
            let cx = rng.gen_range(half..s as f64 - half);
            let cy = rng.gen_range(half..s as f64 - half);
            let palette: [[f64; 3]; 3] = [[0.85, 0.20, 0.15], [0.15, 0.75, 0.25], [0.20, 0.35, 0.90]];
            let mut color = palette[class_id - 1];
            for ch in color.iter_mut() {
                *ch = (*ch + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0);
            }
            draw_object(
                &mut img,
                &SceneObject {
                    class_id,
                    cx,
                    cy,
                    half,
                    color,
                },
            );
            apply_pretrain_style(name, &mut img, seed, image_index)?;
            let class = TOY_CLASS_NAMES[class_id - 1];
            let caption = match i % 3 {
                0 => format!("a photo of a {class} taken on a {weather} {time}"),
                1 => format!("an image of a {class} taken on a {weather} {time}"),
                _ if name == &"clear" => {
                    format!("an image of a {class} taken during the day")
                }
                _ => format!("a photo of a {class} taken on a {weather} {time}"),
            };
            out.push(CaptionedImage {
                image: img.to_tensor(),
                caption,
            });
        }
    }
    Ok(out)
}

/// Weather/time tokens describing each synthetic style.
pub fn domain_tokens(name: &str) -> (&'static str, &'static str) {
    match name {
        "fog" => ("fog", "day"),
        "night" => ("clear", "night"),
        "rain" => ("rain", "day"),
        "dusk_rain" => ("rain", "evening"),
        "snow" => ("snow", "day"),
        "cloudy" => ("cloudy", "day"),
        "stormy" => ("stormy", "evening"),
        _ => ("clear", "day"),
    }
}

// ---------------------------------------------------------------------------
// COCO-style serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CocoInfo {
    description: String,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: usize,
    width: usize,
    height: usize,
    file_name: String,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: usize,
    image_id: usize,
    category_id: usize,
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: usize,
    name: String,
    supercategory: String,
}

#[derive(Serialize, Deserialize)]
struct CocoDataset {
    info: CocoInfo,
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Write `annotations.json` plus an `images/` directory of PNGs.
pub fn save_dataset<T: Scalar>(dataset: &Dataset<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut ann_id = 1;
    for (i, s) in dataset.samples.iter().enumerate() {
        let (h, w) = (s.image.shape()[0], s.image.shape()[1]);
        let file_name = format!("img_{i:05}.png");
        write_png(&s.image, &img_dir.join(&file_name))?;
        images.push(CocoImage {
            id: i + 1,
            width: w,
            height: h,
            file_name,
        });
        for (bbox, class_id) in &s.annotations {
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: i + 1,
                category_id: *class_id,
                bbox: [
                    bbox.x_min,
                    bbox.y_min,
                    bbox.x_max - bbox.x_min,
                    bbox.y_max - bbox.y_min,
                ],
                area: (bbox.x_max - bbox.x_min) * (bbox.y_max - bbox.y_min),
                iscrowd: 0,
            });
            ann_id += 1;
        }
    }
    let categories = dataset
        .class_names
        .iter()
        .enumerate()
        .map(|(i, name)| CocoCategory {
            id: i + 1,
            name: name.clone(),
            supercategory: "shape".into(),
        })
        .collect();
    let coco = CocoDataset {
        info: CocoInfo {
            description: dataset.domain.clone(),
        },
        images,
        annotations,
        categories,
    };
    std::fs::write(dir.join("annotations.json"), serde_json::to_vec_pretty(&coco)?)?;
    Ok(())
}

/// Load a COCO-style dataset; boxes convert from [x, y, w, h] to corners and
/// category ids map to contiguous 1..K by ascending id.
pub fn load_dataset<T: Scalar>(
    annotation_path: impl AsRef<Path>,
    image_dir: impl AsRef<Path>,
) -> Result<Dataset<T>> {
    let annotation_path = annotation_path.as_ref();
    let coco: CocoDataset = serde_json::from_slice(&std::fs::read(annotation_path)?)?;

    let mut categories = coco.categories;
    categories.sort_by_key(|c| c.id);
    let class_names: Vec<String> = categories.iter().map(|c| c.name.clone()).collect();
    let cat_map: std::collections::HashMap<usize, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, i + 1))
        .collect();

    let mut image_index: std::collections::HashMap<usize, usize> = Default::default();
    let mut samples = Vec::with_capacity(coco.images.len());
    for (i, im) in coco.images.iter().enumerate() {
        let path = image_dir.as_ref().join(&im.file_name);
        let tensor = read_png::<T>(&path).map_err(|e| Error::DatasetLoad {
            record: format!("image {} ({})", im.id, im.file_name),
            reason: e.to_string(),
        })?;
        if tensor.shape()[0] != im.height || tensor.shape()[1] != im.width {
            return Err(Error::DatasetLoad {
                record: format!("image {}", im.id),
                reason: format!(
                    "file is {}x{}, annotations say {}x{}",
                    tensor.shape()[1],
                    tensor.shape()[0],
                    im.width,
                    im.height
                ),
            });
        }
        image_index.insert(im.id, i);
        samples.push(SceneSample {
            image: tensor,
            annotations: Vec::new(),
            domain: coco.info.description.clone(),
        });
    }

    for ann in &coco.annotations {
        let &idx = image_index.get(&ann.image_id).ok_or_else(|| Error::DatasetLoad {
            record: format!("annotation {}", ann.id),
            reason: format!("references unknown image id {}", ann.image_id),
        })?;
        let class_id = *cat_map.get(&ann.category_id).ok_or_else(|| Error::DatasetLoad {
            record: format!("annotation {}", ann.id),
            reason: format!("references unknown category id {}", ann.category_id),
        })?;
        let [x, y, w, h] = ann.bbox;
        let bbox = BBox {
            x_min: x,
            y_min: y,
            x_max: x + w,
            y_max: y + h,
        };
        let im = &coco.images[idx];
        if w <= 0.0
            || h <= 0.0
            || x < 0.0
            || y < 0.0
            || bbox.x_max > im.width as f64 + 1e-6
            || bbox.y_max > im.height as f64 + 1e-6
        {
            return Err(Error::DatasetLoad {
                record: format!("annotation {}", ann.id),
                reason: format!("bbox {:?} out of bounds for {}x{}", ann.bbox, im.width, im.height),
            });
        }
        samples[idx].annotations.push((bbox, class_id));
    }

    Ok(Dataset {
        samples,
        class_names,
        domain: coco.info.description,
    })
}

fn write_png<T: Scalar>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                to_u8(image.data()[(y * w + x) * 3]),
                to_u8(image.data()[(y * w + x) * 3 + 1]),
                to_u8(image.data()[(y * w + x) * 3 + 2]),
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Image(e.to_string()))?;
    Ok(())
}

fn read_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data.push(T::of(px[c] as f64 / 255.0));
            }
        }
    }
    Tensor::from_vec(&[h, w, 3], data)
}

fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

// ---------------------------------------------------------------------------
// Random crops
// ---------------------------------------------------------------------------

/// Mirror an [h, w, 3] image left-right.
pub fn hflip_image<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let src = image.data();
    let mut out = vec![T::zero(); h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let dst = (y * w + (w - 1 - x)) * 3;
            out[dst..dst + 3].copy_from_slice(&src[(y * w + x) * 3..(y * w + x) * 3 + 3]);
        }
    }
    Tensor::from_vec(&[h, w, 3], out).expect("flip dims")
}

/// Bilinear resize to `size` x `size`.
pub fn bilinear_resize<T: Scalar>(image: &Tensor<T>, size: usize) -> Tensor<T> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let src = image.data();
    let mut out = vec![T::zero(); size * size * 3];
    let sy = h as f64 / size as f64;
    let sx = w as f64 / size as f64;
    for oy in 0..size {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = T::of(fy - y0 as f64);
        for ox in 0..size {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = T::of(fx - x0 as f64);
            let one = T::one();
            for c in 0..3 {
                let v00 = src[(y0 * w + x0) * 3 + c];
                let v01 = src[(y0 * w + x1) * 3 + c];
                let v10 = src[(y1 * w + x0) * 3 + c];
                let v11 = src[(y1 * w + x1) * 3 + c];
                let top = v00 * (one - dx) + v01 * dx;
                let bot = v10 * (one - dx) + v11 * dx;
                out[(oy * size + ox) * 3 + c] = top * (one - dy) + bot * dy;
            }
        }
    }
    Tensor::from_vec(&[size, size, 3], out).expect("resize dims")
}

/// Square sub-image [y0, y0+side) x [x0, x0+side) resized to `size`.
pub fn crop_and_resize<T: Scalar>(
    image: &Tensor<T>,
    y0: usize,
    x0: usize,
    side: usize,
    size: usize,
) -> Tensor<T> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let y1 = (y0 + side).min(h);
    let x1 = (x0 + side).min(w);
    let mut crop = vec![T::zero(); (y1 - y0) * (x1 - x0) * 3];
    for y in y0..y1 {
        let src = &image.data()[(y * w + x0) * 3..(y * w + x1) * 3];
        crop[(y - y0) * (x1 - x0) * 3..(y - y0 + 1) * (x1 - x0) * 3].copy_from_slice(src);
    }
    let crop = Tensor::from_vec(&[y1 - y0, x1 - x0, 3], crop).expect("crop dims");
    bilinear_resize(&crop, size)
}

/// `n` random square crops covering 50-100% of the shorter side, resized to
/// `size` x `size`.
pub fn random_crops<T: Scalar>(
    image: &Tensor<T>,
    size: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Tensor<T>> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let shorter = h.min(w);
    (0..n)
        .map(|_| {
            let frac = rng.gen_range(0.5..=1.0);
            let side = ((shorter as f64 * frac).round() as usize).clamp(1, shorter);
            let y0 = rng.gen_range(0..=h - side);
            let x0 = rng.gen_range(0..=w - side);
            crop_and_resize(image, y0, x0, side, size)
        })
        .collect()
}
