//! Synthetic multi-label images, view augmentation and patch extraction.
//!
//! Each class owns a prototype: a soft disc with a class colour and a
//! class-oriented stripe texture, centred at a class-dependent location.
//! An image superposes one to three prototypes on a noisy background, and
//! its label set is exactly the set of prototypes drawn.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WchError};
use crate::io;
use crate::rng::rng_for;
use crate::tensor::{Real, Tensor};

/// Multi-hot label vector over a fixed number of classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelSet {
    mask: Vec<bool>,
}

impl LabelSet {
    pub fn from_classes(num_classes: usize, classes: &[usize]) -> Result<Self> {
        let mut mask = vec![false; num_classes];
        for &c in classes {
            if c >= num_classes {
                return Err(WchError::Config(format!("class {c} out of range 0..{num_classes}")));
            }
            mask[c] = true;
        }
        Ok(LabelSet { mask })
    }

    pub fn num_classes(&self) -> usize {
        self.mask.len()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(c, _)| c)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.mask.get(class).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Relevance ground truth: two items are relevant iff they share a label.
    pub fn intersects(&self, other: &LabelSet) -> bool {
        self.mask.iter().zip(&other.mask).any(|(&a, &b)| a && b)
    }
}

/// `size × size × channels` pixels, channel-last, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    channels: usize,
    pixels: Vec<Real>,
}

impl Image {
    pub fn new(size: usize, channels: usize, pixels: Vec<Real>) -> Result<Self> {
        if pixels.len() != size * size * channels {
            return Err(WchError::dim("image", &[size, size, channels], &[pixels.len()]));
        }
        if pixels.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(WchError::Config("pixel values must be finite and in [0, 1]".into()));
        }
        Ok(Image { size, channels, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[Real] {
        &self.pixels
    }

    fn at(&self, y: usize, x: usize, ch: usize) -> Real {
        self.pixels[(y * self.size + x) * self.channels + ch]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image: Image,
    pub labels: LabelSet,
}

/// Dataset generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train_count: usize,
    pub query_count: usize,
    pub classes: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            train_count: 512,
            query_count: 128,
            classes: 4,
            image_size: 32,
            patch_size: 8,
            channels: 3,
        }
    }
}

impl DataConfig {
    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size.max(1);
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry(self.image_size, self.patch_size, self.channels)?;
        if self.classes < 2 {
            return Err(WchError::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.train_count < self.classes {
            return Err(WchError::Config(format!(
                "train_count {} must be >= classes {}",
                self.train_count, self.classes
            )));
        }
        Ok(())
    }
}

fn check_geometry(s: usize, p: usize, c: usize) -> Result<()> {
    if s == 0 || p == 0 || c == 0 {
        return Err(WchError::Config(
            "image size, patch size and channels must be positive".into(),
        ));
    }
    if s % p != 0 {
        return Err(WchError::Config(format!(
            "image size {s} is not divisible by patch size {p}"
        )));
    }
    Ok(())
}

/// Probability weights of drawing 1, 2 or 3 prototypes.
const CARDINALITY_WEIGHTS: [f64; 3] = [0.8, 0.15, 0.05];

/// Generate `count` labelled images; a pure function of its arguments.
pub fn generate(seed: u64, count: usize, classes: usize, s: usize, p: usize, c: usize) -> Result<Vec<SynthImage>> {
    check_geometry(s, p, c)?;
    if classes < 2 {
        return Err(WchError::Config(format!("classes must be >= 2, got {classes}")));
    }
    if count < classes {
        return Err(WchError::Config(format!("count {count} must be >= classes {classes}")));
    }
    let mut label_rng = rng_for(seed, &[0x1abe1]);
    let mut usage = vec![0usize; classes];
    let max_card = classes.min(3);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let card = draw_cardinality(&mut label_rng, max_card);
        // least-used classes first, random among ties: keeps counts within ±1
        let mut order: Vec<usize> = (0..classes).collect();
        order.shuffle(&mut label_rng);
        order.sort_by_key(|&k| usage[k]);
        let mut picked: Vec<usize> = order[..card].to_vec();
        picked.sort_unstable();
        for &k in &picked {
            usage[k] += 1;
        }
        let labels = LabelSet::from_classes(classes, &picked)?;
        let image = render(seed, i as u64, &picked, classes, s, c);
        out.push(SynthImage { image, labels });
    }
    Ok(out)
}

fn draw_cardinality(rng: &mut impl Rng, max_card: usize) -> usize {
    let weights = &CARDINALITY_WEIGHTS[..max_card];
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i + 1;
        }
        u -= w;
    }
    max_card
}

fn class_color(k: usize, classes: usize, channels: usize) -> Vec<f64> {
    let h = k as f64 / classes as f64;
    if channels == 3 {
        hsv_to_rgb(h, 0.9, 0.95).to_vec()
    } else {
        (0..channels)
            .map(|ch| 0.5 + 0.5 * (2.0 * PI * (h + ch as f64 / channels as f64)).cos())
            .collect()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(seed: u64, index: u64, picked: &[usize], classes: usize, s: usize, c: usize) -> Image {
    let mut rng = rng_for(seed, &[0x1a6e, index]);
    let sf = s as f64;
    let base: f64 = rng.random_range(0.05..0.25);
    let mut px: Vec<f64> = (0..s * s * c).map(|_| base + rng.random_range(-0.05..0.05)).collect();
    for &k in picked {
        let angle = 2.0 * PI * k as f64 / classes as f64 + PI / 4.0;
        let ring = sf * 0.25 * std::f64::consts::SQRT_2;
        let jitter = sf / 16.0;
        let cy = sf / 2.0 + ring * angle.sin() + rng.random_range(-jitter..jitter);
        let cx = sf / 2.0 + ring * angle.cos() + rng.random_range(-jitter..jitter);
        let radius = sf * rng.random_range(0.18..0.24);
        let color = class_color(k, classes, c);
        let phi = PI * k as f64 / classes as f64;
        for y in 0..s {
            for x in 0..s {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
                let alpha = 1.0 / (1.0 + ((d - radius) / 0.8).exp());
                let stripe = 0.8 + 0.2 * (2.0 * PI * 4.0 * (fx * phi.cos() + fy * phi.sin()) / sf).sin();
                for ch in 0..c {
                    let o = (y * s + x) * c + ch;
                    px[o] = (1.0 - alpha) * px[o] + alpha * color[ch] * stripe;
                }
            }
        }
    }
    let pixels = px.into_iter().map(|v| v.clamp(0.0, 1.0) as Real).collect();
    Image {
        size: s,
        channels: c,
        pixels,
    }
}

/// View augmentation: random resized crop, horizontal flip, pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Bounds of the crop area as a fraction of the image area.
    pub min_scale: f64,
    pub max_scale: f64,
    pub flip_prob: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            min_scale: 0.5,
            max_scale: 1.0,
            flip_prob: 0.5,
            noise_std: 0.02,
        }
    }
}

impl AugmentConfig {
    /// Augmentation that leaves images untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            min_scale: 1.0,
            max_scale: 1.0,
            flip_prob: 0.0,
            noise_std: 0.0,
        }
    }
}

/// Augment pixels only; deterministic in `seed`.
pub fn augment_image(img: &Image, seed: u64, cfg: &AugmentConfig) -> Image {
    let mut rng = rng_for(seed, &[0xa06]);
    let s = img.size;
    let c = img.channels;
    let scale = if cfg.max_scale > cfg.min_scale {
        rng.random_range(cfg.min_scale..=cfg.max_scale)
    } else {
        cfg.max_scale
    };
    let side = ((s as f64) * scale.sqrt()).round().clamp(1.0, s as f64) as usize;
    let (oy, ox) = if side < s {
        (rng.random_range(0..=s - side), rng.random_range(0..=s - side))
    } else {
        (0, 0)
    };
    let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob.min(1.0));
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("finite std"));

    let ratio = side as f64 / s as f64;
    let mut out = vec![0.0 as Real; s * s * c];
    for y in 0..s {
        for x in 0..s {
            let xs = if flip { s - 1 - x } else { x };
            for ch in 0..c {
                let v = if side == s {
                    img.at(y, xs, ch) as f64
                } else {
                    let sy = oy as f64 + (y as f64 + 0.5) * ratio - 0.5;
                    let sx = ox as f64 + (xs as f64 + 0.5) * ratio - 0.5;
                    bilinear(img, sy, sx, ch)
                };
                out[(y * s + x) * c + ch] = v as Real;
            }
        }
    }
    if let Some(n) = noise {
        for v in &mut out {
            *v = (*v as f64 + n.sample(&mut rng)).clamp(0.0, 1.0) as Real;
        }
    }
    Image {
        size: s,
        channels: c,
        pixels: out,
    }
}

fn bilinear(img: &Image, y: f64, x: f64, ch: usize) -> f64 {
    let max = (img.size - 1) as f64;
    let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.size - 1), (x0 + 1).min(img.size - 1));
    let (dy, dx) = (y - y0 as f64, x - x0 as f64);
    let p = |yy, xx| img.at(yy, xx, ch) as f64;
    (1.0 - dy) * ((1.0 - dx) * p(y0, x0) + dx * p(y0, x1)) + dy * ((1.0 - dx) * p(y1, x0) + dx * p(y1, x1))
}

/// Augment a labelled image; the label set is carried over unchanged.
pub fn augment(img: &SynthImage, seed: u64, cfg: &AugmentConfig) -> SynthImage {
    SynthImage {
        image: augment_image(&img.image, seed, cfg),
        labels: img.labels.clone(),
    }
}

/// Split into `(s/p)²` flattened patches, row-major patch order, each patch
/// flattened channel-last. Returns an `n × d` tensor.
pub fn patchify(img: &Image, p: usize) -> Result<Tensor> {
    check_geometry(img.size, p, img.channels)?;
    let (s, c) = (img.size, img.channels);
    let side = s / p;
    let d = p * p * c;
    let mut data = Vec::with_capacity(side * side * d);
    for py in 0..side {
        for px in 0..side {
            for y in 0..p {
                let row = ((py * p + y) * s + px * p) * c;
                data.extend_from_slice(&img.pixels[row..row + p * c]);
            }
        }
    }
    Tensor::new(&[side * side, d], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, s: usize, p: usize, c: usize) -> Result<Image> {
    check_geometry(s, p, c)?;
    let side = s / p;
    let expect = [side * side, p * p * c];
    if patches.shape() != expect {
        return Err(WchError::dim("unpatchify", patches.shape(), &expect));
    }
    let mut pixels = vec![0.0; s * s * c];
    for (i, patch) in patches.data().chunks(p * p * c).enumerate() {
        let (py, px) = (i / side, i % side);
        for y in 0..p {
            let row = ((py * p + y) * s + px * p) * c;
            pixels[row..row + p * c].copy_from_slice(&patch[y * p * c..(y + 1) * p * c]);
        }
    }
    Image::new(s, c, pixels)
}

/// Stack patchified images into a `bs × n × d` tensor.
pub fn patch_batch<'a>(images: impl IntoIterator<Item = &'a Image>, p: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut count = 0;
    let mut nd = None;
    for img in images {
        let t = patchify(img, p)?;
        let shape = [t.shape()[0], t.shape()[1]];
        if *nd.get_or_insert(shape) != shape {
            return Err(WchError::dim("patch_batch", &nd.unwrap(), &shape));
        }
        data.extend_from_slice(t.data());
        count += 1;
    }
    let [n, d] = nd.ok_or_else(|| WchError::Config("empty image batch".into()))?;
    Tensor::new(&[count, n, d], data)
}

/// Train (database) and query splits generated from one [`DataConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Vec<SynthImage>,
    pub query: Vec<SynthImage>,
}

const QUERY_SALT: u64 = 0x9e_e7;

impl Dataset {
    pub fn synthesize(config: &DataConfig) -> Result<Self> {
        config.validate()?;
        let gen = |seed, count| {
            generate(
                seed,
                count,
                config.classes,
                config.image_size,
                config.patch_size,
                config.channels,
            )
        };
        let train = gen(config.seed, config.train_count)?;
        let query = if config.query_count == 0 {
            Vec::new()
        } else if config.query_count < config.classes {
            let mut q = gen(crate::rng::derive_seed(config.seed, &[QUERY_SALT]), config.classes)?;
            q.truncate(config.query_count);
            q
        } else {
            gen(crate::rng::derive_seed(config.seed, &[QUERY_SALT]), config.query_count)?
        };
        Ok(Dataset {
            config: config.clone(),
            train,
            query,
        })
    }

    /// Write `dataset.json`, `{train,query}_pixels.wtns` and `{train,query}_labels.wlbl`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("dataset.json"),
            serde_json::to_string_pretty(&self.config)? + "\n",
        )?;
        for (name, split) in [("train", &self.train), ("query", &self.query)] {
            io::save_tensor(
                dir.join(format!("{name}_pixels.wtns")),
                &stack_pixels(split, &self.config)?,
            )?;
            let labels: Vec<LabelSet> = split.iter().map(|s| s.labels.clone()).collect();
            io::save_labels(dir.join(format!("{name}_labels.wlbl")), &labels, self.config.classes)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: DataConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json"))?)?;
        config.validate()?;
        let load_split = |name: &str| -> Result<Vec<SynthImage>> {
            let pixels = io::load_tensor(dir.join(format!("{name}_pixels.wtns")))?;
            let (labels, classes) = io::load_labels(dir.join(format!("{name}_labels.wlbl")))?;
            if classes != config.classes {
                return Err(WchError::Format(format!(
                    "{name} labels declare {classes} classes, dataset.json says {}",
                    config.classes
                )));
            }
            let images = unstack_pixels(&pixels, &config)?;
            if images.len() != labels.len() {
                return Err(WchError::Format(format!(
                    "{name}: {} images but {} label rows",
                    images.len(),
                    labels.len()
                )));
            }
            Ok(images
                .into_iter()
                .zip(labels)
                .map(|(image, labels)| SynthImage { image, labels })
                .collect())
        };
        Ok(Dataset {
            train: load_split("train")?,
            query: load_split("query")?,
            config,
        })
    }
}

/// `N × s × s × c` tensor of a split's pixels.
pub fn stack_pixels(items: &[SynthImage], cfg: &DataConfig) -> Result<Tensor> {
    let (s, c) = (cfg.image_size, cfg.channels);
    let mut data = Vec::with_capacity(items.len() * s * s * c);
    for it in items {
        if it.image.size != s || it.image.channels != c {
            return Err(WchError::dim(
                "stack_pixels",
                &[s, s, c],
                &[it.image.size, it.image.size, it.image.channels],
            ));
        }
        data.extend_from_slice(&it.image.pixels);
    }
    Tensor::new(&[items.len(), s, s, c], data)
}

pub fn unstack_pixels(t: &Tensor, cfg: &DataConfig) -> Result<Vec<Image>> {
    let (s, c) = (cfg.image_size, cfg.channels);
    let sh = t.shape();
    if sh.len() != 4 || sh[1] != s || sh[2] != s || sh[3] != c {
        return Err(WchError::dim("unstack_pixels", sh, &[0, s, s, c]));
    }
    t.data()
        .chunks(s * s * c)
        .map(|chunk| Image::new(s, c, chunk.to_vec()))
        .collect()
}

/// Per-class occurrence counts.
pub fn class_histogram(items: &[SynthImage], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for it in items {
        for k in it.labels.classes() {
            h[k] += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(s: usize, c: usize, v: Real) -> Image {
        Image::new(s, c, vec![v; s * s * c]).unwrap()
    }

    #[test]
    fn seed_zero_small_batch() {
        let imgs = generate(0, 8, 4, 32, 8, 3).unwrap();
        assert_eq!(imgs.len(), 8);
        for im in &imgs {
            assert!((1..=3).contains(&im.labels.len()));
            assert!(im.image.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(3, 20, 5, 16, 4, 3).unwrap();
        let b = generate(3, 20, 5, 16, 4, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(4, 20, 5, 16, 4, 3).unwrap());
    }

    #[test]
    fn class_counts_are_balanced() {
        for (count, classes) in [(8, 4), (101, 4), (333, 7), (64, 2)] {
            let imgs = generate(9, count, classes, 16, 8, 3).unwrap();
            let h = class_histogram(&imgs, classes);
            let (lo, hi) = (h.iter().min().unwrap(), h.iter().max().unwrap());
            assert!(hi - lo <= 1, "{h:?}");
        }
    }

    #[test]
    fn generation_rejects_bad_configs() {
        assert!(matches!(generate(0, 8, 4, 30, 8, 3), Err(WchError::Config(_))));
        assert!(matches!(generate(0, 3, 4, 32, 8, 3), Err(WchError::Config(_))));
        assert!(matches!(generate(0, 8, 1, 32, 8, 3), Err(WchError::Config(_))));
    }

    #[test]
    fn identity_augmentation_leaves_image_unchanged() {
        let img = &generate(1, 4, 4, 32, 8, 3).unwrap()[0];
        let out = augment(img, 77, &AugmentConfig::identity());
        assert_eq!(&out, img);
    }

    #[test]
    fn augmentation_keeps_labels_and_range() {
        let img = &generate(1, 4, 4, 32, 8, 3).unwrap()[2];
        let cfg = AugmentConfig {
            noise_std: 0.5,
            ..AugmentConfig::default()
        };
        let a = augment(img, 1, &cfg);
        let b = augment(img, 2, &cfg);
        assert_eq!(a.labels, img.labels);
        assert_eq!(b.labels, img.labels);
        assert_ne!(a.image, b.image);
        for v in a.image.pixels().iter().chain(b.image.pixels()) {
            assert!((0.0..=1.0).contains(v));
        }
        assert_eq!(augment(img, 1, &cfg), a);
    }

    #[test]
    fn patchify_small_geometry() {
        let px: Vec<Real> = (0..16).map(|v| v as Real / 16.0).collect();
        let img = Image::new(4, 1, px).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        // first patch is the top-left 2×2 block, row by row
        assert_eq!(p.data()[..4], [0.0, 1.0 / 16.0, 4.0 / 16.0, 5.0 / 16.0]);
        assert_eq!(unpatchify(&p, 4, 2, 1).unwrap(), img);
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let p = patchify(&gray(8, 3, 0.4), 4).unwrap();
        let rows = p.to_rows();
        assert!(rows.iter().all(|r| r == &rows[0]));
    }

    #[test]
    fn patchify_rejects_indivisible_patch() {
        assert!(matches!(patchify(&gray(6, 1, 0.0), 4), Err(WchError::Config(_))));
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let cfg = DataConfig {
            train_count: 6,
            query_count: 4,
            image_size: 8,
            patch_size: 4,
            ..DataConfig::default()
        };
        let ds = Dataset::synthesize(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }
}
