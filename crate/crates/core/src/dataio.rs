//! Seeded synthetic scenes whose pixel colors are an affine function of the
//! class embeddings, and the on-disk dataset format.
//!
//! A dataset directory holds `manifest.json` plus, per sample,
//! `img_#####.f32` (little-endian `f32`, row-major `H x W x 3`) and
//! `mask_#####.u16` (little-endian `u16`, row-major `H x W`).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::{load_embedding_table, ClassVocabulary, EmbeddingTable, SplitSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHANNELS: usize = 3;

/// Largest allowed `|M phi(c)|` per channel, leaving noise-free colors strictly inside `[0, 1]`.
pub const MAX_COLOR_OFFSET: f64 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub shape_kinds: Vec<ShapeKind>,
    pub noise_sigma: f64,
    pub mixing_seed: u64,
    pub scene_seed: u64,
    pub allow_seen_in_target: bool,
}

impl SceneConfig {
    /// 96x96 canvas, 2-4 objects, both shape kinds, noise 0.05.
    pub fn reference() -> Self {
        SceneConfig {
            height: 96,
            width: 96,
            objects_min: 2,
            objects_max: 4,
            shape_kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            noise_sigma: 0.05,
            mixing_seed: 8,
            scene_seed: 9,
            allow_seen_in_target: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(format!(
                "canvas must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.objects_min < 1 || self.objects_max < self.objects_min {
            return Err(Error::invalid(format!(
                "bad object count range {}..={}",
                self.objects_min, self.objects_max
            )));
        }
        if self.shape_kinds.is_empty() {
            return Err(Error::invalid("at least one shape kind is required"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Linear map `R^d -> R^3` from class embeddings to color offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix(Tensor);

impl MixingMatrix {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    /// `M v` for an embedding-space vector.
    pub fn apply(&self, v: &[f64]) -> [f64; CHANNELS] {
        let d = self.dim();
        let m = self.0.data();
        std::array::from_fn(|ch| {
            m[ch * d..(ch + 1) * d]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
    }

    /// Noise-free color of `class`: `clamp01(0.5 + M phi(class))`.
    pub fn class_color(&self, table: &EmbeddingTable, class: usize) -> [f64; CHANNELS] {
        self.apply(table.vector(class))
            .map(|v| (0.5 + v).clamp(0.0, 1.0))
    }
}

/// Draws `M` with i.i.d. `N(0, 1/d)` entries, then shrinks it uniformly if any
/// class color offset would exceed [`MAX_COLOR_OFFSET`].
pub fn make_mixing_matrix(table: &EmbeddingTable, mixing_seed: u64) -> MixingMatrix {
    let d = table.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(mixing_seed);
    let sd = (1.0 / d as f64).sqrt();
    let raw = Tensor::from_fn(&[CHANNELS, d], |_| {
        sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let m = MixingMatrix(raw);
    let peak = (0..table.num_classes())
        .flat_map(|c| m.apply(table.vector(c)))
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if peak > MAX_COLOR_OFFSET {
        let s = MAX_COLOR_OFFSET / peak;
        MixingMatrix(m.0.map(|v| v * s))
    } else {
        m
    }
}

/// An axis-aligned rectangle or the ellipse inscribed in it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        match self.kind {
            ShapeKind::Rectangle => {
                i >= self.top
                    && i < self.top + self.height
                    && j >= self.left
                    && j < self.left + self.width
            }
            ShapeKind::Ellipse => {
                let ry = self.height as f64 / 2.0;
                let rx = self.width as f64 / 2.0;
                let dy = (i as f64 + 0.5 - (self.top as f64 + ry)) / ry;
                let dx = (j as f64 + 0.5 - (self.left as f64 + rx)) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    /// Random placement with extents between a fifth and a half of the canvas.
    pub fn random(config: &SceneConfig, class: usize, rng: &mut impl Rng) -> Shape {
        let extent = |n: usize, rng: &mut dyn rand::RngCore| {
            let lo = (n / 5).max(1);
            let hi = (n / 2).max(lo);
            rng.random_range(lo..=hi)
        };
        let height = extent(config.height, rng);
        let width = extent(config.width, rng);
        let kind = config.shape_kinds[rng.random_range(0..config.shape_kinds.len())];
        Shape {
            kind,
            class,
            top: rng.random_range(0..=config.height - height),
            left: rng.random_range(0..=config.width - width),
            height,
            width,
        }
    }
}

/// An `H x W x 3` image with its `H x W` label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Vec<u16>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn bit_eq(&self, other: &Sample) -> bool {
        self.mask == other.mask
            && self.image.shape() == other.image.shape()
            && self
                .image
                .data()
                .iter()
                .zip(other.image.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Paints `shapes` in order over the background color, then adds per-channel
/// Gaussian noise. Pixel values are rounded to `f32` precision so that the
/// stored 32-bit files reproduce them exactly.
pub fn render_scene(
    config: &SceneConfig,
    shapes: &[Shape],
    mixing: &MixingMatrix,
    table: &EmbeddingTable,
    rng: &mut impl Rng,
) -> Sample {
    let (h, w) = (config.height, config.width);
    let mut mask = vec![0u16; h * w];
    for shape in shapes {
        for i in shape.top..(shape.top + shape.height).min(h) {
            for j in shape.left..(shape.left + shape.width).min(w) {
                if shape.contains(i, j) {
                    mask[i * w + j] = shape.class as u16;
                }
            }
        }
    }
    let colors: Vec<[f64; CHANNELS]> = (0..table.num_classes())
        .map(|c| mixing.class_color(table, c))
        .collect();
    let noise = (config.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, config.noise_sigma).expect("validated sigma"));
    let mut data = Vec::with_capacity(h * w * CHANNELS);
    for &label in &mask {
        for &c in &colors[label as usize] {
            let v = match &noise {
                Some(n) => (c + n.sample(rng)).clamp(0.0, 1.0),
                None => c,
            };
            data.push(v as f32 as f64);
        }
    }
    Sample {
        image: Tensor::new(vec![h, w, CHANNELS], data).expect("sized above"),
        mask,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

impl Role {
    fn stream_tag(self) -> u64 {
        match self {
            Role::Source => 1,
            Role::Target => 2,
        }
    }
}

/// Samples of one domain. Target masks are reachable only through
/// [`Dataset::evaluation_mask`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    role: Role,
    config: SceneConfig,
    class_names: Vec<String>,
    unseen: Vec<usize>,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn split(&self) -> Result<SplitSpec> {
        SplitSpec::from_unseen(self.class_names.len(), self.unseen.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn masks_visible(&self) -> bool {
        self.role == Role::Source
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.samples[i].image
    }

    /// Label mask for training. Refused for target-domain data.
    pub fn training_mask(&self, i: usize) -> Result<&[u16]> {
        if !self.masks_visible() {
            return Err(Error::MaskHidden);
        }
        Ok(&self.samples[i].mask)
    }

    /// Label mask for scoring predictions.
    pub fn evaluation_mask(&self, i: usize) -> &[u16] {
        &self.samples[i].mask
    }

    pub fn bit_eq(&self, other: &Dataset) -> bool {
        self.role == other.role
            && self.config == other.config
            && self.class_names == other.class_names
            && self.unseen == other.unseen
            && self.samples.len() == other.samples.len()
            && self
                .samples
                .iter()
                .zip(&other.samples)
                .all(|(a, b)| a.bit_eq(b))
    }
}

fn sample_rng(scene_seed: u64, role: Role, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    rng.set_stream((role.stream_tag() << 40) | index as u64);
    rng
}

/// Generates the labeled source domain (seen objects only) and the target
/// domain (at least one visible unseen object per image).
pub fn generate_dataset(
    vocab: &ClassVocabulary,
    table: &EmbeddingTable,
    split: &SplitSpec,
    n_source: usize,
    n_target: usize,
    config: &SceneConfig,
) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    if n_source == 0 || n_target == 0 {
        return Err(Error::invalid("n_source and n_target must be at least 1"));
    }
    if table.vocab() != vocab || split.num_classes() != vocab.len() {
        return Err(Error::invalid(
            "vocabulary, embedding table and split disagree",
        ));
    }
    let seen_objects = split.seen_objects();
    let unseen = split.unseen_vec();
    if unseen.is_empty() {
        return Err(Error::invalid("split has no unseen classes"));
    }
    if seen_objects.is_empty() {
        return Err(Error::invalid("split has no seen object classes"));
    }
    let mixing = make_mixing_matrix(table, config.mixing_seed);
    let target_pool: Vec<usize> = if config.allow_seen_in_target {
        unseen.iter().chain(&seen_objects).copied().collect()
    } else {
        unseen.clone()
    };

    let source = (0..n_source)
        .map(|idx| {
            let mut rng = sample_rng(config.scene_seed, Role::Source, idx);
            let k = rng.random_range(config.objects_min..=config.objects_max);
            let shapes: Vec<Shape> = (0..k)
                .map(|_| {
                    let c = seen_objects[rng.random_range(0..seen_objects.len())];
                    Shape::random(config, c, &mut rng)
                })
                .collect();
            render_scene(config, &shapes, &mixing, table, &mut rng)
        })
        .collect();

    let target = (0..n_target)
        .map(|idx| {
            let mut rng = sample_rng(config.scene_seed, Role::Target, idx);
            loop {
                let k = rng.random_range(config.objects_min..=config.objects_max);
                let anchor = rng.random_range(0..k);
                let shapes: Vec<Shape> = (0..k)
                    .map(|slot| {
                        let c = if slot == anchor {
                            unseen[rng.random_range(0..unseen.len())]
                        } else {
                            target_pool[rng.random_range(0..target_pool.len())]
                        };
                        Shape::random(config, c, &mut rng)
                    })
                    .collect();
                let sample = render_scene(config, &shapes, &mixing, table, &mut rng);
                // Later shapes can hide the unseen one entirely; redraw in that case.
                if sample.mask.iter().any(|&l| split.is_unseen(l as usize)) {
                    break sample;
                }
            }
        })
        .collect();

    let make = |role, samples| Dataset {
        role,
        config: config.clone(),
        class_names: vocab.names().to_vec(),
        unseen: unseen.clone(),
        samples,
    };
    Ok((make(Role::Source, source), make(Role::Target, target)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub role: Role,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mixing_seed: u64,
    pub scene_seed: u64,
    pub masks_visible: bool,
    pub classes: Vec<String>,
    pub unseen: Vec<String>,
    pub scene: SceneConfig,
    pub files: Vec<SampleFiles>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a file, checking its length and SHA-256 digest.
pub(crate) fn read_checked(path: &Path, expected_len: usize, sha256: &str) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: expected_len,
            found: bytes.len(),
        });
    }
    if sha256_hex(&bytes) != sha256 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    Ok(bytes)
}

pub(crate) fn write_checked(path: &Path, bytes: &[u8]) -> Result<String> {
    write_atomic(path, bytes)?;
    Ok(sha256_hex(bytes))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let image = format!("img_{i:05}.f32");
        let mask = format!("mask_{i:05}.u16");
        let img_bytes: Vec<u8> = s
            .image
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let mask_bytes: Vec<u8> = s.mask.iter().flat_map(|&v| v.to_le_bytes()).collect();
        let image_sha256 = write_checked(&dir.join(&image), &img_bytes)?;
        let mask_sha256 = write_checked(&dir.join(&mask), &mask_bytes)?;
        files.push(SampleFiles {
            image,
            mask,
            image_sha256,
            mask_sha256,
        });
    }
    let manifest = DatasetManifest {
        role: dataset.role,
        count: dataset.len(),
        height: dataset.config.height,
        width: dataset.config.width,
        channels: CHANNELS,
        mixing_seed: dataset.config.mixing_seed,
        scene_seed: dataset.config.scene_seed,
        masks_visible: dataset.masks_visible(),
        classes: dataset.class_names.clone(),
        unseen: dataset
            .unseen
            .iter()
            .map(|&c| dataset.class_names[c].clone())
            .collect(),
        scene: dataset.config.clone(),
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let m: DatasetManifest = read_json(&manifest_path)?;
    let bad = |msg: &str| Error::invalid(format!("{}: {msg}", manifest_path.display()));
    if m.channels != CHANNELS || m.files.len() != m.count {
        return Err(bad("inconsistent channel or file counts"));
    }
    if m.masks_visible != (m.role == Role::Source) {
        return Err(bad("target masks must be marked evaluation-only"));
    }
    let vocab = ClassVocabulary::new(m.classes.iter().cloned())?;
    let unseen = m
        .unseen
        .iter()
        .map(|n| {
            vocab
                .index_of(n)
                .ok_or_else(|| bad(&format!("unknown class `{n}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (m.height, m.width);
    let mut samples = Vec::with_capacity(m.count);
    for f in &m.files {
        let img = read_checked(&dir.join(&f.image), h * w * CHANNELS * 4, &f.image_sha256)?;
        let mask = read_checked(&dir.join(&f.mask), h * w * 2, &f.mask_sha256)?;
        let data = img
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let mask: Vec<u16> = mask
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        if mask.iter().any(|&l| l as usize >= vocab.len()) {
            return Err(bad(&format!("{} holds an out-of-vocabulary label", f.mask)));
        }
        samples.push(Sample {
            image: Tensor::new(vec![h, w, CHANNELS], data)?,
            mask,
        });
    }
    Ok(Dataset {
        role: m.role,
        config: m.scene,
        class_names: m.classes,
        unseen,
        samples,
    })
}

/// `split.json`: the vocabulary in index order and the unseen class names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub classes: Vec<String>,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl SplitFile {
    pub fn new(vocab: &ClassVocabulary, split: &SplitSpec) -> Self {
        let names = |set: &std::collections::BTreeSet<usize>| {
            set.iter().map(|&c| vocab.names()[c].clone()).collect()
        };
        SplitFile {
            classes: vocab.names().to_vec(),
            seen: names(split.seen()),
            unseen: names(split.unseen()),
        }
    }

    pub fn resolve(&self) -> Result<(ClassVocabulary, SplitSpec)> {
        let vocab = ClassVocabulary::new(self.classes.iter().cloned())?;
        let split = crate::embeddings::make_split(&vocab, &self.unseen)?;
        Ok((vocab, split))
    }
}

/// Everything `gen-data` writes under one root directory.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub vocab: ClassVocabulary,
    pub table: EmbeddingTable,
    pub split: SplitSpec,
    pub source: Dataset,
    pub target: Dataset,
}

pub const SPLIT_FILE: &str = "split.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const SOURCE_DIR: &str = "source";
pub const TARGET_DIR: &str = "target";

impl DataBundle {
    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        write_json(
            &root.join(SPLIT_FILE),
            &SplitFile::new(&self.vocab, &self.split),
        )?;
        write_atomic(&root.join(EMBEDDINGS_FILE), self.table.to_text().as_bytes())?;
        save_dataset(&self.source, &root.join(SOURCE_DIR))?;
        save_dataset(&self.target, &root.join(TARGET_DIR))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let split_file: SplitFile = read_json(&root.join(SPLIT_FILE))?;
        let (vocab, split) = split_file.resolve()?;
        let table = load_embedding_table(&root.join(EMBEDDINGS_FILE), &vocab)?;
        let source = load_dataset(&root.join(SOURCE_DIR))?;
        let target = load_dataset(&root.join(TARGET_DIR))?;
        if source.role != Role::Source || target.role != Role::Target {
            return Err(Error::invalid(format!(
                "{}: source/target directories hold the wrong roles",
                root.display()
            )));
        }
        Ok(DataBundle {
            vocab,
            table,
            split,
            source,
            target,
        })
    }
}
