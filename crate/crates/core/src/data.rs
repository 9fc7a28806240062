//! Dataset indexing, batch loading, and the synthetic defect generator.
//!
//! Expected layout: `root/<class>/{no_damage,damage}/*.{png,jpg,jpeg}`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::meta::{write_png, write_text_with_meta, Meta};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NoDamage,
    Damage,
}

impl Label {
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::NoDamage => "no_damage",
            Label::Damage => "damage",
        }
    }

    /// 1 for damage, 0 otherwise.
    pub fn as_binary(self) -> u8 {
        match self {
            Label::NoDamage => 0,
            Label::Damage => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub sample_id: String,
    pub path: PathBuf,
    pub class: String,
    pub label: Label,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    records: Vec<Record>,
    /// Files that could not be read as images while indexing.
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
    pub test_no_damage: usize,
    pub test_damage: usize,
}

impl DatasetIndex {
    /// Build an index from records, checking its invariants.
    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.sample_id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {}", r.sample_id)));
            }
            if r.split == Split::Train && r.label == Label::Damage {
                return Err(Error::Data(format!("damage sample {} in train split", r.sample_id)));
            }
        }
        Ok(Self { records, skipped: 0 })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }

    pub fn classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self.records.iter().map(|r| r.class.clone()).collect();
        c.sort();
        c.dedup();
        c
    }

    pub fn filter_class(&self, class: &str) -> DatasetIndex {
        DatasetIndex { records: self.records.iter().filter(|r| r.class == class).cloned().collect(), skipped: 0 }
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.sample_id.clone()).collect()
    }

    pub fn counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for r in &self.records {
            match (r.split, r.label) {
                (Split::Train, _) => c.train += 1,
                (Split::Test, Label::NoDamage) => {
                    c.test += 1;
                    c.test_no_damage += 1;
                }
                (Split::Test, Label::Damage) => {
                    c.test += 1;
                    c.test_damage += 1;
                }
            }
        }
        c
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_file() && is_image_file(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn readable(path: &Path) -> bool {
    image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .ok()
        .and_then(|r| r.into_dimensions().ok())
        .is_some_and(|(w, h)| w > 0 && h > 0)
}

/// Stable per-class RNG seed.
fn class_seed(seed: u64, class: &str) -> u64 {
    let d = Sha256::digest(class.as_bytes());
    seed ^ u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Index `root` and assign splits.
///
/// Per class, `train_fraction` of the no-damage images (sorted by name, then
/// shuffled with a seeded RNG) go to train; the remaining no-damage images and
/// every damage image go to test.
pub fn index_dataset(root: &Path, train_fraction: f64, seed: u64) -> Result<DatasetIndex> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Data(format!("train_fraction {train_fraction} outside (0, 1]")));
    }
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut class_dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            class_dirs.push(entry.path());
        }
    }
    class_dirs.sort();

    let mut records = Vec::new();
    let mut skipped = 0;
    for dir in class_dirs {
        let class = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut by_label: BTreeMap<Label, Vec<PathBuf>> = BTreeMap::new();
        for label in [Label::NoDamage, Label::Damage] {
            let mut ok = Vec::new();
            for f in sorted_images(&dir.join(label.dir_name()))? {
                if readable(&f) {
                    ok.push(f);
                } else {
                    skipped += 1;
                }
            }
            by_label.insert(label, ok);
        }
        let mut normal = by_label.remove(&Label::NoDamage).unwrap_or_default();
        let damage = by_label.remove(&Label::Damage).unwrap_or_default();
        if normal.is_empty() && damage.is_empty() {
            return Err(Error::Data(format!("class folder {} has no images", dir.display())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(class_seed(seed, &class));
        normal.shuffle(&mut rng);
        let n_train = (normal.len() as f64 * train_fraction).round() as usize;
        let mut class_records = Vec::new();
        for (i, path) in normal.into_iter().enumerate() {
            let split = if i < n_train { Split::Train } else { Split::Test };
            class_records.push(make_record(&class, Label::NoDamage, path, split));
        }
        for path in damage {
            class_records.push(make_record(&class, Label::Damage, path, Split::Test));
        }
        class_records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        records.extend(class_records);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} unreadable image file(s) under {}", root.display());
    }
    let mut index = DatasetIndex::from_records(records)?;
    index.skipped = skipped;
    Ok(index)
}

fn make_record(class: &str, label: Label, path: PathBuf, split: Split) -> Record {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    Record { sample_id: format!("{class}/{}/{stem}", label.dir_name()), path, class: class.to_string(), label, split }
}

/// Pixels in `[-1, 1]`, shape `(batch, channels, size, size)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub ids: Vec<String>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn normalize_u8(p: u8) -> f64 {
    2.0 * p as f64 / 255.0 - 1.0
}

pub fn denormalize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Decode one image into a `channels x size x size` normalized buffer.
pub fn load_image(path: &Path, sample_id: &str, size: usize, channels: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| Error::Image { id: sample_id.to_string(), message: e.to_string() })?;
    let (w, h) = (size as u32, size as u32);
    let mut out = vec![0.0; channels * size * size];
    let plane = size * size;
    match channels {
        1 => {
            let mut g = img.to_luma8();
            if g.dimensions() != (w, h) {
                g = image::imageops::resize(&g, w, h, FilterType::Triangle);
            }
            for (i, p) in g.pixels().enumerate() {
                out[i] = normalize_u8(p.0[0]);
            }
        }
        3 => {
            let mut rgb = img.to_rgb8();
            if rgb.dimensions() != (w, h) {
                rgb = image::imageops::resize(&rgb, w, h, FilterType::Triangle);
            }
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = normalize_u8(p.0[c]);
                }
            }
        }
        c => return Err(Error::Invalid(format!("unsupported channel count {c}"))),
    }
    Ok(out)
}

pub fn load_batch(index: &DatasetIndex, ids: &[String], config: &ExperimentConfig) -> Result<ImageBatch> {
    let lookup: HashMap<&str, &Record> = index.records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let size = config.image_size;
    let mut data = Vec::with_capacity(ids.len() * config.channels * size * size);
    for id in ids {
        let rec = lookup.get(id.as_str()).ok_or_else(|| Error::Data(format!("sample {id} not in index")))?;
        data.extend(load_image(&rec.path, id, size, config.channels)?);
    }
    Ok(ImageBatch { pixels: Tensor::new(vec![ids.len(), config.channels, size, size], data)?, ids: ids.to_vec() })
}

/// Defect rectangle in pixel coordinates, end-exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl DefectBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    /// Box-blurred white noise around mid gray.
    SmoothNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count_normal: usize,
    pub count_anomalous: usize,
    pub image_size: usize,
    pub channels: usize,
    pub class_name: String,
    pub texture: TextureKind,
    /// Inclusive range of defect side lengths in pixels.
    pub defect_min: usize,
    pub defect_max: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count_normal: 200,
            count_anomalous: 50,
            image_size: 64,
            channels: 3,
            class_name: "synthetic".into(),
            texture: TextureKind::SmoothNoise,
            defect_min: 10,
            defect_max: 20,
            train_fraction: 0.8,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count_normal == 0 || self.count_anomalous == 0 {
            return Err(Error::Invalid("synthetic counts must be positive".into()));
        }
        if self.defect_min == 0 || self.defect_min > self.defect_max || self.defect_max >= self.image_size {
            return Err(Error::Invalid(format!(
                "defect size range {}..={} invalid for image size {}",
                self.defect_min, self.defect_max, self.image_size
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Invalid(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        Ok(())
    }
}

/// Largest texture deviation from mid gray, in normalized units.
const TEXTURE_LIMIT: f64 = 0.45;
const DEFECT_VALUE: f64 = 1.0;

fn item_rng(spec: &SyntheticSpec, anomalous: bool, index: usize) -> ChaCha8Rng {
    let stream = (index as u64) << 1 | anomalous as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    rng
}

fn box_blur(src: &[f64], size: usize, radius: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    let r = radius as isize;
    let n = size as isize;
    // Wrap-around borders keep the texture statistics uniform.
    for y in 0..n {
        for x in 0..n {
            let mut s = 0.0;
            for d in -r..=r {
                s += src[(y * n + (x + d).rem_euclid(n)) as usize];
            }
            tmp[(y * n + x) as usize] = s / (2 * r + 1) as f64;
        }
    }
    for y in 0..n {
        for x in 0..n {
            let mut s = 0.0;
            for d in -r..=r {
                s += tmp[((y + d).rem_euclid(n) * n + x) as usize];
            }
            out[(y * n + x) as usize] = s / (2 * r + 1) as f64;
        }
    }
    out
}

/// Defect-free texture for one item, normalized, `channels x size x size`.
/// Consumes the item's RNG so the defect draw that follows is fixed too.
fn texture(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let size = spec.image_size;
    let noise: Vec<f64> = (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
    let smooth = box_blur(&box_blur(&noise, size, 2), size, 2);
    let std = (smooth.iter().map(|v| v * v).sum::<f64>() / smooth.len() as f64).sqrt().max(1e-12);
    let level: f64 = rng.random_range(-0.1..0.1);
    let mut out = Vec::with_capacity(spec.channels * size * size);
    for _ in 0..spec.channels {
        let tint: f64 = rng.random_range(-0.05..0.05);
        out.extend(smooth.iter().map(|v| (level + tint + 0.2 * v / std).clamp(-TEXTURE_LIMIT, TEXTURE_LIMIT)));
    }
    out
}

/// Render item `index` of the normal or anomalous set.
///
/// Returns the normalized pixels, the defect-free texture, and the defect box
/// for anomalous items.
pub fn render_synthetic(
    spec: &SyntheticSpec,
    anomalous: bool,
    index: usize,
) -> (Vec<f64>, Vec<f64>, Option<DefectBox>) {
    let mut rng = item_rng(spec, anomalous, index);
    let clean = texture(spec, &mut rng);
    if !anomalous {
        return (clean.clone(), clean, None);
    }
    let size = spec.image_size;
    let bw = rng.random_range(spec.defect_min..=spec.defect_max);
    let bh = rng.random_range(spec.defect_min..=spec.defect_max);
    let x0 = rng.random_range(0..=size - bw);
    let y0 = rng.random_range(0..=size - bh);
    let bx = DefectBox { x0, y0, x1: x0 + bw, y1: y0 + bh };
    let mut px = clean.clone();
    for c in 0..spec.channels {
        for y in bx.y0..bx.y1 {
            for x in bx.x0..bx.x1 {
                px[(c * size + y) * size + x] = DEFECT_VALUE;
            }
        }
    }
    (px, clean, Some(bx))
}

/// Interleave a planar normalized buffer into 8-bit pixels.
pub fn to_interleaved_u8(planar: &[f64], channels: usize, size: usize) -> Vec<u8> {
    let plane = size * size;
    let mut out = vec![0u8; planar.len()];
    for i in 0..plane {
        for c in 0..channels {
            out[i * channels + c] = denormalize(planar[c * plane + i]);
        }
    }
    out
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Write the synthetic dataset under `out_root/<class>/` plus a defect manifest,
/// and index it. Manifest rows of other classes already under `out_root` are kept.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, out_root: &Path, meta: &Meta) -> Result<DatasetIndex> {
    spec.validate()?;
    let size = spec.image_size;
    let class_dir = out_root.join(&spec.class_name);
    let manifest_path = out_root.join(MANIFEST_FILE);
    let prefix = format!("{}/", spec.class_name);
    let mut boxes = match read_manifest(&manifest_path) {
        Ok(m) => m.into_iter().filter(|(id, _)| !id.starts_with(&prefix)).collect(),
        Err(_) => BTreeMap::new(),
    };
    for (anomalous, count) in [(false, spec.count_normal), (true, spec.count_anomalous)] {
        let label = if anomalous { Label::Damage } else { Label::NoDamage };
        let dir = class_dir.join(label.dir_name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..count {
            let (px, _, bx) = render_synthetic(spec, anomalous, i);
            let stem = if anomalous { format!("defect_{i:04}") } else { format!("normal_{i:04}") };
            let bytes = to_interleaved_u8(&px, spec.channels, size);
            write_png(&dir.join(format!("{stem}.png")), size as u32, size as u32, spec.channels, &bytes, meta)?;
            if let Some(b) = bx {
                boxes.insert(format!("{prefix}{}/{stem}", label.dir_name()), b);
            }
        }
    }
    let mut manifest = csv::Writer::from_writer(Vec::new());
    manifest.write_record(["sample_id", "x0", "y0", "x1", "y1"])?;
    for (id, b) in &boxes {
        manifest.write_record([id.clone(), b.x0.to_string(), b.y0.to_string(), b.x1.to_string(), b.y1.to_string()])?;
    }
    let body = String::from_utf8(manifest.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)
        .expect("csv output is utf-8");
    write_text_with_meta(&manifest_path, meta, &body)?;
    index_dataset(out_root, spec.train_fraction, spec.seed)
}

/// Read a defect manifest written by [`make_synthetic_dataset`].
pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, DefectBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let num = |i: usize| -> Result<usize> {
            row.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Data(format!("bad manifest row {row:?}")))
        };
        let id = row.get(0).unwrap_or_default().to_string();
        out.insert(id, DefectBox { x0: num(1)?, y0: num(2)?, x1: num(3)?, y1: num(4)? });
    }
    Ok(out)
}
