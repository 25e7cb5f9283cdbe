//! Dataset manifests, exponential-decay subsampling and the synthetic
//! desk-scale dataset.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::balance::ClassCounts;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Record {
    /// File path relative to the manifest, or `@<index>` into a packed store.
    pub path: String,
    pub label: usize,
}

impl Record {
    /// Index into the packed pixel store when the path is of the form `@<n>`.
    pub fn store_index(&self) -> Option<usize> {
        self.path.strip_prefix('@').and_then(|s| s.parse().ok())
    }
}

pub fn store_ref(index: usize) -> String {
    format!("@{index:06}")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<Record>,
    class_names: Vec<String>,
    split: Split,
}

impl DatasetManifest {
    /// Validates labels and paths and sorts records by `(path, label)`.
    pub fn new(mut records: Vec<Record>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let l = class_names.len();
        if l < 2 {
            return Err(Error::TooFewClasses(l));
        }
        if let Some((row, r)) = records.iter().enumerate().find(|(_, r)| r.label >= l) {
            return Err(Error::LabelOutOfRange {
                label: r.label,
                classes: l,
                row: Some(row),
            });
        }
        records.sort();
        if let Some(w) = records.windows(2).find(|w| w[0].path == w[1].path) {
            return Err(Error::data(format!("duplicate path `{}`", w[0].path)));
        }
        Ok(Self {
            records,
            class_names,
            split,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-class record counts; zero entries allowed.
    pub fn label_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Counts as a validated [`ClassCounts`]; fails if any class is empty.
    pub fn class_counts(&self) -> Result<ClassCounts> {
        ClassCounts::new(self.label_counts(), self.class_names.clone())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        let to_data = |e: csv::Error| Error::data(format!("{}: {e}", path.display()));
        w.write_record(["path", "label"]).map_err(to_data)?;
        for r in &self.records {
            w.write_record([r.path.as_str(), &r.label.to_string()])
                .map_err(to_data)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a `path,label` CSV. Labels may be integers or names from
/// `class_names`; when `class_names` is `None`, labels must be integers and
/// the class count is one past the largest label.
pub fn ingest_manifest(
    path: &Path,
    class_names: Option<&[String]>,
    split: Split,
) -> Result<DatasetManifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let to_data = |e: csv::Error| Error::data(format!("{}: {e}", path.display()));
    let headers = reader.headers().map_err(to_data)?.clone();
    if headers.len() != 2 || &headers[0] != "path" || &headers[1] != "label" {
        return Err(Error::data(format!(
            "{}: expected header `path,label`",
            path.display()
        )));
    }

    let mut raw = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(to_data)?;
        raw.push((row + 1, rec[0].to_string(), rec[1].trim().to_string()));
    }
    if raw.is_empty() {
        return Err(Error::data(format!("{}: manifest has no samples", path.display())));
    }

    let names: Vec<String> = match class_names {
        Some(n) => n.to_vec(),
        None => {
            let mut max = 0usize;
            for (row, _, label) in &raw {
                let v: usize = label.parse().map_err(|_| {
                    Error::data(format!(
                        "{} row {row}: label `{label}` is not an integer and no class list was given",
                        path.display()
                    ))
                })?;
                max = max.max(v);
            }
            (0..=max).map(|i| format!("class{i}")).collect()
        }
    };

    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(raw.len());
    for (row, p, label) in raw {
        let idx = match label.parse::<usize>() {
            Ok(v) => v,
            Err(_) => names.iter().position(|n| *n == label).ok_or_else(|| {
                Error::data(format!("{} row {row}: unknown label `{label}`", path.display()))
            })?,
        };
        if idx >= names.len() {
            return Err(Error::data(format!(
                "{} row {row}: label {idx} out of range for {} classes",
                path.display(),
                names.len()
            )));
        }
        if !seen.insert(p.clone()) {
            return Err(Error::data(format!("{} row {row}: duplicate path `{p}`", path.display())));
        }
        records.push(Record { path: p, label: idx });
    }
    DatasetManifest::new(records, names, split)
}

/// Exponential-decay subsampling recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub imbalance_factor: f64,
    pub mu: f64,
    /// Class indices ordered by descending original count (ties by index).
    pub class_order: Vec<usize>,
    pub seed: u64,
}

impl ImbalanceSpec {
    /// Solves for μ and the class order from the original counts.
    pub fn from_counts(original: &ClassCounts, target_if: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            imbalance_factor: target_if,
            mu: solve_mu(original, target_if)?,
            class_order: descending_order(original.counts()),
            seed,
        })
    }
}

pub fn descending_order(counts: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
}

fn ordered_extremes(counts: &[u64]) -> (f64, f64) {
    let order = descending_order(counts);
    (
        counts[order[0]] as f64,
        counts[*order.last().expect("non-empty")] as f64,
    )
}

/// `μ = (n_0 / (n_{L-1} · IF))^{1/(L-1)}` with classes in descending count order.
pub fn solve_mu(original: &ClassCounts, target_if: f64) -> Result<f64> {
    let l = original.num_classes();
    if l < 2 {
        return Err(Error::TooFewClasses(l));
    }
    let (first, last) = ordered_extremes(original.counts());
    let existing = first / last;
    if !(target_if > existing) {
        return Err(Error::InvalidHyperparameter {
            name: "imbalance_factor",
            value: target_if,
            reason: "must exceed the existing largest-to-smallest ratio",
        });
    }
    let mu = (first / (last * target_if)).powf(1.0 / (l - 1) as f64);
    debug_assert!(mu > 0.0 && mu < 1.0);
    Ok(mu)
}

/// `floor(n · μ^rank)` clamped to at least 1.
///
/// `μ^rank` is evaluated as `(μ^{L-1})^{rank/(L-1)}` from the requested
/// factor so the endpoints land on integers, and products within 1e-9 of an
/// integer snap to it before flooring.
pub fn kept_count(n: u64, spec: &ImbalanceSpec, rank: usize, original: &[u64]) -> u64 {
    let l = original.len();
    let (first, last) = ordered_extremes(original);
    let ratio = first / (last * spec.imbalance_factor);
    let pow = ratio.powf(rank as f64 / (l - 1) as f64);
    let exact = n as f64 * pow;
    let nearest = exact.round();
    let value = if (exact - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        exact.floor()
    };
    (value as u64).max(1)
}

fn check_spec(original: &[u64], spec: &ImbalanceSpec) -> Result<()> {
    let l = original.len();
    let mut sorted = spec.class_order.clone();
    sorted.sort_unstable();
    if sorted != (0..l).collect::<Vec<_>>() {
        return Err(Error::config("class_order is not a permutation of the classes"));
    }
    if !(spec.mu > 0.0 && spec.mu < 1.0) {
        return Err(Error::InvalidHyperparameter {
            name: "mu",
            value: spec.mu,
            reason: "must lie in (0, 1)",
        });
    }
    let first = original[spec.class_order[0]] as f64;
    let last = original[spec.class_order[l - 1]] as f64;
    let implied = first / last * spec.mu.powi(-((l - 1) as i32));
    if ((implied - spec.imbalance_factor) / spec.imbalance_factor).abs() > 1e-9 {
        return Err(Error::config(format!(
            "mu {} implies imbalance factor {implied}, not {}",
            spec.mu, spec.imbalance_factor
        )));
    }
    Ok(())
}

/// Keeps `floor(n_l μ^l)` (at least 1) uniformly chosen records of the class
/// at rank `l`. Deterministic for a fixed manifest and spec.
pub fn subsample_exponential(manifest: &DatasetManifest, spec: &ImbalanceSpec) -> Result<DatasetManifest> {
    let original = manifest.label_counts();
    let counts = ClassCounts::new(original.clone(), manifest.class_names().to_vec())?;
    check_spec(counts.counts(), spec)?;

    let mut by_class: BTreeMap<usize, Vec<&Record>> = BTreeMap::new();
    for r in manifest.records() {
        by_class.entry(r.label).or_default().push(r);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut kept = Vec::new();
    for (rank, &class) in spec.class_order.iter().enumerate() {
        let pool = &by_class[&class];
        let n = pool.len() as u64;
        let k = kept_count(n, spec, rank, &original);
        let unclamped = (n as f64 * spec.mu.powi(rank as i32)).floor();
        if unclamped < 1.0 {
            log::warn!(
                "class `{}` would keep no samples; clamping to 1",
                manifest.class_names()[class]
            );
        }
        for idx in sample(&mut rng, pool.len(), k as usize).into_iter() {
            kept.push(pool[idx].clone());
        }
    }
    DatasetManifest::new(kept, manifest.class_names().to_vec(), manifest.split())
}

const RBIM_MAGIC: &[u8; 6] = b"RBIM1\0";

/// Packed 8-bit images, row-major `(n, channel, y, x)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelStore {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl PixelStore {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: Vec::new(),
        }
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        if self.image_len() == 0 {
            0
        } else {
            self.pixels.len() / self.image_len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, index: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn push(&mut self, image: &[u8]) {
        assert_eq!(image.len(), self.image_len());
        self.pixels.extend_from_slice(image);
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(RBIM_MAGIC)?;
        for v in [self.len(), self.channels, self.height, self.width] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        out.write_all(&self.pixels)?;
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        input
            .read_exact(&mut magic)
            .map_err(|e| Error::data(format!("truncated RBIM1 store: {e}")))?;
        if &magic != RBIM_MAGIC {
            return Err(Error::data("not an RBIM1 pixel store"));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 4];
            input
                .read_exact(&mut b)
                .map_err(|e| Error::data(format!("truncated RBIM1 store: {e}")))?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [n, channels, height, width] = dims;
        let mut pixels = vec![0u8; n * channels * height * width];
        input
            .read_exact(&mut pixels)
            .map_err(|e| Error::data(format!("truncated RBIM1 store: {e}")))?;
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

/// A manifest together with the pixels its records refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub store: PixelStore,
}

impl Dataset {
    pub fn image(&self, record: &Record) -> Result<&[u8]> {
        let idx = record
            .store_index()
            .filter(|&i| i < self.store.len())
            .ok_or_else(|| Error::data(format!("record `{}` is not in the pixel store", record.path)))?;
        Ok(self.store.image(idx))
    }

    /// Same pixels, different manifest (e.g. after subsampling).
    pub fn with_manifest(&self, manifest: DatasetManifest) -> Self {
        Self {
            manifest,
            store: self.store.clone(),
        }
    }

    /// Writes `<stem>.csv`, `<stem>.rbim` and `classes.txt` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.manifest.write_csv(&dir.join(format!("{stem}.csv")))?;
        self.store.save(&dir.join(format!("{stem}.rbim")))?;
        let classes = dir.join("classes.txt");
        std::fs::write(&classes, self.manifest.class_names().join("\n") + "\n")
            .map_err(|e| Error::io(&classes, e))
    }

    /// Loads a manifest CSV. `@n` records resolve against the sibling
    /// `<stem>.rbim`; other paths are image files relative to the manifest,
    /// converted to grayscale `size`×`size`.
    pub fn load(manifest_path: &Path, split: Split, size: Option<usize>) -> Result<Self> {
        let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let classes = read_class_list(&dir.join("classes.txt"))?;
        let manifest = ingest_manifest(manifest_path, classes.as_deref(), split)?;
        let store_path = manifest_path.with_extension("rbim");
        if manifest.records().iter().all(|r| r.store_index().is_some()) {
            let store = PixelStore::load(&store_path)?;
            return Ok(Self { manifest, store });
        }
        let size = size.unwrap_or(32);
        load_image_files(&dir, manifest, size)
    }
}

fn read_class_list(path: &PathBuf) -> Result<Option<Vec<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
    ))
}

fn load_image_files(dir: &Path, manifest: DatasetManifest, size: usize) -> Result<Dataset> {
    let mut store = PixelStore::new(1, size, size);
    let mut records = Vec::with_capacity(manifest.len());
    for (i, r) in manifest.records().iter().enumerate() {
        let p = dir.join(&r.path);
        let img = image::open(&p)
            .map_err(|e| Error::data(format!("{}: {e}", p.display())))?
            .into_luma8();
        let img = image::imageops::resize(
            &img,
            size as u32,
            size as u32,
            image::imageops::FilterType::Triangle,
        );
        store.push(img.as_raw());
        records.push(Record {
            path: store_ref(i),
            label: r.label,
        });
    }
    let manifest = DatasetManifest::new(records, manifest.class_names().to_vec(), manifest.split())?;
    Ok(Dataset { manifest, store })
}

/// Desk-scale stand-in for a facial-expression dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub class_names: Vec<String>,
    pub image_size: usize,
    /// Training samples per class before any subsampling.
    pub per_class_base: usize,
    /// Test samples per class; the test split is balanced.
    pub test_per_class: usize,
    /// `feature_overlap[a][b]`: contrast of class b's pattern inside class a
    /// images. Diagonal is 1.
    pub feature_overlap: Vec<Vec<f64>>,
    pub noise_std: f64,
    /// Maximum template displacement in pixels.
    pub jitter: usize,
    /// Pairs every template with its mirror image across the vertical
    /// centre line, so class evidence is left-right symmetric like a face.
    pub mirrored: bool,
    pub seed: u64,
}

pub const DEFAULT_CLASS_NAMES: [&str; 7] = [
    "happiness", "neutral", "sadness", "surprise", "disgust", "anger", "fear",
];

impl Default for SyntheticSpec {
    fn default() -> Self {
        let l = DEFAULT_CLASS_NAMES.len();
        let mut overlap = identity(l);
        for (a, b) in [(3, 4), (5, 6)] {
            overlap[a][b] = 0.5;
            overlap[b][a] = 0.5;
        }
        Self {
            class_names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            image_size: 32,
            per_class_base: 700,
            test_per_class: 100,
            feature_overlap: overlap,
            noise_std: 0.25,
            jitter: 2,
            mirrored: true,
            seed: 0,
        }
    }
}

pub fn identity(l: usize) -> Vec<Vec<f64>> {
    (0..l)
        .map(|a| (0..l).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
        .collect()
}

const TEMPLATE: usize = 8;
const BACKGROUND: f64 = 0.5;
const AMPLITUDE: f64 = 0.35;

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn validate(&self) -> Result<()> {
        let l = self.num_classes();
        if l < 2 {
            return Err(Error::TooFewClasses(l));
        }
        if self.image_size < 16 {
            return Err(Error::config(format!(
                "image_size {} is too small to place templates (minimum 16)",
                self.image_size
            )));
        }
        if self.feature_overlap.len() != l || self.feature_overlap.iter().any(|r| r.len() != l) {
            return Err(Error::config("feature_overlap must be L×L"));
        }
        for (a, row) in self.feature_overlap.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                let ok = if a == b { v == 1.0 } else { (0.0..1.0).contains(&v) };
                if !ok {
                    return Err(Error::config(format!("feature_overlap[{a}][{b}] = {v} is invalid")));
                }
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be non-negative"));
        }
        if self.per_class_base == 0 || self.test_per_class == 0 {
            return Err(Error::config("per-class sample counts must be positive"));
        }
        Ok(())
    }

    /// Top-left corner of class `l`'s template before jitter.
    fn anchor(&self, l: usize) -> (usize, usize) {
        let edge = self.jitter;
        let slots = self.image_size - TEMPLATE - 2 * edge;
        if self.mirrored {
            // Two columns in the left half; the mirror copies fill the right.
            let span = (self.image_size / 2).saturating_sub(TEMPLATE + edge);
            let rows = self.num_classes().div_ceil(2).max(2);
            let (r, c) = (l / 2, l % 2);
            return (edge + slots * r / (rows - 1), edge + span * c);
        }
        let cols = 3;
        let rows = self.num_classes().div_ceil(cols).max(2);
        let (r, c) = (l / cols, l % cols);
        (edge + slots * r / (rows - 1), edge + slots * c / (cols - 1))
    }
}

/// Class templates: ±1 patterns drawn once from the spec seed.
fn templates(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7e3a_91c5);
    (0..spec.num_classes())
        .map(|_| {
            (0..TEMPLATE * TEMPLATE)
                .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect()
}

fn render(
    spec: &SyntheticSpec,
    templates: &[Vec<f64>],
    label: usize,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
) -> Vec<u8> {
    let s = spec.image_size;
    let mut img = vec![BACKGROUND; s * s];
    let j = spec.jitter as i64;
    for (other, &strength) in spec.feature_overlap[label].iter().enumerate() {
        if strength <= 0.0 {
            continue;
        }
        let (y0, x0) = spec.anchor(other);
        let dy = rng.gen_range(-j..=j);
        let dx = rng.gen_range(-j..=j);
        let (y0, x0) = ((y0 as i64 + dy) as usize, (x0 as i64 + dx) as usize);
        for ty in 0..TEMPLATE {
            for tx in 0..TEMPLATE {
                let v = strength * AMPLITUDE * templates[other][ty * TEMPLATE + tx];
                img[(y0 + ty) * s + x0 + tx] += v;
                if spec.mirrored {
                    img[(y0 + ty) * s + (s - 1 - x0 - tx)] += v;
                }
            }
        }
    }
    img.iter()
        .map(|&v| {
            let v = if spec.noise_std > 0.0 { v + noise.sample(rng) } else { v };
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

/// Generates `(train, test)`. Every training class starts with
/// `per_class_base` samples; the test split is balanced.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let templates = templates(spec);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut build = |per_class: usize, split: Split| -> Result<Dataset> {
        let mut store = PixelStore::new(1, spec.image_size, spec.image_size);
        let mut records = Vec::new();
        for label in 0..spec.num_classes() {
            for _ in 0..per_class {
                records.push(Record {
                    path: store_ref(store.len()),
                    label,
                });
                store.push(&render(spec, &templates, label, &mut rng, &noise));
            }
        }
        let manifest = DatasetManifest::new(records, spec.class_names.clone(), split)?;
        Ok(Dataset { manifest, store })
    };
    let train = build(spec.per_class_base, Split::Train)?;
    let test = build(spec.test_per_class, Split::Test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn equal_manifest(l: usize, per: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for label in 0..l {
            for k in 0..per {
                records.push(Record {
                    path: format!("c{label}/{k:05}.png"),
                    label,
                });
            }
        }
        let names = (0..l).map(|i| format!("class{i}")).collect();
        DatasetManifest::new(records, names, Split::Train).unwrap()
    }

    #[test]
    fn solve_mu_examples() {
        let eq = ClassCounts::from_counts(vec![700; 7]).unwrap();
        let mu = solve_mu(&eq, 100.0).unwrap();
        assert!((mu - 100f64.powf(-1.0 / 6.0)).abs() < 1e-15);
        assert!((mu - 0.464159).abs() < 1e-6);
        let two = ClassCounts::from_counts(vec![30, 30]).unwrap();
        assert!((solve_mu(&two, 4.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(solve_mu(&eq, 1.0).is_err());
        let skew = ClassCounts::from_counts(vec![100, 10]).unwrap();
        assert!(solve_mu(&skew, 10.0).is_err());
        assert!(solve_mu(&skew, 5.0).is_err());
        assert!(solve_mu(&skew, 20.0).is_ok());
    }

    #[test]
    fn subsample_700_if100() {
        let m = equal_manifest(7, 700);
        let spec = ImbalanceSpec::from_counts(&m.class_counts().unwrap(), 100.0, 3).unwrap();
        let out = subsample_exponential(&m, &spec).unwrap();
        assert_eq!(out.label_counts(), vec![700, 324, 150, 70, 32, 15, 7]);
        let counts = out.label_counts();
        assert_eq!(counts[0] / counts[6], 100);
        assert_eq!(counts[0] % counts[6], 0);
        let again = subsample_exponential(&m, &spec).unwrap();
        assert_eq!(out, again);
        let input: HashSet<_> = m.records().iter().collect();
        assert!(out.records().iter().all(|r| input.contains(r)));
        let other_seed = ImbalanceSpec { seed: 4, ..spec };
        assert_ne!(subsample_exponential(&m, &other_seed).unwrap(), out);
    }

    #[test]
    fn subsample_clamps_to_one() {
        let m = equal_manifest(3, 5);
        let spec = ImbalanceSpec::from_counts(&m.class_counts().unwrap(), 500.0, 0).unwrap();
        let out = subsample_exponential(&m, &spec).unwrap();
        assert_eq!(out.label_counts(), vec![5, 1, 1]);
    }

    #[test]
    fn subsample_rejects_inconsistent_spec() {
        let m = equal_manifest(3, 50);
        let mut spec = ImbalanceSpec::from_counts(&m.class_counts().unwrap(), 10.0, 0).unwrap();
        spec.mu = 0.5;
        assert!(subsample_exponential(&m, &spec).is_err());
        let mut spec = ImbalanceSpec::from_counts(&m.class_counts().unwrap(), 10.0, 0).unwrap();
        spec.class_order = vec![0, 0, 1];
        assert!(subsample_exponential(&m, &spec).is_err());
    }

    #[test]
    fn descending_order_breaks_ties_by_index() {
        assert_eq!(descending_order(&[5, 9, 5, 1, 9]), vec![1, 4, 0, 2, 3]);
    }

    #[test]
    fn manifest_sorted_and_validated() {
        let recs = vec![
            Record { path: "b".into(), label: 1 },
            Record { path: "a".into(), label: 0 },
        ];
        let m = DatasetManifest::new(recs, vec!["x".into(), "y".into()], Split::Test).unwrap();
        assert_eq!(m.records()[0].path, "a");
        let bad = vec![Record { path: "a".into(), label: 2 }];
        assert!(DatasetManifest::new(bad, vec!["x".into(), "y".into()], Split::Test).is_err());
        let dup = vec![
            Record { path: "a".into(), label: 0 },
            Record { path: "a".into(), label: 1 },
        ];
        assert!(DatasetManifest::new(dup, vec!["x".into(), "y".into()], Split::Test).is_err());
    }

    #[test]
    fn ingest_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "path,label\n").unwrap();
        assert!(matches!(ingest_manifest(&p, None, Split::Train), Err(Error::Data(_))));

        std::fs::write(&p, "path,label\na.png,0\nb.png,0\nc.png,1\n").unwrap();
        let m = ingest_manifest(&p, None, Split::Train).unwrap();
        assert_eq!(m.label_counts(), vec![2, 1]);

        let names: Vec<String> = vec!["neg".into(), "pos".into()];
        std::fs::write(&p, "path,label\na.png,pos\nb.png,neg\nc.png,2\n").unwrap();
        let err = ingest_manifest(&p, Some(&names), Split::Train).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");

        std::fs::write(&p, "path,label\na.png,pos\nb.png,happy\n").unwrap();
        assert!(ingest_manifest(&p, Some(&names), Split::Train)
            .unwrap_err()
            .to_string()
            .contains("unknown label"));

        std::fs::write(&p, "path,label\na.png,1\na.png,0\n").unwrap();
        assert!(ingest_manifest(&p, Some(&names), Split::Train)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));

        assert!(matches!(
            ingest_manifest(&dir.path().join("missing.csv"), None, Split::Train),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn manifest_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = equal_manifest(3, 4);
        let p = dir.path().join("m.csv");
        m.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("path,label\n"));
        assert!(!text.contains('\r'));
        let back = ingest_manifest(&p, Some(m.class_names()), Split::Train).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced_on_test() {
        let spec = SyntheticSpec {
            per_class_base: 5,
            test_per_class: 3,
            ..Default::default()
        };
        let (train, test) = generate_synthetic(&spec).unwrap();
        let (train2, test2) = generate_synthetic(&spec).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        assert_eq!(test.manifest.label_counts(), vec![3; 7]);
        assert_eq!(train.manifest.label_counts(), vec![5; 7]);
        assert_eq!(train.store.len(), 35);
        let other = generate_synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(other.0.store, train.store);
    }

    #[test]
    fn synthetic_rejects_small_images() {
        let spec = SyntheticSpec {
            image_size: 12,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn pixel_store_round_trip() {
        let (train, _) = generate_synthetic(&SyntheticSpec {
            per_class_base: 2,
            test_per_class: 1,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        train.store.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..6], b"RBIM1\0");
        assert_eq!(&buf[6..10], &14u32.to_le_bytes());
        assert_eq!(PixelStore::read_from(&buf[..]).unwrap(), train.store);
    }

    fn class_images(ds: &Dataset, label: usize) -> Vec<Vec<f64>> {
        ds.manifest
            .records()
            .iter()
            .filter(|r| r.label == label)
            .map(|r| ds.image(r).unwrap().iter().map(|&p| p as f64 / 255.0).collect())
            .collect()
    }

    fn mean_image(images: &[Vec<f64>]) -> Vec<f64> {
        let mut m = vec![0.0; images[0].len()];
        for img in images {
            m.iter_mut().zip(img).for_each(|(a, b)| *a += b / images.len() as f64);
        }
        m
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn template_regions_carry_the_class_pattern() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        let spec = SyntheticSpec {
            per_class_base: 40,
            test_per_class: 1,
            jitter: 0,
            ..Default::default()
        };
        let (train, _) = generate_synthetic(&spec).unwrap();
        let t = templates(&spec);
        let s = spec.image_size;
        for label in 0..spec.num_classes() {
            // Welch's t-test: pixels under +1 template cells vs −1 cells.
            let (y0, x0) = spec.anchor(label);
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for img in class_images(&train, label) {
                for ty in 0..TEMPLATE {
                    for tx in 0..TEMPLATE {
                        let v = img[(y0 + ty) * s + x0 + tx];
                        if t[label][ty * TEMPLATE + tx] > 0.0 { pos.push(v) } else { neg.push(v) }
                    }
                }
            }
            let stats = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64, v.len() as f64)
            };
            let ((m1, v1, n1), (m2, v2, n2)) = (stats(&pos), stats(&neg));
            let se2 = v1 / n1 + v2 / n2;
            let tstat = (m1 - m2) / se2.sqrt();
            let df = se2.powi(2) / ((v1 / n1).powi(2) / (n1 - 1.0) + (v2 / n2).powi(2) / (n2 - 1.0));
            let p = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(tstat.abs()));
            assert!(tstat > 0.0 && p < 0.01, "class {label}: t {tstat} p {p}");
        }
    }

    #[test]
    fn overlapping_classes_look_alike() {
        let spec = SyntheticSpec {
            per_class_base: 60,
            test_per_class: 1,
            jitter: 0,
            ..Default::default()
        };
        let (train, _) = generate_synthetic(&spec).unwrap();
        let means: Vec<Vec<f64>> = (0..7).map(|l| mean_image(&class_images(&train, l))).collect();
        // surprise↔disgust and anger↔fear share patterns; surprise↔happiness
        // and anger↔neutral do not.
        assert!(correlation(&means[3], &means[4]) > correlation(&means[3], &means[0]) + 0.1);
        assert!(correlation(&means[5], &means[6]) > correlation(&means[5], &means[1]) + 0.1);
    }

    #[test]
    fn noiseless_classes_are_separable_by_template_matching() {
        let spec = SyntheticSpec {
            per_class_base: 20,
            test_per_class: 1,
            noise_std: 0.0,
            feature_overlap: identity(7),
            ..Default::default()
        };
        let (train, _) = generate_synthetic(&spec).unwrap();
        let t = templates(&spec);
        let s = spec.image_size as i64;
        let j = spec.jitter as i64;
        let score = |img: &[f64], l: usize| {
            let (y0, x0) = spec.anchor(l);
            let mut best = f64::NEG_INFINITY;
            for dy in -j..=j {
                for dx in -j..=j {
                    let mut acc = 0.0;
                    for ty in 0..TEMPLATE as i64 {
                        for tx in 0..TEMPLATE as i64 {
                            let (y, x) = (y0 as i64 + dy + ty, x0 as i64 + dx + tx);
                            acc += (img[(y * s + x) as usize] - BACKGROUND) * t[l][(ty * TEMPLATE as i64 + tx) as usize];
                        }
                    }
                    best = best.max(acc);
                }
            }
            best
        };
        for r in train.manifest.records() {
            let img: Vec<f64> = train.image(r).unwrap().iter().map(|&p| p as f64 / 255.0).collect();
            let pred = (0..7).max_by(|&a, &b| score(&img, a).total_cmp(&score(&img, b))).unwrap();
            assert_eq!(pred, r.label);
        }
    }

    #[test]
    fn mirrored_layout_is_flip_symmetric() {
        let spec = SyntheticSpec {
            per_class_base: 3,
            test_per_class: 1,
            noise_std: 0.0,
            ..Default::default()
        };
        let (train, _) = generate_synthetic(&spec).unwrap();
        let s = spec.image_size;
        for r in train.manifest.records() {
            let img = train.image(r).unwrap();
            for y in 0..s {
                for x in 0..s {
                    assert_eq!(img[y * s + x], img[y * s + s - 1 - x]);
                }
            }
        }
    }
}
