//! Dataset schema, the AGD20K-style loader and a synthetic generator.
//!
//! Layout on disk:
//!
//! ```text
//! <root>/<Seen|Unseen>/trainset/exocentric/<action>/<object>/*
//! <root>/<Seen|Unseen>/trainset/egocentric/<action>/<object>/*
//! <root>/<Seen|Unseen>/testset/egocentric/<action>/<object>/*
//! <root>/<Seen|Unseen>/testset/GT/<action>/<object>/<stem>.png
//! <root>/annotations.jsonl
//! <root>/actions.txt, <root>/objects.txt
//! ```
//!
//! Vocabulary files may also live under `<root>/<Seen|Unseen>/`, which takes
//! precedence; the two settings of the real data use different action sets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SeaError};
use crate::grid::Grid;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Action,
    Object,
}

impl VocabKind {
    fn file_name(self) -> &'static str {
        match self {
            VocabKind::Action => "actions.txt",
            VocabKind::Object => "objects.txt",
        }
    }
}

/// Closed label space with contiguous ids in file order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    kind: VocabKind,
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    kind: VocabKind,
    labels: Vec<String>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = SeaError;
    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::new(r.kind, r.labels)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            kind: v.kind,
            labels: v.labels,
        }
    }
}

impl Vocabulary {
    pub fn new(kind: VocabKind, labels: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.trim() != l {
                return Err(SeaError::Schema(format!("invalid {kind:?} label {l:?}")));
            }
            if *l != l.to_lowercase() {
                return Err(SeaError::Schema(format!("{kind:?} label {l:?} is not lowercase")));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(SeaError::Schema(format!("duplicate {kind:?} label {l:?}")));
            }
        }
        if labels.is_empty() {
            return Err(SeaError::Schema(format!("empty {kind:?} vocabulary")));
        }
        Ok(Self {
            kind,
            labels,
            index,
        })
    }

    pub fn from_file(kind: VocabKind, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SeaError::io(path, e))?;
        let labels = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::new(kind, labels)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut text = self.labels.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| SeaError::io(path, e))
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn id_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "trainset",
            Split::Test => "testset",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    #[default]
    Seen,
    Unseen,
}

impl Setting {
    pub fn dir_name(self) -> &'static str {
        match self {
            Setting::Seen => "Seen",
            Setting::Unseen => "Unseen",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Seen => "seen",
            Setting::Unseen => "unseen",
        })
    }
}

impl FromStr for Setting {
    type Err = SeaError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "seen" => Ok(Setting::Seen),
            "unseen" => Ok(Setting::Unseen),
            other => Err(SeaError::Config(format!("unknown setting {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Exocentric,
    Egocentric,
}

/// One line of `annotations.jsonl`. `image` is relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: String,
    pub view: View,
    pub action: String,
    pub object: String,
    pub caption: String,
    pub split: Split,
    pub setting: Setting,
}

impl AnnotationRecord {
    /// Case-insensitive substring check; annotator phrasing varies too much to parse.
    pub fn caption_mentions_labels(&self) -> bool {
        let c = self.caption.to_lowercase();
        c.contains(&self.action.to_lowercase()) && c.contains(&self.object.to_lowercase())
    }
}

/// An egocentric sample. Images are kept as paths and decoded on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub ego_path: PathBuf,
    pub action_id: usize,
    pub object_id: usize,
    pub caption: String,
    pub gt_path: Option<PathBuf>,
    pub split: Split,
    pub setting: Setting,
}

impl Sample {
    pub fn pair(&self) -> (usize, usize) {
        (self.action_id, self.object_id)
    }

    pub fn load_ego(&self) -> Result<RgbImage> {
        load_rgb(&self.ego_path)
    }

    pub fn load_gt(&self) -> Result<Option<Grid>> {
        self.gt_path.as_deref().map(load_heatmap).transpose()
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| SeaError::image(path, e))?
        .to_rgb8())
}

/// 8-bit grayscale heatmap rescaled to [0,1].
pub fn load_heatmap(path: &Path) -> Result<Grid> {
    let img = image::open(path).map_err(|e| SeaError::image(path, e))?;
    Ok(Grid::from_gray_image(&img.to_luma8()))
}

/// All egocentric samples of one (setting, split) plus the exocentric pool.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub setting: Setting,
    pub split: Split,
    pub actions: Vocabulary,
    pub objects: Vocabulary,
    pub samples: Vec<Sample>,
    /// Exocentric images of the training split keyed by (action_id, object_id).
    pub exo_pool: BTreeMap<(usize, usize), Vec<PathBuf>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct object ids that occur in the samples.
    pub fn object_ids(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.object_id).collect()
    }

    pub fn action_ids(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.action_id).collect()
    }

    pub fn pair_label(&self, pair: (usize, usize)) -> String {
        format!(
            "({}, {})",
            self.actions.label(pair.0),
            self.objects.label(pair.1)
        )
    }
}

pub fn load_vocabularies(root: &Path, setting: Setting) -> Result<(Vocabulary, Vocabulary)> {
    let pick = |kind: VocabKind| -> Result<Vocabulary> {
        let scoped = root.join(setting.dir_name()).join(kind.file_name());
        let path = if scoped.is_file() {
            scoped
        } else {
            root.join(kind.file_name())
        };
        if !path.is_file() {
            return Err(SeaError::Load(format!("missing vocabulary file {}", path.display())));
        }
        Vocabulary::from_file(kind, &path)
    };
    Ok((pick(VocabKind::Action)?, pick(VocabKind::Object)?))
}

pub fn read_annotations(root: &Path) -> Result<Vec<AnnotationRecord>> {
    let path = root.join(ANNOTATIONS_FILE);
    if !path.is_file() {
        return Err(SeaError::Load(format!(
            "missing annotation file {}",
            path.display()
        )));
    }
    let file = fs::File::open(&path).map_err(|e| SeaError::io(&path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SeaError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| {
            SeaError::Load(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Ground-truth path for an egocentric test image: same action/object
/// directories under `testset/GT`, same stem, `.png`.
pub fn gt_path_for(root: &Path, setting: Setting, action: &str, object: &str, image: &str) -> PathBuf {
    let stem = Path::new(image)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    root.join(setting.dir_name())
        .join("testset")
        .join("GT")
        .join(action)
        .join(object)
        .join(format!("{stem}.png"))
}

/// Loads every egocentric sample of `(setting, split)`. Exocentric records of
/// the training split populate `exo_pool`. Fails without a partial result.
pub fn load_dataset(
    root: &Path,
    setting: Setting,
    split: Split,
    vocab: (Vocabulary, Vocabulary),
) -> Result<Dataset> {
    let (actions, objects) = vocab;
    let records = read_annotations(root)?;
    let mut samples = Vec::new();
    let mut exo_pool: BTreeMap<(usize, usize), Vec<PathBuf>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        if rec.setting != setting {
            continue;
        }
        let wanted = match rec.view {
            View::Egocentric => rec.split == split,
            View::Exocentric => rec.split == Split::Train,
        };
        if !wanted {
            continue;
        }
        let describe = || format!("record {} ({})", i + 1, rec.image);
        let action_id = actions.id_of(&rec.action).ok_or_else(|| {
            SeaError::Schema(format!("{}: action {:?} not in vocabulary", describe(), rec.action))
        })?;
        let object_id = objects.id_of(&rec.object).ok_or_else(|| {
            SeaError::Schema(format!("{}: object {:?} not in vocabulary", describe(), rec.object))
        })?;
        if !rec.caption_mentions_labels() {
            return Err(SeaError::Schema(format!(
                "{}: caption {:?} does not mention both {:?} and {:?}",
                describe(),
                rec.caption,
                rec.action,
                rec.object
            )));
        }
        let path = root.join(&rec.image);
        match rec.view {
            View::Exocentric => exo_pool.entry((action_id, object_id)).or_default().push(path),
            View::Egocentric => {
                let gt_path = if split == Split::Test {
                    let gt = gt_path_for(root, setting, &rec.action, &rec.object, &rec.image);
                    if !gt.is_file() {
                        return Err(SeaError::Schema(format!(
                            "{}: missing ground-truth heatmap {}",
                            describe(),
                            gt.display()
                        )));
                    }
                    Some(gt)
                } else {
                    None
                };
                samples.push(Sample {
                    id: rec.image.clone(),
                    ego_path: path,
                    action_id,
                    object_id,
                    caption: rec.caption.clone(),
                    gt_path,
                    split,
                    setting,
                });
            }
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        setting,
        split,
        actions,
        objects,
        samples,
        exo_pool,
    })
}

/// Paths of `k` exocentric images for the sample's (action, object) pair.
/// Draws without replacement when the pool holds at least `k` images and with
/// replacement otherwise.
pub fn sample_exocentric_paths(
    dataset: &Dataset,
    sample: &Sample,
    k: usize,
    rng_seed: u64,
) -> Result<Vec<PathBuf>> {
    if k == 0 {
        return Err(SeaError::Input("k must be at least 1".into()));
    }
    let pool = dataset
        .exo_pool
        .get(&sample.pair())
        .filter(|p| !p.is_empty())
        .ok_or_else(|| {
            SeaError::Data(format!(
                "no exocentric images for pair {}",
                dataset.pair_label(sample.pair())
            ))
        })?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(if pool.len() >= k {
        index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect()
    } else {
        (0..k).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
    })
}

pub fn sample_exocentrics(
    dataset: &Dataset,
    sample: &Sample,
    k: usize,
    rng_seed: u64,
) -> Result<Vec<RgbImage>> {
    sample_exocentric_paths(dataset, sample, k, rng_seed)?
        .iter()
        .map(|p| load_rgb(p))
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

pub const SYNTHETIC_ACTIONS: [&str; 9] = [
    "hold", "cut", "push", "pour", "beat", "carry", "open", "kick", "throw",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Bar,
    Star,
}

pub const SHAPES: [Shape; 8] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Cross,
    Shape::Ring,
    Shape::Bar,
    Shape::Star,
];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Bar => "bar",
            Shape::Star => "star",
        }
    }

    /// Membership test in coordinates normalized by the shape radius.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            Shape::Triangle => (-0.9..=0.85).contains(&v) && u.abs() <= (v + 0.9) * 0.55,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
            }
            Shape::Ring => {
                let d = (u * u + v * v).sqrt();
                (0.55..=1.0).contains(&d)
            }
            Shape::Bar => u.abs() <= 1.0 && v.abs() <= 0.4,
            Shape::Star => {
                ((u - v).abs() <= 0.35 || (u + v).abs() <= 0.35) && u.abs() <= 0.9 && v.abs() <= 0.9
            }
        }
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 60, 60],
    [60, 200, 90],
    [70, 110, 240],
    [240, 210, 60],
    [200, 80, 220],
    [60, 210, 220],
    [250, 150, 50],
    [240, 240, 240],
];

const HAND_COLOR: [u8; 3] = [224, 172, 105];

/// Anchor centers as fractions of (height, width); one per action.
const ANCHORS: [(f64, f64); 9] = [
    (0.28, 0.28),
    (0.28, 0.72),
    (0.72, 0.28),
    (0.72, 0.72),
    (0.5, 0.5),
    (0.28, 0.5),
    (0.72, 0.5),
    (0.5, 0.28),
    (0.5, 0.72),
];

const CAPTION_TEMPLATES: [&str; 4] = [
    "I will [action] [object]",
    "I'm going to [action] the [object]",
    "[action] the [object]",
    "next I will [action] [object]",
];

fn default_k_exo() -> usize {
    3
}

fn default_test_per_pair() -> usize {
    5
}

fn default_setting() -> Setting {
    Setting::Seen
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_actions: usize,
    pub n_objects: usize,
    pub samples_per_pair: usize,
    #[serde(default = "default_test_per_pair")]
    pub test_per_pair: usize,
    /// (height, width)
    pub image_size: (usize, usize),
    #[serde(default = "default_k_exo")]
    pub k_exo: usize,
    pub seed: u64,
    pub blob_sigma: f64,
    #[serde(default = "default_setting")]
    pub setting: Setting,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_actions: 4,
            n_objects: 4,
            samples_per_pair: 20,
            test_per_pair: default_test_per_pair(),
            image_size: (48, 48),
            k_exo: default_k_exo(),
            seed: 7,
            blob_sigma: 5.0,
            setting: Setting::Seen,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SeaError::Config(m));
        if self.n_actions < 2 || self.n_actions > ANCHORS.len() {
            return bad(format!("n_actions must be in 2..={}, got {}", ANCHORS.len(), self.n_actions));
        }
        if self.n_objects < 2 || self.n_objects > SHAPES.len() {
            return bad(format!("n_objects must be in 2..={}, got {}", SHAPES.len(), self.n_objects));
        }
        if self.setting == Setting::Unseen && self.n_objects < 3 {
            return bad("unseen setting needs at least 3 objects".into());
        }
        if self.samples_per_pair == 0 || self.test_per_pair == 0 || self.k_exo == 0 {
            return bad("samples_per_pair, test_per_pair and k_exo must be positive".into());
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return bad(format!("image_size must be at least 16x16, got {h}x{w}"));
        }
        if !(self.blob_sigma.is_finite() && self.blob_sigma > 0.0) {
            return bad(format!("blob_sigma must be positive, got {}", self.blob_sigma));
        }
        Ok(())
    }

    pub fn action_labels(&self) -> Vec<String> {
        SYNTHETIC_ACTIONS[..self.n_actions].iter().map(|s| s.to_string()).collect()
    }

    pub fn object_labels(&self) -> Vec<String> {
        SHAPES[..self.n_objects].iter().map(|s| s.name().to_string()).collect()
    }

    /// Object ids used by (train, test). Disjoint in the unseen setting.
    pub fn object_split(&self) -> (Vec<usize>, Vec<usize>) {
        let all: Vec<usize> = (0..self.n_objects).collect();
        match self.setting {
            Setting::Seen => (all.clone(), all),
            Setting::Unseen => {
                let n_test = (self.n_objects / 3).max(1);
                let cut = self.n_objects - n_test;
                (all[..cut].to_vec(), all[cut..].to_vec())
            }
        }
    }
}

/// Where the generator put the object in one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapePlacement {
    pub center: (f64, f64),
    pub radius: f64,
}

impl ShapePlacement {
    /// Inclusive pixel bounding box (y0, x0, y1, x1), clamped to the image.
    pub fn bbox(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let clamp = |v: f64, hi: usize| v.round().clamp(0.0, (hi - 1) as f64) as usize;
        (
            clamp(self.center.0 - self.radius, h),
            clamp(self.center.1 - self.radius, w),
            clamp(self.center.0 + self.radius, h),
            clamp(self.center.1 + self.radius, w),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record: AnnotationRecord,
    pub placement: ShapePlacement,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub config: SyntheticConfig,
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub pairs: Vec<(String, String)>,
    pub entries: Vec<ManifestEntry>,
    /// SHA-256 of the written annotations file.
    pub annotations_sha256: String,
}

impl SyntheticManifest {
    pub fn records(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.entries.iter().map(|e| &e.record)
    }
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let base: i32 = rng.gen_range(25..55);
        let img = RgbImage::from_fn(w as u32, h as u32, |_, _| {
            let n: i32 = rng.gen_range(-12..=12);
            let v = (base + n).clamp(0, 255) as u8;
            Rgb([v, v, v.saturating_add(6)])
        });
        Self { img }
    }

    fn draw_shape(&mut self, shape: Shape, p: ShapePlacement, color: [u8; 3]) {
        let (w, h) = self.img.dimensions();
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5 - p.center.1) / p.radius;
                let v = (y as f64 + 0.5 - p.center.0) / p.radius;
                if shape.contains(u, v) {
                    self.img.put_pixel(x, y, Rgb(color));
                }
            }
        }
    }

    /// An "arm" reaching the shape from the nearer side edge, covering the
    /// part of the object where the blob peaks.
    fn draw_hand(&mut self, p: ShapePlacement) {
        let (w, h) = self.img.dimensions();
        let half = (p.radius * 0.45).max(1.5);
        let y0 = (p.center.0 - half).max(0.0);
        let y1 = (p.center.0 + half).min(h as f64);
        let from_left = p.center.1 < w as f64 / 2.0;
        let tip = if from_left {
            p.center.1 + p.radius * 0.3
        } else {
            p.center.1 - p.radius * 0.3
        };
        for y in y0.floor() as u32..(y1.ceil() as u32).min(h) {
            for x in 0..w {
                let xc = x as f64 + 0.5;
                let inside = if from_left { xc <= tip } else { xc >= tip };
                if inside {
                    self.img.put_pixel(x, y, Rgb(HAND_COLOR));
                }
            }
        }
    }
}

fn jittered_color(base: [u8; 3], rng: &mut ChaCha8Rng) -> [u8; 3] {
    base.map(|c| (c as i32 + rng.gen_range(-10..=10)).clamp(0, 255) as u8)
}

fn placement(cfg: &SyntheticConfig, action: usize, rng: &mut ChaCha8Rng) -> ShapePlacement {
    let (h, w) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
    let m = h.min(w);
    let (ay, ax) = ANCHORS[action];
    let jitter = 0.03 * m;
    ShapePlacement {
        center: (
            ay * h + rng.gen_range(-jitter..=jitter),
            ax * w + rng.gen_range(-jitter..=jitter),
        ),
        radius: m * rng.gen_range(0.15..0.19),
    }
}

/// Isotropic Gaussian around the shape center, min-max normalized.
pub fn gaussian_blob(h: usize, w: usize, center: (f64, f64), sigma: f64) -> Grid {
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 + 0.5 - center.0;
            let dx = x as f64 + 0.5 - center.1;
            data.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        }
    }
    let (mn, mx) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = (mx - mn).max(f64::MIN_POSITIVE);
    data.iter_mut().for_each(|v| *v = (*v - mn) / range);
    Grid::new(h, w, data).expect("blob shape")
}

pub(crate) fn save_png(img: &image::DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| SeaError::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| SeaError::image(path, e))
}

/// Writes a complete synthetic dataset under `out_root`.
///
/// Objects are shape types, actions pick the anchor position of the shape and
/// the ground truth is a Gaussian blob on the shape. Exocentric images add a
/// hand rectangle over the blob region. Output depends only on `cfg`.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_root: &Path) -> Result<SyntheticManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_root).map_err(|e| SeaError::io(out_root, e))?;
    let actions = cfg.action_labels();
    let objects = cfg.object_labels();
    Vocabulary::new(VocabKind::Action, actions.clone())?.write_file(&out_root.join("actions.txt"))?;
    Vocabulary::new(VocabKind::Object, objects.clone())?.write_file(&out_root.join("objects.txt"))?;

    let (train_objects, test_objects) = cfg.object_split();
    let (h, w) = cfg.image_size;
    let setting_dir = cfg.setting.dir_name();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    let mut pairs = BTreeSet::new();
    let exo_per_pair = cfg.samples_per_pair.max(cfg.k_exo);

    for (split, object_ids, per_pair) in [
        (Split::Train, &train_objects, cfg.samples_per_pair),
        (Split::Test, &test_objects, cfg.test_per_pair),
    ] {
        for a in 0..cfg.n_actions {
            for &o in object_ids {
                let (an, on) = (&actions[a], &objects[o]);
                pairs.insert((a, o));
                let n_images = match split {
                    Split::Train => per_pair.max(exo_per_pair),
                    Split::Test => per_pair,
                };
                for i in 0..n_images {
                    for view in [View::Egocentric, View::Exocentric] {
                        let wanted = match (split, view) {
                            (Split::Train, View::Egocentric) | (Split::Test, View::Egocentric) => {
                                i < per_pair
                            }
                            (Split::Train, View::Exocentric) => i < exo_per_pair,
                            (Split::Test, View::Exocentric) => false,
                        };
                        if !wanted {
                            continue;
                        }
                        let view_dir = match view {
                            View::Egocentric => "egocentric",
                            View::Exocentric => "exocentric",
                        };
                        let tag = match view {
                            View::Egocentric => "ego",
                            View::Exocentric => "exo",
                        };
                        let rel = format!(
                            "{setting_dir}/{}/{view_dir}/{an}/{on}/{an}_{on}_{tag}_{i:04}.png",
                            split.dir_name()
                        );
                        let p = placement(cfg, a, &mut rng);
                        let mut canvas = Canvas::background(h, w, &mut rng);
                        let color = jittered_color(PALETTE[o], &mut rng);
                        canvas.draw_shape(SHAPES[o], p, color);
                        if view == View::Exocentric {
                            canvas.draw_hand(p);
                        }
                        save_png(&image::DynamicImage::ImageRgb8(canvas.img), &out_root.join(&rel))?;
                        let template = CAPTION_TEMPLATES[rng.gen_range(0..CAPTION_TEMPLATES.len())];
                        let caption = crate::explain::render_caption(an, on, template)?;
                        let gt = if split == Split::Test {
                            let gt_path = gt_path_for(out_root, cfg.setting, an, on, &rel);
                            let blob = gaussian_blob(h, w, p.center, cfg.blob_sigma);
                            save_png(&image::DynamicImage::ImageLuma8(blob.to_gray_image()), &gt_path)?;
                            Some(
                                gt_path
                                    .strip_prefix(out_root)
                                    .expect("gt under root")
                                    .to_string_lossy()
                                    .into_owned(),
                            )
                        } else {
                            None
                        };
                        entries.push(ManifestEntry {
                            record: AnnotationRecord {
                                image: rel,
                                view,
                                action: an.clone(),
                                object: on.clone(),
                                caption,
                                split,
                                setting: cfg.setting,
                            },
                            placement: p,
                            gt,
                        });
                    }
                }
            }
        }
    }

    let mut text = String::new();
    for e in &entries {
        text.push_str(&serde_json::to_string(&e.record).expect("record serializes"));
        text.push('\n');
    }
    let ann_path = out_root.join(ANNOTATIONS_FILE);
    fs::File::create(&ann_path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| SeaError::io(&ann_path, e))?;

    let manifest = SyntheticManifest {
        config: cfg.clone(),
        actions: actions.clone(),
        objects: objects.clone(),
        pairs: pairs
            .into_iter()
            .map(|(a, o)| (actions[a].clone(), objects[o].clone()))
            .collect(),
        entries,
        annotations_sha256: hex::encode(Sha256::digest(text.as_bytes())),
    };
    let manifest_path = out_root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| SeaError::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<SyntheticManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| SeaError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| SeaError::Load(format!("{}: {e}", path.display())))
}
