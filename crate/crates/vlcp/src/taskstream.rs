//! Synthetic continual task stream of image-text pairs.
//!
//! Each task owns a disjoint set of classes; a class is a tuple of discrete
//! visual attributes (shape, color, size, grid position) shared by its images
//! and captions. Images are procedural glyph renderings of the attributes,
//! captions come from a fixed attribute-slot template diluted with
//! domain-specific filler tokens, and per-class sample counts follow a Zipf
//! law over the global class rank. Everything is a pure function of
//! `(config, seed)`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util;

// Vocabulary layout. Anything at or above `FILLER_BASE + FILLER_POOL` is
// unused padding of the id space.
pub const PAD_TOKEN: usize = 0;
pub const MASK_TOKEN: usize = 1;
pub const UNK_TOKEN: usize = 2;
pub const ATTR_BASE: usize = 4;
pub const NUM_ATTRIBUTES: usize = 5;
pub const ATTR_LEVELS: [usize; NUM_ATTRIBUTES] = [10, 8, 4, 4, 4];
pub const DOMAIN_BASE: usize = ATTR_BASE + 30; // 34
pub const MAX_DOMAINS: usize = 16;
pub const FILLER_BASE: usize = DOMAIN_BASE + MAX_DOMAINS; // 50
pub const FILLER_POOL: usize = 64;
pub const FILLERS_PER_TASK: usize = 12;
pub const MIN_VOCAB: usize = FILLER_BASE + FILLER_POOL; // 114

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid stream config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Validation { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub num_tasks: usize,
    pub classes_per_task: Vec<usize>,
    pub zipf_exponent: f64,
    pub samples_total: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    /// A class contributes one cross-modal test pair when its train count
    /// reaches this threshold.
    #[serde(default = "default_test_min")]
    pub test_min_train: usize,
    /// Query pairs per class ≈ `query_rate · train_count` (floor 1).
    #[serde(default = "default_query_rate")]
    pub query_rate: f64,
    /// Gallery pairs per class ≈ `gallery_rate · train_count` (floor 1).
    #[serde(default = "default_gallery_rate")]
    pub gallery_rate: f64,
}

fn default_noise() -> f64 {
    0.1
}
fn default_test_min() -> usize {
    10
}
fn default_query_rate() -> f64 {
    0.005
}
fn default_gallery_rate() -> f64 {
    0.08
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            classes_per_task: vec![10; 5],
            zipf_exponent: 0.8,
            samples_total: 2500,
            image_size: 32,
            vocab_size: 256,
            max_seq_len: 12,
            noise_level: 0.1,
            test_min_train: 10,
            query_rate: 0.005,
            gallery_rate: 0.08,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.num_tasks == 0 {
            return bad("num_tasks must be >= 1".into());
        }
        if self.num_tasks > MAX_DOMAINS {
            return bad(format!("at most {MAX_DOMAINS} tasks supported"));
        }
        if self.classes_per_task.len() != self.num_tasks {
            return bad(format!(
                "classes_per_task has {} entries for {} tasks",
                self.classes_per_task.len(),
                self.num_tasks
            ));
        }
        if self.classes_per_task.iter().any(|&c| c == 0) {
            return bad("every task needs at least one class".into());
        }
        if self.zipf_exponent < 0.0 {
            return bad("zipf_exponent must be >= 0".into());
        }
        if self.vocab_size == 0 {
            return bad("vocabulary must be non-empty".into());
        }
        if self.vocab_size < MIN_VOCAB {
            return bad(format!("vocab_size must be >= {MIN_VOCAB}"));
        }
        let total_classes: usize = self.classes_per_task.iter().sum();
        if self.samples_total < total_classes {
            return bad(format!(
                "samples_total {} leaves a task with fewer samples than classes ({total_classes} classes)",
                self.samples_total
            ));
        }
        let combos: usize = ATTR_LEVELS.iter().product();
        if total_classes > combos {
            return bad(format!("at most {combos} distinct classes available"));
        }
        if self.max_seq_len < 2 * NUM_ATTRIBUTES + 1 {
            return bad(format!(
                "max_seq_len must be >= {} to fit the caption template",
                2 * NUM_ATTRIBUTES + 1
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad("noise_level must lie in [0, 1]".into());
        }
        if self.image_size < 16 {
            return bad("image_size must be >= 16".into());
        }
        Ok(())
    }
}

/// One semantic class: a task-bound attribute tuple plus its train count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: u64,
    pub task_id: usize,
    pub attribute_vector: Vec<f64>,
    pub sample_count: usize,
}

impl ClassSpec {
    /// Discrete attribute levels encoded by the attribute vector.
    pub fn levels(&self) -> [usize; NUM_ATTRIBUTES] {
        let mut out = [0usize; NUM_ATTRIBUTES];
        for (i, (&a, &l)) in self
            .attribute_vector
            .iter()
            .zip(ATTR_LEVELS.iter())
            .enumerate()
        {
            out[i] = ((a * l as f64).floor() as usize).min(l - 1);
        }
        out
    }
}

fn attr_token(attr: usize, level: usize) -> usize {
    let offset: usize = ATTR_LEVELS[..attr].iter().sum();
    ATTR_BASE + offset + level
}

fn domain_token(task: usize) -> usize {
    DOMAIN_BASE + (task % MAX_DOMAINS)
}

fn filler_token(task: usize, slot: usize) -> usize {
    FILLER_BASE + (task * FILLERS_PER_TASK + slot) % FILLER_POOL
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Query,
    Gallery,
}

/// One training sample: rendered image, caption token sequence, identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextPair {
    pub pair_id: u64,
    pub task_id: usize,
    pub class_id: u64,
    pub image: Array3<f32>,
    pub caption: Vec<usize>,
    pub instance_seed: u64,
    pub noise_level: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub train: Vec<ImageTextPair>,
    pub test: Vec<ImageTextPair>,
    pub query: Vec<ImageTextPair>,
    pub gallery: Vec<ImageTextPair>,
}

impl TaskDataset {
    pub fn class_ids(&self) -> std::collections::BTreeSet<u64> {
        self.train.iter().map(|p| p.class_id).collect()
    }

    pub fn split(&self, split: Split) -> &[ImageTextPair] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub config: StreamConfig,
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    pub tasks: Vec<TaskDataset>,
}

impl TaskStream {
    pub fn class(&self, class_id: u64) -> Option<&ClassSpec> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn total_train_pairs(&self) -> usize {
        self.tasks.iter().map(|t| t.train.len()).sum()
    }
}

// ── rendering ──────────────────────────────────────────────────────────

const PALETTE: [(f64, f64, f64); 8] = [
    (0.90, 0.15, 0.15),
    (0.15, 0.85, 0.20),
    (0.20, 0.30, 0.90),
    (0.90, 0.85, 0.20),
    (0.85, 0.20, 0.85),
    (0.20, 0.85, 0.85),
    (0.95, 0.55, 0.15),
    (0.55, 0.20, 0.80),
];

/// Render the deterministic image-text pair of a class instance. The image
/// places a colored glyph (shape, color, size, grid cell from the attribute
/// levels) on a task-shaded background; the caption interleaves the domain
/// token, one token per attribute level, and task fillers. `noise_level`
/// scales seeded pixel noise, glyph jitter, and caption corruption; at zero
/// the output does not depend on `instance_seed` at all.
pub fn render_pair(
    spec: &ClassSpec,
    pair_id: u64,
    instance_seed: u64,
    noise_level: f64,
    cfg: &StreamConfig,
) -> ImageTextPair {
    assert!((0.0..=1.0).contains(&noise_level), "noise_level in [0,1]");
    let mut rng = util::derive_rng_named(instance_seed, "render", &[]);
    let levels = spec.levels();
    let caption = render_caption(spec.task_id, &levels, noise_level, cfg, &mut rng);
    let image = render_image(spec.task_id, &levels, noise_level, cfg, &mut rng);
    ImageTextPair {
        pair_id,
        task_id: spec.task_id,
        class_id: spec.class_id,
        image,
        caption,
        instance_seed,
        noise_level,
    }
}

fn render_caption(
    task: usize,
    levels: &[usize; NUM_ATTRIBUTES],
    noise: f64,
    cfg: &StreamConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut caption = Vec::with_capacity(cfg.max_seq_len);
    caption.push(domain_token(task));
    for (i, &level) in levels.iter().enumerate() {
        let mut attr = attr_token(i, level);
        if rng.gen_range(0.0..1.0) < noise * 0.3 {
            // corrupt to a different level of the same attribute
            let wrong = rng.gen_range(0..ATTR_LEVELS[i]);
            attr = attr_token(i, wrong);
        }
        caption.push(attr);
        let mut filler = filler_token(task, i);
        if rng.gen_range(0.0..1.0) < noise {
            filler = FILLER_BASE + rng.gen_range(0..FILLER_POOL);
        }
        caption.push(filler);
    }
    if caption.len() < cfg.max_seq_len && rng.gen_range(0.0..1.0) < noise {
        caption.push(FILLER_BASE + rng.gen_range(0..FILLER_POOL));
    }
    debug_assert!(caption.len() <= cfg.max_seq_len);
    caption
}

fn render_image(
    task: usize,
    levels: &[usize; NUM_ATTRIBUTES],
    noise: f64,
    cfg: &StreamConfig,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let s = cfg.image_size;
    let sf = s as f64;
    let [shape, color, size, pos_x, pos_y] = *levels;

    // per-task rendering style: tasks form distinct visual domains over a
    // shared attribute semantics (mirrors multi-domain product photos)
    let style = task % 1; // experiment: shared visual domain
    let mut img = vec![0.0f64; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let bg = match style {
                0 => 0.12,
                1 => 0.82,
                2 => 0.05 + 0.35 * (y as f64 / sf),
                _ => {
                    if (x / 2 + y / 2) % 2 == 0 {
                        0.30
                    } else {
                        0.18
                    }
                }
            };
            let o = (y * s + x) * 3;
            img[o] = bg;
            img[o + 1] = bg;
            img[o + 2] = bg;
        }
    }

    let jitter = |rng: &mut ChaCha8Rng| (rng.gen_range(-1.0..1.0) * 2.0 * noise).round();
    let margin = sf * 0.2;
    let usable = sf - 2.0 * margin;
    let cx = margin + usable * (pos_x as f64 + 0.5) / 4.0 + jitter(rng);
    let cy = margin + usable * (pos_y as f64 + 0.5) / 4.0 + jitter(rng);
    let r = sf * (0.09 + 0.035 * size as f64);
    let (mut cr, mut cg, mut cb) = PALETTE[color];
    if style == 1 {
        // inverted-domain glyphs are darkened toward the complement
        cr = 1.0 - 0.8 * cr;
        cg = 1.0 - 0.8 * cg;
        cb = 1.0 - 0.8 * cb;
    }
    if noise > 0.0 {
        let tint = |v: f64, rng: &mut ChaCha8Rng| {
            (v * (1.0 + 0.2 * noise * rng.gen_range(-0.5..0.5))).clamp(0.0, 1.0)
        };
        cr = tint(cr, rng);
        cg = tint(cg, rng);
        cb = tint(cb, rng);
    }

    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let inside = match shape {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs() <= r * 0.9 && dy.abs() <= r * 0.9,
                2 => dx.abs() + dy.abs() <= r * 1.2,
                3 => dy >= -r && dy <= r && dx.abs() <= (r - dy) * 0.6,
                4 => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= r * r && d2 >= r * r * 0.3
                }
                5 => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
                6 => dy.abs() <= r / 2.5 && dx.abs() <= r,
                7 => dx.abs() <= r / 2.5 && dy.abs() <= r,
                8 => (dx - dy).abs() <= r / 2.5 && dx.abs() <= r && dy.abs() <= r,
                _ => (dx + dy).abs() <= r / 2.5 && dx.abs() <= r && dy.abs() <= r,
            };
            if inside {
                let o = (y * s + x) * 3;
                img[o] = cr;
                img[o + 1] = cg;
                img[o + 2] = cb;
            }
        }
    }

    if noise > 0.0 {
        for v in img.iter_mut() {
            *v = (*v + rng.gen_range(-1.0..1.0) * 0.12 * noise).clamp(0.0, 1.0);
        }
    }
    Array3::from_shape_vec((s, s, 3), img.into_iter().map(|v| v as f32).collect()).unwrap()
}

// ── stream generation ──────────────────────────────────────────────────

/// Zipf-law per-class counts over global rank: strictly non-increasing,
/// every class at least one sample, total exactly `samples_total`.
fn zipf_counts(num_classes: usize, exponent: f64, samples_total: usize) -> Vec<usize> {
    let weights: Vec<f64> = (0..num_classes)
        .map(|r| 1.0 / ((r + 1) as f64).powf(exponent))
        .collect();
    let wsum: f64 = weights.iter().sum();
    let spare = samples_total - num_classes;
    let quotas: Vec<f64> = weights.iter().map(|w| spare as f64 * w / wsum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| 1 + q.floor() as usize).collect();
    let mut leftover = samples_total - counts.iter().sum::<usize>();
    let mut fracs: Vec<(f64, usize)> = quotas
        .iter()
        .enumerate()
        .map(|(i, q)| (q - q.floor(), i))
        .collect();
    fracs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in fracs {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    // remainder bumps can locally break monotonicity; restore it by sorting
    counts.sort_unstable_by(|a, b| b.cmp(a));
    counts
}

/// Generate the full stream: disjoint per-task classes, Zipf-law train
/// counts over the global class rank, and per-class test/query/gallery
/// splits rendered from held-out instance seeds.
pub fn generate_task_stream(config: &StreamConfig, seed: u64) -> Result<TaskStream, DataError> {
    config.validate()?;
    let total_classes: usize = config.classes_per_task.iter().sum();
    let mut rng = util::derive_rng_named(seed, "stream", &[]);

    // rank r -> task in round-robin order subject to per-task quotas
    let mut remaining = config.classes_per_task.clone();
    let mut task_of_rank = Vec::with_capacity(total_classes);
    let mut cursor = 0usize;
    while task_of_rank.len() < total_classes {
        if remaining[cursor] > 0 {
            remaining[cursor] -= 1;
            task_of_rank.push(cursor);
        }
        cursor = (cursor + 1) % config.num_tasks;
    }

    // distinct attribute tuples; each task draws its shapes from a two-shape
    // family so tasks form distinct semantic domains over shared attributes
    let mut seen = std::collections::BTreeSet::new();
    let mut tuples: Vec<[usize; NUM_ATTRIBUTES]> = Vec::with_capacity(total_classes);
    let mut guard = 0usize;
    for r in 0..total_classes {
        let task = task_of_rank[r];
        loop {
            guard += 1;
            if guard > 100_000 {
                return Err(DataError::InvalidConfig(
                    "could not sample distinct class attribute tuples".into(),
                ));
            }
            let mut tuple: [usize; NUM_ATTRIBUTES] =
                std::array::from_fn(|i| rng.gen_range(0..ATTR_LEVELS[i]));
            tuple[0] = (2 * task + rng.gen_range(0..2usize)) % ATTR_LEVELS[0];
            if seen.insert(tuple) {
                tuples.push(tuple);
                break;
            }
        }
    }

    let counts = zipf_counts(total_classes, config.zipf_exponent, config.samples_total);
    let classes: Vec<ClassSpec> = (0..total_classes)
        .map(|r| ClassSpec {
            class_id: r as u64,
            task_id: task_of_rank[r],
            attribute_vector: tuples[r]
                .iter()
                .zip(ATTR_LEVELS.iter())
                .map(|(&l, &n)| (l as f64 + 0.5) / n as f64)
                .collect(),
            sample_count: counts[r],
        })
        .collect();

    let mut tasks: Vec<TaskDataset> = (0..config.num_tasks)
        .map(|t| TaskDataset {
            task_id: t,
            train: Vec::new(),
            test: Vec::new(),
            query: Vec::new(),
            gallery: Vec::new(),
        })
        .collect();

    let mut pair_id: u64 = 0;
    for spec in &classes {
        let n = spec.sample_count;
        let n_test = usize::from(n >= config.test_min_train);
        let n_query = ((config.query_rate * n as f64).round() as usize).max(1);
        let n_gallery = ((config.gallery_rate * n as f64).round() as usize).max(1);
        let task = &mut tasks[spec.task_id];
        let emit = |split: Split, count: usize, task: &mut TaskDataset, pair_id: &mut u64| {
            for _ in 0..count {
                let instance_seed = util::splitmix64(util::splitmix64(seed) ^ (*pair_id + 1));
                let pair = render_pair(spec, *pair_id, instance_seed, config.noise_level, config);
                *pair_id += 1;
                match split {
                    Split::Train => task.train.push(pair),
                    Split::Test => task.test.push(pair),
                    Split::Query => task.query.push(pair),
                    Split::Gallery => task.gallery.push(pair),
                }
            }
        };
        emit(Split::Train, n, task, &mut pair_id);
        emit(Split::Test, n_test, task, &mut pair_id);
        emit(Split::Query, n_query, task, &mut pair_id);
        emit(Split::Gallery, n_gallery, task, &mut pair_id);
    }

    Ok(TaskStream {
        config: config.clone(),
        seed,
        classes,
        tasks,
    })
}

// ── manifest I/O ───────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    kind: String,
    version: u32,
    seed: u64,
    num_classes: usize,
    num_pairs: usize,
    config: StreamConfig,
}

#[derive(Serialize, Deserialize)]
struct ClassRecord {
    kind: String,
    class_id: u64,
    task_id: usize,
    attribute_vector: Vec<f64>,
    sample_count: usize,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    kind: String,
    pair_id: u64,
    task_id: usize,
    class_id: u64,
    split: Split,
    caption: Vec<usize>,
    instance_seed: u64,
    noise_level: f64,
}

const MANIFEST_VERSION: u32 = 1;

/// Write the stream as line-delimited records: one header line, one line per
/// class, one line per pair (images stay inline generation specs).
pub fn write_manifest(stream: &TaskStream, path: &Path) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let num_pairs = stream
        .tasks
        .iter()
        .map(|t| t.train.len() + t.test.len() + t.query.len() + t.gallery.len())
        .sum();
    let header = HeaderRecord {
        kind: "header".into(),
        version: MANIFEST_VERSION,
        seed: stream.seed,
        num_classes: stream.classes.len(),
        num_pairs,
        config: stream.config.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).unwrap())?;
    for c in &stream.classes {
        let rec = ClassRecord {
            kind: "class".into(),
            class_id: c.class_id,
            task_id: c.task_id,
            attribute_vector: c.attribute_vector.clone(),
            sample_count: c.sample_count,
        };
        writeln!(out, "{}", serde_json::to_string(&rec).unwrap())?;
    }
    let mut pairs: Vec<(Split, &ImageTextPair)> = Vec::new();
    for t in &stream.tasks {
        for p in &t.train {
            pairs.push((Split::Train, p));
        }
        for p in &t.test {
            pairs.push((Split::Test, p));
        }
        for p in &t.query {
            pairs.push((Split::Query, p));
        }
        for p in &t.gallery {
            pairs.push((Split::Gallery, p));
        }
    }
    pairs.sort_by_key(|(_, p)| p.pair_id);
    for (split, p) in pairs {
        let rec = PairRecord {
            kind: "pair".into(),
            pair_id: p.pair_id,
            task_id: p.task_id,
            class_id: p.class_id,
            split,
            caption: p.caption.clone(),
            instance_seed: p.instance_seed,
            noise_level: p.noise_level,
        };
        writeln!(out, "{}", serde_json::to_string(&rec).unwrap())?;
    }
    Ok(())
}

/// Load a manifest, re-rendering images from the inline generation specs.
/// Every validation failure names the offending line (1-based).
pub fn load_manifest(path: &Path) -> Result<TaskStream, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (first_no, first) = lines.next().ok_or(DataError::Parse {
        line: 1,
        msg: "empty manifest".into(),
    })?;
    let first = first?;
    let header: HeaderRecord = serde_json::from_str(&first).map_err(|e| DataError::Parse {
        line: first_no + 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.kind != "header" {
        return Err(DataError::Parse {
            line: 1,
            msg: "first record must be the header".into(),
        });
    }
    if header.version != MANIFEST_VERSION {
        return Err(DataError::Parse {
            line: 1,
            msg: format!("unsupported manifest version {}", header.version),
        });
    }
    let config = header.config.clone();
    config.validate()?;

    let mut classes: Vec<ClassSpec> = Vec::new();
    let mut class_task: BTreeMap<u64, usize> = BTreeMap::new();
    let mut class_by_id: BTreeMap<u64, ClassSpec> = BTreeMap::new();
    let mut tasks: Vec<TaskDataset> = (0..config.num_tasks)
        .map(|t| TaskDataset {
            task_id: t,
            train: Vec::new(),
            test: Vec::new(),
            query: Vec::new(),
            gallery: Vec::new(),
        })
        .collect();
    let mut seen_pairs = std::collections::BTreeSet::new();

    for (no, line) in lines {
        let line_no = no + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: line_no,
                msg: format!("malformed record: {e}"),
            })?;
        match value.get("kind").and_then(|k| k.as_str()) {
            Some("class") => {
                let rec: ClassRecord =
                    serde_json::from_value(value).map_err(|e| DataError::Parse {
                        line: line_no,
                        msg: format!("malformed class record: {e}"),
                    })?;
                if rec.task_id >= config.num_tasks {
                    return Err(DataError::Validation {
                        line: line_no,
                        msg: format!("task id {} out of range", rec.task_id),
                    });
                }
                if class_task.insert(rec.class_id, rec.task_id).is_some() {
                    return Err(DataError::Validation {
                        line: line_no,
                        msg: format!("duplicate class id {}", rec.class_id),
                    });
                }
                if rec.sample_count == 0 {
                    return Err(DataError::Validation {
                        line: line_no,
                        msg: "class sample_count must be >= 1".into(),
                    });
                }
                let spec = ClassSpec {
                    class_id: rec.class_id,
                    task_id: rec.task_id,
                    attribute_vector: rec.attribute_vector,
                    sample_count: rec.sample_count,
                };
                class_by_id.insert(rec.class_id, spec.clone());
                classes.push(spec);
            }
            Some("pair") => {
                let rec: PairRecord =
                    serde_json::from_value(value).map_err(|e| DataError::Parse {
                        line: line_no,
                        msg: format!("malformed pair record (split missing or invalid?): {e}"),
                    })?;
                if rec.caption.len() > config.max_seq_len {
                    return Err(DataError::Validation {
                        line: line_no,
                        msg: format!(
                            "caption length {} exceeds max_seq_len {}",
                            rec.caption.len(),
                            config.max_seq_len
                        ),
                    });
                }
                if let Some(&t) = rec.caption.iter().find(|&&t| t >= config.vocab_size) {
                    return Err(DataError::Validation {
                        line: line_no,
                        msg: format!("token id {t} outside vocabulary"),
                    });
                }
                if !seen_pairs.insert(rec.pair_id) {
                    return Err(DataError::Validation {
                        line: line_no,
                        msg: format!("duplicate pair id {}", rec.pair_id),
                    });
                }
                let spec = class_by_id.get(&rec.class_id).ok_or(DataError::Validation {
                    line: line_no,
                    msg: format!("pair references unknown class {}", rec.class_id),
                })?;
                if spec.task_id != rec.task_id {
                    return Err(DataError::Validation {
                        line: line_no,
                        msg: format!(
                            "pair task {} disagrees with class task {}",
                            rec.task_id, spec.task_id
                        ),
                    });
                }
                let mut pair =
                    render_pair(spec, rec.pair_id, rec.instance_seed, rec.noise_level, &config);
                // the stored caption is authoritative (it may carry noise)
                pair.caption = rec.caption;
                let task = &mut tasks[rec.task_id];
                match rec.split {
                    Split::Train => task.train.push(pair),
                    Split::Test => task.test.push(pair),
                    Split::Query => task.query.push(pair),
                    Split::Gallery => task.gallery.push(pair),
                }
            }
            _ => {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: "record kind missing or unknown".into(),
                })
            }
        }
    }

    Ok(TaskStream {
        config,
        seed: header.seed,
        classes,
        tasks,
    })
}
