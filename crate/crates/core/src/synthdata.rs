//! Deterministic four-domain synthetic VQA suite.
//!
//! Each domain renders on its own background intensity band with its own
//! texture, so the domain is recoverable from pixel statistics alone. Every
//! answer is also recoverable from the pixels by [`solve_from_image`].

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{self, TokenSequence};

pub const IMAGE_SIZE: usize = 32;
const GRID_PATCH: usize = 8;
const NOISE: f64 = 0.02;
const ARITH_GROUP: std::ops::RangeInclusive<usize> = 1..=4;
const NEUTRAL_BACKGROUND: (f64, f64) = (0.0, 1.0);
const FOREGROUND_THRESHOLD: f64 = 0.35;
const ORDINALS: [&str; 4] = ["first", "second", "third", "fourth"];

/// Square grayscale image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::Shape {
                op: "image",
                left: vec![size, size],
                right: vec![pixels.len()],
            });
        }
        Ok(Self { size, pixels })
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Self {
            size,
            pixels: vec![value; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.size + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.pixels[r * self.size + c] = v;
    }

    /// Flattened non-overlapping patches, one row per patch in raster order.
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        if patch == 0 || self.size % patch != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {patch}",
                self.size
            )));
        }
        let per_side = self.size / patch;
        let mut data = Vec::with_capacity(self.pixels.len());
        for pr in 0..per_side {
            for pc in 0..per_side {
                for r in 0..patch {
                    let row = (pr * patch + r) * self.size + pc * patch;
                    data.extend_from_slice(&self.pixels[row..row + patch]);
                }
            }
        }
        Tensor::new(vec![per_side * per_side, patch * patch], data)
    }

    pub fn median(&self) -> f64 {
        let mut v = self.pixels.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Count,
    Anomaly,
    Arith,
    Chart,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    DiagonalStripes,
    HorizontalStripes,
    Checker,
    VerticalGrid,
}

impl Texture {
    fn offset(self, r: usize, c: usize) -> f64 {
        match self {
            Texture::Flat => 0.0,
            Texture::DiagonalStripes => {
                if (r + c) % 4 < 2 {
                    0.04
                } else {
                    -0.04
                }
            }
            Texture::HorizontalStripes => {
                if r % 2 == 0 {
                    0.03
                } else {
                    -0.03
                }
            }
            Texture::Checker => {
                if (r / 2 + c / 2) % 2 == 0 {
                    0.025
                } else {
                    -0.025
                }
            }
            Texture::VerticalGrid => {
                if c % 4 == 0 {
                    -0.05
                } else {
                    0.0
                }
            }
        }
    }
}

/// Rendering and question/answer rules for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: DomainId,
    pub kind: DomainKind,
    pub background: (f64, f64),
    pub texture: Texture,
    pub question_templates: Vec<String>,
    /// Every answer the generator can emit, spelled out.
    pub answer_space: Vec<String>,
}

impl DomainSpec {
    pub fn builtin(kind: DomainKind) -> Self {
        let (index, name, background, texture, questions): (_, _, _, _, &[&str]) = match kind {
            DomainKind::Count => (
                0,
                "count",
                (0.05, 0.15),
                Texture::DiagonalStripes,
                &["how many blobs are there ?", "count the blobs ?"],
            ),
            DomainKind::Anomaly => (
                1,
                "anomaly",
                (0.30, 0.40),
                Texture::HorizontalStripes,
                &["is there an anomaly ?", "is there an odd shape ?"],
            ),
            DomainKind::Arith => (
                2,
                "arith",
                (0.55, 0.65),
                Texture::Checker,
                &["what is the sum of dots ?", "add the dot groups ?"],
            ),
            DomainKind::Chart => (
                3,
                "chart",
                (0.80, 0.90),
                Texture::VerticalGrid,
                &["which bar is tallest ?", "which bar is highest ?"],
            ),
        };
        let answer_space = match kind {
            DomainKind::Count => (1..=9).map(|n| n.to_string()).collect(),
            DomainKind::Anomaly => vec!["yes".into(), "no".into()],
            DomainKind::Arith => (2 * ARITH_GROUP.start()..=2 * ARITH_GROUP.end())
                .map(|n| format!("the sum is {n}"))
                .collect(),
            DomainKind::Chart => ORDINALS.iter().map(|o| format!("the {o} bar")).collect(),
        };
        Self {
            id: DomainId::new(index, name),
            kind,
            background,
            texture,
            question_templates: questions.iter().map(|s| s.to_string()).collect(),
            answer_space,
        }
    }

    /// COUNT, ANOMALY, ARITH, CHART in registry order.
    pub fn builtin_suite() -> Vec<DomainSpec> {
        [
            DomainKind::Count,
            DomainKind::Anomaly,
            DomainKind::Arith,
            DomainKind::Chart,
        ]
        .into_iter()
        .map(Self::builtin)
        .collect()
    }

    /// The same domain drawn in the shared house style: no texture and a
    /// background anywhere in [0, 1], so both contrast polarities occur.
    pub fn neutral(&self) -> DomainSpec {
        DomainSpec {
            background: NEUTRAL_BACKGROUND,
            texture: Texture::Flat,
            ..self.clone()
        }
    }

    /// Exact-match accuracy of a uniform guess over the answer space.
    pub fn random_answer_baseline(&self) -> f64 {
        1.0 / self.answer_space.len() as f64
    }

    /// True when gold answers span several tokens.
    pub fn generative(&self) -> bool {
        matches!(self.kind, DomainKind::Arith | DomainKind::Chart)
    }
}

/// One `(image, question, answer, domain)` record.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaSample {
    pub image: Image,
    pub question: TokenSequence,
    pub answer: TokenSequence,
    pub domain: DomainId,
    pub seed: u64,
}

struct Canvas {
    image: Image,
    foreground: f64,
}

impl Canvas {
    fn new(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Self {
        let (lo, hi) = spec.background;
        let bg = rng.gen_range(lo..hi);
        let foreground = if bg < 0.5 {
            rng.gen_range(0.85..1.0)
        } else {
            rng.gen_range(0.0..0.15)
        };
        let mut image = Image::filled(IMAGE_SIZE, 0.0);
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                let v = bg + spec.texture.offset(r, c) + rng.gen_range(-NOISE..NOISE);
                image.set(r, c, v.clamp(0.0, 1.0));
            }
        }
        Self { image, foreground }
    }

    fn paint(&mut self, r: usize, c: usize, rng: &mut ChaCha8Rng) {
        let v = (self.foreground + rng.gen_range(-NOISE..NOISE)).clamp(0.0, 1.0);
        self.image.set(r, c, v);
    }

    fn rect(&mut self, r0: usize, c0: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) {
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                self.paint(r, c, rng);
            }
        }
    }

    /// Square of side `side` at a random offset inside grid cell `cell`,
    /// keeping a one-pixel margin so neighbouring cells never touch.
    fn square_in_cell(&mut self, cell: usize, side: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let per_side = IMAGE_SIZE / GRID_PATCH;
        let (pr, pc) = (cell / per_side, cell % per_side);
        let r0 = pr * GRID_PATCH + rng.gen_range(1..=GRID_PATCH - side - 1);
        let c0 = pc * GRID_PATCH + rng.gen_range(1..=GRID_PATCH - side - 1);
        self.rect(r0, c0, side, side, rng);
        (r0, c0)
    }
}

/// Renders the sample for `seed`; a pure function of `(spec, seed)`.
pub fn gen_sample(spec: &DomainSpec, seed: u64) -> Result<VqaSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = Canvas::new(spec, &mut rng);
    let template = &spec.question_templates[rng.gen_range(0..spec.question_templates.len())];
    let cells = (IMAGE_SIZE / GRID_PATCH).pow(2);
    let answer = match spec.kind {
        DomainKind::Count => {
            let n = rng.gen_range(1..=9);
            for cell in sample(&mut rng, cells, n) {
                let side = rng.gen_range(3..=4);
                canvas.square_in_cell(cell, side, &mut rng);
            }
            n.to_string()
        }
        DomainKind::Anomaly => {
            let m = rng.gen_range(2..=4);
            let odd = rng.gen_bool(0.5);
            let odd_slot = rng.gen_range(0..m);
            for (slot, cell) in sample(&mut rng, cells, m).into_iter().enumerate() {
                // The odd object is a 3x3 square among 2x2 ones.
                let side = if odd && slot == odd_slot { 3 } else { 2 };
                canvas.square_in_cell(cell, side, &mut rng);
            }
            if odd { "yes" } else { "no" }.to_string()
        }
        DomainKind::Arith => {
            let a = rng.gen_range(ARITH_GROUP);
            let b = rng.gen_range(ARITH_GROUP);
            let per_side = IMAGE_SIZE / GRID_PATCH;
            let left: Vec<usize> = (0..cells).filter(|c| c % per_side < per_side / 2).collect();
            let right: Vec<usize> = (0..cells).filter(|c| c % per_side >= per_side / 2).collect();
            for i in sample(&mut rng, left.len(), a) {
                canvas.square_in_cell(left[i], 2, &mut rng);
            }
            for i in sample(&mut rng, right.len(), b) {
                canvas.square_in_cell(right[i], 2, &mut rng);
            }
            format!("the sum is {}", a + b)
        }
        DomainKind::Chart => {
            // One bar per patch column.
            let k = ORDINALS.len();
            let tallest = rng.gen_range(0..k);
            let mut heights: Vec<usize> = (0..k).map(|_| rng.gen_range(4..=18)).collect();
            let runner_up = heights
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != tallest)
                .map(|(_, h)| *h)
                .max()
                .unwrap_or(0);
            heights[tallest] = runner_up + rng.gen_range(6..=10);
            let slot = IMAGE_SIZE as f64 / k as f64;
            for (i, h) in heights.iter().enumerate() {
                let c0 = (i as f64 * slot + (slot - 4.0) / 2.0).round() as usize;
                canvas.rect(IMAGE_SIZE - h, c0, *h, 4, &mut rng);
            }
            format!("the {} bar", ORDINALS[tallest])
        }
    };
    Ok(VqaSample {
        image: canvas.image,
        question: vocab::encode(template)?,
        answer: vocab::encode(&answer)?,
        domain: spec.id.clone(),
        seed,
    })
}

struct Component {
    pixels: usize,
    min_r: usize,
    max_r: usize,
    min_c: usize,
    max_c: usize,
}

impl Component {
    #[cfg(test)]
    fn centroid_col(&self) -> f64 {
        (self.min_c + self.max_c) as f64 / 2.0
    }
}

fn components(image: &Image) -> Vec<Component> {
    let n = image.size();
    let bg = image.median();
    let fg: Vec<bool> = image
        .pixels()
        .iter()
        .map(|p| (p - bg).abs() > FOREGROUND_THRESHOLD)
        .collect();
    let mut seen = vec![false; n * n];
    let mut out = Vec::new();
    for start in 0..n * n {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Component {
            pixels: 0,
            min_r: usize::MAX,
            max_r: 0,
            min_c: usize::MAX,
            max_c: 0,
        };
        while let Some(p) = stack.pop() {
            let (r, c) = (p / n, p % n);
            comp.pixels += 1;
            comp.min_r = comp.min_r.min(r);
            comp.max_r = comp.max_r.max(r);
            comp.min_c = comp.min_c.min(c);
            comp.max_c = comp.max_c.max(c);
            let mut push = |q: usize| {
                if fg[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                push(p - n);
            }
            if r + 1 < n {
                push(p + n);
            }
            if c > 0 {
                push(p - 1);
            }
            if c + 1 < n {
                push(p + 1);
            }
        }
        out.push(comp);
    }
    out
}

/// Closed-form answer read back from pixels alone.
pub fn solve_from_image(kind: DomainKind, image: &Image) -> Result<TokenSequence> {
    let comps = components(image);
    let text = match kind {
        DomainKind::Count => comps.len().to_string(),
        DomainKind::Anomaly => {
            let smallest = comps.iter().map(|c| c.pixels).min().unwrap_or(0);
            let odd = comps.iter().any(|c| c.pixels > smallest);
            if odd { "yes" } else { "no" }.to_string()
        }
        DomainKind::Arith => format!("the sum is {}", comps.len()),
        DomainKind::Chart => {
            let mut bars: Vec<&Component> = comps.iter().collect();
            bars.sort_by_key(|c| c.min_c);
            let tallest = bars
                .iter()
                .enumerate()
                .max_by_key(|(_, c)| c.max_r - c.min_r)
                .map(|(i, _)| i)
                .ok_or_else(|| Error::State("chart image without bars".into()))?;
            let ordinal = ORDINALS
                .get(tallest)
                .ok_or_else(|| Error::State(format!("bar index {tallest} out of range")))?;
            format!("the {ordinal} bar")
        }
    };
    vocab::encode(&text)
}

/// Bijective 64-bit mixer; distinct inputs give distinct seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample seed for item `i` of domain `domain` under `master_seed`.
pub fn sample_seed(master_seed: u64, domain: usize, i: usize) -> u64 {
    splitmix64(master_seed.wrapping_add(((domain as u64) << 32) | i as u64))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<VqaSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &VqaSample> {
        self.samples.iter()
    }

    pub fn for_domain(&self, index: usize) -> Dataset {
        self.filter(|s| s.domain.index == index)
    }

    pub fn without_domain(&self, index: usize) -> Dataset {
        self.filter(|s| s.domain.index != index)
    }

    pub fn filter(&self, keep: impl Fn(&VqaSample) -> bool) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    /// First `n` samples of each domain, preserving order.
    pub fn take_per_domain(&self, n: usize) -> Dataset {
        let mut counts = std::collections::BTreeMap::<usize, usize>::new();
        let mut samples = Vec::new();
        for s in &self.samples {
            let c = counts.entry(s.domain.index).or_insert(0);
            if *c < n {
                *c += 1;
                samples.push(s.clone());
            }
        }
        Dataset { samples }
    }

    pub fn domain_counts(&self) -> std::collections::BTreeMap<usize, usize> {
        let mut out = std::collections::BTreeMap::new();
        for s in &self.samples {
            *out.entry(s.domain.index).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    /// `(train, val, test)` counts for `n` items.
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let total = self.train + self.val + self.test;
        if (total - 1.0).abs() > 1e-9 || [self.train, self.val, self.test].iter().any(|r| *r < 0.0) {
            return Err(Error::Config(format!(
                "split ratios must be non-negative and sum to 1, got {total}"
            )));
        }
        let train = (n as f64 * self.train).round() as usize;
        let val = ((n as f64 * self.val).round() as usize).min(n - train);
        Ok((train, val, n - train - val))
    }
}

/// Stratified train/val/test generation; item `i` of every domain uses
/// [`sample_seed`], and each split takes a disjoint index range.
pub fn gen_dataset(
    specs: &[DomainSpec],
    n_per_domain: usize,
    ratios: SplitRatios,
    master_seed: u64,
) -> Result<Splits> {
    let (n_train, n_val, _) = ratios.counts(n_per_domain)?;
    let mut splits = Splits {
        train: Dataset::default(),
        val: Dataset::default(),
        test: Dataset::default(),
    };
    for spec in specs {
        for i in 0..n_per_domain {
            let s = gen_sample(spec, sample_seed(master_seed, spec.id.index, i))?;
            let target = if i < n_train {
                &mut splits.train
            } else if i < n_train + n_val {
                &mut splits.val
            } else {
                &mut splits.test
            };
            target.samples.push(s);
        }
    }
    Ok(splits)
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    domain: String,
    domain_index: usize,
    seed: u64,
    question_tokens: Vec<usize>,
    answer_tokens: Vec<usize>,
    image_base64_rows: Vec<String>,
}

/// Writes one JSON object per line; pixel rows are base64 of little-endian `f64`s.
pub fn export_dataset(data: &Dataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &data.samples {
        let n = s.image.size();
        let rows = (0..n)
            .map(|r| {
                let bytes: Vec<u8> = s.image.pixels()[r * n..(r + 1) * n]
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect();
                B64.encode(bytes)
            })
            .collect();
        let rec = SampleRecord {
            domain: s.domain.name.clone(),
            domain_index: s.domain.index,
            seed: s.seed,
            question_tokens: s.question.ids.clone(),
            answer_tokens: s.answer.ids.clone(),
            image_base64_rows: rows,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn import_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let n = rec.image_base64_rows.len();
        let mut pixels = Vec::with_capacity(n * n);
        for row in &rec.image_base64_rows {
            let bytes = B64.decode(row).map_err(|e| parse_err(e.to_string()))?;
            if bytes.len() != n * 8 {
                return Err(parse_err(format!("row has {} bytes, expected {}", bytes.len(), n * 8)));
            }
            pixels.extend(
                bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))),
            );
        }
        samples.push(VqaSample {
            image: Image::new(n, pixels).map_err(|e| parse_err(e.to_string()))?,
            question: TokenSequence::new(rec.question_tokens),
            answer: TokenSequence::new(rec.answer_tokens),
            domain: DomainId::new(rec.domain_index, rec.domain),
            seed: rec.seed,
        });
    }
    Ok(Dataset { samples })
}

/// Sidecar describing how a dataset directory was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub n_per_domain: usize,
    pub ratios: SplitRatios,
    pub domains: Vec<String>,
    pub train: String,
    pub val: String,
    pub test: String,
    pub counts: [usize; 3],
}

impl DatasetManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load_splits(&self, dir: &Path) -> Result<Splits> {
        Ok(Splits {
            train: import_dataset(&dir.join(&self.train))?,
            val: import_dataset(&dir.join(&self.val))?,
            test: import_dataset(&dir.join(&self.test))?,
        })
    }
}

/// Generates and writes all three splits plus the manifest into `dir`.
pub fn write_dataset_dir(
    dir: &Path,
    specs: &[DomainSpec],
    n_per_domain: usize,
    ratios: SplitRatios,
    master_seed: u64,
) -> Result<DatasetManifest> {
    let splits = gen_dataset(specs, n_per_domain, ratios, master_seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    export_dataset(&splits.train, &dir.join("train.jsonl"))?;
    export_dataset(&splits.val, &dir.join("val.jsonl"))?;
    export_dataset(&splits.test, &dir.join("test.jsonl"))?;
    let manifest = DatasetManifest {
        master_seed,
        n_per_domain,
        ratios,
        domains: specs.iter().map(|s| s.id.name.clone()).collect(),
        train: "train.jsonl".into(),
        val: "val.jsonl".into(),
        test: "test.jsonl".into(),
        counts: [splits.train.len(), splits.val.len(), splits.test.len()],
    };
    let path = dir.join(DatasetManifest::FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
