//! Procedural stand-in for an identity/attribute face dataset.
//!
//! Every subject owns a seeded low-frequency template (its identity). The binary
//! privacy attribute is a fixed function of the subject and is painted on top
//! through two cues: a global tint of channel 0 and a stripe band along the
//! bottom rows (horizontal stripes for attribute 0, vertical for 1). Because the
//! cues are separate from the template, a subject can be re-rendered with the
//! opposite attribute while everything else stays pixel-identical.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const TDS1_MAGIC: &[u8; 4] = b"TDS1";
const METADATA_FILE: &str = "metadata.json";
const SAMPLES_FILE: &str = "samples.tds1";

/// `(channels, height, width)`.
pub type ImageShape = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `C×H×W`, row-major, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub utility_label: usize,
    pub privacy_label: u8,
    /// Seed of the per-sample jitter and noise draw.
    pub render_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_subjects: usize,
    /// Attribute of each subject, indexed by subject id.
    pub attribute_map: Vec<u8>,
    /// Relative subject frequencies; uniform when `None`.
    #[serde(default)]
    pub subject_weights: Option<Vec<f64>>,
    /// Attribute prior `(P(p=0), P(p=1))`.
    pub prior: [f64; 2],
    pub image_shape: ImageShape,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f32,
    #[serde(default = "default_max_shift")]
    pub max_shift: usize,
    #[serde(default = "default_tint")]
    pub tint: f32,
}

fn default_noise_std() -> f32 {
    0.12
}

fn default_max_shift() -> usize {
    2
}

fn default_tint() -> f32 {
    0.04
}

impl Default for DatasetSpec {
    fn default() -> Self {
        // Subjects 5, 6, 7 of every block of eight carry attribute 1: 10 vs 6.
        let attribute_map: Vec<u8> = (0..16).map(|u| u8::from(u % 8 >= 5)).collect();
        let mut spec = Self {
            num_subjects: 16,
            attribute_map,
            subject_weights: None,
            prior: [0.0, 0.0],
            image_shape: (3, 32, 32),
            train_size: 4096,
            test_size: 1024,
            seed: 7,
            noise_std: default_noise_std(),
            max_shift: default_max_shift(),
            tint: default_tint(),
        };
        spec.prior = spec.implied_prior();
        spec
    }
}

impl DatasetSpec {
    /// Build a spec whose prior is derived from the attribute map.
    pub fn with_attribute_map(attribute_map: Vec<u8>) -> Self {
        let mut spec = Self {
            num_subjects: attribute_map.len(),
            attribute_map,
            ..Self::default()
        };
        spec.prior = spec.implied_prior();
        spec
    }

    pub fn attribute_of(&self, subject: usize) -> u8 {
        self.attribute_map[subject]
    }

    fn weights(&self) -> Vec<f64> {
        match &self.subject_weights {
            Some(w) => w.clone(),
            None => vec![1.0; self.num_subjects],
        }
    }

    /// Attribute frequency implied by subject frequencies and the attribute map.
    pub fn implied_prior(&self) -> [f64; 2] {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        let mut prior = [0.0; 2];
        for (u, wu) in w.iter().enumerate() {
            if let Some(&a) = self.attribute_map.get(u) {
                prior[usize::from(a.min(1))] += wu / total;
            }
        }
        prior
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_subjects < 2 {
            return Err(Error::config(format!("need at least 2 subjects, got {}", self.num_subjects)));
        }
        if self.attribute_map.len() != self.num_subjects {
            return Err(Error::config(format!(
                "attribute map covers {} subjects, expected {}",
                self.attribute_map.len(),
                self.num_subjects
            )));
        }
        if self.attribute_map.iter().any(|&a| a > 1) {
            return Err(Error::config("attribute map values must be 0 or 1"));
        }
        if let Some(w) = &self.subject_weights {
            if w.len() != self.num_subjects || w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::config("subject weights must be positive, one per subject"));
            }
        }
        if self.train_size < self.num_subjects || self.test_size < self.num_subjects {
            return Err(Error::config(format!(
                "split sizes ({}, {}) must be at least the number of subjects ({})",
                self.train_size, self.test_size, self.num_subjects
            )));
        }
        let (c, h, w) = self.image_shape;
        if c == 0 || h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::config(format!(
                "image shape {:?} must have C>0 and H, W multiples of 4 and at least 8",
                self.image_shape
            )));
        }
        if (self.prior[0] + self.prior[1] - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("prior {:?} does not sum to 1", self.prior)));
        }
        let implied = self.implied_prior();
        if (implied[0] - self.prior[0]).abs() > 1e-9 {
            return Err(Error::config(format!(
                "prior {:?} disagrees with subject frequencies, which imply {:?}",
                self.prior, implied
            )));
        }
        if !(self.noise_std >= 0.0) || !(self.tint >= 0.0) {
            return Err(Error::config("noise_std and tint must be non-negative"));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        let (c, h, w) = self.image_shape;
        c * h * w
    }
}

/// An immutable list of samples sharing one image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_shape: ImageShape,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stack the samples at `indices` into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        Tensor::stack(self.image_shape, indices.iter().map(|&i| self.samples[i].image.as_slice()))
    }

    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            image_shape: self.image_shape,
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Test => 0x7465_7374_0000_0000,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// SplitMix64 finalizer, used to derive independent seeds from a base seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Render seed of sample `index` in `split`.
pub fn sample_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    mix_seed(mix_seed(dataset_seed, split.tag()), index as u64)
}

/// Precomputed subject templates plus the cue renderer.
#[derive(Debug, Clone)]
pub struct Renderer {
    spec: DatasetSpec,
    templates: Arc<Vec<Vec<f32>>>,
}

impl Renderer {
    pub fn new(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let templates = (0..spec.num_subjects)
            .map(|u| subject_template(spec, u))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            templates: Arc::new(templates),
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    /// Render `subject` with its attribute cues painted for `attribute`.
    pub fn render(&self, subject: usize, attribute: u8, noise_seed: u64) -> Result<Sample> {
        if subject >= self.spec.num_subjects {
            return Err(Error::domain(format!(
                "subject {subject} out of range [0, {})",
                self.spec.num_subjects
            )));
        }
        if attribute > 1 {
            return Err(Error::domain(format!("attribute {attribute} is not binary")));
        }
        let (c, h, w) = self.spec.image_shape;
        let template = &self.templates[subject];
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let s = self.spec.max_shift as i64;
        let dy = rng.gen_range(-s..=s);
        let dx = rng.gen_range(-s..=s);
        let gain: f32 = rng.gen_range(0.85..1.15);
        let noise = Normal::new(0.0f32, self.spec.noise_std.max(1e-12)).expect("valid std");
        let band = stripe_band(h);
        let mut image = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
                    let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
                    let mut v = 0.5 + gain * (template[(ch * h + sy) * w + sx] - 0.5);
                    if band.contains(&y) {
                        v = stripe_value(attribute, y, x);
                    }
                    if ch == 0 {
                        v += if attribute == 1 { self.spec.tint } else { -self.spec.tint };
                    }
                    let n = if self.spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    image[(ch * h + y) * w + x] = (v + n).clamp(0.0, 1.0);
                }
            }
        }
        Ok(Sample {
            image,
            utility_label: subject,
            privacy_label: attribute,
            render_seed: noise_seed,
        })
    }

    /// Render `subject` with its true attribute.
    pub fn render_standard(&self, subject: usize, noise_seed: u64) -> Result<Sample> {
        let a = *self
            .spec
            .attribute_map
            .get(subject)
            .ok_or_else(|| Error::domain(format!("subject {subject} out of range")))?;
        self.render(subject, a, noise_seed)
    }
}

/// Rows carrying the stripe cue.
pub fn stripe_band(h: usize) -> std::ops::Range<usize> {
    h - h / 4..h
}

/// Whether pixel `(ch, y, x)` may depend on the attribute. Channel 0 carries
/// the global tint, the stripe band spans every channel.
pub fn is_cue_pixel(ch: usize, y: usize, h: usize) -> bool {
    ch == 0 || stripe_band(h).contains(&y)
}

fn stripe_value(attribute: u8, y: usize, x: usize) -> f32 {
    let phase = if attribute == 0 { y } else { x };
    if (phase / 2) % 2 == 0 {
        0.75
    } else {
        0.25
    }
}

fn subject_template(spec: &DatasetSpec, subject: usize) -> Vec<f32> {
    let (c, h, w) = spec.image_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed ^ 0x5eed_7e3f, subject as u64));
    let mut img = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let base: f32 = rng.gen_range(0.35..0.65);
        // a few soft blobs plus a coarse 4×4 cell pattern
        let blobs: Vec<(f32, f32, f32, f32)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(0.0..h as f32),
                    rng.gen_range(0.0..w as f32),
                    rng.gen_range(2.5..7.0),
                    rng.gen_range(-0.3..0.3),
                )
            })
            .collect();
        let cells: Vec<f32> = (0..16).map(|_| rng.gen_range(-0.12..0.12)).collect();
        for y in 0..h {
            for x in 0..w {
                let mut v = base;
                for &(cy, cx, sigma, amp) in &blobs {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                v += cells[(y * 4 / h) * 4 + x * 4 / w];
                img[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Render `subject` with its attribute cues forced to `forced_attribute`.
pub fn render_with_attribute(
    subject: usize,
    forced_attribute: u8,
    spec: &DatasetSpec,
    noise_seed: u64,
) -> Result<Sample> {
    Renderer::new(spec)?.render(subject, forced_attribute, noise_seed)
}

fn allocate_subjects(spec: &DatasetSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let w = spec.weights();
    let total: f64 = w.iter().sum();
    let k = spec.num_subjects;
    // every subject appears at least once; the rest by largest remainder
    let extra = n - k;
    let quotas: Vec<f64> = w.iter().map(|wu| wu / total * extra as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = extra - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &u in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[u] += 1;
        remaining -= 1;
    }
    let mut subjects: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(u, &c)| std::iter::repeat(u).take(c + 1))
        .collect();
    subjects.shuffle(rng);
    subjects
}

fn generate_split(renderer: &Renderer, split: Split, n: usize) -> Result<Dataset> {
    let spec = renderer.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, split.tag() ^ 0xa11c));
    let subjects = allocate_subjects(spec, n, &mut rng);
    let samples = subjects
        .into_iter()
        .enumerate()
        .map(|(i, u)| renderer.render_standard(u, sample_seed(spec.seed, split, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        image_shape: spec.image_shape,
        samples,
    })
}

/// Generate the train and test splits described by `spec`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    let renderer = Renderer::new(spec)?;
    Ok((
        generate_split(&renderer, Split::Train, spec.train_size)?,
        generate_split(&renderer, Split::Test, spec.test_size)?,
    ))
}

/// Normalized histogram of privacy labels.
pub fn empirical_prior(samples: &[Sample]) -> Result<[f64; 2]> {
    if samples.is_empty() {
        return Err(Error::domain("empirical prior of an empty sample list"));
    }
    let ones = samples.iter().filter(|s| s.privacy_label == 1).count() as f64;
    let n = samples.len() as f64;
    Ok([(n - ones) / n, ones / n])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMetadata {
    format: String,
    split: String,
    count: usize,
    spec: DatasetSpec,
    prior: [f64; 2],
    empirical_prior: [f64; 2],
}

/// Write one split as a directory holding `metadata.json` and `samples.tds1`.
pub fn export_dataset(dir: &Path, spec: &DatasetSpec, split: Split, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMetadata {
        format: "TDS1".into(),
        split: split.name().into(),
        count: data.len(),
        spec: spec.clone(),
        prior: spec.prior,
        empirical_prior: empirical_prior(&data.samples)?,
    };
    fs::write(dir.join(METADATA_FILE), serde_json::to_vec_pretty(&meta)?)?;
    let file = fs::File::create(dir.join(SAMPLES_FILE))?;
    let mut out = BufWriter::new(file);
    write_tds1(&mut out, data)?;
    out.flush()?;
    Ok(())
}

/// Serialize samples in the TDS1 binary layout.
pub fn write_tds1<W: Write>(out: &mut W, data: &Dataset) -> Result<()> {
    let (c, h, w) = data.image_shape;
    let dim = |v: usize, name: &'static str| {
        u16::try_from(v).map_err(|_| Error::format(name, format!("{v} does not fit in u16")))
    };
    out.write_all(TDS1_MAGIC)?;
    out.write_all(&(data.len() as u32).to_le_bytes())?;
    for (v, name) in [(c, "channels"), (h, "height"), (w, "width")] {
        out.write_all(&dim(v, name)?.to_le_bytes())?;
    }
    for s in &data.samples {
        for px in &s.image {
            out.write_all(&px.to_le_bytes())?;
        }
        out.write_all(&dim(s.utility_label, "utility_label")?.to_le_bytes())?;
        out.write_all(&[s.privacy_label])?;
    }
    Ok(())
}

/// Parse a TDS1 stream. Render seeds are not stored and come back as zero.
pub fn read_tds1<R: Read>(input: &mut R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::format("magic", "file too short"))?;
    if &magic != TDS1_MAGIC {
        return Err(Error::format("magic", format!("expected TDS1, found {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    let mut u16buf = [0u8; 2];
    input
        .read_exact(&mut u32buf)
        .map_err(|_| Error::format("count", "truncated header"))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        input
            .read_exact(&mut u16buf)
            .map_err(|_| Error::format("shape", "truncated header"))?;
        *d = u16::from_le_bytes(u16buf) as usize;
    }
    let per = dims[0] * dims[1] * dims[2];
    let mut pixels = vec![0u8; per * 4];
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        input
            .read_exact(&mut pixels)
            .map_err(|_| Error::format("pixels", format!("truncated at sample {i}")))?;
        let image = pixels
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        input
            .read_exact(&mut u16buf)
            .map_err(|_| Error::format("utility_label", format!("truncated at sample {i}")))?;
        let mut p = [0u8; 1];
        input
            .read_exact(&mut p)
            .map_err(|_| Error::format("privacy_label", format!("truncated at sample {i}")))?;
        samples.push(Sample {
            image,
            utility_label: u16::from_le_bytes(u16buf) as usize,
            privacy_label: p[0],
            render_seed: 0,
        });
    }
    Ok(Dataset {
        image_shape: (dims[0], dims[1], dims[2]),
        samples,
    })
}

/// Load a split directory written by [`export_dataset`]. Render seeds are
/// re-derived from the recorded spec seed and split.
pub fn import_dataset(dir: &Path) -> Result<(DatasetSpec, Dataset)> {
    let meta: DatasetMetadata = serde_json::from_slice(&fs::read(dir.join(METADATA_FILE))?)?;
    let file = fs::File::open(dir.join(SAMPLES_FILE))?;
    let mut data = read_tds1(&mut BufReader::new(file))?;
    if data.image_shape != meta.spec.image_shape {
        return Err(Error::format(
            "shape",
            format!("binary shape {:?} disagrees with metadata {:?}", data.image_shape, meta.spec.image_shape),
        ));
    }
    let split = match meta.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(Error::format("split", format!("unknown split `{other}`"))),
    };
    for (i, s) in data.samples.iter_mut().enumerate() {
        s.render_seed = sample_seed(meta.spec.seed, split, i);
    }
    Ok((meta.spec, data))
}
