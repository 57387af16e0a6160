//! Synthetic phantom cohort with a known joint law.
//!
//! Each subject draws sex uniformly and age uniformly on the configured range,
//! independently. The image is a centred disk whose radius grows linearly with
//! age, plus an intensity offset on the left half (class 0) or right half
//! (class 1), plus i.i.d. Gaussian pixel noise, clamped to [-1, 1].
//!
//! File layout (`JDDS`, little-endian):
//!
//! ```text
//! "JDDS" | u32 version | u32 header_len | header (JSON) | u32 record_count
//! per record: u64 subject_id | u8 split | f64 age | u8 sex | f32 image[side * side]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::joint::{AgeRange, PatientRecord};

pub const DATASET_MAGIC: &[u8; 4] = b"JDDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub image_side: usize,
    pub age_range: AgeRange,
    pub radius_min: f64,
    pub radius_max: f64,
    pub asymmetry: f64,
    pub pixel_noise: f64,
    pub foreground: f64,
    pub background: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            age_range: AgeRange::default(),
            radius_min: 2.0,
            radius_max: 6.0,
            asymmetry: 0.4,
            pixel_noise: 0.05,
            foreground: 0.8,
            background: -0.8,
            seed: 0,
        }
    }
}

/// The generator renders exactly two categories.
pub const GENERATOR_CATEGORIES: usize = 2;

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.age_range.validate()?;
        if self.image_side < 2 {
            return Err(invalid("image side must be at least 2"));
        }
        if !(0.0 < self.radius_min && self.radius_min < self.radius_max) {
            return Err(invalid("need 0 < radius_min < radius_max"));
        }
        if self.radius_max >= self.image_side as f64 / 2.0 {
            return Err(invalid("radius_max must be below half the image side"));
        }
        if !(self.pixel_noise >= 0.0) || !(self.asymmetry >= 0.0) {
            return Err(invalid("noise and asymmetry must be non-negative"));
        }
        if !(self.background < self.foreground)
            || !(-1.0..=1.0).contains(&self.background)
            || !(-1.0..=1.0).contains(&self.foreground)
        {
            return Err(invalid("need -1 <= background < foreground <= 1"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn radius_for_age(&self, age: f64) -> f64 {
        let r = &self.age_range;
        self.radius_min + (age - r.lo) / (r.hi - r.lo) * (self.radius_max - self.radius_min)
    }

    pub fn age_for_radius(&self, radius: f64) -> f64 {
        let r = &self.age_range;
        r.lo + (radius - self.radius_min) / (self.radius_max - self.radius_min) * (r.hi - r.lo)
    }

    /// Intensity threshold separating disk from background in either half.
    fn threshold(&self) -> f64 {
        0.5 * (self.foreground + self.background) + 0.5 * self.asymmetry
    }
}

/// Noise-free render plus optional pixel noise, clamped to [-1, 1].
pub fn render<R: Rng + ?Sized>(age: f64, sex: usize, cfg: &GeneratorConfig, rng: &mut R) -> Vec<f32> {
    let side = cfg.image_side;
    let c = (side as f64 - 1.0) / 2.0;
    let r = cfg.radius_for_age(age);
    let noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).unwrap();
    let mut img = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            let mut v = if dy * dy + dx * dx <= r * r {
                cfg.foreground
            } else {
                cfg.background
            };
            let left = x < side / 2;
            if (sex == 0 && left) || (sex == 1 && !left) {
                v += cfg.asymmetry;
            }
            if cfg.pixel_noise > 0.0 {
                v += noise.sample(rng);
            }
            img.push(v.clamp(-1.0, 1.0) as f32);
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Unassigned,
    Train,
    Validation,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Unassigned => 0,
            Split::Train => 1,
            Split::Validation => 2,
            Split::Test => 3,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => Split::Unassigned,
            1 => Split::Train,
            2 => Split::Validation,
            3 => Split::Test,
            _ => return Err(Error::Format(format!("unknown split tag {t}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub subject_id: u64,
    pub split: Split,
    pub record: PatientRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub records: Vec<DatasetRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    generator: GeneratorConfig,
    records: usize,
}

fn subject_rng(seed: u64, subject: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject);
    rng
}

/// One record per subject; subject `i` is drawn from its own random stream.
pub fn generate_dataset(n_subjects: usize, cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    if n_subjects == 0 {
        return Err(invalid("need at least one subject"));
    }
    let records = (0..n_subjects as u64)
        .map(|id| {
            let mut rng = subject_rng(cfg.seed, id);
            let sex = rng.random_range(0..GENERATOR_CATEGORIES);
            let age = rng.random_range(cfg.age_range.lo..=cfg.age_range.hi);
            let image = render(age, sex, cfg, &mut rng);
            DatasetRecord {
                subject_id: id,
                split: Split::Unassigned,
                record: PatientRecord { image, age, sex },
            }
        })
        .collect();
    Ok(Dataset {
        config: *cfg,
        records,
    })
}

/// Default train / validation / test fractions.
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.89, 0.01, 0.10);

/// Shuffles subjects with `seed` and tags them train / validation / test.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(*f >= 0.0)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut ids: Vec<u64> = dataset.records.iter().map(|r| r.subject_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let mut tag = std::collections::BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let s = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
        tag.insert(*id, s);
    }
    let mut out = dataset.clone();
    for r in &mut out.records {
        r.split = tag[&r.subject_id];
    }
    Ok(out)
}

impl Dataset {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.records_in(split).count()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&DatasetHeader {
            generator: self.config,
            records: self.records.len(),
        })
        .map_err(|e| Error::Format(format!("header: {e}")))?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        let px = self.config.pixels();
        for r in &self.records {
            if r.record.image.len() != px {
                return Err(invalid("record image size differs from the generator side"));
            }
            let mut buf = Vec::with_capacity(18 + 4 * px);
            buf.extend_from_slice(&r.subject_id.to_le_bytes());
            buf.push(r.split.tag());
            buf.extend_from_slice(&r.record.age.to_le_bytes());
            buf.push(r.record.sex as u8);
            for v in &r.record.image {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let mut u = [0u8; 4];
        r.read_exact(&mut u)?;
        let version = u32::from_le_bytes(u);
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        r.read_exact(&mut u)?;
        let mut header = vec![0u8; u32::from_le_bytes(u) as usize];
        r.read_exact(&mut header)?;
        let header: DatasetHeader =
            serde_json::from_slice(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
        header.generator.validate()?;
        r.read_exact(&mut u)?;
        let n = u32::from_le_bytes(u) as usize;
        if n != header.records {
            return Err(Error::Format("record count disagrees with header".into()));
        }
        let px = header.generator.pixels();
        let mut buf = vec![0u8; 18 + 4 * px];
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            let subject_id = u64::from_le_bytes(buf[0..8].try_into().unwrap());
            let split = Split::from_tag(buf[8])?;
            let age = f64::from_le_bytes(buf[9..17].try_into().unwrap());
            let sex = buf[17] as usize;
            let image = buf[18..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(DatasetRecord {
                subject_id,
                split,
                record: PatientRecord { image, age, sex },
            });
        }
        Ok(Self {
            config: header.generator,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Age recovered from the thresholded disk area: `r = sqrt(count / pi)`.
pub fn oracle_age(image: &[f32], cfg: &GeneratorConfig) -> Result<f64> {
    let thr = cfg.threshold();
    let count = image.iter().filter(|&&v| v as f64 > thr).count();
    if count == 0 {
        return Err(invalid("no foreground pixels"));
    }
    let radius = (count as f64 / std::f64::consts::PI).sqrt();
    let r = &cfg.age_range;
    Ok(cfg.age_for_radius(radius).clamp(r.lo, r.hi))
}

/// Class 0 when the left half is at least as bright as the right half.
pub fn oracle_sex(image: &[f32], cfg: &GeneratorConfig) -> usize {
    let side = cfg.image_side;
    let (mut left, mut right) = (0.0f64, 0.0f64);
    for (i, v) in image.iter().enumerate() {
        if i % side < side / 2 {
            left += *v as f64;
        } else {
            right += *v as f64;
        }
    }
    if left >= right {
        0
    } else {
        1
    }
}

/// Predicts the training-set mean age for everyone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationBaseline {
    pub mean_age: f64,
}

impl PopulationBaseline {
    pub fn fit<'a>(train: impl IntoIterator<Item = &'a PatientRecord>) -> Result<Self> {
        let (mut s, mut n) = (0.0, 0usize);
        for r in train {
            s += r.age;
            n += 1;
        }
        if n == 0 {
            return Err(invalid("empty training split"));
        }
        Ok(Self { mean_age: s / n as f64 })
    }

    pub fn predict(&self) -> f64 {
        self.mean_age
    }

    pub fn mae<'a>(&self, records: impl IntoIterator<Item = &'a PatientRecord>) -> Result<f64> {
        let (mut s, mut n) = (0.0, 0usize);
        for r in records {
            s += (r.age - self.mean_age).abs();
            n += 1;
        }
        if n == 0 {
            return Err(invalid("empty evaluation set"));
        }
        Ok(s / n as f64)
    }
}

pub fn population_baseline(dataset: &Dataset) -> Result<PopulationBaseline> {
    PopulationBaseline::fit(dataset.records_in(Split::Train).map(|r| &r.record))
}
