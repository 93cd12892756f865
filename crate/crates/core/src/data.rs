//! Dataset ingestion: CIFAR binary files, synthetic desk-scale data,
//! stratified splits, and the symmetric label-noise protocol.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: expected a multiple of {record} bytes, got {actual} (stray bytes start at offset {offset})")]
    RecordSize { path: String, record: usize, actual: u64, offset: u64 },
    #[error("{path}: record {record}: label {label} out of range for {classes} classes")]
    BadLabel { path: String, record: usize, label: usize, classes: usize },
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("external labels {path}: line {line}: {msg}")]
    ExternalLabels { path: String, line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

/// Images live in `[0,1]`; per-channel normalization is applied later at
/// batch assembly so the recorded constants stay visible in the manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.channels * self.height * self.width;
        &self.images[i * per..(i + 1) * per]
    }

    pub fn pixels_per_image(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Per-channel constants computed from a clean training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub fn compute_normalization(dataset: &Dataset) -> Normalization {
    let plane = dataset.height * dataset.width;
    let mut mean = vec![0.0f64; dataset.channels];
    let mut sq = vec![0.0f64; dataset.channels];
    let count = (dataset.n * plane) as f64;
    for i in 0..dataset.n {
        let img = dataset.image(i);
        for c in 0..dataset.channels {
            for &p in &img[c * plane..(c + 1) * plane] {
                mean[c] += p as f64;
                sq[c] += (p as f64) * (p as f64);
            }
        }
    }
    let mean: Vec<f64> = mean.into_iter().map(|m| m / count).collect();
    let std: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(&s, &m)| ((s / count - m * m).max(0.0).sqrt().max(1e-6)) as f32)
        .collect();
    Normalization { mean: mean.into_iter().map(|m| m as f32).collect(), std }
}

/// Load one CIFAR binary batch file.
///
/// CIFAR-10 records are 3073 bytes (label, then R/G/B planes row-major);
/// CIFAR-100 records are 3074 bytes (coarse, fine, planes) and the fine
/// label is used.
pub fn load_cifar(path: &Path, variant: CifarVariant) -> Result<Dataset, DataError> {
    let bytes = fs::read(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let (record, classes, label_offset) = match variant {
        CifarVariant::Cifar10 => (3073usize, 10usize, 0usize),
        CifarVariant::Cifar100 => (3074, 100, 1),
    };
    if bytes.is_empty() || bytes.len() % record != 0 {
        let full = (bytes.len() / record) as u64;
        return Err(DataError::RecordSize {
            path: path.display().to_string(),
            record,
            actual: bytes.len() as u64,
            offset: full * record as u64,
        });
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * 3072);
    for r in 0..n {
        let rec = &bytes[r * record..(r + 1) * record];
        let label = rec[label_offset] as usize;
        if label >= classes {
            return Err(DataError::BadLabel {
                path: path.display().to_string(),
                record: r,
                label,
                classes,
            });
        }
        labels.push(label);
        images.extend(rec[label_offset + 1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Dataset {
        images,
        n,
        channels: 3,
        height: 32,
        width: 32,
        labels,
        num_classes: classes,
        split: SplitTag::Full,
    })
}

/// Parameters of the synthetic class-template dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    /// Template amplitude around mid-gray; 1.0 spans the full range.
    pub class_signal: f64,
    /// Per-pixel Gaussian noise added on top of the template.
    pub noise_std: f64,
    pub seed: u64,
}

/// The fixed ±1 pixel pattern of one class.
pub fn synthetic_template(spec: &SyntheticSpec, class: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9).wrapping_add(class as u64));
    (0..spec.height * spec.width)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Class-conditional images: per-class template plus Gaussian pixel noise,
/// clamped to `[0,1]`. Labels cycle round-robin, so classes stay balanced.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    if spec.num_classes < 2 {
        return Err(DataError::Config("synthetic data needs at least 2 classes".into()));
    }
    if spec.num_samples == 0 || spec.height == 0 || spec.width == 0 {
        return Err(DataError::Config("synthetic data needs positive extents".into()));
    }
    let templates: Vec<Vec<f32>> =
        (0..spec.num_classes).map(|c| synthetic_template(spec, c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let amp = 0.5 * spec.class_signal;
    let per = spec.height * spec.width;
    let mut images = Vec::with_capacity(spec.num_samples * per);
    let mut labels = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let class = i % spec.num_classes;
        labels.push(class);
        let t = &templates[class];
        for j in 0..per {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let v = 0.5 + amp * t[j] as f64 + spec.noise_std * noise;
            images.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(Dataset {
        images,
        n: spec.num_samples,
        channels: 1,
        height: spec.height,
        width: spec.width,
        labels,
        num_classes: spec.num_classes,
        split: SplitTag::Full,
    })
}

/// One label flip: position in the label array, the clean label, the noisy one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flip {
    pub index: usize,
    pub original: usize,
    #[serde(rename = "new")]
    pub new_label: usize,
}

/// The persisted record of one noise injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub epsilon: f64,
    pub seed: u64,
    pub flips: Vec<Flip>,
}

impl NoiseSpec {
    /// Re-apply the recorded flips to a clean label array.
    pub fn apply(&self, labels: &mut [usize]) -> Result<(), DataError> {
        for f in &self.flips {
            if f.index >= labels.len() {
                return Err(DataError::Config(format!(
                    "flip index {} out of range for {} labels",
                    f.index,
                    labels.len()
                )));
            }
            labels[f.index] = f.new_label;
        }
        Ok(())
    }
}

/// Flip exactly `round(ε·N)` labels, chosen uniformly; each new label is
/// drawn uniformly from the other `K−1` classes.
pub fn inject_symmetric_noise(
    labels: &[usize],
    epsilon: f64,
    num_classes: usize,
    seed: u64,
) -> Result<(Vec<usize>, NoiseSpec), DataError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(DataError::Config(format!("epsilon {epsilon} outside [0,1]")));
    }
    if epsilon > 0.0 && num_classes < 2 {
        return Err(DataError::Config("cannot flip labels with fewer than 2 classes".into()));
    }
    let n = labels.len();
    let count = (epsilon * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    // partial Fisher–Yates: the first `count` entries are the flip set
    for i in 0..count {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..count].to_vec();
    chosen.sort_unstable();

    let mut noisy = labels.to_vec();
    let mut flips = Vec::with_capacity(count);
    for idx in chosen {
        let original = labels[idx];
        let draw = rng.gen_range(0..num_classes - 1);
        let new_label = if draw >= original { draw + 1 } else { draw };
        noisy[idx] = new_label;
        flips.push(Flip { index: idx, original, new_label });
    }
    Ok((noisy, NoiseSpec { epsilon, seed, flips }))
}

/// Replace training labels from a `index,label` CSV covering every index
/// exactly once (header row optional).
pub fn load_external_labels(path: &Path, dataset: &Dataset) -> Result<Vec<usize>, DataError> {
    let text = fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let p = path.display().to_string();
    let mut labels = vec![usize::MAX; dataset.n];
    let mut seen = vec![false; dataset.n];
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split(',');
        let first = fields.next().unwrap_or("").trim();
        let second = fields.next().unwrap_or("").trim();
        if lineno == 0 && first.parse::<usize>().is_err() {
            continue; // header
        }
        let err = |msg: String| DataError::ExternalLabels { path: p.clone(), line: lineno + 1, msg };
        let index: usize =
            first.parse().map_err(|_| err(format!("bad index {first:?}")))?;
        let label: usize =
            second.parse().map_err(|_| err(format!("bad label {second:?}")))?;
        if index >= dataset.n {
            return Err(err(format!("index {index} out of range for {} samples", dataset.n)));
        }
        if seen[index] {
            return Err(err(format!("duplicate index {index}")));
        }
        if label >= dataset.num_classes {
            return Err(err(format!(
                "label {label} out of range for {} classes",
                dataset.num_classes
            )));
        }
        seen[index] = true;
        labels[index] = label;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(DataError::ExternalLabels {
            path: p,
            line: 0,
            msg: format!("index {missing} missing from file"),
        });
    }
    Ok(labels)
}

/// Deterministic stratified split; `round(val_fraction · n_c)` samples of
/// every class go to the validation side, original order preserved.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::Config(format!("val_fraction {val_fraction} outside (0,1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut val_mask = vec![false; dataset.n];
    for (class, members) in by_class.iter().enumerate() {
        let mut shuffled = members.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        shuffled.shuffle(&mut rng);
        let take = (val_fraction * members.len() as f64).round() as usize;
        for &idx in &shuffled[..take] {
            val_mask[idx] = true;
        }
    }
    let gather = |want_val: bool, tag: SplitTag| {
        let idx: Vec<usize> =
            (0..dataset.n).filter(|&i| val_mask[i] == want_val).collect();
        let per = dataset.pixels_per_image();
        let mut images = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in &idx {
            images.extend_from_slice(dataset.image(i));
            labels.push(dataset.labels[i]);
        }
        Dataset {
            images,
            n: idx.len(),
            channels: dataset.channels,
            height: dataset.height,
            width: dataset.width,
            labels,
            num_classes: dataset.num_classes,
            split: tag,
        }
    };
    Ok((gather(false, SplitTag::Train), gather(true, SplitTag::Val)))
}
