//! Datasets and their allocation to clients.
//!
//! The similarity-`s` protocol: `round(s·N)` samples drawn uniformly at random
//! are dealt round-robin, and the rest are sorted by label (ties by original
//! index) and dealt to clients in contiguous blocks. `s = 0` gives maximal
//! label skew, `s = 1` an i.i.d. split.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objectives::Sample;
use crate::rng::{self, Purpose, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = samples[0].features.len();
        for (i, s) in samples.iter().enumerate() {
            if s.label >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has label {} but num_classes is {num_classes}",
                    s.label
                )));
            }
            if s.features.len() != dim {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has {} features, expected {dim}",
                    s.features.len()
                )));
            }
        }
        Ok(Dataset {
            samples,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].features.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Objective samples for the given indices, label stored as the target.
    pub fn to_samples(&self, indices: &[usize]) -> Vec<Sample> {
        indices
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                Sample::new(s.features.clone(), s.label as f64)
            })
            .collect()
    }

    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &i in indices {
            counts[self.samples[i].label] += 1;
        }
        counts
    }
}

/// Gaussian class clusters. Class means are random directions rescaled so
/// the closest pair sits exactly `class_separation` apart. Samples are stored
/// class by class.
pub fn make_synthetic(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    class_separation: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if dim < 1 {
        return Err(Error::InvalidArgument("dim must be at least 1".into()));
    }
    if num_classes == 0 || per_class == 0 {
        return Err(Error::InvalidArgument("class counts must be positive".into()));
    }
    if !(noise >= 0.0) || !(class_separation >= 0.0) {
        return Err(Error::InvalidArgument(
            "noise and separation must be nonnegative".into(),
        ));
    }
    let mut rng = rng::stream(seed, Purpose::Dataset);
    let mut means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    if num_classes > 1 {
        let mut closest = f64::INFINITY;
        for i in 0..num_classes {
            for j in 0..i {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                closest = closest.min(d);
            }
        }
        let scale = class_separation / closest;
        for m in &mut means {
            for v in m.iter_mut() {
                *v *= scale;
            }
        }
    }
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let features = mean
                .iter()
                .map(|&mu| {
                    let z: f64 = rng.sample(StandardNormal);
                    mu + noise * z
                })
                .collect();
            samples.push(LabeledSample { features, label });
        }
    }
    Dataset::new(samples, num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub similarity: f64,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    /// Hex SHA-256 of the shard contents, for pairing checks.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for shard in &self.shards {
            hasher.update((shard.len() as u64).to_le_bytes());
            for &i in shard {
                hasher.update((i as u64).to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

pub fn partition_similarity(data: &Dataset, clients: usize, s: f64, seed: u64) -> Result<Partition> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!(
            "similarity must lie in [0, 1], got {s}"
        )));
    }
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    let n = data.len();
    if clients > n {
        return Err(Error::InvalidArgument(format!(
            "{clients} clients but only {n} samples"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, Purpose::Partition);
    order.shuffle(&mut rng);
    let n_random = (s * n as f64).round() as usize;
    let (random_part, rest) = order.split_at(n_random);

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (j, &i) in random_part.iter().enumerate() {
        shards[j % clients].push(i);
    }

    let mut rest = rest.to_vec();
    rest.sort_by_key(|&i| (data.samples[i].label, i));
    let base = n / clients;
    let extra = n % clients;
    let mut cursor = 0;
    for (k, shard) in shards.iter_mut().enumerate() {
        let target = base + usize::from(k < extra);
        let take = target - shard.len();
        shard.extend_from_slice(&rest[cursor..cursor + take]);
        cursor += take;
    }
    debug_assert_eq!(cursor, rest.len());

    Ok(Partition {
        shards,
        similarity: s,
        seed,
    })
}

/// Reads `label,feat_0,...,feat_{m-1}` rows after a header line.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("{other:?}"),
            },
        })?;
    let header_len = reader.headers()?.len();
    if header_len < 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "header needs a label column and at least one feature".into(),
        });
    }
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header_len {
            return Err(parse_err(
                line,
                format!("expected {header_len} columns, found {}", record.len()),
            ));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("label `{}` is not a nonnegative integer", &record[0])))?;
        let features = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(j, field)| {
                field
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("feature {j} `{field}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(LabeledSample { features, label });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let num_classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    Dataset::new(samples, num_classes)
}

/// `b` shard entries drawn uniformly with replacement.
pub fn sample_batch(shard: &[usize], b: usize, rng: &mut Stream) -> Result<Vec<usize>> {
    if shard.is_empty() {
        return Err(Error::InvalidArgument("cannot sample from an empty shard".into()));
    }
    if b == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok((0..b).map(|_| shard[rng.random_range(0..shard.len())]).collect())
}

/// Fraction of a shard carrying its most common label.
pub fn label_purity(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    *histogram.iter().max().unwrap() as f64 / total as f64
}

/// Total-variation distance between a shard's label distribution and uniform.
pub fn tv_from_uniform(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    let c = histogram.len() as f64;
    0.5 * histogram
        .iter()
        .map(|&h| (h as f64 / total as f64 - 1.0 / c).abs())
        .sum::<f64>()
}
