//! Federations of per-user partitions: synthesis, user-level splits, JSON-lines I/O.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::LabeledExample;
use crate::scalar::Scalar;
use crate::seed;

/// Class index treated as the wake-word (positive) class.
pub const POSITIVE_CLASS: usize = 1;

pub type UserId = u64;

#[derive(Clone, Debug, PartialEq)]
pub struct ClientPartition<T> {
    pub user_id: UserId,
    pub examples: Vec<LabeledExample<T>>,
}

impl<T> ClientPartition<T> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// All users' partitions, kept sorted by user id.
#[derive(Clone, Debug, PartialEq)]
pub struct Federation<T> {
    feature_dim: usize,
    class_count: usize,
    partitions: Vec<ClientPartition<T>>,
    total_examples: usize,
}

impl<T: Scalar> Federation<T> {
    pub fn new(feature_dim: usize, class_count: usize, mut partitions: Vec<ClientPartition<T>>) -> Result<Self> {
        if partitions.is_empty() {
            return Err(config_err("federation has no users"));
        }
        if class_count < 2 {
            return Err(config_err("federation needs at least 2 classes"));
        }
        partitions.sort_by_key(|p| p.user_id);
        for pair in partitions.windows(2) {
            if pair[0].user_id == pair[1].user_id {
                return Err(config_err(format!("duplicate user id {}", pair[0].user_id)));
            }
        }
        for p in &partitions {
            if p.examples.is_empty() {
                return Err(config_err(format!("user {} has no examples", p.user_id)));
            }
            for ex in &p.examples {
                if ex.features.len() != feature_dim || ex.label >= class_count {
                    return Err(config_err(format!(
                        "user {} has an example inconsistent with feature_dim {feature_dim} / class_count {class_count}",
                        p.user_id
                    )));
                }
                if !(ex.duration_s >= T::zero()) {
                    return Err(config_err(format!("user {} has a negative duration", p.user_id)));
                }
            }
        }
        let total_examples = partitions.iter().map(|p| p.len()).sum();
        Ok(Self { feature_dim, class_count, partitions, total_examples })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn partitions(&self) -> &[ClientPartition<T>] {
        &self.partitions
    }

    pub fn user_count(&self) -> usize {
        self.partitions.len()
    }

    pub fn total_examples(&self) -> usize {
        self.total_examples
    }

    pub fn user_ids(&self) -> Vec<UserId> {
        self.partitions.iter().map(|p| p.user_id).collect()
    }

    pub fn partition(&self, user_id: UserId) -> Option<&ClientPartition<T>> {
        self.partitions.binary_search_by_key(&user_id, |p| p.user_id).ok().map(|i| &self.partitions[i])
    }

    pub fn require(&self, user_id: UserId) -> Result<&ClientPartition<T>> {
        self.partition(user_id).ok_or_else(|| crate::error::usage_err(format!("unknown user id {user_id}")))
    }
}

/// Parameters of a synthetic unbalanced, non-i.i.d. federation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSpec {
    pub user_count: usize,
    pub size_mean: f64,
    pub size_std: f64,
    pub positive_rate: f64,
    pub feature_dim: usize,
    #[serde(default = "default_class_count")]
    pub class_count: usize,
    /// Norm of each user's private feature offset.
    pub user_shift_scale: f64,
    #[serde(default = "default_negative_duration")]
    pub negative_duration_s: f64,
    /// Distance between class means, in units of the unit-variance noise.
    #[serde(default = "default_class_separation")]
    pub class_separation: f64,
}

fn default_class_count() -> usize {
    2
}

fn default_negative_duration() -> f64 {
    3.0
}

fn default_class_separation() -> f64 {
    2.0
}

/// Concentration of the per-user Beta prior on the positive rate.
const POSITIVE_RATE_CONCENTRATION: f64 = 20.0;

impl Default for FederationSpec {
    /// Crowdsourced wake-word statistics: 1,774 users, 39 ± 32 utterances
    /// per user, 18% positives.
    fn default() -> Self {
        Self {
            user_count: 1774,
            size_mean: 39.0,
            size_std: 32.0,
            positive_rate: 0.18,
            feature_dim: 10,
            class_count: 2,
            user_shift_scale: 1.0,
            negative_duration_s: 3.0,
            class_separation: 2.0,
        }
    }
}

impl FederationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.user_count == 0 {
            return Err(config_err("user_count must be at least 1"));
        }
        if !(self.size_mean > 0.0 && self.size_mean.is_finite()) {
            return Err(config_err("size_mean must be positive"));
        }
        if !(self.size_std >= 0.0 && self.size_std.is_finite()) {
            return Err(config_err("size_std must be nonnegative"));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(config_err("positive_rate must lie in (0, 1)"));
        }
        if self.feature_dim == 0 {
            return Err(config_err("feature_dim must be positive"));
        }
        if self.class_count < 2 {
            return Err(config_err("class_count must be at least 2"));
        }
        for (name, v) in [
            ("user_shift_scale", self.user_shift_scale),
            ("negative_duration_s", self.negative_duration_s),
            ("class_separation", self.class_separation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    /// `(mu, sigma)` of the log-normal whose mean and standard deviation are
    /// `size_mean` and `size_std`.
    pub fn log_normal_params(&self) -> (f64, f64) {
        let ratio = self.size_std / self.size_mean;
        let sigma2 = (1.0 + ratio * ratio).ln();
        (self.size_mean.ln() - sigma2 / 2.0, sigma2.sqrt())
    }
}

fn unit_vector(rng: &mut seed::Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a federation: log-normal partition sizes, per-user Beta-distributed
/// positive rates around the global rate, class-conditional Gaussian
/// features, and a fixed-norm offset per user.
pub fn synthesize_federation<T: Scalar>(spec: &FederationSpec, seed: u64) -> Result<Federation<T>> {
    spec.validate()?;
    let mut rng = seed::rng(seed);
    let dim = spec.feature_dim;

    // Class means sit on random directions at radius sep/sqrt(2), so two
    // orthogonal means are `class_separation` apart.
    let radius = spec.class_separation / std::f64::consts::SQRT_2;
    let class_means: Vec<Vec<f64>> =
        (0..spec.class_count).map(|_| unit_vector(&mut rng, dim).into_iter().map(|x| x * radius).collect()).collect();

    let (mu, sigma) = spec.log_normal_params();
    let sizes = LogNormal::new(mu, sigma).map_err(|e| config_err(format!("size distribution: {e}")))?;
    let conc = POSITIVE_RATE_CONCENTRATION;
    let user_rate = Beta::new(spec.positive_rate * conc, (1.0 - spec.positive_rate) * conc)
        .map_err(|e| config_err(format!("positive-rate distribution: {e}")))?;
    let positive_duration = Uniform::new_inclusive(1.0, 3.0).expect("valid range");

    let mut partitions = Vec::with_capacity(spec.user_count);
    for user in 0..spec.user_count {
        let n_k = if spec.size_std == 0.0 {
            spec.size_mean.round().max(1.0) as usize
        } else {
            sizes.sample(&mut rng).round().max(1.0) as usize
        };
        let shift: Vec<f64> = unit_vector(&mut rng, dim).into_iter().map(|x| x * spec.user_shift_scale).collect();
        let rate: f64 = user_rate.sample(&mut rng);

        let examples = (0..n_k)
            .map(|_| {
                let positive = rng.random_bool(rate);
                let label = if positive {
                    POSITIVE_CLASS
                } else if spec.class_count == 2 {
                    0
                } else {
                    // Spread negatives over every non-positive class.
                    let k = rng.random_range(0..spec.class_count - 1);
                    if k >= POSITIVE_CLASS {
                        k + 1
                    } else {
                        k
                    }
                };
                let features = class_means[label]
                    .iter()
                    .zip(&shift)
                    .map(|(&m, &s)| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        T::of(m + s + noise)
                    })
                    .collect();
                let duration = if positive { positive_duration.sample(&mut rng) } else { spec.negative_duration_s };
                LabeledExample { features, label, duration_s: T::of(duration) }
            })
            .collect();
        partitions.push(ClientPartition { user_id: user as UserId, examples });
    }
    Federation::new(dim, spec.class_count, partitions)
}

/// Disjoint user pools.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct UserSplit {
    pub train: Vec<UserId>,
    pub dev: Vec<UserId>,
    pub test: Vec<UserId>,
}

/// Splits users (never examples) into train/dev/test pools of sizes
/// `round(train_frac K)`, `round(dev_frac K)` and the remainder. Each pool is
/// returned sorted.
pub fn split_users<T: Scalar>(
    federation: &Federation<T>,
    train_frac: f64,
    dev_frac: f64,
    seed: u64,
) -> Result<UserSplit> {
    if !(train_frac > 0.0 && train_frac <= 1.0) {
        return Err(config_err(format!("train fraction {train_frac} must lie in (0, 1]")));
    }
    if !(0.0..1.0).contains(&dev_frac) {
        return Err(config_err(format!("dev fraction {dev_frac} must lie in [0, 1)")));
    }
    if train_frac + dev_frac > 1.0 + 1e-12 {
        return Err(config_err("train and dev fractions sum to more than 1"));
    }
    let k = federation.user_count();
    let n_train = ((train_frac * k as f64).round() as usize).min(k);
    let n_dev = ((dev_frac * k as f64).round() as usize).min(k - n_train);

    let mut ids = federation.user_ids();
    ids.shuffle(&mut seed::rng(seed));
    let mut test = ids.split_off(n_train + n_dev);
    let mut dev = ids.split_off(n_train);
    let mut train = ids;
    train.sort_unstable();
    dev.sort_unstable();
    test.sort_unstable();
    Ok(UserSplit { train, dev, test })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionStats {
    pub user_count: usize,
    pub total_examples: usize,
    pub size_mean: f64,
    /// Population standard deviation of partition sizes.
    pub size_std: f64,
    pub positive_rate: f64,
}

pub fn partition_stats<T: Scalar>(federation: &Federation<T>) -> PartitionStats {
    let k = federation.user_count() as f64;
    let n = federation.total_examples();
    let mean = n as f64 / k;
    let var = federation
        .partitions()
        .iter()
        .map(|p| {
            let d = p.len() as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / k;
    let positives =
        federation.partitions().iter().flat_map(|p| &p.examples).filter(|e| e.label == POSITIVE_CLASS).count();
    PartitionStats {
        user_count: federation.user_count(),
        total_examples: n,
        size_mean: mean,
        size_std: var.sqrt(),
        positive_rate: positives as f64 / n as f64,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    feature_dim: usize,
    class_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRecord {
    user_id: UserId,
    features: Vec<f64>,
    label: usize,
    duration_s: f64,
}

/// Writes the JSON-lines layout: a header line, then one example per line,
/// grouped by user.
pub fn save_federation<T: Scalar>(federation: &Federation<T>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = FileHeader { feature_dim: federation.feature_dim, class_count: federation.class_count };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for p in federation.partitions() {
        for ex in &p.examples {
            let rec = FileRecord {
                user_id: p.user_id,
                features: ex.features.iter().map(|x| x.as_f64()).collect(),
                label: ex.label,
                duration_s: ex.duration_s.as_f64(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a federation file. A user's records must be contiguous: a user id
/// that reappears after another user's block is rejected as a duplicate.
pub fn load_federation<T: Scalar>(path: &Path) -> Result<Federation<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let header: FileHeader = loop {
        match lines.next() {
            None => return Err(config_err(format!("{} is empty", path.display()))),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line)
                    .map_err(|e| Error::Parse { line: i + 1, message: format!("bad header: {e}") })?;
            }
        }
    };
    if header.feature_dim == 0 || header.class_count < 2 {
        return Err(Error::Parse { line: 1, message: "header needs feature_dim >= 1 and class_count >= 2".into() });
    }

    let mut partitions: Vec<ClientPartition<T>> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FileRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if rec.features.len() != header.feature_dim {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} features, found {}", header.feature_dim, rec.features.len()),
            });
        }
        if rec.label >= header.class_count {
            return Err(Error::Parse {
                line: line_no,
                message: format!("label {} out of range for {} classes", rec.label, header.class_count),
            });
        }
        if !(rec.duration_s >= 0.0) || rec.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse { line: line_no, message: "non-finite feature or negative duration".into() });
        }
        let example = LabeledExample {
            features: rec.features.into_iter().map(T::of).collect(),
            label: rec.label,
            duration_s: T::of(rec.duration_s),
        };
        match partitions.last_mut() {
            Some(p) if p.user_id == rec.user_id => p.examples.push(example),
            _ => {
                if !seen.insert(rec.user_id) {
                    return Err(Error::Parse { line: line_no, message: format!("duplicate user_id {}", rec.user_id) });
                }
                partitions.push(ClientPartition { user_id: rec.user_id, examples: vec![example] });
            }
        }
    }
    if partitions.is_empty() {
        return Err(config_err(format!("{} has no example records", path.display())));
    }
    Federation::new(header.feature_dim, header.class_count, partitions)
}
