use crate::error::{Error, Result};
use crate::numkit::Vector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vector,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Heldout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Heldout => "heldout",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "heldout" => Ok(Split::Heldout),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// Examples of one split sharing a feature dimension and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>, num_classes: usize, feature_dim: usize, split: Split) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != feature_dim {
                return Err(Error::BadInput(format!("example {i} has {} features, expected {feature_dim}", ex.features.len())));
            }
            if ex.label >= num_classes {
                return Err(Error::BadInput(format!("example {i} has label {} ≥ {num_classes}", ex.label)));
            }
            if !ex.features.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { context: format!("features of example {i}") });
            }
        }
        Ok(Self { examples, num_classes, feature_dim, split })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// References to the examples at `indices`, in order.
    pub fn gather(&self, indices: &[usize]) -> Vec<&LabeledExample> {
        indices.iter().map(|&i| &self.examples[i]).collect()
    }

    pub fn all(&self) -> Vec<&LabeledExample> {
        self.examples.iter().collect()
    }
}

/// Train/test/heldout splits generated or loaded together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
    pub heldout: Dataset,
}

impl DataSplits {
    /// Writes `feat_0,…,feat_{D−1},label,split` with round-trip floats.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.train.feature_dim;
        let mut header: Vec<String> = (0..d).map(|i| format!("feat_{i}")).collect();
        header.push("label".into());
        header.push("split".into());
        let mut rows = Vec::with_capacity(self.train.len() + self.test.len() + self.heldout.len());
        for ds in [&self.train, &self.test, &self.heldout] {
            for ex in &ds.examples {
                let mut row: Vec<String> = ex.features.iter().map(|&v| crate::io::fmt_f64(v)).collect();
                row.push(ex.label.to_string());
                row.push(ds.split.to_string());
                rows.push(row);
            }
        }
        crate::io::write_csv(path, &header, rows)
    }

    /// Reads a dataset CSV. `num_classes` defaults to `max label + 1`.
    pub fn read_csv(path: &Path, num_classes: Option<usize>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let n_cols = headers.len();
        if n_cols < 3 || &headers[n_cols - 2] != "label" || &headers[n_cols - 1] != "split" {
            return Err(Error::Format(format!("{}: header must be feat_0..feat_{{D-1}},label,split", path.display())));
        }
        for (i, h) in headers.iter().take(n_cols - 2).enumerate() {
            if h != format!("feat_{i}") {
                return Err(Error::Format(format!("{}: unexpected column `{h}`", path.display())));
            }
        }
        let d = n_cols - 2;
        let mut parts: [Vec<LabeledExample>; 3] = Default::default();
        let mut max_label = 0;
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let bad = |what: &str| Error::Format(format!("{}: row {}: bad {what}", path.display(), line + 2));
            let features = (0..d)
                .map(|i| record[i].parse::<f64>().map_err(|_| bad("float")))
                .collect::<Result<Vector>>()?;
            let label: usize = record[d].parse().map_err(|_| bad("label"))?;
            let split: Split = record[d + 1].parse()?;
            max_label = max_label.max(label);
            parts[split as usize].push(LabeledExample { features, label });
        }
        let k = num_classes.unwrap_or(max_label + 1);
        let [train, test, heldout] = parts;
        Ok(Self {
            train: Dataset::new(train, k, d, Split::Train)?,
            test: Dataset::new(test, k, d, Split::Test)?,
            heldout: Dataset::new(heldout, k, d, Split::Heldout)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Gaussian clusters around well-separated centres.
    Blobs,
    /// Uniform cube, label = `[x₀·x₁ > 0]`.
    Xor,
    /// Two interleaved half circles.
    Moons,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    /// Total examples over all splits.
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Probability of flipping a label to a uniformly chosen other class.
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_heldout_fraction")]
    pub heldout_fraction: f64,
    /// Distance of blob centres from the origin.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Standard deviation of the additive Gaussian noise.
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}
fn default_heldout_fraction() -> f64 {
    0.1
}
fn default_separation() -> f64 {
    3.0
}
fn default_spread() -> f64 {
    1.0
}

impl SyntheticConfig {
    pub fn new(kind: SyntheticKind, n: usize, dim: usize, classes: usize, label_noise: f64, seed: u64) -> Self {
        let spread = match kind {
            SyntheticKind::Blobs => 1.0,
            SyntheticKind::Xor => 0.0,
            SyntheticKind::Moons => 0.1,
        };
        Self {
            kind,
            n,
            dim,
            classes,
            label_noise,
            seed,
            test_fraction: default_test_fraction(),
            heldout_fraction: default_heldout_fraction(),
            separation: default_separation(),
            spread,
        }
    }
}

/// Seeded synthetic classification data, split into index ranges
/// `[0, n_train)`, `[n_train, n_train + n_test)` and the heldout rest.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<DataSplits> {
    let bad = |m: String| Err(Error::BadConfig(m));
    if cfg.classes < 2 {
        return bad(format!("need at least 2 classes, got {}", cfg.classes));
    }
    if cfg.n < cfg.classes {
        return bad(format!("n = {} must be at least the number of classes {}", cfg.n, cfg.classes));
    }
    if cfg.dim == 0 {
        return bad("feature dimension must be positive".into());
    }
    if !(0.0..1.0).contains(&cfg.label_noise) {
        return bad(format!("label_noise must lie in [0, 1), got {}", cfg.label_noise));
    }
    if !(cfg.test_fraction >= 0.0 && cfg.heldout_fraction >= 0.0 && cfg.test_fraction + cfg.heldout_fraction < 1.0) {
        return bad("split fractions must be nonnegative and sum below 1".into());
    }
    if !(cfg.spread >= 0.0 && cfg.separation.is_finite()) {
        return bad("spread must be ≥ 0 and separation finite".into());
    }
    if matches!(cfg.kind, SyntheticKind::Xor | SyntheticKind::Moons) && (cfg.classes != 2 || cfg.dim < 2) {
        return bad(format!("{:?} data needs 2 classes and dim ≥ 2", cfg.kind));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = blob_centers(cfg, &mut rng);
    let mut examples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let (mut features, label) = match cfg.kind {
            SyntheticKind::Blobs => {
                let label = i % cfg.classes;
                (centers[label].clone(), label)
            }
            SyntheticKind::Xor => {
                let x: Vector = (0..cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let label = usize::from(x[0] * x[1] > 0.0);
                (x, label)
            }
            SyntheticKind::Moons => {
                let label = i % 2;
                let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let mut x = vec![0.0; cfg.dim];
                if label == 0 {
                    x[0] = t.cos();
                    x[1] = t.sin();
                } else {
                    x[0] = 1.0 - t.cos();
                    x[1] = 0.5 - t.sin();
                }
                (x, label)
            }
        };
        if cfg.spread > 0.0 {
            for f in features.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *f += cfg.spread * z;
            }
        }
        let label = if cfg.label_noise > 0.0 && rng.random::<f64>() < cfg.label_noise {
            let shift = rng.random_range(1..cfg.classes);
            (label + shift) % cfg.classes
        } else {
            label
        };
        examples.push(LabeledExample { features, label });
    }

    let n_test = (cfg.n as f64 * cfg.test_fraction).round() as usize;
    let n_heldout = (cfg.n as f64 * cfg.heldout_fraction).round() as usize;
    let n_train = cfg.n - n_test - n_heldout;
    if n_train < cfg.classes {
        return bad(format!("train split has only {n_train} examples"));
    }
    let heldout = examples.split_off(n_train + n_test);
    let test = examples.split_off(n_train);
    Ok(DataSplits {
        train: Dataset::new(examples, cfg.classes, cfg.dim, Split::Train)?,
        test: Dataset::new(test, cfg.classes, cfg.dim, Split::Test)?,
        heldout: Dataset::new(heldout, cfg.classes, cfg.dim, Split::Heldout)?,
    })
}

/// Blob centres `±separation·e_j` for up to `2·dim` classes, Gaussian
/// directions scaled to `separation` beyond that.
fn blob_centers(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Vector> {
    if cfg.kind != SyntheticKind::Blobs {
        return Vec::new();
    }
    (0..cfg.classes)
        .map(|c| {
            let mut v = vec![0.0; cfg.dim];
            if c < 2 * cfg.dim {
                v[c / 2] = if c % 2 == 0 { cfg.separation } else { -cfg.separation };
            } else {
                let raw: Vector = (0..cfg.dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
                let nrm = crate::numkit::norm2(&raw);
                for (vi, r) in v.iter_mut().zip(&raw) {
                    *vi = cfg.separation * r / nrm;
                }
            }
            v
        })
        .collect()
}
