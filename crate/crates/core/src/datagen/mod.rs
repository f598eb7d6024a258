//! Synthetic zero-shot corpora and on-disk datasets.
//!
//! The generator is linear plus noise: every label gets a unit-norm
//! embedding, a single hidden map `H: d_w -> D` turns embeddings into token
//! features, and each token of an image carries `H·e_c` for one of its
//! labels. Unseen labels occur only in the test split.

mod features;

pub(crate) use features::Reader;
pub use features::{decode_features, encode_features, read_features, write_features};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::embedding::LabelSpace;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_seen: usize,
    pub num_unseen: usize,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub num_tokens: usize,
    /// Inclusive range of labels per image.
    pub labels_min: usize,
    pub labels_max: usize,
    pub noise_sigma: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_seen: 20,
            num_unseen: 5,
            embed_dim: 32,
            token_dim: 64,
            num_tokens: 16,
            labels_min: 1,
            labels_max: 3,
            noise_sigma: 0.3,
            train_size: 512,
            test_size: 128,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn num_labels(&self) -> usize {
        self.num_seen + self.num_unseen
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_seen < 2 {
            return Err(Error::config("num_seen must be at least 2"));
        }
        let positive = [
            ("num_unseen", self.num_unseen),
            ("embed_dim", self.embed_dim),
            ("token_dim", self.token_dim),
            ("num_tokens", self.num_tokens),
            ("labels_min", self.labels_min),
            ("train_size", self.train_size),
            ("test_size", self.test_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.labels_min > self.labels_max {
            return Err(Error::config(format!(
                "labels_per_image range {}..={} is empty",
                self.labels_min, self.labels_max
            )));
        }
        if self.labels_max > self.num_labels() || self.labels_max > self.num_seen {
            return Err(Error::config(format!(
                "labels_per_image up to {} is infeasible with {} seen / {} total labels",
                self.labels_max,
                self.num_seen,
                self.num_labels()
            )));
        }
        if self.labels_max > self.num_tokens {
            return Err(Error::config(format!(
                "labels_per_image up to {} exceeds {} tokens per image",
                self.labels_max, self.num_tokens
            )));
        }
        Ok(())
    }
}

/// Binary `images × labels` presence matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl LabelMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "label matrix {rows} x {cols} got {} entries",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_sets(cols: usize, sets: &[Vec<usize>]) -> Result<Self> {
        let mut data = vec![false; sets.len() * cols];
        for (i, set) in sets.iter().enumerate() {
            for &c in set {
                if c >= cols {
                    return Err(Error::shape(format!("label {c} out of range for {cols} labels")));
                }
                data[i * cols + c] = true;
            }
        }
        Ok(Self {
            rows: sets.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, c: usize) -> bool {
        self.data[i * self.cols + c]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn labels_of(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|&c| self.get(i, c)).collect()
    }
}

/// Images of one split: token features `I × N × D` and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub features: Tensor,
    pub labels: LabelMatrix,
}

impl Split {
    pub fn new(features: Tensor, labels: LabelMatrix) -> Result<Self> {
        if features.rank() != 3 || features.shape()[0] != labels.rows() {
            return Err(Error::shape(format!(
                "features {:?} do not match {} label rows",
                features.shape(),
                labels.rows()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_tokens(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn token_dim(&self) -> usize {
        self.features.shape()[2]
    }

    /// Features of the given images stacked into `len × N × D`.
    pub fn batch_features(&self, images: &[usize]) -> Result<Tensor> {
        self.features.gather_outer(images)
    }

    /// Copy with every feature rounded to `f32`, as stored on disk.
    pub fn quantized(&self) -> Self {
        Self {
            features: self.features.map(|x| x as f32 as f64),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub space: LabelSpace,
    pub train: Split,
    pub test: Split,
    /// The generator's `D × d_w` map, for synthetic data.
    pub hidden_map: Option<Tensor>,
}

pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const UNSEEN_FILE: &str = "unseen.txt";
pub const TRAIN_FEATURES_FILE: &str = "train.epsf";
pub const TRAIN_LABELS_FILE: &str = "train_labels.txt";
pub const TEST_FEATURES_FILE: &str = "test.epsf";
pub const TEST_LABELS_FILE: &str = "test_labels.txt";

impl Dataset {
    /// Writes the dataset as the six files of a dataset directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.space.save(&dir.join(EMBEDDINGS_FILE), &dir.join(UNSEEN_FILE))?;
        write_features(&self.train.features, &dir.join(TRAIN_FEATURES_FILE))?;
        write_labels(&self.train.labels, &self.space, "train", &dir.join(TRAIN_LABELS_FILE))?;
        write_features(&self.test.features, &dir.join(TEST_FEATURES_FILE))?;
        write_labels(&self.test.labels, &self.space, "test", &dir.join(TEST_LABELS_FILE))
    }

    /// Loads a dataset directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let space = LabelSpace::load(&dir.join(EMBEDDINGS_FILE), &dir.join(UNSEEN_FILE))?;
        let train = ingest_external(&dir.join(TRAIN_FEATURES_FILE), &dir.join(TRAIN_LABELS_FILE), &space, None)?;
        let dims = Some((train.num_tokens(), train.token_dim()));
        let test = ingest_external(&dir.join(TEST_FEATURES_FILE), &dir.join(TEST_LABELS_FILE), &space, dims)?;
        for i in 0..train.len() {
            if let Some(c) = train.labels.labels_of(i).into_iter().find(|&c| !space.is_seen(c)) {
                return Err(Error::parse(
                    dir.join(TRAIN_LABELS_FILE),
                    format!("unseen label {:?} in training image {i}", space.name(c)),
                ));
            }
        }
        Ok(Self {
            space,
            train,
            test,
            hidden_map: None,
        })
    }
}

fn write_labels(labels: &LabelMatrix, space: &LabelSpace, prefix: &str, path: &Path) -> Result<()> {
    let mut text = String::new();
    for i in 0..labels.rows() {
        write!(text, "{prefix}_{i:06}\t").expect("write to string");
        let names: Vec<&str> = labels.labels_of(i).into_iter().map(|c| space.name(c)).collect();
        text.push_str(&names.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads precomputed token features and a label file into a [`Split`].
/// `dims`, when given, is the expected `(N, D)`.
pub fn ingest_external(
    features_path: &Path,
    labels_path: &Path,
    space: &LabelSpace,
    dims: Option<(usize, usize)>,
) -> Result<Split> {
    let features = read_features(features_path)?;
    if features.rank() != 3 {
        return Err(Error::parse(
            features_path,
            format!("expected images x tokens x dim, got shape {:?}", features.shape()),
        ));
    }
    if let Some((n, d)) = dims {
        let (fn_, fd) = (features.shape()[1], features.shape()[2]);
        if fn_ != n {
            return Err(Error::shape(format!(
                "token count {fn_} in {} differs from expected {n}",
                features_path.display()
            )));
        }
        if fd != d {
            return Err(Error::shape(format!(
                "token dim {fd} in {} differs from expected {d}",
                features_path.display()
            )));
        }
    }
    let text = fs::read_to_string(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut sets = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (_, names) = line.split_once('\t').ok_or_else(|| {
            Error::parse(labels_path, format!("line {}: expected image_id<TAB>labels", lineno + 1))
        })?;
        let mut set = Vec::new();
        for name in names.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let c = space.index_of(name).ok_or_else(|| {
                Error::parse(labels_path, format!("line {}: unknown label {name:?}", lineno + 1))
            })?;
            set.push(c);
        }
        sets.push(set);
    }
    if sets.len() != features.shape()[0] {
        return Err(Error::parse(
            labels_path,
            format!("{} label lines for {} feature rows", sets.len(), features.shape()[0]),
        ));
    }
    Split::new(features, LabelMatrix::from_sets(space.num_labels(), &sets)?)
}

/// Draws a synthetic dataset; a pure function of `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let c = cfg.num_labels();
    let dw = cfg.embed_dim;

    let mut emb = Vec::with_capacity(c * dw);
    for _ in 0..c {
        let row: Vec<f64> = (0..dw).map(|_| rng.normal(0.0, 1.0)).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        emb.extend(row.iter().map(|x| x / norm));
    }
    let embeddings = Tensor::new(vec![c, dw], emb)?;
    let hidden = Tensor::new(
        vec![cfg.token_dim, dw],
        (0..cfg.token_dim * dw).map(|_| rng.normal(0.0, 1.0)).collect(),
    )?;
    // projected[c] = H · e_c
    let projected = embeddings.matmul(&hidden.transpose()?)?;

    let names = (0..c).map(|i| format!("class_{i:03}")).collect();
    let seen = (0..c).map(|i| i < cfg.num_seen).collect();
    let space = LabelSpace::new(names, seen, embeddings)?;

    let mut draw_split = |images: usize, pool: usize| -> Result<Split> {
        let mut sets = Vec::with_capacity(images);
        let mut feats = Vec::with_capacity(images * cfg.num_tokens * cfg.token_dim);
        for _ in 0..images {
            let k = rng.range_inclusive(cfg.labels_min, cfg.labels_max);
            let labels = rng.sample_distinct(pool, k);
            for t in 0..cfg.num_tokens {
                let label = labels[t % k];
                let base = &projected.data()[label * cfg.token_dim..(label + 1) * cfg.token_dim];
                for &x in base {
                    let noise = if cfg.noise_sigma > 0.0 {
                        rng.normal(0.0, cfg.noise_sigma)
                    } else {
                        0.0
                    };
                    feats.push(x + noise);
                }
            }
            sets.push(labels);
        }
        let features = Tensor::new(vec![images, cfg.num_tokens, cfg.token_dim], feats)?;
        Split::new(features, LabelMatrix::from_sets(c, &sets)?)
    };
    let train = draw_split(cfg.train_size, cfg.num_seen)?;
    let test = draw_split(cfg.test_size, c)?;
    Ok(Dataset {
        space,
        train,
        test,
        hidden_map: Some(hidden),
    })
}
