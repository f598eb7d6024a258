//! Label vocabulary, seen/unseen partition and label-embedding table.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which labels a score or ranking covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Seen,
    Unseen,
    All,
}

/// Label names, seen/unseen split and the `C × d_w` embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSpace {
    names: Vec<String>,
    seen: Vec<bool>,
    embeddings: Tensor,
}

impl LabelSpace {
    pub fn new(names: Vec<String>, seen: Vec<bool>, embeddings: Tensor) -> Result<Self> {
        let c = names.len();
        if c == 0 {
            return Err(Error::LabelSpace("empty vocabulary".into()));
        }
        if seen.len() != c {
            return Err(Error::LabelSpace(format!(
                "{} seen flags for {c} labels",
                seen.len()
            )));
        }
        if embeddings.rank() != 2 || embeddings.shape()[0] != c {
            return Err(Error::LabelSpace(format!(
                "embedding table {:?} does not match {c} labels",
                embeddings.shape()
            )));
        }
        let mut unique = HashSet::with_capacity(c);
        for name in &names {
            if name.is_empty() || name.contains(['\t', '\n', ',']) {
                return Err(Error::LabelSpace(format!("invalid label name {name:?}")));
            }
            if !unique.insert(name.as_str()) {
                return Err(Error::LabelSpace(format!("duplicate label {name:?}")));
            }
        }
        let d = embeddings.shape()[1];
        for (i, row) in embeddings.data().chunks(d).enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::LabelSpace(format!("non-finite embedding for {:?}", names[i])));
            }
            if row.iter().all(|&x| x == 0.0) {
                return Err(Error::LabelSpace(format!("zero embedding for {:?}", names[i])));
            }
        }
        Ok(Self {
            names,
            seen,
            embeddings,
        })
    }

    /// Reads an embedding file (`name<TAB>v1 v2 ...` per line) and an
    /// unseen-list file (one name per line).
    pub fn load(embedding_file: &Path, unseen_file: &Path) -> Result<Self> {
        let text = fs::read_to_string(embedding_file).map_err(|e| Error::io(embedding_file, e))?;
        let mut names = Vec::new();
        let mut rows = Vec::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::parse(embedding_file, format!("line {}: {msg}", lineno + 1));
            let (name, values) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected name<TAB>values".into()))?;
            let row = values
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad float {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if row.is_empty() {
                return Err(bad("no embedding values".into()));
            }
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(bad(format!("expected {d} values, got {}", row.len())))
                }
                _ => {}
            }
            names.push(name.to_string());
            rows.push(row);
        }
        if names.is_empty() {
            return Err(Error::parse(embedding_file, "no labels"));
        }

        let unseen_text = fs::read_to_string(unseen_file).map_err(|e| Error::io(unseen_file, e))?;
        let mut seen = vec![true; names.len()];
        for name in unseen_text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let idx = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::LabelSpace(format!("unknown unseen label {name:?}")))?;
            seen[idx] = false;
        }
        let space = Self::new(names, seen, Tensor::from_rows(&rows)?)?;
        info!(
            "loaded {} labels ({} seen, {} unseen), d_w = {}",
            space.num_labels(),
            space.seen_indices().len(),
            space.unseen_indices().len(),
            space.dim()
        );
        Ok(space)
    }

    /// Writes the two files read by [`LabelSpace::load`].
    pub fn save(&self, embedding_file: &Path, unseen_file: &Path) -> Result<()> {
        let d = self.dim();
        let mut emb = String::new();
        for (name, row) in self.names.iter().zip(self.embeddings.data().chunks(d)) {
            emb.push_str(name);
            emb.push('\t');
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    emb.push(' ');
                }
                write!(emb, "{v}").expect("write to string");
            }
            emb.push('\n');
        }
        fs::write(embedding_file, emb).map_err(|e| Error::io(embedding_file, e))?;
        let mut unseen = String::new();
        for i in self.unseen_indices() {
            unseen.push_str(&self.names[i]);
            unseen.push('\n');
        }
        fs::write(unseen_file, unseen).map_err(|e| Error::io(unseen_file, e))
    }

    pub fn num_labels(&self) -> usize {
        self.names.len()
    }

    /// Embedding width `d_w`.
    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, label: usize) -> &str {
        &self.names[label]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_seen(&self, label: usize) -> bool {
        self.seen[label]
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn embedding(&self, label: usize) -> &[f64] {
        let d = self.dim();
        &self.embeddings.data()[label * d..(label + 1) * d]
    }

    pub fn seen_indices(&self) -> Vec<usize> {
        self.indices(Subset::Seen)
    }

    pub fn unseen_indices(&self) -> Vec<usize> {
        self.indices(Subset::Unseen)
    }

    /// Label indices in ascending order.
    pub fn indices(&self, subset: Subset) -> Vec<usize> {
        (0..self.num_labels())
            .filter(|&i| match subset {
                Subset::Seen => self.seen[i],
                Subset::Unseen => !self.seen[i],
                Subset::All => true,
            })
            .collect()
    }

    /// Embedding rows of a subset, stacked in ascending label order.
    pub fn subset_embeddings(&self, subset: Subset) -> Result<Tensor> {
        self.embeddings.gather_outer(&self.indices(subset))
    }
}

/// The `M × d_w` semantic vectors produced for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGroup {
    vectors: Tensor,
}

impl SemanticGroup {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::shape(format!(
                "semantic group must be M x d_w, got {:?}",
                vectors.shape()
            )));
        }
        Ok(Self { vectors })
    }

    pub fn num_groups(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[m * d..(m + 1) * d]
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }
}

/// Score of each label in `subset` (ascending label order): the largest dot
/// product between its embedding and any row of the group.
pub fn score_labels(s: &SemanticGroup, space: &LabelSpace, subset: Subset) -> Result<Vec<f64>> {
    if s.dim() != space.dim() {
        return Err(Error::shape(format!(
            "semantic width {} does not match embedding width {}",
            s.dim(),
            space.dim()
        )));
    }
    Ok(space
        .indices(subset)
        .into_iter()
        .map(|c| {
            let e = space.embedding(c);
            (0..s.num_groups())
                .map(|m| s.row(m).iter().zip(e).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Indices of the `k` largest scores, highest first; ties go to the lower index.
pub fn rank_labels(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Eval(format!(
            "k = {k} out of range for {} labels",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}
