//! Zero-shot evaluation: class-wise mean average precision and
//! micro-averaged top-K precision, recall and F1.
//!
//! All rankings break ties by ascending index, so every metric is a pure
//! function of the table.

use log::debug;
use serde::Serialize;

use crate::embedding::{rank_labels, LabelSpace, Subset};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scores and binary ground truth, `images × labels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    images: usize,
    labels: usize,
    scores: Vec<f64>,
    truth: Vec<bool>,
}

impl ScoreTable {
    pub fn new(images: usize, labels: usize, scores: Vec<f64>, truth: Vec<bool>) -> Result<Self> {
        if images == 0 || labels == 0 {
            return Err(Error::shape("score table needs at least one image and one label"));
        }
        if scores.len() != images * labels || truth.len() != images * labels {
            return Err(Error::shape(format!(
                "score table {images} x {labels} got {} scores and {} truth entries",
                scores.len(),
                truth.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Eval("non-finite score".into()));
        }
        Ok(Self {
            images,
            labels,
            scores,
            truth,
        })
    }

    pub fn num_images(&self) -> usize {
        self.images
    }

    pub fn num_labels(&self) -> usize {
        self.labels
    }

    pub fn score(&self, image: usize, label: usize) -> f64 {
        self.scores[image * self.labels + label]
    }

    pub fn truth(&self, image: usize, label: usize) -> bool {
        self.truth[image * self.labels + label]
    }

    pub fn column(&self, label: usize) -> (Vec<f64>, Vec<bool>) {
        (0..self.images)
            .map(|i| (self.score(i, label), self.truth(i, label)))
            .unzip()
    }

    pub fn truth_matrix(&self) -> &[bool] {
        &self.truth
    }

    /// Same truth with new scores.
    pub fn with_scores(&self, scores: Vec<f64>) -> Result<Self> {
        Self::new(self.images, self.labels, scores, self.truth.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Rank unseen labels only.
    Zsl,
    /// Rank seen and unseen labels together.
    Gzsl,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zsl" => Ok(Protocol::Zsl),
            "gzsl" => Ok(Protocol::Gzsl),
            other => Err(Error::config(format!("unknown protocol {other:?}"))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Zsl => "zsl",
            Protocol::Gzsl => "gzsl",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TopK {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub map: f64,
    pub per_k: Vec<TopK>,
}

/// Mean over the positives of the precision at each positive's rank, with
/// images ranked by descending score. `None` without positives.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), truth.len());
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

/// Unweighted mean AP over `labels`; labels without positives are skipped.
pub fn map(table: &ScoreTable, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Eval("mAP over an empty label subset".into()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for &c in labels {
        let (scores, truth) = table.column(c);
        match average_precision(&scores, &truth) {
            Some(ap) => {
                sum += ap;
                used += 1;
            }
            None => debug!("label {c} has no positive images; excluded from mAP"),
        }
    }
    if used == 0 {
        return Err(Error::Eval("no label in the subset has a positive image".into()));
    }
    if used < labels.len() {
        debug!("mAP over {used} of {} labels", labels.len());
    }
    Ok(sum / used as f64)
}

/// Micro-averaged precision, recall and F1 of each image's top `k` labels
/// within `labels`.
pub fn topk_prf(table: &ScoreTable, k: usize, labels: &[usize]) -> Result<TopK> {
    if k == 0 || k > labels.len() {
        return Err(Error::Eval(format!(
            "k = {k} out of range for {} labels",
            labels.len()
        )));
    }
    let mut hits = 0usize;
    let mut positives = 0usize;
    for i in 0..table.num_images() {
        let scores: Vec<f64> = labels.iter().map(|&c| table.score(i, c)).collect();
        for j in rank_labels(&scores, k)? {
            if table.truth(i, labels[j]) {
                hits += 1;
            }
        }
        positives += labels.iter().filter(|&&c| table.truth(i, c)).count();
    }
    let precision = hits as f64 / (k * table.num_images()) as f64;
    let recall = if positives == 0 {
        0.0
    } else {
        hits as f64 / positives as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(TopK {
        k,
        precision,
        recall,
        f1,
    })
}

/// mAP plus top-K metrics under a protocol. The table columns are the full
/// vocabulary of `space`.
pub fn evaluate(table: &ScoreTable, space: &LabelSpace, protocol: Protocol, ks: &[usize]) -> Result<EvalReport> {
    if table.num_labels() != space.num_labels() {
        return Err(Error::shape(format!(
            "score table has {} labels, label space {}",
            table.num_labels(),
            space.num_labels()
        )));
    }
    let labels = match protocol {
        Protocol::Zsl => {
            let unseen = space.unseen_indices();
            if unseen.is_empty() {
                return Err(Error::Eval("zsl evaluation needs at least one unseen label".into()));
            }
            unseen
        }
        Protocol::Gzsl => space.indices(Subset::All),
    };
    let map = map(table, &labels)?;
    let per_k = ks
        .iter()
        .map(|&k| topk_prf(table, k, &labels))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { protocol, map, per_k })
}

/// Monte-Carlo mean mAP of uniformly random scores over `labels`.
pub fn random_baseline_map(table: &ScoreTable, labels: &[usize], trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::config("random baseline needs at least one trial"));
    }
    let mut rng = Rng::new(seed);
    let n = table.num_images() * table.num_labels();
    let mut total = 0.0;
    for _ in 0..trials {
        let scores = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
        total += map(&table.with_scores(scores)?, labels)?;
    }
    Ok(total / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        let ap = average_precision(&[3.0, 2.0, 1.0], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[1.0, 2.0], &[false, false]), None);
    }

    #[test]
    fn ap_ties_break_by_index() {
        // all tied: order is 0,1,2 so the positive at index 2 sits at rank 3
        let ap = average_precision(&[1.0, 1.0, 1.0], &[false, false, true]).unwrap();
        assert!((ap - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn map_examples() {
        let t = ScoreTable::new(2, 2, vec![0.9, 0.1, 0.2, 0.8], vec![true, false, false, true]).unwrap();
        assert_eq!(map(&t, &[0]).unwrap(), 1.0);
        // label 0 perfect; label 1 has its positive at rank 2 -> AP 0.5
        let t = ScoreTable::new(2, 2, vec![0.9, 0.9, 0.2, 0.1], vec![true, false, false, true]).unwrap();
        assert_eq!(map(&t, &[0, 1]).unwrap(), 0.75);
        assert!(map(&t, &[]).is_err());
        let none = ScoreTable::new(2, 1, vec![0.1, 0.2], vec![false, false]).unwrap();
        assert!(map(&none, &[0]).is_err());
    }

    #[test]
    fn topk_examples() {
        let t = ScoreTable::new(1, 6, vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4], vec![true, false, true, true, true, false])
            .unwrap();
        let r = topk_prf(&t, 3, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 0.5).abs() < 1e-15);
        assert!((r.f1 - 4.0 / 7.0).abs() < 1e-15);

        let perfect = ScoreTable::new(2, 3, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0], vec![true, true, false, false, true, true])
            .unwrap();
        let r = topk_prf(&perfect, 2, &[0, 1, 2]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        assert!(topk_prf(&perfect, 4, &[0, 1, 2]).is_err());
    }

    #[test]
    fn table_validation() {
        assert!(ScoreTable::new(1, 2, vec![0.0], vec![true, false]).is_err());
        assert!(ScoreTable::new(1, 1, vec![f64::NAN], vec![true]).is_err());
    }
}
