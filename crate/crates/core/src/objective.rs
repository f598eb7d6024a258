//! Training objective: normalized pairwise ranking loss over seen labels,
//! a per-sample label-diversity weight, and a variance regularizer on the
//! semantic vectors, blended by `lambda`.

use crate::embedding::{LabelSpace, SemanticGroup, Subset};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// How the regularizer reduces a semantic group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizerMode {
    /// Variance of each row over its `d_w` components, summed over rows.
    PerRow,
    /// Variance of each component across the `M` rows, summed over components.
    PerDimension,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the regularizer; the ranking term gets `1 - lambda`.
    pub lambda: f64,
    pub regularizer: RegularizerMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            regularizer: RegularizerMode::PerRow,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Presence of each seen label in one image, in ascending seen-label order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleLabels {
    present: Vec<bool>,
}

impl SampleLabels {
    pub fn new(present: Vec<bool>) -> Self {
        Self { present }
    }

    /// Restricts a full-vocabulary label row to the seen labels of `space`.
    pub fn from_full_row(row: &[bool], space: &LabelSpace) -> Result<Self> {
        if row.len() != space.num_labels() {
            return Err(Error::shape(format!(
                "label row has {} entries for {} labels",
                row.len(),
                space.num_labels()
            )));
        }
        Ok(Self::new(space.seen_indices().into_iter().map(|c| row[c]).collect()))
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    /// Positions (into the seen list) of labels present in the image.
    pub fn positives(&self) -> Vec<usize> {
        (0..self.present.len()).filter(|&i| self.present[i]).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        (0..self.present.len()).filter(|&i| !self.present[i]).collect()
    }

    /// Ranking terms need at least one positive and one negative.
    pub fn is_rankable(&self) -> bool {
        self.present.iter().any(|&p| p) && self.present.iter().any(|&p| !p)
    }
}

/// `ω = 1 + var(y)` with the population variance of the 0/1 indicator vector.
pub fn diversity_weight(labels: &SampleLabels) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 1.0;
    }
    let p = labels.positives().len() as f64 / n as f64;
    // population variance of a 0/1 vector with mean p
    1.0 + p * (1.0 - p)
}

/// Max-over-groups scores of every seen label: `B × M × d_w` semantic
/// groups against `C_s × d_w` embeddings gives `B × C_s`.
pub fn seen_scores(g: &mut Graph, s: Var, seen_embeddings: Var) -> Result<Var> {
    let et = g.transpose(seen_embeddings)?;
    let dots = g.matmul(s, et)?;
    let axis = g.shape(dots).len() - 2;
    g.max(dots, axis, false)
}

/// `τ_jk = score(neg_j) − score(pos_k)` as a `|T̄| × |T|` matrix, or `None`
/// when the sample has no positive or no negative.
pub fn tau_var(g: &mut Graph, scores: Var, labels: &SampleLabels) -> Result<Option<Var>> {
    if g.shape(scores) != [labels.len()] {
        return Err(Error::shape(format!(
            "scores {:?} do not match {} seen labels",
            g.shape(scores),
            labels.len()
        )));
    }
    if !labels.is_rankable() {
        return Ok(None);
    }
    let (pos, neg) = (labels.positives(), labels.negatives());
    let p = g.index_select(scores, 0, &pos)?;
    let p = g.reshape(p, &[1, pos.len()])?;
    let n = g.index_select(scores, 0, &neg)?;
    let n = g.reshape(n, &[neg.len(), 1])?;
    Ok(Some(g.sub(n, p)?))
}

/// `α · Σ log(1 + e^τ)` with `α = 1 / (|T| |T̄|)`.
pub fn ranknet_var(g: &mut Graph, scores: Var, labels: &SampleLabels) -> Result<Option<Var>> {
    let Some(tau) = tau_var(g, scores, labels)? else {
        return Ok(None);
    };
    let pairs = g.value(tau).numel() as f64;
    let soft = g.log1pexp(tau);
    let total = g.sum_all(soft);
    Ok(Some(g.scale(total, 1.0 / pairs)))
}

/// Regularizer per sample of a `B × M × d_w` batch, as a length-`B` vector.
pub fn regularizer_var(g: &mut Graph, s: Var, mode: RegularizerMode) -> Result<Var> {
    if g.shape(s).len() != 3 {
        return Err(Error::shape(format!("semantic batch must be B x M x d_w, got {:?}", g.shape(s))));
    }
    let axis = match mode {
        RegularizerMode::PerRow => 2,
        RegularizerMode::PerDimension => 1,
    };
    let v = g.variance(s, axis, false)?;
    let total = g.sum(v, 1, false)?;
    Ok(g.abs(total))
}

/// Batch loss `(1/B) Σ_i [ω_i (1−λ) L_r(S_i) + λ L_reg(S_i)]`. Samples
/// without a positive or a negative contribute only their regularizer term.
pub fn total_loss_var(
    g: &mut Graph,
    s: Var,
    labels: &[SampleLabels],
    seen_embeddings: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!("semantic batch must be B x M x d_w, got {shape:?}")));
    }
    let b = shape[0];
    if b == 0 || labels.is_empty() {
        return Err(Error::Eval("empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::shape(format!("{} label rows for a batch of {b}", labels.len())));
    }
    let mut total: Option<Var> = None;
    if cfg.lambda < 1.0 {
        let scores = seen_scores(g, s, seen_embeddings)?;
        let c = g.shape(scores)[1];
        for (i, y) in labels.iter().enumerate() {
            if !y.is_rankable() {
                continue;
            }
            let row = g.narrow(scores, 0, i, 1)?;
            let row = g.reshape(row, &[c])?;
            let Some(rank) = ranknet_var(g, row, y)? else { continue };
            let term = g.scale(rank, diversity_weight(y) * (1.0 - cfg.lambda));
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    if cfg.lambda > 0.0 {
        let reg = regularizer_var(g, s, cfg.regularizer)?;
        let reg = g.sum_all(reg);
        let term = g.scale(reg, cfg.lambda);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => {
            // nothing rankable and lambda = 0: a zero loss still tied to s
            let z = g.scale(s, 0.0);
            g.sum_all(z)
        }
    };
    Ok(g.scale(total, 1.0 / b as f64))
}

fn group_var(g: &mut Graph, s: &SemanticGroup) -> Result<Var> {
    let v = g.constant(s.vectors().clone());
    g.reshape(v, &[1, s.num_groups(), s.dim()])
}

fn seen_table(g: &mut Graph, space: &LabelSpace, dim: usize) -> Result<Var> {
    if dim != space.dim() {
        return Err(Error::shape(format!(
            "semantic width {dim} does not match embedding width {}",
            space.dim()
        )));
    }
    Ok(g.constant(space.subset_embeddings(Subset::Seen)?))
}

/// Plain-tensor τ matrix for one image.
pub fn tau_matrix(s: &SemanticGroup, labels: &SampleLabels, space: &LabelSpace) -> Result<Option<Tensor>> {
    let mut g = Graph::new();
    let sv = group_var(&mut g, s)?;
    let e = seen_table(&mut g, space, s.dim())?;
    let scores = seen_scores(&mut g, sv, e)?;
    let scores = g.reshape(scores, &[labels.len()])?;
    Ok(tau_var(&mut g, scores, labels)?.map(|t| g.value(t).clone()))
}

/// Plain-tensor ranking loss for one image; `None` when it is skipped.
pub fn ranknet(s: &SemanticGroup, labels: &SampleLabels, space: &LabelSpace) -> Result<Option<f64>> {
    let mut g = Graph::new();
    let sv = group_var(&mut g, s)?;
    let e = seen_table(&mut g, space, s.dim())?;
    let scores = seen_scores(&mut g, sv, e)?;
    let scores = g.reshape(scores, &[labels.len()])?;
    Ok(ranknet_var(&mut g, scores, labels)?.map(|v| g.value(v).item()))
}

pub fn regularizer(s: &SemanticGroup, mode: RegularizerMode) -> Result<f64> {
    let mut g = Graph::new();
    let sv = group_var(&mut g, s)?;
    let r = regularizer_var(&mut g, sv, mode)?;
    Ok(g.value(r).item())
}

/// Plain-tensor batch loss for `B × M × d_w` semantic groups.
pub fn total_loss(s: &Tensor, labels: &[SampleLabels], space: &LabelSpace, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if s.rank() != 3 {
        return Err(Error::shape(format!("semantic batch must be B x M x d_w, got {:?}", s.shape())));
    }
    let mut g = Graph::new();
    let sv = g.constant(s.clone());
    let e = seen_table(&mut g, space, s.shape()[2])?;
    let loss = total_loss_var(&mut g, sv, labels, e, cfg)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal(c: usize) -> LabelSpace {
        let names = (0..c).map(|i| format!("c{i}")).collect();
        LabelSpace::new(names, vec![true; c], Tensor::eye(c)).unwrap()
    }

    fn group(rows: &[Vec<f64>]) -> SemanticGroup {
        SemanticGroup::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn zero_semantics_give_zero_tau_and_ln2() {
        let space = orthonormal(4);
        let s = group(&[vec![0.0; 4], vec![0.0; 4]]);
        for y in [[true, false, false, false], [true, true, false, false], [false, true, true, true]] {
            let y = SampleLabels::new(y.to_vec());
            let tau = tau_matrix(&s, &y, &space).unwrap().unwrap();
            assert!(tau.data().iter().all(|&t| t == 0.0));
            let r = ranknet(&s, &y, &space).unwrap().unwrap();
            assert!((r - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn orthonormal_single_positive() {
        let space = orthonormal(4);
        let s = group(&[vec![0.0, 1.0, 0.0, 0.0]]);
        let y = SampleLabels::new(vec![false, true, false, false]);
        let tau = tau_matrix(&s, &y, &space).unwrap().unwrap();
        assert_eq!(tau.shape(), &[3, 1]);
        assert!(tau.data().iter().all(|&t| t == -1.0));
    }

    #[test]
    fn single_pair_value() {
        let space = orthonormal(2);
        let s = group(&[vec![1.0, 0.0]]);
        let y = SampleLabels::new(vec![true, false]);
        let r = ranknet(&s, &y, &space).unwrap().unwrap();
        assert!((r - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((r - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn unrankable_samples_are_skipped() {
        let space = orthonormal(3);
        let s = group(&[vec![1.0, 2.0, 3.0]]);
        for y in [vec![false; 3], vec![true; 3]] {
            let y = SampleLabels::new(y);
            assert!(tau_matrix(&s, &y, &space).unwrap().is_none());
            assert!(ranknet(&s, &y, &space).unwrap().is_none());
        }
    }

    #[test]
    fn diversity_weight_examples() {
        assert_eq!(diversity_weight(&SampleLabels::new(vec![false; 4])), 1.0);
        assert_eq!(diversity_weight(&SampleLabels::new(vec![true; 4])), 1.0);
        assert_eq!(diversity_weight(&SampleLabels::new(vec![true, true, false, false])), 1.25);
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(regularizer(&group(&[vec![2.0; 3], vec![-1.0; 3]]), RegularizerMode::PerRow).unwrap(), 0.0);
        assert_eq!(regularizer(&group(&[vec![1.0, -1.0]]), RegularizerMode::PerRow).unwrap(), 1.0);
        let s = group(&[vec![0.5, -1.0, 2.0], vec![3.0, 0.0, 1.0]]);
        let s3 = group(&[vec![1.5, -3.0, 6.0], vec![9.0, 0.0, 3.0]]);
        let (a, b) = (
            regularizer(&s, RegularizerMode::PerRow).unwrap(),
            regularizer(&s3, RegularizerMode::PerRow).unwrap(),
        );
        assert!((b - 9.0 * a).abs() < 1e-12);
        // per-dimension: columns [0.5,3], [-1,0], [2,1] -> 1.5625 + 0.25 + 0.25
        let d = regularizer(&s, RegularizerMode::PerDimension).unwrap();
        assert!((d - 2.0625).abs() < 1e-15);
    }

    #[test]
    fn constant_rows_regularize_to_exactly_zero() {
        // 0.1 summed three times and divided by three is not 0.1 in floating point
        for c in [0.1, -7.3, 1e6 + 0.1, 3.0f64.sqrt()] {
            for d in [3, 7, 31] {
                let s = group(&[vec![c; d], vec![-c / 3.0; d]]);
                assert_eq!(regularizer(&s, RegularizerMode::PerRow).unwrap(), 0.0, "{c} x {d}");
            }
        }
    }

    #[test]
    fn blend_endpoints() {
        let space = orthonormal(3);
        let s = Tensor::new(vec![2, 1, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 2.0]).unwrap();
        let labels = vec![
            SampleLabels::new(vec![true, false, false]),
            SampleLabels::new(vec![false, true, true]),
        ];
        let rows: Vec<SemanticGroup> = (0..2)
            .map(|i| group(&[s.data()[i * 3..(i + 1) * 3].to_vec()]))
            .collect();
        let cfg = |lambda| LossConfig {
            lambda,
            regularizer: RegularizerMode::PerRow,
        };
        let rank: f64 = (0..2)
            .map(|i| diversity_weight(&labels[i]) * ranknet(&rows[i], &labels[i], &space).unwrap().unwrap())
            .sum::<f64>()
            / 2.0;
        let reg: f64 = rows.iter().map(|r| regularizer(r, RegularizerMode::PerRow).unwrap()).sum::<f64>() / 2.0;
        assert!((total_loss(&s, &labels, &space, &cfg(0.0)).unwrap() - rank).abs() < 1e-15);
        assert!((total_loss(&s, &labels, &space, &cfg(1.0)).unwrap() - reg).abs() < 1e-15);
        let mid = total_loss(&s, &labels, &space, &cfg(0.3)).unwrap();
        assert!((mid - (0.7 * rank + 0.3 * reg)).abs() < 1e-12);
    }

    #[test]
    fn skipped_sample_still_counts_in_batch() {
        let space = orthonormal(2);
        let s = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 3.0, -1.0]).unwrap();
        let labels = vec![SampleLabels::new(vec![true, false]), SampleLabels::new(vec![true, true])];
        let cfg = LossConfig {
            lambda: 0.5,
            regularizer: RegularizerMode::PerRow,
        };
        let r0 = (1.0 + (-1.0f64).exp()).ln() * 1.25;
        // row variances: [1,0] -> 0.25, [3,-1] -> 4
        let expect = (0.5 * r0 + 0.5 * 0.25 + 0.5 * 4.0) / 2.0;
        assert!((total_loss(&s, &labels, &space, &cfg).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs() {
        let space = orthonormal(2);
        let s = Tensor::zeros(&[1, 1, 2]);
        assert!(total_loss(&s, &[], &space, &LossConfig::default()).is_err());
        let bad = LossConfig {
            lambda: 1.5,
            ..LossConfig::default()
        };
        assert!(total_loss(&s, &[SampleLabels::new(vec![true, false])], &space, &bad).is_err());
        assert!(total_loss(&Tensor::zeros(&[1, 1, 3]), &[SampleLabels::new(vec![true, false])], &space, &LossConfig::default()).is_err());
    }
}
