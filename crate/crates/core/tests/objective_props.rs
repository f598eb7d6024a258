//! Loss properties against naive scalar recomputations.

use epsilon_core::embedding::{LabelSpace, SemanticGroup};
use epsilon_core::objective::{
    diversity_weight, ranknet, regularizer, tau_matrix, total_loss, LossConfig, RegularizerMode, SampleLabels,
};
use epsilon_core::Tensor;
use proptest::prelude::*;

fn space_from(rows: &[Vec<f64>]) -> LabelSpace {
    let names = (0..rows.len()).map(|i| format!("c{i}")).collect();
    LabelSpace::new(names, vec![true; rows.len()], Tensor::from_rows(rows).unwrap()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn naive_score(s: &[Vec<f64>], e: &[f64]) -> f64 {
    s.iter().map(|r| dot(r, e)).fold(f64::NEG_INFINITY, f64::max)
}

fn naive_ranknet(s: &[Vec<f64>], emb: &[Vec<f64>], y: &[bool]) -> f64 {
    let (mut sum, mut pairs) = (0.0, 0.0);
    for j in 0..y.len() {
        for k in 0..y.len() {
            if !y[j] && y[k] {
                let tau = naive_score(s, &emb[j]) - naive_score(s, &emb[k]);
                sum += (1.0 + tau.exp()).ln();
                pairs += 1.0;
            }
        }
    }
    sum / pairs
}

fn naive_reg(s: &[Vec<f64>]) -> f64 {
    s.iter()
        .map(|r| {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / r.len() as f64
        })
        .sum()
}

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<bool>)> {
    (1usize..4, 2usize..6, 2usize..5).prop_flat_map(|(m, c, d)| {
        (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), m),
            prop::collection::vec(prop::collection::vec(0.1f64..2.0, d), c),
            prop::collection::vec(any::<bool>(), c),
        )
    })
}

fn rankable(y: &[bool]) -> bool {
    y.iter().any(|&b| b) && y.iter().any(|&b| !b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tau_and_ranknet_match_loops((s, emb, y) in instance()) {
        prop_assume!(rankable(&y));
        let space = space_from(&emb);
        let g = SemanticGroup::new(Tensor::from_rows(&s).unwrap()).unwrap();
        let labels = SampleLabels::new(y.clone());
        let tau = tau_matrix(&g, &labels, &space).unwrap().unwrap();
        let (neg, pos) = (labels.negatives(), labels.positives());
        prop_assert_eq!(tau.shape(), &[neg.len(), pos.len()][..]);
        for (a, &j) in neg.iter().enumerate() {
            for (b, &k) in pos.iter().enumerate() {
                let expect = naive_score(&s, &emb[j]) - naive_score(&s, &emb[k]);
                prop_assert!((tau.get(&[a, b]) - expect).abs() < 1e-12);
            }
        }
        let r = ranknet(&g, &labels, &space).unwrap().unwrap();
        prop_assert!((r - naive_ranknet(&s, &emb, &y)).abs() < 1e-12);
        prop_assert!(r > 0.0);
        prop_assert!((regularizer(&g, RegularizerMode::PerRow).unwrap() - naive_reg(&s)).abs() < 1e-12);
    }

    #[test]
    fn ranknet_is_monotone_in_scores(
        s in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..4),
        y in prop::collection::vec(any::<bool>(), 4),
        bump in 0.01f64..0.5,
    ) {
        prop_assume!(rankable(&y));
        // axis embeddings: shifting every row along e_c raises only score(c)
        let emb: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
        let space = space_from(&emb);
        let labels = SampleLabels::new(y.clone());
        let g = SemanticGroup::new(Tensor::from_rows(&s).unwrap()).unwrap();
        let base = ranknet(&g, &labels, &space).unwrap().unwrap();
        for (c, &present) in y.iter().enumerate() {
            let shifted: Vec<Vec<f64>> = s.iter().map(|r| {
                let mut r = r.clone();
                r[c] += bump;
                r
            }).collect();
            let g2 = SemanticGroup::new(Tensor::from_rows(&shifted).unwrap()).unwrap();
            let after = ranknet(&g2, &labels, &space).unwrap().unwrap();
            if present {
                prop_assert!(after < base);
            } else {
                prop_assert!(after > base);
            }
        }
    }

    #[test]
    fn invariances((s, emb, y) in instance(), rot in 0usize..4) {
        prop_assume!(rankable(&y));
        let labels = SampleLabels::new(y.clone());
        let space = space_from(&emb);
        let g = SemanticGroup::new(Tensor::from_rows(&s).unwrap()).unwrap();
        let base = ranknet(&g, &labels, &space).unwrap().unwrap();

        let mut rows = s.clone();
        let shift = rot % rows.len();
        rows.rotate_left(shift);
        let g2 = SemanticGroup::new(Tensor::from_rows(&rows).unwrap()).unwrap();
        prop_assert!((ranknet(&g2, &labels, &space).unwrap().unwrap() - base).abs() < 1e-12);

        let mut order: Vec<usize> = (0..emb.len()).collect();
        let shift = rot % order.len();
        order.rotate_left(shift);
        let emb2: Vec<Vec<f64>> = order.iter().map(|&i| emb[i].clone()).collect();
        let y2: Vec<bool> = order.iter().map(|&i| y[i]).collect();
        let r2 = ranknet(&g, &SampleLabels::new(y2), &space_from(&emb2)).unwrap().unwrap();
        prop_assert!((r2 - base).abs() < 1e-12);

        // duplicating every negative leaves the normalized loss unchanged
        let mut emb3 = emb.clone();
        let mut y3 = y.clone();
        for (e, &p) in emb.iter().zip(&y) {
            if !p {
                emb3.push(e.clone());
                y3.push(false);
            }
        }
        let r3 = ranknet(&g, &SampleLabels::new(y3), &space_from(&emb3)).unwrap().unwrap();
        prop_assert!((r3 - base).abs() < 1e-12);
    }

    #[test]
    fn weights_and_terms_are_bounded(y in prop::collection::vec(any::<bool>(), 1..40)) {
        let w = diversity_weight(&SampleLabels::new(y));
        prop_assert!((1.0..=1.25).contains(&w));
    }

    #[test]
    fn total_loss_is_finite_and_non_negative(
        (s, emb, y) in instance(),
        lambda in 0.0f64..=1.0,
        per_dim in any::<bool>(),
    ) {
        let space = space_from(&emb);
        let m = s.len();
        let d = s[0].len();
        let batch = Tensor::new(vec![1, m, d], s.concat()).unwrap();
        let mode = if per_dim { RegularizerMode::PerDimension } else { RegularizerMode::PerRow };
        let cfg = LossConfig { lambda, regularizer: mode };
        let l = total_loss(&batch, &[SampleLabels::new(y)], &space, &cfg).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }
}

#[test]
fn doubling_embeddings_with_negative_tau_lowers_loss() {
    let emb = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let s = vec![vec![2.0, -0.5, 0.3], vec![1.0, 0.2, -1.0]];
    let y = vec![true, false, false];
    let g = SemanticGroup::new(Tensor::from_rows(&s).unwrap()).unwrap();
    let labels = SampleLabels::new(y);
    let tau = tau_matrix(&g, &labels, &space_from(&emb)).unwrap().unwrap();
    assert!(tau.data().iter().all(|&t| t < 0.0));
    let base = ranknet(&g, &labels, &space_from(&emb)).unwrap().unwrap();
    let doubled: Vec<Vec<f64>> = emb.iter().map(|r| r.iter().map(|x| 2.0 * x).collect()).collect();
    let tau2 = tau_matrix(&g, &labels, &space_from(&doubled)).unwrap().unwrap();
    for (a, b) in tau.data().iter().zip(tau2.data()) {
        assert!((b - 2.0 * a).abs() < 1e-12);
    }
    // softplus is increasing, so τ -> 2τ < τ lowers every term
    let doubled_loss = ranknet(&g, &labels, &space_from(&doubled)).unwrap().unwrap();
    assert!(doubled_loss < base);
}

#[test]
fn hand_computed_micro_batch() {
    // two classes on the axes; M = 1; d_w = 2
    let emb = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
    let space = space_from(&emb);
    let s = Tensor::new(vec![2, 1, 2], vec![0.5, -0.5, 2.0, 1.0]).unwrap();
    let labels = vec![
        SampleLabels::new(vec![true, false, false]),
        SampleLabels::new(vec![false, true, true]),
    ];
    let cfg = LossConfig { lambda: 0.25, regularizer: RegularizerMode::PerRow };
    // sample 0: scores (0.5, -0.5, 0); τ = (-1, -0.5); ω = 1 + (1/3)(2/3)
    let r0 = ((1.0 + (-1.0f64).exp()).ln() + (1.0 + (-0.5f64).exp()).ln()) / 2.0;
    let w0 = 1.0 + 2.0 / 9.0;
    let reg0 = 0.25;
    // sample 1: scores (2, 1, 3); τ = (2-1, 2-3) for the single negative 0
    let r1 = ((1.0 + 1.0f64.exp()).ln() + (1.0 + (-1.0f64).exp()).ln()) / 2.0;
    let w1 = 1.0 + 2.0 / 9.0;
    let reg1 = 0.25;
    let expect = (w0 * 0.75 * r0 + 0.25 * reg0 + w1 * 0.75 * r1 + 0.25 * reg1) / 2.0;
    let got = total_loss(&s, &labels, &space, &cfg).unwrap();
    assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
}
