//! Analytic gradients of the full training loss against central finite
//! differences on a micro model.

use epsilon_core::embedding::{LabelSpace, Subset};
use epsilon_core::model::{forward, Branches, EpsilonParams, ModelConfig};
use epsilon_core::objective::{total_loss_var, LossConfig, RegularizerMode, SampleLabels};
use epsilon_core::rng::Rng;
use epsilon_core::tensor::finite_diff_check_many;
use epsilon_core::{Graph, Tensor};

fn micro(branches: Branches, project_kv: bool) -> ModelConfig {
    ModelConfig {
        groups: 2,
        token_dim: 8,
        num_tokens: 4,
        embed_dim: 6,
        encoder_layers: 1,
        encoder_heads: 1,
        mlp_hidden: 8,
        branches,
        project_kv,
    }
}

fn space(rng: &mut Rng) -> LabelSpace {
    let c = 5;
    let emb = Tensor::new(vec![c, 6], (0..c * 6).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
    let names = (0..c).map(|i| format!("l{i}")).collect();
    LabelSpace::new(names, vec![true, true, true, true, false], emb).unwrap()
}

fn check(cfg: &ModelConfig, loss_cfg: &LossConfig, seed: u64) -> Vec<(String, f64)> {
    let mut rng = Rng::new(seed);
    let params = EpsilonParams::init(cfg, &mut rng).unwrap();
    let space = space(&mut rng);
    let feats = Tensor::new(vec![2, 4, 8], (0..64).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
    let labels = vec![
        SampleLabels::new(vec![true, false, true, false]),
        SampleLabels::new(vec![false, false, false, true]),
    ];
    let seen = space.subset_embeddings(Subset::Seen).unwrap();
    let named = params.named();
    let leaves: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
    let errs = finite_diff_check_many(
        |g: &mut Graph, vars| {
            let p = params.with_leaves(vars.to_vec())?;
            let f = g.constant(feats.clone());
            let out = forward(g, cfg, f, &p)?;
            let e = g.constant(seen.clone());
            total_loss_var(g, out.s, &labels, e, loss_cfg)
        },
        &leaves,
        1e-6,
    )
    .unwrap();
    named.into_iter().map(|(n, _)| n).zip(errs).collect()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let errs = check(&micro(Branches::Full, true), &LossConfig::default(), 0);
    for (n, e) in &errs {
        println!("{n}: {e:.3e}");
    }
    let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    assert!(worst < 1e-5, "{errs:?}");
}

#[test]
fn model_variants_gradients_match_finite_differences() {
    let per_dim = LossConfig {
        regularizer: RegularizerMode::PerDimension,
        ..LossConfig::default()
    };
    let cases = [
        (micro(Branches::GpaOnly, true), LossConfig::default()),
        (micro(Branches::GfpOnly, true), LossConfig::default()),
        (micro(Branches::Full, false), LossConfig::default()),
        (micro(Branches::Full, true), per_dim),
    ];
    for (i, (cfg, loss)) in cases.iter().enumerate() {
        let errs = check(cfg, loss, 10 + i as u64);
        let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        assert!(worst < 1e-5, "case {i}: {errs:?}");
    }
}
