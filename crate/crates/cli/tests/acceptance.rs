//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Training runs use the CLI's default configuration.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use epsilon_cli::commands::synthetic_dataset;
use epsilon_cli::RunConfig;
use epsilon_core::datagen::{decode_features, encode_features, Dataset};
use epsilon_core::embedding::{LabelSpace, SemanticGroup, Subset};
use epsilon_core::metrics::{average_precision, map, random_baseline_map, topk_prf, ScoreTable};
use epsilon_core::model::{forward, infer, Branches, EpsilonParams, ModelConfig};
use epsilon_core::objective::{
    diversity_weight, ranknet, regularizer, total_loss_var, LossConfig, RegularizerMode, SampleLabels,
};
use epsilon_core::rng::Rng;
use epsilon_core::tensor::finite_diff_check_many;
use epsilon_core::trainer::{decode_checkpoint, encode_checkpoint, score_table, EvalConfig, Trainer};
use epsilon_core::{Graph, Tensor};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

const GRAD_TOL: f64 = 1e-5;
const GRAD_STEP: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(10);
const NORM_TOL: f64 = 1e-9;
const LN2_TOL: f64 = 1e-12;
const METRIC_TOL: f64 = 1e-12;
const METRIC_BUDGET: Duration = Duration::from_secs(5);
const SEEN_MAP_MIN: f64 = 0.90;
const ZSL_BASELINE_FACTOR: f64 = 2.0;
const BASELINE_TABLES: usize = 1000;
const TRANSFER_BUDGET: Duration = Duration::from_secs(120);
const SEEDS: [u64; 3] = [0, 1, 2];
const M_GRID: [usize; 4] = [2, 4, 8, 16];
const RESUME_EPOCH: usize = 3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
}

fn gradient_check() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = ModelConfig {
        groups: 2,
        encoder_layers: 1,
        encoder_heads: 1,
        mlp_hidden: 8,
        ..ModelConfig::new(8, 4, 6)
    };
    let mut rng = Rng::new(0);
    let params = EpsilonParams::init(&cfg, &mut rng)?;
    let emb = random_tensor(&[5, 6], &mut rng);
    let names = (0..5).map(|i| format!("l{i}")).collect();
    let space = LabelSpace::new(names, vec![true, true, true, true, false], emb)?;
    let seen = space.subset_embeddings(Subset::Seen)?;
    let feats = random_tensor(&[2, 4, 8], &mut rng);
    let labels = vec![
        SampleLabels::new(vec![true, false, true, false]),
        SampleLabels::new(vec![false, true, false, false]),
    ];
    let named = params.named();
    let leaves: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
    let errs = finite_diff_check_many(
        |g: &mut Graph, vars| {
            let p = params.with_leaves(vars.to_vec())?;
            let f = g.constant(feats.clone());
            let out = forward(g, &cfg, f, &p)?;
            let e = g.constant(seen.clone());
            total_loss_var(g, out.s, &labels, e, &LossConfig::default())
        },
        &leaves,
        GRAD_STEP,
    )?;
    let (worst_i, worst) = errs
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    let elapsed = start.elapsed();
    Ok(outcome(
        worst < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "max relative error {worst:.2e} ({}) over {} tensors, limit {GRAD_TOL:e}; {:.2?} of {:?}",
            named[worst_i].0,
            errs.len(),
            elapsed,
            GRAD_BUDGET
        ),
    ))
}

fn normalization() -> Result<Outcome> {
    let mut rng = Rng::new(1);
    let (mut violations, mut checked, mut worst) = (0usize, 0usize, 0.0f64);
    for i in 0..100 {
        let cfg = ModelConfig {
            groups: 1 + i % 4,
            encoder_heads: 2,
            project_kv: i % 2 == 0,
            ..ModelConfig::new(8, 3 + i % 5, 6)
        };
        let params = EpsilonParams::init(&cfg, &mut rng)?;
        let f = random_tensor(&[2, cfg.num_tokens, cfg.token_dim], &mut rng).map(|x| 2.0 * x);
        let trace = infer(&cfg, &params, &f)?;
        let n = cfg.num_tokens;
        let mut sums: Vec<f64> = trace
            .cross_attention
            .as_ref()
            .map(|a| a.data().chunks(n).map(|r| r.iter().sum()).collect())
            .unwrap_or_default();
        for w in &trace.head_weights {
            for b in 0..2 {
                for ch in 0..cfg.token_dim {
                    sums.push((0..n).map(|t| w.get(&[b, t, ch])).sum());
                }
            }
        }
        for s in sums {
            let dev = (s - 1.0).abs();
            worst = worst.max(dev);
            violations += (dev > NORM_TOL) as usize;
            checked += 1;
        }
    }
    Ok(outcome(
        violations == 0,
        format!("{violations} violations in {checked} sums over 100 forwards, max deviation {worst:.1e}"),
    ))
}

fn bits(n: usize, v: usize) -> Vec<bool> {
    (0..n).map(|i| v >> i & 1 == 1).collect()
}

fn loss_anchors() -> Result<Outcome> {
    let c = 6;
    let names = (0..c).map(|i| format!("c{i}")).collect();
    let mut rng = Rng::new(2);
    let space = LabelSpace::new(names, vec![true; c], random_tensor(&[c, 5], &mut rng))?;
    let zero = SemanticGroup::new(Tensor::zeros(&[3, 5]))?;
    let mut ln2_dev = 0.0f64;
    for v in 1..(1 << c) - 1 {
        let r = ranknet(&zero, &SampleLabels::new(bits(c, v)), &space)?.expect("rankable split");
        ln2_dev = ln2_dev.max((r - LN_2).abs());
    }
    let (mut w_lo, mut w_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for n in 1..=12 {
        for v in 0..1usize << n {
            let w = diversity_weight(&SampleLabels::new(bits(n, v)));
            w_lo = w_lo.min(w);
            w_hi = w_hi.max(w);
        }
    }
    let mut reg_max = 0.0f64;
    for _ in 0..200 {
        let (m, d) = (1 + rng.range_inclusive(0, 7), 1 + rng.range_inclusive(0, 31));
        let rows: Vec<f64> = (0..m).flat_map(|_| vec![rng.normal(0.0, 3.0); d]).collect();
        let s = SemanticGroup::new(Tensor::new(vec![m, d], rows)?)?;
        reg_max = reg_max.max(regularizer(&s, RegularizerMode::PerRow)?.abs());
    }
    Ok(outcome(
        ln2_dev <= LN2_TOL && w_lo >= 1.0 && w_hi <= 1.25 && reg_max == 0.0,
        format!(
            "ranknet at S=0 within {ln2_dev:.1e} of ln 2 over {} splits; omega in [{w_lo}, {w_hi}]; max regularizer on constant rows {reg_max:e}",
            (1 << c) - 2
        ),
    ))
}

/// `j` outranks `i` when it scores higher, or ties with a lower index.
fn outranks(s: &[f64], j: usize, i: usize) -> bool {
    s[j] > s[i] || (s[j] == s[i] && j < i)
}

fn brute_ap(s: &[f64], t: &[bool]) -> Option<f64> {
    let pos: Vec<usize> = (0..s.len()).filter(|&i| t[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &pos {
        let rank = 1 + (0..s.len()).filter(|&j| outranks(s, j, i)).count();
        let hits = 1 + pos.iter().filter(|&&j| outranks(s, j, i)).count();
        total += hits as f64 / rank as f64;
    }
    Some(total / pos.len() as f64)
}

fn metric_oracles() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = Rng::new(3);
    let (mut worst, mut ties) = (0.0f64, 0usize);
    for _ in 0..200 {
        let (b, c) = (rng.range_inclusive(1, 8), rng.range_inclusive(2, 6));
        // a coarse grid forces ties
        let scores: Vec<f64> = (0..b * c).map(|_| rng.range_inclusive(0, 3) as f64 / 4.0).collect();
        let truth: Vec<bool> = (0..b * c).map(|_| rng.uniform(0.0, 1.0) < 0.4).collect();
        let table = ScoreTable::new(b, c, scores.clone(), truth.clone())?;
        let labels: Vec<usize> = (0..c).collect();
        let mut aps = Vec::new();
        for l in 0..c {
            let col: Vec<f64> = (0..b).map(|i| scores[i * c + l]).collect();
            let tc: Vec<bool> = (0..b).map(|i| truth[i * c + l]).collect();
            ties += (1..b).any(|i| col[..i].contains(&col[i])) as usize;
            let want = brute_ap(&col, &tc);
            match (average_precision(&col, &tc), want) {
                (Some(a), Some(w)) => worst = worst.max((a - w).abs()),
                (None, None) => {}
                _ => worst = f64::INFINITY,
            }
            aps.extend(want);
        }
        if !aps.is_empty() {
            let want = aps.iter().sum::<f64>() / aps.len() as f64;
            worst = worst.max((map(&table, &labels)? - want).abs());
        }
        for k in 1..=c {
            let (mut hits, mut pos) = (0usize, 0usize);
            for i in 0..b {
                let row = &scores[i * c..(i + 1) * c];
                for l in 0..c {
                    let rank = (0..c).filter(|&j| outranks(row, j, l)).count();
                    hits += (rank < k && truth[i * c + l]) as usize;
                    pos += truth[i * c + l] as usize;
                }
            }
            let p = hits as f64 / (k * b) as f64;
            let r = if pos == 0 { 0.0 } else { hits as f64 / pos as f64 };
            let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            let got = topk_prf(&table, k, &labels)?;
            for (a, w) in [(got.precision, p), (got.recall, r), (got.f1, f)] {
                worst = worst.max((a - w).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    Ok(outcome(
        worst <= METRIC_TOL && elapsed < METRIC_BUDGET && ties > 0,
        format!(
            "max deviation {worst:.1e} over 200 instances ({ties} tied columns); {elapsed:.2?} of {METRIC_BUDGET:?}"
        ),
    ))
}

/// One training run and what the criteria read from it.
struct Run {
    zsl: f64,
    seen: f64,
    baseline: f64,
    history: String,
    checkpoint: Vec<u8>,
    elapsed: Duration,
}

fn config(seed: u64, groups: usize, branches: Branches) -> RunConfig {
    RunConfig {
        seed,
        groups,
        branches,
        ..RunConfig::default()
    }
}

fn history_text(t: &Trainer) -> String {
    t.history().iter().map(|r| r.to_json() + "\n").collect()
}

fn train(cfg: &RunConfig, data: &Dataset) -> Result<Run> {
    let start = Instant::now();
    let mut t = Trainer::new(data, cfg.model(), cfg.optim(), cfg.loss(), cfg.eval())?;
    t.fit(None)?;
    let table = score_table(t.model(), t.params(), &data.test, &data.space)?;
    let seen = map(&table, &data.space.seen_indices())?;
    let elapsed = start.elapsed();
    let baseline = random_baseline_map(&table, &data.space.unseen_indices(), BASELINE_TABLES, cfg.seed)?;
    Ok(Run {
        zsl: t.last_reports()[0].map,
        seen,
        baseline,
        history: history_text(&t),
        checkpoint: encode_checkpoint(&t.checkpoint()),
        elapsed,
    })
}

struct Runs {
    data: BTreeMap<u64, Dataset>,
    runs: BTreeMap<(u64, usize, u32), Run>,
}

impl Runs {
    fn get(&mut self, seed: u64, groups: usize, branches: Branches) -> Result<&Run> {
        let key = (seed, groups, branches.code());
        if !self.runs.contains_key(&key) {
            let cfg = config(seed, groups, branches);
            if !self.data.contains_key(&seed) {
                let d = synthetic_dataset(&cfg.synth())?;
                self.data.insert(seed, d);
            }
            let run = train(&cfg, &self.data[&seed])?;
            eprintln!(
                "  seed {seed} M {groups} {branches:?}: zsl {:.4} seen {:.4} ({:.1?})",
                run.zsl, run.seen, run.elapsed
            );
            self.runs.insert(key, run);
        }
        Ok(&self.runs[&key])
    }

    fn mean_zsl(&mut self, groups: usize, branches: Branches) -> Result<f64> {
        let mut total = 0.0;
        for seed in SEEDS {
            total += self.get(seed, groups, branches)?.zsl;
        }
        Ok(total / SEEDS.len() as f64)
    }
}

fn transfer(runs: &mut Runs) -> Result<Outcome> {
    let defaults = RunConfig::default();
    let r = runs.get(defaults.seed, defaults.groups, defaults.branches)?;
    let threshold = ZSL_BASELINE_FACTOR * r.baseline;
    let (a, b) = (r.seen >= SEEN_MAP_MIN, r.zsl >= threshold);
    Ok(outcome(
        a && b && r.elapsed < TRANSFER_BUDGET,
        format!(
            "(a) seen mAP {:.4} vs {SEEN_MAP_MIN} {}; (b) zsl mAP {:.4} vs {ZSL_BASELINE_FACTOR} x random baseline {:.4} = {threshold:.4} {}; {:.1?} of {TRANSFER_BUDGET:?}",
            r.seen,
            if a { "ok" } else { "short" },
            r.zsl,
            r.baseline,
            if b { "ok" } else { "short" },
            r.elapsed
        ),
    ))
}

fn m_curve(runs: &mut Runs) -> Result<Outcome> {
    let mut means = Vec::new();
    for m in M_GRID {
        means.push((m, runs.mean_zsl(m, Branches::Full)?));
    }
    let best = means.iter().fold(means[0], |a, &b| if b.1 > a.1 { b } else { a });
    let curve: Vec<String> = means.iter().map(|(m, z)| format!("M{m} {z:.4}")).collect();
    Ok(outcome(
        best.0 != *M_GRID.last().unwrap(),
        format!("seed-averaged zsl mAP {}; max at M={}", curve.join(", "), best.0),
    ))
}

fn determinism(runs: &mut Runs) -> Result<Outcome> {
    let cfg = RunConfig::default();
    let first = runs.get(cfg.seed, cfg.groups, cfg.branches)?;
    let (history, checkpoint) = (first.history.clone(), first.checkpoint.clone());
    let data = &runs.data[&cfg.seed];

    let again = train(&cfg, data)?;
    let same_run = again.history == history && again.checkpoint == checkpoint;

    let mut t = Trainer::new(data, cfg.model(), cfg.optim(), cfg.loss(), cfg.eval())?;
    t.fit(Some(RESUME_EPOCH))?;
    let mut resumed_history = history_text(&t);
    let ckpt_bytes = encode_checkpoint(&t.checkpoint());
    let ckpt = decode_checkpoint(&ckpt_bytes, Path::new("resume.epsc"))?;
    let ckpt_round_trip = encode_checkpoint(&ckpt) == ckpt_bytes;
    let mut r = Trainer::resume(data, ckpt, EvalConfig { ks: cfg.ks.clone() })?;
    r.fit(None)?;
    resumed_history.push_str(&history_text(&r));
    let same_resume = resumed_history == history && encode_checkpoint(&r.checkpoint()) == checkpoint;

    let final_round_trip = encode_checkpoint(&decode_checkpoint(&checkpoint, Path::new("final.epsc"))?) == checkpoint;
    let feats = encode_features(&data.train.features);
    let feats_round_trip = encode_features(&decode_features(&feats, Path::new("train.epsf"))?) == feats;

    let flag = |b: bool| if b { "identical" } else { "DIFFERENT" };
    Ok(outcome(
        same_run && same_resume && ckpt_round_trip && final_round_trip && feats_round_trip,
        format!(
            "same-seed rerun {}; resume at epoch {RESUME_EPOCH} {}; EPSC round trips {}; EPSF round trip {}",
            flag(same_run),
            flag(same_resume),
            flag(ckpt_round_trip && final_round_trip),
            flag(feats_round_trip)
        ),
    ))
}

fn ablation(runs: &mut Runs) -> Result<Outcome> {
    let m = RunConfig::default().groups;
    let full = runs.mean_zsl(m, Branches::Full)?;
    let gfp = runs.mean_zsl(m, Branches::GfpOnly)?;
    let gpa = runs.mean_zsl(m, Branches::GpaOnly)?;
    Ok(outcome(
        gfp < full && gpa < full,
        format!(
            "seed-averaged zsl mAP: full {full:.4}, without prompts (gfp only) {gfp:.4} {}, without pooling heads (gpa only) {gpa:.4} {}",
            if gfp < full { "lower" } else { "NOT lower" },
            if gpa < full { "lower" } else { "NOT lower" }
        ),
    ))
}

fn main() -> ExitCode {
    let mut runs = Runs {
        data: BTreeMap::new(),
        runs: BTreeMap::new(),
    };
    let mut failed = 0;
    let mut report = |id: usize, name: &str, r: Result<Outcome>| {
        let (tag, detail) = match r {
            Ok(o) if o.pass => ("PASS", o.detail),
            Ok(o) => ("FAIL", o.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        failed += (tag == "FAIL") as usize;
        println!("{tag} criterion {id} ({name}): {detail}");
    };
    report(1, "gradient correctness", gradient_check());
    report(2, "normalization invariants", normalization());
    report(3, "analytic loss anchors", loss_anchors());
    report(4, "metric oracle equivalence", metric_oracles());
    report(5, "synthetic zero-shot transfer", transfer(&mut runs));
    report(6, "best M is not the largest", m_curve(&mut runs));
    report(7, "determinism and persistence", determinism(&mut runs));
    report(8, "ablation direction", ablation(&mut runs));
    if failed == 0 {
        println!("acceptance: all 8 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 8 criteria failed");
        ExitCode::FAILURE
    }
}
