//! The operator commands. Each returns what it would print, and writes its
//! files under the configured directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use epsilon_core::datagen::{generate, read_features, Dataset, LabelMatrix, Split, SynthConfig};
use epsilon_core::embedding::LabelSpace;
use epsilon_core::metrics::{EvalReport, Protocol};
use epsilon_core::model::{infer, ModelConfig};
use epsilon_core::trainer::{
    evaluate_split, load_checkpoint, save_checkpoint, score_table, Checkpoint, EpochRecord, Trainer,
};
use epsilon_core::Tensor;
use log::info;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.epsc";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const SWEEP_FILE: &str = "sweep.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// A synthetic dataset exactly as it reads back from disk (features stored
/// as `f32`).
pub fn synthetic_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let data = generate(cfg)?;
    Ok(Dataset {
        train: data.train.quantized(),
        test: data.test.quantized(),
        ..data
    })
}

fn summary(data: &Dataset) -> String {
    let space = &data.space;
    format!(
        "labels: {} seen, {} unseen, embedding width {}\ntrain: {} images\ntest: {} images\ntokens: {} x {}\n",
        space.seen_indices().len(),
        space.unseen_indices().len(),
        space.dim(),
        data.train.len(),
        data.test.len(),
        data.train.num_tokens(),
        data.train.token_dim(),
    )
}

/// Generates the synthetic dataset into `data_dir`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<String> {
    let data = generate(&cfg.synth())?;
    data.save(&cfg.data_dir)?;
    Ok(format!("wrote {}\n{}", cfg.data_dir.display(), summary(&data)))
}

pub fn reports_json(reports: &[EvalReport]) -> String {
    let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
    s.push('\n');
    s
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Last epoch to run in this invocation.
    pub stop_after: Option<usize>,
}

/// Trains on `data_dir`, writing the checkpoint after every epoch, the
/// history as JSON lines and the final evaluation.
pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<String> {
    let data = Dataset::load(&cfg.data_dir)?;
    let out = &cfg.out_dir;
    let history_path = out.join(HISTORY_FILE);
    let (mut trainer, mut history) = match &opts.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let kept = read_history(&history_path, ckpt.epoch)?;
            info!("resuming from epoch {} of {}", ckpt.epoch, path.display());
            (Trainer::resume(&data, ckpt, cfg.eval())?, kept)
        }
        None => {
            let t = Trainer::new(&data, cfg.model(), cfg.optim(), cfg.loss(), cfg.eval())?;
            (t, String::new())
        }
    };
    create_dir(out)?;
    let last = opts
        .stop_after
        .map_or(trainer.optim().epochs, |s| s.min(trainer.optim().epochs));
    let mut text = String::new();
    while trainer.epoch() < last {
        let rec = trainer.run_epoch()?;
        history.push_str(&rec.to_json());
        history.push('\n');
        write(&history_path, &history)?;
        save_checkpoint(&trainer.checkpoint(), &out.join(CHECKPOINT_FILE))?;
        writeln!(
            text,
            "epoch {} lr {:e} loss {:.5} zsl mAP {:.4} gzsl mAP {:.4}",
            rec.epoch, rec.lr, rec.mean_loss, rec.zsl_map, rec.gzsl_map
        )
        .expect("write to string");
    }
    if !trainer.last_reports().is_empty() {
        write(&out.join(EVAL_FILE), reports_json(trainer.last_reports()))?;
    }
    writeln!(text, "wrote {}", out.display()).expect("write to string");
    Ok(text)
}

/// The first `epochs` lines of an existing history, each checked to parse.
fn read_history(path: &Path, epochs: usize) -> Result<String> {
    if epochs == 0 {
        return Ok(String::new());
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let lines: Vec<&str> = text.lines().take(epochs).collect();
    if lines.len() < epochs {
        return Err(CliError::validation(format!(
            "{} has {} records but the checkpoint is at epoch {epochs}",
            path.display(),
            lines.len()
        )));
    }
    let mut kept = String::new();
    for (i, line) in lines.iter().enumerate() {
        let rec: EpochRecord = serde_json::from_str(line)
            .map_err(|e| CliError::validation(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if rec.epoch != i + 1 {
            return Err(CliError::validation(format!(
                "{} line {} holds epoch {}",
                path.display(),
                i + 1,
                rec.epoch
            )));
        }
        kept.push_str(line);
        kept.push('\n');
    }
    Ok(kept)
}

/// Evaluates a checkpoint on the test split of `data_dir`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, protocols: &[Protocol], ks: &[usize]) -> Result<String> {
    let ckpt = load_checkpoint(checkpoint)?;
    let data = Dataset::load(&cfg.data_dir)?;
    check_dims(&ckpt.model, &data.test.features, &cfg.data_dir)?;
    let reports = evaluate_split(&ckpt.model, &ckpt.params, &data.test, &data.space, protocols, ks)?;
    Ok(reports_json(&reports))
}

fn check_dims(model: &ModelConfig, features: &Tensor, path: &Path) -> Result<()> {
    let s = features.shape();
    if s.len() != 3 || s[1] != model.num_tokens || s[2] != model.token_dim {
        return Err(CliError::validation(format!(
            "features in {} have shape {:?}; the checkpoint expects images x {} x {}",
            path.display(),
            s,
            model.num_tokens,
            model.token_dim
        )));
    }
    Ok(())
}

fn load_for_inference(cfg: &RunConfig, checkpoint: &Path, features: &Path) -> Result<(Checkpoint, LabelSpace, Tensor)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let space = LabelSpace::load(
        &cfg.data_dir.join(epsilon_core::datagen::EMBEDDINGS_FILE),
        &cfg.data_dir.join(epsilon_core::datagen::UNSEEN_FILE),
    )?;
    if space.dim() != ckpt.model.embed_dim {
        return Err(CliError::validation(format!(
            "label embeddings have width {} but the checkpoint emits {}",
            space.dim(),
            ckpt.model.embed_dim
        )));
    }
    let f = read_features(features)?;
    check_dims(&ckpt.model, &f, features)?;
    Ok((ckpt, space, f))
}

/// Top-`k` labels of every image over the whole vocabulary; unseen labels
/// carry an asterisk.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, features: &Path, k: usize) -> Result<String> {
    let (ckpt, space, f) = load_for_inference(cfg, checkpoint, features)?;
    let c = space.num_labels();
    if k == 0 || k > c {
        return Err(CliError::validation(format!("k must lie in 1..={c}, got {k}")));
    }
    let images = f.shape()[0];
    let split = Split::new(f, LabelMatrix::new(images, c, vec![false; images * c])?)?;
    let table = score_table(&ckpt.model, &ckpt.params, &split, &space)?;
    let mut text = String::new();
    for i in 0..images {
        let scores: Vec<f64> = (0..c).map(|l| table.score(i, l)).collect();
        write!(text, "{i}").expect("write to string");
        for l in epsilon_core::embedding::rank_labels(&scores, k)? {
            let mark = if space.is_seen(l) { "" } else { "*" };
            write!(text, "\t{}{mark}:{:.6}", space.name(l), scores[l]).expect("write to string");
        }
        text.push('\n');
    }
    Ok(text)
}

/// 8-bit binary PGM of a map, min-max normalized; a constant map is mid-gray.
pub fn pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            128
        }
    }));
    out
}

fn grid_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

fn csv_row(values: &[f64]) -> String {
    let mut s = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

/// Writes one attention map per image and group: prompt-over-token
/// cross-attention by default, or with `gfp` the channel mean of each
/// pooling head's token weights. Returns the number of maps.
pub fn cmd_attn(cfg: &RunConfig, checkpoint: &Path, features: &Path, out_dir: &Path, gfp: bool) -> Result<usize> {
    let (ckpt, _, f) = load_for_inference(cfg, checkpoint, features)?;
    let model = &ckpt.model;
    if gfp && !model.branches.uses_gfp() {
        return Err(CliError::validation("the checkpoint has no global pooling heads"));
    }
    if !gfp && !model.branches.uses_gpa() {
        return Err(CliError::validation("the checkpoint has no group prompts; use --gfp"));
    }
    create_dir(out_dir)?;
    let (images, n, m) = (f.shape()[0], model.num_tokens, model.groups);
    let side = grid_side(n);
    if side.is_none() {
        info!("{n} tokens do not form a square grid; writing CSV only");
    }
    let trace = infer(model, &ckpt.params, &f)?;
    let mut maps = 0;
    for b in 0..images {
        for g in 0..m {
            let (name, values): (String, Vec<f64>) = if gfp {
                let w = &trace.head_weights[g];
                let d = model.token_dim;
                let mean = (0..n)
                    .map(|t| (0..d).map(|ch| w.get(&[b, t, ch])).sum::<f64>() / d as f64)
                    .collect();
                (format!("img{b:04}_head{g}"), mean)
            } else {
                let a = trace.cross_attention.as_ref().expect("gpa branch present");
                (format!("img{b:04}_group{g}"), (0..n).map(|t| a.get(&[b, g, t])).collect())
            };
            write(&out_dir.join(format!("{name}.csv")), csv_row(&values))?;
            if let Some(s) = side {
                write(&out_dir.join(format!("{name}.pgm")), pgm(&values, s, s))?;
            }
            maps += 1;
        }
    }
    Ok(maps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub m: usize,
    pub lambda: f64,
    pub zsl_map: f64,
    pub gzsl_map: f64,
}

/// Final ZSL and GZSL reports of a full run on freshly generated data,
/// both seeded by `cfg.seed`.
pub fn run_synthetic(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    let data = synthetic_dataset(&cfg.synth())?;
    let mut t = Trainer::new(&data, cfg.model(), cfg.optim(), cfg.loss(), cfg.eval())?;
    t.fit(None)?;
    Ok(t.last_reports().to_vec())
}

/// Mean final mAPs over `cfg.sweep_seeds()` for one setting.
pub fn seed_averaged(cfg: &RunConfig) -> Result<(f64, f64)> {
    let seeds = cfg.sweep_seeds();
    let (mut zsl, mut gzsl) = (0.0, 0.0);
    for &seed in &seeds {
        let run = RunConfig {
            seed,
            ..cfg.clone()
        };
        let reports = run_synthetic(&run)?;
        zsl += reports[0].map;
        gzsl += reports[1].map;
    }
    let n = seeds.len() as f64;
    Ok((zsl / n, gzsl / n))
}

/// One-at-a-time sweep: every `sweep_m` at the configured lambda, then every
/// `sweep_lambda` at the configured `M`. Writes the CSV to `out_dir`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<(Vec<SweepRow>, String)> {
    let mut points: Vec<(usize, f64)> = cfg.sweep_m.iter().map(|&m| (m, cfg.lambda)).collect();
    points.extend(cfg.sweep_lambda.iter().map(|&l| (cfg.groups, l)));
    let mut rows = Vec::with_capacity(points.len());
    for (m, lambda) in points {
        let point = RunConfig {
            groups: m,
            lambda,
            ..cfg.clone()
        };
        point.validate()?;
        let (zsl_map, gzsl_map) = seed_averaged(&point)?;
        info!("M {m} lambda {lambda}: zsl mAP {zsl_map:.4} gzsl mAP {gzsl_map:.4}");
        rows.push(SweepRow {
            m,
            lambda,
            zsl_map,
            gzsl_map,
        });
    }
    let mut csv = String::from("m,lambda,zsl_map,gzsl_map\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{}", r.m, r.lambda, r.zsl_map, r.gzsl_map).expect("write to string");
    }
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join(SWEEP_FILE), &csv)?;
    Ok((rows, csv))
}
