//! End-to-end optimization: seeded shuffling, batch forward and backward,
//! Adam with a single step-down of the learning rate, and per-epoch
//! evaluation on the test split.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

use std::collections::BTreeMap;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Split};
use crate::embedding::{LabelSpace, Subset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, Protocol, ScoreTable};
use crate::model::{forward, infer, EpsilonParams, ModelConfig};
use crate::objective::{total_loss_var, LossConfig, SampleLabels};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// First epoch (1-based) trained at half the initial rate.
    pub halve_at_epoch: usize,
    pub seed: u64,
    /// Decay prompts, biases and norm parameters as well as weight matrices.
    pub decay_all: bool,
}

impl Default for OptimConfig {
    /// The published schedule: lr 1e-5, batch 96, 7 epochs, halved at epoch 4.
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 4e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 7,
            batch_size: 96,
            halve_at_epoch: 4,
            seed: 0,
            decay_all: false,
        }
    }
}

impl OptimConfig {
    /// Schedule for training from scratch on the small synthetic corpus,
    /// where the published rate moves the weights too little in 7 epochs.
    pub fn synthetic() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.halve_at_epoch == 0 {
            return Err(Error::config("halve_at_epoch must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: halved once, from `halve_at_epoch` on.
pub fn lr_schedule(epoch: usize, cfg: &OptimConfig) -> f64 {
    if epoch >= cfg.halve_at_epoch {
        cfg.lr / 2.0
    } else {
        cfg.lr
    }
}

/// Whether weight decay applies to the named parameter.
pub fn decays(name: &str, value: &Tensor, cfg: &OptimConfig) -> bool {
    cfg.decay_all || (value.rank() == 2 && !name.ends_with("prompts"))
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub zsl_map: f64,
    pub gzsl_map: f64,
    /// F1 per protocol and K, keyed like `zsl@3`.
    pub f1s: BTreeMap<String, f64>,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("history record serializes")
    }
}

/// Scores of every image in `split` against every label of `space`.
pub fn score_table(model: &ModelConfig, params: &EpsilonParams, split: &Split, space: &LabelSpace) -> Result<ScoreTable> {
    const CHUNK: usize = 64;
    let emb_t = space.embeddings().transpose()?;
    let (images, labels, m) = (split.len(), space.num_labels(), model.groups);
    let mut scores = Vec::with_capacity(images * labels);
    for start in (0..images).step_by(CHUNK) {
        let len = CHUNK.min(images - start);
        let trace = infer(model, params, &split.features.slice_outer(start, len)?)?;
        let flat = trace.s.reshape(&[len * m, model.embed_dim])?;
        let dots = flat.matmul(&emb_t)?;
        let d = dots.data();
        for i in 0..len {
            for c in 0..labels {
                let best = (0..m)
                    .map(|j| d[(i * m + j) * labels + c])
                    .fold(f64::NEG_INFINITY, f64::max);
                scores.push(best);
            }
        }
    }
    ScoreTable::new(images, labels, scores, split.labels.data().to_vec())
}

/// Test-split reports for each protocol.
pub fn evaluate_split(
    model: &ModelConfig,
    params: &EpsilonParams,
    split: &Split,
    space: &LabelSpace,
    protocols: &[Protocol],
    ks: &[usize],
) -> Result<Vec<EvalReport>> {
    let table = score_table(model, params, split, space)?;
    protocols.iter().map(|&p| evaluate(&table, space, p, ks)).collect()
}

/// Loss and parameter gradients of one batch of training images.
pub fn batch_gradients(
    model: &ModelConfig,
    params: &EpsilonParams,
    loss_cfg: &LossConfig,
    dataset: &Dataset,
    images: &[usize],
) -> Result<(f64, EpsilonParams)> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, true);
    let f = g.constant(dataset.train.batch_features(images)?);
    let out = forward(&mut g, model, f, &vars)?;
    let labels = images
        .iter()
        .map(|&i| SampleLabels::from_full_row(dataset.train.labels.row(i), &dataset.space))
        .collect::<Result<Vec<_>>>()?;
    let seen = g.constant(dataset.space.subset_embeddings(Subset::Seen)?);
    let loss = total_loss_var(&mut g, out.s, &labels, seen, loss_cfg)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok((value, params.clone()));
    }
    g.backward(loss)?;
    let grads = vars.map(|_, &v| match g.grad(v) {
        Some(t) => t.clone(),
        None => Tensor::zeros(g.shape(v)),
    });
    Ok((value, grads))
}

/// Evaluation settings applied after every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![3, 5] }
    }
}

/// Training run over one dataset; resumable from a [`Checkpoint`].
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    model: ModelConfig,
    optim: OptimConfig,
    loss: LossConfig,
    eval: EvalConfig,
    params: EpsilonParams,
    adam: AdamState,
    rng: Rng,
    epoch: usize,
    history: Vec<EpochRecord>,
    reports: Vec<EvalReport>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a Dataset,
        model: ModelConfig,
        optim: OptimConfig,
        loss: LossConfig,
        eval: EvalConfig,
    ) -> Result<Self> {
        let mut rng = Rng::new(optim.seed);
        let params = EpsilonParams::init(&model, &mut rng)?;
        let adam = AdamState::new(&params.named().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
        Self::build(dataset, model, optim, loss, eval, params, adam, rng, 0)
    }

    pub fn resume(dataset: &'a Dataset, ckpt: Checkpoint, eval: EvalConfig) -> Result<Self> {
        let rng = Rng::from_state(ckpt.rng);
        Self::build(
            dataset, ckpt.model, ckpt.optim, ckpt.loss, eval, ckpt.params, ckpt.adam, rng, ckpt.epoch,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        dataset: &'a Dataset,
        model: ModelConfig,
        optim: OptimConfig,
        loss: LossConfig,
        eval: EvalConfig,
        params: EpsilonParams,
        adam: AdamState,
        rng: Rng,
        epoch: usize,
    ) -> Result<Self> {
        model.validate()?;
        optim.validate()?;
        loss.validate()?;
        check_compatible(&model, dataset)?;
        let unseen = dataset.space.unseen_indices().len();
        for &k in &eval.ks {
            if k == 0 || k > unseen {
                return Err(Error::config(format!(
                    "top-k {k} must lie in 1..={unseen} (the unseen label count)"
                )));
            }
        }
        if dataset.train.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        Ok(Self {
            dataset,
            model,
            optim,
            loss,
            eval,
            params,
            adam,
            rng,
            epoch,
            history: Vec::new(),
            reports: Vec::new(),
        })
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn optim(&self) -> &OptimConfig {
        &self.optim
    }

    pub fn params(&self) -> &EpsilonParams {
        &self.params
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.adam.t
    }

    /// Records of the epochs run by this trainer (not those before a resume).
    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// Reports of the most recent evaluation, ZSL then GZSL.
    pub fn last_reports(&self) -> &[EvalReport] {
        &self.reports
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.optim.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optim: self.optim.clone(),
            loss: self.loss.clone(),
            epoch: self.epoch,
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: self.rng.state(),
        }
    }

    /// Runs one epoch and evaluates on the test split.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch + 1;
        let lr = lr_schedule(epoch, &self.optim);
        let mut order: Vec<usize> = (0..self.dataset.train.len()).collect();
        self.rng.shuffle(&mut order);
        let names = self.params.named();
        let decay: Vec<bool> = names.iter().map(|(n, t)| decays(n, t, &self.optim)).collect();

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch, images) in order.chunks(self.optim.batch_size).enumerate() {
            let (loss, grads) = batch_gradients(&self.model, &self.params, &self.loss, self.dataset, images)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            let grads: Vec<Tensor> = grads.named().into_iter().map(|(_, t)| t.clone()).collect();
            let mut leaves: Vec<Tensor> = self.params.named().into_iter().map(|(_, t)| t.clone()).collect();
            adam_step(&mut leaves, &grads, &decay, &mut self.adam, &self.optim, lr)?;
            self.params = self.params.with_leaves(leaves)?;
            debug!("epoch {epoch} batch {batch}: loss {loss:.6}");
            loss_sum += loss;
            batches += 1;
        }
        self.epoch = epoch;

        let reports = evaluate_split(
            &self.model,
            &self.params,
            &self.dataset.test,
            &self.dataset.space,
            &[Protocol::Zsl, Protocol::Gzsl],
            &self.eval.ks,
        )?;
        let mut f1s = BTreeMap::new();
        for r in &reports {
            for t in &r.per_k {
                f1s.insert(format!("{}@{}", r.protocol, t.k), t.f1);
            }
        }
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / batches as f64,
            zsl_map: reports[0].map,
            gzsl_map: reports[1].map,
            f1s,
        };
        info!(
            "epoch {epoch}: loss {:.5} zsl mAP {:.4} gzsl mAP {:.4}",
            record.mean_loss, record.zsl_map, record.gzsl_map
        );
        self.reports = reports;
        self.history.push(record.clone());
        Ok(record)
    }

    /// Trains through the configured epochs, or through `stop_after` if it
    /// comes first.
    pub fn fit(&mut self, stop_after: Option<usize>) -> Result<&[EpochRecord]> {
        let last = stop_after.map_or(self.optim.epochs, |s| s.min(self.optim.epochs));
        while self.epoch < last {
            self.run_epoch()?;
        }
        Ok(&self.history)
    }
}

fn check_compatible(model: &ModelConfig, dataset: &Dataset) -> Result<()> {
    let split = &dataset.train;
    if split.num_tokens() != model.num_tokens || split.token_dim() != model.token_dim {
        return Err(Error::shape(format!(
            "dataset tokens {} x {} do not match model {} x {}",
            split.num_tokens(),
            split.token_dim(),
            model.num_tokens,
            model.token_dim
        )));
    }
    if dataset.space.dim() != model.embed_dim {
        return Err(Error::shape(format!(
            "label embeddings have width {} but the model emits {}",
            dataset.space.dim(),
            model.embed_dim
        )));
    }
    Ok(())
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub params: EpsilonParams,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
    pub reports: Vec<EvalReport>,
}

/// Trains from scratch through every configured epoch.
pub fn train(dataset: &Dataset, model: &ModelConfig, optim: &OptimConfig, loss: &LossConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(dataset, model.clone(), optim.clone(), loss.clone(), EvalConfig::default())?;
    t.fit(None)?;
    Ok(TrainOutcome {
        params: t.params.clone(),
        history: t.history.clone(),
        checkpoint: t.checkpoint(),
        reports: t.reports.clone(),
    })
}
