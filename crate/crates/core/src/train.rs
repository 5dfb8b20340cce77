//! Adam training loop.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HrtfError, Result};
use crate::grid::{Ear, HrtfSet, SparseMeasurement};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::model::{self, ModelConfig, ModelWeights};
use crate::nn::{Graph, Tensor};
use crate::rng::{self, Domain};
use crate::sht::{self, ShCoefficients};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Epoch cadence of periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Share of subjects held out for validation by [`split_subjects`].
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 2e-4,
            epochs: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss_weights: LossWeights::default(),
            checkpoint_every: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(HrtfError::InvalidConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.batch_size < 1 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad("adam_beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta2", "must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", "must lie in [0, 1)");
        }
        self.loss_weights.validate()
    }
}

/// First and second moment estimates of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update at step `t >= 1`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamMoments, t: u64, cfg: &TrainConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(invalid(format!(
            "adam shape mismatch: params {n}, grads {}, moments {}/{}",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if t == 0 {
        return Err(invalid("adam step index starts at 1"));
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// Adam state for every tensor of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, AdamMoments>,
}

impl AdamState {
    pub fn new(weights: &ModelWeights) -> Self {
        Self {
            step: 0,
            moments: weights
                .tensors()
                .iter()
                .map(|(k, t)| (k.clone(), AdamMoments::zeros(t.numel())))
                .collect(),
        }
    }

    /// Applies one step; `grads` follows the weights' name order.
    pub fn apply(&mut self, weights: &mut ModelWeights, grads: &[Vec<f64>], cfg: &TrainConfig) -> Result<()> {
        if grads.len() != weights.tensors().len() {
            return Err(invalid("one gradient per tensor required"));
        }
        self.step += 1;
        for ((name, t), g) in weights.tensors_mut().iter_mut().zip(grads) {
            let st = self
                .moments
                .get_mut(name)
                .ok_or_else(|| invalid(format!("no optimizer state for `{name}`")))?;
            adam_step(t.data_mut(), g, st, self.step, cfg)?;
        }
        Ok(())
    }
}

/// One subject at one sparsity level with the cached tensors its loss needs.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    input: ShCoefficients,
    target: HrtfSet,
    target_db: [Tensor; 2],
    design: Tensor,
    contrast: Option<Tensor>,
}

impl TrainingExample {
    pub fn new(sparse: &SparseMeasurement, truth: &HrtfSet, cfg: &ModelConfig) -> Result<Self> {
        if sparse.set().n_bins() != truth.n_bins() || truth.n_bins() != cfg.n_bins {
            return Err(invalid(format!(
                "bin counts disagree: sparse {}, truth {}, model {}",
                sparse.set().n_bins(),
                truth.n_bins(),
                cfg.n_bins
            )));
        }
        let input = sht::fit_sh(sparse.set(), &cfg.fit_config())?;
        Self::from_parts(input, truth.clone(), cfg)
    }

    /// Uses precomputed input coefficients.
    pub fn from_parts(input: ShCoefficients, target: HrtfSet, cfg: &ModelConfig) -> Result<Self> {
        let n = target.n_directions();
        let w = target.n_bins();
        let target_db = [
            Tensor::matrix(n, w, target.ear_db(Ear::Left))?,
            Tensor::matrix(n, w, target.ear_db(Ear::Right))?,
        ];
        let design = model::design_tensor(target.grid(), cfg.l_out)?;
        let contrast = match target.grid().neighbor_table() {
            Some(_) => Some(losses::contrast_operator(target.grid())?),
            None => None,
        };
        Ok(Self {
            input,
            target,
            target_db,
            design,
            contrast,
        })
    }

    pub fn input(&self) -> &ShCoefficients {
        &self.input
    }

    pub fn target(&self) -> &HrtfSet {
        &self.target
    }
}

/// Loss of one example and, optionally, gradients in weight-name order.
pub fn example_loss(
    weights: &ModelWeights,
    ex: &TrainingExample,
    lw: &LossWeights,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Vec<f64>>>)> {
    let mut g = Graph::new();
    let b = weights.bind(&mut g);
    let coeffs = model::forward_graph(&mut g, &b, &ex.input)?;
    let y = g.constant(ex.design.clone());
    let pred = [g.matmul(y, coeffs[0])?, g.matmul(y, coeffs[1])?];
    let target = [g.constant(ex.target_db[0].clone()), g.constant(ex.target_db[1].clone())];
    let op = ex.contrast.clone().map(|c| g.constant(c));
    let vars = losses::loss_graph(&mut g, pred, target, op, lw)?;
    let breakdown = vars.breakdown(&g);
    if !with_grad {
        return Ok((breakdown, None));
    }
    g.backward(vars.total)?;
    let grads = b
        .vars()
        .values()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    Ok((breakdown, Some(grads)))
}

/// Mean loss over a set, evaluated in parallel and reduced in order.
pub fn evaluate_loss(weights: &ModelWeights, set: &[TrainingExample], lw: &LossWeights) -> Result<LossBreakdown> {
    if set.is_empty() {
        return Ok(LossBreakdown::default());
    }
    let parts: Vec<LossBreakdown> = set
        .par_iter()
        .map(|ex| example_loss(weights, ex, lw, false).map(|r| r.0))
        .collect::<Result<_>>()?;
    let sum = parts.iter().fold(LossBreakdown::default(), |a, b| a.add(b));
    Ok(sum.scaled(1.0 / set.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: LossBreakdown,
}

/// Loss curve as CSV: `epoch,lsd,ild,ndl,total,split`.
pub fn loss_curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lsd,ild,ndl,total,split\n");
    for r in curve {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.loss.lsd,
            r.loss.ild,
            r.loss.ndl,
            r.loss.total,
            r.split.as_str()
        ));
    }
    s
}

/// Everything needed to resume or reproduce a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.weights.config()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointReason {
    Periodic { epoch: usize },
    BestValidation { epoch: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Lowest validation total seen, if a validation set was given.
    pub best: Option<(usize, LossBreakdown, Checkpoint)>,
    pub curve: Vec<EpochRecord>,
}

/// Seeded subject split: `(train, val)` index lists.
pub fn split_subjects(n: usize, seed: u64, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let perm = rng::permutation(seed, Domain::Split, &[n as u64], n);
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = if n > 1 { n_val.min(n - 1) } else { 0 };
    let mut val = perm[..n_val].to_vec();
    let mut train = perm[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Trains from freshly built weights.
pub fn train(
    model_cfg: &ModelConfig,
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(&Checkpoint, CheckpointReason) -> Result<()>,
) -> Result<TrainOutcome> {
    let weights = ModelWeights::build(model_cfg, cfg.seed)?;
    let optimizer = AdamState::new(&weights);
    train_from(
        Checkpoint { weights, optimizer },
        train_set,
        val_set,
        cfg,
        on_checkpoint,
    )
}

/// Continues training from a checkpoint.
pub fn train_from(
    start: Checkpoint,
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(&Checkpoint, CheckpointReason) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(HrtfError::InvalidDataset("training set is empty".into()));
    }
    let Checkpoint {
        mut weights,
        mut optimizer,
    } = start;
    let lw = cfg.loss_weights;
    let mut curve = Vec::new();
    let mut best: Option<(usize, LossBreakdown, Checkpoint)> = None;
    for epoch in 1..=cfg.epochs {
        let order = rng::permutation(cfg.seed, Domain::Shuffle, &[epoch as u64], train_set.len());
        let mut sum = LossBreakdown::default();
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(LossBreakdown, Vec<Vec<f64>>)> = batch
                .par_iter()
                .map(|&i| {
                    let (l, g) = example_loss(&weights, &train_set[i], &lw, true)?;
                    Ok((l, g.expect("gradients requested")))
                })
                .collect::<Result<_>>()?;
            let inv = 1.0 / batch.len() as f64;
            let mut grads: Vec<Vec<f64>> = results[0].1.iter().map(|g| vec![0.0; g.len()]).collect();
            let mut batch_loss = LossBreakdown::default();
            for (l, g) in &results {
                batch_loss = batch_loss.add(l);
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, x) in acc.iter_mut().zip(gi) {
                        *a += inv * x;
                    }
                }
            }
            if let Some((component, value)) = batch_loss.non_finite() {
                return Err(HrtfError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    component,
                    value,
                });
            }
            sum = sum.add(&batch_loss);
            optimizer.apply(&mut weights, &grads, cfg)?;
        }
        curve.push(EpochRecord {
            epoch,
            split: Split::Train,
            loss: sum.scaled(1.0 / train_set.len() as f64),
        });
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            on_checkpoint(
                &Checkpoint {
                    weights: weights.clone(),
                    optimizer: optimizer.clone(),
                },
                CheckpointReason::Periodic { epoch },
            )?;
        }
        if !val_set.is_empty() {
            let v = evaluate_loss(&weights, val_set, &lw)?;
            if let Some((component, value)) = v.non_finite() {
                return Err(HrtfError::NonFiniteLoss {
                    epoch,
                    batch: 0,
                    component,
                    value,
                });
            }
            curve.push(EpochRecord {
                epoch,
                split: Split::Val,
                loss: v,
            });
            if best.as_ref().is_none_or(|(_, b, _)| v.total < b.total) {
                let ck = Checkpoint {
                    weights: weights.clone(),
                    optimizer: optimizer.clone(),
                };
                on_checkpoint(&ck, CheckpointReason::BestValidation { epoch })?;
                best = Some((epoch, v, ck));
            }
        }
    }
    Ok(TrainOutcome {
        last: Checkpoint { weights, optimizer },
        best,
        curve,
    })
}

/// Discards checkpoints.
pub fn no_checkpoints(_: &Checkpoint, _: CheckpointReason) -> Result<()> {
    Ok(())
}
