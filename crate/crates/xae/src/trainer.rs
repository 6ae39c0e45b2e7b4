//! Minibatch gradient-descent training over grouped sub-datasets:
//! deterministic seeding, per-epoch full-dataset loss history, early
//! stopping, snapshot hooks, and a conventional-sparse-autoencoder
//! emulation mode for baselines.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{
    cost_with_mode, gradient_with_mode, CostBreakdown, GroupBatch, Hyperparams, SemaphoreMode,
};
use crate::data::{GroupedData, PatchDataset};
use crate::error::{Result, XaeError};
use crate::model::XaeModel;

/// How source-group minibatches interleave within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSchedule {
    /// One minibatch per source group per round, in declaration order.
    RoundRobin,
    /// All minibatches of the epoch in one seeded-shuffled sequence, so
    /// larger groups contribute proportionally more steps.
    Proportional,
}

/// Stop when the best epoch-end total has not improved by at least
/// `min_rel_improvement` (relative) for `patience` consecutive epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_rel_improvement: f64,
}

/// Training-loop settings; `seed` fully determines initialization
/// consumption order and shuffling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub group_schedule: GroupSchedule,
    pub early_stop: Option<EarlyStop>,
    /// Emit a model snapshot (via the observer) every this many epochs.
    pub snapshot_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 200,
            batch_size: 64,
            seed: 7,
            group_schedule: GroupSchedule::RoundRobin,
            early_stop: None,
            snapshot_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(XaeError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(es) = &self.early_stop {
            if es.patience == 0 {
                return bad("early_stop.patience must be at least 1".into());
            }
            if !es.min_rel_improvement.is_finite() || es.min_rel_improvement < 0.0 {
                return bad(format!(
                    "early_stop.min_rel_improvement must be finite and >= 0, got {}",
                    es.min_rel_improvement
                ));
            }
        }
        if self.snapshot_every == Some(0) {
            return bad("snapshot_every must be at least 1".into());
        }
        Ok(())
    }
}

/// Named hyperparameter/config presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    MnistToy,
    PatchGeneric,
}

impl FromStr for Profile {
    type Err = XaeError;

    fn from_str(s: &str) -> Result<Profile> {
        match s {
            "mnist_toy" => Ok(Profile::MnistToy),
            "patch_generic" => Ok(Profile::PatchGeneric),
            other => Err(XaeError::InvalidConfig(format!(
                "unknown profile {other:?}; expected mnist_toy or patch_generic"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::MnistToy => "mnist_toy",
            Profile::PatchGeneric => "patch_generic",
        })
    }
}

/// Preset cost coefficients per profile.
pub fn default_hyperparams(profile: Profile) -> Hyperparams {
    match profile {
        Profile::MnistToy => Hyperparams::default_mnist_toy(),
        Profile::PatchGeneric => Hyperparams::default_patch_generic(),
    }
}

/// Preset loop settings per profile (both use plain gradient descent
/// at η = 0.01; epoch/batch counts are implementation defaults).
pub fn default_train_config(profile: Profile) -> TrainConfig {
    match profile {
        Profile::MnistToy => TrainConfig::default(),
        Profile::PatchGeneric => TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        },
    }
}

/// Why a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    CompletedEpochs,
    EarlyStopped { epoch: usize },
}

/// Per-epoch loss history plus timing and the stop reason; history
/// entry e is the full-dataset cost after epoch e's updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<CostBreakdown>,
    pub epoch_seconds: Vec<f64>,
    pub stop: StopReason,
}

impl TrainReport {
    /// Write the loss log: one row per epoch with columns
    /// epoch,recon,decay,sparsity,gaussianity,decorrelation,total.
    /// Wall-clock timings stay out of the file so reruns are
    /// byte-identical.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| XaeError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| XaeError::io(path, e);
        writeln!(w, "epoch,recon,decay,sparsity,gaussianity,decorrelation,total")
            .map_err(io_err)?;
        for (e, c) in self.history.iter().enumerate() {
            writeln!(
                w,
                "{e},{},{},{},{},{},{}",
                c.recon, c.decay, c.sparsity, c.gaussianity, c.decorrelation, c.total
            )
            .map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }
}

/// Epoch-granularity hook into a running training loop.
pub trait TrainObserver {
    /// Called after every epoch, with the epoch-end full-dataset cost.
    fn on_epoch_end(&mut self, epoch: usize, model: &XaeModel, cost: &CostBreakdown)
        -> Result<()>;

    /// Called on snapshot epochs (per `TrainConfig::snapshot_every`).
    fn on_snapshot(&mut self, _epoch: usize, _model: &XaeModel) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct NoopObserver;

impl TrainObserver for NoopObserver {
    fn on_epoch_end(&mut self, _: usize, _: &XaeModel, _: &CostBreakdown) -> Result<()> {
        Ok(())
    }
}

/// Train on grouped sub-datasets with the partition's own semaphores.
pub fn train(
    model: XaeModel,
    grouped: &GroupedData,
    hp: &Hyperparams,
    cfg: &TrainConfig,
) -> Result<(XaeModel, TrainReport)> {
    train_with_observer(model, grouped, hp, cfg, &mut NoopObserver)
}

/// [`train`] with an observer for logging or snapshots.
pub fn train_with_observer(
    model: XaeModel,
    grouped: &GroupedData,
    hp: &Hyperparams,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(XaeModel, TrainReport)> {
    if model.spec() != grouped.spec() {
        return Err(XaeError::InvalidConfig(
            "model and grouped data were built against different partitions".into(),
        ));
    }
    let indices: Vec<Vec<usize>> = (0..grouped.group_count())
        .map(|i| grouped.group_indices(i).to_vec())
        .collect();
    run_loop(
        model,
        grouped.dataset(),
        &indices,
        hp,
        cfg,
        SemaphoreMode::FromSpec,
        observer,
    )
}

/// Train the conventional sparse-autoencoder baseline: every semaphore
/// forced active, Gaussianization and decorrelation disabled, the whole
/// dataset presented as one merged group.
pub fn train_ae_emulation(
    model: XaeModel,
    merged: &PatchDataset,
    hp: &Hyperparams,
    cfg: &TrainConfig,
) -> Result<(XaeModel, TrainReport)> {
    let hp = Hyperparams {
        beta: 0.0,
        gamma: 0.0,
        ..hp.clone()
    };
    let all: Vec<usize> = (0..merged.len()).collect();
    run_loop(
        model,
        merged,
        &[all],
        &hp,
        cfg,
        SemaphoreMode::AllActive,
        &mut NoopObserver,
    )
}

fn run_loop(
    mut model: XaeModel,
    dataset: &PatchDataset,
    group_indices: &[Vec<usize>],
    hp: &Hyperparams,
    cfg: &TrainConfig,
    mode: SemaphoreMode,
    observer: &mut dyn TrainObserver,
) -> Result<(XaeModel, TrainReport)> {
    cfg.validate()?;
    hp.validate()?;
    if dataset.dim() != model.input_dim() {
        return Err(XaeError::DimMismatch {
            expected: model.input_dim(),
            got: dataset.dim(),
        });
    }
    for (i, g) in group_indices.iter().enumerate() {
        if g.is_empty() {
            return Err(XaeError::InvalidConfig(format!(
                "source group {i} has no records"
            )));
        }
    }

    // Full per-group matrices for the epoch-end cost trace.
    let full: Vec<Array2<f64>> = group_indices
        .iter()
        .map(|g| dataset.to_rows_f64(g))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Working copies, reshuffled in place each epoch (so epoch e+1
    // permutes epoch e's order — the contract the baseline oracle in
    // the tests mirrors).
    let mut order: Vec<Vec<usize>> = group_indices.to_vec();
    let mut history: Vec<CostBreakdown> = Vec::new();
    let mut epoch_seconds: Vec<f64> = Vec::new();
    let mut best = f64::INFINITY;
    let mut streak = 0usize;
    let mut stop = StopReason::CompletedEpochs;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        for g in order.iter_mut() {
            g.shuffle(&mut rng);
        }
        // Plan the epoch's steps as (group, start, end) over `order`.
        let mut plan: Vec<(usize, usize, usize)> = Vec::new();
        match cfg.group_schedule {
            GroupSchedule::RoundRobin => {
                let rounds = order
                    .iter()
                    .map(|g| g.len().div_ceil(cfg.batch_size))
                    .max()
                    .unwrap_or(0);
                for r in 0..rounds {
                    for (gi, g) in order.iter().enumerate() {
                        let start = r * cfg.batch_size;
                        if start < g.len() {
                            plan.push((gi, start, (start + cfg.batch_size).min(g.len())));
                        }
                    }
                }
            }
            GroupSchedule::Proportional => {
                for (gi, g) in order.iter().enumerate() {
                    let mut start = 0;
                    while start < g.len() {
                        plan.push((gi, start, (start + cfg.batch_size).min(g.len())));
                        start += cfg.batch_size;
                    }
                }
                plan.shuffle(&mut rng);
            }
        }

        for (gi, s, e) in plan {
            let x = dataset.to_rows_f64(&order[gi][s..e]);
            let grads = gradient_with_mode(&model, &[(gi, x.view())], hp, mode)?;
            let eta = cfg.learning_rate;
            model.weights.zip_mut_with(&grads.d_weights, |w, g| *w -= eta * g);
            model.b_enc.zip_mut_with(&grads.d_b_enc, |b, g| *b -= eta * g);
            model.b_dec.zip_mut_with(&grads.d_b_dec, |b, g| *b -= eta * g);
        }

        let batches: Vec<GroupBatch> = full.iter().enumerate().map(|(i, m)| (i, m.view())).collect();
        let cost = cost_with_mode(&model, &batches, hp, mode)?;
        if let Some(term) = cost.first_non_finite() {
            return Err(XaeError::Diverged { term, epoch });
        }
        epoch_seconds.push(t0.elapsed().as_secs_f64());
        history.push(cost);
        observer.on_epoch_end(epoch, &model, &cost)?;
        if let Some(every) = cfg.snapshot_every {
            if (epoch + 1) % every == 0 {
                observer.on_snapshot(epoch, &model)?;
            }
        }
        if let Some(es) = &cfg.early_stop {
            if best.is_finite() {
                let improve = (best - cost.total) / best.abs().max(1e-12);
                if improve >= es.min_rel_improvement {
                    best = cost.total;
                    streak = 0;
                } else {
                    streak += 1;
                    if streak >= es.patience {
                        stop = StopReason::EarlyStopped { epoch };
                        break;
                    }
                }
            } else {
                best = cost.total;
            }
        }
    }

    Ok((
        model,
        TrainReport {
            history,
            epoch_seconds,
            stop,
        },
    ))
}

/// Convenience: the emulation baseline needs a partition whose single
/// group spans all labels; build one with `segments` equal segments of
/// width `seg_width` so the hidden size can match an exclusive model.
pub fn merged_partition(
    labels: &crate::labels::LabelSet,
    segments: usize,
    seg_width: usize,
) -> Result<crate::labels::PartitionSpec> {
    let segs = (0..segments)
        .map(|_| crate::labels::SegmentSpec {
            labels: labels.clone(),
            width: seg_width,
        })
        .collect();
    crate::labels::PartitionSpec::new(labels.clone(), vec![labels.clone()], segs)
}

/// A single-group partition shaped like `spec`: same universe and the
/// same per-segment widths, but every segment tied to every label — the
/// equal-capacity geometry for baseline comparisons.
pub fn merged_spec_like(spec: &crate::labels::PartitionSpec) -> Result<crate::labels::PartitionSpec> {
    let universe = spec.universe().clone();
    let segs = spec
        .segments()
        .iter()
        .map(|s| crate::labels::SegmentSpec {
            labels: universe.clone(),
            width: s.width,
        })
        .collect();
    crate::labels::PartitionSpec::new(universe.clone(), vec![universe], segs)
}
