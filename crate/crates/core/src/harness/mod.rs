//! Training loop, learning-rate schedule, early stopping, random
//! hyperparameter search, and experiment persistence.

pub mod records;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::algorithms::{AlgorithmConfig, AlgorithmId, BaseAlgorithm, StepContext, Stepper};
use crate::autodiff::LOG_EPS;
use crate::datasets::{LabeledSet, TaskData, TaskSpec};
use crate::error::{Error, Result};
use crate::models::{FeatureLayer, ModelBundle, ModelWidths};
use crate::rng::Stream;
use crate::tensor::Tensor;
use crate::validators::{
    accuracy, score_checkpoint, AveragingMode, CheckpointSnapshot, ReverseValidationOutcome,
    ScoringConfig, UdaTrainer, ValidatorId,
};

use records::{append_record, CheckpointEntry, ScoreEntry, TrialRecord, TrialStatus};

/// Epoch budget, patience (in validation steps), and validation interval
/// (in epochs).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Budget {
    pub epochs: u32,
    pub patience: u32,
    pub val_interval: u32,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { epochs: 60, patience: 10, val_interval: 1 }
    }
}

pub const LR_MIN: f64 = 1e-5;
pub const LR_MAX: f64 = 0.1;

/// Everything one trial needs, self-contained enough to rerun from a record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialConfig {
    pub task: TaskSpec,
    pub algorithm: AlgorithmConfig,
    pub feature_layer: FeatureLayer,
    pub lr_max: f64,
    pub seed: u64,
    pub warm_start_seed: u64,
    pub source_only_lr: f64,
    pub budget: Budget,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub widths: ModelWidths,
    pub validators: Vec<ValidatorId>,
    pub selection_validator: ValidatorId,
    pub scoring: ScoringConfig,
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(LR_MIN..=LR_MAX).contains(&self.lr_max) {
            return Err(Error::Config(format!(
                "lr_max {} outside log([{LR_MIN}, {LR_MAX}])",
                self.lr_max
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.budget.epochs == 0 || self.budget.val_interval == 0 {
            return Err(Error::Config("epochs and val_interval must be positive".into()));
        }
        if !self.validators.contains(&self.selection_validator) {
            return Err(Error::Config(format!(
                "selection validator {} not in the configured validator set",
                self.selection_validator
            )));
        }
        self.algorithm.validate_for(self.feature_layer)
    }
}

/// Shared per-search defaults from which trial configs are minted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialTemplate {
    pub budget: Budget,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub widths: ModelWidths,
    pub validators: Vec<ValidatorId>,
    pub selection_validator: ValidatorId,
    pub scoring: ScoringConfig,
    pub source_only_lr: f64,
}

impl Default for TrialTemplate {
    fn default() -> Self {
        TrialTemplate {
            budget: Budget::default(),
            batch_size: 64,
            weight_decay: 1e-4,
            widths: ModelWidths::default(),
            validators: vec![
                ValidatorId::Oracle,
                ValidatorId::Im,
                ValidatorId::Snd,
                ValidatorId::NegSnd,
                ValidatorId::Dev,
            ],
            selection_validator: ValidatorId::Oracle,
            scoring: ScoringConfig::default(),
            source_only_lr: 1e-2,
        }
    }
}

/// One-cycle schedule: cosine ramp from lr_max/100 to lr_max over the first
/// 5% of steps, then cosine annealing down to exactly 0 at the last step.
pub fn onecycle_lr(step: u64, total_steps: u64, lr_max: f64) -> f64 {
    debug_assert!(total_steps > 0 && step <= total_steps);
    let t = total_steps as f64;
    let s = (step as f64).min(t);
    let warmup = 0.05 * t;
    let lr_init = lr_max / 100.0;
    if s <= warmup && warmup > 0.0 {
        lr_init + (lr_max - lr_init) * 0.5 * (1.0 - (std::f64::consts::PI * s / warmup).cos())
    } else {
        let p = (s - warmup) / (t - warmup);
        lr_max * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// A sampling distribution for one hyperparameter.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Dist {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    IntGrid { lo: i64, hi: i64, step: i64 },
    Fixed { value: f64 },
}

impl Dist {
    fn validate(&self, key: &str) -> Result<()> {
        let ok = match self {
            Dist::Uniform { lo, hi } => lo <= hi,
            Dist::LogUniform { lo, hi } => *lo > 0.0 && lo <= hi,
            Dist::IntGrid { lo, hi, step } => lo <= hi && *step > 0,
            Dist::Fixed { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid distribution for {key}: {self:?}")))
        }
    }

    fn sample(&self, stream: &mut Stream) -> f64 {
        match self {
            Dist::Uniform { lo, hi } => stream.uniform(*lo, *hi),
            Dist::LogUniform { lo, hi } => stream.log_uniform(*lo, *hi),
            Dist::IntGrid { lo, hi, step } => {
                let count = ((hi - lo) / step + 1) as usize;
                (lo + step * stream.below(count) as i64) as f64
            }
            Dist::Fixed { value } => *value,
        }
    }
}

/// Per-hyperparameter distributions, keyed by hyperparameter name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dists: BTreeMap<String, Dist>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (k, d) in &self.dists {
            d.validate(k)?;
        }
        Ok(())
    }

    /// One independent draw per hyperparameter, in key order.
    pub fn sample(&self, stream: &mut Stream) -> BTreeMap<String, f64> {
        self.dists.iter().map(|(k, d)| (k.clone(), d.sample(stream))).collect()
    }
}

fn dist_for_key(key: &str) -> Dist {
    match key {
        "lambda_grl" => Dist::LogUniform { lo: 0.1, hi: 10.0 },
        "lambda_bsp" | "lambda_afn" => Dist::LogUniform { lo: 1e-6, hi: 1.0 },
        "T_mcc" => Dist::Uniform { lo: 0.2, hi: 5.0 },
        "S_afn" => Dist::Uniform { lo: 0.0, hi: 2.0 },
        "k_atdoc" => Dist::IntGrid { lo: 5, hi: 25, step: 5 },
        "N_mcd" => Dist::IntGrid { lo: 1, hi: 10, step: 1 },
        "gamma_exp" => Dist::IntGrid { lo: 1, hi: 8, step: 1 },
        "lr" => Dist::LogUniform { lo: LR_MIN, hi: LR_MAX },
        _ => Dist::Uniform { lo: 0.0, hi: 1.0 },
    }
}

/// Search space for an algorithm: its hyperparameters plus the learning
/// rate. For `X-DANN` combinations the adversarial hyperparameters are
/// frozen to the best values found in a standalone DANN search.
pub fn search_space(
    id: AlgorithmId,
    frozen_dann: Option<&BTreeMap<String, f64>>,
) -> Result<SearchSpace> {
    let mut dists = BTreeMap::new();
    for key in crate::algorithms::required_hyperparams(id) {
        dists.insert(key.to_string(), dist_for_key(key));
    }
    // The source-only baseline trains with plain cross entropy.
    if id.base == BaseAlgorithm::SourceOnly {
        dists.insert("lambda_L".into(), Dist::Fixed { value: 1.0 });
    }
    if id.with_dann {
        let frozen = frozen_dann.ok_or_else(|| {
            Error::Config(format!(
                "{id} requires frozen DANN hyperparameters (run a DANN search first)"
            ))
        })?;
        for key in ["lambda_D", "lambda_grl"] {
            let value = *frozen.get(key).ok_or_else(|| {
                Error::Config(format!("frozen DANN hyperparameters missing {key}"))
            })?;
            dists.insert(key.to_string(), Dist::Fixed { value });
        }
    }
    dists.insert("lr".into(), dist_for_key("lr"));
    let space = SearchSpace { dists };
    space.validate()?;
    Ok(space)
}

/// Patience rule: strict improvement of the selection validator resets the
/// counter; an invalid score never counts as improvement.
pub struct EarlyStopper {
    patience: u32,
    best: Option<f64>,
    misses: u32,
}

impl EarlyStopper {
    pub fn new(patience: u32) -> Self {
        EarlyStopper { patience, best: None, misses: 0 }
    }

    /// Observe one validation-step score (`None` = invalid). Returns true
    /// when training should stop.
    pub fn observe(&mut self, score: Option<f64>) -> bool {
        let improved = match (score, self.best) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.best = score;
            self.misses = 0;
            false
        } else {
            self.misses += 1;
            self.misses >= self.patience
        }
    }
}

/// Accuracy block shared by source-only summaries and references.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AccuracyBlock {
    pub src_val_acc: f64,
    pub src_val_acc_micro: f64,
    pub tgt_train_acc: f64,
    pub tgt_train_acc_micro: f64,
    pub tgt_val_acc: f64,
    pub tgt_val_acc_micro: f64,
}

/// The baseline trained only on labeled source data; every UDA trial warm
/// starts from a copy of it, and accuracies are normalized by it downstream.
pub struct SourceOnlyModel {
    pub bundle: ModelBundle,
    pub accuracy: AccuracyBlock,
}

/// Deterministic child seed.
pub fn derived_seed(master: u64, tag: u64) -> u64 {
    Stream::new(master).derive(tag).next_u64()
}

struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    stream: Stream,
}

impl BatchCycler {
    fn new(n: usize, mut stream: Stream) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        stream.shuffle(&mut order);
        BatchCycler { order, pos: 0, stream }
    }

    /// Next `k` sample indices; reshuffles and wraps when the pool runs out.
    fn next(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos == self.order.len() {
                self.stream.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

struct TaskTensors {
    src_train: LabeledSet,
    src_val: LabeledSet,
    tgt_train: LabeledSet,
    tgt_val: LabeledSet,
}

impl TaskTensors {
    fn from(task: &TaskData) -> Self {
        TaskTensors {
            src_train: task.source.subset(&task.splits.source_train),
            src_val: task.source.subset(&task.splits.source_val),
            tgt_train: task.target.subset(&task.splits.target_train),
            tgt_val: task.target.subset(&task.splits.target_val),
        }
    }
}

fn per_sample_ce(preds: &Tensor, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -(preds.get(r, y) + LOG_EPS).ln())
        .collect()
}

fn accuracy_block(bundle: &ModelBundle, t: &TaskTensors) -> Result<AccuracyBlock> {
    let (_, sv) = bundle.eval_forward(&t.src_val.x)?;
    let (_, tt) = bundle.eval_forward(&t.tgt_train.x)?;
    let (_, tv) = bundle.eval_forward(&t.tgt_val.x)?;
    Ok(AccuracyBlock {
        src_val_acc: accuracy(&sv, &t.src_val.y, AveragingMode::Macro)?,
        src_val_acc_micro: accuracy(&sv, &t.src_val.y, AveragingMode::Micro)?,
        tgt_train_acc: accuracy(&tt, &t.tgt_train.y, AveragingMode::Macro)?,
        tgt_train_acc_micro: accuracy(&tt, &t.tgt_train.y, AveragingMode::Micro)?,
        tgt_val_acc: accuracy(&tv, &t.tgt_val.y, AveragingMode::Macro)?,
        tgt_val_acc_micro: accuracy(&tv, &t.tgt_val.y, AveragingMode::Micro)?,
    })
}

/// Train the source-only baseline: cross entropy on the source train split,
/// early-stopped on source-val macro accuracy, best weights kept.
pub fn train_source_only(
    task: &TaskData,
    template: &TrialTemplate,
    feature_layer: FeatureLayer,
    seed: u64,
) -> Result<SourceOnlyModel> {
    let t = TaskTensors::from(task);
    let root = Stream::new(seed);
    let mut bundle = ModelBundle::new(
        task.spec.input_dim(),
        task.spec.class_count(),
        template.widths.clone(),
        feature_layer,
        &mut root.derive(1),
    );
    let algo = AlgorithmConfig::new(
        AlgorithmId::new(BaseAlgorithm::SourceOnly),
        [("lambda_L".to_string(), 1.0)].into_iter().collect(),
    );
    let mut stepper = Stepper::new(algo, &bundle, &mut root.derive(2))?;
    let mut dropout = root.derive(3);
    let mut ops = root.derive(4);
    let mut batches = BatchCycler::new(t.src_train.len(), root.derive(5));

    let steps_per_epoch = t.src_train.len().div_ceil(template.batch_size).max(1);
    let total_steps = (template.budget.epochs as usize * steps_per_epoch) as u64;
    let mut stopper = EarlyStopper::new(template.budget.patience);
    let mut best: Option<(f64, ModelBundle)> = None;
    let mut global: u64 = 0;
    'train: for epoch in 0..template.budget.epochs {
        for _ in 0..steps_per_epoch {
            let idx = batches.next(template.batch_size);
            let bx = t.src_train.x.select_rows(&idx);
            let by: Vec<usize> = idx.iter().map(|&i| t.src_train.y[i]).collect();
            let lr = onecycle_lr(global, total_steps, template.source_only_lr);
            let mut ctx = StepContext {
                lr,
                weight_decay: template.weight_decay,
                dropout: &mut dropout,
                ops: &mut ops,
            };
            let dummy: Vec<usize> = (0..idx.len()).collect();
            stepper.compose_step(&mut bundle, &bx, &by, &bx, &dummy, &mut ctx)?;
            global += 1;
        }
        if (epoch + 1) % template.budget.val_interval == 0 {
            let (_, sv) = bundle.eval_forward(&t.src_val.x)?;
            let acc = accuracy(&sv, &t.src_val.y, AveragingMode::Macro)?;
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, bundle.clone()));
            }
            if stopper.observe(Some(acc)) {
                break 'train;
            }
        }
    }
    let bundle = best.map(|(_, b)| b).unwrap_or(bundle);
    let accuracy = accuracy_block(&bundle, &t)?;
    Ok(SourceOnlyModel { bundle, accuracy })
}

/// Run one UDA trial from a warm start, scoring every configured validator
/// at each validation interval.
pub fn run_trial(
    config: &TrialConfig,
    task: &TaskData,
    warm: &SourceOnlyModel,
) -> Result<TrialRecord> {
    run_trial_with_id(config, task, warm, 0)
}

pub fn run_trial_with_id(
    config: &TrialConfig,
    task: &TaskData,
    warm: &SourceOnlyModel,
    trial_id: u64,
) -> Result<TrialRecord> {
    config.validate()?;
    let started = std::time::Instant::now();
    let t = TaskTensors::from(task);
    let root = Stream::new(config.seed);

    let mut bundle = warm.bundle.clone();
    bundle.feature_layer = config.feature_layer;
    bundle.reset_optimizer();
    let algo_id = config.algorithm.id;
    if algo_id.needs_discriminator() {
        let dim = if algo_id.base == BaseAlgorithm::Cdan {
            bundle.widths.cdan_projection
        } else {
            bundle.feature_dim()
        };
        bundle.add_discriminator(dim, &mut root.derive(10));
    }
    if algo_id.needs_second_classifier() {
        bundle.add_second_classifier(&mut root.derive(11));
    }
    if algo_id.needs_residual() {
        bundle.add_residual(&mut root.derive(12));
    }

    let mut stepper = Stepper::new(config.algorithm.clone(), &bundle, &mut root.derive(13))?;
    if algo_id.base == BaseAlgorithm::Atdoc {
        stepper.init_memory_bank(&bundle, &t.tgt_train.x)?;
    }

    let mut dropout = root.derive(14);
    let mut ops = root.derive(15);
    let mut src_batches = BatchCycler::new(t.src_train.len(), root.derive(16));
    let mut tgt_batches = BatchCycler::new(t.tgt_train.len(), root.derive(17));
    let scoring_root = root.derive(18);

    let steps_per_epoch =
        t.src_train.len().max(t.tgt_train.len()).div_ceil(config.batch_size).max(1);
    let total_steps = (config.budget.epochs as usize * steps_per_epoch) as u64;

    let mut checkpoints: Vec<CheckpointEntry> = Vec::new();
    let mut stopper = EarlyStopper::new(config.budget.patience);
    let mut status = TrialStatus::Completed;
    let mut global: u64 = 0;

    'train: for epoch in 0..config.budget.epochs {
        for _ in 0..steps_per_epoch {
            let si = src_batches.next(config.batch_size);
            let ti = tgt_batches.next(config.batch_size);
            let sx = t.src_train.x.select_rows(&si);
            let sy: Vec<usize> = si.iter().map(|&i| t.src_train.y[i]).collect();
            let tx = t.tgt_train.x.select_rows(&ti);
            let lr = onecycle_lr(global, total_steps, config.lr_max);
            let mut ctx = StepContext {
                lr,
                weight_decay: config.weight_decay,
                dropout: &mut dropout,
                ops: &mut ops,
            };
            match stepper.compose_step(&mut bundle, &sx, &sy, &tx, &ti, &mut ctx) {
                Ok(_) => {}
                Err(Error::Numeric { node, msg }) => {
                    log::warn!("trial {trial_id} diverged at step {global}: {node}: {msg}");
                    status = TrialStatus::Failed;
                    break 'train;
                }
                Err(e) => return Err(e),
            }
            global += 1;
        }
        if (epoch + 1) % config.budget.val_interval == 0 {
            let entry = score_one_checkpoint(
                config,
                &bundle,
                &t,
                trial_id,
                checkpoints.len() as u64,
                global,
                &scoring_root,
            )?;
            let selection = entry
                .scores
                .get(config.selection_validator.as_str())
                .filter(|s| s.valid)
                .map(|s| s.value);
            checkpoints.push(entry);
            if stopper.observe(selection) {
                status = TrialStatus::EarlyStopped;
                break 'train;
            }
        }
    }

    Ok(TrialRecord {
        trial_id,
        task: config.task.name.clone(),
        algorithm: config.algorithm.id.to_string(),
        feature_layer: config.feature_layer,
        hparams: config.algorithm.hparams.clone(),
        checkpoints,
        status,
        wallclock_s: started.elapsed().as_secs_f64(),
        config: config.clone(),
    })
}

fn score_one_checkpoint(
    config: &TrialConfig,
    bundle: &ModelBundle,
    t: &TaskTensors,
    trial_id: u64,
    checkpoint_id: u64,
    step: u64,
    scoring_root: &Stream,
) -> Result<CheckpointEntry> {
    let (tgt_feats, tgt_preds) = bundle.eval_forward(&t.tgt_train.x)?;
    let (src_val_feats, src_val_preds) = bundle.eval_forward(&t.src_val.x)?;
    let (src_train_feats, _) = bundle.eval_forward(&t.src_train.x)?;
    let (_, tgt_val_preds) = bundle.eval_forward(&t.tgt_val.x)?;
    let snapshot = CheckpointSnapshot {
        trial_id,
        checkpoint_id,
        step,
        src_val_losses: per_sample_ce(&src_val_preds, &t.src_val.y),
        src_val_labels: t.src_val.y.clone(),
        tgt_train_preds: tgt_preds,
        tgt_train_features: tgt_feats,
        src_val_preds,
        src_val_features: src_val_feats,
        src_train_features: src_train_feats,
    };
    let mut stream = scoring_root.derive(checkpoint_id);
    let scores = score_checkpoint(
        &snapshot,
        &config.validators,
        Some(&t.tgt_train.y),
        &config.scoring,
        &mut stream,
    )?;
    Ok(CheckpointEntry {
        step,
        scores: scores
            .iter()
            .map(|(k, v)| (k.as_str().to_string(), ScoreEntry { value: v.value, valid: v.valid }))
            .collect(),
        src_val_acc: accuracy(&snapshot.src_val_preds, &t.src_val.y, AveragingMode::Macro)?,
        src_val_acc_micro: accuracy(&snapshot.src_val_preds, &t.src_val.y, AveragingMode::Micro)?,
        tgt_train_acc: accuracy(&snapshot.tgt_train_preds, &t.tgt_train.y, AveragingMode::Macro)?,
        tgt_train_acc_micro: accuracy(
            &snapshot.tgt_train_preds,
            &t.tgt_train.y,
            AveragingMode::Micro,
        )?,
        tgt_val_acc: accuracy(&tgt_val_preds, &t.tgt_val.y, AveragingMode::Macro)?,
        tgt_val_acc_micro: accuracy(&tgt_val_preds, &t.tgt_val.y, AveragingMode::Micro)?,
    })
}

/// Random-search driver configuration.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub task: TaskSpec,
    pub algorithm: AlgorithmId,
    pub feature_layer: FeatureLayer,
    pub n_trials: u32,
    pub master_seed: u64,
    pub workers: usize,
    pub template: TrialTemplate,
    pub frozen_dann: Option<BTreeMap<String, f64>>,
    pub records_path: Option<PathBuf>,
    /// When false (the default) wallclock_s is recorded as 0 so that equal
    /// seeds reproduce the records file byte for byte.
    pub record_timing: bool,
}

/// The winning (trial, checkpoint) for one validator.
#[derive(Debug, Clone, Serialize)]
pub struct BestSelection {
    pub validator: ValidatorId,
    pub trial_id: u64,
    pub step: u64,
    pub score: f64,
    pub tgt_train_acc: f64,
    pub tgt_val_acc: f64,
    pub config: TrialConfig,
}

pub struct SearchOutcome {
    pub records: Vec<TrialRecord>,
    pub best: BTreeMap<ValidatorId, BestSelection>,
    pub source_only: AccuracyBlock,
}

const SO_SEED_TAG: u64 = 0x500;
const TRIAL_SEED_TAG: u64 = 0x1000;
const SAMPLE_TAG: u64 = 0x2000;

/// Mint the i-th trial config of a search, deterministically from the
/// master seed.
fn mint_trial_config(cfg: &SearchConfig, space: &SearchSpace, i: u32) -> TrialConfig {
    let mut stream = Stream::new(cfg.master_seed).derive(SAMPLE_TAG + i as u64);
    let mut hparams = space.sample(&mut stream);
    let lr_max = hparams.remove("lr").expect("space always contains lr");
    TrialConfig {
        task: cfg.task.clone(),
        algorithm: AlgorithmConfig::new(cfg.algorithm, hparams),
        feature_layer: cfg.feature_layer,
        lr_max,
        seed: derived_seed(cfg.master_seed, TRIAL_SEED_TAG + i as u64),
        warm_start_seed: derived_seed(cfg.master_seed, SO_SEED_TAG),
        source_only_lr: cfg.template.source_only_lr,
        budget: cfg.template.budget.clone(),
        batch_size: cfg.template.batch_size,
        weight_decay: cfg.template.weight_decay,
        widths: cfg.template.widths.clone(),
        validators: cfg.template.validators.clone(),
        selection_validator: cfg.template.selection_validator,
        scoring: cfg.template.scoring.clone(),
    }
}

/// Run `n_trials` independent trials and return the best checkpoint per
/// validator (highest valid score). Records are appended to
/// `records_path` in trial order regardless of worker scheduling.
pub fn random_search(cfg: &SearchConfig) -> Result<SearchOutcome> {
    if cfg.n_trials == 0 {
        return Err(Error::Search("n_trials must be at least 1".into()));
    }
    let task = cfg.task.realize()?;
    let warm = train_source_only(
        &task,
        &cfg.template,
        cfg.feature_layer,
        derived_seed(cfg.master_seed, SO_SEED_TAG),
    )?;
    let space = search_space(cfg.algorithm, cfg.frozen_dann.as_ref())?;
    let configs: Vec<TrialConfig> =
        (0..cfg.n_trials).map(|i| mint_trial_config(cfg, &space, i)).collect();

    let mut records: Vec<TrialRecord> = Vec::with_capacity(configs.len());
    let mut sink = |mut rec: TrialRecord| -> Result<()> {
        if !cfg.record_timing {
            rec.wallclock_s = 0.0;
        }
        if let Some(path) = &cfg.records_path {
            append_record(path, &rec)?;
        }
        log::info!(
            "trial {} done: status {:?}, {} checkpoints",
            rec.trial_id,
            rec.status,
            rec.checkpoints.len()
        );
        records.push(rec);
        Ok(())
    };

    if cfg.workers <= 1 {
        for (i, tc) in configs.iter().enumerate() {
            let rec = run_trial_with_id(tc, &task, &warm, i as u64)?;
            sink(rec)?;
        }
    } else {
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<(usize, Result<TrialRecord>)>();
        std::thread::scope(|scope| {
            for _ in 0..cfg.workers.min(configs.len()) {
                let tx = tx.clone();
                let (configs, task, warm, next) = (&configs, &task, &warm, &next);
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= configs.len() {
                        break;
                    }
                    let rec = run_trial_with_id(&configs[i], task, warm, i as u64);
                    if tx.send((i, rec)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            // Reorder buffer keeps the records file deterministic.
            let mut pending: BTreeMap<usize, Result<TrialRecord>> = BTreeMap::new();
            let mut expected = 0usize;
            for (i, rec) in rx {
                pending.insert(i, rec);
                while let Some(rec) = pending.remove(&expected) {
                    sink(rec?)?;
                    expected += 1;
                }
            }
            debug_assert!(pending.is_empty());
            Ok::<(), Error>(())
        })?;
    }

    if records.iter().all(|r| r.checkpoints.is_empty()) {
        return Err(Error::Search("every trial failed before its first checkpoint".into()));
    }

    let mut best = BTreeMap::new();
    for &v in &cfg.template.validators {
        let mut pick: Option<BestSelection> = None;
        for rec in &records {
            for ck in &rec.checkpoints {
                let Some(score) = ck.scores.get(v.as_str()) else { continue };
                if !score.valid {
                    continue;
                }
                if pick.as_ref().is_none_or(|p| score.value > p.score) {
                    pick = Some(BestSelection {
                        validator: v,
                        trial_id: rec.trial_id,
                        step: ck.step,
                        score: score.value,
                        tgt_train_acc: ck.tgt_train_acc,
                        tgt_val_acc: ck.tgt_val_acc,
                        config: rec.config.clone(),
                    });
                }
            }
        }
        if let Some(p) = pick {
            best.insert(v, p);
        }
    }

    Ok(SearchOutcome { records, best, source_only: warm.accuracy })
}

/// Repeat a winning configuration with fresh seeds and report the mean and
/// (sample) standard deviation of the selected checkpoint's target-val
/// accuracy over the 1 + n runs.
#[derive(Debug, Clone, Serialize)]
pub struct RerunReport {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub std_defined: bool,
}

pub fn rerun_best(
    config: &TrialConfig,
    n_repeats: u32,
    validator: ValidatorId,
) -> Result<RerunReport> {
    let task = config.task.realize()?;
    let warm = train_source_only(
        &task,
        &template_of(config),
        config.feature_layer,
        config.warm_start_seed,
    )?;
    let mut values = Vec::with_capacity(1 + n_repeats as usize);
    for run in 0..=n_repeats {
        let mut c = config.clone();
        if run > 0 {
            c.seed = derived_seed(config.seed, run as u64);
        }
        let rec = run_trial(&c, &task, &warm)?;
        let selected = rec
            .checkpoints
            .iter()
            .filter(|ck| ck.scores.get(validator.as_str()).is_some_and(|s| s.valid))
            .max_by(|a, b| {
                let av = a.scores[validator.as_str()].value;
                let bv = b.scores[validator.as_str()].value;
                av.partial_cmp(&bv).unwrap()
            })
            .or_else(|| rec.checkpoints.last())
            .ok_or_else(|| Error::Search(format!("run {run} produced no checkpoints")))?;
        values.push(selected.tgt_val_acc);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (std, std_defined) = if values.len() >= 2 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (var.sqrt(), true)
    } else {
        (0.0, false)
    };
    Ok(RerunReport { values, mean, std, std_defined })
}

fn template_of(config: &TrialConfig) -> TrialTemplate {
    TrialTemplate {
        budget: config.budget.clone(),
        batch_size: config.batch_size,
        weight_decay: config.weight_decay,
        widths: config.widths.clone(),
        validators: config.validators.clone(),
        selection_validator: config.selection_validator,
        scoring: config.scoring.clone(),
        source_only_lr: config.source_only_lr,
    }
}

/// Fixed-budget UDA training used by the reverse-validation protocol: a
/// quick source-only warm-up on the given labeled set, then the configured
/// algorithm against the unlabeled target. No validation, no early stop.
pub struct ReverseTrainer {
    pub config: TrialConfig,
    runs: u64,
}

impl ReverseTrainer {
    pub fn new(config: TrialConfig) -> Self {
        ReverseTrainer { config, runs: 0 }
    }
}

impl UdaTrainer for ReverseTrainer {
    fn train(
        &mut self,
        source: &LabeledSet,
        target_x: &Tensor,
    ) -> Result<Box<dyn Fn(&Tensor) -> Result<Tensor>>> {
        self.runs += 1;
        let cfg = &self.config;
        let classes = cfg.task.class_count();
        let root = Stream::new(derived_seed(cfg.seed, 0x9e0 + self.runs));
        let mut bundle = ModelBundle::new(
            source.x.cols(),
            classes,
            cfg.widths.clone(),
            cfg.feature_layer,
            &mut root.derive(1),
        );
        let algo_id = cfg.algorithm.id;
        if algo_id.needs_discriminator() {
            let dim = if algo_id.base == BaseAlgorithm::Cdan {
                bundle.widths.cdan_projection
            } else {
                bundle.feature_dim()
            };
            bundle.add_discriminator(dim, &mut root.derive(2));
        }
        if algo_id.needs_second_classifier() {
            bundle.add_second_classifier(&mut root.derive(3));
        }
        if algo_id.needs_residual() {
            bundle.add_residual(&mut root.derive(4));
        }

        // Source-only warm-up.
        let so = AlgorithmConfig::new(
            AlgorithmId::new(BaseAlgorithm::SourceOnly),
            [("lambda_L".to_string(), 1.0)].into_iter().collect(),
        );
        let mut so_stepper = Stepper::new(so, &bundle, &mut root.derive(5))?;
        let mut uda_stepper = Stepper::new(cfg.algorithm.clone(), &bundle, &mut root.derive(6))?;
        if algo_id.base == BaseAlgorithm::Atdoc {
            uda_stepper.init_memory_bank(&bundle, target_x)?;
        }
        let mut dropout = root.derive(7);
        let mut ops = root.derive(8);
        let mut src_batches = BatchCycler::new(source.len(), root.derive(9));
        let mut tgt_batches = BatchCycler::new(target_x.rows(), root.derive(10));
        let steps_per_epoch =
            source.len().max(target_x.rows()).div_ceil(cfg.batch_size).max(1);

        for phase in 0..2 {
            if phase == 1 {
                bundle.reset_optimizer();
            }
            let total = (cfg.budget.epochs as usize * steps_per_epoch) as u64;
            let lr_max = if phase == 0 { cfg.source_only_lr } else { cfg.lr_max };
            let mut global = 0u64;
            for _ in 0..cfg.budget.epochs {
                for _ in 0..steps_per_epoch {
                    let si = src_batches.next(cfg.batch_size);
                    let ti = tgt_batches.next(cfg.batch_size);
                    let sx = source.x.select_rows(&si);
                    let sy: Vec<usize> = si.iter().map(|&i| source.y[i]).collect();
                    let tx = target_x.select_rows(&ti);
                    let mut ctx = StepContext {
                        lr: onecycle_lr(global, total, lr_max),
                        weight_decay: cfg.weight_decay,
                        dropout: &mut dropout,
                        ops: &mut ops,
                    };
                    let stepper =
                        if phase == 0 { &mut so_stepper } else { &mut uda_stepper };
                    stepper.compose_step(&mut bundle, &sx, &sy, &tx, &ti, &mut ctx)?;
                    global += 1;
                }
            }
        }
        let bundle = bundle.clone();
        Ok(Box::new(move |x: &Tensor| bundle.eval_forward(x).map(|(_, p)| p)))
    }
}

/// Run the full reverse-validation protocol for one configuration.
pub fn reverse_validate(config: &TrialConfig) -> Result<ReverseValidationOutcome> {
    let task = config.task.realize()?;
    let t = TaskTensors::from(&task);
    let mut trainer = ReverseTrainer::new(config.clone());
    crate::validators::reverse_validation(&mut trainer, &t.src_train, &t.tgt_train.x)
}
