//! Checkpoint scoring without target labels: accuracy conventions, the
//! unsupervised validators, and source-accuracy thresholding utilities.

use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use crate::autodiff::Graph;
use crate::datasets::LabeledSet;
use crate::error::{Error, Result};
use crate::models::{build_discriminator, discriminator_forward};
use crate::optim::ParamSet;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Everything a validator may see at one validation step. Target labels are
/// deliberately absent; only the oracle receives them, out of band.
#[derive(Clone)]
pub struct CheckpointSnapshot {
    pub trial_id: u64,
    pub checkpoint_id: u64,
    pub step: u64,
    pub tgt_train_preds: Tensor,
    pub tgt_train_features: Tensor,
    pub src_val_preds: Tensor,
    pub src_val_losses: Vec<f64>,
    pub src_val_labels: Vec<usize>,
    pub src_val_features: Tensor,
    pub src_train_features: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidatorId {
    Oracle,
    Im,
    Snd,
    NegSnd,
    Dev,
}

impl ValidatorId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ValidatorId::Oracle => "oracle",
            ValidatorId::Im => "im",
            ValidatorId::Snd => "snd",
            ValidatorId::NegSnd => "neg_snd",
            ValidatorId::Dev => "dev",
        }
    }

    pub fn all() -> &'static [ValidatorId] {
        &[ValidatorId::Oracle, ValidatorId::Im, ValidatorId::Snd, ValidatorId::NegSnd, ValidatorId::Dev]
    }
}

impl std::fmt::Display for ValidatorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ValidatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oracle" => Ok(ValidatorId::Oracle),
            "im" => Ok(ValidatorId::Im),
            "snd" => Ok(ValidatorId::Snd),
            "neg_snd" | "negsnd" => Ok(ValidatorId::NegSnd),
            "dev" => Ok(ValidatorId::Dev),
            other => Err(Error::Config(format!("unknown validator {other}"))),
        }
    }
}

/// A validator's verdict on one checkpoint. Non-finite raw values are
/// stored as 0 with the invalid flag set; invalid scores rank below every
/// valid score during selection.
#[derive(Debug, Clone, Copy)]
pub struct ValidationScore {
    pub validator: ValidatorId,
    pub value: f64,
    pub valid: bool,
    pub higher_is_better: bool,
}

impl ValidationScore {
    pub fn new(validator: ValidatorId, raw: f64) -> Self {
        let valid = raw.is_finite();
        ValidationScore {
            validator,
            value: if valid { raw } else { 0.0 },
            valid,
            higher_is_better: true,
        }
    }

    pub fn invalid(validator: ValidatorId) -> Self {
        ValidationScore { validator, value: 0.0, valid: false, higher_is_better: true }
    }

    /// Selection key: every valid score beats every invalid one.
    pub fn rank_key(&self) -> (bool, f64) {
        (self.valid, if self.valid { self.value } else { f64::NEG_INFINITY })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AveragingMode {
    Micro,
    Macro,
}

/// Micro = overall fraction correct; macro = mean per-class recall over the
/// classes that actually appear in `labels`.
pub fn accuracy(preds: &Tensor, labels: &[usize], mode: AveragingMode) -> Result<f64> {
    if labels.is_empty() || preds.rows() == 0 {
        return Err(Error::Input("accuracy of empty input".into()));
    }
    if preds.rows() != labels.len() {
        return Err(Error::Input(format!(
            "{} prediction rows vs {} labels",
            preds.rows(),
            labels.len()
        )));
    }
    let hard = preds.argmax_rows();
    match mode {
        AveragingMode::Micro => {
            let correct = hard.iter().zip(labels).filter(|(p, y)| p == y).count();
            Ok(correct as f64 / labels.len() as f64)
        }
        AveragingMode::Macro => {
            let classes = labels.iter().max().unwrap() + 1;
            let mut total = vec![0usize; classes];
            let mut correct = vec![0usize; classes];
            for (p, &y) in hard.iter().zip(labels) {
                total[y] += 1;
                if *p == y {
                    correct[y] += 1;
                }
            }
            let mut sum = 0.0;
            let mut present = 0;
            for c in 0..classes {
                if total[c] > 0 {
                    sum += correct[c] as f64 / total[c] as f64;
                    present += 1;
                }
            }
            Ok(sum / present as f64)
        }
    }
}

/// Macro accuracy of the target-train predictions against ground-truth
/// labels supplied out of band.
pub fn oracle_score(snapshot: &CheckpointSnapshot, target_labels: &[usize]) -> Result<f64> {
    if target_labels.is_empty() {
        return Err(Error::Config("oracle scoring requires target labels".into()));
    }
    accuracy(&snapshot.tgt_train_preds, target_labels, AveragingMode::Macro)
}

/// Shannon entropy with the 0 log 0 = 0 convention.
fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Information-maximization score: entropy of the mean prediction minus the
/// mean prediction entropy, over the whole set. Bounded by [0, ln C].
pub fn im_score(preds: &Tensor) -> Result<f64> {
    let (n, c) = preds.shape();
    if n == 0 || c == 0 {
        return Err(Error::Input("empty prediction matrix".into()));
    }
    let mut mean = vec![0.0; c];
    let mut mean_h = 0.0;
    for r in 0..n {
        let row = preds.row(r);
        mean_h += entropy(row);
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    mean_h /= n as f64;
    Ok(entropy(&mean) - mean_h)
}

/// Soft neighborhood density: cosine similarities between all target
/// features (diagonal excluded), rows softmaxed at temperature `tau`, score
/// is the mean row entropy.
pub fn snd_score(features: &Tensor, tau: f64) -> Result<f64> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::Input(format!("snd needs at least 2 samples, got {n}")));
    }
    if tau <= 0.0 {
        return Err(Error::Input(format!("snd temperature {tau} must be positive")));
    }
    let norms: Vec<f64> = (0..n)
        .map(|r| features.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    for (r, &nm) in norms.iter().enumerate() {
        if nm == 0.0 {
            return Err(Error::Input(format!("zero-norm feature row {r}")));
        }
    }
    let mut mean = 0.0;
    let mut sims = vec![0.0; n - 1];
    for i in 0..n {
        let fi = features.row(i);
        let mut k = 0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let dot: f64 = fi.iter().zip(features.row(j)).map(|(a, b)| a * b).sum();
            sims[k] = dot / (norms[i] * norms[j]) / tau;
            k += 1;
        }
        // Entropy in the softmax-native form H = ln S - sum(w ln w)/S with
        // w = exp(z - max): exact at the uniform corner cases.
        let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        let mut wlogw = 0.0;
        for &z in &sims {
            let w = (z - m).exp();
            s += w;
            wlogw += w * w.ln();
        }
        let h = s.ln() - wlogw / s;
        // Running mean: exact when every row entropy is identical.
        mean += (h - mean) / (i + 1) as f64;
    }
    Ok(mean)
}

/// Negated soft neighborhood density.
pub fn neg_snd_score(features: &Tensor, tau: f64) -> Result<f64> {
    Ok(-snd_score(features, tau)?)
}

/// Variance threshold under which importance weights are considered
/// degenerate and the score undefined.
pub const DEV_VAR_EPS: f64 = 1e-12;

/// Importance-weighted validation risk with control variates, negated so
/// that higher is better. `target_probs[i]` is the domain classifier's
/// probability that source-val sample `i` belongs to the target domain;
/// `n_src`/`n_tgt` are the domain classifier's training set sizes.
pub fn dev_score(
    src_val_losses: &[f64],
    target_probs: &[f64],
    n_src: usize,
    n_tgt: usize,
) -> Result<f64> {
    let n = src_val_losses.len();
    if n == 0 || target_probs.len() != n {
        return Err(Error::Input(format!(
            "dev needs matching non-empty losses and probabilities, got {n} and {}",
            target_probs.len()
        )));
    }
    if n_src == 0 || n_tgt == 0 {
        return Err(Error::Input("dev needs non-empty domain training sets".into()));
    }
    let ratio = n_src as f64 / n_tgt as f64;
    let w: Vec<f64> = target_probs.iter().map(|&q| ratio * q / (1.0 - q)).collect();
    let wl: Vec<f64> = w.iter().zip(src_val_losses).map(|(a, b)| a * b).collect();
    let nf = n as f64;
    let mean_w = w.iter().sum::<f64>() / nf;
    let mean_wl = wl.iter().sum::<f64>() / nf;
    let var_w = w.iter().map(|x| (x - mean_w) * (x - mean_w)).sum::<f64>() / nf;
    if var_w < DEV_VAR_EPS {
        return Err(Error::DegenerateVariance);
    }
    let cov =
        wl.iter().zip(&w).map(|(a, b)| (a - mean_wl) * (b - mean_w)).sum::<f64>() / nf;
    let eta = -cov / var_w;
    let risk = mean_wl + eta * mean_w - eta;
    Ok(-risk)
}

/// Small MLP trained to distinguish target (label 1) from source (label 0)
/// features; used by deep embedded validation.
pub struct DomainClassifier {
    params: ParamSet,
    pub n_src: usize,
    pub n_tgt: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainClassifierConfig {
    pub hidden: usize,
    pub epochs: u32,
    pub lr: f64,
}

impl Default for DomainClassifierConfig {
    fn default() -> Self {
        DomainClassifierConfig { hidden: 32, epochs: 200, lr: 1e-3 }
    }
}

/// Full-batch Adam training of the domain classifier.
pub fn train_domain_classifier(
    src_features: &Tensor,
    tgt_features: &Tensor,
    cfg: &DomainClassifierConfig,
    stream: &mut Stream,
) -> Result<DomainClassifier> {
    let (ns, nt) = (src_features.rows(), tgt_features.rows());
    if ns == 0 || nt == 0 {
        return Err(Error::Input("domain classifier needs samples from both domains".into()));
    }
    if src_features.cols() != tgt_features.cols() {
        return Err(Error::Input("feature widths differ between domains".into()));
    }
    let mut params = build_discriminator(src_features.cols(), cfg.hidden, stream);
    // Target rows labeled 1, source rows 0.
    let mut targets = Tensor::zeros(ns + nt, 1);
    for r in ns..ns + nt {
        targets.set(r, 0, 1.0);
    }
    let mut x = Tensor::zeros(ns + nt, src_features.cols());
    for r in 0..ns {
        for c in 0..src_features.cols() {
            x.set(r, c, src_features.get(r, c));
        }
    }
    for r in 0..nt {
        for c in 0..tgt_features.cols() {
            x.set(ns + r, c, tgt_features.get(r, c));
        }
    }
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let xi = g.input(x.clone());
        let logits = discriminator_forward(&mut g, &bound, xi)?;
        let loss = crate::algorithms::losses::bce_with_logits(&mut g, logits, &targets)?;
        g.backward(loss)?;
        params.adam_step_from_graph(&g, &bound, cfg.lr, crate::optim::WEIGHT_DECAY)?;
    }
    Ok(DomainClassifier { params, n_src: ns, n_tgt: nt })
}

impl DomainClassifier {
    /// Calibrated probability that each row belongs to the target domain.
    pub fn predict_target_prob(&self, features: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xi = g.input(features.clone());
        let logits = discriminator_forward(&mut g, &bound, xi)?;
        let probs = g.sigmoid(logits)?;
        Ok(g.value(probs).data().to_vec())
    }
}

/// Per-checkpoint scoring configuration shared by the harness.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoringConfig {
    pub snd_tau: f64,
    pub dev: DomainClassifierConfig,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { snd_tau: 0.05, dev: DomainClassifierConfig::default() }
    }
}

/// Score a snapshot with every requested validator. Scoring failures
/// (degenerate variance, zero-norm rows, non-finite values) surface as
/// invalid-flagged scores, never as errors.
pub fn score_checkpoint(
    snapshot: &CheckpointSnapshot,
    validators: &[ValidatorId],
    target_labels: Option<&[usize]>,
    cfg: &ScoringConfig,
    stream: &mut Stream,
) -> Result<BTreeMap<ValidatorId, ValidationScore>> {
    let mut out = BTreeMap::new();
    // SND underlies both snd and neg_snd; compute it once.
    let needs_snd = validators.iter().any(|v| matches!(v, ValidatorId::Snd | ValidatorId::NegSnd));
    let snd = if needs_snd {
        Some(snd_score(&snapshot.tgt_train_features, cfg.snd_tau))
    } else {
        None
    };
    for &v in validators {
        let score = match v {
            ValidatorId::Oracle => {
                let labels = target_labels.ok_or_else(|| {
                    Error::Config("oracle validator configured without target labels".into())
                })?;
                ValidationScore::new(v, oracle_score(snapshot, labels)?)
            }
            ValidatorId::Im => match im_score(&snapshot.tgt_train_preds) {
                Ok(x) => ValidationScore::new(v, x),
                Err(_) => ValidationScore::invalid(v),
            },
            ValidatorId::Snd => match snd.as_ref().unwrap() {
                Ok(x) => ValidationScore::new(v, *x),
                Err(_) => ValidationScore::invalid(v),
            },
            ValidatorId::NegSnd => match snd.as_ref().unwrap() {
                Ok(x) => ValidationScore::new(v, -*x),
                Err(_) => ValidationScore::invalid(v),
            },
            ValidatorId::Dev => {
                let clf = train_domain_classifier(
                    &snapshot.src_train_features,
                    &snapshot.tgt_train_features,
                    &cfg.dev,
                    &mut stream.derive(0xdeu64),
                )?;
                let q = clf.predict_target_prob(&snapshot.src_val_features)?;
                match dev_score(&snapshot.src_val_losses, &q, clf.n_src, clf.n_tgt) {
                    Ok(x) => ValidationScore::new(v, x),
                    Err(Error::DegenerateVariance) => ValidationScore::invalid(v),
                    Err(e) => return Err(e),
                }
            }
        };
        out.insert(v, score);
    }
    Ok(out)
}

/// Trains one UDA model and returns a predictor over feature matrices.
/// Implemented by the harness; kept as a trait so the reverse-validation
/// protocol can be exercised with stub trainers.
pub trait UdaTrainer {
    fn train(
        &mut self,
        source: &LabeledSet,
        target_x: &Tensor,
    ) -> Result<Box<dyn Fn(&Tensor) -> Result<Tensor>>>;
}

pub struct ReverseValidationOutcome {
    pub score: f64,
    pub training_runs: u32,
}

/// Reverse validation: train forward UDA, pseudo-label the target set with
/// its argmax predictions, train a reverse model from pseudo-labeled target
/// back to the (now unlabeled) source, and score the reverse model on the
/// true source labels. Costs exactly two training runs.
pub fn reverse_validation(
    trainer: &mut dyn UdaTrainer,
    source: &LabeledSet,
    target_x: &Tensor,
) -> Result<ReverseValidationOutcome> {
    let forward = trainer.train(source, target_x)?;
    let pseudo = forward(target_x)?.argmax_rows();
    let pseudo_target =
        LabeledSet { x: target_x.clone(), y: pseudo, domain: format!("{}-pseudo", source.domain) };
    let reverse = trainer.train(&pseudo_target, &source.x)?;
    let preds = reverse(&source.x)?;
    let score = accuracy(&preds, &source.y, AveragingMode::Macro)?;
    Ok(ReverseValidationOutcome { score, training_runs: 2 })
}

/// Keep items whose source accuracy, normalized by the source-only model's
/// accuracy, exceeds `threshold`.
pub fn threshold_filter<T>(
    items: Vec<T>,
    normalized_src_acc: impl Fn(&T) -> f64,
    threshold: f64,
) -> Vec<T> {
    items.into_iter().filter(|it| normalized_src_acc(it) > threshold).collect()
}

/// Derive the normalized source-accuracy threshold: per task, take the
/// record with the best target accuracy, then average their normalized
/// source accuracies. Groups are (normalized source accuracy, target
/// accuracy) pairs, one group per task.
pub fn derive_threshold(groups: &[Vec<(f64, f64)>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Input("no task groups to derive a threshold from".into()));
    }
    let mut sum = 0.0;
    for (i, g) in groups.iter().enumerate() {
        let best = g
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .ok_or_else(|| Error::Input(format!("task group {i} is empty")))?;
        sum += best.0;
    }
    Ok(sum / groups.len() as f64)
}
