//! Algorithm configurations and per-step loss composition.

pub mod losses;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::models::{discriminator_forward, residual_forward, FeatureLayer, ModelBundle};
use crate::optim::BoundParams;
use crate::rng::Stream;
use crate::tensor::Tensor;

use losses::{
    afn, bce_with_logits, bnm, cdan_combine, cdan_projections, coral, domain_targets, jmmd,
    mcc, mcd_discrepancy, mean_entropy, mmd, neg_info_max, src_ce, swd_discrepancy,
    top_singular_sq, two_class_probs, uniform_domain_ce, MemoryBank,
};

/// MMD bandwidth exponent for the residual-transfer feature term, which has
/// no searched bandwidth of its own.
pub const RTN_GAMMA_EXP: u32 = 2;
/// Random projections per sliced-Wasserstein evaluation, resampled per step.
pub const SWD_PROJECTIONS: usize = 128;
/// Top singular values penalized by the batch spectral loss.
pub const BSP_TOP_K: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaseAlgorithm {
    SourceOnly,
    Dann,
    Dc,
    Cdan,
    Mmd,
    Jmmd,
    Coral,
    Mcd,
    Swd,
    MinEnt,
    Im,
    Itl,
    Mcc,
    Bsp,
    Bnm,
    Afn,
    Atdoc,
    Rtn,
}

impl BaseAlgorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaseAlgorithm::SourceOnly => "SourceOnly",
            BaseAlgorithm::Dann => "DANN",
            BaseAlgorithm::Dc => "DC",
            BaseAlgorithm::Cdan => "CDAN",
            BaseAlgorithm::Mmd => "MMD",
            BaseAlgorithm::Jmmd => "JMMD",
            BaseAlgorithm::Coral => "CORAL",
            BaseAlgorithm::Mcd => "MCD",
            BaseAlgorithm::Swd => "SWD",
            BaseAlgorithm::MinEnt => "MinEnt",
            BaseAlgorithm::Im => "IM",
            BaseAlgorithm::Itl => "ITL",
            BaseAlgorithm::Mcc => "MCC",
            BaseAlgorithm::Bsp => "BSP",
            BaseAlgorithm::Bnm => "BNM",
            BaseAlgorithm::Afn => "AFN",
            BaseAlgorithm::Atdoc => "ATDOC",
            BaseAlgorithm::Rtn => "RTN",
        }
    }

    pub fn all() -> &'static [BaseAlgorithm] {
        use BaseAlgorithm::*;
        &[
            SourceOnly, Dann, Dc, Cdan, Mmd, Jmmd, Coral, Mcd, Swd, MinEnt, Im, Itl, Mcc, Bsp,
            Bnm, Afn, Atdoc, Rtn,
        ]
    }

    /// Bases that can be combined with adversarial alignment as `X-DANN`.
    pub fn dann_combinable(&self) -> bool {
        use BaseAlgorithm::*;
        matches!(self, Mmd | Jmmd | Coral | MinEnt | Im | Mcc | Bsp | Bnm | Afn | Atdoc)
    }
}

/// Algorithm identity: a base recipe, optionally combined with the
/// adversarial gradient-reversal terms (`X-DANN`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AlgorithmId {
    pub base: BaseAlgorithm,
    pub with_dann: bool,
}

impl AlgorithmId {
    pub fn new(base: BaseAlgorithm) -> Self {
        AlgorithmId { base, with_dann: false }
    }

    pub fn with_dann(base: BaseAlgorithm) -> Result<Self> {
        if !base.dann_combinable() {
            return Err(Error::Config(format!(
                "{} cannot be combined with DANN",
                base.as_str()
            )));
        }
        Ok(AlgorithmId { base, with_dann: true })
    }

    pub fn needs_discriminator(&self) -> bool {
        self.with_dann
            || matches!(
                self.base,
                BaseAlgorithm::Dann | BaseAlgorithm::Dc | BaseAlgorithm::Cdan | BaseAlgorithm::Itl
            )
    }

    pub fn needs_second_classifier(&self) -> bool {
        matches!(self.base, BaseAlgorithm::Mcd | BaseAlgorithm::Swd)
    }

    pub fn needs_residual(&self) -> bool {
        matches!(self.base, BaseAlgorithm::Rtn)
    }

    /// Only plain adversarial alignment can consume the softmax layer as
    /// its feature tap.
    pub fn fl8_compatible(&self) -> bool {
        self.base == BaseAlgorithm::Dann && !self.with_dann
    }

    /// Known algorithm names, for usage errors.
    pub fn known_names() -> Vec<String> {
        let mut names: Vec<String> =
            BaseAlgorithm::all().iter().map(|b| b.as_str().to_string()).collect();
        names.extend(
            BaseAlgorithm::all()
                .iter()
                .filter(|b| b.dann_combinable())
                .map(|b| format!("{}-DANN", b.as_str())),
        );
        names
    }
}

impl std::fmt::Display for AlgorithmId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.with_dann {
            write!(f, "{}-DANN", self.base.as_str())
        } else {
            f.write_str(self.base.as_str())
        }
    }
}

impl std::str::FromStr for AlgorithmId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (base_str, with_dann) = match lower.strip_suffix("-dann") {
            Some(prefix) if !prefix.is_empty() => (prefix, true),
            _ => (lower.as_str(), false),
        };
        let base = BaseAlgorithm::all()
            .iter()
            .find(|b| b.as_str().to_ascii_lowercase() == base_str)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s}")))?;
        if with_dann {
            AlgorithmId::with_dann(base)
        } else {
            Ok(AlgorithmId::new(base))
        }
    }
}

impl Serialize for AlgorithmId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AlgorithmId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive hyperparameter interval for validation.
enum Range {
    Unit,
    Interval(f64, f64),
    IntGrid(i64, i64, i64),
}

fn range_for(key: &str) -> Option<Range> {
    Some(match key {
        "lambda_L" | "lambda_D" | "lambda_G" | "lambda_F" | "lambda_ent" | "lambda_imax"
        | "lambda_imin" | "lambda_mcc" | "lambda_bnm" | "lambda_atdoc" | "lambda_disc" => Range::Unit,
        "lambda_grl" => Range::Interval(0.1, 10.0),
        "T_mcc" => Range::Interval(0.2, 5.0),
        "lambda_bsp" | "lambda_afn" => Range::Interval(1e-6, 1.0),
        "S_afn" => Range::Interval(0.0, 2.0),
        "k_atdoc" => Range::IntGrid(5, 25, 5),
        "N_mcd" => Range::IntGrid(1, 10, 1),
        "gamma_exp" => Range::IntGrid(1, 8, 1),
        _ => return None,
    })
}

/// Hyperparameter keys an algorithm requires, excluding the learning rate.
pub fn required_hyperparams(id: AlgorithmId) -> Vec<&'static str> {
    use BaseAlgorithm::*;
    let mut keys: Vec<&'static str> = match id.base {
        SourceOnly => vec!["lambda_L"],
        Dann => vec!["lambda_L", "lambda_D", "lambda_grl"],
        Dc | Cdan => vec!["lambda_L", "lambda_D", "lambda_G"],
        Mmd | Jmmd => vec!["lambda_L", "lambda_F", "gamma_exp"],
        Coral => vec!["lambda_L", "lambda_F"],
        Mcd | Swd => vec!["lambda_L", "lambda_disc", "N_mcd"],
        MinEnt => vec!["lambda_L", "lambda_ent"],
        Im => vec!["lambda_L", "lambda_imax"],
        Itl => vec!["lambda_L", "lambda_imax", "lambda_imin"],
        Mcc => vec!["lambda_L", "lambda_mcc", "T_mcc"],
        Bsp => vec!["lambda_L", "lambda_bsp"],
        Bnm => vec!["lambda_L", "lambda_bnm"],
        Afn => vec!["lambda_L", "lambda_afn", "S_afn"],
        Atdoc => vec!["lambda_L", "lambda_atdoc", "k_atdoc"],
        Rtn => vec!["lambda_L", "lambda_F", "lambda_ent"],
    };
    if id.with_dann {
        keys.push("lambda_D");
        keys.push("lambda_grl");
    }
    keys
}

/// An algorithm identifier plus its hyperparameter values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AlgorithmConfig {
    pub id: AlgorithmId,
    pub hparams: BTreeMap<String, f64>,
}

impl AlgorithmConfig {
    pub fn new(id: AlgorithmId, hparams: BTreeMap<String, f64>) -> Self {
        AlgorithmConfig { id, hparams }
    }

    pub fn get(&self, key: &str) -> Result<f64> {
        self.hparams.get(key).copied().ok_or_else(|| {
            Error::Config(format!("{} requires hyperparameter {key}", self.id))
        })
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Config(format!("{key} must be a non-negative integer, got {v}")));
        }
        Ok(v as usize)
    }

    /// Required keys present and inside their search intervals.
    pub fn validate(&self) -> Result<()> {
        for key in required_hyperparams(self.id) {
            let v = self.get(key)?;
            match range_for(key) {
                Some(Range::Unit) => {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::Config(format!("{key}={v} outside [0, 1]")));
                    }
                }
                Some(Range::Interval(a, b)) => {
                    if !(a..=b).contains(&v) {
                        return Err(Error::Config(format!("{key}={v} outside [{a}, {b}]")));
                    }
                }
                Some(Range::IntGrid(a, b, step)) => {
                    let ok = v.fract() == 0.0 && {
                        let i = v as i64;
                        i >= a && i <= b && (i - a) % step == 0
                    };
                    if !ok {
                        return Err(Error::Config(format!(
                            "{key}={v} outside integer grid [{a}, {b}] step {step}"
                        )));
                    }
                }
                None => {}
            }
        }
        Ok(())
    }

    pub fn validate_for(&self, feature_layer: FeatureLayer) -> Result<()> {
        self.validate()?;
        if feature_layer == FeatureLayer::Fl8 && !self.id.fl8_compatible() {
            return Err(Error::Config(format!(
                "{} cannot use feature layer FL8",
                self.id
            )));
        }
        Ok(())
    }
}

/// One named loss term: unweighted value and the weight that was applied.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// Per-step loss breakdown; `total` is the minimized objective.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }
}

struct Terms {
    entries: Vec<(String, f64, NodeId)>,
}

impl Terms {
    fn new() -> Self {
        Terms { entries: Vec::new() }
    }

    fn push(&mut self, g: &Graph, name: &str, weight: f64, node: NodeId) -> Result<()> {
        if !g.value(node).is_scalar() {
            return Err(Error::Input(format!("loss term {name} is not scalar")));
        }
        self.entries.push((name.to_string(), weight, node));
        Ok(())
    }

    /// Weighted total node plus the report rows.
    fn finish(self, g: &mut Graph) -> Result<(NodeId, LossReport)> {
        let mut total: Option<NodeId> = None;
        let mut report = LossReport::default();
        for (name, weight, node) in self.entries {
            report.terms.push(LossTerm { name, weight, value: g.value(node).scalar() });
            let w = g.scale(node, weight)?;
            total = Some(match total {
                None => w,
                Some(t) => g.add(t, w)?,
            });
        }
        let total = match total {
            Some(t) => t,
            None => g.constant(0.0),
        };
        report.total = g.value(total).scalar();
        Ok((total, report))
    }
}

/// Mutable per-step context: learning rate, decay, and the streams feeding
/// stochastic ops.
pub struct StepContext<'a> {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: &'a mut Stream,
    pub ops: &'a mut Stream,
}

/// Stateful step composer for one trial: owns whatever per-trial state the
/// algorithm needs (projection matrices, pseudo-label memory).
pub struct Stepper {
    pub config: AlgorithmConfig,
    cdan_proj: Option<(Tensor, Tensor)>,
    bank: Option<MemoryBank>,
    swd_projections: usize,
    last_generator_updates: u32,
}

impl Stepper {
    pub fn new(config: AlgorithmConfig, bundle: &ModelBundle, stream: &mut Stream) -> Result<Self> {
        config.validate_for(bundle.feature_layer)?;
        let cdan_proj = if config.id.base == BaseAlgorithm::Cdan {
            Some(cdan_projections(
                bundle.feature_dim(),
                bundle.num_classes,
                bundle.widths.cdan_projection,
                &mut stream.derive(0xcda),
            ))
        } else {
            None
        };
        Ok(Stepper {
            config,
            cdan_proj,
            bank: None,
            swd_projections: SWD_PROJECTIONS,
            last_generator_updates: 0,
        })
    }

    /// Number of trunk-only updates the last discrepancy-protocol step ran.
    pub fn last_generator_updates(&self) -> u32 {
        self.last_generator_updates
    }

    /// Fill the pseudo-label memory with current evaluation-mode features
    /// over the whole target-train set and uniform predictions.
    pub fn init_memory_bank(&mut self, bundle: &ModelBundle, tgt_train_x: &Tensor) -> Result<()> {
        let (feats, _) = bundle.eval_forward(tgt_train_x)?;
        self.bank = Some(MemoryBank::new_uniform(feats, bundle.num_classes));
        Ok(())
    }

    /// Compose the algorithm's loss terms on one batch pair, run backward,
    /// and apply one Adam step.
    pub fn compose_step(
        &mut self,
        bundle: &mut ModelBundle,
        src_x: &Tensor,
        src_y: &[usize],
        tgt_x: &Tensor,
        tgt_bank_idx: &[usize],
        ctx: &mut StepContext,
    ) -> Result<LossReport> {
        if self.config.id.needs_second_classifier() {
            return self.discrepancy_protocol_step(bundle, src_x, src_y, tgt_x, ctx);
        }
        let lambda_l = self.config.get("lambda_L")?;
        let mut g = Graph::new();
        let bound = bundle.bind(&mut g);
        let xs = g.input(src_x.clone());
        let xt = g.input(tgt_x.clone());
        let src = bundle.forward_with_taps(&mut g, &bound, xs, 0, Some(ctx.dropout))?;

        let mut terms = Terms::new();
        let mut bank_update: Option<(Tensor, Tensor)> = None;

        if self.config.id.base == BaseAlgorithm::SourceOnly {
            let ce = src_ce(&mut g, src.preds, src_y)?;
            terms.push(&g, "src_ce", lambda_l, ce)?;
        } else {
            let tgt = bundle.forward_with_taps(&mut g, &bound, xt, 0, Some(ctx.dropout))?;
            if self.config.id.base == BaseAlgorithm::Rtn {
                // Residual connection: the source pathway sees its logits
                // plus a learned correction; plain logits serve the target.
                let res = residual_forward(
                    &mut g,
                    bound.residual.as_ref().ok_or_else(|| {
                        Error::Config("residual head missing from bundle".into())
                    })?,
                    src.logits,
                )?;
                let adjusted = g.add(src.logits, res)?;
                let adj_preds = g.row_softmax(adjusted)?;
                let ce = src_ce(&mut g, adj_preds, src_y)?;
                terms.push(&g, "src_ce", lambda_l, ce)?;
            } else {
                let ce = src_ce(&mut g, src.preds, src_y)?;
                terms.push(&g, "src_ce", lambda_l, ce)?;
            }
            self.push_adaptation_terms(
                &mut g,
                bundle,
                &bound,
                &src,
                &tgt,
                src_y,
                tgt_bank_idx,
                &mut terms,
                ctx,
            )?;
            if self.config.id.base == BaseAlgorithm::Atdoc {
                bank_update =
                    Some((g.value(tgt.features).clone(), g.value(tgt.preds).clone()));
            }
        }

        let (total, report) = terms.finish(&mut g)?;
        g.backward(total)?;
        self.apply_updates(bundle, &g, &bound, ctx)?;
        if let (Some(bank), Some((feats, preds))) = (self.bank.as_mut(), bank_update) {
            bank.update(tgt_bank_idx, &feats, &preds);
        }
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn push_adaptation_terms(
        &mut self,
        g: &mut Graph,
        bundle: &ModelBundle,
        bound: &crate::models::BoundBundle,
        src: &crate::models::ForwardTaps,
        tgt: &crate::models::ForwardTaps,
        _src_y: &[usize],
        tgt_bank_idx: &[usize],
        terms: &mut Terms,
        ctx: &mut StepContext,
    ) -> Result<()> {
        let cfg = &self.config;
        let (f_src, f_tgt) = (src.features, tgt.features);
        match cfg.id.base {
            BaseAlgorithm::SourceOnly | BaseAlgorithm::Mcd | BaseAlgorithm::Swd => {}
            BaseAlgorithm::Dann => {
                let node = self.dann_domain_term(g, bound, f_src, f_tgt)?;
                terms.push(g, "dann_domain", cfg.get("lambda_D")?, node)?;
            }
            BaseAlgorithm::Dc => {
                let (disc_term, gen_logits) =
                    self.adversarial_branches(g, bundle, bound, f_src, f_tgt)?;
                terms.push(g, "domain_disc", cfg.get("lambda_D")?, disc_term)?;
                let probs = two_class_probs(g, gen_logits)?;
                let gen_term = uniform_domain_ce(g, probs)?;
                terms.push(g, "domain_uniform", cfg.get("lambda_G")?, gen_term)?;
            }
            BaseAlgorithm::Cdan => {
                let (rf, rp) = self.cdan_proj.as_ref().expect("projections built in new()");
                let (rf, rp) = (rf.clone(), rp.clone());
                let c_src = cdan_combine(g, f_src, src.preds, &rf, &rp)?;
                let c_tgt = cdan_combine(g, f_tgt, tgt.preds, &rf, &rp)?;
                let (disc_term, gen_logits) =
                    self.adversarial_branches(g, bundle, bound, c_src, c_tgt)?;
                terms.push(g, "domain_disc", cfg.get("lambda_D")?, disc_term)?;
                // Generator branch: binary cross entropy with flipped
                // domain labels through the frozen discriminator.
                let ns = g.value(c_src).rows();
                let nt = g.value(c_tgt).rows();
                let flipped = {
                    let mut t = domain_targets(ns, nt);
                    for v in t.data_mut() {
                        *v = 1.0 - *v;
                    }
                    t
                };
                let gen_term = bce_with_logits(g, gen_logits, &flipped)?;
                terms.push(g, "domain_gen", cfg.get("lambda_G")?, gen_term)?;
            }
            BaseAlgorithm::Mmd => {
                let node = mmd(g, f_src, f_tgt, cfg.get_usize("gamma_exp")? as u32)?;
                terms.push(g, "mmd", cfg.get("lambda_F")?, node)?;
            }
            BaseAlgorithm::Jmmd => {
                let node = jmmd(
                    g,
                    &[f_src, src.preds],
                    &[f_tgt, tgt.preds],
                    cfg.get_usize("gamma_exp")? as u32,
                )?;
                terms.push(g, "jmmd", cfg.get("lambda_F")?, node)?;
            }
            BaseAlgorithm::Coral => {
                let node = coral(g, f_src, f_tgt)?;
                terms.push(g, "coral", cfg.get("lambda_F")?, node)?;
            }
            BaseAlgorithm::MinEnt => {
                let node = mean_entropy(g, tgt.preds)?;
                terms.push(g, "tgt_entropy", cfg.get("lambda_ent")?, node)?;
            }
            BaseAlgorithm::Im => {
                let node = neg_info_max(g, tgt.preds)?;
                terms.push(g, "info_max", cfg.get("lambda_imax")?, node)?;
            }
            BaseAlgorithm::Itl => {
                let node = neg_info_max(g, tgt.preds)?;
                terms.push(g, "info_max", cfg.get("lambda_imax")?, node)?;
                let (disc_term, gen_logits) =
                    self.adversarial_branches(g, bundle, bound, f_src, f_tgt)?;
                terms.push(g, "domain_disc", 1.0, disc_term)?;
                let probs = two_class_probs(g, gen_logits)?;
                // Information of domain predictions, minimized.
                let me = mean_entropy(g, probs)?;
                let em = losses::entropy_of_mean(g, probs)?;
                let info = g.sub(em, me)?;
                terms.push(g, "domain_info", cfg.get("lambda_imin")?, info)?;
            }
            BaseAlgorithm::Mcc => {
                let node = mcc(g, tgt.preds, cfg.get("T_mcc")?)?;
                terms.push(g, "mcc", cfg.get("lambda_mcc")?, node)?;
            }
            BaseAlgorithm::Bsp => {
                let s = top_singular_sq(g, f_src, BSP_TOP_K)?;
                let t = top_singular_sq(g, f_tgt, BSP_TOP_K)?;
                let node = g.add(s, t)?;
                terms.push(g, "bsp", cfg.get("lambda_bsp")?, node)?;
            }
            BaseAlgorithm::Bnm => {
                let node = bnm(g, tgt.preds)?;
                terms.push(g, "bnm", cfg.get("lambda_bnm")?, node)?;
            }
            BaseAlgorithm::Afn => {
                let node = afn(g, f_src, f_tgt, cfg.get("S_afn")?)?;
                terms.push(g, "afn", cfg.get("lambda_afn")?, node)?;
            }
            BaseAlgorithm::Atdoc => {
                let k = cfg.get_usize("k_atdoc")?;
                let bank = self.bank.as_ref().ok_or_else(|| {
                    Error::Config("memory bank not initialized for pseudo-labeling".into())
                })?;
                let soft =
                    bank.soft_pseudo_labels(g.value(tgt.features), tgt_bank_idx, k)?;
                let hard = soft.argmax_rows();
                let node = src_ce(g, tgt.preds, &hard)?;
                terms.push(g, "atdoc_pseudo", cfg.get("lambda_atdoc")?, node)?;
            }
            BaseAlgorithm::Rtn => {
                let ent = mean_entropy(g, tgt.preds)?;
                terms.push(g, "tgt_entropy", cfg.get("lambda_ent")?, ent)?;
                let node = mmd(g, f_src, f_tgt, RTN_GAMMA_EXP)?;
                terms.push(g, "mmd", cfg.get("lambda_F")?, node)?;
            }
        }
        if cfg.id.with_dann {
            let node = self.dann_domain_term(g, bound, f_src, f_tgt)?;
            terms.push(g, "dann_domain", cfg.get("lambda_D")?, node)?;
        }
        let _ = ctx;
        Ok(())
    }

    /// Gradient-reversed domain classification: source rows labeled 1,
    /// target rows 0.
    fn dann_domain_term(
        &self,
        g: &mut Graph,
        bound: &crate::models::BoundBundle,
        f_src: NodeId,
        f_tgt: NodeId,
    ) -> Result<NodeId> {
        let lambda_grl = self.config.get("lambda_grl")?;
        let disc = bound
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::Config("discriminator missing from bundle".into()))?;
        let rs = g.grad_reverse(f_src, lambda_grl)?;
        let rt = g.grad_reverse(f_tgt, lambda_grl)?;
        let all = g.concat_rows(rs, rt)?;
        let logits = discriminator_forward(g, disc, all)?;
        let targets = domain_targets(g.value(f_src).rows(), g.value(f_tgt).rows());
        bce_with_logits(g, logits, &targets)
    }

    /// GAN-style split used where the search space weights discriminator
    /// and generator separately: the discriminator trains on detached
    /// features, the generator branch runs live features through a frozen
    /// (re-bound, never updated) copy of the discriminator. Returns the
    /// discriminator BCE term and the frozen-branch logits.
    fn adversarial_branches(
        &self,
        g: &mut Graph,
        bundle: &ModelBundle,
        bound: &crate::models::BoundBundle,
        f_src: NodeId,
        f_tgt: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let disc = bound
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::Config("discriminator missing from bundle".into()))?;
        let all = g.concat_rows(f_src, f_tgt)?;
        let detached = g.detach(all)?;
        let disc_logits = discriminator_forward(g, disc, detached)?;
        let targets = domain_targets(g.value(f_src).rows(), g.value(f_tgt).rows());
        let disc_term = bce_with_logits(g, disc_logits, &targets)?;

        let frozen: BoundParams =
            bundle.discriminator.as_ref().expect("checked above").bind(g);
        let gen_logits = discriminator_forward(g, &frozen, all)?;
        Ok((disc_term, gen_logits))
    }

    /// Three-phase discrepancy protocol: (A) source CE updates everything,
    /// (B) the classifiers maximize target discrepancy with the trunk held,
    /// (C) the trunk minimizes the discrepancy N times.
    fn discrepancy_protocol_step(
        &mut self,
        bundle: &mut ModelBundle,
        src_x: &Tensor,
        src_y: &[usize],
        tgt_x: &Tensor,
        ctx: &mut StepContext,
    ) -> Result<LossReport> {
        let lambda_l = self.config.get("lambda_L")?;
        let lambda_disc = self.config.get("lambda_disc")?;
        let n_gen = self.config.get_usize("N_mcd")?;
        if n_gen < 1 {
            return Err(Error::Config(format!("N_mcd must be at least 1, got {n_gen}")));
        }
        if bundle.classifiers.len() != 2 {
            return Err(Error::Config(format!(
                "discrepancy protocol needs exactly 2 classifiers, found {}",
                bundle.classifiers.len()
            )));
        }
        let mut report = LossReport::default();

        // Phase A: classifiers + trunk minimize source CE.
        {
            let mut g = Graph::new();
            let bound = bundle.bind(&mut g);
            let xs = g.input(src_x.clone());
            let t0 = bundle.forward_with_taps(&mut g, &bound, xs, 0, Some(ctx.dropout))?;
            let t1 = bundle.forward_with_taps(&mut g, &bound, xs, 1, Some(ctx.dropout))?;
            let ce0 = src_ce(&mut g, t0.preds, src_y)?;
            let ce1 = src_ce(&mut g, t1.preds, src_y)?;
            let mut terms = Terms::new();
            terms.push(&g, "src_ce_c1", lambda_l, ce0)?;
            terms.push(&g, "src_ce_c2", lambda_l, ce1)?;
            let (total, rep) = terms.finish(&mut g)?;
            g.backward(total)?;
            bundle.trunk.adam_step_from_graph(&g, &bound.trunk, ctx.lr, ctx.weight_decay)?;
            for (c, b) in bundle.classifiers.iter_mut().zip(&bound.classifiers) {
                c.adam_step_from_graph(&g, b, ctx.lr, ctx.weight_decay)?;
            }
            report.terms.extend(rep.terms);
            report.total += rep.total;
        }

        // Phase B: classifiers maximize target discrepancy, trunk held.
        {
            let mut g = Graph::new();
            let bound = bundle.bind(&mut g);
            let xt = g.input(tgt_x.clone());
            let t0 = bundle.forward_with_taps(&mut g, &bound, xt, 0, Some(ctx.dropout))?;
            let t1 = bundle.forward_with_taps(&mut g, &bound, xt, 1, Some(ctx.dropout))?;
            let disc = self.discrepancy(&mut g, t0.preds, t1.preds, ctx)?;
            let mut terms = Terms::new();
            terms.push(&g, "discrepancy_max", -lambda_disc, disc)?;
            let (total, rep) = terms.finish(&mut g)?;
            g.backward(total)?;
            for (c, b) in bundle.classifiers.iter_mut().zip(&bound.classifiers) {
                c.adam_step_from_graph(&g, b, ctx.lr, ctx.weight_decay)?;
            }
            report.terms.extend(rep.terms);
            report.total += rep.total;
        }

        // Phase C: trunk minimizes the discrepancy, repeated N times.
        let mut last = 0.0;
        for _ in 0..n_gen {
            let mut g = Graph::new();
            let bound = bundle.bind(&mut g);
            let xt = g.input(tgt_x.clone());
            let t0 = bundle.forward_with_taps(&mut g, &bound, xt, 0, Some(ctx.dropout))?;
            let t1 = bundle.forward_with_taps(&mut g, &bound, xt, 1, Some(ctx.dropout))?;
            let disc = self.discrepancy(&mut g, t0.preds, t1.preds, ctx)?;
            let mut terms = Terms::new();
            terms.push(&g, "discrepancy_min", lambda_disc, disc)?;
            let (total, rep) = terms.finish(&mut g)?;
            g.backward(total)?;
            bundle.trunk.adam_step_from_graph(&g, &bound.trunk, ctx.lr, ctx.weight_decay)?;
            last = rep.terms[0].value;
        }
        self.last_generator_updates = n_gen as u32;
        report.terms.push(LossTerm {
            name: "discrepancy_min".into(),
            weight: lambda_disc,
            value: last,
        });
        report.total += lambda_disc * last;
        Ok(report)
    }

    fn discrepancy(
        &self,
        g: &mut Graph,
        p1: NodeId,
        p2: NodeId,
        ctx: &mut StepContext,
    ) -> Result<NodeId> {
        match self.config.id.base {
            BaseAlgorithm::Swd => swd_discrepancy(g, p1, p2, self.swd_projections, ctx.ops),
            _ => mcd_discrepancy(g, p1, p2),
        }
    }

    fn apply_updates(
        &self,
        bundle: &mut ModelBundle,
        g: &Graph,
        bound: &crate::models::BoundBundle,
        ctx: &StepContext,
    ) -> Result<()> {
        bundle.trunk.adam_step_from_graph(g, &bound.trunk, ctx.lr, ctx.weight_decay)?;
        for (c, b) in bundle.classifiers.iter_mut().zip(&bound.classifiers) {
            c.adam_step_from_graph(g, b, ctx.lr, ctx.weight_decay)?;
        }
        if let (Some(d), Some(b)) = (bundle.discriminator.as_mut(), bound.discriminator.as_ref()) {
            d.adam_step_from_graph(g, b, ctx.lr, ctx.weight_decay)?;
        }
        if let (Some(r), Some(b)) = (bundle.residual.as_mut(), bound.residual.as_ref()) {
            r.adam_step_from_graph(g, b, ctx.lr, ctx.weight_decay)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelWidths;

    fn hp(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    fn bundle_for(id: AlgorithmId, stream: &mut Stream) -> ModelBundle {
        let widths = ModelWidths {
            trunk: 8,
            classifier_hidden: (8, 6),
            discriminator_hidden: 8,
            dropout: 0.5,
            cdan_projection: 4,
        };
        let mut b = ModelBundle::new(2, 2, widths, FeatureLayer::Fl0, stream);
        if id.needs_discriminator() {
            let dim = if id.base == BaseAlgorithm::Cdan {
                b.widths.cdan_projection
            } else {
                b.feature_dim()
            };
            b.add_discriminator(dim, &mut stream.derive(1));
        }
        if id.needs_second_classifier() {
            b.add_second_classifier(&mut stream.derive(2));
        }
        if id.needs_residual() {
            b.add_residual(&mut stream.derive(3));
        }
        b
    }

    fn batch(stream: &mut Stream, n: usize) -> (Tensor, Vec<usize>) {
        let x = Tensor::from_vec(n, 2, (0..n * 2).map(|_| stream.normal()).collect()).unwrap();
        let y = (0..n).map(|i| i % 2).collect();
        (x, y)
    }

    #[test]
    fn algorithm_id_parsing_roundtrip() {
        for name in AlgorithmId::known_names() {
            let id: AlgorithmId = name.parse().unwrap();
            assert_eq!(id.to_string(), name);
        }
        assert!("MCD-DANN".parse::<AlgorithmId>().is_err());
        assert!("bogus".parse::<AlgorithmId>().is_err());
    }

    #[test]
    fn config_validation_checks_ranges() {
        let ok = AlgorithmConfig::new(
            AlgorithmId::new(BaseAlgorithm::Dann),
            hp(&[("lambda_L", 0.5), ("lambda_D", 1.0), ("lambda_grl", 2.0)]),
        );
        ok.validate().unwrap();

        let bad = AlgorithmConfig::new(
            AlgorithmId::new(BaseAlgorithm::Dann),
            hp(&[("lambda_L", 0.5), ("lambda_D", 1.5), ("lambda_grl", 2.0)]),
        );
        assert!(bad.validate().is_err());

        let missing = AlgorithmConfig::new(AlgorithmId::new(BaseAlgorithm::Dann), hp(&[]));
        assert!(missing.validate().is_err());

        let bad_grid = AlgorithmConfig::new(
            AlgorithmId::new(BaseAlgorithm::Atdoc),
            hp(&[("lambda_L", 0.5), ("lambda_atdoc", 0.5), ("k_atdoc", 7.0)]),
        );
        assert!(bad_grid.validate().is_err());
    }

    #[test]
    fn fl8_only_for_plain_dann() {
        let dann = AlgorithmConfig::new(
            AlgorithmId::new(BaseAlgorithm::Dann),
            hp(&[("lambda_L", 0.5), ("lambda_D", 0.5), ("lambda_grl", 1.0)]),
        );
        dann.validate_for(FeatureLayer::Fl8).unwrap();
        let mmd = AlgorithmConfig::new(
            AlgorithmId::new(BaseAlgorithm::Mmd),
            hp(&[("lambda_L", 0.5), ("lambda_F", 0.5), ("gamma_exp", 2.0)]),
        );
        assert!(mmd.validate_for(FeatureLayer::Fl8).is_err());
    }

    #[test]
    fn source_only_report_contains_exactly_src_ce() {
        let mut s = Stream::new(1);
        let id = AlgorithmId::new(BaseAlgorithm::SourceOnly);
        let mut bundle = bundle_for(id, &mut s);
        let cfg = AlgorithmConfig::new(id, hp(&[("lambda_L", 1.0)]));
        let mut stepper = Stepper::new(cfg, &bundle, &mut s).unwrap();
        let (sx, sy) = batch(&mut s, 6);
        let (tx, _) = batch(&mut s, 6);
        let mut drop = Stream::new(2);
        let mut ops = Stream::new(3);
        let mut ctx =
            StepContext { lr: 0.01, weight_decay: 1e-4, dropout: &mut drop, ops: &mut ops };
        let report = stepper
            .compose_step(&mut bundle, &sx, &sy, &tx, &[0, 1, 2, 3, 4, 5], &mut ctx)
            .unwrap();
        assert_eq!(report.terms.len(), 1);
        assert_eq!(report.terms[0].name, "src_ce");
    }

    #[test]
    fn combo_report_contains_base_and_dann_terms() {
        let mut s = Stream::new(4);
        let id = AlgorithmId::with_dann(BaseAlgorithm::Mcc).unwrap();
        let mut bundle = bundle_for(id, &mut s);
        let cfg = AlgorithmConfig::new(
            id,
            hp(&[
                ("lambda_L", 0.8),
                ("lambda_mcc", 0.6),
                ("T_mcc", 2.0),
                ("lambda_D", 0.5),
                ("lambda_grl", 1.5),
            ]),
        );
        let mut stepper = Stepper::new(cfg, &bundle, &mut s).unwrap();
        let (sx, sy) = batch(&mut s, 6);
        let (tx, _) = batch(&mut s, 6);
        let mut drop = Stream::new(5);
        let mut ops = Stream::new(6);
        let mut ctx =
            StepContext { lr: 0.01, weight_decay: 1e-4, dropout: &mut drop, ops: &mut ops };
        let report = stepper
            .compose_step(&mut bundle, &sx, &sy, &tx, &[0, 1, 2, 3, 4, 5], &mut ctx)
            .unwrap();
        let names: Vec<&str> = report.terms.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, vec!["src_ce", "mcc", "dann_domain"]);
        assert!((report.total - report.weighted_sum()).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let mut s = Stream::new(7);
        let id = AlgorithmId::new(BaseAlgorithm::Im);
        let mut bundle = bundle_for(id, &mut s);
        let before: Vec<Vec<f64>> =
            bundle.trunk.iter().map(|p| p.value.data().to_vec()).collect();
        let cfg = AlgorithmConfig::new(id, hp(&[("lambda_L", 0.0), ("lambda_imax", 0.0)]));
        let mut stepper = Stepper::new(cfg, &bundle, &mut s).unwrap();
        let (sx, sy) = batch(&mut s, 4);
        let (tx, _) = batch(&mut s, 4);
        let mut drop = Stream::new(8);
        let mut ops = Stream::new(9);
        let mut ctx = StepContext { lr: 0.05, weight_decay: 0.0, dropout: &mut drop, ops: &mut ops };
        stepper.compose_step(&mut bundle, &sx, &sy, &tx, &[0, 1, 2, 3], &mut ctx).unwrap();
        let after: Vec<Vec<f64>> =
            bundle.trunk.iter().map(|p| p.value.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn compose_step_is_deterministic() {
        let run = || {
            let mut s = Stream::new(10);
            let id = AlgorithmId::new(BaseAlgorithm::Dann);
            let mut bundle = bundle_for(id, &mut s);
            let cfg = AlgorithmConfig::new(
                id,
                hp(&[("lambda_L", 1.0), ("lambda_D", 0.7), ("lambda_grl", 1.2)]),
            );
            let mut stepper = Stepper::new(cfg, &bundle, &mut s).unwrap();
            let (sx, sy) = batch(&mut s, 8);
            let (tx, _) = batch(&mut s, 8);
            let mut drop = Stream::new(11);
            let mut ops = Stream::new(12);
            let mut ctx =
                StepContext { lr: 0.02, weight_decay: 1e-4, dropout: &mut drop, ops: &mut ops };
            let idx: Vec<usize> = (0..8).collect();
            let r = stepper.compose_step(&mut bundle, &sx, &sy, &tx, &idx, &mut ctx).unwrap();
            (r.total, bundle.trunk.iter().map(|p| p.value.data().to_vec()).collect::<Vec<_>>())
        };
        let (t1, w1) = run();
        let (t2, w2) = run();
        assert_eq!(t1.to_bits(), t2.to_bits());
        assert_eq!(w1, w2);
    }

    #[test]
    fn grl_trunk_gradient_is_negated_and_scaled() {
        // Gradient of the domain loss w.r.t. a feature input equals
        // -lambda_grl times the gradient without the reversal node.
        let mut s = Stream::new(13);
        let disc = crate::models::build_discriminator(4, 8, &mut s);
        let feats_src = Tensor::from_vec(3, 4, (0..12).map(|_| s.normal()).collect()).unwrap();
        let feats_tgt = Tensor::from_vec(3, 4, (0..12).map(|_| s.normal()).collect()).unwrap();
        let lambda_grl = 2.5;

        let grad_with = |reversed: bool| -> Vec<f64> {
            let mut g = Graph::new();
            let b = disc.bind(&mut g);
            let fs = g.input(feats_src.clone());
            let ft = g.input(feats_tgt.clone());
            let (is_, it) = if reversed {
                (g.grad_reverse(fs, lambda_grl).unwrap(), g.grad_reverse(ft, lambda_grl).unwrap())
            } else {
                (fs, ft)
            };
            let all = g.concat_rows(is_, it).unwrap();
            let logits = discriminator_forward(&mut g, &b, all).unwrap();
            let loss = bce_with_logits(&mut g, logits, &domain_targets(3, 3)).unwrap();
            g.backward(loss).unwrap();
            g.grad(fs).unwrap().data().to_vec()
        };

        let plain = grad_with(false);
        let reversed = grad_with(true);
        for (p, r) in plain.iter().zip(&reversed) {
            assert!((r + lambda_grl * p).abs() < 1e-12, "{r} vs {}", -lambda_grl * p);
        }
    }

    #[test]
    fn rtn_zero_residual_keeps_logits() {
        let mut s = Stream::new(14);
        let id = AlgorithmId::new(BaseAlgorithm::Rtn);
        let mut bundle = bundle_for(id, &mut s);
        // Zero the residual head: adjusted logits must equal plain logits.
        let names: Vec<String> =
            bundle.residual.as_ref().unwrap().iter().map(|p| p.name.clone()).collect();
        for n in names {
            let shape = bundle.residual.as_ref().unwrap().get(&n).unwrap().value.shape();
            bundle
                .residual
                .as_mut()
                .unwrap()
                .set_value(&n, Tensor::zeros(shape.0, shape.1))
                .unwrap();
        }
        let mut g = Graph::new();
        let bound = bundle.bind(&mut g);
        let x = g.input(Tensor::filled(3, 2, 0.5));
        let taps = bundle.forward_with_taps(&mut g, &bound, x, 0, None).unwrap();
        let res = residual_forward(&mut g, bound.residual.as_ref().unwrap(), taps.logits).unwrap();
        let adjusted = g.add(taps.logits, res).unwrap();
        assert_eq!(g.value(adjusted).data(), g.value(taps.logits).data());
    }

    #[test]
    fn discrepancy_protocol_counts_generator_updates() {
        let mut s = Stream::new(15);
        let id = AlgorithmId::new(BaseAlgorithm::Mcd);
        let mut bundle = bundle_for(id, &mut s);
        let n_mcd = 4.0;
        let cfg = AlgorithmConfig::new(
            id,
            hp(&[("lambda_L", 1.0), ("lambda_disc", 0.5), ("N_mcd", n_mcd)]),
        );
        let mut stepper = Stepper::new(cfg, &bundle, &mut s).unwrap();
        let (sx, sy) = batch(&mut s, 6);
        let (tx, _) = batch(&mut s, 6);
        let mut drop = Stream::new(16);
        let mut ops = Stream::new(17);
        let mut ctx =
            StepContext { lr: 0.01, weight_decay: 1e-4, dropout: &mut drop, ops: &mut ops };
        let report = stepper
            .compose_step(&mut bundle, &sx, &sy, &tx, &[0, 1, 2, 3, 4, 5], &mut ctx)
            .unwrap();
        assert_eq!(stepper.last_generator_updates(), n_mcd as u32);
        assert!(report.get("src_ce_c1").is_some());
        assert!(report.get("discrepancy_max").is_some());
        assert!(report.get("discrepancy_min").is_some());
    }
}
