//! Record analysis: normalization, rank correlation against accuracy
//! thresholds, oracle-vs-validator gap tables, and deterministic emission
//! of tables and plot data.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::records::{ScoreEntry, TrialRecord};
use crate::harness::AccuracyBlock;
use crate::validators;

/// Per-task accuracies of the source-only baseline, used for
/// normalization and thresholding.
pub type SourceOnlyRefs = BTreeMap<String, AccuracyBlock>;

/// One checkpoint of one trial, flattened for analysis.
#[derive(Debug, Clone)]
pub struct Datapoint {
    pub task: String,
    pub algorithm: String,
    pub trial_id: u64,
    pub step: u64,
    pub scores: BTreeMap<String, ScoreEntry>,
    pub src_val_acc: f64,
    pub tgt_train_acc: f64,
    pub tgt_val_acc: f64,
    pub tgt_train_acc_micro: f64,
    pub tgt_val_acc_micro: f64,
}

pub fn flatten(records: &[TrialRecord]) -> Vec<Datapoint> {
    let mut out = Vec::new();
    for r in records {
        for ck in &r.checkpoints {
            out.push(Datapoint {
                task: r.task.clone(),
                algorithm: r.algorithm.clone(),
                trial_id: r.trial_id,
                step: ck.step,
                scores: ck.scores.clone(),
                src_val_acc: ck.src_val_acc,
                tgt_train_acc: ck.tgt_train_acc,
                tgt_val_acc: ck.tgt_val_acc,
                tgt_train_acc_micro: ck.tgt_train_acc_micro,
                tgt_val_acc_micro: ck.tgt_val_acc_micro,
            });
        }
    }
    out
}

fn source_ref<'a>(refs: &'a SourceOnlyRefs, task: &str) -> Result<&'a AccuracyBlock> {
    refs.get(task).ok_or_else(|| {
        Error::Config(format!("missing source-only reference accuracies for task {task}"))
    })
}

/// A datapoint after the normalization conventions: validator scores
/// min-max normalized per (validator, task); target accuracy max-normalized
/// per task; source accuracy normalized by the source-only model's.
#[derive(Debug, Clone)]
pub struct NormalizedPoint {
    pub task: String,
    pub algorithm: String,
    pub trial_id: u64,
    pub step: u64,
    /// Only validators with a valid score at this point appear.
    pub scores: BTreeMap<String, f64>,
    pub norm_src_acc: f64,
    pub norm_tgt_acc: f64,
    pub tgt_train_acc: f64,
}

#[derive(Debug, Default, Clone)]
pub struct NormalizeStats {
    pub dropped_invalid: usize,
    /// (task, validator) pairs whose valid scores were constant; their
    /// normalized scores are all 0.
    pub degenerate: Vec<(String, String)>,
}

pub fn normalize(
    points: &[Datapoint],
    refs: &SourceOnlyRefs,
) -> Result<(Vec<NormalizedPoint>, NormalizeStats)> {
    let mut stats = NormalizeStats::default();
    // Per-task max target accuracy and per (task, validator) score extrema.
    let mut tgt_max: BTreeMap<&str, f64> = BTreeMap::new();
    let mut extrema: BTreeMap<(&str, &str), (f64, f64)> = BTreeMap::new();
    for p in points {
        let e = tgt_max.entry(&p.task).or_insert(f64::NEG_INFINITY);
        *e = e.max(p.tgt_train_acc);
        for (v, s) in &p.scores {
            if !s.valid {
                continue;
            }
            let e = extrema
                .entry((p.task.as_str(), v.as_str()))
                .or_insert((f64::INFINITY, f64::NEG_INFINITY));
            e.0 = e.0.min(s.value);
            e.1 = e.1.max(s.value);
        }
    }
    for (&(task, validator), &(lo, hi)) in &extrema {
        if lo == hi {
            stats.degenerate.push((task.to_string(), validator.to_string()));
        }
    }

    let mut out = Vec::with_capacity(points.len());
    for p in points {
        let so = source_ref(refs, &p.task)?;
        let mut scores = BTreeMap::new();
        for (v, s) in &p.scores {
            if !s.valid {
                stats.dropped_invalid += 1;
                continue;
            }
            let (lo, hi) = extrema[&(p.task.as_str(), v.as_str())];
            let norm = if hi > lo { (s.value - lo) / (hi - lo) } else { 0.0 };
            scores.insert(v.clone(), norm);
        }
        let tmax = tgt_max[p.task.as_str()];
        out.push(NormalizedPoint {
            task: p.task.clone(),
            algorithm: p.algorithm.clone(),
            trial_id: p.trial_id,
            step: p.step,
            scores,
            norm_src_acc: p.src_val_acc / so.src_val_acc,
            norm_tgt_acc: if tmax > 0.0 { p.tgt_train_acc / tmax } else { 0.0 },
            tgt_train_acc: p.tgt_train_acc,
        });
    }
    Ok((out, stats))
}

/// Average ranks (1-based), ties receiving the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of average ranks.
/// Errors when either argument has zero rank variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input(format!(
            "spearman needs two equal-length vectors of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Input("zero rank variance, correlation undefined".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdAxis {
    Source,
    Target,
}

/// Default threshold grid covering the normalized-accuracy range of
/// interest: 0.00 to 1.10 in steps of 0.02.
pub fn default_threshold_grid() -> Vec<f64> {
    (0..=55).map(|i| i as f64 * 0.02).collect()
}

#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub threshold: f64,
    /// Per-task correlation; missing when the filter emptied the task or
    /// left a degenerate vector.
    pub per_task: BTreeMap<String, Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n_tasks: usize,
    pub excluded_tasks: usize,
}

/// Correlation between one validator's scores and target accuracy as a
/// function of the accuracy threshold: at threshold x only points whose
/// normalized source (or target) accuracy exceeds x are kept; the Spearman
/// correlation is computed per task and aggregated as mean and sample std.
pub fn correlation_vs_threshold(
    points: &[NormalizedPoint],
    validator: &str,
    axis: ThresholdAxis,
    thresholds: &[f64],
) -> Vec<CurvePoint> {
    let tasks: BTreeSet<&str> = points.iter().map(|p| p.task.as_str()).collect();
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut per_task = BTreeMap::new();
        let mut vals = Vec::new();
        let mut excluded = 0;
        for &task in &tasks {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for p in points.iter().filter(|p| p.task == task) {
                let acc = match axis {
                    ThresholdAxis::Source => p.norm_src_acc,
                    ThresholdAxis::Target => p.norm_tgt_acc,
                };
                if acc <= t {
                    continue;
                }
                if let Some(&s) = p.scores.get(validator) {
                    xs.push(s);
                    ys.push(p.norm_tgt_acc);
                }
            }
            match spearman(&xs, &ys) {
                Ok(rho) => {
                    per_task.insert(task.to_string(), Some(rho));
                    vals.push(rho);
                }
                // Degenerate correlations are reported as missing rather
                // than 0 so they do not bias the band.
                Err(_) => {
                    per_task.insert(task.to_string(), None);
                    excluded += 1;
                }
            }
        }
        let n = vals.len();
        let mean = if n > 0 { Some(vals.iter().sum::<f64>() / n as f64) } else { None };
        let std = mean.map(|m| {
            if n >= 2 {
                (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
            } else {
                0.0
            }
        });
        out.push(CurvePoint { threshold: t, per_task, mean, std, n_tasks: n, excluded_tasks: excluded });
    }
    out
}

/// Keep datapoints whose source accuracy normalized by the source-only
/// model's exceeds `threshold`.
pub fn apply_threshold(
    points: Vec<Datapoint>,
    refs: &SourceOnlyRefs,
    threshold: f64,
) -> Result<Vec<Datapoint>> {
    for p in &points {
        source_ref(refs, &p.task)?;
    }
    Ok(validators::threshold_filter(
        points,
        |p| p.src_val_acc / refs[&p.task].src_val_acc,
        threshold,
    ))
}

/// Derive the source-accuracy threshold: per task take the point with the
/// best target accuracy and average their normalized source accuracies.
pub fn derive_threshold(points: &[Datapoint], refs: &SourceOnlyRefs) -> Result<f64> {
    let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for p in points {
        let so = source_ref(refs, &p.task)?;
        groups
            .entry(&p.task)
            .or_default()
            .push((p.src_val_acc / so.src_val_acc, p.tgt_train_acc));
    }
    let grouped: Vec<Vec<(f64, f64)>> = groups.into_values().collect();
    validators::derive_threshold(&grouped)
}

/// Best-target-accuracy table: one row per (validator, setting), one column
/// per task. Settings are the unthresholded pool, the thresholded pool, and
/// the oracle (true best). Empty cells stay `None` and render as a dash.
#[derive(Debug, Clone)]
pub struct GapTable {
    pub tasks: Vec<String>,
    pub rows: Vec<GapRow>,
}

#[derive(Debug, Clone)]
pub struct GapRow {
    pub validator: String,
    pub setting: String,
    pub cells: Vec<Option<f64>>,
}

fn best_by_validator(points: &[&Datapoint], validator: &str) -> Option<f64> {
    points
        .iter()
        .filter_map(|p| {
            p.scores.get(validator).filter(|s| s.valid).map(|s| (s.value, p.tgt_train_acc))
        })
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .map(|(_, acc)| acc)
}

pub fn gap_table(
    points: &[Datapoint],
    refs: &SourceOnlyRefs,
    validators_order: &[String],
    threshold: Option<f64>,
) -> Result<GapTable> {
    let tasks: Vec<String> =
        points.iter().map(|p| p.task.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rows = Vec::new();
    for v in validators_order {
        let mut settings: Vec<(String, Vec<Option<f64>>)> = Vec::new();
        let mut none_cells = Vec::new();
        let mut thr_cells = Vec::new();
        let mut oracle_cells = Vec::new();
        for task in &tasks {
            let pool: Vec<&Datapoint> = points.iter().filter(|p| &p.task == task).collect();
            none_cells.push(best_by_validator(&pool, v));
            if let Some(t) = threshold {
                let so = source_ref(refs, task)?;
                let filtered: Vec<&Datapoint> = pool
                    .iter()
                    .copied()
                    .filter(|p| p.src_val_acc / so.src_val_acc > t)
                    .collect();
                thr_cells.push(best_by_validator(&filtered, v));
            }
            oracle_cells.push(
                pool.iter()
                    .map(|p| p.tgt_train_acc)
                    .max_by(|a, b| a.partial_cmp(b).unwrap()),
            );
        }
        settings.push(("none".to_string(), none_cells));
        if let Some(t) = threshold {
            settings.push((format!("{t}"), thr_cells));
        }
        settings.push(("oracle".to_string(), oracle_cells));
        for (setting, cells) in settings {
            rows.push(GapRow { validator: v.clone(), setting, cells });
        }
    }
    Ok(GapTable { tasks, rows })
}

/// Oracle-minus-validator gaps for every non-oracle row of a gap table.
pub fn oracle_gaps(table: &GapTable) -> GapTable {
    let mut oracle_by_validator: BTreeMap<&str, &Vec<Option<f64>>> = BTreeMap::new();
    for row in &table.rows {
        if row.setting == "oracle" {
            oracle_by_validator.insert(&row.validator, &row.cells);
        }
    }
    let rows = table
        .rows
        .iter()
        .filter(|r| r.setting != "oracle")
        .map(|r| {
            let oracle = oracle_by_validator.get(r.validator.as_str());
            let cells = r
                .cells
                .iter()
                .enumerate()
                .map(|(i, c)| match (oracle.and_then(|o| o[i]), c) {
                    (Some(o), Some(v)) => Some(o - v),
                    _ => None,
                })
                .collect();
            GapRow { validator: r.validator.clone(), setting: r.setting.clone(), cells }
        })
        .collect();
    GapTable { tasks: table.tasks.clone(), rows }
}

/// Gap tables grouped by algorithm: oracle and validator picks are taken
/// within each algorithm's own pool.
pub fn gap_tables_per_algorithm(
    points: &[Datapoint],
    refs: &SourceOnlyRefs,
    validators_order: &[String],
    threshold: Option<f64>,
) -> Result<BTreeMap<String, GapTable>> {
    let algorithms: BTreeSet<String> = points.iter().map(|p| p.algorithm.clone()).collect();
    let mut out = BTreeMap::new();
    for algo in algorithms {
        let pool: Vec<Datapoint> =
            points.iter().filter(|p| p.algorithm == algo).cloned().collect();
        out.insert(algo, gap_table(&pool, refs, validators_order, threshold)?);
    }
    Ok(out)
}

/// Target accuracy on train/val splits under micro and macro averaging,
/// averaged first over the methods beating the source-only baseline within
/// each task, then over tasks.
#[derive(Debug, Clone)]
pub struct MacroMicroTable {
    pub train_micro: Option<f64>,
    pub train_macro: Option<f64>,
    pub val_micro: Option<f64>,
    pub val_macro: Option<f64>,
    pub tasks_included: usize,
}

pub fn macro_micro_table(points: &[Datapoint], refs: &SourceOnlyRefs) -> Result<MacroMicroTable> {
    // Oracle pick per (task, algorithm): the checkpoint with the best
    // target-train macro accuracy.
    let mut picks: BTreeMap<(&str, &str), &Datapoint> = BTreeMap::new();
    for p in points {
        let key = (p.task.as_str(), p.algorithm.as_str());
        let cur = picks.entry(key).or_insert(p);
        if p.tgt_train_acc > cur.tgt_train_acc {
            *cur = p;
        }
    }
    let mut per_task: BTreeMap<&str, Vec<[f64; 4]>> = BTreeMap::new();
    for ((task, _), p) in &picks {
        let so = source_ref(refs, task)?;
        if p.tgt_val_acc > so.tgt_val_acc {
            per_task.entry(task).or_default().push([
                p.tgt_train_acc_micro,
                p.tgt_train_acc,
                p.tgt_val_acc_micro,
                p.tgt_val_acc,
            ]);
        }
    }
    let mut task_means: Vec<[f64; 4]> = Vec::new();
    for rows in per_task.values() {
        let n = rows.len() as f64;
        let mut acc = [0.0; 4];
        for r in rows {
            for k in 0..4 {
                acc[k] += r[k] / n;
            }
        }
        task_means.push(acc);
    }
    if task_means.is_empty() {
        return Ok(MacroMicroTable {
            train_micro: None,
            train_macro: None,
            val_micro: None,
            val_macro: None,
            tasks_included: 0,
        });
    }
    let n = task_means.len() as f64;
    let mut avg = [0.0; 4];
    for r in &task_means {
        for k in 0..4 {
            avg[k] += r[k] / n;
        }
    }
    Ok(MacroMicroTable {
        train_micro: Some(avg[0]),
        train_macro: Some(avg[1]),
        val_micro: Some(avg[2]),
        val_macro: Some(avg[3]),
        tasks_included: task_means.len(),
    })
}

/// Shortest-roundtrip float formatting; deterministic for equal inputs.
pub fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn cell_str(c: &Option<f64>) -> String {
    match c {
        Some(v) => fmt_f(*v),
        None => "-".to_string(),
    }
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_markdown(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "| {} |", header.join(" | "))?;
    writeln!(f, "|{}|", vec!["---"; header.len()].join("|"))?;
    for row in rows {
        writeln!(f, "| {} |", row.join(" | "))?;
    }
    f.flush()?;
    Ok(())
}

/// (header, rows) rendering of a gap table.
pub fn gap_table_cells(table: &GapTable) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["validator".to_string(), "setting".to_string()];
    header.extend(table.tasks.iter().cloned());
    let rows = table
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.validator.clone(), r.setting.clone()];
            row.extend(r.cells.iter().map(cell_str));
            row
        })
        .collect();
    (header, rows)
}

/// (header, rows) plot-data rendering of a correlation curve: threshold,
/// one series per task, then mean and band edges.
pub fn curve_cells(curve: &[CurvePoint]) -> (Vec<String>, Vec<Vec<String>>) {
    let tasks: Vec<String> =
        curve.first().map(|c| c.per_task.keys().cloned().collect()).unwrap_or_default();
    let mut header = vec!["threshold".to_string()];
    header.extend(tasks.iter().cloned());
    header.extend(["mean", "band_low", "band_high"].map(String::from));
    let rows = curve
        .iter()
        .map(|c| {
            let mut row = vec![fmt_f(c.threshold)];
            for t in &tasks {
                let v: Option<f64> = c.per_task.get(t).copied().flatten();
                row.push(cell_str(&v));
            }
            match (c.mean, c.std) {
                (Some(m), Some(s)) => {
                    row.push(fmt_f(m));
                    row.push(fmt_f(m - s));
                    row.push(fmt_f(m + s));
                }
                _ => {
                    row.push("-".into());
                    row.push("-".into());
                    row.push("-".into());
                }
            }
            row
        })
        .collect();
    (header, rows)
}
