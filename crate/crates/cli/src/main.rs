//! Command-line driver: synthetic data generation, hyperparameter search,
//! reverse validation, record analysis, and rerun reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use udabench_core::algorithms::AlgorithmId;
use udabench_core::analysis;
use udabench_core::datasets::{save_labels, save_matrix, TaskSpec};
use udabench_core::error::Error;
use udabench_core::harness::records::load_records;
use udabench_core::harness::{
    random_search, rerun_best, reverse_validate, SearchConfig, TrialConfig, TrialTemplate,
};
use udabench_core::models::FeatureLayer;
use udabench_core::validators::ValidatorId;

const EXIT_USAGE: i32 = 2;
const EXIT_EMPTY: i32 = 3;
const EXIT_NUMERIC: i32 = 4;

#[derive(Parser)]
#[command(name = "udabench", version, about = "Benchmark UDA validators on synthetic domain shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a synthetic task to matrix/label files.
    GenData {
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the preset's generation/split seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Random hyperparameter search for one algorithm/task pair.
    Search {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        algorithm: Option<String>,
        #[arg(long, default_value_t = 100)]
        trials: u32,
        /// Master seed; falls back to UDA_BENCH_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        feature_layer: Option<String>,
        /// JSON trial config (mirrors the trial-config schema); flags
        /// override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Best DANN hyperparameters (JSON map) to freeze for X-DANN runs.
        #[arg(long)]
        frozen_dann: Option<PathBuf>,
        /// Record real wall-clock times (breaks byte-reproducibility).
        #[arg(long)]
        timing: bool,
    },
    /// Correlation curves, gap tables and the macro/micro table from a
    /// records file.
    Analyze {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// none | derive | a normalized threshold like 0.98
        #[arg(long, default_value = "none")]
        threshold: String,
        /// Source-only reference accuracies; defaults to source_only.json
        /// next to the records file.
        #[arg(long)]
        source_only: Option<PathBuf>,
    },
    /// Two-model reverse validation for the best recorded config.
    ReverseValidate {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        algorithm: String,
        /// Validator used to pick the forward configuration.
        #[arg(long, default_value = "oracle")]
        validator: String,
    },
    /// Rerun best configurations with fresh seeds and report mean/std.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "oracle")]
        validator: String,
        #[arg(long, default_value_t = 4)]
        repeats: u32,
        /// Restrict to one task / algorithm.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        algorithm: Option<String>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    };
    std::process::exit(code);
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Input(_) | Error::Format { .. } | Error::MalformedLine { .. } | Error::Json(_) => {
            EXIT_EMPTY
        }
        Error::Numeric { .. } | Error::DegenerateVariance | Error::Search(_) => EXIT_NUMERIC,
        Error::Io(_) | Error::Shape { .. } => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { task, out, seed } => cmd_gen_data(&task, &out, seed),
        Command::Search {
            task,
            algorithm,
            trials,
            seed,
            out,
            workers,
            feature_layer,
            config,
            frozen_dann,
            timing,
        } => cmd_search(SearchArgs {
            task,
            algorithm,
            trials,
            seed,
            out,
            workers,
            feature_layer,
            config,
            frozen_dann,
            timing,
        }),
        Command::Analyze { records, out, threshold, source_only } => {
            cmd_analyze(&records, &out, &threshold, source_only.as_deref())
        }
        Command::ReverseValidate { records, task, algorithm, validator } => {
            cmd_reverse_validate(&records, &task, &algorithm, &validator)
        }
        Command::Report { records, out, validator, repeats, task, algorithm } => {
            cmd_report(&records, &out, &validator, repeats, task.as_deref(), algorithm.as_deref())
        }
    }
}

fn resolve_task(name: &str) -> Result<TaskSpec, Error> {
    TaskSpec::preset(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown task {name}; known tasks: {}",
            TaskSpec::preset_names().join(", ")
        ))
    })
}

fn resolve_algorithm(name: &str) -> Result<AlgorithmId, Error> {
    name.parse().map_err(|_| {
        Error::Config(format!(
            "unknown algorithm {name}; known algorithms: {}",
            AlgorithmId::known_names().join(", ")
        ))
    })
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("UDA_BENCH_SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(0)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    std::fs::write(path, format!("{value:#}\n"))?;
    Ok(())
}

fn cmd_gen_data(task: &str, out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let mut spec = resolve_task(task)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    std::fs::create_dir_all(out)?;
    let data = spec.realize()?;
    save_matrix(&out.join("source_x.udam"), &data.source.x)?;
    save_labels(&out.join("source_y.udal"), &data.source.y)?;
    save_matrix(&out.join("target_x.udam"), &data.target.x)?;
    save_labels(&out.join("target_y.udal"), &data.target.y)?;
    write_json(&out.join("splits.json"), &serde_json::to_value(&data.splits)?)?;
    write_json(&out.join("task.json"), &serde_json::to_value(&spec)?)?;
    let outputs = [
        "source_x.udam",
        "source_y.udal",
        "target_x.udam",
        "target_y.udal",
        "splits.json",
        "task.json",
    ];
    write_json(
        &out.join("manifest.json"),
        &serde_json::json!({
            "command": "gen-data",
            "task": spec,
            "outputs": outputs,
        }),
    )?;
    eprintln!(
        "wrote {} source and {} target samples to {}",
        data.source.len(),
        data.target.len(),
        out.display()
    );
    Ok(())
}

struct SearchArgs {
    task: Option<String>,
    algorithm: Option<String>,
    trials: u32,
    seed: Option<u64>,
    out: PathBuf,
    workers: usize,
    feature_layer: Option<String>,
    config: Option<PathBuf>,
    frozen_dann: Option<PathBuf>,
    timing: bool,
}

fn cmd_search(args: SearchArgs) -> Result<(), Error> {
    let base: Option<TrialConfig> = match &args.config {
        Some(path) => Some(serde_json::from_str(&std::fs::read_to_string(path)?)?),
        None => None,
    };
    let task = match (&args.task, &base) {
        (Some(name), _) => resolve_task(name)?,
        (None, Some(cfg)) => cfg.task.clone(),
        (None, None) => return Err(Error::Config("--task or --config required".into())),
    };
    let algorithm = match (&args.algorithm, &base) {
        (Some(name), _) => resolve_algorithm(name)?,
        (None, Some(cfg)) => cfg.algorithm.id,
        (None, None) => return Err(Error::Config("--algorithm or --config required".into())),
    };
    let feature_layer = match (&args.feature_layer, &base) {
        (Some(name), _) => name.parse::<FeatureLayer>()?,
        (None, Some(cfg)) => cfg.feature_layer,
        (None, None) => FeatureLayer::Fl0,
    };
    let template = match &base {
        Some(cfg) => TrialTemplate {
            budget: cfg.budget.clone(),
            batch_size: cfg.batch_size,
            weight_decay: cfg.weight_decay,
            widths: cfg.widths.clone(),
            validators: cfg.validators.clone(),
            selection_validator: cfg.selection_validator,
            scoring: cfg.scoring.clone(),
            source_only_lr: cfg.source_only_lr,
        },
        None => TrialTemplate::default(),
    };
    let frozen_dann: Option<BTreeMap<String, f64>> = match &args.frozen_dann {
        Some(path) => Some(serde_json::from_str(&std::fs::read_to_string(path)?)?),
        None => None,
    };
    let master_seed = resolve_seed(args.seed);

    std::fs::create_dir_all(&args.out)?;
    let records_path = args.out.join("records.jsonl");
    if records_path.exists() {
        std::fs::remove_file(&records_path)?;
    }
    let cfg = SearchConfig {
        task: task.clone(),
        algorithm,
        feature_layer,
        n_trials: args.trials,
        master_seed,
        workers: args.workers.max(1),
        template,
        frozen_dann,
        records_path: Some(records_path.clone()),
        record_timing: args.timing,
    };
    eprintln!(
        "searching {algorithm} on {} ({} trials, seed {master_seed}, {} workers)",
        task.name, args.trials, cfg.workers
    );
    let outcome = random_search(&cfg)?;

    // Source-only reference accuracies, keyed by task, for analyze.
    let so_map: BTreeMap<String, _> =
        [(task.name.clone(), outcome.source_only.clone())].into_iter().collect();
    write_json(&args.out.join("source_only.json"), &serde_json::to_value(&so_map)?)?;

    // Best hyperparameters per validator; DANN winners feed --frozen-dann.
    let best_json: BTreeMap<String, serde_json::Value> = outcome
        .best
        .iter()
        .map(|(v, b)| {
            (
                v.as_str().to_string(),
                serde_json::json!({
                    "trial_id": b.trial_id,
                    "step": b.step,
                    "score": b.score,
                    "tgt_train_acc": b.tgt_train_acc,
                    "tgt_val_acc": b.tgt_val_acc,
                    "lr": b.config.lr_max,
                    "hparams": b.config.algorithm.hparams,
                }),
            )
        })
        .collect();
    write_json(&args.out.join("best.json"), &serde_json::to_value(&best_json)?)?;

    write_json(
        &args.out.join("manifest.json"),
        &serde_json::json!({
            "command": "search",
            "task": task,
            "algorithm": algorithm.to_string(),
            "feature_layer": feature_layer,
            "trials": args.trials,
            "master_seed": master_seed,
            "workers": cfg.workers,
            "timing": args.timing,
            "outputs": ["records.jsonl", "source_only.json", "best.json"],
        }),
    )?;

    println!("source-only target-val accuracy: {:.4}", outcome.source_only.tgt_val_acc);
    println!("best checkpoint per validator:");
    for v in ValidatorId::all() {
        match outcome.best.get(v) {
            Some(b) => println!(
                "  {:8} score {:+.4}  tgt_train {:.4}  tgt_val {:.4}  (trial {}, step {})",
                v.as_str(),
                b.score,
                b.tgt_train_acc,
                b.tgt_val_acc,
                b.trial_id,
                b.step
            ),
            None => {
                if cfg.template.validators.contains(v) {
                    println!("  {:8} -", v.as_str());
                }
            }
        }
    }
    Ok(())
}

fn load_records_checked(
    path: &Path,
) -> Result<(Vec<udabench_core::harness::records::TrialRecord>, Option<String>), Error> {
    if !path.exists() {
        return Err(Error::Input(format!("records file {} does not exist", path.display())));
    }
    load_records(path)
}

fn load_source_only(records: &Path, flag: Option<&Path>) -> Result<analysis::SourceOnlyRefs, Error> {
    let path = match flag {
        Some(p) => p.to_path_buf(),
        None => records.parent().unwrap_or_else(|| Path::new(".")).join("source_only.json"),
    };
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::Input(format!("cannot read source-only references {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_analyze(
    records_path: &Path,
    out: &Path,
    threshold: &str,
    source_only: Option<&Path>,
) -> Result<(), Error> {
    let (records, warning) = load_records_checked(records_path)?;
    if let Some(w) = warning {
        eprintln!("warning: {w}");
    }
    if records.is_empty() {
        return Err(Error::Input(format!("no records in {}", records_path.display())));
    }
    let refs = load_source_only(records_path, source_only)?;
    let points = analysis::flatten(&records);
    let (normalized, stats) = analysis::normalize(&points, &refs)?;

    let derived = analysis::derive_threshold(&points, &refs)?;
    let threshold_value: Option<f64> = match threshold {
        "none" => None,
        "derive" => Some(derived),
        other => Some(other.parse::<f64>().map_err(|_| {
            Error::Config(format!("--threshold must be none, derive, or a number, got {other}"))
        })?),
    };
    // A zero threshold keeps everything; treat it as no thresholding so
    // `--threshold none` and `--threshold 0` emit identical outputs.
    let threshold_value = threshold_value.filter(|t| *t != 0.0);

    std::fs::create_dir_all(out)?;
    let mut outputs: Vec<String> = Vec::new();

    let validators: Vec<String> = {
        let mut seen = std::collections::BTreeSet::new();
        for p in &points {
            for k in p.scores.keys() {
                seen.insert(k.clone());
            }
        }
        seen.into_iter().collect()
    };

    // Correlation-vs-threshold curves, one plot-data file per validator
    // and axis.
    let grid = analysis::default_threshold_grid();
    for axis in [analysis::ThresholdAxis::Source, analysis::ThresholdAxis::Target] {
        let tag = match axis {
            analysis::ThresholdAxis::Source => "source",
            analysis::ThresholdAxis::Target => "target",
        };
        for v in &validators {
            let curve = analysis::correlation_vs_threshold(&normalized, v, axis, &grid);
            let (header, rows) = analysis::curve_cells(&curve);
            let name = format!("correlation_{tag}_{v}.csv");
            analysis::write_csv(&out.join(&name), &header, &rows)?;
            outputs.push(name);
        }
    }

    // Global gap table plus oracle-minus-validator gaps.
    let table = analysis::gap_table(&points, &refs, &validators, threshold_value)?;
    let (header, rows) = analysis::gap_table_cells(&table);
    analysis::write_csv(&out.join("gap_table.csv"), &header, &rows)?;
    analysis::write_markdown(&out.join("gap_table.md"), &header, &rows)?;
    let gaps = analysis::oracle_gaps(&table);
    let (gh, gr) = analysis::gap_table_cells(&gaps);
    analysis::write_csv(&out.join("gaps.csv"), &gh, &gr)?;
    outputs.extend(["gap_table.csv".into(), "gap_table.md".into(), "gaps.csv".into()]);

    // Per-algorithm tables.
    let per_algo =
        analysis::gap_tables_per_algorithm(&points, &refs, &validators, threshold_value)?;
    for (algo, table) in &per_algo {
        let (h, r) = analysis::gap_table_cells(table);
        let name = format!("gap_table_{algo}.csv");
        analysis::write_csv(&out.join(&name), &h, &r)?;
        outputs.push(name);
    }

    // Macro/micro split table.
    let mm = analysis::macro_micro_table(&points, &refs)?;
    let cell = |v: Option<f64>| v.map_or("-".to_string(), analysis::fmt_f);
    analysis::write_csv(
        &out.join("macro_micro.csv"),
        &["split".into(), "micro".into(), "macro".into()],
        &[
            vec!["train".into(), cell(mm.train_micro), cell(mm.train_macro)],
            vec!["val".into(), cell(mm.val_micro), cell(mm.val_macro)],
        ],
    )?;
    outputs.push("macro_micro.csv".into());

    let summary = serde_json::json!({
        "derived_threshold": derived,
        "applied_threshold": threshold_value,
        "datapoints": points.len(),
        "dropped_invalid_scores": stats.dropped_invalid,
        "degenerate_score_groups": stats.degenerate,
        "macro_micro_tasks_included": mm.tasks_included,
    });
    write_json(&out.join("summary.json"), &summary)?;
    outputs.push("summary.json".into());

    outputs.sort();
    write_json(
        &out.join("manifest.json"),
        &serde_json::json!({
            "command": "analyze",
            "records": records_path.display().to_string(),
            "threshold": threshold,
            "outputs": outputs,
        }),
    )?;
    println!("derived threshold: {}", analysis::fmt_f(derived));
    println!("wrote {} artifacts to {}", outputs.len() + 1, out.display());
    Ok(())
}

fn cmd_reverse_validate(
    records_path: &Path,
    task: &str,
    algorithm: &str,
    validator: &str,
) -> Result<(), Error> {
    let algorithm = resolve_algorithm(algorithm)?;
    let validator: ValidatorId = validator.parse()?;
    let (records, _) = load_records_checked(records_path)?;
    let task_spec = resolve_task(task)?;

    // Resolve the forward-best config among matching records.
    let mut best: Option<(f64, TrialConfig)> = None;
    for rec in &records {
        if rec.task != task_spec.name || rec.algorithm != algorithm.to_string() {
            continue;
        }
        for ck in &rec.checkpoints {
            if let Some(s) = ck.scores.get(validator.as_str()) {
                if s.valid && best.as_ref().is_none_or(|(b, _)| s.value > *b) {
                    best = Some((s.value, rec.config.clone()));
                }
            }
        }
    }
    let (_, config) = best.ok_or_else(|| {
        Error::Input(format!(
            "no valid {validator} scores for {algorithm} on {task} in {}",
            records_path.display()
        ))
    })?;

    eprintln!("reverse validation: training run 1 (forward model)");
    let outcome = reverse_validate(&config)?;
    eprintln!("reverse validation: training run 2 (reverse model) done");

    let out_path = records_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("reverse_validation.jsonl");
    let line = serde_json::json!({
        "task": task_spec.name,
        "algorithm": algorithm.to_string(),
        "selection_validator": validator.as_str(),
        "score": outcome.score,
        "training_runs": outcome.training_runs,
        "config": config,
    });
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&out_path)?;
    writeln!(f, "{line}")?;
    println!(
        "reverse validation score: {:.4} ({} training runs)",
        outcome.score, outcome.training_runs
    );
    Ok(())
}

fn cmd_report(
    records_path: &Path,
    out: &Path,
    validator: &str,
    repeats: u32,
    task: Option<&str>,
    algorithm: Option<&str>,
) -> Result<(), Error> {
    let validator: ValidatorId = validator.parse()?;
    let (records, _) = load_records_checked(records_path)?;
    if records.is_empty() {
        return Err(Error::Input(format!("no records in {}", records_path.display())));
    }
    // Best config per (task, algorithm) group under the chosen validator.
    let mut groups: BTreeMap<(String, String), (f64, TrialConfig)> = BTreeMap::new();
    for rec in &records {
        if task.is_some_and(|t| t != rec.task) {
            continue;
        }
        if algorithm.is_some_and(|a| a != rec.algorithm) {
            continue;
        }
        for ck in &rec.checkpoints {
            if let Some(s) = ck.scores.get(validator.as_str()) {
                if !s.valid {
                    continue;
                }
                let key = (rec.task.clone(), rec.algorithm.clone());
                let entry =
                    groups.entry(key).or_insert((f64::NEG_INFINITY, rec.config.clone()));
                if s.value > entry.0 {
                    *entry = (s.value, rec.config.clone());
                }
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::Input("no matching records with valid scores".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for ((task, algo), (_, config)) in &groups {
        eprintln!("rerunning best {algo} on {task} ({repeats} repeats)");
        let report = rerun_best(config, repeats, validator)?;
        rows.push(vec![
            task.clone(),
            algo.clone(),
            analysis::fmt_f(report.mean),
            analysis::fmt_f(report.std),
            report.std_defined.to_string(),
            report.values.iter().map(|v| analysis::fmt_f(*v)).collect::<Vec<_>>().join(";"),
        ]);
    }
    let header: Vec<String> =
        ["task", "algorithm", "mean_tgt_val_acc", "std", "std_defined", "values"]
            .map(String::from)
            .to_vec();
    analysis::write_csv(&out.join("report.csv"), &header, &rows)?;
    analysis::write_markdown(&out.join("report.md"), &header, &rows)?;
    write_json(
        &out.join("manifest.json"),
        &serde_json::json!({
            "command": "report",
            "records": records_path.display().to_string(),
            "validator": validator.as_str(),
            "repeats": repeats,
            "outputs": ["report.csv", "report.md"],
        }),
    )?;
    for row in &rows {
        println!("{} / {}: mean {} std {}", row[0], row[1], row[2], row[3]);
    }
    Ok(())
}
