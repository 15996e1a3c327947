//! Synthetic domain-shift tasks, per-class splits, and matrix/label file IO.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Labeled samples from one domain.
#[derive(Clone)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub domain: String,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.y.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            domain: self.domain.clone(),
        }
    }
}

/// Unlabeled samples from one domain.
#[derive(Clone)]
pub struct UnlabeledSet {
    pub x: Tensor,
    pub domain: String,
}

/// Train/val index lists for one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// The four index lists a transfer task is evaluated on. UDA trains on
/// source-train + target-train; validators may read source-train/val and
/// target-train; target-val is reserved for final test reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitTable {
    pub source_train: Vec<usize>,
    pub source_val: Vec<usize>,
    pub target_train: Vec<usize>,
    pub target_val: Vec<usize>,
}

/// Per-class 80/20 split: each class contributes floor(ratio * n_c) samples
/// to train and the remainder to val, after a seeded shuffle.
pub fn split_per_class(set: &LabeledSet, ratio: f64, seed: u64) -> Result<SplitIndices> {
    let classes = set.num_classes();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in set.y.iter().enumerate() {
        per_class[y].push(i);
    }
    let mut stream = Stream::new(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (c, idx) in per_class.iter_mut().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Config(format!(
                "class {c} has {} samples, need at least 2 to split",
                idx.len()
            )));
        }
        stream.shuffle(idx);
        let n_train = (ratio * idx.len() as f64).floor() as usize;
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(SplitIndices { train, val })
}

fn rotate_about_centroid(x: &Tensor, degrees: f64) -> Tensor {
    let n = x.rows() as f64;
    let cx = (0..x.rows()).map(|r| x.get(r, 0)).sum::<f64>() / n;
    let cy = (0..x.rows()).map(|r| x.get(r, 1)).sum::<f64>() / n;
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut out = Tensor::zeros(x.rows(), 2);
    for r in 0..x.rows() {
        let dx = x.get(r, 0) - cx;
        let dy = x.get(r, 1) - cy;
        out.set(r, 0, cx + cos * dx - sin * dy);
        out.set(r, 1, cy + sin * dx + cos * dy);
    }
    out
}

/// Two interleaved half-moons (class per moon) with Gaussian noise; the
/// target domain is the same point cloud rotated about its centroid, so a
/// zero rotation makes the domains identical pointwise.
pub fn gen_two_moons_shift(
    n_per_class: usize,
    noise_sigma: f64,
    rotation_deg: f64,
    stream: &mut Stream,
) -> Result<(LabeledSet, LabeledSet)> {
    if n_per_class < 10 {
        return Err(Error::Input(format!("n_per_class {n_per_class} below minimum 10")));
    }
    if !(0.0..180.0).contains(&rotation_deg) {
        return Err(Error::Input(format!("rotation {rotation_deg} outside [0, 180)")));
    }
    let n = 2 * n_per_class;
    let mut x = Tensor::zeros(n, 2);
    let mut y = vec![0usize; n];
    for i in 0..n_per_class {
        let t = std::f64::consts::PI * i as f64 / (n_per_class - 1) as f64;
        x.set(i, 0, t.cos() + noise_sigma * stream.normal());
        x.set(i, 1, t.sin() + noise_sigma * stream.normal());
        let j = n_per_class + i;
        x.set(j, 0, 1.0 - t.cos() + noise_sigma * stream.normal());
        x.set(j, 1, 0.5 - t.sin() + noise_sigma * stream.normal());
        y[j] = 1;
    }
    let target_x = rotate_about_centroid(&x, rotation_deg);
    Ok((
        LabeledSet { x, y: y.clone(), domain: "source".into() },
        LabeledSet { x: target_x, y, domain: "target".into() },
    ))
}

/// Gaussian clusters on a circle; target clusters are translated by
/// `mean_shift` along per-class random directions and their spread scaled.
/// Shift 0 with scale 1 reproduces the source points exactly.
pub fn gen_blob_shift(
    classes: usize,
    n_per_class: usize,
    mean_shift: f64,
    scale: f64,
    stream: &mut Stream,
) -> Result<(LabeledSet, LabeledSet)> {
    if classes < 2 {
        return Err(Error::Input(format!("need at least 2 classes, got {classes}")));
    }
    if n_per_class < 2 {
        return Err(Error::Input("need at least 2 samples per class".into()));
    }
    let radius = 5.0;
    let n = classes * n_per_class;
    let mut src = Tensor::zeros(n, 2);
    let mut tgt = Tensor::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    let mut dir_stream = stream.derive(1);
    for c in 0..classes {
        let angle = std::f64::consts::TAU * c as f64 / classes as f64;
        let (mx, my) = (radius * angle.cos(), radius * angle.sin());
        let shift_angle = dir_stream.uniform(0.0, std::f64::consts::TAU);
        let (sx, sy) = (mean_shift * shift_angle.cos(), mean_shift * shift_angle.sin());
        for i in 0..n_per_class {
            let r = c * n_per_class + i;
            let (dx, dy) = (stream.normal(), stream.normal());
            src.set(r, 0, mx + dx);
            src.set(r, 1, my + dy);
            tgt.set(r, 0, mx + sx + dx * scale);
            tgt.set(r, 1, my + sy + dy * scale);
            y.push(c);
        }
    }
    Ok((
        LabeledSet { x: src, y: y.clone(), domain: "source".into() },
        LabeledSet { x: tgt, y, domain: "target".into() },
    ))
}

/// Synthetic task description: generator, parameters, and the seed that
/// drives both generation and splitting.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum TaskGenerator {
    TwoMoons { n_per_class: usize, noise_sigma: f64, rotation_deg: f64 },
    BlobShift { classes: usize, n_per_class: usize, mean_shift: f64, scale: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    #[serde(flatten)]
    pub generator: TaskGenerator,
    pub seed: u64,
}

/// Materialized task: both domains plus the four-way split.
pub struct TaskData {
    pub spec: TaskSpec,
    pub source: LabeledSet,
    pub target: LabeledSet,
    pub splits: SplitTable,
}

pub const SPLIT_RATIO: f64 = 0.8;

impl TaskSpec {
    pub fn class_count(&self) -> usize {
        match self.generator {
            TaskGenerator::TwoMoons { .. } => 2,
            TaskGenerator::BlobShift { classes, .. } => classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        2
    }

    /// Built-in tasks addressable by name from the command line.
    pub fn preset(name: &str) -> Option<TaskSpec> {
        let moons = |name: &str, rotation_deg: f64, seed: u64| TaskSpec {
            name: name.to_string(),
            generator: TaskGenerator::TwoMoons { n_per_class: 150, noise_sigma: 0.12, rotation_deg },
            seed,
        };
        match name {
            "moons0" => Some(moons("moons0", 0.0, 11)),
            "moons30" => Some(moons("moons30", 30.0, 12)),
            "moons45" => Some(moons("moons45", 45.0, 13)),
            "moons90" => Some(moons("moons90", 90.0, 14)),
            "blobs-near" => Some(TaskSpec {
                name: "blobs-near".into(),
                generator: TaskGenerator::BlobShift {
                    classes: 3,
                    n_per_class: 100,
                    mean_shift: 2.0,
                    scale: 1.2,
                },
                seed: 15,
            }),
            "blobs-far" => Some(TaskSpec {
                name: "blobs-far".into(),
                generator: TaskGenerator::BlobShift {
                    classes: 3,
                    n_per_class: 100,
                    mean_shift: 10.0,
                    scale: 1.0,
                },
                seed: 16,
            }),
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["moons0", "moons30", "moons45", "moons90", "blobs-near", "blobs-far"]
    }

    pub fn realize(&self) -> Result<TaskData> {
        let mut gen_stream = Stream::new(self.seed).derive(0x67656e);
        let (source, target) = match self.generator {
            TaskGenerator::TwoMoons { n_per_class, noise_sigma, rotation_deg } => {
                gen_two_moons_shift(n_per_class, noise_sigma, rotation_deg, &mut gen_stream)?
            }
            TaskGenerator::BlobShift { classes, n_per_class, mean_shift, scale } => {
                gen_blob_shift(classes, n_per_class, mean_shift, scale, &mut gen_stream)?
            }
        };
        let src_split = split_per_class(&source, SPLIT_RATIO, self.seed ^ 0x735f)?;
        let tgt_split = split_per_class(&target, SPLIT_RATIO, self.seed ^ 0x745f)?;
        Ok(TaskData {
            spec: self.clone(),
            source,
            target,
            splits: SplitTable {
                source_train: src_split.train,
                source_val: src_split.val,
                target_train: tgt_split.train,
                target_val: tgt_split.val,
            },
        })
    }
}

pub const MATRIX_MAGIC: &[u8; 4] = b"UDAM";
pub const LABEL_MAGIC: &[u8; 4] = b"UDAL";
pub const FILE_VERSION: u32 = 1;

/// Write a matrix: magic `UDAM`, version u32 LE, rows u64 LE, cols u64 LE,
/// row-major f64 LE payload.
pub fn save_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&FILE_VERSION.to_le_bytes())?;
    w.write_all(&(t.rows() as u64).to_le_bytes())?;
    w.write_all(&(t.cols() as u64).to_le_bytes())?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Write labels: magic `UDAL`, version u32 LE, length u64 LE, i64 LE payload.
pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(LABEL_MAGIC)?;
    w.write_all(&FILE_VERSION.to_le_bytes())?;
    w.write_all(&(labels.len() as u64).to_le_bytes())?;
    for &l in labels {
        w.write_all(&(l as i64).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format { offset: *offset, msg: format!("truncated {what}") })?;
    *offset += buf.len() as u64;
    Ok(())
}

/// Load a matrix. Files beginning with the `UDAM` magic are parsed as
/// binary; anything else is treated as CSV (optional header row, comma
/// separated decimals).
pub fn load_matrix(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    if bytes.len() >= 4 && &bytes[..4] == MATRIX_MAGIC {
        let mut r = &bytes[4..];
        let mut offset = 4u64;
        let mut v4 = [0u8; 4];
        read_exact(&mut r, &mut v4, &mut offset, "version")?;
        let version = u32::from_le_bytes(v4);
        if version != FILE_VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let mut v8 = [0u8; 8];
        read_exact(&mut r, &mut v8, &mut offset, "rows")?;
        let rows = u64::from_le_bytes(v8) as usize;
        read_exact(&mut r, &mut v8, &mut offset, "cols")?;
        let cols = u64::from_le_bytes(v8) as usize;
        let mut data = vec![0.0f64; rows * cols];
        for d in data.iter_mut() {
            read_exact(&mut r, &mut v8, &mut offset, "payload")?;
            *d = f64::from_le_bytes(v8);
        }
        return Tensor::from_vec(rows, cols, data);
    }
    load_matrix_csv(path).map_err(|e| Error::Format {
        offset: 0,
        msg: format!("expected UDAM magic or CSV content: {e}"),
    })
}

fn load_matrix_csv(path: &Path) -> Result<Tensor> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            trimmed.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(vals) => rows.push(vals),
            // A non-numeric first row is a header; anywhere else it is junk.
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::MalformedLine { line: i + 1, msg: e.to_string() });
            }
        }
    }
    Tensor::from_rows(&rows)
}

/// Load labels, accepting the `UDAL` binary format or CSV.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() >= 4 && &bytes[..4] == LABEL_MAGIC {
        let mut r = &bytes[4..];
        let mut offset = 4u64;
        let mut v4 = [0u8; 4];
        read_exact(&mut r, &mut v4, &mut offset, "version")?;
        let version = u32::from_le_bytes(v4);
        if version != FILE_VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let mut v8 = [0u8; 8];
        read_exact(&mut r, &mut v8, &mut offset, "length")?;
        let len = u64::from_le_bytes(v8) as usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            read_exact(&mut r, &mut v8, &mut offset, "label payload")?;
            let v = i64::from_le_bytes(v8);
            if v < 0 {
                return Err(Error::Format { offset: offset - 8, msg: format!("negative label {v}") });
            }
            out.push(v as usize);
        }
        return Ok(out);
    }
    load_labels_csv(path).map_err(|e| Error::Format {
        offset: 0,
        msg: format!("expected UDAL magic or CSV content: {e}"),
    })
}

fn load_labels_csv(path: &Path) -> Result<Vec<usize>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        for field in line.split(',') {
            let f = field.trim();
            if f.is_empty() {
                continue;
            }
            match f.parse::<i64>() {
                Ok(v) if v >= 0 => out.push(v as usize),
                Ok(v) => {
                    return Err(Error::MalformedLine { line: i + 1, msg: format!("negative label {v}") })
                }
                Err(_) if i == 0 => break, // header row
                Err(e) => return Err(Error::MalformedLine { line: i + 1, msg: e.to_string() }),
            }
        }
    }
    Ok(out)
}
