//! Model stacks: trunk, classifier, discriminator, and the feature taps
//! adaptation losses read from.
//!
//! The classifier is always the full stack
//! `Linear(h1) -> ReLU -> Dropout -> Linear(h2) -> ReLU -> Dropout ->
//! Linear(C) -> row-softmax`. The feature-layer setting only changes which
//! activation is handed to adaptation losses and validators: FL0 taps the
//! trunk output, FL6 the activation after the second ReLU/Dropout, FL8 the
//! softmax output itself.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::optim::{BoundParams, ParamSet};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Which activation feeds adaptation losses and feature-based validators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureLayer {
    #[serde(rename = "FL0")]
    Fl0,
    #[serde(rename = "FL6")]
    Fl6,
    #[serde(rename = "FL8")]
    Fl8,
}

impl std::fmt::Display for FeatureLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureLayer::Fl0 => "FL0",
            FeatureLayer::Fl6 => "FL6",
            FeatureLayer::Fl8 => "FL8",
        })
    }
}

impl std::str::FromStr for FeatureLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FL0" => Ok(FeatureLayer::Fl0),
            "FL6" => Ok(FeatureLayer::Fl6),
            "FL8" => Ok(FeatureLayer::Fl8),
            other => Err(Error::Config(format!("unknown feature layer {other}"))),
        }
    }
}

/// Desk-scale layer widths. The stack shapes follow the reference design;
/// the sizes here are deliberately small and all overridable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelWidths {
    pub trunk: usize,
    pub classifier_hidden: (usize, usize),
    pub discriminator_hidden: usize,
    pub dropout: f64,
    /// Output width of the randomized feature/prediction projection used by
    /// conditional adversarial alignment.
    pub cdan_projection: usize,
}

impl Default for ModelWidths {
    fn default() -> Self {
        ModelWidths {
            trunk: 32,
            classifier_hidden: (32, 16),
            discriminator_hidden: 64,
            dropout: 0.5,
            cdan_projection: 16,
        }
    }
}

/// Plain MLP description: `widths[0]` inputs through `widths.last()` outputs.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    /// Dropout probability applied after hidden ReLUs (0 disables).
    pub dropout: f64,
}

/// Kaiming-uniform weight, zero bias.
fn init_linear(fan_in: usize, fan_out: usize, stream: &mut Stream) -> (Tensor, Tensor) {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut w = Tensor::zeros(fan_in, fan_out);
    for i in 0..w.len() {
        w.data_mut()[i] = stream.uniform(-bound, bound);
    }
    (w, Tensor::zeros(1, fan_out))
}

/// Build parameters `w0,b0,w1,b1,...` for consecutive linear layers.
pub fn build_mlp(spec: &MlpSpec, stream: &mut Stream) -> ParamSet {
    let mut ps = ParamSet::new();
    for (i, pair) in spec.widths.windows(2).enumerate() {
        let (w, b) = init_linear(pair[0], pair[1], stream);
        ps.add(format!("w{i}"), w);
        ps.add(format!("b{i}"), b);
    }
    ps
}

/// Two-layer trunk: input -> width -> width, ReLU after each linear.
pub fn build_trunk(input_dim: usize, trunk_width: usize, stream: &mut Stream) -> ParamSet {
    build_mlp(&MlpSpec { widths: vec![input_dim, trunk_width, trunk_width], dropout: 0.0 }, stream)
}

/// Classifier stack ending in row-softmax.
pub fn build_classifier(
    feature_dim: usize,
    num_classes: usize,
    hidden: (usize, usize),
    stream: &mut Stream,
) -> ParamSet {
    build_mlp(
        &MlpSpec { widths: vec![feature_dim, hidden.0, hidden.1, num_classes], dropout: 0.0 },
        stream,
    )
}

/// Three linear layers down to a single logit; depth is fixed regardless of
/// which feature layer feeds it.
pub fn build_discriminator(feature_dim: usize, hidden: usize, stream: &mut Stream) -> ParamSet {
    build_mlp(&MlpSpec { widths: vec![feature_dim, hidden, hidden, 1], dropout: 0.0 }, stream)
}

/// Residual head on logits: C -> C -> C with one ReLU.
pub fn build_residual(num_classes: usize, stream: &mut Stream) -> ParamSet {
    build_mlp(&MlpSpec { widths: vec![num_classes, num_classes, num_classes], dropout: 0.0 }, stream)
}

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Trunk forward: ReLU(ReLU(x W0 + b0) W1 + b1).
pub fn trunk_forward(g: &mut Graph, bound: &BoundParams, x: NodeId) -> Result<NodeId> {
    let h = linear(g, x, bound.ids[0], bound.ids[1])?;
    let h = g.relu(h)?;
    let h = linear(g, h, bound.ids[2], bound.ids[3])?;
    g.relu(h)
}

/// Activations tapped from a classifier forward pass.
pub struct ClassifierTaps {
    /// Post second ReLU/Dropout activation (width h2).
    pub fl6: NodeId,
    /// Pre-softmax scores (width C).
    pub logits: NodeId,
    /// Row-softmax output (width C).
    pub preds: NodeId,
}

/// Classifier forward; `dropout = None` runs in evaluation mode.
pub fn classifier_forward(
    g: &mut Graph,
    bound: &BoundParams,
    x: NodeId,
    dropout_p: f64,
    mut dropout: Option<&mut Stream>,
) -> Result<ClassifierTaps> {
    let mut h = linear(g, x, bound.ids[0], bound.ids[1])?;
    h = g.relu(h)?;
    if let Some(s) = dropout.as_deref_mut() {
        h = g.dropout(h, dropout_p, s)?;
    }
    h = linear(g, h, bound.ids[2], bound.ids[3])?;
    h = g.relu(h)?;
    if let Some(s) = dropout {
        h = g.dropout(h, dropout_p, s)?;
    }
    let fl6 = h;
    let logits = linear(g, fl6, bound.ids[4], bound.ids[5])?;
    let preds = g.row_softmax(logits)?;
    Ok(ClassifierTaps { fl6, logits, preds })
}

pub fn discriminator_forward(g: &mut Graph, bound: &BoundParams, x: NodeId) -> Result<NodeId> {
    let mut h = linear(g, x, bound.ids[0], bound.ids[1])?;
    h = g.relu(h)?;
    h = linear(g, h, bound.ids[2], bound.ids[3])?;
    h = g.relu(h)?;
    linear(g, h, bound.ids[4], bound.ids[5])
}

pub fn residual_forward(g: &mut Graph, bound: &BoundParams, logits: NodeId) -> Result<NodeId> {
    let mut h = linear(g, logits, bound.ids[0], bound.ids[1])?;
    h = g.relu(h)?;
    linear(g, h, bound.ids[2], bound.ids[3])
}

/// Trunk plus classifier(s), with optional adversarial heads.
#[derive(Clone)]
pub struct ModelBundle {
    pub feature_layer: FeatureLayer,
    pub widths: ModelWidths,
    pub input_dim: usize,
    pub num_classes: usize,
    pub trunk: ParamSet,
    pub classifiers: Vec<ParamSet>,
    pub discriminator: Option<ParamSet>,
    pub residual: Option<ParamSet>,
}

/// One binding of every parameter set of a bundle into a graph.
pub struct BoundBundle {
    pub trunk: BoundParams,
    pub classifiers: Vec<BoundParams>,
    pub discriminator: Option<BoundParams>,
    pub residual: Option<BoundParams>,
}

/// All taps from one forward pass through trunk and one classifier.
pub struct ForwardTaps {
    pub trunk_out: NodeId,
    pub fl6: NodeId,
    pub logits: NodeId,
    pub preds: NodeId,
    /// The activation selected by the bundle's feature layer.
    pub features: NodeId,
}

impl ModelBundle {
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        widths: ModelWidths,
        feature_layer: FeatureLayer,
        stream: &mut Stream,
    ) -> Self {
        let trunk = build_trunk(input_dim, widths.trunk, &mut stream.derive(0));
        let classifier =
            build_classifier(widths.trunk, num_classes, widths.classifier_hidden, &mut stream.derive(1));
        ModelBundle {
            feature_layer,
            widths,
            input_dim,
            num_classes,
            trunk,
            classifiers: vec![classifier],
            discriminator: None,
            residual: None,
        }
    }

    /// Width of the configured feature tap.
    pub fn feature_dim(&self) -> usize {
        match self.feature_layer {
            FeatureLayer::Fl0 => self.widths.trunk,
            FeatureLayer::Fl6 => self.widths.classifier_hidden.1,
            FeatureLayer::Fl8 => self.num_classes,
        }
    }

    pub fn add_second_classifier(&mut self, stream: &mut Stream) {
        let c = build_classifier(
            self.widths.trunk,
            self.num_classes,
            self.widths.classifier_hidden,
            stream,
        );
        self.classifiers.push(c);
    }

    /// Discriminator taking `input_dim` features (usually
    /// [`ModelBundle::feature_dim`], or the projection width for conditional
    /// alignment).
    pub fn add_discriminator(&mut self, input_dim: usize, stream: &mut Stream) {
        self.discriminator =
            Some(build_discriminator(input_dim, self.widths.discriminator_hidden, stream));
    }

    pub fn add_residual(&mut self, stream: &mut Stream) {
        self.residual = Some(build_residual(self.num_classes, stream));
    }

    pub fn bind(&self, g: &mut Graph) -> BoundBundle {
        BoundBundle {
            trunk: self.trunk.bind(g),
            classifiers: self.classifiers.iter().map(|c| c.bind(g)).collect(),
            discriminator: self.discriminator.as_ref().map(|d| d.bind(g)),
            residual: self.residual.as_ref().map(|r| r.bind(g)),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.trunk.scalar_count()
            + self.classifiers.iter().map(|c| c.scalar_count()).sum::<usize>()
            + self.discriminator.as_ref().map_or(0, |d| d.scalar_count())
            + self.residual.as_ref().map_or(0, |r| r.scalar_count())
    }

    /// Fresh optimizer state across all parameter sets.
    pub fn reset_optimizer(&mut self) {
        self.trunk.reset_optimizer();
        for c in self.classifiers.iter_mut() {
            c.reset_optimizer();
        }
        if let Some(d) = self.discriminator.as_mut() {
            d.reset_optimizer();
        }
        if let Some(r) = self.residual.as_mut() {
            r.reset_optimizer();
        }
    }

    /// Forward through trunk and `classifiers[classifier_idx]`, returning
    /// every tap. `dropout = None` is evaluation mode.
    pub fn forward_with_taps(
        &self,
        g: &mut Graph,
        bound: &BoundBundle,
        x: NodeId,
        classifier_idx: usize,
        dropout: Option<&mut Stream>,
    ) -> Result<ForwardTaps> {
        let trunk_out = trunk_forward(g, &bound.trunk, x)?;
        let taps = classifier_forward(
            g,
            &bound.classifiers[classifier_idx],
            trunk_out,
            self.widths.dropout,
            dropout,
        )?;
        let features = match self.feature_layer {
            FeatureLayer::Fl0 => trunk_out,
            FeatureLayer::Fl6 => taps.fl6,
            FeatureLayer::Fl8 => taps.preds,
        };
        Ok(ForwardTaps { trunk_out, fl6: taps.fl6, logits: taps.logits, preds: taps.preds, features })
    }

    /// Evaluation-mode forward on a plain tensor: (features, predictions).
    pub fn eval_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xid = g.input(x.clone());
        let taps = self.forward_with_taps(&mut g, &bound, xid, 0, None)?;
        Ok((g.value(taps.features).clone(), g.value(taps.preds).clone()))
    }

    /// Named parameters with bundle-level prefixes, in serialization order.
    fn named_params(&self) -> Vec<(String, &ParamSet)> {
        let mut out = vec![("trunk".to_string(), &self.trunk)];
        for (i, c) in self.classifiers.iter().enumerate() {
            out.push((format!("classifier{i}"), c));
        }
        if let Some(d) = &self.discriminator {
            out.push(("discriminator".to_string(), d));
        }
        if let Some(r) = &self.residual {
            out.push(("residual".to_string(), r));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        for (prefix, ps) in self.named_params() {
            for p in ps.iter() {
                entries.push((format!("{prefix}.{}", p.name), p.value.clone()));
            }
        }
        write_checkpoint(path, &entries)
    }

    /// Load previously saved weights into matching parameters. Adam state is
    /// not part of the format and resets on load.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = read_checkpoint(path)?;
        for (name, value) in entries {
            let (prefix, pname) = name
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("parameter name {name} has no prefix")))?;
            let ps: &mut ParamSet = match prefix {
                "trunk" => &mut self.trunk,
                "discriminator" => self
                    .discriminator
                    .as_mut()
                    .ok_or_else(|| Error::Config("bundle has no discriminator".into()))?,
                "residual" => self
                    .residual
                    .as_mut()
                    .ok_or_else(|| Error::Config("bundle has no residual head".into()))?,
                other => {
                    let idx: usize = other
                        .strip_prefix("classifier")
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Config(format!("unknown prefix {other}")))?;
                    self.classifiers
                        .get_mut(idx)
                        .ok_or_else(|| Error::Config(format!("no classifier {idx}")))?
                }
            };
            ps.set_value(pname, value)?;
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UDAW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write named tensors: magic `UDAW`, version u32 LE, then per parameter:
/// name length u16 LE, UTF-8 name, rows u64 LE, cols u64 LE, row-major f64 LE.
pub fn write_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: self.offset,
            msg: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    /// Ok(false) on clean EOF before any byte of the record.
    fn try_fill(&mut self, buf: &mut [u8]) -> Result<bool> {
        let mut read = 0;
        while read < buf.len() {
            let n = self.inner.read(&mut buf[read..]).map_err(Error::Io)?;
            if n == 0 {
                if read == 0 {
                    return Ok(false);
                }
                return Err(Error::Format {
                    offset: self.offset + read as u64,
                    msg: "truncated record header".into(),
                });
            }
            read += n;
        }
        self.offset += buf.len() as u64;
        Ok(true)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = CountingReader { inner: BufReader::new(File::open(path)?), offset: 0 };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected UDAW".into() });
    }
    let mut v = [0u8; 4];
    r.read_exact_at(&mut v, "version")?;
    let version = u32::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 2];
        if !r.try_fill(&mut len_buf)? {
            break;
        }
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact_at(&mut name_buf, "parameter name")?;
        let name = String::from_utf8(name_buf).map_err(|_| Error::Format {
            offset: r.offset,
            msg: "parameter name is not UTF-8".into(),
        })?;
        let mut dim = [0u8; 8];
        r.read_exact_at(&mut dim, "rows")?;
        let rows = u64::from_le_bytes(dim) as usize;
        r.read_exact_at(&mut dim, "cols")?;
        let cols = u64::from_le_bytes(dim) as usize;
        let mut data = vec![0.0f64; rows * cols];
        for d in data.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact_at(&mut b, "payload")?;
            *d = f64::from_le_bytes(b);
        }
        out.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    Ok(out)
}
