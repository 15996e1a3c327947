//! Named parameter sets with Adam state.
//!
//! Parameters live outside any graph. Each training step binds them into a
//! fresh [`Graph`] as input nodes, runs backward, and feeds the collected
//! gradients to [`ParamSet::adam_step`].

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Default weight decay, applied as an additive gradient term `w * 1e-4`.
pub const WEIGHT_DECAY: f64 = 1e-4;

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Ordered list of named trainable tensors plus per-parameter Adam moments.
#[derive(Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Node ids of one binding of a [`ParamSet`] into a graph, in set order.
pub struct BoundParams {
    pub ids: Vec<NodeId>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) {
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            value,
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            step: 0,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter {name}: shape {:?} does not match stored {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Clear Adam moments and step counts; used when a new training run
    /// starts from copied weights.
    pub fn reset_optimizer(&mut self) {
        for p in self.params.iter_mut() {
            let (r, c) = p.value.shape();
            p.m = Tensor::zeros(r, c);
            p.v = Tensor::zeros(r, c);
            p.step = 0;
        }
    }

    /// Bind every parameter into `g` as an input node.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams { ids: self.params.iter().map(|p| g.input(p.value.clone())).collect() }
    }

    /// One Adam update from the gradients accumulated at `bound` in `g`.
    /// Parameters the loss never touched keep a zero gradient (weight decay
    /// still applies to them).
    pub fn adam_step_from_graph(
        &mut self,
        g: &Graph,
        bound: &BoundParams,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let grads: Vec<Option<&Tensor>> = bound.ids.iter().map(|&id| g.grad(id)).collect();
        self.adam_step(&grads, lr, weight_decay)
    }

    /// Standard Adam with bias correction. `grads[i] = None` means zero
    /// gradient for parameter `i`.
    pub fn adam_step(
        &mut self,
        grads: &[Option<&Tensor>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Input(format!(
                "expected {} gradients, got {}",
                self.params.len(),
                grads.len()
            )));
        }
        if lr < 0.0 {
            return Err(Error::Input(format!("negative learning rate {lr}")));
        }
        for (p, grad) in self.params.iter_mut().zip(grads) {
            if let Some(gt) = grad {
                if gt.shape() != p.value.shape() {
                    return Err(Error::Input(format!(
                        "gradient shape {:?} does not match parameter {} {:?}",
                        gt.shape(),
                        p.name,
                        p.value.shape()
                    )));
                }
                if !gt.all_finite() {
                    return Err(Error::numeric(
                        format!("adam({})", p.name),
                        "non-finite gradient",
                    ));
                }
            }
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            for i in 0..p.value.len() {
                let w = p.value.data()[i];
                let g = grad.map_or(0.0, |gt| gt.data()[i]) + weight_decay * w;
                let m = ADAM_BETA1 * p.m.data()[i] + (1.0 - ADAM_BETA1) * g;
                let v = ADAM_BETA2 * p.v.data()[i] + (1.0 - ADAM_BETA2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                p.value.data_mut()[i] = w - update;
            }
        }
        Ok(())
    }
}
