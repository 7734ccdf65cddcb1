//! Parameters, basic layers and the Adam optimizer.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by gradient descent.
    Weight,
    /// Running statistics; saved with the model, never trained.
    Buffer,
}

struct ParamSlot {
    name: String,
    kind: ParamKind,
    value: Tensor,
    trainable: bool,
}

/// A named, shared handle to a model tensor. Updating a parameter replaces
/// its value with a fresh leaf; layers holding a clone see the new value.
#[derive(Clone)]
pub struct Param(Rc<RefCell<ParamSlot>>);

impl Param {
    fn new(name: String, kind: ParamKind, value: Tensor) -> Self {
        let trainable = kind == ParamKind::Weight;
        let value = if trainable {
            value.requires_grad_()
        } else {
            value.detach()
        };
        Param(Rc::new(RefCell::new(ParamSlot {
            name,
            kind,
            value,
            trainable,
        })))
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn kind(&self) -> ParamKind {
        self.0.borrow().kind
    }

    pub fn value(&self) -> Tensor {
        self.0.borrow().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().value.shape().to_vec()
    }

    pub fn trainable(&self) -> bool {
        self.0.borrow().trainable
    }

    /// Buffers ignore this; they are never trainable.
    pub fn set_trainable(&self, trainable: bool) {
        let mut slot = self.0.borrow_mut();
        if slot.kind == ParamKind::Buffer || slot.trainable == trainable {
            return;
        }
        slot.trainable = trainable;
        slot.value = if trainable {
            slot.value.requires_grad_()
        } else {
            slot.value.detach()
        };
    }

    pub fn set_data(&self, data: Vec<f32>) {
        let mut slot = self.0.borrow_mut();
        let shape = slot.value.shape().to_vec();
        let t = Tensor::from_vec(data, &shape);
        slot.value = if slot.trainable { t.requires_grad_() } else { t };
    }
}

/// Ordered registry of every parameter and buffer of a model.
#[derive(Default, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, kind: ParamKind, value: Tensor) -> Param {
        assert!(self.get(&name).is_none(), "duplicate parameter name {name}");
        let p = Param::new(name, kind, value);
        self.params.push(p.clone());
        p
    }

    pub fn weight(&mut self, name: impl Into<String>, value: Tensor) -> Param {
        self.insert(name.into(), ParamKind::Weight, value)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor) -> Param {
        self.insert(name.into(), ParamKind::Buffer, value)
    }

    pub fn all(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.0.borrow().name == name)
    }

    pub fn trainable(&self) -> Vec<Param> {
        self.params.iter().filter(|p| p.trainable()).cloned().collect()
    }

    /// Number of learned scalars (buffers excluded).
    pub fn num_weights(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind() == ParamKind::Weight)
            .map(|p| p.value().numel())
            .sum()
    }

    pub fn snapshot(&self) -> BTreeMap<String, Vec<f32>> {
        self.params.iter().map(|p| (p.name(), p.value().to_vec())).collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name(), p.value())).collect()
    }

    /// Loads named tensors into matching parameters. Every entry must name
    /// an existing parameter of the same shape; `skip` filters entries that
    /// are ignored entirely, and `require_all` demands that every
    /// non-skipped parameter is covered.
    pub fn load(
        &self,
        tensors: &[(String, Vec<usize>, Vec<f32>)],
        skip: impl Fn(&str) -> bool,
        require_all: bool,
    ) -> Result<()> {
        let mut unknown = Vec::new();
        let mut mismatched = Vec::new();
        let mut seen = HashMap::new();
        for (name, shape, _) in tensors {
            if skip(name) {
                continue;
            }
            match self.get(name) {
                None => unknown.push(name.clone()),
                Some(p) if p.shape() != *shape => {
                    mismatched.push(format!("{name} (expected {:?}, found {:?})", p.shape(), shape))
                }
                Some(_) => {
                    seen.insert(name.as_str(), ());
                }
            }
        }
        let missing: Vec<String> = if require_all {
            self.params
                .iter()
                .map(Param::name)
                .filter(|n| !skip(n) && !seen.contains_key(n.as_str()))
                .collect()
        } else {
            Vec::new()
        };
        if !unknown.is_empty() || !mismatched.is_empty() || !missing.is_empty() {
            let mut parts = Vec::new();
            if !unknown.is_empty() {
                parts.push(format!("unexpected tensors: {}", unknown.join(", ")));
            }
            if !mismatched.is_empty() {
                parts.push(format!("shape mismatch: {}", mismatched.join(", ")));
            }
            if !missing.is_empty() {
                parts.push(format!("missing tensors: {}", missing.join(", ")));
            }
            return Err(Error::Integrity(parts.join("; ")));
        }
        for (name, _, data) in tensors {
            if let Some(p) = self.get(name).filter(|_| !skip(name)) {
                p.set_data(data.clone());
            }
        }
        Ok(())
    }
}

pub fn normal_init<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_vec(data, shape)
}

pub fn uniform_init<R: Rng + ?Sized>(shape: &[usize], bound: f32, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(data, shape)
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        Linear {
            weight: store.weight(format!("{name}.weight"), uniform_init(&[d_in, d_out], bound, rng)),
            bias: store.weight(format!("{name}.bias"), uniform_init(&[d_out], bound, rng)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.weight.value()).add(&self.bias.value())
    }
}

/// Bias-free convolution with He-normal initialisation.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (c_in * kernel * kernel) as f32).sqrt();
        Conv2d {
            weight: store.weight(
                format!("{name}.weight"),
                normal_init(&[c_out, c_in, kernel, kernel], std, rng),
            ),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight.value(), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only; nothing is updated.
    Frozen,
}

#[derive(Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    momentum: f32,
    eps: f32,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.weight(format!("{name}.weight"), Tensor::ones(&[channels])),
            beta: store.weight(format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Tensor {
        let c = x.dim(1);
        let cshape = [1, c, 1, 1];
        let gamma = self.gamma.value().reshape(&cshape);
        let beta = self.beta.value().reshape(&cshape);
        match mode {
            NormMode::Train => {
                let mean = x.mean_to(&cshape);
                let centered = x.sub(&mean);
                let var = centered.square().mean_to(&cshape);
                let count = (x.numel() / c) as f32;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let m = self.momentum;
                let rm: Vec<f32> = self
                    .running_mean
                    .value()
                    .data()
                    .iter()
                    .zip(mean.data())
                    .map(|(r, b)| (1.0 - m) * r + m * b)
                    .collect();
                let rv: Vec<f32> = self
                    .running_var
                    .value()
                    .data()
                    .iter()
                    .zip(var.data())
                    .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
                    .collect();
                self.running_mean.set_data(rm);
                self.running_var.set_data(rv);
                centered
                    .mul(&var.add_scalar(self.eps).powf(-0.5))
                    .mul(&gamma)
                    .add(&beta)
            }
            NormMode::Frozen => {
                let inv: Vec<f32> = self
                    .running_var
                    .value()
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + self.eps).sqrt())
                    .collect();
                let scale = gamma.mul(&Tensor::from_vec(inv, &cshape));
                let shift = beta.sub(&self.running_mean.value().reshape(&cshape).mul(&scale));
                x.mul(&scale).add(&shift)
            }
        }
    }
}

/// Adam with per-parameter state created lazily on the first update of
/// each parameter, so each parameter's bias correction starts from its own
/// first step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, AdamSlot>,
}

#[derive(Clone, Debug)]
struct AdamSlot {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    pub fn step(&mut self, params: &[Param], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        let (b1, b2) = (self.beta1, self.beta2);
        for (p, g) in params.iter().zip(grads) {
            let name = p.name();
            let slot = self.state.entry(name).or_insert_with(|| AdamSlot {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
                t: 0,
            });
            slot.t += 1;
            let c1 = 1.0 - b1.powi(slot.t);
            let c2 = 1.0 - b2.powi(slot.t);
            let step = (lr * c2.sqrt() / c1) as f32;
            let eps = (self.eps * c2.sqrt()) as f32;
            let (b1f, b2f) = (b1 as f32, b2 as f32);
            let mut w = p.value().to_vec();
            for (((wi, &gi), mi), vi) in w.iter_mut().zip(g.data()).zip(&mut slot.m).zip(&mut slot.v) {
                *mi = b1f * *mi + (1.0 - b1f) * gi;
                *vi = b2f * *vi + (1.0 - b2f) * gi * gi;
                *wi -= step * *mi / (vi.sqrt() + eps);
            }
            p.set_data(w);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::grad;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.weight("x", Tensor::from_vec(vec![3.0, -2.0], &[2]));
        let mut opt = Adam::new(0.9, 0.999);
        for _ in 0..500 {
            let x = p.value();
            let loss = x.square().sum();
            let g = grad(&loss, &[&x], false);
            opt.step(std::slice::from_ref(&p), &g, 0.05);
        }
        assert!(p.value().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let p = store.weight("x", Tensor::from_vec(vec![1.0], &[1]));
        let mut opt = Adam::new(0.9, 0.999);
        opt.step(std::slice::from_ref(&p), &[Tensor::from_vec(vec![0.3], &[1])], 0.01);
        assert!((p.value().item() - 0.99).abs() < 1e-6);
    }

    #[test]
    fn frozen_params_are_untracked() {
        let mut store = ParamStore::new();
        let p = store.weight("w", Tensor::ones(&[2]));
        p.set_trainable(false);
        assert!(!p.value().requires_grad());
        assert!(store.trainable().is_empty());
        p.set_trainable(true);
        assert!(p.value().requires_grad());
    }

    #[test]
    fn load_reports_unknown_and_mismatched() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "t", &[]);
        Linear::new(&mut store, "fc", 3, 2, &mut r);
        let err = store
            .load(
                &[
                    ("fc.weight".into(), vec![3, 2], vec![0.0; 6]),
                    ("fc.bias".into(), vec![3], vec![0.0; 3]),
                    ("extra".into(), vec![1], vec![0.0]),
                ],
                |_| false,
                true,
            )
            .unwrap_err()
            .to_string();
        assert!(err.contains("extra"), "{err}");
        assert!(err.contains("fc.bias"), "{err}");
    }

    #[test]
    fn batchnorm_frozen_mode_leaves_buffers_alone() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        let mut r = rng::stream(1, "t", &[]);
        let x = Tensor::randn(&[4, 2, 3, 3], &mut r);
        let before = store.snapshot();
        bn.forward(&x, NormMode::Frozen);
        assert_eq!(before, store.snapshot());
        let y = bn.forward(&x, NormMode::Train);
        assert_ne!(before, store.snapshot());
        let m = y.mean_to(&[1, 2, 1, 1]);
        assert!(m.data().iter().all(|v| v.abs() < 1e-5));
    }
}
