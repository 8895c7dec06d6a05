//! Small stacked classifier with frozen base weights and a LoRA adapter on
//! every linear module.
//!
//! Each module computes `h ← act(h · (W₀ + (α/r)·B·A) + bias)` on row-vector
//! activations, so `W₀` is `d_in × d_out`, `B` is `d_in × r` and `A` is
//! `r × d_out`. A frozen head maps the last hidden state to class logits.
//! Only `B` and `A` are trainable; gradients are computed analytically.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

pub const DEFAULT_ALPHA: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    B,
    A,
}

impl Factor {
    pub fn other(self) -> Factor {
        match self {
            Factor::A => Factor::B,
            Factor::B => Factor::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    /// Linear; used to get closed-form outputs in tests.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub modules_per_layer: usize,
    pub num_classes: usize,
    /// Adapter rank (the global rank for strategies that select sub-ranks).
    pub rank: usize,
    pub alpha: f64,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            layers: 2,
            modules_per_layer: 2,
            num_classes: 8,
            rank: 8,
            alpha: DEFAULT_ALPHA,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn num_modules(&self) -> usize {
        self.layers * self.modules_per_layer
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("layers", self.layers),
            ("modules_per_layer", self.modules_per_layer),
            ("num_classes", self.num_classes),
            ("rank", self.rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.rank > self.d {
            return Err(Error::config(format!(
                "model rank {} exceeds hidden width {}",
                self.rank, self.d
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("model.alpha must be positive and finite"));
        }
        Ok(())
    }
}

/// One adapter pair over a `d1 × d2` module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub b: Matrix,
    pub a: Matrix,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(b: Matrix, a: Matrix, alpha: f64) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::Dimension {
                op: "lora adapter",
                lhs: b.shape(),
                rhs: a.shape(),
            });
        }
        Ok(LoraAdapter { b, a, alpha })
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn d_in(&self) -> usize {
        self.b.rows()
    }

    pub fn d_out(&self) -> usize {
        self.a.cols()
    }

    /// `alpha / rank`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Effective weight change `(alpha / r) · B · A`.
    pub fn delta_w(&self) -> Matrix {
        self.b.matmul(&self.a).scale(self.scaling())
    }

    pub fn factor(&self, f: Factor) -> &Matrix {
        match f {
            Factor::B => &self.b,
            Factor::A => &self.a,
        }
    }

    pub fn factor_mut(&mut self, f: Factor) -> &mut Matrix {
        match f {
            Factor::B => &mut self.b,
            Factor::A => &mut self.a,
        }
    }

    pub fn trainable_params(&self) -> usize {
        self.rank() * (self.d_in() + self.d_out())
    }
}

/// The adapters of every module, in forward order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub modules: Vec<LoraAdapter>,
}

impl AdapterSet {
    /// Standard LoRA init: `B = 0`, `A ~ N(0, (1/√r)²)`.
    pub fn init(model: &LoraModel, rank: usize, alpha: f64, rng: &mut Rng) -> Self {
        let modules = model
            .modules
            .iter()
            .map(|m| {
                let (d_in, d_out) = m.weight.shape();
                LoraAdapter {
                    b: Matrix::zeros(d_in, rank),
                    a: rng.gaussian_matrix(rank, d_out, 1.0 / (rank as f64).sqrt()),
                    alpha,
                }
            })
            .collect();
        AdapterSet { modules }
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.modules.first().map_or(0, LoraAdapter::rank)
    }

    pub fn factors(&self, f: Factor) -> Vec<Matrix> {
        self.modules.iter().map(|m| m.factor(f).clone()).collect()
    }

    pub fn delta_ws(&self) -> Vec<Matrix> {
        self.modules.iter().map(LoraAdapter::delta_w).collect()
    }

    pub fn trainable_params(&self) -> usize {
        self.modules.iter().map(LoraAdapter::trainable_params).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.modules.iter().all(|m| m.a.is_finite() && m.b.is_finite())
    }

    pub fn bit_eq(&self, other: &AdapterSet) -> bool {
        self.modules.len() == other.modules.len()
            && self
                .modules
                .iter()
                .zip(&other.modules)
                .all(|(x, y)| x.a.bit_eq(&y.a) && x.b.bit_eq(&y.b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenModule {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Frozen base network plus classifier head. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraModel {
    modules: Vec<FrozenModule>,
    head: Matrix,
    activation: Activation,
    layers: usize,
    modules_per_layer: usize,
}

/// Per-module gradients of the loss w.r.t. `B` and `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub modules: Vec<FactorGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrads {
    pub b: Matrix,
    pub a: Matrix,
}

impl FactorGrads {
    pub fn factor(&self, f: Factor) -> &Matrix {
        match f {
            Factor::B => &self.b,
            Factor::A => &self.a,
        }
    }
}

/// A minibatch: `inputs` is `n × d`, one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

/// Base weights `N(0, (1/√d)²)`, zero biases, head `N(0, (1/√d)²)`; then the
/// adapters drawn from the same stream.
pub fn init_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<(LoraModel, AdapterSet)> {
    cfg.validate()?;
    let std = 1.0 / (cfg.d as f64).sqrt();
    let modules = (0..cfg.num_modules())
        .map(|_| FrozenModule {
            weight: rng.gaussian_matrix(cfg.d, cfg.d, std),
            bias: vec![0.0; cfg.d],
        })
        .collect();
    let head = rng.gaussian_matrix(cfg.d, cfg.num_classes, std);
    let model = LoraModel {
        modules,
        head,
        activation: cfg.activation,
        layers: cfg.layers,
        modules_per_layer: cfg.modules_per_layer,
    };
    let adapters = AdapterSet::init(&model, cfg.rank, cfg.alpha, rng);
    Ok((model, adapters))
}

struct Trace {
    /// Input to each module, then the final hidden state.
    hidden: Vec<Matrix>,
    pre_activation: Vec<Matrix>,
    effective: Vec<Matrix>,
    logits: Matrix,
}

impl LoraModel {
    /// Assembles a model from explicit parts; `modules` are in forward order.
    pub fn from_parts(
        modules: Vec<FrozenModule>,
        head: Matrix,
        activation: Activation,
        modules_per_layer: usize,
    ) -> Result<Self> {
        if modules.is_empty() || modules_per_layer == 0 || !modules.len().is_multiple_of(modules_per_layer) {
            return Err(Error::config(
                "module count must be a positive multiple of modules_per_layer",
            ));
        }
        let mut width = modules[0].weight.rows();
        for m in &modules {
            if m.weight.rows() != width || m.bias.len() != m.weight.cols() {
                return Err(Error::Dimension {
                    op: "model assembly",
                    lhs: m.weight.shape(),
                    rhs: (width, m.bias.len()),
                });
            }
            width = m.weight.cols();
        }
        if head.rows() != width {
            return Err(Error::Dimension {
                op: "model head",
                lhs: head.shape(),
                rhs: (width, 0),
            });
        }
        let layers = modules.len() / modules_per_layer;
        Ok(LoraModel {
            modules,
            head,
            activation,
            layers,
            modules_per_layer,
        })
    }

    pub fn modules(&self) -> &[FrozenModule] {
        &self.modules
    }

    pub fn head(&self) -> &Matrix {
        &self.head
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Total adapted module count `N`.
    pub fn num_modules(&self) -> usize {
        self.modules.len()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn modules_per_layer(&self) -> usize {
        self.modules_per_layer
    }

    pub fn input_dim(&self) -> usize {
        self.modules[0].weight.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.head.cols()
    }

    /// `(d1, d2)` of module `m`.
    pub fn module_dims(&self, m: usize) -> (usize, usize) {
        self.modules[m].weight.shape()
    }

    fn check_adapters(&self, adapters: &AdapterSet) -> Result<()> {
        if adapters.len() != self.modules.len() {
            return Err(Error::Dimension {
                op: "adapter count",
                lhs: (adapters.len(), 0),
                rhs: (self.modules.len(), 0),
            });
        }
        for (m, ad) in self.modules.iter().zip(&adapters.modules) {
            if (ad.d_in(), ad.d_out()) != m.weight.shape() || ad.a.rows() != ad.rank() {
                return Err(Error::Dimension {
                    op: "adapter shape",
                    lhs: (ad.d_in(), ad.d_out()),
                    rhs: m.weight.shape(),
                });
            }
        }
        Ok(())
    }

    fn effective_weights(&self, adapters: Option<&AdapterSet>) -> Vec<Matrix> {
        match adapters {
            None => self.modules.iter().map(|m| m.weight.clone()).collect(),
            Some(ad) => self
                .modules
                .iter()
                .zip(&ad.modules)
                .map(|(m, a)| {
                    let mut w = m.weight.clone();
                    if a.b.as_slice().iter().any(|&v| v != 0.0) {
                        w.axpy(a.scaling(), &a.b.matmul(&a.a));
                    }
                    w
                })
                .collect(),
        }
    }

    fn trace(&self, effective: Vec<Matrix>, inputs: &Matrix) -> Result<Trace> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "forward input",
                lhs: inputs.shape(),
                rhs: (0, self.input_dim()),
            });
        }
        let mut hidden = Vec::with_capacity(self.modules.len() + 1);
        let mut pre_activation = Vec::with_capacity(self.modules.len());
        let mut h = inputs.clone();
        for (module, w) in self.modules.iter().zip(&effective) {
            let mut z = h.matmul(w);
            for i in 0..z.rows() {
                for (v, b) in z.row_mut(i).iter_mut().zip(&module.bias) {
                    *v += b;
                }
            }
            let act = self.activation;
            let next = z.map(|v| act.apply(v));
            hidden.push(h);
            pre_activation.push(z);
            h = next;
        }
        let logits = h.matmul(&self.head);
        hidden.push(h);
        Ok(Trace {
            hidden,
            pre_activation,
            effective,
            logits,
        })
    }

    /// Logits (`n × num_classes`) with adapters applied.
    pub fn forward(&self, adapters: &AdapterSet, inputs: &Matrix) -> Result<Matrix> {
        self.check_adapters(adapters)?;
        Ok(self.trace(self.effective_weights(Some(adapters)), inputs)?.logits)
    }

    /// Logits of the frozen base network alone.
    pub fn forward_frozen(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.trace(self.effective_weights(None), inputs)?.logits)
    }

    /// Mean softmax cross-entropy and its exact gradients w.r.t. every `B`, `A`.
    pub fn loss_and_grads(&self, adapters: &AdapterSet, batch: &Batch) -> Result<(f64, Gradients)> {
        self.check_adapters(adapters)?;
        let n = batch.labels.len();
        if n == 0 || batch.inputs.rows() != n {
            return Err(Error::config("batch must be non-empty with one label per row"));
        }
        let trace = self.trace(self.effective_weights(Some(adapters)), &batch.inputs)?;
        let (loss, mut d_hidden) = {
            let (loss, d_logits) = softmax_cross_entropy(&trace.logits, &batch.labels)?;
            (loss, d_logits.matmul_t(&self.head))
        };

        let mut grads: Vec<FactorGrads> = Vec::with_capacity(self.modules.len());
        for m in (0..self.modules.len()).rev() {
            let z = &trace.pre_activation[m];
            let h_out = &trace.hidden[m + 1];
            let act = self.activation;
            let mut d_z = d_hidden;
            for ((g, &zv), &hv) in d_z.as_mut_slice().iter_mut().zip(z.as_slice()).zip(h_out.as_slice()) {
                *g *= act.derivative(zv, hv);
            }
            let d_w = trace.hidden[m].t_matmul(&d_z);
            let ad = &adapters.modules[m];
            let s = ad.scaling();
            grads.push(FactorGrads {
                b: d_w.matmul_t(&ad.a).scale(s),
                a: ad.b.t_matmul(&d_w).scale(s),
            });
            d_hidden = if m > 0 { d_z.matmul_t(&trace.effective[m]) } else { d_z };
        }
        grads.reverse();
        Ok((loss, Gradients { modules: grads }))
    }

    pub fn loss(&self, adapters: &AdapterSet, batch: &Batch) -> Result<f64> {
        let logits = self.forward(adapters, &batch.inputs)?;
        Ok(softmax_cross_entropy(&logits, &batch.labels)?.0)
    }

    /// Copy whose base weights are `W₀ + (α/r)·B·A`, evaluated adapter-free.
    pub fn merge_for_eval(&self, adapters: &AdapterSet) -> Result<LoraModel> {
        self.check_adapters(adapters)?;
        let modules = self
            .modules
            .iter()
            .zip(self.effective_weights(Some(adapters)))
            .map(|(m, w)| FrozenModule {
                weight: w,
                bias: m.bias.clone(),
            })
            .collect();
        Ok(LoraModel {
            modules,
            head: self.head.clone(),
            activation: self.activation,
            layers: self.layers,
            modules_per_layer: self.modules_per_layer,
        })
    }

    /// Fraction of argmax-correct predictions; ties go to the lowest class.
    pub fn accuracy(&self, adapters: &AdapterSet, data: &Dataset) -> Result<f64> {
        let merged = self.merge_for_eval(adapters)?;
        merged.frozen_accuracy(data)
    }

    pub fn frozen_accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::config("accuracy on an empty dataset"));
        }
        let logits = self.forward_frozen(data.samples())?;
        let correct = (0..logits.rows())
            .filter(|&i| argmax(logits.row(i)) == data.labels()[i])
            .count();
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Index of the largest value, first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and `∂loss/∂logits`.
fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    let mut grad = Matrix::zeros(n, c);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::config(format!("label {label} out of range for {c} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        let g = grad.row_mut(i);
        for (j, gv) in g.iter_mut().enumerate() {
            *gv = (row[j] - log_z).exp() / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}
