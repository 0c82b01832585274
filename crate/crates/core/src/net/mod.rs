//! Dense feedforward velocity network with hand-written reverse mode.
//!
//! The network maps the concatenated input `[x, t, c]` through tanh (or SiLU)
//! hidden layers to a linear output of the data dimension. Parameters live in
//! one flat `f64` vector, laid out layer by layer as a row-major weight matrix
//! `(out x in)` followed by the bias vector.

mod checkpoint;
mod grad_check;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub use grad_check::{grad_check, GradCheck, GradCheckReport};
pub use optim::{adam_step, AdamConfig, AdamState, Optimizer, OptimizerKind};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    /// Derivative given the pre-activation `z` and the activation value `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Silu),
            _ => None,
        }
    }
}

/// Shape of a velocity network. Input width is `data_dim + 1 + cond_dim`,
/// output width is `data_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub data_dim: usize,
    #[serde(default)]
    pub cond_dim: usize,
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ArchSpec {
    pub fn new(data_dim: usize, cond_dim: usize, hidden_widths: Vec<usize>, activation: Activation) -> Self {
        Self {
            data_dim,
            cond_dim,
            hidden_widths,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + 1 + self.cond_dim
    }

    pub fn output_dim(&self) -> usize {
        self.data_dim
    }

    /// All layer widths, input first and output last.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_widths.len() + 2);
        w.push(self.input_dim());
        w.extend_from_slice(&self.hidden_widths);
        w.push(self.output_dim());
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::config("arch.data_dim", "must be at least 1"));
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(Error::config(
                format!("arch.hidden_widths[{i}]"),
                "layer widths must be at least 1",
            ));
        }
        Ok(())
    }

    /// `(weight_offset, bias_offset, fan_in, fan_out)` for every layer.
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let widths = self.widths();
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let wo = offset;
                let bo = wo + fan_in * fan_out;
                offset = bo + fan_out;
                (wo, bo, fan_in, fan_out)
            })
            .collect()
    }
}

/// Gradient with respect to a model's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(pub Vec<f64>);

impl GradVector {
    pub fn zeros(n: usize) -> Self {
        GradVector(vec![0.0; n])
    }

    pub fn add_assign(&mut self, other: &GradVector) {
        debug_assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &GradVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Deref for GradVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Velocity network `v(x, t, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    arch: ArchSpec,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer; `inputs[0]` is the concatenated `[x, t, c]`.
    inputs: Vec<Vec<f64>>,
    /// Hidden pre-activations, one vector per hidden layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Adds `d<upstream, v>/d params` into `grad`.
    pub fn accumulate(&self, model: &VelocityModel, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        check_dim("upstream", model.arch.output_dim(), upstream.len())?;
        check_dim("gradient buffer", model.params.len(), grad.len())?;
        if !upstream.iter().all(|u| u.is_finite()) {
            return Err(Error::Numeric("non-finite upstream gradient".into()));
        }
        let layers = model.arch.layers();
        let mut delta = upstream.to_vec();
        for (l, &(wo, bo, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let input = &self.inputs[l];
            for j in 0..fan_out {
                let dj = delta[j];
                grad[bo + j] += dj;
                if dj != 0.0 {
                    let row = &mut grad[wo + j * fan_in..wo + (j + 1) * fan_in];
                    for (g, &a) in row.iter_mut().zip(input) {
                        *g += dj * a;
                    }
                }
            }
            if l > 0 {
                let w = &model.params[wo..bo];
                let mut prev = vec![0.0; fan_in];
                for j in 0..fan_out {
                    let dj = delta[j];
                    if dj == 0.0 {
                        continue;
                    }
                    for (p, &wij) in prev.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                        *p += dj * wij;
                    }
                }
                let z = &self.pre[l - 1];
                for (i, p) in prev.iter_mut().enumerate() {
                    *p *= model.arch.activation.derivative(z[i], input[i]);
                }
                delta = prev;
            }
        }
        Ok(())
    }
}

impl VelocityModel {
    pub fn zeros(arch: ArchSpec) -> Self {
        let n = arch.param_count();
        Self {
            arch,
            params: vec![0.0; n],
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(arch: ArchSpec, rng: &mut Rng) -> Self {
        let mut model = Self::zeros(arch);
        for (wo, bo, fan_in, fan_out) in model.arch.layers() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut model.params[wo..bo] {
                *w = rng.random_range(-bound..=bound);
            }
        }
        model
    }

    pub fn from_params(arch: ArchSpec, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_dim("parameter vector", arch.param_count(), params.len())?;
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Sets the output-layer bias; handy for constant-velocity probes.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        let &(_, bo, _, fan_out) = self.arch.layers().last().expect("at least one layer");
        check_dim("output bias", fan_out, bias.len())?;
        self.params[bo..bo + fan_out].copy_from_slice(bias);
        Ok(())
    }

    fn check_inputs(&self, x: &[f64], t: f64, c: &[f64]) -> Result<()> {
        check_dim("data point", self.arch.data_dim, x.len())?;
        check_dim("condition", self.arch.cond_dim, c.len())?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Input(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn trace(&self, x: &[f64], t: f64, c: &[f64]) -> Result<Trace> {
        self.check_inputs(x, t, c)?;
        let layers = self.arch.layers();
        let mut input = Vec::with_capacity(self.arch.input_dim());
        input.extend_from_slice(x);
        input.push(t);
        input.extend_from_slice(c);

        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len() - 1);
        let last = layers.len() - 1;
        for (l, &(wo, bo, fan_in, fan_out)) in layers.iter().enumerate() {
            let w = &self.params[wo..bo];
            let b = &self.params[bo..bo + fan_out];
            let z: Vec<f64> = (0..fan_out)
                .map(|j| {
                    let row = &w[j * fan_in..(j + 1) * fan_in];
                    row.iter().zip(&input).fold(b[j], |acc, (wij, a)| acc + wij * a)
                })
                .collect();
            inputs.push(input);
            if l == last {
                return Ok(Trace { inputs, pre, output: z });
            }
            input = z.iter().map(|&zj| self.arch.activation.apply(zj)).collect();
            pre.push(z);
        }
        unreachable!("loop returns on the output layer")
    }

    pub fn forward(&self, x: &[f64], t: f64, c: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x, t, c)?.output)
    }

    /// Gradient of `<upstream, v(x, t, c)>` with respect to the parameters.
    pub fn backward(&self, x: &[f64], t: f64, c: &[f64], upstream: &[f64]) -> Result<GradVector> {
        let trace = self.trace(x, t, c)?;
        let mut grad = GradVector::zeros(self.params.len());
        trace.accumulate(self, upstream, &mut grad.0)?;
        Ok(grad)
    }
}

/// Samples per reduction chunk. Fixed so the summation tree does not depend
/// on the thread count.
const CHUNK: usize = 16;

/// Per-sample values and summed gradient over `0..n`.
///
/// `per_sample(i, grad)` returns sample `i`'s value (usually its loss) and
/// adds its gradient into `grad`. Chunks of consecutive samples are reduced
/// in parallel and the chunk gradients are then summed in index order, so the
/// result is bit-identical regardless of scheduling.
pub fn reduce_batch<T, F>(n: usize, n_params: usize, per_sample: F) -> Result<(Vec<T>, GradVector)>
where
    T: Send,
    F: Fn(usize, &mut [f64]) -> Result<T> + Sync,
{
    let partials: Vec<Result<(Vec<T>, Vec<f64>)>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut grad = vec![0.0; n_params];
            let values = (chunk * CHUNK..((chunk + 1) * CHUNK).min(n))
                .map(|i| per_sample(i, &mut grad))
                .collect::<Result<Vec<T>>>()?;
            Ok((values, grad))
        })
        .collect();
    let mut values = Vec::with_capacity(n);
    let mut grad = GradVector::zeros(n_params);
    for part in partials {
        let (v, g) = part?;
        values.extend(v);
        for (a, b) in grad.0.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((values, grad))
}
