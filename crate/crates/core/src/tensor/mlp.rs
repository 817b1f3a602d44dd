use rand::Rng;

use super::array::Tensor;
use super::params::{BoundParams, ParamId, ParamStore};
use super::tape::{Tape, Value};
use crate::error::{Error, Result};

/// Layer widths of a perceptron, input first. Hidden layers use a rectifier,
/// the output layer is linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Invalid(format!(
                "MLP widths must list at least input and output, all positive: {widths:?}"
            )));
        }
        Ok(Self { widths })
    }

    /// `depth` weight layers: `input → hidden × (depth−1) → output`.
    pub fn with_hidden(input: usize, hidden: usize, depth: usize, output: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Invalid("MLP depth must be at least 1".into()));
        }
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(hidden, depth - 1));
        widths.push(output);
        Self::new(widths)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    /// Number of weight matrices.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl Mlp {
    /// Registers `prefix.{layer}.weight` / `prefix.{layer}.bias` with
    /// uniform(±1/√fan_in) initialization.
    pub fn init(store: &mut ParamStore, prefix: &str, spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut weights = Vec::with_capacity(spec.depth());
        let mut biases = Vec::with_capacity(spec.depth());
        for (l, pair) in spec.widths().windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            weights.push(store.insert(format!("{prefix}.{l}.weight"), Tensor::matrix(fan_in, fan_out, w)?)?);
            biases.push(store.insert(format!("{prefix}.{l}.bias"), Tensor::vector(b))?);
        }
        Ok(Self { spec, weights, biases })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[ParamId] {
        &self.weights
    }

    pub fn biases(&self) -> &[ParamId] {
        &self.biases
    }

    /// Applies the MLP to the feature-wise concatenation of `inputs`.
    pub fn apply(&self, tape: &mut Tape, p: &BoundParams, inputs: &[Value]) -> Result<Value> {
        let h = self.first_layer(tape, p, inputs)?;
        self.finish(tape, p, h)
    }

    /// Runs the layers after the first on a first-layer pre-activation.
    pub fn finish(&self, tape: &mut Tape, p: &BoundParams, pre: Value) -> Result<Value> {
        let mut h = pre;
        for l in 1..self.spec.depth() {
            h = tape.relu(h)?;
            h = tape.matmul(h, p[self.weights[l]])?;
            h = tape.add_bias(h, p[self.biases[l]])?;
        }
        Ok(h)
    }

    /// Pre-activation of the first layer, `Σ_k x_k · W₀[rows_k] + b₀`.
    pub fn first_layer(&self, tape: &mut Tape, p: &BoundParams, inputs: &[Value]) -> Result<Value> {
        let mut widths = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let t = tape.value(x)?;
            if t.shape().len() != 2 {
                return Err(Error::shape("mlp_apply", format!("input of shape {:?} is not a matrix", t.shape())));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        if total != self.spec.input() {
            return Err(Error::shape(
                "mlp_apply",
                format!("inputs have feature widths {widths:?} (total {total}), first layer expects {}", self.spec.input()),
            ));
        }
        let mut acc: Option<Value> = None;
        let mut offset = 0;
        for (&x, &w) in inputs.iter().zip(&widths) {
            let part = self.input_projection(tape, p, x, offset, w)?;
            acc = Some(match acc {
                None => part,
                Some(a) => tape.add(a, part)?,
            });
            offset += w;
        }
        tape.add_bias(acc.expect("at least one input"), p[self.biases[0]])
    }

    /// `x · W₀[offset..offset+width]`, the contribution of one input block
    /// to the first layer (no bias).
    pub fn input_projection(&self, tape: &mut Tape, p: &BoundParams, x: Value, offset: usize, width: usize) -> Result<Value> {
        let w0 = p[self.weights[0]];
        if offset == 0 && width == self.spec.input() {
            return tape.matmul(x, w0);
        }
        let block = tape.slice_rows(w0, offset, width)?;
        tape.matmul(x, block)
    }
}
