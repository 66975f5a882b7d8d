//! Dense feed-forward network with hand-written backpropagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::PredictorError;

pub const HIDDEN_WIDTHS: [usize; 2] = [48, 24];
pub const OUTPUTS: usize = 2;

const MAGIC: &[u8; 6] = b"AQMLP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Logistic,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Logistic => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Logistic),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Logistic => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation output `a` and input `z`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Logistic => a * (1.0 - a),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn forward_into(&self, x: &[f64], z: &mut Vec<f64>, a: &mut Vec<f64>) {
        z.clear();
        a.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.biases) {
            let s = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b;
            z.push(s);
            a.push(self.activation.apply(s));
        }
    }
}

/// Per-layer parameter gradients, same layout as the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    fn scale(&mut self, k: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= k);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

impl MlpModel {
    /// The predictor topology: `input_dim -> 48 -> 24 -> 2`, rectifier hidden
    /// units and logistic outputs.
    pub fn predictor(input_dim: usize, seed: u64) -> Self {
        Self::with_topology(
            &[input_dim, HIDDEN_WIDTHS[0], HIDDEN_WIDTHS[1], OUTPUTS],
            &[Activation::Relu, Activation::Relu, Activation::Logistic],
            seed,
        )
    }

    /// He-initialized weights for rectifier layers, Glorot otherwise; zero biases.
    pub fn with_topology(dims: &[usize], activations: &[Activation], seed: u64) -> Self {
        assert_eq!(dims.len(), activations.len() + 1, "one activation per layer");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &act)| {
                let (n_in, n_out) = (d[0], d[1]);
                let std = match act {
                    Activation::Relu => (2.0 / n_in as f64).sqrt(),
                    _ => (2.0 / (n_in + n_out) as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("finite std");
                Layer {
                    inputs: n_in,
                    outputs: n_out,
                    weights: (0..n_in * n_out).map(|_| normal.sample(&mut rng)).collect(),
                    biases: vec![0.0; n_out],
                    activation: act,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, PredictorError> {
        if layers.is_empty() {
            return Err(PredictorError::Topology("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(PredictorError::Topology(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(PredictorError::Topology(format!(
                    "layer {i} expects {} inputs, previous layer gives {}",
                    l.inputs,
                    layers[i - 1].outputs
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Checks the `48 -> 24 -> 2` rectifier/logistic layout.
    pub fn validate_predictor_topology(&self) -> Result<(), PredictorError> {
        let ok = self.layers.len() == 3
            && self.layers[0].outputs == HIDDEN_WIDTHS[0]
            && self.layers[1].outputs == HIDDEN_WIDTHS[1]
            && self.layers[2].outputs == OUTPUTS
            && self.layers[0].activation == Activation::Relu
            && self.layers[1].activation == Activation::Relu
            && self.layers[2].activation == Activation::Logistic;
        if ok {
            Ok(())
        } else {
            Err(PredictorError::Topology(
                "expected input -> 48 relu -> 24 relu -> 2 logistic".into(),
            ))
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, PredictorError> {
        if x.len() != self.input_dim() {
            return Err(PredictorError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut cur = x.to_vec();
        let (mut z, mut a) = (Vec::new(), Vec::new());
        for l in &self.layers {
            l.forward_into(&cur, &mut z, &mut a);
            std::mem::swap(&mut cur, &mut a);
        }
        Ok(cur)
    }

    /// Mean squared error over the batch and outputs, with its gradient.
    pub fn loss_and_gradient(&self, batch: &[(&[f64], &[f64])]) -> Result<(f64, Gradients), PredictorError> {
        let mut grads = Gradients::zeros_like(self);
        let mut loss = 0.0;
        let n_layers = self.layers.len();
        let mut zs: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        let mut acts: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        let mut delta: Vec<f64> = Vec::new();
        let mut prev_delta: Vec<f64> = Vec::new();
        let n_out = self.output_dim();
        for &(x, t) in batch {
            if x.len() != self.input_dim() {
                return Err(PredictorError::DimensionMismatch {
                    expected: self.input_dim(),
                    got: x.len(),
                });
            }
            if t.len() != n_out {
                return Err(PredictorError::DimensionMismatch {
                    expected: n_out,
                    got: t.len(),
                });
            }
            for i in 0..n_layers {
                let (before, rest) = acts.split_at_mut(i);
                let input = if i == 0 { x } else { &before[i - 1][..] };
                self.layers[i].forward_into(input, &mut zs[i], &mut rest[0]);
            }
            let out = &acts[n_layers - 1];
            delta.clear();
            for k in 0..n_out {
                let e = out[k] - t[k];
                loss += e * e;
                let act = self.layers[n_layers - 1].activation;
                delta.push(2.0 * e * act.derivative(zs[n_layers - 1][k], out[k]));
            }
            for i in (0..n_layers).rev() {
                let layer = &self.layers[i];
                let input = if i == 0 { x } else { &acts[i - 1][..] };
                let gw = &mut grads.weights[i];
                let gb = &mut grads.biases[i];
                for (o, &d) in delta.iter().enumerate() {
                    gb[o] += d;
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, &v) in row.iter_mut().zip(input) {
                        *g += d * v;
                    }
                }
                if i > 0 {
                    let below = &self.layers[i - 1];
                    prev_delta.clear();
                    prev_delta.resize(layer.inputs, 0.0);
                    for (o, &d) in delta.iter().enumerate() {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (p, &w) in prev_delta.iter_mut().zip(row) {
                            *p += d * w;
                        }
                    }
                    for (j, p) in prev_delta.iter_mut().enumerate() {
                        *p *= below.activation.derivative(zs[i - 1][j], acts[i - 1][j]);
                    }
                    std::mem::swap(&mut delta, &mut prev_delta);
                }
            }
        }
        let norm = 1.0 / (batch.len().max(1) * n_out) as f64;
        grads.scale(norm);
        Ok((loss * norm, grads))
    }

    /// Mean squared error without gradients.
    pub fn loss(&self, batch: &[(&[f64], &[f64])]) -> Result<f64, PredictorError> {
        let mut total = 0.0;
        for &(x, t) in batch {
            let y = self.forward(x)?;
            total += y.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(total / (batch.len().max(1) * self.output_dim()) as f64)
    }

    /// `params -= lr * grads`, optionally through a momentum buffer.
    pub fn apply_update(&mut self, grads: &Gradients, lr: f64, momentum: Option<(&mut Gradients, f64)>) {
        match momentum {
            None => {
                for (i, l) in self.layers.iter_mut().enumerate() {
                    for (w, g) in l.weights.iter_mut().zip(&grads.weights[i]) {
                        *w -= lr * g;
                    }
                    for (b, g) in l.biases.iter_mut().zip(&grads.biases[i]) {
                        *b -= lr * g;
                    }
                }
            }
            Some((vel, mu)) => {
                for (i, l) in self.layers.iter_mut().enumerate() {
                    for ((w, g), v) in l.weights.iter_mut().zip(&grads.weights[i]).zip(&mut vel.weights[i]) {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                    for ((b, g), v) in l.biases.iter_mut().zip(&grads.biases[i]).zip(&mut vel.biases[i]) {
                        *v = mu * *v + g;
                        *b -= lr * *v;
                    }
                }
            }
        }
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients::zeros_like(self)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Versioned little-endian binary: magic, layer count, then per layer
    /// `inputs, outputs, activation tag, weights (row-major), biases`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.n_params() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
            out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
            out.push(l.activation.tag());
            for v in l.weights.iter().chain(&l.biases) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PredictorError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != MAGIC {
            return Err(PredictorError::ModelFormat("bad magic".into()));
        }
        let n_layers = r.u32()? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(PredictorError::ModelFormat(format!(
                "implausible layer count {n_layers}"
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let inputs = r.u32()? as usize;
            let outputs = r.u32()? as usize;
            let tag = r.take(1)?[0];
            let activation = Activation::from_tag(tag)
                .ok_or_else(|| PredictorError::ModelFormat(format!("unknown activation tag {tag}")))?;
            let count = inputs
                .checked_mul(outputs)
                .filter(|&c| c <= bytes.len() / 8)
                .ok_or_else(|| PredictorError::ModelFormat("layer too large".into()))?;
            let weights = (0..count).map(|_| r.f64()).collect::<Result<_, _>>()?;
            let biases = (0..outputs).map(|_| r.f64()).collect::<Result<_, _>>()?;
            layers.push(Layer {
                inputs,
                outputs,
                weights,
                biases,
                activation,
            });
        }
        if r.pos != bytes.len() {
            return Err(PredictorError::ModelFormat("trailing bytes".into()));
        }
        Self::from_layers(layers)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PredictorError> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| PredictorError::ModelFormat("truncated".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PredictorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, PredictorError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Largest relative deviation between backpropagated gradients and central
/// finite differences (step `1e-5`) of the batch loss, over every parameter.
///
/// Deviation is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn gradient_check(model: &MlpModel, batch: &[(&[f64], &[f64])]) -> Result<f64, PredictorError> {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let (_, analytic) = model.loss_and_gradient(batch)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for li in 0..model.layers.len() {
        let n_w = model.layers[li].weights.len();
        let n_b = model.layers[li].biases.len();
        for pi in 0..n_w + n_b {
            let orig = *param_mut(&mut probe, li, pi);
            *param_mut(&mut probe, li, pi) = orig + STEP;
            let up = probe.loss(batch)?;
            *param_mut(&mut probe, li, pi) = orig - STEP;
            let down = probe.loss(batch)?;
            *param_mut(&mut probe, li, pi) = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = if pi < n_w {
                analytic.weights[li][pi]
            } else {
                analytic.biases[li][pi - n_w]
            };
            let dev = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(dev);
        }
    }
    Ok(worst)
}

fn param_mut(model: &mut MlpModel, layer: usize, index: usize) -> &mut f64 {
    let l = &mut model.layers[layer];
    let n_w = l.weights.len();
    if index < n_w {
        &mut l.weights[index]
    } else {
        &mut l.biases[index - n_w]
    }
}
