//! Compact neural representation of a reflectance table: a fully-connected
//! network mapping (lambda, phi_d, theta_d, theta_h) to the 16 Mueller
//! entries, with hand-written forward and reverse passes.
//!
//! Parameters live in f64 while training and quantize to f32 on disk; all
//! arithmetic is plain f64 loops, single threaded and bit-reproducible for a
//! fixed seed. Inputs normalize to [-1, 1], the three angular coordinates
//! optionally get a sinusoidal encoding, hidden layers use tanh, the output
//! layer is linear and predicts raw Mueller entries with no physicality
//! projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::HpbrdfTable;

pub const MODEL_MAGIC: [u8; 4] = *b"HPNN";
pub const MODEL_VERSION: u32 = 1;
/// Upper bound on parameters accepted from a model file.
const MAX_FILE_PARAMS: u64 = 100_000_000;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid architecture: {0}")]
    ArchInvalid(String),
    #[error("training loss diverged at step {0}")]
    DivergedLoss(usize),
    #[error("table has no filled bins to sample")]
    EmptyTable,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u32),
    #[error("model file ends early")]
    TruncatedFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Sinusoidal frequencies applied to each angular input; 0 disables the
    /// encoding and feeds the normalized coordinates alone.
    pub pe_frequencies: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { hidden_layers: 4, hidden_width: 256, pe_frequencies: 4 }
    }
}

impl MlpConfig {
    pub fn input_dim(&self) -> usize {
        4 + 6 * self.pe_frequencies
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `[output][input]`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.biases[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub pe_frequencies: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub layers: Vec<Layer>,
}

/// One (weights, biases) pair per layer, shaped like the model.
pub type Gradients = Vec<(Vec<f64>, Vec<f64>)>;

impl MlpModel {
    /// Fresh model with uniform fan-balanced initialization.
    pub fn new(
        config: &MlpConfig,
        lambda_min: f64,
        lambda_max: f64,
        seed: u64,
    ) -> Result<Self, NeuralError> {
        if config.hidden_layers > 0 && config.hidden_width == 0 {
            return Err(NeuralError::ArchInvalid("hidden width must be nonzero".into()));
        }
        if !(lambda_min.is_finite() && lambda_max.is_finite()) || lambda_max < lambda_min {
            return Err(NeuralError::ArchInvalid(format!(
                "bad wavelength range {lambda_min}..{lambda_max}"
            )));
        }
        let mut sizes = vec![config.input_dim()];
        sizes.extend(std::iter::repeat(config.hidden_width).take(config.hidden_layers));
        sizes.push(16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|pair| {
                let (inputs, outputs) = (pair[0], pair[1]);
                let bound = (6.0 / (inputs + outputs) as f64).sqrt();
                Layer {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                    biases: vec![0.0; outputs],
                }
            })
            .collect();
        Ok(Self {
            pe_frequencies: config.pe_frequencies,
            lambda_min,
            lambda_max,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        4 + 6 * self.pe_frequencies
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Exact size of the serialized model in bytes.
    pub fn serialized_bytes(&self) -> u64 {
        let header = 4 + 4 + 4 + 4 + 8 * self.layers.len() as u64 + 16;
        header + 4 * self.param_count() as u64
    }

    /// Normalized and positionally encoded network input.
    pub fn encode(&self, coord: [f64; 4]) -> Vec<f64> {
        let lambda_span = self.lambda_max - self.lambda_min;
        let lambda = if lambda_span > 0.0 {
            2.0 * (coord[0] - self.lambda_min) / lambda_span - 1.0
        } else {
            0.0
        };
        let angular = [
            2.0 * coord[1] / std::f64::consts::TAU - 1.0,
            4.0 * coord[2] / std::f64::consts::PI - 1.0,
            4.0 * coord[3] / std::f64::consts::PI - 1.0,
        ];
        let mut out = Vec::with_capacity(self.input_dim());
        out.push(lambda);
        out.extend_from_slice(&angular);
        for k in 0..self.pe_frequencies {
            let scale = (1u64 << k) as f64 * std::f64::consts::PI;
            for a in angular {
                let (s, c) = (scale * a).sin_cos();
                out.push(s);
                out.push(c);
            }
        }
        out
    }

    /// Pre-activations are never stored; each entry is a layer's activated
    /// output, starting with the encoded input.
    fn forward_trace(&self, encoded: Vec<f64>) -> Vec<Vec<f64>> {
        let mut trace = vec![encoded];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = Vec::new();
            layer.apply(trace.last().unwrap(), &mut next);
            if i < last {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
            }
            trace.push(next);
        }
        trace
    }

    pub fn forward(&self, coord: [f64; 4]) -> [f64; 16] {
        let trace = self.forward_trace(self.encode(coord));
        let out = trace.last().unwrap();
        let mut result = [0.0; 16];
        result.copy_from_slice(out);
        result
    }

    /// Reverse-mode gradients of `output_grad . forward(coord)` with respect
    /// to every weight and bias.
    pub fn backward(&self, coord: [f64; 4], output_grad: &[f64; 16]) -> Gradients {
        let trace = self.forward_trace(self.encode(coord));
        let mut grads: Gradients = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
            .collect();
        let mut delta: Vec<f64> = output_grad.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace[i];
            let (gw, gb) = &mut grads[i];
            for o in 0..layer.outputs {
                let d = delta[o];
                gb[o] = d;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, x) in row.iter_mut().zip(input) {
                    *g = d * x;
                }
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let d = delta[o];
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // The producing layer ran tanh; fold its derivative in.
            for (p, h) in prev.iter_mut().zip(&trace[i]) {
                *p *= 1.0 - h * h;
            }
            delta = prev;
        }
        grads
    }

    pub fn write<W: std::io::Write>(&self, mut out: W) -> Result<(), NeuralError> {
        out.write_all(&MODEL_MAGIC)?;
        out.write_all(&MODEL_VERSION.to_le_bytes())?;
        out.write_all(&(self.pe_frequencies as u32).to_le_bytes())?;
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            out.write_all(&(layer.inputs as u32).to_le_bytes())?;
            out.write_all(&(layer.outputs as u32).to_le_bytes())?;
        }
        out.write_all(&self.lambda_min.to_le_bytes())?;
        out.write_all(&self.lambda_max.to_le_bytes())?;
        for layer in &self.layers {
            for w in &layer.weights {
                out.write_all(&(*w as f32).to_le_bytes())?;
            }
            for b in &layer.biases {
                out.write_all(&(*b as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: std::io::Read>(mut inp: R) -> Result<Self, NeuralError> {
        let mut buf4 = [0u8; 4];
        let mut buf8 = [0u8; 8];
        let read4 = |inp: &mut R, buf: &mut [u8; 4]| -> Result<(), NeuralError> {
            inp.read_exact(buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => NeuralError::TruncatedFile,
                _ => NeuralError::Io(e),
            })
        };
        read4(&mut inp, &mut buf4)?;
        if buf4 != MODEL_MAGIC {
            return Err(NeuralError::BadMagic);
        }
        read4(&mut inp, &mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != MODEL_VERSION {
            return Err(NeuralError::UnsupportedVersion(version));
        }
        read4(&mut inp, &mut buf4)?;
        let pe = u32::from_le_bytes(buf4) as usize;
        read4(&mut inp, &mut buf4)?;
        let layer_count = u32::from_le_bytes(buf4) as usize;
        if layer_count == 0 || layer_count > 64 {
            return Err(NeuralError::ArchInvalid(format!("{layer_count} layers")));
        }
        let mut shapes = Vec::with_capacity(layer_count);
        let mut total: u64 = 0;
        for _ in 0..layer_count {
            read4(&mut inp, &mut buf4)?;
            let inputs = u32::from_le_bytes(buf4) as usize;
            read4(&mut inp, &mut buf4)?;
            let outputs = u32::from_le_bytes(buf4) as usize;
            if inputs == 0 || outputs == 0 {
                return Err(NeuralError::ArchInvalid("zero-sized layer".into()));
            }
            total += (inputs as u64) * (outputs as u64) + outputs as u64;
            if total > MAX_FILE_PARAMS {
                return Err(NeuralError::ArchInvalid(format!("{total} parameters")));
            }
            shapes.push((inputs, outputs));
        }
        let read8 = |inp: &mut R, buf: &mut [u8; 8]| -> Result<f64, NeuralError> {
            inp.read_exact(buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => NeuralError::TruncatedFile,
                _ => NeuralError::Io(e),
            })?;
            Ok(f64::from_le_bytes(*buf))
        };
        let lambda_min = read8(&mut inp, &mut buf8)?;
        let lambda_max = read8(&mut inp, &mut buf8)?;
        let mut layers = Vec::with_capacity(layer_count);
        for (inputs, outputs) in shapes {
            let mut weights = Vec::with_capacity(inputs * outputs);
            for _ in 0..inputs * outputs {
                read4(&mut inp, &mut buf4)?;
                weights.push(f32::from_le_bytes(buf4) as f64);
            }
            let mut biases = Vec::with_capacity(outputs);
            for _ in 0..outputs {
                read4(&mut inp, &mut buf4)?;
                biases.push(f32::from_le_bytes(buf4) as f64);
            }
            layers.push(Layer { inputs, outputs, weights, biases });
        }
        Ok(Self { pe_frequencies: pe, lambda_min, lambda_max, layers })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub step: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch: 4096, step: 1e-3, iterations: 200_000, seed: 0 }
    }
}

pub struct TrainReport {
    /// Batch MSE at every step.
    pub loss_history: Vec<f64>,
}

fn bin_coord(table: &HpbrdfTable, bin: usize) -> [f64; 4] {
    let d = table.dims;
    let h = bin % d.theta_h;
    let rest = bin / d.theta_h;
    let td = rest % d.theta_d;
    let rest = rest / d.theta_d;
    let p = rest % d.phi_d;
    let band = rest / d.phi_d;
    [
        table.grid.start_nm + band as f64 * table.grid.step_nm,
        d.phi_d_of(p),
        d.theta_d_of(td),
        d.theta_h_of(h),
    ]
}

/// Adam on the mean squared error over uniformly sampled filled bins.
/// Deterministic for a fixed config; single threaded.
pub fn train(
    model: &mut MlpModel,
    table: &HpbrdfTable,
    config: &TrainConfig,
) -> Result<TrainReport, NeuralError> {
    if config.batch == 0 || config.iterations == 0 {
        return Err(NeuralError::ArchInvalid("batch and iterations must be nonzero".into()));
    }
    let filled: Vec<usize> = (0..table.dims.bins()).filter(|&b| table.mask[b] == 1).collect();
    if filled.is_empty() {
        return Err(NeuralError::EmptyTable);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut m: Gradients = model
        .layers
        .iter()
        .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
        .collect();
    let mut v = m.clone();
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut history = Vec::with_capacity(config.iterations);

    for step in 0..config.iterations {
        let mut accum: Gradients = model
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
            .collect();
        let mut loss = 0.0;
        for _ in 0..config.batch {
            let bin = filled[rng.gen_range(0..filled.len())];
            let coord = bin_coord(table, bin);
            let predicted = model.forward(coord);
            let mut grad = [0.0; 16];
            for e in 0..16 {
                let target = table.data[bin * 16 + e] as f64;
                let diff = predicted[e] - target;
                loss += diff * diff;
                grad[e] = 2.0 * diff / (16 * config.batch) as f64;
            }
            let sample = model.backward(coord, &grad);
            for (acc, g) in accum.iter_mut().zip(&sample) {
                for (a, x) in acc.0.iter_mut().zip(&g.0) {
                    *a += x;
                }
                for (a, x) in acc.1.iter_mut().zip(&g.1) {
                    *a += x;
                }
            }
        }
        loss /= (16 * config.batch) as f64;
        if !loss.is_finite() {
            return Err(NeuralError::DivergedLoss(step));
        }
        history.push(loss);

        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (layer, ms, vs, gs) in itertools_zip(&mut model.layers, &mut m, &mut v, &accum) {
            update_adam(&mut layer.weights, &mut ms.0, &mut vs.0, &gs.0, config.step, beta1, beta2, eps, c1, c2);
            update_adam(&mut layer.biases, &mut ms.1, &mut vs.1, &gs.1, config.step, beta1, beta2, eps, c1, c2);
        }
    }
    Ok(TrainReport { loss_history: history })
}

// Zips the three per-layer states with the accumulated gradients.
fn itertools_zip<'a>(
    layers: &'a mut [Layer],
    m: &'a mut Gradients,
    v: &'a mut Gradients,
    accum: &'a Gradients,
) -> impl Iterator<
    Item = (
        &'a mut Layer,
        &'a mut (Vec<f64>, Vec<f64>),
        &'a mut (Vec<f64>, Vec<f64>),
        &'a (Vec<f64>, Vec<f64>),
    ),
> {
    layers
        .iter_mut()
        .zip(m.iter_mut())
        .zip(v.iter_mut())
        .zip(accum.iter())
        .map(|(((l, m), v), a)| (l, m, v, a))
}

#[allow(clippy::too_many_arguments)]
fn update_adam(
    params: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    grad: &[f64],
    step: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        params[i] -= step * mhat / (vhat.sqrt() + eps);
    }
}

/// Mean squared error over up to `max_samples` randomly chosen filled bins
/// (all of them when the table is small enough).
pub fn evaluate_mse(
    model: &MlpModel,
    table: &HpbrdfTable,
    max_samples: usize,
    seed: u64,
) -> Result<f64, NeuralError> {
    let filled: Vec<usize> = (0..table.dims.bins()).filter(|&b| table.mask[b] == 1).collect();
    if filled.is_empty() {
        return Err(NeuralError::EmptyTable);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if filled.len() <= max_samples {
        filled
    } else {
        (0..max_samples).map(|_| filled[rng.gen_range(0..filled.len())]).collect()
    };
    let mut total = 0.0;
    for &bin in &chosen {
        let predicted = model.forward(bin_coord(table, bin));
        for e in 0..16 {
            let diff = predicted[e] - table.data[bin * 16 + e] as f64;
            total += diff * diff;
        }
    }
    Ok(total / (16 * chosen.len()) as f64)
}
