//! The power-allocation network.
//!
//! A fully connected network with `tanh` hidden layers maps the combined
//! channels, QoS requirements and path losses to `K + 1` logits. A softmax
//! over all logits scaled by `P_max` gives the per-user powers; the last
//! (slack) share is left unallocated, so the total stays strictly below the
//! budget for any finite logits.
//!
//! Input layout for `K` users (slot order) and `M` antennas:
//!
//! ```text
//! [ re h_0[0], im h_0[0], ..., re h_0[M-1], im h_0[M-1],   // 2M per user
//!   ...,
//!   qos_0 / 1e6, ..., qos_{K-1} / 1e6,                      // Mbit/s
//!   log10 PL_0, ..., log10 PL_{K-1} ]
//! ```
//!
//! Model file (`RNM1`): the magic bytes, the layer count and layer widths as
//! little-endian `u32`, every layer's weight matrix (row-major, one row per
//! output unit) followed by its bias as little-endian `f64`, and finally the
//! wrapping byte sum of everything before it as a little-endian `u64`.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::noma::PowerAllocation;
use crate::seeding;
use crate::tape::{ComplexVar, Tape, Var};

pub const MODEL_MAGIC: &[u8; 4] = b"RNM1";
pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];

pub fn input_dim(users: usize, antennas: usize) -> usize {
    2 * users * antennas + 2 * users
}

/// `[input, hidden..., users + 1]`.
pub fn layer_dims(users: usize, antennas: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim(users, antennas));
    dims.extend_from_slice(hidden);
    dims.push(users + 1);
    dims
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major, `outputs` rows of `inputs` entries.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

impl NetworkWeights {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::DimensionMismatch(format!("invalid layer widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                inputs: w[0],
                outputs: w[1],
                weights: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(NetworkWeights {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn expect_dims(&self, dims: &[usize]) -> Result<()> {
        if self.dims != dims {
            return Err(Error::DimensionMismatch(format!(
                "model has layer widths {:?}, expected {dims:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// Plain forward pass without a tape.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.dims[0], "input width");
        let last = self.layers.len() - 1;
        let mut x = input.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut y: Vec<f64> = l
                .weights
                .chunks_exact(l.inputs)
                .zip(&l.bias)
                .map(|(row, b)| b + row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>())
                .collect();
            if i != last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            x = y;
        }
        x
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 8 * self.num_params() + 8);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let checksum = byte_sum(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::FormatVersionMismatch("missing RNM1 header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if stored != byte_sum(body) {
            return Err(Error::FormatVersionMismatch("checksum mismatch (truncated or corrupted file)".into()));
        }
        let read_u32 = |at: usize| -> Option<usize> {
            body.get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        };
        let count = read_u32(4).ok_or_else(|| Error::FormatVersionMismatch("truncated header".into()))?;
        let mut dims = Vec::with_capacity(count.min(64));
        for i in 0..count {
            dims.push(read_u32(8 + 4 * i).ok_or_else(|| Error::DimensionMismatch(format!("header declares {count} layers but ends early")))?);
        }
        let mut weights = Self::zeros(&dims)?;
        let payload = &body[8 + 4 * count..];
        if payload.len() != 8 * weights.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "layer widths {dims:?} need {} parameters, file holds {} bytes of them",
                weights.num_params(),
                payload.len()
            )));
        }
        for (p, chunk) in weights.params_mut().zip(payload.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        Ok(weights)
    }
}

fn byte_sum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

pub fn save_weights(weights: &NetworkWeights, path: impl AsRef<Path>) -> Result<()> {
    weights.save(path)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkWeights> {
    NetworkWeights::load(path)
}

/// Glorot-uniform matrices, zero biases.
pub fn init_weights(dims: &[usize], seed: u64) -> Result<NetworkWeights> {
    let mut weights = NetworkWeights::zeros(dims)?;
    let mut rng = seeding::rng(seed);
    for l in weights.layers_mut() {
        let a = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
        for w in &mut l.weights {
            *w = rng.random_range(-a..=a);
        }
    }
    Ok(weights)
}

/// Flattens channels (slot order), QoS and path loss per the module layout.
pub fn encode_inputs(h: &[Vec<Complex64>], qos: &[f64], path_loss: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(h.iter().map(|v| 2 * v.len()).sum::<usize>() + 2 * qos.len());
    for hk in h {
        for z in hk {
            out.push(z.re);
            out.push(z.im);
        }
    }
    out.extend(qos.iter().map(|q| q / 1e6));
    out.extend(path_loss.iter().map(|l| l.log10()));
    out
}

/// Tape version of [`encode_inputs`]; channel entries are used as-is so the
/// encoding stays differentiable in them.
pub fn encode_inputs_on_tape(tape: &mut Tape, h: &[Vec<ComplexVar>], qos: &[f64], path_loss: &[f64]) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(h.iter().map(|v| 2 * v.len()).sum::<usize>() + 2 * qos.len());
    for hk in h {
        for z in hk {
            out.push(z.re);
            out.push(z.im);
        }
    }
    for q in qos {
        out.push(tape.constant(q / 1e6)?);
    }
    for l in path_loss {
        out.push(tape.constant(l.log10())?);
    }
    Ok(out)
}

/// Network parameters loaded as tape leaves.
pub struct TapeNetwork {
    dims: Vec<usize>,
    params: Vec<Var>,
}

impl TapeNetwork {
    pub fn load(tape: &mut Tape, weights: &NetworkWeights) -> Result<Self> {
        Ok(TapeNetwork {
            dims: weights.dims().to_vec(),
            params: tape.constants(&weights.params())?,
        })
    }

    /// Leaves in [`NetworkWeights::params`] order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn forward(&self, tape: &mut Tape, input: &[Var]) -> Result<Vec<Var>> {
        assert_eq!(input.len(), self.dims[0], "input width");
        let layers = self.dims.len() - 1;
        let mut x = input.to_vec();
        let mut offset = 0;
        for (i, w) in self.dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let bias = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut y = Vec::with_capacity(fan_out);
            for (row, &b) in weights.chunks_exact(fan_in).zip(bias) {
                let mut acc = b;
                for (&wv, &xv) in row.iter().zip(&x) {
                    let t = tape.mul(wv, xv)?;
                    acc = tape.add(acc, t)?;
                }
                y.push(if i + 1 < layers { tape.tanh(acc)? } else { acc });
            }
            x = y;
        }
        Ok(x)
    }
}

/// Fraction of the budget the softmax distributes. Without it the rounded
/// sum of the user shares reaches `p_max` once the slack share underflows.
pub const BUDGET_SHARE: f64 = 1.0 - 1.0 / (1u64 << 40) as f64;

/// Softmax share of `BUDGET_SHARE * p_max` for the first `K` of `K + 1` logits.
pub fn map_to_power(logits: &[f64], p_max: f64) -> PowerAllocation {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
    let total: f64 = e.iter().sum();
    let budget = p_max * BUDGET_SHARE;
    PowerAllocation(e[..e.len() - 1].iter().map(|v| budget * v / total).collect())
}

pub fn map_to_power_on_tape(tape: &mut Tape, logits: &[Var], p_max: f64) -> Result<Vec<Var>> {
    let top = logits.iter().map(|&z| tape.value(z)).fold(f64::NEG_INFINITY, f64::max);
    // the shift is a constant: softmax is invariant to it, so gradients are exact
    let shift = tape.constant(top)?;
    let e = logits
        .iter()
        .map(|&z| {
            let d = tape.sub(z, shift)?;
            tape.exp(d)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = tape.sum(&e)?;
    let scale = tape.constant(p_max * BUDGET_SHARE)?;
    e[..e.len() - 1]
        .iter()
        .map(|&v| {
            let share = tape.div(v, total)?;
            tape.mul(share, scale)
        })
        .collect()
}
