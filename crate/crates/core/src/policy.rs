//! Deterministic MLP policies `phi(H, theta)` with exact reverse-mode VJPs.
//!
//! A [`CompositePolicy`] is a list of independent MLP blocks, each reading a
//! selection of channel coordinates and writing a contiguous slice of the
//! action vector. A single global network is a composite with one block; the
//! per-user AWGN policy has one block per user reading only that user's gain.
//!
//! Flat parameter layout: blocks in order; within a block, layers in order;
//! within a layer, the weight matrix row-major (`[out][in]`) then the biases.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    /// `output_scale * sigmoid(z)`
    SigmoidScaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
    pub output_scale: f64,
}

impl MlpSpec {
    /// ReLU hidden layers, scaled-sigmoid output.
    pub fn new(layer_sizes: Vec<usize>, output_scale: f64) -> Result<Self> {
        let spec = MlpSpec {
            layer_sizes,
            hidden_activation: HiddenActivation::Relu,
            output_activation: OutputActivation::SigmoidScaled,
            output_scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::invalid(
                "layer_sizes",
                "need input, at least one hidden layer, and output",
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::invalid("layer_sizes", "layer widths must be positive"));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::invalid("output_scale", "must be a positive finite number"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One MLP reading `inputs` (indices into the channel vector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyBlock {
    pub spec: MlpSpec,
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDescriptor {
    channel_dim: usize,
    blocks: Vec<PolicyBlock>,
}

/// Position of one layer's parameters inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub block: usize,
    pub layer: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub biases: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyDescriptor", into = "PolicyDescriptor")]
pub struct CompositePolicy {
    channel_dim: usize,
    blocks: Vec<PolicyBlock>,
    slots: Vec<Vec<LayerSlot>>,
    output_offsets: Vec<usize>,
    n_params: usize,
    n_outputs: usize,
}

impl TryFrom<PolicyDescriptor> for CompositePolicy {
    type Error = Error;

    fn try_from(d: PolicyDescriptor) -> Result<Self> {
        CompositePolicy::new(d.channel_dim, d.blocks)
    }
}

impl From<CompositePolicy> for PolicyDescriptor {
    fn from(p: CompositePolicy) -> Self {
        PolicyDescriptor {
            channel_dim: p.channel_dim,
            blocks: p.blocks,
        }
    }
}

impl CompositePolicy {
    pub fn new(channel_dim: usize, blocks: Vec<PolicyBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::invalid("policy", "at least one block required"));
        }
        let mut slots = Vec::with_capacity(blocks.len());
        let mut output_offsets = Vec::with_capacity(blocks.len());
        let mut offset = 0;
        let mut n_outputs = 0;
        for (b, block) in blocks.iter().enumerate() {
            block.spec.validate()?;
            check_len("policy block inputs", block.spec.input_dim(), block.inputs.len())?;
            if let Some(&bad) = block.inputs.iter().find(|&&i| i >= channel_dim) {
                return Err(Error::invalid(
                    "inputs",
                    format!("block {b} selects channel index {bad} >= {channel_dim}"),
                ));
            }
            let mut layer_slots = Vec::with_capacity(block.spec.n_layers());
            for (l, w) in block.spec.layer_sizes.windows(2).enumerate() {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                let biases = weights.end..weights.end + fan_out;
                offset = biases.end;
                layer_slots.push(LayerSlot {
                    block: b,
                    layer: l,
                    fan_in,
                    fan_out,
                    weights,
                    biases,
                });
            }
            slots.push(layer_slots);
            output_offsets.push(n_outputs);
            n_outputs += block.spec.output_dim();
        }
        Ok(CompositePolicy {
            channel_dim,
            blocks,
            slots,
            output_offsets,
            n_params: offset,
            n_outputs,
        })
    }

    /// One network reading the full channel vector.
    pub fn single(spec: MlpSpec) -> Result<Self> {
        let dim = spec.input_dim();
        CompositePolicy::new(
            dim,
            vec![PolicyBlock {
                spec,
                inputs: (0..dim).collect(),
            }],
        )
    }

    /// `n_users` copies of a single-input single-output network; user `i`
    /// reads only `H[i]` and drives only action `i`.
    pub fn per_user(spec: MlpSpec, n_users: usize) -> Result<Self> {
        if spec.input_dim() != 1 || spec.output_dim() != 1 {
            return Err(Error::invalid(
                "layer_sizes",
                "per-user networks must be single-input single-output",
            ));
        }
        let blocks = (0..n_users)
            .map(|i| PolicyBlock {
                spec: spec.clone(),
                inputs: vec![i],
            })
            .collect();
        CompositePolicy::new(n_users, blocks)
    }

    pub fn channel_dim(&self) -> usize {
        self.channel_dim
    }

    pub fn action_dim(&self) -> usize {
        self.n_outputs
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn blocks(&self) -> &[PolicyBlock] {
        &self.blocks
    }

    pub fn layout(&self) -> impl Iterator<Item = &LayerSlot> {
        self.slots.iter().flatten()
    }

    /// Flat parameter range owned by block `b`.
    pub fn block_params(&self, b: usize) -> Range<usize> {
        let s = &self.slots[b];
        s[0].weights.start..s.last().unwrap().biases.end
    }

    /// Action range written by block `b`.
    pub fn block_outputs(&self, b: usize) -> Range<usize> {
        let start = self.output_offsets[b];
        start..start + self.blocks[b].spec.output_dim()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        check_len("policy parameters", self.n_params, theta.len())
    }

    pub fn forward(&self, theta: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_with_tape(theta, h)?.output)
    }

    /// Forward pass retaining the activations needed by [`Self::backward`].
    pub fn forward_with_tape(&self, theta: &[f64], h: &[f64]) -> Result<Tape> {
        self.check_theta(theta)?;
        check_len("channel", self.channel_dim, h.len())?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut output = Vec::with_capacity(self.n_outputs);
        for (block, slots) in self.blocks.iter().zip(&self.slots) {
            let input: Vec<f64> = block.inputs.iter().map(|&i| h[i]).collect();
            let mut acts = Vec::with_capacity(slots.len());
            let mut pre = Vec::with_capacity(slots.len());
            let mut a = input;
            for (l, slot) in slots.iter().enumerate() {
                let w = &theta[slot.weights.clone()];
                let b = &theta[slot.biases.clone()];
                let z: Vec<f64> = w
                    .chunks_exact(slot.fan_in)
                    .zip(b)
                    .map(|(row, bias)| bias + dot(row, &a))
                    .collect();
                let next = if l + 1 < slots.len() {
                    z.iter().map(|&v| v.max(0.0)).collect()
                } else {
                    z.iter()
                        .map(|&v| block.spec.output_scale * sigmoid(v))
                        .collect()
                };
                acts.push(a);
                pre.push(z);
                a = next;
            }
            output.extend_from_slice(&a);
            blocks.push(BlockTape { acts, pre });
        }
        Ok(Tape { blocks, output })
    }

    /// Reverse sweep: `grad_theta phi(H, theta)^T cotangent`.
    ///
    /// ReLU's derivative at exactly zero is taken as zero.
    pub fn backward(
        &self,
        theta: &[f64],
        tape: &Tape,
        cotangent: &[f64],
        stats: &mut SweepStats,
    ) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        check_len("cotangent", self.n_outputs, cotangent.len())?;
        check_len("tape", self.blocks.len(), tape.blocks.len())?;
        let mut grad = vec![0.0; self.n_params];
        for (b, (block, slots)) in self.blocks.iter().zip(&self.slots).enumerate() {
            let bt = &tape.blocks[b];
            let outs = self.block_outputs(b);
            let scale = block.spec.output_scale;
            let mut delta: Vec<f64> = cotangent[outs]
                .iter()
                .zip(bt.pre.last().unwrap())
                .map(|(c, &z)| {
                    let s = sigmoid(z);
                    c * scale * s * (1.0 - s)
                })
                .collect();
            for (l, slot) in slots.iter().enumerate().rev() {
                let a_in = &bt.acts[l];
                let gw = &mut grad[slot.weights.clone()];
                for (grow, &d) in gw.chunks_exact_mut(slot.fan_in).zip(&delta) {
                    if d != 0.0 {
                        axpy(d, a_in, grow);
                    }
                }
                grad[slot.biases.clone()].copy_from_slice(&delta);
                stats.mul_adds += (slot.fan_in * slot.fan_out) as u64;
                if l == 0 {
                    break;
                }
                let w = &theta[slot.weights.clone()];
                let mut prev = vec![0.0; slot.fan_in];
                for (row, &d) in w.chunks_exact(slot.fan_in).zip(&delta) {
                    if d != 0.0 {
                        axpy(d, row, &mut prev);
                    }
                }
                stats.mul_adds += (slot.fan_in * slot.fan_out) as u64;
                for (p, &z) in prev.iter_mut().zip(&bt.pre[l - 1]) {
                    if z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        stats.backward_sweeps += 1;
        Ok(grad)
    }

    pub fn vjp(&self, theta: &[f64], h: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        Ok(self.vjp_with_stats(theta, h, cotangent)?.0)
    }

    pub fn vjp_with_stats(
        &self,
        theta: &[f64],
        h: &[f64],
        cotangent: &[f64],
    ) -> Result<(Vec<f64>, SweepStats)> {
        let mut stats = SweepStats::default();
        let tape = self.forward_with_tape(theta, h)?;
        stats.forward_sweeps += 1;
        let g = self.backward(theta, &tape, cotangent, &mut stats)?;
        Ok((g, stats))
    }

    /// Hidden pre-activations for every block and layer (used to detect
    /// ReLU kinks when comparing against finite differences).
    pub fn hidden_preactivations(&self, theta: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        let tape = self.forward_with_tape(theta, h)?;
        Ok(tape
            .blocks
            .iter()
            .flat_map(|bt| bt.pre[..bt.pre.len() - 1].iter().flatten().copied())
            .collect())
    }
}

#[derive(Debug, Clone)]
struct BlockTape {
    /// Input to each layer.
    acts: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

/// Activations from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    blocks: Vec<BlockTape>,
    pub output: Vec<f64>,
}

/// Operation counters for a VJP.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    pub forward_sweeps: u32,
    pub backward_sweeps: u32,
    pub mul_adds: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitScheme {
    Zeros,
    Constant { value: f64 },
    /// Weights and biases `~ gain * U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    UniformFanIn {
        #[serde(default = "unit_gain")]
        gain: f64,
    },
}

fn unit_gain() -> f64 {
    1.0
}

/// Flat parameter vector bound to its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: Arc<CompositePolicy>,
    theta: Vec<f64>,
}

impl PolicyParams {
    pub fn init<R: Rng + ?Sized>(
        arch: Arc<CompositePolicy>,
        scheme: InitScheme,
        rng: &mut R,
    ) -> Self {
        let n = arch.n_params();
        let theta = match scheme {
            InitScheme::Zeros => vec![0.0; n],
            InitScheme::Constant { value } => vec![value; n],
            InitScheme::UniformFanIn { gain } => {
                let mut theta = vec![0.0; n];
                for slot in arch.layout() {
                    let bound = gain / (slot.fan_in as f64).sqrt();
                    for t in &mut theta[slot.weights.start..slot.biases.end] {
                        *t = rng.random_range(-bound..bound);
                    }
                }
                theta
            }
        };
        PolicyParams { arch, theta }
    }

    pub fn from_flat(arch: Arc<CompositePolicy>, theta: Vec<f64>) -> Result<Self> {
        check_len("policy parameters", arch.n_params(), theta.len())?;
        Ok(PolicyParams { arch, theta })
    }

    /// Per-layer `(weights [out][in] row-major, biases)` for every block.
    pub fn unflatten(&self) -> Vec<Vec<(Vec<f64>, Vec<f64>)>> {
        self.arch
            .slots
            .iter()
            .map(|layers| {
                layers
                    .iter()
                    .map(|s| {
                        (
                            self.theta[s.weights.clone()].to_vec(),
                            self.theta[s.biases.clone()].to_vec(),
                        )
                    })
                    .collect()
            })
            .collect()
    }

    pub fn from_layers(
        arch: Arc<CompositePolicy>,
        layers: &[Vec<(Vec<f64>, Vec<f64>)>],
    ) -> Result<Self> {
        let mut theta = vec![0.0; arch.n_params()];
        check_len("policy blocks", arch.slots.len(), layers.len())?;
        for (slots, block) in arch.slots.iter().zip(layers) {
            check_len("policy layers", slots.len(), block.len())?;
            for (s, (w, b)) in slots.iter().zip(block) {
                check_len("layer weights", s.weights.len(), w.len())?;
                check_len("layer biases", s.biases.len(), b.len())?;
                theta[s.weights.clone()].copy_from_slice(w);
                theta[s.biases.clone()].copy_from_slice(b);
            }
        }
        Ok(PolicyParams { arch, theta })
    }

    pub fn arch(&self) -> &Arc<CompositePolicy> {
        &self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn forward(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.arch.forward(&self.theta, h)
    }

    pub fn vjp(&self, h: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        self.arch.vjp(&self.theta, h, cotangent)
    }

    /// `theta + mu * u` on the same architecture.
    pub fn perturb(&self, mu: f64, u: &[f64]) -> Result<PolicyParams> {
        check_len("parameter perturbation", self.theta.len(), u.len())?;
        let mut out = self.clone();
        axpy(mu, u, &mut out.theta);
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|t| t.is_finite())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            n_params: self.theta.len(),
            policy: (*self.arch).clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(8 + json.len() + 8 * self.theta.len());
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for t in &self.theta {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 {
            return Err(Error::Checkpoint("truncated header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes
            .get(8..8 + header_len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let data = &bytes[8 + header_len..];
        if data.len() != 8 * header.n_params || header.n_params != header.policy.n_params() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {} bytes",
                header.n_params,
                data.len()
            )));
        }
        let theta = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        PolicyParams::from_flat(Arc::new(header.policy), theta)
    }
}

const CHECKPOINT_FORMAT: &str = "pdzdpg-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    version: u32,
    n_params: usize,
    policy: CompositePolicy,
}

/// Logistic function without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    if z >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
