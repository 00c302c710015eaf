//! Layer-level fusion network, single-modality baselines, local training
//! and evaluation.
//!
//! Every enabled modality feeds its own branch; branch outputs are
//! concatenated (tabular, then visual, then volume) and a single head
//! produces the class logits.
//!
//! ```text
//! tabular  9 → dense 32 → relu → dense 32 → relu ───────────────┐
//! visual   1×H×W → 3×[conv3² · bn · relu · pool2 · dropout] → flatten ─┼─ concat → head → logits
//! volume   1×D×H×W → 3×[conv3³ · bn · relu · pool2³ · dropout] → flatten ┘
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

#[allow(unused_imports)]
use num_traits::Float;

use crate::data::{StructureRecord, TABULAR_FEATURES};
use crate::error::{Error, Result};
use crate::loss::{argmax, softmax_cross_entropy};
use crate::nn::conv::{kernel_dims, SpatialRank, KERNEL};
use crate::nn::{concat, split, BatchNorm, Cache, Conv, Dense, Dropout, Layer, MaxPool, Mode, Sequential};
use crate::optim::{AdamConfig, AdamState};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use crate::NUM_CLASSES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Tabular,
    Visual,
    Volume,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Tabular, Modality::Visual, Modality::Volume];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Tabular => "tabular",
            Modality::Visual => "visual",
            Modality::Volume => "volume",
        }
    }
}

/// A set of enabled modalities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Modalities {
    pub tabular: bool,
    pub visual: bool,
    pub volume: bool,
}

impl Modalities {
    pub const TABULAR: Self = Modalities {
        tabular: true,
        visual: false,
        volume: false,
    };
    pub const VISUAL: Self = Modalities {
        tabular: false,
        visual: true,
        volume: false,
    };
    pub const VOLUME: Self = Modalities {
        tabular: false,
        visual: false,
        volume: true,
    };
    pub const TABULAR_VISUAL: Self = Modalities {
        tabular: true,
        visual: true,
        volume: false,
    };
    pub const TABULAR_VOLUME: Self = Modalities {
        tabular: true,
        visual: false,
        volume: true,
    };

    pub fn contains(self, m: Modality) -> bool {
        match m {
            Modality::Tabular => self.tabular,
            Modality::Visual => self.visual,
            Modality::Volume => self.volume,
        }
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |&m| self.contains(m))
    }

    pub fn count(self) -> usize {
        self.iter().count()
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Modality::name).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for Modalities {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = Modalities::default();
        for part in s.split(['+', ',']) {
            match part.trim().to_ascii_lowercase().as_str() {
                "tabular" => m.tabular = true,
                "visual" | "slice" => m.visual = true,
                "volume" | "volumes" => m.volume = true,
                other => return Err(Error::Config(format!("unknown modality '{other}'"))),
            }
        }
        Ok(m)
    }
}

/// Architecture description; the parameter layout is a pure function of it.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub modalities: Modalities,
    pub tabular_features: usize,
    pub tabular_widths: Vec<usize>,
    pub conv_channels: Vec<usize>,
    /// Hidden dense layer before the output (single-modality CNN baseline).
    pub head_hidden: Option<usize>,
    pub classes: usize,
    pub slice_hw: [usize; 2],
    pub volume_dhw: [usize; 3],
    pub dropout: f64,
}

impl NetworkSpec {
    /// Fusion network over the given modalities at full input size.
    pub fn fusion(modalities: Modalities) -> Self {
        NetworkSpec {
            modalities,
            tabular_features: TABULAR_FEATURES,
            tabular_widths: vec![32, 32],
            conv_channels: vec![8, 16, 32],
            head_hidden: None,
            classes: NUM_CLASSES,
            slice_hw: [64, 64],
            volume_dhw: [32, 64, 64],
            dropout: crate::nn::dropout::DEFAULT_RATE,
        }
    }

    /// Feed-forward baseline: the tabular branch plus the output layer.
    pub fn ffnn() -> Self {
        Self::fusion(Modalities::TABULAR)
    }

    /// Convolutional baseline: one image branch, a hidden dense layer, output.
    pub fn cnn(modality: Modality) -> Result<Self> {
        let m = match modality {
            Modality::Visual => Modalities::VISUAL,
            Modality::Volume => Modalities::VOLUME,
            Modality::Tabular => return Err(Error::Config("the CNN baseline needs an image modality".into())),
        };
        Ok(NetworkSpec {
            head_hidden: Some(32),
            ..Self::fusion(m)
        })
    }

    /// Baseline for a single modality, fusion network otherwise.
    pub fn for_modalities(m: Modalities) -> Result<Self> {
        match (m.count(), m.tabular) {
            (0, _) => Err(Error::Config("at least one modality must be enabled".into())),
            (1, true) => Ok(Self::ffnn()),
            (1, false) => Self::cnn(if m.visual { Modality::Visual } else { Modality::Volume }),
            _ => Ok(Self::fusion(m)),
        }
    }

    pub fn with_input_dims(mut self, slice_hw: [usize; 2], volume_dhw: [usize; 3]) -> Self {
        self.slice_hw = slice_hw;
        self.volume_dhw = volume_dhw;
        self
    }

    fn pool_factor(&self) -> usize {
        1 << self.conv_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.count() == 0 {
            return Err(Error::Config("at least one modality must be enabled".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        crate::nn::dropout::check_rate(self.dropout)?;
        if self.modalities.tabular && self.tabular_features == 0 {
            return Err(Error::Config("tabular branch needs at least one feature".into()));
        }
        let f = self.pool_factor();
        let image = self.modalities.visual || self.modalities.volume;
        if image && self.conv_channels.is_empty() {
            return Err(Error::Config("image branches need at least one conv block".into()));
        }
        if self.modalities.visual && self.slice_hw.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Config(format!(
                "slice dims {:?} must be divisible by {f}",
                self.slice_hw
            )));
        }
        if self.modalities.volume && self.volume_dhw.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Config(format!(
                "volume dims {:?} must be divisible by {f}",
                self.volume_dhw
            )));
        }
        Ok(())
    }

    /// Output width of a branch after flattening.
    pub fn branch_width(&self, m: Modality) -> usize {
        let f = self.pool_factor();
        let ch = self.conv_channels.last().copied().unwrap_or(0);
        match m {
            Modality::Tabular => self.tabular_widths.last().copied().unwrap_or(self.tabular_features),
            Modality::Visual => ch * self.slice_hw.iter().map(|d| d / f).product::<usize>(),
            Modality::Volume => ch * self.volume_dhw.iter().map(|d| d / f).product::<usize>(),
        }
    }

    pub fn fusion_width(&self) -> usize {
        self.modalities.iter().map(|m| self.branch_width(m)).sum()
    }
}

/// Ordered, named parameter and buffer tensors exchanged between the
/// orchestrator and the centres.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T = f32> {
    pub entries: Vec<(String, Tensor<T>)>,
}

/// Batch-norm running statistics are buffers: they travel with the weights
/// but are never touched by an optimiser.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<T: Scalar> ModelWeights<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total scalar count, buffers included.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names, order and shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.dims() == tb.dims())
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::shape(
                "weights layout",
                &[self.entries.len()],
                &[other.entries.len()],
            ));
        }
        for ((a, ta), (b, tb)) in self.entries.iter().zip(&other.entries) {
            if a != b {
                return Err(Error::Protocol(format!("weight entry '{b}' where '{a}' was expected")));
            }
            if ta.dims() != tb.dims() {
                return Err(Error::shape("weight entry", ta.dims(), tb.dims()));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

/// Inputs for one mini-batch, stacked per modality.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub tabular: Option<Tensor<T>>,
    pub visual: Option<Tensor<T>>,
    pub volume: Option<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_records(records: &[&StructureRecord], spec: &NetworkSpec) -> Result<Self> {
        let b = records.len();
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        let m = spec.modalities;
        let tabular = if m.tabular {
            let data = records
                .iter()
                .flat_map(|r| r.tabular.iter().map(|&v| T::from_f64(v)))
                .collect();
            Some(Tensor::new(vec![b, spec.tabular_features], data)?)
        } else {
            None
        };
        let image = |pick: fn(&StructureRecord) -> Option<&Tensor<f32>>, dims: &[usize], what: &str| {
            let mut data = Vec::with_capacity(b * dims.iter().product::<usize>());
            for r in records {
                let t = pick(r)
                    .ok_or_else(|| Error::Config(format!("record of patient {} has no {what} input", r.patient_id)))?;
                if t.dims() != dims {
                    return Err(Error::shape(
                        if what == "slice" { "slice input" } else { "volume input" },
                        t.dims(),
                        dims,
                    ));
                }
                data.extend(t.data().iter().map(|&v| T::from_f64(v as f64)));
            }
            let mut full = vec![b, 1];
            full.extend_from_slice(dims);
            Tensor::new(full, data)
        };
        let visual = if m.visual {
            Some(image(|r| r.slice.as_ref(), &spec.slice_hw, "slice")?)
        } else {
            None
        };
        let volume = if m.volume {
            Some(image(|r| r.volume.as_ref(), &spec.volume_dhw, "volume")?)
        } else {
            None
        };
        let labels = records.iter().map(|r| r.label).collect();
        Ok(Batch {
            tabular,
            visual,
            volume,
            labels,
        })
    }

    fn input(&self, m: Modality) -> Option<&Tensor<T>> {
        match m {
            Modality::Tabular => self.tabular.as_ref(),
            Modality::Visual => self.visual.as_ref(),
            Modality::Volume => self.volume.as_ref(),
        }
    }
}

/// Where to read activations for embedding analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    /// Output of the tabular branch.
    TabularOut,
    /// Flattened output of the image branch (volume if present, else visual).
    ConvOut,
    /// Input to the output layer.
    FusionHidden,
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular_out" | "tabular" => Ok(Tap::TabularOut),
            "conv_out" | "conv" => Ok(Tap::ConvOut),
            "fusion_hidden" | "hidden" => Ok(Tap::FusionHidden),
            other => Err(Error::Config(format!("unknown tap point '{other}'"))),
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tap::TabularOut => "tabular_out",
            Tap::ConvOut => "conv_out",
            Tap::FusionHidden => "fusion_hidden",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub branches: Vec<(Modality, Sequential<T>)>,
    pub head: Sequential<T>,
}

pub struct ForwardCache<T> {
    branches: Vec<Vec<Cache<T>>>,
    head: Vec<Cache<T>>,
    widths: Vec<usize>,
}

fn he_uniform<T: Scalar>(dims: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut r = rng::rng(seed);
    Tensor::from_fn(dims, |_| T::from_f64(r.random_range(-limit..limit)))
}

fn dense<T: Scalar>(inp: usize, out: usize, seed: u64) -> Layer<T> {
    Layer::Dense(Dense {
        weight: he_uniform(&[inp, out], inp, seed),
        bias: Tensor::zeros(&[out]),
    })
}

impl<T: Scalar> Network<T> {
    /// Build with He-uniform weights, zero biases, unit gamma / zero beta.
    pub fn build(spec: &NetworkSpec, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut tensor_seed = 0u64;
        let mut next_seed = || {
            tensor_seed += 1;
            rng::derive(init_seed, tensor_seed)
        };
        let mut branches = Vec::new();
        for m in spec.modalities.iter() {
            let mut seq = Sequential::default();
            match m {
                Modality::Tabular => {
                    let mut inp = spec.tabular_features;
                    for (i, &w) in spec.tabular_widths.iter().enumerate() {
                        seq.push(format!("tabular.dense{i}"), dense(inp, w, next_seed()));
                        seq.push(format!("tabular.relu{i}"), Layer::Relu);
                        inp = w;
                    }
                }
                Modality::Visual | Modality::Volume => {
                    let (rank, window) = if m == Modality::Visual {
                        (SpatialRank::Two, vec![2, 2])
                    } else {
                        (SpatialRank::Three, vec![2, 2, 2])
                    };
                    let taps = KERNEL.pow(rank.axes() as u32);
                    let name = m.name();
                    let mut c_in = 1;
                    for (i, &c) in spec.conv_channels.iter().enumerate() {
                        let dims = kernel_dims(rank, c, c_in);
                        seq.push(
                            format!("{name}.conv{i}"),
                            Layer::Conv(Conv {
                                weight: he_uniform(&dims, c_in * taps, next_seed()),
                                bias: Tensor::zeros(&[c]),
                                rank,
                            }),
                        );
                        seq.push(format!("{name}.bn{i}"), Layer::BatchNorm(BatchNorm::new(c)?));
                        seq.push(format!("{name}.relu{i}"), Layer::Relu);
                        seq.push(
                            format!("{name}.pool{i}"),
                            Layer::MaxPool(MaxPool {
                                window: window.clone(),
                                rank,
                            }),
                        );
                        seq.push(
                            format!("{name}.drop{i}"),
                            Layer::Dropout(Dropout { rate: spec.dropout }),
                        );
                        c_in = c;
                    }
                    seq.push(format!("{name}.flatten"), Layer::Flatten);
                }
            }
            branches.push((m, seq));
        }
        let mut head = Sequential::default();
        let mut inp = spec.fusion_width();
        if let Some(hidden) = spec.head_hidden {
            head.push("head.hidden", dense(inp, hidden, next_seed()));
            head.push("head.relu", Layer::Relu);
            inp = hidden;
        }
        head.push("head.out", dense(inp, spec.classes, next_seed()));
        Ok(Network {
            spec: spec.clone(),
            branches,
            head,
        })
    }

    pub fn from_weights(spec: &NetworkSpec, weights: &ModelWeights<T>) -> Result<Self> {
        let mut net = Self::build(spec, 0)?;
        net.load(weights)?;
        Ok(net)
    }

    fn seqs(&self) -> impl Iterator<Item = &Sequential<T>> {
        self.branches.iter().map(|(_, s)| s).chain(core::iter::once(&self.head))
    }

    pub fn weights(&self) -> ModelWeights<T> {
        ModelWeights {
            entries: self
                .seqs()
                .flat_map(|s| s.state().into_iter().map(|(n, t)| (n, t.clone())))
                .collect(),
        }
    }

    pub fn load(&mut self, weights: &ModelWeights<T>) -> Result<()> {
        self.weights().check_layout(weights)?;
        let slots = self
            .branches
            .iter_mut()
            .flat_map(|(_, s)| s.state_mut())
            .chain(self.head.state_mut());
        for (slot, (_, t)) in slots.zip(&weights.entries) {
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        self.seqs()
            .flat_map(|s| s.params().into_iter().map(|(n, _)| n))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for (_, s) in self.branches.iter_mut() {
            out.extend(s.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn has_batchnorm(&self) -> bool {
        self.branches.iter().any(|(_, s)| s.has_batchnorm())
    }

    fn run_branches(
        &mut self,
        batch: &Batch<T>,
        mode: Mode,
        seed: u64,
    ) -> Result<(Vec<Tensor<T>>, Vec<Vec<Cache<T>>>)> {
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut caches = Vec::with_capacity(self.branches.len());
        for (i, (m, seq)) in self.branches.iter_mut().enumerate() {
            let x = batch
                .input(*m)
                .ok_or_else(|| Error::Config(format!("batch lacks the {} input", m.name())))?;
            let (y, c) = seq.forward(x.clone(), mode, rng::derive(seed, 100 + i as u64))?;
            outs.push(y);
            caches.push(c);
        }
        Ok((outs, caches))
    }

    /// Logits for the batch plus everything backward needs.
    pub fn forward(&mut self, batch: &Batch<T>, mode: Mode, seed: u64) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (outs, branch_caches) = self.run_branches(batch, mode, seed)?;
        let widths = outs.iter().map(|t| t.dims()[1]).collect();
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        let fused = concat(&refs)?;
        let (logits, head_caches) = self.head.forward(fused, mode, rng::derive(seed, 99))?;
        Ok((
            logits,
            ForwardCache {
                branches: branch_caches,
                head: head_caches,
                widths,
            },
        ))
    }

    /// Parameter gradients in [`Network::params_mut`] order.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (g_fused, head_grads) = self.head.backward(&cache.head, grad_logits)?;
        let parts = split(&g_fused, &cache.widths)?;
        let mut grads = Vec::new();
        for (((_, seq), caches), g) in self.branches.iter().zip(&cache.branches).zip(parts) {
            let (_, gp) = seq.backward(caches, g)?;
            grads.extend(gp);
        }
        grads.extend(head_grads);
        Ok(grads)
    }

    /// Inference-mode activations at a tap point, one row per batch item.
    pub fn activations(&mut self, batch: &Batch<T>, tap: Tap) -> Result<Tensor<T>> {
        let find = |ms: &[Modality], branches: &[(Modality, Sequential<T>)]| {
            ms.iter().find_map(|m| branches.iter().position(|(b, _)| b == m))
        };
        match tap {
            Tap::TabularOut | Tap::ConvOut => {
                let wanted: &[Modality] = if tap == Tap::TabularOut {
                    &[Modality::Tabular]
                } else {
                    &[Modality::Volume, Modality::Visual]
                };
                let i = find(wanted, &self.branches)
                    .ok_or_else(|| Error::Config(format!("tap point {tap} is absent from this network")))?;
                let (m, seq) = &mut self.branches[i];
                let x = batch
                    .input(*m)
                    .ok_or_else(|| Error::Config(format!("batch lacks the {} input", m.name())))?;
                Ok(seq.forward(x.clone(), Mode::Infer, 0)?.0)
            }
            Tap::FusionHidden => {
                let (outs, _) = self.run_branches(batch, Mode::Infer, 0)?;
                let refs: Vec<&Tensor<T>> = outs.iter().collect();
                let fused = concat(&refs)?;
                let n = self.head.layers.len() - 1;
                Ok(self.head.forward_until(fused, Mode::Infer, 0, n)?.0)
            }
        }
    }
}

/// Build a network and return it with its initial weights.
pub fn build_network<T: Scalar>(spec: &NetworkSpec, init_seed: u64) -> Result<(Network<T>, ModelWeights<T>)> {
    let net = Network::build(spec, init_seed)?;
    let w = net.weights();
    Ok((net, w))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 16,
        }
    }
}

/// Mini-batch index lists for one seeded pass. A trailing batch of one is
/// folded into its predecessor when batch norm needs at least two samples.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, min_batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < min_batch) {
        let tail = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    batches
}

/// One full seeded pass over `records` with a fresh Adam state.
/// Returns the updated weights and the mean per-batch loss.
pub fn train_local_epoch<T: Scalar>(
    weights: &ModelWeights<T>,
    records: &[StructureRecord],
    spec: &NetworkSpec,
    epoch_seed: u64,
    cfg: &TrainConfig,
) -> Result<(ModelWeights<T>, f64)> {
    if records.is_empty() {
        return Err(Error::Empty("training shard"));
    }
    let mut net = Network::from_weights(spec, weights)?;
    let min_batch = if net.has_batchnorm() { 2 } else { 1 };
    let batches = epoch_batches(records.len(), cfg.batch_size, epoch_seed, min_batch);
    if batches.iter().any(|b| b.len() < min_batch) {
        return Err(Error::Config(
            "a single-record shard cannot train a network with batch norm".into(),
        ));
    }
    let mut adam = {
        let params = net.params_mut();
        AdamState::new(cfg.adam, params.into_iter().map(|p| &*p))
    };
    let mut loss_sum = 0.0;
    for (bi, idx) in batches.iter().enumerate() {
        let picked: Vec<&StructureRecord> = idx.iter().map(|&i| &records[i]).collect();
        let batch = Batch::from_records(&picked, spec)?;
        let (logits, cache) = net.forward(&batch, Mode::Train, rng::derive(epoch_seed, bi as u64 + 1))?;
        let ce = softmax_cross_entropy(&logits, &batch.labels)?;
        loss_sum += ce.loss.as_f64();
        let grads = net.backward(&cache, ce.grad)?;
        adam.step(&mut net.params_mut(), &grads)?;
    }
    Ok((net.weights(), loss_sum / batches.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub n: usize,
}

const EVAL_BATCH: usize = 32;

/// Predicted class per record (inference mode; ties to the lowest class).
pub fn predict<T: Scalar>(
    weights: &ModelWeights<T>,
    records: &[StructureRecord],
    spec: &NetworkSpec,
) -> Result<Vec<usize>> {
    Ok(score(weights, records, spec)?.into_iter().map(|(p, _)| p).collect())
}

fn score<T: Scalar>(
    weights: &ModelWeights<T>,
    records: &[StructureRecord],
    spec: &NetworkSpec,
) -> Result<Vec<(usize, f64)>> {
    let mut net = Network::from_weights(spec, weights)?;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let refs: Vec<&StructureRecord> = chunk.iter().collect();
        let batch = Batch::from_records(&refs, spec)?;
        let (logits, _) = net.forward(&batch, Mode::Infer, 0)?;
        let k = spec.classes;
        for (i, row) in logits.data().chunks_exact(k).enumerate() {
            let one = Tensor::new(vec![1, k], row.to_vec())?;
            let ce = softmax_cross_entropy(&one, &batch.labels[i..=i])?;
            out.push((argmax(ce.probs.data()), ce.loss.as_f64()));
        }
    }
    Ok(out)
}

/// Categorical accuracy and mean loss over `records`. Per-record losses are
/// summed in sorted order so the result does not depend on record order.
pub fn evaluate<T: Scalar>(
    weights: &ModelWeights<T>,
    records: &[StructureRecord],
    spec: &NetworkSpec,
) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let scored = score(weights, records, spec)?;
    let correct = scored.iter().zip(records).filter(|((p, _), r)| *p == r.label).count();
    let mut losses: Vec<f64> = scored.iter().map(|(_, l)| *l).collect();
    losses.sort_by(f64::total_cmp);
    let n = records.len();
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        loss: losses.iter().sum::<f64>() / n as f64,
        n,
    })
}

/// Inference activations at `tap`, as an `n×d` matrix.
pub fn layer_activations<T: Scalar>(
    weights: &ModelWeights<T>,
    records: &[StructureRecord],
    spec: &NetworkSpec,
    tap: Tap,
) -> Result<Tensor<T>> {
    if records.is_empty() {
        return Err(Error::Empty("activation records"));
    }
    let mut net = Network::from_weights(spec, weights)?;
    let mut rows: Vec<T> = Vec::new();
    let mut width = 0;
    for chunk in records.chunks(EVAL_BATCH) {
        let refs: Vec<&StructureRecord> = chunk.iter().collect();
        let batch = Batch::from_records(&refs, spec)?;
        let a = net.activations(&batch, tap)?;
        width = a.item_len();
        rows.extend_from_slice(a.data());
    }
    Tensor::new(vec![records.len(), width], rows)
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match (self.modalities.count(), self.head_hidden) {
            (1, Some(_)) => "cnn",
            (1, None) if self.modalities.tabular => "ffnn",
            _ => "fusion",
        };
        write!(f, "{kind}[{}]", self.modalities)
    }
}

impl NetworkSpec {
    pub fn describe(&self) -> String {
        self.to_string()
    }
}
