//! Server-side aggregation: FedAvg and the adaptive strategies acting on the
//! pseudo-gradient, plus sample-weighted metric aggregation.
//!
//! All arithmetic happens in `f64` and client contributions are summed in
//! centre-id order, so the result does not depend on response arrival order.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::{is_buffer, ModelWeights};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Strategy {
    #[default]
    FedAvg,
    FedOpt,
    FedAdam,
    FedYogi,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::FedAvg, Strategy::FedOpt, Strategy::FedAdam, Strategy::FedYogi];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAvg => "FedAvg",
            Strategy::FedOpt => "FedOpt",
            Strategy::FedAdam => "FedAdam",
            Strategy::FedYogi => "FedYogi",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClientWeighting {
    #[default]
    BySamples,
    Uniform,
}

impl FromStr for ClientWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by_samples" | "samples" => Ok(ClientWeighting::BySamples),
            "uniform" => Ok(ClientWeighting::Uniform),
            other => Err(Error::Config(format!("unknown client weighting '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServerParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
}

impl Default for ServerParams {
    fn default() -> Self {
        ServerParams {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
        }
    }
}

impl ServerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("server lr must be positive, got {}", self.lr)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate<T = f32> {
    pub centre_id: String,
    pub weights: ModelWeights<T>,
    pub n_samples: usize,
}

fn ordered<T>(updates: &[ClientUpdate<T>]) -> Result<Vec<&ClientUpdate<T>>> {
    if updates.is_empty() {
        return Err(Error::Empty("client updates"));
    }
    let mut v: Vec<&ClientUpdate<T>> = updates.iter().collect();
    v.sort_by(|a, b| a.centre_id.cmp(&b.centre_id));
    if v.windows(2).any(|w| w[0].centre_id == w[1].centre_id) {
        return Err(Error::Protocol("duplicate centre in one round".into()));
    }
    Ok(v)
}

fn factors<T>(updates: &[&ClientUpdate<T>], weighting: ClientWeighting) -> Result<Vec<f64>> {
    match weighting {
        ClientWeighting::Uniform => Ok(updates.iter().map(|_| 1.0 / updates.len() as f64).collect()),
        ClientWeighting::BySamples => {
            let total: usize = updates.iter().map(|u| u.n_samples).sum();
            if total == 0 {
                return Err(Error::Empty("client samples"));
            }
            Ok(updates.iter().map(|u| u.n_samples as f64 / total as f64).collect())
        }
    }
}

/// Weighted mean of every entry, in `f64`, written as the first client's
/// weights plus weighted differences so identical clients reproduce their
/// weights exactly.
fn weighted_mean<T: Scalar>(
    updates: &[ClientUpdate<T>],
    weighting: ClientWeighting,
) -> Result<Vec<(String, Tensor<f64>)>> {
    let ups = ordered(updates)?;
    let first = &ups[0].weights;
    for u in &ups[1..] {
        first.check_layout(&u.weights)?;
    }
    let f = factors(&ups, weighting)?;
    first
        .entries
        .iter()
        .enumerate()
        .map(|(e, (name, t))| {
            let anchor: Vec<f64> = t.data().iter().map(|x| x.as_f64()).collect();
            let mut acc = anchor.clone();
            for (u, &fk) in ups.iter().zip(&f).skip(1) {
                for ((a, &x), &x0) in acc.iter_mut().zip(u.weights.entries[e].1.data()).zip(&anchor) {
                    *a += fk * (x.as_f64() - x0);
                }
            }
            Ok((name.clone(), Tensor::new(t.dims().to_vec(), acc)?))
        })
        .collect()
}

fn narrow<T: Scalar>(entries: Vec<(String, Tensor<f64>)>) -> ModelWeights<T> {
    ModelWeights {
        entries: entries.into_iter().map(|(n, t)| (n, t.cast())).collect(),
    }
}

/// Elementwise weighted mean of client weights, buffers included.
pub fn aggregate_fedavg<T: Scalar>(updates: &[ClientUpdate<T>], weighting: ClientWeighting) -> Result<ModelWeights<T>> {
    Ok(narrow(weighted_mean(updates, weighting)?))
}

/// Server moments for the adaptive strategies; `v` starts at `τ²`.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerOptState {
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    pub round: u32,
}

impl ServerOptState {
    pub fn new<T: Scalar>(weights: &ModelWeights<T>, params: &ServerParams) -> Self {
        let m: Vec<Tensor<f64>> = weights.entries.iter().map(|(_, t)| Tensor::zeros(t.dims())).collect();
        let v = m
            .iter()
            .map(|t| Tensor::full(t.dims(), params.tau * params.tau))
            .collect();
        ServerOptState { m, v, round: 0 }
    }
}

/// One server step. FedAvg ignores `state` beyond the round counter.
pub fn aggregate_adaptive<T: Scalar>(
    strategy: Strategy,
    params: &ServerParams,
    state: &mut ServerOptState,
    current: &ModelWeights<T>,
    updates: &[ClientUpdate<T>],
    weighting: ClientWeighting,
) -> Result<ModelWeights<T>> {
    let mean = weighted_mean(updates, weighting)?;
    current.check_layout(&narrow::<T>(mean.clone()))?;
    state.round += 1;
    if strategy == Strategy::FedAvg {
        return Ok(narrow(mean));
    }
    if state.m.len() != current.len() {
        return Err(Error::shape("server state", &[state.m.len()], &[current.len()]));
    }
    let ServerParams { lr, beta1, beta2, tau } = *params;
    let mut out = Vec::with_capacity(mean.len());
    for (e, ((name, avg), (_, cur))) in mean.into_iter().zip(&current.entries).enumerate() {
        if is_buffer(&name) {
            out.push((name, avg));
            continue;
        }
        let mut w: Vec<f64> = cur.data().iter().map(|x| x.as_f64()).collect();
        let (m, v) = (state.m[e].data_mut(), state.v[e].data_mut());
        for i in 0..w.len() {
            let delta = avg.data()[i] - w[i];
            match strategy {
                Strategy::FedOpt => w[i] += lr * delta,
                Strategy::FedAdam | Strategy::FedYogi => {
                    let d2 = delta * delta;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * delta;
                    v[i] = if strategy == Strategy::FedAdam {
                        beta2 * v[i] + (1.0 - beta2) * d2
                    } else {
                        v[i] - (1.0 - beta2) * d2 * sign(v[i] - d2)
                    };
                    w[i] += lr * m[i] / (v[i].sqrt() + tau);
                }
                Strategy::FedAvg => unreachable!(),
            }
        }
        out.push((name, Tensor::new(cur.dims().to_vec(), w)?));
    }
    Ok(narrow(out))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Validation metrics reported by one centre.
#[derive(Clone, Debug, PartialEq)]
pub struct CentreMetrics {
    pub centre_id: String,
    pub accuracy: f64,
    pub loss: f64,
    pub n: usize,
}

/// Sample-weighted mean accuracy and loss over centres.
pub fn federated_evaluate(metrics: &[CentreMetrics]) -> Result<(f64, f64)> {
    let mut ms: Vec<&CentreMetrics> = metrics.iter().collect();
    ms.sort_by(|a, b| a.centre_id.cmp(&b.centre_id));
    let total: usize = ms.iter().map(|m| m.n).sum();
    if total == 0 {
        return Err(Error::Empty("evaluation centres"));
    }
    let t = total as f64;
    let acc = ms.iter().map(|m| m.n as f64 * m.accuracy).sum::<f64>() / t;
    let loss = ms.iter().map(|m| m.n as f64 * m.loss).sum::<f64>() / t;
    Ok((acc, loss))
}
