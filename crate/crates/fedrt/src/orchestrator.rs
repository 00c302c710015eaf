//! Round-based orchestrator for cross-silo training.

use std::collections::BTreeMap;
use std::fmt;
use std::thread;
use std::time::{Duration, Instant};

use fedrt_core::aggregate::{
    aggregate_adaptive, aggregate_fedavg, federated_evaluate, CentreMetrics, ClientUpdate, ClientWeighting,
    ServerOptState, ServerParams, Strategy,
};
use fedrt_core::data::CentreShard;
use fedrt_core::model::{ModelWeights, NetworkSpec};

use crate::client::Client;
use crate::error::{FedError, FedResult};
use crate::transport::{channel_pair, Link};
use crate::wire::{Body, Message, MsgType, WireWeights};

#[derive(Clone, Debug, PartialEq)]
pub struct FedConfig {
    pub strategy: Strategy,
    pub rounds: u32,
    pub server: ServerParams,
    pub weighting: ClientWeighting,
    pub training_centres: Vec<String>,
    pub evaluation_centres: Vec<String>,
    pub timeout: Duration,
}

impl FedConfig {
    /// Train and evaluate on the same centres, with default server settings.
    pub fn new(strategy: Strategy, rounds: u32, centres: Vec<String>) -> Self {
        FedConfig {
            strategy,
            rounds,
            server: ServerParams::default(),
            weighting: ClientWeighting::default(),
            evaluation_centres: centres.clone(),
            training_centres: centres,
            timeout: Duration::from_secs(600),
        }
    }

    pub fn validate(&self) -> FedResult<()> {
        if self.rounds == 0 {
            return Err(FedError::Config("at least one round is required".into()));
        }
        if self.training_centres.is_empty() || self.evaluation_centres.is_empty() {
            return Err(FedError::Config(
                "training and evaluation centres must be non-empty".into(),
            ));
        }
        self.server.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    pub val_accuracy: f64,
    pub val_loss: f64,
    /// Mean local training loss per centre, in centre order.
    pub train_losses: Vec<(String, f64)>,
    pub wall_time: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FedOutcome {
    /// Weights of the round with the best aggregated validation accuracy.
    pub best: ModelWeights<f32>,
    pub best_round: u32,
    pub last: ModelWeights<f32>,
    pub history: Vec<RoundRecord>,
}

/// A run that stopped early, with the rounds that did complete.
#[derive(Debug)]
pub struct Aborted {
    pub error: FedError,
    pub history: Vec<RoundRecord>,
}

impl fmt::Display for Aborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "aborted after {} rounds: {}", self.history.len(), self.error)
    }
}

impl std::error::Error for Aborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub struct Roster {
    pub n_train: u64,
    pub n_val: u64,
}

pub struct Orchestrator {
    config: FedConfig,
    links: BTreeMap<String, Box<dyn Link>>,
    pub roster: BTreeMap<String, Roster>,
}

impl Orchestrator {
    /// Wait for the handshake on every link and match links to centres.
    /// Every configured centre must be present.
    pub fn connect(config: FedConfig, links: Vec<Box<dyn Link>>) -> FedResult<Self> {
        config.validate()?;
        let deadline = Instant::now() + config.timeout;
        let mut by_id = BTreeMap::new();
        let mut roster = BTreeMap::new();
        for mut link in links {
            let hello = link.recv(Some(deadline)).map_err(|e| match e {
                FedError::Timeout => FedError::Stalled {
                    centre: "(handshake)".into(),
                    after: config.timeout,
                },
                e => e,
            })?;
            let Body::Configure {
                centre_id,
                n_train,
                n_val,
            } = hello.body
            else {
                return Err(FedError::Protocol(format!(
                    "expected a handshake, got {:?}",
                    hello.msg_type()
                )));
            };
            if by_id.contains_key(&centre_id) {
                return Err(FedError::Protocol(format!("centre {centre_id} connected twice")));
            }
            roster.insert(centre_id.clone(), Roster { n_train, n_val });
            by_id.insert(centre_id, link);
        }
        for c in config.training_centres.iter().chain(&config.evaluation_centres) {
            if !by_id.contains_key(c) {
                return Err(FedError::Config(format!("configured centre {c} is not connected")));
            }
        }
        Ok(Orchestrator {
            config,
            links: by_id,
            roster,
        })
    }

    pub fn config(&self) -> &FedConfig {
        &self.config
    }

    /// Send `body` to each centre, then collect one reply of type `want` from
    /// each, in centre order, under a shared deadline.
    fn exchange(
        &mut self,
        centres: &[String],
        round: u32,
        body: Body,
        want: MsgType,
    ) -> FedResult<Vec<(String, Body)>> {
        let msg = Message::new(round, body);
        let mut sorted: Vec<&String> = centres.iter().collect();
        sorted.sort();
        sorted.dedup();
        for c in &sorted {
            self.link(c)?.send(&msg)?;
        }
        let deadline = Instant::now() + self.config.timeout;
        let timeout = self.config.timeout;
        let mut out = Vec::with_capacity(sorted.len());
        for c in sorted {
            let reply = self.link(c)?.recv(Some(deadline)).map_err(|e| match e {
                FedError::Timeout => FedError::Stalled {
                    centre: c.clone(),
                    after: timeout,
                },
                e => e,
            })?;
            if let Body::Error { message } = reply.body {
                return Err(FedError::Client {
                    centre: c.clone(),
                    message,
                });
            }
            if reply.round != round {
                return Err(FedError::Protocol(format!(
                    "centre {c} answered round {} during round {round}",
                    reply.round
                )));
            }
            if reply.msg_type() != want {
                return Err(FedError::Protocol(format!(
                    "centre {c} sent {:?}, expected {want:?}",
                    reply.msg_type()
                )));
            }
            out.push((c.clone(), reply.body));
        }
        Ok(out)
    }

    fn link(&mut self, centre: &str) -> FedResult<&mut Box<dyn Link>> {
        self.links
            .get_mut(centre)
            .ok_or_else(|| FedError::Config(format!("no link for centre {centre}")))
    }

    fn round(
        &mut self,
        round: u32,
        current: &ModelWeights<f32>,
        state: &mut ServerOptState,
    ) -> FedResult<(ModelWeights<f32>, RoundRecord)> {
        let started = Instant::now();
        let centres = self.config.training_centres.clone();
        let replies = self.exchange(
            &centres,
            round,
            Body::TrainRequest {
                weights: WireWeights::from(current),
            },
            MsgType::TrainResponse,
        )?;
        let mut updates = Vec::with_capacity(replies.len());
        let mut train_losses = Vec::with_capacity(replies.len());
        for (centre, body) in replies {
            if let Body::TrainResponse { weights, n_train, loss } = body {
                let weights = weights.to_f32();
                current.check_layout(&weights)?;
                train_losses.push((centre.clone(), loss));
                updates.push(ClientUpdate {
                    centre_id: centre,
                    weights,
                    n_samples: n_train as usize,
                });
            }
        }
        let next = match self.config.strategy {
            Strategy::FedAvg => aggregate_fedavg(&updates, self.config.weighting)?,
            s => aggregate_adaptive(s, &self.config.server, state, current, &updates, self.config.weighting)?,
        };

        let centres = self.config.evaluation_centres.clone();
        let replies = self.exchange(
            &centres,
            round,
            Body::EvalRequest {
                weights: WireWeights::from(&next),
            },
            MsgType::EvalResponse,
        )?;
        let metrics: Vec<CentreMetrics> = replies
            .into_iter()
            .filter_map(|(centre_id, b)| match b {
                Body::EvalResponse { accuracy, loss, n } => Some(CentreMetrics {
                    centre_id,
                    accuracy,
                    loss,
                    n: n as usize,
                }),
                _ => None,
            })
            .collect();
        let (val_accuracy, val_loss) = federated_evaluate(&metrics)?;
        Ok((
            next,
            RoundRecord {
                round,
                val_accuracy,
                val_loss,
                train_losses,
                wall_time: started.elapsed(),
            },
        ))
    }

    /// Run every round from `init`. Returns the best-validation checkpoint
    /// (ties go to the earliest round).
    pub fn run(&mut self, init: ModelWeights<f32>) -> Result<FedOutcome, Aborted> {
        let mut state = ServerOptState::new(&init, &self.config.server);
        let mut current = init;
        let mut history: Vec<RoundRecord> = Vec::new();
        let mut best: Option<(f64, u32, ModelWeights<f32>)> = None;
        for round in 1..=self.config.rounds {
            match self.round(round, &current, &mut state) {
                Ok((next, rec)) => {
                    if best.as_ref().is_none_or(|(acc, _, _)| rec.val_accuracy > *acc) {
                        best = Some((rec.val_accuracy, round, next.clone()));
                    }
                    history.push(rec);
                    current = next;
                }
                Err(error) => {
                    self.shutdown();
                    return Err(Aborted { error, history });
                }
            }
        }
        self.shutdown();
        let (_, best_round, best) = best.expect("at least one round ran");
        Ok(FedOutcome {
            best,
            best_round,
            last: current,
            history,
        })
    }

    /// Best-effort shutdown of every link.
    pub fn shutdown(&mut self) {
        for link in self.links.values_mut() {
            let _ = link.send(&Message::new(0, Body::Shutdown));
        }
    }
}

/// Run a federation with one in-process client thread per shard. Client `i`
/// gets seed `client_seeds[i]`.
pub fn run_in_process(
    config: FedConfig,
    spec: &NetworkSpec,
    shards: &[CentreShard],
    client_seeds: &[u64],
    init: ModelWeights<f32>,
) -> Result<FedOutcome, Aborted> {
    if client_seeds.len() != shards.len() {
        return Err(Aborted {
            error: FedError::Config(format!("{} seeds for {} shards", client_seeds.len(), shards.len())),
            history: Vec::new(),
        });
    }
    thread::scope(|scope| {
        let mut links: Vec<Box<dyn Link>> = Vec::with_capacity(shards.len());
        for (shard, &seed) in shards.iter().zip(client_seeds) {
            let (server_end, mut client_end) = channel_pair();
            let client = Client::new(shard.clone(), spec.clone(), seed);
            scope.spawn(move || client.serve(&mut client_end));
            links.push(Box::new(server_end));
        }
        let mut orch = Orchestrator::connect(config, links).map_err(|error| Aborted {
            error,
            history: Vec::new(),
        })?;
        let out = orch.run(init);
        drop(orch);
        out
    })
}
