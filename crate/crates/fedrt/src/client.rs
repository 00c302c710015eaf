//! Training centre. Holds its shard and answers requests one at a time;
//! nothing carries over between requests.

use fedrt_core::data::CentreShard;
use fedrt_core::model::{evaluate, train_local_epoch, NetworkSpec, TrainConfig};

use crate::error::{FedError, FedResult};
use crate::transport::Link;
use crate::wire::{Body, Message, WireWeights};

#[derive(Clone, Debug)]
pub struct Client {
    pub shard: CentreShard,
    pub spec: NetworkSpec,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Client {
    pub fn new(shard: CentreShard, spec: NetworkSpec, seed: u64) -> Self {
        Client {
            shard,
            spec,
            seed,
            train: TrainConfig::default(),
        }
    }

    pub fn hello(&self) -> Message {
        Message::new(
            0,
            Body::Configure {
                centre_id: self.shard.centre_id.clone(),
                n_train: self.shard.train.len() as u64,
                n_val: self.shard.validation.len() as u64,
            },
        )
    }

    /// Seed of the local epoch run for `round`.
    pub fn epoch_seed(&self, round: u32) -> u64 {
        self.seed ^ round as u64
    }

    /// Reply to one request; `None` means shut down.
    pub fn handle(&self, msg: &Message) -> Option<Message> {
        let round = msg.round;
        let reply = match &msg.body {
            Body::TrainRequest { weights } => {
                match train_local_epoch(
                    &weights.to_f32(),
                    &self.shard.train,
                    &self.spec,
                    self.epoch_seed(round),
                    &self.train,
                ) {
                    Ok((w, loss)) => Body::TrainResponse {
                        weights: WireWeights::from(&w),
                        n_train: self.shard.train.len() as u64,
                        loss,
                    },
                    Err(e) => Body::Error { message: e.to_string() },
                }
            }
            Body::EvalRequest { weights } => match evaluate(&weights.to_f32(), &self.shard.validation, &self.spec) {
                Ok(ev) => Body::EvalResponse {
                    accuracy: ev.accuracy,
                    loss: ev.loss,
                    n: ev.n as u64,
                },
                Err(e) => Body::Error { message: e.to_string() },
            },
            Body::Shutdown => return None,
            other => Body::Error {
                message: format!(
                    "unexpected {:?} at a centre",
                    Message::new(round, other.clone()).msg_type()
                ),
            },
        };
        Some(Message::new(round, reply))
    }

    /// Handshake, then serve until shutdown or the link closes. Frames that
    /// fail to decode get an `Error` reply and the loop carries on.
    pub fn serve(&self, link: &mut dyn Link) -> FedResult<()> {
        link.send(&self.hello())?;
        loop {
            let msg = match link.recv(None) {
                Ok(m) => m,
                Err(FedError::Wire(e)) => {
                    link.send(&Message::error(0, format!("bad frame: {e}")))?;
                    continue;
                }
                Err(FedError::Disconnected) => return Ok(()),
                Err(e) => return Err(e),
            };
            match self.handle(&msg) {
                Some(reply) => link.send(&reply)?,
                None => return Ok(()),
            }
        }
    }
}
