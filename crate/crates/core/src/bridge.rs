//! JSON-lines environment service for an external learner.
//!
//! One message per line, one client session at a time, strictly
//! request/response:
//!
//! ```text
//! -> {"kind":"reset","seed":7}
//! <- {"kind":"reset_ok","version":"1","episode":1,"slot":0,"observations":[..],"masks":[..],..}
//! -> {"kind":"step","episode":1,"slot":0,"actions":[[..],..]}
//! <- {"kind":"step_ok","episode":1,"slot":0,"rewards":[..],"reward":..,"reward_without":[..],..}
//! -> {"kind":"close"}
//! <- {"kind":"close"}
//! ```
//!
//! `actions[e]` holds `obs_cap * num_edges` logits for edge `e`: row `i` scores
//! the targets of the edge's `i`-th task. `step_ok` reports the system reward
//! `reward`, the per-edge rewards and, per edge, the system reward with that
//! edge voided (`reward_without`), so `rewards[e] = reward -
//! reward_without[e]` can be checked by the client.
//!
//! A malformed or out-of-order request is answered with an `error` message
//! and drops the active episode.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener};

use serde::{Deserialize, Serialize};

use crate::domain::ScenarioConfig;
use crate::env_engine::{observation_width, EnvParams, Environment, EpisodeMetrics, Observation};
use crate::mobility::TrajectorySet;

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BridgeMessage {
    Reset {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    ResetOk {
        version: String,
        episode: u64,
        slot: usize,
        num_edges: usize,
        obs_width: usize,
        action_width: usize,
        observations: Vec<Vec<f64>>,
        masks: Vec<Vec<bool>>,
        done: bool,
    },
    Step {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        episode: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        slot: Option<usize>,
        actions: Vec<Vec<f64>>,
    },
    StepOk {
        episode: u64,
        slot: usize,
        rewards: Vec<f64>,
        reward: f64,
        reward_without: Vec<f64>,
        observations: Vec<Vec<f64>>,
        masks: Vec<Vec<bool>>,
        done: bool,
        /// Episode metrics, on the final step only.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        metrics: Option<EpisodeMetrics>,
    },
    Error {
        message: String,
    },
    Close,
}

fn split_observations(obs: Vec<Observation>) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    obs.into_iter().map(|o| (o.values, o.mask)).unzip()
}

/// Server state shared by every session.
#[derive(Debug, Clone)]
pub struct BridgeServer {
    cfg: ScenarioConfig,
    traj: TrajectorySet,
    default_seed: u64,
    params: EnvParams,
    episodes: u64,
}

struct Session {
    episode: u64,
    env: Environment,
}

/// How a session ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEnd {
    Closed,
    Disconnected,
}

impl BridgeServer {
    pub fn new(cfg: ScenarioConfig, traj: TrajectorySet, default_seed: u64, params: EnvParams) -> Self {
        Self {
            cfg,
            traj,
            default_seed,
            params,
            episodes: 0,
        }
    }

    /// Serves one session until `close` or end of input.
    pub fn serve<R: BufRead, W: Write>(&mut self, reader: R, mut writer: W) -> io::Result<SessionEnd> {
        let mut session: Option<Session> = None;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let reply = match serde_json::from_str::<BridgeMessage>(&line) {
                Ok(BridgeMessage::Close) => {
                    writeln!(writer, "{}", serde_json::to_string(&BridgeMessage::Close)?)?;
                    writer.flush()?;
                    return Ok(SessionEnd::Closed);
                }
                Ok(msg) => self.handle(msg, &mut session),
                Err(e) => Err(format!("malformed message: {e}")),
            };
            let reply = reply.unwrap_or_else(|message| {
                session = None;
                BridgeMessage::Error { message }
            });
            writeln!(writer, "{}", serde_json::to_string(&reply)?)?;
            writer.flush()?;
        }
        if let Some(s) = session.filter(|s| !s.env.done()) {
            log::warn!(
                "client left episode {} at slot {}; partial metrics: {:?}",
                s.episode,
                s.env.slot(),
                s.env.metrics()
            );
        }
        Ok(SessionEnd::Disconnected)
    }

    fn handle(&mut self, msg: BridgeMessage, session: &mut Option<Session>) -> Result<BridgeMessage, String> {
        match msg {
            BridgeMessage::Reset { seed } => {
                self.episodes += 1;
                let env = Environment::new(
                    &self.cfg,
                    &self.traj,
                    seed.unwrap_or(self.default_seed),
                    self.params.clone(),
                );
                let (observations, masks) = split_observations(env.observations());
                let reply = BridgeMessage::ResetOk {
                    version: PROTOCOL_VERSION.into(),
                    episode: self.episodes,
                    slot: env.slot(),
                    num_edges: self.cfg.num_edges,
                    obs_width: observation_width(self.cfg.obs_cap),
                    action_width: self.cfg.obs_cap * self.cfg.num_edges,
                    observations,
                    masks,
                    done: env.done(),
                };
                *session = Some(Session {
                    episode: self.episodes,
                    env,
                });
                Ok(reply)
            }
            BridgeMessage::Step { episode, slot, actions } => {
                let s = session.as_mut().ok_or("no active episode")?;
                if episode.is_some_and(|id| id != s.episode) {
                    return Err(format!("episode mismatch: active episode is {}", s.episode));
                }
                if slot.is_some_and(|t| t != s.env.slot()) {
                    return Err(format!("slot mismatch: next slot is {}", s.env.slot()));
                }
                let outcome = s.env.step_actions(&actions).map_err(|e| e.to_string())?;
                let (observations, masks) = split_observations(s.env.observations());
                let done = s.env.done();
                Ok(BridgeMessage::StepOk {
                    episode: s.episode,
                    slot: outcome.slot,
                    rewards: outcome.edge_reward,
                    reward: outcome.reward,
                    reward_without: outcome.reward_without,
                    observations,
                    masks,
                    done,
                    metrics: done.then(|| s.env.metrics()),
                })
            }
            other => Err(format!("unexpected message kind: {}", kind_name(&other))),
        }
    }

    /// Serves TCP clients one after another until one sends `close`.
    pub fn serve_tcp(&mut self, listener: TcpListener) -> io::Result<()> {
        loop {
            let (stream, peer) = listener.accept()?;
            log::info!("bridge client connected from {peer}");
            let reader = BufReader::new(stream.try_clone()?);
            if self.serve(reader, stream)? == SessionEnd::Closed {
                return Ok(());
            }
        }
    }
}

fn kind_name(msg: &BridgeMessage) -> &'static str {
    match msg {
        BridgeMessage::Reset { .. } => "reset",
        BridgeMessage::ResetOk { .. } => "reset_ok",
        BridgeMessage::Step { .. } => "step",
        BridgeMessage::StepOk { .. } => "step_ok",
        BridgeMessage::Error { .. } => "error",
        BridgeMessage::Close => "close",
    }
}

/// Binds the TCP endpoint on localhost.
pub fn bind(port: u16) -> io::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    let addr = listener.local_addr()?;
    Ok((listener, addr))
}
