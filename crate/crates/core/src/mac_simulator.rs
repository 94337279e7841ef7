//! Slotted saturation simulator for CSMA with a backoff ladder.
//!
//! Time advances in virtual slots: an idle slot costs `T_σ`, a success
//! `T_s`, a collision `T_c`. Every node always has a frame queued. Backoff
//! counters tick down only across idle slots.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic_model::{BackoffLadder, ModelError, NetworkParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("simulation needs at least one node")]
    NoNodes,
    #[error("horizon must cover at least one slot")]
    EmptyHorizon,
    #[error(transparent)]
    Params(#[from] ModelError),
}

/// What a node does after colliding at the last stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetryPolicy {
    /// Keep retrying with `W_K` until the frame gets through.
    #[default]
    StayAtMax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_nodes: usize,
    pub ladder: BackoffLadder,
    pub params: NetworkParams,
    pub horizon_slots: u64,
    pub seed: u64,
    pub retry_policy: RetryPolicy,
}

impl SimConfig {
    pub fn new(
        n_nodes: usize,
        ladder: BackoffLadder,
        params: NetworkParams,
        horizon_slots: u64,
        seed: u64,
    ) -> Result<Self, SimError> {
        let cfg = Self {
            n_nodes,
            ladder,
            params,
            horizon_slots,
            seed,
            retry_policy: RetryPolicy::StayAtMax,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_nodes == 0 {
            return Err(SimError::NoNodes);
        }
        if self.horizon_slots == 0 {
            return Err(SimError::EmptyHorizon);
        }
        self.params.validate()?;
        Ok(())
    }
}

/// Outcome of one run. The first nine fields form the CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub seed: u64,
    pub n_nodes: usize,
    #[serde(rename = "K")]
    pub k_max: usize,
    #[serde(rename = "W_0")]
    pub w0: u64,
    pub throughput: f64,
    #[serde(rename = "tau_emp")]
    pub tx_attempt_rate: f64,
    #[serde(rename = "p_emp")]
    pub collision_rate: f64,
    pub successes: u64,
    pub collisions: u64,
    pub idle_slots: u64,
    pub attempts: u64,
    pub busy_time_us: f64,
    pub idle_time_us: f64,
    pub total_time_us: f64,
}

/// Runs `horizon_slots` virtual slots.
pub fn run(config: &SimConfig) -> Result<SimResult, SimError> {
    config.validate()?;
    let n = config.n_nodes;
    let windows = config.ladder.thresholds();
    let k_max = config.ladder.k_max();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut stage = vec![0usize; n];
    let mut counter: Vec<u64> = (0..n).map(|_| rng.gen_range(0..windows[0])).collect();
    let mut tx = Vec::with_capacity(n);

    let (mut slots, mut idle, mut successes, mut collisions) = (0u64, 0u64, 0u64, 0u64);
    let (mut attempts, mut collided) = (0u64, 0u64);

    while slots < config.horizon_slots {
        let min = counter.iter().copied().min().unwrap_or(0);
        if min > 0 {
            let skip = min.min(config.horizon_slots - slots);
            counter.iter_mut().for_each(|c| *c -= skip);
            idle += skip;
            slots += skip;
            continue;
        }
        tx.clear();
        tx.extend((0..n).filter(|&i| counter[i] == 0));
        slots += 1;
        attempts += tx.len() as u64;
        if tx.len() == 1 {
            successes += 1;
            stage[tx[0]] = 0;
        } else {
            collisions += 1;
            collided += tx.len() as u64;
            match config.retry_policy {
                RetryPolicy::StayAtMax => {
                    for &i in &tx {
                        stage[i] = (stage[i] + 1).min(k_max);
                    }
                }
            }
        }
        for &i in &tx {
            counter[i] = rng.gen_range(0..windows[stage[i]]);
        }
    }

    let p = &config.params;
    let busy_time_us = successes as f64 * p.success_us + collisions as f64 * p.collision_us;
    let idle_time_us = idle as f64 * p.slot_time_us;
    let total_time_us = busy_time_us + idle_time_us;
    // Each node contends in idle slots and in the slots it transmits in.
    let contending = n as u64 * idle + attempts;
    Ok(SimResult {
        seed: config.seed,
        n_nodes: n,
        k_max,
        w0: windows[0],
        throughput: successes as f64 * p.payload_us / total_time_us,
        tx_attempt_rate: ratio(attempts, contending),
        collision_rate: ratio(collided, attempts),
        successes,
        collisions,
        idle_slots: idle,
        attempts,
        busy_time_us,
        idle_time_us,
        total_time_us,
    })
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Transmission attempts per node per slot in which that node was counting
/// down or transmitting; comparable to the analytic fixed point.
pub fn empirical_tau(result: &SimResult) -> f64 {
    result.tx_attempt_rate
}
