//! Saturation model of non-persistent CSMA with a contention-window ladder.
//!
//! Collision probability, the transmission-probability fixed point, the
//! closed-form throughput, the throughput-optimal attempt rate, and the
//! synthesis of binary-exponential ladders that realize a target rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Residual tolerance on `tau * D - 2` accepted by [`solve_tau`].
pub const TAU_TOLERANCE: f64 = 1e-10;
/// Bisection iteration budget of [`solve_tau`].
pub const MAX_BISECTION_ITERS: usize = 200;
/// Lower end of the attempt-rate search interval in [`optimize_tau`].
pub const TAU_SEARCH_FLOOR: f64 = 1e-6;
/// Bracket width at which the golden-section search stops.
pub const TAU_SEARCH_WIDTH: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("transmission probability {0} outside the admissible interval")]
    TauDomain(f64),
    #[error("node count must be at least {min}, got {got}")]
    NodeCount { min: usize, got: usize },
    #[error("invalid network parameters: {0}")]
    Params(String),
    #[error("invalid ladder: {0}")]
    Ladder(String),
    #[error("fixed point sits on the boundary tau = 1 (W_0 = {w0}, W_K = {wk})")]
    Boundary { w0: u64, wk: u64 },
    #[error("bisection did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("no binary-exponential ladder with K = {k_max} and W_0 >= 2 fits under cap {cap}")]
    CapTooSmall { k_max: usize, cap: u64 },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Channel timing in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    #[serde(rename = "t_sigma_us")]
    pub slot_time_us: f64,
    #[serde(rename = "t_difs_us")]
    pub difs_us: f64,
    #[serde(rename = "t_sifs_us")]
    pub sifs_us: f64,
    #[serde(rename = "t_delta_us")]
    pub prop_delay_us: f64,
    #[serde(rename = "t_ack_us")]
    pub ack_us: f64,
    #[serde(rename = "t_header_us")]
    pub header_us: f64,
    #[serde(rename = "t_p_us")]
    pub payload_us: f64,
    #[serde(rename = "t_s_us")]
    pub success_us: f64,
    #[serde(rename = "t_c_us")]
    pub collision_us: f64,
}

/// Partially specified timing, as read from a configuration file.
///
/// Missing components take the reference values. Missing `t_s_us`/`t_c_us`
/// are derived from the components when any component is given, otherwise
/// the reference values are used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub t_sigma_us: Option<f64>,
    pub t_difs_us: Option<f64>,
    pub t_sifs_us: Option<f64>,
    pub t_delta_us: Option<f64>,
    pub t_ack_us: Option<f64>,
    pub t_header_us: Option<f64>,
    pub t_p_us: Option<f64>,
    pub t_s_us: Option<f64>,
    pub t_c_us: Option<f64>,
}

impl Default for NetworkParams {
    fn default() -> Self {
        Self::reference()
    }
}

impl NetworkParams {
    /// Reference 802.11 settings. The collision time is kept at 8783 us even
    /// though the components add up to 8713 us.
    pub fn reference() -> Self {
        Self {
            slot_time_us: 50.0,
            difs_us: 128.0,
            sifs_us: 28.0,
            prop_delay_us: 1.0,
            ack_us: 240.0,
            header_us: 400.0,
            payload_us: 8184.0,
            success_us: 8982.0,
            collision_us: 8783.0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        slot_time_us: f64,
        difs_us: f64,
        sifs_us: f64,
        prop_delay_us: f64,
        ack_us: f64,
        header_us: f64,
        payload_us: f64,
        success_us: f64,
        collision_us: f64,
    ) -> Result<Self> {
        let p = Self {
            slot_time_us,
            difs_us,
            sifs_us,
            prop_delay_us,
            ack_us,
            header_us,
            payload_us,
            success_us,
            collision_us,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds the parameters with `T_s = H + P + SIFS + d + ACK + DIFS + d`
    /// and `T_c = H + P + DIFS + d`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_components(
        slot_time_us: f64,
        difs_us: f64,
        sifs_us: f64,
        prop_delay_us: f64,
        ack_us: f64,
        header_us: f64,
        payload_us: f64,
    ) -> Result<Self> {
        let success_us =
            header_us + payload_us + sifs_us + prop_delay_us + ack_us + difs_us + prop_delay_us;
        let collision_us = header_us + payload_us + difs_us + prop_delay_us;
        Self::new(
            slot_time_us,
            difs_us,
            sifs_us,
            prop_delay_us,
            ack_us,
            header_us,
            payload_us,
            success_us,
            collision_us,
        )
    }

    pub fn from_config(cfg: &NetworkConfig) -> Result<Self> {
        let r = Self::reference();
        let any_component = [
            cfg.t_sigma_us,
            cfg.t_difs_us,
            cfg.t_sifs_us,
            cfg.t_delta_us,
            cfg.t_ack_us,
            cfg.t_header_us,
            cfg.t_p_us,
        ]
        .iter()
        .any(Option::is_some);
        let slot = cfg.t_sigma_us.unwrap_or(r.slot_time_us);
        let difs = cfg.t_difs_us.unwrap_or(r.difs_us);
        let sifs = cfg.t_sifs_us.unwrap_or(r.sifs_us);
        let delta = cfg.t_delta_us.unwrap_or(r.prop_delay_us);
        let ack = cfg.t_ack_us.unwrap_or(r.ack_us);
        let header = cfg.t_header_us.unwrap_or(r.header_us);
        let payload = cfg.t_p_us.unwrap_or(r.payload_us);
        let (ts, tc) = if any_component {
            (
                header + payload + sifs + delta + ack + difs + delta,
                header + payload + difs + delta,
            )
        } else {
            (r.success_us, r.collision_us)
        };
        Self::new(
            slot,
            difs,
            sifs,
            delta,
            ack,
            header,
            payload,
            cfg.t_s_us.unwrap_or(ts),
            cfg.t_c_us.unwrap_or(tc),
        )
    }

    pub fn from_toml_str(s: &str) -> std::result::Result<Self, ConfigError> {
        let cfg: NetworkConfig = toml::from_str(s)?;
        Ok(Self::from_config(&cfg)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_sigma_us", self.slot_time_us),
            ("t_difs_us", self.difs_us),
            ("t_sifs_us", self.sifs_us),
            ("t_delta_us", self.prop_delay_us),
            ("t_ack_us", self.ack_us),
            ("t_header_us", self.header_us),
            ("t_p_us", self.payload_us),
            ("t_s_us", self.success_us),
            ("t_c_us", self.collision_us),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(ModelError::Params(format!(
                "{name} must be positive, got {v}"
            )));
        }
        if self.payload_us >= self.success_us {
            return Err(ModelError::Params(
                "payload time must be shorter than the success time".into(),
            ));
        }
        if self.collision_us > self.success_us {
            return Err(ModelError::Params(
                "collision time must not exceed the success time".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed network configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Contention-window thresholds `W_0..=W_K` with cap `W̄`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackoffLadder {
    thresholds: Vec<u64>,
    cap: u64,
}

impl BackoffLadder {
    /// Strict ladder: `2 <= W_0 < W_1 < ... < W_K <= cap`.
    pub fn new(thresholds: Vec<u64>, cap: u64) -> Result<Self> {
        let l = Self::lenient(thresholds, cap)?;
        if l.thresholds[0] < 2 {
            return Err(ModelError::Ladder(format!(
                "W_0 must be at least 2, got {}",
                l.thresholds[0]
            )));
        }
        if let Some(k) = l.thresholds.windows(2).position(|w| w[0] >= w[1]) {
            return Err(ModelError::Ladder(format!(
                "thresholds must strictly increase (W_{} = {} >= W_{} = {})",
                k,
                l.thresholds[k],
                k + 1,
                l.thresholds[k + 1]
            )));
        }
        Ok(l)
    }

    /// Bounds-only ladder: every threshold in `[1, cap]`, no ordering.
    ///
    /// Needed for degenerate simulator inputs and for ladders assembled from
    /// independently predicted stages.
    pub fn lenient(thresholds: Vec<u64>, cap: u64) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(ModelError::Ladder(
                "at least one threshold is required".into(),
            ));
        }
        if cap == 0 {
            return Err(ModelError::Ladder("cap must be positive".into()));
        }
        if let Some(&w) = thresholds.iter().find(|&&w| w == 0 || w > cap) {
            return Err(ModelError::Ladder(format!(
                "threshold {w} outside [1, {cap}]"
            )));
        }
        Ok(Self { thresholds, cap })
    }

    /// Binary exponential backoff `W_k = 2^k W_0`, strict.
    pub fn beb(w0: u64, k_max: usize, cap: u64) -> Result<Self> {
        let thresholds = (0..=k_max)
            .map(|k| {
                u32::try_from(k)
                    .ok()
                    .and_then(|k| 2u64.checked_pow(k))
                    .and_then(|f| f.checked_mul(w0))
                    .ok_or_else(|| ModelError::Ladder(format!("2^{k} * {w0} overflows")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(thresholds, cap)
    }

    pub fn thresholds(&self) -> &[u64] {
        &self.thresholds
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }

    pub fn k_max(&self) -> usize {
        self.thresholds.len() - 1
    }

    pub fn w0(&self) -> u64 {
        self.thresholds[0]
    }

    pub fn is_strict(&self) -> bool {
        self.thresholds[0] >= 2 && self.thresholds.windows(2).all(|w| w[0] < w[1])
    }

    /// Copy with stage `k` replaced, checked leniently.
    pub fn with_threshold(&self, k: usize, w: u64) -> Result<Self> {
        if k > self.k_max() {
            return Err(ModelError::Ladder(format!(
                "stage {k} beyond K = {}",
                self.k_max()
            )));
        }
        let mut t = self.thresholds.clone();
        t[k] = w;
        Self::lenient(t, self.cap)
    }
}

impl std::fmt::Display for BackoffLadder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.thresholds.iter().map(u64::to_string).collect();
        write!(f, "{}", parts.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResult {
    pub tau: f64,
    pub p: f64,
    pub iterations: usize,
    pub residual: f64,
}

fn check_nodes(n: usize, min: usize) -> Result<()> {
    if n < min {
        Err(ModelError::NodeCount { min, got: n })
    } else {
        Ok(())
    }
}

fn nodes_exp(n: usize) -> i32 {
    i32::try_from(n).unwrap_or(i32::MAX)
}

fn collision_prob_unchecked(tau: f64, n: usize) -> f64 {
    1.0 - (1.0 - tau).powi(nodes_exp(n) - 1)
}

/// `p = 1 - (1 - tau)^(N - 1)`.
pub fn collision_prob(tau: f64, n_nodes: usize) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ModelError::TauDomain(tau));
    }
    check_nodes(n_nodes, 1)?;
    Ok(collision_prob_unchecked(tau, n_nodes))
}

/// `D = (1 - p) sum_{k<K} p^k W_k + p^K W_K + 1`.
pub fn fixed_point_denominator(thresholds: &[u64], p: f64) -> f64 {
    let (last, head) = thresholds.split_last().expect("non-empty ladder");
    let mut pk = 1.0;
    let mut sum = 0.0;
    for &w in head {
        sum += pk * w as f64;
        pk *= p;
    }
    (1.0 - p) * sum + pk * *last as f64 + 1.0
}

/// `g(tau) = tau * D(N, tau) - 2`, increasing in tau for strict ladders.
pub fn fixed_point_gap(ladder: &BackoffLadder, n_nodes: usize, tau: f64) -> f64 {
    let p = collision_prob_unchecked(tau, n_nodes);
    tau * fixed_point_denominator(ladder.thresholds(), p) - 2.0
}

/// Unique interior root of the fixed-point equation, by bisection.
pub fn solve_tau(ladder: &BackoffLadder, n_nodes: usize) -> Result<FixedPointResult> {
    check_nodes(n_nodes, 1)?;
    let w = ladder.thresholds();
    if fixed_point_gap(ladder, n_nodes, 1.0) <= 0.0 {
        return Err(ModelError::Boundary {
            w0: w[0],
            wk: w[w.len() - 1],
        });
    }
    // With no retries or no competitors D does not depend on tau.
    if ladder.k_max() == 0 || n_nodes == 1 {
        let tau = 2.0 / (w[0] as f64 + 1.0);
        return Ok(FixedPointResult {
            tau,
            p: collision_prob_unchecked(tau, n_nodes),
            iterations: 0,
            residual: fixed_point_gap(ladder, n_nodes, tau).abs(),
        });
    }

    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut best = (f64::INFINITY, 0.5);
    for it in 1..=MAX_BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g = fixed_point_gap(ladder, n_nodes, mid);
        if g.abs() < best.0 {
            best = (g.abs(), mid);
        }
        if g.abs() <= TAU_TOLERANCE {
            return Ok(FixedPointResult {
                tau: mid,
                p: collision_prob_unchecked(mid, n_nodes),
                iterations: it,
                residual: g.abs(),
            });
        }
        if g > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(ModelError::NonConvergence {
        iterations: MAX_BISECTION_ITERS,
        residual: best.0,
    })
}

/// Saturation throughput `U(tau)` as a fraction of channel time.
pub fn throughput(tau: f64, n_nodes: usize, params: &NetworkParams) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(ModelError::TauDomain(tau));
    }
    check_nodes(n_nodes, 1)?;
    Ok(throughput_unchecked(tau, n_nodes, params))
}

fn throughput_unchecked(tau: f64, n: usize, params: &NetworkParams) -> f64 {
    let nf = n as f64;
    let idle = (1.0 - tau).powi(nodes_exp(n));
    let single = nf * tau * (1.0 - tau).powi(nodes_exp(n) - 1);
    let num = single * params.payload_us;
    let den = idle * params.slot_time_us
        + single * (params.success_us - params.collision_us)
        + (1.0 - idle) * params.collision_us;
    num / den
}

/// Throughput of a ladder deployed among `n_nodes` saturated stations.
pub fn ladder_throughput(
    ladder: &BackoffLadder,
    n_nodes: usize,
    params: &NetworkParams,
) -> Result<f64> {
    let fp = solve_tau(ladder, n_nodes)?;
    throughput(fp.tau, n_nodes, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalTau {
    pub tau: f64,
    pub throughput: f64,
}

/// Golden-section maximization of `U` over `(1e-6, 1/N)`.
pub fn optimize_tau(n_nodes: usize, params: &NetworkParams) -> Result<OptimalTau> {
    check_nodes(n_nodes, 2)?;
    params.validate()?;
    let hi_bound = 1.0 / n_nodes as f64;
    if hi_bound <= TAU_SEARCH_FLOOR {
        return Err(ModelError::NodeCount {
            min: 2,
            got: n_nodes,
        });
    }
    let u = |t: f64| throughput_unchecked(t, n_nodes, params);
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TAU_SEARCH_FLOOR, hi_bound);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (u(c), u(d));
    while b - a > TAU_SEARCH_WIDTH {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = u(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = u(d);
        }
    }
    let tau = 0.5 * (a + b);
    Ok(OptimalTau {
        tau,
        throughput: u(tau),
    })
}

/// A synthesized binary-exponential ladder and how well it hits its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderFit {
    pub ladder: BackoffLadder,
    pub tau: f64,
    pub residual: f64,
    /// Target rate lies outside what any admissible `W_0` can realize.
    pub clamped: bool,
}

/// Largest `W_0` keeping `2^K W_0 <= cap`.
pub fn max_beb_w0(k_max: usize, cap: u64) -> Result<u64> {
    let w = u32::try_from(k_max)
        .ok()
        .and_then(|k| cap.checked_shr(k))
        .unwrap_or(0);
    if w < 2 {
        Err(ModelError::CapTooSmall { k_max, cap })
    } else {
        Ok(w)
    }
}

/// Binary-exponential ladder whose fixed point is closest to `tau_star`.
///
/// The fixed point decreases strictly in `W_0`, so a bisection over integer
/// `W_0` followed by a comparison of the two bracketing candidates finds the
/// same minimizer as a full scan. Ties go to the smaller `W_0`.
pub fn solve_ladder(tau_star: f64, n_nodes: usize, k_max: usize, cap: u64) -> Result<LadderFit> {
    if !(tau_star > 0.0 && tau_star < 1.0) {
        return Err(ModelError::TauDomain(tau_star));
    }
    check_nodes(n_nodes, 1)?;
    let w_max = max_beb_w0(k_max, cap)?;
    let tau_of = |w0: u64| -> Result<f64> {
        Ok(solve_tau(&BackoffLadder::beb(w0, k_max, cap)?, n_nodes)?.tau)
    };
    let fit = |w0: u64, clamped: bool| -> Result<LadderFit> {
        let ladder = BackoffLadder::beb(w0, k_max, cap)?;
        let tau = solve_tau(&ladder, n_nodes)?.tau;
        Ok(LadderFit {
            ladder,
            tau,
            residual: (tau - tau_star).abs(),
            clamped,
        })
    };

    let t_lo = tau_of(2)?;
    if t_lo <= tau_star {
        return fit(2, t_lo < tau_star);
    }
    let t_hi = tau_of(w_max)?;
    if t_hi > tau_star {
        return fit(w_max, true);
    }
    // Invariant: tau(lo) > tau_star >= tau(hi).
    let (mut lo, mut hi) = (2u64, w_max);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if tau_of(mid)? > tau_star {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = fit(lo, false)?;
    let b = fit(hi, false)?;
    Ok(if b.residual < a.residual { b } else { a })
}

/// Ladder realizing the throughput-optimal attempt rate for `n_nodes`.
pub fn optimal_ladder(
    n_nodes: usize,
    k_max: usize,
    cap: u64,
    params: &NetworkParams,
) -> Result<LadderFit> {
    let opt = optimize_tau(n_nodes, params)?;
    solve_ladder(opt.tau, n_nodes, k_max, cap)
}

/// Throughput lost by tuning for `n_est` stations when `n_true` contend.
pub fn mismatch_loss(
    n_true: usize,
    n_est: usize,
    k_max: usize,
    cap: u64,
    params: &NetworkParams,
) -> Result<f64> {
    check_nodes(n_est, 2)?;
    let best = optimal_ladder(n_true, k_max, cap, params)?;
    let est = optimal_ladder(n_est, k_max, cap, params)?;
    Ok(ladder_throughput(&best.ladder, n_true, params)?
        - ladder_throughput(&est.ladder, n_true, params)?)
}

/// Largest throughput change from moving the optimal `W_0` by one.
pub fn quantization_step(
    n_nodes: usize,
    k_max: usize,
    cap: u64,
    params: &NetworkParams,
) -> Result<f64> {
    let best = optimal_ladder(n_nodes, k_max, cap, params)?;
    let w0 = best.ladder.w0();
    let u0 = ladder_throughput(&best.ladder, n_nodes, params)?;
    let w_max = max_beb_w0(k_max, cap)?;
    let mut step: f64 = 0.0;
    for w in [w0 - 1, w0 + 1] {
        if (2..=w_max).contains(&w) {
            let u = ladder_throughput(&BackoffLadder::beb(w, k_max, cap)?, n_nodes, params)?;
            step = step.max((u - u0).abs());
        }
    }
    Ok(step)
}

/// Per-threshold Lipschitz constant `T_P N̄ / (8 T_σ)` of the throughput.
pub fn lipschitz_constant(params: &NetworkParams, n_max: usize) -> f64 {
    params.payload_us * n_max as f64 / (8.0 * params.slot_time_us)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Root of `g` located by nested uniform grids, each refining the cell
    /// holding the sign change. Returns the center of the final cell.
    fn grid_root(ladder: &BackoffLadder, n: usize) -> f64 {
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..4 {
            let pts = 1000;
            let step = (hi - lo) / pts as f64;
            let mut prev = lo;
            let mut found = false;
            for i in 1..=pts {
                let t = lo + step * i as f64;
                if fixed_point_gap(ladder, n, t) > 0.0 {
                    hi = t;
                    lo = prev;
                    found = true;
                    break;
                }
                prev = t;
            }
            assert!(found, "grid scan lost the sign change");
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn collision_probability_examples() {
        assert_eq!(collision_prob(0.5, 1).unwrap(), 0.0);
        assert_eq!(collision_prob(0.5, 2).unwrap(), 0.5);
        assert_relative_eq!(collision_prob(0.1, 5).unwrap(), 0.3439, epsilon = 1e-12);
        assert!(collision_prob(0.0, 3).is_err());
        assert!(collision_prob(1.0, 3).is_err());
        assert!(collision_prob(0.3, 0).is_err());
    }

    #[test]
    fn derived_timings_follow_components() {
        let r = NetworkParams::reference();
        let d =
            NetworkParams::from_components(50.0, 128.0, 28.0, 1.0, 240.0, 400.0, 8184.0).unwrap();
        assert_eq!(d.success_us, r.success_us);
        assert_eq!(d.collision_us, 8713.0);
    }

    #[test]
    fn params_validation() {
        let r = NetworkParams::reference();
        assert!(NetworkParams {
            slot_time_us: 0.0,
            ..r
        }
        .validate()
        .is_err());
        assert!(NetworkParams {
            payload_us: 9000.0,
            ..r
        }
        .validate()
        .is_err());
        assert!(NetworkParams {
            collision_us: 9000.0,
            ..r
        }
        .validate()
        .is_err());
        assert!(NetworkParams {
            ack_us: f64::NAN,
            ..r
        }
        .validate()
        .is_err());
    }

    #[test]
    fn toml_config() {
        assert_eq!(
            NetworkParams::from_toml_str("").unwrap(),
            NetworkParams::reference()
        );
        let p = NetworkParams::from_toml_str("t_c_us = 8713.0\n").unwrap();
        assert_eq!(p.collision_us, 8713.0);
        assert_eq!(p.success_us, 8982.0);
        let p = NetworkParams::from_toml_str("t_p_us = 4000.0\n").unwrap();
        assert_eq!(
            p.success_us,
            400.0 + 4000.0 + 28.0 + 1.0 + 240.0 + 128.0 + 1.0
        );
        assert_eq!(p.collision_us, 400.0 + 4000.0 + 128.0 + 1.0);
        assert!(NetworkParams::from_toml_str("t_bogus_us = 1.0").is_err());
        assert!(NetworkParams::from_toml_str("t_s_us = 100.0").is_err());
    }

    #[test]
    fn ladder_constructors() {
        assert!(BackoffLadder::new(vec![32, 64, 128], 1024).is_ok());
        assert!(BackoffLadder::new(vec![1, 2], 1024).is_err());
        assert!(BackoffLadder::new(vec![32, 32], 1024).is_err());
        assert!(BackoffLadder::new(vec![32, 2048], 1024).is_err());
        assert!(BackoffLadder::new(vec![], 1024).is_err());
        assert!(BackoffLadder::lenient(vec![1, 1, 1], 1024).is_ok());
        assert!(BackoffLadder::lenient(vec![0], 1024).is_err());
        let b = BackoffLadder::beb(25, 8, 8192).unwrap();
        assert_eq!(b.thresholds().last(), Some(&6400));
        assert!(BackoffLadder::beb(33, 8, 8192).is_err());
    }

    #[test]
    fn single_stage_fixed_point_is_closed_form() {
        let l = BackoffLadder::new(vec![32], 1024).unwrap();
        for n in [1, 2, 10, 500] {
            assert_eq!(solve_tau(&l, n).unwrap().tau, 2.0 / 33.0);
        }
    }

    #[test]
    fn unit_window_is_rejected_as_boundary() {
        let l = BackoffLadder::lenient(vec![1], 8).unwrap();
        assert!(matches!(solve_tau(&l, 3), Err(ModelError::Boundary { .. })));
    }

    #[test]
    fn beb_fixed_point_matches_grid_scan() {
        let l = BackoffLadder::beb(32, 5, 1 << 20).unwrap();
        let fp = solve_tau(&l, 10).unwrap();
        assert!(fp.residual <= TAU_TOLERANCE);
        assert!((fp.tau - grid_root(&l, 10)).abs() <= 1e-7);
        assert_relative_eq!(fp.p, collision_prob(fp.tau, 10).unwrap());
    }

    #[test]
    fn throughput_examples() {
        let r = NetworkParams::reference();
        for n in [1, 2, 50] {
            assert!(throughput(1e-15, n, &r).unwrap() < 1e-9);
        }
        assert_eq!(throughput(1.0, 2, &r).unwrap(), 0.0);
        assert_relative_eq!(
            throughput(1.0, 1, &r).unwrap(),
            8184.0 / 8982.0,
            epsilon = 1e-15
        );
        assert!(throughput(0.0, 2, &r).is_err());
        assert!(throughput(1.5, 2, &r).is_err());
    }

    #[test]
    fn optimum_dominates_dense_grid_for_two_nodes() {
        let r = NetworkParams::reference();
        let opt = optimize_tau(2, &r).unwrap();
        assert!(opt.tau < 0.5);
        let mut t = 1e-6;
        while t < 0.5 {
            assert!(
                opt.throughput >= throughput(t, 2, &r).unwrap() - 1e-13,
                "grid point {t}"
            );
            t += 1e-6;
        }
    }

    #[test]
    fn optimum_below_inverse_density_and_decreasing() {
        let r = NetworkParams::reference();
        assert!(optimize_tau(100, &r).unwrap().tau < 0.01);
        let t2 = optimize_tau(2, &r).unwrap().tau;
        let t500 = optimize_tau(500, &r).unwrap().tau;
        assert!(t2 > t500);
        assert!(optimize_tau(1, &r).is_err());
    }

    #[test]
    fn ladder_inverts_single_stage_closed_form() {
        let fit = solve_ladder(2.0 / 33.0, 7, 0, 1024).unwrap();
        assert_eq!(fit.ladder.thresholds(), &[32]);
        assert!(!fit.clamped);
    }

    #[test]
    fn ladder_matches_exhaustive_scan() {
        let r = NetworkParams::reference();
        let tau_star = optimize_tau(5, &r).unwrap().tau;
        let fit = solve_ladder(tau_star, 5, 8, 8192).unwrap();
        let w_max = max_beb_w0(8, 8192).unwrap();
        for w0 in 2..=w_max {
            let l = BackoffLadder::beb(w0, 8, 8192).unwrap();
            let res = (solve_tau(&l, 5).unwrap().tau - tau_star).abs();
            assert!(fit.residual <= res, "W_0 = {w0} beats the fit");
        }
        let wide = solve_ladder(tau_star, 5, 8, 1 << 22).unwrap();
        let exhaustive = (2..=max_beb_w0(8, 1 << 22).unwrap().min(5000))
            .map(|w0| {
                let l = BackoffLadder::beb(w0, 8, 1 << 22).unwrap();
                (w0, (solve_tau(&l, 5).unwrap().tau - tau_star).abs())
            })
            .fold(
                (0, f64::INFINITY),
                |acc, c| if c.1 < acc.1 { c } else { acc },
            );
        assert_eq!(wide.ladder.w0(), exhaustive.0);
        assert!(!wide.clamped);
    }

    #[test]
    fn unreachable_target_is_flagged() {
        let fit = solve_ladder(0.9, 4, 8, 8192).unwrap();
        assert!(fit.clamped);
        assert_eq!(fit.ladder.w0(), 2);
        assert!(fit.tau <= 2.0 / 3.0);
        assert!(matches!(
            solve_ladder(0.1, 4, 8, 256),
            Err(ModelError::CapTooSmall { .. })
        ));
    }

    #[test]
    fn mismatch_examples() {
        let r = NetworkParams::reference();
        let cap = 1 << 22;
        assert_eq!(mismatch_loss(50, 50, 8, cap, &r).unwrap(), 0.0);
        let near = mismatch_loss(100, 50, 8, cap, &r).unwrap();
        let far = mismatch_loss(500, 50, 8, cap, &r).unwrap();
        assert!(far > near && near > 0.0);
    }

    #[test]
    fn mismatch_matches_grid_composition() {
        let r = NetworkParams::reference();
        let cap = 1 << 22;
        let best = optimal_ladder(300, 8, cap, &r).unwrap().ladder;
        let est = optimal_ladder(50, 8, cap, &r).unwrap().ladder;
        let u = |l: &BackoffLadder| throughput(grid_root(l, 300), 300, &r).unwrap();
        let gap = u(&best) - u(&est);
        assert!((mismatch_loss(300, 50, 8, cap, &r).unwrap() - gap).abs() < 1e-9);
    }

    fn strict_ladder() -> impl Strategy<Value = BackoffLadder> {
        (2u64..=1024, prop::collection::vec(1u64..=2048, 0..=8)).prop_map(|(w0, incs)| {
            let mut t = vec![w0];
            for d in incs {
                t.push(t.last().unwrap() + d);
            }
            BackoffLadder::new(t, 1 << 20).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn gap_increases_in_tau(l in strict_ladder(), n in 1usize..=500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(b - a > 1e-9);
            prop_assert!(fixed_point_gap(&l, n, a) < fixed_point_gap(&l, n, b));
        }

        #[test]
        fn wider_window_lowers_tau(l in strict_ladder(), n in 1usize..=500, k in 0usize..=8, extra in 1u64..=64) {
            let k = k.min(l.k_max());
            let t = l.thresholds();
            let next = t.get(k + 1).copied().unwrap_or(u64::MAX);
            prop_assume!(t[k] + extra < next);
            let wider = BackoffLadder::new(l.with_threshold(k, t[k] + extra).unwrap().thresholds().to_vec(), l.cap()).unwrap();
            let before = solve_tau(&l, n).unwrap().tau;
            let after = solve_tau(&wider, n).unwrap().tau;
            if k == 0 {
                prop_assert!(after < before);
            } else {
                prop_assert!(after <= before);
            }
        }

        #[test]
        fn fixed_point_residual_within_tolerance(l in strict_ladder(), n in 1usize..=500) {
            let fp = solve_tau(&l, n).unwrap();
            prop_assert!(fp.tau > 0.0 && fp.tau < 1.0);
            prop_assert!(fp.residual <= TAU_TOLERANCE);
            prop_assert!((0.0..=1.0).contains(&fp.p));
        }

        #[test]
        fn throughput_bounded(t in 1e-9f64..=1.0, n in 1usize..=500) {
            let r = NetworkParams::reference();
            let u = throughput(t, n, &r).unwrap();
            prop_assert!(u >= 0.0 && u <= r.payload_us / r.success_us + 1e-15);
        }

        #[test]
        fn single_threshold_lipschitz(l in strict_ladder(), n in 2usize..=500, k in 0usize..=8, w in 2u64..=4096) {
            let r = NetworkParams::reference();
            let k = k.min(l.k_max());
            let moved = l.with_threshold(k, w).unwrap();
            let du = (ladder_throughput(&l, n, &r).unwrap() - ladder_throughput(&moved, n, &r).unwrap()).abs();
            let dw = (l.thresholds()[k] as f64 - w as f64).abs();
            prop_assert!(du <= lipschitz_constant(&r, 500) * dw);
        }
    }
}
