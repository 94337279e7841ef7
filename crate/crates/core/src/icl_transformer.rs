//! One-layer masked softmax attention over embedded prompts, trained by
//! full-batch gradient descent on the bilinear key-query matrix `Q`.
//!
//! The value path is fixed: the prediction is the attention-weighted mean of
//! the in-context labels, with weights `softmax_m(x_m^T Q x_q)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt_pipeline::{EmbeddedPrompt, FeatureEncoding, FeatureScaler};

/// Logit magnitude past which the softmax is saturated far below machine
/// precision; training that reaches it is reported as diverged.
pub const MAX_LOGIT: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformerError {
    #[error("dimension mismatch: model has d = {model}, prompt has d = {prompt}")]
    Dimension { model: usize, prompt: usize },
    #[error("empty prompt batch")]
    EmptyBatch,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid label scaling: {0}")]
    Scaling(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        trace: Box<TrainTrace>,
    },
    #[error("unsupported model file: {0}")]
    ModelFile(String),
}

pub type Result<T> = std::result::Result<T, TransformerError>;

/// `θ = (1, Q)`; only `Q` is learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    d: usize,
    q: Vec<f64>,
}

impl TransformerParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            d,
            q: vec![0.0; d * d],
        }
    }

    /// `q` is row-major.
    pub fn from_row_major(d: usize, q: Vec<f64>) -> Result<Self> {
        if q.len() != d * d {
            return Err(TransformerError::Dimension {
                model: d,
                prompt: q.len(),
            });
        }
        Ok(Self { d, q })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row_major(&self) -> &[f64] {
        &self.q
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.q[i * self.d + j]
    }

    fn q_times(&self, x: &[f64]) -> Vec<f64> {
        self.q
            .chunks_exact(self.d)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.q.iter().all(|v| v.is_finite())
    }
}

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_dim(params: &TransformerParams, p: &EmbeddedPrompt) -> Result<()> {
    if params.d != p.d() {
        return Err(TransformerError::Dimension {
            model: params.d,
            prompt: p.d(),
        });
    }
    Ok(())
}

struct Forward {
    logits: Vec<f64>,
    attn: Vec<f64>,
}

fn forward(params: &TransformerParams, p: &EmbeddedPrompt) -> Forward {
    let u = params.q_times(p.query());
    let logits: Vec<f64> = (0..p.m())
        .map(|m| p.x(m).iter().zip(&u).map(|(a, b)| a * b).sum())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    Forward {
        attn: exp.into_iter().map(|e| e / z).collect(),
        logits,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    /// Weight on each in-context column.
    pub attn: Vec<f64>,
    /// Weight aggregated per collision stage, indexed by stage.
    pub stage_mass: Vec<f64>,
    pub query_stage: usize,
    pub query_stage_mass: f64,
}

pub fn attention(params: &TransformerParams, p: &EmbeddedPrompt) -> Result<AttentionReport> {
    check_dim(params, p)?;
    let attn = forward(params, p).attn;
    let n_stages = p
        .stages()
        .iter()
        .copied()
        .max()
        .unwrap_or(0)
        .max(p.query_stage())
        + 1;
    let mut stage_mass = vec![0.0; n_stages];
    for (a, &k) in attn.iter().zip(p.stages()) {
        stage_mass[k] += a;
    }
    Ok(AttentionReport {
        query_stage_mass: stage_mass[p.query_stage()],
        query_stage: p.query_stage(),
        stage_mass,
        attn,
    })
}

/// Attention-weighted mean of the in-context labels.
pub fn predict(params: &TransformerParams, p: &EmbeddedPrompt) -> Result<f64> {
    check_dim(params, p)?;
    let f = forward(params, p);
    Ok(f.attn.iter().enumerate().map(|(m, a)| a * p.label(m)).sum())
}

/// Divisor applied to every label of a prompt before the squared loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelScaling {
    Fixed {
        scale: f64,
    },
    /// Largest label over the whole batch.
    GlobalMax,
    /// `W_q^alpha * G^(1 - alpha)` per prompt, `G` the geometric mean of the
    /// in-context labels.
    Anchored {
        alpha: f64,
    },
}

impl Default for LabelScaling {
    fn default() -> Self {
        Self::Anchored { alpha: 0.15 }
    }
}

/// Prompts with their label divisors, ready for loss and gradient.
#[derive(Debug, Clone)]
pub struct Batch {
    prompts: Vec<EmbeddedPrompt>,
    scales: Vec<f64>,
}

impl Batch {
    pub fn new(prompts: Vec<EmbeddedPrompt>, scaling: LabelScaling) -> Result<Self> {
        let first = prompts.first().ok_or(TransformerError::EmptyBatch)?;
        let d = first.d();
        if let Some(p) = prompts.iter().find(|p| p.d() != d) {
            return Err(TransformerError::Dimension {
                model: d,
                prompt: p.d(),
            });
        }
        let scales = match scaling {
            LabelScaling::Fixed { scale } => vec![scale; prompts.len()],
            LabelScaling::GlobalMax => {
                let max = prompts
                    .iter()
                    .flat_map(|p| (0..p.m()).map(|m| p.label(m)).chain([p.query_label()]))
                    .fold(0.0, f64::max);
                vec![max; prompts.len()]
            }
            LabelScaling::Anchored { alpha } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(TransformerError::Scaling(format!(
                        "alpha {alpha} outside [0, 1]"
                    )));
                }
                prompts
                    .iter()
                    .map(|p| {
                        let g = (0..p.m()).map(|m| p.label(m).ln()).sum::<f64>() / p.m() as f64;
                        (alpha * p.query_label().ln() + (1.0 - alpha) * g).exp()
                    })
                    .collect()
            }
        };
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(TransformerError::Scaling(format!(
                "label scale {s} is not positive"
            )));
        }
        Ok(Self { prompts, scales })
    }

    pub fn prompts(&self) -> &[EmbeddedPrompt] {
        &self.prompts
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    fn check(&self, params: &TransformerParams) -> Result<()> {
        check_dim(params, &self.prompts[0])
    }
}

struct Evaluation {
    loss: f64,
    grad: Vec<f64>,
    max_logit: f64,
}

fn evaluate(params: &TransformerParams, batch: &Batch, with_grad: bool) -> Evaluation {
    let d = params.d;
    let mut loss = 0.0;
    let mut grad = vec![0.0; if with_grad { d * d } else { 0 }];
    let mut max_logit: f64 = 0.0;
    let mut v = vec![0.0; d];
    for (p, &s) in batch.prompts.iter().zip(&batch.scales) {
        let f = forward(params, p);
        max_logit = f.logits.iter().fold(max_logit, |a, l| a.max(l.abs()));
        let pred: f64 = f
            .attn
            .iter()
            .enumerate()
            .map(|(m, a)| a * p.label(m) / s)
            .sum();
        let err = pred - p.query_label() / s;
        loss += err * err;
        if with_grad {
            // d pred / dQ = sum_m a_m (y_m - pred) x_m x_q^T
            v.iter_mut().for_each(|x| *x = 0.0);
            for (m, a) in f.attn.iter().enumerate() {
                let c = 2.0 * err * a * (p.label(m) / s - pred);
                for (vi, xi) in v.iter_mut().zip(p.x(m)) {
                    *vi += c * xi;
                }
            }
            let xq = p.query();
            for (row, vi) in grad.chunks_exact_mut(d).zip(&v) {
                for (g, xj) in row.iter_mut().zip(xq) {
                    *g += vi * xj;
                }
            }
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Evaluation {
        loss: loss / n,
        grad,
        max_logit,
    }
}

/// Mean squared error between prediction and held-out label, both divided
/// by the prompt's label scale.
pub fn loss(params: &TransformerParams, batch: &Batch) -> Result<f64> {
    batch.check(params)?;
    Ok(evaluate(params, batch, false).loss)
}

/// Exact gradient of [`loss`] with respect to `Q`, row-major.
pub fn gradient(params: &TransformerParams, batch: &Batch) -> Result<Vec<f64>> {
    batch.check(params)?;
    Ok(evaluate(params, batch, true).grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step_size: f64,
    pub max_rounds: usize,
    pub stop_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            max_rounds: 10_000,
            stop_eps: 2e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(TransformerError::Config(format!(
                "step size {}",
                self.step_size
            )));
        }
        if self.max_rounds == 0 {
            return Err(TransformerError::Config(
                "max_rounds must be positive".into(),
            ));
        }
        if !(self.stop_eps.is_finite() && self.stop_eps > 0.0) {
            return Err(TransformerError::Config(format!(
                "stop_eps {}",
                self.stop_eps
            )));
        }
        Ok(())
    }
}

/// Losses are taken before each update; `step_norms[t]` is the size of
/// update `t + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub step_norms: Vec<f64>,
    pub converged_at: Option<usize>,
    pub final_loss: f64,
    pub final_params: TransformerParams,
}

/// Gradient descent from `Q = 0` until the update norm drops to `stop_eps`
/// or `max_rounds` updates have been made.
pub fn train(batch: &Batch, config: &TrainConfig) -> Result<(TransformerParams, TrainTrace)> {
    config.validate()?;
    let d = batch.prompts[0].d();
    let mut params = TransformerParams::zeros(d);
    let mut trace = TrainTrace {
        losses: Vec::new(),
        step_norms: Vec::new(),
        converged_at: None,
        final_loss: f64::NAN,
        final_params: params.clone(),
    };
    let diverged = |step: usize, reason: String, trace: &TrainTrace| TransformerError::Diverged {
        step,
        reason,
        trace: Box::new(trace.clone()),
    };

    for step in 1..=config.max_rounds {
        let ev = evaluate(&params, batch, true);
        if !ev.loss.is_finite() || ev.grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(step, "non-finite loss or gradient".into(), &trace));
        }
        if ev.max_logit > MAX_LOGIT {
            return Err(diverged(
                step,
                format!("attention logit {:.3e}", ev.max_logit),
                &trace,
            ));
        }
        trace.losses.push(ev.loss);
        for (q, g) in params.q.iter_mut().zip(&ev.grad) {
            *q -= config.step_size * g;
        }
        let norm = config.step_size * frobenius(&ev.grad);
        trace.step_norms.push(norm);
        trace.final_params = params.clone();
        if !params.is_finite() {
            return Err(diverged(step, "non-finite parameters".into(), &trace));
        }
        if norm <= config.stop_eps {
            trace.converged_at = Some(step);
            break;
        }
    }
    let last = evaluate(&params, batch, false);
    if !last.loss.is_finite() || last.max_logit > MAX_LOGIT {
        let step = trace.losses.len();
        return Err(diverged(
            step,
            format!("attention logit {:.3e}", last.max_logit),
            &trace,
        ));
    }
    trace.final_loss = last.loss;
    Ok((params, trace))
}

/// True when the query stage holds all but `threshold` of the attention.
pub fn convergence_check(report: &AttentionReport, threshold: f64) -> bool {
    1.0 - report.query_stage_mass <= threshold
}

/// Half-up rounding clamped to `[1, cap]`.
pub fn round_threshold(prediction: f64, cap: u64) -> u64 {
    let cap = cap.max(1);
    if prediction.is_nan() {
        return 1;
    }
    let r = (prediction + 0.5).floor();
    if r <= 1.0 {
        1
    } else if r >= cap as f64 {
        cap
    } else {
        r as u64
    }
}

pub const MODEL_FORMAT: &str = "csma-icl-model";
pub const MODEL_VERSION: u32 = 1;

/// Persisted model: header, `Q` row-major, feature scaler, label scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub d: usize,
    pub k_max: usize,
    pub encoding: FeatureEncoding,
    pub q: Vec<f64>,
    pub scaler: FeatureScaler,
    pub label_scaling: LabelScaling,
}

impl ModelFile {
    pub fn new(
        params: &TransformerParams,
        k_max: usize,
        encoding: FeatureEncoding,
        scaler: FeatureScaler,
        label_scaling: LabelScaling,
    ) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            d: params.d(),
            k_max,
            encoding,
            q: params.row_major().to_vec(),
            scaler,
            label_scaling,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self =
            serde_json::from_str(s).map_err(|e| TransformerError::ModelFile(e.to_string()))?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(TransformerError::ModelFile(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                m.format, m.version
            )));
        }
        if m.d != m.encoding.dim(m.k_max) || m.scaler.dim() != m.d {
            return Err(TransformerError::ModelFile(
                "inconsistent dimensions".into(),
            ));
        }
        Ok(m)
    }

    pub fn params(&self) -> Result<TransformerParams> {
        TransformerParams::from_row_major(self.d, self.q.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt_pipeline::{embed, FeatureVector, Prompt, PromptExample};
    use proptest::prelude::*;

    fn prompt(
        xs: &[Vec<f64>],
        ws: &[u64],
        stages: &[usize],
        q: Vec<f64>,
        qs: usize,
        ql: u64,
    ) -> EmbeddedPrompt {
        let p = Prompt {
            density: 2,
            examples: xs
                .iter()
                .zip(ws)
                .zip(stages)
                .map(|((x, &w), &stage)| PromptExample {
                    stage,
                    x: FeatureVector(x.clone()),
                    w,
                    corrupted: false,
                })
                .collect(),
            query_stage: qs,
            query: FeatureVector(q),
            query_label: ql,
        };
        embed(&p).unwrap()
    }

    fn unit_batch(p: EmbeddedPrompt) -> Batch {
        Batch::new(vec![p], LabelScaling::Fixed { scale: 1.0 }).unwrap()
    }

    #[test]
    fn zero_q_gives_uniform_attention() {
        let p = prompt(
            &[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
                vec![-1.0, 0.5],
            ],
            &[8, 16, 32, 64],
            &[0, 1, 2, 3],
            vec![1.0, 0.0],
            0,
            8,
        );
        let r = attention(&TransformerParams::zeros(2), &p).unwrap();
        assert!(r.attn.iter().all(|&a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn large_identity_concentrates_on_best_match() {
        let p = prompt(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
            &[8, 16, 32],
            &[0, 1, 2],
            vec![0.0, 1.0],
            1,
            16,
        );
        let q = TransformerParams::from_row_major(2, vec![60.0, 0.0, 0.0, 60.0]).unwrap();
        let r = attention(&q, &p).unwrap();
        assert!(r.attn[1] > 0.999999);
        assert!(convergence_check(&r, 0.1));
    }

    #[test]
    fn stage_aggregation() {
        let x = vec![vec![0.3]; 4];
        let p = prompt(&x, &[8, 8, 8, 16], &[2, 2, 2, 5], vec![1.0], 2, 8);
        let r = attention(&TransformerParams::zeros(1), &p).unwrap();
        assert!((r.stage_mass[2] - 0.75).abs() < 1e-15);
        assert!((r.query_stage_mass - 0.75).abs() < 1e-15);
        assert!((r.stage_mass[5] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn prediction_examples() {
        let x = vec![vec![0.1, 0.2], vec![0.5, -0.3], vec![-1.0, 2.0]];
        let q = TransformerParams::from_row_major(2, vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let p = prompt(&x, &[64, 64, 64], &[0, 1, 2], vec![0.2, 0.4], 0, 64);
        assert!((predict(&q, &p).unwrap() - 64.0).abs() < 1e-12);
        let p = prompt(&x, &[8, 32, 128], &[0, 1, 2], vec![0.2, 0.4], 0, 8);
        assert_eq!(predict(&TransformerParams::zeros(2), &p).unwrap(), 56.0);
        assert!(predict(&TransformerParams::zeros(3), &p).is_err());
    }

    #[test]
    fn loss_examples() {
        let x = vec![vec![1.0], vec![-1.0]];
        let exact = prompt(&x, &[10, 10], &[0, 1], vec![1.0], 0, 10);
        assert_eq!(
            loss(&TransformerParams::zeros(1), &unit_batch(exact)).unwrap(),
            0.0
        );
        // Uniform attention predicts 12; the held-out label is 10.
        let off = prompt(&x, &[10, 14], &[0, 1], vec![1.0], 0, 10);
        assert_eq!(
            loss(&TransformerParams::zeros(1), &unit_batch(off)).unwrap(),
            4.0
        );
        assert!(matches!(
            Batch::new(vec![], LabelScaling::GlobalMax),
            Err(TransformerError::EmptyBatch)
        ));
    }

    #[test]
    fn constant_labels_have_zero_gradient_and_stop_at_once() {
        let x = vec![vec![1.0, 0.5], vec![-1.0, 0.2], vec![0.3, -0.7]];
        let p = prompt(&x, &[40, 40, 40], &[0, 1, 2], vec![0.3, -0.7], 2, 40);
        let b = unit_batch(p);
        assert!(gradient(&TransformerParams::zeros(2), &b)
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
        let (q, trace) = train(&b, &TrainConfig::default()).unwrap();
        assert_eq!(trace.converged_at, Some(1));
        assert_eq!(q, TransformerParams::zeros(2));
    }

    #[test]
    fn hand_computed_gradient_for_two_stages() {
        // d = 1, x = (1, -1), labels (a, b), query x_q = 1 with label a, Q = 0.
        // Attention is (1/2, 1/2), prediction (a + b)/2, error e = (b - a)/2.
        // d pred/dQ = sum_m 1/2 (y_m - pred) x_m x_q = 1/2 (a-b)/2 - 1/2 (b-a)/2 = (a - b)/2.
        // dL/dQ = 2 e (a - b)/2 = -(b - a)^2 / 2.
        let (a, b) = (3.0, 7.0);
        let p = prompt(&[vec![1.0], vec![-1.0]], &[3, 7], &[0, 1], vec![1.0], 0, 3);
        let g = gradient(&TransformerParams::zeros(1), &unit_batch(p)).unwrap();
        assert!((g[0] + (b - a) * (b - a) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_equals_stage_decomposition() {
        let x = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.5, 0.5],
            vec![1.0, 0.0],
        ];
        let w = [10u64, 20, 40, 10];
        let stages = [0, 1, 2, 0];
        let q = TransformerParams::from_row_major(2, vec![0.4, -0.1, 0.9, 0.2]).unwrap();
        for qs in 0..3 {
            let p = prompt(&x, &w, &stages, x[qs].clone(), qs, w[qs]);
            let r = attention(&q, &p).unwrap();
            let f = [10.0, 20.0, 40.0];
            let decomposed: f64 = (0..3)
                .map(|k| r.stage_mass[k] * (f[k] - f[qs]))
                .sum::<f64>()
                .powi(2);
            let l = loss(&q, &unit_batch(p)).unwrap();
            assert!((l - decomposed).abs() < 1e-10 * l.max(1.0));
        }
    }

    #[test]
    fn rounding() {
        assert_eq!(round_threshold(56.5, 8192), 57);
        assert_eq!(round_threshold(56.49, 8192), 56);
        assert_eq!(round_threshold(0.2, 8192), 1);
        assert_eq!(round_threshold(9000.0, 8192), 8192);
        assert_eq!(round_threshold(f64::NAN, 8192), 1);
    }

    #[test]
    fn uniform_attention_over_nine_stages_is_not_converged() {
        let r = AttentionReport {
            attn: vec![1.0 / 9.0; 9],
            stage_mass: vec![1.0 / 9.0; 9],
            query_stage: 4,
            query_stage_mass: 1.0 / 9.0,
        };
        assert!(!convergence_check(&r, 0.1));
        let full = AttentionReport {
            query_stage_mass: 1.0,
            ..r
        };
        assert!(convergence_check(&full, 1e-9));
    }

    #[test]
    fn huge_step_is_reported_as_divergence() {
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]];
        let ps = (0..3)
            .map(|qs| {
                prompt(
                    &x,
                    &[8, 16, 32],
                    &[0, 1, 2],
                    x[qs].clone(),
                    qs,
                    [8, 16, 32][qs],
                )
            })
            .collect();
        let b = Batch::new(ps, LabelScaling::GlobalMax).unwrap();
        let cfg = TrainConfig {
            step_size: 1e3,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&b, &cfg),
            Err(TransformerError::Diverged { .. })
        ));
    }

    #[test]
    fn model_file_round_trip_and_guard() {
        let enc = FeatureEncoding::Scalar;
        let scaler = FeatureScaler {
            shift: vec![0.0; 4],
            scale: vec![1.0; 4],
        };
        let q = TransformerParams::from_row_major(4, (0..16).map(|i| i as f64 * 0.1).collect())
            .unwrap();
        let m = ModelFile::new(&q, 8, enc, scaler, LabelScaling::default());
        let back = ModelFile::from_json(&m.to_json()).unwrap();
        assert_eq!(back.params().unwrap(), q);
        let bad = m.to_json().replace("\"version\": 1", "\"version\": 9");
        assert!(ModelFile::from_json(&bad).is_err());
    }

    fn random_prompt() -> impl Strategy<Value = (TransformerParams, EmbeddedPrompt)> {
        (2usize..5, 2usize..7).prop_flat_map(|(d, m)| {
            (
                prop::collection::vec(-1.5f64..1.5, d * d),
                prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), m),
                prop::collection::vec(1u64..500, m),
                0..m,
            )
                .prop_map(move |(q, xs, ws, qi)| {
                    let stages: Vec<usize> = (0..m).collect();
                    let p = prompt(&xs, &ws, &stages, xs[qi].clone(), qi, ws[qi]);
                    (TransformerParams::from_row_major(d, q).unwrap(), p)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn softmax_normalized_and_prediction_in_hull((q, p) in random_prompt()) {
            let r = attention(&q, &p).unwrap();
            prop_assert!((r.attn.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(r.attn.iter().all(|&a| a >= 0.0));
            let pred = predict(&q, &p).unwrap();
            let labels: Vec<f64> = (0..p.m()).map(|m| p.label(m)).collect();
            let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pred >= lo - 1e-9 && pred <= hi + 1e-9);
        }

        #[test]
        fn gradient_matches_finite_differences((q, p) in random_prompt()) {
            let b = Batch::new(vec![p], LabelScaling::Anchored { alpha: 0.15 }).unwrap();
            let g = gradient(&q, &b).unwrap();
            let h = 1e-5;
            for i in 0..g.len() {
                let mut plus = q.row_major().to_vec();
                let mut minus = plus.clone();
                plus[i] += h;
                minus[i] -= h;
                let lp = loss(&TransformerParams::from_row_major(q.d(), plus).unwrap(), &b).unwrap();
                let lm = loss(&TransformerParams::from_row_major(q.d(), minus).unwrap(), &b).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let scale = g[i].abs().max(fd.abs()).max(1e-3);
                prop_assert!((g[i] - fd).abs() / scale <= 1e-5, "entry {}: {} vs {}", i, g[i], fd);
            }
        }
    }
}
