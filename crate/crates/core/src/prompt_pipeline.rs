//! Labeled examples, corruption, feature scaling, and prompt embedding.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic_model::{optimal_ladder, ModelError, NetworkParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("no densities requested")]
    NoDensities,
    #[error("density {0} is below 2")]
    Density(usize),
    #[error("density {density}: {source}")]
    Model {
        density: usize,
        #[source]
        source: ModelError,
    },
    #[error("jitter percentage {0} must be finite, non-negative and below 100")]
    Jitter(f64),
    #[error("error percentage {0} outside [0, 100)")]
    ErrorPct(f64),
    #[error("cannot fit a scaler on an empty set")]
    EmptyFit,
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("prompt examples span densities {0} and {1}")]
    MixedDensity(usize, usize),
    #[error("prompt needs at least one example")]
    EmptyPrompt,
    #[error("query stage {0} has no example")]
    MissingStage(usize),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// How a collision stage and the channel timing become a feature vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureEncoding {
    /// `(k, T_P, T_s, T_c)`.
    Scalar,
    /// `(k, e_k, T_P, T_s, T_c)` with `e_k` the one-hot code of `k` over
    /// `0..=K`.
    #[default]
    StageOneHot,
}

impl FeatureEncoding {
    pub fn dim(self, k_max: usize) -> usize {
        match self {
            Self::Scalar => 4,
            Self::StageOneHot => k_max + 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// One `(collision stage, timing) -> window` pair for a density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub density: usize,
    pub stage: usize,
    pub tp_us: f64,
    pub ts_us: f64,
    pub tc_us: f64,
    pub label: u64,
    pub corrupted: bool,
}

impl LabeledExample {
    pub fn features(&self, encoding: FeatureEncoding, k_max: usize) -> FeatureVector {
        let mut v = Vec::with_capacity(encoding.dim(k_max));
        v.push(self.stage as f64);
        if encoding == FeatureEncoding::StageOneHot {
            v.extend((0..=k_max).map(|j| if j == self.stage { 1.0 } else { 0.0 }));
        }
        v.extend([self.tp_us, self.ts_us, self.tc_us]);
        FeatureVector(v)
    }
}

fn density_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One example per stage and density, labeled with that density's optimal
/// ladder. Timings get independent multiplicative jitter of up to
/// `jitter_pct` percent.
pub fn generate_dataset(
    densities: &[usize],
    k_max: usize,
    cap: u64,
    params: &NetworkParams,
    jitter_pct: f64,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if densities.is_empty() {
        return Err(PipelineError::NoDensities);
    }
    if !(jitter_pct.is_finite() && (0.0..100.0).contains(&jitter_pct)) {
        return Err(PipelineError::Jitter(jitter_pct));
    }
    let j = jitter_pct / 100.0;
    let mut out = Vec::with_capacity(densities.len() * (k_max + 1));
    for &n in densities {
        if n < 2 {
            return Err(PipelineError::Density(n));
        }
        let fit = optimal_ladder(n, k_max, cap, params)
            .map_err(|source| PipelineError::Model { density: n, source })?;
        let mut rng = density_rng(seed, n as u64);
        let mut jitter = |t: f64| {
            if j > 0.0 {
                t * (1.0 + rng.gen_range(-j..=j))
            } else {
                t
            }
        };
        for (stage, &label) in fit.ladder.thresholds().iter().enumerate() {
            out.push(LabeledExample {
                density: n,
                stage,
                tp_us: jitter(params.payload_us),
                ts_us: jitter(params.success_us),
                tc_us: jitter(params.collision_us),
                label,
                corrupted: false,
            });
        }
    }
    Ok(out)
}

/// `round(w (1 + sign b/100))` clamped to `[1, cap]`.
pub fn corrupt_label(w: u64, b_pct: f64, sign: i8, cap: u64) -> u64 {
    let f = 1.0 + f64::from(sign.signum()) * b_pct / 100.0;
    let v = (w as f64 * f).round();
    (v.max(1.0) as u64).clamp(1, cap.max(1))
}

/// Scales every label up or down by `b_pct` percent, the direction drawn
/// uniformly per example. `b_pct = 0` leaves the examples untouched.
pub fn corrupt_thresholds(
    examples: &[LabeledExample],
    b_pct: f64,
    cap: u64,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if !(b_pct.is_finite() && (0.0..100.0).contains(&b_pct)) {
        return Err(PipelineError::ErrorPct(b_pct));
    }
    if b_pct == 0.0 {
        return Ok(examples.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(examples
        .iter()
        .map(|e| {
            let sign = if rng.gen::<bool>() { 1 } else { -1 };
            LabeledExample {
                label: corrupt_label(e.label, b_pct, sign, cap),
                corrupted: true,
                ..e.clone()
            }
        })
        .collect())
}

/// Per-dimension z-score map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaler {
    /// Constant dimensions get unit scale and therefore map to zero.
    pub fn fit(features: &[FeatureVector]) -> Result<Self> {
        let first = features.first().ok_or(PipelineError::EmptyFit)?;
        let d = first.dim();
        if let Some(f) = features.iter().find(|f| f.dim() != d) {
            return Err(PipelineError::Dimension {
                expected: d,
                got: f.dim(),
            });
        }
        let n = features.len() as f64;
        let shift: Vec<f64> = (0..d)
            .map(|i| features.iter().map(|f| f.0[i]).sum::<f64>() / n)
            .collect();
        let scale = (0..d)
            .map(|i| {
                let var = features
                    .iter()
                    .map(|f| (f.0[i] - shift[i]).powi(2))
                    .sum::<f64>()
                    / n;
                let sd = var.sqrt();
                if sd > 1e-12 * shift[i].abs().max(1.0) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { shift, scale })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    fn check(&self, x: &FeatureVector) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(PipelineError::Dimension {
                expected: self.dim(),
                got: x.dim(),
            });
        }
        Ok(())
    }

    pub fn apply(&self, x: &FeatureVector) -> Result<FeatureVector> {
        self.check(x)?;
        Ok(FeatureVector(
            x.0.iter()
                .zip(self.shift.iter().zip(&self.scale))
                .map(|(v, (m, s))| (v - m) / s)
                .collect(),
        ))
    }

    pub fn invert(&self, x: &FeatureVector) -> Result<FeatureVector> {
        self.check(x)?;
        Ok(FeatureVector(
            x.0.iter()
                .zip(self.shift.iter().zip(&self.scale))
                .map(|(v, (m, s))| v * s + m)
                .collect(),
        ))
    }
}

pub fn fit_scaler(
    examples: &[LabeledExample],
    encoding: FeatureEncoding,
    k_max: usize,
) -> Result<FeatureScaler> {
    let feats: Vec<_> = examples
        .iter()
        .map(|e| e.features(encoding, k_max))
        .collect();
    FeatureScaler::fit(&feats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptExample {
    pub stage: usize,
    pub x: FeatureVector,
    pub w: u64,
    pub corrupted: bool,
}

/// In-context examples plus a query, all features normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub density: usize,
    pub examples: Vec<PromptExample>,
    pub query_stage: usize,
    pub query: FeatureVector,
    pub query_label: u64,
}

/// Encodes and normalizes examples that all share one density.
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    pub scaler: FeatureScaler,
    pub encoding: FeatureEncoding,
    pub k_max: usize,
}

impl PromptBuilder {
    pub fn new(scaler: FeatureScaler, encoding: FeatureEncoding, k_max: usize) -> Result<Self> {
        let expected = encoding.dim(k_max);
        if scaler.dim() != expected {
            return Err(PipelineError::Dimension {
                expected,
                got: scaler.dim(),
            });
        }
        Ok(Self {
            scaler,
            encoding,
            k_max,
        })
    }

    fn encode(&self, e: &LabeledExample) -> Result<PromptExample> {
        Ok(PromptExample {
            stage: e.stage,
            x: self.scaler.apply(&e.features(self.encoding, self.k_max))?,
            w: e.label,
            corrupted: e.corrupted,
        })
    }

    /// All `examples` in context, the first example at `query_stage` as the
    /// query.
    pub fn build(&self, examples: &[LabeledExample], query_stage: usize) -> Result<Prompt> {
        let refs: Vec<&LabeledExample> = examples.iter().collect();
        self.build_from(&refs, examples, query_stage)
    }

    fn build_from(
        &self,
        context: &[&LabeledExample],
        pool: &[LabeledExample],
        query_stage: usize,
    ) -> Result<Prompt> {
        let first = context.first().ok_or(PipelineError::EmptyPrompt)?;
        if let Some(e) = context
            .iter()
            .copied()
            .chain(pool)
            .find(|e| e.density != first.density)
        {
            return Err(PipelineError::MixedDensity(first.density, e.density));
        }
        let q = pool
            .iter()
            .find(|e| e.stage == query_stage)
            .ok_or(PipelineError::MissingStage(query_stage))?;
        let q = self.encode(q)?;
        Ok(Prompt {
            density: first.density,
            examples: context
                .iter()
                .map(|e| self.encode(e))
                .collect::<Result<_>>()?,
            query_stage,
            query: q.x,
            query_label: q.w,
        })
    }

    /// Context of `examples.len()` draws with replacement from `examples`;
    /// one slot is overwritten with the query example when the draws miss it.
    pub fn resampled<R: Rng>(
        &self,
        examples: &[LabeledExample],
        query_stage: usize,
        rng: &mut R,
    ) -> Result<Prompt> {
        let m = examples.len();
        if m == 0 {
            return Err(PipelineError::EmptyPrompt);
        }
        let q = examples
            .iter()
            .position(|e| e.stage == query_stage)
            .ok_or(PipelineError::MissingStage(query_stage))?;
        let mut idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..m)).collect();
        if !idx.iter().any(|&i| examples[i].stage == query_stage) {
            let slot = rng.gen_range(0..m);
            idx[slot] = q;
        }
        let context: Vec<&LabeledExample> = idx.iter().map(|&i| &examples[i]).collect();
        self.build_from(&context, examples, query_stage)
    }
}

/// Splits a dataset into per-density groups in first-seen order.
pub fn group_by_density(examples: &[LabeledExample]) -> Vec<(usize, Vec<LabeledExample>)> {
    let mut groups: Vec<(usize, Vec<LabeledExample>)> = Vec::new();
    for e in examples {
        match groups.iter_mut().find(|(d, _)| *d == e.density) {
            Some((_, g)) => g.push(e.clone()),
            None => groups.push((e.density, vec![e.clone()])),
        }
    }
    groups
}

/// Training prompts: for every density and query stage, the full prompt
/// followed by `resample_per_query` prompts with resampled context.
pub fn build_training_prompts(
    dataset: &[LabeledExample],
    builder: &PromptBuilder,
    resample_per_query: usize,
    seed: u64,
) -> Result<Vec<Prompt>> {
    let mut out = Vec::new();
    for (density, group) in group_by_density(dataset) {
        let mut rng = density_rng(seed, density as u64);
        let mut stages: Vec<usize> = group.iter().map(|e| e.stage).collect();
        stages.dedup();
        for &q in &stages {
            out.push(builder.build(&group, q)?);
            for _ in 0..resample_per_query {
                out.push(builder.resampled(&group, q, &mut rng)?);
            }
        }
    }
    Ok(out)
}

/// Column-stacked prompt: `M` columns `(x_m; W_m)` then `(x_q; 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPrompt {
    d: usize,
    columns: Vec<Vec<f64>>,
    stages: Vec<usize>,
    query_stage: usize,
    query_label: f64,
}

impl EmbeddedPrompt {
    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of in-context columns `M`.
    pub fn m(&self) -> usize {
        self.columns.len() - 1
    }

    /// Full `(d+1) x (M+1)` matrix, one inner vector per column.
    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn x(&self, m: usize) -> &[f64] {
        &self.columns[m][..self.d]
    }

    pub fn label(&self, m: usize) -> f64 {
        self.columns[m][self.d]
    }

    pub fn query(&self) -> &[f64] {
        &self.columns[self.m()][..self.d]
    }

    pub fn stages(&self) -> &[usize] {
        &self.stages
    }

    pub fn query_stage(&self) -> usize {
        self.query_stage
    }

    /// Held-out query label; not part of the matrix.
    pub fn query_label(&self) -> f64 {
        self.query_label
    }
}

pub fn embed(prompt: &Prompt) -> Result<EmbeddedPrompt> {
    let d = prompt.query.dim();
    if prompt.examples.is_empty() {
        return Err(PipelineError::EmptyPrompt);
    }
    let mut columns = Vec::with_capacity(prompt.examples.len() + 1);
    for e in &prompt.examples {
        if e.x.dim() != d {
            return Err(PipelineError::Dimension {
                expected: d,
                got: e.x.dim(),
            });
        }
        let mut c = e.x.0.clone();
        c.push(e.w as f64);
        columns.push(c);
    }
    let mut q = prompt.query.0.clone();
    q.push(0.0);
    columns.push(q);
    Ok(EmbeddedPrompt {
        d,
        columns,
        stages: prompt.examples.iter().map(|e| e.stage).collect(),
        query_stage: prompt.query_stage,
        query_label: prompt.query_label as f64,
    })
}

/// Smallest distance between feature vectors of different stages.
pub fn feature_gap(examples: &[PromptExample]) -> f64 {
    let mut gap = f64::INFINITY;
    for (i, a) in examples.iter().enumerate() {
        for b in &examples[i + 1..] {
            if a.stage != b.stage {
                gap = gap.min(a.x.distance(&b.x));
            }
        }
    }
    gap
}
