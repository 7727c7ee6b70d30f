//! Trajectory-matching rewards from entropically regularized optimal transport.
//!
//! A behavior trajectory and an expert trajectory are both encoded into
//! embedding sequences. The pairwise cost matrix between the two sequences is
//! solved with log-domain Sinkhorn iterations under uniform marginals, and each
//! behavior step is rewarded with the negated cost it transports.

use thiserror::Error;

/// Pairwise cost used between embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostMetric {
    Cosine,
    Euclidean,
}

impl CostMetric {
    pub fn name(self) -> &'static str {
        match self {
            CostMetric::Cosine => "cosine",
            CostMetric::Euclidean => "euclidean",
        }
    }
}

impl std::str::FromStr for CostMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(CostMetric::Cosine),
            "euclidean" => Ok(CostMetric::Euclidean),
            other => Err(format!("unknown cost metric `{other}`")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtError {
    #[error("degenerate embedding: zero norm under cosine metric")]
    DegenerateEmbedding,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty {0} sequence")]
    EmptySequence(&'static str),
    #[error("non-finite embedding entry")]
    NonFiniteEmbedding,
    #[error("invalid cost matrix: {0}")]
    InvalidCost(String),
    #[error("invalid sinkhorn parameter: {0}")]
    InvalidParameter(String),
    #[error("sinkhorn did not converge in {iterations} iterations (marginal error {marginal_error:e})")]
    NotConverged { iterations: usize, marginal_error: f64 },
    #[error("epsilon too small for cost scale")]
    EpsilonTooSmall,
}

/// Cost between two embeddings.
///
/// Cosine cost is `1 - cos(a, b)` clamped into `[0, 2]`; a zero-norm vector is
/// rejected instead of being mapped to an arbitrary cost.
pub fn pairwise_cost(a: &[f64], b: &[f64], metric: CostMetric) -> Result<f64, OtError> {
    if a.len() != b.len() {
        return Err(OtError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(OtError::NonFiniteEmbedding);
    }
    match metric {
        CostMetric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(OtError::DegenerateEmbedding);
            }
            // sqrt(na * na) == na exactly, so identical vectors cost exactly 0.
            let cos = dot / (na * nb).sqrt();
            Ok((1.0 - cos).clamp(0.0, 2.0))
        }
        CostMetric::Euclidean => Ok(a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()),
    }
}

/// Dense row-major cost matrix between a behavior sequence (rows) and an
/// expert sequence (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    metric: Option<CostMetric>,
}

impl CostMatrix {
    /// Wraps raw entries. Entries must be finite and nonnegative.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, OtError> {
        let r = rows.len();
        if r == 0 {
            return Err(OtError::InvalidCost("no rows".into()));
        }
        let c = rows[0].len();
        if c == 0 {
            return Err(OtError::InvalidCost("no columns".into()));
        }
        let mut entries = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(OtError::InvalidCost("ragged rows".into()));
            }
            entries.extend_from_slice(row);
        }
        let m = CostMatrix {
            rows: r,
            cols: c,
            entries,
            metric: None,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<(), OtError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(OtError::InvalidCost("empty matrix".into()));
        }
        if let Some(bad) = self.entries.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(OtError::InvalidCost(format!("entry {bad} is not a finite nonnegative cost")));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn metric(&self) -> Option<CostMetric> {
        self.metric
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn max_entry(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }
}

fn check_sequence<E: AsRef<[f64]>>(seq: &[E], name: &'static str) -> Result<usize, OtError> {
    let first = seq.first().ok_or(OtError::EmptySequence(name))?;
    let dim = first.as_ref().len();
    for e in seq {
        let e = e.as_ref();
        if e.len() != dim {
            return Err(OtError::DimensionMismatch {
                expected: dim,
                got: e.len(),
            });
        }
    }
    Ok(dim)
}

pub fn build_cost_matrix<B, E>(
    behavior: &[B],
    expert: &[E],
    metric: CostMetric,
) -> Result<CostMatrix, OtError>
where
    B: AsRef<[f64]>,
    E: AsRef<[f64]>,
{
    let db = check_sequence(behavior, "behavior")?;
    let de = check_sequence(expert, "expert")?;
    if db != de {
        return Err(OtError::DimensionMismatch {
            expected: db,
            got: de,
        });
    }
    let mut entries = Vec::with_capacity(behavior.len() * expert.len());
    for b in behavior {
        for e in expert {
            entries.push(pairwise_cost(b.as_ref(), e.as_ref(), metric)?);
        }
    }
    Ok(CostMatrix {
        rows: behavior.len(),
        cols: expert.len(),
        entries,
        metric: Some(metric),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.05,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

/// Entropic coupling between behavior rows and expert columns.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    coupling: Vec<f64>,
    pub epsilon: f64,
    pub iterations_used: usize,
    pub marginal_error: f64,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coupling[i * self.cols..(i + 1) * self.cols]
    }

    pub fn coupling(&self) -> &[f64] {
        &self.coupling
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    /// `<C, mu>`, the unregularized transported cost.
    pub fn transported_cost(&self, cost: &CostMatrix) -> f64 {
        self.coupling
            .iter()
            .zip(cost.entries())
            .map(|(m, c)| m * c)
            .sum()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Solves `min <C, mu> - eps * H(mu)` over couplings with uniform marginals
/// `1/rows` and `1/cols`, using stabilized dual-potential updates.
///
/// The column constraint holds to rounding after every sweep, so convergence
/// is tested on the row marginals, which fall out of the next row update.
pub fn sinkhorn(cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<TransportPlan, OtError> {
    cost.validate()?;
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(OtError::InvalidParameter(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    if !(cfg.tol > 0.0) {
        return Err(OtError::InvalidParameter(format!("tol must be positive, got {}", cfg.tol)));
    }
    if cfg.max_iters == 0 {
        return Err(OtError::InvalidParameter("max_iters must be at least 1".into()));
    }
    if !(cost.max_entry() / cfg.epsilon).is_finite() {
        return Err(OtError::EpsilonTooSmall);
    }

    let (n, m) = (cost.rows, cost.cols);
    let eps = cfg.epsilon;
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    // Potentials are kept divided by epsilon.
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];
    let mut lse_rows = vec![0.0f64; n];

    let mut iterations = 0;
    let mut row_error;
    loop {
        for (i, lse) in lse_rows.iter_mut().enumerate() {
            let row = cost.row(i);
            *lse = log_sum_exp(g.iter().zip(row).map(|(gj, c)| gj - c / eps));
        }
        if iterations > 0 {
            row_error = f
                .iter()
                .zip(&lse_rows)
                .map(|(fi, l)| ((fi + l).exp() - a).abs())
                .fold(0.0, f64::max);
            if !row_error.is_finite() {
                return Err(OtError::EpsilonTooSmall);
            }
            if row_error <= cfg.tol || iterations == cfg.max_iters {
                break;
            }
        }
        for (fi, l) in f.iter_mut().zip(&lse_rows) {
            *fi = log_a - l;
        }
        for (j, gj) in g.iter_mut().enumerate() {
            let lse = log_sum_exp((0..n).map(|i| f[i] - cost.get(i, j) / eps));
            *gj = log_b - lse;
        }
        if f.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(OtError::EpsilonTooSmall);
        }
        iterations += 1;
    }

    let mut coupling = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            coupling.push((f[i] + g[j] - cost.get(i, j) / eps).exp().min(1.0));
        }
    }
    let mut plan = TransportPlan {
        rows: n,
        cols: m,
        coupling,
        epsilon: eps,
        iterations_used: iterations,
        marginal_error: 0.0,
    };
    let row_dev = plan.row_sums().iter().map(|s| (s - a).abs()).fold(0.0, f64::max);
    let col_dev = plan.col_sums().iter().map(|s| (s - b).abs()).fold(0.0, f64::max);
    plan.marginal_error = row_dev.max(col_dev);
    if plan.marginal_error > cfg.tol {
        return Err(OtError::NotConverged {
            iterations,
            marginal_error: plan.marginal_error.max(row_error),
        });
    }
    Ok(plan)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtRewardConfig {
    pub metric: CostMetric,
    pub sinkhorn: SinkhornConfig,
    pub scale: f64,
}

impl Default for OtRewardConfig {
    fn default() -> Self {
        OtRewardConfig {
            metric: CostMetric::Cosine,
            sinkhorn: SinkhornConfig::default(),
            scale: 10.0,
        }
    }
}

/// Per-step OT rewards of one behavior trajectory against one expert trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardVector {
    pub per_step: Vec<f64>,
    pub total: f64,
    /// Unsigned, unscaled `<C, mu*>` kept for diagnostics.
    pub transported_cost: f64,
}

pub fn ot_rewards<B, E>(behavior: &[B], expert: &[E], cfg: &OtRewardConfig) -> Result<RewardVector, OtError>
where
    B: AsRef<[f64]>,
    E: AsRef<[f64]>,
{
    if !(cfg.scale > 0.0 && cfg.scale.is_finite()) {
        return Err(OtError::InvalidParameter(format!("reward scale must be positive, got {}", cfg.scale)));
    }
    let cost = build_cost_matrix(behavior, expert, cfg.metric)?;
    let plan = sinkhorn(&cost, &cfg.sinkhorn)?;
    Ok(rewards_from_plan(&cost, &plan, cfg.scale))
}

pub fn rewards_from_plan(cost: &CostMatrix, plan: &TransportPlan, scale: f64) -> RewardVector {
    let per_step: Vec<f64> = (0..cost.rows())
        .map(|i| {
            let moved: f64 = cost.row(i).iter().zip(plan.row(i)).map(|(c, m)| c * m).sum();
            -scale * moved
        })
        .collect();
    let total = per_step.iter().sum();
    RewardVector {
        per_step,
        total,
        transported_cost: plan.transported_cost(cost),
    }
}
