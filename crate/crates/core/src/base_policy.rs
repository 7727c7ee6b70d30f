//! Query-only base policies built from demonstrations.

use std::hash::{Hash, Hasher};

use thiserror::Error;

use crate::demos::DemoSet;
use crate::encoder::{Encoder, EncoderError};
use crate::nn::{DenseNet, NnError};
use crate::ot::CostMetric;

#[derive(Debug, Error)]
pub enum BasePolicyError {
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("base policy needs at least one demonstration step")]
    Empty,
    #[error("invalid base policy parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaseKind {
    OpenLoop,
    Vinn,
    Bc,
}

impl BaseKind {
    pub fn name(self) -> &'static str {
        match self {
            BaseKind::OpenLoop => "open_loop",
            BaseKind::Vinn => "vinn",
            BaseKind::Bc => "bc",
        }
    }
}

impl std::str::FromStr for BaseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "open_loop" => Ok(BaseKind::OpenLoop),
            "vinn" => Ok(BaseKind::Vinn),
            "bc" => Ok(BaseKind::Bc),
            other => Err(format!("unknown base policy `{other}`")),
        }
    }
}

/// Replays one demonstration's actions by timestep, holding the last action
/// past the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenLoopPolicy {
    action_sequence: Vec<Vec<f64>>,
}

impl OpenLoopPolicy {
    pub fn new(action_sequence: Vec<Vec<f64>>) -> Result<Self, BasePolicyError> {
        if action_sequence.is_empty() {
            return Err(BasePolicyError::Empty);
        }
        Ok(OpenLoopPolicy { action_sequence })
    }

    pub fn horizon(&self) -> usize {
        self.action_sequence.len()
    }

    pub fn act(&self, t: usize) -> &[f64] {
        &self.action_sequence[t.min(self.action_sequence.len() - 1)]
    }
}

/// k-nearest-neighbor retrieval over demo embeddings with locally weighted
/// averaging of the retrieved actions.
#[derive(Clone, Debug, PartialEq)]
pub struct VinnIndex {
    embeddings: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    k: usize,
    temperature: f64,
    metric: CostMetric,
}

impl VinnIndex {
    pub fn new(
        entries: Vec<(Vec<f64>, Vec<f64>)>,
        k: usize,
        temperature: f64,
        metric: CostMetric,
    ) -> Result<Self, BasePolicyError> {
        if entries.is_empty() {
            return Err(BasePolicyError::Empty);
        }
        if k == 0 {
            return Err(BasePolicyError::InvalidParameter("k must be at least 1".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(BasePolicyError::InvalidParameter(format!("temperature {temperature}")));
        }
        let dim = entries[0].0.len();
        let adim = entries[0].1.len();
        for (z, a) in &entries {
            if z.len() != dim {
                return Err(BasePolicyError::DimensionMismatch {
                    expected: dim,
                    got: z.len(),
                });
            }
            if a.len() != adim {
                return Err(BasePolicyError::DimensionMismatch {
                    expected: adim,
                    got: a.len(),
                });
            }
        }
        let (embeddings, actions) = entries.into_iter().unzip();
        Ok(VinnIndex {
            embeddings,
            actions,
            k,
            temperature,
            metric,
        })
    }

    pub fn from_demos(
        demos: &DemoSet,
        encoder: &Encoder,
        k: usize,
        temperature: f64,
        metric: CostMetric,
    ) -> Result<Self, BasePolicyError> {
        let mut entries = Vec::with_capacity(demos.pair_count());
        for t in &demos.trajectories {
            for (o, a) in t.pairs() {
                entries.push((encoder.encode(o)?, a.to_vec()));
            }
        }
        Self::new(entries, k, temperature, metric)
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn effective_k(&self) -> usize {
        self.k.min(self.embeddings.len())
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.metric {
            CostMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            // zero-norm vectors are treated as maximally distant here
            CostMetric::Cosine => crate::ot::pairwise_cost(a, b, CostMetric::Cosine).unwrap_or(2.0),
        }
    }

    /// Indices and distances of the nearest entries, ties broken by index.
    pub fn neighbors(&self, z: &[f64]) -> Result<Vec<(usize, f64)>, BasePolicyError> {
        let dim = self.embeddings[0].len();
        if z.len() != dim {
            return Err(BasePolicyError::DimensionMismatch {
                expected: dim,
                got: z.len(),
            });
        }
        let mut scored: Vec<(usize, f64)> =
            self.embeddings.iter().enumerate().map(|(i, e)| (i, self.distance(z, e))).collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        scored.truncate(self.effective_k());
        Ok(scored)
    }

    pub fn act(&self, z: &[f64]) -> Result<Vec<f64>, BasePolicyError> {
        let nn = self.neighbors(z)?;
        let d_min = nn[0].1;
        // exp(-(d - d_min) / T) normalizes to the same weights as exp(-d / T)
        let w: Vec<f64> = nn.iter().map(|(_, d)| (-(d - d_min) / self.temperature).exp()).collect();
        let total: f64 = w.iter().sum();
        let dim = self.actions[0].len();
        let mut out = vec![0.0; dim];
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for ((i, _), wi) in nn.iter().zip(&w) {
            for (d, a) in self.actions[*i].iter().enumerate() {
                out[d] += wi / total * a;
                lo[d] = lo[d].min(*a);
                hi[d] = hi[d].max(*a);
            }
        }
        // a convex blend lies inside the neighbours' range; rounding can
        // push it one ulp outside
        for d in 0..dim {
            out[d] = out[d].clamp(lo[d], hi[d]);
        }
        Ok(out)
    }
}

/// Open-loop replay over several demos: the demo whose first embedding is
/// nearest to the episode's first embedding is replayed.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenLoopBank {
    starts: Vec<Vec<f64>>,
    policies: Vec<OpenLoopPolicy>,
}

impl OpenLoopBank {
    pub fn from_demos(demos: &DemoSet, encoder: &Encoder) -> Result<Self, BasePolicyError> {
        let mut starts = Vec::new();
        let mut policies = Vec::new();
        for t in &demos.trajectories {
            starts.push(encoder.encode(&t.observations[0])?);
            policies.push(OpenLoopPolicy::new(t.actions.clone())?);
        }
        if policies.is_empty() {
            return Err(BasePolicyError::Empty);
        }
        Ok(OpenLoopBank { starts, policies })
    }

    pub fn select(&self, z0: &[f64]) -> Result<usize, BasePolicyError> {
        let dim = self.starts[0].len();
        if z0.len() != dim {
            return Err(BasePolicyError::DimensionMismatch {
                expected: dim,
                got: z0.len(),
            });
        }
        let d = |s: &[f64]| s.iter().zip(z0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut best = 0;
        for (i, s) in self.starts.iter().enumerate().skip(1) {
            if d(s) < d(&self.starts[best]) {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn policy(&self, i: usize) -> &OpenLoopPolicy {
        &self.policies[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BasePolicy {
    OpenLoop(OpenLoopBank),
    Vinn(VinnIndex),
    /// Parametric behavior-cloning actor on embeddings.
    Bc(DenseNet),
}

/// Per-episode state of a base policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeCursor {
    pub demo: usize,
}

impl BasePolicy {
    pub fn kind(&self) -> BaseKind {
        match self {
            BasePolicy::OpenLoop(_) => BaseKind::OpenLoop,
            BasePolicy::Vinn(_) => BaseKind::Vinn,
            BasePolicy::Bc(_) => BaseKind::Bc,
        }
    }

    pub fn start_episode(&self, z0: &[f64]) -> Result<EpisodeCursor, BasePolicyError> {
        match self {
            BasePolicy::OpenLoop(bank) => Ok(EpisodeCursor { demo: bank.select(z0)? }),
            _ => Ok(EpisodeCursor { demo: 0 }),
        }
    }

    pub fn act(&self, cursor: EpisodeCursor, z: &[f64], t: usize) -> Result<Vec<f64>, BasePolicyError> {
        match self {
            BasePolicy::OpenLoop(bank) => Ok(bank.policy(cursor.demo).act(t).to_vec()),
            BasePolicy::Vinn(index) => index.act(z),
            BasePolicy::Bc(actor) => Ok(actor.forward(z)?),
        }
    }

    /// Hash of every stored value; used to assert the policy is never
    /// modified during online learning.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let mut feed = |vals: &mut dyn Iterator<Item = &f64>| {
            for v in vals {
                v.to_bits().hash(&mut h);
            }
        };
        match self {
            BasePolicy::OpenLoop(bank) => {
                feed(&mut bank.starts.iter().flatten());
                feed(&mut bank.policies.iter().flat_map(|p| p.action_sequence.iter().flatten()));
            }
            BasePolicy::Vinn(idx) => {
                feed(&mut idx.embeddings.iter().flatten());
                feed(&mut idx.actions.iter().flatten());
                feed(&mut std::iter::once(&idx.temperature));
                idx.k.hash(&mut h);
            }
            BasePolicy::Bc(net) => feed(&mut net.params()),
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::record_demos;
    use crate::env::{reset_at, step, success, TaskConfig, TaskKind};
    use proptest::prelude::*;

    #[test]
    fn open_loop_indexing_and_clamp() {
        let p = OpenLoopPolicy::new(vec![vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(p.act(1), &[1.0]);
        assert_eq!(p.act(99), &[2.0]);
        assert!(OpenLoopPolicy::new(vec![]).is_err());
    }

    #[test]
    fn open_loop_replays_demo_states() {
        let cfg = TaskConfig::new(TaskKind::Insert);
        let demos = record_demos(&cfg).unwrap();
        let enc = Encoder::identity(cfg.obs_dim());
        let bank = OpenLoopBank::from_demos(&demos, &enc).unwrap();
        for (i, traj) in demos.trajectories.iter().enumerate() {
            let (mut s, obs0) = reset_at(&cfg, cfg.demo_positions[i]).unwrap();
            assert_eq!(bank.select(&obs0).unwrap(), i);
            let policy = bank.policy(i);
            for t in 0..policy.horizon() {
                let (n, obs, _) = step(&s, policy.act(t), &cfg);
                assert_eq!(obs, traj.observations[t + 1]);
                s = n;
            }
            assert!(success(&s, &cfg));
        }
    }

    fn index(entries: Vec<(Vec<f64>, Vec<f64>)>, k: usize, temp: f64) -> VinnIndex {
        VinnIndex::new(entries, k, temp, CostMetric::Euclidean).unwrap()
    }

    #[test]
    fn vinn_exact_match_with_k1() {
        let idx = index(vec![(vec![0.0, 0.0], vec![1.0]), (vec![1.0, 1.0], vec![-1.0])], 1, 1.0);
        assert_eq!(idx.act(&[1.0, 1.0]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn vinn_equal_distances_average() {
        let idx = index(vec![(vec![-1.0], vec![1.0]), (vec![1.0], vec![3.0])], 2, 1.0);
        assert_eq!(idx.act(&[0.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn vinn_equal_actions_are_reproduced_exactly() {
        let entries = (0..3).map(|i| (vec![i as f64 * 0.37], vec![1.0, -1.0])).collect();
        let idx = index(entries, 3, 0.7);
        for q in [0.05, 0.2, 0.61, 3.0] {
            assert_eq!(idx.act(&[q]).unwrap(), vec![1.0, -1.0]);
        }
    }

    #[test]
    fn vinn_weight_formula() {
        let idx = index(vec![(vec![0.0], vec![0.0]), (vec![3f64.ln()], vec![4.0])], 2, 1.0);
        let a = idx.act(&[0.0]).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vinn_k_capped_and_ties_by_index() {
        let idx = index(vec![(vec![1.0], vec![5.0]), (vec![-1.0], vec![7.0])], 10, 1.0);
        assert_eq!(idx.effective_k(), 2);
        let tight = index(vec![(vec![1.0], vec![5.0]), (vec![-1.0], vec![7.0])], 1, 1.0);
        assert_eq!(tight.neighbors(&[0.0]).unwrap()[0].0, 0);
        assert_eq!(tight.act(&[0.0]).unwrap(), vec![5.0]);
        assert!(matches!(idx.act(&[0.0, 1.0]), Err(BasePolicyError::DimensionMismatch { .. })));
        assert!(VinnIndex::new(vec![], 1, 1.0, CostMetric::Euclidean).is_err());
        assert!(VinnIndex::new(vec![(vec![0.0], vec![0.0])], 0, 1.0, CostMetric::Euclidean).is_err());
    }

    #[test]
    fn fingerprint_tracks_contents() {
        let a = BasePolicy::Vinn(index(vec![(vec![0.0], vec![1.0])], 1, 1.0));
        let b = BasePolicy::Vinn(index(vec![(vec![0.0], vec![1.5])], 1, 1.0));
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    proptest! {
        #[test]
        fn vinn_output_in_hull(
            pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..20),
            q in (-2.0f64..2.0, -2.0f64..2.0),
            k in 1usize..6,
            temp in 0.05f64..5.0,
        ) {
            let entries: Vec<_> = pts.iter().map(|(x, y, a)| (vec![*x, *y], vec![*a])).collect();
            let idx = index(entries, k, temp);
            let nn = idx.neighbors(&[q.0, q.1]).unwrap();
            let lo = nn.iter().map(|(i, _)| pts[*i].2).fold(f64::INFINITY, f64::min);
            let hi = nn.iter().map(|(i, _)| pts[*i].2).fold(f64::NEG_INFINITY, f64::max);
            let a = idx.act(&[q.0, q.1]).unwrap()[0];
            prop_assert!(a >= lo && a <= hi);
            prop_assert_eq!(a.to_bits(), idx.act(&[q.0, q.1]).unwrap()[0].to_bits());
        }
    }
}
