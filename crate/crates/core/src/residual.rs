//! Residual actor-critic over a frozen base policy.
//!
//! The actor proposes a bounded offset `a_r` given the embedding and the base
//! action; the executed action is `clamp(a_b + a_r)`. Two critics score
//! `(z, a_b, a_r)` and are trained on n-step targets bootstrapped from the
//! minimum of two slowly tracking target critics.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::nn::{adam_step, Activation, AdamConfig, AdamState, DenseNet, ForwardCache, Gradients, Matrix, NnError};

#[derive(Debug, Error)]
pub enum ResidualError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite actor output")]
    NonFiniteAction,
    #[error("non-finite {0} loss")]
    NonFiniteLoss(&'static str),
    #[error("transition {0} is not labeled with a reward")]
    Unlabeled(usize),
    #[error("still in seed phase: {have} labeled transitions, need {need}")]
    SeedPhase { have: usize, need: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid residual config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Guidance {
    Guided,
    SemiGuided,
    Unguided,
}

impl Guidance {
    pub fn name(self) -> &'static str {
        match self {
            Guidance::Guided => "guided",
            Guidance::SemiGuided => "semi_guided",
            Guidance::Unguided => "unguided",
        }
    }

    /// Offset bound applied at this guidance level.
    pub fn offset_bound(self, beta: f64) -> f64 {
        match self {
            Guidance::SemiGuided => beta / 2.0,
            Guidance::Guided | Guidance::Unguided => beta,
        }
    }
}

impl std::str::FromStr for Guidance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "guided" => Ok(Guidance::Guided),
            "semi_guided" => Ok(Guidance::SemiGuided),
            "unguided" => Ok(Guidance::Unguided),
            other => Err(format!("unknown guidance level `{other}`")),
        }
    }
}

/// Per-dimension 0/1 multiplier on residual offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionMask {
    pub level: Guidance,
    values: Vec<f64>,
}

impl ActionMask {
    /// Guided exploration only offsets the last action dimension (the
    /// vertical axis of the planar tasks).
    pub fn for_level(level: Guidance, action_dim: usize) -> Result<Self, ResidualError> {
        let values = match level {
            Guidance::Guided | Guidance::SemiGuided if action_dim < 2 => {
                return Err(ResidualError::InvalidConfig(
                    "guided exploration needs at least two action dimensions".into(),
                ))
            }
            Guidance::Guided => (0..action_dim).map(|i| if i + 1 == action_dim { 1.0 } else { 0.0 }).collect(),
            Guidance::SemiGuided | Guidance::Unguided => vec![1.0; action_dim],
        };
        Ok(ActionMask { level, values })
    }

    pub fn from_values(level: Guidance, values: Vec<f64>) -> Self {
        ActionMask { level, values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_active(&self, dim: usize) -> bool {
        self.values[dim] != 0.0
    }

    pub fn apply(&self, a: &mut [f64]) {
        for (v, m) in a.iter_mut().zip(&self.values) {
            if *m == 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Element-wise `a_b + a_r`, clamped to the action bounds.
pub fn compose_action(a_b: &[f64], a_r: &[f64], low: f64, high: f64) -> Vec<f64> {
    a_b.iter().zip(a_r).map(|(b, r)| (b + r).clamp(low, high)).collect()
}

/// `sum_i gamma^i r_i + gamma^n * bootstrap` when the window is full and a
/// bootstrap value is present; truncated windows drop the bootstrap.
pub fn nstep_return(rewards: &[f64], gamma: f64, n: usize, bootstrap: Option<f64>) -> f64 {
    let mut y = 0.0;
    let mut g = 1.0;
    for r in rewards.iter().take(n) {
        y += g * r;
        g *= gamma;
    }
    match bootstrap {
        Some(q) if rewards.len() >= n => y + gamma.powi(n as i32) * q,
        _ => y,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub z: Vec<f64>,
    /// Executed (composed, clamped) action.
    pub action: Vec<f64>,
    pub base_action: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub next_z: Vec<f64>,
    pub reward: Option<f64>,
    /// Last transition of its episode.
    pub last: bool,
}

impl Transition {
    /// Offset actually applied, `a_t - a_b_t`.
    pub fn offset(&self) -> Vec<f64> {
        self.action.iter().zip(&self.base_action).map(|(a, b)| a - b).collect()
    }
}

/// FIFO ring of labeled transitions; episodes are inserted whole.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

/// Sampled n-step windows, one row per window.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Matrix,
    pub z: Matrix,
    pub base_action: Matrix,
    pub offset: Matrix,
    /// Discounted reward sum over the (possibly truncated) window.
    pub reward_sum: Vec<f64>,
    /// `gamma^n` for full windows, 0 when the episode ended inside the window.
    pub bootstrap_discount: Vec<f64>,
    pub boot_obs: Matrix,
    pub boot_z: Matrix,
    pub boot_base_action: Matrix,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reward_sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward_sum.is_empty()
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Appends a fully labeled episode, evicting the oldest transitions.
    pub fn push_episode(&mut self, mut episode: Vec<Transition>) -> Result<(), ResidualError> {
        if let Some(i) = episode.iter().position(|t| t.reward.is_none_or(|r| !r.is_finite())) {
            return Err(ResidualError::Unlabeled(i));
        }
        if let Some(last) = episode.last_mut() {
            last.last = true;
        }
        for t in episode {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(t);
        }
        Ok(())
    }

    /// Uniform start indices for a batch.
    pub fn sample_indices(&self, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, ResidualError> {
        if size == 0 {
            return Err(ResidualError::EmptyBatch);
        }
        if self.items.len() < size {
            return Err(ResidualError::SeedPhase {
                have: self.items.len(),
                need: size,
            });
        }
        Ok((0..size).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    /// Builds n-step windows starting at `indices`. Windows stop at the end of
    /// their episode.
    pub fn assemble(&self, indices: &[usize], n: usize, gamma: f64) -> Result<Batch, ResidualError> {
        if indices.is_empty() {
            return Err(ResidualError::EmptyBatch);
        }
        let mut obs = Vec::with_capacity(indices.len());
        let mut z = Vec::with_capacity(indices.len());
        let mut base = Vec::with_capacity(indices.len());
        let mut offset = Vec::with_capacity(indices.len());
        let mut reward_sum = Vec::with_capacity(indices.len());
        let mut disc = Vec::with_capacity(indices.len());
        let mut boot_obs = Vec::with_capacity(indices.len());
        let mut boot_z = Vec::with_capacity(indices.len());
        let mut boot_base = Vec::with_capacity(indices.len());
        for &i in indices {
            let t = &self.items[i];
            obs.push(t.obs.as_slice());
            z.push(t.z.as_slice());
            base.push(t.base_action.as_slice());
            offset.push(t.offset());
            let mut rewards = Vec::with_capacity(n);
            let mut j = i;
            loop {
                let tj = &self.items[j];
                rewards.push(tj.reward.ok_or(ResidualError::Unlabeled(j))?);
                if tj.last || rewards.len() == n || j + 1 >= self.items.len() {
                    break;
                }
                j += 1;
            }
            let end = &self.items[j];
            let full = rewards.len() == n && !end.last && j + 1 < self.items.len();
            reward_sum.push(nstep_return(&rewards, gamma, n, None));
            if full {
                let nb = &self.items[j + 1];
                disc.push(gamma.powi(n as i32));
                boot_obs.push(nb.obs.as_slice());
                boot_z.push(nb.z.as_slice());
                boot_base.push(nb.base_action.as_slice());
            } else {
                disc.push(0.0);
                boot_obs.push(end.next_obs.as_slice());
                boot_z.push(end.next_z.as_slice());
                boot_base.push(end.base_action.as_slice());
            }
        }
        Ok(Batch {
            obs: Matrix::from_rows(&obs),
            z: Matrix::from_rows(&z),
            base_action: Matrix::from_rows(&base),
            offset: Matrix::from_rows(&offset),
            reward_sum,
            bootstrap_discount: disc,
            boot_obs: Matrix::from_rows(&boot_obs),
            boot_z: Matrix::from_rows(&boot_z),
            boot_base_action: Matrix::from_rows(&boot_base),
        })
    }

    pub fn sample_batch(&self, size: usize, n: usize, gamma: f64, rng: &mut ChaCha8Rng) -> Result<Batch, ResidualError> {
        let idx = self.sample_indices(size, rng)?;
        self.assemble(&idx, n, gamma)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualConfig {
    pub z_dim: usize,
    pub action_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Offset bound before guidance scaling.
    pub beta: f64,
    pub exploration_std: f64,
    pub condition_on_base_action: bool,
    pub zero_init_actor: bool,
    pub lr: f64,
    pub gamma: f64,
    pub n_step: usize,
    pub tau: f64,
    /// Multiplier on the filtered offset penalty.
    pub offset_reg_weight: f64,
}

impl ResidualConfig {
    pub fn new(z_dim: usize, action_dim: usize) -> Self {
        ResidualConfig {
            z_dim,
            action_dim,
            feature_dim: 50,
            hidden_dim: 1024,
            beta: 0.3,
            exploration_std: 0.1,
            condition_on_base_action: true,
            zero_init_actor: true,
            lr: 1e-4,
            gamma: 0.99,
            n_step: 3,
            tau: 0.01,
            offset_reg_weight: 10.0,
        }
    }

    pub fn actor_input_dim(&self) -> usize {
        if self.condition_on_base_action {
            self.z_dim + self.action_dim
        } else {
            self.z_dim
        }
    }

    pub fn critic_input_dim(&self) -> usize {
        self.z_dim + 2 * self.action_dim
    }
}

pub struct ResidualActorCritic {
    pub cfg: ResidualConfig,
    pub mask: ActionMask,
    /// Offset bound after guidance scaling.
    pub bound: f64,
    pub actor: DenseNet,
    pub critics: [DenseNet; 2],
    pub targets: [DenseNet; 2],
    pub actor_adam: AdamState,
    pub critic_adams: [AdamState; 2],
}

/// Losses and, when requested, the gradient of the summed critic losses with
/// respect to the embedding inputs.
#[derive(Clone, Debug)]
pub struct CriticUpdate {
    pub losses: [f64; 2],
    pub z_grad: Option<Matrix>,
}

fn concat_rows(parts: &[&Matrix]) -> Matrix {
    Matrix::hcat(parts)
}

impl ResidualActorCritic {
    pub fn new(cfg: ResidualConfig, mask: ActionMask, rng: &mut ChaCha8Rng) -> Result<Self, ResidualError> {
        if mask.values().len() != cfg.action_dim {
            return Err(ResidualError::DimensionMismatch {
                what: "action mask",
                expected: cfg.action_dim,
                got: mask.values().len(),
            });
        }
        if !(cfg.beta > 0.0) || cfg.n_step == 0 || !(0.0..=1.0).contains(&cfg.tau) || !(cfg.lr > 0.0) {
            return Err(ResidualError::InvalidConfig(format!("{cfg:?}")));
        }
        let mut actor = DenseNet::mlp(
            &[cfg.actor_input_dim(), cfg.feature_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.action_dim],
            &[Activation::Tanh, Activation::Relu, Activation::Relu, Activation::Tanh],
            rng,
        )?;
        if cfg.zero_init_actor {
            actor.zero_last_layer();
        }
        let critic = |rng: &mut ChaCha8Rng| {
            DenseNet::mlp(
                &[cfg.critic_input_dim(), cfg.feature_dim, cfg.hidden_dim, cfg.hidden_dim, 1],
                &[Activation::Tanh, Activation::Relu, Activation::Relu, Activation::Identity],
                rng,
            )
        };
        let critics = [critic(rng)?, critic(rng)?];
        let targets = critics.clone();
        let adam = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        Ok(ResidualActorCritic {
            bound: mask.level.offset_bound(cfg.beta),
            actor_adam: AdamState::new(&actor, adam.clone()),
            critic_adams: [AdamState::new(&critics[0], adam.clone()), AdamState::new(&critics[1], adam)],
            cfg,
            mask,
            actor,
            critics,
            targets,
        })
    }

    fn actor_input(&self, z: &Matrix, base: &Matrix) -> Matrix {
        if self.cfg.condition_on_base_action {
            concat_rows(&[z, base])
        } else {
            z.clone()
        }
    }

    /// Masked, bounded offsets without noise, plus the forward cache.
    fn policy_batch(&self, z: &Matrix, base: &Matrix) -> Result<(Matrix, ForwardCache), ResidualError> {
        let cache = self.actor.forward_batch(&self.actor_input(z, base))?;
        let mut out = cache.output().clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            for v in row.iter_mut() {
                *v *= self.bound;
            }
            self.mask.apply(row);
        }
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(ResidualError::NonFiniteAction);
        }
        Ok((out, cache))
    }

    pub fn policy_offsets(&self, z: &Matrix, base: &Matrix) -> Result<Matrix, ResidualError> {
        Ok(self.policy_batch(z, base)?.0)
    }

    /// Offset for one step. With `explore`, Gaussian noise is added after the
    /// tanh bound and the result is clipped back to the bound.
    pub fn residual_act(
        &self,
        z: &[f64],
        base_action: &[f64],
        explore: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, ResidualError> {
        if z.len() != self.cfg.z_dim {
            return Err(ResidualError::DimensionMismatch {
                what: "embedding",
                expected: self.cfg.z_dim,
                got: z.len(),
            });
        }
        if base_action.len() != self.cfg.action_dim {
            return Err(ResidualError::DimensionMismatch {
                what: "base action",
                expected: self.cfg.action_dim,
                got: base_action.len(),
            });
        }
        let mut input = z.to_vec();
        if self.cfg.condition_on_base_action {
            input.extend_from_slice(base_action);
        }
        let raw = self.actor.forward(&input)?;
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(ResidualError::NonFiniteAction);
        }
        let mut a: Vec<f64> = raw.iter().map(|v| v * self.bound).collect();
        self.mask.apply(&mut a);
        if explore {
            a = self.explore_offset(&a, rng);
        }
        Ok(a)
    }

    /// Adds exploration noise to a greedy offset and clips it back to the
    /// bound.
    pub fn explore_offset(&self, greedy: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut a = greedy.to_vec();
        if self.cfg.exploration_std > 0.0 {
            let noise = Normal::new(0.0, self.cfg.exploration_std).expect("positive std");
            for v in &mut a {
                *v = (*v + noise.sample(rng)).clamp(-self.bound, self.bound);
            }
        }
        self.mask.apply(&mut a);
        a
    }

    /// Pure exploration offset used while seeding the buffer.
    pub fn noise_offset(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut a = vec![0.0; self.cfg.action_dim];
        if self.cfg.exploration_std > 0.0 {
            let noise = Normal::new(0.0, self.cfg.exploration_std).expect("positive std");
            for v in &mut a {
                *v = noise.sample(rng).clamp(-self.bound, self.bound);
            }
        }
        self.mask.apply(&mut a);
        a
    }

    fn critic_values(net: &DenseNet, input: &Matrix) -> Result<(Vec<f64>, ForwardCache), ResidualError> {
        let cache = net.forward_batch(input)?;
        Ok((cache.output().data.clone(), cache))
    }

    /// Minimum of the two online critics.
    pub fn min_q(&self, z: &Matrix, base: &Matrix, offset: &Matrix) -> Result<Vec<f64>, ResidualError> {
        let input = concat_rows(&[z, base, offset]);
        let (q1, _) = Self::critic_values(&self.critics[0], &input)?;
        let (q2, _) = Self::critic_values(&self.critics[1], &input)?;
        Ok(q1.iter().zip(&q2).map(|(a, b)| a.min(*b)).collect())
    }

    /// n-step targets, bootstrapping through the current actor (no noise) and
    /// the minimum of the target critics.
    pub fn nstep_target(&self, batch: &Batch) -> Result<Vec<f64>, ResidualError> {
        let next_offset = self.policy_offsets(&batch.boot_z, &batch.boot_base_action)?;
        let input = concat_rows(&[&batch.boot_z, &batch.boot_base_action, &next_offset]);
        let (q1, _) = Self::critic_values(&self.targets[0], &input)?;
        let (q2, _) = Self::critic_values(&self.targets[1], &input)?;
        Ok((0..batch.len())
            .map(|i| {
                let d = batch.bootstrap_discount[i];
                if d == 0.0 {
                    batch.reward_sum[i]
                } else {
                    batch.reward_sum[i] + d * q1[i].min(q2[i])
                }
            })
            .collect())
    }

    /// One Adam step per critic on the mean squared error to the shared target.
    pub fn critic_update(&mut self, batch: &Batch, want_z_grad: bool) -> Result<CriticUpdate, ResidualError> {
        if batch.is_empty() {
            return Err(ResidualError::EmptyBatch);
        }
        let y = self.nstep_target(batch)?;
        let input = concat_rows(&[&batch.z, &batch.base_action, &batch.offset]);
        let b = batch.len() as f64;
        let mut losses = [0.0; 2];
        let mut grads: Vec<Gradients> = Vec::with_capacity(2);
        let mut z_grad: Option<Matrix> = None;
        for k in 0..2 {
            let (q, cache) = Self::critic_values(&self.critics[k], &input)?;
            let mut upstream = Matrix::zeros(q.len(), 1);
            let mut loss = 0.0;
            for (i, (qi, yi)) in q.iter().zip(&y).enumerate() {
                let d = qi - yi;
                loss += d * d;
                upstream.data[i] = 2.0 * d / b;
            }
            loss /= b;
            if !loss.is_finite() {
                return Err(ResidualError::NonFiniteLoss("critic"));
            }
            losses[k] = loss;
            let (g, dx) = self.critics[k].backward_batch(&cache, &upstream)?;
            grads.push(g);
            if want_z_grad {
                let dz = dx.columns(0, self.cfg.z_dim);
                z_grad = Some(match z_grad {
                    None => dz,
                    Some(mut acc) => {
                        acc.data.iter_mut().zip(&dz.data).for_each(|(a, v)| *a += v);
                        acc
                    }
                });
            }
        }
        for (k, g) in grads.iter().enumerate() {
            adam_step(&mut self.critics[k], g, &mut self.critic_adams[k])?;
        }
        Ok(CriticUpdate { losses, z_grad })
    }

    pub fn update_targets(&mut self) -> Result<(), ResidualError> {
        for k in 0..2 {
            self.targets[k].soft_update(&self.critics[k], self.cfg.tau)?;
        }
        Ok(())
    }

    /// Fraction of the batch where the zero offset scores higher than the
    /// actor's offset under the online critics.
    pub fn soft_q_filter(&self, batch: &Batch) -> Result<f64, ResidualError> {
        if batch.is_empty() {
            return Err(ResidualError::EmptyBatch);
        }
        let zero = Matrix::zeros(batch.len(), self.cfg.action_dim);
        let q_zero = self.min_q(&batch.z, &batch.base_action, &zero)?;
        let pi = self.policy_offsets(&batch.z, &batch.base_action)?;
        let q_pi = self.min_q(&batch.z, &batch.base_action, &pi)?;
        let better = q_zero.iter().zip(&q_pi).filter(|(a, b)| a > b).count();
        Ok(better as f64 / batch.len() as f64)
    }

    /// Actor loss `-mean min_k Q_k(z, a_b, pi(z, a_b))`, plus
    /// `lambda * offset_reg_weight * mean |a_r|^2` when `offset_penalty` is
    /// `Some(lambda)`, and its gradient with respect to the actor parameters.
    pub fn actor_gradients(&self, batch: &Batch, offset_penalty: Option<f64>) -> Result<(f64, Gradients), ResidualError> {
        if batch.is_empty() {
            return Err(ResidualError::EmptyBatch);
        }
        let (offsets, actor_cache) = self.policy_batch(&batch.z, &batch.base_action)?;
        let input = concat_rows(&[&batch.z, &batch.base_action, &offsets]);
        let (q1, c1) = Self::critic_values(&self.critics[0], &input)?;
        let (q2, c2) = Self::critic_values(&self.critics[1], &input)?;
        let b = batch.len() as f64;
        let mut up1 = Matrix::zeros(q1.len(), 1);
        let mut up2 = Matrix::zeros(q2.len(), 1);
        let mut loss = 0.0;
        for i in 0..q1.len() {
            if q1[i] <= q2[i] {
                loss -= q1[i];
                up1.data[i] = -1.0 / b;
            } else {
                loss -= q2[i];
                up2.data[i] = -1.0 / b;
            }
        }
        loss /= b;
        let weight = offset_penalty.map_or(0.0, |lambda| lambda * self.cfg.offset_reg_weight);
        if weight != 0.0 {
            let sq: f64 = offsets.data.iter().map(|v| v * v).sum();
            loss += weight * sq / b;
        }
        if !loss.is_finite() {
            return Err(ResidualError::NonFiniteLoss("actor"));
        }
        let (_, dx1) = self.critics[0].backward_batch(&c1, &up1)?;
        let (_, dx2) = self.critics[1].backward_batch(&c2, &up2)?;
        let a_start = self.cfg.z_dim + self.cfg.action_dim;
        let ad = self.cfg.action_dim;
        let mut upstream = Matrix::zeros(offsets.rows, ad);
        let mask = self.mask.values();
        for i in 0..offsets.rows {
            for j in 0..ad {
                let mut g = dx1.get(i, a_start + j) + dx2.get(i, a_start + j);
                if weight != 0.0 {
                    g += weight * 2.0 * offsets.get(i, j) / b;
                }
                // offsets = mask * bound * tanh_out
                upstream.data[i * ad + j] = g * mask[j] * self.bound;
            }
        }
        let (grads, _) = self.actor.backward_batch(&actor_cache, &upstream)?;
        Ok((loss, grads))
    }

    /// Deterministic policy gradient step ascending the minimum critic value.
    /// Returns the loss before the step.
    pub fn actor_update(&mut self, batch: &Batch, offset_penalty: Option<f64>) -> Result<f64, ResidualError> {
        let (loss, grads) = self.actor_gradients(batch, offset_penalty)?;
        adam_step(&mut self.actor, &grads, &mut self.actor_adam)?;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use rand::SeedableRng;

    fn small_cfg() -> ResidualConfig {
        ResidualConfig {
            feature_dim: 6,
            hidden_dim: 8,
            ..ResidualConfig::new(3, 2)
        }
    }

    fn ac(level: Guidance, seed: u64) -> ResidualActorCritic {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ResidualActorCritic::new(small_cfg(), ActionMask::for_level(level, 2).unwrap(), &mut rng).unwrap()
    }

    fn constant_net(input: usize, hidden: usize, out_bias: f64) -> DenseNet {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut net = DenseNet::mlp(
            &[input, 6, hidden, hidden, 1],
            &[Activation::Tanh, Activation::Relu, Activation::Relu, Activation::Identity],
            &mut rng,
        )
        .unwrap();
        net.zero_last_layer();
        net.layers_mut().last_mut().unwrap().bias[0] = out_bias;
        net
    }

    fn transition(z: f64, reward: f64) -> Transition {
        Transition {
            obs: vec![z; 3],
            z: vec![z; 3],
            action: vec![0.1, 0.2],
            base_action: vec![0.1, 0.0],
            next_obs: vec![z + 1.0; 3],
            next_z: vec![z + 1.0; 3],
            reward: Some(reward),
            last: false,
        }
    }

    fn episode(len: usize, reward: f64, offset: f64) -> Vec<Transition> {
        (0..len).map(|i| transition(offset + i as f64, reward)).collect()
    }

    #[test]
    fn masks_by_level() {
        assert_eq!(ActionMask::for_level(Guidance::Guided, 2).unwrap().values(), &[0.0, 1.0]);
        assert_eq!(ActionMask::for_level(Guidance::SemiGuided, 2).unwrap().values(), &[1.0, 1.0]);
        assert_eq!(ActionMask::for_level(Guidance::Unguided, 2).unwrap().values(), &[1.0, 1.0]);
        assert_eq!(Guidance::SemiGuided.offset_bound(0.3), 0.15);
        let mut a = vec![0.5, 0.5];
        ActionMask::from_values(Guidance::Guided, vec![0.0, 1.0]).apply(&mut a);
        assert_eq!(a, vec![0.0, 0.5]);
    }

    #[test]
    fn compose_adds_and_clamps() {
        assert_eq!(compose_action(&[0.2, 0.2], &[0.1, -0.1], -1.0, 1.0), vec![0.2 + 0.1, 0.2 - 0.1]);
        assert_eq!(compose_action(&[0.2, -0.4], &[0.0, 0.0], -1.0, 1.0), vec![0.2, -0.4]);
        assert_eq!(compose_action(&[0.95, 0.0], &[0.2, 0.0], -1.0, 1.0), vec![1.0, 0.0]);
    }

    #[test]
    fn zero_init_actor_outputs_zero() {
        let ac = ac(Guidance::Unguided, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = ac.residual_act(&[0.1, 0.2, 0.3], &[0.5, -0.5], false, &mut rng).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
        assert_eq!(compose_action(&[0.5, -0.5], &a, -1.0, 1.0), vec![0.5, -0.5]);
    }

    #[test]
    fn greedy_offsets_are_deterministic_bounded_and_masked() {
        let mut cfg = small_cfg();
        cfg.zero_init_actor = false;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ac = ResidualActorCritic::new(cfg, ActionMask::for_level(Guidance::Guided, 2).unwrap(), &mut rng).unwrap();
        let z = [0.4, -0.9, 2.0];
        let a1 = ac.residual_act(&z, &[0.1, 0.1], false, &mut rng).unwrap();
        let a2 = ac.residual_act(&z, &[0.1, 0.1], false, &mut rng).unwrap();
        assert_eq!(a1, a2);
        for _ in 0..200 {
            let a = ac.residual_act(&z, &[0.1, 0.1], true, &mut rng).unwrap();
            assert_eq!(a[0], 0.0);
            assert!(a[1].abs() <= ac.bound);
        }
    }

    #[test]
    fn residual_act_checks_dims() {
        let ac = ac(Guidance::Unguided, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            ac.residual_act(&[0.1], &[0.0, 0.0], false, &mut rng),
            Err(ResidualError::DimensionMismatch { what: "embedding", .. })
        ));
    }

    #[test]
    fn nstep_return_examples() {
        assert_eq!(nstep_return(&[0.0, 0.0, 0.0], 0.99, 3, Some(0.0)), 0.0);
        let y = nstep_return(&[1.0, 1.0, 1.0], 0.99, 3, Some(2.0));
        let oracle = 1.0 + 0.99 + 0.99f64.powi(2) + 0.99f64.powi(3) * 2.0;
        assert!((y - oracle).abs() < 1e-12);
        assert!((y - 4.910698).abs() < 1e-12);
        assert!((nstep_return(&[1.0, 1.0], 0.99, 3, Some(2.0)) - 1.99).abs() < 1e-12);
    }

    #[test]
    fn buffer_is_fifo_and_bounded() {
        let mut buf = ReplayBuffer::new(5);
        buf.push_episode(episode(3, 1.0, 0.0)).unwrap();
        buf.push_episode(episode(4, 1.0, 10.0)).unwrap();
        assert_eq!(buf.len(), 5);
        assert_eq!(buf.get(0).z[0], 2.0);
        assert!(buf.get(0).last);
        assert!(buf.get(4).last);
        let mut bad = episode(2, 1.0, 0.0);
        bad[1].reward = None;
        assert!(matches!(buf.push_episode(bad), Err(ResidualError::Unlabeled(1))));
    }

    #[test]
    fn windows_stop_at_episode_end() {
        let mut buf = ReplayBuffer::new(100);
        buf.push_episode(episode(2, 1.0, 0.0)).unwrap();
        buf.push_episode(episode(5, 1.0, 10.0)).unwrap();
        let b = buf.assemble(&[0, 1, 2, 4], 3, 0.99).unwrap();
        assert!((b.reward_sum[0] - 1.99).abs() < 1e-12);
        assert_eq!(b.bootstrap_discount[0], 0.0);
        assert_eq!(b.reward_sum[1], 1.0);
        assert_eq!(b.bootstrap_discount[1], 0.0);
        assert!((b.reward_sum[2] - (1.0 + 0.99 + 0.9801)).abs() < 1e-12);
        assert!((b.bootstrap_discount[2] - 0.970299).abs() < 1e-12);
        // bootstrap state is the embedding three steps later
        assert_eq!(b.boot_z.get(2, 0), 13.0);
        // started two steps before the end: truncated
        assert_eq!(b.bootstrap_discount[3], 0.0);
    }

    #[test]
    fn sampling_requires_enough_data() {
        let mut buf = ReplayBuffer::new(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        buf.push_episode(episode(10, 0.0, 0.0)).unwrap();
        let err = buf.sample_batch(256, 3, 0.99, &mut rng).unwrap_err();
        assert!(err.to_string().starts_with("still in seed phase"));
    }

    #[test]
    fn nstep_target_with_constant_critics() {
        let mut ac = ac(Guidance::Unguided, 3);
        let input = small_cfg().critic_input_dim();
        ac.targets = [constant_net(input, 8, 2.0), constant_net(input, 8, 5.0)];
        let mut buf = ReplayBuffer::new(100);
        buf.push_episode(episode(6, 1.0, 0.0)).unwrap();
        let b = buf.assemble(&[0, 4], 3, 0.99).unwrap();
        let y = ac.nstep_target(&b).unwrap();
        assert!((y[0] - 4.910698).abs() < 1e-12);
        assert!((y[1] - 1.99).abs() < 1e-12);

        ac.targets = [constant_net(input, 8, 0.0), constant_net(input, 8, 0.0)];
        let mut buf = ReplayBuffer::new(100);
        buf.push_episode(episode(6, 0.0, 0.0)).unwrap();
        let b = buf.assemble(&[0, 1, 2], 3, 0.99).unwrap();
        assert_eq!(ac.nstep_target(&b).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn critic_loss_single_mismatch() {
        let mut ac = ac(Guidance::Unguided, 4);
        let input = small_cfg().critic_input_dim();
        ac.critics = [constant_net(input, 8, 3.0), constant_net(input, 8, 1.0)];
        ac.critic_adams = [
            AdamState::new(&ac.critics[0], AdamConfig::default()),
            AdamState::new(&ac.critics[1], AdamConfig::default()),
        ];
        let mut buf = ReplayBuffer::new(10);
        let mut ep = episode(1, 1.0, 0.0);
        ep[0].reward = Some(1.0);
        buf.push_episode(ep).unwrap();
        let b = buf.assemble(&[0], 3, 0.99).unwrap();
        let up = ac.critic_update(&b, false).unwrap();
        assert_eq!(up.losses, [4.0, 0.0]);
    }

    #[test]
    fn exact_critics_leave_parameters() {
        let mut ac = ac(Guidance::Unguided, 5);
        let input = small_cfg().critic_input_dim();
        ac.critics = [constant_net(input, 8, 1.0), constant_net(input, 8, 1.0)];
        ac.critic_adams = [
            AdamState::new(&ac.critics[0], AdamConfig::default()),
            AdamState::new(&ac.critics[1], AdamConfig::default()),
        ];
        let mut buf = ReplayBuffer::new(10);
        buf.push_episode(episode(1, 1.0, 0.0)).unwrap();
        let b = buf.assemble(&[0], 3, 0.99).unwrap();
        let before = ac.critics.clone();
        let up = ac.critic_update(&b, false).unwrap();
        assert_eq!(up.losses, [0.0, 0.0]);
        assert_eq!(ac.critics, before);
        assert_eq!(ac.critic_adams[0].step_count, 1);
    }

    #[test]
    fn constant_critics_give_no_actor_gradient() {
        let mut ac = ac(Guidance::Unguided, 6);
        let input = small_cfg().critic_input_dim();
        ac.critics = [constant_net(input, 8, 1.0), constant_net(input, 8, 2.0)];
        let mut buf = ReplayBuffer::new(10);
        buf.push_episode(episode(4, 1.0, 0.0)).unwrap();
        let b = buf.assemble(&[0, 1, 2, 3], 3, 0.99).unwrap();
        let before = ac.actor.clone();
        let loss = ac.actor_update(&b, None).unwrap();
        assert_eq!(loss, -1.0);
        assert_eq!(ac.actor, before);
    }

    #[test]
    fn soft_q_filter_fractions() {
        let mut ac = ac(Guidance::Unguided, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = small_cfg().critic_input_dim();
        // critic Q = w * a_r[0]
        let q_net = |w: f64| {
            DenseNet::new(vec![Dense {
                in_dim: input,
                out_dim: 1,
                weights: (0..input).map(|i| if i == 5 { w } else { 0.0 }).collect(),
                bias: vec![0.0],
                activation: Activation::Identity,
            }])
            .unwrap()
        };
        let mut cfg = small_cfg();
        cfg.zero_init_actor = false;
        let actor = ResidualActorCritic::new(cfg, ActionMask::for_level(Guidance::Unguided, 2).unwrap(), &mut rng)
            .unwrap()
            .actor;
        ac.actor = actor;
        let mut buf = ReplayBuffer::new(50);
        buf.push_episode((0..20).map(|i| transition(i as f64 * 0.37 - 3.0, 0.0)).collect()).unwrap();
        let b = buf.assemble(&(0..20).collect::<Vec<_>>(), 3, 0.99).unwrap();
        let pi = ac.policy_offsets(&b.z, &b.base_action).unwrap();
        let positive = (0..20).filter(|i| pi.get(*i, 0) > 0.0).count();
        ac.critics = [q_net(-1.0), q_net(-1.0)];
        assert_eq!(ac.soft_q_filter(&b).unwrap(), positive as f64 / 20.0);
        ac.critics = [q_net(1.0), q_net(1.0)];
        let negative = (0..20).filter(|i| pi.get(*i, 0) < 0.0).count();
        assert_eq!(ac.soft_q_filter(&b).unwrap(), negative as f64 / 20.0);
    }

    #[test]
    fn unconditioned_actor_has_smaller_input() {
        let mut cfg = small_cfg();
        cfg.condition_on_base_action = false;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ac = ResidualActorCritic::new(cfg, ActionMask::for_level(Guidance::Unguided, 2).unwrap(), &mut rng).unwrap();
        assert_eq!(ac.actor.input_dim(), 3);
        assert_eq!(self::ac(Guidance::Unguided, 0).actor.input_dim(), 5);
    }
}
