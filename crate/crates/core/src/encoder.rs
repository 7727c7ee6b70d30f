//! Observation encoders and behavior-cloning pretraining.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::demos::DemoSet;
use crate::nn::{adam_step, Activation, AdamConfig, AdamState, DenseNet, Gradients, Matrix, NnError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder frozen")]
    Frozen,
    #[error("identity encoder has no parameters")]
    NoParameters,
    #[error("observation dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty demo set")]
    EmptyDemos,
    #[error("behavior cloning diverged at epoch {0}")]
    Diverged(usize),
    #[error("invalid pretraining config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    Identity,
    Mlp,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Identity => "identity",
            EncoderKind::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(EncoderKind::Identity),
            "mlp" => Ok(EncoderKind::Mlp),
            other => Err(format!("unknown encoder kind `{other}`")),
        }
    }
}

/// Maps observations to embeddings. Once frozen, its parameters can no
/// longer be updated.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    obs_dim: usize,
    net: Option<DenseNet>,
    frozen: bool,
}

impl Encoder {
    pub fn identity(obs_dim: usize) -> Self {
        Encoder {
            obs_dim,
            net: None,
            frozen: false,
        }
    }

    pub fn mlp(net: DenseNet) -> Self {
        Encoder {
            obs_dim: net.input_dim(),
            net: Some(net),
            frozen: false,
        }
    }

    pub fn kind(&self) -> EncoderKind {
        if self.net.is_some() {
            EncoderKind::Mlp
        } else {
            EncoderKind::Identity
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn z_dim(&self) -> usize {
        self.net.as_ref().map_or(self.obs_dim, DenseNet::output_dim)
    }

    pub fn net(&self) -> Option<&DenseNet> {
        self.net.as_ref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn encode(&self, obs: &[f64]) -> Result<Vec<f64>, EncoderError> {
        if obs.len() != self.obs_dim {
            return Err(EncoderError::DimensionMismatch {
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        match &self.net {
            None => Ok(obs.to_vec()),
            Some(net) => Ok(net.forward(obs)?),
        }
    }

    pub fn encode_all<O: AsRef<[f64]>>(&self, obs: &[O]) -> Result<Vec<Vec<f64>>, EncoderError> {
        obs.iter().map(|o| self.encode(o.as_ref())).collect()
    }

    /// One Adam step on the encoder parameters.
    pub fn apply_gradients(&mut self, grads: &Gradients, adam: &mut AdamState) -> Result<(), EncoderError> {
        if self.frozen {
            return Err(EncoderError::Frozen);
        }
        let net = self.net.as_mut().ok_or(EncoderError::NoParameters)?;
        adam_step(net, grads, adam)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcConfig {
    pub encoder: EncoderKind,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub z_dim: usize,
    pub hidden_dim: usize,
    /// Stop once the epoch loss drops below this value.
    pub early_stop_mse: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            encoder: EncoderKind::Mlp,
            epochs: 2000,
            lr: 1e-3,
            seed: 0,
            z_dim: 32,
            hidden_dim: 256,
            early_stop_mse: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BcResult {
    pub encoder: Encoder,
    /// Maps embeddings to actions; usable as the BC base policy.
    pub actor: DenseNet,
    pub loss_history: Vec<f64>,
}

pub fn encoder_net(obs_dim: usize, cfg: &BcConfig, rng: &mut ChaCha8Rng) -> Result<DenseNet, NnError> {
    DenseNet::mlp(
        &[obs_dim, cfg.hidden_dim, cfg.z_dim],
        &[Activation::Relu, Activation::Tanh],
        rng,
    )
}

/// Jointly fits an encoder and an actor to the demonstration pairs with a
/// full-batch mean squared error.
pub fn bc_pretrain(demos: &DemoSet, cfg: &BcConfig) -> Result<BcResult, EncoderError> {
    if demos.trajectories.is_empty() || demos.pair_count() == 0 {
        return Err(EncoderError::EmptyDemos);
    }
    if cfg.epochs == 0 || !(cfg.lr > 0.0) || cfg.z_dim == 0 || cfg.hidden_dim == 0 {
        return Err(EncoderError::InvalidConfig(format!("{cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder_net = match cfg.encoder {
        EncoderKind::Mlp => Some(encoder_net(demos.obs_dim, cfg, &mut rng)?),
        EncoderKind::Identity => None,
    };
    let z_dim = encoder_net.as_ref().map_or(demos.obs_dim, DenseNet::output_dim);
    let mut actor = DenseNet::mlp(
        &[z_dim, cfg.hidden_dim, cfg.hidden_dim, demos.action_dim],
        &[Activation::Relu, Activation::Relu, Activation::Tanh],
        &mut rng,
    )?;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut enc_adam = encoder_net.as_ref().map(|n| AdamState::new(n, adam_cfg.clone()));
    let mut actor_adam = AdamState::new(&actor, adam_cfg);

    let obs: Vec<&[f64]> = demos.trajectories.iter().flat_map(|t| t.pairs().map(|(o, _)| o)).collect();
    let acts: Vec<&[f64]> = demos.trajectories.iter().flat_map(|t| t.pairs().map(|(_, a)| a)).collect();
    let x = Matrix::from_rows(&obs);
    let y = Matrix::from_rows(&acts);
    let n = x.rows as f64;

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let enc_cache = encoder_net.as_ref().map(|net| net.forward_batch(&x)).transpose()?;
        let z = enc_cache.as_ref().map_or(&x, |c| c.output());
        let act_cache = actor.forward_batch(z)?;
        let pred = act_cache.output();
        let mut upstream = Matrix::zeros(pred.rows, pred.cols);
        let mut loss = 0.0;
        for ((u, p), t) in upstream.data.iter_mut().zip(&pred.data).zip(&y.data) {
            let d = p - t;
            loss += d * d;
            *u = 2.0 * d / n;
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(EncoderError::Diverged(epoch));
        }
        history.push(loss);
        if loss < cfg.early_stop_mse {
            break;
        }
        let (actor_grads, dz) = actor.backward_batch(&act_cache, &upstream)?;
        if let (Some(net), Some(cache), Some(adam)) = (encoder_net.as_mut(), enc_cache.as_ref(), enc_adam.as_mut()) {
            let (enc_grads, _) = net.backward_batch(cache, &dz)?;
            adam_step(net, &enc_grads, adam).map_err(|_| EncoderError::Diverged(epoch))?;
        }
        adam_step(&mut actor, &actor_grads, &mut actor_adam).map_err(|_| EncoderError::Diverged(epoch))?;
    }
    let encoder = match encoder_net {
        Some(net) => Encoder::mlp(net),
        None => Encoder::identity(demos.obs_dim),
    };
    Ok(BcResult {
        encoder,
        actor,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::Trajectory;
    use crate::env::TaskKind;

    fn one_pair() -> DemoSet {
        DemoSet::new(
            TaskKind::Reach,
            vec![Trajectory {
                observations: vec![vec![0.2, -0.4, 0.7], vec![0.0; 3]],
                actions: vec![vec![0.5, -0.25]],
            }],
        )
        .unwrap()
    }

    fn small_cfg() -> BcConfig {
        BcConfig {
            hidden_dim: 16,
            z_dim: 8,
            early_stop_mse: 0.0,
            ..BcConfig::default()
        }
    }

    #[test]
    fn fits_single_pair() {
        let r = bc_pretrain(&one_pair(), &small_cfg()).unwrap();
        assert!(*r.loss_history.last().unwrap() < 1e-3);
        assert_eq!(r.loss_history.len(), 2000);
    }

    #[test]
    fn identity_encoder_passes_through() {
        let e = Encoder::identity(2);
        assert_eq!(e.encode(&[0.3, -0.1]).unwrap(), vec![0.3, -0.1]);
        assert!(matches!(e.encode(&[0.3]), Err(EncoderError::DimensionMismatch { .. })));
    }

    #[test]
    fn mlp_encoder_matches_forward() {
        let r = bc_pretrain(&one_pair(), &BcConfig { epochs: 5, ..small_cfg() }).unwrap();
        let o = [0.1, 0.2, 0.3];
        assert_eq!(r.encoder.encode(&o).unwrap(), r.encoder.net().unwrap().forward(&o).unwrap());
        assert_eq!(r.encoder.z_dim(), 8);
    }

    #[test]
    fn frozen_encoder_rejects_updates() {
        let r = bc_pretrain(&one_pair(), &BcConfig { epochs: 2, ..small_cfg() }).unwrap();
        let mut enc = r.encoder.clone();
        let net = enc.net().unwrap().clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let grads = Gradients::zeros_like(&net);
        enc.apply_gradients(&grads, &mut adam).unwrap();
        let mut frozen = enc.clone().freeze();
        let err = frozen.apply_gradients(&grads, &mut adam).unwrap_err();
        assert_eq!(err.to_string(), "encoder frozen");
        assert_eq!(frozen.clone().freeze(), frozen);
    }

    #[test]
    fn duplicated_demos_give_same_parameters() {
        let demos = one_pair();
        let mut dup = demos.clone();
        let t = dup.trajectories[0].clone();
        dup.trajectories.push(t);
        let cfg = BcConfig { epochs: 200, ..small_cfg() };
        let a = bc_pretrain(&demos, &cfg).unwrap();
        let b = bc_pretrain(&dup, &cfg).unwrap();
        let pa: Vec<f64> = a.actor.params().chain(a.encoder.net().unwrap().params()).copied().collect();
        let pb: Vec<f64> = b.actor.params().chain(b.encoder.net().unwrap().params()).copied().collect();
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn empty_demos_rejected() {
        let demos = DemoSet {
            task: TaskKind::Push,
            obs_dim: 2,
            action_dim: 2,
            trajectories: vec![],
        };
        assert!(matches!(bc_pretrain(&demos, &small_cfg()), Err(EncoderError::EmptyDemos)));
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = BcConfig { epochs: 50, ..small_cfg() };
        let a = bc_pretrain(&one_pair(), &cfg).unwrap();
        let b = bc_pretrain(&one_pair(), &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.actor, b.actor);
    }
}
