use fish_core::nn::{Activation, DenseNet, Matrix};
use fish_core::residual::{ActionMask, Guidance, ReplayBuffer, ResidualActorCritic, ResidualConfig, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn random_net(rng: &mut ChaCha8Rng) -> DenseNet {
    let depth = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(1..=6)];
    let mut acts = Vec::new();
    for _ in 0..depth {
        dims.push(rng.random_range(1..=8));
        acts.push(match rng.random_range(0..3) {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            _ => Activation::Identity,
        });
    }
    let mut net = DenseNet::mlp(&dims, &acts, rng).unwrap();
    // zero biases behind a dead layer put pre-activations exactly on the
    // ReLU kink, where central differences disagree with any subgradient
    for layer in net.layers_mut() {
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    net
}

fn slot(net: &mut DenseNet, l: usize, which: usize, i: usize) -> &mut f64 {
    let layer = &mut net.layers_mut()[l];
    if which == 0 {
        &mut layer.weights[i]
    } else {
        &mut layer.bias[i]
    }
}

fn weighted_output(net: &DenseNet, x: &Matrix, w: &Matrix) -> f64 {
    let out = net.forward_batch(x).unwrap();
    out.output().data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let mut net = random_net(&mut rng);
        let rows = rng.random_range(1..=4);
        let x = Matrix::from_vec(
            rows,
            net.input_dim(),
            (0..rows * net.input_dim()).map(|_| rng.random_range(-1.5..1.5)).collect(),
        );
        let w = Matrix::from_vec(
            rows,
            net.output_dim(),
            (0..rows * net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let cache = net.forward_batch(&x).unwrap();
        let (grads, dx) = net.backward_batch(&cache, &w).unwrap();
        let analytic: Vec<f64> = grads.iter().copied().collect();

        let mut numeric = Vec::with_capacity(analytic.len());
        for l in 0..net.layers().len() {
            for which in 0..2 {
                let len = if which == 0 {
                    net.layers()[l].weights.len()
                } else {
                    net.layers()[l].bias.len()
                };
                for i in 0..len {
                    let orig = *slot(&mut net, l, which, i);
                    *slot(&mut net, l, which, i) = orig + H;
                    let up = weighted_output(&net, &x, &w);
                    *slot(&mut net, l, which, i) = orig - H;
                    let down = weighted_output(&net, &x, &w);
                    *slot(&mut net, l, which, i) = orig;
                    numeric.push((up - down) / (2.0 * H));
                }
            }
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e <= 1e-4, "trial {trial}: parameter gradient relative error {e}");

        let mut num_dx = Vec::with_capacity(x.data.len());
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += H;
            let mut xm = x.clone();
            xm.data[i] -= H;
            num_dx.push((weighted_output(&net, &xp, &w) - weighted_output(&net, &xm, &w)) / (2.0 * H));
        }
        let e = rel_err(&dx.data, &num_dx);
        assert!(e <= 1e-4, "trial {trial}: input gradient relative error {e}");
    }
}

fn small_agent(seed: u64, level: Guidance, penalty_weight: f64) -> ResidualActorCritic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ResidualConfig {
        feature_dim: 5,
        hidden_dim: 7,
        zero_init_actor: false,
        offset_reg_weight: penalty_weight,
        ..ResidualConfig::new(3, 2)
    };
    ResidualActorCritic::new(cfg, ActionMask::for_level(level, 2).unwrap(), &mut rng).unwrap()
}

fn random_buffer(rng: &mut ChaCha8Rng, len: usize) -> ReplayBuffer {
    let mut buf = ReplayBuffer::new(len);
    let ep: Vec<Transition> = (0..len)
        .map(|_| {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let base: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..0.5)).collect();
            let action: Vec<f64> = base.iter().map(|b| b + rng.random_range(-0.3..0.3)).collect();
            Transition {
                obs: z.clone(),
                z: z.clone(),
                action,
                base_action: base,
                next_obs: z.clone(),
                next_z: z,
                reward: Some(rng.random_range(-1.0..0.0)),
                last: false,
            }
        })
        .collect();
    buf.push_episode(ep).unwrap();
    buf
}

#[test]
fn actor_loss_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (seed, level, penalty) in [
        (1, Guidance::Unguided, None),
        (2, Guidance::Guided, None),
        (3, Guidance::SemiGuided, Some(0.6)),
        (4, Guidance::Unguided, Some(1.0)),
    ] {
        let mut ac = small_agent(seed, level, 2.0);
        let buf = random_buffer(&mut rng, 16);
        let batch = buf.assemble(&(0..16).collect::<Vec<_>>(), 3, 0.99).unwrap();
        let (_, grads) = ac.actor_gradients(&batch, penalty).unwrap();
        let analytic: Vec<f64> = grads.iter().copied().collect();
        let mut numeric = Vec::new();
        for l in 0..ac.actor.layers().len() {
            for which in 0..2 {
                let len = if which == 0 {
                    ac.actor.layers()[l].weights.len()
                } else {
                    ac.actor.layers()[l].bias.len()
                };
                for i in 0..len {
                    let orig = *slot(&mut ac.actor, l, which, i);
                    *slot(&mut ac.actor, l, which, i) = orig + H;
                    let up = ac.actor_gradients(&batch, penalty).unwrap().0;
                    *slot(&mut ac.actor, l, which, i) = orig - H;
                    let down = ac.actor_gradients(&batch, penalty).unwrap().0;
                    *slot(&mut ac.actor, l, which, i) = orig;
                    numeric.push((up - down) / (2.0 * H));
                }
            }
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e <= 1e-4, "seed {seed}: actor gradient relative error {e}");
    }
}

#[test]
fn critic_loss_matches_independent_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ac = small_agent(5, Guidance::Unguided, 1.0);
    let buf = random_buffer(&mut rng, 20);
    let batch = buf.sample_batch(8, 3, 0.99, &mut rng).unwrap();
    let y = ac.nstep_target(&batch).unwrap();
    let input = Matrix::hcat(&[&batch.z, &batch.base_action, &batch.offset]);
    let expected: Vec<f64> = ac
        .critics
        .iter()
        .map(|c| {
            let q = c.forward_batch(&input).unwrap().output().data.clone();
            q.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
        })
        .collect();
    let up = ac.critic_update(&batch, false).unwrap();
    assert!((up.losses[0] - expected[0]).abs() <= 1e-12 * (1.0 + expected[0]));
    assert!((up.losses[1] - expected[1]).abs() <= 1e-12 * (1.0 + expected[1]));
}

#[test]
fn actor_loss_without_penalty_is_negated_min_q() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ac = small_agent(6, Guidance::Unguided, 1.0);
    let buf = random_buffer(&mut rng, 10);
    let batch = buf.sample_batch(10, 3, 0.99, &mut rng).unwrap();
    let pi = ac.policy_offsets(&batch.z, &batch.base_action).unwrap();
    let q = ac.min_q(&batch.z, &batch.base_action, &pi).unwrap();
    let expected = -q.iter().sum::<f64>() / q.len() as f64;
    let (loss, _) = ac.actor_gradients(&batch, None).unwrap();
    assert!((loss - expected).abs() <= 1e-12);
}
