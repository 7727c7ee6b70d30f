use fish_core::config::RunConfig;
use fish_core::env::{expert_rollout, ObsMode, TaskKind};
use fish_core::harness::{pretrain, record_demos, train};
use fish_core::ot::ot_rewards;

#[test]
fn bc_fits_demos_of_every_task() {
    for task in [TaskKind::Reach, TaskKind::Push, TaskKind::Insert] {
        for obs_mode in [ObsMode::State, ObsMode::Grid] {
            let cfg = RunConfig {
                task,
                obs_mode,
                ..RunConfig::default()
            };
            let demos = record_demos(&cfg).unwrap();
            let bc = fish_core::encoder::bc_pretrain(&demos, &cfg.bc_config()).unwrap();
            let last = *bc.loss_history.last().unwrap();
            assert!(last <= 1e-2, "{task:?} {obs_mode:?}: final BC loss {last}");
        }
    }
}

#[test]
fn frozen_encoder_keeps_rewards_stationary() {
    let cfg = RunConfig {
        task: TaskKind::Push,
        hidden_dim: 32,
        feature_dim: 16,
        batch_size: 32,
        seed_frames: 60,
        episodes: 8,
        ..RunConfig::default()
    };
    let demos = record_demos(&cfg).unwrap();
    let pre = pretrain(&cfg, &demos).unwrap();
    let task = cfg.task_config();
    let (_, obs, _, _) = expert_rollout(&task, task.eval_positions[3]).unwrap();
    let expert = pre.encoder.encode_all(demos.trajectories[0].next_observations()).unwrap();
    let before = ot_rewards(&pre.encoder.encode_all(&obs[1..]).unwrap(), &expert, &cfg.ot_config()).unwrap();

    let out = train(&cfg, &demos, &pre, None).unwrap();
    let expert_after = out.encoder.encode_all(demos.trajectories[0].next_observations()).unwrap();
    let after = ot_rewards(&out.encoder.encode_all(&obs[1..]).unwrap(), &expert_after, &cfg.ot_config()).unwrap();
    assert_eq!(before, after);
}
