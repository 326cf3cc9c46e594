#![allow(dead_code)]

use dcmpc::harness::RunConfig;

/// A configuration small enough to train a few episodes in well under a
/// second.
pub fn tiny_config(env: &str) -> RunConfig {
    let mut cfg = RunConfig {
        env: env.into(),
        seed: 3,
        episodes: 4,
        random_episodes: 2,
        batch_size: 16,
        max_episode_steps: 20,
        latent_dim: 4,
        eval_interval: 2,
        eval_episodes: 2,
        ..RunConfig::default()
    };
    cfg.world_model.encoder_hidden = vec![16];
    cfg.world_model.mlp_hidden = vec![16, 16];
    cfg.td.mlp_hidden = vec![16, 16];
    cfg.mppi.population = 32;
    cfg.mppi.prior_population = 4;
    cfg.mppi.elites = 8;
    cfg.mppi.iterations = 3;
    cfg
}
