//! Episode-granular collect/update loop and evaluation.

use std::path::Path;
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{ActionBounds, Agent, CriticBatch};
use crate::envs::{make_dynamics, symlog, Env, OracleModel};
use crate::error::{Error, Result};
use crate::harness::buffer::{ReplayBuffer, Transition};
use crate::harness::checkpoint::{save_checkpoint, Checkpoint};
use crate::harness::config::RunConfig;
use crate::harness::metrics::{MetricsRow, MetricsWriter, TimingRow};
use crate::numerics::Matrix;
use crate::planner::{plan, LearnedModel, PlanOutput, PlanState, PlanningModel, TraceRow};
use crate::quantizer::{active_code_fraction, Embedding};
use crate::scalar::Scalar;
use crate::worldmodel::{SequenceBatch, WorldModel};

const STREAM_INIT: u64 = 1;
const STREAM_COLLECT: u64 = 2;
const STREAM_UPDATE: u64 = 3;
const TAG_TRAIN_RESET: u64 = 11;
const TAG_EVAL_RESET: u64 = 12;
const TAG_EVAL_PLAN: u64 = 13;

/// Consecutive non-finite update iterations tolerated before aborting.
pub const MAX_NON_FINITE_STREAK: usize = 3;

/// SplitMix64 finaliser over `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn row<T: Scalar>(v: &[f64]) -> Matrix<T> {
    Matrix::from_fn(1, v.len(), |_, j| T::lit(v[j]))
}

/// Freshly initialised world model and agent for a configuration.
pub fn build_models<T: Scalar>(cfg: &RunConfig, seed: u64) -> Result<(WorldModel<T>, Agent<T>)> {
    let dynamics = make_dynamics(&cfg.env, cfg.max_episode_steps, cfg.action_repeat)?;
    let spec = dynamics.spec();
    let mut rng = stream_rng(seed, STREAM_INIT);
    let world = WorldModel::new(spec.obs_dim, spec.act_dim, &cfg.fsq()?, &cfg.world_model, cfg.encoding_variant, &mut rng)?;
    let bounds = ActionBounds {
        low: spec.action_low.iter().map(|&v| T::lit(v)).collect(),
        high: spec.action_high.iter().map(|&v| T::lit(v)).collect(),
    };
    let agent = Agent::new(&cfg.td, Embedding::new(cfg.encoding_variant, &world.codebook), bounds, &mut rng)?;
    Ok((world, agent))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalResult {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        EvalResult { returns, mean, std }
    }
}

/// Runs noise-free planning episodes with `step_model` planning each step.
/// Planner traces of the first episode are appended to `trace`.
fn planned_episodes<T, F>(
    cfg: &RunConfig,
    episodes: usize,
    seed: u64,
    bounds: &ActionBounds<T>,
    mut trace: Option<&mut Vec<TraceRow>>,
    mut step_model: F,
) -> Result<EvalResult>
where
    T: Scalar,
    F: FnMut(&Env, &PlanState<T>, &mut ChaCha8Rng) -> Result<PlanOutput<T>>,
{
    let mut env = Env::by_name(&cfg.env, cfg.max_episode_steps, cfg.action_repeat)?;
    let mut returns = Vec::with_capacity(episodes);
    for k in 0..episodes as u64 {
        env.reset(derive_seed(seed, TAG_EVAL_RESET, k));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_EVAL_PLAN, k));
        let mut state = PlanState::initial(&cfg.mppi, bounds.dim());
        let mut total = 0.0;
        loop {
            let out = step_model(&env, &state, &mut rng)?;
            if let (0, Some(rows)) = (k, trace.as_deref_mut()) {
                let step = env.steps_taken();
                rows.extend(out.trace.iter().map(|r| TraceRow { step, ..r.clone() }));
            }
            state = out.next_state(&cfg.mppi);
            let action: Vec<f64> = out.action.iter().map(|v| v.as_f64()).collect();
            let step = env.step(&action)?;
            total += step.reward;
            if step.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(EvalResult::from_returns(returns))
}

/// Return of the planner driven by the true simulator with a zero terminal
/// value, on the evaluation episodes of `seed`.
pub fn oracle_baseline(cfg: &RunConfig, episodes: usize, seed: u64) -> Result<EvalResult> {
    let dynamics = make_dynamics(&cfg.env, cfg.max_episode_steps, cfg.action_repeat)?;
    let oracle = OracleModel::new(dynamics.clone());
    let spec = dynamics.spec();
    let bounds = ActionBounds::<f64> {
        low: spec.action_low.clone(),
        high: spec.action_high.clone(),
    };
    planned_episodes(cfg, episodes, seed, &bounds, None, |env, state, rng| {
        let start = oracle.start_state::<f64>(env);
        plan(&cfg.mppi, &oracle as &dyn PlanningModel<f64>, &start, state, &bounds, 0.0, rng)
    })
}

/// Returns of uniformly random actions on the evaluation episodes of `seed`.
pub fn random_policy_returns(cfg: &RunConfig, episodes: usize, seed: u64) -> Result<EvalResult> {
    let mut env = Env::by_name(&cfg.env, cfg.max_episode_steps, cfg.action_repeat)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_EVAL_PLAN, u64::MAX));
    let mut returns = Vec::with_capacity(episodes);
    for k in 0..episodes as u64 {
        env.reset(derive_seed(seed, TAG_EVAL_RESET, k));
        let spec = env.spec().clone();
        let mut total = 0.0;
        loop {
            let a: Vec<f64> = spec.action_low.iter().zip(&spec.action_high).map(|(&lo, &hi)| rng.random_range(lo..=hi)).collect();
            let step = env.step(&a)?;
            total += step.reward;
            if step.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(EvalResult::from_returns(returns))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounters {
    pub world: usize,
    pub critic: usize,
    pub actor: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeLosses {
    pub world: f64,
    pub critic: f64,
    pub actor: Option<f64>,
}

pub struct Trainer<T> {
    pub config: RunConfig,
    pub world: WorldModel<T>,
    pub agent: Agent<T>,
    pub buffer: ReplayBuffer<T>,
    pub counters: UpdateCounters,
    pub env_steps: u64,
    pub episodes_done: usize,
    env: Env,
    collect_rng: ChaCha8Rng,
    update_rng: ChaCha8Rng,
    bad_streak: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (world, agent) = build_models(&config, config.seed)?;
        Trainer::with_models(config, world, agent)
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        Trainer::with_models(ckpt.config, ckpt.world, ckpt.agent)
    }

    fn with_models(config: RunConfig, world: WorldModel<T>, agent: Agent<T>) -> Result<Self> {
        let env = Env::by_name(&config.env, config.max_episode_steps, config.action_repeat)?;
        Ok(Trainer {
            buffer: ReplayBuffer::new(config.buffer_capacity),
            collect_rng: stream_rng(config.seed, STREAM_COLLECT),
            update_rng: stream_rng(config.seed, STREAM_UPDATE),
            config,
            world,
            agent,
            counters: UpdateCounters::default(),
            env_steps: 0,
            episodes_done: 0,
            env,
            bad_streak: 0,
        })
    }

    /// Runs one episode with random actions or the planner and stores it.
    /// Returns the raw episodic return and the observations visited.
    pub fn collect_episode(&mut self, random: bool, noise_std: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        let episode = self.episodes_done as u64;
        let mut obs = self.env.reset(derive_seed(self.config.seed, TAG_TRAIN_RESET, episode));
        let spec = self.env.spec().clone();
        let mut visited = vec![obs.clone()];
        let mut state = PlanState::initial(&self.config.mppi, spec.act_dim);
        let mut total = 0.0;
        loop {
            let action: Vec<f64> = if random {
                spec.action_low
                    .iter()
                    .zip(&spec.action_high)
                    .map(|(&lo, &hi)| self.collect_rng.random_range(lo..=hi))
                    .collect()
            } else {
                let model = LearnedModel::new(&self.world, &self.agent);
                let start = model.start_state(&row(&obs))?;
                let out = plan(&self.config.mppi, &model, &start, &state, &self.agent.bounds, noise_std, &mut self.collect_rng)?;
                state = out.next_state(&self.config.mppi);
                out.action.iter().map(|v| v.as_f64()).collect()
            };
            let step = self.env.step(&action)?;
            total += step.reward;
            let reward = if self.config.symlog_rewards { symlog(step.reward) } else { step.reward };
            self.buffer.push(Transition {
                episode,
                obs: obs.iter().map(|&v| T::lit(v)).collect(),
                action: action.iter().map(|&v| T::lit(v)).collect(),
                next_obs: step.obs.iter().map(|&v| T::lit(v)).collect(),
                reward: T::lit(reward),
            })?;
            self.env_steps += 1;
            visited.push(step.obs.clone());
            obs = step.obs;
            if step.done {
                break;
            }
        }
        self.episodes_done += 1;
        Ok((total, visited))
    }

    /// One world-model step, one critic step, an actor step every
    /// `actor_update_freq` iterations, then the target EMA.
    pub fn update_step(&mut self) -> Result<EpisodeLosses> {
        let h = self.config.world_model.horizon;
        let n = self.config.td.n_step;
        let win = self.buffer.sample(self.config.batch_size, self.config.window_len(), &mut self.update_rng)?;
        let wm_batch = SequenceBatch {
            obs: win.obs[..=h].to_vec(),
            actions: win.actions[..h].to_vec(),
            rewards: win.rewards[..h].to_vec(),
        };
        let mut bad = false;
        let mut check = |r: Result<f64>| -> Result<f64> {
            match r {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(v) => {
                    bad = true;
                    Ok(v)
                }
                Err(Error::NonFinite(_)) => {
                    bad = true;
                    Ok(f64::NAN)
                }
                Err(e) => Err(e),
            }
        };
        let world = check(self.world.update(&wm_batch, &mut self.update_rng).map(|l| l.total))?;
        self.counters.world += 1;
        let c0 = self.world.encode(&win.obs[0])?;
        let cn = self.world.encode(&win.obs[n])?;
        let batch = CriticBatch {
            features: self.agent.embedding.embed_code(&c0),
            actions: win.actions[0].clone(),
            rewards: win.rewards[..n].to_vec(),
            next_features: self.agent.embedding.embed_code(&cn),
        };
        let critic = check(self.agent.update_critic(&batch, &mut self.update_rng))?;
        self.counters.critic += 1;
        let actor = if self.counters.critic.is_multiple_of(self.config.td.actor_update_freq) {
            self.counters.actor += 1;
            Some(check(self.agent.update_actor(&batch.features, &mut self.update_rng))?)
        } else {
            None
        };
        self.agent.ema_update(self.config.td.tau)?;
        self.bad_streak = if bad { self.bad_streak + 1 } else { 0 };
        if self.bad_streak >= MAX_NON_FINITE_STREAK {
            return Err(Error::NumericalAbort(format!(
                "non-finite losses for {} consecutive updates (world {world}, critic {critic}, actor {actor:?})",
                self.bad_streak
            )));
        }
        Ok(EpisodeLosses { world, critic, actor })
    }

    /// Mean losses over `count` update iterations.
    pub fn run_updates(&mut self, count: usize) -> Result<Option<EpisodeLosses>> {
        if count == 0 {
            return Ok(None);
        }
        let (mut w, mut c, mut a, mut na) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..count {
            let l = self.update_step()?;
            w += l.world;
            c += l.critic;
            if let Some(v) = l.actor {
                a += v;
                na += 1;
            }
        }
        Ok(Some(EpisodeLosses {
            world: w / count as f64,
            critic: c / count as f64,
            actor: (na > 0).then(|| a / na as f64),
        }))
    }

    /// Fraction of codebook entries used by any latent dimension when
    /// encoding `observations`.
    pub fn active_codes(&self, observations: &[Vec<f64>]) -> Result<f64> {
        let obs = Matrix::from_fn(observations.len(), self.world.obs_dim, |i, j| T::lit(observations[i][j]));
        let code = self.world.encode(&obs)?;
        active_code_fraction(code.indices.iter().copied(), self.world.codebook_size())
    }

    /// Noise-free planning episodes; never touches the replay buffer.
    pub fn evaluate(&self, episodes: usize, seed: u64) -> Result<EvalResult> {
        self.evaluate_traced(episodes, seed, None)
    }

    /// [`Trainer::evaluate`], also collecting the planner trace of the first
    /// episode.
    pub fn evaluate_traced(&self, episodes: usize, seed: u64, trace: Option<&mut Vec<TraceRow>>) -> Result<EvalResult> {
        let model = LearnedModel::new(&self.world, &self.agent);
        planned_episodes(&self.config, episodes, seed, &self.agent.bounds, trace, |env, state, rng| {
            let start = model.start_state(&row(&env.observe()))?;
            plan(&self.config.mppi, &model, &start, state, &self.agent.bounds, 0.0, rng)
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config, &self.world, &self.agent)
    }

    /// Trains until `config.episodes` episodes have been collected. With an
    /// output directory, writes `metrics.csv`, `timing.csv` and checkpoints.
    pub fn train(&mut self, out_dir: Option<&Path>) -> Result<Vec<MetricsRow>> {
        self.train_until(out_dir, |_| false)
    }

    /// [`Trainer::train`], stopping early after the first row for which
    /// `stop` returns true.
    pub fn train_until<F>(&mut self, out_dir: Option<&Path>, mut stop: F) -> Result<Vec<MetricsRow>>
    where
        F: FnMut(&MetricsRow) -> bool,
    {
        let mut writers = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some((
                    MetricsWriter::create(&dir.join("metrics.csv"))?,
                    MetricsWriter::create(&dir.join("timing.csv"))?,
                ))
            }
            None => None,
        };
        let clock = Instant::now();
        let mut rows = Vec::new();
        while self.episodes_done < self.config.episodes {
            let episode = self.episodes_done;
            let random = episode < self.config.random_episodes;
            let noise = if random { 0.0 } else { self.config.noise.at(episode) };
            let (ret, visited) = self.collect_episode(random, noise)?;
            let losses = if random {
                None
            } else {
                match self.run_updates(self.config.updates_per_episode()) {
                    Err(e @ Error::NumericalAbort(_)) => {
                        if let Some(dir) = out_dir {
                            self.save(&dir.join("diagnostic.ckpt"))?;
                        }
                        return Err(e);
                    }
                    other => other?,
                }
            };
            let eval = if (episode + 1).is_multiple_of(self.config.eval_interval) {
                Some(self.evaluate(self.config.eval_episodes, self.config.seed)?)
            } else {
                None
            };
            let row = MetricsRow {
                env_step: self.env_steps * self.config.action_repeat as u64,
                episode: episode as u64 + 1,
                episodic_return: ret,
                eval_return_mean: eval.as_ref().map(|e| e.mean),
                eval_return_std: eval.as_ref().map(|e| e.std),
                world_loss: losses.map(|l| l.world),
                critic_loss: losses.map(|l| l.critic),
                actor_loss: losses.and_then(|l| l.actor),
                active_code_fraction: self.active_codes(&visited)?,
            };
            info!(
                "episode {} return {:.2} eval {:?} codes {:.3} world {:?} critic {:?}",
                row.episode, row.episodic_return, row.eval_return_mean, row.active_code_fraction, row.world_loss, row.critic_loss
            );
            if let Some((metrics, timing)) = writers.as_mut() {
                metrics.write(&row)?;
                timing.write(&TimingRow {
                    episode: row.episode,
                    wall_clock_s: clock.elapsed().as_secs_f64(),
                })?;
            }
            let done = stop(&row);
            rows.push(row);
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_interval;
                if every > 0 && self.episodes_done.is_multiple_of(every) {
                    self.save(&dir.join(format!("checkpoint_{:04}.ckpt", self.episodes_done)))?;
                }
            }
            if done {
                break;
            }
        }
        if let Some(dir) = out_dir {
            self.save(&dir.join("checkpoint.ckpt"))?;
        }
        Ok(rows)
    }
}
