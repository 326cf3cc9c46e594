//! TD3-style actor-critic on latent codes with N-step returns, a REDQ
//! critic ensemble and EMA target networks.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamW, Matrix, Mlp, MlpSpec, ParamBlock, Parameterized};
use crate::quantizer::Embedding;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdConfig {
    pub gamma: f64,
    pub n_step: usize,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub tau: f64,
    pub actor_update_freq: usize,
    /// Critics drawn for the TD minimum and the actor objective.
    pub subsample: usize,
    pub num_q: usize,
    pub lr: f64,
    pub mlp_hidden: Vec<usize>,
}

impl Default for TdConfig {
    fn default() -> Self {
        TdConfig {
            gamma: 0.99,
            n_step: 3,
            policy_noise: 0.2,
            noise_clip: 0.3,
            tau: 0.005,
            actor_update_freq: 2,
            subsample: 2,
            num_q: 5,
            lr: 3e-4,
            mlp_hidden: vec![512, 512],
        }
    }
}

impl TdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("td.gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.num_q == 0 || self.subsample == 0 || self.subsample > self.num_q {
            return Err(Error::Config(format!(
                "need 1 <= td.subsample ({}) <= td.num_q ({})",
                self.subsample, self.num_q
            )));
        }
        if self.n_step == 0 || self.actor_update_freq == 0 {
            return Err(Error::Config("td.n_step and td.actor_update_freq must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("td.tau must lie in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

/// A set of networks optimised together.
#[derive(Clone, Debug)]
pub struct Ensemble<T>(pub Vec<Mlp<T>>);

impl<T: Scalar> Parameterized<T> for Ensemble<T> {
    fn blocks(&self) -> Vec<&ParamBlock<T>> {
        self.0.iter().flat_map(|m| m.blocks_ref().iter()).collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock<T>> {
        self.0.iter_mut().flat_map(|m| m.blocks_slice_mut().iter_mut()).collect()
    }

    fn zero_grad(&mut self) {
        for m in &mut self.0 {
            m.zero_grad();
        }
    }
}

/// Box-bounded action space.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionBounds<T> {
    pub low: Vec<T>,
    pub high: Vec<T>,
}

impl<T: Scalar> ActionBounds<T> {
    pub fn symmetric(dim: usize, limit: f64) -> Self {
        ActionBounds {
            low: vec![T::lit(-limit); dim],
            high: vec![T::lit(limit); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn clip(&self, actions: &mut Matrix<T>) {
        let a = self.dim();
        for (i, v) in actions.as_mut_slice().iter_mut().enumerate() {
            *v = v.max(self.low[i % a]).min(self.high[i % a]);
        }
    }

    /// Maps `tanh` outputs in `[-1, 1]` affinely onto the bounds.
    fn squash(&self, pre: &Matrix<T>) -> Matrix<T> {
        let a = self.dim();
        let half = T::lit(0.5);
        let mut out = pre.clone();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            let (lo, hi) = (self.low[i % a], self.high[i % a]);
            *v = lo + (v.tanh() + T::one()) * half * (hi - lo);
        }
        out
    }

    fn squash_backward(&self, pre: &Matrix<T>, upstream: &Matrix<T>) -> Matrix<T> {
        let a = self.dim();
        let half = T::lit(0.5);
        let mut out = upstream.clone();
        for (i, (g, &p)) in out.as_mut_slice().iter_mut().zip(pre.as_slice()).enumerate() {
            let t = p.tanh();
            *g *= (T::one() - t * t) * half * (self.high[i % a] - self.low[i % a]);
        }
        out
    }
}

/// Inputs of one critic update, all encodings already detached.
#[derive(Clone, Debug)]
pub struct CriticBatch<T> {
    /// Features of `c_t`.
    pub features: Matrix<T>,
    /// `a_t`
    pub actions: Matrix<T>,
    /// `r_t … r_{t+N-1}`, each `batch x 1`.
    pub rewards: Vec<Matrix<T>>,
    /// Features of `c_{t+N}`.
    pub next_features: Matrix<T>,
}

/// Subsample and smoothing noise used by one TD-target evaluation.
#[derive(Clone, Debug)]
pub struct TargetNoise<T> {
    pub subsample: Vec<usize>,
    /// Clipped Gaussian perturbation of the target action, `batch x act_dim`.
    pub smoothing: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct Agent<T> {
    pub cfg: TdConfig,
    pub embedding: Embedding<T>,
    pub bounds: ActionBounds<T>,
    pub critics: Ensemble<T>,
    pub critic_targets: Ensemble<T>,
    pub policy: Mlp<T>,
    pub policy_target: Mlp<T>,
}

impl<T: Scalar> Agent<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &TdConfig, embedding: Embedding<T>, bounds: ActionBounds<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let feat = embedding.feature_dim();
        let act = bounds.dim();
        let critics: Vec<Mlp<T>> = (0..cfg.num_q)
            .map(|k| Mlp::new(&format!("critic{k}"), MlpSpec::new(feat + act, &cfg.mlp_hidden, 1).zero_final(), rng))
            .collect();
        let policy = Mlp::new("policy", MlpSpec::new(feat, &cfg.mlp_hidden, act), rng);
        let mut critic_targets = Ensemble(critics.clone());
        for (k, t) in critic_targets.0.iter_mut().enumerate() {
            t.rename(&format!("critic{k}_target"));
        }
        let mut policy_target = policy.clone();
        policy_target.rename("policy_target");
        Ok(Agent {
            cfg: cfg.clone(),
            embedding,
            bounds,
            critics: Ensemble(critics),
            critic_targets,
            policy,
            policy_target,
        })
    }

    pub fn act_dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.embedding.feature_dim()
    }

    /// Deterministic policy action.
    pub fn act(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.bounds.squash(&self.policy.forward(features)?))
    }

    pub fn act_target(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.bounds.squash(&self.policy_target.forward(features)?))
    }

    /// Value of every live critic, each `batch x 1`.
    pub fn q_values(&self, features: &Matrix<T>, actions: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        let input = Matrix::hcat(features, actions)?;
        self.critics.0.iter().map(|q| q.forward(&input)).collect()
    }

    /// Mean over all live critics, `batch x 1`.
    pub fn q_mean(&self, features: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>> {
        let qs = self.q_values(features, actions)?;
        let mut mean = Matrix::zeros(features.rows(), 1);
        for q in &qs {
            mean.add_assign(q);
        }
        mean.scale(T::one() / T::from_usize_lossy(qs.len()));
        Ok(mean)
    }

    pub fn draw_subsample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut m = sample(rng, self.cfg.num_q, self.cfg.subsample).into_vec();
        m.sort_unstable();
        m
    }

    /// Subsample plus clipped smoothing noise for a batch.
    pub fn draw_target_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> TargetNoise<T> {
        let subsample = self.draw_subsample(rng);
        let normal = Normal::new(0.0, self.cfg.policy_noise.max(0.0)).expect("finite std");
        let c = self.cfg.noise_clip;
        let smoothing = Matrix::from_fn(batch, self.act_dim(), |_, _| T::lit(normal.sample(rng).clamp(-c, c)));
        TargetNoise { subsample, smoothing }
    }

    /// N-step TD target: discounted rewards plus the discounted minimum over
    /// the subsampled target critics at the smoothed target-policy action.
    pub fn td_target(&self, batch: &CriticBatch<T>, noise: &TargetNoise<T>) -> Result<Matrix<T>> {
        let n = batch.rewards.len();
        if n == 0 || n != self.cfg.n_step {
            return Err(Error::Input(format!(
                "N-step target needs {} rewards, segment supplies {n}",
                self.cfg.n_step
            )));
        }
        let rows = batch.features.rows();
        let gamma = T::lit(self.cfg.gamma);
        let mut y = Matrix::zeros(rows, 1);
        let mut disc = T::one();
        for r in &batch.rewards {
            y.axpy(disc, r);
            disc *= gamma;
        }
        let mut a_next = self.act_target(&batch.next_features)?;
        a_next.add_assign(&noise.smoothing);
        self.bounds.clip(&mut a_next);
        let input = Matrix::hcat(&batch.next_features, &a_next)?;
        let mut min_q = Matrix::filled(rows, 1, T::infinity());
        for &k in &noise.subsample {
            let q = self.critic_targets.0[k].forward(&input)?;
            for (m, &v) in min_q.as_mut_slice().iter_mut().zip(q.as_slice()) {
                *m = m.min(v);
            }
        }
        y.axpy(disc, &min_q);
        if !y.is_finite() {
            return Err(Error::NonFinite("TD target".into()));
        }
        Ok(y)
    }

    /// Mean squared TD error over batch and all critics; gradients go to the
    /// live critics only.
    pub fn critic_loss(&mut self, batch: &CriticBatch<T>, targets: &Matrix<T>) -> Result<f64> {
        if !targets.is_finite() {
            return Err(Error::NonFinite("critic targets".into()));
        }
        let input = Matrix::hcat(&batch.features, &batch.actions)?;
        let rows = input.rows();
        let scale = T::lit(2.0) / T::from_usize_lossy(rows * self.critics.0.len());
        let mut total = 0.0;
        for q in &mut self.critics.0 {
            let (out, tape) = q.forward_tape(&input)?;
            let mut err = out;
            err.axpy(-T::one(), targets);
            total += err.as_slice().iter().map(|e| (*e * *e).as_f64()).sum::<f64>();
            err.scale(scale);
            q.backward(&tape, &err)?;
        }
        Ok(total / (rows * self.critics.0.len()) as f64)
    }

    /// `-mean_b (1/|M|) Σ_{k∈M} q_k(c, π(c))`; gradients go to the policy only.
    pub fn actor_loss(&mut self, features: &Matrix<T>, subsample: &[usize]) -> Result<f64> {
        let critics = std::mem::take(&mut self.critics.0);
        let feat_w = features.cols();
        let result = self.actor_loss_with(features, |actions| {
            let input = Matrix::hcat(features, actions)?;
            let upstream = Matrix::filled(actions.rows(), 1, T::one() / T::from_usize_lossy(subsample.len()));
            let mut value = Matrix::zeros(actions.rows(), 1);
            let mut grad = Matrix::zeros(actions.rows(), actions.cols());
            for &k in subsample {
                let (q, tape) = critics[k].forward_tape(&input)?;
                value.axpy(upstream[(0, 0)], &q);
                grad.add_assign(&critics[k].backward_input(&tape, &upstream)?.hsplit(feat_w).1);
            }
            Ok((value, grad))
        });
        self.critics.0 = critics;
        result
    }

    /// Actor loss `-mean_b v(π(c))` for an arbitrary differentiable value
    /// `v`, given as a function returning per-row values and `dv/da`.
    pub fn actor_loss_with<F>(&mut self, features: &Matrix<T>, mut value: F) -> Result<f64>
    where
        F: FnMut(&Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)>,
    {
        let (pre, tape) = self.policy.forward_tape(features)?;
        let actions = self.bounds.squash(&pre);
        let (v, mut dv) = value(&actions)?;
        let rows = features.rows();
        dv.scale(-T::one() / T::from_usize_lossy(rows));
        let d_pre = self.bounds.squash_backward(&pre, &dv);
        self.policy.backward(&tape, &d_pre)?;
        Ok(-v.sum().as_f64() / rows as f64)
    }

    /// Actor objective value for an arbitrary policy network (used by
    /// gradient checks).
    pub fn actor_objective(&self, policy: &Mlp<T>, features: &Matrix<T>, subsample: &[usize]) -> Result<f64> {
        let actions = self.bounds.squash(&policy.forward(features)?);
        let input = Matrix::hcat(features, &actions)?;
        let mut value = 0.0;
        for &k in subsample {
            value += self.critics.0[k].forward(&input)?.sum().as_f64();
        }
        Ok(-value / (features.rows() * subsample.len()) as f64)
    }

    /// Critic objective for an arbitrary critic ensemble (used by gradient
    /// checks).
    pub fn critic_objective(critics: &Ensemble<T>, batch: &CriticBatch<T>, targets: &Matrix<T>) -> Result<f64> {
        let input = Matrix::hcat(&batch.features, &batch.actions)?;
        let mut total = 0.0;
        for q in &critics.0 {
            let out = q.forward(&input)?;
            total += out
                .as_slice()
                .iter()
                .zip(targets.as_slice())
                .map(|(a, b)| (*a - *b).as_f64().powi(2))
                .sum::<f64>();
        }
        Ok(total / (input.rows() * critics.0.len()) as f64)
    }

    pub fn update_critic<R: Rng + ?Sized>(&mut self, batch: &CriticBatch<T>, rng: &mut R) -> Result<f64> {
        let noise = self.draw_target_noise(batch.features.rows(), rng);
        let y = self.td_target(batch, &noise)?;
        self.critics.zero_grad();
        let loss = self.critic_loss(batch, &y)?;
        AdamW::with_lr(self.cfg.lr).step(self.critics.blocks_mut())?;
        Ok(loss)
    }

    pub fn update_actor<R: Rng + ?Sized>(&mut self, features: &Matrix<T>, rng: &mut R) -> Result<f64> {
        let m = self.draw_subsample(rng);
        self.policy.zero_grad();
        let loss = self.actor_loss(features, &m)?;
        AdamW::with_lr(self.cfg.lr).step(self.policy.blocks_slice_mut().iter_mut())?;
        Ok(loss)
    }

    /// `target ← (1 - τ) target + τ live` for critics and policy.
    pub fn ema_update(&mut self, tau: f64) -> Result<()> {
        for (live, target) in self.critics.0.iter().zip(self.critic_targets.0.iter_mut()) {
            ema_update(live, target, tau)?;
        }
        ema_update(&self.policy, &mut self.policy_target, tau)
    }

    /// Every block including targets, in checkpoint order.
    pub fn all_blocks(&self) -> Vec<&ParamBlock<T>> {
        let mut out = self.critics.blocks();
        out.extend(self.critic_targets.blocks());
        out.extend(self.policy.blocks_ref());
        out.extend(self.policy_target.blocks_ref());
        out
    }

    pub fn all_blocks_mut(&mut self) -> Vec<&mut ParamBlock<T>> {
        let mut out = self.critics.blocks_mut();
        out.extend(self.critic_targets.blocks_mut());
        out.extend(self.policy.blocks_slice_mut().iter_mut());
        out.extend(self.policy_target.blocks_slice_mut().iter_mut());
        out
    }
}

/// Element-wise convex blend of `live` into `target`.
pub fn ema_update<T: Scalar>(live: &Mlp<T>, target: &mut Mlp<T>, tau: f64) -> Result<()> {
    let src = live.blocks_ref();
    if src.len() != target.blocks_ref().len() {
        return Err(Error::dim("EMA block count", src.len(), target.blocks_ref().len()));
    }
    for (s, t) in src.iter().zip(target.blocks_ref()) {
        if s.value.shape() != t.value.shape() {
            return Err(Error::dim(
                format!("EMA block `{}`", t.name),
                format!("{:?}", s.value.shape()),
                format!("{:?}", t.value.shape()),
            ));
        }
    }
    let tau_t = T::lit(tau);
    let keep = T::one() - tau_t;
    for (s, t) in src.iter().zip(target.blocks_slice_mut()) {
        for (tv, &sv) in t.value.as_mut_slice().iter_mut().zip(s.value.as_slice()) {
            *tv = keep * *tv + tau_t * sv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use crate::quantizer::{Codebook, EncodingVariant, FsqConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_agent(seed: u64, variant: EncodingVariant, n_step: usize) -> Agent<f64> {
        let book = Codebook::new(&FsqConfig::new(&[5, 3], 2).unwrap()).unwrap();
        let cfg = TdConfig {
            n_step,
            num_q: 5,
            mlp_hidden: vec![8, 8],
            ..TdConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Agent::new(&cfg, Embedding::new(variant, &book), ActionBounds::symmetric(2, 1.0), &mut rng).unwrap()
    }

    fn randomise_final_layers(agent: &mut Agent<f64>, rng: &mut ChaCha8Rng) {
        for q in agent.critics.0.iter_mut().chain(agent.critic_targets.0.iter_mut()) {
            let blocks = q.blocks_slice_mut();
            let n = blocks.len();
            let (r, c) = blocks[n - 2].value.shape();
            blocks[n - 2].value = Matrix::uniform(r, c, 0.5, rng);
            blocks[n - 1].value = Matrix::uniform(1, 1, 0.5, rng);
        }
    }

    fn batch(agent: &Agent<f64>, rows: usize, n: usize, rng: &mut ChaCha8Rng) -> CriticBatch<f64> {
        let f = agent.feature_dim();
        CriticBatch {
            features: Matrix::uniform(rows, f, 1.0, rng),
            actions: Matrix::uniform(rows, agent.act_dim(), 1.0, rng),
            rewards: (0..n).map(|_| Matrix::uniform(rows, 1, 1.0, rng)).collect(),
            next_features: Matrix::uniform(rows, f, 1.0, rng),
        }
    }

    fn set_constant(net: &mut Mlp<f64>, value: f64) {
        let blocks = net.blocks_slice_mut();
        let n = blocks.len();
        blocks[n - 2].value.fill(0.0);
        blocks[n - 1].value.fill(value);
    }

    #[test]
    fn zero_discount_target_is_first_reward() {
        let mut agent = tiny_agent(1, EncodingVariant::Codes, 3);
        agent.cfg.gamma = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        randomise_final_layers(&mut agent, &mut rng);
        let b = batch(&agent, 4, 3, &mut rng);
        let y = agent.td_target(&b, &agent.draw_target_noise(4, &mut rng)).unwrap();
        assert_eq!(y, b.rewards[0]);
    }

    #[test]
    fn zero_critics_give_discounted_reward_sum() {
        let agent = tiny_agent(3, EncodingVariant::OneHot, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = batch(&agent, 5, 3, &mut rng);
        let y = agent.td_target(&b, &agent.draw_target_noise(5, &mut rng)).unwrap();
        for i in 0..5 {
            let expect = b.rewards[0][(i, 0)] + 0.99 * b.rewards[1][(i, 0)] + 0.99 * 0.99 * b.rewards[2][(i, 0)];
            assert!((y[(i, 0)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn one_step_target_with_constant_critics() {
        let mut agent = tiny_agent(5, EncodingVariant::Codes, 1);
        for t in &mut agent.critic_targets.0 {
            set_constant(t, 10.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = batch(&agent, 3, 1, &mut rng);
        b.rewards[0].fill(1.0);
        let y = agent.td_target(&b, &agent.draw_target_noise(3, &mut rng)).unwrap();
        let expect = 1.0 + 0.99 * 10.0;
        for i in 0..3 {
            assert!((y[(i, 0)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_segment_length_is_rejected() {
        let agent = tiny_agent(7, EncodingVariant::Codes, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = batch(&agent, 2, 2, &mut rng);
        assert!(matches!(agent.td_target(&b, &agent.draw_target_noise(2, &mut rng)), Err(Error::Input(_))));
    }

    #[test]
    fn smoothing_noise_is_clipped() {
        let mut agent = tiny_agent(9, EncodingVariant::Codes, 3);
        agent.cfg.policy_noise = 5.0;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noise = agent.draw_target_noise(200, &mut rng);
        assert!(noise.smoothing.max_abs() <= 0.3);
        assert!(noise.smoothing.max_abs() > 0.29);
        assert_eq!(noise.subsample.len(), 2);
        assert!(noise.subsample[0] < noise.subsample[1] && noise.subsample[1] < 5);
    }

    #[test]
    fn critic_loss_is_zero_at_targets() {
        let mut agent = tiny_agent(11, EncodingVariant::Codes, 3);
        for q in &mut agent.critics.0 {
            set_constant(q, 0.25);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = batch(&agent, 4, 3, &mut rng);
        let y = Matrix::filled(4, 1, 0.25);
        assert_eq!(agent.critic_loss(&b, &y).unwrap(), 0.0);
    }

    #[test]
    fn critic_loss_rejects_non_finite_targets() {
        let mut agent = tiny_agent(13, EncodingVariant::Codes, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let b = batch(&agent, 2, 3, &mut rng);
        let y = Matrix::from_vec(2, 1, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(agent.critic_loss(&b, &y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        for variant in [EncodingVariant::Codes, EncodingVariant::OneHot, EncodingVariant::Label] {
            let mut agent = tiny_agent(15, variant, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(16);
            randomise_final_layers(&mut agent, &mut rng);
            let b = batch(&agent, 6, 3, &mut rng);
            let y = agent.td_target(&b, &agent.draw_target_noise(6, &mut rng)).unwrap();
            agent.critics.zero_grad();
            agent.critic_loss(&b, &y).unwrap();
            let analytic: Vec<_> = agent.critics.blocks().iter().map(|b| b.grad.clone()).collect();
            let mut probe = agent.critics.clone();
            let numeric = finite_diff_grad(&mut probe, 1e-5, |c: &Ensemble<f64>| {
                Agent::critic_objective(c, &b, &y).unwrap()
            });
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "{variant:?}: {err}");
            assert!(agent.policy.blocks_ref().iter().all(|b| b.grad.max_abs() == 0.0));
        }
    }

    #[test]
    fn actor_gradients_match_finite_differences() {
        for variant in [EncodingVariant::Codes, EncodingVariant::OneHot, EncodingVariant::Label] {
            let mut agent = tiny_agent(17, variant, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(18);
            randomise_final_layers(&mut agent, &mut rng);
            let features = Matrix::uniform(6, agent.feature_dim(), 1.0, &mut rng);
            let m = agent.draw_subsample(&mut rng);
            agent.policy.zero_grad();
            let loss = agent.actor_loss(&features, &m).unwrap();
            let mut probe = agent.policy.clone();
            assert!((loss - agent.actor_objective(&probe, &features, &m).unwrap()).abs() < 1e-12);
            let analytic: Vec<_> = agent.policy.blocks_ref().iter().map(|b| b.grad.clone()).collect();
            let numeric = finite_diff_grad(&mut probe, 1e-5, |p: &Mlp<f64>| agent.actor_objective(p, &features, &m).unwrap());
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "{variant:?}: {err}");
            assert!(agent.critics.blocks().iter().all(|b| b.grad.max_abs() == 0.0));
        }
    }

    #[test]
    fn constant_critics_give_zero_actor_gradient() {
        let mut agent = tiny_agent(19, EncodingVariant::Codes, 3);
        for q in &mut agent.critics.0 {
            set_constant(q, 3.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let features = Matrix::uniform(5, agent.feature_dim(), 1.0, &mut rng);
        let loss = agent.actor_loss(&features, &[0, 3]).unwrap();
        assert!((loss + 3.0).abs() < 1e-12);
        assert!(agent.policy.blocks_ref().iter().all(|b| b.grad.max_abs() == 0.0));
    }

    #[test]
    fn quadratic_value_pulls_actions_to_zero() {
        let mut agent = tiny_agent(21, EncodingVariant::Codes, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let features = Matrix::uniform(16, agent.feature_dim(), 1.0, &mut rng);
        let norm = |a: &Matrix<f64>| a.as_slice().iter().map(|v| v * v).sum::<f64>();
        let before = norm(&agent.act(&features).unwrap());
        agent.policy.zero_grad();
        agent
            .actor_loss_with(&features, |a| {
                let v = Matrix::from_fn(a.rows(), 1, |i, _| -a.row(i).iter().map(|x| x * x).sum::<f64>());
                let mut g = a.clone();
                g.scale(-2.0);
                Ok((v, g))
            })
            .unwrap();
        for b in agent.policy.blocks_slice_mut() {
            let g = b.grad.clone();
            b.value.axpy(-0.05, &g);
        }
        let after = norm(&agent.act(&features).unwrap());
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn actor_gradient_ignores_critic_offsets() {
        let mut agent = tiny_agent(23, EncodingVariant::Codes, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        randomise_final_layers(&mut agent, &mut rng);
        let features = Matrix::uniform(6, agent.feature_dim(), 1.0, &mut rng);
        agent.policy.zero_grad();
        agent.actor_loss(&features, &[1, 4]).unwrap();
        let g0: Vec<_> = agent.policy.blocks_ref().iter().map(|b| b.grad.clone()).collect();
        for q in &mut agent.critics.0 {
            let blocks = q.blocks_slice_mut();
            let n = blocks.len();
            blocks[n - 1].value.as_mut_slice()[0] += 7.5;
        }
        agent.policy.zero_grad();
        agent.actor_loss(&features, &[1, 4]).unwrap();
        for (a, b) in g0.iter().zip(agent.policy.blocks_ref()) {
            assert_eq!(a, &b.grad);
        }
    }

    #[test]
    fn ema_blends_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let spec = MlpSpec::new(3, &[4], 2);
        let mut live = Mlp::<f64>::new("live", spec.clone(), &mut rng);
        let mut target = Mlp::<f64>::new("target", spec, &mut rng);
        for b in live.blocks_slice_mut() {
            b.value.fill(2.0);
        }
        for b in target.blocks_slice_mut() {
            b.value.fill(0.0);
        }
        ema_update(&live, &mut target, 0.005).unwrap();
        assert!(target.blocks_ref().iter().all(|b| b.value.as_slice().iter().all(|&v| (v - 0.01).abs() < 1e-15)));
        ema_update(&live, &mut target, 0.0).unwrap();
        assert!(target.blocks_ref().iter().all(|b| b.value.as_slice().iter().all(|&v| (v - 0.01).abs() < 1e-15)));
        ema_update(&live, &mut target, 1.0).unwrap();
        assert!(target.blocks_ref().iter().zip(live.blocks_ref()).all(|(t, l)| t.value == l.value));
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let live = Mlp::<f64>::new("a", MlpSpec::new(3, &[4], 2), &mut rng);
        let mut target = Mlp::<f64>::new("b", MlpSpec::new(3, &[5], 2), &mut rng);
        assert!(matches!(ema_update(&live, &mut target, 0.5), Err(Error::Dimension { .. })));
    }

    #[test]
    fn targets_never_receive_gradients() {
        let mut agent = tiny_agent(27, EncodingVariant::Codes, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        for step in 0..20 {
            let b = batch(&agent, 8, 3, &mut rng);
            agent.update_critic(&b, &mut rng).unwrap();
            if step % agent.cfg.actor_update_freq == 0 {
                agent.update_actor(&b.features, &mut rng).unwrap();
            }
            agent.ema_update(agent.cfg.tau).unwrap();
        }
        assert!(agent.critic_targets.blocks().iter().all(|b| b.grad.max_abs() == 0.0 && b.step_count == 0));
        assert!(agent.policy_target.blocks_ref().iter().all(|b| b.grad.max_abs() == 0.0 && b.step_count == 0));
        assert!(agent.critics.blocks().iter().all(|b| b.step_count == 20));
        assert_ne!(agent.critic_targets.0[0].blocks_ref()[0].value, agent.critics.0[0].blocks_ref()[0].value);
    }

    #[test]
    fn policy_respects_bounds() {
        let book = Codebook::new(&FsqConfig::new(&[5, 3], 2).unwrap()).unwrap();
        let cfg = TdConfig {
            mlp_hidden: vec![16],
            ..TdConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let bounds = ActionBounds {
            low: vec![-2.0, 0.0],
            high: vec![2.0, 0.5],
        };
        let mut agent = Agent::new(&cfg, Embedding::new(EncodingVariant::Codes, &book), bounds, &mut rng).unwrap();
        for b in agent.policy.blocks_slice_mut() {
            let (r, c) = b.value.shape();
            b.value = Matrix::uniform(r, c, 20.0, &mut rng);
        }
        for _ in 0..100 {
            let features = Matrix::uniform(10_000, agent.feature_dim(), 50.0, &mut rng);
            let a = agent.act(&features).unwrap();
            for row in a.iter_rows() {
                assert!((-2.0..=2.0).contains(&row[0]) && (0.0..=0.5).contains(&row[1]));
            }
        }
    }

    #[test]
    fn expected_subsample_minimum_is_below_ensemble_mean() {
        let mut agent = tiny_agent(31, EncodingVariant::Codes, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        randomise_final_layers(&mut agent, &mut rng);
        let f = Matrix::uniform(20, agent.feature_dim(), 1.0, &mut rng);
        let a = Matrix::uniform(20, 2, 1.0, &mut rng);
        let qs = agent.q_values(&f, &a).unwrap();
        let mean = agent.q_mean(&f, &a).unwrap();
        for i in 0..20 {
            let mut total = 0.0;
            let mut pairs = 0.0;
            for j in 0..5 {
                for k in j + 1..5 {
                    let m = qs[j][(i, 0)].min(qs[k][(i, 0)]);
                    assert!(m <= 0.5 * (qs[j][(i, 0)] + qs[k][(i, 0)]));
                    total += m;
                    pairs += 1.0;
                }
            }
            assert!(total / pairs <= mean[(i, 0)] + 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TdConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.subsample = 6;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg = TdConfig { gamma: 1.0, ..TdConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
