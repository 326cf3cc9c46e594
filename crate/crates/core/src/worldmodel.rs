//! Discrete codebook world model: encoder, categorical latent dynamics and
//! reward head, trained jointly through straight-through Gumbel-softmax
//! rollouts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{grouped_softmax, AdamW, Matrix, Mlp, MlpSpec, MlpTape, ParamBlock, Parameterized};
use crate::quantizer::{quantize, quantize_backward, Codebook, Embedding, EncodingVariant, FsqConfig, LatentCode};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldModelConfig {
    pub encoder_hidden: Vec<usize>,
    pub mlp_hidden: Vec<usize>,
    /// Rollout length used by the training loss.
    pub horizon: usize,
    /// Per-step weight `γ^h` inside the loss.
    pub discount: f64,
    pub gumbel_temperature: f64,
    pub encoder_lr: f64,
    pub lr: f64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        WorldModelConfig {
            encoder_hidden: vec![256],
            mlp_hidden: vec![512, 512],
            horizon: 5,
            discount: 0.9,
            gumbel_temperature: 1.0,
            encoder_lr: 1e-4,
            lr: 3e-4,
        }
    }
}

/// Per-dimension categorical over the codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsDistribution<T> {
    /// `batch x d*|C|`
    pub logits: Matrix<T>,
    /// Row softmax of `logits` within each group of `|C|` columns.
    pub probs: Matrix<T>,
    pub codebook_size: usize,
}

impl<T: Scalar> DynamicsDistribution<T> {
    pub fn from_logits(logits: Matrix<T>, codebook_size: usize) -> Self {
        let probs = grouped_softmax(&logits, codebook_size);
        DynamicsDistribution {
            logits,
            probs,
            codebook_size,
        }
    }
}

/// Output of one straight-through Gumbel-softmax draw.
#[derive(Clone, Debug)]
pub struct GumbelSample<T> {
    /// Hard sample, always a codebook row per latent dimension.
    pub code: LatentCode<T>,
    /// Tempered softmax of the perturbed logits; carries the gradient.
    pub soft: Matrix<T>,
    /// Gumbel perturbations `-ln(-ln u)`.
    pub noise: Matrix<T>,
}

/// Draws Gumbel perturbations for `rows x cols` logits.
pub fn gumbel_noise<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        T::lit(-(-u.ln()).ln())
    })
}

/// Straight-through Gumbel-softmax with caller-supplied perturbations.
pub fn gumbel_st_with_noise<T: Scalar>(
    dist: &DynamicsDistribution<T>,
    noise: Matrix<T>,
    temperature: f64,
    codebook: &Codebook<T>,
) -> Result<GumbelSample<T>> {
    if temperature <= 0.0 {
        return Err(Error::Input(format!("Gumbel temperature must be positive, got {temperature}")));
    }
    if noise.shape() != dist.logits.shape() {
        return Err(Error::dim(
            "Gumbel noise",
            format!("{:?}", dist.logits.shape()),
            format!("{:?}", noise.shape()),
        ));
    }
    let n = dist.codebook_size;
    let inv_tau = T::lit(1.0 / temperature);
    let mut perturbed = dist.logits.clone();
    perturbed.add_assign(&noise);
    let mut indices = Vec::with_capacity(perturbed.as_slice().len() / n);
    for group in perturbed.as_slice().chunks_exact(n) {
        let mut best = 0;
        for (i, &v) in group.iter().enumerate() {
            if v > group[best] {
                best = i;
            }
        }
        indices.push(best);
    }
    perturbed.scale(inv_tau);
    let soft = grouped_softmax(&perturbed, n);
    Ok(GumbelSample {
        code: LatentCode::from_indices(indices, codebook)?,
        soft,
        noise,
    })
}

/// Samples a next code per latent dimension with the ST Gumbel-softmax trick.
pub fn gumbel_st_sample<T: Scalar, R: Rng + ?Sized>(
    dist: &DynamicsDistribution<T>,
    temperature: f64,
    codebook: &Codebook<T>,
    rng: &mut R,
) -> Result<GumbelSample<T>> {
    let noise = gumbel_noise(dist.logits.rows(), dist.logits.cols(), rng);
    gumbel_st_with_noise(dist, noise, temperature, codebook)
}

/// Gradient w.r.t. the logits given the gradient w.r.t. the (one-hot) sample,
/// routed through the tempered softmax.
pub fn gumbel_st_backward<T: Scalar>(soft: &Matrix<T>, upstream: &Matrix<T>, codebook_size: usize, temperature: f64) -> Matrix<T> {
    let inv_tau = T::lit(1.0 / temperature);
    let mut out = Matrix::zeros(soft.rows(), soft.cols());
    for ((o, s), g) in out
        .as_mut_slice()
        .chunks_exact_mut(codebook_size)
        .zip(soft.as_slice().chunks_exact(codebook_size))
        .zip(upstream.as_slice().chunks_exact(codebook_size))
    {
        let dot: T = s.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for i in 0..codebook_size {
            o[i] = inv_tau * s[i] * (g[i] - dot);
        }
    }
    out
}

/// Probability-weighted average of codebook rows, per latent dimension.
pub fn expected_next_code<T: Scalar>(dist: &DynamicsDistribution<T>, codebook: &Codebook<T>) -> Result<Matrix<T>> {
    Embedding::new(EncodingVariant::Codes, codebook).embed_probs(&dist.probs)
}

/// `H` step training rollout.
#[derive(Clone, Debug)]
pub struct RolloutTrace<T> {
    /// `ĉ_0 … ĉ_H`
    pub codes: Vec<LatentCode<T>>,
    pub distributions: Vec<DynamicsDistribution<T>>,
    pub rewards_pred: Vec<Matrix<T>>,
    pub gumbel_noise: Vec<Matrix<T>>,
}

/// Contiguous `H`-transition segments: `obs[0..=H]`, `actions[0..H]`,
/// `rewards[0..H]`, each entry one batch-sized matrix.
#[derive(Clone, Debug)]
pub struct SequenceBatch<T> {
    pub obs: Vec<Matrix<T>>,
    pub actions: Vec<Matrix<T>>,
    pub rewards: Vec<Matrix<T>>,
}

impl<T: Scalar> SequenceBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.obs.first().map_or(0, Matrix::rows)
    }
}

/// Constants frozen by the stop-gradient operators of one loss evaluation.
///
/// Replaying them turns the straight-through loss into a smooth function
/// of the parameters whose exact gradient is the straight-through gradient,
/// which is what finite differences can check.
#[derive(Clone, Debug)]
pub struct StraightThroughRecord<T> {
    quant_offset: Matrix<T>,
    first_indices: LatentCode<T>,
    noise: Vec<Matrix<T>>,
    sample_offset: Vec<Matrix<T>>,
    targets: Vec<Vec<usize>>,
}

enum Noise<'a, T, R: ?Sized> {
    Live(&'a mut R),
    Replay(&'a StraightThroughRecord<T>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WorldModelLoss {
    pub total: f64,
    pub consistency: f64,
    pub reward: f64,
}

struct StepTape<T> {
    dyn_tape: MlpTape<T>,
    rew_tape: MlpTape<T>,
    probs: Matrix<T>,
    soft: Matrix<T>,
    reward_err: Matrix<T>,
}

struct LossTape<T> {
    enc_tape: MlpTape<T>,
    x0: Matrix<T>,
    steps: Vec<StepTape<T>>,
    targets: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct WorldModel<T> {
    pub fsq: FsqConfig,
    pub cfg: WorldModelConfig,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub codebook: Codebook<T>,
    /// Representation fed to the reward head.
    pub embedding: Embedding<T>,
    pub encoder: Mlp<T>,
    pub dynamics: Mlp<T>,
    pub reward: Mlp<T>,
}

impl<T: Scalar> WorldModel<T> {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        fsq: &FsqConfig,
        cfg: &WorldModelConfig,
        variant: EncodingVariant,
        rng: &mut R,
    ) -> Result<Self> {
        let codebook = Codebook::new(fsq)?;
        let embedding = Embedding::new(variant, &codebook);
        let code_w = fsq.code_width();
        let encoder = Mlp::new("encoder", MlpSpec::new(obs_dim, &cfg.encoder_hidden, code_w), rng);
        let dynamics = Mlp::new(
            "dynamics",
            MlpSpec::new(code_w + act_dim, &cfg.mlp_hidden, fsq.latent_dim * codebook.size()),
            rng,
        );
        let reward = Mlp::new(
            "reward",
            MlpSpec::new(embedding.feature_dim() + act_dim, &cfg.mlp_hidden, 1).zero_final(),
            rng,
        );
        Ok(WorldModel {
            fsq: fsq.clone(),
            cfg: cfg.clone(),
            obs_dim,
            act_dim,
            codebook,
            embedding,
            encoder,
            dynamics,
            reward,
        })
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.size()
    }

    fn check_obs(&self, obs: &Matrix<T>) -> Result<()> {
        if obs.cols() != self.obs_dim {
            return Err(Error::dim("observation width", self.obs_dim, obs.cols()));
        }
        if !obs.is_finite() {
            return Err(Error::Input("observation contains non-finite values".into()));
        }
        Ok(())
    }

    /// Quantized encoding of a batch of observations.
    pub fn encode(&self, obs: &Matrix<T>) -> Result<LatentCode<T>> {
        self.check_obs(obs)?;
        quantize(&self.encoder.forward(obs)?, &self.codebook)
    }

    pub fn dynamics_logits(&self, code_symbols: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>> {
        self.dynamics.forward(&Matrix::hcat(code_symbols, actions)?)
    }

    /// Next-code distribution from (possibly expected) code symbols.
    pub fn dynamics_forward(&self, code_symbols: &Matrix<T>, actions: &Matrix<T>) -> Result<DynamicsDistribution<T>> {
        Ok(DynamicsDistribution::from_logits(
            self.dynamics_logits(code_symbols, actions)?,
            self.codebook.size(),
        ))
    }

    /// Predicted reward (`batch x 1`) from reward-head features.
    pub fn reward_from_features(&self, features: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>> {
        self.reward.forward(&Matrix::hcat(features, actions)?)
    }

    pub fn reward_forward(&self, code: &LatentCode<T>, actions: &Matrix<T>) -> Result<Matrix<T>> {
        self.reward_from_features(&self.embedding.embed_code(code), actions)
    }

    /// Encodes `o_0` and samples `H` steps ahead with ST Gumbel-softmax.
    pub fn rollout_train<R: Rng + ?Sized>(&self, obs0: &Matrix<T>, actions: &[Matrix<T>], rng: &mut R) -> Result<RolloutTrace<T>> {
        if actions.is_empty() {
            return Err(Error::Input("rollout needs at least one action".into()));
        }
        let mut code = self.encode(obs0)?;
        let mut trace = RolloutTrace {
            codes: vec![code.clone()],
            distributions: Vec::with_capacity(actions.len()),
            rewards_pred: Vec::with_capacity(actions.len()),
            gumbel_noise: Vec::with_capacity(actions.len()),
        };
        for a in actions {
            let dist = self.dynamics_forward(&code.symbols, a)?;
            trace.rewards_pred.push(self.reward_forward(&code, a)?);
            let sample = gumbel_st_sample(&dist, self.cfg.gumbel_temperature, &self.codebook, rng)?;
            code = sample.code;
            trace.codes.push(code.clone());
            trace.distributions.push(dist);
            trace.gumbel_noise.push(sample.noise);
        }
        Ok(trace)
    }

    fn check_batch(&self, batch: &SequenceBatch<T>) -> Result<usize> {
        let h = self.cfg.horizon;
        if h == 0 {
            return Err(Error::Config("world-model horizon must be at least 1".into()));
        }
        if batch.obs.len() < h + 1 || batch.actions.len() < h || batch.rewards.len() < h {
            return Err(Error::Input(format!(
                "segment too short for horizon {h}: {} observations, {} actions, {} rewards",
                batch.obs.len(),
                batch.actions.len(),
                batch.rewards.len()
            )));
        }
        for o in &batch.obs[..=h] {
            self.check_obs(o)?;
        }
        Ok(h)
    }

    fn forward_loss<R: Rng + ?Sized>(
        &self,
        batch: &SequenceBatch<T>,
        mut noise: Noise<'_, T, R>,
    ) -> Result<(WorldModelLoss, LossTape<T>, StraightThroughRecord<T>)> {
        let h_len = self.check_batch(batch)?;
        let n = self.codebook.size();
        let b = T::from_usize_lossy(batch.batch_size());
        let tau = self.cfg.gumbel_temperature;
        let code_table = Embedding::new(EncodingVariant::Codes, &self.codebook);

        let (x0, enc_tape) = self.encoder.forward_tape(&batch.obs[0])?;
        let hard0 = quantize(&x0, &self.codebook)?;
        let targets: Vec<Vec<usize>> = match &noise {
            Noise::Replay(rec) => rec.targets.clone(),
            Noise::Live(_) => (1..=h_len)
                .map(|h| Ok(self.encode(&batch.obs[h])?.indices))
                .collect::<Result<_>>()?,
        };

        let (mut sym, mut feat, first_indices, quant_offset) = match &noise {
            Noise::Live(_) => {
                let mut offset = hard0.symbols.clone();
                offset.axpy(-T::one(), &x0.map(|v| v.tanh()));
                (hard0.symbols.clone(), self.embedding.embed_code(&hard0), hard0.clone(), offset)
            }
            Noise::Replay(rec) => {
                let mut sym = x0.map(|v| v.tanh());
                sym.add_assign(&rec.quant_offset);
                let feat = match self.embedding.variant {
                    EncodingVariant::Codes => sym.clone(),
                    _ => self.embedding.embed_code(&rec.first_indices),
                };
                (sym, feat, rec.first_indices.clone(), rec.quant_offset.clone())
            }
        };

        let mut record = StraightThroughRecord {
            quant_offset,
            first_indices,
            noise: Vec::with_capacity(h_len),
            sample_offset: Vec::with_capacity(h_len),
            targets: targets.clone(),
        };
        let mut steps = Vec::with_capacity(h_len);
        let mut loss = WorldModelLoss::default();
        let mut weight = 1.0;
        for h in 0..h_len {
            let a = &batch.actions[h];
            let (logits, dyn_tape) = self.dynamics.forward_tape(&Matrix::hcat(&sym, a)?)?;
            let (r_hat, rew_tape) = self.reward.forward_tape(&Matrix::hcat(&feat, a)?)?;

            // cross-entropy against the stop-gradient target codes
            let mut ce = 0.0;
            for (group, &t) in logits.as_slice().chunks_exact(n).zip(&targets[h]) {
                let max = group.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + group.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                ce += (lse - group[t]).as_f64();
            }
            let ce = ce / b.as_f64();
            let mut reward_err = r_hat;
            reward_err.axpy(-T::one(), &batch.rewards[h]);
            let mse = reward_err.as_slice().iter().map(|e| (*e * *e).as_f64()).sum::<f64>() / b.as_f64();
            loss.consistency += weight * ce;
            loss.reward += weight * mse;

            let dist = DynamicsDistribution::from_logits(logits, n);
            let step_noise = match &mut noise {
                Noise::Live(rng) => gumbel_noise(dist.logits.rows(), dist.logits.cols(), *rng),
                Noise::Replay(rec) => rec.noise[h].clone(),
            };
            let sample = gumbel_st_with_noise(&dist, step_noise, tau, &self.codebook)?;
            let (next_sym, next_feat, offset) = match &noise {
                Noise::Live(_) => {
                    let onehot = crate::quantizer::one_hot_encode(&sample.code, &self.codebook);
                    let mut offset = onehot;
                    offset.axpy(-T::one(), &sample.soft);
                    (sample.code.symbols.clone(), self.embedding.embed_code(&sample.code), offset)
                }
                Noise::Replay(rec) => {
                    let mut y = sample.soft.clone();
                    y.add_assign(&rec.sample_offset[h]);
                    (code_table.embed_probs(&y)?, self.embedding.embed_probs(&y)?, rec.sample_offset[h].clone())
                }
            };
            record.noise.push(sample.noise);
            record.sample_offset.push(offset);
            steps.push(StepTape {
                dyn_tape,
                rew_tape,
                probs: dist.probs,
                soft: sample.soft,
                reward_err,
            });
            sym = next_sym;
            feat = next_feat;
            weight *= self.cfg.discount;
        }
        loss.total = loss.consistency + loss.reward;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("world-model loss".into()));
        }
        Ok((
            loss,
            LossTape {
                enc_tape,
                x0,
                steps,
                targets,
            },
            record,
        ))
    }

    /// Evaluates the joint loss and accumulates its gradients into the
    /// encoder, dynamics and reward parameters.
    pub fn loss_world_model<R: Rng + ?Sized>(&mut self, batch: &SequenceBatch<T>, rng: &mut R) -> Result<WorldModelLoss> {
        Ok(self.loss_with_record(batch, rng)?.0)
    }

    /// Like [`WorldModel::loss_world_model`], additionally returning the
    /// stop-gradient constants so the loss can be replayed.
    pub fn loss_with_record<R: Rng + ?Sized>(
        &mut self,
        batch: &SequenceBatch<T>,
        rng: &mut R,
    ) -> Result<(WorldModelLoss, StraightThroughRecord<T>)> {
        let (loss, tape, record) = self.forward_loss(batch, Noise::Live(rng))?;
        self.backward_loss(batch, &tape)?;
        Ok((loss, record))
    }

    /// Loss value with all stop-gradient constants taken from `record`; no
    /// gradients are produced.
    pub fn replay_loss(&self, batch: &SequenceBatch<T>, record: &StraightThroughRecord<T>) -> Result<WorldModelLoss> {
        let (loss, _, _) = self.forward_loss::<rand_chacha::ChaCha8Rng>(batch, Noise::Replay(record))?;
        Ok(loss)
    }

    fn backward_loss(&mut self, batch: &SequenceBatch<T>, tape: &LossTape<T>) -> Result<()> {
        let h_len = tape.steps.len();
        let n = self.codebook.size();
        let bsz = batch.batch_size();
        let inv_b = T::one() / T::from_usize_lossy(bsz);
        let code_w = self.fsq.code_width();
        let feat_w = self.embedding.feature_dim();
        let code_table = Embedding::new(EncodingVariant::Codes, &self.codebook);
        let tau = self.cfg.gumbel_temperature;
        let codes_variant = self.embedding.variant == EncodingVariant::Codes;

        // gradients w.r.t. ĉ_{h+1} symbols and reward features
        let mut d_sym_next: Option<Matrix<T>> = None;
        let mut d_feat_next: Option<Matrix<T>> = None;
        let mut d_sym0 = Matrix::zeros(bsz, code_w);
        for h in (0..h_len).rev() {
            let step = &tape.steps[h];
            let w = T::lit(self.cfg.discount.powi(h as i32));

            let mut d_r = step.reward_err.clone();
            d_r.scale(T::lit(2.0) * w * inv_b);
            let d_rew_in = self.reward.backward(&step.rew_tape, &d_r)?;
            let (d_feat, _) = d_rew_in.hsplit(feat_w);

            let mut d_logits = step.probs.clone();
            let d = self.fsq.latent_dim;
            for (k, &t) in tape.targets[h].iter().enumerate() {
                d_logits[(k / d, (k % d) * n + t)] -= T::one();
            }
            d_logits.scale(w * inv_b);

            if let (Some(ds), Some(df)) = (&d_sym_next, &d_feat_next) {
                let mut d_y = code_table.embed_probs_backward(ds)?;
                d_y.add_assign(&self.embedding.embed_probs_backward(df)?);
                d_logits.add_assign(&gumbel_st_backward(&step.soft, &d_y, n, tau));
            }

            let d_dyn_in = self.dynamics.backward(&step.dyn_tape, &d_logits)?;
            let (d_sym, _) = d_dyn_in.hsplit(code_w);
            if h == 0 {
                d_sym0 = d_sym;
                if codes_variant {
                    d_sym0.add_assign(&d_feat);
                }
            } else {
                d_sym_next = Some(d_sym);
                d_feat_next = Some(d_feat);
            }
        }
        let d_x0 = quantize_backward(&tape.x0, &d_sym0);
        self.encoder.backward(&tape.enc_tape, &d_x0)?;
        Ok(())
    }

    /// One optimizer step on the joint loss; the encoder uses its own rate.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &SequenceBatch<T>, rng: &mut R) -> Result<WorldModelLoss> {
        self.zero_grad();
        let loss = self.loss_world_model(batch, rng)?;
        AdamW::with_lr(self.cfg.encoder_lr).step(self.encoder.blocks_slice_mut().iter_mut())?;
        let opt = AdamW::with_lr(self.cfg.lr);
        opt.step(
            self.dynamics
                .blocks_slice_mut()
                .iter_mut()
                .chain(self.reward.blocks_slice_mut().iter_mut()),
        )?;
        Ok(loss)
    }
}

impl<T: Scalar> Parameterized<T> for WorldModel<T> {
    fn blocks(&self) -> Vec<&ParamBlock<T>> {
        self.encoder
            .blocks_ref()
            .iter()
            .chain(self.dynamics.blocks_ref())
            .chain(self.reward.blocks_ref())
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock<T>> {
        self.encoder
            .blocks_slice_mut()
            .iter_mut()
            .chain(self.dynamics.blocks_slice_mut().iter_mut())
            .chain(self.reward.blocks_slice_mut().iter_mut())
            .collect()
    }

    fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.dynamics.zero_grad();
        self.reward.zero_grad();
    }
}
