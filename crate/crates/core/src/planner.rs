//! Sampling-based trajectory optimisation (MPPI) over latent code
//! distributions, with policy-prior proposals and a critic bootstrap.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agent::{ActionBounds, Agent};
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Matrix};
use crate::quantizer::{one_hot_encode, Embedding, EncodingVariant};
use crate::scalar::Scalar;
use crate::worldmodel::WorldModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MppiConfig {
    pub horizon: usize,
    pub iterations: usize,
    pub population: usize,
    pub prior_population: usize,
    pub elites: usize,
    pub min_std: f64,
    pub max_std: f64,
    pub temperature: f64,
    pub discount: f64,
    /// Std of the Gaussian perturbation on policy-prior actions; the first
    /// prior trajectory is left unperturbed.
    pub prior_noise: f64,
    /// Carry the shifted std over to the next step instead of resetting it.
    pub warm_start_std: bool,
    /// Pick the best elite instead of sampling from the elite softmax.
    pub argmax_select: bool,
}

impl Default for MppiConfig {
    fn default() -> Self {
        MppiConfig {
            horizon: 3,
            iterations: 6,
            population: 512,
            prior_population: 24,
            elites: 64,
            min_std: 0.05,
            max_std: 2.0,
            temperature: 0.5,
            discount: 0.99,
            prior_noise: 0.2,
            warm_start_std: false,
            argmax_select: false,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.elites == 0 {
            return Err(Error::Config("mppi.iterations and mppi.elites must be positive".into()));
        }
        if self.elites > self.population + self.prior_population {
            return Err(Error::Config(format!(
                "mppi.elites ({}) exceeds population + prior_population ({})",
                self.elites,
                self.population + self.prior_population
            )));
        }
        if !(self.min_std > 0.0 && self.min_std <= self.max_std) {
            return Err(Error::Config(format!(
                "need 0 < mppi.min_std ({}) <= mppi.max_std ({})",
                self.min_std, self.max_std
            )));
        }
        if !(self.temperature > 0.0) || !(self.discount > 0.0 && self.discount <= 1.0) || self.prior_noise < 0.0 {
            return Err(Error::Config("mppi.temperature > 0, 0 < mppi.discount <= 1, mppi.prior_noise >= 0".into()));
        }
        Ok(())
    }
}

/// Latent-space model used to score action sequences. State rows are
/// candidate trajectories.
pub trait PlanningModel<T: Scalar> {
    /// Reward of taking `actions` in `state`, `rows x 1`.
    fn reward(&self, state: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>>;

    fn next(&self, state: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>>;

    /// Terminal bootstrap value, `rows x 1`.
    fn value(&self, state: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>>;

    /// Policy-prior actions, if the model has a policy.
    fn policy(&self, _state: &Matrix<T>) -> Result<Option<Matrix<T>>> {
        Ok(None)
    }
}

/// Learned world model plus agent. State rows are per-dimension code
/// distributions (`d*|C|` wide) propagated as expectations.
pub struct LearnedModel<'a, T> {
    pub world: &'a WorldModel<T>,
    pub agent: &'a Agent<T>,
    symbols: Embedding<T>,
}

impl<'a, T: Scalar> LearnedModel<'a, T> {
    pub fn new(world: &'a WorldModel<T>, agent: &'a Agent<T>) -> Self {
        LearnedModel {
            world,
            agent,
            symbols: Embedding::new(EncodingVariant::Codes, &world.codebook),
        }
    }

    /// One-hot distribution of the encoded observation.
    pub fn start_state(&self, obs: &Matrix<T>) -> Result<Matrix<T>> {
        let code = self.world.encode(obs)?;
        Ok(one_hot_encode(&code, &self.world.codebook))
    }

    fn features(&self, state: &Matrix<T>) -> Result<Matrix<T>> {
        self.agent.embedding.embed_probs(state)
    }
}

impl<T: Scalar> PlanningModel<T> for LearnedModel<'_, T> {
    fn reward(&self, state: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>> {
        self.world.reward_from_features(&self.world.embedding.embed_probs(state)?, actions)
    }

    fn next(&self, state: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>> {
        let symbols = self.symbols.embed_probs(state)?;
        Ok(self.world.dynamics_forward(&symbols, actions)?.probs)
    }

    fn value(&self, state: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>> {
        self.agent.q_mean(&self.features(state)?, actions)
    }

    fn policy(&self, state: &Matrix<T>) -> Result<Option<Matrix<T>>> {
        Ok(Some(self.agent.act(&self.features(state)?)?))
    }
}

/// Hand-specified single-dimension model over `|C|` codes with a scalar
/// action discretised into evenly spaced bins on `[-1, 1]`. Rewards and
/// values are linear in the code distribution.
#[derive(Clone, Debug)]
pub struct TabularModel<T> {
    /// Per action bin, a row-stochastic `|C| x |C|` matrix.
    pub transitions: Vec<Matrix<T>>,
    /// `|C| x bins`
    pub rewards: Matrix<T>,
    /// `|C| x bins`
    pub values: Matrix<T>,
}

impl<T: Scalar> TabularModel<T> {
    pub fn bins(&self) -> usize {
        self.transitions.len()
    }

    /// Centre of bin `k`.
    pub fn bin_action(&self, k: usize) -> f64 {
        let n = self.bins();
        if n == 1 {
            0.0
        } else {
            -1.0 + 2.0 * k as f64 / (n - 1) as f64
        }
    }

    pub fn bin_of(&self, action: T) -> usize {
        let n = self.bins();
        let pos = (action.as_f64().clamp(-1.0, 1.0) + 1.0) / 2.0 * (n - 1) as f64;
        (pos.round() as usize).min(n - 1)
    }

    fn linear(&self, table: &Matrix<T>, state: &Matrix<T>, actions: &Matrix<T>) -> Matrix<T> {
        Matrix::from_fn(state.rows(), 1, |i, _| {
            let k = self.bin_of(actions.row(i)[0]);
            state.row(i).iter().enumerate().map(|(c, &p)| p * table[(c, k)]).sum()
        })
    }
}

impl<T: Scalar> PlanningModel<T> for TabularModel<T> {
    fn reward(&self, state: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.linear(&self.rewards, state, actions))
    }

    fn next(&self, state: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>> {
        let n = self.rewards.rows();
        let mut out = Matrix::zeros(state.rows(), n);
        for i in 0..state.rows() {
            let p = &self.transitions[self.bin_of(actions.row(i)[0])];
            let row = Matrix::from_vec(1, n, state.row(i).to_vec())?.matmul(p)?;
            out.row_mut(i).copy_from_slice(row.as_slice());
        }
        Ok(out)
    }

    fn value(&self, state: &Matrix<T>, actions: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.linear(&self.values, state, actions))
    }
}

/// Gaussian over action sequences `a_0 … a_H`, one row per step.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanState<T> {
    pub mean: Matrix<T>,
    pub std: Matrix<T>,
}

impl<T: Scalar> PlanState<T> {
    pub fn initial(cfg: &MppiConfig, act_dim: usize) -> Self {
        PlanState {
            mean: Matrix::zeros(cfg.horizon + 1, act_dim),
            std: Matrix::filled(cfg.horizon + 1, act_dim, T::lit(cfg.max_std)),
        }
    }

    /// Shifts the mean one step earlier and zeroes the last step; the std is
    /// reset to `max_std` unless `warm_start_std` is set.
    pub fn warm_start(&self, cfg: &MppiConfig) -> Self {
        let (rows, cols) = self.mean.shape();
        let shift = |m: &Matrix<T>, fill: T| Matrix::from_fn(rows, cols, |r, c| if r + 1 < rows { m[(r + 1, c)] } else { fill });
        let max = T::lit(cfg.max_std);
        PlanState {
            mean: shift(&self.mean, T::zero()),
            std: if cfg.warm_start_std { shift(&self.std, max) } else { Matrix::filled(rows, cols, max) },
        }
    }
}

/// One scored candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryScore<T> {
    /// `(H+1) x act_dim`
    pub actions: Matrix<T>,
    pub phi: f64,
    /// `exp(τ (Φ - Φ_max))` among the elites.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    /// Environment step the planning call belonged to.
    pub step: usize,
    pub iteration: usize,
    pub best_phi: f64,
    pub mean_phi: f64,
    pub mu0: Vec<f64>,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let width = rows.first().map_or(0, |r| r.mu0.len());
    let mut header = vec!["step".to_string(), "iteration".into(), "best_phi".into(), "mean_phi".into()];
    header.extend((0..width).map(|j| format!("mu0_{j}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.iteration.to_string(), r.best_phi.to_string(), r.mean_phi.to_string()];
        rec.extend(r.mu0.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PlanOutput<T> {
    pub action: Vec<T>,
    /// Refitted distribution after the final iteration.
    pub solution: PlanState<T>,
    /// Elites of the final iteration, best first.
    pub elites: Vec<TrajectoryScore<T>>,
    pub trace: Vec<TraceRow>,
}

impl<T: Scalar> PlanOutput<T> {
    /// Initial distribution for the next environment step.
    pub fn next_state(&self, cfg: &MppiConfig) -> PlanState<T> {
        self.solution.warm_start(cfg)
    }
}

/// Discounted model return of each candidate plus a discounted terminal
/// value. `actions[h]` holds step `h` of every candidate (`H+1` entries).
/// Non-finite returns are reported as `-inf`.
pub fn evaluate_trajectories<T: Scalar, M: PlanningModel<T> + ?Sized>(
    model: &M,
    start: &Matrix<T>,
    actions: &[Matrix<T>],
    discount: f64,
) -> Result<Vec<f64>> {
    let Some(last) = actions.last() else {
        return Err(Error::Input("trajectory needs at least one action step".into()));
    };
    if start.rows() != 1 {
        return Err(Error::dim("planning start state rows", 1, start.rows()));
    }
    let n = last.rows();
    let mut state = start.select_rows(&vec![0; n]);
    let mut phi = vec![0.0; n];
    let mut disc = 1.0;
    for a in &actions[..actions.len() - 1] {
        let r = model.reward(&state, a)?;
        for (p, v) in phi.iter_mut().zip(r.as_slice()) {
            *p += disc * v.as_f64();
        }
        state = model.next(&state, a)?;
        disc *= discount;
    }
    let v = model.value(&state, last)?;
    for (p, q) in phi.iter_mut().zip(v.as_slice()) {
        *p += disc * q.as_f64();
        if !p.is_finite() {
            *p = f64::NEG_INFINITY;
        }
    }
    Ok(phi)
}

/// Importance-weighted mean and std of the elites, std clamped.
pub fn refit<T: Scalar>(elites: &mut [TrajectoryScore<T>], temperature: f64, min_std: f64, max_std: f64) -> Result<PlanState<T>> {
    let Some(first) = elites.first() else {
        return Err(Error::Input("refit needs at least one elite".into()));
    };
    let (rows, cols) = first.actions.shape();
    let phi_max = elites.iter().map(|e| e.phi).fold(f64::NEG_INFINITY, f64::max);
    for e in elites.iter_mut() {
        e.weight = (temperature * (e.phi - phi_max)).exp();
    }
    let total: f64 = elites.iter().map(|e| e.weight).sum();
    let mut mean = vec![0.0; rows * cols];
    for e in elites.iter() {
        for (m, a) in mean.iter_mut().zip(e.actions.as_slice()) {
            *m += e.weight * a.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut var = vec![0.0; rows * cols];
    for e in elites.iter() {
        for ((v, a), m) in var.iter_mut().zip(e.actions.as_slice()).zip(&mean) {
            *v += e.weight * (a.as_f64() - m).powi(2);
        }
    }
    Ok(PlanState {
        mean: Matrix::from_vec(rows, cols, mean.into_iter().map(T::lit).collect())?,
        std: Matrix::from_vec(rows, cols, var.into_iter().map(|v| T::lit((v / total).sqrt().clamp(min_std, max_std))).collect())?,
    })
}

fn policy_prior<T: Scalar, M: PlanningModel<T> + ?Sized, R: Rng + ?Sized>(
    cfg: &MppiConfig,
    model: &M,
    start: &Matrix<T>,
    bounds: &ActionBounds<T>,
    rng: &mut R,
) -> Result<Option<Vec<Matrix<T>>>> {
    if cfg.prior_population == 0 {
        return Ok(None);
    }
    let mut state = start.select_rows(&vec![0; cfg.prior_population]);
    let mut steps = Vec::with_capacity(cfg.horizon + 1);
    for h in 0..=cfg.horizon {
        let Some(mut a) = model.policy(&state)? else {
            return Ok(None);
        };
        for (i, v) in a.as_mut_slice().iter_mut().enumerate() {
            if i >= bounds.dim() {
                let eps: f64 = StandardNormal.sample(rng);
                *v += T::lit(cfg.prior_noise * eps);
            }
        }
        bounds.clip(&mut a);
        if h < cfg.horizon {
            state = model.next(&state, &a)?;
        }
        steps.push(a);
    }
    Ok(Some(steps))
}

fn gather<T: Scalar>(steps: &[Matrix<T>], i: usize) -> Matrix<T> {
    let cols = steps[0].cols();
    Matrix::from_fn(steps.len(), cols, |h, j| steps[h][(i, j)])
}

/// Runs `J` refinement iterations from `prev` and returns the selected first
/// action. With `noise_std > 0` Gaussian exploration noise is added before
/// clipping.
pub fn plan<T, M, R>(
    cfg: &MppiConfig,
    model: &M,
    start: &Matrix<T>,
    prev: &PlanState<T>,
    bounds: &ActionBounds<T>,
    noise_std: f64,
    rng: &mut R,
) -> Result<PlanOutput<T>>
where
    T: Scalar,
    M: PlanningModel<T> + ?Sized,
    R: Rng + ?Sized,
{
    let steps = cfg.horizon + 1;
    let a_dim = bounds.dim();
    if prev.mean.shape() != (steps, a_dim) || prev.std.shape() != (steps, a_dim) {
        return Err(Error::dim(
            "plan state",
            format!("{steps}x{a_dim}"),
            format!("{:?}", prev.mean.shape()),
        ));
    }
    let prior = policy_prior(cfg, model, start, bounds, rng)?;
    let mut dist = prev.clone();
    let mut best: Option<Matrix<T>> = None;
    let mut elites = Vec::new();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let n_prior = prior.as_ref().map_or(0, |p| p[0].rows());
        let n = cfg.population + n_prior + usize::from(best.is_some());
        let mut cand: Vec<Matrix<T>> = (0..steps).map(|_| Matrix::zeros(n, a_dim)).collect();
        for (h, step) in cand.iter_mut().enumerate() {
            for i in 0..cfg.population {
                for j in 0..a_dim {
                    let eps: f64 = StandardNormal.sample(rng);
                    step.row_mut(i)[j] = dist.mean[(h, j)] + dist.std[(h, j)] * T::lit(eps);
                }
            }
            if let Some(p) = &prior {
                for i in 0..n_prior {
                    step.row_mut(cfg.population + i).copy_from_slice(p[h].row(i));
                }
            }
            if let Some(b) = &best {
                step.row_mut(n - 1).copy_from_slice(b.row(h));
            }
            bounds.clip(step);
        }
        let phi = evaluate_trajectories(model, start, &cand, cfg.discount)?;
        let mut order: Vec<usize> = (0..n).filter(|&i| phi[i] > f64::NEG_INFINITY).collect();
        if order.is_empty() {
            return Err(Error::NonFinite("every planner trajectory score".into()));
        }
        order.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]).then(a.cmp(&b)));
        order.truncate(cfg.elites);
        elites = order
            .iter()
            .map(|&i| TrajectoryScore {
                actions: gather(&cand, i),
                phi: phi[i],
                weight: 0.0,
            })
            .collect();
        dist = refit(&mut elites, cfg.temperature, cfg.min_std, cfg.max_std)?;
        best = Some(elites[0].actions.clone());
        let finite: Vec<f64> = phi.iter().copied().filter(|p| p.is_finite()).collect();
        trace.push(TraceRow {
            step: 0,
            iteration,
            best_phi: elites[0].phi,
            mean_phi: finite.iter().sum::<f64>() / finite.len() as f64,
            mu0: dist.mean.row(0).iter().map(|v| v.as_f64()).collect(),
        });
    }
    let chosen = if cfg.argmax_select {
        0
    } else {
        let mut p: Vec<f64> = elites.iter().map(|e| e.phi).collect();
        softmax_in_place(&mut p);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = p.len() - 1;
        for (i, w) in p.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        k
    };
    let mut action = Matrix::from_vec(1, a_dim, elites[chosen].actions.row(0).to_vec())?;
    if noise_std > 0.0 {
        for v in action.as_mut_slice() {
            let eps: f64 = StandardNormal.sample(rng);
            *v += T::lit(noise_std * eps);
        }
    }
    bounds.clip(&mut action);
    Ok(PlanOutput {
        action: action.into_vec(),
        solution: dist,
        elites,
        trace,
    })
}
