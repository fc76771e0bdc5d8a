//! Hierarchical offline RL on top of the learned representations: expectile
//! value learning, advantage-weighted high- and low-level policies, the
//! behavior-cloning hierarchy, and the co-training loop that mixes the
//! hierarchy's losses with the contrastive encoder objective.
//!
//! Gradient flow is deliberately one-way by default: the encoder learns from
//! the contrastive term only, and every value/policy use of an embedding is
//! stop-grad. `flow_through` reverses that for experiments.

use crate::carl::{self, CarlConfig, CarlModel, EmbedCache};
use crate::data::{argmax, Dataset, SamplerConfig, Segment, SegmentSampler};
use crate::env::{Action, EnvDescriptor};
use crate::error::{Error, Result};
use crate::nn::{adam_step, load_mlp, save_mlp, AdamState, Grad, Matrix, Mlp};
use crate::util::{derive_seed, rng_from, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// AWR exponential-weight ceiling.
pub const AWR_CLIP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Expectile value + advantage-weighted policies.
    Hiql,
    /// Behavior-cloning hierarchy: no value network, unit weights.
    Hgcbc,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Hiql => "hiql",
            Algorithm::Hgcbc => "hgcbc",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Algorithm> {
        match s {
            "hiql" => Ok(Algorithm::Hiql),
            "hgcbc" => Ok(Algorithm::Hgcbc),
            _ => Err(Error::invalid(format!("unknown algorithm `{s}` (expected hiql or hgcbc)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Encoder trained jointly via the auxiliary contrastive term.
    Cotrain,
    /// Frozen encoder loaded from a checkpoint.
    Pretrain,
    /// No encoder; raw concat(s, g) stands in for the embedding.
    None,
}

impl EncoderMode {
    pub fn name(self) -> &'static str {
        match self {
            EncoderMode::Cotrain => "cotrain",
            EncoderMode::Pretrain => "pretrain",
            EncoderMode::None => "none",
        }
    }
}

impl std::str::FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<EncoderMode> {
        match s {
            "cotrain" => Ok(EncoderMode::Cotrain),
            "pretrain" => Ok(EncoderMode::Pretrain),
            "none" => Ok(EncoderMode::None),
            _ => Err(Error::invalid(format!(
                "unknown encoder mode `{s}` (expected cotrain, pretrain, none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoTrainConfig {
    pub algorithm: Algorithm,
    pub mode: EncoderMode,
    /// Mixing weight: total = (1 − λ)(value + high + low) + λ·contrastive.
    pub lambda_aux: f64,
    pub gamma: f64,
    /// Expectile for value regression.
    pub kappa: f64,
    /// AWR temperature.
    pub beta: f64,
    /// Encoder shape and horizon; `carl.k` doubles as the subgoal step.
    pub carl: CarlConfig,
    pub value_hidden: Vec<usize>,
    /// Hidden widths of the subgoal-proposing policy.
    pub high_hidden: Vec<usize>,
    /// Hidden widths of the action policy; empty = a linear readout, which
    /// keeps it from keying on absolute coordinates.
    pub low_hidden: Vec<usize>,
    pub batch_size: usize,
    /// Agent learning rate; the encoder uses `carl.lr`.
    pub lr: f64,
    /// Let value/policy gradients reach the encoder (cotrain only).
    pub flow_through: bool,
    #[serde(default)]
    pub pretrain_checkpoint: Option<PathBuf>,
}

impl Default for CoTrainConfig {
    fn default() -> Self {
        CoTrainConfig {
            algorithm: Algorithm::Hiql,
            mode: EncoderMode::Cotrain,
            lambda_aux: 0.3,
            gamma: 0.99,
            kappa: 0.7,
            beta: 3.0,
            carl: CarlConfig::default(),
            value_hidden: vec![64, 64],
            high_hidden: vec![64, 64],
            low_hidden: Vec::new(),
            batch_size: 256,
            lr: crate::nn::DEFAULT_LR,
            flow_through: false,
            pretrain_checkpoint: None,
        }
    }
}

impl CoTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_aux) {
            return Err(Error::invalid(format!(
                "lambda_aux must lie in [0, 1], got {}",
                self.lambda_aux
            )));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::invalid(format!("kappa must lie in (0, 1), got {}", self.kappa)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate must be nonnegative, got {}", self.lr)));
        }
        self.carl.validate()?;
        if self.flow_through && self.mode != EncoderMode::Cotrain {
            return Err(Error::invalid("flow_through only makes sense in cotrain mode"));
        }
        Ok(())
    }
}

/// Value network, two policy levels, and the (optional) shared encoder.
#[derive(Debug)]
pub struct HrlAgent {
    /// Expectile value V(s, z); absent for the behavior-cloning hierarchy.
    pub value: Option<Mlp>,
    /// π^h: concat(s, g) → subgoal embedding mean.
    pub high: Mlp,
    /// π^ℓ: concat(s, z) → action logits.
    pub low: Mlp,
    pub encoder: Option<CarlModel>,
    /// Embedding width: encoder `d`, or 2·state_dim without one.
    pub z_dim: usize,
    pub state_dim: usize,
    pub num_actions: usize,
}

/// Sparse goal reward: 0 and done on exact feature match, −1 otherwise.
pub fn goal_reward(s: &[f32], g: &[f32]) -> (f64, bool) {
    if s == g {
        (0.0, true)
    } else {
        (-1.0, false)
    }
}

/// Clipped exponential advantage weight.
pub fn awr_weight(advantage: f64, beta: f64) -> f64 {
    (advantage / beta).exp().min(AWR_CLIP)
}

/// |κ − 1{u < 0}|: κ on nonnegative residuals, 1 − κ on negative ones.
pub fn expectile_weight(u: f64, kappa: f64) -> f64 {
    if u < 0.0 {
        1.0 - kappa
    } else {
        kappa
    }
}

/// Networks consume one-hot gridworld actions; anything else has no
/// categorical low level.
fn check_dataset(ds: &Dataset) -> Result<()> {
    match ds.manifest.env {
        EnvDescriptor::Rooms { .. } => {}
        _ => {
            return Err(Error::unsupported(
                "hierarchical training needs a gridworld dataset with one-hot actions",
            ))
        }
    }
    if ds.action_dim != Action::COUNT {
        return Err(Error::contract(format!(
            "gridworld dataset should have {} action dims, found {}",
            Action::COUNT,
            ds.action_dim
        )));
    }
    Ok(())
}

/// Builds the agent for a dataset. Network initializations draw from streams
/// derived off `seed`: encoder 1, value 10, high policy 11, low policy 12 —
/// so the presence or absence of one network never shifts another.
pub fn init_agent(cfg: &CoTrainConfig, ds: &Dataset, seed: u64) -> Result<HrlAgent> {
    cfg.validate()?;
    check_dataset(ds)?;
    let encoder = match cfg.mode {
        EncoderMode::Cotrain => {
            Some(carl::init_carl(&cfg.carl, ds.state_dim, ds.action_dim, derive_seed(seed, 1))?)
        }
        EncoderMode::Pretrain => {
            let path = cfg
                .pretrain_checkpoint
                .as_ref()
                .ok_or_else(|| Error::config("pretrain mode needs an encoder checkpoint path"))?;
            Some(carl::load_carl(path)?)
        }
        EncoderMode::None => None,
    };
    build_agent(cfg, ds, seed, encoder)
}

/// Network construction once the encoder question is settled. Checks that a
/// supplied encoder matches the dataset before sizing anything off it.
fn build_agent(
    cfg: &CoTrainConfig,
    ds: &Dataset,
    seed: u64,
    encoder: Option<CarlModel>,
) -> Result<HrlAgent> {
    let sd = ds.state_dim;
    if let Some(model) = &encoder {
        if model.state_dim != sd || model.action_dim != ds.action_dim {
            return Err(Error::config(format!(
                "encoder was trained on {}-dim states / {}-dim actions, dataset has {} / {}",
                model.state_dim, model.action_dim, sd, ds.action_dim
            )));
        }
        if model.k != cfg.carl.k {
            return Err(Error::config(format!(
                "encoder horizon k = {} disagrees with configured k = {}",
                model.k, cfg.carl.k
            )));
        }
    }
    let z_dim = encoder.as_ref().map_or(2 * sd, |m| m.d);
    let value = if cfg.algorithm == Algorithm::Hiql {
        let mut widths = vec![sd + z_dim];
        widths.extend(&cfg.value_hidden);
        widths.push(1);
        Some(Mlp::init(&widths, &mut rng_from(derive_seed(seed, 10)))?)
    } else {
        None
    };
    let mut widths = vec![2 * sd];
    widths.extend(&cfg.high_hidden);
    widths.push(z_dim);
    let high = Mlp::init(&widths, &mut rng_from(derive_seed(seed, 11)))?;
    let mut widths = vec![sd + z_dim];
    widths.extend(&cfg.low_hidden);
    widths.push(ds.action_dim);
    let low = Mlp::init(&widths, &mut rng_from(derive_seed(seed, 12)))?;
    Ok(HrlAgent { value, high, low, encoder, z_dim, state_dim: sd, num_actions: ds.action_dim })
}

pub struct ValueLossOut {
    pub loss: f64,
    pub grad: Grad,
    /// d loss / d inputs, for gradient flow into the embedding columns.
    pub input_grad: Matrix,
    /// Online predictions V(s, z), reusable as stop-grad values.
    pub preds: Vec<f64>,
}

/// Expectile regression of V against fixed targets: mean |κ − 1{u<0}|·u²
/// with u = target − V(input). Targets are constants (stop-grad).
pub fn expectile_value_loss(
    value: &Mlp,
    inputs: &Matrix,
    targets: &[f64],
    kappa: f64,
) -> Result<ValueLossOut> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::invalid(format!("kappa must lie in (0, 1), got {kappa}")));
    }
    if value.out_dim() != 1 {
        return Err(Error::contract("value network must have a scalar output"));
    }
    let b = inputs.rows();
    if targets.len() != b || b == 0 {
        return Err(Error::contract("targets must match the batch size"));
    }
    let (out, cache) = value.forward(inputs)?;
    let preds: Vec<f64> = (0..b).map(|i| out.get(i, 0) as f64).collect();
    let mut loss = 0.0f64;
    let mut out_grad = Matrix::zeros(b, 1);
    for i in 0..b {
        let u = targets[i] - preds[i];
        let w = expectile_weight(u, kappa);
        loss += w * u * u;
        out_grad.set(i, 0, (-2.0 * w * u / b as f64) as f32);
    }
    loss /= b as f64;
    let (grad, input_grad) = value.backward(&cache, &out_grad)?;
    Ok(ValueLossOut { loss, grad, input_grad, preds })
}

pub struct MseLossOut {
    pub loss: f64,
    pub grad: Grad,
    /// d loss / d targets, for gradient flow into z*.
    pub target_grad: Matrix,
}

/// Per-sample-weighted MSE of the network output against fixed targets,
/// averaged over batch and output dims.
pub fn weighted_mse_loss(
    net: &Mlp,
    inputs: &Matrix,
    targets: &Matrix,
    weights: &[f64],
) -> Result<MseLossOut> {
    let b = inputs.rows();
    if b == 0 || weights.len() != b || targets.rows() != b || targets.cols() != net.out_dim() {
        return Err(Error::contract("weighted MSE batch shapes disagree"));
    }
    let (out, cache) = net.forward(inputs)?;
    let denom = (b * out.cols()) as f64;
    let mut loss = 0.0f64;
    let mut out_grad = Matrix::zeros(b, out.cols());
    let mut target_grad = Matrix::zeros(b, out.cols());
    for i in 0..b {
        for c in 0..out.cols() {
            let diff = out.get(i, c) as f64 - targets.get(i, c) as f64;
            loss += weights[i] * diff * diff;
            let g = 2.0 * weights[i] * diff / denom;
            out_grad.set(i, c, g as f32);
            target_grad.set(i, c, -g as f32);
        }
    }
    loss /= denom;
    let (grad, _) = net.backward(&cache, &out_grad)?;
    Ok(MseLossOut { loss, grad, target_grad })
}

pub struct CeLossOut {
    pub loss: f64,
    pub grad: Grad,
    /// d loss / d inputs, for gradient flow into the embedding columns.
    pub input_grad: Matrix,
}

/// Per-sample-weighted categorical cross entropy of the network's logits
/// against class labels.
pub fn weighted_ce_loss(
    net: &Mlp,
    inputs: &Matrix,
    labels: &[usize],
    weights: &[f64],
) -> Result<CeLossOut> {
    let b = inputs.rows();
    if b == 0 || labels.len() != b || weights.len() != b {
        return Err(Error::contract("weighted CE batch shapes disagree"));
    }
    let classes = net.out_dim();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let (logits, cache) = net.forward(inputs)?;
    let mut loss = 0.0f64;
    let mut out_grad = Matrix::zeros(b, classes);
    for i in 0..b {
        let row: Vec<f64> = logits.row(i).iter().map(|&x| x as f64).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += weights[i] * (lse - row[labels[i]]);
        for c in 0..classes {
            let p = (row[c] - max).exp() / sum_exp;
            let delta = if c == labels[i] { 1.0 } else { 0.0 };
            out_grad.set(i, c, (weights[i] * (p - delta) / b as f64) as f32);
        }
    }
    loss /= b as f64;
    let (grad, input_grad) = net.backward(&cache, &out_grad)?;
    Ok(CeLossOut { loss, grad, input_grad })
}

/// One relabeled batch entry: a transition index plus its hindsight goal and
/// the interior offset used by the contrastive term.
#[derive(Debug, Clone)]
pub struct HrlSample {
    pub traj: usize,
    pub t: usize,
    /// Interior goal offset j ∈ {1..k} for the contrastive term.
    pub j: usize,
    pub goal: Vec<f32>,
}

/// Hindsight relabeling: 0.5 a geometric future state of the same
/// trajectory, 0.25 its final state, 0.25 a uniform random dataset state.
pub struct HrlBatchSampler<'a> {
    ds: &'a Dataset,
    k: usize,
    gamma: f64,
    batch_size: usize,
    rng: Rng,
    /// Flat (trajectory, state index) over every state in the dataset.
    flat_states: Vec<(u32, u32)>,
}

impl<'a> HrlBatchSampler<'a> {
    pub fn new(ds: &'a Dataset, cfg: &CoTrainConfig, seed: u64) -> Result<HrlBatchSampler<'a>> {
        cfg.validate()?;
        if ds.trajectories.iter().all(|t| t.is_empty()) {
            return Err(Error::invalid("dataset has no transitions"));
        }
        if cfg.carl.k >= ds.max_len() {
            return Err(Error::invalid(format!(
                "subgoal step k = {} must be smaller than the longest trajectory ({} steps)",
                cfg.carl.k,
                ds.max_len()
            )));
        }
        let mut flat_states = Vec::new();
        for (ti, tr) in ds.trajectories.iter().enumerate() {
            for si in 0..tr.states.len() {
                flat_states.push((ti as u32, si as u32));
            }
        }
        Ok(HrlBatchSampler {
            ds,
            k: cfg.carl.k,
            gamma: cfg.gamma,
            batch_size: cfg.batch_size,
            rng: rng_from(seed),
            flat_states,
        })
    }

    pub fn sample(&mut self) -> HrlSample {
        let traj = loop {
            let i = self.rng.gen_range(0..self.ds.trajectories.len());
            if !self.ds.trajectories[i].is_empty() {
                break i;
            }
        };
        let tr = &self.ds.trajectories[traj];
        let t = self.rng.gen_range(0..tr.len());
        let j = self.rng.gen_range(1..=self.k);
        let pick: f64 = self.rng.gen();
        let goal = if pick < 0.5 {
            let off = geometric_offset(&mut self.rng, self.gamma);
            tr.states[(t + off).min(tr.len())].clone()
        } else if pick < 0.75 {
            tr.states[tr.len()].clone()
        } else {
            let (ti, si) = self.flat_states[self.rng.gen_range(0..self.flat_states.len())];
            self.ds.trajectories[ti as usize].states[si as usize].clone()
        };
        HrlSample { traj, t, j, goal }
    }

    pub fn sample_batch(&mut self) -> Vec<HrlSample> {
        (0..self.batch_size).map(|_| self.sample()).collect()
    }
}

/// Offset ≥ 1 with P(off) ∝ γ^(off−1), i.e. geometric with success
/// probability 1 − γ, via inverse CDF.
fn geometric_offset(rng: &mut Rng, gamma: f64) -> usize {
    let u = 1.0 - rng.gen::<f64>();
    1 + (u.ln() / gamma.ln()).floor() as usize
}

/// Discounted reward sum over the window [t, t+delta) against `goal`, with
/// absorption: reaching the goal inside the window ends the return and kills
/// the bootstrap. Returns (sum, bootstrap factor γ^Δ or 0 if absorbed).
fn window_return(states: &[Vec<f32>], t: usize, delta: usize, goal: &[f32], gamma: f64) -> (f64, f64) {
    let mut sum = 0.0f64;
    let mut disc = 1.0f64;
    for i in 0..delta {
        let (r, done) = goal_reward(&states[t + i], goal);
        if done {
            return (sum, 0.0);
        }
        sum += disc * r;
        disc *= gamma;
    }
    (sum, disc)
}

/// Per-step loss components. Terms a mode or algorithm skips are 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrlLossRecord {
    pub step: usize,
    pub total: f64,
    pub value: f64,
    pub high: f64,
    pub low: f64,
    pub aux: f64,
}

/// Owns the optimizer state for every network the config trains.
pub struct HrlTrainer {
    pub agent: HrlAgent,
    cfg: CoTrainConfig,
    value_opt: Option<AdamState>,
    high_opt: AdamState,
    low_opt: AdamState,
    phi_opt: Option<AdamState>,
    psi_opt: Option<AdamState>,
    xi_opt: Option<AdamState>,
}

impl HrlTrainer {
    pub fn new(agent: HrlAgent, cfg: CoTrainConfig) -> Result<HrlTrainer> {
        cfg.validate()?;
        let value_opt = agent.value.as_ref().map(|v| AdamState::new(v.num_params(), cfg.lr));
        let high_opt = AdamState::new(agent.high.num_params(), cfg.lr);
        let low_opt = AdamState::new(agent.low.num_params(), cfg.lr);
        let (phi_opt, psi_opt, xi_opt) = if cfg.mode == EncoderMode::Cotrain {
            let enc = agent.encoder.as_ref().expect("cotrain agent has an encoder");
            (
                Some(AdamState::new(enc.phi.num_params(), cfg.carl.lr)),
                enc.psi.as_ref().map(|n| AdamState::new(n.num_params(), cfg.carl.lr)),
                enc.xi.as_ref().map(|n| AdamState::new(n.num_params(), cfg.carl.lr)),
            )
        } else {
            (None, None, None)
        };
        Ok(HrlTrainer { agent, cfg, value_opt, high_opt, low_opt, phi_opt, psi_opt, xi_opt })
    }

    pub fn into_agent(self) -> HrlAgent {
        self.agent
    }

    pub fn config(&self) -> &CoTrainConfig {
        &self.cfg
    }

    fn encode(&self, pairs: &Matrix, with_grad: bool) -> Result<(Matrix, Option<EmbedCache>)> {
        match &self.agent.encoder {
            Some(m) if with_grad => {
                let (z, cache) = m.embed_pairs_with_cache(pairs)?;
                Ok((z, Some(cache)))
            }
            Some(m) => Ok((m.embed_pairs(pairs)?, None)),
            None => Ok((pairs.clone(), None)),
        }
    }

    /// One optimization step over a relabeled batch; the `cotrain_step` of
    /// the training loop. Updates every network its mode trains and returns
    /// the loss breakdown.
    pub fn step(&mut self, ds: &Dataset, batch: &[HrlSample], step: usize) -> Result<HrlLossRecord> {
        if batch.is_empty() {
            return Err(Error::invalid("batch must contain at least one sample"));
        }
        let b = batch.len();
        let sd = self.agent.state_dim;
        let lambda = self.cfg.lambda_aux;
        let agent_w = 1.0 - lambda;
        let gamma = self.cfg.gamma;
        let hiql = self.cfg.algorithm == Algorithm::Hiql;
        let aux_active = lambda > 0.0 && self.cfg.mode == EncoderMode::Cotrain;
        let flow = self.cfg.flow_through && self.cfg.mode == EncoderMode::Cotrain && agent_w > 0.0;

        // Assemble every view of the batch up front.
        let mut s_t = Matrix::zeros(b, sd);
        let mut s_t1 = Matrix::zeros(b, sd);
        let mut s_td = Matrix::zeros(b, sd);
        let mut p_goal_t = Matrix::zeros(b, 2 * sd);
        let mut p_goal_t1 = Matrix::zeros(b, 2 * sd);
        let mut p_goal_td = Matrix::zeros(b, 2 * sd);
        let mut p_sub_t = Matrix::zeros(b, 2 * sd);
        let mut p_sub_t1 = Matrix::zeros(b, 2 * sd);
        let mut labels = vec![0usize; b];
        let mut returns = vec![(0.0f64, 0.0f64); b];
        for (i, smp) in batch.iter().enumerate() {
            let tr = ds
                .trajectories
                .get(smp.traj)
                .ok_or_else(|| Error::contract("sample trajectory out of range"))?;
            if smp.t >= tr.len() || smp.goal.len() != sd {
                return Err(Error::contract("sample index or goal dim out of range"));
            }
            let delta = self.cfg.carl.k.min(tr.len() - smp.t);
            let sub = &tr.states[smp.t + delta];
            s_t.row_mut(i).copy_from_slice(&tr.states[smp.t]);
            s_t1.row_mut(i).copy_from_slice(&tr.states[smp.t + 1]);
            s_td.row_mut(i).copy_from_slice(sub);
            let fill = |m: &mut Matrix, left: &[f32], right: &[f32]| {
                m.row_mut(i)[..sd].copy_from_slice(left);
                m.row_mut(i)[sd..].copy_from_slice(right);
            };
            fill(&mut p_goal_t, &tr.states[smp.t], &smp.goal);
            fill(&mut p_goal_t1, &tr.states[smp.t + 1], &smp.goal);
            fill(&mut p_goal_td, sub, &smp.goal);
            fill(&mut p_sub_t, &tr.states[smp.t], sub);
            fill(&mut p_sub_t1, &tr.states[smp.t + 1], sub);
            labels[i] = argmax(&tr.actions[smp.t]);
            returns[i] = window_return(&tr.states, smp.t, delta, &smp.goal, gamma);
        }

        let mut record = HrlLossRecord { step, total: 0.0, value: 0.0, high: 0.0, low: 0.0, aux: 0.0 };
        let mut phi_flow_grad: Option<Grad> = None;

        if agent_w > 0.0 {
            let (z_sub, cache_sub) = self.encode(&p_sub_t, flow)?;
            let mut z_sub_grad = Matrix::zeros(b, self.agent.z_dim);

            // Value regression and both advantages (HIQL only).
            let mut w_high = vec![1.0f64; b];
            let mut w_low = vec![1.0f64; b];
            if hiql {
                let value = self.agent.value.as_ref().expect("hiql agent has a value net");
                let (z_goal_t, cache_goal_t) = self.encode(&p_goal_t, flow)?;
                let (z_goal_t1, _) = self.encode(&p_goal_t1, false)?;
                let x_t = hcat(&s_t, &z_goal_t);
                let v_next = column(&value.forward_only(&hcat(&s_t1, &z_goal_t1))?);
                let targets: Vec<f64> = (0..b)
                    .map(|i| {
                        let (r, done) = goal_reward(s_t.row(i), &batch[i].goal);
                        r + gamma * if done { 0.0 } else { v_next[i] }
                    })
                    .collect();
                let vout = expectile_value_loss(value, &x_t, &targets, self.cfg.kappa)?;
                record.value = vout.loss;

                // High-level advantage: window return + discounted bootstrap
                // at the window end, minus the current value.
                let (z_goal_td, _) = self.encode(&p_goal_td, false)?;
                let v_td = column(&value.forward_only(&hcat(&s_td, &z_goal_td))?);
                for i in 0..b {
                    let (sum, factor) = returns[i];
                    w_high[i] = awr_weight(sum + factor * v_td[i] - vout.preds[i], self.cfg.beta);
                }

                // Low-level advantage: one-step TD against the subgoal.
                let (z_sub_t1, _) = self.encode(&p_sub_t1, false)?;
                let v_sub = column(&value.forward_only(&hcat(&s_t, &z_sub))?);
                let v_sub_next = column(&value.forward_only(&hcat(&s_t1, &z_sub_t1))?);
                for i in 0..b {
                    let (r, _) = goal_reward(s_t.row(i), &p_sub_t.row(i)[sd..]);
                    w_low[i] = awr_weight(r + gamma * v_sub_next[i] - v_sub[i], self.cfg.beta);
                }

                let mut vgrad = vout.grad;
                vgrad.scale(agent_w as f32);
                let value = self.agent.value.as_mut().expect("hiql agent has a value net");
                adam_step(value, &vgrad, self.value_opt.as_mut().expect("hiql optimizer"))?;
                if let Some(cache) = &cache_goal_t {
                    let g = col_block(&vout.input_grad, sd);
                    let enc = self.agent.encoder.as_ref().expect("flow needs an encoder");
                    let mut flow_grad = enc.embed_backward(cache, &g)?;
                    flow_grad.scale(agent_w as f32);
                    phi_flow_grad = Some(flow_grad);
                }
            }

            let high_out = weighted_mse_loss(&self.agent.high, &p_goal_t, &z_sub, &w_high)?;
            record.high = high_out.loss;
            let mut hgrad = high_out.grad;
            hgrad.scale(agent_w as f32);
            adam_step(&mut self.agent.high, &hgrad, &mut self.high_opt)?;

            let x_low = hcat(&s_t, &z_sub);
            let low_out = weighted_ce_loss(&self.agent.low, &x_low, &labels, &w_low)?;
            record.low = low_out.loss;
            let mut lgrad = low_out.grad;
            lgrad.scale(agent_w as f32);
            adam_step(&mut self.agent.low, &lgrad, &mut self.low_opt)?;

            if let Some(cache) = &cache_sub {
                // z* feeds the high-level target and the low-level input.
                for i in 0..b {
                    for c in 0..self.agent.z_dim {
                        let g = high_out.target_grad.get(i, c) + low_out.input_grad.get(i, sd + c);
                        z_sub_grad.set(i, c, g);
                    }
                }
                let enc = self.agent.encoder.as_ref().expect("flow needs an encoder");
                let mut g = enc.embed_backward(cache, &z_sub_grad)?;
                g.scale(agent_w as f32);
                match &mut phi_flow_grad {
                    Some(acc) => acc.add_scaled(&g, 1.0)?,
                    None => phi_flow_grad = Some(g),
                }
            }
        }

        let mut aux_grads = None;
        if aux_active {
            let enc = self.agent.encoder.as_ref().expect("cotrain agent has an encoder");
            let segments = cut_segments(ds, batch, &self.cfg.carl)?;
            let (aux_loss, grads) = carl::ablation_loss(enc, &segments)?;
            record.aux = aux_loss;
            aux_grads = Some(grads);
        }

        // The encoder's update mixes λ·contrastive with any flow-through
        // contribution (already scaled by 1 − λ).
        if aux_grads.is_some() || phi_flow_grad.is_some() {
            let enc = self.agent.encoder.as_mut().expect("encoder updates need an encoder");
            let mut phi_total = Grad::zeros_like(&enc.phi);
            if let Some(grads) = &aux_grads {
                phi_total.add_scaled(&grads.phi, lambda as f32)?;
            }
            if let Some(g) = &phi_flow_grad {
                phi_total.add_scaled(g, 1.0)?;
            }
            adam_step(&mut enc.phi, &phi_total, self.phi_opt.as_mut().expect("cotrain optimizer"))?;
            if let Some(grads) = &aux_grads {
                if let (Some(net), Some(opt), Some(g)) =
                    (enc.psi.as_mut(), self.psi_opt.as_mut(), &grads.psi)
                {
                    let mut scaled = g.clone();
                    scaled.scale(lambda as f32);
                    adam_step(net, &scaled, opt)?;
                }
                if let (Some(net), Some(opt), Some(g)) =
                    (enc.xi.as_mut(), self.xi_opt.as_mut(), &grads.xi)
                {
                    let mut scaled = g.clone();
                    scaled.scale(lambda as f32);
                    adam_step(net, &scaled, opt)?;
                }
            }
        }

        record.total = agent_w * (record.value + record.high + record.low) + lambda * record.aux;
        if !record.total.is_finite() {
            return Err(Error::numeric(format!("non-finite loss at step {step}")));
        }
        Ok(record)
    }
}

/// Interior contrastive segments for the auxiliary loss, cut at the batch's
/// own (traj, t, j) indices.
fn cut_segments(ds: &Dataset, batch: &[HrlSample], carl_cfg: &CarlConfig) -> Result<Vec<Segment>> {
    let cutter = SegmentSampler::new(
        ds,
        SamplerConfig { k: carl_cfg.k, stride: carl_cfg.stride, batch_size: 1, seed: 0, ..Default::default() },
    )?;
    Ok(batch.iter().map(|s| cutter.segment_at(s.traj, s.t, s.j)).collect())
}

fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
    let mut m = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for i in 0..a.rows() {
        m.row_mut(i)[..a.cols()].copy_from_slice(a.row(i));
        m.row_mut(i)[a.cols()..].copy_from_slice(b.row(i));
    }
    m
}

/// Copies columns `from..` into their own matrix.
fn col_block(m: &Matrix, from: usize) -> Matrix {
    let cols = m.cols() - from;
    let mut out = Matrix::zeros(m.rows(), cols);
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&m.row(i)[from..]);
    }
    out
}

fn column(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|i| m.get(i, 0) as f64).collect()
}

/// Full training run: init, relabeled batches, one `step` per iteration.
pub fn train_agent(
    ds: &Dataset,
    cfg: &CoTrainConfig,
    steps: usize,
    seed: u64,
) -> Result<(HrlAgent, Vec<HrlLossRecord>)> {
    let agent = init_agent(cfg, ds, seed)?;
    let mut trainer = HrlTrainer::new(agent, cfg.clone())?;
    let mut sampler = HrlBatchSampler::new(ds, cfg, derive_seed(seed, 2))?;
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sampler.sample_batch();
        records.push(trainer.step(ds, &batch, step)?);
    }
    Ok((trainer.into_agent(), records))
}

/// Like [`train_agent`] with `mode = "pretrain"`, but the frozen encoder is
/// handed over in memory instead of loaded from a checkpoint path. The
/// config's `mode`, `flow_through` and `pretrain_checkpoint` fields are
/// overridden; everything else (including `carl.k`, which must match the
/// encoder) is honored.
pub fn train_agent_with_frozen_encoder(
    ds: &Dataset,
    cfg: &CoTrainConfig,
    steps: usize,
    seed: u64,
    encoder: CarlModel,
) -> Result<(HrlAgent, Vec<HrlLossRecord>)> {
    let cfg = CoTrainConfig {
        mode: EncoderMode::Pretrain,
        pretrain_checkpoint: None,
        flow_through: false,
        ..cfg.clone()
    };
    cfg.validate()?;
    check_dataset(ds)?;
    let agent = build_agent(&cfg, ds, seed, Some(encoder))?;
    let mut trainer = HrlTrainer::new(agent, cfg.clone())?;
    let mut sampler = HrlBatchSampler::new(ds, &cfg, derive_seed(seed, 2))?;
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sampler.sample_batch();
        records.push(trainer.step(ds, &batch, step)?);
    }
    Ok((trainer.into_agent(), records))
}

/// Deterministic evaluation action: the high level proposes a subgoal
/// embedding, the low level picks the argmax action under it. Meant to be
/// re-queried every environment step.
pub fn act(agent: &HrlAgent, s: &[f32], g: &[f32]) -> Result<Action> {
    if s.len() != agent.state_dim || g.len() != agent.state_dim {
        return Err(Error::contract("state/goal dims do not match the agent"));
    }
    let mut pair = Matrix::zeros(1, 2 * agent.state_dim);
    pair.row_mut(0)[..agent.state_dim].copy_from_slice(s);
    pair.row_mut(0)[agent.state_dim..].copy_from_slice(g);
    let z = agent.high.forward_only(&pair)?;
    let mut x = Matrix::zeros(1, agent.state_dim + agent.z_dim);
    x.row_mut(0)[..agent.state_dim].copy_from_slice(s);
    x.row_mut(0)[agent.state_dim..].copy_from_slice(z.row(0));
    let logits = agent.low.forward_only(&x)?;
    Action::from_index(argmax(logits.row(0)))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentMeta {
    config: CoTrainConfig,
    z_dim: usize,
    state_dim: usize,
    num_actions: usize,
    has_value: bool,
    has_encoder: bool,
}

/// Writes the whole bundle: config + dims in `meta.json`, one `.carlnn` per
/// network, the encoder in its own subdirectory.
pub fn save_agent(agent: &HrlAgent, cfg: &CoTrainConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(v) = &agent.value {
        save_mlp(v, &dir.join("value.carlnn"))?;
    }
    save_mlp(&agent.high, &dir.join("high.carlnn"))?;
    save_mlp(&agent.low, &dir.join("low.carlnn"))?;
    if let Some(enc) = &agent.encoder {
        carl::save_carl(enc, &dir.join("encoder"))?;
    }
    // The encoder is bundled below, so the path it was originally loaded
    // from is dropped: keeping it would make checkpoint bytes depend on
    // where the run happened to live.
    let meta = AgentMeta {
        config: CoTrainConfig { pretrain_checkpoint: None, ..cfg.clone() },
        z_dim: agent.z_dim,
        state_dim: agent.state_dim,
        num_actions: agent.num_actions,
        has_value: agent.value.is_some(),
        has_encoder: agent.encoder.is_some(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_agent(dir: &Path) -> Result<(HrlAgent, CoTrainConfig)> {
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(meta_path.clone(), e))?;
    let meta: AgentMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(meta_path.clone(), e.to_string()))?;
    let value = if meta.has_value { Some(load_mlp(&dir.join("value.carlnn"))?) } else { None };
    let high = load_mlp(&dir.join("high.carlnn"))?;
    let low = load_mlp(&dir.join("low.carlnn"))?;
    let encoder =
        if meta.has_encoder { Some(carl::load_carl(&dir.join("encoder"))?) } else { None };
    if high.in_dim() != 2 * meta.state_dim
        || high.out_dim() != meta.z_dim
        || low.in_dim() != meta.state_dim + meta.z_dim
        || low.out_dim() != meta.num_actions
    {
        return Err(Error::format(meta_path, "network shapes disagree with metadata"));
    }
    Ok((
        HrlAgent {
            value,
            high,
            low,
            encoder,
            z_dim: meta.z_dim,
            state_dim: meta.state_dim,
            num_actions: meta.num_actions,
        },
        meta.config,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, EpisodeConfig};
    use crate::testkit;

    fn rooms_dataset(seed: u64) -> Dataset {
        let env = Env::from_spec("rooms2x4").unwrap();
        let cfg = EpisodeConfig { horizon: 40, start_rooms: None };
        crate::data::generate_dataset(&env, &cfg, 20, 0.2, seed).unwrap()
    }

    fn small_cfg() -> CoTrainConfig {
        CoTrainConfig {
            carl: CarlConfig {
                d: 6,
                phi_hidden: vec![16, 16],
                psi_hidden: vec![12],
                ..Default::default()
            },
            value_hidden: vec![16, 16],
            high_hidden: vec![16, 16],
            low_hidden: vec![16],
            batch_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn awr_weight_matches_hand_values() {
        assert!((awr_weight(0.0, 3.0) - 1.0).abs() < 1e-12);
        assert!((awr_weight(3.0, 3.0) - std::f64::consts::E).abs() < 1e-12);
        assert_eq!(awr_weight(1000.0, 3.0), 100.0);
        let mut prev = 0.0;
        for i in -20..=20 {
            let w = awr_weight(i as f64, 3.0);
            assert!(w >= prev);
            prev = w;
        }
    }

    #[test]
    fn expectile_weights_and_midpoint() {
        assert!((expectile_weight(1.0, 0.7) - 0.7).abs() < 1e-12);
        assert!((expectile_weight(-1.0, 0.7) - 0.3).abs() < 1e-12);

        // κ = 0.5 reduces to half the mean squared residual.
        let mut rng = rng_from(3);
        let net = Mlp::init(&[3, 5, 1], &mut rng).unwrap();
        let inputs = Matrix::from_vec(
            4,
            3,
            (0..12).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
        )
        .unwrap();
        let targets: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = expectile_value_loss(&net, &inputs, &targets, 0.5).unwrap();
        let mse: f64 = out
            .preds
            .iter()
            .zip(&targets)
            .map(|(p, t)| (t - p) * (t - p))
            .sum::<f64>()
            / 4.0;
        assert!((out.loss - 0.5 * mse).abs() < 1e-9);
    }

    #[test]
    fn expectile_loss_on_unit_residuals() {
        // Zeroed value net predicts 0 everywhere, so targets are residuals.
        let mut net = Mlp::init(&[2, 1], &mut rng_from(5)).unwrap();
        net.weight_mut(0).data_mut().fill(0.0);
        let inputs = Matrix::from_vec(2, 2, vec![0.3, -0.2, 0.8, 0.1]).unwrap();
        let out = expectile_value_loss(&net, &inputs, &[1.0, -1.0], 0.7).unwrap();
        assert!((out.loss - 0.5).abs() < 1e-9, "0.7·1² and 0.3·1² average to 0.5");
    }

    #[test]
    fn goal_reward_is_sparse_and_exact() {
        let s = vec![0.25f32, 0.5];
        assert_eq!(goal_reward(&s, &s), (0.0, true));
        assert_eq!(goal_reward(&s, &[0.25, 0.5000001]), (-1.0, false));
    }

    #[test]
    fn window_return_absorbs_at_the_goal() {
        let states = vec![vec![0.0f32], vec![1.0], vec![2.0], vec![3.0]];
        // No goal inside: sum of −γ^i, bootstrap factor γ^Δ.
        let (sum, factor) = window_return(&states, 0, 3, &[9.0], 0.9);
        assert!((sum - (-1.0 - 0.9 - 0.81)).abs() < 1e-12);
        assert!((factor - 0.9f64.powi(3)).abs() < 1e-12);
        // Goal at index 1: only the first reward counts, no bootstrap.
        let (sum, factor) = window_return(&states, 0, 3, &[1.0], 0.9);
        assert!((sum + 1.0).abs() < 1e-12);
        assert_eq!(factor, 0.0);
        // Already at the goal: nothing.
        let (sum, factor) = window_return(&states, 0, 3, &[0.0], 0.9);
        assert_eq!((sum, factor), (0.0, 0.0));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = rng_from(11);
        for case in 0..5 {
            let value = Mlp::init(&[4, 6, 1], &mut rng).unwrap();
            let b = 3 + case % 3;
            let inputs = Matrix::from_vec(
                b,
                4,
                (0..b * 4).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
            )
            .unwrap();
            let preds = value.forward_only(&inputs).unwrap();
            // Keep residuals away from the expectile kink.
            let targets: Vec<f64> = (0..b)
                .map(|i| {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    preds.get(i, 0) as f64 + sign * rng.gen_range(0.3..1.0)
                })
                .collect();
            let r = testkit::expectile_grad_check(&value, &inputs, &targets, 0.7).unwrap();
            assert!(r.max_rel_error < 1e-4, "expectile: {r:?}");

            let net = Mlp::init(&[3, 5, 4], &mut rng).unwrap();
            let inputs = Matrix::from_vec(
                b,
                3,
                (0..b * 3).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
            )
            .unwrap();
            let targets = Matrix::from_vec(
                b,
                4,
                (0..b * 4).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
            )
            .unwrap();
            let weights: Vec<f64> = (0..b).map(|_| rng.gen_range(0.1..3.0)).collect();
            let r = testkit::weighted_mse_grad_check(&net, &inputs, &targets, &weights).unwrap();
            assert!(r.max_rel_error < 1e-4, "weighted mse: {r:?}");

            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..4)).collect();
            let r = testkit::weighted_ce_grad_check(&net, &inputs, &labels, &weights).unwrap();
            assert!(r.max_rel_error < 1e-4, "weighted ce: {r:?}");
        }
    }

    #[test]
    fn geometric_offsets_have_the_right_mean() {
        let mut rng = rng_from(21);
        let n = 20_000;
        let mut sum = 0.0f64;
        for _ in 0..n {
            let off = geometric_offset(&mut rng, 0.9);
            assert!(off >= 1);
            sum += off as f64;
        }
        let mean = sum / n as f64;
        assert!((mean - 10.0).abs() < 0.5, "mean offset {mean}, expected ≈ 1/(1−γ) = 10");
    }

    #[test]
    fn act_is_deterministic_and_scale_invariant() {
        let ds = rooms_dataset(61);
        let mut agent = init_agent(&small_cfg(), &ds, 4).unwrap();
        let s = ds.trajectories[0].states[0].clone();
        let g = ds.trajectories[0].states[5].clone();
        let a1 = act(&agent, &s, &g).unwrap();
        assert_eq!(a1, act(&agent, &s, &g).unwrap());
        // Positive rescaling of the low level's logits keeps the argmax.
        let last = agent.low.num_layers() - 1;
        agent.low.weight_mut(last).data_mut().iter_mut().for_each(|w| *w *= 4.0);
        agent.low.bias_mut(last).iter_mut().for_each(|b| *b *= 4.0);
        assert_eq!(a1, act(&agent, &s, &g).unwrap());
    }

    #[test]
    fn lambda_zero_never_touches_the_encoder() {
        let ds = rooms_dataset(63);
        let cfg = CoTrainConfig { lambda_aux: 0.0, ..small_cfg() };
        let (agent, records) = train_agent(&ds, &cfg, 25, 9).unwrap();
        let fresh =
            carl::init_carl(&cfg.carl, ds.state_dim, ds.action_dim, derive_seed(9, 1)).unwrap();
        assert_eq!(
            agent.encoder.as_ref().unwrap().phi.flatten_params(),
            fresh.phi.flatten_params()
        );
        assert!(records.iter().all(|r| r.aux == 0.0));
        // And the agent actually trained.
        assert_ne!(
            agent.high.flatten_params(),
            init_agent(&cfg, &ds, 9).unwrap().high.flatten_params()
        );
    }

    #[test]
    fn lambda_zero_cotrain_equals_pretrain_on_the_frozen_init() {
        let ds = rooms_dataset(65);
        let cfg = CoTrainConfig { lambda_aux: 0.0, ..small_cfg() };
        let (cotrained, _) = train_agent(&ds, &cfg, 25, 13).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("enc");
        let frozen =
            carl::init_carl(&cfg.carl, ds.state_dim, ds.action_dim, derive_seed(13, 1)).unwrap();
        carl::save_carl(&frozen, &ckpt).unwrap();
        let pre_cfg = CoTrainConfig {
            mode: EncoderMode::Pretrain,
            pretrain_checkpoint: Some(ckpt),
            ..cfg
        };
        let (pretrained, _) = train_agent(&ds, &pre_cfg, 25, 13).unwrap();
        assert_eq!(
            cotrained.value.as_ref().unwrap().flatten_params(),
            pretrained.value.as_ref().unwrap().flatten_params()
        );
        assert_eq!(cotrained.high.flatten_params(), pretrained.high.flatten_params());
        assert_eq!(cotrained.low.flatten_params(), pretrained.low.flatten_params());
        assert_eq!(
            cotrained.encoder.as_ref().unwrap().phi.flatten_params(),
            pretrained.encoder.as_ref().unwrap().phi.flatten_params()
        );
    }

    #[test]
    fn lambda_one_never_touches_the_agent() {
        let ds = rooms_dataset(67);
        let cfg = CoTrainConfig { lambda_aux: 1.0, ..small_cfg() };
        let (agent, records) = train_agent(&ds, &cfg, 25, 29).unwrap();
        let init = init_agent(&cfg, &ds, 29).unwrap();
        assert_eq!(agent.high.flatten_params(), init.high.flatten_params());
        assert_eq!(agent.low.flatten_params(), init.low.flatten_params());
        assert_eq!(
            agent.value.as_ref().unwrap().flatten_params(),
            init.value.as_ref().unwrap().flatten_params()
        );
        assert_ne!(
            agent.encoder.as_ref().unwrap().phi.flatten_params(),
            init.encoder.as_ref().unwrap().phi.flatten_params()
        );
        assert!(records.iter().all(|r| r.value == 0.0 && r.high == 0.0 && r.low == 0.0));
    }

    #[test]
    fn hgcbc_runs_without_a_value_net_and_learns() {
        let ds = rooms_dataset(69);
        let cfg = CoTrainConfig { algorithm: Algorithm::Hgcbc, ..small_cfg() };
        let (agent, records) = train_agent(&ds, &cfg, 250, 31).unwrap();
        assert!(agent.value.is_none());
        assert!(records.iter().all(|r| r.value == 0.0));
        let head: f64 = records[..25].iter().map(|r| r.low).sum::<f64>() / 25.0;
        let tail: f64 = records[records.len() - 25..].iter().map(|r| r.low).sum::<f64>() / 25.0;
        assert!(tail < head, "behavior cloning did not improve: {head} -> {tail}");
    }

    #[test]
    fn none_mode_uses_raw_pairs() {
        let ds = rooms_dataset(71);
        let cfg = CoTrainConfig { mode: EncoderMode::None, lambda_aux: 0.0, ..small_cfg() };
        let (agent, records) = train_agent(&ds, &cfg, 30, 37).unwrap();
        assert!(agent.encoder.is_none());
        assert_eq!(agent.z_dim, 2 * ds.state_dim);
        assert!(records.iter().all(|r| r.total.is_finite() && r.aux == 0.0));
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let ds = rooms_dataset(73);
        let cfg = small_cfg();
        let (a1, r1) = train_agent(&ds, &cfg, 30, 41).unwrap();
        let (a2, r2) = train_agent(&ds, &cfg, 30, 41).unwrap();
        assert_eq!(a1.high.flatten_params(), a2.high.flatten_params());
        assert_eq!(a1.low.flatten_params(), a2.low.flatten_params());
        assert_eq!(
            a1.encoder.as_ref().unwrap().phi.flatten_params(),
            a2.encoder.as_ref().unwrap().phi.flatten_params()
        );
        assert_eq!(r1, r2);
    }

    #[test]
    fn flow_through_reaches_the_encoder_without_aux() {
        let ds = rooms_dataset(75);
        let cfg = CoTrainConfig { lambda_aux: 0.0, flow_through: true, ..small_cfg() };
        let (agent, _) = train_agent(&ds, &cfg, 10, 43).unwrap();
        let fresh =
            carl::init_carl(&cfg.carl, ds.state_dim, ds.action_dim, derive_seed(43, 1)).unwrap();
        assert_ne!(
            agent.encoder.as_ref().unwrap().phi.flatten_params(),
            fresh.phi.flatten_params()
        );
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let bad = CoTrainConfig { kappa: 1.0, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("kappa"));
        let bad = CoTrainConfig { beta: 0.0, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("beta"));
        let bad = CoTrainConfig { lambda_aux: 1.5, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("lambda"));
        let bad = CoTrainConfig { flow_through: true, mode: EncoderMode::None, ..Default::default() };
        assert!(bad.validate().is_err());
        // A missing checkpoint path only bites once an agent is actually built.
        let bad = CoTrainConfig { mode: EncoderMode::Pretrain, ..small_cfg() };
        assert!(bad.validate().is_ok());
        assert!(matches!(init_agent(&bad, &rooms_dataset(3), 0), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_in_memory_encoder_matches_checkpointed_pretraining() {
        let ds = rooms_dataset(21);
        let base = small_cfg();
        let sampler = SamplerConfig {
            k: base.carl.k,
            stride: base.carl.stride,
            batch_size: 16,
            seed: 5,
            ..SamplerConfig::default()
        };
        let (enc, _) =
            carl::train_carl(&ds, &sampler, &base.carl, 8, 906).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("enc");
        carl::save_carl(&enc, &ckpt).unwrap();

        let from_disk = CoTrainConfig {
            mode: EncoderMode::Pretrain,
            pretrain_checkpoint: Some(ckpt),
            ..base.clone()
        };
        let (a, _) = train_agent(&ds, &from_disk, 12, 64).unwrap();
        // Deliberately pass a config still claiming cotrain: the override wins.
        let in_memory = CoTrainConfig { mode: EncoderMode::Cotrain, ..base };
        let (b, _) = train_agent_with_frozen_encoder(&ds, &in_memory, 12, 64, enc).unwrap();
        assert_eq!(a.high.flatten_params(), b.high.flatten_params());
        assert_eq!(a.low.flatten_params(), b.low.flatten_params());
        assert_eq!(
            a.encoder.unwrap().phi.flatten_params(),
            b.encoder.unwrap().phi.flatten_params()
        );
    }

    #[test]
    fn point_datasets_are_rejected() {
        let env = Env::from_spec("point").unwrap();
        let cfg = EpisodeConfig { horizon: 20, start_rooms: None };
        let ds = crate::data::generate_dataset(&env, &cfg, 4, 0.0, 1).unwrap();
        assert!(matches!(
            train_agent(&ds, &small_cfg(), 1, 1),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn agent_checkpoints_round_trip() {
        let ds = rooms_dataset(77);
        let cfg = small_cfg();
        let (agent, _) = train_agent(&ds, &cfg, 10, 47).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent");
        save_agent(&agent, &cfg, &path).unwrap();
        let (back, back_cfg) = load_agent(&path).unwrap();
        assert_eq!(back_cfg, cfg);
        assert_eq!(back.high.flatten_params(), agent.high.flatten_params());
        assert_eq!(back.low.flatten_params(), agent.low.flatten_params());
        assert_eq!(
            back.value.as_ref().unwrap().flatten_params(),
            agent.value.as_ref().unwrap().flatten_params()
        );
        assert_eq!(
            back.encoder.as_ref().unwrap().phi.flatten_params(),
            agent.encoder.as_ref().unwrap().phi.flatten_params()
        );
        let s = ds.trajectories[0].states[0].clone();
        let g = ds.trajectories[0].states[8].clone();
        assert_eq!(act(&agent, &s, &g).unwrap(), act(&back, &s, &g).unwrap());
    }
}
