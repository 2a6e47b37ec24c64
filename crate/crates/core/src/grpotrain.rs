//! Group-relative training over hybrid trajectories.
//!
//! Each step samples a batch of prompts, rolls out a group of trajectories
//! per prompt (reasoning tokens, then a flow path conditioned on them),
//! scores the final latents, normalizes rewards within each group and takes
//! one clipped-surrogate update in which the same advantage drives both the
//! token log-ratios and the flow-step log-ratios.
//!
//! Two task modes share the machinery. Plain generation (`Rt2i`) conditions
//! on the request only. Refinement (`Srr`) first draws a batch of plain
//! samples, fixes the worst of them as the starting point, and trains the
//! policy to improve on it; members that fail to beat it can be pushed to the
//! group minimum (false-positive rectification).

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arpolicy::{format_penalty, k3_kl, PromptEmbedding, ReasoningSequence, SamplingConfig};
use crate::dvreward::{self, QuestionSet, RewardBreakdown, ScoreMode};
use crate::envtoy::{PromptSpec, Tier};
use crate::flowpolicy::{kl_weight_sigma, FlowTrajectory, Schedule};
use crate::gradcore::{self, AdamConfig, GradError, OptimizerState, ParamVector, Tape, Tensor, Var};
use crate::model::{ModelError, PolicyModel};
use crate::rewardserve::{Collected, RewardClient, ScoreJob, ServeError, Ticket};
use crate::rng::{stream, Rng};

/// Advantages are zero when the group's reward spread is below this.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("reward scoring failed: {0}")]
    Reward(String),
    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String, params: Box<ParamVector>, optimizer: Box<OptimizerState> },
    #[error("step callback failed: {0}")]
    Callback(#[from] std::io::Error),
}

impl From<crate::arpolicy::ArError> for TrainError {
    fn from(e: crate::arpolicy::ArError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<crate::flowpolicy::FlowError> for TrainError {
    fn from(e: crate::flowpolicy::FlowError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Rt2i,
    Srr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Confidence,
    Binary,
    /// Single quantized whole-request judgement; the comparison baseline.
    Holistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TaskMode,
    pub reward: RewardMode,
    pub fpr: bool,
    pub group_size: usize,
    pub lambda: f64,
    pub beta_ar: f64,
    pub beta_flow: f64,
    pub clip_eps: f64,
    pub noise_a: f64,
    /// Sampling steps during training rollouts.
    pub t_train: usize,
    pub t_eval: usize,
    /// Stochastic steps are the first `sde_window` of the schedule.
    pub sde_window: usize,
    /// How many of the stochastic steps enter each update.
    pub step_subset: usize,
    pub prompts_per_step: usize,
    pub mini_batches: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    /// Learning-rate multiplier for the reasoning head.
    pub ar_lr_scale: f64,
    pub sampling: SamplingConfig,
    pub max_len: usize,
    pub verifier_temperature: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Plain-generation defaults at desk scale.
    pub fn rt2i() -> Self {
        TrainConfig {
            mode: TaskMode::Rt2i,
            reward: RewardMode::Confidence,
            fpr: true,
            group_size: 8,
            lambda: 0.2,
            beta_ar: 0.0,
            beta_flow: 0.0,
            clip_eps: 0.2,
            noise_a: 0.7,
            t_train: 16,
            t_eval: 40,
            sde_window: 10,
            step_subset: 10,
            prompts_per_step: 8,
            mini_batches: 4,
            steps: 200,
            adam: AdamConfig { lr: 1e-3, ..Default::default() },
            ar_lr_scale: 10.0,
            sampling: SamplingConfig::default(),
            max_len: 8,
            verifier_temperature: crate::envtoy::DEFAULT_VERIFIER_TEMPERATURE,
            seed: 0,
        }
    }

    /// Refinement defaults: 40 steps, five updated steps drawn from the
    /// first fifteen.
    pub fn srr() -> Self {
        TrainConfig { mode: TaskMode::Srr, t_train: 40, sde_window: 15, step_subset: 5, ..Self::rt2i() }
    }

    pub fn for_mode(mode: TaskMode) -> Self {
        match mode {
            TaskMode::Rt2i => Self::rt2i(),
            TaskMode::Srr => Self::srr(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.group_size < 2 {
            return bad(format!("group size {} < 2", self.group_size));
        }
        if !(self.lambda >= 0.0 && self.beta_ar >= 0.0 && self.beta_flow >= 0.0) {
            return bad("lambda and KL weights must be non-negative".into());
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip epsilon {} outside (0, 1)", self.clip_eps));
        }
        if !(self.noise_a > 0.0) {
            return bad("noise level must be positive".into());
        }
        if self.t_train == 0 || self.t_eval == 0 {
            return bad("step counts must be positive".into());
        }
        if self.sde_window == 0 || self.sde_window > self.t_train {
            return bad(format!("sde window {} not in 1..={}", self.sde_window, self.t_train));
        }
        if self.step_subset == 0 || self.step_subset > self.sde_window {
            return bad(format!("step subset {} not in 1..={}", self.step_subset, self.sde_window));
        }
        if self.prompts_per_step == 0 || self.mini_batches == 0 {
            return bad("prompts per step and mini-batches must be positive".into());
        }
        if !(self.adam.lr > 0.0 && self.ar_lr_scale > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if !(self.verifier_temperature > 0.0) {
            return bad("verifier temperature must be positive".into());
        }
        self.sampling.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: String,
    /// What the reasoning head saw, including any refinement start point.
    pub embedding: PromptEmbedding,
    pub reasoning: ReasoningSequence,
    pub flow: FlowTrajectory,
    pub reward: RewardBreakdown,
    /// Image reward plus format penalty.
    pub total: f64,
}

impl Trajectory {
    pub fn z0(&self) -> &[f64] {
        &self.flow.z0
    }

    pub fn z_init(&self) -> Option<&[f64]> {
        self.embedding.z_init.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt_id: String,
    pub mode: TaskMode,
    pub members: Vec<Trajectory>,
    /// Rewards of the refinement pre-sample batch; empty otherwise.
    pub pre_rewards: Vec<f64>,
    pub r_init: Option<f64>,
    pub raw: Vec<f64>,
    pub rectified: Vec<f64>,
    pub advantages: Vec<f64>,
    pub selected_steps: Vec<usize>,
}

impl Group {
    pub fn is_degenerate(&self) -> bool {
        self.advantages.iter().all(|&a| a == 0.0)
    }

    /// Refinement groups where nobody beat the starting point.
    pub fn all_failed(&self) -> bool {
        self.r_init.is_some_and(|r| self.raw.iter().all(|&x| x <= r))
    }
}

/// `(r - mean) / std` with the population standard deviation; all zeros when
/// the spread is below [`STD_FLOOR`].
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    if !(std >= STD_FLOOR) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Replaces every reward that does not beat `r_init` with the minimum raw
/// reward of the group.
pub fn fpr_rectify(raw: &[f64], r_init: f64) -> Vec<f64> {
    let m = raw.iter().copied().fold(f64::INFINITY, f64::min);
    raw.iter().map(|&r| if r <= r_init { m } else { r }).collect()
}

pub use gradcore::ppo_clip;

/// `subset` distinct indices from `0..window`, uniformly, ascending.
pub fn select_sde_subset(window: usize, subset: usize, rng: &mut Rng) -> Vec<usize> {
    assert!(subset <= window, "subset {subset} larger than window {window}");
    let mut v = index::sample(rng, window, subset).into_vec();
    v.sort_unstable();
    v
}

// ---------------------------------------------------------------------------
// Rollouts

/// Generated but not yet scored.
#[derive(Debug, Clone)]
struct Draft {
    embedding: PromptEmbedding,
    reasoning: ReasoningSequence,
    flow: FlowTrajectory,
}

struct Rollout<'a> {
    model: &'a PolicyModel,
    params: &'a ParamVector,
    cfg: &'a TrainConfig,
}

impl Rollout<'_> {
    fn draft(
        &self,
        prompt: &PromptSpec,
        z_init: Option<&[f64]>,
        schedule: &Schedule,
        window: &[usize],
        rng: &mut Rng,
    ) -> Result<Draft> {
        let emb = self.model.embedding(prompt, z_init);
        let reasoning = self.model.ar.sample_sequence(self.params, &emb, &self.cfg.sampling, self.cfg.max_len, rng)?;
        let cond = self.model.condition(prompt, &reasoning.tokens, z_init)?;
        let flow = self.model.flow.sample_trajectory(self.params, &cond, schedule, window, self.cfg.noise_a, rng)?;
        Ok(Draft { embedding: emb, reasoning, flow })
    }

    fn drafts(
        &self,
        prompt: &PromptSpec,
        z_init: Option<&[f64]>,
        schedule: &Schedule,
        window: &[usize],
        base: u64,
        n: usize,
    ) -> Result<Vec<Draft>> {
        (0..n)
            .into_par_iter()
            .map(|i| self.draft(prompt, z_init, schedule, window, &mut stream(base, &[i as u64])))
            .collect()
    }
}

enum Pending {
    Ticket(Ticket),
    Ready(Vec<RewardBreakdown>),
}

fn submit(
    cfg: &TrainConfig,
    client: &RewardClient,
    items: Vec<(&PromptSpec, &QuestionSet, &Draft)>,
) -> Result<Pending> {
    let mode = match cfg.reward {
        RewardMode::Holistic => {
            return Ok(Pending::Ready(
                items
                    .iter()
                    .map(|(p, _, d)| {
                        let r = dvreward::holistic_baseline(&d.flow.z0, p, cfg.verifier_temperature);
                        RewardBreakdown::scalar(r).with_penalty(format_penalty(&d.reasoning))
                    })
                    .collect(),
            ))
        }
        RewardMode::Confidence => ScoreMode::Confidence,
        RewardMode::Binary => ScoreMode::Binary,
    };
    let jobs = items
        .into_iter()
        .map(|(_, qs, d)| ScoreJob {
            sample: d.flow.z0.clone(),
            questions: qs.clone(),
            mode,
            format_penalty: format_penalty(&d.reasoning),
        })
        .collect();
    Ok(Pending::Ticket(client.submit_batch(jobs)?))
}

/// Per-sample outcomes; failures carry the scorer's message.
fn resolve(p: Pending) -> Vec<std::result::Result<RewardBreakdown, String>> {
    match p {
        Pending::Ready(r) => r.into_iter().map(Ok).collect(),
        Pending::Ticket(t) => match t.collect(true) {
            Ok(Collected::Complete(r)) => r.into_iter().map(Ok).collect(),
            Ok(Collected::Pending) => unreachable!("blocking collect returned pending"),
            Err(ServeError::Failed { failures, .. }) => {
                let failed: HashMap<usize, String> = failures.into_iter().collect();
                (0..t.len).map(|i| Err(failed.get(&i).cloned().unwrap_or_else(|| "batch failed".into()))).collect()
            }
            Err(e) => (0..t.len).map(|_| Err(e.to_string())).collect(),
        },
    }
}

fn score_now(cfg: &TrainConfig, client: &RewardClient, prompt: &PromptSpec, qs: &QuestionSet, drafts: &[Draft]) -> Result<Vec<RewardBreakdown>> {
    resolve(submit(cfg, client, drafts.iter().map(|d| (prompt, qs, d)).collect())?)
        .into_iter()
        .collect::<std::result::Result<_, _>>()
        .map_err(TrainError::Reward)
}

/// A group after sampling, before its rewards arrive.
struct Unscored {
    prompt: usize,
    pre_rewards: Vec<f64>,
    r_init: Option<f64>,
    drafts: Vec<Draft>,
    selected: Vec<usize>,
}

fn window(cfg: &TrainConfig) -> Vec<usize> {
    (0..cfg.sde_window).collect()
}

struct Plan {
    prompt: usize,
    pre_seed: u64,
    member_seed: u64,
    selected: Vec<usize>,
}

/// Samples groups for `chosen` prompts. In refinement mode the pre-sample
/// batches are scored together before any member is drawn. Blocking waits
/// happen only on the calling thread, never inside the parallel sections.
/// Groups whose pre-samples could not be scored are dropped and counted.
fn generate_batch(
    ro: &Rollout,
    client: &RewardClient,
    prompts: &[PromptSpec],
    qsets: &[&QuestionSet],
    chosen: &[(usize, u64)],
) -> Result<(Vec<Unscored>, usize)> {
    let cfg = ro.cfg;
    let schedule = Schedule::uniform(cfg.t_train);
    let plans: Vec<Plan> = chosen
        .iter()
        .map(|&(prompt, seed)| {
            let mut rng = stream(seed, &[]);
            let (pre_seed, member_seed) = (rng.random::<u64>(), rng.random::<u64>());
            let selected = select_sde_subset(cfg.sde_window, cfg.step_subset, &mut rng);
            Plan { prompt, pre_seed, member_seed, selected }
        })
        .collect();
    let mut starts: Vec<Option<(Vec<f64>, f64)>> = vec![None; plans.len()];
    let mut pre_rewards: Vec<Vec<f64>> = vec![Vec::new(); plans.len()];
    let mut keep = vec![true; plans.len()];
    if cfg.mode == TaskMode::Srr {
        let pre: Vec<Vec<Draft>> = plans
            .par_iter()
            .map(|pl| ro.drafts(&prompts[pl.prompt], None, &schedule, &[], pl.pre_seed, cfg.group_size))
            .collect::<Result<_>>()?;
        let items = plans
            .iter()
            .zip(&pre)
            .flat_map(|(pl, ds)| ds.iter().map(|d| (&prompts[pl.prompt], qsets[pl.prompt], d)))
            .collect();
        let mut results = resolve(submit(cfg, client, items)?).into_iter();
        for (i, ds) in pre.iter().enumerate() {
            let r: std::result::Result<Vec<RewardBreakdown>, String> = results.by_ref().take(ds.len()).collect();
            match r {
                Ok(r) => {
                    let worst = (0..r.len()).min_by(|&a, &b| r[a].total.total_cmp(&r[b].total)).expect("non-empty");
                    starts[i] = Some((ds[worst].flow.z0.clone(), r[worst].total));
                    pre_rewards[i] = r.iter().map(|b| b.total).collect();
                }
                Err(msg) => {
                    eprintln!("discarding group for {}: initial samples not scored: {msg}", prompts[plans[i].prompt].id);
                    keep[i] = false;
                }
            }
        }
    }
    let win = window(cfg);
    let out: Vec<Unscored> = plans
        .into_par_iter()
        .zip(starts)
        .zip(pre_rewards)
        .zip(keep.par_iter())
        .filter(|(_, &k)| k)
        .map(|(((pl, start), pre_rewards), _)| {
            let z_init = start.as_ref().map(|s| s.0.as_slice());
            let drafts = ro.drafts(&prompts[pl.prompt], z_init, &schedule, &win, pl.member_seed, cfg.group_size)?;
            Ok(Unscored { prompt: pl.prompt, pre_rewards, r_init: start.map(|s| s.1), drafts, selected: pl.selected })
        })
        .collect::<Result<_>>()?;
    let dropped = keep.iter().filter(|&&k| !k).count();
    Ok((out, dropped))
}

fn finish(cfg: &TrainConfig, prompts: &[PromptSpec], u: Unscored, rewards: Vec<RewardBreakdown>) -> Group {
    let raw: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let rectified = match (cfg.mode, u.r_init) {
        (TaskMode::Srr, Some(r0)) if cfg.fpr => fpr_rectify(&raw, r0),
        _ => raw.clone(),
    };
    let advantages = compute_advantages(&rectified);
    let prompt_id = prompts[u.prompt].id.clone();
    let members = u
        .drafts
        .into_iter()
        .zip(rewards)
        .map(|(d, reward)| Trajectory {
            prompt_id: prompt_id.clone(),
            embedding: d.embedding,
            total: reward.total,
            reasoning: d.reasoning,
            flow: d.flow,
            reward,
        })
        .collect();
    Group {
        prompt_id,
        mode: cfg.mode,
        members,
        pre_rewards: u.pre_rewards,
        r_init: u.r_init,
        raw,
        rectified,
        advantages,
        selected_steps: u.selected,
    }
}

/// Samples and scores one group for `prompt`.
pub fn rollout_group(
    model: &PolicyModel,
    params: &ParamVector,
    prompt: &PromptSpec,
    questions: &QuestionSet,
    cfg: &TrainConfig,
    client: &RewardClient,
    rng: &mut Rng,
) -> Result<Group> {
    cfg.validate()?;
    let ro = Rollout { model, params, cfg };
    let prompts = std::slice::from_ref(prompt);
    let (mut u, _) = generate_batch(&ro, client, prompts, &[questions], &[(0, rng.random())])?;
    let u = u.pop().ok_or_else(|| TrainError::Reward("initial samples could not be scored".into()))?;
    let rewards = score_now(cfg, client, prompt, questions, &u.drafts)?;
    Ok(finish(cfg, prompts, u, rewards))
}

// ---------------------------------------------------------------------------
// Objective

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    /// Fraction of token and step ratios whose clipped branch is active.
    pub clip_frac: f64,
    /// Mean per-token k3 estimate against the reference policy.
    pub kl_ar: f64,
    /// Mean per-step closed-form flow KL against the reference policy.
    pub kl_flow: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: ParamVector,
    pub stats: LossStats,
}

/// Per-row data for one batch of groups: one AR row per token, one flow row
/// per selected step, each carrying its advantage and objective weight.
struct LossBatch<'a> {
    ar_features: Tensor,
    ar_targets: Vec<usize>,
    ar_old: Vec<f64>,
    ar_ref: Vec<f64>,
    ar_adv: Vec<f64>,
    ar_weight: Vec<f64>,
    fl_items: Vec<(&'a FlowTrajectory, usize)>,
    fl_old: Vec<f64>,
    fl_ref_v: Tensor,
    fl_adv: Vec<f64>,
    fl_weight: Vec<f64>,
    fl_kl_weight: Vec<f64>,
}

fn build_batch<'a>(model: &PolicyModel, ref_params: &ParamVector, groups: &'a [Group]) -> Result<LossBatch<'a>> {
    let n_groups = groups.len() as f64;
    let mut seqs: Vec<(&PromptEmbedding, &[usize])> = Vec::new();
    let mut b = LossBatch {
        ar_features: Tensor::zeros(0, 0),
        ar_targets: Vec::new(),
        ar_old: Vec::new(),
        ar_ref: Vec::new(),
        ar_adv: Vec::new(),
        ar_weight: Vec::new(),
        fl_items: Vec::new(),
        fl_old: Vec::new(),
        fl_ref_v: Tensor::zeros(0, 0),
        fl_adv: Vec::new(),
        fl_weight: Vec::new(),
        fl_kl_weight: Vec::new(),
    };
    let mut ref_v = Vec::new();
    for g in groups {
        if g.advantages.len() != g.members.len() {
            return Err(TrainError::Config(format!("group {} has no advantages", g.prompt_id)));
        }
        let gsize = g.members.len() as f64;
        let s = g.selected_steps.len() as f64;
        for (m, &a) in g.members.iter().zip(&g.advantages) {
            let toks = &m.reasoning.tokens;
            let l = toks.len() as f64;
            seqs.push((&m.embedding, toks));
            b.ar_old.extend_from_slice(&m.reasoning.logprobs);
            b.ar_adv.extend(std::iter::repeat_n(a, toks.len()));
            b.ar_weight.extend(std::iter::repeat_n(1.0 / (n_groups * gsize * l), toks.len()));
            for &k in &g.selected_steps {
                let rec = m.flow.steps.get(k).ok_or_else(|| TrainError::Config(format!("selected step {k} outside the trajectory")))?;
                b.fl_items.push((&m.flow, k));
                b.fl_old.push(rec.logprob.ok_or(crate::flowpolicy::FlowError::Deterministic)?);
                b.fl_adv.push(a);
                b.fl_weight.push(1.0 / (n_groups * gsize * s));
                b.fl_kl_weight.push(kl_weight_sigma(rec.sigma, rec.t, rec.dt)?);
            }
            ref_v.extend(model.flow.step_velocities(ref_params, &m.flow, &g.selected_steps)?.data);
        }
    }
    let (features, targets) = model.ar.batch_rows(&seqs)?;
    b.ar_ref = model.ar.batch_logprobs(ref_params, &features, &targets)?;
    b.ar_features = features;
    b.ar_targets = targets;
    b.fl_ref_v = Tensor::new(b.fl_items.len(), model.spec.dim, ref_v);
    Ok(b)
}

/// `e^d - d - 1` with `d = ref - logp`, on a column.
fn tape_k3(tape: &mut Tape, logp: Var, reference: &[f64]) -> Var {
    let r = tape.constant(Tensor::column(reference.to_vec()));
    let d = tape.sub(r, logp);
    let e = tape.exp(d);
    let e_minus_d = tape.sub(e, d);
    tape.add_const(e_minus_d, &Tensor::column(vec![-1.0; reference.len()]))
}

/// `exp(logp - old)` on a column.
fn tape_ratio(tape: &mut Tape, logp: Var, old: &[f64]) -> Var {
    let d = tape.add_const(logp, &Tensor::column(old.iter().map(|o| -o).collect()));
    tape.exp(d)
}

/// Negated objective `-(1/G) sum_i (lambda J_ar_i + J_flow_i)`, averaged
/// over groups, with its gradient. Token terms are averaged over each
/// sequence and flow terms over the selected steps; the behavior-policy
/// log-probabilities are the ones recorded at sampling time.
pub fn unified_loss(
    model: &PolicyModel,
    params: &ParamVector,
    ref_params: &ParamVector,
    groups: &[Group],
    cfg: &TrainConfig,
) -> Result<LossOutput> {
    if groups.is_empty() {
        return Ok(LossOutput { loss: 0.0, grad: ParamVector::zeros(params.layout.clone()), stats: LossStats::default() });
    }
    let b = build_batch(model, ref_params, groups)?;
    let eps = cfg.clip_eps;
    let mut stats = LossStats::default();
    let (loss, grad) = gradcore::value_and_grad(params, |tape, vars| {
        let lp = model.ar.tape_logprobs(tape, vars, &b.ar_features, &b.ar_targets);
        let ratio = tape_ratio(tape, lp, &b.ar_old);
        let mut clipped = count_clipped(&tape.value(ratio).data, &b.ar_adv, eps);
        stats.kl_ar = mean(tape.value(lp).data.iter().zip(&b.ar_ref).map(|(&l, &r)| k3_kl(l, r)));
        let surr = tape.ppo_clip(ratio, b.ar_adv.clone(), eps);
        let mut j_ar = tape.scale_rows(surr, b.ar_weight.clone());
        if cfg.beta_ar > 0.0 {
            let k3 = tape_k3(tape, lp, &b.ar_ref);
            let pen = tape.scale_rows(k3, b.ar_weight.iter().map(|w| w * cfg.beta_ar).collect());
            j_ar = tape.sub(j_ar, pen);
        }
        let j_ar = tape.sum(j_ar);
        let j_ar = tape.scale(j_ar, cfg.lambda);

        let (flp, v) = model.flow.tape_rescore(tape, vars, &b.fl_items).expect("records validated in build_batch");
        let ratio = tape_ratio(tape, flp, &b.fl_old);
        clipped += count_clipped(&tape.value(ratio).data, &b.fl_adv, eps);
        let surr = tape.ppo_clip(ratio, b.fl_adv.clone(), eps);
        let mut j_fl = tape.scale_rows(surr, b.fl_weight.clone());
        let vref = tape.constant(b.fl_ref_v.clone());
        let dv = tape.sub(v, vref);
        let sq = tape.square(dv);
        let sq = tape.sum_rows(sq);
        let kl = tape.scale_rows(sq, b.fl_kl_weight.clone());
        stats.kl_flow = mean(tape.value(kl).data.iter().copied());
        if cfg.beta_flow > 0.0 {
            let pen = tape.scale_rows(kl, b.fl_weight.iter().map(|w| w * cfg.beta_flow).collect());
            j_fl = tape.sub(j_fl, pen);
        }
        let j_fl = tape.sum(j_fl);
        stats.clip_frac = clipped as f64 / (b.ar_adv.len() + b.fl_adv.len()) as f64;
        let j = tape.add(j_ar, j_fl);
        tape.scale(j, -1.0)
    })?;
    Ok(LossOutput { loss, grad, stats })
}

fn count_clipped(ratios: &[f64], adv: &[f64], eps: f64) -> usize {
    ratios.iter().zip(adv).filter(|(&r, &a)| gradcore::ppo_clip_active(r, a, eps)).count()
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub clip_frac: f64,
    pub kl_ar: f64,
    pub kl_flow: f64,
    pub format_penalty_rate: f64,
    pub loss: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
    /// Fraction of groups with a usable reward spread.
    pub nondegenerate_frac: f64,
    /// Refinement groups in which no member beat the starting point.
    pub srr_all_fail: usize,
    /// Members whose reward rectification changed.
    pub fpr_changed: usize,
    pub groups: usize,
    pub discarded_groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub params: ParamVector,
    pub optimizer: OptimizerState,
    pub metrics: Vec<StepMetrics>,
}

/// Receives each step's metrics and the parameters after its update.
pub type StepHook<'a> = dyn FnMut(&StepMetrics, &ParamVector, &OptimizerState) -> std::io::Result<()> + 'a;

fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
}

/// Keeps prompts that have a question set, paired with it.
fn pair_questions<'a>(prompts: &'a [PromptSpec], qsets: &'a [QuestionSet]) -> (Vec<PromptSpec>, Vec<&'a QuestionSet>) {
    let by_id: HashMap<&str, &QuestionSet> = qsets.iter().map(|q| (q.prompt_id.as_str(), q)).collect();
    prompts.iter().filter_map(|p| by_id.get(p.id.as_str()).map(|q| (p.clone(), *q))).unzip()
}

/// One rollout batch: groups in mini-batches, each scored asynchronously
/// as soon as it is sampled; all rewards are joined before returning.
fn rollout_step(
    ro: &Rollout,
    client: &RewardClient,
    prompts: &[PromptSpec],
    qsets: &[&QuestionSet],
    step: usize,
) -> Result<StepRollout> {
    let cfg = ro.cfg;
    let mut rng = stream(cfg.seed, &[0x7124, step as u64]);
    let k = cfg.prompts_per_step.min(prompts.len());
    let chosen = index::sample(&mut rng, prompts.len(), k).into_vec();
    let seeds: Vec<u64> = chosen.iter().map(|_| rng.random()).collect();
    let per = k.div_ceil(cfg.mini_batches.min(k));
    let mut pending = Vec::new();
    let mut discarded = 0;
    let plan: Vec<(usize, u64)> = chosen.into_iter().zip(seeds).collect();
    let mut nonfinite = 0;
    for mb in plan.chunks(per) {
        let (unscored, dropped) = generate_batch(ro, client, prompts, qsets, mb)?;
        discarded += dropped;
        nonfinite += unscored
            .iter()
            .flat_map(|u| &u.drafts)
            .filter(|d| !d.flow.z0.iter().all(|x| x.is_finite()))
            .count();
        if nonfinite > 0 {
            return Ok(StepRollout { groups: Vec::new(), discarded, nonfinite });
        }
        let items = unscored
            .iter()
            .flat_map(|u| u.drafts.iter().map(|d| (&prompts[u.prompt], qsets[u.prompt], d)))
            .collect();
        let ticket = submit(cfg, client, items)?;
        pending.push((unscored, ticket));
    }
    let mut groups = Vec::new();
    for (unscored, ticket) in pending {
        let mut results = resolve(ticket).into_iter();
        for u in unscored {
            let r: std::result::Result<Vec<_>, String> = results.by_ref().take(u.drafts.len()).collect();
            match r {
                Ok(r) => groups.push(finish(cfg, prompts, u, r)),
                Err(msg) => {
                    eprintln!("step {step}: discarding group for {}: {msg}", prompts[u.prompt].id);
                    discarded += 1;
                }
            }
        }
    }
    Ok(StepRollout { groups, discarded, nonfinite })
}

struct StepRollout {
    groups: Vec<Group>,
    discarded: usize,
    /// Sampled latents that left the finite range.
    nonfinite: usize,
}

fn step_metrics(step: usize, groups: &[Group], discarded: usize, loss: f64, stats: LossStats) -> StepMetrics {
    let rewards: Vec<f64> = groups.iter().flat_map(|g| g.raw.iter().copied()).collect();
    let advs: Vec<f64> = groups.iter().flat_map(|g| g.advantages.iter().copied()).collect();
    let (mean_reward, reward_std) = mean_std(&rewards);
    let (adv_mean, adv_std) = mean_std(&advs);
    let members = groups.iter().map(|g| g.members.len()).sum::<usize>().max(1);
    let bad_format = groups.iter().flat_map(|g| &g.members).filter(|m| !m.reasoning.format_valid).count();
    let ng = groups.len().max(1) as f64;
    StepMetrics {
        step,
        mean_reward,
        reward_std,
        clip_frac: stats.clip_frac,
        kl_ar: stats.kl_ar,
        kl_flow: stats.kl_flow,
        format_penalty_rate: bad_format as f64 / members as f64,
        loss,
        adv_mean,
        adv_std,
        nondegenerate_frac: groups.iter().filter(|g| !g.is_degenerate()).count() as f64 / ng,
        srr_all_fail: groups.iter().filter(|g| g.all_failed()).count(),
        fpr_changed: groups.iter().map(|g| g.raw.iter().zip(&g.rectified).filter(|(a, b)| a != b).count()).sum(),
        groups: groups.len(),
        discarded_groups: discarded,
    }
}

/// Runs `cfg.steps` on-policy updates starting from `init`, which also
/// serves as the KL reference. One optimizer step per rollout batch.
pub fn train(
    model: &PolicyModel,
    init: &ParamVector,
    prompts: &[PromptSpec],
    qsets: &[QuestionSet],
    cfg: &TrainConfig,
    client: &RewardClient,
    on_step: &mut StepHook,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    if init.layout != model.layout {
        return Err(TrainError::Config("parameter layout does not match the model".into()));
    }
    let (prompts, qsets) = pair_questions(prompts, qsets);
    if prompts.is_empty() && cfg.steps > 0 {
        return Err(TrainError::Missing("no prompt has a kept question set".into()));
    }
    let mut params = init.clone();
    let mut opt = OptimizerState::with_segment_scale(cfg.adam, &params.layout, |name| {
        if name.starts_with("ar.") {
            cfg.ar_lr_scale
        } else {
            1.0
        }
    });
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let StepRollout { groups, discarded, nonfinite } = {
            let ro = Rollout { model, params: &params, cfg };
            rollout_step(&ro, client, &prompts, &qsets, step)?
        };
        let numerical = |message: String, params: &ParamVector, opt: &OptimizerState| TrainError::Numerical {
            step,
            message,
            params: Box::new(params.clone()),
            optimizer: Box::new(opt.clone()),
        };
        if nonfinite > 0 {
            return Err(numerical(format!("{nonfinite} sampled latents are non-finite"), &params, &opt));
        }
        if groups.is_empty() && discarded > 0 {
            return Err(numerical(format!("all {discarded} groups were discarded"), &params, &opt));
        }
        let out = match unified_loss(model, &params, init, &groups, cfg) {
            Ok(o) => o,
            Err(TrainError::Grad(e)) => return Err(numerical(e.to_string(), &params, &opt)),
            Err(e) => return Err(e),
        };
        if let Err(e) = gradcore::adam_step(&mut params, &mut opt, &out.grad) {
            return Err(numerical(e.to_string(), &params, &opt));
        }
        if !params.is_finite() {
            return Err(numerical("parameters became non-finite".into(), &params, &opt));
        }
        let m = step_metrics(step, &groups, discarded, out.loss, out.stats);
        on_step(&m, &params, &opt)?;
        metrics.push(m);
    }
    Ok(RunArtifacts { params, optimizer: opt, metrics })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierReport {
    pub tier: Tier,
    pub prompts: usize,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrrReport {
    pub prompts: usize,
    pub improvement_rate: f64,
    pub mean_initial: f64,
    pub mean_refined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prompts: usize,
    pub mean_reward: f64,
    pub tiers: Vec<TierReport>,
    pub srr: Option<SrrReport>,
}

/// Deterministic-flow evaluation with `cfg.t_eval` steps. With `srr`, each
/// prompt's first sample is also refined once and the two rewards compared.
pub fn eval_suite(
    model: &PolicyModel,
    params: &ParamVector,
    prompts: &[PromptSpec],
    qsets: &[QuestionSet],
    cfg: &TrainConfig,
    client: &RewardClient,
    srr: bool,
) -> Result<EvalReport> {
    cfg.validate()?;
    let (prompts, qsets) = pair_questions(prompts, qsets);
    let ro = Rollout { model, params, cfg };
    let schedule = Schedule::uniform(cfg.t_eval);
    let initial: Vec<Draft> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| ro.draft(p, None, &schedule, &[], &mut stream(cfg.seed, &[0xE7A1, i as u64])))
        .collect::<Result<_>>()?;
    let score = |drafts: &[Draft]| -> Result<Vec<f64>> {
        let items = drafts.iter().enumerate().map(|(i, d)| (&prompts[i], qsets[i], d)).collect();
        resolve(submit(cfg, client, items)?)
            .into_iter()
            .map(|r| r.map(|b| b.total).map_err(TrainError::Reward))
            .collect()
    };
    let r0 = score(&initial)?;
    let tiers = Tier::ALL
        .iter()
        .map(|&tier| {
            let r: Vec<f64> = prompts.iter().zip(&r0).filter(|(p, _)| p.tier == tier).map(|(_, &r)| r).collect();
            TierReport { tier, prompts: r.len(), mean_reward: mean_std(&r).0 }
        })
        .collect();
    let srr = if srr {
        let refined: Vec<Draft> = prompts
            .par_iter()
            .zip(&initial)
            .enumerate()
            .map(|(i, (p, d0))| {
                ro.draft(p, Some(&d0.flow.z0), &schedule, &[], &mut stream(cfg.seed, &[0xE7A2, i as u64]))
            })
            .collect::<Result<_>>()?;
        let r1 = score(&refined)?;
        let better = r0.iter().zip(&r1).filter(|(a, b)| b > a).count();
        Some(SrrReport {
            prompts: prompts.len(),
            improvement_rate: better as f64 / prompts.len().max(1) as f64,
            mean_initial: mean_std(&r0).0,
            mean_refined: mean_std(&r1).0,
        })
    } else {
        None
    };
    Ok(EvalReport { prompts: prompts.len(), mean_reward: mean_std(&r0).0, tiers, srr })
}
