//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comments start with '#'
//! grpo.group_size = 8
//! grpo.mode = srr
//! ```
//!
//! Unknown keys are rejected so that a typo never silently falls back to a
//! default. The canonical rendering (sorted, `key=value` per line) is what
//! gets hashed into run manifests.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grpotrain::{RewardMode, TaskMode, TrainConfig};
use crate::model::{ModelSpec, PretrainConfig};
use crate::rewardserve::{SchedulePolicy, ScheduleScenario};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "run seed for pretraining, training and simulation"),
    ("data.dim", "latent dimension"),
    ("data.tasks", "number of compositional task kinds"),
    ("data.per_task", "training prompts per task"),
    ("data.tier_ratio", "easy:medium:hard proportions, e.g. 1:1:1"),
    ("data.seed", "prompt generation seed"),
    ("data.eval_per_task", "held-out prompts per task"),
    ("data.eval_seed", "held-out prompt generation seed"),
    ("data.max_questions", "question sets above this size are dropped"),
    ("model.max_len", "longest reasoning sequence"),
    ("model.ar_hidden", "reasoning head hidden width"),
    ("model.flow_hidden", "velocity network hidden width"),
    ("pretrain.flow_steps", "flow-matching optimizer steps"),
    ("pretrain.flow_batch", "flow-matching batch size"),
    ("pretrain.flow_lr", "flow-matching learning rate"),
    ("pretrain.ar_steps", "reasoning-format optimizer steps"),
    ("pretrain.ar_batch", "reasoning-format batch size"),
    ("pretrain.ar_lr", "reasoning-format learning rate"),
    ("grpo.mode", "rt2i or srr"),
    ("grpo.reward", "confidence, binary or holistic"),
    ("grpo.fpr", "false-positive rectification in srr mode (on/off)"),
    ("grpo.group_size", "trajectories per prompt"),
    ("grpo.lambda", "weight of the reasoning objective"),
    ("grpo.beta_ar", "token KL weight"),
    ("grpo.beta_flow", "flow KL weight"),
    ("grpo.clip_eps", "ratio clip half-width"),
    ("grpo.noise_a", "SDE noise level"),
    ("grpo.t_train", "sampling steps in training rollouts"),
    ("grpo.t_eval", "sampling steps in evaluation"),
    ("grpo.sde_window", "leading steps sampled stochastically"),
    ("grpo.step_subset", "stochastic steps used per update"),
    ("grpo.prompts_per_step", "prompts per rollout batch"),
    ("grpo.mini_batches", "rollout mini-batches per step"),
    ("grpo.steps", "optimizer steps"),
    ("grpo.checkpoint_every", "checkpoint period in steps (0 = final only)"),
    ("optim.lr", "Adam learning rate"),
    ("optim.beta1", "Adam first-moment decay"),
    ("optim.beta2", "Adam second-moment decay"),
    ("optim.eps", "Adam epsilon"),
    ("optim.ar_lr_scale", "learning-rate multiplier for the reasoning head"),
    ("sampling.temperature", "reasoning sampling temperature"),
    ("sampling.top_p", "reasoning nucleus mass"),
    ("sampling.max_len", "alias of model.max_len for sampling"),
    ("verifier.temperature", "analytic verifier margin temperature"),
    ("verifier.workers", "reward client worker threads"),
    ("serve.addr", "listen address for the reward service"),
    ("sim.nodes", "simulated nodes"),
    ("sim.mini_batches", "mini-batches per step"),
    ("sim.steps", "simulated optimizer steps"),
    ("sim.rollout_secs", "rollout time per mini-batch"),
    ("sim.update_secs", "update time per mini-batch"),
    ("sim.per_question_latency_secs", "verifier latency per question wave"),
    ("sim.questions_per_mini_batch", "questions in one mini-batch"),
    ("sim.server_parallelism", "questions a server answers at once"),
    ("sim.transfer_overhead", "remote-serving overhead fraction"),
    ("sim.jitter", "relative rollout-time jitter"),
];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .filter(|(k, v)| !k.is_empty() && !v.is_empty())
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            if !KEYS.iter().any(|(key, _)| *key == k) {
                return Err(ConfigError::Unknown(k.to_string()));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: i + 1, key: k.to_string() });
            }
        }
        Ok(Config { entries })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(ConfigError::Unknown(key.to_string()));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.entries
            .get(key)
            .map(|v| v.parse().map_err(|_| ConfigError::Value { key: key.into(), value: v.clone() }))
            .transpose()
    }

    fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn apply_with<T>(&self, key: &str, slot: &mut T, parse: impl Fn(&str) -> Option<T>) -> Result<()> {
        if let Some(v) = self.entries.get(key) {
            *slot = parse(v).ok_or_else(|| ConfigError::Value { key: key.into(), value: v.clone() })?;
        }
        Ok(())
    }

    /// Sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }
}

pub fn parse_mode(s: &str) -> Option<TaskMode> {
    match s {
        "rt2i" => Some(TaskMode::Rt2i),
        "srr" => Some(TaskMode::Srr),
        _ => None,
    }
}

pub fn parse_reward(s: &str) -> Option<RewardMode> {
    match s {
        "confidence" => Some(RewardMode::Confidence),
        "binary" => Some(RewardMode::Binary),
        "holistic" => Some(RewardMode::Holistic),
        _ => None,
    }
}

pub fn parse_switch(s: &str) -> Option<bool> {
    match s {
        "on" | "true" | "1" => Some(true),
        "off" | "false" | "0" => Some(false),
        _ => None,
    }
}

fn parse_ratio(s: &str) -> Option<[usize; 3]> {
    let v: Vec<usize> = s.split(':').map(|x| x.trim().parse().ok()).collect::<Option<_>>()?;
    <[usize; 3]>::try_from(v).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub dim: usize,
    pub tasks: usize,
    pub per_task: usize,
    pub tier_ratio: [usize; 3],
    pub seed: u64,
    pub eval_per_task: usize,
    pub eval_seed: u64,
    pub max_questions: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dim: 2,
            tasks: 12,
            per_task: 30,
            tier_ratio: [1, 1, 1],
            seed: 1,
            eval_per_task: 51,
            eval_seed: 99,
            max_questions: crate::dvreward::MAX_QUESTIONS,
        }
    }
}

/// Everything a run needs, with desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub verifier_workers: usize,
    pub serve_addr: String,
    pub sim: ScheduleScenario,
}

impl RunConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let mut data = DataConfig::default();
        cfg.apply("data.dim", &mut data.dim)?;
        cfg.apply("data.tasks", &mut data.tasks)?;
        cfg.apply("data.per_task", &mut data.per_task)?;
        cfg.apply_with("data.tier_ratio", &mut data.tier_ratio, parse_ratio)?;
        cfg.apply("data.seed", &mut data.seed)?;
        cfg.apply("data.eval_per_task", &mut data.eval_per_task)?;
        cfg.apply("data.eval_seed", &mut data.eval_seed)?;
        cfg.apply("data.max_questions", &mut data.max_questions)?;

        let mut seed = 0u64;
        cfg.apply("seed", &mut seed)?;

        let mut model = ModelSpec { dim: data.dim, tasks: Vec::new(), max_len: 8, ar_hidden: 64, flow_hidden: 64 };
        cfg.apply("model.max_len", &mut model.max_len)?;
        cfg.apply("sampling.max_len", &mut model.max_len)?;
        cfg.apply("model.ar_hidden", &mut model.ar_hidden)?;
        cfg.apply("model.flow_hidden", &mut model.flow_hidden)?;

        let mut pretrain = PretrainConfig { seed, ..Default::default() };
        cfg.apply("pretrain.flow_steps", &mut pretrain.flow_steps)?;
        cfg.apply("pretrain.flow_batch", &mut pretrain.flow_batch)?;
        cfg.apply("pretrain.flow_lr", &mut pretrain.flow_lr)?;
        cfg.apply("pretrain.ar_steps", &mut pretrain.ar_steps)?;
        cfg.apply("pretrain.ar_batch", &mut pretrain.ar_batch)?;
        cfg.apply("pretrain.ar_lr", &mut pretrain.ar_lr)?;

        let mut mode = TaskMode::Rt2i;
        cfg.apply_with("grpo.mode", &mut mode, parse_mode)?;
        let mut t = TrainConfig::for_mode(mode);
        t.seed = seed;
        t.max_len = model.max_len;
        cfg.apply_with("grpo.reward", &mut t.reward, parse_reward)?;
        cfg.apply_with("grpo.fpr", &mut t.fpr, parse_switch)?;
        cfg.apply("grpo.group_size", &mut t.group_size)?;
        cfg.apply("grpo.lambda", &mut t.lambda)?;
        cfg.apply("grpo.beta_ar", &mut t.beta_ar)?;
        cfg.apply("grpo.beta_flow", &mut t.beta_flow)?;
        cfg.apply("grpo.clip_eps", &mut t.clip_eps)?;
        cfg.apply("grpo.noise_a", &mut t.noise_a)?;
        cfg.apply("grpo.t_train", &mut t.t_train)?;
        cfg.apply("grpo.t_eval", &mut t.t_eval)?;
        cfg.apply("grpo.sde_window", &mut t.sde_window)?;
        cfg.apply("grpo.step_subset", &mut t.step_subset)?;
        cfg.apply("grpo.prompts_per_step", &mut t.prompts_per_step)?;
        cfg.apply("grpo.mini_batches", &mut t.mini_batches)?;
        cfg.apply("grpo.steps", &mut t.steps)?;
        cfg.apply("optim.lr", &mut t.adam.lr)?;
        cfg.apply("optim.beta1", &mut t.adam.beta1)?;
        cfg.apply("optim.beta2", &mut t.adam.beta2)?;
        cfg.apply("optim.eps", &mut t.adam.eps)?;
        cfg.apply("optim.ar_lr_scale", &mut t.ar_lr_scale)?;
        cfg.apply("sampling.temperature", &mut t.sampling.temperature)?;
        cfg.apply("sampling.top_p", &mut t.sampling.top_p)?;
        cfg.apply("verifier.temperature", &mut t.verifier_temperature)?;

        let mut checkpoint_every = 50;
        cfg.apply("grpo.checkpoint_every", &mut checkpoint_every)?;
        let mut verifier_workers = 8;
        cfg.apply("verifier.workers", &mut verifier_workers)?;
        let mut serve_addr = "127.0.0.1:8089".to_string();
        cfg.apply("serve.addr", &mut serve_addr)?;

        let mut sim = ScheduleScenario::fitted(SchedulePolicy::DecentralizedAsync);
        cfg.apply("sim.nodes", &mut sim.nodes)?;
        cfg.apply("sim.mini_batches", &mut sim.mini_batches)?;
        cfg.apply("sim.steps", &mut sim.steps)?;
        cfg.apply("sim.rollout_secs", &mut sim.rollout_secs)?;
        cfg.apply("sim.update_secs", &mut sim.update_secs)?;
        cfg.apply("sim.per_question_latency_secs", &mut sim.per_question_latency_secs)?;
        cfg.apply("sim.questions_per_mini_batch", &mut sim.questions_per_mini_batch)?;
        cfg.apply("sim.server_parallelism", &mut sim.server_parallelism)?;
        cfg.apply("sim.transfer_overhead", &mut sim.transfer_overhead)?;
        cfg.apply("sim.jitter", &mut sim.jitter)?;

        Ok(RunConfig { seed, data, model, pretrain, train: t, checkpoint_every, verifier_workers, serve_addr, sim })
    }
}
