//! The hybrid policy: reasoning head and velocity network sharing one
//! parameter vector, plus the conditioning glue and pretraining.
//!
//! The velocity network never sees the request's constraints directly. Its
//! condition is the task and tier one-hots, the mean-pooled attribute tokens
//! of the reasoning sequence and, when refining, the earlier latent and a
//! refinement flag. The reasoning is therefore the only route by which the
//! request shapes the output.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::arpolicy::{ArHead, PromptEmbedding, Vocabulary};
use crate::envtoy::{Catalog, PromptSpec, TargetDistribution, Tier};
use crate::flowpolicy::{self, FlowNet};
use crate::gradcore::{self, AdamConfig, Layout, OptimizerState, ParamVector, Tensor};
use crate::rng::{stream, Rng};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Env(#[from] crate::envtoy::EnvError),
    #[error(transparent)]
    Flow(#[from] flowpolicy::FlowError),
    #[error(transparent)]
    Ar(#[from] crate::arpolicy::ArError),
    #[error(transparent)]
    Grad(#[from] gradcore::GradError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dim: usize,
    pub tasks: Vec<String>,
    pub max_len: usize,
    pub ar_hidden: usize,
    pub flow_hidden: usize,
}

impl ModelSpec {
    pub fn for_catalog(catalog: &Catalog) -> Self {
        ModelSpec {
            dim: catalog.dim,
            tasks: catalog.tasks.iter().map(|t| t.name.clone()).collect(),
            max_len: 8,
            ar_hidden: 64,
            flow_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub ar: ArHead,
    pub flow: FlowNet,
}

impl PolicyModel {
    pub fn new(spec: ModelSpec) -> Self {
        let vocab = Vocabulary::new(spec.dim);
        let cond_width = spec.tasks.len() + Tier::ALL.len() + vocab.n_attr() + spec.dim + 1;
        let mut layout = Layout::default();
        let ar = ArHead::register(&mut layout, vocab, spec.max_len, spec.ar_hidden);
        let flow = FlowNet::register(&mut layout, spec.dim, cond_width, spec.flow_hidden);
        PolicyModel { spec, layout, ar, flow }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.ar.vocab
    }

    /// Random initialization with every refinement-only input weight zeroed,
    /// so refinement and plain generation start out identical.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout.clone());
        let mut rng = stream(seed, &[0x1417]);
        self.ar.mlp.init(&mut p, &mut rng);
        self.flow.mlp.init(&mut p, &mut rng);
        self.zero_refinement_inputs(&mut p);
        self.ar.mirror_request_slot(&mut p);
        p
    }

    fn zero_refinement_inputs(&self, p: &mut ParamVector) {
        let a = self.vocab().n_attr();
        let d = self.spec.dim;
        let ar_seg = self.ar.mlp.weight_segment(0);
        let cols = p.layout.segments[ar_seg].cols;
        p.segment_mut(ar_seg)[(2 * a) * cols..(2 * a + d) * cols].iter_mut().for_each(|w| *w = 0.0);
        let fl_seg = self.flow.mlp.weight_segment(0);
        let cols = p.layout.segments[fl_seg].cols;
        let start = d + 1 + self.spec.tasks.len() + Tier::ALL.len() + a;
        p.segment_mut(fl_seg)[start * cols..(start + d + 1) * cols].iter_mut().for_each(|w| *w = 0.0);
    }

    pub fn embedding(&self, prompt: &PromptSpec, z_init: Option<&[f64]>) -> PromptEmbedding {
        self.ar.embed(&prompt.constraints, z_init)
    }

    /// `[task | tier | mean attribute token | z_init | refinement flag]`.
    pub fn condition(&self, prompt: &PromptSpec, tokens: &[usize], z_init: Option<&[f64]>) -> Result<Vec<f64>> {
        let nt = self.spec.tasks.len();
        let a = self.vocab().n_attr();
        let d = self.spec.dim;
        let mut c = vec![0.0; self.flow.cond_width];
        let ti = self
            .spec
            .tasks
            .iter()
            .position(|t| *t == prompt.task)
            .ok_or_else(|| ModelError::UnknownTask(prompt.task.clone()))?;
        c[ti] = 1.0;
        c[nt + prompt.tier.index()] = 1.0;
        let attrs: Vec<usize> = tokens.iter().copied().filter(|&t| t < a).collect();
        for &t in &attrs {
            c[nt + 3 + t] += 1.0 / attrs.len() as f64;
        }
        if let Some(z) = z_init {
            c[nt + 3 + a..nt + 3 + a + d].copy_from_slice(z);
            c[nt + 3 + a + d] = 1.0;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub flow_steps: usize,
    pub flow_batch: usize,
    pub flow_lr: f64,
    pub ar_steps: usize,
    pub ar_batch: usize,
    pub ar_lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { flow_steps: 2000, flow_batch: 128, flow_lr: 2e-3, ar_steps: 300, ar_batch: 32, ar_lr: 3e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub flow_loss_start: f64,
    pub flow_loss_end: f64,
    pub ar_loss_start: f64,
    pub ar_loss_end: f64,
}

/// Conditional flow matching on target samples with gold plans, then
/// format-only supervision of the reasoning head on random plans.
pub fn pretrain(model: &PolicyModel, params: &mut ParamVector, prompts: &[PromptSpec], cfg: &PretrainConfig) -> Result<PretrainReport> {
    let targets: Vec<TargetDistribution> =
        prompts.iter().map(|p| TargetDistribution::for_prompt(p, model.spec.dim)).collect::<std::result::Result<_, _>>()?;
    let conds: Vec<Vec<f64>> = prompts
        .iter()
        .map(|p| model.condition(p, &model.vocab().gold_plan(&p.constraints), None))
        .collect::<Result<_>>()?;

    let mut rng = stream(cfg.seed, &[0xF10]);
    let idx: Vec<usize> = (0..prompts.len()).collect();
    let draw_batch = |rng: &mut Rng| -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..cfg.flow_batch)
            .map(|_| {
                let &i = idx.choose(rng).expect("non-empty prompt set");
                (crate::envtoy::target_sample(&targets[i], rng), conds[i].clone())
            })
            .collect()
    };
    let mut eval_rng = stream(cfg.seed, &[0xF11]);
    let eval: Vec<_> = (0..4).flat_map(|_| draw_batch(&mut eval_rng)).collect();
    let eval = flowpolicy::draw_cfm_samples(&eval, &mut eval_rng);
    let flow_loss_start = model.flow.cfm_loss(params, &eval)?;
    let mut st = OptimizerState::new(AdamConfig { lr: cfg.flow_lr, ..Default::default() }, params.values.len());
    for _ in 0..cfg.flow_steps {
        let batch = flowpolicy::draw_cfm_samples(&draw_batch(&mut rng), &mut rng);
        let (_, g) = gradcore::value_and_grad(params, |t, v| model.flow.tape_cfm_loss(t, v, &batch))?;
        gradcore::adam_step(params, &mut st, &g)?;
    }
    let flow_loss_end = model.flow.cfm_loss(params, &eval)?;

    let vocab = model.vocab().clone();
    let random_plan = |rng: &mut Rng| -> Vec<usize> {
        let k = rng.random_range(1..=3);
        let mut toks = vec![vocab.begin()];
        toks.extend((0..k).map(|_| rng.random_range(0..vocab.n_attr())));
        toks.push(vocab.end());
        toks
    };
    let ar_batch = |rng: &mut Rng| -> Result<(Tensor, Vec<usize>)> {
        let items: Vec<(PromptEmbedding, Vec<usize>)> = (0..cfg.ar_batch)
            .map(|_| {
                let p = &prompts[rng.random_range(0..prompts.len())];
                (model.embedding(p, None), random_plan(rng))
            })
            .collect();
        let refs: Vec<(&PromptEmbedding, &[usize])> = items.iter().map(|(e, t)| (e, t.as_slice())).collect();
        Ok(model.ar.batch_rows(&refs)?)
    };
    let nll = |params: &ParamVector, f: &Tensor, t: &[usize]| -> Result<f64> {
        let lp = model.ar.batch_logprobs(params, f, t)?;
        Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
    };
    let (ef, et) = ar_batch(&mut eval_rng)?;
    let ar_loss_start = nll(params, &ef, &et)?;
    let mut st = OptimizerState::new(AdamConfig { lr: cfg.ar_lr, ..Default::default() }, params.values.len());
    for _ in 0..cfg.ar_steps {
        let (f, t) = ar_batch(&mut rng)?;
        let n = t.len() as f64;
        let (_, g) = gradcore::value_and_grad(params, |tape, v| {
            let lp = model.ar.tape_logprobs(tape, v, &f, &t);
            let s = tape.sum(lp);
            tape.scale(s, -1.0 / n)
        })?;
        gradcore::adam_step(params, &mut st, &g)?;
    }
    let ar_loss_end = nll(params, &ef, &et)?;
    model.ar.mirror_request_slot(params);
    Ok(PretrainReport { flow_loss_start, flow_loss_end, ar_loss_start, ar_loss_end })
}
