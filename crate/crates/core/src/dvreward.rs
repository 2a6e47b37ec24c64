//! Decompositional verifiable reward.
//!
//! A request is decomposed into atomic yes/no questions split into semantic
//! and quality groups. Each question is scored by the verifier's
//! `P(Yes) / (P(Yes) + P(No))`, and the image reward is the geometric mean of
//! the two group means.
//!
//! The quality questions of the synthetic world are surrogates: "Geometry"
//! asks whether the latent lies inside the plausible radius and "Coherence"
//! whether it avoids the degenerate origin.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envtoy::{self, AttributePredicate, PredicateKind, PromptSpec};
use crate::rng::Rng;

/// Question sets with more than this many questions are dropped.
pub const MAX_QUESTIONS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum DvError {
    #[error("prompt {0} has no constraints")]
    EmptyConstraints(String),
    #[error("invalid answer probabilities ({p_yes}, {p_no})")]
    Probabilities { p_yes: f64, p_no: f64 },
    #[error("score list is empty")]
    EmptyScores,
    #[error("score {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("verifier failed on `{question}`: {message}")]
    Verify { question: String, message: String },
    #[error("question set for {0} was dropped")]
    Dropped(String),
    #[error("decomposition failed after {attempts} attempts: {message}")]
    Decompose { attempts: usize, message: String },
    #[error("malformed verifier output: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, DvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Style,
    Environment,
    Viewpoint,
    Existence,
    Count,
    Attribute,
    Action,
    Spatial,
    Text,
    Negative,
    Geometry,
    Anatomy,
    Texture,
    Coherence,
    Lighting,
    Physics,
    Legibility,
    Aesthetics,
}

impl Category {
    pub const SEMANTIC: [Category; 10] = [
        Category::Style,
        Category::Environment,
        Category::Viewpoint,
        Category::Existence,
        Category::Count,
        Category::Attribute,
        Category::Action,
        Category::Spatial,
        Category::Text,
        Category::Negative,
    ];
    pub const QUALITY: [Category; 8] = [
        Category::Geometry,
        Category::Anatomy,
        Category::Texture,
        Category::Coherence,
        Category::Lighting,
        Category::Physics,
        Category::Legibility,
        Category::Aesthetics,
    ];

    pub fn is_semantic(self) -> bool {
        Category::SEMANTIC.contains(&self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub category: Category,
    /// Analytic form; absent for free-form questions.
    pub predicate: Option<AttributePredicate>,
    /// Expected answer for a compliant image.
    pub polarity: bool,
}

const QUESTION_PREFIX: &str = "Does the object satisfy ";

impl Question {
    pub fn analytic(category: Category, predicate: AttributePredicate) -> Self {
        Question {
            text: format!("{QUESTION_PREFIX}{}?", predicate.render()),
            category,
            predicate: Some(predicate),
            polarity: true,
        }
    }
}

/// Recovers the predicate of an analytic question from its text.
pub fn predicate_from_text(text: &str) -> Option<AttributePredicate> {
    let body = text.strip_prefix(QUESTION_PREFIX)?.strip_suffix('?')?;
    AttributePredicate::parse(body).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSet {
    pub prompt_id: String,
    pub q: String,
    #[serde(rename = "Q_sem")]
    pub sem: Vec<Question>,
    #[serde(rename = "Q_qua")]
    pub qua: Vec<Question>,
}

impl QuestionSet {
    pub fn total(&self) -> usize {
        self.sem.len() + self.qua.len()
    }
}

pub trait Decomposer {
    fn decompose(&self, prompt: &PromptSpec) -> Result<QuestionSet>;
}

/// Deterministic rule table over predicate kinds.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleDecomposer;

pub fn category_for(kind: PredicateKind) -> Category {
    match kind {
        PredicateKind::HalfPlane | PredicateKind::CoordBand => Category::Attribute,
        PredicateKind::RadiusBand | PredicateKind::AngleSector => Category::Spatial,
    }
}

pub fn decompose(prompt: &PromptSpec) -> Result<QuestionSet> {
    if prompt.constraints.is_empty() {
        return Err(DvError::EmptyConstraints(prompt.id.clone()));
    }
    let mut sem = vec![Question::analytic(Category::Existence, envtoy::existence_region())];
    sem.extend(prompt.constraints.iter().map(|c| Question::analytic(category_for(c.kind()), c.clone())));
    let qua = vec![
        Question::analytic(Category::Geometry, envtoy::plausible_region()),
        Question::analytic(Category::Coherence, envtoy::non_degenerate_region()),
    ];
    Ok(QuestionSet { prompt_id: prompt.id.clone(), q: prompt.text.clone(), sem, qua })
}

impl Decomposer for RuleDecomposer {
    fn decompose(&self, prompt: &PromptSpec) -> Result<QuestionSet> {
        decompose(prompt)
    }
}

/// A text-completion backend for model-driven decomposition.
pub trait TextModel: Send + Sync {
    fn complete(&self, instruction: &str) -> std::result::Result<String, String>;
}

pub const DECOMPOSITION_TEMPLATE: &str = "Decompose the user request below into atomic yes/no questions. \
Semantic categories: Style, Environment, Viewpoint, Existence, Count, Attribute, Action, Spatial, Text, Negative. \
Quality categories: Geometry, Anatomy, Texture, Coherence, Lighting, Physics, Legibility, Aesthetics. \
Anchor every quality question to an entity named in a semantic question. \
Reply with JSON only: {\"semantic\": [{\"category\": ..., \"question\": ...}], \"quality\": [...]}.\n\nRequest: ";

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQuestion {
    category: Category,
    question: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDecomposition {
    semantic: Vec<RawQuestion>,
    quality: Vec<RawQuestion>,
}

/// Parses a strict-JSON decomposition reply.
pub fn parse_decomposition(prompt: &PromptSpec, reply: &str) -> std::result::Result<QuestionSet, String> {
    let raw: RawDecomposition = serde_json::from_str(reply.trim()).map_err(|e| e.to_string())?;
    let convert = |qs: Vec<RawQuestion>, semantic: bool| -> std::result::Result<Vec<Question>, String> {
        qs.into_iter()
            .map(|r| {
                if r.category.is_semantic() != semantic {
                    return Err(format!("category {:?} in the wrong group", r.category));
                }
                Ok(Question { predicate: predicate_from_text(&r.question), text: r.question, category: r.category, polarity: true })
            })
            .collect()
    };
    let sem = convert(raw.semantic, true)?;
    if sem.is_empty() {
        return Err("no semantic questions".into());
    }
    Ok(QuestionSet { prompt_id: prompt.id.clone(), q: prompt.text.clone(), sem, qua: convert(raw.quality, false)? })
}

pub struct ModelDecomposer<M> {
    pub model: M,
    pub max_attempts: usize,
}

impl<M: TextModel> Decomposer for ModelDecomposer<M> {
    fn decompose(&self, prompt: &PromptSpec) -> Result<QuestionSet> {
        let instruction = format!("{DECOMPOSITION_TEMPLATE}{}", prompt.text);
        let mut last = String::from("no attempts");
        for _ in 0..self.max_attempts {
            match self.model.complete(&instruction).and_then(|r| parse_decomposition(prompt, &r)) {
                Ok(qs) => return Ok(qs),
                Err(e) => last = e,
            }
        }
        Err(DvError::Decompose { attempts: self.max_attempts, message: last })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Filtered {
    Kept(QuestionSet),
    Dropped { prompt_id: String, total: usize },
}

pub fn filter_questions(set: QuestionSet, max_total: usize) -> Filtered {
    if set.total() > max_total {
        let total = set.total();
        Filtered::Dropped { prompt_id: set.prompt_id, total }
    } else {
        Filtered::Kept(set)
    }
}

/// `P(Yes) / (P(Yes) + P(No))`.
pub fn confidence_score(p_yes: f64, p_no: f64) -> Result<f64> {
    if !(p_yes >= 0.0 && p_no >= 0.0 && p_yes + p_no > 0.0) || !(p_yes + p_no).is_finite() {
        return Err(DvError::Probabilities { p_yes, p_no });
    }
    Ok(p_yes / (p_yes + p_no))
}

fn mean_checked(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(DvError::EmptyScores);
    }
    if let Some(&bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(DvError::OutOfRange(bad));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// `sqrt(mean(sem) * mean(qua))`.
pub fn aggregate(sem: &[f64], qua: &[f64]) -> Result<f64> {
    Ok((mean_checked(sem)? * mean_checked(qua)?).sqrt())
}

/// Thresholds a confidence at 0.5, ties counting as "yes".
pub fn binary_mode(v: f64) -> f64 {
    if v >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Single-scalar judgement: the logistic of the smallest constraint margin,
/// quantized to the eleven levels `0, 0.1, ..., 1`.
pub fn holistic_baseline(z: &[f64], prompt: &PromptSpec, temperature: f64) -> f64 {
    let m = prompt.constraints.iter().map(|c| c.margin(z)).fold(f64::INFINITY, f64::min);
    quantize_score(envtoy::logistic(m / temperature))
}

pub fn quantize_score(x: f64) -> f64 {
    (10.0 * x).round() / 10.0
}

/// Extracts a 0-10 rating from a holistic judge reply and scales it to [0, 1].
pub fn parse_holistic_score(reply: &str) -> Result<f64> {
    let num: String = reply
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit() || *c == '.')
        .collect();
    let v: f64 = num.parse().map_err(|_| DvError::Malformed(reply.to_string()))?;
    if !(0.0..=10.0).contains(&v) {
        return Err(DvError::Malformed(reply.to_string()));
    }
    Ok(v / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub p_yes: f64,
    pub p_no: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

/// Reads the answer-token probabilities out of a top-k log-probability list.
/// Tokens are matched after trimming whitespace; a missing token has
/// probability zero.
pub fn answer_from_top_logprobs(entries: &[TopLogprob], yes: &str, no: &str) -> Result<Answer> {
    let p = |tok: &str| {
        entries.iter().filter(|e| e.token.trim() == tok).map(|e| e.logprob.exp()).sum::<f64>()
    };
    let ans = Answer { p_yes: p(yes), p_no: p(no) };
    confidence_score(ans.p_yes, ans.p_no).map_err(|_| DvError::Malformed(format!("neither {yes} nor {no} present")))?;
    Ok(ans)
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("{message}")]
pub struct VerifyError {
    pub message: String,
    pub retryable: bool,
}

pub trait Verifier: Send + Sync {
    fn answer(&self, z: &[f64], question: &Question) -> std::result::Result<Answer, VerifyError>;
}

/// Scores analytic questions by the logistic of the predicate margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticVerifier {
    pub temperature: f64,
}

impl Default for AnalyticVerifier {
    fn default() -> Self {
        AnalyticVerifier { temperature: envtoy::DEFAULT_VERIFIER_TEMPERATURE }
    }
}

impl AnalyticVerifier {
    pub fn answer_predicate(&self, z: &[f64], pred: &AttributePredicate) -> Answer {
        let m = pred.margin(z) / self.temperature;
        Answer { p_yes: envtoy::logistic(m), p_no: envtoy::logistic(-m) }
    }
}

impl Verifier for AnalyticVerifier {
    fn answer(&self, z: &[f64], question: &Question) -> std::result::Result<Answer, VerifyError> {
        let pred = question
            .predicate
            .clone()
            .or_else(|| predicate_from_text(&question.text))
            .ok_or_else(|| VerifyError { message: format!("no analytic form for `{}`", question.text), retryable: false })?;
        let a = self.answer_predicate(z, &pred);
        Ok(if question.polarity { a } else { Answer { p_yes: a.p_no, p_no: a.p_yes } })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Confidence,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub sem: Vec<f64>,
    pub qua: Vec<f64>,
    pub mean_sem: f64,
    pub mean_qua: f64,
    pub image_reward: f64,
    pub format_penalty: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn with_penalty(mut self, penalty: f64) -> Self {
        self.format_penalty = penalty;
        self.total = self.image_reward + penalty;
        self
    }

    /// A breakdown carrying only a single scalar judgement.
    pub fn scalar(value: f64) -> Self {
        RewardBreakdown {
            sem: Vec::new(),
            qua: Vec::new(),
            mean_sem: value,
            mean_qua: value,
            image_reward: value,
            format_penalty: 0.0,
            total: value,
        }
    }
}

/// Scores every question of `set` at `z` (concurrently) and aggregates.
/// Any verifier failure fails the whole sample.
pub fn score_image(z: &[f64], set: &QuestionSet, verifier: &dyn Verifier, mode: ScoreMode) -> Result<RewardBreakdown> {
    score_image_with(z, set, verifier, mode, true)
}

/// [`score_image`] with the per-question fan-out optional. Callers that
/// already run many samples concurrently score serially; the result is
/// identical either way.
pub fn score_image_with(
    z: &[f64],
    set: &QuestionSet,
    verifier: &dyn Verifier,
    mode: ScoreMode,
    parallel: bool,
) -> Result<RewardBreakdown> {
    let one = |q: &Question| -> Result<f64> {
        let a = verifier.answer(z, q).map_err(|e| DvError::Verify { question: q.text.clone(), message: e.message })?;
        let v = confidence_score(a.p_yes, a.p_no)?;
        Ok(match mode {
            ScoreMode::Confidence => v,
            ScoreMode::Binary => binary_mode(v),
        })
    };
    let score = |qs: &[Question]| -> Result<Vec<f64>> {
        if parallel {
            qs.par_iter().map(one).collect()
        } else {
            qs.iter().map(one).collect()
        }
    };
    let sem = score(&set.sem)?;
    let qua = score(&set.qua)?;
    let image_reward = aggregate(&sem, &qua)?;
    Ok(RewardBreakdown {
        mean_sem: mean_checked(&sem)?,
        mean_qua: mean_checked(&qua)?,
        sem,
        qua,
        image_reward,
        format_penalty: 0.0,
        total: image_reward,
    })
}

/// Writes question sets as line-delimited JSON.
pub fn write_question_sets<W: std::io::Write>(sets: &[QuestionSet], mut w: W) -> std::io::Result<()> {
    for s in sets {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_question_sets<R: std::io::BufRead>(r: R) -> std::io::Result<Vec<QuestionSet>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// A compliant and a single-constraint-violating latent for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotPair {
    pub prompt: PromptSpec,
    pub compliant: Vec<f64>,
    pub violating: Vec<f64>,
}

/// Width of the near-boundary band used by [`pilot_pairs`].
pub const PILOT_BAND: f64 = 0.05;
/// Margin kept on every constraint that is meant to be comfortably met.
pub const PILOT_SAFE_MARGIN: f64 = 0.5;

/// Builds pairs that share a barely-met constraint `A`. The compliant latent
/// meets the second constraint `B` comfortably; the violating one misses it
/// by at most [`PILOT_BAND`]. Everything else is met by a wide margin.
pub fn pilot_pairs(prompts: &[PromptSpec], dim: usize, n: usize, seed: u64) -> Vec<PilotPair> {
    let mut out = Vec::with_capacity(n);
    for p in prompts.iter().filter(|p| p.constraints.len() >= 2) {
        if out.len() == n {
            break;
        }
        let mut rng = crate::rng::stream(seed, &[crate::rng::hash_str(&p.id)]);
        let near = |m: f64| m > 0.0 && m <= PILOT_BAND;
        let compliant = find_point(p, dim, &mut rng, |mb| mb >= PILOT_SAFE_MARGIN, near);
        let violating = find_point(p, dim, &mut rng, |mb| mb < 0.0 && mb >= -PILOT_BAND, near);
        if let (Some(compliant), Some(violating)) = (compliant, violating) {
            out.push(PilotPair { prompt: p.clone(), compliant, violating });
        }
    }
    out
}

fn find_point(
    p: &PromptSpec,
    dim: usize,
    rng: &mut Rng,
    b_ok: impl Fn(f64) -> bool,
    a_ok: impl Fn(f64) -> bool,
) -> Option<Vec<f64>> {
    let scene = [envtoy::existence_region(), envtoy::plausible_region(), envtoy::non_degenerate_region()];
    for _ in 0..400_000 {
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.5..3.5)).collect();
        let ok = a_ok(p.constraints[0].margin(&z))
            && b_ok(p.constraints[1].margin(&z))
            && p.constraints[2..].iter().all(|c| c.margin(&z) >= PILOT_SAFE_MARGIN)
            && scene.iter().all(|s| s.margin(&z) >= PILOT_SAFE_MARGIN);
        if ok {
            return Some(z);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub pairs: usize,
    pub holistic_identical: f64,
    pub dvreward_identical: f64,
    pub holistic_mean_gap: f64,
    pub dvreward_mean_gap: f64,
}

pub fn pilot_study(pairs: &[PilotPair], verifier: &AnalyticVerifier) -> Result<PilotReport> {
    let n = pairs.len().max(1) as f64;
    let mut report = PilotReport {
        pairs: pairs.len(),
        holistic_identical: 0.0,
        dvreward_identical: 0.0,
        holistic_mean_gap: 0.0,
        dvreward_mean_gap: 0.0,
    };
    for pair in pairs {
        let qs = decompose(&pair.prompt)?;
        let h_ok = holistic_baseline(&pair.compliant, &pair.prompt, verifier.temperature);
        let h_bad = holistic_baseline(&pair.violating, &pair.prompt, verifier.temperature);
        let d_ok = score_image(&pair.compliant, &qs, verifier, ScoreMode::Confidence)?.image_reward;
        let d_bad = score_image(&pair.violating, &qs, verifier, ScoreMode::Confidence)?.image_reward;
        report.holistic_identical += f64::from(h_ok == h_bad) / n;
        report.dvreward_identical += f64::from(d_ok == d_bad) / n;
        report.holistic_mean_gap += (h_ok - h_bad) / n;
        report.dvreward_mean_gap += (d_ok - d_bad) / n;
    }
    Ok(report)
}
