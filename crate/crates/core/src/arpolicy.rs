//! The autoregressive reasoning head.
//!
//! A categorical next-token policy over a vocabulary of attribute tokens (one
//! per predicate kind and bucket) plus the structural tokens. A well-formed
//! plan is `BEGIN attr* END`; the attribute tokens it contains condition the
//! flow generator.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envtoy::{AttributePredicate, PredicateKind, BUCKETS};
use crate::gradcore::{self, GradError, Layout, Mlp, ParamVector, Tape, Tensor, Var};
use crate::rng::Rng;

/// Reward adjustment for a malformed reasoning sequence.
pub const FORMAT_PENALTY: f64 = -0.5;

#[derive(Debug, thiserror::Error)]
pub enum ArError {
    #[error("token {0} is outside the vocabulary")]
    OutOfVocabulary(usize),
    #[error("sequence of length {len} exceeds the maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid sampling configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, ArError>;

/// Dense token ids: attribute tokens first, then BEGIN, END, SEP, PAD.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub dim: usize,
    pub kinds: Vec<PredicateKind>,
}

impl Vocabulary {
    pub fn new(dim: usize) -> Self {
        Vocabulary { dim, kinds: PredicateKind::available(dim) }
    }

    pub fn n_attr(&self) -> usize {
        self.kinds.len() * BUCKETS as usize
    }

    pub fn begin(&self) -> usize {
        self.n_attr()
    }

    pub fn end(&self) -> usize {
        self.n_attr() + 1
    }

    pub fn sep(&self) -> usize {
        self.n_attr() + 2
    }

    pub fn pad(&self) -> usize {
        self.n_attr() + 3
    }

    pub fn size(&self) -> usize {
        self.n_attr() + 4
    }

    pub fn is_tag(&self, token: usize) -> bool {
        token == self.begin() || token == self.end()
    }

    pub fn attr_token(&self, kind: PredicateKind, bucket: u8) -> Option<usize> {
        let k = self.kinds.iter().position(|&x| x == kind)?;
        (bucket < BUCKETS).then_some(k * BUCKETS as usize + bucket as usize)
    }

    /// Token naming `pred`, if `pred` is one of the quantized primitives.
    pub fn token_for(&self, pred: &AttributePredicate) -> Option<usize> {
        let kind = pred.kind();
        (0..BUCKETS)
            .find(|&b| AttributePredicate::primitive(kind, b, self.dim) == *pred)
            .and_then(|b| self.attr_token(kind, b))
    }

    pub fn predicate(&self, token: usize) -> Option<AttributePredicate> {
        if token >= self.n_attr() {
            return None;
        }
        let kind = self.kinds[token / BUCKETS as usize];
        Some(AttributePredicate::primitive(kind, (token % BUCKETS as usize) as u8, self.dim))
    }

    /// Multi-hot indicator of the attribute tokens naming `preds`.
    pub fn multi_hot(&self, preds: &[AttributePredicate]) -> Vec<f64> {
        let mut v = vec![0.0; self.n_attr()];
        for t in preds.iter().filter_map(|p| self.token_for(p)) {
            v[t] = 1.0;
        }
        v
    }

    /// The canonical well-formed plan naming exactly `preds`.
    pub fn gold_plan(&self, preds: &[AttributePredicate]) -> Vec<usize> {
        let mut toks = vec![self.begin()];
        toks.extend(preds.iter().filter_map(|p| self.token_for(p)));
        toks.push(self.end());
        toks
    }

    pub fn format_valid(&self, tokens: &[usize]) -> bool {
        tokens.len() >= 2
            && tokens[0] == self.begin()
            && tokens[tokens.len() - 1] == self.end()
            && !tokens[1..tokens.len() - 1].iter().any(|&t| self.is_tag(t))
    }
}

/// What the reasoning head sees of a request. `z_init` is present only when
/// refining an earlier output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub attrs: Vec<f64>,
    pub z_init: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningSequence {
    pub tokens: Vec<usize>,
    /// Unshaped behavior-policy log-probabilities of `tokens`.
    pub logprobs: Vec<f64>,
    pub format_valid: bool,
}

impl ReasoningSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// Argmax decoding; the zero-temperature limit.
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { temperature: 1.0, top_p: 0.8, greedy: false }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.greedy && !(self.temperature > 0.0) {
            return Err(ArError::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ArError::Config(format!("top_p {} must lie in (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

/// Draws a token from `logits`: temperature scaling first, then nucleus
/// truncation to the smallest prefix of mass at least `top_p`.
pub fn sample_token(logits: &[f64], cfg: &SamplingConfig, rng: &mut Rng) -> usize {
    if cfg.greedy {
        return argmax(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
    let probs: Vec<f64> = gradcore::log_softmax_row(&scaled).iter().map(|l| l.exp()).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        kept += 1;
        mass += probs[i];
        if mass >= cfg.top_p {
            break;
        }
    }
    let u: f64 = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &order[..kept] {
        acc += probs[i];
        if u < acc {
            return i;
        }
    }
    order[kept - 1]
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-token k3 estimate of KL(pi_theta || pi_ref) from log-probabilities.
pub fn k3_kl(logp_theta: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_theta;
    d.exp() - d - 1.0
}

pub fn format_penalty(seq: &ReasoningSequence) -> f64 {
    if seq.format_valid {
        0.0
    } else {
        FORMAT_PENALTY
    }
}

/// Feature layout: `[request attrs | refinement attrs | z_init | last token |
/// position | emitted-attribute bag]`. Plain generation fills the first
/// slot; refinement fills the second together with `z_init`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArHead {
    pub vocab: Vocabulary,
    pub max_len: usize,
    pub mlp: Mlp,
}

impl ArHead {
    pub fn register(layout: &mut Layout, vocab: Vocabulary, max_len: usize, hidden: usize) -> Self {
        let a = vocab.n_attr();
        let width = 3 * a + vocab.dim + vocab.size() + max_len;
        let mlp = Mlp::register(layout, "ar", &[width, hidden, vocab.size()]);
        ArHead { vocab, max_len, mlp }
    }

    pub fn embed(&self, constraints: &[AttributePredicate], z_init: Option<&[f64]>) -> PromptEmbedding {
        PromptEmbedding { attrs: self.vocab.multi_hot(constraints), z_init: z_init.map(<[f64]>::to_vec) }
    }

    pub fn features(&self, emb: &PromptEmbedding, prefix: &[usize]) -> Vec<f64> {
        let a = self.vocab.n_attr();
        let d = self.vocab.dim;
        let v = self.vocab.size();
        let mut f = vec![0.0; 3 * a + d + v + self.max_len];
        match &emb.z_init {
            None => f[..a].copy_from_slice(&emb.attrs),
            Some(z) => {
                f[a..2 * a].copy_from_slice(&emb.attrs);
                f[2 * a..2 * a + d].copy_from_slice(z);
            }
        }
        let base = 2 * a + d;
        if let Some(&last) = prefix.last() {
            f[base + last] = 1.0;
        }
        f[base + v + prefix.len().min(self.max_len - 1)] = 1.0;
        let bag = base + v + self.max_len;
        for &t in prefix.iter().filter(|&&t| t < a) {
            f[bag + t] += 1.0;
        }
        f
    }

    pub fn logits(&self, params: &ParamVector, emb: &PromptEmbedding, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(gradcore::mlp_forward(params, &self.features(emb, prefix), &self.mlp)?)
    }

    /// Next-token log-probabilities after `prefix`.
    pub fn log_probs(&self, params: &ParamVector, emb: &PromptEmbedding, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(gradcore::log_softmax_row(&self.logits(params, emb, prefix)?))
    }

    pub fn sample_sequence(
        &self,
        params: &ParamVector,
        emb: &PromptEmbedding,
        cfg: &SamplingConfig,
        max_len: usize,
        rng: &mut Rng,
    ) -> Result<ReasoningSequence> {
        cfg.validate()?;
        if max_len > self.max_len {
            return Err(ArError::TooLong { len: max_len, max: self.max_len });
        }
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        while tokens.len() < max_len {
            let logits = self.logits(params, emb, &tokens)?;
            let tok = sample_token(&logits, cfg, rng);
            logprobs.push(gradcore::log_softmax_row(&logits)[tok]);
            tokens.push(tok);
            if tok == self.vocab.end() {
                break;
            }
        }
        let format_valid = self.vocab.format_valid(&tokens);
        Ok(ReasoningSequence { tokens, logprobs, format_valid })
    }

    /// Log-probability of each token of `tokens` given its prefix.
    pub fn sequence_logprob(&self, params: &ParamVector, emb: &PromptEmbedding, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        (0..tokens.len())
            .map(|i| Ok(self.log_probs(params, emb, &tokens[..i])?[tokens[i]]))
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab.size()) {
            return Err(ArError::OutOfVocabulary(bad));
        }
        if tokens.len() > self.max_len {
            return Err(ArError::TooLong { len: tokens.len(), max: self.max_len });
        }
        Ok(())
    }

    /// Stacks one feature row per token position across `seqs`, returning
    /// the feature matrix and the token to score on each row.
    pub fn batch_rows(&self, seqs: &[(&PromptEmbedding, &[usize])]) -> Result<(Tensor, Vec<usize>)> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (emb, toks) in seqs {
            self.check_tokens(toks)?;
            for i in 0..toks.len() {
                rows.push(self.features(emb, &toks[..i]));
                targets.push(toks[i]);
            }
        }
        let width = self.mlp.input_width();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        Ok((Tensor::new(targets.len(), width, data), targets))
    }

    /// Untaped log-probabilities for [`ArHead::batch_rows`] output.
    pub fn batch_logprobs(&self, params: &ParamVector, features: &Tensor, targets: &[usize]) -> Result<Vec<f64>> {
        let ls = gradcore::log_softmax(&self.mlp.forward(params, features)?);
        Ok(targets.iter().enumerate().map(|(i, &t)| ls.get(i, t)).collect())
    }

    /// Taped column of log-probabilities for [`ArHead::batch_rows`] output.
    pub fn tape_logprobs(&self, tape: &mut Tape, vars: &[Var], features: &Tensor, targets: &[usize]) -> Var {
        let x = tape.constant(features.clone());
        let logits = self.mlp.forward_tape(tape, vars, x);
        let ls = tape.log_softmax(logits);
        tape.gather(ls, targets.to_vec())
    }

    /// Copies the first-layer weights of the request slot into the
    /// refinement slot, so refinement starts from the plain policy.
    pub fn mirror_request_slot(&self, params: &mut ParamVector) {
        let a = self.vocab.n_attr();
        let seg = self.mlp.weight_segment(0);
        let cols = params.layout.segments[seg].cols;
        let w = params.segment_mut(seg);
        let (src, dst) = w.split_at_mut(a * cols);
        dst[..a * cols].copy_from_slice(src);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::SeedableRng;

    fn head(hidden: usize) -> (ArHead, ParamVector) {
        let mut layout = Layout::default();
        let h = ArHead::register(&mut layout, Vocabulary::new(2), 8, hidden);
        let mut p = ParamVector::zeros(layout);
        h.mlp.init(&mut p, &mut Rng::seed_from_u64(3));
        (h, p)
    }

    fn emb(h: &ArHead) -> PromptEmbedding {
        let c = [AttributePredicate::primitive(PredicateKind::HalfPlane, 0, 2)];
        h.embed(&c, None)
    }

    #[test]
    fn vocabulary_is_dense_and_round_trips() {
        let v = Vocabulary::new(2);
        assert_eq!(v.size(), 36);
        for t in 0..v.n_attr() {
            let p = v.predicate(t).unwrap();
            assert_eq!(v.token_for(&p), Some(t));
        }
        assert_eq!(v.predicate(v.begin()), None);
    }

    #[test]
    fn format_rules() {
        let v = Vocabulary::new(2);
        let seq = |tokens: Vec<usize>| ReasoningSequence {
            format_valid: v.format_valid(&tokens),
            logprobs: vec![0.0; tokens.len()],
            tokens,
        };
        assert_eq!(format_penalty(&seq(vec![v.begin(), 3, v.end()])), 0.0);
        assert_eq!(format_penalty(&seq(vec![3, v.end()])), -0.5);
        assert_eq!(format_penalty(&seq(vec![])), -0.5);
        assert_eq!(format_penalty(&seq(vec![v.begin(), v.begin(), v.end()])), -0.5);
        assert_eq!(format_penalty(&seq(vec![v.begin(), v.sep(), 1, v.end()])), 0.0);
    }

    #[test]
    fn k3_values() {
        assert_eq!(k3_kl(-1.3, -1.3), 0.0);
        assert!((k3_kl(0.0, 2f64.ln()) - 0.306_852_819_440_054_7).abs() < 1e-12);
        assert!((k3_kl(0.0, 0.5f64.ln()) - 0.193_147_180_559_945_3).abs() < 1e-12);
        assert!(k3_kl(-3.0, -0.1) > 0.0 && k3_kl(-0.1, -3.0) > 0.0);
    }

    #[test]
    fn uniform_logits_give_minus_log_v() {
        let (h, mut p) = head(16);
        p.values.iter_mut().for_each(|v| *v = 0.0);
        let toks = [h.vocab.begin(), 5, h.vocab.end()];
        for lp in h.sequence_logprob(&p, &emb(&h), &toks).unwrap() {
            assert!((lp + (36f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn two_way_softmax_by_hand() {
        let lp = gradcore::log_softmax_row(&[3f64.ln(), 0.0]);
        assert!((lp[0] - 0.75f64.ln()).abs() < 1e-15);
        assert!((lp[0] + 0.2877).abs() < 1e-4);
    }

    #[test]
    fn rescoring_is_bitwise_equal() {
        let (h, p) = head(32);
        let e = emb(&h);
        let mut rng = stream(5, &[]);
        for _ in 0..50 {
            let s = h.sample_sequence(&p, &e, &SamplingConfig::default(), 8, &mut rng).unwrap();
            assert_eq!(h.sequence_logprob(&p, &e, &s.tokens).unwrap(), s.logprobs);
            let (f, t) = h.batch_rows(&[(&e, &s.tokens)]).unwrap();
            assert_eq!(h.batch_logprobs(&p, &f, &t).unwrap(), s.logprobs);
            assert!(s.logprobs.iter().all(|&l| l <= 0.0));
        }
    }

    #[test]
    fn taped_logprobs_match_plain() {
        let (h, p) = head(16);
        let e = emb(&h);
        let refine = h.embed(&[AttributePredicate::primitive(PredicateKind::CoordBand, 2, 2)], Some(&[0.3, -1.0]));
        let toks = [h.vocab.begin(), 1, 9, h.vocab.end()];
        let (f, t) = h.batch_rows(&[(&e, &toks), (&refine, &toks[..2])]).unwrap();
        let plain = h.batch_logprobs(&p, &f, &t).unwrap();
        let mut taped = Vec::new();
        gradcore::value_and_grad(&p, |tape, vars| {
            let c = h.tape_logprobs(tape, vars, &f, &t);
            taped = tape.value(c).data.clone();
            tape.sum(c)
        })
        .unwrap();
        assert_eq!(plain, taped);
    }

    #[test]
    fn distributions_normalize_at_every_position() {
        let (h, p) = head(32);
        let e = emb(&h);
        let toks = [h.vocab.begin(), 3, 17, 30, 2];
        for i in 0..toks.len() {
            let s: f64 = h.log_probs(&p, &e, &toks[..i]).unwrap().iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn out_of_vocabulary_rejected() {
        let (h, p) = head(8);
        assert!(matches!(h.sequence_logprob(&p, &emb(&h), &[0, 99]), Err(ArError::OutOfVocabulary(99))));
    }

    #[test]
    fn max_len_one_is_single_invalid_token() {
        let (h, p) = head(8);
        let s = h.sample_sequence(&p, &emb(&h), &SamplingConfig::default(), 1, &mut stream(1, &[])).unwrap();
        assert_eq!(s.len(), 1);
        assert!(!s.format_valid);
    }

    #[test]
    fn greedy_is_deterministic_and_temperature_invariant() {
        let (h, p) = head(32);
        let e = emb(&h);
        let g = SamplingConfig { greedy: true, ..Default::default() };
        let a = h.sample_sequence(&p, &e, &g, 8, &mut stream(1, &[])).unwrap();
        let b = h.sample_sequence(&p, &e, &g, 8, &mut stream(2, &[])).unwrap();
        assert_eq!(a, b);
        let logits = h.logits(&p, &e, &[]).unwrap();
        let scaled: Vec<f64> = logits.iter().map(|l| l / 0.01).collect();
        let mut rng = stream(0, &[]);
        assert_eq!(sample_token(&logits, &g, &mut rng), sample_token(&scaled, &g, &mut rng));
    }

    #[test]
    fn unshaped_sampling_matches_softmax_frequencies() {
        let logits = [0.3, -1.2, 1.1, 0.0, -0.4];
        let probs: Vec<f64> = gradcore::log_softmax_row(&logits).iter().map(|l| l.exp()).collect();
        let cfg = SamplingConfig { temperature: 1.0, top_p: 1.0, greedy: false };
        let n = 100_000;
        let mut counts = [0usize; 5];
        let mut rng = stream(11, &[]);
        for _ in 0..n {
            counts[sample_token(&logits, &cfg, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sd, "count {c} vs p {p}");
        }
    }

    #[test]
    fn nucleus_keeps_smallest_covering_set() {
        // probabilities 0.5, 0.3, 0.2 -> top_p 0.8 keeps the first two
        let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let cfg = SamplingConfig { temperature: 1.0, top_p: 0.8, greedy: false };
        let mut rng = stream(2, &[]);
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            counts[sample_token(&logits, &cfg, &mut rng)] += 1;
        }
        assert_eq!(counts[2], 0);
        let frac = counts[0] as f64 / 20_000.0;
        assert!((frac - 0.625).abs() < 0.02);
    }

    #[test]
    fn k3_mean_tracks_exact_kl() {
        let lt = gradcore::log_softmax_row(&[0.2, 1.0, -0.5, 0.3]);
        let lr = gradcore::log_softmax_row(&[0.0, 0.4, 0.1, 0.9]);
        let exact: f64 = lt.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b)).sum();
        let cfg = SamplingConfig { temperature: 1.0, top_p: 1.0, greedy: false };
        let mut rng = stream(4, &[]);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let t = sample_token(&lt, &cfg, &mut rng);
                k3_kl(lt[t], lr[t])
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mean {mean} exact {exact} se {se}");
    }

    #[test]
    fn mirrored_slot_makes_modes_agree() {
        let (h, mut p) = head(16);
        h.mirror_request_slot(&mut p);
        let c = [AttributePredicate::primitive(PredicateKind::RadiusBand, 4, 2)];
        let plain = h.embed(&c, None);
        let refine = h.embed(&c, Some(&[0.0, 0.0]));
        assert_eq!(h.logits(&p, &plain, &[]).unwrap(), h.logits(&p, &refine, &[]).unwrap());
    }
}
