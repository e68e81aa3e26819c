//! Small differentiable next-token policy.
//!
//! The trunk summarizes `(observation, context tokens)` as
//!
//! ```text
//! x = [ mean(E[c_0..c_n]) ; E[c_n] ; P · obs ]
//! a = softplus(W_h x + b_h)
//! ```
//!
//! where the context is the question prompt followed by the solution prefix.
//! An empty context uses zeros for both embedding slots. Next-token logits
//! are `W_o a + b_o`; the ORM and PRM heads are `sigmoid(w · a + b)` read at
//! the last context token.
//!
//! All gradients are hand-written; `objectives::check_gradients` verifies
//! them against central finite differences.

use std::io::{Read, Write};
use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{Grammar, GrammarState, Phase};
use crate::seeds;
use crate::trace::{ReasoningTrace, Step};
use crate::vocab::{Token, Vocabulary};

const CHECKPOINT_MAGIC: &[u8; 8] = b"PDPOCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub num_symbols: usize,
    pub obs_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl PolicyConfig {
    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.num_symbols)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }

    /// Width of the trunk input: mean embedding, last embedding and the
    /// projected observation.
    pub fn input_width(&self) -> usize {
        2 * self.embed_dim + self.obs_dim
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embedding: Range<usize>,
    pub obs_projection: Range<usize>,
    pub hidden_weight: Range<usize>,
    pub hidden_bias: Range<usize>,
    pub output_weight: Range<usize>,
    pub output_bias: Range<usize>,
    pub orm_weight: Range<usize>,
    pub orm_bias: Range<usize>,
    pub prm_weight: Range<usize>,
    pub prm_bias: Range<usize>,
    pub total: usize,
}

impl Layout {
    fn new(c: &PolicyConfig) -> Self {
        let vocab = c.vocab().size();
        let e = c.embed_dim;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let embedding = take(vocab * e);
        let obs_projection = take(c.obs_dim * c.obs_dim);
        let hidden_weight = take(c.hidden * c.input_width());
        let hidden_bias = take(c.hidden);
        let output_weight = take(vocab * c.hidden);
        let output_bias = take(vocab);
        let orm_weight = take(c.hidden);
        let orm_bias = take(1);
        let prm_weight = take(c.hidden);
        let prm_bias = take(1);
        Self {
            embedding,
            obs_projection,
            hidden_weight,
            hidden_bias,
            output_weight,
            output_bias,
            orm_weight,
            orm_bias,
            prm_weight,
            prm_bias,
            total: at,
        }
    }

    /// Coordinates of a value head (weights and bias).
    pub fn head_range(&self, head: ValueHead) -> Vec<usize> {
        let (w, b) = match head {
            ValueHead::Orm => (&self.orm_weight, &self.orm_bias),
            ValueHead::Prm => (&self.prm_weight, &self.prm_bias),
        };
        w.clone().chain(b.clone()).collect()
    }

    /// Coordinates shared by next-token prediction (everything except heads).
    pub fn trunk_and_output(&self) -> Range<usize> {
        0..self.orm_weight.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueHead {
    Orm,
    Prm,
}

/// What the policy is conditioned on besides the solution prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    /// Pooled observation vector (dimension `obs_dim`).
    pub obs: Vec<f64>,
    /// Question prompt tokens, prepended to every prefix.
    pub question: Vec<Token>,
}

/// Total and per-token log-probabilities of a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqLogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    config: PolicyConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Frozen copy of a policy used as the preference-optimization reference.
#[derive(Debug, Clone)]
pub struct ReferenceSnapshot(Arc<Policy>);

impl ReferenceSnapshot {
    pub fn policy(&self) -> &Policy {
        &self.0
    }
}

pub fn snapshot_reference(policy: &Policy) -> ReferenceSnapshot {
    ReferenceSnapshot(Arc::new(policy.clone()))
}

struct Trunk {
    x: Vec<f64>,
    act: Vec<f64>,
}

/// Running summary of the context tokens.
#[derive(Clone)]
struct Summary {
    sum: Vec<f64>,
    tokens: Vec<Token>,
}

impl Policy {
    pub fn zeros(config: PolicyConfig) -> Self {
        let layout = config.layout();
        let params = vec![0.0; layout.total];
        Self { config, layout, params }
    }

    /// Gaussian initialization; value heads start at zero.
    pub fn random(config: PolicyConfig, seed: u64, scale: f64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = seeds::rng(seed);
        let width = config.input_width() as f64;
        let d = config.obs_dim as f64;
        let h = config.hidden as f64;
        let layout = p.layout.clone();
        let mut fill = |r: Range<usize>, std: f64, params: &mut Vec<f64>| {
            let n = Normal::new(0.0, std).expect("positive std");
            for i in r {
                params[i] = n.sample(&mut rng);
            }
        };
        fill(layout.embedding.clone(), scale, &mut p.params);
        fill(layout.obs_projection.clone(), scale / d.sqrt(), &mut p.params);
        fill(layout.hidden_weight.clone(), scale / width.sqrt(), &mut p.params);
        fill(layout.output_weight.clone(), scale / h.sqrt(), &mut p.params);
        p
    }

    pub fn from_params(config: PolicyConfig, params: Vec<f64>) -> Result<Self> {
        let layout = config.layout();
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch {
                expected: layout.total,
                found: params.len(),
            });
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn vocab(&self) -> Vocabulary {
        self.config.vocab()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn with_params(&self, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), self.params.len());
        Self { params, ..self.clone() }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteParameters)
        }
    }

    fn check_context(&self, ctx: &Context) -> Result<()> {
        if ctx.obs.len() != self.config.obs_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.obs_dim,
                found: ctx.obs.len(),
            });
        }
        Ok(())
    }

    // ---- forward pieces -------------------------------------------------

    fn project_obs(&self, obs: &[f64]) -> Vec<f64> {
        let d = self.config.obs_dim;
        let p = &self.params[self.layout.obs_projection.clone()];
        (0..d)
            .map(|r| p[r * d..(r + 1) * d].iter().zip(obs).map(|(w, x)| w * x).sum())
            .collect()
    }

    fn embedding(&self, t: Token) -> &[f64] {
        let e = self.config.embed_dim;
        let start = self.layout.embedding.start + t.index() * e;
        &self.params[start..start + e]
    }

    fn summary(&self, tokens: impl IntoIterator<Item = Token>) -> Summary {
        let mut s = Summary {
            sum: vec![0.0; self.config.embed_dim],
            tokens: Vec::new(),
        };
        for t in tokens {
            self.push(&mut s, t);
        }
        s
    }

    fn push(&self, s: &mut Summary, t: Token) {
        for (a, b) in s.sum.iter_mut().zip(self.embedding(t)) {
            *a += b;
        }
        s.tokens.push(t);
    }

    fn trunk(&self, pobs: &[f64], s: &Summary) -> Trunk {
        let e = self.config.embed_dim;
        let h = self.config.hidden;
        let w_in = self.config.input_width();
        let mut x = vec![0.0; w_in];
        if let Some(&last) = s.tokens.last() {
            let n = s.tokens.len() as f64;
            for (xi, si) in x[..e].iter_mut().zip(&s.sum) {
                *xi = si / n;
            }
            x[e..2 * e].copy_from_slice(self.embedding(last));
        }
        x[2 * e..].copy_from_slice(pobs);
        let w = &self.params[self.layout.hidden_weight.clone()];
        let b = &self.params[self.layout.hidden_bias.clone()];
        let act = (0..h)
            .map(|j| {
                let row = &w[j * w_in..(j + 1) * w_in];
                softplus(b[j] + row.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>())
            })
            .collect();
        Trunk { x, act }
    }

    fn output_logits(&self, act: &[f64]) -> Vec<f64> {
        let h = self.config.hidden;
        let w = &self.params[self.layout.output_weight.clone()];
        let b = &self.params[self.layout.output_bias.clone()];
        (0..self.vocab().size())
            .map(|t| b[t] + w[t * h..(t + 1) * h].iter().zip(act).map(|(w, a)| w * a).sum::<f64>())
            .collect()
    }

    fn head_logit(&self, act: &[f64], head: ValueHead) -> f64 {
        let (w, b) = self.head_params(head);
        b + w.iter().zip(act).map(|(w, a)| w * a).sum::<f64>()
    }

    fn head_params(&self, head: ValueHead) -> (&[f64], f64) {
        let (w, b) = match head {
            ValueHead::Orm => (&self.layout.orm_weight, &self.layout.orm_bias),
            ValueHead::Prm => (&self.layout.prm_weight, &self.layout.prm_bias),
        };
        (&self.params[w.clone()], self.params[b.start])
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `dL/dparams` given `dL/da` for one trunk evaluation.
    fn backprop_trunk(&self, obs: &[f64], s: &Summary, trunk: &Trunk, da: &[f64], grad: &mut [f64]) {
        let e = self.config.embed_dim;
        let h = self.config.hidden;
        let d = self.config.obs_dim;
        let w = &self.params[self.layout.hidden_weight.clone()];
        let w_in = self.config.input_width();
        let mut dx = vec![0.0; w_in];
        let hw = self.layout.hidden_weight.start;
        let hb = self.layout.hidden_bias.start;
        for j in 0..h {
            // softplus'(z) = sigmoid(z) = 1 - exp(-softplus(z))
            let dz = -da[j] * (-trunk.act[j]).exp_m1();
            if dz == 0.0 {
                continue;
            }
            grad[hb + j] += dz;
            let row = &w[j * w_in..(j + 1) * w_in];
            for m in 0..w_in {
                grad[hw + j * w_in + m] += dz * trunk.x[m];
                dx[m] += row[m] * dz;
            }
        }
        if let Some(&last) = s.tokens.last() {
            let n = s.tokens.len() as f64;
            let emb = self.layout.embedding.start;
            for &t in &s.tokens {
                for i in 0..e {
                    grad[emb + t.index() * e + i] += dx[i] / n;
                }
            }
            for i in 0..e {
                grad[emb + last.index() * e + i] += dx[e + i];
            }
        }
        let pr = self.layout.obs_projection.start;
        for r in 0..d {
            let g = dx[2 * e + r];
            if g == 0.0 {
                continue;
            }
            for c in 0..d {
                grad[pr + r * d + c] += g * obs[c];
            }
        }
    }

    /// Accumulates gradient for output logits `dlogits` at one position.
    fn backprop_logits(&self, obs: &[f64], s: &Summary, trunk: &Trunk, dlogits: &[f64], grad: &mut [f64]) {
        let h = self.config.hidden;
        let ow = self.layout.output_weight.start;
        let ob = self.layout.output_bias.start;
        let w = &self.params[self.layout.output_weight.clone()];
        let mut da = vec![0.0; h];
        for (t, &g) in dlogits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[ob + t] += g;
            for j in 0..h {
                grad[ow + t * h + j] += g * trunk.act[j];
                da[j] += w[t * h + j] * g;
            }
        }
        self.backprop_trunk(obs, s, trunk, &da, grad);
    }

    // ---- public API ----------------------------------------------------

    /// Next-token logits after `question ++ prefix`.
    pub fn next_token_logits(&self, ctx: &Context, prefix: &[Token]) -> Result<Vec<f64>> {
        self.check_finite()?;
        self.check_context(ctx)?;
        let s = self.summary(ctx.question.iter().chain(prefix).copied());
        let trunk = self.trunk(&self.project_obs(&ctx.obs), &s);
        Ok(self.output_logits(&trunk.act))
    }

    /// Grammar-masked next-token log-distribution at every position of
    /// `tokens`, teacher-forced after `question ++ prefix`. Disallowed tokens
    /// get `-inf`.
    pub fn teacher_forced_log_distributions(
        &self,
        ctx: &Context,
        grammar: &Grammar,
        prefix: &[Token],
        tokens: &[Token],
    ) -> Result<Vec<Vec<f64>>> {
        self.check_finite()?;
        self.check_context(ctx)?;
        let mut state = grammar.walk(prefix)?;
        let pobs = self.project_obs(&ctx.obs);
        let mut s = self.summary(ctx.question.iter().chain(prefix).copied());
        let mut out = Vec::with_capacity(tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            let mask = grammar.mask(state);
            if !mask.get(t.index()).copied().unwrap_or(false) {
                return Err(Error::GrammarViolation { position: prefix.len() + i, token: self.vocab().surface(t) });
            }
            let trunk = self.trunk(&pobs, &s);
            out.push(log_softmax(&self.output_logits(&trunk.act), Some(&mask)));
            self.push(&mut s, t);
            state = grammar.advance(state, t);
        }
        Ok(out)
    }

    /// Log-probability of `tokens` following `prefix`.
    ///
    /// With a grammar, each softmax runs over the grammar-allowed tokens and a
    /// disallowed token (in the prefix or the sequence) is an error.
    pub fn sequence_log_prob(
        &self,
        ctx: &Context,
        prefix: &[Token],
        tokens: &[Token],
        grammar: Option<&Grammar>,
    ) -> Result<SeqLogProb> {
        self.sequence_log_prob_impl(ctx, prefix, tokens, grammar, None)
    }

    /// As [`sequence_log_prob`](Self::sequence_log_prob), also adding
    /// `scale * d(total)/d(params)` into `grad`.
    pub fn sequence_log_prob_grad(
        &self,
        ctx: &Context,
        prefix: &[Token],
        tokens: &[Token],
        grammar: Option<&Grammar>,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<SeqLogProb> {
        self.sequence_log_prob_impl(ctx, prefix, tokens, grammar, Some((scale, grad)))
    }

    fn sequence_log_prob_impl(
        &self,
        ctx: &Context,
        prefix: &[Token],
        tokens: &[Token],
        grammar: Option<&Grammar>,
        mut grad: Option<(f64, &mut [f64])>,
    ) -> Result<SeqLogProb> {
        self.check_finite()?;
        self.check_context(ctx)?;
        let vocab = self.vocab();
        let mut state = match grammar {
            Some(g) => Some(g.walk(prefix)?),
            None => None,
        };
        let pobs = self.project_obs(&ctx.obs);
        let mut s = self.summary(ctx.question.iter().chain(prefix).copied());
        let mut per_token = Vec::with_capacity(tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            if !vocab.contains(t) {
                return Err(Error::UnknownToken(format!("id {}", t.0)));
            }
            let mask = match (grammar, state) {
                (Some(g), Some(st)) => {
                    if !g.is_allowed(st, t) {
                        return Err(Error::GrammarViolation {
                            position: prefix.len() + i,
                            token: vocab.surface(t),
                        });
                    }
                    Some(g.mask(st))
                }
                _ => None,
            };
            let trunk = self.trunk(&pobs, &s);
            let logits = self.output_logits(&trunk.act);
            let probs = softmax(&logits, mask.as_deref());
            per_token.push(probs[t.index()].ln());
            if let Some((scale, g)) = grad.as_mut() {
                // d log p_t / d logits = onehot(t) - p (zero outside the mask).
                let dlogits: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| *scale * (f64::from(j == t.index()) - p))
                    .collect();
                self.backprop_logits(&ctx.obs, &s, &trunk, &dlogits, g);
            }
            if let (Some(g), Some(st)) = (grammar, state) {
                state = Some(g.advance(st, t));
            }
            self.push(&mut s, t);
        }
        Ok(SeqLogProb {
            total: per_token.iter().sum(),
            per_token,
        })
    }

    fn check_head_prefix(&self, prefix: &[Token], head: ValueHead) -> Result<()> {
        let vocab = self.vocab();
        match prefix.last() {
            Some(t) if *t == vocab.eos() => Ok(()),
            _ => {
                let _ = head;
                Err(Error::MisalignedPrefix)
            }
        }
    }

    /// Value-head score in `(0, 1)` read at the last prefix token, which must
    /// be a step delimiter.
    pub fn value_head_score(&self, ctx: &Context, prefix: &[Token], head: ValueHead) -> Result<f64> {
        Ok(sigmoid(self.value_head_logit(ctx, prefix, head)?))
    }

    /// Pre-sigmoid value-head output.
    pub fn value_head_logit(&self, ctx: &Context, prefix: &[Token], head: ValueHead) -> Result<f64> {
        self.check_finite()?;
        self.check_context(ctx)?;
        self.check_head_prefix(prefix, head)?;
        let s = self.summary(ctx.question.iter().chain(prefix).copied());
        let trunk = self.trunk(&self.project_obs(&ctx.obs), &s);
        Ok(self.head_logit(&trunk.act, head))
    }

    /// Returns the head score and adds `scale * d(logit)/d(params)` to `grad`.
    pub fn value_head_logit_grad(
        &self,
        ctx: &Context,
        prefix: &[Token],
        head: ValueHead,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_finite()?;
        self.check_context(ctx)?;
        self.check_head_prefix(prefix, head)?;
        let s = self.summary(ctx.question.iter().chain(prefix).copied());
        let trunk = self.trunk(&self.project_obs(&ctx.obs), &s);
        let logit = self.head_logit(&trunk.act, head);
        let (w, _) = self.head_params(head);
        let (wr, br) = match head {
            ValueHead::Orm => (self.layout.orm_weight.start, self.layout.orm_bias.start),
            ValueHead::Prm => (self.layout.prm_weight.start, self.layout.prm_bias.start),
        };
        grad[br] += scale;
        for j in 0..self.config.hidden {
            grad[wr + j] += scale * trunk.act[j];
        }
        let da: Vec<f64> = w.iter().map(|w| w * scale).collect();
        self.backprop_trunk(&ctx.obs, &s, &trunk, &da, grad);
        Ok(sigmoid(logit))
    }

    /// Samples a continuation of `prefix` step by step until an answer step
    /// completes or the trace holds `max_steps` steps.
    ///
    /// `temperature == 0` decodes greedily (ties go to the lowest token id).
    /// Returns the appended steps and their log-probability under the
    /// grammar-masked policy at temperature 1.
    pub fn sample_steps<R: Rng + ?Sized>(
        &self,
        ctx: &Context,
        grammar: &Grammar,
        prefix: &[Step],
        temperature: f64,
        max_steps: usize,
        rng: &mut R,
    ) -> Result<(Vec<Step>, f64)> {
        self.check_finite()?;
        self.check_context(ctx)?;
        let vocab = self.vocab();
        let prefix_tokens: Vec<Token> = prefix.iter().flat_map(|s| s.tokens().iter().copied()).collect();
        let mut state = grammar.walk(&prefix_tokens)?;
        let pobs = self.project_obs(&ctx.obs);
        let mut s = self.summary(ctx.question.iter().chain(&prefix_tokens).copied());
        let mut steps = Vec::new();
        let mut current = Vec::new();
        let mut log_prob = 0.0;
        while !state.is_finished() && !(state.at_step_start() && state.completed >= max_steps) {
            let allowed = grammar.allowed(state);
            if allowed.is_empty() {
                break;
            }
            let t = if allowed.len() == 1 {
                allowed[0]
            } else {
                let trunk = self.trunk(&pobs, &s);
                let logits = self.output_logits(&trunk.act);
                let mask = grammar.mask(state);
                let probs = softmax(&logits, Some(&mask));
                let t = if temperature == 0.0 {
                    argmax_masked(&logits, &mask)
                } else if temperature == 1.0 {
                    sample_index(&probs, rng)
                } else {
                    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                    sample_index(&softmax(&scaled, Some(&mask)), rng)
                };
                log_prob += probs[t].ln();
                Token(t as u32)
            };
            current.push(t);
            state = grammar.advance(state, t);
            self.push(&mut s, t);
            if t == vocab.eos() {
                steps.push(Step::new(&vocab, std::mem::take(&mut current))?);
            }
        }
        Ok((steps, log_prob))
    }

    /// Samples a complete trace from the empty prefix.
    pub fn sample_trace(
        &self,
        ctx: &Context,
        grammar: &Grammar,
        episode_id: &str,
        temperature: f64,
        rng_seed: u64,
        max_steps: usize,
    ) -> Result<(ReasoningTrace, f64)> {
        let mut rng = seeds::rng(rng_seed);
        let (steps, lp) = self.sample_steps(ctx, grammar, &[], temperature, max_steps, &mut rng)?;
        Ok((ReasoningTrace::from_steps_lenient(&self.vocab(), episode_id, steps)?, lp))
    }

    /// Exact distribution over the next complete step after `prefix`, under
    /// the grammar mask. Steps come out in token-id order.
    pub fn step_distribution(&self, ctx: &Context, grammar: &Grammar, prefix: &[Token]) -> Result<Vec<(Step, f64)>> {
        self.check_finite()?;
        self.check_context(ctx)?;
        let state = grammar.walk(prefix)?;
        if state.phase != Phase::StepStart {
            return Ok(Vec::new());
        }
        let pobs = self.project_obs(&ctx.obs);
        let s = self.summary(ctx.question.iter().chain(prefix).copied());
        let mut out = Vec::new();
        self.expand_step(grammar, state, &pobs, s, Vec::new(), 1.0, &mut out)?;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn expand_step(
        &self,
        grammar: &Grammar,
        state: GrammarState,
        pobs: &[f64],
        s: Summary,
        partial: Vec<Token>,
        prob: f64,
        out: &mut Vec<(Step, f64)>,
    ) -> Result<()> {
        let vocab = self.vocab();
        if !partial.is_empty() && partial.last() == Some(&vocab.eos()) {
            out.push((Step::new(&vocab, partial)?, prob));
            return Ok(());
        }
        let allowed = grammar.allowed(state);
        let probs = if allowed.len() > 1 {
            let trunk = self.trunk(pobs, &s);
            softmax(&self.output_logits(&trunk.act), Some(&grammar.mask(state)))
        } else {
            let mut p = vec![0.0; vocab.size()];
            for t in &allowed {
                p[t.index()] = 1.0;
            }
            p
        };
        for t in allowed {
            let mut s2 = s.clone();
            self.push(&mut s2, t);
            let mut p2 = partial.clone();
            p2.push(t);
            self.expand_step(grammar, grammar.advance(state, t), pobs, s2, p2, prob * probs[t.index()], out)?;
        }
        Ok(())
    }

    // ---- checkpoints ----------------------------------------------------

    /// Writes the versioned checkpoint.
    ///
    /// Layout (all little-endian): magic `PDPOCKPT`, `u32` version, `u32`
    /// vocabulary size, `u32` symbol count, `u32` observation dim, `u32`
    /// embedding dim, `u32` hidden width, `u64` parameter count, then the
    /// parameters as `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            CHECKPOINT_VERSION,
            self.vocab().size() as u32,
            c.num_symbols as u32,
            c.obs_dim as u32,
            c.embed_dim as u32,
            c.hidden as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut u32s = [0u32; 6];
        for v in &mut u32s {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let [version, vocab_size, num_symbols, obs_dim, embed_dim, hidden] = u32s;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = PolicyConfig {
            num_symbols: num_symbols as usize,
            obs_dim: obs_dim as usize,
            embed_dim: embed_dim as usize,
            hidden: hidden as usize,
        };
        if config.vocab().size() != vocab_size as usize {
            return Err(Error::Checkpoint("vocabulary size disagrees with symbol count".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        if count != config.num_params() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, header says {count}",
                config.num_params()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            params.push(f64::from_le_bytes(b8));
        }
        Self::from_params(config, params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

/// `ln(1 + e^x)`, computed without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Log-softmax over the entries where `mask` is true; masked-out entries
/// get `-inf`. Allowed entries stay finite for finite logits.
pub fn log_softmax(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let on = |i: usize| mask.is_none_or(|m| m[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| on(*i))
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().enumerate().filter(|(i, _)| on(*i)).map(|(_, l)| (l - max).exp()).sum();
    let lse = max + z.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, l)| if on(i) { l - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// Softmax over the entries where `mask` is true (all entries without a
/// mask); masked-out entries get probability zero.
pub fn softmax(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let on = |i: usize| mask.is_none_or(|m| m[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| on(*i))
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, l)| if on(i) { (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

fn argmax_masked(logits: &[f64], mask: &[bool]) -> usize {
    let mut best = None;
    for (i, &l) in logits.iter().enumerate() {
        if mask[i] && best.is_none_or(|(_, b)| l > b) {
            best = Some((i, l));
        }
    }
    best.expect("grammar leaves at least one token").0
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::DecodeMode;

    fn small() -> PolicyConfig {
        PolicyConfig { num_symbols: 4, obs_dim: 5, embed_dim: 3, hidden: 6 }
    }

    fn ctx(c: &PolicyConfig, seed: u64) -> Context {
        let mut rng = seeds::rng(seed);
        Context {
            obs: (0..c.obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            question: vec![c.vocab().value(1)],
        }
    }

    fn grammar(c: &PolicyConfig) -> Grammar {
        let v = c.vocab();
        Grammar::new(v, vec![v.value(0), v.value(2), v.value(3)], DecodeMode::Reasoning).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_logits() {
        let c = small();
        let p = Policy::zeros(c);
        let logits = p.next_token_logits(&ctx(&c, 1), &[]).unwrap();
        assert!(logits.iter().all(|l| *l == logits[0]));
    }

    #[test]
    fn softmax_normalizes_for_random_params() {
        let c = small();
        let g = grammar(&c);
        for seed in 0..100 {
            let p = Policy::random(c, seed, 1.5);
            let x = ctx(&c, seed + 1000);
            let logits = p.next_token_logits(&x, &[]).unwrap();
            let full = softmax(&logits, None);
            assert!((full.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(full.iter().all(|q| *q > 0.0));
            let masked = softmax(&logits, Some(&g.mask(g.start())));
            assert!((masked.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_context_uses_zero_summary() {
        let c = small();
        let p = Policy::random(c, 3, 1.0);
        let mut x = ctx(&c, 2);
        x.question.clear();
        // With no context tokens the embedding slots are zero, so the logits
        // depend on the observation alone; the embedding table is irrelevant.
        let a = p.next_token_logits(&x, &[]).unwrap();
        let mut q = p.clone();
        for i in q.layout().embedding.clone() {
            q.params_mut()[i] = 7.0;
        }
        assert_eq!(a, q.next_token_logits(&x, &[]).unwrap());
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let c = small();
        let mut p = Policy::zeros(c);
        p.params_mut()[0] = f64::NAN;
        assert!(matches!(p.next_token_logits(&ctx(&c, 0), &[]), Err(Error::NonFiniteParameters)));
    }

    #[test]
    fn uniform_policy_sequence_log_prob() {
        let c = PolicyConfig { num_symbols: 4, obs_dim: 2, embed_dim: 2, hidden: 3 };
        let v = c.vocab();
        let p = Policy::zeros(c);
        let x = Context { obs: vec![0.0; 2], question: vec![] };
        let all = (0..4).map(|i| v.value(i)).collect();
        let g = Grammar::new(v, all, DecodeMode::Reasoning).unwrap();
        // key, value and answer choice each have exactly 4 allowed tokens; the
        // HOP/ANS decisions are 2-way and delimiters are forced.
        let toks = [v.hop(), v.key(1), v.value(2), v.eos(), v.ans(), v.value(3), v.eos()];
        let lp = p.sequence_log_prob(&x, &[], &toks, Some(&g)).unwrap();
        let four_way: f64 = [1, 2, 5].iter().map(|&i| lp.per_token[i]).sum();
        assert!((four_way + 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((four_way - (-4.1589)).abs() < 1e-4);
        assert_eq!(lp.per_token[3], 0.0);
        assert!((lp.total - (four_way - 2.0 * 2f64.ln())).abs() < 1e-12);
        let unmasked = p.sequence_log_prob(&x, &[], &toks[..3], None).unwrap();
        assert!((unmasked.total + 3.0 * (v.size() as f64).ln()).abs() < 1e-12);
        let one = p.sequence_log_prob(&x, &[v.hop()], &[v.key(3)], Some(&g)).unwrap();
        assert_eq!(one.total, one.per_token[0]);
    }

    #[test]
    fn grammar_violation_is_reported() {
        let c = small();
        let v = c.vocab();
        let p = Policy::random(c, 0, 1.0);
        let err = p
            .sequence_log_prob(&ctx(&c, 0), &[], &[v.hop(), v.value(0)], Some(&grammar(&c)))
            .unwrap_err();
        assert!(matches!(err, Error::GrammarViolation { position: 1, .. }));
    }

    #[test]
    fn log_prob_matches_stepwise_recomputation() {
        let c = small();
        let g = grammar(&c);
        for seed in 0..100 {
            let p = Policy::random(c, seed, 1.0);
            let x = ctx(&c, seed);
            let (trace, _) = p.sample_trace(&x, &g, "t", 1.0, seed, 5).unwrap();
            let toks = trace.tokens();
            let lp = p.sequence_log_prob(&x, &[], &toks, Some(&g)).unwrap();
            // Oracle: recompute each conditional from raw logits and an
            // explicit allowed-token list.
            let mut total = 0.0;
            let mut state = g.start();
            for i in 0..toks.len() {
                let logits = p.next_token_logits(&x, &toks[..i]).unwrap();
                let allowed = g.allowed(state);
                let lse = allowed.iter().map(|t| logits[t.index()].exp()).sum::<f64>().ln();
                total += logits[toks[i].index()] - lse;
                state = g.advance(state, toks[i]);
            }
            assert!((lp.total - total).abs() < 1e-10);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_grammar_safe() {
        let c = small();
        let g = grammar(&c);
        let p = Policy::random(c, 9, 2.0);
        let x = ctx(&c, 4);
        for seed in 0..50 {
            let a = p.sample_trace(&x, &g, "s", 1.0, seed, 4).unwrap();
            let b = p.sample_trace(&x, &g, "s", 1.0, seed, 4).unwrap();
            assert_eq!(a, b);
            assert!(g.walk(&a.0.tokens()).is_ok());
            assert!(a.0.num_steps() <= 4);
            if a.0.is_answered() {
                crate::trace::segment_trace(&c.vocab(), "s", &a.0.tokens()).unwrap();
            }
        }
        let g0 = p.sample_trace(&x, &g, "s", 0.0, 1, 4).unwrap();
        let g1 = p.sample_trace(&x, &g, "s", 0.0, 2, 4).unwrap();
        assert_eq!(g0, g1);
    }

    #[test]
    fn value_heads() {
        let c = small();
        let v = c.vocab();
        let p = Policy::random(c, 1, 1.0);
        let x = ctx(&c, 1);
        let prefix = [v.hop(), v.key(0), v.value(1), v.eos()];
        assert_eq!(p.value_head_score(&x, &prefix, ValueHead::Prm).unwrap(), 0.5);
        assert!(matches!(
            p.value_head_score(&x, &prefix[..3], ValueHead::Prm),
            Err(Error::MisalignedPrefix)
        ));
        for seed in 0..1000 {
            let mut q = Policy::random(c, seed, 1.0);
            let mut rng = seeds::rng(seed);
            for i in q.layout().head_range(ValueHead::Orm) {
                q.params_mut()[i] = rng.random_range(-1.0..1.0);
            }
            let r = q.value_head_score(&x, &prefix, ValueHead::Orm).unwrap();
            assert!(r > 0.0 && r < 1.0);
        }
    }

    #[test]
    fn snapshot_is_isolated_from_updates() {
        let c = small();
        let v = c.vocab();
        let mut p = Policy::random(c, 5, 1.0);
        let snap = snapshot_reference(&p);
        let x = ctx(&c, 5);
        let toks = [v.ans(), v.value(2), v.eos()];
        let before = snap.policy().sequence_log_prob(&x, &[], &toks, None).unwrap();
        assert_eq!(before, p.sequence_log_prob(&x, &[], &toks, None).unwrap());
        for w in p.params_mut() {
            *w += 0.1;
        }
        assert_eq!(before, snap.policy().sequence_log_prob(&x, &[], &toks, None).unwrap());
    }

    #[test]
    fn step_distribution_sums_to_one() {
        let c = small();
        let g = grammar(&c);
        let p = Policy::random(c, 2, 1.5);
        let dist = p.step_distribution(&ctx(&c, 3), &g, &[]).unwrap();
        assert_eq!(dist.len(), 4 * 4 + 3);
        assert!((dist.iter().map(|(_, q)| q).sum::<f64>() - 1.0).abs() < 1e-12);
        for (step, q) in &dist {
            let lp = p.sequence_log_prob(&ctx(&c, 3), &[], step.tokens(), Some(&g)).unwrap();
            assert!((lp.total.exp() - q).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let c = small();
        let p = Policy::random(c, 77, 1.0);
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 6 * 4 + 8 + 8 * c.num_params());
        let q = Policy::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Policy::read_checkpoint(bad.as_slice()).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(3.0) - sigmoid(3.0).ln()).abs() < 1e-15);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
    }
}
