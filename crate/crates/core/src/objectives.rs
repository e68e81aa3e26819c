//! Training losses with exact gradients, plus a finite-difference checker.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::Grammar;
use crate::policy::{log_sigmoid, sigmoid, Context, Policy, ReferenceSnapshot, ValueHead};
use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Hard,
    Soft,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            _ => Err(Error::Config(format!("label_mode must be hard or soft, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub mu: f64,
    pub label_mode: LabelMode,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 0.1, mu: 0.1, label_mode: LabelMode::Hard }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be finite and positive, got {}", self.beta)));
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::Config(format!("mu must be finite and positive, got {}", self.mu)));
        }
        Ok(())
    }
}

/// Preference label for step `a` over step `b` from their estimated
/// correctness. Hard ties have no label.
pub fn preference_label(p_a: f64, p_b: f64, config: &DpoConfig) -> Option<f64> {
    match config.label_mode {
        LabelMode::Hard if p_a > p_b => Some(1.0),
        LabelMode::Hard if p_a < p_b => Some(0.0),
        LabelMode::Hard => None,
        LabelMode::Soft => Some(sigmoid((p_a - p_b) / config.mu)),
    }
}

/// Bradley-Terry probability that the first candidate is preferred.
pub fn preference_prob(reward_diff: f64) -> f64 {
    sigmoid(reward_diff)
}

/// `beta * [(theta_a - ref_a) - (theta_b - ref_b)]` from step log-probabilities.
pub fn reward_diff_from_log_probs(beta: f64, theta_a: f64, ref_a: f64, theta_b: f64, ref_b: f64) -> f64 {
    beta * ((theta_a - ref_a) - (theta_b - ref_b))
}

/// `-[alpha ln s(d) + (1 - alpha) ln s(-d)]` and its derivative in `d`.
pub fn preference_loss(diff: f64, alpha: f64) -> (f64, f64) {
    let loss = -(alpha * log_sigmoid(diff) + (1.0 - alpha) * log_sigmoid(-diff));
    (loss, sigmoid(diff) - alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Number of batch items that entered the mean.
    pub count: usize,
}

impl LossReport {
    fn check(self, num_params: usize) -> Result<Self> {
        debug_assert_eq!(self.gradient.len(), num_params);
        if !self.value.is_finite() || self.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteParameters);
        }
        Ok(self)
    }
}

/// Evaluates `f` on every item in parallel, then sums values and gradients
/// in item order so results do not depend on thread scheduling.
fn reduce_ordered<T, F>(items: &[T], num_params: usize, f: F) -> Result<(f64, Vec<f64>)>
where
    T: Sync,
    F: Fn(&T, &mut [f64]) -> Result<f64> + Sync,
{
    let parts = items
        .par_iter()
        .map(|item| {
            let mut g = vec![0.0; num_params];
            let v = f(item, &mut g)?;
            Ok((v, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut grad = vec![0.0; num_params];
    for (v, g) in parts {
        total += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

/// Number of positions in `tokens` (after `prefix`) where the grammar leaves
/// more than one choice. Forced tokens carry no information.
pub fn decision_count(grammar: &Grammar, prefix: &[Token], tokens: &[Token]) -> Result<usize> {
    let mut state = grammar.walk(prefix)?;
    let mut n = 0;
    for &t in tokens {
        if grammar.allowed(state).len() > 1 {
            n += 1;
        }
        state = grammar.advance(state, t);
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub ctx: Context,
    pub grammar: Grammar,
    pub tokens: Vec<Token>,
}

/// Mean negative log-likelihood per decision token under the grammar-masked
/// softmax, pooled over the batch.
pub fn sft_loss(policy: &Policy, batch: &[SftExample]) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut decisions = 0;
    for ex in batch {
        decisions += decision_count(&ex.grammar, &[], &ex.tokens)?;
    }
    let n = decisions.max(1) as f64;
    let np = policy.params().len();
    let (total, gradient) = reduce_ordered(batch, np, |ex, g| {
        let lp = policy.sequence_log_prob_grad(&ex.ctx, &[], &ex.tokens, Some(&ex.grammar), -1.0 / n, g)?;
        Ok(-lp.total / n)
    })?;
    LossReport { value: total, gradient, count: batch.len() }.check(np)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadExample {
    pub ctx: Context,
    /// Tokens up to and including a step delimiter.
    pub prefix: Vec<Token>,
    pub target: f64,
}

fn head_loss(policy: &Policy, head: ValueHead, batch: &[HeadExample]) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(ex) = batch.iter().find(|ex| !(0.0..=1.0).contains(&ex.target)) {
        return Err(Error::Config(format!("head target {} outside [0, 1]", ex.target)));
    }
    let n = batch.len() as f64;
    let np = policy.params().len();
    let (total, gradient) = reduce_ordered(batch, np, |ex, g| {
        let z = policy.value_head_logit(&ex.ctx, &ex.prefix, head)?;
        let (loss, dz) = preference_loss(z, ex.target);
        policy.value_head_logit_grad(&ex.ctx, &ex.prefix, head, dz / n, g)?;
        Ok(loss / n)
    })?;
    LossReport { value: total, gradient, count: batch.len() }.check(np)
}

/// Per-step binary cross-entropy between the PRM head and rollout targets.
pub fn prm_loss(policy: &Policy, batch: &[HeadExample]) -> Result<LossReport> {
    head_loss(policy, ValueHead::Prm, batch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrmExample {
    pub ctx: Context,
    /// A complete solution.
    pub tokens: Vec<Token>,
    pub correct: bool,
}

/// Binary logistic loss of the ORM head read at the solution's last token.
pub fn orm_loss(policy: &Policy, batch: &[OrmExample]) -> Result<LossReport> {
    let examples: Vec<HeadExample> = batch
        .iter()
        .map(|ex| HeadExample {
            ctx: ex.ctx.clone(),
            prefix: ex.tokens.clone(),
            target: if ex.correct { 1.0 } else { 0.0 },
        })
        .collect();
    head_loss(policy, ValueHead::Orm, &examples)
}

/// A candidate continuation of a shared prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub prefix: Vec<Token>,
    pub step: Vec<Token>,
}

/// Step-level reward difference between two continuations of the same
/// prefix. Step log-probabilities use the grammar-masked policy.
pub fn step_reward_diff(
    policy: &Policy,
    reference: &ReferenceSnapshot,
    ctx: &Context,
    grammar: &Grammar,
    a: &Branch,
    b: &Branch,
    beta: f64,
) -> Result<f64> {
    if a.prefix != b.prefix {
        return Err(Error::PrefixMismatch);
    }
    let lp = |p: &Policy, s: &[Token]| p.sequence_log_prob(ctx, &a.prefix, s, Some(grammar)).map(|l| l.total);
    Ok(reward_diff_from_log_probs(
        beta,
        lp(policy, &a.step)?,
        lp(reference.policy(), &a.step)?,
        lp(policy, &b.step)?,
        lp(reference.policy(), &b.step)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairLabel {
    /// Estimated correctness of each branch; labeled per the config.
    Estimates { p_a: f64, p_b: f64 },
    /// A fixed label, e.g. 1 for a known-correct versus known-wrong path.
    Fixed(f64),
}

/// A preference pair ready for the loss: `step_a` and `step_b` both continue
/// `prefix`. Full-solution pairs use an empty prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoPair {
    pub ctx: Context,
    pub grammar: Grammar,
    pub prefix: Vec<Token>,
    pub step_a: Vec<Token>,
    pub step_b: Vec<Token>,
    pub label: PairLabel,
}

impl DpoPair {
    pub fn alpha(&self, config: &DpoConfig) -> Option<f64> {
        match self.label {
            PairLabel::Estimates { p_a, p_b } => preference_label(p_a, p_b, config),
            PairLabel::Fixed(a) => Some(a),
        }
    }

    /// The same pair with branches exchanged and the label mirrored.
    pub fn swapped(&self) -> Self {
        Self {
            step_a: self.step_b.clone(),
            step_b: self.step_a.clone(),
            label: match self.label {
                PairLabel::Estimates { p_a, p_b } => PairLabel::Estimates { p_a: p_b, p_b: p_a },
                PairLabel::Fixed(a) => PairLabel::Fixed(1.0 - a),
            },
            ..self.clone()
        }
    }
}

/// Reference-policy log-probabilities of both branches of every pair.
pub fn reference_log_probs(reference: &ReferenceSnapshot, pairs: &[DpoPair]) -> Result<Vec<(f64, f64)>> {
    let r = reference.policy();
    pairs
        .par_iter()
        .map(|p| {
            let a = r.sequence_log_prob(&p.ctx, &p.prefix, &p.step_a, Some(&p.grammar))?.total;
            let b = r.sequence_log_prob(&p.ctx, &p.prefix, &p.step_b, Some(&p.grammar))?.total;
            Ok((a, b))
        })
        .collect()
}

/// Mean preference loss over the labeled pairs of the batch.
pub fn pdpo_loss(policy: &Policy, reference: &ReferenceSnapshot, pairs: &[DpoPair], config: &DpoConfig) -> Result<LossReport> {
    let cached = reference_log_probs(reference, pairs)?;
    pdpo_loss_cached(policy, pairs, &cached, config)
}

/// As [`pdpo_loss`] with reference log-probabilities computed beforehand.
pub fn pdpo_loss_cached(
    policy: &Policy,
    pairs: &[DpoPair],
    reference: &[(f64, f64)],
    config: &DpoConfig,
) -> Result<LossReport> {
    config.validate()?;
    if pairs.len() != reference.len() {
        return Err(Error::DimensionMismatch { expected: pairs.len(), found: reference.len() });
    }
    let labeled: Vec<(&DpoPair, (f64, f64), f64)> = pairs
        .iter()
        .zip(reference)
        .filter_map(|(p, r)| p.alpha(config).map(|a| (p, *r, a)))
        .collect();
    if labeled.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = labeled.len() as f64;
    let np = policy.params().len();
    let beta = config.beta;
    let (total, gradient) = reduce_ordered(&labeled, np, |(p, (ref_a, ref_b), alpha), g| {
        let theta_a = policy.sequence_log_prob(&p.ctx, &p.prefix, &p.step_a, Some(&p.grammar))?.total;
        let theta_b = policy.sequence_log_prob(&p.ctx, &p.prefix, &p.step_b, Some(&p.grammar))?.total;
        let diff = reward_diff_from_log_probs(beta, theta_a, *ref_a, theta_b, *ref_b);
        let (loss, dd) = preference_loss(diff, *alpha);
        let scale = dd * beta / n;
        policy.sequence_log_prob_grad(&p.ctx, &p.prefix, &p.step_a, Some(&p.grammar), scale, g)?;
        policy.sequence_log_prob_grad(&p.ctx, &p.prefix, &p.step_b, Some(&p.grammar), -scale, g)?;
        Ok(loss / n)
    })?;
    LossReport { value: total, gradient, count: labeled.len() }.check(np)
}

/// Central finite-difference step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error so that coordinates whose true
/// derivative is zero compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub num_params: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient of `loss` at `params` against central
/// finite differences on every coordinate.
pub fn check_gradients<F>(loss: F, params: &[f64], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<LossReport> + Sync,
{
    let analytic = loss(params)?.gradient;
    if analytic.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), found: analytic.len() });
    }
    let errors = (0..params.len())
        .into_par_iter()
        .map(|i| {
            let mut p = params.to_vec();
            p[i] = params[i] + FD_STEP;
            let up = loss(&p)?.value;
            p[i] = params[i] - FD_STEP;
            let down = loss(&p)?.value;
            Ok(relative_error(analytic[i], (up - down) / (2.0 * FD_STEP)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (worst_index, max_rel_error) = errors
        .iter()
        .enumerate()
        .fold((None, 0.0), |(wi, wm), (i, &e)| if e > wm { (Some(i), e) } else { (wi, wm) });
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        num_params: params.len(),
        tolerance,
        passed: max_rel_error <= tolerance,
    })
}
