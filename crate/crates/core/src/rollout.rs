//! Monte Carlo rollouts and preference-pair construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::Grammar;
use crate::objectives::{preference_label, DpoConfig};
use crate::policy::{Context, Policy};
use crate::seeds;
use crate::synthenv::{judge, EpisodeSpec};
use crate::trace::{render_tokens, Answer, PrefixSolution, ReasoningTrace, Step, TraceRecord};
use crate::vocab::{Token, Vocabulary};

/// Everything needed to sample from the policy on one episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeRollout<'a> {
    pub policy: &'a Policy,
    pub ctx: &'a Context,
    pub grammar: &'a Grammar,
    pub episode: &'a EpisodeSpec,
    pub temperature: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutEstimate {
    /// Number of steps in the prefix the estimate belongs to.
    pub prefix_k: usize,
    pub n: usize,
    pub num_correct: usize,
    pub p_hat: f64,
}

impl RolloutEstimate {
    pub fn from_outcomes(prefix_k: usize, outcomes: &[bool]) -> Self {
        assert!(!outcomes.is_empty(), "at least one rollout");
        let num_correct = outcomes.iter().filter(|c| **c).count();
        Self {
            prefix_k,
            n: outcomes.len(),
            num_correct,
            p_hat: num_correct as f64 / outcomes.len() as f64,
        }
    }
}

/// Fraction of `n` sampled completions of `prefix` that reach the reference
/// answer. Rollout `i` uses seed `derive(rng_seed, "rollout", i)`.
pub fn estimate_correctness(env: &EpisodeRollout, prefix: &PrefixSolution, n: usize, rng_seed: u64) -> Result<RolloutEstimate> {
    if n == 0 {
        return Err(Error::Config("rollout count must be at least 1".into()));
    }
    let vocab = env.episode.vocab();
    if let Some(choice) = prefix.steps().last().and_then(|s| s.answer_choice(&vocab)) {
        let ok = judge(Answer::Choice(choice), env.episode);
        return Ok(RolloutEstimate::from_outcomes(prefix.k(), &vec![ok; n]));
    }
    let outcomes = (0..n)
        .map(|i| {
            let mut rng = seeds::rng(seeds::derive_indexed(rng_seed, "rollout", i as u64));
            let (steps, _) = env
                .policy
                .sample_steps(env.ctx, env.grammar, prefix.steps(), env.temperature, env.max_steps, &mut rng)?;
            let answer = steps
                .last()
                .and_then(|s| s.answer_choice(&vocab))
                .map_or(Answer::Unanswered, Answer::Choice);
            Ok(judge(answer, env.episode))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutEstimate::from_outcomes(prefix.k(), &outcomes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionSample {
    pub trace: ReasoningTrace,
    pub correct: bool,
    pub total_log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionSet {
    pub samples: Vec<SolutionSample>,
    /// At least one sample is incorrect.
    pub retained: bool,
    /// At least one correct and one incorrect sample exist.
    pub has_pairs: bool,
}

/// Samples `num_paths` full solutions. An episode is retained when the
/// policy produced at least one incorrect solution.
pub fn collect_solutions(env: &EpisodeRollout, num_paths: usize, rng_seed: u64) -> Result<SolutionSet> {
    if num_paths < 2 {
        return Err(Error::Config(format!("num_paths must be at least 2, got {num_paths}")));
    }
    let samples = (0..num_paths)
        .map(|i| {
            let seed = seeds::derive_indexed(rng_seed, "path", i as u64);
            let (trace, lp) = env.policy.sample_trace(
                env.ctx,
                env.grammar,
                &env.episode.episode_id,
                env.temperature,
                seed,
                env.max_steps,
            )?;
            Ok(SolutionSample {
                correct: judge(trace.answer(), env.episode),
                trace,
                total_log_prob: lp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(classify(samples))
}

pub fn classify(samples: Vec<SolutionSample>) -> SolutionSet {
    let any_wrong = samples.iter().any(|s| !s.correct);
    let any_right = samples.iter().any(|s| s.correct);
    SolutionSet {
        samples,
        retained: any_wrong,
        has_pairs: any_wrong && any_right,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullPathPair {
    pub episode_id: String,
    pub preferred: ReasoningTrace,
    pub rejected: ReasoningTrace,
}

/// Default per-episode cap on full-path pairs.
pub const FULL_PATH_PAIR_CAP: usize = 4;

/// All (correct, incorrect) pairs with distinct token content, keeping the
/// `cap` pairs where the rejected trace is most favoured by the policy
/// relative to the preferred one (largest `logp(rejected) - logp(preferred)`).
/// Ties keep sample order.
pub fn build_fullpath_pairs(samples: &[SolutionSample], cap: usize) -> Vec<FullPathPair> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, good) in samples.iter().enumerate().filter(|(_, s)| s.correct) {
        for (j, bad) in samples.iter().enumerate().filter(|(_, s)| !s.correct) {
            if seen.insert((good.trace.tokens(), bad.trace.tokens())) {
                candidates.push((bad.total_log_prob - good.total_log_prob, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    candidates
        .into_iter()
        .take(cap)
        .map(|(_, i, j)| FullPathPair {
            episode_id: samples[i].trace.episode_id.clone(),
            preferred: samples[i].trace.clone(),
            rejected: samples[j].trace.clone(),
        })
        .collect()
}

/// Samples single steps after `prefix` until one differs from `current`.
pub fn sample_alternative_step(
    env: &EpisodeRollout,
    prefix: &PrefixSolution,
    current: &Step,
    rng_seed: u64,
    max_attempts: usize,
) -> Result<Step> {
    for attempt in 0..max_attempts {
        let mut rng = seeds::rng(seeds::derive_indexed(rng_seed, "alternative", attempt as u64));
        let (steps, _) = env
            .policy
            .sample_steps(env.ctx, env.grammar, prefix.steps(), env.temperature, prefix.k() + 1, &mut rng)?;
        if let Some(step) = steps.into_iter().next() {
            if &step != current {
                return Ok(step);
            }
        }
    }
    Err(Error::NoAlternativeFound(max_attempts))
}

/// Rollout estimates for `prefix + a` and `prefix + b`. Each branch's seed is
/// derived from the branch step's content, so equal steps get equal seeds.
pub fn pairwise_rollout(
    env: &EpisodeRollout,
    prefix: &PrefixSolution,
    a: &Step,
    b: &Step,
    n: usize,
    rng_seed: u64,
) -> Result<(RolloutEstimate, RolloutEstimate)> {
    let branch_seed = |s: &Step| {
        let label: Vec<String> = s.tokens().iter().map(|t| t.0.to_string()).collect();
        seeds::derive_seed(rng_seed, &format!("branch:{}", label.join(",")))
    };
    let ea = estimate_correctness(env, &prefix.extended(a.clone()), n, branch_seed(a))?;
    let eb = estimate_correctness(env, &prefix.extended(b.clone()), n, branch_seed(b))?;
    Ok((ea, eb))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepPreferencePair {
    pub episode_id: String,
    pub prefix: Vec<Step>,
    pub step_a: Step,
    pub step_b: Step,
    pub p_a: RolloutEstimate,
    pub p_b: RolloutEstimate,
    /// Label under the collection-time label mode (`None` for a hard tie).
    pub alpha: Option<f64>,
}

impl StepPreferencePair {
    pub fn new(
        episode_id: String,
        prefix: Vec<Step>,
        step_a: Step,
        step_b: Step,
        p_a: RolloutEstimate,
        p_b: RolloutEstimate,
        config: &DpoConfig,
    ) -> Self {
        let alpha = preference_label(p_a.p_hat, p_b.p_hat, config);
        Self { episode_id, prefix, step_a, step_b, p_a, p_b, alpha }
    }
}

/// One line of the preference dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PreferenceRecord {
    Fullpath {
        episode_id: String,
        preferred: TraceRecord,
        rejected: TraceRecord,
    },
    Step {
        episode_id: String,
        prefix: Vec<Vec<u32>>,
        step_a: Vec<u32>,
        step_b: Vec<u32>,
        p_a: RolloutEstimate,
        p_b: RolloutEstimate,
        alpha: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreferenceDataset {
    pub fullpath: Vec<FullPathPair>,
    pub steps: Vec<StepPreferencePair>,
}

impl PreferenceDataset {
    pub fn is_empty(&self) -> bool {
        self.fullpath.is_empty() && self.steps.is_empty()
    }

    pub fn len(&self) -> usize {
        self.fullpath.len() + self.steps.len()
    }

    /// Records in file order: all full-path pairs, then all step pairs.
    pub fn to_records(&self, vocab: &Vocabulary) -> Vec<PreferenceRecord> {
        let ids = |s: &Step| s.tokens().iter().map(|t| t.0).collect::<Vec<_>>();
        self.fullpath
            .iter()
            .map(|p| PreferenceRecord::Fullpath {
                episode_id: p.episode_id.clone(),
                preferred: p.preferred.to_record(vocab),
                rejected: p.rejected.to_record(vocab),
            })
            .chain(self.steps.iter().map(|p| PreferenceRecord::Step {
                episode_id: p.episode_id.clone(),
                prefix: p.prefix.iter().map(ids).collect(),
                step_a: ids(&p.step_a),
                step_b: ids(&p.step_b),
                p_a: p.p_a,
                p_b: p.p_b,
                alpha: p.alpha,
            }))
            .collect()
    }

    pub fn from_records(vocab: &Vocabulary, records: &[PreferenceRecord]) -> Result<Self> {
        let step = |ids: &[u32]| Step::new(vocab, ids.iter().map(|&i| Token(i)).collect());
        let mut out = Self::default();
        for r in records {
            match r {
                PreferenceRecord::Fullpath { episode_id, preferred, rejected } => out.fullpath.push(FullPathPair {
                    episode_id: episode_id.clone(),
                    preferred: ReasoningTrace::from_record(vocab, preferred)?,
                    rejected: ReasoningTrace::from_record(vocab, rejected)?,
                }),
                PreferenceRecord::Step { episode_id, prefix, step_a, step_b, p_a, p_b, alpha } => {
                    out.steps.push(StepPreferencePair {
                        episode_id: episode_id.clone(),
                        prefix: prefix.iter().map(|s| step(s)).collect::<Result<_>>()?,
                        step_a: step(step_a)?,
                        step_b: step(step_b)?,
                        p_a: *p_a,
                        p_b: *p_b,
                        alpha: *alpha,
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, vocab: &Vocabulary, path: &std::path::Path) -> Result<()> {
        crate::io::write_jsonl(path, &self.to_records(vocab))
    }

    pub fn read_jsonl(vocab: &Vocabulary, path: &std::path::Path) -> Result<Self> {
        let records: Vec<PreferenceRecord> = crate::io::read_jsonl(path)?;
        Self::from_records(vocab, &records)
    }
}

/// Human-readable one-liner for a step pair.
pub fn describe_step_pair(vocab: &Vocabulary, p: &StepPreferencePair) -> String {
    format!(
        "{} | k={} a=[{}] p_a={:.3} b=[{}] p_b={:.3}",
        p.episode_id,
        p.prefix.len() + 1,
        render_tokens(vocab, p.step_a.tokens()),
        p.p_a.p_hat,
        render_tokens(vocab, p.step_b.tokens()),
        p.p_b.p_hat
    )
}
