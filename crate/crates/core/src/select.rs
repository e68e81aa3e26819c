//! Contrastive step selection.
//!
//! Each step of a trace is scored by the mean per-token KL divergence between
//! the policy's next-token distributions under the original and a perturbed
//! observation, teacher-forced on the trace itself. The most susceptible
//! steps are chosen for pairwise rollout.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::avsync::{AudioSegment, VisualFrameGroup};
use crate::error::{Error, Result};
use crate::grammar::Grammar;
use crate::policy::{Context, Policy};
use crate::seeds;
use crate::trace::ReasoningTrace;

/// Serialized as its flag spelling, e.g. `"gaussian:0.01"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PerturbationKind {
    Gaussian { epsilon: f64 },
    AudioMask,
    VisualMask,
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;

    /// Parses `gaussian:<eps>`, `audio_mask` or `visual_mask`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio_mask" => Ok(Self::AudioMask),
            "visual_mask" => Ok(Self::VisualMask),
            _ => {
                let eps = s
                    .strip_prefix("gaussian:")
                    .and_then(|e| e.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("bad perturbation {s:?}")))?;
                if !eps.is_finite() || eps < 0.0 {
                    return Err(Error::Config(format!("gaussian epsilon must be finite and >= 0, got {eps}")));
                }
                Ok(Self::Gaussian { epsilon: eps })
            }
        }
    }
}

impl TryFrom<String> for PerturbationKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PerturbationKind> for String {
    fn from(k: PerturbationKind) -> Self {
        k.to_string()
    }
}

impl std::fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Gaussian { epsilon } => write!(f, "gaussian:{epsilon}"),
            Self::AudioMask => write!(f, "audio_mask"),
            Self::VisualMask => write!(f, "visual_mask"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            kind: PerturbationKind::Gaussian { epsilon: 0.01 },
            seed: 0,
        }
    }
}

/// Applies the perturbation to the raw streams (before pooling).
pub fn perturb(
    visual: &[VisualFrameGroup],
    audio: &[AudioSegment],
    spec: &PerturbationSpec,
) -> (Vec<VisualFrameGroup>, Vec<AudioSegment>) {
    let mut visual = visual.to_vec();
    let mut audio = audio.to_vec();
    match spec.kind {
        PerturbationKind::Gaussian { epsilon } => {
            let mut rng = seeds::rng(seeds::derive_seed(spec.seed, "gaussian-perturbation"));
            let encodings = visual
                .iter_mut()
                .flat_map(|g| g.encodings.iter_mut())
                .chain(audio.iter_mut().flat_map(|s| s.encodings.iter_mut()));
            for enc in encodings {
                for x in enc.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += epsilon * z;
                }
            }
        }
        PerturbationKind::AudioMask => {
            for enc in audio.iter_mut().flat_map(|s| s.encodings.iter_mut()) {
                enc.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        PerturbationKind::VisualMask => {
            for enc in visual.iter_mut().flat_map(|g| g.encodings.iter_mut()) {
                enc.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
    (visual, audio)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSusceptibility {
    /// 1-based step index.
    pub step: usize,
    pub d: f64,
}

/// `KL(p || q)` from log-probabilities, clamped at zero against rounding.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = log_p
        .iter()
        .zip(log_q)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum();
    kl.max(0.0)
}

/// Length-normalized per-token KL divergence for every step of `trace`.
///
/// The step length counts every token including the delimiter. The
/// distributions are the policy's grammar-masked softmax, the same
/// distribution it is trained on and samples from.
pub fn step_susceptibility(
    policy: &Policy,
    ctx: &Context,
    perturbed: &Context,
    grammar: &Grammar,
    trace: &ReasoningTrace,
) -> Result<Vec<StepSusceptibility>> {
    if ctx.obs.len() != perturbed.obs.len() {
        return Err(Error::DimensionMismatch {
            expected: ctx.obs.len(),
            found: perturbed.obs.len(),
        });
    }
    let tokens = trace.tokens();
    let p = policy.teacher_forced_log_distributions(ctx, grammar, &[], &tokens)?;
    let q = policy.teacher_forced_log_distributions(perturbed, grammar, &[], &tokens)?;
    let mut out = Vec::with_capacity(trace.num_steps());
    let mut at = 0;
    for (k, step) in trace.steps().iter().enumerate() {
        let n = step.len();
        let total: f64 = (at..at + n).map(|i| kl_divergence(&p[i], &q[i])).sum();
        out.push(StepSusceptibility { step: k + 1, d: total / n as f64 });
        at += n;
    }
    Ok(out)
}

/// Step indices of the `t` largest scores (ties go to the earlier step),
/// returned in ascending index order.
pub fn select_top_steps(sus: &[StepSusceptibility], t: usize) -> Vec<usize> {
    let mut ranked: Vec<&StepSusceptibility> = sus.iter().collect();
    ranked.sort_by(|a, b| b.d.total_cmp(&a.d).then(a.step.cmp(&b.step)));
    let mut picked: Vec<usize> = ranked.into_iter().take(t).map(|s| s.step).collect();
    picked.sort_unstable();
    picked
}

/// Scores for the steps that can be rolled out: the final answer step of an
/// answered trace is dropped since nothing follows it.
pub fn rollout_candidates(trace: &ReasoningTrace, sus: &[StepSusceptibility]) -> Vec<StepSusceptibility> {
    let last = trace.num_steps();
    sus.iter()
        .copied()
        .filter(|s| !(trace.is_answered() && s.step == last))
        .collect()
}
