//! Finite-difference checks of every training loss on small random
//! instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grammar::{DecodeMode, Grammar};
use crate::objectives::{
    check_gradients, orm_loss, pdpo_loss, prm_loss, sft_loss, DpoConfig, DpoPair, GradCheckReport, HeadExample,
    LabelMode, OrmExample, PairLabel, SftExample,
};
use crate::policy::{snapshot_reference, Context, Policy, PolicyConfig};
use crate::seeds;
use crate::synthenv::{generate_episode, reference_trace, EnvConfig};
use crate::trace::Step;

/// Losses covered by the suite.
pub const LOSSES: [&str; 5] = ["sft", "orm", "prm", "pdpo_hard", "pdpo_soft"];

/// Environment used for the suite's episodes.
pub fn suite_env() -> EnvConfig {
    EnvConfig { num_symbols: 4, hops: 2, num_choices: 3, encoding_dim: 4, modality_split: 0.5 }
}

/// Policy size used for the suite (well under 500 parameters).
pub fn suite_policy_config() -> PolicyConfig {
    PolicyConfig { num_symbols: 4, obs_dim: 4, embed_dim: 3, hidden: 5 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub loss: String,
    pub instance: usize,
    pub report: GradCheckReport,
}

struct Instance {
    policy: Policy,
    reference: Policy,
    sft: Vec<SftExample>,
    orm: Vec<OrmExample>,
    prm: Vec<HeadExample>,
    pairs: Vec<DpoPair>,
}

fn random_policy(seed: u64) -> Policy {
    let mut p = Policy::random(suite_policy_config(), seeds::derive_seed(seed, "params"), 0.5);
    let mut rng = seeds::rng(seeds::derive_seed(seed, "heads"));
    let heads = p.layout().orm_weight.start..p.layout().total;
    for i in heads {
        p.params_mut()[i] = rng.random_range(-0.5..0.5);
    }
    p
}

fn instance(seed: u64) -> Result<Instance> {
    let env = suite_env();
    let policy = random_policy(seed);
    let mut reference = policy.clone();
    let mut rng = seeds::rng(seeds::derive_seed(seed, "reference-offset"));
    for w in reference.params_mut() {
        *w += rng.random_range(-0.3..0.3);
    }
    let mut inst = Instance { policy, reference, sft: vec![], orm: vec![], prm: vec![], pairs: vec![] };
    for j in 0..2u64 {
        let e = generate_episode(seeds::derive_indexed(seed, "episode", j), &env)?;
        let ctx: Context = e.context(env.encoding_dim)?;
        let g: Grammar = e.grammar(DecodeMode::Reasoning);
        let vocab = e.vocab();
        let reference_tokens = reference_trace(&e).tokens();
        let (sampled, _) = inst.policy.sample_trace(&ctx, &g, &e.episode_id, 1.0, seeds::derive_indexed(seed, "sample", j), env.max_steps())?;
        let sampled_tokens = sampled.tokens();

        inst.sft.push(SftExample { ctx: ctx.clone(), grammar: g.clone(), tokens: reference_tokens.clone() });
        inst.orm.push(OrmExample { ctx: ctx.clone(), tokens: reference_tokens.clone(), correct: true });
        inst.orm.push(OrmExample { ctx: ctx.clone(), tokens: sampled_tokens.clone(), correct: false });
        for k in 1..=sampled.num_steps() {
            let prefix: Vec<_> = sampled.steps()[..k].iter().flat_map(|s| s.tokens().iter().copied()).collect();
            inst.prm.push(HeadExample { ctx: ctx.clone(), prefix, target: rng.random_range(0.0..1.0) });
        }

        let first_hop = reference_tokens[..4].to_vec();
        let right = e.chain()[0].1;
        let wrong = (0..vocab.num_symbols()).map(|i| vocab.value(i)).find(|v| *v != right).expect("V >= 2");
        inst.pairs.push(DpoPair {
            ctx: ctx.clone(),
            grammar: g.clone(),
            prefix: vec![],
            step_a: first_hop.clone(),
            step_b: Step::hop(&vocab, e.start_key, wrong).tokens().to_vec(),
            label: PairLabel::Estimates { p_a: rng.random_range(0.5..1.0), p_b: rng.random_range(0.0..0.5) },
        });
        inst.pairs.push(DpoPair {
            ctx: ctx.clone(),
            grammar: g.clone(),
            prefix: first_hop,
            step_a: reference_tokens[4..8].to_vec(),
            step_b: Step::answer(&vocab, g.choices()[0]).tokens().to_vec(),
            label: PairLabel::Estimates { p_a: rng.random_range(0.0..0.5), p_b: rng.random_range(0.5..1.0) },
        });
        inst.pairs.push(DpoPair {
            ctx,
            grammar: g,
            prefix: vec![],
            step_a: reference_tokens,
            step_b: sampled_tokens,
            label: PairLabel::Fixed(1.0),
        });
    }
    Ok(inst)
}

/// Checks each loss in [`LOSSES`] on `instances` random instances derived
/// from `seed`.
pub fn gradient_suite(seed: u64, instances: usize, tolerance: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for i in 0..instances {
        let inst = instance(seeds::derive_indexed(seed, "gradcheck", i as u64))?;
        let cfg = inst.policy.config().to_owned();
        let at = |params: &[f64]| Policy::from_params(cfg, params.to_vec());
        let snap = snapshot_reference(&inst.reference);
        let params = inst.policy.params();
        for loss in LOSSES {
            let report = match loss {
                "sft" => check_gradients(|w| sft_loss(&at(w)?, &inst.sft), params, tolerance)?,
                "orm" => check_gradients(|w| orm_loss(&at(w)?, &inst.orm), params, tolerance)?,
                "prm" => check_gradients(|w| prm_loss(&at(w)?, &inst.prm), params, tolerance)?,
                _ => {
                    let mode = if loss == "pdpo_soft" { LabelMode::Soft } else { LabelMode::Hard };
                    let dpo = DpoConfig { label_mode: mode, ..DpoConfig::default() };
                    check_gradients(|w| pdpo_loss(&at(w)?, &snap, &inst.pairs, &dpo), params, tolerance)?
                }
            };
            out.push(SuiteEntry { loss: loss.to_string(), instance: i, report });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_policy_is_small() {
        assert!(suite_policy_config().num_params() <= 500);
    }

    #[test]
    fn suite_passes_on_two_instances() {
        let entries = gradient_suite(11, 2, 1e-4).unwrap();
        assert_eq!(entries.len(), 2 * LOSSES.len());
        for e in &entries {
            assert!(e.report.passed, "{} #{}: {}", e.loss, e.instance, e.report.max_rel_error);
        }
    }
}
