//! Synthetic multi-hop question-answering episodes.
//!
//! An episode is a table of `key -> value` facts. Value `v_i` points at key
//! `k_i`, so starting from a key and following `L` facts yields the answer.
//! The question is rendered as the single prompt token `v_{a0}` (the value
//! linked to the start key). Every key carries exactly one fact: `L` of them
//! form the chain, the rest are distractors.
//!
//! Each fact becomes one hash-seeded encoding vector, routed to the visual or
//! audio stream by its modality tag.

use serde::{Deserialize, Serialize};

use crate::avsync::{self, AudioSegment, Modality, VisualFrameGroup};
use crate::error::{Error, Result};
use crate::grammar::{DecodeMode, Grammar};
use crate::policy::{Context, Policy};
use crate::seeds;
use crate::trace::{Answer, PrefixSolution, ReasoningTrace, Step};
use crate::vocab::{Token, TokenKind, Vocabulary};
use rand::seq::SliceRandom;
use rand::Rng;

/// Leaf budget for exhaustive enumeration.
pub const DEFAULT_ENUMERATION_BUDGET: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_symbols: usize,
    pub hops: usize,
    pub num_choices: usize,
    pub encoding_dim: usize,
    /// Probability that a fact is tagged audio.
    pub modality_split: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_symbols: 8,
            hops: 3,
            num_choices: 5,
            encoding_dim: 16,
            modality_split: 0.5,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let infeasible = |m: String| Err(Error::InfeasibleConfig(m));
        if self.num_choices < 2 {
            return infeasible(format!("need at least 2 choices, got {}", self.num_choices));
        }
        if self.num_symbols < self.num_choices {
            return infeasible(format!(
                "{} symbols cannot hold {} distinct choices",
                self.num_symbols, self.num_choices
            ));
        }
        if self.hops < 1 {
            return infeasible("need at least one hop".into());
        }
        if self.num_symbols < self.hops + 1 {
            return infeasible(format!(
                "{} symbols cannot hold a {}-hop chain of distinct keys",
                self.num_symbols, self.hops
            ));
        }
        if self.encoding_dim < 2 {
            return infeasible(format!("encoding dim {} < 2", self.encoding_dim));
        }
        if !(0.0..=1.0).contains(&self.modality_split) {
            return infeasible(format!("modality split {} outside [0, 1]", self.modality_split));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.num_symbols)
    }

    /// Default step cap for sampling: the reference length plus one spare step.
    pub fn max_steps(&self) -> usize {
        self.hops + 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub key: Token,
    pub value: Token,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub episode_id: String,
    pub seed: u64,
    pub num_symbols: usize,
    pub facts: Vec<Fact>,
    pub start_key: Token,
    pub hops: usize,
    pub choices: Vec<Token>,
    pub reference_answer: Token,
}

impl EpisodeSpec {
    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.num_symbols)
    }

    pub fn lookup(&self, key: Token) -> Option<&Fact> {
        self.facts.iter().find(|f| f.key == key)
    }

    /// `(key, value)` hops of the reasoning chain in order.
    pub fn chain(&self) -> Vec<(Token, Token)> {
        let vocab = self.vocab();
        let mut key = self.start_key;
        let mut out = Vec::with_capacity(self.hops);
        for _ in 0..self.hops {
            let fact = self.lookup(key).expect("chain key has a fact");
            out.push((key, fact.value));
            key = vocab.linked_key(fact.value).expect("fact value is a value token");
        }
        out
    }

    /// Modality tag of the fact used at hop `j` (0-based).
    pub fn hop_modality(&self, j: usize) -> Modality {
        let (key, _) = self.chain()[j];
        self.lookup(key).expect("chain fact").modality
    }

    /// Question prompt: the value symbol linked to the start key.
    pub fn question_tokens(&self) -> Vec<Token> {
        let vocab = self.vocab();
        match vocab.kind(self.start_key) {
            crate::vocab::TokenKind::Key(i) => vec![vocab.value(i)],
            _ => unreachable!("start key is a key token"),
        }
    }

    pub fn grammar(&self, mode: DecodeMode) -> Grammar {
        Grammar::new(self.vocab(), self.choices.clone(), mode).expect("episode choices are values")
    }

    /// Policy conditioning for this episode from the given streams.
    pub fn context_from_streams(&self, visual: &[VisualFrameGroup], audio: &[AudioSegment]) -> Result<Context> {
        let fused = avsync::interleave(visual, audio)?;
        Ok(Context {
            obs: avsync::pool_observation(&fused)?,
            question: self.question_tokens(),
        })
    }

    pub fn context(&self, encoding_dim: usize) -> Result<Context> {
        let (v, a) = encode_observation(self, encoding_dim);
        self.context_from_streams(&v, &a)
    }
}

/// Deterministic episode for `(seed, config)`.
pub fn generate_episode(seed: u64, config: &EnvConfig) -> Result<EpisodeSpec> {
    config.validate()?;
    let vocab = config.vocab();
    let n = config.num_symbols;
    let mut rng = seeds::rng(seeds::derive_seed(seed, "episode"));

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let chain_idx = &order[..=config.hops];

    let mut facts = Vec::with_capacity(n);
    for j in 0..config.hops {
        facts.push((chain_idx[j], chain_idx[j + 1]));
    }
    for key in 0..n {
        if !chain_idx[..config.hops].contains(&key) {
            facts.push((key, rng.random_range(0..n)));
        }
    }
    facts.shuffle(&mut rng);
    let facts = facts
        .into_iter()
        .map(|(k, v)| Fact {
            key: vocab.key(k),
            value: vocab.value(v),
            modality: if rng.random_bool(config.modality_split) {
                Modality::Audio
            } else {
                Modality::Visual
            },
        })
        .collect();

    let answer = chain_idx[config.hops];
    let mut others: Vec<usize> = (0..n).filter(|&i| i != answer).collect();
    others.shuffle(&mut rng);
    let mut choices: Vec<Token> = others[..config.num_choices - 1]
        .iter()
        .map(|&i| vocab.value(i))
        .collect();
    choices.push(vocab.value(answer));
    choices.shuffle(&mut rng);

    Ok(EpisodeSpec {
        episode_id: format!("ep-{seed}"),
        seed,
        num_symbols: n,
        facts,
        start_key: vocab.key(chain_idx[0]),
        hops: config.hops,
        choices,
        reference_answer: vocab.value(answer),
    })
}

const ENCODING_SEED: u64 = 0x5eed_fac7;

/// Encoding of a single fact; independent of the episode.
///
/// Key `k_i` owns `w = max(2, dim / V)` dimensions starting at `i * w`
/// (wrapping modulo `dim`). The value is written into the first two of them
/// as the point at angle `2 pi r / V` on a circle of radius `sqrt(dim)`,
/// where `r` is the value's rank in a permutation drawn once from a
/// hash-seeded generator and shared by all keys. The remaining dimensions are zero.
pub fn fact_encoding(vocab: &Vocabulary, key: Token, value: Token, dim: usize) -> Vec<f64> {
    let n = vocab.num_symbols();
    let (i, j) = match (vocab.kind(key), vocab.kind(value)) {
        (TokenKind::Key(i), TokenKind::Value(j)) => (i, j),
        _ => panic!("fact must pair a key with a value"),
    };
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeds::rng(seeds::derive_seed(ENCODING_SEED, &format!("value-perm:{n}"))));
    let angle = std::f64::consts::TAU * perm[j] as f64 / n as f64;
    let w = (dim / n).max(2).min(dim);
    let start = (i * w) % dim;
    let radius = (dim as f64).sqrt();
    let mut out = vec![0.0; dim];
    out[start] = radius * angle.cos();
    out[(start + 1) % dim] = radius * angle.sin();
    out
}

/// Fact `i` is placed at timestamp `i` seconds as one encoding in a visual
/// group or an audio segment according to its tag. When no fact is visual,
/// the visual stream holds two zero-vector anchor frames at `t = 0` and
/// `t = #facts`.
pub fn encode_observation(episode: &EpisodeSpec, dim: usize) -> (Vec<VisualFrameGroup>, Vec<AudioSegment>) {
    let vocab = episode.vocab();
    let mut visual = Vec::new();
    let mut audio = Vec::new();
    for (i, f) in episode.facts.iter().enumerate() {
        let enc = fact_encoding(&vocab, f.key, f.value, dim);
        let t = i as f64;
        match f.modality {
            Modality::Visual => visual.push(VisualFrameGroup { timestamp: t, encodings: vec![enc] }),
            Modality::Audio => audio.push(AudioSegment { timestamp: t, encodings: vec![enc] }),
        }
    }
    if visual.is_empty() {
        for t in [0.0, episode.facts.len() as f64] {
            visual.push(VisualFrameGroup { timestamp: t, encodings: vec![vec![0.0; dim]] });
        }
    }
    (visual, audio)
}

/// Exact-match judge; unanswered traces are incorrect.
pub fn judge(answer: Answer, episode: &EpisodeSpec) -> bool {
    answer == Answer::Choice(episode.reference_answer)
}

pub fn reference_trace(episode: &EpisodeSpec) -> ReasoningTrace {
    let vocab = episode.vocab();
    let mut steps: Vec<Step> = episode
        .chain()
        .into_iter()
        .map(|(k, v)| Step::hop(&vocab, k, v))
        .collect();
    steps.push(Step::answer(&vocab, episode.reference_answer));
    ReasoningTrace::from_steps(&vocab, episode.episode_id.clone(), steps).expect("reference ends in an answer")
}

/// Direct-answer target: a single answer step.
pub fn direct_answer_trace(episode: &EpisodeSpec) -> ReasoningTrace {
    let vocab = episode.vocab();
    let steps = vec![Step::answer(&vocab, episode.reference_answer)];
    ReasoningTrace::from_steps(&vocab, episode.episode_id.clone(), steps).expect("answer step")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactCorrectness {
    pub prefix_k: usize,
    pub p_star: f64,
    pub leaves: u64,
}

/// Policy probability that completions of `prefix` answer correctly,
/// by exhaustive enumeration of grammar-valid continuations up to
/// `max_steps` total steps. Truncated completions count as incorrect.
pub fn exact_correctness(
    policy: &Policy,
    ctx: &Context,
    grammar: &Grammar,
    prefix: &PrefixSolution,
    episode: &EpisodeSpec,
    max_steps: usize,
    budget: u64,
) -> Result<ExactCorrectness> {
    let vocab = episode.vocab();
    let mut leaves = 0u64;
    let p_star = enumerate(policy, ctx, grammar, prefix.steps().to_vec(), episode, max_steps, budget, &mut leaves, &vocab)?;
    Ok(ExactCorrectness {
        prefix_k: prefix.k(),
        p_star,
        leaves,
    })
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    policy: &Policy,
    ctx: &Context,
    grammar: &Grammar,
    steps: Vec<Step>,
    episode: &EpisodeSpec,
    max_steps: usize,
    budget: u64,
    leaves: &mut u64,
    vocab: &Vocabulary,
) -> Result<f64> {
    if let Some(choice) = steps.last().and_then(|s| s.answer_choice(vocab)) {
        *leaves += 1;
        return Ok(f64::from(u8::from(judge(Answer::Choice(choice), episode))));
    }
    if steps.len() >= max_steps {
        *leaves += 1;
        return Ok(0.0);
    }
    if *leaves > budget {
        return Err(Error::BudgetExceeded(budget));
    }
    let tokens: Vec<Token> = steps.iter().flat_map(|s| s.tokens().iter().copied()).collect();
    let dist = policy.step_distribution(ctx, grammar, &tokens)?;
    if dist.is_empty() {
        *leaves += 1;
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (step, p) in dist {
        let mut next = steps.clone();
        next.push(step);
        total += p * enumerate(policy, ctx, grammar, next, episode, max_steps, budget, leaves, vocab)?;
        if *leaves > budget {
            return Err(Error::BudgetExceeded(budget));
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::trace::extract_answer;

    #[test]
    fn generation_is_deterministic() {
        let c = EnvConfig::default();
        assert_eq!(generate_episode(7, &c).unwrap(), generate_episode(7, &c).unwrap());
        assert_ne!(generate_episode(7, &c).unwrap(), generate_episode(8, &c).unwrap());
    }

    #[test]
    fn chain_invariants_hold() {
        let c = EnvConfig::default();
        for seed in 0..200 {
            let e = generate_episode(seed, &c).unwrap();
            let keys: std::collections::HashSet<_> = e.facts.iter().map(|f| f.key).collect();
            assert_eq!(keys.len(), e.facts.len());
            let chain = e.chain();
            assert_eq!(chain.len(), c.hops);
            let vocab = e.vocab();
            assert_eq!(vocab.linked_key(chain[c.hops - 1].1), vocab.linked_key(e.reference_answer));
            assert_eq!(chain[c.hops - 1].1, e.reference_answer);
            assert!(e.choices.contains(&e.reference_answer));
            let distinct: std::collections::HashSet<_> = e.choices.iter().collect();
            assert_eq!(distinct.len(), c.num_choices);
        }
    }

    #[test]
    fn reference_trace_shape() {
        let e = generate_episode(1, &EnvConfig::default()).unwrap();
        assert_eq!(reference_trace(&e).num_steps(), 4);
        let one = EnvConfig { hops: 1, ..EnvConfig::default() };
        let e1 = generate_episode(1, &one).unwrap();
        assert_eq!(reference_trace(&e1).num_steps(), 2);
    }

    #[test]
    fn reference_answers_judge_correct() {
        let c = EnvConfig::default();
        for seed in 0..100 {
            let e = generate_episode(seed, &c).unwrap();
            let t = reference_trace(&e);
            assert_eq!(extract_answer(&e.vocab(), &t).unwrap(), e.reference_answer);
            assert!(judge(t.answer(), &e));
            assert!(e.grammar(DecodeMode::Reasoning).walk(&t.tokens()).is_ok());
        }
    }

    #[test]
    fn judge_rules() {
        let e = generate_episode(3, &EnvConfig::default()).unwrap();
        assert!(judge(Answer::Choice(e.reference_answer), &e));
        for &c in &e.choices {
            if c != e.reference_answer {
                assert!(!judge(Answer::Choice(c), &e));
            }
        }
        assert!(!judge(Answer::Unanswered, &e));
    }

    #[test]
    fn infeasible_configs() {
        let bad = |c: EnvConfig| matches!(generate_episode(0, &c), Err(Error::InfeasibleConfig(_)));
        let base = EnvConfig::default();
        assert!(bad(EnvConfig { num_symbols: 4, ..base }));
        assert!(bad(EnvConfig { num_symbols: 3, num_choices: 2, hops: 3, ..base }));
        assert!(bad(EnvConfig { num_choices: 1, ..base }));
        assert!(bad(EnvConfig { hops: 0, ..base }));
        assert!(bad(EnvConfig { encoding_dim: 1, ..base }));
        assert!(bad(EnvConfig { modality_split: 1.5, ..base }));
    }

    #[test]
    fn modality_routing() {
        let visual = EnvConfig { modality_split: 0.0, ..EnvConfig::default() };
        let e = generate_episode(4, &visual).unwrap();
        let (v, a) = encode_observation(&e, visual.encoding_dim);
        assert!(a.is_empty());
        assert_eq!(v.len(), e.facts.len());

        let audio = EnvConfig { modality_split: 1.0, ..EnvConfig::default() };
        let e = generate_episode(4, &audio).unwrap();
        let (v, a) = encode_observation(&e, audio.encoding_dim);
        assert_eq!(a.len(), e.facts.len());
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|g| g.encodings[0].iter().all(|x| *x == 0.0)));
        assert_eq!((v[0].timestamp, v[1].timestamp), (0.0, e.facts.len() as f64));
        assert!(e.context(audio.encoding_dim).is_ok());
    }

    /// Independent reimplementation of the fact encoding used as the oracle.
    fn oracle_encoding(key: Token, value: Token, dim: usize) -> Vec<f64> {
        use sha2::{Digest, Sha256};
        let n = 8usize;
        let i = key.0 as usize - 3;
        let j = value.0 as usize - 3 - n;
        let label = format!("value-perm:{n}");
        let mut h = Sha256::new();
        h.update(0x5eed_fac7u64.to_le_bytes());
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        let seed = u64::from_le_bytes(h.finalize()[..8].try_into().unwrap());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let theta = 2.0 * std::f64::consts::PI * perm[j] as f64 / n as f64;
        let mut v = vec![0.0; dim];
        let w = std::cmp::max(2, dim / n);
        v[(i * w) % dim] = (dim as f64).sqrt() * theta.cos();
        v[(i * w + 1) % dim] = (dim as f64).sqrt() * theta.sin();
        v
    }

    #[test]
    fn perturbing_one_fact_changes_exactly_its_vector() {
        let c = EnvConfig { modality_split: 0.0, ..EnvConfig::default() };
        let e = generate_episode(12, &c).unwrap();
        let vocab = e.vocab();
        let mut e2 = e.clone();
        let old = e2.facts[3].value;
        e2.facts[3].value = (0..vocab.num_symbols()).map(|i| vocab.value(i)).find(|v| *v != old).unwrap();
        let (v1, _) = encode_observation(&e, c.encoding_dim);
        let (v2, _) = encode_observation(&e2, c.encoding_dim);
        for i in 0..v1.len() {
            let f = &e2.facts[i];
            assert_eq!(v2[i].encodings[0], oracle_encoding(f.key, f.value, c.encoding_dim));
            assert_eq!(v1[i] == v2[i], i != 3);
        }
    }

    #[test]
    fn observation_decodes_back_to_the_chain() {
        let c = EnvConfig::default();
        for seed in 0..100 {
            let e = generate_episode(seed, &c).unwrap();
            let vocab = e.vocab();
            let (v, a) = encode_observation(&e, c.encoding_dim);
            let recs = avsync::to_stream_records(&v, &a);
            let (v, a) = avsync::from_stream_records(&recs);
            // Decode every non-anchor vector by exhaustive match over the
            // (key, value) table, then replay the chain.
            let mut table = std::collections::HashMap::new();
            let vectors = v.iter().flat_map(|g| g.encodings.clone()).chain(a.iter().flat_map(|s| s.encodings.clone()));
            for vec in vectors {
                for k in 0..vocab.num_symbols() {
                    for val in 0..vocab.num_symbols() {
                        if oracle_encoding(vocab.key(k), vocab.value(val), c.encoding_dim) == vec {
                            table.insert(k, val);
                        }
                    }
                }
            }
            let mut key = match vocab.kind(e.start_key) {
                crate::vocab::TokenKind::Key(i) => i,
                _ => unreachable!(),
            };
            for _ in 0..c.hops {
                key = table[&key];
            }
            assert_eq!(vocab.value(key), e.reference_answer);
        }
    }

    fn tiny_env() -> EnvConfig {
        EnvConfig { num_symbols: 4, hops: 2, num_choices: 3, encoding_dim: 4, modality_split: 0.5 }
    }

    fn tiny_policy(seed: u64) -> Policy {
        Policy::random(PolicyConfig { num_symbols: 4, obs_dim: 4, embed_dim: 3, hidden: 8 }, seed, 1.0)
    }

    #[test]
    fn uniform_direct_answer_policy_is_one_over_c() {
        let c = EnvConfig { num_symbols: 8, hops: 3, num_choices: 5, encoding_dim: 4, modality_split: 0.5 };
        let e = generate_episode(0, &c).unwrap();
        let p = Policy::zeros(PolicyConfig { num_symbols: 8, obs_dim: 4, embed_dim: 2, hidden: 3 });
        let ctx = e.context(4).unwrap();
        let g = e.grammar(DecodeMode::DirectAnswer);
        let r = exact_correctness(&p, &ctx, &g, &PrefixSolution::empty(&e.episode_id), &e, 5, DEFAULT_ENUMERATION_BUDGET).unwrap();
        assert!((r.p_star - 0.2).abs() < 1e-12);
    }

    #[test]
    fn answered_prefix_is_certain() {
        let c = tiny_env();
        let e = generate_episode(5, &c).unwrap();
        let p = tiny_policy(1);
        let ctx = e.context(c.encoding_dim).unwrap();
        let g = e.grammar(DecodeMode::Reasoning);
        let t = reference_trace(&e);
        let full = crate::trace::prefix(&t, t.num_steps()).unwrap();
        let r = exact_correctness(&p, &ctx, &g, &full, &e, 4, DEFAULT_ENUMERATION_BUDGET).unwrap();
        assert_eq!(r.p_star, 1.0);
    }

    #[test]
    fn budget_is_enforced() {
        let c = tiny_env();
        let e = generate_episode(5, &c).unwrap();
        let p = tiny_policy(1);
        let ctx = e.context(c.encoding_dim).unwrap();
        let g = e.grammar(DecodeMode::Reasoning);
        let r = exact_correctness(&p, &ctx, &g, &PrefixSolution::empty("x"), &e, 4, 100);
        assert!(matches!(r, Err(Error::BudgetExceeded(100))));
    }

    #[test]
    fn exact_correctness_is_invariant_to_distractor_order() {
        let c = tiny_env();
        let p = tiny_policy(3);
        for seed in 0..10 {
            let e = generate_episode(seed, &c).unwrap();
            let chain_keys: Vec<_> = e.chain().iter().map(|(k, _)| *k).collect();
            let mut e2 = e.clone();
            let (mut chain, mut rest): (Vec<_>, Vec<_>) = e2.facts.drain(..).partition(|f| chain_keys.contains(&f.key));
            rest.reverse();
            chain.append(&mut rest);
            e2.facts = chain;
            let g = e.grammar(DecodeMode::Reasoning);
            let a = exact_correctness(&p, &e.context(4).unwrap(), &g, &PrefixSolution::empty("x"), &e, 4, DEFAULT_ENUMERATION_BUDGET).unwrap();
            let b = exact_correctness(&p, &e2.context(4).unwrap(), &g, &PrefixSolution::empty("x"), &e2, 4, DEFAULT_ENUMERATION_BUDGET).unwrap();
            assert!((a.p_star - b.p_star).abs() < 1e-12);
        }
    }
}
