//! Step-segmented reasoning traces.
//!
//! A trace is an ordered list of steps, each terminated by the
//! `<end_of_step>` delimiter, whose last step is an answer step
//! `[ANS, choice, <end_of_step>]`. Sampled traces that hit a length cap are
//! kept as *unanswered* traces; they segment the same way but carry
//! [`Answer::Unanswered`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Token, TokenKind, Vocabulary};

/// Surface used for an unanswered trace in structured records.
pub const UNANSWERED: &str = "<unanswered>";

/// One delimiter-terminated step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Step {
    tokens: Vec<Token>,
}

impl Step {
    /// Builds a step from its body, appending the delimiter.
    pub fn from_body(vocab: &Vocabulary, body: &[Token]) -> Result<Self> {
        if body.is_empty() {
            return Err(Error::EmptyTrace);
        }
        let mut tokens = body.to_vec();
        tokens.push(vocab.eos());
        Self::new(vocab, tokens)
    }

    /// Validates a full step (delimiter included).
    pub fn new(vocab: &Vocabulary, tokens: Vec<Token>) -> Result<Self> {
        let eos = vocab.eos();
        match tokens.split_last() {
            Some((last, body)) if *last == eos && !body.is_empty() => {
                if let Some(pos) = body.iter().position(|t| *t == eos) {
                    return Err(Error::GrammarViolation {
                        position: pos,
                        token: vocab.surface(eos),
                    });
                }
                if let Some(pos) = tokens.iter().position(|t| !vocab.contains(*t)) {
                    return Err(Error::UnknownToken(format!("id {}", tokens[pos].0)));
                }
                Ok(Self { tokens })
            }
            _ => Err(Error::EmptyTrace),
        }
    }

    pub fn hop(vocab: &Vocabulary, key: Token, value: Token) -> Self {
        Self {
            tokens: vec![vocab.hop(), key, value, vocab.eos()],
        }
    }

    pub fn answer(vocab: &Vocabulary, choice: Token) -> Self {
        Self {
            tokens: vec![vocab.ans(), choice, vocab.eos()],
        }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The choice symbol if this is an answer-form step.
    pub fn answer_choice(&self, vocab: &Vocabulary) -> Option<Token> {
        match self.tokens.as_slice() {
            [ans, choice, eos]
                if *ans == vocab.ans() && *eos == vocab.eos() && vocab.is_value(*choice) =>
            {
                Some(*choice)
            }
            _ => None,
        }
    }

    /// `(key, value)` if this is a hop step.
    pub fn hop_parts(&self, vocab: &Vocabulary) -> Option<(Token, Token)> {
        match self.tokens.as_slice() {
            [hop, k, v, eos]
                if *hop == vocab.hop()
                    && *eos == vocab.eos()
                    && vocab.is_key(*k)
                    && vocab.is_value(*v) =>
            {
                Some((*k, *v))
            }
            _ => None,
        }
    }
}

/// Final answer of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Answer {
    Choice(Token),
    Unanswered,
}

impl Answer {
    pub fn choice(self) -> Option<Token> {
        match self {
            Answer::Choice(t) => Some(t),
            Answer::Unanswered => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningTrace {
    pub episode_id: String,
    steps: Vec<Step>,
    answer: Answer,
}

impl ReasoningTrace {
    pub fn from_steps(vocab: &Vocabulary, episode_id: impl Into<String>, steps: Vec<Step>) -> Result<Self> {
        let last = steps.last().ok_or(Error::EmptyTrace)?;
        let choice = last
            .answer_choice(vocab)
            .ok_or_else(|| Error::MalformedAnswer(render_tokens(vocab, last.tokens())))?;
        Ok(Self {
            episode_id: episode_id.into(),
            steps,
            answer: Answer::Choice(choice),
        })
    }

    /// Like [`from_steps`](Self::from_steps) but a non-answer final step
    /// yields an unanswered trace instead of an error.
    pub fn from_steps_lenient(
        vocab: &Vocabulary,
        episode_id: impl Into<String>,
        steps: Vec<Step>,
    ) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::EmptyTrace);
        }
        let answer = match steps.last().and_then(|s| s.answer_choice(vocab)) {
            Some(c) => Answer::Choice(c),
            None => Answer::Unanswered,
        };
        Ok(Self {
            episode_id: episode_id.into(),
            steps,
            answer,
        })
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn answer(&self) -> Answer {
        self.answer
    }

    pub fn is_answered(&self) -> bool {
        matches!(self.answer, Answer::Choice(_))
    }

    /// Flat token sequence (all steps concatenated).
    pub fn tokens(&self) -> Vec<Token> {
        flatten(&self.steps)
    }

    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        render_tokens(vocab, &self.tokens())
    }

    pub fn from_text(vocab: &Vocabulary, episode_id: impl Into<String>, text: &str) -> Result<Self> {
        let raw = text
            .split_whitespace()
            .map(|s| vocab.parse(s))
            .collect::<Result<Vec<_>>>()?;
        let steps = split_steps(vocab, &raw)?;
        Self::from_steps_lenient(vocab, episode_id, steps)
    }

    pub fn to_record(&self, vocab: &Vocabulary) -> TraceRecord {
        TraceRecord {
            episode_id: self.episode_id.clone(),
            steps: self
                .steps
                .iter()
                .map(|s| s.tokens().iter().map(|t| t.0).collect())
                .collect(),
            answer: match self.answer {
                Answer::Choice(t) => vocab.surface(t),
                Answer::Unanswered => UNANSWERED.to_string(),
            },
        }
    }

    pub fn from_record(vocab: &Vocabulary, record: &TraceRecord) -> Result<Self> {
        let steps = record
            .steps
            .iter()
            .map(|ids| Step::new(vocab, ids.iter().map(|&i| Token(i)).collect()))
            .collect::<Result<Vec<_>>>()?;
        let trace = Self::from_steps_lenient(vocab, record.episode_id.clone(), steps)?;
        let expected = match trace.answer {
            Answer::Choice(t) => vocab.surface(t),
            Answer::Unanswered => UNANSWERED.to_string(),
        };
        if expected != record.answer {
            return Err(Error::MalformedAnswer(format!(
                "record answer {:?} disagrees with final step {:?}",
                record.answer, expected
            )));
        }
        Ok(trace)
    }
}

/// Structured trace record: `{episode_id, steps: [[int]], answer: string}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode_id: String,
    pub steps: Vec<Vec<u32>>,
    pub answer: String,
}

/// The first `k` steps of a trace; `k = 0` is the question alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixSolution {
    pub episode_id: String,
    steps: Vec<Step>,
}

impl PrefixSolution {
    pub fn empty(episode_id: impl Into<String>) -> Self {
        Self {
            episode_id: episode_id.into(),
            steps: Vec::new(),
        }
    }

    pub fn from_steps(episode_id: impl Into<String>, steps: Vec<Step>) -> Self {
        Self {
            episode_id: episode_id.into(),
            steps,
        }
    }

    pub fn k(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn tokens(&self) -> Vec<Token> {
        flatten(&self.steps)
    }

    /// This prefix extended by one step.
    pub fn extended(&self, step: Step) -> Self {
        let mut steps = self.steps.clone();
        steps.push(step);
        Self {
            episode_id: self.episode_id.clone(),
            steps,
        }
    }

    /// True when the last step is an answer step.
    pub fn is_complete(&self, vocab: &Vocabulary) -> bool {
        self.steps
            .last()
            .is_some_and(|s| s.answer_choice(vocab).is_some())
    }
}

/// Splits a raw token sequence into steps on delimiter tokens, then checks
/// that the final step is an answer step.
///
/// Tokens after the last delimiter form a final step with an implicit
/// delimiter appended.
pub fn segment_trace(vocab: &Vocabulary, episode_id: impl Into<String>, raw: &[Token]) -> Result<ReasoningTrace> {
    let steps = split_steps(vocab, raw)?;
    ReasoningTrace::from_steps(vocab, episode_id, steps)
}

/// Returns the first `k` steps of `trace`.
pub fn prefix(trace: &ReasoningTrace, k: usize) -> Result<PrefixSolution> {
    if k > trace.num_steps() {
        return Err(Error::IndexOutOfRange {
            index: k,
            len: trace.num_steps(),
        });
    }
    Ok(PrefixSolution::from_steps(
        trace.episode_id.clone(),
        trace.steps[..k].to_vec(),
    ))
}

/// Choice symbol of the final answer step.
pub fn extract_answer(vocab: &Vocabulary, trace: &ReasoningTrace) -> Result<Token> {
    let last = trace.steps().last().ok_or(Error::EmptyTrace)?;
    last.answer_choice(vocab)
        .ok_or_else(|| Error::MalformedAnswer(render_tokens(vocab, last.tokens())))
}

fn split_steps(vocab: &Vocabulary, raw: &[Token]) -> Result<Vec<Step>> {
    let eos = vocab.eos();
    if !raw.iter().any(|t| *t != eos) {
        return Err(Error::EmptyTrace);
    }
    let mut steps = Vec::new();
    let mut current = Vec::new();
    for &t in raw {
        if !vocab.contains(t) {
            return Err(Error::UnknownToken(format!("id {}", t.0)));
        }
        current.push(t);
        if t == eos {
            if current.len() == 1 {
                // A bare delimiter carries no step.
                return Err(Error::GrammarViolation {
                    position: steps.iter().map(Step::len).sum(),
                    token: vocab.surface(eos),
                });
            }
            steps.push(Step { tokens: std::mem::take(&mut current) });
        }
    }
    if !current.is_empty() {
        current.push(eos);
        steps.push(Step { tokens: current });
    }
    Ok(steps)
}

fn flatten(steps: &[Step]) -> Vec<Token> {
    steps.iter().flat_map(|s| s.tokens().iter().copied()).collect()
}

pub fn render_tokens(vocab: &Vocabulary, tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| vocab.surface(*t))
        .collect::<Vec<_>>()
        .join(" ")
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Hop => write!(f, "HOP"),
            TokenKind::Ans => write!(f, "ANS"),
            TokenKind::EndOfStep => write!(f, "EOS_STEP"),
            TokenKind::Key(i) => write!(f, "k{i}"),
            TokenKind::Value(i) => write!(f, "v{i}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::new(8)
    }

    fn toks(v: &Vocabulary, s: &str) -> Vec<Token> {
        s.split_whitespace().map(|x| v.parse(x).unwrap()).collect()
    }

    #[test]
    fn segments_two_step_trace() {
        let v = vocab();
        let raw = toks(&v, "HOP k1 v2 <end_of_step> ANS v2 <end_of_step>");
        let t = segment_trace(&v, "e", &raw).unwrap();
        assert_eq!(t.num_steps(), 2);
        assert_eq!(v.surface(extract_answer(&v, &t).unwrap()), "v2");
        assert_eq!(t.tokens(), raw);
    }

    #[test]
    fn lone_delimiter_is_empty_trace() {
        let v = vocab();
        assert!(matches!(segment_trace(&v, "e", &[v.eos()]), Err(Error::EmptyTrace)));
        assert!(matches!(segment_trace(&v, "e", &[]), Err(Error::EmptyTrace)));
    }

    #[test]
    fn missing_trailing_delimiter_is_appended() {
        let v = vocab();
        let raw = toks(&v, "HOP k1 v2 <end_of_step> ANS v2");
        let t = segment_trace(&v, "e", &raw).unwrap();
        assert_eq!(t.num_steps(), 2);
        assert_eq!(t.steps()[1].tokens().last(), Some(&v.eos()));
    }

    #[test]
    fn non_answer_final_step_is_malformed() {
        let v = vocab();
        let raw = toks(&v, "ANS v4 <end_of_step> HOP k1 v2 <end_of_step>");
        assert!(matches!(segment_trace(&v, "e", &raw), Err(Error::MalformedAnswer(_))));
        let lenient = ReasoningTrace::from_text(&v, "e", &render_tokens(&v, &raw)).unwrap();
        assert_eq!(lenient.answer(), Answer::Unanswered);
        assert!(matches!(extract_answer(&v, &lenient), Err(Error::MalformedAnswer(_))));
    }

    #[test]
    fn extract_answer_reads_final_choice() {
        let v = vocab();
        let t = segment_trace(&v, "e", &toks(&v, "HOP k0 v3 <end_of_step> ANS v4 <end_of_step>")).unwrap();
        assert_eq!(extract_answer(&v, &t).unwrap(), v.value(4));
    }

    #[test]
    fn prefixes() {
        let v = vocab();
        let t = segment_trace(&v, "e", &toks(&v, "HOP k1 v2 <end_of_step> ANS v2 <end_of_step>")).unwrap();
        assert_eq!(prefix(&t, 0).unwrap().k(), 0);
        let p1 = prefix(&t, 1).unwrap();
        assert_eq!(p1.steps(), &t.steps()[..1]);
        assert!(!p1.is_complete(&v));
        assert!(prefix(&t, 2).unwrap().is_complete(&v));
        assert!(matches!(prefix(&t, 3), Err(Error::IndexOutOfRange { index: 3, len: 2 })));
    }

    #[test]
    fn structured_record_roundtrip() {
        let v = vocab();
        let t = segment_trace(&v, "ep-3", &toks(&v, "HOP k1 v2 <end_of_step> ANS v2 <end_of_step>")).unwrap();
        let rec = t.to_record(&v);
        assert_eq!(rec.steps, vec![vec![0, 4, 13, 2], vec![1, 13, 2]]);
        let json = serde_json::to_string(&rec).unwrap();
        let back: TraceRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(ReasoningTrace::from_record(&v, &back).unwrap(), t);
    }

    #[test]
    fn record_with_inconsistent_answer_is_rejected() {
        let v = vocab();
        let t = segment_trace(&v, "e", &toks(&v, "ANS v2 <end_of_step>")).unwrap();
        let mut rec = t.to_record(&v);
        rec.answer = "v3".into();
        assert!(ReasoningTrace::from_record(&v, &rec).is_err());
    }

    /// Seeded generator of grammar-valid raw sequences, used as the oracle for
    /// segmentation properties.
    fn random_valid_sequence(v: &Vocabulary, rng: &mut ChaCha8Rng) -> (Vec<Token>, usize) {
        let hops = rng.random_range(0..6);
        let mut raw = Vec::new();
        for _ in 0..hops {
            raw.push(v.hop());
            raw.push(v.key(rng.random_range(0..v.num_symbols())));
            raw.push(v.value(rng.random_range(0..v.num_symbols())));
            raw.push(v.eos());
        }
        raw.push(v.ans());
        raw.push(v.value(rng.random_range(0..v.num_symbols())));
        raw.push(v.eos());
        (raw, hops + 1)
    }

    #[test]
    fn segmentation_roundtrip_on_1000_random_sequences() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let (raw, delimiters) = random_valid_sequence(&v, &mut rng);
            let t = segment_trace(&v, "r", &raw).unwrap();
            assert_eq!(t.num_steps(), delimiters);
            assert_eq!(t.tokens(), raw);
            let text = t.to_text(&v);
            assert_eq!(ReasoningTrace::from_text(&v, "r", &text).unwrap(), t);
            assert_eq!(ReasoningTrace::from_record(&v, &t.to_record(&v)).unwrap(), t);
        }
    }

    proptest! {
        #[test]
        fn prefix_tokens_are_strictly_monotone(seed in any::<u64>()) {
            let v = vocab();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (raw, _) = random_valid_sequence(&v, &mut rng);
            let t = segment_trace(&v, "p", &raw).unwrap();
            for k in 0..t.num_steps() {
                let a = prefix(&t, k).unwrap().tokens();
                let b = prefix(&t, k + 1).unwrap().tokens();
                prop_assert!(a.len() < b.len());
                prop_assert_eq!(&b[..a.len()], &a[..]);
            }
        }
    }
}
