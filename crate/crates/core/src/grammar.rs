//! Step grammar enforced during decoding.
//!
//! Steps are `HOP key value <end_of_step>` or `ANS choice <end_of_step>`; an
//! answer step ends the trace. Answer choices are restricted to the
//! episode's choice set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Token, TokenKind, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Any number of hop steps followed by an answer step.
    #[default]
    Reasoning,
    /// The first and only step is the answer step.
    DirectAnswer,
}

/// Position inside the current step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    StepStart,
    AfterHop,
    AfterKey,
    AfterAns,
    ExpectEnd { answer: bool },
    Finished,
}

/// Decoder state: phase within the step plus the number of completed steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrammarState {
    pub phase: Phase,
    pub completed: usize,
}

impl GrammarState {
    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }

    pub fn at_step_start(&self) -> bool {
        self.phase == Phase::StepStart
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    vocab: Vocabulary,
    choices: Vec<Token>,
    mode: DecodeMode,
}

impl Grammar {
    pub fn new(vocab: Vocabulary, choices: Vec<Token>, mode: DecodeMode) -> Result<Self> {
        if choices.is_empty() {
            return Err(Error::Config("grammar needs at least one answer choice".into()));
        }
        if let Some(bad) = choices.iter().find(|c| !vocab.is_value(**c)) {
            return Err(Error::Config(format!("choice id {} is not a value symbol", bad.0)));
        }
        Ok(Self { vocab, choices, mode })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn choices(&self) -> &[Token] {
        &self.choices
    }

    pub fn mode(&self) -> DecodeMode {
        self.mode
    }

    pub fn with_mode(&self, mode: DecodeMode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn start(&self) -> GrammarState {
        GrammarState { phase: Phase::StepStart, completed: 0 }
    }

    /// Tokens permitted in `state`, in ascending id order.
    pub fn allowed(&self, state: GrammarState) -> Vec<Token> {
        let v = &self.vocab;
        match state.phase {
            Phase::StepStart => match self.mode {
                DecodeMode::Reasoning => vec![v.hop(), v.ans()],
                DecodeMode::DirectAnswer if state.completed == 0 => vec![v.ans()],
                DecodeMode::DirectAnswer => Vec::new(),
            },
            Phase::AfterHop => (0..v.num_symbols()).map(|i| v.key(i)).collect(),
            Phase::AfterKey => (0..v.num_symbols()).map(|i| v.value(i)).collect(),
            Phase::AfterAns => {
                let mut c = self.choices.clone();
                c.sort();
                c.dedup();
                c
            }
            Phase::ExpectEnd { .. } => vec![v.eos()],
            Phase::Finished => Vec::new(),
        }
    }

    pub fn mask(&self, state: GrammarState) -> Vec<bool> {
        let mut m = vec![false; self.vocab.size()];
        for t in self.allowed(state) {
            m[t.index()] = true;
        }
        m
    }

    pub fn is_allowed(&self, state: GrammarState, t: Token) -> bool {
        self.vocab.contains(t) && self.allowed(state).contains(&t)
    }

    /// Transition after emitting `t`; the caller must have checked that `t`
    /// is allowed.
    pub fn advance(&self, state: GrammarState, t: Token) -> GrammarState {
        let phase = match (state.phase, self.vocab.kind(t)) {
            (Phase::StepStart, TokenKind::Hop) => Phase::AfterHop,
            (Phase::StepStart, TokenKind::Ans) => Phase::AfterAns,
            (Phase::AfterHop, TokenKind::Key(_)) => Phase::AfterKey,
            (Phase::AfterKey, TokenKind::Value(_)) => Phase::ExpectEnd { answer: false },
            (Phase::AfterAns, TokenKind::Value(_)) => Phase::ExpectEnd { answer: true },
            (Phase::ExpectEnd { answer: true }, TokenKind::EndOfStep) => {
                return GrammarState { phase: Phase::Finished, completed: state.completed + 1 };
            }
            (Phase::ExpectEnd { answer: false }, TokenKind::EndOfStep) => {
                return GrammarState { phase: Phase::StepStart, completed: state.completed + 1 };
            }
            _ => Phase::Finished,
        };
        GrammarState { phase, ..state }
    }

    /// Runs the state machine over `tokens`, failing on the first disallowed
    /// token.
    pub fn walk(&self, tokens: &[Token]) -> Result<GrammarState> {
        self.walk_from(self.start(), 0, tokens)
    }

    pub fn walk_from(&self, mut state: GrammarState, offset: usize, tokens: &[Token]) -> Result<GrammarState> {
        for (i, &t) in tokens.iter().enumerate() {
            if !self.is_allowed(state, t) {
                return Err(Error::GrammarViolation {
                    position: offset + i,
                    token: if self.vocab.contains(t) { self.vocab.surface(t) } else { format!("id {}", t.0) },
                });
            }
            state = self.advance(state, t);
        }
        Ok(state)
    }
}
