//! Token ids and the symbolic vocabulary shared by traces, grammar and policy.
//!
//! Layout for `V` symbols: `HOP`, `ANS`, `<end_of_step>`, keys `k0..k{V-1}`,
//! values `v0..v{V-1}`, for `2V + 3` tokens in total. Value `v_i` points at
//! key `k_i`, which is how multi-hop chains are walked.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Text marker for the step delimiter.
pub const END_OF_STEP: &str = "<end_of_step>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Hop,
    Ans,
    EndOfStep,
    Key(usize),
    Value(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    num_symbols: usize,
}

impl Vocabulary {
    pub fn new(num_symbols: usize) -> Self {
        assert!(num_symbols >= 1, "vocabulary needs at least one symbol");
        Self { num_symbols }
    }

    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    pub fn size(&self) -> usize {
        2 * self.num_symbols + 3
    }

    pub fn hop(&self) -> Token {
        Token(0)
    }

    pub fn ans(&self) -> Token {
        Token(1)
    }

    pub fn eos(&self) -> Token {
        Token(2)
    }

    pub fn key(&self, i: usize) -> Token {
        assert!(i < self.num_symbols);
        Token((3 + i) as u32)
    }

    pub fn value(&self, i: usize) -> Token {
        assert!(i < self.num_symbols);
        Token((3 + self.num_symbols + i) as u32)
    }

    pub fn contains(&self, t: Token) -> bool {
        t.index() < self.size()
    }

    pub fn kind(&self, t: Token) -> TokenKind {
        let i = t.index();
        let v = self.num_symbols;
        match i {
            0 => TokenKind::Hop,
            1 => TokenKind::Ans,
            2 => TokenKind::EndOfStep,
            _ if i < 3 + v => TokenKind::Key(i - 3),
            _ if i < 3 + 2 * v => TokenKind::Value(i - 3 - v),
            _ => panic!("token {i} outside vocabulary of size {}", self.size()),
        }
    }

    pub fn is_value(&self, t: Token) -> bool {
        self.contains(t) && matches!(self.kind(t), TokenKind::Value(_))
    }

    pub fn is_key(&self, t: Token) -> bool {
        self.contains(t) && matches!(self.kind(t), TokenKind::Key(_))
    }

    pub fn surface(&self, t: Token) -> String {
        match self.kind(t) {
            TokenKind::Hop => "HOP".to_string(),
            TokenKind::Ans => "ANS".to_string(),
            TokenKind::EndOfStep => END_OF_STEP.to_string(),
            TokenKind::Key(i) => format!("k{i}"),
            TokenKind::Value(i) => format!("v{i}"),
        }
    }

    pub fn parse(&self, surface: &str) -> Result<Token> {
        let bad = || Error::UnknownToken(surface.to_string());
        match surface {
            "HOP" => Ok(self.hop()),
            "ANS" => Ok(self.ans()),
            END_OF_STEP => Ok(self.eos()),
            s => {
                let (head, digits) = s.split_at(1.min(s.len()));
                let i: usize = digits.parse().map_err(|_| bad())?;
                if i >= self.num_symbols || digits.starts_with('+') {
                    return Err(bad());
                }
                match head {
                    "k" => Ok(self.key(i)),
                    "v" => Ok(self.value(i)),
                    _ => Err(bad()),
                }
            }
        }
    }

    /// Key linked to a value token (`v_i -> k_i`).
    pub fn linked_key(&self, value: Token) -> Option<Token> {
        match self.kind(value) {
            TokenKind::Value(i) => Some(self.key(i)),
            _ => None,
        }
    }
}
