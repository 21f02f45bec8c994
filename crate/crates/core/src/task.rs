//! Toy task vocabulary, prompt template and elicitation records.

use serde::{Deserialize, Serialize};

use crate::error::{CmcError, Result};
use crate::model::CONFIDENCE_TOKENS;

/// Token layout: `0..100` confidence integers, then entities, then
/// question words, then the separator, confidence-query and end tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskVocab {
    pub vocab_size: usize,
    pub n_entities: usize,
    pub n_questions: usize,
}

impl TaskVocab {
    pub fn new(vocab_size: usize, n_entities: usize, n_questions: usize) -> Result<Self> {
        let need = CONFIDENCE_TOKENS + n_entities + n_questions + 3;
        if n_entities == 0 || n_questions == 0 || need > vocab_size {
            return Err(CmcError::Config(format!(
                "{n_entities} entities and {n_questions} question words need a vocabulary of {need}, have {vocab_size}"
            )));
        }
        Ok(Self {
            vocab_size,
            n_entities,
            n_questions,
        })
    }

    pub fn entity(&self, i: usize) -> u32 {
        assert!(i < self.n_entities);
        (CONFIDENCE_TOKENS + i) as u32
    }

    pub fn question(&self, i: usize) -> u32 {
        assert!(i < self.n_questions);
        (CONFIDENCE_TOKENS + self.n_entities + i) as u32
    }

    pub fn sep(&self) -> u32 {
        (CONFIDENCE_TOKENS + self.n_entities + self.n_questions) as u32
    }

    pub fn query(&self) -> u32 {
        self.sep() + 1
    }

    pub fn end(&self) -> u32 {
        self.sep() + 2
    }

    pub fn entity_index(&self, token: u32) -> Option<usize> {
        let t = token as usize;
        (CONFIDENCE_TOKENS..CONFIDENCE_TOKENS + self.n_entities)
            .contains(&t)
            .then(|| t - CONFIDENCE_TOKENS)
    }

    pub fn token_name(&self, token: u32) -> String {
        let t = token as usize;
        let e0 = CONFIDENCE_TOKENS;
        let q0 = e0 + self.n_entities;
        let s = q0 + self.n_questions;
        match t {
            _ if t < e0 => t.to_string(),
            _ if t < q0 => format!("e{}", t - e0),
            _ if t < s => format!("q{}", t - q0),
            _ if t == s => "<sep>".into(),
            _ if t == s + 1 => "<conf>".into(),
            _ if t == s + 2 => "<end>".into(),
            _ => format!("<t{t}>"),
        }
    }

    pub fn parse_token(&self, name: &str) -> Result<u32> {
        let bad = || CmcError::Format(format!("unknown token {name:?}"));
        let index = |rest: &str, n: usize| -> Result<usize> {
            let i: usize = rest.parse().map_err(|_| bad())?;
            if i < n {
                Ok(i)
            } else {
                Err(bad())
            }
        };
        let t = match name {
            "<sep>" => self.sep(),
            "<conf>" => self.query(),
            "<end>" => self.end(),
            _ if name.starts_with('e') => self.entity(index(&name[1..], self.n_entities)?),
            _ if name.starts_with('q') => self.question(index(&name[1..], self.n_questions)?),
            _ if name.starts_with("<t") && name.ends_with('>') => {
                let t = index(&name[2..name.len() - 1], self.vocab_size)?;
                if t <= self.end() as usize {
                    return Err(bad());
                }
                t as u32
            }
            _ => index(name, CONFIDENCE_TOKENS)? as u32,
        };
        Ok(t)
    }

    /// Whitespace-separated token names.
    pub fn parse_tokens(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.parse_token(w)).collect()
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|t| self.token_name(*t)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplatePart {
    Question,
    AnswerSlot,
    /// The answer the prompt is checked against.
    Reference,
    Literal(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub parts: Vec<TemplatePart>,
}

impl PromptTemplate {
    pub fn new(parts: Vec<TemplatePart>) -> Self {
        Self { parts }
    }

    /// `[question][answer][<sep>][reference][<conf>][<end>]`
    pub fn standard(vocab: &TaskVocab) -> Self {
        use TemplatePart::*;
        Self::new(vec![
            Question,
            AnswerSlot,
            Literal(vocab.sep()),
            Reference,
            Literal(vocab.query()),
            Literal(vocab.end()),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let count = |p: TemplatePart| self.parts.iter().filter(|x| **x == p).count();
        if count(TemplatePart::AnswerSlot) != 1 {
            return Err(CmcError::Template("exactly one answer slot required".into()));
        }
        if count(TemplatePart::Question) > 1 || count(TemplatePart::Reference) > 1 {
            return Err(CmcError::Template("question and reference may appear at most once".into()));
        }
        Ok(())
    }

    pub fn render(&self, question: &[u32], answer: u32, reference: u32) -> Result<Vec<u32>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.parts.len() + question.len());
        for p in &self.parts {
            match p {
                TemplatePart::Question => out.extend_from_slice(question),
                TemplatePart::AnswerSlot => out.push(answer),
                TemplatePart::Reference => out.push(reference),
                TemplatePart::Literal(t) => out.push(*t),
            }
        }
        Ok(out)
    }

    pub fn answer_position(&self, question_len: usize) -> Result<usize> {
        self.validate()?;
        let mut pos = 0;
        for p in &self.parts {
            match p {
                TemplatePart::AnswerSlot => return Ok(pos),
                TemplatePart::Question => pos += question_len,
                _ => pos += 1,
            }
        }
        unreachable!("validated")
    }
}

/// One elicitation: the model answered, then verbalised a confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitationRecord {
    pub question: Vec<u32>,
    pub model_answer: Vec<u32>,
    pub gold_answer: Vec<u32>,
    pub correct: bool,
    pub confidence: u8,
}

impl ElicitationRecord {
    pub fn single_answer(&self) -> Result<(u32, u32)> {
        match (self.model_answer.as_slice(), self.gold_answer.as_slice()) {
            ([m], [g]) => Ok((*m, *g)),
            _ => Err(CmcError::Template(
                "toy mode needs single-token answers; use ingestion mode for multi-token answers".into(),
            )),
        }
    }
}
