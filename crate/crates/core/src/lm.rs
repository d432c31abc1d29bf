//! The model-facing contract shared by in-process backbones, stub models and
//! remote backends.

use serde::{Deserialize, Serialize};

use crate::error::{EtrError, Result};
use crate::tensor::log_sum_exp;
use crate::vocab::{TokenId, Vocabulary};

/// Text context handed between models: the user query plus whatever has been
/// generated after it so far. Models re-encode it with their own vocabulary
/// as `BOS query SEP generated`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub query: String,
    #[serde(default)]
    pub generated: String,
}

impl Prompt {
    pub fn new(query: impl Into<String>) -> Self {
        Prompt {
            query: query.into(),
            generated: String::new(),
        }
    }

    pub fn with_generated(query: impl Into<String>, generated: impl Into<String>) -> Self {
        Prompt {
            query: query.into(),
            generated: generated.into(),
        }
    }

    pub fn to_ids(&self, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
        let mut ids = Vec::with_capacity(self.query.len() + self.generated.len() + 2);
        ids.push(vocab.bos());
        vocab.encode_into(&self.query, &mut ids)?;
        ids.push(vocab.sep());
        vocab.encode_into(&self.generated, &mut ids)?;
        Ok(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub hidden_state: bool,
    pub word_logits: bool,
    pub generate: bool,
}

impl Capabilities {
    pub const FULL: Capabilities = Capabilities {
        hidden_state: true,
        word_logits: true,
        generate: true,
    };

    pub const GENERATE_ONLY: Capabilities = Capabilities {
        hidden_state: false,
        word_logits: false,
        generate: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub stop: StopReason,
}

/// Teacher-forced loss of one query/response pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub nats: f64,
    pub tokens: usize,
}

impl PairLoss {
    pub fn per_token(&self) -> f64 {
        self.nats / self.tokens as f64
    }
}

pub trait LanguageModel: Send + Sync {
    fn name(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    fn vocabulary(&self) -> Option<&Vocabulary> {
        None
    }

    fn hidden_dim(&self) -> Option<usize> {
        None
    }

    /// Hash of the parameters, for models that can carry an expert head.
    fn fingerprint(&self) -> Option<String> {
        None
    }

    fn hidden_state(&self, _prompt: &Prompt) -> Result<Vec<f64>> {
        Err(EtrError::MissingCapability {
            backend: self.name().to_string(),
            capability: "hidden_state",
        })
    }

    fn word_logits(&self, _prompt: &Prompt) -> Result<Vec<f64>> {
        Err(EtrError::MissingCapability {
            backend: self.name().to_string(),
            capability: "word_logits",
        })
    }

    /// Hidden state and word logits of the same context.
    fn hidden_and_logits(&self, prompt: &Prompt) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.hidden_state(prompt)?, self.word_logits(prompt)?))
    }

    /// Greedy continuation of `prompt` for at most `max_new_tokens` steps.
    fn generate(&self, prompt: &Prompt, max_new_tokens: usize) -> Result<Generation>;

    /// Teacher-forced Σ −log P(x_k | query, x_<k) over the response tokens,
    /// plus EOS when `include_eos` is set. The default steps through
    /// `word_logits` one token at a time.
    fn pair_loss(&self, query: &str, response: &str, include_eos: bool) -> Result<PairLoss> {
        if response.is_empty() {
            return Err(EtrError::EmptyResponse);
        }
        let vocab = self.vocabulary().ok_or(EtrError::MissingCapability {
            backend: self.name().to_string(),
            capability: "vocabulary",
        })?;
        let mut targets = vocab.encode(response)?;
        if include_eos {
            targets.push(vocab.eos());
        }
        let mut prompt = Prompt::new(query);
        let mut nats = 0.0;
        for (k, &t) in targets.iter().enumerate() {
            let z = self.word_logits(&prompt)?;
            nats += log_sum_exp(&z) - z[t as usize];
            if k < response.chars().count() {
                prompt.generated.push_str(&vocab.decode(&[t])?);
            }
        }
        Ok(PairLoss {
            nats,
            tokens: targets.len(),
        })
    }
}

/// Index of the largest value; ties go to the lowest index. Positions for
/// which `allowed` is false are skipped.
pub fn argmax_where(values: &[f64], allowed: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if !allowed(i) {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_ids_layout() {
        let v = Vocabulary::new("abc", Default::default()).unwrap();
        let ids = Prompt::with_generated("ab", "c").to_ids(&v).unwrap();
        assert_eq!(ids, vec![v.bos(), 4, 5, v.sep(), 6]);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax_where(&[1.0, 3.0, 3.0], |_| true), Some(1));
        assert_eq!(argmax_where(&[1.0, 1.0, 1.0], |_| true), Some(0));
        assert_eq!(argmax_where(&[5.0, 3.0, 3.0], |i| i > 0), Some(1));
        assert_eq!(argmax_where(&[], |_| true), None);
    }
}
