//! Scripted models with fixed outputs, for exercising routing and serving
//! code without trained weights.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{EtrError, Result};
use crate::lm::{Capabilities, Generation, LanguageModel, Prompt, StopReason};
use crate::vocab::Vocabulary;

/// Hidden state and word logits returned at one decoding position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// A meta-capable model that replays a per-query schedule. Step `k` of a
/// schedule answers any context with `k` generated characters; past the
/// end, the last step repeats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedMeta {
    pub name: String,
    pub dim: usize,
    pub fingerprint: String,
    pub scripts: BTreeMap<String, Vec<ScriptStep>>,
    #[serde(skip, default = "Vocabulary::printable_ascii")]
    vocab: Vocabulary,
}

impl ScriptedMeta {
    pub fn new(name: impl Into<String>, dim: usize, fingerprint: impl Into<String>) -> Self {
        ScriptedMeta {
            name: name.into(),
            dim,
            fingerprint: fingerprint.into(),
            scripts: BTreeMap::new(),
            vocab: Vocabulary::printable_ascii(),
        }
    }

    pub fn with_script(mut self, query: impl Into<String>, steps: Vec<ScriptStep>) -> Self {
        self.scripts.insert(query.into(), steps);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ScriptedMeta = serde_json::from_str(text)?;
        for (q, steps) in &m.scripts {
            if steps.is_empty() {
                return Err(EtrError::format(format!("empty script for {q:?}")));
            }
            for s in steps {
                if s.hidden.len() != m.dim || s.logits.len() != m.vocab.size() {
                    return Err(EtrError::format(format!("script step for {q:?} has wrong shape")));
                }
            }
        }
        Ok(m)
    }

    fn step(&self, prompt: &Prompt) -> Result<&ScriptStep> {
        let steps = self.scripts.get(&prompt.query).ok_or_else(|| EtrError::Backend {
            backend: self.name.clone(),
            step: 0,
            message: format!("no script for query {:?}", prompt.query),
        })?;
        let k = prompt.generated.chars().count().min(steps.len() - 1);
        Ok(&steps[k])
    }
}

impl LanguageModel for ScriptedMeta {
    fn name(&self) -> &str {
        &self.name
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::FULL
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.vocab)
    }

    fn hidden_dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn fingerprint(&self) -> Option<String> {
        Some(self.fingerprint.clone())
    }

    fn hidden_state(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        Ok(self.step(prompt)?.hidden.clone())
    }

    fn word_logits(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        Ok(self.step(prompt)?.logits.clone())
    }

    fn generate(&self, prompt: &Prompt, max_new_tokens: usize) -> Result<Generation> {
        let mut p = prompt.clone();
        let mut text = String::new();
        for _ in 0..max_new_tokens {
            let z = self.word_logits(&p)?;
            let id = crate::lm::argmax_where(&z, |i| self.vocab.is_emittable(i as u32)).unwrap() as u32;
            if id == self.vocab.eos() {
                return Ok(Generation { text, stop: StopReason::Eos });
            }
            let s = self.vocab.decode(&[id])?;
            text.push_str(&s);
            p.generated.push_str(&s);
        }
        Ok(Generation {
            text,
            stop: StopReason::MaxTokens,
        })
    }
}

/// A generate-only model answering from a fixed table. The reply for a
/// query continues after whatever part of it is already in the context.
#[derive(Debug, Clone, Default)]
pub struct ScriptedExpert {
    pub name: String,
    pub replies: BTreeMap<String, String>,
    pub default_reply: Option<String>,
    pub delay: Duration,
    pub fail: bool,
}

impl ScriptedExpert {
    pub fn new(name: impl Into<String>) -> Self {
        ScriptedExpert {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn reply(mut self, query: impl Into<String>, response: impl Into<String>) -> Self {
        self.replies.insert(query.into(), response.into());
        self
    }

    pub fn default_reply(mut self, response: impl Into<String>) -> Self {
        self.default_reply = Some(response.into());
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn failing(mut self) -> Self {
        self.fail = true;
        self
    }
}

impl LanguageModel for ScriptedExpert {
    fn name(&self) -> &str {
        &self.name
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::GENERATE_ONLY
    }

    fn generate(&self, prompt: &Prompt, max_new_tokens: usize) -> Result<Generation> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        if self.fail {
            return Err(EtrError::Backend {
                backend: self.name.clone(),
                step: 0,
                message: "scripted failure".into(),
            });
        }
        let full = self
            .replies
            .get(&prompt.query)
            .or(self.default_reply.as_ref())
            .cloned()
            .unwrap_or_default();
        let rest: Vec<char> = full
            .strip_prefix(prompt.generated.as_str())
            .unwrap_or(&full)
            .chars()
            .collect();
        if rest.len() <= max_new_tokens {
            Ok(Generation {
                text: rest.into_iter().collect(),
                stop: StopReason::Eos,
            })
        } else {
            Ok(Generation {
                text: rest[..max_new_tokens].iter().collect(),
                stop: StopReason::MaxTokens,
            })
        }
    }
}
