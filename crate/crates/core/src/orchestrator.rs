//! Greedy decoding with hand-off: the meta model decodes under the extended
//! head until it emits an expert token, then that expert continues from the
//! same text context.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{EtrError, Result};
use crate::head::{ExpertTokenHead, ExtendedDistribution};
use crate::lm::{argmax_where, LanguageModel, Prompt, StopReason};
use crate::vocab::{expert_token_display, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    pub max_new_tokens: usize,
    pub max_switches: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_new_tokens: 128,
            max_switches: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TraceEvent {
    /// A word token or EOS, as its display string.
    Token { step: usize, value: String },
    /// Hand-off to an expert, by display string of its token.
    Switch { step: usize, value: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub meta_ms: f64,
    pub expert_ms: f64,
    pub total_ms: f64,
}

/// The result of one session. `response` never contains expert tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub response: String,
    pub switched_to: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub switched_index: Option<usize>,
    pub partial: bool,
    pub stop: StopReason,
    pub latency_ms: Latency,
}

impl Trace {
    /// Events and response only; timings vary run to run.
    pub fn golden_json(&self) -> String {
        #[derive(Serialize)]
        struct Golden<'a> {
            events: &'a [TraceEvent],
            response: &'a str,
            switched_to: &'a Option<String>,
            partial: bool,
        }
        serde_json::to_string_pretty(&Golden {
            events: &self.events,
            response: &self.response,
            switched_to: &self.switched_to,
            partial: self.partial,
        })
        .expect("trace serializes")
            + "\n"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    /// Argmax over the expert logits alone.
    ExpertsOnly,
    /// Argmax over every emittable token; a word token means the meta model
    /// keeps decoding.
    FullVocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Meta,
    Expert(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub chosen: Choice,
    pub step: usize,
    pub distribution: ExtendedDistribution,
}

/// Meta model, expert head and experts. Immutable and shareable across
/// sessions.
#[derive(Clone)]
pub struct Framework {
    meta: Arc<dyn LanguageModel>,
    head: ExpertTokenHead,
    experts: Vec<Arc<dyn LanguageModel>>,
    vocab: Vocabulary,
}

impl std::fmt::Debug for Framework {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Framework")
            .field("meta", &self.meta.name())
            .field("experts", &self.experts.iter().map(|e| e.name().to_string()).collect::<Vec<_>>())
            .finish()
    }
}

impl Framework {
    pub fn new(
        meta: Arc<dyn LanguageModel>,
        head: ExpertTokenHead,
        experts: Vec<Arc<dyn LanguageModel>>,
    ) -> Result<Self> {
        let caps = meta.capabilities();
        for (ok, cap) in [(caps.hidden_state, "hidden_state"), (caps.word_logits, "word_logits")] {
            if !ok {
                return Err(EtrError::MissingCapability {
                    backend: meta.name().to_string(),
                    capability: cap,
                });
            }
        }
        head.check_compatible(meta.as_ref())?;
        if head.len() != experts.len() {
            return Err(EtrError::DimensionMismatch {
                what: "experts behind the head",
                expected: head.len(),
                got: experts.len(),
            });
        }
        for e in &experts {
            if !e.capabilities().generate {
                return Err(EtrError::MissingCapability {
                    backend: e.name().to_string(),
                    capability: "generate",
                });
            }
        }
        let vocab = meta
            .vocabulary()
            .ok_or_else(|| EtrError::config("meta model must expose its vocabulary"))?
            .clone();
        Ok(Framework {
            meta,
            head,
            experts,
            vocab,
        })
    }

    pub fn meta(&self) -> &Arc<dyn LanguageModel> {
        &self.meta
    }

    pub fn head(&self) -> &ExpertTokenHead {
        &self.head
    }

    pub fn experts(&self) -> &[Arc<dyn LanguageModel>] {
        &self.experts
    }

    fn distribution(&self, prompt: &Prompt) -> Result<ExtendedDistribution> {
        let (h, z) = self.meta.hidden_and_logits(prompt)?;
        Ok(ExtendedDistribution::from_logits(
            &self.head.extended_logits(&h, &z)?,
            z.len(),
        ))
    }

    fn allowed(&self, id: usize) -> bool {
        let v = self.vocab.size();
        if id < v {
            self.vocab.is_emittable(id as TokenId)
        } else {
            id < v + self.head.len()
        }
    }

    /// Decodes `query` to EOS or the token limit.
    pub fn generate(&self, query: &str, limits: &Limits) -> Result<Trace> {
        if query.is_empty() {
            return Err(EtrError::config("query must not be empty"));
        }
        let start = Instant::now();
        let v = self.vocab.size();
        let mut prompt = Prompt::new(query);
        let mut events = Vec::new();
        let mut emitted = 0usize;
        let mut partial = false;
        let mut stop = StopReason::MaxTokens;
        let mut meta_ms = 0.0;
        let mut expert_ms = 0.0;
        let mut switched: Option<usize> = None;
        while emitted < limits.max_new_tokens {
            let t = Instant::now();
            let logits = {
                let (h, z) = self.meta.hidden_and_logits(&prompt).map_err(|e| at_step(e, self.meta.name(), emitted))?;
                self.head.extended_logits(&h, &z)?
            };
            // softmax is monotone, so the argmax over logits is the argmax
            // of the extended distribution
            let id = argmax_where(&logits, |i| self.allowed(i)).expect("emittable tokens exist");
            meta_ms += ms(t);
            if id >= v {
                let k = id - v;
                // control never returns to the meta model, so at most one
                // switch can happen per session
                if limits.max_switches == 0 {
                    partial = true;
                    break;
                }
                events.push(TraceEvent::Switch {
                    step: emitted,
                    value: expert_token_display(k),
                });
                switched = Some(k);
                let t = Instant::now();
                let expert = &self.experts[k];
                let out = expert
                    .generate(&prompt, limits.max_new_tokens - emitted)
                    .map_err(|e| at_step(e, expert.name(), emitted))?;
                expert_ms += ms(t);
                for ch in out.text.chars() {
                    events.push(TraceEvent::Token {
                        step: emitted,
                        value: ch.to_string(),
                    });
                    emitted += 1;
                }
                prompt.generated.push_str(&out.text);
                if out.stop == StopReason::Eos {
                    events.push(TraceEvent::Token {
                        step: emitted,
                        value: self.vocab.display(self.vocab.eos(), 0)?,
                    });
                }
                stop = out.stop;
                break;
            }
            let id = id as TokenId;
            events.push(TraceEvent::Token {
                step: emitted,
                value: self.vocab.display(id, 0)?,
            });
            if id == self.vocab.eos() {
                stop = StopReason::Eos;
                break;
            }
            prompt.generated.push_str(&self.vocab.decode(&[id])?);
            emitted += 1;
        }
        Ok(Trace {
            events,
            response: prompt.generated,
            switched_to: switched.map(|k| self.head.experts()[k].name.clone()),
            switched_index: switched,
            partial,
            stop,
            latency_ms: Latency {
                meta_ms,
                expert_ms,
                total_ms: ms(start),
            },
        })
    }

    /// One extended-distribution evaluation right after the query.
    pub fn route_only(&self, query: &str, mode: RoutingMode) -> Result<RoutingDecision> {
        if query.is_empty() {
            return Err(EtrError::config("query must not be empty"));
        }
        let distribution = self.distribution(&Prompt::new(query))?;
        let v = self.vocab.size();
        let chosen = match mode {
            RoutingMode::ExpertsOnly => distribution
                .top_expert()
                .map(Choice::Expert)
                .ok_or_else(|| EtrError::config("routing needs at least one expert"))?,
            RoutingMode::FullVocabulary => match distribution.argmax(|i| self.allowed(i)) {
                Some(id) if id as usize >= v => Choice::Expert(id as usize - v),
                _ => Choice::Meta,
            },
        };
        Ok(RoutingDecision {
            chosen,
            step: 0,
            distribution,
        })
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn at_step(e: EtrError, backend: &str, step: usize) -> EtrError {
    match e {
        EtrError::Backend { backend, message, .. } => EtrError::Backend { backend, step, message },
        other => EtrError::Backend {
            backend: backend.to_string(),
            step,
            message: other.to_string(),
        },
    }
}
