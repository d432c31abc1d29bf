//! The expert-token head `W_E`: one `d`-dimensional row per expert,
//! appended below the meta model's frozen word head.
//!
//! The next-token distribution of the meta model becomes
//! `softmax([W_V·h + b_V ; W_E·h])`. Expert rows carry no bias. Training
//! touches nothing but `W_E`.

use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::collector::ExpertQuerySet;
use crate::domains::QueryResponsePair;
use crate::error::{EtrError, Result};
use crate::lm::{argmax_where, LanguageModel, Prompt};
use crate::optim::{AdamW, TrainConfig};
use crate::tensor::{self, decode_f32_b64, encode_f32_b64, log_sum_exp, round_to_f32};
use crate::vocab::{expert_token_display, TokenId};

pub const HEAD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertInfo {
    pub name: String,
    /// Opaque reference to where the expert is served (address, path or
    /// registry name).
    pub backend: String,
}

impl ExpertInfo {
    pub fn new(name: impl Into<String>, backend: impl Into<String>) -> Self {
        ExpertInfo {
            name: name.into(),
            backend: backend.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTokenHead {
    dim: usize,
    fingerprint: String,
    experts: Vec<ExpertInfo>,
    /// Row-major `|E| × d`.
    weights: Vec<f64>,
}

impl ExpertTokenHead {
    /// Every row starts as the mean of the meta model's word-head rows.
    pub fn init(meta: &Backbone, experts: Vec<ExpertInfo>) -> Result<Self> {
        if experts.is_empty() {
            return Err(EtrError::config("an expert head needs at least one expert"));
        }
        let dims = meta.dims();
        let wv = meta.params().word_head();
        let mut mean = vec![0.0; dims.d];
        for row in wv.chunks_exact(dims.d) {
            tensor::axpy(1.0, row, &mut mean);
        }
        for m in &mut mean {
            *m /= dims.vocab as f64;
        }
        round_to_f32(&mut mean);
        let weights = mean.repeat(experts.len());
        Ok(ExpertTokenHead {
            dim: dims.d,
            fingerprint: meta.fingerprint(),
            experts,
            weights,
        })
    }

    /// A head with no experts; attaching it leaves the meta model unchanged.
    pub fn empty(dim: usize, fingerprint: impl Into<String>) -> Self {
        ExpertTokenHead {
            dim,
            fingerprint: fingerprint.into(),
            experts: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn from_parts(
        dim: usize,
        fingerprint: impl Into<String>,
        experts: Vec<ExpertInfo>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != experts.len() * dim {
            return Err(EtrError::DimensionMismatch {
                what: "expert head weights",
                expected: experts.len() * dim,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(EtrError::format("expert head contains non-finite values"));
        }
        Ok(ExpertTokenHead {
            dim,
            fingerprint: fingerprint.into(),
            experts,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn experts(&self) -> &[ExpertInfo] {
        &self.experts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.dim..(i + 1) * self.dim]
    }

    /// Number of tunable parameters, `|E|·d`.
    pub fn trainable_params(&self) -> usize {
        self.weights.len()
    }

    /// Refuses a meta model whose parameters differ from the ones this head
    /// was trained against.
    pub fn check_compatible(&self, meta: &dyn LanguageModel) -> Result<()> {
        if let Some(d) = meta.hidden_dim() {
            if d != self.dim {
                return Err(EtrError::DimensionMismatch {
                    what: "expert head dim",
                    expected: d,
                    got: self.dim,
                });
            }
        }
        match meta.fingerprint() {
            Some(found) if found == self.fingerprint => Ok(()),
            Some(found) => Err(EtrError::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found,
            }),
            None => Err(EtrError::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found: "<none>".to_string(),
            }),
        }
    }

    /// `W_E·h`
    pub fn expert_logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim {
            return Err(EtrError::DimensionMismatch {
                what: "hidden state",
                expected: self.dim,
                got: h.len(),
            });
        }
        let mut out = vec![0.0; self.len()];
        tensor::matvec_bias(&self.weights, None, h, &mut out);
        Ok(out)
    }

    /// Concatenation of word logits and expert logits.
    pub fn extended_logits(&self, h: &[f64], word_logits: &[f64]) -> Result<Vec<f64>> {
        let mut logits = word_logits.to_vec();
        logits.extend(self.expert_logits(h)?);
        Ok(logits)
    }

    /// The meta model's next-token distribution over words and experts.
    pub fn extended_distribution(
        &self,
        meta: &dyn LanguageModel,
        prompt: &Prompt,
    ) -> Result<ExtendedDistribution> {
        self.check_compatible(meta)?;
        let h = meta.hidden_state(prompt)?;
        let word_logits = meta.word_logits(prompt)?;
        Ok(ExtendedDistribution::from_logits(
            &self.extended_logits(&h, &word_logits)?,
            word_logits.len(),
        ))
    }

    /// Appends the rows of `new_heads` in order. Existing rows are copied
    /// unchanged.
    pub fn extend(&self, new_heads: &[ExpertTokenHead]) -> Result<Self> {
        let mut out = self.clone();
        for h in new_heads {
            if h.dim != self.dim {
                return Err(EtrError::DimensionMismatch {
                    what: "expert head dim",
                    expected: self.dim,
                    got: h.dim,
                });
            }
            if h.fingerprint != self.fingerprint {
                return Err(EtrError::FingerprintMismatch {
                    expected: self.fingerprint.clone(),
                    found: h.fingerprint.clone(),
                });
            }
            out.experts.extend(h.experts.iter().cloned());
            out.weights.extend_from_slice(&h.weights);
        }
        Ok(out)
    }

    /// Head restricted to the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut experts = Vec::with_capacity(rows.len());
        let mut weights = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            let info = self
                .experts
                .get(r)
                .ok_or_else(|| EtrError::config(format!("row {r} out of range")))?;
            experts.push(info.clone());
            weights.extend_from_slice(self.row(r));
        }
        Self::from_parts(self.dim, self.fingerprint.clone(), experts, weights)
    }

    pub fn to_json(&self) -> String {
        let file = HeadFile {
            format_version: HEAD_FORMAT_VERSION,
            dim: self.dim,
            backbone_fingerprint: self.fingerprint.clone(),
            experts: self
                .experts
                .iter()
                .enumerate()
                .map(|(i, e)| ExpertRecord {
                    name: e.name.clone(),
                    token: expert_token_display(i),
                    backend: e.backend.clone(),
                    embedding_b64: encode_f32_b64(self.row(i)),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("head serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: HeadFile = serde_json::from_str(text)?;
        if file.format_version != HEAD_FORMAT_VERSION {
            return Err(EtrError::format(format!(
                "unsupported head format_version {}",
                file.format_version
            )));
        }
        let mut experts = Vec::with_capacity(file.experts.len());
        let mut weights = Vec::with_capacity(file.experts.len() * file.dim);
        for (i, rec) in file.experts.into_iter().enumerate() {
            if rec.token != expert_token_display(i) {
                return Err(EtrError::format(format!(
                    "expert {i} has token {:?}, expected {:?}",
                    rec.token,
                    expert_token_display(i)
                )));
            }
            let row = decode_f32_b64(&rec.embedding_b64)?;
            if row.len() != file.dim {
                return Err(EtrError::DimensionMismatch {
                    what: "expert embedding",
                    expected: file.dim,
                    got: row.len(),
                });
            }
            weights.extend(row);
            experts.push(ExpertInfo {
                name: rec.name,
                backend: rec.backend,
            });
        }
        Self::from_parts(file.dim, file.backbone_fingerprint, experts, weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ExpertRecord {
    name: String,
    token: String,
    backend: String,
    embedding_b64: String,
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    format_version: u32,
    dim: usize,
    backbone_fingerprint: String,
    experts: Vec<ExpertRecord>,
}

/// Probabilities over `V ∪ E`; word tokens first.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedDistribution {
    probs: Vec<f64>,
    vocab_size: usize,
}

impl ExtendedDistribution {
    pub fn from_logits(logits: &[f64], vocab_size: usize) -> Self {
        ExtendedDistribution {
            probs: tensor::softmax(logits),
            vocab_size,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn word_probs(&self) -> &[f64] {
        &self.probs[..self.vocab_size]
    }

    pub fn expert_probs(&self) -> &[f64] {
        &self.probs[self.vocab_size..]
    }

    /// Most probable expert; ties go to the lowest index.
    pub fn top_expert(&self) -> Option<usize> {
        argmax_where(self.expert_probs(), |_| true)
    }

    pub fn argmax(&self, allowed: impl Fn(usize) -> bool) -> Option<TokenId> {
        argmax_where(&self.probs, allowed).map(|i| i as TokenId)
    }
}

/// Fixed inputs for one training example: frozen features and the target
/// global token id.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadExample {
    pub hidden: Vec<f64>,
    pub word_logits: Vec<f64>,
    pub target: usize,
}

/// Precomputed features for expert-head training. The meta model is only
/// read while these are built.
#[derive(Debug, Clone, Default)]
pub struct HeadFeatures {
    pub examples: Vec<HeadExample>,
    /// Number of expert rows the targets refer to.
    pub experts: usize,
}

impl HeadFeatures {
    /// Query set `k` supervises expert row `k`: the prefix is the query
    /// through its trailing SEP, the target is `<ExpertToken_k>`. Optional
    /// negatives target the true first response token instead.
    pub fn build(
        meta: &dyn LanguageModel,
        query_sets: &[ExpertQuerySet],
        negatives: &[QueryResponsePair],
    ) -> Result<Self> {
        let vocab = meta
            .vocabulary()
            .ok_or_else(|| EtrError::config("meta model must expose its vocabulary"))?
            .clone();
        let v = vocab.size();
        let mut examples = Vec::new();
        for (k, set) in query_sets.iter().enumerate() {
            if set.pairs.is_empty() {
                return Err(EtrError::EmptyQuerySet {
                    expert: set.label(),
                });
            }
            for pair in &set.pairs {
                examples.push(Self::example(meta, &pair.query, v + k)?);
            }
        }
        for pair in negatives {
            let first = pair
                .response
                .chars()
                .next()
                .ok_or(EtrError::EmptyResponse)?;
            let id = vocab
                .id_of(first)
                .ok_or(EtrError::UnsupportedChar { ch: first, offset: 0 })?;
            examples.push(Self::example(meta, &pair.query, id as usize)?);
        }
        Ok(HeadFeatures {
            examples,
            experts: query_sets.len(),
        })
    }

    fn example(meta: &dyn LanguageModel, query: &str, target: usize) -> Result<HeadExample> {
        let prompt = Prompt::new(query);
        Ok(HeadExample {
            hidden: meta.hidden_state(&prompt)?,
            word_logits: meta.word_logits(&prompt)?,
            target,
        })
    }
}

/// Cross-entropy of the extended softmax summed over `indices`; adds
/// `∂L/∂W_E` into `grad`. For expert row `k` and one example this is
/// `(p_k − 1[k = target])·h`.
pub fn head_loss_and_grad(
    weights: &[f64],
    dim: usize,
    examples: &[HeadExample],
    indices: &[usize],
    grad: &mut [f64],
) -> f64 {
    let experts = weights.len() / dim;
    let mut logits = Vec::new();
    let mut total = 0.0;
    for &i in indices {
        let ex = &examples[i];
        let v = ex.word_logits.len();
        logits.clear();
        logits.extend_from_slice(&ex.word_logits);
        for k in 0..experts {
            logits.push(tensor::dot(&weights[k * dim..(k + 1) * dim], &ex.hidden));
        }
        let lse = log_sum_exp(&logits);
        total += lse - logits[ex.target];
        for k in 0..experts {
            let p = (logits[v + k] - lse).exp();
            let coeff = p - if ex.target == v + k { 1.0 } else { 0.0 };
            tensor::axpy(coeff, &ex.hidden, &mut grad[k * dim..(k + 1) * dim]);
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub examples: usize,
    pub trainable_params: usize,
}

/// Trains `W_E` against frozen features with AdamW; nothing else changes.
pub fn train_head_on_features(
    head: &ExpertTokenHead,
    features: &HeadFeatures,
    cfg: &TrainConfig,
) -> Result<(ExpertTokenHead, HeadTrainReport)> {
    cfg.validate()?;
    if features.experts != head.len() {
        return Err(EtrError::DimensionMismatch {
            what: "query sets per expert row",
            expected: head.len(),
            got: features.experts,
        });
    }
    if features.examples.is_empty() {
        return Err(EtrError::EmptyCorpus);
    }
    let dim = head.dim;
    let examples = &features.examples;
    let mut weights = head.weights.clone();
    let all: Vec<usize> = (0..examples.len()).collect();
    let mut scratch = vec![0.0; weights.len()];
    let n = examples.len() as f64;
    let initial_loss = head_loss_and_grad(&weights, dim, examples, &all, &mut scratch) / n;

    let mut opt = AdamW::new(cfg, weights.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = all.clone();
    let mut grad = vec![0.0; weights.len()];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let loss = head_loss_and_grad(&weights, dim, examples, batch, &mut grad);
            if !loss.is_finite() {
                return Err(EtrError::NonFinite { step });
            }
            total += loss;
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad {
                *g *= scale;
            }
            opt.step(&mut weights, &grad);
            round_to_f32(&mut weights);
            if weights.iter().any(|w| !w.is_finite()) {
                return Err(EtrError::NonFinite { step });
            }
            step += 1;
        }
        debug!("head epoch {epoch}: loss {:.4}", total / n);
        epoch_losses.push(total / n);
    }
    scratch.fill(0.0);
    let final_loss = head_loss_and_grad(&weights, dim, examples, &all, &mut scratch) / n;
    let trained = ExpertTokenHead {
        weights,
        ..head.clone()
    };
    let report = HeadTrainReport {
        initial_loss,
        final_loss,
        epoch_losses,
        steps: opt.steps(),
        examples: examples.len(),
        trainable_params: trained.trainable_params(),
    };
    Ok((trained, report))
}

/// Builds features from `meta` and trains. Query set `k` supervises row `k`.
pub fn train_head(
    head: &ExpertTokenHead,
    meta: &dyn LanguageModel,
    query_sets: &[ExpertQuerySet],
    cfg: &TrainConfig,
) -> Result<(ExpertTokenHead, HeadTrainReport)> {
    head.check_compatible(meta)?;
    if query_sets.len() != head.len() {
        return Err(EtrError::DimensionMismatch {
            what: "query sets per expert row",
            expected: head.len(),
            got: query_sets.len(),
        });
    }
    let features = HeadFeatures::build(meta, query_sets, &[])?;
    train_head_on_features(head, &features, cfg)
}
