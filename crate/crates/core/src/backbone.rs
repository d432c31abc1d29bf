//! Fixed-window neural n-gram language model.
//!
//! The last `W` tokens are embedded, concatenated, and passed through one
//! `tanh` layer to give the hidden state `h` (dimension `d`). Word logits are
//! `W_V·h + b_V`. Gradients are derived by hand; there is no autodiff.
//!
//! Parameters are held as `f64` but rounded to the nearest `f32` after every
//! optimizer step, so a trained model and its checkpoint agree bit-for-bit.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EtrError, Result};
pub use crate::lm::PairLoss;
use crate::lm::{argmax_where, Capabilities, Generation, LanguageModel, Prompt, StopReason};
use crate::optim::{AdamW, TrainConfig};
use crate::tensor::{self, decode_f32_b64, encode_f32_b64, log_sum_exp, round_to_f32};
use crate::vocab::{TokenId, Vocabulary};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    /// Input embedding width.
    pub e: usize,
    /// Hidden width; the dimension of every expert-token row.
    pub d: usize,
    /// Context window length.
    #[serde(rename = "W")]
    pub window: usize,
    /// Word vocabulary size `|V|`.
    #[serde(rename = "V")]
    pub vocab: usize,
}

impl Dims {
    pub fn toy(vocab: usize) -> Self {
        Dims {
            e: 32,
            d: 64,
            window: 16,
            vocab,
        }
    }

    pub fn input_width(&self) -> usize {
        self.window * self.e
    }

    fn validate(&self) -> Result<()> {
        if self.e == 0 || self.d == 0 || self.window == 0 || self.vocab == 0 {
            return Err(EtrError::config(format!("all dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Tensor names, in storage order.
pub const TENSOR_NAMES: [&str; 5] = [
    "token_embeddings",
    "hidden_weights",
    "hidden_bias",
    "word_head",
    "word_head_bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    dims: Dims,
    data: Vec<f64>,
}

impl BackboneParams {
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.validate()?;
        let n = Self::layout(&dims).last().expect("five tensors").end;
        Ok(BackboneParams {
            dims,
            data: vec![0.0; n],
        })
    }

    /// Uniform fan-in scaled initialization, rounded to `f32`.
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = 0.1;
        let hid = 1.0 / (dims.input_width() as f64).sqrt();
        let out = 1.0 / (dims.d as f64).sqrt();
        for v in p.embeddings_mut() {
            *v = rng.random_range(-emb..emb);
        }
        for v in p.hidden_weights_mut() {
            *v = rng.random_range(-hid..hid);
        }
        for v in p.word_head_mut() {
            *v = rng.random_range(-out..out);
        }
        round_to_f32(&mut p.data);
        Ok(p)
    }

    fn layout(dims: &Dims) -> [Range<usize>; 5] {
        let sizes = [
            dims.vocab * dims.e,
            dims.d * dims.input_width(),
            dims.d,
            dims.vocab * dims.d,
            dims.vocab,
        ];
        let mut start = 0;
        sizes.map(|n| {
            let r = start..start + n;
            start += n;
            r
        })
    }

    fn shapes(dims: &Dims) -> [Vec<usize>; 5] {
        [
            vec![dims.vocab, dims.e],
            vec![dims.d, dims.input_width()],
            vec![dims.d],
            vec![dims.vocab, dims.d],
            vec![dims.vocab],
        ]
    }

    fn range(&self, i: usize) -> Range<usize> {
        Self::layout(&self.dims)[i].clone()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let i = TENSOR_NAMES.iter().position(|n| *n == name)?;
        Some(&self.data[self.range(i)])
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.data[self.range(0)]
    }

    pub fn embeddings_mut(&mut self) -> &mut [f64] {
        let r = self.range(0);
        &mut self.data[r]
    }

    pub fn hidden_weights(&self) -> &[f64] {
        &self.data[self.range(1)]
    }

    pub fn hidden_weights_mut(&mut self) -> &mut [f64] {
        let r = self.range(1);
        &mut self.data[r]
    }

    pub fn hidden_bias(&self) -> &[f64] {
        &self.data[self.range(2)]
    }

    pub fn hidden_bias_mut(&mut self) -> &mut [f64] {
        let r = self.range(2);
        &mut self.data[r]
    }

    /// `W_V`, `|V| × d`.
    pub fn word_head(&self) -> &[f64] {
        &self.data[self.range(3)]
    }

    pub fn word_head_mut(&mut self) -> &mut [f64] {
        let r = self.range(3);
        &mut self.data[r]
    }

    pub fn word_head_bias(&self) -> &[f64] {
        &self.data[self.range(4)]
    }

    pub fn word_head_bias_mut(&mut self) -> &mut [f64] {
        let r = self.range(4);
        &mut self.data[r]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// SHA-256 over the dims and every parameter's bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"etr-backbone-v1");
        for n in [self.dims.e, self.dims.d, self.dims.window, self.dims.vocab] {
            hasher.update((n as u64).to_le_bytes());
        }
        for v in &self.data {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    dims: Dims,
    tensors: BTreeMap<String, TensorRecord>,
}

impl BackboneParams {
    pub fn to_checkpoint_json(&self) -> String {
        let shapes = Self::shapes(&self.dims);
        let tensors = TENSOR_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let record = TensorRecord {
                    shape: shapes[i].clone(),
                    data_b64: encode_f32_b64(&self.data[self.range(i)]),
                };
                (name.to_string(), record)
            })
            .collect();
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dims: self.dims,
            tensors,
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(EtrError::format(format!(
                "unsupported checkpoint format_version {}",
                file.format_version
            )));
        }
        let mut params = Self::zeros(file.dims)?;
        let shapes = Self::shapes(&file.dims);
        for (i, name) in TENSOR_NAMES.iter().enumerate() {
            let record = file
                .tensors
                .get(*name)
                .ok_or_else(|| EtrError::format(format!("checkpoint missing tensor {name}")))?;
            if record.shape != shapes[i] {
                return Err(EtrError::format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    record.shape, shapes[i]
                )));
            }
            let values = decode_f32_b64(&record.data_b64)?;
            let range = params.range(i);
            if values.len() != range.len() {
                return Err(EtrError::format(format!(
                    "tensor {name} holds {} values, expected {}",
                    values.len(),
                    range.len()
                )));
            }
            params.data[range].copy_from_slice(&values);
        }
        Ok(params)
    }
}

/// A token sequence for language-model training. Next-token targets start at
/// position `loss_from` (at least 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSequence {
    pub tokens: Vec<TokenId>,
    pub loss_from: usize,
}

/// Flattened `(window, target)` pairs.
#[derive(Debug, Clone, Default)]
pub struct TrainingExamples {
    window: usize,
    windows: Vec<TokenId>,
    targets: Vec<TokenId>,
}

impl TrainingExamples {
    pub fn new(window: usize) -> Self {
        TrainingExamples {
            window,
            ..Default::default()
        }
    }

    pub fn push(&mut self, context: &[TokenId], pad: TokenId, target: TokenId) {
        let take = context.len().min(self.window);
        self.windows
            .extend(std::iter::repeat_n(pad, self.window - take));
        self.windows
            .extend_from_slice(&context[context.len() - take..]);
        self.targets.push(target);
    }

    pub fn from_sequences(seqs: &[TrainingSequence], window: usize, pad: TokenId) -> Self {
        let mut ex = Self::new(window);
        for seq in seqs {
            for p in seq.loss_from.max(1)..seq.tokens.len() {
                ex.push(&seq.tokens[..p], pad, seq.tokens[p]);
            }
        }
        ex
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn window(&self, i: usize) -> &[TokenId] {
        &self.windows[i * self.window..(i + 1) * self.window]
    }

    pub fn target(&self, i: usize) -> TokenId {
        self.targets[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean per-token loss over each epoch's minibatches.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub examples: usize,
}

/// Scratch space for one forward/backward pass.
struct Workspace {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    dh: Vec<f64>,
    dx: Vec<f64>,
}

impl Workspace {
    fn new(dims: &Dims) -> Self {
        Workspace {
            x: vec![0.0; dims.input_width()],
            h: vec![0.0; dims.d],
            z: vec![0.0; dims.vocab],
            dh: vec![0.0; dims.d],
            dx: vec![0.0; dims.input_width()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    name: String,
    vocab: Vocabulary,
    params: BackboneParams,
}

impl Backbone {
    pub fn new(name: impl Into<String>, vocab: Vocabulary, params: BackboneParams) -> Result<Self> {
        if params.dims.vocab != vocab.size() {
            return Err(EtrError::DimensionMismatch {
                what: "vocabulary size",
                expected: vocab.size(),
                got: params.dims.vocab,
            });
        }
        Ok(Backbone {
            name: name.into(),
            vocab,
            params,
        })
    }

    /// A freshly initialized toy backbone.
    pub fn init(name: impl Into<String>, vocab: Vocabulary, dims: Dims, seed: u64) -> Result<Self> {
        let params = BackboneParams::init(dims, seed)?;
        Self::new(name, vocab, params)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dims(&self) -> Dims {
        self.params.dims
    }

    pub fn params(&self) -> &BackboneParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BackboneParams {
        &mut self.params
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.params.dims.vocab) {
            Some(&id) => Err(EtrError::TokenOutOfRange(id)),
            None => Ok(()),
        }
    }

    fn embed_window(&self, window: &[TokenId], x: &mut [f64]) {
        let e = self.params.dims.e;
        let emb = self.params.embeddings();
        for (slot, &id) in window.iter().enumerate() {
            let id = id as usize;
            x[slot * e..(slot + 1) * e].copy_from_slice(&emb[id * e..(id + 1) * e]);
        }
    }

    fn hidden_into(&self, window: &[TokenId], ws: &mut Workspace) {
        self.embed_window(window, &mut ws.x);
        tensor::matvec_bias(
            self.params.hidden_weights(),
            Some(self.params.hidden_bias()),
            &ws.x,
            &mut ws.h,
        );
        for v in &mut ws.h {
            *v = v.tanh();
        }
    }

    fn window_of(&self, context: &[TokenId]) -> Vec<TokenId> {
        let w = self.params.dims.window;
        let take = context.len().min(w);
        let mut win = vec![self.vocab.bos(); w - take];
        win.extend_from_slice(&context[context.len() - take..]);
        win
    }

    /// Hidden state after consuming `context`; shorter contexts are
    /// left-padded with BOS.
    pub fn hidden_state_ids(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        if context.is_empty() {
            return Err(EtrError::format("hidden_state requires a non-empty context"));
        }
        self.check_ids(context)?;
        let mut ws = Workspace::new(&self.params.dims);
        self.hidden_into(&self.window_of(context), &mut ws);
        Ok(ws.h)
    }

    /// `W_V·h + b_V`, no softmax.
    pub fn word_logits_from_hidden(&self, h: &[f64]) -> Result<Vec<f64>> {
        let d = self.params.dims.d;
        if h.len() != d {
            return Err(EtrError::DimensionMismatch {
                what: "hidden state",
                expected: d,
                got: h.len(),
            });
        }
        let mut z = vec![0.0; self.params.dims.vocab];
        tensor::matvec_bias(
            self.params.word_head(),
            Some(self.params.word_head_bias()),
            h,
            &mut z,
        );
        Ok(z)
    }

    /// Teacher-forced Σ −log P(x_k | query, x_<k) over the response tokens,
    /// plus EOS when `include_eos` is set.
    pub fn pair_loss(&self, query: &str, response: &str, include_eos: bool) -> Result<PairLoss> {
        if response.is_empty() {
            return Err(EtrError::EmptyResponse);
        }
        let mut ids = Prompt::new(query).to_ids(&self.vocab)?;
        let mut targets = self.vocab.encode(response)?;
        if include_eos {
            targets.push(self.vocab.eos());
        }
        let mut ws = Workspace::new(&self.params.dims);
        let mut nats = 0.0;
        for &t in &targets {
            self.hidden_into(&self.window_of(&ids), &mut ws);
            tensor::matvec_bias(
                self.params.word_head(),
                Some(self.params.word_head_bias()),
                &ws.h,
                &mut ws.z,
            );
            nats += log_sum_exp(&ws.z) - ws.z[t as usize];
            ids.push(t);
        }
        Ok(PairLoss {
            nats,
            tokens: targets.len(),
        })
    }

    /// Greedy decoding over word tokens until EOS or `max_new_tokens`.
    /// Controls other than EOS are never emitted; ties go to the lowest id.
    pub fn generate_text(&self, prompt: &Prompt, max_new_tokens: usize) -> Result<Generation> {
        let mut ids = prompt.to_ids(&self.vocab)?;
        let mut text = String::new();
        let mut ws = Workspace::new(&self.params.dims);
        for _ in 0..max_new_tokens {
            self.hidden_into(&self.window_of(&ids), &mut ws);
            tensor::matvec_bias(
                self.params.word_head(),
                Some(self.params.word_head_bias()),
                &ws.h,
                &mut ws.z,
            );
            let id = argmax_where(&ws.z, |i| self.vocab.is_emittable(i as TokenId))
                .expect("vocabulary has emittable tokens") as TokenId;
            if id == self.vocab.eos() {
                return Ok(Generation {
                    text,
                    stop: StopReason::Eos,
                });
            }
            text.push_str(&self.vocab.decode(&[id])?);
            ids.push(id);
        }
        Ok(Generation {
            text,
            stop: StopReason::MaxTokens,
        })
    }

    /// Sum of per-example cross-entropy over `indices`, adding gradients into
    /// `grad` (same layout as the parameters).
    pub fn loss_and_grad(
        &self,
        examples: &TrainingExamples,
        indices: &[usize],
        grad: &mut [f64],
    ) -> f64 {
        let dims = self.params.dims;
        let (d, e, v) = (dims.d, dims.e, dims.vocab);
        let layout = BackboneParams::layout(&dims);
        let mut ws = Workspace::new(&dims);
        let wv = self.params.word_head();
        let hw = self.params.hidden_weights();
        let mut total = 0.0;
        for &i in indices {
            let window = examples.window(i);
            let target = examples.target(i) as usize;
            self.hidden_into(window, &mut ws);
            tensor::matvec_bias(wv, Some(self.params.word_head_bias()), &ws.h, &mut ws.z);
            let lse = log_sum_exp(&ws.z);
            total += lse - ws.z[target];

            // dz = softmax(z) - onehot(target), stored in z
            for (r, zr) in ws.z.iter_mut().enumerate() {
                *zr = (*zr - lse).exp() - if r == target { 1.0 } else { 0.0 };
            }
            ws.dh.fill(0.0);
            {
                let (g_wv, g_bv) = grad[layout[3].start..layout[4].end].split_at_mut(v * d);
                for r in 0..v {
                    let dz = ws.z[r];
                    g_bv[r] += dz;
                    tensor::axpy(dz, &ws.h, &mut g_wv[r * d..(r + 1) * d]);
                    tensor::axpy(dz, &wv[r * d..(r + 1) * d], &mut ws.dh);
                }
            }
            // through tanh
            for (dh, h) in ws.dh.iter_mut().zip(&ws.h) {
                *dh *= 1.0 - h * h;
            }
            ws.dx.fill(0.0);
            let width = dims.input_width();
            {
                let (g_hw, g_hb) = grad[layout[1].start..layout[2].end].split_at_mut(d * width);
                for r in 0..d {
                    let da = ws.dh[r];
                    g_hb[r] += da;
                    tensor::axpy(da, &ws.x, &mut g_hw[r * width..(r + 1) * width]);
                    tensor::axpy(da, &hw[r * width..(r + 1) * width], &mut ws.dx);
                }
            }
            let g_emb = &mut grad[layout[0].clone()];
            for (slot, &id) in window.iter().enumerate() {
                let id = id as usize;
                tensor::axpy(
                    1.0,
                    &ws.dx[slot * e..(slot + 1) * e],
                    &mut g_emb[id * e..(id + 1) * e],
                );
            }
        }
        total
    }

    /// Mean per-example loss, no gradient.
    pub fn mean_loss(&self, examples: &TrainingExamples) -> f64 {
        if examples.is_empty() {
            return f64::NAN;
        }
        let mut ws = Workspace::new(&self.params.dims);
        let mut total = 0.0;
        for i in 0..examples.len() {
            self.hidden_into(examples.window(i), &mut ws);
            tensor::matvec_bias(
                self.params.word_head(),
                Some(self.params.word_head_bias()),
                &ws.h,
                &mut ws.z,
            );
            total += log_sum_exp(&ws.z) - ws.z[examples.target(i) as usize];
        }
        total / examples.len() as f64
    }

    /// Next-token cross-entropy training with AdamW. Minibatch gradients are
    /// averaged over the batch; example order is shuffled per epoch from
    /// `cfg.seed`.
    pub fn train(&mut self, corpus: &[TrainingSequence], cfg: &TrainConfig) -> Result<TrainReport> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(EtrError::EmptyCorpus);
        }
        for seq in corpus {
            self.check_ids(&seq.tokens)?;
        }
        let examples =
            TrainingExamples::from_sequences(corpus, self.params.dims.window, self.vocab.bos());
        if examples.is_empty() {
            return Err(EtrError::EmptyCorpus);
        }
        let initial_loss = self.mean_loss(&examples);
        let mut opt = AdamW::new(cfg, self.params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut grad = vec![0.0; self.params.len()];
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut step = 0usize;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                grad.fill(0.0);
                let loss = self.loss_and_grad(&examples, batch, &mut grad);
                if !loss.is_finite() {
                    return Err(EtrError::NonFinite { step });
                }
                epoch_total += loss;
                let scale = 1.0 / batch.len() as f64;
                for g in &mut grad {
                    *g *= scale;
                }
                opt.step(self.params.as_mut_slice(), &grad);
                round_to_f32(self.params.as_mut_slice());
                if !self.params.all_finite() {
                    return Err(EtrError::NonFinite { step });
                }
                step += 1;
            }
            let mean = epoch_total / examples.len() as f64;
            debug!("{}: epoch {epoch} loss {mean:.4}", self.name);
            epoch_losses.push(mean);
        }
        Ok(TrainReport {
            initial_loss,
            final_loss: self.mean_loss(&examples),
            epoch_losses,
            steps: opt.steps(),
            examples: examples.len(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.params.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load(name: impl Into<String>, vocab: Vocabulary, path: impl AsRef<Path>) -> Result<Self> {
        let params = BackboneParams::from_checkpoint_json(&std::fs::read_to_string(path)?)?;
        Self::new(name, vocab, params)
    }
}

impl LanguageModel for Backbone {
    fn pair_loss(&self, query: &str, response: &str, include_eos: bool) -> Result<PairLoss> {
        Backbone::pair_loss(self, query, response, include_eos)
    }

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
        Some(self.params.dims.d)
    }

    fn fingerprint(&self) -> Option<String> {
        Some(self.params.fingerprint())
    }

    fn hidden_state(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        self.hidden_state_ids(&prompt.to_ids(&self.vocab)?)
    }

    fn word_logits(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        let h = self.hidden_state(prompt)?;
        self.word_logits_from_hidden(&h)
    }

    fn hidden_and_logits(&self, prompt: &Prompt) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = self.hidden_state(prompt)?;
        let z = self.word_logits_from_hidden(&h)?;
        Ok((h, z))
    }

    fn generate(&self, prompt: &Prompt, max_new_tokens: usize) -> Result<Generation> {
        self.generate_text(prompt, max_new_tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Controls;

    fn small_dims(vocab: usize) -> Dims {
        Dims {
            e: 3,
            d: 4,
            window: 3,
            vocab,
        }
    }

    fn abc() -> Vocabulary {
        Vocabulary::new("abc", Controls::default()).unwrap()
    }

    #[test]
    fn zero_params_give_zero_hidden() {
        let v = abc();
        let m = Backbone::new("z", v.clone(), BackboneParams::zeros(small_dims(7)).unwrap()).unwrap();
        let h = m.hidden_state(&Prompt::new("abcab")).unwrap();
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn short_context_equals_bos_padded() {
        let m = Backbone::init("m", abc(), Dims { window: 6, ..small_dims(7) }, 3).unwrap();
        let bos = m.vocab().bos();
        let a = m.hidden_state_ids(&[bos, 4, 5]).unwrap();
        let b = m.hidden_state_ids(&[bos, bos, bos, bos, 4, 5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let m = Backbone::init("m", abc(), small_dims(7), 3).unwrap();
        assert!(matches!(
            m.hidden_state_ids(&[1, 7]),
            Err(EtrError::TokenOutOfRange(7))
        ));
        assert!(m.hidden_state_ids(&[]).is_err());
    }

    #[test]
    fn identity_head_logits() {
        let v = Vocabulary::new("", Controls::default()).unwrap();
        let dims = Dims {
            e: 1,
            d: 4,
            window: 1,
            vocab: 4,
        };
        let mut p = BackboneParams::zeros(dims).unwrap();
        for i in 0..4 {
            p.word_head_mut()[i * 4 + i] = 1.0;
        }
        let m = Backbone::new("id", v, p).unwrap();
        assert_eq!(
            m.word_logits_from_hidden(&[3.0, -1.0, 0.5, 0.0]).unwrap(),
            vec![3.0, -1.0, 0.5, 0.0]
        );
        assert!(matches!(
            m.word_logits_from_hidden(&[1.0]),
            Err(EtrError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_hidden_returns_bias() {
        let mut p = BackboneParams::init(small_dims(7), 1).unwrap();
        let bias: Vec<f64> = (0..7).map(|i| i as f64 * 0.25).collect();
        p.word_head_bias_mut().copy_from_slice(&bias);
        let m = Backbone::new("b", abc(), p).unwrap();
        assert_eq!(m.word_logits_from_hidden(&[0.0; 4]).unwrap(), bias);
    }

    #[test]
    fn logits_finite_under_fuzz() {
        let m = Backbone::init("m", Vocabulary::printable_ascii(), Dims::toy(99), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let h: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..=1.0)).collect();
            assert!(m.word_logits_from_hidden(&h).unwrap().iter().all(|z| z.is_finite()));
        }
    }

    /// Model over vocabulary {controls, 'a', 'b'} whose head ignores `h` and
    /// puts the given bias on every step.
    fn bias_only_model(bias: [f64; 6]) -> Backbone {
        let v = Vocabulary::new("ab", Controls::default()).unwrap();
        let mut p = BackboneParams::zeros(Dims {
            e: 2,
            d: 2,
            window: 2,
            vocab: 6,
        })
        .unwrap();
        p.word_head_bias_mut().copy_from_slice(&bias);
        Backbone::new("bias", v, p).unwrap()
    }

    #[test]
    fn pair_loss_half_probability_tokens() {
        // P('a') = P('b') = 0.5, every other token has probability ~0
        let n = -1e9;
        let m = bias_only_model([n, n, n, n, 0.0, 0.0]);
        let loss = m.pair_loss("a", "ab", false).unwrap();
        assert!((loss.nats - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(loss.tokens, 2);
    }

    #[test]
    fn pair_loss_perfect_prediction_is_zero() {
        let n = -1e9;
        let m = bias_only_model([n, n, n, n, 0.0, n]);
        let loss = m.pair_loss("b", "aaa", false).unwrap();
        assert_eq!(loss.nats, 0.0);
        assert!(matches!(
            m.pair_loss("a", "", true),
            Err(EtrError::EmptyResponse)
        ));
    }

    #[test]
    fn pair_loss_matches_per_step_softmax() {
        let m = Backbone::init("m", abc(), small_dims(7), 9).unwrap();
        let loss = m.pair_loss("cab", "ab", true).unwrap();
        // independent route: full context ids, softmax per step
        let mut ids = vec![1, 6, 4, 5, 3];
        let mut expected = 0.0;
        for t in [4u32, 5, 2] {
            let h = m.hidden_state_ids(&ids).unwrap();
            let z = m.word_logits_from_hidden(&h).unwrap();
            let p = tensor::softmax(&z);
            expected -= p[t as usize].ln();
            ids.push(t);
        }
        assert!((loss.nats - expected).abs() < 1e-12 * expected.max(1.0));
        assert_eq!(loss.tokens, 3);
    }

    #[test]
    fn generate_stops_immediately_on_eos() {
        let n = -1e9;
        let m = bias_only_model([n, 5.0, 10.0, n, 0.0, 0.0]);
        let g = m.generate_text(&Prompt::new("ab"), 10).unwrap();
        assert_eq!(g.text, "");
        assert_eq!(g.stop, StopReason::Eos);
        let g = m.generate_text(&Prompt::new("ab"), 0).unwrap();
        assert_eq!(g.text, "");
        assert_eq!(g.stop, StopReason::MaxTokens);
    }

    #[test]
    fn generate_skips_non_eos_controls() {
        let n = -1e9;
        // BOS has the top logit but is never emitted; 'b' wins among the rest
        let m = bias_only_model([n, 50.0, n, 40.0, 0.0, 1.0]);
        let g = m.generate_text(&Prompt::new("a"), 3).unwrap();
        assert_eq!(g.text, "bbb");
        assert_eq!(g.stop, StopReason::MaxTokens);
    }

    fn central_difference(m: &mut Backbone, ex: &TrainingExamples, idx: &[usize], k: usize, step: f64) -> f64 {
        let orig = m.params.data[k];
        let mut scratch = vec![0.0; m.params.len()];
        m.params.data[k] = orig + step;
        let plus = m.loss_and_grad(ex, idx, &mut scratch);
        m.params.data[k] = orig - step;
        let minus = m.loss_and_grad(ex, idx, &mut scratch);
        m.params.data[k] = orig;
        (plus - minus) / (2.0 * step)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..5 {
            let mut m = Backbone::init("fd", abc(), small_dims(7), trial).unwrap();
            // unrounded parameters, larger scale to exercise tanh curvature
            for v in m.params.as_mut_slice() {
                *v = rng.random_range(-0.8..0.8);
            }
            let mut ex = TrainingExamples::new(3);
            for _ in 0..2 {
                let ctx: Vec<TokenId> = (0..rng.random_range(1..5)).map(|_| rng.random_range(0..7)).collect();
                ex.push(&ctx, 1, rng.random_range(0..7));
            }
            let idx = [0, 1];
            let mut grad = vec![0.0; m.params.len()];
            m.loss_and_grad(&ex, &idx, &mut grad);
            let numeric: Vec<f64> = (0..grad.len())
                .map(|k| central_difference(&mut m, &ex, &idx, k, 1e-4))
                .collect();
            let diff: f64 = grad.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = grad.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
            assert!(diff / scale <= 1e-5, "trial {trial}: relative error {}", diff / scale);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut m = Backbone::init("m", abc(), small_dims(7), 4).unwrap();
        let before = m.params.clone();
        let corpus = vec![TrainingSequence {
            tokens: vec![1, 4, 5, 6, 2],
            loss_from: 1,
        }];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..TrainConfig::backbone()
        };
        m.train(&corpus, &cfg).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let corpus: Vec<TrainingSequence> = ["abcab", "bcabc", "cabca"]
            .iter()
            .map(|s| {
                let mut t = vec![1];
                t.extend(abc().encode(s).unwrap());
                t.push(2);
                TrainingSequence { tokens: t, loss_from: 1 }
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 20,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::backbone()
        };
        let mut a = Backbone::init("a", abc(), small_dims(7), 1).unwrap();
        let mut b = a.clone();
        let ra = a.train(&corpus, &cfg).unwrap();
        let rb = b.train(&corpus, &cfg).unwrap();
        assert!(ra.final_loss < ra.initial_loss);
        assert_eq!(a.params, b.params);
        assert_eq!(ra, rb);
        assert!(a.train(&[], &cfg).is_err());
    }

    #[test]
    fn nan_aborts_training() {
        let mut m = Backbone::init("m", abc(), small_dims(7), 4).unwrap();
        m.params.word_head_bias_mut()[0] = f64::NAN;
        let corpus = vec![TrainingSequence {
            tokens: vec![1, 4, 5, 2],
            loss_from: 1,
        }];
        let err = m.train(&corpus, &TrainConfig::backbone()).unwrap_err();
        assert!(matches!(err, EtrError::NonFinite { step: 0 }));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = BackboneParams::init(small_dims(7), 8).unwrap();
        let json = p.to_checkpoint_json();
        let back = BackboneParams::from_checkpoint_json(&json).unwrap();
        assert_eq!(p.fingerprint(), back.fingerprint());
        assert_eq!(back.to_checkpoint_json(), json);
        assert!(json.contains("\"W\":3"));
        let bad = json.replace("\"format_version\":1", "\"format_version\":9");
        assert!(BackboneParams::from_checkpoint_json(&bad).is_err());
    }

    #[test]
    fn fingerprint_tracks_every_parameter() {
        let p = BackboneParams::init(small_dims(7), 8).unwrap();
        let mut q = p.clone();
        let last = q.len() - 1;
        q.as_mut_slice()[last] += 1.0;
        assert_ne!(p.fingerprint(), q.fingerprint());
    }
}
