//! Bounds the number of in-flight calls per backend.

use std::sync::{Arc, Condvar, Mutex};

use etr_core::lm::{Capabilities, Generation, PairLoss, Prompt};
use etr_core::{LanguageModel, Result, Vocabulary};

#[derive(Debug)]
pub struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    pub fn new(permits: usize) -> Self {
        Gate {
            free: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().unwrap();
            while *free == 0 {
                free = self.cv.wait(free).unwrap();
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().unwrap() += 1;
        self.cv.notify_one();
        out
    }
}

/// A model whose calls pass through a [`Gate`].
pub struct Throttled {
    inner: Arc<dyn LanguageModel>,
    gate: Gate,
}

impl Throttled {
    pub fn new(inner: Arc<dyn LanguageModel>, permits: usize) -> Self {
        Throttled {
            inner,
            gate: Gate::new(permits),
        }
    }
}

impl LanguageModel for Throttled {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        self.inner.vocabulary()
    }

    fn hidden_dim(&self) -> Option<usize> {
        self.inner.hidden_dim()
    }

    fn fingerprint(&self) -> Option<String> {
        self.inner.fingerprint()
    }

    fn hidden_state(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        self.gate.run(|| self.inner.hidden_state(prompt))
    }

    fn word_logits(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        self.gate.run(|| self.inner.word_logits(prompt))
    }

    fn hidden_and_logits(&self, prompt: &Prompt) -> Result<(Vec<f64>, Vec<f64>)> {
        self.gate.run(|| self.inner.hidden_and_logits(prompt))
    }

    fn generate(&self, prompt: &Prompt, max_new_tokens: usize) -> Result<Generation> {
        self.gate.run(|| self.inner.generate(prompt, max_new_tokens))
    }

    fn pair_loss(&self, query: &str, response: &str, include_eos: bool) -> Result<PairLoss> {
        self.gate.run(|| self.inner.pair_loss(query, response, include_eos))
    }
}
