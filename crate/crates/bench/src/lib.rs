//! Fixtures shared by the benchmarks.

use etr_core::backbone::Dims;
use etr_core::{Backbone, ExpertInfo, ExpertTokenHead, Vocabulary};

/// A randomly initialized toy backbone and a mean-initialized head.
pub fn fixture(experts: usize) -> (Backbone, ExpertTokenHead) {
    let vocab = Vocabulary::printable_ascii();
    let meta = Backbone::init("meta", vocab.clone(), Dims::toy(vocab.size()), 1).expect("toy backbone");
    let infos = (0..experts)
        .map(|i| ExpertInfo::new(format!("e{i}"), format!("local:e{i}")))
        .collect();
    let head = ExpertTokenHead::init(&meta, infos).expect("head");
    (meta, head)
}
