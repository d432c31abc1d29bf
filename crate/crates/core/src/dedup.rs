//! Near-duplicate removal against held-out test questions by character
//! 3-gram Jaccard similarity.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::domains::QueryResponsePair;
use crate::error::{EtrError, Result};

/// Sorted, distinct character 3-grams. Strings shorter than three characters
/// contribute themselves as a single gram.
pub fn char_trigrams(s: &str) -> Vec<String> {
    let chars: Vec<char> = s.chars().collect();
    let mut grams: Vec<String> = if chars.len() < 3 {
        vec![s.to_string()]
    } else {
        chars.windows(3).map(|w| w.iter().collect()).collect()
    };
    grams.sort_unstable();
    grams.dedup();
    grams
}

pub fn jaccard(a: &str, b: &str) -> f64 {
    jaccard_sorted(&char_trigrams(a), &char_trigrams(b))
}

fn jaccard_sorted<T: Ord>(a: &[T], b: &[T]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub query: String,
    pub matched_test_question: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DedupOutcome {
    pub kept: Vec<QueryResponsePair>,
    pub removed: Vec<Removal>,
}

/// Drops every candidate whose 3-gram Jaccard similarity to some test
/// question exceeds `threshold`. Order of kept candidates is preserved.
pub fn dedup_filter(
    candidates: Vec<QueryResponsePair>,
    test_questions: &[String],
    threshold: f64,
) -> Result<DedupOutcome> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(EtrError::config(format!(
            "dedup threshold {threshold} outside (0, 1]"
        )));
    }
    // Intern grams so set intersection runs on integers.
    let mut ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |grams: Vec<String>| -> Vec<u32> {
        let mut v: Vec<u32> = grams
            .into_iter()
            .map(|g| {
                let next = ids.len() as u32;
                *ids.entry(g).or_insert(next)
            })
            .collect();
        v.sort_unstable();
        v
    };
    let tests: Vec<Vec<u32>> = test_questions
        .iter()
        .map(|q| intern(char_trigrams(q)))
        .collect();
    // inverted index: gram -> test questions containing it
    let mut index: HashMap<u32, Vec<usize>> = HashMap::new();
    for (t, grams) in tests.iter().enumerate() {
        for &g in grams {
            index.entry(g).or_default().push(t);
        }
    }
    let mut outcome = DedupOutcome::default();
    let mut mark = vec![usize::MAX; tests.len()];
    for (c, cand) in candidates.into_iter().enumerate() {
        let grams = intern(char_trigrams(&cand.query));
        let mut best: Option<(usize, f64)> = None;
        for g in &grams {
            for &t in index.get(g).map(Vec::as_slice).unwrap_or(&[]) {
                if mark[t] == c {
                    continue;
                }
                mark[t] = c;
                let sim = jaccard_sorted(&grams, &tests[t]);
                if sim > threshold && best.is_none_or(|(_, s)| sim > s) {
                    best = Some((t, sim));
                }
            }
        }
        match best {
            Some((t, similarity)) => outcome.removed.push(Removal {
                query: cand.query,
                matched_test_question: test_questions[t].clone(),
                similarity,
            }),
            None => outcome.kept.push(cand),
        }
    }
    Ok(outcome)
}
