//! Instruction datasets and JSON-lines persistence.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dedup::{dedup_filter, Removal};
use crate::domains::{generate_domain_excluding, Domain, DomainSpec, QueryResponsePair};
use crate::error::{EtrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSeed {
    pub domain: String,
    pub seed: u64,
    pub requested: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seeds: Vec<GeneratorSeed>,
    pub dedup_threshold: Option<f64>,
    pub filter_log: Vec<Removal>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstructionDataset {
    pub pairs: Vec<QueryResponsePair>,
    pub provenance: Provenance,
}

impl InstructionDataset {
    /// Generates `per_domain` candidates for each `(domain, seed)`, never
    /// emitting a test question verbatim, then removes near-duplicates of the
    /// test questions.
    pub fn synthesize(
        sources: &[(Domain, u64, usize)],
        test_questions: &[String],
        threshold: f64,
    ) -> Result<Self> {
        let exclude: HashSet<String> = test_questions.iter().cloned().collect();
        let mut candidates = Vec::new();
        let mut seeds = Vec::new();
        for &(domain, seed, n) in sources {
            candidates.extend(generate_domain_excluding(&DomainSpec::new(domain, seed), n, &exclude)?);
            seeds.push(GeneratorSeed {
                domain: domain.name().to_string(),
                seed,
                requested: n,
            });
        }
        let outcome = dedup_filter(candidates, test_questions, threshold)?;
        Ok(InstructionDataset {
            pairs: outcome.kept,
            provenance: Provenance {
                seeds,
                dedup_threshold: Some(threshold),
                filter_log: outcome.removed,
            },
        })
    }

    pub fn of_domain<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a QueryResponsePair> + 'a {
        self.pairs.iter().filter(move |p| p.domain == domain)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            EtrError::format(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let pairs = vec![
            QueryResponsePair::new("reverse: abc", "cba", "reverse"),
            QueryResponsePair::new("echo: hi", "hi", "general"),
        ];
        write_jsonl(&path, &pairs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"query":"reverse: abc","response":"cba","domain":"reverse"}"#
        );
        assert!(!text.contains('\r'));
        assert_eq!(read_jsonl::<QueryResponsePair>(&path).unwrap(), pairs);
    }

    #[test]
    fn synthesized_dataset_excludes_test_neighbours() {
        let tests: Vec<String> = crate::domains::generate_domain(&DomainSpec::new(Domain::Reverse, 1), 50)
            .unwrap()
            .into_iter()
            .map(|p| p.query)
            .collect();
        let ds = InstructionDataset::synthesize(&[(Domain::Reverse, 2, 2000), (Domain::General, 3, 100)], &tests, 0.8).unwrap();
        assert!(!ds.provenance.filter_log.is_empty());
        for p in &ds.pairs {
            for t in &tests {
                assert!(crate::dedup::jaccard(&p.query, t) <= 0.8);
            }
        }
        assert_eq!(ds.len() + ds.provenance.filter_log.len(), 2100);
    }
}
