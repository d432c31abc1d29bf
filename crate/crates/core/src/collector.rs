//! Picks, for each expert, the instruction pairs on which it beats the meta
//! model by more than `tau` nats of teacher-forced loss.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::write_jsonl;
use crate::domains::QueryResponsePair;
use crate::error::{EtrError, Result};
use crate::lm::{LanguageModel, PairLoss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectorConfig {
    /// Gap threshold in nats; membership needs a strictly larger gap.
    pub tau: f64,
    /// Compare per-token losses instead of summed losses.
    pub normalize_by_length: bool,
    pub per_expert_cap: usize,
    pub seed: u64,
    pub include_eos: bool,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            tau: 2.0,
            normalize_by_length: false,
            per_expert_cap: 100,
            seed: 0,
            include_eos: true,
        }
    }
}

impl CollectorConfig {
    fn score(&self, loss: PairLoss) -> f64 {
        if self.normalize_by_length {
            loss.per_token()
        } else {
            loss.nats
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() {
            return Err(EtrError::config("tau must not be NaN"));
        }
        if self.per_expert_cap == 0 {
            return Err(EtrError::config("per_expert_cap must be positive"));
        }
        Ok(())
    }
}

/// `L_meta − L_expert`
pub fn loss_gap(
    meta: &dyn LanguageModel,
    expert: &dyn LanguageModel,
    pair: &QueryResponsePair,
    cfg: &CollectorConfig,
) -> Result<f64> {
    let m = meta.pair_loss(&pair.query, &pair.response, cfg.include_eos)?;
    let e = expert.pair_loss(&pair.query, &pair.response, cfg.include_eos)?;
    Ok(cfg.score(m) - cfg.score(e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertQuerySet {
    pub expert_index: usize,
    pub expert_name: String,
    pub pairs: Vec<QueryResponsePair>,
    pub gaps: Vec<f64>,
}

impl ExpertQuerySet {
    pub fn label(&self) -> String {
        format!("{} ({})", self.expert_index, self.expert_name)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Keeps the first `n` pairs.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n > self.pairs.len() {
            return Err(EtrError::InsufficientQueries {
                expert: self.label(),
                requested: n,
                available: self.pairs.len(),
            });
        }
        Ok(ExpertQuerySet {
            pairs: self.pairs[..n].to_vec(),
            gaps: self.gaps[..n].to_vec(),
            ..self.clone()
        })
    }

    pub fn records(&self) -> Vec<QueryRecord> {
        self.pairs
            .iter()
            .zip(&self.gaps)
            .map(|(p, &gap)| QueryRecord {
                expert_index: self.expert_index,
                query: p.query.clone(),
                response: p.response.clone(),
                gap,
            })
            .collect()
    }
}

/// One line of a query-set JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub expert_index: usize,
    pub query: String,
    pub response: String,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertCollection {
    pub expert_index: usize,
    pub expert_name: String,
    pub qualifying: usize,
    pub kept: usize,
    /// Qualifying pairs per source domain, in first-seen order.
    pub by_domain: Vec<(String, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionReport {
    pub tau: f64,
    pub seed: u64,
    pub normalize_by_length: bool,
    pub candidates: usize,
    pub experts: Vec<ExpertCollection>,
}

#[derive(Debug, Clone)]
pub struct Collection {
    pub sets: Vec<ExpertQuerySet>,
    pub report: CollectionReport,
}

impl Collection {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let records: Vec<QueryRecord> = self.sets.iter().flat_map(|s| s.records()).collect();
        write_jsonl(path, &records)
    }

    /// Rebuilds the sets from records written by [`Collection::write_jsonl`].
    /// Record files carry no source domain; `domain_of` supplies it.
    pub fn from_records(
        records: &[QueryRecord],
        report: CollectionReport,
        domain_of: impl Fn(&str) -> String,
    ) -> Result<Self> {
        let mut sets: Vec<ExpertQuerySet> = report
            .experts
            .iter()
            .map(|e| ExpertQuerySet {
                expert_index: e.expert_index,
                expert_name: e.expert_name.clone(),
                pairs: Vec::new(),
                gaps: Vec::new(),
            })
            .collect();
        for r in records {
            let set = sets
                .get_mut(r.expert_index)
                .ok_or_else(|| EtrError::format(format!("record for unknown expert index {}", r.expert_index)))?;
            set.pairs
                .push(QueryResponsePair::new(r.query.as_str(), r.response.as_str(), domain_of(&r.query)));
            set.gaps.push(r.gap);
        }
        Ok(Collection { sets, report })
    }
}

/// Scores every pair under the meta model once and under each expert, then
/// keeps up to `per_expert_cap` qualifying pairs per expert, sampled
/// uniformly without replacement. Selection order is the dataset order of
/// the sampled pairs. An expert with no qualifying pair gets an empty set and
/// a warning in the report.
pub fn collect(
    dataset: &[QueryResponsePair],
    meta: &dyn LanguageModel,
    experts: &[&dyn LanguageModel],
    cfg: &CollectorConfig,
) -> Result<Collection> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(EtrError::EmptyCorpus);
    }
    let meta_scores: Vec<f64> = dataset
        .iter()
        .map(|p| {
            meta.pair_loss(&p.query, &p.response, cfg.include_eos)
                .map(|l| cfg.score(l))
        })
        .collect::<Result<_>>()?;
    let mut sets = Vec::with_capacity(experts.len());
    let mut summaries = Vec::with_capacity(experts.len());
    for (i, expert) in experts.iter().enumerate() {
        let mut qualifying = Vec::new();
        for (j, p) in dataset.iter().enumerate() {
            let e = cfg.score(expert.pair_loss(&p.query, &p.response, cfg.include_eos)?);
            let gap = meta_scores[j] - e;
            if gap > cfg.tau {
                qualifying.push((j, gap));
            }
        }
        let name = expert.name().to_string();
        let warning = qualifying.is_empty().then(|| {
            log::warn!("expert {i} ({name}) has no pair with gap above {}", cfg.tau);
            format!("no pair with gap above tau = {}", cfg.tau)
        });
        let mut by_domain: Vec<(String, usize)> = Vec::new();
        for &(j, _) in &qualifying {
            let d = &dataset[j].domain;
            match by_domain.iter_mut().find(|(n, _)| n == d) {
                Some((_, c)) => *c += 1,
                None => by_domain.push((d.clone(), 1)),
            }
        }
        let mut chosen: Vec<usize> = if qualifying.len() > cfg.per_expert_cap {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
            sample(&mut rng, qualifying.len(), cfg.per_expert_cap).into_vec()
        } else {
            (0..qualifying.len()).collect()
        };
        chosen.sort_unstable();
        summaries.push(ExpertCollection {
            expert_index: i,
            expert_name: name.clone(),
            qualifying: qualifying.len(),
            kept: chosen.len(),
            by_domain,
            warning,
        });
        sets.push(ExpertQuerySet {
            expert_index: i,
            expert_name: name,
            pairs: chosen.iter().map(|&k| dataset[qualifying[k].0].clone()).collect(),
            gaps: chosen.iter().map(|&k| qualifying[k].1).collect(),
        });
    }
    Ok(Collection {
        sets,
        report: CollectionReport {
            tau: cfg.tau,
            seed: cfg.seed,
            normalize_by_length: cfg.normalize_by_length,
            candidates: dataset.len(),
            experts: summaries,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{Capabilities, Generation, Prompt};
    use std::collections::HashMap;

    /// Returns fixed losses per query.
    struct Table {
        name: String,
        losses: HashMap<String, f64>,
    }

    impl LanguageModel for Table {
        fn name(&self) -> &str {
            &self.name
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities::GENERATE_ONLY
        }
        fn generate(&self, _: &Prompt, _: usize) -> Result<Generation> {
            unimplemented!()
        }
        fn pair_loss(&self, query: &str, response: &str, _: bool) -> Result<PairLoss> {
            Ok(PairLoss {
                nats: self.losses[query],
                tokens: response.len(),
            })
        }
    }

    fn table(name: &str, rows: &[(&str, f64)]) -> Table {
        Table {
            name: name.into(),
            losses: rows.iter().map(|(q, l)| (q.to_string(), *l)).collect(),
        }
    }

    fn data(qs: &[&str]) -> Vec<QueryResponsePair> {
        qs.iter().map(|q| QueryResponsePair::new(*q, "ab", "d")).collect()
    }

    #[test]
    fn gap_equal_to_tau_is_excluded() {
        let ds = data(&["a", "b", "c"]);
        let meta = table("meta", &[("a", 5.0), ("b", 5.0), ("c", 5.0)]);
        let ex = table("ex", &[("a", 3.0), ("b", 2.5), ("c", 6.0)]);
        let got = collect(&ds, &meta, &[&ex], &CollectorConfig::default()).unwrap();
        assert_eq!(got.sets[0].pairs.len(), 1);
        assert_eq!(got.sets[0].pairs[0].query, "b");
        assert_eq!(got.sets[0].gaps, vec![2.5]);
    }

    #[test]
    fn infinite_tau_leaves_sets_empty() {
        let ds = data(&["a"]);
        let meta = table("meta", &[("a", 50.0)]);
        let ex = table("ex", &[("a", 0.0)]);
        let cfg = CollectorConfig {
            tau: f64::INFINITY,
            ..Default::default()
        };
        let got = collect(&ds, &meta, &[&ex], &cfg).unwrap();
        assert!(got.sets[0].is_empty());
        assert!(got.report.experts[0].warning.is_some());
    }

    #[test]
    fn sets_may_overlap_and_shrink_with_tau() {
        let qs: Vec<String> = (0..40).map(|i| format!("q{i}")).collect();
        let refs: Vec<&str> = qs.iter().map(String::as_str).collect();
        let ds = data(&refs);
        let meta = table("meta", &refs.iter().map(|q| (*q, 10.0)).collect::<Vec<_>>());
        let e1 = table("e1", &refs.iter().enumerate().map(|(i, q)| (*q, i as f64 * 0.25)).collect::<Vec<_>>());
        let e2 = table("e2", &refs.iter().enumerate().map(|(i, q)| (*q, 10.0 - i as f64 * 0.25)).collect::<Vec<_>>());
        let mut last = usize::MAX;
        for tau in [0.0, 1.0, 2.0, 4.0, 6.0, 9.0] {
            let cfg = CollectorConfig { tau, ..Default::default() };
            let got = collect(&ds, &meta, &[&e1, &e2], &cfg).unwrap();
            let n = got.report.experts[0].qualifying;
            assert!(n <= last);
            last = n;
            if tau == 2.0 {
                let a: Vec<_> = got.sets[0].pairs.iter().map(|p| &p.query).collect();
                assert!(got.sets[1].pairs.iter().any(|p| a.contains(&&p.query)));
            }
        }
    }

    #[test]
    fn cap_samples_without_replacement_and_is_seeded() {
        let qs: Vec<String> = (0..300).map(|i| format!("q{i}")).collect();
        let refs: Vec<&str> = qs.iter().map(String::as_str).collect();
        let ds = data(&refs);
        let meta = table("meta", &refs.iter().map(|q| (*q, 9.0)).collect::<Vec<_>>());
        let ex = table("ex", &refs.iter().map(|q| (*q, 1.0)).collect::<Vec<_>>());
        let cfg = CollectorConfig { seed: 4, ..Default::default() };
        let a = collect(&ds, &meta, &[&ex], &cfg).unwrap();
        let b = collect(&ds, &meta, &[&ex], &cfg).unwrap();
        assert_eq!(a.sets[0].pairs.len(), 100);
        assert_eq!(a.sets[0].pairs, b.sets[0].pairs);
        let mut seen: Vec<_> = a.sets[0].pairs.iter().map(|p| p.query.clone()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 100);
        let c = collect(&ds, &meta, &[&ex], &CollectorConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a.sets[0].pairs, c.sets[0].pairs);
        assert_eq!(a.report.experts[0].qualifying, 300);
    }

    #[test]
    fn same_model_gap_is_zero() {
        let ds = data(&["a"]);
        let m = table("m", &[("a", 7.25)]);
        assert_eq!(loss_gap(&m, &m, &ds[0], &CollectorConfig::default()).unwrap(), 0.0);
    }

    /// Exposes only `word_logits`, so `pair_loss` takes the trait's
    /// step-by-step default path.
    struct LogitsOnly<'a>(&'a crate::backbone::Backbone);

    impl LanguageModel for LogitsOnly<'_> {
        fn name(&self) -> &str {
            "logits-only"
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities::FULL
        }
        fn vocabulary(&self) -> Option<&crate::vocab::Vocabulary> {
            Some(self.0.vocab())
        }
        fn word_logits(&self, p: &Prompt) -> Result<Vec<f64>> {
            self.0.word_logits(p)
        }
        fn generate(&self, _: &Prompt, _: usize) -> Result<Generation> {
            unimplemented!()
        }
    }

    #[test]
    fn gaps_match_per_step_softmax_oracle() {
        use crate::backbone::{Backbone, Dims};
        use crate::vocab::Vocabulary;
        let vocab = Vocabulary::printable_ascii();
        let meta = Backbone::init("meta", vocab.clone(), Dims::toy(vocab.size()), 1).unwrap();
        let ex = Backbone::init("ex", vocab.clone(), Dims::toy(vocab.size()), 2).unwrap();
        let oracle = |m: &Backbone, q: &str, r: &str| -> f64 {
            let mut gen = String::new();
            let mut total = 0.0;
            for ch in r.chars().map(Some).chain([None]) {
                let z = m.word_logits(&Prompt::with_generated(q, gen.clone())).unwrap();
                let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let p: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = p.iter().sum();
                let t = match ch {
                    Some(c) => vocab.id_of(c).unwrap(),
                    None => vocab.eos(),
                } as usize;
                total -= (p[t] / s).ln();
                if let Some(c) = ch {
                    gen.push(c);
                }
            }
            total
        };
        let cfg = CollectorConfig::default();
        for i in 0..20 {
            let q = format!("reverse: {}", &"abcdefabcdef"[i % 6..i % 6 + 3 + i % 3]);
            let r: String = q[9..].chars().rev().collect();
            let pair = QueryResponsePair::new(q.clone(), r.clone(), "reverse");
            let want = oracle(&meta, &q, &r) - oracle(&ex, &q, &r);
            let got = loss_gap(&meta, &ex, &pair, &cfg).unwrap();
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
            let slow = loss_gap(&LogitsOnly(&meta), &LogitsOnly(&ex), &pair, &cfg).unwrap();
            assert!((slow - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn normalized_scores_divide_by_token_count() {
        let ds = [QueryResponsePair::new("a", "abcd", "d")];
        let meta = table("meta", &[("a", 12.0)]);
        let ex = table("ex", &[("a", 2.0)]);
        let cfg = CollectorConfig {
            normalize_by_length: true,
            ..Default::default()
        };
        let gap = loss_gap(&meta, &ex, &ds[0], &cfg).unwrap();
        assert!((gap - 2.5).abs() < 1e-15);
    }

    #[test]
    fn jsonl_records_carry_expert_index_and_gap() {
        let ds = data(&["a"]);
        let meta = table("meta", &[("a", 5.0)]);
        let ex = table("ex", &[("a", 1.0)]);
        let got = collect(&ds, &meta, &[&ex], &CollectorConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        got.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "{\"expert_index\":0,\"query\":\"a\",\"response\":\"ab\",\"gap\":4.0}\n");
    }
}
