//! The synthetic benchmark end to end: data, meta model, experts, query
//! collection and the expert head.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Dims, TrainReport, TrainingSequence};
use crate::collector::{collect, Collection, CollectorConfig};
use crate::dataset::{read_jsonl, write_jsonl, InstructionDataset};
use crate::domains::{generate_domain_excluding, Domain, DomainSpec, QueryResponsePair};
use crate::error::{EtrError, Result};
use crate::head::{train_head_on_features, ExpertInfo, ExpertTokenHead, HeadFeatures, HeadTrainReport};
use crate::lm::{LanguageModel, Prompt};
use crate::optim::TrainConfig;
use crate::orchestrator::{Framework, Limits};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub experts: Vec<Domain>,
    pub test_per_domain: usize,
    /// Fine-tuning pairs per expert domain.
    pub train_per_domain: usize,
    /// Share of each expert domain's fine-tuning pairs the meta model sees.
    pub meta_domain_fraction: f64,
    /// General-task pairs in the meta model's training mixture.
    pub meta_general: usize,
    /// Share of the meta mixture replayed while fine-tuning each expert.
    pub expert_mixture_fraction: f64,
    /// Candidate pairs per domain (experts and general) for collection.
    pub instruction_per_domain: usize,
    pub dedup_threshold: f64,
    /// Train on response tokens only.
    pub response_only_loss: bool,
    pub meta_train: TrainConfig,
    pub expert_train: TrainConfig,
    pub head_train: TrainConfig,
    pub collector: CollectorConfig,
    pub limits: Limits,
    pub sweep_sizes: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
    /// Experts in the head before dynamic extension; the rest are added.
    pub dynamic_initial: usize,
    pub latency_queries: usize,
    pub latency_repetitions: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 7,
            experts: Domain::EXPERTS.to_vec(),
            test_per_domain: 100,
            train_per_domain: 4000,
            meta_domain_fraction: 0.03,
            meta_general: 1500,
            expert_mixture_fraction: 0.0,
            instruction_per_domain: 1000,
            dedup_threshold: 0.8,
            response_only_loss: true,
            meta_train: TrainConfig::backbone(),
            expert_train: TrainConfig {
                epochs: 30,
                ..TrainConfig::backbone()
            },
            head_train: TrainConfig {
                epochs: 20,
                ..TrainConfig::expert_head()
            },
            collector: CollectorConfig::default(),
            limits: Limits::default(),
            sweep_sizes: vec![10, 30, 100],
            sweep_seeds: vec![1, 2, 3],
            dynamic_initial: 4,
            latency_queries: 100,
            latency_repetitions: 1,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(EtrError::config("at least one expert domain is required"));
        }
        if self.experts.contains(&Domain::General) {
            return Err(EtrError::config("the general domain cannot be an expert"));
        }
        for (f, name) in [
            (self.meta_domain_fraction, "meta_domain_fraction"),
            (self.expert_mixture_fraction, "expert_mixture_fraction"),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(EtrError::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.sweep_seeds.is_empty() {
            return Err(EtrError::config("sweep needs at least one seed"));
        }
        if self.sweep_sizes.is_empty() || self.sweep_sizes.windows(2).any(|w| w[0] >= w[1]) || self.sweep_sizes[0] == 0 {
            return Err(EtrError::config("sweep sizes must be positive and strictly increasing"));
        }
        if self.dynamic_initial == 0 || self.dynamic_initial >= self.experts.len() {
            return Err(EtrError::config("dynamic_initial must lie strictly between 0 and the expert count"));
        }
        self.meta_train.validate()?;
        self.expert_train.validate()?;
        self.head_train.validate()?;
        self.collector.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: BenchmarkConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Head training settings with the run seed folded in.
    pub fn head_train_config(&self) -> TrainConfig {
        self.head_train.clone().with_seed(self.head_train.seed ^ self.seed)
    }

    /// Per-purpose generator seed, so each data split is independent.
    pub fn data_seed(&self, purpose: u64, domain: Domain) -> u64 {
        let d = Domain::EXPERTS.iter().position(|x| *x == domain).unwrap_or(6) as u64;
        self.seed
            .wrapping_mul(1_000_003)
            .wrapping_add(purpose * 101 + d)
    }
}

const TEST: u64 = 1;
const TRAIN: u64 = 2;
const GENERAL: u64 = 3;
const INSTRUCTION: u64 = 4;

/// `BOS query SEP response EOS`, with targets from the first response token
/// when `response_only` is set.
pub fn pair_sequence(vocab: &Vocabulary, pair: &QueryResponsePair, response_only: bool) -> Result<TrainingSequence> {
    let mut tokens = Prompt::new(pair.query.as_str()).to_ids(vocab)?;
    let loss_from = if response_only { tokens.len() } else { 1 };
    vocab.encode_into(&pair.response, &mut tokens)?;
    tokens.push(vocab.eos());
    Ok(TrainingSequence { tokens, loss_from })
}

pub fn sequences(vocab: &Vocabulary, pairs: &[QueryResponsePair], response_only: bool) -> Result<Vec<TrainingSequence>> {
    pairs.iter().map(|p| pair_sequence(vocab, p, response_only)).collect()
}

/// Held-out test questions and the disjoint training splits.
#[derive(Debug, Clone)]
pub struct BenchmarkData {
    pub test: Vec<(Domain, Vec<QueryResponsePair>)>,
    pub train: Vec<(Domain, Vec<QueryResponsePair>)>,
    pub general: Vec<QueryResponsePair>,
    pub instruction: InstructionDataset,
}

impl BenchmarkData {
    pub fn test_questions(&self) -> Vec<String> {
        self.test.iter().flat_map(|(_, ps)| ps.iter().map(|p| p.query.clone())).collect()
    }

    /// `n` test questions taken round-robin across domains, wrapping
    /// around when `n` exceeds the test set.
    pub fn interleaved_test_questions(&self, n: usize) -> Vec<String> {
        let longest = self.test.iter().map(|(_, ps)| ps.len()).max().unwrap_or(0);
        let all: Vec<String> = (0..longest)
            .flat_map(|i| self.test.iter().filter_map(move |(_, ps)| ps.get(i)))
            .map(|p| p.query.clone())
            .collect();
        all.iter().cycle().take(if all.is_empty() { 0 } else { n }).cloned().collect()
    }

    pub fn all_test_pairs(&self) -> Vec<QueryResponsePair> {
        self.test.iter().flat_map(|(_, ps)| ps.iter().cloned()).collect()
    }

    /// Writes `test.jsonl`, `train.jsonl`, `general.jsonl`,
    /// `instruction.jsonl` and `provenance.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let flat = |xs: &[(Domain, Vec<QueryResponsePair>)]| -> Vec<QueryResponsePair> {
            xs.iter().flat_map(|(_, ps)| ps.iter().cloned()).collect()
        };
        write_jsonl(dir.join("test.jsonl"), &flat(&self.test))?;
        write_jsonl(dir.join("train.jsonl"), &flat(&self.train))?;
        write_jsonl(dir.join("general.jsonl"), &self.general)?;
        write_jsonl(dir.join("instruction.jsonl"), &self.instruction.pairs)?;
        std::fs::write(
            dir.join("provenance.json"),
            serde_json::to_string_pretty(&self.instruction.provenance)? + "\n",
        )?;
        Ok(())
    }

    /// Reads what [`BenchmarkData::save`] wrote, grouping splits by the
    /// given expert domains in order.
    pub fn load(dir: impl AsRef<Path>, experts: &[Domain]) -> Result<Self> {
        let dir = dir.as_ref();
        let group = |pairs: Vec<QueryResponsePair>| -> Vec<(Domain, Vec<QueryResponsePair>)> {
            experts
                .iter()
                .map(|&d| (d, pairs.iter().filter(|p| p.domain == d.name()).cloned().collect()))
                .collect()
        };
        Ok(BenchmarkData {
            test: group(read_jsonl(dir.join("test.jsonl"))?),
            train: group(read_jsonl(dir.join("train.jsonl"))?),
            general: read_jsonl(dir.join("general.jsonl"))?,
            instruction: InstructionDataset {
                pairs: read_jsonl(dir.join("instruction.jsonl"))?,
                provenance: serde_json::from_str(&std::fs::read_to_string(dir.join("provenance.json"))?)?,
            },
        })
    }

    /// The meta mixture in a seeded order, for replay during fine-tuning.
    pub fn replay_mixture(&self, cfg: &BenchmarkConfig) -> Vec<QueryResponsePair> {
        let mut mix = self.meta_mixture(cfg.meta_domain_fraction);
        mix.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        mix
    }

    /// The meta model's mixture: general tasks plus a slice of each domain.
    pub fn meta_mixture(&self, fraction: f64) -> Vec<QueryResponsePair> {
        let mut out = self.general.clone();
        for (_, ps) in &self.train {
            let n = (ps.len() as f64 * fraction).round() as usize;
            out.extend(ps[..n].iter().cloned());
        }
        out
    }
}

pub fn synthesize(cfg: &BenchmarkConfig) -> Result<BenchmarkData> {
    let mut test = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for &d in &cfg.experts {
        let pairs = generate_domain_excluding(&DomainSpec::new(d, cfg.data_seed(TEST, d)), cfg.test_per_domain, &seen)?;
        seen.extend(pairs.iter().map(|p| p.query.clone()));
        test.push((d, pairs));
    }
    let mut train = Vec::new();
    for &d in &cfg.experts {
        let pairs = generate_domain_excluding(&DomainSpec::new(d, cfg.data_seed(TRAIN, d)), cfg.train_per_domain, &seen)?;
        train.push((d, pairs));
    }
    let general = generate_domain_excluding(
        &DomainSpec::new(Domain::General, cfg.data_seed(GENERAL, Domain::General)),
        cfg.meta_general,
        &seen,
    )?;
    let test_questions: Vec<String> = seen.iter().cloned().collect();
    let mut sources: Vec<(Domain, u64, usize)> = cfg
        .experts
        .iter()
        .map(|&d| (d, cfg.data_seed(INSTRUCTION, d), cfg.instruction_per_domain))
        .collect();
    sources.push((Domain::General, cfg.data_seed(INSTRUCTION, Domain::General), cfg.instruction_per_domain));
    let mut sorted_tests = test_questions;
    sorted_tests.sort();
    let instruction = InstructionDataset::synthesize(&sources, &sorted_tests, cfg.dedup_threshold)?;
    Ok(BenchmarkData {
        test,
        train,
        general,
        instruction,
    })
}

pub fn train_meta(cfg: &BenchmarkConfig, vocab: &Vocabulary, data: &BenchmarkData) -> Result<(Backbone, TrainReport)> {
    let mut meta = Backbone::init("meta", vocab.clone(), Dims::toy(vocab.size()), cfg.seed)?;
    let corpus = sequences(vocab, &data.meta_mixture(cfg.meta_domain_fraction), cfg.response_only_loss)?;
    let report = meta.train(&corpus, &cfg.meta_train.clone().with_seed(cfg.meta_train.seed ^ cfg.seed))?;
    Ok((meta, report))
}

/// Continues training a copy of `meta` on one domain's pairs plus a replayed
/// slice of the meta mixture.
pub fn finetune_expert(
    cfg: &BenchmarkConfig,
    meta: &Backbone,
    domain: Domain,
    pairs: &[QueryResponsePair],
    replay: &[QueryResponsePair],
) -> Result<(Backbone, TrainReport)> {
    let mut expert = meta.clone();
    expert.set_name(domain.name());
    let n = (replay.len() as f64 * cfg.expert_mixture_fraction).round() as usize;
    let mut corpus = sequences(meta.vocab(), pairs, cfg.response_only_loss)?;
    corpus.extend(sequences(meta.vocab(), &replay[..n], cfg.response_only_loss)?);
    let seed = cfg.expert_train.seed ^ cfg.data_seed(TRAIN, domain);
    let report = expert.train(&corpus, &cfg.expert_train.clone().with_seed(seed))?;
    Ok((expert, report))
}

/// Mean teacher-forced per-token loss over `pairs`.
pub fn per_token_loss(model: &dyn LanguageModel, pairs: &[QueryResponsePair], include_eos: bool) -> Result<f64> {
    let (mut nats, mut tokens) = (0.0, 0usize);
    for p in pairs {
        let l = model.pair_loss(&p.query, &p.response, include_eos)?;
        nats += l.nats;
        tokens += l.tokens;
    }
    Ok(nats / tokens as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub synth_s: f64,
    pub meta_s: f64,
    pub experts_s: f64,
    pub collect_s: f64,
    pub head_s: f64,
}

/// Every artifact of one benchmark run.
pub struct World {
    pub config: BenchmarkConfig,
    pub vocab: Vocabulary,
    pub data: BenchmarkData,
    pub meta: Arc<Backbone>,
    /// Training reports are absent when the world is assembled from files.
    pub meta_report: Option<TrainReport>,
    pub experts: Vec<Arc<Backbone>>,
    pub expert_reports: Vec<TrainReport>,
    pub collection: Collection,
    pub head: ExpertTokenHead,
    pub head_report: Option<HeadTrainReport>,
    pub times: StageTimes,
}

impl World {
    pub fn build(config: BenchmarkConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::printable_ascii();
        let t = Instant::now();
        let data = synthesize(&config)?;
        let synth_s = t.elapsed().as_secs_f64();
        info!("synthesized data in {synth_s:.1}s");

        let t = Instant::now();
        let (meta, meta_report) = train_meta(&config, &vocab, &data)?;
        let meta_s = t.elapsed().as_secs_f64();
        info!("meta trained in {meta_s:.1}s, loss {:.3}", meta_report.final_loss);

        let t = Instant::now();
        let mut experts = Vec::new();
        let mut expert_reports = Vec::new();
        let replay = data.replay_mixture(&config);
        for (d, pairs) in &data.train {
            let (e, r) = finetune_expert(&config, &meta, *d, pairs, &replay)?;
            info!("expert {d} loss {:.3}", r.final_loss);
            experts.push(Arc::new(e));
            expert_reports.push(r);
        }
        let experts_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let expert_refs: Vec<&dyn LanguageModel> = experts.iter().map(|e| e.as_ref() as &dyn LanguageModel).collect();
        let collection = collect(&data.instruction.pairs, &meta, &expert_refs, &config.collector)?;
        let collect_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let features = HeadFeatures::build(&meta, &collection.sets, &[])?;
        let head = ExpertTokenHead::init(&meta, expert_infos(&config.experts))?;
        let (head, head_report) = train_head_on_features(&head, &features, &config.head_train_config())?;
        let head_s = t.elapsed().as_secs_f64();

        Ok(World {
            config,
            vocab,
            data,
            meta: Arc::new(meta),
            meta_report: Some(meta_report),
            experts,
            expert_reports,
            collection,
            head,
            head_report: Some(head_report),
            times: StageTimes {
                synth_s,
                meta_s,
                experts_s,
                collect_s,
                head_s,
            },
        })
    }

    /// A world from previously trained artifacts.
    pub fn assemble(
        config: BenchmarkConfig,
        data: BenchmarkData,
        meta: Backbone,
        experts: Vec<Backbone>,
        collection: Collection,
        head: ExpertTokenHead,
    ) -> Result<Self> {
        config.validate()?;
        head.check_compatible(&meta)?;
        Ok(World {
            vocab: meta.vocab().clone(),
            config,
            data,
            meta: Arc::new(meta),
            meta_report: None,
            experts: experts.into_iter().map(Arc::new).collect(),
            expert_reports: Vec::new(),
            collection,
            head,
            head_report: None,
            times: StageTimes::default(),
        })
    }

    pub fn framework(&self, head: ExpertTokenHead) -> Result<Framework> {
        let experts = head
            .experts()
            .iter()
            .map(|info| {
                self.expert_by_name(&info.name)
                    .ok_or_else(|| EtrError::config(format!("no expert named {}", info.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Framework::new(self.meta.clone(), head, experts)
    }

    pub fn expert_by_name(&self, name: &str) -> Option<Arc<dyn LanguageModel>> {
        self.experts
            .iter()
            .find(|e| e.name() == name)
            .map(|e| e.clone() as Arc<dyn LanguageModel>)
    }
}

pub fn expert_infos(domains: &[Domain]) -> Vec<ExpertInfo> {
    domains.iter().map(|d| ExpertInfo::new(d.name(), format!("local:{}", d.name()))).collect()
}
