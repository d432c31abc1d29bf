//! Measurements over the synthetic benchmark: answer accuracy, routing
//! accuracy and the routing matrix, static versus dynamic heads, query-set
//! size sweeps and switching latency.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collector::ExpertQuerySet;
use crate::domains::{grade, Domain, Grade, QueryResponsePair};
use crate::error::{EtrError, Result};
use crate::head::{train_head_on_features, ExpertTokenHead, HeadFeatures};
use crate::lm::{LanguageModel, Prompt, StopReason};
use crate::optim::TrainConfig;
use crate::orchestrator::{Choice, Framework, Limits, RoutingMode};
use crate::pipeline::{expert_infos, per_token_loss, World};

pub type TestSets = [(Domain, Vec<QueryResponsePair>)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub per_domain: Vec<DomainAccuracy>,
    /// Pooled over all questions.
    pub overall: f64,
}

impl AccuracyReport {
    pub fn domain(&self, name: &str) -> Option<&DomainAccuracy> {
        self.per_domain.iter().find(|d| d.domain == name)
    }
}

/// Grades `solve` on every test question.
pub fn eval_overall(
    test: &TestSets,
    mut solve: impl FnMut(Domain, &QueryResponsePair) -> Result<String>,
) -> Result<AccuracyReport> {
    let mut per_domain = Vec::with_capacity(test.len());
    let (mut correct, mut total) = (0, 0);
    for (d, pairs) in test {
        let mut ok = 0;
        for p in pairs {
            let answer = solve(*d, p)?;
            if grade(d.name(), &p.query, &answer)? == Grade::Correct {
                ok += 1;
            }
        }
        correct += ok;
        total += pairs.len();
        per_domain.push(DomainAccuracy {
            domain: d.name().to_string(),
            correct: ok,
            total: pairs.len(),
            accuracy: ratio(ok, pairs.len()),
        });
    }
    Ok(AccuracyReport {
        per_domain,
        overall: ratio(correct, total),
    })
}

pub fn eval_meta_alone(meta: &dyn LanguageModel, test: &TestSets, limits: &Limits) -> Result<AccuracyReport> {
    eval_overall(test, |_, p| Ok(meta.generate(&Prompt::new(p.query.as_str()), limits.max_new_tokens)?.text))
}

pub fn eval_etr(fw: &Framework, test: &TestSets, limits: &Limits) -> Result<AccuracyReport> {
    eval_overall(test, |_, p| Ok(fw.generate(&p.query, limits)?.response))
}

/// Every question answered by the expert of its own domain.
pub fn eval_oracle(fw: &Framework, test: &TestSets, limits: &Limits) -> Result<AccuracyReport> {
    let labels = labels_for(fw.head(), test)?;
    let mut idx = 0;
    eval_overall(test, |_, p| {
        let k = labels[idx];
        idx += 1;
        Ok(fw.experts()[k].generate(&Prompt::new(p.query.as_str()), limits.max_new_tokens)?.text)
    })
}

/// Head row of each test domain, in test-set order.
fn labels_for(head: &ExpertTokenHead, test: &TestSets) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (d, pairs) in test {
        let k = head
            .experts()
            .iter()
            .position(|e| e.name == d.name())
            .ok_or_else(|| EtrError::config(format!("test domain {d} has no expert in the head")))?;
        out.extend(std::iter::repeat_n(k, pairs.len()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub mode: RoutingMode,
    pub accuracy: f64,
    pub per_domain: Vec<DomainAccuracy>,
    /// Column labels of the matrix: expert names, plus "meta" in
    /// full-vocabulary mode.
    pub columns: Vec<String>,
    pub rows: Vec<String>,
    /// Row-normalized: true domain by chosen expert.
    pub matrix: Vec<Vec<f64>>,
    pub random_baseline: f64,
    pub random_trials: usize,
    pub oracle_baseline: f64,
}

/// Routing decision at the end-of-query position for every test question.
pub fn eval_routing(fw: &Framework, test: &TestSets, mode: RoutingMode, seed: u64) -> Result<RoutingReport> {
    let labels = labels_for(fw.head(), test)?;
    let e = fw.head().len();
    let mut columns: Vec<String> = fw.head().experts().iter().map(|x| x.name.clone()).collect();
    if mode == RoutingMode::FullVocabulary {
        columns.push("meta".into());
    }
    let mut matrix = Vec::with_capacity(test.len());
    let mut per_domain = Vec::with_capacity(test.len());
    let (mut hits, mut total) = (0, 0);
    // the oracle sends each question to the expert named after its domain
    let mut oracle_hits = 0;
    let mut idx = 0;
    for (d, pairs) in test {
        let mut counts = vec![0usize; columns.len()];
        let mut ok = 0;
        for p in pairs {
            let label = labels[idx];
            idx += 1;
            let col = match fw.route_only(&p.query, mode)?.chosen {
                Choice::Expert(k) => k,
                Choice::Meta => e,
            };
            counts[col] += 1;
            if col == label {
                ok += 1;
            }
            if fw.head().experts()[label].name == d.name() {
                oracle_hits += 1;
            }
        }
        hits += ok;
        total += pairs.len();
        matrix.push(counts.iter().map(|&c| ratio(c, pairs.len())).collect());
        per_domain.push(DomainAccuracy {
            domain: d.name().to_string(),
            correct: ok,
            total: pairs.len(),
            accuracy: ratio(ok, pairs.len()),
        });
    }
    Ok(RoutingReport {
        mode,
        accuracy: ratio(hits, total),
        per_domain,
        columns,
        rows: test.iter().map(|(d, _)| d.name().to_string()).collect(),
        matrix,
        random_baseline: random_routing_accuracy(&labels, e, RANDOM_TRIALS.max(labels.len()), seed),
        random_trials: RANDOM_TRIALS.max(labels.len()),
        oracle_baseline: ratio(oracle_hits, total),
    })
}

/// Draws for the random baseline; labels are cycled to reach this count.
pub const RANDOM_TRIALS: usize = 10_000;

/// Accuracy of choosing uniformly among `experts`, over `trials` draws
/// cycling through `labels`.
pub fn random_routing_accuracy(labels: &[usize], experts: usize, trials: usize, seed: u64) -> f64 {
    if labels.is_empty() || experts == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = labels
        .iter()
        .cycle()
        .take(trials)
        .filter(|&&l| rng.random_range(0..experts) == l)
        .count();
    ratio(hits, trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub routing: f64,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicReport {
    pub initial_experts: Vec<String>,
    pub added_experts: Vec<String>,
    pub static_score: HeadScore,
    pub dynamic_score: HeadScore,
    pub routing_delta: f64,
    pub overall_delta: f64,
    /// SHA-256 over the first rows before and after extension.
    pub initial_rows_hash: String,
    pub extended_rows_hash: String,
}

fn rows_hash(head: &ExpertTokenHead, rows: usize) -> String {
    let mut h = Sha256::new();
    for w in &head.weights()[..rows * head.dim()] {
        h.update(w.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn score(world: &World, head: ExpertTokenHead) -> Result<HeadScore> {
    let fw = world.framework(head)?;
    let test = &world.data.test;
    Ok(HeadScore {
        routing: eval_routing(&fw, test, RoutingMode::ExpertsOnly, world.config.seed)?.accuracy,
        overall: eval_etr(&fw, test, &world.config.limits)?.overall,
    })
}

/// Trains a head on the given sets, set `k` supervising row `k`.
pub fn train_head_for(world: &World, sets: &[ExpertQuerySet], cfg: &TrainConfig) -> Result<ExpertTokenHead> {
    let domains: Vec<Domain> = sets
        .iter()
        .map(|s| s.expert_name.parse())
        .collect::<Result<_>>()?;
    let init = ExpertTokenHead::init(&world.meta, expert_infos(&domains))?;
    let features = HeadFeatures::build(world.meta.as_ref(), sets, &[])?;
    Ok(train_head_on_features(&init, &features, cfg)?.0)
}

/// Joint head over every expert versus a head trained on the first
/// `initial` experts and extended with separately trained single rows.
pub fn eval_dynamic(world: &World, initial: usize) -> Result<(DynamicReport, ExpertTokenHead, ExpertTokenHead)> {
    let sets = &world.collection.sets;
    if initial == 0 || initial >= sets.len() {
        return Err(EtrError::config("dynamic split must leave experts on both sides"));
    }
    let cfg = &world.config.head_train_config();
    let joint = train_head_for(world, sets, cfg)?;
    let base = train_head_for(world, &sets[..initial], cfg)?;
    let before = rows_hash(&base, initial);
    let added = sets[initial..]
        .iter()
        .map(|s| train_head_for(world, std::slice::from_ref(s), cfg))
        .collect::<Result<Vec<_>>>()?;
    let extended = base.extend(&added)?;
    let after = rows_hash(&extended, initial);
    let static_score = score(world, joint.clone())?;
    let dynamic_score = score(world, extended.clone())?;
    let names = |r: std::ops::Range<usize>| sets[r].iter().map(|s| s.expert_name.clone()).collect();
    Ok((
        DynamicReport {
            initial_experts: names(0..initial),
            added_experts: names(initial..sets.len()),
            routing_delta: dynamic_score.routing - static_score.routing,
            overall_delta: dynamic_score.overall - static_score.overall,
            static_score,
            dynamic_score,
            initial_rows_hash: before,
            extended_rows_hash: after,
        },
        joint,
        extended,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: usize,
    pub seed: u64,
    pub routing: f64,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub size: usize,
    pub routing_mean: f64,
    pub routing_std: f64,
    pub overall_mean: f64,
    pub overall_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub summary: Vec<SweepSummary>,
}

/// `size` pairs drawn uniformly without replacement, seeded per expert.
pub fn subsample(set: &ExpertQuerySet, size: usize, seed: u64) -> Result<ExpertQuerySet> {
    if size == 0 {
        return Err(EtrError::EmptyQuerySet { expert: set.label() });
    }
    if size > set.len() {
        return Err(EtrError::InsufficientQueries {
            expert: set.label(),
            requested: size,
            available: set.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (set.expert_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut idx = sample(&mut rng, set.len(), size).into_vec();
    idx.sort_unstable();
    Ok(ExpertQuerySet {
        pairs: idx.iter().map(|&i| set.pairs[i].clone()).collect(),
        gaps: idx.iter().map(|&i| set.gaps[i]).collect(),
        ..set.clone()
    })
}

pub fn eval_sweep(world: &World, sizes: &[usize], seeds: &[u64]) -> Result<SweepReport> {
    if seeds.is_empty() {
        return Err(EtrError::config("sweep needs at least one seed"));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EtrError::config("sweep sizes must be strictly increasing"));
    }
    let mut points = Vec::new();
    let mut summary = Vec::new();
    for &size in sizes {
        let mut rs = Vec::new();
        let mut os = Vec::new();
        for &seed in seeds {
            let sets = world
                .collection
                .sets
                .iter()
                .map(|s| subsample(s, size, seed))
                .collect::<Result<Vec<_>>>()?;
            let cfg = world.config.head_train.clone().with_seed(seed);
            let s = score(world, train_head_for(world, &sets, &cfg)?)?;
            rs.push(s.routing);
            os.push(s.overall);
            points.push(SweepPoint {
                size,
                seed,
                routing: s.routing,
                overall: s.overall,
            });
        }
        let (routing_mean, routing_std) = mean_std(&rs);
        let (overall_mean, overall_std) = mean_std(&os);
        summary.push(SweepSummary {
            size,
            routing_mean,
            routing_std,
            overall_mean,
            overall_std,
        });
    }
    Ok(SweepReport { points, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub queries: usize,
    pub repetitions: usize,
    /// Mean generated tokens per query in both conditions.
    pub mean_tokens: f64,
    pub no_switch_mean_ms: f64,
    pub switch_mean_ms: f64,
    pub overhead_pct: f64,
    pub switched_queries: usize,
    pub reference_no_switch_s: f64,
    pub reference_switch_s: f64,
}

/// Wall-clock of answering each query with the model that ends up producing
/// the response, directly, versus the full framework that decodes the first
/// step on the meta model and hands off. Both conditions emit the same text,
/// so generation length is equal per query.
pub fn eval_latency(fw: &Framework, queries: &[String], repetitions: usize) -> Result<LatencyReport> {
    if queries.len() < 100 {
        return Err(EtrError::config("latency needs at least 100 queries"));
    }
    let repetitions = repetitions.max(1);
    let limits = Limits::default();
    let mut direct: Vec<Arc<dyn LanguageModel>> = Vec::with_capacity(queries.len());
    let mut tokens = 0;
    let mut switched = 0;
    for q in queries {
        let trace = fw.generate(q, &limits)?;
        let model = match trace.switched_index {
            Some(k) => {
                switched += 1;
                fw.experts()[k].clone()
            }
            None => fw.meta().clone(),
        };
        let alone = model.generate(&Prompt::new(q.as_str()), limits.max_new_tokens)?;
        if alone.text != trace.response {
            return Err(EtrError::config(format!(
                "direct and routed responses differ for query {q:?}"
            )));
        }
        tokens += trace.response.chars().count() + usize::from(alone.stop == StopReason::Eos);
        direct.push(model);
    }
    let time_direct = || -> Result<f64> {
        let start = Instant::now();
        for _ in 0..repetitions {
            for (q, m) in queries.iter().zip(&direct) {
                std::hint::black_box(m.generate(&Prompt::new(q.as_str()), limits.max_new_tokens)?);
            }
        }
        Ok(start.elapsed().as_secs_f64() * 1e3 / (repetitions * queries.len()) as f64)
    };
    let time_routed = || -> Result<f64> {
        let start = Instant::now();
        for _ in 0..repetitions {
            for q in queries {
                std::hint::black_box(fw.generate(q, &limits)?);
            }
        }
        Ok(start.elapsed().as_secs_f64() * 1e3 / (repetitions * queries.len()) as f64)
    };
    // warm both paths once before measuring
    time_direct()?;
    time_routed()?;
    let no_switch = time_direct()?;
    let switch = time_routed()?;
    Ok(LatencyReport {
        queries: queries.len(),
        repetitions,
        mean_tokens: tokens as f64 / queries.len() as f64,
        no_switch_mean_ms: no_switch,
        switch_mean_ms: switch,
        overhead_pct: 100.0 * (switch - no_switch) / no_switch,
        switched_queries: switched,
        reference_no_switch_s: 1.589,
        reference_switch_s: 1.616,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learnability {
    pub domain: String,
    pub meta_loss: f64,
    pub expert_loss: f64,
    /// `1 − expert_loss / meta_loss`
    pub reduction: f64,
    pub meta_accuracy: f64,
    pub expert_accuracy: f64,
}

/// Held-out per-token loss and accuracy of each expert against the meta
/// model on its own domain.
pub fn eval_learnability(world: &World) -> Result<Vec<Learnability>> {
    let include_eos = world.config.collector.include_eos;
    let max = world.config.limits.max_new_tokens;
    let mut out = Vec::new();
    for (d, pairs) in &world.data.test {
        let expert = world
            .expert_by_name(d.name())
            .ok_or_else(|| EtrError::config(format!("no expert for {d}")))?;
        let acc = |m: &dyn LanguageModel| -> Result<f64> {
            let report = eval_overall(&[(*d, pairs.clone())], |_, p| Ok(m.generate(&Prompt::new(p.query.as_str()), max)?.text))?;
            Ok(report.overall)
        };
        let meta_loss = per_token_loss(world.meta.as_ref(), pairs, include_eos)?;
        let expert_loss = per_token_loss(expert.as_ref(), pairs, include_eos)?;
        out.push(Learnability {
            domain: d.name().to_string(),
            meta_loss,
            expert_loss,
            reduction: 1.0 - expert_loss / meta_loss,
            meta_accuracy: acc(world.meta.as_ref())?,
            expert_accuracy: acc(expert.as_ref())?,
        });
    }
    Ok(out)
}

/// Share of each expert's capped query set drawn from its own domain.
pub fn query_set_purity(world: &World) -> Vec<(String, f64)> {
    world
        .collection
        .sets
        .iter()
        .map(|s| {
            let own = s.pairs.iter().filter(|p| p.domain == s.expert_name).count();
            (s.expert_name.clone(), ratio(own, s.len()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub learnability: Vec<Learnability>,
    pub query_set_purity: Vec<(String, f64)>,
    pub meta_alone: AccuracyReport,
    pub etr: AccuracyReport,
    pub oracle: AccuracyReport,
    pub routing: RoutingReport,
    pub routing_full_vocabulary: RoutingReport,
    pub dynamic: Option<DynamicReport>,
    pub sweep: Option<SweepReport>,
    pub latency: Option<LatencyReport>,
}

impl EvalReport {
    /// Accuracy, learnability and routing for the world's own head.
    pub fn core(world: &World) -> Result<Self> {
        let fw = world.framework(world.head.clone())?;
        let test = &world.data.test;
        let limits = &world.config.limits;
        Ok(EvalReport {
            learnability: eval_learnability(world)?,
            query_set_purity: query_set_purity(world),
            meta_alone: eval_meta_alone(world.meta.as_ref(), test, limits)?,
            etr: eval_etr(&fw, test, limits)?,
            oracle: eval_oracle(&fw, test, limits)?,
            routing: eval_routing(&fw, test, RoutingMode::ExpertsOnly, world.config.seed)?,
            routing_full_vocabulary: eval_routing(&fw, test, RoutingMode::FullVocabulary, world.config.seed)?,
            dynamic: None,
            sweep: None,
            latency: None,
        })
    }

    /// Writes `report.json` and one CSV per table into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        let mut s = String::from("domain,meta_alone,etr,oracle\n");
        for ((m, e), o) in self.meta_alone.per_domain.iter().zip(&self.etr.per_domain).zip(&self.oracle.per_domain) {
            let _ = writeln!(s, "{},{:.4},{:.4},{:.4}", m.domain, m.accuracy, e.accuracy, o.accuracy);
        }
        let _ = writeln!(s, "overall,{:.4},{:.4},{:.4}", self.meta_alone.overall, self.etr.overall, self.oracle.overall);
        std::fs::write(dir.join("overall.csv"), s)?;

        let mut s = String::from("method,routing_accuracy\n");
        let _ = writeln!(s, "random,{:.4}", self.routing.random_baseline);
        let _ = writeln!(s, "etr,{:.4}", self.routing.accuracy);
        let _ = writeln!(s, "etr_full_vocabulary,{:.4}", self.routing_full_vocabulary.accuracy);
        let _ = writeln!(s, "oracle,{:.4}", self.routing.oracle_baseline);
        std::fs::write(dir.join("routing.csv"), s)?;
        std::fs::write(dir.join("routing_matrix.csv"), matrix_csv(&self.routing))?;

        let mut s = String::from("domain,meta_loss,expert_loss,reduction,meta_accuracy,expert_accuracy\n");
        for l in &self.learnability {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4},{:.4},{:.4}",
                l.domain, l.meta_loss, l.expert_loss, l.reduction, l.meta_accuracy, l.expert_accuracy
            );
        }
        std::fs::write(dir.join("learnability.csv"), s)?;

        if let Some(d) = &self.dynamic {
            let mut s = String::from("variant,routing,overall\n");
            let _ = writeln!(s, "static,{:.4},{:.4}", d.static_score.routing, d.static_score.overall);
            let _ = writeln!(s, "dynamic,{:.4},{:.4}", d.dynamic_score.routing, d.dynamic_score.overall);
            std::fs::write(dir.join("dynamic.csv"), s)?;
        }
        if let Some(sw) = &self.sweep {
            let mut s = String::from("size,routing_mean,routing_std,overall_mean,overall_std\n");
            for p in &sw.summary {
                let _ = writeln!(
                    s,
                    "{},{:.4},{:.4},{:.4},{:.4}",
                    p.size, p.routing_mean, p.routing_std, p.overall_mean, p.overall_std
                );
            }
            std::fs::write(dir.join("sweep.csv"), s)?;
        }
        if let Some(l) = &self.latency {
            let mut s = String::from("condition,mean_ms\n");
            let _ = writeln!(s, "no_switch,{:.4}", l.no_switch_mean_ms);
            let _ = writeln!(s, "switch,{:.4}", l.switch_mean_ms);
            let _ = writeln!(s, "overhead_pct,{:.2}", l.overhead_pct);
            std::fs::write(dir.join("latency.csv"), s)?;
        }
        Ok(())
    }
}

pub fn matrix_csv(r: &RoutingReport) -> String {
    let mut s = String::from("domain");
    for c in &r.columns {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (name, row) in r.rows.iter().zip(&r.matrix) {
        s.push_str(name);
        for v in row {
            let _ = write!(s, ",{v:.4}");
        }
        s.push('\n');
    }
    s
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
