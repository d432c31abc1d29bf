//! The `etr` subcommands. Each reads the benchmark config (or defaults),
//! applies flag overrides, and works inside a run directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use etr_core::collector::{CollectionReport, QueryRecord};
use etr_core::dataset::read_jsonl;
use etr_core::eval::{eval_dynamic, eval_latency, eval_sweep, EvalReport};
use etr_core::pipeline::{expert_infos, finetune_expert, synthesize, train_meta, BenchmarkData};
use etr_core::{
    collect, train_head, Backbone, BenchmarkConfig, Collection, Domain, EtrError, ExpertTokenHead, Framework,
    LanguageModel, Limits, Vocabulary, World,
};
use log::info;
use serde_json::json;

use crate::config::GatewayConfig;
use crate::gateway::Gateway;
use crate::server::{ModelHandler, Server};

#[derive(Debug, Parser)]
#[command(name = "etr", version, about = "Expert-token routing over a meta model and expert models")]
pub struct Cli {
    /// Benchmark configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory holding data, checkpoints, query sets, head and reports.
    #[arg(long, global = true, default_value = "runs/default")]
    pub run: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate test, training, general and instruction data.
    SynthData(OutArg),
    /// Train the meta model on the general mixture.
    TrainBackbone(OutArg),
    /// Fine-tune expert models from the meta checkpoint.
    FinetuneExpert(FinetuneArgs),
    /// Build expert query sets by the loss-gap criterion.
    CollectQueries(CollectArgs),
    /// Train the expert-token head against the frozen meta model.
    TrainHead(TrainHeadArgs),
    /// Append separately trained expert rows to a head.
    ExtendHead(ExtendArgs),
    /// Accuracy, routing and the routing matrix; optionally everything else.
    Evaluate(EvaluateArgs),
    /// Query-set size sweep.
    Sweep(HeadArg),
    /// Switching latency at equalized generation length.
    Latency(HeadArg),
    /// Run the gateway.
    Serve(ServeArgs),
    /// Serve one checkpoint as a model backend.
    ServeBackend(ServeBackendArgs),
    /// Answer one query.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct OutArg {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Expert domain; all configured experts when omitted.
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub cap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainHeadArgs {
    /// Train only these experts' rows, in this order.
    #[arg(long = "expert")]
    pub experts: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtendArgs {
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long = "add", required = true)]
    pub add: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeadArg {
    /// Head file; the run's head when omitted.
    #[arg(long)]
    pub head: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also run the dynamic-extension, sweep and latency measurements.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Gateway configuration (JSON).
    #[arg(long)]
    pub gateway: PathBuf,
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeBackendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value = "127.0.0.1:0")]
    pub listen: String,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub query: String,
    /// Use a gateway configuration instead of the run directory.
    #[arg(long)]
    pub gateway: Option<PathBuf>,
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Print the full trace as JSON instead of the response.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, missing inputs, schema violations.
    Usage(String),
    Runtime(EtrError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// One line of JSON.
    pub fn json_line(&self) -> String {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Runtime(e) => ("runtime", e.to_string()),
        };
        json!({ "error": { "kind": kind, "message": message } }).to_string()
    }
}

impl From<EtrError> for CliError {
    fn from(e: EtrError) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn input<T>(what: &Path, r: etr_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Usage(format!("{}: {e}", what.display())))
}

struct Run {
    cfg: BenchmarkConfig,
    dir: PathBuf,
}

impl Run {
    fn data_dir(&self) -> PathBuf {
        self.dir.join("data")
    }

    fn model_path(&self, name: &str) -> PathBuf {
        self.dir.join("models").join(format!("{name}.json"))
    }

    fn head_path(&self) -> PathBuf {
        self.dir.join("head.json")
    }

    fn sets_path(&self) -> PathBuf {
        self.dir.join("query_sets.jsonl")
    }

    fn report_path(&self) -> PathBuf {
        self.dir.join("collection_report.json")
    }

    fn data(&self) -> CliResult<BenchmarkData> {
        let dir = self.data_dir();
        input(&dir, BenchmarkData::load(&dir, &self.cfg.experts))
    }

    fn backbone(&self, name: &str) -> CliResult<Backbone> {
        let path = self.model_path(name);
        input(&path, Backbone::load(name, Vocabulary::printable_ascii(), &path))
    }

    fn experts(&self) -> CliResult<Vec<Backbone>> {
        self.cfg.experts.iter().map(|d| self.backbone(d.name())).collect()
    }

    fn head(&self, path: Option<&Path>) -> CliResult<ExpertTokenHead> {
        let path = path.map_or_else(|| self.head_path(), Path::to_path_buf);
        input(&path, ExpertTokenHead::load(&path))
    }

    fn collection(&self, data: &BenchmarkData) -> CliResult<Collection> {
        let rp = self.report_path();
        let report: CollectionReport = input(
            &rp,
            std::fs::read_to_string(&rp)
                .map_err(EtrError::from)
                .and_then(|t| serde_json::from_str(&t).map_err(EtrError::from)),
        )?;
        let sp = self.sets_path();
        let records: Vec<QueryRecord> = input(&sp, read_jsonl(&sp))?;
        let domains: HashMap<&str, &str> = data
            .instruction
            .pairs
            .iter()
            .map(|p| (p.query.as_str(), p.domain.as_str()))
            .collect();
        Ok(Collection::from_records(&records, report, |q| {
            domains.get(q).map_or_else(String::new, |d| d.to_string())
        })?)
    }

    fn world(&self, head: Option<&Path>) -> CliResult<World> {
        let data = self.data()?;
        let collection = self.collection(&data)?;
        Ok(World::assemble(
            self.cfg.clone(),
            data,
            self.backbone("meta")?,
            self.experts()?,
            collection,
            self.head(head)?,
        )?)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(EtrError::from)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value).map_err(EtrError::from)? + "\n").map_err(EtrError::from)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(EtrError::from)?;
    }
    Ok(())
}

fn parse_domain(name: &str) -> CliResult<Domain> {
    name.parse().map_err(|e: EtrError| CliError::Usage(e.to_string()))
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<BenchmarkConfig> {
    let mut cfg = match path {
        Some(p) => input(p, BenchmarkConfig::load(p))?,
        None => BenchmarkConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Executes one parsed command line. Output goes to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let run = Run { cfg, dir: cli.run };
    let cfg = &run.cfg;
    match cli.command {
        Command::SynthData(a) => {
            let out = a.out.unwrap_or_else(|| run.data_dir());
            let data = synthesize(cfg)?;
            data.save(&out)?;
            println!(
                "{}",
                json!({"wrote": out, "test": data.all_test_pairs().len(), "instruction": data.instruction.len(),
                       "dedup_removed": data.instruction.provenance.filter_log.len()})
            );
        }
        Command::TrainBackbone(a) => {
            let data = run.data()?;
            let out = a.out.unwrap_or_else(|| run.model_path("meta"));
            let (meta, report) = train_meta(cfg, &Vocabulary::printable_ascii(), &data)?;
            ensure_parent(&out)?;
            meta.save(&out)?;
            println!("{}", json!({"wrote": out, "final_loss": report.final_loss, "fingerprint": meta.fingerprint()}));
        }
        Command::FinetuneExpert(a) => {
            let data = run.data()?;
            let meta = run.backbone("meta")?;
            let domains = match &a.domain {
                Some(d) => vec![parse_domain(d)?],
                None => cfg.experts.clone(),
            };
            if a.out.is_some() && domains.len() != 1 {
                return Err(CliError::Usage("--out needs --domain".into()));
            }
            let replay = data.replay_mixture(cfg);
            for d in domains {
                let pairs = &data
                    .train
                    .iter()
                    .find(|(x, _)| *x == d)
                    .ok_or_else(|| CliError::Usage(format!("{d} is not a configured expert")))?
                    .1;
                let (expert, report) = finetune_expert(cfg, &meta, d, pairs, &replay)?;
                let out = a.out.clone().unwrap_or_else(|| run.model_path(d.name()));
                ensure_parent(&out)?;
                expert.save(&out)?;
                println!("{}", json!({"expert": d.name(), "wrote": out, "final_loss": report.final_loss}));
            }
        }
        Command::CollectQueries(a) => {
            let data = run.data()?;
            let meta = run.backbone("meta")?;
            let experts = run.experts()?;
            let mut ccfg = cfg.collector.clone();
            if let Some(t) = a.tau {
                ccfg.tau = t;
            }
            if let Some(c) = a.cap {
                ccfg.per_expert_cap = c;
            }
            ccfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let refs: Vec<&dyn LanguageModel> = experts.iter().map(|e| e as &dyn LanguageModel).collect();
            let collection = collect(&data.instruction.pairs, &meta, &refs, &ccfg)?;
            ensure_parent(&run.sets_path())?;
            collection.write_jsonl(run.sets_path())?;
            write_json(&run.report_path(), &collection.report)?;
            for e in &collection.report.experts {
                if let Some(w) = &e.warning {
                    log::warn!("{w}");
                }
            }
            let kept: Vec<_> = collection.sets.iter().map(|s| json!({"expert": s.expert_name, "kept": s.len()})).collect();
            println!("{}", json!({"wrote": run.sets_path(), "sets": kept}));
        }
        Command::TrainHead(a) => {
            let data = run.data()?;
            let meta = run.backbone("meta")?;
            let collection = run.collection(&data)?;
            let sets = if a.experts.is_empty() {
                collection.sets
            } else {
                a.experts
                    .iter()
                    .map(|n| {
                        collection
                            .sets
                            .iter()
                            .find(|s| &s.expert_name == n)
                            .cloned()
                            .ok_or_else(|| CliError::Usage(format!("no query set for expert {n:?}")))
                    })
                    .collect::<CliResult<Vec<_>>>()?
            };
            let domains = sets
                .iter()
                .map(|s| parse_domain(&s.expert_name))
                .collect::<CliResult<Vec<_>>>()?;
            let init = ExpertTokenHead::init(&meta, expert_infos(&domains))?;
            let (head, report) = train_head(&init, &meta, &sets, &cfg.head_train_config())?;
            let out = a.out.unwrap_or_else(|| run.head_path());
            ensure_parent(&out)?;
            head.save(&out)?;
            println!(
                "{}",
                json!({"wrote": out, "experts": head.len(), "final_loss": report.final_loss, "steps": report.steps})
            );
        }
        Command::ExtendHead(a) => {
            let base = input(&a.head, ExpertTokenHead::load(&a.head))?;
            let added = a
                .add
                .iter()
                .map(|p| input(p, ExpertTokenHead::load(p)))
                .collect::<CliResult<Vec<_>>>()?;
            let head = base.extend(&added)?;
            ensure_parent(&a.out)?;
            head.save(&a.out)?;
            println!("{}", json!({"wrote": a.out, "experts": head.len()}));
        }
        Command::Evaluate(a) => {
            let world = run.world(a.head.as_deref())?;
            let mut report = EvalReport::core(&world)?;
            if a.all {
                report.dynamic = Some(eval_dynamic(&world, cfg.dynamic_initial)?.0);
                report.sweep = Some(eval_sweep(&world, &cfg.sweep_sizes, &cfg.sweep_seeds)?);
                report.latency = Some(latency(&world)?);
            }
            let out = a.out.unwrap_or_else(|| run.dir.join("eval"));
            report.write(&out)?;
            println!(
                "{}",
                json!({"wrote": out, "meta_alone": report.meta_alone.overall, "etr": report.etr.overall,
                       "routing": report.routing.accuracy})
            );
        }
        Command::Sweep(a) => {
            let world = run.world(a.head.as_deref())?;
            let sweep = eval_sweep(&world, &cfg.sweep_sizes, &cfg.sweep_seeds)?;
            let out = run.dir.join("eval").join("sweep.json");
            write_json(&out, &sweep)?;
            println!("{}", serde_json::to_string(&sweep.summary).map_err(EtrError::from)?);
        }
        Command::Latency(a) => {
            let world = run.world(a.head.as_deref())?;
            let l = latency(&world)?;
            let out = run.dir.join("eval").join("latency.json");
            write_json(&out, &l)?;
            println!("{}", serde_json::to_string(&l).map_err(EtrError::from)?);
        }
        Command::Serve(a) => {
            let mut gcfg = input(&a.gateway, GatewayConfig::load(&a.gateway))?;
            if let Some(l) = a.listen {
                gcfg.listen = l;
            }
            let base = a.gateway.parent().unwrap_or(Path::new(".")).to_path_buf();
            let gateway = Gateway::from_config(&gcfg, &base)?;
            let server = Server::start(&gcfg.listen, Arc::new(gateway))?;
            println!("{}", json!({"listening": server.addr().to_string()}));
            server.wait();
        }
        Command::ServeBackend(a) => {
            let name = a
                .name
                .unwrap_or_else(|| a.checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into()));
            let model = input(&a.checkpoint, Backbone::load(name, Vocabulary::printable_ascii(), &a.checkpoint))?;
            let server = Server::start(&a.listen, Arc::new(ModelHandler::new(Arc::new(model))))?;
            println!("{}", json!({"listening": server.addr().to_string()}));
            server.wait();
        }
        Command::Generate(a) => {
            let (fw, limits) = match &a.gateway {
                Some(path) => {
                    let gcfg = input(path, GatewayConfig::load(path))?;
                    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
                    let g = Gateway::from_config(&gcfg, &base)?;
                    let fw = g.framework().clone();
                    (fw, gcfg.limits)
                }
                None => {
                    let meta = run.backbone("meta")?;
                    let head = run.head(a.head.as_deref())?;
                    let experts = head
                        .experts()
                        .iter()
                        .map(|e| run.backbone(&e.name).map(|b| Arc::new(b) as Arc<dyn LanguageModel>))
                        .collect::<CliResult<Vec<_>>>()?;
                    (Framework::new(Arc::new(meta), head, experts)?, cfg.limits)
                }
            };
            let limits = Limits {
                max_new_tokens: a.max_new_tokens.unwrap_or(limits.max_new_tokens),
                ..limits
            };
            let trace = fw.generate(&a.query, &limits)?;
            if a.trace {
                println!("{}", serde_json::to_string(&trace).map_err(EtrError::from)?);
            } else {
                println!("{}", trace.response);
            }
        }
    }
    Ok(())
}

fn latency(world: &World) -> CliResult<etr_core::eval::LatencyReport> {
    let n = world.config.latency_queries.max(100);
    let queries = world.data.interleaved_test_questions(n);
    if queries.is_empty() {
        return Err(CliError::Usage("no test questions".into()));
    }
    let fw = world.framework(world.head.clone())?;
    info!("timing {n} queries");
    Ok(eval_latency(&fw, &queries, world.config.latency_repetitions)?)
}
