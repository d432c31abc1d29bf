#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use etr_cli::{ModelHandler, RemoteModel, Server};
use etr_core::stub::{ScriptedExpert, ScriptedMeta};
use etr_core::{ExpertInfo, ExpertTokenHead, Framework, LanguageModel, Limits};
use serde_json::Value;

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

pub struct Case {
    pub name: String,
    pub query: String,
    pub limits: Limits,
}

pub struct Golden {
    pub meta: ScriptedMeta,
    pub head: ExpertTokenHead,
    pub experts: Vec<ScriptedExpert>,
    pub cases: Vec<Case>,
}

pub fn golden() -> Golden {
    let dir = golden_dir();
    let meta = ScriptedMeta::from_json(&std::fs::read_to_string(dir.join("schedule.json")).unwrap()).unwrap();
    let fixture: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("experts.json")).unwrap()).unwrap();
    let mut experts = Vec::new();
    let mut infos = Vec::new();
    for e in fixture["experts"].as_array().unwrap() {
        let name = e["name"].as_str().unwrap();
        let mut x = ScriptedExpert::new(name);
        for (q, r) in e["replies"].as_object().unwrap() {
            x = x.reply(q.as_str(), r.as_str().unwrap());
        }
        experts.push(x);
        infos.push(ExpertInfo::new(name, format!("scripted:{name}")));
    }
    let dim = fixture["head"]["dim"].as_u64().unwrap() as usize;
    let weights: Vec<f64> = fixture["head"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()))
        .collect();
    let head = ExpertTokenHead::from_parts(dim, meta.fingerprint.clone(), infos, weights).unwrap();
    let cases = fixture["cases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| Case {
            name: c["name"].as_str().unwrap().into(),
            query: c["query"].as_str().unwrap().into(),
            limits: Limits {
                max_new_tokens: c["max_new_tokens"].as_u64().unwrap() as usize,
                max_switches: c["max_switches"].as_u64().unwrap() as usize,
            },
        })
        .collect();
    Golden {
        meta,
        head,
        experts,
        cases,
    }
}

pub fn serve(model: Arc<dyn LanguageModel>) -> Server {
    Server::start("127.0.0.1:0", Arc::new(ModelHandler::new(model))).unwrap()
}

pub fn remote(server: &Server, name: &str) -> Arc<dyn LanguageModel> {
    Arc::new(RemoteModel::connect(&server.addr().to_string(), Some(name), None, Duration::from_secs(10)).unwrap())
}

/// The golden framework, with every model either in process or behind its
/// own loopback server. Servers must outlive the framework.
pub fn golden_framework(g: &Golden, over_network: bool) -> (Framework, Vec<Server>) {
    let meta: Arc<dyn LanguageModel> = Arc::new(g.meta.clone());
    let experts: Vec<Arc<dyn LanguageModel>> =
        g.experts.iter().map(|e| Arc::new(e.clone()) as Arc<dyn LanguageModel>).collect();
    if !over_network {
        return (Framework::new(meta, g.head.clone(), experts).unwrap(), Vec::new());
    }
    let mut servers = vec![serve(meta)];
    let meta = remote(&servers[0], &g.meta.name);
    let mut remote_experts = Vec::new();
    for e in experts {
        let s = serve(e.clone());
        remote_experts.push(remote(&s, e.name()));
        servers.push(s);
    }
    (Framework::new(meta, g.head.clone(), remote_experts).unwrap(), servers)
}

/// Names of golden cases whose trace differs from the checked-in file.
pub fn golden_mismatches(fw: &Framework, g: &Golden) -> Vec<String> {
    let mut bad = Vec::new();
    for c in &g.cases {
        let want = std::fs::read(golden_dir().join(format!("{}.trace.json", c.name))).unwrap();
        let got = fw.generate(&c.query, &c.limits).unwrap().golden_json();
        if got.as_bytes() != want.as_slice() {
            bad.push(c.name.clone());
        }
    }
    bad
}
