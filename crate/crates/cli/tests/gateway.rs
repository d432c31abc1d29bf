mod common;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use common::*;
use etr_cli::wire::{read_frame, write_frame, Request};
use etr_cli::{BackendDescriptor, Gateway, GatewayConfig, Handler, Server};
use etr_core::backbone::Dims;
use etr_core::stub::{ScriptStep, ScriptedExpert, ScriptedMeta};
use etr_core::{Backbone, ExpertInfo, ExpertTokenHead, Framework, LanguageModel, Limits, Vocabulary};
use serde_json::{json, Value};

fn call(addr: std::net::SocketAddr, method: &str, params: Value) -> Value {
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    let req = Request {
        v: 1,
        id: 9,
        method: method.into(),
        params,
    };
    write_frame(&mut s, &req).unwrap();
    read_frame(&mut s).unwrap().unwrap()
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

/// A meta model that routes query `q<k>` to expert `k mod 3` with a
/// per-query reply, served behind loopback servers.
fn routed_stub(n: usize) -> (Framework, Vec<Server>, Vec<(String, String, String)>) {
    let v = Vocabulary::printable_ascii().size();
    let mut meta = ScriptedMeta::new("meta", 3, "stub");
    let mut experts: Vec<ScriptedExpert> = (0..3).map(|k| ScriptedExpert::new(format!("x{k}"))).collect();
    let mut expected = Vec::new();
    for i in 0..n {
        let k = i % 3;
        let mut hidden = vec![0.0; 3];
        hidden[k] = 1.0;
        let q = format!("q{i}");
        let reply = format!("r{i}-{k}");
        meta = meta.with_script(q.clone(), vec![ScriptStep { hidden, logits: vec![0.0; v] }]);
        experts[k] = experts[k].clone().reply(q.clone(), reply.clone()).with_delay(Duration::from_millis(2));
        expected.push((q, reply, format!("x{k}")));
    }
    let mut weights = vec![0.0; 9];
    for k in 0..3 {
        weights[k * 3 + k] = 4.0;
    }
    let infos = (0..3).map(|k| ExpertInfo::new(format!("x{k}"), "remote")).collect();
    let head = ExpertTokenHead::from_parts(3, "stub", infos, weights).unwrap();
    let mut servers = vec![serve(Arc::new(meta))];
    let meta = remote(&servers[0], "meta");
    let mut rem = Vec::new();
    for e in experts {
        let s = serve(Arc::new(e.clone()));
        rem.push(remote(&s, &e.name));
        servers.push(s);
    }
    (Framework::new(meta, head, rem).unwrap(), servers, expected)
}

#[test]
fn concurrent_sessions_get_their_own_traces() {
    let (fw, _backends, expected) = routed_stub(32);
    let gw = Server::start("127.0.0.1:0", Arc::new(Gateway::new(fw, Limits::default()))).unwrap();
    let addr = gw.addr();
    let handles: Vec<_> = expected
        .into_iter()
        .map(|(q, reply, expert)| {
            std::thread::spawn(move || {
                let r = call(addr, "chat_generate", json!({"query": q, "trace": true}));
                let result = &r["result"];
                assert_eq!(result["response"], json!(reply), "{r}");
                assert_eq!(result["trace"]["switched_to"], json!(expert), "{r}");
                let tokens: String = result["trace"]["events"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .filter(|e| e["kind"] == "token" && e["value"] != "<eos>")
                    .map(|e| e["value"].as_str().unwrap().to_string())
                    .collect();
                assert_eq!(tokens, reply);
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
}

#[test]
fn untraced_response_has_single_model_schema() {
    let (fw, _backends, expected) = routed_stub(3);
    let gw = Server::start("127.0.0.1:0", Arc::new(Gateway::new(fw, Limits::default()))).unwrap();
    let single = serve(Arc::new(ScriptedExpert::new("plain").default_reply("hello")));
    for (q, _, expert) in &expected {
        let a = call(gw.addr(), "chat_generate", json!({"query": q}));
        let b = call(single.addr(), "chat_generate", json!({"query": q}));
        assert_eq!(keys(&a), keys(&b));
        assert_eq!(keys(&a["result"]), keys(&b["result"]));
        let text = a.to_string();
        assert!(!text.contains(expert.as_str()) && !text.contains("ExpertToken"), "{text}");
    }
}

#[test]
fn empty_head_gateway_answers_like_the_meta_model() {
    let v = Vocabulary::printable_ascii();
    let meta = Arc::new(Backbone::init("meta", v.clone(), Dims::toy(v.size()), 5).unwrap());
    let head = ExpertTokenHead::empty(meta.dims().d, meta.fingerprint());
    let gw = Gateway::new(Framework::new(meta.clone(), head, vec![]).unwrap(), Limits::default());
    for q in ["reverse: abc", "sort: 3142", "roman: 12"] {
        let want = meta.generate(&etr_core::Prompt::new(q), 128).unwrap().text;
        assert_eq!(gw.handle("chat_generate", &json!({"query": q})).unwrap(), json!({"response": want}));
    }
}

#[test]
fn mid_request_failure_names_the_backend() {
    let v = Vocabulary::printable_ascii().size();
    let meta = ScriptedMeta::new("meta", 1, "fp").with_script(
        "q",
        vec![ScriptStep {
            hidden: vec![1.0],
            logits: vec![0.0; v],
        }],
    );
    let head = ExpertTokenHead::from_parts(1, "fp", vec![ExpertInfo::new("broken", "x")], vec![3.0]).unwrap();
    let expert: Arc<dyn LanguageModel> = Arc::new(ScriptedExpert::new("broken").failing());
    let fw = Framework::new(Arc::new(meta), head, vec![expert]).unwrap();
    let gw = Server::start("127.0.0.1:0", Arc::new(Gateway::new(fw, Limits::default()))).unwrap();
    let r = call(gw.addr(), "chat_generate", json!({"query": "q"}));
    assert_eq!(r["error"]["backend"], json!("broken"), "{r}");
    assert!(r["result"].is_null());
}

fn write_checkpoints(dir: &std::path::Path) -> Backbone {
    let v = Vocabulary::printable_ascii();
    let meta = Backbone::init("meta", v.clone(), Dims::toy(v.size()), 8).unwrap();
    meta.save(dir.join("meta.json")).unwrap();
    meta.save(dir.join("reverse.json")).unwrap();
    let head = ExpertTokenHead::init(&meta, vec![ExpertInfo::new("reverse", "local")]).unwrap();
    head.save(dir.join("head.json")).unwrap();
    meta
}

#[test]
fn gateway_refuses_to_start_with_an_unreachable_backend() {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoints(dir.path());
    let dead = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().to_string()
    };
    let mut cfg = GatewayConfig {
        meta: BackendDescriptor::in_process("meta", "meta.json"),
        experts: vec![BackendDescriptor::remote("reverse", dead)],
        head: "head.json".into(),
        limits: Limits::default(),
        listen: "127.0.0.1:0".into(),
        request_timeout_ms: 500,
        max_inflight_per_backend: 1,
    };
    let err = Gateway::from_config(&cfg, dir.path()).err().expect("must refuse");
    assert!(err.to_string().contains("reverse"), "{err}");

    cfg.experts = vec![BackendDescriptor::in_process("reverse", "reverse.json")];
    assert!(Gateway::from_config(&cfg, dir.path()).is_ok());
}

#[test]
fn gateway_rejects_a_head_for_another_backbone() {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoints(dir.path());
    let v = Vocabulary::printable_ascii();
    let other = Backbone::init("other", v.clone(), Dims::toy(v.size()), 99).unwrap();
    ExpertTokenHead::init(&other, vec![ExpertInfo::new("reverse", "local")])
        .unwrap()
        .save(dir.path().join("head.json"))
        .unwrap();
    let cfg = GatewayConfig {
        meta: BackendDescriptor::in_process("meta", "meta.json"),
        experts: vec![BackendDescriptor::in_process("reverse", "reverse.json")],
        head: "head.json".into(),
        limits: Limits::default(),
        listen: "127.0.0.1:0".into(),
        request_timeout_ms: 500,
        max_inflight_per_backend: 1,
    };
    let err = Gateway::from_config(&cfg, dir.path()).err().expect("must refuse");
    assert!(err.to_string().contains("fingerprint mismatch"), "{err}");
}

#[test]
fn gateway_config_round_trips() {
    let text = r#"{
        "meta": {"name": "meta", "kind": "in-process", "checkpoint": "m.json"},
        "experts": [{"name": "reverse", "kind": "remote", "address": "127.0.0.1:9"}],
        "head": "head.json"
    }"#;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gw.json");
    std::fs::write(&path, text).unwrap();
    let cfg = GatewayConfig::load(&path).unwrap();
    assert_eq!(cfg.experts[0], BackendDescriptor::remote("reverse", "127.0.0.1:9"));
    assert_eq!(cfg.max_inflight_per_backend, 1);
    let back: GatewayConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
}
