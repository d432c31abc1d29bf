use etr_core::backbone::Dims;
use etr_core::pipeline::synthesize;
use etr_core::{Backbone, BenchmarkConfig, Domain, LanguageModel, Prompt, Vocabulary};

fn small_config() -> BenchmarkConfig {
    BenchmarkConfig {
        experts: vec![Domain::Reverse, Domain::Roman],
        test_per_domain: 5,
        train_per_domain: 20,
        meta_general: 10,
        instruction_per_domain: 4,
        ..BenchmarkConfig::default()
    }
}

#[test]
fn benchmark_data_round_trips() {
    let cfg = small_config();
    let data = synthesize(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = etr_core::pipeline::BenchmarkData::load(dir.path(), &cfg.experts).unwrap();
    assert_eq!(back.test, data.test);
    assert_eq!(back.train, data.train);
    assert_eq!(back.general, data.general);
    assert_eq!(back.instruction.pairs, data.instruction.pairs);
}

#[test]
fn synthesis_is_seeded() {
    let cfg = small_config();
    assert_eq!(synthesize(&cfg).unwrap().test, synthesize(&cfg).unwrap().test);
    let other = BenchmarkConfig { seed: cfg.seed + 1, ..cfg.clone() };
    assert_ne!(synthesize(&other).unwrap().test, synthesize(&cfg).unwrap().test);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let v = Vocabulary::printable_ascii();
    let m = Backbone::init("m", v.clone(), Dims::toy(v.size()), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    m.save(&path).unwrap();
    let back = Backbone::load("m", v, &path).unwrap();
    assert_eq!(back.fingerprint(), m.fingerprint());
    let p = Prompt::with_generated("sort: 9183", "1");
    let (a, b) = (m.word_logits(&p).unwrap(), back.word_logits(&p).unwrap());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn config_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"seed": 1, "tua": 2.0}"#).unwrap();
    assert!(BenchmarkConfig::load(&path).is_err());
}

#[test]
fn interleaved_questions_alternate_domains() {
    let data = synthesize(&small_config()).unwrap();
    let qs = data.interleaved_test_questions(12);
    assert_eq!(qs.len(), 12);
    assert!(qs[0].starts_with("reverse: ") && qs[1].starts_with("roman: "));
    assert_eq!(qs[10], qs[0]);
}
