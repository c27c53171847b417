use std::path::PathBuf;

use crossfuzz_core::align::AliasMap;
use crossfuzz_core::corpus::{load_corpus, parse_corpus, Corpus, CorpusRules};
use crossfuzz_core::matcher::{build_groups, read_groups, write_groups, MatchOutcome};
use crossfuzz_core::similarity::{name_similarity, param_similarity, LexicalProvider};

fn data_dir(sub: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(sub)
}

fn mini_corpora() -> Vec<Corpus> {
    ["pytorch", "tensorflow", "keras", "chainer", "jax"]
        .iter()
        .map(|s| load_corpus(data_dir("mini").join(format!("{s}.jsonl")), &CorpusRules::default()).unwrap())
        .collect()
}

fn run(corpora: &[Corpus]) -> MatchOutcome {
    let provider = LexicalProvider::fit_corpora(corpora.iter());
    let targets: Vec<&Corpus> = corpora[1..].iter().collect();
    build_groups(&corpora[0], &targets, &provider, &AliasMap::default()).unwrap()
}

#[test]
fn mini_corpus_yields_one_argsort_group() {
    let corpora = mini_corpora();
    assert!(corpora.iter().all(|c| c.len() >= 11));
    let out = run(&corpora);
    assert_eq!(out.groups.len(), 1, "{:?}", out.groups.iter().map(|g| &g.group_id).collect::<Vec<_>>());
    let g = &out.groups[0];
    assert_eq!(g.members.len(), 5);
    assert!(g.members.iter().all(|m| m.normalized_name == "argsort"));
    for (i, a) in g.members.iter().enumerate() {
        for b in &g.members[i + 1..] {
            assert_eq!(name_similarity(&a.normalized_name, &b.normalized_name), 1.0);
            assert_eq!(param_similarity(a, b).param_sim, 2.0);
        }
    }
    let aligned = g.aligned.as_ref().unwrap();
    assert_eq!(aligned.canonical_params.len(), 2);
    assert_eq!(aligned.per_member_order.len(), 5);
    assert_eq!(out.stats.groups, 1);
    assert_eq!(out.stats.grouped_apis, 5);
}

#[test]
fn groups_file_round_trips() {
    let out = run(&mini_corpora());
    let mut buf = Vec::new();
    write_groups(&mut buf, &out.groups).unwrap();
    assert_eq!(read_groups(&buf[..]).unwrap(), out.groups);
}

#[test]
fn matching_is_deterministic() {
    let a = run(&mini_corpora());
    let b = run(&mini_corpora());
    assert_eq!(a.groups, b.groups);
    assert_eq!(a.stats, b.stats);
}

#[test]
fn demo_corpus_pairs_every_op() {
    let rules = CorpusRules::default();
    let torch = load_corpus(data_dir("demo").join("torch.jsonl"), &rules).unwrap();
    let tf = load_corpus(data_dir("demo").join("tf.jsonl"), &rules).unwrap();
    let out = run(&[torch, tf]);
    let mut ops: Vec<&str> = out.groups.iter().map(|g| g.members[0].normalized_name.as_str()).collect();
    ops.sort();
    assert_eq!(
        ops,
        ["add", "angle", "argsort", "clip", "matmul", "mean", "mul", "relu", "softmax", "sum"]
    );
    assert!(out.groups.iter().all(|g| g.members.len() == 2 && g.aligned.is_some()));
}

#[test]
fn parameter_count_mismatch_is_rejected() {
    let rules = CorpusRules::default();
    let a = parse_corpus(
        r#"{"source":"a","name":"a.argsort","description":"indices that sort a tensor","params":[{"name":"input","type":"Tensor"},{"name":"dim","type":"int"}]}"#,
        &rules,
    )
    .unwrap();
    let b = parse_corpus(
        r#"{"source":"b","name":"b.argsort","description":"indices that sort a tensor","params":[{"name":"x","type":"Tensor"},{"name":"axis","type":"int"},{"name":"other","type":"Tensor"}]}"#,
        &rules,
    )
    .unwrap();
    let out = run(&[a, b]);
    assert!(out.groups.is_empty());
    assert_eq!(out.stats.stage3, 0);
}
