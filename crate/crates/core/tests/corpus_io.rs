use faithcore::harness::corpus::parse_corpus;
use faithcore::harness::{load_attributions, load_corpus, write_corpus};
use faithcore::model::TokenSequence;
use faithcore::Error;

#[test]
fn hundred_records_round_trip() {
    let corpus: Vec<TokenSequence> = (0..100)
        .map(|i| TokenSequence {
            id: format!("doc-{i}"),
            tokens: (0..1 + i % 17).map(|t| (t * 7 + i) % 64).collect(),
            label: i % 2,
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    write_corpus(&path, &corpus).unwrap();
    assert_eq!(load_corpus(&path, 64, 2, 24).unwrap(), corpus);
}

#[test]
fn bad_records_name_their_line() {
    let text = "{\"id\":\"a\",\"tokens\":[1],\"label\":0}\n{\"id\":\"b\",\"tokens\":[1]}\n";
    match parse_corpus(text) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_corpus(""), Err(Error::Data(_))));
    let dup = "{\"id\":\"a\",\"tokens\":[1],\"label\":0}\n{\"id\":\"a\",\"tokens\":[2],\"label\":1}\n";
    assert!(matches!(parse_corpus(dup), Err(Error::Data(_))));
}

#[test]
fn out_of_range_tokens_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    std::fs::write(&path, "{\"id\":\"a\",\"tokens\":[99],\"label\":0}\n").unwrap();
    assert!(matches!(load_corpus(&path, 64, 2, 24), Err(Error::Data(_))));
}

#[test]
fn missing_corpus_is_io() {
    let err = load_corpus(std::path::Path::new("/nonexistent/c.jsonl"), 64, 2, 24).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(load_attributions(std::path::Path::new("/nonexistent/a.jsonl")).is_err());
}
