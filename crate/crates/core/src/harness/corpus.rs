//! Line-delimited JSON corpora and imported attribution files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::TokenSequence;

/// Reads `{"id","tokens","label"}` records, one per line, in file order.
/// Blank lines are skipped; each record is checked against the model limits.
pub fn load_corpus(path: &Path, vocab_size: usize, classes: usize, max_len: usize) -> Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corpus = parse_corpus(&text)?;
    for seq in &corpus {
        seq.validate(vocab_size, classes, max_len)?;
    }
    Ok(corpus)
}

/// Parses corpus text without validating against a vocabulary.
pub fn parse_corpus(text: &str) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq: TokenSequence = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(seq.id.clone()) {
            return Err(Error::Data(format!("duplicate instance id {}", seq.id)));
        }
        out.push(seq);
    }
    if out.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, corpus: &[TokenSequence]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for seq in corpus {
        let line = serde_json::to_string(seq).expect("token sequences serialize");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct AttributionLine {
    id: String,
    fa: String,
    scores: Vec<f64>,
}

/// Externally computed scores keyed by `(instance id, fa name)`.
pub type ImportedScores = BTreeMap<(String, String), Vec<f64>>;

/// Reads `{"id","fa","scores"}` records.
pub fn load_attributions(path: &Path) -> Result<ImportedScores> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = ImportedScores::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AttributionLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Data(format!(
                "attribution for instance {} ({}) has a non-finite score",
                rec.id, rec.fa
            )));
        }
        let key = (rec.id, rec.fa);
        if out.contains_key(&key) {
            return Err(Error::Data(format!(
                "duplicate attribution for instance {} ({})",
                key.0, key.1
            )));
        }
        out.insert(key, rec.scores);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_malformed() {
        assert!(matches!(parse_corpus(""), Err(Error::Data(_))));
        assert!(matches!(parse_corpus("\n  \n"), Err(Error::Data(_))));
        let text = "{\"id\":\"a\",\"tokens\":[1],\"label\":0}\n{\"id\":\"b\",\"tokens\":[1]\n";
        match parse_corpus(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_vocabulary_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"id\":\"inst-7\",\"tokens\":[1,99],\"label\":0}\n").unwrap();
        match load_corpus(&path, 10, 2, 8) {
            Err(Error::Data(m)) => assert!(m.contains("inst-7"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = "{\"id\":\"a\",\"tokens\":[1],\"label\":0}\n{\"id\":\"a\",\"tokens\":[2],\"label\":1}\n";
        assert!(matches!(parse_corpus(text), Err(Error::Data(_))));
    }

    #[test]
    fn attribution_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"fa\":\"lime\",\"scores\":[0.1,0.9]}\n{\"id\":\"b\",\"fa\":\"lime\",\"scores\":[1]}\n",
        )
        .unwrap();
        let s = load_attributions(&path).unwrap();
        assert_eq!(s[&("a".to_string(), "lime".to_string())], vec![0.1, 0.9]);
        assert_eq!(s.len(), 2);
    }
}
