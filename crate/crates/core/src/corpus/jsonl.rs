use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::candidates::{CandidateKind, PromptCandidate};
use super::vocab::Vocabulary;
use super::{DomainDataset, LabeledExample};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct ExampleLine {
    text: Option<String>,
    tokens: Option<Vec<usize>>,
    label: usize,
    domain: String,
}

#[derive(Serialize)]
struct ExampleOut<'a> {
    domain: &'a str,
    label: usize,
    text: String,
}

#[derive(Deserialize)]
struct PromptLine {
    id: u64,
    text: Option<String>,
    tokens: Option<Vec<usize>>,
    domain: String,
}

#[derive(Serialize)]
struct PromptOut<'a> {
    domain: &'a str,
    id: u64,
    text: String,
}

fn parse_error(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        source_name: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

fn tokens_of(
    path: &Path,
    line: usize,
    text: Option<String>,
    tokens: Option<Vec<usize>>,
    vocab: &Vocabulary,
) -> Result<Vec<usize>> {
    match (text, tokens) {
        (Some(t), None) => Ok(vocab.encode(&t)),
        (None, Some(ids)) => {
            if let Some(bad) = ids.iter().find(|&&i| i >= vocab.len()) {
                return Err(parse_error(
                    path,
                    line,
                    format!("token id {bad} outside the vocabulary"),
                ));
            }
            Ok(ids)
        }
        (Some(_), Some(_)) => Err(parse_error(path, line, "give either \"text\" or \"tokens\", not both")),
        (None, None) => Err(parse_error(path, line, "missing \"text\" or \"tokens\"")),
    }
}

fn non_blank_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Reads `{"text" | "tokens", "label", "domain"}` lines.
///
/// The dataset takes the domain of its first line; each example keeps its
/// own tag.
pub fn load_jsonl(path: &Path, vocab: &Vocabulary) -> Result<DomainDataset> {
    let n_labels = vocab.label_words.len();
    let mut examples = Vec::new();
    for (line_no, line) in non_blank_lines(path)? {
        let rec: ExampleLine = serde_json::from_str(&line).map_err(|e| parse_error(path, line_no, e.to_string()))?;
        if rec.label >= n_labels {
            return Err(parse_error(
                path,
                line_no,
                format!("label {} outside 0..{n_labels}", rec.label),
            ));
        }
        let tokens = tokens_of(path, line_no, rec.text, rec.tokens, vocab)?;
        if tokens.is_empty() {
            return Err(parse_error(path, line_no, "empty input"));
        }
        examples.push(LabeledExample {
            tokens,
            label: rec.label,
            domain: rec.domain,
        });
    }
    let domain = examples.first().map(|e| e.domain.clone()).unwrap_or_default();
    Ok(DomainDataset { domain, examples })
}

pub fn write_jsonl(path: &Path, dataset: &DomainDataset, vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in &dataset.examples {
        let rec = ExampleOut {
            domain: &ex.domain,
            label: ex.label,
            text: vocab.decode(&ex.tokens),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `{"id", "text" | "tokens", "domain"}` prompt lines.
pub fn load_prompt_pool(path: &Path, vocab: &Vocabulary) -> Result<Vec<PromptCandidate>> {
    let mut out: Vec<PromptCandidate> = Vec::new();
    for (line_no, line) in non_blank_lines(path)? {
        let rec: PromptLine = serde_json::from_str(&line).map_err(|e| parse_error(path, line_no, e.to_string()))?;
        if out.iter().any(|c| c.id == rec.id) {
            return Err(parse_error(path, line_no, format!("duplicate prompt id {}", rec.id)));
        }
        let tokens = tokens_of(path, line_no, rec.text, rec.tokens, vocab)?;
        if tokens.is_empty() {
            return Err(parse_error(path, line_no, "empty prompt"));
        }
        out.push(PromptCandidate {
            id: rec.id,
            tokens,
            domain: rec.domain,
            kind: CandidateKind::External,
        });
    }
    Ok(out)
}

pub fn write_prompt_pool(path: &Path, pool: &[PromptCandidate], vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in pool {
        let rec = PromptOut {
            domain: &c.domain,
            id: c.id,
            text: vocab.decode(&c.tokens),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_domains, TaskSpec};

    fn vocab() -> Vocabulary {
        TaskSpec::default().vocabulary(3)
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        let ds = load_jsonl(&path, &vocab()).unwrap();
        assert!(ds.examples.is_empty());
    }

    #[test]
    fn write_then_load_round_trips() {
        let task = TaskSpec {
            examples_per_domain: 50,
            ..TaskSpec::default()
        };
        let data = generate_domains(&task, 3, 0.4, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&path, &data[1], &vocab()).unwrap();
        assert_eq!(load_jsonl(&path, &vocab()).unwrap(), data[1]);
    }

    #[test]
    fn missing_label_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"text\":\"w1 w2\",\"label\":0,\"domain\":\"d0\"}\n\n{\"text\":\"w3\",\"domain\":\"d0\"}\n",
        )
        .unwrap();
        match load_jsonl(&path, &vocab()) {
            Err(Error::Parse { line, detail, .. }) => {
                assert_eq!(line, 3);
                assert!(detail.contains("label"), "{detail}");
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn tokens_form_and_unknown_words() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        std::fs::write(
            &path,
            "{\"tokens\":[5,6],\"label\":1,\"domain\":\"x\"}\n{\"text\":\"w0 zzz\",\"label\":0,\"domain\":\"x\"}\n",
        )
        .unwrap();
        let ds = load_jsonl(&path, &vocab()).unwrap();
        assert_eq!(ds.examples[0].tokens, vec![5, 6]);
        assert_eq!(ds.examples[1].tokens[1], crate::corpus::UNK);
    }

    #[test]
    fn prompt_pool_round_trip() {
        let v = vocab();
        let pool = vec![
            PromptCandidate {
                id: 4,
                tokens: v.encode("review sentiment"),
                domain: "d0".into(),
                kind: CandidateKind::External,
            },
            PromptCandidate {
                id: 9,
                tokens: v.encode("the answer is"),
                domain: "d1".into(),
                kind: CandidateKind::External,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_prompt_pool(&path, &pool, &v).unwrap();
        assert_eq!(load_prompt_pool(&path, &v).unwrap(), pool);
    }
}
