//! Text file formats: JSONL corpora and queries, TREC qrels and run files,
//! teacher score files and negative pool files.
//!
//! Parsers are total over untrusted bytes: malformed input yields an error
//! with a line number, never a panic.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Document, Qrels, Query, ReprError, RunFile, TokenLimits};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: ReprError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn malformed(line: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Malformed { line, msg: msg.into() }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDoc {
    id: String,
    tokens: Vec<u32>,
}

/// Parses a JSONL corpus: one `{"id": str, "tokens": [int,...]}` per line.
pub fn parse_corpus<R: Read>(reader: R, limits: &TokenLimits) -> Result<Vec<Document>, FormatError> {
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDoc = serde_json::from_str(&line)
            .map_err(|e| malformed(lineno, format!("bad json document: {e}")))?;
        let doc = Document::new(raw.id, raw.tokens, limits)
            .map_err(|source| FormatError::Invalid { line: lineno, source })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Parses a JSONL query file (same schema as the corpus).
pub fn parse_queries<R: Read>(reader: R, limits: &TokenLimits) -> Result<Vec<Query>, FormatError> {
    let docs = parse_corpus(reader, limits)?;
    Ok(docs
        .into_iter()
        .map(|d| Query { query_id: d.doc_id, tokens: d.tokens })
        .collect())
}

pub fn write_corpus<W: Write>(mut w: W, docs: &[Document]) -> std::io::Result<()> {
    for d in docs {
        let raw = RawDoc { id: d.doc_id.clone(), tokens: d.tokens.clone() };
        serde_json::to_writer(&mut w, &raw)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_queries<W: Write>(w: W, queries: &[Query]) -> std::io::Result<()> {
    let docs: Vec<Document> = queries
        .iter()
        .map(|q| Document { doc_id: q.query_id.clone(), tokens: q.tokens.clone() })
        .collect();
    write_corpus(w, &docs)
}

/// Parses TREC 4-column qrels: `qid 0 docid grade`.
pub fn parse_qrels<R: Read>(reader: R) -> Result<Qrels, FormatError> {
    let mut qrels = Qrels::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(malformed(lineno, format!("expected 4 fields, got {}", fields.len())));
        }
        let grade: u32 = fields[3]
            .parse()
            .map_err(|_| malformed(lineno, format!("bad grade {:?}", fields[3])))?;
        qrels.insert(fields[0], fields[2], grade);
    }
    qrels
        .validate()
        .map_err(|source| FormatError::Invalid { line: 0, source })?;
    Ok(qrels)
}

pub fn write_qrels<W: Write>(mut w: W, qrels: &Qrels) -> std::io::Result<()> {
    for qid in qrels.queries() {
        if let Some(graded) = qrels.graded(qid) {
            for (docid, grade) in graded {
                writeln!(w, "{qid} 0 {docid} {grade}")?;
            }
        }
    }
    Ok(())
}

/// Parses a TREC 6-column run file: `qid Q0 docid rank score tag`.
///
/// Rankings are re-sorted into the canonical order on load; scores must be
/// finite and doc ids unique per query.
pub fn parse_run<R: Read>(reader: R) -> Result<RunFile, FormatError> {
    let mut per_query: std::collections::BTreeMap<String, Vec<(String, f64)>> =
        std::collections::BTreeMap::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(malformed(lineno, format!("expected 6 fields, got {}", fields.len())));
        }
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| malformed(lineno, format!("bad score {:?}", fields[4])))?;
        if !score.is_finite() {
            return Err(malformed(lineno, "non-finite score"));
        }
        per_query
            .entry(fields[0].to_string())
            .or_default()
            .push((fields[2].to_string(), score));
    }
    let mut run = RunFile::new();
    for (qid, ranking) in per_query {
        run.insert(qid, ranking)
            .map_err(|source| FormatError::Invalid { line: 0, source })?;
    }
    Ok(run)
}

pub fn write_run<W: Write>(mut w: W, run: &RunFile, tag: &str) -> std::io::Result<()> {
    let mut buf = String::new();
    for (qid, ranking) in run.iter() {
        for (rank, (docid, score)) in ranking.iter().enumerate() {
            buf.clear();
            // `{}` on f64 round-trips exactly, so rewriting a run is lossless.
            let _ = write!(buf, "{qid} Q0 {docid} {} {score} {tag}", rank + 1);
            writeln!(w, "{buf}")?;
        }
    }
    Ok(())
}

/// Teacher score line: `qid docid score`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherScore {
    pub query_id: String,
    pub doc_id: String,
    pub score: f64,
}

pub fn parse_teacher_scores<R: Read>(reader: R) -> Result<Vec<TeacherScore>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(malformed(lineno, format!("expected 3 fields, got {}", fields.len())));
        }
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| malformed(lineno, format!("bad score {:?}", fields[2])))?;
        if !score.is_finite() {
            return Err(malformed(lineno, "non-finite score"));
        }
        out.push(TeacherScore {
            query_id: fields[0].to_string(),
            doc_id: fields[1].to_string(),
            score,
        });
    }
    Ok(out)
}

pub fn write_teacher_scores<W: Write>(mut w: W, scores: &[TeacherScore]) -> std::io::Result<()> {
    for s in scores {
        writeln!(w, "{} {} {}", s.query_id, s.doc_id, s.score)?;
    }
    Ok(())
}

/// Where a mined negative came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSource {
    Bm25,
    Dense,
    Lex,
}

impl NegativeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            NegativeSource::Bm25 => "bm25",
            NegativeSource::Dense => "dense",
            NegativeSource::Lex => "lex",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bm25" => Some(NegativeSource::Bm25),
            "dense" => Some(NegativeSource::Dense),
            "lex" => Some(NegativeSource::Lex),
            _ => None,
        }
    }
}

/// Negative pool line: `qid docid source`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolEntry {
    pub query_id: String,
    pub doc_id: String,
    pub source: NegativeSource,
}

pub fn parse_pool<R: Read>(reader: R) -> Result<Vec<PoolEntry>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(malformed(lineno, format!("expected 3 fields, got {}", fields.len())));
        }
        let source = NegativeSource::parse(fields[2])
            .ok_or_else(|| malformed(lineno, format!("unknown source {:?}", fields[2])))?;
        out.push(PoolEntry {
            query_id: fields[0].to_string(),
            doc_id: fields[1].to_string(),
            source,
        });
    }
    Ok(out)
}

pub fn write_pool<W: Write>(mut w: W, entries: &[PoolEntry]) -> std::io::Result<()> {
    for e in entries {
        writeln!(w, "{} {} {}", e.query_id, e.doc_id, e.source.as_str())?;
    }
    Ok(())
}

pub fn read_file<T>(
    path: &Path,
    parse: impl FnOnce(std::fs::File) -> Result<T, FormatError>,
) -> Result<T, FormatError> {
    let file = std::fs::File::open(path)?;
    parse(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_round_trip() {
        let limits = TokenLimits { vocab_size: 100, max_seq_len: 16 };
        let text = r#"{"id":"d1","tokens":[1,2,3]}
{"id":"d2","tokens":[4]}
"#;
        let docs = parse_corpus(text.as_bytes(), &limits).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].doc_id, "d1");
        assert_eq!(docs[1].tokens, vec![4]);

        let mut buf = Vec::new();
        write_corpus(&mut buf, &docs).unwrap();
        let again = parse_corpus(buf.as_slice(), &limits).unwrap();
        assert_eq!(docs, again);
    }

    #[test]
    fn corpus_rejects_bad_lines() {
        let limits = TokenLimits { vocab_size: 10, max_seq_len: 4 };
        assert!(parse_corpus("not json".as_bytes(), &limits).is_err());
        assert!(parse_corpus(r#"{"id":"d","tokens":[99]}"#.as_bytes(), &limits).is_err());
        assert!(parse_corpus(r#"{"id":"d","tokens":[]}"#.as_bytes(), &limits).is_err());
        assert!(parse_corpus(r#"{"id":"d","tokens":[-1]}"#.as_bytes(), &limits).is_err());
    }

    #[test]
    fn qrels_round_trip() {
        let text = "q1 0 d1 1\nq1 0 d2 0\nq2 0 d9 2\n";
        let qrels = parse_qrels(text.as_bytes()).unwrap();
        assert_eq!(qrels.grade("q2", "d9"), Some(2));
        let mut buf = Vec::new();
        write_qrels(&mut buf, &qrels).unwrap();
        assert_eq!(parse_qrels(buf.as_slice()).unwrap(), qrels);
    }

    #[test]
    fn run_round_trip_preserves_order() {
        let mut run = RunFile::new();
        run.insert("q1", vec![("d2".into(), 0.125), ("d1".into(), 10.5)]).unwrap();
        run.insert("q2", vec![("da".into(), 3.0), ("db".into(), 3.0)]).unwrap();
        let mut buf = Vec::new();
        write_run(&mut buf, &run, "tag").unwrap();
        let again = parse_run(buf.as_slice()).unwrap();
        assert_eq!(run, again);
    }

    #[test]
    fn run_rejects_malformed() {
        assert!(parse_run("q1 Q0 d1 1".as_bytes()).is_err());
        assert!(parse_run("q1 Q0 d1 1 nan tag".as_bytes()).is_err());
        assert!(parse_run("q1 Q0 d1 1 1.0 t\nq1 Q0 d1 2 0.5 t".as_bytes()).is_err());
    }

    #[test]
    fn pool_and_teacher_round_trip() {
        let pool = vec![
            PoolEntry { query_id: "q1".into(), doc_id: "d1".into(), source: NegativeSource::Bm25 },
            PoolEntry { query_id: "q1".into(), doc_id: "d2".into(), source: NegativeSource::Lex },
        ];
        let mut buf = Vec::new();
        write_pool(&mut buf, &pool).unwrap();
        assert_eq!(parse_pool(buf.as_slice()).unwrap(), pool);
        assert!(parse_pool("q d unknown".as_bytes()).is_err());

        let scores = vec![TeacherScore { query_id: "q".into(), doc_id: "d".into(), score: -1.25 }];
        let mut buf = Vec::new();
        write_teacher_scores(&mut buf, &scores).unwrap();
        assert_eq!(parse_teacher_scores(buf.as_slice()).unwrap(), scores);
        assert!(parse_teacher_scores("q d inf".as_bytes()).is_err());
    }
}
