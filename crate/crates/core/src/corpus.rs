//! N-gram dependency corpus ingestion and candidate query discovery.
//!
//! The corpus is a 4-field TSV: `modifier \t head \t pos_tag \t count`.
//! Candidates for a keyword are the NOUN-tagged modifiers whose head is the
//! keyword, aggregated by modifier.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NOUN_TAG: &str = "NOUN";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus line {line} is not valid UTF-8")]
    Decode { line: usize },
    #[error("corpus read failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramEntry {
    pub modifier: String,
    pub head: String,
    pub pos_tag: String,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseWarning {
    /// Every non-blank line was rejected.
    AllMalformed,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedCorpus {
    pub entries: Vec<NgramEntry>,
    /// 1-based line numbers of rejected lines.
    pub malformed_lines: Vec<usize>,
    pub warning: Option<ParseWarning>,
}

impl ParsedCorpus {
    pub fn malformed(&self) -> usize {
        self.malformed_lines.len()
    }
}

/// A modifier + keyword text query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateQuery {
    pub keyword: String,
    pub modifier: String,
    pub query_text: String,
    pub corpus_count: u64,
    #[serde(default)]
    pub match_score: Option<u64>,
}

impl CandidateQuery {
    pub fn new(keyword: &str, modifier: &str, corpus_count: u64) -> Self {
        let keyword = normalize_token(keyword);
        let modifier = normalize_token(modifier);
        let query_text = format!("{keyword} {modifier}");
        Self {
            keyword,
            modifier,
            query_text,
            corpus_count,
            match_score: None,
        }
    }
}

pub fn normalize_token(token: &str) -> String {
    token.trim().to_ascii_lowercase()
}

fn parse_line(line: &str) -> Option<NgramEntry> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return None;
    }
    let modifier = fields[0].trim();
    let head = fields[1].trim();
    let pos_tag = fields[2].trim();
    // single-token modifiers and heads only
    if modifier.is_empty() || head.is_empty() || pos_tag.is_empty() {
        return None;
    }
    if modifier.contains(char::is_whitespace) || head.contains(char::is_whitespace) {
        return None;
    }
    let count = fields[3].trim().parse::<u64>().ok()?;
    Some(NgramEntry {
        modifier: modifier.to_string(),
        head: head.to_string(),
        pos_tag: pos_tag.to_string(),
        count,
    })
}

/// Streams the corpus line by line. Malformed lines are recorded and
/// skipped; blank lines are ignored.
pub fn parse_ngram_file<R: BufRead>(source: R) -> Result<ParsedCorpus, CorpusError> {
    let mut parsed = ParsedCorpus::default();
    let mut non_blank = 0usize;
    for (idx, line) in source.lines().enumerate() {
        let line = match line {
            Ok(l) => l,
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                return Err(CorpusError::Decode { line: idx + 1 })
            }
            Err(e) => return Err(e.into()),
        };
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        non_blank += 1;
        match parse_line(line) {
            Some(entry) => parsed.entries.push(entry),
            None => parsed.malformed_lines.push(idx + 1),
        }
    }
    if non_blank > 0 && parsed.entries.is_empty() {
        log::warn!("all {non_blank} corpus lines were malformed");
        parsed.warning = Some(ParseWarning::AllMalformed);
    } else if !parsed.malformed_lines.is_empty() {
        log::warn!("skipped {} malformed corpus lines", parsed.malformed_lines.len());
    }
    Ok(parsed)
}

/// NOUN-tagged modifiers of `keyword`, counts summed per modifier, sorted by
/// count descending then modifier ascending.
pub fn discover_candidates(keyword: &str, entries: &[NgramEntry]) -> Vec<CandidateQuery> {
    let kw = normalize_token(keyword);
    if kw.is_empty() {
        return Vec::new();
    }
    let mut totals: BTreeMap<String, u64> = BTreeMap::new();
    for e in entries {
        if !e.pos_tag.eq_ignore_ascii_case(NOUN_TAG) || !e.head.eq_ignore_ascii_case(&kw) {
            continue;
        }
        let modifier = normalize_token(&e.modifier);
        // the keyword must appear exactly once in the query text
        if modifier == kw {
            continue;
        }
        *totals.entry(modifier).or_default() += e.count;
    }
    let mut out: Vec<CandidateQuery> = totals
        .into_iter()
        .filter(|(_, count)| *count > 0)
        .map(|(modifier, count)| CandidateQuery::new(&kw, &modifier, count))
        .collect();
    out.sort_by(|a, b| {
        b.corpus_count
            .cmp(&a.corpus_count)
            .then_with(|| a.modifier.cmp(&b.modifier))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> ParsedCorpus {
        parse_ngram_file(text.as_bytes()).unwrap()
    }

    #[test]
    fn maps_fields_directly() {
        let p = parse("sandwich\tsubway\tNOUN\t120\n");
        assert_eq!(
            p.entries,
            vec![NgramEntry {
                modifier: "sandwich".into(),
                head: "subway".into(),
                pos_tag: "NOUN".into(),
                count: 120
            }]
        );
        assert_eq!(p.malformed(), 0);
    }

    #[test]
    fn empty_stream_is_empty() {
        let p = parse("");
        assert!(p.entries.is_empty());
        assert_eq!(p.warning, None);
    }

    #[test]
    fn three_field_line_is_skipped() {
        let p = parse("sandwich\tsubway\tNOUN\nmap\tsubway\tNOUN\t3\n");
        assert_eq!(p.malformed(), 1);
        assert_eq!(p.malformed_lines, vec![1]);
        assert_eq!(p.entries.len(), 1);
    }

    #[test]
    fn all_malformed_warns() {
        let p = parse("a\tb\nc\n\n");
        assert_eq!(p.warning, Some(ParseWarning::AllMalformed));
        assert_eq!(p.malformed(), 2);
    }

    #[test]
    fn bad_count_and_multiword_modifier_are_malformed() {
        let p = parse("x\tsubway\tNOUN\t-3\nnew york\tsubway\tNOUN\t2\n");
        assert_eq!(p.malformed(), 2);
    }

    #[test]
    fn non_utf8_is_decode_error() {
        let bytes: &[u8] = b"ok\tsubway\tNOUN\t1\n\xff\xfe\tx\tNOUN\t1\n";
        match parse_ngram_file(bytes) {
            Err(CorpusError::Decode { line }) => assert_eq!(line, 2),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn discovers_subway_sandwich() {
        let p = parse("sandwich\tsubway\tNOUN\t120\nrun\tsubway\tVERB\t50\n");
        let c = discover_candidates("subway", &p.entries);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].query_text, "subway sandwich");
        assert_eq!(c[0].corpus_count, 120);
        assert_eq!(c[0].match_score, None);
    }

    #[test]
    fn verb_only_corpus_yields_nothing() {
        let p = parse("ride\tsubway\tVERB\t5\ntake\tsubway\tVERB\t9\n");
        assert!(discover_candidates("subway", &p.entries).is_empty());
    }

    #[test]
    fn duplicate_modifiers_are_summed() {
        let text = "map\tsubway\tNOUN\t3\nstation\tsubway\tNOUN\t1\nMap\tSubway\tNOUN\t4\n";
        let p = parse(text);
        // naive aggregation over the same lines
        let expected: u64 = p
            .entries
            .iter()
            .filter(|e| e.modifier.eq_ignore_ascii_case("map"))
            .map(|e| e.count)
            .sum();
        let c = discover_candidates("subway", &p.entries);
        assert_eq!(c[0].modifier, "map");
        assert_eq!(c[0].corpus_count, expected);
        assert_eq!(expected, 7);
    }

    #[test]
    fn ordering_is_count_desc_then_modifier() {
        let text = "b\tkw\tNOUN\t5\na\tkw\tNOUN\t5\nc\tkw\tNOUN\t9\nz\tother\tNOUN\t100\n";
        let c = discover_candidates("kw", &parse(text).entries);
        let mods: Vec<&str> = c.iter().map(|q| q.modifier.as_str()).collect();
        assert_eq!(mods, ["c", "a", "b"]);
    }

    #[test]
    fn keyword_as_its_own_modifier_is_dropped() {
        let c = discover_candidates("kw", &parse("kw\tkw\tNOUN\t5\n").entries);
        assert!(c.is_empty());
    }
}
