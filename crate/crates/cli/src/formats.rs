//! Text formats: the tokenizer file and JSON-lines datasets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use qbert_core::tokenizer::SubwordTokenizer;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, Result};

const TOKENIZER_HEADER: &str = "qbert-tokenizer v1";
const MERGES_SENTINEL: &str = "#merges";

/// Printable ASCII other than `\` and space is written as is; every other
/// byte becomes `\xNN`.
fn escape(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if b.is_ascii_graphic() && b != b'\\' {
            s.push(b as char);
        } else {
            write!(s, "\\x{b:02x}").expect("write to string");
        }
    }
    s
}

fn unescape(s: &str) -> Option<Vec<u8>> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'\\' {
            let hex = s.get(i + 2..i + 4)?;
            if raw.get(i + 1) != Some(&b'x') {
                return None;
            }
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 4;
        } else {
            out.push(raw[i]);
            i += 1;
        }
    }
    Some(out)
}

pub fn tokenizer_to_string(tok: &SubwordTokenizer) -> String {
    let mut s = format!("{TOKENIZER_HEADER} {}\n", tok.vocab_size());
    for t in tok.vocab().tokens() {
        s.push_str(&escape(t));
        s.push('\n');
    }
    s.push_str(MERGES_SENTINEL);
    s.push('\n');
    for (l, r) in tok.merges() {
        writeln!(s, "{l} {r}").expect("write to string");
    }
    s
}

pub fn tokenizer_from_str(text: &str, path: &Path) -> Result<SubwordTokenizer> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| CliError::parse(path, 1, "empty tokenizer file"))?;
    let size: usize = header
        .strip_prefix(TOKENIZER_HEADER)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| CliError::parse(path, 1, format!("expected `{TOKENIZER_HEADER} <vocab size>`")))?;
    let mut tokens = Vec::with_capacity(size);
    let mut merges = Vec::new();
    let mut in_merges = false;
    for (n, line) in lines {
        if !in_merges {
            if line == MERGES_SENTINEL && tokens.len() == size {
                in_merges = true;
            } else {
                tokens.push(unescape(line).ok_or_else(|| CliError::parse(path, n, "bad token escape"))?);
            }
            continue;
        }
        let pair: Vec<u32> = line.split(' ').filter_map(|x| x.parse().ok()).collect();
        if pair.len() != 2 {
            return Err(CliError::parse(path, n, "merge line must hold two token ids"));
        }
        merges.push((pair[0], pair[1]));
    }
    if !in_merges {
        return Err(CliError::parse(path, 0, format!("expected {size} tokens followed by `{MERGES_SENTINEL}`")));
    }
    SubwordTokenizer::from_parts(tokens, merges).map_err(|e| CliError::parse(path, 0, e.to_string()))
}

pub fn read_tokenizer(path: &Path) -> Result<SubwordTokenizer> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    tokenizer_from_str(&text, path)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_tokenizer(path: &Path, tok: &SubwordTokenizer) -> Result<()> {
    write_text(path, &tokenizer_to_string(tok))
}

/// Blank lines are skipped; errors carry the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::parse(path, i + 1, e.to_string())))
        .collect()
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_text(path, &to_jsonl(records))
}

/// Raw corpus: one document per non-empty line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}
