//! Data ingestion: vocabulary construction, text encoding, and the JSONL
//! paired/unpaired example formats with protected-span annotations.
//!
//! Tokenization is whitespace-based throughout; any language-specific
//! segmentation is upstream preprocessing. Protected spans arrive precomputed
//! in the data files as half-open token ranges `[a, b)` that segmentation must
//! not split.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Reserved token ids.
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
/// Previous-token surrogate for the first position of a segment.
pub const SEGSTART: u32 = 3;

/// Surface forms of the reserved tokens, in id order.
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<seg>"];

/// Token-id sequence; all operations that accept one require length ≥ 1.
pub type TokenSeq = Vec<u32>;

/// Non-overlapping, sorted, half-open token ranges `[a, b)`.
pub type ProtectedSpans = Vec<(usize, usize)>;

/// A message/response pair with optional protected spans on the response.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub message: TokenSeq,
    pub response: TokenSeq,
    pub response_spans: ProtectedSpans,
}

/// A single unpaired sentence with optional protected spans.
#[derive(Debug, Clone, PartialEq)]
pub struct UnpairedExample {
    pub text: TokenSeq,
    pub spans: ProtectedSpans,
}

/// Immutable vocabulary with dense 0-based ids; ids `0..4` are reserved.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    /// Build from an iterator of whitespace-tokenized sentences, keeping the
    /// `max_size` most frequent tokens. Frequency ties break by first
    /// occurrence, so the result is deterministic. Reserved surface forms in
    /// the input are ignored (they are always present).
    pub fn build<'a, I>(texts: I, max_size: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new(); // count, first index
        let mut order = 0usize;
        let mut saw_any = false;
        for sentence in texts {
            saw_any = true;
            for tok in sentence.split_whitespace() {
                if RESERVED.contains(&tok) {
                    continue;
                }
                let entry = counts.entry(tok).or_insert((0, order));
                entry.0 += 1;
                order += 1;
            }
        }
        if !saw_any {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize, usize)> =
            counts.into_iter().map(|(t, (c, first))| (t, c, first)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size);
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _, _)| t.to_string()))
            .collect();
        Ok(Vocab::from_token_list(tokens))
    }

    /// Reassemble from a full token list (reserved entries included), e.g.
    /// from a checkpoint. Panics on a malformed reserved prefix.
    pub fn from_token_list(tokens: Vec<String>) -> Vocab {
        assert!(tokens.len() >= RESERVED.len(), "vocabulary missing reserved tokens");
        for (i, s) in RESERVED.iter().enumerate() {
            assert_eq!(tokens[i], *s, "reserved token {i} mismatch");
        }
        let lookup =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, lookup }
    }

    /// Reassemble from the non-reserved token list (checkpoint form).
    pub fn from_non_reserved(tokens: &[String]) -> Vocab {
        let all = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.iter().cloned())
            .collect();
        Vocab::from_token_list(all)
    }

    /// Total vocabulary size `V`, reserved entries included.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Non-reserved tokens in id order (the serialized form).
    pub fn non_reserved(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// Token id for a surface form; unknown tokens map to [`UNK`].
    pub fn id(&self, token: &str) -> u32 {
        self.lookup.get(token).copied().unwrap_or(UNK)
    }

    /// Surface form for an id.
    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Encode a whitespace-tokenized sentence; OOV tokens become [`UNK`].
    pub fn encode(&self, sentence: &str) -> Result<TokenSeq> {
        let ids: TokenSeq = sentence.split_whitespace().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            return Err(Error::EmptySentence);
        }
        Ok(ids)
    }

    /// Render ids back to a space-joined sentence.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// Write the non-reserved tokens, one per line (line number = id − 4).
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.non_reserved().join("\n");
        fs::write(path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Read a vocabulary file written by [`Vocab::save`].
    pub fn load(path: &Path) -> Result<Vocab> {
        let body =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let tokens: Vec<String> =
            body.lines().filter(|l| !l.is_empty()).map(|l| l.to_string()).collect();
        Ok(Vocab::from_non_reserved(&tokens))
    }
}

/// Check span invariants against a sentence of `len` tokens.
pub fn validate_spans(spans: &[(usize, usize)], len: usize) -> std::result::Result<(), String> {
    let mut prev_end = 0usize;
    for (i, &(a, b)) in spans.iter().enumerate() {
        if a >= b {
            return Err(format!("span {i} [{a},{b}) is empty or reversed"));
        }
        if b > len {
            return Err(format!("span {i} [{a},{b}) exceeds sentence length {len}"));
        }
        if i > 0 && a < prev_end {
            return Err(format!("span {i} [{a},{b}) overlaps or is out of order"));
        }
        prev_end = b;
    }
    Ok(())
}

#[derive(Deserialize)]
struct PairedLine {
    message: String,
    response: String,
    #[serde(default)]
    response_spans: Vec<(usize, usize)>,
}

#[derive(Deserialize)]
struct UnpairedLine {
    text: String,
    #[serde(default)]
    spans: Vec<(usize, usize)>,
}

/// Raw (un-encoded) paired records: message, response, response spans.
pub type RawPaired = (String, String, Vec<(usize, usize)>);
/// Raw (un-encoded) unpaired records: text, spans.
pub type RawUnpaired = (String, Vec<(usize, usize)>);

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let body =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(body.lines().map(|l| l.to_string()).collect())
}

/// Parse a paired JSONL file without encoding (used for vocabulary building).
pub fn read_paired_raw(path: &Path) -> Result<Vec<RawPaired>> {
    let mut out = Vec::new();
    for (idx, line) in read_lines(path)?.into_iter().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairedLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        let msg_len = rec.message.split_whitespace().count();
        let resp_len = rec.response.split_whitespace().count();
        if msg_len == 0 {
            return Err(Error::parse(lineno, "empty message"));
        }
        if resp_len == 0 {
            return Err(Error::parse(lineno, "empty response"));
        }
        validate_spans(&rec.response_spans, resp_len)
            .map_err(|m| Error::parse(lineno, m))?;
        out.push((rec.message, rec.response, rec.response_spans));
    }
    Ok(out)
}

/// Parse an unpaired JSONL file without encoding.
pub fn read_unpaired_raw(path: &Path) -> Result<Vec<RawUnpaired>> {
    let mut out = Vec::new();
    for (idx, line) in read_lines(path)?.into_iter().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UnpairedLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        let len = rec.text.split_whitespace().count();
        if len == 0 {
            return Err(Error::parse(lineno, "empty text"));
        }
        validate_spans(&rec.spans, len).map_err(|m| Error::parse(lineno, m))?;
        out.push((rec.text, rec.spans));
    }
    Ok(out)
}

/// Load and encode a paired JSONL file against an existing vocabulary.
pub fn load_paired(path: &Path, vocab: &Vocab) -> Result<Vec<PairedExample>> {
    read_paired_raw(path)?
        .into_iter()
        .map(|(m, r, spans)| {
            Ok(PairedExample {
                message: vocab.encode(&m)?,
                response: vocab.encode(&r)?,
                response_spans: spans,
            })
        })
        .collect()
}

/// Load and encode an unpaired JSONL file against an existing vocabulary.
pub fn load_unpaired(path: &Path, vocab: &Vocab) -> Result<Vec<UnpairedExample>> {
    read_unpaired_raw(path)?
        .into_iter()
        .map(|(t, spans)| Ok(UnpairedExample { text: vocab.encode(&t)?, spans }))
        .collect()
}
