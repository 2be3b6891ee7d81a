//! Byte-level BPE tokenization compatible with CLIP vocabularies.
//!
//! Vocabularies are read from the usual two-file distribution: a `vocab.json`
//! map from subword string to id and a rank-ordered `merges.txt`. Text is
//! normalized the way CLIP's reference tokenizer does it (whitespace runs
//! collapsed, ends trimmed, lowercased) before the pre-tokenizer regex and the
//! merge loop run. `ftfy` repair and HTML unescaping are not applied.

mod spans;

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

pub use spans::{map_span_weights, SpanEntry, SpanTarget, SpanWeightSpec, TokenWeights};

pub const SOS_TOKEN: &str = "<|startoftext|>";
pub const EOS_TOKEN: &str = "<|endoftext|>";
pub const DEFAULT_CONTEXT_LENGTH: usize = 77;

const END_OF_WORD: &str = "</w>";
const PRETOKENIZE: &str = r"(?i)'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+";

/// The reversible byte to printable-character table used by GPT-2 style BPE.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (u32::from(b'!')..=u32::from(b'~')).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b)
    };
    let mut extra = 0u32;
    for b in 0..256u32 {
        let c = if printable(b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: HashMap<u32, String>,
    merges: Vec<(String, String)>,
    /// (left id, right id) -> (rank, merged id)
    merge_table: HashMap<(u32, u32), (usize, u32)>,
    sos_id: u32,
    eos_id: u32,
    context_length: usize,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pretokenizer: Regex,
}

impl Vocabulary {
    pub fn from_parts(
        token_to_id: HashMap<String, u32>,
        merges: Vec<(String, String)>,
        context_length: usize,
    ) -> Result<Self> {
        if context_length < 2 {
            return Err(Error::InvalidVocabulary(format!(
                "context length {context_length} < 2"
            )));
        }
        let mut id_to_token = HashMap::with_capacity(token_to_id.len());
        for (token, &id) in &token_to_id {
            if let Some(prev) = id_to_token.insert(id, token.clone()) {
                return Err(Error::InvalidVocabulary(format!(
                    "id {id} used by both {prev:?} and {token:?}"
                )));
            }
        }
        let special = |names: &[&str]| {
            names
                .iter()
                .find_map(|n| token_to_id.get(*n).copied())
                .ok_or_else(|| Error::InvalidVocabulary(format!("missing special token {}", names[0])))
        };
        let sos_id = special(&[SOS_TOKEN, "<start_of_text>"])?;
        let eos_id = special(&[EOS_TOKEN, "<end_of_text>"])?;
        if sos_id == eos_id {
            return Err(Error::InvalidVocabulary("SOS and EOS share an id".into()));
        }

        let mut merge_table = HashMap::with_capacity(merges.len());
        for (rank, (left, right)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                token_to_id.get(s).copied().ok_or_else(|| {
                    Error::InvalidVocabulary(format!(
                        "merge #{rank} ({left} {right}) references unknown symbol {s:?}"
                    ))
                })
            };
            let l = lookup(left)?;
            let r = lookup(right)?;
            let merged = lookup(&format!("{left}{right}"))?;
            merge_table.entry((l, r)).or_insert((rank, merged));
        }

        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
            merges,
            merge_table,
            sos_id,
            eos_id,
            context_length,
            byte_encoder,
            byte_decoder,
            pretokenizer: Regex::new(PRETOKENIZE).expect("static regex"),
        })
    }

    /// Parse the contents of `vocab.json` and `merges.txt`.
    pub fn from_strs(vocab_json: &str, merges_txt: &str, context_length: usize) -> Result<Self> {
        let token_to_id: HashMap<String, u32> =
            serde_json::from_str(vocab_json).map_err(|e| Error::json("vocab.json", e))?;
        let mut merges = Vec::new();
        for (n, line) in merges_txt.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) => merges.push((l.to_string(), r.to_string())),
                _ => {
                    return Err(Error::InvalidVocabulary(format!(
                        "merges line {}: expected two symbols, got {line:?}",
                        n + 1
                    )))
                }
            }
        }
        Self::from_parts(token_to_id, merges, context_length)
    }

    pub fn load(vocab_path: &Path, merges_path: &Path, context_length: usize) -> Result<Self> {
        let vocab = std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let merges = std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        Self::from_strs(&vocab, &merges, context_length)
    }

    /// Serialize back to the `vocab.json` / `merges.txt` pair.
    pub fn to_strs(&self) -> (String, String) {
        let ordered: std::collections::BTreeMap<u32, &String> =
            self.id_to_token.iter().map(|(id, t)| (*id, t)).collect();
        let mut vocab = String::from("{");
        for (i, (id, token)) in ordered.iter().enumerate() {
            if i > 0 {
                vocab.push(',');
            }
            vocab.push_str(&serde_json::to_string(token).expect("string serializes"));
            vocab.push(':');
            vocab.push_str(&id.to_string());
        }
        vocab.push('}');
        let mut merges = String::from("#version: 0.2\n");
        for (l, r) in &self.merges {
            merges.push_str(l);
            merges.push(' ');
            merges.push_str(r);
            merges.push('\n');
        }
        (vocab, merges)
    }

    pub fn sos_id(&self) -> u32 {
        self.sos_id
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    pub fn context_length(&self) -> usize {
        self.context_length
    }

    pub fn with_context_length(mut self, context_length: usize) -> Result<Self> {
        if context_length < 2 {
            return Err(Error::InvalidVocabulary(format!(
                "context length {context_length} < 2"
            )));
        }
        self.context_length = context_length;
        Ok(self)
    }

    /// One past the largest id.
    pub fn size(&self) -> usize {
        self.id_to_token.keys().max().map_or(0, |m| *m as usize + 1)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(&id).map(String::as_str)
    }

    /// Decode ids back to text; word ends become spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if id == self.sos_id || id == self.eos_id {
                continue;
            }
            let Some(token) = self.token(id) else { continue };
            let (body, word_end) = match token.strip_suffix(END_OF_WORD) {
                Some(body) => (body, true),
                None => (token, false),
            };
            bytes.extend(body.chars().filter_map(|c| self.byte_decoder.get(&c)));
            if word_end {
                bytes.push(b' ');
            }
        }
        String::from_utf8_lossy(&bytes).trim_end().to_string()
    }

    /// Apply the merge loop to one pre-token. Returns (id, byte length) pairs.
    fn bpe(&self, piece: &str) -> Result<Vec<(u32, usize)>> {
        let bytes = piece.as_bytes();
        let mut word: Vec<(u32, usize)> = Vec::with_capacity(bytes.len());
        for (i, &b) in bytes.iter().enumerate() {
            let mut symbol = self.byte_encoder[b as usize].to_string();
            if i + 1 == bytes.len() {
                symbol.push_str(END_OF_WORD);
            }
            let id = self.id(&symbol).ok_or(Error::UnknownSymbol { symbol })?;
            word.push((id, 1));
        }
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|p| self.merge_table.get(&(p[0].0, p[1].0)))
                .min_by_key(|(rank, _)| *rank)
                .copied();
            let Some((rank, merged)) = best else { break };
            let mut next = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len()
                    && self
                        .merge_table
                        .get(&(word[i].0, word[i + 1].0))
                        .is_some_and(|(r, _)| *r == rank)
                {
                    next.push((merged, word[i].1 + word[i + 1].1));
                    i += 2;
                } else {
                    next.push(word[i]);
                    i += 1;
                }
            }
            word = next;
        }
        Ok(word)
    }
}

/// Text after CLIP-style cleanup, with a map back to the source bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedText {
    pub text: String,
    /// For every byte of `text`, the source byte range of the character it came from.
    origin: Vec<Range<usize>>,
}

impl NormalizedText {
    pub fn new(source: &str) -> Self {
        let mut text = String::with_capacity(source.len());
        let mut origin = Vec::with_capacity(source.len());
        let mut pending_space: Option<Range<usize>> = None;
        for (pos, ch) in source.char_indices() {
            let range = pos..pos + ch.len_utf8();
            if ch.is_whitespace() {
                if !text.is_empty() && pending_space.is_none() {
                    pending_space = Some(range);
                }
                continue;
            }
            if let Some(space) = pending_space.take() {
                text.push(' ');
                origin.push(space);
            }
            for lower in ch.to_lowercase() {
                text.push(lower);
                origin.extend(std::iter::repeat(range.clone()).take(lower.len_utf8()));
            }
        }
        Self { text, origin }
    }

    /// Map a byte range of the normalized text to the source text.
    pub fn source_range(&self, range: &Range<usize>) -> Range<usize> {
        if range.is_empty() {
            let at = self.origin.get(range.start).map_or(0, |r| r.start);
            return at..at;
        }
        self.origin[range.start].start..self.origin[range.end - 1].end
    }
}

/// Token ids framed by SOS/EOS, with the text span each content token covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    /// Byte ranges into `normalized.text`, one per content token.
    spans: Vec<Range<usize>>,
    source_spans: Vec<Range<usize>>,
    source: String,
    normalized: NormalizedText,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of content tokens (N).
    pub fn content_len(&self) -> usize {
        self.ids.len() - 2
    }

    pub fn eos_position(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn source_spans(&self) -> &[Range<usize>] {
        &self.source_spans
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn normalized(&self) -> &NormalizedText {
        &self.normalized
    }

    /// Text of the token at sequence position `pos` (SOS/EOS render as their markers).
    pub fn token_text(&self, pos: usize) -> String {
        if pos == 0 {
            return SOS_TOKEN.to_string();
        }
        if pos == self.eos_position() {
            return EOS_TOKEN.to_string();
        }
        let span = &self.spans[pos - 1];
        String::from_utf8_lossy(&self.normalized.text.as_bytes()[span.clone()]).into_owned()
    }

    /// Index of the word each content token belongs to, in order.
    pub fn word_groups(&self) -> Vec<usize> {
        let text = self.normalized.text.as_bytes();
        let mut groups = Vec::with_capacity(self.spans.len());
        let mut word = 0;
        for (i, span) in self.spans.iter().enumerate() {
            if i > 0 {
                let prev = &self.spans[i - 1];
                if text[prev.end..span.start].iter().any(|b| *b == b' ') {
                    word += 1;
                }
            }
            groups.push(word);
        }
        groups
    }

    /// A sequence of exactly `len` ids: SOS, EOS, then `pad_id` filling the rest.
    pub fn empty_padded(vocab: &Vocabulary, len: usize, pad_id: u32) -> Result<Self> {
        if len < 2 || len > vocab.context_length() {
            return Err(Error::OverLength {
                len,
                context_length: vocab.context_length(),
            });
        }
        let mut ids = vec![vocab.sos_id(), vocab.eos_id()];
        ids.resize(len, pad_id);
        Ok(Self {
            ids,
            spans: Vec::new(),
            source_spans: Vec::new(),
            source: String::new(),
            normalized: NormalizedText::new(""),
        })
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenSequence> {
    let normalized = NormalizedText::new(text);
    let mut ids = vec![vocab.sos_id];
    let mut spans = Vec::new();
    for piece in vocab.pretokenizer.find_iter(&normalized.text) {
        let mut offset = piece.start();
        for (id, len) in vocab.bpe(piece.as_str())? {
            ids.push(id);
            spans.push(offset..offset + len);
            offset += len;
        }
    }
    ids.push(vocab.eos_id);
    if ids.len() > vocab.context_length {
        return Err(Error::OverLength {
            len: ids.len(),
            context_length: vocab.context_length,
        });
    }
    let source_spans = spans.iter().map(|s| normalized.source_range(s)).collect();
    Ok(TokenSequence {
        ids,
        spans,
        source_spans,
        source: text.to_string(),
        normalized,
    })
}
