//! Article filtering and sentence-ordered segmentation under a token budget.

use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("token_limit must be positive")]
    ZeroTokenLimit,
    #[error("overlap {overlap} must be below token_limit {limit}")]
    OverlapTooLarge { overlap: usize, limit: usize },
    #[error("min_block {min_block} must be below token_limit {limit}")]
    MinBlockTooLarge { min_block: usize, limit: usize },
    #[error("token sidecar: {0}")]
    Sidecar(String),
}

/// Counts tokens, and optionally exposes token byte spans so that over-long
/// fragments can be cut at exact token boundaries.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;

    fn spans(&self, _text: &str) -> Option<Vec<Range<usize>>> {
        None
    }
}

/// Default tokenizer: each maximal alphanumeric run is one token, every other
/// non-whitespace character is a token of its own.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordPunctTokenizer;

impl TokenCounter for WordPunctTokenizer {
    fn count(&self, text: &str) -> usize {
        let mut n = 0;
        let mut in_word = false;
        for c in text.chars() {
            if c.is_alphanumeric() {
                if !in_word {
                    n += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !c.is_whitespace() {
                    n += 1;
                }
            }
        }
        n
    }

    fn spans(&self, text: &str) -> Option<Vec<Range<usize>>> {
        let mut out: Vec<Range<usize>> = Vec::new();
        let mut word_start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_alphanumeric() {
                word_start.get_or_insert(i);
                continue;
            }
            if let Some(s) = word_start.take() {
                out.push(s..i);
            }
            if !c.is_whitespace() {
                out.push(i..i + c.len_utf8());
            }
        }
        if let Some(s) = word_start {
            out.push(s..text.len());
        }
        Some(out)
    }
}

/// Exact token counts supplied out of band (for instance by an external
/// byte-pair tokenizer), keyed by the exact text. Unknown texts fall back to
/// [`WordPunctTokenizer`].
#[derive(Debug, Clone, Default)]
pub struct SidecarCounts {
    counts: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct SidecarRecord {
    text: String,
    tokens: usize,
}

impl SidecarCounts {
    pub fn new(counts: HashMap<String, usize>) -> Self {
        SidecarCounts { counts }
    }

    /// Loads `{"text": ..., "tokens": n}` lines.
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let records: Vec<SidecarRecord> =
            crate::jsonl::read(path).map_err(|e| IngestError::Sidecar(e.to_string()))?;
        Ok(SidecarCounts {
            counts: records.into_iter().map(|r| (r.text, r.tokens)).collect(),
        })
    }
}

impl TokenCounter for SidecarCounts {
    fn count(&self, text: &str) -> usize {
        self.counts
            .get(text)
            .copied()
            .unwrap_or_else(|| WordPunctTokenizer.count(text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub token_limit: usize,
    #[serde(default)]
    pub overlap: usize,
    #[serde(default = "default_min_block")]
    pub min_block: usize,
}

fn default_min_block() -> usize {
    32
}

impl SegmentConfig {
    pub fn new(token_limit: usize) -> Self {
        SegmentConfig {
            token_limit,
            overlap: 0,
            min_block: default_min_block().min(token_limit.saturating_sub(1)),
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.token_limit == 0 {
            return Err(IngestError::ZeroTokenLimit);
        }
        if self.overlap >= self.token_limit {
            return Err(IngestError::OverlapTooLarge {
                overlap: self.overlap,
                limit: self.token_limit,
            });
        }
        if self.min_block >= self.token_limit {
            return Err(IngestError::MinBlockTooLarge {
                min_block: self.min_block,
                limit: self.token_limit,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub index: usize,
    pub text: String,
    pub token_count: usize,
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drops texts shorter than `min_chars` and exact duplicates after
/// whitespace normalization. The first occurrence survives, order is kept.
pub fn dedupe_and_filter(articles: &[String], min_chars: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    articles
        .iter()
        .filter(|a| {
            let key = normalize_ws(a);
            key.chars().count() >= min_chars && seen.insert(key)
        })
        .cloned()
        .collect()
}

const TERMINALS: [char; 3] = ['.', '!', '?'];
const CLOSERS: [char; 7] = ['"', '\'', '\u{201d}', '\u{2019}', ')', ']', '\u{bb}'];

/// Splits at `.`, `!` or `?` (plus any closing quotes or brackets) followed by
/// whitespace. Sentences are trimmed; empty ones are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        if !TERMINALS.contains(&c) {
            continue;
        }
        while let Some(&(_, n)) = chars.peek() {
            if TERMINALS.contains(&n) || CLOSERS.contains(&n) {
                chars.next();
            } else {
                break;
            }
        }
        match chars.peek() {
            Some(&(j, n)) if n.is_whitespace() => {
                push_trimmed(&mut out, &text[start..j]);
                start = j;
            }
            None => {
                push_trimmed(&mut out, &text[start..]);
                start = text.len();
            }
            _ => {}
        }
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let t = s.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

/// Splits `text[range]` after every occurrence of `sep` that is followed by
/// whitespace, keeping the separator on the left. Returned ranges are trimmed
/// and index into `text`.
fn split_after(text: &str, range: Range<usize>, sep: char) -> Vec<Range<usize>> {
    let mut parts = Vec::new();
    let mut start = range.start;
    for (i, c) in text[range.clone()].char_indices() {
        let end = range.start + i + c.len_utf8();
        if c == sep && text[end..range.end].starts_with(char::is_whitespace) {
            parts.push(trimmed(text, start..end));
            start = end;
        }
    }
    parts.push(trimmed(text, start..range.end));
    parts.retain(|p| !p.is_empty());
    parts
}

fn trimmed(text: &str, r: Range<usize>) -> Range<usize> {
    let s = &text[r.clone()];
    let lead = s.len() - s.trim_start().len();
    let tail = s.len() - s.trim_end().len();
    if lead == s.len() {
        return r.start..r.start;
    }
    r.start + lead..r.end - tail
}

#[derive(Debug, Clone)]
struct Piece {
    text: String,
    tokens: usize,
    // Whitespace separating this piece from its predecessor in the source.
    lead: String,
}

/// Groups token spans into runs of at most `limit` tokens, cutting before a
/// whitespace-preceded token whenever the run has one.
fn token_chunks(spans: &[Range<usize>], limit: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < spans.len() {
        let mut end = (i + limit).min(spans.len());
        if end < spans.len() {
            let spaced = (i + 1..=end)
                .rev()
                .find(|&j| spans[j - 1].end < spans[j].start);
            if let Some(j) = spaced {
                end = j;
            }
        }
        out.push(spans[i].start..spans[end - 1].end);
        i = end;
    }
    out
}

/// Breaks an over-long sentence at commas, then semicolons, then at exact
/// token boundaries. A fragment with no split point stays whole.
fn split_long(sentence: &str, limit: usize, tok: &dyn TokenCounter, out: &mut Vec<Piece>) {
    let mut ranges: Vec<Range<usize>> = Vec::new();
    for by_comma in split_after(sentence, 0..sentence.len(), ',') {
        if tok.count(&sentence[by_comma.clone()]) <= limit {
            ranges.push(by_comma);
            continue;
        }
        for by_semi in split_after(sentence, by_comma, ';') {
            let part = &sentence[by_semi.clone()];
            match tok.spans(part) {
                Some(spans) if tok.count(part) > limit && spans.len() > limit => {
                    ranges.extend(
                        token_chunks(&spans, limit)
                            .into_iter()
                            .map(|r| by_semi.start + r.start..by_semi.start + r.end),
                    );
                }
                _ => ranges.push(by_semi),
            }
        }
    }
    let mut prev_end = None;
    for r in ranges {
        let text = sentence[r.clone()].to_string();
        out.push(Piece {
            tokens: tok.count(&text),
            lead: prev_end.map_or(" ".to_string(), |e| sentence[e..r.start].to_string()),
            text,
        });
        prev_end = Some(r.end);
    }
}

struct Draft {
    pieces: Vec<Piece>,
    // Leading pieces copied from the previous block.
    overlap_pieces: usize,
}

impl Draft {
    fn tokens(&self) -> usize {
        self.pieces.iter().map(|p| p.tokens).sum()
    }

    fn own_tokens(&self) -> usize {
        self.pieces[self.overlap_pieces..]
            .iter()
            .map(|p| p.tokens)
            .sum()
    }
}

fn overlap_tail(pieces: &[Piece], overlap: usize, tok: &dyn TokenCounter) -> Option<Piece> {
    if overlap == 0 {
        return None;
    }
    let text = pieces
        .iter()
        .map(|p| p.text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let spans = tok.spans(&text)?;
    if spans.is_empty() {
        return None;
    }
    let from = spans.len().saturating_sub(overlap);
    let tail = text[spans[from].start..].to_string();
    Some(Piece {
        tokens: tok.count(&tail),
        text: tail,
        lead: " ".to_string(),
    })
}

/// Greedy sentence packing: sentences are appended while the running token
/// count stays within `token_limit`. Over-long sentences are broken up first
/// and their fragments go through the same loop. With `overlap > 0` each block
/// after the first opens with the previous block's last `overlap` tokens
/// (dropped when they would push the block past the limit). Blocks shorter than
/// `min_block` are folded into their predecessor when the union still fits.
pub fn segment_article(
    text: &str,
    cfg: &SegmentConfig,
    tok: &dyn TokenCounter,
) -> Result<Vec<Block>, IngestError> {
    cfg.validate()?;
    let limit = cfg.token_limit;

    let mut pieces = Vec::new();
    for s in split_sentences(text) {
        let n = tok.count(&s);
        if n <= limit {
            pieces.push(Piece {
                text: s,
                tokens: n,
                lead: " ".to_string(),
            });
        } else {
            split_long(&s, limit, tok, &mut pieces);
        }
    }

    let mut drafts: Vec<Draft> = Vec::new();
    let mut cur = Draft {
        pieces: Vec::new(),
        overlap_pieces: 0,
    };
    for piece in pieces {
        if cur.pieces.len() > cur.overlap_pieces && cur.tokens() + piece.tokens > limit {
            let tail = overlap_tail(&cur.pieces[cur.overlap_pieces..], cfg.overlap, tok);
            drafts.push(std::mem::replace(
                &mut cur,
                Draft {
                    pieces: Vec::new(),
                    overlap_pieces: 0,
                },
            ));
            if let Some(tail) = tail {
                cur.pieces.push(tail);
                cur.overlap_pieces = 1;
            }
        }
        if cur.pieces.len() == cur.overlap_pieces
            && cur.overlap_pieces > 0
            && cur.tokens() + piece.tokens > limit
        {
            cur.pieces.clear();
            cur.overlap_pieces = 0;
        }
        cur.pieces.push(piece);
    }
    if cur.pieces.len() > cur.overlap_pieces {
        drafts.push(cur);
    }

    let mut merged: Vec<Draft> = Vec::with_capacity(drafts.len());
    for d in drafts {
        if let Some(prev) = merged.last_mut() {
            if d.own_tokens() < cfg.min_block && prev.tokens() + d.own_tokens() <= limit {
                prev.pieces
                    .extend(d.pieces.into_iter().skip(d.overlap_pieces));
                continue;
            }
        }
        merged.push(d);
    }

    Ok(merged
        .into_iter()
        .enumerate()
        .map(|(index, d)| Block {
            index,
            token_count: d.tokens(),
            text: d
                .pieces
                .iter()
                .enumerate()
                .fold(String::new(), |mut acc, (i, p)| {
                    if i > 0 {
                        acc.push_str(&p.lead);
                    }
                    acc.push_str(&p.text);
                    acc
                }),
        })
        .collect())
}

/// Input record for batch segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub text: String,
}

/// One segmented block tagged with its article.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticleBlock {
    pub article_id: String,
    pub index: usize,
    pub text: String,
    pub token_count: usize,
}

/// Segments many articles in parallel; output is ordered by article, then
/// block index.
pub fn segment_articles(
    articles: &[Article],
    cfg: &SegmentConfig,
    tok: &dyn TokenCounter,
) -> Result<Vec<ArticleBlock>, IngestError> {
    cfg.validate()?;
    let per_article: Vec<Vec<ArticleBlock>> = articles
        .par_iter()
        .map(|a| {
            segment_article(&a.text, cfg, tok).map(|blocks| {
                blocks
                    .into_iter()
                    .map(|b| ArticleBlock {
                        article_id: a.id.clone(),
                        index: b.index,
                        text: b.text,
                        token_count: b.token_count,
                    })
                    .collect()
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(per_article.into_iter().flatten().collect())
}
