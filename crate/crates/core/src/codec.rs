//! Staggered speaker labeling.
//!
//! Several time-aligned transcripts are merged into one flat stream in which
//! `[NEXT]` moves attribution to the following speaker and `[PREV]` moves it
//! back. Decoding walks the stream with a running speaker index that starts at
//! zero.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NEXT_TOKEN: &str = "[NEXT]";
pub const PREV_TOKEN: &str = "[PREV]";

/// Largest speaker count accepted by [`enumerate_permutation_targets`] unless
/// the caller passes its own cap.
pub const DEFAULT_PERMUTATION_CAP: usize = 4;

pub type Result<T> = std::result::Result<T, CodecError>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CodecError {
    #[error("lexical token may not be empty")]
    EmptyToken,
    #[error("lexical token {0:?} collides with a reserved control token")]
    ReservedToken(String),
    #[error("token start {0} is not a finite non-negative time")]
    InvalidStart(f64),
    #[error("token starts decrease at position {position} ({previous} > {current})")]
    DecreasingStarts {
        position: usize,
        previous: f64,
        current: f64,
    },
    #[error("no transcripts given")]
    NoTranscripts,
    #[error("transcript {0} has no tokens")]
    EmptyTranscript(usize),
    #[error("speaker order {order:?} is not a permutation of 0..{len}")]
    InvalidOrder { order: Vec<usize>, len: usize },
    #[error("speaker index underflow at stream position {0}")]
    Underflow(usize),
    #[error("{count} speakers exceeds the permutation cap of {cap}")]
    TooManySpeakers { count: usize, cap: usize },
}

/// One lexical unit with its aligned start time in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTimedToken")]
pub struct TimedToken {
    text: String,
    start: f64,
}

#[derive(Deserialize)]
struct RawTimedToken {
    text: String,
    start: f64,
}

impl TryFrom<RawTimedToken> for TimedToken {
    type Error = CodecError;

    fn try_from(raw: RawTimedToken) -> Result<Self> {
        TimedToken::new(raw.text, raw.start)
    }
}

impl TimedToken {
    pub fn new(text: impl Into<String>, start: f64) -> Result<Self> {
        let text = text.into();
        check_lexical(&text)?;
        if !start.is_finite() || start < 0.0 {
            return Err(CodecError::InvalidStart(start));
        }
        Ok(Self { text, start })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    /// Same token moved later by `offset` seconds.
    pub fn shifted(&self, offset: f64) -> Result<Self> {
        Self::new(self.text.clone(), self.start + offset)
    }
}

fn check_lexical(text: &str) -> Result<()> {
    if text.is_empty() {
        return Err(CodecError::EmptyToken);
    }
    if text == NEXT_TOKEN || text == PREV_TOKEN {
        return Err(CodecError::ReservedToken(text.to_string()));
    }
    Ok(())
}

/// A single speaker's aligned token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTranscript")]
pub struct TimedTranscript {
    #[serde(rename = "speaker")]
    speaker_id: String,
    tokens: Vec<TimedToken>,
}

#[derive(Deserialize)]
struct RawTranscript {
    speaker: String,
    tokens: Vec<TimedToken>,
}

impl TryFrom<RawTranscript> for TimedTranscript {
    type Error = CodecError;

    fn try_from(raw: RawTranscript) -> Result<Self> {
        TimedTranscript::new(raw.speaker, raw.tokens)
    }
}

impl TimedTranscript {
    pub fn new(speaker_id: impl Into<String>, tokens: Vec<TimedToken>) -> Result<Self> {
        for (position, pair) in tokens.windows(2).enumerate() {
            if pair[1].start < pair[0].start {
                return Err(CodecError::DecreasingStarts {
                    position: position + 1,
                    previous: pair[0].start,
                    current: pair[1].start,
                });
            }
        }
        Ok(Self {
            speaker_id: speaker_id.into(),
            tokens,
        })
    }

    /// Convenience constructor from `(text, start)` pairs.
    pub fn from_pairs<S: AsRef<str>>(speaker_id: &str, pairs: &[(S, f64)]) -> Result<Self> {
        let tokens = pairs
            .iter()
            .map(|(text, start)| TimedToken::new(text.as_ref(), *start))
            .collect::<Result<Vec<_>>>()?;
        Self::new(speaker_id, tokens)
    }

    pub fn speaker_id(&self) -> &str {
        &self.speaker_id
    }

    pub fn tokens(&self) -> &[TimedToken] {
        &self.tokens
    }

    pub fn texts(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }

    pub fn first_start(&self) -> Option<f64> {
        self.tokens.first().map(|t| t.start)
    }

    pub fn shifted(&self, offset: f64) -> Result<Self> {
        let tokens = self
            .tokens
            .iter()
            .map(|t| t.shifted(offset))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.speaker_id.clone(), tokens)
    }
}

/// `ordering()[k]` is the input position of the k-th ordered speaker.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpeakerOrder(Vec<usize>);

impl SpeakerOrder {
    pub fn new(ordering: Vec<usize>) -> Result<Self> {
        let len = ordering.len();
        let mut seen = vec![false; len];
        for &p in &ordering {
            if p >= len || seen[p] {
                return Err(CodecError::InvalidOrder { order: ordering, len });
            }
            seen[p] = true;
        }
        Ok(Self(ordering))
    }

    pub fn identity(len: usize) -> Self {
        Self((0..len).collect())
    }

    pub fn ordering(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Inverse map: input position -> ordered index.
    pub fn rank_of_inputs(&self) -> Vec<usize> {
        let mut rank = vec![0; self.0.len()];
        for (k, &p) in self.0.iter().enumerate() {
            rank[p] = k;
        }
        rank
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamItem {
    Token(String),
    Next,
    Prev,
}

impl StreamItem {
    pub fn is_control(&self) -> bool {
        !matches!(self, StreamItem::Token(_))
    }

    pub fn as_str(&self) -> &str {
        match self {
            StreamItem::Token(t) => t,
            StreamItem::Next => NEXT_TOKEN,
            StreamItem::Prev => PREV_TOKEN,
        }
    }
}

impl From<&str> for StreamItem {
    fn from(s: &str) -> Self {
        match s {
            NEXT_TOKEN => StreamItem::Next,
            PREV_TOKEN => StreamItem::Prev,
            other => StreamItem::Token(other.to_string()),
        }
    }
}

/// Flat token stream mixing lexical tokens with speaker-switch controls.
///
/// The text form separates items with single spaces; `[NEXT]` and `[PREV]`
/// are the control literals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TogglStream {
    items: Vec<StreamItem>,
}

impl TogglStream {
    pub fn new(items: Vec<StreamItem>) -> Self {
        Self { items }
    }

    pub fn items(&self) -> &[StreamItem] {
        &self.items
    }

    pub fn into_items(self) -> Vec<StreamItem> {
        self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn control_count(&self) -> usize {
        self.items.iter().filter(|i| i.is_control()).count()
    }
}

impl FromIterator<StreamItem> for TogglStream {
    fn from_iter<I: IntoIterator<Item = StreamItem>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

impl fmt::Display for TogglStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.items.iter().map(StreamItem::as_str).join(" "))
    }
}

impl FromStr for TogglStream {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(s.split_whitespace().map(StreamItem::from).collect())
    }
}

impl Serialize for TogglStream {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TogglStream {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Ok(text.parse().unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Reject streams that drive the speaker index below zero.
    Strict,
    /// Clamp the speaker index at zero and keep going.
    Lenient,
}

/// Canonical first-onset order: whoever speaks first is speaker 0.
pub fn order_speakers(transcripts: &[TimedTranscript]) -> Result<SpeakerOrder> {
    if transcripts.is_empty() {
        return Err(CodecError::NoTranscripts);
    }
    let mut keyed = Vec::with_capacity(transcripts.len());
    for (i, t) in transcripts.iter().enumerate() {
        let start = t.first_start().ok_or(CodecError::EmptyTranscript(i))?;
        keyed.push((start, i));
    }
    // starts are finite, so total_cmp agrees with numeric order
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(SpeakerOrder(keyed.into_iter().map(|(_, i)| i).collect()))
}

/// Interleave transcripts by (start, ordered speaker index) and insert the
/// minimal run of control tokens at every speaker change.
pub fn serialize(transcripts: &[TimedTranscript], order: &SpeakerOrder) -> Result<TogglStream> {
    if transcripts.is_empty() {
        return Err(CodecError::NoTranscripts);
    }
    if order.len() != transcripts.len() {
        return Err(CodecError::InvalidOrder {
            order: order.0.clone(),
            len: transcripts.len(),
        });
    }

    let mut merged: Vec<(f64, usize, &str)> = Vec::new();
    for (rank, &pos) in order.ordering().iter().enumerate() {
        merged.extend(transcripts[pos].tokens.iter().map(|t| (t.start, rank, t.text.as_str())));
    }
    // stable: equal (start, rank) keeps within-speaker order
    merged.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut items = Vec::with_capacity(merged.len() * 2);
    let mut current = 0usize;
    for (_, rank, text) in merged {
        push_switch(&mut items, current, rank);
        current = rank;
        items.push(StreamItem::Token(text.to_string()));
    }
    Ok(TogglStream::new(items))
}

fn push_switch(items: &mut Vec<StreamItem>, from: usize, to: usize) {
    if to > from {
        items.extend(std::iter::repeat_n(StreamItem::Next, to - from));
    } else {
        items.extend(std::iter::repeat_n(StreamItem::Prev, from - to));
    }
}

/// Split a stream back into per-speaker token sequences.
///
/// Only indices that received at least one lexical token appear in the map.
pub fn deserialize(stream: &TogglStream, mode: DecodeMode) -> Result<BTreeMap<usize, Vec<String>>> {
    let mut out: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let mut current = 0usize;
    for (position, item) in stream.items.iter().enumerate() {
        match item {
            StreamItem::Token(t) => out.entry(current).or_default().push(t.clone()),
            StreamItem::Next => current += 1,
            StreamItem::Prev => match (current.checked_sub(1), mode) {
                (Some(c), _) => current = c,
                (None, DecodeMode::Strict) => return Err(CodecError::Underflow(position)),
                (None, DecodeMode::Lenient) => {}
            },
        }
    }
    Ok(out)
}

pub fn strip_control_tokens(stream: &TogglStream) -> Vec<String> {
    stream
        .items
        .iter()
        .filter_map(|item| match item {
            StreamItem::Token(t) => Some(t.clone()),
            _ => None,
        })
        .collect()
}

/// One candidate label sequence for permutation-invariant training.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationTarget {
    pub order: SpeakerOrder,
    pub stream: TogglStream,
    /// Set on the first-onset order.
    pub canonical: bool,
}

/// All `S!` speaker orders with their serialized streams. The canonical
/// first-onset order is always the first entry; the rest follow in
/// lexicographic order of the permutation applied to it.
pub fn enumerate_permutation_targets(
    transcripts: &[TimedTranscript],
    cap: usize,
) -> Result<Vec<PermutationTarget>> {
    let canonical = order_speakers(transcripts)?;
    let count = transcripts.len();
    if count > cap {
        return Err(CodecError::TooManySpeakers { count, cap });
    }
    (0..count)
        .permutations(count)
        .map(|perm| {
            let ordering: Vec<usize> = perm.iter().map(|&k| canonical.0[k]).collect();
            let order = SpeakerOrder(ordering);
            let stream = serialize(transcripts, &order)?;
            Ok(PermutationTarget {
                canonical: order == canonical,
                order,
                stream,
            })
        })
        .collect()
}
