//! Turns raw completions back into conversations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{content_id, Category, Conversation, Flag, Provenance, Recipe, Turn};
use crate::prompt::CANONICAL_NAMES;

const STOP_MARKER: &str = "The following is a conversation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    NoTurns,
    RosterViolation,
    BelowMinTurns,
    Duplicate,
}

impl DiscardReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DiscardReason::NoTurns => "no_turns",
            DiscardReason::RosterViolation => "roster_violation",
            DiscardReason::BelowMinTurns => "below_min_turns",
            DiscardReason::Duplicate => "duplicate",
        }
    }
}

/// Outcome of parsing or validation. Exactly one of `conversation` and
/// `discard_reason` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseResult {
    pub conversation: Option<Conversation>,
    pub flags: BTreeSet<Flag>,
    pub discard_reason: Option<DiscardReason>,
}

impl ParseResult {
    pub fn accepted(conversation: Conversation) -> Self {
        ParseResult {
            flags: conversation.flags.clone(),
            conversation: Some(conversation),
            discard_reason: None,
        }
    }

    pub fn discarded(reason: DiscardReason, flags: BTreeSet<Flag>) -> Self {
        ParseResult {
            conversation: None,
            flags,
            discard_reason: Some(reason),
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.conversation.is_some()
    }
}

/// Maps a rendered label to the roster name. Canonical labels are positional
/// and take precedence, so rosters that permute the canonical names still
/// round-trip through rendering.
fn resolve_speaker<'r>(recipe: &'r Recipe, label: &str) -> Option<&'r str> {
    CANONICAL_NAMES
        .iter()
        .take(recipe.party_size())
        .position(|n| *n == label)
        .or_else(|| recipe.position_of(label))
        .map(|pos| recipe.participants[pos].as_str())
}

fn is_stop_remnant(line: &str) -> bool {
    let line = line.trim();
    line.starts_with(STOP_MARKER) || (line.len() >= 3 && STOP_MARKER.starts_with(line))
}

enum Line<'a> {
    Turn(&'a str, String),
    Stop,
}

fn classify<'r>(recipe: &'r Recipe, line: &str) -> Line<'r> {
    let line = line.trim_end_matches('\r');
    if line.trim().is_empty() || is_stop_remnant(line) {
        return Line::Stop;
    }
    let Some((label, text)) = line.split_once(": ") else {
        return Line::Stop;
    };
    let text = text.trim();
    match resolve_speaker(recipe, label) {
        Some(speaker) if !text.is_empty() => Line::Turn(speaker, text.to_string()),
        _ => Line::Stop,
    }
}

/// Parses `Speaker: text` lines up to the first blank, marker or malformed line.
pub fn parse_lines(text: &str, recipe: &Recipe) -> Vec<Turn> {
    let mut turns = Vec::new();
    for line in text.split('\n') {
        match classify(recipe, line) {
            Line::Turn(speaker, text) => turns.push(Turn::new(speaker, text)),
            Line::Stop => break,
        }
    }
    turns
}

/// Parses a completion that continues a prompt ending in `"{cue}:"`.
///
/// The first line is the cue speaker's utterance. With `truncated` set
/// (the backend stopped on the token budget) the final, possibly partial,
/// line is dropped.
pub fn parse_completion(raw: &str, recipe: &Recipe, cue_speaker: &str, truncated: bool) -> ParseResult {
    let mut lines: Vec<&str> = raw.split('\n').collect();
    if truncated && !raw.ends_with('\n') {
        lines.pop();
    }
    let mut turns = Vec::new();
    let mut rest = lines.as_slice();
    if let Some((first, tail)) = lines.split_first() {
        rest = tail;
        let text = first.trim();
        if !text.is_empty() {
            if is_stop_remnant(text) {
                rest = &[];
            } else if let Some(speaker) = resolve_speaker(recipe, cue_speaker) {
                turns.push(Turn::new(speaker, text));
            } else {
                return ParseResult::discarded(DiscardReason::RosterViolation, BTreeSet::new());
            }
        }
    }
    for line in rest {
        match classify(recipe, line) {
            Line::Turn(speaker, text) => turns.push(Turn::new(speaker, text)),
            Line::Stop => break,
        }
    }
    if turns.is_empty() {
        return ParseResult::discarded(DiscardReason::NoTurns, BTreeSet::new());
    }
    let id = content_id(&("parsed", &recipe.id, &turns));
    ParseResult::accepted(Conversation {
        id,
        recipe_id: recipe.id.clone(),
        category: Category::Full,
        provenance: Provenance::Generated,
        turns,
        meta: BTreeMap::new(),
        flags: BTreeSet::new(),
    })
}
