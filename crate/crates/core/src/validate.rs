//! Acceptance rules, quality flags, the topic heuristic and deduplication.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Flag, Recipe, Turn};
use crate::error::{Error, Result};
use crate::metrics::tokenize;
pub use crate::parser::{DiscardReason, ParseResult};

/// Minimum share of turns each speaker of a three-party conversation should hold.
pub const MIN_TURN_SHARE: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationPolicy {
    pub min_turns: usize,
    pub require_all_speakers: bool,
    pub max_consecutive_same_speaker: usize,
    pub repetition_ngram: usize,
    pub repetition_threshold: f64,
    pub topic_check: bool,
    pub dedup_shingle: usize,
    pub dedup_jaccard: f64,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        ValidationPolicy {
            min_turns: 4,
            require_all_speakers: true,
            max_consecutive_same_speaker: 2,
            repetition_ngram: 4,
            repetition_threshold: 0.5,
            topic_check: true,
            dedup_shingle: 5,
            dedup_jaccard: 0.9,
        }
    }
}

impl ValidationPolicy {
    pub fn check(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("validation policy: {m}")));
        if self.min_turns == 0 {
            return fail("min_turns must be positive");
        }
        if self.max_consecutive_same_speaker == 0 {
            return fail("max_consecutive_same_speaker must be positive");
        }
        if self.repetition_ngram == 0 {
            return fail("repetition_ngram must be positive");
        }
        if !(0.0..=1.0).contains(&self.repetition_threshold) {
            return fail("repetition_threshold must lie in [0, 1]");
        }
        if self.dedup_shingle == 0 {
            return fail("dedup_shingle must be positive");
        }
        if !(0.0..=1.0).contains(&self.dedup_jaccard) {
            return fail("dedup_jaccard must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Share of n-gram occurrences that repeat an earlier n-gram of the same conversation.
pub fn repeated_ngram_mass(turns: &[Turn], n: usize) -> f64 {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for turn in turns {
        let tokens = tokenize(&turn.text);
        if tokens.len() < n {
            continue;
        }
        for gram in tokens.windows(n) {
            total += 1;
            seen.insert(gram.to_vec());
        }
    }
    if total == 0 {
        0.0
    } else {
        1.0 - seen.len() as f64 / total as f64
    }
}

fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (i, &(pos, c)) in chars.iter().enumerate() {
        let boundary = matches!(c, '.' | '!' | '?')
            && chars.get(i + 1).is_none_or(|&(_, next)| next.is_whitespace());
        if boundary {
            let end = pos + c.len_utf8();
            out.push(text[start..end].trim());
            start = end;
        }
    }
    if start < text.len() {
        out.push(text[start..].trim());
    }
    out.retain(|s| !s.is_empty());
    out
}

/// Two distinct turns share an identical text, or an identical sentence of
/// at least `min_words` words.
pub fn has_verbatim_repeat(turns: &[Turn], min_words: usize) -> bool {
    let mut whole: HashSet<&str> = HashSet::new();
    let mut owner: HashMap<Vec<String>, usize> = HashMap::new();
    for (i, turn) in turns.iter().enumerate() {
        if !whole.insert(turn.text.trim()) {
            return true;
        }
        for sentence in sentences(&turn.text) {
            let tokens = tokenize(sentence);
            if tokens.len() < min_words {
                continue;
            }
            match owner.get(&tokens) {
                Some(&j) if j != i => return true,
                Some(_) => {}
                None => {
                    owner.insert(tokens, i);
                }
            }
        }
    }
    false
}

fn longest_run(turns: &[Turn]) -> usize {
    let mut best = 0;
    let mut run = 0;
    let mut prev: Option<&str> = None;
    for t in turns {
        if prev == Some(t.speaker.as_str()) {
            run += 1;
        } else {
            run = 1;
            prev = Some(&t.speaker);
        }
        best = best.max(run);
    }
    best
}

fn quality_flags(conv: &Conversation, recipe: &Recipe, policy: &ValidationPolicy) -> BTreeSet<Flag> {
    let mut flags = BTreeSet::new();
    if repeated_ngram_mass(&conv.turns, policy.repetition_ngram) > policy.repetition_threshold
        || has_verbatim_repeat(&conv.turns, policy.repetition_ngram)
    {
        flags.insert(Flag::Repetitive);
    }
    if policy.topic_check && !topic_match(conv, recipe) {
        flags.insert(Flag::OffTopic);
    }
    if recipe.party_size() >= 3 && !conv.turns.is_empty() {
        let total = conv.turns.len() as f64;
        let imbalanced = recipe.participants.iter().any(|p| {
            let held = conv.turns.iter().filter(|t| &t.speaker == p).count();
            (held as f64) / total < MIN_TURN_SHARE
        });
        if imbalanced {
            flags.insert(Flag::Imbalanced);
        }
    }
    if longest_run(&conv.turns) > policy.max_consecutive_same_speaker {
        flags.insert(Flag::ExcessiveMonologue);
    }
    flags
}

/// Decides acceptance and computes flags. The returned conversation carries
/// exactly the computed flags.
pub fn validate(conv: &Conversation, recipe: &Recipe, policy: &ValidationPolicy) -> ParseResult {
    let flags = quality_flags(conv, recipe, policy);
    if conv.check().is_err() || conv.first_roster_violation(recipe).is_some() {
        return ParseResult::discarded(DiscardReason::RosterViolation, flags);
    }
    if conv.turns.len() < policy.min_turns {
        return ParseResult::discarded(DiscardReason::BelowMinTurns, flags);
    }
    if policy.require_all_speakers
        && recipe
            .participants
            .iter()
            .any(|p| !conv.turns.iter().any(|t| &t.speaker == p))
    {
        return ParseResult::discarded(DiscardReason::RosterViolation, flags);
    }
    let mut accepted = conv.clone();
    accepted.flags = flags;
    ParseResult::accepted(accepted)
}

/// Flags for a seed: the quality flags plus `BELOW_MIN_TURNS` for short seeds.
pub fn seed_flags(conv: &Conversation, recipe: &Recipe, policy: &ValidationPolicy) -> BTreeSet<Flag> {
    let mut flags = quality_flags(conv, recipe, policy);
    if conv.turns.len() < policy.min_turns {
        flags.insert(Flag::BelowMinTurns);
    }
    flags
}

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "also", "am", "an", "and", "any",
    "are", "aren't", "as", "at", "be", "because", "been", "before", "being", "below", "between",
    "both", "but", "by", "can", "could", "did", "do", "does", "doing", "don't", "down", "during",
    "each", "few", "for", "from", "further", "get", "got", "had", "has", "have", "having", "he",
    "her", "here", "hers", "herself", "him", "himself", "his", "how", "i", "i'm", "if", "in",
    "into", "is", "isn't", "it", "it's", "its", "itself", "just", "like", "me", "more", "most",
    "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once", "one", "only", "or",
    "other", "our", "ours", "ourselves", "out", "over", "own", "really", "same", "she", "should",
    "so", "some", "such", "than", "that", "that's", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "yeah", "yes", "you", "you're",
    "your", "yours", "yourself", "yourselves",
];

fn is_content_word(word: &str) -> bool {
    word.chars().count() >= 3 && !STOPWORDS.contains(&word)
}

fn stem(word: &str) -> &str {
    match word.char_indices().nth(5) {
        Some((idx, _)) => &word[..idx],
        None => word,
    }
}

/// Keyword proxy for "the conversation matches the stated topic".
///
/// Content words (three or more characters, not stopwords) of the subtopic,
/// or of the topic when no subtopic is set, are truncated to five
/// characters. The conversation matches when one of its content words
/// contains such a stem, or is itself a prefix of one (so "pet" matches the
/// topic "pets"). This is a heuristic, not a judgment of topicality.
pub fn topic_match(conv: &Conversation, recipe: &Recipe) -> bool {
    let stems: Vec<String> = tokenize(recipe.focus())
        .into_iter()
        .filter(|w| is_content_word(w))
        .map(|w| stem(&w).to_string())
        .collect();
    if stems.is_empty() {
        return false;
    }
    conv.turns
        .iter()
        .flat_map(|t| tokenize(&t.text))
        .filter(|w| is_content_word(w))
        .any(|w| {
            let short = stem(&w);
            stems.iter().any(|s| w.contains(s.as_str()) || s.starts_with(short))
        })
}

/// Word n-gram shingles over the conversation's whole token stream. Texts
/// shorter than `n` tokens yield a single shingle of all their tokens.
pub fn shingles(conv: &Conversation, n: usize) -> HashSet<String> {
    let tokens: Vec<String> = conv.turns.iter().flat_map(|t| tokenize(&t.text)).collect();
    if tokens.is_empty() {
        return HashSet::new();
    }
    if tokens.len() < n {
        return HashSet::from([tokens.join(" ")]);
    }
    tokens.windows(n).map(|w| w.join(" ")).collect()
}

pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome {
    pub kept: Vec<Conversation>,
    pub dropped: Vec<Conversation>,
}

/// Order-dependent: the first occurrence of each (near-)duplicate group wins.
pub fn dedup(records: Vec<Conversation>, policy: &ValidationPolicy) -> DedupOutcome {
    let mut kept: Vec<Conversation> = Vec::new();
    let mut dropped = Vec::new();
    let mut exact: HashSet<Vec<Turn>> = HashSet::new();
    let mut kept_shingles: Vec<HashSet<String>> = Vec::new();
    // shingle -> indices of kept records containing it
    let mut index: HashMap<String, Vec<usize>> = HashMap::new();

    for conv in records {
        if exact.contains(&conv.turns) {
            dropped.push(conv);
            continue;
        }
        let own = shingles(&conv, policy.dedup_shingle);
        let mut overlap: HashMap<usize, usize> = HashMap::new();
        for s in &own {
            if let Some(owners) = index.get(s) {
                for &k in owners {
                    *overlap.entry(k).or_default() += 1;
                }
            }
        }
        let near = overlap.iter().any(|(&k, &inter)| {
            let union = own.len() + kept_shingles[k].len() - inter;
            union > 0 && inter as f64 / union as f64 >= policy.dedup_jaccard
        });
        if near {
            dropped.push(conv);
            continue;
        }
        let k = kept.len();
        for s in &own {
            index.entry(s.clone()).or_default().push(k);
        }
        kept_shingles.push(own);
        exact.insert(conv.turns.clone());
        kept.push(conv);
    }
    DedupOutcome { kept, dropped }
}
