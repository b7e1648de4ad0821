//! Corpus measurements: Distinct-N, words per turn, turns per conversation and
//! per-speaker breakdowns.
//!
//! All metrics share [`tokenize`]. N-grams never cross turn boundaries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Turn};
use crate::error::{Error, Result};

/// Identifies the tokenizer rules a report was computed with.
pub const TOKENIZER_ID: &str = "lower-ws-edgestrip-v1";

/// Lowercases, splits on whitespace, and trims non-alphanumeric characters
/// from both ends of each chunk. Interior punctuation is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|chunk| chunk.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistinctMode {
    /// Unique n-grams over all n-grams, pooled across the corpus.
    #[default]
    Pooled,
    /// Mean of per-conversation Distinct-N.
    PerConversationMean,
}

#[derive(Default)]
struct NgramCounts {
    unique: HashSet<Vec<String>>,
    total: usize,
}

impl NgramCounts {
    fn add_turn(&mut self, tokens: &[String], n: usize) {
        if tokens.len() < n {
            return;
        }
        for gram in tokens.windows(n) {
            self.total += 1;
            if !self.unique.contains(gram) {
                self.unique.insert(gram.to_vec());
            }
        }
    }

    fn ratio(&self) -> Option<f64> {
        (self.total > 0).then(|| self.unique.len() as f64 / self.total as f64)
    }
}

fn distinct_over<'a>(turns: impl IntoIterator<Item = &'a Turn>, n: usize) -> Option<f64> {
    let mut counts = NgramCounts::default();
    for turn in turns {
        counts.add_turn(&tokenize(&turn.text), n);
    }
    counts.ratio()
}

pub fn distinct_n(corpus: &[Conversation], n: usize) -> Result<f64> {
    distinct_n_with(corpus, n, DistinctMode::Pooled)
}

pub fn distinct_n_with(corpus: &[Conversation], n: usize, mode: DistinctMode) -> Result<f64> {
    if n == 0 {
        return Err(Error::UndefinedMetric("n must be at least 1".into()));
    }
    let value = match mode {
        DistinctMode::Pooled => distinct_over(corpus.iter().flat_map(|c| &c.turns), n),
        DistinctMode::PerConversationMean => {
            let per: Vec<f64> = corpus
                .iter()
                .filter_map(|c| distinct_over(&c.turns, n))
                .collect();
            (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
        }
    };
    value.ok_or_else(|| Error::UndefinedMetric(format!("corpus has no {n}-grams")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSettings {
    pub tokenizer: String,
    pub distinct_mode: DistinctMode,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            tokenizer: TOKENIZER_ID.to_string(),
            distinct_mode: DistinctMode::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnSummary {
    pub mean: f64,
    pub min: usize,
    pub median: f64,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStats {
    /// 1-based roster position.
    pub position: usize,
    pub turns: usize,
    pub words: usize,
    pub words_per_turn: f64,
    pub turn_share: f64,
    pub distinct_n: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub corpus_id: String,
    pub settings: MetricSettings,
    pub num_conversations: usize,
    pub total_turns: usize,
    pub total_words: usize,
    pub turns_per_conversation: TurnSummary,
    pub words_per_turn: f64,
    /// Defined orders only; an order with no n-grams is omitted.
    pub distinct_n: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_speaker: Option<Vec<SpeakerStats>>,
}

#[derive(Debug, Clone, Default)]
pub struct StatsOptions {
    pub corpus_id: String,
    pub per_speaker: bool,
    /// Roster by recipe id; speakers missing from it are positioned by first appearance.
    pub rosters: HashMap<String, Vec<String>>,
    pub distinct_mode: DistinctMode,
}

pub const DISTINCT_ORDERS: [usize; 4] = [1, 2, 3, 4];

fn positions(conv: &Conversation, rosters: &HashMap<String, Vec<String>>) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    if let Some(roster) = rosters.get(&conv.recipe_id) {
        for (i, name) in roster.iter().enumerate() {
            out.insert(name.clone(), i);
        }
    }
    let mut next = out.len();
    for speaker in conv.speakers() {
        if !out.contains_key(speaker) {
            out.insert(speaker.to_string(), next);
            next += 1;
        }
    }
    out
}

pub fn corpus_stats(corpus: &[Conversation], options: &StatsOptions) -> Result<MetricsReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total_turns = 0usize;
    let mut total_words = 0usize;
    let mut lengths: Vec<usize> = Vec::with_capacity(corpus.len());
    for conv in corpus {
        total_turns += conv.turns.len();
        lengths.push(conv.turns.len());
        total_words += conv
            .turns
            .iter()
            .map(|t| tokenize(&t.text).len())
            .sum::<usize>();
    }
    if total_turns == 0 {
        return Err(Error::EmptyCorpus);
    }
    lengths.sort_unstable();
    let mid = lengths.len() / 2;
    let median = if lengths.len() % 2 == 1 {
        lengths[mid] as f64
    } else {
        (lengths[mid - 1] + lengths[mid]) as f64 / 2.0
    };

    let mut distinct = BTreeMap::new();
    for n in DISTINCT_ORDERS {
        if let Ok(v) = distinct_n_with(corpus, n, options.distinct_mode) {
            distinct.insert(n, v);
        }
    }

    let per_speaker = options.per_speaker.then(|| {
        let mut by_pos: BTreeMap<usize, Vec<&Turn>> = BTreeMap::new();
        for conv in corpus {
            let pos = positions(conv, &options.rosters);
            for turn in &conv.turns {
                by_pos.entry(pos[&turn.speaker]).or_default().push(turn);
            }
        }
        by_pos
            .into_iter()
            .map(|(pos, turns)| {
                let words: usize = turns.iter().map(|t| tokenize(&t.text).len()).sum();
                let distinct_n = DISTINCT_ORDERS
                    .iter()
                    .filter_map(|&n| distinct_over(turns.iter().copied(), n).map(|v| (n, v)))
                    .collect();
                SpeakerStats {
                    position: pos + 1,
                    turns: turns.len(),
                    words,
                    words_per_turn: words as f64 / turns.len() as f64,
                    turn_share: turns.len() as f64 / total_turns as f64,
                    distinct_n,
                }
            })
            .collect()
    });

    Ok(MetricsReport {
        corpus_id: options.corpus_id.clone(),
        settings: MetricSettings {
            tokenizer: TOKENIZER_ID.to_string(),
            distinct_mode: options.distinct_mode,
        },
        num_conversations: corpus.len(),
        total_turns,
        total_words,
        turns_per_conversation: TurnSummary {
            mean: total_turns as f64 / corpus.len() as f64,
            min: lengths[0],
            median,
            max: *lengths.last().expect("nonempty"),
        },
        words_per_turn: total_words as f64 / total_turns as f64,
        distinct_n: distinct,
        per_speaker,
    })
}

impl MetricsReport {
    /// Named scalar metrics in display order.
    pub fn scalars(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("conversations".to_string(), self.num_conversations as f64),
            ("turns".to_string(), self.total_turns as f64),
            ("turns/conversation".to_string(), self.turns_per_conversation.mean),
            ("words/turn".to_string(), self.words_per_turn),
        ];
        for (n, v) in &self.distinct_n {
            out.push((format!("distinct-{n}"), *v));
        }
        if let Some(speakers) = &self.per_speaker {
            for s in speakers {
                let p = s.position;
                out.push((format!("speaker {p} words/turn"), s.words_per_turn));
                out.push((format!("speaker {p} turn share"), s.turn_share));
                for (n, v) in &s.distinct_n {
                    out.push((format!("speaker {p} distinct-{n}"), *v));
                }
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .scalars()
            .into_iter()
            .map(|(name, v)| vec![name, format_value(v)])
            .collect();
        let title = if self.corpus_id.is_empty() {
            "value".to_string()
        } else {
            self.corpus_id.clone()
        };
        render_table(&["metric".to_string(), title], &rows)
    }
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

/// Left-aligned first column, right-aligned value columns.
pub fn render_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let mut parts = Vec::with_capacity(cols);
        for (i, cell) in cells.iter().enumerate().take(cols) {
            if i == 0 {
                parts.push(format!("{:<w$}", cell, w = widths[i]));
            } else {
                parts.push(format!("{:>w$}", cell, w = widths[i]));
            }
        }
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, headers);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for row in rows {
        line(&mut out, row);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportComparison {
    pub a_id: String,
    pub b_id: String,
    pub rows: Vec<ComparisonRow>,
}

impl ReportComparison {
    pub fn to_table(&self) -> String {
        let headers = [
            "metric".to_string(),
            self.a_id.clone(),
            self.b_id.clone(),
            "delta".to_string(),
        ];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.metric.clone(),
                    format_value(r.a),
                    format_value(r.b),
                    format!("{:+.4}", r.delta),
                ]
            })
            .collect();
        render_table(&headers, &rows)
    }
}

fn check_comparable(a: &MetricsReport, b: &MetricsReport) -> Result<()> {
    if a.settings != b.settings {
        return Err(Error::Incomparable(format!(
            "`{}` used {:?} but `{}` used {:?}",
            a.corpus_id, a.settings, b.corpus_id, b.settings
        )));
    }
    Ok(())
}

/// Side-by-side values and deltas for every metric present in both reports.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport) -> Result<ReportComparison> {
    check_comparable(a, b)?;
    let b_values: HashMap<String, f64> = b.scalars().into_iter().collect();
    let rows = a
        .scalars()
        .into_iter()
        .filter_map(|(metric, av)| {
            b_values.get(&metric).map(|&bv| ComparisonRow {
                metric,
                a: av,
                b: bv,
                delta: bv - av,
            })
        })
        .collect();
    Ok(ReportComparison {
        a_id: a.corpus_id.clone(),
        b_id: b.corpus_id.clone(),
        rows,
    })
}

/// Grouped text bars of Distinct-N: one group per order, one bar per corpus.
pub fn render_distinct_bars(reports: &[&MetricsReport], orders: &[usize], width: usize) -> Result<String> {
    if let Some(first) = reports.first() {
        for r in &reports[1..] {
            check_comparable(first, r)?;
        }
    }
    let label_w = reports
        .iter()
        .map(|r| r.corpus_id.chars().count())
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    for &n in orders {
        let _ = writeln!(out, "distinct-{n}");
        for r in reports {
            match r.distinct_n.get(&n) {
                Some(v) => {
                    let filled = (v * width as f64).round() as usize;
                    let _ = writeln!(
                        out,
                        "  {:<lw$} |{}{}| {:.4}",
                        r.corpus_id,
                        "#".repeat(filled),
                        " ".repeat(width.saturating_sub(filled)),
                        v,
                        lw = label_w
                    );
                }
                None => {
                    let _ = writeln!(out, "  {:<lw$} |{}| n/a", r.corpus_id, " ".repeat(width), lw = label_w);
                }
            }
        }
    }
    Ok(out)
}
