//! Human-evaluation bookkeeping: excerpt sampling, rating-task export,
//! median aggregation and Welch's t-test.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{content_id, Category, Conversation, Recipe};
use crate::error::{Error, Result};
use crate::prompt::render_header;

pub const DEFAULT_MIN_EXCERPT: usize = 8;
pub const DEFAULT_MAX_EXCERPT: usize = 12;
pub const DEFAULT_RATERS_PER_ITEM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Interesting,
    Coherent,
    Natural,
    Consistent,
    OnTopic,
    Comprehensible,
    BalancedEngagement,
    Engaging,
    Intelligent,
    NonRepetitive,
}

impl Dimension {
    pub const ALL: [Dimension; 10] = [
        Dimension::Interesting,
        Dimension::Coherent,
        Dimension::Natural,
        Dimension::Consistent,
        Dimension::OnTopic,
        Dimension::Comprehensible,
        Dimension::BalancedEngagement,
        Dimension::Engaging,
        Dimension::Intelligent,
        Dimension::NonRepetitive,
    ];

    /// The five questions asked of every conversation.
    pub const CORE: [Dimension; 5] = [
        Dimension::Natural,
        Dimension::Coherent,
        Dimension::Interesting,
        Dimension::Consistent,
        Dimension::OnTopic,
    ];

    /// Added for conversations with more than two speakers.
    pub const MULTI_PARTY: [Dimension; 2] = [Dimension::Comprehensible, Dimension::BalancedEngagement];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Interesting => "interesting",
            Dimension::Coherent => "coherent",
            Dimension::Natural => "natural",
            Dimension::Consistent => "consistent",
            Dimension::OnTopic => "on_topic",
            Dimension::Comprehensible => "comprehensible",
            Dimension::BalancedEngagement => "balanced_engagement",
            Dimension::Engaging => "engaging",
            Dimension::Intelligent => "intelligent",
            Dimension::NonRepetitive => "non_repetitive",
        }
    }

    pub fn wording(self) -> &'static str {
        match self {
            Dimension::Natural => "How natural is the overall conversation?",
            Dimension::Coherent => "How coherent is the overall conversation?",
            Dimension::Interesting => "How interesting is the overall conversation?",
            Dimension::Consistent => "How consistent are each of the speakers' turns?",
            Dimension::OnTopic => "Does the conversation match the stated topic?",
            Dimension::Comprehensible => "Can you tell which speaker is speaking to which?",
            Dimension::BalancedEngagement => {
                "Is each speaker engaged, or is the conversation primarily dominated by one or two of the speakers?"
            }
            Dimension::Engaging => "How engaging is the overall conversation?",
            Dimension::Intelligent => "How intelligent do the speakers sound?",
            Dimension::NonRepetitive => "How free of repetition is the conversation?",
        }
    }

    pub fn scale(self) -> &'static str {
        match self {
            Dimension::Natural => "1 (completely unnatural) to 5 (as natural as two native English speakers)",
            Dimension::Coherent => "1 (completely incoherent) to 5 (as coherent as two native English speakers)",
            Dimension::Interesting => "1 (generic and dull) to 5 (full of content and very engaging)",
            Dimension::Consistent => "1 (completely inconsistent) to 5 (no logical fallacies)",
            Dimension::OnTopic => "Yes (1) or No (0)",
            Dimension::Comprehensible => "1 (completely incomprehensible) to 5 (perfectly comprehensible)",
            Dimension::BalancedEngagement => {
                "1 (totally dominated by one or two speakers) to 5 (all speakers are actively participating in the conversation to an equal degree)"
            }
            Dimension::Engaging => "1 (not engaging at all) to 5 (very engaging)",
            Dimension::Intelligent => "1 (not intelligent at all) to 5 (very intelligent)",
            Dimension::NonRepetitive => "1 (very repetitive) to 5 (never repeats itself)",
        }
    }

    /// Inclusive score bounds.
    pub fn range(self) -> (i64, i64) {
        match self {
            Dimension::OnTopic => (0, 1),
            _ => (1, 5),
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::UnknownDimension(s.to_string()))
    }
}

/// A contiguous run of `min_len..=max_len` turns from `conv`, chosen
/// uniformly in length and start. Conversations shorter than `min_len` are
/// returned whole.
pub fn sample_excerpt(conv: &Conversation, rng_seed: u64, min_len: usize, max_len: usize) -> Result<Conversation> {
    if min_len == 0 || max_len < min_len {
        return Err(Error::Config(format!(
            "excerpt bounds must satisfy 1 <= min <= max, got {min_len}..{max_len}"
        )));
    }
    if conv.turns.is_empty() {
        return Err(Error::InvalidRecord {
            id: conv.id.clone(),
            message: "cannot excerpt a conversation without turns".into(),
        });
    }
    let n = conv.turns.len();
    let (start, len) = if n < min_len {
        (0, n)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let len = rng.random_range(min_len..=max_len).min(n);
        (rng.random_range(0..=n - len), len)
    };
    let mut out = conv.clone();
    out.id = content_id(&("excerpt", &conv.id, start, len));
    out.category = Category::MiddleExcerpt;
    out.turns = conv.turns[start..start + len].to_vec();
    out.meta.insert("source_id".into(), conv.id.clone());
    out.meta.insert("excerpt_start".into(), start.to_string());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub dimension: Dimension,
    pub wording: String,
    pub scale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTask {
    pub conversation_id: String,
    pub text: String,
    pub questions: Vec<Question>,
    pub raters_per_item: usize,
}

/// One task per conversation. The header line is prefixed when the
/// conversation's recipe is known, so raters can judge topicality.
pub fn rating_tasks(
    sample: &[Conversation],
    recipes: &HashMap<String, Recipe>,
    dimensions: &[Dimension],
    raters_per_item: usize,
) -> Result<Vec<RatingTask>> {
    if raters_per_item == 0 {
        return Err(Error::Config("raters_per_item must be positive".into()));
    }
    Ok(sample
        .iter()
        .map(|conv| {
            let mut dims: Vec<Dimension> = Vec::new();
            for &d in dimensions {
                if !dims.contains(&d) {
                    dims.push(d);
                }
            }
            if conv.speakers().len() > 2 {
                for d in Dimension::MULTI_PARTY {
                    if !dims.contains(&d) {
                        dims.push(d);
                    }
                }
            }
            let body = conv.text().trim_end().to_string();
            let text = match recipes.get(&conv.recipe_id) {
                Some(recipe) => format!("{}\n{}", render_header(recipe), body),
                None => body,
            };
            RatingTask {
                conversation_id: conv.id.clone(),
                text,
                questions: dims
                    .into_iter()
                    .map(|d| Question {
                        dimension: d,
                        wording: d.wording().to_string(),
                        scale: d.scale().to_string(),
                    })
                    .collect(),
                raters_per_item,
            }
        })
        .collect())
}

fn write_lines<T: Serialize>(items: &[T], path: &Path) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(items.len())
}

pub fn export_rating_tasks(
    sample: &[Conversation],
    recipes: &HashMap<String, Recipe>,
    dimensions: &[Dimension],
    raters_per_item: usize,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let tasks = rating_tasks(sample, recipes, dimensions, raters_per_item)?;
    write_lines(&tasks, path.as_ref())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub conversation_id: String,
    pub rater_id: String,
    pub dimension: Dimension,
    pub score: i64,
}

impl RatingRecord {
    pub fn check(&self) -> Result<()> {
        let (lo, hi) = self.dimension.range();
        if !(lo..=hi).contains(&self.score) {
            return Err(Error::InvalidRating(format!(
                "score {} for `{}` on {} by `{}` is outside {lo}..={hi}",
                self.score, self.conversation_id, self.dimension, self.rater_id
            )));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRating {
    conversation_id: String,
    rater_id: String,
    dimension: String,
    score: i64,
}

pub fn parse_ratings<R: Read>(reader: R, source: &Path) -> Result<Vec<RatingRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRating = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let record = RatingRecord {
            conversation_id: raw.conversation_id,
            rater_id: raw.rater_id,
            dimension: raw.dimension.parse()?,
            score: raw.score,
        };
        record.check()?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_ratings(path: impl AsRef<Path>) -> Result<Vec<RatingRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(file, path)
}

pub fn save_ratings(records: &[RatingRecord], path: impl AsRef<Path>) -> Result<usize> {
    write_lines(records, path.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedRating {
    pub conversation_id: String,
    pub dimension: Dimension,
    pub median_score: f64,
    pub n_raters: usize,
}

/// Midpoint median; `values` must be nonempty.
pub fn median(values: &mut [i64]) -> f64 {
    values.sort_unstable();
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid] as f64
    } else {
        (values[mid - 1] + values[mid]) as f64 / 2.0
    }
}

/// Median per (conversation, dimension), sorted by that key.
pub fn aggregate_ratings(records: &[RatingRecord]) -> Result<Vec<AggregatedRating>> {
    let mut seen = HashSet::new();
    let mut groups: BTreeMap<(&str, Dimension), Vec<i64>> = BTreeMap::new();
    for r in records {
        r.check()?;
        if !seen.insert((&r.conversation_id, &r.rater_id, r.dimension)) {
            return Err(Error::InvalidRating(format!(
                "rater `{}` scored {} on `{}` more than once",
                r.rater_id, r.dimension, r.conversation_id
            )));
        }
        groups
            .entry((r.conversation_id.as_str(), r.dimension))
            .or_default()
            .push(r.score);
    }
    Ok(groups
        .into_iter()
        .map(|((id, dimension), mut scores)| AggregatedRating {
            conversation_id: id.to_string(),
            dimension,
            median_score: median(&mut scores),
            n_raters: scores.len(),
        })
        .collect())
}

/// Per-dimension mean of the aggregated medians.
pub fn mean_by_dimension(aggregated: &[AggregatedRating]) -> BTreeMap<Dimension, f64> {
    let mut sums: BTreeMap<Dimension, (f64, usize)> = BTreeMap::new();
    for a in aggregated {
        let e = sums.entry(a.dimension).or_default();
        e.0 += a.median_score;
        e.1 += 1;
    }
    sums.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect()
}

/// Medians of one dimension, in conversation order.
pub fn medians_for(aggregated: &[AggregatedRating], dimension: Dimension) -> Vec<f64> {
    aggregated
        .iter()
        .filter(|a| a.dimension == dimension)
        .map(|a| a.median_score)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub significant: bool,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch's unequal-variance t-test. `t` is positive when the
/// mean of `a` exceeds that of `b`.
pub fn welch_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::UndefinedTest(format!(
            "each group needs at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::UndefinedTest("values must be finite".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let sa = va / a.len() as f64;
    let sb = vb / b.len() as f64;
    let se2 = sa + sb;
    if se2 <= 0.0 {
        return Err(Error::UndefinedTest("both groups have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::UndefinedTest(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTestResult {
        t,
        df,
        p,
        significant: p < alpha,
    })
}
