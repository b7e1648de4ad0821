//! Recipes, conversations and seed pools, plus their line-delimited file formats.
//!
//! Every corpus file holds one JSON object per line. Writers emit keys in a
//! fixed order so that saved datasets are byte-stable.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::validate::{self, ValidationPolicy};

/// Lowercase hex of a 64-bit content hash over the canonical JSON encoding
/// of `value`.
pub fn content_id<T: Serialize + ?Sized>(value: &T) -> String {
    let canonical = serde_json::to_vec(value).expect("canonical fields serialize");
    hash_hex(&canonical)
}

/// Lowercase hex of the leading 64 bits of the SHA-256 of `bytes`.
pub fn hash_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    format!("{:016x}", u64::from_be_bytes(word))
}

/// Stable 64-bit hash, used to derive per-job random seeds.
pub fn hash_u64<T: Serialize + ?Sized>(value: &T) -> u64 {
    let canonical = serde_json::to_vec(value).expect("canonical fields serialize");
    let digest = Sha256::digest(&canonical);
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(word)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Recipe {
    pub id: String,
    pub topic: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subtopic: Option<String>,
    pub participants: Vec<String>,
    pub background: Vec<String>,
    /// Per-entry generation count when the recipe is used as a topic-list entry.
    #[serde(rename = "count", skip_serializing_if = "Option::is_none")]
    pub target_count: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecipeRecord {
    id: Option<String>,
    topic: String,
    subtopic: Option<String>,
    participants: Vec<String>,
    #[serde(default)]
    background: Vec<String>,
    count: Option<usize>,
}

impl Recipe {
    /// Builds a recipe with a content-derived id.
    pub fn new(
        topic: impl Into<String>,
        subtopic: Option<String>,
        participants: Vec<String>,
        background: Vec<String>,
    ) -> Result<Self, String> {
        let record = RecipeRecord {
            id: None,
            topic: topic.into(),
            subtopic,
            participants,
            background,
            count: None,
        };
        Recipe::from_record(record, 0)
    }

    fn canonical_key(&self) -> impl Serialize + '_ {
        (
            "recipe",
            &self.topic,
            &self.subtopic,
            &self.participants,
            &self.background,
        )
    }

    fn from_record(record: RecipeRecord, occurrence: usize) -> Result<Self, String> {
        let mut recipe = Recipe {
            id: String::new(),
            topic: record.topic,
            subtopic: record.subtopic.filter(|s| !s.trim().is_empty()),
            participants: record.participants,
            background: record.background,
            target_count: record.count,
        };
        recipe.check()?;
        recipe.id = match record.id {
            Some(id) if !id.trim().is_empty() => id,
            Some(_) => return Err("`id` must be nonempty when present".into()),
            None if occurrence == 0 => content_id(&recipe.canonical_key()),
            None => content_id(&(recipe.canonical_key(), occurrence)),
        };
        Ok(recipe)
    }

    fn check(&self) -> Result<(), String> {
        if self.topic.trim().is_empty() {
            return Err("`topic` must be nonempty".into());
        }
        if !(2..=3).contains(&self.participants.len()) {
            return Err(format!(
                "`participants` must list 2 or 3 speakers, found {}",
                self.participants.len()
            ));
        }
        let mut seen = HashSet::new();
        for name in &self.participants {
            if name.trim().is_empty() {
                return Err("participant names must be nonempty".into());
            }
            if name.contains(':') || name.contains('\n') {
                return Err(format!("participant name `{name}` contains ':' or a line break"));
            }
            if !seen.insert(name.as_str()) {
                return Err(format!("participant `{name}` is listed twice"));
            }
        }
        if self.target_count == Some(0) {
            return Err("`count` must be positive".into());
        }
        Ok(())
    }

    /// The subtopic when set, otherwise the topic.
    pub fn focus(&self) -> &str {
        self.subtopic.as_deref().unwrap_or(&self.topic)
    }

    pub fn party_size(&self) -> usize {
        self.participants.len()
    }

    pub fn position_of(&self, speaker: &str) -> Option<usize> {
        self.participants.iter().position(|p| p == speaker)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Turn {
            speaker: speaker.into(),
            text: text.into(),
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.speaker.trim().is_empty() {
            return Err("speaker is empty".into());
        }
        if self.text.trim().is_empty() {
            return Err("text is empty".into());
        }
        if self.text.contains(['\n', '\r']) {
            return Err("text contains a line break".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Full,
    StartExcerpt,
    MiddleExcerpt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Seed,
    Generated,
    Imported,
}

/// Validation flag codes persisted in a conversation's `flags` array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Flag {
    Repetitive,
    OffTopic,
    Imbalanced,
    ExcessiveMonologue,
    BelowMinTurns,
}

impl Flag {
    pub const ALL: [Flag; 5] = [
        Flag::Repetitive,
        Flag::OffTopic,
        Flag::Imbalanced,
        Flag::ExcessiveMonologue,
        Flag::BelowMinTurns,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Flag::Repetitive => "REPETITIVE",
            Flag::OffTopic => "OFF_TOPIC",
            Flag::Imbalanced => "IMBALANCED",
            Flag::ExcessiveMonologue => "EXCESSIVE_MONOLOGUE",
            Flag::BelowMinTurns => "BELOW_MIN_TURNS",
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conversation {
    pub id: String,
    pub recipe_id: String,
    pub category: Category,
    pub provenance: Provenance,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
}

impl Conversation {
    /// Type-level invariants that hold independently of any recipe.
    pub fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.turns.is_empty() {
            return Err("conversation has no turns".into());
        }
        for (i, turn) in self.turns.iter().enumerate() {
            turn.check().map_err(|e| format!("turn {i}: {e}"))?;
        }
        Ok(())
    }

    /// Index of the first turn whose speaker is not in `recipe`'s roster.
    pub fn first_roster_violation(&self, recipe: &Recipe) -> Option<usize> {
        self.turns
            .iter()
            .position(|t| recipe.position_of(&t.speaker).is_none())
    }

    /// Speakers in order of first appearance.
    pub fn speakers(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in &self.turns {
            if !out.contains(&t.speaker.as_str()) {
                out.push(&t.speaker);
            }
        }
        out
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        for t in &self.turns {
            out.push_str(&t.speaker);
            out.push_str(": ");
            out.push_str(&t.text);
            out.push('\n');
        }
        out
    }
}

/// A seed conversation with the recipe it was written for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seed {
    pub recipe: Recipe,
    pub conversation: Conversation,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeedRecord {
    id: Option<String>,
    recipe: RecipeRecord,
    category: Option<Category>,
    turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SeedPool {
    pub seeds: Vec<Seed>,
}

impl SeedPool {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Seed> {
        self.seeds.iter().find(|s| s.conversation.id == id)
    }

    pub fn total_turns(&self) -> usize {
        self.seeds.iter().map(|s| s.conversation.turns.len()).sum()
    }

    pub fn conversations(&self) -> Vec<Conversation> {
        self.seeds.iter().map(|s| s.conversation.clone()).collect()
    }

    /// Party size shared by every seed, or `None` for a mixed or empty pool.
    pub fn party_size(&self) -> Option<usize> {
        let first = self.seeds.first()?.recipe.party_size();
        self.seeds
            .iter()
            .all(|s| s.recipe.party_size() == first)
            .then_some(first)
    }

    /// The ten handwritten two-speaker examples shipped with the crate.
    pub fn bundled_dyadic() -> SeedPool {
        parse_seed_pool(
            BUNDLED_SEEDS_DYADIC.as_bytes(),
            Path::new("<bundled:seeds_dyadic.jsonl>"),
            &seed_policy(),
        )
        .expect("bundled dyadic seeds are valid")
    }

    /// The ten handwritten three-speaker examples shipped with the crate.
    pub fn bundled_triadic() -> SeedPool {
        parse_seed_pool(
            BUNDLED_SEEDS_TRIADIC.as_bytes(),
            Path::new("<bundled:seeds_triadic.jsonl>"),
            &seed_policy(),
        )
        .expect("bundled triadic seeds are valid")
    }
}

pub const BUNDLED_SEEDS_DYADIC: &str = include_str!("../data/seeds_dyadic.jsonl");
pub const BUNDLED_SEEDS_TRIADIC: &str = include_str!("../data/seeds_triadic.jsonl");
pub const BUNDLED_TOPICS_DYADIC: &str = include_str!("../data/topics_dyadic.jsonl");
pub const BUNDLED_TOPICS_TRIADIC: &str = include_str!("../data/topics_triadic.jsonl");

/// Recipes shipped with the crate for the given party size.
pub fn bundled_topics(party_size: usize) -> Vec<Recipe> {
    let (text, name) = match party_size {
        3 => (BUNDLED_TOPICS_TRIADIC, "<bundled:topics_triadic.jsonl>"),
        _ => (BUNDLED_TOPICS_DYADIC, "<bundled:topics_dyadic.jsonl>"),
    };
    parse_recipes(text.as_bytes(), Path::new(name)).expect("bundled topics are valid")
}

fn seed_policy() -> ValidationPolicy {
    ValidationPolicy {
        topic_check: false,
        ..ValidationPolicy::default()
    }
}

fn read_lines<R: Read, T: DeserializeOwned>(reader: R, source: &Path) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, value));
    }
    Ok(out)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

pub fn load_recipes(path: impl AsRef<Path>) -> Result<Vec<Recipe>> {
    let path = path.as_ref();
    parse_recipes(open(path)?, path)
}

pub fn parse_recipes<R: Read>(reader: R, source: &Path) -> Result<Vec<Recipe>> {
    let records: Vec<(usize, RecipeRecord)> = read_lines(reader, source)?;
    let mut explicit: HashMap<String, usize> = HashMap::new();
    let mut occurrences: HashMap<String, usize> = HashMap::new();
    let mut recipes = Vec::with_capacity(records.len());
    for (line, record) in records {
        let explicit_id = record.id.clone();
        // identical implicit records get an occurrence suffix so ids stay distinct
        let occurrence = if explicit_id.is_none() {
            let key = content_id(&(
                &record.topic,
                &record.subtopic,
                &record.participants,
                &record.background,
            ));
            let n = occurrences.entry(key).or_insert(0);
            *n += 1;
            *n - 1
        } else {
            0
        };
        let recipe = Recipe::from_record(record, occurrence).map_err(|message| Error::Parse {
            path: source.to_path_buf(),
            line,
            message,
        })?;
        if explicit_id.is_some() && explicit.insert(recipe.id.clone(), line).is_some() {
            return Err(Error::DuplicateId {
                path: source.to_path_buf(),
                line,
                id: recipe.id,
            });
        }
        recipes.push(recipe);
    }
    let mut all = HashSet::new();
    for (recipe, line) in recipes.iter().zip(1..) {
        if !all.insert(recipe.id.as_str()) {
            return Err(Error::DuplicateId {
                path: source.to_path_buf(),
                line,
                id: recipe.id.clone(),
            });
        }
    }
    Ok(recipes)
}

pub fn load_seed_pool(path: impl AsRef<Path>) -> Result<SeedPool> {
    load_seed_pool_with(path, &seed_policy())
}

pub fn load_seed_pool_with(path: impl AsRef<Path>, policy: &ValidationPolicy) -> Result<SeedPool> {
    let path = path.as_ref();
    parse_seed_pool(open(path)?, path, policy)
}

/// Seeds are validated before inclusion: a speaker outside the roster or a
/// malformed turn rejects the whole load, while short seeds are only flagged.
pub fn parse_seed_pool<R: Read>(reader: R, source: &Path, policy: &ValidationPolicy) -> Result<SeedPool> {
    let records: Vec<(usize, SeedRecord)> = read_lines(reader, source)?;
    let mut ids = HashSet::new();
    let mut seeds = Vec::with_capacity(records.len());
    for (line, record) in records {
        let recipe = Recipe::from_record(record.recipe, 0).map_err(|message| Error::Parse {
            path: source.to_path_buf(),
            line,
            message: format!("recipe: {message}"),
        })?;
        let id = match record.id {
            Some(id) => id,
            None => content_id(&("seed", &recipe.id, &record.turns)),
        };
        if record.turns.is_empty() {
            return Err(Error::SeedValidation {
                seed_id: id,
                turn: 0,
                message: "seed has no turns".into(),
            });
        }
        for (i, turn) in record.turns.iter().enumerate() {
            turn.check().map_err(|message| Error::SeedValidation {
                seed_id: id.clone(),
                turn: i,
                message,
            })?;
            if recipe.position_of(&turn.speaker).is_none() {
                return Err(Error::SeedValidation {
                    seed_id: id.clone(),
                    turn: i,
                    message: format!(
                        "speaker `{}` is not in the roster [{}]",
                        turn.speaker,
                        recipe.participants.join(", ")
                    ),
                });
            }
        }
        if !ids.insert(id.clone()) {
            return Err(Error::DuplicateId {
                path: source.to_path_buf(),
                line,
                id,
            });
        }
        let mut conversation = Conversation {
            id,
            recipe_id: recipe.id.clone(),
            category: record.category.unwrap_or(Category::Full),
            provenance: Provenance::Seed,
            turns: record.turns,
            meta: BTreeMap::new(),
            flags: BTreeSet::new(),
        };
        conversation.flags = validate::seed_flags(&conversation, &recipe, policy);
        seeds.push(Seed {
            recipe,
            conversation,
        });
    }
    Ok(SeedPool { seeds })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let records: Vec<(usize, Conversation)> = read_lines(open(path)?, path)?;
    let mut out = Vec::with_capacity(records.len());
    for (line, conv) in records {
        conv.check().map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        })?;
        out.push(conv);
    }
    Ok(out)
}

fn encode_line(conv: &Conversation) -> Result<String> {
    conv.check().map_err(|message| Error::InvalidRecord {
        id: conv.id.clone(),
        message,
    })?;
    let mut line = serde_json::to_string(conv).expect("conversation serializes");
    line.push('\n');
    Ok(line)
}

/// Writes `records` to `path`, one per line, replacing any existing file.
pub fn save_dataset(records: &[Conversation], path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let lines = records.iter().map(encode_line).collect::<Result<Vec<_>>>()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in &lines {
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(lines.len())
}

/// Append-only dataset writer that flushes every record.
///
/// Opening an existing file recovers the records already present and cuts off
/// a torn final line left by an interrupted run.
pub struct DatasetAppender {
    path: PathBuf,
    file: File,
}

impl DatasetAppender {
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<Conversation>)> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut content = String::new();
        file.read_to_string(&mut content)
            .map_err(|e| Error::io(&path, e))?;

        let mut existing = Vec::new();
        let mut valid_len = 0usize;
        let mut needs_newline = false;
        for (idx, piece) in content.split_inclusive('\n').enumerate() {
            let complete = piece.ends_with('\n');
            let body = piece.trim_end_matches(['\n', '\r']);
            if !body.trim().is_empty() {
                match serde_json::from_str::<Conversation>(body) {
                    Ok(conv) => {
                        existing.push(conv);
                        needs_newline = !complete;
                    }
                    // torn tail from an interrupted write
                    Err(_) if !complete => break,
                    Err(e) => {
                        return Err(Error::Parse {
                            path,
                            line: idx + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
            valid_len += piece.len();
        }
        if valid_len < content.len() {
            log::warn!(
                "{}: dropping {} trailing bytes of an incomplete record",
                path.display(),
                content.len() - valid_len
            );
            file.set_len(valid_len as u64)
                .map_err(|e| Error::io(&path, e))?;
        }
        file.seek(SeekFrom::End(0)).map_err(|e| Error::io(&path, e))?;
        if needs_newline {
            file.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        file.seek(SeekFrom::End(0)).map_err(|e| Error::io(&path, e))?;
        Ok((DatasetAppender { path, file }, existing))
    }

    pub fn append(&mut self, conv: &Conversation) -> Result<()> {
        let line = encode_line(conv)?;
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
