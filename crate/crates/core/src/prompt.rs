//! Few-shot prompt assembly.
//!
//! A prompt is a sequence of example blocks (recipe header, then one
//! `Speaker: text` line per turn), each followed by a blank line, and ends
//! with the target recipe's header and a bare `Alice:` cue.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Recipe, Seed, SeedPool, Turn};
use crate::error::{Error, Result};

/// Speaker labels used in rendered text, by roster position.
pub const CANONICAL_NAMES: [&str; 3] = ["Alice", "Bob", "Claire"];

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_TURN_BUDGET: usize = 24;

const HEADER_PREFIX: &str = "The following is a conversation between";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    FixedK,
    TurnBudget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSpec {
    pub k: usize,
    pub rng_seed: u64,
    pub selection_mode: SelectionMode,
    pub turn_budget: Option<usize>,
    pub party_size: usize,
    /// Put the subtopic after "about" when the recipe has one.
    pub prefer_subtopic: bool,
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec {
            k: DEFAULT_K,
            rng_seed: 0,
            selection_mode: SelectionMode::FixedK,
            turn_budget: None,
            party_size: 2,
            prefer_subtopic: true,
        }
    }
}

impl PromptSpec {
    pub fn effective_turn_budget(&self) -> usize {
        self.turn_budget.unwrap_or(DEFAULT_TURN_BUDGET)
    }

    pub fn check(&self, pool: &SeedPool) -> Result<()> {
        if !(2..=3).contains(&self.party_size) {
            return Err(Error::Config(format!(
                "party size must be 2 or 3, got {}",
                self.party_size
            )));
        }
        match self.selection_mode {
            SelectionMode::FixedK => {
                if self.k == 0 {
                    return Err(Error::Config("k must be positive".into()));
                }
                if self.k > pool.len() {
                    return Err(Error::Config(format!(
                        "k = {} exceeds the seed pool size {}",
                        self.k,
                        pool.len()
                    )));
                }
            }
            SelectionMode::TurnBudget => {
                if self.turn_budget == Some(0) {
                    return Err(Error::Config("turn budget must be at least 1".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub example_ids: Vec<String>,
    pub target_recipe_id: String,
}

fn speaker_label(recipe: &Recipe, speaker: &str) -> String {
    match recipe.position_of(speaker) {
        Some(pos) if pos < CANONICAL_NAMES.len() => CANONICAL_NAMES[pos].to_string(),
        _ => speaker.to_string(),
    }
}

pub fn render_header(recipe: &Recipe) -> String {
    render_header_with(recipe, true)
}

pub fn render_header_with(recipe: &Recipe, prefer_subtopic: bool) -> String {
    let names = &CANONICAL_NAMES[..recipe.party_size().min(CANONICAL_NAMES.len())];
    let about = if prefer_subtopic {
        recipe.focus()
    } else {
        &recipe.topic
    };
    let mut out = format!("{HEADER_PREFIX} {} about {about}.", names.join(" and "));
    if recipe.background.is_empty() {
        out.push_str(&format!(" {} is interested in {}.", names[0], recipe.focus()));
    } else {
        for sentence in &recipe.background {
            out.push(' ');
            out.push_str(sentence.trim());
        }
    }
    out
}

/// `Speaker: text` lines, one per turn, each terminated by a newline.
pub fn render_turns(recipe: &Recipe, turns: &[Turn]) -> String {
    let mut out = String::new();
    for turn in turns {
        out.push_str(&speaker_label(recipe, &turn.speaker));
        out.push_str(": ");
        out.push_str(&turn.text);
        out.push('\n');
    }
    out
}

pub fn render_block(seed: &Seed, prefer_subtopic: bool) -> String {
    let mut out = render_header_with(&seed.recipe, prefer_subtopic);
    out.push('\n');
    out.push_str(&render_turns(&seed.recipe, &seed.conversation.turns));
    out
}

/// The label that opens generation: the canonical name of the first participant.
pub fn cue_speaker(_target: &Recipe) -> &'static str {
    CANONICAL_NAMES[0]
}

pub fn select_examples(pool: &SeedPool, spec: &PromptSpec) -> Result<Vec<String>> {
    select_examples_excluding(pool, spec, None)
}

/// Seeded draw without replacement. Seeds written for `exclude_recipe` are
/// never candidates.
pub fn select_examples_excluding(
    pool: &SeedPool,
    spec: &PromptSpec,
    exclude_recipe: Option<&str>,
) -> Result<Vec<String>> {
    spec.check(pool)?;
    let mut candidates: Vec<&Seed> = pool
        .seeds
        .iter()
        .filter(|s| Some(s.recipe.id.as_str()) != exclude_recipe)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    candidates.shuffle(&mut rng);

    match spec.selection_mode {
        SelectionMode::FixedK => {
            if spec.k > candidates.len() {
                return Err(Error::Config(format!(
                    "k = {} exceeds the {} eligible seeds",
                    spec.k,
                    candidates.len()
                )));
            }
            Ok(candidates[..spec.k]
                .iter()
                .map(|s| s.conversation.id.clone())
                .collect())
        }
        SelectionMode::TurnBudget => {
            let budget = spec.effective_turn_budget();
            let mut total = 0;
            let mut ids = Vec::new();
            for seed in candidates.iter() {
                if total >= budget {
                    break;
                }
                total += seed.conversation.turns.len();
                ids.push(seed.conversation.id.clone());
            }
            if total < budget {
                return Err(Error::BudgetUnreachable {
                    budget,
                    available: total,
                });
            }
            Ok(ids)
        }
    }
}

pub fn build_prompt(pool: &SeedPool, target: &Recipe, spec: &PromptSpec) -> Result<RenderedPrompt> {
    let ids = select_examples_excluding(pool, spec, Some(&target.id))?;
    render_prompt(pool, &ids, target, spec.prefer_subtopic)
}

/// Renders the prompt for an explicit list of example ids, as recorded in a
/// generated record's metadata.
pub fn render_prompt(
    pool: &SeedPool,
    example_ids: &[String],
    target: &Recipe,
    prefer_subtopic: bool,
) -> Result<RenderedPrompt> {
    let mut text = String::new();
    for id in example_ids {
        let seed = pool
            .get(id)
            .ok_or_else(|| Error::Config(format!("seed `{id}` is not in the pool")))?;
        if seed.recipe.id == target.id {
            return Err(Error::Config(format!(
                "seed `{id}` was written for the target recipe"
            )));
        }
        text.push_str(&render_block(seed, prefer_subtopic));
        text.push('\n');
    }
    text.push_str(&render_header_with(target, prefer_subtopic));
    text.push('\n');
    text.push_str(cue_speaker(target));
    text.push(':');
    Ok(RenderedPrompt {
        text,
        example_ids: example_ids.to_vec(),
        target_recipe_id: target.id.clone(),
    })
}
