//! End-to-end dataset production and reporting.
//!
//! Every generation job is identified by its recipe, replicate index and the
//! run seed. Each attempt of a job draws its own in-context examples from a
//! seed derived from the job id and attempt number, so a job's outcome does
//! not depend on scheduling, batching or earlier interruptions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::backend::{prompt_hash, BackendConfig, FinishReason, GenerationParams, Generator};
use crate::corpus::{content_id, hash_u64, load_dataset, Conversation, DatasetAppender, Flag, Recipe, SeedPool};
use crate::error::{Error, Result};
use crate::metrics::{corpus_stats, MetricsReport, StatsOptions};
use crate::parser::parse_completion;
use crate::prompt::{build_prompt, cue_speaker, render_prompt, PromptSpec};
use crate::validate::{validate, ValidationPolicy};

pub const DEFAULT_MAX_REGEN_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rng_seed: u64,
    /// Conversations per recipe entry unless the entry sets its own `count`.
    pub target_count: usize,
    /// Extra attempts after a discarded generation.
    pub max_regen_attempts: u32,
    pub output: PathBuf,
    pub report: Option<PathBuf>,
    /// Stamp records with their generation time. Off by default so that
    /// resumed runs stay byte-identical.
    pub timestamps: bool,
    pub prompt: PromptSpec,
    pub params: GenerationParams,
    pub backend: BackendConfig,
    pub policy: ValidationPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rng_seed: 0,
            target_count: 1,
            max_regen_attempts: DEFAULT_MAX_REGEN_ATTEMPTS,
            output: PathBuf::from("dataset.jsonl"),
            report: None,
            timestamps: false,
            prompt: PromptSpec::default(),
            params: GenerationParams::default(),
            backend: BackendConfig::default(),
            policy: ValidationPolicy::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that can be checked before the first request.
    pub fn check(&self, recipes: &[Recipe], pool: &SeedPool) -> Result<()> {
        if self.target_count == 0 {
            return Err(Error::Config("target_count must be positive".into()));
        }
        self.params.check()?;
        self.backend.check()?;
        self.policy.check()?;
        self.prompt.check(pool)?;
        let party = self.prompt.party_size;
        match pool.party_size() {
            Some(p) if p == party => {}
            Some(p) => {
                return Err(Error::Config(format!(
                    "seed pool holds {p}-party conversations but the prompt party size is {party}"
                )))
            }
            None => return Err(Error::Config("seed pool is empty or mixes party sizes".into())),
        }
        if let Some(r) = recipes.iter().find(|r| r.party_size() != party) {
            return Err(Error::Config(format!(
                "recipe `{}` has {} participants but the party size is {party}",
                r.id,
                r.party_size()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub id: String,
    pub recipe_index: usize,
    pub replicate: usize,
}

pub fn job_id(recipe: &Recipe, replicate: usize, rng_seed: u64) -> String {
    content_id(&("generated", &recipe.id, replicate, rng_seed))
}

/// Every planned generation, in output order.
pub fn plan(recipes: &[Recipe], config: &PipelineConfig) -> Vec<Job> {
    recipes
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            let count = r.target_count.unwrap_or(config.target_count);
            (0..count).map(move |rep| Job {
                id: job_id(r, rep, config.rng_seed),
                recipe_index: i,
                replicate: rep,
            })
        })
        .collect()
}

pub fn selection_seed(rng_seed: u64, job_id: &str, attempt: u32) -> u64 {
    hash_u64(&("select", rng_seed, job_id, attempt))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub planned: usize,
    pub skipped_existing: usize,
    pub accepted: usize,
    /// Jobs that used up every attempt without an accepted conversation.
    pub exhausted: usize,
    pub requests: usize,
    pub discards: BTreeMap<String, usize>,
    pub flags: BTreeMap<String, usize>,
    /// Accepted generations over requests made.
    pub acceptance_rate: f64,
    /// Share of accepted conversations not flagged off-topic.
    pub on_topic_rate: f64,
    pub interrupted: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SynthOptions {
    /// Stop after writing this many new records, as if the process died.
    pub stop_after: Option<usize>,
}

enum JobState {
    Pending { attempt: u32 },
    Accepted(Box<Conversation>),
    Exhausted,
}

fn record_meta(
    config: &PipelineConfig,
    job: &Job,
    attempt: u32,
    seed: u64,
    example_ids: &[String],
    prompt: &str,
    finish: FinishReason,
) -> BTreeMap<String, String> {
    let p = &config.params;
    let mut meta = BTreeMap::from([
        ("model".to_string(), p.model.clone()),
        ("top_p".to_string(), p.top_p.to_string()),
        ("temperature".to_string(), p.temperature.to_string()),
        ("max_tokens".to_string(), p.max_tokens.to_string()),
        ("attempt".to_string(), attempt.to_string()),
        ("example_ids".to_string(), example_ids.join(",")),
        ("prompt_hash".to_string(), prompt_hash(prompt)),
        ("selection_seed".to_string(), seed.to_string()),
        ("replicate".to_string(), job.replicate.to_string()),
        ("prefer_subtopic".to_string(), config.prompt.prefer_subtopic.to_string()),
        (
            "finish_reason".to_string(),
            match finish {
                FinishReason::Stop => "stop",
                FinishReason::Length => "length",
                FinishReason::Error => "error",
            }
            .to_string(),
        ),
    ]);
    if config.timestamps {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        meta.insert("generated_at".to_string(), secs.to_string());
    }
    meta
}

/// Generates, filters and appends conversations until every planned job is
/// accepted or out of attempts.
///
/// Records already present in the output file (by id) are skipped, so an
/// interrupted run can be restarted with the same configuration. A backend
/// failure aborts the run after writing every record that precedes the
/// failed job in plan order.
pub fn synth(
    config: &PipelineConfig,
    recipes: &[Recipe],
    pool: &SeedPool,
    generator: &Generator,
    options: &SynthOptions,
) -> Result<RunSummary> {
    config.check(recipes, pool)?;
    let jobs = plan(recipes, config);
    let mut summary = RunSummary {
        planned: jobs.len(),
        ..RunSummary::default()
    };

    let (mut writer, existing) = DatasetAppender::open(&config.output)?;
    let present: HashSet<String> = existing.iter().map(|c| c.id.clone()).collect();
    let todo: Vec<&Job> = jobs.iter().filter(|j| !present.contains(&j.id)).collect();
    summary.skipped_existing = jobs.len() - todo.len();
    log::info!(
        "{} planned, {} already in {}",
        summary.planned,
        summary.skipped_existing,
        config.output.display()
    );

    let chunk = generator.config().max_parallel * 4;
    let mut written = 0usize;
    for batch in todo.chunks(chunk) {
        let mut states: Vec<JobState> = batch.iter().map(|_| JobState::Pending { attempt: 1 }).collect();
        let mut failure: Option<(usize, Error)> = None;
        loop {
            let pending: Vec<(usize, u32)> = states
                .iter()
                .enumerate()
                .filter_map(|(i, s)| match s {
                    JobState::Pending { attempt } => Some((i, *attempt)),
                    _ => None,
                })
                .collect();
            if pending.is_empty() {
                break;
            }
            let mut prepared = Vec::with_capacity(pending.len());
            for &(i, attempt) in &pending {
                let job = batch[i];
                let recipe = &recipes[job.recipe_index];
                let seed = selection_seed(config.rng_seed, &job.id, attempt);
                let spec = PromptSpec {
                    rng_seed: seed,
                    ..config.prompt.clone()
                };
                prepared.push((i, attempt, seed, build_prompt(pool, recipe, &spec)?));
            }
            let requests: Vec<(String, GenerationParams)> = prepared
                .iter()
                .map(|(_, _, _, p)| (p.text.clone(), config.params.clone()))
                .collect();
            let results = generator.complete_batch_results(&requests);
            summary.requests += results.len();

            for ((i, attempt, seed, prompt), result) in prepared.into_iter().zip(results) {
                let job = batch[i];
                let recipe = &recipes[job.recipe_index];
                let completion = match result {
                    Ok(c) => c,
                    Err(e) => {
                        if failure.as_ref().is_none_or(|(f, _)| i < *f) {
                            failure = Some((i, e));
                        }
                        states[i] = JobState::Exhausted;
                        continue;
                    }
                };
                let truncated = completion.finish_reason == FinishReason::Length;
                let parsed = parse_completion(&completion.text, recipe, cue_speaker(recipe), truncated);
                let outcome = match parsed.conversation {
                    Some(conv) => validate(&conv, recipe, &config.policy),
                    None => parsed,
                };
                match outcome.conversation {
                    Some(mut conv) => {
                        conv.id = job.id.clone();
                        conv.meta = record_meta(
                            config,
                            job,
                            attempt,
                            seed,
                            &prompt.example_ids,
                            &prompt.text,
                            completion.finish_reason,
                        );
                        states[i] = JobState::Accepted(Box::new(conv));
                    }
                    None => {
                        let reason = outcome.discard_reason.expect("discarded result has a reason");
                        *summary.discards.entry(reason.as_str().to_string()).or_default() += 1;
                        log::debug!("job {} attempt {attempt} discarded: {}", job.id, reason.as_str());
                        states[i] = if attempt > config.max_regen_attempts {
                            JobState::Exhausted
                        } else {
                            JobState::Pending { attempt: attempt + 1 }
                        };
                    }
                }
            }
            if failure.is_some() {
                break;
            }
        }

        let limit = failure.as_ref().map_or(states.len(), |(f, _)| *f);
        for state in states.into_iter().take(limit) {
            match state {
                JobState::Accepted(conv) => {
                    if options.stop_after.is_some_and(|n| written >= n) {
                        summary.interrupted = true;
                        finish(&mut summary);
                        return Ok(summary);
                    }
                    writer.append(&conv)?;
                    written += 1;
                    summary.accepted += 1;
                    for flag in &conv.flags {
                        *summary.flags.entry(flag.code().to_string()).or_default() += 1;
                    }
                }
                JobState::Exhausted => summary.exhausted += 1,
                // only after a backend failure: keep the written records a plan-order prefix
                JobState::Pending { .. } => break,
            }
        }
        if let Some((_, e)) = failure {
            log::error!("aborting; rerun with the same configuration to resume");
            return Err(e);
        }
    }
    finish(&mut summary);
    Ok(summary)
}

fn finish(summary: &mut RunSummary) {
    summary.acceptance_rate = if summary.requests == 0 {
        0.0
    } else {
        summary.accepted as f64 / summary.requests as f64
    };
    let off = summary.flags.get(Flag::OffTopic.code()).copied().unwrap_or(0);
    summary.on_topic_rate = if summary.accepted == 0 {
        0.0
    } else {
        (summary.accepted - off) as f64 / summary.accepted as f64
    };
}

/// The prompt that produced a generated record, rebuilt from its metadata.
/// Fails when the rebuilt prompt's hash differs from the recorded one.
pub fn rebuild_prompt(pool: &SeedPool, recipe: &Recipe, record: &Conversation) -> Result<String> {
    let field = |key: &str| {
        record.meta.get(key).ok_or_else(|| Error::InvalidRecord {
            id: record.id.clone(),
            message: format!("meta lacks `{key}`"),
        })
    };
    let ids: Vec<String> = field("example_ids")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let prefer_subtopic = field("prefer_subtopic")? != "false";
    let prompt = render_prompt(pool, &ids, recipe, prefer_subtopic)?;
    let expected = field("prompt_hash")?;
    if &prompt_hash(&prompt.text) != expected {
        return Err(Error::InvalidRecord {
            id: record.id.clone(),
            message: "rebuilt prompt does not match the recorded hash".into(),
        });
    }
    Ok(prompt.text)
}

/// The first-attempt prompt of every planned job, without generating.
pub fn planned_prompts(config: &PipelineConfig, recipes: &[Recipe], pool: &SeedPool) -> Result<Vec<(Job, String)>> {
    config.check(recipes, pool)?;
    plan(recipes, config)
        .into_iter()
        .map(|job| {
            let spec = PromptSpec {
                rng_seed: selection_seed(config.rng_seed, &job.id, 1),
                ..config.prompt.clone()
            };
            let prompt = build_prompt(pool, &recipes[job.recipe_index], &spec)?;
            Ok((job, prompt.text))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub metrics: MetricsReport,
    pub flags: BTreeMap<String, usize>,
}

impl DatasetReport {
    pub fn to_table(&self) -> String {
        let mut out = self.metrics.to_table();
        out.push('\n');
        let rows: Vec<Vec<String>> = Flag::ALL
            .iter()
            .map(|f| vec![f.code().to_string(), self.flags.get(f.code()).copied().unwrap_or(0).to_string()])
            .collect();
        out.push_str(&crate::metrics::render_table(&["flag".to_string(), "records".to_string()], &rows));
        out
    }
}

pub fn dataset_report(records: &[Conversation], options: &StatsOptions) -> Result<DatasetReport> {
    let metrics = corpus_stats(records, options)?;
    let mut flags = BTreeMap::new();
    for r in records {
        for f in &r.flags {
            *flags.entry(f.code().to_string()).or_default() += 1;
        }
    }
    Ok(DatasetReport { metrics, flags })
}

/// Reports on a dataset file and, when `out` is given, writes the report as JSON.
pub fn report(dataset: impl AsRef<Path>, options: &StatsOptions, out: Option<&Path>) -> Result<DatasetReport> {
    let records = load_dataset(dataset)?;
    let report = dataset_report(&records, options)?;
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

pub fn load_report(path: impl AsRef<Path>) -> Result<DatasetReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Recipe lookup by id, for rebuilding prompts and rosters.
pub fn recipe_index(recipes: &[Recipe]) -> HashMap<String, Recipe> {
    recipes.iter().map(|r| (r.id.clone(), r.clone())).collect()
}
