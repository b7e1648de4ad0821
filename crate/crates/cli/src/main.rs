use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use places::backend::{Backend, Generator, MockBackend, OpenAiBackend};
use places::corpus::{
    bundled_topics, hash_u64, load_dataset, load_recipes, load_seed_pool, save_dataset, Recipe, SeedPool,
};
use places::eval::{
    aggregate_ratings, export_rating_tasks, load_ratings, mean_by_dimension, medians_for, sample_excerpt,
    welch_t_test, Dimension, DEFAULT_MAX_EXCERPT, DEFAULT_MIN_EXCERPT, DEFAULT_RATERS_PER_ITEM,
};
use places::metrics::{compare_reports, render_distinct_bars, render_table, StatsOptions, DISTINCT_ORDERS};
use places::pipeline::{self, planned_prompts, recipe_index, synth, PipelineConfig, SynthOptions};
use places::validate::{dedup, validate};
use places::Error;

#[derive(Parser)]
#[command(name = "places", version, about = "Few-shot synthetic conversation toolkit")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every subcommand; each overrides the config file.
#[derive(Args)]
struct Shared {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Speakers per conversation.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(2..=3))]
    party: Option<u8>,
    /// In-context examples per prompt.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long = "top-p", global = true)]
    top_p: Option<f64>,
    /// Requests in flight at once.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use a scripted mock backend instead of the HTTP endpoint.
    #[arg(long, global = true)]
    mock: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, filter and append conversations.
    Synth {
        /// Topic list; the bundled list for the party size when omitted.
        #[arg(long)]
        topics: Option<PathBuf>,
        /// Seed pool; the bundled handwritten seeds when omitted.
        #[arg(long)]
        seeds: Option<PathBuf>,
        /// Conversations per topic entry without its own count.
        #[arg(long)]
        count: Option<usize>,
        /// Only print the number of planned generations.
        #[arg(long)]
        plan: bool,
    },
    /// Corpus statistics; two datasets are compared side by side.
    #[command(alias = "stats")]
    Report {
        #[arg(required = true, num_args = 1..=2)]
        datasets: Vec<PathBuf>,
        #[arg(long)]
        per_speaker: bool,
        /// Recipes used to order speakers by roster position.
        #[arg(long)]
        recipes: Option<PathBuf>,
        /// Also draw Distinct-N bars.
        #[arg(long)]
        bars: bool,
    },
    /// Cut a contiguous excerpt from every conversation.
    Excerpt {
        dataset: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_EXCERPT)]
        min: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_EXCERPT)]
        max: usize,
    },
    /// Re-run acceptance rules and flags against the recipes.
    Validate {
        dataset: PathBuf,
        #[arg(long)]
        recipes: PathBuf,
    },
    /// Drop exact and near duplicates, keeping first occurrences.
    Dedup { dataset: PathBuf },
    /// Write one rating task per conversation.
    ExportEval {
        dataset: PathBuf,
        /// Comma-separated dimensions.
        #[arg(long, value_delimiter = ',', default_value = "natural,coherent,interesting,consistent,on_topic")]
        dimensions: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_RATERS_PER_ITEM)]
        raters: usize,
        #[arg(long)]
        recipes: Option<PathBuf>,
    },
    /// Median rating per conversation and dimension.
    Aggregate { ratings: PathBuf },
    /// Welch's t-test on per-conversation medians of two rating files.
    Ttest {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        dimension: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Print the first-attempt prompt of planned generations.
    DumpPrompts {
        #[arg(long)]
        topics: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::BackendUnavailable { .. } | Error::BackendRejected { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn config(shared: &Shared) -> places::Result<PipelineConfig> {
    let mut c = match &shared.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = shared.seed {
        c.rng_seed = seed;
    }
    if let Some(party) = shared.party {
        c.prompt.party_size = party as usize;
    }
    if let Some(k) = shared.k {
        c.prompt.k = k;
    }
    if let Some(p) = shared.top_p {
        c.params.top_p = p;
    }
    if let Some(n) = shared.parallel {
        c.backend.max_parallel = n;
    }
    if let Some(out) = &shared.out {
        c.output = out.clone();
    }
    c.backend.apply_env();
    Ok(c)
}

fn topics(path: Option<&Path>, party: usize) -> places::Result<Vec<Recipe>> {
    match path {
        Some(p) => load_recipes(p),
        None => Ok(bundled_topics(party)),
    }
}

fn seeds(path: Option<&Path>, party: usize) -> places::Result<SeedPool> {
    match path {
        Some(p) => load_seed_pool(p),
        None if party == 3 => Ok(SeedPool::bundled_triadic()),
        None => Ok(SeedPool::bundled_dyadic()),
    }
}

fn require_out(shared: &Shared) -> places::Result<&Path> {
    shared
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --out".into()))
}

fn run(cli: Cli) -> places::Result<()> {
    let shared = &cli.shared;
    match cli.command {
        Command::Synth {
            topics: topic_path,
            seeds: seed_path,
            count,
            plan,
        } => {
            let mut c = config(shared)?;
            if let Some(n) = count {
                c.target_count = n;
            }
            let party = c.prompt.party_size;
            let recipes = topics(topic_path.as_deref(), party)?;
            let pool = seeds(seed_path.as_deref(), party)?;
            c.check(&recipes, &pool)?;
            if plan {
                println!("{} planned generations", pipeline::plan(&recipes, &c).len());
                return Ok(());
            }
            let backend: Box<dyn Backend> = match &shared.mock {
                Some(script) => Box::new(MockBackend::load(script)?),
                None => Box::new(OpenAiBackend::new(&c.backend)),
            };
            let generator = Generator::new(backend, c.backend.clone())?;
            let summary = synth(&c, &recipes, &pool, &generator, &SynthOptions::default())?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            if let Some(path) = &c.report {
                let r = pipeline::report(&c.output, &StatsOptions::default(), Some(path))?;
                print!("{}", r.to_table());
            }
        }
        Command::Report {
            datasets,
            per_speaker,
            recipes,
            bars,
        } => {
            let rosters = match &recipes {
                Some(p) => load_recipes(p)?
                    .into_iter()
                    .map(|r| (r.id, r.participants))
                    .collect(),
                None => HashMap::new(),
            };
            let mut reports = Vec::new();
            for (i, path) in datasets.iter().enumerate() {
                let options = StatsOptions {
                    corpus_id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                    per_speaker,
                    rosters: rosters.clone(),
                    ..StatsOptions::default()
                };
                let out = match (&shared.out, datasets.len()) {
                    (Some(o), 1) => o.clone(),
                    (Some(o), _) => o.with_extension(format!("{i}.json")),
                    (None, _) => path.with_extension("report.json"),
                };
                reports.push(pipeline::report(path, &options, Some(&out))?);
            }
            match reports.as_slice() {
                [one] => print!("{}", one.to_table()),
                [a, b] => print!("{}", compare_reports(&a.metrics, &b.metrics)?.to_table()),
                _ => unreachable!("clap bounds the dataset count"),
            }
            if bars {
                let metrics: Vec<_> = reports.iter().map(|r| &r.metrics).collect();
                println!();
                print!("{}", render_distinct_bars(&metrics, &DISTINCT_ORDERS, 40)?);
            }
        }
        Command::Excerpt { dataset, min, max } => {
            let out = require_out(shared)?;
            let seed = config(shared)?.rng_seed;
            let records = load_dataset(&dataset)?;
            let excerpts = records
                .iter()
                .map(|r| sample_excerpt(r, hash_u64(&(seed, &r.id)), min, max))
                .collect::<places::Result<Vec<_>>>()?;
            let n = save_dataset(&excerpts, out)?;
            println!("{n} excerpts written to {}", out.display());
        }
        Command::Validate { dataset, recipes } => {
            let policy = config(shared)?.policy;
            policy.check()?;
            let index = recipe_index(&load_recipes(&recipes)?);
            let mut kept = Vec::new();
            let mut discards: BTreeMap<String, usize> = BTreeMap::new();
            let mut flags: BTreeMap<String, usize> = BTreeMap::new();
            let records = load_dataset(&dataset)?;
            for r in &records {
                let recipe = index.get(&r.recipe_id).ok_or_else(|| Error::InvalidRecord {
                    id: r.id.clone(),
                    message: format!("recipe `{}` is not in {}", r.recipe_id, recipes.display()),
                })?;
                let outcome = validate(r, recipe, &policy);
                for f in &outcome.flags {
                    *flags.entry(f.code().to_string()).or_default() += 1;
                }
                match (outcome.conversation, outcome.discard_reason) {
                    (Some(c), _) => kept.push(c),
                    (None, Some(reason)) => *discards.entry(reason.as_str().to_string()).or_default() += 1,
                    (None, None) => unreachable!("a result is accepted or has a reason"),
                }
            }
            let mut rows = vec![
                vec!["records".to_string(), records.len().to_string()],
                vec!["accepted".to_string(), kept.len().to_string()],
            ];
            rows.extend(discards.iter().map(|(k, v)| vec![format!("discarded: {k}"), v.to_string()]));
            rows.extend(flags.iter().map(|(k, v)| vec![format!("flagged: {k}"), v.to_string()]));
            print!("{}", render_table(&["outcome".to_string(), "count".to_string()], &rows));
            if let Some(out) = &shared.out {
                save_dataset(&kept, out)?;
            }
        }
        Command::Dedup { dataset } => {
            let out = require_out(shared)?;
            let policy = config(shared)?.policy;
            policy.check()?;
            let outcome = dedup(load_dataset(&dataset)?, &policy);
            save_dataset(&outcome.kept, out)?;
            println!("kept {}, dropped {}", outcome.kept.len(), outcome.dropped.len());
        }
        Command::ExportEval {
            dataset,
            dimensions,
            raters,
            recipes,
        } => {
            let out = require_out(shared)?;
            let dims = dimensions
                .iter()
                .map(|d| d.trim().parse::<Dimension>())
                .collect::<places::Result<Vec<_>>>()?;
            let index = match &recipes {
                Some(p) => recipe_index(&load_recipes(p)?),
                None => HashMap::new(),
            };
            let n = export_rating_tasks(&load_dataset(&dataset)?, &index, &dims, raters, out)?;
            println!("{n} rating tasks written to {}", out.display());
        }
        Command::Aggregate { ratings } => {
            let aggregated = aggregate_ratings(&load_ratings(&ratings)?)?;
            if let Some(out) = &shared.out {
                let lines: String = aggregated
                    .iter()
                    .map(|a| serde_json::to_string(a).expect("rating serializes") + "\n")
                    .collect();
                std::fs::write(out, lines).map_err(|e| Error::Io {
                    path: out.clone(),
                    source: e,
                })?;
            }
            let rows: Vec<Vec<String>> = mean_by_dimension(&aggregated)
                .into_iter()
                .map(|(d, m)| {
                    let n = aggregated.iter().filter(|a| a.dimension == d).count();
                    vec![d.to_string(), n.to_string(), format!("{m:.3}")]
                })
                .collect();
            let headers = ["dimension", "conversations", "mean median"].map(String::from);
            print!("{}", render_table(&headers, &rows));
        }
        Command::Ttest { a, b, dimension, alpha } => {
            let d: Dimension = dimension.parse()?;
            let ma = medians_for(&aggregate_ratings(&load_ratings(&a)?)?, d);
            let mb = medians_for(&aggregate_ratings(&load_ratings(&b)?)?, d);
            let r = welch_t_test(&ma, &mb, alpha)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("result serializes"));
        }
        Command::DumpPrompts {
            topics: topic_path,
            seeds: seed_path,
            limit,
        } => {
            let c = config(shared)?;
            let party = c.prompt.party_size;
            let recipes = topics(topic_path.as_deref(), party)?;
            let pool = seeds(seed_path.as_deref(), party)?;
            let prompts = planned_prompts(&c, &recipes, &pool)?;
            for (job, text) in prompts.iter().take(limit.unwrap_or(usize::MAX)) {
                println!("### job {} (recipe {})\n{text}\n", job.id, recipes[job.recipe_index].id);
            }
        }
    }
    Ok(())
}
