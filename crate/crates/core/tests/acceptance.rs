//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use places::backend::{BackendConfig, Generator, MockBackend, MockEntry, FinishReason};
use places::corpus::{
    bundled_topics, save_dataset, Category, Conversation, Provenance, Recipe, SeedPool, Turn, BUNDLED_SEEDS_DYADIC,
};
use places::eval::{aggregate_ratings, load_ratings, mean_by_dimension, sample_excerpt, welch_t_test, Dimension, RatingRecord};
use places::metrics::{distinct_n, StatsOptions};
use places::parser::{parse_completion, parse_lines};
use places::pipeline::{rebuild_prompt, report, synth, PipelineConfig, SynthOptions};
use places::prompt::{build_prompt, render_header, render_turns, PromptSpec};

type Outcome = Result<String, String>;

// negating the whole condition makes a NaN comparison fail the check
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn conv(id: &str, recipe_id: &str, turns: Vec<Turn>) -> Conversation {
    Conversation {
        id: id.into(),
        recipe_id: recipe_id.into(),
        category: Category::Full,
        provenance: Provenance::Imported,
        turns,
        meta: BTreeMap::new(),
        flags: BTreeSet::new(),
    }
}

fn seed_reproduction() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("seeds.jsonl");
    save_dataset(&SeedPool::bundled_dyadic().conversations(), &path).map_err(|e| e.to_string())?;
    let r = report(&path, &StatsOptions::default(), None).map_err(|e| e.to_string())?.metrics;
    ensure!(r.num_conversations == 10, "expected 10 conversations, got {}", r.num_conversations);
    ensure!(
        r.turns_per_conversation.mean == 8.10,
        "turns/conversation {} != 8.10",
        r.turns_per_conversation.mean
    );
    ensure!((r.words_per_turn - 11.00).abs() <= 0.5, "words/turn {} outside 11.00 ± 0.5", r.words_per_turn);
    Ok(format!(
        "turns/conversation = {:.2}, words/turn = {:.3}",
        r.turns_per_conversation.mean, r.words_per_turn
    ))
}

/// Brute force over joined strings; shares nothing with the library except
/// the input.
fn distinct_oracle(corpus: &[Vec<Vec<&str>>], n: usize) -> Option<f64> {
    let mut seen: HashSet<String> = HashSet::new();
    let mut total = 0usize;
    for conversation in corpus {
        for turn in conversation {
            let mut i = 0;
            while i + n <= turn.len() {
                seen.insert(turn[i..i + n].join("\u{1}"));
                total += 1;
                i += 1;
            }
        }
    }
    if total == 0 {
        None
    } else {
        Some(seen.len() as f64 / total as f64)
    }
}

fn distinct_oracle_equivalence() -> Outcome {
    const VOCAB: [&str; 20] = [
        "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p", "q", "r", "s", "t",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for case in 0..100 {
        let vocab = rng.random_range(1..=VOCAB.len());
        let n_convs = rng.random_range(1..=5);
        let mut budget = 50usize;
        let mut raw: Vec<Vec<Vec<&str>>> = Vec::new();
        for _ in 0..n_convs {
            let turns = rng.random_range(1..=10).min(budget);
            budget -= turns;
            raw.push(
                (0..turns)
                    .map(|_| (0..rng.random_range(0..=8)).map(|_| VOCAB[rng.random_range(0..vocab)]).collect())
                    .collect(),
            );
            if budget == 0 {
                break;
            }
        }
        let corpus: Vec<Conversation> = raw
            .iter()
            .enumerate()
            .map(|(i, turns)| {
                conv(
                    &format!("c{i}"),
                    "r",
                    turns
                        .iter()
                        .filter(|t| !t.is_empty())
                        .map(|t| Turn::new("Alice", t.join(" ")))
                        .collect(),
                )
            })
            .collect();
        for n in 1..=4 {
            let got = distinct_n(&corpus, n).ok();
            let want = distinct_oracle(&raw, n);
            ensure!(got == want, "corpus {case}, n={n}: library {got:?} vs oracle {want:?}");
            checked += 1;
        }
    }
    Ok(format!("{checked} (corpus, n) pairs identical"))
}

fn prompt_golden() -> Outcome {
    let pool = SeedPool::bundled_dyadic();
    let target = Recipe::new(
        "pets",
        None,
        vec!["Alice".into(), "Bob".into()],
        vec!["Alice love cats.".into(), "Bob is more of a dog person.".into()],
    )
    .map_err(|e| e.to_string())?;
    let spec = PromptSpec {
        rng_seed: 2023,
        ..PromptSpec::default()
    };
    let p = build_prompt(&pool, &target, &spec).map_err(|e| e.to_string())?;
    let golden = fs::read_to_string(fixture("pets_prompt.txt")).map_err(|e| e.to_string())?;
    ensure!(p.text == golden, "prompt differs from the golden file");
    ensure!(
        p.text.ends_with(
            "The following is a conversation between Alice and Bob about pets. Alice love cats. Bob is more of a dog person.\nAlice:"
        ),
        "prompt does not end with the pets header and cue"
    );

    // Independent rebuild straight from the raw seed file for the chosen ids.
    let mut expected = String::new();
    for id in &p.example_ids {
        let seed = pool.get(id).ok_or("selected id missing from pool")?;
        let raw: serde_json::Value = BUNDLED_SEEDS_DYADIC
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).expect("seed line"))
            .find(|v| v["recipe"]["topic"] == seed.recipe.topic.as_str() && v["turns"][0]["text"] == seed.conversation.turns[0].text.as_str())
            .ok_or("seed not found in raw file")?;
        let bg: Vec<&str> = raw["recipe"]["background"].as_array().unwrap().iter().map(|s| s.as_str().unwrap()).collect();
        expected.push_str(&format!(
            "The following is a conversation between Alice and Bob about {}. {}\n",
            raw["recipe"]["topic"].as_str().unwrap(),
            bg.join(" ")
        ));
        for t in raw["turns"].as_array().unwrap() {
            expected.push_str(&format!("{}: {}\n", t["speaker"].as_str().unwrap(), t["text"].as_str().unwrap()));
        }
        expected.push('\n');
    }
    expected.push_str("The following is a conversation between Alice and Bob about pets. Alice love cats. Bob is more of a dog person.\nAlice:");
    ensure!(p.text == expected, "prompt differs from the hand-assembled rebuild");
    Ok(format!("{} bytes, examples {:?}", p.text.len(), p.example_ids))
}

const WORDS: [&str; 24] = [
    "hello", "pizza", "really?", "I", "love", "dogs!", "we", "went", "hiking,", "yesterday.", "that's", "great",
    "what", "about", "you?", "cats", "are", "fun", "oh", "wow", "Paris", "note:", "3:30", "well—sure",
];
const NAMES: [&str; 6] = ["Alice", "Bob", "Claire", "Dana", "Eve", "Speaker 1"];

fn random_conversation(rng: &mut ChaCha8Rng) -> (Recipe, Vec<Turn>) {
    let party = rng.random_range(2..=3);
    let mut names: Vec<String> = NAMES.iter().map(|s| s.to_string()).collect();
    for i in (1..names.len()).rev() {
        names.swap(i, rng.random_range(0..=i));
    }
    names.truncate(party);
    let recipe = Recipe::new("topic", None, names.clone(), vec![]).expect("valid recipe");
    let n = rng.random_range(1..=15);
    let turns = (0..n)
        .map(|_| {
            let speaker = names[rng.random_range(0..party)].clone();
            let len = rng.random_range(1..=12);
            let text: Vec<&str> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            Turn::new(speaker, text.join(" "))
        })
        .collect();
    (recipe, turns)
}

fn parser_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut via_completion = 0;
    for i in 0..1000 {
        let (recipe, turns) = random_conversation(&mut rng);
        let rendered = render_turns(&recipe, &turns);
        let parsed = parse_lines(&rendered, &recipe);
        ensure!(parsed == turns, "case {i}: parsed turns differ from the source");
        ensure!(render_turns(&recipe, &parsed) == rendered, "case {i}: re-render differs");
        if turns[0].speaker == recipe.participants[0] {
            let completion = rendered.strip_prefix("Alice:").expect("first label is Alice");
            let result = parse_completion(completion, &recipe, "Alice", false);
            let conv = result.conversation.ok_or(format!("case {i}: completion discarded"))?;
            ensure!(render_turns(&recipe, &conv.turns) == rendered, "case {i}: completion round trip differs");
            via_completion += 1;
        }
    }
    Ok(format!("1000 conversations byte-identical ({via_completion} also via the completion path)"))
}

fn excerpt_uniformity() -> Outcome {
    let source = conv(
        "long",
        "r",
        (0..100).map(|i| Turn::new(if i % 2 == 0 { "Alice" } else { "Bob" }, format!("turn {i}"))).collect(),
    );
    let mut counts = [0usize; 13];
    for seed in 0..10_000u64 {
        let e = sample_excerpt(&source, seed, 8, 12).map_err(|e| e.to_string())?;
        let len = e.turns.len();
        ensure!((8..=12).contains(&len), "seed {seed}: length {len}");
        let start: usize = e.turns[0].text["turn ".len()..].parse().unwrap();
        ensure!(e.turns[..] == source.turns[start..start + len], "seed {seed}: excerpt is not contiguous");
        counts[len] += 1;
    }
    let freqs: Vec<f64> = counts[8..].iter().map(|&c| c as f64 / 10_000.0).collect();
    for (i, f) in freqs.iter().enumerate() {
        ensure!((f - 0.2).abs() <= 0.02, "length {} frequency {f}", i + 8);
    }
    Ok(format!("length frequencies {freqs:?}"))
}

fn median_aggregation() -> Outcome {
    let rec = |r: &str, s| RatingRecord {
        conversation_id: "x".into(),
        rater_id: r.into(),
        dimension: Dimension::Natural,
        score: s,
    };
    let odd = aggregate_ratings(&[rec("a", 3), rec("b", 4), rec("c", 5)]).map_err(|e| e.to_string())?;
    ensure!(odd[0].median_score == 4.0, "{{3,4,5}} -> {}", odd[0].median_score);
    let even = aggregate_ratings(&[rec("a", 4), rec("b", 5)]).map_err(|e| e.to_string())?;
    ensure!(even[0].median_score == 4.5, "{{4,5}} -> {}", even[0].median_score);

    let records = load_ratings(fixture("ratings_200x3.jsonl")).map_err(|e| e.to_string())?;
    let aggregated = aggregate_ratings(&records).map_err(|e| e.to_string())?;
    let oracle: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fixture("ratings_200x3_oracle.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure!(
        aggregated.len() as u64 == oracle["groups"].as_u64().unwrap(),
        "{} groups vs oracle {}",
        aggregated.len(),
        oracle["groups"]
    );
    ensure!(aggregated.iter().all(|a| a.n_raters == 3), "every item should have 3 raters");
    let means = mean_by_dimension(&aggregated);
    for (dim, want) in oracle["mean_of_medians"].as_object().unwrap() {
        let d: Dimension = dim.parse().map_err(|e: places::Error| e.to_string())?;
        let got = means[&d];
        ensure!((got - want.as_f64().unwrap()).abs() < 1e-12, "{dim}: {got} vs oracle {want}");
    }
    Ok(format!("{} groups, means {:?}", aggregated.len(), means.values().collect::<Vec<_>>()))
}

fn t_test_oracle() -> Outcome {
    let text = fs::read_to_string(fixture("welch_pairs.jsonl")).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let nums = |k: &str| -> Vec<f64> { v[k].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
        let r = welch_t_test(&nums("a"), &nums("b"), 0.05).map_err(|e| format!("pair {i}: {e}"))?;
        let want = v["p"].as_f64().unwrap();
        let diff = (r.p - want).abs();
        ensure!(diff <= 1e-6, "pair {i}: p {} vs reference {want}", r.p);
        ensure!((r.t - v["t"].as_f64().unwrap()).abs() <= 1e-9, "pair {i}: t {} vs {}", r.t, v["t"]);
        worst = worst.max(diff);
        pairs += 1;
    }
    ensure!(pairs == 20, "expected 20 fixture pairs, found {pairs}");
    let same = welch_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 0.05).map_err(|e| e.to_string())?;
    ensure!(same.p == 1.0 && !same.significant, "identical groups gave p = {}", same.p);
    Ok(format!("{pairs} pairs, max |Δp| = {worst:.2e}"))
}

const COMPLETIONS: [&str; 4] = [
    " Have you been up to anything fun lately?\nBob: I tried a new recipe for dinner.\nAlice: What did you make?\nBob: A spicy noodle soup. It turned out great.",
    " I finally finished that book you lent me.\nBob: Did you like the ending?\nAlice: It surprised me a lot.\nBob: Same here, I did not see it coming.\nAlice: Do you have another one to recommend?",
    " Are you going anywhere this summer?\nBob: Maybe the coast for a week.\nAlice: That sounds relaxing.\nBob: I hope so. Work has been busy.",
    " Did you catch the game last night?\nBob: Only the second half.\nAlice: The last minute was wild.\nBob: I could not believe that shot.\n\nThe following is a conversation between",
];

fn end_to_end_mock() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pool = SeedPool::bundled_dyadic();
    let recipes: Vec<Recipe> = bundled_topics(2).into_iter().take(5).collect();
    let entries: Vec<MockEntry> = COMPLETIONS
        .iter()
        .map(|t| MockEntry {
            pattern: "*".into(),
            text: t.to_string(),
            fail_times: 1,
            fail_status: 503,
            finish_reason: FinishReason::Stop,
        })
        .collect();
    let make = || -> Result<(Arc<MockBackend>, Generator), String> {
        let mock = Arc::new(
            MockBackend::new(entries.clone())
                .map_err(|e| e.to_string())?
                .with_latency(Duration::from_millis(15)),
        );
        let backend = BackendConfig {
            max_parallel: 2,
            backoff_base_ms: 1,
            backoff_cap_ms: 2,
            ..BackendConfig::default()
        };
        let g = Generator::new(Box::new(mock.clone()), backend).map_err(|e| e.to_string())?;
        Ok((mock, g))
    };
    let config = |out: &Path| PipelineConfig {
        output: out.to_path_buf(),
        target_count: 2,
        rng_seed: 9,
        ..PipelineConfig::default()
    };

    let full = dir.path().join("full.jsonl");
    let (mock, g) = make()?;
    let s = synth(&config(&full), &recipes, &pool, &g, &SynthOptions::default()).map_err(|e| e.to_string())?;
    ensure!(s.planned == 10 && s.accepted == 10, "planned {} accepted {}", s.planned, s.accepted);
    ensure!(mock.max_in_flight() <= 2, "{} requests in flight", mock.max_in_flight());
    ensure!(mock.max_in_flight() == 2, "parallelism was never exercised");
    let records = places::corpus::load_dataset(&full).map_err(|e| e.to_string())?;
    ensure!(records.len() == 10, "{} records", records.len());
    let ids: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    ensure!(ids.len() == 10, "duplicate ids in dataset");

    // Interrupted run, torn final write, then resume.
    let resumed = dir.path().join("resumed.jsonl");
    let (_, g) = make()?;
    let partial = synth(&config(&resumed), &recipes, &pool, &g, &SynthOptions { stop_after: Some(4) })
        .map_err(|e| e.to_string())?;
    ensure!(partial.interrupted && partial.accepted == 4, "interruption did not happen as planned");
    let mut bytes = fs::read(&resumed).map_err(|e| e.to_string())?;
    bytes.extend_from_slice(b"{\"id\":\"torn");
    fs::write(&resumed, bytes).map_err(|e| e.to_string())?;
    let (_, g) = make()?;
    let rest = synth(&config(&resumed), &recipes, &pool, &g, &SynthOptions::default()).map_err(|e| e.to_string())?;
    ensure!(rest.skipped_existing == 4 && rest.accepted == 6, "resume skipped {} wrote {}", rest.skipped_existing, rest.accepted);
    let a = fs::read(&full).map_err(|e| e.to_string())?;
    let b = fs::read(&resumed).map_err(|e| e.to_string())?;
    ensure!(a == b, "resumed dataset differs from the uninterrupted one");

    // Metadata rebuilds each prompt exactly.
    let by_id: HashMap<&str, &Recipe> = recipes.iter().map(|r| (r.id.as_str(), r)).collect();
    let served: HashSet<String> = mock.calls().into_iter().map(|c| c.prompt_hash).collect();
    for r in &records {
        let recipe = by_id[r.recipe_id.as_str()];
        let prompt = rebuild_prompt(&pool, recipe, r).map_err(|e| e.to_string())?;
        ensure!(
            served.contains(&places::backend::prompt_hash(&prompt)),
            "record {}: rebuilt prompt was never sent",
            r.id
        );
        ensure!(prompt.ends_with(&format!("{}\nAlice:", render_header(recipe))), "record {}: wrong target", r.id);
        for key in ["model", "top_p", "attempt", "example_ids"] {
            ensure!(r.meta.contains_key(key), "record {} lacks meta `{key}`", r.id);
        }
    }
    Ok(format!(
        "10 records, resume byte-identical, max in flight {}, {} prompts rebuilt",
        mock.max_in_flight(),
        records.len()
    ))
}

fn main() {
    type Criterion = (&'static str, Duration, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("1 seed-set reproduction", Duration::from_secs(1), seed_reproduction),
        ("2 distinct-n oracle equivalence", Duration::from_secs(5), distinct_oracle_equivalence),
        ("3 prompt golden", Duration::from_secs(1), prompt_golden),
        ("4 parser round trip", Duration::from_secs(5), parser_round_trip),
        ("5 excerpt uniformity", Duration::from_secs(5), excerpt_uniformity),
        ("6 median aggregation", Duration::from_secs(1), median_aggregation),
        ("7 t-test oracle", Duration::from_secs(1), t_test_oracle),
        ("8 end-to-end mock run", Duration::from_secs(10), end_to_end_mock),
    ];
    let mut failed = 0;
    println!("\nacceptance criteria");
    for (name, limit, run) in criteria {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > limit => Err(format!("took {elapsed:?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name}  ({elapsed:.2?})  {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}  ({elapsed:.2?})  {why}");
            }
        }
    }
    println!(
        "SKIP  9 live-backend smoke test  (needs a configured model endpoint; see README)"
    );
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed\n");
}
