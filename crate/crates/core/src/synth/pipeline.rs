use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::parse::{parse_generation, parse_negatives, parse_string_list};
use super::prompts::{brainstorm_prompt, render_augment_prompt, render_prompt, PromptPlaceholders, NUM_WORDS};
use super::retry::{call_with_retry, RetryPolicy};
use super::{ChatBackend, ChatRequest, SynthError};
use crate::curriculum::DEFAULT_NUM_LEVELS;
use crate::seeding::{derive_seed, rng_for};
use crate::triplet::{Source, TaskCategory, TaskSpec, TrainingTriplet};

/// Relative share of each task category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoryMix {
    pub short_long: f64,
    pub long_short: f64,
    pub long_long: f64,
    pub short_short: f64,
    pub sts: f64,
}

impl Default for CategoryMix {
    fn default() -> Self {
        Self {
            short_long: 0.30,
            long_short: 0.25,
            long_long: 0.10,
            short_short: 0.10,
            sts: 0.25,
        }
    }
}

impl CategoryMix {
    pub fn weight(&self, c: TaskCategory) -> f64 {
        match c {
            TaskCategory::ShortLong => self.short_long,
            TaskCategory::LongShort => self.long_short,
            TaskCategory::LongLong => self.long_long,
            TaskCategory::ShortShort => self.short_short,
            TaskCategory::Sts => self.sts,
        }
    }

    /// Largest-remainder allocation of `n` items.
    pub fn allocate(&self, n: usize) -> Result<Vec<(TaskCategory, usize)>, SynthError> {
        let weights: Vec<f64> = TaskCategory::ALL.iter().map(|&c| self.weight(c)).collect();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SynthError::Config(
                "category weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(SynthError::Config("all category weights are zero".into()));
        }
        let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(a.cmp(&b))
        });
        let missing = n - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        Ok(TaskCategory::ALL
            .into_iter()
            .zip(counts)
            .filter(|(_, n)| *n > 0)
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_triplets: usize,
    pub num_levels: usize,
    pub seed: u64,
    pub language: String,
    pub tasks_per_category: usize,
    pub category_mix: CategoryMix,
    /// Choices for the `num_words` placeholder.
    pub num_words: Vec<u32>,
    pub temperature: f64,
    pub max_parallel: usize,
    /// Extra generation rounds used to replace rejected records.
    pub top_up_rounds: usize,
    pub retry: RetryPolicy,
    /// Task description attached to augmented retrieval pairs.
    pub augment_task: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_triplets: 200,
            num_levels: DEFAULT_NUM_LEVELS,
            seed: 0,
            language: "English".into(),
            tasks_per_category: 20,
            category_mix: CategoryMix::default(),
            num_words: NUM_WORDS.to_vec(),
            temperature: 1.0,
            max_parallel: 4,
            top_up_rounds: 2,
            retry: RetryPolicy::default(),
            augment_task: "Given a web search query, retrieve relevant passages that answer the query".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let mut bad = Vec::new();
        if self.num_triplets == 0 {
            bad.push("num_triplets must be at least 1".to_string());
        }
        if self.num_levels == 0 {
            bad.push("num_levels must be at least 1".into());
        }
        if self.tasks_per_category == 0 {
            bad.push("tasks_per_category must be at least 1".into());
        }
        if self.max_parallel == 0 {
            bad.push("max_parallel must be at least 1".into());
        }
        if self.num_words.is_empty() || self.num_words.iter().any(|w| !NUM_WORDS.contains(w)) {
            bad.push(format!("num_words must be a non-empty subset of {NUM_WORDS:?}"));
        }
        if self.language.trim().is_empty() {
            bad.push("language is empty".into());
        }
        if bad.is_empty() {
            self.category_mix.allocate(1).map(|_| ())
        } else {
            Err(SynthError::Config(bad.join("; ")))
        }
    }

    pub fn context<'a>(&'a self, backend: &'a dyn ChatBackend, sleep: &'a (dyn Fn(Duration) + Sync)) -> GenContext<'a> {
        GenContext {
            backend,
            retry: &self.retry,
            sleep,
            num_levels: self.num_levels,
            temperature: self.temperature,
            language: &self.language,
            word_choices: &self.num_words,
        }
    }
}

/// Everything a single generation call needs.
#[derive(Clone, Copy)]
pub struct GenContext<'a> {
    pub backend: &'a dyn ChatBackend,
    pub retry: &'a RetryPolicy,
    pub sleep: &'a (dyn Fn(Duration) + Sync),
    pub num_levels: usize,
    pub temperature: f64,
    pub language: &'a str,
    pub word_choices: &'a [u32],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub triplet: TrainingTriplet,
    /// Transport retries across all calls.
    pub retries: u32,
    /// Whether the first reply was rejected and regenerated.
    pub regenerated: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthReport {
    pub requested: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<String, usize>,
    pub regenerated: usize,
    pub transport_retries: u64,
    pub tasks: BTreeMap<String, usize>,
    pub accepted_by_category: BTreeMap<String, usize>,
}

impl SynthReport {
    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }
}

/// Stage 1: up to `n` distinct task descriptions for `category`.
pub fn brainstorm_tasks(
    category: TaskCategory,
    n: usize,
    ctx: &GenContext,
    seed: u64,
) -> Result<Vec<TaskSpec>, SynthError> {
    if n == 0 {
        return Err(SynthError::Precondition("n must be at least 1".into()));
    }
    let request = ChatRequest::user(
        brainstorm_prompt(category),
        ctx.temperature,
        derive_seed(seed, &format!("brainstorm/{}", category.name())),
    );
    let reply = call_with_retry(ctx.backend, &request, ctx.retry, ctx.sleep)?.value;
    let items = parse_string_list(&reply).map_err(|detail| SynthError::Format {
        detail,
        raw: reply.clone(),
    })?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for item in items {
        let text = item.trim();
        let Ok(spec) = TaskSpec::new(category, text) else {
            continue;
        };
        if seen.insert(text.to_lowercase()) {
            out.push(spec);
        }
        if out.len() == n {
            break;
        }
    }
    Ok(out)
}

/// Stage 2: one triplet for `task`. A rejected reply is regenerated once
/// with fresh placeholders before the rejection is returned.
pub fn generate_triplet(
    task: &TaskSpec,
    ph: &PromptPlaceholders,
    ctx: &GenContext,
    seed: u64,
) -> Result<Generated, SynthError> {
    let mut placeholders = ph.clone();
    let mut retries = 0;
    for attempt in 0..2u32 {
        let prompt = render_prompt(task, &placeholders, ctx.num_levels);
        let request = ChatRequest::user(
            prompt,
            ctx.temperature,
            derive_seed(seed, &format!("attempt/{attempt}")),
        );
        let reply = call_with_retry(ctx.backend, &request, ctx.retry, ctx.sleep)?;
        retries += reply.retries;
        match parse_generation(&reply.value, task, ctx.num_levels) {
            Ok(triplet) => {
                return Ok(Generated {
                    triplet,
                    retries,
                    regenerated: attempt > 0,
                })
            }
            Err(e) if attempt == 1 => return Err(e.into()),
            Err(_) => {
                placeholders =
                    PromptPlaceholders::sample(&mut rng_for(seed, "resample"), ctx.language, ctx.word_choices);
            }
        }
    }
    unreachable!("loop returns on the second attempt")
}

/// Asks only for ordered negatives for an existing pair.
pub fn augment_retrieval_pair(
    query: &str,
    positive: &str,
    task: &TaskSpec,
    ctx: &GenContext,
    seed: u64,
) -> Result<Generated, SynthError> {
    if query.trim().is_empty() || positive.trim().is_empty() {
        return Err(SynthError::Precondition("query and positive must be non-empty".into()));
    }
    let ph = PromptPlaceholders::sample(&mut rng_for(seed, "placeholders"), ctx.language, ctx.word_choices);
    let prompt = render_augment_prompt(query, positive, &ph, ctx.num_levels);
    let mut retries = 0;
    for attempt in 0..2u32 {
        let request = ChatRequest::user(
            prompt.clone(),
            ctx.temperature,
            derive_seed(seed, &format!("attempt/{attempt}")),
        );
        let reply = call_with_retry(ctx.backend, &request, ctx.retry, ctx.sleep)?;
        retries += reply.retries;
        let result = parse_negatives(&reply.value, ctx.num_levels).and_then(|negatives| {
            let t = TrainingTriplet {
                query: query.to_string(),
                positive: positive.to_string(),
                negatives,
                source: Source::RetrievalAugmented,
                task: task.clone(),
            };
            t.validate(ctx.num_levels)?;
            if t.negatives.iter().any(|n| n == positive) {
                return Err(crate::triplet::ValidationError::new(
                    crate::triplet::Violation::DuplicateNegative,
                    "a negative repeats the positive",
                ));
            }
            Ok(t)
        });
        match result {
            Ok(triplet) => {
                return Ok(Generated {
                    triplet,
                    retries,
                    regenerated: attempt > 0,
                })
            }
            Err(e) if attempt == 1 => return Err(e.into()),
            Err(_) => {}
        }
    }
    unreachable!("loop returns on the second attempt")
}

/// Applies `f` to every item with at most `max_parallel` calls in flight.
/// Results keep the input order.
pub fn bounded_map<T: Sync, R: Send>(items: &[T], max_parallel: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let workers = max_parallel.max(1).min(items.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

fn record(
    report: &mut SynthReport,
    result: Result<Generated, SynthError>,
    out: &mut Vec<TrainingTriplet>,
) -> Result<(), SynthError> {
    match result {
        Ok(g) => {
            report.transport_retries += u64::from(g.retries);
            report.regenerated += usize::from(g.regenerated);
            report.accepted += 1;
            *report
                .accepted_by_category
                .entry(g.triplet.task.category.name().to_string())
                .or_default() += 1;
            out.push(g.triplet);
            Ok(())
        }
        Err(SynthError::Validation(v)) => {
            *report.rejected.entry(v.kind.name().to_string()).or_default() += 1;
            Ok(())
        }
        Err(e) => Err(e),
    }
}

/// Full two-stage synthesis. Output order depends only on the config seed.
pub fn run_synthesis(
    cfg: &SynthConfig,
    backend: &dyn ChatBackend,
    sleep: &(dyn Fn(Duration) + Sync),
) -> Result<(Vec<TrainingTriplet>, SynthReport), SynthError> {
    cfg.validate()?;
    let ctx = cfg.context(backend, sleep);
    let allocation = cfg.category_mix.allocate(cfg.num_triplets)?;
    let mut report = SynthReport {
        requested: cfg.num_triplets,
        ..SynthReport::default()
    };
    let mut tasks: BTreeMap<TaskCategory, Vec<TaskSpec>> = BTreeMap::new();
    for &(category, _) in &allocation {
        let found = brainstorm_tasks(category, cfg.tasks_per_category, &ctx, cfg.seed)?;
        if found.is_empty() {
            return Err(SynthError::Format {
                detail: format!("no usable tasks for {category}"),
                raw: String::new(),
            });
        }
        report.tasks.insert(category.name().to_string(), found.len());
        tasks.insert(category, found);
    }

    let mut plan: Vec<TaskCategory> = allocation
        .iter()
        .flat_map(|&(c, n)| std::iter::repeat_n(c, n))
        .collect();
    plan.shuffle(&mut rng_for(cfg.seed, "category-order"));
    let mut used: BTreeMap<TaskCategory, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(cfg.num_triplets);
    let mut issued = 0usize;
    for _ in 0..=cfg.top_up_rounds {
        let wanted = cfg.num_triplets - out.len();
        if wanted == 0 {
            break;
        }
        let jobs: Vec<(usize, TaskSpec)> = (0..wanted)
            .map(|j| {
                let category = plan[(issued + j) % plan.len()];
                let n = used.entry(category).or_default();
                let list = &tasks[&category];
                let task = list[*n % list.len()].clone();
                *n += 1;
                (issued + j, task)
            })
            .collect();
        issued += wanted;
        let results = bounded_map(&jobs, cfg.max_parallel, |_, (index, task)| {
            let seed = derive_seed(cfg.seed, &format!("item/{index}"));
            let ph = PromptPlaceholders::sample(&mut rng_for(seed, "placeholders"), &cfg.language, &cfg.num_words);
            generate_triplet(task, &ph, &ctx, seed)
        });
        for r in results {
            record(&mut report, r, &mut out)?;
        }
    }
    Ok((out, report))
}

/// Adds ordered negatives to every (query, positive) pair. Rejected pairs are
/// counted and skipped.
pub fn augment_pairs(
    pairs: &[(String, String)],
    cfg: &SynthConfig,
    backend: &dyn ChatBackend,
    sleep: &(dyn Fn(Duration) + Sync),
) -> Result<(Vec<TrainingTriplet>, SynthReport), SynthError> {
    let task = TaskSpec::new(TaskCategory::ShortLong, cfg.augment_task.clone())?;
    let ctx = cfg.context(backend, sleep);
    let results = bounded_map(pairs, cfg.max_parallel, |i, (q, p)| {
        augment_retrieval_pair(q, p, &task, &ctx, derive_seed(cfg.seed, &format!("pair/{i}")))
    });
    let mut report = SynthReport {
        requested: pairs.len(),
        ..SynthReport::default()
    };
    let mut out = Vec::with_capacity(pairs.len());
    for r in results {
        match r {
            Err(SynthError::Precondition(_)) => *report.rejected.entry("empty_text".into()).or_default() += 1,
            r => record(&mut report, r, &mut out)?,
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_sums_to_n() {
        let mix = CategoryMix::default();
        for n in [1, 7, 10, 200, 1001] {
            let a = mix.allocate(n).unwrap();
            assert_eq!(a.iter().map(|(_, k)| k).sum::<usize>(), n);
        }
        let a: BTreeMap<_, _> = mix.allocate(100).unwrap().into_iter().collect();
        assert_eq!(a[&TaskCategory::ShortLong], 30);
        assert_eq!(a[&TaskCategory::LongLong], 10);
        let zero = CategoryMix {
            short_long: 0.0,
            long_short: 0.0,
            long_long: 0.0,
            short_short: 0.0,
            sts: 0.0,
        };
        assert!(zero.allocate(5).is_err());
    }

    #[test]
    fn bounded_map_keeps_order() {
        let items: Vec<usize> = (0..50).collect();
        assert_eq!(
            bounded_map(&items, 3, |i, x| i * 100 + x),
            items.iter().map(|x| x * 101).collect::<Vec<_>>()
        );
        assert!(bounded_map(&Vec::<u8>::new(), 3, |_, x| *x).is_empty());
    }
}
