//! Deterministic offline backend.
//!
//! Stage-1 replies are task sentences from a small phrase grammar. Stage-2
//! replies plant the ordered-similarity structure directly: the positive is a
//! sequence of distinct pseudo-words, and the level-`k` negative replaces
//! `⌈p_k · W⌉` of its `W` words with distractors. Replacement positions are
//! nested (each level's set contains the previous level's), distractor words
//! never occur in positives, and no distractor is reused across levels, so
//! word overlap with the positive strictly decreases with `k`.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use rand::SeedableRng;

use super::prompts::{brainstorm_prompt, AUGMENT_EXAMPLE_MARKER, QUERY_LENGTHS};
use super::{BackendError, ChatBackend, ChatRequest};
use crate::seeding::rng_for;
use crate::triplet::{similarity_levels, TaskCategory};

/// Replacement fractions for the four default levels.
pub const CORRUPTION_RATES: [f64; 4] = [0.15, 0.35, 0.60, 0.90];

const CONTENT_SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ru", "te", "sa", "no", "vi", "pe", "du", "ri", "ho"];
const DISTRACTOR_SYLLABLES: [&str; 12] = ["zu", "fy", "qe", "xo", "jy", "wu", "gy", "bo", "ce", "ly", "ze", "fu"];
const WORDS_PER_VOCAB: usize = 12 * 12 * 12;

/// Rates for `n` levels: the fixed table for four, otherwise evenly spaced
/// over the same range.
pub fn corruption_rates(n: usize) -> Vec<f64> {
    match n {
        4 => CORRUPTION_RATES.to_vec(),
        1 => vec![CORRUPTION_RATES[0]],
        _ => (0..n)
            .map(|i| CORRUPTION_RATES[0] + (CORRUPTION_RATES[3] - CORRUPTION_RATES[0]) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn word(syllables: &[&str; 12], i: usize) -> String {
    format!(
        "{}{}{}",
        syllables[i / 144],
        syllables[(i / 12) % 12],
        syllables[i % 12]
    )
}

#[derive(Clone, Debug)]
pub struct MockBackend {
    seed: u64,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, request: &ChatRequest) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(request.seed.to_le_bytes());
        h.update(request.prompt().as_bytes());
        let d = h.finalize();
        ChaCha8Rng::from_seed(d.into())
    }

    fn brainstorm(&self, category: TaskCategory) -> String {
        let mut rng = rng_for(self.seed, &format!("mock-brainstorm/{}", category.name()));
        let (subjects, objects): (&[&str], &[&str]) = match category {
            TaskCategory::ShortLong => (
                &[
                    "a short keyword query",
                    "a how-to question",
                    "a product search query",
                    "a symptom description",
                ],
                &[
                    "web passages",
                    "encyclopedia articles",
                    "forum answers",
                    "manual sections",
                ],
            ),
            TaskCategory::LongShort => (
                &[
                    "a news article",
                    "a customer review",
                    "a support ticket",
                    "a research abstract",
                ],
                &["its headline", "a sentiment label", "a topic tag", "a one-line summary"],
            ),
            TaskCategory::LongLong => (
                &[
                    "a scientific abstract",
                    "a legal clause",
                    "a patent claim",
                    "a long forum post",
                ],
                &[
                    "related abstracts",
                    "similar clauses",
                    "prior art documents",
                    "duplicate posts",
                ],
            ),
            TaskCategory::ShortShort => (
                &["a search query", "a product title", "a question title", "a movie title"],
                &[
                    "related queries",
                    "accessory titles",
                    "duplicate question titles",
                    "similar titles",
                ],
            ),
            TaskCategory::Sts => (
                &["a news sentence", "a forum question", "an image caption", "a tweet"],
                &[
                    "paraphrases",
                    "questions with the same meaning",
                    "equivalent captions",
                    "tweets with the same meaning",
                ],
            ),
        };
        let domains = [
            "cooking",
            "travel",
            "finance",
            "gardening",
            "astronomy",
            "medicine",
            "law",
            "sports",
            "music",
            "history",
        ];
        let mut tasks: Vec<String> = Vec::with_capacity(20);
        for s in subjects {
            for o in objects {
                let d = domains.choose(&mut rng).expect("non-empty");
                tasks.push(format!("Given {s} about {d}, retrieve {o}."));
            }
        }
        tasks.shuffle(&mut rng);
        let items: Vec<String> = tasks.iter().take(20).map(|t| format!("{t:?}")).collect();
        format!("[{}]", items.join(", "))
    }

    fn negatives(&self, rng: &mut ChaCha8Rng, positive: &[String], num_levels: usize) -> Vec<String> {
        let w = positive.len();
        let order: Vec<usize> = index::sample(rng, w, w).into_vec();
        let counts: Vec<usize> = corruption_rates(num_levels)
            .iter()
            .map(|p| ((p * w as f64).ceil() as usize).clamp(1, w))
            .collect();
        let total: usize = counts.iter().sum();
        let mut pool = index::sample(rng, WORDS_PER_VOCAB, total.min(WORDS_PER_VOCAB)).into_iter();
        counts
            .iter()
            .map(|&c| {
                let mut words = positive.to_vec();
                for &pos in &order[..c] {
                    let fresh = pool.next().unwrap_or_else(|| rng.gen_range(0..WORDS_PER_VOCAB));
                    words[pos] = word(&DISTRACTOR_SYLLABLES, fresh);
                }
                words.join(" ")
            })
            .collect()
    }

    fn query_words(rng: &mut ChaCha8Rng, prompt: &str) -> usize {
        let spec = QUERY_LENGTHS
            .iter()
            .position(|q| prompt.contains(&format!("{q}, ")))
            .unwrap_or(1);
        match spec {
            0 => rng.gen_range(3..=4),
            1 => rng.gen_range(5..=8),
            _ => 10,
        }
    }

    fn example(&self, rng: &mut ChaCha8Rng, prompt: &str, num_levels: usize) -> String {
        let w = prompt
            .split("at least ")
            .filter_map(|s| s.split(" words long").next()?.parse::<usize>().ok())
            .next()
            .unwrap_or(50)
            .max(1);
        let positive: Vec<String> = index::sample(rng, WORDS_PER_VOCAB, w.min(WORDS_PER_VOCAB))
            .into_iter()
            .map(|i| word(&CONTENT_SYLLABLES, i))
            .collect();
        let prefix = positive.len().min(12);
        let q_len = Self::query_words(rng, prompt).min(prefix);
        let mut picks = index::sample(rng, prefix, q_len).into_vec();
        picks.sort_unstable();
        let query: Vec<&str> = picks.iter().map(|&i| positive[i].as_str()).collect();
        let negatives = self.negatives(rng, &positive, num_levels);
        serde_json::json!({
            "user_query": query.join(" "),
            "positive_document": positive.join(" "),
            "hard_negative_document": tagged(&negatives),
        })
        .to_string()
    }

    fn augment(&self, rng: &mut ChaCha8Rng, prompt: &str, num_levels: usize) -> Result<String, BackendError> {
        let example = prompt
            .split_once(AUGMENT_EXAMPLE_MARKER)
            .and_then(|(_, rest)| rest.trim_start().lines().next())
            .ok_or_else(|| BackendError::Protocol("augmentation prompt without example".into()))?;
        let value: serde_json::Value =
            serde_json::from_str(example).map_err(|e| BackendError::Protocol(format!("bad example line: {e}")))?;
        let positive: Vec<String> = value["positive_document"]
            .as_str()
            .unwrap_or_default()
            .split_whitespace()
            .map(String::from)
            .collect();
        if positive.is_empty() {
            return Ok("{}".into());
        }
        let negatives = self.negatives(rng, &positive, num_levels);
        Ok(serde_json::json!({ "hard_negative_document": tagged(&negatives) }).to_string())
    }
}

fn tagged(negatives: &[String]) -> Vec<serde_json::Value> {
    similarity_levels(negatives.len())
        .into_iter()
        .zip(negatives)
        .map(|(level, text)| serde_json::json!({"similarity_level": level, "text": text}))
        .collect()
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let prompt = request.prompt();
        if let Some(c) = TaskCategory::ALL.into_iter().find(|&c| prompt == brainstorm_prompt(c)) {
            return Ok(self.brainstorm(c));
        }
        let mut rng = self.rng(request);
        let num_levels = prompt.matches("\"similarity_level\"").count();
        let body = if prompt.contains(AUGMENT_EXAMPLE_MARKER) {
            self.augment(&mut rng, prompt, num_levels)?
        } else if prompt.starts_with("You have been assigned a retrieval task:") {
            self.example(&mut rng, prompt, num_levels)
        } else {
            return Ok("I can only write retrieval examples.".into());
        };
        // Some replies come fenced, as chat models often do.
        Ok(if rng.gen_bool(0.25) {
            format!("```json\n{body}\n```")
        } else {
            body
        })
    }
}
