//! Prompt templates and placeholder sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::triplet::{similarity_levels, TaskCategory, TaskSpec};

pub const QUERY_TYPES: [&str; 3] = ["extremely long-tail", "long-tail", "common"];
pub const QUERY_LENGTHS: [&str; 3] = ["less than 5 words", "5 to 15 words", "at least 10 words"];
pub const CLARITIES: [&str; 3] = ["clear", "understandable with some effort", "ambiguous"];
pub const NUM_WORDS: [u32; 6] = [50, 100, 200, 300, 400, 500];
pub const DIFFICULTIES: [&str; 3] = ["high school", "college", "PhD"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPlaceholders {
    pub query_type: String,
    pub query_length: String,
    pub clarity: String,
    pub num_words: u32,
    pub difficulty: String,
    pub language: String,
}

impl PromptPlaceholders {
    /// Uniform draw from each enumerated set. `num_words` is drawn from
    /// `word_choices` (normally [`NUM_WORDS`]).
    pub fn sample(rng: &mut impl Rng, language: &str, word_choices: &[u32]) -> Self {
        let pick = |rng: &mut dyn rand::RngCore, set: &[&str]| set.choose(rng).expect("non-empty set").to_string();
        Self {
            query_type: pick(rng, &QUERY_TYPES),
            query_length: pick(rng, &QUERY_LENGTHS),
            clarity: pick(rng, &CLARITIES),
            num_words: *word_choices.choose(rng).unwrap_or(&NUM_WORDS[0]),
            difficulty: pick(rng, &DIFFICULTIES),
            language: language.to_string(),
        }
    }

    /// Checks every enumerated field against its set.
    pub fn validate(&self) -> Result<(), String> {
        let check = |name: &str, value: &str, set: &[&str]| {
            if set.contains(&value) {
                Ok(())
            } else {
                Err(format!("{name} {value:?} not in {set:?}"))
            }
        };
        check("query_type", &self.query_type, &QUERY_TYPES)?;
        check("query_length", &self.query_length, &QUERY_LENGTHS)?;
        check("clarity", &self.clarity, &CLARITIES)?;
        check("difficulty", &self.difficulty, &DIFFICULTIES)?;
        if !NUM_WORDS.contains(&self.num_words) {
            return Err(format!("num_words {} not in {NUM_WORDS:?}", self.num_words));
        }
        if self.language.trim().is_empty() {
            return Err("language is empty".into());
        }
        Ok(())
    }
}

fn brainstorm_lead(category: TaskCategory) -> (&'static str, [&'static str; 2]) {
    match category {
        TaskCategory::ShortLong => (
            "Brainstorm a list of potentially useful text retrieval tasks.",
            [
                "Retrieve relevant documents for a short keyword web search query that asks for weather information.",
                "Search for documents that answers a FAQ-style query on children's nutrition.",
            ],
        ),
        TaskCategory::LongShort => (
            "Brainstorm a list of potentially useful tasks where a long text is matched to a short label, title or summary.",
            [
                "Given a product review, retrieve the short phrase that names its sentiment.",
                "Given a news article, retrieve its headline.",
            ],
        ),
        TaskCategory::LongLong => (
            "Brainstorm a list of potentially useful tasks where a long document is matched to another long document.",
            [
                "Given a scientific abstract, retrieve abstracts of papers that cite it.",
                "Given a legal contract, retrieve contracts with similar clauses.",
            ],
        ),
        TaskCategory::ShortShort => (
            "Brainstorm a list of potentially useful tasks where a short text is matched to another short text.",
            [
                "Given a search query, retrieve related search queries.",
                "Given a product title, retrieve titles of compatible accessories.",
            ],
        ),
        TaskCategory::Sts => (
            "Brainstorm a list of potentially useful semantic textual similarity tasks.",
            [
                "Retrieve sentences that paraphrase a given news sentence.",
                "Find questions that have the same meaning as the input question.",
            ],
        ),
    }
}

/// Stage-1 prompt: ask for a list of task descriptions.
pub fn brainstorm_prompt(category: TaskCategory) -> String {
    let (lead, examples) = brainstorm_lead(category);
    format!(
        "{lead}\n\n\
         Here are a few examples for your reference:\n\
         - {}\n\
         - {}\n\n\
         Please adhere to the following guidelines:\n\
         - Specify what the query is, and what the desired documents are.\n\
         - Each retrieval task should cover a wide range of queries, and should not be too specific.\n\n\
         Your output must always be a python list of strings only, with about 20 elements, and each element \
         corresponds to a distinct retrieval task in one sentence. Do not explain yourself or output anything else. \
         Be creative!",
        examples[0], examples[1]
    )
}

fn negative_format_block(num_levels: usize) -> String {
    let names = match num_levels {
        4 => vec!["HIGH", "MEDIUM_HIGH", "MEDIUM_LOW", "LOW"],
        _ => similarity_levels(num_levels)
            .iter()
            .enumerate()
            .map(|(i, _)| if i == 0 { "HIGH" } else { "LOWER" })
            .collect(),
    };
    let entries: Vec<String> = similarity_levels(num_levels)
        .iter()
        .zip(names)
        .map(|(level, name)| {
            format!("        {{\n            \"similarity_level\": \"{level}\",\n            \"text\": \"{name}_SIMILARITY_NEGATIVE_EXAMPLE_TEXT\"\n        }}")
        })
        .collect();
    format!("    \"hard_negative_document\": [\n{}\n    ]", entries.join(",\n"))
}

fn count_word(n: usize) -> String {
    match n {
        1 => "one".into(),
        2 => "two".into(),
        3 => "three".into(),
        4 => "four".into(),
        5 => "five".into(),
        n => n.to_string(),
    }
}

/// Stage-2 prompt: one example for `task` with ordered hard negatives.
pub fn render_prompt(task: &TaskSpec, ph: &PromptPlaceholders, num_levels: usize) -> String {
    format!(
        "You have been assigned a retrieval task: {task}\n\n\
         Your mission is to write one text retrieval example for this task in the following JSON format. \
         The JSON object must contain the following keys:\n\
         - \"user_query\": a string, a random user search query specified by the retrieval task.\n\
         - \"positive_document\": a string, a relevant document for the user query.\n\
         - \"hard_negative_document\": a list of strings, hard negative documents that only appears relevant to the query.\n\n\
         The output should be formatted as a JSON object with a field indicating the relative similarity level of hard \
         negative examples. Use the following format as a guide:\n\n\
         {{\n    \"user_query\": \"QUERY_TEXT\",\n    \"positive_document\": \"POSITIVE_EXAMPLE_TEXT\",\n{block}\n}}\n\n\
         Please adhere to the following guidelines:\n\
         - The \"user_query\" should be {query_type}, {query_length}, {clarity}, and diverse in topic.\n\
         - All documents must be created independent of the query. Avoid copying the query verbatim. It's acceptable \
         if some parts of the \"positive_document\" are not topically related to the query.\n\
         - All documents should be at least {num_words} words long.\n\
         - The \"hard_negative_document\" contains some useful information, but it should be less useful or \
         comprehensive compared to the \"positive_document\". Please generate {count} hard negative documents for \
         contrastive learning based on the generated query and positive example. These examples should be arranged \
         in order of decreasing similarity to the query, ranging from highly similar to dissimilar. Ensure the \
         similarity spans a broad spectrum, and every negative example should be different, without repeating words \
         from previous examples.\n\
         - Both the query and documents should be in {language}.\n\
         - Do not provide any explanation in any document on why it is relevant or not relevant to the query.\n\
         - Both the query and documents require {difficulty} level education to understand.\n\n\
         Your output must always be a JSON object only, do not explain yourself or output anything else. Be creative!",
        task = task.description,
        block = negative_format_block(num_levels),
        query_type = ph.query_type,
        query_length = ph.query_length,
        clarity = ph.clarity,
        num_words = ph.num_words,
        count = count_word(num_levels),
        language = ph.language,
        difficulty = ph.difficulty,
    )
}

/// Marker line preceding the embedded example in augmentation prompts.
pub const AUGMENT_EXAMPLE_MARKER: &str = "Example:";

/// Augmentation prompt: the query and positive are given; only the ordered
/// negatives are requested.
pub fn render_augment_prompt(query: &str, positive: &str, ph: &PromptPlaceholders, num_levels: usize) -> String {
    let example = serde_json::json!({ "user_query": query, "positive_document": positive });
    format!(
        "You have been given one text retrieval example, a user query with its relevant document.\n\n\
         {AUGMENT_EXAMPLE_MARKER}\n{example}\n\n\
         Your mission is to write hard negative documents for this example in the following JSON format:\n\n\
         {{\n{block}\n}}\n\n\
         Please adhere to the following guidelines:\n\
         - The \"hard_negative_document\" contains some useful information, but it should be less useful or \
         comprehensive compared to the \"positive_document\". Please generate {count} hard negative documents \
         arranged in order of decreasing similarity to the query, ranging from highly similar to dissimilar. \
         Every negative example should be different, without repeating words from previous examples.\n\
         - Each document should be roughly as long as the positive document.\n\
         - All documents should be in {language}.\n\
         - Do not provide any explanation in any document on why it is relevant or not relevant to the query.\n\n\
         Your output must always be a JSON object only, do not explain yourself or output anything else.",
        block = negative_format_block(num_levels),
        count = count_word(num_levels),
        language = ph.language,
    )
}
