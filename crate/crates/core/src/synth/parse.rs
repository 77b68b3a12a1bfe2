//! Parsing of backend replies.

use serde_json::{Map, Value};

use crate::triplet::{similarity_levels, Source, TaskSpec, TrainingTriplet, ValidationError, Violation};

/// First balanced `{...}` in `raw`, skipping braces inside JSON strings.
/// Surrounding prose and code fences are ignored.
pub fn extract_object(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in raw[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn object(raw: &str) -> Result<Map<String, Value>, ValidationError> {
    let body =
        extract_object(raw).ok_or_else(|| ValidationError::new(Violation::MalformedJson, "no JSON object in reply"))?;
    match serde_json::from_str::<Value>(body) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ValidationError::new(
            Violation::MalformedJson,
            "reply is not a JSON object",
        )),
        Err(e) => Err(ValidationError::new(Violation::MalformedJson, e.to_string())),
    }
}

pub(crate) fn string_field(map: &Map<String, Value>, key: &str) -> Result<String, ValidationError> {
    match map.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ValidationError::new(
            Violation::MissingField,
            format!("{key} is not a string"),
        )),
        None => Err(ValidationError::new(
            Violation::MissingField,
            format!("{key} is missing"),
        )),
    }
}

pub(crate) fn negatives_field(map: &Map<String, Value>, num_levels: usize) -> Result<Vec<String>, ValidationError> {
    let items = match map.get("hard_negative_document") {
        Some(Value::Array(items)) => items,
        Some(_) => {
            return Err(ValidationError::new(
                Violation::MissingField,
                "hard_negative_document is not a list",
            ));
        }
        None => {
            return Err(ValidationError::new(
                Violation::MissingField,
                "hard_negative_document is missing",
            ))
        }
    };
    if items.len() != num_levels {
        return Err(ValidationError::new(
            Violation::NegativeCount,
            format!("expected {num_levels} hard negatives, got {}", items.len()),
        ));
    }
    let mut tags = Vec::with_capacity(num_levels);
    let mut texts = Vec::with_capacity(num_levels);
    for (i, item) in items.iter().enumerate() {
        let Value::Object(entry) = item else {
            return Err(ValidationError::new(
                Violation::MissingField,
                format!("hard negative {} has no similarity_level", i + 1),
            ));
        };
        tags.push(string_field(entry, "similarity_level")?);
        texts.push(string_field(entry, "text")?);
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(ValidationError::new(
            Violation::EmptyText,
            format!("hard negative {} is empty", i + 1),
        ));
    }
    let expected = similarity_levels(num_levels);
    let normalized: Vec<String> = tags.iter().map(|t| t.trim().to_ascii_lowercase()).collect();
    if normalized.iter().zip(&expected).any(|(got, want)| got != want) {
        return Err(ValidationError::new(
            Violation::LevelOrder,
            format!("similarity levels {tags:?}, expected {expected:?}"),
        ));
    }
    Ok(texts)
}

/// Stage-2 reply → triplet stamped as synthetic.
pub fn parse_generation(raw: &str, task: &TaskSpec, num_levels: usize) -> Result<TrainingTriplet, ValidationError> {
    let map = object(raw)?;
    let query = string_field(&map, "user_query")?;
    let positive = string_field(&map, "positive_document")?;
    let negatives = negatives_field(&map, num_levels)?;
    let triplet = TrainingTriplet {
        query,
        positive,
        negatives,
        source: Source::Synthetic,
        task: task.clone(),
    };
    triplet.validate(num_levels)?;
    Ok(triplet)
}

/// Augmentation reply → ordered negatives only.
pub fn parse_negatives(raw: &str, num_levels: usize) -> Result<Vec<String>, ValidationError> {
    negatives_field(&object(raw)?, num_levels)
}

/// Parses a Python- or JSON-style list of string literals, tolerating text
/// around the list.
pub fn parse_string_list(raw: &str) -> Result<Vec<String>, String> {
    let start = raw.find('[').ok_or("no list in reply")?;
    let mut chars = raw[start + 1..].chars().peekable();
    let mut out = Vec::new();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.next() {
            Some(']') => return Ok(out),
            Some(q @ ('"' | '\'')) => {
                let mut s = String::new();
                loop {
                    match chars.next() {
                        None => return Err("unterminated string".into()),
                        Some('\\') => match chars.next() {
                            Some('n') => s.push('\n'),
                            Some('t') => s.push('\t'),
                            Some(c) => s.push(c),
                            None => return Err("unterminated escape".into()),
                        },
                        Some(c) if c == q => break,
                        Some(c) => s.push(c),
                    }
                }
                out.push(s);
                while chars.peek().is_some_and(|c| c.is_whitespace()) {
                    chars.next();
                }
                match chars.next() {
                    Some(',') => {}
                    Some(']') => return Ok(out),
                    other => return Err(format!("expected ',' or ']' after element, found {other:?}")),
                }
            }
            other => return Err(format!("expected a string literal, found {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplet::TaskCategory;

    fn task() -> TaskSpec {
        TaskSpec::new(TaskCategory::ShortLong, "find recipes").unwrap()
    }

    fn reply(tags: &[&str], texts: &[&str]) -> String {
        let negs: Vec<Value> = tags
            .iter()
            .zip(texts)
            .map(|(t, x)| serde_json::json!({"similarity_level": t, "text": x}))
            .collect();
        let obj = serde_json::json!({
            "user_query": "pasta sauce",
            "positive_document": "tomato basil pasta sauce recipe",
            "hard_negative_document": negs,
        });
        format!("Sure! Here it is:\n```json\n{obj}\n```\n")
    }

    #[test]
    fn well_formed_reply() {
        let raw = reply(&["high", "medium", "medium", "low"], &["a", "b", "c", "d"]);
        let t = parse_generation(&raw, &task(), 4).unwrap();
        assert_eq!(t.negatives[0], "a");
        assert_eq!(t.source, Source::Synthetic);
    }

    #[test]
    fn typed_rejections() {
        let kind = |raw: &str| parse_generation(raw, &task(), 4).unwrap_err().kind;
        assert_eq!(
            kind(&reply(&["high", "medium", "low"], &["a", "b", "c"])),
            Violation::NegativeCount
        );
        assert_eq!(
            kind(&reply(&["high", "low", "medium", "medium"], &["a", "b", "c", "d"])),
            Violation::LevelOrder
        );
        assert_eq!(
            kind(&reply(&["high", "medium", "medium", "low"], &["a", "", "c", "d"])),
            Violation::EmptyText
        );
        assert_eq!(
            kind(&reply(&["high", "medium", "medium", "low"], &["a", "b", "a", "d"])),
            Violation::DuplicateNegative
        );
        assert_eq!(kind("no json here"), Violation::MalformedJson);
        assert_eq!(kind("{\"user_query\": \"x\""), Violation::MalformedJson);
        assert_eq!(
            kind(r#"{"user_query": "x", "hard_negative_document": []}"#),
            Violation::MissingField
        );
    }

    #[test]
    fn braces_inside_strings() {
        let raw = r#"prefix {"a": "}{", "b": {"c": 1}} suffix {"z": 2}"#;
        assert_eq!(extract_object(raw), Some(r#"{"a": "}{", "b": {"c": 1}}"#));
    }

    #[test]
    fn string_lists() {
        assert_eq!(
            parse_string_list("['a', \"b\\\"c\", 'd']").unwrap(),
            vec!["a", "b\"c", "d"]
        );
        assert_eq!(parse_string_list("Tasks: [ ]").unwrap(), Vec::<String>::new());
        assert!(parse_string_list("a, b, c").is_err());
        assert!(parse_string_list("['a' 'b']").is_err());
        assert!(parse_string_list("[1, 2]").is_err());
    }
}
