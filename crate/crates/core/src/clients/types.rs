//! Domain types returned by the model clients and the parsers that turn raw
//! model text into them.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::geometry::Box2D;
use crate::mask::BinaryMask;

/// Target category, anchor categories and ranked candidate categories for a query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryParse {
    pub query: String,
    pub target_category: String,
    pub spatial_refs: Vec<String>,
    pub top_categories: Vec<String>,
}

/// Number of ranked categories the parser must return for a category list.
pub fn expected_top_count(list_len: usize) -> usize {
    list_len.min(10)
}

impl QueryParse {
    /// Checks the ranked list against the supplied category list.
    pub fn validate(&self, categories: &[String]) -> Result<(), String> {
        if self.target_category.trim().is_empty() {
            return Err("empty target_category".into());
        }
        let want = expected_top_count(categories.len());
        if self.top_categories.len() != want {
            return Err(format!(
                "top_categories has {} entries, expected {want}",
                self.top_categories.len()
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.top_categories {
            if !categories.contains(c) {
                return Err(format!("top category '{c}' not in the category list"));
            }
            if !seen.insert(c) {
                return Err(format!("duplicate top category '{c}'"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D {
    pub bbox: Box2D<f64>,
    pub score: f64,
    pub mask: Option<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Cosine similarity; `0` if either vector has zero norm.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na = self.0.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = other.0.iter().map(|b| b * b).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na * nb)).clamp(-1.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Presence {
    Yes,
    No,
}

/// Stage-1 reply: is the target (or its context) present in the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceCheck {
    pub presence: Presence,
    /// Pixel coordinates of the object center; always `None` when absent.
    pub point: Option<(f64, f64)>,
    pub confidence: f64,
    pub reasoning: String,
}

/// Stage-2 reply with points already converted to pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPromptResult {
    pub presence: Presence,
    pub positive_points: Vec<(f64, f64)>,
    pub negative_points: Vec<(f64, f64)>,
    pub confidence: f64,
    pub reasoning: String,
}

/// Stage-3 reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub query_match: bool,
    pub target_object: String,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceResult {
    pub process: String,
    /// Index into the supplied images, or -1 when nothing matches.
    pub image_id: i64,
}

/// Normalized `[0, 1000]` coordinate to pixels: `u = x / 1000 * W`.
pub fn denormalize(x: f64, y: f64, width: u32, height: u32) -> (f64, f64) {
    (x / 1000.0 * width as f64, y / 1000.0 * height as f64)
}

/// Finds the JSON object in a model reply: the whole trimmed text, a fenced
/// block, or the span from the first `{` to the last `}`.
pub fn extract_json_object(text: &str) -> Option<Map<String, Value>> {
    let t = text.trim();
    if let Ok(Value::Object(m)) = serde_json::from_str(t) {
        return Some(m);
    }
    let start = t.find('{')?;
    let end = t.rfind('}')?;
    if end <= start {
        return None;
    }
    match serde_json::from_str(&t[start..=end]) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    }
}

fn get_str(m: &Map<String, Value>, k: &str) -> Result<String, String> {
    m.get(k)
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| format!("missing string '{k}'"))
}

fn get_str_list(m: &Map<String, Value>, k: &str) -> Result<Vec<String>, String> {
    let arr = m
        .get(k)
        .and_then(Value::as_array)
        .ok_or_else(|| format!("missing list '{k}'"))?;
    arr.iter()
        .map(|v| v.as_str().map(str::to_owned))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| format!("'{k}' must contain only strings"))
}

fn get_unit(m: &Map<String, Value>, k: &str) -> Result<f64, String> {
    let v = m
        .get(k)
        .and_then(Value::as_f64)
        .ok_or_else(|| format!("missing number '{k}'"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("'{k}' = {v} outside [0, 1]"))
    }
}

fn parse_presence(m: &Map<String, Value>) -> Result<Presence, String> {
    match m.get("Presence").and_then(Value::as_str) {
        Some("Yes") => Ok(Presence::Yes),
        Some("No") => Ok(Presence::No),
        other => Err(format!("Presence must be \"Yes\" or \"No\", got {other:?}")),
    }
}

fn parse_xy(v: &Value) -> Option<(f64, f64)> {
    let a = v.as_array()?;
    if a.len() != 2 {
        return None;
    }
    Some((a[0].as_f64()?, a[1].as_f64()?))
}

pub fn parse_query_reply(text: &str, query: &str) -> Result<QueryParse, String> {
    let m = extract_json_object(text).ok_or("reply is not a JSON object")?;
    Ok(QueryParse {
        query: m
            .get("query")
            .and_then(Value::as_str)
            .unwrap_or(query)
            .to_owned(),
        target_category: get_str(&m, "target_category")?,
        spatial_refs: get_str_list(&m, "spatial_refs")?,
        top_categories: get_str_list(&m, "top_categories")?,
    })
}

pub fn parse_presence_reply(text: &str) -> Result<PresenceCheck, String> {
    let m = extract_json_object(text).ok_or("reply is not a JSON object")?;
    const KEYS: [&str; 4] = ["Presence", "point", "confidence", "Reasoning"];
    if m.len() != KEYS.len() || KEYS.iter().any(|k| !m.contains_key(*k)) {
        return Err(format!(
            "expected exactly the keys {KEYS:?}, got {:?}",
            m.keys().collect::<Vec<_>>()
        ));
    }
    let presence = parse_presence(&m)?;
    let point = match presence {
        Presence::No => None,
        Presence::Yes => Some(parse_xy(&m["point"]).ok_or("point must be [x, y]")?),
    };
    Ok(PresenceCheck {
        presence,
        point,
        confidence: get_unit(&m, "confidence")?,
        reasoning: get_str(&m, "Reasoning")?,
    })
}

/// Parses a stage-2 reply, keeping at most two positive and one negative
/// point and rescaling them from `[0, 1000]` to a `width x height` image.
pub fn parse_point_reply(text: &str, width: u32, height: u32) -> Result<PointPromptResult, String> {
    let m = extract_json_object(text).ok_or("reply is not a JSON object")?;
    let presence = parse_presence(&m)?;
    let confidence = get_unit(&m, "confidence")?;
    let reasoning = get_str(&m, "Reasoning")?;
    let points = |k: &str, keep: usize| -> Result<Vec<(f64, f64)>, String> {
        let arr = m
            .get(k)
            .and_then(Value::as_array)
            .ok_or_else(|| format!("missing list '{k}'"))?;
        arr.iter()
            .take(keep)
            .map(|v| {
                let (x, y) = parse_xy(v).ok_or_else(|| format!("'{k}' entries must be [x, y]"))?;
                if !(0.0..=1000.0).contains(&x) || !(0.0..=1000.0).contains(&y) {
                    return Err(format!("'{k}' point ({x}, {y}) outside [0, 1000]"));
                }
                Ok(denormalize(x, y, width, height))
            })
            .collect()
    };
    let (positive_points, negative_points) = match presence {
        Presence::No => (Vec::new(), Vec::new()),
        Presence::Yes => (points("positive_points", 2)?, points("negative_points", 1)?),
    };
    Ok(PointPromptResult {
        presence,
        positive_points,
        negative_points,
        confidence,
        reasoning,
    })
}

pub fn parse_verify_reply(text: &str) -> Result<Verification, String> {
    let m = extract_json_object(text).ok_or("reply has no JSON object")?;
    Ok(Verification {
        query_match: m
            .get("query_match")
            .and_then(Value::as_bool)
            .ok_or("missing bool 'query_match'")?,
        target_object: m
            .get("target_object")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_owned(),
        reasoning: m
            .get("reasoning")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_owned(),
    })
}

/// Strict parse for the final-choice reply: the whole trimmed text must be a
/// JSON object with a string `process` and an integer `image_id`.
pub fn parse_choice_reply(text: &str) -> Result<ChoiceResult, String> {
    let m = match serde_json::from_str::<Value>(text.trim()) {
        Ok(Value::Object(m)) => m,
        _ => return Err("reply is not exactly one JSON object".into()),
    };
    let process = get_str(&m, "process")?;
    let image_id = m
        .get("image_id")
        .and_then(Value::as_i64)
        .ok_or("missing integer 'image_id'")?;
    Ok(ChoiceResult { process, image_id })
}
