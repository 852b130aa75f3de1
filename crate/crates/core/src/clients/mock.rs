//! Deterministic backends for tests and offline runs.
//!
//! Fixtures are files named `<key>.json` holding `{"role", "response"}`,
//! where `key` is the hex SHA-256 of the canonical JSON of
//! `{"request": ..., "role": ...}`. Canonical JSON has object keys sorted
//! and no whitespace.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, Role};

/// Serializes `v` with sorted object keys and no whitespace.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&m[k], out);
            }
            out.push('}');
        }
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(x, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fixture key of a request.
pub fn request_key(role: Role, request: &Value) -> String {
    let envelope = json!({"role": role.as_str(), "request": request});
    hex(&Sha256::digest(canonical_json(&envelope).as_bytes()))
}

/// Reply used when no fixture matches.
///
/// The parser answers with a keyword match of the supplied categories
/// against the query; the embedder with a vector derived from the request
/// hash; the segmenter finds nothing; the pointer reports absence or a
/// mismatch; the reasoner picks image 0.
pub fn default_response(role: Role, request: &Value) -> Value {
    match role {
        Role::Parser => json!({"text": heuristic_parse(request).to_string()}),
        Role::Embedder => {
            let digest = Sha256::digest(canonical_json(request).as_bytes());
            let v: Vec<f64> = digest.iter().map(|b| *b as f64 / 127.5 - 1.0).collect();
            json!({ "embedding": v })
        }
        Role::Segmenter => json!({"detections": []}),
        Role::Pointer => {
            let reply = match request.get("task").and_then(Value::as_str) {
                Some("verify") => json!({
                    "query_match": false,
                    "target_object": "",
                    "reasoning": "no fixture"
                }),
                Some("point_prompt") => json!({
                    "Presence": "No",
                    "positive_points": [],
                    "negative_points": [],
                    "confidence": 0.0,
                    "Reasoning": "no fixture"
                }),
                _ => json!({
                    "Presence": "No",
                    "point": null,
                    "confidence": 0.0,
                    "Reasoning": "no fixture"
                }),
            };
            json!({"text": reply.to_string()})
        }
        Role::Reasoner => json!({"text": json!({"process": "no fixture", "image_id": 0}).to_string()}),
    }
}

fn heuristic_parse(request: &Value) -> Value {
    let query = request.get("query").and_then(Value::as_str).unwrap_or_default();
    let lower = query.to_lowercase();
    let categories: Vec<String> = request
        .get("categories")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_owned)).collect())
        .unwrap_or_default();
    let mut mentioned: Vec<(usize, &String)> = categories
        .iter()
        .filter_map(|c| lower.find(&c.to_lowercase()).map(|at| (at, c)))
        .collect();
    mentioned.sort();
    let target = mentioned.first().map(|(_, c)| (*c).clone()).unwrap_or_else(|| {
        categories.first().cloned().unwrap_or_default()
    });
    let spatial: Vec<String> = mentioned.iter().skip(1).map(|(_, c)| (*c).clone()).collect();
    let mut top: Vec<String> = vec![target.clone()];
    for c in spatial.iter().chain(&categories) {
        if !top.contains(c) {
            top.push(c.clone());
        }
    }
    top.retain(|c| categories.contains(c));
    top.truncate(super::expected_top_count(categories.len()));
    json!({
        "query": query,
        "target_category": target,
        "spatial_refs": spatial,
        "top_categories": top,
    })
}

/// Replays fixtures from a directory, falling back to [`default_response`].
pub struct FixtureBackend {
    dir: PathBuf,
}

impl FixtureBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, role: Role, request: &Value) -> PathBuf {
        self.dir.join(format!("{}.json", request_key(role, request)))
    }

    /// Writes a fixture so that `request` is answered with `response`.
    pub fn insert(&self, role: Role, request: &Value, response: &Value) -> std::io::Result<PathBuf> {
        write_fixture(&self.dir, role, request, response)
    }
}

fn write_fixture(dir: &Path, role: Role, request: &Value, response: &Value) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", request_key(role, request)));
    let body = json!({"role": role.as_str(), "response": response});
    std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
    Ok(path)
}

impl Backend for FixtureBackend {
    fn call(&self, role: Role, request: &Value) -> Result<Value, BackendError> {
        let path = self.path_for(role, request);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(default_response(role, request));
            }
            Err(e) => return Err(BackendError::Malformed(format!("{}: {e}", path.display()))),
        };
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Malformed(format!("{}: {e}", path.display())))?;
        v.get("response")
            .cloned()
            .ok_or_else(|| BackendError::Malformed(format!("{}: no 'response'", path.display())))
    }
}

/// Forwards to another backend and stores every successful exchange as a fixture.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    dir: PathBuf,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>, dir: impl Into<PathBuf>) -> Self {
        Self { inner, dir: dir.into() }
    }
}

impl Backend for RecordingBackend {
    fn call(&self, role: Role, request: &Value) -> Result<Value, BackendError> {
        let response = self.inner.call(role, request)?;
        write_fixture(&self.dir, role, request, &response)
            .map_err(|e| BackendError::Malformed(format!("recording failed: {e}")))?;
        Ok(response)
    }
}

type Handler = dyn Fn(Role, &Value) -> Result<Value, BackendError> + Send + Sync;

/// Backend defined by a closure.
pub struct FnBackend {
    f: Box<Handler>,
}

impl FnBackend {
    pub fn new(f: impl Fn(Role, &Value) -> Result<Value, BackendError> + Send + Sync + 'static) -> Self {
        Self { f: Box::new(f) }
    }
}

impl Backend for FnBackend {
    fn call(&self, role: Role, request: &Value) -> Result<Value, BackendError> {
        (self.f)(role, request)
    }
}
