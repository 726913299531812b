use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::wire::{self, request_key};
use super::{BackendExchange, EmbedInput, ImageRef, Role, Transport};
use crate::error::{Error, Result};

/// One scripted reply. Exactly one of `request_sha256` / `sequence_index`
/// selects when it is played back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_index: Option<usize>,
    #[serde(default)]
    pub response: Value,
    /// Scripted transport failure instead of a response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureSet {
    pub entries: Vec<FixtureEntry>,
}

impl FixtureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("fixtures serialize");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: FixtureSet) {
        self.entries.extend(other.entries);
    }

    pub fn add_keyed(&mut self, role: Role, request: &Value, response: Value) -> &mut Self {
        self.entries.push(FixtureEntry {
            role,
            request_sha256: Some(request_key(request)),
            sequence_index: None,
            response,
            error: None,
        });
        self
    }

    pub fn add_sequential(&mut self, role: Role, index: usize, response: Value) -> &mut Self {
        self.entries.push(FixtureEntry {
            role,
            request_sha256: None,
            sequence_index: Some(index),
            response,
            error: None,
        });
        self
    }

    pub fn add_failure(&mut self, role: Role, request: &Value, message: &str) -> &mut Self {
        self.entries.push(FixtureEntry {
            role,
            request_sha256: Some(request_key(request)),
            sequence_index: None,
            response: Value::Null,
            error: Some(message.to_string()),
        });
        self
    }

    /// Script the observer. Each detection is `(label, [x_min, y_min, x_max, y_max], confidence)`.
    pub fn detect(
        &mut self,
        image: &ImageRef,
        grounding_text: Option<&str>,
        detections: &[(&str, [f64; 4], f64)],
    ) -> &mut Self {
        let req = wire::detect_request(image, grounding_text, false).expect("uri request");
        let entities: Vec<Value> = detections
            .iter()
            .map(|(label, bbox, conf)| json!({"label": label, "bbox": bbox, "confidence": conf}))
            .collect();
        self.add_keyed(Role::Observer, &req, json!({ "entities": entities }))
    }

    pub fn complete(&mut self, prompt: &str, text: &str) -> &mut Self {
        let req = wire::complete_request(prompt).expect("nonempty prompt");
        self.add_keyed(Role::Thinker, &req, json!({ "text": text }))
    }

    pub fn vqa(&mut self, image: &ImageRef, question: &str, text: &str, yes_probability: Option<f64>) -> &mut Self {
        let req = wire::vqa_request(image, question, false).expect("nonempty question");
        let resp = match yes_probability {
            Some(p) => json!({ "text": text, "yes_probability": p }),
            None => json!({ "text": text }),
        };
        self.add_keyed(Role::Verifier, &req, resp)
    }

    pub fn embed(&mut self, input: &EmbedInput, vector: &[f64]) -> &mut Self {
        let req = wire::embed_request(input).expect("nonempty embed input");
        self.add_keyed(Role::Embedder, &req, json!({ "vector": vector }))
    }
}

#[derive(Debug, Clone)]
struct Scripted {
    response: Value,
    error: Option<String>,
}

/// Plays back a [`FixtureSet`]. Keyed entries are looked up by the SHA-256
/// of the canonical request; roles with sequential entries fall back to call
/// order. Anything else is a missing-fixture error.
pub struct MockTransport {
    keyed: HashMap<(Role, String), Scripted>,
    sequential: HashMap<Role, HashMap<usize, Scripted>>,
    counters: Mutex<HashMap<Role, usize>>,
}

impl MockTransport {
    pub fn new(fixtures: FixtureSet) -> Result<Self> {
        let mut keyed: HashMap<(Role, String), Scripted> = HashMap::new();
        let mut sequential: HashMap<Role, HashMap<usize, Scripted>> = HashMap::new();
        for e in fixtures.entries {
            let scripted = Scripted {
                response: e.response,
                error: e.error,
            };
            let previous = match (e.request_sha256, e.sequence_index) {
                (Some(key), None) => keyed.insert((e.role, key.clone()), scripted.clone()).map(|p| (p, key)),
                (None, Some(i)) => sequential
                    .entry(e.role)
                    .or_default()
                    .insert(i, scripted.clone())
                    .map(|p| (p, format!("#{i}"))),
                _ => {
                    return Err(Error::validation(format!(
                        "{} fixture needs exactly one of request_sha256 / sequence_index",
                        e.role
                    )))
                }
            };
            if let Some((p, key)) = previous {
                if p.response != scripted.response || p.error != scripted.error {
                    return Err(Error::Conflict(format!("conflicting {} fixtures for {key}", e.role)));
                }
            }
        }
        Ok(MockTransport {
            keyed,
            sequential,
            counters: Mutex::new(HashMap::new()),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::new(FixtureSet::load(path)?)
    }

    fn lookup(&self, role: Role, key: &str) -> Result<Scripted> {
        if let Some(s) = self.keyed.get(&(role, key.to_string())) {
            return Ok(s.clone());
        }
        if let Some(seq) = self.sequential.get(&role) {
            let mut counters = self.counters.lock().expect("mock counters poisoned");
            let n = counters.entry(role).or_insert(0);
            let index = *n;
            *n += 1;
            return seq.get(&index).cloned().ok_or_else(|| Error::MissingFixture {
                role,
                key: format!("sequence #{index}"),
            });
        }
        Err(Error::MissingFixture {
            role,
            key: key.to_string(),
        })
    }
}

impl Transport for MockTransport {
    fn call(&self, role: Role, request: &Value) -> Result<BackendExchange> {
        let key = request_key(request);
        let scripted = self.lookup(role, &key)?;
        if let Some(message) = scripted.error {
            return Err(Error::Backend {
                role,
                attempts: 1,
                message,
            });
        }
        Ok(BackendExchange {
            role,
            request: request.clone(),
            response: scripted.response,
            latency_ms: 0,
            attempts: 1,
        })
    }
}

/// Forwards to another transport and keeps every successful exchange as a
/// keyed fixture, so a live session can be replayed later.
pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    recorded: Mutex<BTreeMap<(Role, String), Value>>,
}

impl RecordingTransport {
    pub fn new(inner: Arc<dyn Transport>) -> Self {
        RecordingTransport {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    /// Recorded fixtures, ordered by (role, request hash).
    pub fn fixtures(&self) -> FixtureSet {
        let recorded = self.recorded.lock().expect("recorder poisoned");
        FixtureSet {
            entries: recorded
                .iter()
                .map(|((role, key), response)| FixtureEntry {
                    role: *role,
                    request_sha256: Some(key.clone()),
                    sequence_index: None,
                    response: response.clone(),
                    error: None,
                })
                .collect(),
        }
    }
}

impl Transport for RecordingTransport {
    fn call(&self, role: Role, request: &Value) -> Result<BackendExchange> {
        let exchange = self.inner.call(role, request)?;
        self.recorded
            .lock()
            .expect("recorder poisoned")
            .insert((role, request_key(request)), exchange.response.clone());
        Ok(exchange)
    }
}
