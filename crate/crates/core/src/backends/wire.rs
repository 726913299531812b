//! Request bodies and response schemas of the model protocol.
//!
//! ```text
//! POST /v1/detect   {image_id, image_b64 | image_uri, grounding_text?} -> {entities: [{label, bbox, confidence}]}
//! POST /v1/complete {prompt}                                          -> {text}
//! POST /v1/vqa      {image_id, image_b64 | image_uri, question}       -> {text, yes_probability?}
//! POST /v1/embed    {kind: "image", payload_b64} | {kind: "text", text} -> {vector}
//! ```

use base64::Engine as _;
use serde::Deserialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::{EmbedInput, EmbeddingVector, ImageRef, Role, VerifierAnswer};
use crate::error::{Error, Result};
use crate::scene::{BBox, Entity, EntitySource};

/// Compact JSON with object keys in sorted order.
pub fn canonical_json(value: &Value) -> String {
    fn sorted(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<_> = m.keys().collect();
                keys.sort();
                let mut out = Map::new();
                for k in keys {
                    out.insert(k.clone(), sorted(&m[k]));
                }
                Value::Object(out)
            }
            Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sorted(value)).expect("serializing a Value cannot fail")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Fixture key of a request: SHA-256 of its canonical JSON.
pub fn request_key(request: &Value) -> String {
    sha256_hex(canonical_json(request).as_bytes())
}

fn b64() -> base64::engine::GeneralPurpose {
    base64::engine::general_purpose::STANDARD
}

fn image_fields(image: &ImageRef, inline: bool) -> Result<Map<String, Value>> {
    let mut m = Map::new();
    m.insert("image_id".into(), Value::String(image.image_id.clone()));
    if inline {
        let path = image.uri.strip_prefix("file://").unwrap_or(&image.uri);
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        m.insert("image_b64".into(), Value::String(b64().encode(bytes)));
    } else {
        m.insert("image_uri".into(), Value::String(image.uri.clone()));
    }
    Ok(m)
}

pub fn detect_request(image: &ImageRef, grounding_text: Option<&str>, inline: bool) -> Result<Value> {
    let mut m = image_fields(image, inline)?;
    if let Some(g) = grounding_text.filter(|g| !g.is_empty()) {
        m.insert("grounding_text".into(), Value::String(g.to_string()));
    }
    Ok(Value::Object(m))
}

pub fn complete_request(prompt: &str) -> Result<Value> {
    if prompt.trim().is_empty() {
        return Err(Error::validation("thinker prompt is empty"));
    }
    Ok(json!({ "prompt": prompt }))
}

pub fn vqa_request(image: &ImageRef, question: &str, inline: bool) -> Result<Value> {
    if question.trim().is_empty() {
        return Err(Error::validation("verifier question is empty"));
    }
    let mut m = image_fields(image, inline)?;
    m.insert("question".into(), Value::String(question.to_string()));
    Ok(Value::Object(m))
}

pub fn embed_request(input: &EmbedInput) -> Result<Value> {
    match input {
        EmbedInput::Text(t) if t.is_empty() => Err(Error::validation("embed text is empty")),
        EmbedInput::Image(b) if b.is_empty() => Err(Error::validation("embed image is empty")),
        EmbedInput::Text(t) => Ok(json!({ "kind": "text", "text": t })),
        EmbedInput::Image(b) => Ok(json!({ "kind": "image", "payload_b64": b64().encode(b) })),
    }
}

fn decode<T: for<'de> Deserialize<'de>>(role: Role, resp: &Value) -> Result<T> {
    T::deserialize(resp).map_err(|e| Error::protocol(role, format!("malformed response: {e}")))
}

#[derive(Deserialize)]
struct DetectResponse {
    entities: Vec<WireEntity>,
}

#[derive(Deserialize)]
struct WireEntity {
    label: String,
    bbox: [f64; 4],
    confidence: f64,
}

/// Validate detections and assign per-image ids `d000`, `d001`, ...
pub fn parse_detect_response(image: &ImageRef, resp: &Value) -> Result<Vec<Entity>> {
    let role = Role::Observer;
    let r: DetectResponse = decode(role, resp)?;
    r.entities
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let [a, b, c, d] = w.bbox;
            let bbox = BBox::new(a, b, c, d).map_err(|e| Error::protocol(role, e.to_string()))?;
            if !bbox.within(image.width as f64, image.height as f64) {
                return Err(Error::protocol(
                    role,
                    format!(
                        "box {:?} outside {}x{} image {}",
                        w.bbox, image.width, image.height, image.image_id
                    ),
                ));
            }
            Entity::new(format!("d{i:03}"), &w.label, bbox, w.confidence, EntitySource::Detected)
                .map_err(|e| Error::protocol(role, e.to_string()))
        })
        .collect()
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
}

pub fn parse_complete_response(resp: &Value) -> Result<String> {
    let r: CompleteResponse = decode(Role::Thinker, resp)?;
    if r.text.trim().is_empty() {
        return Err(Error::EmptyResponse { role: Role::Thinker });
    }
    Ok(r.text)
}

pub fn parse_vqa_response(resp: &Value) -> Result<VerifierAnswer> {
    let role = Role::Verifier;
    let r: VerifierAnswer = decode(role, resp)?;
    if let Some(p) = r.yes_probability {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::protocol(role, format!("yes_probability {p} outside [0, 1]")));
        }
    }
    if r.text.trim().is_empty() {
        return Err(Error::EmptyResponse { role });
    }
    Ok(r)
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

pub fn parse_embed_response(resp: &Value) -> Result<EmbeddingVector> {
    let role = Role::Embedder;
    let r: EmbedResponse = decode(role, resp)?;
    EmbeddingVector::new(r.vector).map_err(|e| Error::protocol(role, e.to_string()))
}
