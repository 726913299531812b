//! Prompt templates and the parsers for what comes back.
//!
//! Template bodies are bundled text assets. Slots are written `{name}` and
//! filled in a single pass, so slot values are never re-expanded.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{normalize_label, Entity, Triplet};
use crate::vocab::RelationVocab;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_slots: BTreeSet<String>,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

fn pieces(body: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_slot_name(&after[..close]) => {
                out.push(Piece::Text(&rest[..open]));
                out.push(Piece::Slot(&after[..close]));
                rest = &after[close + 1..];
            }
            _ => {
                out.push(Piece::Text(&rest[..open + 1]));
                rest = after;
            }
        }
    }
    out.push(Piece::Text(rest));
    out
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let required_slots = pieces(&body)
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.to_string()),
                Piece::Text(_) => None,
            })
            .collect();
        PromptTemplate {
            name: name.into(),
            body,
            required_slots,
        }
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String> {
        let values: HashMap<&str, &str> = values.iter().copied().collect();
        if let Some(missing) = self.required_slots.iter().find(|s| !values.contains_key(s.as_str())) {
            return Err(Error::validation(format!(
                "template {} is missing slot {{{missing}}}",
                self.name
            )));
        }
        let mut out = String::with_capacity(self.body.len());
        for p in pieces(&self.body) {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => out.push_str(values[s]),
            }
        }
        Ok(out)
    }
}

pub const TEMPLATE_NAMES: [&str; 7] = [
    "thinker_open",
    "thinker_closed_20",
    "thinker_closed_24",
    "verify",
    "rationale",
    "calibration",
    "vqa_context",
];

fn asset(name: &str) -> &'static str {
    match name {
        "thinker_open" => include_str!("../assets/prompts/thinker_open.txt"),
        "thinker_closed_20" => include_str!("../assets/prompts/thinker_closed_20.txt"),
        "thinker_closed_24" => include_str!("../assets/prompts/thinker_closed_24.txt"),
        "verify" => include_str!("../assets/prompts/verify.txt"),
        "rationale" => include_str!("../assets/prompts/rationale.txt"),
        "calibration" => include_str!("../assets/prompts/calibration.txt"),
        "vqa_context" => include_str!("../assets/prompts/vqa_context.txt"),
        _ => unreachable!("unknown template asset {name}"),
    }
}

/// Bundled template by name. Asset files end with one newline that is not
/// part of the prompt.
pub fn template(name: &str) -> Result<&'static PromptTemplate> {
    static TEMPLATES: OnceLock<HashMap<&'static str, PromptTemplate>> = OnceLock::new();
    let all = TEMPLATES.get_or_init(|| {
        TEMPLATE_NAMES
            .iter()
            .map(|&n| {
                let raw = asset(n);
                (n, PromptTemplate::new(n, raw.strip_suffix('\n').unwrap_or(raw)))
            })
            .collect()
    });
    all.get(name)
        .ok_or_else(|| Error::validation(format!("no template named {name:?}")))
}

fn nonempty<'a>(what: &str, value: &'a str) -> Result<&'a str> {
    if value.trim().is_empty() {
        Err(Error::validation(format!("{what} is empty")))
    } else {
        Ok(value)
    }
}

pub fn render_thinker_open(subject: &str, entity_labels: &[&str]) -> Result<String> {
    let subject = nonempty("subject label", subject)?;
    template("thinker_open")?.render(&[("subject", subject), ("entities", &entity_labels.join(", "))])
}

const CANDIDATES_OPEN: &str = "3. A list of relationship candidates: ";
const CANDIDATES_CLOSE: &str = ".\n\nTo effectively";

/// Closed-set thinker prompt. The two bundled vocabularies use their
/// published prompt text unchanged; any other vocabulary is spliced into the
/// candidates line of the 20-class prompt.
pub fn render_thinker_closed(subject: &str, entity_labels: &[&str], vocab: &RelationVocab) -> Result<String> {
    let subject = nonempty("subject label", subject)?;
    if vocab.is_empty() {
        return Err(Error::validation("relation vocabulary is empty"));
    }
    let entities = entity_labels.join(", ");
    let slots = [("subject", subject), ("entities", entities.as_str())];
    if *vocab == RelationVocab::visualds20() {
        return template("thinker_closed_20")?.render(&slots);
    }
    if *vocab == RelationVocab::recode24() {
        return template("thinker_closed_24")?.render(&slots);
    }
    let base = &template("thinker_closed_20")?.body;
    let start = base.find(CANDIDATES_OPEN).expect("closed template lists candidates") + CANDIDATES_OPEN.len();
    let end = start + base[start..].find(CANDIDATES_CLOSE).expect("candidate list terminator");
    let body = format!("{}{}{}", &base[..start], vocab.predicates.join(", "), &base[end..]);
    PromptTemplate::new(format!("thinker_closed_{}", vocab.id), body).render(&slots)
}

/// Extract the candidate predicates a closed-set prompt enumerates.
pub fn listed_candidates(prompt: &str) -> Option<Vec<String>> {
    let start = prompt.find(CANDIDATES_OPEN)? + CANDIDATES_OPEN.len();
    let end = start + prompt[start..].find(CANDIDATES_CLOSE)?;
    Some(prompt[start..end].split(',').map(normalize_label).collect())
}

pub fn render_verify(subject: &str, predicate: &str, object: &str) -> Result<String> {
    template("verify")?.render(&[
        ("subject", nonempty("subject label", subject)?),
        ("relationship", nonempty("predicate", predicate)?),
        ("object", nonempty("object label", object)?),
    ])
}

pub fn render_rationale(subject: &str, object: &str) -> Result<String> {
    template("rationale")?.render(&[
        ("subject", nonempty("subject label", subject)?),
        ("object", nonempty("object label", object)?),
    ])
}

pub fn render_calibration(rationale: &str, subject: &str, predicate: &str, object: &str) -> Result<String> {
    template("calibration")?.render(&[
        ("rationale", nonempty("rationale", rationale)?),
        ("subject", nonempty("subject label", subject)?),
        ("relationship", nonempty("predicate", predicate)?),
        ("object", nonempty("object label", object)?),
    ])
}

pub fn render_vqa_context(context: &str, question: &str) -> Result<String> {
    template("vqa_context")?.render(&[("context", context), ("question", nonempty("question", question)?)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    ArityMismatch,
    Nested,
    SubjectMismatch,
    EmptyPredicate,
    UnknownObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFragment {
    pub fragment: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub accepted: Vec<Triplet>,
    pub skipped: Vec<SkippedFragment>,
}

impl ParseReport {
    pub fn fragment_count(&self) -> usize {
        self.accepted.len() + self.skipped.len()
    }
}

/// Top-level balanced `( ... )` groups, with a flag for nested parentheses.
/// Unclosed groups and stray `)` are not fragments.
fn fragments(text: &str) -> Vec<(&str, bool)> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut nested = false;
    for (i, c) in text.char_indices() {
        match c {
            '(' => {
                if depth == 0 {
                    start = i + 1;
                    nested = false;
                } else {
                    nested = true;
                }
                depth += 1;
            }
            ')' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    out.push((&text[start..i], nested));
                }
            }
            _ => {}
        }
    }
    out
}

/// Turn a thinker completion into candidate triplets for `subject`.
///
/// Total: every balanced fragment ends up either accepted or skipped. When
/// several allowed objects share a label, the unused instance with the
/// highest detection confidence is taken.
pub fn parse_triplets(text: &str, subject: &Entity, allowed_objects: &[Entity]) -> ParseReport {
    let mut report = ParseReport::default();
    let mut used: BTreeSet<&str> = BTreeSet::new();
    for (frag, nested) in fragments(text) {
        let skip = |reason| SkippedFragment {
            fragment: format!("({frag})"),
            reason,
        };
        if nested {
            report.skipped.push(skip(SkipReason::Nested));
            continue;
        }
        let parts: Vec<String> = frag.split(',').map(normalize_label).collect();
        let [s, p, o] = parts.as_slice() else {
            report.skipped.push(skip(SkipReason::ArityMismatch));
            continue;
        };
        if *s != subject.label {
            report.skipped.push(skip(SkipReason::SubjectMismatch));
            continue;
        }
        if p.is_empty() {
            report.skipped.push(skip(SkipReason::EmptyPredicate));
            continue;
        }
        let by_confidence = |a: &&Entity, b: &&Entity| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap_or(std::cmp::Ordering::Equal)
        };
        let mut matching: Vec<&Entity> = allowed_objects
            .iter()
            .filter(|e| e.label == *o && e.id != subject.id)
            .collect();
        matching.sort_by(by_confidence);
        let chosen = matching
            .iter()
            .find(|e| !used.contains(e.id.as_str()))
            .or(matching.first());
        let Some(object) = chosen else {
            report.skipped.push(skip(SkipReason::UnknownObject));
            continue;
        };
        match Triplet::candidate(subject.id.clone(), p, object.id.clone()) {
            Ok(t) => {
                used.insert(object.id.as_str());
                report.accepted.push(t);
            }
            Err(_) => report.skipped.push(skip(SkipReason::EmptyPredicate)),
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
    Unknown,
}

/// Classify a short answer by its first word.
pub fn parse_yes_no(answer: &str) -> YesNo {
    let lower = answer.trim().to_lowercase();
    let first: String = lower
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect();
    match first.as_str() {
        "yes" => YesNo::Yes,
        "no" => YesNo::No,
        _ => YesNo::Unknown,
    }
}
