use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::normalize_label;

const VISUALDS20: &str = include_str!("../assets/vocab/visualds20.txt");
const RECODE24: &str = include_str!("../assets/vocab/recode24.txt");

/// Closed predicate vocabulary, kept in its published order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr")]
pub struct RelationVocab {
    pub id: String,
    pub predicates: Vec<String>,
}

#[derive(Deserialize)]
struct VocabRepr {
    id: String,
    predicates: Vec<String>,
}

impl TryFrom<VocabRepr> for RelationVocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        RelationVocab::new(r.id, r.predicates)
    }
}

impl RelationVocab {
    pub fn new<S: AsRef<str>>(id: impl Into<String>, predicates: impl IntoIterator<Item = S>) -> Result<Self> {
        let id = id.into();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for p in predicates {
            let p = normalize_label(p.as_ref());
            if p.is_empty() {
                return Err(Error::validation(format!("vocab {id} has an empty predicate")));
            }
            if !seen.insert(p.clone()) {
                return Err(Error::validation(format!("vocab {id} lists {p:?} twice")));
            }
            out.push(p);
        }
        if out.is_empty() {
            return Err(Error::validation(format!("vocab {id} is empty")));
        }
        Ok(RelationVocab { id, predicates: out })
    }

    /// The 20-class set used for comparison with VisualDS.
    pub fn visualds20() -> Self {
        Self::new("visualds20", VISUALDS20.lines()).expect("bundled vocab is valid")
    }

    /// The 24-class set used for comparison with RECODE.
    pub fn recode24() -> Self {
        Self::new("recode24", RECODE24.lines()).expect("bundled vocab is valid")
    }

    pub fn builtin(id: &str) -> Result<Self> {
        match id {
            "visualds20" => Ok(Self::visualds20()),
            "recode24" => Ok(Self::recode24()),
            other => Err(Error::validation(format!(
                "unknown vocab {other:?} (expected visualds20 or recode24)"
            ))),
        }
    }

    /// A vocab file is either a JSON `{id, predicates}` object or plain text
    /// with one predicate per line; plain files take their id from the file stem.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim_start().starts_with('{') {
            return serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e));
        }
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(id, text.lines().filter(|l| !l.trim().is_empty()))
    }

    pub fn contains(&self, predicate: &str) -> bool {
        let p = normalize_label(predicate);
        self.predicates.contains(&p)
    }

    pub fn len(&self) -> usize {
        self.predicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicates.is_empty()
    }
}
