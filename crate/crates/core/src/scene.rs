//! Domain values shared by every stage: boxes, entities, triplets and the
//! local/global scene graphs built from them.
//!
//! All constructors validate; deserialization goes through the same checks so
//! an invalid value can never be observed once it has been built.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trim, lowercase and collapse internal whitespace runs to one space.
pub fn normalize_label(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BBoxRepr")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BBoxRepr {
    Array([f64; 4]),
    Fields {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
}

impl TryFrom<BBoxRepr> for BBox {
    type Error = Error;

    fn try_from(repr: BBoxRepr) -> Result<Self> {
        match repr {
            BBoxRepr::Array([a, b, c, d]) => BBox::new(a, b, c, d),
            BBoxRepr::Fields {
                x_min,
                y_min,
                x_max,
                y_max,
            } => BBox::new(x_min, y_min, x_max, y_max),
        }
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::validation(format!("box has non-finite coordinates {coords:?}")));
        }
        if x_min < 0.0 || y_min < 0.0 {
            return Err(Error::validation(format!("box has negative coordinates {coords:?}")));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::validation(format!("degenerate box {coords:?}")));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Whether the box lies inside a `width` x `height` image.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    /// Closed containment: points on the border count as inside.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Intersection over union. Edge-touching boxes have zero intersection.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntitySource {
    Detected,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EntityRepr")]
pub struct Entity {
    pub id: String,
    pub label: String,
    pub bbox: BBox,
    pub confidence: f64,
    pub source: EntitySource,
}

#[derive(Deserialize)]
struct EntityRepr {
    id: String,
    label: String,
    bbox: BBox,
    confidence: f64,
    source: EntitySource,
}

impl TryFrom<EntityRepr> for Entity {
    type Error = Error;

    fn try_from(r: EntityRepr) -> Result<Self> {
        Entity::new(r.id, &r.label, r.bbox, r.confidence, r.source)
    }
}

impl Entity {
    pub fn new(id: impl Into<String>, label: &str, bbox: BBox, confidence: f64, source: EntitySource) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::validation("entity id is empty"));
        }
        let label = normalize_label(label);
        if label.is_empty() {
            return Err(Error::validation(format!("entity {id} has an empty label")));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::validation(format!(
                "entity {id} confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Entity {
            id,
            label,
            bbox,
            confidence,
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletStatus {
    Candidate,
    VerifiedDirect,
    VerifiedCoca,
    Rejected,
}

impl TripletStatus {
    pub fn is_verified(self) -> bool {
        matches!(self, TripletStatus::VerifiedDirect | TripletStatus::VerifiedCoca)
    }
}

impl fmt::Display for TripletStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TripletStatus::Candidate => "candidate",
            TripletStatus::VerifiedDirect => "verified_direct",
            TripletStatus::VerifiedCoca => "verified_coca",
            TripletStatus::Rejected => "rejected",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TripletRepr")]
pub struct Triplet {
    pub subject_id: String,
    pub predicate: String,
    pub object_id: String,
    pub status: TripletStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Deserialize)]
struct TripletRepr {
    subject_id: String,
    predicate: String,
    object_id: String,
    status: TripletStatus,
    #[serde(default)]
    confidence: Option<f64>,
}

impl TryFrom<TripletRepr> for Triplet {
    type Error = Error;

    fn try_from(r: TripletRepr) -> Result<Self> {
        Triplet::candidate(r.subject_id, &r.predicate, r.object_id)?.with_status(r.status, r.confidence)
    }
}

impl Triplet {
    pub fn candidate(subject_id: impl Into<String>, predicate: &str, object_id: impl Into<String>) -> Result<Self> {
        let subject_id = subject_id.into();
        let object_id = object_id.into();
        if subject_id == object_id {
            return Err(Error::validation(format!(
                "triplet relates entity {subject_id} to itself"
            )));
        }
        let predicate = normalize_label(predicate);
        if predicate.is_empty() {
            return Err(Error::validation("triplet predicate is empty"));
        }
        Ok(Triplet {
            subject_id,
            predicate,
            object_id,
            status: TripletStatus::Candidate,
            confidence: None,
        })
    }

    pub fn with_status(mut self, status: TripletStatus, confidence: Option<f64>) -> Result<Self> {
        if let Some(c) = confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::validation(format!("triplet confidence {c} outside [0, 1]")));
            }
        }
        self.status = status;
        self.confidence = confidence;
        Ok(self)
    }

    /// Identity used for deduplication: (subject, predicate, object).
    pub fn key(&self) -> (&str, &str, &str) {
        (&self.subject_id, &self.predicate, &self.object_id)
    }
}

/// One subject, the objects it relates to, and its verified relations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LocalRepr")]
pub struct LocalSceneGraph {
    pub image_id: String,
    pub subject: Entity,
    pub objects: Vec<Entity>,
    pub relations: Vec<Triplet>,
}

#[derive(Deserialize)]
struct LocalRepr {
    image_id: String,
    subject: Entity,
    objects: Vec<Entity>,
    relations: Vec<Triplet>,
}

impl TryFrom<LocalRepr> for LocalSceneGraph {
    type Error = Error;

    fn try_from(r: LocalRepr) -> Result<Self> {
        LocalSceneGraph::new(r.image_id, r.subject, r.objects, r.relations)
    }
}

impl LocalSceneGraph {
    pub fn new(
        image_id: impl Into<String>,
        subject: Entity,
        objects: Vec<Entity>,
        relations: Vec<Triplet>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        let mut ids = HashSet::new();
        ids.insert(subject.id.as_str());
        for o in &objects {
            if !ids.insert(o.id.as_str()) {
                return Err(Error::validation(format!(
                    "graph for {} lists entity {} twice",
                    subject.id, o.id
                )));
            }
        }
        for t in &relations {
            if t.subject_id != subject.id {
                return Err(Error::validation(format!(
                    "relation subject {} differs from graph subject {}",
                    t.subject_id, subject.id
                )));
            }
            if !objects.iter().any(|o| o.id == t.object_id) {
                return Err(Error::validation(format!(
                    "relation object {} is not among the graph objects",
                    t.object_id
                )));
            }
            if !t.status.is_verified() {
                return Err(Error::validation(format!(
                    "relation ({}, {}, {}) has status {}",
                    t.subject_id, t.predicate, t.object_id, t.status
                )));
            }
        }
        Ok(LocalSceneGraph {
            image_id,
            subject,
            objects,
            relations,
        })
    }

    pub fn empty(image_id: impl Into<String>, subject: Entity) -> Self {
        LocalSceneGraph {
            image_id: image_id.into(),
            subject,
            objects: Vec::new(),
            relations: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        if self.subject.id == id {
            return Some(&self.subject);
        }
        self.objects.iter().find(|o| o.id == id)
    }

    /// The object entity a relation points at.
    pub fn object_of(&self, t: &Triplet) -> &Entity {
        // construction guarantees the object is present
        self.objects
            .iter()
            .find(|o| o.id == t.object_id)
            .expect("relation object resolved at construction")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSceneGraph {
    pub image_id: String,
    pub locals: Vec<LocalSceneGraph>,
}

impl GlobalSceneGraph {
    pub fn triplet_count(&self) -> usize {
        self.locals.iter().map(LocalSceneGraph::len).sum()
    }

    pub fn local(&self, subject_id: &str) -> Option<&LocalSceneGraph> {
        self.locals.iter().find(|l| l.subject.id == subject_id)
    }
}

/// Collect per-subject graphs of one image into a global graph.
pub fn merge_global(image_id: &str, locals: Vec<LocalSceneGraph>) -> Result<GlobalSceneGraph> {
    let mut seen = HashSet::new();
    for l in &locals {
        if l.image_id != image_id {
            return Err(Error::validation(format!(
                "local graph for image {} merged into image {image_id}",
                l.image_id
            )));
        }
        if !seen.insert(l.subject.id.clone()) {
            return Err(Error::Conflict(format!(
                "subject {} appears in more than one local graph",
                l.subject.id
            )));
        }
    }
    Ok(GlobalSceneGraph {
        image_id: image_id.to_string(),
        locals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn ent(id: &str, label: &str, bbox: BBox) -> Entity {
        Entity::new(id, label, bbox, 0.9, EntitySource::Detected).unwrap()
    }

    fn verified(s: &str, p: &str, o: &str) -> Triplet {
        Triplet::candidate(s, p, o)
            .unwrap()
            .with_status(TripletStatus::VerifiedDirect, Some(1.0))
            .unwrap()
    }

    fn local(subject: &str, n: usize) -> LocalSceneGraph {
        let s = ent(subject, "man", bb(0.0, 0.0, 10.0, 10.0));
        let objects: Vec<_> = (0..n)
            .map(|i| ent(&format!("{subject}-o{i}"), "cup", bb(1.0, 1.0, 5.0, 5.0)))
            .collect();
        let relations = objects.iter().map(|o| verified(subject, "holding", &o.id)).collect();
        LocalSceneGraph::new("img", s, objects, relations).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bb(0.0, 0.0, 1.0, 1.0), &bb(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &bb(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn edge_touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bb(0.0, 0.0, 1.0, 1.0), &bb(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox::new(-1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
    }

    #[test]
    fn bbox_accepts_array_and_object_forms() {
        let a: BBox = serde_json::from_str("[0, 0, 2, 3]").unwrap();
        let b: BBox = serde_json::from_str(r#"{"x_min":0,"y_min":0,"x_max":2,"y_max":3}"#).unwrap();
        assert_eq!(a, b);
        assert!(serde_json::from_str::<BBox>("[2, 0, 2, 3]").is_err());
    }

    #[test]
    fn labels_are_normalized() {
        let e = ent("e1", "  Coffee   Cup ", bb(0.0, 0.0, 1.0, 1.0));
        assert_eq!(e.label, "coffee cup");
        assert!(Entity::new("e2", "   ", bb(0.0, 0.0, 1.0, 1.0), 0.5, EntitySource::Detected).is_err());
    }

    #[test]
    fn self_relation_requires_distinct_instances() {
        assert!(Triplet::candidate("m1", "talking to", "m1").is_err());
        let t = Triplet::candidate("m1", "Talking  To", "m2").unwrap();
        assert_eq!(t.predicate, "talking to");
    }

    #[test]
    fn local_graph_rejects_unverified_and_dangling_relations() {
        let s = ent("s", "man", bb(0.0, 0.0, 2.0, 2.0));
        let o = ent("o", "cup", bb(0.0, 0.0, 1.0, 1.0));
        let cand = Triplet::candidate("s", "holding", "o").unwrap();
        assert!(LocalSceneGraph::new("img", s.clone(), vec![o.clone()], vec![cand]).is_err());
        let dangling = verified("s", "holding", "x");
        assert!(LocalSceneGraph::new("img", s.clone(), vec![o.clone()], vec![dangling]).is_err());
        let wrong_subject = verified("o", "holding", "s");
        assert!(LocalSceneGraph::new("img", s, vec![o], vec![wrong_subject]).is_err());
    }

    #[test]
    fn merge_examples() {
        let g = merge_global("img", vec![]).unwrap();
        assert!(g.locals.is_empty());
        let g = merge_global("img", vec![local("a", 2), local("b", 3)]).unwrap();
        assert_eq!(g.triplet_count(), 5);
        let err = merge_global("img", vec![local("a", 2), local("a", 2)]).unwrap_err();
        assert!(matches!(err, Error::Conflict(_)));
        let mut other = local("c", 1);
        other.image_id = "img2".into();
        assert!(matches!(
            merge_global("img", vec![local("a", 1), other]).unwrap_err(),
            Error::Validation(_)
        ));
    }

    #[test]
    fn enums_serialize_lowercase() {
        assert_eq!(
            serde_json::to_string(&TripletStatus::VerifiedCoca).unwrap(),
            "\"verified_coca\""
        );
        assert_eq!(
            serde_json::to_string(&EntitySource::GroundTruth).unwrap(),
            "\"ground_truth\""
        );
    }

    #[test]
    fn graph_deserialization_revalidates() {
        let g = local("a", 1);
        let mut v = serde_json::to_value(&g).unwrap();
        v["relations"][0]["status"] = "rejected".into();
        assert!(serde_json::from_value::<LocalSceneGraph>(v).is_err());
    }
}
