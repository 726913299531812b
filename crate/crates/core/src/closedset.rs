//! Closed-set evaluation: Recall@K, Mean Recall@K and diversity counts.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::eclipse::mean;
use crate::error::{Error, Result};
use crate::scene::{iou, normalize_label, Entity, LocalSceneGraph, Triplet, TripletStatus};
use crate::vocab::RelationVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTriplet {
    pub subject: Entity,
    pub predicate: String,
    pub object: Entity,
}

impl GroundTruthTriplet {
    pub fn new(subject: Entity, predicate: &str, object: Entity) -> Result<Self> {
        let predicate = normalize_label(predicate);
        if predicate.is_empty() {
            return Err(Error::validation("ground-truth predicate is empty"));
        }
        Ok(GroundTruthTriplet {
            subject,
            predicate,
            object,
        })
    }
}

/// A predicted triplet with both ends resolved to entities.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub subject: Entity,
    pub object: Entity,
    pub triplet: Triplet,
}

impl Prediction {
    pub fn confidence(&self) -> f64 {
        self.triplet.confidence.unwrap_or(0.0)
    }
}

/// Flatten verified relations of local graphs into predictions.
pub fn predictions_from<'a>(graphs: impl IntoIterator<Item = &'a LocalSceneGraph>) -> Vec<Prediction> {
    graphs
        .into_iter()
        .flat_map(|g| {
            g.relations.iter().map(move |t| Prediction {
                subject: g.subject.clone(),
                object: g.object_of(t).clone(),
                triplet: t.clone(),
            })
        })
        .collect()
}

fn status_rank(s: TripletStatus) -> u8 {
    match s {
        TripletStatus::VerifiedDirect => 0,
        TripletStatus::VerifiedCoca => 1,
        TripletStatus::Candidate => 2,
        TripletStatus::Rejected => 3,
    }
}

/// Most confident first; ties go to direct verifications, then to the
/// lexicographically smaller (subject, predicate, object) ids.
pub fn rank_predictions(mut preds: Vec<Prediction>) -> Vec<Prediction> {
    preds.sort_by(|a, b| {
        b.confidence()
            .partial_cmp(&a.confidence())
            .unwrap_or(Ordering::Equal)
            .then_with(|| status_rank(a.triplet.status).cmp(&status_rank(b.triplet.status)))
            .then_with(|| a.triplet.key().cmp(&b.triplet.key()))
    });
    preds
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MatchMode {
    /// Predictions were made on ground-truth entities: compare ids.
    #[default]
    GtBoxes,
    /// Predictions carry their own boxes: compare labels and per-end IoU.
    Detected { iou_threshold: f64 },
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

pub fn matches(pred: &Prediction, gt: &GroundTruthTriplet, mode: MatchMode) -> bool {
    if pred.triplet.predicate != gt.predicate {
        return false;
    }
    match mode {
        MatchMode::GtBoxes => pred.subject.id == gt.subject.id && pred.object.id == gt.object.id,
        MatchMode::Detected { iou_threshold } => {
            pred.subject.label == gt.subject.label
                && pred.object.label == gt.object.label
                && iou(&pred.subject.bbox, &gt.subject.bbox) >= iou_threshold
                && iou(&pred.object.bbox, &gt.object.bbox) >= iou_threshold
        }
    }
}

/// Ground truths hit by a greedy one-to-one assignment over the top-K
/// predictions, in rank order.
pub fn matched_ground_truths(
    ranked: &[Prediction],
    gts: &[GroundTruthTriplet],
    k: usize,
    mode: MatchMode,
) -> Vec<bool> {
    let mut hit = vec![false; gts.len()];
    for pred in ranked.iter().take(k) {
        if let Some(i) = (0..gts.len()).find(|&i| !hit[i] && matches(pred, &gts[i], mode)) {
            hit[i] = true;
        }
    }
    hit
}

/// Percentage of ground truths recovered in the top `k`; `None` when there
/// are no ground truths.
pub fn recall_at_k(
    ranked: &[Prediction],
    gts: &[GroundTruthTriplet],
    k: usize,
    mode: MatchMode,
) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::validation("K must be at least 1"));
    }
    if gts.is_empty() {
        return Ok(None);
    }
    let hits = matched_ground_truths(ranked, gts, k, mode);
    let n = hits.iter().filter(|h| **h).count();
    Ok(Some(100.0 * n as f64 / gts.len() as f64))
}

/// Recall for each vocabulary predicate that has ground truths.
pub fn per_category_recall(
    ranked: &[Prediction],
    gts: &[GroundTruthTriplet],
    k: usize,
    vocab: &RelationVocab,
    mode: MatchMode,
) -> Result<BTreeMap<String, f64>> {
    if k == 0 {
        return Err(Error::validation("K must be at least 1"));
    }
    let hits = matched_ground_truths(ranked, gts, k, mode);
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (gt, hit) in gts.iter().zip(&hits) {
        if !vocab.contains(&gt.predicate) {
            continue;
        }
        let c = counts.entry(gt.predicate.as_str()).or_default();
        c.0 += *hit as usize;
        c.1 += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(p, (h, n))| (p.to_string(), 100.0 * h as f64 / n as f64))
        .collect())
}

/// Mean of per-category recalls over categories with at least one ground truth.
pub fn mean_recall_at_k(
    ranked: &[Prediction],
    gts: &[GroundTruthTriplet],
    k: usize,
    vocab: &RelationVocab,
    mode: MatchMode,
) -> Result<Option<f64>> {
    let per = per_category_recall(ranked, gts, k, vocab, mode)?;
    Ok(mean(&per.values().copied().collect::<Vec<_>>()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversityStats {
    pub entity_categories: usize,
    pub relation_categories: usize,
    pub triplet_categories: usize,
}

pub fn diversity_stats(preds: &[Prediction]) -> DiversityStats {
    let mut entities = BTreeSet::new();
    let mut relations = BTreeSet::new();
    let mut triplets = BTreeSet::new();
    for p in preds {
        entities.insert(p.subject.label.as_str());
        entities.insert(p.object.label.as_str());
        relations.insert(p.triplet.predicate.as_str());
        triplets.insert((
            p.subject.label.as_str(),
            p.triplet.predicate.as_str(),
            p.object.label.as_str(),
        ));
    }
    DiversityStats {
        entity_categories: entities.len(),
        relation_categories: relations.len(),
        triplet_categories: triplets.len(),
    }
}

/// Predictions and annotations of one image.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub image_id: String,
    pub predictions: Vec<Prediction>,
    pub ground_truths: Vec<GroundTruthTriplet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub k: usize,
    /// Mean per-image R@K; `None` when no image has ground truths.
    pub recall: Option<f64>,
    pub mean_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub vocab_id: String,
    pub match_mode: MatchMode,
    pub images_evaluated: usize,
    pub rows: Vec<RecallRow>,
    pub diversity: DiversityStats,
}

impl RecallReport {
    /// CSV with recall values in percent, two decimals.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.2}"));
        let mut out = String::from("vocab,k,recall,mean_recall\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.vocab_id,
                r.k,
                fmt(r.recall),
                fmt(r.mean_recall)
            ));
        }
        out
    }
}

/// Dataset-level R@K (mean over images with ground truths) and mR@K (per
/// category, mean over images containing it, then mean over categories).
/// Ground truths outside the vocabulary are ignored.
pub fn evaluate(images: &[ImageEval], ks: &[usize], vocab: &RelationVocab, mode: MatchMode) -> Result<RecallReport> {
    let prepared: Vec<(Vec<Prediction>, Vec<GroundTruthTriplet>)> = images
        .iter()
        .map(|img| {
            let gts = img
                .ground_truths
                .iter()
                .filter(|g| vocab.contains(&g.predicate))
                .cloned()
                .collect();
            (rank_predictions(img.predictions.clone()), gts)
        })
        .collect();
    let mut rows = Vec::new();
    for &k in ks {
        let mut recalls = Vec::new();
        let mut per_category: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (ranked, gts) in &prepared {
            if let Some(r) = recall_at_k(ranked, gts, k, mode)? {
                recalls.push(r);
            }
            for (cat, r) in per_category_recall(ranked, gts, k, vocab, mode)? {
                per_category.entry(cat).or_default().push(r);
            }
        }
        let category_means: Vec<f64> = per_category.values().filter_map(|v| mean(v)).collect();
        rows.push(RecallRow {
            k,
            recall: mean(&recalls),
            mean_recall: mean(&category_means),
        });
    }
    let all: Vec<Prediction> = images.iter().flat_map(|i| i.predictions.iter().cloned()).collect();
    Ok(RecallReport {
        vocab_id: vocab.id.clone(),
        match_mode: mode,
        images_evaluated: prepared.iter().filter(|(_, g)| !g.is_empty()).count(),
        rows,
        diversity: diversity_stats(&all),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{BBox, EntitySource};

    fn ent(id: &str, label: &str) -> Entity {
        Entity::new(
            id,
            label,
            BBox::new(0., 0., 10., 10.).unwrap(),
            1.0,
            EntitySource::GroundTruth,
        )
        .unwrap()
    }

    fn pred(s: &str, p: &str, o: &str, conf: f64, status: TripletStatus) -> Prediction {
        Prediction {
            subject: ent(s, s),
            object: ent(o, o),
            triplet: Triplet::candidate(s, p, o)
                .unwrap()
                .with_status(status, Some(conf))
                .unwrap(),
        }
    }

    fn gt(s: &str, p: &str, o: &str) -> GroundTruthTriplet {
        GroundTruthTriplet::new(ent(s, s), p, ent(o, o)).unwrap()
    }

    use TripletStatus::{VerifiedCoca as Coca, VerifiedDirect as Direct};

    #[test]
    fn ranking() {
        let ps = vec![
            pred("a", "on", "b", 0.9, Direct),
            pred("a", "on", "c", 0.5, Direct),
            pred("a", "on", "d", 0.7, Direct),
        ];
        let conf: Vec<_> = rank_predictions(ps).iter().map(|p| p.confidence()).collect();
        assert_eq!(conf, [0.9, 0.7, 0.5]);

        let ps = vec![pred("a", "on", "b", 0.5, Coca), pred("a", "on", "c", 0.5, Direct)];
        assert_eq!(rank_predictions(ps)[0].triplet.status, Direct);

        let ps = vec![
            pred("b", "on", "a", 0.5, Direct),
            pred("a", "under", "b", 0.5, Direct),
            pred("a", "on", "b", 0.5, Direct),
        ];
        let keys: Vec<_> = rank_predictions(ps)
            .iter()
            .map(|p| {
                format!(
                    "{}-{}-{}",
                    p.triplet.subject_id, p.triplet.predicate, p.triplet.object_id
                )
            })
            .collect();
        assert_eq!(keys, ["a-on-b", "a-under-b", "b-on-a"]);
    }

    #[test]
    fn matching_rules() {
        let p = pred("a", "on", "b", 1.0, Direct);
        assert!(matches(&p, &gt("a", "on", "b"), MatchMode::GtBoxes));
        assert!(!matches(&p, &gt("a", "sitting on", "b"), MatchMode::GtBoxes));

        let mut shifted = pred("a", "on", "b", 1.0, Direct);
        // IoU of [0,10]^2 with [0,10]x[0,4]: 40 / 100 = 0.4
        shifted.object.bbox = BBox::new(0., 0., 10., 4.).unwrap();
        shifted.subject.id = "other".into();
        let mode = MatchMode::Detected {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        };
        assert!(!matches(&shifted, &gt("a", "on", "b"), mode));
        shifted.object.bbox = BBox::new(0., 0., 10., 6.).unwrap();
        assert!(matches(&shifted, &gt("a", "on", "b"), mode));
    }

    #[test]
    fn recall_examples() {
        let gts = vec![
            gt("a", "on", "b"),
            gt("a", "on", "c"),
            gt("a", "on", "d"),
            gt("a", "on", "e"),
        ];
        let ranked = rank_predictions(vec![
            pred("a", "on", "b", 0.9, Direct),
            pred("a", "on", "x", 0.8, Direct),
            pred("a", "on", "c", 0.7, Direct),
        ]);
        assert_eq!(recall_at_k(&ranked, &gts, 10, MatchMode::GtBoxes).unwrap(), Some(50.0));
        assert_eq!(recall_at_k(&ranked, &gts, 1, MatchMode::GtBoxes).unwrap(), Some(25.0));
        assert_eq!(recall_at_k(&ranked, &[], 10, MatchMode::GtBoxes).unwrap(), None);
        assert!(recall_at_k(&ranked, &gts, 0, MatchMode::GtBoxes).is_err());

        let all = rank_predictions(vec![pred("a", "on", "b", 0.9, Direct)]);
        assert_eq!(
            recall_at_k(&all, &gts[..1], 10, MatchMode::GtBoxes).unwrap(),
            Some(100.0)
        );
    }

    #[test]
    fn one_prediction_matches_one_ground_truth() {
        let gts = vec![gt("a", "on", "b"), gt("a", "on", "b")];
        let ranked = vec![pred("a", "on", "b", 0.9, Direct)];
        assert_eq!(recall_at_k(&ranked, &gts, 5, MatchMode::GtBoxes).unwrap(), Some(50.0));
    }

    #[test]
    fn mean_recall_examples() {
        let vocab = RelationVocab::new("v", ["on", "under"]).unwrap();
        let gts = vec![gt("a", "on", "b"), gt("a", "under", "c")];
        let ranked = vec![pred("a", "on", "b", 0.9, Direct)];
        let mr = mean_recall_at_k(&ranked, &gts, 10, &vocab, MatchMode::GtBoxes).unwrap();
        assert_eq!(mr, Some(50.0));

        let single = vec![gt("a", "on", "b"), gt("a", "on", "c")];
        let r = recall_at_k(&ranked, &single, 10, MatchMode::GtBoxes).unwrap();
        let mr = mean_recall_at_k(&ranked, &single, 10, &vocab, MatchMode::GtBoxes).unwrap();
        assert_eq!(r, mr);

        let none = mean_recall_at_k(&ranked, &[], 10, &vocab, MatchMode::GtBoxes).unwrap();
        assert_eq!(none, None);
    }

    #[test]
    fn diversity() {
        let twice = [
            pred("man", "on", "chair", 1.0, Direct),
            pred("man", "on", "chair", 1.0, Direct),
        ];
        assert_eq!(
            diversity_stats(&twice),
            DiversityStats {
                entity_categories: 2,
                relation_categories: 1,
                triplet_categories: 1
            }
        );
        assert_eq!(diversity_stats(&[]), DiversityStats::default());
        let two = [
            pred("man", "on", "chair", 1.0, Direct),
            pred("dog", "under", "chair", 1.0, Direct),
        ];
        let d = diversity_stats(&two);
        assert_eq!(
            (d.entity_categories, d.relation_categories, d.triplet_categories),
            (3, 2, 2)
        );
    }

    #[test]
    fn dataset_evaluation_skips_images_without_ground_truth() {
        let vocab = RelationVocab::new("v", ["on", "under"]).unwrap();
        let images = vec![
            ImageEval {
                image_id: "1".into(),
                predictions: vec![pred("a", "on", "b", 0.9, Direct)],
                ground_truths: vec![gt("a", "on", "b"), gt("a", "under", "b")],
            },
            ImageEval {
                image_id: "2".into(),
                predictions: vec![pred("c", "on", "d", 0.9, Direct)],
                ground_truths: vec![],
            },
            ImageEval {
                image_id: "3".into(),
                predictions: vec![],
                ground_truths: vec![gt("e", "on", "f"), gt("e", "hugging", "f")],
            },
        ];
        let r = evaluate(&images, &[10], &vocab, MatchMode::GtBoxes).unwrap();
        assert_eq!(r.images_evaluated, 2);
        // per image: 50, 0 -> 25; per category: on = (100 + 0)/2, under = 0 -> 25
        assert_eq!(r.rows[0].recall, Some(25.0));
        assert_eq!(r.rows[0].mean_recall, Some(25.0));
        assert!(r.to_csv().contains("v,10,25.00,25.00"));
    }
}
