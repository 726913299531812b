//! ECLIPSE: entity-level CLIPScore with a length penalty.
//!
//! Each relation is captioned as "The {s} is {r} the {o}." and scored against
//! the image with everything outside the subject and object boxes blacked
//! out. A graph's score is the mean over its relations, scaled by a
//! log-barrier penalty that peaks at the dataset's mean graph size `m*`:
//!
//! ```text
//! P(x) = exp(-alpha * (x + (m* - 1) * ln((m* - 1) / (x - 1)) - m*))
//! ```
//!
//! `P(m*) = 1`, the penalty falls off on both sides, and faster for graphs
//! shorter than `m*` than for longer ones. `P(1)` is taken as the limit 0.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{wire::sha256_hex, EmbedInput, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::raster::{mask_image, Raster};
use crate::scene::LocalSceneGraph;

pub const DEFAULT_ALPHA: f64 = 0.01;

/// Neumaier-compensated sum; keeps means independent of summation order
/// to well below 1e-12.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub(crate) fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(compensated_sum(values.iter().copied()) / values.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    m_star: f64,
    alpha: f64,
}

impl PenaltyParams {
    pub fn new(m_star: f64, alpha: f64) -> Result<Self> {
        if !(m_star.is_finite() && m_star > 1.0) {
            return Err(Error::validation(format!("m* must be > 1, got {m_star}")));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::validation(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(PenaltyParams { m_star, alpha })
    }

    pub fn m_star(&self) -> f64 {
        self.m_star
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Barrier scalar `m* - 1`.
    pub fn mu(&self) -> f64 {
        self.m_star - 1.0
    }
}

/// Length penalty for a graph with `x` relations.
pub fn penalty(x: f64, p: &PenaltyParams) -> Result<f64> {
    if !(x.is_finite() && x >= 1.0) {
        return Err(Error::validation(format!("prediction length must be >= 1, got {x}")));
    }
    if x == 1.0 {
        return Ok(0.0);
    }
    let mu = p.mu();
    let shifted = x + mu * (mu / (x - 1.0)).ln() - p.m_star;
    Ok((-p.alpha * shifted).exp())
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let dot = compensated_sum(a.values().iter().zip(b.values()).map(|(x, y)| x * y));
    let na = compensated_sum(a.values().iter().map(|x| x * x)).sqrt();
    let nb = compensated_sum(b.values().iter().map(|x| x * x)).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedCosine);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `max(100 * cos(image, text), 0)`.
pub fn clip_score(image: &EmbeddingVector, text: &EmbeddingVector) -> Result<f64> {
    Ok((100.0 * cosine(image, text)?).max(0.0))
}

/// Mean CLIPScore of a graph; `EmptyGraph` when there is nothing to average.
pub fn graph_clip_score(scores: &[f64]) -> Result<f64> {
    mean(scores).ok_or(Error::EmptyGraph)
}

pub fn triplet_caption(subject: &str, predicate: &str, object: &str) -> Result<String> {
    for (what, v) in [("subject", subject), ("predicate", predicate), ("object", object)] {
        if v.trim().is_empty() {
            return Err(Error::validation(format!("caption {what} is empty")));
        }
    }
    Ok(format!("The {subject} is {predicate} the {object}."))
}

/// Mean relation count over non-empty graphs.
pub fn mean_prediction_length(graphs: &[&LocalSceneGraph]) -> Result<f64> {
    let sizes: Vec<f64> = graphs
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| g.len() as f64)
        .collect();
    mean(&sizes).ok_or(Error::CannotCalibrate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletScore {
    pub subject_id: String,
    pub predicate: String,
    pub object_id: String,
    pub clip_score: f64,
    pub caption: String,
    /// SHA-256 of the PNG-encoded masked image that was embedded.
    pub masked_image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphScore {
    pub image_id: String,
    pub subject_id: String,
    pub size: usize,
    pub mean_clip: f64,
    pub penalty: f64,
    pub eclipse: f64,
}

/// Score one graph from its per-relation CLIPScores (in relation order).
pub fn eclipse(graph: &LocalSceneGraph, scores: &[f64], p: &PenaltyParams) -> Result<GraphScore> {
    if scores.len() != graph.len() {
        return Err(Error::validation(format!(
            "graph {}/{} has {} relations but {} scores",
            graph.image_id,
            graph.subject.id,
            graph.len(),
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=100.0).contains(*s)) {
        return Err(Error::validation(format!("CLIPScore {bad} outside [0, 100]")));
    }
    let (mean_clip, pen) = if graph.is_empty() {
        (0.0, 0.0)
    } else {
        (graph_clip_score(scores)?, penalty(graph.len() as f64, p)?)
    };
    Ok(GraphScore {
        image_id: graph.image_id.clone(),
        subject_id: graph.subject.id.clone(),
        size: graph.len(),
        mean_clip,
        penalty: pen,
        eclipse: pen * mean_clip,
    })
}

/// Unit over which ECLIPSE is computed and averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// One score per local graph (one per subject).
    #[default]
    PerLocal,
    /// All local graphs of an image pooled into one prediction.
    PerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EclipseReport {
    pub alpha: f64,
    pub m_star: f64,
    pub per_graph: Vec<GraphScore>,
    pub dataset_eclipse: f64,
}

/// Two passes: calibrate `m*` over non-empty graphs, then score every graph
/// and average, counting empty graphs as 0.
pub fn dataset_eclipse(graphs: &[LocalSceneGraph], scores: &[Vec<f64>], alpha: f64) -> Result<EclipseReport> {
    dataset_eclipse_with(graphs, scores, alpha, Aggregation::PerLocal)
}

pub fn dataset_eclipse_with(
    graphs: &[LocalSceneGraph],
    scores: &[Vec<f64>],
    alpha: f64,
    aggregation: Aggregation,
) -> Result<EclipseReport> {
    if graphs.len() != scores.len() {
        return Err(Error::validation(format!(
            "{} graphs but {} score lists",
            graphs.len(),
            scores.len()
        )));
    }
    let (units, unit_scores) = match aggregation {
        Aggregation::PerLocal => (graphs.to_vec(), scores.to_vec()),
        Aggregation::PerImage => pool_per_image(graphs, scores)?,
    };
    let refs: Vec<&LocalSceneGraph> = units.iter().collect();
    let m_star = mean_prediction_length(&refs)?;
    // a dataset whose graphs all have one relation calibrates to m* = 1,
    // where the barrier is undefined
    let params = PenaltyParams::new(m_star, alpha)?;
    let per_graph = units
        .iter()
        .zip(&unit_scores)
        .map(|(g, s)| eclipse(g, s, &params))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = per_graph.iter().map(|g| g.eclipse).collect();
    Ok(EclipseReport {
        alpha,
        m_star,
        dataset_eclipse: mean(&values).unwrap_or(0.0),
        per_graph,
    })
}

/// Merge each image's local graphs into one pseudo-graph keyed by the first
/// subject; only sizes and scores matter downstream.
fn pool_per_image(graphs: &[LocalSceneGraph], scores: &[Vec<f64>]) -> Result<(Vec<LocalSceneGraph>, Vec<Vec<f64>>)> {
    let mut order: Vec<&str> = Vec::new();
    let mut pooled: BTreeMap<&str, (LocalSceneGraph, Vec<f64>)> = BTreeMap::new();
    for (g, s) in graphs.iter().zip(scores) {
        let entry = pooled.entry(g.image_id.as_str()).or_insert_with(|| {
            order.push(g.image_id.as_str());
            (
                LocalSceneGraph::empty(g.image_id.clone(), g.subject.clone()),
                Vec::new(),
            )
        });
        let base = entry.0.relations.len();
        for (i, t) in g.relations.iter().enumerate() {
            // re-key so pooled relations stay distinct under the graph invariants
            let mut obj = g.object_of(t).clone();
            obj.id = format!("{}:{}#{}", g.subject.id, obj.id, base + i);
            let mut rel = t.clone();
            rel.subject_id = entry.0.subject.id.clone();
            rel.object_id = obj.id.clone();
            entry.0.objects.push(obj);
            entry.0.relations.push(rel);
        }
        entry.1.extend_from_slice(s);
    }
    let mut units = Vec::new();
    let mut unit_scores = Vec::new();
    for id in order {
        let (g, s) = pooled.remove(id).expect("pooled image");
        units.push(g);
        unit_scores.push(s);
    }
    Ok((units, unit_scores))
}

/// Computes per-relation CLIPScores through an embedder, caching identical
/// masked images and captions by content.
pub struct TripletScorer<'a> {
    embedder: &'a dyn Embedder,
    image_cache: Mutex<HashMap<String, EmbeddingVector>>,
    text_cache: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<'a> TripletScorer<'a> {
    pub fn new(embedder: &'a dyn Embedder) -> Self {
        TripletScorer {
            embedder,
            image_cache: Mutex::new(HashMap::new()),
            text_cache: Mutex::new(HashMap::new()),
        }
    }

    fn embed_cached(
        &self,
        cache: &Mutex<HashMap<String, EmbeddingVector>>,
        key: &str,
        input: impl FnOnce() -> EmbedInput,
    ) -> Result<EmbeddingVector> {
        if let Some(v) = cache.lock().expect("embedding cache poisoned").get(key) {
            return Ok(v.clone());
        }
        let v = self.embedder.embed(&input())?;
        cache
            .lock()
            .expect("embedding cache poisoned")
            .insert(key.to_string(), v.clone());
        Ok(v)
    }

    pub fn score_graph(&self, graph: &LocalSceneGraph, image: &Raster) -> Result<Vec<TripletScore>> {
        graph
            .relations
            .iter()
            .map(|t| {
                let object = graph.object_of(t);
                let masked = mask_image(image, &graph.subject.bbox, &object.bbox)?;
                let png = masked.encode_png()?;
                let digest = sha256_hex(&png);
                let e_img = self.embed_cached(&self.image_cache, &digest, || EmbedInput::Image(png))?;
                let caption = triplet_caption(&graph.subject.label, &t.predicate, &object.label)?;
                let e_txt = self.embed_cached(&self.text_cache, &caption, || EmbedInput::Text(caption.clone()))?;
                Ok(TripletScore {
                    subject_id: t.subject_id.clone(),
                    predicate: t.predicate.clone(),
                    object_id: t.object_id.clone(),
                    clip_score: clip_score(&e_img, &e_txt)?,
                    caption,
                    masked_image: digest,
                })
            })
            .collect()
    }

    /// Score every graph; `images` maps image ids to decoded rasters.
    /// Graphs are scored concurrently, results come back in input order.
    pub fn score_all(
        &self,
        graphs: &[LocalSceneGraph],
        images: &HashMap<String, Raster>,
    ) -> Result<Vec<Vec<TripletScore>>> {
        graphs
            .par_iter()
            .map(|g| {
                if g.is_empty() {
                    return Ok(Vec::new());
                }
                let image = images
                    .get(&g.image_id)
                    .ok_or_else(|| Error::validation(format!("no image loaded for {}", g.image_id)))?;
                self.score_graph(g, image)
            })
            .collect()
    }
}
