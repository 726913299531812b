//! Subject-centred scene graph generation.
//!
//! For one image: detect (or take given) entities, pick the subject, keep the
//! entities whose boxes overlap it, ask the thinker for triplets, then verify
//! each candidate. A candidate the verifier does not confirm goes through
//! co-calibration (CoCa): the verifier explains what it sees, and the
//! calibrator decides whether the candidate follows from that explanation.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::backends::{ImageRef, Observer, Thinker, Verifier, VerifierAnswer};
use crate::error::{Error, Result};
use crate::prompts::{self, parse_yes_no, YesNo};
use crate::scene::{
    iou, merge_global, normalize_label, BBox, Entity, GlobalSceneGraph, LocalSceneGraph, Triplet, TripletStatus,
};
use crate::vocab::RelationVocab;

/// How the caller designates the subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum SubjectSpec {
    Label(String),
    Box(BBox),
    Point([f64; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalMode {
    Open,
    Closed(RelationVocab),
}

/// Where entities come from: the observer, or a fixed (ground-truth) list.
#[derive(Debug, Clone, PartialEq)]
pub enum EntityInput {
    Detect,
    Given(Vec<Entity>),
}

/// Which model answers the calibration question.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationRoute {
    #[default]
    Thinker,
    Verifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "yes")]
    pub coca: bool,
    #[serde(default)]
    pub calibration_route: CalibrationRoute,
    /// Confidence given to triplets rescued by co-calibration.
    #[serde(default = "default_coca_confidence")]
    pub coca_confidence: f64,
    /// Maximum verifications in flight per image.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn yes() -> bool {
    true
}

fn default_coca_confidence() -> f64 {
    0.5
}

fn default_parallelism() -> usize {
    4
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            coca: true,
            calibration_route: CalibrationRoute::Thinker,
            coca_confidence: default_coca_confidence(),
            parallelism: default_parallelism(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub parsed: YesNo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yes_probability: Option<f64>,
}

impl From<VerifierAnswer> for Answer {
    fn from(a: VerifierAnswer) -> Self {
        Answer {
            parsed: parse_yes_no(&a.text),
            text: a.text,
            yes_probability: a.yes_probability,
        }
    }
}

/// Everything asked and answered while verifying one candidate.
///
/// A trace whose `final_status` is still `candidate` is partial: a backend
/// call failed before a verdict was reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationTrace {
    pub image_id: String,
    pub subject_label: String,
    pub object_label: String,
    pub triplet: Triplet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_answer: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_answer: Option<Answer>,
    pub final_status: TripletStatus,
}

impl VerificationTrace {
    /// Check that the verdict follows from the recorded answers.
    pub fn is_consistent(&self, coca: bool) -> bool {
        let Some(verify) = &self.verify_answer else {
            return false;
        };
        let direct = verify.parsed == YesNo::Yes;
        let calibrated = self.calibration_answer.as_ref().map(|a| a.parsed == YesNo::Yes);
        let shape_ok = if direct || !coca {
            self.rationale.is_none() && self.calibration_answer.is_none()
        } else {
            self.rationale.is_some() && self.calibration_answer.is_some()
        };
        let status_ok = match self.final_status {
            TripletStatus::VerifiedDirect => direct,
            TripletStatus::VerifiedCoca => !direct && calibrated == Some(true),
            TripletStatus::Rejected => !direct && calibrated != Some(true),
            TripletStatus::Candidate => false,
        };
        shape_ok && status_ok && self.triplet.status == self.final_status
    }
}

/// A verification that stopped on a backend error, with what was recorded so far.
#[derive(Debug)]
pub struct VerifyFailure {
    pub error: Error,
    pub partial: Box<VerificationTrace>,
}

/// A local generation that failed; `traces` holds completed and partial traces.
#[derive(Debug)]
pub struct GenerateFailure {
    pub error: Error,
    pub traces: Vec<VerificationTrace>,
}

impl From<Error> for GenerateFailure {
    fn from(error: Error) -> Self {
        GenerateFailure {
            error,
            traces: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutput {
    pub graph: LocalSceneGraph,
    pub traces: Vec<VerificationTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectFailure {
    pub image_id: String,
    pub subject_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalOutput {
    pub graph: GlobalSceneGraph,
    pub traces: Vec<VerificationTrace>,
    pub failures: Vec<SubjectFailure>,
}

fn by_confidence(a: &Entity, b: &Entity) -> std::cmp::Ordering {
    a.confidence
        .partial_cmp(&b.confidence)
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Resolve a subject designation against the available entities.
///
/// Labels pick the most confident match; boxes the best IoU (then
/// confidence); points the smallest containing box (then confidence).
pub fn select_subject(entities: &[Entity], spec: &SubjectSpec) -> Result<Entity> {
    let not_found = || Error::SubjectNotFound(format!("{spec:?}"));
    let chosen = match spec {
        SubjectSpec::Label(label) => {
            let label = normalize_label(label);
            entities
                .iter()
                .filter(|e| e.label == label)
                .reduce(|best, e| if by_confidence(e, best).is_gt() { e } else { best })
        }
        SubjectSpec::Box(b) => entities
            .iter()
            .map(|e| (iou(&e.bbox, b), e))
            .filter(|(overlap, _)| *overlap > 0.0)
            .reduce(|best, cur| {
                let better = cur.0 > best.0 || (cur.0 == best.0 && by_confidence(cur.1, best.1).is_gt());
                if better {
                    cur
                } else {
                    best
                }
            })
            .map(|(_, e)| e),
        SubjectSpec::Point([x, y]) => entities
            .iter()
            .filter(|e| e.bbox.contains_point(*x, *y))
            .reduce(|best, e| {
                let (ea, ba) = (e.bbox.area(), best.bbox.area());
                if ea < ba || (ea == ba && by_confidence(e, best).is_gt()) {
                    e
                } else {
                    best
                }
            }),
    };
    chosen.cloned().ok_or_else(not_found)
}

/// Entities other than the subject whose boxes overlap it (IoU > 0), in input order.
pub fn candidate_objects(subject: &Entity, entities: &[Entity]) -> Vec<Entity> {
    entities
        .iter()
        .filter(|e| e.id != subject.id && iou(&subject.bbox, &e.bbox) > 0.0)
        .cloned()
        .collect()
}

/// Turn local graphs into the context sentences of a VQA prompt.
pub fn build_vqa_prompt(question: &str, graphs: &[LocalSceneGraph]) -> Result<String> {
    let sentences: Vec<String> = graphs
        .iter()
        .flat_map(|g| {
            g.relations
                .iter()
                .map(move |t| format!("A {} is {} a {}.", g.subject.label, t.predicate, g.object_of(t).label))
        })
        .collect();
    let joined = sentences.join(" ");
    let context = joined.strip_suffix('.').unwrap_or(&joined);
    prompts::render_vqa_context(context, question)
}

/// Picks which subjects a question is about.
pub trait SubjectExtractor: Send + Sync {
    fn subjects(&self, question: &str, known_labels: &[&str]) -> Vec<String>;
}

/// Matches known entity labels as whole words (or word sequences) of the
/// question, ignoring case and a trailing plural "s".
#[derive(Debug, Default, Clone, Copy)]
pub struct LabelMatchExtractor;

impl SubjectExtractor for LabelMatchExtractor {
    fn subjects(&self, question: &str, known_labels: &[&str]) -> Vec<String> {
        let words: Vec<String> = question
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect();
        let singular = |w: &str| w.strip_suffix('s').unwrap_or(w).to_string();
        let mut out = BTreeSet::new();
        for label in known_labels {
            let parts: Vec<&str> = label.split(' ').collect();
            let hit = words
                .windows(parts.len())
                .any(|win| win.iter().zip(&parts).all(|(w, p)| w == p || singular(w) == *p));
            if hit {
                out.insert(label.to_string());
            }
        }
        out.into_iter().collect()
    }
}

/// Keep the graphs whose subject the extractor finds in `question`.
pub fn graphs_for_question<'g>(
    question: &str,
    graphs: &'g [LocalSceneGraph],
    extractor: &dyn SubjectExtractor,
) -> Vec<&'g LocalSceneGraph> {
    let labels: Vec<&str> = graphs.iter().map(|g| g.subject.label.as_str()).collect();
    let wanted: HashSet<String> = extractor.subjects(question, &labels).into_iter().collect();
    graphs.iter().filter(|g| wanted.contains(&g.subject.label)).collect()
}

/// The orchestrator. Backends are shared handles; the pipeline itself keeps
/// no per-image state.
pub struct Pipeline {
    observer: Arc<dyn Observer>,
    thinker: Arc<dyn Thinker>,
    verifier: Arc<dyn Verifier>,
    config: PipelineConfig,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(
        observer: Arc<dyn Observer>,
        thinker: Arc<dyn Thinker>,
        verifier: Arc<dyn Verifier>,
        config: PipelineConfig,
    ) -> Result<Self> {
        if config.parallelism == 0 {
            return Err(Error::validation("parallelism must be at least 1"));
        }
        if !(0.0..=1.0).contains(&config.coca_confidence) {
            return Err(Error::validation(format!(
                "coca_confidence {} outside [0, 1]",
                config.coca_confidence
            )));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| Error::validation(format!("cannot start worker pool: {e}")))?;
        Ok(Pipeline {
            observer,
            thinker,
            verifier,
            config,
            pool,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn entities(&self, image: &ImageRef, input: &EntityInput) -> Result<Vec<Entity>> {
        match input {
            // open vocabulary: no grounding text, detect everything
            EntityInput::Detect => self.observer.detect(image, None),
            EntityInput::Given(es) => Ok(es.clone()),
        }
    }

    /// Ask the thinker for candidate triplets between `subject` and `objects`.
    pub fn propose(&self, subject: &Entity, objects: &[Entity], mode: &ProposalMode) -> Result<Vec<Triplet>> {
        if objects.is_empty() {
            return Ok(Vec::new());
        }
        let labels: Vec<&str> = objects.iter().map(|o| o.label.as_str()).collect();
        let prompt = match mode {
            ProposalMode::Open => prompts::render_thinker_open(&subject.label, &labels)?,
            ProposalMode::Closed(vocab) => prompts::render_thinker_closed(&subject.label, &labels, vocab)?,
        };
        let completion = self.thinker.complete(&prompt)?;
        let report = prompts::parse_triplets(&completion, subject, objects);
        if !report.skipped.is_empty() {
            debug!(subject = %subject.id, skipped = report.skipped.len(), "thinker fragments skipped");
        }
        let mut seen = HashSet::new();
        Ok(report
            .accepted
            .into_iter()
            .filter(|t| match mode {
                ProposalMode::Open => true,
                ProposalMode::Closed(vocab) => vocab.contains(&t.predicate),
            })
            .filter(|t| seen.insert((t.subject_id.clone(), t.predicate.clone(), t.object_id.clone())))
            .collect())
    }

    fn calibrate(&self, image: &ImageRef, prompt: &str) -> Result<Answer> {
        match self.config.calibration_route {
            CalibrationRoute::Thinker => {
                let text = self.thinker.complete(prompt)?;
                Ok(Answer {
                    parsed: parse_yes_no(&text),
                    text,
                    yes_probability: None,
                })
            }
            CalibrationRoute::Verifier => self.verifier.answer(image, prompt).map(Answer::from),
        }
    }

    /// Verify one candidate, falling back to co-calibration on a non-yes answer.
    pub fn verify_with_coca(
        &self,
        candidate: &Triplet,
        subject: &Entity,
        object: &Entity,
        image: &ImageRef,
    ) -> std::result::Result<VerificationTrace, VerifyFailure> {
        let mut trace = VerificationTrace {
            image_id: image.image_id.clone(),
            subject_label: subject.label.clone(),
            object_label: object.label.clone(),
            triplet: candidate.clone(),
            verify_answer: None,
            rationale: None,
            calibration_answer: None,
            final_status: TripletStatus::Candidate,
        };
        macro_rules! attempt {
            ($e:expr) => {
                match $e {
                    Ok(v) => v,
                    Err(error) => {
                        return Err(VerifyFailure {
                            error,
                            partial: Box::new(trace),
                        })
                    }
                }
            };
        }
        if candidate.status != TripletStatus::Candidate {
            let error = Error::validation(format!("triplet already has status {}", candidate.status));
            return Err(VerifyFailure {
                error,
                partial: Box::new(trace),
            });
        }
        let (s, p, o) = (
            subject.label.as_str(),
            candidate.predicate.as_str(),
            object.label.as_str(),
        );

        let question = attempt!(prompts::render_verify(s, p, o));
        let answer: Answer = attempt!(self.verifier.answer(image, &question)).into();
        let direct = answer.parsed == YesNo::Yes;
        let direct_confidence = answer.yes_probability.unwrap_or(1.0);
        trace.verify_answer = Some(answer);

        let (status, confidence) = if direct {
            (TripletStatus::VerifiedDirect, Some(direct_confidence))
        } else if !self.config.coca {
            (TripletStatus::Rejected, None)
        } else {
            let ask = attempt!(prompts::render_rationale(s, o));
            let rationale = attempt!(self.verifier.answer(image, &ask)).text;
            trace.rationale = Some(rationale.clone());
            let calibration = attempt!(prompts::render_calibration(rationale.trim(), s, p, o));
            let verdict = attempt!(self.calibrate(image, &calibration));
            let rescued = verdict.parsed == YesNo::Yes;
            trace.calibration_answer = Some(verdict);
            if rescued {
                (TripletStatus::VerifiedCoca, Some(self.config.coca_confidence))
            } else {
                (TripletStatus::Rejected, None)
            }
        };
        trace.triplet = attempt!(candidate.clone().with_status(status, confidence));
        trace.final_status = status;
        Ok(trace)
    }

    /// Build the local graph of `subject` from an already known entity list.
    pub fn generate_for_subject(
        &self,
        image: &ImageRef,
        entities: &[Entity],
        subject: &Entity,
        mode: &ProposalMode,
    ) -> std::result::Result<LocalOutput, GenerateFailure> {
        let objects = candidate_objects(subject, entities);
        let candidates = self.propose(subject, &objects, mode)?;
        let results: Vec<_> = self.pool.install(|| {
            candidates
                .par_iter()
                .map(|t| {
                    let object = objects
                        .iter()
                        .find(|o| o.id == t.object_id)
                        .expect("parser only emits allowed objects");
                    self.verify_with_coca(t, subject, object, image)
                })
                .collect()
        });

        let mut traces = Vec::with_capacity(results.len());
        let mut first_error = None;
        for r in results {
            match r {
                Ok(trace) => traces.push(trace),
                Err(VerifyFailure { error, partial }) => {
                    traces.push(*partial);
                    first_error.get_or_insert(error);
                }
            }
        }
        if let Some(error) = first_error {
            return Err(GenerateFailure { error, traces });
        }

        let mut relations: Vec<Triplet> = traces
            .iter()
            .filter(|t| t.final_status.is_verified())
            .map(|t| t.triplet.clone())
            .collect();
        relations.sort_by(|a, b| (&a.object_id, &a.predicate).cmp(&(&b.object_id, &b.predicate)));
        let used: BTreeSet<&str> = relations.iter().map(|t| t.object_id.as_str()).collect();
        let mut kept: Vec<Entity> = objects
            .iter()
            .filter(|o| used.contains(o.id.as_str()))
            .cloned()
            .collect();
        kept.sort_by(|a, b| a.id.cmp(&b.id));
        let graph =
            LocalSceneGraph::new(image.image_id.clone(), subject.clone(), kept, relations).map_err(|error| {
                GenerateFailure {
                    error,
                    traces: traces.clone(),
                }
            })?;
        Ok(LocalOutput { graph, traces })
    }

    /// Local scene graph for the subject designated by `spec`.
    pub fn generate_local(
        &self,
        image: &ImageRef,
        input: &EntityInput,
        spec: &SubjectSpec,
        mode: &ProposalMode,
    ) -> std::result::Result<LocalOutput, GenerateFailure> {
        let entities = self.entities(image, input)?;
        let subject = select_subject(&entities, spec)?;
        self.generate_for_subject(image, &entities, &subject, mode)
    }

    /// Every entity in turn as the subject. A failing subject is recorded and
    /// skipped; only an entity-detection failure aborts the image.
    pub fn generate_global(&self, image: &ImageRef, input: &EntityInput, mode: &ProposalMode) -> Result<GlobalOutput> {
        let entities = self.entities(image, input)?;
        let mut locals = Vec::new();
        let mut traces = Vec::new();
        let mut failures = Vec::new();
        for subject in &entities {
            match self.generate_for_subject(image, &entities, subject, mode) {
                Ok(out) => {
                    locals.push(out.graph);
                    traces.extend(out.traces);
                }
                Err(GenerateFailure { error, traces: partial }) => {
                    traces.extend(partial);
                    failures.push(SubjectFailure {
                        image_id: image.image_id.clone(),
                        subject_id: subject.id.clone(),
                        error: error.to_string(),
                    });
                }
            }
        }
        Ok(GlobalOutput {
            graph: merge_global(&image.image_id, locals)?,
            traces,
            failures,
        })
    }
}
