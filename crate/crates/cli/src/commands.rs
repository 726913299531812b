use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use elegant::backends::{ImageRef, RemoteModel};
use elegant::closedset::{self, ImageEval, MatchMode};
use elegant::eclipse::{self, PenaltyParams, TripletScorer};
use elegant::ingest::{
    self, AnnotatedImage, RunWriter, ECLIPSE_REPORT_FILE, GRAPHS_FILE, RECALL_REPORT_FILE, TRACES_FILE,
};
use elegant::pipeline::{
    self, EntityInput, LabelMatchExtractor, Pipeline, ProposalMode, SubjectFailure, VerificationTrace,
};
use elegant::raster::Raster;
use elegant::scene::{merge_global, GlobalSceneGraph, LocalSceneGraph, TripletStatus};
use elegant::Error;
use serde::Serialize;

use crate::config::{CliConfig, ImageEntry, Mode};
use crate::router::Router;

pub const FAILURES_FILE: &str = "failures.jsonl";
pub const TRIPLET_SCORES_FILE: &str = "triplet_scores.jsonl";
pub const RECALL_CSV_FILE: &str = "recall_report.csv";

fn model(cfg: &CliConfig) -> Result<Arc<RemoteModel>> {
    let router = Router::new(&cfg.backends, cfg.mock_fixtures.as_deref())?;
    Ok(Arc::new(
        RemoteModel::new(router.into_arc()).with_inline_images(cfg.inline_images()),
    ))
}

fn load_annotations(cfg: &CliConfig) -> Result<Option<Vec<AnnotatedImage>>> {
    cfg.annotations
        .as_deref()
        .map(ingest::load_annotations)
        .transpose()
        .map_err(Into::into)
}

/// Images to process: the configured list, else every annotated image.
fn image_entries(cfg: &CliConfig, annotations: Option<&[AnnotatedImage]>) -> Result<Vec<ImageEntry>> {
    if !cfg.images.is_empty() {
        return Ok(cfg.images.clone());
    }
    let entries: Vec<ImageEntry> = annotations
        .unwrap_or_default()
        .iter()
        .map(|a| ImageEntry {
            image_id: a.image_id.clone(),
            uri: a.uri.clone(),
            width: a.width,
            height: a.height,
            subjects: Vec::new(),
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::Validation("no images: give `images` in the config or an annotation file".into()).into());
    }
    Ok(entries)
}

fn read_graphs(cfg: &CliConfig) -> Result<Vec<GlobalSceneGraph>> {
    Ok(ingest::read_jsonl(&cfg.out_dir.join(GRAPHS_FILE))?)
}

fn locals(graphs: &[GlobalSceneGraph]) -> Vec<LocalSceneGraph> {
    graphs.iter().flat_map(|g| g.locals.iter().cloned()).collect()
}

fn pool(cfg: &CliConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .context("start worker pool")
}

pub fn generate(cfg: &CliConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let annotations = load_annotations(cfg)?;
    let images = image_entries(cfg, annotations.as_deref())?;
    let by_id: HashMap<&str, &AnnotatedImage> =
        annotations.iter().flatten().map(|a| (a.image_id.as_str(), a)).collect();
    let proposal = match &cfg.mode {
        Mode::Closed(_) => ProposalMode::Closed(cfg.load_vocab()?),
        Mode::Open | Mode::GtBoxes => ProposalMode::Open,
    };
    let model = model(cfg)?;
    let pipeline = Pipeline::new(model.clone(), model.clone(), model, cfg.pipeline.clone())?;

    let mut writer = RunWriter::begin(&cfg.out_dir, "generate", &cfg.to_json())?;
    let mut graphs = Vec::new();
    let mut traces: Vec<VerificationTrace> = Vec::new();
    let mut failures: Vec<SubjectFailure> = Vec::new();
    let mut first_error: Option<Error> = None;
    for entry in &images {
        let mut image = entry.image_ref();
        if cfg.inline_images() {
            image.uri = cfg.image_path(&entry.uri).display().to_string();
        }
        let input = if cfg.mode.uses_ground_truth() {
            let ann = by_id.get(entry.image_id.as_str()).ok_or_else(|| {
                Error::Validation(format!(
                    "mode {} needs annotations for image {}",
                    cfg.mode, entry.image_id
                ))
            })?;
            EntityInput::Given(ann.entities.clone())
        } else {
            EntityInput::Detect
        };
        let graph = if entry.subjects.is_empty() {
            match pipeline.generate_global(&image, &input, &proposal) {
                Ok(g) => {
                    traces.extend(g.traces);
                    failures.extend(g.failures);
                    g.graph
                }
                Err(e) => {
                    failures.push(image_failure(&image, &e));
                    first_error.get_or_insert(e);
                    continue;
                }
            }
        } else {
            let mut local_graphs = Vec::new();
            for spec in &entry.subjects {
                match pipeline.generate_local(&image, &input, spec, &proposal) {
                    Ok(l) => {
                        traces.extend(l.traces);
                        local_graphs.push(l.graph);
                    }
                    Err(f) => {
                        traces.extend(f.traces);
                        failures.push(SubjectFailure {
                            image_id: image.image_id.clone(),
                            subject_id: serde_json::to_string(spec)?,
                            error: f.error.to_string(),
                        });
                        first_error.get_or_insert(f.error);
                    }
                }
            }
            merge_global(&image.image_id, local_graphs)?
        };
        graphs.push(graph);
    }
    if graphs.iter().all(|g| g.locals.is_empty()) {
        if let Some(e) = first_error {
            return Err(e.into());
        }
    }

    writer.write_jsonl(GRAPHS_FILE, &graphs)?;
    writer.write_jsonl(TRACES_FILE, &traces)?;
    writer.write_jsonl(FAILURES_FILE, &failures)?;
    writer.finish()?;

    let n_locals: usize = graphs.iter().map(|g| g.locals.len()).sum();
    let n_triplets: usize = graphs.iter().map(GlobalSceneGraph::triplet_count).sum();
    writeln!(
        out,
        "generated {n_locals} local graphs with {n_triplets} triplets over {} images",
        graphs.len()
    )?;
    for f in &failures {
        writeln!(err, "warning: {} subject {}: {}", f.image_id, f.subject_id, f.error)?;
    }
    Ok(())
}

fn image_failure(image: &ImageRef, e: &Error) -> SubjectFailure {
    SubjectFailure {
        image_id: image.image_id.clone(),
        subject_id: "*".into(),
        error: e.to_string(),
    }
}

pub fn eval_open(cfg: &CliConfig, out: &mut dyn Write) -> Result<()> {
    let graphs = read_graphs(cfg)?;
    let locals = locals(&graphs);
    let annotations = load_annotations(cfg)?;
    let entries = image_entries(cfg, annotations.as_deref())?;
    let uris: HashMap<&str, &str> = entries.iter().map(|e| (e.image_id.as_str(), e.uri.as_str())).collect();

    let mut rasters = HashMap::new();
    for g in locals.iter().filter(|g| !g.is_empty()) {
        if rasters.contains_key(&g.image_id) {
            continue;
        }
        let uri = uris
            .get(g.image_id.as_str())
            .ok_or_else(|| Error::Validation(format!("image {} is not in the config", g.image_id)))?;
        rasters.insert(g.image_id.clone(), Raster::load(&cfg.image_path(uri))?);
    }

    let model = model(cfg)?;
    let scorer = TripletScorer::new(&*model);
    let scores = pool(cfg)?.install(|| scorer.score_all(&locals, &rasters))?;
    let clip: Vec<Vec<f64>> = scores
        .iter()
        .map(|s| s.iter().map(|t| t.clip_score).collect())
        .collect();
    let reports = cfg
        .alphas
        .iter()
        .map(|&a| eclipse::dataset_eclipse(&locals, &clip, a))
        .collect::<elegant::Result<Vec<_>>>()?;

    let mut writer = RunWriter::begin(&cfg.out_dir, "eval-open", &cfg.to_json())?;
    let flat: Vec<_> = scores.into_iter().flatten().collect();
    writer.write_jsonl(TRIPLET_SCORES_FILE, &flat)?;
    writer.write_json(ECLIPSE_REPORT_FILE, &reports)?;
    writer.finish()?;

    writeln!(out, "alpha,m_star,eclipse")?;
    for r in &reports {
        writeln!(out, "{},{:.4},{:.4}", r.alpha, r.m_star, r.dataset_eclipse)?;
    }
    Ok(())
}

pub fn eval_closed(cfg: &CliConfig, out: &mut dyn Write) -> Result<()> {
    let annotations =
        load_annotations(cfg)?.ok_or_else(|| Error::Validation("eval-closed needs --annotations".into()))?;
    let by_id: HashMap<&str, &AnnotatedImage> = annotations.iter().map(|a| (a.image_id.as_str(), a)).collect();
    let graphs = read_graphs(cfg)?;
    let vocab = cfg.load_vocab()?;
    let mode = if cfg.mode.uses_ground_truth() {
        MatchMode::GtBoxes
    } else {
        MatchMode::Detected {
            iou_threshold: cfg.iou_threshold,
        }
    };
    let images = graphs
        .iter()
        .map(|g| {
            let ann = by_id
                .get(g.image_id.as_str())
                .ok_or_else(|| Error::Validation(format!("image {} has no annotations", g.image_id)))?;
            Ok(ImageEval {
                image_id: g.image_id.clone(),
                predictions: closedset::predictions_from(&g.locals),
                ground_truths: ann.gt_triplets.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = closedset::evaluate(&images, &cfg.ks, &vocab, mode)?;
    let csv = report.to_csv();

    let mut writer = RunWriter::begin(&cfg.out_dir, "eval-closed", &cfg.to_json())?;
    writer.write_json(RECALL_REPORT_FILE, &report)?;
    writer.write(RECALL_CSV_FILE, csv.as_bytes())?;
    writer.finish()?;

    out.write_all(csv.as_bytes())?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Stats {
    images: usize,
    local_graphs: usize,
    triplets: usize,
    entity_categories: usize,
    relation_categories: usize,
    triplet_categories: usize,
    status_counts: BTreeMap<String, usize>,
}

pub fn stats(cfg: &CliConfig, out: &mut dyn Write) -> Result<()> {
    let graphs = read_graphs(cfg)?;
    let locals = locals(&graphs);
    let preds = closedset::predictions_from(&locals);
    let diversity = closedset::diversity_stats(&preds);
    let mut status_counts = BTreeMap::new();
    let traces_path = cfg.out_dir.join(TRACES_FILE);
    if traces_path.exists() {
        let traces: Vec<VerificationTrace> = ingest::read_jsonl(&traces_path)?;
        for t in traces {
            *status_counts.entry(t.final_status.to_string()).or_insert(0) += 1;
        }
    } else {
        for p in &preds {
            *status_counts.entry(p.triplet.status.to_string()).or_insert(0) += 1;
        }
    }
    for s in [
        TripletStatus::VerifiedDirect,
        TripletStatus::VerifiedCoca,
        TripletStatus::Rejected,
    ] {
        status_counts.entry(s.to_string()).or_insert(0);
    }
    let stats = Stats {
        images: graphs.len(),
        local_graphs: locals.len(),
        triplets: preds.len(),
        entity_categories: diversity.entity_categories,
        relation_categories: diversity.relation_categories,
        triplet_categories: diversity.triplet_categories,
        status_counts,
    };
    writeln!(out, "{}", serde_json::to_string_pretty(&stats)?)?;
    Ok(())
}

pub struct CurveArgs {
    pub m_star: Option<f64>,
    pub x_max: Option<f64>,
    pub points: usize,
    pub output: Option<PathBuf>,
}

pub fn penalty_curve(cfg: &CliConfig, args: &CurveArgs, out: &mut dyn Write) -> Result<()> {
    let m_star = match args.m_star {
        Some(m) => m,
        None => {
            // calibrate on an existing run when there is one
            let graphs = read_graphs(cfg).context("no --m-star given and no graphs to calibrate on")?;
            let locals = locals(&graphs);
            eclipse::mean_prediction_length(&locals.iter().collect::<Vec<_>>())?
        }
    };
    if args.points < 2 {
        return Err(Error::Validation("--points must be at least 2".into()).into());
    }
    let params = cfg
        .alphas
        .iter()
        .map(|&a| PenaltyParams::new(m_star, a))
        .collect::<elegant::Result<Vec<_>>>()?;
    let x_max = args.x_max.unwrap_or(5.0 * m_star);
    if x_max.is_nan() || x_max <= 1.0 {
        return Err(Error::Validation(format!("--x-max must exceed 1, got {x_max}")).into());
    }
    let mut csv = String::from("x");
    for a in &cfg.alphas {
        csv.push_str(&format!(",alpha={a}"));
    }
    csv.push('\n');
    for i in 0..args.points {
        let x = 1.0 + (x_max - 1.0) * i as f64 / (args.points - 1) as f64;
        csv.push_str(&format!("{x:.6}"));
        for p in &params {
            csv.push_str(&format!(",{:.12}", eclipse::penalty(x, p)?));
        }
        csv.push('\n');
    }
    match &args.output {
        Some(path) => ingest::write_atomic(path, csv.as_bytes())?,
        None => out.write_all(csv.as_bytes())?,
    }
    Ok(())
}

pub fn vqa_prompt(cfg: &CliConfig, question: &str, image_id: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let graphs = read_graphs(cfg)?;
    let graph = match image_id {
        Some(id) => graphs
            .iter()
            .find(|g| g.image_id == id)
            .ok_or_else(|| Error::Validation(format!("no graphs for image {id}")))?,
        None => match graphs.as_slice() {
            [only] => only,
            _ => return Err(Error::Validation("several images in the run; pass --image-id".into()).into()),
        },
    };
    let chosen: Vec<LocalSceneGraph> = pipeline::graphs_for_question(question, &graph.locals, &LabelMatchExtractor)
        .into_iter()
        .cloned()
        .collect();
    // nothing named in the question: describe the whole image
    let context = if chosen.is_empty() {
        graph.locals.clone()
    } else {
        chosen
    };
    writeln!(out, "{}", pipeline::build_vqa_prompt(question, &context)?)?;
    Ok(())
}
