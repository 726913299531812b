//! Annotation loading and run-directory persistence.
//!
//! Annotation files are a JSON array of images:
//!
//! ```json
//! [{"image_id": "1", "width": 640, "height": 480, "uri": "images/1.jpg",
//!   "entities": [{"id": "e1", "label": "man", "bbox": [10, 20, 200, 400], "confidence": 1.0}],
//!   "triplets": [{"subject_id": "e1", "predicate": "riding", "object_id": "e2"}]}]
//! ```
//!
//! Run directories hold `graphs.jsonl`, `traces.jsonl`, the JSON reports and
//! `run.json`. Every file is written to a temporary name and renamed into
//! place; `run.json` is written last, so a directory without it is incomplete.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backends::wire::sha256_hex;
use crate::backends::ImageRef;
use crate::closedset::GroundTruthTriplet;
use crate::error::{Error, Result};
use crate::scene::{BBox, Entity, EntitySource, Triplet};

pub const GRAPHS_FILE: &str = "graphs.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const ECLIPSE_REPORT_FILE: &str = "eclipse_report.json";
pub const RECALL_REPORT_FILE: &str = "recall_report.json";
pub const RUN_FILE: &str = "run.json";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub uri: String,
    pub entities: Vec<Entity>,
    pub gt_triplets: Vec<GroundTruthTriplet>,
}

impl AnnotatedImage {
    pub fn image_ref(&self) -> ImageRef {
        ImageRef {
            image_id: self.image_id.clone(),
            uri: self.uri.clone(),
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawId {
    Text(String),
    Number(u64),
}

impl RawId {
    fn into_string(self) -> String {
        match self {
            RawId::Text(s) => s,
            RawId::Number(n) => n.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct RawImage {
    image_id: RawId,
    width: u32,
    height: u32,
    #[serde(default)]
    uri: String,
    #[serde(default)]
    entities: Vec<RawEntity>,
    #[serde(default)]
    triplets: Vec<RawTriplet>,
}

#[derive(Deserialize)]
struct RawEntity {
    id: RawId,
    label: String,
    bbox: serde_json::Value,
    confidence: Option<f64>,
}

#[derive(Deserialize)]
struct RawTriplet {
    subject_id: RawId,
    predicate: String,
    object_id: RawId,
}

fn validate_image(raw: RawImage) -> Result<AnnotatedImage> {
    let image_id = raw.image_id.into_string();
    let fail = |path: String, message: String| Error::Annotation {
        image_id: image_id.clone(),
        path,
        message,
    };
    if raw.width == 0 || raw.height == 0 {
        return Err(fail(
            "width".into(),
            format!("empty image {}x{}", raw.width, raw.height),
        ));
    }
    let mut entities = Vec::with_capacity(raw.entities.len());
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, e) in raw.entities.into_iter().enumerate() {
        let id = e.id.into_string();
        let bbox: BBox =
            serde_json::from_value(e.bbox).map_err(|err| fail(format!("entities[{i}].bbox"), err.to_string()))?;
        if !bbox.within(raw.width as f64, raw.height as f64) {
            return Err(fail(
                format!("entities[{i}].bbox"),
                format!(
                    "box {:?} exceeds image bounds {}x{}",
                    bbox.as_array(),
                    raw.width,
                    raw.height
                ),
            ));
        }
        let entity = Entity::new(
            id.clone(),
            &e.label,
            bbox,
            e.confidence.unwrap_or(1.0),
            EntitySource::GroundTruth,
        )
        .map_err(|err| fail(format!("entities[{i}]"), err.to_string()))?;
        if index.insert(id.clone(), i).is_some() {
            return Err(fail(format!("entities[{i}].id"), format!("duplicate entity id {id:?}")));
        }
        entities.push(entity);
    }
    let mut gt_triplets = Vec::with_capacity(raw.triplets.len());
    for (i, t) in raw.triplets.into_iter().enumerate() {
        let s = t.subject_id.into_string();
        let o = t.object_id.into_string();
        let resolve = |id: &str, field: &str| {
            index.get(id).map(|&j| entities[j].clone()).ok_or_else(|| {
                fail(
                    format!("triplets[{i}].{field}"),
                    format!("dangling reference to entity {id:?}"),
                )
            })
        };
        let subject = resolve(&s, "subject_id")?;
        let object = resolve(&o, "object_id")?;
        Triplet::candidate(s, &t.predicate, o).map_err(|err| fail(format!("triplets[{i}]"), err.to_string()))?;
        gt_triplets.push(
            GroundTruthTriplet::new(subject, &t.predicate, object)
                .map_err(|err| fail(format!("triplets[{i}].predicate"), err.to_string()))?,
        );
    }
    Ok(AnnotatedImage {
        image_id,
        width: raw.width,
        height: raw.height,
        uri: raw.uri,
        entities,
        gt_triplets,
    })
}

pub fn parse_annotations(text: &str, source: &str) -> Result<Vec<AnnotatedImage>> {
    let raws: Vec<RawImage> = serde_json::from_str(text).map_err(|e| Error::json(source, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(raws.len());
    for raw in raws {
        let img = validate_image(raw)?;
        if !seen.insert(img.image_id.clone()) {
            return Err(Error::Annotation {
                image_id: img.image_id,
                path: "image_id".into(),
                message: "duplicate image id".into(),
            });
        }
        out.push(img);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotatedImage>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, &path.display().to_string())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// One command's contribution to a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config_file: String,
    pub config_sha256: String,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub stages: Vec<StageRecord>,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// Check every stage's stored config against its recorded hash and that
    /// every listed output exists.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for s in &self.stages {
            let path = dir.join(&s.config_file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if sha256_hex(&bytes) != s.config_sha256 {
                return Err(Error::validation(format!(
                    "{} does not match its recorded hash",
                    s.config_file
                )));
            }
            for o in &s.outputs {
                if !dir.join(o).is_file() {
                    return Err(Error::validation(format!("recorded output {o} is missing")));
                }
            }
        }
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|s| s.stage == name)
    }
}

/// Exclusive writer for one run directory, held through a lock file.
pub struct RunWriter {
    dir: PathBuf,
    stage: String,
    config_file: String,
    config_sha256: String,
    outputs: Vec<String>,
    started: u64,
}

impl RunWriter {
    /// Lock `dir` (creating it) and store the resolved config of `stage`.
    pub fn begin(dir: &Path, stage: &str, config: &[u8]) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => {
                    Error::Conflict(format!("run directory {} is locked by another writer", dir.display()))
                }
                _ => Error::io(&lock, e),
            })?;
        let writer = RunWriter {
            dir: dir.to_path_buf(),
            stage: stage.to_string(),
            config_file: format!("config.{stage}.json"),
            config_sha256: sha256_hex(config),
            outputs: Vec::new(),
            started: now_unix(),
        };
        write_atomic(&dir.join(&writer.config_file), config)?;
        Ok(writer)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<()> {
        self.write(name, to_jsonl(items).as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Append this stage to `run.json` (written last) and release the lock.
    pub fn finish(self) -> Result<RunRecord> {
        let mut record = match RunRecord::load(&self.dir) {
            Ok(r) => r,
            Err(_) => RunRecord {
                run_id: self.config_sha256[..16].to_string(),
                stages: Vec::new(),
            },
        };
        record.stages.retain(|s| s.stage != self.stage);
        record.stages.push(StageRecord {
            stage: self.stage.clone(),
            config_file: self.config_file.clone(),
            config_sha256: self.config_sha256.clone(),
            outputs: self.outputs.clone(),
            started_unix: self.started,
            finished_unix: now_unix(),
        });
        let mut text = serde_json::to_string_pretty(&record).expect("run record serializes");
        text.push('\n');
        write_atomic(&self.dir.join(RUN_FILE), text.as_bytes())?;
        Ok(record)
    }
}

impl Drop for RunWriter {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.dir.join(LOCK_FILE));
    }
}

/// Write graphs and traces (plus any named JSON reports) as one stage.
pub fn persist_results<G: Serialize, T: Serialize>(
    dir: &Path,
    stage: &str,
    config: &[u8],
    graphs: &[G],
    traces: &[T],
    reports: &[(&str, serde_json::Value)],
) -> Result<RunRecord> {
    let mut w = RunWriter::begin(dir, stage, config)?;
    w.write_jsonl(GRAPHS_FILE, graphs)?;
    w.write_jsonl(TRACES_FILE, traces)?;
    for (name, value) in reports {
        w.write_json(name, value)?;
    }
    w.finish()
}
