//! Run configuration: what the user asked for, merged from flags, the
//! config file, the environment and defaults (in that order of precedence).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Result};
use elegant::backends::{BackendConfig, BackendMode, ImageRef, Role};
use elegant::pipeline::{CalibrationRoute, PipelineConfig, SubjectSpec};
use elegant::vocab::RelationVocab;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const ROLES: [Role; 4] = [Role::Observer, Role::Thinker, Role::Verifier, Role::Embedder];
pub const DEFAULT_ALPHAS: [f64; 1] = [elegant::eclipse::DEFAULT_ALPHA];
pub const DEFAULT_KS: [usize; 3] = [10, 20, 50];
pub const DEFAULT_VOCAB: &str = "visualds20";

/// How entities are obtained and which thinker prompt is used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mode {
    /// Detected entities, open-vocabulary prompt.
    Open,
    /// Ground-truth entities, closed prompt over a predicate vocabulary.
    Closed(Option<String>),
    /// Ground-truth entities, open-vocabulary prompt.
    GtBoxes,
}

impl Mode {
    pub fn uses_ground_truth(&self) -> bool {
        !matches!(self, Mode::Open)
    }
}

impl FromStr for Mode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(Mode::Open),
            "gt-boxes" => Ok(Mode::GtBoxes),
            "closed" => Ok(Mode::Closed(None)),
            _ => match s.strip_prefix("closed:") {
                Some(v) if !v.is_empty() => Ok(Mode::Closed(Some(v.to_string()))),
                _ => bail!("unknown mode {s:?} (expected open, gt-boxes or closed:<vocab>)"),
            },
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Open => f.write_str("open"),
            Mode::GtBoxes => f.write_str("gt-boxes"),
            Mode::Closed(None) => f.write_str("closed"),
            Mode::Closed(Some(v)) => write!(f, "closed:{v}"),
        }
    }
}

impl Serialize for Mode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub image_id: String,
    pub uri: String,
    pub width: u32,
    pub height: u32,
    /// Subjects to generate local graphs for; empty means every entity.
    #[serde(default)]
    pub subjects: Vec<SubjectSpec>,
}

impl ImageEntry {
    pub fn image_ref(&self) -> ImageRef {
        ImageRef {
            image_id: self.image_id.clone(),
            uri: self.uri.clone(),
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendFile {
    pub endpoint: Option<String>,
    pub timeout_secs: Option<f64>,
    pub max_retries: Option<u32>,
    pub inline_images: Option<bool>,
}

/// The config file as written by the user; everything optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub images: Option<Vec<ImageEntry>>,
    pub annotations: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub vocab: Option<String>,
    pub alphas: Option<Vec<f64>>,
    pub ks: Option<Vec<usize>>,
    pub parallelism: Option<usize>,
    pub coca: Option<bool>,
    pub calibration_route: Option<CalibrationRoute>,
    pub coca_confidence: Option<f64>,
    pub iou_threshold: Option<f64>,
    #[serde(default)]
    pub backends: HashMap<Role, BackendFile>,
    pub mock_fixtures: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| elegant::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: FileConfig =
            serde_json::from_str(&text).map_err(|e| elegant::Error::Validation(format!("{}: {e}", path.display())))?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.annotations, &mut cfg.mock_fixtures, &mut cfg.out_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Values given on the command line; `None` means not given.
#[derive(Debug, Clone, Default)]
pub struct FlagConfig {
    pub config: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub vocab: Option<String>,
    pub alphas: Option<Vec<f64>>,
    pub ks: Option<Vec<usize>>,
    pub parallelism: Option<usize>,
    pub backend_urls: HashMap<Role, String>,
    pub mock_fixtures: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub no_coca: bool,
}

/// Fully resolved configuration, persisted with every run. Tokens are
/// never serialized.
#[derive(Debug, Clone, Serialize)]
pub struct CliConfig {
    pub mode: Mode,
    pub vocab: String,
    pub alphas: Vec<f64>,
    pub ks: Vec<usize>,
    pub parallelism: usize,
    pub pipeline: PipelineConfig,
    pub iou_threshold: f64,
    pub backends: BTreeMap<Role, BackendConfig>,
    pub mock_fixtures: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Directory that relative image URIs are resolved against.
    pub image_root: PathBuf,
    pub images: Vec<ImageEntry>,
}

fn env_var<T: FromStr>(env: &HashMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    match env.get(key).filter(|v| !v.is_empty()) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|e| elegant::Error::Validation(format!("{key}={v:?}: {e}")).into()),
    }
}

fn role_env(role: Role, what: &str) -> String {
    format!("ELEGANT_{}_{what}", role.as_str().to_uppercase())
}

impl CliConfig {
    pub fn resolve(flags: FlagConfig, env: &HashMap<String, String>) -> Result<Self> {
        let (file, image_root) = match &flags.config {
            Some(p) => (
                FileConfig::load(p)?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (FileConfig::default(), PathBuf::new()),
        };

        let mode = flags.mode.or(file.mode).unwrap_or(Mode::Open);
        let vocab = match (&mode, flags.vocab.or(file.vocab)) {
            (_, Some(v)) => v,
            (Mode::Closed(Some(v)), None) => v.clone(),
            (_, None) => DEFAULT_VOCAB.to_string(),
        };
        let parallelism = match flags.parallelism.or(file.parallelism) {
            Some(p) => p,
            None => env_var(env, "ELEGANT_PARALLELISM")?.unwrap_or(PipelineConfig::default().parallelism),
        };
        let pipeline = PipelineConfig {
            coca: !flags.no_coca && file.coca.unwrap_or(true),
            calibration_route: file.calibration_route.unwrap_or_default(),
            coca_confidence: file
                .coca_confidence
                .unwrap_or(PipelineConfig::default().coca_confidence),
            parallelism,
        };
        let mock_fixtures = flags.mock_fixtures.or(file.mock_fixtures).or_else(|| {
            env.get("ELEGANT_MOCK_FIXTURES")
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        });

        let mut backends = BTreeMap::new();
        for role in ROLES {
            let f = file.backends.get(&role).cloned().unwrap_or_default();
            let endpoint = flags
                .backend_urls
                .get(&role)
                .cloned()
                .or(f.endpoint)
                .or_else(|| env.get(&role_env(role, "URL")).filter(|v| !v.is_empty()).cloned());
            let defaults = BackendConfig::default();
            let cfg = BackendConfig {
                mode: if endpoint.is_some() {
                    BackendMode::Live
                } else {
                    BackendMode::Mock
                },
                endpoint,
                token: env.get(&role.token_env_var()).filter(|v| !v.is_empty()).cloned(),
                timeout_secs: f.timeout_secs.unwrap_or(defaults.timeout_secs),
                max_retries: f.max_retries.unwrap_or(defaults.max_retries),
                inline_images: f.inline_images.unwrap_or(false),
            };
            cfg.validate()?;
            backends.insert(role, cfg);
        }

        let cfg = CliConfig {
            mode,
            vocab,
            alphas: flags.alphas.or(file.alphas).unwrap_or_else(|| DEFAULT_ALPHAS.to_vec()),
            ks: flags.ks.or(file.ks).unwrap_or_else(|| DEFAULT_KS.to_vec()),
            parallelism,
            pipeline,
            iou_threshold: file.iou_threshold.unwrap_or(elegant::closedset::DEFAULT_IOU_THRESHOLD),
            backends,
            mock_fixtures,
            annotations: flags.annotations.or(file.annotations),
            out_dir: flags
                .out_dir
                .or(file.out_dir)
                .or_else(|| env.get("ELEGANT_OUT_DIR").filter(|v| !v.is_empty()).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("elegant-out")),
            image_root,
            images: file.images.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |m: String| -> Result<()> { Err(elegant::Error::Validation(m).into()) };
        if self.parallelism == 0 {
            return invalid("parallelism must be at least 1".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return invalid(format!("alpha must be positive, got {a}"));
        }
        if self.alphas.is_empty() || self.ks.is_empty() {
            return invalid("alpha and K lists must not be empty".into());
        }
        if self.ks.contains(&0) {
            return invalid("K must be at least 1".into());
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return invalid(format!("iou_threshold {} outside (0, 1]", self.iou_threshold));
        }
        Ok(())
    }

    /// The predicate vocabulary: a builtin id or a vocabulary file.
    pub fn load_vocab(&self) -> Result<RelationVocab> {
        if let Ok(v) = RelationVocab::builtin(&self.vocab) {
            return Ok(v);
        }
        let path = Path::new(&self.vocab);
        if path.exists() {
            return Ok(RelationVocab::load(path)?);
        }
        Err(elegant::Error::Validation(format!("unknown vocabulary {:?}", self.vocab)).into())
    }

    /// Local file behind an image URI.
    pub fn image_path(&self, uri: &str) -> PathBuf {
        let p = Path::new(uri.strip_prefix("file://").unwrap_or(uri));
        if p.is_relative() {
            self.image_root.join(p)
        } else {
            p.to_path_buf()
        }
    }

    pub fn inline_images(&self) -> bool {
        self.backends.values().any(|b| b.inline_images)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text.into_bytes()
    }
}
