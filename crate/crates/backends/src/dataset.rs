//! Construction of the (prompt, image, decision) dataset used for SFT.
//!
//! Each input prompt is rendered once, the image is shown to a labeler model
//! with the shipped system and user templates, and the parsed decision is
//! appended to a JSONL file. Failures go to a `.quarantine.jsonl` sidecar and
//! the run continues. Records are committed in input order, and a resumed run
//! skips prompts whose content hash already has a record.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use ipr_core::engine::{hash64, Generator};
use ipr_core::types::is_keep_sentinel;
use ipr_core::{
    parse_decision, Action, BackendError, ContentHash, CoreError, ImageRef, PromptText,
    RefinementDecision,
};

use crate::adapters::{http_label, HttpGenerator};
use crate::client::HttpClient;
use crate::config::EndpointConfig;
use crate::error::HttpError;
use crate::store::ContentStore;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {detail}")]
    Corrupt { path: PathBuf, line: usize, detail: String },
    #[error("{0} already exists; resume it or choose another path")]
    OutputExists(PathBuf),
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("concurrency must be >= 1")]
    InvalidOptions,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Produces the raw labeler reply for a `(p0, image)` pair.
pub trait Labeler: Send + Sync {
    fn label(&self, p0: &PromptText, image: &ImageRef) -> Result<String, BackendError>;
    fn model_name(&self) -> &str;
}

pub struct HttpLabeler<'a> {
    pub client: &'a HttpClient,
    pub store: &'a ContentStore,
}

impl Labeler for HttpLabeler<'_> {
    fn label(&self, p0: &PromptText, image: &ImageRef) -> Result<String, BackendError> {
        Ok(http_label(self.client, self.store, p0, image)?)
    }

    fn model_name(&self) -> &str {
        &self.client.config().model_name
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetImage {
    pub uri: String,
    pub hash: ContentHash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetDecision {
    Keep,
    Refine { prompt: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub p0: String,
    pub image: DatasetImage,
    pub decision: DatasetDecision,
    pub reason: String,
    pub labeler_model: String,
    /// RFC 3339 timestamp.
    pub created_at: String,
}

impl DatasetRecord {
    pub fn prompt(&self) -> Result<PromptText, CoreError> {
        PromptText::user(self.p0.clone())
    }

    pub fn image_ref(&self) -> ImageRef {
        ImageRef::External { uri: self.image.uri.clone(), hash: self.image.hash }
    }

    /// The decision as a core value; fails if the stored prompt is invalid.
    pub fn to_decision(&self) -> Result<RefinementDecision, CoreError> {
        let d = match &self.decision {
            DatasetDecision::Keep => RefinementDecision::keep(),
            DatasetDecision::Refine { prompt } => {
                if is_keep_sentinel(prompt) {
                    return Err(CoreError::InvalidConfig(
                        "refine record carries the keep sentinel".into(),
                    ));
                }
                RefinementDecision::refine(PromptText::refined(prompt.clone())?)
            }
        };
        Ok(d.with_reason(self.reason.clone()))
    }

    pub fn is_keep(&self) -> bool {
        self.decision == DatasetDecision::Keep
    }

    fn key(&self) -> ContentHash {
        prompt_key(&self.p0)
    }
}

/// Resume key for a prompt.
pub fn prompt_key(text: &str) -> ContentHash {
    ContentHash::of_bytes(text.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStage {
    Generate,
    Label,
    Parse,
}

/// One quarantined prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub p0: String,
    pub stage: FailureStage,
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub inputs: usize,
    pub duplicate_inputs: usize,
    pub skipped_existing: usize,
    pub processed: usize,
    /// Records in the file after this run.
    pub records: usize,
    pub keep: usize,
    pub refine: usize,
    pub keep_fraction: f64,
    pub parse_failures: usize,
    pub backend_failures: usize,
    pub interrupted: bool,
    pub generator_model: String,
    pub labeler_model: String,
    /// Resolution, steps and guidance are left to the generator endpoint.
    pub generation_params: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    pub resume: bool,
    pub seed: u64,
    pub concurrency: usize,
    /// Stop after this many prompts have been processed in this run.
    pub stop_after: Option<usize>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { resume: false, seed: 0, concurrency: 1, stop_after: None }
    }
}

pub fn quarantine_path(out: &Path) -> PathBuf {
    sidecar(out, "quarantine.jsonl")
}

pub fn summary_path(out: &Path) -> PathBuf {
    sidecar(out, "summary.json")
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Reads a dataset file. A trailing line without a newline is a torn write and
/// is ignored; any other unparsable line is an error.
pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut out = Vec::new();
    for (i, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |detail: String| DatasetError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
        rec.to_decision().map_err(|e| corrupt(e.to_string()))?;
        rec.prompt().map_err(|e| corrupt(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Drops a torn trailing line left by an interrupted write.
fn repair_tail(path: &Path) -> Result<(), DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    warn!(path = %path.display(), dropped = bytes.len() - keep, "truncating torn trailing line");
    let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
    f.set_len(keep as u64).map_err(io_err(path))?;
    Ok(())
}

enum Outcome {
    Record(DatasetRecord),
    Failed(QuarantineEntry),
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn process(
    p0: &PromptText,
    seed: u64,
    generator: &dyn Generator,
    labeler: &dyn Labeler,
) -> Outcome {
    let fail = |stage, error: String, raw_reply| {
        Outcome::Failed(QuarantineEntry {
            p0: p0.as_str().to_string(),
            stage,
            error,
            raw_reply,
            created_at: now(),
        })
    };
    let image = match generator.generate(p0, seed) {
        Ok(ImageRef::External { uri, hash }) => DatasetImage { uri, hash },
        Ok(ImageRef::Synthetic { .. }) => {
            return fail(FailureStage::Generate, "generator returned no stored image".into(), None)
        }
        Err(e) => return fail(FailureStage::Generate, e.to_string(), None),
    };
    let img_ref = ImageRef::External { uri: image.uri.clone(), hash: image.hash };
    let raw = match labeler.label(p0, &img_ref) {
        Ok(r) => r,
        Err(e) => return fail(FailureStage::Label, e.to_string(), None),
    };
    let decision = match parse_decision(&raw) {
        Ok(d) => d,
        Err(e) => return fail(FailureStage::Parse, e.to_string(), Some(raw)),
    };
    let stored = match &decision.action {
        Action::Keep => DatasetDecision::Keep,
        Action::Refine(p) => DatasetDecision::Refine { prompt: p.as_str().to_string() },
    };
    Outcome::Record(DatasetRecord {
        p0: p0.as_str().to_string(),
        image,
        decision: stored,
        reason: decision.reason.unwrap_or_default(),
        labeler_model: labeler.model_name().to_string(),
        created_at: now(),
    })
}

fn append_line<T: Serialize>(f: &mut File, path: &Path, value: &T) -> Result<(), DatasetError> {
    let mut line = serde_json::to_string(value).expect("record serializes");
    line.push('\n');
    f.write_all(line.as_bytes()).and_then(|_| f.flush()).map_err(io_err(path))
}

/// Builds (or resumes) a dataset with the given backends.
pub fn build_dataset_with(
    prompts: &[PromptText],
    generator: &dyn Generator,
    generator_model: &str,
    labeler: &dyn Labeler,
    out: &Path,
    opts: &BuildOptions,
) -> Result<DatasetSummary, DatasetError> {
    if opts.concurrency == 0 {
        return Err(DatasetError::InvalidOptions);
    }
    let exists = out.exists() && fs::metadata(out).map_err(io_err(out))?.len() > 0;
    if exists && !opts.resume {
        return Err(DatasetError::OutputExists(out.to_path_buf()));
    }
    let mut done: HashSet<ContentHash> = HashSet::new();
    if exists {
        repair_tail(out)?;
        done.extend(read_dataset(out)?.iter().map(DatasetRecord::key));
    }

    let mut seen = HashSet::new();
    let mut duplicate_inputs = 0;
    let mut skipped_existing = 0;
    let mut pending: Vec<&PromptText> = Vec::new();
    for p in prompts {
        let key = prompt_key(p.as_str());
        if !seen.insert(key) {
            duplicate_inputs += 1;
        } else if done.contains(&key) {
            skipped_existing += 1;
        } else {
            pending.push(p);
        }
    }
    let limit = opts.stop_after.unwrap_or(usize::MAX);
    let interrupted = pending.len() > limit;
    pending.truncate(limit);

    let mut data = OpenOptions::new().create(true).append(true).open(out).map_err(io_err(out))?;
    let qpath = quarantine_path(out);
    let mut quarantine = None;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.concurrency)
        .build()
        .expect("thread pool");
    let (mut parse_failures, mut backend_failures) = (0, 0);
    for chunk in pending.chunks(opts.concurrency) {
        let outcomes: Vec<Outcome> = pool.install(|| {
            use rayon::prelude::*;
            chunk
                .par_iter()
                .map(|p| {
                    let k = prompt_key(p.as_str());
                    let seed = hash64(&[opts.seed, u64::from_le_bytes(k.0[..8].try_into().unwrap())]);
                    process(p, seed, generator, labeler)
                })
                .collect()
        });
        for o in outcomes {
            match o {
                Outcome::Record(r) => append_line(&mut data, out, &r)?,
                Outcome::Failed(q) => {
                    warn!(p0 = %q.p0, stage = ?q.stage, error = %q.error, "quarantined");
                    if q.stage == FailureStage::Parse {
                        parse_failures += 1;
                    } else {
                        backend_failures += 1;
                    }
                    if quarantine.is_none() {
                        quarantine = Some(
                            OpenOptions::new()
                                .create(true)
                                .append(true)
                                .open(&qpath)
                                .map_err(io_err(&qpath))?,
                        );
                    }
                    append_line(quarantine.as_mut().unwrap(), &qpath, &q)?;
                }
            }
        }
    }
    data.sync_all().map_err(io_err(out))?;

    let all = read_dataset(out)?;
    let keep = all.iter().filter(|r| r.is_keep()).count();
    let summary = DatasetSummary {
        inputs: prompts.len(),
        duplicate_inputs,
        skipped_existing,
        processed: pending.len(),
        records: all.len(),
        keep,
        refine: all.len() - keep,
        keep_fraction: if all.is_empty() { 0.0 } else { keep as f64 / all.len() as f64 },
        parse_failures,
        backend_failures,
        interrupted,
        generator_model: generator_model.to_string(),
        labeler_model: labeler.model_name().to_string(),
        generation_params: "endpoint defaults".into(),
    };
    let spath = summary_path(out);
    let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
    s.push('\n');
    fs::write(&spath, s).map_err(io_err(&spath))?;
    info!(records = summary.records, keep = summary.keep, "dataset written");
    Ok(summary)
}

/// Builds a dataset against HTTP generator and labeler endpoints, storing
/// images under `store_dir`.
pub fn build_dataset(
    prompts: &[PromptText],
    gen_cfg: &EndpointConfig,
    labeler_cfg: &EndpointConfig,
    store_dir: &Path,
    out: &Path,
    opts: &BuildOptions,
) -> Result<DatasetSummary, DatasetError> {
    let store = ContentStore::open(store_dir)?;
    let gen_client = HttpClient::new(gen_cfg.clone())?;
    let lab_client = HttpClient::new(labeler_cfg.clone())?;
    let generator = HttpGenerator { client: &gen_client, store: &store };
    let labeler = HttpLabeler { client: &lab_client, store: &store };
    build_dataset_with(prompts, &generator, &gen_cfg.model_name, &labeler, out, opts)
}
