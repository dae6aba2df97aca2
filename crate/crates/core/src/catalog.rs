//! The class catalog: microstructure classes and their exemplar patches, the
//! human review queue, a model registry, and an append-only audit log.
//!
//! Every mutation is an [`AuditEvent`] applied through one code path, so
//! replaying the log from an empty catalog reproduces the state exactly.
//! Patch pixels and checkpoints are content blobs next to that state; storing
//! a blob is not a mutation and does not move the version.
//!
//! On disk:
//!
//! ```text
//! root/catalog.json   records, models, version, hash
//! root/queue.json     all review items
//! root/audit.log      one JSON record per line
//! root/patches/       <patch id>.pgm
//! root/models/        <model id>.json + .bin checkpoints
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edlclassify::RankedPrediction;
use crate::error::{Error, Result};
use crate::imagecore::{encode_pgm, encode_png, load_micrograph, Micrograph, Patch};
use crate::neuralnet::Checkpoint;

pub const DEFAULT_PATCH_SIZE: usize = 64;

/// Decisions made under this name are machine decisions (`--auto`) and do
/// not verify a class.
pub const AUTO_DECIDER: &str = "auto";

const FORMAT: &str = "mcforge-catalog/1";

/// A stored patch plus where it came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRef {
    /// Content id in the patch store.
    pub patch: String,
    pub source: String,
    pub region: u32,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McStatus {
    Verified,
    Provisional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub id: u32,
    pub name: String,
    pub status: McStatus,
    pub created_at: DateTime<Utc>,
    pub exemplars: Vec<PatchRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Decision {
    Assign { class_id: u32 },
    CreateNew { name: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewState {
    Pending,
    Decided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: u64,
    pub patch: PatchRef,
    pub prediction: RankedPrediction,
    pub state: ReviewState,
    pub decision: Option<Decision>,
    pub decided_by: Option<String>,
    pub enqueued_at: DateTime<Utc>,
    pub decided_at: Option<DateTime<Utc>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Classifier,
    Segmenter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: u64,
    pub kind: ModelKind,
    /// Relative to the catalog root.
    pub checkpoint: String,
    pub classes: Vec<u32>,
    /// Catalog version the class list was taken from.
    pub class_version: u64,
    pub metrics: serde_json::Value,
    pub registered_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AuditEvent {
    AddMc {
        name: String,
        exemplars: Vec<PatchRef>,
    },
    AddExemplars {
        class_id: u32,
        exemplars: Vec<PatchRef>,
    },
    Enqueue {
        patch: PatchRef,
        prediction: RankedPrediction,
        forced: bool,
    },
    Decide {
        item: u64,
        decision: Decision,
        decided_by: String,
    },
    /// The checkpoint itself is the blob stored under the new model id.
    RegisterModel {
        kind: ModelKind,
        classes: Vec<u32>,
        metrics: serde_json::Value,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub event: AuditEvent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    patch_size: usize,
    records: Vec<McRecord>,
    queue: Vec<ReviewItem>,
    models: Vec<ModelEntry>,
    audit: Vec<AuditRecord>,
    patches: BTreeMap<String, Vec<u8>>,
    checkpoints: BTreeMap<u64, Checkpoint>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u64,
    patch_size: usize,
    records: Vec<McRecord>,
    models: Vec<ModelEntry>,
    patches: Vec<String>,
    #[serde(default)]
    hash: String,
}

impl Default for Catalog {
    fn default() -> Self {
        Catalog::new(DEFAULT_PATCH_SIZE)
    }
}

impl Catalog {
    pub fn new(patch_size: usize) -> Self {
        Catalog {
            patch_size,
            records: Vec::new(),
            queue: Vec::new(),
            models: Vec::new(),
            audit: Vec::new(),
            patches: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
        }
    }

    /// Number of mutations applied so far.
    pub fn version(&self) -> u64 {
        self.audit.len() as u64
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn records(&self) -> &[McRecord] {
        &self.records
    }

    pub fn record(&self, id: u32) -> Option<&McRecord> {
        self.records.get(id as usize)
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.id).collect()
    }

    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn models(&self) -> &[ModelEntry] {
        &self.models
    }

    pub fn checkpoint(&self, model: u64) -> Option<&Checkpoint> {
        self.checkpoints.get(&model)
    }

    /// Most recently registered model of `kind`.
    pub fn latest_model(&self, kind: ModelKind) -> Option<(&ModelEntry, &Checkpoint)> {
        let entry = self.models.iter().rev().find(|m| m.kind == kind)?;
        Some((entry, self.checkpoints.get(&entry.id)?))
    }

    pub fn items(&self) -> &[ReviewItem] {
        &self.queue
    }

    pub fn item(&self, id: u64) -> Option<&ReviewItem> {
        self.queue.get(id as usize)
    }

    /// Pending items in enqueue order.
    pub fn pending(&self) -> Vec<&ReviewItem> {
        self.queue.iter().filter(|i| i.state == ReviewState::Pending).collect()
    }

    /// Pending items, most uncertain first; ties keep enqueue order.
    pub fn pending_by_uncertainty(&self) -> Vec<&ReviewItem> {
        let mut items = self.pending();
        items.sort_by(|a, b| b.prediction.uncertainty.total_cmp(&a.prediction.uncertainty));
        items
    }

    pub fn patch_pixels(&self, id: &str) -> Option<&[u8]> {
        self.patches.get(id).map(Vec::as_slice)
    }

    pub fn patch_micrograph(&self, id: &str) -> Option<Micrograph> {
        let bytes = self.patches.get(id)?;
        Micrograph::from_bytes(self.patch_size, self.patch_size, bytes, id).ok()
    }

    pub fn patch_png(&self, id: &str) -> Result<Vec<u8>> {
        let bytes = self
            .patches
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("patch {id}")))?;
        encode_png(self.patch_size, self.patch_size, bytes)
    }

    /// Stores 8-bit patch pixels and returns their content id. Idempotent.
    pub fn put_patch(&mut self, pixels: &[u8]) -> Result<String> {
        if pixels.len() != self.patch_size * self.patch_size {
            return Err(Error::invalid(format!(
                "patch has {} pixels, catalog patches are {}x{}",
                pixels.len(),
                self.patch_size,
                self.patch_size
            )));
        }
        let id = patch_id(pixels);
        self.patches.entry(id.clone()).or_insert_with(|| pixels.to_vec());
        Ok(id)
    }

    /// Stores a harvested patch with its provenance.
    pub fn store_patch(&mut self, patch: &Patch, source: &str, region: u32) -> Result<PatchRef> {
        let pixels = patch.to_micrograph(source).to_bytes();
        Ok(PatchRef {
            patch: self.put_patch(&pixels)?,
            source: source.to_string(),
            region,
            row: patch.row,
            col: patch.col,
        })
    }

    pub fn add_mc(&mut self, name: &str, exemplars: Vec<PatchRef>) -> Result<McRecord> {
        self.mutate(AuditEvent::AddMc {
            name: name.to_string(),
            exemplars,
        })?;
        Ok(self.records.last().cloned().expect("record just added"))
    }

    /// Appends exemplars to an existing class without review.
    pub fn add_exemplars(&mut self, class_id: u32, exemplars: Vec<PatchRef>) -> Result<McRecord> {
        self.mutate(AuditEvent::AddExemplars { class_id, exemplars })?;
        Ok(self.records[class_id as usize].clone())
    }

    /// Queues a patch for review. Only predictions flagged novel are
    /// accepted unless `force` is set.
    pub fn enqueue_review(&mut self, patch: PatchRef, prediction: RankedPrediction, force: bool) -> Result<ReviewItem> {
        self.mutate(AuditEvent::Enqueue {
            patch,
            prediction,
            forced: force,
        })?;
        Ok(self.queue.last().cloned().expect("item just queued"))
    }

    /// Resolves a pending item. Returns the item and, for `create_new`, the
    /// new class.
    pub fn decide_review(&mut self, item: u64, decision: Decision, decided_by: &str) -> Result<(ReviewItem, Option<McRecord>)> {
        let classes = self.records.len();
        self.mutate(AuditEvent::Decide {
            item,
            decision,
            decided_by: decided_by.to_string(),
        })?;
        let created = (self.records.len() > classes).then(|| self.records[classes].clone());
        Ok((self.queue[item as usize].clone(), created))
    }

    pub fn register_model(&mut self, kind: ModelKind, checkpoint: Checkpoint, metrics: serde_json::Value) -> Result<ModelEntry> {
        let id = self.models.len() as u64;
        let event = AuditEvent::RegisterModel {
            kind,
            classes: checkpoint.classes.clone(),
            metrics,
        };
        self.checkpoints.insert(id, checkpoint);
        if let Err(e) = self.mutate(event) {
            self.checkpoints.remove(&id);
            return Err(e);
        }
        Ok(self.models[id as usize].clone())
    }

    fn mutate(&mut self, event: AuditEvent) -> Result<()> {
        let record = AuditRecord {
            seq: self.version(),
            at: Utc::now(),
            event,
        };
        self.apply(record)
    }

    /// Validates `record` against the current state, then applies it. A
    /// rejected record leaves the catalog untouched.
    fn apply(&mut self, record: AuditRecord) -> Result<()> {
        if record.seq != self.version() {
            return Err(Error::Integrity(format!(
                "audit record {} applied at version {}",
                record.seq,
                self.version()
            )));
        }
        let at = record.at;
        match &record.event {
            AuditEvent::AddMc { name, exemplars } => {
                self.check_new_name(name)?;
                if exemplars.is_empty() {
                    return Err(Error::invalid("a class needs at least one exemplar"));
                }
                self.check_patches(exemplars.iter())?;
                self.records.push(McRecord {
                    id: self.records.len() as u32,
                    name: name.clone(),
                    status: McStatus::Provisional,
                    created_at: at,
                    exemplars: exemplars.clone(),
                });
            }
            AuditEvent::AddExemplars { class_id, exemplars } => {
                self.check_class(*class_id)?;
                self.check_patches(exemplars.iter())?;
                self.records[*class_id as usize].exemplars.extend(exemplars.iter().cloned());
            }
            AuditEvent::Enqueue {
                patch,
                prediction,
                forced,
            } => {
                if !prediction.novel && !forced {
                    return Err(Error::invalid("prediction is not flagged as novel; force the review to queue it"));
                }
                self.check_patches(std::iter::once(patch))?;
                self.queue.push(ReviewItem {
                    id: self.queue.len() as u64,
                    patch: patch.clone(),
                    prediction: prediction.clone(),
                    state: ReviewState::Pending,
                    decision: None,
                    decided_by: None,
                    enqueued_at: at,
                    decided_at: None,
                });
            }
            AuditEvent::Decide {
                item,
                decision,
                decided_by,
            } => {
                let pending = self
                    .queue
                    .get(*item as usize)
                    .ok_or_else(|| Error::NotFound(format!("review item {item}")))?;
                if pending.state == ReviewState::Decided {
                    return Err(Error::Conflict(format!("review item {item} already decided")));
                }
                let patch = pending.patch.clone();
                let status = if decided_by == AUTO_DECIDER {
                    McStatus::Provisional
                } else {
                    McStatus::Verified
                };
                match decision {
                    Decision::Assign { class_id } => {
                        self.check_class(*class_id)?;
                        let rec = &mut self.records[*class_id as usize];
                        rec.exemplars.push(patch);
                        if status == McStatus::Verified {
                            rec.status = McStatus::Verified;
                        }
                    }
                    Decision::CreateNew { name } => {
                        self.check_new_name(name)?;
                        self.records.push(McRecord {
                            id: self.records.len() as u32,
                            name: name.clone(),
                            status,
                            created_at: at,
                            exemplars: vec![patch],
                        });
                    }
                }
                let it = &mut self.queue[*item as usize];
                it.state = ReviewState::Decided;
                it.decision = Some(decision.clone());
                it.decided_by = Some(decided_by.clone());
                it.decided_at = Some(at);
            }
            AuditEvent::RegisterModel { kind, classes, metrics } => {
                let id = self.models.len() as u64;
                let ckpt = self
                    .checkpoints
                    .get(&id)
                    .ok_or_else(|| Error::NotFound(format!("checkpoint for model {id}")))?;
                if &ckpt.classes != classes {
                    return Err(Error::Integrity(format!("model {id} class list differs from its checkpoint")));
                }
                for &c in classes {
                    self.check_class(c)?;
                }
                self.models.push(ModelEntry {
                    id,
                    kind: *kind,
                    checkpoint: format!("models/{id}.json"),
                    classes: classes.clone(),
                    class_version: self.version(),
                    metrics: metrics.clone(),
                    registered_at: at,
                });
            }
        }
        self.audit.push(record);
        Ok(())
    }

    fn check_new_name(&self, name: &str) -> Result<()> {
        if name.trim().is_empty() {
            return Err(Error::invalid("class name is empty"));
        }
        if self.records.iter().any(|r| r.name == name) {
            return Err(Error::Conflict(format!("class name '{name}' already exists")));
        }
        Ok(())
    }

    fn check_class(&self, id: u32) -> Result<()> {
        if (id as usize) < self.records.len() {
            Ok(())
        } else {
            Err(Error::NotFound(format!("class {id}")))
        }
    }

    fn check_patches<'a>(&self, refs: impl Iterator<Item = &'a PatchRef>) -> Result<()> {
        for r in refs {
            if !self.patches.contains_key(&r.patch) {
                return Err(Error::NotFound(format!("patch {}", r.patch)));
            }
        }
        Ok(())
    }

    /// Rebuilds a catalog by applying `audit` to an empty one that holds the
    /// given blobs.
    pub fn replay(
        patch_size: usize,
        audit: &[AuditRecord],
        patches: BTreeMap<String, Vec<u8>>,
        checkpoints: BTreeMap<u64, Checkpoint>,
    ) -> Result<Catalog> {
        let mut c = Catalog {
            patches,
            checkpoints,
            ..Catalog::new(patch_size)
        };
        for record in audit {
            c.apply(record.clone())?;
        }
        if c.checkpoints.len() != c.models.len() {
            return Err(Error::Integrity("checkpoints without a registered model".into()));
        }
        Ok(c)
    }

    /// Replays this catalog's own audit log over its blobs.
    pub fn replayed(&self) -> Result<Catalog> {
        Catalog::replay(self.patch_size, &self.audit, self.patches.clone(), self.checkpoints.clone())
    }

    /// Writes the catalog under `root`. Blobs already on disk are kept; the
    /// manifest goes last so a torn write fails the hash check on load.
    pub fn snapshot(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        let patches_dir = root.join("patches");
        let models_dir = root.join("models");
        for dir in [root, &patches_dir, &models_dir] {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for (id, pixels) in &self.patches {
            let path = patches_dir.join(format!("{id}.pgm"));
            if !path.exists() {
                write_atomic(&path, &encode_pgm(self.patch_size, self.patch_size, pixels))?;
            }
        }
        for (id, ckpt) in &self.checkpoints {
            let path = models_dir.join(format!("{id}.json"));
            if !path.exists() {
                ckpt.save(&path)?;
            }
        }
        let queue = serde_json::to_vec_pretty(&self.queue)?;
        let audit = audit_bytes(&self.audit)?;
        let mut manifest = Manifest {
            format: FORMAT.into(),
            version: self.version(),
            patch_size: self.patch_size,
            records: self.records.clone(),
            models: self.models.clone(),
            patches: self.patches.keys().cloned().collect(),
            hash: String::new(),
        };
        manifest.hash = manifest_hash(&manifest, &queue, &audit)?;
        write_atomic(&root.join("queue.json"), &queue)?;
        write_atomic(&root.join("audit.log"), &audit)?;
        write_atomic(&root.join("catalog.json"), &serde_json::to_vec_pretty(&manifest)?)
    }

    /// Replaces the catalog at `root` as a whole: the new state is written to
    /// a sibling directory that is then renamed over `root`. Readers see
    /// either the old or the new catalog, never a mix.
    pub fn commit(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        let staging = sibling(root, "staging");
        let old = sibling(root, "old");
        for dir in [&staging, &old] {
            if dir.exists() {
                fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        if root.exists() {
            copy_blobs(root, &staging)?;
        }
        self.snapshot(&staging)?;
        if root.exists() {
            fs::rename(root, &old).map_err(|e| Error::io(root, e))?;
        }
        fs::rename(&staging, root).map_err(|e| Error::io(&staging, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    /// Reads a catalog written by [`Catalog::snapshot`]. A directory without
    /// `catalog.json` is an empty catalog.
    pub fn load(root: impl AsRef<Path>) -> Result<Catalog> {
        let root = root.as_ref();
        if !root.is_dir() {
            return Err(Error::NotFound(format!("catalog directory {}", root.display())));
        }
        let manifest_path = root.join("catalog.json");
        if !manifest_path.exists() {
            return Ok(Catalog::default());
        }
        let manifest: Manifest = serde_json::from_slice(&read(&manifest_path)?)?;
        if manifest.format != FORMAT {
            return Err(Error::UnsupportedFormat(format!("catalog format '{}'", manifest.format)));
        }
        let queue_bytes = read(&root.join("queue.json"))?;
        let audit_raw = read(&root.join("audit.log"))?;
        if manifest_hash(&manifest, &queue_bytes, &audit_raw)? != manifest.hash {
            return Err(Error::Integrity("catalog hash mismatch".into()));
        }
        let audit = parse_audit(&audit_raw)?;
        let queue: Vec<ReviewItem> = serde_json::from_slice(&queue_bytes)?;

        let mut patches = BTreeMap::new();
        for id in &manifest.patches {
            let path = root.join("patches").join(format!("{id}.pgm"));
            let pixels = load_micrograph(&path)?.to_bytes();
            if patch_id(&pixels) != *id {
                return Err(Error::Integrity(format!("patch {id} content does not match its id")));
            }
            patches.insert(id.clone(), pixels);
        }
        let mut checkpoints = BTreeMap::new();
        for m in &manifest.models {
            checkpoints.insert(m.id, Checkpoint::load(root.join(&m.checkpoint))?);
        }
        let catalog = Catalog::replay(manifest.patch_size, &audit, patches, checkpoints)?;
        if catalog.version() != manifest.version
            || catalog.records != manifest.records
            || catalog.models != manifest.models
            || catalog.queue != queue
        {
            return Err(Error::Integrity("audit log does not reproduce the stored state".into()));
        }
        Ok(catalog)
    }
}

/// Advisory single-writer lock: a `<root>.lock` file next to the catalog,
/// removed on drop.
#[derive(Debug)]
pub struct CatalogLock {
    path: PathBuf,
}

impl CatalogLock {
    pub fn acquire(root: impl AsRef<Path>) -> Result<CatalogLock> {
        let path = sibling(root.as_ref(), "lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(CatalogLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Conflict(format!(
                "catalog is locked by another run ({}); remove the file if that run is gone",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for CatalogLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn sibling(root: &Path, suffix: &str) -> PathBuf {
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "catalog".into());
    root.with_file_name(format!("{name}.{suffix}"))
}

/// Hard-links (or copies) existing patch and model files into `to`, so a
/// commit only writes new blobs.
fn copy_blobs(from: &Path, to: &Path) -> Result<()> {
    for sub in ["patches", "models"] {
        let (src, dst) = (from.join(sub), to.join(sub));
        if !src.is_dir() {
            continue;
        }
        fs::create_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
        for entry in fs::read_dir(&src).map_err(|e| Error::io(&src, e))? {
            let entry = entry.map_err(|e| Error::io(&src, e))?;
            let target = dst.join(entry.file_name());
            if fs::hard_link(entry.path(), &target).is_err() {
                fs::copy(entry.path(), &target).map_err(|e| Error::io(&target, e))?;
            }
        }
    }
    Ok(())
}

fn patch_id(pixels: &[u8]) -> String {
    hex::encode(&Sha256::digest(pixels)[..12])
}

fn audit_bytes(audit: &[AuditRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in audit {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn parse_audit(bytes: &[u8]) -> Result<Vec<AuditRecord>> {
    bytes
        .split(|&b| b == b'\n')
        .filter(|line| !line.is_empty())
        .map(|line| serde_json::from_slice(line).map_err(Error::from))
        .collect()
}

fn manifest_hash(m: &Manifest, queue: &[u8], audit: &[u8]) -> Result<String> {
    let body = serde_json::to_vec(&(&m.format, m.version, m.patch_size, &m.records, &m.models, &m.patches))?;
    let mut h = Sha256::new();
    for part in [&body[..], queue, audit] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    Ok(hex::encode(h.finalize()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
