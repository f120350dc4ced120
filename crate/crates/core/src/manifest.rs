//! Append-only JSONL dataset manifest with replayable state.
//!
//! Every line is one self-describing record: `{"seq": N, "record": ..., ...}`.
//! Replaying the lines in order rebuilds [`ManifestState`]; a torn final line
//! (a write interrupted mid-record) is discarded on open.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    AttributeId, CellReport, DetectionReport, FaceKind, FaceRecord, FilterVerdict, Identity, IdentityValidation,
    SurveyKind, SurveyLabel,
};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("record references unknown {kind} `{id}`")]
    DanglingReference { kind: &'static str, id: String },
    #[error("duplicate {kind} `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown field `{field}`")]
    UnknownField { line: usize, field: String },
    #[error("line {line}: sequence number {found} does not follow {previous}")]
    Sequence { line: usize, previous: u64, found: u64 },
    #[error("simulated crash after {0} appends")]
    Crashed(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Identity(Identity),
    IdentityValidation(IdentityValidation),
    Face(FaceRecord),
    Detection(DetectionReport),
    Verdict(FilterVerdict),
    SurveyLabel(SurveyLabel),
    CellReport(CellReport),
}

impl Record {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Record::Identity(_) => "identity",
            Record::IdentityValidation(_) => "identity_validation",
            Record::Face(_) => "face",
            Record::Detection(_) => "detection",
            Record::Verdict(_) => "verdict",
            Record::SurveyLabel(_) => "survey_label",
            Record::CellReport(_) => "cell_report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub seq: u64,
    #[serde(flatten)]
    pub record: Record,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Unknown fields are an error.
    #[default]
    Strict,
    /// Unknown fields are ignored.
    Lenient,
}

/// Serialize one entry as a single JSON line (without the newline).
pub fn encode_entry(entry: &Entry) -> String {
    serde_json::to_string(entry).expect("manifest records always serialize")
}

/// Parse one manifest line.
pub fn decode_entry(line: &str, line_no: usize, mode: ParseMode) -> Result<Entry, ManifestError> {
    let raw: serde_json::Value =
        serde_json::from_str(line).map_err(|e| ManifestError::Parse { line: line_no, message: e.to_string() })?;
    let entry: Entry = serde_json::from_value(raw.clone())
        .map_err(|e| ManifestError::Parse { line: line_no, message: e.to_string() })?;
    if mode == ParseMode::Strict {
        let canonical = serde_json::to_value(&entry).expect("entry serializes");
        if let Some(field) = first_unknown_field(&raw, &canonical, "") {
            return Err(ManifestError::UnknownField { line: line_no, field });
        }
    }
    Ok(entry)
}

fn first_unknown_field(raw: &serde_json::Value, canonical: &serde_json::Value, path: &str) -> Option<String> {
    let (serde_json::Value::Object(raw), serde_json::Value::Object(canon)) = (raw, canonical) else {
        return None;
    };
    for (key, value) in raw {
        let here = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match canon.get(key) {
            None => return Some(here),
            Some(c) => {
                if let Some(found) = first_unknown_field(value, c, &here) {
                    return Some(found);
                }
            }
        }
    }
    None
}

/// Key for a detection: (face, pair). Distortion scores use `pair = None`.
pub type DetectionKey = (String, Option<String>);

/// Materialized view of a manifest after replay.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ManifestState {
    pub identities: BTreeMap<String, Identity>,
    pub validated_identities: BTreeMap<String, bool>,
    pub faces: BTreeMap<String, FaceRecord>,
    pub source_index: BTreeMap<(String, u32), String>,
    pub edit_index: BTreeMap<(String, AttributeId), String>,
    pub detections: BTreeMap<DetectionKey, DetectionReport>,
    pub verdicts: BTreeMap<String, FilterVerdict>,
    pub survey_labels: BTreeMap<(SurveyKind, String, String, u32), SurveyLabel>,
    pub cell_reports: BTreeMap<(String, AttributeId, String, Option<String>), CellReport>,
}

impl ManifestState {
    /// Validate `record` against the current state without applying it.
    pub fn check(&self, record: &Record) -> Result<(), ManifestError> {
        match record {
            Record::Identity(id) => {
                if self.identities.contains_key(&id.identity_id) {
                    return Err(dup("identity", &id.identity_id));
                }
            }
            Record::IdentityValidation(v) => self.require_identity(&v.identity_id)?,
            Record::Face(face) => {
                if self.faces.contains_key(&face.face_id) {
                    return Err(dup("face", &face.face_id));
                }
                self.require_identity(&face.identity_id)?;
                match face.kind {
                    FaceKind::Source => {
                        if face.applied_attribute.is_some() || face.parent_face_id.is_some() {
                            return Err(ManifestError::InvalidRecord(format!(
                                "source face `{}` carries edit provenance",
                                face.face_id
                            )));
                        }
                        let key = (face.identity_id.clone(), face.variation_index);
                        if let Some(existing) = self.source_index.get(&key) {
                            return Err(dup("source variation", existing));
                        }
                    }
                    FaceKind::Transformed => {
                        let (Some(attr), Some(parent_id)) = (face.applied_attribute, face.parent_face_id.as_ref())
                        else {
                            return Err(ManifestError::InvalidRecord(format!(
                                "transformed face `{}` lacks parent or attribute",
                                face.face_id
                            )));
                        };
                        let parent = self.faces.get(parent_id).ok_or_else(|| dangling("face", parent_id))?;
                        if parent.kind != FaceKind::Source || parent.identity_id != face.identity_id {
                            return Err(ManifestError::InvalidRecord(format!(
                                "parent `{parent_id}` is not a source face of `{}`",
                                face.identity_id
                            )));
                        }
                        if let Some(existing) = self.edit_index.get(&(parent_id.clone(), attr)) {
                            return Err(dup("edit", existing));
                        }
                    }
                }
            }
            Record::Detection(det) => {
                self.require_face(&det.face_id)?;
                if let Some(pair) = &det.pair_id {
                    self.require_face(pair)?;
                }
                if let Some(attrs) = &det.attributes {
                    attrs.validate().map_err(|e| ManifestError::InvalidRecord(e.to_string()))?;
                }
                let key = (det.face_id.clone(), det.pair_id.clone());
                if self.detections.contains_key(&key) {
                    return Err(dup("detection", &det.face_id));
                }
            }
            Record::Verdict(v) => {
                self.require_face(&v.transformed_face_id)?;
                if v.accepted != v.reasons.is_empty() {
                    return Err(ManifestError::InvalidRecord(format!(
                        "verdict for `{}` is inconsistent",
                        v.transformed_face_id
                    )));
                }
                if self.verdicts.contains_key(&v.transformed_face_id) {
                    return Err(dup("verdict", &v.transformed_face_id));
                }
            }
            Record::SurveyLabel(l) => {
                self.require_face(&l.face_id)?;
                if self.survey_labels.contains_key(&survey_key(l)) {
                    return Err(dup("survey response", &l.face_id));
                }
            }
            Record::CellReport(c) => {
                if self.cell_reports.contains_key(&cell_key(c)) {
                    return Err(dup("cell report", &format!("{}/{}/{}", c.report, c.attribute, c.demographic)));
                }
            }
        }
        Ok(())
    }

    /// Validate and apply.
    pub fn apply(&mut self, record: Record) -> Result<(), ManifestError> {
        self.check(&record)?;
        match record {
            Record::Identity(id) => {
                self.identities.insert(id.identity_id.clone(), id);
            }
            Record::IdentityValidation(v) => {
                self.validated_identities.insert(v.identity_id, v.validated);
            }
            Record::Face(face) => {
                match face.kind {
                    FaceKind::Source => {
                        self.source_index
                            .insert((face.identity_id.clone(), face.variation_index), face.face_id.clone());
                    }
                    FaceKind::Transformed => {
                        let parent = face.parent_face_id.clone().expect("checked");
                        let attr = face.applied_attribute.expect("checked");
                        self.edit_index.insert((parent, attr), face.face_id.clone());
                    }
                }
                self.faces.insert(face.face_id.clone(), face);
            }
            Record::Detection(det) => {
                self.detections.insert((det.face_id.clone(), det.pair_id.clone()), det);
            }
            Record::Verdict(v) => {
                self.verdicts.insert(v.transformed_face_id.clone(), v);
            }
            Record::SurveyLabel(l) => {
                self.survey_labels.insert(survey_key(&l), l);
            }
            Record::CellReport(c) => {
                self.cell_reports.insert(cell_key(&c), c);
            }
        }
        Ok(())
    }

    /// Identities are usable downstream only once marked validated, unless
    /// the caller opts out.
    pub fn identity_validated(&self, identity_id: &str) -> bool {
        self.validated_identities.get(identity_id).copied().unwrap_or(false)
    }

    pub fn sources(&self) -> impl Iterator<Item = &FaceRecord> {
        self.source_index.values().map(move |id| &self.faces[id])
    }

    pub fn transformed(&self) -> impl Iterator<Item = &FaceRecord> {
        self.edit_index.values().map(move |id| &self.faces[id])
    }

    pub fn demographic_of(&self, face: &FaceRecord) -> Option<crate::domain::Demographic> {
        self.identities.get(&face.identity_id).map(|i| i.demographic)
    }

    pub fn distortion_report(&self, face_id: &str) -> Option<&DetectionReport> {
        self.detections.get(&(face_id.to_string(), None))
    }

    /// The (source, transformed) attribute detections recorded for a pair.
    pub fn pair_detections(&self, transformed_id: &str) -> Option<(&DetectionReport, &DetectionReport)> {
        let face = self.faces.get(transformed_id)?;
        let parent = face.parent_face_id.as_ref()?;
        let pair = Some(transformed_id.to_string());
        let src = self.detections.get(&(parent.clone(), pair.clone()))?;
        let tf = self.detections.get(&(transformed_id.to_string(), pair))?;
        Some((src, tf))
    }

    fn require_identity(&self, id: &str) -> Result<(), ManifestError> {
        if self.identities.contains_key(id) {
            Ok(())
        } else {
            Err(dangling("identity", id))
        }
    }

    fn require_face(&self, id: &str) -> Result<(), ManifestError> {
        if self.faces.contains_key(id) {
            Ok(())
        } else {
            Err(dangling("face", id))
        }
    }
}

fn survey_key(l: &SurveyLabel) -> (SurveyKind, String, String, u32) {
    (l.survey, l.face_id.clone(), l.respondent_id.clone(), l.round)
}

fn cell_key(c: &CellReport) -> (String, AttributeId, String, Option<String>) {
    (c.report.clone(), c.attribute, c.demographic.code().to_string(), c.concept.clone())
}

fn dup(kind: &'static str, id: &str) -> ManifestError {
    ManifestError::DuplicateId { kind, id: id.to_string() }
}

fn dangling(kind: &'static str, id: &str) -> ManifestError {
    ManifestError::DanglingReference { kind, id: id.to_string() }
}

/// Replay a sequence of entries from empty state.
pub fn replay<'a>(entries: impl IntoIterator<Item = &'a Entry>) -> Result<ManifestState, ManifestError> {
    let mut state = ManifestState::default();
    for e in entries {
        state.apply(e.record.clone())?;
    }
    Ok(state)
}

/// Durability applied after each append.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    /// Flush to the OS; survives process death.
    #[default]
    Flush,
    /// Flush and fsync; survives power loss.
    Sync,
}

/// A manifest, optionally backed by a file. Appends go through `&mut self`,
/// so one writer at a time; share it behind a mutex when jobs run in parallel.
#[derive(Debug)]
pub struct Manifest {
    path: Option<PathBuf>,
    file: Option<File>,
    entries: Vec<Entry>,
    state: ManifestState,
    durability: Durability,
    crash_after: Option<u64>,
    appended_since_open: u64,
}

impl Manifest {
    pub fn in_memory() -> Self {
        Manifest {
            path: None,
            file: None,
            entries: Vec::new(),
            state: ManifestState::default(),
            durability: Durability::Flush,
            crash_after: None,
            appended_since_open: 0,
        }
    }

    /// Open (creating if absent) and replay a manifest file.
    pub fn open(path: impl AsRef<Path>, mode: ParseMode) -> Result<Self, ManifestError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut entries = Vec::new();
        let mut state = ManifestState::default();
        let mut valid_len: u64 = 0;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            let mut previous: Option<u64> = None;
            let mut lines = reader.split(b'\n').enumerate().peekable();
            while let Some((i, chunk)) = lines.next() {
                let bytes = chunk?;
                let is_last = lines.peek().is_none();
                let text = String::from_utf8_lossy(&bytes);
                if text.trim().is_empty() {
                    valid_len += bytes.len() as u64 + u64::from(!is_last);
                    continue;
                }
                let entry = match decode_entry(&text, i + 1, mode) {
                    Ok(e) => e,
                    // Torn tail from an interrupted append.
                    Err(ManifestError::Parse { .. }) if is_last => {
                        log::warn!("discarding torn final line {} of {}", i + 1, path.display());
                        break;
                    }
                    Err(e) => return Err(e),
                };
                if let Some(prev) = previous {
                    if entry.seq <= prev {
                        return Err(ManifestError::Sequence { line: i + 1, previous: prev, found: entry.seq });
                    }
                }
                previous = Some(entry.seq);
                state.apply(entry.record.clone())?;
                entries.push(entry);
                valid_len += bytes.len() as u64 + 1;
            }
        }
        let file = OpenOptions::new().create(true).truncate(false).read(true).write(true).open(&path)?;
        let on_disk = file.metadata()?.len();
        if on_disk > valid_len {
            file.set_len(valid_len)?;
        }
        let mut file = file;
        use std::io::Seek;
        file.seek(std::io::SeekFrom::End(0))?;
        // A committed last line without its newline (valid_len overshoot).
        if valid_len > file.metadata()?.len() {
            file.write_all(b"\n")?;
        }
        Ok(Manifest {
            path: Some(path),
            file: Some(file),
            entries,
            state,
            durability: Durability::Flush,
            crash_after: None,
            appended_since_open: 0,
        })
    }

    pub fn with_durability(mut self, durability: Durability) -> Self {
        self.durability = durability;
        self
    }

    /// Test hook: after `n` further successful appends, the next append
    /// writes a torn half-line and fails with [`ManifestError::Crashed`].
    pub fn crash_after(&mut self, n: u64) {
        self.crash_after = Some(n);
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn state(&self) -> &ManifestState {
        &self.state
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.entries.last().map_or(1, |e| e.seq + 1)
    }

    /// Validate, persist and apply one record. Returns its sequence number.
    pub fn append(&mut self, record: Record) -> Result<u64, ManifestError> {
        self.state.check(&record)?;
        let entry = Entry { seq: self.next_seq(), record };
        let line = encode_entry(&entry);
        if let Some(file) = self.file.as_mut() {
            if let Some(limit) = self.crash_after {
                if self.appended_since_open >= limit {
                    let half = &line.as_bytes()[..line.len() / 2];
                    file.write_all(half)?;
                    file.flush()?;
                    self.file = None;
                    return Err(ManifestError::Crashed(limit));
                }
            }
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
            file.flush()?;
            if self.durability == Durability::Sync {
                file.sync_data()?;
            }
        } else if self.path.is_some() {
            return Err(ManifestError::Crashed(self.crash_after.unwrap_or(0)));
        }
        self.appended_since_open += 1;
        let seq = entry.seq;
        self.state.apply(entry.record.clone())?;
        self.entries.push(entry);
        Ok(seq)
    }

    /// Append unless an equal record with the same key is already present.
    /// Returns `Ok(false)` when skipped.
    pub fn append_if_absent(&mut self, record: Record) -> Result<bool, ManifestError> {
        match self.state.check(&record) {
            Ok(()) => self.append(record).map(|_| true),
            Err(ManifestError::DuplicateId { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    }

    /// Rebuild state from the stored entries.
    pub fn replay(&self) -> Result<ManifestState, ManifestError> {
        replay(&self.entries)
    }
}

/// Read every entry of a manifest file without opening it for writing.
pub fn read_entries(path: impl AsRef<Path>, mode: ParseMode) -> Result<Vec<Entry>, ManifestError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_entry(line, i + 1, mode)?);
    }
    Ok(out)
}

/// Convenience: the set of identity ids present.
pub fn identity_ids(state: &ManifestState) -> BTreeSet<String> {
    state.identities.keys().cloned().collect()
}
