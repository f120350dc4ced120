//! Attribute-detection prompts, response parsing and pair detection.
//!
//! One query covers all requested attributes for both faces of a pair. The
//! pair is shown as a horizontal concatenation, source on the left and
//! transformed on the right. The detector must answer with a JSON object
//! holding a `source` and a `transformed` map from attribute name to
//! `"Yes"`/`"No"`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{estimate_age, AttributeQuery, Backend, BackendError, ExamplePair, ImageLayout};
use crate::domain::{AttributeId, AttributeVector, DetectionReport, FaceRecord, ImageRef};
use crate::exec::run_ordered;
use crate::manifest::{Manifest, ManifestError, Record};

/// Presence flags for one face, keyed by attribute.
pub type Flags = BTreeMap<AttributeId, bool>;

pub const ATTRIBUTES_PLACEHOLDER: &str = "{{attributes}}";

pub const DEFAULT_INSTRUCTION: &str = "The image shows two generated faces side by side. \
The face on the left is the source face and the face on the right is the transformed face. \
For each face, decide whether each of these attributes is present: {{attributes}}. \
Return a JSON object with two keys, \"source\" and \"transformed\". Each maps every attribute \
name listed above to \"Yes\" or \"No\". Return only the JSON object.";

/// Parse attempts per pair before it is marked detection-failed.
pub const PARSE_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("age attribute `{0}` cannot be requested from the attribute detector")]
    AgeAttributeInPrompt(AttributeId),
    #[error("no attributes requested")]
    EmptyAttributeList,
    #[error("few-shot profile needs at least one example")]
    MissingFewShotExamples,
    #[error("instruction template lacks the {{{{attributes}}}} placeholder")]
    MissingPlaceholder,
    #[error("pair detection needs all 17 non-age attributes, profile lists {0}")]
    IncompleteAttributeList(usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub source_ref: ImageRef,
    pub transformed_ref: ImageRef,
    pub source: BTreeMap<AttributeId, bool>,
    pub transformed: BTreeMap<AttributeId, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptProfile {
    pub mode: PromptMode,
    #[serde(default)]
    pub few_shot_examples: Vec<FewShotExample>,
    pub attribute_list: Vec<AttributeId>,
    pub instruction_template: String,
}

impl Default for PromptProfile {
    fn default() -> Self {
        PromptProfile {
            mode: PromptMode::ZeroShot,
            few_shot_examples: Vec::new(),
            attribute_list: AttributeId::NON_AGE.to_vec(),
            instruction_template: DEFAULT_INSTRUCTION.to_string(),
        }
    }
}

impl PromptProfile {
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.mode == PromptMode::FewShot && self.few_shot_examples.is_empty() {
            return Err(DetectError::MissingFewShotExamples);
        }
        if !self.instruction_template.contains(ATTRIBUTES_PLACEHOLDER) {
            return Err(DetectError::MissingPlaceholder);
        }
        check_attributes(&self.attribute_list)
    }

    /// Profile asking about a single attribute, for per-attribute experiments.
    pub fn single_attribute(&self, attribute: AttributeId) -> PromptProfile {
        PromptProfile { attribute_list: vec![attribute], ..self.clone() }
    }
}

fn check_attributes(attributes: &[AttributeId]) -> Result<(), DetectError> {
    if attributes.is_empty() {
        return Err(DetectError::EmptyAttributeList);
    }
    match attributes.iter().find(|a| a.is_age()) {
        Some(a) => Err(DetectError::AgeAttributeInPrompt(*a)),
        None => Ok(()),
    }
}

/// Instruction text and image layout for a query over `attributes`.
pub fn build_attribute_prompt(
    profile: &PromptProfile,
    attributes: &[AttributeId],
) -> Result<(String, ImageLayout), DetectError> {
    check_attributes(attributes)?;
    if profile.mode == PromptMode::FewShot && profile.few_shot_examples.is_empty() {
        return Err(DetectError::MissingFewShotExamples);
    }
    let mut unique: Vec<AttributeId> = Vec::with_capacity(attributes.len());
    for a in attributes {
        if !unique.contains(a) {
            unique.push(*a);
        }
    }
    let list = unique.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(", ");
    let instruction = profile.instruction_template.replace(ATTRIBUTES_PLACEHOLDER, &list);
    let examples = match profile.mode {
        PromptMode::ZeroShot => Vec::new(),
        PromptMode::FewShot => profile
            .few_shot_examples
            .iter()
            .map(|ex| {
                let pick = |m: &BTreeMap<AttributeId, bool>| -> BTreeMap<AttributeId, bool> {
                    unique.iter().map(|a| (*a, m.get(a).copied().unwrap_or(false))).collect()
                };
                ExamplePair {
                    source_ref: ex.source_ref.clone(),
                    transformed_ref: ex.transformed_ref.clone(),
                    answer: render_attribute_response(&pick(&ex.source), &pick(&ex.transformed)),
                }
            })
            .collect(),
    };
    Ok((instruction, ImageLayout { arrangement: "horizontal_concat".into(), examples }))
}

/// Render an answer in the format the detector is asked to produce.
pub fn render_attribute_response(
    source: &BTreeMap<AttributeId, bool>,
    transformed: &BTreeMap<AttributeId, bool>,
) -> String {
    let face = |m: &BTreeMap<AttributeId, bool>| -> serde_json::Map<String, serde_json::Value> {
        m.iter()
            .map(|(a, v)| (a.as_str().to_string(), serde_json::Value::from(if *v { "Yes" } else { "No" })))
            .collect()
    };
    let mut obj = serde_json::Map::new();
    obj.insert("source".into(), serde_json::Value::Object(face(source)));
    obj.insert("transformed".into(), serde_json::Value::Object(face(transformed)));
    serde_json::Value::Object(obj).to_string()
}

fn strip_to_object(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

fn snippet(s: &str) -> String {
    let s = s.trim();
    if s.chars().count() > 120 {
        format!("{}...", s.chars().take(120).collect::<String>())
    } else {
        s.to_string()
    }
}

/// Strictly extract both faces' flags for `attributes` from a detector
/// response. Surrounding prose and code fences are ignored, unrequested keys
/// are ignored, and a missing face or attribute is an error.
pub fn parse_attribute_response(raw: &str, attributes: &[AttributeId]) -> Result<(Flags, Flags), BackendError> {
    let unparseable = |why: &str, frag: &str| BackendError::UnparseableResponse(format!("{why}: `{}`", snippet(frag)));
    let body = strip_to_object(raw).ok_or_else(|| unparseable("no JSON object", raw))?;
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| unparseable(&format!("invalid JSON ({e})"), body))?;
    let face = |names: &[&str]| -> Result<BTreeMap<AttributeId, bool>, BackendError> {
        let obj = names
            .iter()
            .find_map(|n| value.get(*n))
            .and_then(|v| v.as_object())
            .ok_or_else(|| unparseable(&format!("missing `{}` face", names[0]), body))?;
        attributes
            .iter()
            .map(|a| {
                let v = obj
                    .get(a.as_str())
                    .ok_or_else(|| unparseable(&format!("missing `{a}` for {} face", names[0]), body))?;
                let text = v.as_str().map(|s| s.trim().to_ascii_lowercase());
                match text.as_deref() {
                    Some("yes") => Ok((*a, true)),
                    Some("no") => Ok((*a, false)),
                    _ => Err(unparseable(&format!("`{a}` is not Yes/No"), &v.to_string())),
                }
            })
            .collect()
    };
    Ok((face(&["source", "source_face", "left"])?, face(&["transformed", "transformed_face", "right"])?))
}

/// Query the detector for a pair, re-asking on unparseable answers.
/// Returns both flag maps, the raw accepted response and the retries used.
pub fn detect_attributes(
    backend: &dyn Backend,
    source: &ImageRef,
    transformed: &ImageRef,
    attributes: &[AttributeId],
    profile: &PromptProfile,
) -> Result<(Flags, Flags, String, u32), BackendError> {
    let (instruction, layout) = build_attribute_prompt(profile, attributes).map_err(|e| match e {
        DetectError::Backend(b) => b,
        other => BackendError::Status { status: 400, message: other.to_string() },
    })?;
    let query = AttributeQuery {
        source_ref: source.clone(),
        transformed_ref: transformed.clone(),
        attributes: attributes.to_vec(),
        instruction,
        layout,
    };
    let mut last = None;
    for attempt in 0..PARSE_ATTEMPTS {
        let raw = backend.query_attributes(&query)?;
        match parse_attribute_response(&raw, attributes) {
            Ok((s, t)) => return Ok((s, t, raw, attempt)),
            Err(e) => {
                log::debug!("attribute response for {transformed} unparseable (attempt {}): {e}", attempt + 1);
                last = Some(e);
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDetection {
    pub source: AttributeVector,
    pub transformed: AttributeVector,
    pub raw_response: String,
    pub retries_used: u32,
}

/// Full detection for one (source, transformed) pair: binary flags for the
/// profile's attributes and estimated ages for both faces.
pub fn detect_pair(
    source: &FaceRecord,
    transformed: &FaceRecord,
    backend: &dyn Backend,
    profile: &PromptProfile,
) -> Result<PairDetection, DetectError> {
    profile.validate()?;
    if profile.attribute_list.len() != AttributeId::NON_AGE.len()
        || AttributeId::NON_AGE.iter().any(|a| !profile.attribute_list.contains(a))
    {
        return Err(DetectError::IncompleteAttributeList(profile.attribute_list.len()));
    }
    let (s, t, raw, retries) =
        detect_attributes(backend, &source.image_ref, &transformed.image_ref, &profile.attribute_list, profile)?;
    let source_age = estimate_age(backend, &source.image_ref)?;
    let transformed_age = estimate_age(backend, &transformed.image_ref)?;
    let to_vector = |flags, age| {
        AttributeVector::from_flags(flags, age)
            .map_err(|e| DetectError::Backend(BackendError::UnparseableResponse(e.to_string())))
    };
    Ok(PairDetection {
        source: to_vector(s, source_age)?,
        transformed: to_vector(t, transformed_age)?,
        raw_response: raw,
        retries_used: retries,
    })
}

/// Outcome of a dataset-wide detection pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectRunReport {
    pub detected: usize,
    pub skipped: usize,
    pub failed: Vec<(String, String)>,
    pub retries_used: u64,
}

/// Detect every transformed face that has no pair detection yet and is not
/// already classified as distorted. Successful pairs append two reports
/// (source and transformed, both keyed by the transformed face); failures
/// append one report carrying the error on the transformed face.
pub fn detect_dataset(
    manifest: &mut Manifest,
    backend: &dyn Backend,
    profile: &PromptProfile,
    jobs: usize,
) -> Result<DetectRunReport, DetectError> {
    profile.validate()?;
    let mut report = DetectRunReport::default();
    let pending: Vec<(FaceRecord, FaceRecord)> = {
        let state = manifest.state();
        state
            .transformed()
            .filter(|tf| {
                let done = state.detections.contains_key(&(tf.face_id.clone(), Some(tf.face_id.clone())));
                let distorted = state.distortion_report(&tf.face_id).and_then(|d| d.distorted).unwrap_or(false);
                if done || distorted {
                    report.skipped += 1;
                }
                !done && !distorted
            })
            .filter_map(|tf| {
                let parent = state.faces.get(tf.parent_face_id.as_ref()?)?;
                Some((parent.clone(), tf.clone()))
            })
            .collect()
    };
    let versions: BTreeMap<String, String> = [("attributes".to_string(), backend.version())].into();
    let report_for = |face_id: &str, pair: &str, attributes, failure| DetectionReport {
        face_id: face_id.to_string(),
        pair_id: Some(pair.to_string()),
        attributes,
        distortion_score: None,
        distorted: None,
        detector_versions: versions.clone(),
        failure,
    };
    run_ordered(
        &pending,
        jobs,
        |(src, tf)| detect_pair(src, tf, backend, profile),
        |(src, tf), result| {
            match result {
                Ok(d) => {
                    report.retries_used += u64::from(d.retries_used);
                    if !manifest.state().detections.contains_key(&(src.face_id.clone(), Some(tf.face_id.clone()))) {
                        manifest.append(Record::Detection(report_for(
                            &src.face_id,
                            &tf.face_id,
                            Some(d.source),
                            None,
                        )))?;
                    }
                    manifest.append(Record::Detection(report_for(
                        &tf.face_id,
                        &tf.face_id,
                        Some(d.transformed),
                        None,
                    )))?;
                    report.detected += 1;
                }
                Err(e) => {
                    manifest.append(Record::Detection(report_for(
                        &tf.face_id,
                        &tf.face_id,
                        None,
                        Some(e.to_string()),
                    )))?;
                    report.failed.push((tf.face_id.clone(), e.to_string()));
                }
            }
            Ok::<_, DetectError>(())
        },
    )?;
    Ok(report)
}
