//! Human annotation: survey export ingestion, attention checks, majority
//! labels and pipeline efficacy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AttributeId, AttributeVector, Cell, Sex, SurveyKind, SurveyLabel};
use crate::filter::FilterConfig;
use crate::manifest::{Manifest, ManifestError, ManifestState, Record};
use crate::specmatrix::check_specificity;

pub const DEFAULT_EXCLUSION_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SAMPLE_CAP: usize = 5;
const QUORUM: usize = 3;

#[derive(Debug, Error)]
pub enum SurveyError {
    #[error("response from `{0}` failed the attention check")]
    AttentionFailed(String),
    #[error("no survey pairs")]
    EmptyInput,
    #[error("export header does not match the {schema} schema: {detail}")]
    SchemaMismatch { schema: &'static str, detail: String },
    #[error("reading export: {0}")]
    Io(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionLabel {
    Distorted,
    NotDistorted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionResponse {
    pub respondent_id: String,
    pub face_id: String,
    pub label: DistortionLabel,
    pub attention_pass: bool,
}

/// Answer to "which face looks younger, and by how much".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeComparison {
    SourceBy10Plus,
    SourceBy5,
    Equal,
    TransformedBy5,
    TransformedBy10Plus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamePerson {
    Yes,
    No,
    NotSure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeResponse {
    pub respondent_id: String,
    pub source_face_id: String,
    pub transformed_face_id: String,
    pub q1_source: BTreeMap<AttributeId, bool>,
    pub q1_transformed: BTreeMap<AttributeId, bool>,
    pub sex_source: Sex,
    pub sex_transformed: Sex,
    pub q2: AgeComparison,
    pub q3: SamePerson,
    pub round: u32,
    pub attention_pass: bool,
}

macro_rules! token_enum {
    ($ty:ty, $($variant:path => $tok:literal),+ $(,)?) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($variant => $tok),+ }
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($tok => Ok($variant),)+
                    other => Err(format!("unexpected value `{other}`")),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

token_enum!(DistortionLabel, DistortionLabel::Distorted => "distorted", DistortionLabel::NotDistorted => "not_distorted");
token_enum!(
    AgeComparison,
    AgeComparison::SourceBy10Plus => "source_by_10_plus",
    AgeComparison::SourceBy5 => "source_by_5",
    AgeComparison::Equal => "equal",
    AgeComparison::TransformedBy5 => "transformed_by_5",
    AgeComparison::TransformedBy10Plus => "transformed_by_10_plus",
);
token_enum!(SamePerson, SamePerson::Yes => "yes", SamePerson::No => "no", SamePerson::NotSure => "not_sure");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Majority {
    Label(DistortionLabel),
    NeedMoreLabels,
}

/// Strict majority over at least three attention-passing responses.
/// Attention-failed responses are ignored.
pub fn majority_label<'a>(responses: impl IntoIterator<Item = &'a DistortionResponse>) -> Majority {
    let (mut yes, mut no) = (0usize, 0usize);
    for r in responses.into_iter().filter(|r| r.attention_pass) {
        match r.label {
            DistortionLabel::Distorted => yes += 1,
            DistortionLabel::NotDistorted => no += 1,
        }
    }
    if yes + no < QUORUM || yes == no {
        Majority::NeedMoreLabels
    } else if yes > no {
        Majority::Label(DistortionLabel::Distorted)
    } else {
        Majority::Label(DistortionLabel::NotDistorted)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistortionTally {
    pub labels: BTreeMap<String, DistortionLabel>,
    pub need_more_labels: Vec<String>,
}

impl DistortionTally {
    pub fn distorted(&self) -> usize {
        self.labels.values().filter(|l| **l == DistortionLabel::Distorted).count()
    }
}

/// Majority label for every face that appears in `responses`.
pub fn tally_distortion(responses: &[DistortionResponse]) -> DistortionTally {
    let mut by_face: BTreeMap<&str, Vec<&DistortionResponse>> = BTreeMap::new();
    for r in responses {
        by_face.entry(&r.face_id).or_default().push(r);
    }
    let mut tally = DistortionTally::default();
    for (face, rs) in by_face {
        match majority_label(rs) {
            Majority::Label(l) => {
                tally.labels.insert(face.to_string(), l);
            }
            Majority::NeedMoreLabels => tally.need_more_labels.push(face.to_string()),
        }
    }
    tally
}

/// Whether one respondent's answers, read as detector outputs, satisfy the
/// filter's requirements for `applied`.
pub fn pair_validates(
    response: &AttributeResponse,
    applied: AttributeId,
    config: &FilterConfig,
) -> Result<bool, SurveyError> {
    if !response.attention_pass {
        return Err(SurveyError::AttentionFailed(response.respondent_id.clone()));
    }
    let vector = |flags: &BTreeMap<AttributeId, bool>| {
        let mut v = AttributeVector::blank(0);
        for (a, present) in flags {
            v.set(*a, *present);
        }
        v
    };
    let (source, transformed) = (vector(&response.q1_source), vector(&response.q1_transformed));
    Ok(match applied {
        AttributeId::Old | AttributeId::Young => {
            let wanted = if applied == AttributeId::Old {
                AgeComparison::SourceBy10Plus
            } else {
                AgeComparison::TransformedBy10Plus
            };
            response.q2 == wanted && AttributeId::NON_AGE.iter().all(|a| source.get(*a) == transformed.get(*a))
        }
        _ => {
            let small_age_change =
                !matches!(response.q2, AgeComparison::SourceBy10Plus | AgeComparison::TransformedBy10Plus);
            let violations = check_specificity(applied, &source, &transformed, &config.matrix)
                .expect("non-age attribute has a matrix row");
            !source.get(applied) && violations.is_empty() && small_age_change
        }
    })
}

/// One surveyed (source, transformed) pair with every response it received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyPair {
    pub source_face_id: String,
    pub transformed_face_id: String,
    pub cell: Cell,
    /// Majority verdict of the distortion survey.
    pub distorted: bool,
    pub responses: Vec<AttributeResponse>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellEfficacy {
    pub sampled: u64,
    pub validated: u64,
}

impl CellEfficacy {
    pub fn efficacy(&self) -> f64 {
        if self.sampled == 0 {
            0.0
        } else {
            self.validated as f64 / self.sampled as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficacyReport {
    pub total_sampled: u64,
    pub distorted_removed: u64,
    pub attribute_validated: u64,
    /// Round in which each attribute-validated pair first validated.
    pub validated_by_round: BTreeMap<u32, u64>,
    pub identity_removed: u64,
    pub validated: u64,
    pub efficacy: f64,
    pub per_cell: BTreeMap<String, CellEfficacy>,
    pub exclusion_threshold: f64,
    pub excluded_cells: Vec<String>,
    pub restricted_sampled: u64,
    pub restricted_validated: u64,
    pub restricted_efficacy: f64,
}

impl EfficacyReport {
    pub fn is_excluded(&self, cell: Cell) -> bool {
        self.excluded_cells.contains(&cell.key())
    }
}

/// Efficacy over surveyed pairs. Distorted pairs are removed first; a pair
/// validates if any attention-passing response from any round satisfies
/// the filter requirements; validated pairs that more than one respondent
/// judged a different person are then removed.
pub fn compute_efficacy(
    pairs: &[SurveyPair],
    config: &FilterConfig,
    exclusion_threshold: f64,
) -> Result<EfficacyReport, SurveyError> {
    if pairs.is_empty() {
        return Err(SurveyError::EmptyInput);
    }
    let mut report = EfficacyReport {
        total_sampled: 0,
        distorted_removed: 0,
        attribute_validated: 0,
        validated_by_round: BTreeMap::new(),
        identity_removed: 0,
        validated: 0,
        efficacy: 0.0,
        per_cell: BTreeMap::new(),
        exclusion_threshold,
        excluded_cells: Vec::new(),
        restricted_sampled: 0,
        restricted_validated: 0,
        restricted_efficacy: 0.0,
    };
    for pair in pairs {
        report.total_sampled += 1;
        let cell = report.per_cell.entry(pair.cell.key()).or_default();
        cell.sampled += 1;
        if pair.distorted {
            report.distorted_removed += 1;
            continue;
        }
        let passing: Vec<&AttributeResponse> = pair.responses.iter().filter(|r| r.attention_pass).collect();
        let first_round = passing
            .iter()
            .filter(|r| pair_validates(r, pair.cell.attribute, config).unwrap_or(false))
            .map(|r| r.round)
            .min();
        let Some(round) = first_round else { continue };
        report.attribute_validated += 1;
        *report.validated_by_round.entry(round).or_default() += 1;
        if passing.iter().filter(|r| r.q3 == SamePerson::No).count() > 1 {
            report.identity_removed += 1;
            continue;
        }
        report.validated += 1;
        cell.validated += 1;
    }
    report.efficacy = report.validated as f64 / report.total_sampled as f64;
    for (key, c) in &report.per_cell {
        if c.efficacy() < exclusion_threshold {
            report.excluded_cells.push(key.clone());
        } else {
            report.restricted_sampled += c.sampled;
            report.restricted_validated += c.validated;
        }
    }
    if report.restricted_sampled > 0 {
        report.restricted_efficacy = report.restricted_validated as f64 / report.restricted_sampled as f64;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportSchema {
    Distortion,
    Attribute,
}

impl ExportSchema {
    fn name(self) -> &'static str {
        match self {
            ExportSchema::Distortion => "distortion",
            ExportSchema::Attribute => "attribute",
        }
    }

    /// Required columns; any order is accepted.
    pub fn columns(self) -> Vec<String> {
        match self {
            ExportSchema::Distortion => {
                ["respondent_id", "face_id", "label", "attention_pass"].map(String::from).to_vec()
            }
            ExportSchema::Attribute => {
                let mut cols: Vec<String> =
                    ["respondent_id", "source_face_id", "transformed_face_id"].map(String::from).to_vec();
                for face in ["source", "transformed"] {
                    cols.extend(AttributeId::NON_AGE.iter().map(|a| format!("q1_{a}_{face}")));
                }
                cols.extend(["q1_sex_source", "q1_sex_transformed", "q2", "q3", "round"].map(String::from));
                cols
            }
        }
    }
}

impl FromStr for ExportSchema {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "distortion" => Ok(ExportSchema::Distortion),
            "attribute" | "attributes" => Ok(ExportSchema::Attribute),
            other => Err(format!("unknown survey schema `{other}`")),
        }
    }
}

/// A row that could not be used, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowIssue {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ingested {
    pub distortion: Vec<DistortionResponse>,
    pub attribute: Vec<AttributeResponse>,
    pub malformed: Vec<RowIssue>,
    /// Rows naming faces the manifest does not know; kept, flagged.
    pub unknown_faces: Vec<RowIssue>,
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "y" => Ok(true),
        "false" | "0" | "no" | "n" => Ok(false),
        other => Err(format!("expected yes/no, got `{other}`")),
    }
}

fn parse_sex(s: &str) -> Result<Sex, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "male" | "m" => Ok(Sex::Male),
        "female" | "f" => Ok(Sex::Female),
        other => Err(format!("expected male/female, got `{other}`")),
    }
}

/// Parse a survey export. With a manifest state, face ids are checked and
/// the attribute survey's attention check compares the reported sex of the
/// source face against the identity's demographic.
pub fn ingest_export(
    reader: impl Read,
    schema: ExportSchema,
    state: Option<&ManifestState>,
) -> Result<Ingested, SurveyError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
    let headers: Vec<String> =
        csv.headers().map_err(|e| SurveyError::Io(e.to_string()))?.iter().map(String::from).collect();
    let expected = schema.columns();
    let have: BTreeSet<&str> = headers.iter().map(String::as_str).collect();
    let want: BTreeSet<&str> = expected.iter().map(String::as_str).collect();
    if have != want || have.len() != headers.len() {
        let missing: Vec<&str> = want.difference(&have).copied().collect();
        let extra: Vec<&str> = have.difference(&want).copied().collect();
        return Err(SurveyError::SchemaMismatch {
            schema: schema.name(),
            detail: format!("missing {missing:?}, unexpected {extra:?}"),
        });
    }
    let col: BTreeMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let mut out = Ingested::default();
    for record in csv.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                out.malformed.push(RowIssue { line, message: e.to_string() });
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            out.malformed
                .push(RowIssue { line, message: format!("{} fields, expected {}", record.len(), headers.len()) });
            continue;
        }
        let get = |name: &str| record.get(col[name]).unwrap_or("");
        let known = |face: &str| state.is_none_or(|s| s.faces.contains_key(face));
        let parsed: Result<(), String> = match schema {
            ExportSchema::Distortion => (|| {
                let r = DistortionResponse {
                    respondent_id: get("respondent_id").to_string(),
                    face_id: get("face_id").to_string(),
                    label: get("label").parse()?,
                    attention_pass: parse_bool(get("attention_pass"))?,
                };
                if !known(&r.face_id) {
                    out.unknown_faces.push(RowIssue { line, message: format!("unknown face `{}`", r.face_id) });
                }
                out.distortion.push(r);
                Ok(())
            })(),
            ExportSchema::Attribute => (|| {
                let flags = |face: &str| -> Result<BTreeMap<AttributeId, bool>, String> {
                    AttributeId::NON_AGE
                        .iter()
                        .map(|a| {
                            Ok((
                                *a,
                                parse_bool(get(&format!("q1_{a}_{face}")))
                                    .map_err(|e| format!("q1_{a}_{face}: {e}"))?,
                            ))
                        })
                        .collect()
                };
                let mut r = AttributeResponse {
                    respondent_id: get("respondent_id").to_string(),
                    source_face_id: get("source_face_id").to_string(),
                    transformed_face_id: get("transformed_face_id").to_string(),
                    q1_source: flags("source")?,
                    q1_transformed: flags("transformed")?,
                    sex_source: parse_sex(get("q1_sex_source"))?,
                    sex_transformed: parse_sex(get("q1_sex_transformed"))?,
                    q2: get("q2").parse()?,
                    q3: get("q3").parse()?,
                    round: get("round").parse().map_err(|e| format!("round: {e}"))?,
                    attention_pass: false,
                };
                for face in [&r.source_face_id, &r.transformed_face_id] {
                    if !known(face) {
                        out.unknown_faces.push(RowIssue { line, message: format!("unknown face `{face}`") });
                    }
                }
                r.attention_pass = match state {
                    Some(s) => s
                        .faces
                        .get(&r.source_face_id)
                        .and_then(|f| s.demographic_of(f))
                        .is_some_and(|d| d.sex == r.sex_source),
                    None => true,
                };
                out.attribute.push(r);
                Ok(())
            })(),
        };
        if let Err(message) = parsed {
            out.malformed.push(RowIssue { line, message });
        }
    }
    Ok(out)
}

/// Manifest records for ingested responses. Distortion responses are keyed
/// by face with round 1; attribute responses by transformed face.
pub fn survey_labels(ingested: &Ingested) -> Vec<SurveyLabel> {
    let d = ingested.distortion.iter().map(|r| SurveyLabel {
        survey: SurveyKind::Distortion,
        respondent_id: r.respondent_id.clone(),
        face_id: r.face_id.clone(),
        round: 1,
        attention_pass: r.attention_pass,
        response: serde_json::to_value(r).expect("response serializes"),
    });
    let a = ingested.attribute.iter().map(|r| SurveyLabel {
        survey: SurveyKind::Attribute,
        respondent_id: r.respondent_id.clone(),
        face_id: r.transformed_face_id.clone(),
        round: r.round,
        attention_pass: r.attention_pass,
        response: serde_json::to_value(r).expect("response serializes"),
    });
    d.chain(a).collect()
}

/// Append labels not yet in the manifest; returns how many were new.
pub fn record_labels(manifest: &mut Manifest, labels: Vec<SurveyLabel>) -> Result<usize, SurveyError> {
    let mut added = 0;
    for l in labels {
        if manifest.append_if_absent(Record::SurveyLabel(l))? {
            added += 1;
        }
    }
    Ok(added)
}

/// All responses stored in the manifest.
pub fn stored_responses(state: &ManifestState) -> (Vec<DistortionResponse>, Vec<AttributeResponse>) {
    let mut d = Vec::new();
    let mut a = Vec::new();
    for l in state.survey_labels.values() {
        match l.survey {
            SurveyKind::Distortion => {
                if let Ok(r) = serde_json::from_value(l.response.clone()) {
                    d.push(r);
                }
            }
            SurveyKind::Attribute => {
                if let Ok(r) = serde_json::from_value(l.response.clone()) {
                    a.push(r);
                }
            }
        }
    }
    (d, a)
}

/// A pair chosen for the attribute survey.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampledPair {
    pub cell: String,
    pub source_face_id: String,
    pub transformed_face_id: String,
}

/// Up to `cap` accepted pairs per cell, chosen by a seeded shuffle.
pub fn sample_for_survey(state: &ManifestState, cap: usize, seed: u64) -> Vec<SampledPair> {
    let mut by_cell: BTreeMap<Cell, Vec<SampledPair>> = BTreeMap::new();
    for face in state.transformed() {
        if !state.verdicts.get(&face.face_id).is_some_and(|v| v.accepted) {
            continue;
        }
        let (Some(demo), Some(parent)) = (state.demographic_of(face), face.parent_face_id.as_ref()) else {
            continue;
        };
        let cell = Cell::new(face.applied_attribute.expect("transformed"), demo);
        by_cell.entry(cell).or_default().push(SampledPair {
            cell: cell.key(),
            source_face_id: parent.clone(),
            transformed_face_id: face.face_id.clone(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, mut pairs) in by_cell {
        pairs.shuffle(&mut rng);
        pairs.truncate(cap);
        pairs.sort();
        out.extend(pairs);
    }
    out
}

/// Join a survey sample with the stored responses.
pub fn survey_pairs(
    sample: &[SampledPair],
    distortion: &[DistortionResponse],
    attribute: &[AttributeResponse],
) -> Result<Vec<SurveyPair>, SurveyError> {
    let tally = tally_distortion(distortion);
    let mut by_pair: BTreeMap<&str, Vec<AttributeResponse>> = BTreeMap::new();
    for r in attribute {
        by_pair.entry(&r.transformed_face_id).or_default().push(r.clone());
    }
    sample
        .iter()
        .map(|s| {
            let cell = Cell::parse_key(&s.cell).map_err(|e| SurveyError::Io(e.to_string()))?;
            Ok(SurveyPair {
                source_face_id: s.source_face_id.clone(),
                transformed_face_id: s.transformed_face_id.clone(),
                cell,
                distorted: tally.labels.get(&s.transformed_face_id) == Some(&DistortionLabel::Distorted),
                responses: by_pair.remove(s.transformed_face_id.as_str()).unwrap_or_default(),
            })
        })
        .collect()
}
