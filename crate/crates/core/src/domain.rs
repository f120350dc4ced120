//! Core data model: attributes, demographics, face records and the
//! record types that make up a dataset manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("unknown demographic code `{0}`")]
    UnknownDemographic(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("invalid image reference `{0}`")]
    InvalidImageRef(String),
    #[error("attribute vector is missing `{0}`")]
    IncompleteAttributeVector(AttributeId),
    #[error("attribute vector must not contain age attribute `{0}`")]
    AgeAttributeInVector(AttributeId),
}

/// One of the 19 facial attributes an edit can apply.
///
/// Declaration order is the canonical order; `Ord` follows it, so every
/// `BTreeMap` keyed by attribute iterates canonically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeId {
    Glasses,
    Sunglasses,
    Mustache,
    HeavyMakeup,
    ShoulderHair,
    Scarf,
    Pigtails,
    Smile,
    BuzzCut,
    HeadBand,
    ThickBeard,
    BlueHair,
    Facemask,
    CurlyHair,
    Goatee,
    Old,
    RedLipstick,
    RedHair,
    Young,
}

impl AttributeId {
    pub const ALL: [AttributeId; 19] = [
        AttributeId::Glasses,
        AttributeId::Sunglasses,
        AttributeId::Mustache,
        AttributeId::HeavyMakeup,
        AttributeId::ShoulderHair,
        AttributeId::Scarf,
        AttributeId::Pigtails,
        AttributeId::Smile,
        AttributeId::BuzzCut,
        AttributeId::HeadBand,
        AttributeId::ThickBeard,
        AttributeId::BlueHair,
        AttributeId::Facemask,
        AttributeId::CurlyHair,
        AttributeId::Goatee,
        AttributeId::Old,
        AttributeId::RedLipstick,
        AttributeId::RedHair,
        AttributeId::Young,
    ];

    /// The 17 attributes reported by binary detectors, in canonical order.
    pub const NON_AGE: [AttributeId; 17] = [
        AttributeId::Glasses,
        AttributeId::Sunglasses,
        AttributeId::Mustache,
        AttributeId::HeavyMakeup,
        AttributeId::ShoulderHair,
        AttributeId::Scarf,
        AttributeId::Pigtails,
        AttributeId::Smile,
        AttributeId::BuzzCut,
        AttributeId::HeadBand,
        AttributeId::ThickBeard,
        AttributeId::BlueHair,
        AttributeId::Facemask,
        AttributeId::CurlyHair,
        AttributeId::Goatee,
        AttributeId::RedLipstick,
        AttributeId::RedHair,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeId::Glasses => "glasses",
            AttributeId::Sunglasses => "sunglasses",
            AttributeId::Mustache => "mustache",
            AttributeId::HeavyMakeup => "heavy_makeup",
            AttributeId::ShoulderHair => "shoulder_hair",
            AttributeId::Scarf => "scarf",
            AttributeId::Pigtails => "pigtails",
            AttributeId::Smile => "smile",
            AttributeId::BuzzCut => "buzz_cut",
            AttributeId::HeadBand => "head_band",
            AttributeId::ThickBeard => "thick_beard",
            AttributeId::BlueHair => "blue_hair",
            AttributeId::Facemask => "facemask",
            AttributeId::CurlyHair => "curly_hair",
            AttributeId::Goatee => "goatee",
            AttributeId::Old => "old",
            AttributeId::RedLipstick => "red_lipstick",
            AttributeId::RedHair => "red_hair",
            AttributeId::Young => "young",
        }
    }

    pub fn is_age(self) -> bool {
        matches!(self, AttributeId::Old | AttributeId::Young)
    }

    /// Position in the canonical 19-attribute order.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Position among the 17 non-age attributes, `None` for old/young.
    pub fn non_age_index(self) -> Option<usize> {
        AttributeId::NON_AGE.iter().position(|a| *a == self)
    }
}

impl fmt::Display for AttributeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributeId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttributeId::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| DomainError::UnknownAttribute(s.to_string()))
    }
}

/// All 19 attributes in canonical order.
pub fn canonical_attributes() -> Vec<AttributeId> {
    AttributeId::ALL.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ethnicity {
    EastAsian,
    Indian,
    White,
    Black,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }
}

/// An (ethnicity, sex) group. Serialized as its two-letter code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Demographic {
    pub ethnicity: Ethnicity,
    pub sex: Sex,
}

impl Demographic {
    /// All eight demographics, in the column order used by reports.
    pub const ALL: [Demographic; 8] = [
        Demographic::new(Ethnicity::EastAsian, Sex::Male),
        Demographic::new(Ethnicity::EastAsian, Sex::Female),
        Demographic::new(Ethnicity::Black, Sex::Male),
        Demographic::new(Ethnicity::Black, Sex::Female),
        Demographic::new(Ethnicity::Indian, Sex::Male),
        Demographic::new(Ethnicity::Indian, Sex::Female),
        Demographic::new(Ethnicity::White, Sex::Male),
        Demographic::new(Ethnicity::White, Sex::Female),
    ];

    pub const fn new(ethnicity: Ethnicity, sex: Sex) -> Self {
        Demographic { ethnicity, sex }
    }

    pub fn code(self) -> &'static str {
        match (self.ethnicity, self.sex) {
            (Ethnicity::EastAsian, Sex::Male) => "AM",
            (Ethnicity::EastAsian, Sex::Female) => "AF",
            (Ethnicity::Indian, Sex::Male) => "IM",
            (Ethnicity::Indian, Sex::Female) => "IF",
            (Ethnicity::White, Sex::Male) => "WM",
            (Ethnicity::White, Sex::Female) => "WF",
            (Ethnicity::Black, Sex::Male) => "BM",
            (Ethnicity::Black, Sex::Female) => "BF",
        }
    }
}

/// Case-insensitive parse of a two-letter demographic code.
pub fn parse_demographic(code: &str) -> Result<Demographic, DomainError> {
    let upper = code.trim().to_ascii_uppercase();
    Demographic::ALL
        .iter()
        .copied()
        .find(|d| d.code() == upper)
        .ok_or_else(|| DomainError::UnknownDemographic(code.to_string()))
}

impl fmt::Display for Demographic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Demographic {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_demographic(s)
    }
}

impl Serialize for Demographic {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for Demographic {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_demographic(&s).map_err(serde::de::Error::custom)
    }
}

/// An (applied attribute, demographic) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub attribute: AttributeId,
    pub demographic: Demographic,
}

impl Cell {
    pub fn new(attribute: AttributeId, demographic: Demographic) -> Self {
        Cell { attribute, demographic }
    }

    /// All 152 cells in canonical attribute order, then report column order.
    pub fn all() -> impl Iterator<Item = Cell> {
        AttributeId::ALL.into_iter().flat_map(|a| Demographic::ALL.into_iter().map(move |d| Cell::new(a, d)))
    }

    /// `<attribute>/<code>`, the key format used in threshold files.
    pub fn key(&self) -> String {
        format!("{}/{}", self.attribute, self.demographic)
    }

    pub fn parse_key(key: &str) -> Result<Cell, DomainError> {
        let (a, d) = key.split_once('/').ok_or_else(|| DomainError::UnknownAttribute(key.to_string()))?;
        Ok(Cell::new(a.parse()?, parse_demographic(d)?))
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.attribute, self.demographic)
    }
}

/// Lowercase hex SHA-256 digest of an image's bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ImageRef(String);

impl ImageRef {
    pub fn of_bytes(bytes: &[u8]) -> ImageRef {
        use sha2::{Digest, Sha256};
        ImageRef(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ImageRef {
    type Error = DomainError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        let ok = s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if ok {
            Ok(ImageRef(s))
        } else {
            Err(DomainError::InvalidImageRef(s))
        }
    }
}

impl FromStr for ImageRef {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ImageRef::try_from(s.to_string())
    }
}

impl From<ImageRef> for String {
    fn from(r: ImageRef) -> String {
        r.0
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub identity_id: String,
    pub display_name: String,
    pub demographic: Demographic,
    pub celebrity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceKind {
    Source,
    Transformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub seed: u64,
    pub prompt: String,
    pub hyperparams: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub face_id: String,
    pub identity_id: String,
    pub variation_index: u32,
    pub kind: FaceKind,
    pub applied_attribute: Option<AttributeId>,
    pub image_ref: ImageRef,
    pub gen_params: GenParams,
    pub parent_face_id: Option<String>,
}

impl FaceRecord {
    pub fn source_id(identity_id: &str, variation: u32) -> String {
        format!("src-{identity_id}-v{variation}")
    }

    pub fn transformed_id(parent_face_id: &str, attribute: AttributeId) -> String {
        let stem = parent_face_id.strip_prefix("src-").unwrap_or(parent_face_id);
        format!("tf-{stem}-{attribute}")
    }
}

/// Presence flags for the 17 non-age attributes plus an estimated age.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub flags: BTreeMap<AttributeId, bool>,
    pub age_years: u32,
}

impl AttributeVector {
    /// All 17 flags false.
    pub fn blank(age_years: u32) -> Self {
        AttributeVector { flags: AttributeId::NON_AGE.iter().map(|a| (*a, false)).collect(), age_years }
    }

    pub fn with(mut self, attribute: AttributeId, present: bool) -> Self {
        self.set(attribute, present);
        self
    }

    pub fn from_flags(flags: BTreeMap<AttributeId, bool>, age_years: u32) -> Result<Self, DomainError> {
        let v = AttributeVector { flags, age_years };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if let Some(a) = self.flags.keys().find(|a| a.is_age()) {
            return Err(DomainError::AgeAttributeInVector(*a));
        }
        if let Some(a) = AttributeId::NON_AGE.iter().find(|a| !self.flags.contains_key(a)) {
            return Err(DomainError::IncompleteAttributeVector(*a));
        }
        Ok(())
    }

    pub fn get(&self, attribute: AttributeId) -> bool {
        self.flags.get(&attribute).copied().unwrap_or(false)
    }

    pub fn set(&mut self, attribute: AttributeId, present: bool) {
        if !attribute.is_age() {
            self.flags.insert(attribute, present);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub face_id: String,
    /// Transformed face of the pair this detection belongs to; `None` for
    /// distortion scoring, which is per face.
    pub pair_id: Option<String>,
    pub attributes: Option<AttributeVector>,
    pub distortion_score: Option<f64>,
    pub distorted: Option<bool>,
    pub detector_versions: BTreeMap<String, String>,
    /// Set when detection failed; the pair is excluded downstream.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RejectReason {
    Distorted,
    SourceHasAttribute,
    SpecificityViolation(AttributeId),
    AgeDriftExceeded,
    AgeChangeInsufficient,
}

impl RejectReason {
    /// Reason code without the attribute argument, used for summary counts.
    pub fn family(&self) -> &'static str {
        match self {
            RejectReason::Distorted => "DISTORTED",
            RejectReason::SourceHasAttribute => "SOURCE_HAS_ATTRIBUTE",
            RejectReason::SpecificityViolation(_) => "SPECIFICITY_VIOLATION",
            RejectReason::AgeDriftExceeded => "AGE_DRIFT_EXCEEDED",
            RejectReason::AgeChangeInsufficient => "AGE_CHANGE_INSUFFICIENT",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::SpecificityViolation(a) => write!(f, "SPECIFICITY_VIOLATION({a})"),
            other => f.write_str(other.family()),
        }
    }
}

impl FromStr for RejectReason {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DISTORTED" => Ok(RejectReason::Distorted),
            "SOURCE_HAS_ATTRIBUTE" => Ok(RejectReason::SourceHasAttribute),
            "AGE_DRIFT_EXCEEDED" => Ok(RejectReason::AgeDriftExceeded),
            "AGE_CHANGE_INSUFFICIENT" => Ok(RejectReason::AgeChangeInsufficient),
            _ => s
                .strip_prefix("SPECIFICITY_VIOLATION(")
                .and_then(|rest| rest.strip_suffix(')'))
                .ok_or_else(|| DomainError::UnknownAttribute(s.to_string()))?
                .parse()
                .map(RejectReason::SpecificityViolation),
        }
    }
}

impl Serialize for RejectReason {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RejectReason {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub transformed_face_id: String,
    pub accepted: bool,
    pub reasons: Vec<RejectReason>,
}

impl FilterVerdict {
    pub fn from_reasons(transformed_face_id: impl Into<String>, reasons: Vec<RejectReason>) -> Self {
        FilterVerdict { transformed_face_id: transformed_face_id.into(), accepted: reasons.is_empty(), reasons }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurveyKind {
    Distortion,
    Attribute,
}

/// One ingested survey response, stored verbatim so aggregation can be
/// recomputed from the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyLabel {
    pub survey: SurveyKind,
    pub respondent_id: String,
    /// Transformed face the response is about.
    pub face_id: String,
    pub round: u32,
    pub attention_pass: bool,
    pub response: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    /// Report family, e.g. `efficacy` or `probe`.
    pub report: String,
    pub attribute: AttributeId,
    pub demographic: Demographic,
    pub concept: Option<String>,
    pub n: u64,
    pub validated: Option<u64>,
    pub efficacy: Option<f64>,
    pub mean_delta: Option<f64>,
    pub ci_half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityValidation {
    pub identity_id: String,
    pub validated: bool,
}
