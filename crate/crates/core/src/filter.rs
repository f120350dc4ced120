//! Candidate filtering: distortion, source-already-has-attribute, the
//! transition matrix, and the age rules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AttributeId, AttributeVector, Cell, FilterVerdict, RejectReason};
use crate::manifest::{Manifest, ManifestError, Record};
use crate::specmatrix::{check_specificity, default_matrix, TransitionMatrix};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Non-age edits must change the estimated age by strictly less than this.
    pub age_drift_max: u32,
    /// Age edits must change the estimated age by at least this.
    pub age_change_min: u32,
    pub age_floor: u32,
    pub age_ceiling: u32,
    /// Skip identities nobody has marked as consistent across variations.
    pub require_identity_validation: bool,
    #[serde(skip)]
    pub matrix: TransitionMatrix,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            age_drift_max: 10,
            age_change_min: 10,
            age_floor: 18,
            age_ceiling: 80,
            require_identity_validation: true,
            matrix: default_matrix(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.age_drift_max == 0 || self.age_change_min == 0 {
            return Err(FilterError::InvalidConfig("age bounds must be positive".into()));
        }
        if self.age_floor >= self.age_ceiling {
            return Err(FilterError::InvalidConfig("age_floor must be below age_ceiling".into()));
        }
        Ok(())
    }
}

fn flag_changes<'a>(
    source: &'a AttributeVector,
    transformed: &'a AttributeVector,
) -> impl Iterator<Item = AttributeId> + 'a {
    AttributeId::NON_AGE.into_iter().filter(move |a| source.get(*a) != transformed.get(*a))
}

/// Rejection reasons for one candidate, in the fixed reporting order.
pub fn rejection_reasons(
    source: &AttributeVector,
    transformed: &AttributeVector,
    applied: AttributeId,
    distorted: bool,
    config: &FilterConfig,
) -> Vec<RejectReason> {
    let mut reasons = Vec::new();
    if distorted {
        reasons.push(RejectReason::Distorted);
    }
    let delta = i64::from(transformed.age_years) - i64::from(source.age_years);
    let change_min = i64::from(config.age_change_min);
    match applied {
        AttributeId::Old | AttributeId::Young => {
            let (already, enough) = if applied == AttributeId::Old {
                (i64::from(source.age_years) >= i64::from(config.age_ceiling) - change_min, delta >= change_min)
            } else {
                (i64::from(source.age_years) <= i64::from(config.age_floor) + change_min, delta <= -change_min)
            };
            if already {
                reasons.push(RejectReason::SourceHasAttribute);
            }
            if !enough {
                reasons.push(RejectReason::AgeChangeInsufficient);
            }
            reasons.extend(flag_changes(source, transformed).map(RejectReason::SpecificityViolation));
        }
        _ => {
            if source.get(applied) {
                reasons.push(RejectReason::SourceHasAttribute);
            }
            let violated = check_specificity(applied, source, transformed, &config.matrix)
                .expect("non-age attribute has a matrix row");
            reasons.extend(violated.into_iter().map(RejectReason::SpecificityViolation));
            if delta.unsigned_abs() >= u64::from(config.age_drift_max) {
                reasons.push(RejectReason::AgeDriftExceeded);
            }
        }
    }
    reasons
}

pub fn filter_candidate(
    transformed_face_id: &str,
    source: &AttributeVector,
    transformed: &AttributeVector,
    applied: AttributeId,
    distorted: bool,
    config: &FilterConfig,
) -> FilterVerdict {
    FilterVerdict::from_reasons(transformed_face_id, rejection_reasons(source, transformed, applied, distorted, config))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSummary {
    pub candidates: u64,
    pub distorted: u64,
    pub rejected: BTreeMap<String, u64>,
    pub accepted: u64,
    pub unprocessed: u64,
}

impl CellSummary {
    fn add(&mut self, other: &CellSummary) {
        self.candidates += other.candidates;
        self.distorted += other.distorted;
        self.accepted += other.accepted;
        self.unprocessed += other.unprocessed;
        for (k, v) in &other.rejected {
            *self.rejected.entry(k.clone()).or_default() += v;
        }
    }
}

/// Contents of `filter_summary.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    /// Keyed by `<attribute>/<code>`.
    pub cells: BTreeMap<String, CellSummary>,
    pub totals: CellSummary,
    /// Candidates left without a verdict: `face id -> reason`.
    pub unprocessed: BTreeMap<String, String>,
    /// Candidates skipped because their identity is not validated.
    pub excluded_unvalidated: u64,
}

impl FilterSummary {
    pub fn accepted_in(&self, cell: Cell) -> u64 {
        self.cells.get(&cell.key()).map_or(0, |c| c.accepted)
    }
}

/// Append a verdict for every transformed face that has the detections it
/// needs and no verdict yet, then summarize all verdicts.
pub fn filter_dataset(manifest: &mut Manifest, config: &FilterConfig) -> Result<FilterSummary, FilterError> {
    config.validate()?;
    let mut to_append = Vec::new();
    let mut unprocessed = BTreeMap::new();
    let mut excluded_unvalidated = 0;
    {
        let state = manifest.state();
        for face in state.transformed() {
            if config.require_identity_validation && !state.identity_validated(&face.identity_id) {
                excluded_unvalidated += 1;
                continue;
            }
            if state.verdicts.contains_key(&face.face_id) {
                continue;
            }
            let applied = face.applied_attribute.expect("transformed faces carry an attribute");
            let Some(distortion) = state.distortion_report(&face.face_id) else {
                unprocessed.insert(face.face_id.clone(), "missing distortion score".to_string());
                continue;
            };
            let distorted = distortion.distorted.unwrap_or(false);
            let verdict = match state.pair_detections(&face.face_id) {
                Some((s, t)) if s.failure.is_none() && t.failure.is_none() => match (&s.attributes, &t.attributes) {
                    (Some(sa), Some(ta)) => filter_candidate(&face.face_id, sa, ta, applied, distorted, config),
                    _ => {
                        unprocessed.insert(face.face_id.clone(), "incomplete detection".to_string());
                        continue;
                    }
                },
                _ if distorted => FilterVerdict::from_reasons(&face.face_id, vec![RejectReason::Distorted]),
                Some(_) => {
                    unprocessed.insert(face.face_id.clone(), "detection failed".to_string());
                    continue;
                }
                None => {
                    // A failure is recorded against the transformed face only.
                    let failed = state
                        .detections
                        .get(&(face.face_id.clone(), Some(face.face_id.clone())))
                        .is_some_and(|d| d.failure.is_some());
                    let why = if failed { "detection failed" } else { "missing detection" };
                    unprocessed.insert(face.face_id.clone(), why.to_string());
                    continue;
                }
            };
            to_append.push(verdict);
        }
    }
    for v in to_append {
        manifest.append(Record::Verdict(v))?;
    }
    Ok(summarize(manifest, unprocessed, excluded_unvalidated))
}

fn summarize(manifest: &Manifest, unprocessed: BTreeMap<String, String>, excluded_unvalidated: u64) -> FilterSummary {
    let state = manifest.state();
    let mut summary = FilterSummary { unprocessed, excluded_unvalidated, ..FilterSummary::default() };
    for face in state.transformed() {
        let Some(demo) = state.demographic_of(face) else { continue };
        let cell = Cell::new(face.applied_attribute.expect("transformed"), demo);
        let entry = summary.cells.entry(cell.key()).or_default();
        if let Some(v) = state.verdicts.get(&face.face_id) {
            entry.candidates += 1;
            if v.accepted {
                entry.accepted += 1;
            }
            if v.reasons.contains(&RejectReason::Distorted) {
                entry.distorted += 1;
            }
            let mut families: Vec<&str> = v.reasons.iter().map(|r| r.family()).collect();
            families.dedup();
            for f in families {
                *entry.rejected.entry(f.to_string()).or_default() += 1;
            }
        } else if summary.unprocessed.contains_key(&face.face_id) {
            entry.candidates += 1;
            entry.unprocessed += 1;
        }
    }
    summary.cells.retain(|_, c| c.candidates > 0);
    let mut totals = CellSummary::default();
    for c in summary.cells.values() {
        totals.add(c);
    }
    summary.totals = totals;
    summary
}
