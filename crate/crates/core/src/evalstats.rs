//! Counterfactual sensitivity probe: concept-score deltas per cell, Student-t
//! confidence intervals and the report table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::backends::Backend;
use crate::domain::{AttributeId, Cell, CellReport, Demographic, FaceRecord};
use crate::exec::run_ordered;
use crate::manifest::{Manifest, ManifestError, ManifestState, Record};

pub const DEFAULT_CONFIDENCE: f64 = 0.999;
const MISSING: &str = "—";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cell {0} is excluded")]
    CellExcluded(String),
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("invalid probe spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub attribute: AttributeId,
    pub concept: String,
}

/// Contents of `probe.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub pairs: Vec<ProbeRow>,
    #[serde(default = "default_confidence")]
    pub confidence_level: f64,
    /// Cell keys (`<attribute>/<code>`) to leave out.
    #[serde(default)]
    pub excluded_cells: Vec<String>,
}

fn default_confidence() -> f64 {
    DEFAULT_CONFIDENCE
}

impl ProbeSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(EvalError::InvalidSpec(format!("confidence level {} not in (0, 1)", self.confidence_level)));
        }
        for key in &self.excluded_cells {
            Cell::parse_key(key).map_err(|e| EvalError::InvalidSpec(e.to_string()))?;
        }
        Ok(())
    }

    pub fn is_excluded(&self, cell: Cell) -> bool {
        self.excluded_cells.contains(&cell.key())
    }
}

/// Per-pair concept deltas for one cell, plus pairs dropped on backend errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub values: Vec<f64>,
    pub dropped: Vec<(String, String)>,
}

/// score(transformed) − score(source) for every (source, transformed) pair.
pub fn concept_deltas(
    cell: Cell,
    pairs: &[(&FaceRecord, &FaceRecord)],
    concept: &str,
    backend: &dyn Backend,
    spec: &ProbeSpec,
    jobs: usize,
) -> Result<Deltas, EvalError> {
    if spec.is_excluded(cell) {
        return Err(EvalError::CellExcluded(cell.key()));
    }
    let concepts = [concept.to_string()];
    let score = |f: &FaceRecord| -> Result<f64, String> {
        let m = backend.concept_scores(&f.image_ref, &concepts).map_err(|e| e.to_string())?;
        m.get(concept).copied().ok_or_else(|| format!("no score for `{concept}`"))
    };
    let mut out = Deltas::default();
    let _ = run_ordered(
        pairs,
        jobs,
        |(s, t)| Ok::<_, String>(score(t)? - score(s)?),
        |(_, t), r| {
            match r {
                Ok(d) => out.values.push(d),
                Err(e) => out.dropped.push((t.face_id.clone(), e)),
            }
            Ok::<_, ()>(())
        },
    );
    Ok(out)
}

/// Two-sided Student-t quantile: t with P(|T| ≤ t) = level.
pub fn t_critical(level: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    dist.inverse_cdf(0.5 + level / 2.0)
}

/// Sample mean and Student-t half-width at `level`.
pub fn mean_ci(deltas: &[f64], level: f64) -> Result<(f64, f64), EvalError> {
    let n = deltas.len();
    if n < 2 {
        return Err(EvalError::InsufficientSamples(n));
    }
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok((mean, 0.0));
    }
    let half = t_critical(level, (n - 1) as f64) * var.sqrt() / (n as f64).sqrt();
    Ok((mean, half))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub attribute: AttributeId,
    pub demographic: Demographic,
    pub concept: String,
    pub n: usize,
    pub mean_delta: Option<f64>,
    pub ci_half_width: Option<f64>,
    pub excluded: bool,
}

impl CellStat {
    pub fn from_deltas(
        attribute: AttributeId,
        demographic: Demographic,
        concept: &str,
        deltas: &[f64],
        level: f64,
    ) -> Self {
        let ci = mean_ci(deltas, level).ok();
        CellStat {
            attribute,
            demographic,
            concept: concept.to_string(),
            n: deltas.len(),
            mean_delta: ci.map(|c| c.0),
            ci_half_width: ci.map(|c| c.1),
            excluded: false,
        }
    }

    pub fn excluded(attribute: AttributeId, demographic: Demographic, concept: &str) -> Self {
        CellStat {
            attribute,
            demographic,
            concept: concept.to_string(),
            n: 0,
            mean_delta: None,
            ci_half_width: None,
            excluded: true,
        }
    }
}

/// Two significant figures, trailing zeros dropped.
pub fn sig2(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".into() } else { x.to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if exp >= 1 {
        let unit = 10f64.powi(exp - 1);
        format!("{:.0}", (x / unit).round() * unit)
    } else {
        let mut s = format!("{:.*}", (1 - exp) as usize, x);
        if s.contains('.') {
            s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        }
        s
    };
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        "0".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

fn render_cell(stat: Option<&CellStat>, format: ReportFormat) -> String {
    let Some(CellStat { mean_delta: Some(m), ci_half_width: Some(h), excluded: false, .. }) = stat else {
        return MISSING.to_string();
    };
    let text = format!("{} ± {}", sig2(*m), sig2(*h));
    match format {
        ReportFormat::Markdown => text.replace('-', "−"),
        ReportFormat::Csv => text,
    }
}

/// Table with one row per (attribute, concept) in first-seen order and one
/// column per demographic in report order.
pub fn build_report(stats: &[CellStat], format: ReportFormat) -> String {
    let mut rows: Vec<(AttributeId, &str)> = Vec::new();
    let mut cells: BTreeMap<(AttributeId, &str, Demographic), &CellStat> = BTreeMap::new();
    for s in stats {
        if !rows.contains(&(s.attribute, s.concept.as_str())) {
            rows.push((s.attribute, &s.concept));
        }
        cells.insert((s.attribute, &s.concept, s.demographic), s);
    }
    let codes: Vec<&str> = Demographic::ALL.iter().map(|d| d.code()).collect();
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| Attribute | Concept | {} |", codes.join(" | "));
            let _ = writeln!(out, "|---|---|{}", "---|".repeat(codes.len()));
        }
        ReportFormat::Csv => {
            let _ = writeln!(out, "attribute,concept,{}", codes.join(","));
        }
    }
    for (a, concept) in rows {
        let rendered: Vec<String> =
            Demographic::ALL.iter().map(|d| render_cell(cells.get(&(a, concept, *d)).copied(), format)).collect();
        match format {
            ReportFormat::Markdown => {
                let _ = writeln!(out, "| {a} | {concept} | {} |", rendered.join(" | "));
            }
            ReportFormat::Csv => {
                let _ = writeln!(out, "{a},{concept},{}", rendered.join(","));
            }
        }
    }
    out
}

/// Accepted (source, transformed) pairs in `cell`.
pub fn accepted_pairs(state: &ManifestState, cell: Cell) -> Vec<(&FaceRecord, &FaceRecord)> {
    state
        .transformed()
        .filter(|f| f.applied_attribute == Some(cell.attribute))
        .filter(|f| state.demographic_of(f) == Some(cell.demographic))
        .filter(|f| state.verdicts.get(&f.face_id).is_some_and(|v| v.accepted))
        .filter_map(|f| Some((state.faces.get(f.parent_face_id.as_ref()?)?, f)))
        .collect()
}

/// Statistics for every probe row and demographic. Cells already reported
/// in the manifest are reused.
pub fn run_probe(
    manifest: &mut Manifest,
    spec: &ProbeSpec,
    backend: &dyn Backend,
    jobs: usize,
) -> Result<(Vec<CellStat>, usize), EvalError> {
    spec.validate()?;
    let mut stats = Vec::new();
    let mut dropped = 0;
    for row in &spec.pairs {
        for d in Demographic::ALL {
            let cell = Cell::new(row.attribute, d);
            if spec.is_excluded(cell) {
                stats.push(CellStat::excluded(row.attribute, d, &row.concept));
                continue;
            }
            let key = ("probe".to_string(), row.attribute, d.code().to_string(), Some(row.concept.clone()));
            if let Some(r) = manifest.state().cell_reports.get(&key) {
                stats.push(CellStat {
                    attribute: row.attribute,
                    demographic: d,
                    concept: row.concept.clone(),
                    n: r.n as usize,
                    mean_delta: r.mean_delta,
                    ci_half_width: r.ci_half_width,
                    excluded: false,
                });
                continue;
            }
            let deltas = {
                let pairs = accepted_pairs(manifest.state(), cell);
                concept_deltas(cell, &pairs, &row.concept, backend, spec, jobs)?
            };
            dropped += deltas.dropped.len();
            let stat = CellStat::from_deltas(row.attribute, d, &row.concept, &deltas.values, spec.confidence_level);
            if deltas.dropped.is_empty() {
                manifest.append(Record::CellReport(CellReport {
                    report: "probe".into(),
                    attribute: row.attribute,
                    demographic: d,
                    concept: Some(row.concept.clone()),
                    n: stat.n as u64,
                    validated: None,
                    efficacy: None,
                    mean_delta: stat.mean_delta,
                    ci_half_width: stat.ci_half_width,
                }))?;
            }
            stats.push(stat);
        }
    }
    Ok((stats, dropped))
}
