//! Distortion detector: a linear SVM over image embeddings with per-cell
//! decision thresholds calibrated to a recall target.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{embed_checked, Backend};
use crate::domain::{Cell, DetectionReport, FaceRecord};
use crate::exec::run_ordered;
use crate::genplan::{self, EditStrength, GenerationConfig, HyperparamRegistry, SourceRef};
use crate::manifest::{Manifest, ManifestError, ManifestState, Record};

pub const DEFAULT_RECALL_TARGET: f64 = 0.97;

#[derive(Debug, Error)]
pub enum DistortionError {
    #[error("training data has a single class")]
    DegenerateData,
    #[error("vector has dimension {actual}, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("no calibration labels")]
    NoLabels,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Gen(#[from] genplan::GenError),
}

/// `(face id, error message)` for a face that could not be processed.
pub type JobError = (String, String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub reg_strength: f64,
    pub epochs: u32,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams { reg_strength: 1e-3, epochs: 200, seed: 0 }
    }
}

/// Trained linear scorer. Inputs are centered on `center` and scaled to
/// unit length before the dot product; higher scores mean more distorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub center: Vec<f64>,
    pub fingerprint: String,
}

fn normalized(x: &[f64], center: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|a| *a /= norm);
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearModel {
    pub fn score(&self, x: &[f64]) -> Result<f64, DistortionError> {
        if x.len() != self.dim {
            return Err(DistortionError::DimensionMismatch { expected: self.dim, actual: x.len() });
        }
        Ok(dot(&self.weights, &normalized(x, &self.center)) + self.bias)
    }
}

/// Content hash over the training examples, recorded in the model.
pub fn fingerprint(examples: &[(Vec<f64>, bool)]) -> String {
    let mut h = Sha256::new();
    h.update((examples.len() as u64).to_le_bytes());
    for (x, label) in examples {
        h.update([u8::from(*label)]);
        h.update((x.len() as u64).to_le_bytes());
        for v in x {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// L2-regularized hinge loss minimized by seeded stochastic subgradient
/// descent (Pegasos step size). The bias is learned as the weight on an
/// appended constant feature. Labels: `true` = distorted.
pub fn train_svm(examples: &[(Vec<f64>, bool)], params: &SvmParams) -> Result<LinearModel, DistortionError> {
    if params.reg_strength.is_nan() || params.reg_strength <= 0.0 || params.epochs == 0 {
        return Err(DistortionError::InvalidParameter("reg_strength must be > 0 and epochs ≥ 1".into()));
    }
    let positives = examples.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == examples.len() {
        return Err(DistortionError::DegenerateData);
    }
    let dim = examples[0].0.len();
    if let Some((x, _)) = examples.iter().find(|(x, _)| x.len() != dim) {
        return Err(DistortionError::DimensionMismatch { expected: dim, actual: x.len() });
    }
    let mut center = vec![0.0; dim];
    for (x, _) in examples {
        center.iter_mut().zip(x).for_each(|(c, v)| *c += v);
    }
    center.iter_mut().for_each(|c| *c /= examples.len() as f64);
    let features: Vec<(Vec<f64>, f64)> = examples
        .iter()
        .map(|(x, y)| {
            let mut f = normalized(x, &center);
            f.push(1.0);
            (f, if *y { 1.0 } else { -1.0 })
        })
        .collect();

    // w = scale * v, so the shrink step is O(1).
    let lambda = params.reg_strength;
    let mut v = vec![0.0; dim + 1];
    let mut scale = 1.0;
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut t = 0u64;
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let (x, y) = &features[i];
            let eta = 1.0 / (lambda * t as f64);
            let margin = y * scale * dot(&v, x);
            let shrink = 1.0 - eta * lambda;
            if shrink <= 0.0 {
                v.iter_mut().for_each(|a| *a = 0.0);
                scale = 1.0;
            } else {
                scale *= shrink;
            }
            if margin < 1.0 {
                let step = eta * y / scale;
                v.iter_mut().zip(x).for_each(|(a, b)| *a += step * b);
            }
            if scale < 1e-9 {
                v.iter_mut().for_each(|a| *a *= scale);
                scale = 1.0;
            }
        }
    }
    let w: Vec<f64> = v.iter().map(|a| a * scale).collect();
    Ok(LinearModel { dim, weights: w[..dim].to_vec(), bias: w[dim], center, fingerprint: fingerprint(examples) })
}

/// A calibration sample: the model score of a face and its human label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub cell: Cell,
    pub score: f64,
    pub distorted: bool,
}

/// Per-cell thresholds keyed `<attribute>/<code>`. A `None` fallback means
/// no distorted label was ever seen, so faces in uncalibrated cells are
/// never flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub recall_target: f64,
    pub fallback: Option<f64>,
    pub cells: BTreeMap<String, f64>,
}

impl ThresholdTable {
    pub fn threshold(&self, cell: Cell) -> Option<f64> {
        self.cells.get(&cell.key()).copied().or(self.fallback)
    }

    /// Scores at or above the threshold are distorted.
    pub fn is_distorted(&self, cell: Cell, score: f64) -> bool {
        self.threshold(cell).is_some_and(|t| score >= t)
    }
}

/// Largest threshold keeping recall of `distorted` at `target`: the k-th
/// highest distorted score for the smallest k with k/n ≥ target.
pub fn recall_threshold(distorted_scores: &[f64], target: f64) -> Option<f64> {
    let n = distorted_scores.len();
    if n == 0 {
        return None;
    }
    let mut sorted = distorted_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = (1..=n).find(|k| *k as f64 / n as f64 >= target).unwrap_or(n);
    Some(sorted[k - 1])
}

pub fn calibrate_thresholds(labeled: &[LabeledScore], recall_target: f64) -> Result<ThresholdTable, DistortionError> {
    if labeled.is_empty() {
        return Err(DistortionError::NoLabels);
    }
    if !(recall_target > 0.0 && recall_target <= 1.0) {
        return Err(DistortionError::InvalidParameter(format!("recall target {recall_target} not in (0, 1]")));
    }
    let mut per_cell: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut pooled = Vec::new();
    for l in labeled.iter().filter(|l| l.distorted) {
        per_cell.entry(l.cell.key()).or_default().push(l.score);
        pooled.push(l.score);
    }
    let fallback = recall_threshold(&pooled, recall_target);
    if fallback.is_none() {
        log::warn!("no distorted calibration labels; nothing will be flagged");
    }
    let cells = per_cell
        .into_iter()
        .filter_map(|(k, scores)| recall_threshold(&scores, recall_target).map(|t| (k, t)))
        .collect();
    Ok(ThresholdTable { recall_target, fallback, cells })
}

/// Score and decision for one transformed face.
pub fn classify(
    model: &LinearModel,
    table: &ThresholdTable,
    cell: Cell,
    embedding: &[f64],
) -> Result<(f64, bool), DistortionError> {
    let score = model.score(embedding)?;
    Ok((score, table.is_distorted(cell, score)))
}

/// How the distortion training set is generated: clean source variations of
/// non-celebrity identities, plus edits of the first few variations pushed
/// past natural strength with the registry's distortion parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingRecipe {
    pub names_per_demographic: usize,
    pub clean_variations: u32,
    pub distorted_variations: u32,
    pub seed_base: u64,
}

impl Default for TrainingRecipe {
    fn default() -> Self {
        TrainingRecipe { names_per_demographic: 10, clean_variations: 3, distorted_variations: 3, seed_base: 7 }
    }
}

impl TrainingRecipe {
    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            identities_per_demographic: self.names_per_demographic,
            variations_per_identity: self.clean_variations.max(self.distorted_variations),
            celebrity: false,
            id_prefix: "dt-".into(),
            seed_base: self.seed_base,
            ..GenerationConfig::default()
        }
    }

    pub fn source_jobs(&self) -> Result<Vec<genplan::SourceJob>, DistortionError> {
        Ok(genplan::plan_sources(&self.generation_config())?)
    }

    /// Distortion-strength edits for the sources already in `state`.
    pub fn edit_jobs(
        &self,
        state: &ManifestState,
        registry: &HyperparamRegistry,
    ) -> Result<Vec<genplan::EditJob>, DistortionError> {
        let sources: Vec<SourceRef> = SourceRef::from_state(state)
            .into_iter()
            .filter(|s| s.variation_index < self.distorted_variations)
            .collect();
        Ok(genplan::plan_edits(
            &sources,
            &state.edit_index,
            &self.generation_config(),
            registry,
            EditStrength::Distortion,
        )?)
    }

    /// Faces of a training manifest with their labels.
    pub fn labeled_faces<'a>(&self, state: &'a ManifestState) -> Vec<(&'a FaceRecord, bool)> {
        let clean = state.sources().filter(|f| f.variation_index < self.clean_variations).map(|f| (f, false));
        clean.chain(state.transformed().map(|f| (f, true))).collect()
    }
}

/// Embeddings for `faces`, fetched with up to `jobs` requests in flight.
/// Faces whose embedding failed are returned separately.
pub fn embed_faces<'a>(
    faces: &[&'a FaceRecord],
    backend: &dyn Backend,
    dim: usize,
    jobs: usize,
) -> (Vec<(&'a FaceRecord, Vec<f64>)>, Vec<JobError>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    let _ = run_ordered(
        faces,
        jobs,
        |f| embed_checked(backend, &f.image_ref, dim),
        |f, r| {
            match r {
                Ok(v) => ok.push((*f, v)),
                Err(e) => failed.push((f.face_id.clone(), e.to_string())),
            }
            Ok::<_, ()>(())
        },
    );
    (ok, failed)
}

/// Outcome of scoring every transformed face of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub classified: usize,
    pub distorted: usize,
    pub skipped: usize,
    pub failures: Vec<JobError>,
}

/// Scores for all transformed faces that have no distortion report yet.
pub fn score_unclassified(
    state: &ManifestState,
    model: &LinearModel,
    backend: &dyn Backend,
    jobs: usize,
) -> (BTreeMap<String, (Cell, f64)>, Vec<JobError>) {
    let pending: Vec<&FaceRecord> =
        state.transformed().filter(|f| state.distortion_report(&f.face_id).is_none()).collect();
    let (embedded, mut failures) = embed_faces(&pending, backend, model.dim, jobs);
    let mut scores = BTreeMap::new();
    for (face, e) in embedded {
        let Some(demo) = state.demographic_of(face) else { continue };
        let cell = Cell::new(face.applied_attribute.expect("transformed"), demo);
        match model.score(&e) {
            Ok(s) => {
                scores.insert(face.face_id.clone(), (cell, s));
            }
            Err(e) => failures.push((face.face_id.clone(), e.to_string())),
        }
    }
    (scores, failures)
}

/// Append one distortion report per scored face.
pub fn record_classifications(
    manifest: &mut Manifest,
    scores: &BTreeMap<String, (Cell, f64)>,
    model: &LinearModel,
    table: &ThresholdTable,
    embedder_version: &str,
) -> Result<ClassifyReport, DistortionError> {
    let mut report = ClassifyReport::default();
    let versions: BTreeMap<String, String> = [
        ("distortion_model".to_string(), model.fingerprint[..16.min(model.fingerprint.len())].to_string()),
        ("embedder".to_string(), embedder_version.to_string()),
    ]
    .into();
    for (face_id, (cell, score)) in scores {
        if manifest.state().distortion_report(face_id).is_some() {
            report.skipped += 1;
            continue;
        }
        let distorted = table.is_distorted(*cell, *score);
        manifest.append(Record::Detection(DetectionReport {
            face_id: face_id.clone(),
            pair_id: None,
            attributes: None,
            distortion_score: Some(*score),
            distorted: Some(distorted),
            detector_versions: versions.clone(),
            failure: None,
        }))?;
        report.classified += 1;
        report.distorted += usize::from(distorted);
    }
    Ok(report)
}
