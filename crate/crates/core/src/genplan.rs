//! Candidate generation: planning and executing source-face and edit jobs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{Backend, BackendError, EditRequest};
use crate::domain::{AttributeId, Demographic, FaceKind, FaceRecord, GenParams, Identity, ImageRef};
use crate::exec::run_ordered;
use crate::manifest::{Manifest, ManifestError, ManifestState, Record};
use crate::store::{ImageStore, StoreError};

pub const PROMPT_TEMPLATE: &str = "A photo of the face of <Name>";

#[derive(Debug, Error)]
pub enum GenError {
    #[error("demographic {demographic} has {available} names, {needed} needed")]
    InsufficientNames { demographic: Demographic, needed: usize, available: usize },
    #[error("no hyperparameters registered for `{0}`")]
    MissingHyperparams(AttributeId),
    #[error("invalid hyperparameter registry: {0}")]
    InvalidRegistry(String),
    #[error("reading names: {0}")]
    Names(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub identities_per_demographic: usize,
    pub variations_per_identity: u32,
    pub attributes: Vec<AttributeId>,
    /// Display names per demographic; missing demographics get synthetic names.
    pub name_list: BTreeMap<Demographic, Vec<String>>,
    pub seed_base: u64,
    pub celebrity: bool,
    /// Prefix for identity ids, keeps separate datasets disjoint.
    pub id_prefix: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            identities_per_demographic: 100,
            variations_per_identity: 6,
            attributes: AttributeId::ALL.to_vec(),
            name_list: BTreeMap::new(),
            seed_base: 0,
            celebrity: true,
            id_prefix: String::new(),
        }
    }
}

impl GenerationConfig {
    /// Load `names/<code>.txt` files (one name per line) from `dir`.
    pub fn load_names(&mut self, dir: &Path) -> Result<(), GenError> {
        for d in Demographic::ALL {
            let path = dir.join(format!("{}.txt", d.code()));
            if !path.exists() {
                continue;
            }
            let text =
                std::fs::read_to_string(&path).map_err(|e| GenError::Names(format!("{}: {e}", path.display())))?;
            let names: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect();
            self.name_list.insert(d, names);
        }
        Ok(())
    }

    fn names_for(&self, d: Demographic) -> Vec<String> {
        match self.name_list.get(&d) {
            Some(names) => names.clone(),
            None => (0..self.identities_per_demographic)
                .map(|i| synthetic_name(d, i, self.seed_base, self.celebrity))
                .collect(),
        }
    }
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ren", "sa", "tu", "vel", "an", "dor", "ei", "fa", "gi", "ho", "ja", "ku", "lin", "mo", "na",
    "or", "pe", "ri", "so", "ta", "yu",
];

/// Placeholder person name, deterministic in its arguments.
pub fn synthetic_name(d: Demographic, index: usize, seed: u64, celebrity: bool) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[d.code(), &index.to_string(), &celebrity.to_string()]));
    let mut word = |n: usize| {
        let mut w: String = (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
        w[..1].make_ascii_uppercase();
        w
    };
    let (first, last) = (word(2), word(3));
    format!("{first} {last}")
}

/// 64-bit seed from a base seed and key parts.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn render_prompt(name: &str) -> String {
    PROMPT_TEMPLATE.replace("<Name>", name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceJob {
    pub identity: Identity,
    pub variation_index: u32,
    pub prompt: String,
    pub seed: u64,
}

impl SourceJob {
    pub fn face_id(&self) -> String {
        FaceRecord::source_id(&self.identity.identity_id, self.variation_index)
    }
}

pub fn identity_id(prefix: &str, d: Demographic, index: usize) -> String {
    format!("{prefix}{}-{index:03}", d.code())
}

/// One job per (identity, variation) over every demographic.
pub fn plan_sources(config: &GenerationConfig) -> Result<Vec<SourceJob>, GenError> {
    let mut jobs = Vec::new();
    let mut seen_seeds = BTreeSet::new();
    for d in Demographic::ALL {
        let names = config.names_for(d);
        if names.len() < config.identities_per_demographic {
            return Err(GenError::InsufficientNames {
                demographic: d,
                needed: config.identities_per_demographic,
                available: names.len(),
            });
        }
        for (i, name) in names.iter().take(config.identities_per_demographic).enumerate() {
            let identity = Identity {
                identity_id: identity_id(&config.id_prefix, d, i),
                display_name: name.clone(),
                demographic: d,
                celebrity: config.celebrity,
            };
            for v in 0..config.variations_per_identity {
                let mut seed = derive_seed(config.seed_base, &[&identity.identity_id, &v.to_string()]);
                while !seen_seeds.insert(seed) {
                    seed = derive_seed(seed, &["collision"]);
                }
                jobs.push(SourceJob {
                    identity: identity.clone(),
                    variation_index: v,
                    prompt: render_prompt(name),
                    seed,
                });
            }
        }
    }
    Ok(jobs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub normal: BTreeMap<String, f64>,
    #[serde(default)]
    pub distortion: BTreeMap<String, f64>,
}

/// Per-attribute editor parameters (`hyperparams.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HyperparamRegistry {
    pub per_attribute: BTreeMap<AttributeId, RegistryEntry>,
}

impl Default for HyperparamRegistry {
    /// Placeholder registry for hermetic runs; real runs supply tuned values.
    fn default() -> Self {
        let entry = RegistryEntry {
            normal: [("edit_guidance_scale".to_string(), 5.0), ("edit_momentum_scale".to_string(), 0.3)].into(),
            distortion: [("edit_guidance_scale".to_string(), 15.0), ("edit_momentum_scale".to_string(), 0.6)].into(),
        };
        HyperparamRegistry { per_attribute: AttributeId::ALL.iter().map(|a| (*a, entry.clone())).collect() }
    }
}

impl HyperparamRegistry {
    pub fn load(path: &Path) -> Result<Self, GenError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| GenError::InvalidRegistry(format!("{}: {e}", path.display())))?;
        let reg: HyperparamRegistry =
            serde_json::from_str(&text).map_err(|e| GenError::InvalidRegistry(e.to_string()))?;
        reg.validate()?;
        Ok(reg)
    }

    /// Distortion entries, where present, must exceed the normal magnitude
    /// for every key they share.
    pub fn validate(&self) -> Result<(), GenError> {
        for (a, e) in &self.per_attribute {
            for (k, v) in &e.distortion {
                if let Some(n) = e.normal.get(k) {
                    if v.abs() <= n.abs() {
                        return Err(GenError::InvalidRegistry(format!(
                            "`{a}`: distortion `{k}`={v} is not larger than normal {n}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn normal(&self, a: AttributeId) -> Result<&BTreeMap<String, f64>, GenError> {
        self.per_attribute.get(&a).map(|e| &e.normal).ok_or(GenError::MissingHyperparams(a))
    }

    pub fn distortion(&self, a: AttributeId) -> Result<&BTreeMap<String, f64>, GenError> {
        match self.per_attribute.get(&a) {
            Some(e) if !e.distortion.is_empty() => Ok(&e.distortion),
            _ => Err(GenError::MissingHyperparams(a)),
        }
    }
}

/// A source face an edit can start from. `image_ref` is absent for
/// projected (not yet generated) sources.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceRef {
    pub face_id: String,
    pub identity_id: String,
    pub variation_index: u32,
    pub image_ref: Option<ImageRef>,
}

impl SourceRef {
    pub fn from_state(state: &ManifestState) -> Vec<SourceRef> {
        state
            .sources()
            .map(|f| SourceRef {
                face_id: f.face_id.clone(),
                identity_id: f.identity_id.clone(),
                variation_index: f.variation_index,
                image_ref: Some(f.image_ref.clone()),
            })
            .collect()
    }

    pub fn projected(jobs: &[SourceJob]) -> Vec<SourceRef> {
        jobs.iter()
            .map(|j| SourceRef {
                face_id: j.face_id(),
                identity_id: j.identity.identity_id.clone(),
                variation_index: j.variation_index,
                image_ref: None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditJob {
    pub parent_face_id: String,
    pub identity_id: String,
    pub variation_index: u32,
    pub parent_image_ref: Option<ImageRef>,
    pub attribute: AttributeId,
    pub hyperparams: BTreeMap<String, f64>,
    pub seed: u64,
}

impl EditJob {
    pub fn face_id(&self) -> String {
        FaceRecord::transformed_id(&self.parent_face_id, self.attribute)
    }
}

/// Which registry column an edit plan uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditStrength {
    Normal,
    Distortion,
}

/// One job per (source, attribute) not already in `completed`.
pub fn plan_edits(
    sources: &[SourceRef],
    completed: &BTreeMap<(String, AttributeId), String>,
    config: &GenerationConfig,
    registry: &HyperparamRegistry,
    strength: EditStrength,
) -> Result<Vec<EditJob>, GenError> {
    let mut params = BTreeMap::new();
    for a in &config.attributes {
        let p = match strength {
            EditStrength::Normal => registry.normal(*a)?,
            EditStrength::Distortion => registry.distortion(*a)?,
        };
        params.insert(*a, p.clone());
    }
    let mut jobs = Vec::with_capacity(sources.len() * config.attributes.len());
    for s in sources {
        for a in &config.attributes {
            if completed.contains_key(&(s.face_id.clone(), *a)) {
                continue;
            }
            jobs.push(EditJob {
                parent_face_id: s.face_id.clone(),
                identity_id: s.identity_id.clone(),
                variation_index: s.variation_index,
                parent_image_ref: s.image_ref.clone(),
                attribute: *a,
                hyperparams: params[a].clone(),
                seed: derive_seed(config.seed_base, &[&s.face_id, a.as_str()]),
            });
        }
    }
    Ok(jobs)
}

/// Plan edits for every source already in the manifest.
pub fn plan_edits_from_manifest(
    state: &ManifestState,
    config: &GenerationConfig,
    registry: &HyperparamRegistry,
) -> Result<Vec<EditJob>, GenError> {
    plan_edits(&SourceRef::from_state(state), &state.edit_index, config, registry, EditStrength::Normal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub job: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub completed: usize,
    pub skipped: usize,
    pub failures: Vec<JobFailure>,
}

impl RunReport {
    pub fn is_clean(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Generate an image through `op`, archive its bytes, and check the digest.
fn produce(
    backend: &dyn Backend,
    store: &ImageStore,
    op: impl FnOnce() -> Result<ImageRef, BackendError>,
) -> Result<ImageRef, String> {
    let image = op().map_err(|e| e.to_string())?;
    if !store.contains(&image) {
        let bytes = backend.fetch_image(&image).map_err(|e| e.to_string())?;
        let stored = store.put(&bytes).map_err(|e| e.to_string())?;
        if stored != image {
            return Err(format!("backend returned {image} but bytes hash to {stored}"));
        }
    }
    Ok(image)
}

/// Execute source jobs with up to `jobs` in flight. Already-present faces
/// are skipped; single-job failures are reported, not fatal.
pub fn run_source_jobs(
    plan: &[SourceJob],
    backend: &dyn Backend,
    manifest: &mut Manifest,
    store: &ImageStore,
    jobs: usize,
) -> Result<RunReport, GenError> {
    let mut report = RunReport::default();
    let todo: Vec<&SourceJob> = plan
        .iter()
        .filter(|j| {
            let done = manifest.state().faces.contains_key(&j.face_id());
            if done {
                report.skipped += 1;
            }
            !done
        })
        .collect();
    run_ordered(
        &todo,
        jobs,
        |job| produce(backend, store, || backend.txt2img(&job.prompt, job.seed)),
        |job, result| {
            match result {
                Ok(image_ref) => {
                    if !manifest.state().identities.contains_key(&job.identity.identity_id) {
                        manifest.append(Record::Identity(job.identity.clone()))?;
                    }
                    manifest.append(Record::Face(FaceRecord {
                        face_id: job.face_id(),
                        identity_id: job.identity.identity_id.clone(),
                        variation_index: job.variation_index,
                        kind: FaceKind::Source,
                        applied_attribute: None,
                        image_ref,
                        gen_params: GenParams {
                            seed: job.seed,
                            prompt: job.prompt.clone(),
                            hyperparams: BTreeMap::new(),
                        },
                        parent_face_id: None,
                    }))?;
                    report.completed += 1;
                }
                Err(error) => report.failures.push(JobFailure { job: job.face_id(), error }),
            }
            Ok::<_, GenError>(())
        },
    )?;
    Ok(report)
}

/// Execute edit jobs; see [`run_source_jobs`].
pub fn run_edit_jobs(
    plan: &[EditJob],
    backend: &dyn Backend,
    manifest: &mut Manifest,
    store: &ImageStore,
    jobs: usize,
) -> Result<RunReport, GenError> {
    let mut report = RunReport::default();
    let mut todo = Vec::new();
    for job in plan {
        let state = manifest.state();
        if state.edit_index.contains_key(&(job.parent_face_id.clone(), job.attribute)) {
            report.skipped += 1;
            continue;
        }
        let Some(parent) = state.faces.get(&job.parent_face_id) else {
            report.failures.push(JobFailure { job: job.face_id(), error: "parent not in manifest".into() });
            continue;
        };
        todo.push((job, parent.image_ref.clone(), parent.gen_params.prompt.clone()));
    }
    run_ordered(
        &todo,
        jobs,
        |(job, parent_ref, _)| {
            let req = EditRequest {
                parent_image_ref: parent_ref.clone(),
                attribute: job.attribute,
                hyperparams: job.hyperparams.clone(),
                seed: job.seed,
            };
            produce(backend, store, || backend.edit(&req))
        },
        |(job, _, prompt), result| {
            match result {
                Ok(image_ref) => {
                    manifest.append(Record::Face(FaceRecord {
                        face_id: job.face_id(),
                        identity_id: job.identity_id.clone(),
                        variation_index: job.variation_index,
                        kind: FaceKind::Transformed,
                        applied_attribute: Some(job.attribute),
                        image_ref,
                        gen_params: GenParams {
                            seed: job.seed,
                            prompt: prompt.clone(),
                            hyperparams: job.hyperparams.clone(),
                        },
                        parent_face_id: Some(job.parent_face_id.clone()),
                    }))?;
                    report.completed += 1;
                }
                Err(error) => report.failures.push(JobFailure { job: job.face_id(), error }),
            }
            Ok::<_, GenError>(())
        },
    )?;
    Ok(report)
}

/// One tuning candidate: an edit of a demographic's probe face at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneCandidate {
    pub demographic: Demographic,
    pub source_face_id: String,
    pub attribute: AttributeId,
    pub grid_index: usize,
    pub hyperparams: BTreeMap<String, f64>,
    pub image_ref: Option<ImageRef>,
    pub error: Option<String>,
}

/// Cartesian product of a parameter grid, in key order.
pub fn expand_grid(grid: &BTreeMap<String, Vec<f64>>) -> Vec<BTreeMap<String, f64>> {
    grid.iter().fold(vec![BTreeMap::new()], |acc, (k, values)| {
        acc.iter()
            .flat_map(|base| {
                values.iter().map(move |v| {
                    let mut m = base.clone();
                    m.insert(k.clone(), *v);
                    m
                })
            })
            .collect()
    })
}

/// Edit one randomly chosen source face per demographic at every grid point
/// for every configured attribute. Selection of the winning point is left to
/// a person looking at the images.
pub fn tune(
    state: &ManifestState,
    config: &GenerationConfig,
    grid: &BTreeMap<String, Vec<f64>>,
    backend: &dyn Backend,
    store: &ImageStore,
    seed: u64,
    jobs: usize,
) -> Vec<TuneCandidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = expand_grid(grid);
    let mut work = Vec::new();
    for d in Demographic::ALL {
        let pool: Vec<&FaceRecord> = state
            .sources()
            .filter(|f| state.identities.get(&f.identity_id).is_some_and(|i| i.demographic == d))
            .collect();
        if pool.is_empty() {
            continue;
        }
        let probe = pool[rng.random_range(0..pool.len())];
        for a in &config.attributes {
            for (gi, p) in points.iter().enumerate() {
                work.push(TuneCandidate {
                    demographic: d,
                    source_face_id: probe.face_id.clone(),
                    attribute: *a,
                    grid_index: gi,
                    hyperparams: p.clone(),
                    image_ref: None,
                    error: None,
                });
            }
        }
    }
    let mut out = Vec::with_capacity(work.len());
    let _ = run_ordered(
        &work,
        jobs,
        |c| {
            let parent = &state.faces[&c.source_face_id];
            let req = EditRequest {
                parent_image_ref: parent.image_ref.clone(),
                attribute: c.attribute,
                hyperparams: c.hyperparams.clone(),
                seed: derive_seed(seed, &[&c.source_face_id, c.attribute.as_str()]),
            };
            produce(backend, store, || backend.edit(&req))
        },
        |c, r| {
            let mut c = c.clone();
            match r {
                Ok(img) => c.image_ref = Some(img),
                Err(e) => c.error = Some(e),
            }
            out.push(c);
            Ok::<_, ()>(())
        },
    );
    out
}
