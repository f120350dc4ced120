//! Command-line front end and the [`Engine`] that wires configuration,
//! manifest, image store and backend together for each pipeline stage.
//!
//! Run directory layout:
//!
//! ```text
//! <run>/manifest.jsonl          main dataset manifest
//! <run>/images/<sha256>.png     content-addressed image archive
//! <run>/distortion_train.jsonl  distortion-detector training manifest
//! <run>/distortion_model.json   trained linear model
//! <run>/thresholds.json         per-cell decision thresholds
//! <run>/filter_summary.json     per-cell filter counts
//! <run>/survey_sample.json      pairs chosen for the attribute survey
//! <run>/efficacy.json           survey efficacy report
//! <run>/probe_stats.json        concept-delta statistics
//! <run>/report.md, report.csv   rendered probe table
//! ```

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attrdetect::{self, detect_attributes, PromptProfile, ATTRIBUTES_PLACEHOLDER};
use crate::backends::{
    protocol, serve, Backend, BackendEndpoint, HttpBackend, MockConfig, MockWorld, Resilient, RetryPolicy,
};
use crate::distortion::{self, LabeledScore, LinearModel, SvmParams, ThresholdTable, TrainingRecipe};
use crate::domain::{AttributeId, FaceRecord, IdentityValidation};
use crate::evalstats::{self, CellStat, ProbeRow, ProbeSpec, ReportFormat};
use crate::filter::{self, FilterConfig, FilterSummary};
use crate::genplan::{self, GenerationConfig, HyperparamRegistry, RunReport, SourceRef};
use crate::manifest::{Durability, Manifest, ParseMode, Record};
use crate::specmatrix::load_matrix;
use crate::store::ImageStore;
use crate::surveys::{self, EfficacyReport, ExportSchema, SampledPair};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRAINING_MANIFEST_FILE: &str = "distortion_train.jsonl";
pub const MODEL_FILE: &str = "distortion_model.json";
pub const THRESHOLDS_FILE: &str = "thresholds.json";
pub const FILTER_SUMMARY_FILE: &str = "filter_summary.json";
pub const SAMPLE_FILE: &str = "survey_sample.json";
pub const EFFICACY_FILE: &str = "efficacy.json";
pub const PROBE_STATS_FILE: &str = "probe_stats.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{failed} job(s) failed: {detail}")]
    Partial { failed: usize, detail: String },
    #[error("{0}")]
    Fatal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Partial { .. } | CliError::Fatal(_) => 1,
        }
    }
}

macro_rules! fatal_from {
    ($($t:ty),+) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Fatal(e.to_string())
            }
        })+
    };
}

fatal_from!(
    crate::manifest::ManifestError,
    crate::store::StoreError,
    crate::attrdetect::DetectError,
    crate::distortion::DistortionError,
    crate::filter::FilterError,
    crate::genplan::GenError,
    crate::surveys::SurveyError,
    crate::evalstats::EvalError,
    std::io::Error
);

fn partial(failures: &[(String, String)]) -> Result<(), CliError> {
    match failures.first() {
        None => Ok(()),
        Some((id, e)) => Err(CliError::Partial { failed: failures.len(), detail: format!("first: {id}: {e}") }),
    }
}

/// Everything configurable, loaded from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Master seed; overrides the seeds of every component when set.
    pub seed: Option<u64>,
    pub backend: BackendEndpoint,
    pub generation: GenerationConfig,
    pub filter: FilterConfig,
    pub hyperparams_path: Option<PathBuf>,
    pub matrix_path: Option<PathBuf>,
    /// Directory of `<code>.txt` name lists.
    pub names_dir: Option<PathBuf>,
    /// Instruction template with the attribute placeholder.
    pub prompt_path: Option<PathBuf>,
    pub prompt: PromptProfile,
    pub recall_target: f64,
    pub confidence_level: f64,
    pub exclusion_threshold: f64,
    pub survey_sample_cap: usize,
    pub training: TrainingRecipe,
    pub svm: SvmParams,
    pub mock: MockConfig,
    #[serde(skip)]
    pub registry: HyperparamRegistry,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: None,
            backend: BackendEndpoint::default(),
            generation: GenerationConfig::default(),
            filter: FilterConfig::default(),
            hyperparams_path: None,
            matrix_path: None,
            names_dir: None,
            prompt_path: None,
            prompt: PromptProfile::default(),
            recall_target: distortion::DEFAULT_RECALL_TARGET,
            confidence_level: evalstats::DEFAULT_CONFIDENCE,
            exclusion_threshold: surveys::DEFAULT_EXCLUSION_THRESHOLD,
            survey_sample_cap: surveys::DEFAULT_SAMPLE_CAP,
            training: TrainingRecipe::default(),
            svm: SvmParams::default(),
            mock: MockConfig::default(),
            registry: HyperparamRegistry::default(),
        }
    }
}

fn resolve(base: &Path, p: &Option<PathBuf>) -> Option<PathBuf> {
    p.as_ref().map(|p| if p.is_absolute() { p.clone() } else { base.join(p) })
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl EngineConfig {
    /// Parse a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: EngineConfig = serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.hyperparams_path = resolve(base, &cfg.hyperparams_path);
        cfg.matrix_path = resolve(base, &cfg.matrix_path);
        cfg.names_dir = resolve(base, &cfg.names_dir);
        cfg.prompt_path = resolve(base, &cfg.prompt_path);
        Ok(cfg)
    }

    /// Load referenced files, apply the master seed and check bounds.
    pub fn prepare(&mut self) -> Result<(), CliError> {
        if let Some(p) = &self.hyperparams_path {
            self.registry = HyperparamRegistry::load(p).map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Some(p) = &self.matrix_path {
            self.filter.matrix =
                load_matrix(&read_text(p)?).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        }
        if let Some(dir) = &self.names_dir {
            if !dir.is_dir() {
                return Err(CliError::Config(format!("names directory {} does not exist", dir.display())));
            }
            self.generation.load_names(dir).map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Some(p) = &self.prompt_path {
            self.prompt.instruction_template = read_text(p)?;
        }
        if let Some(seed) = self.seed {
            self.generation.seed_base = seed;
            self.mock.seed = seed;
            self.svm.seed = seed;
            self.training.seed_base = genplan::derive_seed(seed, &["training"]);
        }
        self.mock.embedding_dim = self.backend.embedding_dim;
        self.registry.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.filter.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.prompt.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !self.prompt.instruction_template.contains(ATTRIBUTES_PLACEHOLDER) {
            return Err(CliError::Config(format!("prompt template lacks {ATTRIBUTES_PLACEHOLDER}")));
        }
        let unit = |name: &str, v: f64, hi_inclusive: bool| {
            let ok = v > 0.0 && if hi_inclusive { v <= 1.0 } else { v < 1.0 };
            if ok {
                Ok(())
            } else {
                Err(CliError::Config(format!("{name} = {v} out of range")))
            }
        };
        unit("recall_target", self.recall_target, true)?;
        unit("confidence_level", self.confidence_level, false)?;
        unit("exclusion_threshold", self.exclusion_threshold, true)?;
        if self.backend.max_in_flight == 0 {
            return Err(CliError::Config("backend.max_in_flight must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineOptions {
    pub mock: bool,
    pub jobs: usize,
    pub strict: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions { mock: false, jobs: 4, strict: false }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let tmp = path.with_extension("json.tmp");
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Fatal(e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCounts {
    pub source_jobs: usize,
    pub edit_jobs: usize,
    pub remaining_source_jobs: usize,
    pub remaining_edit_jobs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrateOutcome {
    pub model_fingerprint: String,
    pub thresholds: usize,
    pub classify: distortion::ClassifyReport,
}

/// An opened run: configuration, manifest, store and backend.
pub struct Engine {
    pub config: EngineConfig,
    pub run_dir: PathBuf,
    pub manifest: Manifest,
    pub store: ImageStore,
    pub backend: Arc<dyn Backend>,
    pub mock: Option<Arc<MockWorld>>,
    pub jobs: usize,
    parse_mode: ParseMode,
}

impl Engine {
    pub fn open(
        run_dir: impl Into<PathBuf>,
        mut config: EngineConfig,
        options: &EngineOptions,
    ) -> Result<Self, CliError> {
        config.prepare()?;
        let run_dir = run_dir.into();
        std::fs::create_dir_all(&run_dir)?;
        let store = ImageStore::open(run_dir.join("images"))?;
        let parse_mode = if options.strict { ParseMode::Strict } else { ParseMode::Lenient };
        let manifest = Manifest::open(run_dir.join(MANIFEST_FILE), parse_mode)?.with_durability(Durability::Flush);
        let jobs = options.jobs.max(1);
        let (backend, mock): (Arc<dyn Backend>, Option<Arc<MockWorld>>) = if options.mock {
            let world = Arc::new(MockWorld::new(MockConfig {
                image_dir: Some(store.root().to_path_buf()),
                ..config.mock.clone()
            }));
            (Arc::new(Resilient::new(Arc::clone(&world), RetryPolicy::no_backoff(1), jobs)), Some(world))
        } else {
            let http = HttpBackend::new(&config.backend);
            let bound = jobs.min(config.backend.max_in_flight);
            (Arc::new(Resilient::new(http, config.backend.retry.clone(), bound)), None)
        };
        Ok(Engine { config, run_dir, manifest, store, backend, mock, jobs, parse_mode })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.run_dir.join(file)
    }

    pub fn plan(&self) -> Result<PlanCounts, CliError> {
        let sources = genplan::plan_sources(&self.config.generation)?;
        let edits = genplan::plan_edits(
            &SourceRef::projected(&sources),
            &BTreeMap::new(),
            &self.config.generation,
            &self.config.registry,
            genplan::EditStrength::Normal,
        )?;
        let state = self.manifest.state();
        let remaining_source_jobs = sources.iter().filter(|j| !state.faces.contains_key(&j.face_id())).count();
        let remaining_edit_jobs =
            edits.iter().filter(|j| !state.edit_index.contains_key(&(j.parent_face_id.clone(), j.attribute))).count();
        Ok(PlanCounts {
            source_jobs: sources.len(),
            edit_jobs: edits.len(),
            remaining_source_jobs,
            remaining_edit_jobs,
        })
    }

    pub fn generate(&mut self) -> Result<RunReport, CliError> {
        let plan = genplan::plan_sources(&self.config.generation)?;
        Ok(genplan::run_source_jobs(&plan, &*self.backend, &mut self.manifest, &self.store, self.jobs)?)
    }

    pub fn edit(&mut self) -> Result<RunReport, CliError> {
        let plan =
            genplan::plan_edits_from_manifest(self.manifest.state(), &self.config.generation, &self.config.registry)?;
        Ok(genplan::run_edit_jobs(&plan, &*self.backend, &mut self.manifest, &self.store, self.jobs)?)
    }

    pub fn detect(&mut self) -> Result<attrdetect::DetectRunReport, CliError> {
        Ok(attrdetect::detect_dataset(&mut self.manifest, &*self.backend, &self.config.prompt, self.jobs)?)
    }

    /// Per-attribute detection for every transformed pair; results are
    /// written to a side file and never enter the manifest.
    pub fn detect_single(&self, attribute: AttributeId) -> Result<PathBuf, CliError> {
        #[derive(Serialize)]
        struct Row {
            face_id: String,
            source: Option<bool>,
            transformed: Option<bool>,
            error: Option<String>,
        }
        let profile = self.config.prompt.single_attribute(attribute);
        profile.validate()?;
        let state = self.manifest.state();
        let pairs: Vec<(&FaceRecord, &FaceRecord)> =
            state.transformed().filter_map(|t| Some((state.faces.get(t.parent_face_id.as_ref()?)?, t))).collect();
        let mut rows = Vec::new();
        let _ = crate::exec::run_ordered(
            &pairs,
            self.jobs,
            |(s, t)| detect_attributes(&*self.backend, &s.image_ref, &t.image_ref, &[attribute], &profile),
            |(_, t), r| {
                rows.push(match r {
                    Ok((s, tf, _, _)) => Row {
                        face_id: t.face_id.clone(),
                        source: s.get(&attribute).copied(),
                        transformed: tf.get(&attribute).copied(),
                        error: None,
                    },
                    Err(e) => {
                        Row { face_id: t.face_id.clone(), source: None, transformed: None, error: Some(e.to_string()) }
                    }
                });
                Ok::<_, ()>(())
            },
        );
        let path = self.path(&format!("single_attribute_{attribute}.json"));
        write_json(&path, &rows)?;
        Ok(path)
    }

    /// Train (or load) the distortion model from the training manifest.
    pub fn train_model(&self) -> Result<LinearModel, CliError> {
        let model_path = self.path(MODEL_FILE);
        if model_path.exists() {
            return read_json(&model_path);
        }
        let recipe = &self.config.training;
        let mut train = Manifest::open(self.path(TRAINING_MANIFEST_FILE), self.parse_mode)?;
        let sources =
            genplan::run_source_jobs(&recipe.source_jobs()?, &*self.backend, &mut train, &self.store, self.jobs)?;
        let failures: Vec<(String, String)> =
            sources.failures.iter().map(|f| (f.job.clone(), f.error.clone())).collect();
        partial(&failures)?;
        let edit_plan = recipe.edit_jobs(train.state(), &self.config.registry)?;
        let edits = genplan::run_edit_jobs(&edit_plan, &*self.backend, &mut train, &self.store, self.jobs)?;
        let failures: Vec<(String, String)> = edits.failures.iter().map(|f| (f.job.clone(), f.error.clone())).collect();
        partial(&failures)?;

        let labeled = recipe.labeled_faces(train.state());
        let labels: BTreeMap<&str, bool> = labeled.iter().map(|(f, y)| (f.face_id.as_str(), *y)).collect();
        let faces: Vec<&FaceRecord> = labeled.iter().map(|(f, _)| *f).collect();
        let (embedded, failed) =
            distortion::embed_faces(&faces, &*self.backend, self.config.backend.embedding_dim, self.jobs);
        partial(&failed)?;
        let examples: Vec<(Vec<f64>, bool)> =
            embedded.into_iter().map(|(f, v)| (v, labels[f.face_id.as_str()])).collect();
        let model = distortion::train_svm(&examples, &self.config.svm)?;
        write_json(&model_path, &model)?;
        Ok(model)
    }

    /// Distortion labels for calibration: survey majorities when any exist,
    /// otherwise (mock runs only) the mock's ground truth.
    fn calibration_labels(&self, face_ids: impl Iterator<Item = String>) -> Result<BTreeMap<String, bool>, CliError> {
        let (responses, _) = surveys::stored_responses(self.manifest.state());
        let tally = surveys::tally_distortion(&responses);
        if !tally.labels.is_empty() {
            return Ok(tally.labels.into_iter().map(|(f, l)| (f, l == surveys::DistortionLabel::Distorted)).collect());
        }
        let Some(world) = &self.mock else {
            return Err(CliError::Config("no distortion survey labels; run ingest-survey first".into()));
        };
        let state = self.manifest.state();
        Ok(face_ids
            .filter_map(|id| {
                let latent = world.latent(&state.faces.get(&id)?.image_ref)?;
                Some((id, latent.distorted))
            })
            .collect())
    }

    pub fn calibrate(&mut self) -> Result<CalibrateOutcome, CliError> {
        let model = self.train_model()?;
        let (scores, failures) =
            distortion::score_unclassified(self.manifest.state(), &model, &*self.backend, self.jobs);
        let table_path = self.path(THRESHOLDS_FILE);
        let table: ThresholdTable = if table_path.exists() {
            read_json(&table_path)?
        } else {
            let labels = self.calibration_labels(scores.keys().cloned())?;
            let labeled: Vec<LabeledScore> = scores
                .iter()
                .filter_map(|(id, (cell, score))| {
                    labels.get(id).map(|d| LabeledScore { cell: *cell, score: *score, distorted: *d })
                })
                .collect();
            let table = distortion::calibrate_thresholds(&labeled, self.config.recall_target)?;
            write_json(&table_path, &table)?;
            table
        };
        let mut classify =
            distortion::record_classifications(&mut self.manifest, &scores, &model, &table, &self.backend.version())?;
        classify.failures = failures;
        Ok(CalibrateOutcome { model_fingerprint: model.fingerprint.clone(), thresholds: table.cells.len(), classify })
    }

    pub fn filter(&mut self) -> Result<FilterSummary, CliError> {
        let summary = filter::filter_dataset(&mut self.manifest, &self.config.filter)?;
        write_json(&self.path(FILTER_SUMMARY_FILE), &summary)?;
        Ok(summary)
    }

    /// Record identity checks from a `identity_id,validated` CSV.
    pub fn validate_identities(&mut self, checklist: &Path) -> Result<usize, CliError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(checklist)
            .map_err(|e| CliError::Config(format!("{}: {e}", checklist.display())))?;
        #[derive(Deserialize)]
        struct Row {
            identity_id: String,
            validated: String,
        }
        let mut added = 0;
        for row in reader.deserialize::<Row>() {
            let row = row.map_err(|e| CliError::Config(format!("{}: {e}", checklist.display())))?;
            let validated = matches!(row.validated.to_ascii_lowercase().as_str(), "true" | "yes" | "1" | "y");
            let record = Record::IdentityValidation(IdentityValidation { identity_id: row.identity_id, validated });
            if self.manifest.append_if_absent(record)? {
                added += 1;
            }
        }
        Ok(added)
    }

    pub fn sample_for_survey(&self, cap: Option<usize>, force: bool) -> Result<Vec<SampledPair>, CliError> {
        let path = self.path(SAMPLE_FILE);
        if path.exists() && !force {
            return read_json(&path);
        }
        let seed = genplan::derive_seed(self.config.seed.unwrap_or(self.config.generation.seed_base), &["survey"]);
        let sample =
            surveys::sample_for_survey(self.manifest.state(), cap.unwrap_or(self.config.survey_sample_cap), seed);
        write_json(&path, &sample)?;
        let mut w =
            csv::Writer::from_path(self.path("survey_sample.csv")).map_err(|e| CliError::Fatal(e.to_string()))?;
        for s in &sample {
            w.serialize(s).map_err(|e| CliError::Fatal(e.to_string()))?;
        }
        w.flush()?;
        Ok(sample)
    }

    pub fn ingest_survey(&mut self, schema: ExportSchema, file: &Path) -> Result<(usize, surveys::Ingested), CliError> {
        let reader = std::fs::File::open(file).map_err(|e| CliError::Config(format!("{}: {e}", file.display())))?;
        let ingested = surveys::ingest_export(reader, schema, Some(self.manifest.state())).map_err(|e| match e {
            surveys::SurveyError::SchemaMismatch { .. } => CliError::Config(format!("{}: {e}", file.display())),
            other => other.into(),
        })?;
        let added = surveys::record_labels(&mut self.manifest, surveys::survey_labels(&ingested))?;
        Ok((added, ingested))
    }

    pub fn efficacy(&self) -> Result<EfficacyReport, CliError> {
        let sample_path = self.path(SAMPLE_FILE);
        if !sample_path.exists() {
            return Err(CliError::Config("no survey sample; run sample-for-survey first".into()));
        }
        let sample: Vec<SampledPair> = read_json(&sample_path)?;
        let (d, a) = surveys::stored_responses(self.manifest.state());
        let pairs = surveys::survey_pairs(&sample, &d, &a)?;
        let report = surveys::compute_efficacy(&pairs, &self.config.filter, self.config.exclusion_threshold)?;
        write_json(&self.path(EFFICACY_FILE), &report)?;
        Ok(report)
    }

    pub fn probe(&mut self, mut spec: ProbeSpec) -> Result<(Vec<CellStat>, usize), CliError> {
        let efficacy_path = self.path(EFFICACY_FILE);
        if efficacy_path.exists() {
            let report: EfficacyReport = read_json(&efficacy_path)?;
            for c in report.excluded_cells {
                if !spec.excluded_cells.contains(&c) {
                    spec.excluded_cells.push(c);
                }
            }
        }
        let (stats, dropped) = evalstats::run_probe(&mut self.manifest, &spec, &*self.backend, self.jobs)?;
        write_json(&self.path(PROBE_STATS_FILE), &stats)?;
        Ok((stats, dropped))
    }

    pub fn report(&self) -> Result<String, CliError> {
        let stats: Vec<CellStat> = read_json(&self.path(PROBE_STATS_FILE))?;
        let md = evalstats::build_report(&stats, ReportFormat::Markdown);
        std::fs::write(self.path("report.md"), &md)?;
        std::fs::write(self.path("report.csv"), evalstats::build_report(&stats, ReportFormat::Csv))?;
        Ok(md)
    }

    pub fn tune(&self, grid: &BTreeMap<String, Vec<f64>>) -> Result<Vec<genplan::TuneCandidate>, CliError> {
        let seed = genplan::derive_seed(self.config.generation.seed_base, &["tune"]);
        let out = genplan::tune(
            self.manifest.state(),
            &self.config.generation,
            grid,
            &*self.backend,
            &self.store,
            seed,
            self.jobs,
        );
        write_json(&self.path("tune_candidates.json"), &out)?;
        Ok(out)
    }
}

#[derive(Debug, Parser)]
#[command(name = "cforge", version, about = "Counterfactual face dataset pipeline")]
pub struct Cli {
    /// Run directory holding the manifest, images and stage outputs.
    #[arg(long, global = true, default_value = "run/default")]
    pub run: PathBuf,
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Use the in-process mock backend.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Master seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum concurrent backend requests.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, env = crate::backends::BACKEND_URL_ENV)]
    pub backend_url: Option<String>,
    /// Reject unknown fields when reading manifests.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count source and edit jobs.
    Plan,
    /// Generate source faces.
    Generate,
    /// Edit every source face with every configured attribute.
    Edit,
    /// Detect attributes and ages for transformed pairs.
    Detect {
        /// Query one attribute at a time and write results to a side file.
        #[arg(long)]
        single_attribute: Option<AttributeId>,
    },
    /// Train the distortion model, calibrate thresholds, classify faces.
    Calibrate,
    /// Apply the counterfactual filter.
    Filter,
    /// Choose accepted pairs for the attribute survey.
    SampleForSurvey {
        #[arg(long)]
        cap: Option<usize>,
        /// Draw a new sample even if one exists.
        #[arg(long)]
        force: bool,
    },
    /// Ingest survey export CSV files.
    IngestSurvey {
        #[arg(long, value_parser = parse_schema)]
        schema: ExportSchema,
        files: Vec<PathBuf>,
    },
    /// Compute pipeline efficacy from survey responses.
    Efficacy,
    /// Measure concept-score deltas on accepted pairs.
    Probe {
        #[arg(long)]
        probe: Option<PathBuf>,
        /// Comma-separated `attribute=concept` rows, used without a probe file.
        #[arg(long)]
        concepts: Option<String>,
    },
    /// Render the probe table as Markdown and CSV.
    Report,
    /// Edit probe faces over a hyperparameter grid for manual review.
    Tune {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Record identity checks from an `identity_id,validated` CSV.
    ValidateIdentity {
        #[arg(long)]
        checklist: PathBuf,
    },
    /// Serve the mock backend over HTTP.
    ServeMock {
        #[arg(long, default_value = "127.0.0.1:8700")]
        addr: String,
        #[arg(long, default_value_t = 4)]
        threads: usize,
    },
    /// Run the golden protocol suite against a backend.
    Conformance,
}

fn parse_schema(s: &str) -> Result<ExportSchema, String> {
    s.parse()
}

fn parse_concepts(text: &str) -> Result<Vec<ProbeRow>, CliError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (a, c) =
                item.split_once('=').ok_or_else(|| CliError::Config(format!("`{item}` is not attribute=concept")))?;
            let attribute =
                a.trim().parse().map_err(|e: crate::domain::DomainError| CliError::Config(e.to_string()))?;
            Ok(ProbeRow { attribute, concept: c.trim().to_string() })
        })
        .collect()
}

fn report_failures(report: &RunReport) -> Result<(), CliError> {
    let failures: Vec<(String, String)> = report.failures.iter().map(|f| (f.job.clone(), f.error.clone())).collect();
    partial(&failures)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(url) = &cli.backend_url {
        config.backend.base_url = url.clone();
    }
    let options =
        EngineOptions { mock: cli.mock, jobs: cli.jobs.unwrap_or(config.backend.max_in_flight), strict: cli.strict };
    match cli.command {
        Command::ServeMock { addr, threads } => {
            config.prepare()?;
            let world = MockWorld::new(config.mock.clone());
            let handle = serve(Arc::new(world), &addr, threads)?;
            println!("serving mock backend on {}", handle.base_url());
            handle.join();
            return Ok(());
        }
        Command::Conformance => {
            let outcomes = protocol::run_conformance(&config.backend.base_url, &protocol::golden_cases());
            let failed: Vec<(String, String)> =
                outcomes.iter().filter(|o| !o.passed).map(|o| (o.name.clone(), o.detail.clone())).collect();
            for o in &outcomes {
                println!(
                    "{} {}{}",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.name,
                    if o.passed { String::new() } else { format!(": {}", o.detail) }
                );
            }
            return partial(&failed);
        }
        _ => {}
    }
    let mut engine = Engine::open(&cli.run, config, &options)?;
    match cli.command {
        Command::Plan => {
            let counts = engine.plan()?;
            println!("source jobs: {}", counts.source_jobs);
            println!("edit jobs: {}", counts.edit_jobs);
            write_json(&engine.path("plan.json"), &counts)?;
        }
        Command::Generate => {
            let r = engine.generate()?;
            println!("generated {} source faces ({} already present)", r.completed, r.skipped);
            report_failures(&r)?;
        }
        Command::Edit => {
            let r = engine.edit()?;
            println!("edited {} faces ({} already present)", r.completed, r.skipped);
            report_failures(&r)?;
        }
        Command::Detect { single_attribute: Some(a) } => {
            let path = engine.detect_single(a)?;
            println!("wrote {}", path.display());
        }
        Command::Detect { single_attribute: None } => {
            let r = engine.detect()?;
            println!(
                "detected {} pairs ({} skipped, {} failed, {} retries)",
                r.detected,
                r.skipped,
                r.failed.len(),
                r.retries_used
            );
            partial(&r.failed)?;
        }
        Command::Calibrate => {
            let r = engine.calibrate()?;
            println!(
                "classified {} faces, {} distorted, {} cell thresholds",
                r.classify.classified, r.classify.distorted, r.thresholds
            );
            partial(&r.classify.failures)?;
        }
        Command::Filter => {
            let s = engine.filter()?;
            println!(
                "accepted {} of {} candidates ({} unprocessed)",
                s.totals.accepted, s.totals.candidates, s.totals.unprocessed
            );
            let unprocessed: Vec<(String, String)> = s.unprocessed.into_iter().collect();
            partial(&unprocessed)?;
        }
        Command::SampleForSurvey { cap, force } => {
            let sample = engine.sample_for_survey(cap, force)?;
            println!("{} pairs in {}", sample.len(), engine.path(SAMPLE_FILE).display());
        }
        Command::IngestSurvey { schema, files } => {
            let mut issues = Vec::new();
            for f in &files {
                let (added, ingested) = engine.ingest_survey(schema, f)?;
                println!("{}: {added} new responses", f.display());
                for i in ingested.malformed.iter() {
                    eprintln!("{}:{}: malformed: {}", f.display(), i.line, i.message);
                    issues.push((format!("{}:{}", f.display(), i.line), i.message.clone()));
                }
                for i in ingested.unknown_faces.iter() {
                    eprintln!("{}:{}: {}", f.display(), i.line, i.message);
                }
            }
            partial(&issues)?;
        }
        Command::Efficacy => {
            let r = engine.efficacy()?;
            println!("efficacy: {:.2}% ({}/{})", 100.0 * r.efficacy, r.validated, r.total_sampled);
            println!(
                "excluding {} cells below {:.0}%: {:.2}% ({}/{})",
                r.excluded_cells.len(),
                100.0 * r.exclusion_threshold,
                100.0 * r.restricted_efficacy,
                r.restricted_validated,
                r.restricted_sampled
            );
        }
        Command::Probe { probe, concepts } => {
            let spec = match (probe, concepts) {
                (Some(p), _) => read_json(&p)?,
                (None, Some(c)) => ProbeSpec {
                    pairs: parse_concepts(&c)?,
                    confidence_level: engine.config.confidence_level,
                    excluded_cells: Vec::new(),
                },
                (None, None) => return Err(CliError::Config("probe needs --probe or --concepts".into())),
            };
            let (stats, dropped) = engine.probe(spec)?;
            println!("{} cells measured", stats.len());
            if dropped > 0 {
                return Err(CliError::Partial { failed: dropped, detail: "pairs dropped on backend errors".into() });
            }
        }
        Command::Report => print!("{}", engine.report()?),
        Command::Tune { grid } => {
            let grid: BTreeMap<String, Vec<f64>> = read_json(&grid)?;
            let out = engine.tune(&grid)?;
            let failed: Vec<(String, String)> = out
                .iter()
                .filter_map(|c| c.error.clone().map(|e| (format!("{}/{}", c.source_face_id, c.attribute), e)))
                .collect();
            println!("{} tuning candidates", out.len());
            partial(&failed)?;
        }
        Command::ValidateIdentity { checklist } => {
            let n = engine.validate_identities(&checklist)?;
            println!("recorded {n} identity checks");
        }
        Command::ServeMock { .. } | Command::Conformance => unreachable!("handled above"),
    }
    Ok(())
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
