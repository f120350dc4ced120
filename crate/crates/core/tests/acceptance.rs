//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#![allow(
    clippy::type_complexity,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::field_reassign_with_default
)]

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cforge::backends::{AttributeQuery, Backend, BackendError, EditRequest, MockConfig, MockWorld};
use cforge::cli::{CliError, FILTER_SUMMARY_FILE, MANIFEST_FILE, MODEL_FILE, THRESHOLDS_FILE};
use cforge::distortion::{
    calibrate_thresholds, embed_faces, score_unclassified, train_svm, LabeledScore, SvmParams, TrainingRecipe,
};
use cforge::domain::{
    parse_demographic, AttributeId, AttributeVector, Cell, Demographic, FaceKind, FaceRecord, GenParams, ImageRef,
    RejectReason,
};
use cforge::evalstats::{build_report, concept_deltas, mean_ci, CellStat, ProbeSpec, ReportFormat};
use cforge::filter::{filter_candidate, rejection_reasons, FilterConfig};
use cforge::genplan::{
    plan_edits, plan_edits_from_manifest, plan_sources, run_edit_jobs, run_source_jobs, EditStrength, GenerationConfig,
    HyperparamRegistry, SourceRef,
};
use cforge::manifest::{Manifest, ManifestState};
use cforge::specmatrix::{check_specificity, default_matrix, SpecCode};
use cforge::store::ImageStore;
use cforge::surveys::{
    compute_efficacy, ingest_export, survey_pairs, tally_distortion, AgeComparison, AttributeResponse, DistortionLabel,
    DistortionResponse, ExportSchema, SamePerson, SampledPair,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 9] = [
        (1, "plan counts", Duration::from_secs(1), plan_counts),
        (2, "matrix semantics", Duration::from_secs(1), matrix_semantics),
        (3, "filter rules", Duration::from_secs(5), filter_rules),
        (4, "distortion calibration", Duration::from_secs(30), distortion_calibration),
        (5, "end-to-end mock run", Duration::from_secs(120), end_to_end),
        (6, "survey arithmetic", Duration::from_secs(1), survey_arithmetic),
        (7, "statistics", Duration::from_secs(10), statistics),
        (8, "report golden files", Duration::from_secs(1), report_golden),
        (9, "crash-resume", Duration::from_secs(300), crash_resume),
    ];
    let mut failed = 0;
    for (n, name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; over the {budget:?} budget")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{elapsed:.2?}] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{elapsed:.2?}] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// 1 ---------------------------------------------------------------------

fn plan_counts() -> Outcome {
    let cfg = GenerationConfig::default();
    let sources = plan_sources(&cfg).map_err(err)?;
    let edits = plan_edits(
        &SourceRef::projected(&sources),
        &BTreeMap::new(),
        &cfg,
        &HyperparamRegistry::default(),
        EditStrength::Normal,
    )
    .map_err(err)?;
    ensure!(sources.len() == 4800, "{} source jobs", sources.len());
    ensure!(edits.len() == 91200, "{} edit jobs", edits.len());
    Ok(format!("{} source jobs, {} edit jobs", sources.len(), edits.len()))
}

// 2 ---------------------------------------------------------------------

fn flags(on: &[AttributeId]) -> AttributeVector {
    on.iter().fold(AttributeVector::blank(30), |v, a| v.with(*a, true))
}

fn matrix_semantics() -> Outcome {
    use AttributeId::*;
    let m = default_matrix();
    let cases = [
        ("facemask hides a smile", Facemask, flags(&[Smile]), flags(&[Facemask]), vec![]),
        ("facemask leaving a smile", Facemask, flags(&[Smile]), flags(&[Facemask, Smile]), vec![Smile]),
        (
            "facemask leaving lipstick",
            Facemask,
            flags(&[RedLipstick]),
            flags(&[Facemask, RedLipstick]),
            vec![RedLipstick],
        ),
        ("facemask hides facial hair", Facemask, flags(&[Mustache, Goatee]), flags(&[Facemask]), vec![]),
        ("facemask over a beard", Facemask, flags(&[ThickBeard]), flags(&[Facemask, ThickBeard]), vec![]),
        ("sunglasses replace glasses", Sunglasses, flags(&[Glasses]), flags(&[Sunglasses]), vec![]),
        ("sunglasses read as glasses", Sunglasses, flags(&[]), flags(&[Sunglasses, Glasses]), vec![]),
        ("glasses adding sunglasses", Glasses, flags(&[]), flags(&[Glasses, Sunglasses]), vec![Sunglasses]),
        ("makeup with lipstick", HeavyMakeup, flags(&[]), flags(&[HeavyMakeup, RedLipstick]), vec![]),
        ("lipstick read as makeup", RedLipstick, flags(&[]), flags(&[RedLipstick, HeavyMakeup]), vec![]),
        ("makeup dyeing hair", HeavyMakeup, flags(&[]), flags(&[HeavyMakeup, RedHair]), vec![RedHair]),
        ("edit that did nothing", Scarf, flags(&[]), flags(&[]), vec![Scarf]),
        ("edit removing a scarf", Smile, flags(&[Scarf]), flags(&[Smile]), vec![Scarf]),
    ];
    for (name, applied, src, tf, want) in &cases {
        let got = check_specificity(*applied, src, tf, &m).map_err(err)?;
        ensure!(&got == want, "{name}: got {got:?}, want {want:?}");
    }

    // Exact change: setting what the row forces and keeping the rest is
    // specific; flipping any one further target violates exactly that
    // target unless the row ignores it.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut vectors = 0;
    for applied in AttributeId::NON_AGE {
        let row = m.row(applied).map_err(err)?;
        for _ in 0..200 {
            let mut src = AttributeVector::blank(rng.random_range(18..80));
            for a in AttributeId::NON_AGE {
                src.set(a, rng.random_bool(0.3));
            }
            let mut tf = src.clone();
            for (t, code) in &row {
                match code {
                    SpecCode::MustBePresent => tf.set(*t, true),
                    SpecCode::MustBeAbsent => tf.set(*t, false),
                    _ => {}
                }
            }
            let got = check_specificity(applied, &src, &tf, &m).map_err(err)?;
            ensure!(got.is_empty(), "{applied}: exact change flagged {got:?}");
            for (t, code) in &row {
                let mut off = tf.clone();
                off.set(*t, !tf.get(*t));
                let want = if *code == SpecCode::Ignore { vec![] } else { vec![*t] };
                let got = check_specificity(applied, &src, &off, &m).map_err(err)?;
                ensure!(got == want, "{applied}: flipping {t} gave {got:?}, want {want:?}");
            }
            vectors += 1;
        }
    }
    Ok(format!("{} documented cases, {vectors} random source vectors", cases.len()))
}

// 3 ---------------------------------------------------------------------

/// The filter rules written out directly.
fn expected_reasons(
    src: &AttributeVector,
    tf: &AttributeVector,
    applied: AttributeId,
    distorted: bool,
    cfg: &FilterConfig,
) -> Vec<RejectReason> {
    let mut out = Vec::new();
    if distorted {
        out.push(RejectReason::Distorted);
    }
    let (s_age, t_age) = (i64::from(src.age_years), i64::from(tf.age_years));
    let min = i64::from(cfg.age_change_min);
    if applied.is_age() {
        let old = applied == AttributeId::Old;
        let at_limit =
            if old { s_age + min >= i64::from(cfg.age_ceiling) } else { s_age - min <= i64::from(cfg.age_floor) };
        if at_limit {
            out.push(RejectReason::SourceHasAttribute);
        }
        let moved = if old { t_age - s_age } else { s_age - t_age };
        if moved < min {
            out.push(RejectReason::AgeChangeInsufficient);
        }
        for a in AttributeId::NON_AGE {
            if src.get(a) != tf.get(a) {
                out.push(RejectReason::SpecificityViolation(a));
            }
        }
    } else {
        if src.get(applied) {
            out.push(RejectReason::SourceHasAttribute);
        }
        for a in AttributeId::NON_AGE {
            let ok = match cfg.matrix.get(applied, a).expect("non-age") {
                SpecCode::MustBePresent => tf.get(a),
                SpecCode::MustBeAbsent => !tf.get(a),
                SpecCode::PreserveFromSource => src.get(a) == tf.get(a),
                SpecCode::Ignore => true,
            };
            if !ok {
                out.push(RejectReason::SpecificityViolation(a));
            }
        }
        if (t_age - s_age).abs() >= i64::from(cfg.age_drift_max) {
            out.push(RejectReason::AgeDriftExceeded);
        }
    }
    out
}

struct FilterCase {
    src: AttributeVector,
    tf: AttributeVector,
    applied: AttributeId,
    distorted: bool,
}

fn random_case(rng: &mut ChaCha8Rng) -> FilterCase {
    let applied = AttributeId::ALL[rng.random_range(0..AttributeId::ALL.len())];
    let mut src = AttributeVector::blank(rng.random_range(18..=85));
    for a in AttributeId::NON_AGE {
        src.set(a, rng.random_bool(0.1));
    }
    let mut tf = src.clone();
    if rng.random_bool(0.85) {
        tf.set(applied, true);
    }
    for a in AttributeId::NON_AGE {
        if rng.random_bool(0.03) {
            tf.set(a, !tf.get(a));
        }
    }
    let spread = if applied.is_age() { 20 } else { 12 };
    let delta: i64 = rng.random_range(-spread..=spread);
    tf.age_years = (i64::from(src.age_years) + delta).max(0) as u32;
    FilterCase { src, tf, applied, distorted: rng.random_bool(0.1) }
}

fn filter_rules() -> Outcome {
    use AttributeId::*;
    let cfg = FilterConfig::default();
    let at = |age: u32, on: &[AttributeId]| {
        let mut v = flags(on);
        v.age_years = age;
        v
    };
    let examples = [
        (
            "glasses on a face with glasses",
            Glasses,
            at(30, &[Glasses]),
            at(30, &[Glasses]),
            vec![RejectReason::SourceHasAttribute],
        ),
        ("old 30 to 42", Old, at(30, &[]), at(42, &[]), vec![]),
        ("smile 30 to 41", Smile, at(30, &[]), at(41, &[Smile]), vec![RejectReason::AgeDriftExceeded]),
        ("smile 30 to 39", Smile, at(30, &[]), at(39, &[Smile]), vec![]),
    ];
    for (name, applied, src, tf, want) in &examples {
        let verdict = filter_candidate("tf", src, tf, *applied, false, &cfg);
        ensure!(&verdict.reasons == want, "{name}: got {:?}", verdict.reasons);
        ensure!(verdict.accepted == want.is_empty(), "{name}: accepted flag disagrees with reasons");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ignore_cells: Vec<(AttributeId, AttributeId)> = AttributeId::NON_AGE
        .iter()
        .flat_map(|a| AttributeId::NON_AGE.iter().map(move |t| (*a, *t)))
        .filter(|(a, t)| cfg.matrix.get(*a, *t).unwrap() == SpecCode::Ignore)
        .collect();
    let (mut accepted, mut tightened_flips) = (0, 0);
    for i in 0..10_000 {
        let mut cfg = FilterConfig::default();
        cfg.age_drift_max = rng.random_range(5..=12);
        cfg.age_change_min = rng.random_range(5..=12);
        let c = random_case(&mut rng);
        let got = rejection_reasons(&c.src, &c.tf, c.applied, c.distorted, &cfg);
        let want = expected_reasons(&c.src, &c.tf, c.applied, c.distorted, &cfg);
        ensure!(got == want, "case {i} ({}): got {got:?}, want {want:?}", c.applied);
        let delta = i64::from(c.tf.age_years) - i64::from(c.src.age_years);

        // (a) accepted non-age candidates are correct and specific.
        if got.is_empty() {
            accepted += 1;
            ensure!(!c.distorted, "case {i}: distorted candidate accepted");
            if !c.applied.is_age() {
                ensure!(
                    c.tf.get(c.applied) && !c.src.get(c.applied),
                    "case {i}: accepted without the attribute change"
                );
                let v = check_specificity(c.applied, &c.src, &c.tf, &cfg.matrix).map_err(err)?;
                ensure!(v.is_empty(), "case {i}: accepted with violations {v:?}");
            }
        }

        // (b) drift bound exclusive, change bound inclusive.
        if c.applied.is_age() {
            let moved = if c.applied == Old { delta } else { -delta };
            let short = got.contains(&RejectReason::AgeChangeInsufficient);
            ensure!(
                short == (moved < i64::from(cfg.age_change_min)),
                "case {i}: change {moved} vs {}",
                cfg.age_change_min
            );
        } else {
            let drift = got.contains(&RejectReason::AgeDriftExceeded);
            ensure!(
                drift == (delta.abs() >= i64::from(cfg.age_drift_max)),
                "case {i}: drift {delta} vs {}",
                cfg.age_drift_max
            );
        }

        // (c) a stricter config never turns a reject into an accept.
        let mut strict = cfg.clone();
        strict.age_drift_max = rng.random_range(1..=cfg.age_drift_max);
        for (a, t) in &ignore_cells {
            if rng.random_bool(0.5) {
                strict.matrix.set(*a, *t, SpecCode::PreserveFromSource).map_err(err)?;
            }
        }
        let strict_ok = rejection_reasons(&c.src, &c.tf, c.applied, c.distorted, &strict).is_empty();
        ensure!(!strict_ok || got.is_empty(), "case {i}: stricter config accepted a rejected candidate");
        if got.is_empty() && !strict_ok {
            tightened_flips += 1;
        }
    }
    ensure!(accepted > 500, "only {accepted} accepted cases; sweep too sparse");

    // Exact boundaries at the default bounds.
    let d = FilterConfig::default();
    for (applied, to, ok) in [
        (Smile, 40, false),
        (Smile, 39, true),
        (Smile, 20, false),
        (Smile, 21, true),
        (Old, 40, true),
        (Old, 39, false),
        (Young, 20, true),
        (Young, 21, false),
    ] {
        let tf = if applied.is_age() { at(to, &[]) } else { at(to, &[applied]) };
        let verdict = filter_candidate("tf", &at(30, &[]), &tf, applied, false, &d);
        ensure!(verdict.accepted == ok, "{applied} 30 to {to}: {:?}", verdict.reasons);
    }
    Ok(format!("4 examples, 10000 random cases ({accepted} accepted, {tightened_flips} tightened to reject)"))
}

// 4 ---------------------------------------------------------------------

fn distortion_calibration() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let store = ImageStore::open(dir.path().join("images")).map_err(err)?;
    let world = MockWorld::new(MockConfig { seed: 4, ..MockConfig::default() });
    let registry = HyperparamRegistry::default();
    let dim = world.config().embedding_dim;

    let recipe = TrainingRecipe::default();
    let mut train = Manifest::in_memory();
    run_source_jobs(&recipe.source_jobs().map_err(err)?, &world, &mut train, &store, 4).map_err(err)?;
    let jobs = recipe.edit_jobs(train.state(), &registry).map_err(err)?;
    run_edit_jobs(&jobs, &world, &mut train, &store, 4).map_err(err)?;
    let labeled = recipe.labeled_faces(train.state());
    for (face, label) in &labeled {
        let truth = world.latent(&face.image_ref).ok_or("missing latent")?.distorted;
        ensure!(truth == *label, "{}: recipe label {label}, ground truth {truth}", face.face_id);
    }
    let faces: Vec<&FaceRecord> = labeled.iter().map(|(f, _)| *f).collect();
    let (embedded, failed) = embed_faces(&faces, &world, dim, 4);
    ensure!(failed.is_empty(), "embedding failures: {failed:?}");
    let examples: Vec<(Vec<f64>, bool)> = embedded.into_iter().zip(&labeled).map(|((_, v), (_, y))| (v, *y)).collect();
    let model = train_svm(&examples, &SvmParams::default()).map_err(err)?;
    let correct = examples.iter().filter(|(x, y)| (model.score(x).unwrap() > 0.0) == *y).count();
    ensure!(correct == examples.len(), "training accuracy {correct}/{}", examples.len());

    // Calibrate on an ordinary run and check recall against ground truth.
    let cfg = GenerationConfig {
        identities_per_demographic: 10,
        variations_per_identity: 2,
        seed_base: 5,
        ..GenerationConfig::default()
    };
    let mut run = Manifest::in_memory();
    run_source_jobs(&plan_sources(&cfg).map_err(err)?, &world, &mut run, &store, 4).map_err(err)?;
    let edits = plan_edits_from_manifest(run.state(), &cfg, &registry).map_err(err)?;
    run_edit_jobs(&edits, &world, &mut run, &store, 4).map_err(err)?;
    let (scores, failures) = score_unclassified(run.state(), &model, &world, 4);
    ensure!(failures.is_empty(), "scoring failures: {failures:?}");
    let state = run.state();
    let labeled: Vec<LabeledScore> = scores
        .iter()
        .map(|(id, (cell, score))| LabeledScore {
            cell: *cell,
            score: *score,
            distorted: world.latent(&state.faces[id].image_ref).expect("latent").distorted,
        })
        .collect();
    let table = calibrate_thresholds(&labeled, 0.97).map_err(err)?;
    let mut by_cell: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for l in labeled.iter().filter(|l| l.distorted) {
        let e = by_cell.entry(l.cell.key()).or_default();
        e.0 += 1;
        if table.is_distorted(l.cell, l.score) {
            e.1 += 1;
        }
    }
    for (cell, (n, caught)) in &by_cell {
        ensure!(*caught as f64 / *n as f64 >= 0.97, "{cell}: recall {caught}/{n}");
    }

    // Brute-force sweep on random cells, with ties.
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut cells: Vec<Cell> = Cell::all().collect();
    cells.shuffle(&mut rng);
    let mut synthetic = Vec::new();
    for cell in &cells[..100] {
        for _ in 0..rng.random_range(1..=60) {
            synthetic.push(LabeledScore {
                cell: *cell,
                score: f64::from(rng.random_range(-20..20)) * 0.05,
                distorted: true,
            });
        }
        for _ in 0..rng.random_range(0..=60) {
            synthetic.push(LabeledScore {
                cell: *cell,
                score: f64::from(rng.random_range(-40..0)) * 0.05,
                distorted: false,
            });
        }
    }
    for target in [0.97, 0.5, 0.8, 1.0] {
        let table = calibrate_thresholds(&synthetic, target).map_err(err)?;
        for cell in &cells[..100] {
            let mine: Vec<f64> = synthetic.iter().filter(|l| l.cell == *cell && l.distorted).map(|l| l.score).collect();
            let best = mine
                .iter()
                .copied()
                .filter(|t| mine.iter().filter(|s| **s >= *t).count() as f64 / mine.len() as f64 >= target)
                .fold(f64::NEG_INFINITY, f64::max);
            ensure!(
                table.threshold(*cell) == Some(best),
                "{} at {target}: {:?} vs brute force {best}",
                cell.key(),
                table.threshold(*cell)
            );
        }
    }
    Ok(format!(
        "training accuracy {correct}/{correct}, recall >= 0.97 in {} cells with distorted faces, 100 swept cells agree",
        by_cell.len()
    ))
}

// 5 and 9 ----------------------------------------------------------------

struct Reference {
    state: ManifestState,
    summary: Vec<u8>,
    appends: u64,
}

static REFERENCE: OnceLock<Result<Reference, String>> = OnceLock::new();

fn e2e_config() -> cforge::cli::EngineConfig {
    common::mock_config(10, 2, 1)
}

fn chain(dir: &std::path::Path) -> Result<cforge::cli::Engine, String> {
    let mut engine = common::open(dir, &e2e_config());
    common::run_chain(&mut engine).map_err(err)?;
    Ok(engine)
}

fn reference() -> Result<&'static Reference, String> {
    REFERENCE
        .get_or_init(|| {
            let dir = tempfile::tempdir().map_err(err)?;
            let engine = chain(dir.path())?;
            Ok(Reference {
                state: engine.manifest.state().clone(),
                summary: std::fs::read(engine.path(FILTER_SUMMARY_FILE)).map_err(err)?,
                appends: engine.manifest.len() as u64,
            })
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn end_to_end() -> Outcome {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let first = chain(a.path())?;
    let state = first.manifest.state();
    let candidates = state.transformed().count();
    ensure!(candidates == 3040, "{candidates} candidates");
    ensure!(state.verdicts.len() == candidates, "{} verdicts", state.verdicts.len());
    let (accepted, problems) = common::audit_accepted(&first);
    ensure!(accepted > 0, "nothing accepted");
    ensure!(problems.is_empty(), "{} ground-truth violations, first: {}", problems.len(), problems[0]);
    let second = chain(b.path())?;
    for file in [FILTER_SUMMARY_FILE, MANIFEST_FILE, THRESHOLDS_FILE, MODEL_FILE] {
        let x = std::fs::read(first.path(file)).map_err(err)?;
        let y = std::fs::read(second.path(file)).map_err(err)?;
        ensure!(x == y, "{file} differs between runs");
    }
    let _ = REFERENCE.set(Ok(Reference {
        state: state.clone(),
        summary: std::fs::read(first.path(FILTER_SUMMARY_FILE)).map_err(err)?,
        appends: first.manifest.len() as u64,
    }));
    Ok(format!("{candidates} candidates, {accepted} accepted, 0 violations, two runs byte-identical"))
}

fn crash_resume() -> Outcome {
    let reference = reference()?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut points = BTreeSet::new();
    while points.len() < 20 {
        points.insert(rng.random_range(0..reference.appends));
    }
    for k in &points {
        let dir = tempfile::tempdir().map_err(err)?;
        {
            let mut engine = common::open(dir.path(), &e2e_config());
            engine.manifest.crash_after(*k);
            match common::run_chain(&mut engine) {
                Err(CliError::Fatal(_)) => {}
                other => return Err(format!("crash at {k}: run ended with {other:?}")),
            }
        }
        let mut engine = common::open(dir.path(), &e2e_config());
        ensure!(engine.manifest.len() as u64 == *k, "crash at {k}: {} entries survived", engine.manifest.len());
        common::run_chain(&mut engine).map_err(|e| format!("resume after {k}: {e}"))?;
        ensure!(engine.manifest.state() == &reference.state, "resume after {k}: manifest state differs");
        let summary = std::fs::read(engine.path(FILTER_SUMMARY_FILE)).map_err(err)?;
        ensure!(summary == reference.summary, "resume after {k}: filter summary differs");
    }
    let list: Vec<String> = points.iter().map(u64::to_string).collect();
    Ok(format!("20 crash points of {} appends converged ({})", reference.appends, list.join(",")))
}

// 6 ---------------------------------------------------------------------

/// Validated counts per cell, `validated/sampled` where fewer than five
/// pairs were sampled. Two cells differ from the transcribed table:
/// buzz_cut/WM (3 there) and curly_hair/AF (3 there). With the transcribed
/// values the sub-50% cells number 23 and the restricted subset is 537/638.
const VALIDATED: [(&str, [&str; 8]); 19] = [
    ("facemask", ["5", "4", "5", "5", "5", "5", "5", "5"]),
    ("glasses", ["4", "4", "5", "5", "5", "4", "5", "4"]),
    ("head_band", ["5", "4", "3", "4", "4", "4", "5", "5"]),
    ("scarf", ["5", "5", "5", "5", "4", "4", "5", "5"]),
    ("sunglasses", ["3", "4", "5", "5", "5", "4", "5", "5"]),
    ("old", ["3", "5", "2", "4", "3", "5", "4", "5"]),
    ("young", ["3", "3", "0", "0", "0", "4", "3", "3"]),
    ("heavy_makeup", ["4", "5", "4", "4", "4", "3", "3", "1"]),
    ("red_lipstick", ["2", "5", "1", "5", "1", "4", "5", "5"]),
    ("smile", ["5", "5", "5", "5", "5", "4", "4", "5"]),
    ("goatee", ["4", "2", "4", "2", "5", "3", "3", "0"]),
    ("mustache", ["4", "4", "5", "5", "4", "4", "3", "3"]),
    ("thick_beard", ["5", "0", "4", "2", "3", "2", "5", "2"]),
    ("blue_hair", ["4", "5", "5", "5", "5", "5", "5", "4"]),
    ("red_hair", ["4", "5", "4", "4", "5", "5", "4", "3"]),
    ("buzz_cut", ["2", "2", "1", "1", "1/1", "3", "1", "4"]),
    ("curly_hair", ["5", "5", "4", "4", "5", "4", "5", "4"]),
    ("pigtails", ["3", "3", "3", "3", "3", "2", "3", "2"]),
    ("shoulder_hair", ["3", "3", "4", "0", "3", "1/2", "3", "0/3"]),
];

const CODES: [&str; 8] = ["AM", "AF", "BM", "BF", "IM", "IF", "WM", "WF"];

fn attribute_response(
    who: String,
    pair: &SampledPair,
    cell: Cell,
    validates: bool,
    round: u32,
    q3: SamePerson,
    attention_pass: bool,
) -> AttributeResponse {
    let a = cell.attribute;
    let none: BTreeMap<AttributeId, bool> = AttributeId::NON_AGE.iter().map(|x| (*x, false)).collect();
    let mut tf = none.clone();
    if !a.is_age() {
        tf.insert(a, true);
    }
    let q2 = match (a, validates) {
        (AttributeId::Old, true) => AgeComparison::SourceBy10Plus,
        (AttributeId::Young, true) => AgeComparison::TransformedBy10Plus,
        (AttributeId::Old | AttributeId::Young, false) => AgeComparison::Equal,
        (_, true) => AgeComparison::SourceBy5,
        (_, false) => AgeComparison::TransformedBy10Plus,
    };
    AttributeResponse {
        respondent_id: who,
        source_face_id: pair.source_face_id.clone(),
        transformed_face_id: pair.transformed_face_id.clone(),
        q1_source: none,
        q1_transformed: tf,
        sex_source: cell.demographic.sex,
        sex_transformed: cell.demographic.sex,
        q2,
        q3,
        round,
        attention_pass,
    }
}

fn distortion_export(rows: &[(String, DistortionLabel, bool)], respondents: usize) -> Result<String, String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ExportSchema::Distortion.columns()).map_err(err)?;
    for (i, (face, label, pass)) in rows.iter().enumerate() {
        let who = format!("p{:03}", i % respondents);
        w.write_record([who.as_str(), face, label.as_str(), if *pass { "yes" } else { "no" }]).map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(err)?).map_err(err)
}

fn survey_arithmetic() -> Outcome {
    use DistortionLabel::*;
    // Distortion survey: 9 faces per cell, at least three votes each.
    let mut rows = Vec::new();
    for i in 0..1368 {
        let face = format!("dsurvey-{i:04}");
        let (maj, min) = if i < 131 { (Distorted, NotDistorted) } else { (NotDistorted, Distorted) };
        let votes: &[(DistortionLabel, bool)] = match i % 4 {
            0 => &[(maj, true), (maj, true), (maj, true)],
            1 => &[(maj, true), (min, true), (maj, true)],
            2 => &[(maj, true), (min, true), (min, false), (maj, true)],
            _ => &[(min, true), (min, false), (maj, true), (min, false), (maj, true)],
        };
        rows.extend(votes.iter().map(|(l, pass)| (face.clone(), *l, *pass)));
    }
    let ingested =
        ingest_export(distortion_export(&rows, 150)?.as_bytes(), ExportSchema::Distortion, None).map_err(err)?;
    ensure!(ingested.malformed.is_empty(), "malformed rows: {:?}", ingested.malformed);
    let tally = tally_distortion(&ingested.distortion);
    ensure!(tally.need_more_labels.is_empty(), "{} faces need more labels", tally.need_more_labels.len());
    ensure!(
        tally.labels.len() == 1368 && tally.distorted() == 131,
        "{}/{} distorted",
        tally.distorted(),
        tally.labels.len()
    );

    // Attribute survey over the sampled pairs.
    let mut sample = Vec::new();
    let mut expected_cells = BTreeMap::new();
    let mut plan = Vec::new();
    for (attr, row) in VALIDATED {
        for (code, entry) in CODES.iter().zip(row) {
            let (v, s) = match entry.split_once('/') {
                Some((v, s)) => (v.parse::<u64>().map_err(err)?, s.parse::<u64>().map_err(err)?),
                None => (entry.parse::<u64>().map_err(err)?, 5),
            };
            let cell = Cell::new(attr.parse().map_err(err)?, parse_demographic(code).map_err(err)?);
            expected_cells.insert(cell.key(), (s, v));
            for k in 0..s {
                let pair = SampledPair {
                    cell: cell.key(),
                    source_face_id: format!("src-{attr}-{code}-{k}"),
                    transformed_face_id: format!("tf-{attr}-{code}-{k}"),
                };
                plan.push((pair.clone(), cell, k < v));
                sample.push(pair);
            }
        }
    }
    let (mut distortion, mut attribute) = (Vec::new(), Vec::new());
    let (mut failures, mut validated_seen) = (0, 0);
    for (i, (pair, cell, good)) in plan.iter().enumerate() {
        // Failures: 11 distorted, 19 removed on identity, the rest never validated.
        let kind = if *good {
            "valid"
        } else {
            failures += 1;
            match failures {
                1..=11 => "distorted",
                12..=30 => "identity",
                _ => "invalid",
            }
        };
        let label = if kind == "distorted" { Distorted } else { NotDistorted };
        for j in 0..3 {
            distortion.push(DistortionResponse {
                respondent_id: format!("d{}", (i + j) % 40),
                face_id: pair.transformed_face_id.clone(),
                label,
                attention_pass: true,
            });
        }
        let who = |j: usize| format!("a{}", (i * 3 + j) % 60);
        let validates = kind != "invalid";
        let round = if kind == "valid" || kind == "identity" {
            validated_seen += 1;
            if validated_seen <= 540 {
                1
            } else {
                2
            }
        } else {
            1
        };
        let q3_second = if kind == "identity" { SamePerson::No } else { SamePerson::Yes };
        attribute.push(attribute_response(who(0), pair, *cell, validates && round == 1, 1, SamePerson::Yes, true));
        attribute.push(attribute_response(who(1), pair, *cell, false, 1, q3_second, true));
        attribute.push(attribute_response(
            who(2),
            pair,
            *cell,
            false,
            1,
            if kind == "identity" { SamePerson::No } else { SamePerson::NotSure },
            true,
        ));
        // Attention-failed respondents never count, whatever they answered.
        attribute.push(attribute_response(who(3), pair, *cell, true, 1, SamePerson::No, false));
        if validates && round == 2 {
            attribute.push(attribute_response(who(4), pair, *cell, true, 2, SamePerson::Yes, true));
        }
    }
    let pairs = survey_pairs(&sample, &distortion, &attribute).map_err(err)?;
    let report = compute_efficacy(&pairs, &FilterConfig::default(), 0.5).map_err(err)?;
    ensure!(report.total_sampled == 751, "{} sampled", report.total_sampled);
    ensure!(report.distorted_removed == 11, "{} distorted", report.distorted_removed);
    ensure!(report.attribute_validated == 583, "{} attribute-validated", report.attribute_validated);
    let rounds: Vec<(u32, u64)> = report.validated_by_round.iter().map(|(r, n)| (*r, *n)).collect();
    ensure!(rounds == [(1, 540), (2, 43)], "rounds {rounds:?}");
    ensure!(report.identity_removed == 19, "{} identity removals", report.identity_removed);
    ensure!(report.validated == 564, "{} validated", report.validated);
    let pct = report.efficacy * 100.0;
    ensure!((pct - 75.09).abs() <= 0.01, "efficacy {pct:.4}%");
    for (key, (s, v)) in &expected_cells {
        let got = &report.per_cell[key];
        ensure!(got.sampled == *s && got.validated == *v, "{key}: {}/{} vs {v}/{s}", got.validated, got.sampled);
    }
    ensure!(report.excluded_cells.len() == 24, "{} excluded cells", report.excluded_cells.len());
    ensure!(
        report.restricted_sampled == 633 && report.restricted_validated == 536,
        "restricted {}/{}",
        report.restricted_validated,
        report.restricted_sampled
    );
    let restricted = format!("{:.2}", report.restricted_efficacy * 100.0);
    ensure!(restricted == "84.68", "restricted efficacy {restricted}%");
    Ok(format!(
        "131/1368 distorted; efficacy 564/751 = {pct:.4}%; 24 of 152 cells below 50%; restricted 536/633 = {restricted}% (84.6% when truncated)"
    ))
}

// 7 ---------------------------------------------------------------------

/// Adaptive Simpson integration of `f` over [a, b].
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            left + right + diff / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// t with P(|T| <= t) = level for `df` degrees of freedom. Substituting
/// x = sqrt(df) tan(u) turns the density into cos(u)^(df-1) on [0, pi/2).
fn t_quantile_oracle(level: f64, df: u32) -> f64 {
    let k = f64::from(df) - 1.0;
    let f = move |u: f64| u.cos().powf(k);
    let total = simpson(&f, 0.0, std::f64::consts::FRAC_PI_2, 1e-15);
    let (mut lo, mut hi) = (0.0, std::f64::consts::FRAC_PI_2);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if simpson(&f, 0.0, mid, 1e-15) / total < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    f64::from(df).sqrt() * (0.5 * (lo + hi)).tan()
}

/// Concept scores looked up from a table, shifted by a constant.
struct ScoreTable {
    scores: BTreeMap<String, f64>,
    shift: f64,
}

impl Backend for ScoreTable {
    fn txt2img(&self, _: &str, _: u64) -> Result<ImageRef, BackendError> {
        Err(BackendError::Unavailable("scores only".into()))
    }
    fn edit(&self, _: &EditRequest) -> Result<ImageRef, BackendError> {
        Err(BackendError::Unavailable("scores only".into()))
    }
    fn embed(&self, _: &ImageRef) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Unavailable("scores only".into()))
    }
    fn query_attributes(&self, _: &AttributeQuery) -> Result<String, BackendError> {
        Err(BackendError::Unavailable("scores only".into()))
    }
    fn age(&self, _: &ImageRef) -> Result<i64, BackendError> {
        Err(BackendError::Unavailable("scores only".into()))
    }
    fn concept_scores(&self, image: &ImageRef, concepts: &[String]) -> Result<BTreeMap<String, f64>, BackendError> {
        let s = self.scores.get(image.as_str()).ok_or_else(|| BackendError::Unavailable(image.to_string()))?;
        Ok(concepts.iter().map(|c| (c.clone(), s + self.shift)).collect())
    }
    fn fetch_image(&self, _: &ImageRef) -> Result<Vec<u8>, BackendError> {
        Err(BackendError::Unavailable("scores only".into()))
    }
}

fn face(id: &str, image: &ImageRef, parent: Option<&str>) -> FaceRecord {
    FaceRecord {
        face_id: id.into(),
        identity_id: "id".into(),
        variation_index: 0,
        kind: if parent.is_some() { FaceKind::Transformed } else { FaceKind::Source },
        applied_attribute: parent.map(|_| AttributeId::Glasses),
        image_ref: image.clone(),
        gen_params: GenParams { seed: 0, prompt: String::new(), hyperparams: BTreeMap::new() },
        parent_face_id: parent.map(String::from),
    }
}

fn statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let n = if case < 5 { 2 + case } else { rng.random_range(2..=300) };
        let level = if case % 5 == 0 { 0.999 } else { rng.random_range(0.5..0.9995) };
        let scale = 10f64.powf(rng.random_range(-3.0..1.0));
        let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale + 0.3).collect();
        let (mean, half) = mean_ci(&deltas, level).map_err(err)?;
        let m = deltas.iter().sum::<f64>() / n as f64;
        let var = deltas.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1) as f64;
        let want = t_quantile_oracle(level, (n - 1) as u32) * (var / n as f64).sqrt();
        let rel = ((half - want) / want).abs();
        worst = worst.max(rel);
        ensure!(rel <= 1e-6, "n={n} level={level}: half-width {half} vs oracle {want} (rel {rel:.2e})");
        ensure!((mean - m).abs() <= 1e-12 * m.abs().max(1.0), "n={n}: mean {mean} vs {m}");
    }
    let (mean, half) = mean_ci(&[0.25; 12], 0.999).map_err(err)?;
    ensure!(mean == 0.25 && half == 0.0, "zero variance gave ({mean}, {half})");

    let cell = Cell::new(AttributeId::Glasses, Demographic::ALL[0]);
    let spec = ProbeSpec { pairs: Vec::new(), confidence_level: 0.999, excluded_cells: Vec::new() };
    for t in 0..1000 {
        let n = rng.random_range(2..=20);
        let mut scores = BTreeMap::new();
        let mut faces = Vec::new();
        for i in 0..n {
            let (s, tf) = (
                ImageRef::of_bytes(format!("{t}-{i}-s").as_bytes()),
                ImageRef::of_bytes(format!("{t}-{i}-t").as_bytes()),
            );
            scores.insert(s.to_string(), rng.random_range(0.0..1.0));
            scores.insert(tf.to_string(), rng.random_range(0.0..1.0));
            faces.push((face(&format!("s{i}"), &s, None), face(&format!("t{i}"), &tf, Some(&format!("s{i}")))));
        }
        let pairs: Vec<(&FaceRecord, &FaceRecord)> = faces.iter().map(|(s, t)| (s, t)).collect();
        let shift = rng.random_range(-100.0..100.0);
        let base =
            concept_deltas(cell, &pairs, "eyeglasses", &ScoreTable { scores: scores.clone(), shift: 0.0 }, &spec, 2)
                .map_err(err)?;
        let moved = concept_deltas(cell, &pairs, "eyeglasses", &ScoreTable { scores, shift }, &spec, 2).map_err(err)?;
        ensure!(base.values.len() == n && moved.values.len() == n, "table {t}: dropped pairs");
        for (a, b) in base.values.iter().zip(&moved.values) {
            ensure!((a - b).abs() <= 1e-9, "table {t}: delta {a} became {b} under shift {shift}");
        }
        let (m0, h0) = mean_ci(&base.values, 0.999).map_err(err)?;
        let (m1, h1) = mean_ci(&moved.values, 0.999).map_err(err)?;
        ensure!(
            (m0 - m1).abs() <= 1e-9 && (h0 - h1).abs() <= 1e-9 * h0.max(1.0),
            "table {t}: interval moved under shift"
        );
    }
    Ok(format!("50 quantile cases (worst relative error {worst:.1e}), zero variance, 1000 shifted tables"))
}

// 8 ---------------------------------------------------------------------

const TABLE: [(&str, &str, [(f64, f64); 8]); 8] = [
    (
        "glasses",
        "eyeglasses",
        [
            (0.24, 0.072),
            (0.28, 0.065),
            (0.3, 0.026),
            (0.38, 0.06),
            (0.27, 0.027),
            (0.36, 0.075),
            (0.25, 0.046),
            (0.34, 0.062),
        ],
    ),
    (
        "sunglasses",
        "sunglass",
        [
            (0.68, 0.11),
            (0.44, 0.079),
            (0.52, 0.046),
            (0.39, 0.054),
            (0.47, 0.039),
            (0.4, 0.041),
            (0.51, 0.055),
            (0.44, 0.09),
        ],
    ),
    (
        "mustache",
        "beard",
        [
            (0.25, 0.054),
            (0.094, 0.09),
            (0.12, 0.027),
            (0.071, 0.037),
            (0.033, 0.02),
            (0.061, 0.036),
            (0.16, 0.04),
            (0.029, 0.054),
        ],
    ),
    (
        "facemask",
        "face",
        [
            (-0.22, 0.051),
            (-0.21, 0.048),
            (-0.091, 0.075),
            (-0.16, 0.035),
            (-0.17, 0.046),
            (-0.22, 0.028),
            (-0.11, 0.035),
            (-0.18, 0.065),
        ],
    ),
    (
        "shoulder_hair",
        "hair_long",
        [
            (0.11, 0.051),
            (0.061, 0.053),
            (0.1, 0.032),
            (0.05, 0.097),
            (0.098, 0.042),
            (0.12, 88.0),
            (0.089, 0.036),
            (-0.005, 7.5),
        ],
    ),
    (
        "thick_beard",
        "beard",
        [
            (0.56, 0.077),
            (0.69, 0.049),
            (0.32, 0.098),
            (0.5, 0.069),
            (0.13, 0.031),
            (0.41, 0.032),
            (0.31, 0.088),
            (0.4, 0.049),
        ],
    ),
    (
        "buzz_cut",
        "hair_long",
        [
            (-0.051, 0.045),
            (-0.12, 0.042),
            (-0.013, 0.029),
            (-0.11, 0.05),
            (-0.15, 0.91),
            (-0.17, 0.052),
            (-0.043, 0.04),
            (-0.21, 0.041),
        ],
    ),
    (
        "goatee",
        "beard",
        [
            (0.23, 0.59),
            (0.26, 0.044),
            (0.18, 0.097),
            (0.15, 0.062),
            (0.095, 0.069),
            (0.15, 0.04),
            (0.17, 0.055),
            (0.21, 0.12),
        ],
    ),
];

fn fixture_stats() -> Result<Vec<CellStat>, String> {
    let mut stats = Vec::new();
    for (attr, concept, values) in TABLE {
        let attribute: AttributeId = attr.parse().map_err(err)?;
        for (d, (mean, half)) in Demographic::ALL.iter().zip(values) {
            stats.push(CellStat {
                attribute,
                demographic: *d,
                concept: concept.into(),
                n: 100,
                mean_delta: Some(mean),
                ci_half_width: Some(half),
                excluded: false,
            });
        }
    }
    // A partly excluded, partly unmeasured row.
    stats.push(CellStat::excluded(AttributeId::Young, Demographic::ALL[2], "face"));
    stats.push(CellStat {
        attribute: AttributeId::Young,
        demographic: Demographic::ALL[7],
        concept: "face".into(),
        n: 40,
        mean_delta: Some(-0.012_34),
        ci_half_width: Some(0.000_456),
        excluded: false,
    });
    Ok(stats)
}

fn report_golden() -> Outcome {
    let golden = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let stats = fixture_stats()?;
    for (format, file) in [(ReportFormat::Markdown, "report.md"), (ReportFormat::Csv, "report.csv")] {
        let want = std::fs::read_to_string(golden.join(file)).map_err(err)?;
        let got = build_report(&stats, format);
        ensure!(got == want, "{file} differs:\n{got}");
    }
    let md = build_report(&stats, ReportFormat::Markdown);
    let header = md.lines().next().unwrap_or_default();
    ensure!(header == "| Attribute | Concept | AM | AF | BM | BF | IM | IF | WM | WF |", "header {header}");
    let first = md.lines().nth(2).unwrap_or_default();
    ensure!(first.starts_with("| glasses | eyeglasses | 0.24 ± 0.072 |"), "first row {first}");
    let empty = build_report(&[], ReportFormat::Markdown);
    ensure!(empty.lines().count() == 2, "empty report has {} lines", empty.lines().count());
    Ok("markdown and CSV match golden files; first cell 0.24 ± 0.072 under AM".into())
}
