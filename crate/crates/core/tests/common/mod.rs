//! Shared helpers for the integration tests.
#![allow(dead_code)]

use std::path::Path;

use cforge::backends::Latent;
use cforge::cli::{CliError, Engine, EngineConfig, EngineOptions};
use cforge::domain::{AttributeId, FaceRecord};
use cforge::filter::FilterConfig;
use cforge::specmatrix::check_specificity;

/// Mock-run config: `ids` identities per demographic, `vars` variations each.
pub fn mock_config(ids: usize, vars: u32, seed: u64) -> EngineConfig {
    let mut cfg = EngineConfig { seed: Some(seed), ..EngineConfig::default() };
    cfg.generation.identities_per_demographic = ids;
    cfg.generation.variations_per_identity = vars;
    cfg.filter.require_identity_validation = false;
    cfg
}

pub fn mock_options() -> EngineOptions {
    EngineOptions { mock: true, jobs: 4, strict: true }
}

pub fn open(dir: &Path, cfg: &EngineConfig) -> Engine {
    Engine::open(dir, cfg.clone(), &mock_options()).expect("open engine")
}

/// Generation through filtering, stopping at the first error.
pub fn run_chain(engine: &mut Engine) -> Result<(), CliError> {
    engine.generate()?;
    engine.edit()?;
    engine.detect()?;
    engine.calibrate()?;
    engine.filter()?;
    Ok(())
}

fn latent_of(engine: &Engine, face: &FaceRecord) -> Latent {
    engine
        .mock
        .as_ref()
        .expect("mock run")
        .latent(&face.image_ref)
        .unwrap_or_else(|| panic!("no latent for {}", face.face_id))
}

/// Ways an accepted pair fails against ground truth, empty when it holds.
pub fn ground_truth_problems(src: &Latent, tf: &Latent, applied: AttributeId, cfg: &FilterConfig) -> Vec<String> {
    let mut out = Vec::new();
    if tf.distorted {
        out.push("distorted".to_string());
    }
    if tf.identity != src.identity {
        out.push("identity changed".to_string());
    }
    let (s, t) = (&src.attributes, &tf.attributes);
    let delta = i64::from(t.age_years) - i64::from(s.age_years);
    match applied {
        AttributeId::Old | AttributeId::Young => {
            let want = if applied == AttributeId::Old { delta } else { -delta };
            if want < i64::from(cfg.age_change_min) {
                out.push(format!("age change {delta}"));
            }
            for a in AttributeId::NON_AGE {
                if s.get(a) != t.get(a) {
                    out.push(format!("{a} changed"));
                }
            }
        }
        _ => {
            if s.get(applied) || !t.get(applied) {
                out.push(format!("{applied} not added"));
            }
            for a in check_specificity(applied, s, t, &cfg.matrix).expect("row") {
                out.push(format!("{a} violated"));
            }
            if delta.unsigned_abs() >= u64::from(cfg.age_drift_max) {
                out.push(format!("age drift {delta}"));
            }
        }
    }
    out
}

/// (accepted pairs, violations) for every accepted verdict in the run.
pub fn audit_accepted(engine: &Engine) -> (usize, Vec<String>) {
    let state = engine.manifest.state();
    let mut accepted = 0;
    let mut problems = Vec::new();
    for v in state.verdicts.values().filter(|v| v.accepted) {
        accepted += 1;
        let tf = &state.faces[&v.transformed_face_id];
        let src = &state.faces[tf.parent_face_id.as_ref().expect("parent")];
        let applied = tf.applied_attribute.expect("applied attribute");
        for p in ground_truth_problems(&latent_of(engine, src), &latent_of(engine, tf), applied, &engine.config.filter)
        {
            problems.push(format!("{}: {p}", tf.face_id));
        }
    }
    (accepted, problems)
}
