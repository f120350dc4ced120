use std::ffi::{CStr, CString};
use std::sync::Once;

use pyo3::ffi::c_str;
use pyo3::prelude::*;

use cforge_py::cforge_py;

static REGISTER: Once = Once::new();

/// Run `code` with the extension module bound to `cf`.
fn with_module(code: &CStr) {
    REGISTER.call_once(|| pyo3::append_to_inittab!(cforge_py));
    Python::attach(|py| {
        let globals = pyo3::types::PyDict::new(py);
        globals.set_item("cf", py.import("cforge_py").unwrap()).unwrap();
        if let Err(e) = py.run(code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn filter_matrix_and_stats_from_python() {
    with_module(c_str!(
        r#"
src = cf.AttributeVector(30)
tf = cf.AttributeVector(31, {"glasses": True, "smile": True})
assert cf.rejection_reasons(src, tf, "glasses") == ["SPECIFICITY_VIOLATION(smile)"]
assert cf.rejection_reasons(src, tf, "glasses", distorted=True)[0] == "DISTORTED"
m = cf.TransitionMatrix.default()
assert m.get("facemask", "smile") == 0 and m.get("sunglasses", "glasses") == -2
assert cf.recall_threshold([3.0, 1.0, 2.0], 1.0) == 1.0
assert cf.recall_threshold([], 0.9) is None
mean, half = cf.mean_ci([0.0, 1.0], 0.999)
assert mean == 0.5 and 318 < half < 319
try:
    cf.AttributeVector(30, {"wings": True})
except ValueError:
    pass
else:
    raise AssertionError("unknown attribute accepted")
"#
    ));
}

#[test]
fn mock_pipeline_from_python() {
    let dir = tempfile::tempdir().unwrap();
    let code = format!(
        r#"
import json
cfg = json.dumps({{
    "generation": {{"identities_per_demographic": 1, "variations_per_identity": 1}},
    "training": {{"names_per_demographic": 2}},
    "filter": {{"require_identity_validation": False}},
}})
run = cf.Pipeline({dir:?}, cfg, mock=True, seed=9)
assert run.plan()["edit_jobs"] == 152
run.generate(); run.edit(); run.detect(); run.calibrate()
totals = run.filter()["totals"]
assert totals["candidates"] == 152
assert totals["accepted"] == len(run.accepted_pairs())
try:
    cf.Pipeline({dir:?}, '{{"recall_target": 2.0}}', mock=True)
except cf.ConfigError:
    pass
else:
    raise AssertionError("bad recall target accepted")
"#,
        dir = dir.path().display().to_string()
    );
    with_module(&CString::new(code).unwrap());
}
