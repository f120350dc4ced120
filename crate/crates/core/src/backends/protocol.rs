//! JSON bodies of the HTTP wire protocol and the golden conformance suite.
//!
//! | method | path                | request             | response            |
//! |--------|---------------------|---------------------|---------------------|
//! | POST   | `/v1/txt2img`       | [`Txt2ImgRequest`]  | [`ImageResponse`]   |
//! | POST   | `/v1/edit`          | `EditRequest`       | [`ImageResponse`]   |
//! | POST   | `/v1/embed`         | [`ImageOnly`]       | [`EmbedResponse`]   |
//! | POST   | `/v1/attributes`    | `AttributeQuery`    | [`AttributesResponse`] |
//! | POST   | `/v1/age`           | [`ImageOnly`]       | [`AgeResponse`]     |
//! | POST   | `/v1/concepts`      | [`ConceptsRequest`] | [`ConceptsResponse`] |
//! | GET    | `/v1/image/{ref}`   |                     | PNG bytes           |
//! | GET    | `/v1/capabilities`  |                     | JSON list of strings |
//!
//! Errors carry [`ErrorBody`] with 400 (malformed request), 404 (unknown
//! image or parent), 503 (capability unavailable) or 500.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::ImageRef;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Txt2ImgRequest {
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResponse {
    pub image_ref: ImageRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOnly {
    pub image_ref: ImageRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributesResponse {
    /// Raw detector output, parsed by the engine.
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeResponse {
    pub age: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptsRequest {
    pub image_ref: ImageRef,
    pub concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptsResponse {
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    /// One of `malformed_request`, `unknown_image`, `unknown_parent`,
    /// `unknown_concept`, `capability_unavailable`, `internal`.
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

pub const CAPABILITIES: [&str; 6] = ["txt2img", "edit", "embed", "attributes", "age", "concepts"];

/// One golden request/response case. `{{...}}` placeholders in `path` and
/// `body` are substituted from earlier cases' captured values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceCase {
    pub name: String,
    pub method: String,
    pub path: String,
    #[serde(default)]
    pub body: Option<serde_json::Value>,
    pub expect_status: u16,
    /// Top-level keys and their JSON types (`string`, `number`, `array`,
    /// `object`, `bytes`) the response must carry.
    #[serde(default)]
    pub expect_shape: BTreeMap<String, String>,
    /// Capture a response string field under a name for later cases.
    #[serde(default)]
    pub capture: BTreeMap<String, String>,
    /// Name of an earlier case whose response must be equal (determinism).
    #[serde(default)]
    pub same_as: Option<String>,
}

/// The shipped golden suite.
pub fn golden_cases() -> Vec<ConformanceCase> {
    serde_json::from_str(include_str!("conformance.json")).expect("bundled conformance suite parses")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Run the golden suite against a live endpoint.
pub fn run_conformance(base_url: &str, cases: &[ConformanceCase]) -> Vec<CaseOutcome> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(std::time::Duration::from_secs(600)))
        .build()
        .into();
    let base = base_url.trim_end_matches('/');
    let mut vars: BTreeMap<String, String> = BTreeMap::new();
    let mut bodies: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut out = Vec::new();
    for case in cases {
        let subst = |s: &str| {
            let mut s = s.to_string();
            for (k, v) in &vars {
                s = s.replace(&format!("{{{{{k}}}}}"), v);
            }
            s
        };
        let url = format!("{base}{}", subst(&case.path));
        let result = if case.method.eq_ignore_ascii_case("GET") {
            agent.get(&url).call()
        } else {
            let body = case.body.as_ref().map(|b| subst(&b.to_string())).unwrap_or_else(|| "{}".into());
            agent.post(&url).header("content-type", "application/json").send(body.as_bytes())
        };
        let outcome = match result {
            Err(e) => CaseOutcome { name: case.name.clone(), passed: false, detail: format!("transport: {e}") },
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let bytes = resp.body_mut().read_to_vec().unwrap_or_default();
                let mut problems = Vec::new();
                if status != case.expect_status {
                    problems.push(format!("status {status}, expected {}", case.expect_status));
                }
                let json: Option<serde_json::Value> = serde_json::from_slice(&bytes).ok();
                for (key, ty) in &case.expect_shape {
                    if ty == "bytes" {
                        if bytes.is_empty() {
                            problems.push("empty body".into());
                        }
                        continue;
                    }
                    let field = if key == "$" { json.as_ref() } else { json.as_ref().and_then(|j| j.get(key)) };
                    let ok = match (ty.as_str(), field) {
                        ("string", Some(v)) => v.is_string(),
                        ("number", Some(v)) => v.is_number(),
                        ("array", Some(v)) => v.is_array(),
                        ("object", Some(v)) => v.is_object(),
                        _ => false,
                    };
                    if !ok {
                        problems.push(format!("field `{key}` is not a {ty}"));
                    }
                }
                for (var, key) in &case.capture {
                    match json.as_ref().and_then(|j| j.get(key)).and_then(|v| v.as_str()) {
                        Some(v) => {
                            vars.insert(var.clone(), v.to_string());
                        }
                        None => problems.push(format!("cannot capture `{key}`")),
                    }
                }
                if let Some(other) = &case.same_as {
                    if bodies.get(other) != Some(&bytes) {
                        problems.push(format!("response differs from `{other}`"));
                    }
                }
                bodies.insert(case.name.clone(), bytes);
                CaseOutcome { name: case.name.clone(), passed: problems.is_empty(), detail: problems.join("; ") }
            }
        };
        out.push(outcome);
    }
    out
}
