use std::collections::BTreeMap;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::protocol::{
    AgeResponse, AttributesResponse, ConceptsRequest, ConceptsResponse, EmbedResponse, ErrorBody, ImageOnly,
    ImageResponse, Txt2ImgRequest,
};
use super::{AttributeQuery, Backend, BackendEndpoint, BackendError, EditRequest};
use crate::domain::ImageRef;

/// Blocking JSON client for one endpoint. Wrap in [`super::Resilient`] for
/// retries and the in-flight bound.
pub struct HttpBackend {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: &BackendEndpoint) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(endpoint.timeout_ms)))
            .build()
            .into();
        HttpBackend { base_url: endpoint.base_url.trim_end_matches('/').to_string(), agent }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
        context: Option<&ImageRef>,
    ) -> Result<Resp, BackendError> {
        let url = format!("{}{path}", self.base_url);
        let resp =
            self.agent.post(&url).send_json(body).map_err(|e| BackendError::Unavailable(format!("{url}: {e}")))?;
        decode(resp, context)
    }
}

fn decode<T: DeserializeOwned>(
    mut resp: ureq::http::Response<ureq::Body>,
    context: Option<&ImageRef>,
) -> Result<T, BackendError> {
    let status = resp.status().as_u16();
    let bytes = resp.body_mut().read_to_vec().map_err(|e| BackendError::Unavailable(format!("reading body: {e}")))?;
    if (200..300).contains(&status) {
        return serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::Status { status, message: format!("invalid response body: {e}") });
    }
    Err(error_from(status, &bytes, context))
}

fn error_from(status: u16, bytes: &[u8], context: Option<&ImageRef>) -> BackendError {
    let Ok(body) = serde_json::from_slice::<ErrorBody>(bytes) else {
        return BackendError::Status { status, message: String::from_utf8_lossy(bytes).into_owned() };
    };
    let detail = body.error;
    match (detail.code.as_str(), context) {
        ("unknown_parent", Some(r)) => BackendError::UnknownParent(r.clone()),
        ("unknown_image", Some(r)) => BackendError::UnknownImage(r.clone()),
        ("unknown_concept", _) => BackendError::UnknownConcept(detail.message),
        _ => BackendError::Status { status, message: format!("{}: {}", detail.code, detail.message) },
    }
}

impl Backend for HttpBackend {
    fn txt2img(&self, prompt: &str, seed: u64) -> Result<ImageRef, BackendError> {
        let r: ImageResponse = self.post("/v1/txt2img", &Txt2ImgRequest { prompt: prompt.into(), seed }, None)?;
        Ok(r.image_ref)
    }

    fn edit(&self, request: &EditRequest) -> Result<ImageRef, BackendError> {
        let r: ImageResponse = self.post("/v1/edit", request, Some(&request.parent_image_ref))?;
        Ok(r.image_ref)
    }

    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        let r: EmbedResponse = self.post("/v1/embed", &ImageOnly { image_ref: image.clone() }, Some(image))?;
        Ok(r.embedding)
    }

    fn query_attributes(&self, query: &AttributeQuery) -> Result<String, BackendError> {
        let r: AttributesResponse = self.post("/v1/attributes", query, Some(&query.transformed_ref))?;
        Ok(r.response)
    }

    fn age(&self, image: &ImageRef) -> Result<i64, BackendError> {
        let r: AgeResponse = self.post("/v1/age", &ImageOnly { image_ref: image.clone() }, Some(image))?;
        Ok(r.age)
    }

    fn concept_scores(&self, image: &ImageRef, concepts: &[String]) -> Result<BTreeMap<String, f64>, BackendError> {
        let req = ConceptsRequest { image_ref: image.clone(), concepts: concepts.to_vec() };
        let r: ConceptsResponse = self.post("/v1/concepts", &req, Some(image))?;
        Ok(r.scores)
    }

    fn fetch_image(&self, image: &ImageRef) -> Result<Vec<u8>, BackendError> {
        let url = format!("{}/v1/image/{image}", self.base_url);
        let mut resp = self.agent.get(&url).call().map_err(|e| BackendError::Unavailable(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| BackendError::Unavailable(format!("reading body: {e}")))?;
        if status == 404 {
            return Err(BackendError::UnknownImage(image.clone()));
        }
        if !(200..300).contains(&status) {
            return Err(error_from(status, &bytes, Some(image)));
        }
        if &ImageRef::of_bytes(&bytes) != image {
            return Err(BackendError::Status { status, message: "image bytes do not match digest".into() });
        }
        Ok(bytes)
    }

    fn version(&self) -> String {
        format!("http:{}", self.base_url)
    }
}
