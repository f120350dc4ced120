//! Serves any [`Backend`] over the wire protocol. Used by `cforge serve-mock`
//! and by the client conformance tests.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::protocol::{
    AgeResponse, AttributesResponse, ConceptsRequest, ConceptsResponse, EmbedResponse, ErrorBody, ErrorDetail,
    ImageOnly, ImageResponse, Txt2ImgRequest, CAPABILITIES,
};
use super::{AttributeQuery, Backend, BackendError, EditRequest};
use crate::domain::ImageRef;

pub struct ServerHandle {
    server: Arc<tiny_http::Server>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the server stops.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Bind `addr` and answer requests on `threads` worker threads.
pub fn serve(backend: Arc<dyn Backend>, addr: &str, threads: usize) -> std::io::Result<ServerHandle> {
    let server = tiny_http::Server::http(addr).map_err(std::io::Error::other)?;
    let local = server.server_addr().to_ip().ok_or_else(|| std::io::Error::other("not an IP listener"))?;
    let server = Arc::new(server);
    let workers = (0..threads.max(1))
        .map(|_| {
            let server = Arc::clone(&server);
            let backend = Arc::clone(&backend);
            std::thread::spawn(move || {
                while let Ok(mut request) = server.recv() {
                    let (status, body, content_type) = handle(&*backend, &mut request);
                    let header = tiny_http::Header::from_bytes("Content-Type", content_type).expect("static header");
                    let resp = tiny_http::Response::from_data(body).with_status_code(status).with_header(header);
                    if let Err(e) = request.respond(resp) {
                        log::debug!("client went away: {e}");
                    }
                }
            })
        })
        .collect();
    Ok(ServerHandle { server, workers, addr: local })
}

type Reply = (u16, Vec<u8>, &'static str);

fn json<T: Serialize>(value: &T) -> Reply {
    (200, serde_json::to_vec(value).expect("response serializes"), "application/json")
}

fn error(status: u16, code: &str, message: impl Into<String>) -> Reply {
    let body = ErrorBody { error: ErrorDetail { code: code.into(), message: message.into() } };
    (status, serde_json::to_vec(&body).expect("error serializes"), "application/json")
}

fn from_backend(e: BackendError) -> Reply {
    match e {
        BackendError::UnknownParent(r) => error(400, "unknown_parent", format!("unknown parent image {r}")),
        BackendError::UnknownImage(r) => error(400, "unknown_image", format!("unknown image {r}")),
        BackendError::UnknownConcept(c) => error(400, "unknown_concept", c),
        BackendError::Status { status, message } => error(status, "internal", message),
        BackendError::Unavailable(m) => error(503, "capability_unavailable", m),
        other => error(500, "internal", other.to_string()),
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, Reply> {
    serde_json::from_slice(body).map_err(|e| error(400, "malformed_request", e.to_string()))
}

fn handle(backend: &dyn Backend, request: &mut tiny_http::Request) -> Reply {
    let mut body = Vec::new();
    if let Err(e) = request.as_reader().read_to_end(&mut body) {
        return error(400, "malformed_request", e.to_string());
    }
    let method = request.method().clone();
    let url = request.url().to_string();
    let result = match (method, url.as_str()) {
        (tiny_http::Method::Get, "/v1/capabilities") => Ok(json(&CAPABILITIES)),
        (tiny_http::Method::Get, path) if path.starts_with("/v1/image/") => {
            match path["/v1/image/".len()..].parse::<ImageRef>() {
                Err(e) => Ok(error(400, "malformed_request", e.to_string())),
                Ok(r) => match backend.fetch_image(&r) {
                    Ok(bytes) => Ok((200, bytes, "image/png")),
                    Err(BackendError::UnknownImage(r)) => Ok(error(404, "unknown_image", format!("unknown image {r}"))),
                    Err(e) => Ok(from_backend(e)),
                },
            }
        }
        (tiny_http::Method::Post, path) => post(backend, path, &body),
        _ => Ok(error(404, "not_found", url)),
    };
    result.unwrap_or_else(|reply| reply)
}

fn post(backend: &dyn Backend, path: &str, body: &[u8]) -> Result<Reply, Reply> {
    let reply = match path {
        "/v1/txt2img" => {
            let req: Txt2ImgRequest = parse(body)?;
            backend.txt2img(&req.prompt, req.seed).map(|image_ref| json(&ImageResponse { image_ref }))
        }
        "/v1/edit" => {
            let req: EditRequest = parse(body)?;
            backend.edit(&req).map(|image_ref| json(&ImageResponse { image_ref }))
        }
        "/v1/embed" => {
            let req: ImageOnly = parse(body)?;
            backend.embed(&req.image_ref).map(|embedding| json(&EmbedResponse { embedding }))
        }
        "/v1/attributes" => {
            let req: AttributeQuery = parse(body)?;
            backend.query_attributes(&req).map(|response| json(&AttributesResponse { response }))
        }
        "/v1/age" => {
            let req: ImageOnly = parse(body)?;
            backend.age(&req.image_ref).map(|age| json(&AgeResponse { age }))
        }
        "/v1/concepts" => {
            let req: ConceptsRequest = parse(body)?;
            backend.concept_scores(&req.image_ref, &req.concepts).map(|scores| json(&ConceptsResponse { scores }))
        }
        _ => return Ok(error(404, "not_found", path.to_string())),
    };
    Ok(reply.unwrap_or_else(from_backend))
}
