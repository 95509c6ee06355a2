//! Ways of getting a wire response for a wire request: over HTTP, from a
//! fixture directory, from a previous run's journal, or by recording another
//! transport into a fixture directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use base64::engine::general_purpose::STANDARD as B64;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::journal::read_journal;
use super::BackendKind;
use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// JSON text with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    fn sorted(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                let mut out = Map::new();
                for k in keys {
                    out.insert(k.clone(), sorted(&m[k]));
                }
                Value::Object(out)
            }
            Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    sorted(v).to_string()
}

/// A backend call before transport encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct WireRequest {
    pub kind: BackendKind,
    pub images: Vec<Vec<u8>>,
    pub params: Map<String, Value>,
}

impl WireRequest {
    pub fn new(kind: BackendKind, images: Vec<Vec<u8>>, params: Value) -> Self {
        let params = match params {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => panic!("wire params must be an object, got {other}"),
        };
        WireRequest { kind, images, params }
    }

    pub fn input_digests(&self) -> Vec<String> {
        self.images.iter().map(|i| sha256_hex(i)).collect()
    }

    /// SHA-256 over the kind, the input image digests and the canonical
    /// parameters. Independent of file paths.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"mugshot-wire-v1\n");
        h.update(self.kind.key().as_bytes());
        h.update(b"\n");
        for d in self.input_digests() {
            h.update(d.as_bytes());
            h.update(b"\n");
        }
        h.update(canonical_json(&Value::Object(self.params.clone())).as_bytes());
        hex::encode(h.finalize())
    }

    /// HTTP JSON body: parameters plus the base64 image(s).
    pub fn body(&self) -> Value {
        let mut m = self.params.clone();
        let encoded: Vec<Value> = self.images.iter().map(|i| Value::String(B64.encode(i))).collect();
        if self.kind == BackendKind::Generate {
            m.insert("images_b64".into(), Value::Array(encoded));
        } else if let Some(first) = encoded.into_iter().next() {
            m.insert("image_b64".into(), first);
        }
        Value::Object(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireResponse {
    pub body: Value,
    /// Where `image_file(s)` references in the body are resolved.
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    /// Worth retrying: connection failure, timeout, server error.
    Unreachable(String),
    /// The backend answered with something outside the contract.
    Protocol(String),
    /// No response exists for this request (fixture or replay miss).
    Missing(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &WireRequest) -> std::result::Result<WireResponse, TransportError>;

    /// Human-readable target for error messages.
    fn target(&self) -> String;
}

/// Extracts response images, inline (`image_b64`, `images_b64`) or by file
/// reference (`image_file`, `image_files`).
pub fn response_images(resp: &WireResponse) -> std::result::Result<Vec<Vec<u8>>, String> {
    let body = resp.body.as_object().ok_or("response is not a JSON object")?;
    let as_list = |single: &str, many: &str| -> Option<std::result::Result<Vec<String>, String>> {
        if let Some(v) = body.get(single) {
            return Some(v.as_str().map(|s| vec![s.to_owned()]).ok_or(format!("`{single}` must be a string")));
        }
        body.get(many).map(|v| {
            v.as_array()
                .ok_or(format!("`{many}` must be an array"))?
                .iter()
                .map(|x| x.as_str().map(str::to_owned).ok_or(format!("`{many}` entries must be strings")))
                .collect()
        })
    };
    if let Some(list) = as_list("image_b64", "images_b64") {
        return list?
            .iter()
            .map(|s| B64.decode(s).map_err(|e| format!("invalid base64 image: {e}")))
            .collect();
    }
    if let Some(list) = as_list("image_file", "image_files") {
        let base = resp.base_dir.as_deref().unwrap_or(Path::new("."));
        return list?
            .iter()
            .map(|f| std::fs::read(base.join(f)).map_err(|e| format!("cannot read {f}: {e}")))
            .collect();
    }
    Err("response carries no images".into())
}

pub struct HttpTransport {
    base_url: String,
    client: reqwest::blocking::Client,
    bearer_token: Option<String>,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, timeout: Duration, bearer_token: Option<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(HttpTransport {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            client,
            bearer_token,
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &WireRequest) -> std::result::Result<WireResponse, TransportError> {
        let url = format!("{}/{}", self.base_url, request.kind.key());
        let mut req = self.client.post(&url).json(&request.body());
        if let Some(token) = &self.bearer_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| TransportError::Unreachable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(TransportError::Unreachable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(TransportError::Protocol(format!("HTTP {status}")));
        }
        let body: Value = resp
            .json()
            .map_err(|e| TransportError::Protocol(format!("invalid JSON body: {e}")))?;
        Ok(WireResponse { body, base_dir: None })
    }

    fn target(&self) -> String {
        self.base_url.clone()
    }
}

/// Canned responses stored as `<dir>/<kind>/<digest>.json`.
pub struct FixtureTransport {
    dir: PathBuf,
}

impl FixtureTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureTransport { dir: dir.into() }
    }

    pub fn path_for(&self, request: &WireRequest) -> PathBuf {
        self.dir
            .join(request.kind.key())
            .join(format!("{}.json", request.digest()))
    }
}

impl Transport for FixtureTransport {
    fn send(&self, request: &WireRequest) -> std::result::Result<WireResponse, TransportError> {
        let path = self.path_for(request);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| TransportError::Missing(format!("no fixture at {}", path.display())))?;
        let body = serde_json::from_str(&text)
            .map_err(|e| TransportError::Protocol(format!("fixture {} is not JSON: {e}", path.display())))?;
        Ok(WireResponse {
            body,
            base_dir: Some(self.dir.clone()),
        })
    }

    fn target(&self) -> String {
        format!("fixtures:{}", self.dir.display())
    }
}

/// Answers from the successful backend calls of a journal.
pub struct ReplayTransport {
    responses: HashMap<String, Value>,
    base_dir: PathBuf,
    source: PathBuf,
}

impl ReplayTransport {
    pub fn from_journal(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut responses = HashMap::new();
        for r in read_journal(path)? {
            if let (true, false, Some(resp)) = (r.ok, r.native, r.response) {
                responses.insert(r.request_digest, resp);
            }
        }
        Ok(ReplayTransport {
            responses,
            base_dir: path.parent().unwrap_or(Path::new(".")).to_owned(),
            source: path.to_owned(),
        })
    }
}

impl Transport for ReplayTransport {
    fn send(&self, request: &WireRequest) -> std::result::Result<WireResponse, TransportError> {
        let digest = request.digest();
        self.responses
            .get(&digest)
            .map(|body| WireResponse {
                body: body.clone(),
                base_dir: Some(self.base_dir.clone()),
            })
            .ok_or_else(|| TransportError::Missing(format!("request {digest} not in journal")))
    }

    fn target(&self) -> String {
        format!("replay:{}", self.source.display())
    }
}

/// Forwards to another transport and stores every successful answer as a
/// fixture, images as sibling PNG files.
pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    dir: PathBuf,
}

impl RecordingTransport {
    pub fn new(inner: Arc<dyn Transport>, dir: impl Into<PathBuf>) -> Self {
        RecordingTransport { inner, dir: dir.into() }
    }

    fn store(&self, request: &WireRequest, resp: &WireResponse) -> std::io::Result<()> {
        let digest = request.digest();
        let kind_dir = self.dir.join(request.kind.key());
        std::fs::create_dir_all(&kind_dir)?;
        let mut body = resp.body.clone();
        if let Ok(images) = response_images(resp) {
            if let Some(m) = body.as_object_mut() {
                for key in ["image_b64", "images_b64", "image_file", "image_files"] {
                    m.remove(key);
                }
                let mut files = Vec::new();
                for (i, img) in images.iter().enumerate() {
                    let name = format!("{digest}-{i}.png");
                    std::fs::write(kind_dir.join(&name), img)?;
                    files.push(Value::String(format!("{}/{name}", request.kind.key())));
                }
                m.insert("image_files".into(), Value::Array(files));
            }
        }
        std::fs::write(
            kind_dir.join(format!("{digest}.json")),
            serde_json::to_vec_pretty(&body).expect("JSON value serializes"),
        )
    }
}

impl Transport for RecordingTransport {
    fn send(&self, request: &WireRequest) -> std::result::Result<WireResponse, TransportError> {
        let resp = self.inner.send(request)?;
        self.store(request, &resp)
            .map_err(|e| TransportError::Unreachable(format!("cannot record fixture: {e}")))?;
        Ok(resp)
    }

    fn target(&self) -> String {
        format!("record:{} -> {}", self.inner.target(), self.dir.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn digest_ignores_key_order_and_tracks_content() {
        let a = WireRequest::new(BackendKind::Embed, vec![vec![1, 2, 3]], json!({"a": 1, "b": [1, {"y": 2, "x": 1}]}));
        let mut b = a.clone();
        b.params = serde_json::from_str(r#"{"b":[1,{"x":1,"y":2}],"a":1}"#).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = WireRequest::new(BackendKind::Embed, vec![vec![1, 2, 4]], Value::Object(a.params.clone()));
        assert_ne!(a.digest(), c.digest());
        let d = WireRequest::new(BackendKind::Enhance, a.images.clone(), Value::Object(a.params.clone()));
        assert_ne!(a.digest(), d.digest());
    }

    #[test]
    fn body_shapes() {
        let r = WireRequest::new(BackendKind::Describe, vec![vec![0xff]], json!({"questions": ["q"]}));
        assert_eq!(r.body(), json!({"questions": ["q"], "image_b64": "/w=="}));
        let g = WireRequest::new(BackendKind::Generate, vec![vec![1], vec![2]], json!({"count": 2}));
        assert_eq!(g.body(), json!({"count": 2, "images_b64": ["AQ==", "Ag=="]}));
    }

    struct Canned;

    impl Transport for Canned {
        fn send(&self, _: &WireRequest) -> std::result::Result<WireResponse, TransportError> {
            Ok(WireResponse {
                body: json!({"images_b64": [B64.encode([9u8, 9]), B64.encode([7u8])]}),
                base_dir: None,
            })
        }

        fn target(&self) -> String {
            "canned".into()
        }
    }

    #[test]
    fn recorded_fixtures_replay() {
        let dir = tempfile::tempdir().unwrap();
        let rec = RecordingTransport::new(Arc::new(Canned), dir.path());
        let req = WireRequest::new(BackendKind::Generate, vec![vec![1]], json!({"count": 2}));
        let live = rec.send(&req).unwrap();
        let fixture = FixtureTransport::new(dir.path());
        let replayed = fixture.send(&req).unwrap();
        assert_eq!(response_images(&live).unwrap(), response_images(&replayed).unwrap());
        let other = WireRequest::new(BackendKind::Generate, vec![vec![2]], json!({"count": 2}));
        assert!(matches!(fixture.send(&other), Err(TransportError::Missing(_))));
    }
}
