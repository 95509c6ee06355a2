//! Client contract for the external models: enhancers, describers,
//! generators and embedders.
//!
//! Every call becomes a [`WireRequest`] handed to a [`Transport`]. HTTP
//! endpoints take `POST /<kind>` with a JSON body; fixture directories answer
//! from `<dir>/<kind>/<digest>.json`, where the digest covers the input image
//! bytes and the canonical request parameters. Total-variation enhancement
//! never leaves the process.
//!
//! Each call appends one record to the run [`Journal`] once it has
//! finished, however many attempts it took.

pub mod journal;
pub mod transport;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use journal::{read_journal, Journal, JournalRecord};
pub use transport::{
    canonical_json, response_images, sha256_hex, FixtureTransport, HttpTransport, RecordingTransport,
    ReplayTransport, Transport, TransportError, WireRequest, WireResponse,
};

use crate::attribute::{describe_from_answers, AttributeDescription, Provenance, SynonymTable};
use crate::error::{Error, Result};
use crate::imageio;
use crate::prompt::{PromptSpec, VlmQuestion};
use crate::reid::Embedding;
use crate::tv::{denoise_rgb, DenoiseParams};

pub const DEFAULT_SAMPLE_STEPS: u32 = 50;
pub const DEFAULT_STYLE_STRENGTH: u32 = 20;
pub const DEFAULT_MAX_IMAGE_BYTES: usize = 8 * 1024 * 1024;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Enhance,
    Describe,
    Generate,
    Embed,
}

impl BackendKind {
    pub const ALL: [BackendKind; 4] = [
        BackendKind::Enhance,
        BackendKind::Describe,
        BackendKind::Generate,
        BackendKind::Embed,
    ];

    pub fn key(self) -> &'static str {
        match self {
            BackendKind::Enhance => "enhance",
            BackendKind::Describe => "describe",
            BackendKind::Generate => "generate",
            BackendKind::Embed => "embed",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnhanceMethod {
    Maxim,
    Srgan,
    #[serde(alias = "tvd")]
    TvDenoise,
}

impl EnhanceMethod {
    pub fn key(self) -> &'static str {
        match self {
            EnhanceMethod::Maxim => "maxim",
            EnhanceMethod::Srgan => "srgan",
            EnhanceMethod::TvDenoise => "tvdenoise",
        }
    }

    pub fn provenance(self) -> Provenance {
        match self {
            EnhanceMethod::Maxim => Provenance::Maxim,
            EnhanceMethod::Srgan => Provenance::Srgan,
            EnhanceMethod::TvDenoise => Provenance::TvDenoise,
        }
    }
}

impl FromStr for EnhanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maxim" => Ok(EnhanceMethod::Maxim),
            "srgan" => Ok(EnhanceMethod::Srgan),
            "tvdenoise" | "tvd" | "tv" => Ok(EnhanceMethod::TvDenoise),
            _ => Err(Error::Config(format!("unknown enhancement method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EndpointTarget {
    Url(String),
    Fixtures(PathBuf),
    /// Answers recorded in a previous run's journal.
    Replay(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendEndpoint {
    pub kind: BackendKind,
    pub target: EndpointTarget,
    pub timeout: Duration,
    pub max_retries: u32,
    pub bearer_token: Option<String>,
    pub max_in_flight: usize,
}

impl BackendEndpoint {
    pub fn new(kind: BackendKind, target: EndpointTarget) -> Self {
        BackendEndpoint {
            kind,
            target,
            timeout: Duration::from_secs(60),
            max_retries: 2,
            bearer_token: None,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }

    pub fn fixtures(kind: BackendKind, dir: impl Into<PathBuf>) -> Self {
        BackendEndpoint::new(kind, EndpointTarget::Fixtures(dir.into()))
    }

    pub fn url(kind: BackendKind, url: impl Into<String>) -> Self {
        BackendEndpoint::new(kind, EndpointTarget::Url(url.into()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout.is_zero() {
            return Err(Error::Config(format!("{} endpoint: timeout must be > 0", self.kind)));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config(format!("{} endpoint: in-flight cap must be >= 1", self.kind)));
        }
        if let EndpointTarget::Url(u) = &self.target {
            if !(u.starts_with("http://") || u.starts_with("https://")) {
                return Err(Error::Config(format!("{} endpoint: `{u}` is not an http(s) URL", self.kind)));
            }
        }
        Ok(())
    }

    pub fn transport(&self) -> Result<Arc<dyn Transport>> {
        self.validate()?;
        Ok(match &self.target {
            EndpointTarget::Url(u) => Arc::new(HttpTransport::new(u.clone(), self.timeout, self.bearer_token.clone())?),
            EndpointTarget::Fixtures(d) => Arc::new(FixtureTransport::new(d.clone())),
            EndpointTarget::Replay(j) => Arc::new(ReplayTransport::from_journal(j)?),
        })
    }
}

/// Endpoint section of a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    /// Journal of an earlier run to answer from.
    #[serde(default)]
    pub replay: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub bearer_token: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            url: None,
            fixtures: None,
            replay: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            bearer_token: None,
            max_in_flight: default_in_flight(),
        }
    }
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    2
}

fn default_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

impl EndpointConfig {
    pub fn url(url: impl Into<String>) -> Self {
        EndpointConfig {
            url: Some(url.into()),
            ..EndpointConfig::default()
        }
    }

    pub fn fixtures(dir: impl Into<PathBuf>) -> Self {
        EndpointConfig {
            fixtures: Some(dir.into()),
            ..EndpointConfig::default()
        }
    }

    pub fn replay(journal: impl Into<PathBuf>) -> Self {
        EndpointConfig {
            replay: Some(journal.into()),
            ..EndpointConfig::default()
        }
    }

    /// Exactly one of `url`, `fixtures` and `replay` must be set.
    pub fn to_endpoint(&self, kind: BackendKind) -> Result<BackendEndpoint> {
        let target = match (&self.url, &self.fixtures, &self.replay) {
            (Some(u), None, None) => EndpointTarget::Url(u.clone()),
            (None, Some(d), None) => EndpointTarget::Fixtures(d.clone()),
            (None, None, Some(j)) => EndpointTarget::Replay(j.clone()),
            _ => {
                return Err(Error::Config(format!(
                    "{kind} endpoint: set exactly one of `url`, `fixtures` and `replay`"
                )))
            }
        };
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(Error::Config(format!("{kind} endpoint: timeout must be > 0")));
        }
        let ep = BackendEndpoint {
            kind,
            target,
            timeout: Duration::from_secs_f64(self.timeout_secs),
            max_retries: self.max_retries,
            bearer_token: self.bearer_token.clone(),
            max_in_flight: self.max_in_flight,
        };
        ep.validate()?;
        Ok(ep)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub input_images: Vec<PathBuf>,
    pub prompt: PromptSpec,
    pub sample_steps: u32,
    pub style_strength_percent: u32,
    pub count: usize,
    /// File name prefix for the generated images; not sent.
    pub label: String,
}

impl GenerationRequest {
    pub fn new(input_images: Vec<PathBuf>, prompt: PromptSpec, count: usize) -> Self {
        GenerationRequest {
            input_images,
            prompt,
            sample_steps: DEFAULT_SAMPLE_STEPS,
            style_strength_percent: DEFAULT_STYLE_STRENGTH,
            count,
            label: "gen".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_images.is_empty() {
            return Err(Error::Validation("generation needs at least one input image".into()));
        }
        if self.count == 0 {
            return Err(Error::Validation("generation count must be >= 1".into()));
        }
        if self.sample_steps == 0 {
            return Err(Error::Validation("sample_steps must be >= 1".into()));
        }
        if self.style_strength_percent > 100 {
            return Err(Error::Validation(format!(
                "style strength {}% is outside 0..=100",
                self.style_strength_percent
            )));
        }
        Ok(())
    }

    /// Parameters as sent on the wire (images travel separately).
    pub fn wire_params(&self) -> Value {
        json!({
            "prompt": self.prompt.render_positive(),
            "negative_prompt": self.prompt.render_negative(),
            "sample_steps": self.sample_steps,
            "style_strength": self.style_strength_percent,
            "count": self.count,
        })
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

struct Route {
    endpoint: BackendEndpoint,
    transport: Arc<dyn Transport>,
    slots: Semaphore,
}

/// Outcome of one post-processed call, ready for the journal.
struct Finished<T> {
    value: T,
    response: Value,
    output_digests: Vec<String>,
}

pub struct ModelGateway {
    routes: BTreeMap<BackendKind, Route>,
    work_dir: PathBuf,
    journal: Option<Journal>,
    denoise: DenoiseParams,
    synonyms: SynonymTable,
    max_image_bytes: usize,
    embed_dim: Mutex<Option<usize>>,
    retry_backoff: Duration,
}

impl ModelGateway {
    /// Output images are written below `work_dir`.
    pub fn new(work_dir: impl Into<PathBuf>) -> Self {
        ModelGateway {
            routes: BTreeMap::new(),
            work_dir: work_dir.into(),
            journal: None,
            denoise: DenoiseParams::default(),
            synonyms: SynonymTable::default(),
            max_image_bytes: DEFAULT_MAX_IMAGE_BYTES,
            embed_dim: Mutex::new(None),
            retry_backoff: Duration::from_millis(25),
        }
    }

    pub fn with_endpoint(mut self, endpoint: BackendEndpoint) -> Result<Self> {
        let transport = endpoint.transport()?;
        self = self.with_transport(endpoint, transport)?;
        Ok(self)
    }

    /// Routes `endpoint.kind` through a caller-supplied transport.
    pub fn with_transport(mut self, endpoint: BackendEndpoint, transport: Arc<dyn Transport>) -> Result<Self> {
        endpoint.validate()?;
        let slots = Semaphore::new(endpoint.max_in_flight);
        self.routes.insert(
            endpoint.kind,
            Route {
                endpoint,
                transport,
                slots,
            },
        );
        Ok(self)
    }

    pub fn with_journal(mut self, journal: Journal) -> Self {
        self.journal = Some(journal);
        self
    }

    pub fn with_denoise(mut self, params: DenoiseParams) -> Result<Self> {
        params.validate()?;
        self.denoise = params;
        Ok(self)
    }

    pub fn with_synonyms(mut self, synonyms: SynonymTable) -> Self {
        self.synonyms = synonyms;
        self
    }

    pub fn with_max_image_bytes(mut self, bytes: usize) -> Self {
        self.max_image_bytes = bytes;
        self
    }

    pub fn with_retry_backoff(mut self, backoff: Duration) -> Self {
        self.retry_backoff = backoff;
        self
    }

    pub fn work_dir(&self) -> &Path {
        &self.work_dir
    }

    pub fn journal(&self) -> Option<&Journal> {
        self.journal.as_ref()
    }

    pub fn has_endpoint(&self, kind: BackendKind) -> bool {
        self.routes.contains_key(&kind)
    }

    fn route(&self, kind: BackendKind) -> Result<&Route> {
        self.routes
            .get(&kind)
            .ok_or_else(|| Error::Config(format!("no {kind} endpoint configured")))
    }

    fn read_input(&self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() > self.max_image_bytes {
            return Err(Error::Validation(format!(
                "{} is {} bytes, above the {} byte cap",
                path.display(),
                bytes.len(),
                self.max_image_bytes
            )));
        }
        Ok(bytes)
    }

    /// Sends with retries on transient failures; `max_retries + 1` attempts
    /// at most.
    fn exchange(&self, route: &Route, request: &WireRequest) -> (std::result::Result<WireResponse, Error>, u32) {
        let _permit = route.slots.acquire();
        let endpoint = route.transport.target();
        let attempts_allowed = route.endpoint.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts_allowed {
            match route.transport.send(request) {
                Ok(resp) => return (Ok(resp), attempt),
                Err(TransportError::Unreachable(reason)) => {
                    last = reason;
                    if attempt < attempts_allowed {
                        std::thread::sleep(self.retry_backoff * attempt);
                    }
                }
                Err(TransportError::Protocol(reason)) => {
                    return (Err(Error::Protocol { endpoint, reason }), attempt)
                }
                Err(TransportError::Missing(reason)) => {
                    return (Err(Error::Gateway { endpoint, reason }), attempt)
                }
            }
        }
        (
            Err(Error::Gateway {
                endpoint,
                reason: format!("unreachable after {attempts_allowed} attempts: {last}"),
            }),
            attempts_allowed,
        )
    }

    fn protocol(&self, kind: BackendKind, reason: impl Into<String>) -> Error {
        let endpoint = self
            .routes
            .get(&kind)
            .map_or_else(|| kind.key().to_owned(), |r| r.transport.target());
        Error::Protocol {
            endpoint,
            reason: reason.into(),
        }
    }

    /// Runs a backend call, post-processes the answer and journals it.
    fn call<T>(
        &self,
        request: WireRequest,
        method: &str,
        finish: impl FnOnce(WireResponse) -> Result<Finished<T>>,
    ) -> Result<T> {
        let route = self.route(request.kind)?;
        let (resp, attempts) = self.exchange(route, &request);
        let outcome = resp.and_then(finish);
        let mut record = JournalRecord {
            seq: 0,
            unix_time: 0.0,
            kind: request.kind,
            method: method.to_owned(),
            native: false,
            endpoint: route.transport.target(),
            request_digest: request.digest(),
            input_digests: request.input_digests(),
            params: Value::Object(request.params.clone()),
            attempts,
            ok: outcome.is_ok(),
            error: None,
            output_digests: Vec::new(),
            response: None,
        };
        match outcome {
            Ok(f) => {
                record.output_digests = f.output_digests;
                record.response = Some(f.response);
                self.log(record)?;
                Ok(f.value)
            }
            Err(e) => {
                record.error = Some(e.to_string());
                self.log(record)?;
                Err(e)
            }
        }
    }

    fn log(&self, record: JournalRecord) -> Result<()> {
        match &self.journal {
            Some(j) => j.append(record),
            None => Ok(()),
        }
    }

    /// Path as recorded in the journal: relative to its directory when
    /// possible.
    fn journal_path(&self, path: &Path) -> String {
        let base = self.journal.as_ref().map(|j| j.base_dir().to_owned());
        let rel = base.as_deref().and_then(|b| path.strip_prefix(b).ok()).unwrap_or(path);
        rel.to_string_lossy().replace('\\', "/")
    }

    fn write_output(&self, sub: &str, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let dir = self.work_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn check_output_image(&self, kind: BackendKind, bytes: &[u8]) -> Result<()> {
        if bytes.len() > self.max_image_bytes {
            return Err(self.protocol(kind, format!("returned image of {} bytes exceeds cap", bytes.len())));
        }
        imageio::decode_rgb(bytes).map_err(|e| self.protocol(kind, format!("returned image does not decode: {e}")))?;
        Ok(())
    }

    /// Enhances an image and returns the path of the result. Total-variation
    /// denoising runs in-process.
    pub fn enhance(&self, image: &Path, method: EnhanceMethod) -> Result<PathBuf> {
        let input = self.read_input(image)?;
        let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let name = format!("{stem}-{}.{}.png", &sha256_hex(&input)[..12], method.key());
        if method == EnhanceMethod::TvDenoise {
            return self.enhance_native(image, input, name);
        }
        let request = WireRequest::new(BackendKind::Enhance, vec![input], json!({ "method": method.key() }));
        self.call(request, method.key(), |resp| {
            let images = response_images(&resp).map_err(|e| self.protocol(BackendKind::Enhance, e))?;
            let [bytes]: [Vec<u8>; 1] = images
                .try_into()
                .map_err(|v: Vec<_>| self.protocol(BackendKind::Enhance, format!("expected 1 image, got {}", v.len())))?;
            self.check_output_image(BackendKind::Enhance, &bytes)?;
            let path = self.write_output("enhanced", &name, &bytes)?;
            Ok(Finished {
                response: json!({ "image_files": [self.journal_path(&path)] }),
                output_digests: vec![sha256_hex(&bytes)],
                value: path,
            })
        })
    }

    fn enhance_native(&self, image: &Path, input: Vec<u8>, name: String) -> Result<PathBuf> {
        let rgb = imageio::decode_rgb(&input).map_err(|e| Error::Image {
            path: image.to_owned(),
            reason: e.to_string(),
        })?;
        let out = denoise_rgb(&rgb, &self.denoise)?;
        let bytes = imageio::encode_rgb_png(&out);
        let path = self.write_output("enhanced", &name, &bytes)?;
        let params = json!({
            "method": EnhanceMethod::TvDenoise.key(),
            "iterations": self.denoise.iterations,
            "lambda": self.denoise.lambda,
            "epsilon": self.denoise.epsilon,
            "step": self.denoise.step,
        });
        let request = WireRequest::new(BackendKind::Enhance, vec![input], params);
        self.log(JournalRecord {
            seq: 0,
            unix_time: 0.0,
            kind: BackendKind::Enhance,
            method: EnhanceMethod::TvDenoise.key().into(),
            native: true,
            endpoint: "native".into(),
            request_digest: request.digest(),
            input_digests: request.input_digests(),
            params: Value::Object(request.params),
            attempts: 1,
            ok: true,
            error: None,
            output_digests: vec![sha256_hex(&bytes)],
            response: Some(json!({ "image_files": [self.journal_path(&path)] })),
        })?;
        Ok(path)
    }

    /// Asks the describer one question per category. Missing, null or empty
    /// answers become unknown values.
    pub fn describe(
        &self,
        subject_id: &str,
        image: &Path,
        provenance: Provenance,
        questions: &[VlmQuestion],
    ) -> Result<AttributeDescription> {
        let input = self.read_input(image)?;
        let texts: Vec<&str> = questions.iter().map(|q| q.text.as_str()).collect();
        let request = WireRequest::new(BackendKind::Describe, vec![input], json!({ "questions": texts }));
        self.call(request, "", |resp| {
            let answers = resp
                .body
                .get("answers")
                .and_then(Value::as_array)
                .ok_or_else(|| self.protocol(BackendKind::Describe, "response has no `answers` array"))?;
            if answers.len() != questions.len() {
                return Err(self.protocol(
                    BackendKind::Describe,
                    format!("{} answers for {} questions", answers.len(), questions.len()),
                ));
            }
            let mut by_category = BTreeMap::new();
            for (q, a) in questions.iter().zip(answers) {
                match a {
                    Value::String(s) => {
                        by_category.insert(q.category, s.clone());
                    }
                    Value::Number(n) => {
                        by_category.insert(q.category, n.to_string());
                    }
                    Value::Null => {}
                    other => {
                        return Err(self.protocol(BackendKind::Describe, format!("answer {other} is not text")))
                    }
                }
            }
            let description = describe_from_answers(subject_id, image, provenance, &by_category, &self.synonyms);
            Ok(Finished {
                response: json!({ "answers": answers }),
                output_digests: vec![],
                value: description,
            })
        })
    }

    /// Generates `request.count` images and writes each with a JSON sidecar
    /// holding the request parameters.
    pub fn generate(&self, request: &GenerationRequest) -> Result<Vec<PathBuf>> {
        request.validate()?;
        let inputs = request
            .input_images
            .iter()
            .map(|p| self.read_input(p))
            .collect::<Result<Vec<_>>>()?;
        let wire = WireRequest::new(BackendKind::Generate, inputs, request.wire_params());
        let digest = wire.digest();
        let input_digests = wire.input_digests();
        self.call(wire, "", |resp| {
            let images = response_images(&resp).map_err(|e| self.protocol(BackendKind::Generate, e))?;
            if images.len() != request.count {
                return Err(self.protocol(
                    BackendKind::Generate,
                    format!("{} images for a request of {}", images.len(), request.count),
                ));
            }
            let mut paths = Vec::with_capacity(images.len());
            let mut digests = Vec::with_capacity(images.len());
            for (i, bytes) in images.iter().enumerate() {
                self.check_output_image(BackendKind::Generate, bytes)?;
                let name = format!("{}-{}-{i}.png", request.label, &digest[..12]);
                let path = self.write_output("generated", &name, bytes)?;
                let sidecar = json!({
                    "request_digest": digest,
                    "input_digests": input_digests,
                    "params": request.wire_params(),
                    "index": i,
                    "output_digest": sha256_hex(bytes),
                });
                let side_path = path.with_extension("png.json");
                std::fs::write(&side_path, serde_json::to_vec_pretty(&sidecar)?)
                    .map_err(|e| Error::io(&side_path, e))?;
                digests.push(sha256_hex(bytes));
                paths.push(path);
            }
            let files: Vec<String> = paths.iter().map(|p| self.journal_path(p)).collect();
            Ok(Finished {
                response: json!({ "image_files": files }),
                output_digests: digests,
                value: paths,
            })
        })
    }

    /// Embeds a face image. All embeddings of one gateway share a dimension.
    pub fn embed(&self, subject_id: &str, image: &Path, provenance: &str) -> Result<Embedding> {
        let input = self.read_input(image)?;
        let request = WireRequest::new(BackendKind::Embed, vec![input], json!({}));
        self.call(request, "", |resp| {
            let raw = resp
                .body
                .get("vector")
                .and_then(Value::as_array)
                .ok_or_else(|| self.protocol(BackendKind::Embed, "response has no `vector` array"))?;
            let vector = raw
                .iter()
                .map(|v| v.as_f64().filter(|x| x.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| self.protocol(BackendKind::Embed, "vector holds a non-finite or non-numeric value"))?;
            if vector.is_empty() {
                return Err(self.protocol(BackendKind::Embed, "empty vector"));
            }
            {
                let mut dim = self.embed_dim.lock().expect("dimension lock");
                match *dim {
                    None => *dim = Some(vector.len()),
                    Some(d) if d != vector.len() => {
                        return Err(self.protocol(
                            BackendKind::Embed,
                            format!("dimension {} differs from earlier {d}", vector.len()),
                        ))
                    }
                    _ => {}
                }
            }
            Ok(Finished {
                response: json!({ "vector": vector }),
                output_digests: vec![],
                value: Embedding {
                    subject_id: subject_id.to_owned(),
                    image: image.to_string_lossy().replace('\\', "/"),
                    provenance: provenance.to_owned(),
                    vector,
                },
            })
        })
    }

    /// Forgets the embedding dimension seen so far.
    pub fn reset_embedding_dimension(&self) {
        *self.embed_dim.lock().expect("dimension lock") = None;
    }
}
