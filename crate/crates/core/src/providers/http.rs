//! JSON-over-HTTP backends for the three roles.
//!
//! Wire protocol (images and masks travel as base64 of binary PNM, saliency
//! maps as base64 of FSAL1):
//!
//! ```text
//! POST /v1/perceive  {image_b64, format: "pnm", prompt}
//!                 -> {saliency_b64, width, height}
//! POST /v1/diagnose  {image_b64, prompt, regions: [{id, bbox: [x0,y0,x1,y1], mask_b64}]}
//!                 -> {diagnoses: [{id, category, description, severity}]}
//! POST /v1/inpaint   {image_b64, mask_b64?, instruction?}
//!                 -> {image_b64}
//! ```
//!
//! Every call is a pure function of its body, so all of them are retried on
//! transport errors, timeouts, 429 and 5xx with exponential backoff. Each
//! backend caps the number of requests it has in flight.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    validate_inpaint_request, InpaintRequest, InpaintTool, PerceptionProvider, ProviderError,
    Providers, ReasoningProvider, RegionRef, ToolDescriptor, ToolKind,
};
use crate::dataset::DistortionCategory;
use crate::media::{read_float_grid, read_pnm, write_pnm, ImageBuffer};
use crate::saliency::{BinaryGrid, SaliencyMap};
use crate::text::Diagnosis;

pub const ENV_PREFIX: &str = "RETOUCH_BACKEND_";
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Perception,
    Reasoning,
    Inpaint,
}

impl Role {
    pub fn env_var(self) -> String {
        let name = match self {
            Role::Perception => "PERCEPTION",
            Role::Reasoning => "REASONING",
            Role::Inpaint => "INPAINT",
        };
        format!("{ENV_PREFIX}{name}_URL")
    }

    fn path(self) -> &'static str {
        match self {
            Role::Perception => "/v1/perceive",
            Role::Reasoning => "/v1/diagnose",
            Role::Inpaint => "/v1/inpaint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HttpConfig {
    pub timeout: Duration,
    pub max_retries: u32,
    pub base_backoff: Duration,
    pub max_backoff: Duration,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_millis(DEFAULT_TIMEOUT_MS),
            max_retries: 3,
            base_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_secs(5),
            max_in_flight: 4,
        }
    }
}

impl HttpConfig {
    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// One endpoint with its own retry policy and in-flight bound. Clones share
/// the bound.
#[derive(Clone)]
pub struct HttpBackend {
    base_url: String,
    agent: ureq::Agent,
    cfg: HttpConfig,
    in_flight: Arc<InFlight>,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("base_url", &self.base_url)
            .field("cfg", &self.cfg)
            .finish()
    }
}

fn classify(err: ureq::Error) -> ProviderError {
    match err {
        ureq::Error::Timeout(_) => ProviderError::Timeout,
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => ProviderError::Timeout,
        ureq::Error::StatusCode(status) => ProviderError::Status {
            status,
            body: String::new(),
        },
        other => ProviderError::Transport(other.to_string()),
    }
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, cfg: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
            cfg,
            in_flight: Arc::new(InFlight::new(cfg.max_in_flight)),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post_once(&self, url: &str, body: &[u8]) -> Result<Vec<u8>, ProviderError> {
        let _permit = self.in_flight.acquire();
        let mut resp = self
            .agent
            .post(url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(classify)?;
        let status = resp.status().as_u16();
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_vec()
            .map_err(classify)?;
        if status != 200 {
            return Err(ProviderError::Status {
                status,
                body: String::from_utf8_lossy(&bytes).chars().take(200).collect(),
            });
        }
        Ok(bytes)
    }

    /// POST `request` to `path`, retrying retryable failures.
    pub fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        request: &Req,
    ) -> Result<Resp, ProviderError> {
        let url = format!("{}{}", self.base_url, path);
        let body = serde_json::to_vec(request)
            .map_err(|e| ProviderError::InvalidRequest(e.to_string()))?;
        let mut attempt = 0;
        loop {
            match self.post_once(&url, &body) {
                Ok(bytes) => {
                    return serde_json::from_slice(&bytes)
                        .map_err(|e| ProviderError::Schema(format!("{path}: {e}")))
                }
                Err(e) if e.is_retryable() && attempt < self.cfg.max_retries => {
                    std::thread::sleep(self.cfg.backoff(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn decode_b64(field: &str, value: &str) -> Result<Vec<u8>, ProviderError> {
    B64.decode(value)
        .map_err(|e| ProviderError::Schema(format!("{field} is not base64: {e}")))
}

fn mask_to_pnm(mask: &BinaryGrid) -> Vec<u8> {
    let img = ImageBuffer::new(
        mask.width(),
        mask.height(),
        1,
        mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
    )
    .expect("mask dimensions are valid");
    write_pnm(&img)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PerceiveRequest {
    pub image_b64: String,
    pub format: String,
    pub prompt: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PerceiveResponse {
    pub saliency_b64: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireRegion {
    pub id: String,
    pub bbox: [usize; 4],
    pub mask_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DiagnoseRequest {
    pub image_b64: String,
    pub prompt: String,
    pub regions: Vec<WireRegion>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireDiagnosis {
    pub id: String,
    pub category: String,
    pub description: String,
    pub severity: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DiagnoseResponse {
    pub diagnoses: Vec<WireDiagnosis>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InpaintWireRequest {
    pub image_b64: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub instruction: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InpaintWireResponse {
    pub image_b64: String,
}

#[derive(Debug, Clone)]
pub struct HttpPerception {
    backend: HttpBackend,
}

impl HttpPerception {
    pub fn new(backend: HttpBackend) -> Self {
        Self { backend }
    }
}

impl PerceptionProvider for HttpPerception {
    fn perceive(&self, image: &ImageBuffer, prompt: &str) -> Result<SaliencyMap, ProviderError> {
        let req = PerceiveRequest {
            image_b64: B64.encode(write_pnm(image)),
            format: "pnm".into(),
            prompt: prompt.into(),
        };
        let resp: PerceiveResponse = self.backend.call(Role::Perception.path(), &req)?;
        if (resp.width, resp.height) != (image.width(), image.height()) {
            return Err(ProviderError::Schema(format!(
                "saliency is {}x{} but the image is {}x{}",
                resp.width,
                resp.height,
                image.width(),
                image.height()
            )));
        }
        let grid = read_float_grid(&decode_b64("saliency_b64", &resp.saliency_b64)?)
            .map_err(|e| ProviderError::Schema(format!("saliency_b64: {e}")))?;
        if (grid.width(), grid.height()) != (resp.width, resp.height) {
            return Err(ProviderError::Schema(
                "saliency payload dimensions disagree with width/height".into(),
            ));
        }
        SaliencyMap::from_grid(&grid).map_err(|e| ProviderError::Schema(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct HttpReasoning {
    backend: HttpBackend,
}

impl HttpReasoning {
    pub fn new(backend: HttpBackend) -> Self {
        Self { backend }
    }
}

impl ReasoningProvider for HttpReasoning {
    fn diagnose(
        &self,
        image: &ImageBuffer,
        prompt: &str,
        regions: &[RegionRef<'_>],
    ) -> Result<Vec<Diagnosis>, ProviderError> {
        let req = DiagnoseRequest {
            image_b64: B64.encode(write_pnm(image)),
            prompt: prompt.into(),
            regions: regions
                .iter()
                .map(|r| {
                    let b = r.proposal.bbox;
                    WireRegion {
                        id: r.id.to_string(),
                        bbox: [b.x0, b.y0, b.x1, b.y1],
                        mask_b64: B64.encode(mask_to_pnm(&r.proposal.mask)),
                    }
                })
                .collect(),
        };
        let resp: DiagnoseResponse = self.backend.call(Role::Reasoning.path(), &req)?;
        if resp.diagnoses.len() != regions.len() {
            return Err(ProviderError::Schema(format!(
                "{} diagnoses for {} regions",
                resp.diagnoses.len(),
                regions.len()
            )));
        }
        // align by id; the backend may answer in any order
        regions
            .iter()
            .map(|r| {
                let d = resp
                    .diagnoses
                    .iter()
                    .find(|d| d.id == r.id)
                    .ok_or_else(|| ProviderError::Schema(format!("no diagnosis for region {}", r.id)))?;
                let category: DistortionCategory = d
                    .category
                    .parse()
                    .map_err(|e| ProviderError::Schema(format!("{e}")))?;
                if !(0.0..=1.0).contains(&d.severity) {
                    return Err(ProviderError::Schema(format!(
                        "severity {} outside [0, 1]",
                        d.severity
                    )));
                }
                if d.description.trim().is_empty() {
                    return Err(ProviderError::Schema(format!("empty description for {}", r.id)));
                }
                Ok(Diagnosis {
                    region_id: d.id.clone(),
                    category,
                    description: d.description.clone(),
                    severity: d.severity,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct HttpInpaintTool {
    backend: HttpBackend,
    descriptor: ToolDescriptor,
}

impl HttpInpaintTool {
    pub fn new(backend: HttpBackend, descriptor: ToolDescriptor) -> Self {
        Self {
            backend,
            descriptor,
        }
    }
}

impl InpaintTool for HttpInpaintTool {
    fn descriptor(&self) -> &ToolDescriptor {
        &self.descriptor
    }

    fn inpaint(&self, request: InpaintRequest<'_>) -> Result<ImageBuffer, ProviderError> {
        validate_inpaint_request(&self.descriptor, &request)?;
        let req = InpaintWireRequest {
            image_b64: B64.encode(write_pnm(request.image)),
            mask_b64: request.mask.map(|m| B64.encode(mask_to_pnm(m))),
            instruction: request.instruction.map(str::to_string),
        };
        let resp: InpaintWireResponse = self.backend.call(Role::Inpaint.path(), &req)?;
        let out = read_pnm(&decode_b64("image_b64", &resp.image_b64)?)
            .map_err(|e| ProviderError::Schema(format!("image_b64: {e}")))?;
        if (out.width(), out.height()) != (request.image.width(), request.image.height()) {
            return Err(ProviderError::Schema(format!(
                "inpainted image is {}x{} but the input is {}x{}",
                out.width(),
                out.height(),
                request.image.width(),
                request.image.height()
            )));
        }
        Ok(out)
    }
}

/// Backends configured from `RETOUCH_BACKEND_{PERCEPTION,REASONING,INPAINT}_URL`.
///
/// The inpainting tool's descriptor comes from
/// `RETOUCH_BACKEND_INPAINT_KIND` (`mask-guided` or `instruction-driven`,
/// default mask-guided), `RETOUCH_BACKEND_INPAINT_NAME` and
/// `RETOUCH_BACKEND_INPAINT_COST`.
pub fn providers_from_env(
    lookup: impl Fn(&str) -> Option<String>,
    cfg: HttpConfig,
) -> Result<Providers, ProviderError> {
    let url = |role: Role| {
        lookup(&role.env_var()).ok_or_else(|| {
            ProviderError::InvalidRequest(format!("{} is not set", role.env_var()))
        })
    };
    let kind = match lookup(&format!("{ENV_PREFIX}INPAINT_KIND")).as_deref() {
        None | Some("mask-guided") => ToolKind::MaskGuided,
        Some("instruction-driven") => ToolKind::InstructionDriven,
        Some(other) => {
            return Err(ProviderError::InvalidRequest(format!(
                "unknown inpaint kind {other:?}"
            )))
        }
    };
    let cost_hint = match lookup(&format!("{ENV_PREFIX}INPAINT_COST")) {
        Some(s) => s
            .parse::<f64>()
            .ok()
            .filter(|c| *c >= 0.0)
            .ok_or_else(|| ProviderError::InvalidRequest(format!("bad inpaint cost {s:?}")))?,
        None => 1.0,
    };
    let descriptor = ToolDescriptor {
        name: lookup(&format!("{ENV_PREFIX}INPAINT_NAME")).unwrap_or_else(|| "http-inpaint".into()),
        kind,
        cost_hint,
    };
    Ok(Providers {
        perception: Arc::new(HttpPerception::new(HttpBackend::new(url(Role::Perception)?, cfg))),
        reasoning: Arc::new(HttpReasoning::new(HttpBackend::new(url(Role::Reasoning)?, cfg))),
        tools: vec![Arc::new(HttpInpaintTool::new(
            HttpBackend::new(url(Role::Inpaint)?, cfg),
            descriptor,
        ))],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let cfg = HttpConfig {
            base_backoff: Duration::from_millis(10),
            max_backoff: Duration::from_millis(50),
            ..Default::default()
        };
        assert_eq!(cfg.backoff(0), Duration::from_millis(10));
        assert_eq!(cfg.backoff(2), Duration::from_millis(40));
        assert_eq!(cfg.backoff(3), Duration::from_millis(50));
        assert_eq!(cfg.backoff(40), Duration::from_millis(50));
    }

    #[test]
    fn retry_classification() {
        assert!(ProviderError::Timeout.is_retryable());
        assert!(ProviderError::Status { status: 503, body: String::new() }.is_retryable());
        assert!(!ProviderError::Status { status: 404, body: String::new() }.is_retryable());
        assert!(!ProviderError::Schema("x".into()).is_retryable());
    }

    #[test]
    fn env_configuration() {
        let env = |k: &str| match k {
            "RETOUCH_BACKEND_PERCEPTION_URL" => Some("http://127.0.0.1:1".to_string()),
            "RETOUCH_BACKEND_REASONING_URL" => Some("http://127.0.0.1:2/".to_string()),
            "RETOUCH_BACKEND_INPAINT_URL" => Some("http://127.0.0.1:3".to_string()),
            "RETOUCH_BACKEND_INPAINT_KIND" => Some("instruction-driven".to_string()),
            _ => None,
        };
        let p = providers_from_env(env, HttpConfig::default()).unwrap();
        assert_eq!(p.tools[0].descriptor().kind, ToolKind::InstructionDriven);
        let missing = providers_from_env(|_| None, HttpConfig::default());
        assert!(matches!(missing, Err(ProviderError::InvalidRequest(_))));
    }

    #[test]
    fn unreachable_backend_is_a_transport_error() {
        let cfg = HttpConfig {
            max_retries: 1,
            base_backoff: Duration::from_millis(1),
            timeout: Duration::from_secs(2),
            ..Default::default()
        };
        // port 9 on localhost is almost never listening
        let backend = HttpBackend::new("http://127.0.0.1:9", cfg);
        let err = backend
            .call::<_, PerceiveResponse>("/v1/perceive", &serde_json::json!({}))
            .unwrap_err();
        assert!(matches!(err, ProviderError::Transport(_) | ProviderError::Timeout), "{err}");
    }
}
