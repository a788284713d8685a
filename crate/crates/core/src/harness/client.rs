//! HTTP gateway client.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::preprocess::{ImagePayload, Mode};
use crate::protocol::http::{DetectHeaders, DetectResponse, ErrorBody, HealthResponse, DETECT_PATH, HEALTH_PATH};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("unexpected response body: {0}")]
    Body(String),
}

/// Answer to one detect request.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutcome {
    pub image_id: String,
    pub status: u16,
    pub response: Option<DetectResponse>,
    pub error: Option<String>,
    /// Gateway-observed round trip.
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone)]
pub struct GatewayClient {
    base: String,
    http: reqwest::Client,
}

impl GatewayClient {
    /// `base` is the master's HTTP root, for example `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Result<Self, ClientError> {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(120))
            .tcp_nodelay(true)
            .build()?;
        Ok(Self {
            base: base.into().trim_end_matches('/').to_string(),
            http,
        })
    }

    /// Submits one image. `client_rescaled` tells the master the payload was
    /// already prepared for low-latency mode.
    pub async fn detect(
        &self,
        payload: &ImagePayload,
        mode: Mode,
        client_rescaled: bool,
    ) -> Result<DetectOutcome, ClientError> {
        let headers = DetectHeaders {
            image_id: payload.image_id.clone(),
            mode,
            width: payload.width,
            height: payload.height,
            format: payload.format,
            client_rescaled,
        };
        let mut req = self.http.post(format!("{}{DETECT_PATH}", self.base));
        for (k, v) in headers.pairs() {
            req = req.header(k, v);
        }
        let started = Instant::now();
        let resp = req.body(payload.bytes.clone()).send().await?;
        let status = resp.status().as_u16();
        let body = resp.bytes().await?;
        let elapsed_ms = started.elapsed().as_secs_f64() * 1000.0;
        let (response, error) = if status == 200 {
            let r: DetectResponse = serde_json::from_slice(&body).map_err(|e| ClientError::Body(e.to_string()))?;
            (Some(r), None)
        } else {
            let msg = serde_json::from_slice::<ErrorBody>(&body)
                .map(|b| b.error)
                .unwrap_or_else(|_| String::from_utf8_lossy(&body).into_owned());
            (None, Some(msg))
        };
        Ok(DetectOutcome {
            image_id: payload.image_id.clone(),
            status,
            response,
            error,
            elapsed_ms,
        })
    }

    pub async fn health(&self) -> Result<HealthResponse, ClientError> {
        let body = self
            .http
            .get(format!("{}{HEALTH_PATH}", self.base))
            .send()
            .await?
            .error_for_status()?
            .bytes()
            .await?;
        serde_json::from_slice(&body).map_err(|e| ClientError::Body(e.to_string()))
    }
}
