//! HTTP client for denoisers hosted out of process.
//!
//! Wire format: `GET /v1/schedule` answers `{"num_steps": N, "betas": [...]}`;
//! `POST /v1/denoise` takes a [`DenoiseRequest`] and answers
//! `{"eps": <tensor>}`. A tensor is `{"shape": [...], "data_b64": ...}` with
//! little-endian `f32` payload. Rejections are HTTP 400 with
//! `{"error": <code>, "detail": <text>}`.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserCondition, DenoiserKind, DiffusionError, Latent, NoiseSchedule};
use crate::prompts::ImagePromptEmbedding;
use crate::render_volume::{Image, RelativePose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data_b64: String,
}

impl Tensor {
    /// Values are rounded to `f32`.
    pub fn encode(shape: Vec<usize>, data: &[f64]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape does not match data");
        let bytes: Vec<u8> = data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        Self {
            shape,
            data_b64: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<f64>, DiffusionError> {
        let bytes = STANDARD
            .decode(&self.data_b64)
            .map_err(|e| DiffusionError::Protocol(format!("bad base64 payload: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(DiffusionError::Protocol(format!("payload of {} bytes is not a sequence of f32", bytes.len())));
        }
        let expected = self.shape.iter().product::<usize>();
        if bytes.len() / 4 != expected {
            return Err(DiffusionError::Protocol(format!(
                "payload holds {} values but shape {:?} needs {expected}",
                bytes.len() / 4,
                self.shape
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub fn from_latent(latent: &Latent) -> Self {
        Self::encode(latent.shape().to_vec(), &latent.data)
    }

    pub fn to_latent(&self) -> Result<Latent, DiffusionError> {
        let shape: [usize; 3] = self
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| DiffusionError::Protocol(format!("expected a rank-3 tensor, got shape {:?}", self.shape)))?;
        Latent::from_data(shape, self.decode()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePayload {
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    #[serde(rename = "T")]
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseRequest {
    pub kind: DenoiserKind,
    pub t: usize,
    pub latent: Tensor,
    pub text_embedding: Tensor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_prompt: Option<Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_pose: Option<PosePayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_image: Option<Tensor>,
    pub guidance_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseResponse {
    pub eps: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
    #[serde(default)]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePayload {
    pub num_steps: usize,
    pub betas: Vec<f64>,
}

impl DenoiseRequest {
    pub fn new(kind: DenoiserKind, noisy: &Latent, t: usize, cond: &DenoiserCondition) -> Self {
        Self {
            kind,
            t,
            latent: Tensor::from_latent(noisy),
            text_embedding: Tensor::encode(vec![cond.text_embedding.len()], &cond.text_embedding),
            image_prompt: cond.image_prompt.as_ref().map(|p| Tensor::encode(vec![p.len()], &p.vector)),
            relative_pose: cond.relative_pose.as_ref().map(|r| {
                let m = r.rotation;
                PosePayload {
                    rotation: [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]],
                    translation: r.translation,
                }
            }),
            reference_image: cond.reference_image.as_ref().map(|img| {
                let mut chw = vec![0.0; img.pixels.len()];
                for y in 0..img.height {
                    for x in 0..img.width {
                        for c in 0..3 {
                            chw[(c * img.height + y) * img.width + x] = img.pixels[(y * img.width + x) * 3 + c];
                        }
                    }
                }
                Tensor::encode(vec![3, img.height, img.width], &chw)
            }),
            guidance_scale: cond.guidance_scale,
        }
    }

    /// Server-side view of the request: the noisy latent and the condition.
    /// Image prompts are decoded as square patch grids.
    pub fn decode(&self) -> Result<(Latent, DenoiserCondition), DiffusionError> {
        let latent = self.latent.to_latent()?;
        let mut cond = DenoiserCondition::text(self.text_embedding.decode()?);
        cond.guidance_scale = self.guidance_scale;
        if let Some(p) = &self.image_prompt {
            let vector = p.decode()?;
            let patches = ((vector.len() / 3) as f64).sqrt().round() as usize;
            if patches * patches * 3 != vector.len() {
                return Err(DiffusionError::Protocol(format!("image prompt of length {} is not 3*P*P", vector.len())));
            }
            cond.image_prompt = Some(ImagePromptEmbedding::from_vector(vector, patches, (0, 0)));
        }
        if let Some(p) = &self.relative_pose {
            let r = p.rotation;
            let rotation = [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]];
            cond.relative_pose = Some(
                RelativePose::new(rotation, p.translation).map_err(|e| DiffusionError::Protocol(format!("bad relative pose: {e}")))?,
            );
        }
        if let Some(img) = &self.reference_image {
            let data = img.decode()?;
            let [c, h, w]: [usize; 3] = img
                .shape
                .as_slice()
                .try_into()
                .map_err(|_| DiffusionError::Protocol(format!("reference image shape {:?} is not [3,H,W]", img.shape)))?;
            if c != 3 {
                return Err(DiffusionError::Protocol(format!("reference image has {c} channels")));
            }
            cond.reference_image = Some(Image::from_fn(w, h, |x, y| [0, 1, 2].map(|ch| data[(ch * h + y) * w + x])));
        }
        Ok((latent, cond))
    }
}

/// Denoiser served over the bridge protocol. The kind is sent with every
/// request so a server may host several models.
#[derive(Debug, Clone)]
pub struct RemoteDenoiser {
    endpoint: String,
    kind: DenoiserKind,
    agent: ureq::Agent,
}

impl RemoteDenoiser {
    pub fn new(endpoint: &str, kind: DenoiserKind) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            kind,
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn fetch_schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        let resp = self
            .agent
            .get(format!("{}/v1/schedule", self.endpoint))
            .call()
            .map_err(|e| DiffusionError::Transport(e.to_string()))?;
        let body = read_ok_body(resp)?;
        let payload: SchedulePayload =
            serde_json::from_str(&body).map_err(|e| DiffusionError::Protocol(format!("malformed schedule: {e}")))?;
        if payload.betas.len() != payload.num_steps {
            return Err(DiffusionError::Protocol(format!(
                "schedule advertises {} steps but carries {} betas",
                payload.num_steps,
                payload.betas.len()
            )));
        }
        NoiseSchedule::from_betas(payload.betas)
    }
}

fn read_ok_body(resp: ureq::http::Response<ureq::Body>) -> Result<String, DiffusionError> {
    let status = resp.status().as_u16();
    let body = resp
        .into_body()
        .read_to_string()
        .map_err(|e| DiffusionError::Transport(e.to_string()))?;
    if status == 200 {
        return Ok(body);
    }
    match serde_json::from_str::<ErrorResponse>(&body) {
        Ok(err) => Err(DiffusionError::Server {
            code: err.error,
            detail: err.detail,
        }),
        Err(_) => Err(DiffusionError::Server {
            code: format!("http_{status}"),
            detail: body.chars().take(200).collect(),
        }),
    }
}

impl Denoiser for RemoteDenoiser {
    fn kind(&self) -> DenoiserKind {
        self.kind
    }

    fn predict(&self, noisy: &Latent, t: usize, cond: &DenoiserCondition) -> Result<Latent, DiffusionError> {
        let request = DenoiseRequest::new(self.kind, noisy, t, cond);
        let resp = self
            .agent
            .post(format!("{}/v1/denoise", self.endpoint))
            .send_json(&request)
            .map_err(|e| DiffusionError::Transport(e.to_string()))?;
        let body = read_ok_body(resp)?;
        let reply: DenoiseResponse =
            serde_json::from_str(&body).map_err(|e| DiffusionError::Protocol(format!("malformed reply: {e}")))?;
        let eps = reply.eps.to_latent()?;
        if eps.shape() != noisy.shape() {
            return Err(DiffusionError::Protocol(format!(
                "reply shape {:?} does not match request shape {:?}",
                eps.shape(),
                noisy.shape()
            )));
        }
        Ok(eps)
    }

    fn boxed_clone(&self) -> Box<dyn Denoiser> {
        Box::new(self.clone())
    }
}
