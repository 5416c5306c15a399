//! Image-prompt embeddings and the geometry prompt difference.
//!
//! The embedder is a fixed linear map: an image is cut into `P × P` patches
//! and each patch contributes its per-channel mean. Linearity is the point:
//! adding the difference of two normal-map embeddings to an RGB embedding is
//! then the same as adding the difference of the images themselves, which
//! makes the compensation rule exactly testable.

use thiserror::Error;

use crate::render_volume::{CameraPose, Image};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("image {width}x{height} is not divisible into {patches}x{patches} patches")]
    Patches { width: usize, height: usize, patches: usize },
    #[error("embedding lengths differ: {0} vs {1}")]
    Length(usize, usize),
}

/// Patch-mean embedding. Entry `(p * 3 + c)` is the mean of channel `c`
/// over patch `p = px * P + py` (patch column-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePromptEmbedding {
    pub vector: Vec<f64>,
    pub patches: usize,
    pub source_size: (usize, usize),
}

/// `y_ran - y_def`, optionally tagged with the two viewpoints it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryPromptDifference {
    pub vector: Vec<f64>,
    pub random_view: Option<CameraPose>,
    pub default_view: Option<CameraPose>,
}

impl ImagePromptEmbedding {
    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }

    pub fn from_vector(vector: Vec<f64>, patches: usize, source_size: (usize, usize)) -> Self {
        Self {
            vector,
            patches,
            source_size,
        }
    }
}

impl GeometryPromptDifference {
    pub fn zeros(len: usize) -> Self {
        Self {
            vector: vec![0.0; len],
            random_view: None,
            default_view: None,
        }
    }

    /// Records the random and default viewpoints the difference was built for.
    pub fn with_views(mut self, random_view: CameraPose, default_view: CameraPose) -> Self {
        self.random_view = Some(random_view);
        self.default_view = Some(default_view);
        self
    }

    pub fn negated(&self) -> Self {
        Self {
            vector: self.vector.iter().map(|v| -v).collect(),
            random_view: self.default_view.clone(),
            default_view: self.random_view.clone(),
        }
    }
}

pub fn embed_image(image: &Image, patches: usize) -> Result<ImagePromptEmbedding, PromptError> {
    if patches == 0 || image.width % patches != 0 || image.height % patches != 0 {
        return Err(PromptError::Patches {
            width: image.width,
            height: image.height,
            patches,
        });
    }
    let (pw, ph) = (image.width / patches, image.height / patches);
    let inv = 1.0 / (pw * ph) as f64;
    let mut vector = vec![0.0; patches * patches * 3];
    for y in 0..image.height {
        for x in 0..image.width {
            let p = (x / pw) * patches + y / ph;
            let px = image.get(x, y);
            for c in 0..3 {
                vector[p * 3 + c] += px[c];
            }
        }
    }
    vector.iter_mut().for_each(|v| *v *= inv);
    Ok(ImagePromptEmbedding {
        vector,
        patches,
        source_size: (image.width, image.height),
    })
}

pub fn geometry_prompt_difference(
    y_ran: &ImagePromptEmbedding,
    y_def: &ImagePromptEmbedding,
) -> Result<GeometryPromptDifference, PromptError> {
    if y_ran.len() != y_def.len() {
        return Err(PromptError::Length(y_ran.len(), y_def.len()));
    }
    Ok(GeometryPromptDifference {
        vector: y_ran.vector.iter().zip(&y_def.vector).map(|(a, b)| a - b).collect(),
        random_view: None,
        default_view: None,
    })
}

/// `y_rgb + delta`, unclamped.
pub fn compensate(y_rgb: &ImagePromptEmbedding, delta: &GeometryPromptDifference) -> Result<ImagePromptEmbedding, PromptError> {
    if y_rgb.len() != delta.vector.len() {
        return Err(PromptError::Length(y_rgb.len(), delta.vector.len()));
    }
    Ok(ImagePromptEmbedding {
        vector: y_rgb.vector.iter().zip(&delta.vector).map(|(a, b)| a + b).collect(),
        patches: y_rgb.patches,
        source_size: y_rgb.source_size,
    })
}

/// Luminance weights (Rec. 601).
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Heuristic normal image: luminance is read as a height field and
/// `n = normalize(-g_x, -g_y, 1)` is mapped to `(n + 1) / 2`. Gradients are
/// central differences, one-sided on the border.
pub fn normal_from_rgb(image: &Image) -> Image {
    let (w, h) = (image.width, image.height);
    let lum: Vec<f64> = image
        .pixels
        .chunks_exact(3)
        .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        .collect();
    let at = |x: usize, y: usize| lum[y * w + x];
    let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f64 };
    Image::from_fn(w, h, |x, y| {
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let gx = diff(at(xl, y), at(xr, y), xr - xl);
        let gy = diff(at(x, yu), at(x, yd), yd - yu);
        let len = (gx * gx + gy * gy + 1.0).sqrt();
        [(-gx / len + 1.0) * 0.5, (-gy / len + 1.0) * 0.5, (1.0 / len + 1.0) * 0.5]
    })
}
