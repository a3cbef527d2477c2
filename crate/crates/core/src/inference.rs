//! Multi-scale sliding-window detection.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{polygon_area, Point2, Quadrilateral};
use crate::image_ops::{crop_padded, image_to_tensor, scale_image, RgbImage};
use crate::labelgen::decode_quad;
use crate::network::{NetworkError, NetworkModel};
use crate::tensorcore::Tensor;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// A scored quadrilateral in original-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionCandidate {
    pub quad: Quadrilateral,
    pub score: f64,
}

impl DetectionCandidate {
    pub fn new(quad: Quadrilateral, score: f64) -> Self {
        Self { quad, score }
    }

    /// `x1,y1,x2,y2,x3,y3,x4,y4,score`, coordinates to 2 decimals.
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        for c in self.quad.coords() {
            let _ = write!(s, "{c:.2},");
        }
        let _ = write!(s, "{:.4}", self.score);
        s
    }
}

pub fn format_candidates(cands: &[DetectionCandidate]) -> String {
    cands.iter().map(|c| c.to_line() + "\n").collect()
}

/// Reads the line format written by [`format_candidates`]. Blank lines are
/// skipped; a missing score column reads as 1.
pub fn parse_candidates(text: &str) -> Result<Vec<DetectionCandidate>, InferenceError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 8 && fields.len() != 9 {
            return Err(InferenceError::Parse {
                line: i + 1,
                reason: format!("expected 9 fields, found {}", fields.len()),
            });
        }
        let mut v = [0.0; 9];
        v[8] = 1.0;
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| InferenceError::Parse {
                line: i + 1,
                reason: format!("not a number: {f:?}"),
            })?;
        }
        let mut c = [0.0; 8];
        c.copy_from_slice(&v[..8]);
        out.push(DetectionCandidate::new(Quadrilateral::from_coords(c), v[8]));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    pub window: u32,
    pub stride: u32,
    pub scales: Vec<f64>,
    pub cls_threshold: f32,
    /// Scales whose scaled image has a side below this are skipped.
    pub min_side: u32,
    /// Candidates with a smaller area (px²) are dropped.
    pub min_area: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            window: 320,
            stride: 160,
            scales: default_scales(),
            cls_threshold: 0.7,
            min_side: 16,
            min_area: 1.0,
        }
    }
}

/// `{2⁻⁵, 2⁻⁴, …, 2¹}`.
pub fn default_scales() -> Vec<f64> {
    (-5..=1).map(|e| 2f64.powi(e)).collect()
}

/// One network window: `size × size` pixels at `origin` in the image scaled
/// by `scale`. `valid` is the part of the window covered by real pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TilePlan {
    pub scale: f64,
    pub origin: (u32, u32),
    pub size: u32,
    pub valid: (u32, u32),
}

pub fn scaled_size(width: u32, height: u32, scale: f64) -> (u32, u32) {
    (
        ((width as f64 * scale).round() as u32).max(1),
        ((height as f64 * scale).round() as u32).max(1),
    )
}

fn window_origins(len: u32, window: u32, stride: u32) -> Vec<u32> {
    if len <= window {
        return vec![0];
    }
    let last = len - window;
    let mut out: Vec<u32> = (0..).map(|i| i * stride.max(1)).take_while(|&o| o < last).collect();
    out.push(last);
    out
}

/// Windows covering the image at every scale, scale-major then row-major.
pub fn plan_tiles(width: u32, height: u32, cfg: &InferenceConfig) -> Vec<TilePlan> {
    let mut plans = Vec::new();
    for &scale in &cfg.scales {
        let (sw, sh) = scaled_size(width, height, scale);
        if sw < cfg.min_side || sh < cfg.min_side {
            continue;
        }
        for oy in window_origins(sh, cfg.window, cfg.stride) {
            for ox in window_origins(sw, cfg.window, cfg.stride) {
                plans.push(TilePlan {
                    scale,
                    origin: (ox, oy),
                    size: cfg.window,
                    valid: ((sw - ox).min(cfg.window), (sh - oy).min(cfg.window)),
                });
            }
        }
    }
    plans
}

/// Thresholds one tile's output maps (`cls` `[h, w]`, `loc` `[8, h, w]` in
/// pixel offsets) and maps decoded quads back to the original image.
pub fn candidates_from_maps(cls: &Tensor, loc: &Tensor, plan: &TilePlan, cfg: &InferenceConfig) -> Vec<DetectionCandidate> {
    let (h, w) = (cls.shape()[cls.shape().len() - 2], cls.shape()[cls.shape().len() - 1]);
    let down = plan.size as usize / w.max(1);
    let n = h * w;
    let (ox, oy) = (plan.origin.0 as f64, plan.origin.1 as f64);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let score = cls.data()[i];
            if score <= cfg.cls_threshold {
                continue;
            }
            if x * down >= plan.valid.0 as usize || y * down >= plan.valid.1 as usize {
                continue;
            }
            let row: [f32; 8] = std::array::from_fn(|c| loc.data()[c * n + i]);
            let quad = decode_quad(&row, x, y, down)
                .map(|p| Point2::new((p.x + ox) / plan.scale, (p.y + oy) / plan.scale));
            if !quad.is_finite() || polygon_area(&quad) < cfg.min_area {
                continue;
            }
            out.push(DetectionCandidate::new(quad, score as f64));
        }
    }
    out
}

/// Runs the network on one window of an already scaled image.
pub fn detect_tile(
    model: &NetworkModel,
    scaled: &RgbImage,
    plan: &TilePlan,
    cfg: &InferenceConfig,
) -> Result<Vec<DetectionCandidate>, InferenceError> {
    let tile = crop_padded(scaled, plan.origin.0, plan.origin.1, plan.size);
    let x = image_to_tensor(&tile);
    let s = plan.size as usize;
    let out = model.forward(&x.reshape(&[1, 3, s, s]).map_err(NetworkError::from)?)?;
    Ok(candidates_from_maps(&out.cls, &out.loc, plan, cfg))
}

/// All candidates over every tile and scale, ordered by tile index.
/// Tiles are evaluated in parallel on the current rayon pool.
pub fn detect_image(model: &NetworkModel, image: &RgbImage, cfg: &InferenceConfig) -> Result<Vec<DetectionCandidate>, InferenceError> {
    let plans = plan_tiles(image.width(), image.height(), cfg);
    let mut out = Vec::new();
    let mut start = 0;
    while start < plans.len() {
        let scale = plans[start].scale;
        let end = plans[start..].iter().position(|p| p.scale != scale).map_or(plans.len(), |k| start + k);
        let scaled = scale_image(image, scale);
        let per_tile: Vec<Vec<DetectionCandidate>> = plans[start..end]
            .par_iter()
            .map(|p| detect_tile(model, &scaled, p, cfg))
            .collect::<Result<_, _>>()?;
        out.extend(per_tile.into_iter().flatten());
        start = end;
    }
    Ok(out)
}
