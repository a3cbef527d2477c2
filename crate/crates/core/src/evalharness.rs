//! ICDAR-style ground truth, detection scoring, and synthetic scenes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::Rgb;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{intersection_area, iou, Point2, Quadrilateral};
use crate::image_ops::RgbImage;
use crate::inference::{parse_candidates, DetectionCandidate, InferenceError};
use crate::labelgen::Annotation;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("detections reference unknown image {0:?}")]
    KeyMismatch(String),
    #[error("could not place box {placed} of {requested} after {attempts} attempts")]
    PlacementFailure {
        placed: usize,
        requested: usize,
        attempts: usize,
    },
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("invalid scene config: {0}")]
    Config(String),
}

pub const DONT_CARE: &str = "###";

#[derive(Debug, Clone, PartialEq)]
pub struct GtEntry {
    pub quad: Quadrilateral,
    pub text: String,
}

impl GtEntry {
    pub fn is_dont_care(&self) -> bool {
        self.text == DONT_CARE
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthFile {
    pub entries: Vec<GtEntry>,
}

impl GroundTruthFile {
    pub fn annotations(&self) -> Vec<Annotation> {
        self.entries
            .iter()
            .map(|e| {
                if e.is_dont_care() {
                    Annotation::dont_care(e.quad)
                } else {
                    Annotation::new(e.quad)
                }
            })
            .collect()
    }

    pub fn from_annotations(anns: &[Annotation]) -> Self {
        Self {
            entries: anns
                .iter()
                .map(|a| GtEntry {
                    quad: a.quad,
                    text: if a.is_dont_care { DONT_CARE.into() } else { "text".into() },
                })
                .collect(),
        }
    }
}

/// Parses `x1,y1,…,x4,y4,transcription` lines. The transcription may itself
/// contain commas; a leading byte-order mark and blank lines are ignored.
/// Quads are normalized to clockwise order.
pub fn parse_ground_truth(text: &str) -> Result<GroundTruthFile, EvalError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(9, ',').collect();
        if fields.len() < 9 {
            return Err(EvalError::Parse {
                line: i + 1,
                reason: format!("expected 8 coordinates and a transcription, found {} fields", fields.len()),
            });
        }
        let mut c = [0.0; 8];
        for (slot, f) in c.iter_mut().zip(&fields) {
            *slot = f.trim().parse().map_err(|_| EvalError::Parse {
                line: i + 1,
                reason: format!("non-numeric coordinate {:?}", f.trim()),
            })?;
        }
        let quad = Quadrilateral::from_coords(c);
        if !quad.is_finite() {
            return Err(EvalError::Parse {
                line: i + 1,
                reason: "non-finite coordinate".into(),
            });
        }
        entries.push(GtEntry {
            quad: quad.normalized(),
            text: fields[8].to_string(),
        });
    }
    Ok(GroundTruthFile { entries })
}

pub fn serialize_ground_truth(gt: &GroundTruthFile) -> String {
    let mut s = String::new();
    for e in &gt.entries {
        for c in e.quad.coords() {
            let _ = write!(s, "{c},");
        }
        s.push_str(&e.text);
        s.push('\n');
    }
    s
}

fn file_error(path: &Path, e: impl std::error::Error + Send + Sync + 'static) -> EvalError {
    EvalError::File {
        path: path.display().to_string(),
        source: Box::new(e),
    }
}

fn read_text(path: &Path) -> Result<String, EvalError> {
    std::fs::read_to_string(path).map_err(|e| file_error(path, e))
}

/// Image key of a `gt_<key>.txt` or `res_<key>.txt` file name.
pub fn image_key(path: &Path) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    let key = stem.strip_prefix("gt_").or_else(|| stem.strip_prefix("res_")).unwrap_or(stem);
    Some(key.to_string())
}

fn txt_files(dir: &Path) -> Result<Vec<std::path::PathBuf>, EvalError> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| file_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_ground_truth_dir(dir: &Path) -> Result<BTreeMap<String, GroundTruthFile>, EvalError> {
    let mut out = BTreeMap::new();
    for path in txt_files(dir)? {
        let gt = parse_ground_truth(&read_text(&path)?).map_err(|e| file_error(&path, e))?;
        out.insert(image_key(&path).unwrap_or_default(), gt);
    }
    Ok(out)
}

pub fn load_detection_dir(dir: &Path) -> Result<BTreeMap<String, Vec<DetectionCandidate>>, EvalError> {
    let mut out = BTreeMap::new();
    for path in txt_files(dir)? {
        let dets = parse_candidates(&read_text(&path)?).map_err(|e: InferenceError| file_error(&path, e))?;
        out.insert(image_key(&path).unwrap_or_default(), dets);
    }
    Ok(out)
}

/// Image files (`.png`, `.ppm`, `.pnm`) in `dir`, sorted by name.
pub fn image_files(dir: &Path) -> Result<Vec<std::path::PathBuf>, EvalError> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| file_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Scenes stored as `<key>.png` next to `gt_<key>.txt`. Images without a
/// ground-truth file are an error.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<(String, RgbImage, GroundTruthFile)>, EvalError> {
    let mut out = Vec::new();
    for path in image_files(dir)? {
        let key = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let gt_path = dir.join(format!("gt_{key}.txt"));
        let gt = parse_ground_truth(&read_text(&gt_path)?).map_err(|e| file_error(&gt_path, e))?;
        let image = crate::image_ops::load_image(&path).map_err(|e| file_error(&path, e))?;
        out.push((key, image, gt));
    }
    Ok(out)
}

/// Writes `<key>.png` and `gt_<key>.txt`.
pub fn save_scene(dir: &Path, key: &str, scene: &SyntheticScene) -> Result<(), EvalError> {
    let img = dir.join(format!("{key}.png"));
    crate::image_ops::save_image(&scene.image, &img).map_err(|e| file_error(&img, e))?;
    let gt = dir.join(format!("gt_{key}.txt"));
    std::fs::write(&gt, serialize_ground_truth(&GroundTruthFile::from_annotations(&scene.annotations)))
        .map_err(|e| file_error(&gt, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub key: String,
    /// `(detection index, ground-truth index, IoU)`.
    pub matches: Vec<(usize, usize, f64)>,
    /// Detections dropped because they only hit don't-care regions.
    pub excluded: Vec<usize>,
    pub counted_detections: usize,
    pub care_ground_truths: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub matched: usize,
    pub counted_detections: usize,
    pub care_ground_truths: usize,
    pub per_image: Vec<ImageResult>,
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" { "0".into() } else { s.into() }
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        format!(
            "P={} R={} F={}",
            trim_float(self.precision),
            trim_float(self.recall),
            trim_float(self.f_measure)
        )
    }

    /// Human-readable summary followed by `key=value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.summary_line());
        let _ = writeln!(
            s,
            "{} images, {} of {} counted detections matched {} care ground truths",
            self.per_image.len(),
            self.matched,
            self.counted_detections,
            self.care_ground_truths
        );
        let _ = writeln!(s, "precision={:.6}", self.precision);
        let _ = writeln!(s, "recall={:.6}", self.recall);
        let _ = writeln!(s, "f_measure={:.6}", self.f_measure);
        let _ = writeln!(s, "matched={}", self.matched);
        let _ = writeln!(s, "detections={}", self.counted_detections);
        let _ = writeln!(s, "ground_truths={}", self.care_ground_truths);
        s
    }
}

/// Greedy one-to-one matching for a single image.
pub fn match_image(key: &str, dets: &[DetectionCandidate], gt: &GroundTruthFile, iou_threshold: f64) -> ImageResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score));
    let mut taken = vec![false; gt.entries.len()];
    let mut matches = Vec::new();
    let mut excluded = Vec::new();
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        let mut hits_dont_care = false;
        for (g, e) in gt.entries.iter().enumerate() {
            let v = iou(&dets[d].quad, &e.quad);
            if v < iou_threshold {
                continue;
            }
            if e.is_dont_care() {
                hits_dont_care = true;
            } else if !taken[g] && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) => {
                taken[g] = true;
                matches.push((d, g, v));
            }
            None if hits_dont_care => excluded.push(d),
            None => {}
        }
    }
    ImageResult {
        key: key.to_string(),
        counted_detections: dets.len() - excluded.len(),
        care_ground_truths: gt.entries.iter().filter(|e| !e.is_dont_care()).count(),
        matches,
        excluded,
    }
}

/// Precision, recall and F-measure over all images. Recall is 1 when there
/// is no care ground truth and precision 0 when no detection is counted.
pub fn evaluate(
    detections: &BTreeMap<String, Vec<DetectionCandidate>>,
    ground_truth: &BTreeMap<String, GroundTruthFile>,
    iou_threshold: f64,
) -> Result<EvalReport, EvalError> {
    if let Some(k) = detections.keys().find(|k| !ground_truth.contains_key(*k)) {
        return Err(EvalError::KeyMismatch(k.clone()));
    }
    let per_image: Vec<ImageResult> = ground_truth
        .iter()
        .map(|(k, gt)| match_image(k, detections.get(k).map_or(&[][..], Vec::as_slice), gt, iou_threshold))
        .collect();
    let matched: usize = per_image.iter().map(|r| r.matches.len()).sum();
    let counted: usize = per_image.iter().map(|r| r.counted_detections).sum();
    let care: usize = per_image.iter().map(|r| r.care_ground_truths).sum();
    let precision = if counted == 0 { 0.0 } else { matched as f64 / counted as f64 };
    let recall = if care == 0 { 1.0 } else { matched as f64 / care as f64 };
    let f_measure = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EvalReport {
        precision,
        recall,
        f_measure,
        matched,
        counted_detections: counted,
        care_ground_truths: care,
        per_image,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub boxes: usize,
    /// Short side range (px).
    pub short_side: (f64, f64),
    /// Long / short ratio range.
    pub aspect: (f64, f64),
    /// Minimum clearance between boxes (px).
    pub gap: f64,
    pub noise_mean: f32,
    pub noise_sigma: f32,
    /// Rejected placements tolerated per box.
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 320,
            boxes: 3,
            short_side: (16.0, 32.0),
            aspect: (2.0, 8.0),
            gap: 4.0,
            noise_mean: 0.5,
            noise_sigma: 0.15,
            max_attempts: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
}

/// Vertex coordinates are snapped to multiples of 1/64 px.
const SNAP: f64 = 64.0;

fn snap(q: &Quadrilateral) -> Quadrilateral {
    q.map(|p| Point2::new((p.x * SNAP).round() / SNAP, (p.y * SNAP).round() / SNAP)).normalized()
}

/// Striped rotated rectangles over Gaussian noise. Boxes never overlap;
/// every vertex lies inside the image.
pub fn generate_synthetic_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<SyntheticScene, EvalError> {
    if cfg.width < 64 || cfg.height < 64 {
        return Err(EvalError::Config(format!("image {}x{} is smaller than 64 px", cfg.width, cfg.height)));
    }
    let (s_lo, s_hi) = cfg.short_side;
    let (a_lo, a_hi) = cfg.aspect;
    if !(s_lo > 0.0 && s_lo <= s_hi && a_lo >= 1.0 && a_lo <= a_hi) {
        return Err(EvalError::Config("bad short side or aspect range".into()));
    }
    let noise = Normal::new(cfg.noise_mean, cfg.noise_sigma.max(0.0)).map_err(|e| EvalError::Config(e.to_string()))?;
    let mut image = RgbImage::from_fn(cfg.width, cfg.height, |_, _| {
        Rgb(std::array::from_fn(|_| noise.sample(rng).clamp(0.0, 1.0)))
    });

    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut placed: Vec<(Quadrilateral, Quadrilateral)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < cfg.boxes {
        if attempts >= cfg.max_attempts * cfg.boxes {
            return Err(EvalError::PlacementFailure {
                placed: placed.len(),
                requested: cfg.boxes,
                attempts,
            });
        }
        attempts += 1;
        let short = rng.random_range(s_lo..=s_hi);
        let long = short * rng.random_range(a_lo..=a_hi);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let center = Point2::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
        let quad = snap(&Quadrilateral::rotated_rect(center, long, short, angle));
        let (x0, y0, x1, y1) = quad.bounds();
        if x0 < 0.0 || y0 < 0.0 || x1 > w || y1 > h {
            continue;
        }
        let keep_out = Quadrilateral::rotated_rect(center, long + 2.0 * cfg.gap, short + 2.0 * cfg.gap, angle);
        if placed.iter().any(|(_, k)| intersection_area(&keep_out, k) > 0.0) {
            continue;
        }
        render_box(&mut image, &quad, center, angle, short, rng);
        placed.push((quad, keep_out));
    }
    Ok(SyntheticScene {
        image,
        annotations: placed.into_iter().map(|(q, _)| Annotation::new(q)).collect(),
    })
}

/// Fills the quad with stripes across its long axis: dark ink on a light
/// ground, or the reverse.
fn render_box<R: Rng + ?Sized>(image: &mut RgbImage, quad: &Quadrilateral, center: Point2, angle: f64, short: f64, rng: &mut R) {
    let light: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.0));
    let dark: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.2));
    let (fg, bg) = if rng.random_bool(0.5) { (dark, light) } else { (light, dark) };
    let period = short * rng.random_range(0.5..0.8);
    let (ux, uy) = (angle.cos(), angle.sin());
    let (x0, y0, x1, y1) = quad.bounds();
    for py in (y0.floor().max(0.0) as u32)..(y1.ceil() as u32).min(image.height()) {
        for px in (x0.floor().max(0.0) as u32)..(x1.ceil() as u32).min(image.width()) {
            let p = Point2::new(px as f64 + 0.5, py as f64 + 0.5);
            if !quad.contains(p) {
                continue;
            }
            let along = (p.x - center.x) * ux + (p.y - center.y) * uy;
            let phase = (along / period).rem_euclid(1.0);
            image.put_pixel(px, py, Rgb(if phase < 0.5 { fg } else { bg }));
        }
    }
}
