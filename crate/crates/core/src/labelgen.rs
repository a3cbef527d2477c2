//! Dense training targets from word quadrilaterals.
//!
//! Every cell `(w, h)` of the quarter-resolution output map is anchored at
//! input pixel `(4w, 4h)`. A cell is positive for a word when the word's
//! short side passes the size gate, the anchor lies inside the word, and the
//! anchor is within `0.2 × short side` of the word's center line. Positive
//! cells regress the eight vertex offsets relative to their anchor.

use log::warn;
use rand::Rng;
use thiserror::Error;

use crate::geometry::{centerline_distance, short_side, transform_quad, Point2, QuarterTurn, Quadrilateral};
use crate::image_ops::{crop_padded, rotate_image, scale_image, RgbImage};
use crate::tensorcore::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("tile size {tile} is not divisible by the down-sampling factor {factor}")]
    TileSize { tile: usize, factor: usize },
    #[error("annotation {index}: regression target {offset:.1} at cell ({w}, {h}) is outside (-{limit}, {limit})")]
    TargetOutOfRange {
        index: usize,
        w: usize,
        h: usize,
        offset: f64,
        limit: f64,
    },
}

/// A word-level ground-truth polygon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub quad: Quadrilateral,
    /// ICDAR `###` transcription: the region is excluded from training and
    /// evaluation.
    pub is_dont_care: bool,
    /// The quad extends past the tile it was cut into.
    pub clipped: bool,
}

impl Annotation {
    pub fn new(quad: Quadrilateral) -> Self {
        Self {
            quad,
            is_dont_care: false,
            clipped: false,
        }
    }

    pub fn dont_care(quad: Quadrilateral) -> Self {
        Self {
            quad,
            is_dont_care: true,
            clipped: false,
        }
    }
}

/// Short-side thresholds (pixels) separating positive, NOT-CARE and negative
/// words.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeGate {
    pub pos_lo: f64,
    pub pos_hi: f64,
    pub care_lo: f64,
    pub care_hi: f64,
}

impl Default for SizeGate {
    fn default() -> Self {
        Self {
            pos_lo: 32.0 * 0.5,
            pos_hi: 32.0 * 2.0,
            care_lo: 32.0 * 2f64.powf(-1.5),
            care_hi: 32.0 * 2f64.powf(1.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeClass {
    Positive,
    NotCare,
    Negative,
}

impl SizeGate {
    pub fn classify(&self, short: f64) -> SizeClass {
        if (self.pos_lo..=self.pos_hi).contains(&short) {
            SizeClass::Positive
        } else if (self.care_lo..=self.care_hi).contains(&short) {
            SizeClass::NotCare
        } else {
            SizeClass::Negative
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelConfig {
    pub down_factor: usize,
    /// Half-width of the positive band as a fraction of the short side.
    pub band_ratio: f64,
    pub gate: SizeGate,
    /// Regression targets must lie strictly inside `(-max_offset, max_offset)`.
    pub max_offset: f64,
    /// Fail on out-of-range targets instead of dropping the annotation.
    pub strict: bool,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            down_factor: 4,
            band_ratio: 0.2,
            gate: SizeGate::default(),
            max_offset: 400.0,
            strict: false,
        }
    }
}

/// Classification, regression and care targets for one tile.
///
/// `cls` and `care` are `[H, W]`; `loc` is channel-first `[8, H, W]` like the
/// network output, channel `2n` / `2n+1` holding the x / y offset of vertex
/// `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMaps {
    pub cls: Tensor,
    pub loc: Tensor,
    pub care: Tensor,
    pub down_factor: usize,
}

impl LabelMaps {
    pub fn empty(map_h: usize, map_w: usize, down_factor: usize) -> Self {
        Self {
            cls: Tensor::zeros(&[map_h, map_w]),
            loc: Tensor::zeros(&[8, map_h, map_w]),
            care: Tensor::full(&[map_h, map_w], 1.0),
            down_factor,
        }
    }

    pub fn height(&self) -> usize {
        self.cls.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.cls.shape()[1]
    }

    pub fn is_positive(&self, w: usize, h: usize) -> bool {
        self.cls.data()[h * self.width() + w] > 0.5
    }

    pub fn positive_count(&self) -> usize {
        self.cls.data().iter().filter(|&&v| v > 0.5).count()
    }

    pub fn loc_row(&self, w: usize, h: usize) -> [f32; 8] {
        let plane = self.height() * self.width();
        let i = h * self.width() + w;
        std::array::from_fn(|c| self.loc.data()[c * plane + i])
    }
}

fn anchor(w: usize, h: usize, down: usize) -> Point2 {
    Point2::new((w * down) as f64, (h * down) as f64)
}

/// Inclusive range of map cells whose anchors may fall in `[lo, hi]`.
fn cell_range(lo: f64, hi: f64, down: usize, cells: usize) -> std::ops::Range<usize> {
    let d = down as f64;
    let a = (lo / d).ceil().max(0.0);
    let b = (hi / d).floor();
    if b < 0.0 || a as usize >= cells || b < a {
        return 0..0;
    }
    a as usize..(b as usize + 1).min(cells)
}

/// Builds the label maps for a `tile_size × tile_size` tile whose
/// annotations are already expressed in tile coordinates.
pub fn make_label_maps(tile_size: usize, annotations: &[Annotation], cfg: &LabelConfig) -> Result<LabelMaps, LabelError> {
    let down = cfg.down_factor;
    if down == 0 || !tile_size.is_multiple_of(down) {
        return Err(LabelError::TileSize {
            tile: tile_size,
            factor: down,
        });
    }
    let side = tile_size / down;
    let mut maps = LabelMaps::empty(side, side, down);
    let cells = side * side;
    // best (distance, annotation) per positive cell
    let mut owner: Vec<Option<(f64, usize)>> = vec![None; cells];
    let mut not_care = vec![false; cells];

    for (index, ann) in annotations.iter().enumerate() {
        let q = &ann.quad;
        if !q.is_finite() || q.is_degenerate() {
            warn!("skipping degenerate annotation {index}");
            continue;
        }
        let (x0, y0, x1, y1) = q.bounds();
        let rows = cell_range(y0, y1, down, side);
        let cols = cell_range(x0, x1, down, side);
        let inside = || {
            let cols = cols.clone();
            rows.clone()
                .flat_map(move |h| cols.clone().map(move |w| (w, h)))
                .filter(|&(w, h)| q.contains(anchor(w, h, down)))
        };
        let ss = short_side(q);
        let class = if ann.is_dont_care {
            SizeClass::NotCare
        } else {
            cfg.gate.classify(ss)
        };
        match class {
            SizeClass::Negative => {}
            SizeClass::NotCare => {
                for (w, h) in inside() {
                    not_care[h * side + w] = true;
                }
            }
            SizeClass::Positive => {
                let band = cfg.band_ratio * ss;
                let mut positives = Vec::new();
                let mut rejected = false;
                for (w, h) in inside() {
                    let a = anchor(w, h, down);
                    let d = centerline_distance(a, q);
                    if d > band {
                        not_care[h * side + w] = true;
                        continue;
                    }
                    if let Some(offset) = out_of_range_offset(q, a, cfg.max_offset) {
                        if cfg.strict {
                            return Err(LabelError::TargetOutOfRange {
                                index,
                                w,
                                h,
                                offset,
                                limit: cfg.max_offset,
                            });
                        }
                        rejected = true;
                    }
                    positives.push((w, h, d));
                }
                if rejected {
                    warn!("annotation {index}: regression targets exceed ±{}, treating it as NOT-CARE", cfg.max_offset);
                    for (w, h, _) in positives {
                        not_care[h * side + w] = true;
                    }
                    continue;
                }
                for (w, h, d) in positives {
                    let slot = &mut owner[h * side + w];
                    if slot.is_none_or(|(best, _)| d < best) {
                        *slot = Some((d, index));
                    }
                }
            }
        }
    }

    let cls = maps.cls.data_mut();
    for (i, o) in owner.iter().enumerate() {
        if o.is_some() {
            cls[i] = 1.0;
        }
    }
    let care = maps.care.data_mut();
    for i in 0..cells {
        if owner[i].is_none() && not_care[i] {
            care[i] = 0.0;
        }
    }
    let loc = maps.loc.data_mut();
    for (i, o) in owner.iter().enumerate() {
        let Some((_, index)) = *o else { continue };
        let (w, h) = (i % side, i / side);
        let a = anchor(w, h, down);
        for (n, v) in annotations[index].quad.vertices.iter().enumerate() {
            loc[(2 * n) * cells + i] = (v.x - a.x) as f32;
            loc[(2 * n + 1) * cells + i] = (v.y - a.y) as f32;
        }
    }
    Ok(maps)
}

fn out_of_range_offset(q: &Quadrilateral, a: Point2, limit: f64) -> Option<f64> {
    q.vertices
        .iter()
        .flat_map(|v| [v.x - a.x, v.y - a.y])
        .find(|o| o.abs() >= limit)
}

/// Quadrilateral encoded by a regression row at map cell `(w, h)`.
pub fn decode_quad(loc_row: &[f32; 8], w: usize, h: usize, down_factor: usize) -> Quadrilateral {
    let a = anchor(w, h, down_factor);
    Quadrilateral::new(std::array::from_fn(|n| {
        Point2::new(loc_row[2 * n] as f64 + a.x, loc_row[2 * n + 1] as f64 + a.y)
    }))
}

/// Random-crop augmentation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSampler {
    pub tile_size: u32,
    pub scales: Vec<f64>,
    pub rotate: bool,
}

impl Default for TileSampler {
    fn default() -> Self {
        Self {
            tile_size: 320,
            scales: vec![0.5, 1.0, 2.0],
            rotate: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingTile {
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
    pub scale: f64,
    pub rotation: QuarterTurn,
    /// Crop origin in the scaled, rotated image.
    pub origin: (u32, u32),
}

/// Cuts one training tile: random scale from the sampler's set, random
/// quarter-turn rotation, random crop (zero-padded bottom/right when the
/// transformed image is smaller than the tile).
pub fn sample_training_tile<R: Rng + ?Sized>(
    image: &RgbImage,
    annotations: &[Annotation],
    rng: &mut R,
    sampler: &TileSampler,
) -> TrainingTile {
    let scale = if sampler.scales.is_empty() {
        1.0
    } else {
        sampler.scales[rng.random_range(0..sampler.scales.len())]
    };
    let rotation = if sampler.rotate {
        QuarterTurn::from_index(rng.random_range(0..4))
    } else {
        QuarterTurn::R0
    };
    let size = sampler.tile_size;
    let w = image.width().max(1) as f64;
    let h = image.height().max(1) as f64;
    let (rw, rh) = rotation.rotated_size((w * scale).round(), (h * scale).round());
    let x0 = rng.random_range(0..=(rw as u32).saturating_sub(size));
    let y0 = rng.random_range(0..=(rh as u32).saturating_sub(size));
    cut_tile(image, annotations, scale, rotation, (x0, y0), size)
}

/// Deterministic part of [`sample_training_tile`].
pub fn cut_tile(
    image: &RgbImage,
    annotations: &[Annotation],
    scale: f64,
    rotation: QuarterTurn,
    origin: (u32, u32),
    size: u32,
) -> TrainingTile {
    let scaled = scale_image(image, scale);
    let frame = (scaled.width() as f64, scaled.height() as f64);
    let rotated = rotate_image(&scaled, rotation);
    let tile = crop_padded(&rotated, origin.0, origin.1, size);
    let o = Point2::new(origin.0 as f64, origin.1 as f64);
    let s = size as f64;
    let annotations = annotations
        .iter()
        .filter_map(|a| {
            let quad = transform_quad(&a.quad, scale, rotation, frame, o);
            let (x0, y0, x1, y1) = quad.bounds();
            if x1 <= 0.0 || y1 <= 0.0 || x0 >= s || y0 >= s {
                return None;
            }
            let clipped = a.clipped || x0 < 0.0 || y0 < 0.0 || x1 > s || y1 > s;
            Some(Annotation {
                quad,
                is_dont_care: a.is_dont_care,
                clipped,
            })
        })
        .collect();
    TrainingTile {
        image: tile,
        annotations,
        scale,
        rotation,
        origin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::polygon_area;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn word() -> Quadrilateral {
        Quadrilateral::from_coords([40., 40., 140., 40., 140., 72., 40., 72.])
    }

    fn at(maps: &LabelMaps, t: &Tensor, w: usize, h: usize) -> f32 {
        t.data()[h * maps.width() + w]
    }

    #[test]
    fn gate_thresholds() {
        let g = SizeGate::default();
        assert!((g.care_lo - 11.3137).abs() < 1e-3);
        assert!((g.care_hi - 90.5097).abs() < 1e-3);
        assert!(g.care_lo < g.pos_lo && g.pos_lo < g.pos_hi && g.pos_hi < g.care_hi);
        assert_eq!(g.classify(16.0), SizeClass::Positive);
        assert_eq!(g.classify(64.0), SizeClass::Positive);
        assert_eq!(g.classify(12.0), SizeClass::NotCare);
        assert_eq!(g.classify(80.0), SizeClass::NotCare);
        assert_eq!(g.classify(8.0), SizeClass::Negative);
        assert_eq!(g.classify(100.0), SizeClass::Negative);
    }

    #[test]
    fn hand_evaluated_cells() {
        let maps = make_label_maps(320, &[Annotation::new(word())], &LabelConfig::default()).unwrap();
        assert_eq!(maps.cls.shape(), &[80, 80]);
        assert_eq!(at(&maps, &maps.cls, 20, 14), 1.0);
        assert_eq!(maps.loc_row(20, 14), [-40., -16., 60., -16., 60., 16., -40., 16.]);
        // anchor (80,44): inside, 12 px from the center line > 6.4
        assert_eq!(at(&maps, &maps.cls, 20, 11), 0.0);
        assert_eq!(at(&maps, &maps.care, 20, 11), 0.0);
        // outside the word: negative
        assert_eq!(at(&maps, &maps.care, 2, 2), 1.0);
        assert_eq!(at(&maps, &maps.cls, 2, 2), 0.0);
    }

    #[test]
    fn tiny_words_are_negative() {
        let q = Quadrilateral::axis_aligned(40.0, 40.0, 60.0, 8.0);
        let maps = make_label_maps(320, &[Annotation::new(q)], &LabelConfig::default()).unwrap();
        assert_eq!(maps.positive_count(), 0);
        assert!(maps.care.data().iter().all(|&c| c == 1.0));
    }

    #[test]
    fn no_annotations() {
        let maps = make_label_maps(64, &[], &LabelConfig::default()).unwrap();
        assert!(maps.cls.data().iter().all(|&v| v == 0.0));
        assert!(maps.care.data().iter().all(|&v| v == 1.0));
        assert!(maps.loc.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dont_care_and_not_care_sizes() {
        let dc = Annotation::dont_care(word());
        let maps = make_label_maps(320, &[dc], &LabelConfig::default()).unwrap();
        assert_eq!(maps.positive_count(), 0);
        assert_eq!(at(&maps, &maps.care, 20, 14), 0.0);
        let mid = Quadrilateral::axis_aligned(40.0, 40.0, 100.0, 12.0);
        let maps = make_label_maps(320, &[Annotation::new(mid)], &LabelConfig::default()).unwrap();
        assert_eq!(maps.positive_count(), 0);
        assert_eq!(at(&maps, &maps.care, 20, 12), 0.0);
    }

    #[test]
    fn positives_are_cared() {
        let maps = make_label_maps(320, &[Annotation::new(word())], &LabelConfig::default()).unwrap();
        for (c, k) in maps.cls.data().iter().zip(maps.care.data()) {
            assert!(*c == 0.0 || *k == 1.0);
        }
    }

    #[test]
    fn bad_tile_size() {
        assert!(matches!(
            make_label_maps(321, &[], &LabelConfig::default()),
            Err(LabelError::TileSize { .. })
        ));
    }

    #[test]
    fn long_lines_out_of_range() {
        let line = Quadrilateral::axis_aligned(0.0, 100.0, 900.0, 32.0);
        let strict = LabelConfig {
            strict: true,
            ..LabelConfig::default()
        };
        assert!(matches!(
            make_label_maps(1024, &[Annotation::new(line)], &strict),
            Err(LabelError::TargetOutOfRange { .. })
        ));
        let lenient = make_label_maps(1024, &[Annotation::new(line)], &LabelConfig::default()).unwrap();
        assert_eq!(lenient.positive_count(), 0);
        assert!(lenient.care.data().contains(&0.0));
    }

    #[test]
    fn decode_examples() {
        let q = decode_quad(&[-40., -16., 60., -16., 60., 16., -40., 16.], 20, 14, 4);
        assert_eq!(q, word());
        let z = decode_quad(&[0.0; 8], 0, 0, 4);
        assert_eq!(z, Quadrilateral::from_coords([0.0; 8]));
        let z = decode_quad(&[0.0; 8], 3, 5, 4);
        assert_eq!(z, Quadrilateral::from_coords([12., 20., 12., 20., 12., 20., 12., 20.]));
    }

    #[test]
    fn overlapping_words_take_nearest_center_line() {
        let a = Quadrilateral::axis_aligned(40.0, 40.0, 100.0, 32.0);
        let b = Quadrilateral::axis_aligned(40.0, 50.0, 100.0, 32.0);
        let maps = make_label_maps(320, &[Annotation::new(a), Annotation::new(b)], &LabelConfig::default()).unwrap();
        // anchor (80,60): 4 px from a's line (y=56), 6 px from b's (y=66)
        assert_eq!(maps.loc_row(20, 15)[1], -20.0);
        // anchor (80,64): 8 px from a, 2 px from b
        assert_eq!(maps.loc_row(20, 16)[1], 50.0 - 64.0);
    }

    #[test]
    fn identity_tile() {
        let img = RgbImage::from_pixel(320, 320, image::Rgb([0.2, 0.4, 0.6]));
        let anns = [Annotation::new(word())];
        let t = cut_tile(&img, &anns, 1.0, QuarterTurn::R0, (0, 0), 320);
        assert_eq!(t.image, img);
        assert_eq!(t.annotations[0].quad, word());
        assert!(!t.annotations[0].clipped);
    }

    #[test]
    fn rotated_tile_keeps_area_and_halved_tile_halves_short_side() {
        let img = RgbImage::new(320, 320);
        let anns = [Annotation::new(word())];
        let t = cut_tile(&img, &anns, 1.0, QuarterTurn::R180, (0, 0), 320);
        assert_eq!(polygon_area(&t.annotations[0].quad), polygon_area(&word()));
        let half = cut_tile(&img, &anns, 0.5, QuarterTurn::R0, (0, 0), 320);
        assert_eq!(short_side(&half.annotations[0].quad), 16.0);
        assert_eq!(half.image.width(), 320);
        let maps = make_label_maps(320, &half.annotations, &LabelConfig::default()).unwrap();
        assert!(maps.positive_count() > 0);
        let quarter = cut_tile(&img, &anns, 0.25, QuarterTurn::R0, (0, 0), 320);
        let maps = make_label_maps(320, &quarter.annotations, &LabelConfig::default()).unwrap();
        assert_eq!(maps.positive_count(), 0);
    }

    #[test]
    fn sampled_tiles_have_requested_size() {
        let img = RgbImage::new(400, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..8 {
            let t = sample_training_tile(&img, &[Annotation::new(word())], &mut rng, &TileSampler::default());
            assert_eq!((t.image.width(), t.image.height()), (320, 320));
            for a in &t.annotations {
                assert!(a.quad.signed_area() > 0.0);
            }
        }
    }
}
