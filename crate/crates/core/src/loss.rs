//! Bi-task training objective.
//!
//! `total = cls + λ_loc · loc`, where `cls` is a squared hinge loss over the
//! classification map restricted to the mined pixel set, and `loc` is a
//! smooth-L1 loss over the eight regression channels at positive pixels. The
//! regression head emits sigmoid values that are stretched to pixel offsets
//! by `800 z − 400` before the loss.

use rand::seq::index::sample;
use rand::Rng;

use crate::labelgen::LabelMaps;
use crate::tensorcore::Tensor;

pub const SCALE_SHIFT_GAIN: f32 = 800.0;
pub const SCALE_SHIFT_OFFSET: f32 = 400.0;

/// How the summed smooth-L1 loss is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum LocNormalization {
    /// Divide by `8 × positives`.
    #[default]
    PerPositiveChannel,
    /// Plain sum over positives and channels.
    Sum,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// λ_loc while the classifier warms up.
    pub lambda_loc_warmup: f32,
    /// λ_loc afterwards.
    pub lambda_loc: f32,
    /// Iteration at which λ_loc switches.
    pub cls_warmup_iters: usize,
    pub hard_negative_ratio_early: f32,
    pub hard_negative_ratio_late: f32,
    pub hard_ratio_switch_iter: usize,
    /// Negatives kept per positive.
    pub negative_to_positive_ratio: f32,
    /// Hardest negatives kept when a tile has no positives.
    pub empty_tile_negatives: usize,
    pub loc_normalization: LocNormalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_loc_warmup: 0.01,
            lambda_loc: 0.5,
            cls_warmup_iters: 5_000,
            hard_negative_ratio_early: 0.2,
            hard_negative_ratio_late: 0.7,
            hard_ratio_switch_iter: 3_000,
            negative_to_positive_ratio: 3.0,
            empty_tile_negatives: 64,
            loc_normalization: LocNormalization::PerPositiveChannel,
        }
    }
}

impl LossConfig {
    pub fn lambda_loc_at(&self, iteration: usize) -> f32 {
        if iteration < self.cls_warmup_iters {
            self.lambda_loc_warmup
        } else {
            self.lambda_loc
        }
    }

    pub fn hard_negative_ratio_at(&self, iteration: usize) -> f32 {
        if iteration < self.hard_ratio_switch_iter {
            self.hard_negative_ratio_early
        } else {
            self.hard_negative_ratio_late
        }
    }
}

pub fn scale_shift(z: f32) -> f32 {
    SCALE_SHIFT_GAIN * z - SCALE_SHIFT_OFFSET
}

pub fn scale_shift_forward(z: &Tensor) -> Tensor {
    z.map(scale_shift)
}

/// The map is affine, so its backward pass is a constant gain.
pub fn scale_shift_backward(dy: &Tensor) -> Tensor {
    dy.map(|g| g * SCALE_SHIFT_GAIN)
}

/// Squared hinge loss of one pixel.
pub fn hinge_pixel(pred: f64, target: f64) -> f64 {
    if target > 0.5 {
        (1.0 - pred).max(0.0).powi(2)
    } else {
        pred.max(0.0).powi(2)
    }
}

fn hinge_pixel_grad(pred: f64, target: f64) -> f64 {
    if target > 0.5 {
        -2.0 * (1.0 - pred).max(0.0)
    } else {
        2.0 * pred.max(0.0)
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Negative-mining parameters for one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningParams {
    pub negative_to_positive_ratio: f32,
    pub hard_negative_ratio: f32,
    pub empty_tile_negatives: usize,
}

/// Chooses the pixels that enter the classification loss: every positive, and
/// a balanced budget of cared-for negatives made of the hardest ones plus a
/// uniform random fill.
pub fn select_active<R: Rng + ?Sized>(
    pred: &Tensor,
    target: &Tensor,
    care: &Tensor,
    params: &MiningParams,
    rng: &mut R,
) -> Tensor {
    let n = target.len();
    let mut active = Tensor::zeros(target.shape());
    let mut negatives = Vec::new();
    let mut positives = 0usize;
    for i in 0..n {
        if care.data()[i] < 0.5 {
            continue;
        }
        if target.data()[i] > 0.5 {
            active.data_mut()[i] = 1.0;
            positives += 1;
        } else {
            negatives.push(i);
        }
    }
    let (budget, hard) = if positives == 0 {
        let k = params.empty_tile_negatives.min(negatives.len());
        (k, k)
    } else {
        let budget = ((params.negative_to_positive_ratio as f64 * positives as f64).round() as usize).min(negatives.len());
        let hard = ((params.hard_negative_ratio as f64 * budget as f64).round() as usize).min(budget);
        (budget, hard)
    };
    if budget == negatives.len() {
        for &i in &negatives {
            active.data_mut()[i] = 1.0;
        }
        return active;
    }
    // hardest first; ties keep the earlier pixel
    let loss = |i: usize| hinge_pixel(pred.data()[i] as f64, 0.0);
    negatives.sort_by(|&a, &b| loss(b).total_cmp(&loss(a)).then(a.cmp(&b)));
    for &i in &negatives[..hard] {
        active.data_mut()[i] = 1.0;
    }
    let rest = &negatives[hard..];
    let fill = budget - hard;
    if fill > 0 {
        let mut picked: Vec<usize> = sample(rng, rest.len(), fill).into_iter().collect();
        picked.sort_unstable();
        for j in picked {
            active.data_mut()[rest[j]] = 1.0;
        }
    }
    active
}

/// Hinge loss over a fixed active mask, normalized by `norm` (`S²`), with its
/// gradient w.r.t. the predictions.
pub fn hinge_cls_loss_masked(pred: &Tensor, target: &Tensor, active: &Tensor, norm: f64) -> (f64, Tensor) {
    let mut grad = Tensor::zeros(target.shape());
    let mut sum = 0.0f64;
    for i in 0..target.len() {
        if active.data()[i] < 0.5 {
            continue;
        }
        let (p, t) = (pred.data()[i] as f64, target.data()[i] as f64);
        sum += hinge_pixel(p, t);
        grad.data_mut()[i] = (hinge_pixel_grad(p, t) / norm) as f32;
    }
    (sum / norm, grad)
}

#[derive(Debug, Clone)]
pub struct ClsLoss {
    pub loss: f64,
    pub grad: Tensor,
    pub active_mask: Tensor,
}

/// Classification loss with class balancing and hard negative mining.
/// `input_area` is `S²`, the pixel count of the input tile.
pub fn hinge_cls_loss<R: Rng + ?Sized>(
    pred: &Tensor,
    target: &Tensor,
    care: &Tensor,
    params: &MiningParams,
    input_area: f64,
    rng: &mut R,
) -> ClsLoss {
    let active_mask = select_active(pred, target, care, params, rng);
    let (loss, grad) = hinge_cls_loss_masked(pred, target, &active_mask, input_area);
    ClsLoss {
        loss,
        grad,
        active_mask,
    }
}

/// Smooth-L1 regression loss over `[8, H, W]` offsets (after Scale&Shift) at
/// pixels where `cls_target` is positive. Returns the loss and its gradient
/// w.r.t. the offsets.
pub fn smooth_l1_loc_loss(pred_offsets: &Tensor, target: &Tensor, cls_target: &Tensor, norm: LocNormalization) -> (f64, Tensor) {
    masked_smooth_l1(pred_offsets, target, cls_target, norm, |v| v as f64)
}

/// Shared smooth-L1 kernel; `offset` maps a stored prediction to pixels and
/// the returned gradient is w.r.t. that pixel value.
fn masked_smooth_l1(
    pred: &Tensor,
    target: &Tensor,
    cls_target: &Tensor,
    norm: LocNormalization,
    offset: impl Fn(f32) -> f64,
) -> (f64, Tensor) {
    let plane = cls_target.len();
    let mut grad = Tensor::zeros(pred.shape());
    let positives = cls_target.data().iter().filter(|&&v| v > 0.5).count();
    if positives == 0 {
        return (0.0, grad);
    }
    let denom = match norm {
        LocNormalization::PerPositiveChannel => (8 * positives) as f64,
        LocNormalization::Sum => 1.0,
    };
    let mut sum = 0.0f64;
    for i in 0..plane {
        if cls_target.data()[i] <= 0.5 {
            continue;
        }
        for c in 0..8 {
            let j = c * plane + i;
            let x = target.data()[j] as f64 - offset(pred.data()[j]);
            sum += smooth_l1(x);
            grad.data_mut()[j] = ((-x).clamp(-1.0, 1.0) / denom) as f32;
        }
    }
    (sum / denom, grad)
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub cls_part: f64,
    pub loc_part: f64,
    pub lambda_loc: f32,
    /// d total / d cls prediction, `[H, W]`.
    pub cls_gradient: Tensor,
    /// d total / d raw (pre-Scale&Shift) regression output, `[8, H, W]`.
    pub loc_gradient: Tensor,
    pub active_mask: Tensor,
}

/// Full objective for one tile at a given training iteration.
///
/// `pred_cls` holds the `H × W` classification scores and `pred_loc_raw` the
/// `8 × H × W` sigmoid outputs of the regression head.
pub fn combined_loss<R: Rng + ?Sized>(
    pred_cls: &Tensor,
    pred_loc_raw: &Tensor,
    labels: &LabelMaps,
    cfg: &LossConfig,
    rng: &mut R,
    iteration: usize,
) -> LossOutput {
    let params = MiningParams {
        negative_to_positive_ratio: cfg.negative_to_positive_ratio,
        hard_negative_ratio: cfg.hard_negative_ratio_at(iteration),
        empty_tile_negatives: cfg.empty_tile_negatives,
    };
    let pred = flat_map(pred_cls, labels);
    let active = select_active(&pred, &labels.cls, &labels.care, &params, rng);
    combined_loss_with_mask(pred_cls, pred_loc_raw, labels, cfg.lambda_loc_at(iteration), &active, cfg.loc_normalization)
}

fn flat_map(pred_cls: &Tensor, labels: &LabelMaps) -> Tensor {
    assert_eq!(pred_cls.len(), labels.cls.len(), "classification map size");
    pred_cls.clone().reshape(labels.cls.shape()).expect("same length")
}

/// [`combined_loss`] with the mined pixel set frozen.
pub fn combined_loss_with_mask(
    pred_cls: &Tensor,
    pred_loc_raw: &Tensor,
    labels: &LabelMaps,
    lambda_loc: f32,
    active: &Tensor,
    loc_norm: LocNormalization,
) -> LossOutput {
    assert_eq!(pred_loc_raw.len(), labels.loc.len(), "regression map size");
    let pred = flat_map(pred_cls, labels);
    let d = labels.down_factor as f64;
    let area = labels.height() as f64 * d * labels.width() as f64 * d;
    let (cls_part, cls_gradient) = hinge_cls_loss_masked(&pred, &labels.cls, active, area);

    // Scale&Shift is applied in f64 so the loss is a smooth function of the
    // raw f32 outputs.
    let (loc_part, dz_hat) = masked_smooth_l1(pred_loc_raw, &labels.loc, &labels.cls, loc_norm, |z| {
        SCALE_SHIFT_GAIN as f64 * z as f64 - SCALE_SHIFT_OFFSET as f64
    });
    let gain = lambda_loc * SCALE_SHIFT_GAIN;
    let loc_gradient = dz_hat.map(|g| g * gain);
    LossOutput {
        total: cls_part + lambda_loc as f64 * loc_part,
        cls_part,
        loc_part,
        lambda_loc,
        cls_gradient,
        loc_gradient,
        active_mask: active.clone(),
    }
}
