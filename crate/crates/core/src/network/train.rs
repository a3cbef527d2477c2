//! Mini-batch SGD training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{NetworkError, NetworkModel};
use crate::image_ops::{image_to_tensor, RgbImage};
use crate::labelgen::{cut_tile, make_label_maps, sample_training_tile, Annotation, LabelConfig, LabelError, LabelMaps, TileSampler};
use crate::geometry::QuarterTurn;
use crate::loss::{combined_loss, LossConfig};
use crate::tensorcore::{sgd_step, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration} (total loss {total})")]
    DivergenceDetected {
        iteration: usize,
        total: f64,
        log: TrainingLog,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset: {0}")]
    Dataset(String),
}

/// Yields `(tile [3, S, S], labels)` training samples.
pub trait TileSource {
    fn next_sample(&mut self, rng: &mut ChaCha8Rng) -> Result<(Tensor, LabelMaps), TrainError>;
}

/// Always returns the same pre-labelled tile.
#[derive(Debug, Clone)]
pub struct FixedTileSource {
    tile: Tensor,
    labels: LabelMaps,
}

impl FixedTileSource {
    pub fn new(image: &RgbImage, annotations: &[Annotation], label_cfg: &LabelConfig) -> Result<Self, TrainError> {
        let size = image.width();
        if image.height() != size {
            return Err(TrainError::Dataset(format!(
                "fixed tile must be square, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        let t = cut_tile(image, annotations, 1.0, QuarterTurn::R0, (0, 0), size);
        let labels = make_label_maps(size as usize, &t.annotations, label_cfg)?;
        Ok(Self {
            tile: image_to_tensor(&t.image),
            labels,
        })
    }

    pub fn labels(&self) -> &LabelMaps {
        &self.labels
    }

    pub fn tile(&self) -> &Tensor {
        &self.tile
    }
}

impl TileSource for FixedTileSource {
    fn next_sample(&mut self, _rng: &mut ChaCha8Rng) -> Result<(Tensor, LabelMaps), TrainError> {
        Ok((self.tile.clone(), self.labels.clone()))
    }
}

/// Random scene, then a random scale / rotation / crop of it.
#[derive(Debug, Clone)]
pub struct DatasetSource {
    scenes: Vec<(RgbImage, Vec<Annotation>)>,
    sampler: TileSampler,
    label_cfg: LabelConfig,
}

impl DatasetSource {
    pub fn new(scenes: Vec<(RgbImage, Vec<Annotation>)>, sampler: TileSampler, label_cfg: LabelConfig) -> Result<Self, TrainError> {
        if scenes.is_empty() {
            return Err(TrainError::Dataset("no training scenes".into()));
        }
        Ok(Self {
            scenes,
            sampler,
            label_cfg,
        })
    }
}

impl TileSource for DatasetSource {
    fn next_sample(&mut self, rng: &mut ChaCha8Rng) -> Result<(Tensor, LabelMaps), TrainError> {
        let (image, anns) = &self.scenes[rng.random_range(0..self.scenes.len())];
        let t = sample_training_tile(image, anns, rng, &self.sampler);
        let labels = make_label_maps(self.sampler.tile_size as usize, &t.annotations, &self.label_cfg)?;
        Ok((image_to_tensor(&t.image), labels))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    /// Iterations at which the learning rate is multiplied by `gamma`.
    pub lr_steps: Vec<usize>,
    pub gamma: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub loss: LossConfig,
    /// Multiplies the classification gradient before backprop. The logged
    /// objective is unchanged.
    pub cls_grad_gain: f32,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once the total loss of an iteration falls below this value.
    pub stop_below: Option<f64>,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_size: 4,
            base_lr: 1e-2,
            lr_steps: vec![3_000, 7_000],
            gamma: 0.1,
            momentum: 0.9,
            weight_decay: 4e-4,
            loss: LossConfig::default(),
            cls_grad_gain: 1.0,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            stop_below: None,
            divergence_factor: 10.0,
            divergence_patience: 100,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, iteration: usize) -> f32 {
        let drops = self.lr_steps.iter().filter(|&&s| iteration >= s).count();
        self.base_lr * self.gamma.powi(drops as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingRecord {
    pub iteration: usize,
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
    pub lr: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<TrainingRecord>,
}

impl TrainingLog {
    pub fn last(&self) -> Option<&TrainingRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,total,cls,loc,lr\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:.8},{:.8},{:.8},{}", r.iteration, r.total, r.cls, r.loc, r.lr);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

/// Random stream for one iteration: data sampling and negative mining.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Runs `cfg.iterations` SGD steps. Per-sample losses and gradients are
/// averaged over the batch.
pub fn train(model: &mut NetworkModel, source: &mut dyn TileSource, cfg: &TrainConfig) -> Result<TrainingLog, TrainError> {
    let mut log = TrainingLog::default();
    // (lambda_loc, first total under it): the reference restarts when the
    // loss weighting switches
    let mut initial: Option<(f32, f64)> = None;
    let mut over = 0usize;
    let b = cfg.batch_size.max(1);
    for it in 0..cfg.iterations {
        let mut rng = iteration_rng(cfg.seed, it);
        let mut tiles = Vec::with_capacity(b);
        let mut labels = Vec::with_capacity(b);
        for _ in 0..b {
            let (t, l) = source.next_sample(&mut rng)?;
            tiles.push(t);
            labels.push(l);
        }
        let batch = Tensor::stack(&tiles).map_err(NetworkError::from)?;
        let (out, trace) = model.forward_train(&batch)?;
        let (_, _, h, w) = out.cls.dims4("cls").map_err(NetworkError::from)?;
        let mut d_cls = Tensor::zeros(&[b, 1, h, w]);
        let mut d_loc = Tensor::zeros(&[b, 8, h, w]);
        let (mut total, mut cls, mut loc) = (0.0, 0.0, 0.0);
        let inv = 1.0 / b as f32;
        let cls_scale = cfg.cls_grad_gain * inv;
        for (i, lab) in labels.iter().enumerate() {
            let l = combined_loss(&out.cls.sample(i), &out.loc_raw.sample(i), lab, &cfg.loss, &mut rng, it);
            total += l.total / b as f64;
            cls += l.cls_part / b as f64;
            loc += l.loc_part / b as f64;
            let n = h * w;
            for (d, g) in d_cls.data_mut()[i * n..(i + 1) * n].iter_mut().zip(l.cls_gradient.data()) {
                *d = g * cls_scale;
            }
            for (d, g) in d_loc.data_mut()[i * 8 * n..(i + 1) * 8 * n].iter_mut().zip(l.loc_gradient.data()) {
                *d = g * inv;
            }
        }
        let lr = cfg.lr_at(it);
        log.records.push(TrainingRecord {
            iteration: it,
            total,
            cls,
            loc,
            lr,
        });
        if !total.is_finite() {
            return Err(TrainError::DivergenceDetected {
                iteration: it,
                total,
                log,
            });
        }
        let lambda = cfg.loss.lambda_loc_at(it);
        if initial.is_some_and(|(l, _)| l != lambda) {
            initial = None;
            over = 0;
        }
        let init = initial.get_or_insert((lambda, total)).1;
        if total > cfg.divergence_factor * init {
            over += 1;
            if over >= cfg.divergence_patience {
                return Err(TrainError::DivergenceDetected {
                    iteration: it,
                    total,
                    log,
                });
            }
        } else {
            over = 0;
        }
        model.backward(&trace, &d_cls, &d_loc)?;
        sgd_step(model.params_mut(), lr, cfg.momentum, cfg.weight_decay);
        if it % 100 == 0 {
            log::debug!("iter {it}: total {total:.5} cls {cls:.5} loc {loc:.5} lr {lr}");
        }
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                model.save(&dir.join(format!("iter_{:06}", it + 1)))?;
            }
        }
        if cfg.stop_below.is_some_and(|t| total < t) {
            break;
        }
    }
    Ok(log)
}
