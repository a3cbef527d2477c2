//! The fully-convolutional bi-task detector.
//!
//! Four VGG-style stages (two ConvUnits and a 2× max-pool each) produce
//! feature streams at strides 2, 4, 8 and 16; a context block of two dilated
//! ConvUnits on top of the last stage forms the deepest stream. The streams
//! at strides 4, 8, 16 and the context block are brought to stride 4 with
//! stride-n transposed convolutions, concatenated, fused by a 1×1 ConvUnit
//! and fed to two heads: a one-channel classification map (sigmoid) and an
//! eight-channel regression map (sigmoid followed by Scale&Shift).
//!
//! A ConvUnit is convolution → batch normalization → ReLU.

mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::scale_shift_forward;
use crate::tensorcore::{
    concat_channels, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, sigmoid_backward,
    sigmoid_forward, split_channels, BatchNorm, BnCache, Conv2d, ConvSpec, ParamBlock, Tensor, TensorError,
    Workspace,
};

pub use train::{
    train, DatasetSource, FixedTileSource, TileSource, TrainConfig, TrainError, TrainingLog, TrainingRecord,
};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Training tile side `S`; must be divisible by 16.
    pub input_size: usize,
    pub stage_channels: [usize; 4],
    pub fusion_channels: usize,
    pub head_channels: usize,
    pub kernel_size: usize,
    /// Dilation of the two context ConvUnits on the deepest stage.
    pub context_dilation: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 320,
            stage_channels: [16, 32, 64, 128],
            fusion_channels: 64,
            head_channels: 32,
            kernel_size: 3,
            context_dilation: 4,
        }
    }
}

impl NetworkConfig {
    /// Receptive field (pixels) of the deepest stream.
    pub fn receptive_field(&self) -> usize {
        let k = self.kernel_size;
        let (mut rf, mut jump) = (1usize, 1usize);
        for _ in 0..4 {
            rf += 2 * (k - 1) * jump;
            rf += jump; // 2×2 pool
            jump *= 2;
        }
        rf + 2 * (k - 1) * self.context_dilation * jump
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(NetworkError::Config(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return err(format!("input size {} is not a positive multiple of 16", self.input_size));
        }
        if self.stage_channels.contains(&0) || self.fusion_channels == 0 || self.head_channels == 0 {
            return err("channel counts must be at least 1".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return err(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.context_dilation == 0 {
            return err("context dilation must be at least 1".into());
        }
        let rf = self.receptive_field();
        if rf <= self.input_size {
            return err(format!("receptive field {rf} does not exceed input size {}", self.input_size));
        }
        Ok(())
    }

    pub fn map_size(&self) -> usize {
        self.input_size / 4
    }
}

/// Network outputs for a batch: `cls` is `[B, 1, h, w]` in (0, 1), `loc_raw`
/// the `[B, 8, h, w]` regression sigmoids and `loc` their Scale&Shift
/// stretch to pixel offsets in (−400, 400).
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub cls: Tensor,
    pub loc_raw: Tensor,
    pub loc: Tensor,
}

/// Convolution → batch normalization → ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

#[derive(Debug)]
struct UnitTrace {
    input: Tensor,
    bn: BnCache,
    out: Tensor,
}

impl ConvUnit {
    fn new(cin: usize, cout: usize, k: usize, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        Self {
            conv: xavier_conv(cin, cout, k, spec, false, rng),
            bn: BatchNorm::new(cout),
        }
    }

    fn forward(&self, x: &Tensor, ws: &mut Workspace) -> Result<Tensor> {
        let y = self.conv.forward(x, ws)?;
        Ok(relu_forward(&self.bn.forward(&y)?))
    }

    fn forward_train(&mut self, x: Tensor, ws: &mut Workspace) -> Result<(Tensor, UnitTrace)> {
        let y = self.conv.forward(&x, ws)?;
        let (z, bn) = self.bn.forward_train(&y)?;
        let out = relu_forward(&z);
        Ok((
            out.clone(),
            UnitTrace {
                input: x,
                bn,
                out,
            },
        ))
    }

    fn backward(&mut self, t: &UnitTrace, dy: &Tensor, need_dx: bool, ws: &mut Workspace) -> Result<Option<Tensor>> {
        let dz = relu_backward(&t.out, dy);
        let dyc = self.bn.backward(&t.bn, &dz)?;
        Ok(self.conv.backward(&t.input, &dyc, need_dx, ws)?)
    }
}

/// Caffe-style xavier: uniform in ±sqrt(3 / fan_in).
fn xavier_conv(cin: usize, cout: usize, k: usize, spec: ConvSpec, transposed: bool, rng: &mut impl Rng) -> Conv2d {
    let fan_in = if transposed {
        (cin * k * k / (spec.stride * spec.stride)).max(1)
    } else {
        cin * k * k
    };
    let limit = (3.0 / fan_in as f64).sqrt() as f32;
    let shape = if transposed { [cin, cout, k, k] } else { [cout, cin, k, k] };
    let n: usize = shape.iter().product();
    let w: Vec<f32> = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Conv2d::new(
        Tensor::from_vec(&shape, w).expect("sized"),
        Tensor::zeros(&[cout]),
        spec,
        transposed,
    )
}

fn zero_conv(cin: usize, cout: usize) -> Conv2d {
    Conv2d::new(Tensor::zeros(&[cout, cin, 1, 1]), Tensor::zeros(&[cout]), ConvSpec::default(), false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    config: NetworkConfig,
    stages: Vec<[ConvUnit; 2]>,
    context: [ConvUnit; 2],
    /// Upsamplers for the stride-8, stride-16 and context streams.
    upsample: [Conv2d; 3],
    fusion: ConvUnit,
    cls_head: ConvUnit,
    cls_out: Conv2d,
    loc_head: ConvUnit,
    loc_out: Conv2d,
}

/// Activations kept from a training forward pass.
#[derive(Debug)]
pub struct Trace {
    stages: Vec<StageTrace>,
    context: [UnitTrace; 2],
    up_inputs: [Tensor; 3],
    stream_channels: Vec<usize>,
    fusion: UnitTrace,
    cls_head: UnitTrace,
    loc_head: UnitTrace,
    cls: Tensor,
    loc_raw: Tensor,
}

#[derive(Debug)]
struct StageTrace {
    units: [UnitTrace; 2],
    pool_arg: Vec<usize>,
    pool_in_shape: Vec<usize>,
}

enum LayerRef<'a> {
    Conv(&'a Conv2d),
    Bn(&'a BatchNorm),
}

enum LayerMut<'a> {
    Conv(&'a mut Conv2d),
    Bn(&'a mut BatchNorm),
}

impl NetworkModel {
    /// Xavier-initialized model; the regression head's final convolution
    /// starts at zero so the first forward pass regresses zero offsets.
    pub fn build(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let same = ConvSpec::new(1, k / 2);
        let ch = config.stage_channels;
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for &c in &ch {
            stages.push([ConvUnit::new(cin, c, k, same, rng), ConvUnit::new(c, c, k, same, rng)]);
            cin = c;
        }
        let d = config.context_dilation;
        let dil = ConvSpec::dilated(d * (k / 2), d);
        let context = [ConvUnit::new(ch[3], ch[3], k, dil, rng), ConvUnit::new(ch[3], ch[3], k, dil, rng)];
        let upsample = [
            xavier_conv(ch[2], ch[2], 2, ConvSpec::new(2, 0), true, rng),
            xavier_conv(ch[3], ch[3], 4, ConvSpec::new(4, 0), true, rng),
            xavier_conv(ch[3], ch[3], 4, ConvSpec::new(4, 0), true, rng),
        ];
        let fused_in = ch[1] + ch[2] + 2 * ch[3];
        let fusion = ConvUnit::new(fused_in, config.fusion_channels, 1, ConvSpec::default(), rng);
        let cls_head = ConvUnit::new(config.fusion_channels, config.head_channels, k, same, rng);
        let cls_out = xavier_conv(config.head_channels, 1, 1, ConvSpec::default(), false, rng);
        let loc_head = ConvUnit::new(config.fusion_channels, config.head_channels, k, same, rng);
        let loc_out = zero_conv(config.head_channels, 8);
        Ok(Self {
            config,
            stages,
            context,
            upsample,
            fusion,
            cls_head,
            cls_out,
            loc_head,
            loc_out,
        })
    }

    pub fn build_seeded(config: NetworkConfig, seed: u64) -> Result<Self> {
        Self::build(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn layers(&self) -> Vec<(String, LayerRef<'_>)> {
        let mut out = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            for (ui, u) in stage.iter().enumerate() {
                push_unit(&mut out, format!("stage{si}.unit{ui}"), u);
            }
        }
        for (ui, u) in self.context.iter().enumerate() {
            push_unit(&mut out, format!("context.unit{ui}"), u);
        }
        for (i, up) in self.upsample.iter().enumerate() {
            out.push((format!("upsample{i}"), LayerRef::Conv(up)));
        }
        push_unit(&mut out, "fusion".into(), &self.fusion);
        push_unit(&mut out, "cls_head".into(), &self.cls_head);
        out.push(("cls_out".into(), LayerRef::Conv(&self.cls_out)));
        push_unit(&mut out, "loc_head".into(), &self.loc_head);
        out.push(("loc_out".into(), LayerRef::Conv(&self.loc_out)));
        out
    }

    fn layers_mut(&mut self) -> Vec<(String, LayerMut<'_>)> {
        let mut out = Vec::new();
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (ui, u) in stage.iter_mut().enumerate() {
                push_unit_mut(&mut out, format!("stage{si}.unit{ui}"), u);
            }
        }
        for (ui, u) in self.context.iter_mut().enumerate() {
            push_unit_mut(&mut out, format!("context.unit{ui}"), u);
        }
        for (i, up) in self.upsample.iter_mut().enumerate() {
            out.push((format!("upsample{i}"), LayerMut::Conv(up)));
        }
        push_unit_mut(&mut out, "fusion".into(), &mut self.fusion);
        push_unit_mut(&mut out, "cls_head".into(), &mut self.cls_head);
        out.push(("cls_out".into(), LayerMut::Conv(&mut self.cls_out)));
        push_unit_mut(&mut out, "loc_head".into(), &mut self.loc_head);
        out.push(("loc_out".into(), LayerMut::Conv(&mut self.loc_out)));
        out
    }

    /// Every learnable parameter, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut out = Vec::new();
        for (_, layer) in self.layers_mut() {
            match layer {
                LayerMut::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                LayerMut::Bn(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|(_, l)| match l {
                LayerRef::Conv(c) => c.weight.value.len() + c.bias.value.len(),
                LayerRef::Bn(b) => b.gamma.value.len() + b.beta.value.len(),
            })
            .sum()
    }

    /// Parameters and batch-norm running statistics, keyed by name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            match layer {
                LayerRef::Conv(c) => {
                    out.push((format!("{name}.weight"), &c.weight.value));
                    out.push((format!("{name}.bias"), &c.bias.value));
                }
                LayerRef::Bn(b) => {
                    out.push((format!("{name}.gamma"), &b.gamma.value));
                    out.push((format!("{name}.beta"), &b.beta.value));
                    out.push((format!("{name}.running_mean"), &b.running_mean));
                    out.push((format!("{name}.running_var"), &b.running_var));
                }
            }
        }
        out
    }

    fn load_named(&mut self, mut tensors: Vec<(String, Tensor)>) -> Result<()> {
        tensors.reverse();
        let mut take = |expected: String, slot: &mut Tensor| -> Result<()> {
            let (name, t) = tensors
                .pop()
                .ok_or_else(|| NetworkError::Checkpoint(format!("missing tensor {expected}")))?;
            if name != expected || t.shape() != slot.shape() {
                return Err(NetworkError::Checkpoint(format!(
                    "expected {expected} {:?}, found {name} {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
            Ok(())
        };
        for (name, layer) in self.layers_mut() {
            match layer {
                LayerMut::Conv(c) => {
                    take(format!("{name}.weight"), &mut c.weight.value)?;
                    take(format!("{name}.bias"), &mut c.bias.value)?;
                }
                LayerMut::Bn(b) => {
                    take(format!("{name}.gamma"), &mut b.gamma.value)?;
                    take(format!("{name}.beta"), &mut b.beta.value)?;
                    take(format!("{name}.running_mean"), &mut b.running_mean)?;
                    take(format!("{name}.running_var"), &mut b.running_var)?;
                }
            }
        }
        if let Some((name, _)) = tensors.pop() {
            return Err(NetworkError::Checkpoint(format!("unexpected tensor {name}")));
        }
        Ok(())
    }

    /// Writes `config.json`, `weights.manifest` and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(TensorError::from)?;
        let cfg = serde_json::to_string_pretty(&self.config).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join("config.json"), cfg).map_err(TensorError::from)?;
        let named = self.named_tensors();
        crate::tensorcore::write_weights(
            &dir.join("weights.manifest"),
            &dir.join("weights.bin"),
            named.iter().map(|(n, t)| (n.as_str(), *t)),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = std::fs::read_to_string(dir.join("config.json")).map_err(TensorError::from)?;
        let config: NetworkConfig =
            serde_json::from_str(&cfg).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        let mut model = Self::build_seeded(config, 0)?;
        let tensors = crate::tensorcore::read_weights(&dir.join("weights.manifest"), &dir.join("weights.bin"))?;
        model.load_named(tensors)?;
        Ok(model)
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let (_, c, h, w) = batch.dims4("network input")?;
        if c != 3 || h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "network input must be [B, 3, H, W] with H, W positive multiples of 16, got {:?}",
                batch.shape()
            ))
            .into());
        }
        Ok(())
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    /// Accepts any `[B, 3, H, W]` input with sides divisible by 16.
    pub fn forward(&self, batch: &Tensor) -> Result<NetOutput> {
        self.check_input(batch)?;
        let ws = &mut Workspace::default();
        let mut x = batch.clone();
        let mut streams = Vec::with_capacity(4);
        for (si, stage) in self.stages.iter().enumerate() {
            x = stage[0].forward(&x, ws)?;
            x = stage[1].forward(&x, ws)?;
            x = maxpool2_forward(&x)?.0;
            if si >= 1 {
                streams.push(x.clone());
            }
        }
        let deep = self.context[1].forward(&self.context[0].forward(&x, ws)?, ws)?;
        let up = [
            self.upsample[0].forward(&streams[1], ws)?,
            self.upsample[1].forward(&streams[2], ws)?,
            self.upsample[2].forward(&deep, ws)?,
        ];
        let cat = concat_channels(&[&streams[0], &up[0], &up[1], &up[2]])?;
        let fused = self.fusion.forward(&cat, ws)?;
        let cls = sigmoid_forward(&self.cls_out.forward(&self.cls_head.forward(&fused, ws)?, ws)?);
        let loc_raw = sigmoid_forward(&self.loc_out.forward(&self.loc_head.forward(&fused, ws)?, ws)?);
        let loc = scale_shift_forward(&loc_raw);
        Ok(NetOutput { cls, loc_raw, loc })
    }

    /// Training forward pass: batch statistics, running-stat update, and a
    /// trace for [`NetworkModel::backward`].
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<(NetOutput, Trace)> {
        self.check_input(batch)?;
        let ws = &mut Workspace::default();
        let mut x = batch.clone();
        let mut stage_traces = Vec::with_capacity(4);
        let mut streams = Vec::with_capacity(3);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            let (a, ta) = stage[0].forward_train(x, ws)?;
            let (b, tb) = stage[1].forward_train(a, ws)?;
            let (pooled, arg) = maxpool2_forward(&b)?;
            stage_traces.push(StageTrace {
                units: [ta, tb],
                pool_arg: arg,
                pool_in_shape: b.shape().to_vec(),
            });
            if si >= 1 {
                streams.push(pooled.clone());
            }
            x = pooled;
        }
        let (c0, tc0) = self.context[0].forward_train(x, ws)?;
        let (deep, tc1) = self.context[1].forward_train(c0, ws)?;
        let up = [
            self.upsample[0].forward(&streams[1], ws)?,
            self.upsample[1].forward(&streams[2], ws)?,
            self.upsample[2].forward(&deep, ws)?,
        ];
        let parts = [&streams[0], &up[0], &up[1], &up[2]];
        let stream_channels = parts.iter().map(|t| t.shape()[1]).collect();
        let cat = concat_channels(&parts)?;
        let (fused, tf) = self.fusion.forward_train(cat, ws)?;
        let (ch, tch) = self.cls_head.forward_train(fused.clone(), ws)?;
        let cls = sigmoid_forward(&self.cls_out.forward(&ch, ws)?);
        let (lh, tlh) = self.loc_head.forward_train(fused, ws)?;
        let loc_raw = sigmoid_forward(&self.loc_out.forward(&lh, ws)?);
        let loc = scale_shift_forward(&loc_raw);
        let [_, s8, s16] = <[Tensor; 3]>::try_from(streams).expect("three streams");
        let trace = Trace {
            stages: stage_traces,
            context: [tc0, tc1],
            up_inputs: [s8, s16, deep],
            stream_channels,
            fusion: tf,
            cls_head: tch,
            loc_head: tlh,
            cls: cls.clone(),
            loc_raw: loc_raw.clone(),
        };
        Ok((NetOutput { cls, loc_raw, loc }, trace))
    }

    /// Back-propagates loss gradients w.r.t. `cls` and `loc_raw`,
    /// accumulating into every parameter's gradient.
    pub fn backward(&mut self, trace: &Trace, d_cls: &Tensor, d_loc_raw: &Tensor) -> Result<()> {
        let ws = &mut Workspace::default();
        let d_cls_pre = sigmoid_backward(&trace.cls, d_cls);
        let d_ch = self
            .cls_out
            .backward(&trace.cls_head.out, &d_cls_pre, true, ws)?
            .expect("requested");
        let mut d_fused = self.cls_head.backward(&trace.cls_head, &d_ch, true, ws)?.expect("requested");
        let d_loc_pre = sigmoid_backward(&trace.loc_raw, d_loc_raw);
        let d_lh = self
            .loc_out
            .backward(&trace.loc_head.out, &d_loc_pre, true, ws)?
            .expect("requested");
        d_fused.add_assign(&self.loc_head.backward(&trace.loc_head, &d_lh, true, ws)?.expect("requested"))?;
        let d_cat = self.fusion.backward(&trace.fusion, &d_fused, true, ws)?.expect("requested");
        let mut parts = split_channels(&d_cat, &trace.stream_channels)?.into_iter();
        let d_s4 = parts.next().expect("4 parts");
        let d_s8 = self.upsample[0]
            .backward(&trace.up_inputs[0], &parts.next().expect("4 parts"), true, ws)?
            .expect("requested");
        let mut d_s16 = self.upsample[1]
            .backward(&trace.up_inputs[1], &parts.next().expect("4 parts"), true, ws)?
            .expect("requested");
        let d_deep = self.upsample[2]
            .backward(&trace.up_inputs[2], &parts.next().expect("4 parts"), true, ws)?
            .expect("requested");
        let d_c0 = self.context[1].backward(&trace.context[1], &d_deep, true, ws)?.expect("requested");
        d_s16.add_assign(&self.context[0].backward(&trace.context[0], &d_c0, true, ws)?.expect("requested"))?;

        // stage outputs (after pooling): 0 → stride 2, 1 → 4, 2 → 8, 3 → 16
        let mut d_out = d_s16;
        for si in (0..4).rev() {
            let st = &trace.stages[si];
            let d_pre = maxpool2_backward(&st.pool_arg, &st.pool_in_shape, &d_out)?;
            let stage = &mut self.stages[si];
            let d_a = stage[1].backward(&st.units[1], &d_pre, true, ws)?.expect("requested");
            let d_in = stage[0].backward(&st.units[0], &d_a, si > 0, ws)?;
            if si == 0 {
                break;
            }
            let mut d_in = d_in.expect("requested");
            match si {
                3 => d_in.add_assign(&d_s8)?,
                2 => d_in.add_assign(&d_s4)?,
                _ => {}
            }
            d_out = d_in;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

fn push_unit<'a>(out: &mut Vec<(String, LayerRef<'a>)>, name: String, u: &'a ConvUnit) {
    out.push((format!("{name}.conv"), LayerRef::Conv(&u.conv)));
    out.push((format!("{name}.bn"), LayerRef::Bn(&u.bn)));
}

fn push_unit_mut<'a>(out: &mut Vec<(String, LayerMut<'a>)>, name: String, u: &'a mut ConvUnit) {
    out.push((format!("{name}.conv"), LayerMut::Conv(&mut u.conv)));
    out.push((format!("{name}.bn"), LayerMut::Bn(&mut u.bn)));
}
