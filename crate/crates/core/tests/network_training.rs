use quadtext::evalharness::{generate_synthetic_scene, SceneConfig};
use quadtext::labelgen::{LabelConfig, LabelMaps, TileSampler};
use quadtext::network::{
    train, DatasetSource, FixedTileSource, NetworkConfig, NetworkModel, TileSource, TrainConfig, TrainError,
};
use quadtext::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> NetworkConfig {
    NetworkConfig {
        input_size: 32,
        stage_channels: [2, 2, 2, 2],
        fusion_channels: 2,
        head_channels: 2,
        ..Default::default()
    }
}

fn small() -> NetworkConfig {
    NetworkConfig {
        input_size: 64,
        stage_channels: [4, 4, 8, 8],
        fusion_channels: 8,
        head_channels: 4,
        ..Default::default()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn objective(model: &NetworkModel, x: &Tensor, p_cls: &Tensor, p_loc: &Tensor) -> f64 {
    let (out, _) = model.clone().forward_train(x).unwrap();
    out.cls.dot(p_cls) + out.loc_raw.dot(p_loc)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model = NetworkModel::build_seeded(tiny(), 21).unwrap();
    // move every parameter off its initial value so the regression path is live
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let x = random_tensor(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
    let (out, trace) = model.forward_train(&x).unwrap();
    let p_cls = random_tensor(&mut rng, out.cls.shape(), -1.0, 1.0);
    let p_loc = random_tensor(&mut rng, out.loc_raw.shape(), -1.0, 1.0);
    model.zero_grad();
    model.backward(&trace, &p_cls, &p_loc).unwrap();

    let blocks = model.params_mut().len();
    let (mut num, mut den, mut checked) = (0.0f64, 0.0f64, 0);
    for bi in 0..blocks {
        let len = model.params_mut()[bi].value.len();
        for j in [0, len / 2, len - 1] {
            let analytic = model.params_mut()[bi].gradient.data()[j] as f64;
            let at = |e: f32| {
                let mut m = model.clone();
                m.params_mut()[bi].value.data_mut()[j] += e;
                objective(&m, &x, &p_cls, &p_loc)
            };
            let central = |e: f32| (at(e) - at(-e)) / (2.0 * e as f64);
            // f32 round-off and ReLU / max-pool kinks bound how well a
            // finite difference can agree here
            let numeric = central(2f32.powi(-11));
            num += (analytic - numeric).powi(2);
            den += numeric.powi(2);
            checked += 1;
        }
    }
    let rel = (num / den).sqrt();
    assert!(rel < 5e-3, "relative gradient error {rel:.2e} over {checked} parameters");
}

fn scene_source(size: u32, seed: u64) -> FixedTileSource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = generate_synthetic_scene(
        &SceneConfig {
            width: size,
            height: size,
            boxes: 1,
            short_side: (16.0, 20.0),
            aspect: (2.0, 2.5),
            ..Default::default()
        },
        &mut rng,
    )
    .unwrap();
    FixedTileSource::new(&scene.image, &scene.annotations, &LabelConfig::default()).unwrap()
}

fn short_run(iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        iterations,
        batch_size: 2,
        lr_steps: vec![],
        seed: 4,
        ..Default::default()
    };
    cfg.loss.cls_warmup_iters = usize::MAX;
    cfg
}

fn dataset(seed: u64) -> DatasetSource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SceneConfig {
        width: 96,
        height: 96,
        boxes: 1,
        ..Default::default()
    };
    let scenes = (0..4)
        .map(|_| {
            let s = generate_synthetic_scene(&cfg, &mut rng).unwrap();
            (s.image, s.annotations)
        })
        .collect();
    let sampler = TileSampler {
        tile_size: 64,
        ..Default::default()
    };
    DatasetSource::new(scenes, sampler, LabelConfig::default()).unwrap()
}

fn weight_bits(m: &NetworkModel) -> Vec<(String, Vec<u32>)> {
    m.named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn same_seed_same_weights() {
    let run = || {
        let mut model = NetworkModel::build_seeded(small(), 8).unwrap();
        let log = train(&mut model, &mut dataset(2), &short_run(6)).unwrap();
        (weight_bits(&model), log.to_csv())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let mut other = NetworkModel::build_seeded(small(), 8).unwrap();
    let mut cfg = short_run(6);
    cfg.seed = 5;
    train(&mut other, &mut dataset(2), &cfg).unwrap();
    assert_ne!(weight_bits(&other), a.0);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let mut model = NetworkModel::build_seeded(small(), 3).unwrap();
    let before: Vec<Tensor> = model.params_mut().iter().map(|p| p.value.clone()).collect();
    let mut cfg = short_run(3);
    cfg.base_lr = 0.0;
    train(&mut model, &mut dataset(1), &cfg).unwrap();
    let after: Vec<Tensor> = model.params_mut().iter().map(|p| p.value.clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn save_load_roundtrip_preserves_outputs() {
    let mut model = NetworkModel::build_seeded(small(), 5).unwrap();
    train(&mut model, &mut dataset(3), &short_run(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = NetworkModel::load(dir.path()).unwrap();
    assert_eq!(weight_bits(&loaded), weight_bits(&model));
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(0), &[1, 3, 64, 96], 0.0, 1.0);
    let (a, b) = (model.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    assert_eq!(a.cls, b.cls);
    assert_eq!(a.loc, b.loc);
    assert_eq!(a.cls.shape(), &[1, 1, 16, 24]);
}

#[test]
fn loading_garbage_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(NetworkModel::load(dir.path()).is_err());
    let model = NetworkModel::build_seeded(small(), 5).unwrap();
    model.save(dir.path()).unwrap();
    std::fs::write(dir.path().join("weights.bin"), [0u8; 7]).unwrap();
    assert!(NetworkModel::load(dir.path()).is_err());
}

#[test]
fn fixed_tile_loss_goes_down() {
    let mut model = NetworkModel::build_seeded(small(), 11).unwrap();
    let mut source = scene_source(64, 12);
    assert!(source.labels().positive_count() > 0);
    let mut cfg = short_run(150);
    cfg.batch_size = 1;
    let log = train(&mut model, &mut source, &cfg).unwrap();
    let head: f64 = log.records[..10].iter().map(|r| r.total).sum::<f64>() / 10.0;
    let tail: f64 = log.records[140..].iter().map(|r| r.total).sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "loss {head:.4} -> {tail:.4}");
}

#[test]
fn checkpoints_and_csv_log_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = NetworkModel::build_seeded(small(), 1).unwrap();
    let mut cfg = short_run(4);
    cfg.checkpoint_every = 2;
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let log = train(&mut model, &mut dataset(0), &cfg).unwrap();
    assert!(dir.path().join("iter_000002/weights.bin").exists());
    assert!(dir.path().join("iter_000004/config.json").exists());
    let csv = log.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iteration,total,cls,loc,lr"));
    assert_eq!(lines.count(), 4);
    assert_eq!(weight_bits(&NetworkModel::load(&dir.path().join("iter_000004")).unwrap()), weight_bits(&model));
}

struct PoisonedSource(FixedTileSource);

impl TileSource for PoisonedSource {
    fn next_sample(&mut self, rng: &mut ChaCha8Rng) -> Result<(Tensor, LabelMaps), TrainError> {
        let (t, mut labels) = self.0.next_sample(rng)?;
        labels.loc = labels.loc.map(|_| f32::NAN);
        Ok((t, labels))
    }
}

#[test]
fn non_finite_loss_is_divergence() {
    let mut model = NetworkModel::build_seeded(small(), 1).unwrap();
    let err = train(&mut model, &mut PoisonedSource(scene_source(64, 12)), &short_run(5)).unwrap_err();
    match err {
        TrainError::DivergenceDetected { iteration, log, .. } => {
            assert_eq!(iteration, 0);
            assert_eq!(log.records.len(), 1);
        }
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn sustained_blowup_is_divergence() {
    let mut model = NetworkModel::build_seeded(small(), 1).unwrap();
    let mut cfg = short_run(400);
    cfg.base_lr = 50.0;
    cfg.divergence_patience = 5;
    cfg.loss.cls_warmup_iters = 0;
    let r = train(&mut model, &mut dataset(0), &cfg);
    assert!(matches!(r, Err(TrainError::DivergenceDetected { .. })), "{r:?}");
}
