//! `quadtext` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use quadtext::evalharness::{
    evaluate, generate_synthetic_scene, load_detection_dir, load_ground_truth_dir, load_scene_dir, parse_ground_truth,
    save_scene, SceneConfig,
};
use quadtext::image_ops::{load_image, save_gray_map};
use quadtext::inference::{detect_image, format_candidates, parse_candidates, DetectionCandidate, InferenceConfig};
use quadtext::labelgen::{cut_tile, make_label_maps, LabelConfig, TileSampler};
use quadtext::network::{train, DatasetSource, NetworkConfig, NetworkModel, TrainConfig, TrainError};
use quadtext::postprocess::{recalled_nms, traditional_nms, MergeRule, NmsConfig};
use quadtext::QuarterTurn;

const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "quadtext", version, about = "Multi-oriented text detection by direct vertex regression")]
struct Cli {
    /// Worker threads for tile evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the classification, care and regression label maps of an image.
    GenGt {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic scenes (`<key>.png` + `gt_<key>.txt`).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Train a model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Detect text in images; one `res_<key>.txt` per image.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = NmsKind::Recalled)]
        nms: NmsKind,
        #[arg(long, default_value_t = 0.7)]
        threshold: f32,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        #[arg(long, default_value_t = 320)]
        window: u32,
        #[arg(long, default_value_t = 160)]
        stride: u32,
        /// Comma-separated scale factors (default 2^-5 … 2^1).
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        /// Keep the best member of each merge group instead of averaging.
        #[arg(long)]
        keep_max: bool,
        /// Image files or directories of images.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score detections against ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show a candidate file before and after both NMS variants.
    NmsDemo {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NmsKind {
    Traditional,
    Recalled,
    None,
}

#[derive(Debug, clap::Args)]
struct SceneArgs {
    #[arg(long, default_value_t = 320)]
    scene_size: u32,
    #[arg(long, default_value_t = 3)]
    boxes: usize,
    #[arg(long, default_value_t = 16.0)]
    min_short: f64,
    #[arg(long, default_value_t = 32.0)]
    max_short: f64,
}

impl SceneArgs {
    fn config(&self) -> SceneConfig {
        SceneConfig {
            width: self.scene_size,
            height: self.scene_size,
            boxes: self.boxes,
            short_side: (self.min_short, self.max_short),
            ..Default::default()
        }
    }
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// Directory of `<key>.png` + `gt_<key>.txt` scenes.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Train on this many generated scenes instead.
    #[arg(long)]
    synthetic: Option<usize>,
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f32,
    /// Learning-rate drop points (default 30% and 70% of the run).
    #[arg(long, value_delimiter = ',')]
    lr_steps: Option<Vec<usize>>,
    /// Iteration at which λ_loc rises (default half the run).
    #[arg(long)]
    warmup: Option<usize>,
    /// Iteration at which the hard-negative share rises (default 30%).
    #[arg(long)]
    hard_switch: Option<usize>,
    /// Multiplier on the classification gradient.
    #[arg(long, default_value_t = 1.0)]
    cls_grad_gain: f32,
    #[arg(long, default_value_t = 320)]
    tile: usize,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    channels: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    fusion: usize,
    #[arg(long, default_value_t = 32)]
    head: usize,
    /// Comma-separated training scales.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    train_scales: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::GenGt { image, gt, out } => cmd_gen_gt(&image, &gt, &out),
        Command::Synth {
            out,
            count,
            scene,
            seed,
        } => cmd_synth(&out, count, &scene.config(), seed),
        Command::Train(args) => cmd_train(&args),
        Command::Detect {
            checkpoint,
            out,
            nms,
            threshold,
            overlap,
            window,
            stride,
            scales,
            keep_max,
            images,
        } => {
            let icfg = InferenceConfig {
                window,
                stride,
                scales: scales.unwrap_or_else(quadtext::inference::default_scales),
                cls_threshold: threshold,
                ..Default::default()
            };
            let ncfg = NmsConfig {
                overlap_threshold: overlap,
                merge: if keep_max { MergeRule::KeepMax } else { MergeRule::WeightedMean },
            };
            cmd_detect(&checkpoint, &out, nms, &icfg, &ncfg, &images)
        }
        Command::Eval {
            detections,
            gt,
            iou,
            out,
        } => cmd_eval(&detections, &gt, iou, out.as_deref()),
        Command::NmsDemo {
            candidates,
            overlap,
            out,
        } => cmd_nms_demo(&candidates, overlap, out.as_deref()),
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: no such file", path.display())))
    }
}

fn require_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: no such directory", path.display())))
    }
}

fn make_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn cmd_gen_gt(image: &Path, gt: &Path, out: &Path) -> Result<(), CliError> {
    require_file(image)?;
    require_file(gt)?;
    let img = load_image(image).map_err(|e| CliError::Data(format!("{}: {e}", image.display())))?;
    let text = std::fs::read_to_string(gt).map_err(|e| CliError::Data(format!("{}: {e}", gt.display())))?;
    let gtf = parse_ground_truth(&text).map_err(|e| CliError::Data(format!("{}: {e}", gt.display())))?;
    let cfg = LabelConfig::default();
    let side = img.width().max(img.height()).div_ceil(cfg.down_factor as u32) * cfg.down_factor as u32;
    let tile = cut_tile(&img, &gtf.annotations(), 1.0, QuarterTurn::R0, (0, 0), side);
    let maps = make_label_maps(side as usize, &tile.annotations, &cfg).map_err(data)?;
    make_out(out)?;
    let (h, w) = (maps.height(), maps.width());
    let save = |name: String, values: &[f32], lo: f32, hi: f32| {
        save_gray_map(values, w, h, lo, hi, &out.join(name)).map_err(data)
    };
    save("cls.png".into(), maps.cls.data(), 0.0, 1.0)?;
    save("care.png".into(), maps.care.data(), 0.0, 1.0)?;
    let n = h * w;
    for c in 0..8 {
        let ch = &maps.loc.data()[c * n..(c + 1) * n];
        let m = ch.iter().fold(0.0f32, |a, v| a.max(v.abs())).max(1.0);
        save(format!("loc_{c}.png"), ch, -m, m)?;
    }
    println!("wrote 10 maps ({w}x{h}) to {}", out.display());
    Ok(())
}

fn cmd_synth(out: &Path, count: usize, cfg: &SceneConfig, seed: u64) -> Result<(), CliError> {
    make_out(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let scene = generate_synthetic_scene(cfg, &mut rng).map_err(data)?;
        save_scene(out, &format!("img_{}", i + 1), &scene).map_err(data)?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let channels: [usize; 4] = a
        .channels
        .as_slice()
        .try_into()
        .map_err(|_| CliError::Usage("--channels needs exactly 4 values".into()))?;
    let net_cfg = NetworkConfig {
        input_size: a.tile,
        stage_channels: channels,
        fusion_channels: a.fusion,
        head_channels: a.head,
        ..Default::default()
    };
    net_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let scenes = match (&a.data, a.synthetic) {
        (Some(dir), _) => {
            require_dir(dir)?;
            load_scene_dir(dir)
                .map_err(data)?
                .into_iter()
                .map(|(_, img, gt)| (img, gt.annotations()))
                .collect()
        }
        (None, Some(n)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            (0..n)
                .map(|_| generate_synthetic_scene(&a.scene.config(), &mut rng).map(|s| (s.image, s.annotations)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(data)?
        }
        (None, None) => return Err(CliError::Usage("train needs --data DIR or --synthetic N".into())),
    };
    let sampler = TileSampler {
        tile_size: a.tile as u32,
        scales: a.train_scales.clone(),
        rotate: true,
    };
    let mut source = DatasetSource::new(scenes, sampler, LabelConfig::default()).map_err(data)?;
    let mut cfg = TrainConfig {
        iterations: a.iterations,
        batch_size: a.batch,
        base_lr: a.lr,
        lr_steps: a
            .lr_steps
            .clone()
            .unwrap_or_else(|| vec![a.iterations * 3 / 10, a.iterations * 7 / 10]),
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: Some(a.out.join("checkpoints")),
        cls_grad_gain: a.cls_grad_gain,
        ..Default::default()
    };
    cfg.loss.cls_warmup_iters = a.warmup.unwrap_or(a.iterations / 2);
    cfg.loss.hard_ratio_switch_iter = a.hard_switch.unwrap_or(a.iterations * 3 / 10);

    make_out(&a.out)?;
    let mut model = NetworkModel::build_seeded(net_cfg, a.seed).map_err(data)?;
    let result = train(&mut model, &mut source, &cfg);
    let log_path = a.out.join("loss_log.csv");
    match result {
        Ok(log) => {
            log.write_csv(&log_path).map_err(data)?;
            model.save(&a.out.join("checkpoint")).map_err(data)?;
            if let Some(r) = log.last() {
                println!("iteration {} total {:.5} cls {:.5} loc {:.5}", r.iteration, r.total, r.cls, r.loc);
            }
            println!("checkpoint written to {}", a.out.join("checkpoint").display());
            Ok(())
        }
        Err(TrainError::DivergenceDetected { iteration, total, log }) => {
            log.write_csv(&log_path).map_err(data)?;
            Err(CliError::Divergence(format!("training diverged at iteration {iteration} (total loss {total})")))
        }
        Err(e) => Err(data(e)),
    }
}

fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(quadtext::evalharness::image_files(p).map_err(data)?);
        } else {
            require_file(p)?;
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn apply_nms(kind: NmsKind, cands: &[DetectionCandidate], cfg: &NmsConfig) -> Vec<DetectionCandidate> {
    match kind {
        NmsKind::Traditional => traditional_nms(cands, cfg),
        NmsKind::Recalled => recalled_nms(cands, cfg),
        NmsKind::None => cands.to_vec(),
    }
}

fn cmd_detect(
    checkpoint: &Path,
    out: &Path,
    nms: NmsKind,
    icfg: &InferenceConfig,
    ncfg: &NmsConfig,
    images: &[PathBuf],
) -> Result<(), CliError> {
    if !(ncfg.overlap_threshold > 0.0 && ncfg.overlap_threshold < 1.0) {
        return Err(CliError::Usage("--overlap must lie in (0, 1)".into()));
    }
    if icfg.window == 0 || !icfg.window.is_multiple_of(16) {
        return Err(CliError::Usage("--window must be a positive multiple of 16".into()));
    }
    require_dir(checkpoint)?;
    let images = collect_images(images)?;
    let model = NetworkModel::load(checkpoint).map_err(|e| CliError::Data(format!("{}: {e}", checkpoint.display())))?;
    make_out(out)?;
    for path in &images {
        let img = load_image(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let cands = detect_image(&model, &img, icfg).map_err(data)?;
        let kept = apply_nms(nms, &cands, ncfg);
        let key = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dest = out.join(format!("res_{key}.txt"));
        std::fs::write(&dest, format_candidates(&kept)).map_err(|e| CliError::Data(format!("{}: {e}", dest.display())))?;
        println!("{}: {} candidates, {} detections", path.display(), cands.len(), kept.len());
    }
    Ok(())
}

fn cmd_eval(detections: &Path, gt: &Path, iou: f64, out: Option<&Path>) -> Result<(), CliError> {
    require_dir(detections)?;
    require_dir(gt)?;
    let dets = load_detection_dir(detections).map_err(data)?;
    let gts = load_ground_truth_dir(gt).map_err(data)?;
    let report = evaluate(&dets, &gts, iou).map_err(data)?;
    let text = report.render();
    print!("{text}");
    if let Some(p) = out {
        std::fs::write(p, &text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn cmd_nms_demo(candidates: &Path, overlap: f64, out: Option<&Path>) -> Result<(), CliError> {
    require_file(candidates)?;
    let text = std::fs::read_to_string(candidates).map_err(|e| CliError::Data(format!("{}: {e}", candidates.display())))?;
    let cands = parse_candidates(&text).map_err(|e| CliError::Data(format!("{}: {e}", candidates.display())))?;
    let cfg = NmsConfig {
        overlap_threshold: overlap,
        ..Default::default()
    };
    let sections = [
        ("input", cands.clone()),
        ("traditional", traditional_nms(&cands, &cfg)),
        ("recalled", recalled_nms(&cands, &cfg)),
    ];
    let mut report = String::new();
    for (name, list) in &sections {
        report.push_str(&format!("# {name} ({})\n", list.len()));
        report.push_str(&format_candidates(list));
    }
    print!("{report}");
    if let Some(p) = out {
        std::fs::write(p, &report).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}
