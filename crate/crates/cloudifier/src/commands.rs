//! Implementations behind the `cloudifier` binary's subcommands. Everything
//! here is plain library code so the binary stays a thin argument parser and
//! examples can drive the same paths directly.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::{expand_dataset, ApplyTo, AugmentPolicy};
use crate::error::{Error, Result};
use crate::graph::{build_network, round_up, Network, NetworkConfig};
use crate::io::dataset::DatasetHeader;
use crate::io::{load_checkpoint, read_dataset, save_checkpoint, write_dataset};
use crate::scene::{
    generate_observation, taxonomy, GenConfig, Granularity, Observation, ScenePolicy, ThemeMix,
    META_BATCH_SIZE, OBSERVATION_SIDE,
};
use crate::tensor::{Real, Shape, Tensor};
use crate::train::{
    evaluate, format_report_table, split_dataset, train_loop, DatasetKind, LossKind, Sample,
    SplitSpec, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "cloudifier", version, about = "Dense semantic segmentation of software-rendered UI scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate labeled synthetic UI scene datasets.
    GenData(GenDataArgs),
    /// Train a network on generated datasets.
    Train(TrainArgs),
    /// Evaluate a checkpoint against datasets, printing the accuracy/recall table.
    Eval(EvalArgs),
    /// Run inference on an image, exporting the class map and overlays.
    Infer(InferArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Infer(args) => cmd_infer(&args),
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output dataset file (suffix -NNN added when --meta-batches > 1).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of meta-batch files to write.
    #[arg(long, default_value_t = 1)]
    pub meta_batches: usize,
    /// Observations per meta-batch.
    #[arg(long, default_value_t = META_BATCH_SIZE)]
    pub obs: usize,
    /// Square observation size in pixels.
    #[arg(long, default_value_t = OBSERVATION_SIDE)]
    pub size: usize,
    /// win95 | win98 | winxp | sketch | mixed
    #[arg(long, default_value = "mixed")]
    pub theme: String,
    /// coarse | fine
    #[arg(long, default_value = "coarse")]
    pub granularity: String,
    /// Restrict the label space to the first N classes (desk-scale runs).
    #[arg(long)]
    pub classes: Option<u16>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_theme(s: &str) -> Result<ThemeMix> {
    ThemeMix::parse(s).ok_or_else(|| {
        Error::InvalidArgument(format!("unknown theme '{s}' (win95|win98|winxp|sketch|mixed)"))
    })
}

fn parse_granularity(s: &str) -> Result<Granularity> {
    Granularity::parse(s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown granularity '{s}' (coarse|fine)")))
}

/// Generate observations for one file in deterministic index order,
/// parallelizing within fixed-size chunks.
fn scene_stream(cfg: GenConfig, count: usize) -> impl Iterator<Item = Result<Observation>> {
    use rayon::prelude::*;
    const CHUNK: usize = 64;
    (0..count.div_ceil(CHUNK)).flat_map(move |chunk| {
        let lo = chunk * CHUNK;
        let hi = (lo + CHUNK).min(count);
        let batch: Vec<Result<Observation>> = (lo as u64..hi as u64)
            .into_par_iter()
            .map(|i| generate_observation(&cfg, i).map(|s| s.observation))
            .collect();
        batch.into_iter()
    })
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    if args.obs == 0 || args.meta_batches == 0 {
        return Err(Error::InvalidArgument("--obs and --meta-batches must be positive".into()));
    }
    if args.size < 16 || args.size > 1024 {
        return Err(Error::InvalidArgument("--size must be within [16, 1024]".into()));
    }
    let granularity = parse_granularity(&args.granularity)?;
    let themes = parse_theme(&args.theme)?;
    if let Some(cap) = args.classes {
        let full = taxonomy().class_count(granularity) as u16;
        if cap < 2 || cap > full {
            return Err(Error::InvalidArgument(format!(
                "--classes must be within [2, {full}] for {} granularity",
                granularity.name()
            )));
        }
    }

    for batch in 0..args.meta_batches {
        let seed = args.seed.wrapping_add(batch as u64);
        let mut cfg = GenConfig::new(seed);
        cfg.size = args.size;
        cfg.themes = themes;
        cfg.granularity = granularity;
        if let Some(cap) = args.classes {
            cfg.policy = ScenePolicy::default().with_class_cap(cap);
        }
        let header = DatasetHeader {
            count: args.obs as u32,
            height: args.size as u16,
            width: args.size as u16,
            channels: 3,
            num_classes: cfg.num_classes() as u16,
            granularity,
            themes,
            seed,
        };
        let path = if args.meta_batches == 1 {
            args.out.clone()
        } else {
            numbered_path(&args.out, batch)
        };
        write_dataset(&path, header, scene_stream(cfg, args.obs))?;
        println!(
            "wrote {}: {} observations of {}x{}x3, {} classes ({})",
            path.display(),
            args.obs,
            args.size,
            args.size,
            header.num_classes,
            granularity.name()
        );
    }
    Ok(())
}

fn numbered_path(base: &Path, index: usize) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("cfds");
    base.with_file_name(format!("{stem}-{index:03}.{ext}"))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset files (repeatable); all must share dims, classes, granularity.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// cloudifier109 | cloudifier50 | micro
    #[arg(long, default_value = "micro")]
    pub variant: String,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// nll | focal
    #[arg(long, default_value = "nll")]
    pub loss: String,
    #[arg(long, default_value_t = 2.0)]
    pub focal_gamma: f64,
    /// Optional down-weight for the background class under the focal loss.
    #[arg(long)]
    pub bg_weight: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Augmentation policy file (key=value); defaults to the built-in policy.
    #[arg(long)]
    pub augment_policy: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Loss-history CSV output path.
    #[arg(long)]
    pub history: PathBuf,
    /// Carve this fraction of the training partition as in-training validation.
    #[arg(long)]
    pub inner_val: Option<f64>,
    /// Stop early once training pixel accuracy reaches this value.
    #[arg(long)]
    pub stop_accuracy: Option<f64>,
    /// Print per-epoch progress.
    #[arg(long, default_value_t = false)]
    pub quiet: bool,
}

struct LoadedData {
    header: DatasetHeader,
    /// (observation, is_sketch)
    observations: Vec<(Observation, bool)>,
}

fn load_datasets(paths: &[PathBuf]) -> Result<LoadedData> {
    let mut all = Vec::new();
    let mut first: Option<DatasetHeader> = None;
    for path in paths {
        let (header, observations) = read_dataset(path)?;
        if let Some(f) = &first {
            if (header.width, header.height, header.num_classes, header.granularity)
                != (f.width, f.height, f.num_classes, f.granularity)
            {
                return Err(Error::InvalidArgument(format!(
                    "{}: dims/classes/granularity differ from {}",
                    path.display(),
                    paths[0].display()
                )));
            }
        } else {
            first = Some(header);
        }
        let sketch = header.is_sketch();
        all.extend(observations.into_iter().map(|o| (o, sketch)));
    }
    Ok(LoadedData { header: first.expect("at least one dataset"), observations: all })
}

fn loss_kind(args: &TrainArgs, num_classes: usize) -> Result<LossKind> {
    match args.loss.as_str() {
        "nll" => Ok(LossKind::Nll),
        "focal" => {
            let class_weights = args.bg_weight.map(|w| {
                let mut weights = vec![1.0 as Real; num_classes];
                weights[0] = w as Real;
                weights
            });
            Ok(LossKind::Focal { gamma: args.focal_gamma as Real, class_weights })
        }
        other => Err(Error::InvalidArgument(format!("unknown loss '{other}' (nll|focal)"))),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    if !(1..=512).contains(&args.batch) {
        return Err(Error::InvalidArgument("--batch must be within [1, 512]".into()));
    }
    let data = load_datasets(&args.data)?;
    let num_classes = data.header.num_classes as usize;
    let config = NetworkConfig::by_name(&args.variant, num_classes)?.with_seed(args.seed);
    let mut net = build_network(config)?;

    // split the joined dataset first, then augment the training partition only
    let (train_obs, _test_obs, dev_obs) =
        split_dataset(data.observations, &SplitSpec::default().with_seed(args.seed))?;

    let policy = match &args.augment_policy {
        Some(path) => AugmentPolicy::from_text(&std::fs::read_to_string(path)?)?,
        None => AugmentPolicy {
            crop: Some((data.header.width as usize, data.header.height as usize)),
            ..AugmentPolicy::default()
        },
    };
    let train_samples = augment_partition(&train_obs, &policy, args.seed)?;
    let dev_samples: Vec<Sample> =
        dev_obs.iter().map(|(o, _)| Sample::from_observation(o)).collect();

    let cfg = TrainConfig {
        batch_size: args.batch,
        epochs: args.epochs,
        loss: loss_kind(args, num_classes)?,
        lr: args.lr as Real,
        plateau: Default::default(),
        seed: args.seed,
        inner_val_fraction: args.inner_val,
        stop_at_train_accuracy: args.stop_accuracy,
        log: !args.quiet,
    };
    let history = train_loop(&mut net, &train_samples, &dev_samples, &cfg)?;

    crate::io::atomic_write(&args.history, history.to_csv().as_bytes())?;
    save_checkpoint(&args.ckpt, &net)?;
    println!(
        "trained {} for {} epochs on {} samples; checkpoint {}, history {}",
        args.variant,
        history.records.len(),
        train_samples.len(),
        args.ckpt.display(),
        args.history.display()
    );
    Ok(())
}

/// Expand the training partition according to the policy: sketch-theme
/// observations get the full pipeline by default, rendered ones pass through.
fn augment_partition(
    observations: &[(Observation, bool)],
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<Vec<Sample>> {
    policy.validate()?;
    let (augment, passthrough): (Vec<&Observation>, Vec<&Observation>) = match policy.apply_to {
        ApplyTo::All => (observations.iter().map(|(o, _)| o).collect(), Vec::new()),
        ApplyTo::None => (Vec::new(), observations.iter().map(|(o, _)| o).collect()),
        ApplyTo::SketchOnly => {
            let mut a = Vec::new();
            let mut p = Vec::new();
            for (o, sketch) in observations {
                if *sketch {
                    a.push(o);
                } else {
                    p.push(o);
                }
            }
            (a, p)
        }
    };
    let mut samples: Vec<Sample> = passthrough.iter().map(|o| Sample::from_observation(o)).collect();
    if !augment.is_empty() {
        let owned: Vec<Observation> = augment.iter().map(|o| (*o).clone()).collect();
        samples.extend(expand_dataset(&owned, policy, seed)?.into_iter().map(Sample::from_pair));
    }
    Ok(samples)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset files (repeatable).
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Write the full JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let net = load_checkpoint(&args.ckpt)?;
    let mut artificial = Vec::new();
    let mut natural = Vec::new();
    for path in &args.data {
        let (header, observations) = read_dataset(path)?;
        if usize::from(header.num_classes) != net.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "{}: dataset has {} classes but the checkpoint network has {}",
                path.display(),
                header.num_classes,
                net.num_classes()
            )));
        }
        let samples = observations.iter().map(Sample::from_observation);
        if header.is_sketch() {
            natural.extend(samples);
        } else {
            artificial.extend(samples);
        }
    }
    let mut groups = Vec::new();
    if !artificial.is_empty() {
        groups.push((DatasetKind::Artificial, artificial));
    }
    if !natural.is_empty() {
        groups.push((DatasetKind::Natural, natural));
    }
    let report = evaluate(&net, &groups)?;
    print!("{}", format_report_table(&net.config().variant_name, &report));
    if let Some(out) = &args.out {
        crate::io::atomic_write(out, report.to_json().as_bytes())?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input image (png, bmp, jpeg).
    #[arg(long)]
    pub image: PathBuf,
    /// Raw little-endian u16 class map, row-major H*W.
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
    /// Class overlay blended over the input at 50% alpha.
    #[arg(long)]
    pub overlay_out: Option<PathBuf>,
    /// Raw little-endian f32 logits, row-major H*W*C.
    #[arg(long)]
    pub logits_out: Option<PathBuf>,
    /// reflect: pad indivisible inputs up and crop predictions back;
    /// error: reject indivisible inputs.
    #[arg(long, default_value = "reflect")]
    pub pad: String,
}

/// Deterministic per-class overlay color (golden-angle hue walk).
pub fn class_color(class: u16) -> [u8; 3] {
    if class == 0 {
        return [0, 0, 0];
    }
    let hue = (class as f64 * 137.50776405) % 360.0;
    let (h, s, v) = (hue / 60.0, 0.85f64, 0.95f64);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [((r + m) * 255.0) as u8, ((g + m) * 255.0) as u8, ((b + m) * 255.0) as u8]
}

fn reflect_index(i: usize, len: usize) -> usize {
    // mirror without repeating the edge sample, clamped for tiny inputs
    if i < len {
        i
    } else if len == 1 {
        0
    } else {
        let over = i - len + 1;
        len.saturating_sub(1 + over.min(len - 1))
    }
}

/// Pad an RGB image up to (th, tw) by mirror reflection.
fn reflect_pad(rgb: &[u8], w: usize, h: usize, tw: usize, th: usize) -> Vec<u8> {
    let mut out = vec![0u8; tw * th * 3];
    for y in 0..th {
        let sy = reflect_index(y, h);
        for x in 0..tw {
            let sx = reflect_index(x, w);
            out[(y * tw + x) * 3..(y * tw + x) * 3 + 3]
                .copy_from_slice(&rgb[(sy * w + sx) * 3..(sy * w + sx) * 3 + 3]);
        }
    }
    out
}

/// Dense inference on an arbitrary RGB image: returns (h, w, logits (h*w*C)).
pub fn infer_image(net: &Network, rgb: &[u8], w: usize, h: usize, pad_reflect: bool) -> Result<(Vec<Real>, usize)> {
    let m = net.max_downsample();
    let (tw, th) = (round_up(w, m), round_up(h, m));
    let padded = if (tw, th) == (w, h) {
        rgb.to_vec()
    } else if pad_reflect {
        reflect_pad(rgb, w, h, tw, th)
    } else {
        return Err(Error::ShapeMismatch {
            op: "infer",
            detail: format!("image {w}x{h} not divisible by {m} and --pad=error"),
        });
    };
    let data: Vec<Real> = padded.iter().map(|&v| v as Real / 255.0).collect();
    let x = Tensor::from_vec(Shape::nhwc(1, th, tw, 3), data)?;
    let logits = net.infer(&x)?;
    let c = logits.shape().c();
    // crop predictions back to the source dims
    let mut out = Vec::with_capacity(w * h * c);
    for y in 0..h {
        let row = y * tw * c;
        out.extend_from_slice(&logits.data()[row..row + w * c]);
    }
    Ok((out, c))
}

pub fn argmax_map(logits: &[Real], classes: usize) -> Vec<u16> {
    logits
        .chunks_exact(classes)
        .map(|fiber| {
            fiber
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i as u16)
                .unwrap_or(0)
        })
        .collect()
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let pad_reflect = match args.pad.as_str() {
        "reflect" => true,
        "error" => false,
        other => return Err(Error::InvalidArgument(format!("unknown --pad '{other}' (reflect|error)"))),
    };
    let net = load_checkpoint(&args.ckpt)?;
    let img = image::open(&args.image)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rgb = img.into_raw();

    let (logits, classes) = infer_image(&net, &rgb, w, h, pad_reflect)?;
    let labels = argmax_map(&logits, classes);

    if let Some(path) = &args.labels_out {
        let mut bytes = Vec::with_capacity(labels.len() * 2);
        for l in &labels {
            bytes.extend_from_slice(&l.to_le_bytes());
        }
        crate::io::atomic_write(path, &bytes)?;
    }
    if let Some(path) = &args.logits_out {
        let mut bytes = Vec::with_capacity(logits.len() * 4);
        for v in &logits {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        crate::io::atomic_write(path, &bytes)?;
    }
    if let Some(path) = &args.overlay_out {
        let mut overlay = vec![0u8; w * h * 3];
        for (i, &label) in labels.iter().enumerate() {
            let color = class_color(label);
            for c in 0..3 {
                overlay[i * 3 + c] = ((rgb[i * 3 + c] as u16 + color[c] as u16) / 2) as u8;
            }
        }
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(w as u32, h as u32, overlay).expect("overlay buffer");
        buf.save(path)?;
    }
    println!(
        "inferred {}x{} image into {} classes{}",
        w,
        h,
        classes,
        args.labels_out.as_ref().map(|p| format!("; labels at {}", p.display())).unwrap_or_default()
    );
    Ok(())
}
