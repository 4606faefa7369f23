//! `assd`: train, evaluate and inspect attentive single-shot detectors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use assd::boxes::generate_anchors;
use assd::checkpoint;
use assd::data::{load_samples, synthesize_dataset, write_atomically, write_corpus, RgbImage, SynthSpec};
use assd::detector::{DetectOptions, Detector, DetectorConfig};
use assd::gradcheck::{run_gradcheck, GradcheckOptions};
use assd::heatmap::render_overlay;
use assd::train::{evaluate_detector, train_loop, TrainOptions};
use assd::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "assd", version, about = "Attentive single-shot detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config and a dataset manifest; prints one loss line per epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// `step` (10x decays late in training), `none`, or `epoch:multiplier,...`.
        #[arg(long, default_value = "step")]
        schedule: String,
        /// Disable random crops and flips.
        #[arg(long)]
        no_augment: bool,
    },
    /// Per-class AP and mAP of a model on a manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Detections for one PPM image as JSON.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.45)]
        nms_threshold: f64,
        #[arg(long, default_value_t = 200)]
        max_detections: usize,
    },
    /// Attention of one query location rendered over the image.
    Attend {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Pyramid scale, 0 = finest.
        #[arg(long)]
        scale: usize,
        /// Grid cell as `x,y` (column, row) on that scale.
        #[arg(long)]
        query: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Anchor boxes of a config as a JSON array of `[xmin, ymin, xmax, ymax]`.
    Anchors {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward pass; exits 0 iff all pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write a synthetic shapes corpus (PPM images and manifest.json).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

type CliResult<T = ()> = Result<T, String>;

fn fail(e: Error) -> String {
    e.to_string()
}

fn read_config(path: &Path) -> CliResult<DetectorConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let config: DetectorConfig =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    config.validate().map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(config)
}

fn parse_schedule(spec: &str, epochs: usize) -> CliResult<Vec<(usize, f64)>> {
    match spec {
        "step" => Ok(TrainOptions::step_schedule(epochs)),
        "none" => Ok(Vec::new()),
        list => list
            .split(',')
            .map(|item| {
                let (e, m) = item.split_once(':').ok_or_else(|| format!("bad schedule entry {item:?}"))?;
                let e = e.trim().parse().map_err(|_| format!("bad schedule epoch {e:?}"))?;
                let m = m.trim().parse().map_err(|_| format!("bad schedule multiplier {m:?}"))?;
                Ok((e, m))
            })
            .collect(),
    }
}

fn parse_query(spec: &str) -> CliResult<(usize, usize)> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad query {spec:?}, expected x,y"));
    let (x, y) = spec.split_once(',').ok_or_else(|| format!("bad query {spec:?}, expected x,y"))?;
    Ok((parse(x)?, parse(y)?))
}

fn load_image(detector: &Detector, path: &Path) -> CliResult<RgbImage> {
    let image = RgbImage::read_ppm(path).map_err(fail)?;
    let size = detector.config.image_size;
    if image.width != size || image.height != size {
        return Err(format!(
            "{}: image is {}x{}, model expects {size}x{size}",
            path.display(),
            image.width,
            image.height
        ));
    }
    Ok(image)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    write_atomically(path, text.as_bytes()).map_err(fail)
}

fn run(command: Command) -> CliResult<bool> {
    match command {
        Command::Train { config, data, epochs, seed, out, lr, batch_size, schedule, no_augment } => {
            let config = read_config(&config)?;
            let samples = load_samples(&data).map_err(fail)?;
            let mut opts = TrainOptions {
                epochs,
                batch_size,
                learning_rate: lr,
                schedule: parse_schedule(&schedule, epochs)?,
                seed,
                ..Default::default()
            };
            if no_augment {
                opts.augment.crop = false;
                opts.augment.flip = false;
            }
            let outcome = train_loop(&config, &samples, &opts, |epoch, loss| {
                println!("epoch {epoch} loss {loss}");
            })
            .map_err(fail)?;
            checkpoint::save(&out, &outcome.detector).map_err(fail)?;
        }
        Command::Eval { model, data, iou } => {
            let detector = checkpoint::load(&model).map_err(fail)?;
            let samples = load_samples(&data).map_err(fail)?;
            let report = evaluate_detector(&detector, &samples, iou).map_err(fail)?;
            for (k, ap) in report.per_class.iter().enumerate() {
                match ap {
                    Some(ap) => println!("class {} AP {ap}", k + 1),
                    None => println!("class {} AP n/a", k + 1),
                }
            }
            println!("mAP {}", report.map);
        }
        Command::Detect { model, image, out, score_threshold, nms_threshold, max_detections } => {
            let detector = checkpoint::load(&model).map_err(fail)?;
            let img = load_image(&detector, &image)?;
            let opts = DetectOptions { score_threshold, nms_threshold, max_detections };
            let dets = detector.detect(&img.to_tensor(), &opts).map_err(fail)?;
            write_json(&out, &dets)?;
        }
        Command::Attend { model, image, scale, query, out } => {
            let detector = checkpoint::load(&model).map_err(fail)?;
            let (qx, qy) = parse_query(&query)?;
            let scales = detector.config.scales.len();
            if scale >= scales {
                return Err(format!("scale {scale} out of range, model has {scales} scales"));
            }
            let grid = detector.config.scales[scale].grid;
            if qx >= grid || qy >= grid {
                return Err(format!("query {qx},{qy} outside the {grid}x{grid} grid of scale {scale}"));
            }
            let img = load_image(&detector, &image)?;
            let maps = detector.attention_maps(&img.to_tensor()).map_err(fail)?;
            let overlay = render_overlay(&img, &maps[scale], qy * grid + qx).map_err(fail)?;
            overlay.write_ppm(&out).map_err(fail)?;
        }
        Command::Anchors { config, out } => {
            let config = read_config(&config)?;
            let anchors = generate_anchors(&config.anchor_spec()).map_err(fail)?;
            let rows: Vec<[f64; 4]> = anchors.iter().map(|a| a.to_array()).collect();
            write_json(&out, &rows)?;
        }
        Command::Gradcheck { seed, corrupt } => {
            let mut opts = GradcheckOptions::new(seed);
            opts.corrupt = corrupt;
            let report = run_gradcheck(&opts).map_err(fail)?;
            print!("{report}");
            return Ok(report.passed());
        }
        Command::Synth { out, n, seed } => {
            let samples = synthesize_dataset(n, seed, &SynthSpec::default()).map_err(fail)?;
            let manifest = write_corpus(&out, &samples).map_err(fail)?;
            println!("{}", manifest.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let line = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(msg) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
