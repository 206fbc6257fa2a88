use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use gridpix_core::checkpoint::Checkpoint;
use gridpix_core::color::rgb_to_lab;
use gridpix_core::gradcheck::{run_suite, GradCheckConfig};
use gridpix_core::grid::{AssociationMap, GridSpec};
use gridpix_core::io::{read_image, read_labels, write_gray, write_image, write_labels, DatasetManifest};
use gridpix_core::metrics::evaluate_directory;
use gridpix_core::net::{loss_log_csv, LossKind, NetworkSpec, TrainConfig, TrainSample, Trainer};
use gridpix_core::sampling::{
    bilinear_upsample, block_mean, downsample, edge_mask, edge_preservation_score, soft_color_association, upsample,
};
use gridpix_core::segmentation::{overlay_boundaries, Connectivity};
use gridpix_core::slic::{slic, SlicConfig};
use gridpix_core::synthetic::{corpus, MosaicConfig};
use gridpix_core::{Error, Result, SpixelNet32, Tensor32};

#[derive(Parser)]
#[command(name = "gridpix", version, about = "Grid-constrained superpixels from a fully convolutional network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on a manifest of PPM images (and PGM labels for `sem`).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "sem")]
        loss: LossKind,
        /// Position weight.
        #[arg(long, default_value_t = 0.003)]
        m: f64,
        #[arg(long, default_value_t = 16)]
        cell_size: usize,
        #[arg(long, default_value_t = 3000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        /// Square crop side; defaults to the largest multiple of the cell and
        /// downsampling sizes that fits every image, capped at 208.
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Loss log; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Segment one image with a trained network.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Desired superpixel count; defaults to the image's own grid.
        #[arg(long)]
        nsp: Option<usize>,
        /// Defaults to the cell size the checkpoint was trained with.
        #[arg(long)]
        cell_size: Option<usize>,
        /// Keep every fragment of a split superpixel as its own label.
        #[arg(long)]
        keep_fragments: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Score a directory of predicted label maps against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// SLIC superpixels for one image.
    Slic {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 10.0)]
        m: f64,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Compare superpixel and bilinear upsampling on synthetic disparity maps.
    SampleDemo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Association network; without one a soft color clustering is used.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Upsampling factor, also the grid cell size.
        #[arg(long, default_value_t = 8)]
        scale: usize,
        /// Directory for reconstructed disparity images.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("GRIDPIX_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("GRIDPIX_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { data, loss, m, cell_size, iters, seed, lr, batch_size, crop, out, log } => {
            train(&data, loss, m, cell_size, iters, seed, lr, batch_size, crop, &out, log)?
        }
        Command::Infer { ckpt, image, nsp, cell_size, keep_fragments, out, overlay } => {
            infer(&ckpt, &image, nsp, cell_size, keep_fragments, &out, overlay.as_deref())?
        }
        Command::Eval { pred, gt, out } => {
            let report = evaluate_directory(&pred, &gt)?;
            std::fs::write(&out, report.to_csv())?;
            let all = report.overall();
            println!(
                "{} images: asa {:.4} br {:.4} bp {:.4} co {:.4}",
                report.rows.len(),
                all.asa,
                all.br,
                all.bp,
                all.co
            );
            if !report.missing.is_empty() {
                eprintln!("error: skipped {} unmatched label files: {}", report.missing.len(), report.missing.join(" "));
                return Ok(ExitCode::from(1));
            }
        }
        Command::Slic { image, k, m, iters, out, overlay } => {
            let rgb: Tensor32 = read_image(&image)?;
            let cfg = SlicConfig { m, iterations: iters, ..SlicConfig::new(k) };
            let result = slic(&rgb_to_lab(&rgb)?.values, &cfg)?;
            write_labels(&out, &result.labels)?;
            if let Some(path) = overlay {
                write_image(path, &overlay_boundaries(&rgb, &result.labels, &[1.0, 0.0, 0.0])?)?;
            }
            println!("{} superpixels", result.labels.n_labels());
        }
        Command::SampleDemo { seed, out, ckpt, count, scale, images } => {
            sample_demo(seed, &out, ckpt.as_deref(), count, scale, images.as_deref())?
        }
        Command::Gradcheck { seed } => {
            let report = run_suite(&GradCheckConfig::with_seed(seed))?;
            print!("{}", report.render());
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn default_crop(data: &[TrainSample<f32>], unit: usize) -> Result<usize> {
    let smallest = data.iter().map(|s| s.image.shape()[0].min(s.image.shape()[1])).min().unwrap_or(0);
    let side = (smallest.min(208) / unit) * unit;
    if side == 0 {
        return Err(Error::InvalidArgument(format!(
            "images must be at least {unit}x{unit} to train; the smallest side is {smallest}"
        )));
    }
    Ok(side)
}

#[allow(clippy::too_many_arguments)]
fn train(
    manifest: &Path,
    loss: LossKind,
    m: f64,
    cell_size: usize,
    iters: usize,
    seed: u64,
    lr: f64,
    batch_size: usize,
    crop: Option<usize>,
    out: &Path,
    log: Option<PathBuf>,
) -> Result<()> {
    let manifest = DatasetManifest::load(manifest)?;
    let data = manifest
        .entries
        .iter()
        .map(|e| {
            Ok(TrainSample {
                image: read_image(&e.image)?,
                labels: e.labels.as_ref().map(read_labels).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = NetworkSpec::default();
    let unit = lcm(spec.downsampling(), cell_size);
    let side = match crop {
        Some(c) => c,
        None => default_crop(&data, unit)?,
    };
    let cfg = TrainConfig {
        cell_size,
        crop: (side, side),
        learning_rate: lr,
        iterations: iters,
        batch_size,
        loss,
        m,
        seed,
        ..TrainConfig::default()
    };
    let net = SpixelNet32::new(spec, seed)?;
    let mut trainer = Trainer::new(net, &data, cfg.clone())?;
    let every = (iters / 20).max(1);
    let history = trainer.run(|r| {
        if (r.iteration + 1) % every == 0 {
            eprintln!("iter {:>6}  loss {:.5}  lr {:.2e}", r.iteration + 1, r.loss, r.learning_rate);
        }
    })?;
    let meta = json!({
        "cell_size": cell_size,
        "loss": format!("{loss:?}").to_lowercase(),
        "m": m,
        "iterations": iters,
        "seed": seed,
        "learning_rate": lr,
        "batch_size": batch_size,
        "crop": side,
        "images": data.len(),
    });
    trainer.net().save(out, meta)?;
    let log = log.unwrap_or_else(|| out.with_extension("csv"));
    std::fs::write(&log, loss_log_csv(&history))?;
    let last = history.last().map_or(f64::NAN, |r| r.loss);
    println!("trained {iters} iterations, final loss {last:.5}, saved {}", out.display());
    Ok(())
}

fn lcm(a: usize, b: usize) -> usize {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

fn infer(
    ckpt: &Path,
    image: &Path,
    nsp: Option<usize>,
    cell_size: Option<usize>,
    keep_fragments: bool,
    out: &Path,
    overlay: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(ckpt)?;
    let trained_cell = ckpt.metadata["extra"]["cell_size"].as_u64().map(|c| c as usize);
    let cell_size = cell_size.or(trained_cell).unwrap_or(16);
    let net = SpixelNet32::from_checkpoint(&ckpt)?;
    let rgb: Tensor32 = read_image(image)?;
    let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
    let desired = nsp.unwrap_or_else(|| ((h / cell_size) * (w / cell_size)).max(4));
    let connectivity = Connectivity { keep_fragments, ..Connectivity::new(cell_size as f64) };
    let seg = net.segment(&rgb, desired, cell_size, connectivity)?;
    write_labels(out, &seg.labels)?;
    if let Some(path) = overlay {
        write_image(path, &overlay_boundaries(&rgb, &seg.labels, &[1.0, 0.0, 0.0])?)?;
    }
    let t = seg.inference.transform;
    println!(
        "{} superpixels ({} grid cells at {}x{})",
        seg.labels.n_labels(),
        (t.target.0 / cell_size) * (t.target.1 / cell_size),
        t.target.1,
        t.target.0
    );
    Ok(())
}

fn sample_demo(seed: u64, out: &Path, ckpt: Option<&Path>, count: usize, scale: usize, images: Option<&Path>) -> Result<()> {
    let net = ckpt.map(SpixelNet32::load).transpose()?;
    let scenes = corpus::<f32>(seed, count, &MosaicConfig::default())?;
    if let Some(dir) = images {
        std::fs::create_dir_all(dir)?;
    }
    let mut csv = String::from("instance,superpixel,bilinear,superpixel_better\n");
    let mut wins = 0;
    for (i, scene) in scenes.iter().enumerate() {
        let (h, w, _) = scene.image.dims3()?;
        let grid = GridSpec::new(h, w, scale)?;
        let assoc: AssociationMap<f32> = match &net {
            Some(net) => net.predict(&scene.image, scale)?,
            None => soft_color_association(&rgb_to_lab(&scene.image)?.values, &grid, 10.0, 25.0, 5)?,
        };
        let signal = &scene.disparity;
        let mask = edge_mask(&scene.labels);
        let ours = upsample(&assoc, &downsample(&assoc, signal)?)?;
        let base = bilinear_upsample(&block_mean(signal, &grid)?, h, w)?;
        let (a, b) = (edge_preservation_score(signal, &ours, &mask)?, edge_preservation_score(signal, &base, &mask)?);
        wins += usize::from(a < b);
        csv.push_str(&format!("{i},{a:.6},{b:.6},{}\n", a < b));
        if let Some(dir) = images {
            let hi = MosaicConfig::default().max_disparity;
            write_gray(dir.join(format!("{i:04}_truth.ppm")), signal, 0.0, hi)?;
            write_gray(dir.join(format!("{i:04}_superpixel.ppm")), &ours, 0.0, hi)?;
            write_gray(dir.join(format!("{i:04}_bilinear.ppm")), &base, 0.0, hi)?;
        }
    }
    std::fs::write(out, csv)?;
    println!("superpixel upsampling better on {wins} of {count} instances at {scale}x");
    Ok(())
}
