use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use imlut::engine::{self, Model, SrRequest};
use imlut::imgio::{self, Image};
use imlut::imnet::{checkpoint, ImNetParams};
use imlut::kernels::{resample, Kernel, KernelSet};
use imlut::lut::{self, LutBundle};
use imlut::train::{self, Dataset, TrainConfig, TrainState};
use imlut::{Error, Result};

#[derive(Parser)]
#[command(name = "imlut", version, about = "Arbitrary-scale super-resolution with interpolation-mixing look-up tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write bicubic-downscaled LR mirrors of a dataset's HR images.
    PrepareData {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        scale: Vec<String>,
        /// Root for the LR_x* directories (defaults to the dataset root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the mixing network.
    Train(TrainArgs),
    /// Sample a trained checkpoint into a table bundle.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bundle file to write.
        #[arg(long)]
        out: PathBuf,
        /// Pixel step of the weight tables.
        #[arg(long, default_value_t = lut::DEFAULT_STEP_W)]
        qw: u32,
        /// Pixel step of the refiner tables.
        #[arg(long, default_value_t = lut::DEFAULT_STEP_R)]
        qr: u32,
    },
    /// Fine-tune the entries of a bundle.
    Finetune {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Bundle file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_images: Option<usize>,
    },
    /// Upscale one image; color inputs keep bicubic-upscaled chroma.
    Sr {
        input: PathBuf,
        #[arg(long)]
        scale: String,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// PSNR over a dataset at one or more scales.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        scale: Vec<String>,
        /// Directory for eval.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// MACs, storage and runtime of a bundle.
    Report {
        #[arg(long)]
        bundle: PathBuf,
        /// Output size HxW.
        #[arg(long, default_value = "720x1280")]
        dims: String,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        scale: Vec<String>,
        /// Timed runs per scale.
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Directory for report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Color-coded weight maps of an LR image.
    Inspect {
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// One grayscale map per kernel instead of a color blend.
        #[arg(long)]
        gray: bool,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory for checkpoints and loss.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// key = value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    kernels: Option<String>,
    #[arg(long)]
    branches: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    max_images: Option<usize>,
    /// Continue from the checkpoint and optimizer state in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ModelArgs {
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Single-kernel baseline: nearest, bilinear, bicubic, lanczos2, lanczos3.
    #[arg(long)]
    baseline: Option<String>,
}

impl ModelArgs {
    fn load(&self) -> Result<Model> {
        if let Some(path) = &self.bundle {
            return Ok(Model::Lut(lut::load(path)?));
        }
        if let Some(path) = &self.checkpoint {
            return Ok(Model::Net(checkpoint::load(path)?));
        }
        let name = self.baseline.as_deref().expect("clap enforces one model");
        Ok(Model::Baseline(Kernel::from_name(name)?))
    }
}

fn parse_scale(s: &str) -> Result<SrRequest> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| Error::contract(format!("bad scale {s:?}, expected H or HxW")))
    };
    match s.split_once(['x', 'X']) {
        Some((h, w)) => SrRequest::new(num(h)?, num(w)?),
        None => SrRequest::isotropic(num(s)?),
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::contract(format!("bad dims {s:?}, expected HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h = h.trim().parse().map_err(|_| bad())?;
    let w = w.trim().parse().map_err(|_| bad())?;
    Ok((h, w))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn prepare_data(dataset: &Path, scales: &[String], out: Option<&Path>) -> Result<()> {
    let reqs = scales.iter().map(|s| parse_scale(s)).collect::<Result<Vec<_>>>()?;
    let images = engine::load_eval_set(dataset)?;
    if images.is_empty() {
        return Err(Error::contract(format!("no images in {}", dataset.display())));
    }
    let root = out.unwrap_or(dataset);
    for req in &reqs {
        let dir = root.join(imgio::lr_dir_name(req.r_h, req.r_w));
        create_dir(&dir)?;
        for (name, hr) in &images {
            let (lr, _) = imgio::make_pair(hr, req.r_h, req.r_w)?;
            imgio::save_image(&lr, dir.join(Path::new(name).with_extension("png")))?;
        }
        info!("wrote {} images to {}", images.len(), dir.display());
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(d) = &a.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = &a.kernels {
        cfg.kernels = KernelSet::parse(v)?;
    }
    if let Some(v) = a.branches {
        cfg.branches = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.patch {
        cfg.patch = v;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    write_text(&a.out.join("train.cfg"), &cfg.to_text())?;
    let ds = Dataset::load(&cfg.dataset, a.max_images)?;
    info!("training on {} images", ds.len());
    let mut state = if a.resume { TrainState::load(&a.out)? } else { TrainState::new(&cfg)? };
    train::train_from(&mut state, &ds, &cfg, Some(&a.out))?;
    info!("finished at iteration {}", state.iteration());
    Ok(())
}

fn transfer_cmd(ckpt: &Path, out: &Path, qw: u32, qr: u32) -> Result<()> {
    let p: ImNetParams = checkpoint::load(ckpt)?;
    let bundle = LutBundle::transfer(&p, qw, qr, &train::TRAIN_SCALES)?;
    lut::save(&bundle, out)?;
    info!("wrote {} ({} bytes)", out.display(), bundle.serialized_len()?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finetune_cmd(
    bundle: &Path,
    dataset: &Path,
    out: &Path,
    seed: u64,
    iters: usize,
    batch: Option<usize>,
    patch: Option<usize>,
    lr: Option<f64>,
    max_images: Option<usize>,
) -> Result<()> {
    let b = lut::load(bundle)?;
    let mut cfg = lut::finetune_config();
    cfg.seed = seed;
    cfg.iterations = iters;
    cfg.batch = batch.unwrap_or(cfg.batch);
    cfg.patch = patch.unwrap_or(cfg.patch);
    cfg.lr = lr.unwrap_or(cfg.lr);
    let ds = Dataset::load(dataset, max_images)?;
    let tuned = lut::finetune(&b, &ds, &cfg)?;
    lut::save(&tuned, out)
}

fn sr_cmd(input: &Path, scale: &str, out: &Path, model: &ModelArgs) -> Result<()> {
    let req = parse_scale(scale)?;
    let model = model.load()?;
    let src = imgio::load_ycbcr(input)?;
    let y = model.upscale(&src.y, &req)?;
    match &src.chroma {
        None => imgio::save_image(&y, out),
        Some((cb, cr)) => {
            let up = |p: &Image| resample(p, req.r_h, req.r_w, Kernel::Bicubic, false).map(|x| x.clamp01());
            imgio::save_ycbcr(&y, up(cb)?.as_plane(), up(cr)?.as_plane(), out)
        }
    }
}

fn eval_cmd(dataset: &Path, scales: &[String], out: Option<&Path>, model: &ModelArgs) -> Result<()> {
    let reqs = scales.iter().map(|s| parse_scale(s)).collect::<Result<Vec<_>>>()?;
    let model = model.load()?;
    let images = engine::load_eval_set(dataset)?;
    let mut results = Vec::with_capacity(reqs.len());
    for req in reqs {
        let report = engine::evaluate(&model, &images, &req)?;
        println!("{} x{}: {:.4} dB over {} images", model.label(), engine::scale_label(&req), report.mean, report.count);
        results.push((req, report));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("eval.csv"), &engine::eval_csv(&model.label(), &results))?;
    }
    Ok(())
}

fn report_cmd(bundle: &Path, dims: &str, scales: &[String], runs: usize, out: Option<&Path>) -> Result<()> {
    let b = lut::load(bundle)?;
    let out_dims = parse_dims(dims)?;
    let mut rows = Vec::new();
    for s in scales {
        let req = parse_scale(s)?;
        let lr_dims = engine::lr_dims_for_output(out_dims, &req).unwrap_or((
            (out_dims.0 as f64 / req.r_h).round().max(3.0) as usize,
            (out_dims.1 as f64 / req.r_w).round().max(3.0) as usize,
        ));
        rows.push((req, engine::cost_report(&b, lr_dims, &req, runs)?));
    }
    let csv = engine::cost_csv(&rows);
    print!("{csv}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("report.csv"), &csv)?;
    }
    Ok(())
}

fn inspect_cmd(input: &Path, out: &Path, gray: bool, model: &ModelArgs) -> Result<()> {
    let model = model.load()?;
    let ks = match &model {
        Model::Lut(b) => b.kernel_set().clone(),
        Model::Net(p) => p.kernel_set().clone(),
        Model::Baseline(_) => return Err(Error::contract("inspect needs --bundle or --checkpoint")),
    };
    let lr = imgio::load_image(input)?;
    let maps = engine::weight_maps(&model, &lr)?;
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    create_dir(out)?;
    if gray {
        for (plane, kernel) in maps.planes.iter().zip(ks.iter()) {
            imgio::save_image(plane, out.join(format!("{stem}_weights_{}.png", kernel.code())))?;
        }
        return Ok(());
    }
    let [r, g, b] = engine::blend_weight_maps(&maps, &ks)?;
    let path = out.join(format!("{stem}_weights_{}.png", engine::color_legend(&ks)));
    imgio::save_rgb(&r, &g, &b, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::PrepareData { dataset, scale, out } => prepare_data(dataset, scale, out.as_deref()),
        Command::Train(a) => train_cmd(a),
        Command::Transfer { checkpoint, out, qw, qr } => transfer_cmd(checkpoint, out, *qw, *qr),
        Command::Finetune { bundle, dataset, out, seed, iters, batch, patch, lr, max_images } => {
            finetune_cmd(bundle, dataset, out, *seed, *iters, *batch, *patch, *lr, *max_images)
        }
        Command::Sr { input, scale, out, model } => sr_cmd(input, scale, out, model),
        Command::Eval { dataset, scale, out, model } => eval_cmd(dataset, scale, out.as_deref(), model),
        Command::Report { bundle, dims, scale, runs, out } => report_cmd(bundle, dims, scale, *runs, out.as_deref()),
        Command::Inspect { input, out, gray, model } => inspect_cmd(input, out, *gray, model),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_arguments() {
        let r = parse_scale("2.5").unwrap();
        assert_eq!((r.r_h, r.r_w), (2.5, 2.5));
        let r = parse_scale("2x2.4").unwrap();
        assert_eq!((r.r_h, r.r_w), (2.0, 2.4));
        for bad in ["", "x2", "2x", "0.9", "-2", "nan", "two"] {
            assert!(parse_scale(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn dims_arguments() {
        assert_eq!(parse_dims("720x1280").unwrap(), (720, 1280));
        assert!(parse_dims("720").is_err());
        assert!(parse_dims("ax3").is_err());
    }
}
