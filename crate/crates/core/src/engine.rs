//! Upscaling with tables, with the live network, or with a single kernel;
//! evaluation over image sets; cost accounting.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::imgio::{make_pair, psnr, EvalReport, Image, Plane};
use crate::imnet::ops::{mix, modulate_and_upsample};
use crate::imnet::{forward_refiner, forward_weight_predictor, ImNetParams};
use crate::kernels::{resample, resample_set, Kernel, KernelSet};
use crate::lut::LutBundle;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrRequest {
    pub r_h: f64,
    pub r_w: f64,
    pub ensemble: bool,
}

impl SrRequest {
    pub fn new(r_h: f64, r_w: f64) -> Result<Self> {
        let req = SrRequest { r_h, r_w, ensemble: true };
        req.validate()?;
        Ok(req)
    }

    pub fn isotropic(r: f64) -> Result<Self> {
        SrRequest::new(r, r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_h >= 1.0 && self.r_w >= 1.0 && self.r_h.is_finite() && self.r_w.is_finite()) {
            return Err(Error::contract(format!(
                "scales must be at least 1, got {}x{}",
                self.r_h, self.r_w
            )));
        }
        Ok(())
    }

    /// Scalar scale fed to the modulator: the geometric mean of both axes.
    pub fn effective_scale(&self) -> f64 {
        (self.r_h * self.r_w).sqrt()
    }
}

/// Network-free upscaling from a table bundle.
pub fn imlut_sr(bundle: &LutBundle, lr: &Image, req: &SrRequest) -> Result<Image> {
    req.validate()?;
    let weights = bundle.predict_weights(lr, req.ensemble)?;
    let s = bundle.lut_s().nearest(req.effective_scale())?;
    let ks = bundle.kernel_set();
    let wsr = modulate_and_upsample(&weights, s, ks, req.r_h, req.r_w)?;
    let sr_set = resample_set(lr, ks, req.r_h, req.r_w)?;
    let mixed = mix(&sr_set, &wsr)?;
    Image::try_from_plane(bundle.refine(&mixed, req.ensemble)?)
}

/// The same pipeline evaluated with the live network.
pub fn imnet_sr(p: &ImNetParams, lr: &Image, req: &SrRequest) -> Result<Image> {
    req.validate()?;
    let weights = forward_weight_predictor(p, lr, req.ensemble)?;
    let s = p.forward_scale_mod(req.effective_scale())?;
    let ks = p.kernel_set();
    let wsr = modulate_and_upsample(&weights, &s, ks, req.r_h, req.r_w)?;
    let sr_set = resample_set(lr, ks, req.r_h, req.r_w)?;
    let mixed = mix(&sr_set, &wsr)?;
    forward_refiner(p, &mixed, req.ensemble)
}

/// Plain single-kernel upscaling, clamped to `[0, 1]`.
pub fn baseline_sr(lr: &Image, kernel: Kernel, req: &SrRequest) -> Result<Image> {
    req.validate()?;
    Ok(resample(lr, req.r_h, req.r_w, kernel, false)?.clamp01())
}

/// Anything that can upscale an image.
#[derive(Clone, Debug)]
pub enum Model {
    Lut(LutBundle),
    Net(ImNetParams),
    Baseline(Kernel),
}

impl Model {
    pub fn upscale(&self, lr: &Image, req: &SrRequest) -> Result<Image> {
        match self {
            Model::Lut(b) => imlut_sr(b, lr, req),
            Model::Net(p) => imnet_sr(p, lr, req),
            Model::Baseline(k) => baseline_sr(lr, *k, req),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Model::Lut(b) => format!("imlut-{}", b.kernel_set().code()),
            Model::Net(p) => format!("imnet-{}", p.kernel_set().code()),
            Model::Baseline(k) => k.name().to_string(),
        }
    }
}

/// PSNR of `model` on LR/HR pairs generated from each HR image.
pub fn evaluate(model: &Model, images: &[(String, Image)], req: &SrRequest) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(images.len());
    for (name, hr) in images {
        let (lr, crop) = make_pair(hr, req.r_h, req.r_w)?;
        let sr = model.upscale(&lr, req)?;
        rows.push((name.clone(), psnr(&sr, &crop)?));
    }
    EvalReport::from_values(rows)
}

/// Scale label used in tables, e.g. `2` or `2x2.4`.
pub fn scale_label(req: &SrRequest) -> String {
    if req.r_h == req.r_w {
        format!("{}", req.r_h)
    } else {
        format!("{}x{}", req.r_h, req.r_w)
    }
}

/// `model,scale,image,psnr` rows with a `mean` row closing each scale.
pub fn eval_csv(model: &str, results: &[(SrRequest, EvalReport)]) -> String {
    let mut out = String::from("model,scale,image,psnr\n");
    for (req, report) in results {
        let scale = scale_label(req);
        for (name, v) in &report.per_image {
            let _ = writeln!(out, "{model},{scale},{name},{v:.4}");
        }
        let _ = writeln!(out, "{model},{scale},mean,{:.4}", report.mean);
    }
    out
}

/// Per-stage multiply-accumulate counts of one upscaling call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacCount {
    pub weight_lut: u64,
    pub modulation: u64,
    pub resampling: u64,
    pub mixing: u64,
    pub refiner_lut: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.weight_lut + self.modulation + self.resampling + self.mixing + self.refiner_lut
    }
}

/// Fused multiply-adds of one 4-D simplex lookup per output value.
pub const TETRA_MACS: u64 = 5;

/// Separable resampling of one output pixel: `taps` per axis, two passes.
pub fn resample_macs(kernel: Kernel) -> u64 {
    2 * kernel.taps()
}

/// Analytic MAC count.
///
/// - weight tables: `LR px * 4 rotations * B * 5 * K`
/// - modulation: `K` per LR pixel
/// - resampling: `K` image and `K` weight-map upsamplings, `2 * taps` each per HR pixel
/// - mixing: `K` per HR pixel
/// - refiner tables: `HR px * 4 rotations * B * 5`
pub fn count_macs(ks: &KernelSet, branches: usize, lr_dims: (usize, usize), req: &SrRequest) -> Result<MacCount> {
    req.validate()?;
    let lr_px = (lr_dims.0 * lr_dims.1) as u64;
    let hr_px = (crate::kernels::scaled_len(lr_dims.0, req.r_h) * crate::kernels::scaled_len(lr_dims.1, req.r_w)) as u64;
    let k = ks.len() as u64;
    let b = branches as u64;
    let rots = if req.ensemble { 4 } else { 1 };
    Ok(MacCount {
        weight_lut: lr_px * rots * b * TETRA_MACS * k,
        modulation: lr_px * k,
        resampling: hr_px * 2 * ks.iter().map(resample_macs).sum::<u64>(),
        mixing: hr_px * k,
        refiner_lut: hr_px * rots * b * TETRA_MACS,
    })
}

/// MACs of a single-kernel baseline: `2 * taps` per HR pixel.
pub fn baseline_macs(kernel: Kernel, lr_dims: (usize, usize), req: &SrRequest) -> u64 {
    let hr_px = crate::kernels::scaled_len(lr_dims.0, req.r_h) * crate::kernels::scaled_len(lr_dims.1, req.r_w);
    hr_px as u64 * resample_macs(kernel)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub out_dims: (usize, usize),
    pub macs: MacCount,
    pub storage_bytes: u64,
    /// Median over the timed runs; `None` when no run was requested.
    pub wall: Option<Duration>,
}

/// Cost of upscaling an `lr_dims` image with `bundle`, timing `runs` calls
/// on a synthetic input after one warm-up call.
pub fn cost_report(bundle: &LutBundle, lr_dims: (usize, usize), req: &SrRequest, runs: usize) -> Result<CostReport> {
    let macs = count_macs(bundle.kernel_set(), bundle.branches(), lr_dims, req)?;
    let out_dims = (
        crate::kernels::scaled_len(lr_dims.0, req.r_h),
        crate::kernels::scaled_len(lr_dims.1, req.r_w),
    );
    let storage_bytes = bundle.serialized_len()? as u64;
    let wall = if runs == 0 {
        None
    } else {
        let lr = crate::synth::scene(lr_dims.0, lr_dims.1, 0);
        imlut_sr(bundle, &lr, req)?;
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            imlut_sr(bundle, &lr, req)?;
            times.push(start.elapsed());
        }
        times.sort();
        Some(times[runs / 2])
    };
    Ok(CostReport { out_dims, macs, storage_bytes, wall })
}

/// `scale,out_h,out_w,macs,storage_bytes,wall_ms` rows.
pub fn cost_csv(rows: &[(SrRequest, CostReport)]) -> String {
    let mut out = String::from("scale,out_h,out_w,macs,storage_bytes,wall_ms\n");
    for (req, c) in rows {
        let wall = c.wall.map(|d| format!("{:.4}", d.as_secs_f64() * 1e3)).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            scale_label(req),
            c.out_dims.0,
            c.out_dims.1,
            c.macs.total(),
            c.storage_bytes,
            wall
        );
    }
    out
}

/// LR dims that upscale to `out` at `req`, when such dims exist.
pub fn lr_dims_for_output(out: (usize, usize), req: &SrRequest) -> Option<(usize, usize)> {
    let find = |n: usize, r: f64| {
        let guess = (n as f64 / r).round() as usize;
        (guess.saturating_sub(2)..=guess + 2).find(|&m| m > 0 && crate::kernels::scaled_len(m, r) == n)
    };
    Some((find(out.0, req.r_h)?, find(out.1, req.r_w)?))
}

/// LR weight maps of a mixing model.
pub fn weight_maps(model: &Model, lr: &Plane) -> Result<crate::imnet::WeightMaps> {
    match model {
        Model::Lut(b) => b.predict_weights(lr, true),
        Model::Net(p) => forward_weight_predictor(p, lr, true),
        Model::Baseline(_) => Err(Error::contract("single-kernel baselines have no weight maps")),
    }
}

/// Display color of a kernel in weight-map visualizations.
pub fn kernel_color(kernel: Kernel) -> [f64; 3] {
    match kernel {
        Kernel::Nearest => [1.0, 0.0, 0.0],
        Kernel::Bilinear => [0.0, 1.0, 0.0],
        Kernel::Bicubic => [0.0, 0.0, 1.0],
        Kernel::Lanczos2 => [1.0, 1.0, 0.0],
        Kernel::Lanczos3 => [1.0, 0.0, 1.0],
    }
}

/// Legend suffix for file names, e.g. `N-red_L-green_C-blue`.
pub fn color_legend(ks: &KernelSet) -> String {
    let name = |k: Kernel| match k {
        Kernel::Nearest => "red",
        Kernel::Bilinear => "green",
        Kernel::Bicubic => "blue",
        Kernel::Lanczos2 => "yellow",
        Kernel::Lanczos3 => "magenta",
    };
    ks.iter().map(|k| format!("{}-{}", k.code(), name(k))).collect::<Vec<_>>().join("_")
}

pub const MAX_BLEND_KERNELS: usize = 4;

/// RGB planes with each pixel the weight-blended color of its kernels.
pub fn blend_weight_maps(w: &crate::imnet::WeightMaps, ks: &KernelSet) -> Result<[Plane; 3]> {
    if ks.len() > MAX_BLEND_KERNELS {
        return Err(Error::contract(format!(
            "cannot blend {} kernels into one color image; dump per-kernel grayscale maps instead",
            ks.len()
        )));
    }
    if w.k() != ks.len() {
        return Err(Error::contract("weight maps do not match the kernel set"));
    }
    let (h, wd) = w.dims();
    let mut out = [Plane::zeros(h, wd), Plane::zeros(h, wd), Plane::zeros(h, wd)];
    for (plane, kernel) in w.planes.iter().zip(ks.iter()) {
        let color = kernel_color(kernel);
        for (c, o) in out.iter_mut().enumerate() {
            for (dst, &v) in o.data_mut().iter_mut().zip(plane.data()) {
                *dst += v * color[c];
            }
        }
    }
    Ok(out)
}

/// HR images of an evaluation set, named by file name.
pub fn load_eval_set(root: impl AsRef<std::path::Path>) -> Result<Vec<(String, Image)>> {
    let paths = crate::imgio::list_images(crate::imgio::hr_dir(root))?;
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((name, crate::imgio::load_image(&path)?));
    }
    Ok(out)
}
