//! Mixed-scale training with Adam.
//!
//! Every iteration draws its batch from an RNG seeded by `(seed, iteration)`,
//! so a run resumed from a checkpoint and its optimizer state continues
//! exactly as an uninterrupted one would.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::imgio::{hr_dir, list_images, load_image, Image, Plane};
use crate::imnet::{checkpoint, ImNetParams, SampleForward, DEFAULT_BETA, DEFAULT_LAMBDA};
use crate::kernels::{resample, Kernel, KernelSet};

pub const TRAIN_SCALES: [f64; 7] = [1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub beta: f64,
    pub order: usize,
    pub patch: usize,
    pub scales: Vec<f64>,
    pub seed: u64,
    pub dataset: PathBuf,
    pub kernels: KernelSet,
    pub branches: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 100_000,
            batch: 16,
            lr: 1e-3,
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            order: crate::imnet::DEFAULT_ORDER,
            patch: 32,
            scales: TRAIN_SCALES.to_vec(),
            seed: 0,
            dataset: PathBuf::from("data/DIV2K"),
            kernels: KernelSet::parse("NLC").expect("default kernel set"),
            branches: crate::imnet::DEFAULT_BRANCHES,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::contract("batch must be at least 1"));
        }
        if self.patch < 8 {
            return Err(Error::contract(format!("patch must be at least 8, got {}", self.patch)));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&r| !(r >= 1.0 && r.is_finite())) {
            return Err(Error::contract("scales must be non-empty and all at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.lambda < 0.0 || self.beta <= 0.0 {
            return Err(Error::contract("lr and beta must be positive, lambda non-negative"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::contract("checkpoint_every must be at least 1"));
        }
        if !(1..=3).contains(&self.branches) {
            return Err(Error::contract("branches must be 1..=3"));
        }
        Ok(())
    }

    /// Parse `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::format(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value for {key}: {v}"))
        }
        match key {
            "iterations" => self.iterations = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "order" => self.order = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "branches" => self.branches = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "dataset" => self.dataset = PathBuf::from(value),
            "kernels" => self.kernels = KernelSet::parse(value).map_err(|e| e.to_string())?,
            "scales" => {
                self.scales = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let scales: Vec<String> = self.scales.iter().map(|s| s.to_string()).collect();
        let mut out = String::new();
        let _ = writeln!(out, "iterations = {}", self.iterations);
        let _ = writeln!(out, "batch = {}", self.batch);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "lambda = {}", self.lambda);
        let _ = writeln!(out, "beta = {}", self.beta);
        let _ = writeln!(out, "order = {}", self.order);
        let _ = writeln!(out, "patch = {}", self.patch);
        let _ = writeln!(out, "scales = {}", scales.join(","));
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "dataset = {}", self.dataset.display());
        let _ = writeln!(out, "kernels = {}", self.kernels.code());
        let _ = writeln!(out, "branches = {}", self.branches);
        let _ = writeln!(out, "checkpoint_every = {}", self.checkpoint_every);
        out
    }

    pub fn init_params(&self) -> Result<ImNetParams> {
        ImNetParams::init(self.kernels.clone(), self.branches, self.order, self.seed)
    }
}

/// Training images as single-precision luma planes.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    images: Vec<(usize, usize, Vec<f32>)>,
}

impl Dataset {
    pub fn from_images(images: impl IntoIterator<Item = Image>) -> Self {
        let images = images
            .into_iter()
            .map(|img| (img.height(), img.width(), img.data().iter().map(|&v| v as f32).collect()))
            .collect();
        Dataset { images }
    }

    /// Images under `<root>/HR`, or `root` itself when it has no `HR`, in
    /// file-name order; at most `limit` of them.
    pub fn load(root: impl AsRef<Path>, limit: Option<usize>) -> Result<Self> {
        let mut paths = list_images(hr_dir(root))?;
        paths.truncate(limit.unwrap_or(usize::MAX));
        let mut images = Vec::with_capacity(paths.len());
        for path in &paths {
            images.push(load_image(path)?);
        }
        Ok(Dataset::from_images(images))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn crop(&self, i: usize, top: usize, left: usize, size: usize) -> Plane {
        let (_, w, data) = &self.images[i];
        Plane::from_fn(size, size, |y, x| data[(top + y) * w + left + x] as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub lr: Plane,
    pub hr: Plane,
}

/// Patches sharing one scale factor.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub r: f64,
    pub samples: Vec<Sample>,
}

pub fn hr_patch_size(patch: usize, r: f64) -> usize {
    (r * patch as f64 + 0.5).floor() as usize
}

/// One scale per batch, then uniform crops; images too small for the crop are
/// redrawn.
pub fn sample_batch(ds: &Dataset, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    if ds.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    let r = cfg.scales[rng.random_range(0..cfg.scales.len())];
    let size = hr_patch_size(cfg.patch, r);
    let usable: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.images[i].0 >= size && ds.images[i].1 >= size)
        .collect();
    if usable.is_empty() {
        return Err(Error::contract(format!("no training image holds a {size}x{size} crop")));
    }
    let mut samples = Vec::with_capacity(cfg.batch);
    while samples.len() < cfg.batch {
        let i = rng.random_range(0..ds.len());
        let (h, w, _) = ds.images[i];
        if h < size || w < size {
            continue;
        }
        let top = rng.random_range(0..=h - size);
        let left = rng.random_range(0..=w - size);
        let hr = ds.crop(i, top, left, size);
        let lr = resample(&hr, 1.0 / r, 1.0 / r, Kernel::Bicubic, true)?.map(|v| v.clamp(0.0, 1.0));
        samples.push(Sample { lr, hr });
    }
    Ok(Batch { r, samples })
}

/// Per-iteration RNG: one ChaCha stream per iteration under the run seed.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ImNetParams,
    pub v: ImNetParams,
    pub step: u64,
}

const ADAM_MAGIC: &[u8; 6] = b"IMADAM";

/// Bias-corrected Adam step number `step` over matching tensor lists.
pub(crate) fn adam_update(
    params: Vec<&mut [f64]>,
    grads: &[&[f64]],
    m: Vec<&mut [f64]>,
    v: Vec<&mut [f64]>,
    step: u64,
    lr: f64,
    round_f32: bool,
) {
    let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for (((pt, gt), mt), vt) in params.into_iter().zip(grads).zip(m).zip(v) {
        for i in 0..pt.len() {
            let g = gt[i];
            mt[i] = ADAM_BETA1 * mt[i] + (1.0 - ADAM_BETA1) * g;
            vt[i] = ADAM_BETA2 * vt[i] + (1.0 - ADAM_BETA2) * g * g;
            let next = pt[i] - lr * (mt[i] / c1) / ((vt[i] / c2).sqrt() + ADAM_EPS);
            pt[i] = if round_f32 { next as f32 as f64 } else { next };
        }
    }
}

impl AdamState {
    pub fn new(p: &ImNetParams) -> Self {
        AdamState { m: p.zeros_like(), v: p.zeros_like(), step: 0 }
    }

    /// One Adam update; parameters are kept at `f32` precision afterwards.
    pub fn update(&mut self, p: &mut ImNetParams, grads: &ImNetParams, lr: f64) {
        self.step += 1;
        adam_update(
            p.tensors_mut(),
            &grads.tensors(),
            self.m.tensors_mut(),
            self.v.tensors_mut(),
            self.step,
            lr,
            true,
        );
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ADAM_MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        for t in self.m.tensors().into_iter().chain(self.v.tensors()) {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decode against the parameter layout of `p`.
    pub fn from_bytes(buf: &[u8], p: &ImNetParams) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(ADAM_MAGIC)?;
        let step = u64::from_le_bytes(r.take(8, "step")?.try_into().unwrap());
        let mut state = AdamState::new(p);
        state.step = step;
        let AdamState { m, v, .. } = &mut state;
        for t in m.tensors_mut().into_iter().chain(v.tensors_mut()) {
            let raw = r.take(t.len() * 8, "moments")?;
            for (dst, c) in t.iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(c.try_into().unwrap());
            }
        }
        r.finish()?;
        Ok(state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub rec: f64,
    pub guide: f64,
}

/// Forward, backward and one Adam update over a batch; losses are batch means.
pub fn train_step(
    p: &mut ImNetParams,
    adam: &mut AdamState,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let mut grads = p.zeros_like();
    let weight = 1.0 / batch.samples.len() as f64;
    let mut stats = StepStats { rec: 0.0, guide: 0.0 };
    for sample in &batch.samples {
        let fwd = SampleForward::run(p, &sample.lr, batch.r, batch.r)?;
        let loss = fwd.loss_and_backward(p, &sample.hr, cfg.lambda, cfg.beta, weight, &mut grads)?;
        stats.rec += loss.rec * weight;
        stats.guide += loss.guide * weight;
    }
    if !(stats.rec.is_finite() && stats.guide.is_finite()) {
        return Err(Error::NonFinite { iteration: adam.step as usize, rec: stats.rec, guide: stats.guide });
    }
    adam.update(p, &grads, cfg.lr);
    Ok(stats)
}

/// Parameters plus optimizer state; `adam.step` is the iteration count.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ImNetParams,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let params = cfg.init_params()?;
        let adam = AdamState::new(&params);
        Ok(TrainState { params, adam })
    }

    pub fn iteration(&self) -> usize {
        self.adam.step as usize
    }

    /// Writes `<dir>/model.imnet` and `<dir>/model.adam`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        checkpoint::save(&self.params, dir.join("model.imnet"))?;
        let path = dir.join("model.adam");
        fs::write(&path, self.adam.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let params = checkpoint::load(dir.join("model.imnet"))?;
        let path = dir.join("model.adam");
        let buf = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let adam = AdamState::from_bytes(&buf, &params)?;
        Ok(TrainState { params, adam })
    }
}

/// Advance `state` to `cfg.iterations`. With `out`, checkpoints every
/// `cfg.checkpoint_every` iterations and at the end, and appends
/// `iter,rec,guide` rows to `<out>/loss.csv`.
pub fn train_from(
    state: &mut TrainState,
    ds: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<StepStats>> {
    cfg.validate()?;
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss.csv");
            let fresh = state.iteration() == 0 || !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "iter,rec,guide").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut history = Vec::new();
    while state.iteration() < cfg.iterations {
        let it = state.iteration();
        let batch = sample_batch(ds, cfg, &mut iteration_rng(cfg.seed, it))?;
        let stats = train_step(&mut state.params, &mut state.adam, &batch, cfg)?;
        history.push(stats);
        let done = state.iteration();
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{done},{:.4e},{:.4e}", stats.rec, stats.guide).map_err(|e| Error::io(&*path, e))?;
        }
        if done.is_multiple_of(100) {
            info!("iter {done}: rec {:.4e} guide {:.4e} (x{})", stats.rec, stats.guide, batch.r);
        }
        if let Some(dir) = out {
            if done.is_multiple_of(cfg.checkpoint_every) {
                state.save(dir)?;
            }
        }
    }
    if let Some(dir) = out {
        state.save(dir)?;
    }
    Ok(history)
}

/// Fresh run from `cfg`, returning the final parameters.
pub fn train(cfg: &TrainConfig, ds: &Dataset, out: Option<&Path>) -> Result<ImNetParams> {
    let mut state = TrainState::new(cfg)?;
    train_from(&mut state, ds, cfg, out)?;
    Ok(state.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            batch: 2,
            patch: 8,
            order: 4,
            scales: vec![2.0, 3.0],
            kernels: KernelSet::parse("NLC").unwrap(),
            ..TrainConfig::default()
        }
    }

    fn dataset() -> Dataset {
        Dataset::from_images((0..3).map(|i| synth::scene(48, 40, i)))
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = TrainConfig { seed: 7, scales: vec![2.0, 2.5], ..small_cfg() };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let d = TrainConfig::parse("# defaults only\n").unwrap();
        assert_eq!(d, TrainConfig::default());
        assert!(TrainConfig::parse("batch = 0").is_err());
        assert!(TrainConfig::parse("patch = 4").is_err());
        assert!(TrainConfig::parse("scales = 0.5, 2").is_err());
        assert!(matches!(TrainConfig::parse("colour = 3"), Err(Error::Format { .. })));
    }

    #[test]
    fn batch_dims() {
        let ds = Dataset::from_images([synth::scene(80, 80, 0)]);
        let cfg = TrainConfig { patch: 32, batch: 2, scales: vec![2.0], ..TrainConfig::default() };
        let b = sample_batch(&ds, &cfg, &mut iteration_rng(0, 0)).unwrap();
        assert_eq!(b.samples[0].hr.dims(), (64, 64));
        assert_eq!(b.samples[0].lr.dims(), (32, 32));
        assert_eq!(hr_patch_size(32, 1.5), 48);
        let cfg = TrainConfig { scales: vec![1.5], ..cfg };
        let b = sample_batch(&ds, &cfg, &mut iteration_rng(0, 0)).unwrap();
        assert_eq!(b.samples[1].hr.dims(), (48, 48));
        assert_eq!(b.samples[1].lr.dims(), (32, 32));
    }

    #[test]
    fn small_images_are_skipped_or_rejected() {
        let ds = Dataset::from_images([synth::scene(20, 20, 0), synth::scene(70, 70, 1)]);
        let cfg = TrainConfig { patch: 32, batch: 4, scales: vec![2.0], ..TrainConfig::default() };
        let b = sample_batch(&ds, &cfg, &mut iteration_rng(1, 0)).unwrap();
        assert_eq!(b.samples.len(), 4);
        let tiny = Dataset::from_images([synth::scene(20, 20, 0)]);
        assert!(matches!(sample_batch(&tiny, &cfg, &mut iteration_rng(1, 0)), Err(Error::Contract(_))));
        assert!(sample_batch(&Dataset::default(), &cfg, &mut iteration_rng(1, 0)).is_err());
    }

    #[test]
    fn batches_are_seeded() {
        let ds = dataset();
        let cfg = small_cfg();
        let a = sample_batch(&ds, &cfg, &mut iteration_rng(3, 5)).unwrap();
        let b = sample_batch(&ds, &cfg, &mut iteration_rng(3, 5)).unwrap();
        let c = sample_batch(&ds, &cfg, &mut iteration_rng(3, 6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_iterations_returns_init() {
        let cfg = TrainConfig { iterations: 0, ..small_cfg() };
        let p = train(&cfg, &dataset(), None).unwrap();
        assert_eq!(p, cfg.init_params().unwrap());
    }

    #[test]
    fn perfect_prediction_without_guidance_is_a_fixed_point() {
        let cfg = TrainConfig { lambda: 0.0, ..small_cfg() };
        let mut state = TrainState::new(&cfg).unwrap();
        let before = state.params.clone();
        let mut batch = sample_batch(&dataset(), &cfg, &mut iteration_rng(0, 0)).unwrap();
        for s in &mut batch.samples {
            s.hr = SampleForward::run(&before, &s.lr, batch.r, batch.r).unwrap().output;
        }
        let stats = train_step(&mut state.params, &mut state.adam, &batch, &cfg).unwrap();
        assert_eq!(stats.rec, 0.0);
        assert_eq!(state.params, before);
    }

    #[test]
    fn overfits_a_repeated_batch() {
        let ds = dataset();
        let cfg = TrainConfig { lr: 1e-3, ..small_cfg() };
        let mut state = TrainState::new(&cfg).unwrap();
        let batch = sample_batch(&ds, &cfg, &mut iteration_rng(0, 0)).unwrap();
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let s = train_step(&mut state.params, &mut state.adam, &batch, &cfg).unwrap();
            let total = s.rec + cfg.lambda * s.guide;
            first.get_or_insert(total);
            last = total;
        }
        assert!(last < first.unwrap(), "{last} vs {first:?}");
    }

    #[test]
    fn non_finite_loss_aborts() {
        let ds = dataset();
        let cfg = small_cfg();
        let mut state = TrainState::new(&cfg).unwrap();
        state.params.refiner_mut()[0].layers_mut()[2].b[0] = f64::NAN;
        let batch = sample_batch(&ds, &cfg, &mut iteration_rng(0, 0)).unwrap();
        let err = train_step(&mut state.params, &mut state.adam, &batch, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { iteration: 0, .. }));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = dataset();
        let cfg = TrainConfig { iterations: 4, checkpoint_every: 2, ..small_cfg() };
        let dir = tempfile::tempdir().unwrap();
        let full = train(&cfg, &ds, Some(dir.path())).unwrap();

        let half = TrainConfig { iterations: 2, ..cfg.clone() };
        let dir2 = tempfile::tempdir().unwrap();
        train(&half, &ds, Some(dir2.path())).unwrap();
        let mut state = TrainState::load(dir2.path()).unwrap();
        assert_eq!(state.iteration(), 2);
        train_from(&mut state, &ds, &cfg, Some(dir2.path())).unwrap();
        assert_eq!(state.params, full);

        let a = fs::read(dir.path().join("model.imnet")).unwrap();
        let b = fs::read(dir2.path().join("model.imnet")).unwrap();
        assert_eq!(a, b);
        let log = fs::read_to_string(dir2.path().join("loss.csv")).unwrap();
        assert_eq!(log, fs::read_to_string(dir.path().join("loss.csv")).unwrap());
        assert_eq!(log.lines().count(), 5);
    }

    #[test]
    fn adam_state_round_trip() {
        let cfg = small_cfg();
        let mut state = TrainState::new(&cfg).unwrap();
        state.adam.step = 9;
        state.adam.m.tensors_mut()[0][0] = 0.125;
        state.adam.v.tensors_mut()[3][1] = 1e-9;
        let bytes = state.adam.to_bytes();
        assert_eq!(AdamState::from_bytes(&bytes, &state.params).unwrap(), state.adam);
        assert!(AdamState::from_bytes(&bytes[..bytes.len() - 1], &state.params).is_err());
    }
}
