//! Rasters, PNG/PGM I/O, PSNR and LR/HR pair generation.
//!
//! All pixel values live on the `[0, 1]` scale; 8-bit codes map to
//! `code / 255` on load and back with round-half-up on save.

use std::fs;
use std::ops::Deref;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::kernels::{resample, Kernel};

/// Row-major single-channel plane of finite reals.
///
/// Used for intermediate results (kernel upsamplings that overshoot, weight
/// maps, gradients). [`Image`] is the `[0, 1]`-bounded counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::contract(format!(
                "plane data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Plane { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Plane::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Plane { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Plane { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel at a signed position with edge replication.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Mirror left-right.
    pub fn flip_h(&self) -> Plane {
        Plane::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// Mirror top-bottom.
    pub fn flip_v(&self) -> Plane {
        Plane::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x))
    }

    /// Rotate 90 degrees counter-clockwise; output is `width x height`.
    pub fn rot90(&self) -> Plane {
        Plane::from_fn(self.width, self.height, |y, x| self.get(x, self.width - 1 - y))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Plane> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::contract(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Plane::from_fn(height, width, |y, x| self.get(top + y, left + x)))
    }

    pub fn clamp01(&self) -> Image {
        Image(self.map(|v| v.clamp(0.0, 1.0)))
    }

    /// 8-bit codes with round-half-up after clamping to `[0, 1]`.
    pub fn to_codes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_code(v)).collect()
    }

    pub fn max_abs_diff(&self, other: &Plane) -> f64 {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff on mismatched planes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Quantize one value to an 8-bit code (round half up, clamped).
#[inline]
pub fn to_code(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// A plane whose values all lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Plane);

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Image::try_from_plane(Plane::new(height, width, data)?)
    }

    pub fn try_from_plane(plane: Plane) -> Result<Self> {
        if let Some(v) = plane.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("image value {v} outside [0, 1]")));
        }
        Ok(Image(plane))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Image::try_from_plane(Plane::filled(height, width, value))
    }

    pub fn from_codes(height: usize, width: usize, codes: &[u8]) -> Result<Self> {
        Image::new(height, width, codes.iter().map(|&c| c as f64 / 255.0).collect())
    }

    pub fn as_plane(&self) -> &Plane {
        &self.0
    }

    pub fn into_plane(self) -> Plane {
        self.0
    }
}

impl Deref for Image {
    type Target = Plane;

    fn deref(&self) -> &Plane {
        &self.0
    }
}

impl From<Image> for Plane {
    fn from(img: Image) -> Plane {
        img.0
    }
}

/// BT.601 full-range luma of an RGB triple on `[0, 1]`.
#[inline]
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(format!("{}: {other}", path.display())),
    })
}

fn unsupported(path: &Path, img: &DynamicImage) -> Error {
    Error::format(format!(
        "{}: unsupported pixel layout {:?} (need 8-bit gray or RGB)",
        path.display(),
        img.color()
    ))
}

/// Load an 8-bit gray or RGB PNG, or a binary 8-bit PGM, as luma.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match &img {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&c| c as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageRgb8(rgb) => rgb
            .pixels()
            .map(|p| rgb_luma(p.0[0], p.0[1], p.0[2]))
            .collect(),
        DynamicImage::ImageRgba8(rgba) => rgba
            .pixels()
            .map(|p| rgb_luma(p.0[0], p.0[1], p.0[2]))
            .collect(),
        other => return Err(unsupported(path, other)),
    };
    Image::new(h, w, data)
}

fn rgb_luma(r: u8, g: u8, b: u8) -> f64 {
    luma(r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0).clamp(0.0, 1.0)
}

/// Write a plane as an 8-bit gray PNG (round half up, clamped).
pub fn save_image(img: &Plane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let gray = GrayImage::from_raw(img.width() as u32, img.height() as u32, img.to_codes())
        .ok_or_else(|| Error::contract("image buffer size mismatch"))?;
    gray.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(other.to_string()),
    })
}

/// Full-range BT.601 YCbCr planes of a color (or gray) image.
#[derive(Clone, Debug)]
pub struct YCbCr {
    pub y: Image,
    /// `None` for gray inputs.
    pub chroma: Option<(Image, Image)>,
}

pub fn load_ycbcr(path: impl AsRef<Path>) -> Result<YCbCr> {
    let path = path.as_ref();
    let img = decode(path)?;
    let rgb = match &img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            return Ok(YCbCr { y: load_image(path)?, chroma: None });
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => img.to_rgb8(),
        other => return Err(unsupported(path, other)),
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut y = Vec::with_capacity(w * h);
    let mut cb = Vec::with_capacity(w * h);
    let mut cr = Vec::with_capacity(w * h);
    for p in rgb.pixels() {
        let [r, g, b] = p.0.map(|c| c as f64 / 255.0);
        y.push(luma(r, g, b).clamp(0.0, 1.0));
        cb.push((0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b).clamp(0.0, 1.0));
        cr.push((0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b).clamp(0.0, 1.0));
    }
    Ok(YCbCr {
        y: Image::new(h, w, y)?,
        chroma: Some((Image::new(h, w, cb)?, Image::new(h, w, cr)?)),
    })
}

/// Recombine luma with chroma planes into an RGB PNG.
pub fn save_ycbcr(y: &Plane, cb: &Plane, cr: &Plane, path: impl AsRef<Path>) -> Result<()> {
    if y.dims() != cb.dims() || y.dims() != cr.dims() {
        return Err(Error::contract("luma/chroma dimension mismatch"));
    }
    let (h, w) = y.dims();
    let mut r = Plane::zeros(h, w);
    let mut g = Plane::zeros(h, w);
    let mut b = Plane::zeros(h, w);
    for i in 0..y.len() {
        let (yy, u, v) = (y.data()[i], cb.data()[i] - 0.5, cr.data()[i] - 0.5);
        r.data_mut()[i] = yy + 1.402 * v;
        g.data_mut()[i] = yy - 0.344136 * u - 0.714136 * v;
        b.data_mut()[i] = yy + 1.772 * u;
    }
    save_rgb(&r, &g, &b, path)
}

/// Write three planes as an 8-bit RGB PNG.
pub fn save_rgb(r: &Plane, g: &Plane, b: &Plane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if r.dims() != g.dims() || r.dims() != b.dims() {
        return Err(Error::contract("color plane dimension mismatch"));
    }
    let mut buf = Vec::with_capacity(r.len() * 3);
    for i in 0..r.len() {
        buf.extend([r.data()[i], g.data()[i], b.data()[i]].map(to_code));
    }
    let rgb = RgbImage::from_raw(r.width() as u32, r.height() as u32, buf)
        .ok_or_else(|| Error::contract("image buffer size mismatch"))?;
    rgb.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(other.to_string()),
    })
}

/// PSNR in dB between two planes after 8-bit quantization; 99 dB when equal.
pub fn psnr(a: &Plane, b: &Plane) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::contract(format!(
            "psnr on mismatched dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.is_empty() {
        return Err(Error::contract("psnr on empty images"));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (to_code(x) as f64 - to_code(y) as f64) / 255.0;
            d * d
        })
        .sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const PSNR_CAP: f64 = 99.0;

/// Numerator `p` of a scale written as `p / q` in lowest terms.
pub fn scale_numerator(r: f64) -> Result<u64> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::contract(format!("invalid scale {r}")));
    }
    for q in 1..=1000u64 {
        let p = (r * q as f64).round();
        if p >= 1.0 && (p / q as f64 - r).abs() < 1e-9 {
            let p = p as u64;
            return Ok(p / gcd(p, q));
        }
    }
    Err(Error::contract(format!("scale {r} has no rational form with denominator <= 1000")))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Center-crop `hr` to dims divisible by each scale's numerator, then
/// produce the LR counterpart by antialiased bicubic downscaling.
pub fn make_pair(hr: &Image, r_h: f64, r_w: f64) -> Result<(Image, Image)> {
    if !(r_h >= 1.0 && r_w >= 1.0) {
        return Err(Error::contract(format!("make_pair needs scales >= 1, got {r_h}x{r_w}")));
    }
    let (ph, pw) = (scale_numerator(r_h)? as usize, scale_numerator(r_w)? as usize);
    let ch = hr.height() / ph * ph;
    let cw = hr.width() / pw * pw;
    if ch == 0 || cw == 0 {
        return Err(Error::contract(format!(
            "{}x{} image too small for scale {r_h}x{r_w}",
            hr.height(),
            hr.width()
        )));
    }
    let crop = hr.crop((hr.height() - ch) / 2, (hr.width() - cw) / 2, ch, cw)?;
    let lr = resample(&crop, 1.0 / r_h, 1.0 / r_w, Kernel::Bicubic, true)?;
    Ok((lr.clamp01(), Image(crop)))
}

/// Per-image and mean PSNR of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<(String, f64)>,
    pub mean: f64,
    pub count: usize,
}

impl EvalReport {
    pub fn from_values(per_image: Vec<(String, f64)>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::contract("evaluation over an empty image set"));
        }
        let count = per_image.len();
        let mean = per_image.iter().map(|(_, v)| v).sum::<f64>() / count as f64;
        Ok(EvalReport { per_image, mean, count })
    }
}

/// Sorted PNG/PGM files directly inside `dir`.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "pgm")) && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// `<root>/HR` when present, otherwise `root` itself.
pub fn hr_dir(root: impl AsRef<Path>) -> PathBuf {
    let root = root.as_ref();
    let hr = root.join("HR");
    if hr.is_dir() {
        hr
    } else {
        root.to_path_buf()
    }
}

/// Directory name used for generated LR mirrors, e.g. `LR_x2` or `LR_x2.0x2.4`.
pub fn lr_dir_name(r_h: f64, r_w: f64) -> String {
    if r_h == r_w {
        format!("LR_x{r_h}")
    } else {
        format!("LR_x{r_h}x{r_w}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png_gray(path: &Path, w: u32, h: u32, codes: Vec<u8>) {
        GrayImage::from_raw(w, h, codes).unwrap().save(path).unwrap();
    }

    #[test]
    fn gray_png_maps_codes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        write_png_gray(&p, 2, 2, vec![0, 128, 255, 64]);
        let img = load_image(&p).unwrap();
        assert_eq!(img.data(), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn rgb_png_converts_to_luma() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        RgbImage::from_raw(2, 1, vec![255, 0, 0, 255, 255, 255]).unwrap().save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert!((img.get(0, 0) - 0.299).abs() < 1e-12);
        assert!((img.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pgm_binary_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let mut bytes = b"P5\n3 1\n255\n".to_vec();
        bytes.extend([0u8, 51, 255]);
        fs::write(&p, bytes).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.dims(), (1, 3));
        assert_eq!(img.data(), &[0.0, 0.2, 1.0]);
    }

    #[test]
    fn sixteen_bit_pgm_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.pgm");
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend([0u8, 1, 255, 255]);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_image("/nonexistent/x.png"), Err(Error::Io { .. })));
    }

    #[test]
    fn save_quantizes_half_up() {
        assert_eq!(to_code(1.0), 255);
        assert_eq!(to_code(0.5), 128);
        assert_eq!(to_code(-0.2), 0);
        assert_eq!(to_code(1.3), 255);
    }

    #[test]
    fn save_to_missing_dir_is_io_error() {
        let img = Plane::filled(2, 2, 0.5);
        assert!(matches!(
            save_image(&img, "/nonexistent/dir/out.png"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn psnr_cap_and_closed_form() {
        let a = Plane::filled(4, 4, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = Plane::filled(4, 4, 0.0);
        let c = Plane::filled(4, 4, 1.0 / 255.0);
        let expect = 20.0 * 255f64.log10();
        assert!((psnr(&b, &c).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 48.13).abs() < 0.01);
    }

    #[test]
    fn psnr_is_monotone_in_error() {
        let base = Plane::filled(8, 8, 0.2);
        let mut prev = f64::INFINITY;
        for e in [1.0, 2.0, 4.0, 8.0] {
            let other = base.map(|v| v + e / 255.0);
            let p = psnr(&base, &other).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn psnr_dimension_mismatch() {
        let a = Plane::zeros(2, 2);
        let b = Plane::zeros(2, 3);
        assert!(matches!(psnr(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn make_pair_dims() {
        let hr = Image::filled(100, 100, 0.3).unwrap();
        let (lr, crop) = make_pair(&hr, 2.0, 2.0).unwrap();
        assert_eq!(lr.dims(), (50, 50));
        assert_eq!(crop.dims(), (100, 100));

        let hr = Image::filled(101, 101, 0.3).unwrap();
        let (lr, crop) = make_pair(&hr, 2.0, 2.0).unwrap();
        assert_eq!(crop.dims(), (100, 100));
        assert_eq!(lr.dims(), (50, 50));

        let hr = Image::filled(61, 50, 0.3).unwrap();
        let (lr, crop) = make_pair(&hr, 2.0, 2.4).unwrap();
        assert_eq!(crop.dims(), (60, 48));
        assert_eq!(lr.dims(), (30, 20));
    }

    #[test]
    fn make_pair_constant_stays_constant() {
        for r in [1.5, 2.0, 2.4, 3.0, 4.5] {
            let hr = Image::filled(73, 65, 0.37).unwrap();
            let (lr, _) = make_pair(&hr, r, r).unwrap();
            for &v in lr.data() {
                assert!((v - 0.37).abs() < 1e-12, "r={r} v={v}");
            }
        }
    }

    #[test]
    fn make_pair_rejects_empty_crop() {
        let hr = Image::filled(2, 2, 0.3).unwrap();
        assert!(matches!(make_pair(&hr, 3.0, 3.0), Err(Error::Contract(_))));
        assert!(matches!(make_pair(&hr, 0.5, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn scale_numerators() {
        assert_eq!(scale_numerator(2.0).unwrap(), 2);
        assert_eq!(scale_numerator(1.5).unwrap(), 3);
        assert_eq!(scale_numerator(2.4).unwrap(), 12);
        assert_eq!(scale_numerator(4.5).unwrap(), 9);
    }

    #[test]
    fn eval_report_mean() {
        let r = EvalReport::from_values(vec![("a".into(), 30.0), ("b".into(), 31.0)]).unwrap();
        assert_eq!(r.count, 2);
        assert!((r.mean - 30.5).abs() < 1e-9);
        assert!(EvalReport::from_values(vec![]).is_err());
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let p = Plane::from_fn(3, 5, |y, x| (y * 5 + x) as f64);
        let r = p.rot90();
        assert_eq!(r.dims(), (5, 3));
        assert_eq!(r.rot90().rot90().rot90(), p);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn save_load_roundtrip(codes in proptest::collection::vec(any::<u8>(), 12)) {
                let dir = tempfile::tempdir().unwrap();
                let p = dir.path().join("rt.png");
                let img = Image::from_codes(3, 4, &codes).unwrap();
                save_image(&img, &p).unwrap();
                let back = load_image(&p).unwrap();
                prop_assert_eq!(back, img);
            }

            #[test]
            fn psnr_symmetric(a in proptest::collection::vec(0.0f64..1.0, 16),
                              b in proptest::collection::vec(0.0f64..1.0, 16)) {
                let a = Plane::new(4, 4, a).unwrap();
                let b = Plane::new(4, 4, b).unwrap();
                prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            }
        }
    }
}
