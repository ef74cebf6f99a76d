//! Grayscale endomicroscopy preprocessing and a deterministic patch
//! featurizer, so that a folder of PNG frames can become an embedding
//! dataset without an external model.
//!
//! Pixel `(x, y)` covers the unit square `[x, x+1) × [y, y+1)`; geometric
//! quantities (circle centers, rotation centers) use these continuous
//! coordinates.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, EmbeddingRecord};
use crate::error::{FslError, Result};
use crate::par::{self, Execution};
use crate::rng;

/// Side length fed to the featurizer.
pub const TARGET_SIZE: usize = 224;
pub const STD_FLOOR: f64 = 1e-6;
const UNSHARP_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    /// Row-major intensities in `[0, 1]`.
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(FslError::Image(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(FslError::Image(format!("{} pixels for a {width}x{height} image", pixels.len())));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FslError::Image(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.height, self.width), self.pixels.clone()).expect("shape checked")
    }

    fn from_matrix_clamped(m: Array2<f64>) -> Self {
        let (height, width) = m.dim();
        let pixels = m.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self { width, height, pixels }
    }
}

/// The circular field of view of the fiber bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FovCircle {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
}

impl FovCircle {
    /// Centered circle touching the shorter image side.
    pub fn auto(width: usize, height: usize) -> Self {
        Self { center_x: width as f64 / 2.0, center_y: height as f64 / 2.0, radius: width.min(height) as f64 / 2.0 }
    }

    fn check(&self, width: usize, height: usize) -> Result<()> {
        let inside = self.center_x - self.radius >= 0.0
            && self.center_y - self.radius >= 0.0
            && self.center_x + self.radius <= width as f64
            && self.center_y + self.radius <= height as f64;
        if !(self.radius.is_finite() && self.center_x.is_finite() && self.center_y.is_finite()) || !inside {
            return Err(FslError::CircleOutOfBounds);
        }
        if self.radius * std::f64::consts::SQRT_2 < 1.0 {
            return Err(FslError::InvalidSpec { field: "radius", reason: "inscribed square is empty".into() });
        }
        Ok(())
    }
}

/// `auto` or an explicit `cx,cy,r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CircleSpec {
    Auto,
    Fixed(FovCircle),
}

impl CircleSpec {
    pub fn resolve(&self, width: usize, height: usize) -> FovCircle {
        match *self {
            CircleSpec::Auto => FovCircle::auto(width, height),
            CircleSpec::Fixed(c) => c,
        }
    }
}

impl FromStr for CircleSpec {
    type Err = FslError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(CircleSpec::Auto);
        }
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| FslError::InvalidConfig(format!("circle `{s}` is not `auto` or `cx,cy,r`")))?;
        match parts[..] {
            [center_x, center_y, radius] => Ok(CircleSpec::Fixed(FovCircle { center_x, center_y, radius })),
            _ => Err(FslError::InvalidConfig(format!("circle `{s}` is not `auto` or `cx,cy,r`"))),
        }
    }
}

impl fmt::Display for CircleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CircleSpec::Auto => f.write_str("auto"),
            CircleSpec::Fixed(c) => write!(f, "{},{},{}", c.center_x, c.center_y, c.radius),
        }
    }
}

/// The square inscribed in `circle`: side `floor(r·√2)`, centered on the
/// circle and snapped to whole pixels.
pub fn crop_fov(image: &GrayImage, circle: &FovCircle) -> Result<GrayImage> {
    circle.check(image.width, image.height)?;
    let side = (circle.radius * std::f64::consts::SQRT_2).floor() as usize;
    let origin = |center: f64, extent: usize| {
        let start = (center - side as f64 / 2.0).round().max(0.0) as usize;
        start.min(extent - side)
    };
    let x0 = origin(circle.center_x, image.width);
    let y0 = origin(circle.center_y, image.height);
    GrayImage::from_fn(side, side, |x, y| image.get(x0 + x, y0 + y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub enable_rotation: bool,
    pub enable_flip: bool,
    /// Gaussian blur sigma in pixels; 0 means no blur.
    pub blur_sigma_range: [f64; 2],
    /// Unsharp-mask amount; 0 means unchanged.
    pub sharpness_range: [f64; 2],
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self { enable_rotation: false, enable_flip: false, blur_sigma_range: [0.0; 2], sharpness_range: [0.0; 2] }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, [lo, hi]) in
            [("blur_sigma_range", self.blur_sigma_range), ("sharpness_range", self.sharpness_range)]
        {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return Err(FslError::InvalidSpec {
                    field,
                    reason: format!("[{lo}, {hi}] is not an ordered non-negative range"),
                });
            }
        }
        Ok(())
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { enable_rotation: true, enable_flip: true, blur_sigma_range: [0.0, 1.0], sharpness_range: [0.0, 1.0] }
    }
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Random rotation, flips, blur and sharpening, in that order. All random
/// draws happen whether or not a step is enabled, so toggling one step
/// leaves the draws of the others unchanged.
pub fn augment(image: &GrayImage, policy: &AugmentPolicy, seed: u64) -> Result<GrayImage> {
    policy.validate()?;
    let mut rng = rng::seeded(seed);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let flip_h = rng.random_bool(0.5);
    let flip_v = rng.random_bool(0.5);
    let sigma = uniform(&mut rng, policy.blur_sigma_range);
    let amount = uniform(&mut rng, policy.sharpness_range);

    let mut m = image.to_matrix();
    if policy.enable_rotation {
        m = rotate(&m, angle);
    }
    if policy.enable_flip {
        if flip_h {
            m.invert_axis(ndarray::Axis(1));
        }
        if flip_v {
            m.invert_axis(ndarray::Axis(0));
        }
    }
    if sigma > 0.0 {
        m = gaussian_blur(&m, sigma);
    }
    if amount > 0.0 {
        let smooth = gaussian_blur(&m, UNSHARP_SIGMA);
        m = &m + &((&m - &smooth) * amount);
    }
    Ok(GrayImage::from_matrix_clamped(m))
}

/// Mirror `t` into `[0, n-1]` without repeating the edge sample.
fn reflect(t: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let last = (n - 1) as f64;
    let t = t.abs() % (2.0 * last);
    if t > last {
        2.0 * last - t
    } else {
        t
    }
}

fn bilinear(m: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = m.dim();
    let (y, x) = (reflect(y, h), reflect(x, w));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = m[[y0, x0]] * (1.0 - fx) + m[[y0, x1]] * fx;
    let bottom = m[[y1, x0]] * (1.0 - fx) + m[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotation by `angle` radians about the image center, bilinear with
/// reflect padding.
pub fn rotate(m: &Array2<f64>, angle: f64) -> Array2<f64> {
    let (h, w) = m.dim();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (sin, cos) = angle.sin_cos();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
        let sx = cos * dx + sin * dy + cx - 0.5;
        let sy = -sin * dx + cos * dy + cy - 0.5;
        bilinear(m, sy, sx)
    })
}

/// Normalized Gaussian taps over `[-ceil(3σ), ceil(3σ)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn reflect_index(i: i64, n: usize) -> usize {
    reflect(i as f64, n) as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(m: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = m.dim();
    let rows = Array2::from_shape_fn((h, w), |(i, j)| {
        kernel.iter().enumerate().map(|(k, t)| t * m[[i, reflect_index(j as i64 + k as i64 - radius, w)]]).sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, t)| t * rows[[reflect_index(i as i64 + k as i64 - radius, h), j]])
            .sum::<f64>()
    })
}

/// Half-pixel bilinear resize to 224×224, then per-image standardization.
pub fn normalize_resize(image: &GrayImage) -> Array2<f64> {
    let m = image.to_matrix();
    let (h, w) = m.dim();
    let source =
        |i: usize, n: usize| ((i as f64 + 0.5) * n as f64 / TARGET_SIZE as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let resized = Array2::from_shape_fn((TARGET_SIZE, TARGET_SIZE), |(i, j)| bilinear(&m, source(i, h), source(j, w)));
    standardize(resized)
}

fn standardize(m: Array2<f64>) -> Array2<f64> {
    let n = m.len() as f64;
    let shift = m[[0, 0]];
    let mean = shift + m.iter().map(|v| v - shift).sum::<f64>() / n;
    let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    m.mapv(|v| (v - mean) / std)
}

/// Central-difference gradient magnitude, one-sided at the borders.
pub fn gradient_magnitude(m: &Array2<f64>) -> Array2<f64> {
    let (h, w) = m.dim();
    let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f64 };
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (i0, i1) = (i.saturating_sub(1), (i + 1).min(h - 1));
        let (j0, j1) = (j.saturating_sub(1), (j + 1).min(w - 1));
        let gy = diff(m[[i0, j]], m[[i1, j]], i1 - i0);
        let gx = diff(m[[i, j0]], m[[i, j1]], j1 - j0);
        gy.hypot(gx)
    })
}

/// Per cell of a `g × g` grid, row-major: mean, population std and mean
/// gradient magnitude. Cell `k` spans rows `floor(k·H/g) .. floor((k+1)·H/g)`.
pub fn patch_featurize(image: &Array2<f64>, grid: usize) -> Result<Vec<f64>> {
    let (h, w) = image.dim();
    if !(1..=TARGET_SIZE).contains(&grid) || grid > h || grid > w {
        return Err(FslError::BadGrid(grid));
    }
    let grad = gradient_magnitude(image);
    let bounds = |k: usize, n: usize| (k * n / grid, (k + 1) * n / grid);
    let mut features = Vec::with_capacity(3 * grid * grid);
    for r in 0..grid {
        let (y0, y1) = bounds(r, h);
        for c in 0..grid {
            let (x0, x1) = bounds(c, w);
            let cell = image.slice(ndarray::s![y0..y1, x0..x1]);
            let n = cell.len() as f64;
            let mean = cell.sum() / n;
            let var = cell.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let g = grad.slice(ndarray::s![y0..y1, x0..x1]).sum() / n;
            features.extend([mean, var.sqrt(), g]);
        }
    }
    Ok(features)
}

/// Crop, resize, standardize and featurize one frame.
pub fn embed_image(image: &GrayImage, circle: &CircleSpec, grid: usize) -> Result<Vec<f32>> {
    let fov = circle.resolve(image.width, image.height);
    let square = crop_fov(image, &fov)?;
    let features = patch_featurize(&normalize_resize(&square), grid)?;
    Ok(features.into_iter().map(|v| v as f32).collect())
}

/// Reads an 8- or 16-bit grayscale PNG; color images are converted to luma.
pub fn load_png(path: &Path) -> Result<GrayImage> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| FslError::Image(format!("{}: {e}", path.display())))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        other => other.into_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
    };
    GrayImage::new(width, height, pixels)
}

/// Splits `patient_sequence_frame`; the patient id may itself contain `_`.
pub fn parse_frame_name(stem: &str) -> Option<(String, String, u32)> {
    let mut parts = stem.rsplitn(3, '_');
    let frame = parts.next()?.parse().ok()?;
    let sequence = parts.next()?;
    let patient = parts.next()?;
    if sequence.is_empty() || patient.is_empty() {
        return None;
    }
    Some((patient.to_string(), sequence.to_string(), frame))
}

/// One PNG frame found in an image folder.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFile {
    pub path: PathBuf,
    pub patient_id: String,
    pub sequence_id: String,
    pub frame_index: u32,
}

/// Lists `*.png` files in `dir`, sorted by name. Every offending file name
/// is listed in the error.
pub fn scan_frames(dir: &Path) -> Result<Vec<FrameFile>> {
    let mut paths: Vec<PathBuf> =
        std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    paths.sort();
    let mut frames = Vec::new();
    let mut bad = Vec::new();
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        match parse_frame_name(stem) {
            Some((patient_id, sequence_id, frame_index)) => {
                frames.push(FrameFile { path, patient_id, sequence_id, frame_index })
            }
            None => bad.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned()),
        }
    }
    if !bad.is_empty() {
        return Err(FslError::InvalidConfig(format!(
            "file names not of the form patient_sequence_frame.png: {}",
            bad.join(", ")
        )));
    }
    Ok(frames)
}

/// `(patient_id, sequence_id) → label` from a CSV with those three columns.
pub fn read_labels(path: &Path) -> Result<BTreeMap<(String, String), usize>> {
    #[derive(Deserialize)]
    struct Row {
        patient_id: String,
        sequence_id: String,
        label: usize,
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut labels = BTreeMap::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| FslError::MalformedRow { row: i + 1, reason: e.to_string() })?;
        labels.insert((row.patient_id, row.sequence_id), row.label);
    }
    Ok(labels)
}

/// Settings for turning an image folder into a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedSettings {
    pub circle: CircleSpec,
    pub grid: usize,
    /// Augmented copies per frame; 0 embeds the frames as they are.
    pub augment_copies: usize,
    pub policy: AugmentPolicy,
    pub seed: u64,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        Self { circle: CircleSpec::Auto, grid: 4, augment_copies: 0, policy: AugmentPolicy::default(), seed: 0 }
    }
}

/// Embeds every frame. With `augment_copies = k > 0` each frame yields `k`
/// augmented records instead, with frame indices `frame·k + copy`.
pub fn embed_frames(
    name: &str,
    frames: &[FrameFile],
    labels: &BTreeMap<(String, String), usize>,
    settings: &EmbedSettings,
    exec: Execution,
) -> Result<Dataset> {
    if settings.grid < 1 || settings.grid > TARGET_SIZE {
        return Err(FslError::BadGrid(settings.grid));
    }
    settings.policy.validate()?;
    let mut missing: Vec<String> = frames
        .iter()
        .filter(|f| !labels.contains_key(&(f.patient_id.clone(), f.sequence_id.clone())))
        .map(|f| format!("{}/{}", f.patient_id, f.sequence_id))
        .collect();
    missing.dedup();
    if !missing.is_empty() {
        return Err(FslError::InvalidConfig(format!("no label for sequences: {}", missing.join(", "))));
    }
    let per_frame = par::try_map_indexed(exec, frames.len(), |i| {
        let f = &frames[i];
        let label = labels[&(f.patient_id.clone(), f.sequence_id.clone())];
        let image = load_png(&f.path)?;
        let record = |frame_index, vector| EmbeddingRecord {
            patient_id: f.patient_id.clone(),
            sequence_id: f.sequence_id.clone(),
            frame_index,
            label,
            vector,
        };
        if settings.augment_copies == 0 {
            return Ok(vec![record(f.frame_index, embed_image(&image, &settings.circle, settings.grid)?)]);
        }
        let k = settings.augment_copies as u32;
        (0..k)
            .map(|copy| {
                let seed = rng::mix(settings.seed, ((i as u64) << 32) | copy as u64);
                let augmented = augment(&image, &settings.policy, seed)?;
                let vector = embed_image(&augmented, &settings.circle, settings.grid)?;
                Ok(record(f.frame_index * k + copy, vector))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let records: Vec<EmbeddingRecord> = per_frame.into_iter().flatten().collect();
    let num_classes = records.iter().map(|r| r.label + 1).max().unwrap_or(0).max(2);
    Dataset::new(name, 3 * settings.grid * settings.grid, num_classes, records)
}
