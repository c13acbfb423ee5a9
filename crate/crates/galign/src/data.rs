//! Data ingestion: folder loading, the synthetic two-domain corpus, and
//! deterministic per-epoch iteration.
//!
//! Pixels are stored channel-first as `[3, H, W]` in `[-1, 1]`, matching
//! the generator's saturating output nonlinearity.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{stream_rng, RngStream};
use crate::scalar::{fl, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn label(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// One image plus its provenance (file path or synthetic tag).
#[derive(Debug, Clone)]
pub struct ImageSample<T: Scalar> {
    pub pixels: Array3<T>,
    pub source: String,
}

impl<T: Scalar> ImageSample<T> {
    pub fn new(pixels: Array3<T>, source: impl Into<String>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 || h != w {
            return Err(Error::Data(format!(
                "image sample must be [3,N,N], got [{c},{h},{w}]"
            )));
        }
        let lo = fl::<T>(-1.0);
        let hi = fl::<T>(1.0);
        if pixels.iter().any(|&v| v < lo || v > hi || !v.is_finite()) {
            return Err(Error::Data("pixel values outside [-1,1]".into()));
        }
        Ok(ImageSample {
            pixels,
            source: source.into(),
        })
    }

    pub fn resolution(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Ordered image collection for one domain. Iteration order for an epoch
/// is a pure function of `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct DomainDataset<T: Scalar> {
    pub domain: Domain,
    pub samples: Vec<ImageSample<T>>,
    pub seed: u64,
}

impl<T: Scalar> DomainDataset<T> {
    pub fn new(domain: Domain, samples: Vec<ImageSample<T>>, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data(format!(
                "{} dataset is empty",
                domain.label()
            )));
        }
        let res = samples[0].resolution();
        if samples.iter().any(|s| s.resolution() != res) {
            return Err(Error::Data("mixed resolutions in dataset".into()));
        }
        Ok(DomainDataset {
            domain,
            samples,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.samples[0].resolution()
    }

    /// Seeded permutation of sample indices for the given epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = stream_rng(self.seed, RngStream::EpochShuffle, epoch);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order
    }
}

// ---- folder loading ----

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png") | Some("jpg") | Some("jpeg")
    )
}

fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Array3<T> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<T>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = p.0[c] as f64 / 255.0 * 2.0 - 1.0;
            out[[c, y as usize, x as usize]] = fl(v);
        }
    }
    out
}

/// Convert a `[-1,1]` tensor back to 8-bit RGB.
pub fn tensor_to_rgb<T: Scalar>(pixels: &Array3<T>) -> RgbImage {
    let (_, h, w) = pixels.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = (pixels[[c, y, x]].as_f64() + 1.0) / 2.0 * 255.0;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

/// Load every PNG/JPEG in `dir`, bilinearly resized to
/// `resolution x resolution` and scaled to `[-1,1]`. Files that fail to
/// decode are skipped with a warning; the call errors only when nothing
/// decodable remains.
pub fn load_folder<T: Scalar>(
    dir: &Path,
    domain: Domain,
    resolution: usize,
    seed: u64,
) -> Result<DomainDataset<T>> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read directory {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no images found in {}",
            dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(files.len());
    for path in &files {
        let img = match image::open(path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping undecodable image {}: {e}", path.display());
                continue;
            }
        };
        let img = if img.dimensions() == (resolution as u32, resolution as u32) {
            img
        } else {
            image::imageops::resize(
                &img,
                resolution as u32,
                resolution as u32,
                FilterType::Triangle,
            )
        };
        samples.push(ImageSample::new(
            rgb_to_tensor(&img),
            path.display().to_string(),
        )?);
    }
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "no images found in {} ({} files failed to decode)",
            dir.display(),
            files.len()
        )));
    }
    DomainDataset::new(domain, samples, seed)
}

// ---- synthetic corpus ----

/// Which attributes separate the two synthetic domains. Both motifs differ
/// globally (palette or background texture) and locally (circles vs
/// squares), so style and structure alignment are both exercised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motif {
    CirclesToSquares,
    SolidToStriped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub resolution: usize,
    pub count: usize,
    pub motif: Motif,
    pub seed: u64,
    /// Patch size the downstream style encoder will cut the image into;
    /// the resolution must be divisible by it.
    pub patch_multiple: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            resolution: 64,
            count: 8,
            motif: Motif::CirclesToSquares,
            seed: 7,
            patch_multiple: 8,
        }
    }
}

fn fill_background<T: Scalar, R: Rng>(
    px: &mut Array3<T>,
    rng: &mut R,
    base: [(f64, f64); 3],
    gradient: f64,
) {
    let (_, h, w) = px.dim();
    let color: Vec<f64> = base.iter().map(|&(lo, hi)| f64::uniform(rng, lo, hi)).collect();
    for y in 0..h {
        let shade = gradient * (y as f64 / (h - 1).max(1) as f64 - 0.5);
        for x in 0..w {
            for c in 0..3 {
                px[[c, y, x]] = fl((color[c] + shade).clamp(-1.0, 1.0));
            }
        }
    }
}

fn fill_stripes<T: Scalar, R: Rng>(px: &mut Array3<T>, rng: &mut R) {
    let (_, h, w) = px.dim();
    let width = (h / 16).max(2);
    let c1: Vec<f64> = [(0.45, 0.8), (0.25, 0.55), (-0.2, 0.1)]
        .iter()
        .map(|&(lo, hi)| f64::uniform(rng, lo, hi))
        .collect();
    let c2: Vec<f64> = [(0.7, 0.95), (0.5, 0.8), (0.05, 0.35)]
        .iter()
        .map(|&(lo, hi)| f64::uniform(rng, lo, hi))
        .collect();
    for y in 0..h {
        let color = if (y / width) % 2 == 0 { &c1 } else { &c2 };
        for x in 0..w {
            for c in 0..3 {
                px[[c, y, x]] = fl(color[c]);
            }
        }
    }
}

fn draw_shape<T: Scalar, R: Rng>(px: &mut Array3<T>, rng: &mut R, square: bool, color_ranges: [(f64, f64); 3]) {
    let (_, h, w) = px.dim();
    let color: Vec<f64> = color_ranges
        .iter()
        .map(|&(lo, hi)| f64::uniform(rng, lo, hi))
        .collect();
    let radius = rng.random_range(h / 8..=h / 4) as isize;
    let cy = rng.random_range(h / 4..3 * h / 4) as isize;
    let cx = rng.random_range(w / 4..3 * w / 4) as isize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let inside = if square {
                (y - cy).abs() <= radius && (x - cx).abs() <= radius
            } else {
                (y - cy).pow(2) + (x - cx).pow(2) <= radius * radius
            };
            if inside {
                for c in 0..3 {
                    px[[c, y as usize, x as usize]] = fl(color[c]);
                }
            }
        }
    }
}

// Palettes: source images are kept dark/cool and target images bright/warm
// so domain mean intensities are well separated.
const COOL_BG: [(f64, f64); 3] = [(-0.85, -0.55), (-0.55, -0.25), (0.0, 0.4)];
const WARM_BG: [(f64, f64); 3] = [(0.5, 0.85), (0.25, 0.6), (-0.2, 0.1)];
const WARM_SHAPE: [(f64, f64); 3] = [(0.6, 0.9), (0.0, 0.3), (-0.6, -0.3)];
const COOL_SHAPE: [(f64, f64); 3] = [(-0.9, -0.6), (-0.3, 0.0), (0.5, 0.8)];

fn synth_image<T: Scalar>(spec: &SyntheticSpec, domain: Domain, index: usize) -> ImageSample<T> {
    let tag = match domain {
        Domain::Source => 2 * index as u64,
        Domain::Target => 2 * index as u64 + 1,
    };
    let mut rng = stream_rng(spec.seed, RngStream::Synthetic, tag);
    let r = spec.resolution;
    let mut px = Array3::<T>::zeros((3, r, r));
    match (spec.motif, domain) {
        (Motif::CirclesToSquares, Domain::Source) => {
            fill_background(&mut px, &mut rng, COOL_BG, 0.3);
            draw_shape(&mut px, &mut rng, false, WARM_SHAPE);
        }
        (Motif::CirclesToSquares, Domain::Target) => {
            fill_background(&mut px, &mut rng, WARM_BG, 0.3);
            draw_shape(&mut px, &mut rng, true, COOL_SHAPE);
        }
        (Motif::SolidToStriped, Domain::Source) => {
            fill_background(&mut px, &mut rng, COOL_BG, 0.0);
            draw_shape(&mut px, &mut rng, false, WARM_SHAPE);
        }
        (Motif::SolidToStriped, Domain::Target) => {
            fill_stripes(&mut px, &mut rng);
            draw_shape(&mut px, &mut rng, true, COOL_SHAPE);
        }
    }
    ImageSample::new(px, format!("synthetic:{}:{index}", domain.label()))
        .expect("synthetic image in range by construction")
}

/// Generate the two-domain synthetic corpus.
pub fn generate_synthetic<T: Scalar>(
    spec: &SyntheticSpec,
) -> Result<(DomainDataset<T>, DomainDataset<T>)> {
    if spec.count == 0 {
        return Err(Error::Config("synthetic count must be >= 1".into()));
    }
    if spec.patch_multiple == 0 || !spec.resolution.is_multiple_of(spec.patch_multiple) {
        return Err(Error::Config(format!(
            "resolution {} not divisible by patch size {}",
            spec.resolution, spec.patch_multiple
        )));
    }
    let source: Vec<ImageSample<T>> = (0..spec.count)
        .map(|i| synth_image(spec, Domain::Source, i))
        .collect();
    let target: Vec<ImageSample<T>> = (0..spec.count)
        .map(|i| synth_image(spec, Domain::Target, i))
        .collect();
    Ok((
        DomainDataset::new(Domain::Source, source, spec.seed)?,
        DomainDataset::new(Domain::Target, target, spec.seed.wrapping_add(1))?,
    ))
}

/// Write every sample as a PNG under `dir` for inspection.
pub fn dump_pngs<T: Scalar>(dataset: &DomainDataset<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, sample) in dataset.samples.iter().enumerate() {
        let img = tensor_to_rgb(&sample.pixels);
        let path = dir.join(format!("{}_{i:04}.png", dataset.domain.label()));
        img.save(&path)?;
    }
    Ok(())
}

/// Mean pixel intensity over a dataset, used to verify domain separation.
pub fn mean_intensity<T: Scalar>(dataset: &DomainDataset<T>) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in &dataset.samples {
        total += s.pixels.iter().map(|v| v.as_f64()).sum::<f64>();
        n += s.pixels.len();
    }
    total / n as f64
}
