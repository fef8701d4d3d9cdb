//! Synthetic multi-site segmentation data.
//!
//! Every sample is a square grayscale image holding one or two smooth radial
//! blobs on a noisy background; the ground-truth mask marks pixels where the
//! noiseless blob field exceeds [`MASK_LEVEL`]. Sites differ by feature
//! shift only: blob peak offset, blob size and background noise level.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, domain, SimRng};

pub const MASK_LEVEL: f64 = 0.3;
pub const BASE_PEAK: f64 = 0.6;
pub const TRAIN_FRACTION: f64 = 0.75;
/// Upper bound on the mask foreground fraction; draws above it are rejected.
pub const MAX_FOREGROUND: f64 = 0.6;

/// Row-major 2-D grid of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Dimension {
                expected: width * height,
                found: values.len(),
            });
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            values: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Generative parameters of one site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiteShift {
    /// Added to [`BASE_PEAK`] to give the blob peak intensity.
    pub intensity_offset: f64,
    /// Blob radius range as a fraction of the image side.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Standard deviation of the Gaussian background noise.
    pub noise_level: f64,
}

impl Default for SiteShift {
    fn default() -> Self {
        Self {
            intensity_offset: 0.0,
            radius_min: 0.08,
            radius_max: 0.18,
            noise_level: 0.1,
        }
    }
}

impl SiteShift {
    pub fn validate(&self) -> Result<()> {
        let peak = BASE_PEAK + self.intensity_offset;
        if !(peak > MASK_LEVEL && peak <= 1.0) {
            return Err(Error::config(format!("blob peak {peak} must lie in ({MASK_LEVEL}, 1]")));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max && self.radius_max < 0.5) {
            return Err(Error::config("blob radius range must satisfy 0 < min <= max < 0.5"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::config("noise level must be non-negative"));
        }
        Ok(())
    }

    /// Draws a site's shift around the default with spread scaled by `h`.
    fn draw(rng: &mut SimRng, h: f64) -> Self {
        let base = Self::default();
        let offset = h * rng.random_range(-0.15..=0.15);
        let radius_scale = 1.0 + h * rng.random_range(-0.3..=0.3);
        let noise_scale = 1.0 + h * rng.random_range(-0.5..=1.0);
        Self {
            intensity_offset: offset,
            radius_min: base.radius_min * radius_scale,
            radius_max: base.radius_max * radius_scale,
            noise_level: base.noise_level * noise_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: usize,
    pub image: Grid,
    /// Binary mask with values in {0, 1}.
    pub mask: Grid,
}

impl SyntheticSample {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.values.iter().sum::<f64>() / self.mask.len() as f64
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
}

fn blob_field(blobs: &[Blob], peak: f64, size: usize) -> Vec<f64> {
    let mut field = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let v = blobs
                .iter()
                .map(|b| {
                    let d2 = (x as f64 - b.cx).powi(2) + (y as f64 - b.cy).powi(2);
                    peak * (-d2 / (2.0 * b.radius * b.radius)).exp()
                })
                .fold(0.0, f64::max);
            field[y * size + x] = v;
        }
    }
    field
}

/// Draws one `size x size` sample. The returned sample has id 0.
pub fn generate_sample(rng: &mut SimRng, shift: &SiteShift, size: usize) -> Result<SyntheticSample> {
    shift.validate()?;
    if size < 4 {
        return Err(Error::config(format!("image size must be at least 4, got {size}")));
    }
    let side = size as f64;
    let peak = BASE_PEAK + shift.intensity_offset;
    let noise = Normal::new(0.0, shift.noise_level.max(0.0))
        .map_err(|e| Error::config(format!("noise level: {e}")))?;

    loop {
        let count = if rng.random_bool(0.5) { 1 } else { 2 };
        let blobs: Vec<Blob> = (0..count)
            .map(|_| Blob {
                cx: rng.random_range(0.0..side - 1.0),
                cy: rng.random_range(0.0..side - 1.0),
                radius: side * rng.random_range(shift.radius_min..=shift.radius_max),
            })
            .collect();
        let field = blob_field(&blobs, peak, size);
        let mask: Vec<f64> = field
            .iter()
            .map(|&f| if f > MASK_LEVEL { 1.0 } else { 0.0 })
            .collect();
        let image: Vec<f64> = field
            .iter()
            .map(|&f| {
                let n = if shift.noise_level > 0.0 { noise.sample(rng) } else { 0.0 };
                (f + n).clamp(0.0, 1.0)
            })
            .collect();
        let fg = mask.iter().sum::<f64>() / mask.len() as f64;
        if fg > 0.0 && fg < MAX_FOREGROUND {
            return Ok(SyntheticSample {
                id: 0,
                image: Grid::new(size, size, image)?,
                mask: Grid::new(size, size, mask)?,
            });
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClientSite {
    pub site_id: usize,
    pub shift: SiteShift,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
}

impl ClientSite {
    /// Training sample count, the aggregation weight.
    pub fn n_k(&self) -> usize {
        self.train.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub seed: u64,
    /// Samples per site before the train/validation split.
    pub sizes: Vec<usize>,
    pub test_size: usize,
    /// Site heterogeneity in [0, 1]; 0 gives identically distributed sites.
    pub heterogeneity: f64,
    pub image_size: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            sizes: vec![113, 105, 97, 82, 78],
            test_size: 25,
            heterogeneity: 0.5,
            image_size: 32,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::config("at least one client site is required"));
        }
        if self.sizes.contains(&0) {
            return Err(Error::config("every site needs at least one sample"));
        }
        if self.test_size == 0 {
            return Err(Error::config("test set needs at least one sample"));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::config(format!(
                "heterogeneity must lie in [0, 1], got {}",
                self.heterogeneity
            )));
        }
        if self.image_size < 4 {
            return Err(Error::config("image size must be at least 4"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Federation {
    pub sites: Vec<ClientSite>,
    pub test: Vec<SyntheticSample>,
}

impl Federation {
    pub fn total_train(&self) -> usize {
        self.sites.iter().map(ClientSite::n_k).sum()
    }
}

/// Training share of a site with `size` samples: 75% rounded up, at least
/// one sample, and leaving one for validation when there are two or more.
pub fn train_count(size: usize) -> usize {
    let n = (TRAIN_FRACTION * size as f64).ceil() as usize;
    n.clamp(1, size.saturating_sub(1).max(1))
}

/// Builds the client sites and a held-out test set drawn from the mixture
/// of all site distributions.
pub fn build_federation(cfg: &FederationConfig) -> Result<Federation> {
    cfg.validate()?;
    let mut shift_rng = rng::derive(cfg.seed, &[domain::DATA, 0]);
    let shifts: Vec<SiteShift> = cfg
        .sizes
        .iter()
        .map(|_| SiteShift::draw(&mut shift_rng, cfg.heterogeneity))
        .collect();

    let mut next_id = 0usize;
    let mut sites = Vec::with_capacity(cfg.sizes.len());
    for (k, (&size, shift)) in cfg.sizes.iter().zip(&shifts).enumerate() {
        let mut r = rng::derive(cfg.seed, &[domain::DATA, 1, k as u64]);
        let mut samples = Vec::with_capacity(size);
        for _ in 0..size {
            let mut s = generate_sample(&mut r, shift, cfg.image_size)?;
            s.id = next_id;
            next_id += 1;
            samples.push(s);
        }
        let val = samples.split_off(train_count(size));
        sites.push(ClientSite {
            site_id: k,
            shift: *shift,
            train: samples,
            val,
        });
    }

    let mut r = rng::derive(cfg.seed, &[domain::DATA, 2]);
    let mut test = Vec::with_capacity(cfg.test_size);
    for _ in 0..cfg.test_size {
        let k = r.random_range(0..shifts.len());
        let mut s = generate_sample(&mut r, &shifts[k], cfg.image_size)?;
        s.id = next_id;
        next_id += 1;
        test.push(s);
    }
    Ok(Federation { sites, test })
}

/// Writes every sample as flat little-endian binaries plus `manifest.txt`.
///
/// Images are `f64` row-major (`<id>.image.bin`), masks one byte per pixel
/// (`<id>.mask.bin`). The manifest has a header line followed by one
/// whitespace-separated record per sample: `id site split width height`,
/// where `site` is `-` for test samples.
pub fn export_federation(fed: &Federation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.txt");
    let mut manifest = String::from("id site split width height\n");

    let mut write_sample = |s: &SyntheticSample, site: &str, split: &str| -> Result<()> {
        let image_path = dir.join(format!("{}.image.bin", s.id));
        let mut bytes = Vec::with_capacity(s.image.len() * 8);
        for v in &s.image.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&image_path, bytes).map_err(|e| Error::io(&image_path, e))?;
        let mask_path = dir.join(format!("{}.mask.bin", s.id));
        let mask: Vec<u8> = s.mask.values.iter().map(|&v| u8::from(v > 0.5)).collect();
        fs::write(&mask_path, mask).map_err(|e| Error::io(&mask_path, e))?;
        manifest.push_str(&format!(
            "{} {} {} {} {}\n",
            s.id, site, split, s.image.width, s.image.height
        ));
        Ok(())
    };

    for site in &fed.sites {
        let id = site.site_id.to_string();
        for s in &site.train {
            write_sample(s, &id, "train")?;
        }
        for s in &site.val {
            write_sample(s, &id, "val")?;
        }
    }
    for s in &fed.test {
        write_sample(s, "-", "test")?;
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(&manifest_path, e))
}
