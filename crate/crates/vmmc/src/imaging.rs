//! Image preprocessing and augmentation.
//!
//! Images are padded to a centered square with zeros, resized to the network
//! input, and scaled to `[0, 1]` by the storage format's maximum intensity.
//! Networks take planar `C×S×S` buffers; [`to_chw`] and [`from_chw`] convert.

use image::imageops::{self, FilterType};
use image::{DynamicImage, Rgb, Rgb32FImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vmmc_core::BoundingBox;

pub const DEFAULT_INPUT_SIZE: u32 = 300;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ImagingError {
    #[error("expected 3 color channels, found {0}")]
    Channels(u8),
    #[error("image has a zero dimension")]
    Empty,
    #[error("invalid augmentation config: {0}")]
    BadConfig(&'static str),
}

/// Placement of an image inside its zero-padded square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Letterbox {
    pub width: u32,
    pub height: u32,
    pub side: u32,
    pub offset_x: u32,
    pub offset_y: u32,
}

impl Letterbox {
    pub fn new(width: u32, height: u32) -> Self {
        let side = width.max(height);
        Self { width, height, side, offset_x: (side - width) / 2, offset_y: (side - height) / 2 }
    }

    /// Maps a normalized point of the square back to source pixels.
    pub fn to_source(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.side as f64 - self.offset_x as f64, y * self.side as f64 - self.offset_y as f64)
    }

    /// Pixel box of the source image as a normalized box of the square.
    pub fn box_to_square(&self, bbox: &BoundingBox) -> Option<BoundingBox> {
        let (s, ox, oy) = (self.side as f64, self.offset_x as f64, self.offset_y as f64);
        BoundingBox::normalized((bbox.x_min() + ox) / s, (bbox.y_min() + oy) / s, (bbox.x_max() + ox) / s, (bbox.y_max() + oy) / s).ok()
    }

    /// Normalized box of the square as a pixel box clipped to the source
    /// image; `None` when nothing of it lies on the image.
    pub fn box_to_source(&self, bbox: &BoundingBox) -> Option<BoundingBox> {
        let (x0, y0) = self.to_source(bbox.x_min(), bbox.y_min());
        let (x1, y1) = self.to_source(bbox.x_max(), bbox.y_max());
        BoundingBox::pixel(x0, y0, x1, y1).ok()?.clip(self.width as f64, self.height as f64)
    }
}

/// Pads to a centered square, resizes to `size` and scales to `[0, 1]`.
pub fn preprocess(image: &DynamicImage, size: u32) -> Result<Rgb32FImage, ImagingError> {
    let channels = image.color().channel_count();
    if channels != 3 {
        return Err(ImagingError::Channels(channels));
    }
    if image.width() == 0 || image.height() == 0 || size == 0 {
        return Err(ImagingError::Empty);
    }
    Ok(square_resize(&image.to_rgb32f(), size))
}

pub fn preprocess_rgb(image: &RgbImage, size: u32) -> Result<Rgb32FImage, ImagingError> {
    preprocess(&DynamicImage::ImageRgb8(image.clone()), size)
}

fn square_resize(image: &Rgb32FImage, size: u32) -> Rgb32FImage {
    let lb = Letterbox::new(image.width(), image.height());
    let mut canvas = Rgb32FImage::new(lb.side, lb.side);
    imageops::replace(&mut canvas, image, lb.offset_x as i64, lb.offset_y as i64);
    let mut out = if lb.side == size { canvas } else { imageops::resize(&canvas, size, size, FilterType::Triangle) };
    clip(&mut out);
    out
}

fn clip(image: &mut Rgb32FImage) {
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Planar copy, channel by channel.
pub fn to_chw(image: &Rgb32FImage) -> Vec<f32> {
    let (w, h) = image.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0; 3 * plane];
    for (i, p) in image.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = p.0[c];
        }
    }
    out
}

pub fn from_chw(data: &[f32], size: u32) -> Rgb32FImage {
    let plane = (size * size) as usize;
    Rgb32FImage::from_fn(size, size, |x, y| {
        let i = (y * size + x) as usize;
        Rgb([data[i], data[plane + i], data[2 * plane + i]])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    /// Gaussian blur sigma range in pixels.
    pub blur_sigma_range: (f32, f32),
    /// Standard deviation of additive noise on the `[0, 1]` scale.
    pub noise_stddev: f32,
    pub zoom_range: (f32, f32),
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, blur_sigma_range: (0.0, 1.5), noise_stddev: 0.05, zoom_range: (0.9, 1.1), rng_seed: 0 }
    }
}

impl AugmentationConfig {
    /// Leaves every image unchanged.
    pub fn identity() -> Self {
        Self { flip_prob: 0.0, blur_sigma_range: (0.0, 0.0), noise_stddev: 0.0, zoom_range: (1.0, 1.0), rng_seed: 0 }
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(ImagingError::BadConfig("flip_prob must lie in [0, 1]"));
        }
        let (b0, b1) = self.blur_sigma_range;
        if !(0.0 <= b0 && b0 <= b1) {
            return Err(ImagingError::BadConfig("blur range must satisfy 0 <= lo <= hi"));
        }
        let (z0, z1) = self.zoom_range;
        if !(0.0 < z0 && z0 <= z1) {
            return Err(ImagingError::BadConfig("zoom range must satisfy 0 < lo <= hi"));
        }
        if !(self.noise_stddev >= 0.0) {
            return Err(ImagingError::BadConfig("noise_stddev must be non-negative"));
        }
        Ok(())
    }
}

/// Augments with a generator seeded from `cfg.rng_seed`.
pub fn augment(image: &Rgb32FImage, cfg: &AugmentationConfig) -> Result<Rgb32FImage, ImagingError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    Ok(augment_with(image, cfg, &mut rng))
}

fn draw(range: (f32, f32), rng: &mut impl Rng) -> f32 {
    if range.0 < range.1 {
        rng.random_range(range.0..=range.1)
    } else {
        range.0
    }
}

/// Flip, zoom, blur and noise in that order, then clipping to `[0, 1]`.
/// `cfg` is assumed valid.
pub fn augment_with(image: &Rgb32FImage, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Rgb32FImage {
    let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob);
    let zoom = draw(cfg.zoom_range, rng);
    let sigma = draw(cfg.blur_sigma_range, rng);
    let mut out = if flip { imageops::flip_horizontal(image) } else { image.clone() };
    if zoom != 1.0 {
        out = apply_zoom(&out, zoom);
    }
    if sigma > 0.0 {
        out = imageops::blur(&out, sigma);
    }
    if cfg.noise_stddev > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_stddev).expect("validated stddev");
        for v in out.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    clip(&mut out);
    out
}

/// Scales about the center; zooming out leaves a zero border.
fn apply_zoom(image: &Rgb32FImage, zoom: f32) -> Rgb32FImage {
    let (w, h) = image.dimensions();
    if zoom > 1.0 {
        let cw = ((w as f32 / zoom).round() as u32).clamp(1, w);
        let ch = ((h as f32 / zoom).round() as u32).clamp(1, h);
        let crop = imageops::crop_imm(image, (w - cw) / 2, (h - ch) / 2, cw, ch).to_image();
        imageops::resize(&crop, w, h, FilterType::Triangle)
    } else {
        let sw = ((w as f32 * zoom).round() as u32).clamp(1, w);
        let sh = ((h as f32 * zoom).round() as u32).clamp(1, h);
        let small = imageops::resize(image, sw, sh, FilterType::Triangle);
        let mut canvas = Rgb32FImage::new(w, h);
        imageops::replace(&mut canvas, &small, ((w - sw) / 2) as i64, ((h - sh) / 2) as i64);
        canvas
    }
}

/// Augments a planar `3×size×size` buffer in place.
pub fn augment_chw(pixels: &mut [f32], size: u32, cfg: &AugmentationConfig, rng: &mut impl Rng) {
    let out = augment_with(&from_chw(pixels, size), cfg, rng);
    pixels.copy_from_slice(&to_chw(&out));
}
