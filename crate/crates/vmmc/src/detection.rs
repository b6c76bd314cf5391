//! Detectors applied to whole images.
//!
//! Networks see the letterboxed square; everything returned here is mapped
//! back onto the source image.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use vmmc_core::annotation::{CarDetector, DetectionCandidate, Probe, CAR_CATEGORY};
use vmmc_core::dataset::ImageSize;
use vmmc_core::matching::GroundTruth;
use vmmc_core::{BoundingBox, ClassId, Detection};
use vmmc_nn::ssd::{build_detector, fine_tune, DetEpochMetrics, DetSample, DetTrainConfig, DetectConfig, SsdNetwork, SsdSpec};
use vmmc_nn::NnError;

use crate::imaging::{preprocess_rgb, to_chw, ImagingError, Letterbox};
use crate::synth::{render_corpus, Scene, SynthConfig};

#[derive(Debug, thiserror::Error)]
pub enum DetectionError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Anything that proposes cars on a decoded image, in source pixels.
pub trait FrameDetector {
    fn detect_cars(&self, image: &RgbImage) -> Result<Vec<DetectionCandidate>, DetectionError>;
}

impl<F> FrameDetector for F
where
    F: Fn(&RgbImage) -> Vec<DetectionCandidate>,
{
    fn detect_cars(&self, image: &RgbImage) -> Result<Vec<DetectionCandidate>, DetectionError> {
        Ok(self(image))
    }
}

/// Runs a detector on one image. Boxes are normalized to the source image's
/// width and height; boxes lying wholly on the padding are dropped.
pub fn detect_image(net: &SsdNetwork, cfg: &DetectConfig, image: &RgbImage) -> Result<Vec<Detection>, DetectionError> {
    let size = net.spec().input_size as u32;
    let pixels = to_chw(&preprocess_rgb(image, size)?);
    let lb = Letterbox::new(image.width(), image.height());
    let (w, h) = (image.width() as f64, image.height() as f64);
    Ok(net
        .detect(&pixels, cfg)?
        .into_iter()
        .filter_map(|d| {
            let bbox = lb.box_to_source(&d.bbox)?.to_normalized(w, h).ok()?;
            Some(Detection { bbox, ..d })
        })
        .collect())
}

/// An SSD whose labels name what it finds; the car detector has the single
/// label `car`.
pub struct SsdCarDetector {
    pub net: SsdNetwork,
    pub detect: DetectConfig,
}

impl FrameDetector for SsdCarDetector {
    fn detect_cars(&self, image: &RgbImage) -> Result<Vec<DetectionCandidate>, DetectionError> {
        let (w, h) = (image.width() as f64, image.height() as f64);
        let labels = &self.net.spec().labels;
        Ok(detect_image(&self.net, &self.detect, image)?
            .into_iter()
            .filter_map(|d| {
                Some(DetectionCandidate {
                    bbox: d.bbox.to_pixel(w, h).ok()?,
                    confidence: d.prob,
                    detector_class: labels.get(d.class_id.index())?.clone(),
                })
            })
            .collect())
    }
}

/// Adapts a [`FrameDetector`] to annotation by decoding image files found
/// under `root`. Undecodable files probe as [`Probe::Unreadable`].
pub struct FileProbe<'a, D> {
    pub root: PathBuf,
    pub detector: &'a D,
}

impl<D: FrameDetector> CarDetector for FileProbe<'_, D> {
    type Error = DetectionError;

    fn probe(&mut self, image_path: &str) -> Result<Probe, DetectionError> {
        let Ok(img) = image::open(self.root.join(image_path)) else {
            log::warn!("cannot decode {image_path}");
            return Ok(Probe::Unreadable);
        };
        let img = img.to_rgb8();
        let size = ImageSize { width: img.width(), height: img.height() };
        Ok(Probe::Frame { size, candidates: self.detector.detect_cars(&img)? })
    }
}

/// Decodes an image file as 8-bit RGB.
pub fn open_rgb(path: &Path) -> Result<RgbImage, image::ImageError> {
    Ok(image::open(path)?.to_rgb8())
}

/// Settings for pretraining the car detector on synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarDetectorConfig {
    pub corpus_seed: u64,
    pub per_class: usize,
    pub train: DetTrainConfig,
    pub detect: DetectConfig,
}

impl Default for CarDetectorConfig {
    fn default() -> Self {
        Self {
            corpus_seed: 1000,
            per_class: 150,
            train: DetTrainConfig { epochs: 20, ..Default::default() },
            detect: DetectConfig { report_floor: 0.1, ..Default::default() },
        }
    }
}

/// Detector training samples with every object labeled as class 0.
pub fn car_samples(scenes: &[Scene], input_size: u32) -> Result<Vec<DetSample>, DetectionError> {
    let mut out = Vec::with_capacity(scenes.len());
    for s in scenes {
        let lb = Letterbox::new(s.image.width(), s.image.height());
        let bbox = lb.box_to_square(&s.bbox).ok_or_else(|| NnError::Spec("scene box leaves the image".into()))?;
        let pixels = to_chw(&preprocess_rgb(&s.image, input_size)?);
        out.push(DetSample { pixels, boxes: vec![GroundTruth { bbox, class_id: ClassId::default() }] });
    }
    Ok(out)
}

pub fn car_spec() -> SsdSpec {
    SsdSpec::compact(vec![CAR_CATEGORY.into()])
}

/// Trains the car detector on its own synthetic corpus.
pub fn pretrain_car_detector(cfg: &CarDetectorConfig) -> Result<(SsdCarDetector, Vec<DetEpochMetrics>), DetectionError> {
    let spec = car_spec();
    let scenes = render_corpus(&SynthConfig { per_class: cfg.per_class, seed: cfg.corpus_seed, ..Default::default() });
    let samples = car_samples(&scenes, spec.input_size as u32)?;
    let mut net = build_detector(&spec, cfg.train.seed)?;
    let metrics = fine_tune(&mut net, &samples, &cfg.train)?;
    Ok((SsdCarDetector { net, detect: cfg.detect }, metrics))
}

/// Snaps a pixel box to whole pixels inside a `width×height` image.
pub fn snap_box(bbox: &BoundingBox, width: u32, height: u32) -> Option<BoundingBox> {
    let x0 = bbox.x_min().round().clamp(0.0, width as f64);
    let y0 = bbox.y_min().round().clamp(0.0, height as f64);
    let x1 = bbox.x_max().round().clamp(0.0, width as f64);
    let y1 = bbox.y_max().round().clamp(0.0, height as f64);
    BoundingBox::pixel(x0, y0, x1, y1).ok()
}
