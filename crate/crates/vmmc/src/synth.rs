//! Synthetic vehicle corpus.
//!
//! Each scene is a side-view vehicle sprite pasted on a cluttered
//! background. Models of one make share a paint family and differ in
//! silhouette (sedan, long-tail sedan, hatchback, boxy classic), so color
//! alone cannot separate them. The "other" class pools seven models of its
//! own in other silhouettes and paints. The returned box is the sprite's
//! exact pixel extent.

use std::fs;
use std::io;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vmmc_core::dataset::{DatasetManifest, ImageRecord, Source};
use vmmc_core::{BoundingBox, ClassId, NUM_CLASSES};

use crate::manifest::write_manifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub per_class: usize,
    pub seed: u64,
    pub width: (u32, u32),
    pub height: (u32, u32),
    /// Vehicle width as a fraction of image width.
    pub car_width: (f64, f64),
    pub clutter: (usize, usize),
    /// Color saturation of background and clutter, in `[0, 1]`.
    pub background_saturation: f64,
    /// Write a `.plate` sidecar with a random plate next to every image.
    pub plates: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { per_class: 100, seed: 0, width: (112, 160), height: (84, 120), car_width: (0.55, 0.85), clutter: (6, 14), background_saturation: 0.35, plates: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub class_id: ClassId,
    pub bbox: BoundingBox,
    pub plate: String,
}

type Point = (f64, f64);

fn fill_polygon(img: &mut RgbImage, pts: &[Point], color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let xs = x0.floor().max(0.0) as u32..(x1.ceil().max(0.0) as u32).min(w);
    for py in y0.floor().max(0.0) as u32..(y1.ceil().max(0.0) as u32).min(h) {
        let cy = py as f64 + 0.5;
        for px in xs.clone() {
            let cx = px as f64 + 0.5;
            let mut inside = false;
            let mut j = pts.len() - 1;
            for i in 0..pts.len() {
                let (xi, yi) = pts[i];
                let (xj, yj) = pts[j];
                if (yi > cy) != (yj > cy) && cx < (xj - xi) * (cy - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            if inside {
                img.put_pixel(px, py, color);
            }
        }
    }
}

fn fill_ellipse(img: &mut RgbImage, (cx, cy): Point, rx: f64, ry: f64, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    for py in (cy - ry).floor().max(0.0) as u32..((cy + ry).ceil().max(0.0) as u32).min(h) {
        for px in (cx - rx).floor().max(0.0) as u32..((cx + rx).ceil().max(0.0) as u32).min(w) {
            let dx = (px as f64 + 0.5 - cx) / rx;
            let dy = (py as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                img.put_pixel(px, py, color);
            }
        }
    }
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> [Point; 4] {
    [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
}

/// Silhouette in unit box coordinates, `y` pointing down. The body spans
/// the full width, the roof touches `y = 0` and wheels touch `y = 1`.
struct Silhouette {
    cabin: [Point; 4],
    body_top: f64,
    body_bottom: f64,
    /// Hood height at the front and deck height at the rear.
    hood: f64,
    deck: f64,
    wheels: [f64; 2],
    wheel_radius: f64,
    stripe: bool,
    /// Height over width of the whole sprite.
    aspect: (f64, f64),
}

fn silhouette(kind: usize) -> Silhouette {
    let s = |cabin, body_top, hood, deck, wheels, wheel_radius, stripe, aspect| Silhouette {
        cabin,
        body_top,
        body_bottom: 1.0 - wheel_radius,
        hood,
        deck,
        wheels,
        wheel_radius,
        stripe,
        aspect,
    };
    match kind {
        SEDAN => s([(0.24, 0.45), (0.36, 0.0), (0.64, 0.0), (0.8, 0.45)], 0.45, 0.5, 0.45, [0.2, 0.8], 0.17, false, (0.34, 0.4)),
        LONG_TAIL => s([(0.18, 0.45), (0.3, 0.0), (0.55, 0.0), (0.68, 0.45)], 0.45, 0.5, 0.4, [0.18, 0.76], 0.17, false, (0.34, 0.4)),
        HATCHBACK => s([(0.28, 0.45), (0.42, 0.0), (0.9, 0.0), (0.97, 0.45)], 0.45, 0.52, 0.45, [0.2, 0.78], 0.18, false, (0.52, 0.6)),
        BOXY => s([(0.27, 0.42), (0.3, 0.0), (0.7, 0.0), (0.73, 0.42)], 0.42, 0.42, 0.42, [0.19, 0.81], 0.15, true, (0.42, 0.48)),
        VAN => s([(0.12, 0.5), (0.22, 0.0), (1.0, 0.0), (1.0, 0.5)], 0.5, 0.55, 0.5, [0.17, 0.83], 0.15, false, (0.5, 0.6)),
        PICKUP => s([(0.22, 0.42), (0.28, 0.0), (0.52, 0.0), (0.55, 0.42)], 0.42, 0.48, 0.45, [0.19, 0.8], 0.19, false, (0.4, 0.48)),
        COUPE => s([(0.3, 0.5), (0.45, 0.0), (0.6, 0.0), (0.85, 0.5)], 0.5, 0.58, 0.52, [0.2, 0.8], 0.17, false, (0.32, 0.4)),
        _ => unreachable!("unknown silhouette {kind}"),
    }
}

const SEDAN: usize = 0;
const LONG_TAIL: usize = 1;
const HATCHBACK: usize = 2;
const BOXY: usize = 3;
const VAN: usize = 4;
const PICKUP: usize = 5;
const COUPE: usize = 6;

/// Silhouette and paint family per class. Models of a make share a paint
/// family; the other class pools seven models of its own.
fn class_style(class: ClassId, rng: &mut impl Rng) -> (usize, [f64; 3]) {
    const VW: [f64; 3] = [40.0, 80.0, 200.0];
    const RENAULT: [f64; 3] = [200.0, 40.0, 40.0];
    const FIAT: [f64; 3] = [50.0, 160.0, 70.0];
    const OTHER: [(usize, [f64; 3]); 7] = [
        (COUPE, [230.0, 230.0, 225.0]),
        (SEDAN, [35.0, 35.0, 40.0]),
        (HATCHBACK, [225.0, 195.0, 40.0]),
        (VAN, [160.0, 165.0, 170.0]),
        (PICKUP, [230.0, 120.0, 30.0]),
        (LONG_TAIL, [125.0, 60.0, 165.0]),
        (COUPE, [40.0, 165.0, 175.0]),
    ];
    let (kind, base) = match class.index() {
        0 => (SEDAN, VW),
        1 => (LONG_TAIL, RENAULT),
        2 => (SEDAN, FIAT),
        3 => (HATCHBACK, VW),
        4 => (BOXY, RENAULT),
        5 => (BOXY, FIAT),
        _ => OTHER[rng.random_range(0..OTHER.len())],
    };
    (kind, base.map(|v| (v + rng.random_range(-30.0..30.0)).clamp(0.0, 255.0)))
}

fn to_rgb(c: [f64; 3], scale: f64) -> Rgb<u8> {
    Rgb(c.map(|v| (v * scale).clamp(0.0, 255.0) as u8))
}

fn draw_vehicle(img: &mut RgbImage, kind: usize, paint: [f64; 3], (x0, y0, w, h): (f64, f64, f64, f64), facing_left: bool) {
    let s = silhouette(kind);
    let map = |(u, v): Point| {
        let u = if facing_left { 1.0 - u } else { u };
        (x0 + u * w, y0 + v * h)
    };
    let poly = |pts: &[Point]| pts.iter().map(|&p| map(p)).collect::<Vec<_>>();
    let body = to_rgb(paint, 1.0);
    let dark = Rgb([25, 25, 30]);
    fill_polygon(img, &poly(&s.cabin), body);
    let window = to_rgb([170.0, 200.0, 225.0], 1.0);
    let [a, b, c, d] = s.cabin;
    let inset = |p: Point, q: Point, t: f64| (p.0 + (q.0 - p.0) * t, p.1 + (q.1 - p.1) * t);
    let glass = [inset(a, c, 0.12), inset(b, d, 0.12), inset(c, a, 0.12), inset(d, b, 0.12)];
    let pillar = (glass[0].0 + glass[3].0) / 2.0;
    fill_polygon(img, &poly(&glass), window);
    fill_polygon(img, &poly(&rect(pillar - 0.012, 0.0, pillar + 0.012, s.body_top)), body);
    fill_polygon(img, &poly(&[(0.0, s.hood), (0.5, s.body_top), (1.0, s.deck), (1.0, s.body_bottom), (0.0, s.body_bottom)]), body);
    fill_polygon(img, &poly(&rect(0.05, s.body_top, 0.95, s.body_bottom)), body);
    if s.stripe {
        fill_polygon(img, &poly(&rect(0.02, 0.55, 0.98, 0.7)), Rgb([240, 240, 240]));
    }
    fill_polygon(img, &poly(&rect(0.0, s.hood + 0.02, 0.04, s.hood + 0.1)), Rgb([255, 230, 120]));
    for &cx in &s.wheels {
        let (px, py) = map((cx, 1.0 - s.wheel_radius));
        fill_ellipse(img, (px, py), s.wheel_radius * h, s.wheel_radius * h, dark);
        fill_ellipse(img, (px, py), s.wheel_radius * h * 0.45, s.wheel_radius * h * 0.45, Rgb([150, 150, 155]));
    }
}

fn desaturate(c: [f64; 3], saturation: f64) -> [f64; 3] {
    let gray = (c[0] + c[1] + c[2]) / 3.0;
    c.map(|v| gray + (v - gray) * saturation)
}

fn draw_background(img: &mut RgbImage, rng: &mut impl Rng, clutter: usize, saturation: f64) {
    let (w, h) = img.dimensions();
    let top = desaturate(std::array::from_fn(|_| rng.random_range(60.0..230.0)), saturation);
    let bottom = desaturate(std::array::from_fn(|_| rng.random_range(30.0..180.0)), saturation);
    for y in 0..h {
        let t = y as f64 / h as f64;
        let c: [f64; 3] = std::array::from_fn(|k| top[k] * (1.0 - t) + bottom[k] * t);
        for x in 0..w {
            img.put_pixel(x, y, to_rgb(c, 1.0));
        }
    }
    let (wf, hf) = (w as f64, h as f64);
    for _ in 0..clutter {
        let color = to_rgb(desaturate(std::array::from_fn(|_| rng.random_range(0.0..255.0)), saturation), 1.0);
        let (cx, cy) = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
        let (rx, ry) = (rng.random_range(2.0..wf * 0.2), rng.random_range(2.0..hf * 0.2));
        match rng.random_range(0..4) {
            0 => fill_polygon(img, &rect(cx - rx, cy - ry, cx + rx, cy + ry), color),
            1 => fill_ellipse(img, (cx, cy), rx, ry, color),
            2 => fill_polygon(img, &[(cx, cy - ry), (cx + rx, cy + ry), (cx - rx, cy + ry)], color),
            _ => fill_polygon(img, &rect(0.0, cy, wf, cy + rng.random_range(1.0..3.0)), color),
        }
    }
}

fn random_plate(rng: &mut impl Rng) -> String {
    let letters: String = (0..3).map(|_| rng.random_range(b'A'..=b'Z') as char).collect();
    format!("{:02} {} {:03}", rng.random_range(1..82), letters, rng.random_range(0..1000))
}

/// Renders one scene; the same generator state always gives the same scene.
pub fn render_scene(class_id: ClassId, cfg: &SynthConfig, rng: &mut impl Rng) -> Scene {
    let width = rng.random_range(cfg.width.0..=cfg.width.1);
    let height = rng.random_range(cfg.height.0..=cfg.height.1);
    let mut image = RgbImage::new(width, height);
    let clutter = rng.random_range(cfg.clutter.0..=cfg.clutter.1);
    draw_background(&mut image, rng, clutter, cfg.background_saturation);
    let (kind, paint) = class_style(class_id, rng);
    let bw = (rng.random_range(cfg.car_width.0..=cfg.car_width.1) * width as f64).round().max(4.0);
    let (lo, hi) = silhouette(kind).aspect;
    let aspect = rng.random_range(lo..=hi);
    let bh = (bw * aspect).round().min(height as f64).max(2.0);
    let x0 = rng.random_range(0.0..=(width as f64 - bw)).floor();
    let y0 = rng.random_range(0.0..=(height as f64 - bh)).floor();
    draw_vehicle(&mut image, kind, paint, (x0, y0, bw, bh), rng.random_bool(0.5));
    for p in image.pixels_mut() {
        let n: i16 = rng.random_range(-6..=6);
        p.0 = p.0.map(|v| (v as i16 + n).clamp(0, 255) as u8);
    }
    let bbox = BoundingBox::pixel(x0, y0, x0 + bw, y0 + bh).expect("sprite has positive extent");
    Scene { image, class_id, bbox, plate: random_plate(rng) }
}

/// Generator for image `index` of `class`, independent of rendering order.
pub fn scene_rng(seed: u64, class: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    rng
}

/// `per_class` scenes of every class, class-major.
pub fn render_corpus(cfg: &SynthConfig) -> Vec<Scene> {
    (0..NUM_CLASSES)
        .flat_map(|c| (0..cfg.per_class).map(move |i| (c, i)))
        .map(|(c, i)| render_scene(ClassId::from_index(c).expect("class index"), cfg, &mut scene_rng(cfg.seed, c, i)))
        .collect()
}

/// Folder holding class `id` in a generated corpus.
pub fn class_folder(id: ClassId) -> String {
    format!("{}-{}", id.index(), id.label().model.to_lowercase())
}

/// Writes a corpus under `dir`: one folder per class, `manifest.csv` with
/// the exact sprite boxes, and `classes.json` mapping folders to class ids.
pub fn generate_corpus(dir: &Path, cfg: &SynthConfig) -> io::Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    let mut folders = Vec::new();
    for c in ClassId::all() {
        let folder = class_folder(c);
        fs::create_dir_all(dir.join(&folder))?;
        folders.push(serde_json::json!({ "folder": folder, "class_id": c.index() }));
        for i in 0..cfg.per_class {
            let scene = render_scene(c, cfg, &mut scene_rng(cfg.seed, c.index(), i));
            let rel = format!("{folder}/{i:05}.png");
            scene.image.save(dir.join(&rel)).map_err(io::Error::other)?;
            if cfg.plates {
                fs::write(dir.join(format!("{rel}.plate")), &scene.plate)?;
            }
            records.push(ImageRecord { image_path: rel, class_id: c, bbox: Some(scene.bbox), source: Source::Human, size: None });
        }
    }
    write_manifest(&records, &dir.join("manifest.csv"))?;
    fs::write(dir.join("classes.json"), serde_json::to_vec_pretty(&folders)?)?;
    DatasetManifest::new(records).map_err(io::Error::other)
}
