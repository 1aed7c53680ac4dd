//! Seeded synthetic scenes: noisy backgrounds with filled shapes of four
//! classes and a controllable share of small objects.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruthBox};
use crate::dota::{self, DotaRecord};
use crate::imageio::{GrayImage, ImageError};

pub const CLASS_NAMES: [&str; 4] = ["rectangle", "ellipse", "cross", "dim-rectangle"];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Dota(#[from] dota::DotaError),
    #[error("dataset: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Target areas are log-uniform in `[min_area, max_area]`.
    pub min_area: f64,
    pub max_area: f64,
    /// Share of objects whose box area is below `small_area_cut`.
    pub small_fraction: f64,
    pub small_area_cut: f64,
    pub background: f64,
    pub noise_std: f64,
    /// Largest allowed intersection over the smaller box.
    pub max_overlap: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            min_objects: 2,
            max_objects: 6,
            min_area: 16.0,
            max_area: 1600.0,
            small_fraction: 0.3,
            small_area_cut: 128.0,
            background: 0.2,
            noise_std: 0.04,
            max_overlap: 0.3,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::Spec(m.into()));
        if self.image_size < 8 {
            return fail("image_size must be at least 8");
        }
        if self.min_objects > self.max_objects {
            return fail("min_objects exceeds max_objects");
        }
        if !(self.min_area >= 4.0) || !(self.max_area >= self.min_area) {
            return fail("need 4 <= min_area <= max_area");
        }
        if !(0.0..=1.0).contains(&self.small_fraction) || !(0.0..=1.0).contains(&self.max_overlap) {
            return fail("fractions must lie in [0, 1]");
        }
        if self.small_fraction > 0.0 && self.small_area_cut <= self.min_area {
            return fail("small_area_cut must exceed min_area when small objects are requested");
        }
        if self.small_fraction < 1.0 && self.small_area_cut > self.max_area {
            return fail("small_area_cut must not exceed max_area when large objects are requested");
        }
        if !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.background) {
            return fail("background must lie in [0, 1] and noise_std be non-negative");
        }
        Ok(())
    }
}

/// One rendered scene with tight pixel boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: GrayImage,
    pub gts: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    Cross,
}

fn class_style(class: u32) -> (Shape, f64) {
    match class {
        1 => (Shape::Rect, 0.9),
        2 => (Shape::Ellipse, 0.9),
        3 => (Shape::Cross, 0.9),
        _ => (Shape::Rect, 0.55),
    }
}

/// Pixel mask of a shape with target area `area`, aspect `ratio` (h/w),
/// centred at `(cx, cy)`. Pixels are tested at their centres.
fn rasterize(shape: Shape, area: f64, ratio: f64, cx: f64, cy: f64, size: usize) -> Vec<(usize, usize)> {
    let (hw, hh) = match shape {
        Shape::Rect => ((area / ratio).sqrt() / 2.0, (area * ratio).sqrt() / 2.0),
        Shape::Ellipse => ((area / (std::f64::consts::PI * ratio)).sqrt(), (area * ratio / std::f64::consts::PI).sqrt()),
        // plus sign with bar thickness s/3 covers 5/9 of its s x s box
        Shape::Cross => {
            let s = (9.0 * area / 5.0).sqrt();
            (s / 2.0, s / 2.0)
        }
    };
    let x_lo = (cx - hw - 1.0).floor().max(0.0) as usize;
    let y_lo = (cy - hh - 1.0).floor().max(0.0) as usize;
    let x_hi = ((cx + hw + 1.0).ceil() as usize).min(size);
    let y_hi = ((cy + hh + 1.0).ceil() as usize).min(size);
    let mut out = Vec::new();
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match shape {
                Shape::Rect => dx.abs() < hw && dy.abs() < hh,
                Shape::Ellipse => (dx / hw).powi(2) + (dy / hh).powi(2) < 1.0,
                Shape::Cross => {
                    let t = hw / 3.0;
                    (dx.abs() < t && dy.abs() < hh) || (dy.abs() < t && dx.abs() < hw)
                }
            };
            if inside {
                out.push((x, y));
            }
        }
    }
    out
}

fn tight_box(mask: &[(usize, usize)]) -> BBox {
    let x0 = mask.iter().map(|p| p.0).min().unwrap_or(0);
    let y0 = mask.iter().map(|p| p.1).min().unwrap_or(0);
    let x1 = mask.iter().map(|p| p.0).max().unwrap_or(0) + 1;
    let y1 = mask.iter().map(|p| p.1).max().unwrap_or(0) + 1;
    BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

const PLACEMENT_TRIES: usize = 60;
/// Rendered pixel count must be within this share of the target area.
pub const AREA_TOLERANCE: f64 = 0.15;

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Renders scene `index` of the dataset defined by `spec`.
pub fn render_scene(spec: &SceneSpec, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let size = spec.image_size;
    let noise = Normal::new(0.0, spec.noise_std).expect("non-negative std");
    let mut canvas: Vec<f64> = (0..size * size).map(|_| spec.background + noise.sample(&mut rng)).collect();
    let mut occupied = vec![false; size * size];
    let mut gts: Vec<GroundTruthBox> = Vec::new();
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    for _ in 0..count {
        let class = rng.random_range(1..=CLASS_NAMES.len() as u32);
        let (shape, intensity) = class_style(class);
        let small = rng.random_bool(spec.small_fraction);
        for _ in 0..PLACEMENT_TRIES {
            let area = if small {
                log_uniform(&mut rng, spec.min_area, spec.small_area_cut.min(spec.max_area))
            } else {
                log_uniform(&mut rng, spec.small_area_cut.max(spec.min_area), spec.max_area)
            };
            let ratio = log_uniform(&mut rng, 0.5, 2.0);
            let cx = rng.random_range(0.0..size as f64);
            let cy = rng.random_range(0.0..size as f64);
            let mask = rasterize(shape, area, ratio, cx, cy, size);
            if mask.is_empty() || (mask.len() as f64 - area).abs() > AREA_TOLERANCE * area {
                continue;
            }
            let bbox = tight_box(&mask);
            // clipped at the border or on the wrong side of the cut
            let clipped = bbox.x0 == 0.0 || bbox.y0 == 0.0 || bbox.x1 == size as f64 || bbox.y1 == size as f64;
            if clipped || (bbox.area() < spec.small_area_cut) != small {
                continue;
            }
            if mask.iter().any(|&(x, y)| occupied[y * size + x]) {
                continue;
            }
            if gts.iter().any(|g| g.bbox.intersection(&bbox) > spec.max_overlap * g.bbox.area().min(bbox.area())) {
                continue;
            }
            for &(x, y) in &mask {
                occupied[y * size + x] = true;
                canvas[y * size + x] = intensity + noise.sample(&mut rng);
            }
            gts.push(GroundTruthBox { bbox, class });
            break;
        }
    }
    let pixels = canvas.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Scene {
        image: GrayImage {
            width: size,
            height: size,
            pixels,
        },
        gts,
    }
}

/// Scenes `start..start + n`.
pub fn generate_range(spec: &SceneSpec, start: usize, n: usize) -> Vec<Scene> {
    (start..start + n).map(|i| render_scene(spec, i as u64)).collect()
}

pub fn generate(spec: &SceneSpec, n: usize) -> Vec<Scene> {
    generate_range(spec, 0, n)
}

/// Split membership of an exported dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn to_records(gts: &[GroundTruthBox]) -> Vec<DotaRecord> {
    gts.iter()
        .map(|g| {
            let b = g.bbox;
            DotaRecord {
                quad: [b.x0, b.y0, b.x1, b.y0, b.x1, b.y1, b.x0, b.y1],
                category: CLASS_NAMES[g.class as usize - 1].to_string(),
                difficult: 0,
            }
        })
        .collect()
}

/// Writes `images/NNNN.pgm`, `labelTxt/NNNN.txt`, `manifest.txt` (name and
/// split per line) and `classes.txt`.
pub fn export(scenes: &[(Scene, Split)], dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labelTxt"))?;
    let mut manifest = String::new();
    for (i, (scene, split)) in scenes.iter().enumerate() {
        let name = format!("{i:04}");
        scene.image.write(&dir.join("images").join(format!("{name}.pgm")))?;
        let text = format!("imagesource:synthetic\ngsd:null\n{}", dota::serialize(&to_records(&scene.gts)));
        std::fs::write(dir.join("labelTxt").join(format!("{name}.txt")), text)?;
        let _ = writeln!(manifest, "{name} {}", split.as_str());
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    std::fs::write(dir.join("classes.txt"), CLASS_NAMES.join("\n") + "\n")?;
    Ok(())
}

/// Reads a directory written by [`export`].
pub fn load_dataset(dir: &Path) -> Result<Vec<(Scene, Split)>, SynthError> {
    let classes: Vec<String> = std::fs::read_to_string(dir.join("classes.txt"))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut out = Vec::new();
    for (n, line) in manifest.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let (Some(name), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(SynthError::Layout(format!("manifest line {}: `{line}`", n + 1)));
        };
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(SynthError::Layout(format!("manifest line {}: unknown split `{other}`", n + 1))),
        };
        let image = GrayImage::read(&dir.join("images").join(format!("{name}.pgm")))?;
        let text = std::fs::read_to_string(dir.join("labelTxt").join(format!("{name}.txt")))?;
        let mut gts = Vec::new();
        for r in dota::parse_annotation(&text)? {
            let class = classes
                .iter()
                .position(|c| *c == r.category)
                .ok_or_else(|| SynthError::Layout(format!("{name}: unknown category `{}`", r.category)))?;
            gts.push(GroundTruthBox {
                bbox: dota::quad_to_hbb(&r),
                class: class as u32 + 1,
            });
        }
        out.push((Scene { image, gts }, split));
    }
    Ok(out)
}
