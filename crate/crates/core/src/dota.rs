//! DOTA `labelTxt` annotations and patch tiling of large images.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruthBox};
use crate::imageio::GrayImage;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DotaError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid patch config: {0}")]
    Patch(String),
}

/// One annotated object: four corners, category, difficulty flag.
#[derive(Debug, Clone, PartialEq)]
pub struct DotaRecord {
    pub quad: [f64; 8],
    pub category: String,
    pub difficult: u8,
}

fn is_metadata(line: &str) -> bool {
    line.starts_with("imagesource:") || line.starts_with("gsd:")
}

fn parse_line(line: &str) -> Result<DotaRecord, String> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if !(9..=10).contains(&tokens.len()) {
        return Err(format!("expected 8 coordinates, a category and an optional flag, got {} fields", tokens.len()));
    }
    let mut quad = [0.0; 8];
    for (i, t) in tokens[..8].iter().enumerate() {
        let v: f64 = t.parse().map_err(|_| format!("coordinate {} is not a number: `{t}`", i + 1))?;
        if !v.is_finite() {
            return Err(format!("coordinate {} is not finite", i + 1));
        }
        quad[i] = v;
    }
    let difficult = match tokens.get(9) {
        None => 0,
        Some(&"0") => 0,
        Some(&"1") => 1,
        Some(other) => return Err(format!("difficult flag must be 0 or 1, got `{other}`")),
    };
    Ok(DotaRecord {
        quad,
        category: tokens[8].to_string(),
        difficult,
    })
}

/// Strict parse: the first malformed line is an error.
pub fn parse_annotation(text: &str) -> Result<Vec<DotaRecord>, DotaError> {
    let (records, errors) = parse_annotation_lenient(text);
    match errors.into_iter().next() {
        Some((line, msg)) => Err(DotaError::Parse { line, msg }),
        None => Ok(records),
    }
}

/// Keeps every well-formed line and reports the others with 1-based line
/// numbers.
pub fn parse_annotation_lenient(text: &str) -> (Vec<DotaRecord>, Vec<(usize, String)>) {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || is_metadata(line) {
            continue;
        }
        match parse_line(line) {
            Ok(r) => records.push(r),
            Err(msg) => errors.push((i + 1, msg)),
        }
    }
    (records, errors)
}

/// One line per record, coordinates in shortest round-trip form.
pub fn serialize(records: &[DotaRecord]) -> String {
    let mut out = String::new();
    for r in records {
        for v in r.quad {
            let _ = write!(out, "{v:?} ");
        }
        let _ = writeln!(out, "{} {}", r.category, r.difficult);
    }
    out
}

/// Axis-aligned hull of the four corners.
pub fn quad_to_hbb(r: &DotaRecord) -> BBox {
    let xs = [r.quad[0], r.quad[2], r.quad[4], r.quad[6]];
    let ys = [r.quad[1], r.quad[3], r.quad[5], r.quad[7]];
    let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
    let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    BBox::new(min(xs), min(ys), max(xs), max(ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub stride: usize,
    /// Clipped boxes keeping less than this share of their area are dropped.
    pub min_kept_fraction: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_size: 1024,
            stride: 824,
            min_kept_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    pub patch_size: usize,
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
}

impl PatchPlan {
    /// Patch origins, row by row.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        self.ys.iter().flat_map(|&y| self.xs.iter().map(move |&x| (x, y))).collect()
    }
}

/// `0, stride, 2*stride, ...` with the last origin clamped to `dim - patch`.
fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let last = dim - patch;
    let mut out = Vec::new();
    let mut o = 0;
    while o < last {
        out.push(o);
        o += stride;
    }
    out.push(last);
    out
}

pub fn plan_patches(width: usize, height: usize, cfg: &PatchConfig) -> Result<PatchPlan, DotaError> {
    if cfg.patch_size == 0 || cfg.stride == 0 || cfg.stride > cfg.patch_size {
        return Err(DotaError::Patch(format!("need 0 < stride <= patch, got {} / {}", cfg.stride, cfg.patch_size)));
    }
    Ok(PatchPlan {
        patch_size: cfg.patch_size,
        xs: axis_origins(width, cfg.patch_size, cfg.stride),
        ys: axis_origins(height, cfg.patch_size, cfg.stride),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub x0: usize,
    pub y0: usize,
    pub image: GrayImage,
    /// Boxes clipped to the patch, in patch coordinates.
    pub gts: Vec<GroundTruthBox>,
}

/// Boxes of `gts` clipped to the window and shifted into its frame.
pub fn clip_to_window(gts: &[GroundTruthBox], window: &BBox, min_kept_fraction: f64) -> Vec<GroundTruthBox> {
    gts.iter()
        .filter_map(|g| {
            let clipped = g.bbox.clip(window)?;
            (clipped.area() >= min_kept_fraction * g.bbox.area()).then(|| GroundTruthBox {
                bbox: clipped.translate(-window.x0, -window.y0),
                class: g.class,
            })
        })
        .collect()
}

pub fn crop(image: &GrayImage, gts: &[GroundTruthBox], plan: &PatchPlan, cfg: &PatchConfig) -> Vec<Patch> {
    plan.origins()
        .into_iter()
        .map(|(x0, y0)| {
            let patch = image.crop(x0, y0, plan.patch_size, plan.patch_size);
            let window = BBox::new(x0 as f64, y0 as f64, (x0 + patch.width) as f64, (y0 + patch.height) as f64);
            Patch {
                x0,
                y0,
                gts: clip_to_window(gts, &window, cfg.min_kept_fraction),
                image: patch,
            }
        })
        .collect()
}
