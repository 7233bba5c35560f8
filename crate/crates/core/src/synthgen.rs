//! Synthetic slide corpus with planted ground truth.
//!
//! Each slide is a grid of patch-aligned cells: near-white background cells
//! and a connected blob of tissue cells. Tissue carries a low-frequency
//! blotched purple texture. On positive slides an exact, recorded subset of
//! tissue cells additionally carries a high-frequency two-tone checker whose
//! mean luminance matches normal tissue but whose chroma does not — so mean
//! intensity alone cannot find it, while a learned encoder can.
//!
//! Cell-aligned geometry keeps every downstream count exact: candidate tiles,
//! kept tiles, and planted marker cells can all be asserted without
//! tolerance.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{luminance, Rgb8Image};
use crate::rng::{stream, STAGE_SYNTH};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_slides: usize,
    /// Fraction of slides labeled positive.
    pub positive_fraction: f64,
    /// Slide side in pixels; must be a multiple of `patch_px`.
    pub slide_px: usize,
    /// Intended patch side in pixels.
    pub patch_px: usize,
    /// Fraction of a positive slide's tissue cells that carry the marker.
    pub marker_fraction: f64,
    /// Background gray level; pixels are drawn from this value +/- 5.
    pub background_intensity: u8,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_slides: 60,
            positive_fraction: 0.5,
            slide_px: 2240,
            patch_px: 224,
            marker_fraction: 0.2,
            background_intensity: 248,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_slides == 0 {
            return Err(Error::Config("n_slides must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config(format!(
                "positive_fraction must be in [0,1], got {}",
                self.positive_fraction
            )));
        }
        if self.patch_px == 0 || self.slide_px % self.patch_px != 0 {
            return Err(Error::Config(format!(
                "slide_px {} must be a multiple of patch_px {}",
                self.slide_px, self.patch_px
            )));
        }
        if !(self.marker_fraction > 0.0 && self.marker_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "marker_fraction must be in (0,1], got {}",
                self.marker_fraction
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.slide_px / self.patch_px
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub slide_id: String,
    /// Path relative to the manifest file's directory.
    pub path: String,
    pub label: u8,
}

/// The slide-level ground truth: one row per slide plus the planted-cell
/// bookkeeping used by oracle tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub rows: Vec<ManifestRow>,
}

impl SlideManifest {
    pub fn positive_count(&self) -> usize {
        self.rows.iter().filter(|r| r.label == 1).count()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
        w.write_record(["slide_id", "path", "label"])
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
        for r in &self.rows {
            w.write_record([r.slide_id.as_str(), r.path.as_str(), &r.label.to_string()])
                .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
        }
        w.flush()
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<SlideManifest> {
        if !path.exists() {
            return Err(Error::MissingDependency(path.to_path_buf()));
        }
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record
                .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
            let slide_id = record
                .get(0)
                .ok_or_else(|| Error::Config("manifest: missing slide_id".into()))?
                .to_string();
            let file = record
                .get(1)
                .ok_or_else(|| Error::Config("manifest: missing path".into()))?
                .to_string();
            let label: u8 = record
                .get(2)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("manifest: bad label for {slide_id}")))?;
            rows.push(ManifestRow {
                slide_id,
                path: file,
                label,
            });
        }
        Ok(SlideManifest { rows })
    }

    /// Resolve a row's image path against the manifest's directory.
    pub fn resolve(&self, manifest_path: &Path, row: &ManifestRow) -> PathBuf {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&row.path)
    }
}

/// Planted-cell bookkeeping for one slide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideCells {
    pub slide_id: String,
    pub label: u8,
    pub tissue_cells: Vec<(usize, usize)>,
    pub marker_cells: Vec<(usize, usize)>,
}

/// JSON sidecar next to the manifest: planted marker (and tissue) cell
/// coordinates per slide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MarkerSidecar {
    pub slides: Vec<SlideCells>,
}

impl MarkerSidecar {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_json(path: &Path) -> Result<MarkerSidecar> {
        if !path.exists() {
            return Err(Error::MissingDependency(path.to_path_buf()));
        }
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Format {
                offset: 0,
                detail: format!("{}: {e}", path.display()),
            }
        })
    }

    pub fn for_slide(&self, slide_id: &str) -> Option<&SlideCells> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }
}

// Texture tones. Tissue interpolates light->dark along a blotch field;
// the marker checker alternates two tones whose average luminance sits in
// the same range as tissue but whose chroma is shifted.
const TISSUE_LIGHT: (f64, f64, f64) = (205.0, 175.0, 210.0);
const TISSUE_DARK: (f64, f64, f64) = (135.0, 95.0, 150.0);
const MARKER_TONE_A: (u8, u8, u8) = (185, 130, 105);
const MARKER_TONE_B: (u8, u8, u8) = (105, 165, 185);
const MARKER_CHECKER_PX: usize = 6;
const BLOTCH_LATTICE: usize = 5;

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Grow a connected blob of `target` cells on a `side x side` grid.
fn grow_blob(side: usize, target: usize, rng: &mut impl Rng) -> BTreeSet<(usize, usize)> {
    let mut cells = BTreeSet::new();
    let start = (
        rng.random_range(side / 4..side - side / 4),
        rng.random_range(side / 4..side - side / 4),
    );
    let mut frontier = vec![start];
    while cells.len() < target && !frontier.is_empty() {
        let i = rng.random_range(0..frontier.len());
        let (r, c) = frontier.swap_remove(i);
        if !cells.insert((r, c)) {
            continue;
        }
        let mut neighbors = Vec::new();
        if r > 0 {
            neighbors.push((r - 1, c));
        }
        if r + 1 < side {
            neighbors.push((r + 1, c));
        }
        if c > 0 {
            neighbors.push((r, c - 1));
        }
        if c + 1 < side {
            neighbors.push((r, c + 1));
        }
        for n in neighbors {
            if !cells.contains(&n) {
                frontier.push(n);
            }
        }
    }
    cells
}

fn paint_background_cell(img: &mut Rgb8Image, r: usize, c: usize, side: usize, bg: u8, rng: &mut impl Rng) {
    let (x0, y0) = (c * side, r * side);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            let v = (bg as i32 + rng.random_range(-5..=5)).clamp(0, 255) as u8;
            img.set_pixel(x, y, (v, v, v));
        }
    }
}

fn paint_tissue_cell(img: &mut Rgb8Image, r: usize, c: usize, side: usize, rng: &mut impl Rng) {
    // low-frequency blotch: a coarse random lattice, bilinearly upsampled
    let l = BLOTCH_LATTICE;
    let mut lattice = vec![0f64; l * l];
    for v in lattice.iter_mut() {
        *v = rng.random::<f64>();
    }
    let (x0, y0) = (c * side, r * side);
    let step = (side - 1) as f64 / (l - 1) as f64;
    for y in 0..side {
        let gy = y as f64 / step;
        let iy = (gy.floor() as usize).min(l - 2);
        let fy = gy - iy as f64;
        for x in 0..side {
            let gx = x as f64 / step;
            let ix = (gx.floor() as usize).min(l - 2);
            let fx = gx - ix as f64;
            let v00 = lattice[iy * l + ix];
            let v01 = lattice[iy * l + ix + 1];
            let v10 = lattice[(iy + 1) * l + ix];
            let v11 = lattice[(iy + 1) * l + ix + 1];
            let v = v00 * (1.0 - fx) * (1.0 - fy)
                + v01 * fx * (1.0 - fy)
                + v10 * (1.0 - fx) * fy
                + v11 * fx * fy;
            let noise = rng.random_range(-4.0..=4.0);
            let rgb = (
                clamp_u8(TISSUE_LIGHT.0 + v * (TISSUE_DARK.0 - TISSUE_LIGHT.0) + noise),
                clamp_u8(TISSUE_LIGHT.1 + v * (TISSUE_DARK.1 - TISSUE_LIGHT.1) + noise),
                clamp_u8(TISSUE_LIGHT.2 + v * (TISSUE_DARK.2 - TISSUE_LIGHT.2) + noise),
            );
            img.set_pixel(x0 + x, y0 + y, rgb);
        }
    }
}

fn paint_marker_cell(img: &mut Rgb8Image, r: usize, c: usize, side: usize, rng: &mut impl Rng) {
    let (x0, y0) = (c * side, r * side);
    for y in 0..side {
        for x in 0..side {
            let block = (x / MARKER_CHECKER_PX + y / MARKER_CHECKER_PX) % 2;
            let tone = if block == 0 { MARKER_TONE_A } else { MARKER_TONE_B };
            let noise: i32 = rng.random_range(-3..=3);
            let rgb = (
                (tone.0 as i32 + noise).clamp(0, 255) as u8,
                (tone.1 as i32 + noise).clamp(0, 255) as u8,
                (tone.2 as i32 + noise).clamp(0, 255) as u8,
            );
            img.set_pixel(x0 + x, y0 + y, rgb);
        }
    }
}

/// Deterministic per-slide plan: label, tissue blob, marker subset.
fn plan_slide(spec: &SynthSpec, index: usize, label: u8) -> SlideCells {
    let mut rng = stream(spec.seed, &[STAGE_SYNTH, index as u64, 1]);
    let side = spec.grid_side();
    let total = side * side;
    let tissue_fraction = 0.5 + rng.random::<f64>() * 0.25;
    let target = ((total as f64 * tissue_fraction).round() as usize).clamp(1, total);
    let tissue: Vec<(usize, usize)> = grow_blob(side, target, &mut rng).into_iter().collect();
    let marker_cells = if label == 1 {
        let count = (spec.marker_fraction * tissue.len() as f64).round() as usize;
        let mut shuffled = tissue.clone();
        shuffled.shuffle(&mut rng);
        let mut chosen: Vec<(usize, usize)> = shuffled.into_iter().take(count).collect();
        chosen.sort_unstable();
        chosen
    } else {
        Vec::new()
    };
    SlideCells {
        slide_id: slide_id(index),
        label,
        tissue_cells: tissue,
        marker_cells,
    }
}

fn render_slide(spec: &SynthSpec, index: usize, plan: &SlideCells) -> Rgb8Image {
    let mut rng = stream(spec.seed, &[STAGE_SYNTH, index as u64, 2]);
    let side = spec.grid_side();
    let px = spec.patch_px;
    let tissue: BTreeSet<_> = plan.tissue_cells.iter().copied().collect();
    let markers: BTreeSet<_> = plan.marker_cells.iter().copied().collect();
    let mut img = Rgb8Image::new(spec.slide_px, spec.slide_px);
    for r in 0..side {
        for c in 0..side {
            if markers.contains(&(r, c)) {
                paint_marker_cell(&mut img, r, c, px, &mut rng);
            } else if tissue.contains(&(r, c)) {
                paint_tissue_cell(&mut img, r, c, px, &mut rng);
            } else {
                paint_background_cell(&mut img, r, c, px, spec.background_intensity, &mut rng);
            }
        }
    }
    img
}

pub fn slide_id(index: usize) -> String {
    format!("s{index:04}")
}

/// Generate the corpus under `out_dir`: slide PNGs in `slides/`, the
/// manifest CSV, and the planted-cell JSON sidecar. Returns the manifest
/// and sidecar. Slides render in parallel; every random draw is keyed by
/// (seed, slide index), so the output is identical at any thread count.
pub fn generate_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<(SlideManifest, MarkerSidecar)> {
    spec.validate()?;
    let slides_dir = out_dir.join("slides");
    std::fs::create_dir_all(&slides_dir)
        .map_err(|e| Error::io(slides_dir.display().to_string(), e))?;

    let n_pos = (spec.positive_fraction * spec.n_slides as f64).round() as usize;
    let mut labels = vec![0u8; spec.n_slides];
    for l in labels.iter_mut().take(n_pos) {
        *l = 1;
    }
    labels.shuffle(&mut stream(spec.seed, &[STAGE_SYNTH, u64::MAX]));

    let plans: Vec<SlideCells> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| plan_slide(spec, i, label))
        .collect();

    plans
        .par_iter()
        .enumerate()
        .map(|(i, plan)| {
            let img = render_slide(spec, i, plan);
            img.save_png(&slides_dir.join(format!("{}.png", plan.slide_id)))
        })
        .collect::<Result<Vec<()>>>()?;

    let rows: Vec<ManifestRow> = plans
        .iter()
        .map(|p| ManifestRow {
            slide_id: p.slide_id.clone(),
            path: format!("slides/{}.png", p.slide_id),
            label: p.label,
        })
        .collect();
    let manifest = SlideManifest { rows };
    let sidecar = MarkerSidecar { slides: plans };
    manifest.save_csv(&out_dir.join("manifest.csv"))?;
    sidecar.save_json(&out_dir.join("markers.json"))?;
    Ok((manifest, sidecar))
}

/// Aggregates for test assertions: label counts and per-slide tissue
/// fraction. Tissue here is the fixed stats convention "luminance below
/// 235" (the lower edge of the default near-white band); Otsu would be
/// unstable on tissueless slides.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub per_label: std::collections::BTreeMap<u8, usize>,
    pub tissue_fraction: Vec<(String, f64)>,
}

pub fn corpus_stats(manifest: &SlideManifest, manifest_path: &Path) -> Result<CorpusStats> {
    let mut per_label = std::collections::BTreeMap::new();
    let mut tissue_fraction = Vec::new();
    for row in &manifest.rows {
        *per_label.entry(row.label).or_insert(0) += 1;
        let img_path = manifest.resolve(manifest_path, row);
        if !img_path.exists() {
            return Err(Error::io(
                format!("slide {} at {}", row.slide_id, img_path.display()),
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing slide image"),
            ));
        }
        let img = Rgb8Image::load_png(&img_path)?;
        let mut dark = 0usize;
        for px in img.data().chunks_exact(3) {
            if luminance(px[0], px[1], px[2]) < 235 {
                dark += 1;
            }
        }
        tissue_fraction.push((
            row.slide_id.clone(),
            dark as f64 / (img.width() * img.height()) as f64,
        ));
    }
    Ok(CorpusStats {
        per_label,
        tissue_fraction,
    })
}
