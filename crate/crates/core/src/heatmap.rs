//! Per-class attention heatmaps over slide thumbnails.
//!
//! Attention weights are min-max normalized over a slide's kept patches
//! (optionally after percentile clipping), painted through a fixed
//! blue-to-red colormap, and alpha-blended onto a thumbnail in which every
//! patch cell is a fixed square of pixels. Cells that were dropped by QC
//! stay untinted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureBag;
use crate::mil::{AttentionScores, MilModel, N_CLASSES};
use crate::raster::Rgb8Image;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    /// Blend factor of the colormap over the thumbnail.
    pub alpha: f64,
    /// Thumbnail pixels per patch cell.
    pub cell_px: usize,
    /// Percentile clipping applied before min-max normalization, only for
    /// bags with at least `clip_min_n` patches.
    pub clip_low_percentile: f64,
    pub clip_high_percentile: f64,
    pub clip_min_n: usize,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig {
            alpha: 0.5,
            cell_px: 8,
            clip_low_percentile: 1.0,
            clip_high_percentile: 99.0,
            clip_min_n: 100,
        }
    }
}

impl HeatmapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "heatmap alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        if self.cell_px == 0 {
            return Err(Error::Config("heatmap cell_px must be positive".into()));
        }
        if !(0.0..=100.0).contains(&self.clip_low_percentile)
            || !(0.0..=100.0).contains(&self.clip_high_percentile)
            || self.clip_high_percentile < self.clip_low_percentile
        {
            return Err(Error::Config("heatmap percentile range invalid".into()));
        }
        Ok(())
    }
}

/// Normalized attention values placed on the slide grid; dropped cells are
/// `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub slide_id: String,
    pub class_id: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub values: Vec<Option<f64>>,
    /// Raw score range before normalization, kept for the index CSV.
    pub min_raw: f64,
    pub max_raw: f64,
}

impl AttentionMap {
    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * self.grid_cols + col]
    }
}

/// Linear-interpolation percentile of a sorted slice, p in [0,100].
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Min-max normalize one class's attention over the kept patches and place
/// the values on the grid. Constant scores (and singletons) map to 0.5.
pub fn normalize_attention(
    slide_id: &str,
    class_id: usize,
    scores: &[f64],
    coords: &[(u32, u32)],
    grid_rows: usize,
    grid_cols: usize,
    cfg: &HeatmapConfig,
) -> Result<AttentionMap> {
    cfg.validate()?;
    if scores.is_empty() || scores.len() != coords.len() {
        return Err(Error::Shape {
            op: "normalize_attention",
            lhs: vec![scores.len()],
            rhs: vec![coords.len()],
        });
    }
    let min_raw = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_raw = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if scores.len() >= cfg.clip_min_n {
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite attention"));
        (
            percentile(&sorted, cfg.clip_low_percentile),
            percentile(&sorted, cfg.clip_high_percentile),
        )
    } else {
        (min_raw, max_raw)
    };
    let mut values = vec![None; grid_rows * grid_cols];
    for (&s, &(r, c)) in scores.iter().zip(coords) {
        let (r, c) = (r as usize, c as usize);
        if r >= grid_rows || c >= grid_cols {
            return Err(Error::Index {
                what: "attention coordinate",
                index: r.max(c),
                len: grid_rows.max(grid_cols),
            });
        }
        let v = if hi > lo {
            ((s - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.5
        };
        values[r * grid_cols + c] = Some(v);
    }
    Ok(AttentionMap {
        slide_id: slide_id.to_string(),
        class_id,
        grid_rows,
        grid_cols,
        values,
        min_raw,
        max_raw,
    })
}

/// Fixed blue-to-red colormap: red rises with the value, blue falls.
pub fn colormap(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(0.0, 1.0);
    ((255.0 * v).round() as u8, 0, (255.0 * (1.0 - v)).round() as u8)
}

/// Blend the map over a thumbnail whose cells are `cell_px` squares.
/// Untinted (dropped) cells keep their exact pixels.
pub fn render_overlay(
    thumbnail: &Rgb8Image,
    map: &AttentionMap,
    alpha: f64,
    cell_px: usize,
) -> Result<Rgb8Image> {
    if thumbnail.width() != map.grid_cols * cell_px || thumbnail.height() != map.grid_rows * cell_px
    {
        return Err(Error::Shape {
            op: "render_overlay",
            lhs: vec![thumbnail.width(), thumbnail.height()],
            rhs: vec![map.grid_cols * cell_px, map.grid_rows * cell_px],
        });
    }
    let mut out = thumbnail.clone();
    for row in 0..map.grid_rows {
        for col in 0..map.grid_cols {
            let Some(v) = map.value(row, col) else {
                continue;
            };
            let tint = colormap(v);
            for y in row * cell_px..(row + 1) * cell_px {
                for x in col * cell_px..(col + 1) * cell_px {
                    let (r, g, b) = out.pixel(x, y);
                    let blend = |base: u8, t: u8| -> u8 {
                        ((1.0 - alpha) * base as f64 + alpha * t as f64 + 0.5) as u8
                    };
                    out.set_pixel(x, y, (blend(r, tint.0), blend(g, tint.1), blend(b, tint.2)));
                }
            }
        }
    }
    Ok(out)
}

/// Downsample the slide's grid-covered region so every patch cell becomes
/// `cell_px` thumbnail pixels.
pub fn slide_thumbnail(
    slide: &Rgb8Image,
    grid_rows: usize,
    grid_cols: usize,
    patch_px: usize,
    cell_px: usize,
) -> Result<Rgb8Image> {
    if grid_rows * patch_px > slide.height() || grid_cols * patch_px > slide.width() {
        return Err(Error::Shape {
            op: "slide_thumbnail",
            lhs: vec![slide.width(), slide.height()],
            rhs: vec![grid_cols * patch_px, grid_rows * patch_px],
        });
    }
    // crop to the exact grid-covered region, then box-average
    let mut region = Rgb8Image::new(grid_cols * patch_px, grid_rows * patch_px);
    for y in 0..region.height() {
        for x in 0..region.width() {
            region.set_pixel(x, y, slide.pixel(x, y));
        }
    }
    region.box_downsample(grid_cols * cell_px, grid_rows * cell_px)
}

/// One row of the heatmap index CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapIndexRow {
    pub slide_id: String,
    pub class_id: usize,
    pub path: String,
    pub min_raw: f64,
    pub max_raw: f64,
}

/// Render and write both class heatmaps for one slide, named
/// `{slide_id}_class{c}.png`. Returns the index rows.
pub fn emit_class_pair(
    slide_id: &str,
    thumbnail: &Rgb8Image,
    model: &MilModel,
    bag: &FeatureBag,
    grid_rows: usize,
    grid_cols: usize,
    cfg: &HeatmapConfig,
    out_dir: &Path,
) -> Result<Vec<HeatmapIndexRow>> {
    let (_, scores) = model.attention_pool(bag)?;
    emit_class_pair_from_scores(
        slide_id, thumbnail, &scores, &bag.coords, grid_rows, grid_cols, cfg, out_dir,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn emit_class_pair_from_scores(
    slide_id: &str,
    thumbnail: &Rgb8Image,
    scores: &AttentionScores,
    coords: &[(u32, u32)],
    grid_rows: usize,
    grid_cols: usize,
    cfg: &HeatmapConfig,
    out_dir: &Path,
) -> Result<Vec<HeatmapIndexRow>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut rows = Vec::with_capacity(N_CLASSES);
    for class_id in 0..N_CLASSES {
        let map = normalize_attention(
            slide_id,
            class_id,
            &scores.per_class[class_id],
            coords,
            grid_rows,
            grid_cols,
            cfg,
        )?;
        let overlay = render_overlay(thumbnail, &map, cfg.alpha, cfg.cell_px)?;
        let file = format!("{slide_id}_class{class_id}.png");
        overlay.save_png(&out_dir.join(&file))?;
        rows.push(HeatmapIndexRow {
            slide_id: slide_id.to_string(),
            class_id,
            path: file,
            min_raw: map.min_raw,
            max_raw: map.max_raw,
        });
    }
    Ok(rows)
}

pub fn write_heatmap_index(rows: &[HeatmapIndexRow], path: &Path) -> Result<()> {
    let mut out = String::from("slide_id,class,path,min_raw,max_raw\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.slide_id, r.class_id, r.path, r.min_raw, r.max_raw
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Resolve a heatmap path from the index against the index's directory.
pub fn resolve_heatmap_path(index_path: &Path, row: &HeatmapIndexRow) -> PathBuf {
    index_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&row.path)
}
