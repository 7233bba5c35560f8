//! Tissue segmentation and patch tiling.
//!
//! A slide becomes a luminance histogram, the histogram an Otsu threshold,
//! the threshold a tissue mask, and the mask a grid of non-overlapping
//! square patches filtered by three quality rules: a near-white exclusion
//! band on the mean RGB intensity, a minimum tissue fraction, and a minimum
//! per-channel median.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Rgb8Image;

/// 256-bin histogram over 8-bit luminance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayHistogram {
    bins: [u64; 256],
}

impl GrayHistogram {
    pub fn new() -> Self {
        GrayHistogram { bins: [0; 256] }
    }

    pub fn from_counts(bins: [u64; 256]) -> Self {
        GrayHistogram { bins }
    }

    pub fn from_image(img: &Rgb8Image) -> Self {
        let mut h = GrayHistogram::new();
        for y in 0..img.height() {
            for x in 0..img.width() {
                h.bins[img.luma(x, y) as usize] += 1;
            }
        }
        h
    }

    pub fn bins(&self) -> &[u64; 256] {
        &self.bins
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }
}

impl Default for GrayHistogram {
    fn default() -> Self {
        Self::new()
    }
}

/// Exact comparison of `p1/q1` vs `p2/q2` by mutual Euclidean descent;
/// avoids wide intermediate products entirely.
fn cmp_frac(mut p1: u128, mut q1: u128, mut p2: u128, mut q2: u128) -> Ordering {
    loop {
        let d1 = p1 / q1;
        let d2 = p2 / q2;
        if d1 != d2 {
            return d1.cmp(&d2);
        }
        p1 -= d1 * q1;
        p2 -= d2 * q2;
        match (p1 == 0, p2 == 0) {
            (true, true) => return Ordering::Equal,
            (true, false) => return Ordering::Less,
            (false, true) => return Ordering::Greater,
            (false, false) => {}
        }
        // both remainders are proper fractions; compare reciprocals, flipped
        std::mem::swap(&mut p1, &mut q1);
        std::mem::swap(&mut p2, &mut q2);
        std::mem::swap(&mut p1, &mut p2);
        std::mem::swap(&mut q1, &mut q2);
    }
}

/// Otsu's threshold: the split `[0..t]` / `[t+1..255]` maximizing the
/// between-class variance `w0*w1*(mu0-mu1)^2`. The variance ordering is
/// decided in exact integer arithmetic, so ties are ties by mathematics and
/// a plateau of maximizers is returned as its midpoint (rounded down).
pub fn otsu_threshold(hist: &GrayHistogram) -> Result<u8> {
    let nonzero = hist.bins.iter().filter(|&&c| c > 0).count();
    if nonzero <= 1 {
        return Err(Error::DegenerateHistogram);
    }
    let total: u128 = hist.total() as u128;
    let weighted_total: u128 = hist
        .bins
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();

    // between-class variance at split t, up to the constant factor N^2:
    // (s0*w1 - s1*w0)^2 / (w0*w1)
    let mut best: Option<(u128, u128)> = None;
    let mut plateau: Vec<u8> = Vec::new();
    let mut w0: u128 = 0;
    let mut s0: u128 = 0;
    for t in 0..=254u8 {
        w0 += hist.bins[t as usize] as u128;
        s0 += t as u128 * hist.bins[t as usize] as u128;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let s1 = weighted_total - s0;
        let a = (s0 * w1).abs_diff(s1 * w0);
        let p = a
            .checked_mul(a)
            .ok_or_else(|| Error::Numeric("otsu: histogram mass too large".into()))?;
        let q = w0 * w1;
        match &best {
            None => {
                best = Some((p, q));
                plateau.push(t);
            }
            Some((bp, bq)) => match cmp_frac(p, q, *bp, *bq) {
                Ordering::Greater => {
                    best = Some((p, q));
                    plateau.clear();
                    plateau.push(t);
                }
                Ordering::Equal => plateau.push(t),
                Ordering::Less => {}
            },
        }
    }
    let first = *plateau.first().expect("multi-bin histogram has a split") as u16;
    let last = *plateau.last().expect("plateau nonempty") as u16;
    Ok(((first + last) / 2) as u8)
}

/// Binary tissue mask over a slide.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    width: usize,
    height: usize,
    tissue: Vec<bool>,
}

impl TissueMask {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn is_tissue(&self, x: usize, y: usize) -> bool {
        self.tissue[y * self.width + x]
    }

    pub fn tissue_count(&self) -> usize {
        self.tissue.iter().filter(|&&b| b).count()
    }

    pub fn tissue_fraction(&self) -> f64 {
        self.tissue_count() as f64 / (self.width * self.height) as f64
    }

    /// Fraction of tissue pixels inside one grid tile.
    pub fn tile_fraction(&self, row: usize, col: usize, side: usize) -> f64 {
        let (x0, y0) = (col * side, row * side);
        let mut n = 0usize;
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                if self.tissue[y * self.width + x] {
                    n += 1;
                }
            }
        }
        n as f64 / (side * side) as f64
    }
}

/// Mark a pixel tissue iff its luminance is strictly below `t`; stained
/// tissue is darker than the near-white background.
pub fn tissue_mask(slide: &Rgb8Image, t: u8) -> TissueMask {
    let mut tissue = vec![false; slide.width() * slide.height()];
    for y in 0..slide.height() {
        for x in 0..slide.width() {
            tissue[y * slide.width() + x] = slide.luma(x, y) < t;
        }
    }
    TissueMask {
        width: slide.width(),
        height: slide.height(),
        tissue,
    }
}

/// Physical patch geometry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicronsConfig {
    /// Physical patch side in microns.
    pub patch_microns: f64,
    /// Scanner resolution in microns per pixel.
    pub microns_per_pixel: f64,
}

impl Default for MicronsConfig {
    fn default() -> Self {
        MicronsConfig {
            patch_microns: 360.0,
            microns_per_pixel: 0.25,
        }
    }
}

impl MicronsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.patch_microns > 0.0) || !(self.microns_per_pixel > 0.0) {
            return Err(Error::Config(format!(
                "microns config must be positive: patch {} um at {} um/px",
                self.patch_microns, self.microns_per_pixel
            )));
        }
        Ok(())
    }
}

/// Source-pixel patch side: `round(patch_microns / microns_per_pixel)`.
pub fn patch_side_pixels(cfg: &MicronsConfig) -> usize {
    (cfg.patch_microns / cfg.microns_per_pixel).round() as usize
}

/// Patch quality thresholds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcThresholds {
    /// Minimum per-channel median; darker tiles are dropped.
    pub min_channel_median: u8,
    /// Center of the near-white exclusion band on the mean RGB intensity.
    pub white_mean_center: u8,
    /// Halfwidth of the near-white band; means in the band or above are dropped.
    pub white_mean_halfwidth: u8,
    /// Minimum fraction of tissue pixels per tile.
    pub min_tissue_fraction: f64,
}

impl Default for QcThresholds {
    fn default() -> Self {
        QcThresholds {
            min_channel_median: 20,
            white_mean_center: 245,
            white_mean_halfwidth: 10,
            min_tissue_fraction: 0.5,
        }
    }
}

impl QcThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_tissue_fraction) {
            return Err(Error::Config(format!(
                "min_tissue_fraction must be in [0,1], got {}",
                self.min_tissue_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Mean RGB intensity inside or above the near-white band.
    NearWhite,
    /// Tissue fraction below the minimum.
    LowTissue,
    /// Some channel median below the minimum.
    DarkChannel,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::NearWhite => "near_white",
            DropReason::LowTissue => "low_tissue",
            DropReason::DarkChannel => "dark_channel",
        }
    }

    pub fn parse(s: &str) -> Option<DropReason> {
        match s {
            "near_white" => Some(DropReason::NearWhite),
            "low_tissue" => Some(DropReason::LowTissue),
            "dark_channel" => Some(DropReason::DarkChannel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRecord {
    pub row: usize,
    pub col: usize,
    pub kept: bool,
    pub drop_reason: Option<DropReason>,
}

/// The tiling of one slide: row-major candidate tiles with their QC verdicts.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub slide_id: String,
    pub patch_px_source: usize,
    pub output_px: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub records: Vec<PatchRecord>,
}

impl PatchGrid {
    pub fn kept(&self) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(|r| r.kept)
    }

    pub fn kept_count(&self) -> usize {
        self.records.iter().filter(|r| r.kept).count()
    }
}

/// QC verdict for one tile. Rules are checked in a fixed order so the
/// recorded reason is stable: near-white, then tissue fraction, then
/// channel medians.
fn qc_tile(tile: &Rgb8Image, tissue_fraction: f64, qc: &QcThresholds) -> Option<DropReason> {
    let n = tile.width() * tile.height();
    let mut channel_hists = [[0u32; 256]; 3];
    let mut sum: u64 = 0;
    for v in tile.data().chunks_exact(3) {
        channel_hists[0][v[0] as usize] += 1;
        channel_hists[1][v[1] as usize] += 1;
        channel_hists[2][v[2] as usize] += 1;
        sum += v[0] as u64 + v[1] as u64 + v[2] as u64;
    }
    let mean = sum as f64 / (3 * n) as f64;
    if mean >= qc.white_mean_center as f64 - qc.white_mean_halfwidth as f64 {
        return Some(DropReason::NearWhite);
    }
    if tissue_fraction < qc.min_tissue_fraction {
        return Some(DropReason::LowTissue);
    }
    let half = (n as u32).div_ceil(2);
    for hist in &channel_hists {
        let mut acc = 0u32;
        let mut median = 0u8;
        for (v, &c) in hist.iter().enumerate() {
            acc += c;
            if acc >= half {
                median = v as u8;
                break;
            }
        }
        if median < qc.min_channel_median {
            return Some(DropReason::DarkChannel);
        }
    }
    None
}

/// Tile the slide from the origin with stride `patch_px_source`, discarding
/// partial edge tiles, and apply QC to every candidate.
pub fn grid_patches(
    slide_id: &str,
    slide: &Rgb8Image,
    mask: &TissueMask,
    patch_px_source: usize,
    output_px: usize,
    qc: &QcThresholds,
) -> Result<PatchGrid> {
    qc.validate()?;
    if patch_px_source == 0 || patch_px_source > slide.width() || patch_px_source > slide.height()
    {
        return Err(Error::Shape {
            op: "grid_patches",
            lhs: vec![slide.width(), slide.height()],
            rhs: vec![patch_px_source],
        });
    }
    if mask.width() != slide.width() || mask.height() != slide.height() {
        return Err(Error::Shape {
            op: "grid_patches",
            lhs: vec![slide.width(), slide.height()],
            rhs: vec![mask.width(), mask.height()],
        });
    }
    let grid_rows = slide.height() / patch_px_source;
    let grid_cols = slide.width() / patch_px_source;
    let mut records = Vec::with_capacity(grid_rows * grid_cols);
    for row in 0..grid_rows {
        for col in 0..grid_cols {
            let tile = slide.tile(row, col, patch_px_source)?;
            let frac = mask.tile_fraction(row, col, patch_px_source);
            let drop_reason = qc_tile(&tile, frac, qc);
            records.push(PatchRecord {
                row,
                col,
                kept: drop_reason.is_none(),
                drop_reason,
            });
        }
    }
    Ok(PatchGrid {
        slide_id: slide_id.to_string(),
        patch_px_source,
        output_px,
        grid_rows,
        grid_cols,
        records,
    })
}

/// Bilinear resize of one extracted patch to `output_px`.
pub fn resize_patch(patch: &Rgb8Image, output_px: usize) -> Result<Rgb8Image> {
    patch.resize_square(output_px)
}

/// Write grids for many slides into one CSV: `slide_id,row,col,kept,drop_reason`.
pub fn write_grids_csv(grids: &[PatchGrid], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    w.write_record(["slide_id", "row", "col", "kept", "drop_reason"])
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    for grid in grids {
        for r in &grid.records {
            w.write_record([
                grid.slide_id.as_str(),
                &r.row.to_string(),
                &r.col.to_string(),
                if r.kept { "true" } else { "false" },
                r.drop_reason.map(|d| d.as_str()).unwrap_or(""),
            ])
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a grids CSV back, grouping rows by slide. Geometry fields are
/// restored from the arguments since the CSV carries only the verdicts.
pub fn read_grids_csv(
    path: &Path,
    patch_px_source: usize,
    output_px: usize,
) -> Result<Vec<PatchGrid>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    let mut grids: Vec<PatchGrid> = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
        let get = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::Config(format!("grid csv: missing column {i}")))
        };
        let slide_id = get(0)?.to_string();
        let row: usize = get(1)?
            .parse()
            .map_err(|_| Error::Config(format!("grid csv: bad row in {}", path.display())))?;
        let col: usize = get(2)?
            .parse()
            .map_err(|_| Error::Config(format!("grid csv: bad col in {}", path.display())))?;
        let kept = get(3)? == "true";
        let drop_reason = DropReason::parse(get(4)?);
        if grids.last().map(|g| g.slide_id.as_str()) != Some(slide_id.as_str()) {
            grids.push(PatchGrid {
                slide_id,
                patch_px_source,
                output_px,
                grid_rows: 0,
                grid_cols: 0,
                records: Vec::new(),
            });
        }
        let grid = grids.last_mut().expect("group exists");
        grid.grid_rows = grid.grid_rows.max(row + 1);
        grid.grid_cols = grid.grid_cols.max(col + 1);
        grid.records.push(PatchRecord {
            row,
            col,
            kept,
            drop_reason,
        });
    }
    Ok(grids)
}
