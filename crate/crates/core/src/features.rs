//! Per-slide feature bags and their on-disk format.
//!
//! A bag is the matrix of encoder features for every kept patch of one
//! slide, in row-major grid order, with the slide's weak label. On disk the
//! payload is `f32` (`WBAG` format below); in memory everything is `f64`.
//!
//! `WBAG` layout, all little-endian: magic `WBAG`, version `u16`, slide id
//! (`u16` length + bytes), label `u8`, `N u32`, `D u32`, then `N` coordinate
//! pairs (`u32` row, `u32` col), then `N*D` `f32` features.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::preprocess::{resize_patch, PatchGrid};
use crate::raster::Rgb8Image;
use crate::tensor::Tensor;

pub const BAG_MAGIC: [u8; 4] = *b"WBAG";
pub const BAG_VERSION: u16 = 1;

/// One slide's instance bag: `n x d` feature matrix plus patch coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub slide_id: String,
    pub label: u8,
    pub matrix: Tensor<f64>,
    pub coords: Vec<(u32, u32)>,
}

impl FeatureBag {
    pub fn n_patches(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }
}

/// Batch size for encoder inference during extraction.
const EXTRACT_CHUNK: usize = 64;

/// Run the query encoder over every kept patch of the slide, in row-major
/// grid order, with no augmentation. Rows come out unit-norm.
pub fn extract_features(
    encoder: &Encoder,
    query_params: &ParamSet<f64>,
    grid: &PatchGrid,
    slide: &Rgb8Image,
) -> Result<FeatureBag> {
    extract_features_labeled(encoder, query_params, grid, slide, 0)
}

pub fn extract_features_labeled(
    encoder: &Encoder,
    query_params: &ParamSet<f64>,
    grid: &PatchGrid,
    slide: &Rgb8Image,
    label: u8,
) -> Result<FeatureBag> {
    let kept: Vec<(usize, usize)> = grid.kept().map(|r| (r.row, r.col)).collect();
    if kept.is_empty() {
        return Err(Error::Dataset(format!(
            "slide {}: no kept patches to extract",
            grid.slide_id
        )));
    }
    let d = encoder.config().feature_dim;
    let mut data = Vec::with_capacity(kept.len() * d);
    for chunk in kept.chunks(EXTRACT_CHUNK) {
        let views = chunk
            .iter()
            .map(|&(row, col)| {
                let tile = slide.tile(row, col, grid.patch_px_source)?;
                resize_patch(&tile, grid.output_px)
            })
            .collect::<Result<Vec<_>>>()?;
        let features = encoder.embed::<f64>(query_params, &views)?;
        data.extend_from_slice(features.data());
    }
    Ok(FeatureBag {
        slide_id: grid.slide_id.clone(),
        label,
        matrix: Tensor::from_vec(&[kept.len(), d], data)?,
        coords: kept.iter().map(|&(r, c)| (r as u32, c as u32)).collect(),
    })
}

pub fn save_bag(bag: &FeatureBag, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let ioerr = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(&BAG_MAGIC).map_err(ioerr)?;
    w.write_all(&BAG_VERSION.to_le_bytes()).map_err(ioerr)?;
    let id = bag.slide_id.as_bytes();
    w.write_all(&(id.len() as u16).to_le_bytes()).map_err(ioerr)?;
    w.write_all(id).map_err(ioerr)?;
    w.write_all(&[bag.label]).map_err(ioerr)?;
    let (n, d) = (bag.n_patches() as u32, bag.dim() as u32);
    w.write_all(&n.to_le_bytes()).map_err(ioerr)?;
    w.write_all(&d.to_le_bytes()).map_err(ioerr)?;
    for &(r, c) in &bag.coords {
        w.write_all(&r.to_le_bytes()).map_err(ioerr)?;
        w.write_all(&c.to_le_bytes()).map_err(ioerr)?;
    }
    for &v in bag.matrix.data() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(ioerr)?;
    }
    w.flush().map_err(ioerr)
}

struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            offset: at,
            detail: format!("{what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }
}

pub fn load_bag(path: &Path) -> Result<FeatureBag> {
    if !path.exists() {
        return Err(Error::MissingDependency(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Counted {
        inner: BufReader::new(file),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if magic != BAG_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let mut version = [0u8; 2];
    r.read_exact_at(&mut version, "version")?;
    if u16::from_le_bytes(version) != BAG_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {}", u16::from_le_bytes(version)),
        });
    }
    let mut id_len = [0u8; 2];
    r.read_exact_at(&mut id_len, "slide id length")?;
    let mut id = vec![0u8; u16::from_le_bytes(id_len) as usize];
    r.read_exact_at(&mut id, "slide id")?;
    let slide_id = String::from_utf8(id).map_err(|e| Error::Format {
        offset: r.offset,
        detail: format!("non-utf8 slide id: {e}"),
    })?;
    let mut label = [0u8; 1];
    r.read_exact_at(&mut label, "label")?;
    let mut n = [0u8; 4];
    r.read_exact_at(&mut n, "patch count")?;
    let n = u32::from_le_bytes(n) as usize;
    let mut d = [0u8; 4];
    r.read_exact_at(&mut d, "feature dim")?;
    let d = u32::from_le_bytes(d) as usize;
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        let mut rc = [0u8; 8];
        r.read_exact_at(&mut rc, "coords")?;
        coords.push((
            u32::from_le_bytes(rc[0..4].try_into().expect("4 bytes")),
            u32::from_le_bytes(rc[4..8].try_into().expect("4 bytes")),
        ));
    }
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let mut buf = [0u8; 4];
        r.read_exact_at(&mut buf, "feature payload")?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Ok(FeatureBag {
        slide_id,
        label: label[0],
        matrix: Tensor::from_vec(&[n, d], data)?,
        coords,
    })
}

/// One row of the bag index CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BagIndexRow {
    pub slide_id: String,
    pub label: u8,
    pub n_patches: usize,
    /// Relative to the index file's directory.
    pub bag_path: String,
}

pub fn write_bag_index(rows: &[BagIndexRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    w.write_record(["slide_id", "label", "n_patches", "bag_path"])
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    for r in rows {
        w.write_record([
            r.slide_id.as_str(),
            &r.label.to_string(),
            &r.n_patches.to_string(),
            r.bag_path.as_str(),
        ])
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_bag_index(path: &Path) -> Result<Vec<BagIndexRow>> {
    if !path.exists() {
        return Err(Error::MissingDependency(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
        let field = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::Config(format!("bag index: missing column {i}")))
        };
        rows.push(BagIndexRow {
            slide_id: field(0)?.to_string(),
            label: field(1)?
                .parse()
                .map_err(|_| Error::Config("bag index: bad label".into()))?,
            n_patches: field(2)?
                .parse()
                .map_err(|_| Error::Config("bag index: bad n_patches".into()))?,
            bag_path: field(3)?.to_string(),
        });
    }
    Ok(rows)
}

/// Resolve a bag path from the index against the index file's directory.
pub fn resolve_bag_path(index_path: &Path, row: &BagIndexRow) -> PathBuf {
    index_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&row.bag_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::preprocess::{grid_patches, tissue_mask, QcThresholds};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tissue_slide(side: usize) -> Rgb8Image {
        let mut img = Rgb8Image::new(side, side);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in img.data_mut() {
            *v = rng.random_range(90..200);
        }
        img
    }

    fn small_encoder() -> (Encoder, ParamSet<f64>) {
        let enc = Encoder::new(EncoderConfig::tiny()).unwrap();
        let params = enc.init_params(&mut ChaCha8Rng::seed_from_u64(7));
        (enc, params)
    }

    #[test]
    fn extraction_shape_and_determinism() {
        let slide = tissue_slide(64);
        let mask = tissue_mask(&slide, 220);
        let grid = grid_patches("s1", &slide, &mask, 16, 16, &QcThresholds::default()).unwrap();
        assert_eq!(grid.kept_count(), 16);
        let (enc, params) = small_encoder();
        let bag = extract_features_labeled(&enc, &params, &grid, &slide, 1).unwrap();
        assert_eq!(bag.matrix.shape(), &[16, 5]);
        assert_eq!(bag.coords.len(), 16);
        assert_eq!(bag.label, 1);
        for i in 0..bag.n_patches() {
            let norm = bag.matrix.row(i).unwrap().norm_l2();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        let again = extract_features_labeled(&enc, &params, &grid, &slide, 1).unwrap();
        assert_eq!(bag, again);
    }

    #[test]
    fn extraction_rejects_empty_grid() {
        let slide = tissue_slide(32);
        let mask = tissue_mask(&slide, 0); // nothing is tissue
        let grid = grid_patches("sx", &slide, &mask, 16, 16, &QcThresholds::default()).unwrap();
        assert_eq!(grid.kept_count(), 0);
        let (enc, params) = small_encoder();
        let err = extract_features(&enc, &params, &grid, &slide).unwrap_err();
        assert!(err.to_string().contains("sx"), "{err}");
    }

    #[test]
    fn paper_scale_feature_dim() {
        let mut cfg = EncoderConfig::tiny();
        cfg.feature_dim = 2048;
        let enc = Encoder::new(cfg).unwrap();
        let params: ParamSet<f64> = enc.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let slide = tissue_slide(32);
        let mask = tissue_mask(&slide, 220);
        let grid = grid_patches("sp", &slide, &mask, 16, 16, &QcThresholds::default()).unwrap();
        let bag = extract_features(&enc, &params, &grid, &slide).unwrap();
        assert_eq!(bag.dim(), 2048);
    }

    fn random_bag(rng: &mut ChaCha8Rng) -> FeatureBag {
        let n = rng.random_range(1..8);
        let d = rng.random_range(1..8);
        // values that are exactly f32-representable, so a round trip must
        // be bit-exact
        let matrix = Tensor::from_fn(&[n, d], |_| rng.random::<f32>() as f64);
        FeatureBag {
            slide_id: format!("slide{}", rng.random_range(0..1000)),
            label: rng.random_range(0..2),
            matrix,
            coords: (0..n).map(|i| (i as u32, rng.random_range(0..50))).collect(),
        }
    }

    #[test]
    fn bag_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bag.wbag");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bag = random_bag(&mut rng);
        save_bag(&bag, &path).unwrap();
        assert_eq!(load_bag(&path).unwrap(), bag);
    }

    #[test]
    fn thousand_random_bags_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bag.wbag");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let bag = random_bag(&mut rng);
            save_bag(&bag, &path).unwrap();
            let back = load_bag(&path).unwrap();
            assert_eq!(back, bag);
            // byte-level stability: saving the loaded bag is identical
            let bytes1 = std::fs::read(&path).unwrap();
            save_bag(&back, &path).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), bytes1);
        }
    }

    #[test]
    fn truncated_bag_is_format_error_not_crash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bag.wbag");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        save_bag(&random_bag(&mut rng), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_bag(&path).unwrap_err() {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn bag_index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bags_index.csv");
        let rows = vec![
            BagIndexRow {
                slide_id: "s0".into(),
                label: 0,
                n_patches: 12,
                bag_path: "bags/s0.wbag".into(),
            },
            BagIndexRow {
                slide_id: "s1".into(),
                label: 1,
                n_patches: 40,
                bag_path: "bags/s1.wbag".into(),
            },
        ];
        write_bag_index(&rows, &path).unwrap();
        assert_eq!(read_bag_index(&path).unwrap(), rows);
        assert_eq!(
            resolve_bag_path(&path, &rows[0]),
            dir.path().join("bags/s0.wbag")
        );
    }
}
