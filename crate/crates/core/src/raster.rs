//! 8-bit RGB raster images: the slide and patch pixel type, PNG I/O, and the
//! handful of geometric primitives the pipeline needs (bilinear resize,
//! box-average downsampling, right-angle rotations, flips).

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 8-bit RGB image, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

/// Fixed luminance convention: `round(0.299 R + 0.587 G + 0.114 B)`.
#[inline]
pub fn luminance(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    (y + 0.5) as u8
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize) -> Self {
        Rgb8Image {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape {
                op: "rgb8_from_raw",
                lhs: vec![width, height, 3],
                rhs: vec![data.len()],
            });
        }
        Ok(Rgb8Image {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> (u8, u8, u8) {
        let i = (y * self.width + x) * 3;
        (self.data[i], self.data[i + 1], self.data[i + 2])
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: (u8, u8, u8)) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb.0;
        self.data[i + 1] = rgb.1;
        self.data[i + 2] = rgb.2;
    }

    #[inline]
    pub fn luma(&self, x: usize, y: usize) -> u8 {
        let (r, g, b) = self.pixel(x, y);
        luminance(r, g, b)
    }

    /// Copy of the `side x side` tile whose top-left corner is
    /// `(col*side, row*side)`.
    pub fn tile(&self, row: usize, col: usize, side: usize) -> Result<Rgb8Image> {
        let (x0, y0) = (col * side, row * side);
        if x0 + side > self.width || y0 + side > self.height {
            return Err(Error::Index {
                what: "tile origin",
                index: y0.max(x0) + side,
                len: self.width.min(self.height),
            });
        }
        let mut out = Rgb8Image::new(side, side);
        for y in 0..side {
            let src = ((y0 + y) * self.width + x0) * 3;
            let dst = y * side * 3;
            out.data[dst..dst + side * 3].copy_from_slice(&self.data[src..src + side * 3]);
        }
        Ok(out)
    }

    /// Bilinear resize of a square image to `output_px`; the no-op case is
    /// an exact copy.
    pub fn resize_square(&self, output_px: usize) -> Result<Rgb8Image> {
        if self.width != self.height {
            return Err(Error::Shape {
                op: "resize_square",
                lhs: vec![self.width, self.height],
                rhs: vec![output_px, output_px],
            });
        }
        if self.width == output_px {
            return Ok(self.clone());
        }
        let src = self.width as f64;
        let dst = output_px as f64;
        let scale = src / dst;
        let mut out = Rgb8Image::new(output_px, output_px);
        for oy in 0..output_px {
            let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, src - 1.0);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = sy - y0 as f64;
            for ox in 0..output_px {
                let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, src - 1.0);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = sx - x0 as f64;
                let mut rgb = [0u8; 3];
                for (c, out_c) in rgb.iter_mut().enumerate() {
                    let p00 = self.data[(y0 * self.width + x0) * 3 + c] as f64;
                    let p01 = self.data[(y0 * self.width + x1) * 3 + c] as f64;
                    let p10 = self.data[(y1 * self.width + x0) * 3 + c] as f64;
                    let p11 = self.data[(y1 * self.width + x1) * 3 + c] as f64;
                    let top = p00 * (1.0 - fx) + p01 * fx;
                    let bot = p10 * (1.0 - fx) + p11 * fx;
                    let v = top * (1.0 - fy) + bot * fy;
                    *out_c = (v + 0.5).min(255.0) as u8;
                }
                out.set_pixel(ox, oy, (rgb[0], rgb[1], rgb[2]));
            }
        }
        Ok(out)
    }

    /// Box-average downsample to exactly `out_w x out_h`; each output pixel
    /// averages its (near-equal) integer span of source pixels. Exact
    /// integer accumulation, so the result is bit-stable.
    pub fn box_downsample(&self, out_w: usize, out_h: usize) -> Result<Rgb8Image> {
        if out_w == 0 || out_h == 0 || out_w > self.width || out_h > self.height {
            return Err(Error::Shape {
                op: "box_downsample",
                lhs: vec![self.width, self.height],
                rhs: vec![out_w, out_h],
            });
        }
        let span = |i: usize, out: usize, src: usize| -> (usize, usize) {
            (i * src / out, (i + 1) * src / out)
        };
        let mut out = Rgb8Image::new(out_w, out_h);
        for oy in 0..out_h {
            let (y0, y1) = span(oy, out_h, self.height);
            for ox in 0..out_w {
                let (x0, x1) = span(ox, out_w, self.width);
                let mut sums = [0u64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let i = (y * self.width + x) * 3;
                        sums[0] += self.data[i] as u64;
                        sums[1] += self.data[i + 1] as u64;
                        sums[2] += self.data[i + 2] as u64;
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as u64;
                let avg = |s: u64| ((s + n / 2) / n) as u8;
                out.set_pixel(ox, oy, (avg(sums[0]), avg(sums[1]), avg(sums[2])));
            }
        }
        Ok(out)
    }

    /// Clockwise rotation by `quarter_turns * 90` degrees; square images only.
    pub fn rot90(&self, quarter_turns: u32) -> Rgb8Image {
        debug_assert_eq!(self.width, self.height, "rot90 expects square images");
        let n = self.width;
        let mut out = self.clone();
        for _ in 0..(quarter_turns % 4) {
            let src = out.clone();
            for y in 0..n {
                for x in 0..n {
                    out.set_pixel(n - 1 - y, x, src.pixel(x, y));
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Rgb8Image {
        let mut out = Rgb8Image::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Rgb8Image {
        let mut out = Rgb8Image::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, self.height - 1 - y, self.pixel(x, y));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))
    }

    pub fn load_png(path: &Path) -> Result<Rgb8Image> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .decode()
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?
            .into_rgb8();
        Rgb8Image::from_raw(img.width() as usize, img.height() as usize, img.into_raw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker2() -> Rgb8Image {
        let mut img = Rgb8Image::new(2, 2);
        img.set_pixel(0, 0, (0, 0, 0));
        img.set_pixel(1, 0, (255, 255, 255));
        img.set_pixel(0, 1, (255, 255, 255));
        img.set_pixel(1, 1, (0, 0, 0));
        img
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let img = checker2();
        assert_eq!(img.resize_square(2).unwrap(), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let mut img = Rgb8Image::new(8, 8);
        img.data_mut().fill(137);
        let out = img.resize_square(4).unwrap();
        assert!(out.data().iter().all(|&v| v == 137));
    }

    #[test]
    fn resize_checker_to_single_pixel_is_midgray() {
        let out = checker2().resize_square(1).unwrap();
        let (r, _, _) = out.pixel(0, 0);
        assert!(
            (127..=128).contains(&r),
            "bilinear average of {{0,255}} checker should be ~127.5, got {r}"
        );
    }

    #[test]
    fn resize_rejects_non_square() {
        let img = Rgb8Image::new(4, 2);
        assert!(img.resize_square(2).is_err());
    }

    #[test]
    fn box_downsample_averages_exact_blocks() {
        let mut img = Rgb8Image::new(4, 2);
        for x in 0..4 {
            for y in 0..2 {
                let v = if x < 2 { 10 } else { 30 };
                img.set_pixel(x, y, (v, v, v));
            }
        }
        let out = img.box_downsample(2, 1).unwrap();
        assert_eq!(out.pixel(0, 0), (10, 10, 10));
        assert_eq!(out.pixel(1, 0), (30, 30, 30));
    }

    #[test]
    fn rot90_four_times_is_identity_and_preserves_multiset() {
        let mut img = Rgb8Image::new(3, 3);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = i as u8;
        }
        let r1 = img.rot90(1);
        let mut a: Vec<u8> = img.data().to_vec();
        let mut b: Vec<u8> = r1.data().to_vec();
        assert_ne!(a, b);
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert_eq!(img.rot90(4), img);
    }

    #[test]
    fn flips_are_involutions() {
        let mut img = Rgb8Image::new(4, 3);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i * 7 % 251) as u8;
        }
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
    }

    #[test]
    fn luminance_convention() {
        assert_eq!(luminance(255, 255, 255), 255);
        assert_eq!(luminance(0, 0, 0), 0);
        // 0.299*100 + 0.587*50 + 0.114*200 = 29.9 + 29.35 + 22.8 = 82.05
        assert_eq!(luminance(100, 50, 200), 82);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = Rgb8Image::new(5, 7);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i * 13 % 256) as u8;
        }
        img.save_png(&path).unwrap();
        assert_eq!(Rgb8Image::load_png(&path).unwrap(), img);
    }
}
