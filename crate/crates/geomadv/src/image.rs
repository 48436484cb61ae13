//! Image container, normalized coordinates, and the differentiable bilinear sampler.
//!
//! All warping and gradient machinery is built on top of the sampler defined
//! here. Coordinates are normalized so that `(-1, -1)` is the center of the
//! top-left pixel and `(1, 1)` the center of the bottom-right pixel. Sampling
//! outside the image clamps to the border pixel.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in normalized image coordinates.
///
/// On-image locations lie in `[-1, 1]²`; intermediate math may leave the box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPoint {
    /// Horizontal coordinate, -1 at the left edge, +1 at the right edge.
    pub u: f64,
    /// Vertical coordinate, -1 at the top edge, +1 at the bottom edge.
    pub v: f64,
}

impl NormalizedPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    /// Squared Euclidean distance to another point.
    pub fn dist_sq(&self, other: &NormalizedPoint) -> f64 {
        let du = self.u - other.u;
        let dv = self.v - other.v;
        du * du + dv * dv
    }
}

/// Maps a pixel index to the normalized coordinate of its center.
///
/// Column 0 maps to u = -1 and column `w - 1` to u = +1 (rows likewise for v),
/// so this is the exact inverse of [`norm_to_pixel`] at pixel centers.
pub fn pixel_to_norm(row: usize, col: usize, h: usize, w: usize) -> Result<NormalizedPoint> {
    if row >= h || col >= w {
        return Err(Error::OutOfRange(format!(
            "pixel ({row}, {col}) outside {h}x{w} image"
        )));
    }
    Ok(NormalizedPoint::new(axis_to_norm(col, w), axis_to_norm(row, h)))
}

/// Maps a normalized point to continuous (row, col) pixel coordinates.
pub fn norm_to_pixel(p: NormalizedPoint, h: usize, w: usize) -> (f64, f64) {
    (
        (p.v + 1.0) * 0.5 * (h as f64 - 1.0),
        (p.u + 1.0) * 0.5 * (w as f64 - 1.0),
    )
}

fn axis_to_norm(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n as f64 - 1.0) - 1.0
    }
}

/// An H x W x C raster with pixel values in [0, 1].
///
/// Pixels are stored row-major and channel-interleaved. All arithmetic is at
/// double precision; file formats serialize at single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

/// Per-channel sample values; entries beyond `channels` are zero.
pub type ChannelValues = [f64; 3];

impl Image {
    /// Creates a zero-filled image.
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::check_dims(height, width, channels)?;
        Ok(Self { height, width, channels, pixels: vec![0.0; height * width * channels] })
    }

    /// Wraps an existing pixel buffer, validating the invariants.
    pub fn from_pixels(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        Self::check_dims(height, width, channels)?;
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "pixel count {} does not match {}x{}x{}",
                pixels.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidImage(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, pixels })
    }

    fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage("zero-sized image".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("channels must be 1 or 3, got {channels}")));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    /// Sets a pixel, clamping the value into [0, 1].
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        self.pixels[(row * self.width + col) * self.channels + ch] = value.clamp(0.0, 1.0);
    }

    /// Rounds every pixel to the nearest f32 so the image round-trips
    /// bit-exactly through single-precision file formats.
    pub fn snap_to_f32(&mut self) {
        for p in &mut self.pixels {
            *p = *p as f32 as f64;
        }
    }

    /// Bilinear sample at a normalized point.
    ///
    /// The result is a convex combination of the four nearest pixel centers;
    /// coordinates outside the image clamp to the border pixel.
    pub fn sample_bilinear(&self, p: NormalizedPoint) -> ChannelValues {
        let cell = self.locate(p);
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate().take(self.channels) {
            let v00 = self.get(cell.r0, cell.c0, ch);
            let v01 = self.get(cell.r0, cell.c1, ch);
            let v10 = self.get(cell.r1, cell.c0, ch);
            let v11 = self.get(cell.r1, cell.c1, ch);
            *o = (1.0 - cell.tr) * ((1.0 - cell.tc) * v00 + cell.tc * v01)
                + cell.tr * ((1.0 - cell.tc) * v10 + cell.tc * v11);
        }
        out
    }

    /// Analytic partial derivatives of [`Self::sample_bilinear`] with respect
    /// to the normalized coordinates, per channel: `(d/du, d/dv)`.
    ///
    /// The derivative is piecewise constant within an interpolation cell; at
    /// cell boundaries the cell containing the point under the half-open
    /// convention applies. Outside the image the derivative is zero.
    pub fn sample_bilinear_grad(&self, p: NormalizedPoint) -> (ChannelValues, ChannelValues) {
        let cell = self.locate(p);
        let du_scale = if cell.clamped_c { 0.0 } else { 0.5 * (self.width as f64 - 1.0) };
        let dv_scale = if cell.clamped_r { 0.0 } else { 0.5 * (self.height as f64 - 1.0) };
        let mut gu = [0.0; 3];
        let mut gv = [0.0; 3];
        for ch in 0..self.channels {
            let v00 = self.get(cell.r0, cell.c0, ch);
            let v01 = self.get(cell.r0, cell.c1, ch);
            let v10 = self.get(cell.r1, cell.c0, ch);
            let v11 = self.get(cell.r1, cell.c1, ch);
            gu[ch] = ((1.0 - cell.tr) * (v01 - v00) + cell.tr * (v11 - v10)) * du_scale;
            gv[ch] = ((1.0 - cell.tc) * (v10 - v00) + cell.tc * (v11 - v01)) * dv_scale;
        }
        (gu, gv)
    }

    fn locate(&self, p: NormalizedPoint) -> Cell {
        let (rf, cf) = norm_to_pixel(p, self.height, self.width);
        let max_r = self.height as f64 - 1.0;
        let max_c = self.width as f64 - 1.0;
        let clamped_r = !(0.0..max_r).contains(&rf) && self.height > 1 || self.height == 1;
        let clamped_c = !(0.0..max_c).contains(&cf) && self.width > 1 || self.width == 1;
        let rf = rf.clamp(0.0, max_r);
        let cf = cf.clamp(0.0, max_c);
        let r0 = (rf.floor() as usize).min(self.height - 1);
        let c0 = (cf.floor() as usize).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        Cell { r0, c0, r1, c1, tr: rf - r0 as f64, tc: cf - c0 as f64, clamped_r, clamped_c }
    }
}

struct Cell {
    r0: usize,
    c0: usize,
    r1: usize,
    c1: usize,
    tr: f64,
    tc: f64,
    clamped_r: bool,
    clamped_c: bool,
}

// --- PGM (P5) / PPM (P6) dumps, maxval 255, quantization round(v*255) ---

/// Writes a grayscale image as binary PGM (P5). A comment line records the
/// seed so every emitted file carries its provenance.
pub fn write_pgm(img: &Image, path: &Path, seed: u64) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::InvalidImage("PGM requires a single-channel image".into()));
    }
    write_netpbm(img, path, seed, "P5")
}

/// Writes a color image as binary PPM (P6).
pub fn write_ppm(img: &Image, path: &Path, seed: u64) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::InvalidImage("PPM requires a three-channel image".into()));
    }
    write_netpbm(img, path, seed, "P6")
}

fn write_netpbm(img: &Image, path: &Path, seed: u64, magic: &str) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut run = || -> std::io::Result<()> {
        writeln!(w, "{magic}")?;
        writeln!(w, "# geomadv v1 seed={seed}")?;
        writeln!(w, "{} {}", img.width, img.height)?;
        writeln!(w, "255")?;
        let bytes: Vec<u8> = img.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
        w.write_all(&bytes)?;
        w.flush()
    };
    run().map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM (P5) or PPM (P6) file with maxval 255.
pub fn read_netpbm(path: &Path) -> Result<Image> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let magic = read_token(&mut r, path)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported netpbm magic {other:?}"))),
    };
    let width: usize = parse_token(&read_token(&mut r, path)?, "width")?;
    let height: usize = parse_token(&read_token(&mut r, path)?, "height")?;
    let maxval: usize = parse_token(&read_token(&mut r, path)?, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("only maxval 255 supported, got {maxval}")));
    }
    let mut bytes = vec![0u8; height * width * channels];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let pixels = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_pixels(height, width, channels, pixels)
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn read_token(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut token = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match r.read_exact(&mut byte) {
            Ok(()) => {}
            Err(e) => {
                if !token.is_empty() {
                    return Ok(token);
                }
                return Err(Error::io(path, e));
            }
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c);
    }
}

fn parse_token(tok: &str, what: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::Format(format!("bad {what} field {tok:?} in netpbm header")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, px: &[f64]) -> Image {
        Image::from_pixels(h, w, 1, px.to_vec()).unwrap()
    }

    /// 2x2 test grid; the classic [[0,1],[2,3]] pattern scaled into [0,1].
    fn quad() -> Image {
        gray(2, 2, &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
    }

    #[test]
    fn pixel_to_norm_corners_and_center() {
        let p = pixel_to_norm(0, 0, 64, 64).unwrap();
        assert_eq!((p.u, p.v), (-1.0, -1.0));
        let p = pixel_to_norm(63, 63, 64, 64).unwrap();
        assert_eq!((p.u, p.v), (1.0, 1.0));
        let p = pixel_to_norm(31, 31, 64, 64).unwrap();
        let expect = 2.0 * 31.0 / 63.0 - 1.0;
        assert!((p.u - expect).abs() < 1e-15 && (p.v - expect).abs() < 1e-15);
        assert!((expect + 0.015873).abs() < 1e-5);
    }

    #[test]
    fn pixel_to_norm_rejects_out_of_range() {
        assert!(pixel_to_norm(64, 0, 64, 64).is_err());
        assert!(pixel_to_norm(0, 64, 64, 64).is_err());
    }

    #[test]
    fn norm_round_trips_at_pixel_centers() {
        for (h, w) in [(5, 9), (64, 64), (2, 3)] {
            for r in 0..h {
                for c in 0..w {
                    let p = pixel_to_norm(r, c, h, w).unwrap();
                    let (rf, cf) = norm_to_pixel(p, h, w);
                    assert!((rf - r as f64).abs() < 1e-12);
                    assert!((cf - c as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sample_exact_at_pixel_centers() {
        let img = quad();
        for r in 0..2 {
            for c in 0..2 {
                let p = pixel_to_norm(r, c, 2, 2).unwrap();
                let got = img.sample_bilinear(p)[0];
                assert_eq!(got, img.get(r, c, 0));
            }
        }
    }

    #[test]
    fn sample_at_geometric_center_is_mean_of_corners() {
        let img = quad();
        let got = img.sample_bilinear(NormalizedPoint::new(0.0, 0.0))[0];
        assert!((got - 0.5).abs() < 1e-15); // (0 + 1/3 + 2/3 + 1) / 4
    }

    #[test]
    fn sample_clamps_to_border() {
        let img = quad();
        let far = img.sample_bilinear(NormalizedPoint::new(-5.0, -7.0))[0];
        assert_eq!(far, img.get(0, 0, 0));
        let far = img.sample_bilinear(NormalizedPoint::new(5.0, 7.0))[0];
        assert_eq!(far, img.get(1, 1, 0));
    }

    /// Independent scalar reference interpolator, written directly from the
    /// textbook formula over raw pixel coordinates.
    fn reference_bilinear(img: &Image, p: NormalizedPoint, ch: usize) -> f64 {
        let h = img.height();
        let w = img.width();
        let mut y = (p.v + 1.0) / 2.0 * (h as f64 - 1.0);
        let mut x = (p.u + 1.0) / 2.0 * (w as f64 - 1.0);
        y = y.max(0.0).min(h as f64 - 1.0);
        x = x.max(0.0).min(w as f64 - 1.0);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        img.get(y0, x0, ch) * (1.0 - fy) * (1.0 - fx)
            + img.get(y0, x1, ch) * (1.0 - fy) * fx
            + img.get(y1, x0, ch) * fy * (1.0 - fx)
            + img.get(y1, x1, ch) * fy * fx
    }

    #[test]
    fn sample_matches_reference_on_random_grid() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let px: Vec<f64> = (0..25).map(|_| rng.gen::<f64>()).collect();
        let img = gray(5, 5, &px);
        for _ in 0..200 {
            let p = NormalizedPoint::new(rng.gen_range(-1.3..1.3), rng.gen_range(-1.3..1.3));
            let got = img.sample_bilinear(p)[0];
            let want = reference_bilinear(&img, p, 0);
            assert!((got - want).abs() < 1e-12, "mismatch at {p:?}: {got} vs {want}");
        }
    }

    #[test]
    fn grad_zero_for_constant_image() {
        let img = gray(4, 4, &[0.25; 16]);
        let (gu, gv) = img.sample_bilinear_grad(NormalizedPoint::new(0.1, -0.2));
        assert_eq!(gu[0], 0.0);
        assert_eq!(gv[0], 0.0);
    }

    #[test]
    fn grad_matches_finite_differences_at_center() {
        let img = quad();
        let p = NormalizedPoint::new(0.0, 0.0);
        let (gu, gv) = img.sample_bilinear_grad(p);
        let h = 1e-5;
        let fd_u = (img.sample_bilinear(NormalizedPoint::new(p.u + h, p.v))[0]
            - img.sample_bilinear(NormalizedPoint::new(p.u - h, p.v))[0])
            / (2.0 * h);
        let fd_v = (img.sample_bilinear(NormalizedPoint::new(p.u, p.v + h))[0]
            - img.sample_bilinear(NormalizedPoint::new(p.u, p.v - h))[0])
            / (2.0 * h);
        assert!((gu[0] - fd_u).abs() < 1e-6);
        assert!((gv[0] - fd_v).abs() < 1e-6);
    }

    #[test]
    fn grad_integrates_within_cell() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let px: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
        let img = gray(6, 6, &px);
        // Point well inside a cell so p and p + delta share it; along a single
        // axis the interpolant is linear, so the Taylor step is exact.
        let p = NormalizedPoint::new(0.123, -0.287);
        let d = 1e-4;
        let (gu, gv) = img.sample_bilinear_grad(p);
        let base = img.sample_bilinear(p)[0];
        let moved_u = img.sample_bilinear(NormalizedPoint::new(p.u + d, p.v))[0];
        let moved_v = img.sample_bilinear(NormalizedPoint::new(p.u, p.v + d))[0];
        assert!((moved_u - base - gu[0] * d).abs() < 1e-9);
        assert!((moved_v - base - gv[0] * d).abs() < 1e-9);
    }

    #[test]
    fn grad_zero_outside_image() {
        let img = quad();
        let (gu, gv) = img.sample_bilinear_grad(NormalizedPoint::new(3.0, 0.0));
        assert_eq!(gu[0], 0.0);
        // v is inside, so only u is clamped; moving v still changes the sample.
        let _ = gv;
        let (gu, gv) = img.sample_bilinear_grad(NormalizedPoint::new(3.0, 5.0));
        assert_eq!(gu[0], 0.0);
        assert_eq!(gv[0], 0.0);
    }

    #[test]
    fn netpbm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = gray(3, 4, &(0..12).map(|i| i as f64 / 11.0).collect::<Vec<_>>());
        write_pgm(&img, &path, 42).unwrap();
        let back = read_netpbm(&path).unwrap();
        assert_eq!(back.height(), 3);
        assert_eq!(back.width(), 4);
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn netpbm_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_netpbm(&path), Err(Error::Format(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Bilinear output is bounded by the min/max of its 4 neighbors,
            /// hence warped images stay in [0,1].
            #[test]
            fn sample_bounded_by_neighbors(
                px in proptest::collection::vec(0.0f64..=1.0, 16),
                u in -1.5f64..1.5,
                v in -1.5f64..1.5,
            ) {
                let img = Image::from_pixels(4, 4, 1, px).unwrap();
                let s = img.sample_bilinear(NormalizedPoint::new(u, v))[0];
                prop_assert!((0.0..=1.0).contains(&s));
                let lo = img.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = img.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
            }

            #[test]
            fn pixel_centers_reproduce_stored_values(
                px in proptest::collection::vec(0.0f64..=1.0, 12),
                r in 0usize..3,
                c in 0usize..4,
            ) {
                let img = Image::from_pixels(3, 4, 1, px).unwrap();
                let p = pixel_to_norm(r, c, 3, 4).unwrap();
                let s = img.sample_bilinear(p)[0];
                prop_assert!((s - img.get(r, c, 0)).abs() < 1e-12);
            }
        }
    }
}
