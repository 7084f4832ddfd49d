//! 8-bit grayscale PNG export/import and labeled montages.

use std::path::Path;

use super::font::{draw_text, GLYPH_H};
use super::write_atomic;
use crate::error::{Error, Result};
use crate::sample::Sample;

/// Maps [-1, 1] to 0..=255 with round-half-even; out-of-range values clamp.
pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round_ties_even() as u8
}

pub fn dequantize(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

fn image_dims(s: &Sample) -> Result<(usize, usize)> {
    match s.shape() {
        [1, h, w] | [h, w] => Ok((*h, *w)),
        other => Err(Error::ShapeMismatch {
            expected: vec![1, 0, 0],
            actual: other.to_vec(),
        }),
    }
}

fn encode_gray(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::config(format!("png encode: {e}")))?;
        w.write_image_data(pixels)
            .map_err(|e| Error::config(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// PNG bytes for a single-channel sample.
pub fn encode_png(s: &Sample) -> Result<Vec<u8>> {
    let (h, w) = image_dims(s)?;
    s.ensure_finite("image")?;
    let pixels: Vec<u8> = s.data().iter().map(|&v| quantize(v)).collect();
    encode_gray(w, h, &pixels)
}

pub fn export_png(s: &Sample, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(s)?)
}

/// Decodes an 8-bit grayscale PNG into a `[1, h, w]` sample.
pub fn decode_png(bytes: &[u8], origin: &Path) -> Result<Sample> {
    let bad = |e: String| Error::malformed(origin, e);
    let dec = png::Decoder::new(bytes);
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!(
            "expected 8-bit grayscale, found {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..w * h].iter().map(|&p| dequantize(p)).collect();
    Sample::new(vec![1, h, w], data)
}

pub fn import_png(path: &Path) -> Result<Sample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, path)
}

/// A grid of equally sized images with per-cell labels in a caption strip
/// below the grid (one caption line per grid row).
#[derive(Clone, Debug)]
pub struct Montage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub const GAP: usize = 2;
const LINE_H: usize = GLYPH_H + 2;
const GAP_SHADE: u8 = 64;

impl Montage {
    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_gray(self.width, self.height, &self.pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_png()?)
    }
}

/// Lays out `cells` row-major into `rows x cols`; `labels` (same length as
/// `cells`, may be empty strings) are burned into the caption strip.
pub fn montage(cells: &[Sample], labels: &[String], rows: usize, cols: usize) -> Result<Montage> {
    if rows == 0 || cols == 0 || cells.len() != rows * cols || labels.len() != cells.len() {
        return Err(Error::config(format!(
            "montage of {rows}x{cols} needs that many cells and labels (got {} and {})",
            cells.len(),
            labels.len()
        )));
    }
    let (h, w) = image_dims(&cells[0])?;
    for c in cells {
        if image_dims(c)? != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: cells[0].shape().to_vec(),
                actual: c.shape().to_vec(),
            });
        }
    }
    let width = cols * w + (cols + 1) * GAP;
    let grid_h = rows * h + (rows + 1) * GAP;
    let height = grid_h + rows * LINE_H;
    let mut pixels = vec![GAP_SHADE; width * grid_h];
    pixels.resize(width * height, 0);
    for (k, cell) in cells.iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        let (y0, x0) = (GAP + r * (h + GAP), GAP + c * (w + GAP));
        for i in 0..h {
            for j in 0..w {
                pixels[(y0 + i) * width + x0 + j] = quantize(cell.data()[i * w + j]);
            }
        }
        let x = GAP + c * (w + GAP);
        draw_text(&mut pixels, width, x, grid_h + r * LINE_H + 1, x + w, &labels[k], 255);
    }
    Ok(Montage { width, height, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_are_mid_gray() {
        // 0 maps to exactly 127.5, a tie that rounds to the even neighbour.
        assert_eq!(quantize(0.0), 128);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(5.0), 255);
        let s = Sample::zeros(&[1, 4, 4]);
        let back = decode_png(&encode_png(&s).unwrap(), Path::new("m")).unwrap();
        assert!(back.data().iter().all(|&v| v == dequantize(128)));
    }

    proptest! {
        #[test]
        fn round_trip_within_one_level(vals in proptest::collection::vec(-1.0f64..=1.0, 12)) {
            let s = Sample::new(vec![1, 3, 4], vals).unwrap();
            let back = decode_png(&encode_png(&s).unwrap(), Path::new("m")).unwrap();
            for (a, b) in s.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn file_round_trip_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let s = Sample::new(vec![1, 2, 2], vec![-1.0, 0.5, 0.25, 1.0]).unwrap();
        export_png(&s, &p).unwrap();
        let back = import_png(&p).unwrap();
        assert_eq!(back.shape(), &[1, 2, 2]);
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(import_png(&p), Err(Error::Malformed { .. })));
        assert!(encode_png(&Sample::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn montage_layout() {
        let cells: Vec<Sample> = (0..9).map(|k| Sample::filled(&[1, 32, 32], k as f64 / 9.0)).collect();
        let labels: Vec<String> = (0..9).map(|k| format!("nu={k}")).collect();
        let m = montage(&cells, &labels, 3, 3).unwrap();
        assert_eq!(m.width, 3 * 32 + 4 * GAP);
        assert_eq!(m.height, 3 * 32 + 4 * GAP + 3 * LINE_H);
        let png = m.to_png().unwrap();
        let back = decode_png(&png, Path::new("m")).unwrap();
        assert_eq!(back.shape(), &[1, m.height, m.width]);
        assert_eq!(m.pixels[GAP * m.width + GAP], quantize(0.0));
        assert!(montage(&cells, &labels, 2, 3).is_err());
    }
}
