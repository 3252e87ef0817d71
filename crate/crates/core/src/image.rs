//! Grayscale image values, the binary PGM codec, replicate padding, and
//! patch extraction. File-system IO lives in the companion crate; everything
//! here works on in-memory bytes and buffers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, TensorData};

/// Grayscale image with pixels nominally in `[0, 1]` (loaders divide 8-bit
/// samples by the declared maximum; computed images may exceed the range
/// until they are written out, where values are clamped).
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: "pixel count does not match extents",
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Rank-2 tensor view in the requested precision.
    pub fn to_matrix<T: Real>(&self) -> TensorData<T> {
        TensorData::matrix(
            self.height,
            self.width,
            self.pixels.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("sized")
    }

    pub fn from_matrix<T: Real>(m: &TensorData<T>) -> Result<Self> {
        Self::new(
            m.rows(),
            m.cols(),
            m.data().iter().map(|&v| v.as_f64() as f32).collect(),
        )
    }
}

fn is_pgm_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | b'\x0b' | b'\x0c')
}

/// Reads one decimal header token, skipping whitespace and `#` comments.
fn next_token(bytes: &[u8], mut pos: usize) -> Result<(usize, usize)> {
    loop {
        while pos < bytes.len() && is_pgm_space(bytes[pos]) {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        break;
    }
    let start = pos;
    while pos < bytes.len() && bytes[pos].is_ascii_digit() {
        pos += 1;
    }
    if pos == start {
        return Err(Error::MalformedPgm("expected a decimal header field"));
    }
    let mut value = 0usize;
    for &b in &bytes[start..pos] {
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or(Error::MalformedPgm("header field overflow"))?;
    }
    Ok((value, pos))
}

/// Decodes binary PGM (`P5`), scaling samples by the declared maximum value.
/// Only 8-bit data (maxval <= 255) is supported.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::MalformedPgm("missing P5 magic"));
    }
    let (width, pos) = next_token(bytes, 2)?;
    let (height, pos) = next_token(bytes, pos)?;
    let (maxval, pos) = next_token(bytes, pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::MalformedPgm("maxval outside 1..=255"));
    }
    if pos >= bytes.len() || !is_pgm_space(bytes[pos]) {
        return Err(Error::MalformedPgm("missing whitespace before raster"));
    }
    let data = &bytes[pos + 1..];
    let n = height
        .checked_mul(width)
        .ok_or(Error::MalformedPgm("extent overflow"))?;
    if n == 0 {
        return Err(Error::MalformedPgm("zero extent"));
    }
    if data.len() < n {
        return Err(Error::MalformedPgm("truncated raster"));
    }
    let scale = 1.0 / maxval as f32;
    GrayImage::new(height, width, data[..n].iter().map(|&b| b as f32 * scale).collect())
}

/// Encodes binary PGM with maxval 255. Pixels are scaled by 255, rounded
/// half-up, then clamped to `[0, 255]`.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + img.pixels.len());
    out.extend_from_slice(alloc::format!("P5\n{} {}\n255\n", img.width, img.height).as_bytes());
    for &v in &img.pixels {
        let scaled = ((v as f64) * 255.0 + 0.5).floor();
        out.push(scaled.clamp(0.0, 255.0) as u8);
    }
    out
}

/// Replicate-pads the right and bottom edges up to the next multiple of
/// `block`, returning the padded image and the original extents.
pub fn pad_to_block(img: &GrayImage, block: usize) -> (GrayImage, (usize, usize)) {
    let round_up = |v: usize| v.div_ceil(block) * block;
    let (ph, pw) = (round_up(img.height), round_up(img.width));
    if (ph, pw) == (img.height, img.width) {
        return (img.clone(), (img.height, img.width));
    }
    let mut pixels = Vec::with_capacity(ph * pw);
    for i in 0..ph {
        let src_row = i.min(img.height - 1);
        for j in 0..pw {
            pixels.push(img.get(src_row, j.min(img.width - 1)));
        }
    }
    (
        GrayImage::new(ph, pw, pixels).expect("sized"),
        (img.height, img.width),
    )
}

/// Top-left crop back to original extents (inverse of [`pad_to_block`]).
pub fn crop(img: &GrayImage, height: usize, width: usize) -> Result<GrayImage> {
    if height > img.height || width > img.width {
        return Err(Error::PatchTooLarge {
            size: height.max(width),
            h: img.height,
            w: img.width,
        });
    }
    let mut pixels = Vec::with_capacity(height * width);
    for i in 0..height {
        pixels.extend_from_slice(&img.pixels[i * img.width..i * img.width + width]);
    }
    GrayImage::new(height, width, pixels)
}

/// Square patches on a row-major sliding grid.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub size: usize,
    pub stride: usize,
    pub patches: Vec<GrayImage>,
    /// Top-left source coordinate of each patch, same order as `patches`.
    pub coords: Vec<(usize, usize)>,
}

/// Extracts every `size`-square patch on the `stride` grid, row-major and
/// deterministic. Patch count per axis is `floor((extent - size)/stride) + 1`.
pub fn extract_patches(img: &GrayImage, size: usize, stride: usize) -> Result<PatchSet> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidHyper("patch size and stride must be positive"));
    }
    if size > img.height || size > img.width {
        return Err(Error::PatchTooLarge {
            size,
            h: img.height,
            w: img.width,
        });
    }
    let rows = (img.height - size) / stride + 1;
    let cols = (img.width - size) / stride + 1;
    let mut patches = Vec::with_capacity(rows * cols);
    let mut coords = Vec::with_capacity(rows * cols);
    for gy in 0..rows {
        for gx in 0..cols {
            let (y0, x0) = (gy * stride, gx * stride);
            let mut pixels = Vec::with_capacity(size * size);
            for i in 0..size {
                let off = (y0 + i) * img.width + x0;
                pixels.extend_from_slice(&img.pixels[off..off + size]);
            }
            patches.push(GrayImage::new(size, size, pixels)?);
            coords.push((y0, x0));
        }
    }
    Ok(PatchSet {
        size,
        stride,
        patches,
        coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_known_two_by_two() {
        let mut bytes = b"P5\n# a comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 85, 170, 255]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (2, 2));
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (p, e) in img.pixels().iter().zip(&expected) {
            assert!((p - e).abs() < 1e-6, "{p} vs {e}");
        }
    }

    #[test]
    fn decode_rejects_bad_inputs() {
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\n0"), Err(Error::MalformedPgm(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n"), Err(Error::MalformedPgm(_))));
        assert!(matches!(
            decode_pgm(b"P5\n1 1\n65535\n00"),
            Err(Error::MalformedPgm(_))
        ));
    }

    #[test]
    fn encode_black_white_and_rounding() {
        let img = GrayImage::new(1, 4, vec![0.0, 1.0, 0.5, 1.5]).unwrap();
        let bytes = encode_pgm(&img);
        let raster = &bytes[bytes.len() - 4..];
        // 0.5 * 255 = 127.5 rounds half-up to 128; 1.5 clamps to 255.
        assert_eq!(raster, &[0, 255, 128, 255]);
    }

    #[test]
    fn eight_bit_round_trip_is_exact() {
        let mut bytes = b"P5\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 17, 99, 128, 200, 255]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(encode_pgm(&img), bytes);
    }

    #[test]
    fn pad_is_identity_on_multiples() {
        let img = GrayImage::constant(33, 66, 0.5).unwrap();
        let (padded, dims) = pad_to_block(&img, 33);
        assert_eq!(padded, img);
        assert_eq!(dims, (33, 66));
    }

    #[test]
    fn pad_replicates_last_row() {
        let mut pixels = vec![0.0f32; 34 * 33];
        for (j, p) in pixels[33 * 33..].iter_mut().enumerate() {
            *p = j as f32 / 33.0; // distinctive last row
        }
        let img = GrayImage::new(34, 33, pixels).unwrap();
        let (padded, dims) = pad_to_block(&img, 33);
        assert_eq!(dims, (34, 33));
        assert_eq!((padded.height(), padded.width()), (66, 33));
        for i in 34..66 {
            for j in 0..33 {
                assert_eq!(padded.get(i, j), img.get(33, j), "row {i} col {j}");
            }
        }
    }

    #[test]
    fn crop_undoes_pad() {
        for (h, w) in [(1, 1), (33, 33), (34, 35), (65, 99), (100, 40), (7, 200)] {
            let pixels: Vec<f32> = (0..h * w).map(|v| (v % 251) as f32 / 251.0).collect();
            let img = GrayImage::new(h, w, pixels).unwrap();
            let (padded, (oh, ow)) = pad_to_block(&img, 33);
            assert_eq!(padded.height() % 33, 0);
            assert_eq!(padded.width() % 33, 0);
            assert_eq!(crop(&padded, oh, ow).unwrap(), img);
        }
    }

    #[test]
    fn patch_counts() {
        let img = GrayImage::constant(33, 33, 0.0).unwrap();
        assert_eq!(extract_patches(&img, 33, 33).unwrap().patches.len(), 1);

        let img = GrayImage::constant(99, 99, 0.0).unwrap();
        assert_eq!(extract_patches(&img, 33, 33).unwrap().patches.len(), 9);

        // floor((96-33)/21) + 1 = 4 per axis
        let img = GrayImage::constant(96, 96, 0.0).unwrap();
        let set = extract_patches(&img, 33, 21).unwrap();
        assert_eq!(set.patches.len(), 16);
        assert_eq!(set.coords[0], (0, 0));
        assert_eq!(set.coords[15], (63, 63));
    }

    #[test]
    fn patch_too_large_rejected() {
        let img = GrayImage::constant(32, 64, 0.0).unwrap();
        assert!(matches!(
            extract_patches(&img, 33, 33),
            Err(Error::PatchTooLarge { size: 33, h: 32, w: 64 })
        ));
    }

    #[test]
    fn patches_read_row_major_content() {
        let pixels: Vec<f32> = (0..66 * 66).map(|v| v as f32 / (66.0 * 66.0)).collect();
        let img = GrayImage::new(66, 66, pixels).unwrap();
        let set = extract_patches(&img, 33, 33).unwrap();
        assert_eq!(set.patches.len(), 4);
        // patch 3 is the bottom-right block
        assert_eq!(set.coords[3], (33, 33));
        assert_eq!(set.patches[3].get(0, 0), img.get(33, 33));
        assert_eq!(set.patches[3].get(32, 32), img.get(65, 65));
    }
}
