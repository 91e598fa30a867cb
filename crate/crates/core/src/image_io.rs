//! Raster images with real-valued channels and binary PPM (P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type Rgb = [f32; 3];

/// Row-major RGB image with every channel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Degenerate(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Data(format!(
                "{} pixels supplied for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().flatten().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::Data(format!("channel value {bad} outside [0, 1]")));
        }
        Ok(RasterImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: Rgb) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    /// Builds an image by evaluating `f(x, y)`; channels are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(clamp_rgb(f(x, y)));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[Rgb] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    /// Luma plane, `0.299 r + 0.587 g + 0.114 b`.
    pub fn luma(&self) -> Vec<f32> {
        self.pixels.iter().map(|p| luma(*p)).collect()
    }

    /// Returns the sub-image `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Degenerate(format!(
                "crop window {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            pixels.extend_from_slice(&self.row(y)[x0..x0 + w]);
        }
        Self::new(w, h, pixels)
    }

    /// Rotates by 90 degrees clockwise in image coordinates (y pointing down).
    pub fn rotate90(&self) -> Self {
        let (w, h) = (self.height, self.width);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                pixels.push(self.get(y, self.height - 1 - x));
            }
        }
        RasterImage {
            width: w,
            height: h,
            pixels,
        }
    }

    pub(crate) fn from_raw(width: usize, height: usize, pixels: Vec<Rgb>) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        RasterImage { width, height, pixels }
    }
}

pub fn luma(p: Rgb) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub fn clamp_rgb(p: Rgb) -> Rgb {
    p.map(|c| if c.is_nan() { 0.0 } else { c.clamp(0.0, 1.0) })
}

/// Encodes one channel with round-half-up.
pub fn encode_channel(c: f32) -> u8 {
    (c * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Decodes a P6 byte stream. `context` names the source in error messages.
pub fn decode_ppm(bytes: &[u8], context: &str) -> Result<RasterImage> {
    let malformed = |reason: &str| Error::MalformedHeader {
        context: context.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(malformed("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(malformed("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed("zero image dimension"));
    }
    if maxval != 255 {
        return Err(malformed("only maxval 255 is supported"));
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| malformed("image dimensions overflow"))?;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(Error::Truncated {
            context: context.to_string(),
            expected,
            found: data.len(),
        });
    }
    let pixels = data[..expected]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]].map(|v| v as f32 / 255.0))
        .collect();
    Ok(RasterImage::from_raw(width, height, pixels))
}

pub fn encode_ppm(img: &RasterImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.pixels.len() * 3);
    for p in &img.pixels {
        out.extend(p.map(encode_channel));
    }
    out
}

/// Reads a P6 PPM file (or a PNG when built with the `png` feature).
pub fn read_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    #[cfg(feature = "png")]
    if bytes.starts_with(b"\x89PNG") {
        return decode_png(&bytes, path);
    }
    decode_ppm(&bytes, &path.display().to_string())
}

/// Writes a P6 PPM file.
pub fn write_image(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8], path: &Path) -> Result<RasterImage> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let pixels = decoded.pixels().map(|p| p.0.map(|v| v as f32 / 255.0)).collect();
    RasterImage::new(w, h, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_single_white_pixel() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff", "mem").unwrap();
        assert_eq!((img.width(), img.height()), (1, 1));
        assert_eq!(img.get(0, 0), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn encodes_black_pixel() {
        let img = RasterImage::filled(1, 1, [0.0; 3]).unwrap();
        assert_eq!(encode_ppm(&img), b"P6\n1 1\n255\n\x00\x00\x00");
    }

    #[test]
    fn half_rounds_up() {
        assert_eq!(encode_channel(0.5), 128);
        assert_eq!(encode_channel(0.0), 0);
        assert_eq!(encode_channel(1.0), 255);
    }

    #[test]
    fn header_errors_are_distinct() {
        assert!(matches!(
            decode_ppm(b"P6\n0 5\n255\n", "mem"),
            Err(Error::MalformedHeader { .. })
        ));
        assert!(matches!(
            decode_ppm(b"P5\n1 1\n255\n\x00", "mem"),
            Err(Error::MalformedHeader { .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n\x00\x00", "mem"),
            Err(Error::MalformedHeader { .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n2 1\n255\n\x00\x00\x00", "mem"),
            Err(Error::Truncated {
                expected: 6,
                found: 3,
                ..
            })
        ));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_ppm(b"P6 # made by hand\n1 # w\n1\n255\n\x00\x80\xff", "mem").unwrap();
        assert_eq!(img.get(0, 0), [0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_image("/nonexistent/definitely.ppm"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn file_round_trip_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::from_fn(7, 5, |x, y| [x as f32 / 7.0, y as f32 / 5.0, 0.25]).unwrap();
        let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
        write_image(&img, &a).unwrap();
        write_image(&img, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let back = read_image(&a).unwrap();
        assert_eq!(encode_ppm(&back), fs::read(&a).unwrap());
    }

    #[test]
    fn rotate90_moves_corners() {
        let img = RasterImage::from_fn(3, 2, |x, y| [x as f32 / 2.0, y as f32, 0.0]).unwrap();
        let r = img.rotate90();
        assert_eq!((r.width(), r.height()), (2, 3));
        // top-left of the rotated image is the bottom-left of the source
        assert_eq!(r.get(0, 0), img.get(0, 1));
        assert_eq!(r.get(1, 0), img.get(0, 0));
    }

    proptest! {
        #[test]
        fn read_write_identity(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let mut s = seed;
            let img = RasterImage::from_fn(w, h, |_, _| {
                [0; 3].map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (s >> 56) as f32 / 255.0
                })
            }).unwrap();
            let bytes = encode_ppm(&img);
            let back = decode_ppm(&bytes, "mem").unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(encode_ppm(&back), bytes);
        }
    }
}
