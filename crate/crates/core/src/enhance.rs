//! Photo enhancements: five filter recipes, saliency-aware cropping and
//! linear tilt-shift.
//!
//! All recipes operate on real-valued channels and clamp to `[0, 1]`. They
//! approximate the look of the popular mobile filters of the same names:
//!
//! | filter    | recipe |
//! |-----------|--------|
//! | Gotham    | `t = clamp(1.4 (L^0.8 - 0.5) + 0.5)`, output `(0.9t, 0.9t, clamp(1.1t + 0.03))` |
//! | Kelvin    | saturation x1.2, then `0.65 c^0.9 + 0.35 (1.0, 0.6, 0.0)` |
//! | Lomo      | contrast x1.5 around 0.5, vignette `max(0, 1 - 0.6 (d/dmax)^2)` |
//! | Nashville | `1.2c + 0.06`, contrast x0.8, red +0.05, blue -0.05 |
//! | Toaster   | saturation x1.3, central pink/orange glow, vignette `max(0, 1 - 0.5 (d/dmax)^2)` |
//!
//! `L` is Rec.601 luma and `d` the distance of a pixel center from the image
//! center.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image_io::{clamp_rgb, luma, RasterImage, Rgb};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterName {
    Gotham,
    Kelvin,
    Lomo,
    Nashville,
    Toaster,
}

impl FilterName {
    pub const ALL: [FilterName; 5] = [
        FilterName::Gotham,
        FilterName::Kelvin,
        FilterName::Lomo,
        FilterName::Nashville,
        FilterName::Toaster,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FilterName::Gotham => "gotham",
            FilterName::Kelvin => "kelvin",
            FilterName::Lomo => "lomo",
            FilterName::Nashville => "nashville",
            FilterName::Toaster => "toaster",
        }
    }
}

impl fmt::Display for FilterName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterName::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown filter {s:?}")))
    }
}

/// Any enhancement studied by the cloaking experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Enhancement {
    Identity,
    Filter(FilterName),
    /// Removes the given fraction of the image area.
    Crop(f64),
    /// Tilt-shift focused on the saliency center's row.
    TiltShift,
}

impl Enhancement {
    pub fn apply(&self, img: &RasterImage) -> Result<RasterImage> {
        match *self {
            Enhancement::Identity => Ok(img.clone()),
            Enhancement::Filter(f) => Ok(apply_filter(img, f)),
            Enhancement::Crop(fraction) => smart_crop(img, fraction).map(|(out, _)| out),
            Enhancement::TiltShift => {
                let (_, cy) = saliency_center(img)?;
                let focus = (cy.floor() as usize).min(img.height() - 1);
                tilt_shift(img, focus)
            }
        }
    }
}

impl fmt::Display for Enhancement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Enhancement::Identity => f.write_str("identity"),
            Enhancement::Filter(name) => name.fmt(f),
            Enhancement::Crop(fraction) => write!(f, "crop{:.0}", fraction * 100.0),
            Enhancement::TiltShift => f.write_str("tiltshift"),
        }
    }
}

impl FromStr for Enhancement {
    type Err = Error;

    /// Accepts a filter name, `identity`, `tiltshift` or `cropNN` (percent).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "identity" | "none" => Ok(Enhancement::Identity),
            "tiltshift" | "tilt-shift" => Ok(Enhancement::TiltShift),
            _ => {
                if let Some(pct) = s.strip_prefix("crop") {
                    let pct: f64 = pct
                        .parse()
                        .map_err(|_| Error::Config(format!("bad crop percentage in {s:?}")))?;
                    return Ok(Enhancement::Crop(pct / 100.0));
                }
                s.parse().map(Enhancement::Filter)
            }
        }
    }
}

fn clamp01(c: f32) -> f32 {
    c.clamp(0.0, 1.0)
}

fn saturate(p: Rgb, s: f32) -> Rgb {
    let l = luma(p);
    p.map(|c| clamp01(l + s * (c - l)))
}

/// Normalized distance of pixel (x, y) from the image center, in `[0, 1]`.
struct Radial {
    cx: f32,
    cy: f32,
    d_max: f32,
}

impl Radial {
    fn new(img: &RasterImage) -> Self {
        let cx = (img.width() - 1) as f32 / 2.0;
        let cy = (img.height() - 1) as f32 / 2.0;
        Radial {
            cx,
            cy,
            d_max: (cx * cx + cy * cy).sqrt(),
        }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        if self.d_max == 0.0 {
            return 0.0;
        }
        let (dx, dy) = (x as f32 - self.cx, y as f32 - self.cy);
        (dx * dx + dy * dy).sqrt() / self.d_max
    }
}

fn gotham(p: Rgb) -> Rgb {
    let tone = clamp01(1.4 * (luma(p).powf(0.8) - 0.5) + 0.5);
    [0.9 * tone, 0.9 * tone, clamp01(1.1 * tone + 0.03)]
}

fn kelvin(p: Rgb) -> Rgb {
    const OVERLAY: Rgb = [1.0, 0.6, 0.0];
    let s = saturate(p, 1.2);
    [0, 1, 2].map(|i| clamp01(0.65 * s[i].powf(0.9) + 0.35 * OVERLAY[i]))
}

fn lomo(p: Rgb, r: f32) -> Rgb {
    let v = (1.0 - 0.6 * r * r).max(0.0);
    p.map(|c| clamp01(1.5 * (c - 0.5) + 0.5) * v)
}

fn nashville(p: Rgb) -> Rgb {
    let c = p.map(|c| 0.8 * (clamp01(1.2 * c + 0.06) - 0.5) + 0.5);
    clamp_rgb([c[0] + 0.05, c[1], c[2] - 0.05])
}

fn toaster(p: Rgb, r: f32) -> Rgb {
    let s = saturate(p, 1.3);
    let glow = 1.0 - r;
    let v = (1.0 - 0.5 * r * r).max(0.0);
    clamp_rgb([(s[0] + 0.25 * glow) * v, (s[1] + 0.10 * glow) * v, s[2] * v])
}

/// Applies a filter recipe; dimensions are preserved.
pub fn apply_filter(img: &RasterImage, f: FilterName) -> RasterImage {
    let radial = Radial::new(img);
    let w = img.width();
    let pixels = img
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let out = match f {
                FilterName::Gotham => gotham(p),
                FilterName::Kelvin => kelvin(p),
                FilterName::Nashville => nashville(p),
                FilterName::Lomo => lomo(p, radial.at(i % w, i / w)),
                FilterName::Toaster => toaster(p, radial.at(i % w, i / w)),
            };
            clamp_rgb(out)
        })
        .collect();
    RasterImage::from_raw(img.width(), img.height(), pixels)
}

/// Sobel gradient magnitude of the luma plane; border pixels get zero.
fn sobel_magnitude(img: &RasterImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let l = img.luma();
    let at = |x: usize, y: usize| l[y * w + x] as f64;
    let mut mag = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            mag[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    mag
}

/// Gradient-energy weighted centroid, in continuous coordinates where pixel
/// `(x, y)` covers `[x, x + 1) x [y, y + 1)`.
///
/// Falls back to the geometric center `(W/2, H/2)` on featureless images.
pub fn saliency_center(img: &RasterImage) -> Result<(f64, f64)> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::Degenerate(format!(
            "saliency needs at least 3x3 pixels, got {w}x{h}"
        )));
    }
    let mag = sobel_magnitude(img);
    let (mut total, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, m) in mag.iter().enumerate() {
        if *m > 0.0 {
            total += m;
            sx += m * ((i % w) as f64 + 0.5);
            sy += m * ((i / w) as f64 + 0.5);
        }
    }
    if total == 0.0 {
        return Ok((w as f64 / 2.0, h as f64 / 2.0));
    }
    Ok((sx / total, sy / total))
}

/// A crop rectangle inside the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

/// Window of the crop that removes `fraction` of the area, keeping the
/// aspect ratio and centering on the saliency center where bounds allow.
pub fn crop_window(img: &RasterImage, fraction: f64) -> Result<CropWindow> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "crop fraction must be in [0, 1), got {fraction}"
        )));
    }
    let (w_src, h_src) = (img.width(), img.height());
    let keep = (1.0 - fraction).sqrt();
    let w = (w_src as f64 * keep).floor() as usize;
    let h = (h_src as f64 * keep).floor() as usize;
    if w < 1 || h < 1 {
        return Err(Error::Degenerate(format!(
            "cropping {fraction} of a {w_src}x{h_src} image leaves nothing"
        )));
    }
    let (cx, cy) = if w_src >= 3 && h_src >= 3 {
        saliency_center(img)?
    } else {
        (w_src as f64 / 2.0, h_src as f64 / 2.0)
    };
    let place = |center: f64, len: usize, max: usize| -> usize {
        let start = (center - len as f64 / 2.0).round();
        start.clamp(0.0, (max - len) as f64) as usize
    };
    Ok(CropWindow {
        x0: place(cx, w, w_src),
        y0: place(cy, h, h_src),
        w,
        h,
    })
}

pub fn smart_crop(img: &RasterImage, fraction: f64) -> Result<(RasterImage, CropWindow)> {
    let win = crop_window(img, fraction)?;
    let out = img.crop(win.x0, win.y0, win.w, win.h)?;
    Ok((out, win))
}

/// Largest blur sigma, reached at half the image height from the focus row.
pub const TILT_SHIFT_MAX_SIGMA: u32 = 4;

/// Integer blur sigma for row `y` given the focus row; 0 inside the sharp band.
pub fn tilt_shift_sigma(height: usize, focus_y: usize, y: usize) -> u32 {
    let h = height as f64;
    let band = h / 6.0;
    let dist = (y as f64 - focus_y as f64).abs();
    if dist <= band {
        return 0;
    }
    let ramp = (dist - band) / (h / 2.0 - band);
    (TILT_SHIFT_MAX_SIGMA as f64 * ramp)
        .round()
        .clamp(0.0, TILT_SHIFT_MAX_SIGMA as f64) as u32
}

fn gaussian_kernel(sigma: u32) -> Vec<f64> {
    let s = sigma as f64;
    let radius = 3 * sigma as i64;
    (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * s * s)).exp())
        .collect()
}

/// Linear tilt-shift: rows within `H/6` of `focus_y` stay sharp, the rest get
/// a separable Gaussian blur whose sigma grows linearly to 4 px at `H/2`.
///
/// Kernels are truncated at `3 sigma` and renormalized over in-bounds taps.
pub fn tilt_shift(img: &RasterImage, focus_y: usize) -> Result<RasterImage> {
    let (w, h) = (img.width(), img.height());
    if focus_y >= h {
        return Err(Error::Config(format!(
            "focus row {focus_y} outside image of height {h}"
        )));
    }
    let kernels: Vec<Vec<f64>> = (0..=TILT_SHIFT_MAX_SIGMA)
        .map(|s| if s == 0 { vec![1.0] } else { gaussian_kernel(s) })
        .collect();
    let mut out = img.pixels().to_vec();
    let mut column_pass = vec![[0.0f64; 3]; w];
    for y in 0..h {
        let sigma = tilt_shift_sigma(h, focus_y, y);
        if sigma == 0 {
            continue;
        }
        let kernel = &kernels[sigma as usize];
        let radius = (kernel.len() / 2) as i64;
        // vertical pass for this output row
        for (x, acc) in column_pass.iter_mut().enumerate() {
            let mut sum = [0.0f64; 3];
            let mut norm = 0.0;
            for (k, wt) in kernel.iter().enumerate() {
                let yy = y as i64 + k as i64 - radius;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                let p = img.get(x, yy as usize);
                for c in 0..3 {
                    sum[c] += wt * p[c] as f64;
                }
                norm += wt;
            }
            *acc = sum.map(|s| s / norm);
        }
        // horizontal pass
        for x in 0..w {
            let mut sum = [0.0f64; 3];
            let mut norm = 0.0;
            for (k, wt) in kernel.iter().enumerate() {
                let xx = x as i64 + k as i64 - radius;
                if xx < 0 || xx >= w as i64 {
                    continue;
                }
                let p = column_pass[xx as usize];
                for c in 0..3 {
                    sum[c] += wt * p[c];
                }
                norm += wt;
            }
            out[y * w + x] = clamp_rgb(sum.map(|s| (s / norm) as f32));
        }
    }
    Ok(RasterImage::from_raw(w, h, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::encode_ppm;

    fn gray(w: usize, h: usize, v: f32) -> RasterImage {
        RasterImage::filled(w, h, [v; 3]).unwrap()
    }

    #[test]
    fn gotham_mid_gray() {
        let out = apply_filter(&gray(1, 1, 0.5), FilterName::Gotham).get(0, 0);
        for (got, want) in out.iter().zip([0.5436, 0.5436, 0.6944]) {
            assert!((got - want).abs() < 1e-3, "{out:?}");
        }
    }

    #[test]
    fn lomo_fixes_center_mid_gray() {
        let out = apply_filter(&gray(5, 5, 0.5), FilterName::Lomo);
        assert_eq!(out.get(2, 2), [0.5; 3]);
    }

    #[test]
    fn vignettes_darken_corners() {
        let img = gray(9, 7, 0.7);
        for f in [FilterName::Lomo, FilterName::Toaster] {
            let out = apply_filter(&img, f);
            let center = out.get(4, 3);
            for (x, y) in [(0, 0), (8, 0), (0, 6), (8, 6)] {
                let corner = out.get(x, y);
                assert!(corner.iter().sum::<f32>() < center.iter().sum::<f32>(), "{f}");
            }
        }
    }

    #[test]
    fn filters_are_deterministic() {
        let img = RasterImage::from_fn(16, 12, |x, y| {
            [x as f32 / 15.0, y as f32 / 11.0, ((x * y) % 7) as f32 / 6.0]
        })
        .unwrap();
        for f in FilterName::ALL {
            assert_eq!(encode_ppm(&apply_filter(&img, f)), encode_ppm(&apply_filter(&img, f)));
        }
    }

    #[test]
    fn filter_names_parse() {
        assert_eq!("Toaster".parse::<FilterName>().unwrap(), FilterName::Toaster);
        assert!("valencia".parse::<FilterName>().is_err());
        assert_eq!("crop20".parse::<Enhancement>().unwrap(), Enhancement::Crop(0.2));
        assert_eq!("tiltshift".parse::<Enhancement>().unwrap(), Enhancement::TiltShift);
        assert_eq!(
            "lomo".parse::<Enhancement>().unwrap(),
            Enhancement::Filter(FilterName::Lomo)
        );
    }

    #[test]
    fn saliency_fallback_and_errors() {
        assert_eq!(saliency_center(&gray(100, 100, 0.3)).unwrap(), (50.0, 50.0));
        assert!(matches!(saliency_center(&gray(2, 10, 0.3)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn saliency_finds_corner_square() {
        let img = RasterImage::from_fn(100, 100, |x, y| if x < 10 && y < 10 { [1.0; 3] } else { [0.0; 3] }).unwrap();
        // oracle: weighted centroid of the Sobel response computed independently
        let mut acc = (0.0, 0.0, 0.0);
        for y in 1..99usize {
            for x in 1..99usize {
                let v = |xx: usize, yy: usize| if xx < 10 && yy < 10 { 1.0 } else { 0.0 };
                let gx = v(x + 1, y - 1) + 2.0 * v(x + 1, y) + v(x + 1, y + 1)
                    - v(x - 1, y - 1)
                    - 2.0 * v(x - 1, y)
                    - v(x - 1, y + 1);
                let gy = v(x - 1, y + 1) + 2.0 * v(x, y + 1) + v(x + 1, y + 1)
                    - v(x - 1, y - 1)
                    - 2.0 * v(x, y - 1)
                    - v(x + 1, y - 1);
                let m = f64::hypot(gx, gy);
                acc.0 += m;
                acc.1 += m * (x as f64 + 0.5);
                acc.2 += m * (y as f64 + 0.5);
            }
        }
        let (cx, cy) = saliency_center(&img).unwrap();
        assert!((cx - acc.1 / acc.0).abs() < 1e-3);
        assert!((cy - acc.2 / acc.0).abs() < 1e-3);
        assert!((0.0..=10.0).contains(&cx) && (0.0..=10.0).contains(&cy));
    }

    #[test]
    fn saliency_symmetric_pattern_is_centered() {
        let img = RasterImage::from_fn(40, 30, |x, y| {
            let xm = x.min(39 - x);
            if (xm / 3 + y / 5) % 2 == 0 {
                [0.9; 3]
            } else {
                [0.1; 3]
            }
        })
        .unwrap();
        let (cx, _) = saliency_center(&img).unwrap();
        assert!((cx - 20.0).abs() <= 0.5, "{cx}");
    }

    #[test]
    fn crop_window_sizes() {
        let img = gray(1000, 800, 0.4);
        let (out, win) = smart_crop(&img, 0.2).unwrap();
        assert_eq!((win.w, win.h), (894, 715));
        assert_eq!((out.width(), out.height()), (894, 715));
        // uniform image: centered on the geometric center
        assert_eq!((win.x0, win.y0), (53, 43));

        let (out, win) = smart_crop(&img, 0.0).unwrap();
        assert_eq!(
            win,
            CropWindow {
                x0: 0,
                y0: 0,
                w: 1000,
                h: 800
            }
        );
        assert_eq!(out, img);

        let win = crop_window(&img, 0.4).unwrap();
        let cx = win.x0 as f64 + win.w as f64 / 2.0;
        let cy = win.y0 as f64 + win.h as f64 / 2.0;
        assert!((cx - 500.0).abs() <= 1.0 && (cy - 400.0).abs() <= 1.0);

        assert!(crop_window(&img, 1.0).unwrap_err().is_config());
        assert!(crop_window(&img, -0.1).is_err());
        assert!(matches!(crop_window(&gray(1, 1, 0.0), 0.5), Err(Error::Degenerate(_))));
    }

    #[test]
    fn crop_is_clamped_to_bounds() {
        let img = RasterImage::from_fn(100, 80, |x, y| if x > 90 && y > 70 { [1.0; 3] } else { [0.0; 3] }).unwrap();
        let win = crop_window(&img, 0.4).unwrap();
        assert_eq!(win.x0 + win.w, 100);
        assert_eq!(win.y0 + win.h, 80);
    }

    #[test]
    fn tilt_shift_constant_and_band() {
        let img = gray(30, 60, 0.37);
        let out = tilt_shift(&img, 10).unwrap();
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-6);
            }
        }
        assert_eq!(encode_ppm(&out), encode_ppm(&img));
        assert!(tilt_shift(&img, 60).unwrap_err().is_config());
    }

    #[test]
    fn tilt_shift_sigma_ramp() {
        // H = 60: band 10 px, full blur 30 px from focus
        assert_eq!(tilt_shift_sigma(60, 0, 10), 0);
        assert_eq!(tilt_shift_sigma(60, 0, 20), 2);
        assert_eq!(tilt_shift_sigma(60, 0, 30), 4);
        assert_eq!(tilt_shift_sigma(60, 0, 59), 4);
        assert_eq!(tilt_shift_sigma(60, 30, 25), 0);
    }

    #[test]
    fn tilt_shift_matches_direct_convolution() {
        let (w, h) = (24, 60);
        let img = RasterImage::from_fn(w, h, |x, _| [(x % 2) as f32; 3]).unwrap();
        let out = tilt_shift(&img, 0).unwrap();
        let y = 20;
        assert_eq!(tilt_shift_sigma(h, 0, y), 2);
        // direct 2-D sum over the truncated kernel with border renormalization
        let g = |d: i64| (-(d * d) as f64 / 8.0).exp();
        for x in 0..w {
            let (mut num, mut den) = (0.0, 0.0);
            for dy in -6i64..=6 {
                for dx in -6i64..=6 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx < 0 || xx >= w as i64 || yy < 0 || yy >= h as i64 {
                        continue;
                    }
                    let wt = g(dx) * g(dy);
                    num += wt * (xx % 2) as f64;
                    den += wt;
                }
            }
            let got = out.get(x, y)[0] as f64;
            assert!((got - num / den).abs() < 1e-6, "x={x}: {got} vs {}", num / den);
            if (2..w - 2).contains(&x) {
                assert!((got - 0.5).abs() < 0.1);
            }
        }
        // in-focus band untouched
        for y in 0..=10 {
            assert_eq!(out.row(y), img.row(y));
        }
    }
}
