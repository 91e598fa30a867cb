//! A SIFT-like extractor: difference-of-Gaussians extrema, dominant gradient
//! orientations and 4x4x8 gradient histograms.

use std::f32::consts::TAU;

use super::{finalize_descriptor, Descriptor, FeatureExtractor, FeatureSet, Keypoint, DESCRIPTOR_LEN};
use crate::error::{Error, Result};
use crate::image_io::RasterImage;

#[derive(Debug, Clone, PartialEq)]
pub struct SiftParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    /// Blur of the first scale of each octave.
    pub base_sigma: f32,
    /// Blur already present in the input.
    pub assumed_blur: f32,
    pub contrast_threshold: f32,
    pub edge_ratio: f32,
    /// Keep only the strongest responses when set.
    pub max_features: Option<usize>,
}

impl Default for SiftParams {
    fn default() -> Self {
        SiftParams {
            octaves: 4,
            scales_per_octave: 3,
            base_sigma: 1.6,
            assumed_blur: 0.5,
            contrast_threshold: 0.03,
            edge_ratio: 10.0,
            max_features: None,
        }
    }
}

pub const MIN_IMAGE_SIZE: usize = 32;
const MIN_OCTAVE_SIZE: usize = 16;
const BORDER: usize = 5;
const ORI_BINS: usize = 36;
const ORI_SIGMA_FACTOR: f32 = 1.5;
const ORI_PEAK_RATIO: f32 = 0.8;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const DESC_SCALE_FACTOR: f32 = 3.0;
const REFINE_STEPS: usize = 5;

#[derive(Debug, Clone)]
pub struct SiftExtractor {
    params: SiftParams,
}

impl SiftExtractor {
    pub fn new(params: SiftParams) -> Self {
        SiftExtractor { params }
    }

    pub fn params(&self) -> &SiftParams {
        &self.params
    }
}

impl Default for SiftExtractor {
    fn default() -> Self {
        SiftExtractor::new(SiftParams::default())
    }
}

impl FeatureExtractor for SiftExtractor {
    fn extract(&self, image_id: &str, img: &RasterImage) -> Result<FeatureSet> {
        if img.width() < MIN_IMAGE_SIZE || img.height() < MIN_IMAGE_SIZE {
            return Err(Error::Degenerate(format!(
                "feature extraction needs at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE} pixels, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let mut found = detect(img, &self.params);
        if let Some(cap) = self.params.max_features {
            // stable: ties keep detection order
            found.sort_by(|a, b| b.response.abs().total_cmp(&a.response.abs()));
            found.truncate(cap);
        }
        let (keypoints, descriptors) = found.into_iter().map(|f| (f.keypoint, f.descriptor)).unzip();
        FeatureSet::new(image_id, keypoints, descriptors)
    }
}

/// Single-channel float plane.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    fn downsample(&self) -> Plane {
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.at(2 * x, 2 * y));
            }
        }
        Plane { w, h, data }
    }

    fn sub(&self, other: &Plane) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }
}

fn gaussian_blur(src: &Plane, sigma: f32) -> Plane {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let kernel: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / sum).collect();
    let (w, h) = (src.w, src.h);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        let row = &src.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * row[clamp(x as isize + k as isize - radius as isize, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for (k, kv) in kernel.iter().enumerate() {
            let yy = clamp(y as isize + k as isize - radius as isize, h);
            let src_row = &tmp[yy * w..(yy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    Plane { w, h, data: out }
}

struct Octave {
    /// Power-of-two factor mapping octave pixels to image pixels.
    step: f32,
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

struct Found {
    keypoint: Keypoint,
    descriptor: Descriptor,
    response: f32,
}

fn build_pyramid(img: &RasterImage, p: &SiftParams) -> Vec<Octave> {
    let s = p.scales_per_octave;
    let k = 2f32.powf(1.0 / s as f32);
    let luma = Plane {
        w: img.width(),
        h: img.height(),
        data: img.luma(),
    };
    let init = (p.base_sigma.powi(2) - p.assumed_blur.powi(2)).max(0.01).sqrt();
    let mut base = gaussian_blur(&luma, init);
    // incremental blurs between consecutive scales
    let steps: Vec<f32> = (1..s + 3)
        .map(|i| {
            let prev = p.base_sigma * k.powi(i as i32 - 1);
            let total = prev * k;
            (total * total - prev * prev).sqrt()
        })
        .collect();

    let mut octaves = Vec::new();
    for o in 0..p.octaves {
        if base.w < MIN_OCTAVE_SIZE || base.h < MIN_OCTAVE_SIZE {
            break;
        }
        let mut gauss = vec![base.clone()];
        for sigma in &steps {
            let next = gaussian_blur(gauss.last().unwrap(), *sigma);
            gauss.push(next);
        }
        let dog = gauss.windows(2).map(|w| w[1].sub(&w[0])).collect();
        let next_base = gauss[s].downsample();
        octaves.push(Octave {
            step: (1u32 << o) as f32,
            gauss,
            dog,
        });
        base = next_base;
    }
    octaves
}

fn detect(img: &RasterImage, p: &SiftParams) -> Vec<Found> {
    let octaves = build_pyramid(img, p);
    let s = p.scales_per_octave;
    let prefilter = 0.5 * p.contrast_threshold / s as f32;
    let mut out = Vec::new();
    for oct in &octaves {
        let (w, h) = (oct.dog[0].w, oct.dog[0].h);
        for layer in 1..=s {
            let (below, cur, above) = (&oct.dog[layer - 1], &oct.dog[layer], &oct.dog[layer + 1]);
            for y in BORDER..h - BORDER {
                for x in BORDER..w - BORDER {
                    let v = cur.at(x, y);
                    if v.abs() <= prefilter || !is_extremum(below, cur, above, x, y, v) {
                        continue;
                    }
                    let Some(cand) = refine(oct, layer, x, y, p) else {
                        continue;
                    };
                    for orientation in orientations(oct, &cand) {
                        let Some(descriptor) = describe(oct, &cand, orientation) else {
                            continue;
                        };
                        out.push(Found {
                            keypoint: Keypoint {
                                x: cand.x * oct.step,
                                y: cand.y * oct.step,
                                scale: cand.sigma * oct.step,
                                orientation,
                            },
                            descriptor,
                            response: cand.response,
                        });
                    }
                }
            }
        }
    }
    out
}

fn is_extremum(below: &Plane, cur: &Plane, above: &Plane, x: usize, y: usize, v: f32) -> bool {
    let mut is_max = true;
    let mut is_min = true;
    for (pi, plane) in [below, cur, above].into_iter().enumerate() {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if pi == 1 && xx == x && yy == y {
                    continue;
                }
                let n = plane.at(xx, yy);
                is_max &= v > n;
                is_min &= v < n;
                if !is_max && !is_min {
                    return false;
                }
            }
        }
    }
    true
}

/// Sub-pixel keypoint in octave coordinates.
struct Candidate {
    x: f32,
    y: f32,
    /// Blur relative to the octave's pixels.
    sigma: f32,
    /// Gaussian layer nearest to `sigma`.
    layer: usize,
    response: f32,
}

fn refine(oct: &Octave, layer: usize, x: usize, y: usize, p: &SiftParams) -> Option<Candidate> {
    let s = p.scales_per_octave;
    let (w, h) = (oct.dog[0].w, oct.dog[0].h);
    let (mut xi, mut yi, mut li) = (x, y, layer);
    let mut offset = [0f32; 3];
    let mut grad = [0f32; 3];
    let mut converged = false;
    for _ in 0..REFINE_STEPS {
        let d = |l: usize, xx: usize, yy: usize| oct.dog[l].at(xx, yy);
        let v = d(li, xi, yi);
        grad = [
            0.5 * (d(li, xi + 1, yi) - d(li, xi - 1, yi)),
            0.5 * (d(li, xi, yi + 1) - d(li, xi, yi - 1)),
            0.5 * (d(li + 1, xi, yi) - d(li - 1, xi, yi)),
        ];
        let dxx = d(li, xi + 1, yi) + d(li, xi - 1, yi) - 2.0 * v;
        let dyy = d(li, xi, yi + 1) + d(li, xi, yi - 1) - 2.0 * v;
        let dss = d(li + 1, xi, yi) + d(li - 1, xi, yi) - 2.0 * v;
        let dxy =
            0.25 * (d(li, xi + 1, yi + 1) - d(li, xi - 1, yi + 1) - d(li, xi + 1, yi - 1) + d(li, xi - 1, yi - 1));
        let dxs =
            0.25 * (d(li + 1, xi + 1, yi) - d(li + 1, xi - 1, yi) - d(li - 1, xi + 1, yi) + d(li - 1, xi - 1, yi));
        let dys =
            0.25 * (d(li + 1, xi, yi + 1) - d(li + 1, xi, yi - 1) - d(li - 1, xi, yi + 1) + d(li - 1, xi, yi - 1));
        let hess = [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]];
        offset = solve3(hess, grad.map(|g| -g))?;
        if offset.iter().all(|o| o.abs() < 0.5) {
            converged = true;
            break;
        }
        if offset.iter().any(|o| o.abs() > 1e3) {
            return None;
        }
        let nx = xi as isize + offset[0].round() as isize;
        let ny = yi as isize + offset[1].round() as isize;
        let nl = li as isize + offset[2].round() as isize;
        if nl < 1
            || nl > s as isize
            || nx < BORDER as isize
            || nx >= (w - BORDER) as isize
            || ny < BORDER as isize
            || ny >= (h - BORDER) as isize
        {
            return None;
        }
        (xi, yi, li) = (nx as usize, ny as usize, nl as usize);
    }
    if !converged {
        return None;
    }
    let v = oct.dog[li].at(xi, yi);
    let response = v + 0.5 * (grad[0] * offset[0] + grad[1] * offset[1] + grad[2] * offset[2]);
    if response.abs() * (s as f32) < p.contrast_threshold {
        return None;
    }
    // principal curvature ratio
    let d = |xx: usize, yy: usize| oct.dog[li].at(xx, yy);
    let dxx = d(xi + 1, yi) + d(xi - 1, yi) - 2.0 * v;
    let dyy = d(xi, yi + 1) + d(xi, yi - 1) - 2.0 * v;
    let dxy = 0.25 * (d(xi + 1, yi + 1) - d(xi - 1, yi + 1) - d(xi + 1, yi - 1) + d(xi - 1, yi - 1));
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    let r = p.edge_ratio;
    if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
        return None;
    }
    let scale_pos = li as f32 + offset[2];
    Some(Candidate {
        x: xi as f32 + offset[0],
        y: yi as f32 + offset[1],
        sigma: p.base_sigma * 2f32.powf(scale_pos / s as f32),
        layer: li,
        response,
    })
}

fn solve3(a: [[f32; 3]; 3], b: [f32; 3]) -> Option<[f32; 3]> {
    let det = |m: [[f32; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    if d.abs() < 1e-12 {
        return None;
    }
    let mut out = [0f32; 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for row in 0..3 {
            m[row][col] = b[row];
        }
        *o = det(m) / d;
    }
    Some(out)
}

/// Gradient magnitude and angle (`atan2(dy, dx)`, y down) at an interior pixel.
#[inline]
fn gradient(plane: &Plane, x: usize, y: usize) -> (f32, f32) {
    let dx = plane.at(x + 1, y) - plane.at(x - 1, y);
    let dy = plane.at(x, y + 1) - plane.at(x, y - 1);
    ((dx * dx + dy * dy).sqrt(), dy.atan2(dx))
}

fn orientations(oct: &Octave, c: &Candidate) -> Vec<f32> {
    let plane = &oct.gauss[c.layer];
    let sigma = ORI_SIGMA_FACTOR * c.sigma;
    let radius = (3.0 * sigma).round() as isize;
    let (cx, cy) = (c.x.round() as isize, c.y.round() as isize);
    let mut hist = [0f32; ORI_BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (x, y) = (cx + dx, cy + dy);
            if x < 1 || y < 1 || x >= plane.w as isize - 1 || y >= plane.h as isize - 1 {
                continue;
            }
            let (mag, ang) = gradient(plane, x as usize, y as usize);
            let wt = (-((dx * dx + dy * dy) as f32) / (2.0 * sigma * sigma)).exp();
            let bin = ((ang.rem_euclid(TAU)) * ORI_BINS as f32 / TAU).round() as usize % ORI_BINS;
            hist[bin] += wt * mag;
        }
    }
    // circular [1 4 6 4 1] smoothing
    let mut smooth = [0f32; ORI_BINS];
    for i in 0..ORI_BINS {
        let at = |o: isize| hist[(i as isize + o).rem_euclid(ORI_BINS as isize) as usize];
        smooth[i] = (at(-2) + at(2)) / 16.0 + 4.0 * (at(-1) + at(1)) / 16.0 + 6.0 * at(0) / 16.0;
    }
    let max = smooth.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..ORI_BINS {
        let l = smooth[(i + ORI_BINS - 1) % ORI_BINS];
        let r = smooth[(i + 1) % ORI_BINS];
        let v = smooth[i];
        if v > l && v > r && v >= ORI_PEAK_RATIO * max {
            let shift = 0.5 * (l - r) / (l - 2.0 * v + r);
            let bin = i as f32 + shift;
            out.push((bin * TAU / ORI_BINS as f32).rem_euclid(TAU) % TAU);
        }
    }
    out
}

fn describe(oct: &Octave, c: &Candidate, orientation: f32) -> Option<Descriptor> {
    let plane = &oct.gauss[c.layer];
    let hist_width = DESC_SCALE_FACTOR * c.sigma;
    let d = DESC_WIDTH as f32;
    let radius = (hist_width * std::f32::consts::SQRT_2 * (d + 1.0) * 0.5).round() as isize;
    let (cos_t, sin_t) = (orientation.cos() / hist_width, orientation.sin() / hist_width);
    let (cx, cy) = (c.x.round() as isize, c.y.round() as isize);
    let bins_per_rad = DESC_BINS as f32 / TAU;
    let exp_scale = -1.0 / (d * d * 0.5);
    // (d + 2)^2 spatial cells x bins, padded to absorb interpolation spill
    let side = DESC_WIDTH + 2;
    let mut hist = vec![0f32; side * side * (DESC_BINS + 2)];

    for dy in -radius..=radius {
        for dx in -radius..=radius {
            // rotate the offset into the keypoint frame
            let c_rot = dx as f32 * cos_t + dy as f32 * sin_t;
            let r_rot = -(dx as f32) * sin_t + dy as f32 * cos_t;
            let rbin = r_rot + d / 2.0 - 0.5;
            let cbin = c_rot + d / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= d || cbin <= -1.0 || cbin >= d {
                continue;
            }
            let (x, y) = (cx + dx, cy + dy);
            if x < 1 || y < 1 || x >= plane.w as isize - 1 || y >= plane.h as isize - 1 {
                continue;
            }
            let (mag, ang) = gradient(plane, x as usize, y as usize);
            let wt = ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp() * mag;
            let obin = (ang - orientation).rem_euclid(TAU) * bins_per_rad;

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            let (r0, c0) = (r0 as isize, c0 as isize);
            let o0 = o0 as isize;
            for (ri, wr) in [(0, 1.0 - fr), (1, fr)] {
                for (ci, wc) in [(0, 1.0 - fc), (1, fc)] {
                    for (oi, wo) in [(0, 1.0 - fo), (1, fo)] {
                        let rr = (r0 + ri + 1) as usize;
                        let cc = (c0 + ci + 1) as usize;
                        let oo = ((o0 + oi).rem_euclid(DESC_BINS as isize)) as usize;
                        hist[(rr * side + cc) * (DESC_BINS + 2) + oo] += wt * wr * wc * wo;
                    }
                }
            }
        }
    }
    let mut raw = [0f64; DESCRIPTOR_LEN];
    for r in 0..DESC_WIDTH {
        for c in 0..DESC_WIDTH {
            for o in 0..DESC_BINS {
                raw[(r * DESC_WIDTH + c) * DESC_BINS + o] = hist[((r + 1) * side + c + 1) * (DESC_BINS + 2) + o] as f64;
            }
        }
    }
    finalize_descriptor(&raw)
}
