//! Seeded synthetic data: planted geometric transforms, feature-level
//! location corpora and small rendered scenes.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::features::{finalize_descriptor, random_descriptor, Descriptor, FeatureSet, Keypoint, DESCRIPTOR_LEN};
use crate::geo::{GeoPoint, METERS_PER_DEGREE};
use crate::image_io::RasterImage;
use crate::index::ImageRecord;
use crate::pgm::Correspondence;
use crate::vocab::VisualVocabulary;

#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub correspondences: Vec<Correspondence>,
    /// True for correspondences generated by the planted transform.
    pub planted: Vec<bool>,
    pub rotation: f64,
    pub log_scale: f64,
}

/// `inliers` correspondences related by a similarity with the given rotation
/// and log-scale, followed by `outliers` unrelated ones.
pub fn planted_correspondences(
    seed: u64,
    inliers: usize,
    outliers: usize,
    rotation: f64,
    log_scale: f64,
) -> PlantedInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = log_scale.exp();
    let (s, c) = rotation.sin_cos();
    let (tx, ty) = (rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
    let mut correspondences = Vec::with_capacity(inliers + outliers);
    let query_kp = |rng: &mut ChaCha8Rng| Keypoint {
        x: rng.random_range(0.0..640.0),
        y: rng.random_range(0.0..480.0),
        scale: rng.random_range(1.5..8.0),
        orientation: rng.random_range(0.0..TAU) as f32,
    };
    for _ in 0..inliers {
        let q = query_kp(&mut rng);
        let (x, y) = (q.x as f64, q.y as f64);
        let db = Keypoint {
            x: (scale * (c * x - s * y) + tx) as f32,
            y: (scale * (s * x + c * y) + ty) as f32,
            scale: (q.scale as f64 * scale) as f32,
            orientation: ((q.orientation as f64 + rotation).rem_euclid(TAU)) as f32,
        };
        correspondences.push(Correspondence {
            query: q,
            db,
            hamming: 0,
        });
    }
    for _ in 0..outliers {
        let q = query_kp(&mut rng);
        let db = Keypoint {
            x: rng.random_range(-700.0..700.0),
            y: rng.random_range(-700.0..700.0),
            scale: rng.random_range(0.75..16.0),
            orientation: rng.random_range(0.0..TAU) as f32,
        };
        correspondences.push(Correspondence {
            query: q,
            db,
            hamming: 0,
        });
    }
    let mut planted = vec![true; inliers];
    planted.resize(inliers + outliers, false);
    PlantedInstance {
        correspondences,
        planted,
        rotation,
        log_scale,
    }
}

/// Adds Gaussian noise of standard deviation `sigma` (relative to a unit
/// descriptor) to `d` and re-normalizes.
pub fn perturb_descriptor<R: Rng>(rng: &mut R, d: &Descriptor, sigma: f64) -> Descriptor {
    loop {
        let mut raw = [0f64; DESCRIPTOR_LEN];
        for (r, v) in raw.iter_mut().zip(d) {
            let n: f64 = rng.sample(StandardNormal);
            *r = (*v as f64 + sigma * n).max(0.0);
        }
        if let Some(out) = finalize_descriptor(&raw) {
            return out;
        }
    }
}

/// A point about `meters` from `center` in a random direction.
pub fn jitter<R: Rng>(rng: &mut R, center: GeoPoint, meters: f64) -> GeoPoint {
    let angle = rng.random_range(0.0..TAU);
    let r = meters * rng.random::<f64>().sqrt();
    let dlat = r * angle.sin() / METERS_PER_DEGREE;
    let dlon = r * angle.cos() / (METERS_PER_DEGREE * center.lat().to_radians().cos());
    GeoPoint::new(center.lat() + dlat, center.lon() + dlon).expect("jitter stays in range")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationCorpusParams {
    pub locations: usize,
    pub images_per_location: usize,
    /// Landmarks per location scene.
    pub landmarks: usize,
    /// Landmarks visible in each view.
    pub visible: usize,
    /// Unrelated random features per view.
    pub clutter: usize,
    /// Descriptor noise between views of one landmark.
    pub descriptor_noise: f64,
    /// Geo-tag spread around the location center.
    pub spread_m: f64,
}

impl Default for LocationCorpusParams {
    fn default() -> Self {
        LocationCorpusParams {
            locations: 5,
            images_per_location: 10,
            landmarks: 60,
            visible: 40,
            clutter: 15,
            descriptor_noise: 0.01,
            spread_m: 20.0,
        }
    }
}

struct Landmark {
    x: f64,
    y: f64,
    scale: f64,
    orientation: f64,
    descriptor: Descriptor,
}

/// Background images of a few far-apart locations. Views of one location
/// share landmarks seen under a random similarity transform.
#[derive(Debug, Clone)]
pub struct LocationCorpus {
    pub centers: Vec<GeoPoint>,
    pub background: Vec<ImageRecord>,
}

impl LocationCorpus {
    pub fn generate(seed: u64, params: &LocationCorpusParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers = Vec::new();
        let mut background = Vec::new();
        for loc in 0..params.locations {
            let center =
                GeoPoint::new(rng.random_range(-60.0..60.0), rng.random_range(-180.0..180.0)).expect("in range");
            centers.push(center);
            let landmarks: Vec<Landmark> = (0..params.landmarks)
                .map(|_| Landmark {
                    x: rng.random_range(0.0..640.0),
                    y: rng.random_range(0.0..480.0),
                    scale: rng.random_range(1.5..8.0),
                    orientation: rng.random_range(0.0..TAU),
                    descriptor: random_descriptor(&mut rng),
                })
                .collect();
            for view in 0..params.images_per_location {
                let rotation: f64 = rng.random_range(-0.5..0.5);
                let scale: f64 = rng.random_range(0.7..1.4);
                let (s, c) = rotation.sin_cos();
                let (tx, ty) = (rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0));
                let mut picks: Vec<usize> = (0..landmarks.len()).collect();
                for i in 0..params.visible.min(picks.len()) {
                    let j = rng.random_range(i..picks.len());
                    picks.swap(i, j);
                }
                picks.truncate(params.visible);
                picks.sort_unstable();
                let mut kps = Vec::new();
                let mut descs = Vec::new();
                for &p in &picks {
                    let l = &landmarks[p];
                    kps.push(Keypoint {
                        x: (scale * (c * l.x - s * l.y) + tx) as f32,
                        y: (scale * (s * l.x + c * l.y) + ty) as f32,
                        scale: (l.scale * scale) as f32,
                        orientation: ((l.orientation + rotation).rem_euclid(TAU)) as f32,
                    });
                    descs.push(perturb_descriptor(&mut rng, &l.descriptor, params.descriptor_noise));
                }
                for _ in 0..params.clutter {
                    kps.push(random_keypoint_in(&mut rng));
                    descs.push(random_descriptor(&mut rng));
                }
                let id = format!("loc{loc:02}-view{view:03}");
                background.push(ImageRecord {
                    features: FeatureSet::new(id.clone(), kps, descs).expect("valid synthetic features"),
                    geo: jitter(&mut rng, center, params.spread_m),
                    tags: vec![format!("place{loc}"), "photo".into()],
                    id,
                });
            }
        }
        LocationCorpus { centers, background }
    }

    /// Copies of `n` distinct background images (every `stride`-th one)
    /// under new ids, with their ground-truth locations.
    pub fn duplicate_targets(&self, n: usize) -> Vec<(FeatureSet, GeoPoint)> {
        let stride = (self.background.len() / n.max(1)).max(1);
        self.background
            .iter()
            .step_by(stride)
            .take(n)
            .enumerate()
            .map(|(i, r)| (r.features.clone().with_id(format!("target{i:03}")), r.geo))
            .collect()
    }
}

fn random_keypoint_in<R: Rng>(rng: &mut R) -> Keypoint {
    Keypoint {
        x: rng.random_range(0.0..640.0),
        y: rng.random_range(0.0..480.0),
        scale: rng.random_range(1.5..8.0),
        orientation: rng.random_range(0.0..TAU) as f32,
    }
}

/// A large random collection and a vocabulary built directly from the word
/// prototypes its descriptors are drawn around.
pub fn prototype_collection(
    seed: u64,
    images: usize,
    per_image: usize,
    k: usize,
) -> Result<(VisualVocabulary, Vec<ImageRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Descriptor> = (0..k).map(|_| random_descriptor(&mut rng)).collect();
    let centroids: Vec<f64> = prototypes.iter().flat_map(|d| d.iter().map(|v| *v as f64)).collect();
    let mut vocab = VisualVocabulary::from_centroids(centroids, seed)?;
    let mut records = Vec::with_capacity(images);
    for i in 0..images {
        let mut kps = Vec::with_capacity(per_image);
        let mut descs = Vec::with_capacity(per_image);
        for _ in 0..per_image {
            let p = &prototypes[rng.random_range(0..k)];
            kps.push(random_keypoint_in(&mut rng));
            descs.push(perturb_descriptor(&mut rng, p, 0.03));
        }
        let id = format!("img{i:06}");
        records.push(ImageRecord {
            features: FeatureSet::new(id.clone(), kps, descs)?,
            geo: GeoPoint::new(rng.random_range(-80.0..80.0), rng.random_range(-180.0..180.0))?,
            tags: vec![],
            id,
        });
    }
    let sample: Vec<Descriptor> = records
        .iter()
        .step_by((images / 2000).max(1))
        .flat_map(|r| r.features.descriptors().iter().copied())
        .collect();
    vocab.compute_he_medians(&sample);
    let words: Vec<Vec<u32>> = records
        .iter()
        .step_by((images / 2000).max(1))
        .map(|r| r.features.descriptors().iter().map(|d| vocab.assign(d)).collect())
        .collect();
    vocab.set_idf_from_word_sets(words.iter().map(Vec::as_slice));
    Ok((vocab, records))
}

/// A textured scene of soft blobs and bars over a smooth gradient.
pub fn render_scene(seed: u64, width: usize, height: usize) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = [
        rng.random_range(0.2..0.5),
        rng.random_range(0.2..0.5),
        rng.random_range(0.2..0.5),
    ];
    let area = (width * height) as f64;
    let n_blobs = (area / 500.0).ceil() as usize;
    let blobs: Vec<(f64, f64, f64, [f32; 3])> = (0..n_blobs)
        .map(|_| {
            (
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
                rng.random_range(1.5..6.0),
                [
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ],
            )
        })
        .collect();
    let bars: Vec<(f64, f64, f64, f64, f32)> = (0..n_blobs / 4)
        .map(|_| {
            let x = rng.random_range(0.0..width as f64);
            let y = rng.random_range(0.0..height as f64);
            (
                x,
                y,
                x + rng.random_range(3.0..20.0),
                y + rng.random_range(3.0..20.0),
                rng.random_range(-0.3..0.3),
            )
        })
        .collect();
    RasterImage::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let g = 0.1 * (fx / width as f64) as f32;
        let mut p = [base[0] + g, base[1], base[2] - g];
        for &(bx, by, r, col) in &blobs {
            let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
            if d2 < 16.0 * r * r {
                let w = (-d2 / (2.0 * r * r)).exp() as f32;
                for ch in 0..3 {
                    p[ch] += w * col[ch];
                }
            }
        }
        for &(x0, y0, x1, y1, v) in &bars {
            if fx >= x0 && fx < x1 && fy >= y0 && fy < y1 {
                for ch in p.iter_mut() {
                    *ch += v;
                }
            }
        }
        p
    })
    .expect("non-empty scene")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::haversine_m;

    #[test]
    fn planted_instance_is_exact() {
        let inst = planted_correspondences(1, 12, 5, 0.5, 0.4);
        assert_eq!(inst.correspondences.len(), 17);
        assert_eq!(inst.planted.iter().filter(|p| **p).count(), 12);
        for c in &inst.correspondences[..12] {
            assert!(((c.db.scale / c.query.scale) as f64 - 0.4f64.exp()).abs() < 1e-4);
        }
    }

    #[test]
    fn corpus_is_reproducible_and_tagged() {
        let p = LocationCorpusParams::default();
        let a = LocationCorpus::generate(9, &p);
        let b = LocationCorpus::generate(9, &p);
        assert_eq!(a.background.len(), 50);
        for (x, y) in a.background.iter().zip(&b.background) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.geo, y.geo);
        }
        for (i, r) in a.background.iter().enumerate() {
            let center = a.centers[i / p.images_per_location];
            assert!(haversine_m(center, r.geo) <= p.spread_m + 1e-6);
            assert_eq!(r.features.len(), p.visible + p.clutter);
        }
    }

    #[test]
    fn duplicates_are_distinct_images() {
        let c = LocationCorpus::generate(2, &LocationCorpusParams::default());
        let t = c.duplicate_targets(20);
        assert_eq!(t.len(), 20);
        let mut seen = std::collections::HashSet::new();
        for (f, _) in &t {
            assert!(seen.insert(f.descriptors()[0].map(f32::to_bits)));
        }
    }

    #[test]
    fn scene_is_deterministic() {
        assert_eq!(render_scene(4, 50, 40), render_scene(4, 50, 40));
        assert_ne!(render_scene(4, 50, 40), render_scene(5, 50, 40));
    }
}
