//! Visual vocabulary: exact k-means centroids, per-word Hamming-embedding
//! medians and IDF weights.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio::{put_f64s, put_len, Reader};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{Descriptor, FeatureSet, DESCRIPTOR_LEN};

/// Width of a Hamming-embedding signature.
pub const SIGNATURE_BITS: usize = 64;

/// Maximum number of words a query descriptor is assigned to.
pub const MULTI_ASSIGN_MAX: usize = 5;

/// Words farther than this multiple of the nearest distance are not assigned.
pub const MULTI_ASSIGN_RATIO: f64 = 1.5;

pub const KMEANS_MAX_ITERS: usize = 100;

pub type Projected = [f64; SIGNATURE_BITS];

/// Squared Euclidean distance between a descriptor and a centroid row.
#[inline]
pub fn sq_dist(d: &Descriptor, c: &[f64]) -> f64 {
    debug_assert_eq!(c.len(), DESCRIPTOR_LEN);
    let mut acc = [0f64; 8];
    for (dc, cc) in d.chunks_exact(8).zip(c.chunks_exact(8)) {
        for i in 0..8 {
            let t = dc[i] as f64 - cc[i];
            acc[i] += t * t;
        }
    }
    acc.iter().sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualVocabulary {
    k: usize,
    projection_seed: u64,
    /// `k x 128`, row-major.
    centroids: Vec<f64>,
    idf: Vec<f64>,
    /// `k x 64`, row-major.
    he_medians: Vec<f64>,
    /// `64 x 128` orthonormal rows, derived from `projection_seed`.
    projection: Vec<f64>,
}

impl VisualVocabulary {
    /// Vocabulary over the given centroids with zero medians. IDF weights
    /// start uniform at 1 until [`VisualVocabulary::compute_idf`] runs.
    pub fn from_centroids(centroids: Vec<f64>, projection_seed: u64) -> Result<Self> {
        if centroids.is_empty() || !centroids.len().is_multiple_of(DESCRIPTOR_LEN) {
            return Err(Error::Config(format!(
                "centroid buffer of length {} is not a positive multiple of {DESCRIPTOR_LEN}",
                centroids.len()
            )));
        }
        let k = centroids.len() / DESCRIPTOR_LEN;
        Ok(VisualVocabulary {
            k,
            projection_seed,
            centroids,
            idf: vec![1.0; k],
            he_medians: vec![0.0; k * SIGNATURE_BITS],
            projection: projection_matrix(projection_seed),
        })
    }

    /// Trains centroids with k-means and medians on the same descriptors.
    pub fn train(descriptors: &[Descriptor], k: usize, seed: u64, exec: Exec) -> Result<Self> {
        let km = train_kmeans_with(descriptors, k, seed, exec)?;
        let mut vocab = VisualVocabulary::from_centroids(km.centroids, seed)?;
        vocab.compute_he_medians_with(descriptors, exec);
        Ok(vocab)
    }

    /// Trains on the descriptors of `images`; IDF counts image frequency.
    pub fn train_on_images(images: &[FeatureSet], k: usize, seed: u64, exec: Exec) -> Result<Self> {
        let descriptors: Vec<Descriptor> = images.iter().flat_map(|f| f.descriptors().iter().copied()).collect();
        let mut vocab = Self::train(&descriptors, k, seed, exec)?;
        vocab.compute_idf(images);
        Ok(vocab)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn projection_seed(&self) -> u64 {
        self.projection_seed
    }

    pub fn centroid(&self, word: usize) -> &[f64] {
        &self.centroids[word * DESCRIPTOR_LEN..(word + 1) * DESCRIPTOR_LEN]
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn medians(&self, word: usize) -> &[f64] {
        &self.he_medians[word * SIGNATURE_BITS..(word + 1) * SIGNATURE_BITS]
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    /// True when both vocabularies quantize and embed descriptors identically.
    pub fn same_quantizer(&self, other: &VisualVocabulary) -> bool {
        self.k == other.k
            && self.projection_seed == other.projection_seed
            && self.centroids == other.centroids
            && self.he_medians == other.he_medians
    }

    /// Nearest word; ties go to the lowest id.
    pub fn assign(&self, d: &Descriptor) -> u32 {
        let mut best = (f64::INFINITY, 0u32);
        for w in 0..self.k {
            let dist = sq_dist(d, self.centroid(w));
            if dist < best.0 {
                best = (dist, w as u32);
            }
        }
        best.1
    }

    /// Up to [`MULTI_ASSIGN_MAX`] nearest words within
    /// [`MULTI_ASSIGN_RATIO`] times the nearest distance, nearest first.
    pub fn multi_assign(&self, d: &Descriptor) -> Vec<u32> {
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(MULTI_ASSIGN_MAX + 1);
        for w in 0..self.k {
            let dist = sq_dist(d, self.centroid(w));
            if best.len() == MULTI_ASSIGN_MAX && dist >= best[MULTI_ASSIGN_MAX - 1].0 {
                continue;
            }
            // insertion after equal distances keeps lower ids first
            let pos = best.partition_point(|(bd, _)| *bd <= dist);
            best.insert(pos, (dist, w as u32));
            best.truncate(MULTI_ASSIGN_MAX);
        }
        let cutoff = best[0].0.sqrt() * MULTI_ASSIGN_RATIO;
        best.into_iter()
            .take_while(|(dist, _)| dist.sqrt() <= cutoff)
            .map(|(_, w)| w)
            .collect()
    }

    pub fn project(&self, d: &Descriptor) -> Projected {
        let mut out = [0f64; SIGNATURE_BITS];
        for (o, row) in out.iter_mut().zip(self.projection.chunks_exact(DESCRIPTOR_LEN)) {
            let mut acc = [0f64; 4];
            for (dc, rc) in d.chunks_exact(4).zip(row.chunks_exact(4)) {
                for i in 0..4 {
                    acc[i] += dc[i] as f64 * rc[i];
                }
            }
            *o = acc.iter().sum();
        }
        out
    }

    /// Bit `i` is set iff projected component `i` exceeds the word's median.
    pub fn signature(&self, projected: &Projected, word: u32) -> u64 {
        let medians = self.medians(word as usize);
        let mut sig = 0u64;
        for (i, (p, m)) in projected.iter().zip(medians).enumerate() {
            if p > m {
                sig |= 1 << i;
            }
        }
        sig
    }

    pub fn compute_he_medians(&mut self, training: &[Descriptor]) {
        self.compute_he_medians_with(training, Exec::default())
    }

    /// Per-word, per-dimension median of the projected training descriptors.
    /// Words without training descriptors get zero medians.
    pub fn compute_he_medians_with(&mut self, training: &[Descriptor], exec: Exec) {
        let assigned = exec.map(training, |d| (self.assign(d), self.project(d)));
        let mut per_word: Vec<Vec<&Projected>> = vec![Vec::new(); self.k];
        for (w, p) in &assigned {
            per_word[*w as usize].push(p);
        }
        let mut medians = vec![0.0; self.k * SIGNATURE_BITS];
        let mut column = Vec::new();
        for (w, projections) in per_word.iter().enumerate() {
            if projections.is_empty() {
                continue;
            }
            for dim in 0..SIGNATURE_BITS {
                column.clear();
                column.extend(projections.iter().map(|p| p[dim]));
                medians[w * SIGNATURE_BITS + dim] = median(&mut column);
            }
        }
        self.he_medians = medians;
    }

    /// Sets `idf[w] = ln(N / max(1, N_w))` from per-image word sets.
    pub fn set_idf_from_word_sets<'a>(&mut self, images: impl IntoIterator<Item = &'a [u32]>) {
        self.idf = idf_from_word_sets(self.k, images);
    }

    /// IDF over images, using single assignment.
    pub fn compute_idf(&mut self, images: &[FeatureSet]) {
        let word_sets: Vec<Vec<u32>> = images
            .iter()
            .map(|f| {
                let mut ws: Vec<u32> = f.descriptors().iter().map(|d| self.assign(d)).collect();
                ws.sort_unstable();
                ws.dedup();
                ws
            })
            .collect();
        self.set_idf_from_word_sets(word_sets.iter().map(|v| v.as_slice()));
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(VOCAB_MAGIC)?;
        put_len(w, self.k)?;
        w.write_u64::<LittleEndian>(self.projection_seed)?;
        put_f64s(w, &self.centroids)?;
        put_f64s(w, &self.idf)?;
        put_f64s(w, &self.he_medians)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut r = Reader::new(r, "vocabulary");
        r.magic(VOCAB_MAGIC)?;
        let k = r.len(1 << 24)?;
        if k == 0 {
            return Err(Error::Data("vocabulary: zero words".into()));
        }
        let seed = r.u64()?;
        let centroids = r.f64_vec(k * DESCRIPTOR_LEN)?;
        let idf = r.f64_vec(k)?;
        let he_medians = r.f64_vec(k * SIGNATURE_BITS)?;
        Ok(VisualVocabulary {
            k,
            projection_seed: seed,
            centroids,
            idf,
            he_medians,
            projection: projection_matrix(seed),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut &bytes[..])
    }
}

const VOCAB_MAGIC: &[u8; 5] = b"GCVB1";

pub(crate) fn idf_from_word_sets<'a>(k: usize, images: impl IntoIterator<Item = &'a [u32]>) -> Vec<f64> {
    let mut df = vec![0usize; k];
    let mut n = 0usize;
    for words in images {
        n += 1;
        for &w in words {
            df[w as usize] += 1;
        }
    }
    df.iter()
        .map(|&d| if n == 0 { 0.0 } else { (n as f64 / d.max(1) as f64).ln() })
        .collect()
}

/// Median; the mean of the two middle values for even lengths.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// 64 orthonormal rows in R^128 from Gaussian samples (Gram-Schmidt, two passes).
pub fn projection_matrix(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_5052_4f4a_0001);
    let mut rows: Vec<[f64; DESCRIPTOR_LEN]> = Vec::with_capacity(SIGNATURE_BITS);
    while rows.len() < SIGNATURE_BITS {
        let mut v = [0f64; DESCRIPTOR_LEN];
        for x in v.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        for _ in 0..2 {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        rows.push(v);
    }
    rows.concat()
}

/// Outcome of a k-means run.
#[derive(Debug, Clone)]
pub struct KMeans {
    /// `k x 128`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<u32>,
    /// Inertia after the initial assignment and after every iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap()
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * DESCRIPTOR_LEN..(c + 1) * DESCRIPTOR_LEN]
    }
}

pub fn train_kmeans(descriptors: &[Descriptor], k: usize, seed: u64) -> Result<KMeans> {
    train_kmeans_with(descriptors, k, seed, Exec::default())
}

/// Lloyd's algorithm from a seeded k-means++ start.
///
/// Stops when no assignment changes or after [`KMEANS_MAX_ITERS`]
/// iterations. An empty cluster is moved onto the point farthest from its
/// current centroid.
pub fn train_kmeans_with(descriptors: &[Descriptor], k: usize, seed: u64, exec: Exec) -> Result<KMeans> {
    let n = descriptors.len();
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if n < k {
        return Err(Error::Config(format!(
            "k-means needs at least k = {k} descriptors, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(descriptors, k, &mut rng);

    let nearest = |centroids: &[f64], d: &Descriptor| -> (u32, f64) {
        let mut best = (0u32, f64::INFINITY);
        for (c, row) in centroids.chunks_exact(DESCRIPTOR_LEN).enumerate() {
            let dist = sq_dist(d, row);
            if dist < best.1 {
                best = (c as u32, dist);
            }
        }
        best
    };

    let first = exec.map(descriptors, |d| nearest(&centroids, d));
    let mut assignments: Vec<u32> = first.iter().map(|(c, _)| *c).collect();
    let mut inertia_history = vec![first.iter().map(|(_, d)| d).sum::<f64>()];
    let mut iterations = 0;

    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        update_centroids(descriptors, &assignments, &mut centroids, k);
        let next = exec.map(descriptors, |d| nearest(&centroids, d));
        let changed = next.iter().zip(&assignments).any(|((c, _), old)| c != old);
        assignments = next.iter().map(|(c, _)| *c).collect();
        inertia_history.push(next.iter().map(|(_, d)| d).sum());
        if !changed {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignments,
        inertia_history,
        iterations,
    })
}

fn kmeans_pp_init(points: &[Descriptor], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k * DESCRIPTOR_LEN);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend(points[first].iter().map(|&v| v as f64));
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &centroids[..DESCRIPTOR_LEN]))
        .collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // fewer distinct points than k: take the next unused point
            (0..n).find(|i| !chosen[*i]).unwrap_or(0)
        };
        chosen[pick] = true;
        let start = centroids.len();
        centroids.extend(points[pick].iter().map(|&v| v as f64));
        let row = &centroids[start..];
        for (p, slot) in points.iter().zip(d2.iter_mut()) {
            *slot = slot.min(sq_dist(p, row));
        }
    }
    centroids
}

fn update_centroids(points: &[Descriptor], assignments: &[u32], centroids: &mut [f64], k: usize) {
    let mut sums = vec![0f64; k * DESCRIPTOR_LEN];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignments) {
        let c = c as usize;
        counts[c] += 1;
        for (s, v) in sums[c * DESCRIPTOR_LEN..(c + 1) * DESCRIPTOR_LEN].iter_mut().zip(p) {
            *s += *v as f64;
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    for c in 0..k {
        if counts[c] > 0 {
            let inv = counts[c] as f64;
            for (dst, s) in centroids[c * DESCRIPTOR_LEN..(c + 1) * DESCRIPTOR_LEN]
                .iter_mut()
                .zip(&sums[c * DESCRIPTOR_LEN..(c + 1) * DESCRIPTOR_LEN])
            {
                *dst = s / inv;
            }
        }
    }
    if empty.is_empty() {
        return;
    }
    // farthest points from their (updated) centroids, largest first
    let mut far: Vec<(f64, usize)> = points
        .iter()
        .zip(assignments)
        .enumerate()
        .map(|(i, (p, &c))| {
            let c = c as usize;
            (sq_dist(p, &centroids[c * DESCRIPTOR_LEN..(c + 1) * DESCRIPTOR_LEN]), i)
        })
        .collect();
    far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (c, (_, i)) in empty.into_iter().zip(far) {
        for (dst, v) in centroids[c * DESCRIPTOR_LEN..(c + 1) * DESCRIPTOR_LEN]
            .iter_mut()
            .zip(&points[i])
        {
            *dst = *v as f64;
        }
    }
}
