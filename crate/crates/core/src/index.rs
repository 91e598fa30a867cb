//! Inverted index over visual words with Hamming-embedding signatures.
//!
//! Scoring of a query against database image `I`:
//!
//! * each query descriptor is assigned to several words ([`VisualVocabulary::multi_assign`]),
//!   database descriptors to exactly one;
//! * a (query descriptor, posting) pair matches when the Hamming distance `h`
//!   of their signatures under that word is at most [`HAMMING_THRESHOLD`];
//! * the pair weighs `idf(w)^2 * exp(-h^2 / (2 * sigma^2))`;
//! * when one query descriptor matches `m > 1` descriptors of `I`, each of
//!   those pairs is divided by `sqrt(m)` (burstiness);
//! * the image score is the sum of pair weights over `sqrt(#descriptors of I)`.

use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, WriteBytesExt};

use crate::binio::{put_f32s, put_len, put_str, Reader};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{FeatureSet, Keypoint};
use crate::geo::GeoPoint;
use crate::vocab::VisualVocabulary;

pub const HAMMING_THRESHOLD: u32 = 24;
pub const HAMMING_SIGMA: f64 = 16.0;

/// Weight of a match at Hamming distance `h`, before IDF.
pub fn hamming_weight(h: u32) -> f64 {
    let h = h as f64;
    (-(h * h) / (2.0 * HAMMING_SIGMA * HAMMING_SIGMA)).exp()
}

/// One background image: features, location and tags.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub features: FeatureSet,
    pub geo: GeoPoint,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMeta {
    pub id: String,
    pub geo: GeoPoint,
    pub tags: Vec<String>,
    pub keypoints: Vec<Keypoint>,
}

impl ImageMeta {
    pub fn descriptor_count(&self) -> usize {
        self.keypoints.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PostingEntry {
    /// Internal image number; images are numbered in ascending id order.
    pub image: u32,
    pub signature: u64,
    /// Index of the keypoint in the image's feature set.
    pub keypoint: u32,
}

/// Identifies a database feature: its word and keypoint index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PostingRef {
    pub word: u32,
    pub keypoint: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMatch {
    pub query: u32,
    pub db: PostingRef,
    pub hamming: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedMatch {
    pub image_id: String,
    pub score: f64,
    pub matches: Vec<FeatureMatch>,
}

/// Keypoint geometry of database images.
pub trait KeypointStore {
    fn keypoint(&self, image_id: &str, keypoint: u32) -> Option<Keypoint>;
}

#[derive(Debug, Clone)]
pub struct BowIndex {
    vocab: VisualVocabulary,
    postings: Vec<Vec<PostingEntry>>,
    images: Vec<ImageMeta>,
    by_id: HashMap<String, u32>,
}

fn check_unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Ingestion(format!("duplicate image id {id:?}")));
        }
    }
    Ok(())
}

/// Orders ranked images by descending score, then ascending id.
pub(crate) fn sort_ranked(list: &mut [RankedMatch]) {
    list.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.image_id.cmp(&b.image_id)));
}

impl BowIndex {
    pub fn build(records: Vec<ImageRecord>, vocab: &VisualVocabulary) -> Result<Self> {
        Self::build_with(records, vocab, Exec::default())
    }

    /// Indexes every descriptor under its single nearest word.
    pub fn build_with(mut records: Vec<ImageRecord>, vocab: &VisualVocabulary, exec: Exec) -> Result<Self> {
        check_unique_ids(records.iter().map(|r| r.id.as_str()))?;
        if records.len() > u32::MAX as usize {
            return Err(Error::Ingestion("too many images".into()));
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let quantized: Vec<Vec<(u32, u64)>> = exec.map(&records, |r| {
            r.features
                .descriptors()
                .iter()
                .map(|d| {
                    let w = vocab.assign(d);
                    (w, vocab.signature(&vocab.project(d), w))
                })
                .collect()
        });
        let mut postings = vec![Vec::new(); vocab.k()];
        for (image, words) in quantized.iter().enumerate() {
            for (kp, &(w, signature)) in words.iter().enumerate() {
                postings[w as usize].push(PostingEntry {
                    image: image as u32,
                    signature,
                    keypoint: kp as u32,
                });
            }
        }
        let images: Vec<ImageMeta> = records
            .into_iter()
            .map(|r| ImageMeta {
                id: r.id,
                geo: r.geo,
                tags: r.tags,
                keypoints: r.features.keypoints().to_vec(),
            })
            .collect();
        Ok(Self::from_parts(vocab.clone(), postings, images))
    }

    fn from_parts(vocab: VisualVocabulary, postings: Vec<Vec<PostingEntry>>, images: Vec<ImageMeta>) -> Self {
        let by_id = images
            .iter()
            .enumerate()
            .map(|(i, m)| (m.id.clone(), i as u32))
            .collect();
        BowIndex {
            vocab,
            postings,
            images,
            by_id,
        }
    }

    pub fn vocabulary(&self) -> &VisualVocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageMeta] {
        &self.images
    }

    pub fn image(&self, id: &str) -> Option<&ImageMeta> {
        self.by_id.get(id).map(|&i| &self.images[i as usize])
    }

    pub fn postings(&self, word: u32) -> &[PostingEntry] {
        &self.postings[word as usize]
    }

    pub fn posting_count(&self) -> usize {
        self.postings.iter().map(Vec::len).sum()
    }

    /// Like [`BowIndex::query`], but first checks that `vocab` quantizes
    /// descriptors the same way as the index's vocabulary.
    pub fn query_with_vocab(&self, vocab: &VisualVocabulary, q: &FeatureSet, top_k: usize) -> Result<Vec<RankedMatch>> {
        if !self.vocab.same_quantizer(vocab) {
            return Err(Error::Config(format!(
                "vocabulary mismatch: index uses k={} seed={}, query uses k={} seed={}",
                self.vocab.k(),
                self.vocab.projection_seed(),
                vocab.k(),
                vocab.projection_seed()
            )));
        }
        Ok(self.query(q, top_k))
    }

    /// Top `top_k` images by score; images without any matching pair are
    /// never returned.
    pub fn query(&self, q: &FeatureSet, top_k: usize) -> Vec<RankedMatch> {
        let n = self.images.len();
        if n == 0 || top_k == 0 {
            return Vec::new();
        }
        let idf = self.vocab.idf();
        let mut raw = vec![0f64; n];
        let mut matches: Vec<Vec<FeatureMatch>> = vec![Vec::new(); n];
        let mut touched = Vec::new();
        // (image, match, weight) for the current query descriptor
        let mut pending: Vec<(u32, FeatureMatch, f64)> = Vec::new();

        for (qi, d) in q.descriptors().iter().enumerate() {
            let projected = self.vocab.project(d);
            pending.clear();
            for w in self.vocab.multi_assign(d) {
                let sig = self.vocab.signature(&projected, w);
                let idf2 = idf[w as usize] * idf[w as usize];
                for p in &self.postings[w as usize] {
                    let h = (sig ^ p.signature).count_ones();
                    if h <= HAMMING_THRESHOLD {
                        let m = FeatureMatch {
                            query: qi as u32,
                            db: PostingRef {
                                word: w,
                                keypoint: p.keypoint,
                            },
                            hamming: h,
                        };
                        pending.push((p.image, m, idf2 * hamming_weight(h)));
                    }
                }
            }
            pending.sort_by_key(|(image, _, _)| *image);
            for group in pending.chunk_by(|a, b| a.0 == b.0) {
                let image = group[0].0 as usize;
                let burst = if group.len() > 1 {
                    (group.len() as f64).sqrt()
                } else {
                    1.0
                };
                if matches[image].is_empty() {
                    touched.push(image);
                }
                for (_, m, weight) in group {
                    raw[image] += weight / burst;
                    matches[image].push(*m);
                }
            }
        }

        let mut ranked: Vec<RankedMatch> = touched
            .into_iter()
            .map(|i| RankedMatch {
                image_id: self.images[i].id.clone(),
                score: raw[i] / (self.images[i].descriptor_count() as f64).sqrt(),
                matches: std::mem::take(&mut matches[i]),
            })
            .collect();
        sort_ranked(&mut ranked);
        ranked.truncate(top_k);
        ranked
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        self.vocab.write_to(w)?;
        put_len(w, self.images.len())?;
        for m in &self.images {
            put_str(w, &m.id)?;
            w.write_f64::<LittleEndian>(m.geo.lat())?;
            w.write_f64::<LittleEndian>(m.geo.lon())?;
            put_len(w, m.tags.len())?;
            for t in &m.tags {
                put_str(w, t)?;
            }
            put_len(w, m.keypoints.len())?;
            for k in &m.keypoints {
                put_f32s(w, &[k.x, k.y, k.scale, k.orientation])?;
            }
        }
        for list in &self.postings {
            put_len(w, list.len())?;
            for p in list {
                w.write_u32::<LittleEndian>(p.image)?;
                w.write_u64::<LittleEndian>(p.signature)?;
                w.write_u32::<LittleEndian>(p.keypoint)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut rd = Reader::new(&mut *r, "index");
        rd.magic(INDEX_MAGIC)?;
        let vocab = VisualVocabulary::read_from(&mut *r)?;
        let mut rd = Reader::new(r, "index");
        let n = rd.len(u32::MAX as usize)?;
        let mut images = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let id = rd.string()?;
            let (lat, lon) = (rd.f64()?, rd.f64()?);
            let geo = GeoPoint::new(lat, lon)?;
            let n_tags = rd.len(1 << 16)?;
            let tags = (0..n_tags).map(|_| rd.string()).collect::<Result<Vec<_>>>()?;
            let n_kp = rd.len(1 << 24)?;
            let raw = rd.f32_vec(n_kp * 4)?;
            let keypoints = raw
                .chunks_exact(4)
                .map(|c| Keypoint {
                    x: c[0],
                    y: c[1],
                    scale: c[2],
                    orientation: c[3],
                })
                .collect();
            images.push(ImageMeta {
                id,
                geo,
                tags,
                keypoints,
            });
        }
        check_unique_ids(images.iter().map(|m| m.id.as_str()))?;
        let mut postings = Vec::with_capacity(vocab.k());
        for _ in 0..vocab.k() {
            let len = rd.len(1 << 32)?;
            let mut list = Vec::with_capacity(len.min(1 << 20));
            for _ in 0..len {
                let p = PostingEntry {
                    image: rd.u32()?,
                    signature: rd.u64()?,
                    keypoint: rd.u32()?,
                };
                let valid = images
                    .get(p.image as usize)
                    .is_some_and(|m| (p.keypoint as usize) < m.keypoints.len());
                if !valid {
                    return Err(Error::Data("index: posting refers to a missing feature".into()));
                }
                list.push(p);
            }
            postings.push(list);
        }
        Ok(Self::from_parts(vocab, postings, images))
    }
}

const INDEX_MAGIC: &[u8; 5] = b"GCIX1";

impl KeypointStore for BowIndex {
    fn keypoint(&self, image_id: &str, keypoint: u32) -> Option<Keypoint> {
        self.image(image_id)?.keypoints.get(keypoint as usize).copied()
    }
}

/// Exhaustive scorer over raw records: the same formula evaluated with
/// nested loops and no inverted structure. Returns every matched image.
pub fn brute_force_score(records: &[ImageRecord], vocab: &VisualVocabulary, q: &FeatureSet) -> Vec<RankedMatch> {
    let idf = vocab.idf();
    let mut ranked = Vec::new();
    for rec in records {
        let db: Vec<(u32, u64)> = rec
            .features
            .descriptors()
            .iter()
            .map(|d| {
                let w = vocab.assign(d);
                (w, vocab.signature(&vocab.project(d), w))
            })
            .collect();
        let mut raw = 0.0;
        let mut matches = Vec::new();
        for (qi, qd) in q.descriptors().iter().enumerate() {
            let projected = vocab.project(qd);
            let mut hits = Vec::new();
            for w in vocab.multi_assign(qd) {
                let qsig = vocab.signature(&projected, w);
                for (kp, &(dw, dsig)) in db.iter().enumerate() {
                    if dw != w {
                        continue;
                    }
                    let h = (qsig ^ dsig).count_ones();
                    if h <= HAMMING_THRESHOLD {
                        let weight = idf[w as usize] * idf[w as usize] * hamming_weight(h);
                        hits.push((
                            FeatureMatch {
                                query: qi as u32,
                                db: PostingRef {
                                    word: w,
                                    keypoint: kp as u32,
                                },
                                hamming: h,
                            },
                            weight,
                        ));
                    }
                }
            }
            let burst = if hits.len() > 1 {
                (hits.len() as f64).sqrt()
            } else {
                1.0
            };
            for (m, weight) in hits {
                raw += weight / burst;
                matches.push(m);
            }
        }
        if !matches.is_empty() {
            ranked.push(RankedMatch {
                image_id: rec.id.clone(),
                score: raw / (db.len() as f64).sqrt(),
                matches,
            });
        }
    }
    sort_ranked(&mut ranked);
    ranked
}
