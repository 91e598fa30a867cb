//! End-to-end geo-location estimation: the top-ranked background image is
//! the geo-propagator and its coordinates become the prediction.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use byteorder::{LittleEndian, WriteBytesExt};

use crate::binio::{put_f32s, put_len, put_str, Reader};
use crate::bnn::{bow_histogram, BnnOutcome, BowHistogram, KdForest, DEFAULT_CHECKS};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::FeatureSet;
use crate::geo::GeoPoint;
use crate::index::{BowIndex, ImageRecord};
use crate::pgm::rerank;
use crate::vocab::VisualVocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GleSystem {
    Bnn,
    Pgm,
}

impl GleSystem {
    pub fn as_str(&self) -> &'static str {
        match self {
            GleSystem::Bnn => "bnn",
            GleSystem::Pgm => "pgm",
        }
    }
}

impl fmt::Display for GleSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GleSystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bnn" => Ok(GleSystem::Bnn),
            "pgm" => Ok(GleSystem::Pgm),
            _ => Err(Error::Config(format!("unknown system {s:?} (expected pgm or bnn)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagator {
    pub image_id: String,
    pub geo: GeoPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlePrediction {
    pub target_id: String,
    /// `None` means the engine abstained.
    pub propagator: Option<Propagator>,
    pub system: GleSystem,
    /// Retrieval score of the propagator (PGM) or cosine similarity of the
    /// histograms (BNN); 0 when abstaining.
    pub score: f64,
}

impl GlePrediction {
    pub fn abstain(target_id: impl Into<String>, system: GleSystem) -> Self {
        GlePrediction {
            target_id: target_id.into(),
            propagator: None,
            system,
            score: 0.0,
        }
    }

    pub fn predicted(&self) -> Option<GeoPoint> {
        self.propagator.as_ref().map(|p| p.geo)
    }

    pub fn is_abstain(&self) -> bool {
        self.propagator.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GleConfig {
    /// Shortlist length handed to geometric re-ranking.
    pub top_k: usize,
    /// The PGM path abstains unless the re-ranked top candidate has at
    /// least this many geometric inliers.
    pub min_inliers: usize,
    pub max_checks: usize,
    pub exec: Exec,
}

impl Default for GleConfig {
    fn default() -> Self {
        GleConfig {
            top_k: 100,
            min_inliers: 3,
            max_checks: DEFAULT_CHECKS,
            exec: Exec::default(),
        }
    }
}

/// Bag-of-words histograms of the background and their KD-forest.
#[derive(Debug, Clone)]
pub struct Baseline {
    vocab: VisualVocabulary,
    forest: KdForest,
    forest_seed: u64,
}

impl Baseline {
    pub fn build(records: &[ImageRecord], vocab: VisualVocabulary, forest_seed: u64, exec: Exec) -> Result<Self> {
        let hists = exec.map(records, |r| {
            let mut h = bow_histogram(&r.features, &vocab);
            h.image_id.clone_from(&r.id);
            h
        });
        Self::from_histograms(hists, vocab, forest_seed)
    }

    pub fn from_histograms(mut hists: Vec<BowHistogram>, vocab: VisualVocabulary, forest_seed: u64) -> Result<Self> {
        hists.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if let Some(h) = hists.iter().find(|h| h.dim() != vocab.k()) {
            return Err(Error::Data(format!(
                "histogram {} does not match the vocabulary size",
                h.image_id
            )));
        }
        Ok(Baseline {
            forest: KdForest::build(hists, forest_seed)?,
            vocab,
            forest_seed,
        })
    }

    pub fn vocabulary(&self) -> &VisualVocabulary {
        &self.vocab
    }

    pub fn forest(&self) -> &KdForest {
        &self.forest
    }

    pub fn forest_seed(&self) -> u64 {
        self.forest_seed
    }
}

/// Something that can be geo-located: an id plus a way to obtain features.
pub trait Target: Sync {
    fn id(&self) -> &str;
    fn features(&self) -> Result<FeatureSet>;
}

impl Target for FeatureSet {
    fn id(&self) -> &str {
        &self.image_id
    }

    fn features(&self) -> Result<FeatureSet> {
        Ok(self.clone())
    }
}

#[derive(Debug)]
pub struct BatchRow {
    pub target_id: String,
    pub result: Result<GlePrediction>,
    pub elapsed: Duration,
}

/// The background collection ready for querying by either system.
#[derive(Debug, Clone)]
pub struct GeoIndex {
    bow: BowIndex,
    baseline: Option<Baseline>,
}

impl GeoIndex {
    pub fn new(bow: BowIndex, baseline: Option<Baseline>) -> Result<Self> {
        if let Some(b) = &baseline {
            let ids_match = b.forest.len() == bow.len()
                && b.forest
                    .points()
                    .iter()
                    .zip(bow.images())
                    .all(|(h, m)| h.image_id == m.id);
            if !ids_match {
                return Err(Error::Data(
                    "baseline histograms do not cover the indexed images".into(),
                ));
            }
        }
        Ok(GeoIndex { bow, baseline })
    }

    /// Builds the inverted index and, when `bnn_vocab` is given, the baseline.
    pub fn build(
        records: Vec<ImageRecord>,
        vocab: &VisualVocabulary,
        bnn_vocab: Option<VisualVocabulary>,
        forest_seed: u64,
        exec: Exec,
    ) -> Result<Self> {
        let baseline = match bnn_vocab {
            Some(v) => Some(Baseline::build(&records, v, forest_seed, exec)?),
            None => None,
        };
        let bow = BowIndex::build_with(records, vocab, exec)?;
        Self::new(bow, baseline)
    }

    pub fn bow(&self) -> &BowIndex {
        &self.bow
    }

    pub fn baseline(&self) -> Option<&Baseline> {
        self.baseline.as_ref()
    }

    pub fn len(&self) -> usize {
        self.bow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bow.is_empty()
    }

    fn propagator(&self, image_id: &str) -> Result<Propagator> {
        let meta = self
            .bow
            .image(image_id)
            .ok_or_else(|| Error::Data(format!("image {image_id} missing from the index")))?;
        Ok(Propagator {
            image_id: meta.id.clone(),
            geo: meta.geo,
        })
    }

    pub fn geolocate(&self, target: &FeatureSet, system: GleSystem, cfg: &GleConfig) -> Result<GlePrediction> {
        if target.is_empty() || self.bow.is_empty() {
            return Ok(GlePrediction::abstain(&target.image_id, system));
        }
        match system {
            GleSystem::Pgm => self.locate_pgm(target, cfg),
            GleSystem::Bnn => self.locate_bnn(target, cfg),
        }
    }

    fn locate_pgm(&self, target: &FeatureSet, cfg: &GleConfig) -> Result<GlePrediction> {
        let shortlist = self.bow.query(target, cfg.top_k);
        let ranked = rerank(shortlist, target, &self.bow, cfg.exec);
        match ranked.first() {
            Some(top) if top.pgm.inlier_count >= cfg.min_inliers => Ok(GlePrediction {
                target_id: target.image_id.clone(),
                propagator: Some(self.propagator(&top.candidate.image_id)?),
                system: GleSystem::Pgm,
                score: top.candidate.score,
            }),
            _ => Ok(GlePrediction::abstain(&target.image_id, GleSystem::Pgm)),
        }
    }

    fn locate_bnn(&self, target: &FeatureSet, cfg: &GleConfig) -> Result<GlePrediction> {
        let baseline = self
            .baseline
            .as_ref()
            .ok_or_else(|| Error::Config("index was built without the bag-of-words baseline".into()))?;
        let hist = bow_histogram(target, &baseline.vocab);
        match baseline.forest.search(&hist, cfg.max_checks)? {
            BnnOutcome::Found { image_id, distance } => Ok(GlePrediction {
                target_id: target.image_id.clone(),
                propagator: Some(self.propagator(&image_id)?),
                system: GleSystem::Bnn,
                score: 1.0 - distance * distance / 2.0,
            }),
            BnnOutcome::Abstain => Ok(GlePrediction::abstain(&target.image_id, GleSystem::Bnn)),
        }
    }

    /// One row per target in input order; a target that fails to load is
    /// recorded as an error and the batch continues.
    pub fn geolocate_batch<T: Target>(&self, targets: &[T], system: GleSystem, cfg: &GleConfig) -> Vec<BatchRow> {
        cfg.exec.map(targets, |t| {
            let start = Instant::now();
            let result = t
                .features()
                .and_then(|f| self.geolocate(&f.with_id(t.id()), system, cfg));
            BatchRow {
                target_id: t.id().to_string(),
                result,
                elapsed: start.elapsed(),
            }
        })
    }

    /// The inverted index followed by an optional baseline section.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        self.bow.write_to(w)?;
        match &self.baseline {
            None => w.write_u8(0),
            Some(b) => {
                w.write_u8(1)?;
                b.vocab.write_to(w)?;
                w.write_u64::<LittleEndian>(b.forest_seed)?;
                put_len(w, b.forest.len())?;
                for h in b.forest.points() {
                    put_str(w, &h.image_id)?;
                    w.write_u8(h.empty as u8)?;
                    put_f32s(w, &h.vector)?;
                }
                Ok(())
            }
        }
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bow = BowIndex::read_from(&mut *r)?;
        let mut rd = Reader::new(&mut *r, "index");
        let flag = rd.u8()?;
        let baseline = match flag {
            0 => None,
            1 => {
                let vocab = VisualVocabulary::read_from(&mut *r)?;
                let mut rd = Reader::new(&mut *r, "index");
                let seed = rd.u64()?;
                let n = rd.len(u32::MAX as usize)?;
                let mut hists = Vec::with_capacity(n.min(1 << 20));
                for _ in 0..n {
                    let image_id = rd.string()?;
                    let empty = rd.u8()? != 0;
                    let vector = rd.f32_vec(vocab.k())?;
                    hists.push(BowHistogram {
                        image_id,
                        vector,
                        empty,
                    });
                }
                Some(Baseline::from_histograms(hists, vocab, seed)?)
            }
            other => return Err(Error::Data(format!("index: invalid baseline flag {other}"))),
        };
        Self::new(bow, baseline)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synthetic_features, SyntheticLayout};
    use crate::synth::{LocationCorpus, LocationCorpusParams};

    fn corpus_index(seed: u64) -> (LocationCorpus, GeoIndex) {
        let corpus = LocationCorpus::generate(seed, &LocationCorpusParams::default());
        let feats: Vec<FeatureSet> = corpus.background.iter().map(|r| r.features.clone()).collect();
        let vocab = VisualVocabulary::train_on_images(&feats, 64, seed, Exec::default()).unwrap();
        let bnn = VisualVocabulary::train_on_images(&feats, 32, seed + 1, Exec::default()).unwrap();
        let index = GeoIndex::build(corpus.background.clone(), &vocab, Some(bnn), seed, Exec::default()).unwrap();
        (corpus, index)
    }

    #[test]
    fn self_match_propagates_coordinates() {
        let (corpus, index) = corpus_index(1);
        let rec = &corpus.background[7];
        for system in [GleSystem::Pgm, GleSystem::Bnn] {
            let p = index.geolocate(&rec.features, system, &GleConfig::default()).unwrap();
            assert_eq!(p.propagator.as_ref().unwrap().image_id, rec.id);
            assert_eq!(p.predicted(), Some(rec.geo));
        }
    }

    #[test]
    fn unrelated_or_empty_targets_abstain() {
        let (_, index) = corpus_index(2);
        let cfg = GleConfig::default();
        let empty = FeatureSet::empty("nothing");
        for system in [GleSystem::Pgm, GleSystem::Bnn] {
            assert!(index.geolocate(&empty, system, &cfg).unwrap().is_abstain());
        }
        let stranger = synthetic_features(999, 40, &SyntheticLayout::default());
        let p = index.geolocate(&stranger, GleSystem::Pgm, &cfg).unwrap();
        assert!(p.is_abstain());
        assert_eq!(p.predicted(), None);
    }

    #[test]
    fn bnn_requires_baseline() {
        let corpus = LocationCorpus::generate(3, &LocationCorpusParams::default());
        let feats: Vec<FeatureSet> = corpus.background.iter().map(|r| r.features.clone()).collect();
        let vocab = VisualVocabulary::train_on_images(&feats, 32, 3, Exec::default()).unwrap();
        let index = GeoIndex::build(corpus.background.clone(), &vocab, None, 0, Exec::default()).unwrap();
        let err = index
            .geolocate(&corpus.background[0].features, GleSystem::Bnn, &GleConfig::default())
            .unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn batch_equals_single_queries() {
        let (corpus, index) = corpus_index(4);
        let cfg = GleConfig::default();
        let targets: Vec<FeatureSet> = corpus.duplicate_targets(8).into_iter().map(|(f, _)| f).collect();
        assert!(index
            .geolocate_batch::<FeatureSet>(&[], GleSystem::Pgm, &cfg)
            .is_empty());
        for system in [GleSystem::Pgm, GleSystem::Bnn] {
            let rows = index.geolocate_batch(&targets, system, &cfg);
            for (row, t) in rows.iter().zip(&targets) {
                assert_eq!(row.target_id, t.image_id);
                assert_eq!(row.result.as_ref().unwrap(), &index.geolocate(t, system, &cfg).unwrap());
            }
        }
        let dups = vec![targets[0].clone(); 5];
        let rows = index.geolocate_batch(&dups, GleSystem::Pgm, &cfg);
        assert!(rows
            .windows(2)
            .all(|w| w[0].result.as_ref().unwrap() == w[1].result.as_ref().unwrap()));
    }

    struct Broken;

    impl Target for Broken {
        fn id(&self) -> &str {
            "broken"
        }

        fn features(&self) -> Result<FeatureSet> {
            Err(Error::Ingestion("unreadable".into()))
        }
    }

    #[test]
    fn batch_records_ingestion_errors() {
        let (_, index) = corpus_index(5);
        let rows = index.geolocate_batch(&[Broken, Broken], GleSystem::Pgm, &GleConfig::default());
        assert_eq!(rows.len(), 2);
        assert!(matches!(rows[0].result, Err(Error::Ingestion(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let (corpus, index) = corpus_index(6);
        let mut buf = Vec::new();
        index.write_to(&mut buf).unwrap();
        let loaded = GeoIndex::read_from(&mut buf.as_slice()).unwrap();
        let mut again = Vec::new();
        loaded.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
        let cfg = GleConfig::default();
        for r in corpus.background.iter().step_by(5) {
            for system in [GleSystem::Pgm, GleSystem::Bnn] {
                assert_eq!(
                    index.geolocate(&r.features, system, &cfg).unwrap(),
                    loaded.geolocate(&r.features, system, &cfg).unwrap()
                );
            }
        }
        assert!(GeoIndex::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn system_names() {
        assert_eq!("PGM".parse::<GleSystem>().unwrap(), GleSystem::Pgm);
        assert_eq!(GleSystem::Bnn.to_string(), "bnn");
        assert!("knn".parse::<GleSystem>().unwrap_err().is_config());
    }
}
