//! Accuracy within a radius, cloaking ratios, heat-map grids and the
//! filtered-background protocol.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::bnn::{bow_histogram, BnnOutcome, BowHistogram};
use crate::enhance::Enhancement;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::FeatureExtractor;
use crate::geo::{haversine_m, GeoPoint, METERS_PER_DEGREE};
use crate::gle::{Baseline, GlePrediction, GleSystem, Propagator};
use crate::image_io::RasterImage;
use crate::vocab::VisualVocabulary;

/// `100 * num / den` rounded half away from zero to two decimals.
pub fn format_percent(num: i64, den: u64) -> String {
    assert!(den > 0, "percentage of an empty set");
    let hundredths = (20_000 * num.unsigned_abs() as u128 + den as u128) / (2 * den as u128);
    let sign = if num < 0 && hundredths > 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", hundredths / 100, hundredths % 100)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Correct,
    Incorrect,
    Abstain,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Correct => "correct",
            Verdict::Incorrect => "incorrect",
            Verdict::Abstain => "abstain",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correct" => Ok(Verdict::Correct),
            "incorrect" => Ok(Verdict::Incorrect),
            "abstain" => Ok(Verdict::Abstain),
            _ => Err(Error::Data(format!("unknown verdict {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetVerdict {
    pub target_id: String,
    pub verdict: Verdict,
    /// Distance from prediction to truth; `None` on abstention.
    pub distance_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitReport {
    pub tagged: EvalReport,
    pub tagless: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub radius_m: f64,
    pub verdicts: Vec<TargetVerdict>,
    pub split: Option<Box<SplitReport>>,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.verdicts.len()
    }

    pub fn correct(&self) -> usize {
        self.verdicts.iter().filter(|v| v.verdict == Verdict::Correct).count()
    }

    /// 0 for an empty report.
    pub fn percent(&self) -> f64 {
        if self.verdicts.is_empty() {
            return 0.0;
        }
        100.0 * self.correct() as f64 / self.total() as f64
    }

    pub fn percent_string(&self) -> String {
        if self.verdicts.is_empty() {
            return "0.00".into();
        }
        format_percent(self.correct() as i64, self.total() as u64)
    }

    pub fn correct_ids(&self) -> BTreeSet<String> {
        self.verdicts
            .iter()
            .filter(|v| v.verdict == Verdict::Correct)
            .map(|v| v.target_id.clone())
            .collect()
    }

    fn subset(&self, keep: impl Fn(&str) -> bool) -> EvalReport {
        EvalReport {
            radius_m: self.radius_m,
            verdicts: self.verdicts.iter().filter(|v| keep(&v.target_id)).cloned().collect(),
            split: None,
        }
    }

    /// Adds sub-reports for targets in `tagged` and for the rest.
    pub fn with_split(mut self, tagged: &HashSet<String>) -> EvalReport {
        let split = SplitReport {
            tagged: self.subset(|id| tagged.contains(id)),
            tagless: self.subset(|id| !tagged.contains(id)),
        };
        self.split = Some(Box::new(split));
        self
    }

    /// `radius_m,total,correct,percent` line.
    pub fn summary(&self, label: &str) -> String {
        format!(
            "{label},{},{},{},{}",
            self.radius_m,
            self.total(),
            self.correct(),
            self.percent_string()
        )
    }
}

pub fn validate_radius(radius_m: f64) -> Result<()> {
    if radius_m.is_finite() && radius_m >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "radius must be a non-negative number of meters, got {radius_m}"
        )))
    }
}

/// A prediction is correct when it exists and lies within `radius_m` of
/// the truth; abstentions count as incorrect.
pub fn percent_correct(
    predictions: &[GlePrediction],
    truth: &HashMap<String, GeoPoint>,
    radius_m: f64,
) -> Result<EvalReport> {
    validate_radius(radius_m)?;
    let verdicts = predictions
        .iter()
        .map(|p| {
            let t = truth
                .get(&p.target_id)
                .ok_or_else(|| Error::Data(format!("no ground truth for target {}", p.target_id)))?;
            Ok(match p.predicted() {
                None => TargetVerdict {
                    target_id: p.target_id.clone(),
                    verdict: Verdict::Abstain,
                    distance_m: None,
                },
                Some(g) => {
                    let d = haversine_m(g, *t);
                    TargetVerdict {
                        target_id: p.target_id.clone(),
                        verdict: if d <= radius_m {
                            Verdict::Correct
                        } else {
                            Verdict::Incorrect
                        },
                        distance_m: Some(d),
                    }
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        radius_m,
        verdicts,
        split: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloakReport {
    pub before: BTreeSet<String>,
    pub after: BTreeSet<String>,
}

impl CloakReport {
    fn b(&self) -> u64 {
        self.before.len() as u64
    }

    /// Relative change in the number of located images; negative when the
    /// enhancement reveals more than it hides.
    pub fn net(&self) -> f64 {
        100.0 * (self.before.len() as f64 - self.after.len() as f64) / self.before.len() as f64
    }

    /// Share of originally located images that are no longer located.
    pub fn gross(&self) -> f64 {
        100.0 * self.before.difference(&self.after).count() as f64 / self.before.len() as f64
    }

    pub fn net_string(&self) -> String {
        format_percent(self.before.len() as i64 - self.after.len() as i64, self.b())
    }

    pub fn gross_string(&self) -> String {
        format_percent(self.before.difference(&self.after).count() as i64, self.b())
    }
}

/// Cloaking ratios from the sets of correctly located targets before and
/// after enhancement.
pub fn cloak_from_sets(before: BTreeSet<String>, after: BTreeSet<String>) -> Result<CloakReport> {
    if before.is_empty() {
        return Err(Error::UndefinedMetric(
            "cloaking is undefined when no target was located before enhancement".into(),
        ));
    }
    Ok(CloakReport { before, after })
}

pub fn cloak_metrics(before: &EvalReport, after: &EvalReport) -> Result<CloakReport> {
    if before.radius_m != after.radius_m {
        return Err(Error::Config(format!(
            "reports use different radii: {} m and {} m",
            before.radius_m, after.radius_m
        )));
    }
    let ids = |r: &EvalReport| r.verdicts.iter().map(|v| v.target_id.clone()).collect::<BTreeSet<_>>();
    if ids(before) != ids(after) {
        return Err(Error::Data("reports cover different target sets".into()));
    }
    cloak_from_sets(before.correct_ids(), after.correct_ids())
}

const REPORT_HEADER: [&str; 4] = ["target_id", "verdict", "distance_m", "radius_m"];

/// Writes `target_id,verdict,distance_m,radius_m` rows for every report.
pub fn write_report_csv<W: Write>(reports: &[EvalReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_HEADER)?;
    for r in reports {
        for v in &r.verdicts {
            let d = v.distance_m.map(|d| format!("{d:.3}")).unwrap_or_default();
            out.write_record([v.target_id.as_str(), v.verdict.as_str(), &d, &r.radius_m.to_string()])?;
        }
    }
    out.flush().map_err(|e| Error::Data(format!("report csv: {e}")))?;
    Ok(())
}

/// Reads report rows back, one report per radius in order of appearance.
pub fn read_report_csv<R: Read>(r: R) -> Result<Vec<EvalReport>> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().collect::<Vec<_>>() != REPORT_HEADER {
        return Err(Error::Data(format!(
            "report csv: expected header {}",
            REPORT_HEADER.join(",")
        )));
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |what: &str| {
            Error::Data(format!(
                "report csv: bad {what} in row {:?}",
                rec.iter().collect::<Vec<_>>()
            ))
        };
        let radius: f64 = rec[3].parse().map_err(|_| bad("radius_m"))?;
        let distance_m = match &rec[2] {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad("distance_m"))?),
        };
        let v = TargetVerdict {
            target_id: rec[0].to_string(),
            verdict: rec[1].parse()?,
            distance_m,
        };
        match reports.iter_mut().find(|r| r.radius_m == radius) {
            Some(r) => r.verdicts.push(v),
            None => reports.push(EvalReport {
                radius_m: radius,
                verdicts: vec![v],
                split: None,
            }),
        }
    }
    Ok(reports)
}

/// Counts of correctly located targets over a regular grid covering the
/// bounding box of all target locations.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub min_lat: f64,
    pub min_lon: f64,
    pub cell_lat_deg: f64,
    pub cell_lon_deg: f64,
    pub rows: usize,
    pub cols: usize,
    /// Non-zero cells keyed by (row, col).
    pub counts: BTreeMap<(usize, usize), u64>,
}

/// Grids above this many cells are written sparsely.
pub const DENSE_CELL_LIMIT: usize = 1_000_000;

impl HeatmapGrid {
    pub fn cell_of(&self, p: GeoPoint) -> (usize, usize) {
        let r = ((p.lat() - self.min_lat) / self.cell_lat_deg).floor().max(0.0) as usize;
        let c = ((p.lon() - self.min_lon) / self.cell_lon_deg).floor().max(0.0) as usize;
        (r.min(self.rows - 1), c.min(self.cols - 1))
    }

    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.min_lat + (row as f64 + 0.5) * self.cell_lat_deg,
            self.min_lon + (col as f64 + 0.5) * self.cell_lon_deg,
        )
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// `cell_lat,cell_lon,count` at cell centers; every cell when the grid
    /// is small enough, otherwise non-zero cells only.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cell_lat", "cell_lon", "count"])?;
        let mut row = |r: usize, c: usize, n: u64| -> Result<()> {
            let (lat, lon) = self.center(r, c);
            out.write_record([format!("{lat:.6}"), format!("{lon:.6}"), n.to_string()])?;
            Ok(())
        };
        if self.rows.saturating_mul(self.cols) <= DENSE_CELL_LIMIT {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    row(r, c, self.counts.get(&(r, c)).copied().unwrap_or(0))?;
                }
            }
        } else {
            for (&(r, c), &n) in &self.counts {
                row(r, c, n)?;
            }
        }
        out.flush().map_err(|e| Error::Data(format!("heatmap csv: {e}")))?;
        Ok(())
    }
}

pub fn heatmap_grid(report: &EvalReport, truth: &HashMap<String, GeoPoint>, cell_size_m: f64) -> Result<HeatmapGrid> {
    if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
        return Err(Error::Config(format!("cell size must be positive, got {cell_size_m}")));
    }
    if report.verdicts.is_empty() {
        return Err(Error::Data("heat map of an empty target set".into()));
    }
    let points = report
        .verdicts
        .iter()
        .map(|v| {
            truth
                .get(&v.target_id)
                .map(|g| (v, *g))
                .ok_or_else(|| Error::Data(format!("no ground truth for target {}", v.target_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut lat0, mut lat1, mut lon0, mut lon1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (_, g) in &points {
        lat0 = lat0.min(g.lat());
        lat1 = lat1.max(g.lat());
        lon0 = lon0.min(g.lon());
        lon1 = lon1.max(g.lon());
    }
    let cell_lat_deg = cell_size_m / METERS_PER_DEGREE;
    let cos = ((lat0 + lat1) / 2.0).to_radians().cos().max(1e-6);
    let cell_lon_deg = cell_lat_deg / cos;
    let mut grid = HeatmapGrid {
        min_lat: lat0,
        min_lon: lon0,
        cell_lat_deg,
        cell_lon_deg,
        rows: ((lat1 - lat0) / cell_lat_deg).floor() as usize + 1,
        cols: ((lon1 - lon0) / cell_lon_deg).floor() as usize + 1,
        counts: BTreeMap::new(),
    };
    for (v, g) in points {
        if v.verdict == Verdict::Correct {
            *grid.counts.entry(grid.cell_of(g)).or_insert(0) += 1;
        }
    }
    Ok(grid)
}

/// Pixel access by image id.
pub trait ImageSource: Sync {
    fn load(&self, id: &str) -> Result<RasterImage>;
}

impl ImageSource for HashMap<String, RasterImage> {
    fn load(&self, id: &str) -> Result<RasterImage> {
        self.get(id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no pixel data for image {id}")))
    }
}

/// A located image taking part in the experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoImage {
    pub id: String,
    pub geo: GeoPoint,
}

pub struct FilteredBackgroundSetup<'a> {
    /// Vocabulary of the bag-of-words baseline.
    pub vocab: &'a VisualVocabulary,
    pub extractor: &'a dyn FeatureExtractor,
    pub forest_seed: u64,
    pub max_checks: usize,
    /// Neighbours of each target that are replaced by filtered copies.
    pub shortlist: usize,
    pub radii: Vec<f64>,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredBackgroundOutcome {
    /// Unfiltered targets against the unfiltered background.
    pub unfiltered: Vec<EvalReport>,
    /// Filtered targets against the unfiltered background.
    pub original_bg: Vec<EvalReport>,
    /// Filtered targets against the background with filtered neighbours.
    pub filtered_bg: Vec<EvalReport>,
    pub collection_size: usize,
    /// Number of background images replaced for each target.
    pub replaced: Vec<usize>,
}

fn histogram_of(setup: &FilteredBackgroundSetup, id: &str, img: &RasterImage) -> Result<BowHistogram> {
    let features = setup.extractor.extract(id, img)?;
    let mut h = bow_histogram(&features, setup.vocab);
    h.image_id = id.to_string();
    Ok(h)
}

fn predict(
    baseline: &Baseline,
    geo: &HashMap<&str, GeoPoint>,
    target_id: &str,
    hist: &BowHistogram,
    max_checks: usize,
) -> Result<GlePrediction> {
    match baseline.forest().search(hist, max_checks)? {
        BnnOutcome::Abstain => Ok(GlePrediction::abstain(target_id, GleSystem::Bnn)),
        BnnOutcome::Found { image_id, distance } => Ok(GlePrediction {
            target_id: target_id.to_string(),
            propagator: Some(Propagator {
                geo: geo[image_id.as_str()],
                image_id,
            }),
            system: GleSystem::Bnn,
            score: 1.0 - distance * distance / 2.0,
        }),
    }
}

/// For each target: take its nearest background neighbours, apply `filter`
/// to the target and those neighbours, put the filtered neighbours in place
/// of the originals and locate the filtered target against both the
/// original and the patched background. Uses the bag-of-words baseline.
pub fn filtered_background_experiment(
    setup: &FilteredBackgroundSetup,
    background: &[GeoImage],
    background_pixels: &impl ImageSource,
    targets: &[GeoImage],
    target_pixels: &impl ImageSource,
    filter: &Enhancement,
) -> Result<FilteredBackgroundOutcome> {
    for r in &setup.radii {
        validate_radius(*r)?;
    }
    let geo: HashMap<&str, GeoPoint> = background.iter().map(|b| (b.id.as_str(), b.geo)).collect();
    if geo.len() != background.len() {
        return Err(Error::Ingestion("duplicate background image id".into()));
    }
    let hists = setup
        .exec
        .map(background, |b| {
            histogram_of(setup, &b.id, &background_pixels.load(&b.id)?)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let original = Baseline::from_histograms(hists, setup.vocab.clone(), setup.forest_seed)?;
    let collection_size = original.forest().len();

    let mut unfiltered = Vec::with_capacity(targets.len());
    let mut on_original = Vec::with_capacity(targets.len());
    let mut on_filtered = Vec::with_capacity(targets.len());
    let mut replaced = Vec::with_capacity(targets.len());
    for t in targets {
        let pixels = target_pixels.load(&t.id)?;
        let query = histogram_of(setup, &t.id, &pixels)?;
        let neighbours: Vec<String> = if query.empty {
            Vec::new()
        } else {
            original
                .forest()
                .knn(&query.vector, setup.shortlist, usize::MAX)?
                .into_iter()
                .map(|n| original.forest().points()[n.index].image_id.clone())
                .collect()
        };
        let filtered_query = histogram_of(setup, &t.id, &filter.apply(&pixels)?)?;
        let replacements = setup
            .exec
            .map(&neighbours, |id| {
                histogram_of(setup, id, &filter.apply(&background_pixels.load(id)?)?)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let by_id: HashMap<&str, &BowHistogram> = replacements.iter().map(|h| (h.image_id.as_str(), h)).collect();
        let patched: Vec<BowHistogram> = original
            .forest()
            .points()
            .iter()
            .map(|h| {
                by_id
                    .get(h.image_id.as_str())
                    .map_or_else(|| h.clone(), |r| (*r).clone())
            })
            .collect();
        let patched = Baseline::from_histograms(patched, setup.vocab.clone(), setup.forest_seed)?;
        if patched.forest().len() != collection_size {
            return Err(Error::Data("replacement changed the collection size".into()));
        }
        replaced.push(neighbours.len());
        unfiltered.push(predict(&original, &geo, &t.id, &query, setup.max_checks)?);
        on_original.push(predict(&original, &geo, &t.id, &filtered_query, setup.max_checks)?);
        on_filtered.push(predict(&patched, &geo, &t.id, &filtered_query, setup.max_checks)?);
    }

    let truth: HashMap<String, GeoPoint> = targets.iter().map(|t| (t.id.clone(), t.geo)).collect();
    let reports = |preds: &[GlePrediction]| -> Result<Vec<EvalReport>> {
        setup.radii.iter().map(|r| percent_correct(preds, &truth, *r)).collect()
    };
    Ok(FilteredBackgroundOutcome {
        unfiltered: reports(&unfiltered)?,
        original_bg: reports(&on_original)?,
        filtered_bg: reports(&on_filtered)?,
        collection_size,
        replaced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::METERS_PER_DEGREE;
    use proptest::prelude::*;

    fn gp(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn pred(id: &str, at: Option<GeoPoint>) -> GlePrediction {
        GlePrediction {
            target_id: id.into(),
            propagator: at.map(|geo| Propagator {
                image_id: "p".into(),
                geo,
            }),
            system: GleSystem::Pgm,
            score: 1.0,
        }
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(153, 2006), "7.63");
        assert_eq!(format_percent(1, 8), "12.50");
        assert_eq!(format_percent(1, 800), "0.13");
        assert_eq!(format_percent(-1, 4), "-25.00");
        assert_eq!(format_percent(0, 3), "0.00");
        assert_eq!(format_percent(7, 7), "100.00");
    }

    #[test]
    fn report_of_153_of_2006() {
        let g = gp(10.0, 10.0);
        let far = gp(11.0, 10.0);
        let truth: HashMap<String, GeoPoint> = (0..2006).map(|i| (format!("t{i}"), g)).collect();
        let preds: Vec<GlePrediction> = (0..2006)
            .map(|i| pred(&format!("t{i}"), Some(if i < 153 { g } else { far })))
            .collect();
        let r = percent_correct(&preds, &truth, 100.0).unwrap();
        assert_eq!((r.correct(), r.total()), (153, 2006));
        assert_eq!(r.percent_string(), "7.63");
    }

    #[test]
    fn verdict_rules() {
        let t = gp(0.0, 0.0);
        // 100 m north along a meridian
        let p = gp(100.0 / METERS_PER_DEGREE, 0.0);
        let truth: HashMap<String, GeoPoint> = [("a", t), ("b", t), ("c", t)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let preds = [pred("a", Some(p)), pred("b", None), pred("c", Some(t))];
        let r = percent_correct(&preds, &truth, 100.0).unwrap();
        let v: Vec<Verdict> = r.verdicts.iter().map(|v| v.verdict).collect();
        assert_eq!(v, [Verdict::Correct, Verdict::Abstain, Verdict::Correct]);
        assert!(percent_correct(&[pred("zz", None)], &truth, 100.0).is_err());
        let all = percent_correct(&preds[2..], &truth, 100.0).unwrap();
        assert_eq!(all.percent_string(), "100.00");
    }

    #[test]
    fn cloak_examples() {
        let c = cloak_from_sets(set(&["a", "b", "c", "d"]), set(&["a", "b"])).unwrap();
        assert_eq!((c.net(), c.gross()), (50.0, 50.0));
        let c = cloak_from_sets(set(&["a", "b", "c", "d"]), set(&["a", "b", "c", "d", "e"])).unwrap();
        assert_eq!((c.net(), c.gross()), (-25.0, 0.0));
        assert_eq!(c.net_string(), "-25.00");
        let c = cloak_from_sets(set(&["a"]), set(&["b"])).unwrap();
        assert_eq!((c.net(), c.gross()), (0.0, 100.0));
        assert!(matches!(
            cloak_from_sets(set(&[]), set(&["a"])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn cloak_requires_matching_reports() {
        let truth: HashMap<String, GeoPoint> = [("a".to_string(), gp(0.0, 0.0))].into();
        let r1 = percent_correct(&[pred("a", Some(gp(0.0, 0.0)))], &truth, 100.0).unwrap();
        let r2 = percent_correct(&[pred("a", None)], &truth, 1000.0).unwrap();
        assert!(cloak_metrics(&r1, &r2).unwrap_err().is_config());
        let r3 = percent_correct(&[pred("a", None)], &truth, 100.0).unwrap();
        assert_eq!(cloak_metrics(&r1, &r3).unwrap().gross(), 100.0);
    }

    #[test]
    fn split_sums() {
        let g = gp(5.0, 5.0);
        let truth: HashMap<String, GeoPoint> = (0..10).map(|i| (i.to_string(), g)).collect();
        let preds: Vec<GlePrediction> = (0..10)
            .map(|i| pred(&i.to_string(), (i % 3 != 0).then_some(g)))
            .collect();
        let tagged: HashSet<String> = ["1", "2", "3"].iter().map(|s| s.to_string()).collect();
        let r = percent_correct(&preds, &truth, 1.0).unwrap().with_split(&tagged);
        let s = r.split.as_ref().unwrap();
        assert_eq!(s.tagged.correct() + s.tagless.correct(), r.correct());
        assert_eq!(s.tagged.total(), 3);
    }

    #[test]
    fn report_csv_round_trip() {
        let truth: HashMap<String, GeoPoint> =
            [("a".to_string(), gp(0.0, 0.0)), ("b".to_string(), gp(1.0, 1.0))].into();
        let preds = [pred("a", Some(gp(0.0, 0.0005))), pred("b", None)];
        let reports = vec![
            percent_correct(&preds, &truth, 100.0).unwrap(),
            percent_correct(&preds, &truth, 1000.0).unwrap(),
        ];
        let mut buf = Vec::new();
        write_report_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(
            text.starts_with("target_id,verdict,distance_m,radius_m\na,correct,55.597,100\nb,abstain,,100\n"),
            "{text}"
        );
        let back = read_report_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&reports) {
            assert_eq!(a.correct_ids(), b.correct_ids());
            assert_eq!(a.radius_m, b.radius_m);
        }
    }

    #[test]
    fn heatmap_examples() {
        let truth: HashMap<String, GeoPoint> = [("a".to_string(), gp(48.0, 2.0))].into();
        let one = percent_correct(&[pred("a", Some(gp(48.0, 2.0)))], &truth, 10.0).unwrap();
        let g = heatmap_grid(&one, &truth, 500.0).unwrap();
        assert_eq!((g.rows, g.cols, g.total()), (1, 1, 1));

        let none = percent_correct(&[pred("a", None)], &truth, 10.0).unwrap();
        let g = heatmap_grid(&none, &truth, 500.0).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let half = 250.0 / METERS_PER_DEGREE;
        let expected = format!("{:.6},{:.6},0", 48.0 + half, 2.0 + half / 48f64.to_radians().cos());
        assert_eq!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap(), expected);

        let empty = EvalReport {
            radius_m: 1.0,
            verdicts: vec![],
            split: None,
        };
        assert!(heatmap_grid(&empty, &truth, 500.0).is_err());
        assert!(heatmap_grid(&one, &truth, 0.0).unwrap_err().is_config());
    }

    #[test]
    fn heatmap_hand_placed_cells() {
        let dlat = 500.0 / METERS_PER_DEGREE;
        // box spans lat 0 .. 3.5 cells; cells near the equator are ~square
        let pts = [
            ("a", 0.0, 0.0),
            ("b", 0.2 * dlat, 0.3 * dlat),
            ("c", 0.9 * dlat, 0.1 * dlat),
            ("d", 3.5 * dlat, 2.5 * dlat),
        ];
        let truth: HashMap<String, GeoPoint> = pts.iter().map(|(id, la, lo)| (id.to_string(), gp(*la, *lo))).collect();
        let preds: Vec<GlePrediction> = pts.iter().map(|(id, la, lo)| pred(id, Some(gp(*la, *lo)))).collect();
        let r = percent_correct(&preds, &truth, 1.0).unwrap();
        let g = heatmap_grid(&r, &truth, 500.0).unwrap();
        let cos = (1.75 * dlat).to_radians().cos();
        let expected_d = (
            (3.5 * dlat / dlat).floor() as usize,
            (2.5 * dlat / (dlat / cos)).floor() as usize,
        );
        let mut expected = BTreeMap::new();
        expected.insert((0, 0), 3u64);
        expected.insert(expected_d, 1u64);
        assert_eq!(g.counts, expected);
        assert_eq!(g.total(), r.correct() as u64);
    }

    struct Flat;

    impl FeatureExtractor for Flat {
        fn extract(&self, image_id: &str, img: &RasterImage) -> Result<crate::FeatureSet> {
            // a single feature seeded by the first pixel's brightness
            let mut rng =
                <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64((img.pixels()[0][0] * 1000.0) as u64);
            let layout = crate::features::SyntheticLayout::default();
            let kp = crate::features::random_keypoint(&mut rng, &layout);
            let d = crate::features::random_descriptor(&mut rng);
            crate::FeatureSet::new(image_id, vec![kp], vec![d])
        }
    }

    #[test]
    fn identity_filter_reproduces_original() {
        let mut pixels = HashMap::new();
        let mut background = Vec::new();
        for i in 0..12 {
            let id = format!("bg{i}");
            pixels.insert(id.clone(), RasterImage::filled(4, 4, [i as f32 / 12.0; 3]).unwrap());
            background.push(GeoImage {
                id,
                geo: gp(i as f64, 0.0),
            });
        }
        let targets: Vec<GeoImage> = (0..4)
            .map(|i| GeoImage {
                id: format!("bg{}", i * 3),
                geo: gp((i * 3) as f64, 0.0),
            })
            .collect();
        let train: Vec<crate::FeatureSet> = background
            .iter()
            .map(|b| Flat.extract(&b.id, &pixels[&b.id]).unwrap())
            .collect();
        let vocab = VisualVocabulary::train_on_images(&train, 4, 1, Exec::default()).unwrap();
        let setup = FilteredBackgroundSetup {
            vocab: &vocab,
            extractor: &Flat,
            forest_seed: 3,
            max_checks: 64,
            shortlist: 5,
            radii: vec![100.0, 1000.0],
            exec: Exec::default(),
        };
        let out =
            filtered_background_experiment(&setup, &background, &pixels, &targets, &pixels, &Enhancement::Identity)
                .unwrap();
        assert_eq!(out.unfiltered, out.original_bg);
        assert_eq!(out.original_bg, out.filtered_bg);
        assert_eq!(out.collection_size, 12);
        assert!(out.replaced.iter().all(|n| *n == 5));

        let mut missing = pixels.clone();
        missing.remove("bg5");
        assert!(matches!(
            filtered_background_experiment(&setup, &background, &missing, &targets, &pixels, &Enhancement::Identity),
            Err(Error::Data(_))
        ));
    }

    proptest! {
        #[test]
        fn cloak_bounds(b in prop::collection::btree_set(0u8..30, 1..20), a in prop::collection::btree_set(0u8..30, 0..20)) {
            let b: BTreeSet<String> = b.iter().map(|x| x.to_string()).collect();
            let a: BTreeSet<String> = a.iter().map(|x| x.to_string()).collect();
            let c = cloak_from_sets(b, a).unwrap();
            prop_assert!(c.gross() >= c.net() - 1e-12);
            prop_assert!(c.gross() >= 0.0 && c.gross() <= 100.0);
        }

        #[test]
        fn monotone_in_radius(d in prop::collection::vec(0f64..5000.0, 1..30), r1 in 0f64..3000.0, extra in 0f64..3000.0) {
            let truth: HashMap<String, GeoPoint> = (0..d.len()).map(|i| (i.to_string(), gp(0.0, 0.0))).collect();
            let preds: Vec<GlePrediction> = d.iter().enumerate().map(|(i, m)| pred(&i.to_string(), Some(gp(m / METERS_PER_DEGREE, 0.0)))).collect();
            let small = percent_correct(&preds, &truth, r1).unwrap().correct_ids();
            let large = percent_correct(&preds, &truth, r1 + extra).unwrap().correct_ids();
            prop_assert!(small.is_subset(&large));
        }

        #[test]
        fn heatmap_sums_to_correct(pts in prop::collection::vec((40f64..40.2, 10f64..10.3, any::<bool>()), 1..40)) {
            let truth: HashMap<String, GeoPoint> = pts.iter().enumerate().map(|(i, p)| (i.to_string(), gp(p.0, p.1))).collect();
            let preds: Vec<GlePrediction> = pts.iter().enumerate().map(|(i, p)| pred(&i.to_string(), p.2.then(|| gp(p.0, p.1)))).collect();
            let r = percent_correct(&preds, &truth, 1.0).unwrap();
            let g = heatmap_grid(&r, &truth, 500.0).unwrap();
            prop_assert_eq!(g.total(), r.correct() as u64);
        }
    }
}
