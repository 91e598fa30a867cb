use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};

use geocloak::enhance::Enhancement;
use geocloak::eval::{
    cloak_metrics, filtered_background_experiment, heatmap_grid, percent_correct, read_report_csv, write_report_csv,
    EvalReport, FilteredBackgroundSetup, GeoImage, ImageSource,
};
use geocloak::features::{FeatureExtractor, SiftExtractor, SiftParams};
use geocloak::gle::{GeoIndex, GleConfig, GlePrediction, Target};
use geocloak::image_io::{read_image, write_image};
use geocloak::index::ImageRecord;
use geocloak::manifest::{write_predictions, Manifest, ManifestRow};
use geocloak::toponym::{split_targets, tag_stats, TagTable, ToponymParams};
use geocloak::vocab::VisualVocabulary;
use geocloak::{Exec, FeatureSet, RasterImage};

use crate::*;

pub(crate) fn dispatch(command: Command, exec: Exec) -> Result<(), Failure> {
    match command {
        Command::BuildVocab(a) => build_vocab(a, exec),
        Command::Index(IndexCommand::Build(a)) => index_build(a, exec),
        Command::Locate(a) => locate(a, exec),
        Command::LocateBatch(a) => locate_batch(a, exec),
        Command::Enhance(a) => enhance(a),
        Command::Evaluate(a) => evaluate(a, exec),
        Command::CloakReport(a) => cloak_report(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Toponym(a) => toponym(a),
        Command::Experiment(ExperimentCommand::FilteredBackground(a)) => filtered_background(a, exec),
    }
}

fn extractor(args: &ExtractArgs) -> SiftExtractor {
    SiftExtractor::new(SiftParams {
        max_features: Some(args.max_features),
        ..SiftParams::default()
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), Failure> {
    w.flush().map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn extract_row(extractor: &SiftExtractor, row: &ManifestRow) -> geocloak::Result<FeatureSet> {
    extractor.extract(&row.id, &read_image(&row.path)?)
}

/// Features of every readable row; unreadable or undersized images are
/// logged and skipped.
fn extract_manifest<'a>(
    manifest: &'a Manifest,
    extractor: &SiftExtractor,
    exec: Exec,
) -> Vec<(&'a ManifestRow, FeatureSet)> {
    let results = exec.map(&manifest.rows, |row| extract_row(extractor, row));
    let mut out = Vec::with_capacity(results.len());
    for (row, r) in manifest.rows.iter().zip(results) {
        match r {
            Ok(f) => out.push((row, f)),
            Err(e) => warn!("skipping {}: {e}", row.id),
        }
    }
    out
}

fn build_vocab(a: BuildVocabArgs, exec: Exec) -> Result<(), Failure> {
    let manifest = Manifest::load(&a.images)?;
    let features: Vec<FeatureSet> = extract_manifest(&manifest, &extractor(&a.extract), exec)
        .into_iter()
        .map(|(_, f)| f)
        .collect();
    info!("training {} words on {} images", a.k, features.len());
    let vocab = VisualVocabulary::train_on_images(&features, a.k, a.seed, exec)?;
    vocab.save(&a.out)?;
    Ok(())
}

fn index_build(a: IndexBuildArgs, exec: Exec) -> Result<(), Failure> {
    let manifest = Manifest::load(&a.images)?;
    let vocab = VisualVocabulary::load(&a.vocab)?;
    let bnn_vocab = match (&a.bnn_vocab, a.no_bnn) {
        (_, true) => None,
        (Some(p), false) => Some(VisualVocabulary::load(p)?),
        (None, false) => Some(vocab.clone()),
    };
    let extracted = extract_manifest(&manifest, &extractor(&a.extract), exec);
    let skipped = manifest.rows.len() - extracted.len();
    let records = extracted
        .into_iter()
        .map(|(row, features)| {
            let geo = row
                .geo
                .ok_or_else(|| Failure::Data(format!("background image {} has no coordinates", row.id)))?;
            Ok(ImageRecord {
                id: row.id.clone(),
                features,
                geo,
                tags: row.tags.clone(),
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let indexed = records.len();
    let index = GeoIndex::build(records, &vocab, bnn_vocab, a.seed, exec)?;
    index.save(&a.out)?;
    eprintln!("indexed {indexed} images, skipped {skipped}");
    Ok(())
}

fn gle_config(q: &QueryArgs, exec: Exec) -> GleConfig {
    GleConfig {
        top_k: q.top_k,
        min_inliers: q.min_inliers,
        max_checks: q.checks,
        exec,
    }
}

fn locate(a: LocateArgs, exec: Exec) -> Result<(), Failure> {
    let index = GeoIndex::load(&a.query.index)?;
    let id = a.image.display().to_string();
    let features = extractor(&a.query.extract).extract(&id, &read_image(&a.image)?)?;
    let p = index.geolocate(&features, a.query.system, &gle_config(&a.query, exec))?;
    match &p.propagator {
        Some(pr) => println!("{:.6} {:.6} {} {:.6}", pr.geo.lat(), pr.geo.lon(), pr.image_id, p.score),
        None => println!("ABSTAIN"),
    }
    Ok(())
}

struct ImageTarget<'a> {
    row: &'a ManifestRow,
    extractor: &'a SiftExtractor,
}

impl Target for ImageTarget<'_> {
    fn id(&self) -> &str {
        &self.row.id
    }

    fn features(&self) -> geocloak::Result<FeatureSet> {
        extract_row(self.extractor, self.row)
    }
}

/// Locates every row; a target whose image cannot be used is logged and
/// counted as an abstention.
fn locate_rows(manifest: &Manifest, q: &QueryArgs, exec: Exec) -> Result<Vec<(GlePrediction, f64)>, Failure> {
    let index = GeoIndex::load(&q.index)?;
    let ex = extractor(&q.extract);
    let targets: Vec<ImageTarget> = manifest
        .rows
        .iter()
        .map(|row| ImageTarget { row, extractor: &ex })
        .collect();
    let cfg = gle_config(q, exec);
    let mut out = Vec::with_capacity(targets.len());
    for row in index.geolocate_batch(&targets, q.system, &cfg) {
        let ms = row.elapsed.as_secs_f64() * 1000.0;
        match row.result {
            Ok(p) => out.push((p, ms)),
            Err(e) if e.is_config() => return Err(e.into()),
            Err(e) => {
                warn!("target {}: {e}", row.target_id);
                out.push((GlePrediction::abstain(row.target_id, q.system), ms));
            }
        }
    }
    Ok(out)
}

fn locate_batch(a: LocateBatchArgs, exec: Exec) -> Result<(), Failure> {
    let manifest = Manifest::load(&a.targets)?;
    let rows: Vec<(GlePrediction, Option<f64>)> = locate_rows(&manifest, &a.query, exec)?
        .into_iter()
        .map(|(p, ms)| (p, (!a.no_timing).then_some(ms)))
        .collect();
    let mut w = create(&a.out)?;
    write_predictions(&rows, &mut w)?;
    finish(w, &a.out)
}

fn enhance(a: EnhanceArgs) -> Result<(), Failure> {
    let mut img: RasterImage = read_image(&a.input)?;
    let steps = [
        a.filter.map(Enhancement::Filter),
        a.crop.map(Enhancement::Crop),
        a.tiltshift.then_some(Enhancement::TiltShift),
    ];
    for step in steps.into_iter().flatten() {
        img = step.apply(&img)?;
    }
    write_image(&img, &a.out)?;
    Ok(())
}

fn evaluate(a: EvaluateArgs, exec: Exec) -> Result<(), Failure> {
    let manifest = Manifest::load(&a.targets)?;
    let truth = manifest.truth()?;
    let table = match &a.split_toponym {
        Some(p) => Some(TagTable::read_csv(
            File::open(p).map_err(|e| geocloak::Error::io(p, e))?,
        )?),
        None => None,
    };
    for r in &a.radii {
        geocloak::eval::validate_radius(*r)?;
    }
    let predictions: Vec<GlePrediction> = locate_rows(&manifest, &a.query, exec)?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let tagged: Option<HashSet<String>> = table.map(|t| {
        let (tagged, _) = split_targets(manifest.rows.iter().map(|r| (r.id.as_str(), r.tags.as_slice())), &t);
        tagged.into_iter().collect()
    });
    let mut reports = Vec::with_capacity(a.radii.len());
    println!("subset,radius_m,total,correct,percent");
    for r in &a.radii {
        let mut report = percent_correct(&predictions, &truth, *r)?;
        if let Some(t) = &tagged {
            report = report.with_split(t);
        }
        println!("{}", report.summary("all"));
        if let Some(split) = &report.split {
            println!("{}", split.tagged.summary("tagged"));
            println!("{}", split.tagless.summary("tagless"));
        }
        reports.push(report);
    }
    let mut w = create(&a.out)?;
    write_report_csv(&reports, &mut w)?;
    finish(w, &a.out)
}

fn read_reports(path: &Path) -> Result<Vec<EvalReport>, Failure> {
    let f = File::open(path).map_err(|e| geocloak::Error::io(path, e))?;
    Ok(read_report_csv(f)?)
}

fn cloak_report(a: CloakReportArgs) -> Result<(), Failure> {
    let before = read_reports(&a.before)?;
    let after = read_reports(&a.after)?;
    println!("radius_m,before_correct,after_correct,net_cloaked,gross_cloaked");
    for b in &before {
        let m = after
            .iter()
            .find(|r| r.radius_m == b.radius_m)
            .ok_or_else(|| Failure::Data(format!("{} has no report at radius {}", a.after.display(), b.radius_m)))?;
        let c = cloak_metrics(b, m)?;
        println!(
            "{},{},{},{},{}",
            b.radius_m,
            c.before.len(),
            c.after.len(),
            c.net_string(),
            c.gross_string()
        );
    }
    Ok(())
}

fn heatmap(a: HeatmapArgs) -> Result<(), Failure> {
    let reports = read_reports(&a.report)?;
    let report = match a.radius {
        Some(r) => reports
            .iter()
            .find(|rep| rep.radius_m == r)
            .ok_or_else(|| Failure::Usage(format!("report has no radius {r}")))?,
        None if reports.len() == 1 => &reports[0],
        None => {
            return Err(Failure::Usage(
                "report holds several radii; choose one with --radius".into(),
            ))
        }
    };
    let truth = Manifest::load(&a.targets)?.truth()?;
    let grid = heatmap_grid(report, &truth, a.cell_meters)?;
    let mut w = create(&a.out)?;
    grid.write_csv(&mut w)?;
    finish(w, &a.out)
}

fn toponym(a: ToponymArgs) -> Result<(), Failure> {
    let manifest = Manifest::load(&a.manifest)?;
    let params = ToponymParams {
        cell_size_deg: a.cell_deg,
        min_count: a.min_count,
        threshold: a.threshold,
    };
    let located = manifest
        .rows
        .iter()
        .filter_map(|r| r.geo.map(|g| (g, r.tags.as_slice())));
    let stats = tag_stats(located, params.cell_size_deg)?;
    let table = TagTable::from_stats(&stats, &params);
    let mut w = create(&a.out)?;
    table.write_csv(&mut w)?;
    finish(w, &a.out)
}

/// Pixels read on demand from manifest paths.
struct ManifestImages(HashMap<String, PathBuf>);

impl ImageSource for ManifestImages {
    fn load(&self, id: &str) -> geocloak::Result<RasterImage> {
        let path = self
            .0
            .get(id)
            .ok_or_else(|| geocloak::Error::Data(format!("no image path for {id}")))?;
        read_image(path)
    }
}

fn located(manifest: &Manifest) -> Result<(Vec<GeoImage>, ManifestImages), Failure> {
    let images = manifest
        .rows
        .iter()
        .map(|r| {
            r.geo
                .map(|geo| GeoImage { id: r.id.clone(), geo })
                .ok_or_else(|| Failure::Data(format!("image {} has no coordinates", r.id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let paths = manifest.rows.iter().map(|r| (r.id.clone(), r.path.clone())).collect();
    Ok((images, ManifestImages(paths)))
}

fn filtered_background(a: FilteredBackgroundArgs, exec: Exec) -> Result<(), Failure> {
    let (background, bg_pixels) = located(&Manifest::load(&a.background)?)?;
    let (targets, target_pixels) = located(&Manifest::load(&a.targets)?)?;
    let vocab = VisualVocabulary::load(&a.vocab)?;
    let ex = extractor(&a.extract);
    let setup = FilteredBackgroundSetup {
        vocab: &vocab,
        extractor: &ex,
        forest_seed: a.seed,
        max_checks: a.checks,
        shortlist: a.shortlist,
        radii: a.radii.clone(),
        exec,
    };
    let outcome = filtered_background_experiment(&setup, &background, &bg_pixels, &targets, &target_pixels, &a.filter)?;
    info!(
        "collection size {}, replaced {} images in total",
        outcome.collection_size,
        outcome.replaced.iter().sum::<usize>()
    );
    let mut text = String::from("condition,radius_m,total,correct,percent\n");
    let conditions = [
        ("unfiltered", &outcome.unfiltered),
        ("original_background", &outcome.original_bg),
        ("filtered_background", &outcome.filtered_bg),
    ];
    for (label, reports) in conditions {
        for r in reports.iter() {
            text.push_str(&r.summary(label));
            text.push('\n');
        }
    }
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(text.as_bytes())
                .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
            finish(w, path)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
