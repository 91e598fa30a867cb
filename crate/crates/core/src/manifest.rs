//! Manifest and prediction CSV files.
//!
//! A manifest has the header `id,path,lat,lon,tags`; `lat`/`lon` may be
//! empty for images without ground truth and `tags` is `;`-separated.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::gle::GlePrediction;

const MANIFEST_HEADER: [&str; 5] = ["id", "path", "lat", "lon", "tags"];
const PREDICTION_HEADER: [&str; 6] = ["target_id", "pred_lat", "pred_lon", "propagator_id", "system", "ms"];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub path: PathBuf,
    pub geo: Option<GeoPoint>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn read<R: Read>(r: R, base: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        if rdr.headers()?.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Data(format!(
                "manifest: expected header {}",
                MANIFEST_HEADER.join(",")
            )));
        }
        let mut rows = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let at = || format!("manifest row {}", line + 1);
            let id = rec[0].trim().to_string();
            if id.is_empty() {
                return Err(Error::Data(format!("{}: empty id", at())));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Ingestion(format!("{}: duplicate id {id:?}", at())));
            }
            let geo = match (rec[2].trim(), rec[3].trim()) {
                ("", "") => None,
                (lat, lon) => {
                    let lat: f64 = lat
                        .parse()
                        .map_err(|_| Error::Data(format!("{}: bad lat {lat:?}", at())))?;
                    let lon: f64 = lon
                        .parse()
                        .map_err(|_| Error::Data(format!("{}: bad lon {lon:?}", at())))?;
                    Some(GeoPoint::new(lat, lon).map_err(|e| Error::Data(format!("{}: {e}", at())))?)
                }
            };
            let tags = rec[4]
                .split(';')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(String::from)
                .collect();
            let path = PathBuf::from(rec[1].trim());
            rows.push(ManifestRow {
                id,
                path: if path.is_absolute() { path } else { base.join(path) },
                geo,
                tags,
            });
        }
        Ok(Manifest { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::read(file, base)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(MANIFEST_HEADER)?;
        for r in &self.rows {
            let (lat, lon) = r
                .geo
                .map(|g| (format!("{:.6}", g.lat()), format!("{:.6}", g.lon())))
                .unwrap_or_default();
            out.write_record([&r.id, &r.path.display().to_string(), &lat, &lon, &r.tags.join(";")])?;
        }
        out.flush().map_err(|e| Error::Data(format!("manifest: {e}")))?;
        Ok(())
    }

    /// Ground truth of every row, failing on a row without coordinates.
    pub fn truth(&self) -> Result<HashMap<String, GeoPoint>> {
        self.rows
            .iter()
            .map(|r| {
                r.geo
                    .map(|g| (r.id.clone(), g))
                    .ok_or_else(|| Error::Data(format!("manifest row {} has no coordinates", r.id)))
            })
            .collect()
    }
}

/// A row of a predictions file; `ms` is `None` when timing is omitted.
pub fn write_predictions<W: Write>(rows: &[(GlePrediction, Option<f64>)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(PREDICTION_HEADER)?;
    for (p, ms) in rows {
        let (lat, lon, prop) = match &p.propagator {
            Some(pr) => (
                format!("{:.6}", pr.geo.lat()),
                format!("{:.6}", pr.geo.lon()),
                pr.image_id.clone(),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        let ms = ms.map(|m| format!("{m:.3}")).unwrap_or_default();
        out.write_record([p.target_id.as_str(), &lat, &lon, &prop, p.system.as_str(), &ms])?;
    }
    out.flush().map_err(|e| Error::Data(format!("predictions: {e}")))?;
    Ok(())
}

/// Reads predictions; an empty `propagator_id` is an abstention.
pub fn read_predictions<R: Read>(r: R) -> Result<Vec<GlePrediction>> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().collect::<Vec<_>>() != PREDICTION_HEADER {
        return Err(Error::Data(format!(
            "predictions: expected header {}",
            PREDICTION_HEADER.join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let system = rec[4]
            .parse()
            .map_err(|_| Error::Data(format!("predictions: bad system {:?}", &rec[4])))?;
        let propagator = if rec[3].is_empty() {
            None
        } else {
            let lat: f64 = rec[1]
                .parse()
                .map_err(|_| Error::Data(format!("predictions: bad lat {:?}", &rec[1])))?;
            let lon: f64 = rec[2]
                .parse()
                .map_err(|_| Error::Data(format!("predictions: bad lon {:?}", &rec[2])))?;
            Some(crate::gle::Propagator {
                image_id: rec[3].to_string(),
                geo: GeoPoint::new(lat, lon)?,
            })
        };
        out.push(GlePrediction {
            target_id: rec[0].to_string(),
            propagator,
            system,
            score: 0.0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gle::{GleSystem, Propagator};

    #[test]
    fn manifest_round_trip() {
        let text = "id,path,lat,lon,tags\na,imgs/a.ppm,37.8199,-122.4783,goldengate; fog\nb,/abs/b.ppm,,,\n";
        let m = Manifest::read(text.as_bytes(), Path::new("/data")).unwrap();
        assert_eq!(m.rows[0].path, PathBuf::from("/data/imgs/a.ppm"));
        assert_eq!(m.rows[0].tags, ["goldengate", "fog"]);
        assert_eq!(m.rows[1].geo, None);
        assert!(m.rows[1].tags.is_empty());
        assert!(m.truth().is_err());
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        assert_eq!(Manifest::read(buf.as_slice(), Path::new("/")).unwrap(), m);
    }

    #[test]
    fn manifest_errors() {
        let dup = "id,path,lat,lon,tags\na,x,1,2,\na,y,1,2,\n";
        assert!(matches!(
            Manifest::read(dup.as_bytes(), Path::new(".")),
            Err(Error::Ingestion(_))
        ));
        let bad = "id,path,lat,lon,tags\na,x,95,2,\n";
        assert!(Manifest::read(bad.as_bytes(), Path::new(".")).is_err());
        assert!(Manifest::read("x,y\n1,2\n".as_bytes(), Path::new(".")).is_err());
    }

    #[test]
    fn predictions_round_trip() {
        let rows = vec![
            (
                GlePrediction {
                    target_id: "t1".into(),
                    propagator: Some(Propagator {
                        image_id: "bg7".into(),
                        geo: GeoPoint::new(37.8199, -122.4783).unwrap(),
                    }),
                    system: GleSystem::Pgm,
                    score: 2.5,
                },
                None,
            ),
            (GlePrediction::abstain("t2", GleSystem::Bnn), Some(1.25)),
        ];
        let mut buf = Vec::new();
        write_predictions(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "target_id,pred_lat,pred_lon,propagator_id,system,ms\nt1,37.819900,-122.478300,bg7,pgm,\nt2,,,,bnn,1.250\n"
        );
        let back = read_predictions(buf.as_slice()).unwrap();
        assert_eq!(back[0].propagator, rows[0].0.propagator);
        assert!(back[1].is_abstain());
    }
}
