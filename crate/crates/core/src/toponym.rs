//! Toponym detection from the geographic concentration of tag occurrences.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geo::{to_cell, GeoPoint, GridCell};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToponymParams {
    pub cell_size_deg: f64,
    pub min_count: u64,
    /// Minimum share of occurrences in the busiest cell (inclusive).
    pub threshold: f64,
}

impl Default for ToponymParams {
    fn default() -> Self {
        ToponymParams {
            cell_size_deg: 1.0,
            min_count: 5,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TagClass {
    Toponym,
    NotToponym,
    Insufficient,
}

impl TagClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            TagClass::Toponym => "toponym",
            TagClass::NotToponym => "not_toponym",
            TagClass::Insufficient => "insufficient",
        }
    }
}

impl fmt::Display for TagClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TagClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toponym" => Ok(TagClass::Toponym),
            "not_toponym" => Ok(TagClass::NotToponym),
            "insufficient" => Ok(TagClass::Insufficient),
            _ => Err(Error::Data(format!("unknown tag class {s:?}"))),
        }
    }
}

pub fn normalize_tag(tag: &str) -> String {
    tag.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TagStats {
    pub tag: String,
    pub total: u64,
    pub cell_counts: BTreeMap<GridCell, u64>,
}

impl TagStats {
    /// Share of occurrences in the busiest cell; 0 for an unused tag.
    pub fn concentration(&self) -> f64 {
        match self.cell_counts.values().max() {
            Some(&m) if self.total > 0 => m as f64 / self.total as f64,
            _ => 0.0,
        }
    }
}

/// Counts, per normalized tag, the images carrying it and their cells.
/// A tag repeated on one image counts once.
pub fn tag_stats<'a>(
    images: impl IntoIterator<Item = (GeoPoint, &'a [String])>,
    cell_size_deg: f64,
) -> Result<BTreeMap<String, TagStats>> {
    let mut out: BTreeMap<String, TagStats> = BTreeMap::new();
    for (geo, tags) in images {
        let cell = to_cell(geo, cell_size_deg)?;
        let unique: BTreeSet<String> = tags
            .iter()
            .map(|t| normalize_tag(t))
            .filter(|t| !t.is_empty())
            .collect();
        for tag in unique {
            let s = out.entry(tag.clone()).or_insert_with(|| TagStats {
                tag,
                ..TagStats::default()
            });
            s.total += 1;
            *s.cell_counts.entry(cell).or_insert(0) += 1;
        }
    }
    Ok(out)
}

pub fn classify_tag(stats: &TagStats, params: &ToponymParams) -> TagClass {
    if stats.total < params.min_count {
        TagClass::Insufficient
    } else if stats.concentration() >= params.threshold {
        TagClass::Toponym
    } else {
        TagClass::NotToponym
    }
}

/// Classification of every tag plus the statistics behind it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TagTable {
    pub rows: BTreeMap<String, (TagClass, u64, f64)>,
}

impl TagTable {
    pub fn from_stats(stats: &BTreeMap<String, TagStats>, params: &ToponymParams) -> Self {
        let rows = stats
            .iter()
            .map(|(tag, s)| (tag.clone(), (classify_tag(s, params), s.total, s.concentration())))
            .collect();
        TagTable { rows }
    }

    pub fn class_of(&self, tag: &str) -> Option<TagClass> {
        self.rows.get(&normalize_tag(tag)).map(|r| r.0)
    }

    pub fn is_toponym(&self, tag: &str) -> bool {
        self.class_of(tag) == Some(TagClass::Toponym)
    }

    /// CSV with header `tag,class,total,concentration`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["tag", "class", "total", "concentration"])?;
        for (tag, (class, total, conc)) in &self.rows {
            out.write_record([tag.as_str(), class.as_str(), &total.to_string(), &format!("{conc:.6}")])?;
        }
        out.flush().map_err(|e| Error::Data(format!("tags csv: {e}")))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["tag", "class", "total", "concentration"] {
            return Err(Error::Data(
                "tags csv: expected header tag,class,total,concentration".into(),
            ));
        }
        let mut rows = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let total = rec[2]
                .parse()
                .map_err(|_| Error::Data(format!("tags csv: bad total {:?}", &rec[2])))?;
            let conc = rec[3]
                .parse()
                .map_err(|_| Error::Data(format!("tags csv: bad concentration {:?}", &rec[3])))?;
            rows.insert(normalize_tag(&rec[0]), (rec[1].parse()?, total, conc));
        }
        Ok(TagTable { rows })
    }
}

/// Splits targets into those with at least one toponym tag and the rest,
/// preserving input order within each part.
pub fn split_targets<'a>(
    targets: impl IntoIterator<Item = (&'a str, &'a [String])>,
    table: &TagTable,
) -> (Vec<String>, Vec<String>) {
    let mut tagged = Vec::new();
    let mut tagless = Vec::new();
    for (id, tags) in targets {
        if tags.iter().any(|t| table.is_toponym(t)) {
            tagged.push(id.to_string());
        } else {
            tagless.push(id.to_string());
        }
    }
    (tagged, tagless)
}
