//! Panel of usage and exposure counts: the observed data for the model.
//!
//! `c[i, r, t]` counts distinct authors that used word `i` in region `r`
//! during week `t`; `s[r, t]` counts distinct authors that posted anything
//! there that week. A panel round-trips through a plain-file directory
//! (vocab.txt, regions.csv, meta.json, counts.csv, exposure.csv).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PANEL_FORMAT_VERSION: &str = "panel/1";

/// A region with its centroid; doubles as the centroid record read from CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionInfo {
    pub region_id: u32,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
}

/// Observed counts for V words over R regions and T weeks.
#[derive(Debug, Clone)]
pub struct CountsPanel {
    /// Distinct-author usage counts, V x R x T.
    pub c: Array3<u32>,
    /// Distinct-author exposure counts, R x T.
    pub s: Array2<u32>,
    pub vocab: Vec<String>,
    pub regions: Vec<RegionInfo>,
    /// Date of week index 0.
    pub week_origin: NaiveDate,
}

#[derive(Serialize, Deserialize)]
struct PanelMeta {
    format_version: String,
    n_words: usize,
    n_regions: usize,
    n_weeks: usize,
    origin: NaiveDate,
}

impl CountsPanel {
    pub fn n_words(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn n_regions(&self) -> usize {
        self.c.shape()[1]
    }

    pub fn n_weeks(&self) -> usize {
        self.c.shape()[2]
    }

    /// Checks the structural invariants: dense region ids, matching shapes,
    /// and c <= s everywhere.
    pub fn validate(&self) -> Result<()> {
        let (v, r, t) = (self.n_words(), self.n_regions(), self.n_weeks());
        if v == 0 || r == 0 || t == 0 {
            return Err(Error::data("panel has an empty dimension"));
        }
        if self.vocab.len() != v {
            return Err(Error::data("vocab length does not match count tensor"));
        }
        if self.regions.len() != r || self.s.shape() != [r, t] {
            return Err(Error::data("region/exposure shape mismatch"));
        }
        for (idx, reg) in self.regions.iter().enumerate() {
            if reg.region_id as usize != idx {
                return Err(Error::data(format!(
                    "region ids must be dense 0..R-1, found {} at index {}",
                    reg.region_id, idx
                )));
            }
        }
        for i in 0..v {
            for rr in 0..r {
                for tt in 0..t {
                    if self.c[[i, rr, tt]] > self.s[[rr, tt]] {
                        return Err(Error::data(format!(
                            "c[{i},{rr},{tt}]={} exceeds exposure s={}",
                            self.c[[i, rr, tt]],
                            self.s[[rr, tt]]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the panel directory. Deterministic: fixed row order, no
    /// timestamps.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut vocab = BufWriter::new(fs::File::create(dir.join("vocab.txt"))?);
        for w in &self.vocab {
            writeln!(vocab, "{w}")?;
        }
        vocab.flush()?;

        let mut regions = csv::Writer::from_path(dir.join("regions.csv"))?;
        regions.write_record(["region_id", "name", "lat", "lon"])?;
        for reg in &self.regions {
            regions.write_record([
                reg.region_id.to_string(),
                reg.name.clone(),
                reg.lat.to_string(),
                reg.lon.to_string(),
            ])?;
        }
        regions.flush()?;

        let meta = PanelMeta {
            format_version: PANEL_FORMAT_VERSION.to_string(),
            n_words: self.n_words(),
            n_regions: self.n_regions(),
            n_weeks: self.n_weeks(),
            origin: self.week_origin,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

        let mut counts = BufWriter::new(fs::File::create(dir.join("counts.csv"))?);
        writeln!(counts, "word_idx,region_idx,week_idx,count")?;
        for i in 0..self.n_words() {
            for r in 0..self.n_regions() {
                for t in 0..self.n_weeks() {
                    let v = self.c[[i, r, t]];
                    if v > 0 {
                        writeln!(counts, "{i},{r},{t},{v}")?;
                    }
                }
            }
        }
        counts.flush()?;

        let mut exposure = BufWriter::new(fs::File::create(dir.join("exposure.csv"))?);
        writeln!(exposure, "region_idx,week_idx,count")?;
        for r in 0..self.n_regions() {
            for t in 0..self.n_weeks() {
                writeln!(exposure, "{r},{t},{}", self.s[[r, t]])?;
            }
        }
        exposure.flush()?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<CountsPanel> {
        let meta: PanelMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.format_version != PANEL_FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported panel format {}",
                meta.format_version
            )));
        }
        let vocab: Vec<String> = BufReader::new(fs::File::open(dir.join("vocab.txt"))?)
            .lines()
            .collect::<std::io::Result<_>>()?;
        let regions = read_regions_csv(&dir.join("regions.csv"))?;
        if vocab.len() != meta.n_words || regions.len() != meta.n_regions {
            return Err(Error::data("panel metadata disagrees with vocab/regions files"));
        }

        let mut c = Array3::<u32>::zeros((meta.n_words, meta.n_regions, meta.n_weeks));
        let mut reader = csv::Reader::from_path(dir.join("counts.csv"))?;
        for row in reader.deserialize() {
            let (i, r, t, v): (usize, usize, usize, u32) = row?;
            if i >= meta.n_words || r >= meta.n_regions || t >= meta.n_weeks {
                return Err(Error::data(format!("counts.csv index out of range: {i},{r},{t}")));
            }
            c[[i, r, t]] = v;
        }

        let mut s = Array2::<u32>::zeros((meta.n_regions, meta.n_weeks));
        let mut reader = csv::Reader::from_path(dir.join("exposure.csv"))?;
        for row in reader.deserialize() {
            let (r, t, v): (usize, usize, u32) = row?;
            if r >= meta.n_regions || t >= meta.n_weeks {
                return Err(Error::data(format!("exposure.csv index out of range: {r},{t}")));
            }
            s[[r, t]] = v;
        }

        let panel = CountsPanel {
            c,
            s,
            vocab,
            regions,
            week_origin: meta.origin,
        };
        // An ingest of an empty corpus legitimately produces a vocabulary-free
        // panel; modeling stages reject it via validate().
        if panel.n_words() > 0 {
            panel.validate()?;
        }
        Ok(panel)
    }
}

/// Reads a region/centroid CSV with header region_id,name,lat,lon.
pub fn read_regions_csv(path: &Path) -> Result<Vec<RegionInfo>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out: Vec<RegionInfo> = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    if out.is_empty() {
        return Err(Error::config(format!("no regions in {}", path.display())));
    }
    Ok(out)
}
