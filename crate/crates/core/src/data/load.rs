use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{parse_timestamp, TtsDataset};
use crate::error::{GmrlError, Result};
use crate::tensor::{snapshot, Tensor};

const CSV_HEADER: [&str; 4] = ["timestamp", "location", "source", "value"];
const VALUES_ENTRY: &str = "values";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Long-form CSV with header `timestamp,location,source,value`.
    Csv,
    /// Tensor snapshot with a `values` entry of shape (T, L, S) plus a JSON
    /// sidecar at `<path>.json`.
    Snapshot,
}

impl DataFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Snapshot,
        }
    }
}

/// Metadata stored next to a snapshot dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub time_index: Vec<String>,
    pub location_ids: Vec<String>,
    pub source_ids: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<TtsDataset> {
    let ds = match format {
        DataFormat::Csv => load_csv(path)?,
        DataFormat::Snapshot => load_snapshot(path)?,
    };
    log::info!(
        "loaded {}: {} steps x {} locations x {} sources",
        path.display(),
        ds.steps(),
        ds.locations(),
        ds.sources()
    );
    Ok(ds)
}

pub fn load_csv(path: &Path) -> Result<TtsDataset> {
    let file = File::open(path).map_err(|e| GmrlError::io(path, e))?;
    read_csv(file)
}

fn intern(ids: &mut Vec<String>, lookup: &mut HashMap<String, usize>, key: &str) -> usize {
    if let Some(&i) = lookup.get(key) {
        return i;
    }
    ids.push(key.to_string());
    lookup.insert(key.to_string(), ids.len() - 1);
    ids.len() - 1
}

/// Reads long-form CSV. Rows must be grouped by timestamp in increasing
/// order; locations and sources are indexed in order of first appearance and
/// every (timestamp, location, source) cell must appear exactly once.
pub fn read_csv(reader: impl Read) -> Result<TtsDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| GmrlError::Data(format!("csv header: {e}")))?
        .clone();
    if header.is_empty() {
        return Err(GmrlError::Data("no rows".into()));
    }
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(GmrlError::Data(format!(
            "csv header must be `{}`, got `{}`",
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let (mut times, mut locs, mut srcs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut loc_lookup, mut src_lookup) = (HashMap::new(), HashMap::new());
    let mut last_secs: Option<i64> = None;
    let mut cells: HashMap<(usize, usize, usize), f64> = HashMap::new();

    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| GmrlError::Data(format!("row {row}: {e}")))?;
        if record.len() != 4 {
            return Err(GmrlError::Data(format!(
                "row {row}: expected 4 fields, found {}",
                record.len()
            )));
        }
        let (ts, loc, src, raw) = (&record[0], &record[1], &record[2], &record[3]);
        let secs = parse_timestamp(ts).ok_or_else(|| GmrlError::Data(format!("row {row}: bad timestamp `{ts}`")))?;
        match last_secs {
            Some(prev) if secs < prev => {
                return Err(GmrlError::Data(format!(
                    "row {row}: timestamp `{ts}` goes backwards (non-monotone time index)"
                )));
            }
            Some(prev) if secs == prev => {}
            _ => {
                times.push(ts.to_string());
                last_secs = Some(secs);
            }
        }
        let t = times.len() - 1;
        let l = intern(&mut locs, &mut loc_lookup, loc);
        let s = intern(&mut srcs, &mut src_lookup, src);
        let value: f64 = raw
            .parse()
            .map_err(|_| GmrlError::Data(format!("row {row}: value `{raw}` is not a number")))?;
        if !value.is_finite() {
            return Err(GmrlError::Data(format!(
                "row {row}: non-finite value at (t={t}, l={l}, s={s}) [{ts}, {loc}, {src}]"
            )));
        }
        if cells.insert((t, l, s), value).is_some() {
            return Err(GmrlError::Data(format!(
                "row {row}: duplicate cell ({ts}, {loc}, {src})"
            )));
        }
    }
    if cells.is_empty() {
        return Err(GmrlError::Data("no rows".into()));
    }

    let (nt, nl, ns) = (times.len(), locs.len(), srcs.len());
    let mut data = Vec::with_capacity(nt * nl * ns);
    for t in 0..nt {
        for l in 0..nl {
            for s in 0..ns {
                let v = cells.get(&(t, l, s)).ok_or_else(|| {
                    GmrlError::Data(format!(
                        "ragged rows: missing cell ({}, {}, {})",
                        times[t], locs[l], srcs[s]
                    ))
                })?;
                data.push(*v);
            }
        }
    }
    TtsDataset::new(Tensor::from_vec(&[nt, nl, ns], data)?, times, locs, srcs)
}

pub fn write_csv(ds: &TtsDataset, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| GmrlError::Data(format!("csv write: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    let (nl, ns) = (ds.locations(), ds.sources());
    for (t, ts) in ds.time_index().iter().enumerate() {
        for (l, loc) in ds.location_ids().iter().enumerate() {
            for (s, src) in ds.source_ids().iter().enumerate() {
                let v = ds.values().data()[(t * nl + l) * ns + s];
                w.write_record([ts.as_str(), loc, src, &v.to_string()]).map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| GmrlError::Data(format!("csv write: {e}")))
}

pub fn save_csv(ds: &TtsDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| GmrlError::io(path, e))?;
    write_csv(ds, file)
}

pub fn load_snapshot(path: &Path) -> Result<TtsDataset> {
    let entries = snapshot::read(path)?;
    let values = entries
        .into_iter()
        .find(|(name, _)| name == VALUES_ENTRY)
        .map(|(_, t)| t)
        .ok_or_else(|| GmrlError::Data(format!("{}: no `{VALUES_ENTRY}` entry", path.display())))?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| GmrlError::io(&side, e))?;
    let meta: Sidecar = serde_json::from_str(&text)?;
    TtsDataset::new(values, meta.time_index, meta.location_ids, meta.source_ids)
}

pub fn save_snapshot(ds: &TtsDataset, path: &Path) -> Result<()> {
    snapshot::write(path, &[(VALUES_ENTRY, ds.values())])?;
    let meta = Sidecar {
        time_index: ds.time_index().to_vec(),
        location_ids: ds.location_ids().to_vec(),
        source_ids: ds.source_ids().to_vec(),
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta)?;
    std::fs::write(&side, text + "\n").map_err(|e| GmrlError::io(&side, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_steps_two_locations_one_source() {
        let csv = "timestamp,location,source,value\n\
                   2024-01-01T00:00:00Z,a,x,1\n2024-01-01T00:00:00Z,b,x,2\n\
                   2024-01-01T01:00:00Z,a,x,3\n2024-01-01T01:00:00Z,b,x,4\n\
                   2024-01-01T02:00:00Z,b,x,6\n2024-01-01T02:00:00Z,a,x,5\n";
        let ds = read_csv(csv.as_bytes()).unwrap();
        assert_eq!(ds.values().dims(), &[3, 2, 1]);
        assert_eq!(ds.values().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(ds.location_ids(), &["a", "b"]);
    }

    #[test]
    fn nan_cell_is_named() {
        let csv = "timestamp,location,source,value\n\
                   2024-01-01T00:00:00Z,a,x,1\n2024-01-01T01:00:00Z,a,x,NaN\n";
        let err = read_csv(csv.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("(t=1, l=0, s=0)") && err.contains("row 1"), "{err}");
    }

    #[test]
    fn empty_file_has_no_rows() {
        assert!(read_csv("".as_bytes()).unwrap_err().to_string().contains("no rows"));
        let header_only = "timestamp,location,source,value\n";
        assert!(read_csv(header_only.as_bytes()).unwrap_err().to_string().contains("no rows"));
    }

    #[test]
    fn ragged_and_backwards_inputs_rejected() {
        let ragged = "timestamp,location,source,value\n\
                      2024-01-01T00:00:00Z,a,x,1\n2024-01-01T00:00:00Z,b,x,2\n\
                      2024-01-01T01:00:00Z,a,x,3\n";
        assert!(read_csv(ragged.as_bytes()).unwrap_err().to_string().contains("ragged"));
        let backwards = "timestamp,location,source,value\n\
                         2024-01-01T01:00:00Z,a,x,1\n2024-01-01T00:00:00Z,a,x,2\n";
        assert!(read_csv(backwards.as_bytes()).unwrap_err().to_string().contains("non-monotone"));
        let short_row = "timestamp,location,source,value\n2024-01-01T00:00:00Z,a,1\n";
        assert!(read_csv(short_row.as_bytes()).is_err());
    }

    #[test]
    fn csv_and_snapshot_round_trip() {
        let csv = "timestamp,location,source,value\n\
                   2024-01-01T00:00:00Z,a,x,0.1\n2024-01-01T00:00:00Z,a,y,-2.5e-7\n\
                   2024-01-01T00:30:00Z,a,x,3\n2024-01-01T00:30:00Z,a,y,4\n";
        let ds = read_csv(csv.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), ds);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tns");
        save_snapshot(&ds, &path).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(load_dataset(&path, DataFormat::from_path(&path)).unwrap(), ds);
    }
}
