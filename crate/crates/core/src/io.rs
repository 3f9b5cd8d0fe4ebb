//! Files: the daily dataset CSV, model JSON, and CSV reports.
//!
//! Every writer goes through a temporary file in the destination directory
//! that is renamed into place, so readers never see a partial file.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{Coefficient, GlmFit};
use crate::error::{DpmError, Result};
use crate::estimation::{FitReport, SgdConfig};
use crate::eval::{LastTouchHistogram, RocCurve};
use crate::model::{CustomerHistory, Dataset, ModelParams};
use crate::rng::{hex_digest, stream};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Writes `path` atomically: `body` fills a temporary sibling file that is
/// renamed over `path` once complete.
pub fn atomic_write<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| DpmError::io(&dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w)?;
        w.flush().map_err(|e| DpmError::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| DpmError::io(path, e))?;
    tmp.persist(path).map_err(|e| DpmError::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadOptions {
    /// Extra column holding each customer's segment key.
    pub segment_column: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimeKind {
    Date,
    Index,
}

fn parse_time(raw: &str) -> Option<(TimeKind, i64)> {
    if let Ok(i) = raw.parse::<i64>() {
        return Some((TimeKind::Index, i));
    }
    let date = NaiveDate::parse_from_str(raw, "%Y-%m-%d").ok()?;
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date");
    Some((TimeKind::Date, (date - epoch).num_days()))
}

struct Columns {
    id: usize,
    time: usize,
    r: Vec<usize>,
    m: Vec<usize>,
    y: usize,
    segment: Option<usize>,
}

fn parse_header(path: &Path, header: &csv::StringRecord, options: &LoadOptions) -> Result<Columns> {
    let fail = |reason: String| DpmError::Parse {
        path: path.to_path_buf(),
        row: 1,
        id: None,
        reason,
    };
    let names: Vec<&str> = header.iter().collect();
    let segment = match &options.segment_column {
        Some(name) => Some(
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| fail(format!("segment column '{name}' not found")))?,
        ),
        None => None,
    };
    let core: Vec<(usize, &str)> = names
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != segment)
        .map(|(i, n)| (i, *n))
        .collect();
    let k = core.iter().filter(|(_, n)| n.starts_with("r.")).count();
    let l = core.iter().filter(|(_, n)| n.starts_with("m.")).count();
    let mut expected = vec!["id".to_string(), "time".to_string()];
    expected.extend((1..=k).map(|j| format!("r.{j}")));
    expected.extend((1..=l).map(|j| format!("m.{j}")));
    expected.push("y".to_string());
    let actual: Vec<&str> = core.iter().map(|(_, n)| *n).collect();
    if actual != expected {
        return Err(fail(format!(
            "header must be '{}', got '{}'",
            expected.join(","),
            actual.join(",")
        )));
    }
    let at = |i: usize| core[i].0;
    Ok(Columns {
        id: at(0),
        time: at(1),
        r: (0..k).map(|j| at(2 + j)).collect(),
        m: (0..l).map(|j| at(2 + k + j)).collect(),
        y: at(2 + k + l),
        segment,
    })
}

struct Pending {
    id: String,
    segment: Option<String>,
    kind: TimeKind,
    last_time: i64,
    r: Vec<u32>,
    m: Vec<u32>,
    y: Vec<u8>,
}

/// Reads a dataset from any reader; `path` only labels error messages.
pub fn read_dataset<R: Read>(reader: R, path: &Path, options: &LoadOptions) -> Result<Dataset> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = match csv.headers() {
        Ok(h) if !h.is_empty() => h.clone(),
        Ok(_) => return Err(DpmError::EmptyDataset),
        Err(e) => {
            return Err(DpmError::Parse {
                path: path.to_path_buf(),
                row: 1,
                id: None,
                reason: e.to_string(),
            })
        }
    };
    let cols = parse_header(path, &header, options)?;
    let (k, l) = (cols.r.len(), cols.m.len());

    let mut customers = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut current: Option<Pending> = None;
    let mut record = csv::StringRecord::new();
    let mut line = 1;

    let finish = |p: Pending| -> Result<CustomerHistory> {
        CustomerHistory::from_flat(p.id, p.segment, k, l, p.r, p.m, p.y)
    };

    loop {
        match csv.read_record(&mut record) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => {
                let row = e.position().map_or(line + 1, |p| p.line() as usize);
                return Err(DpmError::Parse {
                    path: path.to_path_buf(),
                    row,
                    id: None,
                    reason: e.to_string(),
                });
            }
        }
        line = record.position().map_or(line + 1, |p| p.line() as usize);
        let id = record[cols.id].to_string();
        let fail = |reason: String| DpmError::Parse {
            path: path.to_path_buf(),
            row: line,
            id: Some(id.clone()),
            reason,
        };
        if id.is_empty() {
            return Err(fail("empty id".into()));
        }
        let raw_time = &record[cols.time];
        let (kind, time) =
            parse_time(raw_time).ok_or_else(|| fail(format!("time '{raw_time}' is neither an integer nor a YYYY-MM-DD date")))?;
        let count = |col: usize, name: String| -> Result<u32> {
            let raw = &record[col];
            raw.parse::<u32>()
                .map_err(|_| fail(format!("{name} = '{raw}' is not a non-negative integer count")))
        };
        let r: Vec<u32> = (0..k).map(|j| count(cols.r[j], format!("r.{}", j + 1))).collect::<Result<_>>()?;
        let m: Vec<u32> = (0..l).map(|j| count(cols.m[j], format!("m.{}", j + 1))).collect::<Result<_>>()?;
        let y = match &record[cols.y] {
            "0" => 0u8,
            "1" => 1u8,
            other => return Err(fail(format!("y = '{other}' must be 0 or 1"))),
        };
        let segment = cols.segment.map(|c| record[c].to_string());

        let same = current.as_ref().is_some_and(|p| p.id == id);
        if same {
            let p = current.as_mut().expect("checked above");
            if p.kind != kind {
                return Err(fail("time mixes dates and integer days".into()));
            }
            if p.y.last() == Some(&1) {
                return Err(fail("row after the first purchase".into()));
            }
            if time <= p.last_time {
                return Err(fail(format!("time '{raw_time}' is not after the previous row")));
            }
            if time != p.last_time + 1 {
                return Err(fail(format!(
                    "gap of {} days before time '{raw_time}'",
                    time - p.last_time - 1
                )));
            }
            if p.segment != segment {
                return Err(fail("segment changes within a customer".into()));
            }
            p.last_time = time;
            p.r.extend(r);
            p.m.extend(m);
            p.y.push(y);
        } else {
            if !seen.insert(id.clone()) {
                return Err(fail("rows for this id are not contiguous".into()));
            }
            if let Some(p) = current.take() {
                customers.push(finish(p)?);
            }
            current = Some(Pending {
                id: id.clone(),
                segment,
                kind,
                last_time: time,
                r,
                m,
                y: vec![y],
            });
        }
    }
    if let Some(p) = current.take() {
        customers.push(finish(p)?);
    }
    if customers.is_empty() {
        return Err(DpmError::EmptyDataset);
    }
    Dataset::with_channels(k, l, customers)
}

pub fn load_dataset(path: impl AsRef<Path>, options: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DpmError::io(path, e))?;
    read_dataset(std::io::BufReader::new(file), path, options)
}

/// Writes the dataset with integer day indices starting at 0. The segment
/// column is added when `segment_column` is given.
pub fn write_dataset_to(w: &mut dyn Write, dataset: &Dataset, segment_column: Option<&str>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["id".to_string(), "time".to_string()];
    header.extend((1..=dataset.k()).map(|j| format!("r.{j}")));
    header.extend((1..=dataset.l()).map(|j| format!("m.{j}")));
    header.push("y".to_string());
    if let Some(name) = segment_column {
        header.push(name.to_string());
    }
    out.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for h in dataset.customers() {
        for t in 0..h.horizon() {
            row.clear();
            row.push(h.id().to_string());
            row.push(t.to_string());
            row.extend(h.r(t).iter().map(u32::to_string));
            row.extend(h.m(t).iter().map(u32::to_string));
            row.push(h.y()[t].to_string());
            if segment_column.is_some() {
                row.push(h.segment().unwrap_or_default().to_string());
            }
            out.write_record(&row)?;
        }
    }
    out.flush().map_err(|e| DpmError::io("<dataset>", e))?;
    Ok(())
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset, segment_column: Option<&str>) -> Result<()> {
    atomic_write(path.as_ref(), |w| write_dataset_to(w, dataset, segment_column))
}

/// Stratified customer-level split: the same fraction of purchasers and of
/// non-purchasers goes to the training part. Both parts keep the input
/// order.
pub fn split_dataset(dataset: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(DpmError::InvalidConfig(format!(
            "train fraction must lie in [0, 1], got {train_frac}"
        )));
    }
    let mut rng = stream(seed, "split", b"");
    let mut in_train = vec![false; dataset.len()];
    for purchasers in [true, false] {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.customers()[i].is_purchaser() == purchasers)
            .collect();
        idx.shuffle(&mut rng);
        let take = (train_frac * idx.len() as f64).round() as usize;
        for &i in &idx[..take] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (c, keep) in dataset.customers().iter().zip(in_train) {
        if keep {
            train.push(c.clone());
        } else {
            test.push(c.clone());
        }
    }
    Ok((
        Dataset::with_channels(dataset.k(), dataset.l(), train)?,
        Dataset::with_channels(dataset.k(), dataset.l(), test)?,
    ))
}

/// How a set of parameters was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMetadata {
    /// SHA-256 of the canonical JSON of the fitting configuration.
    pub config_digest: String,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub offset_sampling_biased: bool,
    pub warnings: Vec<String>,
}

impl FitMetadata {
    pub fn from_report(config: &SgdConfig, report: &FitReport) -> Result<Self> {
        Ok(FitMetadata {
            config_digest: config_digest(config)?,
            seed: config.seed,
            iterations: report.iterations_run,
            converged: report.converged,
            offset_sampling_biased: report.offset_sampling_biased,
            warnings: report.warnings.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentModel {
    pub segment: Option<String>,
    pub params: ModelParams,
    pub fit: Option<FitMetadata>,
}

/// Saved parameters, one entry per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub k: usize,
    pub l: usize,
    pub models: Vec<SegmentModel>,
}

impl ModelFile {
    pub fn single(params: ModelParams, fit: Option<FitMetadata>) -> Self {
        ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            k: params.k(),
            l: params.l(),
            models: vec![SegmentModel {
                segment: None,
                params,
                fit,
            }],
        }
    }

    /// Parameters for `segment`, falling back to the unsegmented entry.
    pub fn params_for(&self, segment: Option<&str>) -> Option<&ModelParams> {
        self.models
            .iter()
            .find(|m| m.segment.as_deref() == segment)
            .or_else(|| self.models.iter().find(|m| m.segment.is_none()))
            .map(|m| &m.params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(DpmError::InvalidConfig(format!(
                "unsupported model schema version {}",
                self.schema_version
            )));
        }
        if self.models.is_empty() {
            return Err(DpmError::InvalidConfig("model file has no parameter sets".into()));
        }
        let mut keys = HashSet::new();
        for m in &self.models {
            m.params.check_finite()?;
            m.params.check_channels(self.k, self.l)?;
            if !keys.insert(m.segment.clone()) {
                return Err(DpmError::InvalidConfig(format!("duplicate segment {:?}", m.segment)));
            }
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline. Floats use the shortest
    /// representation that parses back to the same value, so a load and
    /// save reproduces the bytes.
    pub fn to_canonical_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.validate()?;
        Ok(file)
    }
}

pub fn save_model(path: impl AsRef<Path>, model: &ModelFile) -> Result<()> {
    model.validate()?;
    let text = model.to_canonical_json()?;
    atomic_write(path.as_ref(), |w| {
        w.write_all(text.as_bytes()).map_err(|e| DpmError::io("<model>", e))
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DpmError::io(path, e))?;
    ModelFile::from_json(&text)
}

/// SHA-256 of the configuration's JSON.
pub fn config_digest(config: &SgdConfig) -> Result<String> {
    Ok(hex_digest(serde_json::to_string(config)?.as_bytes()))
}

/// Reads a JSON config file, rejecting unknown fields.
pub fn load_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DpmError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// `segment,iteration,c,phi,alpha_1..,beta_1..`, one row per iterate.
pub fn write_trajectories(path: impl AsRef<Path>, fits: &[(Option<String>, &FitReport)]) -> Result<()> {
    atomic_write(path.as_ref(), |w| {
        let mut out = csv::Writer::from_writer(w);
        let Some((_, first)) = fits.first() else {
            return Ok(());
        };
        let names = first.final_params.names();
        let mut header = vec!["segment".to_string(), "iteration".to_string()];
        header.extend(names);
        out.write_record(&header)?;
        for (segment, report) in fits {
            for snap in &report.trajectory {
                let mut row = vec![segment.clone().unwrap_or_default(), snap.iteration.to_string()];
                row.extend(snap.params.to_vec().iter().map(f64::to_string));
                out.write_record(&row)?;
            }
        }
        out.flush().map_err(|e| DpmError::io("<trajectory>", e))?;
        Ok(())
    })
}

/// One pooled score with its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    /// Days since the customer's first row.
    pub day: usize,
    pub score: f64,
    pub y: u8,
}

pub fn write_scores(path: impl AsRef<Path>, rows: &[ScoreRow]) -> Result<()> {
    write_serialized(path.as_ref(), rows)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    read_serialized(path.as_ref())
}

pub fn write_roc(path: impl AsRef<Path>, roc: &RocCurve) -> Result<()> {
    write_serialized(path.as_ref(), &roc.points)
}

pub fn write_coefficients(path: impl AsRef<Path>, fit: &GlmFit) -> Result<()> {
    write_serialized(path.as_ref(), &fit.table())
}

pub fn read_coefficients(path: impl AsRef<Path>) -> Result<Vec<Coefficient>> {
    read_serialized(path.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistogramRow {
    channel: String,
    days_before: usize,
    count: u64,
}

/// Long format: `channel,days_before,count`.
pub fn write_histogram(path: impl AsRef<Path>, hist: &LastTouchHistogram) -> Result<()> {
    let mut rows = Vec::new();
    for (prefix, channels) in [("r", &hist.r), ("m", &hist.m)] {
        for (j, bins) in channels.iter().enumerate() {
            for (d, &count) in bins.iter().enumerate() {
                rows.push(HistogramRow {
                    channel: format!("{prefix}.{}", j + 1),
                    days_before: d,
                    count,
                });
            }
        }
    }
    write_serialized(path.as_ref(), &rows)
}

fn write_serialized<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    atomic_write(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for row in rows {
            out.serialize(row)?;
        }
        out.flush().map_err(|e| DpmError::io(path, e))?;
        Ok(())
    })
}

fn read_serialized<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| DpmError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(std::io::BufReader::new(file));
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        rows.push(row.map_err(|e: csv::Error| DpmError::Parse {
            path: path.to_path_buf(),
            row: i + 2,
            id: None,
            reason: e.to_string(),
        })?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        read_dataset(text.as_bytes(), Path::new("test.csv"), &LoadOptions::default())
    }

    #[test]
    fn parses_dates_and_indices() {
        let data = parse(
            "id,time,r.1,m.1,y\n\
             a,2012-12-31,0,1,0\n\
             a,2013-01-01,2,0,1\n\
             b,5,0,0,0\n\
             b,6,0,0,0\n",
        )
        .unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!((data.k(), data.l()), (1, 1));
        let a = &data.customers()[0];
        assert_eq!(a.y(), [0, 1]);
        assert_eq!(a.r(1), [2]);
        assert!(!data.customers()[1].is_purchaser());
    }

    #[test]
    fn rejects_bad_rows_with_location() {
        let cases = [
            ("id,time,r.1,m.1,y\na,0,0,0,2\n", 2, "y = '2'"),
            ("id,time,r.1,m.1,y\na,0,0.5,0,0\n", 2, "not a non-negative integer"),
            ("id,time,r.1,m.1,y\na,0,-1,0,0\n", 2, "not a non-negative integer"),
            ("id,time,r.1,m.1,y\na,0,0,0,1\na,1,0,0,0\n", 3, "after the first purchase"),
            ("id,time,r.1,m.1,y\na,0,0,0,0\na,2,0,0,0\n", 3, "gap of 1 days"),
            ("id,time,r.1,m.1,y\na,1,0,0,0\na,1,0,0,0\n", 3, "not after"),
            ("id,time,r.1,m.1,y\na,0,0,0,0\nb,0,0,0,0\na,1,0,0,0\n", 4, "not contiguous"),
            ("id,time,r.1,m.1,y\na,July 1,0,0,0\n", 2, "neither an integer"),
        ];
        for (text, row, needle) in cases {
            match parse(text) {
                Err(DpmError::Parse { row: r, id, reason, .. }) => {
                    assert_eq!(r, row, "{text}");
                    assert_eq!(id.as_deref(), Some("a"));
                    assert!(reason.contains(needle), "{reason}");
                }
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn header_must_match_exactly() {
        for text in [
            "id,time,r.1,m.1\na,0,0,0\n",
            "id,time,r.2,m.1,y\na,0,0,0,0\n",
            "time,id,r.1,m.1,y\n0,a,0,0,0\n",
            "id,time,m.1,r.1,y\na,0,0,0,0\n",
        ] {
            assert!(matches!(parse(text), Err(DpmError::Parse { row: 1, .. })), "{text}");
        }
    }

    #[test]
    fn empty_inputs_are_empty_datasets() {
        assert!(matches!(parse(""), Err(DpmError::EmptyDataset)));
        assert!(matches!(parse("id,time,r.1,m.1,y\n"), Err(DpmError::EmptyDataset)));
    }

    #[test]
    fn segment_column_is_read() {
        let options = LoadOptions {
            segment_column: Some("region".into()),
        };
        let text = "id,time,r.1,m.1,y,region\na,0,0,0,0,north\nb,0,0,0,0,south\n";
        let data = read_dataset(text.as_bytes(), Path::new("s.csv"), &options).unwrap();
        assert_eq!(data.customers()[1].segment(), Some("south"));
        assert!(parse(text).is_err());
    }

    #[test]
    fn stratified_split_is_exhaustive_and_disjoint() {
        let customers = (0..40)
            .map(|i| {
                let buys = i % 4 == 0;
                CustomerHistory::new(format!("{i}"), vec![vec![0]; 2], vec![vec![0]; 2], vec![0, buys as u8]).unwrap()
            })
            .collect();
        let data = Dataset::new(customers).unwrap();
        let (train, test) = split_dataset(&data, 0.5, 3).unwrap();
        assert_eq!(train.len() + test.len(), 40);
        assert_eq!(train.purchasers(), 5);
        let ids: HashSet<&str> = train.customers().iter().map(|c| c.id()).collect();
        assert!(test.customers().iter().all(|c| !ids.contains(c.id())));
        assert_eq!(split_dataset(&data, 0.5, 3).unwrap(), (train, test));
    }
}
