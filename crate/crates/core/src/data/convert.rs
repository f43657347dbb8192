use std::path::{Path, PathBuf};

use super::{Dataset, DatasetMeta, Domain, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::Float;

/// Settings for ingesting a directory of per-sample CSV files.
///
/// The index CSV has a header row and the columns `file,label`. `file` is a
/// path relative to the index file; `label` is a class index or empty for an
/// unlabelled sample. Each sample file holds one row per time step and one
/// column per channel.
#[derive(Debug, Clone)]
pub struct CsvImport {
    pub index: PathBuf,
    /// Defaults to one more than the largest label seen.
    pub num_classes: Option<usize>,
    pub domain: Domain,
    /// Whether sample files start with a header row.
    pub sample_headers: bool,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::FormatError(format!("{}: {e}", path.display()))
}

fn read_series(path: &Path, headers: bool) -> Result<(Vec<Float>, usize, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(headers)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::MetaMismatch(format!(
                    "{}: row {rows} has {} channels, expected {w}",
                    path.display(),
                    record.len()
                )))
            }
            _ => {}
        }
        for field in &record {
            let v: Float = field
                .parse()
                .map_err(|_| Error::FormatError(format!("{}: not a number: {field:?}", path.display())))?;
            values.push(v);
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::FormatError(format!("{}: no rows", path.display())))?;
    Ok((values, rows, width))
}

/// Reads every sample listed in the index into a validated [`Dataset`].
pub fn convert_csv(import: &CsvImport) -> Result<Dataset> {
    let base = import.index.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&import.index)
        .map_err(|e| csv_err(&import.index, e))?;
    let mut samples = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(&import.index, e))?;
        let file = record
            .get(0)
            .ok_or_else(|| Error::FormatError("index row without a file column".into()))?;
        let label = match record.get(1).unwrap_or("") {
            "" => None,
            s => Some(
                s.parse::<usize>()
                    .map_err(|_| Error::FormatError(format!("label {s:?} is not a class index")))?,
            ),
        };
        let (values, t, d) = read_series(&base.join(file), import.sample_headers)?;
        match shape {
            None => shape = Some((t, d)),
            Some(s) if s != (t, d) => {
                return Err(Error::MetaMismatch(format!(
                    "{file} is {t}×{d}, earlier samples are {}×{}",
                    s.0, s.1
                )))
            }
            _ => {}
        }
        samples.push(TimeSeriesSample {
            values,
            label,
            domain: import.domain,
        });
    }
    let (t, d) = shape.ok_or(Error::EmptyDataset)?;
    let seen = samples.iter().filter_map(|s| s.label).max().map_or(1, |m| m + 1);
    let classes = import.num_classes.unwrap_or(seen);
    Dataset::new(DatasetMeta::new(t, d, classes, import.domain), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn reads_index_and_samples() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "1,2\n3,4\n5,6\n").unwrap();
        fs::write(dir.path().join("b.csv"), "0,0\n0,1\n1,0\n").unwrap();
        fs::write(dir.path().join("index.csv"), "file,label\na.csv,2\nb.csv,\n").unwrap();
        let ds = convert_csv(&CsvImport {
            index: dir.path().join("index.csv"),
            num_classes: None,
            domain: Domain::Target,
            sample_headers: false,
        })
        .unwrap();
        assert_eq!((ds.meta.seq_len, ds.meta.channels, ds.meta.num_classes), (3, 2, 3));
        assert_eq!(ds.samples[0].values, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(ds.samples[0].label, Some(2));
        assert_eq!(ds.samples[1].label, None);
    }

    #[test]
    fn ragged_channels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "1,2,3\n3,4\n").unwrap();
        fs::write(dir.path().join("index.csv"), "file,label\na.csv,0\n").unwrap();
        let r = convert_csv(&CsvImport {
            index: dir.path().join("index.csv"),
            num_classes: Some(2),
            domain: Domain::Source,
            sample_headers: false,
        });
        assert!(matches!(r, Err(Error::MetaMismatch(_))));
    }
}
