//! Series and edge-list CSV files.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use earth_core::data::{EpidemicDataset, Splits};
use earth_core::tensor::Tensor;

use crate::error::{Error, Result};

/// Region names with their N×L series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub region_names: Vec<String>,
    pub series: Tensor,
}

/// Nonblank, non-comment records with their 1-based physical line numbers.
fn records(path: &Path) -> Result<Vec<(u64, csv::StringRecord)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(line.as_bytes());
        let mut rec = csv::StringRecord::new();
        match reader.read_record(&mut rec) {
            Ok(true) => out.push((line_no, rec)),
            Ok(false) => {}
            Err(e) => return Err(Error::format(path, line_no, e.to_string())),
        }
    }
    Ok(out)
}

/// Header row of region names, then one row of nonnegative counts per step.
pub fn read_series(path: &Path) -> Result<SeriesTable> {
    let rows = records(path)?;
    let Some((header_line, header)) = rows.first() else {
        return Err(Error::format(path, 1, "empty file, expected a header of region names"));
    };
    let names: Vec<String> = header.iter().map(str::to_owned).collect();
    if names.iter().all(|n| n.parse::<f64>().is_ok()) {
        return Err(Error::format(path, *header_line, "missing header row of region names"));
    }
    let mut seen = HashMap::new();
    for (i, name) in names.iter().enumerate() {
        if name.is_empty() {
            return Err(Error::format(path, *header_line, format!("column {} has an empty name", i + 1)));
        }
        if seen.insert(name.as_str(), i).is_some() {
            return Err(Error::format(path, *header_line, format!("duplicate region name `{name}`")));
        }
    }
    let n = names.len();
    let len = rows.len() - 1;
    if len == 0 {
        return Err(Error::format(path, *header_line, "no data rows"));
    }
    // Read row-major (time × region), store region-major.
    let mut data = vec![0.0; n * len];
    for (t, (line, rec)) in rows[1..].iter().enumerate() {
        if rec.len() != n {
            return Err(Error::format(path, *line, format!("expected {n} fields, found {}", rec.len())));
        }
        for (v, field) in rec.iter().enumerate() {
            let x: f64 = field
                .parse()
                .map_err(|_| Error::format(path, *line, format!("`{field}` is not a number")))?;
            if !x.is_finite() || x < 0.0 {
                return Err(Error::format(
                    path,
                    *line,
                    format!("count for `{}` must be finite and nonnegative, found {field}", names[v]),
                ));
            }
            data[v * len + t] = x;
        }
    }
    Ok(SeriesTable {
        region_names: names,
        series: Tensor::matrix(n, len, data)?,
    })
}

/// Undirected `src,dst` edge list over `region_names`; an optional
/// `src,dst` header is skipped and repeated edges collapse.
pub fn read_adjacency(path: &Path, region_names: &[String]) -> Result<Tensor> {
    let index: HashMap<&str, usize> = region_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let n = region_names.len();
    let mut adj = Tensor::zeros(&[n, n]);
    for (k, (line, rec)) in records(path)?.into_iter().enumerate() {
        if k == 0 && rec.len() == 2 && &rec[0] == "src" && &rec[1] == "dst" {
            continue;
        }
        if rec.len() != 2 {
            return Err(Error::format(path, line, format!("expected `src,dst`, found {} fields", rec.len())));
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::format(path, line, format!("unknown region `{name}`")))
        };
        let (u, v) = (lookup(&rec[0])?, lookup(&rec[1])?);
        if u == v {
            return Err(Error::format(path, line, format!("self-loop on `{}`", &rec[0])));
        }
        adj.set(u, v, 1.0);
        adj.set(v, u, 1.0);
    }
    Ok(adj)
}

/// Loads both files and splits chronologically.
pub fn load_dataset(series_path: &Path, adjacency_path: &Path, train_frac: f64, val_frac: f64) -> Result<EpidemicDataset> {
    let table = read_series(series_path)?;
    let adjacency = read_adjacency(adjacency_path, &table.region_names)?;
    let splits = Splits::chronological(table.series.cols(), train_frac, val_frac)?;
    Ok(EpidemicDataset::new(table.region_names, table.series, adjacency, splits)?)
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    Ok(std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes rows of values under a header; `rows[t][v]`.
pub fn write_rows(path: &Path, region_names: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", region_names.join(",")).map_err(io)?;
    for row in rows {
        let fields: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(w, "{}", fields.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes an N×L series; values round-trip exactly.
pub fn write_series(path: &Path, region_names: &[String], series: &Tensor) -> Result<()> {
    let (n, len) = (series.rows(), series.cols());
    write_rows(path, region_names, (0..len).map(|t| (0..n).map(|v| series.get(v, t)).collect()))
}

/// Writes each undirected edge once, as `u,v` with `u` before `v`.
pub fn write_adjacency(path: &Path, region_names: &[String], adjacency: &Tensor) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "src,dst").map_err(io)?;
    let n = region_names.len();
    for u in 0..n {
        for v in u + 1..n {
            if adjacency.get(u, v) != 0.0 {
                writeln!(w, "{},{}", region_names[u], region_names[v]).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}
