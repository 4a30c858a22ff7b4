//! Output files: atomic writes, CSV writers and the matching readers.
//!
//! CSVs are UTF-8, comma-separated, LF-terminated, with a header row.
//! Floats use 17 significant digits so values survive a round trip exactly.

use std::io::Write;
use std::path::{Path, PathBuf};

use ibed_core::{DimSummary, Network, TraceRecord, ValidationScore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const TRACE_FILE: &str = "trace.csv";
pub const DESIGN_FILE: &str = "design.csv";
pub const NETWORK_FILE: &str = "network.json";
pub const PROBES_FILE: &str = "probes.csv";
pub const GP_SUMMARY_FILE: &str = "gp_summary.json";
pub const SAMPLES_FILE: &str = "posterior_samples.csv";
pub const SUMMARY_FILE: &str = "posterior_summary.csv";
pub const WEIGHTS_FILE: &str = "posterior_weights.csv";
pub const REFERENCE_FILE: &str = "reference_mi.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const GRID_FILE: &str = "grid_results.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f(field: &str, path: &Path) -> Result<f64, CliError> {
    field.trim().parse().map_err(|_| malformed(path, format!("`{field}` is not a number")))
}

fn malformed(path: &Path, detail: impl Into<String>) -> CliError {
    CliError::MissingInput {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Header plus string rows, serialised with the `csv` crate.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| malformed(path, e.to_string()))?;
        let header = r
            .headers()
            .map_err(|e| malformed(path, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .map(|rec| {
                rec.map(|rec| rec.iter().map(str::to_string).collect())
                    .map_err(|e| malformed(path, e.to_string()))
            })
            .collect::<Result<Vec<Vec<String>>, CliError>>()?;
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str, path: &Path) -> Result<usize, CliError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| malformed(path, format!("missing column `{name}`")))
    }

    /// Indices of the columns `{prefix}0`, `{prefix}1`, … in order.
    fn indexed_columns(&self, prefix: &str) -> Vec<usize> {
        (0..)
            .map_while(|i| self.header.iter().position(|h| *h == format!("{prefix}{i}")))
            .collect()
    }
}

fn indexed_header(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub bytes: u64,
    /// Content hash; identical runs produce identical hashes.
    pub sha256: String,
}

/// Writes files into one directory and records what was written.
#[derive(Debug)]
pub struct OutputWriter {
    dir: PathBuf,
    files: Vec<FileRecord>,
}

impl OutputWriter {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Temp file in the target directory, then rename over the final name.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        tmp.write_all(bytes).map_err(|e| CliError::io(tmp.path(), e))?;
        tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
        tmp.persist(&path).map_err(|e| CliError::io(&path, e.error))?;
        self.files.push(FileRecord {
            name: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: format!("{:x}", Sha256::digest(bytes)),
        });
        Ok(path)
    }

    pub fn write_table(&mut self, name: &str, table: &Table) -> Result<PathBuf, CliError> {
        self.write(name, &table.to_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("serialisable output");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn files(&self) -> &[FileRecord] {
        &self.files
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub threads: usize,
    pub config: ExperimentConfig,
    pub files: Vec<FileRecord>,
    pub duration_secs: f64,
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    read_json(path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| malformed(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| malformed(path, e.to_string()))
}

pub fn trace_table(trace: &[TraceRecord], dim: usize) -> Table {
    let mut t = Table::new(["epoch", "mi_raw", "mi_smoothed"].map(String::from).into_iter().chain(indexed_header("d_", dim)));
    for r in trace {
        let mut row = vec![r.epoch.to_string(), fmt_f(r.mi_raw), fmt_f(r.mi_smoothed)];
        row.extend(r.design.iter().map(|&d| fmt_f(d)));
        t.push(row);
    }
    t
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, CliError> {
    let t = Table::read(path)?;
    let (e, raw, smooth) = (t.column("epoch", path)?, t.column("mi_raw", path)?, t.column("mi_smoothed", path)?);
    let design = t.indexed_columns("d_");
    t.rows
        .iter()
        .map(|row| {
            Ok(TraceRecord {
                epoch: row[e].parse().map_err(|_| malformed(path, format!("bad epoch `{}`", row[e])))?,
                mi_raw: parse_f(&row[raw], path)?,
                mi_smoothed: parse_f(&row[smooth], path)?,
                design: design.iter().map(|&c| parse_f(&row[c], path)).collect::<Result<_, _>>()?,
            })
        })
        .collect()
}

pub fn design_table(design: &[f64]) -> Table {
    let mut t = Table::new(indexed_header("d_", design.len()));
    t.push(design.iter().map(|&d| fmt_f(d)).collect());
    t
}

pub fn read_design(path: &Path) -> Result<Vec<f64>, CliError> {
    let t = Table::read(path)?;
    let cols = t.indexed_columns("d_");
    match t.rows.as_slice() {
        [row] if !cols.is_empty() => cols.iter().map(|&c| parse_f(&row[c], path)).collect(),
        _ => Err(malformed(path, "a design file holds exactly one row of d_i columns")),
    }
}

pub fn read_network(path: &Path) -> Result<Network, CliError> {
    read_json(path)
}

pub fn samples_table(samples: &[Vec<f64>], dim: usize) -> Table {
    let mut t = Table::new(indexed_header("theta_", dim));
    for s in samples {
        t.push(s.iter().map(|&x| fmt_f(x)).collect());
    }
    t
}

pub fn read_samples(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let t = Table::read(path)?;
    let cols = t.indexed_columns("theta_");
    t.rows
        .iter()
        .map(|row| cols.iter().map(|&c| parse_f(&row[c], path)).collect())
        .collect()
}

/// Prior draws with their critic values and normalised weights.
pub fn weights_table(samples: &[Vec<f64>], critic: &[f64], weights: &[f64]) -> Table {
    let dim = samples.first().map_or(0, Vec::len);
    let mut t = Table::new(
        indexed_header("theta_", dim).chain(["critic".to_string(), "weight".to_string()]),
    );
    for ((s, &c), &w) in samples.iter().zip(critic).zip(weights) {
        let mut row: Vec<String> = s.iter().map(|&x| fmt_f(x)).collect();
        row.push(fmt_f(c));
        row.push(fmt_f(w));
        t.push(row);
    }
    t
}

/// Normalised weights column of a weights file.
pub fn read_weights(path: &Path) -> Result<Vec<f64>, CliError> {
    let t = Table::read(path)?;
    let c = t.column("weight", path)?;
    t.rows.iter().map(|row| parse_f(&row[c], path)).collect()
}

pub fn summary_table(summary: &[DimSummary]) -> Table {
    let mut t = Table::new(["dim", "mean", "std", "lower_16", "upper_84"]);
    for (i, s) in summary.iter().enumerate() {
        t.push(vec![format!("theta_{i}"), fmt_f(s.mean), fmt_f(s.std), fmt_f(s.lower), fmt_f(s.upper)]);
    }
    t
}

pub fn read_summary(path: &Path) -> Result<Vec<DimSummary>, CliError> {
    let t = Table::read(path)?;
    let cols = ["mean", "std", "lower_16", "upper_84"]
        .iter()
        .map(|n| t.column(n, path))
        .collect::<Result<Vec<_>, _>>()?;
    t.rows
        .iter()
        .map(|row| {
            Ok(DimSummary {
                mean: parse_f(&row[cols[0]], path)?,
                std: parse_f(&row[cols[1]], path)?,
                lower: parse_f(&row[cols[2]], path)?,
                upper: parse_f(&row[cols[3]], path)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub value: f64,
    pub std_error: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    /// Closed-form value where one exists.
    pub analytic: Option<f64>,
    pub design: Vec<f64>,
}

pub fn reference_table(r: &ReferenceRow) -> Table {
    let mut t = Table::new(
        ["value", "std_error", "n_outer", "n_inner", "analytic"]
            .map(String::from)
            .into_iter()
            .chain(indexed_header("d_", r.design.len())),
    );
    let mut row = vec![
        fmt_f(r.value),
        fmt_f(r.std_error),
        r.n_outer.to_string(),
        r.n_inner.to_string(),
        r.analytic.map(fmt_f).unwrap_or_default(),
    ];
    row.extend(r.design.iter().map(|&d| fmt_f(d)));
    t.push(row);
    t
}

pub fn read_reference(path: &Path) -> Result<ReferenceRow, CliError> {
    let t = Table::read(path)?;
    let row = t.rows.first().ok_or_else(|| malformed(path, "empty reference file"))?;
    let get = |n: &str| t.column(n, path).map(|c| row[c].as_str());
    let count = |s: &str| s.parse().map_err(|_| malformed(path, format!("bad count `{s}`")));
    let analytic = get("analytic")?;
    Ok(ReferenceRow {
        value: parse_f(get("value")?, path)?,
        std_error: parse_f(get("std_error")?, path)?,
        n_outer: count(get("n_outer")?)?,
        n_inner: count(get("n_inner")?)?,
        analytic: if analytic.is_empty() { None } else { Some(parse_f(analytic, path)?) },
        design: t.indexed_columns("d_").iter().map(|&c| parse_f(&row[c], path)).collect::<Result<_, _>>()?,
    })
}

pub fn validation_table(score: &ValidationScore, set_size: usize) -> Table {
    let mut t = Table::new(["mean", "std", "n_sets", "set_size"]);
    t.push(vec![fmt_f(score.mean), fmt_f(score.std), score.n_sets.to_string(), set_size.to_string()]);
    t
}

pub fn read_validation(path: &Path) -> Result<ValidationScore, CliError> {
    let t = Table::read(path)?;
    let row = t.rows.first().ok_or_else(|| malformed(path, "empty validation file"))?;
    let n_sets: usize = row[t.column("n_sets", path)?]
        .parse()
        .map_err(|_| malformed(path, "bad n_sets"))?;
    Ok(ValidationScore {
        mean: parse_f(&row[t.column("mean", path)?], path)?,
        std: parse_f(&row[t.column("std", path)?], path)?,
        n_sets,
        single_set: n_sets == 1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub probe: usize,
    pub initial: bool,
    pub value: Option<f64>,
    pub best_so_far: f64,
    pub error: String,
    pub design: Vec<f64>,
}

pub fn probes_table(rows: &[ProbeRow], dim: usize) -> Table {
    let mut t = Table::new(
        ["probe", "initial", "value", "best_so_far", "error"]
            .map(String::from)
            .into_iter()
            .chain(indexed_header("d_", dim)),
    );
    for r in rows {
        let mut row = vec![
            r.probe.to_string(),
            r.initial.to_string(),
            r.value.map(fmt_f).unwrap_or_default(),
            fmt_f(r.best_so_far),
            r.error.clone(),
        ];
        row.extend(r.design.iter().map(|&d| fmt_f(d)));
        t.push(row);
    }
    t
}

pub fn read_probes(path: &Path) -> Result<Vec<ProbeRow>, CliError> {
    let t = Table::read(path)?;
    let cols = ["probe", "initial", "value", "best_so_far", "error"]
        .iter()
        .map(|n| t.column(n, path))
        .collect::<Result<Vec<_>, _>>()?;
    let design = t.indexed_columns("d_");
    t.rows
        .iter()
        .map(|row| {
            let value = &row[cols[2]];
            Ok(ProbeRow {
                probe: row[cols[0]].parse().map_err(|_| malformed(path, "bad probe index"))?,
                initial: row[cols[1]].parse().map_err(|_| malformed(path, "bad initial flag"))?,
                value: if value.is_empty() { None } else { Some(parse_f(value, path)?) },
                best_so_far: parse_f(&row[cols[3]], path)?,
                error: row[cols[4]].clone(),
                design: design.iter().map(|&c| parse_f(&row[c], path)).collect::<Result<_, _>>()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSummary {
    pub signal_var: f64,
    pub lengthscale: f64,
    pub noise_var: f64,
    pub jitter: f64,
    pub prior_mean: f64,
    pub log_marginal_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub rank: usize,
    pub candidate: usize,
    pub hidden: Vec<usize>,
    pub lr_psi: f64,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub error: String,
}

pub fn grid_table(rows: &[GridRow]) -> Table {
    let mut t = Table::new(["rank", "candidate", "hidden", "lr_psi", "mean", "std", "error"]);
    for r in rows {
        t.push(vec![
            r.rank.to_string(),
            r.candidate.to_string(),
            r.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join("x"),
            fmt_f(r.lr_psi),
            r.mean.map(fmt_f).unwrap_or_default(),
            r.std.map(fmt_f).unwrap_or_default(),
            r.error.clone(),
        ]);
    }
    t
}

pub fn read_grid(path: &Path) -> Result<Vec<GridRow>, CliError> {
    let t = Table::read(path)?;
    let cols = ["rank", "candidate", "hidden", "lr_psi", "mean", "std", "error"]
        .iter()
        .map(|n| t.column(n, path))
        .collect::<Result<Vec<_>, _>>()?;
    let opt = |s: &str| if s.is_empty() { Ok(None) } else { parse_f(s, path).map(Some) };
    let count = |s: &str| s.parse::<usize>().map_err(|_| malformed(path, format!("bad count `{s}`")));
    t.rows
        .iter()
        .map(|row| {
            Ok(GridRow {
                rank: count(&row[cols[0]])?,
                candidate: count(&row[cols[1]])?,
                hidden: row[cols[2]].split('x').map(count).collect::<Result<_, _>>()?,
                lr_psi: parse_f(&row[cols[3]], path)?,
                mean: opt(&row[cols[4]])?,
                std: opt(&row[cols[5]])?,
                error: row[cols[6]].clone(),
            })
        })
        .collect()
}
