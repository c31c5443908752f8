//! Tabular binary-classification data with optional environment and group tags.
//!
//! Features are stored column-major since almost every hot path (binning,
//! per-condition coverage) walks one feature at a time.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const LABEL_COLUMN: &str = "y";
pub const ENV_COLUMN: &str = "env";
pub const GROUP_COLUMN: &str = "group_id";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_names: Vec<String>,
    columns: Vec<Vec<f64>>,
    labels: Vec<u8>,
    env: Option<Vec<String>>,
    group_id: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        columns: Vec<Vec<f64>>,
        labels: Vec<u8>,
        env: Option<Vec<String>>,
        group_id: Option<Vec<String>>,
    ) -> Result<Self> {
        if feature_names.len() != columns.len() {
            return Err(Error::InvalidDataset(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                columns.len()
            )));
        }
        let n = labels.len();
        for (name, col) in feature_names.iter().zip(&columns) {
            if col.len() != n {
                return Err(Error::InvalidDataset(format!(
                    "column `{name}` has {} values, expected {n}",
                    col.len()
                )));
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "column `{name}` has a non-finite value at row {i}"
                )));
            }
        }
        if let Some(i) = labels.iter().position(|&y| y > 1) {
            return Err(Error::InvalidDataset(format!("label at row {i} is not 0 or 1")));
        }
        for (what, tags) in [("env", &env), ("group_id", &group_id)] {
            if let Some(t) = tags {
                if t.len() != n {
                    return Err(Error::InvalidDataset(format!(
                        "{what} column has {} values, expected {n}",
                        t.len()
                    )));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for name in &feature_names {
            if [LABEL_COLUMN, ENV_COLUMN, GROUP_COLUMN].contains(&name.as_str()) {
                return Err(Error::InvalidDataset(format!("`{name}` is a reserved column name")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate feature name `{name}`")));
            }
        }
        Ok(Dataset { feature_names, columns, labels, env, group_id })
    }

    /// Builds a dataset from row-major feature vectors, naming columns x1..xs.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<u8>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut columns = vec![Vec::with_capacity(rows.len()); width];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::InvalidDataset(format!("row {i} has {} values, expected {width}", row.len())));
            }
            for (c, v) in columns.iter_mut().zip(row) {
                c.push(*v);
            }
        }
        Dataset::new(default_feature_names(width), columns, labels, None, None)
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn column(&self, feature: usize) -> &[f64] {
        &self.columns[feature]
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.columns[feature][row]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[row]).collect()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn env(&self) -> Option<&[String]> {
        self.env.as_deref()
    }

    pub fn group_id(&self) -> Option<&[String]> {
        self.group_id.as_deref()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn with_env(mut self, env: Vec<String>) -> Result<Self> {
        if env.len() != self.n_samples() {
            return Err(Error::InvalidDataset("env column length mismatch".into()));
        }
        self.env = Some(env);
        Ok(self)
    }

    pub fn with_group_id(mut self, group_id: Vec<String>) -> Result<Self> {
        if group_id.len() != self.n_samples() {
            return Err(Error::InvalidDataset("group_id column length mismatch".into()));
        }
        self.group_id = Some(group_id);
        Ok(self)
    }

    pub fn without_group_id(mut self) -> Self {
        self.group_id = None;
        self
    }

    /// Distinct environment tags in sorted order.
    pub fn env_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.env.iter().flatten().cloned().collect();
        names.sort();
        names.dedup();
        names
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let pick_s = |v: &Vec<String>| indices.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        Dataset {
            feature_names: self.feature_names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| indices.iter().map(|&i| c[i]).collect())
                .collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            env: self.env.as_ref().map(pick_s),
            group_id: self.group_id.as_ref().map(pick_s),
        }
    }

    /// Splits rows by environment tag. Rows keep their relative order.
    pub fn split_by_env(&self) -> Result<BTreeMap<String, Dataset>> {
        let env = self
            .env
            .as_ref()
            .ok_or_else(|| Error::InvalidDataset("dataset has no env column".into()))?;
        let mut rows: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in env.iter().enumerate() {
            rows.entry(e.clone()).or_default().push(i);
        }
        Ok(rows.into_iter().map(|(e, idx)| (e, self.subset(&idx))).collect())
    }

    /// Stacks datasets sharing one feature layout. Tag columns survive only if
    /// every part carries them.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidDataset("cannot concatenate zero datasets".into()))?;
        let mut out = Dataset {
            feature_names: first.feature_names.clone(),
            columns: vec![Vec::new(); first.n_features()],
            labels: Vec::new(),
            env: parts.iter().all(|d| d.env.is_some()).then(Vec::new),
            group_id: parts.iter().all(|d| d.group_id.is_some()).then(Vec::new),
        };
        for d in parts {
            if d.feature_names != first.feature_names {
                return Err(Error::InvalidDataset("feature layouts differ".into()));
            }
            for (dst, src) in out.columns.iter_mut().zip(&d.columns) {
                dst.extend_from_slice(src);
            }
            out.labels.extend_from_slice(&d.labels);
            if let (Some(dst), Some(src)) = (out.env.as_mut(), d.env.as_ref()) {
                dst.extend_from_slice(src);
            }
            if let (Some(dst), Some(src)) = (out.group_id.as_mut(), d.group_id.as_ref()) {
                dst.extend_from_slice(src);
            }
        }
        Ok(out)
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Dataset::read_csv(file)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut label_col = None;
        let mut env_col = None;
        let mut group_col = None;
        let mut feature_cols = Vec::new();
        for (i, h) in headers.iter().enumerate() {
            match h.trim() {
                LABEL_COLUMN => label_col = Some(i),
                ENV_COLUMN => env_col = Some(i),
                GROUP_COLUMN => group_col = Some(i),
                _ => feature_cols.push(i),
            }
        }
        let label_col =
            label_col.ok_or_else(|| Error::InvalidDataset("CSV has no `y` column".into()))?;
        let names: Vec<String> = feature_cols.iter().map(|&i| headers[i].trim().to_string()).collect();
        let mut columns = vec![Vec::new(); feature_cols.len()];
        let mut labels = Vec::new();
        let mut env = env_col.map(|_| Vec::new());
        let mut group = group_col.map(|_| Vec::new());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim();
            for (col, &i) in columns.iter_mut().zip(&feature_cols) {
                let v: f64 = field(i).parse().map_err(|_| {
                    Error::InvalidDataset(format!(
                        "row {}: `{}` is not a number in column `{}`",
                        line + 1,
                        field(i),
                        &headers[i]
                    ))
                })?;
                col.push(v);
            }
            let y: f64 = field(label_col).parse().map_err(|_| {
                Error::InvalidDataset(format!("row {}: bad label `{}`", line + 1, field(label_col)))
            })?;
            if y != 0.0 && y != 1.0 {
                return Err(Error::InvalidDataset(format!("row {}: label {y} is not 0 or 1", line + 1)));
            }
            labels.push(y as u8);
            if let (Some(v), Some(i)) = (env.as_mut(), env_col) {
                v.push(field(i).to_string());
            }
            if let (Some(v), Some(i)) = (group.as_mut(), group_col) {
                v.push(field(i).to_string());
            }
        }
        Dataset::new(names, columns, labels, env, group)
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Writes the header then one row per sample; floats use the shortest
    /// representation that round-trips, so output is byte-stable.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(LABEL_COLUMN);
        if self.env.is_some() {
            header.push(ENV_COLUMN);
        }
        if self.group_id.is_some() {
            header.push(GROUP_COLUMN);
        }
        wtr.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n_samples() {
            record.clear();
            record.extend(self.columns.iter().map(|c| c[i].to_string()));
            record.push(self.labels[i].to_string());
            if let Some(e) = &self.env {
                record.push(e[i].clone());
            }
            if let Some(g) = &self.group_id {
                record.push(g[i].clone());
            }
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn default_feature_names(width: usize) -> Vec<String> {
    (1..=width).map(|i| format!("x{i}")).collect()
}
