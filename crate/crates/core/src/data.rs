//! Tabular binary-classification datasets, standardization and shifts.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Auxiliary per-row column kept out of the feature matrix (e.g. a year).
#[derive(Debug, Clone, PartialEq)]
pub struct MetaColumn {
    pub name: String,
    pub values: Vec<f64>,
}

/// `n × d` features with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<u8>,
    feature_names: Vec<String>,
    meta: Option<MetaColumn>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<u8>,
        feature_names: Vec<String>,
        meta: Option<MetaColumn>,
    ) -> Result<Self> {
        let n = labels.len();
        let d = feature_names.len();
        if n == 0 {
            return Err(Error::Argument("dataset has no rows".into()));
        }
        if d == 0 {
            return Err(Error::Argument("dataset has no feature columns".into()));
        }
        if features.len() != n * d {
            return Err(Error::Shape(format!(
                "{} feature values for {n} rows of {d} columns",
                features.len()
            )));
        }
        if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite feature at row {}, column `{}`",
                bad / d + 1,
                feature_names[bad % d]
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Domain(format!("label {y} is not binary")));
        }
        if let Some(m) = &meta {
            if m.values.len() != n {
                return Err(Error::Shape(format!(
                    "meta column `{}` has {} values for {n} rows",
                    m.name,
                    m.values.len()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            feature_names,
            meta,
        })
    }

    /// Dataset with generated feature names `x0, x1, …`.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<u8>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        let names = (0..d).map(|i| format!("x{i}")).collect();
        Self::new(rows.concat(), labels, names, None)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.d())
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn meta(&self) -> Option<&MetaColumn> {
        self.meta.as_ref()
    }

    /// Per-feature arithmetic mean.
    pub fn feature_means(&self) -> Vec<f64> {
        let d = self.d();
        let mut m = vec![0.0; d];
        for r in self.rows() {
            for (a, v) in m.iter_mut().zip(r) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n() as f64);
        m
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(idx.len() * self.d());
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        let meta = self.meta.as_ref().map(|m| MetaColumn {
            name: m.name.clone(),
            values: idx.iter().map(|&i| m.values[i]).collect(),
        });
        Self::new(
            features,
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.feature_names.clone(),
            meta,
        )
    }

    /// Same rows with replaced features.
    fn with_features(&self, features: Vec<f64>) -> Result<Self> {
        Self::new(
            features,
            self.labels.clone(),
            self.feature_names.clone(),
            self.meta.clone(),
        )
    }

    /// Seeded split into `(train, test)`; the test part holds
    /// `round(n · test_fraction)` rows, at least one row stays on each side.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) || self.n() < 2 {
            return Err(Error::Argument(format!(
                "cannot split {} rows with test fraction {test_fraction}",
                self.n()
            )));
        }
        let mut idx: Vec<usize> = (0..self.n()).collect();
        idx.shuffle(&mut rng_from_seed(derive_seed(seed, "split", 0)));
        let n_test = ((self.n() as f64 * test_fraction).round() as usize).clamp(1, self.n() - 1);
        let (test_idx, train_idx) = idx.split_at(n_test);
        Ok((self.select(train_idx)?, self.select(test_idx)?))
    }

    /// Parse a CSV with a header row. Every column other than the label and
    /// the optional meta column is a numeric feature.
    pub fn load_csv(
        path: impl AsRef<Path>,
        label_column: &str,
        meta_column: Option<&str>,
    ) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_csv(file, label_column, meta_column).map_err(|e| match e {
            Error::Csv { source, .. } => Error::Csv {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    pub fn read_csv(
        reader: impl Read,
        label_column: &str,
        meta_column: Option<&str>,
    ) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: "<reader>".into(),
            source,
        };
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(name.to_string()))
        };
        let label_idx = find(label_column)?;
        let meta_idx = meta_column.map(find).transpose()?;
        let feature_idx: Vec<usize> = (0..headers.len())
            .filter(|&i| i != label_idx && Some(i) != meta_idx)
            .collect();

        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut meta = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let row = r + 1;
            let num = |i: usize| -> Result<f64> {
                let cell = rec.get(i).unwrap_or("").trim();
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        row,
                        column: headers[i].clone(),
                        value: cell.to_string(),
                    })
            };
            for &i in &feature_idx {
                features.push(num(i)?);
            }
            let y = num(label_idx)?;
            labels.push(if y == 0.0 {
                0
            } else if y == 1.0 {
                1
            } else {
                return Err(Error::Domain(format!(
                    "label `{label_column}` at row {row} is {y}, expected 0 or 1"
                )));
            });
            if let Some(mi) = meta_idx {
                meta.push(num(mi)?);
            }
        }
        let meta = meta_column.map(|name| MetaColumn {
            name: name.to_string(),
            values: meta,
        });
        Self::new(
            features,
            labels,
            feature_idx.iter().map(|&i| headers[i].clone()).collect(),
            meta,
        )
    }

    /// Write features, then `label_column`, then the meta column if any.
    /// Values use the shortest decimal that parses back to the same double.
    pub fn write_csv(&self, writer: impl Write, label_column: &str) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: "<writer>".into(),
            source,
        };
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(label_column);
        if let Some(m) = &self.meta {
            header.push(&m.name);
        }
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            if let Some(m) = &self.meta {
                rec.push(format!("{:?}", m.values[i]));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file), label_column)
    }
}

/// Per-feature centering and scaling learned from a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for constant columns.
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Self {
        let mean = train.feature_means();
        let n = train.n() as f64;
        let mut var = vec![0.0; train.d()];
        for r in train.rows() {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn check(&self, ds: &Dataset) -> Result<()> {
        if ds.d() != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer has {} features, dataset has {}",
                self.mean.len(),
                ds.d()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        self.check(ds)?;
        let d = ds.d();
        let f = ds
            .features()
            .iter()
            .enumerate()
            .map(|(k, x)| (x - self.mean[k % d]) / self.scale[k % d])
            .collect();
        ds.with_features(f)
    }

    pub fn inverse_apply(&self, ds: &Dataset) -> Result<Dataset> {
        self.check(ds)?;
        let d = ds.d();
        let f = ds
            .features()
            .iter()
            .enumerate()
            .map(|(k, z)| z * self.scale[k % d] + self.mean[k % d])
            .collect();
        ds.with_features(f)
    }
}

/// Add i.i.d. `N(0, σ²)` noise to every feature; labels and meta unchanged.
pub fn gaussian_shift(ds: &Dataset, sigma: f64, seed: u64) -> Result<Dataset> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(ds.clone());
    }
    let mut rng = rng_from_seed(seed);
    let f = ds
        .features()
        .iter()
        .map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ds.with_features(f)
}

/// `(original, shifted)`: rows whose meta value is below `threshold`, and the
/// full dataset.
pub fn temporal_split(ds: &Dataset, threshold: f64) -> Result<(Dataset, Dataset)> {
    let meta = ds
        .meta()
        .ok_or_else(|| Error::Schema("<meta column for temporal split>".into()))?;
    let idx: Vec<usize> = (0..ds.n()).filter(|&i| meta.values[i] < threshold).collect();
    if idx.is_empty() {
        return Err(Error::Domain(format!(
            "no rows of `{}` fall below {threshold}",
            meta.name
        )));
    }
    Ok((ds.select(&idx)?, ds.clone()))
}

/// Two Gaussian classes `N(±separation·𝟙/√d, I)`. Exactly
/// `round(n · label_balance)` rows are positive (clamped so both classes
/// appear), in seeded random order.
pub fn synth_two_gaussians(
    n: usize,
    d: usize,
    separation: f64,
    label_balance: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < 2 || d < 1 {
        return Err(Error::Argument(format!("need n >= 2 and d >= 1, got n={n}, d={d}")));
    }
    if !(0.0..=1.0).contains(&label_balance) {
        return Err(Error::Argument(format!(
            "label balance must lie in [0, 1], got {label_balance}"
        )));
    }
    let n_pos = ((n as f64 * label_balance).round() as usize).clamp(1, n - 1);
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng_from_seed(derive_seed(seed, "labels", 0)));
    let mut rng = rng_from_seed(derive_seed(seed, "features", 0));
    let offset = separation / (d as f64).sqrt();
    let mut features = Vec::with_capacity(n * d);
    for &y in &labels {
        let mu = if y == 1 { offset } else { -offset };
        for _ in 0..d {
            features.push(mu + rng.sample::<f64, _>(StandardNormal));
        }
    }
    let names = (0..d).map(|i| format!("x{i}")).collect();
    Dataset::new(features, labels, names, None)
}
