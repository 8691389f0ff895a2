//! Datasets: synthetic 2-D generators, delimited-file ingestion for
//! tabular/embedding data, standardization, and labeled/unlabeled split
//! management.
//!
//! Labels are dense integers 0..C-1 with -1 marking an unlabeled row; files
//! use an empty label field for the same purpose. Standardization statistics
//! are fitted on train rows only and recorded on the dataset.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-feature affine transform fitted on train rows.
#[derive(Clone, Debug)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Applies the stored transform to a raw feature matrix.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.mean.len() {
            return Err(Error::shape(format!(
                "{} features, standardization has {}",
                x.cols,
                self.mean.len()
            )));
        }
        let mut out = x.clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Matrix,
    /// Dense labels, -1 for unlabeled.
    pub y: Vec<i64>,
    pub n_classes: usize,
    pub split: Vec<Split>,
    pub standardization: Option<Standardization>,
    /// Original label strings in dense-index order ("0", "1", ... for
    /// generated data).
    pub label_names: Vec<String>,
}

impl Dataset {
    fn from_parts(x: Matrix, y: Vec<i64>, n_classes: usize, label_names: Vec<String>) -> Self {
        let n = x.rows;
        Dataset {
            x,
            y,
            n_classes,
            split: vec![Split::Train; n],
            standardization: None,
            label_names,
        }
    }

    pub fn n(&self) -> usize {
        self.x.rows
    }

    pub fn dim(&self) -> usize {
        self.x.cols
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn labeled_train(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.split[i] == Split::Train && self.y[i] >= 0)
            .collect()
    }

    pub fn unlabeled_train(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.split[i] == Split::Train && self.y[i] < 0)
            .collect()
    }

    /// Rows with the given indices, as (features, labels).
    pub fn rows(&self, idx: &[usize]) -> (Matrix, Vec<i64>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.y[i]).collect())
    }

    /// New dataset containing only the selected rows (split tags kept).
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            n_classes: self.n_classes,
            split: idx.iter().map(|&i| self.split[i]).collect(),
            standardization: self.standardization.clone(),
            label_names: self.label_names.clone(),
        }
    }

    /// Tags `n_test` rows as test and `n_val` as validation, stratified:
    /// classes (and the unlabeled stratum) are drained round-robin after a
    /// seeded shuffle, so per-class counts stay balanced within 1.
    pub fn assign_splits(&mut self, n_val: usize, n_test: usize, seed: u64) -> Result<()> {
        if n_val + n_test > self.n() {
            return Err(Error::invalid(format!(
                "cannot reserve {} validation and {} test rows from {} total",
                n_val,
                n_test,
                self.n()
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // Strata: one per class plus one for unlabeled rows.
        let mut strata: Vec<Vec<usize>> = vec![Vec::new(); self.n_classes + 1];
        for i in 0..self.n() {
            let s = if self.y[i] < 0 {
                self.n_classes
            } else {
                self.y[i] as usize
            };
            strata[s].push(i);
        }
        for s in &mut strata {
            s.shuffle(&mut rng);
        }
        self.split = vec![Split::Train; self.n()];
        let mut assign = |want: usize, tag: Split, strata: &mut Vec<Vec<usize>>| {
            let mut placed = 0;
            while placed < want {
                let mut progressed = false;
                for s in strata.iter_mut() {
                    if placed >= want {
                        break;
                    }
                    if let Some(i) = s.pop() {
                        self.split[i] = tag;
                        placed += 1;
                        progressed = true;
                    }
                }
                if !progressed {
                    break;
                }
            }
            placed
        };
        let placed_test = assign(n_test, Split::Test, &mut strata);
        let placed_val = assign(n_val, Split::Val, &mut strata);
        debug_assert_eq!(placed_test, n_test);
        debug_assert_eq!(placed_val, n_val);
        Ok(())
    }

    /// Keeps exactly `n_l` labeled train rows per class and masks the rest as
    /// unlabeled. Validation and test rows are untouched.
    pub fn make_ssl_split(&mut self, n_l: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for k in 0..self.n_classes {
            let mut idx: Vec<usize> = (0..self.n())
                .filter(|&i| self.split[i] == Split::Train && self.y[i] == k as i64)
                .collect();
            if idx.len() < n_l {
                return Err(Error::invalid(format!(
                    "class {k} has {} labeled train rows, cannot keep {n_l}",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            for &i in idx.iter().skip(n_l) {
                self.y[i] = -1;
            }
        }
        Ok(())
    }

    /// Randomly drops unlabeled train rows until at most `cap` remain.
    pub fn cap_unlabeled(&mut self, cap: usize, seed: u64) {
        let mut unlabeled = self.unlabeled_train();
        if unlabeled.len() <= cap {
            return;
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        unlabeled.shuffle(&mut rng);
        let drop: std::collections::HashSet<usize> =
            unlabeled.into_iter().skip(cap).collect();
        let keep: Vec<usize> = (0..self.n()).filter(|i| !drop.contains(i)).collect();
        *self = self.select(&keep);
    }

    /// Downsamples every class (over labeled rows) to the minority-class
    /// count; unlabeled rows are kept.
    pub fn subsample_balance(&self, seed: u64) -> Result<Dataset> {
        if self.n_classes < 2 {
            return Err(Error::invalid(
                "balancing needs at least 2 classes".to_string(),
            ));
        }
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); self.n_classes];
        let mut unlabeled = Vec::new();
        for i in 0..self.n() {
            if self.y[i] >= 0 {
                per_class[self.y[i] as usize].push(i);
            } else {
                unlabeled.push(i);
            }
        }
        let minority = per_class.iter().map(|v| v.len()).min().unwrap_or(0);
        if minority == 0 {
            return Err(Error::invalid(
                "balancing requires every class to have at least one row".to_string(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for idx in &mut per_class {
            idx.shuffle(&mut rng);
            keep.extend_from_slice(&idx[..minority]);
        }
        keep.extend(unlabeled);
        keep.sort_unstable();
        Ok(self.select(&keep))
    }

    /// Fits per-feature mean/std on train rows, clamps zero variance to 1,
    /// transforms every row, and records the statistics. May only be applied
    /// once.
    pub fn standardize(&mut self) -> Result<()> {
        if self.standardization.is_some() {
            return Err(Error::invalid(
                "dataset is already standardized".to_string(),
            ));
        }
        let train = self.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::invalid(
                "standardization needs a non-empty train split".to_string(),
            ));
        }
        let d = self.dim();
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in &train {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += self.x.get(i, j);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; d];
        for &i in &train {
            for (j, s) in std.iter_mut().enumerate() {
                let dv = self.x.get(i, j) - mean[j];
                *s += dv * dv;
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        let record = Standardization { mean, std };
        self.x = record.apply(&self.x)?;
        self.standardization = Some(record);
        Ok(())
    }

    /// Per-class row counts over labeled rows.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &y in &self.y {
            if y >= 0 {
                counts[y as usize] += 1;
            }
        }
        counts
    }
}

// ── Generators ──────────────────────────────────────────────────────────

/// Two concentric circles: class 0 on radius 1, class 1 on radius 2, angles
/// uniform, Gaussian radial noise.
pub fn gen_two_circles(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 points, got {n}")));
    }
    if noise < 0.0 {
        return Err(Error::invalid(format!("noise must be nonnegative, got {noise}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 2) as i64;
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let eps: f64 = StandardNormal.sample(&mut rng);
        let r = (class as f64 + 1.0) + noise * eps;
        x.set(i, 0, r * theta.cos());
        x.set(i, 1, r * theta.sin());
        y.push(class);
    }
    Ok(Dataset::from_parts(
        x,
        y,
        2,
        vec!["0".to_string(), "1".to_string()],
    ))
}

/// Pinwheel: per-class Gaussian blob stretched radially, rotated by an angle
/// proportional to the radial coordinate, classes at equal angular offsets.
pub fn gen_pinwheel(
    n: usize,
    n_classes: usize,
    seed: u64,
    spiral_rate: f64,
    radial_std: f64,
    tangential_std: f64,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 classes, got {n_classes}"
        )));
    }
    if n < n_classes {
        return Err(Error::invalid(format!(
            "need at least {n_classes} points, got {n}"
        )));
    }
    if radial_std < 0.0 || tangential_std < 0.0 {
        return Err(Error::invalid("noise levels must be nonnegative".to_string()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % n_classes;
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e2: f64 = StandardNormal.sample(&mut rng);
        let radial = 1.0 + radial_std * e1;
        let tangential = tangential_std * e2;
        let angle =
            std::f64::consts::TAU * class as f64 / n_classes as f64 + spiral_rate * radial;
        let (sin, cos) = angle.sin_cos();
        x.set(i, 0, radial * cos - tangential * sin);
        x.set(i, 1, radial * sin + tangential * cos);
        y.push(class as i64);
    }
    let names = (0..n_classes).map(|k| k.to_string()).collect();
    Ok(Dataset::from_parts(x, y, n_classes, names))
}

/// Eight Gaussian blobs with means equally spaced on a circle.
pub fn gen_eight_gaussians(n: usize, seed: u64, radius: f64, std: f64) -> Result<Dataset> {
    if n < 8 {
        return Err(Error::invalid(format!("need at least 8 points, got {n}")));
    }
    if radius <= 0.0 || std < 0.0 {
        return Err(Error::invalid(
            "radius must be positive and std nonnegative".to_string(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 8;
        let angle = class as f64 * std::f64::consts::PI / 4.0;
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e2: f64 = StandardNormal.sample(&mut rng);
        x.set(i, 0, radius * angle.cos() + std * e1);
        x.set(i, 1, radius * angle.sin() + std * e2);
        y.push(class as i64);
    }
    let names = (0..8).map(|k| k.to_string()).collect();
    Ok(Dataset::from_parts(x, y, 8, names))
}

// ── Delimited files ─────────────────────────────────────────────────────

/// Which column holds the label.
#[derive(Clone, Debug)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
    /// Trailing column, whatever the file width turns out to be.
    Last,
}

/// Loads a delimited numeric file. Labels are mapped to dense 0..C-1 in
/// sorted order (numeric when every label parses as an integer); an empty
/// label field means unlabeled. `label_col: None` loads a fully unlabeled
/// dataset; `LabelColumn::Last` takes the trailing column.
pub fn load_delimited(
    path: &Path,
    delimiter: char,
    label_col: Option<&LabelColumn>,
    has_header: bool,
) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let mut header: Option<Vec<String>> = None;
    if has_header {
        match lines.next() {
            Some((_, l)) => {
                header = Some(l.split(delimiter).map(|t| t.trim().to_string()).collect())
            }
            None => return Err(parse_err(1, "file has no header line".to_string())),
        }
    }

    // Last resolves once the first data row fixes the width.
    let mut resolve_last = false;
    let mut label_idx: Option<usize> = match label_col {
        None => None,
        Some(LabelColumn::Index(i)) => Some(*i),
        Some(LabelColumn::Last) => {
            resolve_last = true;
            None
        }
        Some(LabelColumn::Name(name)) => {
            let header = header
                .as_ref()
                .ok_or_else(|| parse_err(1, "label column by name needs a header".to_string()))?;
            Some(
                header
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| parse_err(1, format!("unknown label column '{name}'")))?,
            )
        }
    };

    let mut width: Option<usize> = None;
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<Option<String>> = Vec::new();
    for (line_no, line) in lines {
        let tokens: Vec<&str> = line.split(delimiter).map(|t| t.trim()).collect();
        match width {
            None => {
                if resolve_last {
                    label_idx = Some(tokens.len() - 1);
                }
                if let Some(li) = label_idx {
                    if li >= tokens.len() {
                        return Err(parse_err(
                            line_no,
                            format!("label column {li} out of range for {} columns", tokens.len()),
                        ));
                    }
                }
                width = Some(tokens.len());
            }
            Some(w) if tokens.len() != w => {
                return Err(parse_err(
                    line_no,
                    format!("row has {} columns, expected {w}", tokens.len()),
                ));
            }
            _ => {}
        }
        let mut row = Vec::with_capacity(tokens.len().saturating_sub(1));
        for (col, tok) in tokens.iter().enumerate() {
            if Some(col) == label_idx {
                raw_labels.push(if tok.is_empty() {
                    None
                } else {
                    Some(tok.to_string())
                });
                continue;
            }
            let v: f64 = tok.parse().map_err(|_| {
                parse_err(line_no, format!("column {col}: '{tok}' is not a number"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    line_no,
                    format!("column {col}: non-finite feature value"),
                ));
            }
            row.push(v);
        }
        if label_idx.is_none() {
            raw_labels.push(None);
        }
        features.push(row);
    }
    if features.is_empty() {
        return Err(parse_err(1, "file contains no data rows".to_string()));
    }

    // Dense label mapping over sorted unique labels; numeric sort when every
    // label parses as an integer so generated files round-trip exactly.
    let mut uniques: Vec<String> = raw_labels.iter().flatten().cloned().collect();
    uniques.sort();
    uniques.dedup();
    if uniques.iter().all(|u| u.parse::<i64>().is_ok()) {
        uniques.sort_by_key(|u| u.parse::<i64>().unwrap());
    }
    let y: Vec<i64> = raw_labels
        .iter()
        .map(|l| match l {
            None => -1,
            Some(s) => uniques.iter().position(|u| u == s).unwrap() as i64,
        })
        .collect();
    let n_classes = uniques.len();
    let x = Matrix::from_rows(&features)?;
    Ok(Dataset::from_parts(x, y, n_classes, uniques))
}

/// Writes features plus a trailing label column. Feature formatting uses the
/// shortest round-trip decimal form, so reloading recovers identical floats;
/// unlabeled rows get an empty label field.
pub fn write_delimited(ds: &Dataset, path: &Path, delimiter: char) -> Result<()> {
    let mut out = String::new();
    for i in 0..ds.n() {
        for j in 0..ds.dim() {
            let _ = write!(out, "{}{}", ds.x.get(i, j), delimiter);
        }
        if ds.y[i] >= 0 {
            out.push_str(&ds.label_names[ds.y[i] as usize]);
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
