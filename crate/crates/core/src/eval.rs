//! Evaluation and reporting: classification metrics with calibration error,
//! the variance-calibration driver, latent decision-boundary distances,
//! latent-space interpolation, out-of-distribution likelihood scoring, and
//! 2-D decision-grid emission for plotting.

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::gmm::{argmax, GaussianMixture};
use crate::tensor::Matrix;

/// Flat classification metrics over one evaluation split.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    /// Mean -log p(y | x) under the predictive distribution.
    pub mean_nll: f64,
    pub ece: f64,
    pub per_class_accuracy: Vec<f64>,
    pub counts: Vec<usize>,
}

impl MetricsReport {
    /// Build a report from predictive probabilities and true labels.
    pub fn from_probs(probs: &Matrix, labels: &[i64]) -> Result<Self> {
        if probs.rows == 0 {
            return Err(Error::invalid("empty evaluation set".to_string()));
        }
        if probs.rows != labels.len() {
            return Err(Error::shape(format!(
                "{} probability rows vs {} labels",
                probs.rows,
                labels.len()
            )));
        }
        let c = probs.cols;
        let mut correct = 0usize;
        let mut nll = 0.0;
        let mut per_class_correct = vec![0usize; c];
        let mut counts = vec![0usize; c];
        for i in 0..probs.rows {
            let y = labels[i];
            if y < 0 || y as usize >= c {
                return Err(Error::invalid(format!("label {y} at row {i} out of range")));
            }
            let y = y as usize;
            counts[y] += 1;
            if argmax(probs.row(i)) == y {
                correct += 1;
                per_class_correct[y] += 1;
            }
            let p = probs.get(i, y);
            if p <= 0.0 {
                return Err(Error::numerical(format!(
                    "zero predictive probability for the true class at row {i}"
                )));
            }
            nll -= p.ln();
        }
        let per_class_accuracy = (0..c)
            .map(|k| {
                if counts[k] == 0 {
                    f64::NAN
                } else {
                    per_class_correct[k] as f64 / counts[k] as f64
                }
            })
            .collect();
        Ok(MetricsReport {
            n: probs.rows,
            accuracy: correct as f64 / probs.rows as f64,
            mean_nll: nll / probs.rows as f64,
            ece: ece(probs, labels, 15)?,
            per_class_accuracy,
            counts,
        })
    }

    /// Flat `key = value` text record; arrays comma-separated.
    pub fn to_kv(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let pca: Vec<String> = self.per_class_accuracy.iter().map(|v| format!("{v}")).collect();
        let cnt: Vec<String> = self.counts.iter().map(|v| format!("{v}")).collect();
        format!(
            "n = {}\naccuracy = {}\nmean_nll = {}\nece = {}\nper_class_accuracy = {}\ncounts = {}\n",
            self.n,
            self.accuracy,
            self.mean_nll,
            self.ece,
            join(&pca),
            join(&cnt)
        )
    }
}

/// Expected calibration error: equal-width bins on the max-probability
/// confidence, weighted mean absolute gap between per-bin confidence and
/// accuracy. A confidence lands in bin ceil(conf * n_bins) - 1 (clamped),
/// so bin edges belong to the lower bin.
pub fn ece(probs: &Matrix, labels: &[i64], n_bins: usize) -> Result<f64> {
    if probs.rows == 0 {
        return Err(Error::invalid("ECE of an empty set".to_string()));
    }
    if probs.rows != labels.len() {
        return Err(Error::shape(format!(
            "{} probability rows vs {} labels",
            probs.rows,
            labels.len()
        )));
    }
    if n_bins == 0 {
        return Err(Error::invalid("need at least one bin".to_string()));
    }
    let m = n_bins as f64;
    let mut bin_count = vec![0usize; n_bins];
    let mut bin_conf = vec![0.0f64; n_bins];
    let mut bin_correct = vec![0usize; n_bins];
    for i in 0..probs.rows {
        let row = probs.row(i);
        let pred = argmax(row);
        let conf = row[pred];
        let idx = ((conf * m).ceil() as isize - 1).clamp(0, n_bins as isize - 1) as usize;
        bin_count[idx] += 1;
        bin_conf[idx] += conf;
        if pred as i64 == labels[i] {
            bin_correct[idx] += 1;
        }
    }
    let n = probs.rows as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        if bin_count[b] == 0 {
            continue;
        }
        let cnt = bin_count[b] as f64;
        let conf = bin_conf[b] / cnt;
        let acc = bin_correct[b] as f64 / cnt;
        total += (cnt / n) * (conf - acc).abs();
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct CalibrationOutcome {
    pub sigma2: f64,
    pub before: MetricsReport,
    pub after: MetricsReport,
}

/// Fit the shared mixture variance on a labeled validation set and report
/// metrics before and after. Predictions are argmax-invariant under the
/// shared variance, so accuracy is identical on both sides.
pub fn calibrate(
    model: &FlowModel,
    mixture: &mut GaussianMixture,
    x_val: &Matrix,
    y_val: &[i64],
) -> Result<CalibrationOutcome> {
    let fwd = model.forward(x_val)?;
    let before = MetricsReport::from_probs(&mixture.predictive_batch(&fwd.z)?, y_val)?;
    let sigma2 = mixture.fit_sigma(&fwd.z, y_val)?;
    let after = MetricsReport::from_probs(&mixture.predictive_batch(&fwd.z)?, y_val)?;
    Ok(CalibrationOutcome {
        sigma2,
        before,
        after,
    })
}

/// Latent distance from f(x) to the perpendicular-bisector hyperplane of its
/// two nearest component means.
#[derive(Clone, Debug)]
pub struct BoundaryDistanceRecord {
    pub distance: f64,
    pub nearest: usize,
    pub second: usize,
}

/// d(x) = |dist2(mu', z) - dist2(mu'', z)| / (2 ||mu' - mu''||) per example,
/// with mu', mu'' the two nearest means (ties toward lower index).
pub fn boundary_distance(
    model: &FlowModel,
    mixture: &GaussianMixture,
    x: &Matrix,
) -> Result<Vec<BoundaryDistanceRecord>> {
    let c = mixture.n_classes();
    if c < 2 {
        return Err(Error::invalid("boundary distance needs at least two classes".to_string()));
    }
    let fwd = model.forward(x)?;
    let mut out = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let z = fwd.z.row(i);
        let mut d2: Vec<(f64, usize)> = (0..c)
            .map(|k| {
                let mu = mixture.means.row(k);
                let s: f64 = mu.iter().zip(z).map(|(&m, &v)| (m - v) * (m - v)).sum();
                (s, k)
            })
            .collect();
        d2.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let (d1, k1) = d2[0];
        let (d2v, k2) = d2[1];
        let mu1 = mixture.means.row(k1);
        let mu2 = mixture.means.row(k2);
        let sep: f64 = mu1
            .iter()
            .zip(mu2)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if sep == 0.0 {
            return Err(Error::invalid(format!(
                "components {k1} and {k2} share a mean; boundary distance undefined"
            )));
        }
        out.push(BoundaryDistanceRecord {
            distance: (d1 - d2v).abs() / (2.0 * sep),
            nearest: k1,
            second: k2,
        });
    }
    Ok(out)
}

/// One step of a latent-space interpolation path.
#[derive(Clone, Debug)]
pub struct InterpolationPoint {
    pub t: f64,
    pub x: Vec<f64>,
    /// Total data-space log-likelihood log p_X at this point.
    pub log_px: f64,
    /// Marginal latent log-density log p_Z(z_t).
    pub log_pz: f64,
}

/// Linear interpolation in latent space: z_t = (1-t) f(x1) + t f(x2) at
/// n_steps uniform t in [0, 1], mapped back through the inverse flow.
pub fn interpolate(
    model: &FlowModel,
    mixture: &GaussianMixture,
    x1: &[f64],
    x2: &[f64],
    n_steps: usize,
) -> Result<Vec<InterpolationPoint>> {
    if n_steps < 2 {
        return Err(Error::invalid(format!("need n_steps >= 2, got {n_steps}")));
    }
    if x1.len() != model.dim || x2.len() != model.dim {
        return Err(Error::shape(format!(
            "endpoint dims {} and {} vs model dim {}",
            x1.len(),
            x2.len(),
            model.dim
        )));
    }
    let ends = Matrix::from_rows(&[x1.to_vec(), x2.to_vec()])?;
    let fwd = model.forward(&ends)?;
    let z1 = fwd.z.row(0).to_vec();
    let z2 = fwd.z.row(1).to_vec();
    let mut zt = Matrix::zeros(n_steps, model.dim);
    let mut ts = Vec::with_capacity(n_steps);
    for s in 0..n_steps {
        let t = s as f64 / (n_steps - 1) as f64;
        ts.push(t);
        for d in 0..model.dim {
            zt.set(s, d, (1.0 - t) * z1[d] + t * z2[d]);
        }
    }
    let (x, logdet_inv) = model.inverse(&zt)?;
    let log_pz = mixture.marginal_logpdf_batch(&zt)?;
    let mut out = Vec::with_capacity(n_steps);
    for s in 0..n_steps {
        // log p_X(x_t) = log p_Z(z_t) + logdet f(x_t) = log p_Z(z_t) - logdet f^{-1}(z_t).
        out.push(InterpolationPoint {
            t: ts[s],
            x: x.row(s).to_vec(),
            log_px: log_pz[s] - logdet_inv[s],
            log_pz: log_pz[s],
        });
    }
    Ok(out)
}

/// Total data-space log-likelihood log p_X(x) per row, for OOD histograms.
pub fn ood_scores(model: &FlowModel, mixture: &GaussianMixture, x: &Matrix) -> Result<Vec<f64>> {
    let fwd = model.forward(x)?;
    let marg = mixture.marginal_logpdf_batch(&fwd.z)?;
    Ok(marg
        .iter()
        .zip(&fwd.logdet)
        .map(|(&m, &ld)| m + ld)
        .collect())
}

/// Predictive probabilities on a regular 2-D grid, for decision-boundary
/// plots. Returns (points, probs): resolution^2 rows each, x1 varying
/// slowest.
pub fn decision_grid(
    model: &FlowModel,
    mixture: &GaussianMixture,
    bounds: (f64, f64, f64, f64),
    resolution: usize,
) -> Result<(Matrix, Matrix)> {
    if model.dim != 2 {
        return Err(Error::invalid(format!(
            "decision grid requires a 2-D model, got dim {}",
            model.dim
        )));
    }
    if resolution < 2 {
        return Err(Error::invalid(format!("need resolution >= 2, got {resolution}")));
    }
    let (x1_min, x1_max, x2_min, x2_max) = bounds;
    if x1_min >= x1_max || x2_min >= x2_max {
        return Err(Error::invalid("grid bounds must have positive extent".to_string()));
    }
    let r = resolution;
    let mut points = Matrix::zeros(r * r, 2);
    for i in 0..r {
        let x1 = x1_min + (x1_max - x1_min) * i as f64 / (r - 1) as f64;
        for j in 0..r {
            let x2 = x2_min + (x2_max - x2_min) * j as f64 / (r - 1) as f64;
            points.set(i * r + j, 0, x1);
            points.set(i * r + j, 1, x2);
        }
    }
    let fwd = model.forward(&points)?;
    let probs = mixture.predictive_batch(&fwd.z)?;
    Ok((points, probs))
}
