//! Latent Gaussian mixture over classes.
//!
//! One spherical Gaussian per class, all sharing a single scalar variance,
//! plus class priors (uniform by default). Mixture parameters stay fixed
//! while the flow trains; the only post-hoc mutation is [`GaussianMixture::fit_sigma`],
//! which re-fits the shared variance on validation data. Because the variance
//! is shared and priors act additively in log space, fitting it never changes
//! an argmax prediction.
//!
//! The class posterior given a latent point ("predictive") and the posterior
//! used by the EM loop are the same formula: the flow's Jacobian term is
//! constant across classes and cancels. [`GaussianMixture::em_posterior`]
//! exists as a named alias so the EM loop reads naturally.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::log_sum_exp;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug)]
pub struct GaussianMixture {
    /// Component means, one row per class (C x D).
    pub means: Matrix,
    /// Log of the shared isotropic variance sigma^2.
    pub log_var: f64,
    /// Log class priors, length C, exp-summing to 1.
    pub log_priors: Vec<f64>,
}

impl GaussianMixture {
    /// Standard-normal random means, unit variance, uniform priors.
    pub fn init_random(dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if dim < 1 {
            return Err(Error::invalid(format!("dimension must be >= 1, got {dim}")));
        }
        if n_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = (0..n_classes * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(GaussianMixture {
            means: Matrix::from_vec(n_classes, dim, data)?,
            log_var: 0.0,
            log_priors: vec![-(n_classes as f64).ln(); n_classes],
        })
    }

    /// Means set to r times the per-class average of the given latents.
    /// Every class must contribute at least one point.
    pub fn init_data_dependent(
        latents: &Matrix,
        labels: &[i64],
        n_classes: usize,
        r: f64,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        if latents.rows != labels.len() {
            return Err(Error::shape(format!(
                "{} latents vs {} labels",
                latents.rows,
                labels.len()
            )));
        }
        let mut means = Matrix::zeros(n_classes, latents.cols);
        let mut counts = vec![0usize; n_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y < 0 || y as usize >= n_classes {
                return Err(Error::invalid(format!(
                    "label {y} at row {i} outside 0..{n_classes}"
                )));
            }
            let k = y as usize;
            counts[k] += 1;
            let row = latents.row(i);
            let dst = means.row_mut(k);
            for (d, v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        for (k, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(Error::invalid(format!(
                    "class {k} has no labeled latents for data-dependent initialization"
                )));
            }
            let dst = means.row_mut(k);
            for v in dst.iter_mut() {
                *v *= r / c as f64;
            }
        }
        Ok(GaussianMixture {
            means,
            log_var: 0.0,
            log_priors: vec![-(n_classes as f64).ln(); n_classes],
        })
    }

    pub fn n_classes(&self) -> usize {
        self.means.rows
    }

    pub fn dim(&self) -> usize {
        self.means.cols
    }

    pub fn sigma2(&self) -> f64 {
        self.log_var.exp()
    }

    /// Replaces the priors; they must be positive and sum to 1.
    pub fn set_priors(&mut self, priors: &[f64]) -> Result<()> {
        if priors.len() != self.n_classes() {
            return Err(Error::shape(format!(
                "{} priors for {} classes",
                priors.len(),
                self.n_classes()
            )));
        }
        let sum: f64 = priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || priors.iter().any(|&p| p <= 0.0) {
            return Err(Error::invalid(
                "priors must be positive and sum to 1".to_string(),
            ));
        }
        self.log_priors = priors.iter().map(|p| p.ln()).collect();
        Ok(())
    }

    /// log N(z | mu_k, sigma^2 I), including the normalization constant.
    pub fn class_cond_logpdf(&self, z: &[f64], k: usize) -> Result<f64> {
        if k >= self.n_classes() {
            return Err(Error::invalid(format!(
                "class {k} out of range for {} components",
                self.n_classes()
            )));
        }
        if z.len() != self.dim() {
            return Err(Error::shape(format!(
                "point has dimension {}, mixture has {}",
                z.len(),
                self.dim()
            )));
        }
        let sigma2 = self.sigma2();
        let mu = self.means.row(k);
        let mut sq = 0.0;
        for (a, b) in z.iter().zip(mu) {
            let d = a - b;
            sq += d * d;
        }
        let d = self.dim() as f64;
        Ok(-0.5 * (sq / sigma2 + d * (LN_2PI + self.log_var)))
    }

    /// Per-class log densities for a batch: n x C.
    pub fn log_class_cond(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols != self.dim() {
            return Err(Error::shape(format!(
                "points have dimension {}, mixture has {}",
                z.cols,
                self.dim()
            )));
        }
        let sigma2 = self.sigma2();
        let d = self.dim() as f64;
        let norm = -0.5 * d * (LN_2PI + self.log_var);
        let mut out = Matrix::zeros(z.rows, self.n_classes());
        for i in 0..z.rows {
            let zi = z.row(i);
            for k in 0..self.n_classes() {
                let mu = self.means.row(k);
                let mut sq = 0.0;
                for (a, b) in zi.iter().zip(mu) {
                    let dv = a - b;
                    sq += dv * dv;
                }
                out.set(i, k, -0.5 * sq / sigma2 + norm);
            }
        }
        Ok(out)
    }

    /// Per-class log joint log p(z, y=k) = log prior_k + log N(z | mu_k).
    pub fn log_joint(&self, z: &Matrix) -> Result<Matrix> {
        let mut lc = self.log_class_cond(z)?;
        for i in 0..lc.rows {
            let row = lc.row_mut(i);
            for (k, v) in row.iter_mut().enumerate() {
                *v += self.log_priors[k];
            }
        }
        Ok(lc)
    }

    /// log sum_k prior_k N(z | mu_k, sigma^2 I), via log-sum-exp.
    pub fn marginal_logpdf(&self, z: &[f64]) -> Result<f64> {
        let zm = Matrix::row_matrix(z);
        Ok(self.marginal_logpdf_batch(&zm)?[0])
    }

    pub fn marginal_logpdf_batch(&self, z: &Matrix) -> Result<Vec<f64>> {
        let joint = self.log_joint(z)?;
        Ok((0..joint.rows).map(|i| log_sum_exp(joint.row(i))).collect())
    }

    /// Class posterior p(y | z) for a single latent point.
    pub fn predictive(&self, z: &[f64]) -> Result<Vec<f64>> {
        let zm = Matrix::row_matrix(z);
        let p = self.predictive_batch(&zm)?;
        Ok(p.row(0).to_vec())
    }

    /// Class posteriors for a batch, rows summing to 1.
    pub fn predictive_batch(&self, z: &Matrix) -> Result<Matrix> {
        let mut joint = self.log_joint(z)?;
        for i in 0..joint.rows {
            let row = joint.row_mut(i);
            let lse = log_sum_exp(row);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(joint)
    }

    /// Posterior used by the EM loop; identical to [`Self::predictive`]
    /// because the Jacobian term is constant across classes and cancels.
    pub fn em_posterior(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.predictive(z)
    }

    pub fn em_posterior_batch(&self, z: &Matrix) -> Result<Matrix> {
        self.predictive_batch(z)
    }

    /// One tempered draw from component `k`: N(mu_k, T * sigma^2 I).
    /// T = 0 returns the mean exactly.
    pub fn sample_class(
        &self,
        k: usize,
        temperature: f64,
        rng: &mut ChaCha20Rng,
    ) -> Result<Vec<f64>> {
        if k >= self.n_classes() {
            return Err(Error::invalid(format!(
                "class {k} out of range for {} components",
                self.n_classes()
            )));
        }
        if temperature < 0.0 {
            return Err(Error::invalid(format!(
                "temperature must be nonnegative, got {temperature}"
            )));
        }
        let mu = self.means.row(k);
        if temperature == 0.0 {
            return Ok(mu.to_vec());
        }
        let std = (temperature * self.sigma2()).sqrt();
        Ok(mu
            .iter()
            .map(|&m| {
                let e: f64 = StandardNormal.sample(rng);
                m + std * e
            })
            .collect())
    }

    /// Mean predictive negative log-likelihood over labeled latents.
    pub fn predictive_nll(&self, z: &Matrix, labels: &[i64]) -> Result<f64> {
        if z.rows != labels.len() {
            return Err(Error::shape(format!(
                "{} latents vs {} labels",
                z.rows,
                labels.len()
            )));
        }
        if z.rows == 0 {
            return Err(Error::invalid("predictive NLL of an empty set".to_string()));
        }
        let joint = self.log_joint(z)?;
        let mut total = 0.0;
        for i in 0..z.rows {
            let y = labels[i];
            if y < 0 || y as usize >= self.n_classes() {
                return Err(Error::invalid(format!("label {y} at row {i} out of range")));
            }
            let row = joint.row(i);
            total -= row[y as usize] - log_sum_exp(row);
        }
        Ok(total / z.rows as f64)
    }

    /// Fits the shared variance by minimizing validation predictive NLL with
    /// a golden-section search on log sigma^2 over [-10, 10] (tolerance 1e-6
    /// on the log argument). The mixture is updated in place and the fitted
    /// sigma^2 returned. The result is never worse than sigma^2 = 1, and
    /// argmax predictions are unchanged because the variance is shared.
    pub fn fit_sigma(&mut self, latents: &Matrix, labels: &[i64]) -> Result<f64> {
        if latents.rows == 0 {
            return Err(Error::invalid(
                "variance fitting needs a non-empty validation set".to_string(),
            ));
        }
        let nll_at = |gm: &mut GaussianMixture, log_var: f64| -> Result<f64> {
            let prev = gm.log_var;
            gm.log_var = log_var;
            let v = gm.predictive_nll(latents, labels);
            gm.log_var = prev;
            v
        };

        let (mut a, mut b) = (-10.0_f64, 10.0_f64);
        let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let mut fc = nll_at(self, c)?;
        let mut fd = nll_at(self, d)?;
        while (b - a).abs() > 1e-6 {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = nll_at(self, c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = nll_at(self, d)?;
            }
        }
        let mut best = 0.5 * (a + b);
        let mut best_nll = nll_at(self, best)?;
        // The search is guaranteed to beat the untempered baseline only up to
        // local structure; enforce "never worse than sigma^2 = 1" directly.
        let at_unit = nll_at(self, 0.0)?;
        if at_unit < best_nll {
            best = 0.0;
            best_nll = at_unit;
        }
        let _ = best_nll;
        self.log_var = best;
        Ok(self.sigma2())
    }
}

/// Index of the largest probability, ties broken by the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Prior vector from labeled-class frequencies.
pub fn priors_from_labels(labels: &[i64], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    let mut total = 0usize;
    for &y in labels {
        if y >= 0 {
            let k = y as usize;
            if k >= n_classes {
                return Err(Error::invalid(format!("label {y} out of range")));
            }
            counts[k] += 1;
            total += 1;
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::invalid(
            "every class needs at least one labeled example to estimate priors".to_string(),
        ));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_random_is_deterministic_per_seed() {
        let a = GaussianMixture::init_random(4, 3, 42).unwrap();
        let b = GaussianMixture::init_random(4, 3, 42).unwrap();
        assert_eq!(a.means.data, b.means.data);
        let c = GaussianMixture::init_random(4, 3, 43).unwrap();
        assert_ne!(a.means.data, c.means.data);
    }

    #[test]
    fn data_dependent_init_averages_and_scales() {
        let latents =
            Matrix::from_vec(4, 2, vec![1.0, 0.0, 3.0, 2.0, -1.0, -1.0, -3.0, 1.0]).unwrap();
        let labels = vec![0, 0, 1, 1];
        let gm = GaussianMixture::init_data_dependent(&latents, &labels, 2, 0.5).unwrap();
        assert_eq!(gm.means.row(0), &[1.0, 0.5]);
        assert_eq!(gm.means.row(1), &[-1.0, 0.0]);

        let zero = GaussianMixture::init_data_dependent(&latents, &labels, 2, 0.0).unwrap();
        assert!(zero.means.data.iter().all(|&v| v == 0.0));

        let missing = GaussianMixture::init_data_dependent(&latents, &[0, 0, 0, 0], 2, 1.0);
        assert!(missing.is_err());
    }

    #[test]
    fn class_cond_peak_value() {
        let mut gm = GaussianMixture::init_random(2, 2, 0).unwrap();
        gm.means = Matrix::from_vec(2, 2, vec![0.0, 0.0, 3.0, 0.0]).unwrap();
        let at_peak = gm.class_cond_logpdf(&[0.0, 0.0], 0).unwrap();
        assert!((at_peak + LN_2PI).abs() < 1e-12);
        let at_unit = gm.class_cond_logpdf(&[1.0, 0.0], 0).unwrap();
        assert!((at_unit + LN_2PI + 0.5).abs() < 1e-12);
    }

    #[test]
    fn marginal_matches_naive_sum() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let gm = GaussianMixture::init_random(3, 4, 9).unwrap();
        for _ in 0..50 {
            let z: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let lse = gm.marginal_logpdf(&z).unwrap();
            let mut naive = 0.0;
            for k in 0..4 {
                naive += (gm.log_priors[k] + gm.class_cond_logpdf(&z, k).unwrap()).exp();
            }
            assert!((lse - naive.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn marginal_survives_large_distances() {
        let mut gm = GaussianMixture::init_random(2, 2, 0).unwrap();
        gm.means = Matrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let v = gm.marginal_logpdf(&[100.0, 0.0]).unwrap();
        assert!(v.is_finite());
        assert!(v < -1000.0);
    }

    #[test]
    fn predictive_symmetry_and_logistic_reduction() {
        let mut gm = GaussianMixture::init_random(1, 2, 0).unwrap();
        gm.means = Matrix::from_vec(2, 1, vec![-1.0, 1.0]).unwrap();
        let p = gm.predictive(&[0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);

        // In 1-D with unit means the posterior of class 2 is logistic(2z).
        let z = 0.5;
        let p = gm.predictive(&[z]).unwrap();
        let expect = 1.0 / (1.0 + (-2.0 * z).exp());
        assert!((p[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn predictive_rows_sum_to_one_and_match_em_posterior() {
        use rand::Rng;
        let gm = GaussianMixture::init_random(5, 3, 11).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..200 {
            let z: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
            let p = gm.predictive(&z).unwrap();
            let q = gm.em_posterior(&z).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn argmax_is_nearest_mean_under_uniform_priors() {
        use rand::Rng;
        let gm = GaussianMixture::init_random(2, 4, 13).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        for _ in 0..100 {
            let z: Vec<f64> = (0..2).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            let p = gm.predictive(&z).unwrap();
            let by_prob = argmax(&p);
            let mut by_dist = 0;
            let mut best = f64::INFINITY;
            for k in 0..4 {
                let mu = gm.means.row(k);
                let d: f64 = z.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best {
                    best = d;
                    by_dist = k;
                }
            }
            assert_eq!(by_prob, by_dist);
        }
    }

    #[test]
    fn sampling_moments_and_temperature_zero() {
        let gm = GaussianMixture::init_random(8, 2, 15).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let exact = gm.sample_class(0, 0.0, &mut rng).unwrap();
        assert_eq!(exact, gm.means.row(0).to_vec());

        let n = 10_000;
        let mut mean = vec![0.0; 8];
        let mut var = vec![0.0; 8];
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| gm.sample_class(0, 1.0, &mut rng).unwrap())
            .collect();
        for d in &draws {
            for (m, v) in mean.iter_mut().zip(d) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for d in &draws {
            for c in 0..8 {
                var[c] += (d[c] - mean[c]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let bound = 5.0 / (n as f64).sqrt();
        for c in 0..8 {
            assert!((mean[c] - gm.means.get(0, c)).abs() < bound);
            assert!((var[c] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn fit_sigma_recovers_scale_and_preserves_argmax() {
        // Overlapping 1-D classes with within-class variance 4. Overlap is
        // essential: the predictive NLL only identifies sigma^2 through the
        // posterior slope, which saturates for well-separated classes.
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let n = 4000;
        let mut z = Matrix::zeros(n, 1);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let k = (i % 2) as i64;
            let center = if k == 0 { -1.0 } else { 1.0 };
            let e: f64 = StandardNormal.sample(&mut rng);
            z.set(i, 0, center + 2.0 * e);
            y.push(k);
        }
        let mut gm = GaussianMixture::init_random(1, 2, 18).unwrap();
        gm.means = Matrix::from_vec(2, 1, vec![-1.0, 1.0]).unwrap();

        let before: Vec<usize> = (0..n)
            .map(|i| argmax(&gm.predictive(z.row(i)).unwrap()))
            .collect();
        let nll_unit = gm.predictive_nll(&z, &y).unwrap();
        let sigma2 = gm.fit_sigma(&z, &y).unwrap();
        let nll_fit = gm.predictive_nll(&z, &y).unwrap();
        assert!(nll_fit <= nll_unit + 1e-12);
        assert!(
            (sigma2 - 4.0).abs() / 4.0 < 0.2,
            "recovered sigma^2 = {sigma2}"
        );

        // Grid-scan oracle: no grid point beats the fit meaningfully.
        let fitted_log = gm.log_var;
        for step in 0..200 {
            let lv = -10.0 + step as f64 * 0.1;
            gm.log_var = lv;
            let nll = gm.predictive_nll(&z, &y).unwrap();
            assert!(nll >= nll_fit - 1e-6, "grid log_var {lv} beats the fit");
        }
        gm.log_var = fitted_log;

        let after: Vec<usize> = (0..n)
            .map(|i| argmax(&gm.predictive(z.row(i)).unwrap()))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn predictive_invariant_to_constant_log_shift() {
        // Shifting every log-joint by a constant is exactly what a shared
        // logdet term would do; the softmax must not move.
        let gm = GaussianMixture::init_random(3, 3, 19).unwrap();
        let z = [0.3, -0.8, 1.2];
        let p = gm.predictive(&z).unwrap();
        let joint: Vec<f64> = (0..3)
            .map(|k| gm.log_priors[k] + gm.class_cond_logpdf(&z, k).unwrap() + 123.456)
            .collect();
        let lse = log_sum_exp(&joint);
        for k in 0..3 {
            assert!((p[k] - (joint[k] - lse).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn priors_from_labels_counts_labeled_rows_only() {
        let p = priors_from_labels(&[0, 0, 1, -1, 1, 1], 2).unwrap();
        assert!((p[0] - 0.4).abs() < 1e-15);
        assert!((p[1] - 0.6).abs() < 1e-15);
        assert!(priors_from_labels(&[0, 0, -1], 2).is_err());
    }
}
