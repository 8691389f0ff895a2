//! Comparison classifiers: kNN, multinomial logistic regression, a
//! three-hidden-layer MLP with dropout, the Pi-model consistency variant of
//! that MLP, and graph label spreading with dense RBF or sparse kNN
//! affinities.
//!
//! All training here runs on the same tape engine as the flow so gradient
//! correctness is shared, and every routine is deterministic per seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{adam_step, log_sum_exp, AdamState, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::gmm::argmax;
use crate::parallel::map_indexed;
use crate::tensor::{lu_solve, Matrix};
use crate::train::BatchSampler;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    L2,
    Sin2,
}

/// 1 - cosine similarity, in [0, 2]. Equals half the squared Euclidean
/// distance between the unit-normalized vectors.
pub fn sin2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} vs {} components", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid(
            "sin2 distance is undefined for a zero vector".to_string(),
        ));
    }
    Ok(1.0 - dot / (na.sqrt() * nb.sqrt()))
}

fn pair_distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    match metric {
        Metric::L2 => {
            let mut s = 0.0;
            for i in 0..a.len() {
                let d = a[i] - b[i];
                s += d * d;
            }
            Ok(s.sqrt())
        }
        Metric::Sin2 => sin2_distance(a, b),
    }
}

/// Majority vote among the k nearest labeled rows. Vote ties break toward
/// the class with smaller mean distance within the k-set, then the lowest
/// class index.
pub fn knn_predict(
    train_x: &Matrix,
    train_y: &[i64],
    queries: &Matrix,
    k: usize,
    metric: Metric,
) -> Result<Vec<i64>> {
    if train_x.rows != train_y.len() {
        return Err(Error::shape(format!(
            "{} train rows vs {} labels",
            train_x.rows,
            train_y.len()
        )));
    }
    if train_x.rows == 0 {
        return Err(Error::invalid("kNN needs a non-empty labeled set".to_string()));
    }
    if k == 0 || k > train_x.rows {
        return Err(Error::invalid(format!(
            "k = {k} outside 1..={}",
            train_x.rows
        )));
    }
    if queries.cols != train_x.cols {
        return Err(Error::shape(format!(
            "query dim {} vs train dim {}",
            queries.cols, train_x.cols
        )));
    }
    let n_classes = 1 + train_y.iter().copied().max().unwrap_or(0).max(0) as usize;
    let results: Vec<Result<i64>> = map_indexed(queries.rows, |qi| {
        let q = queries.row(qi);
        let mut dists: Vec<(f64, usize)> = Vec::with_capacity(train_x.rows);
        for ti in 0..train_x.rows {
            dists.push((pair_distance(q, train_x.row(ti), metric)?, ti));
        }
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; n_classes];
        let mut dist_sum = vec![0.0f64; n_classes];
        for &(d, ti) in dists.iter().take(k) {
            let c = train_y[ti] as usize;
            votes[c] += 1;
            dist_sum[c] += d;
        }
        let best_votes = *votes.iter().max().unwrap();
        let mut best: Option<(f64, usize)> = None;
        for c in 0..n_classes {
            if votes[c] == best_votes {
                let mean_d = dist_sum[c] / votes[c] as f64;
                if best.is_none_or(|(bd, _)| mean_d < bd) {
                    best = Some((mean_d, c));
                }
            }
        }
        Ok(best.unwrap().1 as i64)
    });
    results.into_iter().collect()
}

// ── Linear and MLP classifiers ──────────────────────────────────────────

fn one_hot(labels: &[i64], n_classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), n_classes);
    for (i, &y) in labels.iter().enumerate() {
        if y < 0 || y as usize >= n_classes {
            return Err(Error::invalid(format!("label {y} at row {i} out of range")));
        }
        m.set(i, y as usize, 1.0);
    }
    Ok(m)
}

/// Copies a parameter tensor into a matrix for plain (untaped) evaluation.
fn param_matrix(params: &ParamSet, id: usize) -> Matrix {
    let p = params.get(id);
    Matrix::from_vec(p.rows, p.cols, p.values.clone()).expect("parameter shape is consistent")
}

fn check_classes_present(y: &[i64], n_classes: usize) -> Result<()> {
    let mut present = vec![false; n_classes];
    for &v in y {
        if v >= 0 && (v as usize) < n_classes {
            present[v as usize] = true;
        }
    }
    if let Some(k) = present.iter().position(|p| !p) {
        return Err(Error::invalid(format!("class {k} has no labeled example")));
    }
    Ok(())
}

/// Stable row-wise softmax.
fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        for j in 0..logits.cols {
            out.set(i, j, (row[j] - lse).exp());
        }
    }
    out
}

/// Mean cross-entropy node over a labeled batch given a logits node.
fn cross_entropy_node(tape: &mut Tape, logits: usize, y: &[i64], n_classes: usize) -> Result<usize> {
    let lse = tape.log_sum_exp_rows(logits)?;
    let neg_lse = tape.scale(lse, -1.0)?;
    let log_probs = tape.add_col_vec(logits, neg_lse)?;
    let ohn = tape.constant(one_hot(y, n_classes)?);
    let picked = tape.mul(log_probs, ohn)?;
    let per_ex = tape.row_sum(picked)?;
    let mean = tape.mean_all(per_ex)?;
    tape.scale(mean, -1.0)
}

/// Multinomial softmax regression.
pub struct LinearClassifier {
    pub params: ParamSet,
    w: usize,
    b: usize,
    pub n_classes: usize,
    pub dim: usize,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, n_classes: usize) -> Result<Self> {
        let mut params = ParamSet::new();
        let w = params.add("w", n_classes, dim, vec![0.0; n_classes * dim])?;
        let b = params.add("b", 1, n_classes, vec![0.0; n_classes])?;
        Ok(LinearClassifier {
            params,
            w,
            b,
            n_classes,
            dim,
        })
    }

    fn logits_node(&self, tape: &mut Tape, x: usize) -> Result<usize> {
        let w = tape.param(&self.params, self.w);
        let b = tape.param(&self.params, self.b);
        tape.affine(x, w, b)
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.dim {
            return Err(Error::shape(format!("input dim {} vs model dim {}", x.cols, self.dim)));
        }
        let w = param_matrix(&self.params, self.w);
        let b = param_matrix(&self.params, self.b);
        let mut logits = x.matmul_nt(&w)?;
        for i in 0..logits.rows {
            for j in 0..logits.cols {
                let v = logits.get(i, j) + b.get(0, j);
                logits.set(i, j, v);
            }
        }
        Ok(softmax_rows(&logits))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<i64>> {
        let p = self.predict_proba(x)?;
        Ok((0..p.rows).map(|i| argmax(p.row(i)) as i64).collect())
    }

    pub fn bias(&self) -> Vec<f64> {
        self.params.get(self.b).values.clone()
    }
}

/// Full-batch Adam on the softmax cross-entropy from a zero initialization.
pub fn logistic_train(
    x: &Matrix,
    y: &[i64],
    n_classes: usize,
    lr: f64,
    epochs: usize,
) -> Result<LinearClassifier> {
    if x.rows == 0 || x.rows != y.len() {
        return Err(Error::invalid(format!(
            "{} rows vs {} labels",
            x.rows,
            y.len()
        )));
    }
    check_classes_present(y, n_classes)?;
    let mut model = LinearClassifier::zeros(x.cols, n_classes)?;
    let mut adam = AdamState::new(model.params.n_scalars(), lr);
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let logits = model.logits_node(&mut tape, xn)?;
        let loss = cross_entropy_node(&mut tape, logits, y, n_classes)?;
        tape.backward(loss, &mut model.params)?;
        adam_step(&mut model.params, &mut adam)?;
    }
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct MlpConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Consistency weight for the Pi-model variant; 0 disables the term.
    pub lambda: f64,
    /// Linear ramp length (epochs) for the consistency weight; 0 = constant.
    pub ramp_epochs: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: 512,
            dropout: 0.5,
            lr: 3e-4,
            epochs: 100,
            batch: 32,
            seed: 0,
            lambda: 30.0,
            ramp_epochs: 0,
        }
    }
}

impl MlpConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch == 0 {
            return Err(Error::invalid("hidden width and batch must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout probability must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.lr <= 0.0 || self.lambda < 0.0 {
            return Err(Error::invalid("lr must be positive, lambda nonnegative".to_string()));
        }
        Ok(())
    }
}

/// Three hidden layers of rectifier units with inverted dropout after each,
/// softmax output. Evaluation mode applies no dropout and is deterministic.
pub struct MlpClassifier {
    pub params: ParamSet,
    layer_ids: Vec<(usize, usize)>,
    pub dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub dropout: f64,
}

impl MlpClassifier {
    pub fn new(dim: usize, hidden: usize, n_classes: usize, dropout: f64, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 || n_classes < 2 {
            return Err(Error::invalid(
                "need dim >= 1, hidden >= 1, n_classes >= 2".to_string(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut layer_ids = Vec::new();
        let shapes = [(hidden, dim), (hidden, hidden), (hidden, hidden), (n_classes, hidden)];
        for (li, &(rows, cols)) in shapes.iter().enumerate() {
            let std = (2.0 / cols as f64).sqrt();
            let w: Vec<f64> = (0..rows * cols)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    e * std
                })
                .collect();
            let wid = params.add(&format!("l{li}.w"), rows, cols, w)?;
            let bid = params.add(&format!("l{li}.b"), 1, rows, vec![0.0; rows])?;
            layer_ids.push((wid, bid));
        }
        Ok(MlpClassifier {
            params,
            layer_ids,
            dim,
            hidden,
            n_classes,
            dropout,
        })
    }

    /// Inverted-dropout mask: keep with probability 1-p, scale kept units by
    /// 1/(1-p). p = 0 consumes no randomness and returns all ones.
    fn dropout_mask(&self, rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Matrix {
        if self.dropout == 0.0 {
            return Matrix::filled(rows, cols, 1.0);
        }
        let keep = 1.0 - self.dropout;
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data.iter_mut() {
            if rng.random::<f64>() < keep {
                *v = 1.0 / keep;
            }
        }
        m
    }

    /// Logits node; `train_rng` enables dropout (training mode).
    fn logits_node(
        &self,
        tape: &mut Tape,
        x: usize,
        n_rows: usize,
        mut train_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<usize> {
        let mut h = x;
        for (li, &(wid, bid)) in self.layer_ids.iter().enumerate() {
            let w = tape.param(&self.params, wid);
            let b = tape.param(&self.params, bid);
            h = tape.affine(h, w, b)?;
            if li + 1 < self.layer_ids.len() {
                h = tape.relu(h)?;
                if let Some(rng) = train_rng.as_deref_mut() {
                    let mask = tape.constant(self.dropout_mask(n_rows, self.hidden, rng));
                    h = tape.mul(h, mask)?;
                }
            }
        }
        Ok(h)
    }

    /// Deterministic evaluation-mode probabilities (no dropout, no tape).
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.dim {
            return Err(Error::shape(format!("input dim {} vs model dim {}", x.cols, self.dim)));
        }
        let mut h = x.clone();
        for (li, &(wid, bid)) in self.layer_ids.iter().enumerate() {
            let w = param_matrix(&self.params, wid);
            let b = param_matrix(&self.params, bid);
            let mut next = h.matmul_nt(&w)?;
            for i in 0..next.rows {
                for j in 0..next.cols {
                    let mut v = next.get(i, j) + b.get(0, j);
                    if li + 1 < self.layer_ids.len() {
                        v = v.max(0.0);
                    }
                    next.set(i, j, v);
                }
            }
            h = next;
        }
        Ok(softmax_rows(&h))
    }

    /// Training-mode probabilities for a given dropout stream (used to test
    /// that the two modes actually differ).
    pub fn predict_proba_train_mode(&self, x: &Matrix, rng: &mut ChaCha20Rng) -> Result<Matrix> {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let logits = self.logits_node(&mut tape, xn, x.rows, Some(rng))?;
        Ok(softmax_rows(tape.value(logits)))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<i64>> {
        let p = self.predict_proba(x)?;
        Ok((0..p.rows).map(|i| argmax(p.row(i)) as i64).collect())
    }
}

/// Shared minibatch loop for the plain MLP and the Pi-model. The
/// consistency branch is entered only when lambda > 0 and unlabeled rows
/// exist, so lambda = 0 reduces bit-exactly to supervised training.
fn mlp_loop(
    x_labeled: &Matrix,
    y_labeled: &[i64],
    x_unlabeled: Option<&Matrix>,
    n_classes: usize,
    cfg: &MlpConfig,
) -> Result<MlpClassifier> {
    cfg.validate()?;
    if x_labeled.rows == 0 || x_labeled.rows != y_labeled.len() {
        return Err(Error::invalid(format!(
            "{} labeled rows vs {} labels",
            x_labeled.rows,
            y_labeled.len()
        )));
    }
    check_classes_present(y_labeled, n_classes)?;
    let n_u = x_unlabeled.map_or(0, |m| m.rows);
    let use_consistency = cfg.lambda > 0.0 && n_u > 0;

    let mut model = MlpClassifier::new(x_labeled.cols, cfg.hidden, n_classes, cfg.dropout, cfg.seed)?;
    let mut adam = AdamState::new(model.params.n_scalars(), cfg.lr);
    let unlabeled_pool: Vec<usize> = if use_consistency { (0..n_u).collect() } else { Vec::new() };
    let mut sampler = BatchSampler::new((0..x_labeled.rows).collect(), unlabeled_pool, cfg.seed);
    let mut drop_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(7);

    let steps_l = x_labeled.rows.div_ceil(cfg.batch);
    let steps = if use_consistency {
        steps_l.max(n_u.div_ceil(cfg.batch))
    } else {
        steps_l
    };
    for epoch in 0..cfg.epochs {
        let weight = if !use_consistency {
            0.0
        } else if cfg.ramp_epochs == 0 {
            cfg.lambda
        } else {
            cfg.lambda * (epoch as f64 / cfg.ramp_epochs as f64).min(1.0)
        };
        for _ in 0..steps {
            let il = sampler.next_labeled(cfg.batch);
            let xb = x_labeled.select_rows(&il);
            let yb: Vec<i64> = il.iter().map(|&i| y_labeled[i]).collect();

            let mut tape = Tape::new();
            let xn = tape.constant(xb.clone());
            let logits = model.logits_node(&mut tape, xn, xb.rows, Some(&mut drop_rng))?;
            let ce = cross_entropy_node(&mut tape, logits, &yb, n_classes)?;
            let root = if use_consistency {
                let iu = sampler.next_unlabeled(cfg.batch);
                let xu = x_unlabeled.unwrap().select_rows(&iu);
                let un = tape.constant(xu.clone());
                let l1 = model.logits_node(&mut tape, un, xu.rows, Some(&mut drop_rng))?;
                let l2 = model.logits_node(&mut tape, un, xu.rows, Some(&mut drop_rng))?;
                let p1 = softmax_node(&mut tape, l1)?;
                let p2 = softmax_node(&mut tape, l2)?;
                let d = tape.sub(p1, p2)?;
                let sq = tape.mul(d, d)?;
                let per_ex = tape.row_sum(sq)?;
                let cons = tape.mean_all(per_ex)?;
                let weighted = tape.scale(cons, weight)?;
                tape.add(ce, weighted)?
            } else {
                ce
            };
            tape.backward(root, &mut model.params)?;
            adam_step(&mut model.params, &mut adam)?;
        }
    }
    Ok(model)
}

fn softmax_node(tape: &mut Tape, logits: usize) -> Result<usize> {
    let lse = tape.log_sum_exp_rows(logits)?;
    let neg = tape.scale(lse, -1.0)?;
    let logp = tape.add_col_vec(logits, neg)?;
    tape.exp(logp)
}

/// Supervised MLP training on labeled rows only.
pub fn mlp_train(x: &Matrix, y: &[i64], n_classes: usize, cfg: &MlpConfig) -> Result<MlpClassifier> {
    mlp_loop(x, y, None, n_classes, cfg)
}

/// Pi-model: supervised cross-entropy plus lambda times the mean squared
/// distance between two dropout-perturbed probability outputs on unlabeled
/// rows.
pub fn pi_model_train(
    x_labeled: &Matrix,
    y_labeled: &[i64],
    x_unlabeled: &Matrix,
    n_classes: usize,
    cfg: &MlpConfig,
) -> Result<MlpClassifier> {
    mlp_loop(x_labeled, y_labeled, Some(x_unlabeled), n_classes, cfg)
}

// ── Label spreading ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub enum Affinity {
    /// W_ij = exp(-gamma * sin2(x_i, x_j)).
    Rbf { gamma: f64 },
    /// Binary symmetrized k-nearest-neighbor graph under sin2 distance.
    Knn { k: usize },
}

/// Dense RBF affinity with zero diagonal.
pub fn affinity_rbf(x: &Matrix, gamma: f64) -> Result<Matrix> {
    if gamma <= 0.0 {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    let n = x.rows;
    let rows: Vec<Result<Vec<f64>>> = map_indexed(n, |i| {
        let mut row = vec![0.0; n];
        for j in 0..n {
            if j != i {
                row[j] = (-gamma * sin2_distance(x.row(i), x.row(j))?).exp();
            }
        }
        Ok(row)
    });
    let mut w = Matrix::zeros(n, n);
    for (i, r) in rows.into_iter().enumerate() {
        w.row_mut(i).copy_from_slice(&r?);
    }
    Ok(w)
}

/// Symmetrized kNN graph: W_ij = 1 if i is among the k nearest of j or vice
/// versa (sin2 distance), zero diagonal.
pub fn affinity_knn(x: &Matrix, k: usize) -> Result<Matrix> {
    let n = x.rows;
    if k == 0 || n < 2 {
        return Err(Error::invalid("need k >= 1 and at least 2 rows".to_string()));
    }
    let k = k.min(n - 1);
    let neighbor_rows: Vec<Result<Vec<usize>>> = map_indexed(n, |i| {
        let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
        for j in 0..n {
            if j != i {
                dists.push((sin2_distance(x.row(i), x.row(j))?, j));
            }
        }
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        Ok(dists.iter().take(k).map(|&(_, j)| j).collect())
    });
    let mut w = Matrix::zeros(n, n);
    for (i, r) in neighbor_rows.into_iter().enumerate() {
        for j in r? {
            w.set(i, j, 1.0);
            w.set(j, i, 1.0);
        }
    }
    Ok(w)
}

/// D^{-1/2} W D^{-1/2}; rows with zero degree stay zero.
pub fn normalize_affinity(w: &Matrix) -> Result<Matrix> {
    if w.rows != w.cols {
        return Err(Error::shape(format!("{}x{} affinity", w.rows, w.cols)));
    }
    let n = w.rows;
    let mut dinv = vec![0.0; n];
    for i in 0..n {
        let d: f64 = w.row(i).iter().sum();
        if d < 0.0 {
            return Err(Error::invalid("negative affinity entry".to_string()));
        }
        dinv[i] = if d == 0.0 { 0.0 } else { 1.0 / d.sqrt() };
    }
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s.set(i, j, dinv[i] * w.get(i, j) * dinv[j]);
        }
    }
    Ok(s)
}

/// Closed-form spreading scores: the exact fixed point of
/// Y_{t+1} = alpha S Y_t + (1-alpha) Y, i.e. (1-alpha)(I - alpha S)^{-1} Y.
/// Predictions (row argmax) are invariant to the positive (1-alpha) factor.
pub fn spread_closed_form(w: &Matrix, y: &Matrix, alpha: f64) -> Result<Matrix> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must be in [0, 1), got {alpha}")));
    }
    if w.rows != y.rows {
        return Err(Error::shape(format!("{} graph nodes vs {} label rows", w.rows, y.rows)));
    }
    let s = normalize_affinity(w)?;
    let n = s.rows;
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = if i == j { 1.0 } else { 0.0 };
            a.set(i, j, v - alpha * s.get(i, j));
        }
    }
    let mut sol = lu_solve(&a, y).map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!(
            "spreading system is singular ({msg}); try a smaller alpha"
        )),
        other => other,
    })?;
    for v in sol.data.iter_mut() {
        *v *= 1.0 - alpha;
    }
    Ok(sol)
}

/// Power iteration Y_{t+1} = alpha S Y_t + (1-alpha) Y until max-abs change
/// falls below tol or `max_iters` is reached.
pub fn spread_iterate(w: &Matrix, y: &Matrix, alpha: f64, max_iters: usize, tol: f64) -> Result<Matrix> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must be in [0, 1), got {alpha}")));
    }
    let s = normalize_affinity(w)?;
    let mut cur = y.clone();
    for _ in 0..max_iters {
        let mut next = s.matmul_nn(&cur)?;
        for (nv, yv) in next.data.iter_mut().zip(y.data.iter()) {
            *nv = alpha * *nv + (1.0 - alpha) * *yv;
        }
        let delta = next.max_abs_diff(&cur);
        cur = next;
        if delta < tol {
            break;
        }
    }
    Ok(cur)
}

/// Transductive spreading over all rows: labeled rows seed one-hot label
/// mass, everything else starts at zero. Returns the n x C score matrix.
pub fn label_spreading(
    x: &Matrix,
    y: &[i64],
    n_classes: usize,
    affinity: &Affinity,
    alpha: f64,
) -> Result<Matrix> {
    if x.rows != y.len() {
        return Err(Error::shape(format!("{} rows vs {} labels", x.rows, y.len())));
    }
    if !y.iter().any(|&v| v >= 0) {
        return Err(Error::invalid("spreading needs at least one labeled row".to_string()));
    }
    let mut seed = Matrix::zeros(x.rows, n_classes);
    for (i, &v) in y.iter().enumerate() {
        if v >= 0 {
            if v as usize >= n_classes {
                return Err(Error::invalid(format!("label {v} at row {i} out of range")));
            }
            seed.set(i, v as usize, 1.0);
        }
    }
    let w = match *affinity {
        Affinity::Rbf { gamma } => affinity_rbf(x, gamma)?,
        Affinity::Knn { k } => affinity_knn(x, k)?,
    };
    spread_closed_form(&w, &seed, alpha)
}

/// Inductive variant: run spreading on the train rows alone, then solve a
/// second system with the test rows appended as unlabeled nodes, freezing
/// the first run's scores as the label mass of the train-unlabeled rows.
pub fn label_spreading_inductive(
    train_x: &Matrix,
    train_y: &[i64],
    test_x: &Matrix,
    n_classes: usize,
    affinity: &Affinity,
    alpha: f64,
) -> Result<Matrix> {
    if test_x.cols != train_x.cols {
        return Err(Error::shape(format!(
            "test dim {} vs train dim {}",
            test_x.cols, train_x.cols
        )));
    }
    let train_scores = label_spreading(train_x, train_y, n_classes, affinity, alpha)?;
    let all_x = train_x.vstack(test_x)?;
    let mut seed = Matrix::zeros(all_x.rows, n_classes);
    for i in 0..train_x.rows {
        if train_y[i] >= 0 {
            seed.set(i, train_y[i] as usize, 1.0);
        } else {
            for c in 0..n_classes {
                seed.set(i, c, train_scores.get(i, c));
            }
        }
    }
    let w = match *affinity {
        Affinity::Rbf { gamma } => affinity_rbf(&all_x, gamma)?,
        Affinity::Knn { k } => affinity_knn(&all_x, k)?,
    };
    let scores = spread_closed_form(&w, &seed, alpha)?;
    let mut out = Matrix::zeros(test_x.rows, n_classes);
    for i in 0..test_x.rows {
        out.row_mut(i).copy_from_slice(scores.row(train_x.rows + i));
    }
    Ok(out)
}

/// Predicted class per row of a score matrix; rows that are entirely zero
/// (no signal reached the node) get class 0 by the lowest-index rule.
pub fn scores_to_labels(scores: &Matrix) -> Vec<i64> {
    (0..scores.rows).map(|i| argmax(scores.row(i)) as i64).collect()
}

/// Grid-search driver: hide the labels of `holdout` rows, spread with each
/// (affinity, alpha) candidate, score accuracy on the held-out rows, and
/// return the best combination (first on ties).
pub fn spread_grid_search(
    x: &Matrix,
    y: &[i64],
    n_classes: usize,
    holdout: &[usize],
    affinities: &[Affinity],
    alphas: &[f64],
) -> Result<(Affinity, f64, f64)> {
    if holdout.is_empty() {
        return Err(Error::invalid("grid search needs held-out labeled rows".to_string()));
    }
    let mut masked = y.to_vec();
    for &i in holdout {
        if y[i] < 0 {
            return Err(Error::invalid(format!("holdout row {i} is unlabeled")));
        }
        masked[i] = -1;
    }
    let mut best: Option<(Affinity, f64, f64)> = None;
    for aff in affinities {
        for &alpha in alphas {
            let scores = label_spreading(x, &masked, n_classes, aff, alpha)?;
            let mut correct = 0usize;
            for &i in holdout {
                if argmax(scores.row(i)) as i64 == y[i] {
                    correct += 1;
                }
            }
            let acc = correct as f64 / holdout.len() as f64;
            if best.is_none_or(|(_, _, b)| acc > b) {
                best = Some((*aff, alpha, acc));
            }
        }
    }
    Ok(best.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_per: usize, sep: f64, seed: u64) -> (Matrix, Vec<i64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut x = Matrix::zeros(2 * n_per, 2);
        let mut y = Vec::with_capacity(2 * n_per);
        for i in 0..2 * n_per {
            let c = (i % 2) as i64;
            let cx = if c == 0 { sep } else { -sep };
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e2: f64 = StandardNormal.sample(&mut rng);
            x.set(i, 0, cx + 0.3 * e1);
            x.set(i, 1, sep + 0.3 * e2);
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn sin2_basic_values() {
        assert_eq!(sin2_distance(&[1.0, 0.0], &[2.0, 0.0]).unwrap(), 0.0);
        assert!((sin2_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((sin2_distance(&[1.0, 1.0], &[-2.0, -2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(sin2_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn sin2_equals_half_squared_normalized_l2() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let a: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
            let s = sin2_distance(&a, &b).unwrap();
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let half_l2: f64 = 0.5
                * a.iter()
                    .zip(&b)
                    .map(|(&u, &v)| (u / na - v / nb).powi(2))
                    .sum::<f64>();
            assert!((s - half_l2).abs() < 1e-12, "{s} vs {half_l2}");
        }
    }

    #[test]
    fn knn_exact_match_and_blob_accuracy() {
        let (x, y) = blobs(50, 3.0, 2);
        let q = x.select_rows(&[0]);
        assert_eq!(knn_predict(&x, &y, &q, 1, Metric::L2).unwrap(), vec![y[0]]);

        for metric in [Metric::L2, Metric::Sin2] {
            let preds = knn_predict(&x, &y, &x, 5, metric).unwrap();
            let acc = preds.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64;
            assert!(acc >= 0.99, "{metric:?}: {acc}");
        }
    }

    #[test]
    fn knn_tie_breaks_by_mean_distance_then_index() {
        // k=2: one neighbor of each class; class 1's neighbor is closer.
        let x = Matrix::from_vec(2, 1, vec![0.0, 3.0]).unwrap();
        let y = vec![0, 1];
        let q = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        assert_eq!(knn_predict(&x, &y, &q, 2, Metric::L2).unwrap(), vec![1]);

        // Equidistant neighbors: lowest class index wins.
        let x = Matrix::from_vec(2, 1, vec![-1.0, 1.0]).unwrap();
        let y = vec![1, 0];
        let q = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        assert_eq!(knn_predict(&x, &y, &q, 2, Metric::L2).unwrap(), vec![0]);
    }

    #[test]
    fn knn_input_validation() {
        let x = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let q = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        assert!(knn_predict(&x, &[0, 1], &q, 0, Metric::L2).is_err());
        assert!(knn_predict(&x, &[0, 1], &q, 3, Metric::L2).is_err());
        assert!(knn_predict(&Matrix::zeros(0, 1), &[], &q, 1, Metric::L2).is_err());
    }

    #[test]
    fn logistic_separates_1d_data() {
        let x = Matrix::from_vec(4, 1, vec![-2.0, -1.0, 1.0, 2.0]).unwrap();
        let y = vec![0, 0, 1, 1];
        let model = logistic_train(&x, &y, 2, 0.1, 300).unwrap();
        assert_eq!(model.predict(&x).unwrap(), y);
    }

    #[test]
    fn logistic_symmetric_data_keeps_bias_near_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n = 40;
        let mut x = Matrix::zeros(2 * n, 2);
        let mut y = Vec::new();
        for i in 0..n {
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e2: f64 = StandardNormal.sample(&mut rng);
            let v = [1.0 + 0.2 * e1, 0.5 + 0.2 * e2];
            x.set(2 * i, 0, v[0]);
            x.set(2 * i, 1, v[1]);
            y.push(0);
            x.set(2 * i + 1, 0, -v[0]);
            x.set(2 * i + 1, 1, -v[1]);
            y.push(1);
        }
        let model = logistic_train(&x, &y, 2, 0.05, 400).unwrap();
        for b in model.bias() {
            assert!(b.abs() < 1e-3, "bias {b}");
        }
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        use crate::diff::finite_diff_grad;
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = Matrix::from_vec(6, 3, (0..18).map(|_| StandardNormal.sample(&mut rng)).collect())
            .unwrap();
        let y = vec![0, 1, 2, 0, 1, 2];
        let mut model = LinearClassifier::zeros(3, 3).unwrap();
        // Move off the zero point so the gradient is nontrivial.
        let vals: Vec<f64> = (0..model.params.n_scalars())
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                e
            })
            .collect();
        model.params.load_flat(&vals).unwrap();

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let logits = model.logits_node(&mut tape, xn).unwrap();
        let loss = cross_entropy_node(&mut tape, logits, &y, 3).unwrap();
        tape.backward(loss, &mut model.params).unwrap();
        let analytic = model.params.flat_grads();

        let w = model.w;
        let b = model.b;
        let numeric = finite_diff_grad(
            &mut model.params,
            |p| {
                let wv = param_matrix(p, w);
                let bv = param_matrix(p, b);
                let mut logits = x.matmul_nt(&wv)?;
                let mut total = 0.0;
                for i in 0..logits.rows {
                    for j in 0..logits.cols {
                        let v = logits.get(i, j) + bv.get(0, j);
                        logits.set(i, j, v);
                    }
                    let row = logits.row(i);
                    total -= row[y[i] as usize] - log_sum_exp(row);
                }
                Ok(total / logits.rows as f64)
            },
            1e-6,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn mlp_zero_weights_give_uniform_output() {
        let mut m = MlpClassifier::new(2, 8, 4, 0.0, 0).unwrap();
        let zeros = vec![0.0; m.params.n_scalars()];
        m.params.load_flat(&zeros).unwrap();
        let p = m.predict_proba(&Matrix::from_vec(1, 2, vec![3.0, -1.0]).unwrap()).unwrap();
        for j in 0..4 {
            assert!((p.get(0, j) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_fits_separable_points() {
        let (x, y) = blobs(50, 2.0, 5);
        let cfg = MlpConfig {
            hidden: 32,
            dropout: 0.0,
            lr: 1e-2,
            epochs: 60,
            batch: 100,
            seed: 1,
            lambda: 0.0,
            ramp_epochs: 0,
        };
        let model = mlp_train(&x, &y, 2, &cfg).unwrap();
        let preds = model.predict(&x).unwrap();
        let acc = preds.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64;
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn mlp_train_and_eval_modes_differ_with_dropout() {
        let m = MlpClassifier::new(2, 16, 2, 0.5, 2).unwrap();
        let x = Matrix::from_vec(4, 2, vec![0.5, 0.1, -0.4, 0.3, 0.2, -0.2, 0.0, 0.6]).unwrap();
        let eval = m.predict_proba(&x).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let train = m.predict_proba_train_mode(&x, &mut rng).unwrap();
        assert!(eval.max_abs_diff(&train) > 1e-9);
    }

    #[test]
    fn pi_model_with_zero_lambda_reduces_to_mlp() {
        let (x, y) = blobs(20, 2.0, 6);
        let xu = blobs(15, 2.0, 7).0;
        let cfg = MlpConfig {
            hidden: 16,
            dropout: 0.5,
            lr: 1e-3,
            epochs: 5,
            batch: 8,
            seed: 9,
            lambda: 0.0,
            ramp_epochs: 0,
        };
        let a = mlp_train(&x, &y, 2, &cfg).unwrap();
        let b = pi_model_train(&x, &y, &xu, 2, &cfg).unwrap();
        assert_eq!(a.params.flat_values(), b.params.flat_values());
    }

    #[test]
    fn pi_model_zero_dropout_consistency_is_inert() {
        // With p = 0 the two branches are identical, so the consistency term
        // contributes exactly zero gradient for any lambda.
        let (x, y) = blobs(20, 2.0, 8);
        let xu = blobs(15, 2.0, 9).0;
        let base = MlpConfig {
            hidden: 16,
            dropout: 0.0,
            lr: 1e-3,
            epochs: 5,
            batch: 8,
            seed: 10,
            lambda: 0.0,
            ramp_epochs: 0,
        };
        let with_cons = MlpConfig { lambda: 50.0, ..base.clone() };
        let a = pi_model_train(&x, &y, &xu, 2, &base).unwrap();
        let b = pi_model_train(&x, &y, &xu, 2, &with_cons).unwrap();
        assert_eq!(a.params.flat_values(), b.params.flat_values());
    }

    #[test]
    fn missing_class_is_rejected() {
        let x = Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        assert!(logistic_train(&x, &[0, 0, 0], 2, 0.1, 10).is_err());
        let cfg = MlpConfig { hidden: 4, epochs: 1, ..MlpConfig::default() };
        assert!(mlp_train(&x, &[0, 0, 0], 2, &cfg).is_err());
    }

    #[test]
    fn spreading_alpha_zero_returns_seed_exactly() {
        let x = Matrix::from_vec(4, 2, vec![0.9, 0.1, 1.0, 0.2, -0.8, 0.3, -1.1, 0.1]).unwrap();
        let y = vec![0, -1, 1, -1];
        let scores = label_spreading(&x, &y, 2, &Affinity::Rbf { gamma: 1.0 }, 0.0).unwrap();
        let mut seed = Matrix::zeros(4, 2);
        seed.set(0, 0, 1.0);
        seed.set(2, 1, 1.0);
        assert_eq!(scores.data, seed.data);
    }

    #[test]
    fn spreading_two_node_analytic_case() {
        // W = [[0,1],[1,0]], node 0 labeled class 0. The damped fixed point
        // gives the unlabeled node (1-a)*a/(1-a^2) = a/(1+a) mass on class 0.
        let w = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let mut y = Matrix::zeros(2, 2);
        y.set(0, 0, 1.0);
        for &alpha in &[0.05, 0.3, 0.5, 0.9, 0.99] {
            let scores = spread_closed_form(&w, &y, alpha).unwrap();
            let expect = alpha / (1.0 + alpha);
            assert!((scores.get(1, 0) - expect).abs() < 1e-12);
            assert_eq!(scores.get(1, 1), 0.0);
            assert_eq!(scores_to_labels(&scores)[1], 0);
        }
    }

    #[test]
    fn spreading_closed_form_matches_iteration() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for trial in 0..5 {
            let n = 10;
            let mut w = Matrix::zeros(n, n);
            for i in 0..n {
                for j in (i + 1)..n {
                    let v: f64 = rng.random::<f64>();
                    w.set(i, j, v);
                    w.set(j, i, v);
                }
            }
            let mut y = Matrix::zeros(n, 3);
            y.set(0, 0, 1.0);
            y.set(1, 1, 1.0);
            y.set(2, 2, 1.0);
            let alpha = 0.6;
            let closed = spread_closed_form(&w, &y, alpha).unwrap();
            let iterated = spread_iterate(&w, &y, alpha, 10_000, 1e-13).unwrap();
            assert!(
                closed.max_abs_diff(&iterated) < 1e-8,
                "trial {trial}"
            );
        }
    }

    #[test]
    fn normalized_affinity_spectral_radius_at_most_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let n = 8;
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v: f64 = rng.random::<f64>();
                w.set(i, j, v);
                w.set(j, i, v);
            }
        }
        let s = normalize_affinity(&w).unwrap();
        let mut v = Matrix::filled(n, 1, 1.0);
        let mut lambda = 0.0;
        for _ in 0..500 {
            let next = s.matmul_nn(&v).unwrap();
            let norm: f64 = next.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = norm / v.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = next;
            for x in v.data.iter_mut() {
                *x /= norm;
            }
        }
        assert!(lambda <= 1.0 + 1e-9, "spectral radius estimate {lambda}");
    }

    #[test]
    fn knn_affinity_symmetric_and_complete_at_large_k() {
        let x = Matrix::from_vec(5, 2, vec![0.9, 0.1, 1.0, 0.2, -0.8, 0.3, -1.1, 0.1, 0.5, 0.8])
            .unwrap();
        let w = affinity_knn(&x, 2).unwrap();
        for i in 0..5 {
            assert_eq!(w.get(i, i), 0.0);
            for j in 0..5 {
                assert_eq!(w.get(i, j), w.get(j, i));
            }
        }
        let complete = affinity_knn(&x, 10).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 0.0 } else { 1.0 };
                assert_eq!(complete.get(i, j), expect);
            }
        }
    }

    #[test]
    fn spreading_dense_and_knn_agree_on_blobs() {
        let (x, y) = blobs(30, 3.0, 13);
        let mut masked = y.clone();
        for (i, m) in masked.iter_mut().enumerate() {
            if i % 5 != 0 {
                *m = -1;
            }
        }
        let dense = label_spreading(&x, &masked, 2, &Affinity::Rbf { gamma: 20.0 }, 0.8).unwrap();
        let sparse = label_spreading(&x, &masked, 2, &Affinity::Knn { k: 7 }, 0.8).unwrap();
        let dl = scores_to_labels(&dense);
        let sl = scores_to_labels(&sparse);
        let agree = dl.iter().zip(&sl).filter(|(a, b)| a == b).count() as f64 / dl.len() as f64;
        assert!(agree >= 0.95, "agreement {agree}");

        let acc = dl.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / dl.len() as f64;
        assert!(acc >= 0.95, "dense accuracy {acc}");
    }

    #[test]
    fn spreading_singular_system_suggests_smaller_alpha() {
        // Two disconnected components drive I - alpha*S singular as alpha -> 1.
        let w = Matrix::from_vec(
            4,
            4,
            vec![
                0.0, 1.0, 0.0, 0.0, //
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, //
                0.0, 0.0, 1.0, 0.0,
            ],
        )
        .unwrap();
        let mut y = Matrix::zeros(4, 2);
        y.set(0, 0, 1.0);
        y.set(2, 1, 1.0);
        let err = spread_closed_form(&w, &y, 1.0 - 5e-14).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("smaller alpha"), "{msg}");
        assert!(spread_closed_form(&w, &y, 1.0).is_err());
    }

    #[test]
    fn inductive_spreading_classifies_held_out_blobs() {
        let (x, y) = blobs(25, 3.0, 14);
        let (tx, _) = blobs(5, 3.0, 15);
        let mut masked = y.clone();
        for (i, m) in masked.iter_mut().enumerate() {
            if i % 5 != 0 {
                *m = -1;
            }
        }
        let scores =
            label_spreading_inductive(&x, &masked, &tx, 2, &Affinity::Rbf { gamma: 20.0 }, 0.8)
                .unwrap();
        let preds = scores_to_labels(&scores);
        let truth: Vec<i64> = (0..10).map(|i| (i % 2) as i64).collect();
        let acc = preds.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / 10.0;
        assert!(acc >= 0.9, "inductive accuracy {acc}");
    }

    #[test]
    fn grid_search_picks_a_working_configuration() {
        let (x, y) = blobs(20, 3.0, 16);
        let mut masked = y.clone();
        for (i, m) in masked.iter_mut().enumerate() {
            if i % 4 != 0 {
                *m = -1;
            }
        }
        let holdout: Vec<usize> = (0..x.rows).filter(|i| i % 4 == 0 && i % 8 != 0).collect();
        let (aff, alpha, acc) = spread_grid_search(
            &x,
            &masked,
            2,
            &holdout,
            &[Affinity::Rbf { gamma: 1.0 }, Affinity::Rbf { gamma: 20.0 }],
            &[0.5, 0.9],
        )
        .unwrap();
        assert!(acc >= 0.9, "best acc {acc} with {aff:?} alpha {alpha}");
    }
}
