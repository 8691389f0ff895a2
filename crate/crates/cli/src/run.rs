//! Command implementations: dataset pipeline, method dispatch, and the
//! on-disk run layout `<out>/<experiment>/{config.resolved, checkpoint.bin,
//! metrics.csv, report.kv, artifacts/*}`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flowgmm_core::baselines::{
    knn_predict, label_spreading_inductive, logistic_train, mlp_train, pi_model_train,
    scores_to_labels, spread_grid_search, Affinity, MlpConfig,
};
use flowgmm_core::checkpoint::Checkpoint;
use flowgmm_core::data::{
    gen_eight_gaussians, gen_pinwheel, gen_two_circles, load_delimited, write_delimited, Dataset,
    Split,
};
use flowgmm_core::eval::{
    boundary_distance, calibrate, decision_grid, interpolate, ood_scores, MetricsReport,
};
use flowgmm_core::flow::FlowModel;
use flowgmm_core::gmm::{argmax, priors_from_labels, GaussianMixture};
use flowgmm_core::train::{train_em, train_sgd, MetricsRow, TrainConfig, TrainHistory};
use flowgmm_core::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::{
    DataSource, GeneratorKind, MeanInit, Method, PriorInit, RunConfig,
};
use crate::error::CliError;

pub type CliResult<T> = Result<T, CliError>;

/// Environment variable providing the default output root.
pub const OUT_ENV: &str = "FLOWGMM_OUT";

// Seed offsets keep every stochastic stage on an independent stream derived
// from the single run seed.
const SEED_SPLITS: u64 = 1;
const SEED_SSL: u64 = 2;
const SEED_CAP: u64 = 3;
const SEED_BALANCE: u64 = 4;
const SEED_MIXTURE: u64 = 10;
const SEED_SAMPLE: u64 = 20;

pub fn out_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

pub fn load_config(path: &Path, seed_override: Option<u64>) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_text(&text).map_err(CliError::Config)?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Experiment directory (created) plus its artifacts/ subdirectory.
fn exp_dirs(root: &Path, cfg: &RunConfig) -> CliResult<(PathBuf, PathBuf)> {
    let dir = root.join(&cfg.experiment);
    let artifacts = dir.join("artifacts");
    std::fs::create_dir_all(&artifacts).map_err(|e| CliError::io(&artifacts, e))?;
    Ok((dir, artifacts))
}

// ── Dataset pipeline ────────────────────────────────────────────────────

fn build_base(cfg: &RunConfig) -> CliResult<Dataset> {
    match &cfg.data.source {
        DataSource::Generator {
            kind,
            n,
            noise,
            classes,
            spiral,
            radial_std,
            tangential_std,
            radius,
            std,
        } => Ok(match kind {
            GeneratorKind::TwoCircles => gen_two_circles(*n, *noise, cfg.seed)?,
            GeneratorKind::Pinwheel => {
                gen_pinwheel(*n, *classes, cfg.seed, *spiral, *radial_std, *tangential_std)?
            }
            GeneratorKind::EightGaussians => gen_eight_gaussians(*n, cfg.seed, *radius, *std)?,
        }),
        DataSource::File {
            path,
            label,
            has_header,
        } => Ok(load_delimited(path, ',', Some(label), *has_header)?),
    }
}

/// Full deterministic pipeline: generate/load, balance, split, standardize,
/// reduce labels, cap the unlabeled pool.
pub fn build_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let mut ds = build_base(cfg)?;
    if cfg.data.balance {
        ds = ds.subsample_balance(cfg.seed + SEED_BALANCE)?;
    }
    ds.assign_splits(cfg.data.n_val, cfg.data.n_test, cfg.seed + SEED_SPLITS)?;
    if cfg.data.standardize {
        ds.standardize()?;
    }
    if cfg.data.labels_per_class > 0 {
        ds.make_ssl_split(cfg.data.labels_per_class, cfg.seed + SEED_SSL)?;
    }
    if cfg.data.unlabeled_cap > 0 {
        ds.cap_unlabeled(cfg.data.unlabeled_cap, cfg.seed + SEED_CAP);
    }
    Ok(ds)
}

fn split_arg(name: &str) -> CliResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(CliError::Usage(format!(
            "unknown split '{name}' (expected train, val, or test)"
        ))),
    }
}

/// Labeled rows of a split, as (features, labels); errors when empty.
fn labeled_rows(ds: &Dataset, split: Split, what: &str) -> CliResult<(Matrix, Vec<i64>)> {
    let idx: Vec<usize> = ds
        .indices(split)
        .into_iter()
        .filter(|&i| ds.y[i] >= 0)
        .collect();
    if idx.is_empty() {
        return Err(CliError::Usage(format!("{what}: no labeled rows in the requested split")));
    }
    Ok(ds.rows(&idx))
}

// ── Report helpers ──────────────────────────────────────────────────────

/// Accuracy-style report for methods that output hard labels only.
fn label_report(pred: &[i64], truth: &[i64], n_classes: usize) -> String {
    let n = truth.len();
    let mut correct = 0usize;
    let mut class_total = vec![0usize; n_classes];
    let mut class_hit = vec![0usize; n_classes];
    for (p, t) in pred.iter().zip(truth) {
        let k = *t as usize;
        class_total[k] += 1;
        if p == t {
            correct += 1;
            class_hit[k] += 1;
        }
    }
    let acc = correct as f64 / n as f64;
    let per: Vec<String> = (0..n_classes)
        .map(|k| {
            let a = if class_total[k] == 0 {
                f64::NAN
            } else {
                class_hit[k] as f64 / class_total[k] as f64
            };
            format!("{a}")
        })
        .collect();
    let counts: Vec<String> = class_total.iter().map(|c| format!("{c}")).collect();
    format!(
        "n = {n}\naccuracy = {acc}\nper_class_accuracy = {}\ncounts = {}\n",
        per.join(", "),
        counts.join(", ")
    )
}

fn single_row_history(train_nll: f64, val_nll: f64, val_acc: f64) -> TrainHistory {
    TrainHistory {
        rows: vec![MetricsRow {
            epoch: 0,
            train_nll,
            val_nll,
            val_acc,
            consistency_weight: 0.0,
        }],
    }
}

fn accuracy_of(pred: &[i64], truth: &[i64]) -> f64 {
    let hit = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hit as f64 / truth.len() as f64
}

/// Mean cross-entropy of predicted probabilities against labels.
fn mean_ce(probs: &Matrix, y: &[i64]) -> f64 {
    let mut s = 0.0;
    for (i, &t) in y.iter().enumerate() {
        s -= probs.get(i, t as usize).max(1e-300).ln();
    }
    s / y.len() as f64
}

// ── gen ─────────────────────────────────────────────────────────────────

pub fn cmd_gen(cfg: &RunConfig, out_file: &Path) -> CliResult<()> {
    if matches!(cfg.data.source, DataSource::File { .. }) {
        return Err(CliError::Usage(
            "gen writes generator output; the config names data.file instead".to_string(),
        ));
    }
    let ds = build_base(cfg)?;
    if let Some(dir) = out_file.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    write_delimited(&ds, out_file, ',')?;
    println!("wrote {} rows to {}", ds.n(), out_file.display());
    for (k, c) in ds.class_counts().iter().enumerate() {
        println!("class {} ({}): {c} rows", k, ds.label_names[k]);
    }
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

pub struct FlowRun {
    pub model: FlowModel,
    pub mixture: GaussianMixture,
    pub history: TrainHistory,
}

pub fn train_flow(cfg: &RunConfig, ds: &Dataset) -> CliResult<FlowRun> {
    let dim = ds.dim();
    let c = ds.n_classes;
    let mut model = FlowModel::new(dim, cfg.model.layers, cfg.model.hidden, cfg.seed)?;

    let lab = ds.labeled_train();
    let (x_lab, y_lab) = ds.rows(&lab);
    let mut mixture = match cfg.model.mean_init {
        MeanInit::Random => {
            let mut m = GaussianMixture::init_random(dim, c, cfg.seed + SEED_MIXTURE)?;
            // mean_scale spreads the standard-normal means apart; component
            // variance stays 1, so scale > 1 reduces initial class overlap.
            for v in m.means.data.iter_mut() {
                *v *= cfg.model.mean_scale;
            }
            m
        }
        MeanInit::Data => {
            if lab.is_empty() {
                return Err(CliError::Usage(
                    "data-dependent mean initialization needs labeled train rows".to_string(),
                ));
            }
            let fwd = model.forward(&x_lab)?;
            GaussianMixture::init_data_dependent(&fwd.z, &y_lab, c, cfg.model.mean_scale)?
        }
    };
    if cfg.model.priors == PriorInit::Empirical {
        let priors = priors_from_labels(&y_lab, c)?;
        mixture.set_priors(&priors)?;
    }

    let tc = TrainConfig {
        lr: cfg.train.lr,
        epochs: cfg.train.epochs,
        batch_labeled: cfg.train.batch_labeled,
        batch_unlabeled: cfg.train.batch_unlabeled,
        lambda_l: cfg.train.lambda_l,
        lambda_c: cfg.train.lambda_c,
        ramp_epochs: cfg.train.ramp_epochs,
        cons_scale: cfg.train.cons_scale,
        use_consistency: cfg.method == Method::FlowGmmCons,
        seed: cfg.seed,
        eval_every: cfg.train.eval_every,
        count_epochs_by_unlabeled: cfg.train.epochs_by_unlabeled,
    };

    let history = match cfg.method {
        Method::FlowGmmEm => train_em(&mut model, &mixture, ds, &tc)?,
        Method::FlowGmmSup => {
            // Supervised variant: drop the unlabeled pool entirely.
            let keep: Vec<usize> = (0..ds.n())
                .filter(|&i| !(ds.split[i] == Split::Train && ds.y[i] < 0))
                .collect();
            let sup = ds.select(&keep);
            train_sgd(&mut model, &mixture, &sup, &tc)?
        }
        _ => train_sgd(&mut model, &mixture, ds, &tc)?,
    };
    Ok(FlowRun {
        model,
        mixture,
        history,
    })
}

/// Train per the config, write the run directory, and return the test
/// accuracy.
pub fn cmd_train(cfg: &RunConfig, root: &Path) -> CliResult<f64> {
    let (dir, _artifacts) = exp_dirs(root, cfg)?;
    let ds = build_dataset(cfg)?;
    write_atomic(&dir.join("config.resolved"), cfg.to_resolved_text().as_bytes())?;

    let (x_test, y_test) = labeled_rows(&ds, Split::Test, "train")?;
    let (report, history);

    if cfg.method.is_flow() {
        let run = train_flow(cfg, &ds)?;
        let fwd = run.model.forward(&x_test)?;
        let probs = run.mixture.predictive_batch(&fwd.z)?;
        report = MetricsReport::from_probs(&probs, &y_test)?.to_kv();
        history = run.history;
        let ckpt = Checkpoint {
            model: run.model,
            mixture: run.mixture,
            label_names: ds.label_names.clone(),
            standardization: ds.standardization.clone(),
        };
        ckpt.save(&dir.join("checkpoint.bin"))?;
    } else {
        let (rep, hist) = train_baseline(cfg, &ds, &x_test, &y_test)?;
        report = rep;
        history = hist;
    }

    write_atomic(&dir.join("metrics.csv"), history.to_csv().as_bytes())?;
    write_atomic(&dir.join("report.kv"), report.as_bytes())?;

    let acc = report
        .lines()
        .find_map(|l| l.strip_prefix("accuracy = "))
        .and_then(|v| v.parse::<f64>().ok())
        .unwrap_or(f64::NAN);
    println!("experiment {} ({})", cfg.experiment, cfg.method.name());
    if let Some(v) = history.final_val_acc() {
        println!("final val accuracy = {v}");
    }
    println!("test accuracy = {acc}");
    println!("run directory: {}", dir.display());
    Ok(acc)
}

fn train_baseline(
    cfg: &RunConfig,
    ds: &Dataset,
    x_test: &Matrix,
    y_test: &[i64],
) -> CliResult<(String, TrainHistory)> {
    let c = ds.n_classes;
    let lab = ds.labeled_train();
    if lab.is_empty() {
        return Err(CliError::Usage("no labeled train rows".to_string()));
    }
    let (x_lab, y_lab) = ds.rows(&lab);
    let val = labeled_rows(ds, Split::Val, "train").ok();

    match cfg.method {
        Method::Knn => {
            let pred = knn_predict(&x_lab, &y_lab, x_test, cfg.knn.k, cfg.knn.metric)?;
            let val_acc = match &val {
                Some((xv, yv)) => {
                    accuracy_of(&knn_predict(&x_lab, &y_lab, xv, cfg.knn.k, cfg.knn.metric)?, yv)
                }
                None => f64::NAN,
            };
            Ok((
                label_report(&pred, y_test, c),
                single_row_history(f64::NAN, f64::NAN, val_acc),
            ))
        }
        Method::LogReg => {
            let clf = logistic_train(&x_lab, &y_lab, c, cfg.logreg.lr, cfg.logreg.epochs)?;
            let probs = clf.predict_proba(x_test)?;
            let train_nll = mean_ce(&clf.predict_proba(&x_lab)?, &y_lab);
            let (val_nll, val_acc) = match &val {
                Some((xv, yv)) => {
                    let pv = clf.predict_proba(xv)?;
                    (mean_ce(&pv, yv), accuracy_of(&clf.predict(xv)?, yv))
                }
                None => (f64::NAN, f64::NAN),
            };
            Ok((
                MetricsReport::from_probs(&probs, y_test)?.to_kv(),
                single_row_history(train_nll, val_nll, val_acc),
            ))
        }
        Method::Mlp | Method::PiModel => {
            let mc = MlpConfig {
                hidden: cfg.mlp.hidden,
                dropout: cfg.mlp.dropout,
                lr: cfg.mlp.lr,
                epochs: cfg.mlp.epochs,
                batch: cfg.mlp.batch,
                seed: cfg.seed,
                lambda: cfg.pi.lambda,
                ramp_epochs: cfg.pi.ramp_epochs,
            };
            let clf = if cfg.method == Method::Mlp {
                mlp_train(&x_lab, &y_lab, c, &mc)?
            } else {
                let unl = ds.unlabeled_train();
                let (x_unl, _) = ds.rows(&unl);
                pi_model_train(&x_lab, &y_lab, &x_unl, c, &mc)?
            };
            let probs = clf.predict_proba(x_test)?;
            let train_nll = mean_ce(&clf.predict_proba(&x_lab)?, &y_lab);
            let (val_nll, val_acc) = match &val {
                Some((xv, yv)) => {
                    let pv = clf.predict_proba(xv)?;
                    (mean_ce(&pv, yv), accuracy_of(&clf.predict(xv)?, yv))
                }
                None => (f64::NAN, f64::NAN),
            };
            Ok((
                MetricsReport::from_probs(&probs, y_test)?.to_kv(),
                single_row_history(train_nll, val_nll, val_acc),
            ))
        }
        Method::SpreadRbf | Method::SpreadKnn => train_spreading(cfg, ds, x_test, y_test),
        _ => unreachable!("flow methods handled by the caller"),
    }
}

fn train_spreading(
    cfg: &RunConfig,
    ds: &Dataset,
    x_test: &Matrix,
    y_test: &[i64],
) -> CliResult<(String, TrainHistory)> {
    let c = ds.n_classes;
    // Pool train and validation rows; validation labels double as the
    // grid-search holdout and as extra seeds for the final solve.
    let mut pool: Vec<usize> = ds.indices(Split::Train);
    let val_idx: Vec<usize> = ds
        .indices(Split::Val)
        .into_iter()
        .filter(|&i| ds.y[i] >= 0)
        .collect();
    let holdout: Vec<usize> = (pool.len()..pool.len() + val_idx.len()).collect();
    pool.extend(&val_idx);
    let (x_pool, y_pool) = ds.rows(&pool);

    let (affinity, alpha) = if cfg.spread.grid {
        if holdout.is_empty() {
            return Err(CliError::Usage(
                "spread.grid needs labeled validation rows as the holdout".to_string(),
            ));
        }
        let affs: Vec<Affinity> = match cfg.method {
            Method::SpreadRbf => cfg
                .spread
                .gammas
                .iter()
                .map(|&g| Affinity::Rbf { gamma: g })
                .collect(),
            _ => cfg.spread.ks.iter().map(|&k| Affinity::Knn { k }).collect(),
        };
        let (aff, alpha, acc) =
            spread_grid_search(&x_pool, &y_pool, c, &holdout, &affs, &cfg.spread.alphas)?;
        println!("grid search picked {aff:?}, alpha = {alpha} (holdout accuracy {acc})");
        (aff, alpha)
    } else {
        let aff = match cfg.method {
            Method::SpreadRbf => Affinity::Rbf {
                gamma: cfg.spread.gamma,
            },
            _ => Affinity::Knn { k: cfg.spread.k },
        };
        (aff, cfg.spread.alpha)
    };

    let scores = label_spreading_inductive(&x_pool, &y_pool, x_test, c, &affinity, alpha)?;
    let pred = scores_to_labels(&scores);

    // Transductive holdout accuracy doubles as the val metric.
    let val_acc = if holdout.is_empty() {
        f64::NAN
    } else {
        let mut masked = y_pool.clone();
        for &i in &holdout {
            masked[i] = -1;
        }
        let tr = flowgmm_core::baselines::label_spreading(&x_pool, &masked, c, &affinity, alpha)?;
        let hit = holdout
            .iter()
            .filter(|&&i| argmax(tr.row(i)) as i64 == y_pool[i])
            .count();
        hit as f64 / holdout.len() as f64
    };

    Ok((
        label_report(&pred, y_test, c),
        single_row_history(f64::NAN, f64::NAN, val_acc),
    ))
}

// ── Post-train commands ─────────────────────────────────────────────────

fn load_run(cfg: &RunConfig, root: &Path) -> CliResult<(PathBuf, PathBuf, Dataset, Checkpoint)> {
    if !cfg.method.is_flow() {
        return Err(CliError::Usage(format!(
            "method {} does not produce a checkpoint; this command needs a flow run",
            cfg.method.name()
        )));
    }
    let (dir, artifacts) = exp_dirs(root, cfg)?;
    let path = dir.join("checkpoint.bin");
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "no checkpoint at {} (run `flowgmm train` first)",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(&path)?;
    let ds = build_dataset(cfg)?;
    if ds.dim() != ckpt.model.dim {
        return Err(CliError::Usage(format!(
            "checkpoint expects {}-dimensional inputs, dataset has {}",
            ckpt.model.dim,
            ds.dim()
        )));
    }
    if ds.n_classes != ckpt.mixture.n_classes() {
        return Err(CliError::Usage(format!(
            "checkpoint has {} classes, dataset has {}",
            ckpt.mixture.n_classes(),
            ds.n_classes
        )));
    }
    Ok((dir, artifacts, ds, ckpt))
}

pub fn cmd_eval(cfg: &RunConfig, root: &Path, split: &str) -> CliResult<()> {
    let sp = split_arg(split)?;
    let (_dir, artifacts, ds, ckpt) = load_run(cfg, root)?;
    let (x, y) = labeled_rows(&ds, sp, "eval")?;
    let fwd = ckpt.model.forward(&x)?;
    let probs = ckpt.mixture.predictive_batch(&fwd.z)?;
    let report = MetricsReport::from_probs(&probs, &y)?;
    let text = format!("split = {split}\n{}", report.to_kv());
    write_atomic(&artifacts.join(format!("eval-{split}.kv")), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

pub fn cmd_calibrate(cfg: &RunConfig, root: &Path) -> CliResult<()> {
    let (dir, artifacts, ds, mut ckpt) = load_run(cfg, root)?;
    let (x_val, y_val) = labeled_rows(&ds, Split::Val, "calibrate")?;
    let outcome = calibrate(&ckpt.model, &mut ckpt.mixture, &x_val, &y_val)?;
    let mut text = String::new();
    let _ = writeln!(text, "sigma2 = {}", outcome.sigma2);
    let _ = writeln!(text, "before.nll = {}", outcome.before.mean_nll);
    let _ = writeln!(text, "before.ece = {}", outcome.before.ece);
    let _ = writeln!(text, "before.accuracy = {}", outcome.before.accuracy);
    let _ = writeln!(text, "after.nll = {}", outcome.after.mean_nll);
    let _ = writeln!(text, "after.ece = {}", outcome.after.ece);
    let _ = writeln!(text, "after.accuracy = {}", outcome.after.accuracy);
    write_atomic(&artifacts.join("calibration.kv"), text.as_bytes())?;
    // Persist the recalibrated variance for later eval/sample runs.
    ckpt.save(&dir.join("checkpoint.bin"))?;
    print!("{text}");
    Ok(())
}

pub fn cmd_sample(
    cfg: &RunConfig,
    root: &Path,
    class: usize,
    n: usize,
    temperature: f64,
) -> CliResult<()> {
    if n == 0 {
        return Err(CliError::Usage("need n >= 1 samples".to_string()));
    }
    let (_dir, artifacts, _ds, ckpt) = load_run(cfg, root)?;
    if class >= ckpt.mixture.n_classes() {
        return Err(CliError::Usage(format!(
            "class {class} out of range for {} classes",
            ckpt.mixture.n_classes()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed + SEED_SAMPLE);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        rows.push(ckpt.mixture.sample_class(class, temperature, &mut rng)?);
    }
    let z = Matrix::from_rows(&rows)?;
    let (x, _) = ckpt.model.inverse(&z)?;
    // Samples are reported in the original data units.
    let x = match &ckpt.standardization {
        Some(st) => {
            let mut raw = x.clone();
            for i in 0..raw.rows {
                let row = raw.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = *v * st.std[j] + st.mean[j];
                }
            }
            raw
        }
        None => x,
    };
    let mut out = String::new();
    for i in 0..x.rows {
        let vals: Vec<String> = x.row(i).iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{},{}", vals.join(","), ckpt.label_names[class]);
    }
    let path = artifacts.join(format!("samples-class{class}.csv"));
    write_atomic(&path, out.as_bytes())?;
    println!(
        "wrote {n} samples of class {class} (temperature {temperature}) to {}",
        path.display()
    );
    Ok(())
}

pub fn cmd_interpolate(
    cfg: &RunConfig,
    root: &Path,
    a: usize,
    b: usize,
    steps: usize,
) -> CliResult<()> {
    let (_dir, artifacts, ds, ckpt) = load_run(cfg, root)?;
    let test = ds.indices(Split::Test);
    for (name, i) in [("a", a), ("b", b)] {
        if i >= test.len() {
            return Err(CliError::Usage(format!(
                "--{name} {i} out of range: the test split has {} rows",
                test.len()
            )));
        }
    }
    let x1 = ds.x.row(test[a]).to_vec();
    let x2 = ds.x.row(test[b]).to_vec();
    let path_points = interpolate(&ckpt.model, &ckpt.mixture, &x1, &x2, steps)?;
    let mut out = String::new();
    let dim = ds.dim();
    let cols: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
    let _ = writeln!(out, "t,{},log_px,log_pz", cols.join(","));
    for p in &path_points {
        let vals: Vec<String> = p.x.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{},{},{},{}", p.t, vals.join(","), p.log_px, p.log_pz);
    }
    let path = artifacts.join("interpolation.csv");
    write_atomic(&path, out.as_bytes())?;
    println!(
        "wrote {steps}-step interpolation between test rows {a} and {b} to {}",
        path.display()
    );
    Ok(())
}

pub fn cmd_distances(cfg: &RunConfig, root: &Path, split: &str) -> CliResult<()> {
    let sp = split_arg(split)?;
    let (_dir, artifacts, ds, ckpt) = load_run(cfg, root)?;
    let idx = ds.indices(sp);
    if idx.is_empty() {
        return Err(CliError::Usage(format!("no rows in the {split} split")));
    }
    let (x, _) = ds.rows(&idx);
    let records = boundary_distance(&ckpt.model, &ckpt.mixture, &x)?;
    let mut out = String::from("distance,nearest,second\n");
    for r in &records {
        let _ = writeln!(out, "{},{},{}", r.distance, r.nearest, r.second);
    }
    let path = artifacts.join(format!("boundary_distances-{split}.csv"));
    write_atomic(&path, out.as_bytes())?;
    let mut d: Vec<f64> = records.iter().map(|r| r.distance).collect();
    d.sort_by(|a, b| a.total_cmp(b));
    let median = d[d.len() / 2];
    println!("median boundary distance over {} rows = {median}", d.len());
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_ood(cfg: &RunConfig, root: &Path, data: Option<&Path>) -> CliResult<()> {
    let (_dir, artifacts, ds, ckpt) = load_run(cfg, root)?;
    let (x, tag) = match data {
        Some(path) => {
            // External rows are scored as-is apart from the stored
            // standardization.
            let ext = load_delimited(path, ',', None, false)?;
            let x = match &ckpt.standardization {
                Some(st) => st.apply(&ext.x)?,
                None => ext.x,
            };
            (x, "external".to_string())
        }
        None => {
            let idx = ds.indices(Split::Test);
            (ds.x.select_rows(&idx), "test".to_string())
        }
    };
    if x.cols != ckpt.model.dim {
        return Err(CliError::Usage(format!(
            "checkpoint expects {}-dimensional inputs, data has {}",
            ckpt.model.dim, x.cols
        )));
    }
    let scores = ood_scores(&ckpt.model, &ckpt.mixture, &x)?;
    let mut out = String::from("log_px\n");
    for s in &scores {
        let _ = writeln!(out, "{s}");
    }
    let path = artifacts.join(format!("ood_scores-{tag}.csv"));
    write_atomic(&path, out.as_bytes())?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    println!("mean log-likelihood over {} {tag} rows = {mean}", scores.len());
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_grid(cfg: &RunConfig, root: &Path, resolution: usize, pad: f64) -> CliResult<()> {
    let (_dir, artifacts, ds, ckpt) = load_run(cfg, root)?;
    if ds.dim() != 2 {
        return Err(CliError::Usage(format!(
            "decision grids need 2-D data, got {} dimensions",
            ds.dim()
        )));
    }
    let mut bounds = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..ds.n() {
        bounds.0 = bounds.0.min(ds.x.get(i, 0));
        bounds.1 = bounds.1.max(ds.x.get(i, 0));
        bounds.2 = bounds.2.min(ds.x.get(i, 1));
        bounds.3 = bounds.3.max(ds.x.get(i, 1));
    }
    let bounds = (bounds.0 - pad, bounds.1 + pad, bounds.2 - pad, bounds.3 + pad);
    let (points, probs) = decision_grid(&ckpt.model, &ckpt.mixture, bounds, resolution)?;
    let mut out = String::from("x0,x1");
    for k in 0..probs.cols {
        let _ = write!(out, ",p{k}");
    }
    out.push('\n');
    for i in 0..points.rows {
        let _ = write!(out, "{},{}", points.get(i, 0), points.get(i, 1));
        for k in 0..probs.cols {
            let _ = write!(out, ",{}", probs.get(i, k));
        }
        out.push('\n');
    }
    let path = artifacts.join("decision_grid.csv");
    write_atomic(&path, out.as_bytes())?;
    println!("wrote {resolution}x{resolution} decision grid to {}", path.display());
    Ok(())
}
