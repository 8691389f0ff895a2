//! Run configuration: a flat `key = value` text format with `#` comments.
//! Parsing is strict: unknown keys, duplicates, and type errors are
//! collected and reported all at once. `to_resolved_text` writes back every
//! effective value so a run can be reproduced from its own output.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use flowgmm_core::baselines::Metric;
use flowgmm_core::data::LabelColumn;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    FlowGmm,
    FlowGmmCons,
    FlowGmmEm,
    FlowGmmSup,
    Knn,
    LogReg,
    Mlp,
    PiModel,
    SpreadRbf,
    SpreadKnn,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        Some(match s {
            "flowgmm" => Method::FlowGmm,
            "flowgmm-cons" => Method::FlowGmmCons,
            "flowgmm-em" => Method::FlowGmmEm,
            "flowgmm-sup" => Method::FlowGmmSup,
            "knn" => Method::Knn,
            "logreg" => Method::LogReg,
            "mlp" => Method::Mlp,
            "pi-model" => Method::PiModel,
            "spread-rbf" => Method::SpreadRbf,
            "spread-knn" => Method::SpreadKnn,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::FlowGmm => "flowgmm",
            Method::FlowGmmCons => "flowgmm-cons",
            Method::FlowGmmEm => "flowgmm-em",
            Method::FlowGmmSup => "flowgmm-sup",
            Method::Knn => "knn",
            Method::LogReg => "logreg",
            Method::Mlp => "mlp",
            Method::PiModel => "pi-model",
            Method::SpreadRbf => "spread-rbf",
            Method::SpreadKnn => "spread-knn",
        }
    }

    pub fn is_flow(&self) -> bool {
        matches!(
            self,
            Method::FlowGmm | Method::FlowGmmCons | Method::FlowGmmEm | Method::FlowGmmSup
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    TwoCircles,
    Pinwheel,
    EightGaussians,
}

impl GeneratorKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "two-circles" => GeneratorKind::TwoCircles,
            "pinwheel" => GeneratorKind::Pinwheel,
            "eight-gaussians" => GeneratorKind::EightGaussians,
            _ => return None,
        })
    }

    fn name(&self) -> &'static str {
        match self {
            GeneratorKind::TwoCircles => "two-circles",
            GeneratorKind::Pinwheel => "pinwheel",
            GeneratorKind::EightGaussians => "eight-gaussians",
        }
    }
}

#[derive(Clone, Debug)]
pub enum DataSource {
    Generator {
        kind: GeneratorKind,
        n: usize,
        /// two-circles radial noise.
        noise: f64,
        /// pinwheel arm count.
        classes: usize,
        /// pinwheel spiral rate.
        spiral: f64,
        radial_std: f64,
        tangential_std: f64,
        /// eight-gaussians ring radius and component std.
        radius: f64,
        std: f64,
    },
    File {
        path: PathBuf,
        label: LabelColumn,
        has_header: bool,
    },
}

#[derive(Clone, Debug)]
pub struct DataConfig {
    pub source: DataSource,
    pub standardize: bool,
    pub n_val: usize,
    pub n_test: usize,
    /// Labeled examples kept per class; 0 keeps every label.
    pub labels_per_class: usize,
    /// Cap on unlabeled train rows; 0 means no cap.
    pub unlabeled_cap: usize,
    pub balance: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeanInit {
    Random,
    Data,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorInit {
    Uniform,
    Empirical,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub mean_init: MeanInit,
    /// Scale applied to data-dependent means.
    pub mean_scale: f64,
    pub priors: PriorInit,
}

#[derive(Clone, Debug)]
pub struct TrainKeys {
    pub lr: f64,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lambda_l: f64,
    pub lambda_c: f64,
    pub ramp_epochs: usize,
    pub cons_scale: f64,
    pub eval_every: usize,
    pub epochs_by_unlabeled: bool,
}

#[derive(Clone, Debug)]
pub struct KnnKeys {
    pub k: usize,
    pub metric: Metric,
}

#[derive(Clone, Debug)]
pub struct LogRegKeys {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug)]
pub struct MlpKeys {
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct PiKeys {
    pub lambda: f64,
    pub ramp_epochs: usize,
}

#[derive(Clone, Debug)]
pub struct SpreadKeys {
    pub gamma: f64,
    pub k: usize,
    pub alpha: f64,
    /// Run the (gamma or k) x alpha grid-search driver on held-out labeled
    /// validation rows before the final solve.
    pub grid: bool,
    pub gammas: Vec<f64>,
    pub ks: Vec<usize>,
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub experiment: String,
    pub method: Method,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainKeys,
    pub knn: KnnKeys,
    pub logreg: LogRegKeys,
    pub mlp: MlpKeys,
    pub pi: PiKeys,
    pub spread: SpreadKeys,
}

const KNOWN_KEYS: &[&str] = &[
    "experiment",
    "method",
    "seed",
    "data.generator",
    "data.file",
    "data.label_index",
    "data.label_name",
    "data.has_header",
    "data.n",
    "data.noise",
    "data.classes",
    "data.spiral",
    "data.radial_std",
    "data.tangential_std",
    "data.radius",
    "data.std",
    "data.standardize",
    "data.n_val",
    "data.n_test",
    "data.labels_per_class",
    "data.unlabeled_cap",
    "data.balance",
    "model.layers",
    "model.hidden",
    "model.mean_init",
    "model.mean_scale",
    "model.priors",
    "train.lr",
    "train.epochs",
    "train.batch_labeled",
    "train.batch_unlabeled",
    "train.lambda_l",
    "train.lambda_c",
    "train.ramp_epochs",
    "train.cons_scale",
    "train.eval_every",
    "train.epochs_by_unlabeled",
    "knn.k",
    "knn.metric",
    "logreg.lr",
    "logreg.epochs",
    "mlp.hidden",
    "mlp.dropout",
    "mlp.lr",
    "mlp.epochs",
    "mlp.batch",
    "pi.lambda",
    "pi.ramp_epochs",
    "spread.gamma",
    "spread.k",
    "spread.alpha",
    "spread.grid",
    "spread.gammas",
    "spread.ks",
    "spread.alphas",
];

/// Key/value pairs in file order with their line numbers.
pub struct RawConfig {
    pairs: Vec<(String, String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig, Vec<String>> {
        let mut pairs = Vec::new();
        let mut errors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            match trimmed.split_once('=') {
                Some((k, v)) => {
                    let key = k.trim().to_string();
                    let mut value = v.trim();
                    // Allow trailing comments after the value.
                    if let Some(idx) = value.find('#') {
                        value = value[..idx].trim_end();
                    }
                    if key.is_empty() {
                        errors.push(format!("line {line_no}: missing key before '='"));
                    } else {
                        pairs.push((key, value.to_string(), line_no));
                    }
                }
                None => errors.push(format!(
                    "line {line_no}: expected 'key = value', got '{trimmed}'"
                )),
            }
        }
        if errors.is_empty() {
            Ok(RawConfig { pairs })
        } else {
            Err(errors)
        }
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
    }
}

struct Checker<'a> {
    raw: &'a RawConfig,
    errors: Vec<String>,
}

impl<'a> Checker<'a> {
    fn parse_with<T>(&mut self, key: &str, default: T, what: &str, f: impl Fn(&str) -> Option<T>) -> T {
        match self.raw.get(key) {
            None => default,
            Some(v) => match f(v) {
                Some(t) => t,
                None => {
                    self.errors.push(format!("{key}: expected {what}, got '{v}'"));
                    default
                }
            },
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> usize {
        self.parse_with(key, default, "a nonnegative integer", |v| v.parse().ok())
    }

    fn u64(&mut self, key: &str, default: u64) -> u64 {
        self.parse_with(key, default, "a nonnegative integer", |v| v.parse().ok())
    }

    fn f64(&mut self, key: &str, default: f64) -> f64 {
        self.parse_with(key, default, "a number", |v| v.parse().ok())
    }

    fn bool(&mut self, key: &str, default: bool) -> bool {
        self.parse_with(key, default, "true or false", |v| match v {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })
    }

    fn f64_list(&mut self, key: &str, default: &[f64]) -> Vec<f64> {
        self.parse_with(key, default.to_vec(), "comma-separated numbers", |v| {
            v.split(',').map(|s| s.trim().parse().ok()).collect()
        })
    }

    fn usize_list(&mut self, key: &str, default: &[usize]) -> Vec<usize> {
        self.parse_with(key, default.to_vec(), "comma-separated integers", |v| {
            v.split(',').map(|s| s.trim().parse().ok()).collect()
        })
    }
}

impl RunConfig {
    /// Resolve a raw config against defaults, collecting every problem.
    pub fn resolve(raw: &RawConfig) -> Result<RunConfig, Vec<String>> {
        let mut errors: Vec<String> = Vec::new();

        // Duplicates.
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for (k, _, line) in &raw.pairs {
            if !seen.insert(k.as_str()) {
                errors.push(format!("line {line}: duplicate key '{k}'"));
            }
        }
        // Unknown keys.
        for (k, _, line) in &raw.pairs {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                errors.push(format!("line {line}: unknown key '{k}'"));
            }
        }

        let mut c = Checker { raw, errors };

        let experiment = match raw.get("experiment") {
            Some(v) if !v.is_empty() => v.to_string(),
            _ => {
                c.errors.push("experiment: required key is missing".to_string());
                String::new()
            }
        };
        let method = match raw.get("method") {
            None => {
                c.errors.push("method: required key is missing".to_string());
                Method::FlowGmm
            }
            Some(v) => Method::parse(v).unwrap_or_else(|| {
                c.errors.push(format!(
                    "method: '{v}' is not one of flowgmm, flowgmm-cons, flowgmm-em, \
                     flowgmm-sup, knn, logreg, mlp, pi-model, spread-rbf, spread-knn"
                ));
                Method::FlowGmm
            }),
        };
        let seed = c.u64("seed", 0);

        let generator = raw.get("data.generator");
        let file = raw.get("data.file");
        let from_file = file.is_some();
        let source = match (generator, file) {
            (Some(_), Some(_)) => {
                c.errors
                    .push("data.generator and data.file are mutually exclusive".to_string());
                None
            }
            (None, None) => {
                c.errors
                    .push("one of data.generator or data.file is required".to_string());
                None
            }
            (Some(g), None) => {
                let kind = GeneratorKind::parse(g).unwrap_or_else(|| {
                    c.errors.push(format!(
                        "data.generator: '{g}' is not one of two-circles, pinwheel, \
                         eight-gaussians"
                    ));
                    GeneratorKind::TwoCircles
                });
                for key in ["data.label_index", "data.label_name", "data.has_header"] {
                    if raw.get(key).is_some() {
                        c.errors
                            .push(format!("{key} only applies to data.file sources"));
                    }
                }
                Some(DataSource::Generator {
                    kind,
                    n: c.usize("data.n", 1000),
                    noise: c.f64("data.noise", 0.08),
                    classes: c.usize("data.classes", 5),
                    spiral: c.f64("data.spiral", 0.3),
                    radial_std: c.f64("data.radial_std", 0.3),
                    tangential_std: c.f64("data.tangential_std", 0.1),
                    radius: c.f64("data.radius", 4.0),
                    std: c.f64("data.std", 0.4),
                })
            }
            (None, Some(f)) => {
                let label_index = raw.get("data.label_index");
                let label_name = raw.get("data.label_name");
                let label = match (label_index, label_name) {
                    (Some(_), Some(_)) => {
                        c.errors.push(
                            "data.label_index and data.label_name are mutually exclusive"
                                .to_string(),
                        );
                        LabelColumn::Last
                    }
                    (Some(_), None) => LabelColumn::Index(c.usize("data.label_index", 0)),
                    (None, Some(name)) => LabelColumn::Name(name.to_string()),
                    (None, None) => LabelColumn::Last,
                };
                Some(DataSource::File {
                    path: PathBuf::from(f),
                    label,
                    has_header: c.bool("data.has_header", false),
                })
            }
        };

        let data = DataConfig {
            source: source.unwrap_or(DataSource::Generator {
                kind: GeneratorKind::TwoCircles,
                n: 1000,
                noise: 0.08,
                classes: 5,
                spiral: 0.3,
                radial_std: 0.3,
                tangential_std: 0.1,
                radius: 4.0,
                std: 0.4,
            }),
            standardize: c.bool("data.standardize", from_file),
            n_val: c.usize("data.n_val", 50),
            n_test: c.usize("data.n_test", 100),
            labels_per_class: c.usize("data.labels_per_class", 0),
            unlabeled_cap: c.usize("data.unlabeled_cap", 0),
            balance: c.bool("data.balance", false),
        };

        // Flow architecture defaults follow the data source: wide and
        // shallower for 2-D synthetics, deeper and narrower for tabular
        // files.
        let model = ModelConfig {
            layers: c.usize("model.layers", if from_file { 7 } else { 5 }),
            hidden: c.usize("model.hidden", if from_file { 256 } else { 512 }),
            mean_init: c.parse_with("model.mean_init", MeanInit::Random, "random or data", |v| {
                match v {
                    "random" => Some(MeanInit::Random),
                    "data" => Some(MeanInit::Data),
                    _ => None,
                }
            }),
            mean_scale: c.f64("model.mean_scale", 1.0),
            priors: c.parse_with(
                "model.priors",
                PriorInit::Uniform,
                "uniform or empirical",
                |v| match v {
                    "uniform" => Some(PriorInit::Uniform),
                    "empirical" => Some(PriorInit::Empirical),
                    _ => None,
                },
            ),
        };

        let train = TrainKeys {
            lr: c.f64("train.lr", 1e-3),
            epochs: c.usize("train.epochs", 100),
            batch_labeled: c.usize("train.batch_labeled", 32),
            batch_unlabeled: c.usize("train.batch_unlabeled", 32),
            lambda_l: c.f64("train.lambda_l", 1.0),
            lambda_c: c.f64("train.lambda_c", 1.0),
            ramp_epochs: c.usize("train.ramp_epochs", 100),
            cons_scale: c.f64("train.cons_scale", 0.05),
            eval_every: c.usize("train.eval_every", 1),
            epochs_by_unlabeled: c.bool("train.epochs_by_unlabeled", from_file),
        };

        let knn = KnnKeys {
            k: c.usize("knn.k", 5),
            metric: c.parse_with("knn.metric", Metric::L2, "l2 or sin2", |v| match v {
                "l2" => Some(Metric::L2),
                "sin2" => Some(Metric::Sin2),
                _ => None,
            }),
        };
        let logreg = LogRegKeys {
            lr: c.f64("logreg.lr", 3e-4),
            epochs: c.usize("logreg.epochs", 500),
        };
        let mlp = MlpKeys {
            hidden: c.usize("mlp.hidden", 512),
            dropout: c.f64("mlp.dropout", 0.5),
            lr: c.f64("mlp.lr", 3e-4),
            epochs: c.usize("mlp.epochs", 100),
            batch: c.usize("mlp.batch", 32),
        };
        let pi = PiKeys {
            lambda: c.f64("pi.lambda", 30.0),
            ramp_epochs: c.usize("pi.ramp_epochs", 0),
        };
        let spread = SpreadKeys {
            gamma: c.f64("spread.gamma", 20.0),
            k: c.usize("spread.k", 7),
            alpha: c.f64("spread.alpha", 0.9),
            grid: c.bool("spread.grid", false),
            gammas: c.f64_list("spread.gammas", &[1.0, 5.0, 20.0, 50.0]),
            ks: c.usize_list("spread.ks", &[3, 7, 15]),
            alphas: c.f64_list("spread.alphas", &[0.5, 0.9, 0.99]),
        };

        let mut errors = c.errors;
        if data.n_val == 0 && method.is_flow() {
            errors.push("data.n_val: flow methods need a validation split".to_string());
        }
        if errors.is_empty() {
            Ok(RunConfig {
                experiment,
                method,
                seed,
                data,
                model,
                train,
                knn,
                logreg,
                mlp,
                pi,
                spread,
            })
        } else {
            Err(errors)
        }
    }

    pub fn from_text(text: &str) -> Result<RunConfig, Vec<String>> {
        RunConfig::resolve(&RawConfig::parse(text)?)
    }

    /// Every effective key written back out; parsing this text reproduces
    /// the configuration exactly.
    pub fn to_resolved_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment = {}", self.experiment);
        let _ = writeln!(s, "method = {}", self.method.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        match &self.data.source {
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
            } => {
                let _ = writeln!(s, "data.generator = {}", kind.name());
                let _ = writeln!(s, "data.n = {n}");
                match kind {
                    GeneratorKind::TwoCircles => {
                        let _ = writeln!(s, "data.noise = {noise}");
                    }
                    GeneratorKind::Pinwheel => {
                        let _ = writeln!(s, "data.classes = {classes}");
                        let _ = writeln!(s, "data.spiral = {spiral}");
                        let _ = writeln!(s, "data.radial_std = {radial_std}");
                        let _ = writeln!(s, "data.tangential_std = {tangential_std}");
                    }
                    GeneratorKind::EightGaussians => {
                        let _ = writeln!(s, "data.radius = {radius}");
                        let _ = writeln!(s, "data.std = {std}");
                    }
                }
            }
            DataSource::File {
                path,
                label,
                has_header,
            } => {
                let _ = writeln!(s, "data.file = {}", path.display());
                match label {
                    LabelColumn::Index(i) => {
                        let _ = writeln!(s, "data.label_index = {i}");
                    }
                    LabelColumn::Name(n) => {
                        let _ = writeln!(s, "data.label_name = {n}");
                    }
                    LabelColumn::Last => {}
                }
                let _ = writeln!(s, "data.has_header = {has_header}");
            }
        }
        let _ = writeln!(s, "data.standardize = {}", self.data.standardize);
        let _ = writeln!(s, "data.n_val = {}", self.data.n_val);
        let _ = writeln!(s, "data.n_test = {}", self.data.n_test);
        let _ = writeln!(s, "data.labels_per_class = {}", self.data.labels_per_class);
        let _ = writeln!(s, "data.unlabeled_cap = {}", self.data.unlabeled_cap);
        let _ = writeln!(s, "data.balance = {}", self.data.balance);

        if self.method.is_flow() {
            let _ = writeln!(s, "model.layers = {}", self.model.layers);
            let _ = writeln!(s, "model.hidden = {}", self.model.hidden);
            let mi = match self.model.mean_init {
                MeanInit::Random => "random",
                MeanInit::Data => "data",
            };
            let _ = writeln!(s, "model.mean_init = {mi}");
            let _ = writeln!(s, "model.mean_scale = {}", self.model.mean_scale);
            let pr = match self.model.priors {
                PriorInit::Uniform => "uniform",
                PriorInit::Empirical => "empirical",
            };
            let _ = writeln!(s, "model.priors = {pr}");
            let _ = writeln!(s, "train.lr = {}", self.train.lr);
            let _ = writeln!(s, "train.epochs = {}", self.train.epochs);
            let _ = writeln!(s, "train.batch_labeled = {}", self.train.batch_labeled);
            let _ = writeln!(s, "train.batch_unlabeled = {}", self.train.batch_unlabeled);
            let _ = writeln!(s, "train.lambda_l = {}", self.train.lambda_l);
            let _ = writeln!(s, "train.lambda_c = {}", self.train.lambda_c);
            let _ = writeln!(s, "train.ramp_epochs = {}", self.train.ramp_epochs);
            let _ = writeln!(s, "train.cons_scale = {}", self.train.cons_scale);
            let _ = writeln!(s, "train.eval_every = {}", self.train.eval_every);
            let _ = writeln!(
                s,
                "train.epochs_by_unlabeled = {}",
                self.train.epochs_by_unlabeled
            );
        }
        match self.method {
            Method::Knn => {
                let _ = writeln!(s, "knn.k = {}", self.knn.k);
                let m = match self.knn.metric {
                    Metric::L2 => "l2",
                    Metric::Sin2 => "sin2",
                };
                let _ = writeln!(s, "knn.metric = {m}");
            }
            Method::LogReg => {
                let _ = writeln!(s, "logreg.lr = {}", self.logreg.lr);
                let _ = writeln!(s, "logreg.epochs = {}", self.logreg.epochs);
            }
            Method::Mlp | Method::PiModel => {
                let _ = writeln!(s, "mlp.hidden = {}", self.mlp.hidden);
                let _ = writeln!(s, "mlp.dropout = {}", self.mlp.dropout);
                let _ = writeln!(s, "mlp.lr = {}", self.mlp.lr);
                let _ = writeln!(s, "mlp.epochs = {}", self.mlp.epochs);
                let _ = writeln!(s, "mlp.batch = {}", self.mlp.batch);
                if self.method == Method::PiModel {
                    let _ = writeln!(s, "pi.lambda = {}", self.pi.lambda);
                    let _ = writeln!(s, "pi.ramp_epochs = {}", self.pi.ramp_epochs);
                }
            }
            Method::SpreadRbf | Method::SpreadKnn => {
                let _ = writeln!(s, "spread.gamma = {}", self.spread.gamma);
                let _ = writeln!(s, "spread.k = {}", self.spread.k);
                let _ = writeln!(s, "spread.alpha = {}", self.spread.alpha);
                let _ = writeln!(s, "spread.grid = {}", self.spread.grid);
                let join_f = |v: &[f64]| {
                    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
                };
                let join_u = |v: &[usize]| {
                    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
                };
                let _ = writeln!(s, "spread.gammas = {}", join_f(&self.spread.gammas));
                let _ = writeln!(s, "spread.ks = {}", join_u(&self.spread.ks));
                let _ = writeln!(s, "spread.alphas = {}", join_f(&self.spread.alphas));
            }
            _ => {}
        }
        s
    }
}
