//! Command-line front end: JSON experiment configs, subcommand dispatch,
//! atomic artifact writes and process exit codes.
//!
//! Relative paths inside a config resolve against the config file's
//! directory. `POISONLAB_SEED` overrides the master seed and the attack seed.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attack::{
    frank_wolfe_attack, gradient_canceling, gradient_matching, grid_points, poison_count, AttackOptions,
    AttackResult, FwDomain, FwStep, PoisonLabel,
};
use crate::data::{gen_gauss_classification, gen_gauss_regression, gen_or, load_mnist, split, toy_three_point, Dataset, Labels};
use crate::defense::{dpa_evaluate, dpa_train, sever_filter, DEFAULT_SEVER_ROUNDS};
use crate::error::{Error, Result};
use crate::harness::{
    curves_csv, fmt_f64, learning_curves, retrain_and_eval, sweep_csv, sweep_heatmap, trace_csv, train, EpsMode,
    SweepSettings, TrainOptions,
};
use crate::models::{accuracy, mean_loss, Block, Family, ModelSpec, Params, DEFAULT_LEAKY_SLOPE};
use crate::reachability::tau_threshold;
use crate::targetgen::{grad_ascent_corrupt, random_corrupt, scale_params, select_target, Provenance, TargetCandidate};

pub const SEED_ENV: &str = "POISONLAB_SEED";

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Or {
        #[serde(default = "default_reps")]
        reps: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Toy,
    GaussClassification { n: usize, dim: usize, sep: f64 },
    GaussRegression { n: usize, w_true: Vec<f64>, noise: f64 },
    Mnist {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<BTreeSet<usize>>,
    },
    /// Dataset JSON files as written by `gen-data`.
    File {
        train: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<PathBuf>,
    },
}

fn default_reps() -> usize {
    50
}

fn default_noise() -> f64 {
    0.1
}

fn default_test_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub train_seed: u64,
    #[serde(default = "default_test_seed")]
    pub test_seed: u64,
    /// Share of the training set held out for target validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    LeastSquares,
    #[default]
    Logistic,
    Softmax {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
    },
    Mlp1 {
        hidden: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        leaky_slope: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSource {
    File { path: PathBuf },
    Values { values: Vec<f64> },
    /// Corrupts the model trained on the clean data.
    GradAscent {
        eps_w: f64,
        #[serde(default = "default_ascent_steps")]
        steps: usize,
    },
    Random { eps_w: f64 },
    Scaled { base: Box<TargetSource>, s: f64 },
    /// `(w1, w2, fixed…)` over a `steps × steps` grid, `w1` major.
    Grid {
        w1: (f64, f64),
        w2: (f64, f64),
        steps: usize,
        #[serde(default)]
        fixed: Vec<f64>,
    },
}

fn default_ascent_steps() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FwConfig {
    pub iters: usize,
    pub per_dim: usize,
    pub step: FwStep,
    /// Grid box; defaults to the clean feature range.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<(f64, f64)>>,
    /// Regression label levels; defaults to 11 values over the clean range.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_levels: Option<usize>,
}

impl Default for FwConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            per_dim: 21,
            step: FwStep::LineSearch,
            bounds: None,
            label_levels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub name: String,
    pub options: AttackOptions,
    pub fw: FwConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            name: "gc".into(),
            options: AttackOptions::default(),
            fw: FwConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    GradientCanceling,
    GradientMatching,
    FrankWolfe,
}

const ATTACK_NAMES: &[(&str, AttackKind)] = &[
    ("gc", AttackKind::GradientCanceling),
    ("gradient_canceling", AttackKind::GradientCanceling),
    ("gm", AttackKind::GradientMatching),
    ("gradient_matching", AttackKind::GradientMatching),
    ("fw", AttackKind::FrankWolfe),
    ("frank_wolfe", AttackKind::FrankWolfe),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub name: String,
    /// Sever removal share; defaults to the poison fraction `ε/(1+ε)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// DPA partition count.
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_rounds() -> usize {
    DEFAULT_SEVER_ROUNDS
}

fn default_k() -> usize {
    10
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefenseKind {
    Sever,
    Dpa,
}

const DEFENSE_NAMES: &[(&str, DefenseKind)] = &[("sever", DefenseKind::Sever), ("dpa", DefenseKind::Dpa)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsSpec {
    One(f64),
    Many(Vec<f64>),
}

impl EpsSpec {
    pub fn values(&self) -> Vec<f64> {
        match self {
            EpsSpec::One(v) => vec![*v],
            EpsSpec::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    #[default]
    Heatmap,
    Curves,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poison: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub json: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetSource>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<TargetSource>,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_d: Option<EpsSpec>,
    #[serde(default)]
    pub eps_mode: EpsMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub defenses: Vec<DefenseConfig>,
    #[serde(default)]
    pub train: TrainOptions,
    #[serde(default)]
    pub sweep: SweepMode,
    #[serde(default)]
    pub seed: u64,
    /// Class count used for τ; the model's own when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_convention: Option<usize>,
    /// Poison dataset for `retrain`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poison: Option<PathBuf>,
    #[serde(default)]
    pub output: OutputPaths,
}

impl ExperimentConfig {
    pub fn minimal(source: DataSource) -> Self {
        Self {
            data: DataConfig {
                source,
                train_seed: 0,
                test_seed: default_test_seed(),
                val_fraction: None,
            },
            model: ModelConfig::default(),
            target: None,
            targets: Vec::new(),
            attack: AttackConfig::default(),
            eps_d: None,
            eps_mode: EpsMode::default(),
            defenses: Vec::new(),
            train: TrainOptions::default(),
            sweep: SweepMode::default(),
            seed: 0,
            c_convention: None,
            poison: None,
            output: OutputPaths::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Budget list; every entry must be positive.
    pub fn eps_list(&self) -> Result<Vec<f64>> {
        let v = self
            .eps_d
            .as_ref()
            .ok_or_else(|| Error::Config("eps_d is required".into()))?
            .values();
        if v.is_empty() || v.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("eps_d entries must be positive, got {v:?}")));
        }
        Ok(v)
    }

    /// Checks names, budgets and file references against `base`.
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.eps_d.is_some() {
            self.eps_list()?;
        }
        attack_kind(&self.attack.name)?;
        self.attack.options.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        for d in &self.defenses {
            defense_kind(&d.name)?;
        }
        if let Some(f) = self.data.val_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
            }
        }
        let mut files: Vec<&Path> = Vec::new();
        match &self.data.source {
            DataSource::Mnist { dir, .. } => files.push(dir),
            DataSource::File { train, test } => {
                files.push(train);
                files.extend(test.as_deref());
            }
            _ => {}
        }
        fn target_files<'a>(t: &'a TargetSource, out: &mut Vec<&'a Path>) {
            match t {
                TargetSource::File { path } => out.push(path),
                TargetSource::Scaled { base, .. } => target_files(base, out),
                _ => {}
            }
        }
        for t in self.target.iter().chain(&self.targets) {
            target_files(t, &mut files);
        }
        files.extend(self.poison.as_deref());
        for f in files {
            let p = base.join(f);
            if !p.exists() {
                return Err(Error::Config(format!("referenced path {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// A parsed config plus the directory its relative paths hang off.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub cfg: ExperimentConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg = ExperimentConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { cfg, base })
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }
}

// ---------------------------------------------------------------------------
// Parameter files
// ---------------------------------------------------------------------------

/// On-disk parameters: block shapes plus the flat values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    pub blocks: Vec<Block>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl ParamFile {
    pub fn from_params(spec: &ModelSpec, p: &Params) -> Self {
        Self {
            model: Some(*spec),
            blocks: p.blocks.clone(),
            values: p.values.clone(),
            provenance: None,
            eps_w: None,
            tau: None,
        }
    }

    pub fn from_candidate(spec: &ModelSpec, c: &TargetCandidate) -> Self {
        Self {
            provenance: Some(c.provenance),
            eps_w: Some(c.eps_w),
            tau: c.tau,
            ..Self::from_params(spec, &c.params)
        }
    }

    /// Parameters laid out for `spec`; shapes must agree.
    pub fn to_params(&self, spec: &ModelSpec) -> Result<Params> {
        if self.blocks != spec.blocks() {
            return Err(Error::Shape(format!(
                "parameter file blocks {:?} do not match the model's {:?}",
                self.blocks,
                spec.blocks()
            )));
        }
        spec.params(self.values.clone())
    }
}

pub fn read_params(path: &Path, spec: &ModelSpec) -> Result<Params> {
    let pf: ParamFile = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Shape(format!("{}: {e}", path.display())))?;
    pf.to_params(spec)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let ds: Dataset = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Shape(format!("{}: {e}", path.display())))?;
    Dataset::new(ds.x, ds.labels, ds.task, ds.domain_box)
}

/// Writes through a temporary file in the destination directory, then
/// renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

// ---------------------------------------------------------------------------
// Names and suggestions
// ---------------------------------------------------------------------------

fn suggest(name: &str, known: &[&str]) -> String {
    let close: Vec<&str> = known
        .iter()
        .copied()
        .filter(|k| strsim::levenshtein(name, k) <= 2 || k.starts_with(name))
        .collect();
    let mut msg = format!("expected one of: {}", known.join(", "));
    if let Some(best) = close.iter().min_by_key(|k| strsim::levenshtein(name, k)) {
        let _ = write!(msg, "; did you mean `{best}`?");
    }
    msg
}

fn lookup<T: Copy>(what: &str, name: &str, table: &[(&str, T)]) -> Result<T> {
    let key = name.trim().to_ascii_lowercase().replace('-', "_");
    table
        .iter()
        .find(|(n, _)| *n == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let known: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown {what} `{name}`: {}", suggest(&key, &known)))
        })
}

pub fn attack_kind(name: &str) -> Result<AttackKind> {
    lookup("attack", name, ATTACK_NAMES)
}

pub fn defense_kind(name: &str) -> Result<DefenseKind> {
    lookup("defense", name, DEFENSE_NAMES)
}

const DATA_NAMES: &[(&str, u8)] = &[("or", 0), ("toy", 1), ("gauss", 2), ("gauss_regression", 3)];

/// Built-in dataset by short name.
pub fn data_by_name(name: &str) -> Result<DataSource> {
    Ok(match lookup("dataset", name, DATA_NAMES)? {
        0 => DataSource::Or {
            reps: default_reps(),
            noise: default_noise(),
        },
        1 => DataSource::Toy,
        2 => DataSource::GaussClassification { n: 400, dim: 10, sep: 2.0 },
        _ => DataSource::GaussRegression {
            n: 200,
            w_true: vec![1.0, -1.0],
            noise: 0.1,
        },
    })
}

const MODEL_NAMES: &[(&str, u8)] = &[("least_squares", 0), ("logistic", 1), ("softmax", 2)];

/// Model by short name (`mlp1` needs a config for its width).
pub fn model_by_name(name: &str) -> Result<ModelConfig> {
    Ok(match lookup("model", name, MODEL_NAMES)? {
        0 => ModelConfig::LeastSquares,
        1 => ModelConfig::Logistic,
        _ => ModelConfig::Softmax { classes: None },
    })
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

/// Train/test data, with validation carved from train when requested.
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
    pub val: Option<Dataset>,
}

pub fn load_data(l: &Loaded) -> Result<Data> {
    let c = &l.cfg.data;
    let (train, test) = match &c.source {
        DataSource::Or { reps, noise } => (gen_or(c.train_seed, *reps, *noise)?, gen_or(c.test_seed, *reps, *noise)?),
        DataSource::Toy => (toy_three_point(), toy_three_point()),
        DataSource::GaussClassification { n, dim, sep } => (
            gen_gauss_classification(c.train_seed, *n, *dim, *sep)?,
            gen_gauss_classification(c.test_seed, *n, *dim, *sep)?,
        ),
        DataSource::GaussRegression { n, w_true, noise } => (
            gen_gauss_regression(c.train_seed, *n, w_true, *noise)?,
            gen_gauss_regression(c.test_seed, *n, w_true, *noise)?,
        ),
        DataSource::Mnist { dir, classes } => load_mnist(l.path(dir), classes.as_ref())?,
        DataSource::File { train, test } => {
            let tr = read_dataset(&l.path(train))?;
            let te = match test {
                Some(t) => read_dataset(&l.path(t))?,
                None => tr.clone(),
            };
            (tr, te)
        }
    };
    match c.val_fraction {
        Some(f) => {
            let (tr, val) = split(&train, 1.0 - f, c.train_seed)?;
            Ok(Data {
                train: tr,
                test,
                val: Some(val),
            })
        }
        None => Ok(Data { train, test, val: None }),
    }
}

pub fn model_spec(m: &ModelConfig, ds: &Dataset) -> Result<ModelSpec> {
    let d = ds.dim();
    let data_classes = ds.classes();
    let need = |c: Option<usize>| {
        c.or(data_classes)
            .ok_or_else(|| Error::Config("classifier on a dataset without classes".into()))
    };
    let spec = match m {
        ModelConfig::LeastSquares => ModelSpec::least_squares(d),
        ModelConfig::Logistic => ModelSpec::logistic(d),
        ModelConfig::Softmax { classes } => ModelSpec::softmax(d, need(*classes)?)?,
        ModelConfig::Mlp1 {
            hidden,
            classes,
            leaky_slope,
        } => ModelSpec::new(
            Family::Mlp1 {
                hidden: *hidden,
                leaky_slope: leaky_slope.unwrap_or(DEFAULT_LEAKY_SLOPE),
                classes: need(*classes)?,
            },
            d,
        )?,
    };
    spec.check_dataset(ds)?;
    Ok(spec)
}

/// Everything a pipeline needs, resolved once.
pub struct Context {
    pub loaded: Loaded,
    pub data: Data,
    pub spec: ModelSpec,
    clean_params: Option<Params>,
}

impl Context {
    pub fn new(loaded: Loaded) -> Result<Self> {
        loaded.cfg.validate(&loaded.base)?;
        let data = load_data(&loaded)?;
        let spec = model_spec(&loaded.cfg.model, &data.train)?;
        Ok(Self {
            loaded,
            data,
            spec,
            clean_params: None,
        })
    }

    fn cfg(&self) -> &ExperimentConfig {
        &self.loaded.cfg
    }

    /// Model trained on the clean training set with the config seed.
    pub fn clean_params(&mut self) -> Result<Params> {
        if self.clean_params.is_none() {
            self.clean_params = Some(train(&self.spec, &self.data.train, &self.loaded.cfg.train, self.loaded.cfg.seed)?);
        }
        Ok(self.clean_params.clone().expect("set above"))
    }

    pub fn resolve(&mut self, src: &TargetSource) -> Result<Vec<TargetCandidate>> {
        let seed = self.cfg().seed;
        Ok(match src {
            TargetSource::File { path } => {
                let p = read_params(&self.loaded.path(path), &self.spec)?;
                vec![TargetCandidate::external(p)]
            }
            TargetSource::Values { values } => vec![TargetCandidate::external(self.spec.params(values.clone())?)],
            TargetSource::GradAscent { eps_w, steps } => {
                let w0 = self.clean_params()?;
                vec![grad_ascent_corrupt(&self.data.train, &self.spec, &w0, *eps_w, *steps, seed)?]
            }
            TargetSource::Random { eps_w } => {
                let w0 = self.clean_params()?;
                vec![random_corrupt(&w0, *eps_w, seed)?]
            }
            TargetSource::Scaled { base, s } => self
                .resolve(base)?
                .into_iter()
                .map(|c| {
                    Ok(TargetCandidate {
                        params: scale_params(&self.spec, &c.params, *s)?,
                        eps_w: (s - 1.0).abs(),
                        provenance: Provenance::Scaled,
                        tau: None,
                    })
                })
                .collect::<Result<_>>()?,
            TargetSource::Grid { w1, w2, steps, fixed } => {
                if *steps < 1 {
                    return Err(Error::Config("grid needs ≥ 1 step".into()));
                }
                let at = |(lo, hi): (f64, f64), i: usize| {
                    if *steps == 1 {
                        lo
                    } else {
                        lo + (hi - lo) * i as f64 / (*steps - 1) as f64
                    }
                };
                let mut out = Vec::with_capacity(steps * steps);
                for i in 0..*steps {
                    for j in 0..*steps {
                        let mut v = vec![at(*w1, i), at(*w2, j)];
                        v.extend(fixed);
                        out.push(TargetCandidate::external(self.spec.params(v)?));
                    }
                }
                out
            }
        })
    }

    /// All configured targets (`targets`, else `target`), expanded.
    pub fn targets(&mut self) -> Result<Vec<TargetCandidate>> {
        let srcs: Vec<TargetSource> = if self.cfg().targets.is_empty() {
            self.cfg().target.iter().cloned().collect()
        } else {
            self.cfg().targets.clone()
        };
        if srcs.is_empty() {
            return Err(Error::Config("no target configured".into()));
        }
        let mut out = Vec::new();
        for s in &srcs {
            out.extend(self.resolve(s)?);
        }
        out.into_iter().map(|c| c.with_tau(&self.spec, &self.data.train)).collect()
    }

    pub fn single_target(&mut self) -> Result<TargetCandidate> {
        let mut t = self.targets()?;
        if t.len() != 1 {
            return Err(Error::Config(format!("expected one target, the config yields {}", t.len())));
        }
        Ok(t.remove(0))
    }

    fn tau(&self, p: &Params) -> Result<f64> {
        if self.spec.is_classifier() {
            Ok(tau_threshold(&self.spec, p, &self.data.train, self.cfg().c_convention)?.tau)
        } else {
            Ok(0.0)
        }
    }

    /// Absolute budgets for `target`.
    pub fn budgets(&self, target: &Params) -> Result<Vec<f64>> {
        let list = self.cfg().eps_list()?;
        Ok(match self.cfg().eps_mode {
            EpsMode::Absolute => list,
            EpsMode::RelativeToTau => {
                let tau = self.tau(target)?;
                list.iter().map(|e| e * tau).collect()
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

fn fw_domain(ctx: &Context, fw: &FwConfig) -> Result<FwDomain> {
    let clean = &ctx.data.train;
    let bounds = fw.bounds.clone().unwrap_or_else(|| clean.feature_range());
    let points = grid_points(&bounds, fw.per_dim)?;
    let labels = match &clean.labels {
        Labels::Real(y) => {
            let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let k = fw.label_levels.unwrap_or(11).max(2);
            (0..k)
                .map(|i| PoisonLabel::Value(lo + (hi - lo) * i as f64 / (k - 1) as f64))
                .collect()
        }
        _ => (0..ctx.spec.classes().unwrap_or(2)).map(PoisonLabel::Class).collect(),
    };
    Ok(FwDomain::Grid { points, labels })
}

/// Runs the configured attack; Frank-Wolfe output is rounded to a uniform
/// poison set of `round(n·ε)` points.
pub fn run_attack(ctx: &Context, target: &Params, eps: f64, opts: &AttackOptions) -> Result<AttackResult> {
    let clean = &ctx.data.train;
    match attack_kind(&ctx.cfg().attack.name)? {
        AttackKind::GradientCanceling => gradient_canceling(clean, &ctx.spec, target, eps, opts),
        AttackKind::GradientMatching => gradient_matching(clean, &ctx.spec, target, eps, opts),
        AttackKind::FrankWolfe => {
            let fw = &ctx.cfg().attack.fw;
            let res = frank_wolfe_attack(clean, &ctx.spec, target, eps, &fw_domain(ctx, fw)?, fw.iters, fw.step)?;
            let m = poison_count(clean.len(), eps).max(1);
            let poison = res.to_dataset(m, clean.task, clean.domain_box.clone())?;
            let scale = 1.0 / (1.0 + eps);
            let grads: Vec<f64> = res.objective_trace.iter().map(|o| (2.0 * o).sqrt() * scale).collect();
            let last = res.objective_trace.last().copied().unwrap_or(f64::NAN);
            Ok(AttackResult {
                poison,
                initial_merit: res.objective_trace.first().copied().unwrap_or(f64::NAN),
                final_merit: last,
                final_grad_norm: (2.0 * last).sqrt() * scale,
                merit_trace: res.objective_trace,
                grad_norm_trace: grads,
                retained: None,
                audit_drift: None,
            })
        }
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn out_path(flag: &Option<PathBuf>, cfg_path: &Option<PathBuf>, l: &Loaded) -> Option<PathBuf> {
    flag.clone().or_else(|| cfg_path.as_ref().map(|p| l.path(p)))
}

#[derive(Serialize)]
struct DataSummary {
    train: usize,
    test: usize,
    val: Option<usize>,
    dim: usize,
}

fn cmd_gen_data(ctx: &Context, out: &Option<PathBuf>) -> Result<()> {
    let l = &ctx.loaded;
    if let Some(p) = out_path(out, &l.cfg.output.data, l) {
        write_json(&p, &ctx.data.train)?;
    }
    if let Some(p) = l.cfg.output.test.as_ref().map(|p| l.path(p)) {
        write_json(&p, &ctx.data.test)?;
    }
    print_json(&DataSummary {
        train: ctx.data.train.len(),
        test: ctx.data.test.len(),
        val: ctx.data.val.as_ref().map(Dataset::len),
        dim: ctx.data.train.dim(),
    })
}

#[derive(Serialize)]
struct TrainSummary {
    train_loss: f64,
    test_loss: f64,
    train_acc: Option<f64>,
    test_acc: Option<f64>,
}

fn cmd_train(ctx: &mut Context, out: &Option<PathBuf>) -> Result<()> {
    let w = ctx.clean_params()?;
    let l = &ctx.loaded;
    if let Some(p) = out_path(out, &l.cfg.output.params, l) {
        write_json(&p, &ParamFile::from_params(&ctx.spec, &w))?;
    }
    let acc = |ds: &Dataset| ctx.spec.is_classifier().then(|| accuracy(&ctx.spec, &w, ds)).transpose();
    print_json(&TrainSummary {
        train_loss: mean_loss(&ctx.spec, &w, &ctx.data.train)?,
        test_loss: mean_loss(&ctx.spec, &w, &ctx.data.test)?,
        train_acc: acc(&ctx.data.train)?,
        test_acc: acc(&ctx.data.test)?,
    })
}

fn cmd_threshold(ctx: &mut Context, out: &Option<PathBuf>) -> Result<()> {
    let t = ctx.single_target()?;
    let rep = tau_threshold(&ctx.spec, &t.params, &ctx.data.train, ctx.cfg().c_convention)?;
    let l = &ctx.loaded;
    if let Some(p) = out_path(out, &l.cfg.output.json, l) {
        write_json(&p, &rep)?;
    }
    print_json(&rep)
}

fn cmd_make_target(ctx: &mut Context, out: &Option<PathBuf>) -> Result<()> {
    let targets = ctx.targets()?;
    let files: Vec<ParamFile> = targets.iter().map(|c| ParamFile::from_candidate(&ctx.spec, c)).collect();
    let l = &ctx.loaded;
    if let Some(p) = out_path(out, &l.cfg.output.params, l) {
        match files.as_slice() {
            [one] => write_json(&p, one)?,
            many => write_json(&p, &many)?,
        }
    }
    print_json(&files)
}

fn cmd_select_target(ctx: &mut Context, out: &Option<PathBuf>) -> Result<()> {
    let candidates = ctx.targets()?;
    let eps = ctx.cfg().eps_list()?[0];
    let val = ctx.data.val.as_ref().unwrap_or(&ctx.data.train);
    let sel = select_target(&candidates, eps, &ctx.data.train, val, &ctx.spec, &ctx.cfg().attack.options)?;
    let l = &ctx.loaded;
    if let Some(p) = out_path(out, &l.cfg.output.params, l) {
        write_json(&p, &ParamFile::from_candidate(&ctx.spec, &sel.chosen))?;
    }
    if let Some(p) = l.cfg.output.json.as_ref().map(|p| l.path(p)) {
        write_json(&p, &sel)?;
    }
    print_json(&sel)
}

#[derive(Serialize)]
struct AttackSummary {
    attack: String,
    eps_d: f64,
    tau: Option<f64>,
    poison_count: usize,
    initial_merit: f64,
    final_merit: f64,
    final_grad_norm: f64,
}

fn cmd_attack(ctx: &mut Context, out: &Option<PathBuf>) -> Result<()> {
    let t = ctx.single_target()?;
    let eps = ctx.budgets(&t.params)?[0];
    let res = run_attack(ctx, &t.params, eps, &ctx.cfg().attack.options)?;
    let l = &ctx.loaded;
    if let Some(p) = out_path(out, &l.cfg.output.poison, l) {
        write_json(&p, &res.poison)?;
    }
    if let Some(p) = l.cfg.output.trace.as_ref().map(|p| l.path(p)) {
        write_atomic(&p, trace_csv(&res).as_bytes())?;
    }
    print_json(&AttackSummary {
        attack: l.cfg.attack.name.clone(),
        eps_d: eps,
        tau: t.tau,
        poison_count: res.poison.len(),
        initial_merit: res.initial_merit,
        final_merit: res.final_merit,
        final_grad_norm: res.final_grad_norm,
    })
}

fn cmd_retrain(ctx: &mut Context, poison_flag: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<()> {
    let t = ctx.single_target()?;
    let l = &ctx.loaded;
    let path = poison_flag
        .clone()
        .or_else(|| l.cfg.poison.as_ref().map(|p| l.path(p)))
        .ok_or_else(|| Error::Config("retrain needs a poison dataset (`poison` or --poison)".into()))?;
    let poison = read_dataset(&path)?;
    let rep = retrain_and_eval(&ctx.data.train, &poison, &ctx.data.test, &ctx.spec, &t.params, &l.cfg.train, l.cfg.seed)?;
    if let Some(p) = out_path(out, &l.cfg.output.json, l) {
        write_json(&p, &rep)?;
    }
    print_json(&rep)
}

/// The sweep a config describes, as library settings.
pub fn sweep_settings(cfg: &ExperimentConfig) -> Result<SweepSettings> {
    Ok(SweepSettings {
        eps_list: cfg.eps_list()?,
        eps_mode: cfg.eps_mode,
        attack: cfg.attack.options.clone(),
        train: cfg.train.clone(),
        seed: cfg.seed,
        c_convention: cfg.c_convention,
    })
}

/// Runs the `sweep` pipeline and returns the CSV text.
pub fn sweep_table(ctx: &mut Context) -> Result<String> {
    if attack_kind(&ctx.cfg().attack.name)? != AttackKind::GradientCanceling {
        return Err(Error::Config("sweeps run gradient canceling; set attack.name to `gc`".into()));
    }
    let targets: Vec<Params> = ctx.targets()?.into_iter().map(|c| c.params).collect();
    match ctx.cfg().sweep {
        SweepMode::Heatmap => {
            let rows = sweep_heatmap(&ctx.data.train, &ctx.data.test, &ctx.spec, &targets, &sweep_settings(ctx.cfg())?)?;
            Ok(sweep_csv(&rows))
        }
        SweepMode::Curves => {
            let mut settings = Vec::new();
            for (i, t) in targets.iter().enumerate() {
                for eps in ctx.budgets(t)? {
                    settings.push((format!("t{i}_eps{eps}"), t.clone(), eps));
                }
            }
            let rows = learning_curves(&ctx.data.train, &ctx.spec, &settings, &ctx.cfg().attack.options)?;
            Ok(curves_csv(&rows))
        }
    }
}

fn cmd_sweep(ctx: &mut Context, out: &Option<PathBuf>) -> Result<()> {
    let csv = sweep_table(ctx)?;
    let l = &ctx.loaded;
    match out_path(out, &l.cfg.output.csv, l) {
        Some(p) => write_atomic(&p, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// One line of the defense grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub eps_d: f64,
    pub defense: String,
    pub clean_acc: f64,
    pub undefended_acc: f64,
    pub defended_acc: f64,
    pub undefended_drop: f64,
    pub defended_drop: f64,
    /// DPA only.
    pub certified_acc: Option<f64>,
}

pub const DEFENSE_HEADER: &str =
    "eps_d,defense,clean_acc,undefended_acc,defended_acc,undefended_drop,defended_drop,certified_acc";

pub fn defense_csv(rows: &[DefenseRow]) -> String {
    let mut out = String::from(DEFENSE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            fmt_f64(r.eps_d),
            r.defense,
            fmt_f64(r.clean_acc),
            fmt_f64(r.undefended_acc),
            fmt_f64(r.defended_acc),
            fmt_f64(r.undefended_drop),
            fmt_f64(r.defended_drop),
            fmt_f64(r.certified_acc.unwrap_or(f64::NAN))
        );
    }
    out
}

/// Attack, then every configured defense, for each budget.
pub fn defense_grid(ctx: &mut Context) -> Result<Vec<DefenseRow>> {
    if ctx.cfg().defenses.is_empty() {
        return Err(Error::Config("no defenses configured".into()));
    }
    if !ctx.spec.is_classifier() {
        return Err(Error::Config("defense evaluation needs a classifier".into()));
    }
    let t = ctx.single_target()?;
    let cfg = ctx.cfg().clone();
    let (clean, test, spec) = (&ctx.data.train, &ctx.data.test, &ctx.spec);
    let mut rows = Vec::new();
    for eps in ctx.budgets(&t.params)? {
        let res = run_attack(ctx, &t.params, eps, &cfg.attack.options)?;
        let und = retrain_and_eval(clean, &res.poison, test, spec, &t.params, &cfg.train, cfg.seed)?;
        let clean_acc = und.clean_acc.unwrap_or(f64::NAN);
        let und_acc = und.poisoned_acc.unwrap_or(f64::NAN);
        let mixed = clean.concat(&res.poison)?;
        for d in &cfg.defenses {
            let (acc, cert) = match defense_kind(&d.name)? {
                DefenseKind::Sever => {
                    let w = train(spec, &mixed, &cfg.train, cfg.seed)?;
                    let frac = d.fraction.unwrap_or(eps / (1.0 + eps));
                    let s = sever_filter(&mixed, spec, &w, frac, d.rounds, &cfg.train, cfg.seed)?;
                    (accuracy(spec, &s.params, test)?, None)
                }
                DefenseKind::Dpa => {
                    let ens = dpa_train(&mixed, spec, d.k, cfg.seed, &cfg.train)?;
                    let r = dpa_evaluate(&ens, test, res.poison.len())?;
                    (r.accuracy, Some(r.certified_accuracy))
                }
            };
            rows.push(DefenseRow {
                eps_d: eps,
                defense: d.name.clone(),
                clean_acc,
                undefended_acc: und_acc,
                defended_acc: acc,
                undefended_drop: 100.0 * (clean_acc - und_acc),
                defended_drop: 100.0 * (clean_acc - acc),
                certified_acc: cert,
            });
        }
    }
    Ok(rows)
}

fn cmd_defend(ctx: &mut Context, out: &Option<PathBuf>) -> Result<()> {
    let rows = defense_grid(ctx)?;
    let l = &ctx.loaded;
    if let Some(p) = out_path(out, &l.cfg.output.csv, l) {
        write_atomic(&p, defense_csv(&rows).as_bytes())?;
    }
    if let Some(p) = l.cfg.output.json.as_ref().map(|p| l.path(p)) {
        write_json(&p, &rows)?;
    }
    print_json(&rows)
}

// ---------------------------------------------------------------------------
// Argument parsing and dispatch
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "poisonlab", version, about = "Model-targeted data poisoning experiments")]
pub struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or load a dataset and write it as JSON.
    GenData(Common),
    /// Train the clean model and write its parameter file.
    Train(Common),
    /// Print the reachability threshold report of a target.
    Threshold(Common),
    /// Build target parameters (corruption, scaling, grid).
    MakeTarget(Common),
    /// Pick a target from candidates by budget, convergence and damage.
    SelectTarget(Common),
    /// Craft a poison set for a target.
    Attack(Common),
    /// Retrain on clean plus poison and report.
    Retrain(Common),
    /// Heatmap or learning-curve sweep.
    Sweep(Common),
    /// Attack, then evaluate defenses.
    Defend(Common),
}

#[derive(Debug, Args, Default, Clone)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in dataset when no config is given: or, toy, gauss, gauss_regression.
    #[arg(long)]
    pub data: Option<String>,
    /// Model when no config is given: logistic, least_squares, softmax.
    #[arg(long)]
    pub model: Option<String>,
    /// Target parameter file.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Poisoning budget ε_d.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Poison dataset file (retrain).
    #[arg(long)]
    pub poison: Option<PathBuf>,
    /// Primary output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Config from `--config`, otherwise from the shortcut flags. Flags given
/// alongside a config override it.
pub fn load_config(c: &Common) -> Result<Loaded> {
    let mut l = match &c.config {
        Some(p) => Loaded::from_file(p)?,
        None => {
            let name = c
                .data
                .as_deref()
                .ok_or_else(|| Error::Config("give --config or --data".into()))?;
            Loaded {
                cfg: ExperimentConfig::minimal(data_by_name(name)?),
                base: PathBuf::new(),
            }
        }
    };
    if c.config.is_some() {
        if let Some(d) = &c.data {
            l.cfg.data.source = data_by_name(d)?;
        }
    }
    if let Some(m) = &c.model {
        l.cfg.model = model_by_name(m)?;
    }
    if let Some(t) = &c.target {
        let abs = std::path::absolute(t)?;
        l.cfg.target = Some(TargetSource::File { path: abs });
        l.cfg.targets.clear();
    }
    if let Some(e) = c.eps {
        l.cfg.eps_d = Some(EpsSpec::One(e));
    }
    if let Ok(s) = std::env::var(SEED_ENV) {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
        l.cfg.seed = seed;
        l.cfg.attack.options.seed = seed;
    }
    Ok(l)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be ≥ 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let common = match &cli.command {
        Command::GenData(c)
        | Command::Train(c)
        | Command::Threshold(c)
        | Command::MakeTarget(c)
        | Command::SelectTarget(c)
        | Command::Attack(c)
        | Command::Retrain(c)
        | Command::Sweep(c)
        | Command::Defend(c) => c,
    };
    let mut ctx = Context::new(load_config(common)?)?;
    let out = &common.out;
    match &cli.command {
        Command::GenData(_) => cmd_gen_data(&ctx, out),
        Command::Train(_) => cmd_train(&mut ctx, out),
        Command::Threshold(_) => cmd_threshold(&mut ctx, out),
        Command::MakeTarget(_) => cmd_make_target(&mut ctx, out),
        Command::SelectTarget(_) => cmd_select_target(&mut ctx, out),
        Command::Attack(_) => cmd_attack(&mut ctx, out),
        Command::Retrain(_) => cmd_retrain(&mut ctx, &common.poison, out),
        Command::Sweep(_) => cmd_sweep(&mut ctx, out),
        Command::Defend(_) => cmd_defend(&mut ctx, out),
    }
}

/// 2 config, 3 data, 4 divergence, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Io(_) | Error::IdxMagic { .. } | Error::IdxTruncated { .. } | Error::IdxOverflow { .. } | Error::Shape(_) => 3,
        Error::Divergence(_) | Error::NonFinite(_) => 4,
        _ => 1,
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suggestions_name_the_closest() {
        let e = attack_kind("gcc").unwrap_err().to_string();
        assert!(e.contains("did you mean `gc`"), "{e}");
        let e = defense_kind("sevre").unwrap_err().to_string();
        assert!(e.contains("`sever`"), "{e}");
        assert_eq!(attack_kind("Frank-Wolfe").unwrap(), AttackKind::FrankWolfe);
        assert!(data_by_name("ro").unwrap_err().to_string().contains("`or`"));
    }

    #[test]
    fn eps_accepts_scalar_or_list() {
        let mut c = ExperimentConfig::minimal(DataSource::Toy);
        c.eps_d = Some(serde_json::from_str("0.5").unwrap());
        assert_eq!(c.eps_list().unwrap(), vec![0.5]);
        c.eps_d = Some(serde_json::from_str("[0.1, 1]").unwrap());
        assert_eq!(c.eps_list().unwrap(), vec![0.1, 1.0]);
        c.eps_d = Some(EpsSpec::Many(vec![0.1, 0.0]));
        assert!(matches!(c.eps_list(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let e = ExperimentConfig::from_json(r#"{"data":{"source":{"kind":"toy"}},"sead":1}"#).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn missing_reference_fails_validation() {
        let mut c = ExperimentConfig::minimal(DataSource::Toy);
        c.target = Some(TargetSource::File {
            path: "definitely/not/here.json".into(),
        });
        assert!(matches!(c.validate(Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn param_file_checks_shape() {
        let spec = ModelSpec::logistic(3);
        let p = spec.params(vec![1.0, 2.0, 3.0]).unwrap();
        let pf = ParamFile::from_params(&spec, &p);
        assert_eq!(pf.to_params(&spec).unwrap(), p);
        assert!(matches!(pf.to_params(&ModelSpec::logistic(2)), Err(Error::Shape(_))));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn grid_targets_are_w1_major() {
        let mut c = ExperimentConfig::minimal(DataSource::Or { reps: 2, noise: 0.1 });
        c.target = Some(TargetSource::Grid {
            w1: (-1.0, 1.0),
            w2: (0.0, 2.0),
            steps: 3,
            fixed: vec![0.5],
        });
        let mut ctx = Context::new(Loaded { cfg: c, base: PathBuf::new() }).unwrap();
        let t = ctx.targets().unwrap();
        assert_eq!(t.len(), 9);
        assert_eq!(t[1].params.values, vec![-1.0, 1.0, 0.5]);
        assert_eq!(t[3].params.values, vec![0.0, 0.0, 0.5]);
        assert!(t.iter().all(|c| c.tau.is_some()));
    }

    #[test]
    fn bad_args_exit_two() {
        assert_eq!(main_with(["poisonlab", "atack"]), 2);
        assert_eq!(main_with(["poisonlab", "threshold", "--data", "toy", "--model", "logstic"]), 2);
    }
}
