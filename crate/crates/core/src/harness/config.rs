//! Experiment configuration and its flat `key = value` text format.
//!
//! One setting per line, `#` starts a comment, unknown keys are errors.
//! [`ExperimentConfig::to_text`] writes every key, so the file next to the
//! outputs fully describes a run. Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `method` | `ours`, `il`, `fl`, `fd` or `cl` |
//! | `clients` | number of clients N |
//! | `rounds` | communication rounds R |
//! | `lambda_kd`, `lambda_disc` | objective weights |
//! | `n_avg`, `m_up`, `m_down` | observation averaging and traffic sizes |
//! | `lr`, `local_epochs`, `batch_size` | local training |
//! | `optimizer` | `adam`, `sgd` or `auto` (SGD for `fl`, Adam otherwise) |
//! | `lambda_fd` | distillation weight of the `fd` baseline |
//! | `hidden` | comma separated hidden widths before the feature layer |
//! | `feature_dim` | width d′ of the feature layer |
//! | `data` | `idx:<dir>` or `synth:<k=v,...>` (see [`SynthSpec`]) |
//! | `subsample`, `test_subsample` | keep this many samples (`all` to keep everything) |
//! | `stratified` | class-stratified subsampling |
//! | `partition` | `balanced` or `multinomial` |
//! | `seed` | master seed |
//! | `eval_every` | evaluate every k rounds (the last round is always evaluated) |
//! | `traffic` | run the relay protocol for `ours` (off reduces it to local training) |
//! | `init_std`, `weighted` | server initialisation and prototype weighting |
//! | `record_time` | write measured wall time instead of 0 into `wall_ms` |
//! | `out` | output directory |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::PartitionScheme;
use crate::error::{Error, Result};
use crate::nn::OptimizerKind;
use crate::objectives::HyperParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ours,
    Il,
    Fl,
    Fd,
    Cl,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ours, Method::Il, Method::Fl, Method::Fd, Method::Cl];
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ours" => Ok(Self::Ours),
            "il" => Ok(Self::Il),
            "fl" => Ok(Self::Fl),
            "fd" => Ok(Self::Fd),
            "cl" => Ok(Self::Cl),
            other => Err(Error::Config(format!("unknown method `{other}` (expected ours|il|fl|fd|cl)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ours => "ours",
            Self::Il => "il",
            Self::Fl => "fl",
            Self::Fd => "fd",
            Self::Cl => "cl",
        })
    }
}

/// Gaussian mixture source: `synth:classes=10,dim=20,per_class=100,test_per_class=50,sep=3,seed=7`.
/// Omitted keys take the defaults below; `seed` defaults to the master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub sep: f64,
    pub seed: Option<u64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 20,
            per_class: 100,
            test_per_class: 50,
            sep: 3.0,
            seed: None,
        }
    }
}

impl FromStr for SynthSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = Self::default();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("synthetic spec item `{item}` is not key=value")))?;
            match k.trim() {
                "classes" => spec.classes = parse_value(k, v)?,
                "dim" => spec.dim = parse_value(k, v)?,
                "per_class" => spec.per_class = parse_value(k, v)?,
                "test_per_class" => spec.test_per_class = parse_value(k, v)?,
                "sep" => spec.sep = parse_value(k, v)?,
                "seed" => spec.seed = Some(parse_value(k, v)?),
                other => return Err(Error::Config(format!("unknown synthetic spec key `{other}`"))),
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "classes={},dim={},per_class={},test_per_class={},sep={}",
            self.classes, self.dim, self.per_class, self.test_per_class, self.sep
        )?;
        if let Some(seed) = self.seed {
            write!(f, ",seed={seed}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Directory holding `train-*` and `t10k-*` IDX files, optionally gzipped.
    Idx(PathBuf),
    Synth(SynthSpec),
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(dir) = s.strip_prefix("idx:") {
            Ok(Self::Idx(PathBuf::from(dir)))
        } else if let Some(spec) = s.strip_prefix("synth:") {
            Ok(Self::Synth(spec.parse()?))
        } else if s == "synth" {
            Ok(Self::Synth(SynthSpec::default()))
        } else {
            Err(Error::Config(format!("data source `{s}` must be idx:<dir> or synth:<spec>")))
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Idx(dir) => write!(f, "idx:{}", dir.display()),
            Self::Synth(spec) => write!(f, "synth:{spec}"),
        }
    }
}

/// Optimizer selection; `Auto` follows the method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerChoice {
    Auto,
    Fixed(OptimizerKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub clients: usize,
    pub rounds: usize,
    /// `hp.classes` is overwritten with the class count of the loaded data.
    pub hp: HyperParams,
    pub optimizer: OptimizerChoice,
    pub lambda_fd: f64,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub data: DataSource,
    pub subsample: Option<usize>,
    pub test_subsample: Option<usize>,
    pub stratified: bool,
    pub partition: PartitionScheme,
    pub seed: u64,
    pub eval_every: usize,
    pub traffic: bool,
    pub init_std: f64,
    pub weighted: bool,
    pub record_time: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Ours,
            clients: 5,
            rounds: 100,
            hp: HyperParams::defaults(10),
            optimizer: OptimizerChoice::Auto,
            lambda_fd: 1.0,
            hidden: vec![128],
            feature_dim: 84,
            data: DataSource::Idx(PathBuf::from("data/mnist5k")),
            subsample: Some(1200),
            test_subsample: None,
            stratified: false,
            partition: PartitionScheme::Balanced,
            seed: 0,
            eval_every: 1,
            traffic: true,
            init_std: 0.1,
            weighted: false,
            record_time: false,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{}` for `{}`: {e}", value.trim(), key.trim())))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("bad boolean `{other}` for `{key}`"))),
    }
}

fn parse_count(key: &str, value: &str) -> Result<Option<usize>> {
    match value.trim() {
        "all" | "none" => Ok(None),
        v => parse_value(key, v).map(Some),
    }
}

fn fmt_count(v: Option<usize>) -> String {
    v.map_or_else(|| "all".to_string(), |n| n.to_string())
}

impl ExperimentConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "method" => self.method = v.parse()?,
            "clients" => self.clients = parse_value(key, v)?,
            "rounds" => self.rounds = parse_value(key, v)?,
            "lambda_kd" => self.hp.lambda_kd = parse_value(key, v)?,
            "lambda_disc" => self.hp.lambda_disc = parse_value(key, v)?,
            "n_avg" => self.hp.n_avg = parse_value(key, v)?,
            "m_up" => self.hp.m_up = parse_value(key, v)?,
            "m_down" => self.hp.m_down = parse_value(key, v)?,
            "lr" => self.hp.lr = parse_value(key, v)?,
            "local_epochs" => self.hp.local_epochs = parse_value(key, v)?,
            "batch_size" => self.hp.batch_size = parse_value(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "auto" => OptimizerChoice::Auto,
                    other => OptimizerChoice::Fixed(other.parse().map_err(|_| Error::Config(format!("unknown optimizer `{other}`")))?),
                }
            }
            "lambda_fd" => self.lambda_fd = parse_value(key, v)?,
            "hidden" => {
                self.hidden = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',').map(|w| parse_value(key, w)).collect::<Result<_>>()?
                }
            }
            "feature_dim" => self.feature_dim = parse_value(key, v)?,
            "data" => self.data = v.parse()?,
            "subsample" => self.subsample = parse_count(key, v)?,
            "test_subsample" => self.test_subsample = parse_count(key, v)?,
            "stratified" => self.stratified = parse_bool(key, v)?,
            "partition" => self.partition = v.parse()?,
            "seed" => self.seed = parse_value(key, v)?,
            "eval_every" => self.eval_every = parse_value(key, v)?,
            "traffic" => self.traffic = parse_bool(key, v)?,
            "init_std" => self.init_std = parse_value(key, v)?,
            "weighted" => self.weighted = parse_bool(key, v)?,
            "record_time" => self.record_time = parse_bool(key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", lineno + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let hp = &self.hp;
        let optimizer = match self.optimizer {
            OptimizerChoice::Auto => "auto".to_string(),
            OptimizerChoice::Fixed(k) => k.to_string(),
        };
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("method", self.method.to_string()),
            ("clients", self.clients.to_string()),
            ("rounds", self.rounds.to_string()),
            ("lambda_kd", format!("{:?}", hp.lambda_kd)),
            ("lambda_disc", format!("{:?}", hp.lambda_disc)),
            ("n_avg", hp.n_avg.to_string()),
            ("m_up", hp.m_up.to_string()),
            ("m_down", hp.m_down.to_string()),
            ("lr", format!("{:?}", hp.lr)),
            ("local_epochs", hp.local_epochs.to_string()),
            ("batch_size", hp.batch_size.to_string()),
            ("optimizer", optimizer),
            ("lambda_fd", format!("{:?}", self.lambda_fd)),
            ("hidden", if hidden.is_empty() { "none".into() } else { hidden.join(",") }),
            ("feature_dim", self.feature_dim.to_string()),
            ("data", self.data.to_string()),
            ("subsample", fmt_count(self.subsample)),
            ("test_subsample", fmt_count(self.test_subsample)),
            ("stratified", self.stratified.to_string()),
            ("partition", self.partition.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("traffic", self.traffic.to_string()),
            ("init_std", format!("{:?}", self.init_std)),
            ("weighted", self.weighted.to_string()),
            ("record_time", self.record_time.to_string()),
            ("out", self.out.display().to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match (self.optimizer, self.method) {
            (OptimizerChoice::Fixed(k), _) => k,
            (OptimizerChoice::Auto, Method::Fl) => OptimizerKind::Sgd,
            (OptimizerChoice::Auto, _) => OptimizerKind::Adam,
        }
    }

    /// Checks everything that does not depend on the loaded data.
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("clients must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.lambda_fd.is_finite() && self.lambda_fd >= 0.0) {
            return Err(Error::Config("lambda_fd must be finite and non-negative".into()));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be finite and non-negative".into()));
        }
        if self.subsample == Some(0) {
            return Err(Error::Config("subsample must keep at least one sample".into()));
        }
        let mut hp = self.hp;
        hp.classes = hp.classes.max(2);
        hp.validate()
    }
}
