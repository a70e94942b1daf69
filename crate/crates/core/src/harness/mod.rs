//! End-to-end experiment runs: data loading, per-method round loops,
//! evaluation and metrics files.

mod config;

pub use config::{DataSource, ExperimentConfig, Method, OptimizerChoice, SynthSpec};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::baselines::{fd_round, fl_round, il_round, FdServer, FedAvgServer};
use crate::client::{run_global_round, ClientState, LocalReport};
use crate::data::{load_idx, partition, subsample, synth_mixture_stream, Dataset};
use crate::error::{Error, Result};
use crate::nn::{tensor, Architecture, ModelParams};
use crate::protocol::{init_server, ServerConfig, ServerState, Traffic};
use crate::seed::derive_seed;

pub const METRICS_HEADER: &str = "round,client,train_acc,test_acc,loss_ce,loss_kd,loss_disc,uplink_floats,downlink_floats,wall_ms";

/// One row of `metrics.csv`. Accuracies are `None` on rounds skipped by the
/// evaluation stride and written as empty fields.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub client: usize,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub loss_ce: f64,
    pub loss_kd: f64,
    pub loss_disc: f64,
    pub uplink_floats: u64,
    pub downlink_floats: u64,
    pub wall_ms: u64,
}

impl RoundMetrics {
    pub fn csv_line(&self) -> String {
        let acc = |a: Option<f64>| a.map_or_else(String::new, |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.client,
            acc(self.train_acc),
            acc(self.test_acc),
            self.loss_ce,
            self.loss_kd,
            self.loss_disc,
            self.uplink_floats,
            self.downlink_floats,
            self.wall_ms
        )
    }
}

/// Fraction of rows whose argmax logit (lowest index on ties) equals the label.
pub fn evaluate(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    const CHUNK: usize = 512;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let part = ds.select(chunk);
        let logits = params.logits_batch(&part.inputs)?;
        correct += part
            .labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| tensor::argmax(logits.row(i)) == y)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

fn find_idx(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for stem in stems {
        for suffix in ["", ".gz"] {
            let p = dir.join(format!("{stem}{suffix}"));
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::Config(format!("no `{}` file in {}", stems[0], dir.display())))
}

/// Loads the configured train and test sets and applies subsampling. Both sets
/// share the larger of their class counts.
pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let (mut train, mut test) = match &cfg.data {
        DataSource::Idx(dir) => {
            let train = load_idx(
                &find_idx(dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?,
                &find_idx(dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?,
            )?;
            let test = load_idx(
                &find_idx(dir, &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])?,
                &find_idx(dir, &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])?,
            )?;
            (train, test)
        }
        DataSource::Synth(spec) => {
            let seed = spec.seed.unwrap_or(cfg.seed);
            (
                synth_mixture_stream(spec.classes, spec.dim, spec.per_class, spec.sep, seed, 0)?,
                synth_mixture_stream(spec.classes, spec.dim, spec.test_per_class, spec.sep, seed, 1)?,
            )
        }
    };
    if train.dim() != test.dim() {
        return Err(Error::dim("test input width", train.dim(), test.dim()));
    }
    let classes = train.classes.max(test.classes);
    train.classes = classes;
    test.classes = classes;
    if let Some(n) = cfg.subsample {
        if n < train.len() {
            train = subsample(&train, n, derive_seed(cfg.seed, "subsample", 0), cfg.stratified)?;
        }
    }
    if let Some(n) = cfg.test_subsample {
        if n < test.len() {
            test = subsample(&test, n, derive_seed(cfg.seed, "test-subsample", 0), cfg.stratified)?;
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("train and test sets must be non-empty".into()));
    }
    Ok(LoadedData { train, test })
}

pub fn architecture(cfg: &ExperimentConfig, data: &LoadedData) -> Result<Architecture> {
    let mut hidden = cfg.hidden.clone();
    hidden.push(cfg.feature_dim);
    Architecture::new(data.train.dim(), hidden, data.train.classes)
}

/// Final-round results of one run, also written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub method: String,
    pub rounds: usize,
    pub clients: usize,
    pub final_test_acc: Vec<f64>,
    pub final_train_acc: Vec<f64>,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub total_uplink_floats: u64,
    pub total_downlink_floats: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics_path: PathBuf,
    pub summary: RunSummary,
    /// Client models after the last round (one model for `cl`).
    pub models: Vec<ModelParams>,
    pub data: LoadedData,
}

enum Runner {
    Ours(Option<Box<ServerState>>),
    Local,
    Fl(FedAvgServer),
    Fd(FdServer),
}

fn build_clients(cfg: &ExperimentConfig, data: &LoadedData, arch: &Architecture) -> Result<Vec<ClientState>> {
    let kind = cfg.optimizer_kind();
    let shards = if cfg.method == Method::Cl {
        vec![data.train.clone()]
    } else {
        partition(&data.train, cfg.clients, derive_seed(cfg.seed, "partition", 0), cfg.partition)?
    };
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(i, shard)| {
            // FedAvg clients start from the broadcast model
            let init = if cfg.method == Method::Fl { 0 } else { i as u64 };
            let params = ModelParams::init(arch, derive_seed(cfg.seed, "init", init));
            ClientState::new(i, params, shard, kind, derive_seed(cfg.seed, "client", i as u64))
        })
        .collect())
}

fn present_classes(ds: &Dataset) -> u64 {
    ds.class_counts().iter().filter(|&&n| n > 0).count() as u64
}

/// Runs `cfg` and writes `config.txt`, `metrics.csv` (incrementally),
/// `summary.json` and, for `ours`, `round_log.jsonl` into `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_experiment_observed(cfg, |_| {})
}

/// [`run_experiment`] with a callback receiving each round's rows.
pub fn run_experiment_observed(cfg: &ExperimentConfig, mut on_round: impl FnMut(&[RoundMetrics])) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let arch = architecture(cfg, &data)?;
    let mut hp = cfg.hp;
    hp.classes = arch.classes;
    hp.validate()?;

    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    let metrics_path = cfg.out.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut round_log = match cfg.method {
        Method::Ours if cfg.traffic => Some(BufWriter::new(File::create(cfg.out.join("round_log.jsonl"))?)),
        _ => None,
    };

    let mut clients = build_clients(cfg, &data, &arch)?;
    let classes = arch.classes as u64;
    let mut runner = match cfg.method {
        Method::Ours if cfg.traffic => {
            let mut scfg = ServerConfig::new(arch.classes, arch.feature_dim(), clients.len(), hp.m_up, derive_seed(cfg.seed, "server", 0));
            scfg.init_std = cfg.init_std;
            scfg.weighted = cfg.weighted;
            Runner::Ours(Some(Box::new(init_server(scfg)?)))
        }
        Method::Ours => Runner::Ours(None),
        Method::Il | Method::Cl => Runner::Local,
        Method::Fl => Runner::Fl(FedAvgServer {
            global: clients[0].params.clone(),
        }),
        Method::Fd => Runner::Fd(FdServer::new(arch.classes)),
    };

    let mut totals = Traffic::default();
    let mut last_rows: Vec<RoundMetrics> = Vec::new();
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let (reports, traffic): (Vec<LocalReport>, Vec<Traffic>) = match &mut runner {
            Runner::Ours(Some(server)) => {
                let reports = run_global_round(server, &mut clients, &hp)?;
                let ledger = server.comm_report();
                let traffic = clients.iter().map(|c| ledger.client_round(round - 1, c.id)).collect();
                if let Some(log) = round_log.as_mut() {
                    server.write_round_log(round - 1, log)?;
                    log.flush()?;
                }
                (reports, traffic)
            }
            Runner::Ours(None) | Runner::Local => (il_round(&mut clients, &hp)?, vec![Traffic::default(); clients.len()]),
            Runner::Fl(server) => {
                let reports = fl_round(server, &mut clients, &hp)?;
                let n = server.global.num_params() as u64;
                (reports, vec![Traffic { uplink: n, downlink: n }; clients.len()])
            }
            Runner::Fd(server) => {
                let teachers = server.global.iter().filter(|t| t.is_some()).count() as u64;
                let traffic = clients
                    .iter()
                    .map(|c| Traffic {
                        uplink: classes * present_classes(&c.data),
                        downlink: classes * teachers,
                    })
                    .collect();
                (fd_round(server, &mut clients, &hp, cfg.lambda_fd)?, traffic)
            }
        };

        let evaluate_now = round % cfg.eval_every == 0 || round == cfg.rounds;
        let mut rows = Vec::with_capacity(clients.len());
        for ((c, rep), t) in clients.iter().zip(&reports).zip(&traffic) {
            let (train_acc, test_acc) = if evaluate_now {
                let train_acc = if c.data.is_empty() { None } else { Some(evaluate(&c.params, &c.data)?) };
                (train_acc, Some(evaluate(&c.params, &data.test)?))
            } else {
                (None, None)
            };
            rows.push(RoundMetrics {
                round,
                client: c.id,
                train_acc,
                test_acc,
                loss_ce: rep.loss_ce,
                loss_kd: rep.loss_kd,
                loss_disc: rep.loss_disc,
                uplink_floats: t.uplink,
                downlink_floats: t.downlink,
                wall_ms: 0,
            });
            totals.uplink += t.uplink;
            totals.downlink += t.downlink;
        }
        if cfg.record_time {
            let ms = started.elapsed().as_millis() as u64;
            for r in &mut rows {
                r.wall_ms = ms;
            }
        }
        for r in &rows {
            writeln!(metrics, "{}", r.csv_line())?;
        }
        metrics.flush()?;
        on_round(&rows);
        last_rows = rows;
    }

    let final_test_acc: Vec<f64> = last_rows.iter().map(|r| r.test_acc.unwrap_or(f64::NAN)).collect();
    let final_train_acc: Vec<f64> = last_rows.iter().map(|r| r.train_acc.unwrap_or(f64::NAN)).collect();
    let (mean, std) = mean_std(&final_test_acc);
    let summary = RunSummary {
        method: cfg.method.to_string(),
        rounds: cfg.rounds,
        clients: clients.len(),
        final_test_acc,
        final_train_acc,
        mean_test_acc: mean,
        std_test_acc: std,
        total_uplink_floats: totals.uplink,
        total_downlink_floats: totals.downlink,
    };
    fs::write(cfg.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(RunOutcome {
        metrics_path,
        summary,
        models: clients.into_iter().map(|c| c.params).collect(),
        data,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Final mean test accuracy for every `(λ_KD, λ_disc)` pair of the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub lambda_kd: Vec<f64>,
    pub lambda_disc: Vec<f64>,
    /// `accuracy[i][j]` belongs to `(lambda_kd[i], lambda_disc[j])`.
    pub accuracy: Vec<Vec<f64>>,
    /// Accuracy of the `(0, 0)` cell, i.e. independent learning.
    pub baseline: f64,
}

impl AblationResult {
    /// Improvement over the `(0, 0)` cell in percentage points.
    pub fn improvement(&self) -> Vec<Vec<f64>> {
        self.accuracy.iter().map(|row| row.iter().map(|a| 100.0 * (a - self.baseline)).collect()).collect()
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "lambda_kd,lambda_disc,mean_test_acc,improvement_pts")?;
        let imp = self.improvement();
        for (i, kd) in self.lambda_kd.iter().enumerate() {
            for (j, disc) in self.lambda_disc.iter().enumerate() {
                writeln!(out, "{kd},{disc},{},{}", self.accuracy[i][j], imp[i][j])?;
            }
        }
        Ok(())
    }
}

/// One `ours` run per grid cell under `base.out/kd<λ>_disc<λ>`; the `(0,0)`
/// cell is run as well when the grid lacks it. Writes `ablation.csv`.
pub fn ablation_grid(base: &ExperimentConfig, lambda_kd: &[f64], lambda_disc: &[f64]) -> Result<AblationResult> {
    if lambda_kd.is_empty() || lambda_disc.is_empty() {
        return Err(Error::Config("ablation grid needs at least one value per axis".into()));
    }
    let run_cell = |kd: f64, disc: f64| -> Result<f64> {
        let mut cfg = base.clone();
        cfg.method = Method::Ours;
        cfg.hp.lambda_kd = kd;
        cfg.hp.lambda_disc = disc;
        cfg.out = base.out.join(format!("kd{kd}_disc{disc}"));
        Ok(run_experiment(&cfg)?.summary.mean_test_acc)
    };
    let mut accuracy = Vec::with_capacity(lambda_kd.len());
    let mut baseline = None;
    for &kd in lambda_kd {
        let mut row = Vec::with_capacity(lambda_disc.len());
        for &disc in lambda_disc {
            let acc = run_cell(kd, disc)?;
            if kd == 0.0 && disc == 0.0 {
                baseline = Some(acc);
            }
            row.push(acc);
        }
        accuracy.push(row);
    }
    let baseline = match baseline {
        Some(b) => b,
        None => run_cell(0.0, 0.0)?,
    };
    let result = AblationResult {
        lambda_kd: lambda_kd.to_vec(),
        lambda_disc: lambda_disc.to_vec(),
        accuracy,
        baseline,
    };
    fs::create_dir_all(&base.out)?;
    let mut f = BufWriter::new(File::create(base.out.join("ablation.csv"))?);
    result.write_csv(&mut f)?;
    f.flush()?;
    Ok(result)
}

/// First `n` samples of `ds`: a fixed probe set shared by all clients.
pub fn probe_subset(ds: &Dataset, n: usize) -> Dataset {
    let idx: Vec<usize> = (0..n.min(ds.len())).collect();
    ds.select(&idx)
}

/// Writes `client,class,f0,…` rows: every model's feature vector of every probe sample.
pub fn export_representations(models: &[ModelParams], probe: &Dataset, path: &Path) -> Result<()> {
    let d = models.first().map_or(0, ModelParams::feature_dim);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "client,class")?;
    for k in 0..d {
        write!(out, ",f{k}")?;
    }
    writeln!(out)?;
    for (client, m) in models.iter().enumerate() {
        if m.feature_dim() != d {
            return Err(Error::dim("exported feature width", d, m.feature_dim()));
        }
        let feats = m.features_batch(&probe.inputs)?;
        for (i, &y) in probe.labels.iter().enumerate() {
            write!(out, "{client},{y}")?;
            for v in feats.row(i) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}
