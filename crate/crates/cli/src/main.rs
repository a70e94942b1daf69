use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use relaykd::harness::{self, ExperimentConfig};
use relaykd::nn::{Architecture, ModelParams, Tensor};
use relaykd::objectives::{batch_objective, HyperParams};
use relaykd::protocol::{Observation, ObservationSet, Prototype, Source};
use relaykd::verification::{self, grad_check, kink_margin, randomize_biases};

#[derive(Parser)]
#[command(name = "relaykd", version, about = "Prototype-relay federated co-distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, config.txt and summary.json.
    Train(RunArgs),
    /// Grid over lambda_kd × lambda_disc, reporting improvement over the (0,0) cell.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma separated lambda_kd values.
        #[arg(long, value_delimiter = ',', default_value = "0,1,10")]
        kd_grid: Vec<f64>,
        /// Comma separated lambda_disc values.
        #[arg(long, value_delimiter = ',', default_value = "0,1,10")]
        disc_grid: Vec<f64>,
    },
    /// Check the contrastive mutual information bound on random discrete joints.
    Verify {
        #[arg(long, default_value_t = 100)]
        joints: usize,
        #[arg(long, default_value_t = 10)]
        discriminators: usize,
        #[arg(long, default_value_t = 8)]
        max_support: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare reverse-mode gradients of the training objective with finite differences.
    GradCheck {
        #[arg(long, default_value_t = 12)]
        models: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train, then export feature vectors of a fixed probe subset of the test set.
    ExportReps {
        #[command(flatten)]
        run: RunArgs,
        /// Number of test samples in the probe set.
        #[arg(long, default_value_t = 500)]
        probe: usize,
        /// Output CSV (defaults to <out>/representations.csv).
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    lambda_kd: Option<f64>,
    #[arg(long)]
    lambda_disc: Option<f64>,
    #[arg(long)]
    n_avg: Option<usize>,
    #[arg(long)]
    m_up: Option<usize>,
    #[arg(long)]
    m_down: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `idx:<dir>` or `synth:<k=v,...>`.
    #[arg(long)]
    data: Option<String>,
    /// Training samples to keep, or `all`.
    #[arg(long)]
    subsample: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Suppress per-round progress lines.
    #[arg(long)]
    quiet: bool,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let flags: [(&str, Option<String>); 14] = [
            ("method", self.method.clone()),
            ("clients", self.clients.map(|v| v.to_string())),
            ("rounds", self.rounds.map(|v| v.to_string())),
            ("lambda_kd", self.lambda_kd.map(|v| v.to_string())),
            ("lambda_disc", self.lambda_disc.map(|v| v.to_string())),
            ("n_avg", self.n_avg.map(|v| v.to_string())),
            ("m_up", self.m_up.map(|v| v.to_string())),
            ("m_down", self.m_down.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("data", self.data.clone()),
            ("subsample", self.subsample.clone()),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v).with_context(|| format!("--{}", key.replace('_', "-")))?;
            }
        }
        for item in &self.set {
            let (k, v) = item.split_once('=').with_context(|| format!("--set {item}: expected KEY=VALUE"))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn train(args: &RunArgs) -> Result<harness::RunOutcome> {
    let cfg = args.config()?;
    let quiet = args.quiet;
    let outcome = harness::run_experiment_observed(&cfg, |rows| {
        if quiet {
            return;
        }
        let accs: Vec<f64> = rows.iter().filter_map(|r| r.test_acc).collect();
        let ce = rows.iter().map(|r| r.loss_ce).sum::<f64>() / rows.len() as f64;
        if accs.is_empty() {
            eprintln!("round {:>4}  loss_ce {ce:.4}", rows[0].round);
        } else {
            let (m, s) = harness::mean_std(&accs);
            eprintln!("round {:>4}  loss_ce {ce:.4}  test_acc {m:.4} ± {s:.4}", rows[0].round);
        }
    })?;
    let s = &outcome.summary;
    println!(
        "{}: mean final test accuracy {:.4} (std {:.4}) over {} client(s); uplink {} floats, downlink {} floats",
        s.method, s.mean_test_acc, s.std_test_acc, s.clients, s.total_uplink_floats, s.total_downlink_floats
    );
    println!("metrics: {}", outcome.metrics_path.display());
    Ok(outcome)
}

fn verify(joints: usize, per_joint: usize, max_support: usize, seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = verification::mi_bound_suite(joints, per_joint, max_support, &mut rng)?;
    let rows = [
        ("bound I >= log K - L_disc", s.bound_violations == 0, format!("min slack {:.3e}, {} violations", s.min_slack, s.bound_violations)),
        ("posterior minimises L_disc", s.gibbs_violations == 0, format!("{} violations", s.gibbs_violations)),
        ("MI formulations agree", s.max_mi_disagreement <= 1e-10, format!("max diff {:.3e}", s.max_mi_disagreement)),
    ];
    println!("{} joints, {} discriminators", s.joints, s.discriminators);
    for (name, ok, detail) in &rows {
        println!("{:<4} {name:<30} {detail}", if *ok { "PASS" } else { "FAIL" });
    }
    Ok(s.passed())
}

fn grad_check_models(models: usize, step: f64, tolerance: f64, seed: u64) -> Result<bool> {
    let mut all_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..models {
        let classes = [3, 5, 10][i % 3];
        let feat = [4, 16, 84][(i / 3) % 3];
        let arch = Architecture::new(6, vec![8, feat], classes)?;
        let mut params = ModelParams::init(&arch, seed.wrapping_add(i as u64));
        randomize_biases(&mut params, 0.5, &mut rng);
        // finite differences are meaningless on a ReLU kink
        let (x, y, globals, obs) = loop {
            let p = random_problem(&mut rng, &arch, 7);
            if kink_margin(&params, &p.0)? > 1e-3 {
                break p;
            }
        };
        let hp = HyperParams {
            lambda_kd: 10.0,
            lambda_disc: 1.0,
            ..HyperParams::defaults(classes)
        };
        let report = grad_check(
            &params,
            |tape, bound| {
                let mut r = ChaCha8Rng::seed_from_u64(17);
                Ok(batch_objective(tape, bound, &x, &y, &globals, &obs, &hp, &mut r)?.total)
            },
            step,
        )?;
        let ok = report.max_rel_error < tolerance;
        all_ok &= ok;
        println!(
            "{:<4} C={classes:<2} d'={feat:<2} params={:<5} max rel err {:.3e} ({} #{}) max abs err {:.1e}",
            if ok { "PASS" } else { "FAIL" },
            report.checked,
            report.max_rel_error,
            report.worst_tensor,
            report.worst_index,
            report.max_abs_error
        );
    }
    Ok(all_ok)
}

fn random_problem(rng: &mut ChaCha8Rng, arch: &Architecture, batch: usize) -> (Tensor, Vec<usize>, Vec<Prototype>, ObservationSet) {
    use rand::Rng;
    let c = arch.classes;
    let d = arch.feature_dim();
    let x = Tensor::matrix(batch, arch.input_dim, (0..batch * arch.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape");
    let y = (0..batch).map(|_| rng.gen_range(0..c)).collect();
    let globals = (0..c)
        .map(|k| Prototype {
            class: k,
            vector: (0..d).map(|_| rng.gen_range(0.0..0.5)).collect(),
            source: Source::Global,
            support: 1,
        })
        .collect();
    let obs = ObservationSet {
        per_class: (0..c)
            .map(|k| {
                vec![Observation {
                    class: k,
                    vector: (0..d).map(|_| rng.gen_range(0.0..0.5)).collect(),
                    source: Source::Server,
                }]
            })
            .collect(),
    };
    (x, y, globals, obs)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            train(&args)?;
        }
        Command::Ablate { run, kd_grid, disc_grid } => {
            let cfg = run.config()?;
            let result = harness::ablation_grid(&cfg, &kd_grid, &disc_grid)?;
            println!("baseline (0,0) accuracy {:.4}", result.baseline);
            println!("improvement over (0,0) in points; rows lambda_kd, columns lambda_disc");
            print!("{:>10}", "");
            for d in &result.lambda_disc {
                print!("{d:>10}");
            }
            println!();
            for (kd, row) in result.lambda_kd.iter().zip(result.improvement()) {
                print!("{kd:>10}");
                for v in row {
                    print!("{v:>10.2}");
                }
                println!();
            }
            println!("written: {}", cfg.out.join("ablation.csv").display());
        }
        Command::Verify { joints, discriminators, max_support, seed } => {
            if !verify(joints, discriminators, max_support, seed)? {
                bail!("verification failed");
            }
        }
        Command::GradCheck { models, step, tolerance, seed } => {
            if !grad_check_models(models, step, tolerance, seed)? {
                bail!("gradient check failed");
            }
        }
        Command::ExportReps { run, probe, file } => {
            let outcome = train(&run)?;
            let path = file.unwrap_or_else(|| run.config().map(|c| c.out).unwrap_or_default().join("representations.csv"));
            let probe = harness::probe_subset(&outcome.data.test, probe);
            harness::export_representations(&outcome.models, &probe, &path)?;
            println!("representations: {}", path.display());
        }
    }
    Ok(())
}
