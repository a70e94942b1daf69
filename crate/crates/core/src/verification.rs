//! Exact oracles on discrete distributions for the contrastive mutual
//! information bound, plus finite-difference gradient checking.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{tensor, BoundModel, ModelParams, Tape, Tensor, Var};

/// Tolerance on the total mass of a joint table.
pub const MASS_TOL: f64 = 1e-12;
/// Slack below zero still accepted as numerical noise.
pub const SLACK_TOL: f64 = 1e-9;

/// Probability table over a finite `S × T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    p: Vec<Vec<f64>>,
}

impl DiscreteJoint {
    pub fn new(p: Vec<Vec<f64>>) -> Result<Self> {
        let cols = p.first().map_or(0, Vec::len);
        if p.is_empty() || cols == 0 {
            return Err(Error::Config("joint table must be non-empty".into()));
        }
        if p.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("joint table rows must have equal length".into()));
        }
        if p.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("joint entries must be finite and non-negative".into()));
        }
        let mass: f64 = p.iter().flatten().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Config(format!("joint mass {mass} is not 1")));
        }
        Ok(Self { p })
    }

    /// Random joint with `rows × cols` support; a fraction of cells is zeroed
    /// so that sparse tables are also covered.
    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        loop {
            let mut p: Vec<Vec<f64>> = (0..rows)
                .map(|_| {
                    (0..cols)
                        .map(|_| {
                            let u: f64 = rng.gen();
                            if u < 0.2 {
                                0.0
                            } else {
                                // exponential weights, some strongly peaked
                                let w: f64 = -rng.gen::<f64>().max(1e-300).ln();
                                w.powf(rng.gen_range(1.0..3.0))
                            }
                        })
                        .collect()
                })
                .collect();
            let total: f64 = p.iter().flatten().sum();
            if total <= 0.0 {
                continue;
            }
            for v in p.iter_mut().flatten() {
                *v /= total;
            }
            // renormalising can leave mass off by an ulp or two
            let mass: f64 = p.iter().flatten().sum();
            if (mass - 1.0).abs() <= MASS_TOL {
                return Self { p };
            }
        }
    }

    /// Product of two marginals.
    pub fn independent(ps: &[f64], pt: &[f64]) -> Result<Self> {
        Self::new(ps.iter().map(|a| pt.iter().map(|b| a * b).collect()).collect())
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.p
    }

    pub fn rows(&self) -> usize {
        self.p.len()
    }

    pub fn cols(&self) -> usize {
        self.p[0].len()
    }

    pub fn marginal_s(&self) -> Vec<f64> {
        self.p.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn marginal_t(&self) -> Vec<f64> {
        (0..self.cols()).map(|j| self.p.iter().map(|r| r[j]).sum()).collect()
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

fn entropy<'a>(p: impl IntoIterator<Item = &'a f64>) -> f64 {
    -p.into_iter().map(|&v| xlogy(v, v)).sum::<f64>()
}

/// `Σ p(s,t) log(p(s,t) / (p(s) p(t)))` in nats.
pub fn exact_mutual_information(j: &DiscreteJoint) -> f64 {
    let ps = j.marginal_s();
    let pt = j.marginal_t();
    let mut mi = 0.0;
    for (a, row) in j.table().iter().enumerate() {
        for (b, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (ps[a] * pt[b])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// `H(s) + H(t) − H(s,t)`.
pub fn mutual_information_entropies(j: &DiscreteJoint) -> f64 {
    entropy(&j.marginal_s()) + entropy(&j.marginal_t()) - entropy(j.table().iter().flatten())
}

/// Discriminator values on `S × T`; each entry must lie in `[0, 1]`.
pub type Discriminator = Vec<Vec<f64>>;

/// `−E_{p(s,t)}[log h] − K·E_{p(s)p(t)}[log(1 − h)]` by enumeration.
pub fn exact_l_disc(j: &DiscreteJoint, h: &Discriminator, k: usize) -> Result<f64> {
    if h.len() != j.rows() || h.iter().any(|r| r.len() != j.cols()) {
        return Err(Error::dim("discriminator table", format!("{}x{}", j.rows(), j.cols()), format!("{}x{}", h.len(), h.first().map_or(0, Vec::len))));
    }
    if h.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("discriminator values must lie in [0, 1]".into()));
    }
    let ps = j.marginal_s();
    let pt = j.marginal_t();
    let k = k as f64;
    let mut loss = 0.0;
    for (a, row) in j.table().iter().enumerate() {
        for (b, &p) in row.iter().enumerate() {
            loss -= xlogy(p, h[a][b]);
            loss -= k * xlogy(ps[a] * pt[b], 1.0 - h[a][b]);
        }
    }
    Ok(loss)
}

/// Posterior probability of the "positive pair" label,
/// `p(s,t) / (p(s,t) + K p(s) p(t))`; cells with zero mass get 0.
pub fn posterior_discriminator(j: &DiscreteJoint, k: usize) -> Discriminator {
    let ps = j.marginal_s();
    let pt = j.marginal_t();
    j.table()
        .iter()
        .enumerate()
        .map(|(a, row)| {
            row.iter()
                .enumerate()
                .map(|(b, &p)| {
                    let q = k as f64 * ps[a] * pt[b];
                    if p + q > 0.0 {
                        p / (p + q)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

pub fn constant_discriminator(j: &DiscreteJoint, value: f64) -> Discriminator {
    vec![vec![value; j.cols()]; j.rows()]
}

/// Random discriminator with entries strictly inside `(0, 1)`.
pub fn random_discriminator(j: &DiscreteJoint, rng: &mut impl Rng) -> Discriminator {
    (0..j.rows()).map(|_| (0..j.cols()).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect()).collect()
}

/// Mixes `h` towards `other` by `t ∈ [0,1]`.
pub fn blend_discriminators(h: &Discriminator, other: &Discriminator, t: f64) -> Discriminator {
    h.iter().zip(other).map(|(r, o)| r.iter().zip(o).map(|(a, b)| (1.0 - t) * a + t * b).collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub mi: f64,
    pub l_disc: f64,
    /// `log K − L_disc`.
    pub bound: f64,
    /// `I − bound`.
    pub slack: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.slack >= -SLACK_TOL
    }
}

/// Evaluates `I ≥ log K − L_disc` for one discriminator.
pub fn check_mi_bound(j: &DiscreteJoint, h: &Discriminator, k: usize) -> Result<BoundReport> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let mi = exact_mutual_information(j);
    let l_disc = exact_l_disc(j, h, k)?;
    let bound = (k as f64).ln() - l_disc;
    Ok(BoundReport {
        mi,
        l_disc,
        bound,
        slack: mi - bound,
    })
}

/// Outcome of the randomized bound suite.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SuiteSummary {
    pub joints: usize,
    pub discriminators: usize,
    pub min_slack: f64,
    pub bound_violations: usize,
    /// Discriminators that scored strictly below the posterior (beyond 1e-12).
    pub gibbs_violations: usize,
    pub max_mi_disagreement: f64,
}

impl SuiteSummary {
    pub fn passed(&self) -> bool {
        self.bound_violations == 0 && self.gibbs_violations == 0 && self.max_mi_disagreement <= 1e-10
    }
}

/// `joints` random tables (support up to `max_support`²), each checked against
/// the posterior, a constant `1/(K+1)` and `per_joint` random or blended
/// discriminators.
pub fn mi_bound_suite(joints: usize, per_joint: usize, max_support: usize, rng: &mut impl Rng) -> Result<SuiteSummary> {
    let mut summary = SuiteSummary {
        min_slack: f64::INFINITY,
        ..SuiteSummary::default()
    };
    for _ in 0..joints {
        let j = DiscreteJoint::random(rng.gen_range(1..=max_support), rng.gen_range(1..=max_support), rng);
        let k = rng.gen_range(1..=9);
        summary.joints += 1;
        summary.max_mi_disagreement = summary
            .max_mi_disagreement
            .max((exact_mutual_information(&j) - mutual_information_entropies(&j)).abs());

        let post = posterior_discriminator(&j, k);
        let best = exact_l_disc(&j, &post, k)?;
        let mut family = vec![post.clone(), constant_discriminator(&j, 1.0 / (k as f64 + 1.0))];
        for i in 0..per_joint {
            let r = random_discriminator(&j, rng);
            family.push(if i % 2 == 0 { r } else { blend_discriminators(&post, &r, rng.gen_range(0.0..0.5)) });
        }
        for h in &family {
            let report = check_mi_bound(&j, h, k)?;
            summary.discriminators += 1;
            summary.min_slack = summary.min_slack.min(report.slack);
            if !report.holds() {
                summary.bound_violations += 1;
            }
            if report.l_disc < best - 1e-12 {
                summary.gibbs_violations += 1;
            }
        }
    }
    Ok(summary)
}

/// Worst disagreement between reverse-mode and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest `|analytic − numeric|` over all parameters.
    pub max_abs_error: f64,
    pub checked: usize,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Smallest `|pre-activation|` over every ReLU unit and row of `x`.
///
/// Central differences are only meaningful away from the ReLU kink; gradient
/// checks should use evaluation points where this margin exceeds the step.
pub fn kink_margin(params: &ModelParams, x: &Tensor) -> Result<f64> {
    let mut h = x.clone();
    let mut margin = f64::INFINITY;
    for layer in &params.hidden {
        let z = tensor::add_row(&tensor::matmul_nt(&h, &layer.weight)?, &layer.bias)?;
        margin = z.data().iter().fold(margin, |m, v| m.min(v.abs()));
        h = tensor::relu(&z);
    }
    Ok(margin)
}

/// Replaces every bias with `U(−scale, scale)` draws so that no unit sits on
/// the ReLU kink merely because its inputs are zero.
pub fn randomize_biases(params: &mut ModelParams, scale: f64, rng: &mut impl Rng) {
    for layer in params.hidden.iter_mut().chain(std::iter::once(&mut params.head)) {
        let b = (0..layer.bias.len()).map(|_| rng.gen_range(-scale..scale)).collect();
        layer.bias = Tensor::vector(b);
    }
}

/// Compares the tape gradient of `build` at `params` with central differences
/// of step `h` on every parameter. `build` must be deterministic: any
/// randomness it uses has to be re-seeded on every call.
pub fn grad_check<F>(params: &ModelParams, mut build: F, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &BoundModel) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = BoundModel::bind(params, &mut tape);
    let loss = build(&mut tape, &bound)?;
    tape.backward(loss)?;
    let grads = bound.gradients(&tape, params);

    let mut eval = |p: &ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(p, &mut tape);
        let loss = build(&mut tape, &bound)?;
        Ok(tape.scalar(loss))
    };

    let names = params.tensor_names();
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for (ti, g) in grads.tensors().iter().enumerate() {
        for i in 0..g.len() {
            let orig = params.tensors()[ti].data()[i];
            work.tensors_mut()[ti].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.tensors_mut()[ti].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.tensors_mut()[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.data()[i];
            let err = relative_error(analytic, numeric);
            report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_tensor = names[ti].clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
