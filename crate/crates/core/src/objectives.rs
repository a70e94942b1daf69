//! Per-sample losses, the classifier-based discriminator and the mini-batch
//! objective `L_CE + λ_KD·L_KD + λ_disc·L_disc`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, bce_term, tensor, BoundModel, ModelParams, Tape, Tensor, Var};
use crate::protocol::{ObservationSet, Prototype};

/// Clamp applied to the discriminator output before taking logs.
pub const DISC_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lambda_kd: f64,
    pub lambda_disc: f64,
    pub n_avg: usize,
    pub m_up: usize,
    pub m_down: usize,
    pub lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub classes: usize,
}

impl HyperParams {
    /// λ_KD = 10, λ_disc = 1, n_avg = 10, M↑ = M↓ = 1, η = 1e-3, one local epoch, batch 32.
    pub fn defaults(classes: usize) -> Self {
        Self {
            lambda_kd: 10.0,
            lambda_disc: 1.0,
            n_avg: 10,
            m_up: 1,
            m_down: 1,
            lr: 1e-3,
            local_epochs: 1,
            batch_size: 32,
            classes,
        }
    }

    /// Hyperparameters of independent learning: both collaboration weights zeroed.
    pub fn independent(&self) -> Self {
        Self {
            lambda_kd: 0.0,
            lambda_disc: 0.0,
            ..*self
        }
    }

    /// Negatives drawn per positive pair; always `C − 1`.
    pub fn k(&self) -> usize {
        self.classes - 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_avg", self.n_avg),
            ("m_up", self.m_up),
            ("m_down", self.m_down),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(self.lambda_kd >= 0.0 && self.lambda_kd.is_finite()) || !(self.lambda_disc >= 0.0 && self.lambda_disc.is_finite()) {
            return Err(Error::Config("lambda weights must be finite and non-negative".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// `−log softmax(z)_c`, via log-sum-exp.
pub fn loss_ce(z: &[f64], class: usize) -> Result<f64> {
    if class >= z.len() {
        return Err(Error::Index {
            context: "loss_ce class",
            index: class,
            limit: z.len(),
        });
    }
    let mut logp = vec![0.0; z.len()];
    tensor::log_softmax_slice(z, &mut logp);
    Ok(-logp[class])
}

/// Squared Euclidean distance.
pub fn loss_kd(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("loss_kd", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `⟨softmax(τ(s)), softmax(τ(t))⟩`: estimated probability that `s` and `t`
/// share a class.
pub fn discriminator_h(params: &ModelParams, s: &[f64], t: &[f64]) -> Result<f64> {
    let ps = nn::softmax(&nn::classify(params, s)?);
    let pt = nn::softmax(&nn::classify(params, t)?);
    Ok(ps.iter().zip(&pt).map(|(a, b)| a * b).sum())
}

/// Binary cross-entropy of the discriminator against `same_class`.
pub fn loss_disc(same_class: bool, s: &[f64], t: &[f64], params: &ModelParams) -> Result<f64> {
    let h = discriminator_h(params, s, t)?;
    Ok(bce_term(if same_class { 1.0 } else { 0.0 }, h, DISC_EPS))
}

/// Recorded mini-batch objective.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub total: Var,
    pub ce: Var,
    pub kd: Option<Var>,
    pub disc: Option<Var>,
    /// Positive (same-class) discriminator terms accumulated.
    pub disc_positive: usize,
    /// Negative (other-class) discriminator terms accumulated.
    pub disc_negative: usize,
}

impl BatchObjective {
    pub fn values(&self, tape: &Tape) -> (f64, f64, f64) {
        (
            tape.scalar(self.ce),
            self.kd.map_or(0.0, |v| tape.scalar(v)),
            self.disc.map_or(0.0, |v| tape.scalar(v)),
        )
    }
}

/// Global prototypes indexed by class.
pub(crate) fn prototype_table(globals: &[Prototype], classes: usize) -> Vec<Option<&[f64]>> {
    let mut table = vec![None; classes];
    for p in globals {
        if p.class < classes {
            table[p.class] = Some(p.vector.as_slice());
        }
    }
    table
}

/// Builds the objective for one mini-batch on `tape`.
///
/// Terms with a zero weight are not recorded at all, and the observation index
/// `m` is drawn from `rng` (once per sample) only when the discriminator term is
/// active. Downloaded prototypes and observations enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    tape: &mut Tape,
    model: &BoundModel,
    inputs: &Tensor,
    labels: &[usize],
    globals: &[Prototype],
    obs: &ObservationSet,
    hp: &HyperParams,
    rng: &mut impl Rng,
) -> Result<BatchObjective> {
    let batch = labels.len();
    if batch == 0 || inputs.rows() != batch {
        return Err(Error::dim("batch_objective batch size", batch, inputs.rows()));
    }
    let classes = hp.classes;
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index {
            context: "batch label",
            index: bad,
            limit: classes,
        });
    }
    let inv_b = 1.0 / batch as f64;

    let x = tape.constant(inputs.clone());
    let feats = model.features(tape, x)?;
    let logits = model.classify(tape, feats)?;
    if tape.value(logits).cols() != classes {
        return Err(Error::dim("model classes", classes, tape.value(logits).cols()));
    }

    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather(logp, labels.to_vec())?;
    let ce_sum = tape.sum(picked)?;
    let ce = tape.scale(ce_sum, -inv_b)?;
    let mut total = ce;

    let mut kd = None;
    if hp.lambda_kd != 0.0 {
        let table = prototype_table(globals, classes);
        let d = tape.value(feats).cols();
        let mut targets = Vec::with_capacity(batch * d);
        for &y in labels {
            let proto = table[y].ok_or(Error::MissingClass {
                kind: "global prototype",
                class: y,
            })?;
            if proto.len() != d {
                return Err(Error::dim("global prototype", d, proto.len()));
            }
            targets.extend_from_slice(proto);
        }
        let t = tape.constant(Tensor::matrix(batch, d, targets)?);
        let diff = tape.sub(feats, t)?;
        let sq = tape.square(diff)?;
        let s = tape.sum(sq)?;
        let term = tape.scale(s, inv_b)?;
        let weighted = tape.scale(term, hp.lambda_kd)?;
        total = tape.add(total, weighted)?;
        kd = Some(term);
    }

    let (mut pos, mut neg) = (0, 0);
    let mut disc = None;
    if hp.lambda_disc != 0.0 {
        let m_down = hp.m_down;
        let d = tape.value(feats).cols();
        for c in 0..classes {
            let have = obs.per_class.get(c).map_or(0, Vec::len);
            if have < m_down {
                return Err(Error::MissingClass {
                    kind: "observation",
                    class: c,
                });
            }
        }
        let picks: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..m_down)).collect();
        let ps = tape.softmax(logits)?;
        let mut acc: Option<Var> = None;
        for m in 0..m_down {
            if !picks.contains(&m) {
                continue;
            }
            let rows: Vec<&[f64]> = (0..classes).map(|c| obs.per_class[c][m].vector.as_slice()).collect();
            let t = tape.constant(Tensor::from_rows(&rows, d)?);
            let zt = model.classify(tape, t)?;
            let pt = tape.softmax(zt)?;
            let h = tape.matmul_nt(ps, pt)?;
            let mut target = Tensor::zeros(&[batch, classes]);
            let mut weight = Tensor::zeros(&[batch, classes]);
            for (i, (&y, &mi)) in labels.iter().zip(&picks).enumerate() {
                if mi != m {
                    continue;
                }
                target.row_mut(i)[y] = 1.0;
                weight.row_mut(i).fill(1.0);
                pos += 1;
                neg += classes - 1;
            }
            let term = tape.binary_cross_entropy(h, target, weight, DISC_EPS)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let summed = acc.expect("at least one sample picks some m");
        let term = tape.scale(summed, inv_b)?;
        let weighted = tape.scale(term, hp.lambda_disc)?;
        total = tape.add(total, weighted)?;
        disc = Some(term);
    }

    Ok(BatchObjective {
        total,
        ce,
        kd,
        disc,
        disc_positive: pos,
        disc_negative: neg,
    })
}
