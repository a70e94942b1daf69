//! Reference methods: independent learning, centralized learning, FedAvg and
//! federated distillation over mean per-class logits.

use rand_chacha::ChaCha8Rng;

use crate::client::{local_update, train_epochs, ClientState, LocalReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{tensor, BoundModel, ModelParams, Tape, Tensor};
use crate::objectives::HyperParams;
use crate::protocol::ObservationSet;

/// Weighted parameterwise mean of identically shaped models.
///
/// Accumulated as a running mean so that identical inputs return themselves
/// exactly. Zero-weight models are ignored.
pub fn fedavg_aggregate(models: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if models.len() != weights.len() {
        return Err(Error::dim("fedavg weights", models.len(), weights.len()));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Config("fedavg weights must be finite and non-negative".into()));
    }
    let mut iter = models.iter().zip(weights).filter(|(_, &w)| w > 0.0);
    let (first, &w0) = iter
        .next()
        .ok_or_else(|| Error::Usage("fedavg needs at least one model with positive weight".into()))?;
    let arch = first.architecture();
    let mut mean = first.clone();
    let mut total = w0;
    for (m, &w) in iter {
        if m.architecture() != arch {
            return Err(Error::dim("fedavg architecture", format!("{arch:?}"), format!("{:?}", m.architecture())));
        }
        total += w;
        let frac = w / total;
        for (acc, t) in mean.tensors_mut().into_iter().zip(m.tensors()) {
            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += frac * (v - *a);
            }
        }
    }
    Ok(mean)
}

/// Independent learning: local training with both collaboration weights at zero.
pub fn il_round(clients: &mut [ClientState], hp: &HyperParams) -> Result<Vec<LocalReport>> {
    let hp = hp.independent();
    clients
        .iter_mut()
        .map(|c| local_update(c, &[], &ObservationSet::default(), &hp))
        .collect()
}

/// Centralized learning: one client holding the union of all shards.
pub fn cl_client(template: &ClientState, shards: &[Dataset]) -> Result<ClientState> {
    let mut c = template.clone();
    c.data = Dataset::concat(shards)?;
    Ok(c)
}

/// FedAvg state: the broadcast global model.
#[derive(Debug, Clone)]
pub struct FedAvgServer {
    pub global: ModelParams,
}

/// Broadcast, local CE training, sample-count-weighted averaging; every client
/// ends the round holding the new global model.
pub fn fl_round(server: &mut FedAvgServer, clients: &mut [ClientState], hp: &HyperParams) -> Result<Vec<LocalReport>> {
    let hp = hp.independent();
    let mut reports = Vec::with_capacity(clients.len());
    for c in clients.iter_mut() {
        c.params = server.global.clone();
        reports.push(local_update(c, &[], &ObservationSet::default(), &hp)?);
    }
    let models: Vec<ModelParams> = clients.iter().map(|c| c.params.clone()).collect();
    let weights: Vec<f64> = clients.iter().map(|c| c.data.len() as f64).collect();
    if weights.iter().any(|&w| w > 0.0) {
        server.global = fedavg_aggregate(&models, &weights)?;
    }
    for c in clients.iter_mut() {
        c.params = server.global.clone();
    }
    Ok(reports)
}

/// Mean logits of one class on one client.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPrototype {
    pub class: usize,
    pub logits: Vec<f64>,
    pub count: usize,
}

pub fn local_mean_logits(client: &ClientState) -> Result<Vec<LogitPrototype>> {
    let logits = client.params.logits_batch(&client.data.inputs)?;
    let c = client.params.classes();
    let mut sums = vec![vec![0.0; c]; client.data.classes];
    let mut counts = vec![0usize; client.data.classes];
    for (i, &y) in client.data.labels.iter().enumerate() {
        for (s, v) in sums[y].iter_mut().zip(logits.row(i)) {
            *s += v;
        }
        counts[y] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(class, (s, n))| LogitPrototype {
            class,
            logits: s.into_iter().map(|v| v / n as f64).collect(),
            count: n,
        })
        .collect())
}

/// Relay for federated distillation: global mean logits per class.
#[derive(Debug, Clone)]
pub struct FdServer {
    pub global: Vec<Option<Vec<f64>>>,
    staged: Vec<Vec<LogitPrototype>>,
}

impl FdServer {
    pub fn new(classes: usize) -> Self {
        Self {
            global: vec![None; classes],
            staged: Vec::new(),
        }
    }

    pub fn upload(&mut self, protos: Vec<LogitPrototype>) {
        self.staged.push(protos);
    }

    /// Unweighted mean over the clients that sent each class.
    pub fn aggregate(&mut self) {
        let classes = self.global.len();
        let mut sums: Vec<Option<Vec<f64>>> = vec![None; classes];
        let mut counts = vec![0usize; classes];
        for protos in self.staged.drain(..) {
            for p in protos {
                let acc = sums[p.class].get_or_insert_with(|| vec![0.0; p.logits.len()]);
                for (a, v) in acc.iter_mut().zip(&p.logits) {
                    *a += v;
                }
                counts[p.class] += 1;
            }
        }
        for (class, sum) in sums.into_iter().enumerate() {
            if let Some(s) = sum {
                let n = counts[class] as f64;
                self.global[class] = Some(s.into_iter().map(|v| v / n).collect());
            }
        }
    }
}

/// Local training on `L_CE + λ_FD · mean_i KL(softmax(teacher[y_i]) ‖ softmax(z_i))`.
/// Samples whose class has no teacher yet contribute only cross-entropy.
pub fn fd_local_update(client: &mut ClientState, teachers: &[Option<Vec<f64>>], hp: &HyperParams, lambda_fd: f64) -> Result<LocalReport> {
    hp.validate()?;
    let teacher_probs: Vec<Option<Vec<f64>>> = teachers.iter().map(|t| t.as_ref().map(|z| crate::nn::softmax(z))).collect();
    let mut objective = |tape: &mut Tape, bound: &BoundModel, x: &Tensor, y: &[usize], _rng: &mut ChaCha8Rng| {
        let inv_b = 1.0 / y.len() as f64;
        let xv = tape.constant(x.clone());
        let feats = bound.features(tape, xv)?;
        let logits = bound.classify(tape, feats)?;
        let classes = tape.value(logits).cols();
        let logp = tape.log_softmax(logits)?;
        let picked = tape.gather(logp, y.to_vec())?;
        let s = tape.sum(picked)?;
        let ce = tape.scale(s, -inv_b)?;
        let ce_value = tape.scalar(ce);
        if lambda_fd == 0.0 {
            return Ok((ce, [ce_value, 0.0, 0.0], (0, 0)));
        }
        let mut p = Tensor::zeros(&[y.len(), classes]);
        let mut entropy_part = 0.0;
        let mut any = false;
        for (i, &label) in y.iter().enumerate() {
            if let Some(Some(t)) = teacher_probs.get(label) {
                if t.len() != classes {
                    return Err(Error::dim("teacher logits", classes, t.len()));
                }
                p.row_mut(i).copy_from_slice(t);
                entropy_part += t.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
                any = true;
            }
        }
        if !any {
            return Ok((ce, [ce_value, 0.0, 0.0], (0, 0)));
        }
        let pv = tape.constant(p);
        let cross = tape.mul(pv, logp)?;
        let cross = tape.sum(cross)?;
        let neg_cross = tape.scale(cross, -1.0)?;
        let ent = tape.constant(Tensor::scalar(entropy_part));
        let kl_sum = tape.add(neg_cross, ent)?;
        let kl = tape.scale(kl_sum, inv_b)?;
        let kl_value = tape.scalar(kl);
        let weighted = tape.scale(kl, lambda_fd)?;
        let total = tape.add(ce, weighted)?;
        Ok((total, [ce_value, kl_value, 0.0], (0, 0)))
    };
    train_epochs(client, hp.local_epochs, hp.batch_size, hp.lr, &mut objective)
}

/// One FD round: download last round's teachers, train, upload fresh mean logits.
pub fn fd_round(server: &mut FdServer, clients: &mut [ClientState], hp: &HyperParams, lambda_fd: f64) -> Result<Vec<LocalReport>> {
    let teachers = server.global.clone();
    let mut reports = Vec::with_capacity(clients.len());
    for c in clients.iter_mut() {
        reports.push(fd_local_update(c, &teachers, hp, lambda_fd)?);
        server.upload(local_mean_logits(c)?);
    }
    server.aggregate();
    Ok(reports)
}

/// `KL(p ‖ softmax(z))` for one sample; used by tests as an oracle.
pub fn kl_to_logits(p: &[f64], z: &[f64]) -> f64 {
    let mut logq = vec![0.0; z.len()];
    tensor::log_softmax_slice(z, &mut logq);
    p.iter().zip(&logq).filter(|(&pi, _)| pi > 0.0).map(|(pi, lq)| pi * (pi.ln() - lq)).sum()
}
