//! Client-side round logic: local training on the combined objective, local
//! prototypes and `n_avg`-sample observations.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{BoundModel, ModelParams, Optimizer, OptimizerKind, Tape, Tensor, Var};
use crate::objectives::{batch_objective, HyperParams};
use crate::protocol::{ClientId, ClientMessage, Observation, ObservationSet, Prototype, ServerReply, ServerState, Source};
use crate::seed::derive_seed;

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: ClientId,
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub data: Dataset,
    /// Mini-batch shuffling and per-sample observation index draws.
    train_rng: ChaCha8Rng,
    /// Observation sampling for uploads.
    sample_rng: ChaCha8Rng,
}

impl ClientState {
    /// `seed` should already be client specific (see [`derive_seed`]).
    pub fn new(id: ClientId, params: ModelParams, data: Dataset, optimizer: OptimizerKind, seed: u64) -> Self {
        let optimizer = Optimizer::new(optimizer, &params);
        Self {
            id,
            params,
            optimizer,
            data,
            train_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "train", 0)),
            sample_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "observations", 0)),
        }
    }

    pub fn train_rng(&self) -> &ChaCha8Rng {
        &self.train_rng
    }

    pub fn sample_rng(&self) -> &ChaCha8Rng {
        &self.sample_rng
    }

    fn all_features(&self) -> Result<Tensor> {
        self.params.features_batch(&self.data.inputs)
    }
}

/// Mean loss components over the mini-batches of one local update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LocalReport {
    pub loss_ce: f64,
    pub loss_kd: f64,
    pub loss_disc: f64,
    pub batches: usize,
    /// The shard was empty; nothing was trained.
    pub absent: bool,
    pub disc_positive: usize,
    pub disc_negative: usize,
}

/// Per-batch objective builder: returns the loss to differentiate and its
/// (CE, KD, disc) components.
pub(crate) type ObjectiveFn<'a> =
    dyn FnMut(&mut Tape, &BoundModel, &Tensor, &[usize], &mut ChaCha8Rng) -> Result<(Var, [f64; 3], (usize, usize))> + 'a;

/// `epochs` passes over freshly shuffled mini-batches, one optimizer step each.
pub(crate) fn train_epochs(client: &mut ClientState, epochs: usize, batch_size: usize, lr: f64, objective: &mut ObjectiveFn<'_>) -> Result<LocalReport> {
    let n = client.data.len();
    if n == 0 {
        return Ok(LocalReport {
            absent: true,
            ..LocalReport::default()
        });
    }
    let mut report = LocalReport::default();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(&mut client.train_rng);
        for chunk in order.chunks(batch_size) {
            let batch = client.data.select(chunk);
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&client.params, &mut tape);
            let (loss, parts, (pos, neg)) = objective(&mut tape, &bound, &batch.inputs, &batch.labels, &mut client.train_rng)?;
            tape.backward(loss)?;
            let grads = bound.gradients(&tape, &client.params);
            client.optimizer.step(&mut client.params, &grads, lr)?;
            report.loss_ce += parts[0];
            report.loss_kd += parts[1];
            report.loss_disc += parts[2];
            report.batches += 1;
            report.disc_positive += pos;
            report.disc_negative += neg;
        }
    }
    let b = report.batches as f64;
    report.loss_ce /= b;
    report.loss_kd /= b;
    report.loss_disc /= b;
    Ok(report)
}

/// Local training on `L_CE + λ_KD·L_KD + λ_disc·L_disc` for `E` epochs.
pub fn local_update(client: &mut ClientState, globals: &[Prototype], obs: &ObservationSet, hp: &HyperParams) -> Result<LocalReport> {
    hp.validate()?;
    let mut objective = |tape: &mut Tape, bound: &BoundModel, x: &Tensor, y: &[usize], rng: &mut ChaCha8Rng| {
        let obj = batch_objective(tape, bound, x, y, globals, obs, hp, rng)?;
        let (ce, kd, disc) = obj.values(tape);
        Ok((obj.total, [ce, kd, disc], (obj.disc_positive, obj.disc_negative)))
    };
    train_epochs(client, hp.local_epochs, hp.batch_size, hp.lr, &mut objective)
}

fn prototypes_from_features(feats: &Tensor, data: &Dataset, owner: ClientId) -> Vec<Prototype> {
    let d = feats.cols();
    let mut sums = vec![vec![0.0; d]; data.classes];
    let mut counts = vec![0usize; data.classes];
    for (i, &y) in data.labels.iter().enumerate() {
        for (s, v) in sums[y].iter_mut().zip(feats.row(i)) {
            *s += v;
        }
        counts[y] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(class, (sum, n))| Prototype {
            class,
            vector: sum.into_iter().map(|s| s / n as f64).collect(),
            source: Source::Client(owner),
            support: n,
        })
        .collect()
}

fn observation_from_features(feats: &Tensor, members: &[usize], n_avg: usize, class: usize, owner: ClientId, rng: &mut ChaCha8Rng) -> Option<Observation> {
    if members.is_empty() {
        return None;
    }
    let k = n_avg.min(members.len());
    let mut mean = vec![0.0; feats.cols()];
    for i in index::sample(rng, members.len(), k) {
        for (m, v) in mean.iter_mut().zip(feats.row(members[i])) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    Some(Observation {
        class,
        vector: mean,
        source: Source::Client(owner),
    })
}

/// Mean feature vector of every locally present class.
pub fn compute_local_prototypes(client: &ClientState) -> Result<Vec<Prototype>> {
    Ok(prototypes_from_features(&client.all_features()?, &client.data, client.id))
}

/// Average of `min(n_avg, count)` distinct class-`class` samples; `None` when
/// the client holds no sample of that class.
pub fn sample_observation(client: &mut ClientState, class: usize, n_avg: usize) -> Result<Option<Observation>> {
    if class >= client.data.classes {
        return Err(Error::Index {
            context: "sample_observation class",
            index: class,
            limit: client.data.classes,
        });
    }
    let members = client.data.class_indices(class);
    if members.is_empty() {
        return Ok(None);
    }
    // only the member rows are needed; features are computed row-independently
    let sub = client.data.select(&members);
    let feats = client.params.features_batch(&sub.inputs)?;
    let local: Vec<usize> = (0..members.len()).collect();
    Ok(observation_from_features(&feats, &local, n_avg, class, client.id, &mut client.sample_rng))
}

/// What a client sends at the end of a round: its local prototypes and
/// `M↑` observations for every class it holds.
pub fn round_uploads(client: &mut ClientState, hp: &HyperParams) -> Result<(Vec<Prototype>, Vec<Observation>)> {
    let feats = client.all_features()?;
    let protos = prototypes_from_features(&feats, &client.data, client.id);
    let mut obs = Vec::new();
    for class in 0..client.data.classes {
        let members = client.data.class_indices(class);
        for _ in 0..hp.m_up {
            if let Some(o) = observation_from_features(&feats, &members, hp.n_avg, class, client.id, &mut client.sample_rng) {
                obs.push(o);
            }
        }
    }
    Ok((protos, obs))
}

/// One round of the relay protocol: per client download, train, upload; then
/// the server aggregates prototypes and stores observations.
pub fn run_global_round(server: &mut ServerState, clients: &mut [ClientState], hp: &HyperParams) -> Result<Vec<LocalReport>> {
    let mut reports = Vec::with_capacity(clients.len());
    for client in clients.iter_mut() {
        let id = client.id;
        let globals = match server.handle(id, ClientMessage::DownloadGlobal)? {
            ServerReply::Globals(g) => g,
            other => return Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        };
        let obs = match server.handle(id, ClientMessage::DownloadObservations { m_down: hp.m_down })? {
            ServerReply::Observations(o) => o,
            other => return Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        };
        reports.push(local_update(client, &globals, &obs, hp)?);
        let (protos, observations) = round_uploads(client, hp)?;
        server.handle(id, ClientMessage::UploadPrototypes(protos))?;
        server.handle(id, ClientMessage::UploadObservations(observations))?;
    }
    server.aggregate_prototypes();
    server.store_observations();
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_mixture;
    use crate::nn::Architecture;
    use rand::Rng;

    fn client_with(data: Dataset, seed: u64) -> ClientState {
        let arch = Architecture::new(data.dim(), vec![6, 4], data.classes).unwrap();
        ClientState::new(0, ModelParams::init(&arch, seed), data, OptimizerKind::Adam, seed)
    }

    fn features_of(c: &ClientState, i: usize) -> Vec<f64> {
        crate::nn::forward_features(&c.params, c.data.input(i)).unwrap()
    }

    #[test]
    fn one_sample_per_class_prototype_is_its_feature() {
        let data = synth_mixture(3, 4, 1, 2.0, 0).unwrap();
        let c = client_with(data, 1);
        let protos = compute_local_prototypes(&c).unwrap();
        assert_eq!(protos.len(), 3);
        for p in protos {
            assert_eq!(p.vector, features_of(&c, p.class));
        }
    }

    #[test]
    fn duplicating_samples_does_not_move_prototype() {
        let data = synth_mixture(2, 4, 3, 2.0, 0).unwrap();
        let single = client_with(data.clone(), 2);
        let doubled = client_with(Dataset::concat(&[data.clone(), data]).unwrap(), 2);
        let a = compute_local_prototypes(&single).unwrap();
        let b = compute_local_prototypes(&doubled).unwrap();
        for (p, q) in a.iter().zip(&b) {
            for (x, y) in p.vector.iter().zip(&q.vector) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn five_sample_prototype_matches_naive_mean() {
        let data = synth_mixture(1, 4, 5, 1.0, 0).unwrap();
        let c = client_with(data, 0);
        let p = &compute_local_prototypes(&c).unwrap()[0];
        let mut mean = vec![0.0; 4];
        for i in 0..5 {
            let f = features_of(&c, i);
            for k in 0..4 {
                mean[k] += f[k];
            }
        }
        for k in 0..4 {
            assert!((p.vector[k] - mean[k] / 5.0).abs() < 1e-15);
        }
        assert_eq!(p.support, 5);
    }

    #[test]
    fn absent_class_is_omitted() {
        let mut data = synth_mixture(3, 4, 2, 1.0, 0).unwrap();
        data = data.select(&data.class_indices(1));
        let mut c = client_with(data, 0);
        let protos = compute_local_prototypes(&c).unwrap();
        assert_eq!(protos.iter().map(|p| p.class).collect::<Vec<_>>(), vec![1]);
        assert!(sample_observation(&mut c, 0, 10).unwrap().is_none());
    }

    #[test]
    fn single_sample_observation_is_that_feature() {
        let data = synth_mixture(2, 4, 1, 1.0, 3).unwrap();
        let mut c = client_with(data, 0);
        let o = sample_observation(&mut c, 1, 10).unwrap().unwrap();
        assert_eq!(o.vector, features_of(&c, 1));
    }

    #[test]
    fn full_set_observation_equals_prototype() {
        let data = synth_mixture(2, 4, 7, 1.0, 3).unwrap();
        let mut c = client_with(data, 0);
        let proto = compute_local_prototypes(&c).unwrap()[1].clone();
        let o = sample_observation(&mut c, 1, 7).unwrap().unwrap();
        for (a, b) in o.vector.iter().zip(&proto.vector) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn observation_replays_shared_rng_draw() {
        let data = synth_mixture(1, 4, 37, 1.0, 0).unwrap();
        let mut c = client_with(data, 0);
        let mut replay = c.sample_rng().clone();
        let o = sample_observation(&mut c, 0, 10).unwrap().unwrap();
        let picked = index::sample(&mut replay, 37, 10);
        let mut mean = vec![0.0; 4];
        for i in picked {
            let f = features_of(&c, i);
            for k in 0..4 {
                mean[k] += f[k];
            }
        }
        for k in 0..4 {
            assert!((o.vector[k] - mean[k] / 10.0).abs() < 1e-15);
        }
    }

    #[test]
    fn observation_is_convex_combination() {
        let data = synth_mixture(1, 4, 20, 1.0, 4).unwrap();
        let mut c = client_with(data, 5);
        let feats: Vec<Vec<f64>> = (0..20).map(|i| features_of(&c, i)).collect();
        for _ in 0..20 {
            let o = sample_observation(&mut c, 0, 6).unwrap().unwrap();
            for k in 0..4 {
                let lo = feats.iter().map(|f| f[k]).fold(f64::INFINITY, f64::min);
                let hi = feats.iter().map(|f| f[k]).fold(f64::NEG_INFINITY, f64::max);
                assert!(o.vector[k] >= lo - 1e-12 && o.vector[k] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn empty_shard_leaves_params_untouched() {
        let mut c = client_with(Dataset::empty(4, 3), 0);
        let before = c.params.clone();
        let hp = HyperParams::defaults(3);
        let report = local_update(&mut c, &[], &ObservationSet::default(), &hp).unwrap();
        assert!(report.absent);
        assert_eq!(c.params, before);
    }

    #[test]
    fn zero_lambda_update_is_plain_cross_entropy_training() {
        let data = synth_mixture(3, 4, 10, 2.0, 1).unwrap();
        let mut a = client_with(data.clone(), 9);
        let mut b = client_with(data, 9);
        let hp = HyperParams::defaults(3).independent();
        local_update(&mut a, &[], &ObservationSet::default(), &hp).unwrap();

        // hand-rolled CE loop with the same shuffle stream
        let mut rng = b.train_rng.clone();
        let mut order: Vec<usize> = (0..b.data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch_size) {
            let batch = b.data.select(chunk);
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&b.params, &mut tape);
            let x = tape.constant(batch.inputs.clone());
            let f = bound.features(&mut tape, x).unwrap();
            let z = bound.classify(&mut tape, f).unwrap();
            let lp = tape.log_softmax(z).unwrap();
            let g = tape.gather(lp, batch.labels.clone()).unwrap();
            let s = tape.sum(g).unwrap();
            let loss = tape.scale(s, -1.0 / chunk.len() as f64).unwrap();
            tape.backward(loss).unwrap();
            let grads = bound.gradients(&tape, &b.params);
            b.optimizer.step(&mut b.params, &grads, hp.lr).unwrap();
        }
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn single_step_descends_in_most_trials() {
        let mut improved = 0;
        for trial in 0..100u64 {
            let data = synth_mixture(3, 4, 4, 1.5, trial).unwrap();
            let mut c = client_with(data, trial + 1000);
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let globals: Vec<Prototype> = (0..3)
                .map(|k| Prototype {
                    class: k,
                    vector: (0..4).map(|_| rng.gen_range(0.0..0.5)).collect(),
                    source: Source::Global,
                    support: 1,
                })
                .collect();
            let obs = ObservationSet {
                per_class: (0..3)
                    .map(|k| {
                        vec![Observation {
                            class: k,
                            vector: (0..4).map(|_| rng.gen_range(0.0..0.5)).collect(),
                            source: Source::Server,
                        }]
                    })
                    .collect(),
            };
            let hp = HyperParams {
                batch_size: 64,
                lr: 1e-3,
                ..HyperParams::defaults(3)
            };
            let data = c.data.clone();
            let eval = |p: &ModelParams| {
                let mut tape = Tape::new();
                let bound = BoundModel::bind(p, &mut tape);
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let o = batch_objective(&mut tape, &bound, &data.inputs, &data.labels, &globals, &obs, &hp, &mut r).unwrap();
                tape.scalar(o.total)
            };
            let before = eval(&c.params);
            local_update(&mut c, &globals, &obs, &hp).unwrap();
            if eval(&c.params) < before {
                improved += 1;
            }
        }
        assert!(improved >= 95, "only {improved}/100 trials descended");
    }
}
