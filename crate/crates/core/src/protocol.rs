//! Relay server: global prototype aggregation, per-class observation buffers
//! and communication accounting.
//!
//! The server only ever sees `d′`-dimensional feature vectors. Within a round,
//! uploads are staged and become visible to downloads only after
//! [`ServerState::aggregate_prototypes`] and [`ServerState::store_observations`]
//! close the round, so every download in round `r` serves round `r − 1` state.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};

pub type ClientId = usize;

/// Origin of a vector held by the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Source {
    /// Aggregated across clients.
    Global,
    /// Random content created at server initialization.
    Server,
    Client(ClientId),
}

/// Per-class mean feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class: usize,
    pub vector: Vec<f64>,
    pub source: Source,
    /// Number of samples averaged; used only by weighted aggregation.
    pub support: usize,
}

/// One realization of the teacher signal: the mean of up to `n_avg`
/// same-class feature vectors from a single client.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub class: usize,
    pub vector: Vec<f64>,
    pub source: Source,
}

/// Downloaded observations, indexed `[class][m]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationSet {
    pub per_class: Vec<Vec<Observation>>,
}

/// Everything a client can send. Payloads are feature vectors only.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    DownloadGlobal,
    DownloadObservations { m_down: usize },
    UploadPrototypes(Vec<Prototype>),
    UploadObservations(Vec<Observation>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerReply {
    Globals(Vec<Prototype>),
    Observations(ObservationSet),
    Ack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub clients: usize,
    pub m_up: usize,
    /// Standard deviation of the random initial prototypes and observations.
    pub init_std: f64,
    /// Weight client prototypes by their sample support instead of a plain mean.
    pub weighted: bool,
    pub seed: u64,
}

impl ServerConfig {
    pub fn new(classes: usize, feature_dim: usize, clients: usize, m_up: usize, seed: u64) -> Self {
        Self {
            classes,
            feature_dim,
            clients,
            m_up,
            init_std: 0.1,
            weighted: false,
            seed,
        }
    }

    /// Per-class buffer capacity: one generation of uploads.
    pub fn capacity(&self) -> usize {
        self.clients * self.m_up
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Traffic {
    pub uplink: u64,
    pub downlink: u64,
}

/// Floats moved per round and client.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommLedger {
    pub rounds: Vec<BTreeMap<ClientId, Traffic>>,
}

impl CommLedger {
    pub fn client_round(&self, round: usize, client: ClientId) -> Traffic {
        self.rounds
            .get(round)
            .and_then(|r| r.get(&client))
            .copied()
            .unwrap_or_default()
    }

    pub fn round_total(&self, round: usize) -> Traffic {
        self.rounds.get(round).map_or_else(Traffic::default, |r| {
            r.values().fold(Traffic::default(), |a, t| Traffic {
                uplink: a.uplink + t.uplink,
                downlink: a.downlink + t.downlink,
            })
        })
    }

    pub fn total(&self) -> Traffic {
        (0..self.rounds.len()).fold(Traffic::default(), |a, r| {
            let t = self.round_total(r);
            Traffic {
                uplink: a.uplink + t.uplink,
                downlink: a.downlink + t.downlink,
            }
        })
    }

    fn add(&mut self, round: usize, client: ClientId, up: u64, down: u64) {
        if self.rounds.len() <= round {
            self.rounds.resize_with(round + 1, BTreeMap::new);
        }
        let t = self.rounds[round].entry(client).or_default();
        t.uplink += up;
        t.downlink += down;
    }
}

/// One line of the round log (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLogRecord {
    pub round: usize,
    pub uplink_floats: u64,
    pub downlink_floats: u64,
    pub buffer_sizes: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Entry {
    seq: u64,
    obs: Observation,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    cfg: ServerConfig,
    globals: Vec<Vec<f64>>,
    staged_protos: BTreeMap<ClientId, Vec<Prototype>>,
    staged_obs: BTreeMap<ClientId, Vec<Observation>>,
    buffers: Vec<Vec<Entry>>,
    next_seq: u64,
    round: usize,
    rng: ChaCha8Rng,
    ledger: CommLedger,
}

/// Random prototypes and `N·M↑` random observations per class.
pub fn init_server(cfg: ServerConfig) -> Result<ServerState> {
    if cfg.classes == 0 || cfg.feature_dim == 0 || cfg.clients == 0 || cfg.m_up == 0 {
        return Err(Error::Config(format!("server dimensions must be positive: {cfg:?}")));
    }
    if !(cfg.init_std >= 0.0 && cfg.init_std.is_finite()) {
        return Err(Error::Config(format!("init_std must be finite and >= 0, got {}", cfg.init_std)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let std = cfg.init_std;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        if std == 0.0 {
            vec![0.0; cfg.feature_dim]
        } else {
            (0..cfg.feature_dim).map(|_| normal.sample(rng)).collect()
        }
    };
    let globals: Vec<Vec<f64>> = (0..cfg.classes).map(|_| draw(&mut rng)).collect();
    let mut next_seq = 0;
    let mut buffers = Vec::with_capacity(cfg.classes);
    for class in 0..cfg.classes {
        let mut buf = Vec::with_capacity(cfg.capacity());
        for _ in 0..cfg.capacity() {
            buf.push(Entry {
                seq: next_seq,
                obs: Observation {
                    class,
                    vector: draw(&mut rng),
                    source: Source::Server,
                },
            });
            next_seq += 1;
        }
        buffers.push(buf);
    }
    Ok(ServerState {
        cfg,
        globals,
        staged_protos: BTreeMap::new(),
        staged_obs: BTreeMap::new(),
        buffers,
        next_seq,
        round: 0,
        rng,
        ledger: CommLedger::default(),
    })
}

impl ServerState {
    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    /// Completed rounds.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn global_vectors(&self) -> &[Vec<f64>] {
        &self.globals
    }

    /// Committed observations of one class, in current (shuffled) order.
    pub fn buffer(&self, class: usize) -> Vec<&Observation> {
        self.buffers[class].iter().map(|e| &e.obs).collect()
    }

    pub fn buffer_sizes(&self) -> Vec<usize> {
        self.buffers.iter().map(Vec::len).collect()
    }

    fn check_vector(&self, class: usize, v: &[f64]) -> Result<()> {
        if class >= self.cfg.classes {
            return Err(Error::Protocol(format!(
                "class {class} out of range (C = {})",
                self.cfg.classes
            )));
        }
        if v.len() != self.cfg.feature_dim {
            return Err(Error::Protocol(format!(
                "vector for class {class} has length {}, expected d' = {}",
                v.len(),
                self.cfg.feature_dim
            )));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Protocol(format!("non-finite vector for class {class}")));
        }
        Ok(())
    }

    fn check_client(&self, client: ClientId) -> Result<()> {
        if client >= self.cfg.clients {
            return Err(Error::Protocol(format!(
                "unknown client {client} (N = {})",
                self.cfg.clients
            )));
        }
        Ok(())
    }

    /// Dispatches one client message.
    pub fn handle(&mut self, client: ClientId, msg: ClientMessage) -> Result<ServerReply> {
        match msg {
            ClientMessage::DownloadGlobal => Ok(ServerReply::Globals(self.download_global(client)?)),
            ClientMessage::DownloadObservations { m_down } => {
                Ok(ServerReply::Observations(self.download_observations(client, m_down)?))
            }
            ClientMessage::UploadPrototypes(p) => {
                self.upload_prototypes(client, p)?;
                Ok(ServerReply::Ack)
            }
            ClientMessage::UploadObservations(o) => {
                self.upload_observations(client, o)?;
                Ok(ServerReply::Ack)
            }
        }
    }

    /// Stages one client's local prototypes for this round's aggregation.
    pub fn upload_prototypes(&mut self, client: ClientId, protos: Vec<Prototype>) -> Result<()> {
        self.check_client(client)?;
        if self.staged_protos.contains_key(&client) {
            return Err(Error::Protocol(format!(
                "client {client} already uploaded prototypes in round {}",
                self.round
            )));
        }
        let mut seen = vec![false; self.cfg.classes];
        for p in &protos {
            self.check_vector(p.class, &p.vector)?;
            if std::mem::replace(&mut seen[p.class], true) {
                return Err(Error::Protocol(format!("duplicate prototype for class {}", p.class)));
            }
        }
        let floats = (protos.len() * self.cfg.feature_dim) as u64;
        let staged = protos
            .into_iter()
            .map(|p| Prototype {
                source: Source::Client(client),
                ..p
            })
            .collect();
        self.staged_protos.insert(client, staged);
        self.ledger.add(self.round, client, floats, 0);
        Ok(())
    }

    /// Stages observations; every class sent must carry exactly `M↑` of them.
    pub fn upload_observations(&mut self, client: ClientId, obs: Vec<Observation>) -> Result<()> {
        self.check_client(client)?;
        if self.staged_obs.contains_key(&client) {
            return Err(Error::Protocol(format!(
                "client {client} already uploaded observations in round {}",
                self.round
            )));
        }
        let mut counts = vec![0usize; self.cfg.classes];
        for o in &obs {
            self.check_vector(o.class, &o.vector)?;
            counts[o.class] += 1;
        }
        if let Some((class, &n)) = counts.iter().enumerate().find(|(_, &n)| n != 0 && n != self.cfg.m_up) {
            return Err(Error::Protocol(format!(
                "client {client} sent {n} observations for class {class}, expected M_up = {}",
                self.cfg.m_up
            )));
        }
        let floats = (obs.len() * self.cfg.feature_dim) as u64;
        let staged = obs
            .into_iter()
            .map(|o| Observation {
                source: Source::Client(client),
                ..o
            })
            .collect();
        self.staged_obs.insert(client, staged);
        self.ledger.add(self.round, client, floats, 0);
        Ok(())
    }

    /// Current global prototypes (the previous round's aggregate).
    pub fn download_global(&mut self, client: ClientId) -> Result<Vec<Prototype>> {
        self.check_client(client)?;
        let out: Vec<Prototype> = self
            .globals
            .iter()
            .enumerate()
            .map(|(class, v)| Prototype {
                class,
                vector: v.clone(),
                source: Source::Global,
                support: 0,
            })
            .collect();
        self.ledger.add(self.round, client, 0, (out.len() * self.cfg.feature_dim) as u64);
        Ok(out)
    }

    /// `m_down` uniform draws per class, avoiding the requester's own uploads
    /// whenever the class buffer holds anything else.
    pub fn download_observations(&mut self, client: ClientId, m_down: usize) -> Result<ObservationSet> {
        self.check_client(client)?;
        if m_down == 0 {
            return Err(Error::Protocol("M_down must be positive".into()));
        }
        let mut per_class = Vec::with_capacity(self.cfg.classes);
        for buf in &self.buffers {
            let foreign: Vec<&Entry> = buf.iter().filter(|e| e.obs.source != Source::Client(client)).collect();
            let pool: Vec<&Entry> = if foreign.is_empty() { buf.iter().collect() } else { foreign };
            if pool.is_empty() {
                return Err(Error::Protocol("empty observation buffer".into()));
            }
            let draws = (0..m_down)
                .map(|_| pool[self.rng.gen_range(0..pool.len())].obs.clone())
                .collect();
            per_class.push(draws);
        }
        let floats = (m_down * self.cfg.classes * self.cfg.feature_dim) as u64;
        self.ledger.add(self.round, client, 0, floats);
        Ok(ObservationSet { per_class })
    }

    /// Averages staged prototypes per class, clears them and closes the round.
    /// Classes nobody uploaded keep their previous value.
    pub fn aggregate_prototypes(&mut self) {
        let d = self.cfg.feature_dim;
        let mut sums = vec![vec![0.0; d]; self.cfg.classes];
        let mut weights = vec![0.0; self.cfg.classes];
        for protos in self.staged_protos.values() {
            for p in protos {
                let w = if self.cfg.weighted { p.support as f64 } else { 1.0 };
                for (s, v) in sums[p.class].iter_mut().zip(&p.vector) {
                    *s += w * v;
                }
                weights[p.class] += w;
            }
        }
        for (class, (sum, w)) in sums.into_iter().zip(weights).enumerate() {
            if w > 0.0 {
                self.globals[class] = sum.into_iter().map(|s| s / w).collect();
            }
        }
        self.staged_protos.clear();
        self.round += 1;
    }

    /// Moves staged observations into their class buffers, evicts the oldest
    /// entries beyond capacity and reshuffles each touched buffer.
    pub fn store_observations(&mut self) {
        let staged = std::mem::take(&mut self.staged_obs);
        let mut touched = vec![false; self.cfg.classes];
        for obs in staged.into_values() {
            for o in obs {
                touched[o.class] = true;
                self.buffers[o.class].push(Entry {
                    seq: self.next_seq,
                    obs: o,
                });
                self.next_seq += 1;
            }
        }
        let cap = self.cfg.capacity();
        for (class, buf) in self.buffers.iter_mut().enumerate() {
            if !touched[class] {
                continue;
            }
            while buf.len() > cap {
                let oldest = buf
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, e)| e.seq)
                    .map(|(i, _)| i)
                    .expect("non-empty");
                buf.swap_remove(oldest);
            }
            buf.shuffle(&mut self.rng);
        }
    }

    pub fn comm_report(&self) -> CommLedger {
        self.ledger.clone()
    }

    pub fn round_log_record(&self, round: usize) -> RoundLogRecord {
        let t = self.ledger.round_total(round);
        RoundLogRecord {
            round,
            uplink_floats: t.uplink,
            downlink_floats: t.downlink,
            buffer_sizes: self.buffer_sizes(),
        }
    }

    pub fn write_round_log(&self, round: usize, out: &mut impl Write) -> Result<()> {
        serde_json::to_writer(&mut *out, &self.round_log_record(round))?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize, d: usize, n: usize, m_up: usize) -> ServerConfig {
        ServerConfig::new(c, d, n, m_up, 0)
    }

    fn proto(class: usize, v: Vec<f64>) -> Prototype {
        Prototype {
            class,
            vector: v,
            source: Source::Client(0),
            support: 1,
        }
    }

    fn obs(class: usize, v: Vec<f64>) -> Observation {
        Observation {
            class,
            vector: v,
            source: Source::Client(0),
        }
    }

    fn snapshot(s: &ServerState) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        (
            s.globals.clone(),
            (0..s.cfg.classes)
                .map(|c| s.buffer(c).iter().map(|o| o.vector.clone()).collect())
                .collect(),
        )
    }

    #[test]
    fn same_seed_same_state() {
        let a = init_server(cfg(4, 3, 2, 1)).unwrap();
        let b = init_server(cfg(4, 3, 2, 1)).unwrap();
        assert_eq!(snapshot(&a), snapshot(&b));
    }

    #[test]
    fn zero_std_gives_zero_prototypes() {
        let mut c = cfg(3, 5, 2, 1);
        c.init_std = 0.0;
        let s = init_server(c).unwrap();
        assert!(s.global_vectors().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn buffers_start_with_n_times_m_up_entries() {
        let s = init_server(cfg(3, 4, 2, 1)).unwrap();
        assert_eq!(s.buffer_sizes(), vec![2, 2, 2]);
        let s = init_server(cfg(3, 4, 5, 3)).unwrap();
        assert_eq!(s.buffer_sizes(), vec![15, 15, 15]);
    }

    #[test]
    fn uploaded_observation_lands_in_buffer() {
        let mut s = init_server(cfg(2, 2, 2, 1)).unwrap();
        s.upload_observations(1, vec![obs(0, vec![9.0, 9.0]), obs(1, vec![7.0, 7.0])]).unwrap();
        s.store_observations();
        assert!(s.buffer(0).iter().any(|o| o.vector == vec![9.0, 9.0] && o.source == Source::Client(1)));
        assert!(s.buffer(1).iter().any(|o| o.vector == vec![7.0, 7.0]));
    }

    #[test]
    fn identical_prototypes_aggregate_to_themselves() {
        let mut s = init_server(cfg(2, 3, 4, 1)).unwrap();
        let p = vec![0.25, -1.5, 3.0];
        for client in 0..4 {
            s.upload_prototypes(client, vec![proto(1, p.clone())]).unwrap();
        }
        s.aggregate_prototypes();
        assert_eq!(s.global_vectors()[1], p);
    }

    #[test]
    fn opposite_prototypes_cancel() {
        let mut s = init_server(cfg(1, 2, 2, 1)).unwrap();
        s.upload_prototypes(0, vec![proto(0, vec![1.5, -2.0])]).unwrap();
        s.upload_prototypes(1, vec![proto(0, vec![-1.5, 2.0])]).unwrap();
        s.aggregate_prototypes();
        assert_eq!(s.global_vectors()[0], vec![0.0, 0.0]);
    }

    #[test]
    fn single_client_aggregate_is_identity() {
        let mut s = init_server(cfg(2, 2, 1, 1)).unwrap();
        s.upload_prototypes(0, vec![proto(0, vec![1.0, 2.0]), proto(1, vec![3.0, 4.0])]).unwrap();
        s.aggregate_prototypes();
        assert_eq!(s.global_vectors(), &[vec![1.0, 2.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn three_client_mean_matches_naive_accumulation() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = 6;
        let vs: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let mut s = init_server(cfg(1, d, 3, 1)).unwrap();
        for (c, v) in vs.iter().enumerate() {
            s.upload_prototypes(c, vec![proto(0, v.clone())]).unwrap();
        }
        s.aggregate_prototypes();
        for k in 0..d {
            let mut acc = 0.0;
            for v in &vs {
                acc += v[k];
            }
            assert!((s.global_vectors()[0][k] - acc / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_aggregation_uses_support() {
        let mut c = cfg(1, 1, 2, 1);
        c.weighted = true;
        let mut s = init_server(c).unwrap();
        let mut a = proto(0, vec![1.0]);
        a.support = 3;
        let mut b = proto(0, vec![5.0]);
        b.support = 1;
        s.upload_prototypes(0, vec![a]).unwrap();
        s.upload_prototypes(1, vec![b]).unwrap();
        s.aggregate_prototypes();
        assert_eq!(s.global_vectors()[0], vec![2.0]);
    }

    #[test]
    fn classes_without_uploads_keep_previous_value_and_empty_aggregate_is_noop() {
        let mut s = init_server(cfg(3, 2, 2, 1)).unwrap();
        let before = s.global_vectors().to_vec();
        s.aggregate_prototypes();
        assert_eq!(s.global_vectors(), before.as_slice());
        s.upload_prototypes(0, vec![proto(1, vec![4.0, 4.0])]).unwrap();
        s.aggregate_prototypes();
        assert_eq!(s.global_vectors()[0], before[0]);
        assert_eq!(s.global_vectors()[2], before[2]);
        assert_eq!(s.global_vectors()[1], vec![4.0, 4.0]);
    }

    #[test]
    fn duplicate_uploads_are_rejected() {
        let mut s = init_server(cfg(2, 2, 2, 1)).unwrap();
        s.upload_prototypes(0, vec![proto(0, vec![1.0, 1.0])]).unwrap();
        assert!(matches!(s.upload_prototypes(0, vec![proto(1, vec![1.0, 1.0])]), Err(Error::Protocol(_))));
        s.upload_observations(0, vec![obs(0, vec![1.0, 1.0])]).unwrap();
        assert!(matches!(s.upload_observations(0, vec![obs(1, vec![1.0, 1.0])]), Err(Error::Protocol(_))));
        // next round is open again
        s.aggregate_prototypes();
        s.store_observations();
        s.upload_prototypes(0, vec![proto(0, vec![1.0, 1.0])]).unwrap();
    }

    #[test]
    fn wrong_observation_count_is_rejected() {
        let mut s = init_server(cfg(2, 2, 2, 2)).unwrap();
        let err = s.upload_observations(0, vec![obs(0, vec![1.0, 1.0])]);
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn only_feature_dimension_vectors_are_accepted() {
        let mut s = init_server(cfg(2, 3, 2, 1)).unwrap();
        // a raw 784-pixel input or a weight row cannot pass as a payload
        assert!(s.upload_prototypes(0, vec![proto(0, vec![0.0; 784])]).is_err());
        assert!(s.upload_observations(0, vec![obs(0, vec![0.0; 2])]).is_err());
        assert!(s.upload_prototypes(0, vec![proto(5, vec![0.0; 3])]).is_err());
    }

    #[test]
    fn capacity_evicts_oldest() {
        // N·M↑ = 2 slots per class; three sequential uploads push out the two init entries then the first upload
        let mut s = init_server(cfg(1, 1, 2, 1)).unwrap();
        for (round, v) in [10.0, 20.0, 30.0].into_iter().enumerate() {
            s.upload_observations(round % 2, vec![obs(0, vec![v])]).unwrap();
            s.store_observations();
            s.aggregate_prototypes();
        }
        let mut held: Vec<f64> = s.buffer(0).iter().map(|o| o.vector[0]).collect();
        held.sort_by(f64::total_cmp);
        assert_eq!(held, vec![20.0, 30.0]);
    }

    #[test]
    fn download_excludes_own_observations_when_possible() {
        let mut s = init_server(cfg(1, 1, 2, 1)).unwrap();
        s.upload_observations(0, vec![obs(0, vec![1.0])]).unwrap();
        s.upload_observations(1, vec![obs(0, vec![2.0])]).unwrap();
        s.store_observations();
        for _ in 0..50 {
            let got = s.download_observations(0, 1).unwrap();
            assert_eq!(got.per_class[0][0].source, Source::Client(1));
        }
        // single-client network falls back to own uploads
        let mut solo = init_server(cfg(1, 1, 1, 1)).unwrap();
        solo.upload_observations(0, vec![obs(0, vec![5.0])]).unwrap();
        solo.store_observations();
        let got = solo.download_observations(0, 3).unwrap();
        assert!(got.per_class[0].iter().all(|o| o.vector == vec![5.0]));
    }

    #[test]
    fn shuffle_preserves_multiset() {
        let mut s = init_server(cfg(1, 1, 4, 1)).unwrap();
        for c in 0..4 {
            s.upload_observations(c, vec![obs(0, vec![c as f64])]).unwrap();
        }
        s.store_observations();
        let mut held: Vec<f64> = s.buffer(0).iter().map(|o| o.vector[0]).collect();
        held.sort_by(f64::total_cmp);
        assert_eq!(held, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn ledger_counts_match_closed_form() {
        let (c, d, n, m_up, m_down) = (3, 4, 2, 2, 3);
        let mut s = init_server(cfg(c, d, n, m_up)).unwrap();
        let rounds = 3;
        for _ in 0..rounds {
            for client in 0..n {
                s.download_global(client).unwrap();
                s.download_observations(client, m_down).unwrap();
                s.upload_prototypes(client, (0..c).map(|k| proto(k, vec![0.0; d])).collect()).unwrap();
                let o = (0..c).flat_map(|k| (0..m_up).map(move |_| obs(k, vec![0.0; d]))).collect();
                s.upload_observations(client, o).unwrap();
            }
            s.aggregate_prototypes();
            s.store_observations();
        }
        let ledger = s.comm_report();
        for r in 0..rounds {
            for client in 0..n {
                let t = ledger.client_round(r, client);
                assert_eq!(t.uplink, ((m_up + 1) * c * d) as u64);
                assert_eq!(t.downlink, ((m_down + 1) * c * d) as u64);
            }
        }
        assert_eq!(ledger.total().uplink, (rounds * n * (m_up + 1) * c * d) as u64);
    }

    #[test]
    fn message_interface_carries_only_feature_vectors() {
        // exhaustive: a new payload variant must be added here deliberately
        fn payload_len(m: &ClientMessage) -> Vec<usize> {
            match m {
                ClientMessage::DownloadGlobal | ClientMessage::DownloadObservations { .. } => vec![],
                ClientMessage::UploadPrototypes(p) => p.iter().map(|p| p.vector.len()).collect(),
                ClientMessage::UploadObservations(o) => o.iter().map(|o| o.vector.len()).collect(),
            }
        }
        let mut s = init_server(cfg(2, 3, 1, 1)).unwrap();
        let msgs = vec![
            ClientMessage::DownloadGlobal,
            ClientMessage::DownloadObservations { m_down: 1 },
            ClientMessage::UploadPrototypes(vec![proto(0, vec![1.0; 3])]),
            ClientMessage::UploadObservations(vec![obs(1, vec![1.0; 3])]),
        ];
        for m in msgs {
            assert!(payload_len(&m).iter().all(|&l| l == 3));
            s.handle(0, m).unwrap();
        }
    }

    #[test]
    fn same_uploads_give_same_downloads() {
        let run = || {
            let mut s = init_server(cfg(2, 2, 3, 1)).unwrap();
            let mut seen = Vec::new();
            for r in 0..4 {
                for client in 0..3 {
                    let got = s.download_observations(client, 2).unwrap();
                    seen.push(got);
                    s.upload_observations(client, vec![obs(0, vec![r as f64, client as f64]), obs(1, vec![0.5, 0.5])]).unwrap();
                }
                s.aggregate_prototypes();
                s.store_observations();
            }
            seen
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn round_log_is_one_json_object_per_line() {
        let mut s = init_server(cfg(2, 2, 1, 1)).unwrap();
        s.download_global(0).unwrap();
        let mut out = Vec::new();
        s.write_round_log(0, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "{\"round\":0,\"uplink_floats\":0,\"downlink_floats\":4,\"buffer_sizes\":[1,1]}\n");
    }
}
