//! In-process client/server simulation of the three federated methods.
//!
//! Clients own their data and expose only operations that return encoded
//! parameters. Every message crossing the boundary is a byte buffer in the
//! [`wire`] format, and the [`CommLedger`] counts those bytes per client.
//!
//! Per-client randomness comes from `derive_seed(master_seed, client_id)`,
//! so results are identical whether clients run sequentially or in parallel.

pub mod wire;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_classification, aggregate_regression, ep_mcmc_aggregate, fedavg_params, fit_diag_gaussian,
    AggregationConfig,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{init_params, Architecture, InitMode, LikelihoodSpec, ModelParams, Task};
use crate::posterior::{
    predict_ensemble_batch, predict_params_batch, prior_predictive_batch, PredictiveSummary,
    PriorPredictiveConfig,
};
use crate::rng::{derive_seed, stream};
use crate::sampler::{csghmc_sample, sgd_train, CsghmcConfig, PosteriorSamples, SgdConfig};

pub use wire::{deserialize_samples, serialize_samples};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PredictiveBayes,
    Fedavg,
    #[serde(rename = "fedavg_1round")]
    FedavgOneRound,
    EpMcmc,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::PredictiveBayes,
        Method::Fedavg,
        Method::FedavgOneRound,
        Method::EpMcmc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::PredictiveBayes => "predictive_bayes",
            Method::Fedavg => "fedavg",
            Method::FedavgOneRound => "fedavg_1round",
            Method::EpMcmc => "ep_mcmc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Execution {
    #[default]
    Sequential,
    Parallel,
}

/// Communication accounting for one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub rounds: usize,
    pub uplink_bytes: Vec<u64>,
    pub downlink_bytes: Vec<u64>,
    pub uplink_messages: Vec<usize>,
    pub downlink_messages: Vec<usize>,
}

impl CommLedger {
    pub fn new(clients: usize) -> Self {
        Self {
            rounds: 0,
            uplink_bytes: vec![0; clients],
            downlink_bytes: vec![0; clients],
            uplink_messages: vec![0; clients],
            downlink_messages: vec![0; clients],
        }
    }

    fn record_uplink(&mut self, client: usize, bytes: usize) {
        self.uplink_bytes[client] += bytes as u64;
        self.uplink_messages[client] += 1;
    }

    fn record_downlink(&mut self, client: usize, bytes: usize) {
        self.downlink_bytes[client] += bytes as u64;
        self.downlink_messages[client] += 1;
    }

    pub fn total_uplink(&self) -> u64 {
        self.uplink_bytes.iter().sum()
    }

    pub fn total_downlink(&self) -> u64 {
        self.downlink_bytes.iter().sum()
    }
}

/// Client → server message. Carries encoded parameters only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Upload {
    Samples { client_id: u32, payload: Vec<u8> },
    Model { client_id: u32, payload: Vec<u8> },
}

impl Upload {
    pub fn client_id(&self) -> u32 {
        match self {
            Upload::Samples { client_id, .. } | Upload::Model { client_id, .. } => *client_id,
        }
    }

    pub fn payload(&self) -> &[u8] {
        match self {
            Upload::Samples { payload, .. } | Upload::Model { payload, .. } => payload,
        }
    }
}

/// Server → client message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Broadcast {
    GlobalModel { round: u32, payload: Vec<u8> },
}

impl Broadcast {
    pub fn payload(&self) -> &[u8] {
        match self {
            Broadcast::GlobalModel { payload, .. } => payload,
        }
    }
}

fn encode_model(params: &ModelParams, client_id: u32, dataset_size: usize) -> Result<Vec<u8>> {
    let s = PosteriorSamples::new(
        client_id,
        Arc::clone(params.arch()),
        vec![params.clone()],
        dataset_size,
    )?;
    serialize_samples(&s)
}

fn decode_model(payload: &[u8]) -> Result<(ModelParams, usize)> {
    let mut s = deserialize_samples(payload)?;
    if s.len() != 1 {
        return Err(Error::InvalidConfig(format!(
            "model message carries {} parameter vectors",
            s.len()
        )));
    }
    Ok((s.samples.remove(0), s.dataset_size))
}

pub fn client_seed(master_seed: u64, client_id: u32) -> u64 {
    derive_seed(master_seed, client_id as u64)
}

pub fn round_seed(client_seed: u64, round: u32) -> u64 {
    derive_seed(client_seed, stream::ROUND ^ round as u64)
}

/// A simulated client. Its dataset is private: nothing returns it.
#[derive(Debug, Clone)]
pub struct Client {
    id: u32,
    data: Dataset,
    seed: u64,
}

impl Client {
    pub fn new(id: u32, data: Dataset, seed: u64) -> Self {
        Self { id, data, seed }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dataset_size(&self) -> usize {
        self.data.len()
    }

    /// Draw posterior samples from a prior-sampled start and encode them.
    pub fn sample_posterior(
        &self,
        arch: &Arc<Architecture>,
        lik: &LikelihoodSpec,
        cfg: &CsghmcConfig,
    ) -> Result<Upload> {
        let start = init_params(
            arch,
            derive_seed(self.seed, stream::INIT),
            InitMode::PriorSample,
            lik.prior_variance,
        );
        let cfg = CsghmcConfig {
            seed: self.seed,
            ..*cfg
        };
        let samples = csghmc_sample(&start, &self.data, lik, &cfg, self.id)?;
        Ok(Upload::Samples {
            client_id: self.id,
            payload: serialize_samples(&samples)?,
        })
    }

    /// One FedAvg local update starting from the broadcast model.
    pub fn local_update(
        &self,
        broadcast: &Broadcast,
        lik: &LikelihoodSpec,
        cfg: &SgdConfig,
    ) -> Result<Upload> {
        let Broadcast::GlobalModel { round, payload } = broadcast;
        let (global, _) = decode_model(payload)?;
        let cfg = SgdConfig {
            seed: round_seed(self.seed, *round),
            ..*cfg
        };
        let local = sgd_train(&global, &self.data, lik, &cfg)?;
        Ok(Upload::Model {
            client_id: self.id,
            payload: encode_model(&local, self.id, self.data.len())?,
        })
    }
}

/// Build clients `0..n` with seeds derived from `master_seed`.
pub fn clients_from_partition(parts: Vec<Dataset>, master_seed: u64) -> Vec<Client> {
    parts
        .into_iter()
        .enumerate()
        .map(|(i, data)| {
            let id = i as u32;
            Client::new(id, data, client_seed(master_seed, id))
        })
        .collect()
}

/// Run `work` on every client and hand the uploads to the server in client-id
/// order, whatever order they completed in.
fn collect_uploads<F>(clients: &[Client], exec: Execution, work: F) -> Result<Vec<Upload>>
where
    F: Fn(&Client) -> Result<Upload> + Sync,
{
    let tag = |c: &Client, r: Result<Upload>| {
        r.map_err(|e| Error::Client {
            client_id: c.id,
            source: Box::new(e),
        })
    };
    let (tx, rx) = mpsc::channel();
    match exec {
        Execution::Sequential => {
            for c in clients {
                tx.send((c.id, tag(c, work(c)))).expect("receiver alive");
            }
        }
        Execution::Parallel => {
            clients.par_iter().for_each_with(tx.clone(), |tx, c| {
                tx.send((c.id, tag(c, work(c)))).expect("receiver alive");
            });
        }
    }
    drop(tx);
    let mut queue: BTreeMap<u32, Result<Upload>> = BTreeMap::new();
    for (id, upload) in rx {
        queue.insert(id, upload);
    }
    queue.into_values().collect()
}

fn check_clients(clients: &[Client]) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::InvalidConfig(
            "a federation needs at least one client".into(),
        ));
    }
    Ok(())
}

/// What the server holds after training.
#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleMembers {
    /// One posterior sample set per client (PredictiveBayes).
    PerClient(Vec<PosteriorSamples>),
    /// Samples of the combined model-space posterior (EP MCMC).
    Global(PosteriorSamples),
    /// A single averaged model (FedAvg).
    Single(ModelParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEnsemble {
    pub method: Method,
    pub arch: Arc<Architecture>,
    pub lik: LikelihoodSpec,
    pub members: EnsembleMembers,
    pub prior: PriorPredictiveConfig,
    pub aggregation: AggregationConfig,
    pub prior_seed: u64,
    /// Clamp/floor events incurred while building the ensemble.
    pub build_events: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub summaries: Vec<PredictiveSummary>,
    pub events: usize,
}

impl GlobalEnsemble {
    pub fn predict(&self, inputs: ArrayView2<'_, f64>) -> Result<Prediction> {
        match &self.members {
            EnsembleMembers::Single(params) => Ok(Prediction {
                summaries: predict_params_batch(std::slice::from_ref(params), &self.arch, inputs, &self.lik)?,
                events: 0,
            }),
            EnsembleMembers::Global(samples) => Ok(Prediction {
                summaries: predict_ensemble_batch(samples, inputs, &self.lik)?,
                events: 0,
            }),
            EnsembleMembers::PerClient(sets) => self.predict_predictive_bayes(sets, inputs),
        }
    }

    fn predict_predictive_bayes(
        &self,
        sets: &[PosteriorSamples],
        inputs: ArrayView2<'_, f64>,
    ) -> Result<Prediction> {
        let locals: Vec<Vec<PredictiveSummary>> = sets
            .iter()
            .map(|s| predict_ensemble_batch(s, inputs, &self.lik))
            .collect::<Result<_>>()?;
        let priors = prior_predictive_batch(&self.arch, &self.lik, inputs, &self.prior, self.prior_seed)?;
        let mut events = 0;
        let mut summaries = Vec::with_capacity(inputs.nrows());
        for (row, prior) in priors.iter().enumerate() {
            let summary = match self.arch.task() {
                Task::Regression => {
                    let at_row: Vec<PredictiveSummary> = locals.iter().map(|l| l[row].clone()).collect();
                    let agg = aggregate_regression(&at_row, prior, &self.aggregation)?;
                    events += agg.events;
                    agg.value
                }
                Task::Classification => {
                    let at_row: Vec<Vec<f64>> = locals
                        .iter()
                        .map(|l| l[row].probs().expect("classification summary").to_vec())
                        .collect();
                    let agg = aggregate_classification(
                        &at_row,
                        prior.probs().expect("classification prior"),
                        &self.aggregation,
                    )?;
                    events += agg.events;
                    PredictiveSummary::Classification { probs: agg.value }
                }
            };
            summaries.push(summary);
        }
        Ok(Prediction { summaries, events })
    }
}

/// PredictiveBayes: every client samples its posterior and uploads once;
/// the server keeps all sample sets and aggregates predictives at query time.
#[allow(clippy::too_many_arguments)]
pub fn run_predictive_bayes(
    clients: &[Client],
    arch: &Arc<Architecture>,
    lik: &LikelihoodSpec,
    sampler: &CsghmcConfig,
    aggregation: &AggregationConfig,
    prior: &PriorPredictiveConfig,
    server_seed: u64,
    exec: Execution,
) -> Result<(GlobalEnsemble, CommLedger)> {
    check_clients(clients)?;
    aggregation.validate()?;
    let uploads = collect_uploads(clients, exec, |c| c.sample_posterior(arch, lik, sampler))?;
    let mut ledger = CommLedger::new(clients.len());
    ledger.rounds += 1;
    let mut sets = Vec::with_capacity(uploads.len());
    for (slot, upload) in uploads.iter().enumerate() {
        ledger.record_uplink(slot, upload.payload().len());
        sets.push(deserialize_samples(upload.payload())?);
    }
    let ensemble = GlobalEnsemble {
        method: Method::PredictiveBayes,
        arch: Arc::clone(arch),
        lik: *lik,
        members: EnsembleMembers::PerClient(sets),
        prior: prior.clone(),
        aggregation: *aggregation,
        prior_seed: derive_seed(server_seed, stream::PRIOR),
        build_events: 0,
    };
    Ok((ensemble, ledger))
}

/// EP MCMC: clients upload samples once; the server fits a diagonal Gaussian
/// per client, multiplies them with the prior correction and draws
/// `output_samples` global samples.
#[allow(clippy::too_many_arguments)]
pub fn run_ep_mcmc(
    clients: &[Client],
    arch: &Arc<Architecture>,
    lik: &LikelihoodSpec,
    sampler: &CsghmcConfig,
    aggregation: &AggregationConfig,
    output_samples: usize,
    server_seed: u64,
    exec: Execution,
) -> Result<(GlobalEnsemble, CommLedger)> {
    check_clients(clients)?;
    aggregation.validate()?;
    let uploads = collect_uploads(clients, exec, |c| c.sample_posterior(arch, lik, sampler))?;
    let mut ledger = CommLedger::new(clients.len());
    ledger.rounds += 1;
    let mut locals = Vec::with_capacity(uploads.len());
    let mut total = 0;
    for (slot, upload) in uploads.iter().enumerate() {
        ledger.record_uplink(slot, upload.payload().len());
        let samples = deserialize_samples(upload.payload())?;
        total += samples.dataset_size;
        locals.push(fit_diag_gaussian(&samples)?);
    }
    let combined = ep_mcmc_aggregate(
        &locals,
        lik.prior_variance,
        aggregation,
        output_samples,
        derive_seed(server_seed, stream::EP_DRAW),
    )?;
    let mut global = combined.value;
    global.dataset_size = total;
    let ensemble = GlobalEnsemble {
        method: Method::EpMcmc,
        arch: Arc::clone(arch),
        lik: *lik,
        members: EnsembleMembers::Global(global),
        prior: PriorPredictiveConfig::uniform(),
        aggregation: *aggregation,
        prior_seed: 0,
        build_events: combined.events,
    };
    Ok((ensemble, ledger))
}

/// FedAvg over `rounds` rounds. Each round the server broadcasts the current
/// average, each client runs `epochs / rounds` local epochs, and the server
/// averages the uploads weighted by client dataset size.
pub fn run_fedavg(
    clients: &[Client],
    arch: &Arc<Architecture>,
    lik: &LikelihoodSpec,
    sgd: &SgdConfig,
    rounds: usize,
    server_seed: u64,
    exec: Execution,
) -> Result<(GlobalEnsemble, CommLedger)> {
    check_clients(clients)?;
    if rounds == 0 {
        return Err(Error::InvalidConfig("FedAvg needs at least one round".into()));
    }
    let local_epochs = (sgd.epochs / rounds).max(1);
    let local_cfg = SgdConfig {
        epochs: local_epochs,
        ..*sgd
    };
    let mut global = init_params(
        arch,
        derive_seed(server_seed, stream::INIT),
        InitMode::KaimingLike,
        lik.prior_variance,
    );
    let mut ledger = CommLedger::new(clients.len());
    for round in 0..rounds {
        let broadcast = Broadcast::GlobalModel {
            round: round as u32,
            payload: encode_model(&global, u32::MAX, 0)?,
        };
        for slot in 0..clients.len() {
            ledger.record_downlink(slot, broadcast.payload().len());
        }
        let uploads = collect_uploads(clients, exec, |c| c.local_update(&broadcast, lik, &local_cfg))?;
        ledger.rounds += 1;
        let mut params = Vec::with_capacity(uploads.len());
        let mut counts = Vec::with_capacity(uploads.len());
        for (slot, upload) in uploads.iter().enumerate() {
            ledger.record_uplink(slot, upload.payload().len());
            let (p, k) = decode_model(upload.payload())?;
            params.push(p);
            counts.push(k);
        }
        global = fedavg_params(&params, &counts)?;
    }
    let method = if rounds == 1 {
        Method::FedavgOneRound
    } else {
        Method::Fedavg
    };
    let ensemble = GlobalEnsemble {
        method,
        arch: Arc::clone(arch),
        lik: *lik,
        members: EnsembleMembers::Single(global),
        prior: PriorPredictiveConfig::uniform(),
        aggregation: AggregationConfig::default(),
        prior_seed: 0,
        build_events: 0,
    };
    Ok((ensemble, ledger))
}

/// On-disk description of a saved ensemble; member files sit next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub method: Method,
    pub lik: LikelihoodSpec,
    pub prior: PriorPredictiveConfig,
    pub aggregation: AggregationConfig,
    pub prior_seed: u64,
    pub build_events: usize,
    pub member_kind: MemberKind,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberKind {
    PerClient,
    Global,
    Single,
}

pub const MANIFEST_FILE: &str = "ensemble.json";

impl GlobalEnsemble {
    /// Write `ensemble.json` plus one sample file per member set into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (kind, sets): (MemberKind, Vec<PosteriorSamples>) = match &self.members {
            EnsembleMembers::PerClient(sets) => (MemberKind::PerClient, sets.clone()),
            EnsembleMembers::Global(s) => (MemberKind::Global, vec![s.clone()]),
            EnsembleMembers::Single(p) => (
                MemberKind::Single,
                vec![PosteriorSamples::new(
                    u32::MAX,
                    Arc::clone(&self.arch),
                    vec![p.clone()],
                    0,
                )?],
            ),
        };
        let mut files = Vec::with_capacity(sets.len());
        for (i, set) in sets.iter().enumerate() {
            let name = format!("member_{i:03}.fpsb");
            let path = dir.join(&name);
            fs::write(&path, serialize_samples(set)?).map_err(|e| Error::io(&path, e))?;
            files.push(name);
        }
        let manifest = EnsembleManifest {
            method: self.method,
            lik: self.lik,
            prior: self.prior.clone(),
            aggregation: self.aggregation,
            prior_seed: self.prior_seed,
            build_events: self.build_events,
            member_kind: kind,
            files,
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Load from a manifest file or the directory containing one.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: EnsembleManifest = serde_json::from_str(&text)?;
        let mut sets = Vec::with_capacity(manifest.files.len());
        for name in &manifest.files {
            let p = dir.join(name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            sets.push(deserialize_samples(&bytes)?);
        }
        let arch = sets
            .first()
            .map(|s| Arc::clone(&s.arch))
            .ok_or_else(|| Error::InvalidConfig("ensemble manifest lists no members".into()))?;
        let members = match manifest.member_kind {
            MemberKind::PerClient => EnsembleMembers::PerClient(sets),
            MemberKind::Global => EnsembleMembers::Global(sets.remove(0)),
            MemberKind::Single => {
                let mut s = sets.remove(0);
                EnsembleMembers::Single(s.samples.remove(0))
            }
        };
        Ok(Self {
            method: manifest.method,
            arch,
            lik: manifest.lik,
            members,
            prior: manifest.prior,
            aggregation: manifest.aggregation,
            prior_seed: manifest.prior_seed,
            build_events: manifest.build_events,
        })
    }
}
