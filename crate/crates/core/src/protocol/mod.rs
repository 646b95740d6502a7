//! Federated orchestration: clients train locally, compress their
//! differential updates and upload them; the server averages the decoded
//! updates uniformly and broadcasts the result.

mod client;
mod pipeline;
pub mod residual;
mod transport;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecError;
use crate::data::Dataset;
use crate::model::{param_add, param_diff, Model, ModelError};
use crate::schedule::{ScheduleError, ScheduleKind};
use crate::sparsify::{SparsifyConfig, SparsifyMode};
use crate::tensor::{OptimizerKind, ParamSet, Tensor, TensorError};

pub use client::{Client, ClientUpload};
pub use pipeline::{zero_fraction, UpdatePipeline};
pub use transport::{Direction, SimulatedTransport, Transfer, Transport};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid protocol configuration: {0}")]
    Config(String),
    #[error("update manifest mismatch at `{0}`")]
    Manifest(String),
    #[error("aggregation needs {expected} client updates, got {got}")]
    MissingClient { expected: usize, got: usize },
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<ProtocolError>,
    },
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Dense 32-bit float updates.
    Fedavg,
    /// Quantized and entropy-coded dense updates.
    FedavgCoded,
    /// Top-k, ternarization and error accumulation.
    Stc,
    /// Sparse updates with validation-gated filter scaling.
    Fsfl,
    /// Sparse updates without scaling factors.
    SparseOnly,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Fedavg => "fedavg",
            Algorithm::FedavgCoded => "fedavg_coded",
            Algorithm::Stc => "stc",
            Algorithm::Fsfl => "fsfl",
            Algorithm::SparseOnly => "sparse_only",
        }
    }
}

/// Client-side optimization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTraining {
    pub batch_size: usize,
    pub weight_optimizer: OptimizerKind,
    pub weight_lr: f64,
    pub scaling_optimizer: OptimizerKind,
    pub scaling_schedule: ScheduleKind,
    pub scaling_lr_max: f64,
    pub scaling_lr_min: f64,
    /// Random horizontal flips of training batches.
    pub flip: bool,
}

impl Default for LocalTraining {
    fn default() -> Self {
        Self {
            batch_size: 64,
            weight_optimizer: OptimizerKind::adam(),
            weight_lr: 1e-5,
            scaling_optimizer: OptimizerKind::adam(),
            scaling_schedule: ScheduleKind::Linear,
            scaling_lr_max: 1e-3,
            scaling_lr_min: 0.0,
            flip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub algorithm: Algorithm,
    pub num_clients: usize,
    /// Communication rounds `T`, one local epoch each.
    pub epochs: usize,
    /// Scaling sub-epochs `E` per round.
    pub scaling_epochs: usize,
    pub bidirectional: bool,
    /// Train and transmit only the model's update scope.
    pub partial_update: bool,
    /// Error accumulation; always on for STC.
    pub residuals: bool,
    /// Run the scaling block on top of STC.
    pub stc_scaling: bool,
    /// Sparsification of the `fsfl` and `sparse_only` algorithms; STC only
    /// takes `rate` from here.
    pub sparsify: SparsifyConfig,
    pub step_size_unidirectional: f64,
    pub step_size_bidirectional: f64,
    /// Step size of scaling factors, biases and BatchNorm parameters.
    pub step_size_other: f64,
    pub local: LocalTraining,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Fsfl,
            num_clients: 2,
            epochs: 15,
            scaling_epochs: 1,
            bidirectional: false,
            partial_update: false,
            residuals: false,
            stc_scaling: false,
            sparsify: SparsifyConfig::default(),
            step_size_unidirectional: 4.88e-4,
            step_size_bidirectional: 2.44e-4,
            step_size_other: 2.38e-6,
            local: LocalTraining::default(),
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ProtocolError::Config(m));
        if self.num_clients == 0 || self.epochs == 0 || self.scaling_epochs == 0 {
            return bad("num_clients, epochs and scaling_epochs must be at least 1".into());
        }
        if self.local.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.local.weight_lr > 0.0) {
            return bad("weight learning rate must be positive".into());
        }
        for (name, s) in [
            ("step_size_unidirectional", self.step_size_unidirectional),
            ("step_size_bidirectional", self.step_size_bidirectional),
            ("step_size_other", self.step_size_other),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        self.sparsify.validate().map_err(ProtocolError::Config)?;
        Ok(())
    }

    pub fn weight_step(&self) -> f64 {
        if self.bidirectional {
            self.step_size_bidirectional
        } else {
            self.step_size_unidirectional
        }
    }

    pub fn scaling_enabled(&self) -> bool {
        match self.algorithm {
            Algorithm::Fsfl => true,
            Algorithm::Stc => self.stc_scaling,
            _ => false,
        }
    }

    pub fn residuals_enabled(&self) -> bool {
        self.residuals || self.algorithm == Algorithm::Stc
    }

    /// Sparsification applied to updates in either direction.
    pub fn update_sparsify(&self) -> Option<SparsifyConfig> {
        match self.algorithm {
            Algorithm::Fedavg | Algorithm::FedavgCoded => None,
            Algorithm::Stc => Some(SparsifyConfig {
                mode: SparsifyMode::Ternary,
                ..self.sparsify
            }),
            Algorithm::Fsfl | Algorithm::SparseOnly => Some(self.sparsify),
        }
    }
}

/// One transmitted update as recorded in a round log.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRecord {
    pub client: usize,
    pub direction: Direction,
    pub bytes_raw: u64,
    pub bytes_compressed: u64,
    pub sparsity: f64,
    pub scaling_accepted: Option<bool>,
    pub best_sub_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    /// Round index starting at 1.
    pub round: usize,
    pub transfers: Vec<TransferRecord>,
    pub test_accuracy: f64,
    /// All counted bytes up to and including this round.
    pub cumulative_bytes: u64,
}

/// Top-1 accuracy in eval mode without augmentation.
pub fn evaluate(model: &mut Model, data: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(ProtocolError::EmptySplit);
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(128) {
        let (x, labels) = data.batch::<ChaCha8Rng>(chunk, None);
        let logits = model.predict(x)?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Uniform mean of the client updates; every client must be present.
pub fn aggregate(updates: &[ParamSet], expected: usize) -> Result<ParamSet> {
    if updates.len() != expected || expected == 0 {
        return Err(ProtocolError::MissingClient {
            expected,
            got: updates.len(),
        });
    }
    let first = &updates[0];
    for u in &updates[1..] {
        if let Some(name) = first.manifest_mismatch(u) {
            return Err(ProtocolError::Manifest(name));
        }
    }
    let n = updates.len() as f64;
    let mut out = ParamSet::new();
    for (name, t) in first.iter() {
        let mut sum = t.data().to_vec();
        for u in &updates[1..] {
            for (s, v) in sum.iter_mut().zip(u.get(name).expect("manifest checked").data()) {
                *s += v;
            }
        }
        let mean = sum.into_iter().map(|s| s / n).collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), mean)?);
    }
    Ok(out)
}

/// Per-client data assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientData {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Restricts `full` to the names of `template`, in template order.
pub(crate) fn restrict(full: &ParamSet, template: &ParamSet) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for name in template.names() {
        out.insert(name, full.require(name)?.clone());
    }
    Ok(out)
}

/// Server, clients and transport of one federated run.
pub struct Federation<'d, T: Transport> {
    cfg: ProtocolConfig,
    data: &'d Dataset,
    server: Model,
    /// Client-side view of the model when the broadcast is lossy.
    mirror: Option<ParamSet>,
    test: Vec<usize>,
    clients: Vec<Client>,
    uplink: UpdatePipeline,
    downlink: UpdatePipeline,
    transport: T,
    round: usize,
    cumulative: u64,
    last_uploads: Vec<ParamSet>,
}

impl<'d, T: Transport> Federation<'d, T> {
    /// `model` is the initial server model; scaling factors are attached
    /// here when the algorithm uses them.
    pub fn new(
        cfg: ProtocolConfig,
        mut model: Model,
        data: &'d Dataset,
        clients: Vec<ClientData>,
        test: Vec<usize>,
        transport: T,
    ) -> Result<Self> {
        cfg.validate()?;
        if clients.len() != cfg.num_clients {
            return Err(ProtocolError::Config(format!(
                "{} client data sets for {} clients",
                clients.len(),
                cfg.num_clients
            )));
        }
        if cfg.partial_update && model.spec().update_scope.is_none() {
            return Err(ProtocolError::Config(format!(
                "partial updates need a model with an update scope; `{}` has none",
                model.spec().name
            )));
        }
        if !cfg.partial_update && model.spec().update_scope.is_some() {
            return Err(ProtocolError::Config(format!(
                "model `{}` only trains part of the network; enable partial_update",
                model.spec().name
            )));
        }
        if cfg.scaling_enabled() && model.count_scaling_params() == 0 {
            let policy = model.spec().scaling_policy.clone();
            model.equip_scaling(&policy)?;
        }
        let template = model.params.filter(|n| model.in_update_scope(n)).zeros_like();
        let groups: BTreeMap<String, _> = template
            .names()
            .map(|n| (n.to_string(), model.group_of(n).expect("parameter of the model")))
            .collect();
        let raw = cfg.algorithm == Algorithm::Fedavg;
        let sparsify = cfg.update_sparsify();
        let pipeline = UpdatePipeline::new(raw, sparsify, cfg.weight_step(), cfg.step_size_other, groups, template);
        let clients = clients
            .into_iter()
            .enumerate()
            .map(|(id, d)| Client::new(id, model.clone(), d, &cfg, pipeline.template()))
            .collect::<Result<Vec<_>>>()?;
        let mirror = cfg.bidirectional.then(|| model.params.clone());
        Ok(Self {
            data,
            server: model,
            mirror,
            test,
            clients,
            uplink: pipeline.clone(),
            downlink: pipeline,
            transport,
            round: 0,
            cumulative: 0,
            last_uploads: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn server_model(&self) -> &Model {
        &self.server
    }

    /// Model state every client holds after synchronization.
    pub fn client_view(&self) -> &ParamSet {
        self.mirror.as_ref().unwrap_or(&self.server.params)
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn rounds_completed(&self) -> usize {
        self.round
    }

    /// Decoded client updates of the latest round, in client order.
    pub fn last_uploads(&self) -> &[ParamSet] {
        &self.last_uploads
    }

    pub fn evaluate_server(&mut self) -> Result<f64> {
        evaluate(&mut self.server, self.data, &self.test)
    }

    /// Runs one communication round and synchronizes all clients with the
    /// new server state.
    pub fn run_round(&mut self) -> Result<RoundLog> {
        let round = self.round + 1;
        let data = self.data;
        let cfg = &self.cfg;
        let uplink = &self.uplink;
        let uploads: Vec<Result<ClientUpload>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .clients
                .iter_mut()
                .map(|c| s.spawn(move || c.run_round(data, cfg, uplink)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect()
        });
        let mut transfers = Vec::with_capacity(2 * self.clients.len());
        let mut decoded = Vec::with_capacity(self.clients.len());
        for (id, upload) in uploads.into_iter().enumerate() {
            let wrap = |e: ProtocolError| ProtocolError::Client {
                client: id,
                source: Box::new(e),
            };
            let upload = upload.map_err(wrap)?;
            let received = self
                .transport
                .deliver(round, id, Direction::Up, upload.payload)
                .map_err(|e| wrap(ProtocolError::Transport(e)))?;
            let update = self.uplink.decode(&received).map_err(wrap)?;
            transfers.push(TransferRecord {
                client: id,
                direction: Direction::Up,
                bytes_raw: self.uplink.raw_bytes(),
                bytes_compressed: received.len() as u64,
                sparsity: zero_fraction(&update),
                scaling_accepted: upload.scaling_accepted,
                best_sub_epoch: upload.best_sub_epoch,
            });
            self.cumulative += received.len() as u64;
            decoded.push(update);
        }
        let mean = aggregate(&decoded, self.cfg.num_clients)?;
        self.server.params = param_add(&self.server.params, &mean)?;
        self.last_uploads = decoded;

        let (payload, broadcast) = match &mut self.mirror {
            None => (mean.to_bytes(), None),
            Some(mirror) => {
                let gap = param_diff(
                    &restrict(&self.server.params, self.downlink.template())?,
                    &restrict(mirror, self.downlink.template())?,
                )?;
                let sparse = self.downlink.sparsify(&gap);
                let bytes = self.downlink.encode(&sparse)?;
                let update = self.downlink.decode(&bytes)?;
                *mirror = param_add(mirror, &update)?;
                let sparsity = zero_fraction(&update);
                (bytes, Some(sparsity))
            }
        };
        for client in &mut self.clients {
            let id = client.id();
            let wrap = |e: ProtocolError| ProtocolError::Client {
                client: id,
                source: Box::new(e),
            };
            let received = self
                .transport
                .deliver(round, id, Direction::Down, payload.clone())
                .map_err(|e| wrap(ProtocolError::Transport(e)))?;
            let update = match broadcast {
                None => ParamSet::from_bytes(&received).map_err(|e| wrap(e.into()))?,
                Some(sparsity) => {
                    transfers.push(TransferRecord {
                        client: id,
                        direction: Direction::Down,
                        bytes_raw: self.downlink.raw_bytes(),
                        bytes_compressed: received.len() as u64,
                        sparsity,
                        scaling_accepted: None,
                        best_sub_epoch: None,
                    });
                    self.cumulative += received.len() as u64;
                    self.downlink.decode(&received).map_err(wrap)?
                }
            };
            client.sync(&update).map_err(wrap)?;
        }
        let test_accuracy = self.evaluate_server()?;
        self.round = round;
        Ok(RoundLog {
            round,
            transfers,
            test_accuracy,
            cumulative_bytes: self.cumulative,
        })
    }
}

/// Seeded per-client random stream.
pub(crate) fn client_rng(seed: u64, client: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(client as u64 + 1);
    rng
}
