//! Experiment configuration, data preparation, execution and round logs.

mod config;
mod log;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{self, DataError, Dataset, Splits};
use crate::model::{Model, ModelError, ModelSpec};
use crate::protocol::{ClientData, Federation, ProtocolError, RoundLog, SimulatedTransport};
use crate::tensor::{ParamSet, TensorError};

pub use config::{
    CodecSection, DataSection, DataSource, ExperimentConfig, ModelSection, OptimizerName, OutputSection,
    ProtocolSection, ScalingSection, SparsifySection, TrainSection, SEED_ENV,
};
pub use log::{parse_rows, read_rows, rows, summarize, LogWriter, Milestone, Row, COLUMNS, ROLE_CLIENT, ROLE_SERVER};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("round log: {0}")]
    Csv(#[from] csv::Error),
    #[error("round log: {0}")]
    Log(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: ProtocolError,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Independent random streams derived from the experiment seed. Client
/// streams start at 1, so these sit far above any client id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Split,
    ModelInit,
    Partition,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = match stream {
        Stream::Data => 0,
        Stream::Split => 1,
        Stream::ModelInit => 2,
        Stream::Partition => 3,
    };
    rng.set_stream((1 << 40) + id);
    rng
}

/// Dataset, global splits, per-client assignment and initial model.
pub struct Prepared {
    pub data: Dataset,
    pub splits: Splits,
    pub clients: Vec<ClientData>,
    pub model: Model,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let d = &cfg.data;
    let mut data = match d.source {
        DataSource::Synthetic => data::synthetic(&d.synthetic_spec(), &mut stream_rng(cfg.seed, Stream::Data))?,
        DataSource::ImageArchive => {
            if d.files.is_empty() {
                return Err(HarnessError::Config {
                    path: "data.files".into(),
                    message: "an image archive needs at least one file".into(),
                });
            }
            data::load_image_archive(&d.files, d.classes)?
        }
    };
    let splits = data::stratified_split(&data, d.splits, &mut stream_rng(cfg.seed, Stream::Split))?;
    data.normalize(&splits.train);
    let n = cfg.protocol.num_clients;
    let mut rng = stream_rng(cfg.seed, Stream::Partition);
    let train = data::partition(&splits.train, n, &mut rng)?;
    let val = data::partition(&splits.val, n, &mut rng)?;
    let clients = train
        .into_iter()
        .zip(val)
        .map(|(train, val)| ClientData { train, val })
        .collect();
    let spec = ModelSpec::preset(&cfg.model.preset, data.shape(), data.classes())?;
    let model = Model::new(spec, &mut stream_rng(cfg.seed, Stream::ModelInit))?;
    Ok(Prepared {
        data,
        splits,
        clients,
        model,
    })
}

/// Logs of the completed rounds and the final server parameters.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub logs: Vec<RoundLog>,
    pub server: ParamSet,
}

/// Runs the configured experiment, writing the CSV and checkpoint named in
/// the output section.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    run_with(cfg, |_, _| {})
}

/// Like [`run_experiment`], calling `observe` after every round. The round
/// log is flushed before an error is returned.
pub fn run_with(
    cfg: &ExperimentConfig,
    mut observe: impl FnMut(&Federation<'_, SimulatedTransport>, &RoundLog),
) -> Result<Outcome> {
    let protocol = cfg.protocol_config();
    protocol.validate()?;
    let prepared = prepare(cfg)?;
    let mut fed = Federation::new(
        protocol,
        prepared.model,
        &prepared.data,
        prepared.clients,
        prepared.splits.test,
        SimulatedTransport::new(),
    )?;
    let mut writer = cfg.output.csv.as_deref().map(LogWriter::create).transpose()?;
    let mut logs = Vec::with_capacity(cfg.protocol.epochs);
    for _ in 0..cfg.protocol.epochs {
        let log = fed.run_round().map_err(|source| HarnessError::Round {
            round: fed.rounds_completed() + 1,
            source,
        })?;
        if let Some(w) = writer.as_mut() {
            w.write_round(&log)?;
        }
        observe(&fed, &log);
        logs.push(log);
    }
    let server = fed.server_model().params.clone();
    if let Some(path) = &cfg.output.checkpoint {
        write_checkpoint(path, &server)?;
    }
    Ok(Outcome { logs, server })
}

pub fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, params.to_bytes()).map_err(|e| HarnessError::Io(path.display().to_string(), e))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
    Ok(ParamSet::from_bytes(&bytes)?)
}
