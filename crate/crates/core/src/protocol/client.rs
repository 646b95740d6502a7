use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::model::{param_add, param_diff, scaling_phase, weights_phase, GroupLabel, Model, TrainMask};
use crate::schedule::{ScheduleKind, ScheduleState};
use crate::tensor::{OptimizerState, ParamSet};

use super::{client_rng, evaluate, residual, restrict, ClientData, ProtocolConfig, Result, UpdatePipeline};

/// What a client hands to its transport after local work.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub payload: Vec<u8>,
    pub train_loss: f64,
    /// `None` when the algorithm has no scaling block.
    pub scaling_accepted: Option<bool>,
    pub best_sub_epoch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LocalPhase {
    Weights,
    Scaling,
}

/// One federated participant with its private data and optimizer state.
#[derive(Debug, Clone)]
pub struct Client {
    id: usize,
    model: Model,
    /// Model state at the last synchronization.
    snapshot: ParamSet,
    residual: ParamSet,
    data: ClientData,
    weight_opt: OptimizerState,
    scaling_opt: OptimizerState,
    schedule: ScheduleState,
    rng: ChaCha8Rng,
    last_raw: Option<ParamSet>,
}

impl Client {
    pub fn new(id: usize, model: Model, data: ClientData, cfg: &ProtocolConfig, template: &ParamSet) -> Result<Self> {
        let local = &cfg.local;
        let batches = data.train.len().div_ceil(local.batch_size).max(1) as u64;
        let per_round = batches * cfg.scaling_epochs as u64;
        let period = match local.scaling_schedule {
            ScheduleKind::Linear => per_round * cfg.epochs as u64,
            _ => per_round,
        };
        let schedule = ScheduleState::new(
            local.scaling_schedule,
            local.scaling_lr_max,
            local.scaling_lr_min,
            period,
        )?;
        Ok(Self {
            id,
            snapshot: model.params.clone(),
            residual: template.zeros_like(),
            model,
            data,
            weight_opt: OptimizerState::new(local.weight_optimizer, local.weight_lr),
            scaling_opt: OptimizerState::new(local.scaling_optimizer, local.scaling_lr_max),
            schedule,
            rng: client_rng(cfg.seed, id),
            last_raw: None,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Local model after the latest round (before synchronization) or the
    /// synchronized model otherwise.
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn snapshot(&self) -> &ParamSet {
        &self.snapshot
    }

    pub fn residual(&self) -> &ParamSet {
        &self.residual
    }

    /// Uncompressed `W_new - W_old` of the latest local training epoch.
    pub fn last_raw_update(&self) -> Option<&ParamSet> {
        self.last_raw.as_ref()
    }

    pub fn train_split(&self) -> &[usize] {
        &self.data.train
    }

    pub fn val_split(&self) -> &[usize] {
        &self.data.val
    }

    fn train_epoch(&mut self, data: &Dataset, phase: LocalPhase, cfg: &ProtocolConfig) -> Result<f64> {
        let mask: TrainMask = match phase {
            LocalPhase::Weights => weights_phase(),
            LocalPhase::Scaling => scaling_phase(),
        };
        let names = self.model.trainable_names(&mask);
        let mut order = self.data.train.clone();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.local.batch_size) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let flip = cfg.local.flip.then_some(&mut self.rng);
            let (x, labels) = data.batch(&batch, flip);
            let (loss, grads) = self.model.loss_and_grads(x, &labels, &mask)?;
            let opt = match phase {
                LocalPhase::Weights => &mut self.weight_opt,
                LocalPhase::Scaling => {
                    self.scaling_opt.learning_rate = self.schedule.advance();
                    &mut self.scaling_opt
                }
            };
            opt.step(&mut self.model.params, &grads, names.iter().map(String::as_str))?;
            total += loss * batch.len() as f64;
            seen += batch.len();
        }
        Ok(if seen == 0 { 0.0 } else { total / seen as f64 })
    }

    /// Trains only the scaling factors for `E` sub-epochs starting from the
    /// sparsely updated model and keeps the best variant whose validation
    /// accuracy is at least that of the unscaled model (later sub-epochs win
    /// ties). Returns the chosen sub-epoch, if any.
    fn scaling_block(&mut self, data: &Dataset, cfg: &ProtocolConfig) -> Result<Option<usize>> {
        let mut perf = evaluate(&mut self.model, data, &self.data.val)?;
        if self.schedule.kind() == ScheduleKind::Cawr {
            self.schedule.restart();
        }
        let sparse_model = self.model.params.clone();
        let mut best: Option<(ParamSet, usize)> = None;
        for e in 1..=cfg.scaling_epochs {
            self.train_epoch(data, LocalPhase::Scaling, cfg)?;
            let acc = evaluate(&mut self.model, data, &self.data.val)?;
            if acc >= perf {
                perf = acc;
                best = Some((self.model.params.clone(), e));
            }
        }
        Ok(match best {
            Some((params, e)) => {
                self.model.params = params;
                Some(e)
            }
            None => {
                self.model.params = sparse_model;
                None
            }
        })
    }

    /// Local epoch, compression and (optionally) scaling; returns the
    /// encoded update.
    pub fn run_round(
        &mut self,
        data: &Dataset,
        cfg: &ProtocolConfig,
        pipeline: &UpdatePipeline,
    ) -> Result<ClientUpload> {
        let template = pipeline.template();
        residual::check_manifest(&self.residual, template)?;
        let old = self.snapshot.clone();
        let train_loss = self.train_epoch(data, LocalPhase::Weights, cfg)?;
        let raw = restrict(&param_diff(&self.model.params, &old)?, template)?;
        let accumulated = if cfg.residuals_enabled() {
            residual::accumulate(&raw, &self.residual)?
        } else {
            raw.clone()
        };
        let sparse = pipeline.sparsify(&accumulated);
        self.model.params = param_add(&old, &sparse)?;
        let (scaling_accepted, best_sub_epoch) = if cfg.scaling_enabled() {
            let best = self.scaling_block(data, cfg)?;
            (Some(best.is_some()), best)
        } else {
            (None, None)
        };
        let update = restrict(&param_diff(&self.model.params, &old)?, template)?;
        let payload = pipeline.encode(&update)?;
        if cfg.residuals_enabled() {
            let sent = pipeline.decode(&payload)?;
            let model = &self.model;
            self.residual = residual::next(&sent, &accumulated, |n| model.group_of(n) == Some(GroupLabel::Scaling))?;
        }
        self.last_raw = Some(raw);
        Ok(ClientUpload {
            payload,
            train_loss,
            scaling_accepted,
            best_sub_epoch,
        })
    }

    /// Resets the local model to the last synchronized state plus the
    /// server update.
    pub fn sync(&mut self, server_update: &ParamSet) -> Result<()> {
        self.model.params = param_add(&self.snapshot, server_update)?;
        self.snapshot = self.model.params.clone();
        Ok(())
    }
}
