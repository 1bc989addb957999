//! Synchronous data-parallel training over in-process replicas.
//!
//! One optimizer step consumes `W x A` sub-batches: replica `w` runs its `A`
//! sub-batches back to back and sums their gradients locally, the replica sums
//! are reduced in replica-index order, and the result is divided by the total
//! target token count before the update. Nothing in the arithmetic depends on
//! thread scheduling.

pub mod buckets;
pub mod scaler;
pub mod simulator;

use std::collections::BTreeSet;

use crate::criterions::Criterion;
use crate::data::{shuffle_epoch, EpochPlan, MiniBatch, SequencePair};
use crate::error::{Error, Result};
use crate::lr_scheduler::LrScheduler;
use crate::model::{flat_gradients, ForwardCtx, Model};
use crate::numerics::fp16::quantize_slice;
use crate::numerics::DType;
use crate::optim::{Optimizer, OptimizerState};

pub use buckets::{all_reduce, bucket_gradients, GradientBucket};
pub use scaler::LossScaler;
pub use simulator::{simulate_timeline, Scenario, SyncMode, TimelineReport};

pub const DEFAULT_BUCKET_THRESHOLD: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerOptions {
    pub workers: usize,
    pub accum: usize,
    pub fp16: bool,
    pub seed: u64,
    pub bucket_threshold: usize,
    pub scaler: LossScaler,
}

impl Default for TrainerOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            accum: 1,
            fp16: false,
            seed: 1,
            bucket_threshold: DEFAULT_BUCKET_THRESHOLD,
            scaler: LossScaler::default(),
        }
    }
}

/// Position in the shuffled batch order: `epoch` is 1-based, `position` is the
/// next ordinal to read within that epoch's order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cursor {
    pub epoch: u64,
    pub position: usize,
}

impl Default for Cursor {
    fn default() -> Self {
        Self { epoch: 1, position: 0 }
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Vec<f32>,
    pub optimizer: OptimizerState,
    pub scaler: LossScaler,
    /// Steps attempted, including skipped ones. Keys the dropout streams.
    pub attempts: u64,
    pub cursor: Cursor,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Optimizer updates applied so far.
    pub step: u64,
    pub epoch: u64,
    /// Summed loss over all sub-batches divided by `ntokens`.
    pub loss: f64,
    pub nll: f64,
    pub ntokens: usize,
    pub correct: usize,
    pub lr: f64,
    /// Loss scale used for this step (1 in FP32).
    pub scale: f64,
    pub skipped: bool,
}

impl StepReport {
    pub fn accuracy(&self) -> f64 {
        if self.ntokens == 0 {
            0.0
        } else {
            self.correct as f64 / self.ntokens as f64
        }
    }
}

struct ReplicaOutput {
    grads: Option<Vec<f32>>,
    loss: f64,
    nll: f64,
    ntokens: usize,
    correct: usize,
    overflow: bool,
}

/// Divides reduced gradients by the loss scale, then by the global token count.
pub fn normalize_gradients(summed: &mut [f32], scale: f64, ntokens: usize) {
    let scale = scale as f32;
    let n = ntokens as f32;
    for g in summed.iter_mut() {
        if scale != 1.0 {
            *g /= scale;
        }
        *g /= n;
    }
}

pub struct Trainer {
    model: Box<dyn Model>,
    criterion: Box<dyn Criterion>,
    optimizer: Box<dyn Optimizer>,
    scheduler: Box<dyn LrScheduler>,
    opts: TrainerOptions,
    master: Vec<f32>,
    /// Per-replica parameter copies; the FP16 shadow when `fp16` is set.
    replicas: Vec<Vec<f32>>,
    scaler: LossScaler,
    buckets: Vec<GradientBucket>,
    attempts: u64,
    cursor: Cursor,
    injected: BTreeSet<(u64, usize)>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("model", &self.model.name())
            .field("opts", &self.opts)
            .field("attempts", &self.attempts)
            .field("cursor", &self.cursor)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    /// Builds a trainer with freshly initialized parameters.
    pub fn new(
        model: Box<dyn Model>,
        criterion: Box<dyn Criterion>,
        optimizer: Box<dyn Optimizer>,
        scheduler: Box<dyn LrScheduler>,
        opts: TrainerOptions,
    ) -> Result<Self> {
        if opts.workers < 1 || opts.accum < 1 {
            return Err(Error::Invalid(format!(
                "workers ({}) and accum ({}) must be at least 1",
                opts.workers, opts.accum
            )));
        }
        let master = model.init_params(opts.seed);
        let buckets = bucket_gradients(&model.layout().sizes(), opts.bucket_threshold)?;
        let mut t = Self {
            model,
            criterion,
            optimizer,
            scheduler,
            scaler: opts.scaler.clone(),
            opts,
            master,
            replicas: Vec::new(),
            buckets,
            attempts: 0,
            cursor: Cursor::default(),
            injected: BTreeSet::new(),
        };
        t.broadcast();
        Ok(t)
    }

    fn dtype(&self) -> DType {
        if self.opts.fp16 {
            DType::F16E
        } else {
            DType::F32
        }
    }

    fn broadcast(&mut self) {
        let mut shadow = self.master.clone();
        if self.opts.fp16 {
            quantize_slice(&mut shadow);
        }
        self.replicas = vec![shadow; self.opts.workers];
    }

    pub fn model(&self) -> &dyn Model {
        self.model.as_ref()
    }

    pub fn criterion(&self) -> &dyn Criterion {
        self.criterion.as_ref()
    }

    pub fn options(&self) -> &TrainerOptions {
        &self.opts
    }

    pub fn params(&self) -> &[f32] {
        &self.master
    }

    pub fn replica_params(&self, w: usize) -> &[f32] {
        &self.replicas[w]
    }

    pub fn buckets(&self) -> &[GradientBucket] {
        &self.buckets
    }

    pub fn scaler(&self) -> &LossScaler {
        &self.scaler
    }

    pub fn cursor(&self) -> Cursor {
        self.cursor
    }

    /// Optimizer updates applied so far.
    pub fn num_updates(&self) -> u64 {
        self.optimizer.steps()
    }

    pub fn attempts(&self) -> u64 {
        self.attempts
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        self.optimizer.state()
    }

    /// Forces replica `replica`'s gradients to overflow on attempt `attempt` (1-based).
    pub fn inject_overflow(&mut self, attempt: u64, replica: usize) {
        self.injected.insert((attempt, replica));
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            params: self.master.clone(),
            optimizer: self.optimizer.state(),
            scaler: self.scaler.clone(),
            attempts: self.attempts,
            cursor: self.cursor,
            seed: self.opts.seed,
        }
    }

    pub fn restore(&mut self, state: TrainState) -> Result<()> {
        if state.params.len() != self.model.layout().total() {
            return Err(Error::Shape(format!(
                "state holds {} parameters, model expects {}",
                state.params.len(),
                self.model.layout().total()
            )));
        }
        if state.cursor.epoch < 1 {
            return Err(Error::Invalid("cursor epoch must be at least 1".into()));
        }
        self.optimizer.load_state(state.optimizer)?;
        self.master = state.params;
        self.scaler = state.scaler;
        self.attempts = state.attempts;
        self.cursor = state.cursor;
        self.opts.seed = state.seed;
        self.broadcast();
        Ok(())
    }

    /// Splits `batch` row-wise into `W x A` contiguous sub-batches and trains on them.
    pub fn train_step(&mut self, batch: &MiniBatch) -> Result<StepReport> {
        let (w, a) = (self.opts.workers, self.opts.accum);
        let parts = batch.split(w * a);
        let per_replica: Vec<Vec<MiniBatch>> = parts.chunks(a).map(<[MiniBatch]>::to_vec).collect();
        self.train_step_split(&per_replica)
    }

    /// One synchronous step over explicit per-replica sub-batch lists.
    pub fn train_step_split(&mut self, sub_batches: &[Vec<MiniBatch>]) -> Result<StepReport> {
        let (workers, accum) = (self.opts.workers, self.opts.accum);
        if sub_batches.len() != workers || sub_batches.iter().any(|s| s.len() != accum) {
            return Err(Error::Shape(format!(
                "expected {workers} replicas with {accum} sub-batches each"
            )));
        }
        self.attempts += 1;
        let attempt = self.attempts;
        let dtype = self.dtype();
        let scale = if self.opts.fp16 { self.scaler.scale } else { 1.0 };
        let seed = self.opts.seed;

        let model = self.model.as_ref();
        let criterion = self.criterion.as_ref();
        let layout = model.layout();
        let replicas = &self.replicas;
        let injected = &self.injected;
        let outputs: Vec<Result<ReplicaOutput>> = std::thread::scope(|s| {
            let handles: Vec<_> = sub_batches
                .iter()
                .enumerate()
                .map(|(r, subs)| {
                    let params = &replicas[r];
                    s.spawn(move || {
                        let mut out = ReplicaOutput {
                            grads: None,
                            loss: 0.0,
                            nll: 0.0,
                            ntokens: 0,
                            correct: 0,
                            overflow: false,
                        };
                        for (a, sub) in subs.iter().enumerate() {
                            if sub.is_empty() || sub.ntokens == 0 {
                                continue;
                            }
                            let ctx = ForwardCtx {
                                seed,
                                step: attempt,
                                shard: (r * accum + a) as u64,
                                train: true,
                            };
                            let mut tape = crate::numerics::Tape::new(dtype);
                            let c = criterion.compute(model, params, sub, &mut tape, &ctx)?;
                            out.loss += f64::from(c.loss_value);
                            out.nll += c.nll;
                            out.ntokens += c.ntokens;
                            out.correct += c.correct;
                            let g = match flat_gradients(layout, &tape, c.loss, scale as f32) {
                                Ok(g) => g,
                                Err(Error::NonFinite(_)) if dtype == DType::F16E => {
                                    out.overflow = true;
                                    continue;
                                }
                                Err(e) => return Err(e),
                            };
                            match &mut out.grads {
                                None => out.grads = Some(g),
                                Some(acc) => {
                                    for (x, y) in acc.iter_mut().zip(&g) {
                                        *x += y;
                                    }
                                    if dtype == DType::F16E {
                                        quantize_slice(acc);
                                    }
                                }
                            }
                        }
                        if injected.contains(&(attempt, r)) {
                            let acc = out.grads.get_or_insert_with(|| vec![0.0; layout.total()]);
                            if let Some(first) = acc.first_mut() {
                                *first = f32::INFINITY;
                            }
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("replica thread panicked"))
                .collect()
        });

        let mut per_replica = Vec::with_capacity(workers);
        let (mut loss, mut nll, mut ntokens, mut correct, mut overflow) = (0.0, 0.0, 0, 0, false);
        for out in outputs {
            let out = out?;
            loss += out.loss;
            nll += out.nll;
            ntokens += out.ntokens;
            correct += out.correct;
            overflow |= out.overflow;
            per_replica.push(out.grads.unwrap_or_else(|| vec![0.0; layout.total()]));
        }
        let mut report = StepReport {
            step: self.optimizer.steps(),
            epoch: self.cursor.epoch,
            loss: if ntokens > 0 { loss / ntokens as f64 } else { 0.0 },
            nll: if ntokens > 0 { nll / ntokens as f64 } else { 0.0 },
            ntokens,
            correct,
            lr: self.scheduler.lr(self.optimizer.steps() + 1),
            scale,
            skipped: false,
        };
        if ntokens == 0 {
            return Err(Error::Invalid("training step has no target tokens".into()));
        }

        let mut grads = all_reduce(&per_replica, &self.buckets, dtype)?;
        normalize_gradients(&mut grads, scale, ntokens);
        overflow |= grads.iter().any(|g| !g.is_finite());
        if overflow {
            if !self.opts.fp16 {
                return Err(Error::NonFinite(format!("gradients at step {attempt} are not finite")));
            }
            self.scaler.update(true)?;
            report.skipped = true;
            log::warn!(
                "overflow at attempt {attempt}; skipping step, loss scale now {}",
                self.scaler.scale
            );
            return Ok(report);
        }
        self.optimizer.step(&mut self.master, &grads, report.lr)?;
        if self.opts.fp16 {
            self.scaler.update(false)?;
        }
        self.broadcast();
        report.step = self.optimizer.steps();
        Ok(report)
    }

    /// Reads the next batch from `plan` and advances the cursor. Skipped steps
    /// still consume their batch.
    pub fn next_batch(&mut self, pairs: &[SequencePair], plan: &EpochPlan) -> Result<MiniBatch> {
        if plan.is_empty() {
            return Err(Error::Invalid("epoch plan has no batches".into()));
        }
        let order = shuffle_epoch(plan, self.cursor.epoch)?;
        let ordinal = *order.get(self.cursor.position).ok_or(Error::Bounds {
            index: self.cursor.position,
            len: order.len(),
        })?;
        let by_index: std::collections::HashMap<usize, &SequencePair> = pairs.iter().map(|p| (p.index, p)).collect();
        let members = plan.batches[ordinal]
            .iter()
            .map(|i| {
                by_index.get(i).copied().ok_or(Error::Bounds {
                    index: *i,
                    len: pairs.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.cursor.position += 1;
        if self.cursor.position == plan.len() {
            self.cursor = Cursor {
                epoch: self.cursor.epoch + 1,
                position: 0,
            };
        }
        Ok(MiniBatch::collate(members))
    }

    /// Trains until `max_updates` optimizer updates have been applied or the
    /// cursor passes `max_epochs`. `on_step` sees every attempted step.
    pub fn train(
        &mut self,
        pairs: &[SequencePair],
        plan: &EpochPlan,
        max_updates: Option<u64>,
        max_epochs: Option<u64>,
        mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>,
    ) -> Result<()> {
        loop {
            if max_updates.is_some_and(|m| self.num_updates() >= m) {
                return Ok(());
            }
            if max_epochs.is_some_and(|m| self.cursor.epoch > m) {
                return Ok(());
            }
            let batch = self.next_batch(pairs, plan)?;
            let report = self.train_step(&batch)?;
            on_step(self, &report)?;
        }
    }
}
