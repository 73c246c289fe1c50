//! Training loop, evaluation, resumable trainer state and run artifacts.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::curves;
use crate::data::{batches, load_idx, split, Dataset, FileProvenance};
use crate::error::{Error, Result};
use crate::model::{round_f32, Architecture, ForwardMode, Network};
use crate::objective::{batch_targets, predict, spike_count_loss, spike_count_loss_on_tape, TargetSpec};
use crate::optim::{
    adam_step, grad_clip, AdamState, EarlyStopping, LossStepTracker, LrScheduler, StopDecision, GRAD_CLIP_NORM,
};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl DataSplits {
    pub fn provenance(&self) -> Vec<FileProvenance> {
        let mut out = self.train.provenance.clone();
        out.extend(self.test.provenance.iter().cloned());
        out
    }
}

/// Load train/test files, carve the validation split out of the training
/// file and apply any subset limits.
pub fn load_data(cfg: &TrainConfig) -> Result<DataSplits> {
    if !cfg.runnable {
        return Err(Error::Config(format!(
            "config `{}` targets dataset `{}`, which has no loader",
            cfg.name, cfg.dataset
        )));
    }
    let full = load_idx(&cfg.train_images, &cfg.train_labels)?;
    let test = load_idx(&cfg.test_images, &cfg.test_labels)?;
    for (what, ds) in [("train", &full), ("test", &test)] {
        if ds.sample_shape() != cfg.input_shape.as_slice() {
            return Err(Error::Config(format!(
                "{what} samples have shape {:?}, config expects {:?}",
                ds.sample_shape(),
                cfg.input_shape
            )));
        }
    }
    let (train, validation) = split(&full, cfg.validation_fraction, cfg.seed)?;
    let limit = |ds: Dataset, n: Option<usize>| match n {
        Some(n) => ds.take(n),
        None => Ok(ds),
    };
    Ok(DataSplits {
        train: limit(train, cfg.train_subset)?,
        validation: limit(validation, cfg.validation_subset)?,
        test: limit(test, cfg.test_subset)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean per-sample spike-count loss.
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Inference over a whole dataset (running batch-norm statistics, no dropout).
pub fn evaluate(net: &mut Network, data: &Dataset, steps: usize, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let spec = TargetSpec::new(net.architecture().classes(), steps);
    let mut predictions = Vec::with_capacity(data.len());
    let mut total = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (x, labels) = data.gather(chunk)?;
        let mut tape = Tape::new();
        let out = net.forward_sequence(&mut tape, &x, steps, ForwardMode::Eval)?;
        let record = out.record(&tape)?;
        total += spike_count_loss(&record, &batch_targets(&labels, &spec)?)? * chunk.len() as f64;
        predictions.extend(predict(&record)?);
    }
    let hits = predictions.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        loss: total / data.len() as f64,
        accuracy: hits as f64 / data.len() as f64,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub iters_per_epoch: u64,
    pub iterations: Vec<IterationLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_validation_accuracy: Option<f64>,
    pub stopped_early: bool,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// The record with the wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> RunRecord {
        RunRecord {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    /// Iterations whose logged rate differs from the schedule's closed form.
    pub fn lr_mismatches(&self) -> Vec<u64> {
        let spec = self.config.schedule_spec(self.iters_per_epoch);
        let epoch_losses: Vec<f64> = self.epochs.iter().map(|e| e.train_loss).collect();
        let logged: Vec<(u64, f64)> = self.iterations.iter().map(|r| (r.iteration, r.lr)).collect();
        curves::lr_trace_mismatches(&logged, &spec, self.iters_per_epoch, &epoch_losses)
    }
}

pub struct RunOutcome {
    pub record: RunRecord,
    /// Final trainer state (after reversion to the best epoch).
    pub checkpoint: Checkpoint,
    pub network: Network,
    pub provenance: Vec<FileProvenance>,
}

type Snapshot = Vec<(String, Tensor)>;

/// Resumable training state.
pub struct Trainer {
    cfg: TrainConfig,
    net: Network,
    adam: AdamState,
    scheduler: LrScheduler,
    early: EarlyStopping<Snapshot>,
    dropout_rng: ChaCha8Rng,
    targets: TargetSpec,
    iters_per_epoch: u64,
    epoch: usize,
    iteration: u64,
    stopped_early: bool,
    iterations: Vec<IterationLog>,
    epochs: Vec<EpochLog>,
    elapsed: f64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, data: &DataSplits) -> Result<Self> {
        cfg.validate()?;
        let arch = cfg.architecture()?;
        let net = Network::new(
            arch.clone(),
            cfg.network_options()?,
            &mut stream(cfg.seed, Stream::Init, 0),
        )?;
        Trainer::with_network(cfg, data, net, arch)
    }

    fn with_network(cfg: &TrainConfig, data: &DataSplits, mut net: Network, arch: Architecture) -> Result<Self> {
        if data.train.is_empty() || data.validation.is_empty() || data.test.is_empty() {
            return Err(Error::Config(
                "train, validation and test sets must be non-empty".into(),
            ));
        }
        net.round_to_storage();
        let iters_per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
        let spec = cfg.schedule_spec(iters_per_epoch);
        spec.validate()?;
        Ok(Trainer {
            adam: AdamState::new(net.params()),
            scheduler: LrScheduler::new(spec, iters_per_epoch),
            early: EarlyStopping::new(cfg.early_stop_patience),
            dropout_rng: stream(cfg.seed, Stream::Dropout, 0),
            targets: cfg.targets(arch.classes()),
            iters_per_epoch,
            epoch: 0,
            iteration: 0,
            stopped_early: false,
            iterations: vec![],
            epochs: vec![],
            elapsed: 0.0,
            net,
            cfg: cfg.clone(),
        })
    }

    /// Rebuild a trainer from [`Trainer::checkpoint`] output. Logs of the
    /// epochs before the checkpoint are not carried over.
    pub fn resume(cfg: &TrainConfig, data: &DataSplits, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        ckpt.expect_architecture(&cfg.architecture)?;
        let mut t = Trainer::new(cfg, data)?;
        if ckpt.require_u64("seed")? != cfg.seed {
            return Err(Error::Checkpoint("checkpoint seed differs from config seed".into()));
        }
        if ckpt.require_u64("iters_per_epoch")? != t.iters_per_epoch {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different training set size".into(),
            ));
        }
        // Decode everything before touching the trainer.
        let mut net = t.net.clone();
        net.load_named(&ckpt.tensors_with_prefix("model/"))?;
        let mut adam = AdamState::new(net.params());
        for (i, name) in net.param_names().iter().enumerate() {
            for (prefix, slot) in [("adam.m/", &mut adam.m[i]), ("adam.v/", &mut adam.v[i])] {
                let key = format!("{prefix}{name}");
                let stored = ckpt
                    .tensor(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                if stored.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("tensor `{key}` has the wrong shape")));
                }
                *slot = stored.clone();
            }
        }
        adam.step = ckpt.require_u64("adam.step")?;
        let mut tracker = LossStepTracker::new(cfg.initial_lr, cfg.lossstep_patience, cfg.lossstep_factor);
        tracker.lr = ckpt.require_f64("lossstep.lr")?;
        tracker.best = ckpt.f64("lossstep.best");
        tracker.since_improvement = ckpt.require_u64("lossstep.since")? as usize;
        let best = match ckpt.f64("early.best") {
            Some(metric) => {
                let mut snap_net = net.clone();
                snap_net.load_named(&ckpt.tensors_with_prefix("best/"))?;
                Some((
                    metric,
                    ckpt.require_u64("early.best_epoch")? as usize,
                    snap_net.named_tensors(),
                ))
            }
            None => None,
        };
        let early = EarlyStopping::restore(cfg.early_stop_patience, best, ckpt.require_u64("early.since")? as usize);
        let word_pos =
            ((ckpt.require_u64("rng.dropout.hi")? as u128) << 64) | ckpt.require_u64("rng.dropout.lo")? as u128;

        t.net = net;
        t.adam = adam;
        t.scheduler.restore_loss_tracker(tracker);
        t.early = early;
        t.dropout_rng.set_word_pos(word_pos);
        t.epoch = ckpt.require_u64("epoch")? as usize;
        t.iteration = ckpt.require_u64("iteration")?;
        t.stopped_early = ckpt.require_u64("stopped_early")? != 0;
        Ok(t)
    }

    /// Full resumable state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.cfg.architecture.clone());
        for (name, t) in self.net.named_tensors() {
            c.push_tensor(format!("model/{name}"), t);
        }
        for (i, name) in self.net.param_names().iter().enumerate() {
            c.push_tensor(format!("adam.m/{name}"), self.adam.m[i].clone());
            c.push_tensor(format!("adam.v/{name}"), self.adam.v[i].clone());
        }
        if let Some(snap) = self.early.checkpoint() {
            for (name, t) in snap {
                c.push_tensor(format!("best/{name}"), t.clone());
            }
        }
        c.push_u64("seed", self.cfg.seed);
        c.push_u64("iters_per_epoch", self.iters_per_epoch);
        c.push_u64("epoch", self.epoch as u64);
        c.push_u64("iteration", self.iteration);
        c.push_u64("stopped_early", self.stopped_early as u64);
        c.push_u64("adam.step", self.adam.step);
        let tracker = self.scheduler.loss_tracker();
        c.push_f64("lossstep.lr", tracker.lr);
        if let Some(b) = tracker.best {
            c.push_f64("lossstep.best", b);
        }
        c.push_u64("lossstep.since", tracker.since_improvement as u64);
        if let (Some(b), Some(e)) = (self.early.best(), self.early.best_epoch()) {
            c.push_f64("early.best", b);
            c.push_u64("early.best_epoch", e as u64);
        }
        c.push_u64("early.since", self.early.since_improvement() as u64);
        let pos = self.dropout_rng.get_word_pos();
        c.push_u64("rng.dropout.lo", pos as u64);
        c.push_u64("rng.dropout.hi", (pos >> 64) as u64);
        c
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn iters_per_epoch(&self) -> u64 {
        self.iters_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.stopped_early || self.epoch >= self.cfg.epochs
    }

    fn abort(&self, diagnostic: String, last_good: Checkpoint) -> Error {
        Error::TrainingAborted {
            epoch: self.epoch,
            iteration: self.iteration as usize,
            diagnostic,
            last_good: Box::new(last_good),
        }
    }

    fn train_step(&mut self, x: &Tensor, targets: &Tensor, lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.net.forward_sequence(
            &mut tape,
            x,
            self.cfg.time_steps,
            ForwardMode::Train {
                dropout_rng: &mut self.dropout_rng,
            },
        )?;
        let loss = spike_count_loss_on_tape(&mut tape, &out.spikes, targets)?;
        let loss_value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        let mut g: Vec<Tensor> = out
            .params
            .iter()
            .zip(self.net.params())
            .map(|(&id, p)| grads.get_or_zeros(id, p))
            .collect();
        drop(tape);
        if self.cfg.grad_clip {
            grad_clip(&mut g, GRAD_CLIP_NORM);
        }
        adam_step(self.net.params_mut(), &g, &mut self.adam, lr)?;
        if self.cfg.weight_clip {
            self.net.clip_weights();
        }
        self.net.round_to_storage();
        for t in self.adam.m.iter_mut().chain(self.adam.v.iter_mut()) {
            round_f32(t);
        }
        if let Some(i) = self.net.params().iter().position(|p| !p.all_finite()) {
            return Err(Error::NonFinite(format!("update of {}", self.net.param_names()[i])));
        }
        Ok(loss_value)
    }

    /// One epoch of minibatch updates followed by validation and the early
    /// stopping check.
    pub fn train_epoch(&mut self, data: &DataSplits) -> Result<()> {
        if self.is_done() {
            return Ok(());
        }
        let start = Instant::now();
        let order = batches(data.train.len(), self.cfg.batch_size, self.cfg.seed, self.epoch)?;
        let mut sum = 0.0;
        for batch in &order {
            let (x, labels) = data.train.gather(batch)?;
            let targets = batch_targets(&labels, &self.targets)?;
            let lr = self.scheduler.lr(self.iteration);
            let backup = (self.net.clone(), self.adam.clone(), self.dropout_rng.clone());
            let loss = match self.train_step(&x, &targets, lr) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => Err(Error::NonFinite(format!("loss = {l}")))?,
                Err(Error::NonFinite(what)) => {
                    (self.net, self.adam, self.dropout_rng) = backup;
                    return Err(self.abort(format!("non-finite value in {what}"), self.checkpoint()));
                }
                Err(e) => return Err(e),
            };
            debug!(
                "epoch {} iteration {} lr {lr:.6e} loss {loss:.4}",
                self.epoch, self.iteration
            );
            self.iterations.push(IterationLog {
                iteration: self.iteration,
                epoch: self.epoch,
                lr,
                loss,
            });
            sum += loss;
            self.iteration += 1;
        }
        let train_loss = sum / order.len() as f64;
        self.scheduler.end_epoch(train_loss);

        let val = evaluate(
            &mut self.net,
            &data.validation,
            self.cfg.time_steps,
            self.cfg.eval_batch_size,
        )?;
        self.epochs.push(EpochLog {
            epoch: self.epoch,
            train_loss,
            validation_loss: val.loss,
            validation_accuracy: val.accuracy,
        });
        let net = &self.net;
        let decision = self.early.update(self.epoch, val.accuracy, || net.named_tensors());
        self.elapsed += start.elapsed().as_secs_f64();
        info!(
            "{} epoch {:>3}: train loss {:.4}, val loss {:.4}, val acc {:.2}% ({:.1}s)",
            self.cfg.name,
            self.epoch,
            train_loss,
            val.loss,
            100.0 * val.accuracy,
            self.elapsed
        );
        self.epoch += 1;
        if decision == StopDecision::StopAndRevert {
            info!("early stop after epoch {}", self.epoch - 1);
            self.stopped_early = true;
        }
        Ok(())
    }

    /// Revert to the best validation epoch (if any) and evaluate on the test set.
    pub fn finish(mut self, data: &DataSplits) -> Result<RunOutcome> {
        let start = Instant::now();
        if let Some(best) = self.early.checkpoint() {
            self.net.load_named(best)?;
        }
        let test = evaluate(&mut self.net, &data.test, self.cfg.time_steps, self.cfg.eval_batch_size)?;
        self.elapsed += start.elapsed().as_secs_f64();
        info!("{} test accuracy {:.2}%", self.cfg.name, 100.0 * test.accuracy);
        let record = RunRecord {
            config: self.cfg.clone(),
            seed: self.cfg.seed,
            iters_per_epoch: self.iters_per_epoch,
            iterations: std::mem::take(&mut self.iterations),
            epochs: std::mem::take(&mut self.epochs),
            best_epoch: self.early.best_epoch(),
            best_validation_accuracy: self.early.best(),
            stopped_early: self.stopped_early,
            test_loss: test.loss,
            test_accuracy: test.accuracy,
            wall_clock_secs: self.elapsed,
        };
        Ok(RunOutcome {
            checkpoint: self.checkpoint(),
            network: self.net,
            provenance: data.provenance(),
            record,
        })
    }

    pub fn run(mut self, data: &DataSplits) -> Result<RunOutcome> {
        while !self.is_done() {
            self.train_epoch(data)?;
        }
        self.finish(data)
    }
}

/// Load the configured data and train to completion.
pub fn run_training(cfg: &TrainConfig) -> Result<RunOutcome> {
    let data = load_data(cfg)?;
    run_training_on(cfg, &data)
}

pub fn run_training_on(cfg: &TrainConfig, data: &DataSplits) -> Result<RunOutcome> {
    Trainer::new(cfg, data)?.run(data)
}

/// Rebuild the model stored in a checkpoint for inference.
pub fn network_from_checkpoint(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Network> {
    ckpt.expect_architecture(&cfg.architecture)?;
    let arch = cfg.architecture()?;
    let mut net = Network::new(arch, cfg.network_options()?, &mut stream(cfg.seed, Stream::Init, 0))?;
    net.load_named(&ckpt.tensors_with_prefix("model/"))?;
    Ok(net)
}

#[derive(Serialize)]
struct DatasetChecksum {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Metadata<'a> {
    crate_version: &'static str,
    checkpoint_format: u32,
    seed: u64,
    test_accuracy: f64,
    test_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    epochs_run: usize,
    iterations: usize,
    stopped_early: bool,
    wall_clock_secs: f64,
    datasets: Vec<DatasetChecksum>,
    config: &'a TrainConfig,
}

/// Write `run.csv`, `epochs.csv`, `model.ckpt` and `metadata.toml` into `dir`.
pub fn write_artifacts(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let r = &outcome.record;
    let mut run = fs::File::create(dir.join("run.csv"))?;
    curves::emit_curves(r, r.config.curve_window, &mut run)?;
    let mut epochs = String::from("epoch,train_loss,validation_loss,validation_accuracy\n");
    for e in &r.epochs {
        epochs.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.train_loss, e.validation_loss, e.validation_accuracy
        ));
    }
    fs::write(dir.join("epochs.csv"), epochs)?;
    outcome.checkpoint.save(dir.join("model.ckpt"))?;
    let meta = Metadata {
        crate_version: env!("CARGO_PKG_VERSION"),
        checkpoint_format: crate::checkpoint::FORMAT_VERSION,
        seed: r.seed,
        test_accuracy: r.test_accuracy,
        test_loss: r.test_loss,
        best_epoch: r.best_epoch,
        epochs_run: r.epochs.len(),
        iterations: r.iterations.len(),
        stopped_early: r.stopped_early,
        wall_clock_secs: r.wall_clock_secs,
        datasets: outcome
            .provenance
            .iter()
            .map(|p| DatasetChecksum {
                path: p.path.display().to_string(),
                sha256: p.sha256.clone(),
            })
            .collect(),
        config: &r.config,
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("metadata.toml"), text)?;
    Ok(())
}
