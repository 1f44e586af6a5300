//! Adam training with per-epoch learning-rate decay: a cross-entropy phase,
//! then optional AM-Softmax fine-tuning with fresh class weights.

mod adam;
mod eval;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_update, clip_global_norm, Adam, ADAM_EPS, BETA1, BETA2};
pub use eval::{identification_top1, infer_all, verification_eer, Head};

use crate::backbones::{Checkpoint, ForwardCtx, Mode, SpeakerModel};
use crate::config::KeyValues;
use crate::dataset::{make_batches, prefetch, Batch, BatchSpec, Utterance};
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::objectives::{am_softmax, cosine_logits, cross_entropy, AmSoftmaxConfig};
use crate::tensor::{Binder, Tape};

pub const DEFAULT_LR0: f64 = 1e-4;
pub const DEFAULT_DECAY: f64 = 0.95;
pub const DEFAULT_FINETUNE_LR: f64 = 5e-5;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    CrossEntropy,
    AmSoftmax,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::CrossEntropy => "CE",
            Phase::AmSoftmax => "AMS",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CE" => Ok(Phase::CrossEntropy),
            "AMS" => Ok(Phase::AmSoftmax),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub finetune_lr: f64,
    /// Cross-entropy epochs; required.
    pub epochs: usize,
    pub finetune_epochs: usize,
    /// Required.
    pub batch_size: usize,
    pub crop_frames: usize,
    pub seed: u64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub ams: AmSoftmaxConfig,
    /// Batches queued ahead of the optimizer.
    pub prefetch: usize,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize) -> Self {
        TrainConfig {
            lr0: DEFAULT_LR0,
            decay: DEFAULT_DECAY,
            finetune_lr: DEFAULT_FINETUNE_LR,
            epochs,
            finetune_epochs: 0,
            batch_size,
            crop_frames: 100,
            seed: 0,
            clip_norm: None,
            ams: AmSoftmaxConfig::default(),
            prefetch: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        BatchSpec::new(self.batch_size, self.crop_frames)?;
        self.ams.validate()?;
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.lr0) || !positive(self.finetune_lr) || !positive(self.decay) {
            return Err(Error::Config("learning rates and decay must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !positive(c)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for the `epoch`-th epoch (from 0) of `phase`.
    pub fn lr(&self, phase: Phase, epoch: usize) -> f64 {
        let base = match phase {
            Phase::CrossEntropy => self.lr0,
            Phase::AmSoftmax => self.finetune_lr,
        };
        base * self.decay.powi(i32::try_from(epoch).unwrap_or(i32::MAX))
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + self.finetune_epochs
    }

    /// Reads `train.*` keys; `train.epochs` and `train.batch_size` are
    /// required.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = TrainConfig::new(kv.require("train.epochs")?, kv.require("train.batch_size")?);
        c.lr0 = kv.get_or("train.lr0", c.lr0)?;
        c.decay = kv.get_or("train.decay", c.decay)?;
        c.finetune_lr = kv.get_or("train.finetune_lr", c.finetune_lr)?;
        c.finetune_epochs = kv.get_or("train.finetune_epochs", c.finetune_epochs)?;
        c.crop_frames = kv.get_or("train.crop_frames", c.crop_frames)?;
        c.seed = kv.get_or("train.seed", c.seed)?;
        c.clip_norm = kv.get("train.clip_norm")?.filter(|&v: &f64| v > 0.0);
        c.ams = AmSoftmaxConfig::new(
            kv.get_or("train.ams.margin", c.ams.margin)?,
            kv.get_or("train.ams.scale", c.ams.scale)?,
        )?;
        c.prefetch = kv.get_or("train.prefetch", c.prefetch)?;
        c.validate()?;
        Ok(c)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("train.lr0", self.lr0);
        kv.set("train.decay", self.decay);
        kv.set("train.finetune_lr", self.finetune_lr);
        kv.set("train.epochs", self.epochs);
        kv.set("train.finetune_epochs", self.finetune_epochs);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.crop_frames", self.crop_frames);
        kv.set("train.seed", self.seed);
        kv.set("train.clip_norm", self.clip_norm.unwrap_or(0.0));
        kv.set("train.ams.margin", self.ams.margin);
        kv.set("train.ams.scale", self.ams.scale);
        kv.set("train.prefetch", self.prefetch);
    }
}

/// Shuffling seed for one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng.gen()
}

/// One metrics-log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub top1: f64,
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} phase={} loss={} top1={} lr={}",
            self.epoch, self.phase, self.loss, self.top1, self.lr
        )
    }
}

impl FromStr for EpochLog {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad metrics line {s:?}"));
        let mut fields = s.split_whitespace().map(|kv| kv.split_once('=').ok_or_else(bad));
        let mut next = |key: &str| -> Result<&str> {
            match fields.next() {
                Some(Ok((k, v))) if k == key => Ok(v),
                _ => Err(bad()),
            }
        };
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        Ok(EpochLog {
            epoch: next("epoch")?.parse().map_err(|_| bad())?,
            phase: next("phase")?.parse()?,
            loss: num(next("loss")?)?,
            top1: num(next("top1")?)?,
            lr: num(next("lr")?)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    model: SpeakerModel,
    cfg: TrainConfig,
    adam: Adam,
    epochs_done: usize,
    history: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model: SpeakerModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.store());
        Ok(Trainer {
            model,
            cfg,
            adam,
            epochs_done: 0,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &SpeakerModel {
        &self.model
    }

    pub fn into_model(self) -> SpeakerModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    /// Phase and within-phase index of the next epoch.
    pub fn position(&self) -> (Phase, usize) {
        if self.epochs_done < self.cfg.epochs {
            (Phase::CrossEntropy, self.epochs_done)
        } else {
            (Phase::AmSoftmax, self.epochs_done - self.cfg.epochs)
        }
    }

    pub fn current_lr(&self) -> f64 {
        let (phase, e) = self.position();
        self.cfg.lr(phase, e)
    }

    /// Head whose scores decide identification for the model as trained so
    /// far.
    pub fn head(&self) -> Head {
        if self.epochs_done > self.cfg.epochs {
            Head::Cosine
        } else {
            Head::Softmax
        }
    }

    /// Starts fine-tuning: new AM-Softmax class weights and a fresh
    /// optimizer; backbone, attention and embedding layers carry over.
    fn begin_finetune(&mut self) {
        self.model.reset_ams_head(self.cfg.seed ^ 0xA5A5_A5A5);
        self.adam = Adam::new(self.model.store());
    }

    fn step_inner(&mut self, batch: &Batch, lr: f64, phase: Phase, epoch: usize, index: usize) -> Result<(f64, usize)> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, self.model.store(), true);
        let x = tape.constant(batch.x.clone());
        let ctx = ForwardCtx::new(Mode::Train);
        let out = self.model.forward(&binder, &x, &ctx)?;
        let (loss, scores) = match phase {
            Phase::CrossEntropy => (cross_entropy(&out.logits, &batch.labels)?, out.logits),
            Phase::AmSoftmax => {
                let w = binder.get(self.model.ams_weights());
                (
                    am_softmax(&out.embedding, &batch.labels, &w, &self.cfg.ams)?,
                    cosine_logits(&out.embedding, &w)?,
                )
            }
        };
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: index,
                lr,
            });
        }
        let s = scores.value();
        let c = s.shape()[1];
        let correct = batch
            .labels
            .iter()
            .enumerate()
            .filter(|&(r, &y)| argmax(&s.data()[r * c..(r + 1) * c]) == y)
            .count();
        tape.backward(loss)?;
        let mut grads = binder.grads();
        drop(binder);
        if let Some(max) = self.cfg.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        self.adam.step(self.model.store_mut(), &grads, lr)?;
        self.model.apply_updates(ctx.into_updates());
        Ok((value, correct))
    }

    /// One optimizer step on `batch` at `lr` in the current phase; returns
    /// the loss before the update.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let (phase, e) = self.position();
        Ok(self.step_inner(batch, lr, phase, e, 0)?.0)
    }

    /// Trains one epoch and records its log line.
    pub fn run_epoch(&mut self, data: &Arc<Vec<Utterance>>) -> Result<EpochLog> {
        let (phase, e) = self.position();
        if self.epochs_done >= self.cfg.total_epochs() {
            return Err(Error::Config("all configured epochs are done".into()));
        }
        if phase == Phase::AmSoftmax && e == 0 {
            self.begin_finetune();
        }
        let lr = self.cfg.lr(phase, e);
        let spec = BatchSpec::new(self.cfg.batch_size, self.cfg.crop_frames)?;
        let batches = make_batches(data.clone(), spec, epoch_seed(self.cfg.seed, self.epochs_done))?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (i, batch) in prefetch(batches, self.cfg.prefetch).enumerate() {
            let (l, c) = self.step_inner(&batch, lr, phase, self.epochs_done, i)?;
            loss_sum += l * batch.labels.len() as f64;
            correct += c;
            seen += batch.labels.len();
        }
        let log = EpochLog {
            epoch: self.epochs_done,
            phase,
            loss: loss_sum / seen as f64,
            top1: correct as f64 / seen as f64,
            lr,
        };
        self.epochs_done += 1;
        self.history.push(log);
        log::info!("{log}");
        Ok(log)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        data: &Arc<Vec<Utterance>>,
        mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        while self.epochs_done < self.cfg.total_epochs() {
            let log = self.run_epoch(data)?;
            on_epoch(self, &log)?;
        }
        Ok(())
    }

    /// Model, optimizer state and training position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = KeyValues::new();
        self.cfg.write_kv(&mut meta);
        meta.set("state.epochs_done", self.epochs_done);
        meta.set("state.adam_step", self.adam.step_count());
        self.model.to_checkpoint(&meta, self.adam.to_blobs(self.model.store()))
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let (model, extra) = SpeakerModel::from_checkpoint(ck)?;
        let cfg = TrainConfig::from_kv(&ck.meta)?;
        let adam = Adam::from_blobs(model.store(), ck.meta.require("state.adam_step")?, &extra)?;
        Ok(Trainer {
            model,
            cfg,
            adam,
            epochs_done: ck.meta.require("state.epochs_done")?,
            history: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_closed_form() {
        let c = TrainConfig::new(10, 8);
        assert_eq!(c.lr(Phase::CrossEntropy, 0), 1e-4);
        assert!((c.lr(Phase::CrossEntropy, 3) - 8.57375e-5).abs() < 1e-18);
        assert_eq!(c.lr(Phase::AmSoftmax, 0), 5e-5);
        for e in 0..50 {
            assert_eq!(c.lr(Phase::CrossEntropy, e), 1e-4 * 0.95f64.powi(e as i32));
        }
    }

    #[test]
    fn config_requires_epochs_and_batch_size() {
        let kv = KeyValues::parse("train.batch_size = 8\n", std::path::Path::new("c")).unwrap();
        assert!(TrainConfig::from_kv(&kv).unwrap_err().to_string().contains("train.epochs"));
        let mut kv = KeyValues::new();
        let c = TrainConfig {
            clip_norm: Some(5.0),
            finetune_epochs: 2,
            ..TrainConfig::new(3, 16)
        };
        c.write_kv(&mut kv);
        assert_eq!(TrainConfig::from_kv(&kv).unwrap(), c);
    }

    #[test]
    fn log_line_round_trip() {
        let l = EpochLog {
            epoch: 3,
            phase: Phase::AmSoftmax,
            loss: 1.25,
            top1: 0.875,
            lr: 1e-4 * 0.95f64.powi(3),
        };
        let s = l.to_string();
        assert!(s.starts_with("epoch=3 phase=AMS loss=1.25 top1=0.875 lr="));
        assert_eq!(s.parse::<EpochLog>().unwrap(), l);
        assert!("epoch=1 phase=XX".parse::<EpochLog>().is_err());
    }
}
