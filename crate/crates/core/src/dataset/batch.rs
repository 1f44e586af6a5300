use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Utterance;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub crop_frames: usize,
}

impl BatchSpec {
    /// Shortest crop the TDNN accepts.
    pub const MIN_CROP: usize = 15;

    pub fn new(batch_size: usize, crop_frames: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if crop_frames < Self::MIN_CROP {
            return Err(Error::Config(format!(
                "crop_frames must be at least {}, got {crop_frames}",
                Self::MIN_CROP
            )));
        }
        Ok(BatchSpec {
            batch_size,
            crop_frames,
        })
    }
}

/// `x` is `[B, crop_frames, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// One epoch of shuffled, randomly cropped batches. The last batch may be
/// short.
#[derive(Debug)]
pub struct Batches {
    data: Arc<Vec<Utterance>>,
    plan: Vec<(usize, usize)>,
    spec: BatchSpec,
    pos: usize,
}

impl Batches {
    pub fn num_batches(&self) -> usize {
        self.plan.len().div_ceil(self.spec.batch_size)
    }

    pub fn num_crops(&self) -> usize {
        self.plan.len()
    }
}

pub fn make_batches(data: Arc<Vec<Utterance>>, spec: BatchSpec, seed: u64) -> Result<Batches> {
    BatchSpec::new(spec.batch_size, spec.crop_frames)?;
    if data.is_empty() {
        return Err(Error::Config("cannot batch an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut plan = Vec::with_capacity(order.len());
    for i in order {
        let t = data[i].features.num_frames();
        if t < spec.crop_frames {
            log::warn!(
                "skipping {} ({t} frames < crop of {})",
                data[i].path.display(),
                spec.crop_frames
            );
            continue;
        }
        plan.push((i, rng.gen_range(0..=t - spec.crop_frames)));
    }
    if plan.is_empty() {
        return Err(Error::Config("no utterance is long enough for the crop".into()));
    }
    Ok(Batches {
        data,
        plan,
        spec,
        pos: 0,
    })
}

impl Iterator for Batches {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.plan.len() {
            return None;
        }
        let end = (self.pos + self.spec.batch_size).min(self.plan.len());
        let dim = self.data[self.plan[self.pos].0].features.dim();
        let crop = self.spec.crop_frames;
        let mut x = Vec::with_capacity((end - self.pos) * crop * dim);
        let mut labels = Vec::with_capacity(end - self.pos);
        for &(i, start) in &self.plan[self.pos..end] {
            let u = &self.data[i];
            x.extend_from_slice(&u.features.frames().data()[start * dim..(start + crop) * dim]);
            labels.push(u.label);
        }
        let b = labels.len();
        self.pos = end;
        Some(Batch {
            x: Tensor::new(&[b, crop, dim], x).expect("consistent feature widths"),
            labels,
        })
    }
}

/// Batches produced on a worker thread through a bounded queue; the
/// producer blocks while `capacity` batches are waiting.
pub struct Prefetch {
    rx: Option<Receiver<Batch>>,
    worker: Option<JoinHandle<()>>,
}

pub fn prefetch(batches: Batches, capacity: usize) -> Prefetch {
    let (tx, rx) = sync_channel(capacity.max(1));
    let worker = std::thread::spawn(move || {
        for b in batches {
            if tx.send(b).is_err() {
                break;
            }
        }
    });
    Prefetch {
        rx: Some(rx),
        worker: Some(worker),
    }
}

impl Iterator for Prefetch {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for Prefetch {
    fn drop(&mut self) {
        drop(self.rx.take());
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
