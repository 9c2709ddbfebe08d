//! Deterministic batching: each epoch shuffles the sequences with a stream derived
//! from `(seed, epoch)`, cuts every sequence into fixed-length windows, and groups
//! consecutive windows into batches. Short windows are padded by repeating the
//! last frame and flagged in the mask.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[windows * window_frames, dim]`; each window's frames are contiguous.
    pub frames: Tensor,
    pub frame_mask: Vec<bool>,
    pub window_frames: usize,
}

/// Sequence order for one epoch; a pure function of `(n, seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug)]
pub struct BatchIterator<'a> {
    seqs: &'a [Tensor],
    dim: usize,
    window: usize,
    windows_per_batch: usize,
    seed: u64,
    epoch: u64,
    /// `(sequence, start frame)` for the current epoch.
    plan: Vec<(usize, usize)>,
    pos: usize,
}

impl<'a> BatchIterator<'a> {
    /// `batch_frames` is rounded down to a whole number of windows (at least one).
    pub fn new(seqs: &'a [Tensor], batch_frames: usize, window_frames: usize, seed: u64) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidConfig("no training sequences".into()));
        }
        if window_frames == 0 {
            return Err(Error::InvalidConfig("window_frames must be positive".into()));
        }
        let dim = seqs[0].cols();
        for s in seqs {
            let (t, d) = s.require_matrix("batch_iterator")?;
            if d != dim {
                return Err(Error::shape("batch_iterator", format!("mixed feature dims {dim} and {d}")));
            }
            if t == 0 {
                return Err(Error::InvalidConfig("empty sequence in training set".into()));
            }
        }
        let mut it = Self {
            seqs,
            dim,
            window: window_frames,
            windows_per_batch: (batch_frames / window_frames).max(1),
            seed,
            epoch: 0,
            plan: Vec::new(),
            pos: 0,
        };
        it.plan = it.plan_epoch(0);
        Ok(it)
    }

    fn plan_epoch(&self, epoch: u64) -> Vec<(usize, usize)> {
        epoch_order(self.seqs.len(), self.seed, epoch)
            .into_iter()
            .flat_map(|s| (0..self.seqs[s].rows()).step_by(self.window).map(move |st| (s, st)))
            .collect()
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.plan.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Advances past `n` batches without materializing them.
    pub fn skip_batches(&mut self, n: u64) {
        let per_epoch = self.plan.len() as u64;
        let target = self.pos as u64 + n * self.windows_per_batch as u64;
        let epochs = target / per_epoch;
        if epochs > 0 {
            self.epoch += epochs;
            self.plan = self.plan_epoch(self.epoch);
        }
        self.pos = (target % per_epoch) as usize;
    }

    fn next_window(&mut self, data: &mut Vec<f64>, mask: &mut Vec<bool>) {
        if self.pos == self.plan.len() {
            self.epoch += 1;
            self.plan = self.plan_epoch(self.epoch);
            self.pos = 0;
        }
        let (s, start) = self.plan[self.pos];
        self.pos += 1;
        let seq = &self.seqs[s];
        let end = (start + self.window).min(seq.rows());
        for t in start..end {
            data.extend_from_slice(seq.row(t));
            mask.push(true);
        }
        let last = seq.row(end - 1);
        for _ in end..start + self.window {
            data.extend_from_slice(last);
            mask.push(false);
        }
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let n = self.windows_per_batch * self.window;
        let mut data = Vec::with_capacity(n * self.dim);
        let mut mask = Vec::with_capacity(n);
        for _ in 0..self.windows_per_batch {
            self.next_window(&mut data, &mut mask);
        }
        let frames = Tensor::matrix(n, self.dim, data).expect("window sizes are consistent");
        Some(Batch {
            frames,
            frame_mask: mask,
            window_frames: self.window,
        })
    }
}
