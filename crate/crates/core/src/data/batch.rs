use rand::seq::SliceRandom;

use super::sample::{EnvironmentSample, Mode};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{indexed_stream, Stream};

/// Stacks samples into `([B, C_in, N, N], [B, 1, N, N])`.
pub fn stack<T: Real>(samples: &[&EnvironmentSample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Domain("cannot batch zero samples".into()))?;
    let (grid, mode) = (first.grid, first.mode);
    if let Some(s) = samples.iter().find(|s| s.grid != grid || s.mode != mode) {
        return Err(Error::Config(format!(
            "cannot batch a {} {} sample with {} {} samples",
            s.grid, s.mode, grid, mode
        )));
    }
    let c = mode.input_channels();
    let mut x = Vec::with_capacity(samples.len() * c * grid * grid);
    let mut y = Vec::with_capacity(samples.len() * grid * grid);
    for s in samples {
        for plane in s.input_planes() {
            x.extend(plane.iter().map(|&v| T::lit(v as f64)));
        }
        y.extend(s.p.iter().map(|&v| T::lit(v as f64)));
    }
    let b = samples.len();
    Ok((
        Tensor::new(&[b, c, grid, grid], x)?,
        Tensor::new(&[b, 1, grid, grid], y)?,
    ))
}

/// Fixed-size shuffled training batches. Batch `step` depends only on
/// `(shuffle_seed, step)`; every epoch is a fresh permutation and the final
/// partial batch of an epoch is dropped.
#[derive(Clone, Debug)]
pub struct Batcher {
    samples: Vec<EnvironmentSample>,
    batch_size: usize,
    shuffle_seed: u64,
    cached_epoch: Option<(usize, Vec<usize>)>,
}

impl Batcher {
    pub fn new(
        samples: Vec<EnvironmentSample>,
        batch_size: usize,
        shuffle_seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if samples.len() < batch_size {
            return Err(Error::Config(format!(
                "{} samples cannot fill a batch of {batch_size}",
                samples.len()
            )));
        }
        let (grid, mode) = (samples[0].grid, samples[0].mode);
        if samples.iter().any(|s| s.grid != grid || s.mode != mode) {
            return Err(Error::Config(
                "all samples of a batcher must share grid size and mode".into(),
            ));
        }
        Ok(Batcher {
            samples,
            batch_size,
            shuffle_seed,
            cached_epoch: None,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples.len() / self.batch_size
    }

    pub fn mode(&self) -> Mode {
        self.samples[0].mode
    }

    pub fn samples(&self) -> &[EnvironmentSample] {
        &self.samples
    }

    /// Sample order of `epoch`.
    pub fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut indexed_stream(
            self.shuffle_seed,
            Stream::Shuffle,
            epoch as u64,
        ));
        order
    }

    pub fn indices(&mut self, step: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let (epoch, within) = (step / per, step % per);
        if self.cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.cached_epoch = Some((epoch, self.permutation(epoch)));
        }
        let order = &self.cached_epoch.as_ref().expect("cached").1;
        order[within * self.batch_size..(within + 1) * self.batch_size].to_vec()
    }

    pub fn batch<T: Real>(&mut self, step: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let idx = self.indices(step);
        let refs: Vec<&EnvironmentSample> = idx.iter().map(|&i| &self.samples[i]).collect();
        stack(&refs)
    }
}

/// Consecutive evaluation batches, the last one possibly smaller.
pub fn eval_batches<'a, T: Real>(
    samples: &'a [EnvironmentSample],
    batch_size: usize,
) -> impl Iterator<Item = Result<(Tensor<T>, Tensor<T>)>> + 'a {
    samples
        .chunks(batch_size.max(1))
        .map(|c| stack(&c.iter().collect::<Vec<_>>()))
}
