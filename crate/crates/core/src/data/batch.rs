//! Half-source/half-target batch composition.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{mix_seed, Clip, Domain};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Indices into the source and target pools for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Seed of the shuffle for `epoch` of a run seeded with `run_seed`.
pub fn epoch_seed(run_seed: u64, epoch: usize) -> u64 {
    mix_seed(run_seed, 0x6570_6f63_6800_0000 | epoch as u64)
}

/// Shuffles both pools independently and cuts them into batches of
/// `batch_size / 2` source plus `batch_size / 2` target clips. The number of
/// batches is `min(|source|, |target|) / (batch_size / 2)`; leftovers are
/// dropped for this epoch.
pub fn make_batches(source: &[Clip], target: &[Clip], batch_size: usize, epoch_seed: u64) -> Result<Vec<BatchPlan>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::invalid(format!("batch size must be even and positive, got {batch_size}")));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("both source and target pools must be non-empty"));
    }
    let half = batch_size / 2;
    let n = source.len().min(target.len()) / half;
    if n == 0 {
        return Err(Error::invalid(format!(
            "pools of {} source and {} target clips cannot fill half-batches of {half}",
            source.len(),
            target.len()
        )));
    }
    let shuffled = |len: usize, salt: u64| {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(epoch_seed, salt)));
        idx
    };
    let s = shuffled(source.len(), 1);
    let t = shuffled(target.len(), 2);
    Ok((0..n)
        .map(|b| BatchPlan {
            source: s[b * half..(b + 1) * half].to_vec(),
            target: t[b * half..(b + 1) * half].to_vec(),
        })
        .collect())
}

/// A stacked batch whose first `n_source` rows are labelled source clips and
/// remaining rows are target clips. Target action labels are never copied.
#[derive(Debug, Clone)]
pub struct TrainingBatch<T> {
    pub clips: Tensor<T>,
    pub source_labels: Vec<usize>,
    pub n_source: usize,
    pub n_target: usize,
    pub ids: Vec<String>,
}

impl<T: Scalar> TrainingBatch<T> {
    pub fn assemble(plan: &BatchPlan, source: &[Clip], target: &[Clip]) -> Result<Self> {
        let mut videos = Vec::with_capacity(plan.source.len() + plan.target.len());
        let mut labels = Vec::with_capacity(plan.source.len());
        let mut ids = Vec::with_capacity(videos.capacity());
        for &i in &plan.source {
            let clip = source.get(i).ok_or_else(|| Error::invalid(format!("source index {i} out of range")))?;
            if clip.domain != Domain::Source {
                return Err(Error::invalid(format!("clip {} in the source half is not a source clip", clip.id)));
            }
            labels.push(
                clip.action
                    .ok_or_else(|| Error::invalid(format!("source clip {} has no action label", clip.id)))?,
            );
            videos.push(&clip.video);
            ids.push(clip.id.clone());
        }
        for &i in &plan.target {
            let clip = target.get(i).ok_or_else(|| Error::invalid(format!("target index {i} out of range")))?;
            if clip.domain != Domain::Target {
                return Err(Error::invalid(format!("clip {} in the target half is not a target clip", clip.id)));
            }
            videos.push(&clip.video);
            ids.push(clip.id.clone());
        }
        let stacked = Tensor::stack(&videos)?;
        let clips = Tensor::new(
            stacked.shape(),
            stacked.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
        )?;
        Ok(Self {
            clips,
            source_labels: labels,
            n_source: plan.source.len(),
            n_target: plan.target.len(),
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.n_source + self.n_target
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 0 for every source row, 1 for every target row.
    pub fn domain_labels(&self) -> Vec<u8> {
        let mut d = vec![0u8; self.n_source];
        d.resize(self.len(), 1);
        d
    }

    /// Checks the half/half composition the adversarial step relies on.
    pub fn check_composition(&self) -> Result<()> {
        if self.n_source == 0
            || self.n_source != self.n_target
            || self.source_labels.len() != self.n_source
            || self.clips.shape().first() != Some(&self.len())
        {
            return Err(Error::invalid(format!(
                "malformed batch: {} source / {} target rows, {} labels, tensor {:?}",
                self.n_source,
                self.n_target,
                self.source_labels.len(),
                self.clips.shape()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize, domain: Domain) -> Vec<Clip> {
        (0..n)
            .map(|i| Clip {
                id: format!("{}{i}", domain.short()),
                video: Tensor::full(&[1, 2, 2, 2], 0.5),
                action: Some(i % 3),
                domain,
            })
            .collect()
    }

    #[test]
    fn halves_and_coverage() {
        let s = pool(21, Domain::Source);
        let t = pool(30, Domain::Target);
        let plans = make_batches(&s, &t, 8, 5).unwrap();
        assert_eq!(plans.len(), 5);
        let mut seen = vec![0; 21];
        for p in &plans {
            assert_eq!((p.source.len(), p.target.len()), (4, 4));
            for &i in &p.source {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c <= 1));
        assert_eq!(plans, make_batches(&s, &t, 8, 5).unwrap());
        assert_ne!(plans, make_batches(&s, &t, 8, 6).unwrap());
    }

    #[test]
    fn odd_batch_rejected() {
        let s = pool(4, Domain::Source);
        let t = pool(4, Domain::Target);
        assert!(make_batches(&s, &t, 3, 0).is_err());
        assert!(make_batches(&s, &t, 0, 0).is_err());
        assert!(make_batches(&s, &[], 2, 0).is_err());
    }

    #[test]
    fn assembled_batch_hides_target_labels() {
        let s = pool(4, Domain::Source);
        let t = pool(4, Domain::Target);
        let plan = &make_batches(&s, &t, 4, 1).unwrap()[0];
        let b = TrainingBatch::<f64>::assemble(plan, &s, &t).unwrap();
        b.check_composition().unwrap();
        assert_eq!(b.source_labels.len(), 2);
        assert_eq!(b.domain_labels(), vec![0, 0, 1, 1]);
        assert_eq!(b.clips.shape(), &[4, 1, 2, 2, 2]);
        // swapped pools are rejected
        assert!(TrainingBatch::<f64>::assemble(plan, &t, &s).is_err());
    }
}
