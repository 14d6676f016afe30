//! Clips, the synthetic day/night generator, dataset storage and batching.

mod batch;
mod frames;
mod store;
mod synthetic;

pub use batch::{epoch_seed, make_batches, BatchPlan, TrainingBatch};
pub use frames::{load_frame_directory, subsample_indices};
pub use store::{read_dataset, write_dataset, DATASET_INDEX};
pub use synthetic::{
    class_names, generate_clip, generate_dataset, night_transform, MotionProgram, NightParams, SyntheticConfig,
    TRAIN_FRACTION,
};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Domain label: 0 for source, 1 for target.
    pub fn index(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }

    pub(crate) fn short(self) -> &'static str {
        match self {
            Domain::Source => "src",
            Domain::Target => "tgt",
        }
    }
}

/// A `(C, T, H, W)` video with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    pub video: Tensor<f32>,
    pub action: Option<usize>,
    pub domain: Domain,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train_source: Vec<Clip>,
    pub train_target: Vec<Clip>,
    pub test_source: Vec<Clip>,
    pub test_target: Vec<Clip>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train_source.len() + self.train_target.len() + self.test_source.len() + self.test_target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Target training clips with their action labels removed, as handed to
    /// the trainer.
    pub fn unlabeled_target(&self) -> Vec<Clip> {
        self.train_target
            .iter()
            .map(|c| Clip {
                action: None,
                ..c.clone()
            })
            .collect()
    }

    pub fn parts(&self) -> [(&'static str, &[Clip]); 4] {
        [
            ("train", &self.train_source),
            ("train", &self.train_target),
            ("test", &self.test_source),
            ("test", &self.test_target),
        ]
    }
}

/// SplitMix64 finalizer over a pair of seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(a ^ splitmix(b))
}
