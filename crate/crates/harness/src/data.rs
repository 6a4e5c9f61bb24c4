//! Seed hierarchy and the per-run synthetic dataset.

use cankd_core::toy::{generate_sample, SyntheticSample};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DatasetSection;
use crate::error::{HarnessError, Result};

/// Independent random streams derived from one run seed. Each consumer owns a
/// stream, so e.g. turning distillation on does not shift the data order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    TeacherInit = 2,
    TeacherShuffle = 3,
    StudentInit = 4,
    DistillInit = 5,
    StudentShuffle = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: DatasetSection,
    pub train: Vec<SyntheticSample<f64>>,
    pub val: Vec<SyntheticSample<f64>>,
}

impl Dataset {
    /// Train and val samples get their own per-sample seeds from the data stream.
    pub fn generate(seed: u64, config: &DatasetSection) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Data);
        let mut draw = |n: usize| -> Result<Vec<SyntheticSample<f64>>> {
            (0..n)
                .map(|_| {
                    generate_sample(rng.next_u64(), config.height, config.width, config.num_classes)
                        .map_err(HarnessError::model("dataset"))
                })
                .collect()
        };
        let train = draw(config.train_size)?;
        let val = draw(config.val_size)?;
        Ok(Dataset { seed, config: config.clone(), train, val })
    }
}
