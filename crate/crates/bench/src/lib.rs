//! Fixtures shared by the benchmarks.

use pretzel_core::codec::LatentCodec;
use pretzel_core::config::RunConfig;
use pretzel_core::dataset::{generate_records, Record};
use pretzel_core::pretzel::{Packed, Pretzel};
use pretzel_core::training::sample_examples;
use pretzel_core::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub config: RunConfig,
    pub model: Pretzel,
    pub store: ParamStore<f32>,
    pub codec: LatentCodec,
    pub records: Vec<Record>,
}

/// A freshly initialized compact model with a small fitted codec. Timings do
/// not depend on the weights.
pub fn fixture() -> Fixture {
    let config = RunConfig::compact();
    let (model, store) = Pretzel::init::<f32>(&config.model, 0).expect("compact config is valid");
    let codec = LatentCodec::fit_random(500, 1).expect("codec fits");
    let records = generate_records(&codec, 256, 2).expect("records generate");
    Fixture { config, model, store, codec, records }
}

impl Fixture {
    /// A packed batch drawn with the example mix of `stage`.
    pub fn batch(&self, stage: u8, size: usize) -> Packed<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from(stage));
        let mix = self.config.stage(stage).mix;
        let examples = sample_examples(stage, &self.records, size, mix, &mut rng);
        let mut p = Packed::new(&self.model, &examples, &[], None).expect("examples fit");
        p.nf_only = stage == 1;
        p
    }
}
