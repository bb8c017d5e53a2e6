//! Datasets, synthetic generators, CSV ingestion and the data-heterogeneity
//! partitioners.

mod csv_ingest;
mod dataset;
mod partition;
mod synth;
mod transform;

pub use csv_ingest::{ingest_csv, CsvSchema};
pub use dataset::{Dataset, FeatureShape};
pub use partition::{
    largest_remainder, partition, partition_dirichlet, partition_feature_shift,
    partition_pathological, partition_real_world, train_len, PartitionResult, ScenarioKind,
    ScenarioSpec, SplitMode,
};
pub use synth::{gen_gaussian_mixture, gen_har_like, HarLikeConfig};
pub use transform::DomainTransform;

/// Independent seed for a `(client, round, purpose)` stream derived from a
/// master seed (splitmix64 finaliser over the mixed tuple).
pub fn substream(seed: u64, client: u64, round: u64, purpose: u64) -> u64 {
    let mut z = seed
        ^ client.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ round.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ purpose.wrapping_mul(0x1656_67B1_9E37_79F9);
    for _ in 0..2 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
