use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Kaiming-uniform fan-in init with leaky slope `a = √5`, the usual default
/// for dense and conv layers: `U(−1/√fan_in, 1/√fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(fan_in: usize, n: usize, rng: &mut R) -> Vec<f32> {
    let a2 = 5.0;
    let bound = (6.0 / ((1.0 + a2) * fan_in.max(1) as f64)).sqrt() as f32;
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}
