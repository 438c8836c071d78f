//! Recover groups from an affinity matrix: spectral clustering with a given
//! count, the eigengap estimate, and the exact components of a clean matrix.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackgroup::clustering::{choose_k, connected_components, eigengap_k, spectral_cluster, CountPolicy, SpectralConfig};

fn main() -> trackgroup::error::Result<()> {
    let labels = [0, 0, 0, 1, 1, 2, 2, 2, 2, 3];
    let n = labels.len();
    let clean = DMatrix::from_fn(n, n, |i, j| f64::from(labels[i] == labels[j]));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut noisy = clean.clone();
    for i in 0..n {
        for j in i + 1..n {
            let v = (clean[(i, j)] + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0);
            noisy[(i, j)] = v;
            noisy[(j, i)] = v;
        }
    }

    let cfg = SpectralConfig::default();
    println!("components of the clean matrix: {}", connected_components(&clean)?);
    println!("spectral, k = 4:                {}", spectral_cluster(&noisy, 4, &cfg)?);
    println!("eigengap estimate of k:         {}", eigengap_k(&noisy)?);
    for card in [3.6, f64::NAN] {
        println!(
            "cardinality {card}: fallback picks k = {}",
            choose_k(&noisy, card, CountPolicy::Fallback)?
        );
    }
    Ok(())
}
