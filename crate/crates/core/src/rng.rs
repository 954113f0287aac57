//! Named random streams.
//!
//! Every random draw in a run derives from the single configured seed. A
//! stream is identified by a label such as `"detector.weights"` or
//! `"data.task2.train.17"`; its generator is seeded with a SplitMix64 mix of
//! the run seed and the FNV-1a hash of the label, so streams are independent
//! of each other and of the order in which they are created.
//!
//! Labels in use:
//!
//! | label                          | consumer                                  |
//! |--------------------------------|-------------------------------------------|
//! | `detector.weights`             | frozen transformer decoder weights        |
//! | `detector.mix`                 | frozen pixel-embedding mixing matrix      |
//! | `data.prototypes`              | class and background prototypes           |
//! | `data.task{t}.{split}.{i}`     | layout and noise of one synthetic video   |
//! | `decoder.init`                 | video context decoder initialisation      |
//! | `prompts.t{t}`                 | frame / video prompt initialisation       |
//! | `heads.t{t}`                   | classifier and mask head initialisation   |
//! | `train.t{t}.epoch{e}`          | per-epoch shuffling of training videos    |
//! | `ogc.sample.t{t}`              | video sampling for the feature space      |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Matrix;

pub type StreamRng = ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed derived for `label` under the run seed `seed`.
pub fn stream_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(label)))
}

pub fn stream(seed: u64, label: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, label))
}

/// Matrix with i.i.d. `N(0, std^2)` entries.
pub fn gaussian_matrix(rng: &mut StreamRng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}
