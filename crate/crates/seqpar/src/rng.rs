//! Counter-based dropout masks.
//!
//! Every mask element is a pure function of `(seed, layer, site, microbatch,
//! logical element index)`, so any rank can produce any slice of a mask and a
//! recomputation reproduces it exactly.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The three dropout sites of a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DropoutSite {
    AttentionProbs = 1,
    Projection = 2,
    Mlp = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGenerator {
    pub seed: u64,
    pub layer: u64,
    pub microbatch: u64,
}

impl MaskGenerator {
    fn stream(&self, site: DropoutSite) -> u64 {
        (self.layer << 34) ^ (self.microbatch << 2) ^ site as u64
    }

    /// Keep flags (1 = keep) for logical elements `start .. start + len`.
    pub fn keep(&self, site: DropoutSite, start: u64, len: usize, p: f64) -> Vec<u8> {
        if p <= 0.0 {
            return vec![1; len];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream(site));
        // One u64 (two 32-bit words) per element.
        rng.set_word_pos(u128::from(start) * 2);
        (0..len)
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                u8::from(u >= p)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_agree_with_the_whole() {
        let g = MaskGenerator { seed: 7, layer: 3, microbatch: 2 };
        let whole = g.keep(DropoutSite::Mlp, 0, 100, 0.3);
        let tail = g.keep(DropoutSite::Mlp, 37, 63, 0.3);
        assert_eq!(&whole[37..], &tail[..]);
    }

    #[test]
    fn sites_and_seeds_differ() {
        let g = MaskGenerator { seed: 7, layer: 0, microbatch: 1 };
        let a = g.keep(DropoutSite::Mlp, 0, 256, 0.5);
        assert_ne!(a, g.keep(DropoutSite::Projection, 0, 256, 0.5));
        assert_ne!(a, MaskGenerator { seed: 8, ..g }.keep(DropoutSite::Mlp, 0, 256, 0.5));
        let kept = a.iter().filter(|&&k| k == 1).count();
        assert!((80..176).contains(&kept), "{kept}");
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let g = MaskGenerator { seed: 1, layer: 0, microbatch: 1 };
        assert!(g.keep(DropoutSite::AttentionProbs, 5, 10, 0.0).iter().all(|&k| k == 1));
    }
}
