//! Synthetic acoustic frames: each token is rendered as a fixed embedding
//! repeated for a few frames, plus Gaussian noise.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

use super::language::Utterance;

/// Per-token "pronunciations": row `id` of `[vocab, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub table: Tensor,
}

impl FeatureBank {
    pub fn random(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(derive_seed(seed, "feature-bank"));
        let data = (0..vocab * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            table: Tensor::new(vec![vocab, dim], data).expect("non-empty bank"),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let d = self.dim();
        &self.table.data()[id as usize * d..(id as usize + 1) * d]
    }
}

/// Frames `[frames_per_token * len, dim]` for `utt`.
pub fn synth_features(
    utt: &Utterance,
    bank: &FeatureBank,
    frames_per_token: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<Tensor> {
    if frames_per_token == 0 {
        return Err(Error::Contract("frames_per_token must be >= 1".into()));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::Contract(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let vocab = bank.table.shape()[0];
    if let Some(&id) = utt.tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Vocabulary { id, vocab });
    }
    let dim = bank.dim();
    let mut rng = Rng::seed_from_u64(derive_seed(seed, &format!("noise/{}", utt.id)));
    let noise = Normal::new(0.0, noise_sd).expect("noise_sd validated");
    let mut data = Vec::with_capacity(utt.tokens.len() * frames_per_token * dim);
    for &tok in &utt.tokens {
        let row = bank.row(tok);
        for _ in 0..frames_per_token {
            for &v in row {
                let n = if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(v + n);
            }
        }
    }
    Tensor::new(vec![utt.tokens.len() * frames_per_token, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt() -> Utterance {
        Utterance {
            id: 3,
            tokens: vec![5, 9, 5],
            lang_tags: vec![0, 0, 0],
            features: None,
        }
    }

    #[test]
    fn noiseless_frames_repeat_within_token() {
        let bank = FeatureBank::random(12, 4, 1);
        let f = synth_features(&utt(), &bank, 3, 0.0, 7).unwrap();
        assert_eq!(f.shape(), &[9, 4]);
        let rows: Vec<&[f64]> = f.data().chunks(4).collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
        assert_eq!(rows[0], bank.row(5));
        assert_eq!(rows[6], bank.row(5));
    }

    #[test]
    fn same_seed_same_features() {
        let bank = FeatureBank::random(12, 4, 1);
        let a = synth_features(&utt(), &bank, 2, 0.5, 7).unwrap();
        assert_eq!(a, synth_features(&utt(), &bank, 2, 0.5, 7).unwrap());
        assert_ne!(a, synth_features(&utt(), &bank, 2, 0.5, 8).unwrap());
    }

    #[test]
    fn noisy_mean_within_clt_bound() {
        let bank = FeatureBank::random(12, 4, 1);
        let sd = 0.8;
        let u = Utterance {
            id: 0,
            tokens: vec![7],
            lang_tags: vec![0],
            features: None,
        };
        let f = synth_features(&u, &bank, 1000, sd, 99).unwrap();
        let bound = 3.0 * sd / 1000f64.sqrt();
        for d in 0..4 {
            let mean: f64 = f.data().iter().skip(d).step_by(4).sum::<f64>() / 1000.0;
            assert!((mean - bank.row(7)[d]).abs() < bound, "dim {d}: {mean}");
        }
    }
}
