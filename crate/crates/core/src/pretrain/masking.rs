//! MLM corruption: select 15% of maskable positions, then replace 80% of the
//! selected with the mask token, 10% with a random content token, and keep
//! 10% unchanged.  Labels carry the original id at selected positions and an
//! ignore marker everywhere else.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::pretrain::vocab::{MASK_ID, NUM_SPECIALS};
use crate::rng::Rng;

/// Label value for positions that do not contribute to the loss.
pub const IGNORE_LABEL: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingPolicy {
    /// Probability a maskable position is selected for corruption.
    pub mask_prob: f64,
    /// Of the selected: fraction replaced by the mask token...
    pub mask_token_frac: f64,
    /// ...fraction replaced by a random content token...
    pub random_frac: f64,
    /// ...and fraction left unchanged.
    pub keep_frac: f64,
    pub mask_token_id: u32,
    pub pad_token_id: u32,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            mask_prob: 0.15,
            mask_token_frac: 0.80,
            random_frac: 0.10,
            keep_frac: 0.10,
            mask_token_id: MASK_ID,
            pad_token_id: crate::pretrain::vocab::PAD_ID,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let sum = self.mask_token_frac + self.random_frac + self.keep_frac;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mask/random/keep fractions sum to {sum}, expected 1"
            )));
        }
        for (name, f) in [
            ("mask_prob", self.mask_prob),
            ("mask_token_frac", self.mask_token_frac),
            ("random_frac", self.random_frac),
            ("keep_frac", self.keep_frac),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} {f} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Corrupts a sequence for MLM.  Special tokens (ids below [`NUM_SPECIALS`])
/// are never selected; a sequence of only specials comes back unchanged with
/// all labels ignored.  `vocab_size` bounds the random-replacement draw.
pub fn apply_masking(
    tokens: &[u32],
    policy: &MaskingPolicy,
    vocab_size: u32,
    rng: &mut Rng,
) -> Result<(Vec<u32>, Vec<i64>)> {
    policy.validate()?;
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::Vocab(format!(
            "vocab of {vocab_size} has no content tokens to draw replacements from"
        )));
    }
    let mut corrupted = Vec::with_capacity(tokens.len());
    let mut labels = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t < NUM_SPECIALS || rng.random::<f64>() >= policy.mask_prob {
            corrupted.push(t);
            labels.push(IGNORE_LABEL);
            continue;
        }
        labels.push(t as i64);
        let r = rng.random::<f64>();
        if r < policy.mask_token_frac {
            corrupted.push(policy.mask_token_id);
        } else if r < policy.mask_token_frac + policy.random_frac {
            corrupted.push(rng.random_range(NUM_SPECIALS..vocab_size));
        } else {
            corrupted.push(t);
        }
    }
    Ok((corrupted, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, salt};

    #[test]
    fn zero_probability_is_identity_with_all_ignored() {
        let policy = MaskingPolicy {
            mask_prob: 0.0,
            ..MaskingPolicy::default()
        };
        let tokens = [3u32, 7, 9, 4, 5];
        let mut rng = rng::stream(1, salt::MASKING);
        let (c, l) = apply_masking(&tokens, &policy, 30, &mut rng).unwrap();
        assert_eq!(c, tokens);
        assert!(l.iter().all(|&x| x == IGNORE_LABEL));
    }

    #[test]
    fn full_probability_full_mask_fraction_masks_every_content_token() {
        let policy = MaskingPolicy {
            mask_prob: 1.0,
            mask_token_frac: 1.0,
            random_frac: 0.0,
            keep_frac: 0.0,
            ..MaskingPolicy::default()
        };
        let tokens = [0u32, 3, 7, 9, 4];
        let mut rng = rng::stream(2, salt::MASKING);
        let (c, l) = apply_masking(&tokens, &policy, 30, &mut rng).unwrap();
        assert_eq!(c, vec![0, 3, MASK_ID, MASK_ID, MASK_ID]);
        assert_eq!(l, vec![-1, -1, 7, 9, 4]);
    }

    #[test]
    fn specials_only_sequence_is_untouched() {
        let tokens = [0u32, 1, 2, 3];
        let mut rng = rng::stream(3, salt::MASKING);
        let (c, l) =
            apply_masking(&tokens, &MaskingPolicy::default(), 30, &mut rng).unwrap();
        assert_eq!(c, tokens);
        assert!(l.iter().all(|&x| x == IGNORE_LABEL));
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let policy = MaskingPolicy {
            mask_token_frac: 0.7,
            ..MaskingPolicy::default()
        };
        let mut rng = rng::stream(4, salt::MASKING);
        assert!(apply_masking(&[5], &policy, 30, &mut rng).is_err());
    }

    #[test]
    fn statistics_converge_to_policy_fractions() {
        // 100k maskable positions; binomial 3-sigma bounds are well inside
        // the +-0.01 / +-0.02 acceptance windows.
        let policy = MaskingPolicy::default();
        let tokens = vec![10u32; 100_000];
        let mut rng = rng::stream(5, salt::MASKING);
        let (c, l) = apply_masking(&tokens, &policy, 1000, &mut rng).unwrap();
        let selected: Vec<usize> = (0..tokens.len()).filter(|&i| l[i] >= 0).collect();
        let frac = selected.len() as f64 / tokens.len() as f64;
        assert!((frac - 0.15).abs() < 0.01, "selected fraction {frac}");

        let masked = selected.iter().filter(|&&i| c[i] == MASK_ID).count();
        let kept = selected.iter().filter(|&&i| c[i] == 10).count();
        let random = selected.len() - masked - kept;
        let m = masked as f64 / selected.len() as f64;
        let r = random as f64 / selected.len() as f64;
        let k = kept as f64 / selected.len() as f64;
        assert!((m - 0.80).abs() < 0.02, "mask fraction {m}");
        // the random draw can collide with the original token; it then counts
        // as kept, shifting at most 1/996 of the random mass
        assert!((r - 0.10).abs() < 0.02, "random fraction {r}");
        assert!((k - 0.10).abs() < 0.02, "keep fraction {k}");
    }

    #[test]
    fn same_seed_same_corruption() {
        let tokens: Vec<u32> = (0..64).map(|i| 4 + (i % 20)).collect();
        let run = || {
            let mut rng = rng::stream(9, salt::MASKING);
            apply_masking(&tokens, &MaskingPolicy::default(), 30, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }
}
