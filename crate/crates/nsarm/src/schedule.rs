//! Scale schedules: the ordered latent resolutions each residual map lives
//! at, plus the preliminary split `k_t` separating transformation-network
//! scales from autoregressively predicted ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered list of (h_k, w_k) latent resolutions, the preliminary split
/// `k_t` (1-based, scales 1..=k_t come from the transformation network),
/// and the bit width `d` of each token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    scales: Vec<(usize, usize)>,
    k_t: usize,
    d: usize,
}

/// Side lengths of the 1024-pixel production schedule.
const SIDES_1024: [usize; 13] = [16, 32, 64, 96, 128, 192, 256, 320, 384, 512, 640, 768, 1024];
/// Desk-scale ladder for a 16x16 latent (64x64 images, 4x tokenizer).
const SIDES_DESK: [usize; 7] = [1, 2, 4, 6, 8, 12, 16];
/// Micro ladder for a 4x4 latent (16x16 images), used by fast tests.
const SIDES_MICRO: [usize; 3] = [1, 2, 4];

impl ScaleSchedule {
    pub fn new(scales: Vec<(usize, usize)>, k_t: usize, d: usize) -> Result<Self> {
        let s = ScaleSchedule { scales, k_t, d };
        s.validate_internal()?;
        Ok(s)
    }

    /// Built-in presets keyed by target image side.
    ///
    /// 1024 is the production 13-scale sequence with k_t = 7 (4x SR from a
    /// 256-side input); 64 is the desk preset (k_t = 3, side 4 matches the
    /// 4x-downsampled LR latent under a 4x tokenizer); 16 is a micro preset
    /// for tests.
    pub fn preset(target_side: usize) -> Result<Self> {
        match target_side {
            1024 => Self::new(SIDES_1024.iter().map(|&s| (s, s)).collect(), 7, 64),
            64 => Self::new(SIDES_DESK.iter().map(|&s| (s, s)).collect(), 3, 16),
            16 => Self::new(SIDES_MICRO.iter().map(|&s| (s, s)).collect(), 1, 16),
            other => Err(Error::Schedule(format!(
                "unsupported preset {other}; available: 16, 64, 1024"
            ))),
        }
    }

    /// Non-square schedule scaled from the desk ladder. Heights follow the
    /// ladder against `latent.0`, widths are scheduled proportionally and
    /// rounded to at least 1; the split is placed where the scale equals
    /// `lr_latent` exactly.
    pub fn proportional(latent: (usize, usize), lr_latent: (usize, usize), d: usize) -> Result<Self> {
        let (h, w) = latent;
        let base_max = *SIDES_DESK.last().unwrap() as f64;
        let mut scales: Vec<(usize, usize)> = SIDES_DESK
            .iter()
            .map(|&s| {
                let f = s as f64 / base_max;
                (
                    ((h as f64 * f).round() as usize).max(1),
                    ((w as f64 * f).round() as usize).max(1),
                )
            })
            .collect();
        // Enforce monotonicity after rounding and pin the final scale.
        for i in 1..scales.len() {
            scales[i].0 = scales[i].0.max(scales[i - 1].0);
            scales[i].1 = scales[i].1.max(scales[i - 1].1);
        }
        *scales.last_mut().unwrap() = (h, w);
        scales.dedup();
        if !scales.contains(&lr_latent) {
            let pos = scales.iter().position(|&s| s.0 >= lr_latent.0 && s.1 >= lr_latent.1);
            scales.insert(pos.unwrap_or(scales.len() - 1), lr_latent);
            scales.dedup();
        }
        let k_t = scales.iter().position(|&s| s == lr_latent).unwrap() + 1;
        Self::new(scales, k_t, d)
    }

    fn validate_internal(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Schedule("empty scale list".into()));
        }
        for (k, w) in self.scales.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            if b.0 < a.0 || b.1 < a.1 {
                return Err(Error::Schedule(format!(
                    "decreasing scale at step {}: {:?} -> {:?}",
                    k + 1,
                    a,
                    b
                )));
            }
            if a == b {
                return Err(Error::Schedule(format!(
                    "no strict increase at step {}: {a:?} repeated",
                    k + 1
                )));
            }
        }
        if self.scales.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Schedule("zero dimension in schedule".into()));
        }
        if self.k_t < 1 || self.k_t >= self.scales.len() {
            return Err(Error::Schedule(format!(
                "k_t = {} out of range 1..{}",
                self.k_t,
                self.scales.len()
            )));
        }
        if self.d == 0 {
            return Err(Error::Schedule("latent bit width d must be positive".into()));
        }
        Ok(())
    }

    /// Check the schedule against a concrete latent resolution.
    pub fn validate(&self, latent: (usize, usize)) -> Result<()> {
        self.validate_internal()?;
        let last = *self.scales.last().unwrap();
        if last != latent {
            return Err(Error::Schedule(format!(
                "last scale {last:?} does not equal latent {latent:?}"
            )));
        }
        Ok(())
    }

    /// Number of scales K.
    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// Resolution of scale k (1-based).
    pub fn scale(&self, k: usize) -> (usize, usize) {
        self.scales[k - 1]
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.scales
    }

    pub fn k_t(&self) -> usize {
        self.k_t
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Latent resolution: the final scale.
    pub fn latent(&self) -> (usize, usize) {
        *self.scales.last().unwrap()
    }

    /// Resolution of the preliminary split scale, which equals the LR latent
    /// resolution by construction.
    pub fn lr_latent(&self) -> (usize, usize) {
        self.scales[self.k_t - 1]
    }

    /// Total tokens over scales from_k..=to_k (1-based, inclusive).
    pub fn token_count(&self, from_k: usize, to_k: usize) -> Result<usize> {
        if from_k < 1 || to_k > self.scales.len() || from_k > to_k {
            return Err(Error::Schedule(format!(
                "token_count range {from_k}..={to_k} out of bounds for K={}",
                self.scales.len()
            )));
        }
        Ok(self.scales[from_k - 1..to_k]
            .iter()
            .map(|&(h, w)| h * w)
            .sum())
    }

    /// Tokens of the full input sequence the AR model consumes: the
    /// condition block at scale 1's resolution plus one block per
    /// accumulated input map.
    pub fn sequence_len(&self) -> usize {
        self.token_count(1, self.len()).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn production_preset_matches_published_sides() {
        let s = ScaleSchedule::preset(1024).unwrap();
        assert_eq!(s.len(), 13);
        assert_eq!(s.k_t(), 7);
        assert_eq!(s.scale(7), (256, 256)); // LR side for 4x SR from 256
        assert_eq!(s.scale(1), (16, 16));
        assert_eq!(s.scale(13), (1024, 1024));
    }

    #[test]
    fn desk_preset_splits_at_lr_latent() {
        let s = ScaleSchedule::preset(64).unwrap();
        let sides: Vec<usize> = s.scales().iter().map(|&(h, _)| h).collect();
        assert_eq!(sides, vec![1, 2, 4, 6, 8, 12, 16]);
        assert_eq!(s.k_t(), 3);
        // LR images are 16x16 pixels; with a 4x tokenizer the LR latent is 4x4.
        assert_eq!(s.lr_latent(), (4, 4));
        assert_eq!(s.d(), 16);
    }

    #[test]
    fn unsupported_preset_errors() {
        assert!(ScaleSchedule::preset(100).is_err());
    }

    #[test]
    fn validate_ok_and_errors() {
        let s = ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)], 2, 8).unwrap();
        assert!(s.validate((4, 4)).is_ok());
        assert!(s.validate((8, 8)).is_err()); // last scale mismatch

        assert!(ScaleSchedule::new(vec![(2, 2), (1, 1)], 1, 8).is_err()); // decreasing
        assert!(ScaleSchedule::new(vec![(1, 1), (2, 2)], 2, 8).is_err()); // k_t out of range
        assert!(ScaleSchedule::new(vec![(1, 1), (2, 2)], 0, 8).is_err());
        assert!(ScaleSchedule::new(vec![(1, 1), (1, 1), (2, 2)], 1, 8).is_err()); // no strict increase
    }

    #[test]
    fn token_count_examples() {
        let s = ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)], 2, 8).unwrap();
        assert_eq!(s.token_count(1, 3).unwrap(), 21);
        assert_eq!(s.token_count(2, 3).unwrap(), 20);
        assert_eq!(s.token_count(2, 2).unwrap(), 4);
        assert!(s.token_count(0, 2).is_err());
        assert!(s.token_count(1, 4).is_err());
    }

    #[test]
    fn proportional_non_square() {
        let s = ScaleSchedule::proportional((16, 8), (4, 2), 16).unwrap();
        assert_eq!(s.latent(), (16, 8));
        assert_eq!(s.lr_latent(), (4, 2));
        assert!(s.validate((16, 8)).is_ok());
    }

    proptest! {
        #[test]
        fn token_count_positive_and_additive(split in 1usize..7) {
            let s = ScaleSchedule::preset(64).unwrap();
            let total = s.token_count(1, 7).unwrap();
            prop_assert!(total > 0);
            if split < 7 {
                let a = s.token_count(1, split).unwrap();
                let b = s.token_count(split + 1, 7).unwrap();
                prop_assert!(a > 0 && b > 0);
                prop_assert_eq!(a + b, total);
            }
        }
    }
}
