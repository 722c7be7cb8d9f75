//! The emulation problem: a reference flow, the quantized plant that tracks
//! it, and the per-step dropout schedule.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::lti::{ContinuousLti, DiscretizedSystem, Matrix, Vector, DEFAULT_EXPM_TOL};
use crate::quantization::{
    DirectionAlphabet, DropoutMask, MaskedAlphabet, DEFAULT_DEDUP_TOL, DEFAULT_PATTERN_CAP,
};

/// Norm beyond which a rollout is declared diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Reference system, quantized plant and its full direction alphabet.
#[derive(Debug, Clone)]
pub struct Emulation {
    pub reference: ContinuousLti,
    pub plant: DiscretizedSystem,
    pub alphabet: DirectionAlphabet,
    pub pattern_cap: u64,
}

impl Emulation {
    pub fn new(a: &Matrix, b: &Matrix, h_matrix: Matrix, h: f64) -> Result<Self> {
        let reference = ContinuousLti::new(h_matrix)?;
        check_dim("reference dimension", a.nrows(), reference.dim())?;
        let plant = DiscretizedSystem::discretize(a, b, h, DEFAULT_EXPM_TOL)?;
        let alphabet = DirectionAlphabet::build(
            &plant.b_d,
            &DropoutMask::none(plant.channels()),
            DEFAULT_DEDUP_TOL,
            DEFAULT_PATTERN_CAP,
        )?;
        Ok(Self {
            reference,
            plant,
            alphabet,
            pattern_cap: DEFAULT_PATTERN_CAP,
        })
    }

    /// Two states, four channels, `A = 0`, `B = [[1,0,-1,0],[0,1,0,1]]`,
    /// `H = [[0,1],[-1,-2]]`, `h = 0.05`.
    pub fn two_state_example() -> Self {
        Self::new(
            &Matrix::zeros(2, 2),
            &example_input_matrix(),
            Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -2.0]),
            0.05,
        )
        .expect("the two-state example is well formed")
    }

    /// Same quantized plant emulating a different reference flow.
    pub fn with_reference(&self, h_matrix: Matrix) -> Result<Self> {
        let reference = ContinuousLti::new(h_matrix)?;
        check_dim("reference dimension", self.dim(), reference.dim())?;
        Ok(Self {
            reference,
            ..self.clone()
        })
    }

    pub fn dim(&self) -> usize {
        self.plant.state_dim()
    }

    pub fn channels(&self) -> usize {
        self.plant.channels()
    }

    pub fn h(&self) -> f64 {
        self.plant.h
    }

    pub fn flow(&self) -> Result<Arc<Matrix>> {
        self.reference.flow(self.plant.h)
    }

    /// Directions still reachable under `mask`.
    pub fn available(&self, mask: &DropoutMask) -> Result<MaskedAlphabet> {
        if mask.is_empty() {
            return Ok(MaskedAlphabet::full(&self.alphabet));
        }
        self.alphabet.restrict(mask, self.pattern_cap)
    }
}

pub fn example_input_matrix() -> Matrix {
    Matrix::from_row_slice(2, 4, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
}

/// How channels drop out over a rollout.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum DropoutPolicy {
    #[default]
    None,
    Fixed(DropoutMask),
    /// `k` channels drawn uniformly at random, independently at every step.
    Random { k: usize, seed: u64 },
}

impl DropoutPolicy {
    pub fn sampler(&self, channels: usize) -> Result<MaskSampler> {
        match self {
            DropoutPolicy::Fixed(mask) => check_dim("dropout mask", channels, mask.channels())?,
            DropoutPolicy::Random { k, .. } if *k > channels => {
                return Err(Error::InvalidArgument(format!(
                    "cannot drop {k} of {channels} channels"
                )))
            }
            _ => {}
        }
        let seed = match self {
            DropoutPolicy::Random { seed, .. } => *seed,
            _ => 0,
        };
        Ok(MaskSampler {
            policy: self.clone(),
            channels,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

/// Stateful per-step mask generator for a [`DropoutPolicy`].
#[derive(Debug, Clone)]
pub struct MaskSampler {
    policy: DropoutPolicy,
    channels: usize,
    rng: ChaCha8Rng,
}

impl MaskSampler {
    pub fn next_mask(&mut self) -> DropoutMask {
        match &self.policy {
            DropoutPolicy::None => DropoutMask::none(self.channels),
            DropoutPolicy::Fixed(mask) => mask.clone(),
            DropoutPolicy::Random { k, .. } => DropoutMask::random(self.channels, *k, &mut self.rng)
                .expect("k validated against channel count"),
        }
    }
}

pub(crate) fn check_finite_state(step: usize, x: &Vector) -> Result<()> {
    let norm = x.norm();
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(Error::Diverged { step, norm });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_state_example_shape() {
        let e = Emulation::two_state_example();
        assert_eq!(e.dim(), 2);
        assert_eq!(e.channels(), 4);
        assert_eq!(e.alphabet.len(), 25);
        assert_eq!(e.plant.a_d, Matrix::identity(2, 2));
        assert!(e.reference.is_stable());
    }

    #[test]
    fn random_policy_is_seeded() {
        let p = DropoutPolicy::Random { k: 1, seed: 9 };
        let a: Vec<_> = {
            let mut s = p.sampler(4).unwrap();
            (0..50).map(|_| s.next_mask()).collect()
        };
        let b: Vec<_> = {
            let mut s = p.sampler(4).unwrap();
            (0..50).map(|_| s.next_mask()).collect()
        };
        assert_eq!(a, b);
        assert!(a.iter().all(|m| m.len() == 1));
        assert!(DropoutPolicy::Random { k: 5, seed: 0 }.sampler(4).is_err());
    }

    #[test]
    fn fixed_policy_mask_must_match_channels() {
        let mask = DropoutMask::new(3, [0]).unwrap();
        assert!(DropoutPolicy::Fixed(mask).sampler(4).is_err());
    }
}
