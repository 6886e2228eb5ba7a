use rand::seq::index;
use rand::Rng;

use crate::config::{masked_count, MaskStrategy};
use crate::error::{Error, Result};

/// Which patches each modality hides from the encoder. Index lists are
/// sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub visible: [Vec<usize>; 2],
    pub masked: [Vec<usize>; 2],
    pub ratio: f64,
    pub strategy: MaskStrategy,
}

impl MaskPlan {
    /// Every patch visible (used for feature extraction and diagnostics).
    pub fn none(t: usize) -> Self {
        MaskPlan {
            visible: [(0..t).collect(), (0..t).collect()],
            masked: [Vec::new(), Vec::new()],
            ratio: 0.0,
            strategy: MaskStrategy::Consistent,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.visible[0].len() + self.masked[0].len()
    }

    pub fn is_consistent(&self) -> bool {
        self.masked[0] == self.masked[1]
    }

    /// Checks disjointness, coverage and sortedness against `t` patches.
    pub fn validate(&self, t: usize) -> Result<()> {
        for m in 0..2 {
            let mut seen = vec![false; t];
            for list in [&self.visible[m], &self.masked[m]] {
                if list.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Invalid(format!("mask plan list for modality {} not strictly ascending", m + 1)));
                }
                for &i in list {
                    if i >= t || seen[i] {
                        return Err(Error::Invalid(format!("mask plan index {i} out of range or repeated")));
                    }
                    seen[i] = true;
                }
            }
            if seen.iter().any(|s| !s) || self.visible[m].is_empty() {
                return Err(Error::Invalid(format!("mask plan for modality {} does not cover {t} patches", m + 1)));
            }
        }
        Ok(())
    }
}

fn split<R: Rng + ?Sized>(rng: &mut R, t: usize, m: usize) -> (Vec<usize>, Vec<usize>) {
    let mut is_masked = vec![false; t];
    for i in index::sample(rng, t, m) {
        is_masked[i] = true;
    }
    let (masked, visible): (Vec<usize>, Vec<usize>) = (0..t).partition(|&i| is_masked[i]);
    (visible, masked)
}

/// Uniformly samples `floor(ratio * t)` masked patches without replacement,
/// once per modality (independent) or once for both (consistent).
pub fn sample_mask<R: Rng + ?Sized>(t: usize, ratio: f64, strategy: MaskStrategy, rng: &mut R) -> Result<MaskPlan> {
    let m = masked_count(t, ratio);
    if !(0.0..1.0).contains(&ratio) || m == 0 || m >= t {
        return Err(Error::Config(format!(
            "mask ratio {ratio} on {t} patches masks {m}; need 0 < masked < {t}"
        )));
    }
    let (v1, m1) = split(rng, t, m);
    let (v2, m2) = match strategy {
        MaskStrategy::Consistent => (v1.clone(), m1.clone()),
        MaskStrategy::Independent => split(rng, t, m),
    };
    Ok(MaskPlan {
        visible: [v1, v2],
        masked: [m1, m2],
        ratio,
        strategy,
    })
}
