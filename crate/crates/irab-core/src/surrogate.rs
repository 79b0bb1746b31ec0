//! Surrogate segmentation targets derived from density maps.
//!
//! The surrogate task for threshold epsilon is "does the density at this
//! pixel exceed epsilon?". Thresholds come from quantiles of the pooled
//! nonzero density values of the labeled set: ratio r maps to the value
//! ranked at ceil(r*N) (1-based) in ascending order, and r = 0 maps to
//! epsilon = 0 exactly. A ladder of c ascending thresholds yields c nested
//! binary masks, or equivalently a (c+1)-class quantization of density.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scene::DensityMap;

/// Strictly ascending thresholds with their source quantile ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdLadder {
    pub ratios: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Number of nonzero density values the ladder was derived from.
    pub pool_size: usize,
}

impl ThresholdLadder {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.len() != self.ratios.len() {
            return Err(CoreError::invalid(
                "ladder must pair each ratio with a threshold".to_string(),
            ));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::invalid(format!(
                "ladder thresholds must be strictly ascending, got {:?}",
                self.thresholds
            )));
        }
        if self.thresholds.iter().any(|e| *e < 0.0) {
            return Err(CoreError::invalid("ladder thresholds must be nonnegative".to_string()));
        }
        Ok(())
    }
}

/// One binary mask per ladder threshold, at label resolution.
///
/// Masks nest: foreground under a higher threshold is a subset of
/// foreground under every lower one.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    /// `masks[k][pixel]` in {0, 1}, ordered by ascending threshold.
    pub masks: Vec<Vec<u8>>,
}

/// Per-pixel class indices in 0..=c induced by the c ladder thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
    /// Number of classes: ladder length + 1.
    pub num_classes: usize,
}

/// Derive the threshold ladder from the labeled split's density maps.
///
/// Pools every strictly positive value, sorts ascending (length N), and
/// picks `sorted[max(1, ceil(r*N))]` (1-based) per ratio; ratio 0 yields
/// threshold 0 exactly. Duplicate-valued picks are repaired by advancing
/// to the next strictly larger value; an unrepairable ladder is an error.
pub fn derive_thresholds(labeled: &[DensityMap], ratios: &[f64]) -> Result<ThresholdLadder> {
    if ratios.is_empty() {
        return Err(CoreError::invalid("at least one ratio required".to_string()));
    }
    if ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CoreError::invalid(format!(
            "ratios must be strictly increasing, got {:?}",
            ratios
        )));
    }
    if ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(CoreError::invalid(format!(
            "ratios must lie in [0, 1), got {:?}",
            ratios
        )));
    }

    let mut pool: Vec<f64> = labeled
        .iter()
        .flat_map(|d| d.values.iter().copied())
        .filter(|v| *v > 0.0)
        .collect();
    if pool.is_empty() {
        return Err(CoreError::invalid(
            "cannot derive thresholds: labeled densities are all zero".to_string(),
        ));
    }
    pool.sort_by(|a, b| a.partial_cmp(b).expect("finite densities"));
    let n = pool.len();

    let mut thresholds = Vec::with_capacity(ratios.len());
    for &r in ratios {
        if r == 0.0 {
            thresholds.push(0.0);
            continue;
        }
        let rank = ((r * n as f64).ceil() as usize).max(1); // 1-based
        let mut idx = rank - 1;
        let mut eps = pool[idx];
        // repair duplicates: step to the next strictly larger value
        let prev = thresholds.last().copied().unwrap_or(f64::NEG_INFINITY);
        while eps <= prev {
            idx += 1;
            if idx >= n {
                return Err(CoreError::invalid(format!(
                    "cannot build a strictly ascending ladder: no value above {} in the pool",
                    prev
                )));
            }
            eps = pool[idx];
        }
        thresholds.push(eps);
    }

    let ladder = ThresholdLadder {
        ratios: ratios.to_vec(),
        thresholds,
        pool_size: n,
    };
    ladder.validate()?;
    Ok(ladder)
}

/// Binary mask for one threshold: 1 where density strictly exceeds it.
pub fn derive_mask(density: &DensityMap, epsilon: f64) -> Result<Vec<u8>> {
    if epsilon < 0.0 {
        return Err(CoreError::invalid(format!(
            "threshold must be nonnegative, got {}",
            epsilon
        )));
    }
    Ok(density
        .values
        .iter()
        .map(|v| if *v > epsilon { 1 } else { 0 })
        .collect())
}

/// All masks of a ladder; nesting holds by construction.
pub fn derive_mask_set(density: &DensityMap, ladder: &ThresholdLadder) -> Result<MaskSet> {
    ladder.validate()?;
    let masks = ladder
        .thresholds
        .iter()
        .map(|eps| derive_mask(density, *eps))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSet {
        height: density.height,
        width: density.width,
        masks,
    })
}

/// Multi-class quantization: the class of a pixel is the number of
/// thresholds its density strictly exceeds, in 0..=c.
pub fn quantize_msst(density: &DensityMap, ladder: &ThresholdLadder) -> Result<QuantizedMap> {
    ladder.validate()?;
    let classes = density
        .values
        .iter()
        .map(|v| ladder.thresholds.iter().filter(|eps| *v > **eps).count() as u8)
        .collect();
    Ok(QuantizedMap {
        height: density.height,
        width: density.width,
        classes,
        num_classes: ladder.len() + 1,
    })
}
