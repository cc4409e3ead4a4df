//! Velocity-map wrapping: psi' = (psi + tau) mod mu over a set of intervals
//! and phase offsets, manufacturing strong fringe features for the
//! classifier regardless of reference-point choice.

use serde::{Deserialize, Serialize};

use crate::grid::{to_grayscale, DenseVelocityGrid, Image8};
use crate::{Error, Result};

/// Wrap intervals and the number of phase offsets applied per interval.
///
/// Offsets are the fractional set {0, mu/n, 2 mu/n, ...}: listing absolute
/// offsets would collapse modulo the smaller intervals (3.5 mod 1.75 = 0),
/// while fractions keep the phase shifts distinct at every interval and
/// reproduce the canonical {0, 3.5, 7, 10.5} set at mu = 14.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WrapConfig {
    pub intervals_mm_yr: Vec<f64>,
    pub offsets_per_interval: usize,
}

impl Default for WrapConfig {
    fn default() -> Self {
        WrapConfig {
            intervals_mm_yr: vec![14.0, 7.0, 3.5, 1.75],
            offsets_per_interval: 4,
        }
    }
}

impl WrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.intervals_mm_yr.is_empty() {
            return Err(Error::InvalidArgument("no wrap intervals".into()));
        }
        if let Some(&mu) = self.intervals_mm_yr.iter().find(|&&mu| !(mu > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "wrap interval must be positive, got {mu}"
            )));
        }
        if self.offsets_per_interval == 0 {
            return Err(Error::InvalidArgument(
                "need at least one offset per interval".into(),
            ));
        }
        Ok(())
    }

    /// Offsets used for an interval.
    pub fn offsets_for(&self, mu: f64) -> Vec<f64> {
        (0..self.offsets_per_interval)
            .map(|k| mu * k as f64 / self.offsets_per_interval as f64)
            .collect()
    }
}

/// Wraps every value into [0, mu): (value + offset) mod mu, with negatives
/// mapped into the principal interval.
pub fn wrap(grid: &DenseVelocityGrid, mu: f64, offset: f64) -> Result<DenseVelocityGrid> {
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "wrap interval must be positive, got {mu}"
        )));
    }
    let values = grid.values().mapv(|v| {
        let w = (v + offset).rem_euclid(mu);
        // rem_euclid can return mu itself when rounding bites at the edge.
        if w >= mu {
            0.0
        } else {
            w
        }
    });
    DenseVelocityGrid::new(*grid.spec(), values)
}

/// One wrapped grayscale ensemble member.
#[derive(Debug, Clone)]
pub struct EnsembleImage {
    pub interval_mm_yr: f64,
    pub offset_mm_yr: f64,
    pub image: Image8,
}

/// Wraps a grid at every (interval, offset) combination of the config and
/// converts each to grayscale; |intervals| * offsets_per_interval images.
pub fn wrap_ensemble(grid: &DenseVelocityGrid, config: &WrapConfig) -> Result<Vec<EnsembleImage>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.intervals_mm_yr.len() * config.offsets_per_interval);
    for &mu in &config.intervals_mm_yr {
        for offset in config.offsets_for(mu) {
            let wrapped = wrap(grid, mu, offset)?;
            out.push(EnsembleImage {
                interval_mm_yr: mu,
                offset_mm_yr: offset,
                image: to_grayscale(&wrapped, mu)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn dense(values: Array2<f64>) -> DenseVelocityGrid {
        let (h, w) = values.dim();
        let spec = GridSpec::new(w, h, 10.0, 0.0, h as f64 * 10.0).unwrap();
        DenseVelocityGrid::new(spec, values).unwrap()
    }

    #[test]
    fn wrap_handles_positive_and_negative_values() {
        let grid = dense(array![[15.0, -1.0, 0.0]]);
        let wrapped = wrap(&grid, 14.0, 0.0).unwrap();
        assert!((wrapped.values()[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((wrapped.values()[[0, 1]] - 13.0).abs() < 1e-12);
        assert_eq!(wrapped.values()[[0, 2]], 0.0);
    }

    #[test]
    fn offset_equal_to_interval_is_identity() {
        let grid = dense(array![[3.2, -5.9, 12.7, 0.4]]);
        let a = wrap(&grid, 14.0, 0.0).unwrap();
        let b = wrap(&grid, 14.0, 14.0).unwrap();
        for (x, y) in a.values().iter().zip(b.values().iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn default_ensemble_has_sixteen_members() {
        let grid = dense(Array2::from_shape_fn((8, 8), |(r, c)| (r as f64) - (c as f64)));
        let members = wrap_ensemble(&grid, &WrapConfig::default()).unwrap();
        assert_eq!(members.len(), 16);
        // mu = 14 reproduces the canonical absolute offsets.
        let offsets: Vec<f64> = members
            .iter()
            .filter(|m| m.interval_mm_yr == 14.0)
            .map(|m| m.offset_mm_yr)
            .collect();
        assert_eq!(offsets, vec![0.0, 3.5, 7.0, 10.5]);
    }

    #[test]
    fn fractional_offsets_stay_distinct_at_small_intervals() {
        let config = WrapConfig::default();
        for &mu in &config.intervals_mm_yr {
            let offsets = config.offsets_for(mu);
            for i in 0..offsets.len() {
                for j in (i + 1)..offsets.len() {
                    let d = (offsets[i] - offsets[j]).rem_euclid(mu);
                    assert!(
                        d > 1e-9 && mu - d > 1e-9,
                        "offsets collapse at mu = {mu}: {offsets:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn constant_grid_wraps_to_constant_images() {
        let grid = dense(Array2::from_elem((6, 6), 4.2));
        let members = wrap_ensemble(&grid, &WrapConfig::default()).unwrap();
        for member in members {
            let first = member.image.pixels()[[0, 0]];
            assert!(member.image.pixels().iter().all(|&p| p == first));
        }
    }

    #[test]
    fn fringe_count_follows_relief_over_interval() {
        // A monotone ramp of total relief R wrapped at mu shows about R/mu
        // discontinuities; halving mu at least doubles them (minus one).
        let n = 512;
        let relief = 42.0;
        let grid = dense(Array2::from_shape_fn((1, n), |(_, c)| {
            relief * c as f64 / (n - 1) as f64
        }));
        let count = |mu: f64| -> i64 {
            let w = wrap(&grid, mu, 0.0).unwrap();
            let mut jumps = 0;
            for c in 1..n {
                if (w.values()[[0, c]] - w.values()[[0, c - 1]]).abs() > mu / 2.0 {
                    jumps += 1;
                }
            }
            jumps
        };
        for mu in [14.0, 7.0, 3.5] {
            let expected = (relief / mu).floor() as i64;
            let got = count(mu);
            assert!(
                (got - expected).abs() <= 1,
                "mu = {mu}: {got} fringes vs ~{expected}"
            );
        }
        assert!(count(7.0) >= 2 * count(14.0) - 1);
    }

    proptest! {
        #[test]
        fn wrap_is_periodic_and_bounded(
            v in -50.0f64..50.0,
            k in -5i32..5,
            mu in prop::sample::select(vec![14.0, 7.0, 3.5, 1.75]),
            offset_frac in 0.0f64..1.0,
        ) {
            let offset = offset_frac * mu;
            let base = dense(array![[v]]);
            let shifted = dense(array![[v + k as f64 * mu]]);
            let a = wrap(&base, mu, offset).unwrap().values()[[0, 0]];
            let b = wrap(&shifted, mu, offset).unwrap().values()[[0, 0]];
            // Periodicity up to float rounding; compare on the circle.
            let d = (a - b).abs();
            prop_assert!(d < 1e-9 || (mu - d) < 1e-9, "a = {a}, b = {b}");
            prop_assert!((0.0..mu).contains(&a));
            prop_assert!((0.0..mu).contains(&b));
        }
    }
}
