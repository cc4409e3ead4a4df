//! Spatial variogram estimation and the exponential covariance model fit.
//!
//! The covariance of point velocities drops exponentially with separation:
//! C(d) = a * exp(-b d) for d > 0 and C(0) = sill, with a = sill - nugget.
//! The variogram relates to it through gamma(d) = sill - C(d). Fitted
//! parameters feed the atmosphere synthesizer and the spike-noise
//! compositor.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::grid::SparseVelocityField;
use crate::{Error, Result};

/// Empirical semivariance per distance bin. Bins with zero pairs carry NaN.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariogramCurve {
    pub bin_centers_km: Vec<f64>,
    pub gamma: Vec<f64>,
    pub pair_counts: Vec<u64>,
}

/// Fitted exponential covariance: a and b of C(d) = a e^{-bd}, plus the
/// sill and the derived nugget = sill - a.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceModel {
    pub a: f64,
    pub b_per_km: f64,
    pub sill: f64,
    pub nugget: f64,
}

impl CovarianceModel {
    pub fn new(a: f64, b_per_km: f64, sill: f64) -> Result<Self> {
        let nugget = sill - a;
        let model = CovarianceModel {
            a,
            b_per_km,
            sill,
            nugget,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0) {
            return Err(Error::FitFailed(format!("negative a = {}", self.a)));
        }
        if !(self.b_per_km > 0.0) {
            return Err(Error::FitFailed(format!(
                "non-positive b = {}",
                self.b_per_km
            )));
        }
        if !(self.nugget >= 0.0 && self.nugget <= self.sill) {
            return Err(Error::FitFailed(format!(
                "nugget {} outside [0, sill = {}]",
                self.nugget, self.sill
            )));
        }
        let resid = (self.a - (self.sill - self.nugget)).abs();
        if resid > 1e-9 * self.sill.abs().max(1.0) {
            return Err(Error::FitFailed(format!(
                "a = {} inconsistent with sill - nugget = {}",
                self.a,
                self.sill - self.nugget
            )));
        }
        Ok(())
    }
}

/// Evaluates the covariance model at separation `d_km` >= 0.
pub fn covariance_at(model: &CovarianceModel, d_km: f64) -> Result<f64> {
    if d_km < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "negative separation {d_km}"
        )));
    }
    if d_km == 0.0 {
        Ok(model.sill)
    } else {
        Ok(model.a * (-model.b_per_km * d_km).exp())
    }
}

/// Maps a flat pair index k in [0, n(n-1)/2) to (i, j) with i < j by
/// inverting the triangular numbering; used for uniform pair sampling.
fn pair_from_index(k: u64, n: u64) -> (usize, usize) {
    // Row i starts at offset i*n - i*(i+1)/2; find the largest i with
    // offset <= k, then j follows.
    let mut lo = 0u64;
    let mut hi = n - 1;
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        let offset = mid * n - mid * (mid + 1) / 2;
        if offset <= k {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let i = lo;
    let j = i + 1 + (k - (i * n - i * (i + 1) / 2));
    (i as usize, j as usize)
}

/// Estimates the empirical semivariogram of a sparse field.
///
/// gamma(bin) = 0.5 * mean over sampled pairs of (v_p - v_q)^2; when the
/// number of pairs exceeds `max_pairs` the pairs are subsampled uniformly
/// without replacement with the given seed.
pub fn empirical_variogram(
    field: &SparseVelocityField,
    max_dist_km: f64,
    n_bins: usize,
    max_pairs: u64,
    seed: u64,
) -> Result<VariogramCurve> {
    if !(max_dist_km > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "max distance must be positive, got {max_dist_km}"
        )));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be >= 1".into()));
    }
    let samples: Vec<(f64, f64, f64)> = field
        .iter_observed()
        .map(|(r, c, v)| {
            let (e, n) = field.spec().center_of(r, c);
            (e / 1000.0, n / 1000.0, v)
        })
        .collect();
    let n = samples.len();
    if n < 2 {
        return Err(Error::NoData(format!(
            "variogram needs >= 2 samples, found {n}"
        )));
    }

    let bin_width = max_dist_km / n_bins as f64;
    let mut sums = vec![0.0f64; n_bins];
    let mut counts = vec![0u64; n_bins];
    let mut accumulate = |i: usize, j: usize| {
        let (xi, yi, vi) = samples[i];
        let (xj, yj, vj) = samples[j];
        let d = ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
        if d < max_dist_km {
            let bin = ((d / bin_width) as usize).min(n_bins - 1);
            sums[bin] += 0.5 * (vi - vj).powi(2);
            counts[bin] += 1;
        }
    };

    let total_pairs = n as u64 * (n as u64 - 1) / 2;
    if total_pairs <= max_pairs {
        for i in 0..n {
            for j in (i + 1)..n {
                accumulate(i, j);
            }
        }
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut chosen = HashSet::with_capacity(max_pairs as usize);
        while (chosen.len() as u64) < max_pairs {
            let k = rng.gen_range(0..total_pairs);
            if chosen.insert(k) {
                let (i, j) = pair_from_index(k, n as u64);
                accumulate(i, j);
            }
        }
    }

    let gamma = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect();
    let bin_centers_km = (0..n_bins)
        .map(|i| (i as f64 + 0.5) * bin_width)
        .collect();
    Ok(VariogramCurve {
        bin_centers_km,
        gamma,
        pair_counts: counts,
    })
}

/// Weighted least-squares fit of gamma(d) ~ sill - a e^{-b d} over populated
/// bins, weighted by pair counts. Gauss-Newton with Levenberg damping; the
/// closed-form start takes the nugget from the first populated bin, the sill
/// from the last quartile of bins and b from a log-linear regression.
pub fn fit_exponential_covariance(curve: &VariogramCurve) -> Result<CovarianceModel> {
    let pts: Vec<(f64, f64, f64)> = curve
        .bin_centers_km
        .iter()
        .zip(&curve.gamma)
        .zip(&curve.pair_counts)
        .filter(|((_, g), &c)| c > 0 && g.is_finite())
        .map(|((&d, &g), &c)| (d, g, c as f64))
        .collect();
    if pts.len() < 4 {
        return Err(Error::FitFailed(format!(
            "need >= 4 populated bins, found {}",
            pts.len()
        )));
    }
    let weight_total: f64 = pts.iter().map(|p| p.2).sum();
    // Normalised weights make the fit invariant to uniform count rescaling.
    let pts: Vec<(f64, f64, f64)> = pts
        .into_iter()
        .map(|(d, g, w)| (d, g, w / weight_total))
        .collect();

    let nugget0 = pts[0].1;
    let tail_start = pts.len() - (pts.len() / 4).max(1);
    let sill0 =
        pts[tail_start..].iter().map(|p| p.1).sum::<f64>() / (pts.len() - tail_start) as f64;

    // Pure-nugget curves have no exponential component to fit.
    if sill0 - nugget0 <= 1e-9 * sill0.abs().max(1e-12) {
        let sill =
            pts.iter().map(|p| p.1 * p.2).sum::<f64>() / pts.iter().map(|p| p.2).sum::<f64>();
        return CovarianceModel::new(0.0, 1.0, sill);
    }
    let a0 = sill0 - nugget0;

    // b from regression of ln(sill0 - gamma) on d where the log is defined.
    let mut b0 = {
        let logs: Vec<(f64, f64)> = pts
            .iter()
            .filter(|(_, g, _)| sill0 - g > 1e-12)
            .map(|&(d, g, _)| (d, (sill0 - g).ln()))
            .collect();
        if logs.len() >= 2 {
            let n = logs.len() as f64;
            let sx: f64 = logs.iter().map(|p| p.0).sum();
            let sy: f64 = logs.iter().map(|p| p.1).sum();
            let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
            let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
            let denom = n * sxx - sx * sx;
            if denom.abs() > 1e-12 {
                -(n * sxy - sx * sy) / denom
            } else {
                1.0
            }
        } else {
            1.0
        }
    };
    if !(b0 > 0.0) || !b0.is_finite() {
        b0 = 1.0;
    }

    let (mut a, mut b, mut sill) = (a0, b0, sill0);
    let mut lm = 1e-3;
    let cost = |a: f64, b: f64, sill: f64| -> f64 {
        pts.iter()
            .map(|&(d, g, w)| {
                let r = sill - a * (-b * d).exp() - g;
                w * r * r
            })
            .sum()
    };
    let mut prev_cost = cost(a, b, sill);
    for _ in 0..200 {
        // Normal equations J^T W J delta = -J^T W r for theta = (a, b, sill).
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jtr = [0.0f64; 3];
        for &(d, g, w) in &pts {
            let e = (-b * d).exp();
            let r = sill - a * e - g;
            let jac = [-e, a * d * e, 1.0];
            for p in 0..3 {
                jtr[p] += w * jac[p] * r;
                for q in 0..3 {
                    jtj[p][q] += w * jac[p] * jac[q];
                }
            }
        }
        for p in 0..3 {
            jtj[p][p] *= 1.0 + lm;
        }
        let delta = match solve3(jtj, [-jtr[0], -jtr[1], -jtr[2]]) {
            Some(d) => d,
            None => return Err(Error::FitFailed("singular normal equations".into())),
        };
        let (na, nb, nsill) = (a + delta[0], b + delta[1], sill + delta[2]);
        let new_cost = if nb > 0.0 && na.is_finite() && nb.is_finite() && nsill.is_finite() {
            cost(na, nb, nsill)
        } else {
            f64::INFINITY
        };
        if new_cost < prev_cost {
            a = na;
            b = nb;
            sill = nsill;
            lm = (lm * 0.3).max(1e-12);
            let rel = (prev_cost - new_cost) / prev_cost.max(1e-300);
            prev_cost = new_cost;
            if rel < 1e-12 {
                break;
            }
        } else {
            lm *= 10.0;
            if lm > 1e12 {
                break;
            }
        }
    }

    if !a.is_finite() || !b.is_finite() || !sill.is_finite() {
        return Err(Error::FitFailed("fit did not converge".into()));
    }
    // Forgive tiny numerical overshoots of the constraints.
    let tol = 1e-9 * sill.abs().max(1.0);
    if a < 0.0 && a > -tol {
        a = 0.0;
    }
    if a > sill && a - sill < tol {
        a = sill;
    }
    CovarianceModel::new(a, b, sill)
}

fn solve3(m: [[f64; 3]; 3], rhs: [f64; 3]) -> Option<[f64; 3]> {
    let mut aug = [[0.0f64; 4]; 3];
    for i in 0..3 {
        aug[i][..3].copy_from_slice(&m[i]);
        aug[i][3] = rhs[i];
    }
    for col in 0..3 {
        let pivot =
            (col..3).max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))?;
        if aug[pivot][col].abs() < 1e-300 {
            return None;
        }
        aug.swap(col, pivot);
        for row in 0..3 {
            if row == col {
                continue;
            }
            let f = aug[row][col] / aug[col][col];
            for k in col..4 {
                aug[row][k] -= f * aug[col][k];
            }
        }
    }
    Some([
        aug[0][3] / aug[0][0],
        aug[1][3] / aug[1][1],
        aug[2][3] / aug[2][2],
    ])
}
