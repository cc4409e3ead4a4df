//! Densification of sparse velocity fields: NaN-aware median prefilter,
//! noise-map extraction, Delaunay initializer and the modified
//! matrix-completion solver.
//!
//! The solver alternates a data-fidelity gradient step, singular-value
//! shrinkage with a non-convex p-power penalty, and Gaussian smoothing,
//! while the regularization weight alpha decays geometrically. The
//! sampling operator is a 0/1 mask, so its adjoint is plain scatter-back
//! and the step scale lambda = 1.1 bounds the largest eigenvalue of M^T M.

use ndarray::Array2;
use ndarray_linalg::{JobSvd, SVDDC};
use serde::{Deserialize, Serialize};
use spade::{
    DelaunayTriangulation, FloatTriangulation, HasPosition, Point2, Triangulation,
};

use crate::grid::{DenseVelocityGrid, SparseVelocityField};
use crate::{Error, Result};

/// Residual noise recorded from the median prefilter, reused later to
/// synthesize spike noise with matching characteristics.
#[derive(Debug, Clone)]
pub struct NoiseStats {
    /// N = y - Med3x3(y) at observed cells, NaN elsewhere.
    pub noise_map: Array2<f64>,
    /// Fraction of observed cells with |N| > 3 sqrt(nugget).
    pub impulse_rate: f64,
    /// Empirical distribution of N values (row-major observed order).
    pub amplitude_samples: Vec<f64>,
}

/// Parameters of the matrix-completion solver.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McParams {
    /// Non-convex norm exponent, 0 < p < 1.
    pub p: f64,
    /// alpha_0 = alpha0_factor * max |M x_0|.
    pub alpha0_factor: f64,
    /// Geometric decay of alpha per outer stage.
    pub alpha_decay: f64,
    /// Step scale of the data-fidelity gradient step.
    pub lambda: f64,
    /// Stopping tolerance for both loops.
    pub tol: f64,
    /// Maximum inner iterations per stage.
    pub max_inner: usize,
    /// Standard deviation of the in-loop Gaussian filter, pixels.
    pub gauss_sigma: f64,
}

impl Default for McParams {
    fn default() -> Self {
        McParams {
            p: 0.8,
            alpha0_factor: 0.9,
            alpha_decay: 0.9,
            lambda: 1.1,
            tol: 1e-4,
            max_inner: 200,
            gauss_sigma: 5.0,
        }
    }
}

impl McParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidArgument(format!("p = {} outside (0,1)", self.p)));
        }
        if !(self.alpha_decay > 0.0 && self.alpha_decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha_decay = {} outside (0,1)",
                self.alpha_decay
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol = {} must be > 0", self.tol)));
        }
        if self.max_inner == 0 {
            return Err(Error::InvalidArgument("max_inner must be >= 1".into()));
        }
        if !(self.lambda > 0.0) || !(self.gauss_sigma > 0.0) || !(self.alpha0_factor > 0.0) {
            return Err(Error::InvalidArgument(
                "lambda, gauss_sigma and alpha0_factor must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Convergence bookkeeping from one matrix-completion run.
#[derive(Debug, Clone, Copy, Default)]
pub struct McStats {
    pub outer_stages: usize,
    pub inner_iterations: usize,
    pub final_loss: f64,
}

/// 3x3 median filter that ignores missing cells. Observed cells take the
/// median of observed values in their neighborhood (an isolated cell keeps
/// its own value); missing cells remain missing.
pub fn median_filter_nan(field: &SparseVelocityField) -> SparseVelocityField {
    let (h, w) = field.spec().shape();
    let values = field.values();
    let mask = field.mask();
    let mut out = Array2::from_elem((h, w), f64::NAN);
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] {
                continue;
            }
            let mut window = [0.0f64; 9];
            let mut n = 0;
            for dr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for dc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    if mask[[dr, dc]] {
                        window[n] = values[[dr, dc]];
                        n += 1;
                    }
                }
            }
            let window = &mut window[..n];
            window.sort_unstable_by(f64::total_cmp);
            out[[r, c]] = if n % 2 == 1 {
                window[n / 2]
            } else {
                0.5 * (window[n / 2 - 1] + window[n / 2])
            };
        }
    }
    SparseVelocityField::from_values(*field.spec(), out).expect("same shape as input")
}

/// Records the noise map N = field - filtered over observed cells together
/// with the impulse rate at the 3 sqrt(nugget) threshold.
pub fn extract_noise(
    field: &SparseVelocityField,
    filtered: &SparseVelocityField,
    nugget: f64,
) -> Result<NoiseStats> {
    if field.mask() != filtered.mask() {
        return Err(Error::MaskMismatch(
            "field and filtered observe different cells".into(),
        ));
    }
    if !(nugget >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative nugget {nugget}")));
    }
    let mut noise_map = Array2::from_elem(field.spec().shape(), f64::NAN);
    let mut amplitude_samples = Vec::with_capacity(field.n_observed());
    let threshold = 3.0 * nugget.sqrt();
    let mut impulses = 0usize;
    for (r, c, v) in field.iter_observed() {
        let n = v - filtered.values()[[r, c]];
        noise_map[[r, c]] = n;
        if n.abs() > threshold {
            impulses += 1;
        }
        amplitude_samples.push(n);
    }
    let impulse_rate = if amplitude_samples.is_empty() {
        0.0
    } else {
        impulses as f64 / amplitude_samples.len() as f64
    };
    Ok(NoiseStats {
        noise_map,
        impulse_rate,
        amplitude_samples,
    })
}

struct CellVertex {
    position: Point2<f64>,
    cell: (usize, usize),
}

impl HasPosition for CellVertex {
    type Scalar = f64;
    fn position(&self) -> Point2<f64> {
        self.position
    }
}

/// Delaunay triangulation of the observed cells of a field, reusable across
/// several value sets on the same mask (triangulating is the expensive part).
pub struct DelaunayInterpolator {
    triangulation: DelaunayTriangulation<CellVertex>,
    shape: (usize, usize),
}

impl DelaunayInterpolator {
    pub fn new(field: &SparseVelocityField) -> Result<Self> {
        let mut triangulation = DelaunayTriangulation::new();
        for (r, c, _) in field.iter_observed() {
            triangulation
                .insert(CellVertex {
                    position: Point2::new(c as f64, r as f64),
                    cell: (r, c),
                })
                .map_err(|e| Error::Triangulation(format!("{e:?}")))?;
        }
        if triangulation.num_inner_faces() == 0 {
            return Err(Error::Triangulation(format!(
                "need >= 3 non-collinear observed cells, found {} observed",
                field.n_observed()
            )));
        }
        Ok(DelaunayInterpolator {
            triangulation,
            shape: field.spec().shape(),
        })
    }

    /// Linear barycentric interpolation inside the convex hull; outside it
    /// the nearest observed value extends flat to the map edge.
    pub fn interpolate(&self, field: &SparseVelocityField) -> Result<DenseVelocityGrid> {
        if field.spec().shape() != self.shape {
            return Err(Error::InvalidArgument(
                "field shape differs from the triangulated field".into(),
            ));
        }
        let values = field.values();
        let value_of = |cell: (usize, usize)| values[[cell.0, cell.1]];
        let (h, w) = self.shape;
        let bary = self.triangulation.barycentric();
        let mut out = Array2::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let q = Point2::new(c as f64, r as f64);
                let v = match bary.interpolate(|v| value_of(v.data().cell), q) {
                    Some(v) => v,
                    None => {
                        let nn = self
                            .triangulation
                            .nearest_neighbor(q)
                            .expect("triangulation is non-empty");
                        value_of(nn.data().cell)
                    }
                };
                out[[r, c]] = v;
            }
        }
        DenseVelocityGrid::new(*field.spec(), out)
    }
}

/// Densifies a sparse field with Delaunay triangulation alone.
pub fn delaunay_interpolate(field: &SparseVelocityField) -> Result<DenseVelocityGrid> {
    DelaunayInterpolator::new(field)?.interpolate(field)
}

fn reflect(mut i: isize, n: isize) -> usize {
    while i < 0 || i >= n {
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
    }
    i as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= sum;
    }
    kernel
}

/// Separable Gaussian convolution with reflective boundaries on a raw array.
fn gaussian_smooth_values(values: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let (h, w) = values.dim();
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;

    // Horizontal pass.
    let mut tmp = Array2::<f64>::zeros((h, w));
    {
        let src = values.as_slice().expect("row-major");
        let dst = tmp.as_slice_mut().expect("row-major");
        for r in 0..h {
            let row = &src[r * w..(r + 1) * w];
            let out = &mut dst[r * w..(r + 1) * w];
            for (ki, &wk) in kernel.iter().enumerate() {
                let shift = ki as isize - radius;
                let lo = (-shift).max(0) as usize;
                let hi = (w as isize - shift).clamp(0, w as isize) as usize;
                // Interior: contiguous shifted accumulation.
                for c in lo..hi {
                    out[c] += wk * row[(c as isize + shift) as usize];
                }
                // Reflected boundary columns.
                for c in (0..lo).chain(hi..w) {
                    out[c] += wk * row[reflect(c as isize + shift, w as isize)];
                }
            }
        }
    }

    // Vertical pass: accumulate whole rows to stay contiguous.
    let mut out = Array2::<f64>::zeros((h, w));
    {
        let src = tmp.as_slice().expect("row-major");
        let dst = out.as_slice_mut().expect("row-major");
        for r in 0..h {
            let out_row = &mut dst[r * w..(r + 1) * w];
            for (ki, &wk) in kernel.iter().enumerate() {
                let rr = reflect(r as isize + ki as isize - radius, h as isize);
                let in_row = &src[rr * w..(rr + 1) * w];
                for c in 0..w {
                    out_row[c] += wk * in_row[c];
                }
            }
        }
    }
    out
}

/// Gaussian low-pass filter G(x, sigma) with a normalized kernel of radius
/// ceil(3 sigma) and reflective boundary handling.
pub fn gaussian_smooth(grid: &DenseVelocityGrid, sigma: f64) -> Result<DenseVelocityGrid> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    DenseVelocityGrid::new(*grid.spec(), gaussian_smooth_values(grid.values(), sigma))
}

/// Elementwise shrinkage s' = max(0, s - (alpha / (2 lambda)) s^(p-1)).
/// Zero maps to zero: the p-1 < 0 power diverges there, so no shrinkage
/// threshold is meaningful at the origin.
pub fn shrink_singular_values(s: &[f64], alpha: f64, lambda: f64, p: f64) -> Vec<f64> {
    let scale = alpha / (2.0 * lambda);
    s.iter()
        .map(|&sv| {
            if sv <= 0.0 {
                0.0
            } else {
                (sv - scale * sv.powf(p - 1.0)).max(0.0)
            }
        })
        .collect()
}

/// Runs the matrix-completion solver on a sparse field, initialised from the
/// median-filtered Delaunay interpolation of the field itself.
pub fn matrix_complete(
    field: &SparseVelocityField,
    params: &McParams,
) -> Result<DenseVelocityGrid> {
    matrix_complete_detailed(field, params).map(|(grid, _)| grid)
}

/// As [`matrix_complete`], also returning convergence statistics.
pub fn matrix_complete_detailed(
    field: &SparseVelocityField,
    params: &McParams,
) -> Result<(DenseVelocityGrid, McStats)> {
    params.validate()?;
    if field.n_observed() == 0 {
        return Err(Error::NoData("matrix completion needs observations".into()));
    }
    let filtered = median_filter_nan(field);
    let x0 = DelaunayInterpolator::new(&filtered)?.interpolate(&filtered)?;
    let (values, stats) = complete_from_initial(field, x0.into_values(), params)?;
    Ok((DenseVelocityGrid::new(*field.spec(), values)?, stats))
}

/// Full tiles above this edge length drop singular values below
/// 1e-8 * s_max when reconstructing, keeping the SVD stage tractable.
const TRUNCATION_EDGE: usize = 512;

/// In-place reflective 1-D convolution along axis 0 (down each column),
/// used to smooth SVD factors: G(U S V^T) = (G_v U) S (G_h V)^T, so the
/// separable filter can act on the thin factors instead of the product.
fn smooth_axis0_f32(mat: &mut Array2<f32>, kernel: &[f64]) {
    let (n, r) = mat.dim();
    let radius = (kernel.len() / 2) as isize;
    let src = mat.as_slice().expect("row-major").to_vec();
    let dst = mat.as_slice_mut().expect("row-major");
    dst.fill(0.0);
    for (ki, &wk) in kernel.iter().enumerate() {
        let wk = wk as f32;
        let shift = ki as isize - radius;
        for i in 0..n {
            let j = reflect(i as isize + shift, n as isize);
            let (out_row, in_row) = (&mut dst[i * r..(i + 1) * r], &src[j * r..(j + 1) * r]);
            for c in 0..r {
                out_row[c] += wk * in_row[c];
            }
        }
    }
}

fn smooth_axis1_f32(mat: &mut Array2<f32>, kernel: &[f64]) {
    let (r, n) = mat.dim();
    let radius = (kernel.len() / 2) as isize;
    let src = mat.as_slice().expect("row-major").to_vec();
    let dst = mat.as_slice_mut().expect("row-major");
    dst.fill(0.0);
    for row in 0..r {
        let in_row = &src[row * n..(row + 1) * n];
        let out_row = &mut dst[row * n..(row + 1) * n];
        for (ki, &wk) in kernel.iter().enumerate() {
            let wk = wk as f32;
            let shift = ki as isize - radius;
            let lo = (-shift).max(0) as usize;
            let hi = (n as isize - shift).clamp(0, n as isize) as usize;
            for c in lo..hi {
                out_row[c] += wk * in_row[(c as isize + shift) as usize];
            }
            for c in (0..lo).chain(hi..n) {
                out_row[c] += wk * in_row[reflect(c as isize + shift, n as isize)];
            }
        }
    }
}

// The iteration runs in single precision: the spectrum shrinkage and the
// 5-pixel smoothing leave nothing for f64 to resolve, and sgesdd roughly
// halves the dominant SVD cost on full 256-pixel tiles.
fn complete_from_initial(
    field: &SparseVelocityField,
    x0: Array2<f64>,
    params: &McParams,
) -> Result<(Array2<f64>, McStats)> {
    let (h, w) = x0.dim();
    let observed: Vec<(usize, f32)> = {
        let mask = field.mask().as_slice().expect("row-major");
        let values = field.values().as_slice().expect("row-major");
        mask.iter()
            .enumerate()
            .filter(|&(_, &m)| m)
            .map(|(i, _)| (i, values[i] as f32))
            .collect()
    };
    let kernel = gaussian_kernel(params.gauss_sigma);

    let mut x = x0.mapv(|v| v as f32);
    let alpha0 = params.alpha0_factor
        * observed
            .iter()
            .map(|&(i, _)| x.as_slice().expect("row-major")[i].abs() as f64)
            .fold(0.0f64, f64::max);
    let mut alpha = alpha0;
    let mut stats = McStats::default();
    let lambda = params.lambda as f32;

    let data_norm = |x: &Array2<f32>| -> f64 {
        let xs = x.as_slice().expect("row-major");
        observed
            .iter()
            .map(|&(i, y)| ((y - xs[i]) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };

    // f_0 = ||y - M x_0||_2 + alpha_0 ||x_0||_*
    let s0 = x
        .svddc(JobSvd::None)
        .map_err(|e| Error::Svd(e.to_string()))?
        .1;
    let mut f_prev = data_norm(&x) + alpha0 * s0.iter().map(|&s| s as f64).sum::<f64>();
    if !f_prev.is_finite() {
        return Err(Error::Diverged(format!("initial loss {f_prev}")));
    }

    while alpha > params.tol * alpha0 {
        stats.outer_stages += 1;
        for _ in 0..params.max_inner {
            stats.inner_iterations += 1;

            // Data step x <- x + (1/lambda) M^T (y - M x).
            {
                let xs = x.as_slice_mut().expect("row-major");
                for &(i, y) in &observed {
                    xs[i] += (y - xs[i]) / lambda;
                }
            }

            // Shrink the spectrum.
            let (u, s, vt) = x
                .svddc(JobSvd::Some)
                .map_err(|e| Error::Svd(e.to_string()))?;
            let (mut u, mut vt) = (u.expect("requested U"), vt.expect("requested VT"));
            let s: Vec<f64> = s.iter().map(|&v| v as f64).collect();
            let shrunk = shrink_singular_values(&s, alpha, params.lambda, params.p);
            let cutoff = if h.max(w) > TRUNCATION_EDGE {
                1e-8 * shrunk.first().copied().unwrap_or(0.0)
            } else {
                0.0
            };
            // Shrinkage preserves ordering, so the retained values form a
            // prefix and the reconstruction can use sliced factors.
            let rank = shrunk.iter().take_while(|&&sv| sv > cutoff).count();
            let nuclear: f64 = shrunk[..rank].iter().sum();

            // Reconstruct and smooth in one move: the Gaussian filter is
            // separable, so smoothing the factors equals smoothing x.
            if rank == 0 {
                x.fill(0.0);
            } else {
                let mut us = u.slice_mut(ndarray::s![.., ..rank]);
                for (mut col, &sv) in us.columns_mut().into_iter().zip(&shrunk[..rank]) {
                    col.mapv_inplace(|v| v * sv as f32);
                }
                let mut us = us.to_owned();
                smooth_axis0_f32(&mut us, &kernel);
                let mut vts = vt.slice_mut(ndarray::s![..rank, ..]).to_owned();
                smooth_axis1_f32(&mut vts, &kernel);
                x = us.dot(&vts);
            }

            let f_k = data_norm(&x) + alpha * nuclear;
            if !f_k.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss became {f_k} at stage {}",
                    stats.outer_stages
                )));
            }
            let cost = (f_k - f_prev).abs() / (f_k + f_prev).abs().max(f64::MIN_POSITIVE);
            f_prev = f_k;
            stats.final_loss = f_k;
            if cost < params.tol {
                break;
            }
        }
        alpha *= params.alpha_decay;
    }
    Ok((x.mapv(|v| v as f64), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::PI;

    fn field_from(values: Array2<f64>) -> SparseVelocityField {
        let (h, w) = values.dim();
        let spec = GridSpec::new(w, h, 10.0, 0.0, h as f64 * 10.0).unwrap();
        SparseVelocityField::from_values(spec, values).unwrap()
    }

    #[test]
    fn median_keeps_isolated_cell() {
        let mut values = Array2::from_elem((5, 5), f64::NAN);
        values[[2, 2]] = 9.0;
        let out = median_filter_nan(&field_from(values));
        assert_eq!(out.values()[[2, 2]], 9.0);
        assert_eq!(out.n_observed(), 1);
    }

    #[test]
    fn median_rejects_center_spike() {
        let mut values = Array2::from_elem((3, 3), 1.0);
        values[[1, 1]] = 100.0;
        let out = median_filter_nan(&field_from(values));
        assert_eq!(out.values()[[1, 1]], 1.0);
    }

    #[test]
    fn median_is_identity_on_constant_fields() {
        let values = Array2::from_elem((6, 7), 3.25);
        let field = field_from(values);
        let out = median_filter_nan(&field);
        assert_eq!(out.values(), field.values());
    }

    #[test]
    fn noise_is_zero_when_inputs_match() {
        let values = Array2::from_shape_fn((4, 4), |(r, c)| (r + c) as f64);
        let field = field_from(values);
        let stats = extract_noise(&field, &field, 1.0).unwrap();
        assert_eq!(stats.impulse_rate, 0.0);
        assert!(stats.amplitude_samples.iter().all(|&n| n == 0.0));
    }

    /// Hand-computed median residual on a 5x5 grid: a flat background of 1
    /// with a +10 spike leaves a single residual of 10 at the spike.
    #[test]
    fn noise_map_isolates_single_spike() {
        let mut values = Array2::from_elem((5, 5), 1.0);
        values[[2, 2]] = 11.0;
        let field = field_from(values);
        let filtered = median_filter_nan(&field);
        let stats = extract_noise(&field, &filtered, 0.7).unwrap();
        assert!((stats.noise_map[[2, 2]] - 10.0).abs() < 1e-12);
        for (idx, &n) in stats.noise_map.indexed_iter() {
            if idx != (2, 2) {
                assert!(n.abs() < 1e-12, "unexpected residual {n} at {idx:?}");
            }
        }
        assert!((stats.impulse_rate - 1.0 / 25.0).abs() < 1e-12);
    }

    #[test]
    fn noise_rejects_mask_mismatch() {
        let values = Array2::from_elem((3, 3), 1.0);
        let field = field_from(values.clone());
        let mut other = values;
        other[[0, 0]] = f64::NAN;
        let filtered = field_from(other);
        assert!(matches!(
            extract_noise(&field, &filtered, 1.0),
            Err(Error::MaskMismatch(_))
        ));
    }

    #[test]
    fn delaunay_reproduces_observed_values() {
        let mut values = Array2::from_elem((8, 8), f64::NAN);
        for &(r, c, v) in &[(0usize, 0usize, 2.0), (0, 7, -1.0), (7, 0, 4.0), (7, 7, 0.5), (3, 4, 1.25)] {
            values[[r, c]] = v;
        }
        let field = field_from(values);
        let dense = delaunay_interpolate(&field).unwrap();
        for (r, c, v) in field.iter_observed() {
            assert!(
                (dense.values()[[r, c]] - v).abs() < 1e-9,
                "vertex ({r},{c}) drifted"
            );
        }
    }

    #[test]
    fn delaunay_triangle_centroid_is_vertex_mean() {
        // Vertices (0,0), (0,6), (6,0) with values 0, 0, 3; centroid (2,2).
        let mut values = Array2::from_elem((7, 7), f64::NAN);
        values[[0, 0]] = 0.0;
        values[[0, 6]] = 0.0;
        values[[6, 0]] = 3.0;
        let dense = delaunay_interpolate(&field_from(values)).unwrap();
        assert!((dense.values()[[2, 2]] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn delaunay_reproduces_planes_inside_hull() {
        // Corners observed, so the hull covers the whole grid and the
        // linear-reproduction contract applies everywhere.
        let n = 24;
        let plane = |r: usize, c: usize| 2.0 * c as f64 + r as f64;
        let mut values = Array2::from_elem((n, n), f64::NAN);
        for &(r, c) in &[(0, 0), (0, n - 1), (n - 1, 0), (n - 1, n - 1)] {
            values[[r, c]] = plane(r, c);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..40 {
            let r = rng.gen_range(0..n);
            let c = rng.gen_range(0..n);
            values[[r, c]] = plane(r, c);
        }
        let dense = delaunay_interpolate(&field_from(values)).unwrap();
        for ((r, c), &v) in dense.values().indexed_iter() {
            assert!(
                (v - plane(r, c)).abs() < 1e-6,
                "plane broken at ({r},{c}): {v}"
            );
        }
    }

    #[test]
    fn delaunay_rejects_collinear_points() {
        let mut values = Array2::from_elem((5, 5), f64::NAN);
        for c in 0..5 {
            values[[2, c]] = c as f64;
        }
        assert!(matches!(
            delaunay_interpolate(&field_from(values)),
            Err(Error::Triangulation(_))
        ));
    }

    #[test]
    fn smoothing_preserves_constants() {
        let spec = GridSpec::square(32, 10.0).unwrap();
        let grid = DenseVelocityGrid::new(spec, Array2::from_elem((32, 32), 5.5)).unwrap();
        let out = gaussian_smooth(&grid, 5.0).unwrap();
        for &v in out.values().iter() {
            assert!((v - 5.5).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_impulse_peak_matches_gaussian_formula() {
        let n = 101;
        let spec = GridSpec::square(n, 10.0).unwrap();
        let mut values = Array2::zeros((n, n));
        values[[50, 50]] = 1.0;
        let grid = DenseVelocityGrid::new(spec, values).unwrap();
        let sigma = 5.0;
        let out = gaussian_smooth(&grid, sigma).unwrap();
        // Truncating the kernel at 3 sigma and renormalizing lifts the
        // center weight ~0.4% above the continuous-Gaussian peak.
        let expected = 1.0 / (2.0 * PI * sigma * sigma);
        let peak = out.values()[[50, 50]];
        assert!(
            (peak - expected).abs() / expected < 1e-2,
            "peak {peak} vs {expected}"
        );
        // Interior-supported impulse: total mass is preserved.
        let total: f64 = out.values().sum();
        assert!((total - 1.0).abs() < 1e-6, "mass {total}");
    }

    #[test]
    fn shrinkage_matches_formula_and_conventions() {
        assert_eq!(shrink_singular_values(&[0.0], 1.0, 1.0, 0.8), vec![0.0]);
        let s = shrink_singular_values(&[1.0], 1.0, 1.0, 0.8);
        assert!((s[0] - 0.5).abs() < 1e-12);
        // Vanishing alpha leaves the spectrum untouched.
        let s = shrink_singular_values(&[3.0, 1.5], 1e-300, 1.1, 0.8);
        assert!((s[0] - 3.0).abs() < 1e-12 && (s[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn shrinkage_is_monotone_and_nonexpansive() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s1: f64 = rng.gen_range(0.0..50.0);
            let s2: f64 = rng.gen_range(0.0..50.0);
            let (hi, lo) = if s1 >= s2 { (s1, s2) } else { (s2, s1) };
            let out = shrink_singular_values(&[hi, lo], 0.8, 1.1, 0.8);
            assert!(out[0] >= out[1], "monotonicity broken: {out:?}");
            assert!(out[0] <= hi && out[1] <= lo, "expansion: {out:?}");
        }
    }

    /// Rank-2 outer product of smooth factors; the solver presumes smooth
    /// velocity fields, so the factors stay in the near-DC band.
    pub(crate) fn smooth_rank2(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut factor = |dc: f64| -> Vec<f64> {
            let c0 = dc * (1.0 + 0.3 * rng.gen::<f64>());
            let c1 = 0.6 * (rng.gen::<f64>() - 0.5);
            let c2 = 0.4 * (rng.gen::<f64>() - 0.5);
            (0..n)
                .map(|i| {
                    let t = i as f64 / (n - 1) as f64;
                    c0 + c1 * t + c2 * (PI * t).sin()
                })
                .collect()
        };
        let (u1, v1, u2, v2) = (factor(2.0), factor(2.0), factor(-1.0), factor(1.0));
        Array2::from_shape_fn((n, n), |(i, j)| u1[i] * v1[j] + u2[i] * v2[j])
    }

    #[test]
    fn completion_recovers_fully_observed_low_rank() {
        let truth = smooth_rank2(50, 1);
        let field = field_from(truth.clone());
        let (out, stats) = matrix_complete_detailed(&field, &McParams::default()).unwrap();
        let num: f64 = (&truth - out.values()).mapv(|d| d * d).sum();
        let den: f64 = truth.mapv(|d| d * d).sum();
        let rel = (num / den).sqrt();
        assert!(rel < 0.05, "relative error {rel} with stats {stats:?}");
    }

    #[test]
    fn completion_recovers_hidden_entries() {
        let n = 50;
        let truth = smooth_rank2(n, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let mut idx: Vec<usize> = (0..n * n).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let keep = (n * n * 2) / 5;
        let mut values = Array2::from_elem((n, n), f64::NAN);
        for &i in &idx[..keep] {
            values[[i / n, i % n]] = truth[[i / n, i % n]];
        }
        let field = field_from(values);
        let out = matrix_complete(&field, &McParams::default()).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for &i in &idx[keep..] {
            let (r, c) = (i / n, i % n);
            num += (truth[[r, c]] - out.values()[[r, c]]).powi(2);
            den += truth[[r, c]].powi(2);
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.10, "hidden-entry relative error {rel}");
    }

    #[test]
    fn completion_does_not_raise_nuclear_norm() {
        let truth = smooth_rank2(40, 5);
        let field = field_from(truth);
        let filtered = median_filter_nan(&field);
        let x0 = DelaunayInterpolator::new(&filtered)
            .unwrap()
            .interpolate(&filtered)
            .unwrap();
        let nuc0 = x0.values().svddc(JobSvd::None).unwrap().1.sum();
        let out = matrix_complete(&field, &McParams::default()).unwrap();
        let nuc = out.values().svddc(JobSvd::None).unwrap().1.sum();
        assert!(nuc <= nuc0 * (1.0 + 1e-9), "nuclear norm rose {nuc0} -> {nuc}");
    }

    #[test]
    fn completion_rejects_empty_fields() {
        let values = Array2::from_elem((8, 8), f64::NAN);
        let field = field_from(values);
        assert!(matches!(
            matrix_complete(&field, &McParams::default()),
            Err(Error::NoData(_)) | Err(Error::Triangulation(_))
        ));
    }

    #[test]
    fn invalid_params_are_rejected() {
        let bad = McParams {
            p: 1.5,
            ..McParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = McParams {
            alpha_decay: 1.0,
            ..McParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
