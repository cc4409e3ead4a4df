//! Labeled synthetic training scenes X = D + T: point-source and tunnelling
//! deformation, correlated atmosphere from a Cholesky factor of the fitted
//! covariance, realistic sparsity layouts and spike-noise injection.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Cholesky, UPLO};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::covariogram::{covariance_at, CovarianceModel};
use crate::grid::{write_raster, DenseVelocityGrid, GridSpec, SparseVelocityField};
use crate::interp::{
    delaunay_interpolate, extract_noise, matrix_complete, median_filter_nan, McParams, NoiseStats,
};
use crate::{Error, Result};

/// Point pressure source in an elastic half-space.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MogiSource {
    pub easting_m: f64,
    pub northing_m: f64,
    pub depth_m: f64,
    /// Signed volume change; negative deflates (subsidence).
    pub volume_change_m3: f64,
    pub poisson_ratio: f64,
}

impl MogiSource {
    pub fn new(easting_m: f64, northing_m: f64, depth_m: f64, volume_change_m3: f64) -> Result<Self> {
        if !(depth_m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "source depth must be positive, got {depth_m}"
            )));
        }
        Ok(MogiSource {
            easting_m,
            northing_m,
            depth_m,
            volume_change_m3,
            poisson_ratio: 0.25,
        })
    }
}

/// Per-vertex cross-section parameters of a tunnelling settlement profile.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TunnelSection {
    /// Full width of the sagging trough, m.
    pub l_sag_m: f64,
    /// Width of each hogging band, m.
    pub l_hog_m: f64,
    /// Trough depth, mm.
    pub d_sag_mm: f64,
    /// Hogging bump height, mm.
    pub d_hog_mm: f64,
}

/// Tunnelling-induced settlement swept along a polyline, with cross-section
/// parameters interpolated linearly between the per-vertex values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunnelModel {
    pub path_m: Vec<(f64, f64)>,
    pub sections: Vec<TunnelSection>,
}

impl TunnelModel {
    pub fn new(path_m: Vec<(f64, f64)>, sections: Vec<TunnelSection>) -> Result<Self> {
        if path_m.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "tunnel path needs >= 2 vertices, got {}",
                path_m.len()
            )));
        }
        if sections.len() != path_m.len() {
            return Err(Error::InvalidArgument(
                "one cross-section per path vertex required".into(),
            ));
        }
        let length: f64 = path_m
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .sum();
        if !(length > 0.0) {
            return Err(Error::InvalidArgument("degenerate zero-length path".into()));
        }
        for s in &sections {
            let ok = (30.0..=80.0).contains(&s.l_sag_m)
                && (30.0..=80.0).contains(&s.l_hog_m)
                && (1.0..=10.0).contains(&s.d_sag_mm)
                && (1.0..=5.0).contains(&s.d_hog_mm);
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "tunnel section outside valid ranges: {s:?}"
                )));
            }
        }
        Ok(TunnelModel { path_m, sections })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Ascending,
    Descending,
}

/// Line-of-sight geometry; heading is measured clockwise from north and
/// positive LOS motion points toward the satellite.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LosGeometry {
    pub incidence_deg: f64,
    pub heading_deg: f64,
    pub pass: Pass,
}

impl LosGeometry {
    pub fn new(incidence_deg: f64, heading_deg: f64, pass: Pass) -> Result<Self> {
        if !(incidence_deg > 0.0 && incidence_deg < 90.0) {
            return Err(Error::InvalidArgument(format!(
                "incidence {incidence_deg} outside (0, 90)"
            )));
        }
        Ok(LosGeometry {
            incidence_deg,
            heading_deg,
            pass,
        })
    }

    /// Sentinel-1 style geometry over the UK, ascending pass.
    pub fn ascending_default() -> Self {
        LosGeometry {
            incidence_deg: 39.0,
            heading_deg: -13.0,
            pass: Pass::Ascending,
        }
    }

    /// Sentinel-1 style geometry over the UK, descending pass.
    pub fn descending_default() -> Self {
        LosGeometry {
            incidence_deg: 39.0,
            heading_deg: 193.0,
            pass: Pass::Descending,
        }
    }
}

/// East/north/up displacement grids in mm.
#[derive(Debug, Clone)]
pub struct Displacement3 {
    pub spec: GridSpec,
    pub east: Array2<f64>,
    pub north: Array2<f64>,
    pub up: Array2<f64>,
}

/// Surface displacement of a Mogi point source over a grid.
///
/// u_up(r) = (1 - nu) dV depth / (pi (r^2 + depth^2)^{3/2}) and the radial
/// component swaps depth for r, decomposed into east/north.
pub fn mogi_displacement(source: &MogiSource, spec: &GridSpec) -> Displacement3 {
    let (h, w) = spec.shape();
    let mut east = Array2::zeros((h, w));
    let mut north = Array2::zeros((h, w));
    let mut up = Array2::zeros((h, w));
    let scale = (1.0 - source.poisson_ratio) * source.volume_change_m3 / PI;
    let d = source.depth_m;
    for r in 0..h {
        for c in 0..w {
            let (e, n) = spec.center_of(r, c);
            let dx = e - source.easting_m;
            let dy = n - source.northing_m;
            let r2 = dx * dx + dy * dy;
            let denom = (r2 + d * d).powf(1.5);
            // meters -> mm
            let uz = 1000.0 * scale * d / denom;
            let ur = 1000.0 * scale / denom; // per meter of horizontal offset
            up[[r, c]] = uz;
            east[[r, c]] = ur * dx;
            north[[r, c]] = ur * dy;
        }
    }
    Displacement3 {
        spec: *spec,
        east,
        north,
        up,
    }
}

/// Cross-section settlement at transverse offset `t_m` for interpolated
/// section parameters: a raised-cosine trough flanked by raised-cosine
/// hogging bumps, C1 everywhere and compactly supported.
fn tunnel_profile(section: &TunnelSection, t_m: f64) -> f64 {
    let half_sag = section.l_sag_m / 2.0;
    let t = t_m.abs();
    if t <= half_sag {
        let c = (PI * t / section.l_sag_m).cos();
        -section.d_sag_mm * c * c
    } else if t <= half_sag + section.l_hog_m {
        let s = ((t - half_sag) * PI / section.l_hog_m).sin();
        section.d_hog_mm * s * s
    } else {
        0.0
    }
}

/// Vertical settlement field of a tunnel model; horizontal components are
/// zero. Each cell takes the profile of the closest point on the polyline.
pub fn tunnel_displacement(model: &TunnelModel, spec: &GridSpec) -> Result<Displacement3> {
    // Arc-length position of every vertex, for parameter interpolation.
    let mut arc = vec![0.0f64];
    for wpair in model.path_m.windows(2) {
        let d = ((wpair[1].0 - wpair[0].0).powi(2) + (wpair[1].1 - wpair[0].1).powi(2)).sqrt();
        arc.push(arc.last().unwrap() + d);
    }

    let (h, w) = spec.shape();
    let mut up = Array2::zeros((h, w));
    // Pixels farther than the largest possible influence radius from every
    // segment are untouched; 80/2 + 80 covers the widest legal section.
    let reach = 40.0 + 80.0;
    for r in 0..h {
        for c in 0..w {
            let (px, py) = spec.center_of(r, c);
            let mut best: Option<(f64, f64)> = None; // (distance, arc position)
            for (i, seg) in model.path_m.windows(2).enumerate() {
                let (ax, ay) = seg[0];
                let (bx, by) = seg[1];
                let (ux, uy) = (bx - ax, by - ay);
                let len2 = ux * ux + uy * uy;
                let s = if len2 > 0.0 {
                    (((px - ax) * ux + (py - ay) * uy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (ax + s * ux, ay + s * uy);
                let dist = ((px - qx).powi(2) + (py - qy).powi(2)).sqrt();
                if best.map_or(true, |(bd, _)| dist < bd) {
                    best = Some((dist, arc[i] + s * (arc[i + 1] - arc[i])));
                }
            }
            let (dist, at) = best.expect(">= 1 segment");
            if dist > reach {
                continue;
            }
            // Interpolate section parameters at the arc position.
            let seg = arc
                .windows(2)
                .position(|wn| at >= wn[0] && at <= wn[1])
                .unwrap_or(arc.len() - 2);
            let span = (arc[seg + 1] - arc[seg]).max(1e-12);
            let f = ((at - arc[seg]) / span).clamp(0.0, 1.0);
            let (s0, s1) = (&model.sections[seg], &model.sections[seg + 1]);
            let section = TunnelSection {
                l_sag_m: s0.l_sag_m + f * (s1.l_sag_m - s0.l_sag_m),
                l_hog_m: s0.l_hog_m + f * (s1.l_hog_m - s0.l_hog_m),
                d_sag_mm: s0.d_sag_mm + f * (s1.d_sag_mm - s0.d_sag_mm),
                d_hog_mm: s0.d_hog_mm + f * (s1.d_hog_mm - s0.d_hog_mm),
            };
            up[[r, c]] = tunnel_profile(&section, dist);
        }
    }
    Ok(Displacement3 {
        spec: *spec,
        east: Array2::zeros((h, w)),
        north: Array2::zeros((h, w)),
        up,
    })
}

/// Projects a 3-D displacement field onto the line of sight:
/// LOS = -e sin(theta) cos(alpha) + n sin(theta) sin(alpha) + u cos(theta).
pub fn project_los(disp: &Displacement3, geom: &LosGeometry) -> Result<DenseVelocityGrid> {
    let theta = geom.incidence_deg.to_radians();
    let alpha = geom.heading_deg.to_radians();
    let (st, ct) = (theta.sin(), theta.cos());
    let (sa, ca) = (alpha.sin(), alpha.cos());
    let mut los = Array2::zeros(disp.spec.shape());
    for ((idx, out), (&e, (&n, &u))) in los
        .indexed_iter_mut()
        .zip(disp.east.iter().zip(disp.north.iter().zip(disp.up.iter())))
    {
        let _ = idx;
        *out = -e * st * ca + n * st * sa + u * ct;
    }
    DenseVelocityGrid::new(disp.spec, los)
}

/// Upper bound on the direct covariance build; larger grids synthesize on a
/// coarse grid and upsample bilinearly.
const DIRECT_CAP: usize = 10_000;
/// Target pixel count of the coarse grid used beyond the direct cap.
const COARSE_TARGET: usize = 3136;

/// Draws correlated atmosphere fields with the statistics of a fitted
/// covariance model. Building the Cholesky factor is the expensive part, so
/// the sampler is constructed once and reused across seeds.
pub struct AtmosphereSampler {
    spec: GridSpec,
    model: CovarianceModel,
    chol: Array2<f64>,
    /// Present when sampling happens on a coarse grid: (rows, cols) of it.
    coarse: Option<(usize, usize)>,
}

impl AtmosphereSampler {
    pub fn new(model: &CovarianceModel, spec: &GridSpec) -> Result<Self> {
        model.validate()?;
        let n = spec.n_pixels();
        let (dims, correlated_only) = if n <= DIRECT_CAP {
            (spec.shape(), false)
        } else {
            let s = ((n as f64 / COARSE_TARGET as f64).sqrt()).ceil().max(1.0);
            let ch = ((spec.height as f64 / s).ceil() as usize).clamp(2, spec.height);
            let cw = ((spec.width as f64 / s).ceil() as usize).clamp(2, spec.width);
            ((ch, cw), true)
        };
        let (rows, cols) = dims;
        // Physical node spacing; coarse nodes span the full extent.
        let dy_km = if correlated_only {
            spec.pixel_size_m * (spec.height - 1) as f64 / (rows - 1) as f64 / 1000.0
        } else {
            spec.pixel_size_m / 1000.0
        };
        let dx_km = if correlated_only {
            spec.pixel_size_m * (spec.width - 1) as f64 / (cols - 1) as f64 / 1000.0
        } else {
            spec.pixel_size_m / 1000.0
        };
        let m = rows * cols;
        let mut cov = Array2::zeros((m, m));
        for i in 0..m {
            let (ri, ci) = (i / cols, i % cols);
            for j in i..m {
                let (rj, cj) = (j / cols, j % cols);
                let d = (((ri as f64 - rj as f64) * dy_km).powi(2)
                    + ((ci as f64 - cj as f64) * dx_km).powi(2))
                .sqrt();
                let v = if i == j {
                    // Coarse sampling carries the correlated part only; the
                    // nugget is re-added as white noise at full resolution.
                    if correlated_only {
                        model.a
                    } else {
                        model.sill
                    }
                } else {
                    covariance_at(&model.clone(), d)?
                };
                cov[[i, j]] = v;
                cov[[j, i]] = v;
            }
        }
        for i in 0..m {
            cov[[i, i]] += 1e-8 * model.sill;
        }
        let chol = cov
            .cholesky(UPLO::Lower)
            .map_err(|_| Error::NotPositiveDefinite)?;
        Ok(AtmosphereSampler {
            spec: *spec,
            model: *model,
            chol,
            coarse: correlated_only.then_some(dims),
        })
    }

    /// One correlated field; identical seeds give bit-identical fields.
    pub fn sample(&self, seed: u64) -> DenseVelocityGrid {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let m = self.chol.nrows();
        let z = Array1::from_iter((0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let flat = self.chol.dot(&z);
        let values = match self.coarse {
            None => Array2::from_shape_vec(self.spec.shape(), flat.to_vec())
                .expect("direct sample covers the grid"),
            Some((ch, cw)) => {
                let coarse = Array2::from_shape_vec((ch, cw), flat.to_vec())
                    .expect("coarse sample covers the coarse grid");
                let mut full = bilinear_upsample(&coarse, self.spec.shape());
                let sd = self.model.nugget.sqrt();
                for v in full.iter_mut() {
                    *v += sd * rng.sample::<f64, _>(StandardNormal);
                }
                full
            }
        };
        DenseVelocityGrid::new(self.spec, values).expect("finite by construction")
    }
}

/// Samples one atmosphere field; prefer [`AtmosphereSampler`] when drawing
/// many fields from the same model.
pub fn synth_atmosphere(
    model: &CovarianceModel,
    spec: &GridSpec,
    seed: u64,
) -> Result<DenseVelocityGrid> {
    Ok(AtmosphereSampler::new(model, spec)?.sample(seed))
}

fn bilinear_upsample(coarse: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let (ch, cw) = coarse.dim();
    let (h, w) = shape;
    let ry = (ch - 1) as f64 / (h - 1).max(1) as f64;
    let rx = (cw - 1) as f64 / (w - 1).max(1) as f64;
    Array2::from_shape_fn((h, w), |(r, c)| {
        let y = r as f64 * ry;
        let x = c as f64 * rx;
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(ch - 1), (x0 + 1).min(cw - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        coarse[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
            + coarse[[y0, x1]] * (1.0 - fy) * fx
            + coarse[[y1, x0]] * fy * (1.0 - fx)
            + coarse[[y1, x1]] * fy * fx
    })
}

/// Measurement-point layout synthesis: a background Poisson field plus a few
/// dense urban-like clusters. Real products concentrate points on man-made
/// structures; this stands in for those proprietary distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutParams {
    pub base_rate: f64,
    pub n_clusters: (usize, usize),
    pub cluster_radius_px: (f64, f64),
    pub cluster_peak_rate: (f64, f64),
}

impl Default for LayoutParams {
    fn default() -> Self {
        LayoutParams {
            base_rate: 0.04,
            n_clusters: (2, 5),
            cluster_radius_px: (20.0, 60.0),
            cluster_peak_rate: (0.35, 0.65),
        }
    }
}

/// Draws a presence mask from the layout process.
pub fn generate_layout(spec: &GridSpec, params: &LayoutParams, seed: u64) -> Array2<bool> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (h, w) = spec.shape();
    let n_clusters = rng.gen_range(params.n_clusters.0..=params.n_clusters.1);
    let clusters: Vec<(f64, f64, f64, f64)> = (0..n_clusters)
        .map(|_| {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let radius = rng.gen_range(params.cluster_radius_px.0..=params.cluster_radius_px.1);
            let peak = rng.gen_range(params.cluster_peak_rate.0..=params.cluster_peak_rate.1);
            (cy, cx, radius, peak)
        })
        .collect();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut rate = params.base_rate;
        for &(cy, cx, radius, peak) in &clusters {
            let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
            rate += peak * (-d2 / (2.0 * radius * radius)).exp();
        }
        rng.gen::<f64>() < rate.min(0.9)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformationClass {
    Point,
    Line,
}

/// Which interpolated variants a composed scene carries.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InterpVariants {
    pub dt: bool,
    pub mc: bool,
}

impl InterpVariants {
    pub fn none() -> Self {
        InterpVariants { dt: false, mc: false }
    }

    pub fn all() -> Self {
        InterpVariants { dt: true, mc: true }
    }
}

/// One labeled training sample with its intermediate products.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub deformation: DenseVelocityGrid,
    pub atmosphere: DenseVelocityGrid,
    pub combined: DenseVelocityGrid,
    pub label: SceneLabel,
    pub class: DeformationClass,
    pub sparse: SparseVelocityField,
    pub interpolated_mc: Option<DenseVelocityGrid>,
    pub interpolated_dt: Option<DenseVelocityGrid>,
}

/// Peak LOS deformation magnitude allowed in a scene, mm/yr.
pub const MAX_LOS_MM_YR: f64 = 15.0;

/// Combines deformation and atmosphere, sub-samples through the layout,
/// injects spike noise resampled from recorded residuals and (optionally)
/// interpolates the sparse result.
#[allow(clippy::too_many_arguments)]
pub fn compose_scene(
    deformation: DenseVelocityGrid,
    atmosphere: DenseVelocityGrid,
    class: DeformationClass,
    layout: &Array2<bool>,
    noise: &NoiseStats,
    variants: InterpVariants,
    mc_params: &McParams,
    seed: u64,
) -> Result<SyntheticScene> {
    if deformation.spec() != atmosphere.spec() {
        return Err(Error::InvalidArgument(
            "deformation and atmosphere on different grids".into(),
        ));
    }
    if layout.dim() != deformation.spec().shape() {
        return Err(Error::InvalidArgument("layout shape mismatch".into()));
    }
    if !layout.iter().any(|&m| m) {
        return Err(Error::NoData("empty point layout".into()));
    }
    let peak = deformation.values().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > MAX_LOS_MM_YR * (1.0 + 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "deformation peak {peak} mm/yr exceeds {MAX_LOS_MM_YR}"
        )));
    }
    let label = if peak > 0.0 {
        SceneLabel::Positive
    } else {
        SceneLabel::Negative
    };

    let spec = *deformation.spec();
    let combined_values = deformation.values() + atmosphere.values();
    let combined = DenseVelocityGrid::new(spec, combined_values)?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut sparse_values = Array2::from_elem(spec.shape(), f64::NAN);
    for ((r, c), &m) in layout.indexed_iter() {
        if !m {
            continue;
        }
        let mut v = combined.values()[[r, c]];
        if !noise.amplitude_samples.is_empty() && rng.gen::<f64>() < noise.impulse_rate {
            v += noise.amplitude_samples[rng.gen_range(0..noise.amplitude_samples.len())];
        }
        sparse_values[[r, c]] = v;
    }
    let sparse = SparseVelocityField::from_values(spec, sparse_values)?;

    let interpolated_dt = if variants.dt {
        Some(delaunay_interpolate(&sparse)?)
    } else {
        None
    };
    let interpolated_mc = if variants.mc {
        Some(matrix_complete(&sparse, mc_params)?)
    } else {
        None
    };

    Ok(SyntheticScene {
        deformation,
        atmosphere,
        combined,
        label,
        class,
        sparse,
        interpolated_mc,
        interpolated_dt,
    })
}

/// Parameter ranges and grid geometry for dataset synthesis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub class: DeformationClass,
    pub grid: GridSpec,
    pub geometry: LosGeometry,
    /// Uniform draw ranges of the covariance parameters (paper-like UK fits).
    pub cov_a: (f64, f64),
    pub cov_b: (f64, f64),
    pub cov_nugget: (f64, f64),
    /// Number of pooled covariance models (Cholesky factors are reused).
    pub n_atmosphere_models: usize,
    pub mogi_depth_m: (f64, f64),
    pub mogi_volume_log10: (f64, f64),
    /// Smallest acceptable peak LOS signal of a positive scene, mm/yr.
    pub min_peak_los: f64,
    /// Margin (pixels) keeping sources away from scene edges.
    pub source_margin_px: usize,
    pub tunnel_length_m: (f64, f64),
    pub layout: LayoutParams,
    pub variants: InterpVariants,
    pub mc_params: McParams,
}

impl SynthConfig {
    pub fn point_defaults(grid: GridSpec) -> Self {
        let margin = (grid.width.min(grid.height) / 4).min(48);
        SynthConfig {
            class: DeformationClass::Point,
            grid,
            geometry: LosGeometry::ascending_default(),
            cov_a: (0.7, 1.8),
            cov_b: (0.8, 1.6),
            cov_nugget: (0.4, 1.1),
            n_atmosphere_models: 6,
            mogi_depth_m: (3.0, 80.0),
            mogi_volume_log10: (0.3, 3.0),
            min_peak_los: 2.0,
            source_margin_px: margin,
            tunnel_length_m: (500.0, 1500.0),
            layout: LayoutParams::default(),
            variants: InterpVariants::all(),
            mc_params: McParams::default(),
        }
    }

    pub fn line_defaults(grid: GridSpec) -> Self {
        SynthConfig {
            class: DeformationClass::Line,
            ..SynthConfig::point_defaults(grid)
        }
    }
}

/// Draws per-scene deformation parameters, shared by the generator and the
/// manifest it writes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneParams {
    Point(MogiSource),
    Line(TunnelModel),
    None,
}

/// Deterministic scene factory: scene `index` always produces the same
/// scene regardless of generation order, so parallel runs agree.
pub struct SceneGenerator {
    config: SynthConfig,
    base_seed: u64,
    samplers: Vec<AtmosphereSampler>,
    models: Vec<CovarianceModel>,
    noise: Vec<NoiseStats>,
}

fn mix_seed(base: u64, index: u64, salt: u64) -> u64 {
    // splitmix64 over the combined stream id
    let mut z = base
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(salt.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SceneGenerator {
    pub fn new(config: SynthConfig, seed: u64) -> Result<Self> {
        if config.n_atmosphere_models == 0 {
            return Err(Error::InvalidArgument(
                "need at least one atmosphere model".into(),
            ));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, 0, 1));
        let mut samplers = Vec::new();
        let mut models = Vec::new();
        let mut noise = Vec::new();
        for k in 0..config.n_atmosphere_models {
            let a = rng.gen_range(config.cov_a.0..=config.cov_a.1);
            let b = rng.gen_range(config.cov_b.0..=config.cov_b.1);
            let nugget = rng.gen_range(config.cov_nugget.0..=config.cov_nugget.1);
            let model = CovarianceModel::new(a, b, a + nugget)?;
            let sampler = AtmosphereSampler::new(&model, &config.grid)?;
            // Reference noise statistics from one sampled field observed
            // through a layout, exactly how real stats would be recorded.
            let field = sampler.sample(mix_seed(seed, k as u64, 2));
            let layout = generate_layout(&config.grid, &config.layout, mix_seed(seed, k as u64, 3));
            let mut values = Array2::from_elem(config.grid.shape(), f64::NAN);
            for ((r, c), &m) in layout.indexed_iter() {
                if m {
                    values[[r, c]] = field.values()[[r, c]];
                }
            }
            let sparse = SparseVelocityField::from_values(config.grid, values)?;
            let filtered = median_filter_nan(&sparse);
            noise.push(extract_noise(&sparse, &filtered, nugget)?);
            samplers.push(sampler);
            models.push(model);
        }
        Ok(SceneGenerator {
            config,
            base_seed: seed,
            samplers,
            models,
            noise,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    /// Covariance models backing the pooled atmosphere samplers.
    pub fn models(&self) -> &[CovarianceModel] {
        &self.models
    }

    fn draw_mogi(&self, rng: &mut ChaCha12Rng) -> Result<MogiSource> {
        let spec = &self.config.grid;
        let margin = self.config.source_margin_px as f64 * spec.pixel_size_m;
        let geom = &self.config.geometry;
        let ct = geom.incidence_deg.to_radians().cos();
        let nu = 0.25;
        for _ in 0..200 {
            let depth = rng.gen_range(self.config.mogi_depth_m.0..=self.config.mogi_depth_m.1);
            // |dV| window implied by the LOS bounds: the center peak is
            // (1-nu) |dV| / (pi depth^2) * 1000 mm vertically; the lower
            // bound applies to its LOS projection, the upper to the full
            // magnitude so the scene invariant holds everywhere.
            let peak_per_m3 = (1.0 - nu) / (PI * depth * depth) * 1000.0;
            let dv_min = self.config.min_peak_los / (peak_per_m3 * ct);
            let dv_max = MAX_LOS_MM_YR / peak_per_m3;
            let lo = dv_min.max(10f64.powf(self.config.mogi_volume_log10.0));
            let hi = dv_max.min(10f64.powf(self.config.mogi_volume_log10.1));
            if lo >= hi {
                continue;
            }
            let dv = 10f64.powf(rng.gen_range(lo.log10()..=hi.log10()));
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let x = rng.gen_range(
                (spec.origin_x_m + margin)..(spec.origin_x_m + spec.width as f64 * spec.pixel_size_m - margin),
            );
            let y = rng.gen_range(
                (spec.origin_y_m - spec.height as f64 * spec.pixel_size_m + margin)..(spec.origin_y_m - margin),
            );
            return MogiSource::new(x, y, depth, sign * dv);
        }
        Err(Error::InvalidArgument(
            "no admissible Mogi parameters in the configured ranges".into(),
        ))
    }

    fn draw_tunnel(&self, rng: &mut ChaCha12Rng) -> Result<TunnelModel> {
        let spec = &self.config.grid;
        let margin = self.config.source_margin_px as f64 * spec.pixel_size_m;
        let cx = rng.gen_range(
            (spec.origin_x_m + margin)..(spec.origin_x_m + spec.width as f64 * spec.pixel_size_m - margin),
        );
        let cy = rng.gen_range(
            (spec.origin_y_m - spec.height as f64 * spec.pixel_size_m + margin)..(spec.origin_y_m - margin),
        );
        let phi = rng.gen_range(0.0..PI);
        let length = rng.gen_range(self.config.tunnel_length_m.0..=self.config.tunnel_length_m.1);
        let n_vertices = 4;
        let bend = rng.gen_range(-0.12..0.12) * length;
        let (dx, dy) = (phi.cos(), phi.sin());
        let (nx, ny) = (-dy, dx);
        let mut path = Vec::with_capacity(n_vertices);
        let mut sections = Vec::with_capacity(n_vertices);
        for i in 0..n_vertices {
            let t = i as f64 / (n_vertices - 1) as f64 - 0.5;
            // Parabolic lateral offset bends the track like a rail curve.
            let off = bend * (0.25 - t * t);
            path.push((cx + t * length * dx + off * nx, cy + t * length * dy + off * ny));
            sections.push(TunnelSection {
                l_sag_m: rng.gen_range(30.0..=80.0),
                l_hog_m: rng.gen_range(30.0..=80.0),
                d_sag_mm: rng.gen_range(1.0..=10.0),
                d_hog_mm: rng.gen_range(1.0..=5.0),
            });
        }
        TunnelModel::new(path, sections)
    }

    /// Generates scene `index`; even indices are positive, odd negative.
    pub fn generate(&self, index: u64) -> Result<(SyntheticScene, SceneParams)> {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(self.base_seed, index, 10));
        let positive = index % 2 == 0;
        let spec = self.config.grid;

        let (deformation, params) = if positive {
            match self.config.class {
                DeformationClass::Point => {
                    let source = self.draw_mogi(&mut rng)?;
                    let disp = mogi_displacement(&source, &spec);
                    (project_los(&disp, &self.config.geometry)?, SceneParams::Point(source))
                }
                DeformationClass::Line => {
                    let model = self.draw_tunnel(&mut rng)?;
                    let disp = tunnel_displacement(&model, &spec)?;
                    (project_los(&disp, &self.config.geometry)?, SceneParams::Line(model))
                }
            }
        } else {
            (
                DenseVelocityGrid::new(spec, Array2::zeros(spec.shape()))?,
                SceneParams::None,
            )
        };

        let which = rng.gen_range(0..self.samplers.len());
        let atmosphere = self.samplers[which].sample(mix_seed(self.base_seed, index, 11));
        let layout = generate_layout(&spec, &self.config.layout, mix_seed(self.base_seed, index, 12));
        let scene = compose_scene(
            deformation,
            atmosphere,
            self.config.class,
            &layout,
            &self.noise[which],
            self.config.variants,
            &self.config.mc_params,
            mix_seed(self.base_seed, index, 13),
        )?;
        Ok((scene, params))
    }
}

/// One manifest line per generated scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: u64,
    pub label: SceneLabel,
    pub class: DeformationClass,
    pub seed: u64,
    pub files: std::collections::BTreeMap<String, String>,
    pub params: SceneParams,
}

/// Generates `n_per_class` positive and negative scenes, writes their
/// rasters under `out_dir` and a JSON-lines manifest beside them. Returns
/// the manifest records in index order.
pub fn generate_dataset(
    config: &SynthConfig,
    n_per_class: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ManifestRecord>> {
    let generator = SceneGenerator::new(config.clone(), seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(2 * n_per_class);
    for index in 0..(2 * n_per_class as u64) {
        let (scene, params) = generator.generate(index)?;
        let scene_dir = format!("scene_{index:05}");
        let dir = out_dir.join(&scene_dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut files = std::collections::BTreeMap::new();
        let mut save = |name: &str, spec: &GridSpec, values: &Array2<f64>| -> Result<()> {
            let rel = format!("{scene_dir}/{name}.f32");
            write_raster(&out_dir.join(&rel), spec, values)?;
            files.insert(name.to_string(), rel);
            Ok(())
        };
        save("deformation", scene.deformation.spec(), scene.deformation.values())?;
        save("atmosphere", scene.atmosphere.spec(), scene.atmosphere.values())?;
        save("sparse", scene.sparse.spec(), scene.sparse.values())?;
        if let Some(mc) = &scene.interpolated_mc {
            save("mc", mc.spec(), mc.values())?;
        }
        if let Some(dt) = &scene.interpolated_dt {
            save("dt", dt.spec(), dt.values())?;
        }
        records.push(ManifestRecord {
            index,
            label: scene.label,
            class: scene.class,
            seed,
            files,
            params,
        });
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for record in &records {
        let line = serde_json::to_string(record).expect("manifest record serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(records)
}

/// Reads back a JSON-lines manifest written by [`generate_dataset`].
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
