//! Full-map detection: tiling, per-patch inference, Gaussian probability
//! merging, wrap/offset fusion, multi-look combination and detection
//! extraction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classifier::{extract_patches, CnnModel, PatchSpec};
use crate::grid::{DenseVelocityGrid, GridSpec, SparseVelocityField};
use crate::interp::{matrix_complete, McParams};
use crate::synth::Pass;
use crate::wrapping::{wrap_ensemble, WrapConfig};
use crate::{Error, Result};

/// Where a probability map came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    /// One wrap-ensemble member.
    Member {
        interval_mm_yr: f64,
        offset_mm_yr: f64,
    },
    /// Fused over offsets and intervals for a single look.
    Look(Pass),
    /// Final fused output.
    Fused,
}

/// Per-pixel deformation probability in [0, 1].
#[derive(Debug, Clone)]
pub struct ProbabilityMap {
    spec: GridSpec,
    values: Array2<f64>,
    pub provenance: Provenance,
}

impl ProbabilityMap {
    pub fn new(spec: GridSpec, values: Array2<f64>, provenance: Provenance) -> Result<Self> {
        if values.dim() != spec.shape() {
            return Err(Error::InvalidArgument("probability map shape mismatch".into()));
        }
        if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "probability {v} outside [0, 1]"
            )));
        }
        Ok(ProbabilityMap {
            spec,
            values,
            provenance,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// One connected region above a probability threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    /// Probability-weighted centroid (easting, northing), meters.
    pub centroid_m: (f64, f64),
    pub area_km2: f64,
    #[serde(rename = "max_p")]
    pub max_probability: f64,
    #[serde(rename = "level")]
    pub threshold_level: f64,
}

/// Footprint (pixels) and standard deviation of the probability-merging
/// kernel.
const MERGE_KERNEL_SIZE: usize = 20;
const MERGE_SIGMA: f64 = 5.0;

/// Splats per-patch probabilities over the map with a rotationally
/// symmetric Gaussian kernel centered on each patch; overlaps resolve by
/// weighted average and uncovered pixels stay zero.
pub fn merge_patch_probs(
    patch_probs: &[(usize, usize, f64)],
    spec: &GridSpec,
    patch: &PatchSpec,
) -> Result<ProbabilityMap> {
    if patch_probs.is_empty() {
        return Err(Error::NoData("no patch probabilities to merge".into()));
    }
    if let Some(&(_, _, p)) = patch_probs.iter().find(|&&(_, _, p)| !(0.0..=1.0).contains(&p)) {
        return Err(Error::InvalidArgument(format!(
            "patch probability {p} outside [0, 1]"
        )));
    }
    let (h, w) = spec.shape();
    let mut num = Array2::<f64>::zeros((h, w));
    let mut den = Array2::<f64>::zeros((h, w));
    let half = MERGE_KERNEL_SIZE / 2;
    for &(row, col, p) in patch_probs {
        // Kernel taps sit on the MERGE_KERNEL_SIZE pixels around the patch
        // center at row + (patch_size - 1)/2; for even sizes that center
        // lies between pixels and the tap offsets are half-integral.
        let cy = row as f64 + (patch.patch_size as f64 - 1.0) / 2.0;
        let cx = col as f64 + (patch.patch_size as f64 - 1.0) / 2.0;
        let y_start = (row + patch.patch_size / 2).saturating_sub(half);
        let x_start = (col + patch.patch_size / 2).saturating_sub(half);
        for y in y_start..(y_start + MERGE_KERNEL_SIZE).min(h) {
            let dy = y as f64 - cy;
            for x in x_start..(x_start + MERGE_KERNEL_SIZE).min(w) {
                let dx = x as f64 - cx;
                let weight = (-(dy * dy + dx * dx) / (2.0 * MERGE_SIGMA * MERGE_SIGMA)).exp();
                num[[y, x]] += weight * p;
                den[[y, x]] += weight;
            }
        }
    }
    let values = ndarray::Zip::from(&num)
        .and(&den)
        .map_collect(|&n, &d| if d > 0.0 { (n / d).clamp(0.0, 1.0) } else { 0.0 });
    ProbabilityMap::new(*spec, values, Provenance::Fused)
}

/// One merged probability map per wrap-ensemble member.
#[derive(Debug, Clone)]
pub struct EnsembleMemberMap {
    pub interval_mm_yr: f64,
    pub offset_mm_yr: f64,
    pub map: ProbabilityMap,
}

/// P_mu = max over offsets, P_final = mean over intervals.
pub fn fuse_ensemble(members: &[EnsembleMemberMap]) -> Result<ProbabilityMap> {
    if members.is_empty() {
        return Err(Error::NoData("empty ensemble".into()));
    }
    let spec = *members[0].map.spec();
    let mut intervals: Vec<f64> = Vec::new();
    for m in members {
        if m.map.spec() != &spec {
            return Err(Error::InvalidArgument("ensemble maps on different grids".into()));
        }
        if !intervals.iter().any(|&mu| mu == m.interval_mm_yr) {
            intervals.push(m.interval_mm_yr);
        }
    }
    let counts: Vec<usize> = intervals
        .iter()
        .map(|&mu| members.iter().filter(|m| m.interval_mm_yr == mu).count())
        .collect();
    if counts.iter().any(|&c| c != counts[0]) {
        return Err(Error::InvalidArgument(format!(
            "incomplete ensemble: offsets per interval {counts:?}"
        )));
    }

    let mut total = Array2::<f64>::zeros(spec.shape());
    for &mu in &intervals {
        let mut per_interval = Array2::<f64>::zeros(spec.shape());
        for m in members.iter().filter(|m| m.interval_mm_yr == mu) {
            ndarray::Zip::from(&mut per_interval)
                .and(m.map.values())
                .for_each(|acc, &v| *acc = acc.max(v));
        }
        total += &per_interval;
    }
    total /= intervals.len() as f64;
    ProbabilityMap::new(spec, total, Provenance::Fused)
}

/// Combines the probability maps of 1, 2 or 4 looks.
///
/// A single look passes through; an ascending/descending pair averages;
/// four looks (two per pass) take the maximum of the four cross-pass pair
/// averages.
pub fn combine_looks(looks: &[(Pass, ProbabilityMap)]) -> Result<ProbabilityMap> {
    match looks {
        [(_, map)] => ProbabilityMap::new(*map.spec(), map.values().clone(), Provenance::Fused),
        [(_, a), (_, b)] => {
            if a.spec() != b.spec() {
                return Err(Error::InvalidArgument("look grids differ".into()));
            }
            let mean = (a.values() + b.values()) / 2.0;
            ProbabilityMap::new(*a.spec(), mean, Provenance::Fused)
        }
        looks if looks.len() == 4 => {
            let spec = *looks[0].1.spec();
            if looks.iter().any(|(_, m)| m.spec() != &spec) {
                return Err(Error::InvalidArgument("look grids differ".into()));
            }
            let asc: Vec<&ProbabilityMap> = looks
                .iter()
                .filter(|(p, _)| *p == Pass::Ascending)
                .map(|(_, m)| m)
                .collect();
            let desc: Vec<&ProbabilityMap> = looks
                .iter()
                .filter(|(p, _)| *p == Pass::Descending)
                .map(|(_, m)| m)
                .collect();
            if asc.len() != 2 || desc.len() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "four looks need two per pass, found {} ascending",
                    asc.len()
                )));
            }
            let mut out = Array2::<f64>::zeros(spec.shape());
            for a in &asc {
                for d in &desc {
                    ndarray::Zip::from(&mut out)
                        .and(a.values())
                        .and(d.values())
                        .for_each(|o, &x, &y| *o = o.max((x + y) / 2.0));
                }
            }
            ProbabilityMap::new(spec, out, Provenance::Fused)
        }
        _ => Err(Error::InvalidArgument(format!(
            "unsupported look count {}",
            looks.len()
        ))),
    }
}

/// Per-axis tile start positions: stride tile - overlap, with the last tile
/// clamped against the map edge.
fn tile_positions(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let step = tile - overlap;
    let mut positions: Vec<usize> = (0..)
        .map(|k| k * step)
        .take_while(|&p| p + tile < len)
        .collect();
    positions.push(len - tile);
    positions
}

/// One tile of a sparse map, carrying its parent-frame offsets.
#[derive(Debug, Clone)]
pub struct MapTile {
    pub row0: usize,
    pub col0: usize,
    pub field: SparseVelocityField,
}

/// Cuts a map into tiles of side `tile` with `overlap` pixels of overlap so
/// every deformation pattern is fully interior to some tile.
pub fn tile_map(field: &SparseVelocityField, tile: usize, overlap: usize) -> Result<Vec<MapTile>> {
    let (h, w) = field.spec().shape();
    if tile == 0 {
        return Err(Error::InvalidArgument("tile size must be positive".into()));
    }
    if tile <= overlap && (h > tile || w > tile) {
        return Err(Error::InvalidArgument(format!(
            "tile {tile} must exceed overlap {overlap}"
        )));
    }
    let spec = field.spec();
    let mut tiles = Vec::new();
    for &row0 in &tile_positions(h, tile, overlap) {
        for &col0 in &tile_positions(w, tile, overlap) {
            let th = tile.min(h - row0);
            let tw = tile.min(w - col0);
            let sub_spec = GridSpec::new(
                tw,
                th,
                spec.pixel_size_m,
                spec.origin_x_m + col0 as f64 * spec.pixel_size_m,
                spec.origin_y_m - row0 as f64 * spec.pixel_size_m,
            )?;
            let values = field
                .values()
                .slice(ndarray::s![row0..row0 + th, col0..col0 + tw])
                .to_owned();
            tiles.push(MapTile {
                row0,
                col0,
                field: SparseVelocityField::from_values(sub_spec, values)?,
            });
        }
    }
    Ok(tiles)
}

/// Reassembles per-tile arrays into the parent frame, averaging overlaps.
pub fn mosaic(tiles: &[(usize, usize, Array2<f64>)], shape: (usize, usize)) -> Array2<f64> {
    let mut sum = Array2::<f64>::zeros(shape);
    let mut count = Array2::<f64>::zeros(shape);
    for (row0, col0, values) in tiles {
        let (th, tw) = values.dim();
        let mut sum_view = sum.slice_mut(ndarray::s![*row0..row0 + th, *col0..col0 + tw]);
        sum_view += values;
        let mut count_view = count.slice_mut(ndarray::s![*row0..row0 + th, *col0..col0 + tw]);
        count_view += 1.0;
    }
    ndarray::Zip::from(&sum)
        .and(&count)
        .map_collect(|&s, &c| if c > 0.0 { s / c } else { 0.0 })
}

/// Connected components (8-connectivity) above each threshold level.
pub fn extract_detections(map: &ProbabilityMap, thresholds: &[f64]) -> Vec<Detection> {
    let (h, w) = map.spec().shape();
    let values = map.values();
    let mut detections = Vec::new();
    for &level in thresholds {
        let mut visited = Array2::from_elem((h, w), false);
        for r in 0..h {
            for c in 0..w {
                if visited[[r, c]] || values[[r, c]] <= level {
                    continue;
                }
                // Flood fill one component.
                let mut stack = vec![(r, c)];
                visited[[r, c]] = true;
                let mut n_px = 0usize;
                let mut weight = 0.0;
                let mut cx = 0.0;
                let mut cy = 0.0;
                let mut max_p: f64 = 0.0;
                while let Some((y, x)) = stack.pop() {
                    let p = values[[y, x]];
                    n_px += 1;
                    max_p = max_p.max(p);
                    let (e, n) = map.spec().center_of(y, x);
                    weight += p;
                    cx += p * e;
                    cy += p * n;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                continue;
                            }
                            let (ny, nx) = (ny as usize, nx as usize);
                            if !visited[[ny, nx]] && values[[ny, nx]] > level {
                                visited[[ny, nx]] = true;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
                let px_km2 = (map.spec().pixel_size_m / 1000.0).powi(2);
                detections.push(Detection {
                    centroid_m: (cx / weight, cy / weight),
                    area_km2: n_px as f64 * px_km2,
                    max_probability: max_p,
                    threshold_level: level,
                });
            }
        }
    }
    detections
}

/// End-to-end detection settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectOptions {
    pub tile: usize,
    pub wrap: WrapConfig,
    pub patch: PatchSpec,
    pub mc: McParams,
    pub thresholds: Vec<f64>,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            tile: 512,
            wrap: WrapConfig::default(),
            patch: PatchSpec::default(),
            mc: McParams::default(),
            thresholds: vec![0.5, 0.75, 0.9],
        }
    }
}

/// Everything `detect` produces: fused map, detections, per-look maps and
/// the mosaicked interpolated velocity of each look (for quicklooks).
#[derive(Debug)]
pub struct DetectOutput {
    pub probability: ProbabilityMap,
    pub detections: Vec<Detection>,
    pub look_maps: Vec<(Pass, ProbabilityMap)>,
    pub interpolated: Vec<(Pass, DenseVelocityGrid)>,
}

fn stage<T>(name: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| Error::Pipeline {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

/// Runs the whole detector: tile, interpolate, wrap, classify, merge, fuse
/// and combine looks, then extract detections.
pub fn detect(
    looks: &[(Pass, SparseVelocityField)],
    model: &CnnModel,
    opts: &DetectOptions,
) -> Result<DetectOutput> {
    if looks.is_empty() {
        return Err(Error::NoData("no looks to process".into()));
    }
    let spec = *looks[0].1.spec();
    if looks.iter().any(|(_, f)| f.spec() != &spec) {
        return Err(Error::InvalidArgument("looks on different grids".into()));
    }
    if model.arch().input_size != opts.patch.patch_size {
        return Err(Error::Model(format!(
            "model input {} differs from patch size {}",
            model.arch().input_size,
            opts.patch.patch_size
        )));
    }
    if opts.tile < opts.patch.patch_size {
        return Err(Error::InvalidArgument(format!(
            "tile {} smaller than patch {}",
            opts.tile, opts.patch.patch_size
        )));
    }
    opts.wrap.validate()?;

    let mut look_maps = Vec::with_capacity(looks.len());
    let mut interpolated = Vec::with_capacity(looks.len());
    for (pass, field) in looks {
        let tiles = stage("tiling", tile_map(field, opts.tile, opts.patch.patch_size))?;
        let mut fused_tiles = Vec::with_capacity(tiles.len());
        let mut dense_tiles = Vec::with_capacity(tiles.len());
        for (ti, tile) in tiles.iter().enumerate() {
            let result = process_tile(tile, model, opts);
            let (fused, dense) =
                stage(&format!("tile {ti} at ({}, {})", tile.row0, tile.col0), result)?;
            fused_tiles.push((tile.row0, tile.col0, fused));
            dense_tiles.push((tile.row0, tile.col0, dense));
        }
        let values = mosaic(&fused_tiles, spec.shape());
        look_maps.push((
            *pass,
            ProbabilityMap::new(spec, values, Provenance::Look(*pass))?,
        ));
        interpolated.push((
            *pass,
            DenseVelocityGrid::new(spec, mosaic(&dense_tiles, spec.shape()))?,
        ));
    }

    let probability = stage("look combination", combine_looks(&look_maps))?;
    let detections = extract_detections(&probability, &opts.thresholds);
    Ok(DetectOutput {
        probability,
        detections,
        look_maps,
        interpolated,
    })
}

fn process_tile(
    tile: &MapTile,
    model: &CnnModel,
    opts: &DetectOptions,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let dense: DenseVelocityGrid = matrix_complete(&tile.field, &opts.mc)?;
    let members = wrap_ensemble(&dense, &opts.wrap)?;
    let mut member_maps = Vec::with_capacity(members.len());
    for member in &members {
        let patches = extract_patches(&member.image, &opts.patch)?;
        let pixels: Vec<_> = patches.iter().map(|p| p.pixels.clone()).collect();
        let probs = model.predict_batch(&pixels)?;
        let patch_probs: Vec<(usize, usize, f64)> = patches
            .iter()
            .zip(&probs)
            .map(|(p, &prob)| (p.row, p.col, prob))
            .collect();
        let map = merge_patch_probs(&patch_probs, tile.field.spec(), &opts.patch)?;
        member_maps.push(EnsembleMemberMap {
            interval_mm_yr: member.interval_mm_yr,
            offset_mm_yr: member.offset_mm_yr,
            map,
        });
    }
    Ok((fuse_ensemble(&member_maps)?.values, dense.into_values()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::CnnArch;
    use ndarray::Array2;

    fn spec(side: usize) -> GridSpec {
        GridSpec::square(side, 10.0).unwrap()
    }

    fn pmap(side: usize, f: impl Fn(usize, usize) -> f64) -> ProbabilityMap {
        ProbabilityMap::new(
            spec(side),
            Array2::from_shape_fn((side, side), |(r, c)| f(r, c)),
            Provenance::Fused,
        )
        .unwrap()
    }

    #[test]
    fn probability_maps_reject_out_of_range_values() {
        let bad = Array2::from_elem((4, 4), 1.5);
        assert!(ProbabilityMap::new(spec(4), bad, Provenance::Fused).is_err());
    }

    #[test]
    fn single_patch_peaks_at_center() {
        let patch = PatchSpec {
            patch_size: 32,
            stride: 8,
        };
        let map = merge_patch_probs(&[(0, 0, 1.0)], &spec(64), &patch).unwrap();
        // Full weight inside the kernel footprint, zero outside.
        assert_eq!(map.values()[[16, 16]], 1.0);
        assert_eq!(map.values()[[40, 40]], 0.0);
        assert!(map.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let covered = map.values().iter().filter(|&&v| v > 0.0).count();
        assert_eq!(covered, 20 * 20);
    }

    #[test]
    fn constant_patch_probabilities_merge_to_constant() {
        let patch = PatchSpec {
            patch_size: 32,
            stride: 8,
        };
        let results: Vec<(usize, usize, f64)> = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i * 8, j * 8, 0.7)))
            .collect();
        let map = merge_patch_probs(&results, &spec(64), &patch).unwrap();
        for &v in map.values().iter() {
            assert!(v == 0.0 || (v - 0.7).abs() < 1e-12, "value {v}");
        }
    }

    #[test]
    fn adjacent_patches_blend_monotonically() {
        let patch = PatchSpec {
            patch_size: 32,
            stride: 8,
        };
        let map = merge_patch_probs(&[(0, 0, 0.0), (0, 8, 1.0)], &spec(64), &patch).unwrap();
        // Patch centers sit at columns 15.5 and 23.5; the map must rise
        // monotonically from the P=0 center to the P=1 center.
        let row = 16;
        let mut prev = -1.0;
        for c in 15..=24 {
            let v = map.values()[[row, c]];
            assert!(v >= prev - 1e-12, "dip at column {c}: {v} < {prev}");
            prev = v;
        }
        assert!(map.values()[[row, 15]] < 0.5 && map.values()[[row, 24]] > 0.5);
    }

    fn member(mu: f64, tau: f64, side: usize, v: f64) -> EnsembleMemberMap {
        EnsembleMemberMap {
            interval_mm_yr: mu,
            offset_mm_yr: tau,
            map: pmap(side, |_, _| v),
        }
    }

    #[test]
    fn fuse_constant_members_is_identity() {
        let members: Vec<_> = [14.0, 7.0, 3.5, 1.75]
            .iter()
            .flat_map(|&mu| (0..4).map(move |k| member(mu, k as f64, 8, 0.4)))
            .collect();
        let fused = fuse_ensemble(&members).unwrap();
        assert!(fused.values().iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn fuse_single_hot_member_gives_quarter() {
        let mut members: Vec<_> = [14.0, 7.0, 3.5, 1.75]
            .iter()
            .flat_map(|&mu| (0..4).map(move |k| member(mu, k as f64, 8, 0.0)))
            .collect();
        members[5] = EnsembleMemberMap {
            interval_mm_yr: 7.0,
            offset_mm_yr: 1.0,
            map: pmap(8, |_, _| 1.0),
        };
        let fused = fuse_ensemble(&members).unwrap();
        assert!(fused.values().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn fuse_dominates_mean_of_means() {
        // max over offsets >= mean over offsets, pixelwise.
        let vals = [[0.1, 0.9, 0.3, 0.2], [0.5, 0.4, 0.8, 0.1]];
        let members: Vec<_> = (0..2)
            .flat_map(|i| {
                (0..4).map(move |k| member([14.0, 7.0][i], k as f64, 4, vals[i][k]))
            })
            .collect();
        let fused = fuse_ensemble(&members).unwrap();
        let mean_of_means: f64 = vals
            .iter()
            .map(|row| row.iter().sum::<f64>() / 4.0)
            .sum::<f64>()
            / 2.0;
        assert!(fused.values()[[0, 0]] >= mean_of_means - 1e-12);
        let expected = (0.9 + 0.8) / 2.0;
        assert!((fused.values()[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn fuse_rejects_ragged_ensembles() {
        let mut members: Vec<_> = (0..4).map(|k| member(14.0, k as f64, 4, 0.2)).collect();
        members.push(member(7.0, 0.0, 4, 0.2));
        assert!(fuse_ensemble(&members).is_err());
    }

    #[test]
    fn two_looks_average() {
        let a = pmap(6, |_, _| 0.8);
        let b = pmap(6, |_, _| 0.4);
        let out = combine_looks(&[(Pass::Ascending, a.clone()), (Pass::Descending, b.clone())])
            .unwrap();
        assert!((out.values()[[0, 0]] - 0.6).abs() < 1e-12);
        // Symmetric in its arguments.
        let swapped =
            combine_looks(&[(Pass::Descending, b), (Pass::Ascending, a)]).unwrap();
        assert_eq!(out.values(), swapped.values());
    }

    #[test]
    fn four_looks_take_best_pair_average() {
        let looks = vec![
            (Pass::Ascending, pmap(4, |_, _| 0.9)),
            (Pass::Ascending, pmap(4, |_, _| 0.1)),
            (Pass::Descending, pmap(4, |_, _| 0.9)),
            (Pass::Descending, pmap(4, |_, _| 0.1)),
        ];
        let out = combine_looks(&looks).unwrap();
        // Pair means are {0.9, 0.5, 0.5, 0.1}.
        assert!((out.values()[[0, 0]] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn one_look_passes_through_and_three_fail() {
        let a = pmap(4, |r, c| (r + c) as f64 / 10.0);
        let out = combine_looks(&[(Pass::Ascending, a.clone())]).unwrap();
        assert_eq!(out.values(), a.values());
        let three = vec![
            (Pass::Ascending, a.clone()),
            (Pass::Ascending, a.clone()),
            (Pass::Descending, a),
        ];
        assert!(combine_looks(&three).is_err());
    }

    #[test]
    fn tile_positions_match_overlap_arithmetic() {
        // 5000-pixel axis, 2500 tiles, 224 overlap: starts 0, 2276, 2500.
        assert_eq!(tile_positions(5000, 2500, 224), vec![0, 2276, 2500]);
        assert_eq!(tile_positions(2000, 2500, 224), vec![0]);
        assert_eq!(tile_positions(2500, 2500, 224), vec![0]);
    }

    #[test]
    fn small_map_is_single_tile() {
        let field = SparseVelocityField::from_values(spec(64), Array2::from_elem((64, 64), 1.0))
            .unwrap();
        let tiles = tile_map(&field, 512, 224).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].field.spec().shape(), (64, 64));
    }

    #[test]
    fn tiles_cover_and_mosaic_recovers_agreeing_values() {
        let (h, w) = (96usize, 64usize);
        let base = Array2::from_shape_fn((h, w), |(r, c)| (r as f64 * 0.1 + c as f64 * 0.03).sin().abs());
        let field = SparseVelocityField::from_values(
            GridSpec::new(w, h, 10.0, 0.0, h as f64 * 10.0).unwrap(),
            base.clone(),
        )
        .unwrap();
        let tiles = tile_map(&field, 48, 16).unwrap();
        assert!(tiles.len() > 1);
        let pieces: Vec<(usize, usize, Array2<f64>)> = tiles
            .iter()
            .map(|t| (t.row0, t.col0, t.field.values().clone()))
            .collect();
        let back = mosaic(&pieces, (h, w));
        for (a, b) in back.iter().zip(base.iter()) {
            assert!((a - b).abs() < 1e-6, "seam artifact: {a} vs {b}");
        }
    }

    #[test]
    fn empty_map_has_no_detections() {
        let map = pmap(32, |_, _| 0.0);
        assert!(extract_detections(&map, &[0.5, 0.75, 0.9]).is_empty());
    }

    #[test]
    fn block_detection_has_expected_area_and_levels() {
        let map = pmap(64, |r, c| {
            if (20..30).contains(&r) && (40..50).contains(&c) {
                0.8
            } else {
                0.0
            }
        });
        let detections = extract_detections(&map, &[0.5, 0.75, 0.9]);
        assert_eq!(detections.len(), 2);
        for d in &detections {
            assert!((d.area_km2 - 0.01).abs() < 1e-12, "area {}", d.area_km2);
            assert!((d.max_probability - 0.8).abs() < 1e-12);
            assert!(d.threshold_level < 0.9);
            // Centroid at the block center.
            let (e, n) = (d.centroid_m.0, d.centroid_m.1);
            assert!((e - 450.0).abs() < 1e-9, "easting {e}");
            assert!((n - (640.0 - 250.0)).abs() < 1e-9, "northing {n}");
        }
    }

    #[test]
    fn separated_blocks_are_distinct_detections() {
        let map = pmap(64, |r, c| {
            if r < 4 && c < 4 || r > 50 && c > 50 {
                0.95
            } else {
                0.0
            }
        });
        let detections = extract_detections(&map, &[0.9]);
        assert_eq!(detections.len(), 2);
    }

    #[test]
    fn detection_counts_nest_across_thresholds() {
        let map = pmap(48, |r, c| {
            let d2 = (r as f64 - 24.0).powi(2) + (c as f64 - 24.0).powi(2);
            (-d2 / 100.0).exp()
        });
        let detections = extract_detections(&map, &[0.5, 0.75, 0.9]);
        let count = |level: f64| {
            detections
                .iter()
                .filter(|d| d.threshold_level == level)
                .count()
        };
        assert!(count(0.9) <= count(0.75) && count(0.75) <= count(0.5));
    }

    #[test]
    fn detect_smoke_runs_and_is_deterministic() {
        // Plumbing test with an untrained tiny model on a small map.
        let arch = CnnArch {
            input_size: 32,
            channels: vec![4, 8],
        };
        let model = CnnModel::new(arch, 3).unwrap();
        let opts = DetectOptions {
            tile: 48,
            patch: PatchSpec {
                patch_size: 32,
                stride: 8,
            },
            wrap: WrapConfig {
                intervals_mm_yr: vec![14.0, 7.0],
                offsets_per_interval: 2,
            },
            ..DetectOptions::default()
        };
        let values = Array2::from_shape_fn((64, 64), |(r, c)| {
            if (r * 7 + c * 3) % 5 == 0 {
                (r as f64 * 0.2) - (c as f64 * 0.1)
            } else {
                f64::NAN
            }
        });
        let field = SparseVelocityField::from_values(spec(64), values).unwrap();
        let looks = vec![(Pass::Ascending, field)];
        let out1 = detect(&looks, &model, &opts).unwrap();
        let out2 = detect(&looks, &model, &opts).unwrap();
        assert_eq!(out1.probability.values(), out2.probability.values());
        assert_eq!(out1.detections.len(), out2.detections.len());
        assert!(out1
            .probability
            .values()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn detect_rejects_model_patch_mismatch() {
        let arch = CnnArch {
            input_size: 32,
            channels: vec![4],
        };
        let model = CnnModel::new(arch, 0).unwrap();
        let opts = DetectOptions::default(); // patch 224
        let field = SparseVelocityField::from_values(spec(64), Array2::from_elem((64, 64), 1.0))
            .unwrap();
        assert!(detect(&[(Pass::Ascending, field)], &model, &opts).is_err());
    }
}
