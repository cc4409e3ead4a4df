//! Glue between synthetic scenes and classifier training: wrapped
//! grayscale patch construction for each input variant, plus the
//! confusion-matrix metrics used when comparing variants.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::grid::{to_grayscale, DenseVelocityGrid};
use crate::synth::{SceneLabel, SyntheticScene};
use crate::wrapping::wrap;
use crate::{Error, Result};

/// Which field of a scene feeds the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputVariant {
    Sparse,
    Dt,
    Mc,
}

impl InputVariant {
    pub fn all() -> [InputVariant; 3] {
        [InputVariant::Sparse, InputVariant::Dt, InputVariant::Mc]
    }

    pub fn name(&self) -> &'static str {
        match self {
            InputVariant::Sparse => "sparse",
            InputVariant::Dt => "dt",
            InputVariant::Mc => "mc",
        }
    }
}

/// Central crop of a square-ish array; the source must be at least `size`
/// in both dimensions.
pub fn center_crop(pixels: &Array2<u8>, size: usize) -> Result<Array2<u8>> {
    let (h, w) = pixels.dim();
    if h < size || w < size {
        return Err(Error::InvalidArgument(format!(
            "cannot crop {h}x{w} to {size}"
        )));
    }
    let r0 = (h - size) / 2;
    let c0 = (w - size) / 2;
    Ok(pixels
        .slice(ndarray::s![r0..r0 + size, c0..c0 + size])
        .to_owned())
}

/// Wrapped grayscale image of one scene variant, cropped to `crop` pixels.
/// Missing cells of the sparse variant become black pixels.
pub fn scene_to_patch(
    scene: &SyntheticScene,
    variant: InputVariant,
    mu: f64,
    offset: f64,
    crop: usize,
) -> Result<Array2<u8>> {
    let pixels = match variant {
        InputVariant::Sparse => {
            let mut pixels = Array2::<u8>::zeros(scene.sparse.spec().shape());
            for (r, c, v) in scene.sparse.iter_observed() {
                let wrapped = (v + offset).rem_euclid(mu);
                let wrapped = if wrapped >= mu { 0.0 } else { wrapped };
                pixels[[r, c]] = ((wrapped / mu * 256.0).floor() as i64).clamp(0, 255) as u8;
            }
            pixels
        }
        InputVariant::Dt => grayscale_of(scene.interpolated_dt.as_ref(), "dt", mu, offset)?,
        InputVariant::Mc => grayscale_of(scene.interpolated_mc.as_ref(), "mc", mu, offset)?,
    };
    center_crop(&pixels, crop)
}

fn grayscale_of(
    grid: Option<&DenseVelocityGrid>,
    which: &str,
    mu: f64,
    offset: f64,
) -> Result<Array2<u8>> {
    let grid = grid.ok_or_else(|| {
        Error::InvalidArgument(format!("scene carries no {which} interpolation"))
    })?;
    let wrapped = wrap(grid, mu, offset)?;
    Ok(to_grayscale(&wrapped, mu)?.pixels().clone())
}

pub fn is_positive(scene: &SyntheticScene) -> bool {
    scene.label == SceneLabel::Positive
}

/// Binary classification tallies at a fixed decision threshold.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Metrics {
    pub fn record(&mut self, predicted_positive: bool, actual_positive: bool) {
        match (predicted_positive, actual_positive) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    pub fn precision(&self) -> f64 {
        let denom = self.tp + self.fp;
        if denom == 0 {
            f64::NAN
        } else {
            self.tp as f64 / denom as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let denom = self.tp + self.fn_;
        if denom == 0 {
            f64::NAN
        } else {
            self.tp as f64 / denom as f64
        }
    }

    pub fn false_positive_rate(&self) -> f64 {
        let denom = self.fp + self.tn;
        if denom == 0 {
            f64::NAN
        } else {
            self.fp as f64 / denom as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridSpec, SparseVelocityField};
    use crate::interp::McParams;
    use crate::synth::{compose_scene, DeformationClass, InterpVariants};
    use crate::interp::NoiseStats;

    fn tiny_scene() -> SyntheticScene {
        let spec = GridSpec::square(16, 10.0).unwrap();
        let d = DenseVelocityGrid::new(spec, Array2::zeros((16, 16))).unwrap();
        let t = DenseVelocityGrid::new(
            spec,
            Array2::from_shape_fn((16, 16), |(r, c)| (r as f64 - c as f64) * 0.5),
        )
        .unwrap();
        let layout = Array2::from_shape_fn((16, 16), |(r, c)| (r + c) % 2 == 0);
        let noise = NoiseStats {
            noise_map: Array2::from_elem((16, 16), f64::NAN),
            impulse_rate: 0.0,
            amplitude_samples: vec![],
        };
        compose_scene(
            d,
            t,
            DeformationClass::Point,
            &layout,
            &noise,
            InterpVariants { dt: true, mc: false },
            &McParams::default(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn center_crop_takes_the_middle() {
        let arr = Array2::from_shape_fn((6, 8), |(r, c)| (r * 8 + c) as u8);
        let crop = center_crop(&arr, 4).unwrap();
        assert_eq!(crop.dim(), (4, 4));
        assert_eq!(crop[[0, 0]], arr[[1, 2]]);
        assert!(center_crop(&arr, 7).is_err());
    }

    #[test]
    fn sparse_variant_zeroes_missing_cells() {
        let scene = tiny_scene();
        let patch = scene_to_patch(&scene, InputVariant::Sparse, 14.0, 0.0, 16).unwrap();
        for ((r, c), &px) in patch.indexed_iter() {
            if !scene.sparse.is_observed(r, c) {
                assert_eq!(px, 0, "missing cell ({r},{c}) not black");
            }
        }
    }

    #[test]
    fn dense_variants_require_their_interpolation() {
        let scene = tiny_scene();
        assert!(scene_to_patch(&scene, InputVariant::Dt, 14.0, 0.0, 16).is_ok());
        assert!(scene_to_patch(&scene, InputVariant::Mc, 14.0, 0.0, 16).is_err());
    }

    #[test]
    fn metrics_accumulate_confusion_counts() {
        let mut m = Metrics::default();
        m.record(true, true);
        m.record(true, false);
        m.record(false, false);
        m.record(false, false);
        m.record(false, true);
        assert_eq!(m.total(), 5);
        assert!((m.accuracy() - 3.0 / 5.0).abs() < 1e-12);
        assert!((m.false_positive_rate() - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.precision() - 0.5).abs() < 1e-12);
        assert!((m.recall() - 0.5).abs() < 1e-12);
    }
}
