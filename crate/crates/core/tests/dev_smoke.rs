//! Development-scale dry run of the interpolation-variant comparison:
//! smaller grids, fewer scenes, quicker training, scenes cached on disk so
//! hyperparameter sweeps skip regeneration. Ignored by default; run with
//! `cargo test --test dev_smoke -- --ignored --nocapture`.

use ndarray::Array2;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;
use veldt_core::classifier::{train, CnnArch, PatchDataset, TrainConfig};
use veldt_core::dataset::{is_positive, scene_to_patch, InputVariant, Metrics};
use veldt_core::grid::GridSpec;
use veldt_core::synth::{SceneGenerator, SynthConfig};

const SIDE: usize = 128;
const N_PER_CLASS: usize = 150;
const N_EVAL_PER_CLASS: usize = 30;
const MU: f64 = 3.5;

fn cache_path() -> PathBuf {
    PathBuf::from("/tmp/veldt_smoke_cache.bin")
}

/// Scenes flattened as [variant][index] -> SIDE*SIDE u8, labels appended.
fn load_or_generate() -> (Vec<[Array2<u8>; 3]>, Vec<bool>) {
    let total = 2 * N_PER_CLASS;
    let path = cache_path();
    let n_bytes = total * 3 * SIDE * SIDE + total;
    if let Ok(bytes) = fs::read(&path) {
        if bytes.len() == n_bytes {
            let mut patches = Vec::with_capacity(total);
            let mut labels = Vec::with_capacity(total);
            for i in 0..total {
                let mut triple = Vec::new();
                for v in 0..3 {
                    let off = (i * 3 + v) * SIDE * SIDE;
                    triple.push(
                        Array2::from_shape_vec(
                            (SIDE, SIDE),
                            bytes[off..off + SIDE * SIDE].to_vec(),
                        )
                        .unwrap(),
                    );
                }
                patches.push([
                    triple[0].clone(),
                    triple[1].clone(),
                    triple[2].clone(),
                ]);
                labels.push(bytes[total * 3 * SIDE * SIDE + i] != 0);
            }
            println!("loaded {} cached scenes", total);
            return (patches, labels);
        }
    }

    let grid = GridSpec::square(SIDE, 10.0).unwrap();
    let mut config = SynthConfig::point_defaults(grid);
    config.source_margin_px = 24;
    let generator = SceneGenerator::new(config, 20260809).unwrap();
    let t0 = Instant::now();
    let mut patches = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for index in 0..total as u64 {
        let (scene, _) = generator.generate(index).unwrap();
        patches.push([
            scene_to_patch(&scene, InputVariant::Sparse, MU, 0.0, SIDE).unwrap(),
            scene_to_patch(&scene, InputVariant::Dt, MU, 0.0, SIDE).unwrap(),
            scene_to_patch(&scene, InputVariant::Mc, MU, 0.0, SIDE).unwrap(),
        ]);
        labels.push(is_positive(&scene));
        if index % 100 == 99 {
            println!("generated {} in {:.0} s", index + 1, t0.elapsed().as_secs_f64());
        }
    }
    let mut bytes = Vec::with_capacity(n_bytes);
    for triple in &patches {
        for v in triple {
            bytes.extend_from_slice(v.as_slice().unwrap());
        }
    }
    bytes.extend(labels.iter().map(|&b| b as u8));
    fs::write(&path, bytes).unwrap();
    println!("generation: {:.0} s (cached)", t0.elapsed().as_secs_f64());
    (patches, labels)
}

fn run_variant(
    patches: &[[Array2<u8>; 3]],
    labels: &[bool],
    vi: usize,
    config: &TrainConfig,
) -> (Metrics, Vec<f64>) {
    let total = patches.len();
    let n_train = total - 2 * N_EVAL_PER_CLASS;
    let mut ds = PatchDataset::default();
    for i in 0..n_train {
        ds.push(patches[i][vi].clone(), labels[i]);
    }
    let arch = CnnArch {
        input_size: SIDE,
        channels: vec![8, 16, 32],
    };
    let model = train(arch, &ds, config).unwrap();
    let mut metrics = Metrics::default();
    for i in n_train..total {
        let p = model.predict(&patches[i][vi]).unwrap();
        metrics.record(p > 0.5, labels[i]);
    }
    (metrics, model.meta.loss_curve)
}

#[test]
#[ignore]
fn smoke_variant_comparison() {
    let (patches, labels) = load_or_generate();
    for (lr, epochs, batch) in [(0.1, 30, 8), (0.2, 30, 8), (0.1, 60, 8)] {
        println!("=== lr {lr}, epochs {epochs}, batch {batch}");
        for (vi, variant) in InputVariant::all().iter().enumerate() {
            let config = TrainConfig {
                epochs,
                learning_rate: lr,
                batch_size: batch,
                seed: 7,
                ..TrainConfig::default()
            };
            let t = Instant::now();
            let (metrics, curve) = run_variant(&patches, &labels, vi, &config);
            let show: Vec<String> = curve
                .iter()
                .step_by((curve.len() / 8).max(1))
                .map(|l| format!("{l:.3}"))
                .collect();
            println!(
                "{}: acc {:.1}% fpr {:.1}% recall {:.1}% ({:.0} s, loss {:?})",
                variant.name(),
                100.0 * metrics.accuracy(),
                100.0 * metrics.false_positive_rate(),
                100.0 * metrics.recall(),
                t.elapsed().as_secs_f64(),
                show,
            );
        }
    }
}
