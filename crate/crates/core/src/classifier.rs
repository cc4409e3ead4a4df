//! Patch-level binary deformation classifier: overlapping patch extraction
//! and a small convolutional network trained from scratch on wrapped
//! grayscale patches.
//!
//! The network is three conv blocks (3x3 kernels, ReLU, 2x2 max-pool) into
//! global average pooling and a single logit. All arithmetic is f64 so the
//! analytic gradients can be checked against central differences tightly;
//! weights are quantized to f32 on save, and after training, so a reloaded
//! model predicts identically.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

use crate::grid::Image8;
use crate::{Error, Result};

/// Patch geometry: 224-pixel patches shifted by patch_size / 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub stride: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_size: 224,
            stride: 28,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument(
                "patch size and stride must be positive".into(),
            ));
        }
        if self.patch_size % self.stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "stride {} must divide patch size {}",
                self.stride, self.patch_size
            )));
        }
        Ok(())
    }
}

/// One extracted patch and its top-left corner in the source image.
#[derive(Debug, Clone)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub pixels: Array2<u8>,
}

fn reflect_index(i: isize, n: isize) -> usize {
    let mut i = i;
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

/// Reflect-pads an image up to at least (th, tw).
fn pad_to(pixels: &Array2<u8>, th: usize, tw: usize) -> Array2<u8> {
    let (h, w) = pixels.dim();
    if h >= th && w >= tw {
        return pixels.clone();
    }
    let (nh, nw) = (h.max(th), w.max(tw));
    Array2::from_shape_fn((nh, nw), |(r, c)| {
        pixels[[reflect_index(r as isize, h as isize), reflect_index(c as isize, w as isize)]]
    })
}

fn axis_positions(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut positions: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&p| p + patch <= len)
        .collect();
    let last = len - patch;
    if positions.last() != Some(&last) {
        positions.push(last);
    }
    positions
}

/// Extracts overlapping patches at every stride multiple, with the final
/// row/column clamped so the image edge is always covered. Images smaller
/// than the patch are reflect-padded first.
pub fn extract_patches(image: &Image8, spec: &PatchSpec) -> Result<Vec<Patch>> {
    spec.validate()?;
    let pixels = pad_to(image.pixels(), spec.patch_size, spec.patch_size);
    let (h, w) = pixels.dim();
    let rows = axis_positions(h, spec.patch_size, spec.stride);
    let cols = axis_positions(w, spec.patch_size, spec.stride);
    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    for &row in &rows {
        for &col in &cols {
            let view = pixels.slice(ndarray::s![
                row..row + spec.patch_size,
                col..col + spec.patch_size
            ]);
            patches.push(Patch {
                row,
                col,
                pixels: view.to_owned(),
            });
        }
    }
    Ok(patches)
}

/// Network shape: square single-channel input and the output channels of
/// each conv block (3x3 kernels, 2x2 max-pool after each block).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    pub input_size: usize,
    pub channels: Vec<usize>,
}

impl Default for CnnArch {
    fn default() -> Self {
        CnnArch {
            input_size: 224,
            channels: vec![8, 16, 32],
        }
    }
}

impl CnnArch {
    pub fn n_params(&self) -> usize {
        let mut n = 0;
        let mut in_ch = 1;
        for &oc in &self.channels {
            n += oc * in_ch * 9 + oc;
            in_ch = oc;
        }
        n + in_ch + 1
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Model("network needs at least one conv block".into()));
        }
        let mut side = self.input_size;
        for _ in &self.channels {
            if side < 2 {
                return Err(Error::Model(format!(
                    "input size {} too small for {} blocks",
                    self.input_size,
                    self.channels.len()
                )));
            }
            side /= 2;
        }
        Ok(())
    }
}

/// Training hyperparameters and augmentation switches.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment_flips: bool,
    pub augment_rotations: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            augment_flips: true,
            augment_rotations: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Labeled patches ready for training; pixels are wrapped grayscale.
#[derive(Debug, Clone, Default)]
pub struct PatchDataset {
    pub items: Vec<(Array2<u8>, bool)>,
}

impl PatchDataset {
    pub fn push(&mut self, pixels: Array2<u8>, positive: bool) {
        self.items.push((pixels, positive));
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub loss_curve: Vec<f64>,
}

/// Trained classifier: architecture, flat weight vector and training
/// provenance.
#[derive(Debug, Clone)]
pub struct CnnModel {
    arch: CnnArch,
    weights: Vec<f64>,
    pub meta: TrainMeta,
}

/// Per-sample activation buffers, reused across forward/backward passes.
struct Workspace {
    input: Vec<f64>,
    conv: Vec<Vec<f64>>,
    pool: Vec<Vec<f64>>,
    pool_idx: Vec<Vec<u32>>,
    gap: Vec<f64>,
    scratch_a: Vec<f64>,
    scratch_b: Vec<f64>,
}

/// Side lengths entering each block plus the final (post-pool) side.
fn block_sides(arch: &CnnArch) -> Vec<usize> {
    let mut sides = vec![arch.input_size];
    for _ in &arch.channels {
        sides.push(sides.last().unwrap() / 2);
    }
    sides
}

impl Workspace {
    fn new(arch: &CnnArch) -> Self {
        let sides = block_sides(arch);
        let mut conv = Vec::new();
        let mut pool = Vec::new();
        let mut pool_idx = Vec::new();
        let mut biggest = 0;
        for (i, &oc) in arch.channels.iter().enumerate() {
            let s_in = sides[i];
            let s_out = sides[i + 1];
            conv.push(vec![0.0; oc * s_in * s_in]);
            pool.push(vec![0.0; oc * s_out * s_out]);
            pool_idx.push(vec![0; oc * s_out * s_out]);
            biggest = biggest.max(oc * s_in * s_in);
        }
        Workspace {
            input: vec![0.0; arch.input_size * arch.input_size],
            conv,
            pool,
            pool_idx,
            gap: vec![0.0; *arch.channels.last().unwrap()],
            scratch_a: vec![0.0; biggest],
            scratch_b: vec![0.0; biggest],
        }
    }
}

/// Offsets of each parameter group inside the flat weight vector.
struct Layout {
    conv_w: Vec<usize>,
    conv_b: Vec<usize>,
    dense_w: usize,
    dense_b: usize,
    total: usize,
}

fn layout(arch: &CnnArch) -> Layout {
    let mut conv_w = Vec::new();
    let mut conv_b = Vec::new();
    let mut off = 0;
    let mut in_ch = 1;
    for &oc in &arch.channels {
        conv_w.push(off);
        off += oc * in_ch * 9;
        conv_b.push(off);
        off += oc;
        in_ch = oc;
    }
    let dense_w = off;
    off += in_ch;
    let dense_b = off;
    off += 1;
    Layout {
        conv_w,
        conv_b,
        dense_w,
        dense_b,
        total: off,
    }
}

/// 3x3 same-padding convolution of one input channel accumulated into one
/// output channel; the shifted-row form keeps the inner loops contiguous.
fn conv3x3_accumulate(out: &mut [f64], inp: &[f64], w: &[f64], side: usize) {
    for ky in 0..3usize {
        for kx in 0..3usize {
            let wk = w[ky * 3 + kx];
            if wk == 0.0 {
                continue;
            }
            let dy = ky as isize - 1;
            let dx = kx as isize - 1;
            let y0 = (-dy).max(0) as usize;
            let y1 = (side as isize - dy).min(side as isize) as usize;
            let x0 = (-dx).max(0) as usize;
            let x1 = (side as isize - dx).min(side as isize) as usize;
            for y in y0..y1 {
                let src = ((y as isize + dy) as usize) * side;
                let dst = y * side;
                let out_row = &mut out[dst + x0..dst + x1];
                let in_row = &inp[(src as isize + x0 as isize + dx) as usize
                    ..(src as isize + x1 as isize + dx) as usize];
                for (o, &i) in out_row.iter_mut().zip(in_row) {
                    *o += wk * i;
                }
            }
        }
    }
}

/// Dot product with four accumulators so the reduction vectorizes while
/// staying deterministic.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn forward(arch: &CnnArch, weights: &[f64], ws: &mut Workspace) -> f64 {
    let lt = layout(arch);
    let sides = block_sides(arch);
    let mut in_ch = 1;
    for (bi, &oc) in arch.channels.iter().enumerate() {
        let side = sides[bi];
        let area = side * side;
        let conv = &mut ws.conv[bi];
        // Bias init + channel convolutions.
        for ocx in 0..oc {
            let bias = weights[lt.conv_b[bi] + ocx];
            let out = &mut conv[ocx * area..(ocx + 1) * area];
            out.fill(bias);
        }
        for ocx in 0..oc {
            for icx in 0..in_ch {
                let w = &weights[lt.conv_w[bi] + (ocx * in_ch + icx) * 9..][..9];
                let (prev, conv_out): (&[f64], &mut [f64]) = {
                    let inp: &[f64] = if bi == 0 {
                        &ws.input
                    } else {
                        // Previous pool output lives in ws.pool[bi-1]; copy
                        // the channel slice out through scratch to appease
                        // the borrow checker without cloning whole layers.
                        let src = &ws.pool[bi - 1][icx * area..(icx + 1) * area];
                        ws.scratch_a[..area].copy_from_slice(src);
                        &ws.scratch_a[..area]
                    };
                    (inp, &mut ws.conv[bi][ocx * area..(ocx + 1) * area])
                };
                conv3x3_accumulate(conv_out, prev, w, side);
            }
        }
        // ReLU.
        for v in ws.conv[bi].iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        // 2x2 max-pool with argmax bookkeeping.
        let half = sides[bi + 1];
        for ocx in 0..oc {
            let src = &ws.conv[bi][ocx * area..(ocx + 1) * area];
            let base = ocx * half * half;
            for py in 0..half {
                for px in 0..half {
                    let i00 = (2 * py) * side + 2 * px;
                    let candidates = [i00, i00 + 1, i00 + side, i00 + side + 1];
                    let mut best = candidates[0];
                    for &cand in &candidates[1..] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    ws.pool[bi][base + py * half + px] = src[best];
                    ws.pool_idx[bi][base + py * half + px] = best as u32;
                }
            }
        }
        in_ch = oc;
    }
    // Global average pool + dense logit.
    let last = arch.channels.len() - 1;
    let side = sides[last + 1];
    let area = side * side;
    for (ch, g) in ws.gap.iter_mut().enumerate() {
        let src = &ws.pool[last][ch * area..(ch + 1) * area];
        *g = src.iter().sum::<f64>() / area as f64;
    }
    let mut logit = weights[lt.dense_b];
    for (ch, &g) in ws.gap.iter().enumerate() {
        logit += weights[lt.dense_w + ch] * g;
    }
    logit
}

/// Numerically stable binary cross-entropy on the logit.
fn bce_loss(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Backpropagates the BCE gradient, accumulating parameter gradients.
/// Requires the workspace of the matching forward pass.
fn backward(arch: &CnnArch, weights: &[f64], ws: &mut Workspace, dlogit: f64, grads: &mut [f64]) {
    let lt = layout(arch);
    let sides = block_sides(arch);
    let last = arch.channels.len() - 1;
    let gap_side = sides[last + 1];
    let gap_area = gap_side * gap_side;

    grads[lt.dense_b] += dlogit;
    for (ch, &g) in ws.gap.iter().enumerate() {
        grads[lt.dense_w + ch] += dlogit * g;
    }

    // Gradient w.r.t. the last pool output, spread by the average pool.
    let n_last = arch.channels[last] * gap_area;
    ws.scratch_a[..n_last].fill(0.0);
    for ch in 0..arch.channels[last] {
        let d = dlogit * weights[lt.dense_w + ch] / gap_area as f64;
        for v in ws.scratch_a[ch * gap_area..(ch + 1) * gap_area].iter_mut() {
            *v += d;
        }
    }

    // Walk the blocks backwards; scratch_a holds d(pool output of block bi).
    for bi in (0..arch.channels.len()).rev() {
        let side = sides[bi];
        let half = sides[bi + 1];
        let area = side * side;
        let oc = arch.channels[bi];
        let in_ch = if bi == 0 { 1 } else { arch.channels[bi - 1] };

        // Un-pool into d(conv out) using the recorder argmax, then gate by
        // the ReLU activation.
        let dconv = &mut ws.scratch_b;
        dconv[..oc * area].fill(0.0);
        for ocx in 0..oc {
            let base = ocx * half * half;
            for p in 0..half * half {
                let idx = ws.pool_idx[bi][base + p] as usize;
                dconv[ocx * area + idx] += ws.scratch_a[base + p];
            }
        }
        for (d, &a) in dconv[..oc * area].iter_mut().zip(ws.conv[bi].iter()) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }

        // Weight/bias gradients and input gradient.
        let prev_area = area;
        let n_prev = in_ch * prev_area;
        ws.scratch_a[..n_prev].fill(0.0);
        for ocx in 0..oc {
            let dout = &dconv[ocx * area..(ocx + 1) * area];
            grads[lt.conv_b[bi] + ocx] += dout.iter().sum::<f64>();
            for icx in 0..in_ch {
                let inp_owned;
                let inp: &[f64] = if bi == 0 {
                    &ws.input
                } else {
                    inp_owned = ws.pool[bi - 1][icx * area..(icx + 1) * area].to_vec();
                    &inp_owned
                };
                let gw = &mut grads[lt.conv_w[bi] + (ocx * in_ch + icx) * 9..][..9];
                let w = &weights[lt.conv_w[bi] + (ocx * in_ch + icx) * 9..][..9];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let dy = ky as isize - 1;
                        let dx = kx as isize - 1;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (side as isize - dy).min(side as isize) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (side as isize - dx).min(side as isize) as usize;
                        let mut acc = 0.0;
                        let wk = w[ky * 3 + kx];
                        for y in y0..y1 {
                            let src = ((y as isize + dy) as usize * side) as isize;
                            let dst = y * side;
                            let drow = &dout[dst + x0..dst + x1];
                            let irow = &inp[(src + x0 as isize + dx) as usize
                                ..(src + x1 as isize + dx) as usize];
                            acc += dot4(drow, irow);
                            // d(input): transposed convolution.
                            let din = &mut ws.scratch_a[icx * prev_area..][(src + x0 as isize + dx) as usize
                                ..(src + x1 as isize + dx) as usize];
                            for (di, &dv) in din.iter_mut().zip(drow) {
                                *di += wk * dv;
                            }
                        }
                        gw[ky * 3 + kx] += acc;
                    }
                }
            }
        }
        // scratch_a now carries d(pool output of block bi-1) for the next
        // round (or d(input), discarded, at the first block).
    }
}

fn he_init(arch: &CnnArch, seed: u64) -> Vec<f64> {
    let lt = layout(arch);
    let mut weights = vec![0.0f64; lt.total];
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut in_ch = 1;
    for (bi, &oc) in arch.channels.iter().enumerate() {
        let std = (2.0 / (in_ch as f64 * 9.0)).sqrt();
        for w in weights[lt.conv_w[bi]..lt.conv_w[bi] + oc * in_ch * 9].iter_mut() {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
        in_ch = oc;
    }
    let std = (1.0 / in_ch as f64).sqrt();
    for w in weights[lt.dense_w..lt.dense_w + in_ch].iter_mut() {
        *w = std * rng.sample::<f64, _>(StandardNormal);
    }
    weights
}

/// Dihedral augmentation of a square u8 patch.
fn augment(pixels: &Array2<u8>, rot: u8, flip: bool) -> Array2<u8> {
    let n = pixels.nrows();
    Array2::from_shape_fn((n, n), |(r, c)| {
        let (mut rr, mut cc) = (r, c);
        if flip {
            cc = n - 1 - cc;
        }
        let (rr2, cc2) = match rot % 4 {
            0 => (rr, cc),
            1 => (n - 1 - cc, rr),
            2 => (n - 1 - rr, n - 1 - cc),
            _ => (cc, n - 1 - rr),
        };
        rr = rr2;
        cc = cc2;
        pixels[[rr, cc]]
    })
}

/// Scales to [0, 1] and removes the patch mean: the mean gray level only
/// encodes the arbitrary wrap reference, not deformation.
fn load_input(ws: &mut Workspace, pixels: &Array2<u8>) {
    let mut sum = 0.0f64;
    for &src in pixels.iter() {
        sum += src as f64;
    }
    let mean = sum / pixels.len() as f64 / 255.0;
    for (dst, &src) in ws.input.iter_mut().zip(pixels.iter()) {
        *dst = src as f64 / 255.0 - mean;
    }
}

/// FNV-style hash of the activation pattern (ReLU gates + pool argmaxes)
/// of the most recent forward pass.
fn mask_signature(ws: &Workspace) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |byte: u64| {
        h ^= byte;
        h = h.wrapping_mul(0x1000_0000_01b3);
    };
    for conv in &ws.conv {
        for chunk in conv.chunks(64) {
            let mut bits = 0u64;
            for (k, &v) in chunk.iter().enumerate() {
                if v > 0.0 {
                    bits |= 1 << k;
                }
            }
            feed(bits);
        }
    }
    for idx in &ws.pool_idx {
        for &i in idx {
            feed(i as u64);
        }
    }
    h
}

impl CnnModel {
    /// Freshly initialized model (He-style weights, zero biases).
    pub fn new(arch: CnnArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let weights = he_init(&arch, seed);
        Ok(CnnModel {
            arch,
            weights,
            meta: TrainMeta {
                seed,
                ..TrainMeta::default()
            },
        })
    }

    pub fn arch(&self) -> &CnnArch {
        &self.arch
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    /// Deformation probability for one patch.
    pub fn predict(&self, patch: &Array2<u8>) -> Result<f64> {
        let n = self.arch.input_size;
        if patch.dim() != (n, n) {
            return Err(Error::Model(format!(
                "patch {:?} does not match model input {n}x{n}",
                patch.dim()
            )));
        }
        let mut ws = Workspace::new(&self.arch);
        load_input(&mut ws, patch);
        Ok(sigmoid(forward(&self.arch, &self.weights, &mut ws)))
    }

    /// Probabilities for many patches; the model is shared read-only.
    pub fn predict_batch(&self, patches: &[Array2<u8>]) -> Result<Vec<f64>> {
        patches
            .par_iter()
            .map_init(
                || Workspace::new(&self.arch),
                |ws, patch| {
                    let n = self.arch.input_size;
                    if patch.dim() != (n, n) {
                        return Err(Error::Model(format!(
                            "patch {:?} does not match model input {n}x{n}",
                            patch.dim()
                        )));
                    }
                    load_input(ws, patch);
                    Ok(sigmoid(forward(&self.arch, &self.weights, ws)))
                },
            )
            .collect()
    }

    /// Compares analytic gradients with central differences on `n_checks`
    /// randomly chosen parameters; returns the maximum relative error.
    ///
    /// Parameters whose +/- epsilon probes flip a ReLU gate or a pool
    /// argmax are skipped: across such a kink the central difference no
    /// longer estimates a derivative. With the activation pattern fixed
    /// the logit is affine in any single weight, so the comparison is
    /// exact up to the smooth cross-entropy curvature.
    pub fn grad_check(
        &self,
        patch: &Array2<u8>,
        positive: bool,
        epsilon: f64,
        n_checks: usize,
    ) -> Result<f64> {
        let n = self.arch.input_size;
        if patch.dim() != (n, n) {
            return Err(Error::Model("patch size mismatch".into()));
        }
        let label = if positive { 1.0 } else { 0.0 };
        let mut ws = Workspace::new(&self.arch);
        load_input(&mut ws, patch);
        let logit = forward(&self.arch, &self.weights, &mut ws);
        let sig0 = mask_signature(&ws);
        let mut analytic = vec![0.0; self.weights.len()];
        backward(
            &self.arch,
            &self.weights,
            &mut ws,
            sigmoid(logit) - label,
            &mut analytic,
        );

        let mut rng = ChaCha12Rng::seed_from_u64(0x5EED);
        let mut indices: Vec<usize> = (0..self.weights.len()).collect();
        indices.shuffle(&mut rng);

        let mut weights = self.weights.clone();
        let mut worst = 0.0f64;
        let mut checked = 0;
        for &i in &indices {
            if checked >= n_checks {
                break;
            }
            let orig = weights[i];
            weights[i] = orig + epsilon;
            let lp = bce_loss(forward(&self.arch, &weights, &mut ws), label);
            let sig_plus = mask_signature(&ws);
            weights[i] = orig - epsilon;
            let lm = bce_loss(forward(&self.arch, &weights, &mut ws), label);
            let sig_minus = mask_signature(&ws);
            weights[i] = orig;
            if sig_plus != sig0 || sig_minus != sig0 {
                continue;
            }
            checked += 1;
            let fd = (lp - lm) / (2.0 * epsilon);
            let denom = analytic[i].abs().max(fd.abs());
            if denom > 1e-10 {
                worst = worst.max((analytic[i] - fd).abs() / denom);
            }
        }
        Ok(worst)
    }

    /// Writes `<base>.json` (descriptor + checksum) and `<base>.weights`
    /// (little-endian f32 blob).
    pub fn save(&self, base: &Path) -> Result<()> {
        let mut blob = Vec::with_capacity(self.weights.len() * 4);
        for &w in &self.weights {
            blob.extend_from_slice(&(w as f32).to_le_bytes());
        }
        let checksum = hex_digest(&blob);
        let descriptor = ModelDescriptor {
            arch: self.arch.clone(),
            meta: self.meta.clone(),
            checksum,
            n_weights: self.weights.len(),
        };
        let jp = json_path(base);
        fs::write(
            &jp,
            serde_json::to_string_pretty(&descriptor).expect("descriptor serializes"),
        )
        .map_err(|e| Error::io(&jp, e))?;
        let wp = weights_path(base);
        fs::write(&wp, blob).map_err(|e| Error::io(&wp, e))
    }

    /// Loads a model saved by [`CnnModel::save`], verifying the checksum.
    pub fn load(base: &Path) -> Result<Self> {
        let jp = json_path(base);
        let descriptor: ModelDescriptor =
            serde_json::from_str(&fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?)
                .map_err(|e| Error::Format {
                    path: jp.clone(),
                    message: e.to_string(),
                })?;
        let wp = weights_path(base);
        let blob = fs::read(&wp).map_err(|e| Error::io(&wp, e))?;
        if blob.len() != descriptor.n_weights * 4 {
            return Err(Error::Format {
                path: wp,
                message: format!(
                    "expected {} weight bytes, found {}",
                    descriptor.n_weights * 4,
                    blob.len()
                ),
            });
        }
        if hex_digest(&blob) != descriptor.checksum {
            return Err(Error::Format {
                path: wp,
                message: "weight blob checksum mismatch".into(),
            });
        }
        descriptor.arch.validate()?;
        let weights = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(CnnModel {
            arch: descriptor.arch,
            weights,
            meta: descriptor.meta,
        })
    }

    /// Rounds weights through f32 so in-memory predictions match a safe
    /// load of the saved file exactly.
    fn quantize_weights(&mut self) {
        for w in &mut self.weights {
            *w = *w as f32 as f64;
        }
    }
}

fn json_path(base: &Path) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn weights_path(base: &Path) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".weights");
    PathBuf::from(s)
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct ModelDescriptor {
    arch: CnnArch,
    meta: TrainMeta,
    checksum: String,
    n_weights: usize,
}

/// Trains the classifier with mini-batch SGD + momentum on binary
/// cross-entropy. Deterministic for a fixed config: batch order, init and
/// augmentation all derive from the seed, and gradient reduction follows
/// batch index order.
pub fn train(arch: CnnArch, dataset: &PatchDataset, config: &TrainConfig) -> Result<CnnModel> {
    config.validate()?;
    arch.validate()?;
    if dataset.items.is_empty() {
        return Err(Error::NoData("empty training dataset".into()));
    }
    let has_pos = dataset.items.iter().any(|(_, y)| *y);
    let has_neg = dataset.items.iter().any(|(_, y)| !*y);
    if !has_pos || !has_neg {
        return Err(Error::NoData("training data needs both classes".into()));
    }
    for (pixels, _) in &dataset.items {
        if pixels.dim() != (arch.input_size, arch.input_size) {
            return Err(Error::Model(format!(
                "training patch {:?} does not match input size {}",
                pixels.dim(),
                arch.input_size
            )));
        }
    }

    let mut model = CnnModel::new(arch.clone(), config.seed)?;
    let n_params = model.weights.len();
    let mut velocity = vec![0.0f64; n_params];
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let mut order: Vec<usize> = (0..dataset.items.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        // Per-sample augmentation choices drawn up front to keep the
        // parallel gradient evaluation deterministic.
        let augs: Vec<(u8, bool)> = order
            .iter()
            .map(|_| {
                let rot = if config.augment_rotations {
                    rng.gen_range(0..4u8)
                } else {
                    0
                };
                let flip = config.augment_flips && rng.gen::<bool>();
                (rot, flip)
            })
            .collect();

        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let batch_aug = &augs[batch_no * config.batch_size..][..batch.len()];
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .zip(batch_aug.par_iter())
                .map_init(
                    || Workspace::new(&arch),
                    |ws, (&idx, &(rot, flip))| {
                        let (pixels, positive) = &dataset.items[idx];
                        let view;
                        let pixels = if rot == 0 && !flip {
                            pixels
                        } else {
                            view = augment(pixels, rot, flip);
                            &view
                        };
                        load_input(ws, pixels);
                        let logit = forward(&arch, &model.weights, ws);
                        let label = if *positive { 1.0 } else { 0.0 };
                        let mut grad = vec![0.0; n_params];
                        backward(&arch, &model.weights, ws, sigmoid(logit) - label, &mut grad);
                        (bce_loss(logit, label), grad)
                    },
                )
                .collect();

            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            let mut grad_total = vec![0.0f64; n_params];
            for (loss, grad) in &results {
                batch_loss += loss;
                for (g, &gi) in grad_total.iter_mut().zip(grad) {
                    *g += gi * scale;
                }
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss in epoch {epoch}, batch {batch_no}"
                )));
            }
            epoch_loss += batch_loss * batch.len() as f64;
            for ((w, v), &g) in model.weights.iter_mut().zip(&mut velocity).zip(&grad_total) {
                *v = config.momentum * *v - config.learning_rate * g;
                *w += *v;
            }
        }
        loss_curve.push(epoch_loss / dataset.items.len() as f64);
    }

    model.quantize_weights();
    model.meta = TrainMeta {
        seed: config.seed,
        epochs: config.epochs,
        loss_curve,
    };
    Ok(model)
}
