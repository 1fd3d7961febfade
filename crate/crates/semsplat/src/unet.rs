//! Sparse 3D U-Net over occupied voxels: 3×3×3 submanifold convolutions
//! (outputs only at occupied sites), two stride-2 max-pool levels by
//! coordinate halving, skip concatenations, and a fusion head producing the
//! final per-point deformation offsets.

use crate::error::{Error, Result};
use crate::mlp::{MlpCache, MlpGrads, TinyMlp};
use crate::parallel::{self, Reduction};
use crate::voxel::{SparseVoxelGrid, VoxelHash};
use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const KERNEL_TAPS: usize = 27;
/// Offset index of the kernel center tap.
#[cfg(test)]
const CENTER_TAP: usize = 13;

fn tap_offset(o: usize) -> [i32; 3] {
    [(o / 9) as i32 - 1, ((o / 3) % 3) as i32 - 1, (o % 3) as i32 - 1]
}

/// One submanifold convolution layer. Kernel layout: `[tap][out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn new(in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        let lim = (6.0 / (KERNEL_TAPS * in_c) as f64).sqrt();
        ConvLayer {
            in_c,
            out_c,
            kernel: (0..KERNEL_TAPS * out_c * in_c)
                .map(|_| rng.gen_range(-lim..lim))
                .collect(),
            bias: vec![0.0; out_c],
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    #[inline]
    fn tap(&self, o: usize) -> &[f64] {
        &self.kernel[o * self.out_c * self.in_c..(o + 1) * self.out_c * self.in_c]
    }
}

/// Occupied-site topology of one resolution level.
#[derive(Debug, Clone)]
pub struct LevelTopo {
    pub coords: Vec<[i32; 3]>,
    /// `M × 27` neighbor slots, -1 where unoccupied.
    neighbors: Vec<i32>,
}

impl LevelTopo {
    fn build(coords: Vec<[i32; 3]>) -> Self {
        let hash = VoxelHash::build(&coords);
        let m = coords.len();
        let mut neighbors = vec![-1i32; m * KERNEL_TAPS];
        for (s, c) in coords.iter().enumerate() {
            for o in 0..KERNEL_TAPS {
                let d = tap_offset(o);
                let n = [c[0] + d[0], c[1] + d[1], c[2] + d[2]];
                if let Some(slot) = hash.lookup(n) {
                    neighbors[s * KERNEL_TAPS + o] = slot as i32;
                }
            }
        }
        LevelTopo { coords, neighbors }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Fine-to-coarse pooling topology (stride-2 coordinate halving).
#[derive(Debug, Clone)]
struct PoolTopo {
    /// Fine slot → coarse slot.
    parent: Vec<usize>,
    /// CSR of children per coarse slot, children ascending.
    child_offsets: Vec<usize>,
    children: Vec<u32>,
}

fn halve(c: [i32; 3]) -> [i32; 3] {
    // Arithmetic shift == floor division by 2 for negatives.
    [c[0] >> 1, c[1] >> 1, c[2] >> 1]
}

fn build_pool(fine: &LevelTopo) -> (PoolTopo, LevelTopo) {
    let mut coarse_coords: Vec<[i32; 3]> = fine.coords.iter().map(|c| halve(*c)).collect();
    coarse_coords.sort_unstable();
    coarse_coords.dedup();
    let hash = VoxelHash::build(&coarse_coords);
    let parent: Vec<usize> = fine
        .coords
        .iter()
        .map(|c| hash.lookup(halve(*c)).expect("parent present"))
        .collect();
    let mc = coarse_coords.len();
    let mut counts = vec![0usize; mc];
    for p in &parent {
        counts[*p] += 1;
    }
    let mut child_offsets = vec![0usize; mc + 1];
    for i in 0..mc {
        child_offsets[i + 1] = child_offsets[i] + counts[i];
    }
    let mut cursor = child_offsets.clone();
    let mut children = vec![0u32; fine.len()];
    for (f, p) in parent.iter().enumerate() {
        children[cursor[*p]] = f as u32;
        cursor[*p] += 1;
    }
    (
        PoolTopo {
            parent,
            child_offsets,
            children,
        },
        LevelTopo::build(coarse_coords),
    )
}

/// The two-level sparse U-Net.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUNet {
    pub enc0: ConvLayer,
    pub enc1: ConvLayer,
    pub bottleneck: ConvLayer,
    pub up1: ConvLayer,
    pub up0: ConvLayer,
}

#[derive(Debug, Clone)]
pub struct UNetConfig {
    pub channels0: usize,
    pub channels1: usize,
    /// Output feature width `F_v`.
    pub feature_width: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            channels0: 16,
            channels1: 32,
            feature_width: 16,
            seed: 0,
        }
    }
}

impl SparseUNet {
    pub fn new(in_width: usize, cfg: &UNetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c0 = cfg.channels0;
        let c1 = cfg.channels1;
        SparseUNet {
            enc0: ConvLayer::new(in_width, c0, &mut rng),
            enc1: ConvLayer::new(c0, c1, &mut rng),
            bottleneck: ConvLayer::new(c1, c1, &mut rng),
            up1: ConvLayer::new(c1 + c1, c1, &mut rng),
            up0: ConvLayer::new(c1 + c0, cfg.feature_width, &mut rng),
        }
    }

    pub fn feature_width(&self) -> usize {
        self.up0.out_c
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    fn layers(&self) -> [&ConvLayer; 5] {
        [&self.enc0, &self.enc1, &self.bottleneck, &self.up1, &self.up0]
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(&l.kernel);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for l in [
            &mut self.enc0,
            &mut self.enc1,
            &mut self.bottleneck,
            &mut self.up1,
            &mut self.up0,
        ] {
            let klen = l.kernel.len();
            l.kernel.copy_from_slice(&flat[pos..pos + klen]);
            pos += klen;
            let blen = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + blen]);
            pos += blen;
        }
        assert_eq!(pos, flat.len());
    }
}

/// Kernel and bias gradients per layer, same order as [`SparseUNet`].
pub struct UNetGrads {
    pub kernels: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl UNetGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (k, b) in self.kernels.iter().zip(self.biases.iter()) {
            out.extend_from_slice(k);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Submanifold convolution forward over one level.
pub fn conv_forward(layer: &ConvLayer, topo: &LevelTopo, input: &[f64], relu: bool) -> Vec<f64> {
    let m = topo.len();
    debug_assert_eq!(input.len(), m * layer.in_c);
    let mut out = vec![0.0; m * layer.out_c];
    let (in_c, out_c) = (layer.in_c, layer.out_c);
    parallel::for_each_chunk_mut(&mut out, out_c, |s, row| {
        row.copy_from_slice(&layer.bias);
        for o in 0..KERNEL_TAPS {
            let n = topo.neighbors[s * KERNEL_TAPS + o];
            if n < 0 {
                continue;
            }
            let src = &input[n as usize * in_c..(n as usize + 1) * in_c];
            let tap = layer.tap(o);
            for (j, rj) in row.iter_mut().enumerate() {
                let krow = &tap[j * in_c..(j + 1) * in_c];
                let mut acc = 0.0;
                for (kv, sv) in krow.iter().zip(src.iter()) {
                    acc += kv * sv;
                }
                *rj += acc;
            }
        }
        if relu {
            for rj in row.iter_mut() {
                if *rj < 0.0 {
                    *rj = 0.0;
                }
            }
        }
    });
    out
}

/// Backward of [`conv_forward`]: input gradients (gather form over mirrored
/// taps) plus kernel/bias gradients with ordered reduction.
fn conv_backward(
    layer: &ConvLayer,
    topo: &LevelTopo,
    input: &[f64],
    output_post: &[f64],
    grad_out: &[f64],
    relu: bool,
    mode: Reduction,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = topo.len();
    let (in_c, out_c) = (layer.in_c, layer.out_c);
    // ReLU mask applied once.
    let mut g_out = grad_out.to_vec();
    if relu {
        for (g, a) in g_out.iter_mut().zip(output_post.iter()) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
    }
    // Input gradients by gathering from mirrored neighbor taps.
    let mut g_in = vec![0.0; m * in_c];
    parallel::for_each_chunk_mut(&mut g_in, in_c, |s, row| {
        for o in 0..KERNEL_TAPS {
            let t = topo.neighbors[s * KERNEL_TAPS + (KERNEL_TAPS - 1 - o)];
            if t < 0 {
                continue;
            }
            let gsrc = &g_out[t as usize * out_c..(t as usize + 1) * out_c];
            let tap = layer.tap(o);
            for (j, gj) in gsrc.iter().enumerate() {
                if *gj != 0.0 {
                    let krow = &tap[j * in_c..(j + 1) * in_c];
                    for (rv, kv) in row.iter_mut().zip(krow.iter()) {
                        *rv += gj * kv;
                    }
                }
            }
        }
    });
    // Kernel + bias gradients.
    let flat = parallel::reduce_indexed(
        m,
        mode,
        || vec![0.0; KERNEL_TAPS * out_c * in_c + out_c],
        |t| {
            let mut part = vec![0.0; KERNEL_TAPS * out_c * in_c + out_c];
            let g = &g_out[t * out_c..(t + 1) * out_c];
            for o in 0..KERNEL_TAPS {
                let n = topo.neighbors[t * KERNEL_TAPS + o];
                if n < 0 {
                    continue;
                }
                let src = &input[n as usize * in_c..(n as usize + 1) * in_c];
                let base = o * out_c * in_c;
                for (j, gj) in g.iter().enumerate() {
                    if *gj != 0.0 {
                        let row = &mut part[base + j * in_c..base + (j + 1) * in_c];
                        for (rv, sv) in row.iter_mut().zip(src.iter()) {
                            *rv += gj * sv;
                        }
                    }
                }
            }
            for (j, gj) in g.iter().enumerate() {
                part[KERNEL_TAPS * out_c * in_c + j] += gj;
            }
            part
        },
        |acc, p| {
            for (a, b) in acc.iter_mut().zip(p.iter()) {
                *a += b;
            }
        },
    );
    let g_kernel = flat[..KERNEL_TAPS * out_c * in_c].to_vec();
    let g_bias = flat[KERNEL_TAPS * out_c * in_c..].to_vec();
    (g_in, g_kernel, g_bias)
}

fn maxpool_forward(pool: &PoolTopo, fine: &[f64], c: usize, mc: usize) -> (Vec<f64>, Vec<u32>) {
    let mut out = vec![0.0; mc * c];
    let mut argmax = vec![0u32; mc * c];
    for p in 0..mc {
        let kids = &pool.children[pool.child_offsets[p]..pool.child_offsets[p + 1]];
        for ch in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_k = kids[0];
            for &k in kids {
                let v = fine[k as usize * c + ch];
                if v > best {
                    best = v;
                    best_k = k;
                }
            }
            out[p * c + ch] = best;
            argmax[p * c + ch] = best_k;
        }
    }
    (out, argmax)
}

fn maxpool_backward(argmax: &[u32], grad_coarse: &[f64], c: usize, mf: usize) -> Vec<f64> {
    let mut out = vec![0.0; mf * c];
    for (i, g) in grad_coarse.iter().enumerate() {
        let ch = i % c;
        let k = argmax[i] as usize;
        out[k * c + ch] += g;
    }
    out
}

fn unpool_forward(pool: &PoolTopo, coarse: &[f64], c: usize) -> Vec<f64> {
    let mf = pool.parent.len();
    let mut out = vec![0.0; mf * c];
    for (f, p) in pool.parent.iter().enumerate() {
        out[f * c..(f + 1) * c].copy_from_slice(&coarse[p * c..(p + 1) * c]);
    }
    out
}

fn unpool_backward(pool: &PoolTopo, grad_fine: &[f64], c: usize, mc: usize) -> Vec<f64> {
    let mut out = vec![0.0; mc * c];
    for (f, p) in pool.parent.iter().enumerate() {
        for ch in 0..c {
            out[p * c + ch] += grad_fine[f * c + ch];
        }
    }
    out
}

fn concat(a: &[f64], ca: usize, b: &[f64], cb: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * (ca + cb)];
    for s in 0..m {
        out[s * (ca + cb)..s * (ca + cb) + ca].copy_from_slice(&a[s * ca..(s + 1) * ca]);
        out[s * (ca + cb) + ca..(s + 1) * (ca + cb)].copy_from_slice(&b[s * cb..(s + 1) * cb]);
    }
    out
}

fn split_grad(g: &[f64], ca: usize, cb: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; m * ca];
    let mut gb = vec![0.0; m * cb];
    for s in 0..m {
        ga[s * ca..(s + 1) * ca].copy_from_slice(&g[s * (ca + cb)..s * (ca + cb) + ca]);
        gb[s * cb..(s + 1) * cb].copy_from_slice(&g[s * (ca + cb) + ca..(s + 1) * (ca + cb)]);
    }
    (ga, gb)
}

/// Retained forward state of the U-Net.
pub struct UNetState {
    level0: LevelTopo,
    level1: LevelTopo,
    level2: LevelTopo,
    pool0: PoolTopo,
    pool1: PoolTopo,
    a0: Vec<f64>,
    p1: Vec<f64>,
    a1: Vec<f64>,
    p2: Vec<f64>,
    a2: Vec<f64>,
    cat1: Vec<f64>,
    a3: Vec<f64>,
    cat0: Vec<f64>,
    /// Final per-voxel features, `M0 × F_v`.
    pub voxel_features: Vec<f64>,
    arg1: Vec<u32>,
    arg2: Vec<u32>,
}

/// Gathers per-voxel features back to points.
pub fn gather_to_points(grid: &SparseVoxelGrid, voxel_features: &[f64], width: usize) -> Vec<f64> {
    let n = grid.point_voxel.len();
    let mut out = vec![0.0; n * width];
    for (i, &slot) in grid.point_voxel.iter().enumerate() {
        out[i * width..(i + 1) * width]
            .copy_from_slice(&voxel_features[slot * width..(slot + 1) * width]);
    }
    out
}

/// Adjoint of [`gather_to_points`]: scatter-add point gradients to voxels.
pub fn scatter_to_voxels(grid: &SparseVoxelGrid, grad_points: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid.voxel_count() * width];
    for (i, &slot) in grid.point_voxel.iter().enumerate() {
        for k in 0..width {
            out[slot * width + k] += grad_points[i * width + k];
        }
    }
    out
}

/// Runs the U-Net on a voxel grid; returns per-point features `n × F_v` and
/// the retained state.
pub fn sparse_conv_forward(
    grid: &SparseVoxelGrid,
    net: &SparseUNet,
) -> Result<(Vec<f64>, UNetState)> {
    if grid.voxel_count() == 0 {
        return Err(Error::EmptyInput("voxel grid has no occupied voxels".into()));
    }
    if net.enc0.in_c != grid.feature_width {
        return Err(Error::Config(format!(
            "U-Net input width {} != voxel feature width {}",
            net.enc0.in_c, grid.feature_width
        )));
    }
    let level0 = LevelTopo::build(grid.coords.clone());
    let (pool0, level1) = build_pool(&level0);
    let (pool1, level2) = build_pool(&level1);
    let c0 = net.enc0.out_c;
    let c1 = net.enc1.out_c;

    let a0 = conv_forward(&net.enc0, &level0, &grid.features, true);
    let (p1, arg1) = maxpool_forward(&pool0, &a0, c0, level1.len());
    let a1 = conv_forward(&net.enc1, &level1, &p1, true);
    let (p2, arg2) = maxpool_forward(&pool1, &a1, c1, level2.len());
    let a2 = conv_forward(&net.bottleneck, &level2, &p2, true);
    let u1 = unpool_forward(&pool1, &a2, c1);
    let cat1 = concat(&u1, c1, &a1, c1, level1.len());
    let a3 = conv_forward(&net.up1, &level1, &cat1, true);
    let u0 = unpool_forward(&pool0, &a3, c1);
    let cat0 = concat(&u0, c1, &a0, c0, level0.len());
    let voxel_features = conv_forward(&net.up0, &level0, &cat0, false);

    let points = gather_to_points(grid, &voxel_features, net.feature_width());
    Ok((
        points,
        UNetState {
            level0,
            level1,
            level2,
            pool0,
            pool1,
            a0,
            p1,
            a1,
            p2,
            a2,
            cat1,
            a3,
            cat0,
            voxel_features,
            arg1,
            arg2,
        },
    ))
}

/// Backward of [`sparse_conv_forward`]: kernel gradients plus gradients
/// w.r.t. the grid's input features (to flow back into semantic attributes).
pub fn sparse_conv_backward(
    grid: &SparseVoxelGrid,
    net: &SparseUNet,
    state: &UNetState,
    grad_points: &[f64],
    mode: Reduction,
) -> Result<(UNetGrads, Vec<f64>)> {
    let width = net.feature_width();
    if grad_points.len() != grid.point_voxel.len() * width {
        return Err(Error::Usage(format!(
            "upstream feature gradient length {} != {}",
            grad_points.len(),
            grid.point_voxel.len() * width
        )));
    }
    let c0 = net.enc0.out_c;
    let c1 = net.enc1.out_c;
    let g_vox = scatter_to_voxels(grid, grad_points, width);

    let (g_cat0, gk_up0, gb_up0) = conv_backward(
        &net.up0,
        &state.level0,
        &state.cat0,
        &state.voxel_features,
        &g_vox,
        false,
        mode,
    );
    let (g_u0, mut g_a0) = split_grad(&g_cat0, c1, c0, state.level0.len());
    let g_a3 = unpool_backward(&state.pool0, &g_u0, c1, state.level1.len());
    let (g_cat1, gk_up1, gb_up1) = conv_backward(
        &net.up1,
        &state.level1,
        &state.cat1,
        &state.a3,
        &g_a3,
        true,
        mode,
    );
    let (g_u1, mut g_a1) = split_grad(&g_cat1, c1, c1, state.level1.len());
    let g_a2 = unpool_backward(&state.pool1, &g_u1, c1, state.level2.len());
    let (g_p2, gk_bott, gb_bott) = conv_backward(
        &net.bottleneck,
        &state.level2,
        &state.p2,
        &state.a2,
        &g_a2,
        true,
        mode,
    );
    // Max-pool routes gradients to the winning children.
    let g_a1_pool = maxpool_backward(&state.arg2, &g_p2, c1, state.level1.len());
    for (a, b) in g_a1.iter_mut().zip(g_a1_pool.iter()) {
        *a += b;
    }
    let (g_p1, gk_enc1, gb_enc1) = conv_backward(
        &net.enc1,
        &state.level1,
        &state.p1,
        &state.a1,
        &g_a1,
        true,
        mode,
    );
    let g_a0_pool = maxpool_backward(&state.arg1, &g_p1, c0, state.level0.len());
    for (a, b) in g_a0.iter_mut().zip(g_a0_pool.iter()) {
        *a += b;
    }
    let (g_input, gk_enc0, gb_enc0) = conv_backward(
        &net.enc0,
        &state.level0,
        &grid.features,
        &state.a0,
        &g_a0,
        true,
        mode,
    );

    Ok((
        UNetGrads {
            kernels: vec![gk_enc0, gk_enc1, gk_bott, gk_up1, gk_up0],
            biases: vec![gb_enc0, gb_enc1, gb_bott, gb_up1, gb_up0],
        },
        g_input,
    ))
}

// ---------------------------------------------------------------------------
// Fusion head
// ---------------------------------------------------------------------------

/// Retained state of the fusion network stage.
pub struct FusionStage {
    pub dx: Vec<Vector3<f64>>,
    pub dscale: Vec<Vector3<f64>>,
    pub drot: Vec<Vector3<f64>>,
    cache: MlpCache,
    f_dim: usize,
}

/// Expected fusion-net input width.
pub fn fusion_input_width(f_dim: usize, pose_dim: usize) -> usize {
    f_dim + 3 + pose_dim
}

/// Runs the fusion network on `[F_v; X_d; Z_p]` per point, producing the
/// final offsets `Δ(X', s', r')`.
pub fn fusion_forward(
    point_features: &[f64],
    f_dim: usize,
    deformed_positions: &[Vector3<f64>],
    pose_encoding_vec: &[f64],
    net: &TinyMlp,
) -> Result<FusionStage> {
    let n = deformed_positions.len();
    let want = fusion_input_width(f_dim, pose_encoding_vec.len());
    if net.input_width() != want {
        return Err(Error::Config(format!(
            "fusion net input width {} != {}",
            net.input_width(),
            want
        )));
    }
    if net.output_width() != 9 {
        return Err(Error::Config(format!(
            "fusion net output width {} != 9",
            net.output_width()
        )));
    }
    let mut inputs = vec![0.0; n * want];
    parallel::for_each_chunk_mut(&mut inputs, want, |i, row| {
        row[..f_dim].copy_from_slice(&point_features[i * f_dim..(i + 1) * f_dim]);
        let p = deformed_positions[i];
        row[f_dim] = p.x;
        row[f_dim + 1] = p.y;
        row[f_dim + 2] = p.z;
        row[f_dim + 3..].copy_from_slice(pose_encoding_vec);
    });
    let cache = net.forward_batch(&inputs, n)?;
    let mut dx = Vec::with_capacity(n);
    let mut dscale = Vec::with_capacity(n);
    let mut drot = Vec::with_capacity(n);
    {
        let outs = &cache.acts[net.layer_count()];
        for i in 0..n {
            let o = &outs[i * 9..(i + 1) * 9];
            dx.push(Vector3::new(o[0], o[1], o[2]));
            dscale.push(Vector3::new(o[3], o[4], o[5]));
            drot.push(Vector3::new(o[6], o[7], o[8]));
        }
    }
    Ok(FusionStage {
        dx,
        dscale,
        drot,
        cache,
        f_dim,
    })
}

/// Backward of [`fusion_forward`]: net parameter gradients plus gradients
/// w.r.t. the per-point features and the deformed positions.
pub fn fusion_backward(
    stage: &FusionStage,
    net: &TinyMlp,
    grad_dx: &[Vector3<f64>],
    grad_dscale: &[Vector3<f64>],
    grad_drot: &[Vector3<f64>],
    mode: Reduction,
) -> Result<(MlpGrads, Vec<f64>, Vec<Vector3<f64>>)> {
    let n = stage.dx.len();
    let mut upstream = vec![0.0; n * 9];
    for i in 0..n {
        let o = &mut upstream[i * 9..(i + 1) * 9];
        o[0] = grad_dx[i].x;
        o[1] = grad_dx[i].y;
        o[2] = grad_dx[i].z;
        o[3] = grad_dscale[i].x;
        o[4] = grad_dscale[i].y;
        o[5] = grad_dscale[i].z;
        o[6] = grad_drot[i].x;
        o[7] = grad_drot[i].y;
        o[8] = grad_drot[i].z;
    }
    let (param_grads, input_grads) = net.backward_batch(&stage.cache, &upstream, mode)?;
    let in_w = net.input_width();
    let f_dim = stage.f_dim;
    let mut g_features = vec![0.0; n * f_dim];
    let mut g_pos = vec![Vector3::zeros(); n];
    for i in 0..n {
        let row = &input_grads[i * in_w..(i + 1) * in_w];
        g_features[i * f_dim..(i + 1) * f_dim].copy_from_slice(&row[..f_dim]);
        g_pos[i] = Vector3::new(row[f_dim], row[f_dim + 1], row[f_dim + 2]);
    }
    Ok((param_grads, g_features, g_pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{fd_grad, rel_err};
    use crate::voxel::voxelize;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, n: usize, parts: usize, v: f64) -> SparseVoxelGrid {
        let positions: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                )
            })
            .collect();
        let semantics: Vec<f64> = (0..n * parts).map(|_| rng.gen_range(0.1..1.0)).collect();
        voxelize(&positions, &semantics, parts, v).unwrap()
    }

    #[test]
    fn empty_grid_is_an_error() {
        let grid = voxelize(&[], &[], 3, 0.1).unwrap();
        let net = SparseUNet::new(3, &UNetConfig::default());
        assert!(matches!(
            sparse_conv_forward(&grid, &net),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn zero_features_zero_biases_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut grid = random_grid(&mut rng, 20, 3, 0.13);
        grid.features.iter_mut().for_each(|v| *v = 0.0);
        let net = SparseUNet::new(3, &UNetConfig::default());
        let (points, state) = sparse_conv_forward(&grid, &net).unwrap();
        assert!(state.voxel_features.iter().all(|v| *v == 0.0));
        assert!(points.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_voxel_is_center_tap_map() {
        let grid = voxelize(&[Vector3::new(0.05, 0.05, 0.05)], &[0.3, 0.7], 2, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let layer = ConvLayer::new(2, 4, &mut rng);
        let topo = LevelTopo::build(grid.coords.clone());
        let out = conv_forward(&layer, &topo, &grid.features, false);
        let tap = layer.tap(CENTER_TAP);
        for j in 0..4 {
            let want = layer.bias[j] + tap[j * 2] * 0.3 + tap[j * 2 + 1] * 0.7;
            assert!((out[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn full_block_matches_dense_conv_oracle() {
        // 3×3×3 occupied block: submanifold conv equals a dense convolution
        // with zero padding outside the block.
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let in_c = 3;
        let out_c = 5;
        let layer = ConvLayer::new(in_c, out_c, &mut rng);
        let mut coords = Vec::new();
        for z in 0..3i32 {
            for y in 0..3i32 {
                for x in 0..3i32 {
                    coords.push([z, y, x]);
                }
            }
        }
        coords.sort_unstable();
        let feats: Vec<f64> = (0..27 * in_c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let topo = LevelTopo::build(coords.clone());
        let got = conv_forward(&layer, &topo, &feats, false);

        // Dense oracle over the 3³ block.
        let at = |z: i32, y: i32, x: i32, c: usize| -> f64 {
            if !(0..3).contains(&z) || !(0..3).contains(&y) || !(0..3).contains(&x) {
                return 0.0;
            }
            let slot = coords.iter().position(|&cc| cc == [z, y, x]).unwrap();
            feats[slot * in_c + c]
        };
        for (slot, c) in coords.iter().enumerate() {
            for j in 0..out_c {
                let mut want = layer.bias[j];
                for o in 0..KERNEL_TAPS {
                    let d = tap_offset(o);
                    for i in 0..in_c {
                        want += layer.kernel[o * out_c * in_c + j * in_c + i]
                            * at(c[0] + d[0], c[1] + d[1], c[2] + d[2], i);
                    }
                }
                let g = got[slot * out_c + j];
                assert!(rel_err(g, want, 1e-9) < 1e-6, "slot {slot} ch {j}: {g} vs {want}");
            }
        }
    }

    #[test]
    fn occupancy_preserved_through_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let grid = random_grid(&mut rng, 30, 3, 0.17);
        let net = SparseUNet::new(3, &UNetConfig::default());
        let (points, state) = sparse_conv_forward(&grid, &net).unwrap();
        assert_eq!(state.voxel_features.len(), grid.voxel_count() * 16);
        assert_eq!(points.len(), 30 * 16);
    }

    #[test]
    fn gather_scatter_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        for _ in 0..50 {
            let n_pts = rng.gen_range(3..40);
            let grid = random_grid(&mut rng, n_pts, 2, 0.15);
            let width = 6;
            let f: Vec<f64> = (0..grid.voxel_count() * width)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let g: Vec<f64> = (0..grid.point_voxel.len() * width)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let gathered = gather_to_points(&grid, &f, width);
            let scattered = scatter_to_voxels(&grid, &g, width);
            let lhs: f64 = gathered.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = f.iter().zip(scattered.iter()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn pooling_halves_negative_coords_correctly() {
        assert_eq!(halve([-1, -2, 3]), [-1, -1, 1]);
        assert_eq!(halve([-4, 5, 0]), [-2, 2, 0]);
    }

    #[test]
    fn unet_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let parts = 2;
        let grid = random_grid(&mut rng, 18, parts, 0.22);
        let cfg = UNetConfig {
            channels0: 4,
            channels1: 6,
            feature_width: 3,
            seed: 7,
        };
        let net = SparseUNet::new(parts, &cfg);
        let n = grid.point_voxel.len();
        let up: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss_params = |flat: &[f64]| {
            let mut net2 = net.clone();
            net2.set_flat_params(flat);
            let (points, _) = sparse_conv_forward(&grid, &net2).unwrap();
            points.iter().zip(up.iter()).map(|(a, b)| a * b).sum()
        };
        let flat0 = net.flat_params();
        let fd = fd_grad(loss_params, &flat0, 1e-5);

        let (_, state) = sparse_conv_forward(&grid, &net).unwrap();
        let (grads, g_input) =
            sparse_conv_backward(&grid, &net, &state, &up, Reduction::Ordered).unwrap();
        let got = grads.flat();
        let mut worst = 0.0f64;
        for (a, e) in got.iter().zip(fd.iter()) {
            worst = worst.max(rel_err(*a, *e, 1e-6));
        }
        assert!(worst < 1e-3, "worst kernel grad rel err {worst}");

        // Input-feature gradients.
        let loss_inputs = |feats: &[f64]| {
            let mut g2 = grid.clone();
            g2.features = feats.to_vec();
            let (points, _) = sparse_conv_forward(&g2, &net).unwrap();
            points.iter().zip(up.iter()).map(|(a, b)| a * b).sum()
        };
        let fd_in = fd_grad(loss_inputs, &grid.features, 1e-5);
        for (a, e) in g_input.iter().zip(fd_in.iter()) {
            assert!(rel_err(*a, *e, 1e-6) < 1e-3, "input grad {a} vs {e}");
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let grid = random_grid(&mut rng, 10, 2, 0.2);
        let net = SparseUNet::new(
            2,
            &UNetConfig {
                channels0: 4,
                channels1: 4,
                feature_width: 2,
                seed: 3,
            },
        );
        let (_, state) = sparse_conv_forward(&grid, &net).unwrap();
        let zeros = vec![0.0; grid.point_voxel.len() * 2];
        let (grads, g_in) =
            sparse_conv_backward(&grid, &net, &state, &zeros, Reduction::Ordered).unwrap();
        assert!(grads.flat().iter().all(|v| *v == 0.0));
        assert!(g_in.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fusion_zero_init_gives_zero_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let n = 7;
        let f_dim = 4;
        let feats: Vec<f64> = (0..n * f_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pos: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let zp = vec![0.3; 5];
        let net = TinyMlp::new(&[fusion_input_width(f_dim, 5), 8, 9], 1, true);
        let stage = fusion_forward(&feats, f_dim, &pos, &zp, &net).unwrap();
        assert!(stage.dx.iter().all(|v| v.norm() == 0.0));
        assert!(stage.dscale.iter().all(|v| v.norm() == 0.0));
        assert!(stage.drot.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn fusion_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let n = 5;
        let f_dim = 3;
        let feats: Vec<f64> = (0..n * f_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pos: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let zp: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let net = TinyMlp::new(&[fusion_input_width(f_dim, 4), 10, 9], 2, false);
        let up_dx: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let up_ds = up_dx.clone();
        let up_dr: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();

        let loss = |featv: &[f64], posv: &[Vector3<f64>]| -> f64 {
            let st = fusion_forward(featv, f_dim, posv, &zp, &net).unwrap();
            (0..n)
                .map(|i| {
                    st.dx[i].dot(&up_dx[i]) + st.dscale[i].dot(&up_ds[i]) + st.drot[i].dot(&up_dr[i])
                })
                .sum()
        };

        let stage = fusion_forward(&feats, f_dim, &pos, &zp, &net).unwrap();
        let (_, g_feats, g_pos) =
            fusion_backward(&stage, &net, &up_dx, &up_ds, &up_dr, Reduction::Ordered).unwrap();

        let fd_f = fd_grad(|x: &[f64]| loss(x, &pos), &feats, 1e-5);
        for (a, e) in g_feats.iter().zip(fd_f.iter()) {
            assert!(rel_err(*a, *e, 1e-6) < 1e-3);
        }
        let flat_pos: Vec<f64> = pos.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let fd_p = fd_grad(
            |x: &[f64]| {
                let ps: Vec<Vector3<f64>> =
                    x.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
                loss(&feats, &ps)
            },
            &flat_pos,
            1e-5,
        );
        for i in 0..n {
            for k in 0..3 {
                assert!(rel_err(g_pos[i][k], fd_p[i * 3 + k], 1e-6) < 1e-3);
            }
        }
    }
}
