use std::borrow::Cow;

use rayon::prelude::*;

use super::params::{Gradients, ParameterSet};
use super::real::{gemm, Mat};
use super::{ArchitectureConfig, LayerSpec, Real};
use crate::error::{Error, Result};
use crate::{EMBEDDING_DIM, PATCH_LEN, PATCH_SIZE};

/// Added to the pre-normalization norm when it falls below this value.
pub const NORM_GUARD: f64 = 1e-8;

/// Patches per work unit. Fixed so that chunked reductions are identical for
/// any number of workers.
const CHUNK: usize = 64;

const INPUT_SHIFT: f64 = 0.5;

#[derive(Debug, Clone)]
pub(crate) struct BlockSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvOp {
    cin: usize,
    cout: usize,
    k: usize,
    relu: bool,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct InceptionOp {
    b1: ConvOp,
    r3: ConvOp,
    b3: ConvOp,
    r5: ConvOp,
    b5: ConvOp,
    pp: ConvOp,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Conv(ConvOp),
    Inception(Box<InceptionOp>),
    MaxPool { size: usize },
    Flatten,
    Dense(ConvOp),
}

struct Planner {
    blocks: Vec<BlockSpec>,
}

impl Planner {
    fn weight(&mut self, prefix: String, cin: usize, cout: usize, k: usize, relu: bool) -> ConvOp {
        let shape = if k == 0 {
            vec![cout, cin]
        } else {
            vec![cout, cin, k, k]
        };
        let fan_in = cin * k.max(1) * k.max(1);
        let w = self.blocks.len();
        self.blocks.push(BlockSpec {
            name: format!("{prefix}.weight"),
            shape,
            fan_in,
        });
        self.blocks.push(BlockSpec {
            name: format!("{prefix}.bias"),
            shape: vec![cout],
            fan_in,
        });
        ConvOp {
            cin,
            cout,
            k: k.max(1),
            relu,
            w,
            b: w + 1,
        }
    }
}

/// Validate `arch` and lay out its operations and parameter blocks.
pub(crate) fn plan(arch: &ArchitectureConfig) -> Result<(Vec<Op>, Vec<BlockSpec>)> {
    let bad = |m: String| Error::Architecture(m);
    if arch.layers.is_empty() {
        return Err(bad("architecture has no layers".into()));
    }
    if arch.input_size != PATCH_SIZE || arch.input_channels != crate::CHANNELS {
        return Err(bad(format!(
            "input must be {PATCH_SIZE}x{PATCH_SIZE}x{}, got {}x{}x{}",
            crate::CHANNELS,
            arch.input_size,
            arch.input_size,
            arch.input_channels
        )));
    }
    if arch.embedding_dim != EMBEDDING_DIM {
        return Err(bad(format!(
            "embedding_dim must be {EMBEDDING_DIM}, got {}",
            arch.embedding_dim
        )));
    }
    if !arch.normalize_output {
        return Err(bad("normalize_output must be true".into()));
    }

    let mut planner = Planner { blocks: Vec::new() };
    let mut ops = Vec::new();
    let (mut c, mut h, mut w) = (arch.input_channels, arch.input_size, arch.input_size);
    let mut flat = false;
    for (i, layer) in arch.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv { out, kernel, relu } => {
                if flat {
                    return Err(bad(format!("layer {i}: convolution after a dense layer")));
                }
                if out == 0 || kernel % 2 == 0 {
                    return Err(bad(format!(
                        "layer {i}: convolution needs out ≥ 1 and an odd kernel"
                    )));
                }
                ops.push(Op::Conv(planner.weight(
                    format!("layer{i}.conv"),
                    c,
                    out,
                    kernel,
                    relu,
                )));
                c = out;
            }
            LayerSpec::Inception(s) => {
                if flat {
                    return Err(bad(format!("layer {i}: inception after a dense layer")));
                }
                if [s.b1, s.b3_reduce, s.b3, s.b5_reduce, s.b5, s.pool_proj].contains(&0) {
                    return Err(bad(format!(
                        "layer {i}: inception branch widths must be ≥ 1"
                    )));
                }
                let p = format!("layer{i}");
                let op = InceptionOp {
                    b1: planner.weight(format!("{p}.b1"), c, s.b1, 1, true),
                    r3: planner.weight(format!("{p}.b3_reduce"), c, s.b3_reduce, 1, true),
                    b3: planner.weight(format!("{p}.b3"), s.b3_reduce, s.b3, 3, true),
                    r5: planner.weight(format!("{p}.b5_reduce"), c, s.b5_reduce, 1, true),
                    b5: planner.weight(format!("{p}.b5"), s.b5_reduce, s.b5, 5, true),
                    pp: planner.weight(format!("{p}.pool_proj"), c, s.pool_proj, 1, true),
                };
                ops.push(Op::Inception(Box::new(op)));
                c = s.out_channels();
            }
            LayerSpec::MaxPool { size } => {
                if flat {
                    return Err(bad(format!("layer {i}: max pool after a dense layer")));
                }
                if size == 0 || h % size != 0 || w % size != 0 {
                    return Err(bad(format!(
                        "layer {i}: pool size {size} does not divide {h}x{w}"
                    )));
                }
                ops.push(Op::MaxPool { size });
                h /= size;
                w /= size;
            }
            LayerSpec::Dense { out, relu } => {
                if out == 0 {
                    return Err(bad(format!("layer {i}: dense layer needs out ≥ 1")));
                }
                if !flat {
                    ops.push(Op::Flatten);
                    c *= h * w;
                    h = 1;
                    w = 1;
                    flat = true;
                }
                ops.push(Op::Dense(planner.weight(
                    format!("layer{i}.dense"),
                    c,
                    out,
                    0,
                    relu,
                )));
                c = out;
            }
        }
    }
    if !flat {
        ops.push(Op::Flatten);
        c *= h * w;
    }
    if c != arch.embedding_dim {
        return Err(bad(format!(
            "final layer produces {c} values, expected {}",
            arch.embedding_dim
        )));
    }
    Ok((ops, planner.blocks))
}

/// Activation volume in (C, N, H, W) order.
#[derive(Debug, Clone)]
struct Act<T> {
    c: usize,
    n: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T> Act<T> {
    fn plane(&self) -> usize {
        self.n * self.h * self.w
    }
}

#[derive(Debug)]
struct ConvCache<T> {
    cols: Vec<T>,
    out: Option<Vec<T>>,
    n: usize,
    h: usize,
    w: usize,
}

#[derive(Debug)]
struct InceptionCache<T> {
    b1: ConvCache<T>,
    r3: ConvCache<T>,
    b3: ConvCache<T>,
    r5: ConvCache<T>,
    b5: ConvCache<T>,
    pp: ConvCache<T>,
    pool_argmax: Vec<u32>,
}

#[derive(Debug)]
enum OpCache<T> {
    Conv(ConvCache<T>),
    Inception(Box<InceptionCache<T>>),
    MaxPool {
        argmax: Vec<u32>,
        c: usize,
        h: usize,
        w: usize,
    },
    Flatten {
        c: usize,
        h: usize,
        w: usize,
    },
    Dense(ConvCache<T>),
}

/// Intermediate values of one forward pass, consumed by
/// [`backward_cached`](super::backward).
#[derive(Debug)]
pub struct ForwardCache<T> {
    n: usize,
    ops: Vec<OpCache<T>>,
    pre_norm: Vec<T>,
    norms: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn batch_len(&self) -> usize {
        self.n
    }
}

/// Row-major `len × dim` block of embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings<T> {
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Embeddings<T> {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.dim)
    }
}

fn check_batch(batch: &[f32]) -> Result<usize> {
    if batch.len() % PATCH_LEN != 0 {
        return Err(Error::Shape(format!(
            "patch batch of {} values is not a multiple of {PATCH_LEN}",
            batch.len()
        )));
    }
    if let Some(pos) = batch.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "input patch {} contains a non-finite pixel",
            pos / PATCH_LEN
        )));
    }
    Ok(batch.len() / PATCH_LEN)
}

/// Embed a batch of patches given as consecutive 16·16·3 row-major RGB
/// blocks. Output row `i` depends only on patch `i`.
pub fn forward<T: Real>(params: &ParameterSet<T>, batch: &[f32]) -> Result<Embeddings<T>> {
    check_batch(batch)?;
    let (ops, _) = plan(&params.arch)?;
    let parts: Vec<Vec<T>> = batch
        .par_chunks(CHUNK * PATCH_LEN)
        .map(|chunk| run_forward(&ops, params, chunk, false).0)
        .collect();
    Ok(Embeddings {
        dim: params.arch.embedding_dim,
        data: parts.concat(),
    })
}

/// Forward pass over one batch that keeps everything needed for
/// [`backward_cached`]. Runs on the calling thread.
pub fn forward_cached<T: Real>(
    params: &ParameterSet<T>,
    batch: &[f32],
) -> Result<(Embeddings<T>, ForwardCache<T>)> {
    check_batch(batch)?;
    let (ops, _) = plan(&params.arch)?;
    let (data, cache) = run_forward(&ops, params, batch, true);
    Ok((
        Embeddings {
            dim: params.arch.embedding_dim,
            data,
        },
        cache.expect("cache requested"),
    ))
}

/// Parameter gradients of `Σᵢ ⟨upstreamᵢ, f(patchᵢ)⟩`, i.e. the exact
/// backpropagation of `upstream` (row-major, one row per patch) through the
/// encoder including the normalization Jacobian.
pub fn backward<T: Real>(
    params: &ParameterSet<T>,
    batch: &[f32],
    upstream: &[T],
) -> Result<Gradients<T>> {
    let n = check_batch(batch)?;
    let dim = params.arch.embedding_dim;
    if upstream.len() != n * dim {
        return Err(Error::Shape(format!(
            "upstream gradient has {} values, expected {}×{dim}",
            upstream.len(),
            n
        )));
    }
    let parts: Vec<Result<Gradients<T>>> = batch
        .par_chunks(CHUNK * PATCH_LEN)
        .zip(upstream.par_chunks(CHUNK * dim))
        .map(|(chunk, up)| {
            let (_, cache) = forward_cached(params, chunk)?;
            backward_cached(params, &cache, up)
        })
        .collect();
    let mut total = params.zero_gradients();
    for part in parts {
        total.add_assign(&part?);
    }
    Ok(total)
}

/// Backpropagate `upstream` through a pass recorded by [`forward_cached`].
pub fn backward_cached<T: Real>(
    params: &ParameterSet<T>,
    cache: &ForwardCache<T>,
    upstream: &[T],
) -> Result<Gradients<T>> {
    let dim = params.arch.embedding_dim;
    let n = cache.n;
    if upstream.len() != n * dim {
        return Err(Error::Shape(format!(
            "upstream gradient has {} values, expected {n}×{dim}",
            upstream.len()
        )));
    }
    let (ops, _) = plan(&params.arch)?;
    let mut grads = params.zero_gradients();
    if upstream.iter().all(|v| v.is_zero()) {
        return Ok(grads);
    }

    // normalization: y = z / s, s = ‖z‖ (+ guard)
    let guard = T::of(NORM_GUARD);
    let mut dz = vec![T::zero(); dim * n];
    for j in 0..n {
        let norm = cache.norms[j];
        let s = if norm < guard { norm + guard } else { norm };
        let mut dot = T::zero();
        for d in 0..dim {
            dot = dot + cache.pre_norm[d * n + j] * upstream[j * dim + d];
        }
        let coupling = if norm > T::zero() {
            dot / (s * s * norm)
        } else {
            T::zero()
        };
        for d in 0..dim {
            let z = cache.pre_norm[d * n + j];
            dz[d * n + j] = upstream[j * dim + d] / s - z * coupling;
        }
    }

    let mut grad = Act {
        c: dim,
        n,
        h: 1,
        w: 1,
        data: dz,
    };
    for (index, (op, op_cache)) in ops.iter().zip(&cache.ops).enumerate().rev() {
        let need_dx = index > 0;
        grad = match (op, op_cache) {
            (Op::Conv(conv), OpCache::Conv(c)) | (Op::Dense(conv), OpCache::Dense(c)) => {
                conv_backward(conv, c, grad.data, params, &mut grads, need_dx)
            }
            (Op::Inception(inc), OpCache::Inception(c)) => {
                inception_backward(inc, c, grad, params, &mut grads)
            }
            (Op::MaxPool { .. }, OpCache::MaxPool { argmax, c, h, w }) => {
                let mut dx = vec![T::zero(); c * n * h * w];
                scatter_add(&mut dx, argmax, &grad.data);
                Act {
                    c: *c,
                    n,
                    h: *h,
                    w: *w,
                    data: dx,
                }
            }
            (Op::Flatten, OpCache::Flatten { c, h, w }) => unflatten(&grad, *c, *h, *w),
            _ => unreachable!("cache does not match the plan"),
        };
    }
    Ok(grads)
}

fn run_forward<T: Real>(
    ops: &[Op],
    params: &ParameterSet<T>,
    batch: &[f32],
    keep: bool,
) -> (Vec<T>, Option<ForwardCache<T>>) {
    let n = batch.len() / PATCH_LEN;
    let hw = PATCH_SIZE * PATCH_SIZE;
    let ch = crate::CHANNELS;
    let shift = T::of(INPUT_SHIFT);
    let mut data = vec![T::zero(); ch * n * hw];
    for (j, patch) in batch.chunks(PATCH_LEN).enumerate() {
        for p in 0..hw {
            for c in 0..ch {
                data[(c * n + j) * hw + p] = T::of(patch[p * ch + c] as f64) - shift;
            }
        }
    }
    let mut x = Act {
        c: ch,
        n,
        h: PATCH_SIZE,
        w: PATCH_SIZE,
        data,
    };
    let mut caches = Vec::with_capacity(if keep { ops.len() } else { 0 });
    for op in ops {
        let (y, cache) = match op {
            Op::Conv(conv) => {
                let (y, c) = conv_forward(conv, &x, params, keep);
                (y, c.map(OpCache::Conv))
            }
            Op::Dense(conv) => {
                let (y, c) = conv_forward(conv, &x, params, keep);
                (y, c.map(OpCache::Dense))
            }
            Op::Inception(inc) => {
                let (y, c) = inception_forward(inc, &x, params, keep);
                (y, c.map(|c| OpCache::Inception(Box::new(c))))
            }
            Op::MaxPool { size } => {
                let (y, argmax) = maxpool_forward(&x, *size);
                let cache = keep.then(|| OpCache::MaxPool {
                    argmax,
                    c: x.c,
                    h: x.h,
                    w: x.w,
                });
                (y, cache)
            }
            Op::Flatten => {
                let cache = keep.then_some(OpCache::Flatten {
                    c: x.c,
                    h: x.h,
                    w: x.w,
                });
                (flatten(&x), cache)
            }
        };
        if let Some(c) = cache {
            caches.push(c);
        }
        x = y;
    }

    let dim = x.c;
    let guard = T::of(NORM_GUARD);
    let mut norms = vec![T::zero(); n];
    for (j, norm) in norms.iter_mut().enumerate() {
        let sq: T = (0..dim)
            .map(|d| x.data[d * n + j] * x.data[d * n + j])
            .sum();
        *norm = sq.sqrt();
    }
    let mut out = vec![T::zero(); n * dim];
    for j in 0..n {
        let s = if norms[j] < guard {
            norms[j] + guard
        } else {
            norms[j]
        };
        for d in 0..dim {
            out[j * dim + d] = x.data[d * n + j] / s;
        }
    }
    let cache = keep.then(|| ForwardCache {
        n,
        ops: caches,
        pre_norm: x.data,
        norms,
    });
    (out, cache)
}

fn conv_forward<T: Real>(
    op: &ConvOp,
    x: &Act<T>,
    params: &ParameterSet<T>,
    keep: bool,
) -> (Act<T>, Option<ConvCache<T>>) {
    debug_assert_eq!(x.c, op.cin);
    let plane = x.plane();
    let ckk = op.cin * op.k * op.k;
    let cols: Cow<'_, [T]> = if op.k == 1 {
        Cow::Borrowed(&x.data)
    } else {
        Cow::Owned(im2col(x, op.k))
    };
    let weight = &params.blocks[op.w].data;
    let bias = &params.blocks[op.b].data;
    let mut out = vec![T::zero(); op.cout * plane];
    for (row, &b) in out.chunks_mut(plane.max(1)).zip(bias) {
        row.fill(b);
    }
    gemm(
        Mat::new(weight, op.cout, ckk),
        Mat::new(&cols, ckk, plane),
        T::one(),
        &mut out,
    );
    if op.relu {
        for v in &mut out {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }
    let cache = keep.then(|| ConvCache {
        cols: cols.into_owned(),
        out: op.relu.then(|| out.clone()),
        n: x.n,
        h: x.h,
        w: x.w,
    });
    (
        Act {
            c: op.cout,
            n: x.n,
            h: x.h,
            w: x.w,
            data: out,
        },
        cache,
    )
}

fn conv_backward<T: Real>(
    op: &ConvOp,
    cache: &ConvCache<T>,
    mut dz: Vec<T>,
    params: &ParameterSet<T>,
    grads: &mut Gradients<T>,
    need_dx: bool,
) -> Act<T> {
    let plane = cache.n * cache.h * cache.w;
    let ckk = op.cin * op.k * op.k;
    if let Some(out) = &cache.out {
        for (d, &o) in dz.iter_mut().zip(out) {
            if o <= T::zero() {
                *d = T::zero();
            }
        }
    }
    gemm(
        Mat::new(&dz, op.cout, plane),
        Mat::new(&cache.cols, ckk, plane).t(),
        T::one(),
        &mut grads.blocks[op.w],
    );
    for (gb, row) in grads.blocks[op.b].iter_mut().zip(dz.chunks(plane.max(1))) {
        *gb = *gb + row.iter().copied().sum();
    }
    let shape = |data| Act {
        c: op.cin,
        n: cache.n,
        h: cache.h,
        w: cache.w,
        data,
    };
    if !need_dx {
        return shape(Vec::new());
    }
    let mut dcols = vec![T::zero(); ckk * plane];
    gemm(
        Mat::new(&params.blocks[op.w].data, op.cout, ckk).t(),
        Mat::new(&dz, op.cout, plane),
        T::zero(),
        &mut dcols,
    );
    if op.k == 1 {
        shape(dcols)
    } else {
        let mut dx = shape(vec![T::zero(); op.cin * plane]);
        col2im(&dcols, &mut dx, op.k);
        dx
    }
}

fn inception_forward<T: Real>(
    op: &InceptionOp,
    x: &Act<T>,
    params: &ParameterSet<T>,
    keep: bool,
) -> (Act<T>, Option<InceptionCache<T>>) {
    let (y1, c1) = conv_forward(&op.b1, x, params, keep);
    let (r3, cr3) = conv_forward(&op.r3, x, params, keep);
    let (y3, c3) = conv_forward(&op.b3, &r3, params, keep);
    drop(r3);
    let (r5, cr5) = conv_forward(&op.r5, x, params, keep);
    let (y5, c5) = conv_forward(&op.b5, &r5, params, keep);
    drop(r5);
    let (pooled, argmax) = pool3_forward(x);
    let (yp, cp) = conv_forward(&op.pp, &pooled, params, keep);
    drop(pooled);

    let mut data = y1.data;
    data.extend_from_slice(&y3.data);
    data.extend_from_slice(&y5.data);
    data.extend_from_slice(&yp.data);
    let out = Act {
        c: y1.c + y3.c + y5.c + yp.c,
        n: x.n,
        h: x.h,
        w: x.w,
        data,
    };
    let cache = if keep {
        Some(InceptionCache {
            b1: c1.expect("kept"),
            r3: cr3.expect("kept"),
            b3: c3.expect("kept"),
            r5: cr5.expect("kept"),
            b5: c5.expect("kept"),
            pp: cp.expect("kept"),
            pool_argmax: argmax,
        })
    } else {
        None
    };
    (out, cache)
}

fn inception_backward<T: Real>(
    op: &InceptionOp,
    cache: &InceptionCache<T>,
    grad: Act<T>,
    params: &ParameterSet<T>,
    grads: &mut Gradients<T>,
) -> Act<T> {
    let plane = grad.plane();
    let mut offset = 0;
    let mut take = |c: usize| {
        let slice = grad.data[offset * plane..(offset + c) * plane].to_vec();
        offset += c;
        slice
    };
    let g1 = take(op.b1.cout);
    let g3 = take(op.b3.cout);
    let g5 = take(op.b5.cout);
    let gp = take(op.pp.cout);

    let mut dx = conv_backward(&op.b1, &cache.b1, g1, params, grads, true);
    let d3 = conv_backward(&op.b3, &cache.b3, g3, params, grads, true);
    let d3 = conv_backward(&op.r3, &cache.r3, d3.data, params, grads, true);
    let d5 = conv_backward(&op.b5, &cache.b5, g5, params, grads, true);
    let d5 = conv_backward(&op.r5, &cache.r5, d5.data, params, grads, true);
    let dp = conv_backward(&op.pp, &cache.pp, gp, params, grads, true);
    for ((a, b), c) in dx.data.iter_mut().zip(&d3.data).zip(&d5.data) {
        *a = *a + *b + *c;
    }
    scatter_add(&mut dx.data, &cache.pool_argmax, &dp.data);
    dx
}

fn scatter_add<T: Real>(dst: &mut [T], index: &[u32], src: &[T]) {
    for (&i, &g) in index.iter().zip(src) {
        dst[i as usize] = dst[i as usize] + g;
    }
}

fn im2col<T: Real>(x: &Act<T>, k: usize) -> Vec<T> {
    let (n, h, w) = (x.n, x.h, x.w);
    let plane = n * h * w;
    let pad = (k / 2) as isize;
    let mut cols = vec![T::zero(); x.c * k * k * plane];
    for c in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dx = kx as isize - pad;
                let x0 = (-dx).clamp(0, w as isize) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                for j in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let src = &x.data[((c * n + j) * h + sy as usize) * w..][..w];
                        let d = &mut dst[(j * h + y) * w..][..w];
                        let s0 = (x0 as isize + dx) as usize;
                        d[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], dx: &mut Act<T>, k: usize) {
    let (n, h, w) = (dx.n, dx.h, dx.w);
    let plane = n * h * w;
    let pad = (k / 2) as isize;
    for c in 0..dx.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let off = kx as isize - pad;
                let x0 = (-off).clamp(0, w as isize) as usize;
                let x1 = (w as isize - off).clamp(0, w as isize) as usize;
                for j in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let d = &mut dx.data[((c * n + j) * h + sy as usize) * w..][..w];
                        let s = &src[(j * h + y) * w..][..w];
                        let d0 = (x0 as isize + off) as usize;
                        for (a, &b) in d[d0..d0 + (x1 - x0)].iter_mut().zip(&s[x0..x1]) {
                            *a = *a + b;
                        }
                    }
                }
            }
        }
    }
}

fn maxpool_forward<T: Real>(x: &Act<T>, size: usize) -> (Act<T>, Vec<u32>) {
    let (h, w) = (x.h, x.w);
    let (oh, ow) = (h / size, w / size);
    let (hw, ohw) = (h * w, oh * ow);
    let planes = x.c * x.n;
    let mut out = vec![T::zero(); planes * ohw];
    let mut argmax = vec![0u32; planes * ohw];
    for (p, (src, (dst, arg))) in x
        .data
        .chunks_exact(hw)
        .zip(out.chunks_exact_mut(ohw).zip(argmax.chunks_exact_mut(ohw)))
        .enumerate()
    {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = oy * size * w + ox * size;
                let mut value = src[best];
                for dy in 0..size {
                    let row = (oy * size + dy) * w + ox * size;
                    for (i, &v) in src[row..row + size].iter().enumerate() {
                        let take = v > value;
                        best = if take { row + i } else { best };
                        value = if take { v } else { value };
                    }
                }
                dst[oy * ow + ox] = src[best];
                arg[oy * ow + ox] = (p * hw + best) as u32;
            }
        }
    }
    (
        Act {
            c: x.c,
            n: x.n,
            h: oh,
            w: ow,
            data: out,
        },
        argmax,
    )
}

/// 3×3 stride-1 max pool; out-of-range taps are ignored. Computed as a
/// row pass then a column pass, which keeps the first maximum in row-major
/// order.
fn pool3_forward<T: Real>(x: &Act<T>) -> (Act<T>, Vec<u32>) {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let mut out = vec![T::zero(); x.data.len()];
    let mut argmax = vec![0u32; x.data.len()];
    let mut across = vec![0usize; hw];
    for (p, (src, (dst, arg))) in x
        .data
        .chunks_exact(hw)
        .zip(out.chunks_exact_mut(hw).zip(argmax.chunks_exact_mut(hw)))
        .enumerate()
    {
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for xx in 0..w {
                let (lo, hi) = (xx.saturating_sub(1), (xx + 2).min(w));
                let (mut best, mut value) = (lo, row[lo]);
                for (q, &v) in row.iter().enumerate().take(hi).skip(lo + 1) {
                    let take = v > value;
                    best = if take { q } else { best };
                    value = if take { v } else { value };
                }
                across[y * w + xx] = y * w + best;
            }
        }
        for y in 0..h {
            let (lo, hi) = (y.saturating_sub(1), (y + 2).min(h));
            for xx in 0..w {
                let mut best = across[lo * w + xx];
                let mut value = src[best];
                for r in lo + 1..hi {
                    let cand = across[r * w + xx];
                    let v = src[cand];
                    let take = v > value;
                    best = if take { cand } else { best };
                    value = if take { v } else { value };
                }
                dst[y * w + xx] = src[best];
                arg[y * w + xx] = (p * hw + best) as u32;
            }
        }
    }
    (
        Act {
            c: x.c,
            n: x.n,
            h,
            w,
            data: out,
        },
        argmax,
    )
}

fn flatten<T: Real>(x: &Act<T>) -> Act<T> {
    let hw = x.h * x.w;
    let n = x.n;
    let mut data = vec![T::zero(); x.data.len()];
    for c in 0..x.c {
        for j in 0..n {
            for p in 0..hw {
                data[(c * hw + p) * n + j] = x.data[(c * n + j) * hw + p];
            }
        }
    }
    Act {
        c: x.c * hw,
        n,
        h: 1,
        w: 1,
        data,
    }
}

fn unflatten<T: Real>(g: &Act<T>, c: usize, h: usize, w: usize) -> Act<T> {
    let hw = h * w;
    let n = g.n;
    let mut data = vec![T::zero(); g.data.len()];
    for ch in 0..c {
        for j in 0..n {
            for p in 0..hw {
                data[(ch * n + j) * hw + p] = g.data[(ch * hw + p) * n + j];
            }
        }
    }
    Act { c, n, h, w, data }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::embedding_net::init_parameters;
    use crate::seed;

    fn random_batch(n: usize, s: u64) -> Vec<f32> {
        let mut rng = seed::rng(s);
        (0..n * PATCH_LEN).map(|_| rng.random::<f32>()).collect()
    }

    #[test]
    fn outputs_are_unit_norm() {
        let params: ParameterSet<f32> = init_parameters(&ArchitectureConfig::default(), 1).unwrap();
        let emb = forward(&params, &random_batch(20, 2)).unwrap();
        assert_eq!(emb.len(), 20);
        for row in emb.rows() {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-5, "{norm}");
        }
    }

    #[test]
    fn batch_independence() {
        let params: ParameterSet<f32> = init_parameters(&ArchitectureConfig::default(), 5).unwrap();
        let batch = random_batch(128, 9);
        let all = forward(&params, &batch).unwrap();
        for i in [0, 63, 64, 127] {
            let one = forward(&params, &batch[i * PATCH_LEN..(i + 1) * PATCH_LEN]).unwrap();
            for (a, b) in one.row(0).iter().zip(all.row(i)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn duplicate_patches_embed_identically() {
        let params: ParameterSet<f32> = init_parameters(&ArchitectureConfig::tiny(), 5).unwrap();
        let mut batch = random_batch(3, 4);
        let first = batch[..PATCH_LEN].to_vec();
        batch[2 * PATCH_LEN..].copy_from_slice(&first);
        let emb = forward(&params, &batch).unwrap();
        assert_eq!(emb.row(0), emb.row(2));
    }

    #[test]
    fn rejects_bad_input() {
        let params: ParameterSet<f32> = init_parameters(&ArchitectureConfig::tiny(), 5).unwrap();
        assert!(matches!(
            forward(&params, &[0.0; 100]),
            Err(Error::Shape(_))
        ));
        let mut batch = random_batch(2, 1);
        batch[PATCH_LEN + 5] = f32::NAN;
        assert!(matches!(forward(&params, &batch), Err(Error::NonFinite(_))));
        let up = vec![0.0f32; 3 * EMBEDDING_DIM];
        assert!(matches!(
            backward(&params, &random_batch(2, 1), &up),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let params: ParameterSet<f64> = init_parameters(&ArchitectureConfig::tiny(), 5).unwrap();
        let batch = random_batch(4, 3);
        let g = backward(&params, &batch, &vec![0.0; 4 * EMBEDDING_DIM]).unwrap();
        assert!(g.iter().all(|v| v == 0.0));
    }

    #[test]
    fn norm_is_constant_so_its_gradient_vanishes() {
        // d‖f‖²/dθ = backprop of 2f
        let params: ParameterSet<f64> = init_parameters(&ArchitectureConfig::default(), 8).unwrap();
        let batch = random_batch(3, 3);
        let emb = forward(&params, &batch).unwrap();
        let up: Vec<f64> = emb.data.iter().map(|v| 2.0 * v).collect();
        let g = backward(&params, &batch, &up).unwrap();
        assert!(g.max_abs() < 1e-10, "{}", g.max_abs());
    }

    #[test]
    fn gradient_matches_finite_differences_on_linear_probe() {
        let mut params: ParameterSet<f64> =
            init_parameters(&ArchitectureConfig::tiny(), 21).unwrap();
        let batch = random_batch(2, 22);
        let mut rng = seed::rng(23);
        // zero biases put ReLUs exactly on their kink
        for block in params
            .blocks
            .iter_mut()
            .filter(|b| b.name.ends_with(".bias"))
        {
            for v in &mut block.data {
                *v = rng.random_range(0.05..0.3);
            }
        }
        let probe: Vec<f64> = (0..2 * EMBEDDING_DIM)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let objective = |p: &ParameterSet<f64>| -> f64 {
            let e = forward(p, &batch).unwrap();
            e.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let analytic: Vec<f64> = backward(&params, &batch, &probe).unwrap().iter().collect();
        let h = 1e-4;
        for (i, &g) in analytic.iter().enumerate() {
            let orig = *params.get_mut(i).unwrap();
            *params.get_mut(i).unwrap() = orig + h;
            let up = objective(&params);
            *params.get_mut(i).unwrap() = orig - h;
            let down = objective(&params);
            *params.get_mut(i).unwrap() = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = g.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (g - numeric).abs() / scale < 1e-4,
                "param {i}: analytic {g} numeric {numeric}"
            );
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let mut rng = seed::rng(4);
        let x = Act {
            c: 2,
            n: 2,
            h: 5,
            w: 4,
            data: (0..80)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>(),
        };
        for k in [1, 3, 5] {
            let cols = im2col(&x, k);
            let y: Vec<f64> = (0..cols.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let mut back = Act {
                data: vec![0.0; 80],
                ..x.clone()
            };
            col2im(&y, &mut back, k);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
