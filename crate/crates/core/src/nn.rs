//! A small pre-activation residual convolutional network with explicit
//! backward passes.
//!
//! Layout: a patchify stem (k×k conv, stride k) followed by `B` residual
//! blocks. Block 0 keeps the stem resolution; every later block halves it with
//! a 2×2 average pool at its input. Each block computes
//! `out = shortcut(x) + conv2(relu(conv1(relu(x))))`. On top sit a linear
//! classifier and a two-layer projection head, both fed by the global average
//! of `relu(out_last)`.
//!
//! Activations inside a chunk are `[C][B·H·W]` row-major matrices, so every
//! convolution is one im2col + GEMM.

use std::io::{BufRead, Write};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LsaError, Result};
use crate::image::Image;
use crate::par;
use crate::rng;

/// Samples per forward/backward work unit. Fixed so that gradient reduction
/// order never depends on the thread count.
pub const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub image_size: usize,
    pub in_channels: usize,
    pub stem_patch: usize,
    pub block_channels: Vec<usize>,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            image_size: 32,
            in_channels: 3,
            stem_patch: 4,
            block_channels: vec![8, 16, 32],
            proj_hidden: 32,
            proj_dim: 16,
            num_classes: 10,
        }
    }
}

impl EncoderSpec {
    pub fn num_blocks(&self) -> usize {
        self.block_channels.len()
    }

    pub fn stem_size(&self) -> usize {
        self.image_size / self.stem_patch
    }

    pub fn block_size(&self, b: usize) -> usize {
        self.stem_size() >> b
    }

    /// Feature dimension at `block_index`; index `B` is the projection output.
    pub fn feature_dim(&self, block_index: usize) -> Result<usize> {
        let b = self.num_blocks();
        if block_index < b {
            Ok(self.block_channels[block_index])
        } else if block_index == b {
            Ok(self.proj_dim)
        } else {
            invalid(format!(
                "block index {block_index} out of range [0, {b}] (B = projection output)"
            ))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks() < 2 {
            return invalid("encoder needs at least 2 residual blocks");
        }
        if self.proj_dim < 2 {
            return invalid("projection dimension must be at least 2");
        }
        if self.num_classes < 2 {
            return invalid("at least 2 classes are required");
        }
        if self.stem_patch == 0 || self.image_size % self.stem_patch != 0 {
            return invalid("image_size must be a multiple of stem_patch");
        }
        let s = self.stem_size();
        let down = 1usize << (self.num_blocks() - 1);
        if s % down != 0 || s / down == 0 {
            return invalid(format!(
                "stem resolution {s} cannot be halved {} times",
                self.num_blocks() - 1
            ));
        }
        if self.block_channels.iter().any(|&c| c == 0) || self.in_channels == 0 {
            return invalid("channel counts must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Span {
    off: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct ConvP {
    w: Span,
    b: Span,
    cin: usize,
    cout: usize,
    k: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct BlockP {
    conv1: ConvP,
    conv2: ConvP,
    shortcut: Option<ConvP>,
    down: bool,
    size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct LinearP {
    w: Span,
    b: Span,
    din: usize,
    dout: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    stem: ConvP,
    blocks: Vec<BlockP>,
    classifier: LinearP,
    proj1: LinearP,
    proj2: LinearP,
    total: usize,
}

impl Layout {
    fn new(spec: &EncoderSpec) -> Self {
        let mut off = 0usize;
        let mut span = |len: usize| {
            let s = Span { off, len };
            off += len;
            s
        };
        let mut conv = |cin: usize, cout: usize, k: usize| ConvP {
            w: span(cout * cin * k * k),
            b: span(cout),
            cin,
            cout,
            k,
        };
        let c0 = spec.block_channels[0];
        let stem = conv(spec.in_channels, c0, spec.stem_patch);
        let mut blocks = Vec::new();
        let mut cin = c0;
        for (b, &cout) in spec.block_channels.iter().enumerate() {
            let conv1 = conv(cin, cout, 3);
            let conv2 = conv(cout, cout, 3);
            let shortcut = (cin != cout).then(|| conv(cin, cout, 1));
            blocks.push(BlockP {
                conv1,
                conv2,
                shortcut,
                down: b > 0,
                size: spec.block_size(b),
            });
            cin = cout;
        }
        let mut off2 = off;
        let mut span2 = |len: usize| {
            let s = Span { off: off2, len };
            off2 += len;
            s
        };
        let mut lin = |din: usize, dout: usize| LinearP {
            w: span2(dout * din),
            b: span2(dout),
            din,
            dout,
        };
        let last = *spec.block_channels.last().unwrap();
        let classifier = lin(last, spec.num_classes);
        let proj1 = lin(last, spec.proj_hidden);
        let proj2 = lin(spec.proj_hidden, spec.proj_dim);
        Layout {
            stem,
            blocks,
            classifier,
            proj1,
            proj2,
            total: off2,
        }
    }
}

// ---------------------------------------------------------------------------
// dense kernels

/// `c = alpha · op(a) · op(b) + beta · c`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe exactly those buffers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[C][B][H][W]` → `[(C·k·k)][B·Ho·Wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    b: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let ncol = b * ho * wo;
    let mut cols = vec![0f32; c * k * k * ncol];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for bi in 0..b {
                    let src = &x[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    b: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let ncol = b * ho * wo;
    let mut x = vec![0f32; c * b * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for bi in 0..b {
                    let dst = &mut x[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        for (ox, s) in srow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

fn relu_backward_inplace(grad: &mut [f32], pre: &[f32]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 average pool over `[C·B][H][W]` planes.
fn avgpool2(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0f32; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * wo + xx] = 0.25 * s;
            }
        }
    }
    out
}

fn avgpool2_backward(g: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0f32; planes * h * w];
    for p in 0..planes {
        let src = &g[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let v = 0.25 * src[y * wo + xx];
                dst[2 * y * w + 2 * xx] = v;
                dst[2 * y * w + 2 * xx + 1] = v;
                dst[(2 * y + 1) * w + 2 * xx] = v;
                dst[(2 * y + 1) * w + 2 * xx + 1] = v;
            }
        }
    }
    out
}

/// `[C][B][HW]` → `[B][C]` spatial mean.
fn global_pool(x: &[f32], c: usize, b: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0f32; b * c];
    for ci in 0..c {
        for bi in 0..b {
            let s: f32 = x[(ci * b + bi) * hw..(ci * b + bi + 1) * hw].iter().sum();
            out[bi * c + ci] = s / hw as f32;
        }
    }
    out
}

fn global_pool_backward(g: &[f32], c: usize, b: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0f32; c * b * hw];
    for ci in 0..c {
        for bi in 0..b {
            let v = g[bi * c + ci] / hw as f32;
            out[(ci * b + bi) * hw..(ci * b + bi + 1) * hw].fill(v);
        }
    }
    out
}

fn add_bias_rows(y: &mut [f32], bias: &[f32], ncol: usize) {
    for (row, &bv) in y.chunks_exact_mut(ncol).zip(bias) {
        for v in row {
            *v += bv;
        }
    }
}

fn add_bias_cols(y: &mut [f32], bias: &[f32]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, &bv) in row.iter_mut().zip(bias) {
            *v += bv;
        }
    }
}

// ---------------------------------------------------------------------------
// network

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: EncoderSpec,
    layout: Layout,
    pub params: Vec<f32>,
}

/// What a forward pass should keep around.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Outputs only.
    Infer,
    /// Outputs plus per-block pooled features.
    Features,
    /// Outputs plus everything `backward` needs.
    Train,
}

struct BlockCache {
    xp: Vec<f32>,
    cols1: Vec<f32>,
    h1: Vec<f32>,
    cols2: Vec<f32>,
}

struct ChunkCache {
    n: usize,
    stem_cols: Vec<f32>,
    blocks: Vec<BlockCache>,
    last_out: Vec<f32>,
    pooled: Vec<f32>,
    proj_pre: Vec<f32>,
}

struct ChunkOut {
    logits: Vec<f32>,
    proj: Vec<f32>,
    block_feats: Vec<Vec<f32>>,
    cache: Option<ChunkCache>,
}

/// Outputs of a batch forward pass.
pub struct BatchForward {
    pub n: usize,
    /// `[n][num_classes]`
    pub logits: Vec<f32>,
    /// `[n][proj_dim]`, not normalized.
    pub proj: Vec<f32>,
    /// Per block, `[n][C_b]` globally averaged activations (unnormalized).
    /// Empty unless the pass ran in `Features` mode.
    pub block_feats: Vec<Vec<f32>>,
    caches: Vec<ChunkCache>,
}

impl BatchForward {
    pub fn has_cache(&self) -> bool {
        !self.caches.is_empty()
    }
}

impl Network {
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut params = vec![0f32; layout.total];
        let mut r = rng::derive(seed, 0x5eed);
        let mut fill = |s: Span, std: f32, params: &mut [f32]| {
            let n = Normal::new(0.0f32, std).unwrap();
            for p in &mut params[s.off..s.off + s.len] {
                *p = n.sample(&mut r);
            }
        };
        let he = |fan_in: usize| (2.0 / fan_in as f32).sqrt();
        fill(layout.stem.w, he(layout.stem.cin * layout.stem.k * layout.stem.k), &mut params);
        for b in &layout.blocks {
            fill(b.conv1.w, he(b.conv1.cin * 9), &mut params);
            // Residual branch starts small so the untrained net is close to
            // its shortcut path.
            fill(b.conv2.w, 0.2 * he(b.conv2.cin * 9), &mut params);
            if let Some(s) = &b.shortcut {
                fill(s.w, he(s.cin), &mut params);
            }
        }
        let lin_std = |d: usize| 1.0 / (d as f32).sqrt();
        fill(layout.classifier.w, lin_std(layout.classifier.din), &mut params);
        fill(layout.proj1.w, he(layout.proj1.din), &mut params);
        fill(layout.proj2.w, lin_std(layout.proj2.din), &mut params);
        Ok(Network {
            spec,
            layout,
            params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn p(&self, s: Span) -> &[f32] {
        &self.params[s.off..s.off + s.len]
    }

    fn to_chunk_input(&self, images: &[Image]) -> Result<Vec<f32>> {
        let s = self.spec.image_size;
        let c = self.spec.in_channels;
        let b = images.len();
        let mut x = vec![0f32; c * b * s * s];
        for (bi, img) in images.iter().enumerate() {
            if img.shape() != (s, s, c) {
                return invalid(format!(
                    "image shape {:?} does not match encoder input {s}x{s}x{c}",
                    img.shape()
                ));
            }
            for y in 0..s {
                for xx in 0..s {
                    for ci in 0..c {
                        x[((ci * b + bi) * s + y) * s + xx] = img.get(y, xx, ci);
                    }
                }
            }
        }
        Ok(x)
    }

    fn conv_forward(&self, cp: &ConvP, cols: &[f32], ncol: usize) -> Vec<f32> {
        let mut y = vec![0f32; cp.cout * ncol];
        gemm(cp.cout, cp.cin * cp.k * cp.k, ncol, self.p(cp.w), false, cols, false, &mut y, 0.0);
        add_bias_rows(&mut y, self.p(cp.b), ncol);
        y
    }

    fn linear_forward(&self, lp: &LinearP, x: &[f32], n: usize) -> Vec<f32> {
        let mut y = vec![0f32; n * lp.dout];
        gemm(n, lp.din, lp.dout, x, false, self.p(lp.w), true, &mut y, 0.0);
        add_bias_cols(&mut y, self.p(lp.b));
        y
    }

    fn forward_chunk(&self, images: &[Image], mode: Mode) -> Result<ChunkOut> {
        let n = images.len();
        let spec = &self.spec;
        let x = self.to_chunk_input(images)?;
        let s = spec.image_size;
        let st = &self.layout.stem;
        let (stem_cols, ho, wo) = im2col(&x, spec.in_channels, n, s, s, st.k, st.k, 0);
        let mut act = self.conv_forward(st, &stem_cols, n * ho * wo);
        let mut size = ho;

        let mut blocks = Vec::new();
        let mut block_feats = Vec::new();
        for bp in &self.layout.blocks {
            let xp = if bp.down {
                let p = avgpool2(&act, bp.conv1.cin * n, size, size);
                size /= 2;
                p
            } else {
                act
            };
            let hw = size * size;
            let ncol = n * hw;
            let a1 = relu(&xp);
            let (cols1, _, _) = im2col(&a1, bp.conv1.cin, n, size, size, 3, 1, 1);
            let h1 = self.conv_forward(&bp.conv1, &cols1, ncol);
            let a2 = relu(&h1);
            let (cols2, _, _) = im2col(&a2, bp.conv2.cin, n, size, size, 3, 1, 1);
            let mut out = self.conv_forward(&bp.conv2, &cols2, ncol);
            match &bp.shortcut {
                Some(sc) => {
                    let s_out = self.conv_forward(sc, &xp, ncol);
                    for (o, v) in out.iter_mut().zip(&s_out) {
                        *o += v;
                    }
                }
                None => {
                    for (o, v) in out.iter_mut().zip(&xp) {
                        *o += v;
                    }
                }
            }
            if mode == Mode::Features {
                block_feats.push(global_pool(&out, bp.conv2.cout, n, hw));
            }
            if mode == Mode::Train {
                blocks.push(BlockCache { xp, cols1, h1, cols2 });
            }
            act = out;
        }

        let last_c = *spec.block_channels.last().unwrap();
        let hw = size * size;
        let pooled = global_pool(&relu(&act), last_c, n, hw);
        let logits = self.linear_forward(&self.layout.classifier, &pooled, n);
        let proj_pre = self.linear_forward(&self.layout.proj1, &pooled, n);
        let proj = self.linear_forward(&self.layout.proj2, &relu(&proj_pre), n);

        let cache = (mode == Mode::Train).then(|| ChunkCache {
            n,
            stem_cols,
            blocks,
            last_out: act,
            pooled,
            proj_pre,
        });
        Ok(ChunkOut {
            logits,
            proj,
            block_feats,
            cache,
        })
    }

    /// Forward pass over a batch, chunked and (with the `parallel` feature)
    /// spread over the rayon pool.
    pub fn forward(&self, images: &[Image], mode: Mode) -> Result<BatchForward> {
        let outs = par::map_chunks(images, CHUNK, |_, chunk| self.forward_chunk(chunk, mode));
        let mut logits = Vec::with_capacity(images.len() * self.spec.num_classes);
        let mut proj = Vec::with_capacity(images.len() * self.spec.proj_dim);
        let nb = self.spec.num_blocks();
        let mut block_feats = if mode == Mode::Features {
            vec![Vec::new(); nb]
        } else {
            Vec::new()
        };
        let mut caches = Vec::new();
        for o in outs {
            let o = o?;
            logits.extend_from_slice(&o.logits);
            proj.extend_from_slice(&o.proj);
            for (dst, src) in block_feats.iter_mut().zip(&o.block_feats) {
                dst.extend_from_slice(src);
            }
            if let Some(c) = o.cache {
                caches.push(c);
            }
        }
        Ok(BatchForward {
            n: images.len(),
            logits,
            proj,
            block_feats,
            caches,
        })
    }

    fn backward_chunk(
        &self,
        c: &ChunkCache,
        dlogits: Option<&[f32]>,
        dproj: Option<&[f32]>,
    ) -> Vec<f32> {
        let mut g = vec![0f32; self.params.len()];
        let n = c.n;
        let spec = &self.spec;
        let last_c = *spec.block_channels.last().unwrap();
        let mut dpooled = vec![0f32; n * last_c];

        let lin_back = |lp: &LinearP, x: &[f32], dy: &[f32], g: &mut [f32], dx: &mut [f32]| {
            // dW = dyᵀ x ; db = Σ dy ; dx += dy W
            gemm(
                lp.dout,
                n,
                lp.din,
                dy,
                true,
                x,
                false,
                &mut g[lp.w.off..lp.w.off + lp.w.len],
                1.0,
            );
            let gb = &mut g[lp.b.off..lp.b.off + lp.b.len];
            for row in dy.chunks_exact(lp.dout) {
                for (b, &v) in gb.iter_mut().zip(row) {
                    *b += v;
                }
            }
            gemm(n, lp.dout, lp.din, dy, false, self.p(lp.w), false, dx, 1.0);
        };

        if let Some(dl) = dlogits {
            lin_back(&self.layout.classifier, &c.pooled, dl, &mut g, &mut dpooled);
        }
        if let Some(dp) = dproj {
            let hidden = relu(&c.proj_pre);
            let mut dhidden = vec![0f32; n * spec.proj_hidden];
            lin_back(&self.layout.proj2, &hidden, dp, &mut g, &mut dhidden);
            relu_backward_inplace(&mut dhidden, &c.proj_pre);
            lin_back(&self.layout.proj1, &c.pooled, &dhidden, &mut g, &mut dpooled);
        }

        let mut size = spec.block_size(spec.num_blocks() - 1);
        let mut dout = global_pool_backward(&dpooled, last_c, n, size * size);
        relu_backward_inplace(&mut dout, &c.last_out);

        for (bp, bc) in self.layout.blocks.iter().zip(&c.blocks).rev() {
            let hw = size * size;
            let ncol = n * hw;
            // residual branch
            let k2 = bp.conv2.cin * 9;
            gemm(bp.conv2.cout, ncol, k2, &dout, false, &bc.cols2, true, &mut g[bp.conv2.w.off..bp.conv2.w.off + bp.conv2.w.len], 1.0);
            accumulate_row_sums(&dout, ncol, &mut g[bp.conv2.b.off..bp.conv2.b.off + bp.conv2.b.len]);
            let mut dcols2 = vec![0f32; k2 * ncol];
            gemm(k2, bp.conv2.cout, ncol, self.p(bp.conv2.w), true, &dout, false, &mut dcols2, 0.0);
            let mut dh1 = col2im(&dcols2, bp.conv2.cin, n, size, size, 3, 1, 1);
            relu_backward_inplace(&mut dh1, &bc.h1);

            let k1 = bp.conv1.cin * 9;
            gemm(bp.conv1.cout, ncol, k1, &dh1, false, &bc.cols1, true, &mut g[bp.conv1.w.off..bp.conv1.w.off + bp.conv1.w.len], 1.0);
            accumulate_row_sums(&dh1, ncol, &mut g[bp.conv1.b.off..bp.conv1.b.off + bp.conv1.b.len]);
            let mut dcols1 = vec![0f32; k1 * ncol];
            gemm(k1, bp.conv1.cout, ncol, self.p(bp.conv1.w), true, &dh1, false, &mut dcols1, 0.0);
            let mut dxp = col2im(&dcols1, bp.conv1.cin, n, size, size, 3, 1, 1);
            relu_backward_inplace(&mut dxp, &bc.xp);

            // shortcut
            match &bp.shortcut {
                Some(sc) => {
                    gemm(sc.cout, ncol, sc.cin, &dout, false, &bc.xp, true, &mut g[sc.w.off..sc.w.off + sc.w.len], 1.0);
                    accumulate_row_sums(&dout, ncol, &mut g[sc.b.off..sc.b.off + sc.b.len]);
                    gemm(sc.cin, sc.cout, ncol, self.p(sc.w), true, &dout, false, &mut dxp, 1.0);
                }
                None => {
                    for (d, v) in dxp.iter_mut().zip(&dout) {
                        *d += v;
                    }
                }
            }

            dout = if bp.down {
                let d = avgpool2_backward(&dxp, bp.conv1.cin * n, size * 2, size * 2);
                size *= 2;
                d
            } else {
                dxp
            };
        }

        let st = &self.layout.stem;
        let ncol = n * size * size;
        let ks = st.cin * st.k * st.k;
        gemm(st.cout, ncol, ks, &dout, false, &c.stem_cols, true, &mut g[st.w.off..st.w.off + st.w.len], 1.0);
        accumulate_row_sums(&dout, ncol, &mut g[st.b.off..st.b.off + st.b.len]);
        g
    }

    /// Parameter gradient for upstream gradients on logits and/or projection
    /// outputs (row-major `[n][·]`, aligned with the forward batch).
    pub fn backward(
        &self,
        fwd: &BatchForward,
        dlogits: Option<&[f32]>,
        dproj: Option<&[f32]>,
    ) -> Result<Vec<f32>> {
        if !fwd.has_cache() && fwd.n > 0 {
            return invalid("backward needs a forward pass run in Train mode");
        }
        let k = self.spec.num_classes;
        let p = self.spec.proj_dim;
        if let Some(d) = dlogits {
            if d.len() != fwd.n * k {
                return Err(LsaError::DimensionMismatch {
                    expected: fwd.n * k,
                    got: d.len(),
                });
            }
        }
        if let Some(d) = dproj {
            if d.len() != fwd.n * p {
                return Err(LsaError::DimensionMismatch {
                    expected: fwd.n * p,
                    got: d.len(),
                });
            }
        }
        let mut offsets = Vec::with_capacity(fwd.caches.len());
        let mut off = 0;
        for c in &fwd.caches {
            offsets.push(off);
            off += c.n;
        }
        let parts = par::map_range(fwd.caches.len(), |i| {
            let c = &fwd.caches[i];
            let o = offsets[i];
            self.backward_chunk(
                c,
                dlogits.map(|d| &d[o * k..(o + c.n) * k]),
                dproj.map(|d| &d[o * p..(o + c.n) * p]),
            )
        });
        let mut g = vec![0f32; self.params.len()];
        for part in parts {
            for (a, b) in g.iter_mut().zip(&part) {
                *a += b;
            }
        }
        Ok(g)
    }

    /// Unit-norm features at `block_index` (B = projection output).
    pub fn features(&self, images: &[Image], block_index: usize) -> Result<Vec<Vec<f32>>> {
        let b = self.spec.num_blocks();
        self.spec.feature_dim(block_index)?;
        let fwd = self.forward(images, if block_index < b { Mode::Features } else { Mode::Infer })?;
        let (flat, d) = if block_index < b {
            (&fwd.block_feats[block_index], self.spec.block_channels[block_index])
        } else {
            (&fwd.proj, self.spec.proj_dim)
        };
        flat.chunks_exact(d)
            .enumerate()
            .map(|(i, row)| {
                l2_normalized(row).ok_or_else(|| {
                    LsaError::Degenerate(format!(
                        "sample {i}: zero activation vector at block {block_index} cannot be normalized"
                    ))
                })
            })
            .collect()
    }

    pub fn logits(&self, images: &[Image]) -> Result<Vec<f32>> {
        Ok(self.forward(images, Mode::Infer)?.logits)
    }

    // ---- checkpoint IO

    pub fn save<W: Write>(&self, mut w: W, meta: &CheckpointMeta) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            num_params: self.params.len(),
            meta: meta.clone(),
        };
        w.write_all(CHECKPOINT_MAGIC)?;
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(mut r: R) -> Result<(Self, CheckpointMeta)> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(LsaError::Format("not a checkpoint file".into()));
        }
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        if header.version != CHECKPOINT_VERSION {
            return Err(LsaError::Format(format!(
                "checkpoint version {} unsupported",
                header.version
            )));
        }
        let mut net = Network::new(header.spec, 0)?;
        if net.params.len() != header.num_params {
            return Err(LsaError::Format("parameter count does not match architecture".into()));
        }
        let mut buf = vec![0u8; header.num_params * 4];
        r.read_exact(&mut buf)?;
        for (p, b) in net.params.iter_mut().zip(buf.chunks_exact(4)) {
            *p = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        Ok((net, header.meta))
    }
}

fn accumulate_row_sums(m: &[f32], ncol: usize, out: &mut [f32]) {
    for (row, o) in m.chunks_exact(ncol).zip(out.iter_mut()) {
        *o += row.iter().sum::<f32>();
    }
}

pub fn l2_normalized(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

const CHECKPOINT_MAGIC: &[u8; 9] = b"LSACKPT1\n";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: usize,
    /// True when no training step was ever applied.
    pub randomly_initialized: bool,
    #[serde(default)]
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    spec: EncoderSpec,
    num_params: usize,
    meta: CheckpointMeta,
}

// ---------------------------------------------------------------------------
// optimizer

/// SGD with momentum and decoupled-from-nothing (PyTorch-style) weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) {
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm` (no-op when
/// `max_norm <= 0`). Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f32) / total as f32;
    0.5 * base * (1.0 + (std::f32::consts::PI * t).cos())
}

// ---------------------------------------------------------------------------
// elementwise helpers shared by the losses

pub fn softmax_rows(logits: &[f32], k: usize) -> Vec<f32> {
    let mut out = vec![0f32; logits.len()];
    for (row, o) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0f32;
        for (x, y) in row.iter().zip(o.iter_mut()) {
            *y = (x - m).exp();
            s += *y;
        }
        for y in o.iter_mut() {
            *y /= s;
        }
    }
    out
}

pub fn log_softmax_rows(logits: &[f32], k: usize) -> Vec<f32> {
    let mut out = vec![0f32; logits.len()];
    for (row, o) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f32>().ln();
        for (x, y) in row.iter().zip(o.iter_mut()) {
            *y = x - lse;
        }
    }
    out
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
