//! Gaussian prediction network: a local-feature point encoder and six
//! splitting decoders that turn each initial Gaussian into `K` refined ones.
//!
//! All layers are shared per-point MLPs, differentiated by hand. Row-major
//! buffers throughout: an `n x w` activation stores point `j` at
//! `[j * w, (j + 1) * w)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussians::{Gaussian2DSet, Space, SH_COEFFS};
use crate::geometry::NeighborIndex;
use crate::rasterizer::GaussianGradients;
use crate::real::Real;
use crate::vec3;

/// Per-point input width: position 3, color 3, normal 3, scale 2.
pub const INPUT_WIDTH: usize = 11;
/// Channels per split emitted by the position, scale, color, normal, angle
/// and opacity decoders.
pub const DECODER_CHANNELS: [usize; 6] = [3, 2, SH_COEFFS, 3, 1, 1];
pub const DECODER_NAMES: [&str; 6] = ["position", "scale", "color", "normal", "angle", "opacity"];
pub const LEAKY_SLOPE: f64 = 0.01;
/// Opacity logit offset: a zero shift maps to `sigmoid(6) ~= 0.9975`.
pub const OPACITY_BIAS: f64 = 6.0;
pub const SCALE_SHIFT_CLAMP: f64 = 10.0;

const D_X: usize = 0;
const D_S: usize = 1;
const D_C: usize = 2;
const D_N: usize = 3;
const D_A: usize = 4;
const D_O: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// Split count.
    pub k: usize,
    /// Encoder stage widths; the last entry is the feature width.
    pub encoder_widths: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Neighbourhood size for the encoder's max aggregation.
    pub encoder_knn: usize,
}

impl Architecture {
    /// Full-size network: 640-d features and 512-512-512-256-128 decoders.
    pub fn full(k: usize) -> Self {
        Self {
            k,
            encoder_widths: vec![64, 128, 256, 640],
            decoder_hidden: vec![512, 512, 512, 256, 128],
            encoder_knn: 16,
        }
    }

    pub fn feature_width(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&0)
    }

    pub fn decoder_input(&self) -> usize {
        self.feature_width() + INPUT_WIDTH
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("split count K must be at least 1"));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::invalid("encoder widths must be non-empty and positive"));
        }
        if self.decoder_hidden.contains(&0) {
            return Err(Error::invalid("decoder widths must be positive"));
        }
        if self.encoder_knn == 0 {
            return Err(Error::invalid("encoder neighbourhood size must be positive"));
        }
        Ok(())
    }
}

#[inline(always)]
fn leaky<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * T::of(LEAKY_SLOPE)
    }
}

/// Derivative factor from the activation output (same sign as the input).
#[inline(always)]
fn leaky_grad<T: Real>(y: T) -> T {
    if y > T::zero() {
        T::one()
    } else {
        T::of(LEAKY_SLOPE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayerParams<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Real> LinearLayerParams<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            biases: vec![T::zero(); outputs],
        }
    }

    /// Uniform fan-in scaling for leaky-rectifier layers, zero biases.
    pub fn kaiming(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let bound = gain * (3.0 / inputs as f64).sqrt();
        let mut l = Self::zeros(inputs, outputs);
        for w in &mut l.weights {
            *w = T::of(rng.random_range(-bound..bound));
        }
        l
    }

    /// `y = x W^T + b` for `rows` inputs.
    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.inputs);
        let mut y = Vec::with_capacity(rows * self.outputs);
        for _ in 0..rows {
            y.extend_from_slice(&self.biases);
        }
        T::gemm(
            rows,
            self.inputs,
            self.outputs,
            T::one(),
            x,
            self.inputs as isize,
            1,
            &self.weights,
            1,
            self.inputs as isize,
            T::one(),
            &mut y,
            self.outputs as isize,
            1,
        );
        y
    }

    /// Accumulate parameter gradients into `grad`; return `dL/dx` when asked.
    pub fn backward(&self, x: &[T], dy: &[T], rows: usize, grad: &mut Self, want_dx: bool) -> Option<Vec<T>> {
        debug_assert_eq!(dy.len(), rows * self.outputs);
        // dW += dy^T x
        T::gemm(
            self.outputs,
            rows,
            self.inputs,
            T::one(),
            dy,
            1,
            self.outputs as isize,
            x,
            self.inputs as isize,
            1,
            T::one(),
            &mut grad.weights,
            self.inputs as isize,
            1,
        );
        for r in 0..rows {
            for (g, d) in grad.biases.iter_mut().zip(&dy[r * self.outputs..(r + 1) * self.outputs]) {
                *g += *d;
            }
        }
        if !want_dx {
            return None;
        }
        let mut dx = vec![T::zero(); rows * self.inputs];
        T::gemm(
            rows,
            self.outputs,
            self.inputs,
            T::one(),
            dy,
            self.outputs as isize,
            1,
            &self.weights,
            self.inputs as isize,
            1,
            T::zero(),
            &mut dx,
            self.inputs as isize,
            1,
        );
        Some(dx)
    }
}

/// Shared per-point MLP with leaky-rectifier hidden layers and a linear
/// output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<LinearLayerParams<T>>,
}

pub struct MlpCache<T> {
    /// Post-activation outputs of the hidden layers.
    hidden: Vec<Vec<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, MlpCache<T>) {
        let mut hidden: Vec<Vec<T>> = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let input: &[T] = if i == 0 { x } else { &hidden[i - 1] };
            let mut y = layer.forward(input, rows);
            if i == last {
                return (y, MlpCache { hidden });
            }
            y.iter_mut().for_each(|v| *v = leaky(*v));
            hidden.push(y);
        }
        unreachable!("an MLP has at least one layer")
    }

    pub fn backward(&self, x: &[T], cache: &MlpCache<T>, d_out: &[T], rows: usize, grad: &mut Self, want_dx: bool) -> Option<Vec<T>> {
        let mut d = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let input: &[T] = if i == 0 { x } else { &cache.hidden[i - 1] };
            let need = i > 0 || want_dx;
            let dx = self.layers[i].backward(input, &d, rows, &mut grad.layers[i], need);
            if i == 0 {
                return dx;
            }
            d = dx.unwrap();
            for (dv, y) in d.iter_mut().zip(&cache.hidden[i - 1]) {
                *dv *= leaky_grad(*y);
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T> {
    /// Per-point transform before aggregation.
    pub local: LinearLayerParams<T>,
    /// Projection of `[center, neighbourhood max]`.
    pub fuse: LinearLayerParams<T>,
    /// Residual projection when the width changes.
    pub skip: Option<LinearLayerParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub stem: LinearLayerParams<T>,
    pub blocks: Vec<EncoderBlock<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T> {
    pub k: usize,
    /// Position, scale, color, normal, angle and opacity decoders.
    pub heads: Vec<Mlp<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleParams<T> {
    pub arch: Architecture,
    pub encoder: EncoderParams<T>,
    pub decoders: DecoderParams<T>,
}

impl<T: Real> ModuleParams<T> {
    /// Fan-in scaled hidden layers and zero-initialized decoder output layers,
    /// so an untrained module reproduces its input Gaussians.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        Self::build(arch, Some(&mut ChaCha8Rng::seed_from_u64(seed)))
    }

    /// All-zero parameters of the given architecture.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        Self::build(arch, None)
    }

    fn build(arch: &Architecture, mut rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        arch.validate()?;
        let mut layer = |inputs: usize, outputs: usize| match rng.as_deref_mut() {
            Some(r) => LinearLayerParams::kaiming(inputs, outputs, r),
            None => LinearLayerParams::zeros(inputs, outputs),
        };
        let w = &arch.encoder_widths;
        let stem = layer(INPUT_WIDTH, w[0]);
        let mut blocks = Vec::new();
        for i in 0..w.len() {
            let inp = if i == 0 { w[0] } else { w[i - 1] };
            let out = w[i];
            blocks.push(EncoderBlock {
                local: layer(inp, out),
                fuse: layer(2 * out, out),
                skip: (inp != out).then(|| layer(inp, out)),
            });
        }
        let mut heads = Vec::new();
        for c in DECODER_CHANNELS {
            let mut layers = Vec::new();
            let mut inp = arch.decoder_input();
            for &hidden in &arch.decoder_hidden {
                layers.push(layer(inp, hidden));
                inp = hidden;
            }
            layers.push(LinearLayerParams::zeros(inp, arch.k * c));
            heads.push(Mlp { layers });
        }
        Ok(Self {
            arch: arch.clone(),
            encoder: EncoderParams { stem, blocks },
            decoders: DecoderParams { k: arch.k, heads },
        })
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        fn push<'a, U>(out: &mut Vec<&'a [U]>, l: &'a LinearLayerParams<U>) {
            out.push(&l.weights);
            out.push(&l.biases);
        }
        push(&mut out, &self.encoder.stem);
        for b in &self.encoder.blocks {
            push(&mut out, &b.local);
            push(&mut out, &b.fuse);
            if let Some(s) = &b.skip {
                push(&mut out, s);
            }
        }
        for h in &self.decoders.heads {
            for l in &h.layers {
                push(&mut out, l);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        fn push<'a, U: Real>(out: &mut Vec<&'a mut [U]>, l: &'a mut LinearLayerParams<U>) {
            out.push(&mut l.weights);
            out.push(&mut l.biases);
        }
        push(&mut out, &mut self.encoder.stem);
        for b in &mut self.encoder.blocks {
            push(&mut out, &mut b.local);
            push(&mut out, &mut b.fuse);
            if let Some(s) = &mut b.skip {
                push(&mut out, s);
            }
        }
        for h in &mut self.decoders.heads {
            for l in &mut h.layers {
                push(&mut out, l);
            }
        }
        out
    }

    /// Name of each tensor, aligned with [`Self::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["encoder.stem.w".to_string(), "encoder.stem.b".to_string()];
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            for part in ["local", "fuse"] {
                out.push(format!("encoder.block{i}.{part}.w"));
                out.push(format!("encoder.block{i}.{part}.b"));
            }
            if b.skip.is_some() {
                out.push(format!("encoder.block{i}.skip.w"));
                out.push(format!("encoder.block{i}.skip.b"));
            }
        }
        for (h, head) in self.decoders.heads.iter().enumerate() {
            for l in 0..head.layers.len() {
                out.push(format!("decoder.{}.layer{l}.w", DECODER_NAMES[h]));
                out.push(format!("decoder.{}.layer{l}.b", DECODER_NAMES[h]));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModuleParams<U> {
        let cl = |l: &LinearLayerParams<T>| LinearLayerParams {
            inputs: l.inputs,
            outputs: l.outputs,
            weights: l.weights.iter().map(|v| U::of(v.f64())).collect(),
            biases: l.biases.iter().map(|v| U::of(v.f64())).collect(),
        };
        ModuleParams {
            arch: self.arch.clone(),
            encoder: EncoderParams {
                stem: cl(&self.encoder.stem),
                blocks: self
                    .encoder
                    .blocks
                    .iter()
                    .map(|b| EncoderBlock {
                        local: cl(&b.local),
                        fuse: cl(&b.fuse),
                        skip: b.skip.as_ref().map(cl),
                    })
                    .collect(),
            },
            decoders: DecoderParams {
                k: self.decoders.k,
                heads: self
                    .decoders
                    .heads
                    .iter()
                    .map(|h| Mlp {
                        layers: h.layers.iter().map(cl).collect(),
                    })
                    .collect(),
            },
        }
    }

    /// Overwrite every decoder output layer with uniform noise in
    /// `[-scale, scale]` (gradient checks need non-zero output layers).
    pub fn randomize_output_layers(&mut self, rng: &mut impl Rng, scale: f64) {
        for h in &mut self.decoders.heads {
            let l = h.layers.last_mut().unwrap();
            for v in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *v = T::of(rng.random_range(-scale..scale));
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Fixed-size neighbourhoods (self included) used by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods {
    pub k: usize,
    /// `n x k` point ids.
    pub ids: Vec<u32>,
}

impl Neighborhoods {
    pub fn from_index(index: &NeighborIndex, k: usize) -> Result<Self> {
        use rayon::prelude::*;
        let k = k.min(index.len());
        let rows: Vec<Vec<usize>> = index
            .points()
            .par_iter()
            .map(|&p| index.k_nearest(p, k).map(|(ids, _)| ids))
            .collect::<Result<_>>()?;
        Ok(Self {
            k,
            ids: rows.into_iter().flatten().map(|i| i as u32).collect(),
        })
    }

    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.ids.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Per-point inputs `[X, C, N, S]` of an initial Gaussian set; `C` is the
/// DC color coefficient.
pub fn point_inputs<T: Real>(init: &Gaussian2DSet<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(init.len() * INPUT_WIDTH);
    for j in 0..init.len() {
        out.extend_from_slice(&init.positions[j]);
        out.extend_from_slice(&init.sh[j][..3]);
        out.extend_from_slice(&init.normals[j]);
        out.extend_from_slice(&init.scales[j]);
    }
    out
}

struct BlockCache<T> {
    h: Vec<T>,
    argmax: Vec<u32>,
    cat: Vec<T>,
    z: Vec<T>,
    out: Vec<T>,
}

pub struct EncoderCache<T> {
    input: Vec<T>,
    stem: Vec<T>,
    blocks: Vec<BlockCache<T>>,
}

impl<T> EncoderCache<T> {
    pub fn features(&self) -> &[T] {
        match self.blocks.last() {
            Some(b) => &b.out,
            None => &self.stem,
        }
    }
}

fn encode_cached<T: Real>(p: &EncoderParams<T>, input: Vec<T>, nb: &Neighborhoods) -> Result<EncoderCache<T>> {
    if input.len() % INPUT_WIDTH != 0 || input.len() / INPUT_WIDTH != nb.len() {
        return Err(Error::invalid(format!(
            "encoder input has {} values for {} neighbourhoods of width {}",
            input.len(),
            nb.len(),
            INPUT_WIDTH
        )));
    }
    if p.stem.inputs != INPUT_WIDTH {
        return Err(Error::invalid(format!("encoder stem expects {} inputs", p.stem.inputs)));
    }
    let n = nb.len();
    let mut stem = p.stem.forward(&input, n);
    stem.iter_mut().for_each(|v| *v = leaky(*v));
    let mut blocks: Vec<BlockCache<T>> = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let f_in: &[T] = blocks.last().map(|c| c.out.as_slice()).unwrap_or(&stem);
        if f_in.len() != n * b.local.inputs {
            return Err(Error::invalid("encoder block widths do not chain"));
        }
        let w = b.local.outputs;
        let mut h = b.local.forward(f_in, n);
        h.iter_mut().for_each(|v| *v = leaky(*v));
        let mut argmax = vec![0u32; n * w];
        let mut cat = vec![T::zero(); n * 2 * w];
        for j in 0..n {
            let row = &mut cat[j * 2 * w..(j + 1) * 2 * w];
            row[..w].copy_from_slice(&h[j * w..(j + 1) * w]);
            let nbrs = &nb.ids[j * nb.k..(j + 1) * nb.k];
            let (vals, best) = (&mut row[w..], &mut argmax[j * w..(j + 1) * w]);
            let first = nbrs[0] as usize;
            vals.copy_from_slice(&h[first * w..(first + 1) * w]);
            best.fill(nbrs[0]);
            // Strict comparison keeps the earliest neighbour on ties.
            for &q in &nbrs[1..] {
                let hq = &h[q as usize * w..(q as usize + 1) * w];
                for ((v, b), &x) in vals.iter_mut().zip(best.iter_mut()).zip(hq) {
                    // Branch-free select so the loop vectorizes.
                    let keep = ((x > *v) as u32).wrapping_sub(1);
                    *v = v.max(x);
                    *b = (*b & keep) | (q & !keep);
                }
            }
        }
        let mut z = b.fuse.forward(&cat, n);
        z.iter_mut().for_each(|v| *v = leaky(*v));
        let mut out = match &b.skip {
            Some(s) => s.forward(f_in, n),
            None => f_in.to_vec(),
        };
        for (o, zv) in out.iter_mut().zip(&z) {
            *o += *zv;
        }
        blocks.push(BlockCache { h, argmax, cat, z, out });
    }
    Ok(EncoderCache { input, stem, blocks })
}

/// Returns `dL/d input` (`n x 11`).
fn encode_backward<T: Real>(
    p: &EncoderParams<T>,
    cache: &EncoderCache<T>,
    d_features: Vec<T>,
    n: usize,
    grad: &mut EncoderParams<T>,
) -> Vec<T> {
    let mut d_out = d_features;
    for (bi, b) in p.blocks.iter().enumerate().rev() {
        let c = &cache.blocks[bi];
        let f_in: &[T] = if bi == 0 { &cache.stem } else { &cache.blocks[bi - 1].out };
        let w = b.local.outputs;
        let gb = &mut grad.blocks[bi];
        let mut d_f = match (&b.skip, &mut gb.skip) {
            (Some(s), Some(gs)) => s.backward(f_in, &d_out, n, gs, true).unwrap(),
            _ => d_out.clone(),
        };
        let mut d_z = d_out;
        for (d, z) in d_z.iter_mut().zip(&c.z) {
            *d *= leaky_grad(*z);
        }
        let d_cat = b.fuse.backward(&c.cat, &d_z, n, &mut gb.fuse, true).unwrap();
        let mut d_h = vec![T::zero(); n * w];
        for j in 0..n {
            for ch in 0..w {
                d_h[j * w + ch] += d_cat[j * 2 * w + ch];
                let src = c.argmax[j * w + ch] as usize;
                d_h[src * w + ch] += d_cat[j * 2 * w + w + ch];
            }
        }
        for (d, hv) in d_h.iter_mut().zip(&c.h) {
            *d *= leaky_grad(*hv);
        }
        let d_local = b.local.backward(f_in, &d_h, n, &mut gb.local, true).unwrap();
        for (a, v) in d_f.iter_mut().zip(&d_local) {
            *a += *v;
        }
        d_out = d_f;
    }
    for (d, s) in d_out.iter_mut().zip(&cache.stem) {
        *d *= leaky_grad(*s);
    }
    p.stem.backward(&cache.input, &d_out, n, &mut grad.stem, true).unwrap()
}

/// Per-point features (`n x feature_width`) of an initial Gaussian set.
pub fn encode<T: Real>(p: &EncoderParams<T>, init: &Gaussian2DSet<T>, index: &NeighborIndex, knn: usize) -> Result<Vec<T>> {
    if index.len() != init.len() {
        return Err(Error::invalid("neighbour index does not match the point count"));
    }
    let nb = Neighborhoods::from_index(index, knn)?;
    Ok(encode_cached(p, point_inputs(init), &nb)?.blocks.pop().map(|b| b.out).unwrap_or_default())
}

/// Decoder input rows `[F, X, C, N, S]`.
fn decoder_input<T: Real>(features: &[T], inputs: &[T], n: usize) -> Vec<T> {
    let fw = features.len() / n.max(1);
    let mut out = Vec::with_capacity(n * (fw + INPUT_WIDTH));
    for j in 0..n {
        out.extend_from_slice(&features[j * fw..(j + 1) * fw]);
        out.extend_from_slice(&inputs[j * INPUT_WIDTH..(j + 1) * INPUT_WIDTH]);
    }
    out
}

/// Raw shifts of one decoder. The MLP emits `n x (K c)`; read row-major as
/// `(n K) x c`, rows `jK .. jK + K - 1` belong to point `j`.
pub fn split_decode<T: Real>(d: &Mlp<T>, features: &[T], inputs: &[T], n: usize, k: usize) -> Result<Vec<T>> {
    let x = decoder_input(features, inputs, n);
    let first = &d.layers[0];
    if x.len() != n * first.inputs {
        return Err(Error::invalid(format!(
            "decoder expects {} inputs, got {}",
            first.inputs,
            x.len() / n.max(1)
        )));
    }
    let out_w = d.layers.last().unwrap().outputs;
    if out_w % k != 0 {
        return Err(Error::invalid("decoder output width is not a multiple of K"));
    }
    Ok(d.forward(&x, n).0)
}

/// Intermediates of one prediction, reused by [`backward_with_cache`].
pub struct PredictionCache<T> {
    n: usize,
    encoder: EncoderCache<T>,
    dec_input: Vec<T>,
    heads: Vec<(Vec<T>, MlpCache<T>)>,
    /// Pre-normalization normal sums, `nK x 3`.
    normal_sums: Vec<[T; 3]>,
}

impl<T: Real> PredictionCache<T> {
    /// Hash of every branch taken: activation signs, max-pool winners, the
    /// scale clamp and the normal fallback. Finite-difference stencils that
    /// change it straddle a kink.
    pub fn decision_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let signs = |h: &mut std::collections::hash_map::DefaultHasher, v: &[T]| {
            for x in v {
                (*x > T::zero()).hash(h);
            }
        };
        signs(&mut h, &self.encoder.stem);
        for b in &self.encoder.blocks {
            signs(&mut h, &b.h);
            signs(&mut h, &b.z);
            b.argmax.hash(&mut h);
        }
        let clamp = T::of(SCALE_SHIFT_CLAMP);
        for (_, hc) in &self.heads {
            for layer in &hc.hidden {
                signs(&mut h, layer);
            }
        }
        for v in &self.heads[D_S].0 {
            (*v > -clamp && *v < clamp).hash(&mut h);
        }
        for s in &self.normal_sums {
            (vec3::norm(*s) < T::of(1e-8)).hash(&mut h);
        }
        h.finish()
    }
}

/// Gradients with respect to the initial Gaussian fields.
#[derive(Debug, Clone, PartialEq)]
pub struct InitGradients<T> {
    pub positions: Vec<[T; 3]>,
    pub colors: Vec<[T; 3]>,
    pub normals: Vec<[T; 3]>,
    pub scales: Vec<[T; 2]>,
    pub angles: Vec<T>,
}

fn check_init<T: Real>(m: &ModuleParams<T>, init: &Gaussian2DSet<T>) -> Result<()> {
    if init.space != Space::Normalized {
        return Err(Error::InvalidState("prediction expects a normalized Gaussian set".into()));
    }
    if init.is_empty() {
        return Err(Error::EmptyInput("no Gaussians to predict from"));
    }
    if m.decoders.heads.len() != 6 {
        return Err(Error::invalid("module needs exactly six decoders"));
    }
    init.validate()
}

/// Apply the six decoders to `init` and return the `K N` refined Gaussians.
pub fn predict_gaussians<T: Real>(m: &ModuleParams<T>, init: &Gaussian2DSet<T>, index: &NeighborIndex) -> Result<Gaussian2DSet<T>> {
    let nb = Neighborhoods::from_index(index, m.arch.encoder_knn)?;
    Ok(forward_with_cache(m, init, &nb)?.0)
}

pub fn forward_with_cache<T: Real>(
    m: &ModuleParams<T>,
    init: &Gaussian2DSet<T>,
    nb: &Neighborhoods,
) -> Result<(Gaussian2DSet<T>, PredictionCache<T>)> {
    check_init(m, init)?;
    let n = init.len();
    if nb.len() != n {
        return Err(Error::invalid("neighbourhoods do not match the point count"));
    }
    let k = m.arch.k;
    let inputs = point_inputs(init);
    let encoder = encode_cached(&m.encoder, inputs.clone(), nb)?;
    let dec_input = decoder_input(encoder.features(), &inputs, n);
    let mut heads = Vec::with_capacity(6);
    for (h, head) in m.decoders.heads.iter().enumerate() {
        if head.layers[0].inputs * n != dec_input.len() {
            return Err(Error::invalid(format!(
                "{} decoder expects {} inputs, features give {}",
                DECODER_NAMES[h],
                head.layers[0].inputs,
                dec_input.len() / n
            )));
        }
        if head.layers.last().unwrap().outputs != k * DECODER_CHANNELS[h] {
            return Err(Error::invalid(format!("{} decoder output width mismatch", DECODER_NAMES[h])));
        }
        heads.push(head.forward(&dec_input, n));
    }

    let zero = T::zero();
    let one = T::one();
    let clamp = T::of(SCALE_SHIFT_CLAMP);
    let bias = T::of(OPACITY_BIAS);
    let mut out = Gaussian2DSet::empty(Space::Normalized);
    let mut normal_sums = Vec::with_capacity(n * k);
    for j in 0..n {
        for r in 0..k {
            let row = j * k + r;
            let dx = &heads[D_X].0[row * 3..row * 3 + 3];
            out.positions.push(vec3::add(init.positions[j], [dx[0], dx[1], dx[2]]));
            let ds = &heads[D_S].0[row * 2..row * 2 + 2];
            out.scales.push([
                init.scales[j][0] * ds[0].max(-clamp).min(clamp).exp(),
                init.scales[j][1] * ds[1].max(-clamp).min(clamp).exp(),
            ]);
            let dc = &heads[D_C].0[row * SH_COEFFS..(row + 1) * SH_COEFFS];
            let mut sh = [zero; SH_COEFFS];
            for (i, v) in sh.iter_mut().enumerate() {
                *v = dc[i] + if i < 3 { init.sh[j][i] } else { zero };
            }
            out.sh.push(sh);
            let dn = &heads[D_N].0[row * 3..row * 3 + 3];
            let sum = vec3::add(init.normals[j], [dn[0], dn[1], dn[2]]);
            let len = vec3::norm(sum);
            out.normals.push(if len < T::of(1e-8) {
                init.normals[j]
            } else {
                vec3::scale(sum, one / len)
            });
            normal_sums.push(sum);
            out.angles.push(init.angles[j] + heads[D_A].0[row]);
            let o = heads[D_O].0[row] + bias;
            out.opacities.push(one / (one + (-o).exp()));
        }
    }
    Ok((
        out,
        PredictionCache {
            n,
            encoder,
            dec_input,
            heads,
            normal_sums,
        },
    ))
}

/// Stateless reverse pass: recomputes the forward internally.
pub fn backward<T: Real>(
    m: &ModuleParams<T>,
    init: &Gaussian2DSet<T>,
    index: &NeighborIndex,
    grads: &GaussianGradients<T>,
) -> Result<(ModuleParams<T>, InitGradients<T>)> {
    let nb = Neighborhoods::from_index(index, m.arch.encoder_knn)?;
    let (pred, cache) = forward_with_cache(m, init, &nb)?;
    let mut pg = m.zeros_like();
    let ig = backward_with_cache(m, init, &pred, &cache, grads, &mut pg)?;
    Ok((pg, ig))
}

/// Accumulate parameter gradients into `param_grads` and return the
/// gradients with respect to the initial Gaussians.
pub fn backward_with_cache<T: Real>(
    m: &ModuleParams<T>,
    init: &Gaussian2DSet<T>,
    pred: &Gaussian2DSet<T>,
    cache: &PredictionCache<T>,
    grads: &GaussianGradients<T>,
    param_grads: &mut ModuleParams<T>,
) -> Result<InitGradients<T>> {
    let n = cache.n;
    let k = m.arch.k;
    if grads.len() != n * k || pred.len() != n * k {
        return Err(Error::invalid(format!(
            "gradients for {} Gaussians, prediction has {}",
            grads.len(),
            n * k
        )));
    }
    let zero = T::zero();
    let one = T::one();
    let clamp = T::of(SCALE_SHIFT_CLAMP);
    let mut ig = InitGradients {
        positions: vec![[zero; 3]; n],
        colors: vec![[zero; 3]; n],
        normals: vec![[zero; 3]; n],
        scales: vec![[zero; 2]; n],
        angles: vec![zero; n],
    };
    let mut d_heads: Vec<Vec<T>> = DECODER_CHANNELS.iter().map(|c| vec![zero; n * k * c]).collect();
    for j in 0..n {
        for r in 0..k {
            let row = j * k + r;
            for a in 0..3 {
                let g = grads.positions[row][a];
                d_heads[D_X][row * 3 + a] = g;
                ig.positions[j][a] += g;
            }
            let ds = &cache.heads[D_S].0[row * 2..row * 2 + 2];
            for a in 0..2 {
                let g = grads.scales[row][a];
                let factor = ds[a].max(-clamp).min(clamp).exp();
                if ds[a] > -clamp && ds[a] < clamp {
                    d_heads[D_S][row * 2 + a] = g * pred.scales[row][a];
                }
                ig.scales[j][a] += g * factor;
            }
            for i in 0..SH_COEFFS {
                let g = grads.sh[row][i];
                d_heads[D_C][row * SH_COEFFS + i] = g;
                if i < 3 {
                    ig.colors[j][i] += g;
                }
            }
            let sum = cache.normal_sums[row];
            let len = vec3::norm(sum);
            if len >= T::of(1e-8) {
                let nh = pred.normals[row];
                let g = grads.normals[row];
                let radial = vec3::dot(g, nh);
                let d = vec3::scale(vec3::sub(g, vec3::scale(nh, radial)), one / len);
                for a in 0..3 {
                    d_heads[D_N][row * 3 + a] = d[a];
                    ig.normals[j][a] += d[a];
                }
            } else {
                for a in 0..3 {
                    ig.normals[j][a] += grads.normals[row][a];
                }
            }
            d_heads[D_A][row] = grads.angles[row];
            ig.angles[j] += grads.angles[row];
            let o = pred.opacities[row];
            d_heads[D_O][row] = grads.opacities[row] * o * (one - o);
        }
    }

    let width = cache.dec_input.len() / n;
    let mut d_input = vec![zero; n * width];
    for (h, head) in m.decoders.heads.iter().enumerate() {
        let (_, hc) = &cache.heads[h];
        let dx = head
            .backward(&cache.dec_input, hc, &d_heads[h], n, &mut param_grads.decoders.heads[h], true)
            .unwrap();
        for (a, b) in d_input.iter_mut().zip(&dx) {
            *a += *b;
        }
    }
    let fw = width - INPUT_WIDTH;
    let mut d_features = vec![zero; n * fw];
    let mut d_points = vec![zero; n * INPUT_WIDTH];
    for j in 0..n {
        d_features[j * fw..(j + 1) * fw].copy_from_slice(&d_input[j * width..j * width + fw]);
        d_points[j * INPUT_WIDTH..(j + 1) * INPUT_WIDTH].copy_from_slice(&d_input[j * width + fw..(j + 1) * width]);
    }
    let d_enc_in = encode_backward(&m.encoder, &cache.encoder, d_features, n, &mut param_grads.encoder);
    for j in 0..n {
        let row = &d_points[j * INPUT_WIDTH..(j + 1) * INPUT_WIDTH];
        let erow = &d_enc_in[j * INPUT_WIDTH..(j + 1) * INPUT_WIDTH];
        let v = |i: usize| row[i] + erow[i];
        for a in 0..3 {
            ig.positions[j][a] += v(a);
            ig.colors[j][a] += v(3 + a);
            ig.normals[j][a] += v(6 + a);
        }
        ig.scales[j][0] += v(9);
        ig.scales[j][1] += v(10);
    }
    let _ = init;
    Ok(ig)
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModuleParams<T>, lr: f64) -> Self {
        let shapes: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients reject the whole
/// step and leave parameters and state untouched.
pub fn adam_step<T: Real>(state: &mut AdamState<T>, params: &mut ModuleParams<T>, grads: &ModuleParams<T>) -> Result<()> {
    let names = grads.tensor_names();
    let g = grads.tensors();
    if g.len() != state.m.len() {
        return Err(Error::invalid("optimizer state does not match the parameters"));
    }
    for (i, t) in g.iter().enumerate() {
        if t.len() != state.m[i].len() {
            return Err(Error::invalid(format!("gradient {} has the wrong size", names[i])));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(names[i].clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of(state.beta1);
    let b2 = T::of(state.beta2);
    let c1 = T::of(1.0 / (1.0 - state.beta1.powi(t)));
    let c2 = T::of(1.0 / (1.0 - state.beta2.powi(t)));
    let lr = T::of(state.lr);
    let eps = T::of(state.eps);
    let one = T::one();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(g).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mh = m[i] * c1;
            let vh = v[i] * c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
