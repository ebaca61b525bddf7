//! Differentiable tile-based CPU splatting of 2D Gaussians.
//!
//! Every pixel casts a ray through its center, intersects it with the plane of
//! each splat binned to its tile, and evaluates the Gaussian falloff in the
//! splat's tangent coordinates. Splats are composited front to back in a
//! global order by camera-space center depth (ties by index).
//!
//! The reverse pass recomputes the forward bookkeeping per pixel, so the API
//! is stateless. Per-tile gradient buffers are reduced in tile order, which
//! makes the result independent of the worker count.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussians::{sh_basis, sh_color_raw, FrameJet, Gaussian2DSet, Space, SH_BASIS, SH_COEFFS};
use crate::image::{GradBuffer, ImageBuffer};
use crate::real::Real;
use crate::vec3::{self, Vec3};

/// Object-space cutoff radius, in standard deviations.
const CUTOFF_SIGMA: f64 = 3.0;
/// Rays more parallel to a splat plane than this (|cos|) skip it.
const GRAZING_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    pub transmittance_floor: f64,
    pub alpha_clamp_max: f64,
    /// Screen-space low-pass standard deviation, pixels.
    pub lowpass_sigma: f64,
    pub tile_size: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [1.0; 3],
            transmittance_floor: 1e-4,
            alpha_clamp_max: 0.999,
            lowpass_sigma: 0.7,
            tile_size: 16,
        }
    }
}

impl RenderOptions {
    pub fn with_background(background: [f64; 3]) -> Self {
        Self {
            background,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_clamp_max > 0.0 && self.alpha_clamp_max < 1.0) {
            return Err(Error::invalid("alpha_clamp_max must lie in (0, 1)"));
        }
        if !(self.transmittance_floor > 0.0 && self.transmittance_floor < 0.1) {
            return Err(Error::invalid("transmittance_floor must lie in (0, 0.1)"));
        }
        if !(self.lowpass_sigma > 0.0) {
            return Err(Error::invalid("lowpass_sigma must be positive"));
        }
        if self.tile_size == 0 {
            return Err(Error::invalid("tile_size must be positive"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("background color outside [0, 1]"));
        }
        Ok(())
    }
}

/// Partials of a scalar loss with respect to every Gaussian parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGradients<T> {
    pub positions: Vec<[T; 3]>,
    pub scales: Vec<[T; 2]>,
    pub opacities: Vec<T>,
    pub sh: Vec<[T; SH_COEFFS]>,
    pub normals: Vec<[T; 3]>,
    pub angles: Vec<T>,
}

impl<T: Real> GaussianGradients<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            positions: vec![[T::zero(); 3]; len],
            scales: vec![[T::zero(); 2]; len],
            opacities: vec![T::zero(); len],
            sh: vec![[T::zero(); SH_COEFFS]; len],
            normals: vec![[T::zero(); 3]; len],
            angles: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            for a in 0..3 {
                self.positions[i][a] += other.positions[i][a];
                self.normals[i][a] += other.normals[i][a];
            }
            self.scales[i][0] += other.scales[i][0];
            self.scales[i][1] += other.scales[i][1];
            self.opacities[i] += other.opacities[i];
            self.angles[i] += other.angles[i];
            for k in 0..SH_COEFFS {
                self.sh[i][k] += other.sh[i][k];
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.positions.iter().flatten().all(|v| v.is_finite())
            && self.scales.iter().flatten().all(|v| v.is_finite())
            && self.opacities.iter().all(|v| v.is_finite())
            && self.sh.iter().flatten().all(|v| v.is_finite())
            && self.normals.iter().flatten().all(|v| v.is_finite())
            && self.angles.iter().all(|v| v.is_finite())
    }

    /// Pull world-space gradients back through a denormalization with the
    /// given scale factor (positions and scales are the only scaled fields).
    pub fn to_normalized(&mut self, scale: f64) {
        let s = T::of(scale);
        for p in &mut self.positions {
            *p = vec3::scale(*p, s);
        }
        for sc in &mut self.scales {
            sc[0] *= s;
            sc[1] *= s;
        }
    }

    /// Rows in the given order.
    pub fn select(&self, rows: impl IntoIterator<Item = usize>) -> Self {
        let mut out = Self::zeros(0);
        for i in rows {
            out.positions.push(self.positions[i]);
            out.scales.push(self.scales[i]);
            out.opacities.push(self.opacities[i]);
            out.sh.push(self.sh[i]);
            out.normals.push(self.normals[i]);
            out.angles.push(self.angles[i]);
        }
        out
    }
}

/// Camera quantities converted to the working precision.
struct CamT<T> {
    rot: [[T; 3]; 3],
    trans: Vec3<T>,
    origin: Vec3<T>,
    fx: T,
    fy: T,
    cx: T,
    cy: T,
    near: T,
}

impl<T: Real> CamT<T> {
    fn new(cam: &Camera) -> Self {
        let r = cam.rotation();
        Self {
            rot: r.map(vec3::cast),
            trans: vec3::cast(cam.translation()),
            origin: vec3::cast(cam.origin()),
            fx: T::of(cam.fx()),
            fy: T::of(cam.fy()),
            cx: T::of(cam.cx()),
            cy: T::of(cam.cy()),
            near: T::of(cam.near),
        }
    }

    fn to_camera(&self, x: Vec3<T>) -> Vec3<T> {
        vec3::add(vec3::mat3_vec(&self.rot, x), self.trans)
    }

    fn project(&self, xc: Vec3<T>) -> [T; 2] {
        [
            self.fx * xc[0] / xc[2] + self.cx,
            self.fy * xc[1] / xc[2] + self.cy,
        ]
    }

    /// World direction through pixel center `(px, py)`, camera z = 1.
    fn ray(&self, px: T, py: T) -> Vec3<T> {
        let dc = [(px - self.cx) / self.fx, (py - self.cy) / self.fy, T::one()];
        vec3::mat3_vec(&vec3::mat3_transpose(&self.rot), dc)
    }
}

/// Per-splat data shared by all pixels.
struct Prepared<T> {
    id: usize,
    jet: FrameJet<T>,
    /// Center relative to the camera origin.
    w: Vec3<T>,
    /// `w . n`
    wn: T,
    inv_su: T,
    inv_sv: T,
    opacity: T,
    depth: T,
    xc: Vec3<T>,
    uv: [T; 2],
    lowpass: bool,
    /// Pixel rectangle `[x0, y0, x1, y1)`.
    bbox: [usize; 4],
}

struct Scene<T> {
    splats: Vec<Prepared<T>>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    tiles_y: usize,
}

#[derive(Clone, Copy)]
struct Params<T> {
    bg: [T; 3],
    floor: T,
    alpha_max: T,
    lp_sigma: T,
    tile: usize,
    width: usize,
    height: usize,
}

fn prepare<T: Real>(g: &Gaussian2DSet<T>, cam: &Camera, opts: &RenderOptions) -> Result<(Scene<T>, CamT<T>, Params<T>)> {
    if g.space != Space::World {
        return Err(Error::InvalidState("render expects a world-space Gaussian set".into()));
    }
    g.validate()?;
    cam.validate()?;
    opts.validate()?;
    let ct = CamT::<T>::new(cam);
    let params = Params {
        bg: opts.background.map(T::of),
        floor: T::of(opts.transmittance_floor),
        alpha_max: T::of(opts.alpha_clamp_max),
        lp_sigma: T::of(opts.lowpass_sigma),
        tile: opts.tile_size,
        width: cam.width,
        height: cam.height,
    };
    let (w, h) = (cam.width, cam.height);
    let diag = T::of(cam.diagonal());
    let half = [T::of(w as f64 / 2.0), T::of(h as f64 / 2.0)];
    let cutoff = T::of(CUTOFF_SIGMA);
    let fmax = ct.fx.max(ct.fy);

    let mut splats: Vec<Prepared<T>> = (0..g.len())
        .into_par_iter()
        .filter_map(|id| {
            let x = g.positions[id];
            let xc = ct.to_camera(x);
            if xc[2] <= ct.near {
                return None;
            }
            let uv = ct.project(xc);
            let du = uv[0] - half[0];
            let dv = uv[1] - half[1];
            if (du * du + dv * dv).sqrt() > T::of(1.5) * diag {
                return None;
            }
            let [su, sv] = g.scales[id];
            if !(su > T::zero() && sv > T::zero()) {
                return None;
            }
            let jet = FrameJet::new(g.normals[id], g.angles[id]);
            let lowpass = fmax * su.max(sv) / xc[2] < T::one();
            let mut rect = splat_rect(&ct, x, &jet, su * cutoff, sv * cutoff, w, h);
            if lowpass {
                let r = params.lp_sigma * cutoff;
                let lp = [uv[0] - r, uv[1] - r, uv[0] + r, uv[1] + r];
                rect = match rect {
                    Some(b) => Some([b[0].min(lp[0]), b[1].min(lp[1]), b[2].max(lp[2]), b[3].max(lp[3])]),
                    None => Some(lp),
                };
            }
            let bbox = clip_rect(rect?, w, h)?;
            let wv = vec3::sub(x, ct.origin);
            Some(Prepared {
                id,
                wn: vec3::dot(wv, jet.n),
                w: wv,
                jet,
                inv_su: T::one() / su,
                inv_sv: T::one() / sv,
                opacity: g.opacities[id],
                depth: xc[2],
                xc,
                uv,
                lowpass,
                bbox,
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.id.cmp(&b.id)));

    let tile = opts.tile_size;
    let tiles_x = w.div_ceil(tile);
    let tiles_y = h.div_ceil(tile);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.bbox;
        for ty in y0 / tile..=(y1 - 1) / tile {
            for tx in x0 / tile..=(x1 - 1) / tile {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    Ok((
        Scene {
            splats,
            tiles,
            tiles_x,
            tiles_y,
        },
        ct,
        params,
    ))
}

/// Screen rectangle (float pixel coordinates) containing the splat's cutoff
/// square, or the whole image when part of it is behind the near plane.
fn splat_rect<T: Real>(
    ct: &CamT<T>,
    x: Vec3<T>,
    jet: &FrameJet<T>,
    ru: T,
    rv: T,
    w: usize,
    h: usize,
) -> Option<[T; 4]> {
    let mut lo = [T::infinity(); 2];
    let mut hi = [T::neg_infinity(); 2];
    for (su, sv) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let mut c = x;
        vec3::axpy(&mut c, T::of(su) * ru, jet.t_u);
        vec3::axpy(&mut c, T::of(sv) * rv, jet.t_v);
        let cc = ct.to_camera(c);
        if cc[2] <= ct.near {
            return Some([T::zero(), T::zero(), T::of(w as f64), T::of(h as f64)]);
        }
        let p = ct.project(cc);
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    Some([lo[0], lo[1], hi[0], hi[1]])
}

fn clip_rect<T: Real>(r: [T; 4], w: usize, h: usize) -> Option<[usize; 4]> {
    let wf = T::of(w as f64);
    let hf = T::of(h as f64);
    if !(r[2] >= T::zero() && r[3] >= T::zero() && r[0] <= wf && r[1] <= hf) {
        return None;
    }
    let x0 = r[0].floor().max(T::zero()).min(wf).f64() as usize;
    let y0 = r[1].floor().max(T::zero()).min(hf).f64() as usize;
    let x1 = r[2].ceil().max(T::zero()).min(wf).f64() as usize;
    let y1 = r[3].ceil().max(T::zero()).min(hf).f64() as usize;
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some([x0, y0, x1, y1])
}

/// Everything about one ray-splat evaluation the reverse pass needs.
#[derive(Clone, Copy)]
struct Hit<T> {
    alpha: T,
    weight: T,
    clamped: bool,
    lowpass_branch: bool,
    // core branch intermediates
    q: Vec3<T>,
    a: T,
    b: T,
    denom: T,
    // low-pass intermediates
    dpx: T,
    dpy: T,
}

struct Pixel<T> {
    px: T,
    py: T,
    /// Ray direction (camera z = 1).
    d: Vec3<T>,
    d_norm: T,
    basis: [T; SH_BASIS],
}

impl<T: Real> Pixel<T> {
    fn new(ct: &CamT<T>, x: usize, y: usize) -> Self {
        let px = T::of(x as f64 + 0.5);
        let py = T::of(y as f64 + 0.5);
        let d = ct.ray(px, py);
        let d_norm = vec3::norm(d);
        let basis = sh_basis(vec3::scale(d, T::one() / d_norm));
        Self {
            px,
            py,
            d,
            d_norm,
            basis,
        }
    }
}

#[inline]
fn evaluate<T: Real>(s: &Prepared<T>, pix: &Pixel<T>, ct: &CamT<T>, p: &Params<T>) -> Option<Hit<T>> {
    let cutoff2 = T::of(CUTOFF_SIGMA * CUTOFF_SIGMA);
    let denom = vec3::dot(pix.d, s.jet.n);
    let mut core = None;
    if denom.abs() > T::of(GRAZING_EPS) * pix.d_norm {
        let t_hit = s.wn / denom;
        if t_hit > ct.near {
            let q = vec3::sub(vec3::scale(pix.d, t_hit), s.w);
            let a = vec3::dot(q, s.jet.t_u) * s.inv_su;
            let b = vec3::dot(q, s.jet.t_v) * s.inv_sv;
            let r2 = a * a + b * b;
            if r2 <= cutoff2 {
                core = Some((q, a, b, (-T::of(0.5) * r2).exp()));
            }
        }
    }
    let mut lp = None;
    let (dpx, dpy) = (pix.px - s.uv[0], pix.py - s.uv[1]);
    if s.lowpass {
        let d2 = dpx * dpx + dpy * dpy;
        let sig2 = p.lp_sigma * p.lp_sigma;
        if d2 <= cutoff2 * sig2 {
            lp = Some((-d2 / (T::of(2.0) * sig2)).exp());
        }
    }
    let zero = T::zero();
    let (weight, lowpass_branch, q, a, b) = match (core, lp) {
        (None, None) => return None,
        (Some((q, a, b, g)), None) => (g, false, q, a, b),
        (None, Some(glp)) => (glp, true, [zero; 3], zero, zero),
        (Some((q, a, b, g)), Some(glp)) => {
            if glp > g {
                (glp, true, q, a, b)
            } else {
                (g, false, q, a, b)
            }
        }
    };
    let raw = s.opacity * weight;
    let clamped = raw > p.alpha_max;
    Some(Hit {
        alpha: if clamped { p.alpha_max } else { raw },
        weight,
        clamped,
        lowpass_branch,
        q,
        a,
        b,
        denom,
        dpx,
        dpy,
    })
}

#[inline]
fn in_bbox(b: &[usize; 4], x: usize, y: usize) -> bool {
    x >= b[0] && x < b[2] && y >= b[1] && y < b[3]
}

fn tile_pixels(tx: usize, ty: usize, p: &Params<impl Real>) -> impl Iterator<Item = (usize, usize)> {
    let x0 = tx * p.tile;
    let y0 = ty * p.tile;
    let x1 = (x0 + p.tile).min(p.width);
    let y1 = (y0 + p.tile).min(p.height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Pixel rectangle `[x0, y0, x1, y1)` of tile `t`.
fn tile_rect(t: usize, tiles_x: usize, p: &Params<impl Real>) -> [usize; 4] {
    let (tx, ty) = (t % tiles_x, t / tiles_x);
    let x0 = tx * p.tile;
    let y0 = ty * p.tile;
    [x0, y0, (x0 + p.tile).min(p.width), (y0 + p.tile).min(p.height)]
}

/// Walk the splats of tile `t` in depth order, visiting every ray-splat hit
/// of every still-active pixel. Each pixel sees its hits in the same order
/// as a per-pixel loop would; pixels drop out once their transmittance falls
/// below the floor. `visit(pixel, slot, hit, trans_before, color_raw)` uses
/// tile-local row-major pixel indices.
#[allow(clippy::too_many_arguments)]
fn traverse_tile<T: Real>(
    t: usize,
    scene: &Scene<T>,
    ct: &CamT<T>,
    p: &Params<T>,
    g: &Gaussian2DSet<T>,
    pixels: &[Pixel<T>],
    active: &mut [bool],
    trans: &mut [T],
    mut visit: impl FnMut(usize, usize, &Hit<T>, T, [T; 3]),
) {
    let [x0, y0, x1, y1] = tile_rect(t, scene.tiles_x, p);
    let tw = x1 - x0;
    let mut remaining = active.iter().filter(|a| **a).count();
    for (slot, &k) in scene.tiles[t].iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let s = &scene.splats[k as usize];
        let [bx0, by0, bx1, by1] = s.bbox;
        for y in by0.max(y0)..by1.min(y1) {
            for x in bx0.max(x0)..bx1.min(x1) {
                let i = (y - y0) * tw + (x - x0);
                if !active[i] {
                    continue;
                }
                let Some(hit) = evaluate(s, &pixels[i], ct, p) else {
                    continue;
                };
                let c = sh_color_raw(&g.sh[s.id], &pixels[i].basis);
                visit(i, slot, &hit, trans[i], c);
                trans[i] *= T::one() - hit.alpha;
                if trans[i] < p.floor {
                    active[i] = false;
                    remaining -= 1;
                }
            }
        }
    }
}

fn tile_pixel_rays<T: Real>(t: usize, scene: &Scene<T>, ct: &CamT<T>, p: &Params<T>) -> Vec<Pixel<T>> {
    let [x0, y0, x1, y1] = tile_rect(t, scene.tiles_x, p);
    (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))).map(|(x, y)| Pixel::new(ct, x, y)).collect()
}

/// Synthesize the image seen by `cam`.
pub fn render<T: Real>(g: &Gaussian2DSet<T>, cam: &Camera, opts: &RenderOptions) -> Result<ImageBuffer<T>> {
    Ok(render_timed(g, cam, opts)?.0)
}

/// Wall time of the two forward stages.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RenderTimings {
    pub prepare_secs: f64,
    pub raster_secs: f64,
}

/// [`render`] plus stage timings.
pub fn render_timed<T: Real>(g: &Gaussian2DSet<T>, cam: &Camera, opts: &RenderOptions) -> Result<(ImageBuffer<T>, RenderTimings)> {
    let start = std::time::Instant::now();
    let (scene, ct, p) = prepare(g, cam, opts)?;
    let prepare_secs = start.elapsed().as_secs_f64();
    let tiles: Vec<Vec<[T; 3]>> = (0..scene.tiles_x * scene.tiles_y)
        .into_par_iter()
        .map(|t| {
            let pixels = tile_pixel_rays(t, &scene, &ct, &p);
            let n = pixels.len();
            let mut colors = vec![[T::zero(); 3]; n];
            let mut trans = vec![T::one(); n];
            let mut active = vec![true; n];
            traverse_tile(t, &scene, &ct, &p, g, &pixels, &mut active, &mut trans, |i, _, hit, tr, c| {
                let wgt = hit.alpha * tr;
                for ch in 0..3 {
                    colors[i][ch] += c[ch].max(T::zero()).min(T::one()) * wgt;
                }
            });
            for (color, tr) in colors.iter_mut().zip(&trans) {
                for ch in 0..3 {
                    color[ch] += *tr * p.bg[ch];
                }
            }
            colors
        })
        .collect();
    let mut img = ImageBuffer::zeros(p.width, p.height);
    for (t, pixels) in tiles.into_iter().enumerate() {
        let (tx, ty) = (t % scene.tiles_x, t / scene.tiles_x);
        for ((x, y), c) in tile_pixels(tx, ty, &p).zip(pixels) {
            img.set_pixel(x, y, c);
        }
    }
    let timings = RenderTimings {
        prepare_secs,
        raster_secs: start.elapsed().as_secs_f64() - prepare_secs,
    };
    Ok((img, timings))
}

/// Hash of every discrete decision taken by the forward pass: culling, depth
/// order, cutoff membership, low-pass branch, alpha and color clamps, early
/// stop. Finite-difference checks use it to skip stencils that straddle a
/// discontinuity.
pub fn render_decision_signature<T: Real>(g: &Gaussian2DSet<T>, cam: &Camera, opts: &RenderOptions) -> Result<u64> {
    let (scene, ct, p) = prepare(g, cam, opts)?;
    let mut hasher = DefaultHasher::new();
    for s in &scene.splats {
        (s.id, s.lowpass).hash(&mut hasher);
    }
    for y in 0..p.height {
        for x in 0..p.width {
            let pix = Pixel::new(&ct, x, y);
            let t = (y / p.tile) * scene.tiles_x + x / p.tile;
            let mut trans = T::one();
            for &k in &scene.tiles[t] {
                let s = &scene.splats[k as usize];
                if !in_bbox(&s.bbox, x, y) {
                    continue;
                }
                let Some(hit) = evaluate(s, &pix, &ct, &p) else {
                    continue;
                };
                let c = sh_color_raw(&g.sh[s.id], &pix.basis);
                let clamp_bits: Vec<bool> = c.iter().map(|v| *v < T::zero() || *v > T::one()).collect();
                (s.id, hit.clamped, hit.lowpass_branch, clamp_bits).hash(&mut hasher);
                trans *= T::one() - hit.alpha;
                if trans < p.floor {
                    break;
                }
            }
            u64::MAX.hash(&mut hasher);
        }
    }
    Ok(hasher.finish())
}

// Layout of the per-splat accumulator used during the reverse pass.
const A_X: usize = 0;
const A_S: usize = 3;
const A_O: usize = 5;
const A_SH: usize = 6;
const A_N: usize = A_SH + SH_COEFFS;
const A_TU: usize = A_N + 3;
const A_TV: usize = A_TU + 3;
const A_UV: usize = A_TV + 3;
const A_LEN: usize = A_UV + 2;

struct Contribution<T> {
    splat: u32,
    hit: Hit<T>,
    trans: T,
    color: [T; 3],
    color_raw: [T; 3],
}

/// Reverse-mode partials of `sum(d_image * render(g))` with respect to every
/// Gaussian parameter.
pub fn render_backward<T: Real>(
    g: &Gaussian2DSet<T>,
    cam: &Camera,
    opts: &RenderOptions,
    d_image: &GradBuffer<T>,
) -> Result<GaussianGradients<T>> {
    if d_image.width != cam.width || d_image.height != cam.height || d_image.data.len() != cam.width * cam.height * 3 {
        return Err(Error::invalid(format!(
            "gradient image is {}x{}, camera is {}x{}",
            d_image.width, d_image.height, cam.width, cam.height
        )));
    }
    let (scene, ct, p) = prepare(g, cam, opts)?;
    let partials: Vec<Vec<(u32, [T; A_LEN])>> = (0..scene.tiles_x * scene.tiles_y)
        .into_par_iter()
        .map(|t| backward_tile(t, &scene, &ct, &p, g, d_image))
        .collect();

    let mut acc = vec![[T::zero(); A_LEN]; scene.splats.len()];
    for tile in &partials {
        for (k, part) in tile {
            let dst = &mut acc[*k as usize];
            for i in 0..A_LEN {
                dst[i] += part[i];
            }
        }
    }

    let mut out = GaussianGradients::zeros(g.len());
    for (s, a) in scene.splats.iter().zip(&acc) {
        let id = s.id;
        let mut dx = [a[A_X], a[A_X + 1], a[A_X + 2]];
        // Low-pass branch: chain the projected center back to the position.
        let (du, dv) = (a[A_UV], a[A_UV + 1]);
        if du != T::zero() || dv != T::zero() {
            let [xc, yc, zc] = s.xc;
            let dxc = [
                du * ct.fx / zc,
                dv * ct.fy / zc,
                -(du * ct.fx * xc + dv * ct.fy * yc) / (zc * zc),
            ];
            let dxw = vec3::mat3_vec(&vec3::mat3_transpose(&ct.rot), dxc);
            dx = vec3::add(dx, dxw);
        }
        out.positions[id] = dx;
        out.scales[id] = [a[A_S], a[A_S + 1]];
        out.opacities[id] = a[A_O];
        out.sh[id].copy_from_slice(&a[A_SH..A_SH + SH_COEFFS]);
        let (dn, dalpha) = s.jet.backward(
            [a[A_TU], a[A_TU + 1], a[A_TU + 2]],
            [a[A_TV], a[A_TV + 1], a[A_TV + 2]],
            [a[A_N], a[A_N + 1], a[A_N + 2]],
        );
        out.normals[id] = dn;
        out.angles[id] = dalpha;
    }
    Ok(out)
}

fn backward_tile<T: Real>(
    t: usize,
    scene: &Scene<T>,
    ct: &CamT<T>,
    p: &Params<T>,
    g: &Gaussian2DSet<T>,
    d_image: &GradBuffer<T>,
) -> Vec<(u32, [T; A_LEN])> {
    let list = &scene.tiles[t];
    if list.is_empty() {
        return Vec::new();
    }
    // Tile-local slot per splat in the list.
    let mut acc = vec![[T::zero(); A_LEN]; list.len()];
    let mut touched = vec![false; list.len()];
    let zero = T::zero();
    let one = T::one();
    let [x0, y0, x1, _] = tile_rect(t, scene.tiles_x, p);
    let tw = x1 - x0;
    let pixels = tile_pixel_rays(t, scene, ct, p);
    let n = pixels.len();
    let grads: Vec<[T; 3]> = (0..n)
        .map(|i| {
            let gi = ((y0 + i / tw) * p.width + x0 + i % tw) * 3;
            [d_image.data[gi], d_image.data[gi + 1], d_image.data[gi + 2]]
        })
        .collect();
    let mut active: Vec<bool> = grads.iter().map(|g| g.iter().any(|v| *v != zero)).collect();
    let mut trans = vec![one; n];
    let mut hits: Vec<Vec<(usize, Contribution<T>)>> = (0..n).map(|_| Vec::new()).collect();
    traverse_tile(t, scene, ct, p, g, &pixels, &mut active, &mut trans, |i, slot, hit, tr, color_raw| {
        hits[i].push((
            slot,
            Contribution {
                splat: list[slot],
                hit: *hit,
                trans: tr,
                color: color_raw.map(|v| v.max(zero).min(one)),
                color_raw,
            },
        ));
    });
    for (i, pix) in pixels.iter().enumerate() {
        let hits = &hits[i];
        let grad = grads[i];
        let trans = trans[i];
        // Color behind the current splat, background included.
        let mut rest = [trans * p.bg[0], trans * p.bg[1], trans * p.bg[2]];
        for (slot, c) in hits.iter().rev() {
            let s = &scene.splats[c.splat as usize];
            let h = &c.hit;
            let a = &mut acc[*slot];
            touched[*slot] = true;
            let mut d_alpha = zero;
            for ch in 0..3 {
                d_alpha += grad[ch] * (c.color[ch] * c.trans - rest[ch] / (one - h.alpha));
                let d_color = grad[ch] * h.alpha * c.trans;
                if c.color_raw[ch] > zero && c.color_raw[ch] < one {
                    for k in 0..SH_BASIS {
                        a[A_SH + k * 3 + ch] += d_color * pix.basis[k];
                    }
                }
                rest[ch] += c.color[ch] * h.alpha * c.trans;
            }
            if h.clamped {
                continue;
            }
            a[A_O] += d_alpha * h.weight;
            let d_weight = d_alpha * s.opacity;
            if h.lowpass_branch {
                let sig2 = p.lp_sigma * p.lp_sigma;
                let d_d2 = -d_weight * h.weight / (T::of(2.0) * sig2);
                // d2 = (px - u)^2 + (py - v)^2
                a[A_UV] += -T::of(2.0) * h.dpx * d_d2;
                a[A_UV + 1] += -T::of(2.0) * h.dpy * d_d2;
                continue;
            }
            let d_r2 = -T::of(0.5) * d_weight * h.weight;
            let da = T::of(2.0) * h.a * d_r2;
            let db = T::of(2.0) * h.b * d_r2;
            // a = (q . t_u) / s_u, b = (q . t_v) / s_v
            a[A_S] += -da * h.a * s.inv_su;
            a[A_S + 1] += -db * h.b * s.inv_sv;
            let cu = da * s.inv_su;
            let cv = db * s.inv_sv;
            let mut dq = [zero; 3];
            for i in 0..3 {
                a[A_TU + i] += cu * h.q[i];
                a[A_TV + i] += cv * h.q[i];
                dq[i] = cu * s.jet.t_u[i] + cv * s.jet.t_v[i];
            }
            // q = t d - w, w = x - o, t = (w . n) / (d . n)
            let d_t = vec3::dot(dq, pix.d);
            let inv_denom = one / h.denom;
            for i in 0..3 {
                a[A_X + i] += -dq[i] + d_t * s.jet.n[i] * inv_denom;
                a[A_N + i] += -d_t * h.q[i] * inv_denom;
            }
        }
    }
    list.iter()
        .zip(acc)
        .zip(touched)
        .filter(|(_, t)| *t)
        .map(|((&k, a), _)| (k, a))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::compose_extrinsics;

    fn axis_cam(size: usize, f: f64) -> Camera {
        Camera::new(
            [[f, 0.0, size as f64 / 2.0], [0.0, f, size as f64 / 2.0], [0.0, 0.0, 1.0]],
            compose_extrinsics(&vec3::identity3(), [0.0; 3]),
            size,
            size,
            0.01,
        )
        .unwrap()
    }

    fn splat(set: &mut Gaussian2DSet<f64>, x: [f64; 3], s: f64, o: f64, rgb: [f64; 3]) {
        set.positions.push(x);
        set.scales.push([s, s]);
        set.opacities.push(o);
        let mut sh = [0.0; SH_COEFFS];
        sh[..3].copy_from_slice(&crate::gaussians::rgb_to_sh_dc(rgb));
        set.sh.push(sh);
        set.normals.push([0.0, 0.0, -1.0]);
        set.angles.push(0.0);
    }

    #[test]
    fn empty_set_renders_background() {
        let g = Gaussian2DSet::<f32>::empty(Space::World);
        let img = render(&g, &axis_cam(8, 8.0), &RenderOptions::with_background([0.2, 0.4, 0.6])).unwrap();
        for px in img.data.chunks(3) {
            assert_eq!(px, &[0.2f32, 0.4, 0.6]);
        }
    }

    #[test]
    fn normalized_set_rejected() {
        let g = Gaussian2DSet::<f32>::empty(Space::Normalized);
        assert!(matches!(
            render(&g, &axis_cam(8, 8.0), &RenderOptions::default()),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut g = Gaussian2DSet::<f64>::empty(Space::World);
        splat(&mut g, [0.0, 0.0, f64::NAN], 0.1, 1.0, [1.0; 3]);
        assert!(matches!(
            render(&g, &axis_cam(8, 8.0), &RenderOptions::default()),
            Err(Error::NonFiniteInput(_))
        ));
    }

    #[test]
    fn single_white_splat_on_axis() {
        let mut g = Gaussian2DSet::<f64>::empty(Space::World);
        splat(&mut g, [0.0, 0.0, 2.0], 5.0, 1.0, [1.0; 3]);
        let opts = RenderOptions::with_background([0.0; 3]);
        let img = render(&g, &axis_cam(32, 16.0), &opts).unwrap();
        let c = img.pixel(16, 16);
        assert!(c.iter().all(|v| (v - 1.0).abs() <= 1e-3 + 1e-12), "{c:?}");
        // Small splat: corners see the background.
        let mut g = Gaussian2DSet::<f64>::empty(Space::World);
        splat(&mut g, [0.0, 0.0, 2.0], 0.3, 1.0, [1.0; 3]);
        let img = render(&g, &axis_cam(32, 16.0), &opts).unwrap();
        assert_eq!(img.pixel(0, 0), [0.0; 3]);
        assert!(img.pixel(16, 16)[0] > 0.9);
    }

    #[test]
    fn dimension_mismatch_in_backward() {
        let g = Gaussian2DSet::<f64>::empty(Space::World);
        let d = ImageBuffer::zeros(4, 5);
        assert!(matches!(
            render_backward(&g, &axis_cam(8, 8.0), &RenderOptions::default(), &d),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut g = Gaussian2DSet::<f64>::empty(Space::World);
        splat(&mut g, [0.1, 0.0, 2.0], 0.5, 0.7, [0.3, 0.6, 0.9]);
        let cam = axis_cam(16, 16.0);
        let d = ImageBuffer::zeros(16, 16);
        let gr = render_backward(&g, &cam, &RenderOptions::default(), &d).unwrap();
        assert_eq!(gr, GaussianGradients::zeros(1));
    }
}
