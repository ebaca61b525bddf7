//! Synthetic scenes: flat-colored triangle meshes, surface-sampled point
//! clouds, and ground-truth views from a small z-buffer rasterizer.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::image::ImageBuffer;
use crate::manifest::{SceneManifest, ViewEntry};
use crate::vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneKind {
    Cube,
    Sphere,
    CheckerPlane,
    TwoSpheres,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [SceneKind::Cube, SceneKind::Sphere, SceneKind::CheckerPlane, SceneKind::TwoSpheres];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Cube => "cube",
            SceneKind::Sphere => "sphere",
            SceneKind::CheckerPlane => "checker_plane",
            SceneKind::TwoSpheres => "two_spheres",
        }
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scene kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    /// Edge length of the cube and plane; diameter of spheres.
    pub size: f64,
    /// Icosphere subdivision level.
    pub subdivisions: u32,
    /// Cells per side of the checker plane.
    pub checker_cells: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            size: 1.0,
            subdivisions: 3,
            checker_cells: 8,
        }
    }
}

/// Triangle mesh with one color per face.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub face_colors: Vec<[f64; 3]>,
}

impl Mesh {
    pub fn triangle(&self, f: usize) -> [[f64; 3]; 3] {
        self.triangles[f].map(|i| self.vertices[i])
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * vec3::norm(vec3::cross(vec3::sub(b, a), vec3::sub(c, a)))
    }

    pub fn face_normal(&self, f: usize) -> [f64; 3] {
        let [a, b, c] = self.triangle(f);
        vec3::normalize(vec3::cross(vec3::sub(b, a), vec3::sub(c, a)))
    }

    /// Center and radius of the vertex bounding box's circumscribed sphere.
    pub fn bounds(&self) -> ([f64; 3], f64) {
        if self.vertices.is_empty() {
            return ([0.0; 3], 0.0);
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        let c = vec3::scale(vec3::add(lo, hi), 0.5);
        let r = self.vertices.iter().map(|v| vec3::norm(vec3::sub(*v, c))).fold(0.0, f64::max);
        (c, r)
    }

    fn append(&mut self, other: Mesh) {
        let off = self.vertices.len();
        self.vertices.extend(other.vertices);
        self.triangles.extend(other.triangles.into_iter().map(|t| t.map(|i| i + off)));
        self.face_colors.extend(other.face_colors);
    }
}

/// A random color on the 8-bit grid, so point and image colors agree exactly.
fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(25u8..=230) as f64 / 255.0)
}

fn cube(size: f64, rng: &mut impl Rng) -> Mesh {
    let h = size / 2.0;
    let mut m = Mesh::default();
    // Each face: outward axis and two in-plane axes with u x v = outward.
    let faces: [([f64; 3], [f64; 3], [f64; 3]); 6] = [
        ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
        ([-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]),
        ([0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
        ([0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
        ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
        ([0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]),
    ];
    for (n, u, v) in faces {
        let color = random_color(rng);
        let c = vec3::scale(n, h);
        let base = m.vertices.len();
        for (su, sv) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
            m.vertices.push(vec3::add(c, vec3::add(vec3::scale(u, su * h), vec3::scale(v, sv * h))));
        }
        m.triangles.push([base, base + 1, base + 2]);
        m.triangles.push([base, base + 2, base + 3]);
        m.face_colors.push(color);
        m.face_colors.push(color);
    }
    m
}

fn icosphere(radius: f64, center: [f64; 3], level: u32, rng: &mut impl Rng) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .into_iter()
    .map(vec3::normalize)
    .collect();
    let mut tris: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid = std::collections::HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| -> usize {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(vec3::normalize(vec3::scale(vec3::add(verts[a], verts[b]), 0.5)));
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(tris.len() * 4);
        for [a, b, c] in tris {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        tris = next;
    }
    // Latitude bands give the sphere visible structure.
    const BANDS: usize = 4;
    let palette: Vec<[f64; 3]> = (0..BANDS).map(|_| random_color(rng)).collect();
    let face_colors = tris
        .iter()
        .map(|t| {
            let z = (verts[t[0]][2] + verts[t[1]][2] + verts[t[2]][2]) / 3.0;
            let band = (((z + 1.0) / 2.0 * BANDS as f64) as usize).min(BANDS - 1);
            palette[band]
        })
        .collect();
    Mesh {
        vertices: verts.into_iter().map(|v| vec3::add(center, vec3::scale(v, radius))).collect(),
        triangles: tris,
        face_colors,
    }
}

fn checker_plane(size: f64, cells: usize, rng: &mut impl Rng) -> Mesh {
    let colors = [random_color(rng), random_color(rng)];
    let mut m = Mesh::default();
    let step = size / cells as f64;
    let h = size / 2.0;
    for i in 0..cells {
        for j in 0..cells {
            let (x0, y0) = (-h + i as f64 * step, -h + j as f64 * step);
            let base = m.vertices.len();
            m.vertices.extend([
                [x0, y0, 0.0],
                [x0 + step, y0, 0.0],
                [x0 + step, y0 + step, 0.0],
                [x0, y0 + step, 0.0],
            ]);
            m.triangles.push([base, base + 1, base + 2]);
            m.triangles.push([base, base + 2, base + 3]);
            let c = colors[(i + j) % 2];
            m.face_colors.extend([c, c]);
        }
    }
    m
}

pub fn make_scene(kind: SceneKind, params: &SceneParams, seed: u64) -> Result<Mesh> {
    if !(params.size > 0.0) || !params.size.is_finite() {
        return Err(Error::invalid("scene size must be positive"));
    }
    if params.subdivisions > 7 {
        return Err(Error::invalid("subdivision level above 7"));
    }
    if params.checker_cells == 0 {
        return Err(Error::invalid("checker plane needs at least one cell"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = params.size / 2.0;
    Ok(match kind {
        SceneKind::Cube => cube(params.size, &mut rng),
        SceneKind::Sphere => icosphere(r, [0.0; 3], params.subdivisions, &mut rng),
        SceneKind::CheckerPlane => checker_plane(params.size, params.checker_cells, &mut rng),
        SceneKind::TwoSpheres => {
            let level = params.subdivisions.min(2);
            let mut m = icosphere(r * 0.5, [-r * 0.55, 0.0, 0.0], level, &mut rng);
            m.append(icosphere(r * 0.4, [r * 0.55, r * 0.1, 0.0], level, &mut rng));
            m
        }
    })
}

/// Samples plus the face each one was drawn from.
#[derive(Debug, Clone)]
pub struct SurfaceSamples {
    pub cloud: PointCloud,
    pub faces: Vec<usize>,
}

/// Area-weighted uniform surface samples, exactly `n` of them.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<SurfaceSamples> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for f in 0..mesh.triangles.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::invalid("mesh has zero surface area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut faces = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random_range(0.0..total);
        let f = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangle(f);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        positions.push(std::array::from_fn(|k| wa * a[k] + wb * b[k] + wc * c[k]));
        colors.push(mesh.face_colors[f]);
        faces.push(f);
    }
    Ok(SurfaceSamples {
        cloud: PointCloud::new(positions, colors)?,
        faces,
    })
}

pub fn sample_points(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud> {
    Ok(sample_surface(mesh, n, seed)?.cloud)
}

/// Camera-space polygon clipped to `z >= near`.
fn clip_near(poly: &[[f64; 3]], near: f64) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ina, inb) = (a[2] >= near, b[2] >= near);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (near - a[2]) / (b[2] - a[2]);
            out.push(std::array::from_fn(|k| a[k] + t * (b[k] - a[k])));
        }
    }
    out
}

/// Screen-space triangle with per-vertex inverse depth.
struct ScreenTri {
    p: [[f64; 2]; 3],
    inv_z: [f64; 3],
    color: [f64; 3],
    y_range: (f64, f64),
}

/// Z-buffered flat-shaded rendering, sampled at pixel centers. Triangles
/// are two-sided; on equal depth the earlier triangle wins.
pub fn render_gt(mesh: &Mesh, cam: &Camera, background: [f64; 3]) -> ImageBuffer<f64> {
    let mut tris = Vec::new();
    for f in 0..mesh.triangles.len() {
        let cam_pts = mesh.triangle(f).map(|v| cam.world_to_camera(v));
        let poly = clip_near(&cam_pts, cam.near);
        if poly.len() < 3 {
            continue;
        }
        let proj: Vec<([f64; 2], f64)> = poly
            .iter()
            .map(|p| {
                (
                    [cam.fx() * p[0] / p[2] + cam.cx(), cam.fy() * p[1] / p[2] + cam.cy()],
                    1.0 / p[2],
                )
            })
            .collect();
        for k in 1..proj.len() - 1 {
            let idx = [0, k, k + 1];
            let p = idx.map(|i| proj[i].0);
            let ys = p.map(|q| q[1]);
            tris.push(ScreenTri {
                p,
                inv_z: idx.map(|i| proj[i].1),
                color: mesh.face_colors[f],
                y_range: (ys.iter().cloned().fold(f64::INFINITY, f64::min), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
            });
        }
    }
    let (w, h) = (cam.width, cam.height);
    let mut img = ImageBuffer::filled(w, h, background);
    img.data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        let py = y as f64 + 0.5;
        let mut depth = vec![f64::NEG_INFINITY; w];
        for t in tris.iter().filter(|t| t.y_range.0 <= py && py <= t.y_range.1) {
            let [a, b, c] = t.p;
            let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
            if area == 0.0 || !area.is_finite() {
                continue;
            }
            let xs = [a[0], b[0], c[0]];
            let x0 = xs.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
            let x1 = (xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil().max(0.0) as usize).min(w);
            for x in x0..x1 {
                let px = x as f64 + 0.5;
                let e = |p: [f64; 2], q: [f64; 2]| (q[0] - p[0]) * (py - p[1]) - (q[1] - p[1]) * (px - p[0]);
                let (w0, w1, w2) = (e(b, c) / area, e(c, a) / area, e(a, b) / area);
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                // Inverse depth is affine in screen space; larger is nearer.
                let iz = w0 * t.inv_z[0] + w1 * t.inv_z[1] + w2 * t.inv_z[2];
                if iz > depth[x] {
                    depth[x] = iz;
                    row[x * 3..x * 3 + 3].copy_from_slice(&t.color);
                }
            }
        }
    });
    img
}

/// Camera centers on a sphere around `center`, spread by a Fibonacci lattice.
pub fn view_sphere(center: [f64; 3], radius: f64, n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            vec3::add(center, vec3::scale([r * phi.cos(), r * phi.sin(), z], radius))
        })
        .collect()
}

/// Field of view that fits a bounding sphere seen from 2.5 radii, with margin.
pub const VIEW_FOV_Y: f64 = 0.9;
pub const VIEW_DISTANCE: f64 = 2.5;

pub fn dataset_cameras(mesh: &Mesh, n_views: usize, width: usize, height: usize) -> Result<Vec<Camera>> {
    let (c, r) = mesh.bounds();
    if !(r > 0.0) {
        return Err(Error::invalid("mesh has no extent"));
    }
    view_sphere(c, VIEW_DISTANCE * r, n_views)
        .into_iter()
        .map(|eye| Camera::look_at(eye, c, [0.0, 0.0, 1.0], VIEW_FOV_Y, width, height))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub kinds: Vec<SceneKind>,
    pub scenes: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub points: usize,
    pub background: [f64; 3],
    pub params: SceneParams,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kinds: vec![SceneKind::Cube],
            scenes: 1,
            views: 16,
            width: 64,
            height: 64,
            points: 2048,
            background: [1.0; 3],
            params: SceneParams::default(),
            seed: 0,
        }
    }
}

/// Per-scene seed derived from the dataset seed.
fn scene_seed(seed: u64, scene: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(scene as u64 + 1)
}

/// Write `scene_NNN/{cloud.ply, views/VVV.png, scene.txt}` for each scene and
/// return the manifest paths in scene order.
pub fn emit_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    if cfg.kinds.is_empty() || cfg.scenes == 0 || cfg.views == 0 {
        return Err(Error::invalid("dataset needs at least one kind, scene and view"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    (0..cfg.scenes)
        .into_par_iter()
        .map(|s| {
            let seed = scene_seed(cfg.seed, s);
            let mesh = make_scene(cfg.kinds[s % cfg.kinds.len()], &cfg.params, seed)?;
            let cloud = sample_points(&mesh, cfg.points, seed ^ 0x5eed)?;
            let dir = out_dir.join(format!("scene_{s:03}"));
            let views_dir = dir.join("views");
            std::fs::create_dir_all(&views_dir).map_err(|e| Error::io(&views_dir, e))?;
            crate::ply::write_ply(&cloud, dir.join("cloud.ply"))?;
            let cams = dataset_cameras(&mesh, cfg.views, cfg.width, cfg.height)?;
            let mut views = Vec::with_capacity(cams.len());
            for (v, cam) in cams.into_iter().enumerate() {
                let path = views_dir.join(format!("{v:03}.png"));
                crate::imageio::write_image(&render_gt(&mesh, &cam, cfg.background), &path)?;
                views.push(ViewEntry { camera: cam, image: path });
            }
            let manifest = SceneManifest {
                path: dir.join("scene.txt"),
                pointcloud: dir.join("cloud.ply"),
                background: cfg.background,
                width: cfg.width,
                height: cfg.height,
                views,
            };
            manifest.save()?;
            Ok(manifest.path)
        })
        .collect()
}

/// Manifests `*/scene.txt` directly under `dir`, sorted by path.
/// A single manifest path is returned as is.
pub fn find_manifests(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path().join("scene.txt");
        if p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::format(dir, "no scene manifests (expected */scene.txt)"));
    }
    Ok(out)
}
