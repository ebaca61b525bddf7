//! The 2D Gaussian (surfel) primitive set and its orientation and color
//! conventions.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{NormalizationTransform, PointCloud};
use crate::real::Real;
use crate::vec3::{self, Mat3, Vec3};

/// Number of SH coefficients per color channel (degree 2).
pub const SH_BASIS: usize = 9;
/// SH coefficients per Gaussian, stored coefficient-major: entry `k * 3 + ch`.
pub const SH_COEFFS: usize = SH_BASIS * 3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Normalized,
    World,
}

/// Structure-of-arrays set of 2D Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian2DSet<T> {
    pub positions: Vec<[T; 3]>,
    pub scales: Vec<[T; 2]>,
    pub opacities: Vec<T>,
    pub sh: Vec<[T; SH_COEFFS]>,
    pub normals: Vec<[T; 3]>,
    pub angles: Vec<T>,
    pub space: Space,
}

impl<T: Real> Gaussian2DSet<T> {
    pub fn empty(space: Space) -> Self {
        Self {
            positions: Vec::new(),
            scales: Vec::new(),
            opacities: Vec::new(),
            sh: Vec::new(),
            normals: Vec::new(),
            angles: Vec::new(),
            space,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.len();
        if [
            self.scales.len(),
            self.opacities.len(),
            self.sh.len(),
            self.normals.len(),
            self.angles.len(),
        ]
        .iter()
        .any(|&l| l != m)
        {
            return Err(Error::InvalidState("Gaussian arrays differ in length".into()));
        }
        for i in 0..m {
            let finite = self.positions[i].iter().all(|v| v.is_finite())
                && self.scales[i].iter().all(|v| v.is_finite())
                && self.opacities[i].is_finite()
                && self.sh[i].iter().all(|v| v.is_finite())
                && self.normals[i].iter().all(|v| v.is_finite())
                && self.angles[i].is_finite();
            if !finite {
                return Err(Error::NonFiniteInput(format!("Gaussian {i}")));
            }
        }
        Ok(())
    }

    pub fn push_from(&mut self, other: &Self, i: usize) {
        self.positions.push(other.positions[i]);
        self.scales.push(other.scales[i]);
        self.opacities.push(other.opacities[i]);
        self.sh.push(other.sh[i]);
        self.normals.push(other.normals[i]);
        self.angles.push(other.angles[i]);
    }

    pub fn extend_from(&mut self, other: &Self) {
        self.positions.extend_from_slice(&other.positions);
        self.scales.extend_from_slice(&other.scales);
        self.opacities.extend_from_slice(&other.opacities);
        self.sh.extend_from_slice(&other.sh);
        self.normals.extend_from_slice(&other.normals);
        self.angles.extend_from_slice(&other.angles);
    }

    /// Rows in the given order.
    pub fn select(&self, rows: impl IntoIterator<Item = usize>) -> Self {
        let mut out = Self::empty(self.space);
        for i in rows {
            out.push_from(self, i);
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Gaussian2DSet<U> {
        let c3 = |v: &[T; 3]| [U::of(v[0].f64()), U::of(v[1].f64()), U::of(v[2].f64())];
        Gaussian2DSet {
            positions: self.positions.iter().map(c3).collect(),
            scales: self
                .scales
                .iter()
                .map(|s| [U::of(s[0].f64()), U::of(s[1].f64())])
                .collect(),
            opacities: self.opacities.iter().map(|o| U::of(o.f64())).collect(),
            sh: self
                .sh
                .iter()
                .map(|c| std::array::from_fn(|k| U::of(c[k].f64())))
                .collect(),
            normals: self.normals.iter().map(c3).collect(),
            angles: self.angles.iter().map(|a| U::of(a.f64())).collect(),
            space: self.space,
        }
    }
}

pub fn rgb_to_sh_dc(rgb: [f64; 3]) -> [f64; 3] {
    [
        (rgb[0] - 0.5) / SH_C0,
        (rgb[1] - 0.5) / SH_C0,
        (rgb[2] - 0.5) / SH_C0,
    ]
}

/// One Gaussian per normalized point: disk radius from point spacing, fully
/// opaque, oriented by the estimated normal with zero in-plane angle, and a
/// view-independent color.
pub fn initialize_gaussians<T: Real>(
    normalized: &PointCloud,
    min_dists: &[f64],
) -> Result<Gaussian2DSet<T>> {
    let normals = normalized.normals().ok_or(Error::MissingNormals)?;
    if min_dists.len() != normalized.len() {
        return Err(Error::invalid(format!(
            "{} spacing values for {} points",
            min_dists.len(),
            normalized.len()
        )));
    }
    if let Some(i) = min_dists.iter().position(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(Error::invalid(format!("non-positive spacing at point {i}")));
    }
    let n = normalized.len();
    let mut sh = vec![[T::zero(); SH_COEFFS]; n];
    for (row, rgb) in sh.iter_mut().zip(normalized.colors()) {
        let dc = rgb_to_sh_dc(*rgb);
        for ch in 0..3 {
            row[ch] = T::of(dc[ch]);
        }
    }
    Ok(Gaussian2DSet {
        positions: normalized.positions().iter().map(|&p| vec3::cast(p)).collect(),
        scales: min_dists.iter().map(|&d| [T::of(d), T::of(d)]).collect(),
        opacities: vec![T::one(); n],
        sh,
        normals: normals.iter().map(|&p| vec3::cast(p)).collect(),
        angles: vec![T::zero(); n],
        space: Space::Normalized,
    })
}

pub fn denormalize_gaussians<T: Real>(
    g: &Gaussian2DSet<T>,
    t: &NormalizationTransform,
) -> Result<Gaussian2DSet<T>> {
    if g.space != Space::Normalized {
        return Err(Error::InvalidState("Gaussian set is already in world space".into()));
    }
    let s = T::of(t.scale);
    let c: Vec3<T> = vec3::cast(t.center);
    let mut out = g.clone();
    for p in &mut out.positions {
        *p = vec3::add(vec3::scale(*p, s), c);
    }
    for sc in &mut out.scales {
        sc[0] *= s;
        sc[1] *= s;
    }
    out.space = Space::World;
    Ok(out)
}

/// Inverse of [`denormalize_gaussians`].
pub fn normalize_gaussians<T: Real>(g: &Gaussian2DSet<T>, t: &NormalizationTransform) -> Result<Gaussian2DSet<T>> {
    if g.space != Space::World {
        return Err(Error::InvalidState("Gaussian set is already normalized".into()));
    }
    if !(t.scale > 0.0) {
        return Err(Error::DegenerateCloud);
    }
    let inv = T::of(1.0 / t.scale);
    let c: Vec3<T> = vec3::cast(t.center);
    let mut out = g.clone();
    for p in &mut out.positions {
        *p = vec3::scale(vec3::sub(*p, c), inv);
    }
    for sc in &mut out.scales {
        sc[0] *= inv;
        sc[1] *= inv;
    }
    out.space = Space::Normalized;
    Ok(out)
}

/// `a` followed by `b`.
pub fn merge_sets<T: Real>(a: &Gaussian2DSet<T>, b: &Gaussian2DSet<T>) -> Result<Gaussian2DSet<T>> {
    if a.space != b.space {
        return Err(Error::InvalidState(format!(
            "cannot merge {:?} and {:?} sets",
            a.space, b.space
        )));
    }
    let mut out = a.clone();
    out.extend_from(b);
    Ok(out)
}

/// Real SH basis up to degree 2 evaluated at a unit direction.
#[inline]
pub fn sh_basis<T: Real>(dir: Vec3<T>) -> [T; SH_BASIS] {
    let [x, y, z] = dir;
    let c1 = T::of(SH_C1);
    [
        T::of(SH_C0),
        -c1 * y,
        c1 * z,
        -c1 * x,
        T::of(SH_C2[0]) * x * y,
        T::of(SH_C2[1]) * y * z,
        T::of(SH_C2[2]) * (T::of(2.0) * z * z - x * x - y * y),
        T::of(SH_C2[3]) * x * z,
        T::of(SH_C2[4]) * (x * x - y * y),
    ]
}

/// Unclamped color (`basis . coeffs + 0.5`) per channel.
#[inline]
pub fn sh_color_raw<T: Real>(coeffs: &[T; SH_COEFFS], basis: &[T; SH_BASIS]) -> [T; 3] {
    let mut rgb = [T::of(0.5); 3];
    for k in 0..SH_BASIS {
        for ch in 0..3 {
            rgb[ch] += basis[k] * coeffs[k * 3 + ch];
        }
    }
    rgb
}

pub fn eval_sh<T: Real>(coeffs: &[T; SH_COEFFS], dir: Vec3<T>) -> [T; 3] {
    let raw = sh_color_raw(coeffs, &sh_basis(dir));
    raw.map(|v| v.max(T::zero()).min(T::one()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn to_matrix(&self) -> Mat3 {
        let Quaternion { w, x, y, z } = *self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        vec3::mat3_vec(&self.to_matrix(), v)
    }

    /// Shepperd's method: branch on the largest of the trace and diagonal.
    pub fn from_matrix(m: &Mat3) -> Self {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace >= m[0][0] && trace >= m[1][1] && trace >= m[2][2] {
            let s = (1.0 + trace).sqrt() * 2.0;
            Quaternion {
                w: 0.25 * s,
                x: (m[2][1] - m[1][2]) / s,
                y: (m[0][2] - m[2][0]) / s,
                z: (m[1][0] - m[0][1]) / s,
            }
        } else if m[0][0] >= m[1][1] && m[0][0] >= m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quaternion {
                w: (m[2][1] - m[1][2]) / s,
                x: 0.25 * s,
                y: (m[0][1] + m[1][0]) / s,
                z: (m[0][2] + m[2][0]) / s,
            }
        } else if m[1][1] >= m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quaternion {
                w: (m[0][2] - m[2][0]) / s,
                x: (m[0][1] + m[1][0]) / s,
                y: 0.25 * s,
                z: (m[1][2] + m[2][1]) / s,
            }
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quaternion {
                w: (m[1][0] - m[0][1]) / s,
                x: (m[0][2] + m[2][0]) / s,
                y: (m[1][2] + m[2][1]) / s,
                z: 0.25 * s,
            }
        };
        let n = q.norm();
        let q = Quaternion {
            w: q.w / n,
            x: q.x / n,
            y: q.y / n,
            z: q.z / n,
        };
        // Canonical sign: non-negative scalar part.
        if q.w < 0.0 {
            Quaternion {
                w: -q.w,
                x: -q.x,
                y: -q.y,
                z: -q.z,
            }
        } else {
            q
        }
    }
}

/// Rodrigues rotation matrix for a unit `axis` and `angle`.
pub fn rodrigues(axis: [f64; 3], angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [c + t * x * x, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, c + t * y * y, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, c + t * z * z],
    ]
}

/// `1 + n_z` below which a normal counts as antiparallel to +z.
pub fn antiparallel_eps<T: Real>() -> T {
    T::epsilon().sqrt()
}

/// Rotation taking +z onto `n`: Rodrigues about `z x n`, or a half turn about
/// +x when `n` points down -z.
pub fn align_z_to(n: [f64; 3]) -> Mat3 {
    if 1.0 + n[2] <= antiparallel_eps::<f64>() {
        return [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
    }
    let axis = vec3::cross([0.0, 0.0, 1.0], n);
    let sin = vec3::norm(axis);
    if sin == 0.0 {
        return vec3::identity3();
    }
    rodrigues(vec3::scale(axis, 1.0 / sin), sin.atan2(n[2]))
}

/// Orientation matrix of a splat with normal `n` and in-plane angle `alpha`:
/// align +z with `n`, then turn by `alpha` about `n`.
pub fn orientation_matrix(n: [f64; 3], alpha: f64) -> Result<Mat3> {
    let len = vec3::norm(n);
    if !(len > 1e-12) || !len.is_finite() || !alpha.is_finite() {
        return Err(Error::invalid("normal must be finite and non-zero"));
    }
    let n = vec3::scale(n, 1.0 / len);
    let align = align_z_to(n);
    let spin = rodrigues(n, alpha.rem_euclid(2.0 * PI));
    Ok(vec3::mat3_mul(&spin, &align))
}

pub fn normal_angle_to_quaternion(n: [f64; 3], alpha: f64) -> Result<Quaternion> {
    Ok(Quaternion::from_matrix(&orientation_matrix(n, alpha)?))
}

/// Orthonormal tangent frame of a splat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatFrame {
    pub t_u: [f64; 3],
    pub t_v: [f64; 3],
    pub n: [f64; 3],
}

pub fn quaternion_to_frame(q: &Quaternion) -> Result<SplatFrame> {
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("quaternion norm {} is not 1", q.norm())));
    }
    let m = q.to_matrix();
    Ok(SplatFrame {
        t_u: [m[0][0], m[1][0], m[2][0]],
        t_v: [m[0][1], m[1][1], m[2][1]],
        n: [m[0][2], m[1][2], m[2][2]],
    })
}

/// Closed-form tangent frame of `(n, alpha)` with everything the reverse pass
/// needs. `n` need not be unit; it is normalized first.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FrameJet<T> {
    pub n: Vec3<T>,
    pub t_u: Vec3<T>,
    pub t_v: Vec3<T>,
    cos: T,
    sin: T,
    inv_len: T,
    h: T,
    antiparallel: bool,
}

impl<T: Real> FrameJet<T> {
    pub fn new(n_raw: Vec3<T>, alpha: T) -> Self {
        let len = vec3::norm(n_raw);
        let inv_len = T::one() / len;
        let n = vec3::scale(n_raw, inv_len);
        let [nx, ny, nz] = n;
        let one = T::one();
        let antiparallel = one + nz <= antiparallel_eps::<T>();
        let (u0, v0, h) = if antiparallel {
            ([one, T::zero(), T::zero()], [T::zero(), -one, T::zero()], T::zero())
        } else {
            let h = one / (one + nz);
            (
                [one - nx * nx * h, -nx * ny * h, -nx],
                [-nx * ny * h, one - ny * ny * h, -ny],
                h,
            )
        };
        let (s, c) = alpha.sin_cos();
        let t_u = vec3::add(vec3::scale(u0, c), vec3::scale(v0, s));
        let t_v = vec3::sub(vec3::scale(v0, c), vec3::scale(u0, s));
        Self {
            n,
            t_u,
            t_v,
            cos: c,
            sin: s,
            inv_len,
            h,
            antiparallel,
        }
    }

    /// Pull gradients on `(t_u, t_v, unit n)` back to `(raw n, alpha)`.
    pub fn backward(&self, d_tu: Vec3<T>, d_tv: Vec3<T>, d_n: Vec3<T>) -> (Vec3<T>, T) {
        let d_alpha = vec3::dot(d_tu, self.t_v) - vec3::dot(d_tv, self.t_u);
        // t_u = c u0 + s v0, t_v = c v0 - s u0
        let (c, s) = (self.cos, self.sin);
        let d_u0 = vec3::sub(vec3::scale(d_tu, c), vec3::scale(d_tv, s));
        let d_v0 = vec3::add(vec3::scale(d_tu, s), vec3::scale(d_tv, c));
        let mut g = d_n;
        if !self.antiparallel {
            let [nx, ny, _] = self.n;
            let h = self.h;
            let two = T::of(2.0);
            // u0 = (1 - nx^2 h, -nx ny h, -nx), v0 = (-nx ny h, 1 - ny^2 h, -ny)
            g[0] += d_u0[0] * (-two * nx * h) + d_u0[1] * (-ny * h) - d_u0[2]
                + d_v0[0] * (-ny * h);
            g[1] += d_u0[1] * (-nx * h) + d_v0[0] * (-nx * h) + d_v0[1] * (-two * ny * h)
                - d_v0[2];
            let h2 = h * h;
            g[2] += d_u0[0] * nx * nx * h2
                + d_u0[1] * nx * ny * h2
                + d_v0[0] * nx * ny * h2
                + d_v0[1] * ny * ny * h2;
        }
        // Through n = n_raw / |n_raw|.
        let radial = vec3::dot(g, self.n);
        let d_raw = vec3::scale(vec3::sub(g, vec3::scale(self.n, radial)), self.inv_len);
        (d_raw, d_alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    #[test]
    fn identity_orientation() {
        let q = normal_angle_to_quaternion([0.0, 0.0, 1.0], 0.0).unwrap();
        assert!((q.w - 1.0).abs() < 1e-15 && q.x == 0.0 && q.y == 0.0 && q.z == 0.0);
        let f = quaternion_to_frame(&q).unwrap();
        assert!(close(f.t_u, [1.0, 0.0, 0.0], 1e-15));
        assert!(close(f.t_v, [0.0, 1.0, 0.0], 1e-15));
        assert!(close(f.n, [0.0, 0.0, 1.0], 1e-15));
    }

    #[test]
    fn x_normal_quaternion() {
        let q = normal_angle_to_quaternion([1.0, 0.0, 0.0], 0.0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((q.w - h).abs() < 1e-12 && q.x.abs() < 1e-12);
        assert!((q.y - h).abs() < 1e-12 && q.z.abs() < 1e-12);
        let f = quaternion_to_frame(&q).unwrap();
        assert!(close(f.n, [1.0, 0.0, 0.0], 1e-12));
    }

    #[test]
    fn antiparallel_normal_uses_half_turn_about_x() {
        let q = normal_angle_to_quaternion([0.0, 0.0, -1.0], 0.0).unwrap();
        assert!(q.w.abs() < 1e-12 && (q.x.abs() - 1.0).abs() < 1e-12);
        let f = quaternion_to_frame(&q).unwrap();
        assert!(close(f.n, [0.0, 0.0, -1.0], 1e-12));
        assert!(close(f.t_u, [1.0, 0.0, 0.0], 1e-12));
        let jet = FrameJet::<f64>::new([0.0, 0.0, -1.0], 0.0);
        assert!(close(jet.t_u, f.t_u, 1e-12) && close(jet.t_v, f.t_v, 1e-12));
    }

    #[test]
    fn zero_normal_rejected() {
        assert!(matches!(
            normal_angle_to_quaternion([0.0; 3], 1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let q = Quaternion {
            w: 2.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        };
        assert!(quaternion_to_frame(&q).is_err());
    }

    #[test]
    fn denormalize_examples() {
        let mut g = Gaussian2DSet::<f64>::empty(Space::Normalized);
        g.positions.push([1.0, 0.0, 0.0]);
        g.scales.push([0.1, 0.2]);
        g.opacities.push(0.5);
        g.sh.push([0.0; SH_COEFFS]);
        g.normals.push([0.0, 0.0, 1.0]);
        g.angles.push(0.3);
        let id = denormalize_gaussians(&g, &NormalizationTransform::IDENTITY).unwrap();
        assert_eq!(id.positions, g.positions);
        assert_eq!(id.space, Space::World);
        let t = NormalizationTransform {
            center: [5.0, 0.0, 0.0],
            scale: 2.0,
        };
        let w = denormalize_gaussians(&g, &t).unwrap();
        assert_eq!(w.positions[0], [7.0, 0.0, 0.0]);
        assert_eq!(w.scales[0], [0.2, 0.4]);
        assert_eq!((w.opacities[0], w.angles[0]), (0.5, 0.3));
        assert!(matches!(
            denormalize_gaussians(&w, &t),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn sh_dc_round_trip() {
        let dc = rgb_to_sh_dc([1.0, 0.0, 0.5]);
        assert!((dc[0] - 1.77245).abs() < 1e-5);
        assert!((dc[1] + 1.77245).abs() < 1e-5);
        assert_eq!(dc[2], 0.0);
        let mut c = [0.0; SH_COEFFS];
        c[..3].copy_from_slice(&dc);
        let rgb = eval_sh(&c, vec3::normalize([0.3, -0.2, 0.9]));
        assert!(close(rgb, [1.0, 0.0, 0.5], 1e-6));
        assert_eq!(eval_sh(&[0.0; SH_COEFFS], [0.0, 0.0, 1.0]), [0.5; 3]);
    }

    #[test]
    fn merge_rejects_mixed_spaces() {
        let a = Gaussian2DSet::<f32>::empty(Space::World);
        let b = Gaussian2DSet::<f32>::empty(Space::Normalized);
        assert!(matches!(merge_sets(&a, &b), Err(Error::InvalidState(_))));
        assert_eq!(merge_sets(&a, &a).unwrap().len(), 0);
    }
}
