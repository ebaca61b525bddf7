//! Small fixed-size vector helpers on `[T; 3]`.

use crate::real::Real;
use num_traits::Float;

pub type Vec3<T> = [T; 3];

#[inline(always)]
pub fn add<T: Float>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline(always)]
pub fn sub<T: Float>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline(always)]
pub fn scale<T: Float>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline(always)]
pub fn dot<T: Float>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline(always)]
pub fn cross<T: Float>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline(always)]
pub fn norm<T: Float>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

#[inline(always)]
pub fn normalize<T: Float>(a: Vec3<T>) -> Vec3<T> {
    scale(a, T::one() / norm(a))
}

/// Accumulate `s * b` into `a`.
#[inline(always)]
pub fn axpy<T: Float>(a: &mut Vec3<T>, s: T, b: Vec3<T>) {
    a[0] = a[0] + s * b[0];
    a[1] = a[1] + s * b[1];
    a[2] = a[2] + s * b[2];
}

#[inline(always)]
pub fn cast<T: Real>(a: [f64; 3]) -> Vec3<T> {
    [T::of(a[0]), T::of(a[1]), T::of(a[2])]
}

#[inline(always)]
pub fn to_f64<T: Real>(a: Vec3<T>) -> [f64; 3] {
    [a[0].f64(), a[1].f64(), a[2].f64()]
}

pub type Mat3 = [[f64; 3]; 3];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_vec<T: Float>(m: &[[T; 3]; 3], v: Vec3<T>) -> Vec3<T> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat3_transpose<T: Copy>(m: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn identity3() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}
