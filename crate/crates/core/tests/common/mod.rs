#![allow(dead_code)]

use rand::Rng;
use splatpatch::ImageBuffer;

/// Mean SSIM by direct summation of an 11x11 Gaussian window (sigma 1.5) at
/// every fully contained window position, averaged over channels.
pub fn brute_ssim(a: &ImageBuffer<f64>, b: &ImageBuffer<f64>) -> f64 {
    let (w, h) = (a.width, a.height);
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for ch in 0..3 {
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = win[i][j] / total;
                        let idx = ((y0 + i) * w + x0 + j) * 3 + ch;
                        let (x, y) = (a.data[idx], b.data[idx]);
                        ma += k * x;
                        mb += k * y;
                        saa += k * x * x;
                        sbb += k * y * y;
                        sab += k * x * y;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> ImageBuffer<f64> {
    let data = (0..w * h * 3).map(|_| rng.random::<f64>()).collect();
    ImageBuffer::from_data(w, h, data).unwrap()
}

/// `base` plus uniform noise of amplitude `amp`, clamped to [0, 1].
pub fn perturbed(rng: &mut impl Rng, base: &ImageBuffer<f64>, amp: f64) -> ImageBuffer<f64> {
    let data = base.data.iter().map(|v| (v + rng.random_range(-amp..=amp)).clamp(0.0, 1.0)).collect();
    ImageBuffer::from_data(base.width, base.height, data).unwrap()
}
