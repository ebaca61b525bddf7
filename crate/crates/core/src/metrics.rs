//! Image losses and quality metrics with gradients.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated only where the
//! window fits inside the image, with K1 = 0.01 and K2 = 0.03 on `[0, 1]`
//! data, averaged over positions and channels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{GradBuffer, ImageBuffer};
use crate::real::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Default MSE weight in the combined loss.
pub const DEFAULT_BETA: f64 = 0.8;

fn check_shapes<T: Real>(pred: &ImageBuffer<T>, gt: &ImageBuffer<T>) -> Result<()> {
    if !pred.same_shape(gt) || pred.data.len() != gt.data.len() {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels, and its gradient with
/// respect to `pred`.
pub fn mse<T: Real>(pred: &ImageBuffer<T>, gt: &ImageBuffer<T>) -> Result<(f64, GradBuffer<T>)> {
    check_shapes(pred, gt)?;
    let n = pred.data.len() as f64;
    let value = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| {
            let d = p.f64() - g.f64();
            d * d
        })
        .sum::<f64>()
        / n;
    let scale = T::of(2.0 / n);
    let grad = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&p, &g)| (p - g) * scale)
        .collect();
    Ok((value, ImageBuffer::from_data(pred.width, pred.height, grad)?))
}

/// `10 log10(1 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(pred: &ImageBuffer<T>, gt: &ImageBuffer<T>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let n = pred.data.len() as f64;
    let m = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| (p.f64() - g.f64()).powi(2))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Normalized 1-D Gaussian window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable correlation of one `w x h` plane.
fn filter_valid<T: Real>(src: &[T], w: usize, h: usize, win: &[T; SSIM_WINDOW]) -> Vec<T> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![T::zero(); ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut s = T::zero();
            for (k, wk) in win.iter().enumerate() {
                s += *wk * src[y * w + x + k];
            }
            rows[y * ow + x] = s;
        }
    }
    let mut out = vec![T::zero(); ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = T::zero();
            for (k, wk) in win.iter().enumerate() {
                s += *wk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatter an `ow x oh` map back onto `w x h`.
fn filter_valid_adjoint<T: Real>(map: &[T], w: usize, h: usize, win: &[T; SSIM_WINDOW]) -> Vec<T> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![T::zero(); ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for (k, wk) in win.iter().enumerate() {
                rows[(y + k) * ow + x] += *wk * v;
            }
        }
    }
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (k, wk) in win.iter().enumerate() {
                out[y * w + x + k] += *wk * v;
            }
        }
    }
    out
}

/// Mean SSIM and its gradient with respect to `pred`.
pub fn ssim<T: Real>(pred: &ImageBuffer<T>, gt: &ImageBuffer<T>) -> Result<(f64, GradBuffer<T>)> {
    check_shapes(pred, gt)?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let win = gaussian_window().map(T::of);
    let c1 = T::of(SSIM_C1);
    let c2 = T::of(SSIM_C2);
    let two = T::of(2.0);
    let positions = (w - SSIM_WINDOW + 1) * (h - SSIM_WINDOW + 1);
    let norm = T::of(1.0 / (positions as f64 * 3.0));

    let per_channel: Vec<(f64, Vec<T>)> = (0..3)
        .into_par_iter()
        .map(|ch| {
            let x: Vec<T> = pred.data.iter().skip(ch).step_by(3).copied().collect();
            let y: Vec<T> = gt.data.iter().skip(ch).step_by(3).copied().collect();
            let xx: Vec<T> = x.iter().map(|v| *v * *v).collect();
            let yy: Vec<T> = y.iter().map(|v| *v * *v).collect();
            let xy: Vec<T> = x.iter().zip(&y).map(|(a, b)| *a * *b).collect();
            let mx = filter_valid(&x, w, h, &win);
            let my = filter_valid(&y, w, h, &win);
            let exx = filter_valid(&xx, w, h, &win);
            let eyy = filter_valid(&yy, w, h, &win);
            let exy = filter_valid(&xy, w, h, &win);
            let mut sum = 0.0;
            let mut g_mu = vec![T::zero(); positions];
            let mut g_xx = vec![T::zero(); positions];
            let mut g_xy = vec![T::zero(); positions];
            for p in 0..positions {
                let (ux, uy) = (mx[p], my[p]);
                let sxx = exx[p] - ux * ux;
                let syy = eyy[p] - uy * uy;
                let sxy = exy[p] - ux * uy;
                let a1 = two * ux * uy + c1;
                let a2 = two * sxy + c2;
                let b1 = ux * ux + uy * uy + c1;
                let b2 = sxx + syy + c2;
                let s = a1 * a2 / (b1 * b2);
                sum += s.f64();
                // Partials with E[x^2], E[xy] held fixed.
                let d_sxx = -s / b2;
                let d_sxy = two * a1 / (b1 * b2);
                let d_ux = two * uy * a2 / (b1 * b2) - two * ux * s / b1;
                g_mu[p] = (d_ux + d_sxx * (-two * ux) + d_sxy * (-uy)) * norm;
                g_xx[p] = d_sxx * norm;
                g_xy[p] = d_sxy * norm;
            }
            let a_mu = filter_valid_adjoint(&g_mu, w, h, &win);
            let a_xx = filter_valid_adjoint(&g_xx, w, h, &win);
            let a_xy = filter_valid_adjoint(&g_xy, w, h, &win);
            let grad = (0..w * h)
                .map(|i| a_mu[i] + two * x[i] * a_xx[i] + y[i] * a_xy[i])
                .collect();
            (sum, grad)
        })
        .collect();

    let value = per_channel.iter().map(|(s, _)| *s).sum::<f64>() / (positions as f64 * 3.0);
    let mut grad = ImageBuffer::zeros(w, h);
    for (ch, (_, g)) in per_channel.iter().enumerate() {
        for (i, v) in g.iter().enumerate() {
            grad.data[i * 3 + ch] = *v;
        }
    }
    Ok((value, grad))
}

/// Loss of one view: `beta * mse + (1 - beta) * (1 - ssim)`.
#[derive(Debug, Clone)]
pub struct LossValue<T> {
    pub total: f64,
    pub mse: f64,
    pub ssim: f64,
    /// Gradient of the aggregate loss (already divided by the view count).
    pub d_image: GradBuffer<T>,
}

#[derive(Debug, Clone)]
pub struct CombinedLoss<T> {
    pub views: Vec<LossValue<T>>,
    /// Mean of the per-view totals.
    pub total: f64,
}

pub fn loss_total(beta: f64, mse: f64, ssim: f64) -> f64 {
    beta * mse + (1.0 - beta) * (1.0 - ssim)
}

pub fn view_loss<T: Real>(pred: &ImageBuffer<T>, gt: &ImageBuffer<T>, beta: f64, grad_scale: f64) -> Result<LossValue<T>> {
    let (m, dm) = mse(pred, gt)?;
    let (s, ds) = ssim(pred, gt)?;
    let bm = T::of(beta * grad_scale);
    let bs = T::of((1.0 - beta) * grad_scale);
    let d_image = ImageBuffer::from_data(
        pred.width,
        pred.height,
        dm.data.iter().zip(&ds.data).map(|(a, b)| bm * *a - bs * *b).collect(),
    )?;
    Ok(LossValue {
        total: loss_total(beta, m, s),
        mse: m,
        ssim: s,
        d_image,
    })
}

/// Mean over views of the per-view losses; gradients are scaled by
/// `1 / views`.
pub fn combined_loss<T: Real>(preds: &[ImageBuffer<T>], gts: &[ImageBuffer<T>], beta: f64) -> Result<CombinedLoss<T>> {
    if preds.is_empty() {
        return Err(Error::invalid("combined loss needs at least one view"));
    }
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth views",
            preds.len(),
            gts.len()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta {beta} outside [0, 1]")));
    }
    let scale = 1.0 / preds.len() as f64;
    let views = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| view_loss(p, g, beta, scale))
        .collect::<Result<Vec<_>>>()?;
    let total = views.iter().map(|v| v.total).sum::<f64>() * scale;
    Ok(CombinedLoss { views, total })
}
