//! PSNR and SSIM, plain and differentiable.

use crate::autograd::{PadMode, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MSE_FLOOR: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() || a.numel() == 0 {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair("mse", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.numel() as f64)
}

/// `10 log10(1 / max(mse, 1e-10))` for data in `[0,1]`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    Ok(-10.0 * mse(a, b)?.max(MSE_FLOOR).log10())
}

/// Mean SSIM over channels of `[C,H,W]` or `[N,C,H,W]` images.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let to4 = |t: &Tensor<f32>| -> Result<Tensor<f64>> {
        match t.shape() {
            &[c, h, w] => Ok(t.reshape([1, c, h, w])?.cast()),
            &[_, _, _, _] => Ok(t.cast()),
            s => Err(Error::shape("ssim", format!("expected [C,H,W] or [N,C,H,W], got {:?}", s))),
        }
    };
    let v = ssim_var(&Var::constant(to4(a)?), &Var::constant(to4(b)?))?;
    Ok(v.value().item())
}

/// Normalized 1-D Gaussian taps.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Depth-wise 11x11 Gaussian window weights for `channels` channels.
pub fn ssim_window<T: Real>(channels: usize) -> Tensor<T> {
    let g = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let k = SSIM_WINDOW;
    Tensor::from_fn([channels, 1, k, k], |i| {
        let (y, x) = ((i % (k * k)) / k, i % k);
        T::lit(g[y] * g[x])
    })
}

/// Differentiable mean SSIM of `[N,C,H,W]` tensors. Local statistics use a
/// zero-padded Gaussian window; when both spatial extents reach the window
/// size, the mean is taken over positions where the window fits entirely.
pub fn ssim_var<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let &[_, c, h, w] = a.shape() else {
        return Err(Error::shape("ssim", format!("expected [N,C,H,W], got {:?}", a.shape())));
    };
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let win = Var::constant(ssim_window::<T>(c));
    let blur = |x: &Var<T>| x.conv2d(&win, None, PadMode::Zeros, c);
    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let mu_aa = mu_a.mul(&mu_a)?;
    let mu_bb = mu_b.mul(&mu_b)?;
    let mu_ab = mu_a.mul(&mu_b)?;
    let s_aa = blur(&a.mul(a)?)?.sub(&mu_aa)?;
    let s_bb = blur(&b.mul(b)?)?.sub(&mu_bb)?;
    let s_ab = blur(&a.mul(b)?)?.sub(&mu_ab)?;
    let (c1, c2) = (T::lit(K1 * K1), T::lit(K2 * K2));
    let two = T::lit(2.0);
    let num = mu_ab.scale(two).add_scalar(c1).mul(&s_ab.scale(two).add_scalar(c2))?;
    let den = mu_aa.add(&mu_bb)?.add_scalar(c1).mul(&s_aa.add(&s_bb)?.add_scalar(c2))?;
    let map = num.div(&den)?;
    let r = SSIM_WINDOW / 2;
    let map = if h >= SSIM_WINDOW && w >= SSIM_WINDOW { map.crop(r, r, h - 2 * r, w - 2 * r)? } else { map };
    Ok(map.mean())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cases() {
        let z = Tensor::<f32>::zeros([3, 8, 8]);
        assert_eq!(psnr(&z, &z).unwrap(), 100.0);
        let tenth = Tensor::full([3, 8, 8], 0.1f32);
        assert!((psnr(&z, &tenth).unwrap() - 20.0).abs() < 1e-6);
        assert_eq!(psnr(&z, &Tensor::ones([3, 8, 8])).unwrap(), 0.0);
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let x = Tensor::from_fn([3, 16, 13], |i| ((i * 31) % 17) as f32 / 16.0);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (a, b) = (0.2f64, 0.7f64);
        let x = Tensor::full([3, 16, 16], a as f32);
        let y = Tensor::full([3, 16, 16], b as f32);
        let (a, b) = (a as f32 as f64, b as f32 as f64);
        let c1 = 1e-4;
        let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert!((ssim(&x, &y).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn window_is_normalized() {
        let w = ssim_window::<f64>(1);
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }
}
