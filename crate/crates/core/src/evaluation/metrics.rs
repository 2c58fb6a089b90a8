use crate::data_io::ImageBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio for unit-range images, capped at 100 dB.
pub fn psnr(x: &ImageBatch, y: &ImageBatch) -> Result<f64> {
    let (a, b) = (x.tensor(), y.tensor());
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "psnr", left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let mse = a.data().iter().zip(b.data()).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / a.numel() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Per-pixel channel-mean of `|x - xbar|` for each image, each map scaled
/// so that its maximum is 1. Output is `N x 1 x H x W`.
pub fn residual_map(x: &ImageBatch, xbar: &ImageBatch) -> Result<ImageBatch> {
    let (a, b) = (x.tensor(), xbar.tensor());
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "residual_map", left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let (n, c, h, w) = a.dims4();
    let plane = h * w;
    let mut out = vec![0f32; n * plane];
    for i in 0..n {
        let map = &mut out[i * plane..(i + 1) * plane];
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            for (m, (&p, &q)) in map.iter_mut().zip(a.data()[off..off + plane].iter().zip(&b.data()[off..off + plane])) {
                *m += (p - q).abs() / c as f32;
            }
        }
        let max = map.iter().copied().fold(0f32, f32::max);
        if max > 0.0 {
            map.iter_mut().for_each(|m| *m /= max);
        }
    }
    ImageBatch::new(Tensor::new(vec![n, 1, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(shape: [usize; 4], v: f32) -> ImageBatch {
        ImageBatch::new(Tensor::full(&shape, v)).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let x = batch([1, 3, 8, 8], 0.3);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        assert!(psnr(&batch([1, 1, 8, 8], 1.0), &batch([1, 1, 8, 8], 0.0)).unwrap().abs() < 1e-12);
        assert!((psnr(&batch([1, 1, 8, 8], 0.6), &batch([1, 1, 8, 8], 0.5)).unwrap() - 20.0).abs() < 1e-5);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!(psnr(&x, &batch([1, 3, 8, 9], 0.3)).is_err());
    }

    #[test]
    fn residual_of_identical_is_zero() {
        let x = batch([2, 3, 8, 8], 0.4);
        let r = residual_map(&x, &x).unwrap();
        assert_eq!(r.dims(), (2, 1, 8, 8));
        assert!(r.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_residual() {
        let x = batch([1, 3, 8, 8], 0.4);
        let mut t = x.tensor().clone();
        t.data_mut()[64 + 3 * 8 + 5] = 0.9;
        let r = residual_map(&x, &ImageBatch::new(t).unwrap()).unwrap();
        let nz: Vec<usize> = r.tensor().data().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(nz, vec![3 * 8 + 5]);
        assert_eq!(r.tensor().data()[3 * 8 + 5], 1.0);
    }
}
