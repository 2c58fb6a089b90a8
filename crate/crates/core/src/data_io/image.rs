use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unit-range image array in `N x C x H x W` layout, `C` = 1 or 3.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch(Tensor<f32>);

pub const MIN_SIDE: usize = 8;

impl ImageBatch {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.shape().len() != 4 {
            return Err(Error::InvalidInput(format!("image batch must be N x C x H x W, got {:?}", t.shape())));
        }
        let (n, c, h, w) = t.dims4();
        if n == 0 || !(c == 1 || c == 3) {
            return Err(Error::InvalidInput(format!("image batch needs N >= 1 and C in {{1, 3}}, got {:?}", t.shape())));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::InvalidInput(format!("image {h}x{w} is below the {MIN_SIDE}x{MIN_SIDE} minimum")));
        }
        if !t.all_finite() {
            return Err(Error::InvalidInput("image batch contains non-finite values".into()));
        }
        Ok(ImageBatch(t))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4()
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> ImageBatch {
        ImageBatch(self.0.slice_batch(i, i + 1))
    }

    pub fn stack(parts: &[ImageBatch]) -> Result<ImageBatch> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("cannot stack an empty list of images".into()));
        }
        let first = parts[0].0.shape()[1..].to_vec();
        if parts.iter().any(|p| p.0.shape()[1..] != first[..]) {
            return Err(Error::InvalidInput("stacked images differ in shape".into()));
        }
        let tensors: Vec<Tensor<f32>> = parts.iter().map(|p| p.0.clone()).collect();
        Ok(ImageBatch(Tensor::stack_batch(&tensors)))
    }

    /// Builds a single image from interleaved 8-bit samples, `v / 255`.
    pub fn from_interleaved_u8(width: usize, height: usize, channels: usize, samples: &[u8]) -> Result<Self> {
        if samples.len() != width * height * channels {
            return Err(Error::InvalidInput("sample count does not match image size".into()));
        }
        let mut data = vec![0.0f32; samples.len()];
        let plane = width * height;
        for (i, &s) in samples.iter().enumerate() {
            let (px, ch) = (i / channels, i % channels);
            data[ch * plane + px] = f32::from(s) / 255.0;
        }
        ImageBatch::new(Tensor::new(vec![1, channels, height, width], data))
    }

    /// Interleaved 8-bit samples of image `i`, `round(255 v)` with ties to
    /// even after clamping to `[0, 1]`.
    pub fn to_interleaved_u8(&self, i: usize) -> Vec<u8> {
        let (_, c, h, w) = self.dims();
        let plane = h * w;
        let img = &self.0.data()[i * c * plane..(i + 1) * c * plane];
        let mut out = vec![0u8; c * plane];
        for ch in 0..c {
            for px in 0..plane {
                out[px * c + ch] = to_u8(img[ch * plane + px]);
            }
        }
        out
    }

    /// True when every sample lies exactly on the `k / 255` grid.
    pub fn is_on_8bit_grid(&self) -> bool {
        self.0.data().iter().all(|&v| (0.0..=1.0).contains(&v) && f32::from(to_u8(v)) / 255.0 == v)
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

pub(crate) fn open_dynamic(path: &Path) -> Result<DynamicImage> {
    let decode_err = |message: String| Error::Decode { path: path.to_path_buf(), message };
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))
}

pub(crate) fn dynamic_to_batch(img: &DynamicImage, force_rgb: bool) -> Result<ImageBatch> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() || force_rgb {
        ImageBatch::from_interleaved_u8(w, h, 3, img.to_rgb8().as_raw())
    } else {
        ImageBatch::from_interleaved_u8(w, h, 1, img.to_luma8().as_raw())
    }
}

/// Decodes a PNG, PPM/PGM or JPEG file into a single-image batch. Colour
/// files yield RGB (`C = 3`), grayscale files `C = 1`.
pub fn decode_image(path: impl AsRef<Path>) -> Result<ImageBatch> {
    let path = path.as_ref();
    let img = open_dynamic(path)?;
    dynamic_to_batch(&img, false).map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })
}

fn save(batch: &ImageBatch, i: usize, path: &Path, format: ImageFormat) -> Result<()> {
    let (_, c, h, w) = batch.dims();
    let color = if c == 3 { image::ExtendedColorType::Rgb8 } else { image::ExtendedColorType::L8 };
    image::save_buffer_with_format(path, &batch.to_interleaved_u8(i), w as u32, h as u32, color, format)
        .map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", path.display())))
}

/// Writes image `i` as binary PPM (colour) or PGM (grayscale).
pub fn write_pnm(batch: &ImageBatch, i: usize, path: impl AsRef<Path>) -> Result<()> {
    save(batch, i, path.as_ref(), ImageFormat::Pnm)
}

pub fn write_png(batch: &ImageBatch, i: usize, path: impl AsRef<Path>) -> Result<()> {
    save(batch, i, path.as_ref(), ImageFormat::Png)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_raw_ppm(path: &Path, w: usize, h: usize, v: u8) {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend(std::iter::repeat_n(v, w * h * 3));
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn decodes_ppm_samples() {
        let dir = tempfile::tempdir().unwrap();
        for (v, want) in [(255u8, 1.0f32), (0, 0.0), (128, 128.0 / 255.0)] {
            let p = dir.path().join(format!("v{v}.ppm"));
            write_raw_ppm(&p, 8, 8, v);
            let b = decode_image(&p).unwrap();
            assert_eq!(b.dims(), (1, 3, 8, 8));
            assert!(b.tensor().data().iter().all(|&x| x == want));
        }
        assert!((128.0f32 / 255.0 - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn two_by_two_ppm_is_readable_but_not_a_batch() {
        // 2x2 decodes as pixels but violates the minimum batch side.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tiny.ppm");
        write_raw_ppm(&p, 2, 2, 255);
        let img = open_dynamic(&p).unwrap();
        assert!(img.to_rgb8().pixels().all(|px| px.0 == [255, 255, 255]));
        assert!(decode_image(&p).is_err());
    }

    #[test]
    fn corrupt_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        let err = decode_image(&p).unwrap_err().to_string();
        assert!(err.contains("bad.png"), "{err}");
    }

    #[test]
    fn rounding_is_ties_to_even() {
        assert_eq!(to_u8(0.5), 128);
        assert_eq!(to_u8(-0.2), 0);
        assert_eq!(to_u8(1.7), 255);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pnm_round_trip_is_identity(samples in proptest::collection::vec(any::<u8>(), 3 * 9 * 8), gray in any::<bool>()) {
            let dir = tempfile::tempdir().unwrap();
            let c = if gray { 1 } else { 3 };
            let img = ImageBatch::from_interleaved_u8(9, 8, c, &samples[..c * 72]).unwrap();
            let p = dir.path().join("x.pnm");
            write_pnm(&img, 0, &p).unwrap();
            let back = decode_image(&p).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
