use std::io::Cursor;

use image::ImageFormat;
use jpeg_encoder::{ColorType, Encoder, SamplingFactor};

use super::{Image8, TraditionalCodec};
use crate::error::{Error, Result};

/// Baseline JPEG with standard tables and 4:2:0 chroma, quality 1..=100.
#[derive(Clone, Copy, Debug, Default)]
pub struct JpegCodec;

impl TraditionalCodec for JpegCodec {
    fn name(&self) -> &str {
        "jpeg"
    }

    fn encode(&self, image: &Image8, codec_param: u32) -> Result<Vec<u8>> {
        if !(1..=100).contains(&codec_param) {
            return Err(Error::Codec(format!("jpeg quality {codec_param} outside 1..=100")));
        }
        let color = match image.channels {
            1 => ColorType::Luma,
            3 => ColorType::Rgb,
            c => return Err(Error::Codec(format!("jpeg cannot encode {c} channels"))),
        };
        let (width, height) = match (u16::try_from(image.width), u16::try_from(image.height)) {
            (Ok(w), Ok(h)) => (w, h),
            _ => return Err(Error::Codec(format!("{}x{} exceeds jpeg limits", image.width, image.height))),
        };
        let mut out = Vec::new();
        let mut encoder = Encoder::new(&mut out, codec_param as u8);
        encoder.set_sampling_factor(SamplingFactor::F_2_2);
        encoder.encode(&image.samples, width, height, color).map_err(|e| Error::Codec(e.to_string()))?;
        Ok(out)
    }

    fn decode(&self, bytes: &[u8]) -> Result<Image8> {
        let img = image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Jpeg)
            .decode()
            .map_err(|e| Error::Codec(e.to_string()))?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            Ok(Image8 { width, height, channels: 3, samples: img.to_rgb8().into_raw() })
        } else {
            Ok(Image8 { width, height, channels: 1, samples: img.to_luma8().into_raw() })
        }
    }

    /// Entropy-coded scan data only; marker segments (tables, headers) are
    /// a fixed per-file cost and are not charged.
    fn payload_len(&self, bytes: &[u8]) -> usize {
        jpeg_scan_payload_len(bytes).unwrap_or(bytes.len())
    }
}

/// Length of the entropy-coded data between the first SOS header and the
/// EOI marker, or `None` if the stream is not a parsable JPEG.
pub fn jpeg_scan_payload_len(bytes: &[u8]) -> Option<usize> {
    if bytes.len() < 4 || bytes[0] != 0xFF || bytes[1] != 0xD8 {
        return None;
    }
    let mut pos = 2;
    let start = loop {
        if pos + 1 >= bytes.len() || bytes[pos] != 0xFF {
            return None;
        }
        let marker = bytes[pos + 1];
        match marker {
            0xFF => pos += 1,
            0x01 | 0xD0..=0xD7 => pos += 2,
            _ => {
                if pos + 3 >= bytes.len() {
                    return None;
                }
                let len = u16::from_be_bytes([bytes[pos + 2], bytes[pos + 3]]) as usize;
                if marker == 0xDA {
                    break pos + 2 + len;
                }
                pos += 2 + len;
            }
        }
    };
    let n = bytes.len();
    let end = if bytes[n - 2] == 0xFF && bytes[n - 1] == 0xD9 { n - 2 } else { n };
    (start <= end).then(|| end - start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec_bridge::{encode_decode, RatePoint};
    use crate::data_io::ImageBatch;
    use crate::tensor::Tensor;

    fn textured(w: usize, h: usize) -> ImageBatch {
        let mut d = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5
                        + 0.25 * ((x as f32 * 0.7 + c as f32).sin() * (y as f32 * 0.45).cos())
                        + 0.15 * (((x * 131 + y * 71 + c * 17) % 23) as f32 / 23.0 - 0.5);
                    d.push(crate::autograd::quantize8_value(v.clamp(0.0, 1.0)));
                }
            }
        }
        ImageBatch::new(Tensor::new(vec![1, 3, h, w], d)).unwrap()
    }

    #[test]
    fn flat_gray_is_cheap() {
        let x = ImageBatch::new(Tensor::full(&[1, 3, 64, 64], 128.0 / 255.0)).unwrap();
        let r = encode_decode(&JpegCodec, &x, RatePoint::new(3, 50, 2.0)).unwrap();
        assert!(r.bpp < 0.2, "flat image cost {} bpp", r.bpp);
        assert!(r.bpp > 0.0);
    }

    #[test]
    fn bpp_strictly_decreases_with_quality() {
        let x = textured(64, 48);
        let bpps: Vec<f64> = [85, 70, 50, 35, 20]
            .iter()
            .map(|&q| encode_decode(&JpegCodec, &x, RatePoint::new(1, q, 1.0)).unwrap().bpp)
            .collect();
        assert!(bpps.windows(2).all(|w| w[0] > w[1]), "{bpps:?}");
    }

    #[test]
    fn deterministic_round_trip() {
        let x = textured(32, 32);
        let a = encode_decode(&JpegCodec, &x, RatePoint::new(1, 70, 1.0)).unwrap();
        let b = encode_decode(&JpegCodec, &x, RatePoint::new(1, 70, 1.0)).unwrap();
        assert_eq!(a, b);
        assert!(a.recon.is_on_8bit_grid());
    }

    #[test]
    fn payload_excludes_headers() {
        let img = Image8 { width: 16, height: 16, channels: 3, samples: vec![100; 16 * 16 * 3] };
        let bytes = JpegCodec.encode(&img, 50).unwrap();
        let payload = jpeg_scan_payload_len(&bytes).unwrap();
        assert!(payload > 0 && payload + 300 < bytes.len(), "{payload} of {}", bytes.len());
        assert_eq!(jpeg_scan_payload_len(b"not a jpeg"), None);
    }
}
